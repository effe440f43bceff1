//! Inconsistency gating, the implicit and explicit answer heads, the
//! final-answer rule and mini-batch training under binary cross-entropy.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::{rgcn_backward, rgcn_forward, NodeFeatures, RgcnParams, RgcnTrace, Subgraph};
use crate::numerics::{affine_forward, bce_loss, dot, sigmoid, Matrix};
use crate::par;
use crate::text::normalize;

/// Which inconsistency signals feed the gates, always in the order
/// `(sim, u_al, u_ep)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FeatureSelector {
    pub sim: bool,
    pub al: bool,
    pub ep: bool,
}

impl FeatureSelector {
    pub fn new(sim: bool, al: bool, ep: bool) -> Result<Self> {
        if !(sim || al || ep) {
            return Err(Error::invalid("feature selector needs at least one of sim, al, ep"));
        }
        Ok(FeatureSelector { sim, al, ep })
    }

    pub fn len(&self) -> usize {
        usize::from(self.sim) + usize::from(self.al) + usize::from(self.ep)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for FeatureSelector {
    fn default() -> Self {
        FeatureSelector {
            sim: true,
            al: true,
            ep: false,
        }
    }
}

impl FromStr for FeatureSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (mut sim, mut al, mut ep) = (false, false, false);
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "sim" => sim = true,
                "al" => al = true,
                "ep" => ep = true,
                other => return Err(Error::invalid(format!("unknown selector feature `{other}`"))),
            }
        }
        FeatureSelector::new(sim, al, ep)
    }
}

impl fmt::Display for FeatureSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.sim, "sim"), (self.al, "al"), (self.ep, "ep")]
            .into_iter()
            .filter_map(|(on, name)| on.then_some(name))
            .collect();
        f.write_str(&parts.join(","))
    }
}

impl TryFrom<String> for FeatureSelector {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FeatureSelector> for String {
    fn from(s: FeatureSelector) -> String {
        s.to_string()
    }
}

pub fn inconsistency_features(sim: f64, u_al: f64, u_ep: f64, selector: FeatureSelector) -> Result<Vec<f64>> {
    if selector.is_empty() {
        return Err(Error::invalid("feature selector needs at least one of sim, al, ep"));
    }
    if !(sim.is_finite() && u_al.is_finite() && u_ep.is_finite()) {
        return Err(Error::NonFinite("inconsistency feature".into()));
    }
    Ok([(selector.sim, sim), (selector.al, u_al), (selector.ep, u_ep)]
        .into_iter()
        .filter_map(|(on, v)| on.then_some(v))
        .collect())
}

/// Mean and spread of one gate feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
}

impl Default for Moments {
    fn default() -> Self {
        Moments { mean: 0.0, std: 1.0 }
    }
}

impl Moments {
    /// Population moments; a zero spread maps to 1.
    pub fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count();
        if n == 0 {
            return Moments::default();
        }
        let mean = values.clone().sum::<f64>() / n as f64;
        let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        Moments {
            mean,
            std: if std > 0.0 { std } else { 1.0 },
        }
    }

    pub fn z(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }
}

/// Z-scoring statistics for the uncertainty features, fitted on training
/// data. Caption similarity is already bounded and enters the gates raw.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub al: Moments,
    pub ep: Moments,
}

impl FeatureStats {
    /// Fit on `(u_al, u_ep)` rows.
    pub fn fit(rows: &[(f64, f64)]) -> Self {
        FeatureStats {
            al: Moments::of(rows.iter().map(|r| r.0)),
            ep: Moments::of(rows.iter().map(|r| r.1)),
        }
    }

    pub fn standardize(&self, sim: f64, u_al: f64, u_ep: f64) -> (f64, f64, f64) {
        (sim, self.al.z(u_al), self.ep.z(u_ep))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    #[default]
    Gated,
    /// Both gate scores pinned to 1.
    Ungated,
}

/// Dense parameters of the gates and the two answer heads. Biases are
/// stored as column matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub w_v: Matrix,
    pub w_g: Matrix,
    pub w: Matrix,
    pub b: Matrix,
    pub w_ge: Matrix,
    pub b_ge: Matrix,
    pub w_vi: Matrix,
    pub b_vi: Matrix,
}

pub const FUSION_TENSOR_NAMES: [&str; 8] = [
    "fusion.w_v",
    "fusion.w_g",
    "fusion.w",
    "fusion.b",
    "fusion.w_ge",
    "fusion.b_ge",
    "fusion.w_vi",
    "fusion.b_vi",
];

impl FusionParams {
    /// Gates start neutral at 0.5 (zero rows); other weights are Glorot,
    /// biases zero.
    pub fn init<R: Rng + ?Sized>(gate_inputs: usize, dims: &ModelDims, answers: usize, rng: &mut R) -> Self {
        FusionParams {
            w_v: Matrix::zeros(1, gate_inputs),
            w_g: Matrix::zeros(1, gate_inputs),
            w: Matrix::glorot(answers, dims.implicit, rng),
            b: Matrix::zeros(answers, 1),
            w_ge: Matrix::glorot(dims.joint, dims.explicit, rng),
            b_ge: Matrix::zeros(dims.joint, 1),
            w_vi: Matrix::glorot(dims.joint, dims.implicit, rng),
            b_vi: Matrix::zeros(dims.joint, 1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        FusionParams {
            w_v: z(&self.w_v),
            w_g: z(&self.w_g),
            w: z(&self.w),
            b: z(&self.b),
            w_ge: z(&self.w_ge),
            b_ge: z(&self.b_ge),
            w_vi: z(&self.w_vi),
            b_vi: z(&self.b_vi),
        }
    }

    /// Order matches [`FUSION_TENSOR_NAMES`].
    pub fn tensors(&self) -> Vec<&Matrix> {
        vec![
            &self.w_v, &self.w_g, &self.w, &self.b, &self.w_ge, &self.b_ge, &self.w_vi, &self.b_vi,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.w_v,
            &mut self.w_g,
            &mut self.w,
            &mut self.b,
            &mut self.w_ge,
            &mut self.b_ge,
            &mut self.w_vi,
            &mut self.b_vi,
        ]
    }
}

/// `(σ(W_v · f), σ(W_g · f))`
pub fn gate_scores(features: &[f64], params: &FusionParams) -> Result<(f64, f64)> {
    let v = params.w_v.matvec(features)?[0];
    let g = params.w_g.matvec(features)?[0];
    Ok((sigmoid(v), sigmoid(g)))
}

/// Scale the implicit vector by `v` and every explicit node row by `g`.
pub fn gated_representations(z_implicit: &[f64], z_explicit: &Matrix, v: f64, g: f64) -> (Vec<f64>, Matrix) {
    let zv = z_implicit.iter().map(|x| v * x).collect();
    let mut zg = z_explicit.clone();
    zg.scale(g);
    (zv, zg)
}

/// `σ(W · z_v + b)` per answer.
pub fn implicit_scores(z_v: &[f64], params: &FusionParams) -> Result<Vec<f64>> {
    Ok(affine_forward(&params.w, params.b.as_slice(), z_v)?
        .into_iter()
        .map(sigmoid)
        .collect())
}

/// Bilinear knowledge score for answers bound to a node,
/// `σ((W_ge z_n + b_ge)ᵀ (W_vi z_v + b_vi))`; unbound answers score 0.
pub fn explicit_scores(
    z_g: &Matrix,
    z_v: &[f64],
    bindings: &[Option<usize>],
    params: &FusionParams,
) -> Result<Vec<f64>> {
    let q = affine_forward(&params.w_vi, params.b_vi.as_slice(), z_v)?;
    bindings
        .iter()
        .map(|b| match b {
            None => Ok(0.0),
            Some(n) => {
                if *n >= z_g.rows() {
                    return Err(Error::IndexOutOfRange {
                        index: *n,
                        len: z_g.rows(),
                    });
                }
                let a = affine_forward(&params.w_ge, params.b_ge.as_slice(), z_g.row(*n))?;
                Ok(sigmoid(dot(&a, &q)))
            }
        })
        .collect()
}

/// Elementwise max of both heads, then argmax; ties go to the lowest index.
pub fn predict_answer(y_implicit: &[f64], y_explicit: &[f64]) -> Result<(usize, f64)> {
    if y_implicit.len() != y_explicit.len() {
        return Err(Error::shape(format!(
            "{} implicit scores vs {} explicit scores",
            y_implicit.len(),
            y_explicit.len()
        )));
    }
    y_implicit
        .iter()
        .zip(y_explicit)
        .map(|(a, b)| a.max(*b))
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, s)| match best {
            Some((_, bs)) if bs >= s => best,
            _ => Some((i, s)),
        })
        .ok_or_else(|| Error::invalid("empty answer vocabulary"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnswerVocabulary {
    answers: Vec<String>,
    index: HashMap<String, usize>,
}

impl AnswerVocabulary {
    pub fn new(answers: Vec<String>) -> Result<Self> {
        let answers: Vec<String> = answers.iter().map(|a| normalize(a)).collect();
        let mut index = HashMap::new();
        for (i, a) in answers.iter().enumerate() {
            if index.insert(a.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate answer `{a}`")));
            }
        }
        Ok(AnswerVocabulary { answers, index })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn answer(&self, i: usize) -> &str {
        &self.answers[i]
    }

    pub fn index_of(&self, answer: &str) -> Option<usize> {
        self.index.get(&normalize(answer)).copied()
    }

    /// Node bound to each answer: exact match on the lowercased answer, then
    /// on its synonym.
    pub fn bind(&self, subgraph: &Subgraph, synonyms: &BTreeMap<String, String>) -> Vec<Option<usize>> {
        self.answers
            .iter()
            .map(|a| {
                subgraph
                    .node_index(a)
                    .or_else(|| synonyms.get(a).and_then(|s| subgraph.node_index(s)))
            })
            .collect()
    }

    /// `min(count / 3, 1)` per answer; answers outside the vocabulary are dropped.
    pub fn soft_targets<S: AsRef<str>>(&self, gt_answers: &[(S, u32)]) -> Vec<f64> {
        let mut counts = vec![0u32; self.len()];
        for (a, c) in gt_answers {
            if let Some(i) = self.index_of(a.as_ref()) {
                counts[i] += c;
            }
        }
        counts.into_iter().map(|c| (f64::from(c) / 3.0).min(1.0)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Word-vector width in node features.
    pub word: usize,
    /// Implicit embedding width.
    pub implicit: usize,
    /// Graph-convolution hidden width.
    pub hidden: usize,
    /// Explicit node embedding width.
    pub explicit: usize,
    /// Shared space of the explicit bilinear score.
    pub joint: usize,
}

impl ModelDims {
    pub fn node_input(&self) -> usize {
        NodeFeatures::width(self.word, self.implicit)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub selector: FeatureSelector,
    pub gate: GateMode,
    pub dims: ModelDims,
    /// Weight of the explicit BCE term.
    pub explicit_weight: f64,
    pub seed: u64,
}

/// Everything the model consumes for one question; all of it is constant
/// with respect to the trainable parameters.
#[derive(Debug, Clone)]
pub struct FusionInput {
    pub sim: f64,
    pub u_al: f64,
    pub u_ep: f64,
    pub z_implicit: Vec<f64>,
    pub subgraph: Subgraph,
    /// `None` when the subgraph is empty.
    pub node_features: Option<Matrix>,
    pub bindings: Vec<Option<usize>>,
}

impl FusionInput {
    pub fn has_bound_answers(&self) -> bool {
        self.node_features.is_some() && self.bindings.iter().any(Option::is_some)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardState {
    pub gate_input: Vec<f64>,
    pub v_score: f64,
    pub g_score: f64,
    pub z_v: Vec<f64>,
    pub y_implicit: Vec<f64>,
    pub y_explicit: Vec<f64>,
    rgcn: Option<RgcnTrace>,
    z_g: Option<Matrix>,
    query: Vec<f64>,
    keys: Vec<Option<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub implicit: f64,
    /// `None` when no answer is bound to a node and the term is omitted.
    pub explicit: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub fusion: FusionParams,
    pub rgcn: RgcnParams,
}

impl ModelGrads {
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut t = self.fusion.tensors();
        t.extend(self.rgcn.tensors());
        t
    }

    fn add_assign(&mut self, other: &ModelGrads) {
        let src = other.tensors();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            dst.add_scaled(1.0, s);
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut t = self.fusion.tensors_mut();
        t.extend(self.rgcn.tensors_mut());
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub index: usize,
    pub answer: String,
    pub score: f64,
    pub v_score: f64,
    pub g_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub answers: AnswerVocabulary,
    pub stats: FeatureStats,
    pub fusion: FusionParams,
    pub rgcn: RgcnParams,
}

impl Model {
    /// Fresh parameters drawn from `config.seed`.
    pub fn init(config: ModelConfig, answers: AnswerVocabulary, relations: Vec<String>, stats: FeatureStats) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.dims;
        let fusion = FusionParams::init(config.selector.len(), &d, answers.len(), &mut rng);
        let rgcn = RgcnParams::init(relations, &[d.node_input(), d.hidden, d.explicit], &mut rng);
        Model {
            config,
            answers,
            stats,
            fusion,
            rgcn,
        }
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut t = self.fusion.tensors();
        t.extend(self.rgcn.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut t = self.fusion.tensors_mut();
        t.extend(self.rgcn.tensors_mut());
        t
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names: Vec<String> = FUSION_TENSOR_NAMES.iter().map(|s| s.to_string()).collect();
        names.extend(self.rgcn.tensor_names());
        names
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.as_slice().len()).sum()
    }

    /// Standardized gate input for one question.
    pub fn gate_input(&self, sim: f64, u_al: f64, u_ep: f64) -> Result<Vec<f64>> {
        let (sim, al, ep) = self.stats.standardize(sim, u_al, u_ep);
        inconsistency_features(sim, al, ep, self.config.selector)
    }

    pub fn forward(&self, input: &FusionInput) -> Result<ForwardState> {
        if input.bindings.len() != self.answers.len() {
            return Err(Error::shape(format!(
                "{} answer bindings for a vocabulary of {}",
                input.bindings.len(),
                self.answers.len()
            )));
        }
        let gate_input = self.gate_input(input.sim, input.u_al, input.u_ep)?;
        let (v_score, g_score) = match self.config.gate {
            GateMode::Gated => gate_scores(&gate_input, &self.fusion)?,
            GateMode::Ungated => (1.0, 1.0),
        };
        let z_v: Vec<f64> = input.z_implicit.iter().map(|x| v_score * x).collect();
        let y_implicit = implicit_scores(&z_v, &self.fusion)?;
        let query = affine_forward(&self.fusion.w_vi, self.fusion.b_vi.as_slice(), &z_v)?;

        let mut y_explicit = vec![0.0; self.answers.len()];
        let mut keys = vec![None; self.answers.len()];
        let (mut rgcn, mut z_g) = (None, None);
        if let (true, Some(features)) = (input.has_bound_answers(), &input.node_features) {
            let trace = rgcn_forward(&input.subgraph, features, &self.rgcn)?;
            let (_, zg) = gated_representations(&[], trace.output(), 0.0, g_score);
            for (i, b) in input.bindings.iter().enumerate() {
                if let Some(n) = *b {
                    let a = affine_forward(&self.fusion.w_ge, self.fusion.b_ge.as_slice(), zg.row(n))?;
                    y_explicit[i] = sigmoid(dot(&a, &query));
                    keys[i] = Some(a);
                }
            }
            rgcn = Some(trace);
            z_g = Some(zg);
        }
        Ok(ForwardState {
            gate_input,
            v_score,
            g_score,
            z_v,
            y_implicit,
            y_explicit,
            rgcn,
            z_g,
            query,
            keys,
        })
    }

    /// Joint loss and exact gradients for every trainable matrix.
    pub fn loss_and_gradients(
        &self,
        input: &FusionInput,
        state: &ForwardState,
        targets: &[f64],
    ) -> Result<(LossBreakdown, ModelGrads)> {
        if targets.len() != self.answers.len() {
            return Err(Error::shape(format!(
                "{} targets for {} answers",
                targets.len(),
                self.answers.len()
            )));
        }
        let f = &self.fusion;
        let mut gf = f.zeros_like();
        let mut grgcn = self.rgcn.zeros_like();

        let (l_impl, dy) = bce_loss(&state.y_implicit, targets)?;
        let d_pre: Vec<f64> = dy
            .iter()
            .zip(&state.y_implicit)
            .map(|(d, y)| d * y * (1.0 - y))
            .collect();
        gf.w.add_outer(1.0, &d_pre, &state.z_v);
        crate::numerics::axpy(1.0, &d_pre, gf.b.as_mut_slice());
        let mut dz_v = vec![0.0; state.z_v.len()];
        f.w.add_matvec_t(&d_pre, &mut dz_v);

        let mut dg = 0.0;
        let bound: Vec<usize> = (0..self.answers.len()).filter(|&i| state.keys[i].is_some()).collect();
        let mut l_expl = None;
        if let (false, Some(trace), Some(z_g)) = (bound.is_empty(), &state.rgcn, &state.z_g) {
            let preds: Vec<f64> = bound.iter().map(|&i| state.y_explicit[i]).collect();
            let tg: Vec<f64> = bound.iter().map(|&i| targets[i]).collect();
            let (loss, dy) = bce_loss(&preds, &tg)?;
            l_expl = Some(loss);
            let lambda = self.config.explicit_weight;
            let mut dq = vec![0.0; state.query.len()];
            let mut dz_g = Matrix::zeros(z_g.rows(), z_g.cols());
            for (k, &i) in bound.iter().enumerate() {
                let y = preds[k];
                let ds = lambda * dy[k] * y * (1.0 - y);
                let key = state.keys[i].as_ref().expect("bound answer has a key");
                let node = input.bindings[i].expect("bound answer has a node");
                crate::numerics::axpy(ds, key, &mut dq);
                let da: Vec<f64> = state.query.iter().map(|q| ds * q).collect();
                gf.w_ge.add_outer(1.0, &da, z_g.row(node));
                crate::numerics::axpy(1.0, &da, gf.b_ge.as_mut_slice());
                f.w_ge.add_matvec_t(&da, dz_g.row_mut(node));
            }
            gf.w_vi.add_outer(1.0, &dq, &state.z_v);
            crate::numerics::axpy(1.0, &dq, gf.b_vi.as_mut_slice());
            f.w_vi.add_matvec_t(&dq, &mut dz_v);

            // z_g = g · Z
            let z = trace.output();
            dg = dot(dz_g.as_slice(), z.as_slice());
            dz_g.scale(state.g_score);
            grgcn = rgcn_backward(trace, &self.rgcn, &dz_g)?.params;
        }

        if self.config.gate == GateMode::Gated {
            let dv = dot(&dz_v, &input.z_implicit);
            let v = state.v_score;
            let g = state.g_score;
            gf.w_v.add_outer(dv * v * (1.0 - v), &[1.0], &state.gate_input);
            gf.w_g.add_outer(dg * g * (1.0 - g), &[1.0], &state.gate_input);
        }

        let total = l_impl + self.config.explicit_weight * l_expl.unwrap_or(0.0);
        Ok((
            LossBreakdown {
                total,
                implicit: l_impl,
                explicit: l_expl,
            },
            ModelGrads {
                fusion: gf,
                rgcn: grgcn,
            },
        ))
    }

    pub fn loss(&self, input: &FusionInput, targets: &[f64]) -> Result<f64> {
        let state = self.forward(input)?;
        let (l_impl, _) = bce_loss(&state.y_implicit, targets)?;
        let bound: Vec<usize> = (0..self.answers.len()).filter(|&i| state.keys[i].is_some()).collect();
        let l_expl = if bound.is_empty() {
            0.0
        } else {
            let preds: Vec<f64> = bound.iter().map(|&i| state.y_explicit[i]).collect();
            let tg: Vec<f64> = bound.iter().map(|&i| targets[i]).collect();
            bce_loss(&preds, &tg)?.0
        };
        Ok(l_impl + self.config.explicit_weight * l_expl)
    }

    pub fn predict(&self, input: &FusionInput) -> Result<Prediction> {
        let state = self.forward(input)?;
        let (index, score) = predict_answer(&state.y_implicit, &state.y_explicit)?;
        Ok(Prediction {
            index,
            answer: self.answers.answer(index).to_string(),
            score,
            v_score: state.v_score,
            g_score: state.g_score,
        })
    }

    /// Refuse to run with a selector other than the one the model was trained with.
    pub fn ensure_selector(&self, selector: FeatureSelector) -> Result<()> {
        if selector != self.config.selector {
            return Err(Error::ConfigMismatch(format!(
                "model was trained with selector `{}`, asked to run with `{selector}`",
                self.config.selector
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub input: FusionInput,
    pub targets: Vec<f64>,
}

/// Mini-batch gradient descent with momentum. Per-example gradients are
/// computed in parallel and summed in example order, so the loss trace is
/// bit-identical with or without the `parallel` feature.
pub fn fit(mut model: Model, examples: &[TrainingExample], config: &TrainConfig) -> Result<(Model, Vec<f64>)> {
    if examples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let batch_size = config.batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut velocity: Vec<Matrix> = model
        .tensors()
        .iter()
        .map(|t| Matrix::zeros(t.rows(), t.cols()))
        .collect();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(batch_size).enumerate() {
            let frozen = &model;
            let results = par::map(batch, |&i| {
                let ex = &examples[i];
                let state = frozen.forward(&ex.input)?;
                frozen.loss_and_gradients(&ex.input, &state, &ex.targets)
            });
            let mut sum: Option<ModelGrads> = None;
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, grads) = r?;
                batch_loss += loss.total;
                match sum.as_mut() {
                    Some(s) => s.add_assign(&grads),
                    None => sum = Some(grads),
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, batch {b}")));
            }
            epoch_loss += batch_loss;
            let grads = sum.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            for ((param, vel), g) in model
                .tensors_mut()
                .into_iter()
                .zip(velocity.iter_mut())
                .zip(grads.tensors())
            {
                vel.scale(config.momentum);
                vel.add_scaled(scale, g);
                param.add_scaled(-config.lr, vel);
            }
            if model.tensors().iter().any(|t| !t.is_finite()) {
                return Err(Error::NonFinite(format!("parameters after epoch {epoch}, batch {b}")));
            }
        }
        trace.push(epoch_loss / examples.len() as f64);
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, max_relative_error, FD_STEP};

    fn dims() -> ModelDims {
        ModelDims {
            word: 2,
            implicit: 3,
            hidden: 4,
            explicit: 3,
            joint: 2,
        }
    }

    fn params_with(f: impl FnOnce(&mut FusionParams)) -> FusionParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = FusionParams::init(2, &dims(), 2, &mut rng).zeros_like();
        f(&mut p);
        p
    }

    #[test]
    fn selector_examples() {
        let sim_only: FeatureSelector = "sim".parse().unwrap();
        assert_eq!(inconsistency_features(0.7, 1.2, 0.4, sim_only).unwrap(), vec![0.7]);
        let best: FeatureSelector = "sim,al".parse().unwrap();
        assert_eq!(inconsistency_features(0.7, 1.2, 0.4, best).unwrap(), vec![0.7, 1.2]);
        let all: FeatureSelector = "ep,al,sim".parse().unwrap();
        assert_eq!(inconsistency_features(0.7, 1.2, 0.4, all).unwrap().len(), 3);
        assert_eq!(all.to_string(), "sim,al,ep");
        assert!("".parse::<FeatureSelector>().is_err());
        assert!("sim,xx".parse::<FeatureSelector>().is_err());
        let none = FeatureSelector {
            sim: false,
            al: false,
            ep: false,
        };
        assert!(inconsistency_features(0.1, 0.1, 0.1, none).is_err());
    }

    #[test]
    fn gate_examples() {
        let zero = params_with(|_| {});
        assert_eq!(gate_scores(&[0.3, -2.0], &zero).unwrap(), (0.5, 0.5));
        let p = params_with(|p| p.w_v = Matrix::from_rows(&[vec![2.0, 0.0]]).unwrap());
        let (v, _) = gate_scores(&[1.0, 123.0], &p).unwrap();
        assert!((v - 0.880_797_077_977_882_3).abs() < 1e-12);
        let big = params_with(|p| p.w_v = Matrix::from_rows(&[vec![1e3, 0.0]]).unwrap());
        assert!(gate_scores(&[1.0, 0.0], &big).unwrap().0 > 1.0 - 1e-12);
        assert!(gate_scores(&[1.0], &zero).is_err());
    }

    #[test]
    fn gated_representation_examples() {
        let z = Matrix::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let (zv, zg) = gated_representations(&[2.0, -4.0], &z, 0.25, 1.0);
        assert_eq!(zv, vec![0.5, -1.0]);
        assert_eq!(zg, z);
        let (half, _) = gated_representations(&[3.0, 1.0], &z, 0.5, 1.0);
        assert_eq!(half, vec![1.5, 0.5]);
    }

    #[test]
    fn implicit_score_examples() {
        let zero = params_with(|_| {});
        assert_eq!(implicit_scores(&[1.0, 2.0, 3.0], &zero).unwrap(), vec![0.5, 0.5]);
        let biased = params_with(|p| p.b = Matrix::from_vec(2, 1, vec![50.0, 0.0]).unwrap());
        assert!(implicit_scores(&[0.0; 3], &biased).unwrap()[0] > 1.0 - 1e-12);
        let hand = params_with(|p| p.w = Matrix::from_rows(&[vec![1.0, 2.0, 0.0], vec![-1.0, 0.5, 0.0]]).unwrap());
        let y = implicit_scores(&[1.0, 1.0, 0.0], &hand).unwrap();
        assert!((y[0] - sigmoid(3.0)).abs() < 1e-15 && (y[1] - sigmoid(-0.5)).abs() < 1e-15);
    }

    #[test]
    fn explicit_score_examples() {
        let zero = params_with(|_| {});
        let zg = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(
            explicit_scores(&zg, &[1.0; 3], &[Some(0), None], &zero).unwrap(),
            vec![0.5, 0.0]
        );

        // one-dimensional joint space: keys 1.0, query 0.5
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one_d = ModelDims { joint: 1, ..dims() };
        let mut p = FusionParams::init(2, &one_d, 1, &mut rng).zeros_like();
        p.b_ge = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        p.b_vi = Matrix::from_vec(1, 1, vec![0.5]).unwrap();
        let y = explicit_scores(&zg, &[0.0; 3], &[Some(0)], &p).unwrap();
        assert!((y[0] - 0.622_459_331_201_854_6).abs() < 1e-12);

        // orthogonal transformed vectors
        let mut p = FusionParams::init(2, &dims(), 1, &mut rng).zeros_like();
        p.b_ge = Matrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        p.b_vi = Matrix::from_vec(2, 1, vec![0.0, 4.0]).unwrap();
        assert_eq!(explicit_scores(&zg, &[0.0; 3], &[Some(0)], &p).unwrap(), vec![0.5]);
    }

    #[test]
    fn predict_examples() {
        assert_eq!(predict_answer(&[0.1, 0.7, 0.3], &[0.0; 3]).unwrap(), (1, 0.7));
        assert_eq!(predict_answer(&[0.2, 0.9], &[0.95, 0.0]).unwrap(), (0, 0.95));
        assert_eq!(predict_answer(&[0.1, 0.8, 0.2, 0.8], &[0.0; 4]).unwrap().0, 1);
        assert!(predict_answer(&[], &[]).is_err());
        assert!(predict_answer(&[0.1], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn appending_lower_answers_keeps_argmax() {
        let (yi, ye) = (vec![0.3, 0.8, 0.1], vec![0.6, 0.0, 0.2]);
        let best = predict_answer(&yi, &ye).unwrap();
        let mut yi2 = yi.clone();
        let mut ye2 = ye.clone();
        yi2.extend([0.79, 0.5]);
        ye2.extend([0.0, 0.7]);
        assert_eq!(predict_answer(&yi2, &ye2).unwrap(), best);
    }

    #[test]
    fn soft_targets_follow_annotator_counts() {
        let v = AnswerVocabulary::new(vec!["Water".into(), "fire".into(), "ice".into()]).unwrap();
        let t = v.soft_targets(&[("water", 4), ("FIRE", 1), ("unknown", 9)]);
        assert_eq!(t, vec![1.0, 1.0 / 3.0, 0.0]);
        assert!(AnswerVocabulary::new(vec!["a".into(), "A".into()]).is_err());
    }

    pub(crate) fn toy_model(gate: GateMode, seed: u64) -> (Model, FusionInput, Vec<f64>) {
        let d = dims();
        let answers = AnswerVocabulary::new(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let config = ModelConfig {
            selector: "sim,al".parse().unwrap(),
            gate,
            dims: d,
            explicit_weight: 0.7,
            seed,
        };
        let stats = FeatureStats {
            al: Moments { mean: 0.2, std: 0.5 },
            ep: Moments::default(),
        };
        let mut model = Model::init(config, answers, vec!["p".into(), "q".into()], stats);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for t in model.fusion.tensors_mut() {
            for v in t.as_mut_slice() {
                *v = rng.random_range(-0.8..0.8);
            }
        }
        let subgraph = Subgraph::from_parts(
            vec!["x".into(), "a".into(), "c".into()],
            vec![(0, 1, 0), (0, 2, 1), (2, 1, 0)],
            vec!["p".into(), "q".into()],
        )
        .unwrap();
        let features = Matrix::glorot(3, d.node_input(), &mut rng);
        let input = FusionInput {
            sim: rng.random_range(-1.0..1.0),
            u_al: rng.random_range(0.0..2.0),
            u_ep: rng.random_range(0.0..1.0),
            z_implicit: (0..d.implicit).map(|_| rng.random_range(-1.0..1.0)).collect(),
            bindings: model.answers.bind(&subgraph, &BTreeMap::new()),
            subgraph,
            node_features: Some(features),
        };
        let targets = vec![1.0, 1.0 / 3.0, 0.0];
        (model, input, targets)
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        for (gate, seed) in [(GateMode::Gated, 1), (GateMode::Gated, 2), (GateMode::Ungated, 3)] {
            let (model, input, targets) = toy_model(gate, seed);
            let state = model.forward(&input).unwrap();
            let (loss, grads) = model.loss_and_gradients(&input, &state, &targets).unwrap();
            assert!((loss.total - model.loss(&input, &targets).unwrap()).abs() < 1e-12);
            assert!(loss.explicit.is_some());
            let analytic = grads.tensors();
            for (k, tensor) in model.tensors().into_iter().enumerate() {
                let fd = finite_difference_gradient(
                    |v| {
                        let mut m = model.clone();
                        m.tensors_mut()[k].as_mut_slice().copy_from_slice(v);
                        m.loss(&input, &targets).unwrap()
                    },
                    tensor.as_slice(),
                    FD_STEP,
                )
                .unwrap();
                let err = max_relative_error(analytic[k].as_slice(), &fd);
                assert!(err < 1e-4, "{} rel err {err}", model.tensor_names()[k]);
            }
        }
    }

    #[test]
    fn loss_edge_cases() {
        let (mut model, mut input, _) = toy_model(GateMode::Gated, 4);
        // all-zero parameters give 0.5 everywhere: ln 2 per term
        for t in model.tensors_mut() {
            t.scale(0.0);
        }
        let state = model.forward(&input).unwrap();
        let (l, _) = model.loss_and_gradients(&input, &state, &[1.0, 0.0, 1.0]).unwrap();
        assert!((l.implicit - 2f64.ln()).abs() < 1e-12);
        assert!((l.explicit.unwrap() - 2f64.ln()).abs() < 1e-12);

        input.bindings = vec![None; 3];
        let state = model.forward(&input).unwrap();
        let (l, g) = model.loss_and_gradients(&input, &state, &[1.0, 0.0, 1.0]).unwrap();
        assert!(l.explicit.is_none());
        assert!(g.rgcn.tensors().iter().all(|t| t.as_slice().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn closed_gate_silences_knowledge() {
        let (mut model, input, _) = toy_model(GateMode::Gated, 5);
        model.fusion.b_ge.scale(0.0);
        model.fusion.b_vi.scale(0.0);
        // W_g = -∞ in effect: g underflows to zero
        model.fusion.w_g = Matrix::from_rows(&[vec![-1e4, -1e4]]).unwrap();
        let mut input = input;
        input.sim = 1.0;
        input.u_al = 3.0;
        let state = model.forward(&input).unwrap();
        assert_eq!(state.g_score, 0.0);
        let bound: Vec<f64> = input
            .bindings
            .iter()
            .zip(&state.y_explicit)
            .filter(|(b, _)| b.is_some())
            .map(|(_, y)| *y)
            .collect();
        assert!(bound.len() >= 2);
        assert!(bound.iter().all(|y| *y == bound[0]));
    }

    #[test]
    fn gate_monotone_in_positive_weight() {
        let p = params_with(|p| p.w_v = Matrix::from_rows(&[vec![1.5, -0.5]]).unwrap());
        let mut prev = 0.0;
        for i in 0..20 {
            let (v, _) = gate_scores(&[i as f64 * 0.3 - 3.0, 0.4], &p).unwrap();
            assert!(v > prev && v < 1.0);
            prev = v;
        }
    }

    fn toy_examples() -> (Model, Vec<TrainingExample>) {
        let (model, input, _) = toy_model(GateMode::Gated, 6);
        let examples = (0..12)
            .map(|i| {
                let mut inp = input.clone();
                inp.sim = (i as f64 / 12.0) * 2.0 - 1.0;
                inp.z_implicit[0] = if i % 2 == 0 { 1.0 } else { -1.0 };
                let targets = if i % 2 == 0 {
                    vec![1.0, 0.0, 0.0]
                } else {
                    vec![0.0, 1.0, 0.0]
                };
                TrainingExample { input: inp, targets }
            })
            .collect();
        (model, examples)
    }

    #[test]
    fn fit_examples() {
        let (model, examples) = toy_examples();
        let frozen = TrainConfig {
            epochs: 3,
            lr: 0.0,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (same, _) = fit(model.clone(), &examples, &frozen).unwrap();
        assert_eq!(same, model);

        let cfg = TrainConfig {
            epochs: 30,
            lr: 0.1,
            batch_size: 4,
            seed: 9,
            ..TrainConfig::default()
        };
        let (_, a) = fit(model.clone(), &examples, &cfg).unwrap();
        let (_, b) = fit(model.clone(), &examples, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.last().unwrap() < a.first().unwrap());
        assert!(fit(model, &[], &cfg).is_err());
    }

    #[test]
    fn parallel_and_sequential_training_agree() {
        let (model, examples) = toy_examples();
        let cfg = TrainConfig {
            epochs: 5,
            lr: 0.05,
            batch_size: 5,
            seed: 2,
            ..TrainConfig::default()
        };
        let (m1, t1) = fit(model.clone(), &examples, &cfg).unwrap();
        crate::par::set_parallel(false);
        let (m2, t2) = fit(model, &examples, &cfg).unwrap();
        crate::par::set_parallel(true);
        assert_eq!(t1, t2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn feature_stats_standardize() {
        let st = FeatureStats::fit(&[(1.0, 5.0), (3.0, 5.0)]);
        assert_eq!(st.al, Moments { mean: 2.0, std: 1.0 });
        assert_eq!(st.ep, Moments { mean: 5.0, std: 1.0 });
        assert_eq!(st.standardize(0.3, 1.0, 6.0), (0.3, -1.0, 1.0));
        assert_eq!(FeatureStats::fit(&[]), FeatureStats::default());
    }

    #[test]
    fn selector_guard() {
        let (model, _, _) = toy_model(GateMode::Gated, 0);
        assert!(model.ensure_selector("sim,al".parse().unwrap()).is_ok());
        let err = model.ensure_selector("sim,ep".parse().unwrap()).unwrap_err();
        assert!(matches!(err, Error::ConfigMismatch(_)));
    }
}
