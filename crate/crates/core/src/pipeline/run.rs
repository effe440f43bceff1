use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{
    fit, AnswerVocabulary, FeatureSelector, FeatureStats, FusionInput, GateMode, Model, ModelConfig, ModelDims,
    TrainConfig, TrainingExample,
};
use crate::knowledge::{assemble_node_features, KnowledgeBase, StopWords, Subgraph, WordVectors, DEFAULT_HOPS};
use crate::par;
use crate::similarity::{EmbeddingProvider, ReferenceMode};
use crate::uncertainty::SentenceUncertainty;

use super::dataset::{vqa_accuracy, AnswerCount, Dataset};

/// Function words dropped from questions when none are supplied.
pub const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "can", "could", "do", "does", "for", "from", "has", "have", "how",
    "in", "is", "it", "its", "kind", "of", "on", "or", "that", "the", "this", "to", "type", "used", "was", "what",
    "when", "where", "which", "who", "why", "with", "would",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub hops: usize,
    pub reference_mode: ReferenceMode,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            hops: DEFAULT_HOPS,
            reference_mode: ReferenceMode::Mean,
        }
    }
}

/// Shared lookups every instance is prepared against.
#[derive(Debug, Clone)]
pub struct Resources {
    pub kb: KnowledgeBase,
    pub provider: EmbeddingProvider,
    pub word_vectors: WordVectors,
    pub stopwords: StopWords,
    /// Answer synonyms used when binding answers to graph nodes.
    pub synonyms: BTreeMap<String, String>,
    pub settings: EvalSettings,
}

impl Resources {
    pub fn new(kb: KnowledgeBase, provider: EmbeddingProvider, word_vectors: WordVectors) -> Self {
        Resources {
            kb,
            provider,
            word_vectors,
            stopwords: StopWords::new(DEFAULT_STOPWORDS),
            synonyms: BTreeMap::new(),
            settings: EvalSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Signals {
    pub sim: f64,
    pub u_al: f64,
    pub u_ep: f64,
}

/// Caption similarity and sentence-mean uncertainties of one instance.
pub fn instance_signals(
    dataset: &Dataset,
    i: usize,
    provider: &EmbeddingProvider,
    mode: ReferenceMode,
) -> Result<(Signals, SentenceUncertainty)> {
    let inst = &dataset.instances[i];
    let sentence = dataset.ensemble(i)?.sentence_uncertainty();
    let sim = provider.multi_reference_similarity(&inst.generated_caption, &inst.ground_truth_captions, mode)?;
    Ok((
        Signals {
            sim,
            u_al: sentence.mean_al,
            u_ep: sentence.mean_ep,
        },
        sentence,
    ))
}

#[derive(Debug, Clone)]
pub struct PreparedInstance {
    pub id: String,
    pub input: FusionInput,
    pub gt_answers: Vec<AnswerCount>,
}

impl PreparedInstance {
    pub fn targets(&self, answers: &AnswerVocabulary) -> Vec<f64> {
        let pairs: Vec<(&str, u32)> = self.gt_answers.iter().map(|a| (a.answer.as_str(), a.count)).collect();
        answers.soft_targets(&pairs)
    }

    /// Same instance with the retrieved knowledge removed.
    pub fn without_knowledge(&self) -> PreparedInstance {
        let mut p = self.clone();
        p.input.subgraph = Subgraph::default();
        p.input.node_features = None;
        p.input.bindings = vec![None; p.input.bindings.len()];
        p
    }
}

/// Signals, retrieved subgraph, node features and answer bindings.
pub fn prepare_instance(
    dataset: &Dataset,
    i: usize,
    res: &Resources,
    answers: &AnswerVocabulary,
) -> Result<PreparedInstance> {
    let inst = &dataset.instances[i];
    let (signals, _) = instance_signals(dataset, i, &res.provider, res.settings.reference_mode)?;
    let question_words = res.stopwords.question_words(&inst.question);
    let subgraph = res
        .kb
        .retrieve_subgraph(&inst.image_keywords, &question_words, res.settings.hops);
    let node_features = if subgraph.is_empty() {
        None
    } else {
        Some(
            assemble_node_features(
                &subgraph,
                &inst.image_keywords,
                &question_words,
                &inst.implicit_embedding,
                &res.word_vectors,
            )?
            .into_matrix(),
        )
    };
    let bindings = answers.bind(&subgraph, &res.synonyms);
    Ok(PreparedInstance {
        id: inst.id.clone(),
        input: FusionInput {
            sim: signals.sim,
            u_al: signals.u_al,
            u_ep: signals.u_ep,
            z_implicit: inst.implicit_embedding.clone(),
            subgraph,
            node_features,
            bindings,
        },
        gt_answers: inst.gt_answers.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Skipped {
    pub id: String,
    pub error: String,
}

/// Prepare every instance in parallel; failures are reported, not fatal.
pub fn prepare_all(
    dataset: &Dataset,
    res: &Resources,
    answers: &AnswerVocabulary,
) -> (Vec<PreparedInstance>, Vec<Skipped>) {
    let results = par::map_range(dataset.len(), |i| prepare_instance(dataset, i, res, answers));
    let mut ok = Vec::with_capacity(results.len());
    let mut skipped = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(p) => ok.push(p),
            Err(e) => skipped.push(Skipped {
                id: dataset.instances[i].id.clone(),
                error: e.to_string(),
            }),
        }
    }
    (ok, skipped)
}

/// Sorted distinct normalized ground-truth answers.
pub fn answer_vocabulary(dataset: &Dataset) -> Result<AnswerVocabulary> {
    let set: BTreeSet<String> = dataset
        .instances
        .iter()
        .flat_map(|i| i.gt_answers.iter().map(|a| crate::text::normalize(&a.answer)))
        .collect();
    AnswerVocabulary::new(set.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub selector: FeatureSelector,
    pub gate: GateMode,
    pub hidden: usize,
    pub explicit: usize,
    pub joint: usize,
    pub explicit_weight: f64,
    #[serde(flatten)]
    pub optimizer: TrainConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            selector: FeatureSelector::default(),
            gate: GateMode::Gated,
            hidden: 16,
            explicit: 16,
            joint: 8,
            explicit_weight: 1.0,
            optimizer: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub loss_trace: Vec<f64>,
    pub skipped: Vec<Skipped>,
}

/// Build the answer vocabulary and uncertainty statistics from `dataset`,
/// initialize from the optimizer seed and fit.
pub fn train(dataset: &Dataset, res: &Resources, settings: &TrainSettings) -> Result<TrainOutcome> {
    let implicit = dataset
        .implicit_dim()
        .ok_or_else(|| Error::invalid("training set is empty"))?;
    let answers = answer_vocabulary(dataset)?;
    let (prepared, skipped) = prepare_all(dataset, res, &answers);
    if prepared.is_empty() {
        return Err(Error::invalid("no training instance could be prepared"));
    }
    let rows: Vec<(f64, f64)> = prepared.iter().map(|p| (p.input.u_al, p.input.u_ep)).collect();
    let stats = FeatureStats::fit(&rows);
    let config = ModelConfig {
        selector: settings.selector,
        gate: settings.gate,
        dims: ModelDims {
            word: res.word_vectors.dim(),
            implicit,
            hidden: settings.hidden,
            explicit: settings.explicit,
            joint: settings.joint,
        },
        explicit_weight: settings.explicit_weight,
        seed: settings.optimizer.seed,
    };
    let model = Model::init(config, answers, res.kb.relations().to_vec(), stats);
    let examples: Vec<TrainingExample> = prepared
        .into_iter()
        .map(|p| TrainingExample {
            targets: p.targets(&model.answers),
            input: p.input,
        })
        .collect();
    let (model, loss_trace) = fit(model, &examples, &settings.optimizer)?;
    Ok(TrainOutcome {
        model,
        loss_trace,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceResult {
    pub id: String,
    pub predicted: String,
    pub score: f64,
    pub accuracy: f64,
    pub v_score: f64,
    pub g_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationResult {
    pub instances: Vec<InstanceResult>,
    /// Mean accuracy over evaluated instances; skipped ones are excluded.
    pub accuracy: f64,
    pub skipped: Vec<Skipped>,
}

impl EvaluationResult {
    pub fn new(instances: Vec<InstanceResult>, skipped: Vec<Skipped>) -> Self {
        let accuracy = if instances.is_empty() {
            0.0
        } else {
            instances.iter().map(|r| r.accuracy).sum::<f64>() / instances.len() as f64
        };
        EvaluationResult {
            instances,
            accuracy,
            skipped,
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.instances {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

/// Predict every prepared instance against a frozen model, in parallel.
pub fn evaluate_prepared(model: &Model, prepared: &[PreparedInstance]) -> Result<Vec<InstanceResult>> {
    par::map(prepared, |p| {
        let pred = model.predict(&p.input)?;
        Ok(InstanceResult {
            id: p.id.clone(),
            accuracy: vqa_accuracy(&pred.answer, &p.gt_answers),
            predicted: pred.answer,
            score: pred.score,
            v_score: pred.v_score,
            g_score: pred.g_score,
        })
    })
    .into_iter()
    .collect()
}

pub fn evaluate(dataset: &Dataset, model: &Model, res: &Resources) -> Result<EvaluationResult> {
    let (prepared, skipped) = prepare_all(dataset, res, &model.answers);
    Ok(EvaluationResult::new(evaluate_prepared(model, &prepared)?, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::Triple;
    use crate::pipeline::dataset::tests::instance;
    use crate::pipeline::dataset::{EnsembleRef, Split};

    fn resources() -> Resources {
        let kb = KnowledgeBase::from_triples([
            Triple::new("kettle", "used_for", "water", "t").unwrap(),
            Triple::new("kettle", "related_to", "tea", "t").unwrap(),
        ]);
        Resources::new(kb, EmbeddingProvider::fallback_only(64), WordVectors::empty(4))
    }

    fn dataset() -> Dataset {
        let mut b = instance("b");
        b.gt_answers[0].answer = "tea".into();
        Dataset::new(vec![instance("a"), b], Split::Train).unwrap()
    }

    #[test]
    fn prepare_binds_answers_in_the_subgraph() {
        let ds = dataset();
        let answers = answer_vocabulary(&ds).unwrap();
        assert_eq!(answers.answers(), ["tea", "water"]);
        let p = prepare_instance(&ds, 0, &resources(), &answers).unwrap();
        assert_eq!(p.input.subgraph.nodes, ["kettle", "tea", "water"]);
        assert_eq!(p.input.bindings, vec![Some(1), Some(2)]);
        assert_eq!(p.targets(&answers), vec![0.0, 1.0]);
        let bare = p.without_knowledge();
        assert!(!bare.input.has_bound_answers());
    }

    #[test]
    fn missing_ensembles_are_skipped() {
        let mut ds = dataset();
        ds.instances[1].ensemble = EnsembleRef::Path("nowhere.json".into());
        let res = resources();
        let out = train(&ds, &res, &TrainSettings::default()).unwrap();
        assert_eq!(out.skipped.len(), 1);
        let eval = evaluate(&ds, &out.model, &res).unwrap();
        assert_eq!(eval.instances.len(), 1);
        assert_eq!(eval.skipped[0].id, "b");
        assert_eq!(eval.accuracy, eval.instances[0].accuracy);
    }

    #[test]
    fn forced_sole_answer_scores_one() {
        let ds = Dataset::new(vec![instance("a")], Split::Test).unwrap();
        let mut gt = ds.clone();
        gt.instances[0].gt_answers[0].count = 10;
        let res = resources();
        let out = train(&gt, &res, &TrainSettings::default()).unwrap();
        assert_eq!(out.model.answers.len(), 1);
        let eval = evaluate(&gt, &out.model, &res).unwrap();
        assert_eq!(eval.accuracy, 1.0);
        let csv = eval.to_csv().unwrap();
        assert!(csv.starts_with("id,predicted,score,accuracy,v_score,g_score\n"));
    }
}
