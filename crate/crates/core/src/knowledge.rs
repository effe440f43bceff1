//! Triple store, keyword-seeded subgraph retrieval, node features and a
//! relation-typed, direction-aware graph convolution over the subgraph.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::text::{hashed_bag, normalize, tokenize};

pub const DEFAULT_HOPS: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub source: String,
}

impl Triple {
    /// Entities are lowercased; every field must be non-empty.
    pub fn new(head: &str, relation: &str, tail: &str, source: &str) -> Result<Self> {
        let t = Triple {
            head: normalize(head),
            relation: relation.trim().to_string(),
            tail: normalize(tail),
            source: source.trim().to_string(),
        };
        for (name, v) in [
            ("head", &t.head),
            ("relation", &t.relation),
            ("tail", &t.tail),
            ("source", &t.source),
        ] {
            if v.is_empty() {
                return Err(Error::invalid(format!("empty {name} field")));
            }
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageKeyword {
    pub word: String,
    pub prob: f64,
}

/// Deduplicated triples with an entity → incident-triple index.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    triples: Vec<Triple>,
    entity_index: BTreeMap<String, Vec<usize>>,
    relations: Vec<String>,
}

impl KnowledgeBase {
    /// Triples repeating an earlier `(head, relation, tail)` are dropped; the
    /// first source wins.
    pub fn from_triples(triples: impl IntoIterator<Item = Triple>) -> Self {
        let mut seen = HashSet::new();
        let mut kb = KnowledgeBase::default();
        let mut relations = BTreeSet::new();
        for t in triples {
            if !seen.insert((t.head.clone(), t.relation.clone(), t.tail.clone())) {
                continue;
            }
            let id = kb.triples.len();
            kb.entity_index.entry(t.head.clone()).or_default().push(id);
            if t.tail != t.head {
                kb.entity_index.entry(t.tail.clone()).or_default().push(id);
            }
            relations.insert(t.relation.clone());
            kb.triples.push(t);
        }
        kb.relations = relations.into_iter().collect();
        kb
    }

    /// Parse `head<TAB>relation<TAB>tail<TAB>source` lines. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut triples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(err(format!("expected 4 tab-separated fields, found {}", fields.len())));
            }
            triples.push(Triple::new(fields[0], fields[1], fields[2], fields[3]).map_err(|e| err(e.to_string()))?);
        }
        if triples.is_empty() {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: 0,
                message: "no triples".into(),
            });
        }
        Ok(KnowledgeBase::from_triples(triples))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        KnowledgeBase::parse(&text, path)
    }

    pub fn to_tsv(&self) -> String {
        self.triples
            .iter()
            .map(|t| format!("{}\t{}\t{}\t{}\n", t.head, t.relation, t.tail, t.source))
            .collect()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    /// Sorted relation names.
    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn entity_count(&self) -> usize {
        self.entity_index.len()
    }

    pub fn contains_entity(&self, entity: &str) -> bool {
        self.entity_index.contains_key(entity)
    }

    pub fn incident(&self, entity: &str) -> &[usize] {
        self.entity_index.get(entity).map_or(&[], Vec::as_slice)
    }

    /// Seeds are image keywords and question words (single words and
    /// adjacent pairs) that name an entity. Breadth-first expansion runs for
    /// `hops` levels over both edge directions; each level's new entities are
    /// appended in lexicographic order. Every triple among the reached
    /// entities becomes an edge.
    pub fn retrieve_subgraph(
        &self,
        image_keywords: &[ImageKeyword],
        question_words: &[String],
        hops: usize,
    ) -> Subgraph {
        let mut nodes: Vec<String> = Vec::new();
        let mut reached: HashSet<String> = HashSet::new();
        for cand in seed_candidates(image_keywords, question_words) {
            if self.contains_entity(&cand) && reached.insert(cand.clone()) {
                nodes.push(cand);
            }
        }
        let mut frontier: Vec<String> = nodes.clone();
        for _ in 0..hops {
            let mut found = BTreeSet::new();
            for e in &frontier {
                for &id in self.incident(e) {
                    let t = &self.triples[id];
                    for other in [&t.head, &t.tail] {
                        if !reached.contains(other) {
                            found.insert(other.clone());
                        }
                    }
                }
            }
            if found.is_empty() {
                break;
            }
            reached.extend(found.iter().cloned());
            frontier = found.into_iter().collect();
            nodes.extend(frontier.iter().cloned());
        }

        let position: HashMap<&str, usize> = nodes.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let ids: BTreeSet<usize> = nodes
            .iter()
            .flat_map(|n| self.incident(n).iter().copied())
            .filter(|&id| {
                let t = &self.triples[id];
                position.contains_key(t.head.as_str()) && position.contains_key(t.tail.as_str())
            })
            .collect();
        let relations: Vec<String> = ids
            .iter()
            .map(|&id| self.triples[id].relation.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let edges = ids
            .into_iter()
            .map(|id| {
                let t = &self.triples[id];
                Edge {
                    head: position[t.head.as_str()],
                    tail: position[t.tail.as_str()],
                    relation: relations.binary_search(&t.relation).expect("relation collected above"),
                    triple: id,
                }
            })
            .collect();
        Subgraph {
            nodes,
            edges,
            relations,
        }
    }
}

fn seed_candidates(image_keywords: &[ImageKeyword], question_words: &[String]) -> Vec<String> {
    let mut out: Vec<String> = image_keywords.iter().map(|k| normalize(&k.word)).collect();
    for (i, w) in question_words.iter().enumerate() {
        out.push(w.clone());
        if let Some(next) = question_words.get(i + 1) {
            out.push(format!("{w} {next}"));
        }
    }
    out
}

/// Lowercased words loaded one per line.
#[derive(Debug, Clone, Default)]
pub struct StopWords(HashSet<String>);

impl StopWords {
    pub fn new<I: IntoIterator<Item = S>, S: AsRef<str>>(words: I) -> Self {
        StopWords(
            words
                .into_iter()
                .map(|w| normalize(w.as_ref()))
                .filter(|w| !w.is_empty())
                .collect(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(StopWords::new(text.lines()))
    }

    pub fn contains(&self, w: &str) -> bool {
        self.0.contains(w)
    }

    /// Tokenize a question and drop stop words.
    pub fn question_words(&self, question: &str) -> Vec<String> {
        tokenize(question).into_iter().filter(|w| !self.contains(w)).collect()
    }
}

/// A retrieved triple between two subgraph nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Edge {
    pub head: usize,
    pub tail: usize,
    /// Index into [`Subgraph::relations`].
    pub relation: usize,
    /// Index of the source triple in the knowledge base.
    pub triple: usize,
}

/// Per-instance graph. Each edge is traversed in both directions during
/// convolution: head to tail under its relation, tail to head under the
/// relation's inverse.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Subgraph {
    pub nodes: Vec<String>,
    pub edges: Vec<Edge>,
    pub relations: Vec<String>,
}

impl Subgraph {
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_index(&self, entity: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n == entity)
    }

    /// Build a subgraph from raw parts, checking endpoints and relation ids.
    pub fn from_parts(nodes: Vec<String>, edges: Vec<(usize, usize, usize)>, relations: Vec<String>) -> Result<Self> {
        let edges = edges
            .into_iter()
            .enumerate()
            .map(|(i, (head, tail, relation))| {
                if head >= nodes.len() || tail >= nodes.len() {
                    return Err(Error::IndexOutOfRange {
                        index: head.max(tail),
                        len: nodes.len(),
                    });
                }
                if relation >= relations.len() {
                    return Err(Error::IndexOutOfRange {
                        index: relation,
                        len: relations.len(),
                    });
                }
                Ok(Edge {
                    head,
                    tail,
                    relation,
                    triple: i,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Subgraph {
            nodes,
            edges,
            relations,
        })
    }
}

/// Word vectors keyed by word, with a hashed fallback for misses.
#[derive(Debug, Clone)]
pub struct WordVectors {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

#[derive(Debug, Deserialize, Serialize)]
pub struct WordVectorLine {
    pub word: String,
    pub vector: Vec<f64>,
}

impl WordVectors {
    pub fn empty(dim: usize) -> Self {
        WordVectors {
            dim: dim.max(1),
            table: HashMap::new(),
        }
    }

    pub fn new(dim: usize, table: HashMap<String, Vec<f64>>) -> Result<Self> {
        if let Some((w, v)) = table.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::shape(format!(
                "word vector for `{w}` has dimension {}, expected {dim}",
                v.len()
            )));
        }
        Ok(WordVectors { dim, table })
    }

    /// Read `{"word": ..., "vector": [...]}` lines. `fallback_dim` applies
    /// only when the file has no vectors.
    pub fn load(path: impl AsRef<Path>, fallback_dim: usize) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut table = HashMap::new();
        let mut dim = None;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let rec: WordVectorLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            let d = *dim.get_or_insert(rec.vector.len());
            if d != rec.vector.len() {
                return Err(err(format!("vector has dimension {}, expected {d}", rec.vector.len())));
            }
            table.insert(normalize(&rec.word), rec.vector);
        }
        WordVectors::new(dim.unwrap_or(fallback_dim.max(1)), table)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.table.get(word).map(Vec::as_slice)
    }

    /// Whole-entity hit, else the mean over in-table words, else a hashed
    /// bag of the entity's words.
    pub fn entity_vector(&self, entity: &str) -> Vec<f64> {
        if let Some(v) = self.table.get(entity) {
            return v.clone();
        }
        let words = tokenize(&entity.replace('_', " "));
        let hits: Vec<&Vec<f64>> = words.iter().filter_map(|w| self.table.get(w)).collect();
        if !hits.is_empty() {
            let mut acc = vec![0.0; self.dim];
            for h in &hits {
                crate::numerics::axpy(1.0, h, &mut acc);
            }
            acc.iter_mut().for_each(|a| *a /= hits.len() as f64);
            return acc;
        }
        hashed_bag(&words, self.dim).unwrap_or_else(|| vec![0.0; self.dim])
    }

    pub fn to_lines(&self) -> Vec<WordVectorLine> {
        let mut words: Vec<&String> = self.table.keys().collect();
        words.sort();
        words
            .into_iter()
            .map(|w| WordVectorLine {
                word: w.clone(),
                vector: self.table[w].clone(),
            })
            .collect()
    }
}

/// Node input rows `[presence, keyword_prob, word_vec, implicit]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures {
    matrix: Matrix,
    word_dim: usize,
}

impl NodeFeatures {
    pub fn width(word_dim: usize, implicit_dim: usize) -> usize {
        2 + word_dim + implicit_dim
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix {
        self.matrix
    }

    pub fn presence(&self, node: usize) -> f64 {
        self.matrix.get(node, 0)
    }

    pub fn keyword_prob(&self, node: usize) -> f64 {
        self.matrix.get(node, 1)
    }

    pub fn word_vec(&self, node: usize) -> &[f64] {
        &self.matrix.row(node)[2..2 + self.word_dim]
    }

    pub fn implicit(&self, node: usize) -> &[f64] {
        &self.matrix.row(node)[2 + self.word_dim..]
    }
}

pub fn assemble_node_features(
    subgraph: &Subgraph,
    image_keywords: &[ImageKeyword],
    question_words: &[String],
    implicit: &[f64],
    word_vectors: &WordVectors,
) -> Result<NodeFeatures> {
    if subgraph.is_empty() {
        return Err(Error::invalid("node features requested for an empty subgraph"));
    }
    let mut probs: HashMap<String, f64> = HashMap::new();
    for k in image_keywords {
        let p = probs.entry(normalize(&k.word)).or_insert(0.0);
        *p = p.max(k.prob);
    }
    let mentioned: HashSet<String> = seed_candidates(&[], question_words).into_iter().collect();
    let word_dim = word_vectors.dim();
    let width = NodeFeatures::width(word_dim, implicit.len());
    let mut data = Vec::with_capacity(subgraph.nodes.len() * width);
    for node in &subgraph.nodes {
        let prob = probs.get(node).copied().unwrap_or(0.0);
        let present = probs.contains_key(node) || mentioned.contains(node);
        data.push(if present { 1.0 } else { 0.0 });
        data.push(prob);
        let wv = word_vectors.entity_vector(node);
        if wv.len() != word_dim {
            return Err(Error::shape("word vector dimension mismatch"));
        }
        data.extend_from_slice(&wv);
        data.extend_from_slice(implicit);
    }
    Ok(NodeFeatures {
        matrix: Matrix::from_vec(subgraph.nodes.len(), width, data)?,
        word_dim,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgcnLayer {
    /// Two matrices per relation: slot `2r` for head→tail messages and slot
    /// `2r + 1` for the inverse direction.
    pub relation_weights: Vec<Matrix>,
    pub self_weight: Matrix,
}

/// Weights of a stack of relational graph-convolution layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgcnParams {
    pub relations: Vec<String>,
    pub layers: Vec<RgcnLayer>,
}

impl RgcnParams {
    /// `dims = [input, hidden..., output]`.
    pub fn init<R: Rng + ?Sized>(relations: Vec<String>, dims: &[usize], rng: &mut R) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| RgcnLayer {
                relation_weights: (0..2 * relations.len())
                    .map(|_| Matrix::glorot(w[1], w[0], rng))
                    .collect(),
                self_weight: Matrix::glorot(w[1], w[0], rng),
            })
            .collect();
        RgcnParams { relations, layers }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        RgcnParams {
            relations: self.relations.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| RgcnLayer {
                    relation_weights: l.relation_weights.iter().map(z).collect(),
                    self_weight: z(&l.self_weight),
                })
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.self_weight.cols())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.self_weight.rows())
    }

    /// Matrices in a fixed order: per layer, self weight then relation slots.
    pub fn tensors(&self) -> Vec<&Matrix> {
        self.layers
            .iter()
            .flat_map(|l| std::iter::once(&l.self_weight).chain(l.relation_weights.iter()))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| std::iter::once(&mut l.self_weight).chain(l.relation_weights.iter_mut()))
            .collect()
    }

    /// Names matching [`RgcnParams::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, _) in self.layers.iter().enumerate() {
            names.push(format!("rgcn.{i}.self"));
            for r in &self.relations {
                names.push(format!("rgcn.{i}.{r}.fwd"));
                names.push(format!("rgcn.{i}.{r}.inv"));
            }
        }
        names
    }

    fn plan(&self, subgraph: &Subgraph) -> Result<Vec<Message>> {
        let slots: Vec<usize> = subgraph
            .relations
            .iter()
            .map(|name| {
                self.relations
                    .iter()
                    .position(|r| r == name)
                    .ok_or_else(|| Error::invalid(format!("relation `{name}` has no parameter matrix")))
            })
            .collect::<Result<_>>()?;
        let mut raw = Vec::with_capacity(2 * subgraph.edges.len());
        for e in &subgraph.edges {
            let r = slots[e.relation];
            raw.push((e.tail, e.head, 2 * r));
            raw.push((e.head, e.tail, 2 * r + 1));
        }
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for &(dst, _, slot) in &raw {
            *counts.entry((dst, slot)).or_default() += 1;
        }
        Ok(raw
            .into_iter()
            .map(|(dst, src, slot)| Message {
                dst,
                src,
                slot,
                norm: 1.0 / counts[&(dst, slot)] as f64,
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Message {
    dst: usize,
    src: usize,
    slot: usize,
    norm: f64,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct RgcnTrace {
    messages: Vec<Message>,
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    output: Matrix,
}

impl RgcnTrace {
    /// Per-node output embeddings, one row per node.
    pub fn output(&self) -> &Matrix {
        &self.output
    }
}

#[derive(Debug, Clone)]
pub struct RgcnGrads {
    pub params: RgcnParams,
    pub features: Matrix,
}

/// `h_i' = act(Σ_r Σ_{j ∈ N_i^r} W_r h_j / |N_i^r| + W_0 h_i)` per layer, with
/// ReLU between layers and a linear last layer.
pub fn rgcn_forward(subgraph: &Subgraph, features: &Matrix, params: &RgcnParams) -> Result<RgcnTrace> {
    let messages = params.plan(subgraph)?;
    if features.rows() != subgraph.nodes.len() {
        return Err(Error::shape(format!(
            "{} feature rows for {} nodes",
            features.rows(),
            subgraph.nodes.len()
        )));
    }
    if features.cols() != params.input_dim() {
        return Err(Error::shape(format!(
            "features have width {}, first layer expects {}",
            features.cols(),
            params.input_dim()
        )));
    }
    let n = features.rows();
    let last = params.layers.len().saturating_sub(1);
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut h = features.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let mut a = Matrix::zeros(n, layer.self_weight.rows());
        for i in 0..n {
            let y = layer.self_weight.matvec(h.row(i))?;
            a.row_mut(i).copy_from_slice(&y);
        }
        for m in &messages {
            let y = layer.relation_weights[m.slot].matvec(h.row(m.src))?;
            crate::numerics::axpy(m.norm, &y, a.row_mut(m.dst));
        }
        let mut next = a.clone();
        if l != last {
            next.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        inputs.push(h);
        pre.push(a);
        h = next;
    }
    Ok(RgcnTrace {
        messages,
        inputs,
        pre,
        output: h,
    })
}

/// Exact gradients for the weights and input features given `upstream`,
/// the gradient of the loss with respect to the output embeddings.
pub fn rgcn_backward(trace: &RgcnTrace, params: &RgcnParams, upstream: &Matrix) -> Result<RgcnGrads> {
    if upstream.shape() != trace.output.shape() {
        return Err(Error::shape(format!(
            "upstream gradient is {:?}, output is {:?}",
            upstream.shape(),
            trace.output.shape()
        )));
    }
    let mut grads = params.zeros_like();
    let last = params.layers.len().saturating_sub(1);
    let mut dh = upstream.clone();
    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let h = &trace.inputs[l];
        let mut da = dh;
        if l != last {
            for (g, a) in da.as_mut_slice().iter_mut().zip(trace.pre[l].as_slice()) {
                if *a <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        let mut dprev = Matrix::zeros(h.rows(), h.cols());
        let g = &mut grads.layers[l];
        for i in 0..h.rows() {
            g.self_weight.add_outer(1.0, da.row(i), h.row(i));
            layer.self_weight.add_matvec_t(da.row(i), dprev.row_mut(i));
        }
        for m in &trace.messages {
            g.relation_weights[m.slot].add_outer(m.norm, da.row(m.dst), h.row(m.src));
            let scaled: Vec<f64> = da.row(m.dst).iter().map(|v| v * m.norm).collect();
            layer.relation_weights[m.slot].add_matvec_t(&scaled, dprev.row_mut(m.src));
        }
        dh = dprev;
    }
    Ok(RgcnGrads {
        params: grads,
        features: dh,
    })
}
