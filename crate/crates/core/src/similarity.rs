//! Caption embeddings, generated-vs-reference caption similarity and the
//! similarity/uncertainty correlation table.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, pearson_named};
use crate::text::{hashed_bag, tokenize};

pub const DEFAULT_FALLBACK_DIM: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    Precomputed,
    Fallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbedding {
    pub vector: Vec<f64>,
    pub source: EmbeddingSource,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct EmbeddingLine {
    pub sentence: String,
    pub vector: Vec<f64>,
}

/// Sentence encoder stand-in: a table of ingested embeddings with a hashed
/// bag-of-words fallback for sentences missing from the table.
#[derive(Debug, Clone)]
pub struct EmbeddingProvider {
    table: HashMap<String, Vec<f64>>,
    fallback_dim: usize,
}

impl Default for EmbeddingProvider {
    fn default() -> Self {
        EmbeddingProvider::fallback_only(DEFAULT_FALLBACK_DIM)
    }
}

impl EmbeddingProvider {
    pub fn fallback_only(dim: usize) -> Self {
        EmbeddingProvider {
            table: HashMap::new(),
            fallback_dim: dim.max(1),
        }
    }

    /// All table vectors must share one dimension; the fallback then uses the
    /// same dimension so table hits and misses stay comparable.
    pub fn with_table(table: HashMap<String, Vec<f64>>) -> Result<Self> {
        let mut dims = table.values().map(Vec::len);
        let Some(dim) = dims.next() else {
            return Ok(EmbeddingProvider::default());
        };
        if dims.any(|d| d != dim) {
            return Err(Error::shape("precomputed embeddings disagree on dimension"));
        }
        if dim == 0 {
            return Err(Error::shape("precomputed embeddings are empty"));
        }
        Ok(EmbeddingProvider {
            table,
            fallback_dim: dim,
        })
    }

    /// Read `{"sentence": ..., "vector": [...]}` lines.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut table = HashMap::new();
        let mut dim = None;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let rec: EmbeddingLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            if *dim.get_or_insert(rec.vector.len()) != rec.vector.len() {
                return Err(parse_err(format!(
                    "vector has dimension {}, expected {}",
                    rec.vector.len(),
                    dim.unwrap_or_default()
                )));
            }
            if rec.vector.iter().any(|v| !v.is_finite()) {
                return Err(parse_err("non-finite vector entry".into()));
            }
            table.insert(rec.sentence, rec.vector);
        }
        EmbeddingProvider::with_table(table)
    }

    pub fn dim(&self) -> usize {
        self.fallback_dim
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn embed(&self, sentence: &str) -> Result<SentenceEmbedding> {
        if sentence.trim().is_empty() {
            return Err(Error::invalid("empty sentence"));
        }
        if let Some(v) = self.table.get(sentence).or_else(|| self.table.get(sentence.trim())) {
            return Ok(SentenceEmbedding {
                vector: v.clone(),
                source: EmbeddingSource::Precomputed,
            });
        }
        let vector = hashed_bag(&tokenize(sentence), self.fallback_dim).ok_or(Error::DegenerateEmbedding)?;
        Ok(SentenceEmbedding {
            vector,
            source: EmbeddingSource::Fallback,
        })
    }

    /// Cosine similarity of the two caption embeddings.
    pub fn caption_similarity(&self, generated: &str, ground_truth: &str) -> Result<f64> {
        let a = self.embed(generated)?;
        let b = self.embed(ground_truth)?;
        cosine_similarity(&a.vector, &b.vector)
    }

    pub fn multi_reference_similarity<S: AsRef<str>>(
        &self,
        generated: &str,
        references: &[S],
        mode: ReferenceMode,
    ) -> Result<f64> {
        if references.is_empty() {
            return Err(Error::invalid("no reference captions"));
        }
        let gen = self.embed(generated)?;
        let sims = references
            .iter()
            .map(|r| cosine_similarity(&gen.vector, &self.embed(r.as_ref())?.vector))
            .collect::<Result<Vec<f64>>>()?;
        Ok(mode.aggregate(&sims))
    }
}

/// How similarities against several reference captions are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceMode {
    #[default]
    Mean,
    Max,
}

impl ReferenceMode {
    pub fn aggregate(self, sims: &[f64]) -> f64 {
        match self {
            ReferenceMode::Mean => sims.iter().sum::<f64>() / sims.len() as f64,
            ReferenceMode::Max => sims.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

impl FromStr for ReferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(ReferenceMode::Mean),
            "max" => Ok(ReferenceMode::Max),
            other => Err(Error::invalid(format!("unknown reference mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRecord {
    pub sim: f64,
    pub u_al: f64,
    pub u_ep: f64,
}

/// Pairwise Pearson coefficients, rows in the fixed order
/// `(sim, u_al)`, `(sim, u_ep)`, `(u_al, u_ep)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub sim_al: f64,
    pub sim_ep: f64,
    pub al_ep: f64,
}

impl CorrelationReport {
    pub const LABELS: [&'static str; 3] = ["sim_cap & u_al", "sim_cap & u_ep", "u_al & u_ep"];

    pub fn rows(&self) -> [(&'static str, f64); 3] {
        [
            (Self::LABELS[0], self.sim_al),
            (Self::LABELS[1], self.sim_ep),
            (Self::LABELS[2], self.al_ep),
        ]
    }
}

pub fn correlation_report(records: &[SimilarityRecord]) -> Result<CorrelationReport> {
    if records.len() < 2 {
        return Err(Error::invalid("correlation needs at least two records"));
    }
    let sim: Vec<f64> = records.iter().map(|r| r.sim).collect();
    let al: Vec<f64> = records.iter().map(|r| r.u_al).collect();
    let ep: Vec<f64> = records.iter().map(|r| r.u_ep).collect();
    Ok(CorrelationReport {
        sim_al: pearson_named(&sim, &al, "sim", "u_al")?,
        sim_ep: pearson_named(&sim, &ep, "sim", "u_ep")?,
        al_ep: pearson_named(&al, &ep, "u_al", "u_ep")?,
    })
}
