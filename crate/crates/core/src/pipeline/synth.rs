//! Seeded synthetic datasets whose consistent instances come with sharp,
//! well-grounded captions and correct knowledge, and whose inconsistent
//! instances come with hallucinating, uncertain captions and knowledge that
//! points at a distractor answer.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::{ImageKeyword, KnowledgeBase, Triple, WordVectors};
use crate::similarity::{EmbeddingLine, EmbeddingProvider};
use crate::text::{hashed_bag, tokenize};
use crate::uncertainty::{EnsembleFile, EnsembleKind, HallucinationSpecFile};

use super::dataset::{AnswerCount, Dataset, EnsembleRef, QAInstance, Split};
use super::run::{Resources, DEFAULT_STOPWORDS};

const ANSWER_WORDS: &[&str] = &[
    "water",
    "fire",
    "music",
    "food",
    "travel",
    "cooking",
    "cleaning",
    "light",
    "heat",
    "storage",
    "writing",
    "reading",
    "sleeping",
    "sport",
    "fishing",
    "farming",
    "painting",
    "shopping",
    "sailing",
    "baking",
    "camping",
    "gardening",
    "drinking",
    "washing",
    "dancing",
];
const OBJECT_WORDS: &[&str] = &[
    "cat", "dog", "table", "chair", "car", "tree", "person", "bottle", "cup", "window", "bench", "bird", "horse",
    "clock", "sink", "plate", "bicycle", "umbrella", "book", "phone", "bag", "pizza", "laptop", "bowl", "couch",
    "train", "boat", "kite", "sheep", "cake",
];
const SYNONYMS: &[(&str, &str)] = &[("puppy", "dog"), ("kitten", "cat"), ("sofa", "couch"), ("mug", "cup")];
const CATEGORY_WORDS: &[&str] = &[
    "appliance",
    "tool",
    "vehicle",
    "furniture",
    "instrument",
    "container",
    "device",
    "toy",
];
const TOPIC_STEMS: &[&str] = &[
    "kettle", "lamp", "stove", "guitar", "oven", "broom", "pen", "basket", "tent", "rod", "shovel", "brush", "cart",
    "net", "jar",
];
const TEMPLATE_WORDS: &[&str] = &["a", "photo", "of", "and", "picture", "with"];

pub const ANSWER_RELATION: &str = "used_for";
const SENTENCE_DIM: usize = 256;
const PEAK_LOGIT: f64 = 3.0;
const FILLER_TOKENS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n: usize,
    pub answers: usize,
    pub word_dim: usize,
    pub implicit_dim: usize,
    pub members: usize,
    /// Objects in each image and mentions in each generated caption.
    pub caption_objects: usize,
    pub reference_captions: usize,
    /// Probability that an instance is consistent.
    pub consistency_rate: f64,
    pub implicit_signal: f64,
    pub implicit_noise: f64,
    /// How strongly member disagreement grows with hallucination.
    pub ep_coupling: f64,
    /// Spread of the per-caption ensemble temperature around its mean.
    pub temperature_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n: 500,
            answers: 20,
            word_dim: 8,
            implicit_dim: 16,
            members: 5,
            caption_objects: 5,
            reference_captions: 3,
            consistency_rate: 0.5,
            implicit_signal: 1.0,
            implicit_noise: 2.0,
            ep_coupling: 0.0,
            temperature_noise: 0.5,
        }
    }
}

/// Hidden generation variables, kept for tests and diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Latent {
    pub id: String,
    pub consistent: bool,
    pub hallucination_prob: f64,
    pub hallucinated: usize,
    pub answer: String,
    pub kb_answer: String,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub config: SynthConfig,
    pub dataset: Dataset,
    pub kb: KnowledgeBase,
    pub word_vectors: WordVectors,
    pub embeddings: Vec<EmbeddingLine>,
    pub hallucination: HallucinationSpecFile,
    pub latent: Vec<Latent>,
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn random_vector<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * gaussian(rng)).collect()
}

fn unit_vector<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    let v = random_vector(rng, dim, 1.0);
    let n = crate::numerics::norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

fn pick_other<R: Rng>(rng: &mut R, n: usize, avoid: &[usize]) -> usize {
    loop {
        let k = rng.random_range(0..n);
        if !avoid.contains(&k) {
            return k;
        }
    }
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticData> {
    let c = config;
    if c.answers < 3 {
        return Err(Error::invalid("synthetic data needs at least 3 answers"));
    }
    if c.caption_objects == 0 || c.caption_objects > OBJECT_WORDS.len() / 2 {
        return Err(Error::invalid(format!(
            "caption_objects must be in 1..={}",
            OBJECT_WORDS.len() / 2
        )));
    }
    if c.members == 0 || c.word_dim == 0 || c.implicit_dim == 0 || c.reference_captions == 0 {
        return Err(Error::invalid(
            "members, dimensions and reference captions must be positive",
        ));
    }
    if !(0.0..=1.0).contains(&c.consistency_rate) {
        return Err(Error::invalid("consistency_rate must be in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);

    let answers: Vec<String> = (0..c.answers)
        .map(|k| {
            ANSWER_WORDS
                .get(k)
                .map_or_else(|| format!("answer{k}"), |w| w.to_string())
        })
        .collect();
    let mut table = HashMap::new();
    let scale = 1.0 / (c.word_dim as f64).sqrt();
    for w in answers
        .iter()
        .map(String::as_str)
        .chain(OBJECT_WORDS.iter().copied())
        .chain(CATEGORY_WORDS.iter().copied())
        .chain(TEMPLATE_WORDS.iter().copied())
    {
        table.insert(w.to_string(), random_vector(&mut rng, c.word_dim, scale));
    }
    for (syn, canon) in SYNONYMS {
        let v = table[*canon].clone();
        table.insert(syn.to_string(), v);
    }
    let word_vectors = WordVectors::new(c.word_dim, table)?;
    let prototypes: Vec<Vec<f64>> = (0..c.answers).map(|_| unit_vector(&mut rng, c.implicit_dim)).collect();
    let synonym_of: HashMap<&str, &str> = SYNONYMS.iter().map(|(s, canon)| (*canon, *s)).collect();

    let mut instances = Vec::with_capacity(c.n);
    let mut triples = Vec::with_capacity(3 * c.n);
    let mut latent = Vec::with_capacity(c.n);
    let mut sentences = BTreeSet::new();
    let k = c.caption_objects;

    for i in 0..c.n {
        let id = format!("q{i:06}");
        let consistent = rng.random::<f64>() < c.consistency_rate;
        let correct = rng.random_range(0..c.answers);
        let distractor = pick_other(&mut rng, c.answers, &[correct]);
        let kb_answer = if consistent { correct } else { distractor };
        let related = pick_other(&mut rng, c.answers, &[correct, kb_answer]);
        let topic = format!("{}{i}", TOPIC_STEMS[i % TOPIC_STEMS.len()]);
        let category = CATEGORY_WORDS[rng.random_range(0..CATEGORY_WORDS.len())];
        triples.push(Triple::new(&topic, ANSWER_RELATION, &answers[kb_answer], "synthetic")?);
        triples.push(Triple::new(&topic, "related_to", &answers[related], "synthetic")?);
        triples.push(Triple::new(&topic, "is_a", category, "synthetic")?);

        let p: f64 = if consistent {
            rng.random_range(0.0..0.4)
        } else {
            rng.random_range(0.4..=1.0)
        };
        let gt_idx = sample(&mut rng, OBJECT_WORDS.len(), k).into_vec();
        let gt_objects: Vec<&str> = gt_idx.iter().map(|&j| OBJECT_WORDS[j]).collect();
        let h = (0..k).filter(|_| rng.random_bool(p)).count();
        let absent: Vec<&str> = OBJECT_WORDS
            .iter()
            .copied()
            .filter(|o| !gt_objects.contains(o))
            .collect();
        let mut mentions: Vec<(String, bool)> = Vec::with_capacity(k);
        for o in &gt_objects[..k - h] {
            let word = match synonym_of.get(o) {
                Some(s) if rng.random_bool(0.1) => s.to_string(),
                _ => o.to_string(),
            };
            mentions.push((word, false));
        }
        for j in sample(&mut rng, absent.len(), h) {
            mentions.push((absent[j].to_string(), true));
        }
        mentions.shuffle(&mut rng);
        let caption = format!(
            "a photo of {}",
            mentions
                .iter()
                .map(|(w, _)| w.as_str())
                .collect::<Vec<_>>()
                .join(" and ")
        );
        let references: Vec<String> = (0..c.reference_captions)
            .map(|_| {
                let pick = sample(&mut rng, k, (k - 1).max(1)).into_vec();
                let words: Vec<&str> = pick.iter().map(|&j| gt_objects[j]).collect();
                format!("a picture of {}", words.join(" with "))
            })
            .collect();

        let ratio = h as f64 / k as f64;
        let tokens = tokenize(&caption);
        let hallucinated: BTreeSet<&str> = mentions
            .iter()
            .filter(|(_, hal)| *hal)
            .map(|(w, _)| w.as_str())
            .collect();
        let mut vocab: BTreeSet<String> = tokens.iter().cloned().collect();
        let fillers: Vec<&str> = absent.iter().copied().filter(|w| !vocab.contains(*w)).collect();
        for j in sample(&mut rng, fillers.len(), FILLER_TOKENS.min(fillers.len())) {
            vocab.insert(fillers[j].to_string());
        }
        let vocab: Vec<String> = vocab.into_iter().collect();
        let temperature = (0.3 + 1.5 * p + c.temperature_noise * gaussian(&mut rng)).max(0.1);
        let spread = 0.3 + c.ep_coupling * (p + ratio);
        let base: Vec<Vec<f64>> = tokens
            .iter()
            .map(|_| random_vector(&mut rng, vocab.len(), 0.5))
            .collect();
        let data: Vec<Vec<Vec<f64>>> = (0..c.members)
            .map(|_| {
                tokens
                    .iter()
                    .zip(&base)
                    .map(|(tok, b)| {
                        let tau = temperature * if hallucinated.contains(tok.as_str()) { 1.5 } else { 1.0 };
                        vocab
                            .iter()
                            .zip(b)
                            .map(|(v, bv)| {
                                let peak = if v == tok { PEAK_LOGIT } else { 0.0 };
                                (peak + bv + spread * gaussian(&mut rng)) / tau
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();

        let mut image_keywords = vec![ImageKeyword {
            word: topic.clone(),
            prob: rng.random_range(0.7..=1.0),
        }];
        for o in &gt_objects {
            image_keywords.push(ImageKeyword {
                word: o.to_string(),
                prob: rng.random_range(0.3..0.95),
            });
        }
        let noise = c.implicit_noise / (c.implicit_dim as f64).sqrt();
        let implicit_embedding: Vec<f64> = prototypes[correct]
            .iter()
            .map(|x| c.implicit_signal * x + noise * gaussian(&mut rng))
            .collect();

        sentences.insert(caption.clone());
        sentences.extend(references.iter().cloned());
        latent.push(Latent {
            id: id.clone(),
            consistent,
            hallucination_prob: p,
            hallucinated: h,
            answer: answers[correct].clone(),
            kb_answer: answers[kb_answer].clone(),
        });
        instances.push(QAInstance {
            id,
            question: format!("what is the {topic} used for"),
            image_keywords,
            implicit_embedding,
            generated_caption: caption,
            ground_truth_captions: references,
            ensemble: EnsembleRef::Inline(EnsembleFile {
                members: c.members,
                tokens: tokens.len(),
                vocab,
                kind: EnsembleKind::Logits,
                data,
            }),
            gt_answers: vec![AnswerCount {
                answer: answers[correct].clone(),
                count: 10,
            }],
            gt_objects: Some(gt_objects.iter().map(|s| s.to_string()).collect()),
        });
    }

    let embeddings = sentences
        .into_iter()
        .map(|s| EmbeddingLine {
            vector: hashed_bag(&tokenize(&s), SENTENCE_DIM).expect("captions are non-empty"),
            sentence: s,
        })
        .collect();
    let mut object_words: Vec<String> = OBJECT_WORDS.iter().map(|s| s.to_string()).collect();
    object_words.extend(SYNONYMS.iter().map(|(s, _)| s.to_string()));
    Ok(SyntheticData {
        config: c.clone(),
        dataset: Dataset::new(instances, Split::Train)?,
        kb: KnowledgeBase::from_triples(triples),
        word_vectors,
        embeddings,
        hallucination: HallucinationSpecFile {
            objects: Vec::new(),
            synonyms: SYNONYMS
                .iter()
                .map(|(s, canon)| (s.to_string(), canon.to_string()))
                .collect(),
            object_words,
        },
        latent,
    })
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&item)?);
        out.push('\n');
    }
    Ok(out)
}

impl SyntheticData {
    pub fn provider(&self) -> Result<EmbeddingProvider> {
        let table: HashMap<String, Vec<f64>> = self
            .embeddings
            .iter()
            .map(|e| (e.sentence.clone(), e.vector.clone()))
            .collect();
        EmbeddingProvider::with_table(table)
    }

    pub fn resources(&self) -> Result<Resources> {
        Ok(Resources::new(
            self.kb.clone(),
            self.provider()?,
            self.word_vectors.clone(),
        ))
    }

    /// File name → contents for every artifact.
    pub fn artifacts(&self) -> Result<BTreeMap<&'static str, String>> {
        let mut files = BTreeMap::new();
        files.insert("data.jsonl", self.dataset.to_jsonl()?);
        files.insert("kb.tsv", self.kb.to_tsv());
        files.insert("word_vectors.jsonl", jsonl(self.word_vectors.to_lines())?);
        files.insert("embeddings.jsonl", jsonl(&self.embeddings)?);
        files.insert(
            "hallucination.json",
            serde_json::to_string_pretty(&self.hallucination)? + "\n",
        );
        files.insert("stopwords.txt", DEFAULT_STOPWORDS.join("\n") + "\n");
        let mut w = csv::Writer::from_writer(Vec::new());
        for l in &self.latent {
            w.serialize(l)?;
        }
        let latent = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        files.insert("latent.csv", String::from_utf8(latent).expect("csv output is utf-8"));
        Ok(files)
    }

    pub fn write(&self, out_dir: impl AsRef<Path>) -> Result<()> {
        let dir = out_dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in self.artifacts()? {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// `n` standard-normal pairs with population correlation `rho`.
pub fn planted_correlation(rho: f64, n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = (1.0 - rho * rho).max(0.0).sqrt();
    (0..n)
        .map(|_| {
            let x = gaussian(&mut rng);
            (x, rho * x + s * gaussian(&mut rng))
        })
        .unzip()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::pearson;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            n: 40,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_synthetic(&small(3)).unwrap().artifacts().unwrap();
        let b = generate_synthetic(&small(3)).unwrap().artifacts().unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&small(4)).unwrap().artifacts().unwrap();
        assert_ne!(a["data.jsonl"], c["data.jsonl"]);
    }

    #[test]
    fn empty_request_gives_empty_artifacts() {
        let d = generate_synthetic(&SynthConfig {
            n: 0,
            ..SynthConfig::default()
        })
        .unwrap();
        assert!(d.dataset.is_empty() && d.kb.triples().is_empty() && d.embeddings.is_empty());
        let files = d.artifacts().unwrap();
        assert!(files["data.jsonl"].is_empty() && files["kb.tsv"].is_empty());
    }

    #[test]
    fn knowledge_points_at_the_right_answer_when_consistent() {
        let d = generate_synthetic(&SynthConfig {
            consistency_rate: 1.0,
            ..small(1)
        })
        .unwrap();
        for l in &d.latent {
            assert!(l.consistent);
            assert_eq!(l.answer, l.kb_answer);
        }
        let d = generate_synthetic(&SynthConfig {
            consistency_rate: 0.0,
            ..small(1)
        })
        .unwrap();
        assert!(d.latent.iter().all(|l| !l.consistent && l.answer != l.kb_answer));
    }

    #[test]
    fn written_files_load_back() {
        let d = generate_synthetic(&small(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.write(dir.path()).unwrap();
        let ds = Dataset::load(dir.path().join("data.jsonl")).unwrap();
        assert_eq!(ds.instances, d.dataset.instances);
        let kb = KnowledgeBase::load(dir.path().join("kb.tsv")).unwrap();
        assert_eq!(kb.triples(), d.kb.triples());
        let wv = WordVectors::load(dir.path().join("word_vectors.jsonl"), 1).unwrap();
        assert_eq!(wv.dim(), d.config.word_dim);
        let p = EmbeddingProvider::load(dir.path().join("embeddings.jsonl")).unwrap();
        assert_eq!(p.len(), d.embeddings.len());
        crate::uncertainty::HallucinationSpec::load(dir.path().join("hallucination.json")).unwrap();
    }

    #[test]
    fn planted_correlation_is_recovered() {
        let (x, y) = planted_correlation(-0.5, 5000, 1);
        assert!((pearson(&x, &y).unwrap() + 0.5).abs() < 0.05);
    }
}
