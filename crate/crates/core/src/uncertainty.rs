//! Ensemble decomposition of caption-token uncertainty.
//!
//! Each ensemble member supplies a next-token distribution at every caption
//! position. The predictive distribution is the member mean; its entropy is
//! the total uncertainty, the mean member entropy is the aleatoric part and
//! the gap between them (the member disagreement) is the epistemic part.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{entropy, mean, plogp, quantile_sorted, softmax, Distribution};
use crate::text::normalize;

/// Log-probability floor applied per token by [`EnsembleTokenDistributions::sequence_log_prob`].
pub const LOG_PROB_FLOOR: f64 = 1e-12;

/// Default ensemble size used by the synthetic generator.
pub const DEFAULT_MEMBERS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleKind {
    Probs,
    Logits,
}

/// On-disk ensemble layout; `data[m][t]` is member `m`'s vector at position `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleFile {
    pub vocab: Vec<String>,
    pub members: usize,
    pub tokens: usize,
    pub kind: EnsembleKind,
    pub data: Vec<Vec<Vec<f64>>>,
}

impl EnsembleFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// `M × T` next-token distributions sharing one vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleTokenDistributions {
    vocab: Vocabulary,
    members: usize,
    tokens: usize,
    // member-major: index m * tokens + t
    probs: Vec<Distribution>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TokenUncertainty {
    pub h_total: f64,
    pub u_al: f64,
    /// Clamped at zero.
    pub u_ep: f64,
    /// `h_total - u_al` before clamping.
    pub u_ep_raw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SentenceUncertainty {
    pub per_token: Vec<TokenUncertainty>,
    pub mean_al: f64,
    pub mean_ep: f64,
    pub mean_total: f64,
}

impl EnsembleTokenDistributions {
    /// `rows[m][t]` is member `m`'s distribution at position `t`.
    pub fn new(vocab: Vocabulary, rows: Vec<Vec<Distribution>>) -> Result<Self> {
        let members = rows.len();
        if members == 0 {
            return Err(Error::invalid("ensemble needs at least one member"));
        }
        let tokens = rows[0].len();
        if tokens == 0 {
            return Err(Error::invalid("ensemble needs at least one token"));
        }
        if let Some(m) = rows.iter().position(|r| r.len() != tokens) {
            return Err(Error::shape(format!(
                "member {m} has {} tokens, member 0 has {tokens}",
                rows[m].len()
            )));
        }
        let probs: Vec<Distribution> = rows.into_iter().flatten().collect();
        if let Some(d) = probs.iter().find(|d| d.len() != vocab.len()) {
            return Err(Error::shape(format!(
                "distribution over {} entries for a vocabulary of {}",
                d.len(),
                vocab.len()
            )));
        }
        Ok(EnsembleTokenDistributions {
            vocab,
            members,
            tokens,
            probs,
        })
    }

    pub fn from_file(file: EnsembleFile) -> Result<Self> {
        let vocab = Vocabulary::new(file.vocab)?;
        if file.data.len() != file.members {
            return Err(Error::shape(format!(
                "header says {} members, data has {}",
                file.members,
                file.data.len()
            )));
        }
        let rows = file
            .data
            .into_iter()
            .enumerate()
            .map(|(m, member)| {
                if member.len() != file.tokens {
                    return Err(Error::shape(format!(
                        "header says {} tokens, member {m} has {}",
                        file.tokens,
                        member.len()
                    )));
                }
                member
                    .into_iter()
                    .map(|v| match file.kind {
                        EnsembleKind::Probs => Distribution::new(v),
                        EnsembleKind::Logits => softmax(&v),
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        EnsembleTokenDistributions::new(vocab, rows)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_file(EnsembleFile::load(path)?)
    }

    pub fn to_file(&self) -> EnsembleFile {
        EnsembleFile {
            vocab: self.vocab.tokens().to_vec(),
            members: self.members,
            tokens: self.tokens,
            kind: EnsembleKind::Probs,
            data: (0..self.members)
                .map(|m| (0..self.tokens).map(|t| self.member(m, t).probs().to_vec()).collect())
                .collect(),
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn member_count(&self) -> usize {
        self.members
    }

    pub fn token_count(&self) -> usize {
        self.tokens
    }

    pub fn member(&self, m: usize, t: usize) -> &Distribution {
        &self.probs[m * self.tokens + t]
    }

    fn check_index(&self, t: usize) -> Result<()> {
        if t >= self.tokens {
            return Err(Error::IndexOutOfRange {
                index: t,
                len: self.tokens,
            });
        }
        Ok(())
    }

    /// Predictive distribution at position `t`: the arithmetic member mean.
    pub fn mixture(&self, t: usize) -> Result<Distribution> {
        self.check_index(t)?;
        let mut acc = vec![0.0; self.vocab.len()];
        for m in 0..self.members {
            for (a, p) in acc.iter_mut().zip(self.member(m, t).probs()) {
                *a += p;
            }
        }
        let scale = self.members as f64;
        acc.iter_mut().for_each(|a| *a /= scale);
        Ok(Distribution::from_raw(acc))
    }

    pub fn token_uncertainty(&self, t: usize) -> Result<TokenUncertainty> {
        let mix = self.mixture(t)?;
        let h_total = entropy(&mix);
        let u_al = (0..self.members).map(|m| entropy(self.member(m, t))).sum::<f64>() / self.members as f64;
        let raw = h_total - u_al;
        Ok(TokenUncertainty {
            h_total,
            u_al,
            u_ep: raw.max(0.0),
            u_ep_raw: raw,
        })
    }

    pub fn sentence_uncertainty(&self) -> SentenceUncertainty {
        let per_token: Vec<TokenUncertainty> = (0..self.tokens)
            .map(|t| self.token_uncertainty(t).expect("index in range"))
            .collect();
        let avg = |f: fn(&TokenUncertainty) -> f64| per_token.iter().map(f).sum::<f64>() / per_token.len() as f64;
        SentenceUncertainty {
            mean_al: avg(|u| u.u_al),
            mean_ep: avg(|u| u.u_ep),
            mean_total: avg(|u| u.h_total),
            per_token,
        }
    }

    /// `Σ_t ln p(y_t)` under the mixture, flooring each probability at
    /// [`LOG_PROB_FLOOR`].
    pub fn sequence_log_prob(&self, sequence: &[usize]) -> Result<f64> {
        if sequence.len() != self.tokens {
            return Err(Error::shape(format!(
                "sequence of length {} for an ensemble over {} tokens",
                sequence.len(),
                self.tokens
            )));
        }
        let mut total = 0.0;
        for (t, &y) in sequence.iter().enumerate() {
            if y >= self.vocab.len() {
                return Err(Error::IndexOutOfRange {
                    index: y,
                    len: self.vocab.len(),
                });
            }
            total += self.mixture(t)?.probs()[y].max(LOG_PROB_FLOOR).ln();
        }
        Ok(total)
    }

    fn hallucinated_mask(&self, spec: &HallucinationSpec) -> Vec<bool> {
        self.vocab
            .tokens()
            .iter()
            .map(|tok| spec.is_hallucinated(tok))
            .collect()
    }

    /// Mixture probability mass on hallucinated vocabulary entries.
    pub fn hallucinated_mass(&self, t: usize, spec: &HallucinationSpec) -> Result<f64> {
        let mix = self.mixture(t)?;
        let mask = self.hallucinated_mask(spec);
        Ok(mix.probs().iter().zip(&mask).filter(|(_, &h)| h).map(|(p, _)| p).sum())
    }

    /// Mixture entropy split into `(relevant, hallucinated)` partial sums.
    pub fn entropy_split(&self, t: usize, spec: &HallucinationSpec) -> Result<(f64, f64)> {
        let mask = self.hallucinated_mask(spec);
        Ok(split_entropy(self.mixture(t)?.probs(), &mask))
    }
}

/// Partial entropies over a partition given by `hallucinated`.
pub fn split_entropy(probs: &[f64], hallucinated: &[bool]) -> (f64, f64) {
    probs.iter().zip(hallucinated).fold((0.0, 0.0), |(rel, hal), (&p, &h)| {
        if h {
            (rel, hal + plogp(p))
        } else {
            (rel + plogp(p), hal)
        }
    })
}

/// Ground-truth objects plus the synonym and object-word lists that decide
/// which caption words count as hallucinated objects.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HallucinationSpec {
    objects: BTreeSet<String>,
    synonyms: BTreeMap<String, String>,
    object_words: BTreeSet<String>,
}

/// JSON layout: `{"objects": [...], "synonyms": {...}, "object_words": [...]}`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct HallucinationSpecFile {
    #[serde(default)]
    pub objects: Vec<String>,
    #[serde(default)]
    pub synonyms: BTreeMap<String, String>,
    #[serde(default)]
    pub object_words: Vec<String>,
}

impl HallucinationSpec {
    /// An empty `object_words` list makes every token an object word.
    pub fn new<I, S>(objects: I, synonyms: BTreeMap<String, String>, object_words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let synonyms: BTreeMap<String, String> = synonyms
            .into_iter()
            .map(|(k, v)| (normalize(&k), normalize(&v)))
            .collect();
        for canonical in synonyms.values() {
            if let Some(next) = synonyms.get(canonical) {
                if next != canonical {
                    return Err(Error::invalid(format!(
                        "synonym target `{canonical}` is itself mapped to `{next}`"
                    )));
                }
            }
        }
        let mut spec = HallucinationSpec {
            objects: BTreeSet::new(),
            synonyms,
            object_words: object_words.into_iter().map(|w| normalize(w.as_ref())).collect(),
        };
        spec.objects = objects.into_iter().map(|o| spec.canonical(o.as_ref())).collect();
        Ok(spec)
    }

    pub fn from_file(file: HallucinationSpecFile) -> Result<Self> {
        Self::new(file.objects, file.synonyms, file.object_words)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file(serde_json::from_str(&text)?)
    }

    /// Same synonyms and object words, different ground-truth objects.
    pub fn with_objects<I, S>(&self, objects: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let objects = objects.into_iter().map(|o| self.canonical(o.as_ref())).collect();
        HallucinationSpec {
            objects,
            synonyms: self.synonyms.clone(),
            object_words: self.object_words.clone(),
        }
    }

    /// Single synonym lookup; unmapped words pass through.
    pub fn canonical(&self, token: &str) -> String {
        let t = normalize(token);
        self.synonyms.get(&t).cloned().unwrap_or(t)
    }

    pub fn is_object_word(&self, token: &str) -> bool {
        if self.object_words.is_empty() {
            return true;
        }
        let t = normalize(token);
        self.object_words.contains(&t) || self.object_words.contains(&self.canonical(&t))
    }

    pub fn is_hallucinated(&self, token: &str) -> bool {
        self.is_object_word(token) && !self.objects.contains(&self.canonical(token))
    }

    pub fn objects(&self) -> &BTreeSet<String> {
        &self.objects
    }
}

/// Fraction of object words in the caption that are not grounded. Captions
/// without any object word have ratio 0.
pub fn hallucination_ratio<S: AsRef<str>>(caption_tokens: &[S], spec: &HallucinationSpec) -> Result<f64> {
    if caption_tokens.is_empty() {
        return Err(Error::invalid("empty caption"));
    }
    let (objects, hallucinated) = caption_tokens
        .iter()
        .map(AsRef::as_ref)
        .filter(|t| spec.is_object_word(t))
        .fold((0usize, 0usize), |(n, h), t| {
            (n + 1, h + usize::from(spec.is_hallucinated(t)))
        });
    if objects == 0 {
        return Ok(0.0);
    }
    Ok(hallucinated as f64 / objects as f64)
}

/// Caption-mean uncertainty divided by the mean over hallucinated positions,
/// as `(aleatoric, epistemic)`. Needs one caption token per ensemble position;
/// `None` when that fails, nothing is hallucinated, or a denominator is zero.
pub fn hallucinated_uncertainty_ratio<S: AsRef<str>>(
    sentence: &SentenceUncertainty,
    caption_tokens: &[S],
    spec: &HallucinationSpec,
) -> Option<(f64, f64)> {
    if caption_tokens.len() != sentence.per_token.len() {
        return None;
    }
    let picked: Vec<&TokenUncertainty> = sentence
        .per_token
        .iter()
        .zip(caption_tokens)
        .filter(|(_, tok)| spec.is_hallucinated(tok.as_ref()))
        .map(|(u, _)| u)
        .collect();
    if picked.is_empty() {
        return None;
    }
    let al = mean(&picked.iter().map(|u| u.u_al).collect::<Vec<_>>());
    let ep = mean(&picked.iter().map(|u| u.u_ep).collect::<Vec<_>>());
    if al == 0.0 || ep == 0.0 {
        return None;
    }
    Some((sentence.mean_al / al, sentence.mean_ep / ep))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HallucinationBucket {
    G1,
    G2,
    G3,
    G4,
    G5,
}

impl HallucinationBucket {
    pub const ALL: [HallucinationBucket; 5] = [Self::G1, Self::G2, Self::G3, Self::G4, Self::G5];

    /// Half-open fifths of `[0, 1]`; the last bucket also takes 1.0.
    pub fn from_ratio(ratio: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::invalid(format!("hallucination ratio {ratio} outside [0, 1]")));
        }
        Ok(match ratio {
            r if r < 0.2 => Self::G1,
            r if r < 0.4 => Self::G2,
            r if r < 0.6 => Self::G3,
            r if r < 0.8 => Self::G4,
            _ => Self::G5,
        })
    }
}

impl fmt::Display for HallucinationBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "G{}", *self as usize + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl FiveNumber {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(FiveNumber {
            min: v[0],
            q1: quantile_sorted(&v, 0.25),
            median: quantile_sorted(&v, 0.5),
            q3: quantile_sorted(&v, 0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketStats {
    pub bucket: HallucinationBucket,
    pub count: usize,
    pub al: Option<FiveNumber>,
    pub ep: Option<FiveNumber>,
}

/// Boxplot statistics of sentence-mean uncertainties per bucket. Always
/// returns five rows, G1 through G5.
pub fn group_uncertainty_report(items: &[(SentenceUncertainty, HallucinationBucket)]) -> Vec<BucketStats> {
    let values: Vec<(f64, f64, HallucinationBucket)> = items.iter().map(|(s, b)| (s.mean_al, s.mean_ep, *b)).collect();
    group_values(&values)
}

/// [`group_uncertainty_report`] over raw `(aleatoric, epistemic, bucket)` rows.
pub fn group_values(values: &[(f64, f64, HallucinationBucket)]) -> Vec<BucketStats> {
    HallucinationBucket::ALL
        .iter()
        .map(|&bucket| {
            let (al, ep): (Vec<f64>, Vec<f64>) = values
                .iter()
                .filter(|(_, _, b)| *b == bucket)
                .map(|(a, e, _)| (*a, *e))
                .unzip();
            BucketStats {
                bucket,
                count: al.len(),
                al: FiveNumber::of(&al),
                ep: FiveNumber::of(&ep),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab(n: usize) -> Vocabulary {
        Vocabulary::new((0..n).map(|i| format!("w{i}")).collect()).unwrap()
    }

    fn dist(p: &[f64]) -> Distribution {
        Distribution::new(p.to_vec()).unwrap()
    }

    fn ens(rows: Vec<Vec<Vec<f64>>>) -> EnsembleTokenDistributions {
        let v = rows[0][0].len();
        let rows = rows.into_iter().map(|m| m.iter().map(|p| dist(p)).collect()).collect();
        EnsembleTokenDistributions::new(vocab(v), rows).unwrap()
    }

    #[test]
    fn mixture_examples() {
        let single = ens(vec![vec![vec![0.3, 0.7]]]);
        assert_eq!(single.mixture(0).unwrap().probs(), &[0.3, 0.7]);
        let opposed = ens(vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]]);
        assert_eq!(opposed.mixture(0).unwrap().probs(), &[0.5, 0.5]);
        let e = ens(vec![vec![vec![0.8, 0.2]], vec![vec![0.4, 0.6]]]);
        let mix = e.mixture(0).unwrap();
        assert!((mix.probs()[0] - 0.6).abs() < 1e-15 && (mix.probs()[1] - 0.4).abs() < 1e-15);
        assert!(matches!(e.mixture(1), Err(Error::IndexOutOfRange { index: 1, len: 1 })));
    }

    #[test]
    fn token_uncertainty_examples() {
        let d = vec![0.2, 0.5, 0.3];
        let same = ens(vec![vec![d.clone()], vec![d.clone()], vec![d.clone()]]);
        let u = same.token_uncertainty(0).unwrap();
        assert!(u.u_ep.abs() < 1e-15);
        assert!((u.u_al - entropy(&dist(&d))).abs() < 1e-15);

        let opposed = ens(vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]]);
        let u = opposed.token_uncertainty(0).unwrap();
        assert_eq!(u.u_al, 0.0);
        assert!((u.h_total - 2f64.ln()).abs() < 1e-15);
        assert!((u.u_ep - std::f64::consts::LN_2).abs() < 1e-12);

        let one = ens(vec![vec![vec![0.1, 0.2, 0.7]]]);
        assert_eq!(one.token_uncertainty(0).unwrap().u_ep, 0.0);
    }

    #[test]
    fn sentence_uncertainty_examples() {
        let one = ens(vec![vec![vec![0.1, 0.9]], vec![vec![0.6, 0.4]]]);
        let s = one.sentence_uncertainty();
        let u = one.token_uncertainty(0).unwrap();
        assert_eq!((s.mean_al, s.mean_ep, s.mean_total), (u.u_al, u.u_ep, u.h_total));

        // token 0: members agree (u_ep = 0); token 1: deterministic disagreement (u_ep = ln 2)
        let two = ens(vec![
            vec![vec![1.0, 0.0], vec![1.0, 0.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        ]);
        let s = two.sentence_uncertainty();
        assert!((s.mean_ep - 2f64.ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn sequence_log_prob_examples() {
        let sure = ens(vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]]);
        assert_eq!(sure.sequence_log_prob(&[0, 1]).unwrap(), 0.0);
        let half = ens(vec![vec![vec![0.5, 0.5], vec![0.5, 0.5]]]);
        assert!((half.sequence_log_prob(&[0, 1]).unwrap() - 0.25f64.ln()).abs() < 1e-12);
        let floored = sure.sequence_log_prob(&[1, 1]).unwrap();
        assert_eq!(floored, LOG_PROB_FLOOR.ln());
        assert!(sure.sequence_log_prob(&[0]).is_err());
        assert!(sure.sequence_log_prob(&[0, 5]).is_err());
    }

    fn spec_hallucinating(tokens: &[&str], all: &[&str]) -> HallucinationSpec {
        let grounded: Vec<&str> = all.iter().filter(|t| !tokens.contains(t)).copied().collect();
        HallucinationSpec::new(grounded, BTreeMap::new(), all.to_vec()).unwrap()
    }

    #[test]
    fn hallucinated_mass_examples() {
        let e = ens(vec![vec![vec![0.5, 0.3, 0.2]]]);
        let all = ["w0", "w1", "w2"];
        assert_eq!(e.hallucinated_mass(0, &spec_hallucinating(&[], &all)).unwrap(), 0.0);
        let every = e.hallucinated_mass(0, &spec_hallucinating(&all, &all)).unwrap();
        assert!((every - 1.0).abs() < 1e-15);
        let third = e.hallucinated_mass(0, &spec_hallucinating(&["w2"], &all)).unwrap();
        assert!((third - 0.2).abs() < 1e-15);
    }

    #[test]
    fn entropy_split_examples() {
        let all = ["w0", "w1"];
        let e = ens(vec![vec![vec![0.5, 0.5]]]);
        let h = e.token_uncertainty(0).unwrap().h_total;
        assert_eq!(e.entropy_split(0, &spec_hallucinating(&[], &all)).unwrap(), (h, 0.0));
        let (r, hal) = e.entropy_split(0, &spec_hallucinating(&["w1"], &all)).unwrap();
        assert!((r - 0.5 * 2f64.ln()).abs() < 1e-15 && (hal - 0.5 * 2f64.ln()).abs() < 1e-15);
        let det = ens(vec![vec![vec![0.0, 1.0]]]);
        assert_eq!(
            det.entropy_split(0, &spec_hallucinating(&["w1"], &all)).unwrap(),
            (0.0, 0.0)
        );
    }

    #[test]
    fn hallucination_ratio_examples() {
        let words = ["dog", "cat", "car", "tree"];
        let syn = BTreeMap::from([("puppy".to_string(), "dog".to_string())]);
        let spec = HallucinationSpec::new(words, syn.clone(), words).unwrap();
        let caption = ["a", "puppy", "and", "a", "cat"];
        // "puppy" is not an object word itself but its canonical form is
        assert_eq!(hallucination_ratio(&caption, &spec).unwrap(), 0.0);

        let none = spec.with_objects(["boat"]);
        assert_eq!(hallucination_ratio(&["dog", "cat", "on", "car"], &none).unwrap(), 1.0);

        let partial = spec.with_objects(["dog", "cat", "car"]);
        let r = hallucination_ratio(&["dog", "cat", "car", "tree", "near"], &partial).unwrap();
        assert_eq!(r, 0.25);

        assert!(hallucination_ratio::<&str>(&[], &spec).is_err());
        assert_eq!(hallucination_ratio(&["the", "a"], &spec).unwrap(), 0.0);
    }

    #[test]
    fn synonym_map_must_be_idempotent() {
        let chain = BTreeMap::from([
            ("pup".to_string(), "puppy".to_string()),
            ("puppy".to_string(), "dog".to_string()),
        ]);
        assert!(HallucinationSpec::new(["dog"], chain, ["dog"]).is_err());
    }

    #[test]
    fn bucket_edges() {
        use HallucinationBucket::*;
        assert_eq!(HallucinationBucket::from_ratio(0.0).unwrap(), G1);
        assert_eq!(HallucinationBucket::from_ratio(0.2).unwrap(), G2);
        assert_eq!(HallucinationBucket::from_ratio(0.4).unwrap(), G3);
        assert_eq!(HallucinationBucket::from_ratio(0.6).unwrap(), G4);
        assert_eq!(HallucinationBucket::from_ratio(0.8).unwrap(), G5);
        assert_eq!(HallucinationBucket::from_ratio(1.0).unwrap(), G5);
        assert!(HallucinationBucket::from_ratio(1.01).is_err());
        assert!(HallucinationBucket::from_ratio(-0.01).is_err());
        assert_eq!(G3.to_string(), "G3");
    }

    fn sentence(al: f64, ep: f64) -> SentenceUncertainty {
        SentenceUncertainty {
            per_token: vec![],
            mean_al: al,
            mean_ep: ep,
            mean_total: al + ep,
        }
    }

    #[test]
    fn group_report_examples() {
        use HallucinationBucket::*;
        let r = group_uncertainty_report(&[(sentence(0.7, 0.1), G2)]);
        assert_eq!(r.len(), 5);
        let g2 = r[1].al.unwrap();
        assert_eq!([g2.min, g2.q1, g2.median, g2.q3, g2.max], [0.7; 5]);
        assert_eq!(r[0].count, 0);
        assert!(r[0].al.is_none());

        let items: Vec<_> = (1..=5).map(|v| (sentence(v as f64, 0.0), G4)).collect();
        assert_eq!(group_uncertainty_report(&items)[3].al.unwrap().median, 3.0);

        // monotone synthetic data: uncertainty rises with the ratio
        let items: Vec<_> = (0..=100)
            .map(|i| {
                let ratio = i as f64 / 100.0;
                let wiggle = ((i * 37) % 11) as f64 * 0.01;
                (
                    sentence(ratio + wiggle, 0.5 * ratio + wiggle),
                    HallucinationBucket::from_ratio(ratio).unwrap(),
                )
            })
            .collect();
        let report = group_uncertainty_report(&items);
        for w in report.windows(2) {
            assert!(w[0].al.unwrap().median <= w[1].al.unwrap().median);
            assert!(w[0].ep.unwrap().median <= w[1].ep.unwrap().median);
        }
    }

    #[test]
    fn logits_file_goes_through_softmax() {
        let file = EnsembleFile {
            vocab: vec!["a".into(), "b".into()],
            members: 1,
            tokens: 1,
            kind: EnsembleKind::Logits,
            data: vec![vec![vec![2f64.ln(), 0.0]]],
        };
        let e = EnsembleTokenDistributions::from_file(file).unwrap();
        assert!((e.member(0, 0).probs()[0] - 2.0 / 3.0).abs() < 1e-15);
        let bad = EnsembleFile {
            vocab: vec!["a".into(), "b".into()],
            members: 2,
            tokens: 1,
            kind: EnsembleKind::Probs,
            data: vec![vec![vec![0.5, 0.5]]],
        };
        assert!(EnsembleTokenDistributions::from_file(bad).is_err());
    }

    fn arb_ensemble() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
        (1usize..5, 2usize..8).prop_flat_map(|(m, v)| (Just(m), Just(v), prop::collection::vec(-4.0f64..4.0, m * v)))
    }

    proptest! {
        #[test]
        fn decomposition_identity((m, v, logits) in arb_ensemble()) {
            let rows: Vec<Vec<Distribution>> = logits
                .chunks(v)
                .map(|c| vec![softmax(c).unwrap()])
                .collect();
            let e = EnsembleTokenDistributions::new(vocab(v), rows.clone()).unwrap();
            let u = e.token_uncertainty(0).unwrap();
            prop_assert!((u.h_total - u.u_al - u.u_ep).abs() <= 1e-9);
            prop_assert!(u.u_ep >= 0.0 && u.u_ep_raw >= -1e-9);
            if m == 1 {
                prop_assert_eq!(u.u_ep, 0.0);
            }
            let mut rev = rows;
            rev.reverse();
            let r = EnsembleTokenDistributions::new(vocab(v), rev).unwrap().token_uncertainty(0).unwrap();
            prop_assert!((r.h_total - u.h_total).abs() <= 1e-12);
            prop_assert!((r.u_al - u.u_al).abs() <= 1e-12);
            prop_assert!((r.u_ep - u.u_ep).abs() <= 1e-12);
        }

        #[test]
        fn split_conserves_entropy(
            logits in prop::collection::vec(-5.0f64..5.0, 2..20),
            mask_bits in any::<u32>(),
        ) {
            let d = softmax(&logits).unwrap();
            let mask: Vec<bool> = (0..d.len()).map(|i| mask_bits >> i & 1 == 1).collect();
            let (r, h) = split_entropy(d.probs(), &mask);
            prop_assert!((r + h - entropy(&d)).abs() <= 1e-9);
        }

        #[test]
        fn buckets_partition_unit_interval(r in 0.0f64..=1.0) {
            let b = HallucinationBucket::from_ratio(r).unwrap();
            let lo = b as usize as f64 * 0.2;
            prop_assert!(r >= lo - 1e-12);
            if b != HallucinationBucket::G5 {
                prop_assert!(r < lo + 0.2);
            }
        }
    }
}
