use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::ImageKeyword;
use crate::text::normalize;
use crate::uncertainty::{EnsembleFile, EnsembleTokenDistributions};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerCount {
    pub answer: String,
    pub count: u32,
}

/// Ensemble distributions stored inline or in a JSON file next to the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnsembleRef {
    Path(PathBuf),
    Inline(EnsembleFile),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QAInstance {
    pub id: String,
    pub question: String,
    pub image_keywords: Vec<ImageKeyword>,
    pub implicit_embedding: Vec<f64>,
    pub generated_caption: String,
    pub ground_truth_captions: Vec<String>,
    pub ensemble: EnsembleRef,
    pub gt_answers: Vec<AnswerCount>,
    /// Objects actually in the image; only the analysis reports use them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_objects: Option<Vec<String>>,
}

impl QAInstance {
    /// Field-level checks; the error names the offending field.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let nonempty = |field: &str, s: &str| {
            if s.trim().is_empty() {
                Err(format!("field `{field}` is empty"))
            } else {
                Ok(())
            }
        };
        nonempty("id", &self.id)?;
        nonempty("question", &self.question)?;
        nonempty("generated_caption", &self.generated_caption)?;
        if self.implicit_embedding.is_empty() {
            return Err("field `implicit_embedding` is empty".into());
        }
        if self.implicit_embedding.iter().any(|v| !v.is_finite()) {
            return Err("field `implicit_embedding` has a non-finite entry".into());
        }
        if self.ground_truth_captions.is_empty() {
            return Err("field `ground_truth_captions` is empty".into());
        }
        for c in &self.ground_truth_captions {
            nonempty("ground_truth_captions", c)?;
        }
        for k in &self.image_keywords {
            nonempty("image_keywords", &k.word)?;
            if !(0.0..=1.0).contains(&k.prob) {
                return Err(format!("field `image_keywords`: prob {} outside [0, 1]", k.prob));
            }
        }
        if self.gt_answers.is_empty() {
            return Err("field `gt_answers` is empty".into());
        }
        for a in &self.gt_answers {
            nonempty("gt_answers", &a.answer)?;
            if a.count == 0 {
                return Err(format!("field `gt_answers`: answer `{}` has count 0", a.answer));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

/// Validated instances plus the directory that ensemble paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub instances: Vec<QAInstance>,
    pub split: Split,
    pub base_dir: PathBuf,
}

impl Dataset {
    pub fn new(instances: Vec<QAInstance>, split: Split) -> Result<Self> {
        let mut ids = HashSet::new();
        let mut dim = None;
        for inst in &instances {
            inst.validate()
                .map_err(|m| Error::invalid(format!("instance `{}`: {m}", inst.id)))?;
            if !ids.insert(inst.id.as_str()) {
                return Err(Error::invalid(format!("duplicate id `{}`", inst.id)));
            }
            let d = *dim.get_or_insert(inst.implicit_embedding.len());
            if d != inst.implicit_embedding.len() {
                return Err(Error::shape(format!(
                    "instance `{}` has implicit dimension {}, expected {d}",
                    inst.id,
                    inst.implicit_embedding.len()
                )));
            }
        }
        Ok(Dataset {
            instances,
            split,
            base_dir: PathBuf::from("."),
        })
    }

    /// Parse JSON lines. Errors carry the line number and field.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut instances = Vec::new();
        let mut ids = HashSet::new();
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let inst: QAInstance = serde_json::from_str(line).map_err(|e| err(i + 1, e.to_string()))?;
            inst.validate().map_err(|m| err(i + 1, m))?;
            if !ids.insert(inst.id.clone()) {
                return Err(err(i + 1, format!("duplicate id `{}`", inst.id)));
            }
            let d = *dim.get_or_insert(inst.implicit_embedding.len());
            if d != inst.implicit_embedding.len() {
                return Err(err(
                    i + 1,
                    format!(
                        "field `implicit_embedding` has dimension {}, expected {d}",
                        inst.implicit_embedding.len()
                    ),
                ));
            }
            instances.push(inst);
        }
        if instances.is_empty() {
            return Err(err(0, "dataset has no instances".into()));
        }
        Ok(Dataset {
            instances,
            split: Split::default(),
            base_dir: origin.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Dataset::parse(&text, path)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for inst in &self.instances {
            out.push_str(&serde_json::to_string(inst)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn implicit_dim(&self) -> Option<usize> {
        self.instances.first().map(|i| i.implicit_embedding.len())
    }

    /// Resolve and parse an instance's ensemble.
    pub fn ensemble(&self, i: usize) -> Result<EnsembleTokenDistributions> {
        match &self.instances[i].ensemble {
            EnsembleRef::Inline(file) => EnsembleTokenDistributions::from_file(file.clone()),
            EnsembleRef::Path(p) => EnsembleTokenDistributions::load(self.base_dir.join(p)),
        }
    }

    /// A copy restricted to `indices`, in that order.
    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        Dataset {
            instances: indices.iter().map(|&i| self.instances[i].clone()).collect(),
            split,
            base_dir: self.base_dir.clone(),
        }
    }
}

/// Seeded random split into `(train, held_out)` index lists, each ascending.
pub fn split_indices(n: usize, held_out_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((n as f64) * held_out_fraction.clamp(0.0, 1.0)).round() as usize;
    let mut held = idx[..k].to_vec();
    let mut train = idx[k..].to_vec();
    held.sort_unstable();
    train.sort_unstable();
    (train, held)
}

/// `min(#matching annotators / 3, 1)` after trimming and lowercasing.
pub fn vqa_accuracy(predicted: &str, gt_answers: &[AnswerCount]) -> f64 {
    let p = normalize(predicted);
    let matches: u32 = gt_answers
        .iter()
        .filter(|a| normalize(&a.answer) == p)
        .map(|a| a.count)
        .sum();
    (f64::from(matches) / 3.0).min(1.0)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::uncertainty::EnsembleKind;

    pub(crate) fn instance(id: &str) -> QAInstance {
        QAInstance {
            id: id.into(),
            question: "what is the kettle used for".into(),
            image_keywords: vec![ImageKeyword {
                word: "kettle".into(),
                prob: 0.9,
            }],
            implicit_embedding: vec![0.1, -0.2, 0.3],
            generated_caption: "a kettle on a stove".into(),
            ground_truth_captions: vec!["a kettle on the stove".into()],
            ensemble: EnsembleRef::Inline(EnsembleFile {
                vocab: vec!["a".into(), "kettle".into()],
                members: 2,
                tokens: 1,
                kind: EnsembleKind::Probs,
                data: vec![vec![vec![0.3, 0.7]], vec![vec![0.6, 0.4]]],
            }),
            gt_answers: vec![AnswerCount {
                answer: "Water".into(),
                count: 4,
            }],
            gt_objects: None,
        }
    }

    fn jsonl(items: &[QAInstance]) -> String {
        items.iter().map(|i| serde_json::to_string(i).unwrap() + "\n").collect()
    }

    #[test]
    fn load_examples() {
        let p = Path::new("d.jsonl");
        assert!(Dataset::parse("", p).is_err());
        assert!(Dataset::parse("\n\n", p).is_err());
        let ok = Dataset::parse(&jsonl(&[instance("a"), instance("b")]), p).unwrap();
        assert_eq!(ok.len(), 2);
        let dup = Dataset::parse(&jsonl(&[instance("a"), instance("a")]), p).unwrap_err();
        let msg = dup.to_string();
        assert!(msg.contains("`a`") && msg.contains(":2:"), "{msg}");
    }

    #[test]
    fn schema_errors_name_line_and_field() {
        let p = Path::new("d.jsonl");
        let mut bad = serde_json::to_value(instance("b")).unwrap();
        bad.as_object_mut().unwrap().remove("question");
        let text = jsonl(&[instance("a")]) + &bad.to_string() + "\n";
        let msg = Dataset::parse(&text, p).unwrap_err().to_string();
        assert!(msg.contains(":2:") && msg.contains("question"), "{msg}");

        let mut wide = instance("c");
        wide.implicit_embedding.push(0.0);
        let msg = Dataset::parse(&jsonl(&[instance("a"), wide]), p)
            .unwrap_err()
            .to_string();
        assert!(msg.contains("implicit_embedding"), "{msg}");

        let mut prob = instance("d");
        prob.image_keywords[0].prob = 1.5;
        let msg = Dataset::parse(&jsonl(&[prob]), p).unwrap_err().to_string();
        assert!(msg.contains(":1:") && msg.contains("image_keywords"), "{msg}");
    }

    #[test]
    fn ensemble_paths_resolve_against_the_dataset_directory() {
        let dir = tempfile::tempdir().unwrap();
        let EnsembleRef::Inline(file) = instance("x").ensemble else {
            unreachable!()
        };
        std::fs::write(dir.path().join("e.json"), serde_json::to_string(&file).unwrap()).unwrap();
        let mut a = instance("a");
        a.ensemble = EnsembleRef::Path("e.json".into());
        let mut b = instance("b");
        b.ensemble = EnsembleRef::Path("missing.json".into());
        let path = dir.path().join("d.jsonl");
        std::fs::write(&path, jsonl(&[a, b])).unwrap();
        let ds = Dataset::load(&path).unwrap();
        assert_eq!(ds.ensemble(0).unwrap().member_count(), 2);
        assert!(!ds.ensemble(1).unwrap_err().is_validation());
    }

    #[test]
    fn jsonl_round_trip() {
        let ds = Dataset::new(vec![instance("a"), instance("b")], Split::Train).unwrap();
        let back = Dataset::parse(&ds.to_jsonl().unwrap(), Path::new("x.jsonl")).unwrap();
        assert_eq!(back.instances, ds.instances);
    }

    #[test]
    fn vqa_accuracy_examples() {
        let gt = [
            AnswerCount {
                answer: " Water ".into(),
                count: 3,
            },
            AnswerCount {
                answer: "tea".into(),
                count: 1,
            },
        ];
        assert_eq!(vqa_accuracy("water", &gt), 1.0);
        assert_eq!(vqa_accuracy("TEA", &gt), 1.0 / 3.0);
        assert_eq!(vqa_accuracy("coffee", &gt), 0.0);
    }

    #[test]
    fn split_is_a_seeded_partition() {
        let (a, b) = split_indices(30, 1.0 / 3.0, 5);
        assert_eq!(b.len(), 10);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
        assert_eq!(split_indices(30, 1.0 / 3.0, 5), (a, b));
        assert_ne!(split_indices(30, 1.0 / 3.0, 6).1, split_indices(30, 1.0 / 3.0, 5).1);
    }
}
