use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::skewness;
use crate::par;
use crate::similarity::{correlation_report, CorrelationReport, EmbeddingProvider, ReferenceMode, SimilarityRecord};
use crate::text::tokenize;
use crate::uncertainty::{group_values, hallucination_ratio, BucketStats, HallucinationBucket, HallucinationSpec};

use super::dataset::Dataset;
use super::run::{instance_signals, Skipped};

pub const HISTOGRAM_BINS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisRecord {
    pub id: String,
    pub mean_al: f64,
    pub mean_ep: f64,
    pub sim: f64,
    /// Present when the instance lists its ground-truth objects.
    pub hallucination_ratio: Option<f64>,
}

/// Per-instance signals for the reports. Without a spec every caption token
/// counts as an object word.
pub fn analysis_records(
    dataset: &Dataset,
    provider: &EmbeddingProvider,
    mode: ReferenceMode,
    spec: Option<&HallucinationSpec>,
) -> (Vec<AnalysisRecord>, Vec<Skipped>) {
    let default_spec = HallucinationSpec::default();
    let spec = spec.unwrap_or(&default_spec);
    let results = par::map_range(dataset.len(), |i| -> Result<AnalysisRecord> {
        let inst = &dataset.instances[i];
        let (signals, _) = instance_signals(dataset, i, provider, mode)?;
        let hallucination_ratio = match &inst.gt_objects {
            Some(objects) => Some(hallucination_ratio(
                &tokenize(&inst.generated_caption),
                &spec.with_objects(objects),
            )?),
            None => None,
        };
        Ok(AnalysisRecord {
            id: inst.id.clone(),
            mean_al: signals.u_al,
            mean_ep: signals.u_ep,
            sim: signals.sim,
            hallucination_ratio,
        })
    });
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => skipped.push(Skipped {
                id: dataset.instances[i].id.clone(),
                error: e.to_string(),
            }),
        }
    }
    (records, skipped)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub variable: String,
    pub min: f64,
    pub max: f64,
    pub counts: Vec<usize>,
    pub skewness: Option<f64>,
}

impl Histogram {
    /// Equal-width bins over `[min, max]`; a zero range puts all mass in bin 0.
    pub fn new(variable: &str, values: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut counts = vec![0; bins];
        let width = (max - min) / bins as f64;
        for &v in values {
            let b = if width > 0.0 {
                (((v - min) / width) as usize).min(bins - 1)
            } else {
                0
            };
            counts[b] += 1;
        }
        Histogram {
            variable: variable.into(),
            min: if values.is_empty() { 0.0 } else { min },
            max: if values.is_empty() { 0.0 } else { max },
            counts,
            skewness: skewness(values),
        }
    }

    pub fn bin_edges(&self, b: usize) -> (f64, f64) {
        let w = (self.max - self.min) / self.counts.len() as f64;
        (self.min + w * b as f64, self.min + w * (b + 1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub correlations: Option<CorrelationReport>,
    pub histograms: Vec<Histogram>,
    pub buckets: Vec<BucketStats>,
    pub notices: Vec<String>,
}

pub fn analyze(records: &[AnalysisRecord]) -> AnalysisReport {
    let mut notices = Vec::new();
    let sim_records: Vec<SimilarityRecord> = records
        .iter()
        .map(|r| SimilarityRecord {
            sim: r.sim,
            u_al: r.mean_al,
            u_ep: r.mean_ep,
        })
        .collect();
    let correlations = if records.len() < 2 {
        notices.push(format!(
            "correlations omitted: {} instance(s), need at least 2",
            records.len()
        ));
        None
    } else {
        match correlation_report(&sim_records) {
            Ok(c) => Some(c),
            Err(e) => {
                notices.push(format!("correlations omitted: {e}"));
                None
            }
        }
    };
    let column = |f: fn(&AnalysisRecord) -> f64| records.iter().map(f).collect::<Vec<f64>>();
    let histograms = vec![
        Histogram::new("mean_al", &column(|r| r.mean_al), HISTOGRAM_BINS),
        Histogram::new("mean_ep", &column(|r| r.mean_ep), HISTOGRAM_BINS),
        Histogram::new("sim", &column(|r| r.sim), HISTOGRAM_BINS),
    ];
    let mut grouped = Vec::new();
    for r in records {
        if let Some(ratio) = r.hallucination_ratio {
            match HallucinationBucket::from_ratio(ratio) {
                Ok(b) => grouped.push((r.mean_al, r.mean_ep, b)),
                Err(e) => notices.push(format!("instance `{}` not bucketed: {e}", r.id)),
            }
        }
    }
    if grouped.is_empty() {
        notices.push("no instance lists ground-truth objects; buckets are empty".into());
    }
    AnalysisReport {
        correlations,
        histograms,
        buckets: group_values(&grouped),
        notices,
    }
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl AnalysisReport {
    /// Writes `correlations.csv`, `distributions.csv` and `buckets.csv`.
    pub fn write(&self, out_dir: impl AsRef<Path>) -> Result<()> {
        let dir = out_dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

        let corr_rows = self
            .correlations
            .map(|c| {
                c.rows()
                    .iter()
                    .map(|(l, v)| vec![l.to_string(), v.to_string()])
                    .collect()
            })
            .unwrap_or_default();
        write_csv(&dir.join("correlations.csv"), &["pair", "pearson"], corr_rows)?;

        let mut dist_rows = Vec::new();
        for h in &self.histograms {
            for (b, c) in h.counts.iter().enumerate() {
                let (lo, hi) = h.bin_edges(b);
                dist_rows.push(vec![
                    h.variable.clone(),
                    b.to_string(),
                    lo.to_string(),
                    hi.to_string(),
                    c.to_string(),
                    opt(h.skewness),
                ]);
            }
        }
        write_csv(
            &dir.join("distributions.csv"),
            &["variable", "bin", "lower", "upper", "count", "skewness"],
            dist_rows,
        )?;

        let five = |f: Option<crate::uncertainty::FiveNumber>| match f {
            Some(s) => [s.min, s.q1, s.median, s.q3, s.max].map(|v| v.to_string()).to_vec(),
            None => vec![String::new(); 5],
        };
        let bucket_rows = self
            .buckets
            .iter()
            .map(|b| {
                let mut row = vec![b.bucket.to_string(), b.count.to_string()];
                row.extend(five(b.al));
                row.extend(five(b.ep));
                row
            })
            .collect();
        write_csv(
            &dir.join("buckets.csv"),
            &[
                "bucket",
                "count",
                "al_min",
                "al_q1",
                "al_median",
                "al_q3",
                "al_max",
                "ep_min",
                "ep_q1",
                "ep_median",
                "ep_q3",
                "ep_max",
            ],
            bucket_rows,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: usize, sim: f64, al: f64, ratio: Option<f64>) -> AnalysisRecord {
        AnalysisRecord {
            id: id.to_string(),
            mean_al: al,
            mean_ep: al / 10.0,
            sim,
            hallucination_ratio: ratio,
        }
    }

    #[test]
    fn identical_values_fill_one_bin() {
        let h = Histogram::new("sim", &[0.7; 12], HISTOGRAM_BINS);
        assert_eq!(h.counts[0], 12);
        assert_eq!(h.counts.iter().sum::<usize>(), 12);
        assert!(h.skewness.is_none());
    }

    #[test]
    fn histogram_covers_extremes() {
        let xs: Vec<f64> = (0..=30).map(f64::from).collect();
        let h = Histogram::new("x", &xs, 30);
        assert_eq!(h.counts.iter().sum::<usize>(), 31);
        assert_eq!(h.counts[29], 2);
        assert_eq!(h.bin_edges(0), (0.0, 1.0));
    }

    #[test]
    fn small_inputs_omit_correlations_with_notice() {
        let r = analyze(&[rec(0, 0.5, 1.0, None)]);
        assert!(r.correlations.is_none());
        assert!(r.notices.iter().any(|n| n.contains("correlations omitted")));
        assert_eq!(r.buckets.len(), 5);
    }

    #[test]
    fn report_files_have_fixed_shapes() {
        let records: Vec<AnalysisRecord> = (0..20)
            .map(|i| {
                rec(
                    i,
                    1.0 - i as f64 / 20.0,
                    i as f64 / 10.0 + (i % 3) as f64 * 0.01,
                    Some(0.2),
                )
            })
            .collect();
        let report = analyze(&records);
        assert!(report.correlations.unwrap().sim_al < 0.0);
        let dir = tempfile::tempdir().unwrap();
        report.write(dir.path()).unwrap();
        let read = |f: &str| std::fs::read_to_string(dir.path().join(f)).unwrap();
        assert_eq!(read("correlations.csv").lines().count(), 4);
        assert_eq!(read("distributions.csv").lines().count(), 1 + 3 * HISTOGRAM_BINS);
        let buckets = read("buckets.csv");
        let labels: Vec<&str> = buckets.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(labels, ["G1", "G2", "G3", "G4", "G5"]);
        assert!(buckets.lines().nth(2).unwrap().starts_with("G2,20,"));
    }
}
