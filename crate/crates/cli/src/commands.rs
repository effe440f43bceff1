use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kvqa_core::error::Error;
use kvqa_core::fusion::{FeatureSelector, GateMode};
use kvqa_core::knowledge::{KnowledgeBase, StopWords, WordVectors};
use kvqa_core::pipeline::{
    analysis_records, analyze, evaluate, evaluate_prepared, generate_synthetic, load_checkpoint, prepare_instance,
    save_checkpoint, split_indices, train, Checkpoint, Dataset, QAInstance, Resources, Split, DEFAULT_STOPWORDS,
};
use kvqa_core::similarity::{correlation_report, EmbeddingProvider, SimilarityRecord};
use kvqa_core::uncertainty::HallucinationSpec;
use serde_json::json;

use crate::config::FileConfig;
use crate::{Cli, Command, Lookups, Status};

fn status(skipped: usize) -> Status {
    if skipped == 0 {
        Status::Complete
    } else {
        Status::Skipped(skipped)
    }
}

/// Write to `out`, or to stdout when no path is given.
fn emit(out: Option<&Path>, body: &str) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
        }
        None => match std::io::stdout().lock().write_all(body.as_bytes()) {
            Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
            _ => Ok(()),
        },
    }
}

fn provider(path: Option<&Path>, cfg: &FileConfig) -> Result<EmbeddingProvider> {
    Ok(match path {
        Some(p) => EmbeddingProvider::load(p)?,
        None => EmbeddingProvider::fallback_only(cfg.embedding_dim),
    })
}

fn stopwords(path: Option<&Path>) -> Result<StopWords> {
    Ok(match path {
        Some(p) => StopWords::load(p)?,
        None => StopWords::new(DEFAULT_STOPWORDS),
    })
}

fn hallucination(path: Option<&Path>) -> Result<Option<HallucinationSpec>> {
    path.map(|p| HallucinationSpec::load(p).map_err(Into::into)).transpose()
}

fn synonyms(path: Option<&Path>) -> Result<BTreeMap<String, String>> {
    Ok(match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let file: kvqa_core::uncertainty::HallucinationSpecFile = serde_json::from_str(&text)?;
            // validates the map
            HallucinationSpec::from_file(file.clone())?;
            file.synonyms
        }
        None => BTreeMap::new(),
    })
}

fn resources(l: &Lookups, cfg: &FileConfig, word_dim: usize) -> Result<Resources> {
    let word_vectors = match &l.word_vectors {
        Some(p) => WordVectors::load(p, word_dim)?,
        None => WordVectors::empty(word_dim),
    };
    let mut res = Resources::new(
        KnowledgeBase::load(&l.kb)?,
        provider(l.embeddings.as_deref(), cfg)?,
        word_vectors,
    );
    res.stopwords = stopwords(l.stopwords.as_deref())?;
    res.synonyms = synonyms(l.hallucination.as_deref())?;
    res.settings = cfg.eval;
    Ok(res)
}

fn parse_selector(s: &str) -> Result<FeatureSelector> {
    Ok(s.parse::<FeatureSelector>()?)
}

fn checkpoint_resources(l: &Lookups, cfg: &FileConfig, checkpoint: &Checkpoint) -> Result<Resources> {
    let mut res = resources(l, cfg, checkpoint.model.config.dims.word)?;
    let expected = checkpoint.model.config.dims.word;
    if res.word_vectors.dim() != expected {
        return Err(Error::ConfigMismatch(format!(
            "word vectors have dimension {}, the model expects {expected}",
            res.word_vectors.dim()
        ))
        .into());
    }
    res.settings = checkpoint.eval;
    Ok(res)
}

pub fn run(cli: Cli) -> Result<Status> {
    let mut cfg = FileConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let out = cli.out.as_deref();
    match cli.command {
        Command::Synth {
            n,
            consistency_rate,
            ep_coupling,
        } => {
            let mut sc = cfg.synth.clone();
            sc.seed = seed;
            sc.n = n.unwrap_or(sc.n);
            sc.consistency_rate = consistency_rate.unwrap_or(sc.consistency_rate);
            sc.ep_coupling = ep_coupling.unwrap_or(sc.ep_coupling);
            let data = generate_synthetic(&sc)?;
            let dir = out.unwrap_or(Path::new("synthetic"));
            data.write(dir)?;
            eprintln!("wrote {} instances to {}", data.dataset.len(), dir.display());
            Ok(Status::Complete)
        }
        Command::Analyze {
            data,
            embeddings,
            hallucination: spec_path,
            reference_mode,
        } => {
            let ds = Dataset::load(&data)?;
            let provider = provider(embeddings.as_deref(), &cfg)?;
            let spec = hallucination(spec_path.as_deref())?;
            let mode = reference_mode.unwrap_or(cfg.eval.reference_mode);
            let (records, skipped) = analysis_records(&ds, &provider, mode, spec.as_ref());
            for s in &skipped {
                eprintln!("skipped {}: {}", s.id, s.error);
            }
            let report = analyze(&records);
            for n in &report.notices {
                eprintln!("note: {n}");
            }
            let dir = out.unwrap_or(Path::new("analysis"));
            report.write(dir)?;
            eprintln!("wrote reports for {} instances to {}", records.len(), dir.display());
            Ok(status(skipped.len()))
        }
        Command::Correlate {
            data,
            embeddings,
            reference_mode,
        } => {
            let ds = Dataset::load(&data)?;
            let provider = provider(embeddings.as_deref(), &cfg)?;
            let mode = reference_mode.unwrap_or(cfg.eval.reference_mode);
            let (records, skipped) = analysis_records(&ds, &provider, mode, None);
            for s in &skipped {
                eprintln!("skipped {}: {}", s.id, s.error);
            }
            let recs: Vec<SimilarityRecord> = records
                .iter()
                .map(|r| SimilarityRecord {
                    sim: r.sim,
                    u_al: r.mean_al,
                    u_ep: r.mean_ep,
                })
                .collect();
            let report = correlation_report(&recs)?;
            let mut body = String::from("pair,pearson\n");
            for (pair, v) in report.rows() {
                body.push_str(&format!("{pair},{v}\n"));
            }
            emit(out, &body)?;
            Ok(status(skipped.len()))
        }
        Command::Retrieve {
            data,
            kb,
            stopwords: stop_path,
            hops,
            id,
        } => {
            let ds = Dataset::load(&data)?;
            let kb = KnowledgeBase::load(&kb)?;
            let stop = stopwords(stop_path.as_deref())?;
            let hops = hops.unwrap_or(cfg.eval.hops);
            let mut body = String::new();
            let mut found = false;
            for inst in &ds.instances {
                if id.as_ref().is_some_and(|want| *want != inst.id) {
                    continue;
                }
                found = true;
                let g = kb.retrieve_subgraph(&inst.image_keywords, &stop.question_words(&inst.question), hops);
                body.push_str(&serde_json::to_string(&json!({ "id": inst.id, "subgraph": g }))?);
                body.push('\n');
            }
            if let (Some(want), false) = (&id, found) {
                return Err(Error::Invalid(format!("no instance with id `{want}`")).into());
            }
            emit(out, &body)?;
            Ok(Status::Complete)
        }
        Command::Train {
            data,
            lookups,
            selector,
            ungated,
            epochs,
            lr,
            momentum,
            batch_size,
            val_fraction,
            hops,
            reference_mode,
        } => {
            let mut settings = cfg.train.clone();
            if let Some(s) = selector {
                settings.selector = parse_selector(&s)?;
            }
            if ungated {
                settings.gate = GateMode::Ungated;
            }
            let opt = &mut settings.optimizer;
            opt.seed = seed;
            opt.epochs = epochs.unwrap_or(opt.epochs);
            opt.lr = lr.unwrap_or(opt.lr);
            opt.momentum = momentum.unwrap_or(opt.momentum);
            opt.batch_size = batch_size.unwrap_or(opt.batch_size);
            if let Some(h) = hops {
                cfg.eval.hops = h;
            }
            if let Some(m) = reference_mode {
                cfg.eval.reference_mode = m;
            }
            let val_fraction = val_fraction.unwrap_or(cfg.val_fraction);
            if !(0.0..1.0).contains(&val_fraction) {
                bail!(Error::Invalid(format!(
                    "--val-fraction must be in [0, 1), got {val_fraction}"
                )));
            }
            let ds = Dataset::load(&data)?;
            let res = resources(&lookups, &cfg, cfg.word_dim)?;
            let (tr, val) = split_indices(ds.len(), val_fraction, seed);
            let train_set = ds.subset(&tr, Split::Train);
            let outcome = train(&train_set, &res, &settings)?;
            for s in &outcome.skipped {
                eprintln!("skipped {}: {}", s.id, s.error);
            }
            let mut skipped = outcome.skipped.len();
            let val_accuracy = if val.is_empty() {
                None
            } else {
                let r = evaluate(&ds.subset(&val, Split::Val), &outcome.model, &res)?;
                skipped += r.skipped.len();
                Some(r.accuracy)
            };
            let path = out.unwrap_or(Path::new("model.json"));
            save_checkpoint(
                &Checkpoint {
                    model: outcome.model,
                    eval: res.settings,
                },
                path,
            )?;
            let summary = json!({
                "checkpoint": path,
                "seed": seed,
                "train_instances": tr.len() - outcome.skipped.len(),
                "val_instances": val.len(),
                "val_accuracy": val_accuracy,
                "loss_trace": outcome.loss_trace,
            });
            emit(None, &(serde_json::to_string_pretty(&summary)? + "\n"))?;
            Ok(status(skipped))
        }
        Command::Eval {
            data,
            lookups,
            model,
            selector,
        } => {
            let checkpoint = load_checkpoint(&model)?;
            if let Some(s) = selector {
                checkpoint.model.ensure_selector(parse_selector(&s)?)?;
            }
            let res = checkpoint_resources(&lookups, &cfg, &checkpoint)?;
            let ds = Dataset::load(&data)?;
            let result = evaluate(&ds, &checkpoint.model, &res)?;
            for s in &result.skipped {
                eprintln!("skipped {}: {}", s.id, s.error);
            }
            emit(out, &result.to_csv()?)?;
            eprintln!(
                "accuracy {:.4} over {} instances, {} skipped",
                result.accuracy,
                result.instances.len(),
                result.skipped.len()
            );
            Ok(status(result.skipped.len()))
        }
        Command::Predict {
            instance,
            lookups,
            model,
        } => {
            let checkpoint = load_checkpoint(&model)?;
            let res = checkpoint_resources(&lookups, &cfg, &checkpoint)?;
            let text = std::fs::read_to_string(&instance).with_context(|| format!("reading {}", instance.display()))?;
            let inst: QAInstance = serde_json::from_str(&text)?;
            let mut ds = Dataset::new(vec![inst], Split::Test)?;
            ds.base_dir = instance.parent().map(PathBuf::from).unwrap_or_default();
            let prepared = prepare_instance(&ds, 0, &res, &checkpoint.model.answers)?;
            let r = evaluate_prepared(&checkpoint.model, std::slice::from_ref(&prepared))?.remove(0);
            let body = serde_json::to_string_pretty(&json!({
                "id": r.id,
                "answer": r.predicted,
                "score": r.score,
                "v_score": r.v_score,
                "g_score": r.g_score,
                "accuracy": r.accuracy,
                "retrieved_nodes": prepared.input.subgraph.nodes.len(),
            }))? + "\n";
            emit(out, &body)?;
            Ok(Status::Complete)
        }
    }
}
