use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;
use speech_quality::data::{
    load_manifest, simulate_entry, write_manifest, DatasetEntry, ManifestRecord,
};
use speech_quality::diffcore::Checkpoint;
use speech_quality::labels::{decode_expect, decode_max};
use speech_quality::metrics::EvalReport;
use speech_quality::signal::{load_wav, write_wav};
use speech_quality::train::{Prediction, Trainer};

use crate::config::{RunConfig, SPLITS};
use crate::error::{CliError, CliResult};

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
const BEST_STATE: &str = "best.json";
pub const ENTRIES_FILE: &str = "entries.jsonl";

fn threads(requested: usize) -> usize {
    if requested > 0 {
        requested
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
}

fn timestamp() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))
}

/// Per-entry record written next to the manifests by `simulate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryRecord {
    pub split: String,
    pub index: usize,
    pub degraded: String,
    pub label: f64,
    pub snr_db: Option<f64>,
    pub perturbed: bool,
    pub origin: String,
}

/// Writes the synthetic train/valid/test splits under `out`.
///
/// Entry `k` of the whole corpus depends only on `(seed, k)`; splits take
/// consecutive index ranges, so they are disjoint.
pub fn simulate(cfg: &RunConfig, out: &Path) -> CliResult<Vec<EntryRecord>> {
    cfg.validate_simulation()?;
    create_dir(out)?;
    let seed = cfg.data.simulate.seed;
    let counts = cfg.split_counts();
    let mut records = Vec::new();
    let mut offset = 0;
    for (split, &count) in SPLITS.iter().zip(&counts) {
        let sim = cfg.sim(count);
        create_dir(&out.join(split))?;
        let mut manifest = Vec::with_capacity(count);
        for k in offset..offset + count {
            let e = simulate_entry(&sim, seed, k)?;
            let degraded = format!("{split}/{k:05}_degraded.wav");
            let clean = format!("{split}/{k:05}_clean.wav");
            write_wav(out.join(&degraded), &e.degraded)?;
            if let Some(c) = &e.clean {
                write_wav(out.join(&clean), c)?;
            }
            manifest.push(ManifestRecord {
                degraded: PathBuf::from(&degraded),
                clean: e.clean.as_ref().map(|_| PathBuf::from(&clean)),
                label: e.label.value(),
            });
            records.push(EntryRecord {
                split: split.to_string(),
                index: k,
                degraded,
                label: e.label.value(),
                snr_db: e.meta.snr_db,
                perturbed: e.meta.perturbed,
                origin: e.meta.origin,
            });
        }
        write_manifest(out.join(format!("{split}.tsv")), &manifest)?;
        info!("{split}: {count} entries");
        offset += count;
    }
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&serde_json::to_string(r).map_err(speech_quality::Error::from)?);
        lines.push('\n');
    }
    fs::write(out.join(ENTRIES_FILE), lines)?;
    Ok(records)
}

fn load_split(path: &Path, sample_rate: u32) -> CliResult<Vec<DatasetEntry>> {
    let data = load_manifest(path)?;
    if let Some(e) = data
        .iter()
        .find(|e| e.degraded.sample_rate() != sample_rate)
    {
        return Err(CliError::data(format!(
            "{}: audio at {} Hz, model expects {} Hz",
            path.display(),
            e.degraded.sample_rate(),
            sample_rate
        )));
    }
    Ok(data)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct BestState {
    step: u64,
    valid_mse: f64,
}

/// Outcome of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub best_valid_mse: Option<f64>,
}

/// Trains until `training.max_steps`, optionally resuming from `resume`.
///
/// Writes `train_log.jsonl` (appended on resume), `latest.ckpt` and
/// `best.ckpt` after each validation pass, and `final.ckpt` at the end.
pub fn train(cfg: &RunConfig, resume: Option<&Path>, out: &Path) -> CliResult<TrainSummary> {
    cfg.validate()?;
    let model = cfg.model();
    let quantizer = cfg.quantizer();
    let train_cfg = cfg.train();

    let mut trainer = match resume {
        Some(path) => {
            let t = Trainer::<f32>::from_checkpoint(&Checkpoint::load(path)?)?;
            if *t.model.config() != model || t.quantizer != quantizer {
                return Err(CliError::config(format!(
                    "{} was trained with a different model or quantizer",
                    path.display()
                )));
            }
            let mut same = t.config.clone();
            same.max_steps = train_cfg.max_steps;
            if same != train_cfg {
                return Err(CliError::config(format!(
                    "{} was trained with different training settings; only max_steps may change on resume",
                    path.display()
                )));
            }
            let mut t = t;
            t.config.max_steps = train_cfg.max_steps;
            t
        }
        None => Trainer::<f32>::new(model.clone(), quantizer, train_cfg.clone())?,
    };

    let train_data = load_split(&cfg.manifest("train"), model.stft.sample_rate)?;
    let valid_path = cfg.manifest("valid");
    let valid_data = if cfg.data.valid_manifest.is_some() || valid_path.exists() {
        load_split(&valid_path, model.stft.sample_rate)?
    } else {
        warn!(
            "no validation manifest at {}; best.ckpt tracks the final step",
            valid_path.display()
        );
        Vec::new()
    };
    // fail on unusable data before writing anything
    trainer.crop_len(&train_data)?;

    create_dir(out)?;
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join(TRAIN_LOG))?;
    let best_path = out.join(BEST_STATE);
    let mut best: Option<BestState> = if resume.is_some() && best_path.exists() {
        serde_json::from_str(&fs::read_to_string(&best_path)?)
            .map_err(speech_quality::Error::from)?
    } else {
        None
    };
    let workers = threads(cfg.training.threads);
    let every = cfg.training.eval_every;
    let mut final_loss = None;

    while trainer.step() < trainer.config.max_steps {
        let s = trainer.train_step(&train_data)?;
        final_loss = Some(s.total);
        let record = json!({
            "kind": "train",
            "step": s.step,
            "total": s.total,
            "td_mse": s.td_mse,
            "emd2": s.emd2,
            "rank": s.rank,
            "timestamp": timestamp(),
        });
        writeln!(log, "{record}")?;
        if s.step % every == 0 || s.step == trainer.config.max_steps {
            let valid_mse = if valid_data.is_empty() {
                None
            } else {
                let preds = trainer.predict(&valid_data, workers)?;
                let (p, t): (Vec<f64>, Vec<f64>) = preds
                    .iter()
                    .zip(&valid_data)
                    .map(|(p, e)| (p.expect, e.label.value()))
                    .unzip();
                Some(EvalReport::compute(&p, &t)?.mse)
            };
            writeln!(
                log,
                "{}",
                json!({"kind": "valid", "step": s.step, "valid_mse": valid_mse, "timestamp": timestamp()})
            )?;
            log.flush()?;
            info!(
                "step {} total {:.5} td {:.5} emd {:.5} valid mse {:?}",
                s.step, s.total, s.td_mse, s.emd2, valid_mse
            );
            trainer.save(out.join(LATEST_CHECKPOINT))?;
            let improved = match (valid_mse, best) {
                (Some(m), Some(b)) => m < b.valid_mse,
                (Some(_), None) => true,
                (None, _) => false,
            };
            if improved {
                let state = BestState {
                    step: s.step,
                    valid_mse: valid_mse.unwrap_or(f64::NAN),
                };
                trainer.save(out.join(BEST_CHECKPOINT))?;
                fs::write(
                    &best_path,
                    serde_json::to_string(&state).map_err(speech_quality::Error::from)?,
                )?;
                best = Some(state);
            }
        }
    }
    trainer.save(out.join(FINAL_CHECKPOINT))?;
    if valid_data.is_empty() {
        trainer.save(out.join(BEST_CHECKPOINT))?;
    }
    Ok(TrainSummary {
        steps: trainer.step(),
        final_loss,
        best_valid_mse: best.map(|b| b.valid_mse),
    })
}

/// Scores of one file.
#[derive(Clone, Debug, PartialEq)]
pub struct FilePrediction {
    pub path: PathBuf,
    pub expect: f64,
    pub max: f64,
    pub distribution: Vec<f64>,
}

/// Scores every file with a frozen checkpoint, in parallel across files.
/// Output order follows the input order.
pub fn predict(
    checkpoint: &Path,
    wavs: &[PathBuf],
    workers: usize,
) -> CliResult<Vec<FilePrediction>> {
    let trainer = Trainer::<f32>::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let one = |path: &PathBuf| -> CliResult<FilePrediction> {
        let w = load_wav(path)?;
        let out = trainer
            .model
            .infer(&trainer.params, &w)
            .map_err(|e| match e {
                speech_quality::Error::SampleRateMismatch { expected, actual } => {
                    CliError::data(format!(
                        "{}: audio at {actual} Hz, checkpoint expects {expected} Hz",
                        path.display()
                    ))
                }
                other => other.into(),
            })?;
        Ok(FilePrediction {
            path: path.clone(),
            expect: decode_expect(&out.distribution, &trainer.quantizer).value(),
            max: decode_max(&out.distribution, &trainer.quantizer).value(),
            distribution: out.distribution.probs().to_vec(),
        })
    };
    let workers = threads(workers).min(wavs.len()).max(1);
    if workers == 1 {
        return wavs.iter().map(one).collect();
    }
    let chunk = wavs.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = wavs
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(one).collect::<CliResult<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(wavs.len());
        for h in handles {
            out.extend(h.join().expect("prediction worker panicked")?);
        }
        Ok(out)
    })
}

/// Reports for both decoders over one labelled manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub expect: EvalReport,
    pub max: EvalReport,
    pub predictions: Vec<Prediction>,
}

pub fn eval(checkpoint: &Path, manifest: &Path, workers: usize) -> CliResult<EvalOutcome> {
    let trainer = Trainer::<f32>::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let data = load_split(manifest, trainer.model.config().stft.sample_rate)?;
    if data.is_empty() {
        return Err(CliError::data(format!(
            "{} has no entries",
            manifest.display()
        )));
    }
    let predictions = trainer.predict(&data, threads(workers))?;
    let truth: Vec<f64> = data.iter().map(|e| e.label.value()).collect();
    let expect: Vec<f64> = predictions.iter().map(|p| p.expect).collect();
    let max: Vec<f64> = predictions.iter().map(|p| p.max).collect();
    Ok(EvalOutcome {
        expect: EvalReport::compute(&expect, &truth)?,
        max: EvalReport::compute(&max, &truth)?,
        predictions,
    })
}
