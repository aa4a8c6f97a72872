//! Training loop: batch sampling, the joint objective, Adam updates,
//! evaluation and resumable checkpoints.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{item_rng, DatasetEntry};
use crate::diffcore::{
    Adam, AdamConfig, BatchStats, Checkpoint, Graph, NormMode, ParamSet, Real, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::labels::{
    decode_expect, decode_max, one_hot, quantize, soft_label, LabelDistribution, QuantizerConfig,
};
use crate::model::{ModelConfig, QualityNet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelKind {
    #[default]
    OneHot,
    Soft,
}

/// How the per-item reconstruction error is reduced over samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TdReduction {
    /// Squared norm of the zero-mean difference.
    #[default]
    Sum,
    /// The same divided by the number of samples.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub crop_secs: f64,
    pub max_steps: u64,
    pub seed: u64,
    /// Weight of the reconstruction term.
    pub lambda: f64,
    pub rank_loss: bool,
    pub rank_weight: f64,
    pub label_kind: LabelKind,
    pub td_reduction: TdReduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 8,
            crop_secs: 1.0,
            max_steps: 1000,
            seed: 0,
            lambda: 1.0,
            rank_loss: false,
            rank_weight: 1.0,
            label_kind: LabelKind::OneHot,
            td_reduction: TdReduction::Sum,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.rank_loss && self.batch_size < 2 {
            return Err(Error::Config("rank loss needs batch_size ≥ 2".into()));
        }
        if !(self.crop_secs > 0.0) {
            return Err(Error::Config("crop_secs must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(
                "lambda must be finite and non-negative".into(),
            ));
        }
        let a = &self.adam;
        if !(a.lr > 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.eps > 0.0)
        {
            return Err(Error::Config(
                "Adam needs lr > 0, β1 and β2 in [0, 1), eps > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Cross-field checks between model, quantizer and training settings.
pub fn validate_setup(
    model: &ModelConfig,
    quantizer: &QuantizerConfig,
    train: &TrainConfig,
) -> Result<()> {
    model.validate()?;
    quantizer.validate()?;
    train.validate()?;
    if quantizer.n_total() != model.n_classes_total {
        return Err(Error::Config(format!(
            "quantizer yields {} classes (N = {}, pad = {}) but the model has n_classes_total = {}",
            quantizer.n_total(),
            quantizer.n_classes,
            quantizer.pad,
            model.n_classes_total
        )));
    }
    match train.label_kind {
        LabelKind::Soft if quantizer.pad < 2 => Err(Error::Config(format!(
            "soft labels need pad ≥ 2, quantizer has pad = {}",
            quantizer.pad
        ))),
        LabelKind::OneHot if quantizer.pad != 0 => Err(Error::Config(format!(
            "one-hot labels use pad = 0, quantizer has pad = {}",
            quantizer.pad
        ))),
        _ => Ok(()),
    }
}

/// Target distribution for a score.
pub fn target_distribution(
    entry: &DatasetEntry,
    quantizer: &QuantizerConfig,
    kind: LabelKind,
) -> Result<LabelDistribution> {
    let class = quantize(entry.label, quantizer);
    match kind {
        LabelKind::OneHot => one_hot(class, quantizer),
        LabelKind::Soft => soft_label(class, quantizer),
    }
}

/// Losses of one step, averaged over the batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub total: f64,
    pub td_mse: f64,
    pub emd2: f64,
    pub rank: Option<f64>,
}

/// A sampled batch of equal-length crops.
pub struct Batch<T> {
    pub indices: Vec<usize>,
    pub inputs: Vec<Vec<T>>,
    /// Clean crops (zeros where the entry has none).
    pub clean: Vec<Vec<T>>,
    pub recon_weights: Vec<T>,
    pub targets: Vec<LabelDistribution>,
    pub labels: Vec<T>,
}

/// Graph handles of the objective.
pub struct Objective<T> {
    pub total: Var,
    pub td_mse: Var,
    pub emd2: Var,
    pub rank: Option<Var>,
    pub norm_stats: Vec<(String, BatchStats<T>)>,
}

/// Both decoded scores of one utterance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub expect: f64,
    pub max: f64,
}

pub struct Trainer<T: Real> {
    pub model: QualityNet<T>,
    pub quantizer: QuantizerConfig,
    pub config: TrainConfig,
    pub params: ParamSet<T>,
    pub adam: Adam<T>,
}

impl<T: Real> Trainer<T> {
    pub fn new(
        model: ModelConfig,
        quantizer: QuantizerConfig,
        config: TrainConfig,
    ) -> Result<Self> {
        validate_setup(&model, &quantizer, &config)?;
        let net = QualityNet::new(model)?;
        let params = net.init_params(config.seed)?;
        let adam = Adam::new(config.adam);
        Ok(Self {
            model: net,
            quantizer,
            config,
            params,
            adam,
        })
    }

    pub fn step(&self) -> u64 {
        self.adam.steps_taken()
    }

    /// Samples of each crop: the configured crop length, shortened to the
    /// shortest utterance and to whole STFT frames.
    pub fn crop_len(&self, data: &[DatasetEntry]) -> Result<usize> {
        let shortest = data
            .iter()
            .map(|e| e.degraded.len())
            .min()
            .ok_or_else(|| Error::TooFewItems { needed: 1, got: 0 })?;
        let stft = &self.model.config().stft;
        let want = (self.config.crop_secs * stft.sample_rate as f64).round() as usize;
        let len = want.min(shortest);
        if len < stft.window_len {
            return Err(Error::SignalTooShort {
                len,
                needed: stft.window_len,
            });
        }
        Ok(stft.output_len(stft.frames(len)))
    }

    /// The batch used at `step`. Depends only on the seed, the step and the
    /// dataset, so a resumed run sees the same batches.
    pub fn sample_batch(&self, data: &[DatasetEntry], step: u64) -> Result<Batch<T>> {
        let crop = self.crop_len(data)?;
        let sr = self.model.config().stft.sample_rate;
        let mut rng = item_rng(self.config.seed, step);
        let mut batch = Batch {
            indices: Vec::new(),
            inputs: Vec::new(),
            clean: Vec::new(),
            recon_weights: Vec::new(),
            targets: Vec::new(),
            labels: Vec::new(),
        };
        for _ in 0..self.config.batch_size {
            let i = rng.gen_range(0..data.len());
            let e = &data[i];
            if e.degraded.sample_rate() != sr {
                return Err(Error::SampleRateMismatch {
                    expected: sr,
                    actual: e.degraded.sample_rate(),
                });
            }
            let start = rng.gen_range(0..=e.degraded.len() - crop);
            let cast = |s: &[f64]| {
                s[start..start + crop]
                    .iter()
                    .map(|&v| T::of(v))
                    .collect::<Vec<T>>()
            };
            batch.inputs.push(cast(e.degraded.samples()));
            match &e.clean {
                Some(c) if c.len() >= start + crop => batch.clean.push(cast(c.samples())),
                Some(c) => {
                    return Err(Error::LengthMismatch {
                        left: e.degraded.len(),
                        right: c.len(),
                    })
                }
                None => batch.clean.push(vec![T::zero(); crop]),
            }
            batch
                .recon_weights
                .push(T::of(e.recon_weight(self.config.lambda)));
            batch.targets.push(target_distribution(
                e,
                &self.quantizer,
                self.config.label_kind,
            )?);
            batch.labels.push(T::of(e.label.value()));
            batch.indices.push(i);
        }
        Ok(batch)
    }

    /// Builds the batch-mean joint objective on `g`.
    pub fn objective(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        batch: &Batch<T>,
        mode: NormMode,
    ) -> Result<Objective<T>> {
        let n = batch.inputs.len();
        let views: Vec<&[T]> = batch.inputs.iter().map(Vec::as_slice).collect();
        let out = self.model.forward(g, params, &views, mode)?;

        let recon_len = g.shape(out.reconstruction)[1];
        let mut clean = Vec::with_capacity(n * recon_len);
        for c in &batch.clean {
            clean.extend_from_slice(&c[..recon_len]);
        }
        let clean = g.constant(Tensor::new(vec![n, recon_len], clean)?);
        let mut td = g.td_mse(out.reconstruction, clean)?;
        if self.config.td_reduction == TdReduction::Mean {
            td = g.scale(td, T::one() / T::of(recon_len as f64))?;
        }

        let k = self.model.config().n_classes_total;
        let targets: Vec<T> = batch
            .targets
            .iter()
            .flat_map(|d| d.probs().iter().map(|&p| T::of(p)))
            .collect();
        let targets = g.constant(Tensor::new(vec![n, k], targets)?);
        let emd = g.emd2(out.probs, targets)?;

        let weights = g.constant(Tensor::new(vec![n], batch.recon_weights.clone())?);
        let weighted_td = g.mul(td, weights)?;
        let per_item = g.add(weighted_td, emd)?;
        let mut total = g.mean(per_item)?;

        let td_mean = g.mean(td)?;
        let emd_mean = g.mean(emd)?;
        let rank = if self.config.rank_loss {
            let mids: Vec<T> = self.quantizer.midpoints().into_iter().map(T::of).collect();
            let expected = g.weighted_sum(out.probs, &mids)?;
            let r = g.rank_loss(expected, &batch.labels)?;
            let weighted = g.scale(r, T::of(self.config.rank_weight))?;
            total = g.add(total, weighted)?;
            Some(r)
        } else {
            None
        };
        Ok(Objective {
            total,
            td_mse: td_mean,
            emd2: emd_mean,
            rank,
            norm_stats: out.norm_stats,
        })
    }

    /// One optimizer step on the batch for the current step index.
    pub fn train_step(&mut self, data: &[DatasetEntry]) -> Result<StepLog> {
        let step = self.step();
        let batch = self.sample_batch(data, step)?;
        let mut g = Graph::new();
        let obj = self
            .objective(&mut g, &self.params, &batch, NormMode::Train)
            .map_err(|e| match e {
                Error::NonFinite { op } => Error::NonFiniteLoss {
                    step: step as usize,
                    detail: format!("non-finite value produced by {op}"),
                },
                other => other,
            })?;
        let read = |v: Var| g.value(v).item().as_f64();
        let log = StepLog {
            step: step + 1,
            total: read(obj.total),
            td_mse: read(obj.td_mse),
            emd2: read(obj.emd2),
            rank: obj.rank.map(read),
        };
        if !log.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: step as usize,
                detail: format!("{log:?}"),
            });
        }
        let grads = g.backward(obj.total)?;
        self.params.zero_grads();
        grads.write_to(&mut self.params)?;
        if let Some((name, _)) = self.params.iter().find(|(_, t)| {
            t.grad
                .as_ref()
                .is_some_and(|g| g.iter().any(|v| !v.is_finite()))
        }) {
            return Err(Error::NonFiniteLoss {
                step: step as usize,
                detail: format!("non-finite gradient for `{name}`"),
            });
        }
        self.model
            .update_running_stats(&mut self.params, &obj.norm_stats)?;
        self.adam.step(&mut self.params)?;
        Ok(log)
    }

    /// Eval-mode predictions on full utterances, computed on `threads`
    /// worker threads. Results do not depend on the thread count.
    pub fn predict(&self, data: &[DatasetEntry], threads: usize) -> Result<Vec<Prediction>> {
        predict_all(&self.model, &self.params, &self.quantizer, data, threads)
    }

    /// Checkpoint with parameters, running statistics, optimizer state and
    /// every setting needed to continue.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let header = serde_json::json!({
            "model": self.model.config(),
            "quantizer": self.quantizer,
            "train": self.config,
            "step": self.step(),
        });
        let mut ck = Checkpoint::new(header);
        ck.put_params(&self.params);
        ck.put_optimizer(&self.adam);
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    /// Restores a trainer from [`checkpoint`](Self::checkpoint) output.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let field = |name: &str| {
            ck.header
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("header lacks `{name}`")))
        };
        let model: ModelConfig = serde_json::from_value(field("model")?)?;
        let quantizer: QuantizerConfig = serde_json::from_value(field("quantizer")?)?;
        let config: TrainConfig = serde_json::from_value(field("train")?)?;
        let step: u64 = serde_json::from_value(field("step")?)?;
        let mut trainer = Self::new(model, quantizer, config)?;
        let params = ck.params::<T>()?;
        trainer.model.check_params(&params)?;
        trainer.params = params;
        trainer.adam = ck.optimizer(trainer.config.adam, step);
        Ok(trainer)
    }
}

/// Eval-mode predictions for `data` with both decoders.
pub fn predict_all<T: Real>(
    model: &QualityNet<T>,
    params: &ParamSet<T>,
    quantizer: &QuantizerConfig,
    data: &[DatasetEntry],
    threads: usize,
) -> Result<Vec<Prediction>> {
    let one = |e: &DatasetEntry| -> Result<Prediction> {
        let out = model.infer(params, &e.degraded)?;
        Ok(Prediction {
            expect: decode_expect(&out.distribution, quantizer).value(),
            max: decode_max(&out.distribution, quantizer).value(),
        })
    };
    let threads = threads.max(1);
    if threads == 1 || data.len() < 2 {
        return data.iter().map(one).collect();
    }
    let chunk = data.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = data
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(one).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(data.len());
        for h in handles {
            out.extend(h.join().expect("prediction worker panicked")?);
        }
        Ok(out)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{simulate_entry, SimConfig};
    use crate::diffcore::gradient_check;
    use crate::labels::QualityScore;
    use crate::model::NormKind;
    use crate::signal::Waveform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            bottleneck_channels: 8,
            dconv_channels: 16,
            kernel_size: 3,
            blocks_per_repeat: 2,
            repeats: 1,
            n_classes_total: 10,
            ..ModelConfig::default()
        }
    }

    fn corpus(n: usize, secs: f64, seed: u64) -> Vec<DatasetEntry> {
        let cfg = SimConfig {
            count: n,
            duration_secs: secs,
            ..SimConfig::default()
        };
        (0..n)
            .map(|i| simulate_entry(&cfg, seed, i).unwrap())
            .collect()
    }

    fn tiny_trainer<T: Real>(config: TrainConfig) -> Trainer<T> {
        Trainer::new(tiny_model(), QuantizerConfig::new(10, 0).unwrap(), config).unwrap()
    }

    #[test]
    fn setup_validation() {
        let m = tiny_model();
        let t = TrainConfig::default();
        validate_setup(&m, &QuantizerConfig::new(10, 0).unwrap(), &t).unwrap();
        assert!(validate_setup(&m, &QuantizerConfig::new(12, 0).unwrap(), &t).is_err());
        let soft = TrainConfig {
            label_kind: LabelKind::Soft,
            ..TrainConfig::default()
        };
        assert!(validate_setup(&m, &QuantizerConfig::new(10, 0).unwrap(), &soft).is_err());
        validate_setup(&m, &QuantizerConfig::new(6, 2).unwrap(), &soft).unwrap();
        assert!(validate_setup(&m, &QuantizerConfig::new(6, 2).unwrap(), &t).is_err());
    }

    #[test]
    fn batches_depend_only_on_seed_and_step() {
        let data = corpus(5, 0.4, 1);
        let tr = tiny_trainer::<f64>(TrainConfig {
            batch_size: 3,
            crop_secs: 0.25,
            ..TrainConfig::default()
        });
        let a = tr.sample_batch(&data, 4).unwrap();
        let b = tr.sample_batch(&data, 4).unwrap();
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(a.indices, b.indices);
        let len = a.inputs[0].len();
        assert!(a.inputs.iter().all(|x| x.len() == len));
        assert_eq!(len, StftConfigExt::crop(4000));
    }

    struct StftConfigExt;
    impl StftConfigExt {
        fn crop(samples: usize) -> usize {
            let s = crate::signal::StftConfig::default();
            s.output_len(s.frames(samples))
        }
    }

    #[test]
    fn missing_clean_disables_reconstruction_term() {
        let mut data = corpus(2, 0.3, 2);
        for e in &mut data {
            e.clean = None;
        }
        let tr = tiny_trainer::<f64>(TrainConfig {
            batch_size: 2,
            crop_secs: 0.3,
            ..TrainConfig::default()
        });
        let batch = tr.sample_batch(&data, 0).unwrap();
        let mut g = Graph::new();
        let obj = tr
            .objective(&mut g, &tr.params, &batch, NormMode::Train)
            .unwrap();
        assert!(g.value(obj.td_mse).item() > 0.0);
        assert_eq!(g.value(obj.total).item(), g.value(obj.emd2).item());
    }

    #[test]
    fn joint_objective_passes_gradient_check() {
        // Test point with a small loss: decaying white noise, a clean target
        // close to the input, and a quality head already leaning towards the
        // shared target class. At unit loss scale a single ulp of the loss is
        // 1e-11 in the central difference, which swamps near-zero coordinates.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let data: Vec<DatasetEntry> = corpus(2, 0.2, 3)
            .into_iter()
            .enumerate()
            .map(|(i, mut e)| {
                let a = if i == 0 { 0.1 } else { 0.005 };
                let x: Vec<f64> = (0..3200)
                    .map(|t| rng.gen_range(-a..a) * (-(t as f64) / 3200.0 * 4.6).exp())
                    .collect();
                let c: Vec<f64> = x
                    .iter()
                    .map(|v| 0.8 * v + rng.gen_range(-a..a) * 0.05)
                    .collect();
                e.degraded = Waveform::new(x, 16_000).unwrap();
                e.clean = Some(Waveform::new(c, 16_000).unwrap());
                e.label = QualityScore::new(if i == 0 { 2.2 } else { 2.4 }).unwrap();
                e
            })
            .collect();
        let mut tr = tiny_trainer::<f64>(TrainConfig {
            batch_size: 2,
            crop_secs: 0.2,
            ..TrainConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (name, t) in tr.params.iter_mut() {
            let free = name.starts_with("mask")
                || name.starts_with("quality")
                || ["bias", "beta", "slope", "gamma"]
                    .iter()
                    .any(|s| name.ends_with(s));
            if free {
                for v in t.values_mut() {
                    *v += rng.gen_range(-0.1..0.1);
                }
            }
        }
        tr.params.get_mut("quality.bias").unwrap().values_mut()[5] += 7.0;
        let batch = tr.sample_batch(&data, 0).unwrap();
        let names: Vec<String> = tr.params.iter().map(|(n, _)| n.clone()).collect();
        let inputs: Vec<Tensor<f64>> = tr.params.iter().map(|(_, t)| t.clone()).collect();
        let report = gradient_check(
            |g, vars| {
                for (name, &v) in names.iter().zip(vars) {
                    g.bind_param(name, v)?;
                }
                Ok(tr.objective(g, &tr.params, &batch, NormMode::Train)?.total)
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.coordinates > 7000);
        assert!(report.passed, "{report:?} at {}", names[report.worst.0]);
    }

    #[test]
    fn loss_decreases_and_resume_is_bitwise() {
        let data = corpus(4, 0.3, 4);
        let cfg = TrainConfig {
            batch_size: 4,
            crop_secs: 0.3,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let mut a = tiny_trainer::<f32>(cfg.clone());
        let first = a.train_step(&data).unwrap();
        for _ in 0..4 {
            a.train_step(&data).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        a.save(&path).unwrap();
        let mut b = Trainer::<f32>::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(b.step(), 5);
        for _ in 0..3 {
            let la = a.train_step(&data).unwrap();
            let lb = b.train_step(&data).unwrap();
            assert_eq!(la, lb);
        }
        for ((n, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(x.values(), y.values(), "{n}");
        }
        let last = a.train_step(&data).unwrap();
        assert!(
            last.total < first.total,
            "{} !< {}",
            last.total,
            first.total
        );
    }

    #[test]
    fn global_layer_norm_trains_with_single_item_batches() {
        let data = corpus(2, 0.3, 6);
        let mut tr = Trainer::<f64>::new(
            ModelConfig {
                norm: NormKind::GlobalLayerNorm,
                ..tiny_model()
            },
            QuantizerConfig::new(10, 0).unwrap(),
            TrainConfig {
                batch_size: 1,
                crop_secs: 0.3,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        tr.train_step(&data).unwrap();
        assert_eq!(tr.params.buffers().count(), 0);
    }

    #[test]
    fn predictions_are_thread_count_independent() {
        let data = corpus(5, 0.3, 7);
        let tr = tiny_trainer::<f64>(TrainConfig::default());
        let one = tr.predict(&data, 1).unwrap();
        assert_eq!(one, tr.predict(&data, 3).unwrap());
        assert!(one.iter().all(|p| (p.expect - 2.0).abs() < 1e-9));
    }
}
