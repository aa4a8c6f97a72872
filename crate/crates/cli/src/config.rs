//! Run configuration: a TOML file with `model`, `quantizer`, `training`,
//! `data` and `output` sections. Every field has a default, so an empty file
//! is a valid (full-size) configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use speech_quality::data::{PerturbConfig, SimConfig};
use speech_quality::diffcore::AdamConfig;
use speech_quality::labels::QuantizerConfig;
use speech_quality::model::{ModelConfig, NormKind};
use speech_quality::signal::StftConfig;
use speech_quality::train::{validate_setup, LabelKind, TdReduction, TrainConfig};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub quantizer: QuantizerSection,
    pub training: TrainingSection,
    pub data: DataSection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub bottleneck_channels: usize,
    pub dconv_channels: usize,
    pub kernel_size: usize,
    pub blocks_per_repeat: usize,
    pub repeats: usize,
    /// Output classes including padding; taken from the quantizer when unset.
    pub n_classes_total: Option<usize>,
    pub sample_rate: u32,
    pub norm: NormKind,
    pub norm_momentum: f64,
    pub norm_eps: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            bottleneck_channels: m.bottleneck_channels,
            dconv_channels: m.dconv_channels,
            kernel_size: m.kernel_size,
            blocks_per_repeat: m.blocks_per_repeat,
            repeats: m.repeats,
            n_classes_total: None,
            sample_rate: m.stft.sample_rate,
            norm: m.norm,
            norm_momentum: m.norm_momentum,
            norm_eps: m.norm_eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerSection {
    pub n_classes: usize,
    pub pad: usize,
}

impl Default for QuantizerSection {
    fn default() -> Self {
        Self {
            n_classes: 100,
            pad: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub crop_secs: f64,
    pub max_steps: u64,
    pub seed: u64,
    pub lambda: f64,
    pub rank_loss: bool,
    pub rank_weight: f64,
    pub label_kind: LabelKind,
    pub td_reduction: TdReduction,
    /// Steps between validation passes.
    pub eval_every: u64,
    /// Prediction threads; 0 uses every available core.
    pub threads: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
            batch_size: t.batch_size,
            crop_secs: t.crop_secs,
            max_steps: t.max_steps,
            seed: t.seed,
            lambda: t.lambda,
            rank_loss: t.rank_loss,
            rank_weight: t.rank_weight,
            label_kind: t.label_kind,
            td_reduction: t.td_reduction,
            eval_every: 100,
            threads: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directory written by `simulate`; holds `train.tsv`,
    /// `valid.tsv` and `test.tsv` unless the manifests are given explicitly.
    pub dir: PathBuf,
    pub train_manifest: Option<PathBuf>,
    pub valid_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub simulate: SimulateSection,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            train_manifest: None,
            valid_manifest: None,
            test_manifest: None,
            simulate: SimulateSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    /// Total entries over all splits.
    pub count: usize,
    pub valid_count: usize,
    pub test_count: usize,
    pub seed: u64,
    pub duration_secs: f64,
    pub sample_rate: u32,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    pub perturb_prob: f64,
    pub boost_frac: f64,
    pub atten_frac: f64,
    pub boost_gain: f64,
    pub atten_gain: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        let s = SimConfig::default();
        Self {
            count: s.count,
            valid_count: 8,
            test_count: 8,
            seed: 0,
            duration_secs: s.duration_secs,
            sample_rate: s.sample_rate,
            snr_min_db: s.snr_min_db,
            snr_max_db: s.snr_max_db,
            perturb_prob: s.perturb_prob,
            boost_frac: s.perturb.boost_frac,
            atten_frac: s.perturb.atten_frac,
            boost_gain: s.perturb.boost_gain,
            atten_gain: s.perturb.atten_gain,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Checkpoints and the training log go here.
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("run"),
        }
    }
}

/// Dataset split names, in the order their indices are allocated.
pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

impl RunConfig {
    /// Parses a config file. Relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> CliResult<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::config(e.to_string()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.dir);
        fix(&mut self.output.dir);
        for p in [
            &mut self.data.train_manifest,
            &mut self.data.valid_manifest,
            &mut self.data.test_manifest,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// Overrides every seed in the config.
    pub fn set_seed(&mut self, seed: u64) {
        self.training.seed = seed;
        self.data.simulate.seed = seed;
    }

    pub fn quantizer(&self) -> QuantizerConfig {
        QuantizerConfig {
            n_classes: self.quantizer.n_classes,
            pad: self.quantizer.pad,
        }
    }

    pub fn model(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            bottleneck_channels: m.bottleneck_channels,
            dconv_channels: m.dconv_channels,
            kernel_size: m.kernel_size,
            blocks_per_repeat: m.blocks_per_repeat,
            repeats: m.repeats,
            n_classes_total: m
                .n_classes_total
                .unwrap_or_else(|| self.quantizer().n_total()),
            stft: StftConfig::for_sample_rate(m.sample_rate),
            norm: m.norm,
            norm_momentum: m.norm_momentum,
            norm_eps: m.norm_eps,
        }
    }

    pub fn train(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            adam: AdamConfig {
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
            },
            batch_size: t.batch_size,
            crop_secs: t.crop_secs,
            max_steps: t.max_steps,
            seed: t.seed,
            lambda: t.lambda,
            rank_loss: t.rank_loss,
            rank_weight: t.rank_weight,
            label_kind: t.label_kind,
            td_reduction: t.td_reduction,
        }
    }

    /// Simulation parameters for one split.
    pub fn sim(&self, count: usize) -> SimConfig {
        let s = &self.data.simulate;
        SimConfig {
            count,
            duration_secs: s.duration_secs,
            sample_rate: s.sample_rate,
            snr_min_db: s.snr_min_db,
            snr_max_db: s.snr_max_db,
            perturb_prob: s.perturb_prob,
            perturb: PerturbConfig {
                boost_frac: s.boost_frac,
                atten_frac: s.atten_frac,
                boost_gain: s.boost_gain,
                atten_gain: s.atten_gain,
            },
        }
    }

    /// Entry counts of the train, valid and test splits.
    pub fn split_counts(&self) -> [usize; 3] {
        let s = &self.data.simulate;
        [
            s.count.saturating_sub(s.valid_count + s.test_count),
            s.valid_count,
            s.test_count,
        ]
    }

    pub fn manifest(&self, split: &str) -> PathBuf {
        let explicit = match split {
            "train" => &self.data.train_manifest,
            "valid" => &self.data.valid_manifest,
            _ => &self.data.test_manifest,
        };
        explicit
            .clone()
            .unwrap_or_else(|| self.data.dir.join(format!("{split}.tsv")))
    }

    /// Cross-field checks for training and evaluation.
    pub fn validate(&self) -> CliResult<()> {
        let q = self.quantizer();
        q.validate()?;
        if let Some(n) = self.model.n_classes_total {
            if n != q.n_total() {
                return Err(CliError::config(format!(
                    "model.n_classes_total = {n} but the quantizer has {} classes including padding",
                    q.n_total()
                )));
            }
        }
        let model = self.model();
        model.validate()?;
        let train = self.train();
        validate_setup(&model, &q, &train)?;
        if self.training.eval_every == 0 {
            return Err(CliError::config("training.eval_every must be positive"));
        }
        Ok(())
    }

    /// Checks for the simulate command.
    pub fn validate_simulation(&self) -> CliResult<()> {
        let s = &self.data.simulate;
        if s.valid_count + s.test_count >= s.count {
            return Err(CliError::config(format!(
                "data.simulate.count = {} leaves no training entries after {} valid and {} test",
                s.count, s.valid_count, s.test_count
            )));
        }
        if s.sample_rate != self.model.sample_rate {
            return Err(CliError::config(format!(
                "data.simulate.sample_rate = {} differs from model.sample_rate = {}",
                s.sample_rate, self.model.sample_rate
            )));
        }
        self.sim(s.count).validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
        cfg.validate_simulation().unwrap();
        assert_eq!(cfg.model().n_classes_total, 100);
        assert_eq!(cfg.split_counts(), [48, 8, 8]);
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = RunConfig::parse(
            r#"
            [model]
            bottleneck_channels = 8
            dconv_channels = 16
            [quantizer]
            n_classes = 6
            pad = 2
            [training]
            lr = 0.01
            label_kind = "soft"
            "#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.model().n_classes_total, 10);
        assert_eq!(cfg.train().adam.lr, 0.01);
        assert_eq!(cfg.train().label_kind, LabelKind::Soft);
    }

    #[test]
    fn inconsistent_configs_are_rejected() {
        let soft_without_pad = RunConfig::parse("[training]\nlabel_kind = \"soft\"\n").unwrap();
        assert!(matches!(
            soft_without_pad.validate(),
            Err(CliError::Config(_))
        ));

        let class_mismatch = RunConfig::parse("[model]\nn_classes_total = 12\n").unwrap();
        assert!(class_mismatch.validate().is_err());

        let no_train =
            RunConfig::parse("[data.simulate]\ncount = 10\nvalid_count = 5\ntest_count = 5\n")
                .unwrap();
        assert!(no_train.validate_simulation().is_err());

        let rate = RunConfig::parse("[data.simulate]\nsample_rate = 8000\n").unwrap();
        assert!(rate.validate_simulation().is_err());

        assert!(matches!(
            RunConfig::parse("[model]\nchannels = 3\n"),
            Err(CliError::Config(_))
        ));
        assert!(RunConfig::parse("[training]\nlr = \"fast\"\n").is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "[data]\ndir = \"d\"\ntrain_manifest = \"/abs/t.tsv\"\n",
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.data.dir, dir.path().join("d"));
        assert_eq!(cfg.manifest("train"), PathBuf::from("/abs/t.tsv"));
        assert_eq!(
            cfg.manifest("valid"),
            dir.path().join("d").join("valid.tsv")
        );
    }
}
