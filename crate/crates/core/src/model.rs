//! The quality network: STFT encoder, log-power features, a stack of dilated
//! depthwise-separable residual blocks, and two heads. The reconstruction
//! head predicts a complex mask applied to the input spectrogram and
//! resynthesized with the inverse STFT; the quality head predicts per-frame
//! class logits that are averaged over time and passed through a softmax.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{BatchStats, Graph, NormMode, ParamSet, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::labels::{decode_expect, decode_max, LabelDistribution, QualityScore, QuantizerConfig};
use crate::signal::{Stft, StftConfig, Waveform, LPS_FLOOR};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    #[default]
    BatchNorm,
    GlobalLayerNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub bottleneck_channels: usize,
    pub dconv_channels: usize,
    pub kernel_size: usize,
    pub blocks_per_repeat: usize,
    pub repeats: usize,
    pub n_classes_total: usize,
    pub stft: StftConfig,
    #[serde(default)]
    pub norm: NormKind,
    #[serde(default = "default_momentum")]
    pub norm_momentum: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_momentum() -> f64 {
    0.99
}

fn default_norm_eps() -> f64 {
    1e-5
}

impl Default for ModelConfig {
    /// Full-size network: 256/512 channels, 4 repeats of 8 blocks, 100 classes.
    fn default() -> Self {
        Self {
            bottleneck_channels: 256,
            dconv_channels: 512,
            kernel_size: 3,
            blocks_per_repeat: 8,
            repeats: 4,
            n_classes_total: 100,
            stft: StftConfig::default(),
            norm: NormKind::BatchNorm,
            norm_momentum: default_momentum(),
            norm_eps: default_norm_eps(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        let positive = [
            ("bottleneck_channels", self.bottleneck_channels),
            ("dconv_channels", self.dconv_channels),
            ("blocks_per_repeat", self.blocks_per_repeat),
            ("repeats", self.repeats),
            ("n_classes_total", self.n_classes_total),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config("kernel_size must be odd".into()));
        }
        if !(0.0..1.0).contains(&self.norm_momentum) {
            return Err(Error::Config("norm_momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks_per_repeat * self.repeats
    }

    /// Dilation of block `index` (counted over the whole stack).
    pub fn dilation(&self, index: usize) -> usize {
        1 << (index % self.blocks_per_repeat)
    }

    /// Frames seen by one output frame of the block stack.
    pub fn receptive_field(&self) -> usize {
        1 + (0..self.n_blocks())
            .map(|b| (self.kernel_size - 1) * self.dilation(b))
            .sum::<usize>()
    }
}

/// Graph handles produced by one forward pass.
pub struct Forward<T> {
    /// `[n, samples]`
    pub reconstruction: Var,
    /// `[n, classes, frames]`
    pub logits: Var,
    /// `[n, classes]`
    pub pooled: Var,
    /// `[n, classes]`
    pub probs: Var,
    /// Batch statistics of every batch-norm layer (train mode only).
    pub norm_stats: Vec<(String, BatchStats<T>)>,
}

/// Per-utterance output in plain containers.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub reconstruction: Waveform,
    /// classes × frames, class-major
    pub logits: Vec<f64>,
    pub frames: usize,
    pub pooled: Vec<f64>,
    pub distribution: LabelDistribution,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoder {
    /// Midpoint of the most probable class.
    Max,
    /// Expected class midpoint.
    Expect,
}

#[derive(Clone, Debug)]
pub struct QualityNet<T: Real> {
    config: ModelConfig,
    stft: Stft<T>,
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<T> {
    (0..n)
        .map(|_| T::of(rng.gen_range(-bound..bound)))
        .collect()
}

impl<T: Real> QualityNet<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let stft = Stft::new(config.stft.clone())?;
        Ok(Self { config, stft })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stft(&self) -> &Stft<T> {
        &self.stft
    }

    /// Fresh parameters.
    ///
    /// Convolutions use fan-in scaled uniform weights and zero biases. The
    /// quality head starts at zero (uniform output distribution) and the mask
    /// head starts as the identity mask (real part 1, imaginary part 0).
    pub fn init_params(&self, seed: u64) -> Result<ParamSet<T>> {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let (f, b, h, k) = (
            c.stft.bins(),
            c.bottleneck_channels,
            c.dconv_channels,
            c.kernel_size,
        );
        let fan = |n: usize| 1.0 / (n as f64).sqrt();

        p.insert(
            "entry.weight",
            Tensor::new(vec![b, f], uniform(&mut rng, b * f, fan(f)))?,
        )?;
        p.insert("entry.bias", Tensor::zeros(vec![b]))?;
        for i in 0..c.n_blocks() {
            let pre = format!("blocks.{i}");
            p.insert(
                format!("{pre}.pw1.weight"),
                Tensor::new(vec![h, b], uniform(&mut rng, h * b, fan(b)))?,
            )?;
            p.insert(format!("{pre}.pw1.bias"), Tensor::zeros(vec![h]))?;
            p.insert(
                format!("{pre}.prelu1.slope"),
                Tensor::full(vec![h], T::of(0.25)),
            )?;
            self.insert_norm(&mut p, &format!("{pre}.norm1"), h)?;
            p.insert(
                format!("{pre}.dw.weight"),
                Tensor::new(vec![h, k], uniform(&mut rng, h * k, fan(k)))?,
            )?;
            p.insert(format!("{pre}.dw.bias"), Tensor::zeros(vec![h]))?;
            p.insert(
                format!("{pre}.prelu2.slope"),
                Tensor::full(vec![h], T::of(0.25)),
            )?;
            self.insert_norm(&mut p, &format!("{pre}.norm2"), h)?;
            p.insert(
                format!("{pre}.pw2.weight"),
                Tensor::new(vec![b, h], uniform(&mut rng, b * h, fan(h)))?,
            )?;
            p.insert(format!("{pre}.pw2.bias"), Tensor::zeros(vec![b]))?;
        }
        p.insert("mask_re.weight", Tensor::zeros(vec![f, b]))?;
        p.insert("mask_re.bias", Tensor::full(vec![f], T::one()))?;
        p.insert("mask_im.weight", Tensor::zeros(vec![f, b]))?;
        p.insert("mask_im.bias", Tensor::zeros(vec![f]))?;
        p.insert("quality.weight", Tensor::zeros(vec![c.n_classes_total, b]))?;
        p.insert("quality.bias", Tensor::zeros(vec![c.n_classes_total]))?;
        Ok(p)
    }

    fn insert_norm(&self, p: &mut ParamSet<T>, prefix: &str, channels: usize) -> Result<()> {
        p.insert(
            format!("{prefix}.gamma"),
            Tensor::full(vec![channels], T::one()),
        )?;
        p.insert(format!("{prefix}.beta"), Tensor::zeros(vec![channels]))?;
        if self.config.norm == NormKind::BatchNorm {
            p.insert_buffer(
                format!("{prefix}.running_mean"),
                Tensor::zeros(vec![channels]),
            )?;
            p.insert_buffer(
                format!("{prefix}.running_var"),
                Tensor::full(vec![channels], T::one()),
            )?;
        }
        Ok(())
    }

    /// Checks that `params` has exactly the tensors this configuration needs.
    pub fn check_params(&self, params: &ParamSet<T>) -> Result<()> {
        let reference = self.init_params(0)?;
        for (name, t) in reference.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Config(format!("missing parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter `{name}` has shape {:?}, configuration needs {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        for (name, t) in reference.buffers() {
            let got = params
                .buffer(name)
                .map_err(|_| Error::Config(format!("missing buffer `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "buffer `{name}` has the wrong shape"
                )));
            }
        }
        if params.len() != reference.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, found {}",
                reference.len(),
                params.len()
            )));
        }
        Ok(())
    }

    /// Spectrogram planes `[n, 2, bins, frames]` of an equal-length batch.
    pub fn encode(&self, batch: &[&[T]]) -> Result<Tensor<T>> {
        let first = batch
            .first()
            .ok_or_else(|| Error::Config("empty batch".into()))?;
        let len = first.len();
        let mut planes = Vec::new();
        let mut frames = 0;
        for x in batch {
            if x.len() != len {
                return Err(Error::LengthMismatch {
                    left: len,
                    right: x.len(),
                });
            }
            let s = self.stft.analyze(x)?;
            frames = s.frames();
            planes.extend(s.to_planes());
        }
        Tensor::new(
            vec![batch.len(), 2, self.config.stft.bins(), frames],
            planes,
        )
    }

    fn conv(&self, g: &mut Graph<T>, p: &ParamSet<T>, x: Var, name: &str) -> Result<Var> {
        let w = g.param(p, &format!("{name}.weight"))?;
        let b = g.param(p, &format!("{name}.bias"))?;
        g.conv1d_pointwise(x, w, b)
    }

    fn norm(
        &self,
        g: &mut Graph<T>,
        p: &ParamSet<T>,
        x: Var,
        name: &str,
        mode: NormMode,
        stats: &mut Vec<(String, BatchStats<T>)>,
    ) -> Result<Var> {
        let gamma = g.param(p, &format!("{name}.gamma"))?;
        let beta = g.param(p, &format!("{name}.beta"))?;
        let eps = T::of(self.config.norm_eps);
        match self.config.norm {
            NormKind::GlobalLayerNorm => g.global_layer_norm(x, gamma, beta, eps),
            NormKind::BatchNorm => {
                let running = match mode {
                    NormMode::Train => None,
                    NormMode::Eval => Some((
                        p.buffer(&format!("{name}.running_mean"))?.values(),
                        p.buffer(&format!("{name}.running_var"))?.values(),
                    )),
                };
                let (out, batch_stats) = g.batch_norm(x, gamma, beta, mode, running, eps)?;
                if let Some(s) = batch_stats {
                    stats.push((name.to_string(), s));
                }
                Ok(out)
            }
        }
    }

    /// One residual block: 1×1 conv → PReLU → norm → dilated depthwise conv →
    /// PReLU → norm → 1×1 conv, added back onto the input.
    pub fn conv_block(
        &self,
        g: &mut Graph<T>,
        p: &ParamSet<T>,
        x: Var,
        index: usize,
        mode: NormMode,
        stats: &mut Vec<(String, BatchStats<T>)>,
    ) -> Result<Var> {
        let channels = g.shape(x).get(1).copied().unwrap_or(0);
        if channels != self.config.bottleneck_channels {
            return Err(Error::shape(
                "conv_block",
                format!(
                    "block input has {channels} channels, expected {}",
                    self.config.bottleneck_channels
                ),
            ));
        }
        let pre = format!("blocks.{index}");
        let h = self.conv(g, p, x, &format!("{pre}.pw1"))?;
        let a = g.param(p, &format!("{pre}.prelu1.slope"))?;
        let h = g.prelu(h, a)?;
        let h = self.norm(g, p, h, &format!("{pre}.norm1"), mode, stats)?;
        let w = g.param(p, &format!("{pre}.dw.weight"))?;
        let b = g.param(p, &format!("{pre}.dw.bias"))?;
        let h = g.conv1d_depthwise_dilated(h, w, b, self.config.dilation(index))?;
        let a = g.param(p, &format!("{pre}.prelu2.slope"))?;
        let h = g.prelu(h, a)?;
        let h = self.norm(g, p, h, &format!("{pre}.norm2"), mode, stats)?;
        let h = self.conv(g, p, h, &format!("{pre}.pw2"))?;
        g.add(x, h)
    }

    /// Runs the network on an equal-length batch of waveforms.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &ParamSet<T>,
        batch: &[&[T]],
        mode: NormMode,
    ) -> Result<Forward<T>> {
        let spec = self.encode(batch)?;
        let spec = g.constant(spec);
        self.forward_spectrogram(g, p, spec, mode)
    }

    /// Same as [`forward`](Self::forward) from precomputed spectrogram planes.
    pub fn forward_spectrogram(
        &self,
        g: &mut Graph<T>,
        p: &ParamSet<T>,
        spec: Var,
        mode: NormMode,
    ) -> Result<Forward<T>> {
        let shape = g.shape(spec).to_vec();
        let [n, 2, f, t] = shape[..] else {
            return Err(Error::shape(
                "forward",
                format!("expected [n, 2, f, t], got {shape:?}"),
            ));
        };
        let power = g.abs_squared(spec)?;
        let features = g.log(power, T::of(LPS_FLOOR))?;
        debug_assert_eq!(g.shape(features), &[n, f, t]);

        let mut stats = Vec::new();
        let mut h = self.conv(g, p, features, "entry")?;
        for i in 0..self.config.n_blocks() {
            h = self.conv_block(g, p, h, i, mode, &mut stats)?;
        }

        let mask_re = self.conv(g, p, h, "mask_re")?;
        let mask_im = self.conv(g, p, h, "mask_im")?;
        let masked = g.complex_mask_apply(mask_re, mask_im, spec)?;
        let reconstruction = g.istft(masked, &self.stft)?;

        let logits = self.conv(g, p, h, "quality")?;
        let pooled = g.mean_over_frames(logits)?;
        let probs = g.softmax(pooled)?;
        Ok(Forward {
            reconstruction,
            logits,
            pooled,
            probs,
            norm_stats: stats,
        })
    }

    /// Exponential update of running statistics from a train-mode pass.
    pub fn update_running_stats(
        &self,
        p: &mut ParamSet<T>,
        stats: &[(String, BatchStats<T>)],
    ) -> Result<()> {
        let m = T::of(self.config.norm_momentum);
        let one = T::one();
        for (name, s) in stats {
            let rm = p.buffer_mut(&format!("{name}.running_mean"))?;
            for (r, &v) in rm.values_mut().iter_mut().zip(&s.mean) {
                *r = m * *r + (one - m) * v;
            }
            let rv = p.buffer_mut(&format!("{name}.running_var"))?;
            for (r, &v) in rv.values_mut().iter_mut().zip(&s.var) {
                *r = m * *r + (one - m) * v;
            }
        }
        Ok(())
    }

    /// Eval-mode inference on one utterance.
    pub fn infer(&self, p: &ParamSet<T>, w: &Waveform) -> Result<ModelOutput> {
        if w.sample_rate() != self.config.stft.sample_rate {
            return Err(Error::SampleRateMismatch {
                expected: self.config.stft.sample_rate,
                actual: w.sample_rate(),
            });
        }
        let samples: Vec<T> = w.samples().iter().map(|&s| T::of(s)).collect();
        let mut g = Graph::new();
        let out = self.forward(&mut g, p, &[&samples], NormMode::Eval)?;
        let to_f64 =
            |v: Var| -> Vec<f64> { g.value(v).values().iter().map(|x| x.as_f64()).collect() };
        let logits_shape = g.shape(out.logits).to_vec();
        let distribution = LabelDistribution::from_weights(to_f64(out.probs))?;
        Ok(ModelOutput {
            reconstruction: Waveform::new(to_f64(out.reconstruction), w.sample_rate())?,
            logits: to_f64(out.logits),
            frames: logits_shape[2],
            pooled: to_f64(out.pooled),
            distribution,
        })
    }

    pub fn predict_quality(
        &self,
        p: &ParamSet<T>,
        w: &Waveform,
        quantizer: &QuantizerConfig,
        decoder: Decoder,
    ) -> Result<QualityScore> {
        if quantizer.n_total() != self.config.n_classes_total {
            return Err(Error::Config(format!(
                "quantizer has {} classes, model has {}",
                quantizer.n_total(),
                self.config.n_classes_total
            )));
        }
        let out = self.infer(p, w)?;
        Ok(match decoder {
            Decoder::Max => decode_max(&out.distribution, quantizer),
            Decoder::Expect => decode_expect(&out.distribution, quantizer),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{istft, stft};
    use rand::{Rng, SeedableRng};

    pub(crate) fn tiny_config() -> ModelConfig {
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

    fn noise(len: usize, seed: u64, amp: f64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.gen_range(-amp..amp)).collect(), 16_000).unwrap()
    }

    /// Random values everywhere, including the zero-initialised heads.
    fn scrambled(net: &QualityNet<f64>, seed: u64) -> ParamSet<f64> {
        let mut p = net.init_params(seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for (_, t) in p.iter_mut() {
            for v in t.values_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
        p
    }

    #[test]
    fn dilations_and_receptive_field() {
        let c = ModelConfig::default();
        assert_eq!(
            (0..8).map(|b| c.dilation(b)).collect::<Vec<_>>(),
            [1, 2, 4, 8, 16, 32, 64, 128]
        );
        assert_eq!(c.dilation(8), 1);
        assert_eq!(c.receptive_field(), 2041);
    }

    #[test]
    fn impulse_support_of_full_stack_is_receptive_field() {
        // narrow channels, full depth; weights set to one so every tap passes signal
        let cfg = ModelConfig {
            bottleneck_channels: 1,
            dconv_channels: 1,
            ..ModelConfig::default()
        };
        let net = QualityNet::<f64>::new(cfg.clone()).unwrap();
        let mut p = net.init_params(0).unwrap();
        for (name, t) in p.iter_mut() {
            let fill =
                if name.ends_with("slope") || name.ends_with("gamma") || name.ends_with("weight") {
                    1.0
                } else {
                    0.0
                };
            t.values_mut().iter_mut().for_each(|v| *v = fill);
        }
        let t = 4200;
        let center = 2100;
        let mut x = vec![0.0; t];
        x[center] = 1.0;
        let mut g = Graph::<f64>::new();
        let mut h = g.constant(Tensor::new(vec![1, 1, t], x).unwrap());
        let mut stats = Vec::new();
        for i in 0..cfg.n_blocks() {
            h = net
                .conv_block(&mut g, &p, h, i, NormMode::Eval, &mut stats)
                .unwrap();
        }
        let out = g.value(h).values();
        assert_eq!(out.len(), t);
        let support: Vec<usize> = (0..t).filter(|&i| out[i] != 0.0).collect();
        assert_eq!(support.len(), 2041);
        assert_eq!(
            (support[0], *support.last().unwrap()),
            (center - 1020, center + 1020)
        );
    }

    #[test]
    fn zero_block_is_identity() {
        let net = QualityNet::<f64>::new(tiny_config()).unwrap();
        let mut p = net.init_params(1).unwrap();
        for (name, t) in p.iter_mut() {
            if name.starts_with("blocks.0.") {
                t.values_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..8 * 9).map(|_| rng.gen_range(-3.0..3.0)).collect();
        for mode in [NormMode::Train, NormMode::Eval] {
            let mut g = Graph::<f64>::new();
            let xv = g.constant(Tensor::new(vec![1, 8, 9], x.clone()).unwrap());
            let y = net
                .conv_block(&mut g, &p, xv, 0, mode, &mut Vec::new())
                .unwrap();
            assert_eq!(g.value(y).values(), x.as_slice());
        }
    }

    #[test]
    fn block_keeps_length_for_every_dilation() {
        let cfg = ModelConfig {
            blocks_per_repeat: 8,
            ..tiny_config()
        };
        let net = QualityNet::<f64>::new(cfg).unwrap();
        let p = net.init_params(3).unwrap();
        for i in 0..8 {
            let mut g = Graph::<f64>::new();
            let xv = g.constant(Tensor::full(vec![2, 8, 5], 0.5));
            let y = net
                .conv_block(&mut g, &p, xv, i, NormMode::Eval, &mut Vec::new())
                .unwrap();
            assert_eq!(g.shape(y), &[2, 8, 5]);
        }
        let mut g = Graph::<f64>::new();
        let xv = g.constant(Tensor::full(vec![1, 7, 5], 0.5));
        assert!(matches!(
            net.conv_block(&mut g, &p, xv, 0, NormMode::Eval, &mut Vec::new()),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn one_second_output_layout() {
        let net = QualityNet::<f64>::new(tiny_config()).unwrap();
        let p = scrambled(&net, 4);
        let w = noise(16_000, 5, 0.3);
        let out = net.infer(&p, &w).unwrap();
        assert_eq!(out.frames, 61);
        assert_eq!(out.logits.len(), 10 * 61);
        assert_eq!(out.reconstruction.len(), 15_872);
        assert!((out.distribution.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(out.distribution.probs().iter().all(|&p| p >= 0.0));
        for (c, &q) in out.pooled.iter().enumerate() {
            let mean = out.logits[c * 61..(c + 1) * 61].iter().sum::<f64>() / 61.0;
            assert!((mean - q).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_mask_reproduces_roundtrip() {
        let net = QualityNet::<f64>::new(tiny_config()).unwrap();
        let p = net.init_params(6).unwrap();
        let w = noise(8_000, 7, 0.5);
        let out = net.infer(&p, &w).unwrap();
        let expected = istft(&stft(&w, &net.config().stft).unwrap(), &net.config().stft).unwrap();
        assert_eq!(out.reconstruction, expected);
    }

    #[test]
    fn eval_is_deterministic() {
        let net = QualityNet::<f64>::new(tiny_config()).unwrap();
        let p = scrambled(&net, 8);
        let w = noise(6_000, 9, 0.4);
        assert_eq!(net.infer(&p, &w).unwrap(), net.infer(&p, &w).unwrap());
    }

    #[test]
    fn fresh_head_predicts_centre_of_range() {
        let net = QualityNet::<f64>::new(tiny_config()).unwrap();
        let p = net.init_params(10).unwrap();
        let q = QuantizerConfig::new(10, 0).unwrap();
        let s = net
            .predict_quality(&p, &noise(4_000, 11, 0.2), &q, Decoder::Expect)
            .unwrap();
        assert!((s.value() - 2.0).abs() < 1e-9);
        let bad = QuantizerConfig::new(8, 0).unwrap();
        assert!(net
            .predict_quality(&p, &noise(4_000, 11, 0.2), &bad, Decoder::Max)
            .is_err());
    }

    #[test]
    fn decoders_ignore_logit_shift() {
        let net = QualityNet::<f64>::new(tiny_config()).unwrap();
        let q = QuantizerConfig::new(10, 0).unwrap();
        let w = noise(5_000, 12, 0.3);
        let p = scrambled(&net, 13);
        let mut shifted = p.clone();
        for v in shifted.get_mut("quality.bias").unwrap().values_mut() {
            *v += 7.3;
        }
        for d in [Decoder::Max, Decoder::Expect] {
            let a = net.predict_quality(&p, &w, &q, d).unwrap().value();
            let b = net.predict_quality(&shifted, &w, &q, d).unwrap().value();
            assert!((a - b).abs() < 1e-9, "{d:?}: {a} vs {b}");
        }
    }

    #[test]
    fn periodic_input_pooling_differs_only_through_edges() {
        let net = QualityNet::<f64>::new(tiny_config()).unwrap();
        let p = scrambled(&net, 14);
        // period equal to the hop: every interior frame sees the same samples
        let period: Vec<f64> = noise(256, 15, 0.4).into_samples();
        let make = |reps: usize| Waveform::new(period.repeat(reps), 16_000).unwrap();
        let short = net.infer(&p, &make(40)).unwrap();
        let long = net.infer(&p, &make(80)).unwrap();

        let frames =
            |o: &ModelOutput, c: usize| o.logits[c * o.frames..(c + 1) * o.frames].to_vec();
        for c in 0..10 {
            let (a, b) = (frames(&short, c), frames(&long, c));
            let mid = a[a.len() / 2];
            let edge = |v: &[f64]| v.iter().filter(|x| (*x - mid).abs() > 1e-9).count();
            let spread = |v: &[f64]| {
                v.iter().copied().fold(f64::MIN, f64::max)
                    - v.iter().copied().fold(f64::MAX, f64::min)
            };
            let bound = edge(&a) as f64 / a.len() as f64 * spread(&a)
                + edge(&b) as f64 / b.len() as f64 * spread(&b);
            assert!(edge(&a) < a.len() / 2);
            assert!((short.pooled[c] - long.pooled[c]).abs() <= bound + 1e-12);
        }
    }

    #[test]
    fn params_are_checked_against_config() {
        let net = QualityNet::<f64>::new(tiny_config()).unwrap();
        let p = net.init_params(0).unwrap();
        net.check_params(&p).unwrap();
        let other = QualityNet::<f64>::new(ModelConfig {
            n_classes_total: 12,
            ..tiny_config()
        })
        .unwrap();
        assert!(matches!(other.check_params(&p), Err(Error::Config(_))));
    }

    #[test]
    fn running_stats_update_uses_momentum() {
        let net = QualityNet::<f64>::new(tiny_config()).unwrap();
        let mut p = net.init_params(0).unwrap();
        let stats = vec![(
            "blocks.0.norm1".to_string(),
            BatchStats {
                mean: vec![1.0; 16],
                var: vec![3.0; 16],
            },
        )];
        net.update_running_stats(&mut p, &stats).unwrap();
        assert!(
            (p.buffer("blocks.0.norm1.running_mean").unwrap().values()[0] - 0.01).abs() < 1e-15
        );
        assert!((p.buffer("blocks.0.norm1.running_var").unwrap().values()[0] - 1.02).abs() < 1e-15);
    }
}
