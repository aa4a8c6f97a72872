use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::diffcore::{Backward, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Power floor applied before the logarithm in [`lps`].
pub const LPS_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowKind {
    /// Square root of the periodic Hann window, used for analysis and synthesis.
    #[default]
    SqrtHann,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop_len: usize,
    pub fft_len: usize,
    #[serde(default)]
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self::for_sample_rate(16_000)
    }
}

impl StftConfig {
    /// 32 ms window with 16 ms hop at the given rate.
    pub fn for_sample_rate(sample_rate: u32) -> Self {
        let window_len = (sample_rate as usize * 32 / 1000) & !1;
        Self {
            sample_rate,
            window_len,
            hop_len: window_len / 2,
            fft_len: window_len,
            window: WindowKind::SqrtHann,
        }
    }

    pub fn bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    pub fn frames(&self, len: usize) -> usize {
        if len < self.window_len {
            0
        } else {
            (len - self.window_len) / self.hop_len + 1
        }
    }

    /// Length of the signal resynthesized from `frames` frames.
    pub fn output_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop_len + self.window_len
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::InvalidStft("sample rate must be positive".into()));
        }
        if self.window_len < 2 || self.window_len % 2 != 0 {
            return Err(Error::InvalidStft(format!(
                "window length {} must be even and ≥ 2",
                self.window_len
            )));
        }
        if self.hop_len * 2 != self.window_len {
            return Err(Error::InvalidStft(format!(
                "hop {} must be exactly half the window {}",
                self.hop_len, self.window_len
            )));
        }
        if self.fft_len != self.window_len {
            return Err(Error::InvalidStft(format!(
                "FFT length {} must equal the window length {}",
                self.fft_len, self.window_len
            )));
        }
        Ok(())
    }

    pub fn window_coefficients(&self) -> Vec<f64> {
        let n = self.window_len as f64;
        match self.window {
            WindowKind::SqrtHann => (0..self.window_len)
                .map(|i| (PI * i as f64 / n).sin())
                .collect(),
        }
    }
}

/// F×T complex matrix, stored bin-major (`data[f * frames + t]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram<T> {
    bins: usize,
    frames: usize,
    data: Vec<Complex<T>>,
}

impl<T: Real> ComplexSpectrogram<T> {
    pub fn new(bins: usize, frames: usize, data: Vec<Complex<T>>) -> Result<Self> {
        if data.len() != bins * frames {
            return Err(Error::shape(
                "spectrogram",
                format!(
                    "{bins}×{frames} needs {} values, got {}",
                    bins * frames,
                    data.len()
                ),
            ));
        }
        if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::NonFinite { op: "spectrogram" });
        }
        Ok(Self { bins, frames, data })
    }

    pub fn zeros(bins: usize, frames: usize) -> Self {
        Self {
            bins,
            frames,
            data: vec![Complex::new(T::zero(), T::zero()); bins * frames],
        }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn get(&self, bin: usize, frame: usize) -> Complex<T> {
        self.data[bin * self.frames + frame]
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    /// Real/imaginary planes as a `[2, bins, frames]` array.
    pub fn to_planes(&self) -> Vec<T> {
        self.data
            .iter()
            .map(|c| c.re)
            .chain(self.data.iter().map(|c| c.im))
            .collect()
    }

    pub fn from_planes(bins: usize, frames: usize, planes: &[T]) -> Result<Self> {
        let n = bins * frames;
        if planes.len() != 2 * n {
            return Err(Error::shape("spectrogram", "plane length mismatch"));
        }
        let data = (0..n)
            .map(|i| Complex::new(planes[i], planes[n + i]))
            .collect();
        Self::new(bins, frames, data)
    }
}

/// Precomputed STFT/iSTFT kernels for one configuration.
///
/// The transform is a fixed (non-trainable) framed DFT. Cloning is cheap.
#[derive(Clone)]
pub struct Stft<T: Real> {
    config: StftConfig,
    window: Arc<Vec<T>>,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
    cola: T,
}

impl<T: Real> std::fmt::Debug for Stft<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft")
            .field("config", &self.config)
            .finish()
    }
}

impl<T: Real> Stft<T> {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let window = config.window_coefficients();

        // overlap-added squared window must be constant for exact resynthesis
        let hop = config.hop_len;
        let envelope: Vec<f64> = (0..hop)
            .map(|n| {
                (0..config.window_len / hop)
                    .map(|k| window[n + k * hop].powi(2))
                    .sum()
            })
            .collect();
        let cola = envelope.iter().sum::<f64>() / hop as f64;
        if envelope.iter().any(|e| (e - cola).abs() > 1e-10 * cola) {
            return Err(Error::InvalidStft(
                "window pair does not satisfy constant overlap-add".into(),
            ));
        }

        let mut planner = FftPlanner::new();
        Ok(Self {
            forward: planner.plan_fft_forward(config.fft_len),
            inverse: planner.plan_fft_inverse(config.fft_len),
            window: Arc::new(window.into_iter().map(T::of).collect()),
            cola: T::of(cola),
            config,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn window(&self) -> &[T] {
        &self.window
    }

    pub fn analyze(&self, samples: &[T]) -> Result<ComplexSpectrogram<T>> {
        let cfg = &self.config;
        if samples.len() < cfg.window_len {
            return Err(Error::SignalTooShort {
                len: samples.len(),
                needed: cfg.window_len,
            });
        }
        let frames = cfg.frames(samples.len());
        let bins = cfg.bins();
        let mut data = vec![Complex::new(T::zero(), T::zero()); bins * frames];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); cfg.fft_len];
        for t in 0..frames {
            let start = t * cfg.hop_len;
            for (n, slot) in buf.iter_mut().enumerate() {
                *slot = Complex::new(samples[start + n] * self.window[n], T::zero());
            }
            self.forward.process(&mut buf);
            for f in 0..bins {
                data[f * frames + t] = buf[f];
            }
        }
        ComplexSpectrogram::new(bins, frames, data)
    }

    /// Weighted overlap-add resynthesis normalized by the COLA constant.
    pub fn synthesize(&self, spec: &ComplexSpectrogram<T>) -> Result<Vec<T>> {
        let cfg = &self.config;
        if spec.bins() != cfg.bins() {
            return Err(Error::shape(
                "istft",
                format!("{} bins, configuration expects {}", spec.bins(), cfg.bins()),
            ));
        }
        let mut out = vec![T::zero(); cfg.output_len(spec.frames())];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); cfg.fft_len];
        for t in 0..spec.frames() {
            self.inverse_frame(|f| spec.get(f, t), &mut buf);
            let start = t * cfg.hop_len;
            for n in 0..cfg.window_len {
                out[start + n] = out[start + n] + buf[n].re;
            }
        }
        Ok(out)
    }

    /// Inverse real DFT of one frame (imaginary parts of the DC and Nyquist
    /// bins are ignored), windowed and scaled by `1/(N·cola)`, left in `buf[..].re`.
    fn inverse_frame(&self, bin: impl Fn(usize) -> Complex<T>, buf: &mut [Complex<T>]) {
        let n = self.config.fft_len;
        let half = n / 2;
        buf[0] = Complex::new(bin(0).re, T::zero());
        buf[half] = Complex::new(bin(half).re, T::zero());
        for k in 1..half {
            let c = bin(k);
            buf[k] = c;
            buf[n - k] = c.conj();
        }
        self.inverse.process(buf);
        let scale = T::one() / (T::of(n as f64) * self.cola);
        for (i, v) in buf.iter_mut().enumerate().take(self.config.window_len) {
            v.re = v.re * scale * self.window[i];
        }
    }
}

/// STFT of a waveform. The final partial frame is dropped.
pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram<f64>> {
    Stft::new(cfg.clone())?.analyze(w.samples())
}

/// Overlap-add inverse of [`stft`]; the output has `(T−1)·hop + window` samples.
pub fn istft(s: &ComplexSpectrogram<f64>, cfg: &StftConfig) -> Result<Waveform> {
    let samples = Stft::new(cfg.clone())?.synthesize(s)?;
    Waveform::new(samples, cfg.sample_rate)
}

/// Log-power spectrum `ln(max(|Y|², 1e−12))`, bin-major F×T.
pub fn lps<T: Real>(s: &ComplexSpectrogram<T>) -> Vec<T> {
    let floor = T::of(LPS_FLOOR);
    s.data()
        .iter()
        .map(|c| (c.re * c.re + c.im * c.im).max(floor).ln())
        .collect()
}

struct IstftOp<T: Real> {
    plan: Stft<T>,
}

impl<T: Real> Backward<T> for IstftOp<T> {
    fn name(&self) -> &'static str {
        "istft"
    }

    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        _: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let shape = x[0].shape();
        let (batch, bins, frames) = (shape[0], shape[2], shape[3]);
        let cfg = &self.plan.config;
        let n = cfg.fft_len;
        let out_len = cfg.output_len(frames);
        let plane = bins * frames;
        let mut grad = vec![T::zero(); x[0].len()];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        let base_scale = T::one() / (T::of(n as f64) * self.plan.cola);
        let two = T::of(2.0);
        for b in 0..batch {
            let gb = &g[b * out_len..(b + 1) * out_len];
            for t in 0..frames {
                let start = t * cfg.hop_len;
                for (i, slot) in buf.iter_mut().enumerate() {
                    *slot = Complex::new(gb[start + i] * self.plan.window[i], T::zero());
                }
                self.plan.forward.process(&mut buf);
                for f in 0..bins {
                    let c = if f == 0 || f == n / 2 {
                        base_scale
                    } else {
                        two * base_scale
                    };
                    let re = b * 2 * plane + f * frames + t;
                    grad[re] = c * buf[f].re;
                    if f != 0 && f != n / 2 {
                        grad[re + plane] = c * buf[f].im;
                    }
                }
            }
        }
        vec![Some(grad)]
    }
}

impl<T: Real> Graph<T> {
    /// Differentiable inverse STFT: `[n, 2, bins, frames] → [n, samples]`.
    pub fn istft(&mut self, spec: Var, plan: &Stft<T>) -> Result<Var> {
        let shape = self.shape(spec).to_vec();
        let (batch, bins, frames) = match *shape {
            [n, 2, f, t] if f == plan.config.bins() => (n, f, t),
            _ => {
                return Err(Error::shape(
                    "istft",
                    format!("expected [n, 2, {}, t], got {shape:?}", plan.config.bins()),
                ))
            }
        };
        let plane = bins * frames;
        let out_len = plan.config.output_len(frames);
        let mut out = Vec::with_capacity(batch * out_len);
        for b in 0..batch {
            let planes = &self.value(spec).values()[b * 2 * plane..(b + 1) * 2 * plane];
            let s = ComplexSpectrogram::from_planes(bins, frames, planes)?;
            out.extend(plan.synthesize(&s)?);
        }
        let out = Tensor::new(vec![batch, out_len], out)?;
        self.push_op(out, vec![spec], Box::new(IstftOp { plan: plan.clone() }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_signal(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Direct DFT of the windowed frame, straight from the definition.
    fn dft_frame(x: &[f64], window: &[f64], start: usize, bins: usize) -> Vec<Complex<f64>> {
        let n = window.len();
        (0..bins)
            .map(|k| {
                (0..n).fold(Complex::new(0.0, 0.0), |acc, i| {
                    let ang = -2.0 * PI * (k * i) as f64 / n as f64;
                    acc + Complex::new(ang.cos(), ang.sin()) * (x[start + i] * window[i])
                })
            })
            .collect()
    }

    #[test]
    fn default_config_matches_16k_layout() {
        let cfg = StftConfig::default();
        assert_eq!(
            (cfg.window_len, cfg.hop_len, cfg.fft_len, cfg.bins()),
            (512, 256, 512, 257)
        );
        assert_eq!(cfg.frames(16_000), 61);
        assert_eq!(cfg.output_len(61), 15_872);
    }

    #[test]
    fn silence_gives_zero_spectrogram() {
        let w = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
        let s = stft(&w, &StftConfig::default()).unwrap();
        assert_eq!((s.bins(), s.frames()), (257, 61));
        assert!(s.data().iter().all(|c| c.norm() == 0.0));
        let back = istft(&s, &StftConfig::default()).unwrap();
        assert_eq!(back.len(), 15_872);
        assert!(back.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_signal_is_rejected() {
        let w = Waveform::new(vec![0.1; 511], 16_000).unwrap();
        assert!(matches!(
            stft(&w, &StftConfig::default()),
            Err(Error::SignalTooShort {
                len: 511,
                needed: 512
            })
        ));
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut cfg = StftConfig::default();
        cfg.hop_len = 128;
        assert!(cfg.validate().is_err());
        let mut cfg = StftConfig::default();
        cfg.fft_len = 1024;
        assert!(cfg.validate().is_err());
        let s = ComplexSpectrogram::<f64>::zeros(100, 4);
        assert!(istft(&s, &StftConfig::default()).is_err());
    }

    #[test]
    fn matches_direct_dft() {
        let cfg = StftConfig::default();
        let x = random_signal(2048, 3);
        let s = Stft::<f64>::new(cfg.clone()).unwrap().analyze(&x).unwrap();
        let window = cfg.window_coefficients();
        for t in [0, 3, s.frames() - 1] {
            let oracle = dft_frame(&x, &window, t * cfg.hop_len, cfg.bins());
            for (f, o) in oracle.iter().enumerate() {
                assert!((s.get(f, t) - o).norm() < 1e-9, "bin {f} frame {t}");
            }
        }
    }

    #[test]
    fn bin_centred_cosine_concentrates_in_its_bin() {
        let cfg = StftConfig::default();
        let k = 40;
        let x: Vec<f64> = (0..16_000)
            .map(|i| (2.0 * PI * (k * i) as f64 / cfg.fft_len as f64).cos())
            .collect();
        let s = Stft::<f64>::new(cfg.clone()).unwrap().analyze(&x).unwrap();
        let window = cfg.window_coefficients();
        for t in 1..s.frames() - 1 {
            let oracle = dft_frame(&x, &window, t * cfg.hop_len, cfg.bins());
            let peak = (0..cfg.bins())
                .max_by(|&a, &b| s.get(a, t).norm().total_cmp(&s.get(b, t).norm()))
                .unwrap();
            assert_eq!(peak, k);
            assert!((s.get(k, t) - oracle[k]).norm() < 1e-8);
            // sine-window sidelobes at integer offset m fall off as 1/(4m²-1)
            let far: f64 = (0..cfg.bins())
                .filter(|f| f.abs_diff(k) > 2)
                .map(|f| s.get(f, t).norm())
                .fold(0.0, f64::max);
            assert!(far < 1.01 / 35.0 * s.get(k, t).norm());
        }
    }

    #[test]
    fn lps_values() {
        let one =
            ComplexSpectrogram::new(2, 1, vec![Complex::new(1.0, 0.0), Complex::new(0.0, 1.0)])
                .unwrap();
        assert!(lps::<f64>(&one).iter().all(|&v| v.abs() < 1e-15));
        let zero = ComplexSpectrogram::<f64>::zeros(3, 2);
        assert!(lps(&zero)
            .iter()
            .all(|&v| (v - (-27.631021115928547)).abs() < 1e-12));
        let e =
            ComplexSpectrogram::new(1, 1, vec![Complex::new(std::f64::consts::E, 0.0)]).unwrap();
        assert!((lps(&e)[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn parseval_per_frame() {
        let cfg = StftConfig::default();
        let x = random_signal(4096, 11);
        let s = Stft::<f64>::new(cfg.clone()).unwrap().analyze(&x).unwrap();
        let w = cfg.window_coefficients();
        let n = cfg.fft_len;
        for t in 0..s.frames() {
            let time: f64 = (0..n)
                .map(|i| (x[t * cfg.hop_len + i] * w[i]).powi(2))
                .sum();
            let spec: f64 = (0..cfg.bins())
                .map(|f| {
                    let weight = if f == 0 || f == n / 2 { 1.0 } else { 2.0 };
                    weight * s.get(f, t).norm_sqr()
                })
                .sum::<f64>()
                / n as f64;
            assert!((time - spec).abs() <= 1e-9 * time);
        }
    }

    #[test]
    fn linearity() {
        let cfg = StftConfig::default();
        let plan = Stft::<f64>::new(cfg).unwrap();
        let x = random_signal(3000, 1);
        let y = random_signal(3000, 2);
        let (a, b) = (0.7, -1.3);
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let (sx, sy, sm) = (
            plan.analyze(&x).unwrap(),
            plan.analyze(&y).unwrap(),
            plan.analyze(&mix).unwrap(),
        );
        for i in 0..sm.data().len() {
            let lin = sx.data()[i] * a + sy.data()[i] * b;
            assert!((sm.data()[i] - lin).norm() < 1e-10);
        }
    }

    #[test]
    fn interior_roundtrip() {
        let cfg = StftConfig::default();
        let plan = Stft::<f64>::new(cfg.clone()).unwrap();
        let x = random_signal(16_000, 5);
        let back = plan.synthesize(&plan.analyze(&x).unwrap()).unwrap();
        let (lo, hi) = (cfg.hop_len, back.len() - cfg.hop_len);
        let err: f64 = (lo..hi)
            .map(|i| (back[i] - x[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = (lo..hi).map(|i| x[i] * x[i]).sum::<f64>().sqrt();
        assert!(err / norm < 1e-12);
    }
}
