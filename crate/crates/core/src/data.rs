//! Dataset construction: synthetic clean signals and noise, SNR-controlled
//! mixing, reverberation with user-supplied impulse responses, random
//! spectrogram perturbation, proxy quality labels and manifest files.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{QualityScore, SCORE_MAX};
use crate::signal::{load_wav, ComplexSpectrogram, Stft, StftConfig, Waveform};

/// Peak level applied to mixtures whose peak would exceed it.
pub const MIX_PEAK: f64 = 0.99;
/// Peak ceiling of synthesized clean signals.
pub const SYNTH_PEAK: f64 = 0.9;
/// SNR range of the proxy label map, in dB.
pub const PROXY_SNR_RANGE: (f64, f64) = (-12.0, 30.0);

/// Independent generator for item `index` under a global seed.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// Harmonic complex with a wandering pitch.
    ToneComplex,
    /// Resonant band-pass filtered noise bursts.
    FilteredNoiseBurst,
    /// Exponential frequency sweep.
    Chirp,
}

impl SynthKind {
    pub const ALL: [SynthKind; 3] = [
        SynthKind::ToneComplex,
        SynthKind::FilteredNoiseBurst,
        SynthKind::Chirp,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    White,
    /// White noise through a one-pole low-pass.
    Lowpass,
    /// Mains-like hum with harmonics plus a little white noise.
    Hum,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::White, NoiseKind::Lowpass, NoiseKind::Hum];
}

/// Syllable-like amplitude envelope: raised-cosine bursts at 3–6 Hz with
/// random depth, never fully silent.
fn speech_envelope(rng: &mut ChaCha8Rng, len: usize, sr: f64) -> Vec<f64> {
    let rate = rng.gen_range(3.0..6.0);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let depth = rng.gen_range(0.5..0.9);
    (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            1.0 - depth * 0.5 * (1.0 + (2.0 * PI * rate * t + phase).cos())
        })
        .collect()
}

fn scale_to_peak(x: &mut [f64], peak: f64) {
    let m = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m > 0.0 {
        let g = peak / m;
        x.iter_mut().for_each(|v| *v *= g);
    }
}

/// Deterministic synthetic stand-in for a clean utterance.
pub fn synth_clean(
    kind: SynthKind,
    duration_secs: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<Waveform> {
    if !(duration_secs >= 0.2) {
        return Err(Error::Config(format!(
            "synthetic duration must be at least 0.2 s, got {duration_secs}"
        )));
    }
    let sr = sample_rate as f64;
    let len = (duration_secs * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let env = speech_envelope(&mut rng, len, sr);
    let nyquist = sr / 2.0;

    let mut x: Vec<f64> = match kind {
        SynthKind::ToneComplex => {
            let f0 = rng.gen_range(100.0..250.0);
            let vib_rate = rng.gen_range(2.0..5.0);
            let vib_depth = rng.gen_range(0.02..0.08);
            let top = (4000.0f64).min(nyquist * 0.9);
            let harmonics = ((top / f0) as usize).max(1);
            let phases: Vec<f64> = (0..harmonics)
                .map(|_| rng.gen_range(0.0..2.0 * PI))
                .collect();
            let mut phase0 = 0.0;
            (0..len)
                .map(|i| {
                    let t = i as f64 / sr;
                    let f = f0 * (1.0 + vib_depth * (2.0 * PI * vib_rate * t).sin());
                    phase0 += 2.0 * PI * f / sr;
                    phases
                        .iter()
                        .enumerate()
                        .map(|(k, p)| ((k + 1) as f64 * phase0 + p).sin() / (k + 1) as f64)
                        .sum()
                })
                .collect()
        }
        SynthKind::FilteredNoiseBurst => {
            // two-pole resonator driven by white noise
            let fc = rng.gen_range(300.0..3000.0f64).min(nyquist * 0.8);
            let r: f64 = 0.98;
            let (a1, a2) = (2.0 * r * (2.0 * PI * fc / sr).cos(), -r * r);
            let (mut y1, mut y2) = (0.0, 0.0);
            (0..len)
                .map(|_| {
                    let y = rng.gen_range(-1.0..1.0) + a1 * y1 + a2 * y2;
                    y2 = y1;
                    y1 = y;
                    y
                })
                .collect()
        }
        SynthKind::Chirp => {
            let f_start = rng.gen_range(150.0..500.0);
            let f_end = rng.gen_range(1000.0..3500.0f64).min(nyquist * 0.9);
            let total = len as f64 / sr;
            let k = (f_end / f_start).ln() / total;
            (0..len)
                .map(|i| {
                    let t = i as f64 / sr;
                    (2.0 * PI * f_start * ((k * t).exp() - 1.0) / k).sin()
                })
                .collect()
        }
    };
    for (v, e) in x.iter_mut().zip(&env) {
        *v *= e;
    }
    scale_to_peak(&mut x, rng.gen_range(0.5..SYNTH_PEAK));
    Waveform::new(x, sample_rate)
}

/// Deterministic synthetic noise of `len` samples.
pub fn synth_noise(kind: NoiseKind, len: usize, sample_rate: u32, seed: u64) -> Result<Waveform> {
    let sr = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = match kind {
        NoiseKind::White => (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        NoiseKind::Lowpass => {
            let a = rng.gen_range(0.8..0.97);
            let mut y = 0.0;
            (0..len)
                .map(|_| {
                    y = a * y + (1.0 - a) * rng.gen_range(-1.0..1.0);
                    y
                })
                .collect()
        }
        NoiseKind::Hum => {
            let f = if rng.gen_bool(0.5) { 50.0 } else { 60.0 };
            (0..len)
                .map(|i| {
                    let t = i as f64 / sr;
                    (1..=5)
                        .map(|k| (2.0 * PI * f * k as f64 * t).sin() / k as f64)
                        .sum::<f64>()
                        + 0.05 * rng.gen_range(-1.0..1.0)
                })
                .collect()
        }
    };
    Waveform::new(x, sample_rate)
}

/// Result of [`mix_at_snr`].
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub mixture: Waveform,
    /// Clean reference with the same output gain as the mixture.
    pub clean: Waveform,
    /// Scaled noise component, so `mixture = clean + noise`.
    pub noise: Waveform,
    /// Gain applied to the input noise before peak normalization.
    pub noise_gain: f64,
}

fn same_rate(a: &Waveform, b: &Waveform) -> Result<()> {
    if a.sample_rate() != b.sample_rate() {
        return Err(Error::SampleRateMismatch {
            expected: a.sample_rate(),
            actual: b.sample_rate(),
        });
    }
    Ok(())
}

/// Adds `noise` (looped or trimmed to the clean length) at the requested SNR,
/// then scales everything down if the mixture peak exceeds [`MIX_PEAK`].
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Mixture> {
    same_rate(clean, noise)?;
    if !snr_db.is_finite() {
        return Err(Error::Config(format!("SNR must be finite, got {snr_db}")));
    }
    let n: Vec<f64> = noise
        .samples()
        .iter()
        .copied()
        .cycle()
        .take(clean.len())
        .collect();
    let p_clean = clean.power();
    let p_noise = n.iter().map(|v| v * v).sum::<f64>() / n.len() as f64;
    if p_clean == 0.0 {
        return Err(Error::SilentSignal("clean signal has zero power"));
    }
    if p_noise == 0.0 {
        return Err(Error::SilentSignal("noise has zero power"));
    }
    let gain = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut noise_part: Vec<f64> = n.iter().map(|v| v * gain).collect();
    let mut clean_part = clean.samples().to_vec();
    let mut mix: Vec<f64> = clean_part
        .iter()
        .zip(&noise_part)
        .map(|(c, v)| c + v)
        .collect();
    let peak = mix.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > MIX_PEAK {
        let s = MIX_PEAK / peak;
        for v in mix.iter_mut().chain(&mut clean_part).chain(&mut noise_part) {
            *v *= s;
        }
    }
    let sr = clean.sample_rate();
    Ok(Mixture {
        mixture: Waveform::new(mix, sr)?,
        clean: Waveform::new(clean_part, sr)?,
        noise: Waveform::new(noise_part, sr)?,
        noise_gain: gain,
    })
}

/// `10·log10(P_clean / P_(degraded − clean))`; infinite when they are equal.
pub fn snr_db(clean: &Waveform, degraded: &Waveform) -> Result<f64> {
    same_rate(clean, degraded)?;
    if clean.len() != degraded.len() {
        return Err(Error::LengthMismatch {
            left: clean.len(),
            right: degraded.len(),
        });
    }
    let p_clean = clean.power();
    if p_clean == 0.0 {
        return Err(Error::SilentSignal("clean signal has zero power"));
    }
    let p_err = clean
        .samples()
        .iter()
        .zip(degraded.samples())
        .map(|(c, d)| (d - c).powi(2))
        .sum::<f64>()
        / clean.len() as f64;
    Ok(10.0 * (p_clean / p_err).log10())
}

/// Affine map from SNR to a quality score, clamped to [1, 4.5].
pub fn snr_to_proxy_score(snr: f64) -> QualityScore {
    let (lo, hi) = PROXY_SNR_RANGE;
    let v = if snr.is_nan() {
        1.0
    } else {
        (1.0 + 3.5 * (snr - lo) / (hi - lo)).clamp(1.0, SCORE_MAX)
    };
    QualityScore::clamped(v)
}

/// SNR-based stand-in for an intrusive quality metric.
pub fn proxy_label(clean: &Waveform, degraded: &Waveform) -> Result<QualityScore> {
    Ok(snr_to_proxy_score(snr_db(clean, degraded)?))
}

/// Full linear convolution with `rir`, truncated to the input length.
pub fn convolve_rir(clean: &Waveform, rir: &Waveform) -> Result<Waveform> {
    same_rate(clean, rir)?;
    let (n, m) = (clean.len(), rir.len());
    let size = (n + m - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let pad = |x: &[f64]| {
        let mut v = vec![Complex::new(0.0, 0.0); size];
        for (slot, &s) in v.iter_mut().zip(x) {
            slot.re = s;
        }
        v
    };
    let mut a = pad(clean.samples());
    let mut b = pad(rir.samples());
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    inv.process(&mut a);
    let scale = 1.0 / size as f64;
    Waveform::new(
        a[..n].iter().map(|c| c.re * scale).collect(),
        clean.sample_rate(),
    )
}

/// Random time-frequency perturbation settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub boost_frac: f64,
    pub atten_frac: f64,
    pub boost_gain: f64,
    pub atten_gain: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            boost_frac: 0.30,
            atten_frac: 0.50,
            boost_gain: 2.0,
            atten_gain: 0.25,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        let (b, a) = (self.boost_frac, self.atten_frac);
        if !(0.0..=1.0).contains(&b) || !(0.0..=1.0).contains(&a) || b + a > 1.0 {
            return Err(Error::InvalidFractions { boost: b, atten: a });
        }
        if !(self.boost_gain >= 0.0 && self.atten_gain >= 0.0)
            || !self.boost_gain.is_finite()
            || !self.atten_gain.is_finite()
        {
            return Err(Error::Config(
                "perturbation gains must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Disjoint random index sets `(boosted, attenuated)` over `total` bins,
/// with sizes `round(frac · total)`.
pub fn perturb_bins(
    total: usize,
    cfg: &PerturbConfig,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    cfg.validate()?;
    let n_boost = (cfg.boost_frac * total as f64).round() as usize;
    let n_atten = ((cfg.atten_frac * total as f64).round() as usize).min(total - n_boost);
    let mut idx: Vec<usize> = (0..total).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut boost = idx[..n_boost].to_vec();
    let mut atten = idx[n_boost..n_boost + n_atten].to_vec();
    boost.sort_unstable();
    atten.sort_unstable();
    Ok((boost, atten))
}

/// Scales the magnitudes of random disjoint sets of STFT bins (phases kept)
/// and resynthesizes.
pub fn perturb_spectrogram(
    w: &Waveform,
    stft_cfg: &StftConfig,
    cfg: &PerturbConfig,
    seed: u64,
) -> Result<Waveform> {
    cfg.validate()?;
    let plan = Stft::<f64>::new(stft_cfg.clone())?;
    let mut spec = plan.analyze(w.samples())?;
    perturb_bins_in_place(&mut spec, cfg, seed)?;
    Waveform::new(plan.synthesize(&spec)?, w.sample_rate())
}

/// Applies the boost and attenuation gains of [`perturb_bins`] to `spec`.
pub fn perturb_bins_in_place(
    spec: &mut ComplexSpectrogram<f64>,
    cfg: &PerturbConfig,
    seed: u64,
) -> Result<()> {
    let (boost, atten) = perturb_bins(spec.data().len(), cfg, seed)?;
    let data = spec.data_mut();
    for i in boost {
        data[i] *= cfg.boost_gain;
    }
    for i in atten {
        data[i] *= cfg.atten_gain;
    }
    Ok(())
}

/// Where an entry came from and how it was made.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub snr_db: Option<f64>,
    pub perturbed: bool,
    pub origin: String,
}

/// One training or evaluation item.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub degraded: Waveform,
    /// Reconstruction target; entries without it train the quality head only.
    pub clean: Option<Waveform>,
    pub label: QualityScore,
    pub meta: EntryMeta,
}

impl DatasetEntry {
    /// Reconstruction weight: `lambda` when a clean target exists, else 0.
    pub fn recon_weight(&self, lambda: f64) -> f64 {
        if self.clean.is_some() {
            lambda
        } else {
            0.0
        }
    }
}

/// Synthetic-corpus parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub count: usize,
    pub duration_secs: f64,
    pub sample_rate: u32,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    /// Probability that an entry is additionally spectrogram-perturbed.
    pub perturb_prob: f64,
    pub perturb: PerturbConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            count: 64,
            duration_secs: 1.0,
            sample_rate: 16_000,
            snr_min_db: PROXY_SNR_RANGE.0,
            snr_max_db: PROXY_SNR_RANGE.1,
            perturb_prob: 0.0,
            perturb: PerturbConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("simulate count must be positive".into()));
        }
        if !(self.duration_secs >= 0.2) {
            return Err(Error::Config(
                "simulate duration must be at least 0.2 s".into(),
            ));
        }
        if !(self.snr_min_db.is_finite()
            && self.snr_max_db.is_finite()
            && self.snr_min_db <= self.snr_max_db)
        {
            return Err(Error::Config(
                "SNR range must be finite with min ≤ max".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.perturb_prob) {
            return Err(Error::Config("perturb_prob must lie in [0, 1]".into()));
        }
        self.perturb.validate()
    }
}

/// Generates entry `index` of a synthetic corpus. Depends only on
/// `(seed, index)`, so entries can be produced in any order or in parallel.
pub fn simulate_entry(cfg: &SimConfig, seed: u64, index: usize) -> Result<DatasetEntry> {
    let mut rng = item_rng(seed, index as u64);
    let kind = *SynthKind::ALL.choose(&mut rng).expect("non-empty");
    let noise_kind = *NoiseKind::ALL.choose(&mut rng).expect("non-empty");
    let snr = if cfg.snr_min_db == cfg.snr_max_db {
        cfg.snr_min_db
    } else {
        rng.gen_range(cfg.snr_min_db..cfg.snr_max_db)
    };
    let clean = synth_clean(kind, cfg.duration_secs, cfg.sample_rate, rng.gen())?;
    let noise = synth_noise(noise_kind, clean.len(), cfg.sample_rate, rng.gen())?;
    let mix = mix_at_snr(&clean, &noise, snr)?;
    let perturbed = rng.gen_bool(cfg.perturb_prob);
    let degraded = if perturbed {
        let stft = StftConfig::for_sample_rate(cfg.sample_rate);
        let p = perturb_spectrogram(&mix.mixture, &stft, &cfg.perturb, rng.gen())?;
        // keep the clean length; the resynthesis drops the unframed tail
        let mut s = p.into_samples();
        s.resize(mix.mixture.len(), 0.0);
        Waveform::new(s, cfg.sample_rate)?
    } else {
        mix.mixture
    };
    let label = proxy_label(&mix.clean, &degraded)?;
    Ok(DatasetEntry {
        degraded,
        clean: Some(mix.clean),
        label,
        meta: EntryMeta {
            snr_db: Some(snr),
            perturbed,
            origin: format!("sim:{kind:?}+{noise_kind:?}"),
        },
    })
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub degraded: PathBuf,
    pub clean: Option<PathBuf>,
    pub label: f64,
}

/// Header line written by [`write_manifest`].
pub const MANIFEST_HEADER: [&str; 3] = ["degraded_path", "clean_path", "label"];

/// Parses a manifest without touching the referenced audio. Relative paths
/// are resolved against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
        });
    }
    let text = std::fs::read_to_string(path)?;
    let err = |line: usize, message: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };
    let Some(header) = text.lines().find(|l| !l.trim().is_empty()) else {
        log::warn!("{}: empty manifest", path.display());
        return Ok(Vec::new());
    };
    let delimiter = if header.contains('\t') { b'\t' } else { b',' };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let columns: Vec<String> = reader
        .headers()
        .map_err(|e| err(1, e.to_string()))?
        .iter()
        .map(str::to_ascii_lowercase)
        .collect();
    let find = |name: &str| columns.iter().position(|c| c == name);
    let (Some(di), Some(li)) = (find("degraded_path"), find("label")) else {
        return Err(err(
            1,
            format!("header must name degraded_path and label columns, found {columns:?}"),
        ));
    };
    let ci = find("clean_path");
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &str| {
        let p = PathBuf::from(p);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };

    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let field = |i: usize| rec.get(i).unwrap_or("");
        let degraded = field(di);
        if degraded.is_empty() {
            return Err(err(line, "missing degraded_path".into()));
        }
        let label: f64 = field(li)
            .parse()
            .map_err(|_| err(line, format!("label `{}` is not a number", field(li))))?;
        if QualityScore::new(label).is_err() {
            return Err(err(line, format!("label {label} outside [-0.5, 4.5]")));
        }
        let clean = ci.map(field).filter(|s| !s.is_empty()).map(resolve);
        out.push(ManifestRecord {
            degraded: resolve(degraded),
            clean,
            label,
        });
    }
    if out.is_empty() {
        log::warn!("{}: manifest has no records", path.display());
    }
    Ok(out)
}

/// Reads a manifest and loads every referenced WAV file.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<DatasetEntry>> {
    let path = path.as_ref();
    read_manifest(path)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let wrap = |e: Error| Error::Manifest {
                path: path.to_path_buf(),
                // header is line 1
                line: i + 2,
                message: e.to_string(),
            };
            let degraded = load_wav(&r.degraded).map_err(wrap)?;
            let clean = match &r.clean {
                Some(c) => {
                    let c = load_wav(c).map_err(wrap)?;
                    if c.sample_rate() != degraded.sample_rate() {
                        return Err(wrap(Error::SampleRateMismatch {
                            expected: degraded.sample_rate(),
                            actual: c.sample_rate(),
                        }));
                    }
                    Some(c)
                }
                None => None,
            };
            Ok(DatasetEntry {
                degraded,
                clean,
                label: QualityScore::new(r.label)?,
                meta: EntryMeta {
                    snr_db: None,
                    perturbed: false,
                    origin: r.degraded.display().to_string(),
                },
            })
        })
        .collect()
}

/// Writes a tab-separated manifest with a header line.
pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(path.as_ref())
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(MANIFEST_HEADER).map_err(io)?;
    for r in records {
        let clean = r
            .clean
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        w.write_record([
            r.degraded.display().to_string(),
            clean,
            format!("{}", r.label),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
