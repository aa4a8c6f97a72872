//! Score quantization into ordered classes, label distributions, and the two
//! score decoders (distribution peak and expectation).
//!
//! Classes are 1-based in the unpadded range `1..=N`; class `n` covers
//! `(−0.5 + (n−1)·Δl, −0.5 + n·Δl]` with `Δl = 5/N`. With `pad = K`, `K`
//! extra classes sit on each side, so a distribution has `N + 2K` entries and
//! unpadded class `n` lives at 0-based position `n − 1 + K`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCORE_MIN: f64 = -0.5;
pub const SCORE_MAX: f64 = 4.5;
const SCORE_SPAN: f64 = SCORE_MAX - SCORE_MIN;

/// Probability masses of the soft label, from offset −2 to +2.
pub const SOFT_KERNEL: [f64; 5] = [0.1, 0.2, 0.4, 0.2, 0.1];

/// A quality score in `[−0.5, 4.5]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct QualityScore(f64);

impl QualityScore {
    pub fn new(value: f64) -> Result<Self> {
        if (SCORE_MIN..=SCORE_MAX).contains(&value) {
            Ok(Self(value))
        } else {
            Err(Error::ScoreOutOfRange(value))
        }
    }

    /// Clamps into range; NaN maps to the lower bound.
    pub fn clamped(value: f64) -> Self {
        if value.is_nan() {
            return Self(SCORE_MIN);
        }
        Self(value.clamp(SCORE_MIN, SCORE_MAX))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    pub n_classes: usize,
    #[serde(default)]
    pub pad: usize,
}

impl QuantizerConfig {
    pub fn new(n_classes: usize, pad: usize) -> Result<Self> {
        let cfg = Self { n_classes, pad };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::Config("quantizer needs at least one class".into()));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        SCORE_SPAN / self.n_classes as f64
    }

    pub fn n_total(&self) -> usize {
        self.n_classes + 2 * self.pad
    }

    /// Upper edge of unpadded class `n`; `edge(0)` is the lower range bound.
    pub fn edge(&self, n: usize) -> f64 {
        SCORE_MIN + (n as f64 * SCORE_SPAN) / self.n_classes as f64
    }

    /// Interval midpoint of the class at 0-based padded position `i`.
    /// Pad classes extrapolate linearly outside the score range.
    pub fn midpoint(&self, i: usize) -> f64 {
        let step = self.step();
        SCORE_MIN + (i as f64 - self.pad as f64) * step + step / 2.0
    }

    pub fn midpoints(&self) -> Vec<f64> {
        (0..self.n_total()).map(|i| self.midpoint(i)).collect()
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if (1..=self.n_classes).contains(&class) {
            Ok(())
        } else {
            Err(Error::ClassOutOfRange {
                index: class,
                n_classes: self.n_classes,
            })
        }
    }
}

/// Probability vector over the `N + 2K` ordered classes.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Config("empty distribution".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config(
                "distribution has negative or non-finite mass".into(),
            ));
        }
        let total = exact_sum(&probs);
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "distribution sums to {total}, not 1"
            )));
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative weights to unit mass.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let total = exact_sum(&weights);
        if !(total > 0.0) || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(
                "weights must be non-negative with positive sum".into(),
            ));
        }
        Self::new(weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Total mass, correctly rounded.
    pub fn total(&self) -> f64 {
        exact_sum(&self.probs)
    }

    /// 0-based index of the largest mass; ties go to the lower index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Neumaier-compensated sum.
fn exact_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Class index (1-based, unpadded) whose interval contains `score`.
/// The lower range bound −0.5 falls into class 1.
pub fn quantize(score: QualityScore, cfg: &QuantizerConfig) -> usize {
    let s = score.value();
    let n = cfg.n_classes;
    let guess = (((s - SCORE_MIN) / cfg.step()).ceil() as usize).clamp(1, n);
    let mut class = guess;
    while class > 1 && s <= cfg.edge(class - 1) {
        class -= 1;
    }
    while class < n && s > cfg.edge(class) {
        class += 1;
    }
    class
}

/// One-hot distribution at unpadded class `class`.
pub fn one_hot(class: usize, cfg: &QuantizerConfig) -> Result<LabelDistribution> {
    cfg.check_class(class)?;
    let mut probs = vec![0.0; cfg.n_total()];
    probs[class - 1 + cfg.pad] = 1.0;
    Ok(LabelDistribution { probs })
}

/// Five-class triangular soft label centred on unpadded class `class`.
/// Needs `pad ≥ 2` so the support never leaves the vector.
pub fn soft_label(class: usize, cfg: &QuantizerConfig) -> Result<LabelDistribution> {
    if cfg.pad < 2 {
        return Err(Error::InsufficientPadding(cfg.pad));
    }
    cfg.check_class(class)?;
    let mut probs = vec![0.0; cfg.n_total()];
    let centre = class - 1 + cfg.pad;
    for (offset, &mass) in SOFT_KERNEL.iter().enumerate() {
        probs[centre + offset - 2] = mass;
    }
    Ok(LabelDistribution { probs })
}

/// Midpoint of the most probable class, clamped to the score range.
pub fn decode_max(p: &LabelDistribution, cfg: &QuantizerConfig) -> QualityScore {
    QualityScore::clamped(cfg.midpoint(p.argmax()))
}

/// Expected class midpoint under `p`, clamped to the score range.
pub fn decode_expect(p: &LabelDistribution, cfg: &QuantizerConfig) -> QualityScore {
    let value = p
        .probs()
        .iter()
        .enumerate()
        .map(|(i, &q)| q * cfg.midpoint(i))
        .sum();
    QualityScore::clamped(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(n: usize, pad: usize) -> QuantizerConfig {
        QuantizerConfig::new(n, pad).unwrap()
    }

    fn score(v: f64) -> QualityScore {
        QualityScore::new(v).unwrap()
    }

    #[test]
    fn step_times_classes_is_range() {
        for n in [1, 3, 7, 20, 100, 500] {
            assert!((q(n, 0).step() * n as f64 - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn quantize_examples() {
        let c = q(100, 0);
        assert_eq!(quantize(score(2.49), &c), 60);
        assert_eq!(quantize(score(2.5), &c), 60);
        assert_eq!(quantize(score(2.5000001), &c), 61);
        assert_eq!(quantize(score(4.5), &c), 100);
        assert_eq!(quantize(score(-0.5), &c), 1);
        assert!(QualityScore::new(4.6).is_err());
        assert!(QualityScore::new(-0.51).is_err());
    }

    #[test]
    fn one_hot_examples() {
        let c = q(5, 0);
        assert_eq!(one_hot(3, &c).unwrap().probs(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(one_hot(1, &c).unwrap().probs(), &[1.0, 0.0, 0.0, 0.0, 0.0]);
        for v in 1..=5 {
            assert_eq!(one_hot(v, &c).unwrap().total(), 1.0);
        }
        assert!(one_hot(0, &c).is_err());
        assert!(one_hot(6, &c).is_err());
    }

    #[test]
    fn soft_label_examples() {
        let c = q(10, 2);
        let p = soft_label(5, &c).unwrap();
        assert_eq!(p.len(), 14);
        let mut expected = vec![0.0; 14];
        expected[4..9].copy_from_slice(&SOFT_KERNEL);
        assert_eq!(p.probs(), expected.as_slice());
        assert_eq!(p.argmax(), 6);

        let low = soft_label(1, &c).unwrap();
        assert_eq!(&low.probs()[..5], &SOFT_KERNEL);
        assert_eq!(low.total(), 1.0);
        assert!(matches!(
            soft_label(3, &q(10, 1)),
            Err(Error::InsufficientPadding(1))
        ));
    }

    #[test]
    fn decoder_examples() {
        let c = q(100, 0);
        let p = one_hot(50, &c).unwrap();
        assert!((decode_max(&p, &c).value() - 1.975).abs() < 1e-12);
        assert!((decode_expect(&p, &c).value() - 1.975).abs() < 1e-12);

        let c5 = q(5, 0);
        assert_eq!(decode_max(&one_hot(1, &c5).unwrap(), &c5).value(), 0.0);

        let c4 = q(4, 0);
        let u = LabelDistribution::uniform(4);
        assert!((decode_max(&u, &c4).value() - 0.125).abs() < 1e-12);
        assert!((decode_expect(&u, &c4).value() - 2.0).abs() < 1e-12);

        let c2 = q(2, 0);
        let p = LabelDistribution::new(vec![0.25, 0.75]).unwrap();
        assert!((decode_expect(&p, &c2).value() - 2.625).abs() < 1e-12);
    }

    #[test]
    fn padded_decoding_clamps() {
        let c = q(10, 2);
        let p = one_hot(1, &c).unwrap();
        assert!((decode_max(&p, &c).value() + 0.25).abs() < 1e-12);
        let mut pad_mass = vec![0.0; 14];
        pad_mass[0] = 1.0;
        let p = LabelDistribution::new(pad_mass).unwrap();
        assert_eq!(decode_max(&p, &c).value(), -0.5);
        assert_eq!(decode_expect(&p, &c).value(), -0.5);
    }

    #[test]
    fn soft_label_expectation_is_centred_or_bounded() {
        let c = q(10, 2);
        for v in 1..=10 {
            let p = soft_label(v, &c).unwrap();
            let mid = c.midpoint(v - 1 + 2);
            let diff = (decode_expect(&p, &c).value() - mid).abs();
            if (3..=8).contains(&v) {
                assert!(diff < 1e-12);
            } else {
                assert!(diff <= 2.0 * c.step());
            }
        }
    }

    #[test]
    fn distribution_validation() {
        assert!(LabelDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(LabelDistribution::new(vec![-0.1, 1.1]).is_err());
        assert!(LabelDistribution::from_weights(vec![0.0, 0.0]).is_err());
        let p = LabelDistribution::from_weights(vec![1.0, 3.0]).unwrap();
        assert_eq!(p.probs(), &[0.25, 0.75]);
    }

    proptest! {
        #[test]
        fn quantize_decode_within_half_step(s in -0.5f64..=4.5, n in 1usize..600) {
            let c = q(n, 0);
            let class = quantize(score(s), &c);
            prop_assert!(s > c.edge(class - 1) || class == 1);
            prop_assert!(s <= c.edge(class));
            let back = decode_max(&one_hot(class, &c).unwrap(), &c).value();
            prop_assert!((back - s).abs() <= c.step() / 2.0 + 1e-12);
        }

        #[test]
        fn expectation_monotone_under_upward_shift(
            weights in proptest::collection::vec(0.01f64..1.0, 2..30),
            from_frac in 0.0f64..1.0,
            amount in 0.0f64..1.0,
        ) {
            let n = weights.len();
            let c = q(n, 0);
            let p = LabelDistribution::from_weights(weights).unwrap();
            let from = ((from_frac * (n - 1) as f64) as usize).min(n - 2);
            let mut shifted = p.probs().to_vec();
            let moved = shifted[from] * amount;
            shifted[from] -= moved;
            shifted[from + 1] += moved;
            let shifted = LabelDistribution::from_weights(shifted).unwrap();
            prop_assert!(decode_expect(&shifted, &c).value() >= decode_expect(&p, &c).value() - 1e-12);
        }
    }
}
