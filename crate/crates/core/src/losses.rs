//! Training criteria: squared earth mover's distance between ordered class
//! distributions, zero-mean time-domain squared error, their weighted sum,
//! and an optional pairwise ranking surrogate.
//!
//! Each criterion exists twice: a plain `f64` function for evaluation and a
//! differentiable [`Graph`] op for training.

use crate::diffcore::{Backward, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::labels::LabelDistribution;
use crate::signal::Waveform;

fn check_len(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::LengthMismatch { left: a, right: b })
    }
}

/// `Σₙ (P̂ₙ − Pₙ)²` over the running prefix sums of the two distributions.
pub fn emd2(pred: &LabelDistribution, target: &LabelDistribution) -> Result<f64> {
    check_len(pred.len(), target.len())?;
    Ok(emd2_slices(pred.probs(), target.probs()))
}

fn emd2_slices<T: Real>(pred: &[T], target: &[T]) -> T {
    let mut cdf = T::zero();
    let mut total = T::zero();
    for (&p, &q) in pred.iter().zip(target) {
        cdf = cdf + p - q;
        total = total + cdf * cdf;
    }
    total
}

fn centred_diff<T: Real>(est: &[T], target: &[T]) -> Vec<T> {
    let n = T::of(est.len() as f64);
    let me = est.iter().copied().sum::<T>() / n;
    let mt = target.iter().copied().sum::<T>() / n;
    est.iter()
        .zip(target)
        .map(|(&e, &t)| (e - me) - (t - mt))
        .collect()
}

/// `‖(x − mean x) − (x̂ − mean x̂)‖²`, a sum rather than a mean.
pub fn td_mse(estimate: &Waveform, target: &Waveform) -> Result<f64> {
    check_len(estimate.len(), target.len())?;
    Ok(centred_diff(estimate.samples(), target.samples())
        .iter()
        .map(|d| d * d)
        .sum())
}

/// `λ·td_mse + emd2`; `λ = 1` is the plain sum.
pub fn joint_loss(
    estimate: &Waveform,
    target: &Waveform,
    pred: &LabelDistribution,
    label: &LabelDistribution,
    lambda: f64,
) -> Result<f64> {
    let recon = if lambda == 0.0 {
        0.0
    } else {
        lambda * td_mse(estimate, target)?
    };
    Ok(recon + emd2(pred, label)?)
}

/// Numerically stable `ln(1 + eᶻ)`.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn ordered_pairs<T: Real>(truth: &[T]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..truth.len() {
        for j in 0..truth.len() {
            if truth[i] > truth[j] {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Mean over pairs with `truth_i > truth_j` of `softplus(−(pred_i − pred_j))`.
/// Zero when no pair is strictly ordered.
pub fn rank_loss(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_len(pred.len(), truth.len())?;
    if pred.len() < 2 {
        return Err(Error::TooFewItems {
            needed: 2,
            got: pred.len(),
        });
    }
    let pairs = ordered_pairs(truth);
    if pairs.is_empty() {
        return Ok(0.0);
    }
    Ok(pairs
        .iter()
        .map(|&(i, j)| softplus(-(pred[i] - pred[j])))
        .sum::<f64>()
        / pairs.len() as f64)
}

// ---------------------------------------------------------------------------
// differentiable versions

struct Emd2Op;

impl<T: Real> Backward<T> for Emd2Op {
    fn name(&self) -> &'static str {
        "emd2"
    }

    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let k = x[0].shape()[1];
        let (p, q) = (x[0].values(), x[1].values());
        let mut gp = vec![T::zero(); p.len()];
        let two = T::of(2.0);
        for (b, &gb) in g.iter().enumerate() {
            let row = b * k..(b + 1) * k;
            let mut cdf = T::zero();
            let diffs: Vec<T> = p[row.clone()]
                .iter()
                .zip(&q[row.clone()])
                .map(|(&a, &c)| {
                    cdf = cdf + a - c;
                    cdf
                })
                .collect();
            // d/dp_m = Σ_{n ≥ m} 2·D_n
            let mut tail = T::zero();
            for m in (0..k).rev() {
                tail = tail + two * diffs[m];
                gp[b * k + m] = gb * tail;
            }
        }
        let gq = needs[1].then(|| gp.iter().map(|&v| -v).collect());
        vec![needs[0].then_some(gp), gq]
    }
}

struct TdMseOp;

impl<T: Real> Backward<T> for TdMseOp {
    fn name(&self) -> &'static str {
        "td_mse"
    }

    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let len = x[0].shape()[1];
        let two = T::of(2.0);
        let mut ge = Vec::with_capacity(x[0].len());
        for (b, &gb) in g.iter().enumerate() {
            let row = b * len..(b + 1) * len;
            let d = centred_diff(&x[0].values()[row.clone()], &x[1].values()[row]);
            // the centred difference already has zero mean, so the projection is a no-op
            ge.extend(d.into_iter().map(|v| two * gb * v));
        }
        let gt = needs[1].then(|| ge.iter().map(|&v| -v).collect());
        vec![needs[0].then_some(ge), gt]
    }
}

struct RankLossOp<T> {
    pairs: Vec<(usize, usize)>,
    truth_len: usize,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Real> Backward<T> for RankLossOp<T> {
    fn name(&self) -> &'static str {
        "rank_loss"
    }

    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        _: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let pred = x[0].values();
        let mut gp = vec![T::zero(); self.truth_len];
        if self.pairs.is_empty() {
            return vec![Some(gp)];
        }
        let scale = g[0] / T::of(self.pairs.len() as f64);
        for &(i, j) in &self.pairs {
            // d softplus(−z)/dz = −sigmoid(−z)
            let z = pred[i] - pred[j];
            let s = T::one() / (T::one() + z.exp());
            gp[i] = gp[i] - scale * s;
            gp[j] = gp[j] + scale * s;
        }
        vec![Some(gp)]
    }
}

impl<T: Real> Graph<T> {
    /// Per-item EMD²: `[n, k] × [n, k] → [n]`.
    pub fn emd2(&mut self, pred: Var, target: Var) -> Result<Var> {
        let shape = self.shape(pred).to_vec();
        let [n, k] = shape[..] else {
            return Err(Error::shape(
                "emd2",
                format!("expected [n, k], got {shape:?}"),
            ));
        };
        if self.shape(target) != shape.as_slice() {
            return Err(Error::shape("emd2", "prediction and target shapes differ"));
        }
        let (p, q) = (self.value(pred).values(), self.value(target).values());
        let out: Vec<T> = (0..n)
            .map(|b| emd2_slices(&p[b * k..(b + 1) * k], &q[b * k..(b + 1) * k]))
            .collect();
        self.push_op(
            Tensor::new(vec![n], out)?,
            vec![pred, target],
            Box::new(Emd2Op),
        )
    }

    /// Per-item zero-mean squared error: `[n, len] × [n, len] → [n]`.
    pub fn td_mse(&mut self, estimate: Var, target: Var) -> Result<Var> {
        let shape = self.shape(estimate).to_vec();
        let [n, len] = shape[..] else {
            return Err(Error::shape(
                "td_mse",
                format!("expected [n, len], got {shape:?}"),
            ));
        };
        if self.shape(target) != shape.as_slice() {
            let t = self.shape(target);
            return Err(Error::LengthMismatch {
                left: len,
                right: t.get(1).copied().unwrap_or(0),
            });
        }
        let (e, t) = (self.value(estimate).values(), self.value(target).values());
        let out: Vec<T> = (0..n)
            .map(|b| {
                let r = b * len..(b + 1) * len;
                centred_diff(&e[r.clone()], &t[r])
                    .iter()
                    .map(|&d| d * d)
                    .sum()
            })
            .collect();
        self.push_op(
            Tensor::new(vec![n], out)?,
            vec![estimate, target],
            Box::new(TdMseOp),
        )
    }

    /// Pairwise ranking surrogate over a batch of predicted scores `[n]`.
    pub fn rank_loss(&mut self, pred: Var, truth: &[T]) -> Result<Var> {
        let n = self.value(pred).len();
        check_len(n, truth.len())?;
        if n < 2 {
            return Err(Error::TooFewItems { needed: 2, got: n });
        }
        let pairs = ordered_pairs(truth);
        let p = self.value(pred).values();
        let value = if pairs.is_empty() {
            T::zero()
        } else {
            pairs
                .iter()
                .map(|&(i, j)| T::of(softplus(-(p[i] - p[j]).as_f64())))
                .sum::<T>()
                / T::of(pairs.len() as f64)
        };
        let op = RankLossOp {
            pairs,
            truth_len: n,
            _marker: std::marker::PhantomData,
        };
        self.push_op(Tensor::scalar(value), vec![pred], Box::new(op))
    }
}
