//! Agreement statistics between predicted and reference quality scores.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pair(pred: &[f64], truth: &[f64], min: usize) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.len() < min {
        return Err(Error::TooFewItems {
            needed: min,
            got: pred.len(),
        });
    }
    Ok(())
}

pub fn mse_metric(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth, 1)?;
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / pred.len() as f64)
}

pub fn mae_metric(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth, 1)?;
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// Pearson linear correlation coefficient.
pub fn lcc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth, 2)?;
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = truth.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        let (dp, dt) = (p - mp, t - mt);
        sxy += dp * dt;
        sxx += dp * dp;
        syy += dt * dt;
    }
    if sxx == 0.0 {
        return Err(Error::UndefinedCorrelation("prediction vector is constant"));
    }
    if syy == 0.0 {
        return Err(Error::UndefinedCorrelation("reference vector is constant"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn srcc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth, 2)?;
    lcc(&average_ranks(pred), &average_ranks(truth))
}

/// MSE, LCC and SRCC over one evaluation set. Correlations are `None` when
/// undefined (fewer than two items or a constant vector).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub mse: f64,
    pub lcc: Option<f64>,
    pub srcc: Option<f64>,
}

impl EvalReport {
    pub fn compute(pred: &[f64], truth: &[f64]) -> Result<Self> {
        let mse = mse_metric(pred, truth)?;
        let defined = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedCorrelation(_) | Error::TooFewItems { .. }) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(Self {
            n: pred.len(),
            mse,
            lcc: defined(lcc(pred, truth))?,
            srcc: defined(srcc(pred, truth))?,
        })
    }
}

impl fmt::Display for EvalReport {
    /// Flat `key=value` record.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"));
        write!(
            f,
            "n={} mse={:.6} lcc={} srcc={}",
            self.n,
            self.mse,
            opt(self.lcc),
            opt(self.srcc)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mse_examples() {
        let t = [1.0, 2.5, 3.0];
        assert_eq!(mse_metric(&t, &t).unwrap(), 0.0);
        let shifted: Vec<f64> = t.iter().map(|v| v + 0.1).collect();
        assert!((mse_metric(&shifted, &t).unwrap() - 0.01).abs() < 1e-15);
        assert!(mse_metric(&t, &t[..2]).is_err());
    }

    #[test]
    fn lcc_examples() {
        let t = [1.0, 2.0, 3.0, 4.0];
        let affine: Vec<f64> = t.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((lcc(&affine, &t).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        assert!((lcc(&neg, &t).unwrap() + 1.0).abs() < 1e-15);
        assert!((lcc(&[1.0, 3.0, 2.0, 4.0], &t).unwrap() - 0.8).abs() < 1e-15);
        assert!(matches!(
            lcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn srcc_examples() {
        let t = [0.3, 1.0, 2.2, 4.1];
        let e: Vec<f64> = t.iter().map(|v: &f64| v.exp()).collect();
        assert!((srcc(&e, &t).unwrap() - 1.0).abs() < 1e-15);
        let rev = [4.1, 2.2, 1.0, 0.3];
        assert!((srcc(&rev, &t).unwrap() + 1.0).abs() < 1e-15);
        assert!((srcc(&[1.0, 3.0, 2.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(
            average_ranks(&[10.0, 20.0, 10.0, 30.0]),
            vec![1.5, 3.0, 1.5, 4.0]
        );
        assert_eq!(average_ranks(&[5.0, 5.0, 5.0]), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn report_handles_single_item() {
        let r = EvalReport::compute(&[2.0], &[2.5]).unwrap();
        assert_eq!(r.n, 1);
        assert!((r.mse - 0.25).abs() < 1e-15);
        assert_eq!((r.lcc, r.srcc), (None, None));
        let text = r.to_string();
        assert!(text.contains("lcc=undefined") && text.contains("srcc=undefined"));
    }

    proptest! {
        #[test]
        fn srcc_invariant_under_monotone_maps(
            x in proptest::collection::vec(-5.0f64..5.0, 3..30),
            seed in 0u64..1000,
            a in 0.1f64..3.0,
            b in -2.0f64..2.0,
        ) {
            let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v.sin() + ((i as u64 * 7 + seed) % 11) as f64).collect();
            let base = srcc(&x, &y);
            let mapped: Vec<f64> = x.iter().map(|v| (a * v + b).exp() + v.powi(3)).collect();
            match base {
                Ok(r) => prop_assert!((srcc(&mapped, &y).unwrap() - r).abs() < 1e-12),
                Err(_) => prop_assert!(srcc(&mapped, &y).is_err()),
            }
        }

        #[test]
        fn lcc_invariant_under_positive_affine_maps(
            x in proptest::collection::vec(-5.0f64..5.0, 3..30),
            a in 0.1f64..10.0,
            b in -5.0f64..5.0,
        ) {
            let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v * 0.5 + (i as f64).cos()).collect();
            if let Ok(r) = lcc(&x, &y) {
                let mapped: Vec<f64> = x.iter().map(|v| a * v + b).collect();
                prop_assert!((lcc(&mapped, &y).unwrap() - r).abs() < 1e-9);
            }
        }
    }
}
