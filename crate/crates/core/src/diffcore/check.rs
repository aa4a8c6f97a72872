use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// (input index, flat coordinate) where the maximum was observed
    pub worst: (usize, usize),
    /// (analytic, numeric) derivative at `worst`
    pub worst_values: (f64, f64),
    pub coordinates: usize,
    /// coordinates whose error reached `tol`
    pub failures: usize,
    pub passed: bool,
}

/// Relative error used throughout: `|a − d| / max(|a|, |d|, 1e−8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Builds `f` on fresh graphs and compares its reverse-mode gradient with
/// central differences for every coordinate of every input.
///
/// Non-scalar outputs are reduced to a scalar by a fixed pseudo-random
/// projection, so every output coordinate contributes to the check.
pub fn gradient_check<F>(f: F, inputs: &[Tensor<f64>], step: f64, tol: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>], with_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let loss = if g.value(out).is_scalar() {
            out
        } else {
            let shape = g.shape(out).to_vec();
            let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
            let w: Vec<f64> = (0..g.value(out).len())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let w = g.constant(Tensor::new(shape, w)?);
            let prod = g.mul(out, w)?;
            g.sum(prod)?
        };
        let value = g.value(loss).item();
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?;
        Ok((value, vars.iter().map(|&v| grads.get(v)).collect()))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut probe = inputs.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        worst_values: (0.0, 0.0),
        coordinates: 0,
        failures: 0,
        passed: true,
    };
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].values()[j];
            probe[i].values_mut()[j] = orig + step;
            let (plus, _) = eval(&probe, false)?;
            probe[i].values_mut()[j] = orig - step;
            let (minus, _) = eval(&probe, false)?;
            probe[i].values_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(grad[j], numeric);
            report.coordinates += 1;
            if err >= tol {
                report.failures += 1;
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
                report.worst_values = (grad[j], numeric);
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}

/// Moves values that sit within `margin` of `point` to `point ± margin`,
/// keeping finite differences away from kinks.
pub fn nudge_away(values: &mut [f64], point: f64, margin: f64) {
    for v in values {
        if (*v - point).abs() < margin {
            *v = if *v >= point {
                point + margin
            } else {
                point - margin
            };
        }
    }
}
