//! Differentiable primitives used by the network.
//!
//! Activations use a `[batch, channels, frames]` layout. Complex spectrograms
//! are stored as `[batch, 2, bins, frames]` with the real part at index 0 of
//! the second axis and the imaginary part at index 1.

use super::graph::{Backward, Graph, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

fn dims3(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match *shape {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::shape(
            op,
            format!("expected a 3-D tensor, got {shape:?}"),
        )),
    }
}

fn expect_shape(actual: &[usize], expected: &[usize], op: &'static str) -> Result<()> {
    if actual == expected {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!("expected {expected:?}, got {actual:?}"),
        ))
    }
}

// ---------------------------------------------------------------------------
// elementwise and reductions

struct AddOp;

impl<T: Real> Backward<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(
        &self,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        _: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec()), Some(g.to_vec())]
    }
}

struct MulOp;

impl<T: Real> Backward<T> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (a, b) = (x[0].values(), x[1].values());
        let ga = needs[0].then(|| g.iter().zip(b).map(|(&g, &b)| g * b).collect());
        let gb = needs[1].then(|| g.iter().zip(a).map(|(&g, &a)| g * a).collect());
        vec![ga, gb]
    }
}

struct ScaleOp<T>(T);

impl<T: Real> Backward<T> for ScaleOp<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(
        &self,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        _: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        vec![Some(g.iter().map(|&g| g * self.0).collect())]
    }
}

struct SumOp;

impl<T: Real> Backward<T> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        _: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![g[0]; x[0].len()])]
    }
}

struct MeanOp;

impl<T: Real> Backward<T> for MeanOp {
    fn name(&self) -> &'static str {
        "mean"
    }

    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        _: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let n = T::of(x[0].len() as f64);
        vec![Some(vec![g[0] / n; x[0].len()])]
    }
}

struct MseOp;

impl<T: Real> Backward<T> for MseOp {
    fn name(&self) -> &'static str {
        "mse_reduction"
    }

    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let n = T::of(x[0].len() as f64);
        let scale = T::of(2.0) * g[0] / n;
        let d: Vec<T> = x[0]
            .values()
            .iter()
            .zip(x[1].values())
            .map(|(&a, &b)| scale * (a - b))
            .collect();
        let gb = needs[1].then(|| d.iter().map(|&v| -v).collect());
        vec![needs[0].then_some(d), gb]
    }
}

struct LogOp<T> {
    floor: T,
}

impl<T: Real> Backward<T> for LogOp<T> {
    fn name(&self) -> &'static str {
        "log"
    }

    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        _: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let gx = x[0]
            .values()
            .iter()
            .zip(g)
            .map(|(&v, &g)| if v > self.floor { g / v } else { T::zero() })
            .collect();
        vec![Some(gx)]
    }
}

// ---------------------------------------------------------------------------
// convolutions

struct PointwiseConvOp;

impl<T: Real> Backward<T> for PointwiseConvOp {
    fn name(&self) -> &'static str {
        "conv1d_pointwise"
    }

    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (n, cin, t) = (x[0].shape()[0], x[0].shape()[1], x[0].shape()[2]);
        let cout = x[1].shape()[0];
        let (input, w) = (x[0].values(), x[1].values());

        let gx = needs[0].then(|| {
            let mut gx = vec![T::zero(); input.len()];
            for b in 0..n {
                for o in 0..cout {
                    let grow = &g[(b * cout + o) * t..(b * cout + o + 1) * t];
                    for i in 0..cin {
                        let wv = w[o * cin + i];
                        let dst = &mut gx[(b * cin + i) * t..(b * cin + i + 1) * t];
                        for (d, &gv) in dst.iter_mut().zip(grow) {
                            *d = *d + wv * gv;
                        }
                    }
                }
            }
            gx
        });
        let gw = needs[1].then(|| {
            let mut gw = vec![T::zero(); w.len()];
            for b in 0..n {
                for o in 0..cout {
                    let grow = &g[(b * cout + o) * t..(b * cout + o + 1) * t];
                    for i in 0..cin {
                        let xrow = &input[(b * cin + i) * t..(b * cin + i + 1) * t];
                        let acc: T = grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum();
                        gw[o * cin + i] = gw[o * cin + i] + acc;
                    }
                }
            }
            gw
        });
        let gb = needs[2].then(|| {
            let mut gb = vec![T::zero(); cout];
            for b in 0..n {
                for (o, acc) in gb.iter_mut().enumerate() {
                    let s: T = g[(b * cout + o) * t..(b * cout + o + 1) * t]
                        .iter()
                        .copied()
                        .sum();
                    *acc = *acc + s;
                }
            }
            gb
        });
        vec![gx, gw, gb]
    }
}

struct DepthwiseConvOp {
    dilation: usize,
}

impl DepthwiseConvOp {
    /// Input frame read by output frame `out` through tap `k`, if in range.
    fn source(&self, out: usize, k: usize, kernel: usize, frames: usize) -> Option<usize> {
        let offset = (k as isize - (kernel as isize - 1) / 2) * self.dilation as isize;
        let src = out as isize + offset;
        (src >= 0 && (src as usize) < frames).then_some(src as usize)
    }
}

impl<T: Real> Backward<T> for DepthwiseConvOp {
    fn name(&self) -> &'static str {
        "conv1d_depthwise_dilated"
    }

    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (n, c, t) = (x[0].shape()[0], x[0].shape()[1], x[0].shape()[2]);
        let kernel = x[1].shape()[1];
        let (input, w) = (x[0].values(), x[1].values());
        let mut gx = vec![T::zero(); if needs[0] { input.len() } else { 0 }];
        let mut gw = vec![T::zero(); w.len()];
        let mut gb = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * t;
                for out in 0..t {
                    let gv = g[base + out];
                    gb[ch] = gb[ch] + gv;
                    for k in 0..kernel {
                        if let Some(src) = self.source(out, k, kernel, t) {
                            gw[ch * kernel + k] = gw[ch * kernel + k] + gv * input[base + src];
                            if needs[0] {
                                gx[base + src] = gx[base + src] + gv * w[ch * kernel + k];
                            }
                        }
                    }
                }
            }
        }
        vec![
            needs[0].then_some(gx),
            needs[1].then_some(gw),
            needs[2].then_some(gb),
        ]
    }
}

// ---------------------------------------------------------------------------
// activations and normalization

struct PreluOp;

impl<T: Real> Backward<T> for PreluOp {
    fn name(&self) -> &'static str {
        "prelu"
    }

    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (n, c, t) = (x[0].shape()[0], x[0].shape()[1], x[0].shape()[2]);
        let (input, slope) = (x[0].values(), x[1].values());
        let mut gx = vec![T::zero(); input.len()];
        let mut ga = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * t..(b * c + ch + 1) * t {
                    if input[i] > T::zero() {
                        gx[i] = g[i];
                    } else {
                        gx[i] = g[i] * slope[ch];
                        ga[ch] = ga[ch] + g[i] * input[i];
                    }
                }
            }
        }
        vec![needs[0].then_some(gx), needs[1].then_some(ga)]
    }
}

/// Batch-normalization mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Per-channel statistics measured by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Normalization over groups of elements sharing one mean and variance,
/// followed by a per-channel affine map. Shared by batch norm (train mode)
/// and global layer norm; they only differ in how elements are grouped.
struct GroupNormOp<T> {
    name: &'static str,
    /// group index of every element
    groups: Vec<usize>,
    inv_std: Vec<T>,
    normalized: Vec<T>,
    group_sizes: Vec<usize>,
}

impl<T: Real> Backward<T> for GroupNormOp<T> {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (n, c, t) = (x[0].shape()[0], x[0].shape()[1], x[0].shape()[2]);
        let gamma = x[1].values();
        let mut ggamma = vec![T::zero(); c];
        let mut gbeta = vec![T::zero(); c];
        let mut dxhat = vec![T::zero(); g.len()];
        let mut sum_d = vec![T::zero(); self.group_sizes.len()];
        let mut sum_dx = vec![T::zero(); self.group_sizes.len()];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * t..(b * c + ch + 1) * t {
                    ggamma[ch] = ggamma[ch] + g[i] * self.normalized[i];
                    gbeta[ch] = gbeta[ch] + g[i];
                    let d = g[i] * gamma[ch];
                    dxhat[i] = d;
                    let grp = self.groups[i];
                    sum_d[grp] = sum_d[grp] + d;
                    sum_dx[grp] = sum_dx[grp] + d * self.normalized[i];
                }
            }
        }
        let gx = needs[0].then(|| {
            (0..g.len())
                .map(|i| {
                    let grp = self.groups[i];
                    let m = T::of(self.group_sizes[grp] as f64);
                    self.inv_std[grp] / m
                        * (m * dxhat[i] - sum_d[grp] - self.normalized[i] * sum_dx[grp])
                })
                .collect()
        });
        vec![gx, needs[1].then_some(ggamma), needs[2].then_some(gbeta)]
    }
}

/// Eval-mode batch norm: a fixed per-channel affine map.
struct FrozenNormOp<T> {
    mean: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Real> Backward<T> for FrozenNormOp<T> {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (n, c, t) = (x[0].shape()[0], x[0].shape()[1], x[0].shape()[2]);
        let (input, gamma) = (x[0].values(), x[1].values());
        let mut gx = vec![T::zero(); input.len()];
        let mut ggamma = vec![T::zero(); c];
        let mut gbeta = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * t..(b * c + ch + 1) * t {
                    let xhat = (input[i] - self.mean[ch]) * self.inv_std[ch];
                    gx[i] = g[i] * gamma[ch] * self.inv_std[ch];
                    ggamma[ch] = ggamma[ch] + g[i] * xhat;
                    gbeta[ch] = gbeta[ch] + g[i];
                }
            }
        }
        vec![
            needs[0].then_some(gx),
            needs[1].then_some(ggamma),
            needs[2].then_some(gbeta),
        ]
    }
}

struct SoftmaxOp;

impl<T: Real> Backward<T> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(
        &self,
        _: &[&Tensor<T>],
        y: &Tensor<T>,
        g: &[T],
        _: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let k = *y.shape().last().unwrap();
        let mut gx = vec![T::zero(); g.len()];
        for ((yr, gr), dst) in y.values().chunks(k).zip(g.chunks(k)).zip(gx.chunks_mut(k)) {
            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
                *d = yv * (gv - dot);
            }
        }
        vec![Some(gx)]
    }
}

struct MeanFramesOp;

impl<T: Real> Backward<T> for MeanFramesOp {
    fn name(&self) -> &'static str {
        "mean_over_frames"
    }

    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        _: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let t = x[0].shape()[2];
        let inv = T::one() / T::of(t as f64);
        let gx = g
            .iter()
            .flat_map(|&gv| std::iter::repeat_n(gv * inv, t))
            .collect();
        vec![Some(gx)]
    }
}

struct WeightedSumOp<T> {
    weights: Vec<T>,
}

impl<T: Real> Backward<T> for WeightedSumOp<T> {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn backward(
        &self,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        _: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let gx = g
            .iter()
            .flat_map(|&gv| self.weights.iter().map(move |&w| gv * w))
            .collect();
        vec![Some(gx)]
    }
}

// ---------------------------------------------------------------------------
// complex spectrogram ops

struct ComplexMaskOp;

impl<T: Real> Backward<T> for ComplexMaskOp {
    fn name(&self) -> &'static str {
        "complex_mask_apply"
    }

    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (n, f, t) = (x[0].shape()[0], x[0].shape()[1], x[0].shape()[2]);
        let plane = f * t;
        let (mre, mim, spec) = (x[0].values(), x[1].values(), x[2].values());
        let mut gre = vec![T::zero(); mre.len()];
        let mut gim = vec![T::zero(); mim.len()];
        let mut gspec = vec![T::zero(); spec.len()];
        for b in 0..n {
            for i in 0..plane {
                let m = b * plane + i;
                let (sr, si) = (b * 2 * plane + i, b * 2 * plane + plane + i);
                let (gr, gi) = (g[sr], g[si]);
                // out_re = a·yr − c·yi, out_im = a·yi + c·yr
                gre[m] = gr * spec[sr] + gi * spec[si];
                gim[m] = -gr * spec[si] + gi * spec[sr];
                gspec[sr] = gr * mre[m] + gi * mim[m];
                gspec[si] = -gr * mim[m] + gi * mre[m];
            }
        }
        vec![
            needs[0].then_some(gre),
            needs[1].then_some(gim),
            needs[2].then_some(gspec),
        ]
    }
}

struct AbsSquaredOp;

impl<T: Real> Backward<T> for AbsSquaredOp {
    fn name(&self) -> &'static str {
        "abs_squared"
    }

    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        _: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let s = x[0].shape();
        let plane = s[2] * s[3];
        let spec = x[0].values();
        let mut gx = vec![T::zero(); spec.len()];
        let two = T::of(2.0);
        for b in 0..s[0] {
            for i in 0..plane {
                let (r, im) = (b * 2 * plane + i, b * 2 * plane + plane + i);
                let gv = g[b * plane + i];
                gx[r] = two * spec[r] * gv;
                gx[im] = two * spec[im] * gv;
            }
        }
        vec![Some(gx)]
    }
}

// ---------------------------------------------------------------------------
// graph builders

impl<T: Real> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        expect_shape(self.shape(b), self.shape(a), "add")?;
        let vals = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), vals)?;
        self.push_op(out, vec![a, b], Box::new(AddOp))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        expect_shape(self.shape(b), self.shape(a), "mul")?;
        let vals = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), vals)?;
        self.push_op(out, vec![a, b], Box::new(MulOp))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let vals = self.value(a).values().iter().map(|&x| x * factor).collect();
        let out = Tensor::new(self.shape(a).to_vec(), vals)?;
        self.push_op(out, vec![a], Box::new(ScaleOp(factor)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).values().iter().copied().sum();
        self.push_op(Tensor::scalar(s), vec![a], Box::new(SumOp))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s: T = v.values().iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.push_op(Tensor::scalar(s), vec![a], Box::new(MeanOp))
    }

    /// Mean of squared differences.
    pub fn mse_reduction(&mut self, a: Var, b: Var) -> Result<Var> {
        expect_shape(self.shape(b), self.shape(a), "mse_reduction")?;
        let (x, y) = (self.value(a), self.value(b));
        if x.is_empty() {
            return Err(Error::shape("mse_reduction", "empty tensor"));
        }
        let s: T = x
            .values()
            .iter()
            .zip(y.values())
            .map(|(&p, &q)| (p - q) * (p - q))
            .sum::<T>()
            / T::of(x.len() as f64);
        self.push_op(Tensor::scalar(s), vec![a, b], Box::new(MseOp))
    }

    /// Natural log with a lower floor: `ln(max(x, floor))`.
    pub fn log(&mut self, a: Var, floor: T) -> Result<Var> {
        self.check_finite_input(a, "log")?;
        let vals = self
            .value(a)
            .values()
            .iter()
            .map(|&x| x.max(floor).ln())
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), vals)?;
        self.push_op(out, vec![a], Box::new(LogOp { floor }))
    }

    /// 1×1 convolution: `[n, cin, t] × [cout, cin] + [cout] → [n, cout, t]`.
    pub fn conv1d_pointwise(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        self.check_finite_input(x, "conv1d_pointwise")?;
        let (n, cin, t) = dims3(self.shape(x), "conv1d_pointwise")?;
        let cout = match *self.shape(weight) {
            [o, i] if i == cin => o,
            ref s => {
                return Err(Error::shape(
                    "conv1d_pointwise",
                    format!("weight {s:?} does not match {cin} input channels"),
                ))
            }
        };
        expect_shape(self.shape(bias), &[cout], "conv1d_pointwise")?;
        let (input, w, bv) = (
            self.value(x).values(),
            self.value(weight).values(),
            self.value(bias).values(),
        );
        let mut out = vec![T::zero(); n * cout * t];
        for b in 0..n {
            for o in 0..cout {
                let dst = &mut out[(b * cout + o) * t..(b * cout + o + 1) * t];
                dst.fill(bv[o]);
                for i in 0..cin {
                    let wv = w[o * cin + i];
                    let src = &input[(b * cin + i) * t..(b * cin + i + 1) * t];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + wv * s;
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, cout, t], out)?;
        self.push_op(out, vec![x, weight, bias], Box::new(PointwiseConvOp))
    }

    /// Per-channel dilated convolution with symmetric zero padding of
    /// `dilation·(kernel−1)/2` per side, so the frame count is preserved.
    pub fn conv1d_depthwise_dilated(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        dilation: usize,
    ) -> Result<Var> {
        self.check_finite_input(x, "conv1d_depthwise_dilated")?;
        let (n, c, t) = dims3(self.shape(x), "conv1d_depthwise_dilated")?;
        let kernel = match *self.shape(weight) {
            [ch, k] if ch == c && k % 2 == 1 => k,
            ref s => {
                return Err(Error::shape(
                    "conv1d_depthwise_dilated",
                    format!("weight {s:?} must be [{c}, odd kernel]"),
                ))
            }
        };
        if dilation == 0 {
            return Err(Error::shape(
                "conv1d_depthwise_dilated",
                "dilation must be ≥ 1",
            ));
        }
        expect_shape(self.shape(bias), &[c], "conv1d_depthwise_dilated")?;
        let op = DepthwiseConvOp { dilation };
        let (input, w, bv) = (
            self.value(x).values(),
            self.value(weight).values(),
            self.value(bias).values(),
        );
        let mut out = vec![T::zero(); input.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * t;
                for o in 0..t {
                    let mut acc = bv[ch];
                    for k in 0..kernel {
                        if let Some(src) = op.source(o, k, kernel, t) {
                            acc = acc + w[ch * kernel + k] * input[base + src];
                        }
                    }
                    out[base + o] = acc;
                }
            }
        }
        let out = Tensor::new(vec![n, c, t], out)?;
        self.push_op(out, vec![x, weight, bias], Box::new(op))
    }

    /// PReLU with one slope per channel.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        self.check_finite_input(x, "prelu")?;
        let (n, c, t) = dims3(self.shape(x), "prelu")?;
        expect_shape(self.shape(slope), &[c], "prelu")?;
        let (input, a) = (self.value(x).values(), self.value(slope).values());
        let mut out = vec![T::zero(); input.len()];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * t..(b * c + ch + 1) * t {
                    let v = input[i];
                    out[i] = if v > T::zero() { v } else { a[ch] * v };
                }
            }
        }
        let out = Tensor::new(vec![n, c, t], out)?;
        self.push_op(out, vec![x, slope], Box::new(PreluOp))
    }

    /// Per-channel batch normalization over (batch × frames).
    ///
    /// In [`NormMode::Train`] the batch statistics are used and returned so
    /// the caller can update running estimates. In [`NormMode::Eval`] the
    /// supplied running statistics are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        self.check_finite_input(x, "batch_norm")?;
        let (n, c, t) = dims3(self.shape(x), "batch_norm")?;
        expect_shape(self.shape(gamma), &[c], "batch_norm")?;
        expect_shape(self.shape(beta), &[c], "batch_norm")?;
        let input = self.value(x).values();
        let (g, bt) = (self.value(gamma).values(), self.value(beta).values());

        match mode {
            NormMode::Train => {
                let m = T::of((n * t) as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let s: T = input[(b * c + ch) * t..(b * c + ch + 1) * t]
                            .iter()
                            .copied()
                            .sum();
                        mean[ch] = mean[ch] + s;
                    }
                }
                mean.iter_mut().for_each(|v| *v = *v / m);
                for b in 0..n {
                    for ch in 0..c {
                        let s: T = input[(b * c + ch) * t..(b * c + ch + 1) * t]
                            .iter()
                            .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                            .sum();
                        var[ch] = var[ch] + s;
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / m);
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let mut groups = vec![0; input.len()];
                let mut normalized = vec![T::zero(); input.len()];
                let mut out = vec![T::zero(); input.len()];
                for b in 0..n {
                    for ch in 0..c {
                        for i in (b * c + ch) * t..(b * c + ch + 1) * t {
                            groups[i] = ch;
                            normalized[i] = (input[i] - mean[ch]) * inv_std[ch];
                            out[i] = g[ch] * normalized[i] + bt[ch];
                        }
                    }
                }
                let op = GroupNormOp {
                    name: "batch_norm",
                    groups,
                    inv_std,
                    normalized,
                    group_sizes: vec![n * t; c],
                };
                let out = Tensor::new(vec![n, c, t], out)?;
                let var_out = self.push_op(out, vec![x, gamma, beta], Box::new(op))?;
                Ok((var_out, Some(BatchStats { mean, var })))
            }
            NormMode::Eval => {
                let (rm, rv) = running.ok_or_else(|| {
                    Error::shape("batch_norm", "eval mode needs running statistics")
                })?;
                if rm.len() != c || rv.len() != c {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("running statistics must have {c} channels"),
                    ));
                }
                let inv_std: Vec<T> = rv.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let mut out = vec![T::zero(); input.len()];
                for b in 0..n {
                    for ch in 0..c {
                        for i in (b * c + ch) * t..(b * c + ch + 1) * t {
                            out[i] = g[ch] * (input[i] - rm[ch]) * inv_std[ch] + bt[ch];
                        }
                    }
                }
                let op = FrozenNormOp {
                    mean: rm.to_vec(),
                    inv_std,
                };
                let out = Tensor::new(vec![n, c, t], out)?;
                let var_out = self.push_op(out, vec![x, gamma, beta], Box::new(op))?;
                Ok((var_out, None))
            }
        }
    }

    /// Global layer normalization: each utterance is normalized over
    /// (channels × frames), then scaled and shifted per channel.
    pub fn global_layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        self.check_finite_input(x, "global_layer_norm")?;
        let (n, c, t) = dims3(self.shape(x), "global_layer_norm")?;
        expect_shape(self.shape(gamma), &[c], "global_layer_norm")?;
        expect_shape(self.shape(beta), &[c], "global_layer_norm")?;
        let input = self.value(x).values();
        let (g, bt) = (self.value(gamma).values(), self.value(beta).values());
        let per = c * t;
        let m = T::of(per as f64);
        let mut inv_std = Vec::with_capacity(n);
        let mut groups = vec![0; input.len()];
        let mut normalized = vec![T::zero(); input.len()];
        let mut out = vec![T::zero(); input.len()];
        for b in 0..n {
            let chunk = &input[b * per..(b + 1) * per];
            let mean = chunk.iter().copied().sum::<T>() / m;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for ch in 0..c {
                for i in b * per + ch * t..b * per + (ch + 1) * t {
                    groups[i] = b;
                    normalized[i] = (input[i] - mean) * inv;
                    out[i] = g[ch] * normalized[i] + bt[ch];
                }
            }
        }
        let op = GroupNormOp {
            name: "global_layer_norm",
            groups,
            inv_std,
            normalized,
            group_sizes: vec![per; n],
        };
        let out = Tensor::new(vec![n, c, t], out)?;
        self.push_op(out, vec![x, gamma, beta], Box::new(op))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check_finite_input(x, "softmax")?;
        let shape = self.shape(x).to_vec();
        let k = *shape
            .last()
            .ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        if k == 0 {
            return Err(Error::shape("softmax", "empty class axis"));
        }
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).values().chunks(k) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let total: T = exps.iter().copied().sum();
            out.extend(exps.into_iter().map(|e| e / total));
        }
        let out = Tensor::new(shape, out)?;
        self.push_op(out, vec![x], Box::new(SoftmaxOp))
    }

    /// Average over the frame axis: `[n, c, t] → [n, c]`.
    pub fn mean_over_frames(&mut self, x: Var) -> Result<Var> {
        let (n, c, t) = dims3(self.shape(x), "mean_over_frames")?;
        if t == 0 {
            return Err(Error::shape("mean_over_frames", "no frames"));
        }
        let inv = T::one() / T::of(t as f64);
        let out: Vec<T> = self
            .value(x)
            .values()
            .chunks(t)
            .map(|row| row.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(vec![n, c], out)?;
        self.push_op(out, vec![x], Box::new(MeanFramesOp))
    }

    /// Dot product of the last axis with fixed weights: `[n, k] → [n]`.
    pub fn weighted_sum(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, k) = match *shape {
            [n, k] if k == weights.len() => (n, k),
            _ => {
                return Err(Error::shape(
                    "weighted_sum",
                    format!("{shape:?} vs {} weights", weights.len()),
                ))
            }
        };
        let out: Vec<T> = self
            .value(x)
            .values()
            .chunks(k)
            .map(|row| row.iter().zip(weights).map(|(&a, &w)| a * w).sum())
            .collect();
        let out = Tensor::new(vec![n], out)?;
        let op = WeightedSumOp {
            weights: weights.to_vec(),
        };
        self.push_op(out, vec![x], Box::new(op))
    }

    /// Complex multiply of a spectrogram by a mask given as real and
    /// imaginary planes: `[n, f, t] × [n, f, t] × [n, 2, f, t] → [n, 2, f, t]`.
    pub fn complex_mask_apply(&mut self, mask_re: Var, mask_im: Var, spec: Var) -> Result<Var> {
        let (n, f, t) = dims3(self.shape(mask_re), "complex_mask_apply")?;
        expect_shape(self.shape(mask_im), &[n, f, t], "complex_mask_apply")?;
        expect_shape(self.shape(spec), &[n, 2, f, t], "complex_mask_apply")?;
        let plane = f * t;
        let (a, c, y) = (
            self.value(mask_re).values(),
            self.value(mask_im).values(),
            self.value(spec).values(),
        );
        let mut out = vec![T::zero(); y.len()];
        for b in 0..n {
            for i in 0..plane {
                let m = b * plane + i;
                let (r, im) = (b * 2 * plane + i, b * 2 * plane + plane + i);
                out[r] = a[m] * y[r] - c[m] * y[im];
                out[im] = a[m] * y[im] + c[m] * y[r];
            }
        }
        let out = Tensor::new(vec![n, 2, f, t], out)?;
        self.push_op(out, vec![mask_re, mask_im, spec], Box::new(ComplexMaskOp))
    }

    /// Squared magnitude of a complex spectrogram: `[n, 2, f, t] → [n, f, t]`.
    pub fn abs_squared(&mut self, spec: Var) -> Result<Var> {
        let shape = self.shape(spec).to_vec();
        let (n, f, t) = match *shape {
            [n, 2, f, t] => (n, f, t),
            _ => {
                return Err(Error::shape(
                    "abs_squared",
                    format!("expected [n, 2, f, t], got {shape:?}"),
                ))
            }
        };
        let plane = f * t;
        let y = self.value(spec).values();
        let mut out = vec![T::zero(); n * plane];
        for b in 0..n {
            for i in 0..plane {
                let (r, im) = (y[b * 2 * plane + i], y[b * 2 * plane + plane + i]);
                out[b * plane + i] = r * r + im * im;
            }
        }
        let out = Tensor::new(vec![n, f, t], out)?;
        self.push_op(out, vec![spec], Box::new(AbsSquaredOp))
    }
}
