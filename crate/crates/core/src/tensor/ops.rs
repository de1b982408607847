//! Differentiable operations recorded on a [`Tape`].

use super::tape::{Tape, Var};
use super::{dims4, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Row-major `c = a·b + beta·c` where `a` is `m×k` and `b` is `k×n`.
/// `ta`/`tb` select the transposed view of a row-major buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides above address only those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Samples per GEMM in convolution. Fixed, so reductions do not depend on
/// how many threads run.
const CONV_GROUP: usize = 16;

/// Unfold one sample into columns `offset..offset + ho·wo` of a buffer whose
/// rows are `stride` long.
fn im2col(x: &[f64], g: &ConvGeom, out: &mut [f64], stride: usize, offset: usize) {
    let cols = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut out[row * stride + offset..row * stride + offset + cols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into one sample.
fn col2im(cols_buf: &[f64], g: &ConvGeom, dx: &mut [f64], stride: usize, offset: usize) {
    let cols = g.cols();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols_buf[row * stride + offset..row * stride + offset + cols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `[G, F, cols]` sample-major block to `[F, G·cols]`, or back.
fn regroup(src: &[f64], dst: &mut [f64], f: usize, cols: usize, to_channel_major: bool) {
    let gs = src.len() / (f * cols);
    for s in 0..gs {
        for fi in 0..f {
            let a = (s * f + fi) * cols;
            let b = fi * gs * cols + s * cols;
            if to_channel_major {
                dst[b..b + cols].copy_from_slice(&src[a..a + cols]);
            } else {
                dst[a..a + cols].copy_from_slice(&src[b..b + cols]);
            }
        }
    }
}

fn unfold_group(x: &[f64], g: &ConvGeom, in_sz: usize) -> Vec<f64> {
    let gs = x.len() / in_sz;
    let width = gs * g.cols();
    let mut buf = vec![0.0; g.rows() * width];
    for s in 0..gs {
        im2col(&x[s * in_sz..(s + 1) * in_sz], g, &mut buf, width, s * g.cols());
    }
    buf
}

fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < kernel {
        return Err(Error::NonIntegerOutput {
            op: "conv2d",
            size,
            pad,
            kernel,
            stride,
        });
    }
    Ok((padded - kernel) / stride + 1)
}

/// Per-channel batch mean and (biased) variance from a train-mode forward.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Elements per channel (N·H·W).
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `running ← momentum·running + (1 − momentum)·batch`, with the batch
    /// variance bias-corrected.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        let correction = if batch.count > 1 {
            batch.count as f64 / (batch.count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.mean.len() {
            self.mean[c] = momentum * self.mean[c] + (1.0 - momentum) * batch.mean[c];
            self.var[c] = momentum * self.var[c] + (1.0 - momentum) * batch.var[c] * correction;
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with stored running statistics.
    Eval(&'a RunningStats),
}

impl<'t> Var<'t> {
    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape(), other.tape()),
            "vars belong to different tapes"
        );
    }

    // fallible, so not `ops::Add`
    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        drop((a, b));
        Ok(self
            .tape()
            .record(out, &[self, other], |g, _| vec![Some(g.to_vec()), Some(g.to_vec())]))
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let x = self.value();
        let out = Tensor::from_fn(x.shape(), |i| factor * x.data()[i]);
        drop(x);
        self.tape().record(out, &[self], move |g, _| {
            vec![Some(g.iter().map(|v| factor * v).collect())]
        })
    }

    pub fn relu(self) -> Var<'t> {
        let x = self.value();
        let out = Tensor::from_fn(x.shape(), |i| x.data()[i].max(0.0));
        drop(x);
        self.tape().record(out, &[self], |g, inputs| {
            let x = inputs[0].data();
            vec![Some(
                g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
            )]
        })
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let (total, n) = (x.sum(), x.numel());
        drop(x);
        self.tape()
            .record(Tensor::scalar(total), &[self], move |g, _| vec![Some(vec![g[0]; n])])
    }

    /// `Σ xᵢ·wᵢ` against constant weights of the same length.
    pub fn weighted_sum(self, weights: &[f64]) -> Result<Var<'t>> {
        let x = self.value();
        if x.numel() != weights.len() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                lhs: x.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let total = x.data().iter().zip(weights).map(|(a, b)| a * b).sum();
        drop(x);
        let w = weights.to_vec();
        Ok(self.tape().record(Tensor::scalar(total), &[self], move |g, _| {
            vec![Some(w.iter().map(|v| v * g[0]).collect())]
        }))
    }

    /// Cross-correlation of `[N,C,H,W]` input with `[F,C,kh,kw]` weights.
    ///
    /// Output spatial size is `⌊(H + 2·pad − kh)/stride⌋ + 1`.
    pub fn conv2d(self, weight: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        self.same_tape(&weight);
        let (x, w) = (self.value(), weight.value());
        let [n, c, h, wd] = dims4(&x, "conv2d input")?;
        let [f, wc, kh, kw] = dims4(&w, "conv2d weight")?;
        if wc != c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidShape {
                shape: w.shape().to_vec(),
                reason: "conv2d kernels must have odd extent".into(),
            });
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        let ho = conv_out(h, kh, stride, pad)?;
        let wo = conv_out(wd, kw, stride, pad)?;
        let g = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let (rows, cols) = (g.rows(), g.cols());
        let in_sz = c * h * wd;
        let out_sz = f * cols;

        let mut out = vec![0.0; n * out_sz];
        {
            let (xd, wdat) = (x.data(), w.data());
            par::for_each_chunk_mut(&mut out, CONV_GROUP * out_sz, |grp, y| {
                let gs = y.len() / out_sz;
                let start = grp * CONV_GROUP * in_sz;
                let buf = unfold_group(&xd[start..start + gs * in_sz], &g, in_sz);
                let mut tmp = vec![0.0; f * gs * cols];
                gemm(f, rows, gs * cols, wdat, false, &buf, false, 0.0, &mut tmp);
                regroup(&tmp, y, f, cols, false);
            });
        }
        let out = Tensor::new(vec![n, f, ho, wo], out)?;
        drop((x, w));

        let need_dx = self.requires_grad();
        let need_dw = weight.requires_grad();
        let groups = n.div_ceil(CONV_GROUP);
        Ok(self.tape().record(out, &[self, weight], move |grad, inputs| {
            let (xd, wdat) = (inputs[0].data(), inputs[1].data());
            let gather = |grp: usize| {
                let lo = grp * CONV_GROUP;
                let gs = CONV_GROUP.min(n - lo);
                let mut gy = vec![0.0; f * gs * cols];
                regroup(&grad[lo * out_sz..(lo + gs) * out_sz], &mut gy, f, cols, true);
                (lo, gs, gy)
            };
            let dx = need_dx.then(|| {
                let mut dx = vec![0.0; n * in_sz];
                par::for_each_chunk_mut(&mut dx, CONV_GROUP * in_sz, |grp, dxs| {
                    let (_, gs, gy) = gather(grp);
                    let mut buf = vec![0.0; rows * gs * cols];
                    gemm(rows, f, gs * cols, wdat, true, &gy, false, 0.0, &mut buf);
                    for s in 0..gs {
                        col2im(&buf, &g, &mut dxs[s * in_sz..(s + 1) * in_sz], gs * cols, s * cols);
                    }
                });
                dx
            });
            let dw = need_dw.then(|| {
                let partial = par::map_range(groups, |grp| {
                    let (lo, gs, gy) = gather(grp);
                    let buf = unfold_group(&xd[lo * in_sz..(lo + gs) * in_sz], &g, in_sz);
                    let mut dws = vec![0.0; f * rows];
                    gemm(f, gs * cols, rows, &gy, false, &buf, true, 0.0, &mut dws);
                    dws
                });
                // fixed-order reduction keeps results independent of thread count
                let mut dw = vec![0.0; f * rows];
                for p in &partial {
                    dw.iter_mut().zip(p).for_each(|(a, b)| *a += b);
                }
                dw
            });
            vec![dx, dw]
        }))
    }

    /// Batch normalization over `[N,C,H,W]` with per-channel `gamma`/`beta`.
    ///
    /// In train mode also returns the batch statistics so the caller can
    /// fold them into its running estimate.
    pub fn batch_norm(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        mode: BatchNormMode<'_>,
        eps: f64,
    ) -> Result<(Var<'t>, Option<BatchStats>)> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let x = self.value();
        let [n, c, h, w] = dims4(&x, "batch_norm input")?;
        for p in [&gamma, &beta] {
            let v = p.value();
            if v.shape() != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    lhs: x.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let hw = h * w;
        let m = n * hw;
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                if m < 2 {
                    return Err(Error::InvalidShape {
                        shape: x.shape().to_vec(),
                        reason: "train-mode batch_norm needs N·H·W ≥ 2".into(),
                    });
                }
                let xd = x.data();
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for s_i in 0..n {
                        let base = (s_i * c + ch) * hw;
                        s += xd[base..base + hw].iter().sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut v = 0.0;
                    for s_i in 0..n {
                        let base = (s_i * c + ch) * hw;
                        v += xd[base..base + hw].iter().map(|x| (x - mu) * (x - mu)).sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = v / m as f64;
                }
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: m,
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval(rs) => {
                if rs.mean.len() != c || rs.var.len() != c {
                    return Err(Error::ShapeMismatch {
                        op: "batch_norm running stats",
                        lhs: x.shape().to_vec(),
                        rhs: vec![rs.mean.len()],
                    });
                }
                (rs.mean.clone(), rs.var.clone(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (gamma.value().data().to_vec(), beta.value().data().to_vec());
        let mut xhat = vec![0.0; x.numel()];
        let mut out = vec![0.0; x.numel()];
        let xd = x.data();
        for s_i in 0..n {
            for ch in 0..c {
                let base = (s_i * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        drop(x);
        let train = stats.is_some();
        let var_out = self.tape().record(out, &[self, gamma, beta], move |g, inputs| {
            let gamma = inputs[1].data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut dx = vec![0.0; g.len()];
            for ch in 0..c {
                let (mut sum_g, mut sum_gx) = (0.0, 0.0);
                for s_i in 0..n {
                    let base = (s_i * c + ch) * hw;
                    for i in base..base + hw {
                        sum_g += g[i];
                        sum_gx += g[i] * xhat[i];
                    }
                }
                dgamma[ch] = sum_gx;
                dbeta[ch] = sum_g;
                let k = gamma[ch] * inv_std[ch];
                for s_i in 0..n {
                    let base = (s_i * c + ch) * hw;
                    for i in base..base + hw {
                        dx[i] = if train {
                            k * (g[i] - (sum_g + xhat[i] * sum_gx) / m as f64)
                        } else {
                            k * g[i]
                        };
                    }
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        });
        Ok((var_out, stats))
    }

    /// `[N,D]·[D,M] + bias[M]`.
    pub fn linear(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&weight);
        self.same_tape(&bias);
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (n, d) = match *x.shape() {
            [n, d] => (n, d),
            _ => {
                return Err(Error::InvalidShape {
                    shape: x.shape().to_vec(),
                    reason: "linear expects [N, D] input".into(),
                })
            }
        };
        let m = match *w.shape() {
            [wd, m] if wd == d => m,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "linear",
                    lhs: x.shape().to_vec(),
                    rhs: w.shape().to_vec(),
                })
            }
        };
        if b.shape() != [m] {
            return Err(Error::ShapeMismatch {
                op: "linear bias",
                lhs: w.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(b.data());
        }
        gemm(n, d, m, x.data(), false, w.data(), false, 1.0, &mut out);
        let out = Tensor::new(vec![n, m], out)?;
        drop((x, w, b));
        Ok(self.tape().record(out, &[self, weight, bias], move |g, inputs| {
            let (x, w) = (inputs[0].data(), inputs[1].data());
            let mut dx = vec![0.0; n * d];
            gemm(n, m, d, g, false, w, true, 0.0, &mut dx);
            let mut dw = vec![0.0; d * m];
            gemm(d, n, m, x, true, g, false, 0.0, &mut dw);
            let mut db = vec![0.0; m];
            for row in g.chunks(m) {
                db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            vec![Some(dx), Some(dw), Some(db)]
        }))
    }

    /// Spatial mean: `[N,C,H,W] → [N,C]`.
    pub fn global_avg_pool(self) -> Result<Var<'t>> {
        let x = self.value();
        let [n, c, h, w] = dims4(&x, "global_avg_pool")?;
        let hw = h * w;
        let out: Vec<f64> = x.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let out = Tensor::new(vec![n, c], out)?;
        drop(x);
        Ok(self.tape().record(out, &[self], move |g, _| {
            let mut dx = Vec::with_capacity(n * c * hw);
            for &gv in g {
                dx.extend(std::iter::repeat_n(gv / hw as f64, hw));
            }
            vec![Some(dx)]
        }))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(self)`.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (n, k) = match *x.shape() {
            [n, k] => (n, k),
            _ => {
                return Err(Error::InvalidShape {
                    shape: x.shape().to_vec(),
                    reason: "softmax_cross_entropy expects [N, K] logits".into(),
                })
            }
        };
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy labels",
                lhs: x.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (i, row) in x.data().chunks(k).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            loss += log_z - row[labels[i]];
            for j in 0..k {
                probs[i * k + j] = (row[j] - log_z).exp();
            }
        }
        let out = Tensor::scalar(loss / n as f64);
        drop(x);
        let labels = labels.to_vec();
        Ok(self.tape().record(out, &[self], move |g, _| {
            let scale = g[0] / n as f64;
            let mut dx = probs.clone();
            for (i, &l) in labels.iter().enumerate() {
                dx[i * k + l] -= 1.0;
            }
            dx.iter_mut().for_each(|v| *v *= scale);
            vec![Some(dx)]
        }))
    }
}

impl Tape {
    /// Elementwise sum of one or more equally shaped values.
    pub fn add_n<'t>(&'t self, terms: &[Var<'t>]) -> Result<Var<'t>> {
        let Some(first) = terms.first() else {
            return Err(Error::config("add_n needs at least one term"));
        };
        let shape = first.shape();
        let mut acc = vec![0.0; first.value().numel()];
        for t in terms {
            let v = t.value();
            if v.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "add_n",
                    lhs: shape,
                    rhs: v.shape().to_vec(),
                });
            }
            acc.iter_mut().zip(v.data()).for_each(|(a, b)| *a += b);
        }
        let out = Tensor::new(shape, acc)?;
        let k = terms.len();
        Ok(self.record(out, terms, move |g, _| vec![Some(g.to_vec()); k]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let tape = Tape::new();
        let x = Tensor::from_fn(&[2, 1, 3, 3], |i| i as f64 - 4.0);
        let xv = tape.leaf(x.clone(), false);
        let w = tape.leaf(t(&[1, 1, 1, 1], &[1.0]), false);
        let y = xv.conv2d(w, 1, 0).unwrap();
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn ones_kernel_window_sums() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
        let w = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
        let y = x.conv2d(w, 1, 1).unwrap();
        let v = y.value();
        assert_eq!(v.shape(), &[1, 1, 3, 3]);
        assert_eq!(v.data()[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(v.data()[corner], 4.0);
        }
        for edge in [1, 3, 5, 7] {
            assert_eq!(v.data()[edge], 6.0);
        }
    }

    #[test]
    fn conv_shape_errors() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]), false);
        let w = tape.leaf(Tensor::zeros(&[3, 3, 3, 3]), false);
        let err = x.conv2d(w, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[3, 3, 3, 3]"), "{msg}");
        let even = tape.leaf(Tensor::zeros(&[1, 2, 2, 2]), false);
        assert!(x.conv2d(even, 1, 0).is_err());
        let big = tape.leaf(Tensor::zeros(&[1, 2, 7, 7]), false);
        assert!(matches!(x.conv2d(big, 1, 1), Err(Error::NonIntegerOutput { .. })));
    }

    #[test]
    fn stride_two_halves_even_maps() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 8, 8]), false);
        let w = tape.leaf(Tensor::zeros(&[1, 1, 3, 3]), false);
        assert_eq!(x.conv2d(w, 2, 1).unwrap().shape(), vec![1, 1, 4, 4]);
    }

    #[test]
    fn relu_and_pool_values() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]), false);
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
        let m = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        assert_eq!(m.global_avg_pool().unwrap().value().data(), &[2.5]);
    }

    #[test]
    fn add_zero_is_identity() {
        let tape = Tape::new();
        let x = Tensor::from_fn(&[2, 3], |i| (i as f64).sin());
        let xv = tape.leaf(x.clone(), false);
        let z = tape.leaf(Tensor::zeros(&[2, 3]), false);
        assert_eq!(*xv.add(z).unwrap().value(), x);
        let zs = [xv, z, z, z];
        assert_eq!(*tape.add_n(&zs).unwrap().value(), x);
    }

    #[test]
    fn cross_entropy_reference_values() {
        let tape = Tape::new();
        let uniform = tape.leaf(Tensor::zeros(&[3, 10]), false);
        let loss = uniform.softmax_cross_entropy(&[0, 4, 9]).unwrap();
        assert!((loss.value().data()[0] - 10f64.ln()).abs() < 1e-12);

        let mut data = vec![0.0; 10];
        data[7] = 1000.0;
        let sharp = tape.leaf(t(&[1, 10], &data), false);
        let loss = sharp.softmax_cross_entropy(&[7]).unwrap();
        assert!(loss.value().data()[0].abs() < 1e-12);

        assert!(matches!(
            sharp.softmax_cross_entropy(&[10]),
            Err(Error::LabelOutOfRange { label: 10, classes: 10 })
        ));
    }

    #[test]
    fn batch_norm_constant_channel_gives_beta() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 1, 2, 2], 3.5), false);
        let g = tape.leaf(t(&[1], &[2.0]), false);
        let b = tape.leaf(t(&[1], &[0.25]), false);
        let (y, stats) = x.batch_norm(g, b, BatchNormMode::Train, 1e-5).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.25));
        assert_eq!(stats.unwrap().var, vec![0.0]);
    }

    #[test]
    fn batch_norm_needs_two_elements_in_train() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 1, 1], 3.5), false);
        let g = tape.leaf(t(&[1], &[1.0]), false);
        let b = tape.leaf(t(&[1], &[0.0]), false);
        assert!(x.batch_norm(g, b, BatchNormMode::Train, 1e-5).is_err());
        let rs = RunningStats::new(1);
        assert!(x.batch_norm(g, b, BatchNormMode::Eval(&rs), 1e-5).is_ok());
    }

    #[test]
    fn running_stats_momentum() {
        let mut rs = RunningStats::new(1);
        rs.update(
            &BatchStats {
                mean: vec![1.0],
                var: vec![3.0],
                count: 4,
            },
            0.9,
        );
        assert!((rs.mean[0] - 0.1).abs() < 1e-15);
        assert!((rs.var[0] - (0.9 + 0.1 * 4.0)).abs() < 1e-15);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
