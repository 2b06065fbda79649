//! Image-shaped ops: same-padding convolution, per-channel batch
//! normalization, and 2x2 max pooling. Layout is channels-last
//! (`n x h x w x c`), so the inner loops run over contiguous channel
//! vectors and vectorize well.
//!
//! Kernels parallelize over the leading axis with fixed chunking and
//! combine partial reductions in index order, so results are bitwise
//! deterministic regardless of thread scheduling.

use rayon::prelude::*;

use super::ops::matmul_acc;
use super::{grad_buf, AutogradError, Node, Op, Result, Tape, TensorRef};

const BN_EPS: f64 = 1e-5;
/// Momentum for the running statistics update.
pub const BN_MOMENTUM: f64 = 0.9;

impl Tape {
    /// Stride-1 cross-correlation with zero same-padding.
    /// `x: n x h x w x ci`, `kernel: k x k x ci x co` (k odd), `bias: co`.
    pub fn conv2d(&mut self, x: TensorRef, kernel: TensorRef, bias: TensorRef) -> Result<TensorRef> {
        let (sx, sk, sb) = (self.shape(x), self.shape(kernel), self.shape(bias));
        if sx.len() != 4 || sk.len() != 4 || sb.len() != 1 {
            return Err(self.err_shape("conv2d", &[x, kernel, bias]));
        }
        let (n, h, w, ci) = (sx[0], sx[1], sx[2], sx[3]);
        let (k, co) = (sk[0], sk[3]);
        if sk[1] != k || sk[2] != ci || sb[0] != co || k % 2 == 0 {
            return Err(self.err_shape("conv2d", &[x, kernel, bias]));
        }
        assert!(x != kernel && x != bias && kernel != bias);

        let values = conv2d_forward(self.values(x), self.values(kernel), self.values(bias), n, h, w, ci, k, co);
        let req = self.requires_any(&[x, kernel, bias]);
        Ok(self.push(vec![n, h, w, co], values, req, Op::Conv2d { x, w: kernel, b: bias }))
    }

    /// Train-mode batch normalization over `(n, h, w)` per channel.
    /// Returns the output plus the batch mean and (biased) variance so the
    /// caller can update running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: TensorRef,
        gamma: TensorRef,
        beta: TensorRef,
    ) -> Result<(TensorRef, Vec<f64>, Vec<f64>)> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gamma), self.shape(beta));
        if sx.len() != 4 || sg != [sx[3]] || sb != [sx[3]] {
            return Err(self.err_shape("batchnorm_train", &[x, gamma, beta]));
        }
        assert!(x != gamma && x != beta && gamma != beta);
        let (n, h, w, c) = (sx[0], sx[1], sx[2], sx[3]);
        let m = n * h * w;
        if m < 2 {
            return Err(AutogradError::DegenerateBatch);
        }

        let xv = self.values(x);
        let (mean, var) = channel_stats(xv, n, h * w * c, c, m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let values = bn_apply(xv, self.values(gamma), self.values(beta), &mean, &inv_std, c);

        let req = self.requires_any(&[x, gamma, beta]);
        let node = self.push(
            vec![n, h, w, c],
            values,
            req,
            Op::BatchNormTrain { x, gamma, beta, mean: mean.clone(), inv_std },
        );
        Ok((node, mean, var))
    }

    /// Eval-mode batch normalization using running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: TensorRef,
        gamma: TensorRef,
        beta: TensorRef,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<TensorRef> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gamma), self.shape(beta));
        if sx.len() != 4 || sg != [sx[3]] || sb != [sx[3]] || running_mean.len() != sx[3] || running_var.len() != sx[3] {
            return Err(self.err_shape("batchnorm_eval", &[x, gamma, beta]));
        }
        assert!(x != gamma && x != beta && gamma != beta);
        let c = sx[3];
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let values = bn_apply(self.values(x), self.values(gamma), self.values(beta), running_mean, &inv_std, c);
        let req = self.requires_any(&[x, gamma, beta]);
        Ok(self.push(
            sx.to_vec(),
            values,
            req,
            Op::BatchNormEval { x, gamma, beta, mean: running_mean.to_vec(), inv_std },
        ))
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    /// Backward routes each gradient to the window argmax, ties to the first
    /// element in row-major window order.
    pub fn maxpool2d(&mut self, x: TensorRef) -> Result<TensorRef> {
        let sx = self.shape(x);
        if sx.len() != 4 || sx[1] < 2 || sx[2] < 2 {
            return Err(self.err_shape("maxpool2d", &[x]));
        }
        let (n, h, w, c) = (sx[0], sx[1], sx[2], sx[3]);
        let (h2, w2) = (h / 2, w / 2);

        let xv = self.values(x);
        let mut values = vec![0.0; n * h2 * w2 * c];
        let mut argmax = vec![0usize; n * h2 * w2 * c];
        values
            .par_chunks_mut(h2 * w2 * c)
            .zip(argmax.par_chunks_mut(h2 * w2 * c))
            .enumerate()
            .for_each(|(ni, (ochunk, achunk))| {
                let xchunk = &xv[ni * h * w * c..(ni + 1) * h * w * c];
                let xbase = ni * h * w * c;
                for i2 in 0..h2 {
                    for j2 in 0..w2 {
                        let out_off = (i2 * w2 + j2) * c;
                        for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let in_off = ((2 * i2 + di) * w + 2 * j2 + dj) * c;
                            for ch in 0..c {
                                let v = xchunk[in_off + ch];
                                if (di, dj) == (0, 0) || v > ochunk[out_off + ch] {
                                    ochunk[out_off + ch] = v;
                                    achunk[out_off + ch] = xbase + in_off + ch;
                                }
                            }
                        }
                    }
                }
            });

        let req = self.requires_any(&[x]);
        Ok(self.push(vec![n, h2, w2, c], values, req, Op::MaxPool2d { x, argmax }))
    }

    fn requires_any(&self, refs: &[TensorRef]) -> bool {
        refs.iter().any(|r| self.nodes[r.0].requires_grad)
    }
}

fn conv2d_forward(
    xv: &[f64],
    wv: &[f64],
    bv: &[f64],
    n: usize,
    h: usize,
    w: usize,
    ci: usize,
    k: usize,
    co: usize,
) -> Vec<f64> {
    let pad = k / 2;
    let mut out = vec![0.0; n * h * w * co];
    out.par_chunks_mut(h * w * co).enumerate().for_each(|(ni, ochunk)| {
        for row in ochunk.chunks_mut(co) {
            row.copy_from_slice(bv);
        }
        let xchunk = &xv[ni * h * w * ci..(ni + 1) * h * w * ci];
        for i in 0..h {
            for ki in 0..k {
                let ii = i + ki;
                if ii < pad || ii >= h + pad {
                    continue;
                }
                let i_in = ii - pad;
                for kj in 0..k {
                    let dj = kj as isize - pad as isize;
                    let j_lo = (-dj).max(0) as usize;
                    let j_hi = (w as isize).min(w as isize - dj) as usize;
                    if j_lo >= j_hi {
                        continue;
                    }
                    let rows = j_hi - j_lo;
                    let x_off = (i_in * w + (j_lo as isize + dj) as usize) * ci;
                    let o_off = (i * w + j_lo) * co;
                    let wmat = &wv[(ki * k + kj) * ci * co..(ki * k + kj + 1) * ci * co];
                    matmul_acc(
                        &mut ochunk[o_off..o_off + rows * co],
                        &xchunk[x_off..x_off + rows * ci],
                        wmat,
                        rows,
                        ci,
                        co,
                    );
                }
            }
        }
    });
    out
}

pub(crate) fn conv2d_backward(
    before: &mut [Node],
    node: &Node,
    gout: &[f64],
    x: TensorRef,
    w: TensorRef,
    b: TensorRef,
) {
    let (n, h, wd, co) = (node.shape[0], node.shape[1], node.shape[2], node.shape[3]);
    let (k, ci) = (before[w.0].shape[0], before[w.0].shape[2]);
    let pad = k / 2;

    let wv = before[w.0].values.clone();
    // Per-offset transposed kernel blocks (co x ci) for the input gradient.
    let mut wt = vec![0.0; wv.len()];
    for blk in 0..k * k {
        let src = &wv[blk * ci * co..(blk + 1) * ci * co];
        let dst = &mut wt[blk * ci * co..(blk + 1) * ci * co];
        for p in 0..ci {
            for q in 0..co {
                dst[q * ci + p] = src[p * co + q];
            }
        }
    }

    let x_requires = before[x.0].requires_grad;
    let w_requires = before[w.0].requires_grad;
    let xv_for_dw: Vec<f64> = if w_requires { before[x.0].values.clone() } else { Vec::new() };

    // Input gradient: parallel over the leading axis.
    if x_requires {
        if let Some(gx) = grad_buf(before, x) {
            gx.par_chunks_mut(h * wd * ci).enumerate().for_each(|(ni, gxchunk)| {
                let gchunk = &gout[ni * h * wd * co..(ni + 1) * h * wd * co];
                for i in 0..h {
                    for ki in 0..k {
                        let ii = i + ki;
                        if ii < pad || ii >= h + pad {
                            continue;
                        }
                        let i_in = ii - pad;
                        for kj in 0..k {
                            let dj = kj as isize - pad as isize;
                            let j_lo = (-dj).max(0) as usize;
                            let j_hi = (wd as isize).min(wd as isize - dj) as usize;
                            if j_lo >= j_hi {
                                continue;
                            }
                            let rows = j_hi - j_lo;
                            let x_off = (i_in * wd + (j_lo as isize + dj) as usize) * ci;
                            let o_off = (i * wd + j_lo) * co;
                            let wtmat = &wt[(ki * k + kj) * ci * co..(ki * k + kj + 1) * ci * co];
                            matmul_acc(
                                &mut gxchunk[x_off..x_off + rows * ci],
                                &gchunk[o_off..o_off + rows * co],
                                wtmat,
                                rows,
                                co,
                                ci,
                            );
                        }
                    }
                }
            });
        }
    }

    // Kernel gradient: per-sample partials combined in index order.
    if w_requires {
        let partials: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|ni| {
                let xchunk = &xv_for_dw[ni * h * wd * ci..(ni + 1) * h * wd * ci];
                let gchunk = &gout[ni * h * wd * co..(ni + 1) * h * wd * co];
                let mut dw = vec![0.0; k * k * ci * co];
                for i in 0..h {
                    for ki in 0..k {
                        let ii = i + ki;
                        if ii < pad || ii >= h + pad {
                            continue;
                        }
                        let i_in = ii - pad;
                        for kj in 0..k {
                            let dj = kj as isize - pad as isize;
                            let j_lo = (-dj).max(0) as usize;
                            let j_hi = (wd as isize).min(wd as isize - dj) as usize;
                            if j_lo >= j_hi {
                                continue;
                            }
                            let rows = j_hi - j_lo;
                            let x_off = (i_in * wd + (j_lo as isize + dj) as usize) * ci;
                            let o_off = (i * wd + j_lo) * co;
                            let dwmat = &mut dw[(ki * k + kj) * ci * co..(ki * k + kj + 1) * ci * co];
                            // dw += x_rowsᵀ @ gout_rows
                            super::ops::matmul_acc_at(
                                dwmat,
                                &xchunk[x_off..x_off + rows * ci],
                                &gchunk[o_off..o_off + rows * co],
                                ci,
                                rows,
                                co,
                            );
                        }
                    }
                }
                dw
            })
            .collect();
        if let Some(gw) = grad_buf(before, w) {
            for partial in &partials {
                for (slot, &v) in gw.iter_mut().zip(partial) {
                    *slot += v;
                }
            }
        }
    }

    if let Some(gb) = grad_buf(before, b) {
        for row in gout.chunks(co) {
            for (slot, &g) in gb.iter_mut().zip(row) {
                *slot += g;
            }
        }
    }
}

/// Per-channel mean and biased variance over the leading `m = n*h*w`
/// positions, with per-sample partials combined in index order.
fn channel_stats(xv: &[f64], n: usize, chunk: usize, c: usize, m: usize) -> (Vec<f64>, Vec<f64>) {
    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let xchunk = &xv[ni * chunk..(ni + 1) * chunk];
            let mut sum = vec![0.0; c];
            let mut sumsq = vec![0.0; c];
            for row in xchunk.chunks(c) {
                for (j, &v) in row.iter().enumerate() {
                    sum[j] += v;
                    sumsq[j] += v * v;
                }
            }
            (sum, sumsq)
        })
        .collect();
    let mut sum = vec![0.0; c];
    let mut sumsq = vec![0.0; c];
    for (s, q) in &partials {
        for j in 0..c {
            sum[j] += s[j];
            sumsq[j] += q[j];
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / m as f64).collect();
    let var: Vec<f64> =
        sumsq.iter().zip(&mean).map(|(q, mu)| (q / m as f64 - mu * mu).max(0.0)).collect();
    (mean, var)
}

fn bn_apply(xv: &[f64], gv: &[f64], bv: &[f64], mean: &[f64], inv_std: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; xv.len()];
    let rows_per_chunk = (1 << 14) / c.max(1) + 1;
    out.par_chunks_mut(rows_per_chunk * c)
        .zip(xv.par_chunks(rows_per_chunk * c))
        .for_each(|(ochunk, xchunk)| {
            for (orow, xrow) in ochunk.chunks_mut(c).zip(xchunk.chunks(c)) {
                for j in 0..c {
                    orow[j] = gv[j] * (xrow[j] - mean[j]) * inv_std[j] + bv[j];
                }
            }
        });
    out
}

pub(crate) fn batchnorm_train_backward(
    before: &mut [Node],
    gout: &[f64],
    x: TensorRef,
    gamma: TensorRef,
    beta: TensorRef,
    mean: &[f64],
    inv_std: &[f64],
) {
    let c = mean.len();
    let m = gout.len() / c;
    let xv = before[x.0].values.clone();
    let gv = before[gamma.0].values.clone();

    // Channel reductions: sum of gout and of gout * xhat.
    let mut dbeta = vec![0.0; c];
    let mut dgamma = vec![0.0; c];
    for (grow, xrow) in gout.chunks(c).zip(xv.chunks(c)) {
        for j in 0..c {
            dbeta[j] += grow[j];
            dgamma[j] += grow[j] * (xrow[j] - mean[j]) * inv_std[j];
        }
    }

    if let Some(gx) = grad_buf(before, x) {
        let mf = m as f64;
        let rows_per_chunk = (1 << 14) / c.max(1) + 1;
        gx.par_chunks_mut(rows_per_chunk * c)
            .zip(xv.par_chunks(rows_per_chunk * c).zip(gout.par_chunks(rows_per_chunk * c)))
            .for_each(|(gxchunk, (xchunk, gchunk))| {
                for (gxrow, (xrow, grow)) in
                    gxchunk.chunks_mut(c).zip(xchunk.chunks(c).zip(gchunk.chunks(c)))
                {
                    for j in 0..c {
                        let xhat = (xrow[j] - mean[j]) * inv_std[j];
                        gxrow[j] += gv[j] * inv_std[j] / mf
                            * (mf * grow[j] - dbeta[j] - xhat * dgamma[j]);
                    }
                }
            });
    }
    if let Some(gg) = grad_buf(before, gamma) {
        for (slot, v) in gg.iter_mut().zip(&dgamma) {
            *slot += v;
        }
    }
    if let Some(gb) = grad_buf(before, beta) {
        for (slot, v) in gb.iter_mut().zip(&dbeta) {
            *slot += v;
        }
    }
}

pub(crate) fn batchnorm_eval_backward(
    before: &mut [Node],
    gout: &[f64],
    x: TensorRef,
    gamma: TensorRef,
    beta: TensorRef,
    mean: &[f64],
    inv_std: &[f64],
) {
    let c = mean.len();
    let xv = before[x.0].values.clone();
    let gv = before[gamma.0].values.clone();
    if let Some(gx) = grad_buf(before, x) {
        for (gxrow, grow) in gx.chunks_mut(c).zip(gout.chunks(c)) {
            for j in 0..c {
                gxrow[j] += grow[j] * gv[j] * inv_std[j];
            }
        }
    }
    if let Some(gg) = grad_buf(before, gamma) {
        for (grow, xrow) in gout.chunks(c).zip(xv.chunks(c)) {
            for j in 0..c {
                gg[j] += grow[j] * (xrow[j] - mean[j]) * inv_std[j];
            }
        }
    }
    if let Some(gb) = grad_buf(before, beta) {
        for grow in gout.chunks(c) {
            for j in 0..c {
                gb[j] += grow[j];
            }
        }
    }
}
