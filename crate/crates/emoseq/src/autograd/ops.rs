//! Forward builders and backward kernels for the tape's primitive ops
//! (everything except the image-shaped conv/batchnorm/pool family, which
//! lives in `conv`).

use rayon::prelude::*;

use super::conv;
use super::{grad_buf, values_and_grad, AutogradError, Node, Op, Result, Tape, TensorRef};

/// Elementwise work below this size is not worth parallelizing.
const PAR_THRESHOLD: usize = 1 << 16;

impl Tape {
    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        if self.shape(a) != self.shape(b) {
            return Err(self.err_shape("add", &[a, b]));
        }
        let values: Vec<f64> =
            self.values(a).iter().zip(self.values(b)).map(|(x, y)| x + y).collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(self.shape(a).to_vec(), values, req, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        if self.shape(a) != self.shape(b) {
            return Err(self.err_shape("mul", &[a, b]));
        }
        let values: Vec<f64> =
            self.values(a).iter().zip(self.values(b)).map(|(x, y)| x * y).collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(self.shape(a).to_vec(), values, req, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: TensorRef, factor: f64) -> Result<TensorRef> {
        let values: Vec<f64> = self.values(a).iter().map(|x| x * factor).collect();
        Ok(self.push(self.shape(a).to_vec(), values, self.requires(a), Op::Scale(a, factor)))
    }

    /// `a` is `m x k`, `b` is `k x n`.
    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.err_shape("matmul", &[a, b]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut values = vec![0.0; m * n];
        matmul_acc(&mut values, self.values(a), self.values(b), m, k, n);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], values, req, Op::Matmul(a, b)))
    }

    /// Affine map `x @ w + b` with `x: n x di`, `w: di x do`, `b: do`.
    pub fn linear(&mut self, x: TensorRef, w: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sb.len() != 1 || sx[1] != sw[0] || sw[1] != sb[0] {
            return Err(self.err_shape("linear", &[x, w, b]));
        }
        assert!(x != w && x != b && w != b, "linear operands must be distinct nodes");
        let (n, di, dout) = (sx[0], sx[1], sw[1]);
        let mut values = Vec::with_capacity(n * dout);
        for _ in 0..n {
            values.extend_from_slice(self.values(b));
        }
        matmul_acc(&mut values, self.values(x), self.values(w), n, di, dout);
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(vec![n, dout], values, req, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: TensorRef) -> Result<TensorRef> {
        let values = map_elementwise(self.values(x), |v| v.max(0.0));
        Ok(self.push(self.shape(x).to_vec(), values, self.requires(x), Op::Relu(x)))
    }

    pub fn sigmoid(&mut self, x: TensorRef) -> Result<TensorRef> {
        let values = map_elementwise(self.values(x), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        Ok(self.push(self.shape(x).to_vec(), values, self.requires(x), Op::Sigmoid(x)))
    }

    pub fn tanh(&mut self, x: TensorRef) -> Result<TensorRef> {
        let values = map_elementwise(self.values(x), |v| v.tanh());
        Ok(self.push(self.shape(x).to_vec(), values, self.requires(x), Op::Tanh(x)))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[TensorRef], axis: usize) -> Result<TensorRef> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(self.err_shape("concat axis", inputs));
        }
        let mut axis_total = 0;
        for &r in inputs {
            let s = self.shape(r);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(self.err_shape("concat", inputs));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;

        let outer: usize = first[..axis].iter().product();
        let tail: usize = first[axis + 1..].iter().product();
        let mut values = Vec::with_capacity(outer * axis_total * tail);
        for o in 0..outer {
            for &r in inputs {
                let inner = self.shape(r)[axis] * tail;
                values.extend_from_slice(&self.values(r)[o * inner..(o + 1) * inner]);
            }
        }
        let req = inputs.iter().any(|&r| self.requires(r));
        Ok(self.push(out_shape, values, req, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    pub fn reshape(&mut self, x: TensorRef, shape: Vec<usize>) -> Result<TensorRef> {
        if shape.iter().product::<usize>() != self.numel(x) {
            return Err(self.err_shape(&format!("reshape to {shape:?}"), &[x]));
        }
        let values = self.values(x).to_vec();
        Ok(self.push(shape, values, self.requires(x), Op::Reshape(x)))
    }

    pub fn transpose2d(&mut self, x: TensorRef) -> Result<TensorRef> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(self.err_shape("transpose2d", &[x]));
        }
        let (m, n) = (s[0], s[1]);
        let xv = self.values(x);
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                values[j * m + i] = xv[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], values, self.requires(x), Op::Transpose2d(x)))
    }

    /// Rows `lo..hi` of a 2-d tensor.
    pub fn slice_rows(&mut self, x: TensorRef, lo: usize, hi: usize) -> Result<TensorRef> {
        let s = self.shape(x);
        if s.len() != 2 || lo >= hi || hi > s[0] {
            return Err(self.err_shape(&format!("slice_rows {lo}..{hi}"), &[x]));
        }
        let n = s[1];
        let values = self.values(x)[lo * n..hi * n].to_vec();
        Ok(self.push(vec![hi - lo, n], values, self.requires(x), Op::SliceRows { x, lo }))
    }

    /// Columns `lo..hi` of a 2-d tensor.
    pub fn slice_cols(&mut self, x: TensorRef, lo: usize, hi: usize) -> Result<TensorRef> {
        let s = self.shape(x);
        if s.len() != 2 || lo >= hi || hi > s[1] {
            return Err(self.err_shape(&format!("slice_cols {lo}..{hi}"), &[x]));
        }
        let (m, n, w) = (s[0], s[1], hi - lo);
        let xv = self.values(x);
        let mut values = Vec::with_capacity(m * w);
        for i in 0..m {
            values.extend_from_slice(&xv[i * n + lo..i * n + hi]);
        }
        Ok(self.push(vec![m, w], values, self.requires(x), Op::SliceCols { x, lo }))
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: TensorRef, gamma: TensorRef, beta: TensorRef) -> Result<TensorRef> {
        const EPS: f64 = 1e-5;
        let (sx, sg, sb) = (self.shape(x), self.shape(gamma), self.shape(beta));
        if sx.len() != 2 || sg != [sx[1]] || sb != [sx[1]] {
            return Err(self.err_shape("layer_norm", &[x, gamma, beta]));
        }
        assert!(x != gamma && x != beta && gamma != beta);
        let (rows, d) = (sx[0], sx[1]);
        let (xv, gv, bv) = (self.values(x), self.values(gamma), self.values(beta));
        let mut values = vec![0.0; rows * d];
        let mut mean = vec![0.0; rows];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + EPS).sqrt();
            mean[r] = mu;
            inv_std[r] = is;
            let out = &mut values[r * d..(r + 1) * d];
            for j in 0..d {
                out[j] = gv[j] * (row[j] - mu) * is + bv[j];
            }
        }
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(vec![rows, d], values, req, Op::LayerNorm { x, gamma, beta, mean, inv_std }))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, x: TensorRef) -> Result<TensorRef> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(self.err_shape("softmax", &[x]));
        }
        let d = *s.last().unwrap();
        let values = softmax_rows(self.values(x), d);
        Ok(self.push(s.to_vec(), values, self.requires(x), Op::Softmax(x)))
    }

    /// Maximum over one axis; ties resolve to the first index along the axis.
    pub fn max_over_axis(&mut self, x: TensorRef, axis: usize) -> Result<TensorRef> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(self.err_shape(&format!("max_over_axis {axis}"), &[x]));
        }
        let outer: usize = s[..axis].iter().product();
        let alen = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let xv = self.values(x);
        let mut values = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..alen {
                let base = (o * alen + j) * inner;
                for i in 0..inner {
                    let v = xv[base + i];
                    let slot = o * inner + i;
                    if v > values[slot] {
                        values[slot] = v;
                        argmax[slot] = base + i;
                    }
                }
            }
        }
        let mut out_shape = s.clone();
        out_shape.remove(axis);
        Ok(self.push(out_shape, values, self.requires(x), Op::MaxReduce { x, argmax }))
    }

    /// `softmax(q kᵀ / sqrt(d_k)) v` built from primitive ops, so its
    /// gradient is exact by composition.
    pub fn scaled_dot_attention(&mut self, q: TensorRef, k: TensorRef, v: TensorRef) -> Result<TensorRef> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk[0] != sv[0] {
            return Err(self.err_shape("scaled_dot_attention", &[q, k, v]));
        }
        let dk = sq[1] as f64;
        let kt = self.transpose2d(k)?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, 1.0 / dk.sqrt())?;
        let attn = self.softmax(scaled)?;
        self.matmul(attn, v)
    }

    /// Mean cross-entropy of `logits: n x c` against class indices, in
    /// log-sum-exp form. Gradient is `(softmax - onehot) / n`.
    pub fn softmax_cross_entropy(&mut self, logits: TensorRef, labels: &[usize]) -> Result<TensorRef> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(self.err_shape(&format!("cross_entropy with {} labels", labels.len()), &[logits]));
        }
        let (n, c) = (s[0], s[1]);
        for &label in labels {
            if label >= c {
                return Err(AutogradError::LabelOutOfRange { label, classes: c });
            }
        }
        let lv = self.values(logits);
        let probs = softmax_rows(lv, c);
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let loss = total / n as f64;
        Ok(self.push(
            vec![1],
            vec![loss],
            self.requires(logits),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
        ))
    }

    fn requires(&self, r: TensorRef) -> bool {
        self.nodes[r.0].requires_grad
    }
}

fn map_elementwise(src: &[f64], f: impl Fn(f64) -> f64 + Sync) -> Vec<f64> {
    if src.len() < PAR_THRESHOLD {
        src.iter().map(|&v| f(v)).collect()
    } else {
        let mut out = vec![0.0; src.len()];
        out.par_chunks_mut(PAR_THRESHOLD)
            .zip(src.par_chunks(PAR_THRESHOLD))
            .for_each(|(o, s)| {
                for (slot, &v) in o.iter_mut().zip(s) {
                    *slot = f(v);
                }
            });
        out
    }
}

pub(crate) fn softmax_rows(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (orow, xrow) in out.chunks_mut(d).zip(x.chunks(d)) {
        let max = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(xrow) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

// Register-blocked microkernel extents: 4 rows x 16 columns of f64
// accumulators stay in vector registers across the whole reduction, which
// is what keeps these kernels throughput-bound instead of stalling on
// store-to-load forwarding.
const MR: usize = 4;
const NR: usize = 16;

/// `out += a @ b` with `a: m x k`, `b: k x n`, all row-major.
pub(crate) fn matmul_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    let n_main = n - n % NR;
    let m_main = m - m % MR;
    for jb in (0..n_main).step_by(NR) {
        let mut ib = 0;
        while ib < m_main {
            let mut acc = [[0.0f64; NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(ib + r) * n + jb..(ib + r) * n + jb + NR]);
            }
            for p in 0..k {
                let brow = &b[p * n + jb..p * n + jb + NR];
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(ib + r) * k + p];
                    for j in 0..NR {
                        row[j] += av * brow[j];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(ib + r) * n + jb..(ib + r) * n + jb + NR].copy_from_slice(row);
            }
            ib += MR;
        }
        for i in m_main..m {
            let mut acc = [0.0f64; NR];
            acc.copy_from_slice(&out[i * n + jb..i * n + jb + NR]);
            for p in 0..k {
                let av = a[i * k + p];
                let brow = &b[p * n + jb..p * n + jb + NR];
                for j in 0..NR {
                    acc[j] += av * brow[j];
                }
            }
            out[i * n + jb..i * n + jb + NR].copy_from_slice(&acc);
        }
    }
    if n_main < n {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n + n_main..(i + 1) * n];
            for (p, &aip) in arow.iter().enumerate() {
                let brow = &b[p * n + n_main..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
    }
}

/// `out += aᵀ @ b` with `a: k x m`, `b: k x n` (reduction over the shared
/// leading axis), all row-major.
pub(crate) fn matmul_acc_at(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    let n_main = n - n % NR;
    let m_main = m - m % MR;
    for jb in (0..n_main).step_by(NR) {
        let mut ib = 0;
        while ib < m_main {
            let mut acc = [[0.0f64; NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(ib + r) * n + jb..(ib + r) * n + jb + NR]);
            }
            for p in 0..k {
                let brow = &b[p * n + jb..p * n + jb + NR];
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[p * m + ib + r];
                    for j in 0..NR {
                        row[j] += av * brow[j];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(ib + r) * n + jb..(ib + r) * n + jb + NR].copy_from_slice(row);
            }
            ib += MR;
        }
        for i in m_main..m {
            let mut acc = [0.0f64; NR];
            acc.copy_from_slice(&out[i * n + jb..i * n + jb + NR]);
            for p in 0..k {
                let av = a[p * m + i];
                let brow = &b[p * n + jb..p * n + jb + NR];
                for j in 0..NR {
                    acc[j] += av * brow[j];
                }
            }
            out[i * n + jb..i * n + jb + NR].copy_from_slice(&acc);
        }
    }
    if n_main < n {
        for p in 0..k {
            let brow = &b[p * n + n_main..(p + 1) * n];
            for i in 0..m {
                let av = a[p * m + i];
                let orow = &mut out[i * n + n_main..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// `da += gout @ bᵀ` with `gout: m x n`, `b: k x n`.
fn acc_grad_a(da: &mut [f64], gout: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &gout[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for (p, slot) in darow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (g, bv) in grow.iter().zip(brow) {
                s += g * bv;
            }
            *slot += s;
        }
    }
}

/// `db += aᵀ @ gout` with `a: m x k`, `gout: m x n`.
fn acc_grad_b(db: &mut [f64], a: &[f64], gout: &[f64], m: usize, k: usize, n: usize) {
    matmul_acc_at(db, a, gout, k, m, n);
}

fn acc_into(nodes: &mut [Node], r: TensorRef, delta: impl Iterator<Item = f64>) {
    if let Some(g) = grad_buf(nodes, r) {
        for (slot, d) in g.iter_mut().zip(delta) {
            *slot += d;
        }
    }
}

/// Propagate `gout` from `node` into the gradient buffers of its inputs.
/// `before` holds every node with a smaller tape index.
pub(crate) fn backward_step(before: &mut [Node], node: &Node, gout: &[f64]) {
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::Add(a, b) => {
            acc_into(before, *a, gout.iter().copied());
            acc_into(before, *b, gout.iter().copied());
        }
        Op::Mul(a, b) => {
            let bv = before[b.0].values.clone();
            acc_into(before, *a, gout.iter().zip(&bv).map(|(g, v)| g * v));
            let av = before[a.0].values.clone();
            acc_into(before, *b, gout.iter().zip(&av).map(|(g, v)| g * v));
        }
        Op::Scale(a, factor) => {
            let f = *factor;
            acc_into(before, *a, gout.iter().map(|g| g * f));
        }
        Op::Matmul(a, b) => {
            let (m, n) = (node.shape[0], node.shape[1]);
            let k = before[a.0].shape[1];
            if a == b {
                let (av, da) = values_and_grad(before, *a);
                if let Some(da) = da {
                    let av = av.to_vec();
                    acc_grad_a(da, gout, &av, m, k, n);
                    acc_grad_b(da, &av, gout, m, k, n);
                }
            } else {
                let [na, nb] = before.get_disjoint_mut([a.0, b.0]).unwrap();
                if na.requires_grad {
                    let len = na.values.len();
                    let da = na.grad.get_or_insert_with(|| vec![0.0; len]);
                    acc_grad_a(da, gout, &nb.values, m, k, n);
                }
                if nb.requires_grad {
                    let len = nb.values.len();
                    let db = nb.grad.get_or_insert_with(|| vec![0.0; len]);
                    acc_grad_b(db, &na.values, gout, m, k, n);
                }
            }
        }
        Op::Linear { x, w, b } => {
            let (n, dout) = (node.shape[0], node.shape[1]);
            let di = before[x.0].shape[1];
            let [nx, nw, nb] = before.get_disjoint_mut([x.0, w.0, b.0]).unwrap();
            if nx.requires_grad {
                let len = nx.values.len();
                let dx = nx.grad.get_or_insert_with(|| vec![0.0; len]);
                acc_grad_a(dx, gout, &nw.values, n, di, dout);
            }
            if nw.requires_grad {
                let len = nw.values.len();
                let dw = nw.grad.get_or_insert_with(|| vec![0.0; len]);
                acc_grad_b(dw, &nx.values, gout, n, di, dout);
            }
            if nb.requires_grad {
                let len = nb.values.len();
                let db = nb.grad.get_or_insert_with(|| vec![0.0; len]);
                for row in gout.chunks(dout) {
                    for (slot, &g) in db.iter_mut().zip(row) {
                        *slot += g;
                    }
                }
            }
        }
        Op::Relu(x) => {
            let out = &node.values;
            if let Some(gx) = grad_buf(before, *x) {
                if gx.len() < PAR_THRESHOLD {
                    for i in 0..gx.len() {
                        if out[i] > 0.0 {
                            gx[i] += gout[i];
                        }
                    }
                } else {
                    gx.par_chunks_mut(PAR_THRESHOLD)
                        .zip(out.par_chunks(PAR_THRESHOLD).zip(gout.par_chunks(PAR_THRESHOLD)))
                        .for_each(|(gxc, (oc, gc))| {
                            for i in 0..gxc.len() {
                                if oc[i] > 0.0 {
                                    gxc[i] += gc[i];
                                }
                            }
                        });
                }
            }
        }
        Op::Sigmoid(x) => {
            let out = &node.values;
            acc_into(before, *x, gout.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)));
        }
        Op::Tanh(x) => {
            let out = &node.values;
            acc_into(before, *x, gout.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)));
        }
        Op::Concat { inputs, axis } => {
            let tail: usize = node.shape[axis + 1..].iter().product();
            let total_inner = node.shape[*axis] * tail;
            let outer = node.values.len() / total_inner;
            let mut offset = 0;
            for &r in inputs {
                let inner = before[r.0].shape[*axis] * tail;
                if let Some(g) = grad_buf(before, r) {
                    for o in 0..outer {
                        let src = &gout[o * total_inner + offset..o * total_inner + offset + inner];
                        for (slot, &v) in g[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *slot += v;
                        }
                    }
                }
                offset += inner;
            }
        }
        Op::Reshape(x) => {
            acc_into(before, *x, gout.iter().copied());
        }
        Op::Transpose2d(x) => {
            // node is n x m; input was m x n.
            let (n, m) = (node.shape[0], node.shape[1]);
            if let Some(gx) = grad_buf(before, *x) {
                for j in 0..n {
                    for i in 0..m {
                        gx[i * n + j] += gout[j * m + i];
                    }
                }
            }
        }
        Op::SliceRows { x, lo } => {
            let cols = node.shape[1];
            if let Some(gx) = grad_buf(before, *x) {
                for (slot, &g) in gx[lo * cols..].iter_mut().zip(gout) {
                    *slot += g;
                }
            }
        }
        Op::SliceCols { x, lo } => {
            let (rows, w) = (node.shape[0], node.shape[1]);
            let n = before[x.0].shape[1];
            if let Some(gx) = grad_buf(before, *x) {
                for i in 0..rows {
                    for j in 0..w {
                        gx[i * n + lo + j] += gout[i * w + j];
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, mean, inv_std } => {
            let (rows, d) = (node.shape[0], node.shape[1]);
            let [nx, ng, nb] = before.get_disjoint_mut([x.0, gamma.0, beta.0]).unwrap();
            let xv = &nx.values;
            let gv = &ng.values;
            for r in 0..rows {
                let grow = &gout[r * d..(r + 1) * d];
                let xrow = &xv[r * d..(r + 1) * d];
                let (mu, is) = (mean[r], inv_std[r]);
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for j in 0..d {
                    let xhat = (xrow[j] - mu) * is;
                    let dxhat = grow[j] * gv[j];
                    s1 += dxhat;
                    s2 += dxhat * xhat;
                }
                if nx.requires_grad {
                    let len = nx.values.len();
                    let gx = nx.grad.get_or_insert_with(|| vec![0.0; len]);
                    let xv2 = &nx.values;
                    for j in 0..d {
                        let xhat = (xv2[r * d + j] - mu) * is;
                        let dxhat = grow[j] * gv[j];
                        gx[r * d + j] += is * (dxhat - s1 / d as f64 - xhat * s2 / d as f64);
                    }
                }
                if ng.requires_grad {
                    let len = ng.values.len();
                    let gg = ng.grad.get_or_insert_with(|| vec![0.0; len]);
                    for j in 0..d {
                        let xhat = (xrow[j] - mu) * is;
                        gg[j] += grow[j] * xhat;
                    }
                }
                if nb.requires_grad {
                    let len = nb.values.len();
                    let gb = nb.grad.get_or_insert_with(|| vec![0.0; len]);
                    for j in 0..d {
                        gb[j] += grow[j];
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let d = *node.shape.last().unwrap();
            let y = &node.values;
            if let Some(gx) = grad_buf(before, *x) {
                for ((gxrow, yrow), grow) in gx.chunks_mut(d).zip(y.chunks(d)).zip(gout.chunks(d)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, yv)| g * yv).sum();
                    for j in 0..d {
                        gxrow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
        }
        Op::MaxReduce { x, argmax } => {
            if let Some(gx) = grad_buf(before, *x) {
                for (slot, &g) in argmax.iter().zip(gout) {
                    gx[*slot] += g;
                }
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let n = labels.len();
            let c = node_input_cols(before, *logits);
            let scale = gout[0] / n as f64;
            if let Some(gl) = grad_buf(before, *logits) {
                for (i, &label) in labels.iter().enumerate() {
                    let prow = &probs[i * c..(i + 1) * c];
                    let grow = &mut gl[i * c..(i + 1) * c];
                    for (slot, &p) in grow.iter_mut().zip(prow) {
                        *slot += scale * p;
                    }
                    grow[label] -= scale;
                }
            }
        }
        Op::Conv2d { x, w, b } => conv::conv2d_backward(before, node, gout, *x, *w, *b),
        Op::BatchNormTrain { x, gamma, beta, mean, inv_std } => {
            conv::batchnorm_train_backward(before, gout, *x, *gamma, *beta, mean, inv_std)
        }
        Op::BatchNormEval { x, gamma, beta, mean, inv_std } => {
            conv::batchnorm_eval_backward(before, gout, *x, *gamma, *beta, mean, inv_std)
        }
        Op::MaxPool2d { x, argmax } => {
            if let Some(gx) = grad_buf(before, *x) {
                for (slot, &g) in argmax.iter().zip(gout) {
                    gx[*slot] += g;
                }
            }
        }
    }
}

fn node_input_cols(before: &[Node], r: TensorRef) -> usize {
    *before[r.0].shape.last().unwrap()
}

#[cfg(test)]
mod tests {
    use super::super::Tape;

    #[test]
    fn relu_values_and_gradient_mask() {
        let mut tape = Tape::new();
        let x = tape.leaf_grad(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.values(y), &[0.0, 0.0, 2.0]);
        // Sum to a scalar so backward is defined.
        let ones = tape.leaf(vec![1, 3], vec![1.0; 3]).unwrap();
        let y2 = tape.reshape(y, vec![3, 1]).unwrap();
        let s = tape.matmul(ones, y2).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1, 6], vec![0.0; 6]).unwrap();
        let y = tape.softmax(x).unwrap();
        for &v in tape.values(y) {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(vec![3, 4], vec![1.0, -2.0, 0.5, 3.0, 100.0, 100.0, 100.0, 100.0, -50.0, 0.0, 50.0, 25.0])
            .unwrap();
        let y = tape.softmax(x).unwrap();
        for row in tape.values(y).chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_over_single_token_returns_value_row() {
        let mut tape = Tape::new();
        let q = tape.leaf(vec![1, 4], vec![3.0, -1.0, 0.0, 7.0]).unwrap();
        let k = tape.leaf(vec![1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let v = tape.leaf(vec![1, 2], vec![5.5, -2.5]).unwrap();
        let out = tape.scaled_dot_attention(q, k, v).unwrap();
        assert_eq!(tape.values(out), &[5.5, -2.5]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_classes() {
        let mut tape = Tape::new();
        let logits = tape.leaf(vec![2, 6], vec![0.0; 12]).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &[0, 3]).unwrap();
        assert!((tape.values(loss)[0] - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_vanishes_for_confident_correct_logit() {
        let mut tape = Tape::new();
        let mut vals = vec![0.0; 6];
        vals[2] = 50.0;
        let logits = tape.leaf(vec![1, 6], vals).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &[2]).unwrap();
        assert!(tape.values(loss)[0] < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_labels() {
        let mut tape = Tape::new();
        let logits = tape.leaf(vec![1, 6], vec![0.0; 6]).unwrap();
        assert!(tape.softmax_cross_entropy(logits, &[6]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_rows_sum_to_zero() {
        let mut tape = Tape::new();
        let logits = tape
            .leaf_grad(vec![4, 6], (0..24).map(|i| ((i * 7919) % 13) as f64 * 0.37 - 2.0).collect())
            .unwrap();
        let loss = tape.softmax_cross_entropy(logits, &[0, 5, 2, 2]).unwrap();
        tape.backward(loss).unwrap();
        for row in tape.grad(logits).unwrap().chunks(6) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn max_reduce_backward_is_one_hot_per_slice() {
        let mut tape = Tape::new();
        let x = tape.leaf_grad(vec![3, 2], vec![1.0, 5.0, 3.0, 2.0, 0.0, 4.0]).unwrap();
        let m = tape.max_over_axis(x, 0).unwrap();
        assert_eq!(tape.values(m), &[3.0, 5.0]);
        let m2 = tape.reshape(m, vec![2, 1]).unwrap();
        let ones = tape.leaf(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let s = tape.matmul(ones, m2).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_reduce_ties_pick_first_index() {
        let mut tape = Tape::new();
        let x = tape.leaf_grad(vec![3], vec![2.0, 2.0, 2.0]).unwrap();
        let m = tape.max_over_axis(x, 0).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn duplicated_timestep_leaves_max_unchanged() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![3, 2], vec![1.0, 5.0, 3.0, 2.0, 0.0, 4.0]).unwrap();
        let dup = tape.leaf(vec![4, 2], vec![1.0, 5.0, 3.0, 2.0, 3.0, 2.0, 0.0, 4.0]).unwrap();
        let a = tape.max_over_axis(x, 0).unwrap();
        let b = tape.max_over_axis(dup, 0).unwrap();
        assert_eq!(tape.values(a), tape.values(b));
    }

    #[test]
    fn concat_stitches_along_both_axes() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = tape.leaf(vec![2, 1], vec![9.0, 8.0]).unwrap();
        let cat = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(cat), &[2, 3]);
        assert_eq!(tape.values(cat), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);

        let c = tape.leaf(vec![1, 2], vec![7.0, 6.0]).unwrap();
        let cat0 = tape.concat(&[a, c], 0).unwrap();
        assert_eq!(tape.shape(cat0), &[3, 2]);
        assert_eq!(tape.values(cat0), &[1.0, 2.0, 3.0, 4.0, 7.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![2], vec![1.0, 2.0]).unwrap();
        let b = tape.leaf(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(tape.add(a, b).is_err());
        assert!(tape.matmul(a, b).is_err());
    }
}
