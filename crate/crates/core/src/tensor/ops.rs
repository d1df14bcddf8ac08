use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// A recorded operation: parent references plus whatever the local gradient
/// rule needs from the forward pass.
pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    Relu(Tensor),
    Sigmoid(Tensor),
    MatMul(Tensor, Tensor),
    BatchMatMul {
        a: Tensor,
        b: Tensor,
        trans_b: bool,
    },
    AddRows(Tensor, Tensor),
    Softmax {
        x: Tensor,
        temperature: f64,
    },
    LogSoftmax {
        x: Tensor,
        temperature: f64,
    },
    LayerNorm {
        x: Tensor,
        gain: Tensor,
        bias: Tensor,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        x: Tensor,
        index: Rc<Vec<usize>>,
    },
    ConcatRows(Tensor, Tensor),
    Reshape(Tensor),
    Sum(Tensor),
    Mean(Tensor),
    CrossEntropy {
        logits: Tensor,
        labels: Rc<Vec<usize>>,
        probs: Vec<f64>,
    },
    SoftCrossEntropy {
        logits: Tensor,
        targets: Tensor,
        probs: Vec<f64>,
    },
    KlDiv {
        p: Tensor,
        q: Tensor,
    },
    KlDivLogits {
        target: Tensor,
        logits: Tensor,
        temperature: f64,
        probs: Vec<f64>,
    },
    Bce {
        pred: Tensor,
        target: Tensor,
    },
    PearsonRows {
        a: Tensor,
        b: Tensor,
        /// Per row: (centered a / |a_c|, centered b / |b_c|, |a_c|, |b_c|, r), or
        /// None for degenerate rows whose correlation is pinned to 1.
        cache: Vec<Option<PearsonCache>>,
    },
}

pub(crate) struct PearsonCache {
    a_hat: Vec<f64>,
    b_hat: Vec<f64>,
    a_norm: f64,
    b_norm: f64,
    r: f64,
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::AddRows(a, b) => vec![a, b],
            Op::ConcatRows(a, b) => vec![a, b],
            Op::BatchMatMul { a, b, .. } => vec![a, b],
            Op::Scale(x, _) | Op::Relu(x) | Op::Sigmoid(x) | Op::Reshape(x) | Op::Sum(x) | Op::Mean(x) => vec![x],
            Op::Softmax { x, .. } | Op::LogSoftmax { x, .. } | Op::Gather { x, .. } => vec![x],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::SoftCrossEntropy { logits, targets, .. } => vec![logits, targets],
            Op::KlDiv { p, q } => vec![p, q],
            Op::KlDivLogits { target, logits, .. } => vec![target, logits],
            Op::Bce { pred, target } => vec![pred, target],
            Op::PearsonRows { a, b, .. } => vec![a, b],
        }
    }

    /// Gradients for each parent given the output gradient `g`.
    pub(crate) fn backward(&self, g: &[f64], out: &[f64], out_shape: &[usize]) -> Vec<(Tensor, Vec<f64>)> {
        match self {
            Op::Add(a, b) => vec![(a.clone(), g.to_vec()), (b.clone(), g.to_vec())],
            Op::Sub(a, b) => vec![(a.clone(), g.to_vec()), (b.clone(), g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let ad = a.data();
                let bd = b.data();
                let ga = g.iter().zip(bd.iter()).map(|(g, b)| g * b).collect();
                let gb = g.iter().zip(ad.iter()).map(|(g, a)| g * a).collect();
                vec![(a.clone(), ga), (b.clone(), gb)]
            }
            Op::Scale(x, c) => vec![(x.clone(), g.iter().map(|v| v * c).collect())],
            Op::Relu(x) => {
                let xd = x.data();
                let gx = g
                    .iter()
                    .zip(xd.iter())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(x.clone(), gx)]
            }
            Op::Sigmoid(x) => {
                let gx = g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect();
                vec![(x.clone(), gx)]
            }
            Op::MatMul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let ad = a.data();
                let bd = b.data();
                let mut out = Vec::with_capacity(2);
                if a.requires_grad() {
                    // dA = dC · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    matmul_nt(g, &bd, &mut ga, m, n, k);
                    out.push((a.clone(), ga));
                }
                if b.requires_grad() {
                    // dB = Aᵀ · dC
                    let mut gb = vec![0.0; k * n];
                    matmul_tn(&ad, g, &mut gb, m, k, n);
                    out.push((b.clone(), gb));
                }
                out
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (groups, n, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                let m = out_shape[2];
                let ad = a.data();
                let bd = b.data();
                let mut ga = vec![0.0; ad.len()];
                let mut gb = vec![0.0; bd.len()];
                for gi in 0..groups {
                    let ao = gi * n * k;
                    let bo = gi * k * m;
                    let go = gi * n * m;
                    let gs = &g[go..go + n * m];
                    if *trans_b {
                        // C = A·Bᵀ, B is [m, k]: dA = dC·B, dB = dCᵀ·A
                        matmul_nn(gs, &bd[bo..bo + m * k], &mut ga[ao..ao + n * k], n, m, k);
                        matmul_tn(gs, &ad[ao..ao + n * k], &mut gb[bo..bo + m * k], n, m, k);
                    } else {
                        matmul_nt(gs, &bd[bo..bo + k * m], &mut ga[ao..ao + n * k], n, m, k);
                        matmul_tn(&ad[ao..ao + n * k], gs, &mut gb[bo..bo + k * m], n, k, m);
                    }
                }
                vec![(a.clone(), ga), (b.clone(), gb)]
            }
            Op::AddRows(x, y) => {
                let d = *x.shape().last().unwrap();
                let r = y.numel() / d;
                let mut gy = vec![0.0; y.numel()];
                for (i, row) in g.chunks(d).enumerate() {
                    let base = (i % r) * d;
                    for (j, v) in row.iter().enumerate() {
                        gy[base + j] += v;
                    }
                }
                vec![(x.clone(), g.to_vec()), (y.clone(), gy)]
            }
            Op::Softmax { x, temperature } => {
                let n = *out_shape.last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), dst) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dst[j] = yr[j] * (gr[j] - dot) / temperature;
                    }
                }
                vec![(x.clone(), gx)]
            }
            Op::LogSoftmax { x, temperature } => {
                let n = *out_shape.last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), dst) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..n {
                        dst[j] = (gr[j] - yr[j].exp() * total) / temperature;
                    }
                }
                vec![(x.clone(), gx)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = gain.numel();
                let gd = gain.data();
                let mut gx = vec![0.0; g.len()];
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                for (row, (gr, xr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        ggain[j] += gr[j] * xr[j];
                        gbias[j] += gr[j];
                        let dxh = gr[j] * gd[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xr[j];
                    }
                    let inv = inv_std[row];
                    let dst = &mut gx[row * d..(row + 1) * d];
                    let df = d as f64;
                    for j in 0..d {
                        let dxh = gr[j] * gd[j];
                        dst[j] = inv / df * (df * dxh - sum_dxhat - xr[j] * sum_dxhat_xhat);
                    }
                }
                vec![(x.clone(), gx), (gain.clone(), ggain), (bias.clone(), gbias)]
            }
            Op::Gather { x, index } => {
                let mut gx = vec![0.0; x.numel()];
                for (v, &src) in g.iter().zip(index.iter()) {
                    gx[src] += v;
                }
                vec![(x.clone(), gx)]
            }
            Op::ConcatRows(a, b) => {
                let na = a.numel();
                vec![(a.clone(), g[..na].to_vec()), (b.clone(), g[na..].to_vec())]
            }
            Op::Reshape(x) => vec![(x.clone(), g.to_vec())],
            Op::Sum(x) => vec![(x.clone(), vec![g[0]; x.numel()])],
            Op::Mean(x) => {
                let n = x.numel() as f64;
                vec![(x.clone(), vec![g[0] / n; x.numel()])]
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = logits.shape()[1];
                let n = labels.len() as f64;
                let mut gx = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    gx[i * c + y] -= 1.0;
                }
                for v in gx.iter_mut() {
                    *v *= g[0] / n;
                }
                vec![(logits.clone(), gx)]
            }
            Op::SoftCrossEntropy { logits, targets, probs } => {
                let c = logits.shape()[1];
                let rows = logits.shape()[0];
                let n = rows as f64;
                let td = targets.data();
                let mut gz = vec![0.0; probs.len()];
                let mut gt = vec![0.0; probs.len()];
                for i in 0..rows {
                    let t = &td[i * c..(i + 1) * c];
                    let p = &probs[i * c..(i + 1) * c];
                    let tsum: f64 = t.iter().sum();
                    for j in 0..c {
                        gz[i * c + j] = g[0] * (p[j] * tsum - t[j]) / n;
                        gt[i * c + j] = -g[0] * p[j].max(f64::MIN_POSITIVE).ln() / n;
                    }
                }
                vec![(logits.clone(), gz), (targets.clone(), gt)]
            }
            Op::KlDiv { p, q } => {
                let rows = p.shape()[0] as f64;
                let pd = p.data();
                let qd = q.data();
                let mut gp = vec![0.0; pd.len()];
                let mut gq = vec![0.0; pd.len()];
                for i in 0..pd.len() {
                    if pd[i] > 0.0 {
                        gp[i] = g[0] * (pd[i].ln() - qd[i].ln() + 1.0) / rows;
                        gq[i] = -g[0] * pd[i] / qd[i] / rows;
                    }
                }
                vec![(p.clone(), gp), (q.clone(), gq)]
            }
            Op::KlDivLogits {
                target,
                logits,
                temperature,
                probs,
            } => {
                let c = logits.shape()[1];
                let rows = logits.shape()[0];
                let n = rows as f64;
                let td = target.data();
                let mut gz = vec![0.0; probs.len()];
                let mut gt = vec![0.0; probs.len()];
                for i in 0..rows {
                    let t = &td[i * c..(i + 1) * c];
                    let q = &probs[i * c..(i + 1) * c];
                    let tsum: f64 = t.iter().sum();
                    for j in 0..c {
                        gz[i * c + j] = g[0] * (q[j] * tsum - t[j]) / (temperature * n);
                        if t[j] > 0.0 {
                            gt[i * c + j] = g[0] * (t[j].ln() - q[j].max(f64::MIN_POSITIVE).ln() + 1.0) / n;
                        }
                    }
                }
                vec![(target.clone(), gt), (logits.clone(), gz)]
            }
            Op::Bce { pred, target } => {
                let n = pred.numel() as f64;
                let pd = pred.data();
                let td = target.data();
                let mut gp = vec![0.0; pd.len()];
                let mut gt = vec![0.0; pd.len()];
                for i in 0..pd.len() {
                    let p = pd[i];
                    let t = td[i];
                    gp[i] = g[0] * (p - t) / (p * (1.0 - p)).max(1e-12) / n;
                    gt[i] = g[0] * (clamped_ln(1.0 - p) - clamped_ln(p)) / n;
                }
                vec![(pred.clone(), gp), (target.clone(), gt)]
            }
            Op::PearsonRows { a, b, cache } => {
                let c = a.shape()[1];
                let mut ga = vec![0.0; a.numel()];
                let mut gb = vec![0.0; b.numel()];
                for (i, entry) in cache.iter().enumerate() {
                    let Some(pc) = entry else { continue };
                    for j in 0..c {
                        ga[i * c + j] = g[i] * (pc.b_hat[j] - pc.r * pc.a_hat[j]) / pc.a_norm;
                        gb[i * c + j] = g[i] * (pc.a_hat[j] - pc.r * pc.b_hat[j]) / pc.b_norm;
                    }
                }
                vec![(a.clone(), ga), (b.clone(), gb)]
            }
        }
    }
}

pub(crate) fn clamped_ln(v: f64) -> f64 {
    if v <= 0.0 {
        -100.0
    } else {
        v.ln().max(-100.0)
    }
}

/// C[m×n] += A·B where A is m×k and B is k×n, each given by (row, column)
/// strides so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides address only elements inside `a`, `b` and `c`,
    // whose lengths the callers derive from the same dimensions.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C[m×n] += A[m×k] · B[k×n]
fn matmul_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(m, k, n, a, (k, 1), b, (n, 1), c);
}

/// C[m×k] += A[m×n] · B[k×n]ᵀ
fn matmul_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    gemm(m, n, k, a, (n, 1), b, (1, n), c);
}

/// C[k×n] += A[m×k]ᵀ · B[m×n]
fn matmul_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(k, m, n, a, (1, k), b, (n, 1), c);
}

fn require_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Parameter(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let ad = a.data();
    let bd = b.data();
    ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect()
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        require_same("add", self, other)?;
        let data = zip_map(self, other, |a, b| a + b);
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        require_same("sub", self, other)?;
        let data = zip_map(self, other, |a, b| a - b);
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Sub(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        require_same("mul", self, other)?;
        let data = zip_map(self, other, |a, b| a * b);
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Mul(self.clone(), other.clone())))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Scale(self.clone(), c))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// max(x, 0); the gradient at exactly 0 is 0.
    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Relu(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Sigmoid(self.clone()))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape().len() != 2 || other.shape().len() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let (m, k, n) = (self.shape()[0], self.shape()[1], other.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn(&self.data(), &other.data(), &mut out, m, k, n);
        Ok(Tensor::from_op(out, vec![m, n], Op::MatMul(self.clone(), other.clone())))
    }

    /// Grouped product of `[g, n, k]` with `[g, k, m]`, or with `[g, m, k]`
    /// transposed when `trans_b` is set.
    pub fn batch_matmul(&self, other: &Tensor, trans_b: bool) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("batch_matmul", sa, sb));
        }
        let (groups, n, k) = (sa[0], sa[1], sa[2]);
        let m = if trans_b { sb[1] } else { sb[2] };
        let ad = self.data();
        let bd = other.data();
        let mut out = vec![0.0; groups * n * m];
        for gi in 0..groups {
            let a = &ad[gi * n * k..(gi + 1) * n * k];
            let b = &bd[gi * k * m..(gi + 1) * k * m];
            let c = &mut out[gi * n * m..(gi + 1) * n * m];
            if trans_b {
                matmul_nt(a, b, c, n, k, m);
            } else {
                matmul_nn(a, b, c, n, k, m);
            }
        }
        drop(ad);
        drop(bd);
        Ok(Tensor::from_op(
            out,
            vec![groups, n, m],
            Op::BatchMatMul {
                a: self.clone(),
                b: other.clone(),
                trans_b,
            },
        ))
    }

    /// Adds the rows of `rows` ([r, d] or [d]) cyclically to the rows of a
    /// `[N, d]` matrix: row `i` receives `rows[i % r]`. Covers bias vectors
    /// (r = 1) and per-token position embeddings (r = tokens).
    pub fn add_rows(&self, rows: &Tensor) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 2 {
            return Err(Error::shape("add_rows", xs, rows.shape()));
        }
        let d = xs[1];
        if rows.numel() % d != 0 || xs[0] % (rows.numel() / d) != 0 {
            return Err(Error::shape("add_rows", xs, rows.shape()));
        }
        let yd = rows.data();
        let r = yd.len() / d;
        let mut out = self.to_vec();
        for (i, row) in out.chunks_mut(d).enumerate() {
            let src = &yd[(i % r) * d..(i % r + 1) * d];
            for (o, v) in row.iter_mut().zip(src) {
                *o += v;
            }
        }
        drop(yd);
        Ok(Tensor::from_op(out, xs.to_vec(), Op::AddRows(self.clone(), rows.clone())))
    }

    /// Softmax over the last axis of `x / temperature`.
    pub fn softmax(&self, temperature: f64) -> Result<Tensor> {
        check_temperature(temperature)?;
        let n = *self.shape().last().unwrap();
        let mut out = self.to_vec();
        for row in out.chunks_mut(n) {
            softmax_row(row, temperature);
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Softmax {
                x: self.clone(),
                temperature,
            },
        ))
    }

    pub fn log_softmax(&self, temperature: f64) -> Result<Tensor> {
        check_temperature(temperature)?;
        let n = *self.shape().last().unwrap();
        let mut out = self.to_vec();
        for row in out.chunks_mut(n) {
            log_softmax_row(row, temperature);
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::LogSoftmax {
                x: self.clone(),
                temperature,
            },
        ))
    }

    /// Per-row normalization over the last axis followed by an affine map.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().unwrap();
        if gain.numel() != d || bias.numel() != d {
            return Err(Error::shape("layer_norm", self.shape(), gain.shape()));
        }
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!("layer_norm eps must be positive, got {eps}")));
        }
        let xd = self.data();
        let gd = gain.data();
        let bd = bias.data();
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
        drop((xd, gd, bd));
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                xhat,
                inv_std,
            },
        ))
    }

    /// `out[i] = flat(self)[index[i]]`, reshaped to `shape`. Used for
    /// patchifying, head splitting, transposes and row selection.
    pub fn gather(&self, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(Error::shape("gather", shape, &[index.len()]));
        }
        let xd = self.data();
        if let Some(&bad) = index.iter().find(|&&i| i >= xd.len()) {
            return Err(Error::shape("gather", self.shape(), &[bad]));
        }
        let out = index.iter().map(|&i| xd[i]).collect();
        drop(xd);
        Ok(Tensor::from_op(out, shape.to_vec(), Op::Gather { x: self.clone(), index }))
    }

    /// Selects whole rows of a 2-D tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(Error::shape("select_rows", self.shape(), &[rows.len()]));
        }
        let d = self.shape()[1];
        let index: Vec<usize> = rows.iter().flat_map(|&r| r * d..(r + 1) * d).collect();
        self.gather(Rc::new(index), &[rows.len(), d])
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(Error::shape("transpose", self.shape(), &[2]));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let index: Vec<usize> = (0..c).flat_map(|j| (0..r).map(move |i| i * c + j)).collect();
        self.gather(Rc::new(index), &[c, r])
    }

    /// Stacks two tensors along the leading axis.
    pub fn concat_rows(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape()[1..] != other.shape()[1..] {
            return Err(Error::shape("concat_rows", self.shape(), other.shape()));
        }
        let mut data = self.to_vec();
        data.extend_from_slice(&other.data());
        let mut shape = self.shape().to_vec();
        shape[0] += other.shape()[0];
        Ok(Tensor::from_op(data, shape, Op::ConcatRows(self.clone(), other.clone())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), Op::Reshape(self.clone())))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![s], vec![1], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let s = self.data().iter().sum::<f64>() / self.numel() as f64;
        Tensor::from_op(vec![s], vec![1], Op::Mean(self.clone()))
    }

    /// Pearson correlation of matching rows of two `[n, c]` matrices.
    /// Rows where either side has (near) zero variance get correlation 1 and
    /// no gradient; the count of such rows is returned alongside.
    pub fn pearson_rows(&self, other: &Tensor) -> Result<(Tensor, usize)> {
        require_same("pearson_rows", self, other)?;
        if self.shape().len() != 2 || self.shape()[1] < 2 {
            return Err(Error::shape("pearson_rows", self.shape(), other.shape()));
        }
        let (rows, c) = (self.shape()[0], self.shape()[1]);
        let ad = self.data();
        let bd = other.data();
        let mut out = vec![0.0; rows];
        let mut cache = Vec::with_capacity(rows);
        let mut degenerate = 0;
        for i in 0..rows {
            let a = &ad[i * c..(i + 1) * c];
            let b = &bd[i * c..(i + 1) * c];
            let ma = a.iter().sum::<f64>() / c as f64;
            let mb = b.iter().sum::<f64>() / c as f64;
            let ac: Vec<f64> = a.iter().map(|v| v - ma).collect();
            let bc: Vec<f64> = b.iter().map(|v| v - mb).collect();
            let na = ac.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = bc.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na < 1e-12 || nb < 1e-12 {
                out[i] = 1.0;
                cache.push(None);
                degenerate += 1;
                continue;
            }
            let a_hat: Vec<f64> = ac.iter().map(|v| v / na).collect();
            let b_hat: Vec<f64> = bc.iter().map(|v| v / nb).collect();
            let r: f64 = a_hat.iter().zip(&b_hat).map(|(x, y)| x * y).sum();
            out[i] = r;
            cache.push(Some(PearsonCache {
                a_hat,
                b_hat,
                a_norm: na,
                b_norm: nb,
                r,
            }));
        }
        drop((ad, bd));
        let t = Tensor::from_op(
            out,
            vec![rows],
            Op::PearsonRows {
                a: self.clone(),
                b: other.clone(),
                cache,
            },
        );
        Ok((t, degenerate))
    }
}

pub(crate) fn softmax_row(row: &mut [f64], temperature: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v / temperature - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn log_softmax_row(row: &mut [f64], temperature: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
    let lse = row.iter().map(|&v| (v / temperature - max).exp()).sum::<f64>().ln() + max;
    for v in row.iter_mut() {
        *v = *v / temperature - lse;
    }
}
