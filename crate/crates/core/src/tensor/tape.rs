//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] records every operation of one forward pass. Values live in
//! the tape; [`Tape::backward`] walks the records in reverse and returns the
//! gradient of a scalar loss with respect to every node that requires one.

use super::kernels::{self, ConvGeom, Mat};
use super::{shape_err, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-channel batch statistics produced by a train-mode BatchNorm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n - 1) variance, as used for running-statistics updates.
    pub var_unbiased: Vec<f64>,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    ScaleRows {
        w: Var,
        s: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Channel layout of a BatchNorm input: N x C or N x C x (spatial...).
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        2 => Ok((shape[0], shape[1], 1)),
        4 => Ok((shape[0], shape[1], shape[2] * shape[3])),
        _ => Err(shape_err("batch_norm", format!("expected rank 2 or 4, got {shape:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// 2-D cross-correlation. `x`: N x C x H x W, `w`: M x C x K x K,
    /// `b`: M.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("input {xs:?}, weight {ws:?}; both must be rank 4"),
            ));
        }
        if ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(shape_err(
                "conv2d",
                format!("input {xs:?} incompatible with weight {ws:?}"),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive"));
        }
        let k = ws[2];
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return Err(shape_err(
                "conv2d",
                format!("kernel {k} larger than padded input {xs:?}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [ws[0]] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias {:?} for {} filters", self.value(b).shape(), ws[0]),
                ));
            }
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            h: xs[2],
            w: xs[3],
            out_ch: ws[0],
            k,
            stride,
            pad,
            oh: (xs[2] + 2 * pad - k) / stride + 1,
            ow: (xs[3] + 2 * pad - k) / stride + 1,
        };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let (m, kk, np) = (geom.out_ch, geom.patch(), geom.cols_width());
        let mut out = vec![0.0; m * np];
        kernels::gemm(
            m,
            kk,
            np,
            Mat::row_major(self.value(w).data(), kk),
            Mat::row_major(&cols, np),
            0.0,
            &mut out,
        );
        let mut y = kernels::channels_to_batch(&out, m, geom.batch, geom.out_plane());
        if let Some(b) = b {
            let bias = self.value(b).data();
            let p = geom.out_plane();
            for (i, chunk) in y.chunks_mut(p).enumerate() {
                let bm = bias[i % m];
                chunk.iter_mut().for_each(|v| *v += bm);
            }
        }
        let value = Tensor::new(vec![geom.batch, m, geom.oh, geom.ow], y)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    /// Fully connected layer. `x`: N x In, `w`: Out x In, `b`: Out.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err(
                "dense",
                format!("input {xs:?} incompatible with weight {ws:?}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [ws[0]] {
                return Err(shape_err(
                    "dense",
                    format!("bias {:?} for {} outputs", self.value(b).shape(), ws[0]),
                ));
            }
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut y = vec![0.0; n * dout];
        kernels::gemm(
            n,
            din,
            dout,
            Mat::row_major(self.value(x).data(), din),
            Mat::transposed(self.value(w).data(), din),
            0.0,
            &mut y,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in y.chunks_mut(dout) {
                row.iter_mut().zip(bias).for_each(|(v, bb)| *v += bb);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![n, dout], y)?;
        Ok(self.push(value, Op::Dense { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(x);
        self.push(value, Op::Relu { x }, rg)
    }

    /// Non-overlapping max pooling with window and stride `size`.
    pub fn max_pool(&mut self, x: Var, size: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || size == 0 || xs[2] < size || xs[3] < size {
            return Err(shape_err("max_pool", format!("input {xs:?}, window {size}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / size, w / size);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * size * w + j * size;
                    for di in 0..size {
                        for dj in 0..size {
                            let idx = base + (i * size + di) * w + j * size + dj;
                            if data[idx] > data[best] || data[idx].is_nan() {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    /// BatchNorm using batch statistics. Returns the output and the batch
    /// statistics for running-average updates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c, p) = channel_layout(self.value(x).shape())?;
        self.check_affine(gamma, beta, c)?;
        let count = (n * p) as f64;
        let data = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                for &v in &data[(ni * c + ci) * p..][..p] {
                    mean[ci] += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for ni in 0..n {
            for ci in 0..c {
                for &v in &data[(ni * c + ci) * p..][..p] {
                    let d = v - mean[ci];
                    var[ci] += d * d;
                }
            }
        }
        let biased: Vec<f64> = var.iter().map(|s| s / count).collect();
        let var_unbiased: Vec<f64> = var
            .iter()
            .map(|s| if count > 1.0 { s / (count - 1.0) } else { 0.0 })
            .collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let v = self.affine_normalize(x, gamma, beta, &mean, inv_std, true, (n, c, p))?;
        Ok((v, BatchStats { mean, var_unbiased }))
    }

    /// BatchNorm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let layout = channel_layout(self.value(x).shape())?;
        let c = layout.1;
        self.check_affine(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("batch_norm", "running statistics length mismatch"));
        }
        let inv_std = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.affine_normalize(x, gamma, beta, running_mean, inv_std, false, layout)
    }

    fn check_affine(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err(
                "batch_norm",
                format!(
                    "affine parameters {:?}/{:?} for {c} channels",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn affine_normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        train: bool,
        (n, c, p): (usize, usize, usize),
    ) -> Result<Var> {
        let data = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; data.len()];
        let mut y = vec![0.0; data.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * p;
                for i in off..off + p {
                    let h = (data[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    y[i] = g[ci] * h + bt[ci];
                }
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), y)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    /// Broadcast multiply of `w` (M x ...) by per-row factors `s`
    /// (M x 1 x ... x 1, same rank as `w`).
    pub fn scale_rows(&mut self, w: Var, s: Var) -> Result<Var> {
        let ws = self.value(w).shape();
        let ss = self.value(s).shape();
        if ws.is_empty() || ss.len() != ws.len() || ss[0] != ws[0] || ss[1..].iter().any(|&d| d != 1) {
            return Err(shape_err("scale_rows", format!("weight {ws:?}, scaling {ss:?}")));
        }
        let row = self.value(w).numel() / ws[0];
        let factors = self.value(s).data();
        let mut out = self.value(w).data().to_vec();
        for (chunk, &f) in out.chunks_mut(row).zip(factors) {
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let value = Tensor::new(ws.to_vec(), out)?;
        let rg = self.rg(w) || self.rg(s);
        Ok(self.push(value, Op::ScaleRows { w, s }, rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum { x }, rg)
    }

    /// N x ... -> N x (product of the rest).
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        if xs.is_empty() {
            return Err(shape_err("flatten", "cannot flatten a scalar"));
        }
        let n = xs[0];
        let rest = self.value(x).numel() / n;
        let value = self.value(x).clone().reshape(vec![n, rest])?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Mean softmax cross-entropy of N x K logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.value(logits).shape();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("logits {ls:?} for {} labels", labels.len()),
            ));
        }
        let (n, k) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("label {bad} >= {k} classes"),
            ));
        }
        let data = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &data[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - max).exp() / z;
            }
            loss += z.ln() + max - row[label];
        }
        let value = Tensor::scalar(loss / n as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contrib),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, cols } => {
                let (m, kk, np, p) = (geom.out_ch, geom.patch(), geom.cols_width(), geom.out_plane());
                let d_out = kernels::batch_to_channels(g, m, geom.batch, p);
                if self.rg(*w) {
                    let mut dw = vec![0.0; m * kk];
                    kernels::gemm(
                        m,
                        np,
                        kk,
                        Mat::row_major(&d_out, np),
                        Mat::transposed(cols, np),
                        0.0,
                        &mut dw,
                    );
                    acc(*w, dw);
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let db = d_out.chunks(np).map(|r| r.iter().sum()).collect();
                    acc(b, db);
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; kk * np];
                    kernels::gemm(
                        kk,
                        m,
                        np,
                        Mat::transposed(self.value(*w).data(), kk),
                        Mat::row_major(&d_out, np),
                        0.0,
                        &mut dcols,
                    );
                    acc(*x, kernels::col2im(&dcols, geom));
                }
            }
            Op::Dense { x, w, b } => {
                let xs = self.value(*x).shape();
                let (n, din) = (xs[0], xs[1]);
                let dout = self.value(*w).shape()[0];
                if self.rg(*x) {
                    let mut dx = vec![0.0; n * din];
                    kernels::gemm(
                        n,
                        dout,
                        din,
                        Mat::row_major(g, dout),
                        Mat::row_major(self.value(*w).data(), din),
                        0.0,
                        &mut dx,
                    );
                    acc(*x, dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; dout * din];
                    kernels::gemm(
                        dout,
                        n,
                        din,
                        Mat::transposed(g, dout),
                        Mat::row_major(self.value(*x).data(), din),
                        0.0,
                        &mut dw,
                    );
                    acc(*w, dw);
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let mut db = vec![0.0; dout];
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    acc(b, db);
                }
            }
            Op::Relu { x } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                acc(*x, dx);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                acc(*x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, p) = channel_layout(self.value(*x).shape()).expect("validated in forward");
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_dxhat = vec![0.0; c];
                let mut sum_dxhat_xhat = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * p;
                        for i in off..off + p {
                            dgamma[ci] += g[i] * xhat[i];
                            dbeta[ci] += g[i];
                            let dh = g[i] * gam[ci];
                            sum_dxhat[ci] += dh;
                            sum_dxhat_xhat[ci] += dh * xhat[i];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let count = (n * p) as f64;
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * p;
                            for i in off..off + p {
                                let dh = g[i] * gam[ci];
                                dx[i] = if *train {
                                    inv_std[ci] / count * (count * dh - sum_dxhat[ci] - xhat[i] * sum_dxhat_xhat[ci])
                                } else {
                                    dh * inv_std[ci]
                                };
                            }
                        }
                    }
                    acc(*x, dx);
                }
                if self.rg(*gamma) {
                    acc(*gamma, dgamma);
                }
                if self.rg(*beta) {
                    acc(*beta, dbeta);
                }
            }
            Op::ScaleRows { w, s } => {
                let wv = self.value(*w).data();
                let rows = self.value(*s).numel();
                let row = wv.len() / rows;
                let sv = self.value(*s).data();
                if self.rg(*w) {
                    let dw = g
                        .chunks(row)
                        .zip(sv)
                        .flat_map(|(gr, &f)| gr.iter().map(move |v| v * f))
                        .collect();
                    acc(*w, dw);
                }
                if self.rg(*s) {
                    let ds = g
                        .chunks(row)
                        .zip(wv.chunks(row))
                        .map(|(gr, wr)| gr.iter().zip(wr).map(|(a, b)| a * b).sum())
                        .collect();
                    acc(*s, ds);
                }
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let da = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    acc(*a, da);
                }
                if self.rg(*b) {
                    let db = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    acc(*b, db);
                }
            }
            Op::Sum { x } => {
                acc(*x, vec![g[0]; self.value(*x).numel()]);
            }
            Op::Reshape { x } => {
                acc(*x, g.to_vec());
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let k = probs.len() / labels.len();
                let scale = g[0] / labels.len() as f64;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                acc(*logits, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn conv_of_ones_sums_patch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[1, 1, 3, 3]), false);
        let w = tape.leaf(Tensor::ones(&[1, 1, 3, 3]), false);
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).item(), 9.0);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], vec![-1.0, 0.0, 2.0]), false);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn eval_batch_norm_with_unit_stats_is_identity() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 3 * 2 * 2).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = tape.leaf(t(&[2, 3, 2, 2], data.clone()), false);
        let g = tape.leaf(Tensor::ones(&[3]), false);
        let b = tape.leaf(Tensor::zeros(&[3]), false);
        let y = tape.batch_norm_eval(x, g, b, &[0.0; 3], &[1.0; 3], 0.0).unwrap();
        assert_eq!(tape.value(y).data(), data.as_slice());
    }

    #[test]
    fn linear_sum_gradient_is_input() {
        let mut tape = Tape::new();
        let xs = vec![0.5, -1.5, 2.0];
        let w = tape.leaf(t(&[3], vec![1.0, 2.0, 3.0]), true);
        let x = tape.leaf(t(&[3], xs.clone()), false);
        let prod = tape.mul(w, x).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), xs.as_slice());
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[1, 2, 4, 4]), false);
        let w = tape.leaf(Tensor::ones(&[3, 1, 3, 3]), false);
        let err = tape.conv2d(x, w, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("[1, 2, 4, 4]"));
        let d = tape.leaf(Tensor::ones(&[2, 3]), false);
        let dw = tape.leaf(Tensor::ones(&[4, 2]), false);
        assert!(tape.dense(d, dw, None).is_err());
        let s = tape.leaf(Tensor::ones(&[3, 1]), false);
        assert!(tape.scale_rows(w, s).is_err());
    }

    #[test]
    fn nan_propagates_to_loss() {
        let mut tape = Tape::new();
        let logits = tape.leaf(t(&[1, 2], vec![f64::NAN, 0.0]), true);
        let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!(tape.value(loss).check_finite("loss").is_err());
    }
}
