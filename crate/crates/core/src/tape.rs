//! Reverse-mode automatic differentiation over a per-step tape.
//!
//! A [`Graph`] records every operation of one forward pass together with
//! whatever the backward rule needs. Parameters are pulled from a borrowed
//! [`ParamStore`]; a parameter used several times maps to a single tape node,
//! so shared heads accumulate their gradients naturally.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{gemm, Tensor};

/// Denominator guard for cosine similarity and row standardization.
pub const EPS: f64 = 1e-8;

/// Embeddings whose norm falls below this are rejected by [`Graph::cosine`].
pub const MIN_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub stride: usize,
    pub pad: usize,
}

enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Add(Var, Var),
    Scale(Var, f64),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Var, Var),
    Reverse {
        x: Var,
        lambda: f64,
    },
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv2dGeom,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    Cosine {
        a: Var,
        b: Var,
        squared: bool,
        cos: Vec<f64>,
        norms: Vec<(f64, f64)>,
    },
    SoftKl {
        student: Var,
        teacher_probs: Tensor,
        student_probs: Tensor,
        tau: f64,
    },
    Standardize {
        x: Var,
        std: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<String, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input (or constant). Its gradient is still tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?
            .clone();
        let v = self.push(t, Op::Leaf);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.value(v).shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(format!("{what}: expected a matrix, got shape {s:?}"))),
        }
    }

    /// `x · wᵀ + b` for `x: [B, I]`, `w: [O, I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (batch, in_w) = self.matrix_dims(x, "linear input")?;
        let (out_w, w_in) = self.matrix_dims(w, "linear weight")?;
        if w_in != in_w || self.value(b).shape() != [out_w] {
            return Err(Error::dim(format!(
                "linear expects input width {w_in}, got {in_w}"
            )));
        }
        let mut y = vec![0.0; batch * out_w];
        gemm(
            batch,
            in_w,
            out_w,
            self.value(x).data(),
            (in_w as isize, 1),
            self.value(w).data(),
            (1, in_w as isize),
            0.0,
            &mut y,
        );
        let bias = self.value(b).data();
        for row in y.chunks_mut(out_w) {
            for (v, bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        let value = Tensor::new(vec![batch, out_w], y)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(format!(
                "add: shapes {:?} and {:?} differ",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut value = ta.clone();
        value.add_assign(tb);
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Sums a non-empty list of equally shaped nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::dim("add_all needs at least one term"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "slice")?;
        if start > end || end > cols {
            return Err(Error::dim(format!(
                "slice [{start}, {end}) out of range for width {cols}"
            )));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&src.row(r)[start..end]);
        }
        let value = Tensor::new(vec![rows, end - start], data)?;
        Ok(self.push(value, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.matrix_dims(a, "concat lhs")?;
        let (rb, cb) = self.matrix_dims(b, "concat rhs")?;
        if ra != rb {
            return Err(Error::dim(format!("concat: {ra} rows vs {rb} rows")));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let value = Tensor::new(vec![ra, ca + cb], data)?;
        Ok(self.push(value, Op::ConcatCols(a, b)))
    }

    /// Gradient reversal: identity forward, `-lambda` times the upstream
    /// gradient backward.
    pub fn reverse_grad(&mut self, x: Var, lambda: f64) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Reverse { x, lambda })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = vec![t.rows(), t.row_len()];
        self.reshape(x, shape)
    }

    /// Square-kernel convolution, `x: [B, C, H, W]`, `w: [O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: Conv2dGeom) -> Result<Var> {
        let (&[batch, ch, h, wd], &[out_c, w_c, k, k2]) =
            (self.value(x).shape(), self.value(w).shape())
        else {
            return Err(Error::dim(format!(
                "conv2d expects [B,C,H,W] input and [O,C,k,k] weight, got {:?} and {:?}",
                self.value(x).shape(),
                self.value(w).shape()
            )));
        };
        if w_c != ch || k != k2 || self.value(b).shape() != [out_c] {
            return Err(Error::dim(format!(
                "conv2d weight {:?} incompatible with {ch} input channels",
                self.value(w).shape()
            )));
        }
        let (ho, wo) = conv_out(h, wd, k, geom)?;
        let ckk = ch * k * k;
        let mut out = vec![0.0; batch * out_c * ho * wo];
        let mut cols = vec![0.0; ckk * ho * wo];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bias = self.value(b).data();
        for n in 0..batch {
            let img = &xv[n * ch * h * wd..(n + 1) * ch * h * wd];
            im2col(img, ch, h, wd, k, geom, ho, wo, &mut cols);
            let dst = &mut out[n * out_c * ho * wo..(n + 1) * out_c * ho * wo];
            gemm(
                out_c,
                ckk,
                ho * wo,
                wv,
                (ckk as isize, 1),
                &cols,
                ((ho * wo) as isize, 1),
                0.0,
                dst,
            );
            for (o, plane) in dst.chunks_mut(ho * wo).enumerate() {
                for v in plane {
                    *v += bias[o];
                }
            }
        }
        let value = Tensor::new(vec![batch, out_c, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }))
    }

    /// Max pooling with implicit `-inf` padding.
    pub fn max_pool2d(&mut self, x: Var, k: usize, geom: Conv2dGeom) -> Result<Var> {
        let &[batch, ch, h, wd] = self.value(x).shape() else {
            return Err(Error::dim("max_pool2d expects [B,C,H,W]"));
        };
        let (ho, wo) = conv_out(h, wd, k, geom)?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(batch * ch * ho * wo);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..batch * ch {
            let base = plane * h * wd;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for ky in 0..k {
                        for kx in 0..k {
                            let (iy, ix) = (
                                (oy * geom.stride + ky) as isize - geom.pad as isize,
                                (ox * geom.stride + kx) as isize - geom.pad as isize,
                            );
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let i = base + iy as usize * wd + ix as usize;
                            if best_i == usize::MAX || xv[i] > best {
                                best = xv[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        let value = Tensor::new(vec![batch, ch, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }))
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let &[batch, ch, h, wd] = self.value(x).shape() else {
            return Err(Error::dim("global_avg_pool expects [B,C,H,W]"));
        };
        let area = (h * wd) as f64;
        let data = self
            .value(x)
            .data()
            .chunks(h * wd)
            .map(|p| p.iter().sum::<f64>() / area)
            .collect();
        let value = Tensor::new(vec![batch, ch], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x)))
    }

    /// Batch-mean of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (batch, k) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != batch {
            return Err(Error::dim(format!(
                "cross_entropy: {batch} rows vs {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index(format!("target {bad} outside [0, {k})")));
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(batch * k);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let lse = log_sum_exp(row);
            total += lse - row[t];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let probs = Tensor::new(vec![batch, k], probs)?;
        let value = Tensor::scalar(total / batch as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Batch-mean of the row-wise cosine similarity (or its square).
    pub fn cosine(&mut self, a: Var, b: Var, squared: bool) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(a, "cosine lhs")?;
        if self.matrix_dims(b, "cosine rhs")? != (rows, cols) {
            return Err(Error::dim("cosine: operand shapes differ"));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let mut cos = Vec::with_capacity(rows);
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let (ra, rb) = (ta.row(r), tb.row(r));
            let na = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na < MIN_NORM || nb < MIN_NORM {
                return Err(Error::Degenerate(format!(
                    "embedding norm {:.3e} below {MIN_NORM:e} in row {r}",
                    na.min(nb)
                )));
            }
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            cos.push(dot / (na * nb).max(EPS));
            norms.push((na, nb));
        }
        let mean = if squared {
            cos.iter().map(|c| c * c).sum::<f64>()
        } else {
            cos.iter().sum::<f64>()
        } / rows as f64;
        Ok(self.push(
            Tensor::scalar(mean),
            Op::Cosine {
                a,
                b,
                squared,
                cos,
                norms,
            },
        ))
    }

    /// Batch-mean `KL(p_teacher || softmax(student / tau))` where
    /// `teacher_probs` is a constant distribution per row.
    pub fn soft_kl(&mut self, student: Var, teacher_probs: &Tensor, tau: f64) -> Result<Var> {
        let (batch, k) = self.matrix_dims(student, "soft_kl")?;
        if teacher_probs.shape() != [batch, k] {
            return Err(Error::dim(format!(
                "soft_kl: teacher {:?} vs student [{batch}, {k}]",
                teacher_probs.shape()
            )));
        }
        let scaled = self.value(student).map(|v| v / tau);
        let mut q = Vec::with_capacity(batch * k);
        let mut total = 0.0;
        for r in 0..batch {
            let row = scaled.row(r);
            let lse = log_sum_exp(row);
            for (&s, &p) in row.iter().zip(teacher_probs.row(r)) {
                let log_q = s - lse;
                if p > 0.0 {
                    total += p * (p.ln() - log_q);
                }
                q.push(log_q.exp());
            }
        }
        let student_probs = Tensor::new(vec![batch, k], q)?;
        Ok(self.push(
            Tensor::scalar(total / batch as f64),
            Op::SoftKl {
                student,
                teacher_probs: teacher_probs.clone(),
                student_probs,
                tau,
            },
        ))
    }

    /// Row-wise z-scoring with population standard deviation; the divisor is
    /// floored at [`EPS`], so a constant row maps to zeros.
    pub fn standardize_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "standardize")?;
        if cols < 2 {
            return Err(Error::dim("standardize needs at least two columns"));
        }
        let tx = self.value(x);
        let mut out = Vec::with_capacity(rows * cols);
        let mut stds = Vec::with_capacity(rows);
        for r in 0..rows {
            let (y, std) = standardize_row(tx.row(r));
            out.extend(y);
            stds.push(std);
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(value, Op::Standardize { x, std: stds }))
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (batch, in_w) = (xv.shape()[0], xv.shape()[1]);
                let out_w = wv.shape()[0];
                let mut dx = vec![0.0; batch * in_w];
                gemm(
                    batch,
                    out_w,
                    in_w,
                    g.data(),
                    (out_w as isize, 1),
                    wv.data(),
                    (in_w as isize, 1),
                    0.0,
                    &mut dx,
                );
                let mut dw = vec![0.0; out_w * in_w];
                gemm(
                    out_w,
                    batch,
                    in_w,
                    g.data(),
                    (1, out_w as isize),
                    xv.data(),
                    (in_w as isize, 1),
                    0.0,
                    &mut dw,
                );
                let mut db = vec![0.0; out_w];
                for row in g.data().chunks(out_w) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
                acc(*w, Tensor::new(wv.shape().to_vec(), dw).unwrap());
                acc(*b, Tensor::new(vec![out_w], db).unwrap());
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                acc(*x, Tensor::new(xv.shape().to_vec(), data).unwrap());
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Scale(x, f) => acc(*x, g.map(|v| v * f)),
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (rows, cols) = (xv.shape()[0], xv.shape()[1]);
                let width = g.shape()[1];
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + width].copy_from_slice(g.row(r));
                }
                acc(*x, Tensor::new(vec![rows, cols], d).unwrap());
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).shape()[1];
                let rows = g.shape()[0];
                let total = g.shape()[1];
                let (mut da, mut db) = (Vec::new(), Vec::new());
                for r in 0..rows {
                    da.extend_from_slice(&g.row(r)[..ca]);
                    db.extend_from_slice(&g.row(r)[ca..]);
                }
                acc(*a, Tensor::new(vec![rows, ca], da).unwrap());
                acc(*b, Tensor::new(vec![rows, total - ca], db).unwrap());
            }
            Op::Reverse { x, lambda } => acc(*x, g.map(|v| -lambda * v)),
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                acc(*x, g.clone().reshape(shape).unwrap());
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let &[batch, ch, h, wd] = xv.shape() else {
                    unreachable!()
                };
                let (out_c, k) = (wv.shape()[0], wv.shape()[2]);
                let (ho, wo) = (g.shape()[2], g.shape()[3]);
                let (ckk, hw) = (ch * k * k, ho * wo);
                let mut dx = vec![0.0; xv.numel()];
                let mut dw = vec![0.0; wv.numel()];
                let mut db = vec![0.0; out_c];
                let mut cols = vec![0.0; ckk * hw];
                let mut dcols = vec![0.0; ckk * hw];
                for n in 0..batch {
                    let img = &xv.data()[n * ch * h * wd..(n + 1) * ch * h * wd];
                    let gy = &g.data()[n * out_c * hw..(n + 1) * out_c * hw];
                    im2col(img, ch, h, wd, k, *geom, ho, wo, &mut cols);
                    gemm(
                        out_c,
                        hw,
                        ckk,
                        gy,
                        (hw as isize, 1),
                        &cols,
                        (1, hw as isize),
                        1.0,
                        &mut dw,
                    );
                    gemm(
                        ckk,
                        out_c,
                        hw,
                        wv.data(),
                        (1, ckk as isize),
                        gy,
                        (hw as isize, 1),
                        0.0,
                        &mut dcols,
                    );
                    let dimg = &mut dx[n * ch * h * wd..(n + 1) * ch * h * wd];
                    col2im(&dcols, ch, h, wd, k, *geom, ho, wo, dimg);
                    for (o, plane) in gy.chunks(hw).enumerate() {
                        db[o] += plane.iter().sum::<f64>();
                    }
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
                acc(*w, Tensor::new(wv.shape().to_vec(), dw).unwrap());
                acc(*b, Tensor::new(vec![out_c], db).unwrap());
            }
            Op::MaxPool2d { x, argmax } => {
                let xv = self.value(*x);
                let mut dx = vec![0.0; xv.numel()];
                for (&src, &d) in argmax.iter().zip(g.data()) {
                    dx[src] += d;
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let area = xv.shape()[2] * xv.shape()[3];
                let mut dx = Vec::with_capacity(xv.numel());
                for &d in g.data() {
                    dx.extend(std::iter::repeat_n(d / area as f64, area));
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.item() / targets.len() as f64;
                let mut d = probs.clone();
                let k = probs.shape()[1];
                for (r, &t) in targets.iter().enumerate() {
                    d.data_mut()[r * k + t] -= 1.0;
                }
                acc(*logits, d.map(|v| v * scale));
            }
            Op::Cosine {
                a,
                b,
                squared,
                cos,
                norms,
            } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let rows = cos.len();
                let cols = ta.shape()[1];
                let mut da = Vec::with_capacity(rows * cols);
                let mut db = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    let (ra, rb) = (ta.row(r), tb.row(r));
                    let (na, nb) = norms[r];
                    let c = cos[r];
                    let mut scale = g.item() / rows as f64;
                    if *squared {
                        scale *= 2.0 * c;
                    }
                    let den = na * nb;
                    if den >= EPS {
                        for j in 0..cols {
                            da.push(scale * (rb[j] / den - c * ra[j] / (na * na)));
                            db.push(scale * (ra[j] / den - c * rb[j] / (nb * nb)));
                        }
                    } else {
                        for j in 0..cols {
                            da.push(scale * rb[j] / EPS);
                            db.push(scale * ra[j] / EPS);
                        }
                    }
                }
                acc(*a, Tensor::new(vec![rows, cols], da).unwrap());
                acc(*b, Tensor::new(vec![rows, cols], db).unwrap());
            }
            Op::SoftKl {
                student,
                teacher_probs,
                student_probs,
                tau,
            } => {
                let batch = student_probs.shape()[0];
                let scale = g.item() / (tau * batch as f64);
                let data = student_probs
                    .data()
                    .iter()
                    .zip(teacher_probs.data())
                    .map(|(q, p)| scale * (q - p))
                    .collect();
                acc(
                    *student,
                    Tensor::new(student_probs.shape().to_vec(), data).unwrap(),
                );
            }
            Op::Standardize { x, std } => {
                let y = &node.value;
                let cols = y.shape()[1];
                let mut dx = Vec::with_capacity(y.numel());
                for (r, &s) in std.iter().enumerate() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mean_g = gr.iter().sum::<f64>() / cols as f64;
                    if s > EPS {
                        let mean_gy =
                            gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        dx.extend(
                            gr.iter()
                                .zip(yr)
                                .map(|(gj, yj)| (gj - mean_g - yj * mean_gy) / s),
                        );
                    } else {
                        dx.extend(gr.iter().map(|gj| (gj - mean_g) / EPS));
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
        }
    }
}

/// Gradients of one backward pass, addressable by node or parameter name.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_vars: HashMap<String, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// `None` when the parameter was not touched by the forward pass.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.param_vars.get(name).and_then(|&v| self.wrt(v))
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Returns the standardized row and the (unfloored) population std.
pub(crate) fn standardize_row(row: &[f64]) -> (Vec<f64>, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let std = (row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let div = std.max(EPS);
    (row.iter().map(|v| (v - mean) / div).collect(), std)
}

fn conv_out(h: usize, w: usize, k: usize, geom: Conv2dGeom) -> Result<(usize, usize)> {
    let (hp, wp) = (h + 2 * geom.pad, w + 2 * geom.pad);
    if hp < k || wp < k || geom.stride == 0 {
        return Err(Error::dim(format!(
            "kernel {k} does not fit a {h}x{w} input with padding {}",
            geom.pad
        )));
    }
    Ok(((hp - k) / geom.stride + 1, (wp - k) / geom.stride + 1))
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    img: &[f64],
    ch: usize,
    h: usize,
    w: usize,
    k: usize,
    geom: Conv2dGeom,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let hw = ho * wo;
    for c in 0..ch {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        dst[oy * wo + ox] =
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                0.0
                            } else {
                                img[(c * h + iy as usize) * w + ix as usize]
                            };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    ch: usize,
    h: usize,
    w: usize,
    k: usize,
    geom: Conv2dGeom,
    ho: usize,
    wo: usize,
    img: &mut [f64],
) {
    let hw = ho * wo;
    for c in 0..ch {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        img[(c * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    /// Central-difference check of `d f / d input` for a scalar graph builder.
    fn check_input_grad(
        inputs: Vec<Tensor>,
        build: impl Fn(&mut Graph, &[Var]) -> Var,
        tol: f64,
    ) {
        let empty = ParamStore::new();
        let mut g = Graph::new(&empty);
        let vars: Vec<Var> = inputs.iter().cloned().map(|t| g.input(t)).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);
        let h = 1e-5;
        for (which, t) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[which]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            for j in 0..t.numel() {
                let eval = |delta: f64| {
                    let mut perturbed = inputs.clone();
                    perturbed[which].data_mut()[j] += delta;
                    let mut g = Graph::new(&empty);
                    let vs: Vec<Var> = perturbed.into_iter().map(|t| g.input(t)).collect();
                    let o = build(&mut g, &vs);
                    g.value(o).item()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[j];
                assert!(
                    (a - fd).abs() <= tol * (1.0 + fd.abs()),
                    "input {which}[{j}]: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn linear_relu_ce_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 4], &mut rng);
        let w = random(&[5, 4], &mut rng);
        let b = random(&[5], &mut rng);
        check_input_grad(
            vec![x, w, b],
            |g, v| {
                let y = g.linear(v[0], v[1], v[2]).unwrap();
                let y = g.relu(y);
                g.cross_entropy(y, &[0, 4, 2]).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn conv_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 2, 5, 5], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        check_input_grad(
            vec![x, w, b],
            |g, v| {
                let geom = Conv2dGeom { stride: 2, pad: 1 };
                let y = g.conv2d(v[0], v[1], v[2], geom).unwrap();
                let y = g.max_pool2d(y, 2, Conv2dGeom { stride: 1, pad: 0 }).unwrap();
                let y = g.global_avg_pool(y).unwrap();
                g.cross_entropy(y, &[1, 2]).unwrap()
            },
            1e-6,
        );
    }

    fn softmax_row(row: &[f64]) -> Vec<f64> {
        let lse = log_sum_exp(row);
        row.iter().map(|v| (v - lse).exp()).collect()
    }

    #[test]
    fn cosine_kl_standardize_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[4, 6], &mut rng);
        let b = random(&[4, 6], &mut rng);
        let teacher = Tensor::new(
            vec![4, 6],
            (0..4)
                .flat_map(|_| softmax_row(&random(&[6], &mut rng).into_data()))
                .collect(),
        )
        .unwrap();
        check_input_grad(
            vec![a, b],
            move |g, v| {
                let c1 = g.cosine(v[0], v[1], false).unwrap();
                let c2 = g.cosine(v[0], v[1], true).unwrap();
                let s = g.standardize_rows(v[1]).unwrap();
                let kl = g.soft_kl(s, &teacher, 2.5).unwrap();
                let cat = g.concat_cols(v[0], v[1]).unwrap();
                let sl = g.slice_cols(cat, 3, 9).unwrap();
                let c3 = g.cosine(sl, v[0], false).unwrap();
                g.add_all(&[c1, c2, kl, c3]).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn reversal_is_identity_forward_and_negated_backward() {
        let empty = ParamStore::new();
        let mut g = Graph::new(&empty);
        let z = g.input(Tensor::from_rows(&[vec![1.0, -2.5]]).unwrap());
        let r = g.reverse_grad(z, 0.5);
        assert_eq!(g.value(r), g.value(z));
        let l = g.cross_entropy(r, &[0]).unwrap();
        let grads = g.backward(l);
        let up = grads.wrt(r).unwrap();
        let down = grads.wrt(z).unwrap();
        for (u, d) in up.data().iter().zip(down.data()) {
            assert_eq!(*d, -0.5 * u);
        }
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        let empty = ParamStore::new();
        let mut g = Graph::new(&empty);
        let a = g.input(Tensor::zeros(&[1, 3]));
        let b = g.input(Tensor::full(&[1, 3], 1.0));
        assert!(matches!(g.cosine(a, b, false), Err(Error::Degenerate(_))));
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let empty = ParamStore::new();
        let mut g = Graph::new(&empty);
        let a = g.input(Tensor::zeros(&[1, 3]));
        assert!(matches!(g.cross_entropy(a, &[3]), Err(Error::Index(_))));
    }

    #[test]
    fn shared_parameter_accumulates_gradient() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        p.insert("b", Tensor::zeros(&[2]));
        let mut g = Graph::new(&p);
        let x = g.input(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let (w, b) = (g.param("w").unwrap(), g.param("b").unwrap());
        let y1 = g.linear(x, w, b).unwrap();
        let w2 = g.param("w").unwrap();
        assert_eq!(w, w2);
        let y2 = g.linear(x, w2, b).unwrap();
        let l1 = g.cross_entropy(y1, &[0]).unwrap();
        let l2 = g.cross_entropy(y2, &[0]).unwrap();
        let l = g.add(l1, l2).unwrap();
        let both = g.backward(l);
        let single = {
            let mut g = Graph::new(&p);
            let x = g.input(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
            let (w, b) = (g.param("w").unwrap(), g.param("b").unwrap());
            let y = g.linear(x, w, b).unwrap();
            let l = g.cross_entropy(y, &[0]).unwrap();
            g.backward(l).param("w").unwrap().clone()
        };
        for (a, s) in both.param("w").unwrap().data().iter().zip(single.data()) {
            assert!((a - 2.0 * s).abs() < 1e-15);
        }
    }
}
