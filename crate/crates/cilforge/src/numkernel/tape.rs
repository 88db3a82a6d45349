//! Reverse-mode autodiff over a Wengert tape.
//!
//! A [`Tape`] records one forward pass as a topologically ordered list of
//! primitive operations. [`Tape::backward`] walks the list once in reverse,
//! pushing vector-Jacobian products into the inputs of every visited node.
//! Tensors bound without gradient tracking are constants: nothing downstream
//! of pure constants participates in backward.

use std::collections::HashMap;

use log::warn;

use crate::error::{CilError, Result};

use super::params::{ParamId, ParamSet};
use super::tensor::Tensor;

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var, ta: bool, tb: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Relu { x: Var },
    Gelu { x: Var },
    LayerNorm { x: Var, eps: f64 },
    Softmax { x: Var },
    Log { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize, len: usize },
    Mean { x: Var },
    Cosine { a: Var, b: Var },
}

struct Entry {
    value: Tensor,
    needs_grad: bool,
    op: Op,
    binding: Option<(u64, usize)>,
}

/// One forward pass under recording.
#[derive(Default)]
pub struct Tape {
    entries: Vec<Entry>,
}

// How one operand broadcasts against the other in add/mul.
#[derive(Clone, Copy, PartialEq)]
enum Cast {
    Full,   // same shape as output
    Scalar, // single element
    Row,    // rank-1 [n] against [m, n]
}

fn broadcast(lhs: &[usize], rhs: &[usize]) -> Option<(Vec<usize>, Cast, Cast)> {
    if lhs == rhs {
        return Some((lhs.to_vec(), Cast::Full, Cast::Full));
    }
    let lhs_n: usize = lhs.iter().product();
    let rhs_n: usize = rhs.iter().product();
    if rhs_n == 1 {
        return Some((lhs.to_vec(), Cast::Full, Cast::Scalar));
    }
    if lhs_n == 1 {
        return Some((rhs.to_vec(), Cast::Scalar, Cast::Full));
    }
    if lhs.len() == 2 && rhs.len() == 1 && lhs[1] == rhs[0] {
        return Some((lhs.to_vec(), Cast::Full, Cast::Row));
    }
    if rhs.len() == 2 && lhs.len() == 1 && rhs[1] == lhs[0] {
        return Some((rhs.to_vec(), Cast::Row, Cast::Full));
    }
    None
}

fn operand(data: &[f64], cast: Cast, idx: usize, cols: usize) -> f64 {
    match cast {
        Cast::Full => data[idx],
        Cast::Scalar => data[0],
        Cast::Row => data[idx % cols],
    }
}

// Reduce an output-shaped gradient back to the operand's shape.
fn reduce_grad(grad: &[f64], cast: Cast, shape: &[usize], cols: usize) -> Vec<f64> {
    match cast {
        Cast::Full => grad.to_vec(),
        Cast::Scalar => vec![grad.iter().sum()],
        Cast::Row => {
            let mut out = vec![0.0; cols];
            for (i, g) in grad.iter().enumerate() {
                out[i % cols] += g;
            }
            debug_assert_eq!(shape.iter().product::<usize>(), cols);
            out
        }
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

/// Raw matmul with per-operand transpose flags; shapes are pre-validated.
fn mm(
    a: &[f64],
    (ar, ac): (usize, usize),
    ta: bool,
    b: &[f64],
    (br, bc): (usize, usize),
    tb: bool,
) -> Vec<f64> {
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                let av = if ta { a[p * ac + i] } else { a[i * ac + p] };
                let bv = if tb { b[j * bc + p] } else { b[p * bc + j] };
                s += av * bv;
            }
            out[i * n + j] = s;
        }
    }
    out
}

fn gelu_tanh(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_tanh_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let (rows, cols) = x.row_shape();
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        let row = &x.data()[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in &mut out[r * cols..(r + 1) * cols] {
            *o /= sum;
        }
    }
    let mut t = Tensor::zeros(x.shape().to_vec());
    t.data_mut().copy_from_slice(&out);
    t
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.entries[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.entries[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        self.entries.push(Entry {
            value,
            needs_grad,
            op,
            binding: None,
        });
        Var(self.entries.len() - 1)
    }

    /// Bind a tensor as a constant (never receives gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// Bind a tensor as a leaf; gradient tracking follows its
    /// `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let ng = t.requires_grad;
        self.push(t, ng, Op::Leaf)
    }

    /// Bind a parameter; trainable parameters receive gradients, frozen ones
    /// enter as constants.
    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> Var {
        let p = set.get(id);
        let v = self.push(p.value.clone(), p.trainable, Op::Leaf);
        self.entries[v.0].binding = Some((set.token(), id.0));
        v
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, true)
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, true, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = (&self.entries[a.0].value, &self.entries[b.0].value);
        if av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(CilError::Shape {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (ar, ac) = (av.shape()[0], av.shape()[1]);
        let (br, bc) = (bv.shape()[0], bv.shape()[1]);
        let (m, k1) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k1 != k2 {
            return Err(CilError::Shape {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = mm(av.data(), (ar, ac), ta, bv.data(), (br, bc), tb);
        let needs = self.entries[a.0].needs_grad || self.entries[b.0].needs_grad;
        Ok(self.push(Tensor::new(vec![m, n], data)?, needs, Op::Matmul { a, b, ta, tb }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, false)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, true)
    }

    fn elementwise(&mut self, a: Var, b: Var, is_mul: bool) -> Result<Var> {
        let (av, bv) = (&self.entries[a.0].value, &self.entries[b.0].value);
        let Some((shape, ca, cb)) = broadcast(av.shape(), bv.shape()) else {
            return Err(CilError::Shape {
                op: if is_mul { "mul" } else { "add" },
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        };
        let numel: usize = shape.iter().product();
        let cols = *shape.last().unwrap();
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let x = operand(av.data(), ca, i, cols);
            let y = operand(bv.data(), cb, i, cols);
            data.push(if is_mul { x * y } else { x + y });
        }
        let needs = self.entries[a.0].needs_grad || self.entries[b.0].needs_grad;
        let op = if is_mul { Op::Mul { a, b } } else { Op::Add { a, b } };
        Ok(self.push(Tensor::new(shape, data)?, needs, op))
    }

    /// Multiply by a scalar constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c);
        self.mul(x, s)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = &self.entries[x.0].value;
        let data = v.data().iter().map(|&t| t.max(0.0)).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let needs = self.entries[x.0].needs_grad;
        self.push(out, needs, Op::Relu { x })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = &self.entries[x.0].value;
        let data = v.data().iter().map(|&t| gelu_tanh(t)).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let needs = self.entries[x.0].needs_grad;
        self.push(out, needs, Op::Gelu { x })
    }

    /// Normalize over the last dimension: `(x - mean) / sqrt(var + eps)`.
    /// Affine terms compose via `mul`/`add`.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let v = &self.entries[x.0].value;
        let (rows, cols) = v.row_shape();
        let mut data = vec![0.0; v.numel()];
        for r in 0..rows {
            let row = &v.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, t) in data[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (t - mean) * inv;
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let needs = self.entries[x.0].needs_grad;
        self.push(out, needs, Op::LayerNorm { x, eps })
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = &self.entries[x.0].value;
        if !v.is_finite() {
            return Err(CilError::Numeric("softmax on non-finite input".into()));
        }
        let out = softmax_rows(v);
        let needs = self.entries[x.0].needs_grad;
        Ok(self.push(out, needs, Op::Softmax { x }))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = &self.entries[x.0].value;
        let data = v.data().iter().map(|&t| t.ln()).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let needs = self.entries[x.0].needs_grad;
        self.push(out, needs, Op::Log { x })
    }

    /// Concatenate along `axis` (0 = rows, 1 = columns for rank-2).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(CilError::Contract("concat of zero tensors".into()));
        }
        let first = self.entries[parts[0].0].value.shape().to_vec();
        let rank = first.len();
        if axis >= rank {
            return Err(CilError::Shape {
                op: "concat",
                lhs: first,
                rhs: vec![axis],
            });
        }
        let mut out_shape = first.clone();
        for p in &parts[1..] {
            let s = self.entries[p.0].value.shape();
            if s.len() != rank
                || (0..rank).any(|d| d != axis && s[d] != out_shape[d])
            {
                return Err(CilError::Shape {
                    op: "concat",
                    lhs: out_shape,
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let numel: usize = out_shape.iter().product();
        let mut data = vec![0.0; numel];
        if axis == 0 {
            let mut off = 0;
            for p in parts {
                let v = &self.entries[p.0].value;
                data[off..off + v.numel()].copy_from_slice(v.data());
                off += v.numel();
            }
        } else {
            let rows = out_shape[0];
            let out_cols = out_shape[1];
            let mut col_off = 0;
            for p in parts {
                let v = &self.entries[p.0].value;
                let cols = v.shape()[1];
                for r in 0..rows {
                    data[r * out_cols + col_off..r * out_cols + col_off + cols]
                        .copy_from_slice(&v.data()[r * cols..(r + 1) * cols]);
                }
                col_off += cols;
            }
        }
        let needs = parts.iter().any(|p| self.entries[p.0].needs_grad);
        let op = Op::Concat {
            parts: parts.to_vec(),
            axis,
        };
        Ok(self.push(Tensor::new(out_shape, data)?, needs, op))
    }

    /// Contiguous slice along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = &self.entries[x.0].value;
        let shape = v.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(CilError::Range(format!(
                "slice [{start}, {}) on axis {axis} of shape {shape:?}",
                start + len
            )));
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let data = if shape.len() == 1 || axis == 0 {
            let row = if shape.len() == 1 { 1 } else { shape[1] };
            v.data()[start * row..(start + len) * row].to_vec()
        } else {
            let (rows, cols) = (shape[0], shape[1]);
            let mut d = Vec::with_capacity(rows * len);
            for r in 0..rows {
                d.extend_from_slice(&v.data()[r * cols + start..r * cols + start + len]);
            }
            d
        };
        let needs = self.entries[x.0].needs_grad;
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            needs,
            Op::Slice { x, axis, start, len },
        ))
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.entries[x.0].value;
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let needs = self.entries[x.0].needs_grad;
        self.push(Tensor::scalar(m), needs, Op::Mean { x })
    }

    /// Cosine similarity of two equally sized tensors viewed as flat vectors.
    /// Zero-norm operands yield similarity 0 (with a warning) and zero
    /// gradients, keeping prompt-key selection total.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.entries[a.0].value, &self.entries[b.0].value);
        if av.numel() != bv.numel() {
            return Err(CilError::Shape {
                op: "cosine",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let na = super::vecops::l2_norm(av.data());
        let nb = super::vecops::l2_norm(bv.data());
        let c = if na == 0.0 || nb == 0.0 {
            warn!("cosine similarity of zero-norm vector treated as 0");
            0.0
        } else {
            super::vecops::dot(av.data(), bv.data()) / (na * nb)
        };
        let needs = self.entries[a.0].needs_grad || self.entries[b.0].needs_grad;
        Ok(self.push(Tensor::scalar(c), needs, Op::Cosine { a, b }))
    }

    /// Reverse pass from a scalar loss. Every gradient-tracked tensor
    /// reachable from `loss` receives d loss / d tensor.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.entries[loss.0].value.is_scalar() {
            return Err(CilError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.entries[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.entries.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.entries[id].needs_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.backprop_entry(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut bindings = Vec::new();
        for (idx, e) in self.entries.iter().enumerate() {
            if let Some((token, pidx)) = e.binding {
                bindings.push((token, pidx, idx));
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|d| {
                    Tensor::new(self.entries[i].value.shape().to_vec(), d).expect("grad shape")
                })
            })
            .collect();
        Ok(Gradients { grads, bindings })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
        if !self.entries[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta.to_vec()),
        }
    }

    fn backprop_entry(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.entries[id].value;
        match &self.entries[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b, ta, tb } => {
                let av = &self.entries[a.0].value;
                let bv = &self.entries[b.0].value;
                let (ar, ac) = (av.shape()[0], av.shape()[1]);
                let (br, bc) = (bv.shape()[0], bv.shape()[1]);
                let (m, n) = (out.shape()[0], out.shape()[1]);
                if self.entries[a.0].needs_grad {
                    // d op(A) = G · op(B)ᵀ
                    let d_op_a = mm(g, (m, n), false, bv.data(), (br, bc), !tb);
                    let k = if *ta { ar } else { ac };
                    let da = if *ta { transpose(&d_op_a, m, k) } else { d_op_a };
                    self.accumulate(grads, *a, &da);
                }
                if self.entries[b.0].needs_grad {
                    // d op(B) = op(A)ᵀ · G
                    let d_op_b = mm(av.data(), (ar, ac), !ta, g, (m, n), false);
                    let k = if *ta { ar } else { ac };
                    let db = if *tb { transpose(&d_op_b, k, n) } else { d_op_b };
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Add { a, b } => {
                let ash = self.entries[a.0].value.shape();
                let bsh = self.entries[b.0].value.shape();
                let (shape, ca, cb) = broadcast(ash, bsh).expect("validated in forward");
                let cols = *shape.last().unwrap();
                if self.entries[a.0].needs_grad {
                    let da = reduce_grad(g, ca, ash, if ca == Cast::Row { cols } else { 0 });
                    self.accumulate(grads, *a, &da);
                }
                if self.entries[b.0].needs_grad {
                    let db = reduce_grad(g, cb, bsh, if cb == Cast::Row { cols } else { 0 });
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Mul { a, b } => {
                let av = &self.entries[a.0].value;
                let bv = &self.entries[b.0].value;
                let (shape, ca, cb) = broadcast(av.shape(), bv.shape()).expect("validated");
                let cols = *shape.last().unwrap();
                let numel: usize = shape.iter().product();
                if self.entries[a.0].needs_grad {
                    let full: Vec<f64> = (0..numel)
                        .map(|i| g[i] * operand(bv.data(), cb, i, cols))
                        .collect();
                    let da = reduce_grad(&full, ca, av.shape(), if ca == Cast::Row { cols } else { 0 });
                    self.accumulate(grads, *a, &da);
                }
                if self.entries[b.0].needs_grad {
                    let full: Vec<f64> = (0..numel)
                        .map(|i| g[i] * operand(av.data(), ca, i, cols))
                        .collect();
                    let db = reduce_grad(&full, cb, bv.shape(), if cb == Cast::Row { cols } else { 0 });
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Relu { x } => {
                let xv = &self.entries[x.0].value;
                let dx: Vec<f64> = xv
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&t, &gi)| if t > 0.0 { gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Gelu { x } => {
                let xv = &self.entries[x.0].value;
                let dx: Vec<f64> = xv
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&t, &gi)| gi * gelu_tanh_grad(t))
                    .collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::LayerNorm { x, eps } => {
                let xv = &self.entries[x.0].value;
                let (rows, cols) = xv.row_shape();
                let mut dx = vec![0.0; xv.numel()];
                for r in 0..rows {
                    let row = &xv.data()[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let y = &out.data()[r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var =
                        row.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let g_mean = gr.iter().sum::<f64>() / cols as f64;
                    let gy_mean =
                        gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for j in 0..cols {
                        dx[r * cols + j] = inv * (gr[j] - g_mean - y[j] * gy_mean);
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::Softmax { x } => {
                let (rows, cols) = out.row_shape();
                let mut dx = vec![0.0; out.numel()];
                for r in 0..rows {
                    let p = &out.data()[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let gp: f64 = gr.iter().zip(p).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = p[j] * (gr[j] - gp);
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::Log { x } => {
                let xv = &self.entries[x.0].value;
                let dx: Vec<f64> = xv.data().iter().zip(g).map(|(&t, &gi)| gi / t).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for p in parts {
                        let n = self.entries[p.0].value.numel();
                        self.accumulate(grads, *p, &g[off..off + n]);
                        off += n;
                    }
                } else {
                    let out_cols = out.shape()[1];
                    let rows = out.shape()[0];
                    let mut col_off = 0;
                    for p in parts {
                        let cols = self.entries[p.0].value.shape()[1];
                        let mut dp = vec![0.0; rows * cols];
                        for r in 0..rows {
                            dp[r * cols..(r + 1) * cols].copy_from_slice(
                                &g[r * out_cols + col_off..r * out_cols + col_off + cols],
                            );
                        }
                        self.accumulate(grads, *p, &dp);
                        col_off += cols;
                    }
                }
            }
            Op::Slice { x, axis, start, len } => {
                let xv = &self.entries[x.0].value;
                let shape = xv.shape();
                let mut dx = vec![0.0; xv.numel()];
                if shape.len() == 1 || *axis == 0 {
                    let row = if shape.len() == 1 { 1 } else { shape[1] };
                    dx[start * row..(start + len) * row].copy_from_slice(g);
                } else {
                    let cols = shape[1];
                    for r in 0..shape[0] {
                        dx[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::Mean { x } => {
                let n = self.entries[x.0].value.numel();
                let dx = vec![g[0] / n as f64; n];
                self.accumulate(grads, *x, &dx);
            }
            Op::Cosine { a, b } => {
                let av = &self.entries[a.0].value;
                let bv = &self.entries[b.0].value;
                let na = super::vecops::l2_norm(av.data());
                let nb = super::vecops::l2_norm(bv.data());
                if na == 0.0 || nb == 0.0 {
                    return;
                }
                let c = out.item();
                let gi = g[0];
                if self.entries[a.0].needs_grad {
                    let da: Vec<f64> = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&ai, &bi)| gi * (bi / (na * nb) - c * ai / (na * na)))
                        .collect();
                    self.accumulate(grads, *a, &da);
                }
                if self.entries[b.0].needs_grad {
                    let db: Vec<f64> = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&ai, &bi)| gi * (ai / (na * nb) - c * bi / (nb * nb)))
                        .collect();
                    self.accumulate(grads, *b, &db);
                }
            }
        }
    }
}

/// Gradients from one backward pass, addressable by tape variable or by the
/// parameters that were bound to the tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    bindings: Vec<(u64, usize, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Collapse into per-parameter gradients, summing over repeated bindings.
    pub fn into_param_grads(mut self) -> GradMap {
        let mut map: HashMap<(u64, usize), Tensor> = HashMap::new();
        for (token, pidx, entry) in &self.bindings {
            if let Some(g) = self.grads[*entry].take() {
                match map.entry((*token, *pidx)) {
                    std::collections::hash_map::Entry::Occupied(mut o) => {
                        let acc = o.get_mut();
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    std::collections::hash_map::Entry::Vacant(v) => {
                        v.insert(g);
                    }
                }
            }
        }
        GradMap { map }
    }
}

/// Per-parameter gradients keyed by (set token, param index).
#[derive(Default)]
pub struct GradMap {
    map: HashMap<(u64, usize), Tensor>,
}

impl GradMap {
    pub fn get(&self, set: &ParamSet, id: ParamId) -> Option<&Tensor> {
        self.map.get(&(set.token(), id.0))
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Merge another gradient map, summing overlapping entries.
    pub fn merge(&mut self, other: GradMap) {
        for (k, g) in other.map {
            match self.map.entry(k) {
                std::collections::hash_map::Entry::Occupied(mut o) => {
                    for (a, b) in o.get_mut().data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                std::collections::hash_map::Entry::Vacant(v) => {
                    v.insert(g);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::vecops;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let out = tape.matmul(i2, i2).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 0.0, 0.0, 1.0]);

        let a = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let out = tape.matmul(a, i2).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = crate::rng::SplitMix64::new(42);
        let a: Vec<f64> = (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        // Independent naive oracle.
        let mut expect = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for p in 0..4 {
                    expect[i * 2 + j] += a[i * 4 + p] * b[p * 2 + j];
                }
            }
        }
        let mut tape = Tape::new();
        let av = tape.constant(Tensor::new(vec![3, 4], a).unwrap());
        let bv = tape.constant(Tensor::new(vec![4, 2], b).unwrap());
        let out = tape.matmul(av, bv).unwrap();
        for (x, y) in tape.value(out).data().iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        match tape.matmul(a, b).unwrap_err() {
            CilError::Shape { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let s = tape.softmax(x).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        for c in [-3.0, 0.0, 17.5] {
            let x = tape.constant(Tensor::from_vec(vec![c; 4]));
            let s = tape.softmax(x).unwrap();
            for v in tape.value(s).data() {
                assert!((v - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_large_logits_no_overflow() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1000.0, 0.0]));
        let s = tape.softmax(x).unwrap();
        let v = tape.value(s).data();
        assert!(v[0] > 1.0 - 1e-12 && v[1] < 1e-12);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softmax_non_finite_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![f64::NAN, 0.0]));
        assert!(matches!(tape.softmax(x), Err(CilError::Numeric(_))));
    }

    #[test]
    fn backward_of_sum_like_mean() {
        // loss = sum(x) composed as mean(x) * n
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]).with_grad());
        let m = tape.mean(x);
        let loss = tape.scale(m, 3.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_dot() {
        // loss = x · x with x = [1, 2] -> grad [2, 4]
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap().with_grad());
        let loss = tape.matmul_nt(x, x).unwrap();
        assert_eq!(tape.value(loss).item(), 5.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]).with_grad());
        assert!(matches!(tape.backward(x), Err(CilError::Contract(_))));
    }

    #[test]
    fn cosine_basic_values() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::from_vec(vec![0.3, -1.2, 0.7]));
        let c = tape.cosine(v, v).unwrap();
        assert!((tape.value(c).item() - 1.0).abs() < 1e-12);

        let nv = tape.scale(v, -1.0).unwrap();
        let c = tape.cosine(v, nv).unwrap();
        assert!((tape.value(c).item() + 1.0).abs() < 1e-12);

        let e1 = tape.constant(Tensor::from_vec(vec![1.0, 0.0]));
        let e2 = tape.constant(Tensor::from_vec(vec![0.0, 1.0]));
        let c = tape.cosine(e1, e2).unwrap();
        assert_eq!(tape.value(c).item(), 0.0);
    }

    #[test]
    fn cosine_zero_norm_is_zero() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let v = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let c = tape.cosine(z, v).unwrap();
        assert_eq!(tape.value(c).item(), 0.0);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[&[1.0, 2.0]]));
        let b = tape.constant(t2(&[&[3.0, 4.0], &[5.0, 6.0]]));
        let cat = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(cat).shape(), &[3, 2]);
        let back = tape.slice(cat, 0, 1, 2).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(b).data());

        let cols = tape.slice(cat, 1, 1, 1).unwrap();
        assert_eq!(tape.value(cols).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut set = ParamSet::new();
        let wid = set.add("w", Tensor::from_vec(vec![2.0]), false);
        let mut tape = Tape::new();
        let w = tape.param(&set, wid);
        let x = tape.leaf(Tensor::from_vec(vec![3.0]).with_grad());
        let y = tape.mul(w, x).unwrap();
        let loss = tape.mean(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0]);
        let gm = grads.into_param_grads();
        assert!(gm.get(&set, wid).is_none());
    }

    #[test]
    fn repeated_binding_grads_sum() {
        let mut set = ParamSet::new();
        let wid = set.add("w", Tensor::from_vec(vec![1.5]), true);
        let mut tape = Tape::new();
        let w1 = tape.param(&set, wid);
        let w2 = tape.param(&set, wid);
        let s = tape.add(w1, w2).unwrap();
        let loss = tape.mean(s);
        let gm = tape.backward(loss).unwrap().into_param_grads();
        assert_eq!(gm.get(&set, wid).unwrap().data(), &[2.0]);
    }

    #[test]
    fn row_broadcast_add_reduces_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.leaf(Tensor::from_vec(vec![10.0, 20.0]).with_grad());
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let loss = tape.mean(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(b).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn gelu_matches_reference_points() {
        // gelu(0) = 0; gelu is odd-ish around zero with known value at 1.
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![0.0, 1.0, -1.0]));
        let y = tape.gelu(x);
        let v = tape.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 0.841192).abs() < 1e-5);
        assert!((v[2] + 0.158808).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_rows_standardized() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(&[&[1.0, 2.0, 3.0, 4.0], &[-5.0, 0.0, 5.0, 10.0]]));
        let y = tape.layer_norm(x, 1e-12);
        let v = tape.value(y);
        for r in 0..2 {
            let row = v.row(r);
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_property() {
        let mut rng = crate::rng::SplitMix64::new(9);
        for _ in 0..50 {
            let data: Vec<f64> = (0..12).map(|_| rng.uniform(-40.0, 40.0)).collect();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![3, 4], data).unwrap());
            let s = tape.softmax(x).unwrap();
            let v = tape.value(s);
            for r in 0..3 {
                let sum: f64 = v.row(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert!(v.row(r).iter().all(|&p| p > 0.0));
            }
        }
    }

    #[test]
    fn cosine_gradient_matches_manual() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(vec![1.0, 0.0]).with_grad());
        let b = tape.constant(Tensor::from_vec(vec![0.6, 0.8]));
        let c = tape.cosine(a, b).unwrap();
        let grads = tape.backward(c).unwrap();
        // c = 0.6; dc/da = b/|a||b| - c*a/|a|^2 = [0.6,0.8] - [0.6,0] = [0, 0.8]
        let da = grads.wrt(a).unwrap().data();
        assert!((da[0] - 0.0).abs() < 1e-12);
        assert!((da[1] - 0.8).abs() < 1e-12);
        let _ = vecops::cosine(&[1.0, 0.0], &[0.6, 0.8]);
    }
}
