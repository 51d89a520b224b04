//! Tape-based reverse-mode autodiff.
//!
//! Nodes are appended in construction order, so the tape is topologically
//! sorted by construction and backward simply walks it in reverse. Leaves
//! created with [`Graph::param`] require gradients; [`Graph::constant`] leaves
//! do not, and no gradient work is done for sub-graphs that only touch
//! constants.

use crate::error::{dim_err, Error, Result};
use crate::numcore::tensor::{matmul_nt, matmul_tn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>, Axis),
    Slice {
        x: Var,
        axis: Axis,
        start: usize,
    },
    Transpose(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        bias: Var,
    },
    Gelu(Var),
    Mse(Var, Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    Rotary {
        x: Var,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or exact zeros when `v` did not participate.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Row-wise numerically stable softmax of a `rows x n` buffer.
pub fn softmax_rows(data: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, orow) in data.chunks(n).zip(out.chunks_mut(n)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite output from {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies `v`'s current value into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Matmul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    /// `x[r, c] + bias[c]` for every row `r`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.value(x).dims2()?;
        if self.value(bias).len() != c {
            return dim_err(format!(
                "row bias of {} elements for width {c}",
                self.value(bias).len()
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        self.push(out, Op::AddRow(x, bias), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return dim_err("concat of zero tensors");
        }
        let out = match axis {
            Axis::Rows => {
                let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
                Tensor::concat_rows(&ts)?
            }
            Axis::Cols => {
                let mut rows = None;
                let mut widths = Vec::with_capacity(parts.len());
                for &p in parts {
                    let (r, c) = self.value(p).dims2()?;
                    if *rows.get_or_insert(r) != r {
                        return dim_err("column concat with differing row counts");
                    }
                    widths.push(c);
                }
                let r = rows.unwrap_or(0);
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(r * total);
                for i in 0..r {
                    for (&p, &w) in parts.iter().zip(&widths) {
                        data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
                    }
                }
                Tensor::new(vec![r, total], data)?
            }
        };
        let rg = self.rg(parts);
        self.push(out, Op::Concat(parts.to_vec(), axis), rg)
    }

    pub fn slice(&mut self, x: Var, axis: Axis, start: usize, end: usize) -> Result<Var> {
        let out = match axis {
            Axis::Rows => self.value(x).slice_rows(start, end)?,
            Axis::Cols => {
                let (r, c) = self.value(x).dims2()?;
                if start >= end || end > c {
                    return dim_err(format!("column slice {start}..{end} out of 0..{c}"));
                }
                let w = end - start;
                let src = self.value(x).data();
                let mut data = Vec::with_capacity(r * w);
                for i in 0..r {
                    data.extend_from_slice(&src[i * c + start..i * c + end]);
                }
                Tensor::new(vec![r, w], data)?
            }
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::Slice { x, axis, start }, rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Transpose(x), rg)
    }

    /// Softmax over the last axis of a matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2()?;
        let data = softmax_rows(self.value(x).data(), n);
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (rows, d) = self.value(x).dims2()?;
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return dim_err(format!(
                "layer_norm width {d} with gain {} / bias {}",
                self.value(gain).len(),
                self.value(bias).len()
            ));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(vec![rows, d], out)?;
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                xhat,
                inv_std,
                bias,
            },
            rg,
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu);
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Mean over all elements of `(a - b)^2`, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.expect_same_shape(tb)?;
        let n = ta.len() as f64;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::scalar(s / n), Op::Mse(a, b), rg)
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        if ids.is_empty() {
            return dim_err("embedding lookup of zero ids");
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return dim_err(format!("embedding id {id} out of vocabulary {v}"));
            }
            data.extend_from_slice(&self.value(table).data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(&[table]);
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Rotates adjacent channel pairs `(2j, 2j+1)` of every row by the angles
    /// whose cosines/sines are given per element (both entries of a pair carry
    /// the same angle). `cos`/`sin` have the shape of `x`.
    pub fn rotary(&mut self, x: Var, cos: &[f64], sin: &[f64]) -> Result<Var> {
        let (_, d) = self.value(x).dims2()?;
        let n = self.value(x).len();
        if d % 2 != 0 || cos.len() != n || sin.len() != n {
            return dim_err(format!(
                "rotary on width {d} with {} / {} angle entries for {n} elements",
                cos.len(),
                sin.len()
            ));
        }
        let out_data = rotate_pairs(self.value(x).data(), cos, sin, false);
        let out = Tensor::new(self.value(x).shape().to_vec(), out_data)?;
        let rg = self.rg(&[x]);
        self.push(
            out,
            Op::Rotary {
                x,
                cos: cos.to_vec(),
                sin: sin.to_vec(),
            },
            rg,
        )
    }

    /// Sum of scalars, reduced left to right.
    pub fn sum_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::Dimension("sum of zero scalars".into()))?;
        let mut acc = first;
        for &x in rest {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = self.nodes.len();
        if self.value(loss).len() != 1 {
            return dim_err(format!(
                "backward from non-scalar of shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let shapes = self
            .nodes
            .iter()
            .map(|nd| nd.value.shape().to_vec())
            .collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads, shapes });
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let g = gout.data();
            match &node.op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (m, k) = self.value(*a).dims2()?;
                    let (_, nn) = self.value(*b).dims2()?;
                    if self.requires_grad(*a) {
                        let da = matmul_nt(g, self.value(*b).data(), m, nn, k);
                        accumulate(&mut grads, *a, &[m, k], &da);
                    }
                    if self.requires_grad(*b) {
                        let db = matmul_tn(self.value(*a).data(), g, m, k, nn);
                        accumulate(&mut grads, *b, &[k, nn], &db);
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.requires_grad(v) {
                            accumulate(&mut grads, v, gout.shape(), g);
                        }
                    }
                }
                Op::AddRow(x, bias) => {
                    if self.requires_grad(*x) {
                        accumulate(&mut grads, *x, gout.shape(), g);
                    }
                    if self.requires_grad(*bias) {
                        let c = self.value(*bias).len();
                        let mut db = vec![0.0; c];
                        for row in g.chunks(c) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        let shape = self.value(*bias).shape().to_vec();
                        accumulate(&mut grads, *bias, &shape, &db);
                    }
                }
                Op::Mul(a, b) => {
                    if self.requires_grad(*a) {
                        let d: Vec<f64> = g
                            .iter()
                            .zip(self.value(*b).data())
                            .map(|(x, y)| x * y)
                            .collect();
                        accumulate(&mut grads, *a, gout.shape(), &d);
                    }
                    if self.requires_grad(*b) {
                        let d: Vec<f64> = g
                            .iter()
                            .zip(self.value(*a).data())
                            .map(|(x, y)| x * y)
                            .collect();
                        accumulate(&mut grads, *b, gout.shape(), &d);
                    }
                }
                Op::Scale(a, s) => {
                    if self.requires_grad(*a) {
                        let d: Vec<f64> = g.iter().map(|x| x * s).collect();
                        accumulate(&mut grads, *a, gout.shape(), &d);
                    }
                }
                Op::Concat(parts, axis) => match axis {
                    Axis::Rows => {
                        let mut off = 0;
                        for &p in parts {
                            let len = self.value(p).len();
                            if self.requires_grad(p) {
                                let shape = self.value(p).shape().to_vec();
                                accumulate(&mut grads, p, &shape, &g[off..off + len]);
                            }
                            off += len;
                        }
                    }
                    Axis::Cols => {
                        let (r, total) = gout.dims2()?;
                        let mut col = 0;
                        for &p in parts {
                            let (_, w) = self.value(p).dims2()?;
                            if self.requires_grad(p) {
                                let mut d = Vec::with_capacity(r * w);
                                for i in 0..r {
                                    d.extend_from_slice(
                                        &g[i * total + col..i * total + col + w],
                                    );
                                }
                                accumulate(&mut grads, p, &[r, w], &d);
                            }
                            col += w;
                        }
                    }
                },
                Op::Slice { x, axis, start } => {
                    if self.requires_grad(*x) {
                        let xs = self.value(*x).shape().to_vec();
                        let mut d = vec![0.0; self.value(*x).len()];
                        match axis {
                            Axis::Rows => {
                                let w = self.value(*x).row_len();
                                d[start * w..start * w + g.len()].copy_from_slice(g);
                            }
                            Axis::Cols => {
                                let (r, c) = self.value(*x).dims2()?;
                                let w = g.len() / r;
                                for i in 0..r {
                                    d[i * c + start..i * c + start + w]
                                        .copy_from_slice(&g[i * w..(i + 1) * w]);
                                }
                            }
                        }
                        accumulate(&mut grads, *x, &xs, &d);
                    }
                }
                Op::Transpose(x) => {
                    if self.requires_grad(*x) {
                        let d = gout.transpose()?;
                        accumulate(&mut grads, *x, d.shape(), d.data());
                    }
                }
                Op::Softmax(x) => {
                    if self.requires_grad(*x) {
                        let (_, nn) = gout.dims2()?;
                        let y = node.value.data();
                        let mut d = vec![0.0; y.len()];
                        for ((yr, gr), dr) in
                            y.chunks(nn).zip(g.chunks(nn)).zip(d.chunks_mut(nn))
                        {
                            let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..nn {
                                dr[j] = yr[j] * (gr[j] - s);
                            }
                        }
                        accumulate(&mut grads, *x, gout.shape(), &d);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    xhat,
                    inv_std,
                    bias,
                } => {
                    let (rows, d) = gout.dims2()?;
                    let gv = self.value(*gain).data();
                    if self.requires_grad(*x) {
                        let mut dx = vec![0.0; rows * d];
                        for r in 0..rows {
                            let gr = &g[r * d..(r + 1) * d];
                            let hr = &xhat[r * d..(r + 1) * d];
                            let mut sum_dh = 0.0;
                            let mut sum_dh_h = 0.0;
                            for j in 0..d {
                                let dh = gr[j] * gv[j];
                                sum_dh += dh;
                                sum_dh_h += dh * hr[j];
                            }
                            let scale = inv_std[r] / d as f64;
                            for j in 0..d {
                                let dh = gr[j] * gv[j];
                                dx[r * d + j] =
                                    scale * (d as f64 * dh - sum_dh - hr[j] * sum_dh_h);
                            }
                        }
                        accumulate(&mut grads, *x, &[rows, d], &dx);
                    }
                    if self.requires_grad(*gain) {
                        let mut dg = vec![0.0; d];
                        for r in 0..rows {
                            for j in 0..d {
                                dg[j] += g[r * d + j] * xhat[r * d + j];
                            }
                        }
                        let shape = self.value(*gain).shape().to_vec();
                        accumulate(&mut grads, *gain, &shape, &dg);
                    }
                    if self.requires_grad(*bias) {
                        let mut db = vec![0.0; d];
                        for row in g.chunks(d) {
                            for (a, b) in db.iter_mut().zip(row) {
                                *a += b;
                            }
                        }
                        let shape = self.value(*bias).shape().to_vec();
                        accumulate(&mut grads, *bias, &shape, &db);
                    }
                }
                Op::Gelu(x) => {
                    if self.requires_grad(*x) {
                        let d: Vec<f64> = g
                            .iter()
                            .zip(self.value(*x).data())
                            .map(|(gv, &xv)| gv * gelu_grad(xv))
                            .collect();
                        accumulate(&mut grads, *x, gout.shape(), &d);
                    }
                }
                Op::Mse(a, b) => {
                    let ta = self.value(*a).data();
                    let tb = self.value(*b).data();
                    let k = 2.0 * g[0] / ta.len() as f64;
                    let da: Vec<f64> = ta.iter().zip(tb).map(|(x, y)| k * (x - y)).collect();
                    if self.requires_grad(*b) {
                        let db: Vec<f64> = da.iter().map(|v| -v).collect();
                        let shape = self.value(*b).shape().to_vec();
                        accumulate(&mut grads, *b, &shape, &db);
                    }
                    if self.requires_grad(*a) {
                        let shape = self.value(*a).shape().to_vec();
                        accumulate(&mut grads, *a, &shape, &da);
                    }
                }
                Op::Embedding { table, ids } => {
                    if self.requires_grad(*table) {
                        let (v, d) = self.value(*table).dims2()?;
                        let mut dt = vec![0.0; v * d];
                        for (i, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                dt[id * d + j] += g[i * d + j];
                            }
                        }
                        accumulate(&mut grads, *table, &[v, d], &dt);
                    }
                }
                Op::Reshape(x) => {
                    if self.requires_grad(*x) {
                        let shape = self.value(*x).shape().to_vec();
                        accumulate(&mut grads, *x, &shape, g);
                    }
                }
                Op::Rotary { x, cos, sin } => {
                    if self.requires_grad(*x) {
                        let d = rotate_pairs(g, cos, sin, true);
                        accumulate(&mut grads, *x, gout.shape(), &d);
                    }
                }
            }
            // leaves keep their gradient
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(gout);
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], d: &[f64]) {
    match &mut grads[v.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(d) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), d.to_vec()).expect("gradient shape"));
        }
    }
}

fn rotate_pairs(x: &[f64], cos: &[f64], sin: &[f64], inverse: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let sign = if inverse { -1.0 } else { 1.0 };
    for i in (0..x.len()).step_by(2) {
        let (a, b) = (x[i], x[i + 1]);
        let (c, s) = (cos[i], sign * sin[i]);
        out[i] = a * c - b * s;
        out[i + 1] = a * s + b * c;
    }
    out
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul(..) => "matmul",
        Op::Add(..) => "add",
        Op::AddRow(..) => "add_row",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Concat(..) => "concat",
        Op::Slice { .. } => "slice",
        Op::Transpose(..) => "transpose",
        Op::Softmax(..) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gelu(..) => "gelu",
        Op::Mse(..) => "mse",
        Op::Embedding { .. } => "embedding",
        Op::Reshape(..) => "reshape",
        Op::Rotary { .. } => "rotary",
    }
}

/// Convenience: MSE of two plain tensors.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let m = g.mse(va, vb)?;
    g.value(m).item()
}

/// Convenience: layer norm of a plain matrix with unit gain and zero bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let (vx, vg, vb) = (
        g.constant(x.clone()),
        g.constant(gain.clone()),
        g.constant(bias.clone()),
    );
    let y = g.layer_norm(vx, vg, vb, eps)?;
    Ok(g.value(y).clone())
}

/// Convenience: row-wise softmax of a plain matrix.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = g.softmax(v)?;
    Ok(g.value(y).clone())
}
