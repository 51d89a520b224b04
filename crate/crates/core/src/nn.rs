//! Shared layer parameters and their graph-bound forms.

use crate::error::Result;
use crate::numcore::{Axis, Graph, SeededRng, Tensor, Var};

/// Visits named parameter tensors in a fixed order. `visit` and `visit_mut`
/// must walk the same tensors in the same order as the matching `bind`.
pub trait Params {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor));

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}

/// Creates graph leaves for parameters and remembers them in bind order.
pub struct Binder<'g> {
    pub g: &'g mut Graph,
    trainable: bool,
    bound: Vec<Var>,
}

impl<'g> Binder<'g> {
    pub fn new(g: &'g mut Graph, trainable: bool) -> Self {
        Self {
            g,
            trainable,
            bound: Vec::new(),
        }
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let v = if self.trainable {
            self.g.param(t.clone())
        } else {
            self.g.constant(t.clone())
        };
        self.bound.push(v);
        v
    }

    pub fn finish(self) -> Vec<Var> {
        self.bound
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `d_in x d_out`
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, std: f64, rng: &mut SeededRng) -> Self {
        Self {
            w: Tensor::randn(&[d_in, d_out], std, rng),
            b: Tensor::zeros(&[d_out]),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            w: Tensor::zeros(&[d_in, d_out]),
            b: Tensor::zeros(&[d_out]),
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            w: Tensor::eye(d),
            b: Tensor::zeros(&[d]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn bind(&self, b: &mut Binder) -> LinearVars {
        LinearVars {
            w: b.leaf(&self.w),
            b: b.leaf(&self.b),
        }
    }
}

impl Params for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}w"), &self.w);
        f(format!("{prefix}b"), &self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

impl LinearVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.w)?;
        g.add_row(y, self.b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gain: Var,
    pub bias: Var,
}

pub const LN_EPS: f64 = 1e-5;

impl Norm {
    pub fn new(d: usize) -> Self {
        Self {
            gain: Tensor::ones(&[d]),
            bias: Tensor::zeros(&[d]),
        }
    }

    pub fn bind(&self, b: &mut Binder) -> NormVars {
        NormVars {
            gain: b.leaf(&self.gain),
            bias: b.leaf(&self.bias),
        }
    }
}

impl Params for Norm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}gain"), &self.gain);
        f(format!("{prefix}bias"), &self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.gain);
        f(&mut self.bias);
    }
}

impl NormVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.layer_norm(x, self.gain, self.bias, LN_EPS)
    }
}

/// Multi-head attention projections. Keys and values may come from a
/// different width than queries (cross-attention).
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Debug)]
pub struct AttentionVars {
    pub heads: usize,
    pub q: LinearVars,
    pub k: LinearVars,
    pub v: LinearVars,
    pub o: LinearVars,
}

/// Per-head rotary tables: `rows x head_dim` cosines and sines for the query
/// and key sequences.
pub struct RotaryTables<'a> {
    pub q_cos: &'a [f64],
    pub q_sin: &'a [f64],
    pub k_cos: &'a [f64],
    pub k_sin: &'a [f64],
}

impl Attention {
    pub fn new(d: usize, d_kv: usize, heads: usize, std: f64, rng: &mut SeededRng) -> Self {
        Self {
            heads,
            q: Linear::new(d, d, std, rng),
            k: Linear::new(d_kv, d, std, rng),
            v: Linear::new(d_kv, d, std, rng),
            o: Linear::new(d, d, std, rng),
        }
    }

    pub fn bind(&self, b: &mut Binder) -> AttentionVars {
        AttentionVars {
            heads: self.heads,
            q: self.q.bind(b),
            k: self.k.bind(b),
            v: self.v.bind(b),
            o: self.o.bind(b),
        }
    }
}

impl Params for Attention {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.q.visit(&format!("{prefix}q."), f);
        self.k.visit(&format!("{prefix}k."), f);
        self.v.visit(&format!("{prefix}v."), f);
        self.o.visit(&format!("{prefix}o."), f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.q.visit_mut(f);
        self.k.visit_mut(f);
        self.v.visit_mut(f);
        self.o.visit_mut(f);
    }
}

/// Additive causal mask: `0` on and below the diagonal, a large negative
/// value above it.
pub fn causal_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            m.data_mut()[i * n + j] = -1e9;
        }
    }
    m
}

impl AttentionVars {
    /// `xq: Lq x d`, `xkv: Lk x d_kv`; returns `Lq x d`.
    pub fn forward(
        &self,
        g: &mut Graph,
        xq: Var,
        xkv: Var,
        mask: Option<Var>,
        rotary: Option<&RotaryTables>,
    ) -> Result<Var> {
        let q = self.q.forward(g, xq)?;
        let k = self.k.forward(g, xkv)?;
        let v = self.v.forward(g, xkv)?;
        let (_, d) = g.value(q).dims2()?;
        let hd = d / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * hd, (h + 1) * hd);
            let mut qh = g.slice(q, Axis::Cols, lo, hi)?;
            let mut kh = g.slice(k, Axis::Cols, lo, hi)?;
            let vh = g.slice(v, Axis::Cols, lo, hi)?;
            if let Some(r) = rotary {
                qh = g.rotary(qh, r.q_cos, r.q_sin)?;
                kh = g.rotary(kh, r.k_cos, r.k_sin)?;
            }
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let mut s = g.scale(s, scale)?;
            if let Some(m) = mask {
                s = g.add(s, m)?;
            }
            let p = g.softmax(s)?;
            outs.push(g.matmul(p, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat(&outs, Axis::Cols)?
        };
        self.o.forward(g, cat)
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub up: LinearVars,
    pub down: LinearVars,
}

impl Mlp {
    pub fn new(d_in: usize, hidden: usize, d_out: usize, std: f64, rng: &mut SeededRng) -> Self {
        Self {
            up: Linear::new(d_in, hidden, std, rng),
            down: Linear::new(hidden, d_out, std, rng),
        }
    }

    pub fn bind(&self, b: &mut Binder) -> MlpVars {
        MlpVars {
            up: self.up.bind(b),
            down: self.down.bind(b),
        }
    }
}

impl Params for Mlp {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.up.visit(&format!("{prefix}up."), f);
        self.down.visit(&format!("{prefix}down."), f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.up.visit_mut(f);
        self.down.visit_mut(f);
    }
}

impl MlpVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, h)
    }
}

/// Sinusoidal embedding of a scalar: `[sin(x·ω_j), cos(x·ω_j)]` with
/// `ω_j = 10000^(-j / (width/2))`.
pub fn sinusoid(x: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for j in 0..half {
        let w = 10000f64.powf(-(j as f64) / half as f64);
        out[j] = (x * w).sin();
        out[half + j] = (x * w).cos();
    }
    out
}
