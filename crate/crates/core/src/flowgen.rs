//! Rectified-flow generation head: a tiny cross-attention DiT, the
//! flow-matching and multi-scale alignment losses, and an Euler sampler.

use serde::{Deserialize, Serialize};

use crate::connector::ConditioningSet;
use crate::error::{dim_err, Error, Result};
use crate::msq::{positional_grid, ScaleSpec};
use crate::nn::{sinusoid, Attention, AttentionVars, Binder, Linear, LinearVars, Mlp, MlpVars, Norm, NormVars, Params};
use crate::numcore::{mse, Axis, Graph, SeededRng, Tensor, Var};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::shapeworld::Image;

/// Noise/data pairs with their interpolants, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowBatch {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: Vec<f64>,
    pub xt: Tensor,
    pub v_target: Tensor,
}

/// `xt = (1-t)·x0 + t·x1`, `v = x1 - x0` for explicit noise and times.
pub fn flow_interpolate_with(x1: &Tensor, x0: Tensor, t: Vec<f64>) -> Result<FlowBatch> {
    let (b, n) = x1.dims2()?;
    x0.expect_same_shape(x1)?;
    if t.len() != b {
        return dim_err(format!("{} times for {b} samples", t.len()));
    }
    if !x1.all_finite() {
        return Err(Error::Numeric("non-finite data in flow batch".into()));
    }
    let mut xt = Vec::with_capacity(b * n);
    let mut v = Vec::with_capacity(b * n);
    for (i, &ti) in t.iter().enumerate() {
        let (a, c) = (x0.row(i), x1.row(i));
        xt.extend(a.iter().zip(c).map(|(a, c)| (1.0 - ti) * a + ti * c));
        v.extend(a.iter().zip(c).map(|(a, c)| c - a));
    }
    Ok(FlowBatch {
        xt: Tensor::new(vec![b, n], xt)?,
        v_target: Tensor::new(vec![b, n], v)?,
        x0,
        x1: x1.clone(),
        t,
    })
}

/// Draws standard-normal noise and `t ~ U[0,1]` per sample.
pub fn flow_interpolate(x1: &Tensor, rng: &mut SeededRng) -> Result<FlowBatch> {
    let (b, _) = x1.dims2()?;
    let x0 = Tensor::randn(x1.shape(), 1.0, rng);
    let t = (0..b).map(|_| rng.uniform()).collect();
    flow_interpolate_with(x1, x0, t)
}

/// Mean squared error between predicted and target velocity.
pub fn fm_loss(v_pred: &Tensor, v_target: &Tensor) -> Result<f64> {
    mse(v_pred, v_target)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub fm: f64,
    pub align: f64,
    pub total: f64,
}

pub fn total_loss(fm: f64, align: f64, lambda_align: f64) -> Result<LossBreakdown> {
    if !(lambda_align >= 0.0) {
        return Err(Error::Config(format!("alignment weight {lambda_align} must be non-negative")));
    }
    let total = fm + lambda_align * align;
    if !(fm.is_finite() && align.is_finite() && total.is_finite()) || fm < 0.0 || align < 0.0 {
        return Err(Error::Numeric(format!("invalid loss terms fm={fm} align={align}")));
    }
    Ok(LossBreakdown { fm, align, total })
}

// ---------------------------------------------------------------------------
// DiT

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DitConfig {
    pub image_size: usize,
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub d_c: usize,
    pub mlp_ratio: usize,
    /// 1-based block index after which each scale's tap is read. Empty means
    /// block `ceil(depth·k/K)` for scale `k` of `K`.
    #[serde(default)]
    pub taps: Vec<usize>,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch: 2,
            width: 64,
            depth: 2,
            heads: 4,
            d_c: 64,
            mlp_ratio: 4,
            taps: Vec::new(),
        }
    }
}

impl DitConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size * 3
    }

    /// Tap block (1-based) per scale.
    pub fn tap_blocks(&self, n_scales: usize) -> Result<Vec<usize>> {
        let taps: Vec<usize> = if self.taps.is_empty() {
            (1..=n_scales).map(|k| (self.depth * k).div_ceil(n_scales)).collect()
        } else {
            self.taps.clone()
        };
        if taps.len() != n_scales || taps.iter().any(|&b| b == 0 || b > self.depth) {
            return Err(Error::Config(format!(
                "taps {taps:?} invalid for {n_scales} scales and depth {}",
                self.depth
            )));
        }
        Ok(taps)
    }

    fn validate(&self) -> Result<()> {
        if self.patch == 0
            || self.image_size % self.patch != 0
            || self.depth == 0
            || self.heads == 0
            || self.width % self.heads != 0
            || self.width % 4 != 0
        {
            return Err(Error::Config(format!("invalid DiT config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DitBlock {
    pub norm1: Norm,
    pub self_attn: Attention,
    pub norm2: Norm,
    pub cross_attn: Attention,
    pub norm3: Norm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DitParams {
    pub config: DitConfig,
    pub patch_in: Linear,
    pub time: Mlp,
    pub blocks: Vec<DitBlock>,
    pub final_norm: Norm,
    pub out: Linear,
    /// Fixed 2-D sin/cos positional table (not trained).
    pub positions: Tensor,
}

pub struct DitBlockVars {
    pub norm1: NormVars,
    pub self_attn: AttentionVars,
    pub norm2: NormVars,
    pub cross_attn: AttentionVars,
    pub norm3: NormVars,
    pub mlp: MlpVars,
}

pub struct DitVars {
    pub patch_in: LinearVars,
    pub time: MlpVars,
    pub blocks: Vec<DitBlockVars>,
    pub final_norm: NormVars,
    pub out: LinearVars,
}

/// `v_pred` in the shape of `xt` plus one tap (`T x width`) per scale.
#[derive(Clone, Debug, PartialEq)]
pub struct DitOutput {
    pub v_pred: Tensor,
    pub intermediates: Vec<Tensor>,
}

impl DitParams {
    pub fn new(config: DitConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let std = 1.0 / (w as f64).sqrt();
        let patch_in = Linear::new(config.patch_dim(), w, 1.0 / (config.patch_dim() as f64).sqrt(), rng);
        let time = Mlp::new(w, w, w, std, rng);
        let blocks = (0..config.depth)
            .map(|_| DitBlock {
                norm1: Norm::new(w),
                self_attn: Attention::new(w, w, config.heads, std, rng),
                norm2: Norm::new(w),
                cross_attn: Attention::new(w, config.d_c, config.heads, std, rng),
                norm3: Norm::new(w),
                mlp: Mlp::new(w, config.mlp_ratio * w, w, std, rng),
            })
            .collect();
        let out = Linear::new(w, config.patch_dim(), 0.02, rng);
        let positions = positional_grid(ScaleSpec::square(config.grid())?, w)?;
        Ok(Self {
            patch_in,
            time,
            blocks,
            final_norm: Norm::new(w),
            out,
            positions,
            config,
        })
    }

    pub fn bind(&self, b: &mut Binder) -> DitVars {
        DitVars {
            patch_in: self.patch_in.bind(b),
            time: self.time.bind(b),
            blocks: self
                .blocks
                .iter()
                .map(|k| DitBlockVars {
                    norm1: k.norm1.bind(b),
                    self_attn: k.self_attn.bind(b),
                    norm2: k.norm2.bind(b),
                    cross_attn: k.cross_attn.bind(b),
                    norm3: k.norm3.bind(b),
                    mlp: k.mlp.bind(b),
                })
                .collect(),
            final_norm: self.final_norm.bind(b),
            out: self.out.bind(b),
        }
    }
}

impl Params for DitParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.patch_in.visit(&format!("{prefix}patch_in."), f);
        self.time.visit(&format!("{prefix}time."), f);
        for (i, k) in self.blocks.iter().enumerate() {
            k.norm1.visit(&format!("{prefix}block{i}.norm1."), f);
            k.self_attn.visit(&format!("{prefix}block{i}.self_attn."), f);
            k.norm2.visit(&format!("{prefix}block{i}.norm2."), f);
            k.cross_attn.visit(&format!("{prefix}block{i}.cross_attn."), f);
            k.norm3.visit(&format!("{prefix}block{i}.norm3."), f);
            k.mlp.visit(&format!("{prefix}block{i}.mlp."), f);
        }
        self.final_norm.visit(&format!("{prefix}final_norm."), f);
        self.out.visit(&format!("{prefix}out."), f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.patch_in.visit_mut(f);
        self.time.visit_mut(f);
        for k in &mut self.blocks {
            k.norm1.visit_mut(f);
            k.self_attn.visit_mut(f);
            k.norm2.visit_mut(f);
            k.cross_attn.visit_mut(f);
            k.norm3.visit_mut(f);
            k.mlp.visit_mut(f);
        }
        self.final_norm.visit_mut(f);
        self.out.visit_mut(f);
    }
}

/// Flat `H·W·3` image (row-major, channels last) to `T x 3p²` patch rows.
pub fn patchify(x: &[f64], size: usize, patch: usize) -> Result<Tensor> {
    if x.len() != size * size * 3 || patch == 0 || size % patch != 0 {
        return dim_err(format!("cannot patchify {} values as {size}x{size}x3 with patch {patch}", x.len()));
    }
    let g = size / patch;
    let mut data = Vec::with_capacity(x.len());
    for gy in 0..g {
        for gx in 0..g {
            for y in 0..patch {
                let row = (gy * patch + y) * size + gx * patch;
                data.extend_from_slice(&x[row * 3..(row + patch) * 3]);
            }
        }
    }
    Tensor::new(vec![g * g, 3 * patch * patch], data)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, size: usize, patch: usize) -> Result<Vec<f64>> {
    let g = size / patch;
    if tokens.shape() != [g * g, 3 * patch * patch] {
        return dim_err(format!("token shape {:?} for {size}x{size} patch {patch}", tokens.shape()));
    }
    let mut x = vec![0.0; size * size * 3];
    for gy in 0..g {
        for gx in 0..g {
            let tok = tokens.row(gy * g + gx);
            for y in 0..patch {
                let row = (gy * patch + y) * size + gx * patch;
                x[row * 3..(row + patch) * 3].copy_from_slice(&tok[y * patch * 3..(y + 1) * patch * 3]);
            }
        }
    }
    Ok(x)
}

impl DitVars {
    /// `xt` holds patch tokens (`T x 3p²`); `cond` holds the per-scale
    /// condition tokens. Returns predicted velocity tokens and one tap per
    /// entry of `tap_blocks`.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &DitParams,
        xt: Var,
        t: f64,
        cond: &[Var],
        tap_blocks: &[usize],
    ) -> Result<(Var, Vec<Var>)> {
        let cfg = &params.config;
        if g.value(xt).shape() != [cfg.tokens(), cfg.patch_dim()] {
            return dim_err(format!("DiT input {:?}, expected [{}, {}]", g.value(xt).shape(), cfg.tokens(), cfg.patch_dim()));
        }
        if cond.is_empty() {
            return Err(Error::Config("DiT needs at least one condition scale".into()));
        }
        let c = if cond.len() == 1 { cond[0] } else { g.concat(cond, Axis::Rows)? };
        let mut h = self.patch_in.forward(g, xt)?;
        let pos = g.constant(params.positions.clone());
        h = g.add(h, pos)?;
        let temb = g.constant(Tensor::new(vec![1, cfg.width], sinusoid(t * 1000.0, cfg.width))?);
        let temb = self.time.forward(g, temb)?;
        let temb = g.reshape(temb, &[cfg.width])?;
        h = g.add_row(h, temb)?;

        let mut taps = vec![None; tap_blocks.len()];
        for (i, b) in self.blocks.iter().enumerate() {
            let x = b.norm1.forward(g, h)?;
            let a = b.self_attn.forward(g, x, x, None, None)?;
            h = g.add(h, a)?;
            let x = b.norm2.forward(g, h)?;
            let a = b.cross_attn.forward(g, x, c, None, None)?;
            h = g.add(h, a)?;
            let x = b.norm3.forward(g, h)?;
            let m = b.mlp.forward(g, x)?;
            h = g.add(h, m)?;
            for (k, &tb) in tap_blocks.iter().enumerate() {
                if tb == i + 1 {
                    taps[k] = Some(h);
                }
            }
        }
        let taps = taps
            .into_iter()
            .map(|t| t.ok_or_else(|| Error::Config(format!("tap blocks {tap_blocks:?} exceed depth"))))
            .collect::<Result<Vec<_>>>()?;
        let x = self.final_norm.forward(g, h)?;
        Ok((self.out.forward(g, x)?, taps))
    }
}

/// Value-level DiT pass. `xt` is an image tensor (`H x W x 3` or flat); the
/// prediction comes back in the same shape.
pub fn dit_forward(xt: &Tensor, t: f64, cond: &ConditioningSet, params: &DitParams) -> Result<DitOutput> {
    let cfg = &params.config;
    if cond.d_c != cfg.d_c {
        return dim_err(format!("condition width {} vs DiT {}", cond.d_c, cfg.d_c));
    }
    let taps = cfg.tap_blocks(cond.len())?;
    let tokens = patchify(xt.data(), cfg.image_size, cfg.patch)?;
    let mut g = Graph::new();
    let vars = params.bind(&mut Binder::new(&mut g, false));
    let x = g.constant(tokens);
    let c: Vec<Var> = cond.tokens.iter().map(|t| g.constant(t.clone())).collect();
    let (v, tv) = vars.forward(&mut g, params, x, t, &c, &taps)?;
    let v = unpatchify(g.value(v), cfg.image_size, cfg.patch)?;
    Ok(DitOutput {
        v_pred: Tensor::new(xt.shape().to_vec(), v)?,
        intermediates: tv.iter().map(|&t| g.value(t).clone()).collect(),
    })
}

// ---------------------------------------------------------------------------
// Multi-scale representation alignment

/// Averaging matrix (`N x T`) pooling a `grid x grid` token map onto a
/// scale's grid. Each scale cell averages the tokens whose centers fall in
/// it; a cell containing no token center takes the nearest token.
pub fn pool_matrix(grid: usize, scale: ScaleSpec) -> Result<Tensor> {
    let (sh, sw) = (scale.grid_h, scale.grid_w);
    let t = grid * grid;
    let mut m = Tensor::zeros(&[sh * sw, t]);
    let bucket = |i: usize, n: usize| i * n / grid;
    for r in 0..sh {
        for c in 0..sw {
            let members: Vec<usize> = (0..t).filter(|&k| bucket(k / grid, sh) == r && bucket(k % grid, sw) == c).collect();
            let row = &mut m.data_mut()[(r * sw + c) * t..(r * sw + c + 1) * t];
            if members.is_empty() {
                let y = ((r as f64 + 0.5) * grid as f64 / sh as f64) as usize;
                let x = ((c as f64 + 0.5) * grid as f64 / sw as f64) as usize;
                row[y.min(grid - 1) * grid + x.min(grid - 1)] = 1.0;
            } else {
                for k in &members {
                    row[*k] = 1.0 / members.len() as f64;
                }
            }
        }
    }
    Ok(m)
}

/// Per-scale affine maps from DiT width to the semantic width.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignParams {
    pub scales: Vec<ScaleSpec>,
    pub grid: usize,
    pub proj: Vec<Linear>,
}

pub struct AlignVars {
    pub proj: Vec<LinearVars>,
}

impl AlignParams {
    pub fn new(scales: &[ScaleSpec], grid: usize, width: usize, d_c: usize, rng: &mut SeededRng) -> Self {
        Self {
            scales: scales.to_vec(),
            grid,
            proj: scales
                .iter()
                .map(|_| Linear::new(width, d_c, 1.0 / (width as f64).sqrt(), rng))
                .collect(),
        }
    }

    pub fn bind(&self, b: &mut Binder) -> AlignVars {
        AlignVars {
            proj: self.proj.iter().map(|l| l.bind(b)).collect(),
        }
    }
}

impl Params for AlignParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (k, l) in self.proj.iter().enumerate() {
            l.visit(&format!("{prefix}scale{k}."), f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for l in &mut self.proj {
            l.visit_mut(f);
        }
    }
}

impl AlignVars {
    /// Mean over scales of `mse(proj(pool(tap)), detach(semantic))`.
    pub fn loss(&self, g: &mut Graph, params: &AlignParams, taps: &[Var], semantic: &[Var]) -> Result<Var> {
        let k = params.scales.len();
        if taps.len() != k || semantic.len() != k {
            return Err(Error::Config(format!(
                "{} taps and {} semantic sets for {k} alignment scales",
                taps.len(),
                semantic.len()
            )));
        }
        let mut terms = Vec::with_capacity(k);
        for i in 0..k {
            let pool = g.constant(pool_matrix(params.grid, params.scales[i])?);
            let pooled = g.matmul(pool, taps[i])?;
            let p = self.proj[i].forward(g, pooled)?;
            let target = g.detach(semantic[i]);
            terms.push(g.mse(p, target)?);
        }
        let sum = g.sum_scalars(&terms)?;
        g.scale(sum, 1.0 / k as f64)
    }
}

/// Value-level alignment loss.
pub fn msr_align_loss(intermediates: &[Tensor], semantic: &ConditioningSet, params: &AlignParams) -> Result<f64> {
    let mut g = Graph::new();
    let vars = params.bind(&mut Binder::new(&mut g, false));
    let taps: Vec<Var> = intermediates.iter().map(|t| g.constant(t.clone())).collect();
    let sem: Vec<Var> = semantic.tokens.iter().map(|t| g.constant(t.clone())).collect();
    let l = vars.loss(&mut g, params, &taps, &sem)?;
    g.value(l).item()
}

// ---------------------------------------------------------------------------
// Sampling

pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

impl<F: Fn(&Tensor, f64) -> Result<Tensor>> VelocityField for F {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self(x, t)
    }
}

/// Explicit Euler from `x0` over `steps` uniform steps on `[0, 1]`, unclamped.
pub fn euler_integrate(field: &dyn VelocityField, x0: Tensor, steps: usize) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::Config("Euler sampler needs at least one step".into()));
    }
    let h = 1.0 / steps as f64;
    let mut x = x0;
    for i in 0..steps {
        let v = field.velocity(&x, i as f64 * h)?;
        v.expect_same_shape(&x)?;
        for (xj, vj) in x.data_mut().iter_mut().zip(v.data()) {
            *xj += h * vj;
        }
        if !x.all_finite() {
            return Err(Error::Numeric(format!("non-finite sampler state at step {i}")));
        }
    }
    Ok(x)
}

/// Starts from standard-normal noise of `shape`, integrates, and clamps the
/// endpoint to `[0, 1]`.
pub fn euler_sample_field(field: &dyn VelocityField, shape: &[usize], steps: usize, rng: &mut SeededRng) -> Result<Tensor> {
    let x0 = Tensor::randn(shape, 1.0, rng);
    Ok(euler_integrate(field, x0, steps)?.map(|v| v.clamp(0.0, 1.0)))
}

/// The DiT velocity field under a fixed condition.
pub struct DitField<'a> {
    pub params: &'a DitParams,
    pub cond: &'a ConditioningSet,
}

impl VelocityField for DitField<'_> {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        Ok(dit_forward(x, t, self.cond, self.params)?.v_pred)
    }
}

/// Pixel value in `[0, 1]` to the centred range the image flow runs in.
pub fn pixel_to_flow(p: f64) -> f64 {
    2.0 * p - 1.0
}

/// Inverse of [`pixel_to_flow`].
pub fn flow_to_pixel(x: f64) -> f64 {
    0.5 * (x + 1.0)
}

/// Generates one image from the DiT conditioned on `cond`: integrates from
/// noise in the centred flow range, then maps back to pixels and clamps.
pub fn euler_sample(params: &DitParams, cond: &ConditioningSet, steps: usize, rng: &mut SeededRng) -> Result<Image> {
    let s = params.config.image_size;
    let x0 = Tensor::randn(&[s, s, 3], 1.0, rng);
    let x = euler_integrate(&DitField { params, cond }, x0, steps)?;
    Image::from_tensor(&x.map(|v| flow_to_pixel(v).clamp(0.0, 1.0)))
}

// ---------------------------------------------------------------------------
// 2-D sanity flow

/// Equal-weight isotropic Gaussian mixture in the plane.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture2d {
    pub means: Vec<[f64; 2]>,
    pub std: f64,
}

impl Default for GaussianMixture2d {
    fn default() -> Self {
        Self {
            means: vec![[-1.0, -0.5], [1.0, 0.5]],
            std: 0.25,
        }
    }
}

impl GaussianMixture2d {
    /// `n x 2` samples.
    pub fn sample(&self, n: usize, rng: &mut SeededRng) -> Tensor {
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let m = self.means[rng.below(self.means.len())];
            data.push(m[0] + self.std * rng.normal());
            data.push(m[1] + self.std * rng.normal());
        }
        Tensor::new(vec![n, 2], data).expect("n x 2")
    }
}

/// Velocity MLP on `[x, y, t]` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityMlp {
    pub layers: Vec<Linear>,
}

impl VelocityMlp {
    pub fn new(hidden: usize, rng: &mut SeededRng) -> Self {
        let dims = [3, hidden, hidden, 2];
        Self {
            layers: dims
                .windows(2)
                .map(|w| Linear::new(w[0], w[1], 1.0 / (w[0] as f64).sqrt(), rng))
                .collect(),
        }
    }

    fn forward_in(&self, g: &mut Graph, vars: &[LinearVars], x: &Tensor, t: &[f64]) -> Result<Var> {
        let (n, _) = x.dims2()?;
        let mut input = Vec::with_capacity(3 * n);
        for i in 0..n {
            input.extend_from_slice(x.row(i));
            input.push(t[i]);
        }
        let mut h = g.constant(Tensor::new(vec![n, 3], input)?);
        for (i, l) in vars.iter().enumerate() {
            if i > 0 {
                h = g.gelu(h)?;
            }
            h = l.forward(g, h)?;
        }
        Ok(h)
    }
}

impl Params for VelocityMlp {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}layer{i}."), f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}

impl VelocityField for VelocityMlp {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::new(&mut g, false);
        let vars: Vec<_> = self.layers.iter().map(|l| l.bind(&mut b)).collect();
        let ts = vec![t; x.rows()];
        let v = self.forward_in(&mut g, &vars, x, &ts)?;
        Ok(g.value(v).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureFlowConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub optim: AdamConfig,
}

impl Default for MixtureFlowConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            steps: 3000,
            batch: 256,
            optim: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
        }
    }
}

/// Fits a velocity MLP to the mixture with the flow-matching loss. Returns the
/// model and the per-step losses.
pub fn train_mixture_flow(
    target: &GaussianMixture2d,
    cfg: &MixtureFlowConfig,
    rng: &mut SeededRng,
) -> Result<(VelocityMlp, Vec<f64>)> {
    let mut model = VelocityMlp::new(cfg.hidden, &mut rng.split("init"));
    let mut state = AdamState::for_params(&model);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut r = rng.split_indexed("step", step as u64);
        let x1 = target.sample(cfg.batch, &mut r);
        let fb = flow_interpolate(&x1, &mut r)?;
        let mut g = Graph::new();
        let mut b = Binder::new(&mut g, true);
        let vars: Vec<_> = model.layers.iter().map(|l| l.bind(&mut b)).collect();
        let leaves = b.finish();
        let v = model.forward_in(&mut g, &vars, &fb.xt, &fb.t)?;
        let target_v = g.constant(fb.v_target.clone());
        let loss = g.mse(v, target_v)?;
        losses.push(g.value(loss).item()?);
        let grads = g.backward(loss)?;
        let gs: Vec<Tensor> = leaves.iter().map(|&l| grads.wrt(l)).collect();
        adam_step(&mut model, &gs, &mut state, &cfg.optim)?;
    }
    Ok((model, losses))
}

/// Sorted-sample 1-Wasserstein distance of each coordinate (columns of two
/// equal-size `n x k` sample sets).
pub fn w1_per_axis(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    a.expect_same_shape(b)?;
    let (n, k) = a.dims2()?;
    Ok((0..k)
        .map(|j| {
            let mut xa: Vec<f64> = (0..n).map(|i| a.row(i)[j]).collect();
            let mut xb: Vec<f64> = (0..n).map(|i| b.row(i)[j]).collect();
            xa.sort_by(f64::total_cmp);
            xb.sort_by(f64::total_cmp);
            xa.iter().zip(&xb).map(|(p, q)| (p - q).abs()).sum::<f64>() / n as f64
        })
        .collect())
}
