//! Toy frozen autoregressive backbone.
//!
//! A small pre-norm causal transformer over `[text; visual; queries]` with a
//! 2x2 patch-merge vision front end and multimodal rotary positions (M-RoPE).
//! Its weights are a fixed seeded initialization and stay frozen during
//! training; gradients still flow *through* it into the query bank.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::msq::{QueryBank, BankVars, ScaleSpan};
use crate::nn::{causal_mask, Attention, AttentionVars, Binder, Mlp, MlpVars, Norm, NormVars, Params, RotaryTables};
use crate::numcore::{Axis, Graph, SeededRng, Tensor, Var};
use crate::shapeworld::{Image, VOCABULARY};

pub fn tokenize_text(caption: &str) -> Result<Vec<usize>> {
    caption
        .split_whitespace()
        .map(|w| {
            VOCABULARY
                .iter()
                .position(|v| *v == w)
                .ok_or_else(|| Error::Tokenize(w.to_string()))
        })
        .collect()
}

pub fn detokenize(ids: &[usize]) -> Result<String> {
    let words: Result<Vec<&str>> = ids
        .iter()
        .map(|&i| {
            VOCABULARY
                .get(i)
                .copied()
                .ok_or_else(|| Error::Tokenize(format!("<id {i}>")))
        })
        .collect();
    Ok(words?.join(" "))
}

/// Temporal / row / column position of one token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MRopePosition {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl MRopePosition {
    pub fn text(i: usize) -> Self {
        Self { t: i, h: i, w: i }
    }
}

/// Channels per rotated component: `d/3` rounded down to even.
pub fn mrope_group(d: usize) -> usize {
    (d / 3) & !1
}

/// Per-element cosine/sine tables (`L x d`) for M-RoPE.
///
/// Channels `[0,g)` rotate with `t`, `[g,2g)` with `h`, `[2g,3g)` with `w`
/// (`g = mrope_group(d)`); the remainder is left unrotated. Within a group,
/// pair `j` uses frequency `10000^(-2j/g)`.
pub fn mrope_tables(positions: &[MRopePosition], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let g = mrope_group(d);
    if g < 2 || d % 2 != 0 {
        return Err(Error::Config(format!("M-RoPE width {d} too small or odd")));
    }
    let mut cos = vec![1.0; positions.len() * d];
    let mut sin = vec![0.0; positions.len() * d];
    for (i, p) in positions.iter().enumerate() {
        for (k, pos) in [p.t, p.h, p.w].into_iter().enumerate() {
            for j in 0..g / 2 {
                let freq = 10000f64.powf(-2.0 * j as f64 / g as f64);
                let angle = pos as f64 * freq;
                let (s, c) = angle.sin_cos();
                let base = i * d + k * g + 2 * j;
                cos[base] = c;
                cos[base + 1] = c;
                sin[base] = s;
                sin[base + 1] = s;
            }
        }
    }
    Ok((cos, sin))
}

/// Applies M-RoPE to an `L x d` query or key matrix.
pub fn mrope_apply(x: &Tensor, positions: &[MRopePosition]) -> Result<Tensor> {
    let (l, d) = x.dims2()?;
    if positions.len() != l {
        return dim_err(format!("{} positions for {l} rows", positions.len()));
    }
    let (cos, sin) = mrope_tables(positions, d)?;
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = g.rotary(v, &cos, &sin)?;
    Ok(g.value(y).clone())
}

/// Splits an image into non-overlapping `p x p` patches and concatenates each
/// 2x2 patch neighborhood into one `4·3p²` row (row-major over the merged grid;
/// within a row the four patches go top-left, top-right, bottom-left,
/// bottom-right).
pub fn merged_patch_rows(image: &Image, p: usize) -> Result<(Tensor, usize, usize)> {
    let (h, w) = (image.height(), image.width());
    if p == 0 || h % (2 * p) != 0 || w % (2 * p) != 0 {
        return dim_err(format!("image {h}x{w} not divisible by 2x patch {p}"));
    }
    let (gh, gw) = (h / p / 2, w / p / 2);
    let dp = 3 * p * p;
    let mut data = Vec::with_capacity(gh * gw * 4 * dp);
    for gy in 0..gh {
        for gx in 0..gw {
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let (py, px) = ((2 * gy + dy) * p, (2 * gx + dx) * p);
                for y in 0..p {
                    for x in 0..p {
                        data.extend(image.pixel(py + y, px + x));
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![gh * gw, 4 * dp], data)?, gh, gw))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub patch: usize,
    pub mlp_ratio: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d: 64,
            layers: 2,
            heads: 4,
            patch: 4,
            mlp_ratio: 4,
            max_len: 512,
            seed: 0x5eed_ba5e,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub embed: Tensor,
    pub merge: Mlp,
    pub layers: Vec<Layer>,
    pub final_norm: Norm,
    pub frozen: bool,
}

struct LayerVars {
    norm1: NormVars,
    attn: AttentionVars,
    norm2: NormVars,
    mlp: MlpVars,
}

pub struct BackboneVars {
    embed: Var,
    merge: MlpVars,
    layers: Vec<LayerVars>,
    final_norm: NormVars,
}

/// Hidden states with the row ranges of each input segment.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub h: Tensor,
    pub text: Range<usize>,
    pub visual: Range<usize>,
    pub queries: Range<usize>,
    /// Query spans in absolute row indices of `h`.
    pub spans: Vec<ScaleSpan>,
}

/// Graph-side result of a forward pass.
pub struct HiddenVars {
    pub h: Var,
    pub text: Range<usize>,
    pub visual: Range<usize>,
    pub queries: Range<usize>,
    pub spans: Vec<ScaleSpan>,
}

impl BackboneParams {
    /// Seeded random initialization; frozen by default.
    pub fn new(config: BackboneConfig) -> Result<Self> {
        let d = config.d;
        if d % config.heads != 0 {
            return Err(Error::Config(format!("width {d} not divisible by {} heads", config.heads)));
        }
        mrope_tables(&[MRopePosition::text(0)], d / config.heads)?;
        let mut rng = SeededRng::new(config.seed);
        let std = 1.0 / (d as f64).sqrt();
        let embed = Tensor::randn(&[VOCABULARY.len(), d], 1.0, &mut rng);
        let merge_in = 4 * 3 * config.patch * config.patch;
        let merge = Mlp::new(merge_in, d, d, 1.0 / (merge_in as f64).sqrt(), &mut rng);
        let layers = (0..config.layers)
            .map(|_| Layer {
                norm1: Norm::new(d),
                attn: Attention::new(d, d, config.heads, std, &mut rng),
                norm2: Norm::new(d),
                mlp: Mlp::new(d, config.mlp_ratio * d, d, std, &mut rng),
            })
            .collect();
        Ok(Self {
            config,
            embed,
            merge,
            layers,
            final_norm: Norm::new(d),
            frozen: true,
        })
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    /// Binds parameters as constants when frozen, trainable leaves otherwise.
    pub fn bind(&self, g: &mut Graph) -> BackboneVars {
        let mut b = Binder::new(g, !self.frozen);
        let embed = b.leaf(&self.embed);
        let merge = self.merge.bind(&mut b);
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                norm1: l.norm1.bind(&mut b),
                attn: l.attn.bind(&mut b),
                norm2: l.norm2.bind(&mut b),
                mlp: l.mlp.bind(&mut b),
            })
            .collect();
        let final_norm = self.final_norm.bind(&mut b);
        BackboneVars {
            embed,
            merge,
            layers,
            final_norm,
        }
    }

    /// Visual tokens for an image: patchify, merge 2x2 neighborhoods, MLP to `d`.
    pub fn patchify_merge(&self, image: &Image) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let (v, _, _) = self.visual_tokens_in(&mut g, &vars, image)?;
        Ok(g.value(v).clone())
    }

    fn visual_tokens_in(&self, g: &mut Graph, vars: &BackboneVars, image: &Image) -> Result<(Var, usize, usize)> {
        let (rows, gh, gw) = merged_patch_rows(image, self.config.patch)?;
        let x = g.constant(rows);
        Ok((vars.merge.forward(g, x)?, gh, gw))
    }

    /// Runs the encoder over `[text; visual; assembled queries]` inside `g`.
    pub fn forward_in(
        &self,
        g: &mut Graph,
        vars: &BackboneVars,
        text: &[usize],
        image: Option<&Image>,
        bank: &QueryBank,
        bank_vars: &BankVars,
    ) -> Result<HiddenVars> {
        let d = self.d();
        if bank.d() != d {
            return dim_err(format!("bank width {} vs backbone width {d}", bank.d()));
        }
        let mut parts = Vec::new();
        let mut positions = Vec::new();
        if !text.is_empty() {
            parts.push(g.embedding(vars.embed, text)?);
            positions.extend((0..text.len()).map(MRopePosition::text));
        }
        let text_range = 0..text.len();
        let mut next = text.len();
        let mut visual_range = next..next;
        if let Some(img) = image {
            let (v, gh, gw) = self.visual_tokens_in(g, vars, img)?;
            parts.push(v);
            for r in 0..gh {
                for c in 0..gw {
                    positions.push(MRopePosition { t: next, h: next + r, w: next + c });
                }
            }
            visual_range = next..next + gh * gw;
            next += gh.max(gw);
        }
        let q_start = text.len() + visual_range.len();
        let (z, spans) = bank.assemble_in(g, bank_vars)?;
        parts.push(z);
        for s in bank.scales().as_slice() {
            positions.push(MRopePosition::text(next));
            next += 1;
            for r in 0..s.grid_h {
                for c in 0..s.grid_w {
                    positions.push(MRopePosition { t: next, h: next + r, w: next + c });
                }
            }
            next += s.grid_h.max(s.grid_w);
            positions.push(MRopePosition::text(next));
            next += 1;
        }
        let total = positions.len();
        if total > self.config.max_len {
            return Err(Error::Capacity { len: total, max: self.config.max_len });
        }
        let mut h = if parts.len() == 1 { parts[0] } else { g.concat(&parts, Axis::Rows)? };

        let hd = d / self.config.heads;
        let (cos, sin) = mrope_tables(&positions, hd)?;
        let rot = RotaryTables { q_cos: &cos, q_sin: &sin, k_cos: &cos, k_sin: &sin };
        let mask = g.constant(causal_mask(total));
        for l in &vars.layers {
            let x = l.norm1.forward(g, h)?;
            let a = l.attn.forward(g, x, x, Some(mask), Some(&rot))?;
            h = g.add(h, a)?;
            let x = l.norm2.forward(g, h)?;
            let m = l.mlp.forward(g, x)?;
            h = g.add(h, m)?;
        }
        let h = vars.final_norm.forward(g, h)?;
        Ok(HiddenVars {
            h,
            text: text_range,
            visual: visual_range,
            queries: q_start..total,
            spans: spans.iter().map(|s| s.offset(q_start)).collect(),
        })
    }

    /// Value-only forward pass.
    pub fn forward(&self, text: &[usize], image: Option<&Image>, bank: &QueryBank) -> Result<HiddenStates> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let bank_vars = bank.bind(&mut Binder::new(&mut g, false));
        let out = self.forward_in(&mut g, &vars, text, image, bank, &bank_vars)?;
        Ok(HiddenStates {
            h: g.value(out.h).clone(),
            text: out.text,
            visual: out.visual,
            queries: out.queries,
            spans: out.spans,
        })
    }
}

impl Params for BackboneParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}embed"), &self.embed);
        self.merge.visit(&format!("{prefix}merge."), f);
        for (i, l) in self.layers.iter().enumerate() {
            l.norm1.visit(&format!("{prefix}layer{i}.norm1."), f);
            l.attn.visit(&format!("{prefix}layer{i}.attn."), f);
            l.norm2.visit(&format!("{prefix}layer{i}.norm2."), f);
            l.mlp.visit(&format!("{prefix}layer{i}.mlp."), f);
        }
        self.final_norm.visit(&format!("{prefix}final_norm."), f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.embed);
        self.merge.visit_mut(f);
        for l in &mut self.layers {
            l.norm1.visit_mut(f);
            l.attn.visit_mut(f);
            l.norm2.visit_mut(f);
            l.mlp.visit_mut(f);
        }
        self.final_norm.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msq::{init_query_bank, ScaleSet, ScaleSpec};
    use crate::shapeworld::{caption_scene, SceneDescription};

    fn small_bank(seed: u64) -> QueryBank {
        init_query_bank(&ScaleSet::parse("1x1,2x2").unwrap(), 64, &mut SeededRng::new(seed)).unwrap()
    }

    #[test]
    fn tokenizer() {
        let ids = tokenize_text("one red circle").unwrap();
        let pos = |w: &str| VOCABULARY.iter().position(|v| *v == w).unwrap();
        assert_eq!(ids, vec![pos("one"), pos("red"), pos("circle")]);
        assert_eq!(tokenize_text("").unwrap(), Vec::<usize>::new());
        match tokenize_text("one purple circle") {
            Err(Error::Tokenize(w)) => assert_eq!(w, "purple"),
            other => panic!("{other:?}"),
        }
        for s in SceneDescription::enumerate(4) {
            let c = caption_scene(&s);
            assert_eq!(detokenize(&tokenize_text(&c).unwrap()).unwrap(), c);
        }
    }

    #[test]
    fn merge_counts() {
        let p = BackboneParams::new(BackboneConfig::default()).unwrap();
        let img = Image::filled(32, 32, [0.2, 0.4, 0.6]);
        let t = p.patchify_merge(&img).unwrap();
        assert_eq!(t.shape(), &[16, 64]);
        // identical inputs give identical merged tokens
        for r in 1..16 {
            assert_eq!(t.row(r), t.row(0));
        }
        let t = p.patchify_merge(&Image::filled(8, 8, [1.0; 3])).unwrap();
        assert_eq!(t.shape(), &[1, 64]);
        assert!(p.patchify_merge(&Image::filled(12, 8, [1.0; 3])).is_err());
    }

    #[test]
    fn merged_rows_hold_four_patches() {
        let mut img = Image::filled(4, 4, [0.0; 3]);
        for y in 0..4 {
            for x in 0..4 {
                img.set_pixel(y, x, [(y * 4 + x) as f64, 0.0, 0.0]);
            }
        }
        let (rows, gh, gw) = merged_patch_rows(&img, 1).unwrap();
        assert_eq!((gh, gw), (2, 2));
        let red: Vec<f64> = rows.row(1).iter().step_by(3).copied().collect();
        assert_eq!(red, vec![2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn mrope_identity_and_isometry() {
        let mut rng = SeededRng::new(1);
        let x = Tensor::randn(&[3, 16], 1.0, &mut rng);
        let zero = vec![MRopePosition::text(0); 3];
        assert_eq!(mrope_apply(&x, &zero).unwrap(), x);
        let pos = vec![
            MRopePosition { t: 3, h: 7, w: 1 },
            MRopePosition { t: 0, h: 2, w: 9 },
            MRopePosition::text(5),
        ];
        let y = mrope_apply(&x, &pos).unwrap();
        for i in (0..x.len()).step_by(2) {
            let a = x.data()[i].hypot(x.data()[i + 1]);
            let b = y.data()[i].hypot(y.data()[i + 1]);
            assert!((a - b).abs() < 1e-12);
        }
        assert!(mrope_apply(&x, &pos[..2]).is_err());
    }

    // Equal (t,h,w) = (i,i,i) reduces to plain 1-D RoPE on each group.
    #[test]
    fn text_positions_match_grouped_1d_rope() {
        let d = 16;
        let g = mrope_group(d);
        assert_eq!(g, 4);
        let mut rng = SeededRng::new(2);
        let x = Tensor::randn(&[5, d], 1.0, &mut rng);
        let pos: Vec<_> = (0..5).map(MRopePosition::text).collect();
        let y = mrope_apply(&x, &pos).unwrap();
        for i in 0..5 {
            let row = x.row(i);
            let mut expect = row.to_vec();
            for k in 0..3 {
                for j in 0..g / 2 {
                    let theta = i as f64 / 10000f64.powf(2.0 * j as f64 / g as f64);
                    let c = k * g + 2 * j;
                    expect[c] = row[c] * theta.cos() - row[c + 1] * theta.sin();
                    expect[c + 1] = row[c] * theta.sin() + row[c + 1] * theta.cos();
                }
            }
            for (a, b) in y.row(i).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rope_preserves_dot_products_at_equal_positions() {
        let mut rng = SeededRng::new(3);
        let x = Tensor::randn(&[2, 16], 1.0, &mut rng);
        let p = MRopePosition { t: 4, h: 6, w: 2 };
        let y = mrope_apply(&x, &[p, p]).unwrap();
        let dot = |t: &Tensor| t.row(0).iter().zip(t.row(1)).map(|(a, b)| a * b).sum::<f64>();
        assert!((dot(&x) - dot(&y)).abs() < 1e-12);
    }

    #[test]
    fn minimal_forward_shape() {
        let p = BackboneParams::new(BackboneConfig::default()).unwrap();
        let bank = init_query_bank(
            &ScaleSet::new(vec![ScaleSpec::new(1, 1).unwrap()]).unwrap(),
            64,
            &mut SeededRng::new(0),
        )
        .unwrap();
        let hs = p.forward(&[], None, &bank).unwrap();
        assert_eq!(hs.h.shape(), &[3, 64]);
        assert_eq!(hs.spans[0].start, 1);
    }

    #[test]
    fn capacity_is_enforced() {
        let cfg = BackboneConfig { max_len: 10, ..BackboneConfig::default() };
        let p = BackboneParams::new(cfg).unwrap();
        let bank = small_bank(1);
        let ids = tokenize_text("one red circle").unwrap();
        assert!(matches!(p.forward(&ids, None, &bank), Err(Error::Capacity { len: 12, max: 10 })));
    }

    #[test]
    fn frozen_grads_absent_bank_grads_live() {
        let p = BackboneParams::new(BackboneConfig::default()).unwrap();
        let bank = small_bank(2);
        let ids = tokenize_text("a red circle left of a blue square").unwrap();
        let mut g = Graph::new();
        let vars = p.bind(&mut g);
        let bv = bank.bind(&mut Binder::new(&mut g, true));
        let out = p
            .forward_in(&mut g, &vars, &ids, Some(&Image::filled(8, 8, [0.5; 3])), &bank, &bv)
            .unwrap();
        let target = g.constant(Tensor::zeros(g.value(out.h).shape()));
        let loss = g.mse(out.h, target).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(vars.embed).is_none());
        assert!(!g.requires_grad(vars.embed));
        for q in &bv.queries {
            assert!(grads.wrt(*q).data().iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn text_order_matters_at_query_rows() {
        let p = BackboneParams::new(BackboneConfig::default()).unwrap();
        let bank = small_bank(3);
        let a = tokenize_text("a red circle left of a blue square").unwrap();
        let mut b = a.clone();
        b.swap(1, 6);
        let (ha, hb) = (p.forward(&a, None, &bank).unwrap(), p.forward(&b, None, &bank).unwrap());
        let qa = ha.h.slice_rows(ha.queries.start, ha.queries.end).unwrap();
        let qb = hb.h.slice_rows(hb.queries.start, hb.queries.end).unwrap();
        assert!(qa.max_abs_diff(&qb).unwrap() > 1e-6);
    }

    #[test]
    fn causal_prefix_is_unchanged() {
        let p = BackboneParams::new(BackboneConfig::default()).unwrap();
        let bank = small_bank(4);
        let a = tokenize_text("a red circle and a blue square").unwrap();
        let mut b = a.clone();
        b[5] = 12;
        let (ha, hb) = (p.forward(&a, None, &bank).unwrap(), p.forward(&b, None, &bank).unwrap());
        for r in 0..5 {
            assert_eq!(ha.h.row(r), hb.h.row(r));
        }
        assert_ne!(ha.h.row(5), hb.h.row(5));
    }
}
