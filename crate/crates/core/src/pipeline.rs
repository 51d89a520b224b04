//! The full text-to-image model: frozen backbone, query bank, connector,
//! DiT and alignment projections, with the per-sample training loss.

use serde::{Deserialize, Serialize};

use crate::backbone::{tokenize_text, BackboneConfig, BackboneParams, BackboneVars};
use crate::connector::{ConditioningSet, ConnectorConfig, ConnectorParams, ConnectorVars};
use crate::error::{Error, Result};
use crate::flowgen::{dit_forward, euler_sample, flow_to_pixel, patchify, pixel_to_flow, total_loss, AlignParams, AlignVars, DitConfig, DitParams, DitVars, LossBreakdown};
use crate::msq::{init_query_bank, slice_scales_in, BankVars, QueryBank, ScaleSet};
use crate::nn::{Binder, Params};
use crate::numcore::{grad_check, Graph, SeededRng, Tensor, Var};
use crate::shapeworld::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub scales: ScaleSet,
    pub backbone: BackboneConfig,
    pub connector: ConnectorConfig,
    pub dit: DitConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scales: ScaleSet::standard(),
            backbone: BackboneConfig { max_len: 400, ..BackboneConfig::default() },
            connector: ConnectorConfig::default(),
            dit: DitConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.backbone.d;
        if self.connector.d != d {
            return Err(Error::Config(format!("connector input {} vs backbone width {d}", self.connector.d)));
        }
        if self.dit.d_c != self.connector.d_c {
            return Err(Error::Config(format!("DiT condition width {} vs connector output {}", self.dit.d_c, self.connector.d_c)));
        }
        self.dit.tap_blocks(self.scales.len())?;
        Ok(())
    }
}

/// All model parameter groups. The backbone is frozen; everything else trains.
#[derive(Clone, Debug, PartialEq)]
pub struct Pipeline {
    pub config: ModelConfig,
    pub backbone: BackboneParams,
    pub bank: QueryBank,
    pub connector: ConnectorParams,
    pub dit: DitParams,
    pub align: AlignParams,
}

/// Graph leaves of one pipeline binding.
pub struct PipelineVars {
    pub backbone: BackboneVars,
    pub bank: BankVars,
    pub connector: ConnectorVars,
    pub dit: DitVars,
    pub align: AlignVars,
    /// Trainable leaves in group order: bank, connector, DiT, alignment.
    pub trainable: Vec<Var>,
}

/// Names of the trainable groups, in gradient order.
pub const TRAINABLE_GROUPS: [&str; 4] = ["bank", "connector", "dit", "align"];

impl Pipeline {
    /// Seeded initialization. The backbone depends only on its own seed.
    pub fn init(config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let backbone = BackboneParams::new(config.backbone.clone())?;
        let bank = init_query_bank(&config.scales, config.backbone.d, &mut rng.split("bank"))?;
        let connector = ConnectorParams::new(config.connector.clone(), config.scales.len(), &mut rng.split("connector"))?;
        let dit = DitParams::new(config.dit.clone(), &mut rng.split("dit"))?;
        let align = AlignParams::new(
            config.scales.as_slice(),
            config.dit.grid(),
            config.dit.width,
            config.connector.d_c,
            &mut rng.split("align"),
        );
        Ok(Self { config, backbone, bank, connector, dit, align })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> PipelineVars {
        let backbone = self.backbone.bind(g);
        let mut b = Binder::new(g, trainable);
        let bank = self.bank.bind(&mut b);
        let connector = self.connector.bind(&mut b);
        let dit = self.dit.bind(&mut b);
        let align = self.align.bind(&mut b);
        PipelineVars { backbone, bank, connector, dit, align, trainable: b.finish() }
    }

    /// Trainable groups as parameter visitors, in gradient order.
    pub fn trainable_groups_mut(&mut self) -> [&mut dyn Params; 4] {
        [&mut self.bank, &mut self.connector, &mut self.dit, &mut self.align]
    }

    pub fn trainable_groups(&self) -> [&dyn Params; 4] {
        [&self.bank, &self.connector, &self.dit, &self.align]
    }

    fn condition_in(&self, g: &mut Graph, vars: &PipelineVars, ids: &[usize]) -> Result<Vec<Var>> {
        let hs = self.backbone.forward_in(g, &vars.backbone, ids, None, &self.bank, &vars.bank)?;
        let states = slice_scales_in(g, hs.h, &hs.spans)?;
        vars.connector.forward(g, &states)
    }

    /// Caption to per-scale condition tokens.
    pub fn condition(&self, caption: &str) -> Result<ConditioningSet> {
        let ids = tokenize_text(caption)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let c = self.condition_in(&mut g, &vars, &ids)?;
        ConditioningSet::new(c.iter().map(|&v| g.value(v).clone()).collect())
    }

    pub fn generate(&self, caption: &str, steps: usize, rng: &mut SeededRng) -> Result<Image> {
        let cond = self.condition(caption)?;
        euler_sample(&self.dit, &cond, steps, rng)
    }

    /// Builds the loss for one sample in `g`: flow matching on the
    /// interpolant at `t` (pixels centred to `[-1, 1]`) plus (if `lambda_align > 0`) the alignment term.
    pub fn sample_loss_in(
        &self,
        g: &mut Graph,
        vars: &PipelineVars,
        sample: &FlowSample,
        lambda_align: f64,
    ) -> Result<(Var, LossBreakdown)> {
        let cfg = &self.config.dit;
        let cond = self.condition_in(g, vars, &sample.ids)?;
        let x1 = sample.x1.iter().map(|&p| pixel_to_flow(p));
        let xt: Vec<f64> = sample.x0.iter().zip(x1.clone()).map(|(a, b)| (1.0 - sample.t) * a + sample.t * b).collect();
        let v: Vec<f64> = sample.x0.iter().zip(x1).map(|(a, b)| b - a).collect();
        let xt = g.constant(patchify(&xt, cfg.image_size, cfg.patch)?);
        let v_target = g.constant(patchify(&v, cfg.image_size, cfg.patch)?);
        let taps = cfg.tap_blocks(cond.len())?;
        let (v_pred, tap_vars) = vars.dit.forward(g, &self.dit, xt, sample.t, &cond, &taps)?;
        let fm = g.mse(v_pred, v_target)?;
        if lambda_align == 0.0 {
            let b = total_loss(g.value(fm).item()?, 0.0, 0.0)?;
            return Ok((fm, b));
        }
        let align = vars.align.loss(g, &self.align, &tap_vars, &cond)?;
        let weighted = g.scale(align, lambda_align)?;
        let total = g.sum_scalars(&[fm, weighted])?;
        let b = total_loss(g.value(fm).item()?, g.value(align).item()?, lambda_align)?;
        Ok((total, b))
    }

    /// Loss breakdown and trainable gradients (group order) for one sample.
    pub fn sample_gradients(&self, sample: &FlowSample, lambda_align: f64) -> Result<(LossBreakdown, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, true);
        let (loss, b) = self.sample_loss_in(&mut g, &vars, sample, lambda_align)?;
        let grads = g.backward(loss)?;
        Ok((b, vars.trainable.iter().map(|&v| grads.wrt(v)).collect()))
    }

    /// One-step reconstruction `x1_hat = xt + (1 - t)·v_pred` of a clean image.
    pub fn reconstruct(&self, caption: &str, x1: &Image, x0: &Tensor, t: f64) -> Result<Image> {
        let cond = self.condition(caption)?;
        let x1t = x1.to_tensor().map(pixel_to_flow);
        let xt = x0.zip_map(&x1t, |a, b| (1.0 - t) * a + t * b)?;
        let v = dit_forward(&xt, t, &cond, &self.dit)?.v_pred;
        let out = xt.zip_map(&v, |x, v| flow_to_pixel(x + (1.0 - t) * v))?;
        Ok(Image::from_tensor(&out)?.clamped())
    }
}

/// Small configuration whose probed parameter tensors stay at or under 64
/// elements, for finite-difference checks through the whole pipeline.
pub fn grad_check_config() -> ModelConfig {
    use crate::msq::ScaleSpec;
    ModelConfig {
        scales: ScaleSet::new(vec![ScaleSpec::square(1).expect("1x1"), ScaleSpec::square(2).expect("2x2")])
            .expect("two scales"),
        backbone: BackboneConfig { d: 12, heads: 2, layers: 1, patch: 2, ..BackboneConfig::default() },
        connector: ConnectorConfig { d: 12, d_c: 4, depth: 1 },
        dit: DitConfig { image_size: 4, patch: 2, width: 8, depth: 2, heads: 2, d_c: 4, mlp_ratio: 2, taps: Vec::new() },
    }
}

/// Relative gradient error of the training loss with respect to one
/// representative tensor of each trainable path: the connector projection,
/// a query-bank block, DiT self- and cross-attention, and an alignment head.
///
/// The alignment target is detached, so paths upstream of the condition
/// tokens are checked against the flow-matching loss alone; finite
/// differences would otherwise see the target move.
pub fn grad_check_paths(seed: u64, eps: f64) -> Result<Vec<(String, f64)>> {
    let mut rng = SeededRng::new(seed);
    let p = Pipeline::init(grad_check_config(), &mut rng)?;
    let n = p.config.dit.pixels();
    let sample = FlowSample {
        ids: tokenize_text("two red circles left of a blue square")?,
        x1: (0..n).map(|_| rng.uniform()).collect(),
        x0: (0..n).map(|_| rng.normal()).collect(),
        t: 0.37,
    };
    type Swap = fn(&mut PipelineVars, Var);
    let paths: [(&str, f64, Tensor, Swap); 5] = [
        ("connector.scale1.w", 0.0, p.connector.scales[1].layers[0].w.clone(), |v, w| v.connector.scales[1].layers[0].w = w),
        ("bank.scale1.queries", 0.0, p.bank.entries()[1].queries.clone(), |v, w| v.bank.queries[1] = w),
        ("dit.block0.self_attn.q", 0.5, p.dit.blocks[0].self_attn.q.w.clone(), |v, w| v.dit.blocks[0].self_attn.q.w = w),
        ("dit.block1.cross_attn.k", 0.5, p.dit.blocks[1].cross_attn.k.w.clone(), |v, w| v.dit.blocks[1].cross_attn.k.w = w),
        ("align.scale1.w", 0.5, p.align.proj[1].w.clone(), |v, w| v.align.proj[1].w = w),
    ];
    let mut out = Vec::with_capacity(paths.len());
    for (name, lambda, probe, swap) in paths {
        let err = grad_check(
            |g, w| {
                let mut vars = p.bind(g, false);
                swap(&mut vars, w);
                Ok(p.sample_loss_in(g, &vars, &sample, lambda)?.0)
            },
            &probe,
            eps,
        )?;
        out.push((name.to_string(), err));
    }
    Ok(out)
}

/// One training example: caption ids, clean image, noise, and time.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub ids: Vec<usize>,
    pub x1: Vec<f64>,
    pub x0: Vec<f64>,
    pub t: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msq::ScaleSpec;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            scales: ScaleSet::new(vec![ScaleSpec::square(1).unwrap(), ScaleSpec::square(2).unwrap()]).unwrap(),
            backbone: BackboneConfig { d: 16, heads: 2, layers: 1, patch: 2, ..BackboneConfig::default() },
            connector: ConnectorConfig { d: 16, d_c: 8, depth: 1 },
            dit: DitConfig { image_size: 8, patch: 2, width: 16, depth: 2, heads: 2, d_c: 8, mlp_ratio: 2, taps: Vec::new() },
        }
    }

    fn sample(p: &Pipeline, rng: &mut SeededRng) -> FlowSample {
        let n = p.config.dit.pixels();
        FlowSample {
            ids: tokenize_text("one red circle").unwrap(),
            x1: (0..n).map(|_| rng.uniform()).collect(),
            x0: (0..n).map(|_| rng.normal()).collect(),
            t: 0.37,
        }
    }

    #[test]
    fn gradients_reach_every_trainable_group() {
        let mut rng = SeededRng::new(1);
        let p = Pipeline::init(tiny_config(), &mut rng).unwrap();
        let s = sample(&p, &mut rng);
        let (b, grads) = p.sample_gradients(&s, 0.5).unwrap();
        assert!(b.align > 0.0 && b.fm > 0.0);
        let counts: Vec<usize> = p.trainable_groups().iter().map(|g| g.named_tensors().len()).collect();
        assert_eq!(grads.len(), counts.iter().sum::<usize>());
        let mut i = 0;
        for (name, n) in TRAINABLE_GROUPS.iter().zip(counts) {
            let norm: f64 = grads[i..i + n].iter().flat_map(|t| t.data()).map(|v| v * v).sum();
            assert!(norm > 0.0, "{name}");
            i += n;
        }
    }

    #[test]
    fn lambda_zero_has_zero_align_and_same_fm() {
        let mut rng = SeededRng::new(2);
        let p = Pipeline::init(tiny_config(), &mut rng).unwrap();
        let s = sample(&p, &mut rng);
        let (b0, _) = p.sample_gradients(&s, 0.0).unwrap();
        let (b1, _) = p.sample_gradients(&s, 0.5).unwrap();
        assert_eq!(b0.align, 0.0);
        assert_eq!(b0.total, b0.fm);
        assert_eq!(b0.fm, b1.fm);
        assert!((b1.total - (b1.fm + 0.5 * b1.align)).abs() <= 1e-12);
    }

    #[test]
    fn grad_check_tensors_are_small_and_pass() {
        let p = Pipeline::init(grad_check_config(), &mut SeededRng::new(0)).unwrap();
        assert!(p.bank.entries()[1].queries.len() <= 64 && p.connector.scales[1].layers[0].w.len() <= 64);
        for (name, err) in grad_check_paths(7, 1e-5).unwrap() {
            assert!(err <= 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn generate_is_deterministic() {
        let mut rng = SeededRng::new(3);
        let p = Pipeline::init(tiny_config(), &mut rng).unwrap();
        let a = p.generate("a red circle left of a blue square", 3, &mut SeededRng::new(5)).unwrap();
        let b = p.generate("a red circle left of a blue square", 3, &mut SeededRng::new(5)).unwrap();
        assert_eq!(a, b);
        assert!(p.generate("one purple circle", 3, &mut rng).is_err());
    }
}
