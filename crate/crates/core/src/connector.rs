//! Trainable bridge from backbone query states to diffusion conditioning.

use serde::{Deserialize, Serialize};

use crate::backbone::HiddenStates;
use crate::error::{dim_err, Error, Result};
use crate::msq::{slice_scales, ScaleSpan};
use crate::nn::{Binder, Linear, LinearVars, Norm, NormVars, Params};
use crate::numcore::{Graph, SeededRng, Tensor, Var};

/// Per-scale condition tokens, `N_k x d_c` each, in ascending scale order.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningSet {
    pub tokens: Vec<Tensor>,
    pub d_c: usize,
}

impl ConditioningSet {
    pub fn new(tokens: Vec<Tensor>) -> Result<Self> {
        let d_c = match tokens.first() {
            Some(t) => t.dims2()?.1,
            None => return Err(Error::Config("conditioning set needs at least one scale".into())),
        };
        for t in &tokens {
            if t.dims2()?.1 != d_c {
                return dim_err(format!("condition width {} vs {d_c}", t.dims2()?.1));
            }
        }
        Ok(Self { tokens, d_c })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Query-region rows of `H`, one tensor per scale.
pub fn read_query_states(hs: &HiddenStates) -> Result<Vec<Tensor>> {
    let q = hs.h.slice_rows(hs.queries.start, hs.queries.end)?;
    let q0 = hs.queries.start;
    let mut spans = Vec::with_capacity(hs.spans.len());
    for s in &hs.spans {
        if s.start < q0 {
            return dim_err(format!("span {}..{} precedes the query region at {q0}", s.start, s.end));
        }
        spans.push(ScaleSpan { scale_id: s.scale_id, start: s.start - q0, end: s.end - q0 });
    }
    slice_scales(&q, &spans)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectorConfig {
    pub d: usize,
    pub d_c: usize,
    /// Affine layers per scale (GELU between consecutive layers).
    pub depth: usize,
}

impl Default for ConnectorConfig {
    fn default() -> Self {
        Self { d: 64, d_c: 64, depth: 1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleProjection {
    pub layers: Vec<Linear>,
    pub norm: Norm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConnectorParams {
    pub config: ConnectorConfig,
    pub scales: Vec<ScaleProjection>,
}

pub struct ScaleProjectionVars {
    pub layers: Vec<LinearVars>,
    pub norm: NormVars,
}

pub struct ConnectorVars {
    pub scales: Vec<ScaleProjectionVars>,
}

impl ConnectorParams {
    pub fn new(config: ConnectorConfig, n_scales: usize, rng: &mut SeededRng) -> Result<Self> {
        Self::build(config, n_scales, |d_in, d_out| {
            Linear::new(d_in, d_out, 1.0 / (d_in as f64).sqrt(), rng)
        })
    }

    /// Identity projections (requires `d_c == d`).
    pub fn identity(config: ConnectorConfig, n_scales: usize) -> Result<Self> {
        if config.d != config.d_c {
            return Err(Error::Config(format!("identity connector needs d_c = d, got {} vs {}", config.d_c, config.d)));
        }
        Self::build(config, n_scales, |d, _| Linear::identity(d))
    }

    fn build(config: ConnectorConfig, n_scales: usize, mut layer: impl FnMut(usize, usize) -> Linear) -> Result<Self> {
        if config.depth == 0 || config.d == 0 || config.d_c == 0 || n_scales == 0 {
            return Err(Error::Config(format!("invalid connector config {config:?} for {n_scales} scales")));
        }
        let scales = (0..n_scales)
            .map(|_| ScaleProjection {
                layers: (0..config.depth)
                    .map(|i| layer(if i == 0 { config.d } else { config.d_c }, config.d_c))
                    .collect(),
                norm: Norm::new(config.d_c),
            })
            .collect();
        Ok(Self { config, scales })
    }

    pub fn bind(&self, b: &mut Binder) -> ConnectorVars {
        ConnectorVars {
            scales: self
                .scales
                .iter()
                .map(|s| ScaleProjectionVars {
                    layers: s.layers.iter().map(|l| l.bind(b)).collect(),
                    norm: s.norm.bind(b),
                })
                .collect(),
        }
    }
}

impl ConnectorVars {
    pub fn forward(&self, g: &mut Graph, states: &[Var]) -> Result<Vec<Var>> {
        if states.len() != self.scales.len() {
            return Err(Error::Config(format!(
                "{} query scales for a {}-scale connector",
                states.len(),
                self.scales.len()
            )));
        }
        states
            .iter()
            .zip(&self.scales)
            .map(|(&x, s)| {
                let mut h = x;
                for (i, l) in s.layers.iter().enumerate() {
                    if i > 0 {
                        h = g.gelu(h)?;
                    }
                    h = l.forward(g, h)?;
                }
                s.norm.forward(g, h)
            })
            .collect()
    }
}

/// Per-scale affine map followed by layer norm.
pub fn project_condition(states: &[Tensor], params: &ConnectorParams) -> Result<ConditioningSet> {
    for s in states {
        if s.dims2()?.1 != params.config.d {
            return dim_err(format!("state width {} vs connector input {}", s.dims2()?.1, params.config.d));
        }
    }
    let mut g = Graph::new();
    let vars = params.bind(&mut Binder::new(&mut g, false));
    let xs: Vec<Var> = states.iter().map(|s| g.constant(s.clone())).collect();
    let ys = vars.forward(&mut g, &xs)?;
    ConditioningSet::new(ys.into_iter().map(|y| g.value(y).clone()).collect())
}

impl Params for ConnectorParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (k, s) in self.scales.iter().enumerate() {
            for (i, l) in s.layers.iter().enumerate() {
                l.visit(&format!("{prefix}scale{k}.layer{i}."), f);
            }
            s.norm.visit(&format!("{prefix}scale{k}.norm."), f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for s in &mut self.scales {
            for l in &mut s.layers {
                l.visit_mut(f);
            }
            s.norm.visit_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, BackboneParams};
    use crate::msq::{init_query_bank, ScaleSet};
    use crate::nn::LN_EPS;
    use crate::numcore::{grad_check, layer_norm};

    #[test]
    fn reads_standard_scale_rows() {
        let bank = init_query_bank(&ScaleSet::standard(), 64, &mut SeededRng::new(0)).unwrap();
        let cfg = BackboneConfig { max_len: 400, ..BackboneConfig::default() };
        let bb = BackboneParams::new(cfg).unwrap();
        let hs = bb.forward(&[0, 9, 13], None, &bank).unwrap();
        let states = read_query_states(&hs).unwrap();
        let rows: Vec<_> = states.iter().map(|s| s.rows()).collect();
        assert_eq!(rows, vec![16, 64, 256]);
        let direct = slice_scales(&hs.h, &hs.spans).unwrap();
        assert_eq!(states, direct);
    }

    #[test]
    fn identity_projection_is_layer_norm() {
        let mut rng = SeededRng::new(1);
        let p = ConnectorParams::identity(ConnectorConfig::default(), 2).unwrap();
        let x = vec![Tensor::randn(&[4, 64], 1.0, &mut rng), Tensor::randn(&[16, 64], 1.0, &mut rng)];
        let c = project_condition(&x, &p).unwrap();
        for (xi, ci) in x.iter().zip(&c.tokens) {
            let want = layer_norm(xi, &Tensor::ones(&[64]), &Tensor::zeros(&[64]), LN_EPS).unwrap();
            assert!(ci.max_abs_diff(&want).unwrap() < 1e-12);
        }
    }

    #[test]
    fn scales_are_isolated() {
        let mut rng = SeededRng::new(2);
        let mut p = ConnectorParams::new(ConnectorConfig::default(), 2, &mut rng).unwrap();
        let x = vec![Tensor::randn(&[4, 64], 1.0, &mut rng), Tensor::randn(&[16, 64], 1.0, &mut rng)];
        let before = project_condition(&x, &p).unwrap();
        p.scales[0].layers[0].w.data_mut()[5] += 0.5;
        let after = project_condition(&x, &p).unwrap();
        assert_ne!(before.tokens[0], after.tokens[0]);
        assert_eq!(before.tokens[1], after.tokens[1]);
        assert_eq!(after.tokens[1].rows(), 16);
    }

    #[test]
    fn width_mismatch() {
        let p = ConnectorParams::identity(ConnectorConfig::default(), 1).unwrap();
        assert!(matches!(project_condition(&[Tensor::zeros(&[2, 32])], &p), Err(Error::Dimension(_))));
    }

    #[test]
    fn projection_gradients() {
        let mut rng = SeededRng::new(3);
        let cfg = ConnectorConfig { d: 8, d_c: 4, depth: 2 };
        let p = ConnectorParams::new(cfg, 1, &mut rng).unwrap();
        let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let target = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let w0 = p.scales[0].layers[0].w.clone();
        let err = grad_check(
            |g, w| {
                let mut b = Binder::new(g, false);
                let mut vars = p.bind(&mut b);
                vars.scales[0].layers[0].w = w;
                let xv = g.constant(x.clone());
                let y = vars.forward(g, &[xv])?;
                let t = g.constant(target.clone());
                g.mse(y[0], t)
            },
            &w0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
