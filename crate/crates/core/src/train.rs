//! Training configuration and loop. The backbone stays frozen; only the query
//! bank, connector, DiT and alignment projections are updated.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{tokenize_text, BackboneConfig};
use crate::checkpoint::Checkpoint;
use crate::connector::ConnectorConfig;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::flowgen::{total_loss, DitConfig, LossBreakdown};
use crate::msq::ScaleSet;
use crate::numcore::{SeededRng, Tensor};
use crate::optim::{adam_step, sgd_step, AdamConfig, AdamState, OptimizerKind};
use crate::pipeline::{FlowSample, ModelConfig, Pipeline};
use crate::shapeworld::{caption_scene, gen_scene, render_scene, SceneDescription};

pub const SEED_ENV: &str = "MSQ_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lambda_align: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Size of the fixed scene pool; 0 draws fresh scenes every step.
    pub dataset_size: usize,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    /// The 16x16 shape task: 4-pixel DiT patches, so each 8-pixel object cell
    /// spans 2x2 tokens, and scales 1x1, 2x2, 4x4 so the finest scale matches
    /// the DiT's 4x4 token grid.
    fn default() -> Self {
        Self {
            model: ModelConfig {
                scales: ScaleSet::parse("1x1,2x2,4x4").expect("valid scales"),
                backbone: BackboneConfig::default(),
                connector: ConnectorConfig::default(),
                dit: DitConfig { patch: 4, ..DitConfig::default() },
            },
            lambda_align: 0.5,
            optimizer: OptimizerKind::Adam,
            adam: AdamConfig::default(),
            batch_size: 4,
            steps: 2000,
            seed: 0,
            dataset_size: 0,
            checkpoint_every: 0,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    /// A very small configuration for fast tests.
    pub fn tiny() -> Self {
        Self {
            model: ModelConfig {
                scales: ScaleSet::parse("1x1,2x2").expect("valid scales"),
                backbone: BackboneConfig { d: 16, heads: 2, layers: 1, patch: 2, ..BackboneConfig::default() },
                connector: ConnectorConfig { d: 16, d_c: 8, depth: 1 },
                dit: DitConfig { image_size: 8, patch: 2, width: 16, depth: 2, heads: 2, d_c: 8, mlp_ratio: 2, taps: Vec::new() },
            },
            batch_size: 2,
            steps: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lambda_align >= 0.0 && self.lambda_align.is_finite()) {
            return Err(Error::Config(format!("lambda_align {} must be finite and non-negative", self.lambda_align)));
        }
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.model.dit.image_size % 2 != 0 || self.model.dit.image_size < 4 {
            return Err(Error::Config("image size must be even and at least 4".into()));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s).map_err(|e| Error::Config(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `MSQ_SEED` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub fm: f64,
    pub align: f64,
    pub total: f64,
    pub wall_ms: f64,
}

/// Initial training state for `config`.
pub fn fresh_checkpoint(config: &TrainConfig) -> Result<Checkpoint> {
    config.validate()?;
    let rng = SeededRng::new(config.seed);
    let model = Pipeline::init(config.model.clone(), &mut rng.split("init"))?;
    let optim = match config.optimizer {
        OptimizerKind::Adam => model.trainable_groups().iter().map(|g| AdamState::for_params(*g)).collect(),
        OptimizerKind::Sgd => vec![AdamState::default(); 4],
    };
    Ok(Checkpoint { config: config.clone(), model, optim, rng, step: 0 })
}

/// The scene used for batch item `item` of `step`.
pub fn training_scene(config: &TrainConfig, rng: &SeededRng, step: u64, item: usize) -> Result<SceneDescription> {
    let mut r = if config.dataset_size == 0 {
        rng.split_indexed("scene", step * config.batch_size as u64 + item as u64)
    } else {
        let mut pick = rng.split_indexed("pick", step * config.batch_size as u64 + item as u64);
        rng.split_indexed("pool", pick.below(config.dataset_size) as u64)
    };
    gen_scene(&mut r, None)
}

fn batch_samples(config: &TrainConfig, rng: &SeededRng, step: u64) -> Result<Vec<FlowSample>> {
    let size = config.model.dit.image_size;
    (0..config.batch_size)
        .map(|i| {
            let scene = training_scene(config, rng, step, i)?;
            let img = render_scene(&scene, size)?;
            let ids = tokenize_text(&caption_scene(&scene))?;
            let mut r = rng.split_indexed("noise", step * config.batch_size as u64 + i as u64);
            let x0 = (0..img.data().len()).map(|_| r.normal()).collect();
            Ok(FlowSample { ids, x1: img.data().to_vec(), x0, t: r.uniform() })
        })
        .collect()
}

/// One optimizer step on `ckpt`. Returns the mean loss breakdown.
pub fn train_step(ckpt: &mut Checkpoint, exec: Exec) -> Result<LossBreakdown> {
    let cfg = &ckpt.config;
    let step = ckpt.step;
    let samples = batch_samples(cfg, &ckpt.rng, step)?;
    let lambda = cfg.lambda_align;
    let model = &ckpt.model;
    let results = exec.map(&samples, |s| model.sample_gradients(s, lambda));

    // fixed-order reduction keeps sequential and parallel runs bit-identical
    let n = samples.len() as f64;
    let (mut fm, mut align) = (0.0, 0.0);
    let mut grads: Option<Vec<Tensor>> = None;
    for r in results {
        let (b, g) = r.map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
            e => e,
        })?;
        fm += b.fm;
        align += b.align;
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => {
                for (a, gi) in acc.iter_mut().zip(&g) {
                    for (x, y) in a.data_mut().iter_mut().zip(gi.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    let breakdown = total_loss(fm / n, align / n, lambda)
        .map_err(|e| Error::Numeric(format!("step {step}: non-finite loss (fm {}, align {}): {e}", fm / n, align / n)))?;
    let mut grads = grads.expect("batch is non-empty");
    for g in &mut grads {
        for v in g.data_mut() {
            *v /= n;
        }
    }

    let (adam, kind) = (cfg.adam, cfg.optimizer);
    let mut offset = 0;
    for (group, state) in ckpt.model.trainable_groups_mut().into_iter().zip(ckpt.optim.iter_mut()) {
        let count = group.named_tensors().len();
        let gs = &grads[offset..offset + count];
        match kind {
            OptimizerKind::Adam => adam_step(group, gs, state, &adam)?,
            OptimizerKind::Sgd => {
                sgd_step(group, gs, adam.lr)?;
                state.step += 1;
            }
        }
        offset += count;
    }
    ckpt.step += 1;
    Ok(breakdown)
}

/// Trains from `start` (or a fresh state) until `config.steps`. `on_checkpoint`
/// receives every interval checkpoint and the final one.
pub fn train_run(
    config: &TrainConfig,
    start: Option<Checkpoint>,
    exec: Exec,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<(Checkpoint, Vec<TrainLogRow>)> {
    config.validate()?;
    let mut ckpt = match start {
        Some(mut c) => {
            if c.config.model != config.model || c.config.seed != config.seed {
                return Err(Error::Config("resume checkpoint was trained with a different model or seed".into()));
            }
            c.config = config.clone();
            c
        }
        None => fresh_checkpoint(config)?,
    };
    let mut log = Vec::new();
    while ckpt.step < config.steps {
        let t0 = Instant::now();
        let b = train_step(&mut ckpt, exec)?;
        log.push(TrainLogRow {
            step: ckpt.step,
            fm: b.fm,
            align: b.align,
            total: b.total,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
        log::debug!("step {} fm {:.5} align {:.5} total {:.5}", ckpt.step, b.fm, b.align, b.total);
        if config.checkpoint_every > 0 && ckpt.step % config.checkpoint_every == 0 && ckpt.step < config.steps {
            on_checkpoint(&ckpt)?;
        }
    }
    on_checkpoint(&ckpt)?;
    Ok((ckpt, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::backbone_hash;
    use crate::nn::Params;

    #[test]
    fn config_json_round_trip() {
        let c = TrainConfig::default();
        let back = TrainConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json(), c.to_json());
        let bad = c.to_json().replace("\"lambda_align\": 0.5", "\"lambda_align\": -1.0");
        assert!(matches!(TrainConfig::from_json(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn training_changes_trainables_only() {
        let cfg = TrainConfig::tiny();
        let init = fresh_checkpoint(&cfg).unwrap();
        let (end, log) = train_run(&cfg, None, Exec::Sequential, |_| Ok(())).unwrap();
        assert_eq!(log.len(), 4);
        assert_eq!(backbone_hash(&init.model), backbone_hash(&end.model));
        assert_eq!(init.model.backbone, end.model.backbone);
        for (a, b) in init.model.trainable_groups().iter().zip(end.model.trainable_groups()) {
            assert_ne!(a.named_tensors(), b.named_tensors());
        }
        for (i, row) in log.iter().enumerate() {
            assert_eq!(row.step, i as u64 + 1);
            assert!((row.total - (row.fm + cfg.lambda_align * row.align)).abs() <= 1e-12);
        }
    }

    #[test]
    fn lambda_zero_never_aligns() {
        let cfg = TrainConfig { lambda_align: 0.0, ..TrainConfig::tiny() };
        let init = fresh_checkpoint(&cfg).unwrap();
        let (end, log) = train_run(&cfg, None, Exec::Sequential, |_| Ok(())).unwrap();
        assert!(log.iter().all(|r| r.align == 0.0 && r.total == r.fm));
        // zero gradients leave the unused projections untouched under Adam
        assert_eq!(init.model.align, end.model.align);
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let cfg = TrainConfig::tiny();
        let (a, la) = train_run(&cfg, None, Exec::Sequential, |_| Ok(())).unwrap();
        let (b, lb) = train_run(&cfg, None, Exec::Parallel, |_| Ok(())).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let strip = |l: &[TrainLogRow]| l.iter().map(|r| (r.step, r.fm.to_bits(), r.align.to_bits())).collect::<Vec<_>>();
        assert_eq!(strip(&la), strip(&lb));
    }

    #[test]
    fn resume_matches_single_run() {
        let cfg = TrainConfig { checkpoint_every: 2, ..TrainConfig::tiny() };
        let mut saved = Vec::new();
        let (full, _) = train_run(&cfg, None, Exec::Sequential, |c| {
            saved.push(c.to_bytes());
            Ok(())
        })
        .unwrap();
        assert_eq!(saved.len(), 2);
        let mid = Checkpoint::from_bytes(&saved[0]).unwrap();
        assert_eq!(mid.step, 2);
        let (resumed, log) = train_run(&cfg, Some(mid), Exec::Sequential, |_| Ok(())).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(resumed.to_bytes(), full.to_bytes());
    }

    #[test]
    fn sgd_switch() {
        let cfg = TrainConfig { optimizer: OptimizerKind::Sgd, ..TrainConfig::tiny() };
        let init = fresh_checkpoint(&cfg).unwrap();
        let (end, _) = train_run(&cfg, None, Exec::Sequential, |_| Ok(())).unwrap();
        assert_ne!(init.model.dit.named_tensors(), end.model.dit.named_tensors());
        assert!(end.optim.iter().all(|s| s.m.is_empty() && s.step == 4));
        let back = Checkpoint::from_bytes(&end.to_bytes()).unwrap();
        assert_eq!(back, end);
    }
}
