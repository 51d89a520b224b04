//! `msq`: data generation, training, sampling, evaluation and manifest tools.
//!
//! Exit codes: 0 on success, 1 on a runtime error (one line on stderr), 2 on
//! a usage error.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use msq_core::checkpoint::{backbone_hash, hex, Checkpoint};
use msq_core::evalkit::{psnr, run_eval, EvalOptions};
use msq_core::numcore::SeededRng;
use msq_core::pipeline::grad_check_paths;
use msq_core::shapeworld::{
    caption_scene, edit_chain_stats, filter_manifest, gen_scene, parse_manifest, read_manifest, render_scene,
    FilterThresholds, Image, ManifestRecord,
};
use msq_core::train::{train_run, TrainConfig};
use msq_core::Exec;

#[derive(Parser)]
#[command(name = "msq", version, about = "Multi-scale query tokens with a flow-matching image head")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render random shape scenes as PPM images with captions.
    GenData(GenDataArgs),
    /// Train the query bank, connector and DiT against the frozen backbone.
    Train(TrainArgs),
    /// Generate one image from a caption.
    Sample(SampleArgs),
    /// Score a checkpoint on the shape-task prompt suite.
    Eval(EvalArgs),
    /// Threshold-filter a JSON-lines manifest.
    Filter(FilterArgs),
    /// Count edit chains in a manifest by length.
    Stats(StatsArgs),
    /// PSNR between two PPM images.
    Psnr(PsnrArgs),
    /// Finite-difference check of every trainable gradient path.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 16x16 images, scales 1x1,2x2,4x4, 4-pixel DiT patches.
    Default,
    /// A very small model for smoke tests.
    Tiny,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file; flags override its values.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    steps: Option<u64>,
    /// Overrides the config file and MSQ_SEED.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda_align: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Directory for checkpoints, the effective config and the loss log.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prompts per category.
    #[arg(long, default_value_t = 50)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Euler steps per generated image.
    #[arg(long, default_value_t = 20)]
    steps: usize,
    /// Emit the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct FilterArgs {
    /// Manifest path, or `-` for stdin.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 2.5)]
    max_aspect: f64,
    #[arg(long, default_value_t = 0.5)]
    max_watermark: f64,
    #[arg(long, default_value_t = 0.45)]
    min_clip: f64,
}

#[derive(Args)]
struct StatsArgs {
    /// Manifest path, or `-` for stdin.
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args)]
struct PsnrArgs {
    a: PathBuf,
    b: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match run(cli.command, exec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command, exec: Exec) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a, exec),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval(a, exec),
        Command::Filter(a) => filter(a, exec),
        Command::Stats(a) => stats(a, exec),
        Command::Psnr(a) => {
            let d = psnr(&read_image(&a.a)?, &read_image(&a.b)?)?;
            println!("{d:.4}");
            Ok(())
        }
        Command::GradCheck(a) => grad_check(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let root = SeededRng::new(a.seed);
    let mut manifest = BufWriter::new(File::create(a.out.join("manifest.jsonl"))?);
    for i in 0..a.n {
        let scene = gen_scene(&mut root.split_indexed("scene", i as u64), None)?;
        let image = render_scene(&scene, a.size)?;
        let caption = caption_scene(&scene);
        let id = format!("{i:05}");
        image.write_ppm(BufWriter::new(File::create(a.out.join(format!("{id}.ppm")))?))?;
        fs::write(a.out.join(format!("{id}.txt")), format!("{caption}\n"))?;
        let record = ManifestRecord {
            id,
            width: a.size as u32,
            height: a.size as u32,
            watermark_score: 0.0,
            clip_score: 1.0,
            caption,
            edit_chain_id: None,
            edit_step: None,
        };
        writeln!(manifest, "{}", serde_json::to_string(&record)?)?;
    }
    manifest.flush()?;
    log::info!("wrote {} scenes to {}", a.n, a.out.display());
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match (&a.config, a.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            TrainConfig::from_json(&text)?
        }
        (None, Some(Preset::Tiny)) => TrainConfig::tiny(),
        (None, _) => TrainConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.lambda_align {
        cfg.lambda_align = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.adam.lr = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    cfg.out_dir = Some(a.out.clone());
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs, exec: Exec) -> Result<()> {
    let cfg = train_config(&a)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("config.json"), cfg.to_json() + "\n")?;
    let start = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let before = match &start {
        Some(c) => backbone_hash(&c.model),
        None => backbone_hash(&msq_core::train::fresh_checkpoint(&cfg)?.model),
    };
    let out = a.out.clone();
    let final_step = cfg.steps;
    let (ckpt, log) = train_run(&cfg, start, exec, |c| {
        let name = if c.step == final_step { "final.bin".to_string() } else { format!("step-{:06}.bin", c.step) };
        log::info!("step {}: saving {name}", c.step);
        c.save(&out.join(name))
    })?;
    let mut w = BufWriter::new(File::create(a.out.join("log.jsonl"))?);
    for row in &log {
        writeln!(w, "{}", serde_json::to_string(row)?)?;
    }
    w.flush()?;
    let after = backbone_hash(&ckpt.model);
    if after != before {
        bail!("frozen backbone changed during training");
    }
    let last = log.last().map(|r| r.total).unwrap_or(f64::NAN);
    println!("step {} total {last:.6} backbone sha256 {}", ckpt.step, hex(&after));
    Ok(())
}

fn sample(a: SampleArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let image = ckpt.model.generate(&a.prompt, a.steps, &mut SeededRng::new(a.seed))?;
    image.write_ppm(BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?))?;
    Ok(())
}

fn eval(a: EvalArgs, exec: Exec) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let opts = EvalOptions { n_per_category: a.n, seed: a.seed, sample_steps: a.steps, exec, ..EvalOptions::default() };
    let report = run_eval(&ckpt.model, &opts)?;
    if let Some(w) = &report.warning {
        log::warn!("{w}");
    }
    if a.json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn open_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let lines = if path.as_os_str() == "-" {
        read_manifest(io::stdin().lock())?
    } else {
        let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        read_manifest(BufReader::new(f))?
    };
    Ok(lines)
}

fn filter(a: FilterArgs, exec: Exec) -> Result<()> {
    let thresholds = FilterThresholds { max_aspect: a.max_aspect, max_watermark: a.max_watermark, min_clip: a.min_clip };
    let entries = parse_manifest(&open_lines(&a.manifest)?, exec);
    let outcome = filter_manifest(entries, &thresholds);
    let mut out = io::stdout().lock();
    for r in &outcome.kept {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    out.flush()?;
    let mut err = io::stderr().lock();
    for (r, reasons) in &outcome.rejected {
        let text: Vec<String> = reasons.iter().map(|x| x.to_string()).collect();
        writeln!(err, "rejected {}: {}", r.id, text.join("; "))?;
    }
    for e in &outcome.errors {
        writeln!(err, "skipped: {e}")?;
    }
    writeln!(
        err,
        "kept {}, rejected {}, malformed {}",
        outcome.kept.len(),
        outcome.rejected.len(),
        outcome.errors.len()
    )?;
    Ok(())
}

fn stats(a: StatsArgs, exec: Exec) -> Result<()> {
    let mut records = Vec::new();
    for entry in parse_manifest(&open_lines(&a.manifest)?, exec) {
        match entry {
            Ok(r) => records.push(r),
            Err(e) => eprintln!("skipped: {e}"),
        }
    }
    let h = edit_chain_stats(&records)?;
    let report = serde_json::json!({ "records": records.len(), "edit_chains": h });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn read_image(path: &Path) -> Result<Image> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Image::read_ppm(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn grad_check(a: GradCheckArgs) -> Result<()> {
    let results = grad_check_paths(a.seed, a.eps)?;
    let mut worst = 0.0f64;
    for (name, err) in &results {
        println!("{name:<28} {err:.3e}");
        worst = worst.max(*err);
    }
    if worst > a.tolerance {
        bail!("largest gradient error {worst:.3e} exceeds {:.0e}", a.tolerance);
    }
    Ok(())
}
