//! `depthformer`: synthetic-scene generation, training, evaluation,
//! metric reports, point-cloud export, and the gradient suite.

mod config;

use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use depthformer_core::ablation::run_ablation;
use depthformer_core::depthmap::DepthMap;
use depthformer_core::gradcheck::CheckOpts;
use depthformer_core::metrics::{default_bins, evaluate_binned, Crop};
use depthformer_core::scene::gen_scene;
use depthformer_core::train::{train, Control};
use depthformer_core::{checkpoint, depth_io, gradsuite, metrics, model, report, unproject};
use depthformer_core::{Result, Tensor};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "depthformer", version, about = "Monocular depth estimation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value config file (`#` comments allowed).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline key=value overrides, applied after the file.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::from_sources(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes as PPM images and 16-bit depth rasters.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory.
        #[arg(long, default_value = "scenes")]
        out: PathBuf,
        /// Meters per raster unit.
        #[arg(long, default_value_t = 1.0 / 256.0)]
        scale: f64,
    },
    /// Train a model on synthetic scenes and write a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint output path.
        #[arg(long, default_value = "model.ckpt")]
        out: PathBuf,
        /// Loss-curve CSV output path.
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Print progress every N iterations (0 = quiet).
        #[arg(long, default_value_t = 25)]
        log_every: usize,
    },
    /// Evaluate a checkpoint on freshly generated scenes.
    Eval {
        /// Trained checkpoint; its embedded config is the baseline,
        /// overrides apply on top (e.g. a held-out scene_seed).
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "none")]
        crop: String,
        /// Median-align predictions to ground truth before scoring.
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        align: bool,
        /// Score the ground truth against itself, bypassing the model.
        #[arg(long)]
        oracle: bool,
    },
    /// Score a predicted depth file against a ground-truth depth file.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = "none")]
        crop: String,
        #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
        align: bool,
    },
    /// Back-project a depth file into an `X Y Z` point cloud.
    Unproject {
        #[arg(long)]
        depth: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        fx: f64,
        #[arg(long, default_value_t = 1.0)]
        fy: f64,
        #[arg(long, default_value_t = 0.0)]
        cx: f64,
        #[arg(long, default_value_t = 0.0)]
        cy: f64,
        /// Output path (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite over every op.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        /// Cap on probed entries per tensor (0 = all).
        #[arg(long, default_value_t = 0)]
        max_entries: usize,
    },
    /// Train and evaluate all four component variants.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Held-out scene count.
        #[arg(long, default_value_t = 32)]
        eval_scenes: usize,
        /// Held-out scene seed.
        #[arg(long, default_value_t = 777)]
        eval_seed: u64,
        /// Report output path (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn build_scenes(cfg: &RunConfig) -> Result<Vec<(Tensor, DepthMap)>> {
    cfg.scene_specs()?.iter().map(gen_scene).collect()
}

fn parse_crop(s: &str) -> Result<Crop> {
    Crop::parse(s)
}

fn cmd_gen(cfg: &ConfigArgs, out: &Path, scale: f64) -> Result<()> {
    let cfg = cfg.load()?;
    std::fs::create_dir_all(out)?;
    let specs = cfg.scene_specs()?;
    for (i, spec) in specs.iter().enumerate() {
        let (image, depth) = gen_scene(spec)?;
        depth_io::write_ppm(&out.join(format!("image_{i:03}.ppm")), &image)?;
        depth_io::write_raster(&out.join(format!("depth_{i:03}.dfd")), &depth, scale)?;
    }
    println!("wrote {} scenes to {}", specs.len(), out.display());
    Ok(())
}

fn cmd_train(
    args: &ConfigArgs,
    out: &Path,
    curve_path: Option<&Path>,
    log_every: usize,
) -> Result<()> {
    let cfg = args.load()?;
    let model_cfg = cfg.model()?;
    let train_cfg = cfg.train()?;
    let scenes = build_scenes(&cfg)?;
    if let Some((img, _)) = scenes.first() {
        model_cfg.validate(img.shape()[1], img.shape()[2])?;
    }
    let outcome = train(&model_cfg, &train_cfg, &scenes, |p| {
        if log_every > 0 && p.iter % log_every == 0 {
            eprintln!("iter {:>6}  lr {:.3e}  loss {:.6}", p.iter, p.lr, p.loss);
        }
        Control::Continue
    })?;
    let iterations = outcome.curve.len() as u64;
    checkpoint::save(out, &outcome.params, iterations, &cfg.echo())?;
    if let Some(path) = curve_path {
        std::fs::write(path, report::loss_curve_csv(&outcome.curve))?;
    }
    if let Some(at) = outcome.diverged {
        eprintln!(
            "loss became non-finite at iteration {at}; saved the last good state to {}",
            out.display()
        );
        std::process::exit(3);
    }
    println!("saved {} after {} iterations", out.display(), iterations);
    Ok(())
}

fn cmd_eval(
    checkpoint_path: &Path,
    args: &ConfigArgs,
    crop: &str,
    align: bool,
    oracle: bool,
) -> Result<()> {
    let crop = parse_crop(crop)?;
    let ckpt = checkpoint::load(checkpoint_path)?;
    let mut cfg = RunConfig::from_echo(&ckpt.config)?;
    if let Some(path) = &args.config {
        let over = RunConfig::from_sources(Some(path), &args.overrides)?;
        cfg = merge(cfg, over);
    } else {
        for pair in &args.overrides {
            cfg.set_pair(pair)?;
        }
    }
    let model_cfg = cfg.model()?;
    let scenes = build_scenes(&cfg)?;

    let bins = default_bins();
    let mut per_image = Vec::new();
    if oracle {
        for (_, gt) in &scenes {
            per_image.push(evaluate_binned(gt, gt, crop, align, &bins)?);
        }
    } else {
        let mut params = model_cfg.init_params(cfg.train()?.seed);
        checkpoint::restore(&mut params, &ckpt)?;
        for (image, gt) in &scenes {
            let pred = DepthMap::from_tensor(&model::predict(&model_cfg, &params, image)?)?;
            per_image.push(evaluate_binned(&pred, gt, crop, align, &bins)?);
        }
    }
    let rows: Vec<(String, metrics::Metrics)> = metrics::aggregate_binned(&per_image, &bins)
        .into_iter()
        .map(|(label, m, _)| (label, m))
        .collect();
    print!("{}", report::records(&rows));
    eprint!("{}", report::table(&rows));
    Ok(())
}

fn merge(mut base: RunConfig, over: RunConfig) -> RunConfig {
    for pair in over.echo().split_whitespace() {
        base.set_pair(pair).expect("echo is well-formed");
    }
    base
}

fn cmd_metrics(pred: &Path, gt: &Path, crop: &str, align: bool) -> Result<()> {
    let crop = parse_crop(crop)?;
    let (pred, gt) = depth_io::ingest_depth_pair(pred, gt)?;
    let rows = evaluate_binned(&pred, &gt, crop, align, &default_bins())?;
    print!("{}", report::records(&rows));
    eprint!("{}", report::table(&rows));
    Ok(())
}

fn cmd_unproject(depth: &Path, k: unproject::Intrinsics, out: Option<&Path>) -> Result<()> {
    let depth = depth_io::read_depth(depth)?;
    let points = unproject::unproject(&depth, &k);
    let text = unproject::points_to_string(&points);
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, tol: f64, step: f64, max_entries: usize) -> Result<()> {
    let opts = CheckOpts {
        h: step,
        tol,
        max_entries_per_tensor: max_entries,
        seed,
    };
    let mut reports = gradsuite::run_suite(seed, &opts)?;
    reports.extend(gradsuite::run_modules(seed, &opts)?);
    let mut failed = 0usize;
    for r in &reports {
        let status = if r.pass { "ok  " } else { "FAIL" };
        println!("{status} {:<24} max rel err {:.3e}", r.name, r.max_rel_err);
        if !r.pass {
            failed += 1;
            for note in &r.notes {
                println!("     note: {note}");
            }
        }
    }
    println!("{} cases, {} failed", reports.len(), failed);
    if failed > 0 {
        std::process::exit(1);
    }
    Ok(())
}

fn cmd_ablate(
    args: &ConfigArgs,
    eval_count: usize,
    eval_seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = args.load()?;
    let model_cfg = cfg.model()?;
    let train_cfg = cfg.train()?;
    let train_scenes = build_scenes(&cfg)?;
    let mut eval_cfg = cfg.clone();
    eval_cfg.set_pair(&format!("scene_count={eval_count}"))?;
    eval_cfg.set_pair(&format!("scene_seed={eval_seed}"))?;
    let eval_scenes = build_scenes(&eval_cfg)?;

    let rows = run_ablation(
        &model_cfg,
        &train_cfg,
        &train_scenes,
        &eval_scenes,
        Crop::None,
        true,
        |label, p| {
            if p.iter % 50 == 0 {
                eprintln!("[{label}] iter {:>6}  loss {:.6}", p.iter, p.loss);
            }
            Control::Continue
        },
    )?;
    let text = format!("{}\n{}", report::table(&rows), report::records(&rows));
    match out {
        Some(path) => {
            std::fs::write(path, &text)?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Gen { cfg, out, scale } => cmd_gen(&cfg, &out, scale),
        Command::Train {
            cfg,
            out,
            curve,
            log_every,
        } => cmd_train(&cfg, &out, curve.as_deref(), log_every),
        Command::Eval {
            checkpoint,
            cfg,
            crop,
            align,
            oracle,
        } => cmd_eval(&checkpoint, &cfg, &crop, align, oracle),
        Command::Metrics {
            pred,
            gt,
            crop,
            align,
        } => cmd_metrics(&pred, &gt, &crop, align),
        Command::Unproject {
            depth,
            fx,
            fy,
            cx,
            cy,
            out,
        } => cmd_unproject(
            &depth,
            unproject::Intrinsics::new(fx, fy, cx, cy)?,
            out.as_deref(),
        ),
        Command::Gradcheck {
            seed,
            tol,
            step,
            max_entries,
        } => cmd_gradcheck(seed, tol, step, max_entries),
        Command::Ablate {
            cfg,
            eval_scenes,
            eval_seed,
            out,
        } => cmd_ablate(&cfg, eval_scenes, eval_seed, out.as_deref()),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
