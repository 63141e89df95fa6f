use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use covernet::assess::{assess, crop_to_stride, render_overlay, AssessConfig};
use covernet::checkpoint::load_checkpoint;
use covernet::dataset::{build_dataset, load_manifest, DatasetOptions, DistortionMaps, Split, DEFAULT_CANVAS};
use covernet::gradcheck::{run_suite, DEFAULT_TOLERANCE};
use covernet::trainer::{
    evaluate_split, save_run, train, EpochRecord, Strategy, TrainConfig, TrainData, TrainError,
};
use covernet::{MultiTaskNet, NetConfig, Reduction};

/// Multi-task clarity assessment and foreground segmentation.
#[derive(Parser, Debug)]
#[command(name = "covernet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a network and write a checkpoint plus report CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Assess a single image.
    Assess(AssessArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    scenes: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_CANVAS)]
    size: usize,
    #[arg(long)]
    include_level_10: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "end2end", value_parser = parse_strategy)]
    strategy: Strategy,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 7e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, default_value_t = 2.3)]
    threshold: f64,
    #[arg(long, default_value_t = 2.0)]
    poly_power: f64,
    #[arg(long, default_value_t = 64)]
    crop: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Multi-stage only; defaults to half the epochs.
    #[arg(long)]
    stage1_epochs: Option<usize>,
    /// Skip the per-epoch test-split evaluation.
    #[arg(long)]
    no_eval: bool,
    #[arg(long, default_value_t = 32)]
    base_channels: usize,
    #[arg(long, default_value_t = 64)]
    head_channels: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    #[arg(long, default_value_t = 2.3)]
    threshold: f64,
    /// Per-sample predictions CSV.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AssessArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    overlay: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse()
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse()
}

fn print_config(value: serde_json::Value) {
    eprintln!("config: {value}");
}

fn fmt4(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let options = DatasetOptions {
        n_scenes: args.scenes,
        master_seed: args.seed,
        canvas_size: args.size,
        include_level_10: args.include_level_10,
        maps: DistortionMaps::default(),
    };
    print_config(json!({
        "command": "gen-data",
        "out": args.out,
        "scenes": options.n_scenes,
        "seed": options.master_seed,
        "size": options.canvas_size,
        "include_level_10": options.include_level_10,
        "maps": options.maps,
    }));
    let manifest = build_dataset(&options, &args.out).with_context(|| format!("building dataset in {}", args.out.display()))?;
    let c = manifest.meta.counts;
    println!("samples: {} (train {}, test {})", c.total, c.train, c.test);
    println!("clean: {}, distorted: {}", c.clean, c.distorted);
    println!("distorted:clean = {}", c.ratio());
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let net_config = NetConfig {
        base_channels: args.base_channels,
        head_channels: args.head_channels,
        input_size: args.crop,
        seed: args.seed,
        ..NetConfig::default()
    };
    let config = TrainConfig {
        lr0: args.lr,
        momentum: args.momentum,
        batch_size: args.batch,
        epochs: args.epochs,
        lambda: args.lambda,
        gate_threshold: args.threshold,
        poly_power: args.poly_power,
        crop_size: args.crop,
        strategy: args.strategy,
        seed: args.seed,
        stage1_epochs: args.stage1_epochs,
        eval_each_epoch: !args.no_eval,
        seg_reduction: Reduction::Mean,
    };
    let mut resolved = config.clone();
    if resolved.strategy == Strategy::MultiStage {
        resolved.stage1_epochs = Some(resolved.resolved_stage1_epochs());
    }
    print_config(json!({
        "command": "train",
        "data": args.data,
        "out": args.out,
        "train": resolved,
        "net": net_config,
    }));
    config.validate()?;
    let manifest = load_manifest(&args.data).with_context(|| format!("loading dataset {}", args.data.display()))?;
    let data = TrainData::from_manifest(&manifest)?;
    let mut net = MultiTaskNet::build(net_config)?;
    let mut report = train(&mut net, &data, &config, print_epoch)?;
    let csv = save_run(&net, &mut report, &args.out)?;
    let last = report.final_epoch().expect("at least one epoch");
    println!("final loss: {:.4}", last.loss.total);
    if let Some(m) = &last.metrics {
        println!(
            "final lcc: {}  miou_all: {}  miou_gated: {}",
            fmt4(m.lcc),
            fmt4(m.miou_all.map(|r| r.miou)),
            fmt4(m.miou_gated.map(|r| r.miou))
        );
    }
    println!("checkpoint: {}", args.out.display());
    println!("report: {}", csv.display());
    println!("checksum: {}", net.checksum());
    Ok(())
}

fn print_epoch(e: &EpochRecord) {
    let m = e.metrics.as_ref();
    eprintln!(
        "epoch {:>3} stage {} loss {:.4} clarity {} seg {} lr {:.4e} lcc {} miou_all {} miou_gated {}",
        e.epoch,
        e.stage,
        e.loss.total,
        fmt4(e.loss.clarity_term),
        fmt4(e.loss.seg_term),
        e.lr,
        fmt4(m.and_then(|m| m.lcc)),
        fmt4(m.and_then(|m| m.miou_all.map(|r| r.miou))),
        fmt4(m.and_then(|m| m.miou_gated.map(|r| r.miou))),
    );
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} not found: {}", path.display());
    }
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    print_config(json!({
        "command": "eval",
        "data": args.data,
        "model": args.model,
        "split": args.split,
        "threshold": args.threshold,
        "report": args.report,
    }));
    require_file(&args.model, "checkpoint")?;
    let net = load_checkpoint(&args.model).with_context(|| format!("loading checkpoint {}", args.model.display()))?;
    let manifest = load_manifest(&args.data).with_context(|| format!("loading dataset {}", args.data.display()))?;
    let eval = evaluate_split(&net, &manifest, args.split, args.threshold)?;
    let r = &eval.report;
    println!("samples     {}", r.n_samples);
    println!("gated       {}", r.n_gated);
    if r.lcc_degenerate {
        println!("lcc         degenerate");
    } else {
        println!("lcc         {}", fmt4(r.lcc));
    }
    println!("miou_all    {}", fmt4(r.miou_all.map(|m| m.miou)));
    println!("miou_gated  {}", fmt4(r.miou_gated.map(|m| m.miou)));
    if let Some(path) = &args.report {
        std::fs::write(path, eval.predictions_csv()).with_context(|| format!("writing {}", path.display()))?;
        println!("report      {}", path.display());
    }
    Ok(())
}

fn assess_cmd(args: AssessArgs) -> Result<()> {
    let config = AssessConfig::default();
    print_config(json!({
        "command": "assess",
        "model": args.model,
        "image": args.image,
        "overlay": args.overlay,
        "assess": config,
    }));
    require_file(&args.model, "checkpoint")?;
    require_file(&args.image, "image")?;
    let net = load_checkpoint(&args.model).with_context(|| format!("loading checkpoint {}", args.model.display()))?;
    let mut img = image::open(&args.image)
        .with_context(|| format!("reading {}", args.image.display()))?
        .to_rgb8();
    if let Some(cropped) = crop_to_stride(&img) {
        eprintln!(
            "notice: center-cropped {}x{} to {}x{} (extents must be divisible by 16)",
            img.width(),
            img.height(),
            cropped.width(),
            cropped.height()
        );
        img = cropped;
    }
    let (assessment, mask) = assess(&net, &img, &config)?;
    println!("{}", assessment.to_json());
    if let Some(path) = &args.overlay {
        render_overlay(&img, &mask, path)?;
    }
    Ok(())
}

fn gradcheck_cmd(args: GradcheckArgs) -> Result<()> {
    print_config(json!({ "command": "gradcheck", "tol": args.tol, "seed": args.seed }));
    let report = run_suite(args.tol, args.seed)?;
    println!("{:<24} {:>12} {:>8}  status", "op", "max_rel_err", "coords");
    for row in &report.rows {
        println!(
            "{:<24} {:>12.4e} {:>8}  {}",
            row.name,
            row.max_rel_error,
            row.coordinates,
            if row.passed { "ok" } else { "FAIL" }
        );
    }
    println!("worst {:.4e} (tol {:.4e}) in {:.4} s", report.worst(), report.tolerance, report.seconds);
    if !report.passed() {
        bail!("gradient check failed: worst relative error {:.4e} >= {:.4e}", report.worst(), args.tol);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Assess(a) => assess_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(TrainError::NonFinite { .. }) = e.downcast_ref::<TrainError>() {
                eprintln!("error: training diverged");
            }
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
