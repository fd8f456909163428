use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cvsnet::ablation::{run_sweep, test_card, validate_taps, StimulusSweep, SweepKind};
use cvsnet::checkpoint;
use cvsnet::data::{load_image_tensor, AugmentConfig, Dataset, DatasetKind, DatasetSource, Split};
use cvsnet::gradcheck::full_suite;
use cvsnet::lgn::pathway_ratio_report;
use cvsnet::model::{tap_names, Model};
use cvsnet::pixmap::{export_channel_grid, export_feature_map};
use cvsnet::train::{evaluate, train_with_progress, Progress, TrainConfig, TrainOutputs};
use serde_json::json;
use sha2::{Digest, Sha256};

mod config;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "cvsnet", version, about = "Train, evaluate and probe CVSNet models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    shared: Shared,
}

#[derive(Args, Debug, Clone)]
struct Shared {
    /// JSON run configuration (model, optional train and data sections) or a bare model config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Checkpoint to load weights and architecture from.
    #[arg(long, global = true)]
    ckpt: Option<PathBuf>,
    /// Overrides the model and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving every artifact of the run.
    #[arg(long, global = true, default_value = "cvsnet-out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on CIFAR-10 binaries or an image folder.
    Train(TrainArgs),
    /// Top-1/top-5 accuracy of a checkpoint on the validation split.
    Eval(DataArgs),
    /// Brightness sweep with per-tap change metrics and panels.
    AblateBrightness(SweepArgs),
    /// Hue-rotation sweep with per-tap change metrics and panels.
    AblateColor(SweepArgs),
    /// M/P/K channel counts against the biological split.
    Pathways,
    /// Parameter and FLOP report.
    Inspect,
    /// Finite-difference gradient suite.
    Gradcheck,
    /// Render tap feature maps for one image.
    ExportFeatures(FeatureArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset root; overrides the config's data section.
    #[arg(long)]
    data: Option<PathBuf>,
    /// cifar10-binary or image-folder.
    #[arg(long, value_parser = parse_kind)]
    data_kind: Option<DatasetKind>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    val_limit: Option<usize>,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// PNG or PPM stimulus; a built-in test card when omitted.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Comma-separated tap names (default: all taps).
    #[arg(long, value_delimiter = ',')]
    taps: Vec<String>,
    /// Comma-separated factors or degrees (default sweep when omitted).
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
}

#[derive(Args, Debug)]
struct FeatureArgs {
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    taps: Vec<String>,
}

fn parse_kind(s: &str) -> std::result::Result<DatasetKind, String> {
    match s {
        "cifar10-binary" | "cifar10_binary" => Ok(DatasetKind::Cifar10Binary),
        "image-folder" | "image_folder" => Ok(DatasetKind::ImageFolder),
        other => Err(format!("unknown dataset kind `{other}` (cifar10-binary, image-folder)")),
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::AblateBrightness(_) => "ablate-brightness",
            Command::AblateColor(_) => "ablate-color",
            Command::Pathways => "pathways",
            Command::Inspect => "inspect",
            Command::Gradcheck => "gradcheck",
            Command::ExportFeatures(_) => "export-features",
        }
    }
}

struct Session {
    shared: Shared,
    run: RunConfig,
}

impl Session {
    fn load(shared: Shared) -> Result<Self> {
        let mut run = match &shared.config {
            Some(path) => RunConfig::read(path)?,
            None => RunConfig::default(),
        };
        if let Some(ckpt) = &shared.ckpt {
            let bytes = std::fs::read(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
            run.model = checkpoint::decode(&bytes)?.config()?;
        }
        if let Some(seed) = shared.seed {
            run.model.seed = seed;
            run.train.seed = seed;
        }
        run.model.validate()?;
        Ok(Session { shared, run })
    }

    fn model(&self) -> Result<Model<f32>> {
        match &self.shared.ckpt {
            Some(path) => Ok(checkpoint::load(path)?),
            None => Ok(Model::build(self.run.model.clone())?),
        }
    }

    fn out(&self) -> &Path {
        &self.shared.out
    }

    fn write_json(&self, name: &str, value: &serde_json::Value) -> Result<PathBuf> {
        let path = self.out().join(name);
        std::fs::write(&path, serde_json::to_string_pretty(value)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn source(&self, args: &DataArgs, split: Split) -> Result<DatasetSource> {
        let data = self.run.data.clone();
        let root = args
            .data
            .clone()
            .or_else(|| data.as_ref().map(|d| d.root.clone()))
            .ok_or_else(|| anyhow!("no dataset: pass --data or add a `data` section to the config"))?;
        let kind = args.data_kind.or(data.map(|d| d.kind)).unwrap_or(DatasetKind::Cifar10Binary);
        Ok(DatasetSource::new(kind, root, split))
    }

    fn stimulus(&self, image: &Option<PathBuf>) -> Result<cvsnet::Tensor4D<f32>> {
        let side = self.run.model.input_resolution;
        match image {
            Some(p) => Ok(load_image_tensor(p, side)?),
            None => Ok(test_card(side)),
        }
    }
}

fn taps_or_all(taps: &[String]) -> Result<Vec<String>> {
    let taps = if taps.is_empty() { tap_names() } else { taps.to_vec() };
    validate_taps(&taps)?;
    Ok(taps)
}

fn manifest(cli_args: &[String], command: &str, ctx: &Session, status: &str) -> Result<serde_json::Value> {
    let canonical = ctx.run.to_canonical_json()?;
    let hash = Sha256::digest(canonical.as_bytes());
    let ckpt_hash = match &ctx.shared.ckpt {
        Some(p) => Some(format!("{:x}", Sha256::digest(std::fs::read(p)?))),
        None => None,
    };
    Ok(json!({
        "argv": cli_args,
        "checkpoint": ctx.shared.ckpt.as_ref().map(|p| p.display().to_string()),
        "checkpoint_sha256": ckpt_hash,
        "command": command,
        "config": serde_json::from_str::<serde_json::Value>(&canonical)?,
        "config_sha256": format!("{hash:x}"),
        "seed": ctx.run.model.seed,
        "status": status,
        "versions": {
            "cvsnet": env!("CARGO_PKG_VERSION"),
            "checkpoint_format": checkpoint::FORMAT_VERSION,
        },
    }))
}

fn run(cli: Cli, argv: &[String]) -> Result<()> {
    let command = cli.command.name();
    std::fs::create_dir_all(&cli.shared.out).with_context(|| format!("creating {}", cli.shared.out.display()))?;
    let ctx = match Session::load(cli.shared.clone()) {
        Ok(ctx) => ctx,
        Err(e) => {
            let m = json!({ "argv": argv, "command": command, "status": format!("failed: {e:#}") });
            std::fs::write(cli.shared.out.join("manifest.json"), serde_json::to_string_pretty(&m)? + "\n")?;
            return Err(e);
        }
    };
    ctx.write_json("manifest.json", &manifest(argv, command, &ctx, "running")?)?;
    let result = dispatch(&cli.command, &ctx);
    let status = match &result {
        Ok(()) => "ok".to_string(),
        Err(e) => format!("failed: {e:#}"),
    };
    ctx.write_json("manifest.json", &manifest(argv, command, &ctx, &status)?)?;
    result
}

fn dispatch(command: &Command, ctx: &Session) -> Result<()> {
    match command {
        Command::Inspect => {
            let model = ctx.model()?;
            let report = model.cost_report()?;
            print!("{}", report.to_text());
            ctx.write_json("inspect.json", &serde_json::to_value(&report)?)?;
        }
        Command::Pathways => {
            let model = ctx.model()?;
            let report = pathway_ratio_report(&model.config.lgn, &model.outer.partition())?;
            println!(
                "M {} ({:.1}%)  P {} ({:.1}%)  K {} ({:.1}%)  max deviation from 5/90/5: {:.3}{}",
                report.m_channels,
                100.0 * report.m_share,
                report.p_channels,
                100.0 * report.p_share,
                report.k_channels,
                100.0 * report.k_share,
                report.max_deviation,
                if report.deviates_from_biology { " (deviates)" } else { "" }
            );
            ctx.write_json("pathways.json", &serde_json::to_value(&report)?)?;
        }
        Command::Gradcheck => {
            let seed = ctx.shared.seed.unwrap_or(0);
            let results = full_suite(seed)?;
            for r in &results {
                println!(
                    "{:<28} {:>4} coords  max rel err {:.3e}  tol {:.0e}  {}",
                    r.name,
                    r.checked,
                    r.max_rel_error,
                    r.tolerance,
                    if r.passed { "pass" } else { "FAIL" }
                );
            }
            ctx.write_json("gradcheck.json", &serde_json::to_value(&results)?)?;
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                bail!("{failed} gradient checks failed");
            }
        }
        Command::Train(args) => train(ctx, args)?,
        Command::Eval(args) => {
            let model = ctx.model()?;
            let ds = Dataset::open(&ctx.source(args, Split::Val)?, model.config.input_resolution)?;
            let m = evaluate(&model, &ds, ctx.run.train.eval_batch_size, ctx.run.train.val_limit)?;
            println!("top1 {:.2}%  top5 {:.2}%  loss {:.4}  ({} images)", m.top1, m.top5, m.loss, m.count);
            ctx.write_json("eval.json", &serde_json::to_value(&m)?)?;
        }
        Command::AblateBrightness(args) | Command::AblateColor(args) => {
            let kind = if matches!(command, Command::AblateBrightness(_)) { SweepKind::Brightness } else { SweepKind::Hue };
            let mut sweep =
                if kind == SweepKind::Brightness { StimulusSweep::brightness_default() } else { StimulusSweep::hue_default() };
            if !args.values.is_empty() {
                sweep.values = args.values.clone();
            }
            let taps = taps_or_all(&args.taps)?;
            let model = ctx.model()?;
            let image = ctx.stimulus(&args.image)?;
            let report = run_sweep(&model, &image, &sweep, &taps, Some(ctx.out()))?;
            for (tap, rows) in &report.taps {
                let cells: Vec<String> = rows.iter().map(|r| format!("{}={:.4}", r.variant, r.change)).collect();
                println!("{tap:<22} {}", cells.join("  "));
            }
            let cells: Vec<String> = report.baseline.iter().map(|r| format!("{}={:.4}", r.variant, r.change)).collect();
            println!("{:<22} {}", "baseline.conv2", cells.join("  "));
            if let Some(p) = &report.pathways {
                println!(
                    "pathway ordering (least to most change): {}  expected {}  {}",
                    p.ordering.join(" < "),
                    p.expected_ordering.join(" < "),
                    if p.matches_expected { "matches" } else { "differs" }
                );
            }
            println!("report: {}", ctx.out().join(kind.name()).join("report.json").display());
        }
        Command::ExportFeatures(args) => {
            let taps = taps_or_all(&args.taps)?;
            let model = ctx.model()?;
            let image = ctx.stimulus(&args.image)?;
            let captured = cvsnet::ablation::capture_taps(&model, &image, &taps)?;
            let dir = ctx.out().join("features");
            for (tap, t) in &captured {
                let stem = tap.replace('.', "_");
                export_feature_map(t, &dir.join(format!("{stem}.ppm")))?;
                export_channel_grid(t, &dir.join(format!("{stem}_channels.ppm")), 8)?;
                println!("{tap:<22} {}", t.shape());
            }
        }
    }
    Ok(())
}

fn train(ctx: &Session, args: &TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = ctx.run.train.clone();
    if let Some(e) = args.epochs {
        cfg.epochs = e;
        cfg.warmup_epochs = cfg.warmup_epochs.min(e.saturating_sub(1));
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if args.train_limit.is_some() {
        cfg.train_limit = args.train_limit;
    }
    if args.val_limit.is_some() {
        cfg.val_limit = args.val_limit;
    }
    if args.no_augment {
        cfg.augment = AugmentConfig::off();
    }
    let mut model = ctx.model()?;
    let res = model.config.input_resolution;
    let train_src = ctx.source(&args.data, Split::Train)?;
    let train_set = Dataset::open(&train_src, res)?;
    let val_set = Dataset::open(&ctx.source(&args.data, Split::Val)?, res)?;
    ctx.write_json("train_config.json", &serde_json::to_value(&cfg)?)?;
    eprintln!("training on {} images, validating on {}", cfg.train_limit.map_or(train_set.len(), |l| l.min(train_set.len())), val_set.len());
    let outputs = TrainOutputs { dir: Some(ctx.out().to_path_buf()) };
    let mut report = |p: &Progress| match p {
        Progress::Step { epoch, step, steps, loss } if step % 20 == 0 || step + 1 == *steps => {
            eprintln!("epoch {epoch} step {}/{steps} loss {loss:.4}", step + 1)
        }
        Progress::Epoch(m) => eprintln!(
            "epoch {} lr {:.2e} train loss {:.4} top1 {:.2}%  val top1 {:.2}% top5 {:.2}%",
            m.epoch,
            m.lr,
            m.train_loss,
            m.train_top1,
            m.val_top1.unwrap_or(f64::NAN),
            m.val_top5.unwrap_or(f64::NAN)
        ),
        _ => {}
    };
    let outcome = train_with_progress(&mut model, &train_set, Some(&val_set), &cfg, &outputs, &mut report)?;
    if let Some(last) = outcome.log.last() {
        println!(
            "finished {} epochs: val top1 {:.2}% top5 {:.2}% (best epoch {:?})",
            outcome.log.len(),
            last.val_top1.unwrap_or(f64::NAN),
            last.val_top5.unwrap_or(f64::NAN),
            outcome.best_epoch
        );
    }
    checkpoint::save(&model, ctx.out().join("final.ckpt"))?;
    Ok(())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
