//! `dfnet`: synthetic data, training, inference, evaluation and comparison runs.
//!
//! Exit codes: 0 success, 1 I/O or format failure, 2 bad configuration or
//! usage, 3 numeric divergence.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dfnet::config::{RunConfig, META_PREFIX};
use dfnet::imageio::{list_images, load_eval_pairs, load_samples, read_rgb, write_samples, write_saliency};
use dfnet::metrics::{evaluate, pr_curve};
use dfnet::model::DfnetModel;
use dfnet::train::{
    ablation_csv, generate_synthetic, load_model_parameters, median_by_arm, run_ablation, run_lambda_sweep,
    sweep_csv, Dataset, History, Trainer,
};
use dfnet::{checkpoint, Error, Result};

const MANIFEST: &str = "manifest.txt";
const CHECKPOINT: &str = "model.dfnc";

#[derive(Parser, Debug)]
#[command(author, version, about = "Saliency detection with multi-scale attention and a sharpening loss")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Shared {
    /// Flat key=value config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides `seed` (`data_seed` for gen-data, the seed list for ablate).
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Extra key=value setting applied after the config file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes the synthetic train/ and test/ splits as PNG images and masks.
    GenData(Shared),
    /// Trains one model; writes model.dfnc and history.csv.
    Train(Shared),
    /// Writes one 8-bit saliency PNG per input image.
    Infer {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        images: PathBuf,
    },
    /// Scores predictions against ground-truth masks.
    Eval {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, value_name = "DIR")]
        pred: PathBuf,
        #[arg(long, value_name = "DIR")]
        gt: PathBuf,
    },
    /// Trains every configured arm for every seed; writes ablation.csv.
    Ablate(Shared),
    /// Trains one model per λ; writes sweep.csv.
    LambdaSweep(Shared),
    /// Writes the precision/recall/F curve of a prediction directory.
    Curves {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, value_name = "DIR")]
        pred: PathBuf,
        #[arg(long, value_name = "DIR")]
        gt: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Infer { .. } => "infer",
            Command::Eval { .. } => "eval",
            Command::Ablate(_) => "ablate",
            Command::LambdaSweep(_) => "lambda-sweep",
            Command::Curves { .. } => "curves",
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => 2,
        Error::Numeric(_) => 3,
        Error::Format(_) | Error::Io { .. } => 1,
    }
}

fn resolve_config(shared: &Shared, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&shared.config, fallback) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) => RunConfig::load(p)?,
        (None, None) => RunConfig::default(),
    };
    for kv in &shared.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = shared.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(shared: &Shared) -> Result<&Path> {
    let out = shared
        .out
        .as_deref()
        .ok_or_else(|| Error::Usage("--out DIR is required".into()))?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    Ok(out)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Resolved config plus `meta.` lines; loadable again with `--config`.
fn write_manifest(out: &Path, command: &str, cfg: &RunConfig, extra: &[(String, String)]) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "{META_PREFIX}command={command}");
    let _ = writeln!(s, "{META_PREFIX}dfnet_version={}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "{META_PREFIX}checkpoint_format_version={}", checkpoint::VERSION);
    for (k, v) in extra {
        let _ = writeln!(s, "{META_PREFIX}{k}={v}");
    }
    s.push_str(&cfg.to_text());
    write_file(&out.join(MANIFEST), &s)
}

/// The configured dataset directory (with `train/` and `test/`) or the
/// synthetic splits.
fn load_dataset(cfg: &RunConfig, need_test: bool) -> Result<Dataset> {
    match &cfg.data_dir {
        Some(dir) => Ok(Dataset {
            train: load_samples(&dir.join("train"), cfg.input_size)?,
            test: if need_test {
                load_samples(&dir.join("test"), cfg.input_size)?
            } else {
                Vec::new()
            },
        }),
        None => {
            let mut spec = cfg.synthetic_spec()?;
            if !need_test {
                spec.n_test = 0;
            }
            generate_synthetic(&spec)
        }
    }
}

fn cmd_gen_data(shared: &Shared) -> Result<()> {
    let mut cfg = resolve_config(shared, None)?;
    if let Some(seed) = shared.seed {
        cfg.data_seed = seed;
    }
    let out = out_dir(shared)?;
    write_manifest(out, "gen-data", &cfg, &[])?;
    let data = generate_synthetic(&cfg.synthetic_spec()?)?;
    write_samples(&out.join("train"), &data.train)?;
    write_samples(&out.join("test"), &data.test)?;
    eprintln!("wrote {} train and {} test samples to {}", data.train.len(), data.test.len(), out.display());
    Ok(())
}

fn cmd_train(shared: &Shared) -> Result<()> {
    let cfg = resolve_config(shared, None)?;
    let model_cfg = cfg.model_config()?;
    let train_cfg = cfg.train_config()?;
    let out = out_dir(shared)?;
    write_manifest(out, "train", &cfg, &[])?;
    let data = load_dataset(&cfg, false)?;
    let mut model = DfnetModel::new(model_cfg)?;
    eprintln!("{} parameters, {} training images", model.parameter_count(), data.train.len());
    let mut trainer = Trainer::new(&mut model, train_cfg)?;
    let mut history = History::default();
    while trainer.epoch < trainer.config.epochs {
        let r = trainer.run_epoch(&data.train)?;
        eprintln!(
            "epoch {:>3}  loss {:.6}  lr {:.1e}  {:.1}s",
            r.epoch, r.train_loss, r.learning_rate, r.seconds
        );
        history.records.push(r);
    }
    trainer.save_checkpoint(&out.join(CHECKPOINT))?;
    write_file(&out.join("history.csv"), &history.to_csv())
}

fn cmd_infer(shared: &Shared, checkpoint_path: &Path, images: &Path) -> Result<()> {
    let beside = checkpoint_path.parent().unwrap_or(Path::new(".")).join(MANIFEST);
    if shared.config.is_none() && !beside.is_file() {
        return Err(Error::Config(format!(
            "no --config given and no manifest at {}",
            beside.display()
        )));
    }
    let cfg = resolve_config(shared, Some(&beside))?;
    let mut model = DfnetModel::new(cfg.model_config()?)?;
    load_model_parameters(&mut model, checkpoint_path)?;
    let inputs = list_images(images)?;
    if inputs.is_empty() {
        return Err(Error::Usage(format!("no images in {}", images.display())));
    }
    let out = out_dir(shared)?;
    write_manifest(
        out,
        "infer",
        &cfg,
        &[
            ("checkpoint".into(), checkpoint_path.display().to_string()),
            ("images".into(), images.display().to_string()),
        ],
    )?;
    let mut written = 0;
    for (stem, path) in &inputs {
        let image = match read_rgb(path, Some(cfg.input_size)) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", path.display());
                continue;
            }
        };
        let map = model.predict(&image)?;
        write_saliency(&out.join(format!("{stem}.png")), &map)?;
        written += 1;
    }
    eprintln!("wrote {written} of {} saliency maps to {}", inputs.len(), out.display());
    if written == 0 {
        return Err(Error::Format(format!("no readable images in {}", images.display())));
    }
    Ok(())
}

fn cmd_eval(shared: &Shared, pred: &Path, gt: &Path) -> Result<()> {
    let cfg = resolve_config(shared, None)?;
    let (_, pairs) = load_eval_pairs(pred, gt)?;
    let report = evaluate(&pairs)?;
    let text = report.to_text();
    print!("{text}");
    if shared.out.is_some() {
        let out = out_dir(shared)?;
        write_manifest(out, "eval", &cfg, &eval_args(pred, gt))?;
        write_file(&out.join("report.txt"), &text)?;
        write_file(&out.join("curves.csv"), &report.curve.to_csv())?;
    }
    Ok(())
}

fn cmd_curves(shared: &Shared, pred: &Path, gt: &Path) -> Result<()> {
    let cfg = resolve_config(shared, None)?;
    let out = out_dir(shared)?;
    write_manifest(out, "curves", &cfg, &eval_args(pred, gt))?;
    let (_, pairs) = load_eval_pairs(pred, gt)?;
    write_file(&out.join("curves.csv"), &pr_curve(&pairs)?.to_csv())
}

fn eval_args(pred: &Path, gt: &Path) -> [(String, String); 2] {
    [
        ("pred".into(), pred.display().to_string()),
        ("gt".into(), gt.display().to_string()),
    ]
}

fn cmd_ablate(shared: &Shared) -> Result<()> {
    let mut cfg = resolve_config(shared, None)?;
    if let Some(seed) = shared.seed {
        cfg.seeds = vec![seed];
    }
    let arms = cfg.arms()?;
    let model_cfg = cfg.model_config()?;
    let train_cfg = cfg.train_config()?;
    let out = out_dir(shared)?;
    let defs: Vec<(String, String)> = arms
        .iter()
        .map(|a| {
            (
                format!("arm.{}", a.name),
                format!("variant:{} loss:{}", a.variant.name(), a.loss.name()),
            )
        })
        .collect();
    write_manifest(out, "ablate", &cfg, &defs)?;
    let data = load_dataset(&cfg, true)?;
    let rows = run_ablation(&model_cfg, &train_cfg, &arms, &cfg.seeds, &data, |r| {
        eprintln!(
            "{:<22} seed {:<3} avgF {:.4}  wF {:.4}  maxF {:.4}  MAE {:.4}  sharpness {:.4}",
            r.variant, r.seed, r.avg_f, r.weighted_f, r.max_f, r.mae, r.sharpness
        )
    })?;
    for arm in &arms {
        if let Some(m) = median_by_arm(&rows, &arm.name, |r| r.avg_f) {
            eprintln!("median avgF {:<22} {m:.4}", arm.name);
        }
    }
    write_file(&out.join("ablation.csv"), &ablation_csv(&rows))
}

fn cmd_lambda_sweep(shared: &Shared) -> Result<()> {
    let cfg = resolve_config(shared, None)?;
    let model_cfg = cfg.model_config()?;
    let train_cfg = cfg.train_config()?;
    let out = out_dir(shared)?;
    write_manifest(out, "lambda-sweep", &cfg, &[])?;
    let data = load_dataset(&cfg, true)?;
    let rows = run_lambda_sweep(&model_cfg, &train_cfg, &cfg.lambdas, &data, |r| {
        eprintln!(
            "λ {:<5} avgF {:.4}  wF {:.4}  maxF {:.4}  MAE {:.4}",
            r.lambda, r.avg_f, r.weighted_f, r.max_f, r.mae
        )
    })?;
    write_file(&out.join("sweep.csv"), &sweep_csv(&rows))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(s) => cmd_gen_data(s),
        Command::Train(s) => cmd_train(s),
        Command::Infer {
            shared,
            checkpoint,
            images,
        } => cmd_infer(shared, checkpoint, images),
        Command::Eval { shared, pred, gt } => cmd_eval(shared, pred, gt),
        Command::Ablate(s) => cmd_ablate(s),
        Command::LambdaSweep(s) => cmd_lambda_sweep(s),
        Command::Curves { shared, pred, gt } => cmd_curves(shared, pred, gt),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dfnet {}: {e}", cli.command.name());
            ExitCode::from(exit_code(&e))
        }
    }
}
