use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::Device;
use clap::{Parser, Subcommand, ValueEnum};

use flowtrace::attacks::{robustness_csv, robustness_curve, AttackKind, AttackSpec};
use flowtrace::error::{Error, Result};
use flowtrace::forgegen::{read_dataset, write_dataset, Dataset, Split, MANIFEST};
use flowtrace::harness::ablation::{run_ablation, AblationAxis};
use flowtrace::harness::checkpoint::load_checkpoint;
use flowtrace::harness::eval::{evaluate, write_evaluation, EvalOptions};
use flowtrace::harness::report::render_file;
use flowtrace::harness::train::{split_train_val, train_with_resume, BEST_CHECKPOINT};
use flowtrace::harness::ExperimentConfig;

#[derive(Parser)]
#[command(name = "flowtrace", version, about = "Forgery localization with noised-latent forensic features")]
struct Cli {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, short, global = true, env = "FLOWTRACE_CONFIG")]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Shorthand for `--set output_dir=DIR`.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Forgegen {
        /// Target directory (default `<output_dir>/data`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train, writing best/last checkpoints and a per-epoch log.
    Train {
        /// Dataset directory; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint written with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Write probability and binarized mask PNGs.
        #[arg(long)]
        dump_masks: bool,
    },
    /// Robustness curves under post-processing attacks.
    Attack {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Attack kinds (jpeg, gauss_noise, gauss_blur, resize); all when omitted.
        #[arg(long = "kind")]
        kinds: Vec<String>,
    },
    /// Run ablation grids.
    Ablate {
        /// components, noise, shift or all.
        #[arg(long, default_value = "all")]
        axis: String,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Render CSV/JSON result files as Markdown.
    Report {
        files: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Ctx {
    cfg: ExperimentConfig,
    /// Whether the user supplied any configuration at all.
    explicit: bool,
}

impl Ctx {
    fn out_dir(&self) -> PathBuf {
        self.cfg.resolved_output_dir()
    }

    fn dataset(&self, data: Option<&Path>) -> Result<Dataset> {
        let dir = data.map(Path::to_path_buf).unwrap_or_else(|| self.out_dir().join("data"));
        if !dir.join(MANIFEST).exists() {
            if data.is_some() {
                return Err(Error::Format { id: MANIFEST.into(), msg: format!("no dataset at {}", dir.display()) });
            }
            eprintln!("generating dataset in {}", dir.display());
            write_dataset(&self.cfg.data, &dir)?;
        }
        read_dataset(&dir)
    }

    fn checkpoint(&self, path: Option<&Path>) -> PathBuf {
        path.map(Path::to_path_buf).unwrap_or_else(|| self.out_dir().join(BEST_CHECKPOINT))
    }

    fn expected(&self) -> Option<&ExperimentConfig> {
        self.explicit.then_some(&self.cfg)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn run(cli: Cli) -> Result<()> {
    let base = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(d) = &cli.output_dir {
        overrides.push(format!("output_dir=\"{}\"", d.display()));
    }
    let ctx = Ctx { cfg: base.with_overrides(&overrides)?, explicit: cli.config.is_some() || !overrides.is_empty() };
    let device = Device::Cpu;

    match cli.cmd {
        Command::Forgegen { out } => {
            let dir = out.unwrap_or_else(|| ctx.out_dir().join("data"));
            let samples = write_dataset(&ctx.cfg.data, &dir)?;
            println!("wrote {} samples to {}", samples.len(), dir.display());
        }
        Command::Train { data, resume } => {
            let dataset = ctx.dataset(data.as_deref())?;
            let outcome = train_with_resume(&ctx.cfg, &dataset, resume.as_deref())?;
            for row in &outcome.log {
                let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
                println!(
                    "epoch {:>3}  loss {:.4}  val_f1 {}  val_iou {}",
                    row.epoch,
                    row.train_loss,
                    f(row.val_f1),
                    f(row.val_iou)
                );
            }
            println!("best checkpoint: {}", outcome.best_checkpoint.display());
        }
        Command::Eval { checkpoint, data, split, dump_masks } => {
            let restored = load_checkpoint(&ctx.checkpoint(checkpoint.as_deref()), ctx.expected(), &device)?;
            let cfg = &restored.model.cfg;
            let dataset = ctx.dataset(data.as_deref())?;
            let (name, samples) = match split {
                SplitArg::Test => ("test", dataset.split(Split::Test)),
                SplitArg::Train | SplitArg::Val => {
                    let (tr, va) = split_train_val(&dataset.split(Split::Train), cfg.train.val_fraction, cfg.seed);
                    if matches!(split, SplitArg::Train) {
                        ("train", tr)
                    } else {
                        ("val", va)
                    }
                }
            };
            let dir = ctx.out_dir().join("eval").join(name);
            let opts = EvalOptions {
                threshold: cfg.train.threshold,
                batch_size: cfg.train.batch_size,
                attack: None,
                dump_dir: dump_masks.then(|| dir.join("masks")),
            };
            let eval = evaluate(&restored.model, &samples, &opts)?;
            write_evaluation(&dir, &eval)?;
            print!("{}", eval.report.to_csv());
        }
        Command::Attack { checkpoint, data, kinds } => {
            let restored = load_checkpoint(&ctx.checkpoint(checkpoint.as_deref()), ctx.expected(), &device)?;
            let model = &restored.model;
            let dataset = ctx.dataset(data.as_deref())?;
            let test = dataset.split(Split::Test);
            let kinds: Vec<AttackKind> = if kinds.is_empty() {
                AttackKind::ALL.to_vec()
            } else {
                kinds.iter().map(|k| k.parse()).collect::<Result<_>>()?
            };
            let mut all = Vec::new();
            for kind in kinds {
                let spec = AttackSpec::default_for(kind);
                let rows = robustness_curve(&spec, |attack| {
                    let opts = EvalOptions {
                        threshold: model.cfg.train.threshold,
                        batch_size: model.cfg.train.batch_size,
                        attack,
                        dump_dir: None,
                    };
                    let r = evaluate(model, &test, &opts)?.report;
                    Ok((r.weighted_f1, r.weighted_iou))
                })?;
                write(&ctx.out_dir().join("attack").join(format!("{kind}.csv")), &robustness_csv(&rows))?;
                all.extend(rows);
            }
            let csv = robustness_csv(&all);
            write(&ctx.out_dir().join("attack").join("robustness.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Ablate { axis, data } => {
            let axes = if axis == "all" { AblationAxis::ALL.to_vec() } else { vec![axis.parse()?] };
            let dataset = ctx.dataset(data.as_deref())?;
            for axis in axes {
                let table = run_ablation(axis, &ctx.cfg, &dataset)?;
                let dir = ctx.out_dir().join("ablate");
                write(&dir.join(format!("{axis}.csv")), &table.to_csv())?;
                write(&dir.join(format!("{axis}.json")), &serde_json::to_string_pretty(&table)?)?;
                println!("# {axis}\n{}ranking by F1: {}\n", table.to_csv(), table.ranking().join(" > "));
            }
        }
        Command::Report { files, out } => {
            if files.is_empty() {
                return Err(Error::Config("report needs at least one CSV or JSON file".into()));
            }
            let parts = files.iter().map(|f| render_file(f)).collect::<Result<Vec<_>>>()?;
            let md = parts.join("\n");
            match out {
                Some(p) => write(&p, &md)?,
                None => print!("{md}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({
                "error": e.kind(),
                "module": e.module(),
                "message": e.to_string(),
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
