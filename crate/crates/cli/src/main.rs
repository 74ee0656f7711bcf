use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use roofseg::pipeline::{self, Baseline, MethodReport, RunConfig, TrainEvent};
use roofseg::roofgen::Split;
use roofseg::{Error, Result};

#[derive(Parser)]
#[command(name = "roofseg", version, about = "Roof plane instance segmentation for point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set epochs=2`. Applied after the file and
    /// `ROOFSEG_*` environment variables.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_env(std::env::vars())?;
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Ransac,
    RegionGrow,
}

impl From<BaselineArg> for Baseline {
    fn from(b: BaselineArg) -> Self {
        match b {
            BaselineArg::Ransac => Baseline::Ransac,
            BaselineArg::RegionGrow => Baseline::RegionGrow,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic roof dataset and its manifest to `data_dir`.
    GenData(ConfigArgs),
    /// Train a model; writes checkpoints and loss.csv to `out_dir`.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; defaults to the one the checkpoint was trained on.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Override the checkpoint's refinement switch at inference.
        #[arg(long, value_enum)]
        eamm: Option<Switch>,
        /// Also score classical baselines.
        #[arg(long = "baseline", value_enum)]
        baselines: Vec<BaselineArg>,
        /// Report directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Label one point file (`x y z [...]` rows) with a trained model.
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum)]
        eamm: Option<Switch>,
    },
    /// Score RANSAC and region growing on a dataset split.
    Baseline {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long = "method", value_enum)]
        methods: Vec<BaselineArg>,
    },
}

fn switch(s: Option<Switch>) -> Option<bool> {
    s.map(|s| matches!(s, Switch::On))
}

fn print_reports(reports: &[MethodReport], out: &Path) {
    println!("{:<18} {:>8} {:>8} {:>8} {:>8}", "method", "mCov", "mWCov", "mPrec", "mRec");
    for r in reports {
        println!(
            "{:<18} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            r.method, r.report.m_cov, r.report.m_wcov, r.report.m_prec, r.report.m_rec
        );
    }
    println!("reports written to {}", out.display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => {
            let cfg = args.load()?;
            let n = pipeline::cmd_gen_data(&cfg)?;
            println!("wrote {n} roofs to {}", cfg.data_dir.display());
        }
        Command::Train { config, resume, quiet } => {
            let cfg = config.load()?;
            let summary = pipeline::train(&cfg, resume.as_deref(), |ev| match ev {
                TrainEvent::Step { epoch, step, loss, lr, seconds } if !quiet => {
                    eprintln!(
                        "epoch {epoch} step {step} total {:.4} mask {:.4} plane {:.4} cls {:.4} edge {:.4} lr {lr:.2e} ({seconds:.1}s)",
                        loss.total, loss.mask, loss.plane, loss.cls, loss.edge
                    );
                }
                TrainEvent::Epoch { epoch, mean_total, checkpoint } => {
                    eprintln!("epoch {epoch} mean loss {mean_total:.4} -> {}", checkpoint.display());
                }
                _ => {}
            })?;
            println!(
                "trained {} epochs ({} steps); checkpoint {}; losses {}",
                summary.epochs,
                summary.steps,
                summary.final_checkpoint.display(),
                summary.loss_csv.display()
            );
        }
        Command::Eval {
            checkpoint,
            data_dir,
            split,
            eamm,
            baselines,
            out,
        } => {
            let data_dir = match data_dir {
                Some(d) => d,
                None => pipeline::Checkpoint::load(&checkpoint)?.config()?.data_dir,
            };
            let out = out.unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
            let baselines: Vec<Baseline> = baselines.into_iter().map(Into::into).collect();
            let reports = pipeline::cmd_eval(&checkpoint, &data_dir, split.into(), switch(eamm), &baselines, &out)?;
            print_reports(&reports, &out);
        }
        Command::Segment {
            checkpoint,
            input,
            output,
            eamm,
        } => {
            let r = pipeline::cmd_segment(&checkpoint, &input, &output, switch(eamm))?;
            println!("{} points, {} segments -> {}", r.points, r.segments, output.display());
        }
        Command::Baseline { config, split, methods } => {
            let cfg = config.load()?;
            let methods: Vec<Baseline> = if methods.is_empty() {
                vec![Baseline::Ransac, Baseline::RegionGrow]
            } else {
                methods.into_iter().map(Into::into).collect()
            };
            let reports =
                pipeline::cmd_baseline(&cfg.data_dir, split.into(), &methods, cfg.seed, cfg.iou_threshold, &cfg.out_dir)?;
            print_reports(&reports, &cfg.out_dir);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
