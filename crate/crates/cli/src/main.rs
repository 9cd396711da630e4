use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mitnet::harness::{
    cmd_eval, cmd_gen_data, cmd_reconstruct, cmd_train, report_table, run_experiment, ExperimentConfig, FrameSource,
    MethodSpec, Trainable,
};

/// Magnetic induction tomography reconstruction workbench.
#[derive(Debug, Parser)]
#[command(name = "mitnet", version, about)]
struct Cli {
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Experiment configuration (TOML) overlaid on the defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Master seed for data generation, initialization and shuffling.
    #[arg(long)]
    seed: Option<u64>,

    /// Start from the full-size protocol instead of the desk-scale defaults.
    #[arg(long)]
    paper_scale: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let base = if self.paper_scale {
            ExperimentConfig::paper_scale()
        } else {
            ExperimentConfig::desk()
        };
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p, base).with_context(|| format!("loading config {}", p.display()))?,
            None => base,
        };
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic measurement dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory for samples.mitd and manifest.toml.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one network (ccnn, fcn, sae or gan) and write its checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// ccnn, fcn, sae or gan.
        #[arg(long)]
        method: String,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path; the loss CSV is written beside it.
        #[arg(long)]
        out: PathBuf,
        /// GAN condition source as METHOD=CHECKPOINT (or nr); repeatable.
        #[arg(long = "condition")]
        conditions: Vec<String>,
    },
    /// Reconstruct one frame and write PGM images.
    Reconstruct {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// METHOD=CHECKPOINT, or nr.
        #[arg(long)]
        method: String,
        /// Frame CSV (16 rows of 32 values) or a dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Sample id when --data is a dataset; defaults to the first test sample.
        #[arg(long)]
        sample: Option<usize>,
        /// GAN checkpoint used to enhance the rendering.
        #[arg(long)]
        enhance: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score methods on the test split and write report CSVs.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// METHOD=CHECKPOINT, or nr; repeatable.
        #[arg(long = "method", required = true)]
        methods: Vec<String>,
        /// GAN checkpoint; adds enhanced rows to the report.
        #[arg(long)]
        enhance: Option<PathBuf>,
        /// Output directory for the reports.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate, train every method and the GAN, then evaluate.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn specs(items: &[String]) -> Result<Vec<MethodSpec>> {
    items.iter().map(|s| Ok(s.parse::<MethodSpec>()?)).collect()
}

fn require_dir(p: &Path) -> Result<()> {
    if !p.is_dir() {
        bail!("data directory {} does not exist", p.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match cli.command {
        Command::GenData { cfg, out } => {
            let m = cmd_gen_data(&cfg.resolve()?, &out)?;
            println!("{} samples, sha256 {}", m.total_samples, m.sha256);
            for o in &m.objects {
                println!("{}: {} positions, {} samples", o.name, o.positions, o.samples);
            }
        }
        Command::Train {
            cfg,
            method,
            data,
            out,
            conditions,
        } => {
            require_dir(&data)?;
            let target: Trainable = method.parse()?;
            cmd_train(target, &data, &out, &cfg.resolve()?, &specs(&conditions)?)?;
            println!("checkpoint written to {}", out.display());
        }
        Command::Reconstruct {
            cfg,
            method,
            data,
            sample,
            enhance,
            out,
        } => {
            let spec: MethodSpec = method.parse()?;
            let source = if data.is_dir() {
                FrameSource::Sample { data, id: sample }
            } else if sample.is_some() {
                bail!("--sample needs --data to be a dataset directory");
            } else {
                FrameSource::Csv(data)
            };
            let r = cmd_reconstruct(&spec, &source, enhance.as_deref(), &out, &cfg.resolve()?)?;
            for f in &r.files {
                println!("{}", f.display());
            }
            for (label, s) in [("raw", r.raw), ("enhanced", r.enhanced)] {
                if let Some(s) = s {
                    let cd =
                        s.cd.map(|c| format!("{c:.2} px"))
                            .unwrap_or_else(|| "undefined (empty mask)".into());
                    println!("{label}: IoU {:.2} %, CD {cd}", s.iou);
                }
            }
        }
        Command::Eval {
            cfg,
            data,
            methods,
            enhance,
            out,
        } => {
            require_dir(&data)?;
            let e = cmd_eval(&data, &specs(&methods)?, enhance.as_deref(), &out, &cfg.resolve()?)?;
            print!("{}", report_table(&e.rows));
        }
        Command::Run { cfg, out } => {
            let o = run_experiment(&cfg.resolve()?, &out)?;
            print!("{}", report_table(&o.evaluation.rows));
        }
    }
    Ok(())
}
