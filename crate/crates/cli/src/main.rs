use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use occlift::pipeline::{cmd_eval, cmd_fit, cmd_gen, Optimizer, RunConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Toy occupancy and flow lifting: generate scenes, fit, evaluate.
#[derive(Parser)]
#[command(name = "occlift", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a scene's ground-truth grids and rendered maps.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Output directory (defaults to the config's `out`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the toy model and write the trace, parameters and predictions.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Update rule: `gd` (plain gradient descent) or `adam`.
        #[arg(long, value_parser = ["gd", "adam"])]
        optimizer: Option<String>,
        /// Train on predicted depth from the first step.
        #[arg(long)]
        no_denoise: bool,
        /// Drop inter-object points and the occlusion kernel.
        #[arg(long)]
        no_inter_object: bool,
        /// Decode flow from volume features alone.
        #[arg(long)]
        no_cost_volume: bool,
        /// Print the loss every this many steps (0 prints nothing).
        #[arg(long, default_value_t = 20)]
        log_every: usize,
    },
    /// Score a prediction directory against a ground-truth directory.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Also write BEV heatmaps here.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Run config (JSON). Its `scene` path is relative to the config file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

enum Failure {
    Usage(String),
    Run(occlift::Error),
}

impl From<occlift::Error> for Failure {
    fn from(e: occlift::Error) -> Self {
        Failure::Run(e)
    }
}

fn load(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, Failure> {
    flag.or_else(|| cfg.out.clone())
        .ok_or_else(|| Failure::Usage("no output directory: pass --out or set `out` in the config".into()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gen { common, out } => {
            let cfg = load(&common)?;
            let out = out_dir(out, &cfg)?;
            for p in cmd_gen(&cfg, &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Fit {
            common,
            out,
            steps,
            lr,
            optimizer,
            no_denoise,
            no_inter_object,
            no_cost_volume,
            log_every,
        } => {
            let mut cfg = load(&common)?;
            let out = out_dir(out, &cfg)?;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(lr) = lr {
                if !lr.is_finite() || lr < 0.0 {
                    return Err(Failure::Usage(format!("--lr must be a finite nonnegative number, got {lr}")));
                }
                cfg.lr = lr;
            }
            match optimizer.as_deref() {
                Some("gd") => cfg.optimizer = Optimizer::Gd,
                Some("adam") => cfg.optimizer = Optimizer::Adam,
                _ => {}
            }
            cfg.denoise &= !no_denoise;
            if no_inter_object {
                cfg.inter_object = false;
                cfg.occlusion_kernel = false;
            }
            cfg.cost_volume &= !no_cost_volume;
            let done = cmd_fit(&cfg, &out, |step, l| {
                if log_every > 0 && step % log_every == 0 {
                    println!("step {step:>5}  total {:>12.6}  sem {:>12.6}  flow {:>12.6}", l.total, l.sem, l.flow);
                }
            })?;
            let (first, last) = (done.report.initial().total, done.report.last.total);
            println!("loss {first:.6} -> {last:.6}");
            print!("{}", done.metrics.to_text());
            println!("outputs in {}", out.display());
        }
        Command::Eval {
            common,
            pred,
            gt,
            svg,
        } => {
            let cfg = load(&common)?;
            let report = cmd_eval(&cfg, &pred, &gt, svg.as_deref().map(Path::new))?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { EXIT_NUMERIC } else { EXIT_DATA })
        }
    }
}
