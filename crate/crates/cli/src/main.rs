use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use refix_core::analysis::ProjectionMethod;
use refix_core::commands::{
    cmd_analyze, cmd_curate, cmd_eval, cmd_fix, cmd_train, parse_labelled, with_suffix, AnalyzeOptions, FixOptions,
    RunConfig,
};
use refix_core::warp::{ExecutableFlowEstimator, FlowEstimator};
use refix_core::{Error, ErrorClass};

#[derive(Parser)]
#[command(name = "refix", version, about = "Reference-guided fixing of degraded synthesized views")]
struct Cli {
    /// Run configuration (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a training-sample archive from a scene manifest.
    Curate {
        #[arg(long)]
        manifest: PathBuf,
        /// Degrader spec, e.g. `blur_noise`, `blocky:8:0.2`, `spatial:4`.
        #[arg(long)]
        degrader: String,
        #[arg(long)]
        out: PathBuf,
        /// Executable run as `<exe> <ref.png> <target.png> <out.flo>` when
        /// flow files are missing.
        #[arg(long)]
        flow_estimator: Option<PathBuf>,
    },
    /// Train a fixer on a sample archive.
    Train {
        #[arg(long)]
        samples: PathBuf,
        /// Output checkpoint; the loss history goes to `<stem>.loss.csv`.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fix a degraded image or a directory of frames.
    Fix {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        degraded: PathBuf,
        /// A reference PNG, or a directory with one reference per frame.
        #[arg(long)]
        reference: PathBuf,
        /// Flow (.flo), disparity (.pfm) or camera (.txt) file, or a
        /// directory of per-frame files.
        #[arg(long)]
        transform: Option<PathBuf>,
        /// Reference depth (.pfm) for geometry mode.
        #[arg(long)]
        depth: Option<PathBuf>,
        /// Estimate flow when no transform is available.
        #[arg(long)]
        flow_fallback: bool,
        #[arg(long)]
        flow_estimator: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed degradations relative to ground truth and plot their clusters.
    Analyze {
        #[arg(long)]
        gt: PathBuf,
        /// `label=dir`, repeatable.
        #[arg(long = "variant", required = true)]
        variants: Vec<String>,
        /// `label=dir` of fixed outputs for the variant `label`, repeatable.
        #[arg(long = "fixed")]
        fixed: Vec<String>,
        /// Extractor checkpoint (built-in toy extractor by default).
        #[arg(long)]
        extractor: Option<PathBuf>,
        /// Images drawn per variant.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        method: Option<String>,
        /// Output prefix for `.csv`, `_summary.txt` and `.png`.
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR, SSIM and plugin metrics over matching PNGs.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// `name=program` or a program path, repeatable.
        #[arg(long = "plugin")]
        plugins: Vec<String>,
        /// Output prefix for `.csv` and `_summary.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn estimator(p: Option<PathBuf>) -> Option<ExecutableFlowEstimator> {
    p.map(|program| ExecutableFlowEstimator { program })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    match cli.command {
        Command::Curate {
            manifest,
            degrader,
            out,
            flow_estimator,
        } => {
            let est = estimator(flow_estimator);
            let r = cmd_curate(&manifest, &degrader, &out, &cfg, est.as_ref().map(|e| e as &dyn FlowEstimator))
                .context("curate failed")?;
            println!("curated {} samples from {} scenes ({} skipped)", r.samples, r.scenes, r.skipped.len());
        }
        Command::Train { samples, out, resume } => {
            let r = cmd_train(&cfg, &samples, &out, resume.as_deref()).context("train failed")?;
            match r.history.last() {
                Some(l) => println!("trained steps {}..{}; final loss {:.6}", r.start_step, r.end_step, l.loss),
                None => println!("no steps run; checkpoint at step {}", r.end_step),
            }
        }
        Command::Fix {
            checkpoint,
            degraded,
            reference,
            transform,
            depth,
            flow_fallback,
            flow_estimator,
            out,
        } => {
            let est = estimator(flow_estimator);
            let opts = FixOptions {
                checkpoint,
                degraded,
                reference,
                transform,
                depth,
                flow_fallback,
                estimator: est.as_ref().map(|e| e as &dyn FlowEstimator),
                out,
            };
            let written = cmd_fix(&opts, &cfg).context("fix failed")?;
            println!("wrote {} image(s)", written.len());
        }
        Command::Analyze {
            gt,
            variants,
            fixed,
            extractor,
            samples,
            method,
            out,
        } => {
            if let Some(n) = samples {
                cfg.analyze.samples = Some(n);
            }
            if let Some(m) = method {
                cfg.analyze.method = m.parse::<ProjectionMethod>()?;
            }
            cfg.validate()?;
            let opts = AnalyzeOptions {
                gt,
                variants: variants.iter().map(|v| parse_labelled(v)).collect::<Result<_, _>>()?,
                fixed: fixed.iter().map(|v| parse_labelled(v)).collect::<Result<_, _>>()?,
                extractor,
                out_prefix: out.clone(),
            };
            cmd_analyze(&opts, &cfg).context("analyze failed")?;
            let summary = with_suffix(&out, "_summary.txt");
            print!("{}", std::fs::read_to_string(&summary).with_context(|| format!("reading {}", summary.display()))?);
        }
        Command::Eval { pred, gt, plugins, out } => {
            let e = cmd_eval(&pred, &gt, &plugins, out.as_deref()).context("eval failed")?;
            print!("{}", e.summary_text());
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>().map(Error::class) {
        Some(ErrorClass::Usage) => 1,
        Some(ErrorClass::Numerical) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
