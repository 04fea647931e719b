//! Argument parsing and dispatch for the `lexshort` binary.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use lexshort_core::ShortcutKind;

use crate::commands::{self, evaluate::EvalInputs, probe::ProbeInputs};
use crate::config::RunConfig;
use crate::exit::{exit_code, Usage};

#[derive(Debug, Parser)]
#[command(
    name = "lexshort",
    version,
    about = "Transformer translation with lexical shortcut connections"
)]
struct Cli {
    /// Repeat for more detail (-v debug, -vv trace); -q keeps warnings only.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; unspecified keys keep their defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for data, initialization, batching and probes.
    #[arg(long)]
    seed: Option<u64>,
    /// Corpus directory (`paths.data_dir`).
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Dotted configuration overrides, e.g. `train.total_steps=500`.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic parallel corpus, tags, vocabulary and contrastive set.
    GenData {
        #[command(flatten)]
        common: Common,
        /// copy | reverse | lexicon
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        size: Option<usize>,
        /// Output directory (`paths.data_dir`).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train a model; writes checkpoints, metrics and the resolved config.
    Train {
        #[command(flatten)]
        common: Common,
        /// none | lexical | fusion | nonlexical | dec2enc | dec2enc+self
        #[arg(long)]
        variant: Option<String>,
        /// Run directory (`paths.run_dir`).
        #[arg(long, value_name = "DIR")]
        run: Option<PathBuf>,
        /// Continue from the run directory's latest checkpoint.
        #[arg(long)]
        resume: bool,
        /// Also write SVG charts of the metrics.
        #[arg(long)]
        plot: bool,
    },
    /// Translate a file of source sentences.
    Translate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Defaults to standard output.
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Score translations with BLEU and the contrastive sense test.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[arg(long, value_name = "FILE")]
        source: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        reference: Option<PathBuf>,
        /// Score these translations instead of decoding.
        #[arg(long, value_name = "FILE")]
        hypotheses: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        contrastive: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        /// Also write the JSON report here.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Dump hidden states and train per-layer probing classifiers.
    Probe(ProbeArgs),
    /// Everything `probe` does plus gate statistics.
    Analyze(ProbeArgs),
}

#[derive(Debug, Args)]
struct CheckpointArg {
    /// Checkpoint file, or a run directory whose newest checkpoints are averaged.
    /// Defaults to `paths.run_dir`.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    ckpt: CheckpointArg,
    /// Output directory; defaults to `analysis/` beside the checkpoint.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Reuse a saved state dump.
    #[arg(long, value_name = "DIR")]
    dump: Option<PathBuf>,
    #[arg(long)]
    plot: bool,
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::resolve(common.config.as_deref(), &common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(dir) = &common.data {
        cfg.paths.data_dir = dir.clone();
    }
    Ok(cfg)
}

fn checkpoint(arg: &CheckpointArg, cfg: &RunConfig) -> PathBuf {
    arg.checkpoint.clone().unwrap_or_else(|| cfg.paths.run_dir.clone())
}

fn set_beam(cfg: &mut RunConfig, beam: Option<usize>) -> Result<()> {
    match beam {
        Some(0) => Err(Usage("--beam must be at least 1".into()).into()),
        Some(b) => {
            cfg.decode.beam = b;
            Ok(())
        }
        None => Ok(()),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            common,
            task,
            size,
            out,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(t) = task {
                cfg.data.task = t.parse().map_err(|e: lexshort_core::Error| Usage(e.to_string()))?;
            }
            if let Some(n) = size {
                cfg.data.size = n;
            }
            if let Some(dir) = out {
                cfg.paths.data_dir = dir;
            }
            commands::gen_data::run(&cfg)?;
        }
        Command::Train {
            common,
            variant,
            run,
            resume,
            plot,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(v) = variant {
                let kind: ShortcutKind = v.parse().map_err(|e: lexshort_core::Error| Usage(e.to_string()))?;
                cfg.model.variant.kind = kind;
            }
            if let Some(dir) = run {
                cfg.paths.run_dir = dir;
            }
            let summary = commands::train::run(&cfg, resume, plot)?;
            print_json(&summary)?;
        }
        Command::Translate {
            common,
            ckpt,
            input,
            output,
            beam,
        } => {
            let mut cfg = resolve(&common)?;
            set_beam(&mut cfg, beam)?;
            let path = checkpoint(&ckpt, &cfg);
            commands::translate::run(&cfg, &path, &input, output.as_deref())?;
        }
        Command::Evaluate {
            common,
            ckpt,
            source,
            reference,
            hypotheses,
            contrastive,
            beam,
            out,
        } => {
            let mut cfg = resolve(&common)?;
            set_beam(&mut cfg, beam)?;
            let path = checkpoint(&ckpt, &cfg);
            let inputs = EvalInputs {
                source,
                reference,
                hypotheses,
                contrastive,
            };
            let report = commands::evaluate::run(&cfg, &path, &inputs)?;
            if let Some(file) = out {
                commands::write_json(&file, &report)?;
            }
            print_json(&report)?;
        }
        Command::Probe(args) => probe(args, false)?,
        Command::Analyze(args) => probe(args, true)?,
    }
    Ok(())
}

fn probe(args: ProbeArgs, gates: bool) -> Result<()> {
    let cfg = resolve(&args.common)?;
    let path = checkpoint(&args.ckpt, &cfg);
    let out = args.out.unwrap_or_else(|| {
        let run_dir = if path.is_dir() {
            path.as_path()
        } else {
            path.parent().unwrap_or(&path)
        };
        run_dir.join("analysis")
    });
    let inputs = ProbeInputs {
        dump: args.dump,
        gates,
        plot: args.plot,
    };
    let result = commands::probe::run(&cfg, &path, &out, &inputs)?;
    print_json(&result.report.accuracy)
}

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp_secs()
        .try_init();
}

/// The error chain joined by `: `, skipping causes already quoted by their parent.
pub fn describe(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !parts.last().is_some_and(|p| p.contains(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ")
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { crate::exit::USAGE } else { 0 };
        }
    };
    init_logging(cli.verbose, cli.quiet);
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            exit_code(&e)
        }
    }
}
