//! Command-line front end: every pipeline stage as a subcommand over the
//! on-disk session formats.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_PROCESSING: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "tonguetrack", version, about = "Ultrasound-assisted diarization and word alignment")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Layered key=value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Configuration override, applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Seed of every randomized step.
    #[arg(long, default_value_t = 0, global = true)]
    pub seed: u64,
    /// Worker threads; all cores when omitted.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic corpus with a manifest.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the tongue-activity trace of every session.
    Eta {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Scale each trace to [0, 1].
        #[arg(long)]
        normalized: bool,
    },
    /// Label speech as child, therapist or silence.
    Diarize {
        #[arg(value_enum)]
        method: DiarizeMethod,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Trained model (hmm only).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train the HMM diarizer from reference labelings.
    TrainDiarizer {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sessions decoded and added to training without their references.
        #[arg(long)]
        unlabeled: Option<PathBuf>,
    },
    /// Train the ultrasound embedding network on articulation labels.
    TrainEmbedder {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract per-frame ultrasound embeddings.
    Embed {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Force-align prompts to child speech.
    Align {
        #[command(flatten)]
        common: AlignArgs,
        /// Embedding directory; adds ultrasound context features.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Use this model instead of training one.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Interpolate two aligners' posteriors and sweep the weight.
    Combine {
        #[command(flatten)]
        common: AlignArgs,
        /// Output directory of system A (weight alpha).
        #[arg(long)]
        a: PathBuf,
        /// Output directory of system B (weight 1 - alpha).
        #[arg(long)]
        b: PathBuf,
    },
    /// Recognize each reference word segment among the whole vocabulary.
    DecodeOracle {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Score one kind of hypothesis against the references.
    Eval {
        #[arg(value_enum)]
        kind: EvalKind,
        /// Corpus directory or manifest.
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// One table combining diarization, alignment and decoding scores.
    Report {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        diar: Option<PathBuf>,
        #[arg(long)]
        align: Option<PathBuf>,
        #[arg(long)]
        wer: Option<PathBuf>,
        #[command(flatten)]
        report: ReportArgs,
    },
}

#[derive(Args, Debug, Clone)]
pub struct AlignArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Diarization directory whose therapist segments are masked; the
    /// reference labeling when omitted.
    #[arg(long)]
    pub diarization: Option<PathBuf>,
    /// Lexicon; `lexicon.txt` beside the manifest when omitted.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ReportArgs {
    /// Add one aggregate row per group.
    #[arg(long, value_enum)]
    pub group_by: Option<GroupBy>,
    /// Report file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiarizeMethod {
    Vad,
    VadEta,
    Hmm,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalKind {
    Diar,
    Align,
    Wer,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupBy {
    Stage,
    Speaker,
}

fn command() -> clap::Command {
    let help = config::keys_help();
    let mut cmd = Cli::command().after_help(help.clone());
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        cmd = cmd.mut_subcommand(name, |s| s.after_help(help.clone()));
    }
    cmd
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_USAGE;
        }
    };
    let mut cfg = RunConfig::default();
    let layered = cli
        .global
        .config
        .iter()
        .try_for_each(|p| cfg.apply_file(p))
        .and_then(|_| cli.global.overrides.iter().try_for_each(|o| cfg.set_pair(o)));
    if let Err(e) = layered {
        eprintln!("usage error: {e}");
        return EXIT_USAGE;
    }
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.jobs.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return EXIT_PROCESSING;
        }
    };
    match pool.install(|| commands::dispatch(&cli.command, &cfg, cli.global.seed)) {
        Ok(()) => EXIT_OK,
        Err(commands::Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_PROCESSING
        }
    }
}
