//! `dsc`: synthesize a corpus, extract features, train the speaker embedder
//! and acoustic model, convert audio and evaluate.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use dsc_core::config::{parse_override, RunConfig, KEYS};
use dsc_core::convert::ShiftPolicy;
use dsc_core::corpus::Branch;

#[derive(Parser, Debug)]
#[command(name = "dsc", version, about = "Speech and singing voice conversion pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Global {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Root seed; shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic multi-speaker speech and singing corpus.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        /// Shorthand for `--set corpus.speakers=N`.
        #[arg(long)]
        speakers: Option<usize>,
        /// Shorthand for `--set corpus.utts=N`.
        #[arg(long)]
        utts: Option<usize>,
    },
    /// Extract and cache features for every manifest record.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        cache: CacheArg,
        #[arg(long, value_enum, default_value_t = BranchArg::Both)]
        branch: BranchArg,
        /// Shorthand for `--set workers=N`.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Train the speaker embedder on labelled (and pseudo-labelled) records.
    TrainEmbed {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        cache: CacheArg,
        /// Cluster labels for records without a speaker, from `cluster`.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Output checkpoint file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign pseudo speaker labels by agglomerative clustering of d-vectors.
    Cluster {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        cache: CacheArg,
        #[arg(long)]
        embed: PathBuf,
        #[arg(long)]
        k: usize,
        /// Only cluster records without a speaker label.
        #[arg(long)]
        unlabeled: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the acoustic model; checkpoints and a loss log go to `--out`.
    TrainModel {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        cache: CacheArg,
        /// Speaker embedder checkpoint.
        #[arg(long)]
        embed: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the latest checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Convert a source recording to the voice of an enrollment recording.
    Convert {
        #[arg(long)]
        source: PathBuf,
        /// Manifest holding the source's phones and durations.
        #[arg(long)]
        manifest: PathBuf,
        /// Manifest record of the source; defaults to the record whose wav
        /// file name matches `--source`.
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        enroll: PathBuf,
        /// Model checkpoint, or a training directory (latest checkpoint).
        #[arg(long)]
        ckpt: PathBuf,
        /// Speaker embedder; defaults to `embedder.dsc` beside the model.
        #[arg(long)]
        embed: Option<PathBuf>,
        /// Output WAV; the mel (`.dscf`) and report (`.json`) sit beside it.
        #[arg(long, default_value = "converted.wav")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ShiftArg::Auto)]
        shift: ShiftArg,
        /// Use this key-shift factor instead of the estimated one.
        #[arg(long)]
        nu: Option<f64>,
        /// Permit a factor outside [0.25, 4].
        #[arg(long)]
        allow_out_of_band: bool,
    },
    /// Report EER, clustering ARI and mel L1 as JSON.
    Eval {
        /// Trial list of `<enroll-id> <test-id> <target|nontarget>` lines.
        #[arg(long)]
        trials: Option<PathBuf>,
        /// JSON object of id to embedding, scored against `--trials`.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Embedder used to score `--trials` over `--manifest` records.
        #[arg(long)]
        embed: Option<PathBuf>,
        /// Cluster labels from `cluster`, scored against manifest speakers.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Model checkpoint or directory; mel L1 of free-running inference.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        cache: CacheArg,
        /// Write the report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
pub struct CacheArg {
    /// Feature cache directory. Defaults to `$DSC_CACHE_DIR`, then `cache/`
    /// beside the manifest.
    #[arg(long = "cache")]
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BranchArg {
    Synthesis,
    Speaker,
    Both,
}

impl From<BranchArg> for Branch {
    fn from(b: BranchArg) -> Self {
        match b {
            BranchArg::Synthesis => Branch::Synthesis,
            BranchArg::Speaker => Branch::Speaker,
            BranchArg::Both => Branch::Both,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ShiftArg {
    Auto,
    Always,
    Never,
}

impl From<ShiftArg> for ShiftPolicy {
    fn from(s: ShiftArg) -> Self {
        match s {
            ShiftArg::Auto => ShiftPolicy::Auto,
            ShiftArg::Always => ShiftPolicy::Always,
            ShiftArg::Never => ShiftPolicy::Never,
        }
    }
}

/// Help text listing every configuration key.
pub fn config_help() -> String {
    let mut s =
        String::from("Configuration keys (defaults < --config file < --set < dedicated flags such as --seed):\n");
    let width = KEYS.iter().map(|k| k.key.len()).max().unwrap_or(0);
    for k in KEYS {
        s.push_str(&format!(
            "  {:width$}  {} (default {}, range {})\n",
            k.key, k.doc, k.default, k.range
        ));
    }
    s.push_str("\nEnvironment: DSC_CACHE_DIR overrides the feature cache root.\n");
    s.push_str("Exit codes: 0 success, 1 internal error, 2 invalid input.\n");
    s
}

pub fn command() -> clap::Command {
    Cli::command().after_long_help(config_help())
}

/// Resolved configuration: defaults, file, `--set`, then command flags.
pub fn resolve_config(g: &Global, extra: &[(String, String)]) -> anyhow::Result<RunConfig> {
    let mut pairs = g
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<dsc_core::Result<Vec<_>>>()?;
    if let Some(seed) = g.seed {
        pairs.push(("seed".into(), seed.to_string()));
    }
    pairs.extend_from_slice(extra);
    Ok(RunConfig::resolve(g.config.as_deref(), &pairs)?)
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<dsc_core::Error>() {
        Some(err) if err.is_validation() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
