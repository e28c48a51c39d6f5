//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 validation error, 2 I/O error. Failures are
//! reported on stderr as a single JSON object. Every successful run writes
//! `manifest.json` to the output directory with the resolved options and
//! SHA-256 digests of the inputs.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::io::IoError;
use config::{ConfigFile, Range, Resolver};

#[derive(Debug, Parser)]
#[command(name = "bcc-xai", version, about = "Consensus labels, clinical explanations and saliency statistics for BCC pattern classifiers")]
pub struct Cli {
    /// `key = value` file supplying defaults for any long option
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<String>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate planted multi-rater annotations and their ground truth
    Simulate(SimulateArgs),
    /// Infer the standard reference from multi-rater annotations
    Consensus(ConsensusArgs),
    /// Multilabel stratified k-fold split
    Split(SplitArgs),
    /// Binary, per-pattern and clinical-group metrics per fold
    Metrics(MetricsArgs),
    /// Grad-CAM vs expert segmentation statistics
    Saliency(SaliencyArgs),
    /// Clinical explanation per labelled image
    Explain(ExplainArgs),
    /// Seeded rotation / perspective / blur augmentation of a PNG directory
    Augment(AugmentArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub raters: Option<usize>,
    #[arg(long)]
    pub images: Option<usize>,
    /// Planted sensitivity range `lo,hi`
    #[arg(long)]
    pub sensitivity: Option<Range>,
    /// Planted specificity range `lo,hi`
    #[arg(long)]
    pub specificity: Option<Range>,
    /// Prior range `lo,hi`
    #[arg(long)]
    pub prior: Option<Range>,
    /// Probability that a rater annotates an image
    #[arg(long)]
    pub coverage: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ConsensusArgs {
    pub annotations: PathBuf,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub smoothing: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    pub labels: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub sr: PathBuf,
    #[arg(long)]
    pub folds: PathBuf,
}

#[derive(Debug, Args)]
pub struct SaliencyArgs {
    pub manifest: PathBuf,
    #[arg(long)]
    pub bins: Option<usize>,
    /// Heatmap binarization threshold for the auxiliary DICE/Jaccard
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    pub labels: PathBuf,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    pub input_dir: PathBuf,
    /// Augmented copies per input image
    #[arg(long)]
    pub copies: Option<usize>,
    #[arg(long)]
    pub rotation_max_deg: Option<f64>,
    #[arg(long)]
    pub perspective_distortion: Option<f64>,
    /// Blur sigma range `lo,hi`
    #[arg(long)]
    pub blur_sigma: Option<Range>,
    #[arg(long)]
    pub rotation_prob: Option<f64>,
    #[arg(long)]
    pub perspective_prob: Option<f64>,
    #[arg(long)]
    pub blur_prob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: String,
    pub message: String,
    pub exit_code: i32,
}

impl CliError {
    pub fn validation(kind: &str, message: impl Into<String>) -> Self {
        CliError {
            kind: kind.to_string(),
            message: message.into(),
            exit_code: 1,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError {
            kind: "IoError".into(),
            message: format!("{}: {e}", path.display()),
            exit_code: 2,
        }
    }

    fn to_json(&self) -> String {
        serde_json::json!({
            "error": self.kind,
            "message": self.message,
            "exit_code": self.exit_code,
        })
        .to_string()
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        let kind = match &e {
            IoError::Io { .. } => "IoError",
            IoError::Schema { .. } => "SchemaError",
            IoError::Dataset { .. } => "ValidationError",
        };
        CliError {
            kind: kind.into(),
            message: e.to_string(),
            exit_code: if e.is_io() { 2 } else { 1 },
        }
    }
}

/// What a command read and wrote, for the manifest.
pub struct RunRecord {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

#[derive(Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    options: &'a std::collections::BTreeMap<String, String>,
    inputs: Vec<InputDigest>,
    outputs: Vec<String>,
    created_unix: u64,
}

fn digest_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn digest_inputs(inputs: &[PathBuf]) -> Result<Vec<InputDigest>, CliError> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| CliError::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            for f in files {
                out.push(InputDigest {
                    path: f.display().to_string(),
                    sha256: digest_file(&f)?,
                });
            }
        } else {
            out.push(InputDigest {
                path: p.display().to_string(),
                sha256: digest_file(p)?,
            });
        }
    }
    Ok(out)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Simulate(_) => "simulate",
        Command::Consensus(_) => "consensus",
        Command::Split(_) => "split",
        Command::Metrics(_) => "metrics",
        Command::Saliency(_) => "saliency",
        Command::Explain(_) => "explain",
        Command::Augment(_) => "augment",
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let mut resolver = Resolver::new(&config);
    let seed = resolver.resolve("seed", cli.seed, 0u64)?;
    let out_dir = PathBuf::from(resolver.resolve("out-dir", cli.out_dir.clone(), "out".to_string())?);
    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::io(&out_dir, e))?;

    let ctx = commands::Context { seed, out_dir: &out_dir };
    let record = match &cli.command {
        Command::Simulate(a) => commands::simulate(&ctx, a, &mut resolver)?,
        Command::Consensus(a) => commands::consensus(&ctx, a, &mut resolver)?,
        Command::Split(a) => commands::split(&ctx, a, &mut resolver)?,
        Command::Metrics(a) => commands::metrics(&ctx, a)?,
        Command::Saliency(a) => commands::saliency(&ctx, a, &mut resolver)?,
        Command::Explain(a) => commands::explain(&ctx, a)?,
        Command::Augment(a) => commands::augment(&ctx, a, &mut resolver)?,
    };

    let manifest = Manifest {
        tool: "bcc-xai",
        version: env!("CARGO_PKG_VERSION"),
        command: command_name(&cli.command),
        options: &resolver.resolved,
        inputs: digest_inputs(&record.inputs)?,
        outputs: record.outputs.iter().map(|p| p.display().to_string()).collect(),
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    crate::io::write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(())
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let err = CliError::validation("UsageError", e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return err.exit_code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code
        }
    }
}
