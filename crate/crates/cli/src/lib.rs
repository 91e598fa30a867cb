//! Command-line front end for the geocloak library.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.

use std::ffi::OsString;
use std::fmt;
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use geocloak::gle::GleSystem;
use geocloak::Exec;

mod commands;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(
    name = "geocloak",
    version,
    about = "Visual geo-location estimation and geo-cloaking evaluation"
)]
pub struct Cli {
    /// Worker threads for parallel stages; 1 runs everything sequentially.
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a visual vocabulary on the images of a manifest.
    BuildVocab(BuildVocabArgs),
    /// Build a geo-tagged index.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Locate one image.
    Locate(LocateArgs),
    /// Locate every image of a manifest and write a predictions CSV.
    LocateBatch(LocateBatchArgs),
    /// Apply enhancements to an image: filter, then crop, then tilt-shift.
    Enhance(EnhanceArgs),
    /// Locate targets and score them at one or more radii.
    Evaluate(EvaluateArgs),
    /// Net and gross cloaking between two evaluation reports.
    CloakReport(CloakReportArgs),
    /// Grid of correctly located targets.
    Heatmap(HeatmapArgs),
    /// Classify manifest tags as toponyms by geographic concentration.
    Toponym(ToponymArgs),
    /// Cloaking experiments.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Keep at most this many of the strongest keypoints per image.
    #[arg(long, default_value_t = 1000)]
    pub max_features: usize,
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    /// Manifest CSV (id,path,lat,lon,tags) of training images.
    #[arg(long)]
    pub images: PathBuf,
    /// Number of visual words.
    #[arg(long, default_value_t = 1000)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub extract: ExtractArgs,
}

#[derive(Debug, Subcommand)]
pub enum IndexCommand {
    /// Index the images of a manifest.
    Build(IndexBuildArgs),
}

#[derive(Debug, Args)]
pub struct IndexBuildArgs {
    /// Manifest CSV of background images; every row needs coordinates.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Separate vocabulary for the bag-of-words baseline; defaults to --vocab.
    #[arg(long)]
    pub bnn_vocab: Option<PathBuf>,
    /// Skip the bag-of-words baseline.
    #[arg(long, conflicts_with = "bnn_vocab")]
    pub no_bnn: bool,
    /// Seed of the randomized KD-forest.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub extract: ExtractArgs,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long, default_value_t = GleSystem::Pgm)]
    pub system: GleSystem,
    /// Shortlist length re-ranked by geometric matching.
    #[arg(long, default_value_t = 100)]
    pub top_k: usize,
    /// Geometric inliers the best candidate needs before a prediction is made.
    #[arg(long, default_value_t = 3)]
    pub min_inliers: usize,
    /// KD-forest leaf evaluations for the baseline.
    #[arg(long, default_value_t = geocloak::bnn::DEFAULT_CHECKS)]
    pub checks: usize,
    #[command(flatten)]
    pub extract: ExtractArgs,
}

#[derive(Debug, Args)]
pub struct LocateArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[command(flatten)]
    pub query: QueryArgs,
}

#[derive(Debug, Args)]
pub struct LocateBatchArgs {
    /// Manifest CSV of target images.
    #[arg(long)]
    pub targets: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Leave the ms column empty so repeated runs give identical files.
    #[arg(long)]
    pub no_timing: bool,
    #[command(flatten)]
    pub query: QueryArgs,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("op").required(true).multiple(true).args(["filter", "crop", "tiltshift"])))]
pub struct EnhanceArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// One of gotham, kelvin, lomo, nashville, toaster.
    #[arg(long)]
    pub filter: Option<geocloak::enhance::FilterName>,
    /// Fraction of the image area to remove, in (0, 1).
    #[arg(long)]
    pub crop: Option<f64>,
    #[arg(long)]
    pub tiltshift: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub targets: PathBuf,
    /// Comma-separated radii in meters.
    #[arg(long, value_delimiter = ',', default_value = "100,1000")]
    pub radii: Vec<f64>,
    /// Tag table from `toponym`; adds tagged and tagless sub-reports.
    #[arg(long)]
    pub split_toponym: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub query: QueryArgs,
}

#[derive(Debug, Args)]
pub struct CloakReportArgs {
    #[arg(long)]
    pub before: PathBuf,
    #[arg(long)]
    pub after: PathBuf,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub targets: PathBuf,
    #[arg(long, default_value_t = 500.0)]
    pub cell_meters: f64,
    /// Radius to use when the report holds several.
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ToponymArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub cell_deg: f64,
    #[arg(long, default_value_t = 5)]
    pub min_count: u64,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Subcommand)]
pub enum ExperimentCommand {
    /// Replace each target's nearest background images by filtered copies
    /// and compare locating the filtered target before and after.
    FilteredBackground(FilteredBackgroundArgs),
}

#[derive(Debug, Args)]
pub struct FilteredBackgroundArgs {
    /// Enhancement: a filter name, identity, tiltshift or cropNN.
    #[arg(long)]
    pub filter: geocloak::enhance::Enhancement,
    #[arg(long)]
    pub background: PathBuf,
    #[arg(long)]
    pub targets: PathBuf,
    /// Vocabulary of the bag-of-words baseline.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Background neighbours replaced per target.
    #[arg(long, default_value_t = 100)]
    pub shortlist: usize,
    #[arg(long, value_delimiter = ',', default_value = "100,1000")]
    pub radii: Vec<f64>,
    #[arg(long, default_value_t = geocloak::bnn::DEFAULT_CHECKS)]
    pub checks: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Summary CSV; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub extract: ExtractArgs,
}

/// A failed command, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Internal(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Data(_) => EXIT_DATA,
            Failure::Internal(_) => EXIT_INTERNAL,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Internal(m) => f.write_str(m),
        }
    }
}

impl From<geocloak::Error> for Failure {
    fn from(e: geocloak::Error) -> Self {
        if e.is_config() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("GEOCLOAK_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn configure_threads(threads: Option<u16>) -> Result<Exec, Failure> {
    match threads {
        Some(1) => Ok(Exec::Sequential),
        #[cfg(feature = "parallel")]
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n as usize)
                .build_global()
                .map_err(|e| Failure::Internal(format!("thread pool: {e}")))?;
            Ok(Exec::Parallel)
        }
        _ => Ok(Exec::default()),
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    init_logging();
    let outcome = panic::catch_unwind(AssertUnwindSafe(|| {
        let exec = configure_threads(cli.threads)?;
        commands::dispatch(cli.command, exec)
    }));
    match outcome {
        Ok(Ok(())) => EXIT_OK,
        Ok(Err(f)) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
        Err(_) => {
            eprintln!("error: internal failure");
            EXIT_INTERNAL
        }
    }
}
