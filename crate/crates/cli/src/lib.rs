//! `maskcond` subcommands. [`run`] parses arguments, dispatches, and maps
//! failures to exit codes: 0 success, 1 data or validation error, 2 usage
//! error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use maskcond_core::MaskKind;

mod commands;

pub use commands::attend::{attend_report, AttendConfig, AttendReport};

pub const EXIT_OK: u8 = 0;
pub const EXIT_DATA: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] maskcond_core::Error),
    #[error("{0}")]
    Data(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "maskcond",
    version,
    about = "Layout masks, contour conditions and desk-scale attention checks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the merged entity contour map of every record as PNG.
    Contour(ContourArgs),
    /// Render the text/image attention mask of one record.
    Masks(MasksArgs),
    /// Run the seeded attention stack and report numeric invariants.
    Attend(AttendArgs),
    /// Apply the dataset filters and write the surviving manifest.
    Filter(FilterArgs),
    /// Class-agnostic mean IoU between two manifests.
    Miou(MiouArgs),
    /// Attention MACs with and without condition token filtering.
    Macs(MacsArgs),
}

#[derive(Debug, Args)]
pub struct ContourArgs {
    pub manifest: PathBuf,
    /// Output directory; gets `<image_id>.png` and `<image_id>_rgb.png`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Saa,
    Aia,
}

impl From<KindArg> for MaskKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Saa => MaskKind::SemanticAlignment,
            KindArg::Aia => MaskKind::AttributeIsolation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

fn parse_grid(s: &str) -> Result<Grid, String> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected RxC, got `{s}`"))?;
    let rows: usize = r.trim().parse().map_err(|e| format!("grid rows: {e}"))?;
    let cols: usize = c.trim().parse().map_err(|e| format!("grid cols: {e}"))?;
    if rows == 0 || cols == 0 {
        return Err("grid dimensions must be positive".into());
    }
    Ok(Grid { rows, cols })
}

fn parse_gamma(s: &str) -> Result<f64, String> {
    let g: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if g > 0.0 && g <= 1.0 {
        Ok(g)
    } else {
        Err(format!("gamma must lie in (0, 1], got {g}"))
    }
}

fn parse_positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Debug, Args)]
pub struct MasksArgs {
    pub manifest: PathBuf,
    #[arg(long, value_enum)]
    pub kind: KindArg,
    /// Token grid; the smallest downsampling factor producing it is used.
    #[arg(long, value_parser = parse_grid, conflicts_with = "downsample")]
    pub grid: Option<Grid>,
    #[arg(long, default_value_t = 16, value_parser = parse_positive)]
    pub downsample: usize,
    /// Record to render; defaults to the first one.
    #[arg(long)]
    pub record: Option<String>,
    /// Mask PNG. The index sets go next to it with a `.json` extension.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttendArgs {
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0, value_parser = parse_gamma)]
    pub gamma: f64,
    /// Keep blank condition tokens in the sequence instead of dropping them.
    #[arg(long)]
    pub no_citf: bool,
    #[arg(long, default_value_t = 8, value_parser = parse_positive)]
    pub downsample: usize,
    #[arg(long, default_value_t = 64, value_parser = parse_positive)]
    pub dim: usize,
    #[arg(long, default_value_t = 4, value_parser = parse_positive)]
    pub heads: usize,
    #[arg(long, default_value_t = 4, value_parser = parse_positive)]
    pub layers: usize,
    /// First isolation layer; defaults to the reference range scaled to `--layers`.
    #[arg(long, requires = "aia_end")]
    pub aia_start: Option<usize>,
    #[arg(long, requires = "aia_start")]
    pub aia_end: Option<usize>,
    #[arg(long, default_value_t = 4, value_parser = parse_positive)]
    pub rank: usize,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    pub manifest: PathBuf,
    /// Filtered manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-record JSON report.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Also write contour maps of accepted records here.
    #[arg(long)]
    pub contours: Option<PathBuf>,
    #[arg(long)]
    pub reject_missing_score: bool,
}

#[derive(Debug, Args)]
pub struct MiouArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MacsArgs {
    #[arg(long, default_value_t = 762)]
    pub l_text: u64,
    #[arg(long, default_value_t = 4096)]
    pub l_img: u64,
    /// Condition tokens before filtering; defaults to `--l-img`.
    #[arg(long)]
    pub l_cond: Option<u64>,
    #[arg(long, default_value_t = 24)]
    pub heads: u64,
    #[arg(long, default_value_t = 128)]
    pub head_dim: u64,
    #[arg(long, default_value_t = 57)]
    pub layers: u64,
    /// Condition tokens surviving the filter, e.g. `--retained 812,1490,2044`.
    #[arg(long, value_delimiter = ',', conflicts_with = "manifest")]
    pub retained: Vec<u64>,
    /// Count surviving condition tokens per record of this manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 16, value_parser = parse_positive)]
    pub downsample: usize,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let mut stdout = std::io::stdout().lock();
    match dispatch(cli.command, &mut stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = stdout.flush();
            eprintln!("maskcond: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: Command, out: &mut dyn Write) -> CliResult<()> {
    match command {
        Command::Contour(a) => commands::contour::run(&a, out),
        Command::Masks(a) => commands::masks::run(&a, out),
        Command::Attend(a) => commands::attend::run(&a, out),
        Command::Filter(a) => commands::filter::run(&a, out),
        Command::Miou(a) => commands::miou::run(&a, out),
        Command::Macs(a) => commands::macs::run(&a, out),
    }
}

pub(crate) fn write_file(path: &Path, contents: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

pub(crate) fn emit(out: &mut dyn Write, text: &str) -> CliResult<()> {
    out.write_all(text.as_bytes())
        .map_err(|source| CliError::Io {
            path: PathBuf::from("<stdout>"),
            source,
        })
}
