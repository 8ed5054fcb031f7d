//! Pipeline driver: one binary whose subcommands chain the library stages
//! over files. Progress goes to standard error, data to files; every
//! subcommand leaves a JSON report next to its output.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hpbrdf::{
    AnalysisError, CaptureError, MaterialError, NeuralError, PbrdfError, PcaError,
    ReconstructError, RenderError, SceneError, SpectrumError, TableAxis, TableError,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Capture(#[from] CaptureError),
    #[error("{0}")]
    Reconstruct(#[from] ReconstructError),
    #[error("{0}")]
    Table(#[from] TableError),
    #[error("{0}")]
    Material(#[from] PbrdfError),
    #[error("{0}")]
    Scene(#[from] SceneError),
    #[error("{0}")]
    Spectrum(#[from] SpectrumError),
    #[error("{0}")]
    Render(#[from] RenderError),
    #[error("{0}")]
    Neural(#[from] NeuralError),
    #[error("{0}")]
    Pca(#[from] PcaError),
    #[error("{0}")]
    Analysis(#[from] AnalysisError),
}

impl CliError {
    fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "Usage",
            CliError::Config(_) => "Config",
            CliError::Io(_) => "Io",
            CliError::Capture(_) => "Capture",
            CliError::Reconstruct(_) => "Reconstruct",
            CliError::Table(_) => "Table",
            CliError::Material(_) => "Material",
            CliError::Scene(_) => "Scene",
            CliError::Spectrum(_) => "Spectrum",
            CliError::Render(_) => "Render",
            CliError::Neural(_) => "Neural",
            CliError::Pca(_) => "Pca",
            CliError::Analysis(_) => "Analysis",
        }
    }
}

impl From<MaterialError> for CliError {
    fn from(e: MaterialError) -> Self {
        CliError::Material(e.into())
    }
}

#[derive(Parser)]
#[command(
    name = "hpbrdf",
    version,
    about = "Hyperspectral polarimetric reflectance pipeline",
    after_help = "Configuration comes from --config, else $HPBRDF_CONFIG, else built-in \
                  defaults; see configs/default.toml for the full schema."
)]
struct Cli {
    /// Configuration file (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for every stage that draws random numbers.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for data-parallel stages (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the dual-rotating-retarder acquisition of the configured
    /// sphere scene into a measurement archive.
    Simulate {
        /// Output archive (default: paths.capture from the config).
        #[arg(short, long, value_name = "HPMA")]
        output: Option<PathBuf>,
    },
    /// Solve per-pixel Mueller matrices from a measurement archive.
    Reconstruct {
        /// Input archive (default: paths.capture).
        #[arg(short, long, value_name = "HPMA")]
        input: Option<PathBuf>,
        /// Output matrix stack (default: paths.stack).
        #[arg(short, long, value_name = "HPMI")]
        output: Option<PathBuf>,
    },
    /// Accumulate a matrix stack into a reflectance table.
    Tabulate {
        /// Input matrix stack (default: paths.stack).
        #[arg(short, long, value_name = "HPMI")]
        input: Option<PathBuf>,
        /// Output table (default: paths.table).
        #[arg(short, long, value_name = "HPBT")]
        output: Option<PathBuf>,
        /// Table size as bands x phi_d x theta_d x theta_h, e.g. 68x361x91x91.
        #[arg(long, value_name = "BxPxDxH")]
        bins: Option<String>,
    },
    /// Fill empty table bins from measured neighbors.
    Inpaint {
        /// Input table (default: paths.table).
        #[arg(short, long, value_name = "HPBT")]
        input: Option<PathBuf>,
        /// Output table (default: paths.inpainted).
        #[arg(short, long, value_name = "HPBT")]
        output: Option<PathBuf>,
        /// Gaussian sigma in bins along phi_d,theta_d,theta_h, e.g. 2,2,2.
        #[arg(long, value_name = "P,D,H")]
        sigma: Option<String>,
    },
    /// Test reconstructed matrices for physical validity and print the
    /// passing percentage.
    Validate {
        /// Input matrix stack (default: paths.stack).
        #[arg(short, long, value_name = "HPMI")]
        input: Option<PathBuf>,
    },
    /// Split a matrix stack into diattenuation, polarizance, retardance and
    /// depolarization maps.
    Decompose {
        /// Input matrix stack (default: paths.stack).
        #[arg(short, long, value_name = "HPMI")]
        input: Option<PathBuf>,
        /// Directory for the scalar maps (default: paths.decompose_dir).
        #[arg(short, long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
        /// Light arm index to export.
        #[arg(long, default_value_t = 0)]
        arm: usize,
        /// Wavelength band index to export.
        #[arg(long, default_value_t = 0)]
        band: usize,
    },
    /// Principal component analysis over table slices.
    Pca {
        /// Input table (default: paths.table).
        #[arg(short, long, value_name = "HPBT")]
        input: Option<PathBuf>,
        /// Output variance CSV (default: paths.pca_csv).
        #[arg(short, long, value_name = "CSV")]
        output: Option<PathBuf>,
        /// Feature axis laid out along slice rows.
        #[arg(long, value_enum, default_value_t = AxisArg::ThetaD)]
        rows: AxisArg,
        /// Feature axis laid out along slice columns.
        #[arg(long, value_enum, default_value_t = AxisArg::ThetaH)]
        cols: AxisArg,
        /// Number of principal components to keep.
        #[arg(short = 'k', long, default_value_t = 8)]
        components: usize,
    },
    /// Render the scene from a pipeline config file to images.
    Render {
        /// Pipeline config file providing [scene], [render] and [material].
        scene: PathBuf,
        /// Render from this table instead of the analytic material.
        #[arg(long, value_name = "HPBT")]
        table: Option<PathBuf>,
        /// Nearest-bin table lookups instead of trilinear interpolation.
        #[arg(long, requires = "table")]
        nearest: bool,
        /// Directory for the images (default: paths.render_dir).
        #[arg(short, long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
        /// Base polarization maps on this band instead of the band average.
        #[arg(long, value_name = "N")]
        band: Option<usize>,
    },
    /// Fit the compact neural model to a table.
    FitMlp {
        /// Input table (default: paths.table).
        #[arg(short, long, value_name = "HPBT")]
        input: Option<PathBuf>,
        /// Output model (default: paths.model).
        #[arg(short, long, value_name = "HPNN")]
        output: Option<PathBuf>,
        /// Architecture as hidden_layers x width, e.g. 4x256.
        #[arg(long, value_name = "LxW")]
        layers: Option<String>,
    },
    /// Print a data file's header as JSON.
    Info {
        /// Archive, stack, table or model file.
        file: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AxisArg {
    Lambda,
    PhiD,
    ThetaD,
    ThetaH,
}

impl From<AxisArg> for TableAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::Lambda => TableAxis::Lambda,
            AxisArg::PhiD => TableAxis::PhiD,
            AxisArg::ThetaD => TableAxis::ThetaD,
            AxisArg::ThetaH => TableAxis::ThetaH,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    let (config, source) = config::PipelineConfig::load(cli.config.as_deref())?;
    if let Some(path) = &source {
        eprintln!("config: {}", path.display());
    }
    match cli.command {
        Command::Simulate { output } => commands::simulate(&config, output, cli.seed),
        Command::Reconstruct { input, output } => commands::reconstruct(&config, input, output),
        Command::Tabulate { input, output, bins } => {
            commands::tabulate(&config, input, output, bins)
        }
        Command::Inpaint { input, output, sigma } => {
            commands::inpaint(&config, input, output, sigma)
        }
        Command::Validate { input } => commands::validate(&config, input),
        Command::Decompose { input, out_dir, arm, band } => {
            commands::decompose(&config, input, out_dir, arm, band)
        }
        Command::Pca { input, output, rows, cols, components } => {
            commands::pca(&config, input, output, rows.into(), cols.into(), components)
        }
        Command::Render { scene, table, nearest, out_dir, band } => {
            commands::render(scene, table, nearest, out_dir, band)
        }
        Command::FitMlp { input, output, layers } => {
            commands::fit_mlp(&config, input, output, layers, cli.seed)
        }
        Command::Info { file } => commands::info(file),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Usage(_)) => {
            eprintln!("error: {}: {}", e.category(), e);
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {}: {}", e.category(), e);
            ExitCode::FAILURE
        }
    }
}
