//! `loopgrid` command line: each subcommand reads the CSV artifacts of the
//! previous stage from the data directory and writes its own.

pub mod commands;
pub mod plot;
pub mod settings;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use loopgrid::config::KeyValues;
use loopgrid::Exec;

pub use settings::PipelineConfig;

/// Failure of a subcommand. Displayed as one machine-parsable line:
/// `error module=<module> kind=<kind> message=<text>`.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub module: &'static str,
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn new(module: &'static str, kind: impl Into<String>, message: impl fmt::Display) -> Self {
        Self { module, kind: kind.into(), message: message.to_string().replace('\n', " ") }
    }

    /// Kind taken from the error's variant name.
    pub fn from_error<E: fmt::Debug + fmt::Display>(module: &'static str, e: E) -> Self {
        let dbg = format!("{e:?}");
        let kind: String = dbg.chars().take_while(|c| c.is_alphanumeric() || *c == '_').collect();
        Self::new(module, kind, e)
    }

    pub fn bad_args(message: impl fmt::Display) -> Self {
        Self::new("cli", "BadArgs", message)
    }

    pub fn exit_code(&self) -> u8 {
        match self.kind.as_str() {
            "BadArgs" | "UnknownKey" | "BadValue" | "Syntax" => 2,
            "MissingInput" | "MissingUpstream" => 3,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error module={} kind={} message={}", self.module, self.kind, self.message)
    }
}

impl std::error::Error for CliError {}

#[derive(Debug, Parser)]
#[command(name = "loopgrid", version, about = "Loop detector cleaning, speed estimation and travel-time prediction")]
pub struct Cli {
    /// Configuration file (`key = value`); defaults to $LOOPGRID_CONFIG.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set seed=7`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Data directory holding the stage artifacts.
    #[arg(long, visible_alias = "out", global = true, default_value = ".")]
    pub dir: PathBuf,
    /// Run every stage on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corridor: samples.csv, layout.csv, truth.csv.
    Synth,
    /// Parse samples into a dense grid at the analysis slot: grid.csv.
    Ingest {
        /// Sample file (default: <dir>/samples.csv).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Layout file (default: <dir>/layout.csv).
        #[arg(long)]
        layout: Option<PathBuf>,
    },
    /// Daily statistics and per-sample checks: health.csv, grid_flagged.csv.
    Health,
    /// Fill bad and missing cells: grid_imputed.csv, pairs.csv.
    Impute,
    /// Fit the mean effective vehicle length: mu.csv.
    FitMu,
    /// Estimate lane speeds: velocity.csv.
    Speed,
    /// Realized and current-status travel times: traveltimes.csv.
    Traveltime {
        #[arg(long)]
        from: Option<usize>,
        #[arg(long)]
        to: Option<usize>,
    },
    /// Fit the varying-coefficient grids: coefficients.csv, arrival_coefficients.csv.
    FitPredictors {
        /// Horizons in minutes, comma separated.
        #[arg(long)]
        delta: Option<String>,
    },
    /// Predict one trip and print a prediction record.
    Predict {
        #[arg(long)]
        from: Option<usize>,
        #[arg(long)]
        to: Option<usize>,
        /// Departure time HH:MM of the trip.
        #[arg(long, conflicts_with = "arrive", required_unless_present = "arrive")]
        depart: Option<String>,
        /// Desired arrival time HH:MM (regression only).
        #[arg(long)]
        arrive: Option<String>,
        /// How many minutes ahead of the trip the prediction is made.
        #[arg(long, default_value_t = 0.0)]
        delta: f64,
        #[arg(long, default_value = "regression")]
        method: String,
        /// Day index to predict; the other days form the history (default: last day).
        #[arg(long)]
        day: Option<usize>,
    },
    /// Leave-one-day-out RMSE table: rmse.csv.
    Eval {
        /// Comma-separated methods (historical,current,regression,pca,nn).
        #[arg(long)]
        methods: Option<String>,
        /// Horizons in minutes, comma separated.
        #[arg(long)]
        delta: Option<String>,
    },
    /// Write the data series behind a figure: plot_<figure>.csv.
    Plot {
        /// fig3, fig4, fig5, fig6, fig10, fig11, fig12, fig13 or fig14.
        #[arg(long)]
        figure: String,
        #[arg(long, default_value_t = 1)]
        station: u32,
        #[arg(long, default_value_t = 1)]
        lane: u16,
        #[arg(long, default_value_t = 0)]
        day: usize,
        /// Also write a static SVG line chart.
        #[arg(long)]
        svg: bool,
    },
}

/// Reads the configuration file and overrides.
pub fn load_config(path: Option<&PathBuf>, overrides: &[String]) -> Result<PipelineConfig, CliError> {
    let path = path.cloned().or_else(|| std::env::var_os("LOOPGRID_CONFIG").map(PathBuf::from));
    let mut kv = match &path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::new("config", "MissingInput", format!("{}: {e}", p.display())))?;
            KeyValues::parse(&text).map_err(|e| CliError::from_error("config", e))?
        }
        None => KeyValues::default(),
    };
    for s in overrides {
        kv.set(s).map_err(|_| CliError::bad_args(format!("`--set {s}` is not KEY=VALUE")))?;
    }
    PipelineConfig::from_kv(&kv)
}

/// Parses arguments and runs one subcommand; returns the text for stdout.
pub fn run<I, T>(args: I) -> Result<String, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            return Err(CliError { module: "cli", kind: "Help".into(), message: e.to_string() });
        }
        Err(e) => return Err(CliError::bad_args(e.to_string().lines().next().unwrap_or("invalid arguments"))),
    };
    let cfg = load_config(cli.config.as_ref(), &cli.set)?;
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    let ctx = commands::Context { cfg, dir: cli.dir.clone(), exec };
    commands::dispatch(&ctx, &cli.command)
}
