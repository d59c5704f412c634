//! `qnet-sim`: run configs in, JSON summaries and CSV tables out.
//!
//! Exit codes: 0 on success, 1 for configuration problems (unreadable or
//! invalid files, unknown keys, scenario/topology mismatch), 2 for errors
//! raised while running (timeouts, expired memories, degenerate states).

pub mod calc;
pub mod config;
pub mod presets;
pub mod report;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use qnet_core::repeater::{run_simulation, worker_cap_from_env, Scenario, SimReport};
use serde::Serialize;

pub use config::{parse_config, parse_config_str, resolve, CliOverrides, Format, ResolvedConfig, RunConfig};
pub use report::{Report, Timing};

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    /// For errors raised while checking user input.
    pub fn from_config(e: qnet_core::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<qnet_core::Error> for CliError {
    fn from(e: qnet_core::Error) -> Self {
        match e {
            qnet_core::Error::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "qnet-sim", version, about = "Photonic quantum network simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Directory for output files.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Write the summary (JSON) or metrics table (CSV) to stdout.
    #[arg(long)]
    pub stdout: bool,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// JSON run config; see schema/run-config.schema.json.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides `seed` in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Herald entanglement across one link.
    Herald(RunArgs),
    /// Two ensemble-pair nodes, polarization readout and Bell test.
    NodePairBell(RunArgs),
    /// Chain of heralded links joined by connections at the middle nodes.
    SwapChain(RunArgs),
    /// Single atom in a cavity heralded with an atomic ensemble.
    Hybrid(RunArgs),
    /// Cavity-to-cavity state transfer.
    CavityTransfer(RunArgs),
    /// Single computations: coupling, critical numbers, state-space dimensions.
    #[command(subcommand)]
    Calc(CalcCommand),
    /// Entanglement measures of a given state or measured counts.
    #[command(subcommand)]
    Verify(VerifyCommand),
}

#[derive(Debug, Subcommand)]
pub enum CalcCommand {
    /// Single-photon coupling g from dipole moment, frequency and mode volume.
    G {
        /// Dipole moment, C·m.
        #[arg(long)]
        dipole: f64,
        /// Cavity angular frequency, rad/s.
        #[arg(long)]
        omega: Option<f64>,
        /// Transition wavelength, m (instead of --omega).
        #[arg(long)]
        wavelength: Option<f64>,
        /// Mode volume, m³.
        #[arg(long)]
        volume: f64,
        #[arg(long, default_value_t = 1.0)]
        overlap: f64,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Critical photon and atom numbers.
    CriticalNumbers {
        #[arg(long, conflicts_with_all = ["g", "kappa", "gamma"])]
        preset: Option<String>,
        /// rad/s
        #[arg(long, requires_all = ["kappa", "gamma"])]
        g: Option<f64>,
        #[arg(long)]
        kappa: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Classical and quantum state-space dimensions of k nodes with n qubits.
    Dimension {
        #[arg(long)]
        nodes: u64,
        #[arg(long)]
        qubits: u64,
        #[command(flatten)]
        output: OutputArgs,
    },
}

#[derive(Debug, Subcommand)]
pub enum VerifyCommand {
    /// Wootters concurrence.
    Concurrence {
        /// State file: {"bell": "psi-plus"} or {"re": [[..]], "im": [[..]]}.
        #[arg(long)]
        state: PathBuf,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// CHSH value at given or canonical analyzer angles, and its maximum.
    Chsh {
        #[arg(long)]
        state: PathBuf,
        /// Analyzer angles a,a',b,b' in radians; canonical angles if absent.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        angles: Option<Vec<f64>>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Linear-inversion tomography from a counts table.
    Tomography {
        #[arg(long)]
        counts: PathBuf,
        #[command(flatten)]
        output: OutputArgs,
    },
}

/// Result of a full scenario run.
pub struct RunOutcome {
    pub config: ResolvedConfig,
    pub report: SimReport,
    pub timing: Timing,
}

/// Resolves and runs a scenario without touching the filesystem beyond
/// reading the config.
pub fn run_scenario(scenario: Scenario, args: &RunArgs) -> Result<RunOutcome, CliError> {
    let file = match &args.config {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    let cli = CliOverrides {
        seed: args.seed,
        format: args.output.format,
        out: args.output.out.as_ref().map(|p| p.to_string_lossy().into_owned()),
    };
    let config = resolve(&file, scenario, &cli)?;
    let started = Instant::now();
    let report = run_simulation(&config.topology, &config.protocol)?;
    let timing = Timing {
        config_hash: config.hash(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        workers: worker_cap_from_env().unwrap_or_else(rayon_threads),
    };
    Ok(RunOutcome { config, report, timing })
}

fn rayon_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn emit_scenario(outcome: &RunOutcome, args: &OutputArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Runtime(e.to_string());
    let dir = outcome.config.output.dir.as_ref().map(PathBuf::from);
    if args.stdout {
        match outcome.config.format() {
            Format::Json => stdout
                .write_all(Report::new(&outcome.config, &outcome.report).to_json().as_bytes())
                .map_err(io)?,
            Format::Csv => report::write_metrics(&mut *stdout, &outcome.report)?,
        }
    }
    // with --stdout, files are written only when a directory was asked for
    let dir = match (dir, args.stdout) {
        (Some(d), _) => Some(d),
        (None, false) => Some(PathBuf::from(".")),
        (None, true) => None,
    };
    if let Some(dir) = dir {
        let written = report::write_outputs(&dir, &outcome.config, &outcome.report, &outcome.timing)?;
        for p in written {
            log::info!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn emit_value<T: Serialize>(name: &str, value: &T, args: &OutputArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Runtime(e.to_string());
    let text = serde_json::to_string_pretty(value).expect("result serializes") + "\n";
    if args.format == Some(Format::Csv) {
        return Err(CliError::Config("calc and verify results are JSON only".into()));
    }
    match &args.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io)?;
            let path: &Path = dir.as_ref();
            std::fs::write(path.join(format!("{name}.json")), &text).map_err(io)?;
            if args.stdout {
                stdout.write_all(text.as_bytes()).map_err(io)?;
            }
        }
        None => stdout.write_all(text.as_bytes()).map_err(io)?,
    }
    Ok(())
}

/// Runs one parsed command, writing data to `stdout`.
pub fn execute(cli: &Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    let scenario = |s: Scenario, args: &RunArgs, stdout: &mut dyn Write| {
        let outcome = run_scenario(s, args)?;
        emit_scenario(&outcome, &args.output, stdout)
    };
    match &cli.command {
        Command::Herald(a) => scenario(Scenario::HeraldOneLink, a, stdout),
        Command::NodePairBell(a) => scenario(Scenario::NodePairBell, a, stdout),
        Command::SwapChain(a) => scenario(Scenario::SwapChain, a, stdout),
        Command::Hybrid(a) => scenario(Scenario::Hybrid, a, stdout),
        Command::CavityTransfer(a) => scenario(Scenario::CavityTransfer, a, stdout),
        Command::Calc(CalcCommand::G {
            dipole,
            omega,
            wavelength,
            volume,
            overlap,
            output,
        }) => emit_value(
            "g",
            &calc::calc_g(*dipole, *omega, *wavelength, *volume, *overlap)?,
            output,
            stdout,
        ),
        Command::Calc(CalcCommand::CriticalNumbers {
            preset,
            g,
            kappa,
            gamma,
            output,
        }) => {
            let rates = match (g, kappa, gamma) {
                (Some(g), Some(k), Some(y)) => Some((*g, *k, *y)),
                _ => None,
            };
            emit_value(
                "critical-numbers",
                &calc::calc_critical(preset.as_deref(), rates)?,
                output,
                stdout,
            )
        }
        Command::Calc(CalcCommand::Dimension { nodes, qubits, output }) => {
            emit_value("dimension", &calc::calc_dimension(*nodes, *qubits)?, output, stdout)
        }
        Command::Verify(VerifyCommand::Concurrence { state, output }) => {
            let rho = calc::load_state(state)?;
            emit_value("concurrence", &calc::verify_concurrence(&rho)?, output, stdout)
        }
        Command::Verify(VerifyCommand::Chsh { state, angles, output }) => {
            let rho = calc::load_state(state)?;
            let angles = match angles.as_deref() {
                None => None,
                Some(&[a, a2, b, b2]) => Some([a, a2, b, b2]),
                Some(a) => return Err(CliError::Config(format!("--angles needs 4 values, got {}", a.len()))),
            };
            emit_value("chsh", &calc::verify_chsh(&rho, angles), output, stdout)
        }
        Command::Verify(VerifyCommand::Tomography { counts, output }) => {
            emit_value("tomography", &calc::verify_tomography(counts)?, output, stdout)
        }
    }
}

/// Parses arguments, runs, reports errors on stderr and returns the exit code.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("qnet-sim: {e}");
            e.exit_code()
        }
    }
}
