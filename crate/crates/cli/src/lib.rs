//! `asi` command-line harness.
//!
//! Configuration is a flat `key = value` text file (`#` starts a comment,
//! blank lines are ignored, each key at most once). `--set key=value`
//! overrides are applied after the file, left to right. Exit codes: 0 on
//! success, 1 on invalid input or I/O failure, 2 when an internal invariant
//! check fails.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use asi_core::ddim::{make_schedule, roundtrip_error, DEFAULT_BETA_END, DEFAULT_BETA_START};
use asi_core::harness::{self, sweep_csv, SweepParam};
use asi_core::{selftest, AsiError, ExperimentConfig};
use clap::{Args, Parser, Subcommand};

/// Largest acceptable invert-then-generate error.
pub const ROUNDTRIP_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] AsiError),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_validation() || matches!(e, AsiError::Io { .. }) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "asi", about = "Adaptive style incorporation on synthetic features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat key = value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the pipeline and print report.csv.
    Run(ConfigArgs),
    /// Run once per value of one parameter and print the combined table.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// One of n, alpha, seed, perturbation.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Invert the seeded latent and generate it back; print the max error.
    DdimRoundtrip(ConfigArgs),
    /// Write the masks of a single layer as dumps and PGM images.
    DumpMasks(ConfigArgs),
    /// Run the invariant checks of every module.
    Selftest(ConfigArgs),
}

/// Parses the flat config document.
pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::default();
    let mut seen = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("line {}: expected `key = value`", lineno + 1)))?;
        let key = key.trim();
        if seen.contains(&key) {
            return Err(AsiError::Config {
                key: key.to_string(),
                reason: format!("duplicate key on line {}", lineno + 1),
            }
            .into());
        }
        seen.push(key);
        cfg.set(key, value)?;
    }
    for o in overrides {
        let (key, value) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override `{o}` is not key=value")))?;
        cfg.set(key.trim(), value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| AsiError::Io {
            path: p.to_path_buf(),
            source: e,
        })?,
        None => String::new(),
    };
    parse_config_str(&text, overrides)
}

fn load(args: &ConfigArgs) -> Result<ExperimentConfig, CliError> {
    parse_config(args.config.as_deref(), &args.overrides)
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::Core(AsiError::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    })
}

pub fn execute(command: &Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Run(args) => {
            let cfg = load(args)?;
            let report = harness::run_pipeline(&cfg)?;
            out.write_all(report.to_csv().as_bytes()).map_err(io_err)?;
            writeln!(
                err,
                "blended_fraction={} preserved_mse={} spatial_preserved_fraction={}",
                report.blended_fraction, report.preserved_mse, report.spatial_preserved_fraction
            )
            .map_err(io_err)?;
            if report.preserved_mse != 0.0 {
                return Err(CliError::Invariant(format!(
                    "preserved_mse = {} (expected 0)",
                    report.preserved_mse
                )));
            }
        }
        Command::Sweep { config, param, values } => {
            let cfg = load(config)?;
            let param: SweepParam = param.parse()?;
            let reports = harness::sweep(&cfg, param, values)?;
            out.write_all(sweep_csv(param, values, &reports).as_bytes())
                .map_err(io_err)?;
        }
        Command::DdimRoundtrip(args) => {
            let cfg = load(args)?;
            let inputs = harness::synth_inputs(&cfg)?;
            let sched = make_schedule(cfg.timesteps, DEFAULT_BETA_START, DEFAULT_BETA_END)?;
            let error = roundtrip_error(&inputs.spatial, &inputs.noise, &sched, cfg.timesteps)?;
            if let Some(dir) = &cfg.dump_dir {
                let den = asi_core::OracleDenoiser::new(inputs.spatial.clone(), inputs.noise.clone())?;
                let traj = asi_core::ddim_invert(&inputs.spatial, &den, &sched, cfg.timesteps)?;
                harness::write_trajectory(&dir.join("trajectory"), &traj, &sched)?;
            }
            writeln!(out, "max roundtrip error: {error:e}").map_err(io_err)?;
            if !error.is_finite() || error >= ROUNDTRIP_TOLERANCE {
                return Err(CliError::Invariant(format!(
                    "roundtrip error {error:e} exceeds {ROUNDTRIP_TOLERANCE:e}"
                )));
            }
        }
        Command::DumpMasks(args) => {
            let cfg = load(args)?;
            let dir = cfg.dump_dir.clone().ok_or_else(|| AsiError::Config {
                key: "dump_dir".into(),
                reason: "dump-masks needs an output directory".into(),
            })?;
            let layer = harness::single_layer(&cfg)?;
            let written = harness::write_masks(&dir, &layer)?;
            writeln!(
                out,
                "selected heads: {:?}; fused fraction {}; wrote {} files to {}",
                layer.head_mask.selected_indices(),
                layer.fused_mask.fraction(),
                written.len(),
                dir.display()
            )
            .map_err(io_err)?;
        }
        Command::Selftest(args) => {
            let cfg = load(args)?;
            let outcomes = selftest::run_all(cfg.seed);
            let mut modules: Vec<&str> = outcomes.iter().map(|o| o.module).collect();
            modules.dedup();
            for m in &modules {
                let of_module: Vec<_> = outcomes.iter().filter(|o| o.module == *m).collect();
                let passed = of_module.iter().filter(|o| o.passed()).count();
                writeln!(out, "{m}: {passed}/{} passed", of_module.len()).map_err(io_err)?;
                for o in of_module.iter().filter(|o| !o.passed()) {
                    writeln!(err, "  FAIL {}: {}", o.name, o.error.as_deref().unwrap_or("")).map_err(io_err)?;
                }
            }
            let failed = outcomes.iter().filter(|o| !o.passed()).count();
            if failed > 0 {
                return Err(CliError::Invariant(format!("{failed} self-test checks failed")));
            }
        }
    }
    Ok(())
}

/// Entry point shared by the binary and the tests; returns the exit code.
pub fn main_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
