//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use ars_core::attack::AttackKind;
use ars_core::metrics::TailMethod;
use ars_core::noise::NoiseStrategy;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::commands::{self, Prepared, Stamped};
use crate::config::data_dir;
use crate::error::{exit, CliError};
use crate::formats::{report_csv, write_shares};
use crate::manifest::{write_file, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "ars", version, about = "Adversarial representation sharing simulator")]
pub struct Cli {
    /// Dataset root; overrides $ARS_DATA_DIR (default ./data).
    #[arg(long, global = true, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML, or JSON by extension).
    #[arg(long, value_name = "FILE")]
    pub config: PathBuf,
    /// Root seed; overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the initiator's autoencoder and write the published encoder.
    Publish {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Write every party's shared representations as JSONL.
    Share {
        #[command(flatten)]
        common: Common,
        /// Defense intensity, in the config's epsilon units.
        #[arg(long)]
        epsilon: f64,
        #[arg(long, value_enum, default_value_t = StrategyArg::Adversarial)]
        strategy: StrategyArg,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Run one attack against the configured victim.
    Attack {
        #[arg(value_enum)]
        kind: KindArg,
        #[command(flatten)]
        common: Common,
        /// Defense intensity (default: the config's largest epsilon).
        #[arg(long)]
        epsilon: Option<f64>,
        /// Number of random candidate masks (mask-search).
        #[arg(long, default_value_t = 16)]
        candidates: usize,
        /// Fraction of the victim's records with known plaintext (mask-search).
        #[arg(long, default_value_t = 0.05)]
        probe_fraction: f64,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Run a full scenario and write its report.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated epsilon grid; overrides the config.
        #[arg(long, value_delimiter = ',')]
        epsilon: Option<Vec<f64>>,
        /// Report JSON path.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Also write plot data (epsilon,metric,value,seed).
        #[arg(long, value_name = "FILE")]
        csv: Option<PathBuf>,
    },
    /// Probability that two random masks overlap in at least a fraction t of positions.
    MaskAnalyze {
        /// Mask lengths, comma-separated.
        #[arg(long, value_delimiter = ',', required = true)]
        n: Vec<u64>,
        #[arg(long)]
        t: f64,
        #[arg(long, value_enum, default_value_t = MethodArg::Exact)]
        method: MethodArg,
        /// CSV output (default: stdout).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Merge scenario reports into one CSV, or a JSON array if --out ends in .json.
    Report {
        #[arg(long, required = true, num_args = 1.., value_name = "FILE")]
        input: Vec<PathBuf>,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Adversarial,
    Uniform,
    None,
}

impl From<StrategyArg> for NoiseStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Adversarial => NoiseStrategy::Adversarial,
            StrategyArg::Uniform => NoiseStrategy::Uniform,
            StrategyArg::None => NoiseStrategy::None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Recon,
    Advtrain,
    Attr,
    MaskSearch,
}

impl From<KindArg> for AttackKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Recon => AttackKind::Reconstruction,
            KindArg::Advtrain => AttackKind::AdversarialTraining,
            KindArg::Attr => AttackKind::AttributeExtraction,
            KindArg::MaskSearch => AttackKind::MaskSearch,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Exact,
    Normal,
    Both,
}

impl MethodArg {
    fn methods(self) -> Vec<TailMethod> {
        match self {
            MethodArg::Exact => vec![TailMethod::Exact],
            MethodArg::Normal => vec![TailMethod::NormalApprox],
            MethodArg::Both => vec![TailMethod::Exact, TailMethod::NormalApprox],
        }
    }
}

fn stamped_json<T: Serialize>(manifest: &Path, report: T) -> String {
    let name = manifest
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    serde_json::to_string_pretty(&Stamped { manifest: name, report }).expect("report serializes") + "\n"
}

/// Writes the manifest for `primary` before any result and returns its path.
fn start(argv: &[String], common: &Common, primary: &Path, outputs: Vec<PathBuf>) -> Result<PathBuf, CliError> {
    let path = RunManifest::path_for(primary);
    RunManifest::new(argv.to_vec(), Some(&common.config), common.seed, outputs).write(&path)?;
    Ok(path)
}

fn load(cli_dir: Option<&Path>, common: &Common, eps: Option<Vec<f64>>) -> Result<Prepared, CliError> {
    commands::prepare(&common.config, &data_dir(cli_dir), common.seed, eps)
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => write_file(p, text.as_bytes()),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|source| CliError::Io {
                path: PathBuf::from("<stdout>"),
                source,
            }),
    }
}

pub fn run(cli: Cli, argv: &[String]) -> Result<(), CliError> {
    let dir = cli.data_dir.as_deref();
    match cli.command {
        Command::Publish { common, out } => {
            let p = load(dir, &common, None)?;
            let manifest_at = out.join("publish");
            start(
                argv,
                &common,
                &manifest_at,
                vec![out.join("encoder.json"), out.join("decoder.private.json")],
            )?;
            commands::cmd_publish(&p, &out)?;
        }
        Command::Share {
            common,
            epsilon,
            strategy,
            out,
        } => {
            let p = load(dir, &common, None)?;
            start(argv, &common, &out, vec![out.clone()])?;
            let records = commands::cmd_share(&p, epsilon, strategy.into())?;
            let mut buf = Vec::new();
            write_shares(&mut buf, &records)?;
            write_file(&out, &buf)?;
        }
        Command::Attack {
            kind,
            common,
            epsilon,
            candidates,
            probe_fraction,
            out,
        } => {
            let p = load(dir, &common, None)?;
            let eps = epsilon.unwrap_or_else(|| p.cfg.scenario.epsilons.iter().copied().fold(0.0, f64::max));
            let m = start(argv, &common, &out, vec![out.clone()])?;
            let report = commands::cmd_attack(&p, kind.into(), eps, candidates, probe_fraction)?;
            write_file(&out, stamped_json(&m, report).as_bytes())?;
        }
        Command::Simulate {
            common,
            epsilon,
            out,
            csv,
        } => {
            let p = load(dir, &common, epsilon)?;
            let mut outputs = vec![out.clone()];
            outputs.extend(csv.clone());
            let m = start(argv, &common, &out, outputs)?;
            let report = commands::cmd_simulate(&p)?;
            if let Some(c) = &csv {
                write_file(c, report_csv(&report).as_bytes())?;
            }
            write_file(&out, stamped_json(&m, report).as_bytes())?;
        }
        Command::MaskAnalyze { n, t, method, out } => {
            let rows = commands::cmd_mask_analyze(&n, t, &method.methods())?;
            emit(out.as_deref(), &commands::mask_rows_csv(&rows))?;
        }
        Command::Report { input, out } => {
            let json = out.as_deref().is_some_and(|o| o.extension().is_some_and(|e| e == "json"));
            emit(out.as_deref(), &commands::cmd_report(&input, json)?)?;
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let argv: Vec<OsString> = args.into_iter().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::OK };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli, &argv) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
