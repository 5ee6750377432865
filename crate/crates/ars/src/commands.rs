//! Subcommand implementations, free of argument parsing and file naming.

use std::path::{Path, PathBuf};

use ars_core::attack::{AttackKind, AttackReport};
use ars_core::metrics::{overlap_probability, MetricValue, TailMethod};
use ars_core::noise::NoiseStrategy;
use ars_core::protocol::{run_encoder_publishing, run_scenario, HorizontalWorld, PartitionConfig, ScenarioReport};
use ars_core::seed::{self, stream};
use serde::{Deserialize, Serialize};

use crate::config::{load_data, LoadedData, RunConfig};
use crate::error::CliError;
use crate::formats::{model_to_json, pool_records, report_csv, ShareRecord, CSV_HEADER};
use crate::manifest::write_file;

/// A config with its data loaded and command-line overrides applied.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub cfg: RunConfig,
    pub data: LoadedData,
}

pub fn prepare(
    config: &Path,
    data_dir: &Path,
    seed: Option<u64>,
    epsilons: Option<Vec<f64>>,
) -> Result<Prepared, CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.scenario.seed = s;
    }
    if let Some(e) = epsilons {
        cfg.scenario.epsilons = e;
    }
    cfg.scenario.validate()?;
    let data = load_data(&cfg.data, data_dir)?;
    if cfg.scenario.image.is_none() {
        cfg.scenario.image = data.image;
    }
    Ok(Prepared { cfg, data })
}

fn world(p: &Prepared) -> Result<HorizontalWorld, CliError> {
    if !matches!(p.cfg.scenario.partition, PartitionConfig::Horizontal { .. }) {
        return Err(CliError::Config("this command needs a horizontal partition".into()));
    }
    Ok(HorizontalWorld::build(&p.cfg.scenario, &p.data.train, &p.data.test)?)
}

/// Trains and publishes the initiator's encoder. Writes `encoder.json` (the
/// published model) and `decoder.private.json` (kept by the initiator).
pub fn cmd_publish(p: &Prepared, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let PartitionConfig::Horizontal { parties, per_party, .. } = p.cfg.scenario.partition else {
        return Err(CliError::Config("publish needs a horizontal partition".into()));
    };
    let plan = ars_core::data::PartitionPlan::horizontal(
        parties,
        per_party,
        Some(seed::derive(p.cfg.scenario.seed, stream::PARTITION)),
    );
    let locals = ars_core::data::partition(&p.data.train, &plan).map_err(|e| CliError::Config(e.to_string()))?;
    let (_, ae, _) = run_encoder_publishing(&p.cfg.scenario, &locals)?;
    let enc = out_dir.join("encoder.json");
    let dec = out_dir.join("decoder.private.json");
    write_file(&enc, model_to_json(ae.encoder()).as_bytes())?;
    write_file(&dec, model_to_json(ae.decoder()).as_bytes())?;
    Ok(vec![enc, dec])
}

/// The shared pool at one configured `ε`.
pub fn cmd_share(p: &Prepared, epsilon: f64, strategy: NoiseStrategy) -> Result<Vec<ShareRecord>, CliError> {
    let w = world(p)?;
    let pool = w.share(w.resolve_epsilon(epsilon), strategy)?;
    Ok(pool_records(&pool))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackOutput {
    pub epsilon: f64,
    pub epsilon_latent: f64,
    pub reports: Vec<AttackReport>,
    /// Probe score of every candidate mask (mask search only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidate_scores: Vec<f64>,
}

pub fn cmd_attack(
    p: &Prepared,
    kind: AttackKind,
    epsilon: f64,
    candidates: usize,
    probe_fraction: f64,
) -> Result<AttackOutput, CliError> {
    let mut p = p.clone();
    let Some(spec) = p.cfg.scenario.attacker.as_mut() else {
        return Err(CliError::Config("config has no [attacker] section".into()));
    };
    if kind != AttackKind::MaskSearch {
        spec.attacks = vec![kind];
    }
    let w = world(&p)?;
    let latent = w.resolve_epsilon(epsilon);
    let pool = w.share(latent, NoiseStrategy::Adversarial)?;
    let sdec = w.attacker_decoder()?.expect("attacker configured");
    let (reports, candidate_scores) = if kind == AttackKind::MaskSearch {
        let r = w.mask_search(
            &pool,
            &sdec,
            candidates,
            seed::derive(p.cfg.scenario.seed, stream::MASK_SEARCH),
            probe_fraction,
        )?;
        let mut report = r.report;
        report
            .metrics
            .push(MetricValue::new("best_index", r.best_index as f64, 1));
        (vec![report], r.scores)
    } else {
        (w.attack(&pool, Some(&sdec))?, Vec::new())
    };
    Ok(AttackOutput {
        epsilon,
        epsilon_latent: latent,
        reports,
        candidate_scores,
    })
}

pub fn cmd_simulate(p: &Prepared) -> Result<ScenarioReport, CliError> {
    Ok(run_scenario(&p.cfg.scenario, &p.data.train, &p.data.test, &p.data.groups)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRow {
    pub n: u64,
    pub t: f64,
    pub method: TailMethod,
    pub probability: f64,
}

pub fn cmd_mask_analyze(ns: &[u64], t: f64, methods: &[TailMethod]) -> Result<Vec<MaskRow>, CliError> {
    let mut rows = Vec::with_capacity(ns.len() * methods.len());
    for &n in ns {
        for &method in methods {
            let probability = overlap_probability(n, t, method).map_err(|e| CliError::Config(e.to_string()))?;
            rows.push(MaskRow { n, t, method, probability });
        }
    }
    Ok(rows)
}

pub fn mask_rows_csv(rows: &[MaskRow]) -> String {
    let mut s = String::from("n,t,method,probability\n");
    for r in rows {
        let m = match r.method {
            TailMethod::Exact => "exact",
            TailMethod::NormalApprox => "normal_approx",
        };
        s.push_str(&format!("{},{},{m},{:e}\n", r.n, r.t, r.probability));
    }
    s
}

/// A report file: the manifest it came from plus the report itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub manifest: String,
    pub report: T,
}

/// Merges report files into one CSV (or a JSON array when `json`).
pub fn cmd_report(inputs: &[PathBuf], json: bool) -> Result<String, CliError> {
    let mut reports = Vec::with_capacity(inputs.len());
    for path in inputs {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::missing(path, e))?;
        let r: Stamped<ScenarioReport> = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{} is not a scenario report: {e}", path.display())))?;
        reports.push(r);
    }
    if json {
        return Ok(serde_json::to_string_pretty(&reports).expect("reports serialize") + "\n");
    }
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &reports {
        let csv = report_csv(&r.report);
        out.push_str(csv.split_once('\n').map_or("", |(_, body)| body));
    }
    Ok(out)
}
