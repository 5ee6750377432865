//! On-disk formats: model JSON, share JSONL and plot CSV.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use ars_core::nn::{LayerSpec, NeuralNet, NnError, Role};
use ars_core::protocol::{ScenarioReport, SharedPool};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("base64: {0}")]
    Base64(#[from] base64::DecodeError),
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Net(#[from] NnError),
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    #[serde(flatten)]
    pub spec: LayerSpec,
    /// Row-major `input_dim x output_dim`, little-endian f64, base64.
    pub weights: String,
    pub bias: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub role: Role,
    pub seed: u64,
    pub layers: Vec<LayerRecord>,
}

fn encode_f64(v: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(v.len() * 8);
    for x in v {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

fn decode_f64(s: &str) -> Result<Vec<f64>, FormatError> {
    let bytes = STANDARD.decode(s)?;
    if bytes.len() % 8 != 0 {
        return Err(FormatError::Shape(format!("{} bytes is not a whole number of f64", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

impl ModelFile {
    pub fn from_net(net: &NeuralNet) -> Self {
        let layers = net
            .specs()
            .into_iter()
            .enumerate()
            .map(|(i, spec)| {
                let (w, b) = net.parameters(i);
                LayerRecord {
                    spec,
                    weights: encode_f64(w),
                    bias: encode_f64(b),
                }
            })
            .collect();
        Self {
            role: net.role(),
            seed: net.seed(),
            layers,
        }
    }

    pub fn to_net(&self) -> Result<NeuralNet, FormatError> {
        let specs = self.layers.iter().map(|l| l.spec).collect();
        let params = self
            .layers
            .iter()
            .map(|l| Ok((decode_f64(&l.weights)?, decode_f64(&l.bias)?)))
            .collect::<Result<_, FormatError>>()?;
        Ok(NeuralNet::from_parameters(specs, params, self.role, self.seed)?)
    }
}

pub fn model_to_json(net: &NeuralNet) -> String {
    serde_json::to_string_pretty(&ModelFile::from_net(net)).expect("model serializes")
}

pub fn model_from_json(text: &str) -> Result<NeuralNet, FormatError> {
    serde_json::from_str::<ModelFile>(text)?.to_net()
}

/// One shared record. This is everything that leaves a party.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShareRecord {
    pub party_id: usize,
    pub sample_id: usize,
    pub z_hat: Vec<f64>,
    pub label: usize,
}

pub fn pool_records(pool: &SharedPool) -> Vec<ShareRecord> {
    pool.records()
        .map(|(party_id, sample_id, z, y)| ShareRecord {
            party_id,
            sample_id,
            z_hat: z.to_vec(),
            label: y.iter().position(|v| *v == 1.0).unwrap_or(0),
        })
        .collect()
}

pub fn write_shares<W: Write>(mut out: W, records: &[ShareRecord]) -> Result<(), FormatError> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_shares<R: BufRead>(input: R) -> Result<Vec<ShareRecord>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| FormatError::Line { line: i + 1, source })?);
    }
    Ok(out)
}

pub const CSV_HEADER: &str = "epsilon,metric,value,seed";

/// Long-format plot data: one `epsilon,metric,value,seed` line per number.
pub fn report_csv(report: &ScenarioReport) -> String {
    let seed = report.config.seed;
    let mut s = String::new();
    let mut line = |eps: f64, metric: &str, value: f64| {
        writeln!(s, "{eps},{metric},{value},{seed}").expect("string write");
    };
    for r in &report.rows {
        let p = serde_json::to_value(r.strategy).expect("strategy serializes");
        let p = p.as_str().unwrap_or("noise");
        line(r.epsilon, &format!("{p}/accuracy"), r.utility.accuracy);
        line(r.epsilon, &format!("{p}/f1"), r.utility.f1);
        line(r.epsilon, &format!("{p}/max_noise"), r.max_noise);
        for a in &r.attacks {
            let kind = ars_core::attack::describe(a.kind);
            for m in &a.metrics {
                let suffix: String = m.parameters.iter().map(|(k, v)| format!("[{k}={v}]")).collect();
                line(r.epsilon, &format!("{p}/{kind}/{}{suffix}", m.name), m.value);
            }
        }
    }
    for o in &report.overlap {
        let eps = report.config.overlap.as_ref().map_or(f64::NAN, |c| c.epsilon);
        line(eps, &format!("overlap[{}]/mse", o.overlap), o.mse);
        line(eps, &format!("overlap[{}]/psnr", o.overlap), o.psnr);
    }
    for t in &report.tasks {
        let eps = report.config.task_epsilon.unwrap_or(report.config.epsilons[0]);
        line(eps, &format!("task[{}]/accuracy", t.task), t.accuracy);
    }
    for v in &report.vertical {
        line(v.epsilon, &format!("k{}/accuracy", v.participants), v.accuracy);
        line(v.epsilon, &format!("k{}/f1", v.participants), v.f1);
        if let Some(a) = v.adv_tr {
            line(v.epsilon, &format!("k{}/adv_tr", v.participants), a);
        }
        if let Some(r) = v.rec_acc {
            line(v.epsilon, &format!("k{}/rec_acc", v.participants), r);
        }
    }
    let mut out = String::with_capacity(s.len() + CSV_HEADER.len() + 1);
    out.push_str(CSV_HEADER);
    out.push('\n');
    out.push_str(&s);
    out
}
