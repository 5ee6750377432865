//! Adversaries: substitute-decoder reconstruction, adversarial training on
//! self-perturbed representations, attribute extraction, and brute-force mask
//! search.
//!
//! Attackers only ever see the published encoder through an
//! [`EncoderHandle`] and the shared representations. Anything else they are
//! handed (probe plaintexts, a victim mask used to report overlap) is an
//! explicit evaluation oracle.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{DataError, Dataset};
use crate::linalg::Matrix;
use crate::metrics::{self, ImageDims, MetricError, MetricValue};
use crate::nn::{chain, Activation, Loss, NeuralNet, NnError, Role, TrainConfig};
use crate::noise::{masked_ifgsm_batch, MaskVector, NoiseBudget, NoiseError};
use crate::representation::{AutoencoderArch, EncoderHandle};
use crate::seed;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AttackError {
    #[error("mask search needs at least one candidate")]
    NoCandidates,
    #[error("{what}: expected {expected}, found {found}")]
    Mismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Net(#[from] NnError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// The attacker's own modelling choices: decoder shape (it does not know the
/// initiator's), training schedule and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackerConfig {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub seed: u64,
}

impl AttackerConfig {
    fn decoder(&self, handle: &EncoderHandle) -> Result<NeuralNet, NnError> {
        AutoencoderArch::new(handle.input_dim(), &self.hidden, handle.latent_dim()).decoder(self.seed)
    }

    fn train_cfg(&self, loss: Loss) -> TrainConfig {
        TrainConfig {
            loss,
            ..self.train.clone()
        }
    }
}

/// Fits `SDec` on `(Enc(x), x)` for the attacker's own samples.
pub fn train_substitute_decoder(x: &Matrix, handle: &EncoderHandle, cfg: &AttackerConfig) -> Result<NeuralNet, AttackError> {
    let z = handle.encode_batch(x)?;
    Ok(cfg.decoder(handle)?.train(&z, x, &cfg.train_cfg(Loss::SquaredError))?)
}

/// Fits `SDec'` on the attacker's own representations perturbed with its own
/// mask against its own `sdec`. `SDec'` starts from the same initialization as
/// `SDec`, so a zero budget reproduces `SDec`.
pub fn adversarial_training_attack(
    x: &Matrix,
    handle: &EncoderHandle,
    sdec: &NeuralNet,
    attacker_mask: &MaskVector,
    budget: NoiseBudget,
    cfg: &AttackerConfig,
) -> Result<NeuralNet, AttackError> {
    let z = handle.encode_batch(x)?;
    let z_hat = masked_ifgsm_batch(&z, x, sdec, Some(attacker_mask), budget)?;
    Ok(cfg.decoder(handle)?.train(&z_hat, x, &cfg.train_cfg(Loss::SquaredError))?)
}

/// Fits `F_k : z -> a_k` with cross entropy on the attacker's labelled samples.
pub fn train_attribute_extractor(
    ds: &Dataset,
    handle: &EncoderHandle,
    k: usize,
    cfg: &AttackerConfig,
) -> Result<NeuralNet, AttackError> {
    let attr = ds.private_attr(k)?;
    let z = handle.encode_batch(ds.samples())?;
    fit_classifier(&z, attr, &cfg.hidden, &cfg.train_cfg(Loss::CrossEntropy), cfg.seed, Role::AttributeExtractor)
}

/// A softmax classifier `in -> hidden... -> classes` trained with cross entropy.
pub fn fit_classifier(
    inputs: &Matrix,
    one_hot: &Matrix,
    hidden: &[usize],
    cfg: &TrainConfig,
    seed: u64,
    role: Role,
) -> Result<NeuralNet, AttackError> {
    let mut widths = Vec::with_capacity(hidden.len() + 2);
    widths.push(inputs.cols());
    widths.extend_from_slice(hidden);
    widths.push(one_hot.cols());
    let net = NeuralNet::new(chain(&widths, Activation::Relu, Activation::Softmax), role, seed)?;
    let cfg = TrainConfig {
        loss: Loss::CrossEntropy,
        ..cfg.clone()
    };
    Ok(net.train(inputs, one_hot, &cfg)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Reconstruction,
    AdversarialTraining,
    AttributeExtraction,
    MaskSearch,
}

/// Per-sample outcomes plus aggregates. For reconstruction `per_sample` holds
/// per-element MSE; for attribute extraction it holds 1 (correct) or 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: AttackKind,
    pub per_sample: Vec<f64>,
    pub metrics: Vec<MetricValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attacker: Option<AttackerConfig>,
}

impl AttackReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.value)
    }

    pub fn with_attacker(mut self, cfg: &AttackerConfig) -> Self {
        self.attacker = Some(cfg.clone());
        self
    }

    pub fn with_kind(mut self, kind: AttackKind) -> Self {
        self.kind = kind;
        self
    }
}

fn check_rows(what: &'static str, expected: usize, found: usize) -> Result<(), AttackError> {
    if expected != found {
        return Err(AttackError::Mismatch { what, expected, found });
    }
    Ok(())
}

/// Decodes shared representations and scores them against the ground truth:
/// mean per-sample MSE and PSNR (max 1), plus mean SSIM for images.
pub fn run_reconstruction_attack(
    decoder: &NeuralNet,
    shared: &Matrix,
    truth: &Matrix,
    image: Option<ImageDims>,
) -> Result<AttackReport, AttackError> {
    check_rows("representations vs ground truth", truth.rows(), shared.rows())?;
    check_rows("decoder input vs latent dimension", shared.cols(), decoder.input_dim())?;
    let recon = decoder.forward_batch(shared)?;
    let n = truth.rows();
    let mut per_sample = Vec::with_capacity(n);
    let (mut psnr, mut ssim) = (0.0, 0.0);
    for (x, r) in truth.iter_rows().zip(recon.iter_rows()) {
        let e = metrics::mse(x, r)?;
        per_sample.push(e);
        psnr += metrics::psnr_from_mse(e, 1.0);
        if let Some(dims) = image {
            ssim += metrics::ssim(x, r, dims, 1.0)?;
        }
    }
    if n == 0 {
        return Err(MetricError::Empty.into());
    }
    let nf = n as f64;
    let mut out = Vec::new();
    out.push(MetricValue::new("mse", per_sample.iter().sum::<f64>() / nf, n));
    out.push(MetricValue::new("psnr", psnr / nf, n).with_param("max_value", 1.0));
    if image.is_some() {
        out.push(
            MetricValue::new("ssim", ssim / nf, n)
                .with_param("window", metrics::SSIM_WINDOW as f64)
                .with_param("max_value", 1.0),
        );
    }
    Ok(AttackReport {
        kind: AttackKind::Reconstruction,
        per_sample,
        metrics: out,
        attacker: None,
    })
}

/// Runs an extractor on shared representations: accuracy against the true
/// attribute, the equal-to-`r` rate, and the feature loss to `r`.
pub fn run_attribute_attack(extractor: &NeuralNet, shared: &Matrix, truth: &Matrix, r: &[f64]) -> Result<AttackReport, AttackError> {
    check_rows("representations vs attribute labels", truth.rows(), shared.rows())?;
    let pred = extractor.forward_batch(shared)?;
    let predicted = metrics::classes_of(&pred);
    let actual = metrics::classes_of(truth);
    let n = predicted.len();
    let per_sample = predicted
        .iter()
        .zip(&actual)
        .map(|(p, t)| if p == t { 1.0 } else { 0.0 })
        .collect();
    let metrics = alloc::vec![
        MetricValue::new("accuracy", metrics::accuracy(&predicted, &actual)?, n),
        MetricValue::new("equal_to_r", metrics::equal_to_r_rate(&pred, r)?, n),
        MetricValue::new("feature_loss", metrics::feature_loss(&pred, r)?, n),
    ];
    Ok(AttackReport {
        kind: AttackKind::AttributeExtraction,
        per_sample,
        metrics,
        attacker: None,
    })
}

/// Candidate masks for the brute-force search.
#[derive(Clone, Debug)]
pub enum MaskCandidates {
    Random { count: usize, seed: u64 },
    Explicit(Vec<MaskVector>),
}

impl MaskCandidates {
    fn materialize(self, h: usize, owner: u32) -> Result<Vec<MaskVector>, AttackError> {
        let masks = match self {
            MaskCandidates::Explicit(v) => v,
            MaskCandidates::Random { count, seed: s } => (0..count)
                .map(|i| MaskVector::generate(h, owner, seed::derive(s, i as u64)))
                .collect::<Result<_, _>>()?,
        };
        if masks.is_empty() {
            return Err(AttackError::NoCandidates);
        }
        Ok(masks)
    }
}

/// Result of a mask search. `overlap_with_victim` is filled only when the
/// caller supplies the victim mask as an evaluation oracle.
#[derive(Clone, Debug)]
pub struct MaskSearchResult {
    pub best_index: usize,
    pub best_mask: MaskVector,
    /// Probe reconstruction MSE of every candidate, in candidate order.
    pub scores: Vec<f64>,
    pub report: AttackReport,
    pub overlap_with_victim: Option<f64>,
}

/// Plaintext pairs the attacker is assumed to know for scoring candidates.
#[derive(Clone, Copy, Debug)]
pub struct Probe<'a> {
    pub shared: &'a Matrix,
    pub truth: &'a Matrix,
}

/// Trains one adversarially-enhanced decoder per candidate mask and keeps the
/// one with the lowest probe reconstruction MSE (first one on ties).
pub fn mask_bruteforce_attack(
    x: &Matrix,
    handle: &EncoderHandle,
    sdec: &NeuralNet,
    probe: Probe<'_>,
    candidates: MaskCandidates,
    budget: NoiseBudget,
    cfg: &AttackerConfig,
    victim_mask_oracle: Option<&MaskVector>,
) -> Result<MaskSearchResult, AttackError> {
    let masks = candidates.materialize(handle.latent_dim(), u32::MAX)?;
    let mut scores = Vec::with_capacity(masks.len());
    let mut best: Option<(usize, AttackReport)> = None;
    for (i, m) in masks.iter().enumerate() {
        let dec = adversarial_training_attack(x, handle, sdec, m, budget, cfg)?;
        let rep = run_reconstruction_attack(&dec, probe.shared, probe.truth, None)?;
        let score = rep.metric("mse").unwrap_or(f64::INFINITY);
        scores.push(score);
        if best.as_ref().is_none_or(|(b, _)| score < scores[*b]) {
            best = Some((i, rep));
        }
    }
    let (best_index, report) = best.expect("at least one candidate");
    let best_mask = masks[best_index].clone();
    let overlap_with_victim = match victim_mask_oracle {
        Some(v) => Some(metrics::overlap_rate(v.bits(), best_mask.bits())?),
        None => None,
    };
    let mut report = report.with_kind(AttackKind::MaskSearch).with_attacker(cfg);
    report.metrics.push(MetricValue::new("candidates", masks.len() as f64, masks.len()));
    if let Some(o) = overlap_with_victim {
        report.metrics.push(MetricValue::new("best_overlap", o, 1));
    }
    Ok(MaskSearchResult {
        best_index,
        best_mask,
        scores,
        report,
        overlap_with_victim,
    })
}

/// Mean-image predictor: the floor any useful decoder has to beat.
pub fn mean_predictor_mse(train: &Matrix, truth: &Matrix) -> Result<f64, AttackError> {
    let mean = train.column_means();
    let mut total = 0.0;
    for x in truth.iter_rows() {
        total += metrics::mse(x, &mean)?;
    }
    if truth.is_empty() {
        return Err(MetricError::Empty.into());
    }
    Ok(total / truth.rows() as f64)
}

/// Short name used on the command line.
pub fn describe(kind: AttackKind) -> String {
    String::from(match kind {
        AttackKind::Reconstruction => "recon",
        AttackKind::AdversarialTraining => "advtrain",
        AttackKind::AttributeExtraction => "attr",
        AttackKind::MaskSearch => "mask-search",
    })
}
