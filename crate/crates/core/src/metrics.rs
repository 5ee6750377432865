//! Utility and privacy measures: reconstruction and feature losses, image
//! quality (MSE / PSNR / SSIM), classification scores, tabular reconstruction
//! accuracy and mask-overlap combinatorics.

use alloc::borrow::ToOwned;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::nn::argmax;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("metric needs at least one sample")]
    Empty,
    #[error("image of {len} values does not match {width}x{height}")]
    Dims { len: usize, width: usize, height: usize },
    #[error("{0}")]
    OutOfRange(String),
    #[error("weights must be non-negative and sum to 1 (sum = {sum})")]
    Weights { sum: f64 },
}

/// A named scalar together with how it was computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub name: String,
    pub value: f64,
    pub sample_count: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub parameters: Vec<(String, f64)>,
}

impl MetricValue {
    pub fn new(name: &str, value: f64, sample_count: usize) -> Self {
        Self {
            name: name.to_owned(),
            value,
            sample_count,
            parameters: Vec::new(),
        }
    }

    pub fn with_param(mut self, key: &str, value: f64) -> Self {
        self.parameters.push((key.to_owned(), value));
        self
    }
}

fn same_len(a: usize, b: usize) -> Result<(), MetricError> {
    if a != b {
        return Err(MetricError::LengthMismatch { left: a, right: b });
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    same_len(a.len(), b.len())?;
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// PSNR reported for (numerically) identical signals.
pub const PSNR_CAP_DB: f64 = 100.0;
const PSNR_MSE_FLOOR: f64 = 1e-10;

pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse < PSNR_MSE_FLOOR {
        return PSNR_CAP_DB;
    }
    10.0 * libm::log10(max_value * max_value / mse)
}

pub fn psnr(a: &[f64], b: &[f64], max_value: f64) -> Result<f64, MetricError> {
    Ok(psnr_from_mse(mse(a, b)?, max_value))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: usize,
    pub height: usize,
}

impl ImageDims {
    pub const MNIST: ImageDims = ImageDims {
        width: 28,
        height: 28,
    };
}

/// Side of the square SSIM window.
pub const SSIM_WINDOW: usize = 8;

/// Mean SSIM over all 8x8 windows (stride 1) with uniform weights and population
/// statistics; `C1 = (0.01 max)^2`, `C2 = (0.03 max)^2`. Images smaller than the
/// window use a single window covering the image.
pub fn ssim(a: &[f64], b: &[f64], dims: ImageDims, max_value: f64) -> Result<f64, MetricError> {
    same_len(a.len(), b.len())?;
    if a.len() != dims.width * dims.height {
        return Err(MetricError::Dims {
            len: a.len(),
            width: dims.width,
            height: dims.height,
        });
    }
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    let c1 = (0.01 * max_value) * (0.01 * max_value);
    let c2 = (0.03 * max_value) * (0.03 * max_value);
    let wx = SSIM_WINDOW.min(dims.width);
    let wy = SSIM_WINDOW.min(dims.height);
    let n = (wx * wy) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=dims.height - wy {
        for x0 in 0..=dims.width - wx {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + wy {
                let row = y * dims.width;
                for x in x0..x0 + wx {
                    let (p, q) = (a[row + x], b[row + x]);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Reconstruction leakage. `raw` is the mean per-sample distance (per-element
/// MSE); `signed = -raw` follows the convention in which a defence maximizes the
/// loss by pushing reconstructions away.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionLoss {
    pub signed: f64,
    pub raw: f64,
}

pub fn reconstruction_loss(originals: &Matrix, reconstructions: &Matrix) -> Result<ReconstructionLoss, MetricError> {
    same_len(originals.rows(), reconstructions.rows())?;
    same_len(originals.cols(), reconstructions.cols())?;
    if originals.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut sum = 0.0;
    for (x, r) in originals.iter_rows().zip(reconstructions.iter_rows()) {
        sum += mse(x, r)?;
    }
    let raw = sum / originals.rows() as f64;
    Ok(ReconstructionLoss { signed: -raw, raw })
}

/// Mean squared distance between each prediction and the fixed vector `r`.
///
/// Measured against a fixed target rather than the true attribute so that an
/// attacker cannot undo the defence by flipping its outputs.
pub fn feature_loss(predictions: &Matrix, r: &[f64]) -> Result<f64, MetricError> {
    same_len(predictions.cols(), r.len())?;
    if predictions.is_empty() {
        return Err(MetricError::Empty);
    }
    let total: f64 = predictions
        .iter_rows()
        .map(|p| p.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    Ok(total / predictions.rows() as f64)
}

/// Checks non-negative weights summing to 1 within `1e-12`.
pub fn check_weights(weights: &[f64]) -> Result<(), MetricError> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || weights.iter().any(|w| w.is_nan() || *w < 0.0) || (sum - 1.0).abs() > 1e-12 {
        return Err(MetricError::Weights { sum });
    }
    Ok(())
}

/// `lambda_0 * L_R + sum_k lambda_k * L_{A_k}`.
pub fn overall_privacy_loss(reconstruction: f64, features: &[f64], weights: &[f64]) -> Result<f64, MetricError> {
    check_weights(weights)?;
    same_len(weights.len(), features.len() + 1)?;
    Ok(weights[0] * reconstruction + weights[1..].iter().zip(features).map(|(w, l)| w * l).sum::<f64>())
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64, MetricError> {
    same_len(predicted.len(), truth.len())?;
    if predicted.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(predicted.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / predicted.len() as f64)
}

/// Class indices of one-hot rows.
pub fn classes_of(one_hot: &Matrix) -> Vec<usize> {
    one_hot.iter_rows().map(argmax).collect()
}

/// F1 of `positive`: `2 TP / (2 TP + FP + FN)`, 0 when that is 0/0.
pub fn f1(predicted: &[usize], truth: &[usize], positive: usize) -> Result<f64, MetricError> {
    same_len(predicted.len(), truth.len())?;
    if predicted.is_empty() {
        return Err(MetricError::Empty);
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p == positive, t == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 })
}

/// Unweighted mean of per-class F1 over `classes`.
pub fn macro_f1(predicted: &[usize], truth: &[usize], classes: usize) -> Result<f64, MetricError> {
    let mut total = 0.0;
    for c in 0..classes {
        total += f1(predicted, truth, c)?;
    }
    Ok(total / classes.max(1) as f64)
}

/// Fraction of predictions whose arg-max equals the arg-max of `r`.
pub fn equal_to_r_rate(predictions: &Matrix, r: &[f64]) -> Result<f64, MetricError> {
    same_len(predictions.cols(), r.len())?;
    if predictions.is_empty() {
        return Err(MetricError::Empty);
    }
    let target = argmax(r);
    Ok(predictions.iter_rows().filter(|p| argmax(p) == target).count() as f64 / predictions.rows() as f64)
}

/// `(n - H(m1, m2)) / n`.
pub fn overlap_rate(m1: &[bool], m2: &[bool]) -> Result<f64, MetricError> {
    same_len(m1.len(), m2.len())?;
    if m1.is_empty() {
        return Err(MetricError::Empty);
    }
    let same = m1.iter().zip(m2).filter(|(a, b)| a == b).count();
    Ok(same as f64 / m1.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailMethod {
    Exact,
    NormalApprox,
}

/// Probability that two independent uniform random masks of length `n` overlap
/// in at least a fraction `t` of positions, `P[X >= ceil(t n)]` with
/// `X ~ B(n, 1/2)`.
///
/// `Exact` sums the binomial tail in log space through `ln Γ`; `NormalApprox`
/// uses `Φ(√n) − Φ((2t − 1)√n)`.
pub fn overlap_probability(n: u64, t: f64, method: TailMethod) -> Result<f64, MetricError> {
    if n == 0 {
        return Err(MetricError::OutOfRange("n must be at least 1".into()));
    }
    if !(t > 0.5 && t <= 1.0) {
        return Err(MetricError::OutOfRange(alloc::format!("t must lie in (1/2, 1], got {t}")));
    }
    let nf = n as f64;
    match method {
        TailMethod::Exact => {
            // Guard against t*n landing a hair above an integer.
            let k0 = libm::ceil(t * nf - 1e-9).max(0.0) as u64;
            let ln_norm = nf * core::f64::consts::LN_2;
            let ln_n_fact = libm::lgamma(nf + 1.0);
            let terms: Vec<f64> = (k0..=n)
                .map(|i| {
                    let i = i as f64;
                    ln_n_fact - libm::lgamma(i + 1.0) - libm::lgamma(nf - i + 1.0) - ln_norm
                })
                .collect();
            let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = terms.iter().map(|v| libm::exp(v - max)).sum();
            Ok(libm::exp(max + libm::log(sum)).min(1.0))
        }
        TailMethod::NormalApprox => {
            let s = libm::sqrt(nf);
            // Φ(a) − Φ(b) = Q(b) − Q(a), which keeps precision in the far tail.
            Ok(upper_normal_tail((2.0 * t - 1.0) * s) - upper_normal_tail(s))
        }
    }
}

/// `Q(x) = 1 − Φ(x)`.
fn upper_normal_tail(x: f64) -> f64 {
    0.5 * libm::erfc(x / core::f64::consts::SQRT_2)
}

/// How a block of encoded feature columns is scored when reconstructed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    Numeric,
    OneHot,
}

/// A contiguous block of encoded columns that came from one source column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnGroup {
    pub name: String,
    pub range: Range<usize>,
    pub kind: GroupKind,
}

/// Tolerance for a numeric column to count as reconstructed (scaled units).
pub const NUMERIC_TOLERANCE: f64 = 0.05;

/// Restricts column groups to `window` and re-bases them to start at 0.
pub fn groups_within(groups: &[ColumnGroup], window: Range<usize>) -> Vec<ColumnGroup> {
    groups
        .iter()
        .filter_map(|g| {
            let start = g.range.start.max(window.start);
            let end = g.range.end.min(window.end);
            (start < end).then(|| ColumnGroup {
                name: g.name.clone(),
                range: start - window.start..end - window.start,
                kind: g.kind,
            })
        })
        .collect()
}

/// Per-sample tabular reconstruction accuracy: the mean over column groups of
/// per-group correctness.
///
/// A one-hot group is correct when the arg-max of the reconstruction hits the
/// hot column. A group truncated by a partition boundary may contain no hot
/// column; it is then correct when every reconstructed entry stays below 0.5.
/// A numeric column is correct within [`NUMERIC_TOLERANCE`].
pub fn tabular_reconstruction_accuracy(
    originals: &Matrix,
    reconstructions: &Matrix,
    groups: &[ColumnGroup],
) -> Result<(f64, Vec<f64>), MetricError> {
    same_len(originals.rows(), reconstructions.rows())?;
    same_len(originals.cols(), reconstructions.cols())?;
    if originals.is_empty() || groups.is_empty() {
        return Err(MetricError::Empty);
    }
    if let Some(g) = groups.iter().find(|g| g.range.end > originals.cols()) {
        return Err(MetricError::OutOfRange(alloc::format!(
            "group {} ends at column {} beyond {}",
            g.name,
            g.range.end,
            originals.cols()
        )));
    }
    let per_sample: Vec<f64> = originals
        .iter_rows()
        .zip(reconstructions.iter_rows())
        .map(|(x, r)| {
            let correct = groups
                .iter()
                .filter(|g| {
                    let xs = &x[g.range.clone()];
                    let rs = &r[g.range.clone()];
                    match g.kind {
                        GroupKind::Numeric => xs.iter().zip(rs).all(|(a, b)| (a - b).abs() <= NUMERIC_TOLERANCE),
                        GroupKind::OneHot => {
                            if xs.iter().any(|&v| v > 0.5) {
                                argmax(rs) == argmax(xs)
                            } else {
                                rs.iter().all(|&v| v < 0.5)
                            }
                        }
                    }
                })
                .count();
            correct as f64 / groups.len() as f64
        })
        .collect();
    let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok((mean, per_sample))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn identical_images() {
        let img: Vec<f64> = (0..784).map(|i| ((i * 37) % 255) as f64 / 255.0).collect();
        assert_eq!(mse(&img, &img).unwrap(), 0.0);
        assert_eq!(psnr(&img, &img, 1.0).unwrap(), PSNR_CAP_DB);
        assert_eq!(ssim(&img, &img, ImageDims::MNIST, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn psnr_closed_form() {
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
        let a = [0.0, 0.0];
        let b = [0.1, -0.1];
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_drops_for_unrelated_images() {
        let a: Vec<f64> = (0..784).map(|i| ((i * 37) % 255) as f64 / 255.0).collect();
        let b: Vec<f64> = a.iter().rev().copied().collect();
        let s = ssim(&a, &b, ImageDims::MNIST, 1.0).unwrap();
        assert!((-1.0..0.5).contains(&s));
        assert!(matches!(ssim(&a[..700], &b[..700], ImageDims::MNIST, 1.0), Err(MetricError::Dims { .. })));
    }

    #[test]
    fn reconstruction_loss_signs() {
        let x = Matrix::from_rows(&[[0.0, 1.0]]);
        assert_eq!(reconstruction_loss(&x, &x).unwrap(), ReconstructionLoss { signed: -0.0, raw: 0.0 });
        // D = 0.5 for a single sample
        let r = Matrix::from_rows(&[[1.0, 1.0]]);
        let l = reconstruction_loss(&x, &r).unwrap();
        assert_eq!((l.signed, l.raw), (-0.5, 0.5));
        assert_eq!(reconstruction_loss(&Matrix::zeros(0, 2), &Matrix::zeros(0, 2)), Err(MetricError::Empty));
    }

    #[test]
    fn feature_loss_arithmetic() {
        let preds = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(feature_loss(&preds, &[1.0, 0.0]).unwrap(), 1.0);
        let all_r = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]);
        assert_eq!(feature_loss(&all_r, &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(equal_to_r_rate(&preds, &[1.0, 0.0]).unwrap(), 0.5);
    }

    #[test]
    fn overall_loss_weights() {
        assert_eq!(overall_privacy_loss(0.3, &[0.7, 0.9], &[1.0, 0.0, 0.0]).unwrap(), 0.3);
        let third = 1.0 / 3.0;
        let w = [third, third, 1.0 - 2.0 * third];
        let v = overall_privacy_loss(0.3, &[0.6, 0.9], &w).unwrap();
        assert!((v - 0.6).abs() < 1e-12);
        assert!(matches!(overall_privacy_loss(0.3, &[0.6], &[0.5, 0.4]), Err(MetricError::Weights { .. })));
        assert!(check_weights(&[0.5, 0.25, 0.25]).is_ok());
    }

    #[test]
    fn classification_scores() {
        let t = [0, 1, 2, 1];
        assert_eq!(accuracy(&t, &t).unwrap(), 1.0);
        assert_eq!(f1(&t, &t, 1).unwrap(), 1.0);
        // TP = 2, FP = 1, FN = 1
        let truth = [1, 1, 1, 0, 0];
        let pred = [1, 1, 0, 1, 0];
        assert!((f1(&pred, &truth, 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(accuracy(&[], &[]), Err(MetricError::Empty));
    }

    #[test]
    fn overlap_rates() {
        let a = [true, false, true, true];
        let comp: Vec<bool> = a.iter().map(|v| !v).collect();
        assert_eq!(overlap_rate(&a, &a).unwrap(), 1.0);
        assert_eq!(overlap_rate(&a, &comp).unwrap(), 0.0);
        assert_eq!(overlap_rate(&a, &[true, true, true, false]).unwrap(), 0.5);
        assert!(overlap_rate(&a, &a[..3]).is_err());
    }

    #[test]
    fn overlap_probability_reference_points() {
        // Enumerate all 2^4 outcomes of X ~ B(4, 1/2).
        let hits = (0u32..16).filter(|m| m.count_ones() >= 3).count();
        assert_eq!(hits, 5);
        let p = overlap_probability(4, 0.75, TailMethod::Exact).unwrap();
        assert!((p - 5.0 / 16.0).abs() < 1e-12);
        assert!((overlap_probability(1, 1.0, TailMethod::Exact).unwrap() - 0.5).abs() < 1e-15);
        let far = overlap_probability(256, 0.75, TailMethod::Exact).unwrap();
        assert!(far <= 2.449e-16 && far > 2.4e-16, "{far:e}");
        assert!(overlap_probability(8, 0.5, TailMethod::Exact).is_err());
        assert!(overlap_probability(8, 1.01, TailMethod::Exact).is_err());
    }

    #[test]
    fn normal_approximation_tracks_exact_tail() {
        for n in 64u64..=256 {
            let e = overlap_probability(n, 0.75, TailMethod::Exact).unwrap();
            let a = overlap_probability(n, 0.75, TailMethod::NormalApprox).unwrap();
            assert!(a / e < 10.0 && e / a < 10.0, "n={n} exact={e:e} approx={a:e}");
        }
    }

    #[test]
    fn normal_approximation_degrades_deep_in_the_tail() {
        // Without continuity correction the relative error grows with n.
        let e = overlap_probability(1024, 0.75, TailMethod::Exact).unwrap();
        let a = overlap_probability(1024, 0.75, TailMethod::NormalApprox).unwrap();
        assert!(a / e > 10.0);
    }

    #[test]
    fn tabular_accuracy_convention() {
        let groups = vec![
            ColumnGroup { name: "num".into(), range: 0..1, kind: GroupKind::Numeric },
            ColumnGroup { name: "cat".into(), range: 1..4, kind: GroupKind::OneHot },
        ];
        let x = Matrix::from_rows(&[[0.5, 0.0, 1.0, 0.0]]);
        let good = Matrix::from_rows(&[[0.54, 0.1, 0.6, 0.3]]);
        let half = Matrix::from_rows(&[[0.6, 0.1, 0.6, 0.3]]);
        assert_eq!(tabular_reconstruction_accuracy(&x, &good, &groups).unwrap().0, 1.0);
        assert_eq!(tabular_reconstruction_accuracy(&x, &half, &groups).unwrap().0, 0.5);

        let window = groups_within(&groups, 0..2);
        assert_eq!(window[1].range, 1..2);
        let x2 = x.select_cols(0, 2);
        let r2 = Matrix::from_rows(&[[0.5, 0.2]]);
        assert_eq!(tabular_reconstruction_accuracy(&x2, &r2, &window).unwrap().0, 1.0);
    }

    proptest! {
        #[test]
        fn psnr_strictly_decreasing_in_mse(a in 1e-9f64..10.0, b in 1e-9f64..10.0) {
            prop_assume!(a < b && a > 1e-10);
            prop_assert!(psnr_from_mse(a, 1.0) > psnr_from_mse(b, 1.0));
        }

        #[test]
        fn ssim_is_bounded(seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = crate::seed::rng(seed);
            let a: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..1.0)).collect();
            let b: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..1.0)).collect();
            let s = ssim(&a, &b, ImageDims { width: 10, height: 10 }, 1.0).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert_eq!(ssim(&a, &a, ImageDims { width: 10, height: 10 }, 1.0).unwrap(), 1.0);
        }

        #[test]
        fn exact_tail_monotone_in_t(n in 1u64..300, t1 in 0.501f64..1.0, dt in 0.0f64..0.5) {
            let t2 = (t1 + dt).min(1.0);
            let p1 = overlap_probability(n, t1, TailMethod::Exact).unwrap();
            let p2 = overlap_probability(n, t2, TailMethod::Exact).unwrap();
            prop_assert!(p2 <= p1 * (1.0 + 1e-12));
        }
    }
}
