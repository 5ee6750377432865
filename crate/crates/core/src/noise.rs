//! Budgeted adversarial noise on latent representations.
//!
//! Reconstruction defence runs `n` sign-gradient ascent steps of size `ε/n` on
//! the distance between a sample and its substitute-decoder reconstruction,
//! restricted to the dimensions selected by the party's secret mask. Attribute
//! defence takes one signed step toward a fixed target prediction. The two are
//! mixed with convex weights, so the result stays inside the `ε` box.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::metrics::check_weights;
use crate::nn::{Loss, NeuralNet, NnError};
use crate::representation::EncoderHandle;
use crate::seed;

/// Slack allowed on top of `ε` when checking accumulated floating-point steps.
pub const BUDGET_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NoiseError {
    #[error("epsilon must be finite and non-negative, got {0}")]
    Epsilon(f64),
    #[error("iteration count must be at least 1")]
    Iterations,
    #[error("mask length {mask} does not match latent dimension {latent}")]
    MaskLength { mask: usize, latent: usize },
    #[error("mask must have at least one dimension")]
    EmptyMask,
    #[error("overlap rate must lie in [0, 1], got {0}")]
    OverlapRate(f64),
    #[error("weights must be non-negative and sum to 1 (sum = {sum})")]
    Weights { sum: f64 },
    #[error("expected {expected} attribute noise components, got {found}")]
    Components { expected: usize, found: usize },
    #[error("noise vector length {found} does not match {expected}")]
    Length { expected: usize, found: usize },
    #[error("{count} samples but {targets} targets")]
    CountMismatch { count: usize, targets: usize },
    #[error("noise exceeds budget: {max} > {epsilon}")]
    BudgetExceeded { max: f64, epsilon: f64 },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NnError),
}

/// `ε` and the number of steps `n`; the step size `α = ε / n` is derived.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseBudget {
    epsilon: f64,
    iterations: usize,
}

impl NoiseBudget {
    pub const DEFAULT_ITERATIONS: usize = 10;

    pub fn new(epsilon: f64, iterations: usize) -> Result<Self, NoiseError> {
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return Err(NoiseError::Epsilon(epsilon));
        }
        if iterations == 0 {
            return Err(NoiseError::Iterations);
        }
        Ok(Self { epsilon, iterations })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn alpha(&self) -> f64 {
        self.epsilon / self.iterations as f64
    }
}

/// A party's secret binary mask over latent dimensions. Not serializable: masks
/// never leave their owner.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskVector {
    bits: Vec<bool>,
    owner: u32,
    seed: u64,
}

impl MaskVector {
    /// Each bit independently uniform from `seed`.
    pub fn generate(h: usize, owner: u32, seed: u64) -> Result<Self, NoiseError> {
        if h == 0 {
            return Err(NoiseError::EmptyMask);
        }
        let mut rng = seed::rng(seed);
        let bits = (0..h).map(|_| rng.random::<bool>()).collect();
        Ok(Self { bits, owner, seed })
    }

    pub fn from_bits(bits: Vec<bool>, owner: u32) -> Result<Self, NoiseError> {
        if bits.is_empty() {
            return Err(NoiseError::EmptyMask);
        }
        Ok(Self { bits, owner, seed: 0 })
    }

    pub fn ones(h: usize, owner: u32) -> Result<Self, NoiseError> {
        Self::from_bits(vec![true; h], owner)
    }

    pub fn zeros(h: usize, owner: u32) -> Result<Self, NoiseError> {
        Self::from_bits(vec![false; h], owner)
    }

    /// A mask agreeing with `reference` on exactly `round(rate * h)` positions,
    /// chosen uniformly from `seed`.
    pub fn with_overlap(reference: &MaskVector, rate: f64, owner: u32, seed: u64) -> Result<Self, NoiseError> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(NoiseError::OverlapRate(rate));
        }
        let h = reference.len();
        let agree = libm::round(rate * h as f64) as usize;
        let mut rng = seed::rng(seed);
        let mut bits: Vec<bool> = reference.bits.iter().map(|b| !b).collect();
        for i in sample(&mut rng, h, agree).iter() {
            bits[i] = reference.bits[i];
        }
        Ok(Self { bits, owner, seed })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn owner(&self) -> u32 {
        self.owner
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    fn check(&self, h: usize) -> Result<(), NoiseError> {
        if self.len() != h {
            return Err(NoiseError::MaskLength {
                mask: self.len(),
                latent: h,
            });
        }
        Ok(())
    }
}

/// Convex weights `(λ_0, λ_1, ..., λ_M)`: reconstruction first, then one per
/// private attribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LambdaWeights(Vec<f64>);

impl LambdaWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self, NoiseError> {
        check_weights(&weights).map_err(|_| NoiseError::Weights {
            sum: weights.iter().sum(),
        })?;
        Ok(Self(weights))
    }

    pub fn reconstruction_only() -> Self {
        Self(vec![1.0])
    }

    /// `λ_0 = 1/2`, `λ_k = 1/(2M)`; reconstruction only when `M = 0`.
    pub fn recommended(attributes: usize) -> Self {
        if attributes == 0 {
            return Self::reconstruction_only();
        }
        let each = 0.5 / attributes as f64;
        let mut w = vec![each; attributes + 1];
        w[0] = 1.0 - each * attributes as f64;
        Self(w)
    }

    pub fn reconstruction(&self) -> f64 {
        self.0[0]
    }

    pub fn attribute(&self, k: usize) -> f64 {
        self.0[k + 1]
    }

    pub fn attributes(&self) -> usize {
        self.0.len() - 1
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for LambdaWeights {
    type Error = NoiseError;

    fn try_from(v: Vec<f64>) -> Result<Self, NoiseError> {
        Self::new(v)
    }
}

impl From<LambdaWeights> for Vec<f64> {
    fn from(w: LambdaWeights) -> Self {
        w.0
    }
}

/// `ẑ = z + δ` together with its source and budget.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialRepresentation {
    pub z_hat: Vec<f64>,
    pub z: Vec<f64>,
    pub budget: NoiseBudget,
}

impl AdversarialRepresentation {
    pub fn noise(&self) -> Vec<f64> {
        self.z_hat.iter().zip(&self.z).map(|(a, b)| a - b).collect()
    }

    pub fn max_abs_noise(&self) -> f64 {
        max_abs_diff(&self.z_hat, &self.z)
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest per-coordinate deviation between two equally shaped batches.
pub fn max_abs_diff_batch(a: &Matrix, b: &Matrix) -> f64 {
    max_abs_diff(a.as_slice(), b.as_slice())
}

/// Errors unless every coordinate of `z_hat` lies within `ε + BUDGET_SLACK` of `z`.
pub fn check_budget(z: &Matrix, z_hat: &Matrix, epsilon: f64) -> Result<(), NoiseError> {
    let max = max_abs_diff_batch(z, z_hat);
    if max.is_nan() || max > epsilon + BUDGET_SLACK {
        return Err(NoiseError::BudgetExceeded { max, epsilon });
    }
    Ok(())
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Batched I-FGSM on the squared reconstruction error of `sdec`, restricted to
/// `mask` (all dimensions when `None`). Row `i` of `x` is the original sample
/// for row `i` of `z`.
pub fn masked_ifgsm_batch(
    z: &Matrix,
    x: &Matrix,
    sdec: &NeuralNet,
    mask: Option<&MaskVector>,
    budget: NoiseBudget,
) -> Result<Matrix, NoiseError> {
    if z.rows() != x.rows() {
        return Err(NoiseError::CountMismatch {
            count: z.rows(),
            targets: x.rows(),
        });
    }
    if let Some(m) = mask {
        m.check(z.cols())?;
    }
    let mut z_hat = z.clone();
    if budget.epsilon() == 0.0 || z.is_empty() {
        return Ok(z_hat);
    }
    let alpha = budget.alpha();
    for _ in 0..budget.iterations() {
        let grad = sdec.input_gradient_batch(&z_hat, Loss::SquaredError, x)?;
        for (zr, gr) in z_hat.as_mut_slice().chunks_mut(z.cols()).zip(grad.iter_rows()) {
            for (j, (zj, g)) in zr.iter_mut().zip(gr).enumerate() {
                if mask.is_some_and(|m| !m.bits[j]) {
                    continue;
                }
                let s = sign(*g);
                if s != 0.0 {
                    *zj += alpha * s;
                }
            }
        }
    }
    Ok(z_hat)
}

pub fn masked_ifgsm(
    z: &[f64],
    x: &[f64],
    sdec: &NeuralNet,
    mask: &MaskVector,
    budget: NoiseBudget,
) -> Result<AdversarialRepresentation, NoiseError> {
    single(z, x, sdec, Some(mask), budget)
}

pub fn ifgsm(z: &[f64], x: &[f64], sdec: &NeuralNet, budget: NoiseBudget) -> Result<AdversarialRepresentation, NoiseError> {
    single(z, x, sdec, None, budget)
}

fn single(
    z: &[f64],
    x: &[f64],
    sdec: &NeuralNet,
    mask: Option<&MaskVector>,
    budget: NoiseBudget,
) -> Result<AdversarialRepresentation, NoiseError> {
    let out = masked_ifgsm_batch(&Matrix::row_vector(z), &Matrix::row_vector(x), sdec, mask, budget)?;
    Ok(AdversarialRepresentation {
        z_hat: out.into_vec(),
        z: z.to_vec(),
        budget,
    })
}

/// One signed step of size `ε` that descends the squared distance between
/// `extractor(z)` and the fixed target `r`: `δ = −ε · sign(∇_z D(r, F(z)))`.
/// Masked dimensions (when a mask is given) get 0.
pub fn attribute_noise_batch(
    z: &Matrix,
    extractor: &NeuralNet,
    r: &[f64],
    epsilon: f64,
    mask: Option<&MaskVector>,
) -> Result<Matrix, NoiseError> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(NoiseError::Epsilon(epsilon));
    }
    if let Some(m) = mask {
        m.check(z.cols())?;
    }
    let mut delta = Matrix::zeros(z.rows(), z.cols());
    if epsilon == 0.0 || z.is_empty() {
        return Ok(delta);
    }
    let mut targets = Matrix::zeros(z.rows(), r.len());
    for i in 0..z.rows() {
        targets.row_mut(i).copy_from_slice(r);
    }
    let grad = extractor.input_gradient_batch(z, Loss::SquaredError, &targets)?;
    for (d, g) in delta.as_mut_slice().chunks_mut(z.cols()).zip(grad.iter_rows()) {
        for (j, (dj, gj)) in d.iter_mut().zip(g).enumerate() {
            if mask.is_some_and(|m| !m.bits[j]) {
                continue;
            }
            let s = sign(*gj);
            if s != 0.0 {
                *dj = -epsilon * s;
            }
        }
    }
    Ok(delta)
}

pub fn attribute_noise(
    z: &[f64],
    extractor: &NeuralNet,
    r: &[f64],
    epsilon: f64,
    mask: Option<&MaskVector>,
) -> Result<Vec<f64>, NoiseError> {
    Ok(attribute_noise_batch(&Matrix::row_vector(z), extractor, r, epsilon, mask)?.into_vec())
}

/// `δ = λ_0 δ_R + Σ λ_k δ_{A_k}`.
pub fn combine_noise(delta_r: &[f64], delta_attrs: &[&[f64]], weights: &LambdaWeights) -> Result<Vec<f64>, NoiseError> {
    if delta_attrs.len() != weights.attributes() {
        return Err(NoiseError::Components {
            expected: weights.attributes(),
            found: delta_attrs.len(),
        });
    }
    if let Some(bad) = delta_attrs.iter().find(|d| d.len() != delta_r.len()) {
        return Err(NoiseError::Length {
            expected: delta_r.len(),
            found: bad.len(),
        });
    }
    let mut out: Vec<f64> = delta_r.iter().map(|d| weights.reconstruction() * d).collect();
    for (k, d) in delta_attrs.iter().enumerate() {
        let w = weights.attribute(k);
        for (o, v) in out.iter_mut().zip(d.iter()) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Uniform noise in `[−ε, ε]` per dimension (the random-noise baseline).
pub fn uniform_noise_batch(rows: usize, cols: usize, epsilon: f64, seed: u64) -> Result<Matrix, NoiseError> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(NoiseError::Epsilon(epsilon));
    }
    let mut rng = seed::rng(seed);
    let data = (0..rows * cols)
        .map(|_| if epsilon == 0.0 { 0.0 } else { rng.random_range(-epsilon..=epsilon) })
        .collect();
    Ok(Matrix::from_vec(rows, cols, data))
}

/// How a party perturbs its representations before sharing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseStrategy {
    #[default]
    Adversarial,
    Uniform,
    None,
}

/// An attribute extractor together with its fixed target vector `r_k`.
#[derive(Clone, Debug)]
pub struct AttributeDefense<'a> {
    pub extractor: &'a NeuralNet,
    pub target: &'a [f64],
}

/// Everything a party needs to perturb its own representations.
#[derive(Clone, Debug)]
pub struct SharingKit<'a> {
    pub sdec: &'a NeuralNet,
    pub defenses: &'a [AttributeDefense<'a>],
    pub mask: &'a MaskVector,
    pub budget: NoiseBudget,
    pub weights: &'a LambdaWeights,
    /// Apply the mask to attribute noise as well as reconstruction noise.
    pub mask_attributes: bool,
    pub strategy: NoiseStrategy,
    /// Seed of the uniform baseline stream.
    pub noise_seed: u64,
}

/// Perturbs already-encoded representations `z` of samples `x`.
pub fn perturb(z: &Matrix, x: &Matrix, kit: &SharingKit<'_>) -> Result<Matrix, NoiseError> {
    let eps = kit.budget.epsilon();
    let z_hat = match kit.strategy {
        NoiseStrategy::None => z.clone(),
        NoiseStrategy::Uniform => {
            let noise = uniform_noise_batch(z.rows(), z.cols(), eps, kit.noise_seed)?;
            let mut out = z.clone();
            out.as_mut_slice().iter_mut().zip(noise.as_slice()).for_each(|(a, b)| *a += b);
            out
        }
        NoiseStrategy::Adversarial => {
            if kit.defenses.len() != kit.weights.attributes() {
                return Err(NoiseError::Components {
                    expected: kit.weights.attributes(),
                    found: kit.defenses.len(),
                });
            }
            let rec = masked_ifgsm_batch(z, x, kit.sdec, Some(kit.mask), kit.budget)?;
            if kit.defenses.is_empty() {
                rec
            } else {
                let attr_mask = kit.mask_attributes.then_some(kit.mask);
                let attr: Vec<Matrix> = kit
                    .defenses
                    .iter()
                    .map(|d| attribute_noise_batch(z, d.extractor, d.target, eps, attr_mask))
                    .collect::<Result<_, _>>()?;
                let mut out = z.clone();
                for i in 0..z.rows() {
                    let dr: Vec<f64> = rec.row(i).iter().zip(z.row(i)).map(|(a, b)| a - b).collect();
                    let da: Vec<&[f64]> = attr.iter().map(|m| m.row(i)).collect();
                    let delta = combine_noise(&dr, &da, kit.weights)?;
                    for (a, d) in out.row_mut(i).iter_mut().zip(&delta) {
                        if *d != 0.0 {
                            *a += d;
                        }
                    }
                }
                out
            }
        }
    };
    check_budget(z, &z_hat, eps)?;
    Ok(z_hat)
}

/// Encodes a party's samples through the published encoder and perturbs them.
pub fn share_representations(x: &Matrix, handle: &EncoderHandle, kit: &SharingKit<'_>) -> Result<Vec<AdversarialRepresentation>, NoiseError> {
    let z = handle.encode_batch(x)?;
    let z_hat = perturb(&z, x, kit)?;
    Ok(z
        .iter_rows()
        .zip(z_hat.iter_rows())
        .map(|(a, b)| AdversarialRepresentation {
            z_hat: b.to_vec(),
            z: a.to_vec(),
            budget: kit.budget,
        })
        .collect())
}

/// How configured `ε` values map to latent-space units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum EpsilonScale {
    /// `ε` is used as is.
    #[default]
    Absolute,
    /// One unit of `ε` is `per_unit` times the mean per-dimension latent range
    /// measured on reference latents (`per_unit = 0.01` reads `ε` as a percentage).
    Range { per_unit: f64 },
}

impl EpsilonScale {
    /// Converts a configured `ε` into latent units given reference latents.
    pub fn resolve(self, epsilon: f64, reference: &Matrix) -> f64 {
        match self {
            EpsilonScale::Absolute => epsilon,
            EpsilonScale::Range { .. } => self.apply(epsilon, mean_range(reference)),
        }
    }

    /// Converts a configured `ε` given an already measured mean latent range.
    pub fn apply(self, epsilon: f64, range: f64) -> f64 {
        match self {
            EpsilonScale::Absolute => epsilon,
            EpsilonScale::Range { per_unit } => epsilon * per_unit * range,
        }
    }
}

/// Mean over columns of `max - min`.
pub fn mean_range(m: &Matrix) -> f64 {
    let ranges = m.column_ranges();
    if ranges.is_empty() {
        return 0.0;
    }
    ranges.iter().map(|(lo, hi)| hi - lo).sum::<f64>() / ranges.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{chain, Activation, LayerSpec, Role};
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn identity(dim: usize) -> NeuralNet {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        NeuralNet::from_parameters(
            vec![LayerSpec::new(dim, dim, Activation::Identity)],
            vec![(w, vec![0.0; dim])],
            Role::Decoder,
            0,
        )
        .unwrap()
    }

    #[test]
    fn budget_validation() {
        assert!(NoiseBudget::new(-1.0, 10).is_err());
        assert!(NoiseBudget::new(f64::NAN, 10).is_err());
        assert!(NoiseBudget::new(1.0, 0).is_err());
        let b = NoiseBudget::new(50.0, 10).unwrap();
        assert_eq!(b.alpha(), 5.0);
        assert_eq!(b.alpha() * b.iterations() as f64, b.epsilon());
    }

    #[test]
    fn one_dimensional_closed_form() {
        // D = (z - x)^2 has gradient 2(z - x) > 0 along the whole path.
        let b = NoiseBudget::new(0.5, 10).unwrap();
        let out = ifgsm(&[0.3], &[0.1], &identity(1), b).unwrap();
        assert!((out.z_hat[0] - 0.8).abs() < 1e-12);
        let zero = ifgsm(&[0.3], &[0.1], &identity(1), NoiseBudget::new(0.0, 10).unwrap()).unwrap();
        assert_eq!(zero.z_hat, vec![0.3]);
    }

    #[test]
    fn two_dimensional_masked_closed_form() {
        let b = NoiseBudget::new(0.5, 10).unwrap();
        let m = MaskVector::from_bits(vec![true, false], 0).unwrap();
        let out = masked_ifgsm(&[0.3, 0.3], &[0.1, 0.1], &identity(2), &m, b).unwrap();
        assert!((out.z_hat[0] - 0.8).abs() < 1e-12);
        assert_eq!(out.z_hat[1].to_bits(), 0.3f64.to_bits());

        let none = MaskVector::zeros(2, 0).unwrap();
        let out = masked_ifgsm(&[0.3, 0.3], &[0.1, 0.1], &identity(2), &none, b).unwrap();
        assert_eq!(out.z_hat, vec![0.3, 0.3]);
        assert!(matches!(
            masked_ifgsm(&[0.3], &[0.1], &identity(1), &m, b),
            Err(NoiseError::MaskLength { .. })
        ));
    }

    #[test]
    fn attribute_noise_pushes_toward_target() {
        let d = attribute_noise(&[0.9, 0.1], &identity(2), &[1.0, 0.0], 0.2, None).unwrap();
        assert_eq!(d, vec![0.2, -0.2]);
        let zero = attribute_noise(&[0.9, 0.1], &identity(2), &[1.0, 0.0], 0.0, None).unwrap();
        assert_eq!(zero, vec![0.0, 0.0]);
        let m = MaskVector::from_bits(vec![false, true], 0).unwrap();
        assert_eq!(
            attribute_noise(&[0.9, 0.1], &identity(2), &[1.0, 0.0], 0.2, Some(&m)).unwrap(),
            vec![0.0, -0.2]
        );
    }

    #[test]
    fn combination_arithmetic() {
        let eps = 0.4;
        let w = LambdaWeights::new(vec![0.5, 0.5]).unwrap();
        let d = combine_noise(&[eps, -eps], &[&[-eps, -eps]], &w).unwrap();
        assert_eq!(d, vec![0.0, -eps]);
        let only = LambdaWeights::reconstruction_only();
        assert_eq!(combine_noise(&[eps, -eps], &[], &only).unwrap(), vec![eps, -eps]);
        assert!(LambdaWeights::new(vec![0.5, 0.4]).is_err());
        assert!(LambdaWeights::new(vec![1.5, -0.5]).is_err());
        assert_eq!(LambdaWeights::recommended(2).as_slice(), &[0.5, 0.25, 0.25]);
        assert!(combine_noise(&[eps], &[&[eps]], &only).is_err());
    }

    #[test]
    fn lambda_serde_validates() {
        let w: LambdaWeights = serde_json::from_str("[0.5, 0.25, 0.25]").unwrap();
        assert_eq!(w.attributes(), 2);
        assert!(serde_json::from_str::<LambdaWeights>("[0.5, 0.25]").is_err());
    }

    #[test]
    fn masks_are_seeded_and_balanced() {
        assert_eq!(MaskVector::generate(16, 0, 9).unwrap(), MaskVector::generate(16, 0, 9).unwrap());
        // P[two h = 4 masks differ] = 15/16; 2000 pairs give sd ~ 0.0054.
        let pairs = 2000;
        let differ = (0..pairs)
            .filter(|&s| {
                MaskVector::generate(4, 0, 2 * s).unwrap().bits() != MaskVector::generate(4, 0, 2 * s + 1).unwrap().bits()
            })
            .count();
        let p = differ as f64 / pairs as f64;
        assert!((p - 15.0 / 16.0).abs() < 4.0 * 0.0054, "{p}");
        // popcount of h = 256 is B(256, 1/2): mean 128, sd 8.
        for s in 0..1000 {
            let c = MaskVector::generate(256, 0, s).unwrap().count_ones();
            assert!((96..=160).contains(&c), "seed {s}: {c}");
        }
        assert!(MaskVector::generate(0, 0, 1).is_err());
    }

    #[test]
    fn controlled_overlap_is_exact() {
        let r = MaskVector::generate(64, 0, 1).unwrap();
        for rate in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let m = MaskVector::with_overlap(&r, rate, 1, 5).unwrap();
            let o = crate::metrics::overlap_rate(r.bits(), m.bits()).unwrap();
            assert_eq!(o, rate);
        }
        assert!(MaskVector::with_overlap(&r, 1.5, 1, 5).is_err());
    }

    #[test]
    fn uniform_baseline_stays_in_box() {
        let n = uniform_noise_batch(50, 8, 0.3, 4).unwrap();
        assert!(n.as_slice().iter().all(|v| v.abs() <= 0.3));
        assert_eq!(n, uniform_noise_batch(50, 8, 0.3, 4).unwrap());
        assert!(uniform_noise_batch(2, 2, 0.0, 4).unwrap().as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn relative_epsilon() {
        let z = Matrix::from_rows(&[[0.0, 10.0], [2.0, 14.0]]);
        assert_eq!(mean_range(&z), 3.0);
        assert_eq!(EpsilonScale::Range { per_unit: 0.01 }.resolve(50.0, &z), 1.5);
        assert_eq!(EpsilonScale::Absolute.resolve(50.0, &z), 50.0);
    }

    fn random_net(seed: u64, h: usize, d: usize, last: Activation) -> NeuralNet {
        NeuralNet::new(chain(&[h, 7, d], Activation::Tanh, last), Role::Decoder, seed).unwrap()
    }

    fn random_matrix(rows: usize, cols: usize, scale: f64, seed: u64) -> Matrix {
        let mut rng = seed::rng(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
    }

    #[test]
    fn ascent_on_generating_decoder() {
        // Sign steps can overshoot locally; require ascent on >= 95% of cases.
        let mut ok = 0;
        let total = 400;
        for s in 0..total {
            let dec = random_net(s, 4, 6, Activation::Sigmoid);
            let z = random_matrix(1, 4, 1.0, s + 1000);
            let x = random_matrix(1, 6, 1.0, s + 2000);
            let b = NoiseBudget::new(0.3, 10).unwrap();
            let zh = masked_ifgsm_batch(&z, &x, &dec, None, b).unwrap();
            let before = dec.mean_loss(&z, &x, Loss::SquaredError).unwrap();
            let after = dec.mean_loss(&zh, &x, Loss::SquaredError).unwrap();
            if after >= before - 1e-9 {
                ok += 1;
            }
        }
        assert!(ok * 100 >= total * 95, "{ok}/{total}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn budget_and_mask_fixpoint(seed in any::<u64>(), eps in 0.0f64..100.0, n in 1usize..12, h in 1usize..9) {
            let dec = random_net(seed, h, 5, Activation::Sigmoid);
            let z = random_matrix(3, h, 50.0, seed ^ 1);
            let x = random_matrix(3, 5, 1.0, seed ^ 2);
            let mask = MaskVector::generate(h, 0, seed ^ 3).unwrap();
            let b = NoiseBudget::new(eps, n).unwrap();
            let zh = masked_ifgsm_batch(&z, &x, &dec, Some(&mask), b).unwrap();
            prop_assert!(max_abs_diff_batch(&z, &zh) <= eps + BUDGET_SLACK);
            for i in 0..3 {
                for j in 0..h {
                    if !mask.bits()[j] {
                        prop_assert_eq!(z.row(i)[j].to_bits(), zh.row(i)[j].to_bits());
                    }
                }
            }
        }

        #[test]
        fn all_ones_mask_equals_unmasked(seed in any::<u64>(), eps in 0.0f64..5.0) {
            let dec = random_net(seed, 4, 5, Activation::Identity);
            let z = random_matrix(2, 4, 1.0, seed ^ 1);
            let x = random_matrix(2, 5, 1.0, seed ^ 2);
            let b = NoiseBudget::new(eps, 10).unwrap();
            let a = masked_ifgsm_batch(&z, &x, &dec, Some(&MaskVector::ones(4, 0).unwrap()), b).unwrap();
            let u = masked_ifgsm_batch(&z, &x, &dec, None, b).unwrap();
            prop_assert_eq!(a, u);
        }

        #[test]
        fn single_step_moves_by_alpha(seed in any::<u64>(), eps in 0.01f64..5.0) {
            let dec = random_net(seed, 4, 5, Activation::Sigmoid);
            let z = random_matrix(1, 4, 1.0, seed ^ 1);
            let x = random_matrix(1, 5, 1.0, seed ^ 2);
            let b = NoiseBudget::new(eps, 10).unwrap();
            let one = NoiseBudget::new(b.alpha(), 1).unwrap();
            let g = dec.input_gradient_batch(&z, Loss::SquaredError, &x).unwrap();
            let zh = masked_ifgsm_batch(&z, &x, &dec, None, one).unwrap();
            for j in 0..4 {
                let moved = (zh.row(0)[j] - z.row(0)[j]).abs();
                if g.row(0)[j] != 0.0 {
                    prop_assert!((moved - b.alpha()).abs() <= 1e-12 * (1.0 + z.row(0)[j].abs()));
                } else {
                    prop_assert_eq!(moved, 0.0);
                }
            }
        }

        #[test]
        fn mixed_noise_within_budget(seed in any::<u64>(), eps in 0.0f64..10.0, l0 in 0.0f64..1.0) {
            let h = 6;
            let dec = random_net(seed, h, 5, Activation::Sigmoid);
            let f1 = NeuralNet::new(chain(&[h, 2], Activation::Relu, Activation::Softmax), Role::AttributeExtractor, seed ^ 9).unwrap();
            let f2 = NeuralNet::new(chain(&[h, 3, 2], Activation::Relu, Activation::Softmax), Role::AttributeExtractor, seed ^ 8).unwrap();
            let r = [1.0, 0.0];
            let defenses = [
                AttributeDefense { extractor: &f1, target: &r },
                AttributeDefense { extractor: &f2, target: &r },
            ];
            let rest = (1.0 - l0) / 2.0;
            let w = LambdaWeights::new(vec![1.0 - 2.0 * rest, rest, rest]).unwrap();
            let mask = MaskVector::generate(h, 0, seed).unwrap();
            let kit = SharingKit {
                sdec: &dec,
                defenses: &defenses,
                mask: &mask,
                budget: NoiseBudget::new(eps, 10).unwrap(),
                weights: &w,
                mask_attributes: true,
                strategy: NoiseStrategy::Adversarial,
                noise_seed: 0,
            };
            let z = random_matrix(4, h, 3.0, seed ^ 1);
            let x = random_matrix(4, 5, 1.0, seed ^ 2);
            let zh = perturb(&z, &x, &kit).unwrap();
            prop_assert!(max_abs_diff_batch(&z, &zh) <= eps + BUDGET_SLACK);
            for i in 0..4 {
                for j in 0..h {
                    if !mask.bits()[j] {
                        prop_assert_eq!(z.row(i)[j].to_bits(), zh.row(i)[j].to_bits());
                    }
                }
            }
        }

        #[test]
        fn alpha_times_n_recovers_epsilon(eps in 0.0f64..1e6, n in 1usize..1000) {
            let b = NoiseBudget::new(eps, n).unwrap();
            prop_assert!((b.alpha() * n as f64 - eps).abs() <= eps * 4.0 * f64::EPSILON);
        }
    }
}
