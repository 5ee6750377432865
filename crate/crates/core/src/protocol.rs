//! Multi-party simulation: encoder publishing, perturbed data sharing and
//! collaborative learning, for horizontally and vertically partitioned data.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{
    adversarial_training_attack, fit_classifier, mask_bruteforce_attack, run_attribute_attack, run_reconstruction_attack, train_attribute_extractor,
    train_substitute_decoder, AttackError, AttackKind, AttackReport, AttackerConfig, MaskCandidates, MaskSearchResult, Probe,
};
use crate::data::{one_hot_matrix, partition, DataError, Dataset, PartitionPlan};
use crate::linalg::Matrix;
use crate::metrics::{self, groups_within, ColumnGroup, ImageDims, MetricError};
use crate::nn::{Activation, NeuralNet, NnError, Role, TrainConfig};
use crate::noise::{
    check_budget, masked_ifgsm_batch, mean_range, perturb, AttributeDefense, EpsilonScale, LambdaWeights, MaskVector,
    NoiseBudget, NoiseError, NoiseStrategy, SharingKit,
};
use crate::representation::{train_autoencoder, Autoencoder, AutoencoderArch, EncoderHandle, RepresentationError};
use crate::seed::{self, stream};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProtocolError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("sample IDs are not aligned: {0}")]
    Misaligned(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NnError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Representation(#[from] RepresentationError),
}

fn config_err<T>(msg: impl Into<String>) -> Result<T, ProtocolError> {
    Err(ProtocolError::Config(msg.into()))
}

/// Hidden widths plus a training schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderConfig {
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub train: TrainConfig,
    #[serde(default = "sigmoid")]
    pub output_activation: Activation,
}

fn sigmoid() -> Activation {
    Activation::Sigmoid
}

impl AutoencoderConfig {
    fn arch(&self, input_dim: usize) -> AutoencoderArch {
        AutoencoderArch::new(input_dim, &self.hidden, self.latent_dim).with_output(self.output_activation)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initiator {
    #[default]
    First,
    LargestData,
    Index(usize),
}

/// How the sample pool is split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionConfig {
    /// `parties` parties with `per_party` samples each; `test_size` held-out
    /// samples are spread round-robin over the parties for evaluation.
    Horizontal {
        parties: usize,
        per_party: usize,
        test_size: usize,
    },
    /// Columns split as evenly as possible into `blocks` owners; every value in
    /// `participants` is one run using the first K owners. Party 0 holds labels.
    Vertical {
        blocks: usize,
        participants: Vec<usize>,
        train_size: usize,
        test_size: usize,
        /// Disjoint samples available to the attacker (its own partial inputs).
        attacker_size: usize,
    },
}

/// Attacks run against the victim at every `ε`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackerSpec {
    pub party: usize,
    pub victim: usize,
    pub decoder: ModelConfig,
    #[serde(default)]
    pub extractor: Option<ModelConfig>,
    #[serde(default = "default_attacks")]
    pub attacks: Vec<AttackKind>,
}

fn default_attacks() -> Vec<AttackKind> {
    vec![AttackKind::Reconstruction, AttackKind::AdversarialTraining]
}

/// Attacker masks with a controlled overlap against the victim's mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlapConfig {
    pub epsilon: f64,
    pub rates: Vec<f64>,
}

/// A downstream task defined by relabelling the pool's classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    /// `map[c]` is the task class of original class `c`.
    pub map: Vec<usize>,
}

fn default_iterations() -> usize {
    NoiseBudget::DEFAULT_ITERATIONS
}

fn default_target() -> Vec<f64> {
    vec![1.0, 0.0]
}

fn default_strategies() -> Vec<NoiseStrategy> {
    vec![NoiseStrategy::Adversarial]
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub partition: PartitionConfig,
    pub epsilons: Vec<f64>,
    #[serde(default)]
    pub epsilon_scale: EpsilonScale,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// `(λ_0, λ_1..λ_M)`; defaults to `λ_0 = 1/2, λ_k = 1/(2M)`.
    #[serde(default)]
    pub lambda: Option<LambdaWeights>,
    #[serde(default = "default_target")]
    pub attribute_target: Vec<f64>,
    pub autoencoder: AutoencoderConfig,
    /// Each party's local substitute decoder used to craft noise.
    pub substitute: ModelConfig,
    /// Each party's local attribute extractors used to craft attribute noise.
    #[serde(default)]
    pub extractor: Option<ModelConfig>,
    pub classifier: ModelConfig,
    #[serde(default)]
    pub attacker: Option<AttackerSpec>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<NoiseStrategy>,
    #[serde(default = "yes")]
    pub mask_attributes: bool,
    #[serde(default)]
    pub initiator: Initiator,
    #[serde(default)]
    pub image: Option<ImageDims>,
    #[serde(default)]
    pub overlap: Option<OverlapConfig>,
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
    /// `ε` of the shared set used by the task suite (default: the first grid point).
    #[serde(default)]
    pub task_epsilon: Option<f64>,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.epsilons.is_empty() {
            return config_err("epsilon grid is empty");
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
            return config_err(format!("epsilon {e} must be finite and non-negative"));
        }
        if self.iterations == 0 {
            return config_err("iterations must be at least 1");
        }
        if self.strategies.is_empty() {
            return config_err("no noise strategy selected");
        }
        match &self.partition {
            PartitionConfig::Horizontal {
                parties, per_party, ..
            } => {
                if *parties == 0 || *per_party == 0 {
                    return config_err("horizontal partition needs at least one party with one sample");
                }
                if let Initiator::Index(i) = self.initiator {
                    if i >= *parties {
                        return config_err(format!("initiator {i} is not one of {parties} parties"));
                    }
                }
                if let Some(a) = &self.attacker {
                    if a.party >= *parties || a.victim >= *parties {
                        return config_err(format!(
                            "attacker {} or victim {} is not one of {parties} parties",
                            a.party, a.victim
                        ));
                    }
                }
            }
            PartitionConfig::Vertical {
                blocks,
                participants,
                train_size,
                ..
            } => {
                if *blocks == 0 || *train_size == 0 {
                    return config_err("vertical partition needs at least one owner and one sample");
                }
                if participants.is_empty() || participants.iter().any(|k| *k == 0 || k > blocks) {
                    return config_err(format!("participant counts must lie in 1..={blocks}"));
                }
            }
        }
        for t in &self.tasks {
            if t.map.is_empty() {
                return config_err(format!("task {} has an empty class map", t.name));
            }
        }
        if let Some(o) = &self.overlap {
            if o.rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
                return config_err("overlap rates must lie in [0, 1]");
            }
        }
        Ok(())
    }

    fn weights(&self, attributes: usize) -> Result<LambdaWeights, ProtocolError> {
        match &self.lambda {
            None => Ok(LambdaWeights::recommended(attributes)),
            Some(w) if w.attributes() == attributes => Ok(w.clone()),
            Some(w) => config_err(format!(
                "lambda has {} attribute weights but the data has {attributes} private attributes",
                w.attributes()
            )),
        }
    }

    fn party_seed(&self, party: usize, component: u64) -> u64 {
        seed::derive2(self.seed, stream::PARTY_BASE + party as u64, component)
    }
}

/// One simulated participant. The mask and local models never leave it.
#[derive(Clone, Debug)]
pub struct Party {
    pub id: usize,
    pub data: Dataset,
    mask: MaskVector,
    sdec: NeuralNet,
    extractors: Vec<NeuralNet>,
    pub initiator: bool,
}

impl Party {
    pub fn mask(&self) -> &MaskVector {
        &self.mask
    }

    pub fn substitute_decoder(&self) -> &NeuralNet {
        &self.sdec
    }

    pub fn extractors(&self) -> &[NeuralNet] {
        &self.extractors
    }
}

fn pick_initiator(choice: Initiator, sizes: &[usize]) -> usize {
    match choice {
        Initiator::First => 0,
        Initiator::Index(i) => i,
        Initiator::LargestData => {
            let mut best = 0;
            for (i, &s) in sizes.iter().enumerate() {
                if s > sizes[best] {
                    best = i;
                }
            }
            best
        }
    }
}

/// Trains the initiator's autoencoder and publishes the encoder.
pub fn run_encoder_publishing(
    cfg: &ScenarioConfig,
    parties: &[Dataset],
) -> Result<(EncoderHandle, Autoencoder, usize), ProtocolError> {
    if parties.is_empty() {
        return config_err("no parties");
    }
    let sizes: Vec<usize> = parties.iter().map(Dataset::len).collect();
    let init = pick_initiator(cfg.initiator, &sizes);
    let data = parties
        .get(init)
        .ok_or_else(|| ProtocolError::Config(format!("initiator {init} does not exist")))?;
    let arch = cfg.autoencoder.arch(data.feature_dim());
    let ae = train_autoencoder(
        data.samples(),
        &arch,
        &cfg.autoencoder.train.clone().with_seed(seed::derive(cfg.seed, stream::SHUFFLE)),
        seed::derive(cfg.seed, stream::AUTOENCODER),
    )?;
    Ok((ae.publish(), ae, init))
}

/// Representations shared at one `ε`, party by party, plus the held-out set
/// perturbed the same way.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedPool {
    pub z_hat: Matrix,
    pub labels: Matrix,
    /// Rows of `z_hat` contributed by each party.
    pub party_rows: Vec<Range<usize>>,
    pub test_z_hat: Matrix,
    pub test_labels: Matrix,
    pub epsilon: f64,
    pub strategy: NoiseStrategy,
    /// Largest `|ẑ − z|` observed while assembling the pool.
    pub max_noise: f64,
}

impl SharedPool {
    /// SHA-256 over the shape and bit patterns of the shared training set.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for m in [&self.z_hat, &self.labels] {
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.as_slice() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn len(&self) -> usize {
        self.z_hat.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.z_hat.rows() == 0
    }

    /// Shared records in pool order: `(party, sample index within party, ẑ, label)`.
    pub fn records(&self) -> impl Iterator<Item = (usize, usize, &[f64], &[f64])> + '_ {
        self.party_rows.iter().enumerate().flat_map(move |(p, r)| {
            r.clone()
                .enumerate()
                .map(move |(j, i)| (p, j, self.z_hat.row(i), self.labels.row(i)))
        })
    }
}

/// The horizontal scenario after publishing: parties with their local models.
#[derive(Clone, Debug)]
pub struct HorizontalWorld {
    pub cfg: ScenarioConfig,
    pub parties: Vec<Party>,
    pub handle: EncoderHandle,
    /// Held-out samples and the party each one is assigned to.
    pub test: Dataset,
    pub test_owner: Vec<usize>,
    /// Mean per-dimension latent range on the initiator's data.
    pub latent_range: f64,
    initiator_decoder: NeuralNet,
}

impl HorizontalWorld {
    /// Partitions `train`, publishes the encoder and trains every party's local
    /// substitute decoder and attribute extractors.
    pub fn build(cfg: &ScenarioConfig, train: &Dataset, test: &Dataset) -> Result<Self, ProtocolError> {
        cfg.validate()?;
        let PartitionConfig::Horizontal {
            parties,
            per_party,
            test_size,
        } = cfg.partition
        else {
            return config_err("horizontal world needs a horizontal partition");
        };
        if train.labels().is_none() || test.labels().is_none() {
            return config_err("horizontal scenario needs task labels");
        }
        if test_size > test.len() {
            return config_err(format!("test_size {test_size} exceeds {} held-out samples", test.len()));
        }
        let plan = PartitionPlan::horizontal(parties, per_party, Some(seed::derive(cfg.seed, stream::PARTITION)));
        let locals = partition(train, &plan)?;
        let (handle, ae, init) = run_encoder_publishing(cfg, &locals)?;
        let attributes = train.private_attrs().len();
        let weights = cfg.weights(attributes)?;

        let mut out = Vec::with_capacity(parties);
        for (id, data) in locals.into_iter().enumerate() {
            let sub = AttackerConfig {
                hidden: cfg.substitute.hidden.clone(),
                train: cfg.substitute.train.clone().with_seed(cfg.party_seed(id, stream::SHUFFLE)),
                seed: cfg.party_seed(id, stream::SUBSTITUTE),
            };
            let sdec = train_substitute_decoder(data.samples(), &handle, &sub)?;
            let mut extractors = Vec::new();
            for k in 0..attributes {
                if weights.attribute(k) == 0.0 {
                    continue;
                }
                let Some(ex) = &cfg.extractor else {
                    return config_err("attribute weights are non-zero but no extractor is configured");
                };
                let ecfg = AttackerConfig {
                    hidden: ex.hidden.clone(),
                    train: ex.train.clone().with_seed(cfg.party_seed(id, stream::SHUFFLE + 1 + k as u64)),
                    seed: cfg.party_seed(id, stream::EXTRACTOR + 16 * k as u64),
                };
                extractors.push(train_attribute_extractor(&data, &handle, k, &ecfg)?);
            }
            let mask = MaskVector::generate(handle.latent_dim(), id as u32, cfg.party_seed(id, stream::MASK))?;
            out.push(Party {
                id,
                data,
                mask,
                sdec,
                extractors,
                initiator: id == init,
            });
        }

        let test = test.shuffled(seed::derive(cfg.seed, stream::PARTITION + 100)).slice(0..test_size);
        let test_owner = (0..test_size).map(|i| i % parties).collect();
        let reference = handle.encode_batch(out[init].data.samples())?;
        Ok(Self {
            cfg: cfg.clone(),
            parties: out,
            latent_range: mean_range(&reference),
            handle,
            test,
            test_owner,
            initiator_decoder: ae.decoder().clone(),
        })
    }

    pub fn resolve_epsilon(&self, epsilon: f64) -> f64 {
        self.cfg.epsilon_scale.apply(epsilon, self.latent_range)
    }

    /// The initiator's private decoder (the best-case reconstruction baseline).
    pub fn initiator_decoder(&self) -> &NeuralNet {
        &self.initiator_decoder
    }

    fn weights(&self) -> Result<LambdaWeights, ProtocolError> {
        let attrs = self.parties[0].data.private_attrs().len();
        let w = self.cfg.weights(attrs)?;
        // Attributes without an extractor contribute nothing; fold their weight into λ_0.
        let kept: Vec<usize> = (0..attrs).filter(|k| w.attribute(*k) > 0.0).collect();
        let mut v = vec![w.reconstruction()];
        v.extend(kept.iter().map(|k| w.attribute(*k)));
        Ok(LambdaWeights::new(v)?)
    }

    fn perturb_party(
        &self,
        party: &Party,
        x: &Matrix,
        epsilon: f64,
        strategy: NoiseStrategy,
        stream_tag: u64,
    ) -> Result<(Matrix, Matrix), ProtocolError> {
        let z = self.handle.encode_batch(x)?;
        let weights = self.weights()?;
        let target = self.cfg.attribute_target.as_slice();
        let defenses: Vec<AttributeDefense<'_>> = party
            .extractors
            .iter()
            .map(|e| AttributeDefense { extractor: e, target })
            .collect();
        let kit = SharingKit {
            sdec: &party.sdec,
            defenses: &defenses,
            mask: &party.mask,
            budget: NoiseBudget::new(epsilon, self.cfg.iterations)?,
            weights: &weights,
            mask_attributes: self.cfg.mask_attributes,
            strategy,
            noise_seed: self.cfg.party_seed(party.id, stream::UNIFORM_NOISE + stream_tag),
        };
        let z_hat = perturb(&z, x, &kit)?;
        Ok((z, z_hat))
    }

    /// Every party encodes and perturbs its samples with budget `epsilon`
    /// (latent units); the held-out set is perturbed with its owner's mask.
    pub fn share(&self, epsilon: f64, strategy: NoiseStrategy) -> Result<SharedPool, ProtocolError> {
        let mut blocks = Vec::with_capacity(self.parties.len());
        let mut labels = Vec::with_capacity(self.parties.len());
        let mut party_rows = Vec::with_capacity(self.parties.len());
        let mut max_noise: f64 = 0.0;
        let mut start = 0;
        for p in &self.parties {
            let (z, z_hat) = self.perturb_party(p, p.data.samples(), epsilon, strategy, 0)?;
            check_budget(&z, &z_hat, epsilon)?;
            max_noise = max_noise.max(crate::noise::max_abs_diff_batch(&z, &z_hat));
            party_rows.push(start..start + z_hat.rows());
            start += z_hat.rows();
            blocks.push(z_hat);
            labels.push(p.data.labels().expect("checked at build").clone());
        }

        let test_labels_all = self.test.labels().expect("checked at build");
        let mut test_z_hat = Matrix::zeros(self.test.len(), self.handle.latent_dim());
        for p in &self.parties {
            let rows: Vec<usize> = (0..self.test.len()).filter(|i| self.test_owner[*i] == p.id).collect();
            if rows.is_empty() {
                continue;
            }
            let x = self.test.samples().select_rows(&rows);
            let (_, zh) = self.perturb_party(p, &x, epsilon, strategy, 1)?;
            for (j, &i) in rows.iter().enumerate() {
                test_z_hat.row_mut(i).copy_from_slice(zh.row(j));
            }
        }
        let block_refs: Vec<&Matrix> = blocks.iter().collect();
        let label_refs: Vec<&Matrix> = labels.iter().collect();
        Ok(SharedPool {
            z_hat: Matrix::vconcat(&block_refs),
            labels: Matrix::vconcat(&label_refs),
            party_rows,
            test_z_hat,
            test_labels: test_labels_all.clone(),
            epsilon,
            strategy,
            max_noise,
        })
    }

    /// The attacker's fresh mask (independent of every party mask).
    pub fn attacker_mask(&self) -> Result<MaskVector, ProtocolError> {
        Ok(MaskVector::generate(
            self.handle.latent_dim(),
            u32::MAX,
            seed::derive(self.cfg.seed, stream::ATTACKER),
        )?)
    }

    fn attacker_config(&self, spec: &AttackerSpec, model: &ModelConfig, component: u64) -> AttackerConfig {
        AttackerConfig {
            hidden: model.hidden.clone(),
            train: model.train.clone().with_seed(seed::derive2(self.cfg.seed, stream::ATTACKER, component + 1)),
            seed: seed::derive2(self.cfg.seed, stream::ATTACKER, component) ^ spec.party as u64,
        }
    }

    /// The attacker's plain substitute decoder (independent of `ε`).
    pub fn attacker_decoder(&self) -> Result<Option<NeuralNet>, ProtocolError> {
        let Some(spec) = &self.cfg.attacker else {
            return Ok(None);
        };
        let acfg = self.attacker_config(spec, &spec.decoder, 0);
        Ok(Some(train_substitute_decoder(
            self.parties[spec.party].data.samples(),
            &self.handle,
            &acfg,
        )?))
    }

    /// Runs the configured attacks against the victim's shared representations.
    pub fn attack(&self, pool: &SharedPool, sdec: Option<&NeuralNet>) -> Result<Vec<AttackReport>, ProtocolError> {
        let Some(spec) = &self.cfg.attacker else {
            return Ok(Vec::new());
        };
        let own;
        let sdec = match sdec {
            Some(s) => s,
            None => {
                own = self.attacker_decoder()?.expect("attacker configured");
                &own
            }
        };
        let attacker = &self.parties[spec.party];
        let victim = &self.parties[spec.victim];
        let shared = pool.z_hat.select_rows(&pool.party_rows[spec.victim].clone().collect::<Vec<_>>());
        let truth = victim.data.samples();
        let mut out = Vec::new();
        for kind in &spec.attacks {
            match kind {
                AttackKind::Reconstruction => {
                    let acfg = self.attacker_config(spec, &spec.decoder, 0);
                    out.push(run_reconstruction_attack(sdec, &shared, truth, self.cfg.image)?.with_attacker(&acfg));
                }
                AttackKind::AdversarialTraining => {
                    let acfg = self.attacker_config(spec, &spec.decoder, 0);
                    let budget = NoiseBudget::new(pool.epsilon, self.cfg.iterations)?;
                    let mask = self.attacker_mask()?;
                    let dec = adversarial_training_attack(attacker.data.samples(), &self.handle, sdec, &mask, budget, &acfg)?;
                    out.push(
                        run_reconstruction_attack(&dec, &shared, truth, self.cfg.image)?
                            .with_kind(AttackKind::AdversarialTraining)
                            .with_attacker(&acfg),
                    );
                }
                AttackKind::AttributeExtraction => {
                    let Some(model) = &spec.extractor else {
                        return config_err("attribute attack requested without an attacker extractor");
                    };
                    for k in 0..attacker.data.private_attrs().len() {
                        let acfg = self.attacker_config(spec, model, 32 + k as u64);
                        let f = train_attribute_extractor(&attacker.data, &self.handle, k, &acfg)?;
                        let mut rep = run_attribute_attack(&f, &shared, victim.data.private_attr(k)?, &self.cfg.attribute_target)?
                            .with_attacker(&acfg);
                        for m in rep.metrics.iter_mut() {
                            m.parameters.push((String::from("attribute"), k as f64));
                        }
                        out.push(rep);
                    }
                }
                AttackKind::MaskSearch => {}
            }
        }
        Ok(out)
    }

    /// Adversarial-training attack with attacker masks at controlled overlap
    /// rates against the victim's mask. Returns `(rate, mse)` pairs.
    pub fn mask_overlap(&self, pool: &SharedPool, sdec: &NeuralNet, rates: &[f64]) -> Result<Vec<OverlapRow>, ProtocolError> {
        let Some(spec) = &self.cfg.attacker else {
            return config_err("mask overlap study needs an attacker");
        };
        let attacker = &self.parties[spec.party];
        let victim = &self.parties[spec.victim];
        let shared = pool.z_hat.select_rows(&pool.party_rows[spec.victim].clone().collect::<Vec<_>>());
        let acfg = self.attacker_config(spec, &spec.decoder, 0);
        let budget = NoiseBudget::new(pool.epsilon, self.cfg.iterations)?;
        let mut rows = Vec::with_capacity(rates.len());
        for (i, &rate) in rates.iter().enumerate() {
            let mask = MaskVector::with_overlap(
                &victim.mask,
                rate,
                u32::MAX,
                seed::derive2(self.cfg.seed, stream::MASK_SEARCH, i as u64),
            )?;
            let dec = adversarial_training_attack(attacker.data.samples(), &self.handle, sdec, &mask, budget, &acfg)?;
            let rep = run_reconstruction_attack(&dec, &shared, victim.data.samples(), self.cfg.image)?;
            rows.push(OverlapRow {
                overlap: rate,
                measured_overlap: metrics::overlap_rate(victim.mask.bits(), mask.bits())?,
                mse: rep.metric("mse").unwrap_or(f64::NAN),
                psnr: rep.metric("psnr").unwrap_or(f64::NAN),
            });
        }
        Ok(rows)
    }

    /// Brute-force search over `count` random attacker masks, scored on a probe
    /// set: the first `probe_fraction` of the victim's shared records, whose
    /// plaintext the attacker is assumed to know. The victim mask is passed only
    /// as an evaluation oracle for the reported overlap.
    pub fn mask_search(
        &self,
        pool: &SharedPool,
        sdec: &NeuralNet,
        count: usize,
        candidate_seed: u64,
        probe_fraction: f64,
    ) -> Result<MaskSearchResult, ProtocolError> {
        let Some(spec) = &self.cfg.attacker else {
            return config_err("mask search needs an attacker");
        };
        if !(probe_fraction > 0.0 && probe_fraction <= 1.0) {
            return config_err(format!("probe fraction {probe_fraction} must lie in (0, 1]"));
        }
        let victim = &self.parties[spec.victim];
        let rows: Vec<usize> = pool.party_rows[spec.victim].clone().collect();
        let take = (libm::ceil(rows.len() as f64 * probe_fraction) as usize).clamp(1, rows.len());
        let shared = pool.z_hat.select_rows(&rows[..take]);
        let truth = victim.data.samples().select_rows(&(0..take).collect::<Vec<_>>());
        let acfg = self.attacker_config(spec, &spec.decoder, 0);
        Ok(mask_bruteforce_attack(
            self.parties[spec.party].data.samples(),
            &self.handle,
            sdec,
            Probe {
                shared: &shared,
                truth: &truth,
            },
            MaskCandidates::Random {
                count,
                seed: candidate_seed,
            },
            NoiseBudget::new(pool.epsilon, self.cfg.iterations)?,
            &acfg,
            Some(&victim.mask),
        )?)
    }

    /// Original class of every pool row and every held-out row.
    pub fn classes(&self) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        for p in &self.parties {
            train.extend(p.data.label_classes().expect("checked at build"));
        }
        (train, self.test.label_classes().expect("checked at build"))
    }

    /// Mean pairwise overlap rate among the parties' masks.
    pub fn mean_pairwise_mask_overlap(&self) -> f64 {
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..self.parties.len() {
            for j in i + 1..self.parties.len() {
                total += metrics::overlap_rate(self.parties[i].mask.bits(), self.parties[j].mask.bits()).unwrap_or(0.0);
                count += 1;
            }
        }
        if count == 0 {
            1.0
        } else {
            total / count as f64
        }
    }
}

/// Downstream utility on the held-out set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utility {
    pub accuracy: f64,
    /// Macro-averaged over classes (positive-class F1 for two classes).
    pub f1: f64,
    pub train_samples: usize,
    pub test_samples: usize,
}

fn utility(net: &NeuralNet, test: &Matrix, labels: &Matrix, train_samples: usize) -> Result<Utility, ProtocolError> {
    let pred = net.predict_classes(test)?;
    let truth = metrics::classes_of(labels);
    let f1 = if labels.cols() == 2 {
        metrics::f1(&pred, &truth, 1)?
    } else {
        metrics::macro_f1(&pred, &truth, labels.cols())?
    };
    Ok(Utility {
        accuracy: metrics::accuracy(&pred, &truth)?,
        f1,
        train_samples,
        test_samples: pred.len(),
    })
}

/// Trains the downstream classifier on shared representations and scores it
/// on the perturbed held-out set.
pub fn run_collaborative_learning(
    train: &Matrix,
    labels: &Matrix,
    test: &Matrix,
    test_labels: &Matrix,
    model: &ModelConfig,
    seed: u64,
) -> Result<(NeuralNet, Utility), ProtocolError> {
    if train.is_empty() {
        return config_err("shared pool is empty");
    }
    let cfg: TrainConfig = model.train.clone().with_seed(seed::derive(seed, stream::SHUFFLE));
    let net = fit_classifier(train, labels, &model.hidden, &cfg, seed, Role::Classifier)?;
    let u = utility(&net, test, test_labels, train.rows())?;
    Ok((net, u))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonRow {
    pub epsilon: f64,
    /// `ε` in latent units after scaling.
    pub epsilon_latent: f64,
    pub strategy: NoiseStrategy,
    pub utility: Utility,
    pub max_noise: f64,
    pub pool_hash: String,
    pub attacks: Vec<AttackReport>,
}

impl EpsilonRow {
    pub fn attack(&self, kind: AttackKind) -> Option<&AttackReport> {
        self.attacks.iter().find(|a| a.kind == kind)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub overlap: f64,
    pub measured_overlap: f64,
    pub mse: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task: String,
    pub classes: usize,
    pub accuracy: f64,
    pub pool_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerticalRow {
    pub participants: usize,
    pub epsilon: f64,
    /// Per-block `ε` in latent units.
    pub epsilon_latent: Vec<f64>,
    pub accuracy: f64,
    pub f1: f64,
    /// Tabular reconstruction accuracy of the adversarially trained attacker on
    /// representations without noise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adv_tr: Option<f64>,
    /// The same attacker on the shared (perturbed) representations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rec_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub config: ScenarioConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rows: Vec<EpsilonRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overlap: Vec<OverlapRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tasks: Vec<TaskRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub vertical: Vec<VerticalRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_mask_overlap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_range: Option<f64>,
}

impl ScenarioReport {
    pub fn row(&self, epsilon: f64, strategy: NoiseStrategy) -> Option<&EpsilonRow> {
        self.rows.iter().find(|r| r.epsilon == epsilon && r.strategy == strategy)
    }
}

/// Trains one classifier per task on the same shared pool. The pool is never
/// regenerated; each row records the pool hash it was trained on.
pub fn run_task_independence_suite(
    pool: &SharedPool,
    train_classes: &[usize],
    test_classes: &[usize],
    tasks: &[TaskSpec],
    model: &ModelConfig,
    seed: u64,
) -> Result<Vec<TaskRow>, ProtocolError> {
    if train_classes.len() != pool.len() || test_classes.len() != pool.test_z_hat.rows() {
        return Err(ProtocolError::Misaligned(format!(
            "{} pool rows / {} class ids, {} test rows / {} class ids",
            pool.len(),
            train_classes.len(),
            pool.test_z_hat.rows(),
            test_classes.len()
        )));
    }
    let mut rows = Vec::with_capacity(tasks.len());
    for (i, t) in tasks.iter().enumerate() {
        let relabel = |cs: &[usize]| -> Result<Vec<usize>, ProtocolError> {
            cs.iter()
                .map(|&c| {
                    t.map
                        .get(c)
                        .copied()
                        .ok_or_else(|| ProtocolError::Config(format!("task {} has no label for class {c}", t.name)))
                })
                .collect()
        };
        let classes = t.map.iter().max().map_or(0, |m| m + 1);
        let y = one_hot_matrix(&relabel(train_classes)?, classes);
        let ty = one_hot_matrix(&relabel(test_classes)?, classes);
        let (_, u) = run_collaborative_learning(&pool.z_hat, &y, &pool.test_z_hat, &ty, model, seed::derive(seed, 1000 + i as u64))?;
        rows.push(TaskRow {
            task: t.name.clone(),
            classes,
            accuracy: u.accuracy,
            pool_hash: pool.content_hash(),
        });
    }
    Ok(rows)
}

/// Runs the whole horizontal scenario: every `(strategy, ε)` point, then the
/// optional mask-overlap study and task-independence suite.
pub fn run_horizontal_scenario(cfg: &ScenarioConfig, train: &Dataset, test: &Dataset) -> Result<ScenarioReport, ProtocolError> {
    let world = HorizontalWorld::build(cfg, train, test)?;
    run_horizontal_on(&world)
}

/// [`run_horizontal_scenario`] on an already built world.
pub fn run_horizontal_on(world: &HorizontalWorld) -> Result<ScenarioReport, ProtocolError> {
    let cfg = &world.cfg;
    let sdec = world.attacker_decoder()?;
    let mut rows = Vec::new();
    for &strategy in &cfg.strategies {
        for &eps in &cfg.epsilons {
            let latent = world.resolve_epsilon(eps);
            let pool = world.share(latent, strategy)?;
            let (_, utility) = run_collaborative_learning(
                &pool.z_hat,
                &pool.labels,
                &pool.test_z_hat,
                &pool.test_labels,
                &cfg.classifier,
                seed::derive(cfg.seed, stream::CLASSIFIER),
            )?;
            let attacks = world.attack(&pool, sdec.as_ref())?;
            rows.push(EpsilonRow {
                epsilon: eps,
                epsilon_latent: latent,
                strategy,
                utility,
                max_noise: pool.max_noise,
                pool_hash: pool.content_hash(),
                attacks,
            });
        }
    }

    let mut overlap = Vec::new();
    if let (Some(o), Some(s)) = (&cfg.overlap, &sdec) {
        let pool = world.share(world.resolve_epsilon(o.epsilon), NoiseStrategy::Adversarial)?;
        overlap = world.mask_overlap(&pool, s, &o.rates)?;
    }

    let mut tasks = Vec::new();
    if !cfg.tasks.is_empty() {
        let eps = cfg.task_epsilon.unwrap_or(cfg.epsilons[0]);
        let pool = world.share(world.resolve_epsilon(eps), cfg.strategies[0])?;
        let (tc, vc) = world.classes();
        tasks = run_task_independence_suite(&pool, &tc, &vc, &cfg.tasks, &cfg.classifier, cfg.seed)?;
    }

    Ok(ScenarioReport {
        config: cfg.clone(),
        rows,
        overlap,
        tasks,
        vertical: Vec::new(),
        mean_mask_overlap: Some(world.mean_pairwise_mask_overlap()),
        latent_range: Some(world.latent_range),
    })
}

/// One owner in the vertical scenario: its column block, local autoencoder
/// (whose decoder doubles as the noise-crafting decoder) and mask.
#[derive(Clone, Debug)]
pub struct VerticalOwner {
    pub columns: Range<usize>,
    pub autoencoder: Autoencoder,
    mask: MaskVector,
    pub latent_range: f64,
}

/// Runs the vertical scenario. `train` supplies the aligned training rows
/// followed by the attacker's disjoint rows; `groups` describe the source
/// columns for the tabular reconstruction score.
pub fn run_vertical_scenario(
    cfg: &ScenarioConfig,
    train: &Dataset,
    test: &Dataset,
    groups: &[ColumnGroup],
) -> Result<ScenarioReport, ProtocolError> {
    cfg.validate()?;
    let PartitionConfig::Vertical {
        blocks,
        ref participants,
        train_size,
        test_size,
        attacker_size,
    } = cfg.partition
    else {
        return config_err("vertical scenario needs a vertical partition");
    };
    if train.feature_dim() != test.feature_dim() {
        return Err(ProtocolError::Misaligned(format!(
            "train has {} columns, test has {}",
            train.feature_dim(),
            test.feature_dim()
        )));
    }
    if train_size + attacker_size > train.len() || test_size > test.len() {
        return config_err(format!(
            "need {train_size}+{attacker_size} training and {test_size} test rows, have {} and {}",
            train.len(),
            test.len()
        ));
    }
    if train.labels().is_none() || test.labels().is_none() {
        return config_err("vertical scenario needs labels at the label holder");
    }
    if blocks > train.feature_dim() {
        return config_err(format!("{blocks} owners but only {} columns", train.feature_dim()));
    }
    let shuffled = train.shuffled(seed::derive(cfg.seed, stream::PARTITION));
    let aligned = shuffled.slice(0..train_size);
    let attacker_rows = shuffled.slice(train_size..train_size + attacker_size);
    let test = test.shuffled(seed::derive(cfg.seed, stream::PARTITION + 100)).slice(0..test_size);

    let plan = PartitionPlan::vertical_even(train.feature_dim(), blocks, 0);
    let PartitionPlan::Vertical { columns, .. } = &plan else {
        unreachable!()
    };
    let locals = partition(&aligned, &plan)?;
    if locals.iter().any(|d| d.len() != aligned.len()) {
        return Err(ProtocolError::Misaligned("owners hold different sample counts".into()));
    }

    let mut owners = Vec::with_capacity(blocks);
    for (i, (data, cols)) in locals.iter().zip(columns).enumerate() {
        let arch = cfg.autoencoder.arch(data.feature_dim());
        let ae = train_autoencoder(
            data.samples(),
            &arch,
            &cfg.autoencoder.train.clone().with_seed(cfg.party_seed(i, stream::SHUFFLE)),
            cfg.party_seed(i, stream::AUTOENCODER),
        )?;
        let z = ae.encoder().forward_batch(data.samples())?;
        let mask = MaskVector::generate(ae.latent_dim(), i as u32, cfg.party_seed(i, stream::MASK))?;
        owners.push(VerticalOwner {
            columns: cols.clone(),
            latent_range: mean_range(&z),
            autoencoder: ae,
            mask,
        });
    }

    // The attacker knows each owner's encoder and holds partial inputs for the
    // same columns; it trains SDec and then SDec' with a fresh mask per block.
    let spec = cfg.attacker.as_ref();
    let mut rows = Vec::new();
    for &eps in &cfg.epsilons {
        let latent: Vec<f64> = owners
            .iter()
            .map(|o| cfg.epsilon_scale.apply(eps, o.latent_range))
            .collect();
        let mut shared = Vec::with_capacity(blocks);
        let mut shared_test = Vec::with_capacity(blocks);
        let mut clean = Vec::with_capacity(blocks);
        for ((o, data), &e) in owners.iter().zip(&locals).zip(&latent) {
            let budget = NoiseBudget::new(e, cfg.iterations)?;
            let x = data.samples();
            let z = o.autoencoder.encoder().forward_batch(x)?;
            let zh = match cfg.strategies[0] {
                NoiseStrategy::Adversarial => masked_ifgsm_batch(&z, x, o.autoencoder.decoder(), Some(&o.mask), budget)?,
                other => perturb_simple(&z, e, other, cfg.party_seed(o.mask.owner() as usize, stream::UNIFORM_NOISE))?,
            };
            check_budget(&z, &zh, e)?;
            let tx = test.samples().select_cols(o.columns.start, o.columns.end);
            let tz = o.autoencoder.encoder().forward_batch(&tx)?;
            let tzh = match cfg.strategies[0] {
                NoiseStrategy::Adversarial => masked_ifgsm_batch(&tz, &tx, o.autoencoder.decoder(), Some(&o.mask), budget)?,
                other => perturb_simple(&tz, e, other, cfg.party_seed(o.mask.owner() as usize, stream::UNIFORM_NOISE + 1))?,
            };
            clean.push(z);
            shared.push(zh);
            shared_test.push(tzh);
        }

        // Attacker reconstructions per block, computed once per ε.
        let mut recon_clean = Vec::with_capacity(blocks);
        let mut recon_shared = Vec::with_capacity(blocks);
        if let Some(spec) = spec {
            for (b, o) in owners.iter().enumerate() {
                let handle = EncoderHandle::publish(o.autoencoder.encoder().clone());
                let ax = attacker_rows.samples().select_cols(o.columns.start, o.columns.end);
                let acfg = AttackerConfig {
                    hidden: spec.decoder.hidden.clone(),
                    train: spec
                        .decoder
                        .train
                        .clone()
                        .with_seed(seed::derive2(cfg.seed, stream::ATTACKER, 2 * b as u64 + 1)),
                    seed: seed::derive2(cfg.seed, stream::ATTACKER, 2 * b as u64),
                };
                let sdec = train_substitute_decoder(&ax, &handle, &acfg)?;
                let mask = MaskVector::generate(
                    handle.latent_dim(),
                    u32::MAX,
                    seed::derive2(cfg.seed, stream::ATTACKER, 1000 + b as u64),
                )?;
                let budget = NoiseBudget::new(latent[b], cfg.iterations)?;
                let dec = adversarial_training_attack(&ax, &handle, &sdec, &mask, budget, &acfg)?;
                recon_clean.push(dec.forward_batch(&clean[b])?);
                recon_shared.push(dec.forward_batch(&shared[b])?);
            }
        }

        for &k in participants {
            let w_refs: Vec<&Matrix> = shared[..k].iter().collect();
            let t_refs: Vec<&Matrix> = shared_test[..k].iter().collect();
            let w = Matrix::hconcat(&w_refs);
            let tw = Matrix::hconcat(&t_refs);
            let (_, u) = run_collaborative_learning(
                &w,
                locals[0].labels().expect("label holder"),
                &tw,
                test.labels().expect("checked"),
                &cfg.classifier,
                seed::derive2(cfg.seed, stream::CLASSIFIER, k as u64),
            )?;
            let (adv_tr, rec_acc) = if spec.is_some() {
                let end = owners[k - 1].columns.end;
                let window = groups_within(groups, 0..end);
                let truth = aligned.samples().select_cols(0, end);
                let rc: Vec<&Matrix> = recon_clean[..k].iter().collect();
                let rs: Vec<&Matrix> = recon_shared[..k].iter().collect();
                (
                    Some(metrics::tabular_reconstruction_accuracy(&truth, &Matrix::hconcat(&rc), &window)?.0),
                    Some(metrics::tabular_reconstruction_accuracy(&truth, &Matrix::hconcat(&rs), &window)?.0),
                )
            } else {
                (None, None)
            };
            rows.push(VerticalRow {
                participants: k,
                epsilon: eps,
                epsilon_latent: latent[..k].to_vec(),
                accuracy: u.accuracy,
                f1: u.f1,
                adv_tr,
                rec_acc,
            });
        }
    }
    Ok(ScenarioReport {
        config: cfg.clone(),
        rows: Vec::new(),
        overlap: Vec::new(),
        tasks: Vec::new(),
        vertical: rows,
        mean_mask_overlap: None,
        latent_range: None,
    })
}

fn perturb_simple(z: &Matrix, epsilon: f64, strategy: NoiseStrategy, noise_seed: u64) -> Result<Matrix, ProtocolError> {
    let mut out = z.clone();
    if strategy == NoiseStrategy::Uniform {
        let n = crate::noise::uniform_noise_batch(z.rows(), z.cols(), epsilon, noise_seed)?;
        out.as_mut_slice().iter_mut().zip(n.as_slice()).for_each(|(a, b)| *a += b);
    }
    Ok(out)
}

/// Dispatches on the partition mode.
pub fn run_scenario(
    cfg: &ScenarioConfig,
    train: &Dataset,
    test: &Dataset,
    groups: &[ColumnGroup],
) -> Result<ScenarioReport, ProtocolError> {
    match cfg.partition {
        PartitionConfig::Horizontal { .. } => run_horizontal_scenario(cfg, train, test),
        PartitionConfig::Vertical { .. } => run_vertical_scenario(cfg, train, test, groups),
    }
}
