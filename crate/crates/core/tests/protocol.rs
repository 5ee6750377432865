use ars_core::data::{synth_gaussian_clusters, Dataset, SynthSpec};
use ars_core::noise::NoiseStrategy;
use ars_core::protocol::{HorizontalWorld, ScenarioConfig};
use proptest::prelude::*;

const TRAIN: &str = r#"{"learning_rate": 0.5, "batch_size": 32, "epochs": 2, "loss": "squared_error"}"#;
const CE: &str = r#"{"learning_rate": 0.05, "batch_size": 32, "epochs": 2, "loss": "cross_entropy"}"#;

fn config(seed: u64) -> ScenarioConfig {
    let text = format!(
        r#"{{
        "name": "prop", "seed": {seed}, "epsilons": [0.0, 0.5],
        "lambda": [0.5, 0.25, 0.25],
        "partition": {{"mode": "horizontal", "parties": 3, "per_party": 60, "test_size": 40}},
        "autoencoder": {{"hidden": [6], "latent_dim": 5, "train": {TRAIN}}},
        "substitute": {{"hidden": [6], "train": {TRAIN}}},
        "extractor": {{"hidden": [4], "train": {CE}}},
        "classifier": {{"hidden": [6], "train": {CE}}}
    }}"#
    );
    let cfg: ScenarioConfig = serde_json::from_str(&text).unwrap();
    cfg.validate().unwrap();
    cfg
}

fn data() -> (Dataset, Dataset) {
    let ds = synth_gaussian_clusters(&SynthSpec::new(260, 6, 2, 2, 5)).unwrap();
    (ds.slice(0..220), ds.slice(220..260))
}

fn world(seed: u64) -> HorizontalWorld {
    let (train, test) = data();
    HorizontalWorld::build(&config(seed), &train, &test).unwrap()
}

fn clean(w: &HorizontalWorld, p: usize) -> Vec<Vec<f64>> {
    let x = w.parties[p].data.samples();
    (0..x.rows()).map(|i| w.handle.encode(x.row(i)).unwrap()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn shared_pool_respects_budget_and_owner_masks(seed in any::<u64>(), eps in 0.0f64..3.0) {
        let w = world(seed);
        for strategy in [NoiseStrategy::Adversarial, NoiseStrategy::Uniform] {
            let pool = w.share(eps, strategy).unwrap();
            prop_assert!(pool.max_noise <= eps + 1e-9);
            for (p, rows) in pool.party_rows.iter().enumerate() {
                let z = clean(&w, p);
                let bits = w.parties[p].mask().bits();
                for (k, r) in rows.clone().enumerate() {
                    for (j, (&a, &b)) in pool.z_hat.row(r).iter().zip(&z[k]).enumerate() {
                        prop_assert!((a - b).abs() <= eps + 1e-9);
                        if strategy == NoiseStrategy::Adversarial && !bits[j] {
                            prop_assert_eq!(a.to_bits(), b.to_bits());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_budget_shares_clean_latents(seed in any::<u64>()) {
        let w = world(seed);
        let pool = w.share(0.0, NoiseStrategy::Adversarial).unwrap();
        for (p, rows) in pool.party_rows.iter().enumerate() {
            let z = clean(&w, p);
            for (k, r) in rows.clone().enumerate() {
                prop_assert_eq!(pool.z_hat.row(r), z[k].as_slice());
            }
        }
    }
}

#[test]
fn same_seed_same_pool_hash() {
    let a = world(9).share(0.5, NoiseStrategy::Adversarial).unwrap().content_hash();
    let b = world(9).share(0.5, NoiseStrategy::Adversarial).unwrap().content_hash();
    let c = world(10).share(0.5, NoiseStrategy::Adversarial).unwrap().content_hash();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn parties_hold_full_length_masks_and_disjoint_rows() {
    let w = world(4);
    let pool = w.share(0.5, NoiseStrategy::Adversarial).unwrap();
    assert_eq!(pool.party_rows, vec![0..60, 60..120, 120..180]);
    assert_eq!(pool.len(), 180);
    let masks: Vec<&[bool]> = w.parties.iter().map(|p| p.mask().bits()).collect();
    assert!(masks.iter().all(|m| m.len() == 5));
    assert_eq!(w.parties.iter().filter(|p| p.initiator).count(), 1);
}
