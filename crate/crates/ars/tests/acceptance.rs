//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ars::commands::{prepare, Prepared};
use ars_core::attack::AttackKind;
use ars_core::metrics::{overlap_probability, TailMethod};
use ars_core::nn::{chain, Activation, LayerSpec, Loss, NeuralNet, Role};
use ars_core::noise::{masked_ifgsm, MaskVector, NoiseBudget, NoiseStrategy};
use ars_core::protocol::{run_horizontal_scenario, run_vertical_scenario, EpsilonRow, ScenarioReport};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Verdict = Result<(bool, String), String>;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn load(config: &str) -> Result<Prepared, String> {
    prepare(&root().join("configs").join(config), &root().join("data"), None, None).map_err(|e| e.to_string())
}

/// Direction check allowing at most one adjacent inversion smaller than 5%
/// of the earlier value.
fn trend(values: &[f64], increasing: bool) -> bool {
    let mut inversions = 0;
    for w in values.windows(2) {
        let step = if increasing { w[1] - w[0] } else { w[0] - w[1] };
        if step < 0.0 {
            inversions += 1;
            if -step >= 0.05 * w[0].abs() {
                return false;
            }
        }
    }
    inversions <= 1
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

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

fn random_net(rng: &mut ChaCha8Rng, input: usize, output: usize, softmax: bool) -> NeuralNet {
    let acts = [Activation::Tanh, Activation::Sigmoid, Activation::Relu, Activation::Identity];
    let hidden = acts[rng.random_range(0..acts.len())];
    let last = if softmax {
        Activation::Softmax
    } else {
        [Activation::Sigmoid, Activation::Identity, Activation::Tanh][rng.random_range(0..3)]
    };
    let mut widths = vec![input];
    for _ in 0..rng.random_range(0..3) {
        widths.push(rng.random_range(1..9));
    }
    widths.push(output);
    NeuralNet::new(chain(&widths, hidden, last), Role::Decoder, rng.random()).unwrap()
}

fn budget_property() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for case in 0..10_000 {
        let h = rng.random_range(1..9);
        let d = rng.random_range(1..9);
        let net = random_net(&mut rng, h, d, false);
        let z: Vec<f64> = (0..h).map(|_| rng.random_range(-3.0..3.0)).collect();
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
        let eps = if case % 10 == 0 { 0.0 } else { rng.random_range(0.0..5.0) };
        let n = rng.random_range(1..21);
        let bits: Vec<bool> = (0..h).map(|_| rng.random()).collect();
        let mask = MaskVector::from_bits(bits.clone(), 0).unwrap();
        let out = masked_ifgsm(&z, &x, &net, &mask, NoiseBudget::new(eps, n).unwrap()).map_err(|e| e.to_string())?;
        for j in 0..h {
            let moved = (out.z_hat[j] - z[j]).abs();
            worst = worst.max(moved - eps);
            if moved > eps + 1e-9 {
                return Ok((false, format!("case {case}: |dz| = {moved} > eps = {eps}")));
            }
            if !bits[j] && out.z_hat[j].to_bits() != z[j].to_bits() {
                return Ok((false, format!("case {case}: masked dimension {j} changed")));
            }
        }
    }
    Ok((true, format!("10000 tuples, max excess over eps {worst:.3e}")))
}

fn loss_value(net: &NeuralNet, x: &[f64], loss: Loss, t: &[f64]) -> f64 {
    let y = net.forward(x).unwrap();
    match loss {
        Loss::SquaredError => y.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum(),
        Loss::CrossEntropy => -y.iter().zip(t).map(|(a, b)| b * a.ln()).sum::<f64>(),
    }
}

fn gradient_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for net_id in 0..100 {
        let input = rng.random_range(1..9);
        let output = rng.random_range(2..7);
        let softmax = net_id % 2 == 0;
        let net = random_net(&mut rng, input, output, softmax);
        let x: Vec<f64> = (0..input).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut t = vec![0.0; output];
        t[rng.random_range(0..output)] = 1.0;
        let losses: &[Loss] = if softmax {
            &[Loss::SquaredError, Loss::CrossEntropy]
        } else {
            &[Loss::SquaredError]
        };
        for &loss in losses {
            let g = net.input_gradient(&x, loss, &t).map_err(|e| e.to_string())?;
            for i in 0..input {
                let mut p = x.clone();
                let mut m = x.clone();
                p[i] += h;
                m[i] -= h;
                let fd = (loss_value(&net, &p, loss, &t) - loss_value(&net, &m, loss, &t)) / (2.0 * h);
                let scale = g[i].abs().max(fd.abs());
                if scale < 1e-8 {
                    continue;
                }
                let rel = (g[i] - fd).abs() / scale;
                worst = worst.max(rel);
                if rel >= 1e-4 {
                    return Ok((false, format!("net {net_id}: analytic {} vs fd {fd}", g[i])));
                }
            }
        }
    }
    Ok((true, format!("100 nets, max relative error {worst:.2e}")))
}

fn closed_form() -> Verdict {
    let eps = 0.5;
    let b = NoiseBudget::new(eps, 10).unwrap();
    // D = sum (z - x)^2 through an identity decoder: each coordinate moves by
    // eps in the direction of z - x, which never changes sign along the path.
    let expect = |z: f64, x: f64| z + eps * (z - x).signum();
    let mut errs = Vec::new();
    let one = masked_ifgsm(&[0.3], &[0.1], &identity(1), &MaskVector::ones(1, 0).unwrap(), b).unwrap();
    errs.push((one.z_hat[0] - expect(0.3, 0.1)).abs());
    let both = masked_ifgsm(&[0.3, 0.1], &[0.1, 0.3], &identity(2), &MaskVector::ones(2, 0).unwrap(), b).unwrap();
    errs.push((both.z_hat[0] - expect(0.3, 0.1)).abs());
    errs.push((both.z_hat[1] - expect(0.1, 0.3)).abs());
    let mask = MaskVector::from_bits(vec![true, false], 0).unwrap();
    let masked = masked_ifgsm(&[0.3, 0.3], &[0.1, 0.1], &identity(2), &mask, b).unwrap();
    errs.push((masked.z_hat[0] - expect(0.3, 0.1)).abs());
    let kept = masked.z_hat[1].to_bits() == 0.3f64.to_bits();
    let worst = errs.iter().copied().fold(0.0, f64::max);
    Ok((
        worst <= 1e-12 && kept,
        format!("max error {worst:.1e}, masked coordinate bit-identical: {kept}"),
    ))
}

fn mask_combinatorics() -> Verdict {
    let p256 = overlap_probability(256, 0.75, TailMethod::Exact).map_err(|e| e.to_string())?;
    // Every pair of length-4 masks, counting pairs agreeing in >= 3 positions.
    let mut hits = 0u32;
    for a in 0u32..16 {
        for b in 0u32..16 {
            if 4 - (a ^ b).count_ones() >= 3 {
                hits += 1;
            }
        }
    }
    let brute = hits as f64 / 256.0;
    let p4 = overlap_probability(4, 0.75, TailMethod::Exact).map_err(|e| e.to_string())?;
    Ok((
        p256 <= 2.449e-16 && (p4 - brute).abs() < 1e-12 && brute == 5.0 / 16.0,
        format!("P(256, 0.75) = {p256:.4e}; P(4, 0.75) = {p4} vs enumeration {brute}"),
    ))
}

fn row(r: &ScenarioReport, eps: f64, s: NoiseStrategy) -> Result<&EpsilonRow, String> {
    r.row(eps, s).ok_or_else(|| format!("no row for epsilon {eps}"))
}

fn metric(row: &EpsilonRow, kind: AttackKind, name: &str) -> Result<f64, String> {
    row.attack(kind)
        .and_then(|a| a.metric(name))
        .ok_or_else(|| format!("missing {name} for {kind:?} at epsilon {}", row.epsilon))
}

fn trade_off(r: &ScenarioReport) -> Verdict {
    let grid = [0.0, 25.0, 50.0, 100.0];
    if r.config.epsilons != grid {
        return Err(format!("epsilon grid is {:?}", r.config.epsilons));
    }
    let mut acc = Vec::new();
    let mut mse = Vec::new();
    for e in grid {
        let row = row(r, e, NoiseStrategy::Adversarial)?;
        acc.push(row.utility.accuracy);
        mse.push(metric(row, AttackKind::AdversarialTraining, "mse")?);
    }
    let drop = acc[0] - acc[2];
    let pass = trend(&acc, false) && trend(&mse, true) && acc[0] >= 0.93 && drop <= 0.10;
    Ok((pass, format!("accuracy {} advtrain mse {} drop@50 {:.3}", fmt(&acc), fmt(&mse), drop)))
}

fn best_psnr(row: &EpsilonRow) -> Result<f64, String> {
    Ok(metric(row, AttackKind::Reconstruction, "psnr")?.max(metric(row, AttackKind::AdversarialTraining, "psnr")?))
}

fn adversarial_beats_uniform(r: &ScenarioReport) -> Verdict {
    let adv = best_psnr(row(r, 50.0, NoiseStrategy::Adversarial)?)?;
    let uni = best_psnr(row(r, 50.0, NoiseStrategy::Uniform)?)?;
    Ok((
        uni - adv >= 2.0,
        format!("best attacker PSNR at eps 50: adversarial {adv:.2} dB, uniform {uni:.2} dB, gap {:.2} dB", uni - adv),
    ))
}

fn overlap_trend(r: &ScenarioReport) -> Verdict {
    let rates: Vec<f64> = r.overlap.iter().map(|o| o.overlap).collect();
    let eps = r.config.overlap.as_ref().map(|o| o.epsilon);
    if rates != [0.0, 0.25, 0.5, 0.75, 1.0] || eps != Some(50.0) {
        return Err(format!("overlap study ran rates {rates:?} at {eps:?}"));
    }
    let mse: Vec<f64> = r.overlap.iter().map(|o| o.mse).collect();
    Ok((trend(&mse, false), format!("mse over overlap 0..1: {}", fmt(&mse))))
}

fn task_independence(r: &ScenarioReport) -> Verdict {
    let accs: Vec<f64> = r.tasks.iter().map(|t| t.accuracy).collect();
    let hash = r.tasks.first().map(|t| t.pool_hash.clone()).unwrap_or_default();
    let same = !hash.is_empty() && r.tasks.iter().all(|t| t.pool_hash == hash);
    let eps = r.config.task_epsilon.unwrap_or(r.config.epsilons[0]);
    let matches_row = row(r, eps, r.config.strategies[0]).map(|row| row.pool_hash == hash)?;
    let mut names: Vec<&str> = r.tasks.iter().map(|t| t.task.as_str()).collect();
    names.dedup();
    let pass = names.len() >= 3 && accs.iter().all(|a| *a >= 0.70) && same && matches_row;
    Ok((
        pass,
        format!(
            "tasks {names:?} at eps {eps}: accuracy {}; one pool hash {}: {same}",
            fmt(&accs),
            &hash[..hash.len().min(12)]
        ),
    ))
}

fn attribute_defense() -> Verdict {
    let p = load("synth_attributes.toml")?;
    let cfg = &p.cfg.scenario;
    if cfg.lambda.as_ref().map(|l| l.as_slice().to_vec()) != Some(vec![0.5, 0.25, 0.25]) {
        return Err("lambda must be (0.5, 0.25, 0.25)".into());
    }
    let r = run_horizontal_scenario(cfg, &p.data.train, &p.data.test).map_err(|e| e.to_string())?;
    let eps = *cfg.epsilons.last().unwrap();
    let row = row(&r, eps, NoiseStrategy::Adversarial)?;
    let attrs: Vec<f64> = row
        .attacks
        .iter()
        .filter(|a| a.kind == AttackKind::AttributeExtraction)
        .filter_map(|a| a.metric("accuracy"))
        .collect();
    let classes = p.data.train.label_dim() as f64;
    let chance = 1.0 / classes;
    let clean = row_attrs(&r, 0.0);
    let pass = attrs.len() == 2 && attrs.iter().all(|a| (a - 0.5).abs() <= 0.07) && row.utility.accuracy >= chance + 0.15;
    Ok((
        pass,
        format!(
            "eps {eps}: attacker attribute accuracy {} (clean {}), task accuracy {:.3} vs chance {chance:.3}",
            fmt(&attrs),
            fmt(&clean),
            row.utility.accuracy
        ),
    ))
}

fn row_attrs(r: &ScenarioReport, eps: f64) -> Vec<f64> {
    r.row(eps, NoiseStrategy::Adversarial)
        .map(|row| {
            row.attacks
                .iter()
                .filter(|a| a.kind == AttackKind::AttributeExtraction)
                .filter_map(|a| a.metric("accuracy"))
                .collect()
        })
        .unwrap_or_default()
}

fn vertical_trend() -> Verdict {
    let p = load("adult_vertical.toml")?;
    if p.data.train.feature_dim() != 133 {
        return Err(format!("Adult encodes to {} columns", p.data.train.feature_dim()));
    }
    let r = run_vertical_scenario(&p.cfg.scenario, &p.data.train, &p.data.test, &p.data.groups)
        .map_err(|e| e.to_string())?;
    let find = |k: usize, eps: f64| {
        r.vertical
            .iter()
            .find(|v| v.participants == k && v.epsilon == eps)
            .ok_or_else(|| format!("no row for K={k}, eps {eps}"))
    };
    let top = p.cfg.scenario.epsilons.iter().copied().fold(0.0, f64::max);
    let (k1, k3) = (find(1, 0.0)?, find(3, 0.0)?);
    let rec = find(3, top)?.rec_acc.ok_or("no attacker configured")?;
    Ok((
        k3.accuracy > k1.accuracy && rec < 0.5,
        format!(
            "eps 0: Acc(K=1) {:.4}, Acc(K=3) {:.4}; eps {top}: Rec-Acc(K=3) {rec:.4}",
            k1.accuracy, k3.accuracy
        ),
    ))
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run).join("report.json");
        let csv = dir.path().join(run).join("plot.csv");
        let status = Command::new(env!("CARGO_BIN_EXE_ars"))
            .arg("--data-dir")
            .arg(root().join("data"))
            .arg("simulate")
            .arg("--config")
            .arg(root().join("configs/synth_attributes.toml"))
            .arg("--seed")
            .arg("99")
            .arg("--out")
            .arg(&out)
            .arg("--csv")
            .arg(&csv)
            .status()
            .map_err(|e| e.to_string())?;
        if !status.success() {
            return Ok((false, format!("simulate exited with {status}")));
        }
        let report = std::fs::read(&out).map_err(|e| e.to_string())?;
        let plot = std::fs::read(&csv).map_err(|e| e.to_string())?;
        outputs.push((report, plot));
    }
    let same = outputs[0] == outputs[1];
    Ok((same, format!("two runs, {} report bytes, identical: {same}", outputs[0].0.len())))
}

struct Line {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
    secs: f64,
}

fn record(lines: &mut Vec<Line>, id: u32, name: &'static str, started: Instant, v: Verdict) {
    let (pass, detail) = match v {
        Ok(x) => x,
        Err(e) => (false, format!("error: {e}")),
    };
    let l = Line {
        id,
        name,
        pass,
        detail,
        secs: started.elapsed().as_secs_f64(),
    };
    println!(
        "criterion {:>2} {} {}: {} ({:.1}s)",
        l.id,
        if l.pass { "PASS" } else { "FAIL" },
        l.name,
        l.detail,
        l.secs
    );
    lines.push(l);
}

fn main() {
    let mut lines = Vec::new();
    let t = Instant::now();
    record(&mut lines, 1, "budget property", t, budget_property());
    let t = Instant::now();
    record(&mut lines, 2, "gradient oracle", t, gradient_oracle());
    let t = Instant::now();
    record(&mut lines, 3, "closed-form I-FGSM", t, closed_form());
    let t = Instant::now();
    record(&mut lines, 4, "mask combinatorics", t, mask_combinatorics());

    let t = Instant::now();
    let mnist = load("mnist_horizontal.toml").and_then(|p| {
        run_horizontal_scenario(&p.cfg.scenario, &p.data.train, &p.data.test).map_err(|e| e.to_string())
    });
    let shared = |f: fn(&ScenarioReport) -> Verdict| match &mnist {
        Ok(r) => f(r),
        Err(e) => Err(e.clone()),
    };
    record(&mut lines, 5, "trade-off trend (MNIST)", t, shared(trade_off));
    let t = Instant::now();
    record(&mut lines, 6, "adversarial vs uniform noise (MNIST)", t, shared(adversarial_beats_uniform));
    let t = Instant::now();
    record(&mut lines, 7, "mask-overlap trend (MNIST)", t, shared(overlap_trend));
    let t = Instant::now();
    record(&mut lines, 8, "attribute defense (synthetic)", t, attribute_defense());
    let t = Instant::now();
    record(&mut lines, 9, "vertical trend (Adult)", t, vertical_trend());
    let t = Instant::now();
    record(&mut lines, 10, "task independence (MNIST)", t, shared(task_independence));
    let t = Instant::now();
    record(&mut lines, 11, "determinism (CLI simulate)", t, determinism());

    let failed: Vec<u32> = lines.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", lines.len());
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
