//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs as a plain binary so the lines appear in `cargo test`.

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use entropy_monitor::detect::{evaluate_labels, Label};
use entropy_monitor::dump::{decode_dump, header_len, read_dump, write_dump};
use entropy_monitor::entropy::{
    bin_values, build_default_binning, entropy_bits, shannon_entropy, ActivationBatch, EARLY_CONV_LAYER,
    PRE_CLASSIFIER_LAYER,
};
use entropy_monitor::model::{fgsm, ImageBatch, ModelConfig, ToyCnn};
use entropy_monitor::pipeline::{run_demo, DemoConfig};
use entropy_monitor::profile::{optimize_threshold, profile, Direction, ThresholdSource};

use common::{estimates, gradient_check, grid_minimum, naive_entropy};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn entropy_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.gen_range(1..=64);
        let raw: Vec<f64> = (0..k)
            .map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..1.0) })
            .collect();
        let total: f64 = raw.iter().sum();
        if total == 0.0 {
            continue;
        }
        let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let mut brute = 0.0;
        for &q in p.iter().rev() {
            if q > 0.0 {
                brute += q * (1.0 / q).ln();
            }
        }
        brute /= std::f64::consts::LN_2;
        worst = worst.max((entropy_bits(&p) - brute).abs());
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;

    let mut uniform_worst = 0.0f64;
    for k in 1..=1024usize {
        let p = vec![1.0 / k as f64; k];
        uniform_worst = uniform_worst.max((entropy_bits(&p) - (k as f64).log2()).abs());
    }
    ensure(uniform_worst <= 1e-12, || format!("uniform deviation {uniform_worst:e}"))?;
    for k in [1usize, 2, 4, 8, 16, 256, 1024] {
        let p = vec![1.0 / k as f64; k];
        ensure(entropy_bits(&p) == (k as f64).log2(), || format!("uniform-{k} not exact"))?;
    }
    for p in [vec![1.0], vec![0.0, 1.0, 0.0], vec![0.0; 5], vec![]] {
        ensure(entropy_bits(&p) == 0.0, || format!("degenerate {p:?} not 0"))?;
    }

    // same check through the histogram path on raw activations
    let scheme = build_default_binning();
    let edges = scheme.edges(EARLY_CONV_LAYER).unwrap();
    let mut hist_worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.gen_range(1..500);
        let v: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0f32..9.0)).collect();
        let kept: Vec<f64> = v.iter().filter(|&&x| x > 0.0).map(|&x| x as f64).collect();
        let h = shannon_entropy(&bin_values(&kept, edges).unwrap());
        hist_worst = hist_worst.max((h - naive_entropy(&v, edges.as_slice()).0).abs());
    }
    ensure(hist_worst <= 1e-12, || format!("histogram deviation {hist_worst:e}"))?;
    Ok(format!(
        "max |err| {worst:.1e} random, {uniform_worst:.1e} uniform k<=1024, {hist_worst:.1e} histograms"
    ))
}

fn reference_linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

fn binning_fidelity() -> Outcome {
    let scheme = build_default_binning();
    let check = |key: &str, segments: &[(f64, f64, usize)], total: usize| -> Result<(), String> {
        let e = scheme.edges(key).map_err(|e| e.to_string())?.as_slice();
        ensure(e.len() == total, || format!("{key}: {} edges, want {total}", e.len()))?;
        ensure(e.windows(2).all(|w| w[0] < w[1]), || format!("{key}: not strictly increasing"))?;
        ensure(e[0] == 0.0 && e[total - 1] == 7.0, || format!("{key}: ends {} .. {}", e[0], e[total - 1]))?;
        let mut at = 0;
        for &(a, b, n) in segments {
            for (i, want) in reference_linspace(a, b, n).into_iter().enumerate() {
                let got = e[at + i];
                ensure((got - want).abs() <= 1e-12, || format!("{key}[{}] = {got}, want {want}", at + i))?;
            }
            at += n;
        }
        ensure(at == total - 1, || format!("{key}: segments cover {at} edges"))
    };
    check(
        EARLY_CONV_LAYER,
        &[(0.0, 0.3, 16), (0.34, 0.9, 15), (1.083, 2.0, 6), (2.67, 4.0, 3)],
        41,
    )?;
    check(PRE_CLASSIFIER_LAYER, &[(0.0, 2.0, 20), (2.001, 4.0, 3)], 24)?;
    Ok("features.0: 41 edges, classifier.3: 24 edges, all segments within 1e-12".into())
}

fn gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let (mut checked, mut skipped) = (0, 0);
    for trial in 0..10 {
        let size = rng.gen_range(4..=8);
        let cfg = ModelConfig {
            n_classes: rng.gen_range(2..=5),
            channels: rng.gen_range(1..=2),
            height: size,
            width: size + rng.gen_range(0..=2),
            noise_filters: rng.gen_range(0..=3),
            extra_hidden: rng.gen_range(0..=6),
        };
        let model = ToyCnn::random(rng.gen(), cfg).map_err(|e| e.to_string())?;
        let n = rng.gen_range(1..=3);
        let len = n * cfg.channels * cfg.height * cfg.width;
        let data = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x = ImageBatch::new(n, cfg.channels, cfg.height, cfg.width, data).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..cfg.n_classes)).collect();
        let r = gradient_check(&model, &x, &labels, 1e-4);
        ensure(r.checked > 0, || format!("config {trial}: every coordinate sat on a kink"))?;
        worst = worst.max(r.max_rel_err);
        checked += r.checked;
        skipped += r.skipped;
    }
    ensure(worst < 1e-4, || format!("max relative error {worst:e}"))?;
    Ok(format!(
        "max rel err {worst:.1e} over {checked} coordinates ({skipped} on ReLU kinks skipped)"
    ))
}

fn fgsm_envelope() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = ModelConfig {
        height: 8,
        width: 8,
        ..ModelConfig::default()
    };
    let model = ToyCnn::random(11, cfg).unwrap();
    for b in 0..100 {
        let n = rng.gen_range(1..=4);
        let data = (0..n * 64)
            .map(|_| match rng.gen_range(0..10) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.gen_range(0.0..=1.0),
            })
            .collect();
        let x = ImageBatch::new(n, 1, 8, 8, data).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..cfg.n_classes)).collect();
        let (_, g) = model.loss_and_input_gradient(&x, &labels).unwrap();
        for eps in [0.0, 0.05, 0.2] {
            let adv = fgsm(&x, &g, eps).map_err(|e| e.to_string())?;
            if eps == 0.0 {
                ensure(adv == x, || format!("batch {b}: eps 0 is not the identity"))?;
            }
            for (a, o) in adv.data.iter().zip(&x.data) {
                ensure((0.0..=1.0).contains(a), || format!("batch {b}: pixel {a} outside [0,1]"))?;
                ensure((a - o).abs() <= eps + 1e-12, || format!("batch {b}: |delta| {} > {eps}", (a - o).abs()))?;
            }
        }
    }
    Ok("100 batches x eps {0, 0.05, 0.2}: in [0,1], L-inf <= eps, eps 0 identity".into())
}

fn optimizer_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut above, mut below, mut runs) = (0, 0, 0);
    for set in 0..200 {
        let n_clean = rng.gen_range(2..30);
        let n_adv = rng.gen_range(2..30);
        let shift = rng.gen_range(-1.5..1.5);
        let spread = rng.gen_range(0.05..1.0);
        let clean: Vec<f64> = (0..n_clean).map(|_| 4.0 + rng.gen_range(-spread..spread)).collect();
        let adv: Vec<f64> = (0..n_adv).map(|_| 4.0 + shift + rng.gen_range(-spread..spread)).collect();
        let p = profile(&estimates("l", &clean), Some(&estimates("l", &adv)), "l", 16).map_err(|e| e.to_string())?;
        for (w_fpr, w_fnr) in [(1.0, 1.0), (rng.gen_range(0.1..3.0), rng.gen_range(0.1..3.0))] {
            let t = optimize_threshold(&p, w_fpr, w_fnr).map_err(|e| e.to_string())?;
            let ours = w_fpr * t.train_fpr + w_fnr * t.train_fnr;
            let sweep = grid_minimum(&clean, &adv, t.direction, w_fpr, w_fnr, 10_001);
            ensure(ours <= sweep + 1e-12, || {
                format!("set {set}: objective {ours} above sweep {sweep} (weights {w_fpr}, {w_fnr})")
            })?;
            match t.direction {
                Direction::AdversarialAbove => above += 1,
                Direction::AdversarialBelow => below += 1,
            }
            runs += 1;
        }
    }
    ensure(above > 0 && below > 0, || "only one direction exercised".into())?;
    Ok(format!("{runs} optimizations ({above} above, {below} below) never worse than the 10,001-point sweep"))
}

fn table_metrics() -> Outcome {
    use Label::{Adversarial as A, Clean as C};
    let truth = [C, C, C, C, C, A, A, A, A, A];
    let patterns = [
        ([C, C, C, C, C, A, A, A, A, C], (0.9, 0.0, 0.2)),
        ([C, C, C, C, A, A, A, A, A, C], (0.8, 0.2, 0.2)),
    ];
    for (predicted, want) in patterns {
        let m = evaluate_labels(&predicted, &truth).map_err(|e| e.to_string())?;
        let got = (m.accuracy, m.fpr, m.fnr);
        ensure(got == want, || format!("got {got:?}, want {want:?}"))?;
    }
    Ok("0 FP + 1 FN -> 0.90/0.00/0.20, 1 FP + 1 FN -> 0.80/0.20/0.20".into())
}

fn demo_separation() -> Outcome {
    let cfg = DemoConfig::default();
    ensure(
        cfg.seed == 42 && cfg.batch_size == 16 && cfg.train_batches == 18 && cfg.test_batches == 5 && cfg.epsilon == 0.2,
        || "default demo config is not the 23 x 16, 18/5, eps 0.2 protocol".into(),
    )?;
    let scheme = build_default_binning();
    let run = run_demo(&cfg, &scheme, "default", false).map_err(|e| e.to_string())?;
    let model = run.report.model.as_ref().ok_or("report has no model summary")?;
    ensure(model.clean_accuracy >= 0.9, || format!("clean accuracy {}", model.clean_accuracy))?;
    ensure(model.adversarial_accuracy <= 0.3, || format!("FGSM accuracy {}", model.adversarial_accuracy))?;
    let layer = run
        .report
        .layer(EARLY_CONV_LAYER, ThresholdSource::Optimized)
        .ok_or("no early-conv report")?;
    let m = layer.metrics.as_ref().ok_or("early-conv layer has no metrics")?;
    ensure(m.total() == 10, || format!("{} held-out batches scored, want 10", m.total()))?;
    ensure(m.accuracy >= 0.8, || format!("early-conv detection accuracy {}", m.accuracy))?;
    run.report.verify().map_err(|e| e.to_string())?;
    let again = run_demo(&cfg, &scheme, "default", false).map_err(|e| e.to_string())?;
    ensure(again.report.to_json() == run.report.to_json(), || "rerun report differs".into())?;
    Ok(format!(
        "clean acc {:.3}, FGSM acc {:.3}, features.0 detection acc {:.2} (FPR {:.2}, FNR {:.2}), tau* {:.4}, verified, reproducible",
        model.clean_accuracy, model.adversarial_accuracy, m.accuracy, m.fpr, m.fnr, layer.threshold.tau
    ))
}

fn random_key(rng: &mut ChaCha8Rng) -> String {
    const CHARS: &[char] = &['a', 'z', '0', '.', '_', '-', 'é', 'ß', '层'];
    (0..rng.gen_range(0..16)).map(|_| CHARS[rng.gen_range(0..CHARS.len())]).collect()
}

fn dump_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut corruptions = 0usize;
    for i in 0..500 {
        let key = random_key(&mut rng);
        let dims: Vec<usize> = (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(1..=6)).collect();
        let n: usize = dims.iter().product();
        let values: Vec<f32> = (0..n)
            .map(|_| loop {
                let v = f32::from_bits(rng.gen());
                if v.is_finite() {
                    break v;
                }
            })
            .collect();
        let batch = ActivationBatch::new(key.clone(), dims.clone(), values).unwrap();
        let mut bytes = Vec::new();
        write_dump(&batch, &mut bytes).map_err(|e| e.to_string())?;
        let back = read_dump(bytes.as_slice()).map_err(|e| format!("batch {i}: {e}"))?;
        ensure(back.layer_key() == key && back.shape() == dims.as_slice(), || format!("batch {i}: header mismatch"))?;
        let exact = back.values().iter().zip(batch.values()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(exact, || format!("batch {i}: payload not bit-exact"))?;

        let header = header_len(key.len(), dims.len());
        // every replacement value at every header byte for the first 20,
        // one random replacement per header byte for the rest
        for pos in 0..header {
            let flips: Vec<u8> = if i < 20 { (1..=255).collect() } else { vec![rng.gen_range(1..=255)] };
            for flip in flips {
                let mut bad = bytes.clone();
                bad[pos] ^= flip;
                ensure(decode_dump(&bad).is_err(), || format!("batch {i}: corruption at byte {pos} accepted"))?;
                corruptions += 1;
            }
        }
    }
    Ok(format!("500 bit-exact round trips, {corruptions} header corruptions all rejected"))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("entropy oracle", Duration::from_secs(1), entropy_oracle),
        ("default binning fidelity", Duration::from_secs(1), binning_fidelity),
        ("input gradient check", Duration::from_secs(30), gradient),
        ("FGSM envelope", Duration::from_secs(10), fgsm_envelope),
        ("threshold optimizer oracle", Duration::from_secs(10), optimizer_oracle),
        ("confusion metrics", Duration::from_secs(1), table_metrics),
        ("end-to-end demo separation", Duration::from_secs(120), demo_separation),
        ("dump round trip and corruption", Duration::from_secs(10), dump_round_trip),
    ];
    let mut failed = 0;
    println!("acceptance suite");
    for (i, (name, budget, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let mut outcome = f();
        let elapsed = start.elapsed();
        if outcome.is_ok() && elapsed > *budget {
            outcome = Err(format!("took {elapsed:.2?}, budget {budget:?}"));
        }
        match outcome {
            Ok(detail) => println!("PASS {} {name} ({elapsed:.2?}): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name} ({elapsed:.2?}): {why}", i + 1);
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
