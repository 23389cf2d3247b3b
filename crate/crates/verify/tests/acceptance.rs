//! Acceptance criteria 1–11 at their pinned tolerances. Prints one line per
//! criterion and exits non-zero if any fails.

use decompnet::analysis::{check_prop1, check_prop2, lipschitz_report};
use decompnet::data::{blobs, two_moons, Dataset, Standardization};
use decompnet::network::{
    write_model, Activation, ArchSpec, InputShape, LayerKind, LayerSpec, ModelFile, NetworkModel,
    Pool,
};
use decompnet::rank::{count_params_macs, Criterion, RankSelector};
use decompnet::svd_grad::{
    clip_rho, lowrank_backward, lowrank_forward, rebalance_lambda, ClipConfig,
};
use decompnet::tensor::{svd, truncate, ConvKernelShape, Decomposition, Matrix};
use decompnet::train::{evaluate, ranks_for_ratio, train, TrainConfig};
use decompnet::Error;
use decompnet_verify::*;
use rand::Rng;
use std::time::{Duration, Instant};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- 1

fn probe_loss(w: &Matrix, r: usize, c: &Matrix) -> f64 {
    let wt = truncate(&svd(w).unwrap(), r).unwrap();
    let lin: f64 = wt.data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
    lin + 0.5 * wt.data().iter().map(|x| x * x).sum::<f64>()
}

fn svd_gradient() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    // δ just below 1 leaves the exact gradient unclipped
    let no_clip = ClipConfig::new(1.0 - 1e-12).unwrap();
    let (mut worst, mut count) = (0.0f64, 0);
    while count < 120 {
        let m = r.random_range(2..=10);
        let n = r.random_range(2..=10);
        let k = m.min(n);
        let rank = r.random_range(1..k);
        let s = separated_spectrum(k, 1e-3, &mut r);
        let w = with_singular_values(m, n, &s, &mut r);
        let c = random_matrix(m, n, &mut r);
        let (wt, ws) = lowrank_forward(&w, rank).unwrap();
        let got = lowrank_backward(&ws, &c.add(&wt), no_clip).unwrap();
        let fd = central_difference(&w, 1e-6, |x| probe_loss(x, rank, &c));
        worst = worst.max(max_rel_err(got.data(), fd.data()));
        count += 1;
    }
    let t = start.elapsed();
    outcome(
        worst <= 1e-5 && t < Duration::from_secs(30),
        format!("{count} instances, max relative error {worst:.2e} (limit 1e-5), {t:.1?}"),
    )
}

// ---------------------------------------------------------------- 2

fn random_conv_layer(r: &mut impl Rng) -> (LayerSpec, usize) {
    let cin = r.random_range(1..=3);
    let cout = r.random_range(1..=4);
    let stride = r.random_range(1..=2);
    let spec = LayerSpec {
        kind: LayerKind::Conv {
            kernel: ConvKernelShape::new(3, 3, cin, cout, stride).unwrap(),
            in_h: 5,
            in_w: 5,
            padding: 1,
            decomposition: Decomposition::Channel,
            pool: Pool::None,
        },
        has_bias: false,
        has_batchnorm: false,
        activation: Activation::Relu,
    };
    let out = spec.output_len();
    (spec, out)
}

fn layer_error() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2);
    let (mut inc, mut fin, mut res, mut layers) = (f64::NEG_INFINITY, 0.0f64, 0.0f64, 0);
    for i in 0..60 {
        let (first, width) = if i % 4 == 3 {
            random_conv_layer(&mut r)
        } else {
            let m = r.random_range(1..=12);
            let n = r.random_range(1..=12);
            (LayerSpec::dense(m, n, Activation::Relu), n)
        };
        let input = first.input_len();
        let head = LayerSpec::dense(width, 2, Activation::Softmax);
        let model = NetworkModel::new(vec![first, head], i).unwrap();
        let x = random_matrix(24, input, &mut r).scale(r.random_range(0.1..10.0));
        let rep = check_prop1(&model, &x).unwrap();
        inc = inc.max(rep.max_increase());
        fin = fin.max(rep.max_final_error());
        res = res.max(rep.max_residual());
        layers += rep.curves.len();
    }
    let t = start.elapsed();
    outcome(
        inc <= 1e-10 && fin <= 1e-10 && res <= 1e-9 && t < Duration::from_secs(10),
        format!(
            "{layers} layers, max increase {inc:.1e} (limit 1e-10), error at full rank {fin:.1e}, identity residual {res:.1e} (limit 1e-9), {t:.1?}"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn kl_bound() -> Outcome {
    let mut r = rng(3);
    let (mut violations, mut samples, mut min_slack) = (0, 0, f64::INFINITY);
    for net in 0..20 {
        let depth = r.random_range(2..=4);
        let mut dims = vec![r.random_range(2..=32)];
        for _ in 0..depth {
            dims.push(r.random_range(2..=32));
        }
        let model = NetworkModel::new(ArchSpec::mlp(&dims, false).build().unwrap(), net).unwrap();
        let x = random_matrix(256, dims[0], &mut r).scale(2.0);
        for _ in 0..3 {
            let ranks: Vec<usize> = model
                .full_ranks()
                .iter()
                .map(|&f| r.random_range(1..=f))
                .collect();
            let rep = check_prop2(&model, &ranks, &x).unwrap();
            violations += rep.violations();
            samples += rep.samples.len();
            min_slack = rep
                .samples
                .iter()
                .map(|s| s.slack)
                .fold(min_slack, f64::min);
        }
    }
    outcome(
        violations == 0,
        format!("20 bias-free ReLU nets x 3 rank vectors, {samples} samples, {violations} violations, min slack {min_slack:.2e}"),
    )
}

// ---------------------------------------------------------------- 4

fn clip_invariance() -> Outcome {
    let mut r = rng(4);
    let clip = ClipConfig::default();
    let (mut mismatches, mut clipped_total, mut empty, mut over) = (0, 0, 0, 0);
    for _ in 0..20 {
        let (m, n) = (r.random_range(4..=8), r.random_range(4..=8));
        let k = m.min(n);
        let rank = r.random_range(1..k);
        // separated spectrum with a near-duplicate pair straddling the cut
        let mut s = separated_spectrum(k, 1e-3, &mut r);
        s[rank] = s[rank - 1] * r.random_range(0.999..0.9999);
        let w = with_singular_values(m, n, &s, &mut r);
        let sets: Vec<Vec<bool>> = [1e-3, 1.0, 1e3]
            .iter()
            .map(|&c| {
                let (_, ws) = lowrank_forward(&w.scale(c), rank).unwrap();
                over += clip_rho(&ws.rho, clip)
                    .data()
                    .iter()
                    .filter(|&&p| p > clip.delta())
                    .count();
                ws.rho.data().iter().map(|&p| p > clip.delta()).collect()
            })
            .collect();
        let clipped = sets[1].iter().filter(|&&b| b).count();
        clipped_total += clipped;
        empty += usize::from(clipped == 0);
        mismatches += usize::from(sets[0] != sets[1] || sets[1] != sets[2]);
    }
    outcome(
        mismatches == 0 && over == 0 && empty == 0,
        format!(
            "20 matrices x 3 scales, {mismatches} mismatched clip sets, {clipped_total} clipped entries at c = 1, {empty} matrices with nothing clipped"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn rebalance() -> Outcome {
    let mut r = rng(5);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (m, n) = (r.random_range(1..=10), r.random_range(1..=10));
        let gf = random_matrix(m, n, &mut r).scale(10f64.powf(r.random_range(-3.0..3.0)));
        let gl = random_matrix(m, n, &mut r).scale(10f64.powf(r.random_range(-3.0..3.0)));
        let lambda = r.random_range(0.01..1.0);
        let (nf, nl) = (gf.frobenius_norm(), gl.frobenius_norm());
        let lp = rebalance_lambda(lambda, nf, nl).unwrap();
        worst = worst.max((lp * nl - lambda * nf).abs() / (lambda * nf));
    }
    outcome(
        worst <= 1e-12,
        format!("200 gradient pairs, max relative deviation {worst:.1e} (limit 1e-12)"),
    )
}

// ---------------------------------------------------------------- 6

fn rank_vectors(full: &[usize]) -> Vec<Vec<usize>> {
    full.iter().fold(vec![vec![]], |acc, &r| {
        acc.into_iter()
            .flat_map(|p| {
                (1..=r).map(move |k| {
                    let mut v = p.clone();
                    v.push(k);
                    v
                })
            })
            .collect()
    })
}

fn selection_optimality() -> Outcome {
    let mut r = rng(6);
    let (mut nets, mut cases, mut wrong) = (0, 0, 0);
    while nets < 40 {
        let depth = r.random_range(1..=4);
        let dims: Vec<usize> = (0..=depth).map(|_| r.random_range(1..=6)).collect();
        let mut dims = dims;
        *dims.last_mut().unwrap() = dims.last().unwrap().max(&2).to_owned();
        let model = match NetworkModel::new(ArchSpec::mlp(&dims, false).build().unwrap(), nets) {
            Ok(m) => m,
            Err(_) => continue,
        };
        let full = model.full_ranks();
        if full.iter().sum::<usize>() > 12 {
            continue;
        }
        nets += 1;
        let sigma: Vec<Vec<f64>> = model.weights.iter().map(singular_values).collect();
        let sel = RankSelector::from_model(&model).unwrap();
        let all = rank_vectors(&full);
        let dropped = |v: &[usize]| -> f64 {
            sigma
                .iter()
                .zip(v)
                .map(|(s, &k)| s[k..].iter().map(|x| x * x).sum::<f64>())
                .sum()
        };
        let total: usize = full.iter().sum();
        for d in 0..=sel.max_drop() {
            let chosen = sel.select_sv(d).unwrap().ranks;
            let best = all
                .iter()
                .filter(|v| v.iter().sum::<usize>() == total - d)
                .map(|v| dropped(v))
                .fold(f64::INFINITY, f64::min);
            cases += 1;
            if (dropped(&chosen) - best).abs() > 1e-9 * best.max(1.0) {
                wrong += 1;
            }
        }
    }
    outcome(
        wrong == 0,
        format!("{nets} nets with total rank <= 12, {cases} (net, d) cases, {wrong} suboptimal"),
    )
}

// ---------------------------------------------------------------- 7

fn accounting() -> Outcome {
    // conv 3x3 3->8 on 8x8 (pad 1, max-pool) -> dense 128->16 -> dense 16->4
    let conv = LayerSpec {
        kind: LayerKind::Conv {
            kernel: ConvKernelShape::new(3, 3, 3, 8, 1).unwrap(),
            in_h: 8,
            in_w: 8,
            padding: 1,
            decomposition: Decomposition::Channel,
            pool: Pool::Max2,
        },
        has_bias: true,
        has_batchnorm: false,
        activation: Activation::Relu,
    };
    let layers = vec![
        conv,
        LayerSpec::dense(128, 16, Activation::Relu),
        LayerSpec::dense(16, 4, Activation::Softmax),
    ];
    let model = NetworkModel::new(layers, 0).unwrap();
    // stored shapes 27x8, 128x16, 16x4; break-even ranks 6, 14, 3; conv
    // output has 64 positions
    let cases: [([usize; 3], (u64, u64)); 5] = [
        ([8, 16, 4], (216 + 2048 + 64, 216 * 64 + 2048 + 64)),
        ([7, 15, 4], (216 + 2048 + 64, 216 * 64 + 2048 + 64)),
        ([6, 14, 3], (210 + 2016 + 60, 210 * 64 + 2016 + 60)),
        ([1, 1, 1], (35 + 144 + 20, 35 * 64 + 144 + 20)),
        ([3, 15, 2], (105 + 2048 + 40, 105 * 64 + 2048 + 40)),
    ];
    let mut bad = Vec::new();
    for (ranks, want) in cases {
        let got = count_params_macs(&model, &ranks).unwrap();
        if got != want {
            bad.push(format!("{ranks:?}: got {got:?}, want {want:?}"));
        }
    }
    outcome(
        bad.is_empty(),
        if bad.is_empty() {
            "5 rank vectors on conv+2 dense toy, exact params and MACs incl. break-even".into()
        } else {
            bad.join("; ")
        },
    )
}

// ---------------------------------------------------------------- 8, 9

const SEEDS: u64 = 5;

struct SeedResult {
    full: [f64; 2],
    z01_sv: [f64; 2],
    /// sv, energy, uniform on the λ = 0.5 model
    criteria: [f64; 3],
    ranks: [Vec<usize>; 3],
}

/// Fixed task: 16 Gaussian blobs in 32 dimensions, 32-64-16 ReLU MLP.
fn blob_task(seed: u64) -> (Dataset, Dataset) {
    let all = blobs(2000, 32, 16, 1.0, 1.5, 100 + seed).unwrap();
    let (mut train, mut test) = all.split(0.3, seed).unwrap();
    let s = Standardization::fit(&train);
    s.apply(&mut train).unwrap();
    s.apply(&mut test).unwrap();
    (train, test)
}

fn train_blobs(seed: u64) -> SeedResult {
    let (data, test) = blob_task(seed);
    let mut out = SeedResult {
        full: [0.0; 2],
        z01_sv: [0.0; 2],
        criteria: [0.0; 3],
        ranks: Default::default(),
    };
    for (i, lambda) in [0.0, 0.5].into_iter().enumerate() {
        let cfg = TrainConfig {
            lambda,
            epochs: 40,
            batch_size: 64,
            seed,
            probes: vec![],
            ..TrainConfig::default()
        };
        let model =
            NetworkModel::new(ArchSpec::mlp(&[32, 64, 16], true).build().unwrap(), seed).unwrap();
        let (model, _) = train(model, &data, None, &cfg).unwrap();
        out.full[i] = evaluate(&model, None, &test, None).unwrap().accuracy;
        let sv = ranks_for_ratio(&model, Criterion::Sv, 0.1).unwrap();
        out.z01_sv[i] = evaluate(&model, Some(&sv), &test, None).unwrap().accuracy;
        if lambda > 0.0 {
            for (k, c) in [Criterion::Sv, Criterion::Energy, Criterion::Uniform]
                .into_iter()
                .enumerate()
            {
                let ranks = ranks_for_ratio(&model, c, 0.1).unwrap();
                out.criteria[k] = evaluate(&model, Some(&ranks), &test, None)
                    .unwrap()
                    .accuracy;
                out.ranks[k] = ranks;
            }
        }
    }
    out
}

fn training_effect(runs: &[SeedResult], elapsed: Duration) -> Outcome {
    let low0: Vec<f64> = runs.iter().map(|r| r.z01_sv[0]).collect();
    let low5: Vec<f64> = runs.iter().map(|r| r.z01_sv[1]).collect();
    let full0: Vec<f64> = runs.iter().map(|r| r.full[0]).collect();
    let full5: Vec<f64> = runs.iter().map(|r| r.full[1]).collect();
    let margin = mean(&low5) - mean(&low0);
    let se = (standard_error(&low0).powi(2) + standard_error(&low5).powi(2)).sqrt();
    let full_gap = (mean(&full5) - mean(&full0)).abs();
    outcome(
        margin > se && full_gap <= 0.02 && elapsed < Duration::from_secs(900),
        format!(
            "Z=0.1 accuracy λ=0.5 {:.3} vs λ=0 {:.3} (margin {margin:.3}, standard error {se:.3}); full rank {:.3} vs {:.3} (gap {full_gap:.3}, limit 0.02); {SEEDS} seeds, {elapsed:.1?}",
            mean(&low5),
            mean(&low0),
            mean(&full5),
            mean(&full0)
        ),
    )
}

fn criterion_order(runs: &[SeedResult]) -> Outcome {
    let ordered = runs
        .iter()
        .filter(|r| r.criteria[0] >= r.criteria[1] && r.criteria[1] >= r.criteria[2])
        .count();
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "{:.2}/{:.2}/{:.2} {:?}/{:?}/{:?}",
                r.criteria[0], r.criteria[1], r.criteria[2], r.ranks[0], r.ranks[1], r.ranks[2]
            )
        })
        .collect();
    outcome(
        ordered >= 4,
        format!(
            "sv >= energy >= uniform in {ordered}/{SEEDS} seeds (need 4); accuracy and ranks sv/energy/uniform: {}",
            per_seed.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 10

fn moons(n: usize, seed: u64) -> Dataset {
    let mut d = two_moons(n, 0.15, seed).unwrap();
    Standardization::fit(&d).apply(&mut d).unwrap();
    d
}

/// Blobs laid out as 4x4 two-channel images.
fn blob_images(seed: u64) -> Dataset {
    let mut d = blobs(400, 32, 4, 1.0, 1.0, seed).unwrap();
    Standardization::fit(&d).apply(&mut d).unwrap();
    let shape = InputShape {
        height: 4,
        width: 4,
        channels: 2,
    };
    Dataset::new(d.x, d.labels, shape).unwrap()
}

fn lipschitz() -> Outcome {
    let quick = |epochs| TrainConfig {
        epochs,
        batch_size: 32,
        probes: vec![],
        ..TrainConfig::default()
    };
    let mlp_data = moons(300, 10);
    let mlp = NetworkModel::new(ArchSpec::mlp(&[2, 16, 16, 2], true).build().unwrap(), 10).unwrap();
    let (mlp, _) = train(mlp, &mlp_data, None, &quick(30)).unwrap();

    let img = blob_images(11);
    let conv = LayerSpec {
        kind: LayerKind::Conv {
            kernel: ConvKernelShape::new(3, 3, 2, 6, 1).unwrap(),
            in_h: 4,
            in_w: 4,
            padding: 1,
            decomposition: Decomposition::Channel,
            pool: Pool::Max2,
        },
        has_bias: true,
        has_batchnorm: true,
        activation: Activation::Relu,
    };
    let layers = vec![
        conv,
        LayerSpec::dense(24, 12, Activation::Relu).with_bias(true),
        LayerSpec::dense(12, 4, Activation::Softmax).with_bias(true),
    ];
    let (cnn, _) = train(
        NetworkModel::new(layers, 12).unwrap(),
        &img,
        None,
        &quick(20),
    )
    .unwrap();

    let (mut checked, mut bad, mut degenerate) = (0, Vec::new(), 0);
    for (name, model, data) in [("mlp", &mlp, &mlp_data), ("conv", &cnn, &img)] {
        for z in [0.05, 0.1, 0.25, 0.5] {
            let ranks = ranks_for_ratio(model, Criterion::Sv, z).unwrap();
            let rep = match lipschitz_report(model, &ranks, &data.x) {
                Ok(rep) => rep,
                Err(Error::DegenerateInput(_)) => {
                    degenerate += 1;
                    continue;
                }
                Err(e) => return outcome(false, format!("{name} z={z}: {e}")),
            };
            for row in &rep.rows {
                checked += 1;
                let over =
                    |hat: Option<f64>, theory: f64| hat.is_some_and(|h| h > theory * (1.0 + 1e-8));
                if over(row.omega_hat, row.omega) || over(row.big_omega_hat, row.big_omega) {
                    bad.push(format!("{name} z={z} layer {}", row.layer));
                }
            }
        }
    }
    outcome(
        bad.is_empty() && checked > 0,
        format!(
            "trained MLP and conv net at Z in {{0.05, 0.1, 0.25, 0.5}}: {checked} layer rows, {} violations, {degenerate} degenerate settings{}",
            bad.len(),
            if bad.is_empty() { String::new() } else { format!(" ({})", bad.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------- 11

fn run_bytes() -> (Vec<u8>, Vec<u8>) {
    let data = moons(200, 20);
    let val = moons(100, 21);
    let layers = vec![
        LayerSpec::dense(2, 12, Activation::Relu)
            .with_bias(true)
            .with_batchnorm(true),
        LayerSpec::dense(12, 2, Activation::Softmax).with_bias(true),
    ];
    let cfg = TrainConfig {
        epochs: 8,
        batch_size: 32,
        seed: 22,
        ..TrainConfig::default()
    };
    let (model, log) = train(
        NetworkModel::new(layers, 22).unwrap(),
        &data,
        Some(&val),
        &cfg,
    )
    .unwrap();
    let mut ckpt = Vec::new();
    let metadata = serde_json::json!({ "train": serde_json::to_value(&cfg).unwrap() });
    write_model(&mut ckpt, &ModelFile { model, metadata }).unwrap();
    let mut csv = Vec::new();
    log.write_csv(&mut csv).unwrap();
    (ckpt, csv)
}

fn determinism() -> Outcome {
    let (a_ckpt, a_csv) = run_bytes();
    let (b_ckpt, b_csv) = run_bytes();
    outcome(
        a_ckpt == b_ckpt && a_csv == b_csv,
        format!(
            "two runs: checkpoints {} ({} bytes), logs {} ({} bytes)",
            if a_ckpt == b_ckpt {
                "identical"
            } else {
                "differ"
            },
            a_ckpt.len(),
            if a_csv == b_csv {
                "identical"
            } else {
                "differ"
            },
            a_csv.len()
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!(
            "criterion {n:>2} {} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, name, o));
    };
    report(1, "SVD-gradient correctness", svd_gradient());
    report(2, "layer-error monotonicity and identity", layer_error());
    report(3, "KL bound", kl_bound());
    report(4, "clipping scale invariance", clip_invariance());
    report(5, "lambda rebalance identity", rebalance());
    report(6, "rank-selection optimality", selection_optimality());
    report(7, "params and MACs accounting", accounting());
    let start = Instant::now();
    let runs: Vec<SeedResult> = (0..SEEDS).map(train_blobs).collect();
    let elapsed = start.elapsed();
    report(
        8,
        "directional training effect",
        training_effect(&runs, elapsed),
    );
    report(9, "criterion ordering", criterion_order(&runs));
    report(10, "Lipschitz consistency", lipschitz());
    report(11, "determinism", determinism());

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failed: {failed:?}")
        }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
