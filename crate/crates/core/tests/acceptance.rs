//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero on a failure only when `LBCNN_ACCEPTANCE_STRICT` is set.
//!
//! The training criteria use the MNIST subset under `data/mnist`
//! (override with `MNIST_DIR`).

use lbcnn::analysis::{
    bank_decorrelation, filter_decorrelation, nmse_curve, theorem1_montecarlo, theorem1_vector, ApproxExperimentConfig,
};
use lbcnn::conv::{conv2d_dense, conv2d_dense_backward, conv2d_sparse_binary, conv2d_sparse_binary_backward};
use lbcnn::data::{load_mnist_dir, synthetic_gaussian};
use lbcnn::lbp::{lbp_encode_classic, lbp_encode_conv, LbpConfig};
use lbcnn::net::LayerFilters;
use lbcnn::rng;
use lbcnn::train::{grad_check, model_to_bytes, train_with, GradCheckOptions, Optimizer};
use lbcnn::{
    count_params, generate_bank, ConvGeometry, Dataset, Network, NetworkSpec, OpCounter, RunMetrics, Tensor,
    TrainConfig,
};
use rand::Rng;
use std::path::PathBuf;
use std::time::{Duration, Instant};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn lbp_equivalence() -> Verdict {
    let start = Instant::now();
    let mut r = rng::seeded(1);
    let mut mismatches = 0;
    for size in [3, 5] {
        let cfg = LbpConfig::new(size).unwrap();
        for i in 0..200 {
            // every other image uses few grey levels so ties are common
            let levels = if i % 2 == 0 { 256 } else { 4 };
            let px = (0..256).map(|_| r.random_range(0..levels) as f64 / 255.0).collect();
            let img = Tensor::from_vec(&[1, 1, 16, 16], px).unwrap();
            if lbp_encode_conv(&img, &cfg).unwrap() != lbp_encode_classic(&img, &cfg).unwrap() {
                mismatches += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        mismatches == 0 && secs < 5.0,
        format!("{mismatches} mismatching images of 400, {secs:.2} s"),
    )
}

fn parameter_ratios() -> Verdict {
    let mut got = Vec::new();
    for k in [3, 5, 7, 9, 11, 13] {
        let text = format!("input c=16 h=16 w=16\nlbc m=16 q=16 k={k}");
        got.push(count_params(&NetworkSpec::parse(&text).unwrap()).unwrap().ratio_vs_cnn);
    }
    let want = [9.0, 25.0, 49.0, 81.0, 121.0, 169.0];
    verdict(got == want, format!("ratios {got:?}"))
}

fn alexnet_counts() -> Verdict {
    let cnn = "input c=3 h=13 w=13
        conv q=96 k=11 post=false
        conv q=256 k=5 groups=2 post=false
        conv q=384 k=3 post=false
        conv q=384 k=3 groups=2 post=false
        conv q=256 k=3 groups=2 post=false";
    let lbc = "input c=3 h=13 w=13
        lbc m=96 q=256 k=11
        lbc m=256 q=256 k=5
        lbc m=384 q=256 k=3
        lbc m=384 q=256 k=3
        lbc m=256 q=256 k=3";
    let cnn = count_params(&NetworkSpec::parse(cnn).unwrap()).unwrap().learnable;
    let lbc = count_params(&NetworkSpec::parse(lbc).unwrap()).unwrap().learnable;
    let ratio = cnn as f64 / lbc as f64;
    verdict(
        cnn == 2_332_704 && lbc == 352_256 && (ratio - 6.622).abs() <= 0.001,
        format!("CNN {cnn}, LBC {lbc}, ratio {ratio:.4}"),
    )
}

fn sparse_dense_equivalence() -> Verdict {
    let mut r = rng::seeded(4);
    let mut worst: f64 = 0.0;
    let mut ops = OpCounter::default();
    for case in 0..500u64 {
        let n = r.random_range(1..=2);
        let p = r.random_range(1..=4);
        let m = r.random_range(1..=16);
        let k = [1, 3, 5][r.random_range(0..3)];
        let h = r.random_range(k.max(3)..=12);
        let w = r.random_range(k.max(3)..=12);
        let sparsity = r.random_range(0.01..=1.0);
        let stride = if case % 5 == 4 { 2 } else { 1 };
        let geom = ConvGeometry {
            stride,
            ..ConvGeometry::same(k)
        };
        let bank = generate_bank(m, p, k, k, sparsity, case).unwrap();
        let x = random(&[n, p, h, w], 1000 + case);
        let dense = bank.densify();
        let ys = conv2d_sparse_binary(&x, &bank, geom, &mut ops).unwrap();
        let yd = conv2d_dense(&x, &dense, geom, &mut OpCounter::default()).unwrap();
        let g = random(ys.shape(), 2000 + case);
        let gs = conv2d_sparse_binary_backward(&x, &bank, &g, geom, &mut ops).unwrap();
        let (gd, _) = conv2d_dense_backward(&x, &dense, &g, geom, &mut OpCounter::default()).unwrap();
        worst = worst.max(ys.max_abs_diff(&yd).unwrap()).max(gs.max_abs_diff(&gd).unwrap());
    }
    verdict(
        worst <= 1e-12 && ops.multiplications == 0,
        format!(
            "max deviation {worst:.3e}, sparse-path multiplications {}",
            ops.multiplications
        ),
    )
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let nets = [
        (
            "lbc-sigmoid",
            "input c=2 h=6 w=6\nlbc m=8 q=4 k=3 act=sigmoid\nres{ lbc m=8 q=4 k=3 act=sigmoid }\navgpool out=2\nfc out=3",
        ),
        ("dense-conv", "input c=2 h=5 w=5\nconv q=4 k=3 act=sigmoid post=false\navgpool out=2\nfc out=3"),
        ("1x1", "input c=6 h=4 w=4\nconv q=5 k=1 act=sigmoid post=false\navgpool out=2\nfc out=3"),
        ("fc", "input c=1 h=4 w=4\nfc out=8 act=sigmoid\nfc out=3"),
        (
            "lbc-relu",
            "input c=2 h=6 w=6\nconv q=4 k=3 act=none post=false\nres{ lbc m=8 q=4 k=3 act=relu }\navgpool out=2\nfc out=3",
        ),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (i, (name, text)) in nets.iter().enumerate() {
        let spec = NetworkSpec::parse(text).unwrap();
        let net = Network::build(&spec, 10 + i as u64).unwrap();
        let (c, h, w) = spec.input;
        let x = random(&[3, c, h, w], 20 + i as u64);
        let rep = grad_check(&net, &x, &[0, 1, 2], &GradCheckOptions::default()).unwrap();
        ok &= rep.max_rel_err < 1e-5 && rep.checked > 0;
        parts.push(format!("{name} {:.1e} ({} checked)", rep.max_rel_err, rep.checked));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(ok && secs < 60.0, format!("{}; {secs:.1} s", parts.join(", ")))
}

fn nmse_trends() -> Verdict {
    let start = Instant::now();
    let images = synthetic_gaussian(100, 3, 32, 32, 42).unwrap().images;
    let cfg = ApproxExperimentConfig {
        seed: 42,
        ..Default::default()
    };
    let rows = nmse_curve(&cfg, &images).unwrap();
    let at = |s: f64, m: usize| {
        rows.iter()
            .find(|r| (r.sparsity - s).abs() < 1e-9 && r.m == m)
            .map(|r| r.mean)
            .unwrap()
    };
    let mut ordered = true;
    for i in 1..=9 {
        let s = i as f64 / 10.0;
        ordered &= at(s, 512) <= at(s, 128) && at(s, 128) <= at(s, 64);
    }
    let (n09, n10) = (at(0.9, 128), at(1.0, 128));
    let secs = start.elapsed().as_secs_f64();
    verdict(
        ordered && n10 > n09 && secs < 600.0,
        format!(
            "m-ordering {}, m=128: nmse(0.9)={n09:.5} nmse(1.0)={n10:.5}, {secs:.0} s",
            if ordered { "holds" } else { "violated" }
        ),
    )
}

/// Exact `P(b.x >= thr)` for one uniformly random sign vector `b`, by walking
/// all `2^n` sign patterns in Gray-code order.
fn exact_single_row_probability(x: &[f64], thr: f64) -> f64 {
    let n = x.len();
    let exact = |bits: u64| -> f64 {
        x.iter()
            .enumerate()
            .map(|(j, v)| if bits >> j & 1 == 1 { *v } else { -*v })
            .sum()
    };
    let mut bits = 0u64;
    let mut s = exact(0);
    let mut hits = u64::from(s >= thr);
    for step in 1u64..(1 << n) {
        let j = step.trailing_zeros() as usize;
        bits ^= 1 << j;
        if step % (1 << 20) == 0 {
            s = exact(bits);
        } else if bits >> j & 1 == 1 {
            s += 2.0 * x[j];
        } else {
            s -= 2.0 * x[j];
        }
        hits += u64::from(s >= thr);
    }
    hits as f64 / (1u64 << n) as f64
}

fn theorem1() -> Verdict {
    let (n, t, trials, seed) = (27, 0.5_f64, 10_000, 2017);
    let x = theorem1_vector(n, seed);
    let thr = (1.0 - t).sqrt() * x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let p1 = exact_single_row_probability(&x, thr);
    let expected = |m: i32| 1.0 - (1.0 - p1).powi(m);
    let emp: Vec<f64> = [8, 64, 512]
        .iter()
        .map(|&m| theorem1_montecarlo(n, m, t, trials, seed).unwrap())
        .collect();
    let monotone = emp.windows(2).all(|w| w[1] >= w[0] - 0.02);
    let reference = expected(512);
    verdict(
        emp[2] >= reference - 0.01 && monotone,
        format!(
            "m=512: empirical {:.4} vs exact {reference:.4}; m=8/64/512: {:.4}/{:.4}/{:.4} (exact {:.4}/{:.4}/{:.4})",
            emp[2],
            emp[0],
            emp[1],
            emp[2],
            expected(8),
            expected(64),
            reference
        ),
    )
}

struct Run {
    net: Network,
    metrics: RunMetrics,
    elapsed: Duration,
    hashes_before: Vec<u64>,
}

fn desk_net(kind: &str) -> NetworkSpec {
    let block = match kind {
        "cnn" => "conv q=32 k=3 act=relu post=true",
        _ => "lbc m=32 q=32 k=3 sparsity=0.5 act=relu",
    };
    let mut text = String::new();
    if kind == "shared" {
        text.push_str("shared-bank\n");
    }
    text.push_str("input c=1 h=32 w=32\nconv q=32 k=1 act=none post=false\n");
    for _ in 0..4 {
        text.push_str(&format!("res{{ {block} }}\n"));
    }
    text.push_str("avgpool out=6\nfc out=10\n");
    NetworkSpec::parse(&text).unwrap()
}

fn desk_run(kind: &str, train_set: &Dataset, test_set: &Dataset) -> Run {
    let mut net = Network::build(&desk_net(kind), 1).unwrap();
    let hashes_before = net.banks().iter().map(|b| b.content_hash()).collect();
    let mut cfg = TrainConfig::new(20, 8, 1);
    cfg.lr = 1e-3;
    cfg.optimizer = Optimizer::Momentum(0.9);
    cfg.test_every = 5;
    let start = Instant::now();
    let metrics = train_with(&mut net, train_set, Some(test_set), &cfg, |e| {
        eprintln!(
            "  [{kind}] epoch {:2} loss {:.4} train {:.3}{}",
            e.epoch,
            e.train_loss,
            e.train_acc,
            e.test_acc.map(|a| format!(" test {a:.3}")).unwrap_or_default()
        );
    })
    .unwrap();
    Run {
        net,
        metrics,
        elapsed: start.elapsed(),
        hashes_before,
    }
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

struct DeskRuns {
    lbc: Run,
    cnn: Run,
    shared: Run,
}

fn desk_training(runs: &DeskRuns) -> Verdict {
    let lbc = runs.lbc.metrics.final_test_acc().unwrap();
    let cnn = runs.cnn.metrics.final_test_acc().unwrap();
    let slowest = runs.lbc.elapsed.max(runs.cnn.elapsed).as_secs_f64() / 60.0;
    verdict(
        lbc >= 0.92 && (lbc - cnn).abs() <= 0.03 && slowest < 15.0,
        format!(
            "LBC {:.2}%, CNN {:.2}% ({:+.2} points); LBC {:.1} min + CNN {:.1} min",
            100.0 * lbc,
            100.0 * cnn,
            100.0 * (cnn - lbc),
            runs.lbc.elapsed.as_secs_f64() / 60.0,
            runs.cnn.elapsed.as_secs_f64() / 60.0
        ),
    )
}

fn weight_sharing(runs: &DeskRuns) -> Verdict {
    let unshared = runs.lbc.metrics.final_test_acc().unwrap();
    let shared = runs.shared.metrics.final_test_acc().unwrap();
    let size_unshared = model_to_bytes(&runs.lbc.net).unwrap().len();
    let size_shared = model_to_bytes(&runs.shared.net).unwrap().len();
    verdict(
        (shared - unshared).abs() <= 0.02 && size_shared < size_unshared,
        format!(
            "shared {:.2}% vs unshared {:.2}%; model file {size_shared} vs {size_unshared} bytes",
            100.0 * shared,
            100.0 * unshared
        ),
    )
}

fn anchor_immutability(runs: &DeskRuns) -> Verdict {
    let mut ok = true;
    let mut banks = 0;
    for run in [&runs.lbc, &runs.shared] {
        let after: Vec<u64> = run.net.banks().iter().map(|b| b.content_hash()).collect();
        ok &= after == run.hashes_before;
        for b in run.net.banks() {
            // the stored generator parameters must still reproduce the bank
            let lbcnn::anchor::Origin::Generated { sparsity, seed } = b.origin() else {
                ok = false;
                continue;
            };
            let fresh = generate_bank(b.m(), b.p(), b.h(), b.w(), sparsity, seed).unwrap();
            ok &= fresh.content_hash() == b.content_hash();
            banks += 1;
        }
    }
    verdict(ok, format!("{banks} banks checked after training"))
}

fn decorrelation(runs: &DeskRuns) -> Verdict {
    let lbc_layers = runs.lbc.net.layer_filters();
    let cnn_layers = runs.cnn.net.layer_filters();
    let mut ok = lbc_layers.len() == cnn_layers.len();
    let mut parts = Vec::new();
    for ((path, l), (_, c)) in lbc_layers.iter().zip(&cnn_layers) {
        let (LayerFilters::Bank(bank), LayerFilters::Dense(w)) = (l, c) else {
            continue;
        };
        let a = bank_decorrelation(bank).unwrap();
        let b = filter_decorrelation(w).unwrap();
        ok &= a <= b;
        parts.push(format!("block {path}: bank {a:.4} vs CNN {b:.4}"));
    }
    ok &= !parts.is_empty();
    verdict(ok, parts.join("; "))
}

fn main() {
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut record = |id: u32, name: &'static str, v: Verdict| {
        println!("{} {id:2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((id, name, v));
    };
    record(1, "lbp-equivalence", lbp_equivalence());
    record(2, "parameter-ratios", parameter_ratios());
    record(3, "alexnet-counts", alexnet_counts());
    record(4, "sparse-dense-equivalence", sparse_dense_equivalence());
    record(5, "gradient-correctness", gradient_correctness());
    record(6, "nmse-trends", nmse_trends());

    let dir = mnist_dir();
    let train_set = load_mnist_dir(&dir, "train").and_then(|d| d.head(2000));
    let test_set = load_mnist_dir(&dir, "t10k").and_then(|d| d.head(1000));
    match (train_set, test_set) {
        (Ok(train_set), Ok(test_set)) => {
            let runs = DeskRuns {
                lbc: desk_run("lbc", &train_set, &test_set),
                cnn: desk_run("cnn", &train_set, &test_set),
                shared: desk_run("shared", &train_set, &test_set),
            };
            record(7, "desk-training", desk_training(&runs));
            record(8, "weight-sharing", weight_sharing(&runs));
            record(9, "anchor-immutability", anchor_immutability(&runs));
            record(11, "decorrelation", decorrelation(&runs));
        }
        (Err(e), _) | (_, Err(e)) => {
            for (id, name) in [(7, "desk-training"), (8, "weight-sharing"), (9, "anchor-immutability"), (11, "decorrelation")] {
                record(id, name, verdict(false, format!("MNIST not loadable from {}: {e}", dir.display())));
            }
        }
    }
    record(10, "theorem1-montecarlo", theorem1());

    let failed = results.iter().filter(|(_, _, v)| !v.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    // report-only by default so the workspace test run stays green; CI can opt in
    if failed > 0 && std::env::var_os("LBCNN_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
