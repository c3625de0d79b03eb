use std::fs;
use std::io;
use std::path::Path;
use std::time::Instant;

use lbcnn::analysis::{bank_decorrelation, filter_decorrelation, nmse_curve, theorem1_montecarlo, ApproxExperimentConfig};
use lbcnn::conv::{conv2d_dense, conv2d_sparse_binary};
use lbcnn::data::{load_mnist_dir, synthetic_gaussian};
use lbcnn::lbp::{lbp_encode_conv, LbpConfig};
use lbcnn::net::LayerFilters;
use lbcnn::pgm::{read_pgm, write_pgm};
use lbcnn::rng;
use lbcnn::train::{evaluate, grad_check, load_model, save_model, train_with, GradCheckOptions, Optimizer};
use lbcnn::{count_params, generate_bank, ConvGeometry, Dataset, Network, NetworkSpec, OpCounter, Tensor, TrainConfig};
use rand::Rng;
use serde_json::{json, Value};

use crate::{
    BenchArgs, Cli, Command, CountArgs, DataArgs, DatasetKind, DecorrArgs, EvalArgs, GradCheckArgs, LbpArgs, NmseArgs,
    Theorem1Args, TrainArgs,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Lib(#[from] lbcnn::Error),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

const SYNTHETIC_SIDE: usize = 32;

pub fn run(cli: &Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot start thread pool: {e}")))?;
    match &cli.command {
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::LbpEncode(a) => lbp_encode(cli, a),
        Command::CountParams(a) => count(cli, a),
        Command::ApproxNmse(a) => approx_nmse(cli, a),
        Command::Decorr(a) => decorr(cli, a),
        Command::BenchConv(a) => bench_conv(cli, a),
        Command::GradCheck(a) => grad_check_cmd(cli, a),
        Command::Theorem1Mc(a) => theorem1(cli, a),
    }
}

/// Writes `name` under `dir`, replacing any previous file.
fn write_artifact(dir: &Path, name: &str, contents: &[u8]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn write_run_json(dir: &Path, cli: &Cli, command: &str, config: Value) -> Result<()> {
    let doc = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cli.seed,
        "threads": cli.threads,
        "config": config,
    });
    let mut text = serde_json::to_string_pretty(&doc).map_err(io::Error::from)?;
    text.push('\n');
    write_artifact(dir, "run.json", text.as_bytes())
}

fn read_spec(path: &Path) -> Result<NetworkSpec> {
    Ok(NetworkSpec::parse(&fs::read_to_string(path)?)?)
}

fn take(ds: Dataset, n: Option<usize>) -> Result<Dataset> {
    Ok(match n {
        Some(n) => ds.head(n)?,
        None => ds,
    })
}

fn train_data(args: &DataArgs, seed: u64) -> Result<Dataset> {
    match args.dataset {
        DatasetKind::Mnist => take(load_mnist_dir(&args.data_dir, "train")?, args.train_size),
        DatasetKind::Synthetic => {
            let n = args.train_size.unwrap_or(512);
            Ok(synthetic_gaussian(n, 1, SYNTHETIC_SIDE, SYNTHETIC_SIDE, rng::derive(seed, 1))?)
        }
    }
}

fn test_data(args: &DataArgs, seed: u64) -> Result<Dataset> {
    match args.dataset {
        DatasetKind::Mnist => take(load_mnist_dir(&args.data_dir, "t10k")?, args.test_size),
        DatasetKind::Synthetic => {
            let n = args.test_size.unwrap_or(128);
            Ok(synthetic_gaussian(n, 1, SYNTHETIC_SIDE, SYNTHETIC_SIDE, rng::derive(seed, 2))?)
        }
    }
}

/// Stem 1x1 conv, four residual LBC blocks, 6x6 average pool and a classifier.
fn default_spec(ds: &Dataset) -> Result<NetworkSpec> {
    let (c, h, w) = ds.image_dims();
    let mut text = format!("input c={c} h={h} w={w}\nconv q=32 k=1 act=none post=false\n");
    for _ in 0..4 {
        text.push_str("res{ lbc m=32 q=32 k=3 sparsity=0.5 act=relu }\n");
    }
    text.push_str(&format!("avgpool out=6\nfc out={}\n", ds.classes));
    Ok(NetworkSpec::parse(&text)?)
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let train_set = train_data(&a.data, cli.seed)?;
    let test_set = test_data(&a.data, cli.seed)?;
    let spec = match &a.spec {
        Some(p) => read_spec(p)?,
        None => default_spec(&train_set)?,
    };
    for warning in spec.lint() {
        eprintln!("warning: {warning}");
    }
    let classes = spec.validate_classifier()?;
    if classes != train_set.classes {
        return Err(CliError::Usage(format!(
            "network has {classes} outputs but the dataset has {} classes",
            train_set.classes
        )));
    }
    let mut cfg = TrainConfig::new(a.epochs, a.batch_size, cli.seed);
    cfg.lr = a.lr;
    cfg.test_every = a.test_every;
    if a.momentum > 0.0 {
        cfg.optimizer = Optimizer::Momentum(a.momentum);
    }
    let mut net = Network::build(&spec, cli.seed)?;
    let metrics = train_with(&mut net, &train_set, Some(&test_set), &cfg, |e| {
        eprintln!(
            "epoch {} loss {:.4} train_acc {:.4}{}",
            e.epoch,
            e.train_loss,
            e.train_acc,
            e.test_acc.map(|a| format!(" test_acc {a:.4}")).unwrap_or_default()
        );
    })?;
    write_artifact(&a.out, "metrics.csv", metrics.to_csv(a.wall_clock).as_bytes())?;
    fs::create_dir_all(&a.out)?;
    save_model(&net, &a.out.join("model.lbcm"))?;
    write_run_json(
        &a.out,
        cli,
        "train",
        json!({
            "spec": spec.to_string(),
            "dataset": format!("{:?}", a.data.dataset).to_lowercase(),
            "train_samples": train_set.len(),
            "test_samples": test_set.len(),
            "epochs": a.epochs,
            "batch_size": a.batch_size,
            "lr": a.lr,
            "momentum": a.momentum,
            "schedule": cfg.schedule,
            "test_every": a.test_every,
            "learnable_params": net.learnable_count(),
            "multiplications": metrics.ops.multiplications,
            "additions": metrics.ops.additions,
        }),
    )?;
    if let Some(acc) = metrics.final_test_acc() {
        println!("test_acc {acc}");
    }
    Ok(())
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let net = load_model(&a.model)?;
    let ds = test_data(&a.data, cli.seed)?;
    let acc = evaluate(&net, &ds, 100)?;
    let csv = format!("samples,accuracy\n{},{acc}\n", ds.len());
    print!("{csv}");
    write_artifact(&a.out, "eval.csv", csv.as_bytes())?;
    write_run_json(
        &a.out,
        cli,
        "eval",
        json!({ "model": a.model, "dataset": format!("{:?}", a.data.dataset).to_lowercase() }),
    )
}

fn lbp_encode(cli: &Cli, a: &LbpArgs) -> Result<()> {
    let img = read_pgm(&a.input)?;
    let code = lbp_encode_conv(&img, &LbpConfig::new(usize::from(a.size))?)?;
    let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    write_pgm(&a.out, &code)?;
    write_run_json(dir, cli, "lbp-encode", json!({ "input": a.input, "size": a.size, "output": a.out }))
}

fn count(cli: &Cli, a: &CountArgs) -> Result<()> {
    let spec = read_spec(&a.spec)?;
    let c = count_params(&spec)?;
    let csv = format!(
        "learnable,fixed,lbc_learnable,cnn_equivalent,ratio_vs_cnn\n{},{},{},{},{}\n",
        c.learnable, c.fixed, c.lbc_learnable, c.cnn_equivalent, c.ratio_vs_cnn
    );
    print!("{csv}");
    write_artifact(&a.out, "params.csv", csv.as_bytes())?;
    write_run_json(&a.out, cli, "count-params", json!({ "spec": spec.to_string() }))
}

fn approx_nmse(cli: &Cli, a: &NmseArgs) -> Result<()> {
    if a.images == 0 {
        return Err(CliError::Usage("--images must be >= 1".into()));
    }
    let images = synthetic_gaussian(a.images, a.channels, a.size, a.size, cli.seed)?.images;
    let cfg = ApproxExperimentConfig {
        sparsity_grid: a.sparsity_grid.clone(),
        m_grid: a.m_grid.clone(),
        kernel: a.kernel,
        seed: cli.seed,
    };
    let mut csv = String::from("sparsity,m,nmse_mean,nmse_std\n");
    for r in nmse_curve(&cfg, &images)? {
        csv.push_str(&format!("{},{},{},{}\n", r.sparsity, r.m, r.mean, r.std));
    }
    print!("{csv}");
    write_artifact(&a.out, "nmse.csv", csv.as_bytes())?;
    write_run_json(
        &a.out,
        cli,
        "approx-nmse",
        json!({
            "sparsity_grid": a.sparsity_grid,
            "m_grid": a.m_grid,
            "images": a.images,
            "channels": a.channels,
            "size": a.size,
            "kernel": a.kernel,
        }),
    )
}

fn decorr(cli: &Cli, a: &DecorrArgs) -> Result<()> {
    let mut csv = String::from("layer,metric\n");
    match &a.model {
        Some(path) => {
            let net = load_model(path)?;
            for (layer, filters) in net.layer_filters() {
                let metric = match filters {
                    LayerFilters::Bank(b) => bank_decorrelation(b)?,
                    LayerFilters::Dense(w) => filter_decorrelation(w)?,
                };
                csv.push_str(&format!("{layer},{metric}\n"));
            }
        }
        None => {
            let bank = generate_bank(a.m, a.p, a.k, a.k, a.sparsity, cli.seed)?;
            csv.push_str(&format!("bank,{}\n", bank_decorrelation(&bank)?));
        }
    }
    print!("{csv}");
    write_artifact(&a.out, "decorr.csv", csv.as_bytes())?;
    write_run_json(
        &a.out,
        cli,
        "decorr",
        json!({ "model": a.model, "m": a.m, "p": a.p, "k": a.k, "sparsity": a.sparsity }),
    )
}

fn random_tensor(shape: &[usize], seed: u64) -> Result<Tensor> {
    let mut r = rng::seeded(seed);
    let len = shape.iter().product();
    Ok(Tensor::from_vec(shape, (0..len).map(|_| r.random_range(-1.0..1.0)).collect())?)
}

/// Fastest of `reps` timed calls, in nanoseconds.
fn fastest(reps: usize, mut f: impl FnMut() -> lbcnn::Result<()>) -> Result<u128> {
    let mut best = u128::MAX;
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        f()?;
        best = best.min(start.elapsed().as_nanos());
    }
    Ok(best)
}

fn bench_conv(cli: &Cli, a: &BenchArgs) -> Result<()> {
    if a.k.is_multiple_of(2) {
        return Err(CliError::Usage("--k must be odd".into()));
    }
    let x = random_tensor(&[a.batch, a.p, a.size, a.size], cli.seed)?;
    let geom = ConvGeometry::same(a.k);
    let mut csv = String::from("kernel,sparsity,mults,adds,wall_ns\n");
    for &s in &a.sparsity_grid {
        let bank = generate_bank(a.m, a.p, a.k, a.k, s, rng::derive(cli.seed, 1))?;
        let dense = bank.densify();
        let mut ops = OpCounter::default();
        conv2d_dense(&x, &dense, geom, &mut ops)?;
        let ns = fastest(a.reps, || conv2d_dense(&x, &dense, geom, &mut OpCounter::default()).map(drop))?;
        csv.push_str(&format!("dense,{s},{},{},{ns}\n", ops.multiplications, ops.additions));
        let mut ops = OpCounter::default();
        conv2d_sparse_binary(&x, &bank, geom, &mut ops)?;
        let ns = fastest(a.reps, || conv2d_sparse_binary(&x, &bank, geom, &mut OpCounter::default()).map(drop))?;
        csv.push_str(&format!("sparse_binary,{s},{},{},{ns}\n", ops.multiplications, ops.additions));
    }
    print!("{csv}");
    write_artifact(&a.out, "bench_conv.csv", csv.as_bytes())?;
    write_run_json(
        &a.out,
        cli,
        "bench-conv",
        json!({
            "batch": a.batch, "p": a.p, "m": a.m, "size": a.size, "k": a.k,
            "sparsity_grid": a.sparsity_grid, "reps": a.reps,
        }),
    )
}

const GRAD_CHECK_NET: &str = "input c=2 h=6 w=6
lbc m=8 q=4 k=3 sparsity=0.5 act=sigmoid
res{ lbc m=8 q=4 k=3 sparsity=0.5 act=sigmoid }
avgpool out=2
fc out=3
";

fn grad_check_cmd(cli: &Cli, a: &GradCheckArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => read_spec(p)?,
        None => NetworkSpec::parse(GRAD_CHECK_NET)?,
    };
    let classes = spec.validate_classifier()?;
    if a.batch == 0 {
        return Err(CliError::Usage("--batch must be >= 1".into()));
    }
    let net = Network::build(&spec, cli.seed)?;
    let (c, h, w) = spec.input;
    let x = random_tensor(&[a.batch, c, h, w], rng::derive(cli.seed, 1))?;
    let labels: Vec<usize> = (0..a.batch).map(|i| i % classes).collect();
    let opts = GradCheckOptions {
        eps: a.eps,
        coords: a.coords,
        seed: cli.seed,
        ..Default::default()
    };
    let rep = grad_check(&net, &x, &labels, &opts)?;
    let csv = format!(
        "max_rel_err,checked,excluded\n{},{},{}\n",
        rep.max_rel_err, rep.checked, rep.excluded
    );
    print!("{csv}");
    write_artifact(&a.out, "grad_check.csv", csv.as_bytes())?;
    write_run_json(
        &a.out,
        cli,
        "grad-check",
        json!({ "spec": spec.to_string(), "eps": a.eps, "coords": a.coords, "batch": a.batch, "tol": a.tol }),
    )?;
    if rep.max_rel_err >= a.tol {
        return Err(CliError::Check(format!(
            "max relative error {:.3e} exceeds {:.1e}",
            rep.max_rel_err, a.tol
        )));
    }
    Ok(())
}

fn theorem1(cli: &Cli, a: &Theorem1Args) -> Result<()> {
    let mut csv = String::from("n,m,t,trials,probability\n");
    for &m in &a.m_grid {
        let p = theorem1_montecarlo(a.n, m, a.t, a.trials, cli.seed)?;
        csv.push_str(&format!("{},{m},{},{},{p}\n", a.n, a.t, a.trials));
    }
    print!("{csv}");
    write_artifact(&a.out, "theorem1.csv", csv.as_bytes())?;
    write_run_json(
        &a.out,
        cli,
        "theorem1-mc",
        json!({ "n": a.n, "m_grid": a.m_grid, "t": a.t, "trials": a.trials }),
    )
}
