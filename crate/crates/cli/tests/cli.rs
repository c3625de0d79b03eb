use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lbcnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lbcnn")).args(args).output().unwrap()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn no_subcommand_prints_synopsis_and_exits_1() {
    let out = lbcnn(&[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage:"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(lbcnn(&["count-params", "--bogus"]).status.code(), Some(1));
}

#[test]
fn runtime_failure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = lbcnn(&["count-params", "--spec", arg(&dir.path().join("missing.txt")), "--out", arg(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn count_params_reports_ratio_nine() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("net.txt");
    fs::write(&spec, "input c=16 h=8 w=8\nlbc m=16 q=16 k=3 sparsity=0.5\n").unwrap();
    let out = lbcnn(&["count-params", "--spec", arg(&spec), "--out", arg(dir.path())]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let row: Vec<&str> = stdout.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[4], "9");
    assert_eq!(fs::read_to_string(dir.path().join("params.csv")).unwrap(), stdout);
    assert!(dir.path().join("run.json").exists());
}

#[test]
fn synthetic_training_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = lbcnn(&[
            "train", "--dataset", "synthetic", "--epochs", "1", "--threads", "1", "--seed", "7",
            "--train-size", "64", "--test-size", "32", "--out", arg(&out_dir),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out_dir
    };
    let (a, b) = (run("a"), run("b"));
    let csv = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(csv, fs::read(b.join("metrics.csv")).unwrap());
    assert!(String::from_utf8_lossy(&csv).starts_with("epoch,train_loss,train_acc,test_acc,seconds\n"));
    assert_eq!(fs::read(a.join("model.lbcm")).unwrap(), fs::read(b.join("model.lbcm")).unwrap());

    // a rerun into the same directory overwrites rather than appends
    let again = run("a");
    assert_eq!(fs::read(again.join("metrics.csv")).unwrap(), csv);

    let out = lbcnn(&[
        "eval", "--model", arg(&a.join("model.lbcm")), "--dataset", "synthetic", "--test-size", "32", "--seed", "7",
        "--out", arg(&dir.path().join("eval")),
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("samples,accuracy\n32,"));
}

#[test]
fn lbp_encode_constant_image() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.pgm");
    let mut bytes = b"P5\n6 5\n255\n".to_vec();
    bytes.extend([77u8; 30]);
    fs::write(&input, bytes).unwrap();
    let output = dir.path().join("lbp").join("out.pgm");
    let out = lbcnn(&["lbp-encode", "--input", arg(&input), "--size", "3", "--out", arg(&output)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let encoded = fs::read(&output).unwrap();
    let header = b"P5\n6 5\n255\n";
    assert_eq!(&encoded[..header.len()], header);
    let px = &encoded[header.len()..];
    // interior pixels see eight equal neighbours
    for y in 1..4 {
        for x in 1..5 {
            assert_eq!(px[y * 6 + x], 255);
        }
    }
    assert!(dir.path().join("lbp").join("run.json").exists());
}

#[test]
fn analysis_subcommands_emit_their_csv_headers() {
    let dir = tempfile::tempdir().unwrap();
    let d = arg(dir.path());
    let cases: [(&[&str], &str, &str); 5] = [
        (&["approx-nmse", "--images", "2", "--m-grid", "8", "--sparsity-grid", "0.5,1.0", "--size", "8"], "nmse.csv", "sparsity,m,nmse_mean,nmse_std"),
        (&["decorr", "--m", "8", "--p", "2"], "decorr.csv", "layer,metric"),
        (&["bench-conv", "--size", "8", "--p", "2", "--m", "4", "--reps", "1"], "bench_conv.csv", "kernel,sparsity,mults,adds,wall_ns"),
        (&["grad-check"], "grad_check.csv", "max_rel_err,checked,excluded"),
        (&["theorem1-mc", "--trials", "200"], "theorem1.csv", "n,m,t,trials,probability"),
    ];
    for (args, file, header) in cases {
        let mut full = args.to_vec();
        full.extend(["--out", d]);
        let out = lbcnn(&full);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        let csv = fs::read_to_string(dir.path().join(file)).unwrap();
        assert_eq!(csv.lines().next(), Some(header), "{args:?}");
    }
    let bench = fs::read_to_string(dir.path().join("bench_conv.csv")).unwrap();
    for line in bench.lines().filter(|l| l.starts_with("sparse_binary")) {
        assert_eq!(line.split(',').nth(2), Some("0"));
    }
}
