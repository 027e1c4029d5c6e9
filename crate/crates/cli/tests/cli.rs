use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn resadapt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_resadapt"))
        .args(args)
        .env_remove("RESADAPT_OUT")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = resadapt(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Asserts failure with exactly one `error:` line on stderr.
fn fails(args: &[&str]) -> String {
    let out = resadapt(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const CONFIG: &str = "\
[model]
num_layers = 1
d_model = 8
d_ff = 16
num_heads = 2
dropout = 0.1

[data]
pretrain_tasks = base

[pretrain]
steps = 20
eval_every = 10
batch_tokens = 60
warmup = 10

[adapt]
steps = 10
eval_every = 5
batch_tokens = 60

[finetune]
steps = 10
eval_every = 5
batch_tokens = 60

[task.base]
content_size = 6
min_len = 2
max_len = 4
train = 100
dev = 10
test = 10

[task.other]
content_size = 6
min_len = 2
max_len = 4
shift = 0.5
train = 40
dev = 10
test = 10
";

fn pretrained(dir: &Path) -> (String, String) {
    let cfg = dir.join("exp.ini");
    fs::write(&cfg, CONFIG).unwrap();
    ok(&["pretrain", "--config", s(&cfg), "--out", s(dir)]);
    (s(&cfg).to_string(), s(&dir.join("base.ckpt")).to_string())
}

#[test]
fn params_report_arithmetic() {
    let big = ok(&["params-report", "--d", "1024", "--b", "2048", "--sites", "12", "--base-params", "375000000"]);
    let row: Vec<&str> = big.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[2], "50356224");
    assert!((row[4].parse::<f64>().unwrap() - 13.43).abs() < 0.005);

    let small = ok(&["params-report", "--d", "1024", "--b", "4", "--sites", "12", "--base-params", "375000000"]);
    let pct: f64 = small.lines().nth(1).unwrap().split(',').nth(4).unwrap().parse().unwrap();
    assert!((pct - 0.033).abs() < 5e-4);

    let none = ok(&["params-report", "--d", "1024", "--b", "0", "--sites", "12", "--base-params", "375000000"]);
    assert_eq!(none.lines().nth(1).unwrap().split(',').nth(2), Some("0"));
}

#[test]
fn contract_violations_exit_nonzero_with_one_line() {
    fails(&["params-report", "--d", "8"]);
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    fails(&["translate", "--base", s(&missing), "--task", "x"]);
    let bad = dir.path().join("bad.ini");
    fs::write(&bad, "[model]\nd_modle = 8\n").unwrap();
    let err = fails(&["pretrain", "--config", s(&bad), "--out", s(dir.path())]);
    assert!(err.contains("d_modle"));
}

#[test]
fn full_pipeline_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, base) = pretrained(dir.path());
    let out = s(dir.path());
    ok(&["adapt", "--base", &base, "--config", &cfg, "--task", "other", "--bottleneck", "2", "--out", out]);
    ok(&["finetune", "--base", &base, "--config", &cfg, "--task", "other", "--out", out]);
    for f in ["bundle-other.ckpt", "adapt-other-metrics.csv", "finetune-other.ckpt", "finetune-other-metrics.csv", "pretrain_metrics.csv", "config.ini"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(dir.path().join("adapt-other-metrics.csv")).unwrap();
    assert!(csv.starts_with("step,split,loss,accuracy,bleu\n"));

    let bundle = dir.path().join("bundle-other.ckpt");
    let line = ok(&["evaluate", "--base", &base, "--bundle", s(&bundle), "--config", &cfg, "--task", "other"]);
    for key in ["bleu=", "accuracy=", "loss="] {
        assert!(line.contains(key), "{line}");
    }
    let report = ok(&["params-report", "--base", &base, "--bundle", s(&bundle)]);
    let row: Vec<&str> = report.lines().nth(1).unwrap().split(',').collect();
    // 2 sites x (2·8·2 + 2·8)
    assert_eq!((row[0], row[1], row[2]), ("other", "2", "96"));

    // bundle/task mismatch, unknown task
    let e = fails(&["evaluate", "--base", &base, "--bundle", s(&bundle), "--config", &cfg, "--task", "base"]);
    assert!(e.contains("other"));
    fails(&["adapt", "--base", &base, "--config", &cfg, "--task", "missing", "--out", out]);

    // translate: one output line per input line
    let mut child = Command::new(env!("CARGO_BIN_EXE_resadapt"))
        .args(["translate", "--base", &base, "--bundle", s(&bundle), "--task", "other"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"s1 s2\ns3 s4 s5\n\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 3);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        let (cfg, base) = pretrained(d);
        ok(&["adapt", "--base", &base, "--config", &cfg, "--task", "other", "--out", s(d)]);
    }
    for f in ["base.ckpt", "pretrain_metrics.csv", "bundle-other.ckpt", "adapt-other-metrics.csv", "config.ini"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn saved_config_reruns_identically() {
    let a = tempfile::tempdir().unwrap();
    pretrained(a.path());
    let b = tempfile::tempdir().unwrap();
    let saved = a.path().join("config.ini");
    ok(&["pretrain", "--config", s(&saved), "--out", s(b.path())]);
    assert_eq!(
        fs::read(a.path().join("base.ckpt")).unwrap(),
        fs::read(b.path().join("base.ckpt")).unwrap()
    );
}

#[test]
fn sweeps_sequential_and_parallel_agree() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, base) = pretrained(dir.path());
    let seq = dir.path().join("seq");
    let par = dir.path().join("par");
    let cap = |out: &Path, n: &str| {
        ok(&["sweep-capacity", "--base", &base, "--config", &cfg, "--task", "other", "--bottlenecks", "0,1,3", "--parallel", n, "--out", s(out)]);
        fs::read_to_string(out.join("sweep_capacity.csv")).unwrap()
    };
    let a = cap(&seq, "1");
    let b = cap(&par, "2");
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 4);
    assert!(a.starts_with("bottleneck,adapter_params,param_fraction,bleu,accuracy,loss\n"));
    assert!(a.lines().nth(1).unwrap().starts_with("0,0,0,"));

    let data = |out: &Path, n: &str| {
        ok(&["sweep-datafraction", "--base", &base, "--config", &cfg, "--task", "other", "--fractions", "0.25,1.0", "--modes", "adapter,finetune", "--parallel", n, "--out", s(out)]);
        fs::read_to_string(out.join("sweep_datafraction.csv")).unwrap()
    };
    let a = data(&seq, "1");
    let b = data(&par, "3");
    assert_eq!(a, b);
    let rows: Vec<&str> = a.lines().collect();
    assert_eq!(rows[0], "fraction,mode,train_pairs,bleu,accuracy,loss");
    assert!(rows[1].starts_with("0.25,adapter,10,"));
    assert!(rows[4].starts_with("1,finetune,40,"));
}

#[test]
fn gen_tasks_feeds_a_manifest_config() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.ini");
    fs::write(&spec, "[task.alpha]\ncontent_size = 6\ntrain = 50\ndev = 5\ntest = 5\n\n[task.beta]\ncontent_size = 6\nshift = 0.5\ntrain = 20\ndev = 5\ntest = 5\n").unwrap();
    let data = dir.path().join("data");
    ok(&["gen-tasks", "--spec", s(&spec), "--seed", "3", "--out", s(&data)]);
    let manifest = fs::read_to_string(data.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 2);
    assert!(manifest.starts_with("id=alpha kind=domain size=50 "));
    assert_eq!(fs::read_to_string(data.join("alpha.train.src")).unwrap().lines().count(), 50);

    let cfg = dir.path().join("exp.ini");
    fs::write(
        &cfg,
        "[model]\nd_model = 8\nd_ff = 16\nnum_heads = 2\nnum_layers = 1\n\n[data]\nmanifest = data/manifest.txt\nmode = multilingual\n\n[pretrain]\nsteps = 5\neval_every = 5\nbatch_tokens = 40\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    ok(&["pretrain", "--config", s(&cfg), "--out", s(&out)]);
    let base = out.join("base.ckpt");
    // multilingual: both tasks were pretrained, so both can be adapted
    ok(&["adapt", "--base", s(&base), "--config", s(&cfg), "--task", "beta", "--steps", "2", "--out", s(&out)]);
}

#[test]
fn output_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.ini");
    fs::write(&cfg, CONFIG.replace("steps = 20", "steps = 2")).unwrap();
    let root = dir.path().join("root");
    let out = Command::new(env!("CARGO_BIN_EXE_resadapt"))
        .args(["pretrain", "--config", s(&cfg)])
        .env("RESADAPT_OUT", &root)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(root.join("base.ckpt").exists());
}
