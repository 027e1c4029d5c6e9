//! Command-line surface: pretraining, adaptation, the fine-tuning baseline,
//! evaluation, and the capacity / data-fraction sweeps.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use resadapt::checkpoint::Checkpoint;
use resadapt::data::{subsample, write_manifest, write_text_corpus, ManifestEntry, TaskSpec};
use resadapt::train::{self, write_metrics_csv, BaseModel, EvalResult};
use resadapt::{count_adapter_params, AdapterConfig, Example};

use config::{parse_generator_spec, ExperimentConfig};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "RESADAPT_OUT";

#[derive(Debug, Parser)]
#[command(name = "resadapt", version, about = "Residual adapters for a toy transformer NMT system")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and freeze a base model on the config's pretraining tasks.
    Pretrain(PretrainArgs),
    /// Train an adapter bundle for one task on top of a frozen base.
    Adapt(AdaptArgs),
    /// Full fine-tuning baseline: continue training every parameter.
    Finetune(FinetuneArgs),
    /// Print BLEU, token accuracy and loss on one split.
    Evaluate(EvaluateArgs),
    /// Translate stdin to stdout, one sentence per line.
    Translate(TranslateArgs),
    /// Per-task adapter parameter counts and fractions of the base.
    ParamsReport(ParamsReportArgs),
    /// Adapter quality as a function of bottleneck size.
    SweepCapacity(SweepCapacityArgs),
    /// Adapter vs fine-tuning quality as a function of training data size.
    SweepDatafraction(SweepDataArgs),
    /// Generate synthetic corpora and a manifest from a generator spec.
    GenTasks(GenTasksArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct PhaseArgs {
    #[arg(long)]
    pub base: PathBuf,
    /// Experiment config providing the task data and phase settings.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fraction of the task's training pairs to use.
    #[arg(long, default_value_t = 1.0)]
    pub fraction: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub phase: PhaseArgs,
    #[arg(long)]
    pub bottleneck: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub phase: PhaseArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub task: String,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long)]
    pub task: String,
}

#[derive(Debug, Args)]
pub struct ParamsReportArgs {
    #[arg(long, conflicts_with_all = ["d", "sites", "base_params"])]
    pub base: Option<PathBuf>,
    #[arg(long = "bundle", requires = "base")]
    pub bundles: Vec<PathBuf>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub b: Option<usize>,
    #[arg(long)]
    pub sites: Option<usize>,
    #[arg(long)]
    pub base_params: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepCommon {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "dev")]
    pub split: String,
    /// Number of sweep points run concurrently as separate processes.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepCapacityArgs {
    #[command(flatten)]
    pub common: SweepCommon,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64")]
    pub bottlenecks: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct SweepDataArgs {
    #[command(flatten)]
    pub common: SweepCommon,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.25,0.5,1.0")]
    pub fractions: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "adapter,finetune")]
    pub modes: Vec<String>,
    #[arg(long)]
    pub bottleneck: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenTasksArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => cmd_pretrain(&a),
        Command::Adapt(a) => cmd_adapt(&a),
        Command::Finetune(a) => cmd_finetune(&a),
        Command::Evaluate(a) => {
            let r = cmd_evaluate(&a)?;
            println!(
                "task={} split={} bleu={} accuracy={} loss={}",
                a.task,
                a.split,
                r.bleu.unwrap_or(0.0),
                r.token_accuracy,
                r.loss
            );
            Ok(())
        }
        Command::Translate(a) => cmd_translate(&a),
        Command::ParamsReport(a) => {
            print!("{}", cmd_params_report(&a)?);
            Ok(())
        }
        Command::SweepCapacity(a) => cmd_sweep_capacity(&a),
        Command::SweepDatafraction(a) => cmd_sweep_datafraction(&a),
        Command::GenTasks(a) => cmd_gen_tasks(&a),
    }
}

/// Explicit flag, then the config's `[output] dir`, then `$RESADAPT_OUT`, then `runs`.
pub fn output_dir(flag: Option<&Path>, cfg: Option<&ExperimentConfig>) -> Result<PathBuf> {
    let dir = match (flag, cfg.and_then(|c| c.out_dir.as_deref())) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => p.to_path_buf(),
        (None, None) => std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs")),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_base(path: &Path) -> Result<BaseModel> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(BaseModel::from_checkpoint(&ck)?)
}

fn summary(r: &EvalResult) -> String {
    format!(
        "dev_loss={} dev_accuracy={} dev_bleu={}",
        r.loss,
        r.token_accuracy,
        r.bleu.map(|b| b.to_string()).unwrap_or_else(|| "-".into())
    )
}

pub fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let out = output_dir(a.out.as_deref(), Some(&cfg))?;
    let texts = cfg.load_tasks()?;
    let vocab = cfg.build_vocab(&texts);
    let specs = texts
        .iter()
        .filter(|t| cfg.is_pretrain_task(&t.id))
        .map(|t| t.encode(&vocab))
        .collect::<resadapt::Result<Vec<_>>>()?;
    let (base, report) = train::pretrain(&cfg.model, &vocab, &specs, cfg.mode, &cfg.pretrain)?;
    base.to_checkpoint("base").save(&out.join("base.ckpt"))?;
    write_metrics_csv(&out.join("pretrain_metrics.csv"), &report.metrics)?;
    fs::write(out.join("config.ini"), cfg.render())?;
    println!(
        "base={} best_step={} {}",
        out.join("base.ckpt").display(),
        report.best_step,
        summary(&report.best)
    );
    Ok(())
}

/// Encodes `task` from the config with the base vocabulary, optionally
/// subsampling its training split.
fn load_task(cfg: &ExperimentConfig, base: &BaseModel, task: &str, fraction: f64, seed: u64) -> Result<TaskSpec> {
    let texts = cfg.load_tasks()?;
    let text = texts
        .iter()
        .find(|t| t.id == task)
        .ok_or_else(|| resadapt::Error::TaskNotFound(task.to_string()))?;
    let mut spec = base.encode_task(text)?;
    if fraction != 1.0 {
        spec.train.pairs = subsample(&spec.train.pairs, fraction, seed)?;
        spec.size = spec.train.pairs.len();
    }
    Ok(spec)
}

fn phase_setup(
    p: &PhaseArgs,
    phase: fn(&ExperimentConfig) -> &config::PhaseConfig,
) -> Result<(ExperimentConfig, BaseModel, TaskSpec, train::TrainConfig, PathBuf)> {
    let cfg = ExperimentConfig::load(&p.config)?;
    let base = load_base(&p.base)?;
    let mut tc = phase(&cfg).resolve(base.lr_base, base.warmup);
    if let Some(s) = p.steps {
        tc.steps = s;
    }
    if let Some(s) = p.eval_every {
        tc.eval_every = s;
    }
    if let Some(s) = p.seed {
        tc.seed = s;
    }
    let task = load_task(&cfg, &base, &p.task, p.fraction, tc.seed)?;
    let out = output_dir(p.out.as_deref(), Some(&cfg))?;
    Ok((cfg, base, task, tc, out))
}

pub fn cmd_adapt(a: &AdaptArgs) -> Result<()> {
    let (cfg, base, task, tc, out) = phase_setup(&a.phase, |c| &c.adapt)?;
    let mut ac = cfg.adapter_for(&task.id);
    if let Some(b) = a.bottleneck {
        ac = AdapterConfig { bottleneck: b, ..ac };
    }
    let (bundle, report) = train::adapt(&base, &task, ac, &tc)?;
    let path = out.join(format!("bundle-{}.ckpt", task.id));
    base.bundle_checkpoint(&bundle).save(&path)?;
    write_metrics_csv(&out.join(format!("adapt-{}-metrics.csv", task.id)), &report.metrics)?;
    println!(
        "bundle={} params={} best_step={} {}",
        path.display(),
        bundle.param_count(),
        report.best_step,
        summary(&report.best)
    );
    Ok(())
}

pub fn cmd_finetune(a: &FinetuneArgs) -> Result<()> {
    let (_, base, task, tc, out) = phase_setup(&a.phase, |c| &c.finetune)?;
    let (tuned, report) = train::full_finetune(&base, &task, &tc)?;
    let path = out.join(format!("finetune-{}.ckpt", task.id));
    tuned.to_checkpoint("full").save(&path)?;
    write_metrics_csv(&out.join(format!("finetune-{}-metrics.csv", task.id)), &report.metrics)?;
    println!(
        "checkpoint={} best_step={} {}",
        path.display(),
        report.best_step,
        summary(&report.best)
    );
    Ok(())
}

/// Base model with the bundle (if any) injected, plus the adapter task to run with.
fn model_with_bundle(base: &Path, bundle: Option<&Path>, task: &str) -> Result<(BaseModel, Option<String>)> {
    let mut base = load_base(base)?;
    let Some(path) = bundle else {
        return Ok((base, None));
    };
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let bundle = base.load_bundle(&ck)?;
    ensure!(
        bundle.task == task,
        "bundle was trained for task {} but --task is {task}",
        bundle.task
    );
    base.model.inject(bundle)?;
    Ok((base, Some(task.to_string())))
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<EvalResult> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let (base, adapter) = model_with_bundle(&a.base, a.bundle.as_deref(), &a.task)?;
    let task = load_task(&cfg, &base, &a.task, 1.0, 0)?;
    let data = base.condition(&task.id, &task.split(&a.split)?.pairs)?;
    Ok(train::evaluate(&base.model, adapter.as_deref(), &data, true)?)
}

pub fn cmd_translate(a: &TranslateArgs) -> Result<()> {
    let (base, adapter) = model_with_bundle(&a.base, a.bundle.as_deref(), &a.task)?;
    let lines: Vec<String> = std::io::stdin().lock().lines().collect::<std::io::Result<_>>()?;
    let examples: Vec<Example> = lines
        .iter()
        .map(|l| Example {
            src: base.vocab.encode(l),
            tgt: Vec::new(),
        })
        .collect();
    let examples = base.condition(&a.task, &examples)?;
    let hyps = train::translate_all(&base.model, adapter.as_deref(), &examples)?;
    let mut out = std::io::stdout().lock();
    for h in hyps {
        writeln!(out, "{}", base.vocab.decode(&h))?;
    }
    Ok(())
}

pub const PARAMS_HEADER: &str = "task,bottleneck,adapter_params,base_params,fraction_percent";

pub fn cmd_params_report(a: &ParamsReportArgs) -> Result<String> {
    let mut out = String::from(PARAMS_HEADER);
    out.push('\n');
    let pct = |n: usize, total: usize| 100.0 * n as f64 / total as f64;
    if let Some(path) = &a.base {
        let base = load_base(path)?;
        let cfg = base.model.config();
        let total = base.model.base_param_count();
        let b_only = a.b.map(|b| ("-".to_string(), b));
        let mut rows: Vec<(String, usize, usize)> = Vec::new();
        if let Some((t, b)) = b_only {
            rows.push((t, b, count_adapter_params(cfg.d_model, b, cfg.adapter_sites())));
        }
        for p in &a.bundles {
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            let bundle = base.load_bundle(&ck)?;
            let b = bundle.config.bottleneck;
            let n = bundle.param_count();
            debug_assert_eq!(n, count_adapter_params(cfg.d_model, b, cfg.adapter_sites()));
            rows.push((bundle.task, b, n));
        }
        if rows.is_empty() {
            bail!("params-report with --base needs --bundle or --b");
        }
        for (t, b, n) in rows {
            let _ = writeln!(out, "{t},{b},{n},{total},{}", pct(n, total));
        }
    } else {
        let (Some(d), Some(b), Some(sites), Some(total)) = (a.d, a.b, a.sites, a.base_params) else {
            bail!("params-report needs --base, or all of --d --b --sites --base-params");
        };
        ensure!(total > 0, "--base-params must be positive");
        let n = count_adapter_params(d, b, sites);
        let _ = writeln!(out, "-,{b},{n},{total},{}", pct(n, total));
    }
    Ok(out)
}

/// Runs each point's argument list through this binary, either in-process
/// or as up to `parallel` concurrent child processes.
fn run_points(points: &[Vec<String>], parallel: usize) -> Result<()> {
    ensure!(parallel >= 1, "--parallel must be at least 1");
    if parallel == 1 {
        for args in points {
            let cli = Cli::try_parse_from(std::iter::once("resadapt".to_string()).chain(args.iter().cloned()))?;
            run(cli)?;
        }
        return Ok(());
    }
    let exe = std::env::current_exe()?;
    for wave in points.chunks(parallel) {
        let children = wave
            .iter()
            .map(|args| {
                Process::new(&exe)
                    .args(args)
                    .stdout(std::process::Stdio::null())
                    .stderr(std::process::Stdio::piped())
                    .spawn()
                    .map(|c| (args, c))
            })
            .collect::<std::io::Result<Vec<_>>>()?;
        for (args, child) in children {
            let res = child.wait_with_output()?;
            if !res.status.success() {
                let err = String::from_utf8_lossy(&res.stderr);
                bail!("sweep point `{}` failed: {}", args.join(" "), err.trim());
            }
        }
    }
    Ok(())
}

fn path_arg(p: &Path) -> String {
    p.display().to_string()
}

fn common_args(c: &SweepCommon, cmd: &str, dir: &Path) -> Vec<String> {
    let mut v = vec![
        cmd.to_string(),
        "--base".into(),
        path_arg(&c.base),
        "--config".into(),
        path_arg(&c.config),
        "--task".into(),
        c.task.clone(),
        "--out".into(),
        path_arg(dir),
    ];
    if let Some(s) = c.steps {
        v.extend(["--steps".into(), s.to_string()]);
    }
    if let Some(s) = c.seed {
        v.extend(["--seed".into(), s.to_string()]);
    }
    v
}

fn eval_point(c: &SweepCommon, bundle: Option<PathBuf>, base: PathBuf) -> Result<EvalResult> {
    cmd_evaluate(&EvaluateArgs {
        base,
        bundle,
        config: c.config.clone(),
        task: c.task.clone(),
        split: c.split.clone(),
    })
}

fn finish_csv(path: &Path, csv: &str) -> Result<()> {
    fs::write(path, csv)?;
    print!("{csv}");
    Ok(())
}

pub fn cmd_sweep_capacity(a: &SweepCapacityArgs) -> Result<()> {
    let c = &a.common;
    let cfg = ExperimentConfig::load(&c.config)?;
    let out = output_dir(c.out.as_deref(), Some(&cfg))?;
    ensure!(!a.bottlenecks.is_empty(), "no bottlenecks given");
    let points: Vec<Vec<String>> = a
        .bottlenecks
        .iter()
        .map(|b| {
            let mut v = common_args(c, "adapt", &out.join(format!("b{b}")));
            v.extend(["--bottleneck".into(), b.to_string()]);
            v
        })
        .collect();
    run_points(&points, c.parallel)?;
    let base = load_base(&c.base)?;
    let mc = base.model.config();
    let total = base.model.base_param_count();
    let mut csv = String::from("bottleneck,adapter_params,param_fraction,bleu,accuracy,loss\n");
    for b in &a.bottlenecks {
        let bundle = out.join(format!("b{b}")).join(format!("bundle-{}.ckpt", c.task));
        let r = eval_point(c, Some(bundle), c.base.clone())?;
        let n = count_adapter_params(mc.d_model, *b, mc.adapter_sites());
        let _ = writeln!(
            csv,
            "{b},{n},{},{},{},{}",
            n as f64 / total as f64,
            r.bleu.unwrap_or(0.0),
            r.token_accuracy,
            r.loss
        );
    }
    finish_csv(&out.join("sweep_capacity.csv"), &csv)
}

pub fn cmd_sweep_datafraction(a: &SweepDataArgs) -> Result<()> {
    let c = &a.common;
    let cfg = ExperimentConfig::load(&c.config)?;
    let out = output_dir(c.out.as_deref(), Some(&cfg))?;
    for m in &a.modes {
        ensure!(m == "adapter" || m == "finetune", "unknown mode {m}: use adapter or finetune");
    }
    for f in &a.fractions {
        ensure!(*f > 0.0 && *f <= 1.0, "fraction {f} outside (0, 1]");
    }
    let dir = |f: f64, m: &str| out.join(format!("{m}-f{f}"));
    let mut points = Vec::new();
    for &f in &a.fractions {
        for m in &a.modes {
            let cmd = if m == "adapter" { "adapt" } else { "finetune" };
            let mut v = common_args(c, cmd, &dir(f, m));
            v.extend(["--fraction".into(), f.to_string()]);
            if let (Some(b), "adapter") = (a.bottleneck, m.as_str()) {
                v.extend(["--bottleneck".into(), b.to_string()]);
            }
            points.push(v);
        }
    }
    run_points(&points, c.parallel)?;
    let base = load_base(&c.base)?;
    let full = load_task(&cfg, &base, &c.task, 1.0, 0)?.train.pairs.len();
    let mut csv = String::from("fraction,mode,train_pairs,bleu,accuracy,loss\n");
    for &f in &a.fractions {
        for m in &a.modes {
            let d = dir(f, m);
            let r = if m == "adapter" {
                eval_point(c, Some(d.join(format!("bundle-{}.ckpt", c.task))), c.base.clone())?
            } else {
                eval_point(c, None, d.join(format!("finetune-{}.ckpt", c.task)))?
            };
            let pairs = ((f * full as f64).round() as usize).max(1);
            let _ = writeln!(
                csv,
                "{f},{m},{pairs},{},{},{}",
                r.bleu.unwrap_or(0.0),
                r.token_accuracy,
                r.loss
            );
        }
    }
    finish_csv(&out.join("sweep_datafraction.csv"), &csv)
}

pub fn cmd_gen_tasks(a: &GenTasksArgs) -> Result<()> {
    let text = fs::read_to_string(&a.spec).with_context(|| format!("reading {}", a.spec.display()))?;
    let tasks = parse_generator_spec(&text, a.seed)?;
    fs::create_dir_all(&a.out)?;
    let mut entries = Vec::new();
    for g in &tasks {
        let t = resadapt::data::make_synthetic_task(&g.spec, g.seed)?;
        for (name, corpus) in [("train", &t.train), ("dev", &t.dev), ("test", &t.test)] {
            write_text_corpus(corpus, &a.out.join(format!("{}.{name}", t.id)))?;
        }
        entries.push(ManifestEntry {
            id: t.id.clone(),
            kind: t.kind,
            train: format!("{}.train", t.id),
            dev: format!("{}.dev", t.id),
            test: format!("{}.test", t.id),
            size: t.train.len(),
        });
    }
    let manifest = a.out.join("manifest.txt");
    write_manifest(&manifest, &entries)?;
    println!("manifest={} tasks={}", manifest.display(), entries.len());
    Ok(())
}
