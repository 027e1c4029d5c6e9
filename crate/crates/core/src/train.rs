//! Two-phase training: pretrain a base model, freeze it, then train per-task
//! adapter bundles (or, as a baseline, keep fine-tuning every parameter).

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::{AdapterBundle, AdapterConfig, AdapterModule};
use crate::bleu::corpus_bleu;
use crate::checkpoint::{config_hash, read_model_config, write_model_config, Checkpoint};
use crate::data::{
    prepend_task_token, task_token, SampleStream, TaskSpec, TextTask, TokenMode, Vocab,
};
use crate::error::{contract, Error, Result};
use crate::optim::{lr_schedule, optimizer_step, AdamConfig, OptimizerState};
use crate::params::{ParameterStore, Partition};
use crate::transformer::{Example, ModelConfig, Seq2Seq, PAD, UNK};

/// How the base model is shared across tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SharingMode {
    /// One source domain; new domains may be added at adaptation time.
    Domain,
    /// All tasks trained jointly, each source prefixed with its task token.
    Multilingual,
}

impl SharingMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "domain" => Ok(SharingMode::Domain),
            "multilingual" => Ok(SharingMode::Multilingual),
            other => Err(contract(format!("unknown sharing mode {other}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SharingMode::Domain => "domain",
            SharingMode::Multilingual => "multilingual",
        }
    }
}

/// Dev metric used to pick the returned checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    DevLoss,
    DevBleu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub eval_every: u64,
    pub seed: u64,
    /// Target-token budget per batch.
    pub batch_tokens: usize,
    pub lr_base: f64,
    pub warmup: u64,
    pub temperature: f64,
    pub selection: Selection,
    pub eval_bleu: bool,
    /// Cap on dev pairs per task used at each evaluation.
    pub max_eval_pairs: Option<usize>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            eval_every: 100,
            seed: 1,
            batch_tokens: 1024,
            lr_base: 1.0,
            warmup: 400,
            temperature: 1.0,
            selection: Selection::DevLoss,
            eval_bleu: true,
            max_eval_pairs: None,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.eval_every == 0 {
            return Err(contract("eval_every must be at least 1"));
        }
        if self.batch_tokens == 0 {
            return Err(contract("batch_tokens must be at least 1"));
        }
        if self.selection == Selection::DevBleu && !self.eval_bleu {
            return Err(contract("BLEU-based selection requires eval_bleu"));
        }
        Ok(())
    }
}

/// One line of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub step: u64,
    pub split: String,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub bleu: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,split,loss,accuracy,bleu";

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(records: &[MetricRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.step,
            r.split,
            r.loss,
            opt_field(r.accuracy),
            opt_field(r.bleu)
        );
    }
    s
}

pub fn write_metrics_csv(path: &Path, records: &[MetricRecord]) -> Result<()> {
    std::fs::write(path, metrics_csv(records))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub token_accuracy: f64,
    pub bleu: Option<f64>,
}

const EVAL_CHUNK: usize = 64;

fn content(seq: &[usize]) -> &[usize] {
    let n = seq.len() - seq.iter().rev().take_while(|&&t| t == PAD).count();
    &seq[..n]
}

/// Greedy translations for `data` in fixed-size chunks.
pub fn translate_all(model: &Seq2Seq, task: Option<&str>, data: &[Example]) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_CHUNK) {
        let srcs: Vec<Vec<usize>> = chunk.iter().map(|e| e.src.clone()).collect();
        let longest = srcs.iter().map(Vec::len).max().unwrap_or(1);
        let steps = (2 * longest + 4).min(model.config().max_len.saturating_sub(1)).max(1);
        out.extend(model.translate(&srcs, task, steps)?);
    }
    Ok(out)
}

/// Teacher-forced loss and token accuracy, plus greedy-decoding BLEU when asked.
pub fn evaluate(
    model: &Seq2Seq,
    task: Option<&str>,
    data: &[Example],
    with_bleu: bool,
) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(contract("cannot evaluate on an empty split"));
    }
    let mut loss_sum = 0.0;
    let mut tokens = 0;
    let mut correct = 0;
    for chunk in data.chunks(EVAL_CHUNK) {
        let s = model.batch_stats(chunk, task)?;
        loss_sum += s.loss * s.tokens as f64;
        tokens += s.tokens;
        correct += s.correct;
    }
    let bleu = if with_bleu {
        let hyps = translate_all(model, task, data)?;
        let refs: Vec<Vec<usize>> = data.iter().map(|e| content(&e.tgt).to_vec()).collect();
        Some(corpus_bleu(&hyps, &refs, 4)?)
    } else {
        None
    };
    Ok(EvalResult {
        loss: loss_sum / tokens as f64,
        token_accuracy: correct as f64 / tokens as f64,
        bleu,
    })
}

/// A pretrained (or fully fine-tuned) model with everything needed to
/// adapt, evaluate and serialize it.
#[derive(Debug, Clone)]
pub struct BaseModel {
    pub model: Seq2Seq,
    pub vocab: Vocab,
    pub mode: SharingMode,
    /// Tasks seen during pretraining.
    pub tasks: Vec<String>,
    pub optimizer: OptimizerState,
    pub lr_base: f64,
    pub warmup: u64,
}

impl BaseModel {
    /// Task-token id in multilingual mode.
    pub fn task_token(&self, task: &str) -> Result<Option<usize>> {
        match self.mode {
            SharingMode::Domain => Ok(None),
            SharingMode::Multilingual => self
                .vocab
                .id(&task_token(task))
                .map(Some)
                .ok_or_else(|| Error::TaskNotFound(task.to_string())),
        }
    }

    /// Applies the base model's task conditioning to `examples`.
    pub fn condition(&self, task: &str, examples: &[Example]) -> Result<Vec<Example>> {
        condition(self.task_token(task)?, examples)
    }

    /// Tokenizes a text task with the base vocabulary. Words that cannot be
    /// represented at all are a vocabulary mismatch.
    pub fn encode_task(&self, task: &TextTask) -> Result<TaskSpec> {
        let spec = task.encode(&self.vocab)?;
        for split in [&spec.train, &spec.dev, &spec.test] {
            if split
                .pairs
                .iter()
                .any(|e| e.src.contains(&UNK) || e.tgt.contains(&UNK))
            {
                return Err(Error::VocabMismatch(format!(
                    "task {} has words outside the base vocabulary",
                    task.id
                )));
            }
        }
        Ok(spec)
    }

    fn check_ids(&self, task: &TaskSpec) -> Result<()> {
        let v = self.vocab.len();
        for split in [&task.train, &task.dev] {
            for e in &split.pairs {
                if let Some(&bad) = e.src.iter().chain(&e.tgt).find(|&&t| t >= v) {
                    return Err(Error::VocabMismatch(format!(
                        "token id {bad} outside base vocabulary of {v}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Serializes the base parameters and optimizer state. Adapter bundles
    /// are never included.
    pub fn to_checkpoint(&self, kind: &str) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set("kind", kind);
        write_model_config(&mut ck, self.model.config());
        ck.set("mode", self.mode.as_str());
        ck.set("tasks", self.tasks.join(","));
        ck.set("lr_base", self.lr_base);
        ck.set("warmup", self.warmup);
        ck.set("optim_step", self.optimizer.step);
        ck.set("vocab_mode", self.vocab.mode().as_str());
        ck.set("vocab_fingerprint", self.vocab.fingerprint());
        ck.set("vocab", self.vocab.tokens().join(" "));
        for (name, e) in self.model.store().iter() {
            if e.partition == Partition::Base {
                ck.tensors.insert(name.to_string(), e.tensor.clone());
            }
        }
        for (name, (m, v)) in &self.optimizer.moments {
            if let Some(e) = self.model.store().get(name) {
                if e.partition == Partition::Base {
                    let shape = e.tensor.shape().to_vec();
                    ck.tensors.insert(
                        format!("optim.m.{name}"),
                        crate::Tensor::new(shape.clone(), m.clone()).expect("moment shape"),
                    );
                    ck.tensors.insert(
                        format!("optim.v.{name}"),
                        crate::Tensor::new(shape, v.clone()).expect("moment shape"),
                    );
                }
            }
        }
        ck
    }

    /// Rebuilds a base model; every parameter comes back frozen.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let kind = ck.get("kind")?;
        if kind != "base" && kind != "full" {
            return Err(contract(format!("expected a base checkpoint, got {kind}")));
        }
        let config = read_model_config(ck)?;
        let tokens: Vec<String> = ck.get("vocab")?.split(' ').map(str::to_string).collect();
        let vocab = Vocab::from_tokens(tokens, TokenMode::parse(ck.get("vocab_mode")?)?);
        if vocab.len() != config.vocab_size {
            return Err(Error::VocabMismatch(format!(
                "header vocabulary has {} entries, model expects {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let mut store = ParameterStore::new();
        let mut optimizer = OptimizerState {
            step: ck.parse("optim_step")?,
            ..OptimizerState::default()
        };
        let mut moments_m = Vec::new();
        for (name, t) in &ck.tensors {
            if let Some(p) = name.strip_prefix("optim.m.") {
                moments_m.push((p.to_string(), t.data().to_vec()));
            } else if name.starts_with("optim.v.") {
                continue;
            } else {
                store.insert(name, t.clone(), Partition::Base)?;
            }
        }
        for (p, m) in moments_m {
            let v = ck
                .tensors
                .get(&format!("optim.v.{p}"))
                .ok_or_else(|| contract(format!("missing second moment for {p}")))?;
            optimizer.moments.insert(p, (m, v.data().to_vec()));
        }
        store.set_frozen_all(true);
        let reference = Seq2Seq::new(config.clone(), 0)?;
        for (name, e) in reference.store().iter() {
            let got = store
                .get(name)
                .ok_or_else(|| contract(format!("checkpoint lacks parameter {name}")))?;
            if got.tensor.shape() != e.tensor.shape() {
                return Err(contract(format!("shape mismatch for {name}")));
            }
        }
        let tasks = match ck.get("tasks")? {
            "" => Vec::new(),
            s => s.split(',').map(str::to_string).collect(),
        };
        Ok(BaseModel {
            model: Seq2Seq::from_parts(config, store, Default::default()),
            vocab,
            mode: SharingMode::parse(ck.get("mode")?)?,
            tasks,
            optimizer,
            lr_base: ck.parse("lr_base")?,
            warmup: ck.parse("warmup")?,
        })
    }

    /// Serializes one adapter bundle, bound to this base's configuration hash.
    pub fn bundle_checkpoint(&self, bundle: &AdapterBundle) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set("kind", "bundle");
        ck.set("task", &bundle.task);
        ck.set("bottleneck", bundle.config.bottleneck);
        ck.set("init_scale", bundle.config.init_scale);
        ck.set("d_model", bundle.d_model);
        ck.set("num_layers", bundle.num_layers);
        ck.set("config_hash", config_hash(self.model.config()));
        ck.set("vocab_fingerprint", self.vocab.fingerprint());
        for (name, t) in bundle.named_tensors() {
            ck.tensors.insert(name, t.clone());
        }
        ck
    }

    /// Loads a bundle checkpoint after checking it fits this base.
    pub fn load_bundle(&self, ck: &Checkpoint) -> Result<AdapterBundle> {
        if ck.get("kind")? != "bundle" {
            return Err(contract("expected a bundle checkpoint"));
        }
        let ours = config_hash(self.model.config());
        let theirs = ck.get("config_hash")?;
        if theirs != ours {
            return Err(Error::ConfigHash {
                bundle: theirs.to_string(),
                base: ours,
            });
        }
        let task = ck.get("task")?.to_string();
        let config = AdapterConfig {
            bottleneck: ck.parse("bottleneck")?,
            init_scale: ck.parse("init_scale")?,
        };
        let cfg = self.model.config();
        let mut modules = Vec::new();
        if config.bottleneck > 0 {
            for site in cfg.site_names() {
                let p = crate::adapters::param_prefix(&task, &site);
                let get = |k: &str| {
                    ck.tensors
                        .get(&format!("{p}.{k}"))
                        .cloned()
                        .ok_or_else(|| contract(format!("bundle lacks {p}.{k}")))
                };
                modules.push(AdapterModule {
                    ln_gain: get("ln_gain")?,
                    ln_bias: get("ln_bias")?,
                    w_down: get("w_down")?,
                    w_up: get("w_up")?,
                });
            }
        }
        let expected = modules.len() * 4;
        if ck.tensors.len() != expected {
            return Err(contract("bundle checkpoint holds unexpected tensors"));
        }
        Ok(AdapterBundle {
            task,
            config,
            d_model: cfg.d_model,
            num_layers: cfg.num_layers,
            modules,
        })
    }
}

fn condition(token: Option<usize>, examples: &[Example]) -> Result<Vec<Example>> {
    Ok(match token {
        Some(t) => examples.iter().map(|e| prepend_task_token(e, t)).collect(),
        None => examples.to_vec(),
    })
}

fn dev_slice<'a>(cfg: &TrainConfig, dev: &'a [Example]) -> &'a [Example] {
    match cfg.max_eval_pairs {
        Some(n) => &dev[..n.min(dev.len())],
        None => dev,
    }
}

/// Outcome of one training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub metrics: Vec<MetricRecord>,
    /// Step of the selected checkpoint (0 = the starting point).
    pub best_step: u64,
    pub best: EvalResult,
}

impl TrainReport {
    /// Dev records in step order.
    pub fn dev_curve(&self) -> Vec<&MetricRecord> {
        self.metrics.iter().filter(|r| r.split == "dev").collect()
    }
}

fn better(sel: Selection, cand: &EvalResult, best: &EvalResult) -> bool {
    match sel {
        Selection::DevLoss => cand.loss < best.loss,
        Selection::DevBleu => cand.bleu.unwrap_or(0.0) > best.bleu.unwrap_or(0.0),
    }
}

/// Shared loop: draws token-budget batches from the task stream, updates
/// every trainable parameter, evaluates on `dev` at step 0 and every
/// `eval_every` steps, and keeps the best snapshot of `snapshot`.
#[allow(clippy::too_many_arguments)]
fn run_loop<S>(
    model: &mut Seq2Seq,
    task: Option<&str>,
    train: Vec<&[Example]>,
    dev: &[Example],
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    mut snapshot: impl FnMut(&Seq2Seq, &OptimizerState) -> S,
) -> Result<(TrainReport, S)> {
    cfg.validate()?;
    let mut stream = SampleStream::new(train, cfg.temperature, cfg.seed)?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9));
    let mut metrics = Vec::new();
    let first = evaluate(model, task, dev, cfg.eval_bleu)?;
    metrics.push(dev_record(0, &first));
    let mut best = (0, first, snapshot(model, opt));
    let trainable = !model.store().trainable_names().is_empty();
    let mut running = (0.0, 0usize);
    for step in 1..=cfg.steps {
        if !trainable {
            break;
        }
        let mut batch = Vec::new();
        let mut budget = 0;
        while budget < cfg.batch_tokens {
            let (_, ex) = stream.next().expect("endless stream");
            budget += ex.tgt.len() + 1;
            batch.push(ex.clone());
        }
        let out = model.loss_and_grads(&batch, task, Some(&mut dropout_rng))?;
        let lr = lr_schedule(opt.step + 1, cfg.lr_base, cfg.warmup, model.config().d_model)?;
        optimizer_step(model.store_mut(), &out.grads, opt, lr, &cfg.adam)?;
        running.0 += out.loss;
        running.1 += 1;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            metrics.push(MetricRecord {
                step,
                split: "train".into(),
                loss: running.0 / running.1 as f64,
                accuracy: None,
                bleu: None,
            });
            running = (0.0, 0);
            let r = evaluate(model, task, dev, cfg.eval_bleu)?;
            metrics.push(dev_record(step, &r));
            if better(cfg.selection, &r, &best.1) {
                best = (step, r, snapshot(model, opt));
            }
        }
    }
    Ok((
        TrainReport {
            metrics,
            best_step: best.0,
            best: best.1,
        },
        best.2,
    ))
}

fn dev_record(step: u64, r: &EvalResult) -> MetricRecord {
    MetricRecord {
        step,
        split: "dev".into(),
        loss: r.loss,
        accuracy: Some(r.token_accuracy),
        bleu: r.bleu,
    }
}

/// Trains a fresh base model on all `tasks` drawn with temperature sampling,
/// returns the best-dev checkpoint with every parameter frozen.
pub fn pretrain(
    config: &ModelConfig,
    vocab: &Vocab,
    tasks: &[TaskSpec],
    mode: SharingMode,
    cfg: &TrainConfig,
) -> Result<(BaseModel, TrainReport)> {
    if tasks.is_empty() {
        return Err(contract("pretraining needs at least one task"));
    }
    let config = ModelConfig {
        vocab_size: vocab.len(),
        ..config.clone()
    };
    let mut base = BaseModel {
        model: Seq2Seq::new(config, cfg.seed)?,
        vocab: vocab.clone(),
        mode,
        tasks: tasks.iter().map(|t| t.id.clone()).collect(),
        optimizer: OptimizerState::new(),
        lr_base: cfg.lr_base,
        warmup: cfg.warmup,
    };
    let mut train = Vec::with_capacity(tasks.len());
    let mut dev = Vec::new();
    for t in tasks {
        train.push(base.condition(&t.id, &t.train.pairs)?);
        dev.extend(base.condition(&t.id, dev_slice(cfg, &t.dev.pairs))?);
    }
    let mut opt = OptimizerState::new();
    let (report, (store, best_opt)) = run_loop(
        &mut base.model,
        None,
        train.iter().map(Vec::as_slice).collect(),
        &dev,
        cfg,
        &mut opt,
        |m, o| (m.store().clone(), o.clone()),
    )?;
    *base.model.store_mut() = store;
    base.model.store_mut().set_frozen_all(true);
    base.optimizer = best_opt;
    Ok((base, report))
}

/// Trains `task`'s already injected bundle in place; every other parameter is
/// frozen. The model ends holding the best-dev bundle weights.
pub fn train_adapter(
    model: &mut Seq2Seq,
    task: &str,
    train: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    model.set_trainable(task)?;
    let part = Partition::Bundle(task.to_string());
    let mut opt = OptimizerState::new();
    let (report, best) = run_loop(model, Some(task), vec![train], dev, cfg, &mut opt, |m, _| {
        m.store()
            .iter()
            .filter(|(_, e)| e.partition == part)
            .map(|(n, e)| (n.to_string(), e.tensor.clone()))
            .collect::<Vec<_>>()
    })?;
    for (name, t) in best {
        model.store_mut().get_mut(&name).expect("bundle param").tensor = t;
    }
    model.store_mut().set_frozen_all(true);
    Ok(report)
}

/// Adds a fresh adapter bundle for `task` on top of the frozen base and
/// trains only that bundle, restarting the optimizer from step 0.
pub fn adapt(
    base: &BaseModel,
    task: &TaskSpec,
    adapter: AdapterConfig,
    cfg: &TrainConfig,
) -> Result<(AdapterBundle, TrainReport)> {
    if base.mode == SharingMode::Multilingual && !base.tasks.contains(&task.id) {
        return Err(contract(format!(
            "task {} was not part of multilingual pretraining",
            task.id
        )));
    }
    base.check_ids(task)?;
    let train = base.condition(&task.id, &task.train.pairs)?;
    let dev = base.condition(&task.id, dev_slice(cfg, &task.dev.pairs))?;
    let mut model = base.model.clone();
    if model.adapter_tasks().any(|(t, _)| t == task.id) {
        model.remove(&task.id)?;
    }
    model.add_task(&task.id, adapter, cfg.seed)?;
    let report = train_adapter(&mut model, &task.id, &train, &dev, cfg)?;
    Ok((model.bundle(&task.id)?, report))
}

/// Continues training every parameter on `task`, keeping the base's
/// optimizer moments and step counter (so the learning-rate schedule also
/// continues where pretraining stopped).
pub fn full_finetune(
    base: &BaseModel,
    task: &TaskSpec,
    cfg: &TrainConfig,
) -> Result<(BaseModel, TrainReport)> {
    base.check_ids(task)?;
    let token = match base.mode {
        SharingMode::Multilingual => base.task_token(&task.id)?,
        SharingMode::Domain => None,
    };
    let train = condition(token, &task.train.pairs)?;
    let dev = condition(token, dev_slice(cfg, &task.dev.pairs))?;
    let mut tuned = base.clone();
    for (_, e) in tuned.model.store_mut().iter_mut() {
        e.frozen = e.partition != Partition::Base;
    }
    let mut opt = base.optimizer.clone();
    let (report, (store, best_opt)) = run_loop(
        &mut tuned.model,
        None,
        vec![&train],
        &dev,
        cfg,
        &mut opt,
        |m, o| (m.store().clone(), o.clone()),
    )?;
    *tuned.model.store_mut() = store;
    tuned.model.store_mut().set_frozen_all(true);
    tuned.optimizer = best_opt;
    Ok((tuned, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, make_synthetic_task, SyntheticSpec};

    fn setup() -> (ModelConfig, Vocab, TaskSpec) {
        let spec = SyntheticSpec {
            content_size: 6,
            min_len: 2,
            max_len: 4,
            train: 60,
            dev: 10,
            test: 10,
            ..SyntheticSpec::default()
        };
        let text = make_synthetic_task(&spec, 3).unwrap();
        let vocab = build_vocab(
            text.train.pairs.iter().flat_map(|(a, b)| [a.as_str(), b.as_str()]),
            TokenMode::Word,
            100,
            &[],
        );
        let task = text.encode(&vocab).unwrap();
        let cfg = ModelConfig {
            num_layers: 1,
            d_model: 8,
            d_ff: 16,
            num_heads: 2,
            vocab_size: vocab.len(),
            max_len: 16,
            dropout: 0.0,
        };
        (cfg, vocab, task)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            steps: 6,
            eval_every: 3,
            batch_tokens: 20,
            warmup: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn metrics_csv_layout() {
        let recs = vec![MetricRecord {
            step: 3,
            split: "dev".into(),
            loss: 0.5,
            accuracy: Some(0.25),
            bleu: None,
        }];
        assert_eq!(metrics_csv(&recs), "step,split,loss,accuracy,bleu\n3,dev,0.5,0.25,\n");
    }

    #[test]
    fn pretrain_freezes_and_reports() {
        let (cfg, vocab, task) = setup();
        let (base, report) =
            pretrain(&cfg, &vocab, &[task], SharingMode::Domain, &quick()).unwrap();
        assert!(base.model.store().iter().all(|(_, e)| e.frozen));
        assert_eq!(report.dev_curve().len(), 3);
        assert!(base.optimizer.step <= 6);
    }

    #[test]
    fn base_checkpoint_round_trip() {
        let (cfg, vocab, task) = setup();
        let (base, _) = pretrain(&cfg, &vocab, &[task], SharingMode::Domain, &quick()).unwrap();
        let ck = base.to_checkpoint("base");
        let bytes = ck.to_bytes();
        let back = BaseModel::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.to_checkpoint("base").to_bytes(), bytes);
        assert_eq!(back.optimizer, base.optimizer);
        assert_eq!(back.vocab, base.vocab);
    }

    #[test]
    fn multilingual_adapt_requires_known_task() {
        let (cfg, _, _) = setup();
        let spec = SyntheticSpec {
            id: "xx".into(),
            content_size: 6,
            min_len: 2,
            max_len: 4,
            train: 30,
            dev: 5,
            test: 5,
            ..SyntheticSpec::default()
        };
        let text = make_synthetic_task(&spec, 1).unwrap();
        let vocab = build_vocab(
            text.train.pairs.iter().flat_map(|(a, b)| [a.as_str(), b.as_str()]),
            TokenMode::Word,
            100,
            &[task_token("xx")],
        );
        let task = text.encode(&vocab).unwrap();
        let (base, _) = pretrain(
            &cfg,
            &vocab,
            std::slice::from_ref(&task),
            SharingMode::Multilingual,
            &quick(),
        )
        .unwrap();
        assert!(adapt(&base, &task, AdapterConfig::new(2), &quick()).is_ok());
        let other = TaskSpec {
            id: "yy".into(),
            ..task
        };
        assert!(matches!(
            adapt(&base, &other, AdapterConfig::new(2), &quick()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn out_of_vocabulary_ids_rejected() {
        let (cfg, vocab, task) = setup();
        let (base, _) =
            pretrain(&cfg, &vocab, std::slice::from_ref(&task), SharingMode::Domain, &quick())
                .unwrap();
        let mut bad = task.clone();
        bad.train.pairs[0].tgt.push(vocab.len() + 3);
        assert!(matches!(
            adapt(&base, &bad, AdapterConfig::new(2), &quick()),
            Err(Error::VocabMismatch(_))
        ));
    }

    #[test]
    fn zero_bottleneck_adapt_is_a_no_op() {
        let (cfg, vocab, task) = setup();
        let (base, _) =
            pretrain(&cfg, &vocab, std::slice::from_ref(&task), SharingMode::Domain, &quick())
                .unwrap();
        let (bundle, report) = adapt(&base, &task, AdapterConfig::new(0), &quick()).unwrap();
        assert!(bundle.modules.is_empty());
        assert_eq!(report.dev_curve().len(), 1);
    }

    #[test]
    fn bundle_hash_checked_on_load() {
        let (cfg, vocab, task) = setup();
        let (base, _) =
            pretrain(&cfg, &vocab, std::slice::from_ref(&task), SharingMode::Domain, &quick())
                .unwrap();
        let (bundle, _) = adapt(&base, &task, AdapterConfig::new(3), &quick()).unwrap();
        let ck = base.bundle_checkpoint(&bundle);
        assert_eq!(base.load_bundle(&ck).unwrap(), bundle);
        let mut wider = base.clone();
        wider.model = Seq2Seq::new(
            ModelConfig {
                d_model: 16,
                ..cfg
            },
            0,
        )
        .unwrap();
        assert!(matches!(
            wider.load_bundle(&ck),
            Err(Error::ConfigHash { .. })
        ));
    }
}
