//! Line-oriented experiment configuration: `[section]` headers followed by
//! `key = value` lines. `#` and `;` start comments.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use indexmap::IndexMap;
use resadapt::data::{
    build_vocab, load_manifest, make_synthetic_task, task_token, SyntheticSpec, TaskKind,
    TextTask, TokenMode, Vocab,
};
use resadapt::optim::AdamConfig;
use resadapt::train::{Selection, SharingMode, TrainConfig};
use resadapt::{AdapterConfig, ModelConfig};

/// Parsed sections in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ini {
    pub sections: IndexMap<String, IndexMap<String, String>>,
}

impl Ini {
    pub fn parse(text: &str) -> Result<Self> {
        let mut ini = Ini::default();
        let mut current: Option<String> = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| anyhow!("line {}: unterminated section header", no + 1))?
                    .trim()
                    .to_string();
                if ini.sections.contains_key(&name) {
                    bail!("line {}: duplicate section [{name}]", no + 1);
                }
                ini.sections.insert(name.clone(), IndexMap::new());
                current = Some(name);
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value", no + 1))?;
            let sec = current
                .as_ref()
                .ok_or_else(|| anyhow!("line {}: key outside any section", no + 1))?;
            let entries = ini.sections.get_mut(sec).expect("section exists");
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                bail!("line {}: duplicate key {key} in [{sec}]", no + 1);
            }
        }
        Ok(ini)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, (name, entries)) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "[{name}]");
            for (k, v) in entries {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }

    fn section(&mut self, name: &str) -> &mut IndexMap<String, String> {
        self.sections.entry(name.to_string()).or_default()
    }
}

/// Typed, consuming view of one section; leftover keys are reported as typos.
struct Section<'a> {
    name: &'a str,
    entries: IndexMap<String, String>,
}

impl<'a> Section<'a> {
    fn take(ini: &mut Ini, name: &'a str) -> Self {
        Section {
            name,
            entries: ini.sections.shift_remove(name).unwrap_or_default(),
        }
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        self.entries.shift_remove(key)
    }

    fn get<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.opt(key)?.unwrap_or(default))
    }

    fn opt<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| anyhow!("[{}] {key}: cannot parse {v:?}", self.name)),
        }
    }

    fn finish(self) -> Result<()> {
        if let Some(k) = self.entries.keys().next() {
            bail!("[{}] unknown key {k}", self.name);
        }
        Ok(())
    }
}

fn parse_list(v: &str) -> Vec<String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// A synthetic task plus the seed its sentences are drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedTask {
    pub spec: SyntheticSpec,
    pub seed: u64,
}

fn read_task_sections(ini: &mut Ini, default_seed: u64) -> Result<Vec<GeneratedTask>> {
    let names: Vec<String> = ini
        .sections
        .keys()
        .filter(|k| k.starts_with("task."))
        .cloned()
        .collect();
    let mut out = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let id = name["task.".len()..].to_string();
        if id.is_empty() || id.contains(char::is_whitespace) || id.contains(',') {
            bail!("[{name}] bad task id");
        }
        let mut s = Section::take(ini, name);
        let d = SyntheticSpec::default();
        let kind = match s.raw("kind") {
            Some(k) => TaskKind::parse(&k)?,
            None => d.kind,
        };
        let spec = SyntheticSpec {
            id,
            kind,
            content_size: s.get("content_size", d.content_size)?,
            min_len: s.get("min_len", d.min_len)?,
            max_len: s.get("max_len", d.max_len)?,
            lang_seed: s.get("lang_seed", d.lang_seed)?,
            shift: s.get("shift", d.shift)?,
            shift_seed: s.get("shift_seed", d.shift_seed)?,
            reorder: s.get("reorder", d.reorder)?,
            train: s.get("train", d.train)?,
            dev: s.get("dev", d.dev)?,
            test: s.get("test", d.test)?,
        };
        let seed = s.get("seed", default_seed.wrapping_add(i as u64))?;
        s.finish()?;
        out.push(GeneratedTask { spec, seed });
    }
    Ok(out)
}

fn write_task_sections(ini: &mut Ini, tasks: &[GeneratedTask]) {
    for t in tasks {
        let s = &t.spec;
        let sec = ini.section(&format!("task.{}", s.id));
        for (k, v) in [
            ("kind", s.kind.as_str().to_string()),
            ("content_size", s.content_size.to_string()),
            ("min_len", s.min_len.to_string()),
            ("max_len", s.max_len.to_string()),
            ("lang_seed", s.lang_seed.to_string()),
            ("shift", s.shift.to_string()),
            ("shift_seed", s.shift_seed.to_string()),
            ("reorder", s.reorder.to_string()),
            ("train", s.train.to_string()),
            ("dev", s.dev.to_string()),
            ("test", s.test.to_string()),
            ("seed", t.seed.to_string()),
        ] {
            sec.insert(k.into(), v);
        }
    }
}

/// Generator spec for `gen-tasks`: only `[task.<id>]` sections.
pub fn parse_generator_spec(text: &str, seed: u64) -> Result<Vec<GeneratedTask>> {
    let mut ini = Ini::parse(text)?;
    let tasks = read_task_sections(&mut ini, seed)?;
    if let Some(k) = ini.sections.keys().next() {
        bail!("unexpected section [{k}] in generator spec");
    }
    if tasks.is_empty() {
        bail!("generator spec defines no [task.<id>] sections");
    }
    Ok(tasks)
}

/// Training settings of the adapter and fine-tuning phases. The learning
/// rate schedule defaults to the one stored with the base model.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseConfig {
    pub train: TrainConfig,
    pub lr_base: Option<f64>,
    pub warmup: Option<u64>,
}

impl PhaseConfig {
    pub fn resolve(&self, lr_base: f64, warmup: u64) -> TrainConfig {
        TrainConfig {
            lr_base: self.lr_base.unwrap_or(lr_base),
            warmup: self.warmup.unwrap_or(warmup),
            ..self.train.clone()
        }
    }
}

fn read_train(s: &mut Section<'_>) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let selection = match s.raw("selection").as_deref() {
        None | Some("loss") => Selection::DevLoss,
        Some("bleu") => Selection::DevBleu,
        Some(o) => bail!("[{}] selection must be loss or bleu, got {o}", s.name),
    };
    let max_eval_pairs: usize = s.get("max_eval_pairs", 0)?;
    Ok(TrainConfig {
        steps: s.get("steps", d.steps)?,
        eval_every: s.get("eval_every", d.eval_every)?,
        seed: s.get("seed", d.seed)?,
        batch_tokens: s.get("batch_tokens", d.batch_tokens)?,
        lr_base: d.lr_base,
        warmup: d.warmup,
        temperature: s.get("temperature", d.temperature)?,
        selection,
        eval_bleu: s.get("eval_bleu", d.eval_bleu)?,
        max_eval_pairs: (max_eval_pairs > 0).then_some(max_eval_pairs),
        adam: AdamConfig {
            beta1: s.get("beta1", d.adam.beta1)?,
            beta2: s.get("beta2", d.adam.beta2)?,
            eps: s.get("eps", d.adam.eps)?,
            clip_norm: s.get("clip_norm", d.adam.clip_norm)?,
        },
    })
}

fn write_train(sec: &mut IndexMap<String, String>, t: &TrainConfig) {
    let sel = match t.selection {
        Selection::DevLoss => "loss",
        Selection::DevBleu => "bleu",
    };
    for (k, v) in [
        ("steps", t.steps.to_string()),
        ("eval_every", t.eval_every.to_string()),
        ("seed", t.seed.to_string()),
        ("batch_tokens", t.batch_tokens.to_string()),
        ("temperature", t.temperature.to_string()),
        ("selection", sel.to_string()),
        ("eval_bleu", t.eval_bleu.to_string()),
        ("max_eval_pairs", t.max_eval_pairs.unwrap_or(0).to_string()),
        ("beta1", t.adam.beta1.to_string()),
        ("beta2", t.adam.beta2.to_string()),
        ("eps", t.adam.eps.to_string()),
        ("clip_norm", t.adam.clip_norm.to_string()),
    ] {
        sec.insert(k.into(), v);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// `vocab_size` is derived from the data and ignored here.
    pub model: ModelConfig,
    pub manifest: Option<PathBuf>,
    pub synthetic: Vec<GeneratedTask>,
    pub mode: SharingMode,
    pub token_mode: TokenMode,
    pub max_vocab: usize,
    /// Tasks used for pretraining; empty means all of them.
    pub pretrain_tasks: Vec<String>,
    pub pretrain: TrainConfig,
    pub adapt: PhaseConfig,
    pub finetune: PhaseConfig,
    pub default_adapter: AdapterConfig,
    pub adapters: IndexMap<String, AdapterConfig>,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses a config; a relative manifest path is taken relative to `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut ini = Ini::parse(text)?;

        let mut s = Section::take(&mut ini, "model");
        let d = ModelConfig::default();
        let model = ModelConfig {
            num_layers: s.get("num_layers", d.num_layers)?,
            d_model: s.get("d_model", d.d_model)?,
            d_ff: s.get("d_ff", d.d_ff)?,
            num_heads: s.get("num_heads", d.num_heads)?,
            vocab_size: d.vocab_size,
            max_len: s.get("max_len", d.max_len)?,
            dropout: s.get("dropout", d.dropout)?,
        };
        s.finish()?;

        let mut s = Section::take(&mut ini, "data");
        let manifest = s.raw("manifest").map(|m| base_dir.join(m));
        let data_seed: u64 = s.get("seed", 1)?;
        let mode = SharingMode::parse(&s.raw("mode").unwrap_or_else(|| "domain".into()))?;
        let token_mode = TokenMode::parse(&s.raw("token_mode").unwrap_or_else(|| "word".into()))?;
        let max_vocab = s.get("max_vocab", 10_000)?;
        let pretrain_tasks = s.raw("pretrain_tasks").map(|v| parse_list(&v)).unwrap_or_default();
        s.finish()?;

        let mut s = Section::take(&mut ini, "pretrain");
        let mut pretrain = read_train(&mut s)?;
        pretrain.lr_base = s.get("lr_base", pretrain.lr_base)?;
        pretrain.warmup = s.get("warmup", pretrain.warmup)?;
        s.finish()?;

        let mut s = Section::take(&mut ini, "adapt");
        let adapt = PhaseConfig {
            train: read_train(&mut s)?,
            lr_base: s.opt("lr_base")?,
            warmup: s.opt("warmup")?,
        };
        let default_adapter = AdapterConfig {
            bottleneck: s.get("bottleneck", 8)?,
            init_scale: s.get("init_scale", resadapt::adapters::DEFAULT_INIT_SCALE)?,
        };
        s.finish()?;

        let mut s = Section::take(&mut ini, "finetune");
        let finetune = PhaseConfig {
            train: read_train(&mut s)?,
            lr_base: s.opt("lr_base")?,
            warmup: s.opt("warmup")?,
        };
        s.finish()?;

        let mut s = Section::take(&mut ini, "output");
        let out_dir = s.raw("dir").map(PathBuf::from);
        s.finish()?;

        let adapter_secs: Vec<String> = ini
            .sections
            .keys()
            .filter(|k| k.starts_with("adapter."))
            .cloned()
            .collect();
        let mut adapters = IndexMap::new();
        for name in adapter_secs {
            let mut s = Section::take(&mut ini, &name);
            let cfg = AdapterConfig {
                bottleneck: s.get("bottleneck", default_adapter.bottleneck)?,
                init_scale: s.get("init_scale", default_adapter.init_scale)?,
            };
            s.finish()?;
            adapters.insert(name["adapter.".len()..].to_string(), cfg);
        }

        let synthetic = read_task_sections(&mut ini, data_seed)?;
        if let Some(k) = ini.sections.keys().next() {
            bail!("unknown section [{k}]");
        }
        if manifest.is_none() && synthetic.is_empty() {
            bail!("config defines no tasks: give [data] manifest or [task.<id>] sections");
        }
        Ok(ExperimentConfig {
            model,
            manifest,
            synthetic,
            mode,
            token_mode,
            max_vocab,
            pretrain_tasks,
            pretrain,
            adapt,
            finetune,
            default_adapter,
            adapters,
            out_dir,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, dir).with_context(|| format!("config {}", path.display()))
    }

    /// Canonical serialization; parsing it yields an equal config.
    pub fn render(&self) -> String {
        let mut ini = Ini::default();
        let m = &self.model;
        let sec = ini.section("model");
        for (k, v) in [
            ("num_layers", m.num_layers.to_string()),
            ("d_model", m.d_model.to_string()),
            ("d_ff", m.d_ff.to_string()),
            ("num_heads", m.num_heads.to_string()),
            ("max_len", m.max_len.to_string()),
            ("dropout", m.dropout.to_string()),
        ] {
            sec.insert(k.into(), v);
        }
        let sec = ini.section("data");
        if let Some(p) = &self.manifest {
            sec.insert("manifest".into(), p.display().to_string());
        }
        sec.insert("mode".into(), self.mode.as_str().into());
        sec.insert("token_mode".into(), self.token_mode.as_str().into());
        sec.insert("max_vocab".into(), self.max_vocab.to_string());
        if !self.pretrain_tasks.is_empty() {
            sec.insert("pretrain_tasks".into(), self.pretrain_tasks.join(","));
        }
        let sec = ini.section("pretrain");
        write_train(sec, &self.pretrain);
        sec.insert("lr_base".into(), self.pretrain.lr_base.to_string());
        sec.insert("warmup".into(), self.pretrain.warmup.to_string());
        for (name, phase) in [("adapt", &self.adapt), ("finetune", &self.finetune)] {
            let sec = ini.section(name);
            write_train(sec, &phase.train);
            if let Some(v) = phase.lr_base {
                sec.insert("lr_base".into(), v.to_string());
            }
            if let Some(v) = phase.warmup {
                sec.insert("warmup".into(), v.to_string());
            }
        }
        let sec = ini.section("adapt");
        sec.insert("bottleneck".into(), self.default_adapter.bottleneck.to_string());
        sec.insert("init_scale".into(), self.default_adapter.init_scale.to_string());
        if let Some(dir) = &self.out_dir {
            ini.section("output").insert("dir".into(), dir.display().to_string());
        }
        for (task, a) in &self.adapters {
            let sec = ini.section(&format!("adapter.{task}"));
            sec.insert("bottleneck".into(), a.bottleneck.to_string());
            sec.insert("init_scale".into(), a.init_scale.to_string());
        }
        write_task_sections(&mut ini, &self.synthetic);
        ini.render()
    }

    pub fn adapter_for(&self, task: &str) -> AdapterConfig {
        self.adapters.get(task).copied().unwrap_or(self.default_adapter)
    }

    /// All tasks: manifest entries first, then synthetic ones.
    pub fn load_tasks(&self) -> Result<Vec<TextTask>> {
        let mut tasks = match &self.manifest {
            Some(p) => load_manifest(p).with_context(|| format!("manifest {}", p.display()))?,
            None => Vec::new(),
        };
        for g in &self.synthetic {
            tasks.push(make_synthetic_task(&g.spec, g.seed)?);
        }
        let mut seen = BTreeSet::new();
        for t in &tasks {
            if !seen.insert(t.id.as_str()) {
                bail!("task {} defined twice", t.id);
            }
        }
        for id in &self.pretrain_tasks {
            if !seen.contains(id.as_str()) {
                bail!("pretrain task {id} is not defined");
            }
        }
        Ok(tasks)
    }

    pub fn is_pretrain_task(&self, id: &str) -> bool {
        self.pretrain_tasks.is_empty() || self.pretrain_tasks.iter().any(|t| t == id)
    }

    /// Vocabulary over every task's training text, plus task tokens for the
    /// pretraining tasks in multilingual mode.
    pub fn build_vocab(&self, tasks: &[TextTask]) -> Vocab {
        let specials: Vec<String> = match self.mode {
            SharingMode::Multilingual => tasks
                .iter()
                .filter(|t| self.is_pretrain_task(&t.id))
                .map(|t| task_token(&t.id))
                .collect(),
            SharingMode::Domain => Vec::new(),
        };
        build_vocab(
            tasks
                .iter()
                .flat_map(|t| t.train.pairs.iter())
                .flat_map(|(a, b)| [a.as_str(), b.as_str()]),
            self.token_mode,
            self.max_vocab,
            &specials,
        )
    }
}
