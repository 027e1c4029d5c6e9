//! Post-norm encoder-decoder transformer with optional per-task adapters.
//!
//! Sequences of a batch are packed row-wise instead of padded; attention
//! segments keep every sequence confined to itself.

use std::collections::HashMap;
use std::rc::Rc;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::adapters::{adapter_forward, AdapterConfig, AdapterVars};
use crate::error::{contract, Error, Result};
use crate::params::{ParameterStore, Partition};
use crate::tape::{AttentionLayout, Segment, Tape, Var};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 2,
            d_model: 64,
            d_ff: 256,
            num_heads: 4,
            vocab_size: 64,
            max_len: 64,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.d_model == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::Dimension {
                op: "model config heads",
                lhs: vec![self.d_model],
                rhs: vec![self.num_heads],
            });
        }
        if self.num_layers == 0 {
            return Err(contract("num_layers must be at least 1"));
        }
        if self.vocab_size < 5 {
            return Err(contract("vocab_size must be at least 5"));
        }
        if self.d_ff == 0 || self.max_len == 0 {
            return Err(contract("d_ff and max_len must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(contract("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Number of adapter attachment sites: one per encoder and decoder layer.
    pub fn adapter_sites(&self) -> usize {
        2 * self.num_layers
    }

    /// Site names in attachment order: `enc.0 .. enc.{L-1}, dec.0 .. dec.{L-1}`.
    pub fn site_names(&self) -> Vec<String> {
        (0..self.num_layers)
            .map(|i| format!("enc.{i}"))
            .chain((0..self.num_layers).map(|i| format!("dec.{i}")))
            .collect()
    }
}

/// Output `z_i` of one encoder or decoder layer: the tensor an adapter consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    pub states: Tensor,
}

/// One training pair in token ids, without bos/eos. Trailing `PAD`s are allowed.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

/// Projection weights of one attention sub-layer bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Scaled dot-product multi-head attention: project queries, keys and values,
/// attend per head under `layout`, concatenate heads and project the output.
pub fn multi_head_attention(
    tape: &mut Tape<'_>,
    queries: Var,
    keys: Var,
    values: Var,
    layout: Rc<AttentionLayout>,
    heads: usize,
    w: &AttentionWeights,
) -> Result<Var> {
    let q = tape.matmul(queries, w.wq)?;
    let q = tape.add_row(q, w.bq)?;
    let k = tape.matmul(keys, w.wk)?;
    let k = tape.add_row(k, w.bk)?;
    let v = tape.matmul(values, w.wv)?;
    let v = tape.add_row(v, w.bv)?;
    let ctx = tape.attention(q, k, v, heads, layout)?;
    let o = tape.matmul(ctx, w.wo)?;
    tape.add_row(o, w.bo)
}

/// Sinusoidal position table, `max_len × d`.
pub fn sinusoidal_positions(max_len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(max_len, d, data).expect("positions")
}

/// Lazily binds store parameters to tape leaves.
pub(crate) struct Binder<'p> {
    store: &'p ParameterStore,
    vars: HashMap<String, Var>,
    with_grad: bool,
}

impl<'p> Binder<'p> {
    pub(crate) fn new(store: &'p ParameterStore, with_grad: bool) -> Self {
        Binder {
            store,
            vars: HashMap::new(),
            with_grad,
        }
    }

    pub(crate) fn get(&mut self, tape: &mut Tape<'p>, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let entry = self
            .store
            .get(name)
            .ok_or_else(|| contract(format!("missing parameter {name}")))?;
        let v = tape.param(&entry.tensor, self.with_grad && !entry.frozen);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub(crate) fn bound(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Sequences packed row-wise with per-row positions and pad flags.
struct Packed {
    ids: Vec<usize>,
    positions: Vec<usize>,
    starts: Vec<usize>,
    lens: Vec<usize>,
    pad: Vec<bool>,
}

impl Packed {
    fn new(seqs: &[Vec<usize>], max_len: usize) -> Result<Self> {
        let mut p = Packed {
            ids: Vec::new(),
            positions: Vec::new(),
            starts: Vec::new(),
            lens: Vec::new(),
            pad: Vec::new(),
        };
        for s in seqs {
            if s.len() > max_len {
                return Err(contract(format!(
                    "sequence length {} exceeds max_len {max_len}",
                    s.len()
                )));
            }
            p.starts.push(p.ids.len());
            p.lens.push(s.len());
            for (i, &t) in s.iter().enumerate() {
                p.ids.push(t);
                p.positions.push(i);
                p.pad.push(t == PAD);
            }
        }
        Ok(p)
    }

    fn self_layout(&self, causal: bool) -> Rc<AttentionLayout> {
        Rc::new(AttentionLayout {
            segments: self
                .starts
                .iter()
                .zip(&self.lens)
                .map(|(&s, &l)| Segment {
                    q_start: s,
                    q_len: l,
                    k_start: s,
                    k_len: l,
                })
                .collect(),
            causal,
            key_masked: Some(self.pad.clone()),
            explicit: None,
        })
    }

    fn cross_layout(&self, keys: &Packed) -> Rc<AttentionLayout> {
        Rc::new(AttentionLayout {
            segments: (0..self.starts.len())
                .map(|i| Segment {
                    q_start: self.starts[i],
                    q_len: self.lens[i],
                    k_start: keys.starts[i],
                    k_len: keys.lens[i],
                })
                .collect(),
            causal: false,
            key_masked: Some(keys.pad.clone()),
            explicit: None,
        })
    }
}

fn split_trailing_pad(seq: &[usize]) -> (&[usize], usize) {
    let content = seq.len() - seq.iter().rev().take_while(|&&t| t == PAD).count();
    (&seq[..content], seq.len() - content)
}

/// Source row fed to the encoder: content, `EOS`, then any trailing pads.
pub fn source_input(src: &[usize]) -> Vec<usize> {
    let (content, pads) = split_trailing_pad(src);
    let mut v = content.to_vec();
    v.push(EOS);
    v.extend(std::iter::repeat_n(PAD, pads));
    v
}

/// Teacher-forcing decoder input (`BOS` + content) and labels (content + `EOS`).
pub fn target_io(tgt: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let (content, pads) = split_trailing_pad(tgt);
    let mut input = vec![BOS];
    input.extend_from_slice(content);
    input.extend(std::iter::repeat_n(PAD, pads));
    let mut labels = content.to_vec();
    labels.push(EOS);
    labels.extend(std::iter::repeat_n(PAD, pads));
    (input, labels)
}

/// Encoder-decoder transformer plus any injected adapter bundles.
#[derive(Debug, Clone)]
pub struct Seq2Seq {
    pub(crate) config: ModelConfig,
    pub(crate) store: ParameterStore,
    pub(crate) adapters: IndexMap<String, AdapterConfig>,
    positions: Tensor,
}

/// State of one forward pass.
struct Pass<'m, 'r> {
    model: &'m Seq2Seq,
    tape: Tape<'m>,
    binder: Binder<'m>,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'m> Pass<'m, '_> {
    fn p(&mut self, name: &str) -> Result<Var> {
        self.binder.get(&mut self.tape, name)
    }

    fn dropout(&mut self, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) => self.tape.dropout(x, self.model.config.dropout, rng),
            None => x,
        }
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Result<Var> {
        let w = self.p(w)?;
        let b = self.p(b)?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_row(y, b)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.gain"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        self.tape.layer_norm(x, g, b, LN_EPS)
    }

    fn attention_weights(&mut self, prefix: &str) -> Result<AttentionWeights> {
        let mut get = |s: &str| self.p(&format!("{prefix}.{s}"));
        Ok(AttentionWeights {
            wq: get("wq")?,
            bq: get("bq")?,
            wk: get("wk")?,
            bk: get("bk")?,
            wv: get("wv")?,
            bv: get("bv")?,
            wo: get("wo")?,
            bo: get("bo")?,
        })
    }

    fn mha(&mut self, q: Var, kv: Var, prefix: &str, layout: Rc<AttentionLayout>) -> Result<Var> {
        let w = self.attention_weights(prefix)?;
        let heads = self.model.config.num_heads;
        multi_head_attention(&mut self.tape, q, kv, kv, layout, heads, &w)
    }

    /// Residual sub-layer with post-norm: `LN(x + dropout(f(x)))`.
    fn residual(&mut self, x: Var, y: Var, norm: &str) -> Result<Var> {
        let y = self.dropout(y);
        let s = self.tape.add(x, y)?;
        self.norm(s, norm)
    }

    fn feed_forward(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = self.tape.relu(h);
        self.linear(h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    fn adapter(&mut self, z: Var, task: Option<&str>, site: &str) -> Result<Var> {
        let Some(task) = task else { return Ok(z) };
        let cfg = self
            .model
            .adapters
            .get(task)
            .ok_or_else(|| Error::TaskNotFound(task.to_string()))?;
        if cfg.bottleneck == 0 {
            return Ok(z);
        }
        let prefix = crate::adapters::param_prefix(task, site);
        let vars = AdapterVars {
            ln_gain: self.p(&format!("{prefix}.ln_gain"))?,
            ln_bias: self.p(&format!("{prefix}.ln_bias"))?,
            w_down: self.p(&format!("{prefix}.w_down"))?,
            w_up: self.p(&format!("{prefix}.w_up"))?,
        };
        adapter_forward(&mut self.tape, z, &vars)
    }

    fn embed(&mut self, packed: &Packed) -> Result<Var> {
        let d = self.model.config.d_model;
        let table = self.p("embed")?;
        let e = self.tape.gather(table, &packed.ids)?;
        let e = self.tape.scale(e, (d as f64).sqrt());
        let mut pos = Vec::with_capacity(packed.ids.len() * d);
        for &p in &packed.positions {
            pos.extend_from_slice(self.model.positions.row(p));
        }
        let pos = self.tape.constant(Tensor::matrix(packed.ids.len(), d, pos)?);
        let x = self.tape.add(e, pos)?;
        Ok(self.dropout(x))
    }

    fn encode(&mut self, src: &Packed, task: Option<&str>) -> Result<Vec<Var>> {
        let mut x = self.embed(src)?;
        let layout = src.self_layout(false);
        let mut outs = Vec::with_capacity(self.model.config.num_layers);
        for i in 0..self.model.config.num_layers {
            let a = self.mha(x, x, &format!("enc.{i}.attn"), layout.clone())?;
            x = self.residual(x, a, &format!("enc.{i}.ln1"))?;
            let f = self.feed_forward(x, &format!("enc.{i}.ff"))?;
            x = self.residual(x, f, &format!("enc.{i}.ln2"))?;
            x = self.adapter(x, task, &format!("enc.{i}"))?;
            outs.push(x);
        }
        Ok(outs)
    }

    fn decode(
        &mut self,
        tgt: &Packed,
        memory: Var,
        src: &Packed,
        task: Option<&str>,
    ) -> Result<Vec<Var>> {
        let mut x = self.embed(tgt)?;
        let self_layout = tgt.self_layout(true);
        let cross_layout = tgt.cross_layout(src);
        let mut outs = Vec::with_capacity(self.model.config.num_layers);
        for i in 0..self.model.config.num_layers {
            let a = self.mha(x, x, &format!("dec.{i}.self"), self_layout.clone())?;
            x = self.residual(x, a, &format!("dec.{i}.ln1"))?;
            let c = self.mha(x, memory, &format!("dec.{i}.cross"), cross_layout.clone())?;
            x = self.residual(x, c, &format!("dec.{i}.ln2"))?;
            let f = self.feed_forward(x, &format!("dec.{i}.ff"))?;
            x = self.residual(x, f, &format!("dec.{i}.ln3"))?;
            x = self.adapter(x, task, &format!("dec.{i}"))?;
            outs.push(x);
        }
        Ok(outs)
    }

    fn logits(&mut self, states: Var) -> Result<Var> {
        let table = self.p("embed")?;
        self.tape.matmul_nt(states, table)
    }
}

/// Result of a teacher-forced pass over a batch.
#[derive(Debug, Clone)]
pub struct BatchStats {
    /// Mean loss over non-pad target positions.
    pub loss: f64,
    pub tokens: usize,
    pub correct: usize,
}

/// Loss and gradients of trainable parameters for one batch.
#[derive(Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub tokens: usize,
    pub grads: Vec<(String, Vec<f64>)>,
}

impl Seq2Seq {
    /// Fresh base model with deterministic initialization from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let d = config.d_model;
        let ff = config.d_ff;
        let normal = |rng: &mut ChaCha8Rng, shape: &[usize], std: f64| {
            let dist = Normal::new(0.0, std).expect("std");
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
                .expect("shape")
        };
        let xavier = |fan_in: usize, fan_out: usize| (2.0 / (fan_in + fan_out) as f64).sqrt();

        store.insert(
            "embed",
            normal(&mut rng, &[config.vocab_size, d], 0.5 / (d as f64).sqrt()),
            Partition::Base,
        )?;
        let attn = |store: &mut ParameterStore, rng: &mut ChaCha8Rng, p: &str| -> Result<()> {
            for w in ["wq", "wk", "wv", "wo"] {
                store.insert(
                    &format!("{p}.{w}"),
                    normal(rng, &[d, d], xavier(d, d)),
                    Partition::Base,
                )?;
                let b = format!("{p}.b{}", &w[1..]);
                store.insert(&b, Tensor::zeros(&[d]), Partition::Base)?;
            }
            Ok(())
        };
        let norm = |store: &mut ParameterStore, p: &str| -> Result<()> {
            store.insert(&format!("{p}.gain"), Tensor::full(&[d], 1.0), Partition::Base)?;
            store.insert(&format!("{p}.bias"), Tensor::zeros(&[d]), Partition::Base)
        };
        let feed = |store: &mut ParameterStore, rng: &mut ChaCha8Rng, p: &str| -> Result<()> {
            store.insert(
                &format!("{p}.w1"),
                normal(rng, &[d, ff], xavier(d, ff)),
                Partition::Base,
            )?;
            store.insert(&format!("{p}.b1"), Tensor::zeros(&[ff]), Partition::Base)?;
            store.insert(
                &format!("{p}.w2"),
                normal(rng, &[ff, d], xavier(ff, d)),
                Partition::Base,
            )?;
            store.insert(&format!("{p}.b2"), Tensor::zeros(&[d]), Partition::Base)
        };
        for i in 0..config.num_layers {
            attn(&mut store, &mut rng, &format!("enc.{i}.attn"))?;
            norm(&mut store, &format!("enc.{i}.ln1"))?;
            feed(&mut store, &mut rng, &format!("enc.{i}.ff"))?;
            norm(&mut store, &format!("enc.{i}.ln2"))?;
        }
        for i in 0..config.num_layers {
            attn(&mut store, &mut rng, &format!("dec.{i}.self"))?;
            norm(&mut store, &format!("dec.{i}.ln1"))?;
            attn(&mut store, &mut rng, &format!("dec.{i}.cross"))?;
            norm(&mut store, &format!("dec.{i}.ln2"))?;
            feed(&mut store, &mut rng, &format!("dec.{i}.ff"))?;
            norm(&mut store, &format!("dec.{i}.ln3"))?;
        }
        Ok(Self::from_parts(config, store, IndexMap::new()))
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        store: ParameterStore,
        adapters: IndexMap<String, AdapterConfig>,
    ) -> Self {
        let positions = sinusoidal_positions(config.max_len, config.d_model);
        Seq2Seq {
            config,
            store,
            adapters,
            positions,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    /// Tasks with an injected adapter bundle, in injection order.
    pub fn adapter_tasks(&self) -> impl Iterator<Item = (&str, &AdapterConfig)> {
        self.adapters.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn base_param_count(&self) -> usize {
        self.store.count(&Partition::Base)
    }

    fn pass<'r>(&self, with_grad: bool, rng: Option<&'r mut ChaCha8Rng>) -> Pass<'_, 'r> {
        Pass {
            model: self,
            tape: Tape::new(),
            binder: Binder::new(&self.store, with_grad),
            rng,
        }
    }

    fn check_task(&self, task: Option<&str>) -> Result<()> {
        match task {
            Some(t) if !self.adapters.contains_key(t) => Err(Error::TaskNotFound(t.to_string())),
            _ => Ok(()),
        }
    }

    /// Encoder layer outputs `z_1..z_L` (after adapters when `task` is given).
    pub fn encode(&self, src: &[usize], task: Option<&str>) -> Result<Vec<LayerOutput>> {
        self.check_task(task)?;
        let packed = Packed::new(&[source_input(src)], self.config.max_len)?;
        let mut pass = self.pass(false, None);
        let outs = pass.encode(&packed, task)?;
        Ok(outs
            .into_iter()
            .map(|v| LayerOutput {
                states: pass.tape.value(v).clone(),
            })
            .collect())
    }

    /// Decoder layer outputs for a teacher-forced target.
    pub fn decoder_layers(
        &self,
        src: &[usize],
        tgt: &[usize],
        task: Option<&str>,
    ) -> Result<Vec<LayerOutput>> {
        self.check_task(task)?;
        let sp = Packed::new(&[source_input(src)], self.config.max_len)?;
        let (input, _) = target_io(tgt);
        let tp = Packed::new(&[input], self.config.max_len)?;
        let mut pass = self.pass(false, None);
        let enc = pass.encode(&sp, task)?;
        let outs = pass.decode(&tp, *enc.last().expect("layers"), &sp, task)?;
        Ok(outs
            .into_iter()
            .map(|v| LayerOutput {
                states: pass.tape.value(v).clone(),
            })
            .collect())
    }

    fn teacher_forced<'m>(
        &self,
        pass: &mut Pass<'m, '_>,
        batch: &[Example],
        task: Option<&str>,
    ) -> Result<(Var, Vec<usize>)> {
        if batch.iter().any(|e| e.src.is_empty() || e.tgt.is_empty()) {
            return Err(contract("source and target must be non-empty"));
        }
        let srcs: Vec<Vec<usize>> = batch.iter().map(|e| source_input(&e.src)).collect();
        let (inputs, labels): (Vec<_>, Vec<_>) = batch.iter().map(|e| target_io(&e.tgt)).unzip();
        let sp = Packed::new(&srcs, self.config.max_len)?;
        let tp = Packed::new(&inputs, self.config.max_len)?;
        let enc = pass.encode(&sp, task)?;
        let dec = pass.decode(&tp, *enc.last().expect("layers"), &sp, task)?;
        let logits = pass.logits(*dec.last().expect("layers"))?;
        Ok((logits, labels.concat()))
    }

    /// Mean teacher-forced cross-entropy over non-pad target tokens, without dropout.
    pub fn forward_loss(&self, batch: &[Example], task: Option<&str>) -> Result<f64> {
        Ok(self.batch_stats(batch, task)?.loss)
    }

    /// Loss, token count and argmax-correct count, without dropout.
    pub fn batch_stats(&self, batch: &[Example], task: Option<&str>) -> Result<BatchStats> {
        self.check_task(task)?;
        let mut pass = self.pass(false, None);
        let (logits, labels) = self.teacher_forced(&mut pass, batch, task)?;
        let loss = pass.tape.cross_entropy(logits, &labels, Some(PAD))?;
        let lv = pass.tape.value(logits);
        let (_, v) = lv.dims2();
        let mut correct = 0;
        let mut tokens = 0;
        for (i, &y) in labels.iter().enumerate() {
            if y == PAD {
                continue;
            }
            tokens += 1;
            if argmax(&lv.data()[i * v..(i + 1) * v]) == y {
                correct += 1;
            }
        }
        Ok(BatchStats {
            loss: pass.tape.value(loss).item(),
            tokens,
            correct,
        })
    }

    /// Loss and gradients for every trainable parameter the batch touches.
    /// Dropout is active when `rng` is given.
    pub fn loss_and_grads(
        &self,
        batch: &[Example],
        task: Option<&str>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<StepOutput> {
        self.check_task(task)?;
        let mut pass = self.pass(true, rng);
        let (logits, labels) = self.teacher_forced(&mut pass, batch, task)?;
        let tokens = labels.iter().filter(|&&y| y != PAD).count();
        let loss = pass.tape.cross_entropy(logits, &labels, Some(PAD))?;
        let mut grads = pass.tape.backward(loss)?;
        let mut out: Vec<(String, Vec<f64>)> = pass
            .binder
            .bound()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(StepOutput {
            loss: pass.tape.value(loss).item(),
            tokens,
            grads: out,
        })
    }

    /// Greedy autoregressive decoding for a batch of sources. Output excludes
    /// `BOS`/`EOS`; ties go to the lowest token id.
    pub fn translate(
        &self,
        srcs: &[Vec<usize>],
        task: Option<&str>,
        max_steps: usize,
    ) -> Result<Vec<Vec<usize>>> {
        if max_steps == 0 {
            return Err(contract("max_steps must be at least 1"));
        }
        self.check_task(task)?;
        if srcs.is_empty() {
            return Ok(Vec::new());
        }
        let inputs: Vec<Vec<usize>> = srcs.iter().map(|s| source_input(s)).collect();
        let sp = Packed::new(&inputs, self.config.max_len)?;
        let mut pass = self.pass(false, None);
        let memory = *pass.encode(&sp, task)?.last().expect("layers");
        let steps = max_steps.min(self.config.max_len);
        let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS]; srcs.len()];
        let mut done = vec![false; srcs.len()];
        for _ in 0..steps {
            let tp = Packed::new(&prefixes, self.config.max_len)?;
            let dec = pass.decode(&tp, memory, &sp, task)?;
            let last = *dec.last().expect("layers");
            let states = pass.tape.value(last);
            let d = self.config.d_model;
            let rows: Vec<f64> = (0..srcs.len())
                .flat_map(|i| {
                    let r = tp.starts[i] + tp.lens[i] - 1;
                    states.data()[r * d..(r + 1) * d].to_vec()
                })
                .collect();
            let rows = pass.tape.constant(Tensor::matrix(srcs.len(), d, rows)?);
            let logits = pass.logits(rows)?;
            let lv = pass.tape.value(logits).clone();
            let v = self.config.vocab_size;
            for i in 0..srcs.len() {
                if done[i] {
                    continue;
                }
                let next = argmax(&lv.data()[i * v..(i + 1) * v]);
                if next == EOS {
                    done[i] = true;
                } else {
                    prefixes[i].push(next);
                }
            }
            if done.iter().all(|&d| d) || prefixes.iter().any(|p| p.len() >= self.config.max_len) {
                break;
            }
        }
        Ok(prefixes.into_iter().map(|p| p[1..].to_vec()).collect())
    }

    /// Greedy decoding of a single source.
    pub fn decode_greedy(
        &self,
        src: &[usize],
        task: Option<&str>,
        max_steps: usize,
    ) -> Result<Vec<usize>> {
        Ok(self
            .translate(&[src.to_vec()], task, max_steps)?
            .pop()
            .expect("one output"))
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
