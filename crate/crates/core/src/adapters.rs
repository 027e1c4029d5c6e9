//! Per-task residual adapters.
//!
//! An adapter normalizes a layer output `z`, projects it down to `b`
//! dimensions through a relu, projects it back up to `d` and adds `z`:
//!
//! ```text
//! x = W_up · relu(W_down · LN(z)) + z
//! ```
//!
//! `W_up` starts at zero, so a freshly injected adapter is an exact no-op.
//! Each task owns one module per encoder layer and per decoder layer; their
//! parameters live in the model's store under a task-specific namespace.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract, Error, Result};
use crate::params::Partition;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::{ModelConfig, Seq2Seq, LN_EPS};

/// Default standard deviation of the down-projection at creation.
pub const DEFAULT_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterConfig {
    /// Inner projection width; `0` means the task has no adapter layers.
    pub bottleneck: usize,
    pub init_scale: f64,
}

impl AdapterConfig {
    pub fn new(bottleneck: usize) -> Self {
        AdapterConfig {
            bottleneck,
            init_scale: DEFAULT_INIT_SCALE,
        }
    }
}

/// Adapter parameters for one attachment site.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterModule {
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    /// `b × d`
    pub w_down: Tensor,
    /// `d × b`
    pub w_up: Tensor,
}

impl AdapterModule {
    pub fn param_count(&self) -> usize {
        self.ln_gain.len() + self.ln_bias.len() + self.w_down.len() + self.w_up.len()
    }

    fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("ln_gain", &self.ln_gain),
            ("ln_bias", &self.ln_bias),
            ("w_down", &self.w_down),
            ("w_up", &self.w_up),
        ]
    }

    /// Applies the adapter to every row of `z` (`seq × d`).
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.param(z, false);
        let vars = AdapterVars {
            ln_gain: tape.param(&self.ln_gain, false),
            ln_bias: tape.param(&self.ln_bias, false),
            w_down: tape.param(&self.w_down, false),
            w_up: tape.param(&self.w_up, false),
        };
        let out = adapter_forward(&mut tape, zv, &vars)?;
        Ok(tape.value(out).clone())
    }
}

/// Adapter parameters already recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub w_down: Var,
    pub w_up: Var,
}

/// `W_up · relu(W_down · LN(z)) + z`, row-wise.
pub fn adapter_forward(tape: &mut Tape<'_>, z: Var, m: &AdapterVars) -> Result<Var> {
    let width = tape.value(z).dims2().1;
    let d = tape.value(m.ln_gain).len();
    if width != d {
        return Err(Error::Dimension {
            op: "adapter_forward",
            lhs: tape.value(z).shape().to_vec(),
            rhs: tape.value(m.w_down).shape().to_vec(),
        });
    }
    let normed = tape.layer_norm(z, m.ln_gain, m.ln_bias, LN_EPS)?;
    let h = tape.matmul_nt(normed, m.w_down)?;
    let h = tape.relu(h);
    let up = tape.matmul_nt(h, m.w_up)?;
    tape.add(up, z)
}

/// All adapter modules of one task, one per attachment site.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBundle {
    pub task: String,
    pub config: AdapterConfig,
    pub d_model: usize,
    pub num_layers: usize,
    /// Empty when `config.bottleneck == 0`, else `2 × num_layers` modules
    /// ordered as [`ModelConfig::site_names`].
    pub modules: Vec<AdapterModule>,
}

impl AdapterBundle {
    pub fn param_count(&self) -> usize {
        self.modules.iter().map(AdapterModule::param_count).sum()
    }

    /// `(parameter name, tensor)` pairs in the store's namespace.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let sites = site_names(self.num_layers);
        self.modules
            .iter()
            .zip(&sites)
            .flat_map(|(m, site)| {
                let prefix = param_prefix(&self.task, site);
                m.tensors()
                    .into_iter()
                    .map(move |(k, t)| (format!("{prefix}.{k}"), t))
            })
            .collect()
    }
}

fn site_names(num_layers: usize) -> Vec<String> {
    ModelConfig {
        num_layers,
        ..ModelConfig::default()
    }
    .site_names()
}

/// Store namespace for one task's module at one site.
pub fn param_prefix(task: &str, site: &str) -> String {
    format!("adapter.{task}.{site}")
}

/// `sites · (2·d·b + 2·d)`, or 0 when `b == 0` (no adapter).
pub fn count_adapter_params(d: usize, b: usize, sites: usize) -> usize {
    if b == 0 {
        0
    } else {
        sites * (2 * d * b + 2 * d)
    }
}

/// Fresh bundle: `W_down ~ N(0, init_scale²)`, `W_up = 0`, LN gain 1 and bias 0.
pub fn create_bundle(
    task: &str,
    model: &ModelConfig,
    config: AdapterConfig,
    seed: u64,
) -> Result<AdapterBundle> {
    if task.is_empty() || task.contains(char::is_whitespace) {
        return Err(contract(format!("invalid task id {task:?}")));
    }
    let d = model.d_model;
    let b = config.bottleneck;
    let mut modules = Vec::new();
    if b > 0 {
        if config.init_scale < 0.0 || !config.init_scale.is_finite() {
            return Err(contract("init_scale must be finite and non-negative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, config.init_scale).expect("valid std");
        for _ in 0..model.adapter_sites() {
            let w_down: Vec<f64> = (0..b * d).map(|_| dist.sample(&mut rng)).collect();
            modules.push(AdapterModule {
                ln_gain: Tensor::full(&[d], 1.0),
                ln_bias: Tensor::zeros(&[d]),
                w_down: Tensor::matrix(b, d, w_down)?,
                w_up: Tensor::zeros(&[d, b]),
            });
        }
    }
    Ok(AdapterBundle {
        task: task.to_string(),
        config,
        d_model: d,
        num_layers: model.num_layers,
        modules,
    })
}

impl Seq2Seq {
    /// Registers `bundle` so that every layer output is routed through the
    /// task's module whenever that task is requested. Base parameters are
    /// shared and untouched.
    pub fn inject(&mut self, bundle: AdapterBundle) -> Result<()> {
        if bundle.d_model != self.config.d_model || bundle.num_layers != self.config.num_layers {
            return Err(Error::Dimension {
                op: "inject",
                lhs: vec![bundle.d_model, bundle.num_layers],
                rhs: vec![self.config.d_model, self.config.num_layers],
            });
        }
        if self.adapters.contains_key(&bundle.task) {
            return Err(Error::AlreadyExists(bundle.task.clone()));
        }
        let part = Partition::Bundle(bundle.task.clone());
        for (name, t) in bundle.named_tensors() {
            self.store.insert(&name, t.clone(), part.clone())?;
        }
        self.adapters.insert(bundle.task.clone(), bundle.config);
        Ok(())
    }

    /// Creates and injects a fresh bundle for `task`.
    pub fn add_task(&mut self, task: &str, config: AdapterConfig, seed: u64) -> Result<()> {
        if self.adapters.contains_key(task) {
            return Err(Error::AlreadyExists(task.to_string()));
        }
        let bundle = create_bundle(task, &self.config, config, seed)?;
        self.inject(bundle)
    }

    /// Removes `task`'s bundle and returns it.
    pub fn remove(&mut self, task: &str) -> Result<AdapterBundle> {
        let config = self
            .adapters
            .shift_remove(task)
            .ok_or_else(|| Error::TaskNotFound(task.to_string()))?;
        let mut entries = self
            .store
            .remove_partition(&Partition::Bundle(task.to_string()))
            .into_iter();
        let mut modules = Vec::new();
        if config.bottleneck > 0 {
            for _ in 0..self.config.adapter_sites() {
                let mut next = || entries.next().map(|(_, e)| e.tensor).expect("bundle tensor");
                modules.push(AdapterModule {
                    ln_gain: next(),
                    ln_bias: next(),
                    w_down: next(),
                    w_up: next(),
                });
            }
        }
        Ok(AdapterBundle {
            task: task.to_string(),
            config,
            d_model: self.config.d_model,
            num_layers: self.config.num_layers,
            modules,
        })
    }

    /// Copy of `task`'s bundle as currently stored.
    pub fn bundle(&self, task: &str) -> Result<AdapterBundle> {
        let config = *self
            .adapters
            .get(task)
            .ok_or_else(|| Error::TaskNotFound(task.to_string()))?;
        let mut modules = Vec::new();
        if config.bottleneck > 0 {
            for site in self.config.site_names() {
                let p = param_prefix(task, &site);
                let get = |k: &str| self.store.tensor(&format!("{p}.{k}")).cloned();
                modules.push(AdapterModule {
                    ln_gain: get("ln_gain")?,
                    ln_bias: get("ln_bias")?,
                    w_down: get("w_down")?,
                    w_up: get("w_up")?,
                });
            }
        }
        Ok(AdapterBundle {
            task: task.to_string(),
            config,
            d_model: self.config.d_model,
            num_layers: self.config.num_layers,
            modules,
        })
    }

    /// Makes exactly `task`'s bundle trainable; freezes the base and every other bundle.
    pub fn set_trainable(&mut self, task: &str) -> Result<()> {
        if !self.adapters.contains_key(task) {
            return Err(Error::TaskNotFound(task.to_string()));
        }
        let own = Partition::Bundle(task.to_string());
        for (_, e) in self.store.iter_mut() {
            e.frozen = e.partition != own;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn module(w_down: Vec<f64>, w_up: Vec<f64>) -> AdapterModule {
        AdapterModule {
            ln_gain: Tensor::full(&[2], 1.0),
            ln_bias: Tensor::zeros(&[2]),
            w_down: Tensor::matrix(1, 2, w_down).unwrap(),
            w_up: Tensor::matrix(2, 1, w_up).unwrap(),
        }
    }

    #[test]
    fn hand_evaluated_adapter() {
        let m = module(vec![1.0, 0.0], vec![1.0, 0.0]);
        let z = Tensor::from_rows(&[vec![3.0, 1.0]]);
        let x = m.forward(&z).unwrap();
        // LN([3,1]) ≈ [1,-1], h = relu(1) = 1, x = [1,0]·1 + z
        assert!((x.data()[0] - 4.0).abs() < 1e-5, "{:?}", x);
        assert!((x.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn closed_relu_gate_passes_input_through() {
        let m = module(vec![1.0, 0.0], vec![1.0, 0.0]);
        let z = Tensor::from_rows(&[vec![1.0, 3.0]]);
        assert_eq!(m.forward(&z).unwrap(), z);
    }

    #[test]
    fn fresh_module_is_identity() {
        let cfg = ModelConfig {
            d_model: 8,
            num_heads: 2,
            ..ModelConfig::default()
        };
        let b = create_bundle("t", &cfg, AdapterConfig::new(5), 3).unwrap();
        assert_eq!(b.modules.len(), 4);
        let z = Tensor::from_rows(&[
            (0..8).map(|i| (i as f64 * 0.37).sin()).collect(),
            (0..8).map(|i| (i as f64 * 1.1).cos() * 3.0).collect(),
        ]);
        for m in &b.modules {
            assert_eq!(m.forward(&z).unwrap(), z);
        }
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let m = module(vec![1.0, 0.0], vec![1.0, 0.0]);
        let z = Tensor::from_rows(&[vec![1.0, 3.0, 4.0]]);
        assert!(matches!(m.forward(&z), Err(Error::Dimension { .. })));
    }

    #[test]
    fn over_parametrized_bottleneck_allowed() {
        let cfg = ModelConfig {
            d_model: 8,
            num_heads: 2,
            ..ModelConfig::default()
        };
        let b = create_bundle("wide", &cfg, AdapterConfig::new(32), 0).unwrap();
        assert_eq!(b.param_count(), count_adapter_params(8, 32, 4));
    }

    #[test]
    fn zero_bottleneck_has_no_modules() {
        let cfg = ModelConfig::default();
        let b = create_bundle("none", &cfg, AdapterConfig::new(0), 0).unwrap();
        assert!(b.modules.is_empty());
        assert_eq!(count_adapter_params(64, 0, 4), 0);
    }

    #[test]
    fn paper_scale_overhead() {
        let small = count_adapter_params(1024, 4, 12);
        assert_eq!(small, 122_880);
        let big = count_adapter_params(1024, 2048, 12);
        assert_eq!(big, 50_356_224);
        assert!((small as f64 / 375e6 * 100.0 - 0.032768).abs() < 1e-9);
        assert!((big as f64 / 375e6 * 100.0 - 13.4283264).abs() < 1e-9);
    }

    #[test]
    fn creation_is_seeded() {
        let cfg = ModelConfig::default();
        let a = create_bundle("t", &cfg, AdapterConfig::new(4), 9).unwrap();
        let b = create_bundle("t", &cfg, AdapterConfig::new(4), 9).unwrap();
        let c = create_bundle("t", &cfg, AdapterConfig::new(4), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.modules.iter().all(|m| m.w_up.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn duplicate_and_unknown_tasks() {
        let cfg = ModelConfig {
            vocab_size: 10,
            d_model: 8,
            d_ff: 8,
            num_heads: 2,
            ..ModelConfig::default()
        };
        let mut m = Seq2Seq::new(cfg, 0).unwrap();
        m.add_task("a", AdapterConfig::new(2), 1).unwrap();
        assert!(matches!(
            m.add_task("a", AdapterConfig::new(2), 1),
            Err(Error::AlreadyExists(_))
        ));
        assert!(matches!(m.set_trainable("b"), Err(Error::TaskNotFound(_))));
        assert!(matches!(m.remove("b"), Err(Error::TaskNotFound(_))));
        let wrong = create_bundle(
            "c",
            &ModelConfig {
                d_model: 16,
                ..ModelConfig::default()
            },
            AdapterConfig::new(2),
            0,
        )
        .unwrap();
        assert!(matches!(m.inject(wrong), Err(Error::Dimension { .. })));
    }

    #[test]
    fn remove_returns_injected_bundle() {
        let cfg = ModelConfig {
            vocab_size: 10,
            d_model: 8,
            d_ff: 8,
            num_heads: 2,
            ..ModelConfig::default()
        };
        let mut m = Seq2Seq::new(cfg.clone(), 0).unwrap();
        let before = m.store().clone();
        let b = create_bundle("a", &cfg, AdapterConfig::new(3), 4).unwrap();
        m.inject(b.clone()).unwrap();
        assert_eq!(m.bundle("a").unwrap(), b);
        assert_eq!(m.remove("a").unwrap(), b);
        assert_eq!(m.store(), &before);
    }
}
