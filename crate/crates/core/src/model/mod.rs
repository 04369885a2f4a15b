//! A toy decoder-only transformer with a manual backward pass.
//!
//! Architecture: embedding, then `n_layers` of [RMS-norm, multi-head
//! attention with rotary positions and block-sparse masking, RMS-norm, gated
//! MLP], a final RMS-norm, and an output projection. Small enough to run real
//! DPO steps on a CPU, exact enough to check against finite differences.

mod backward;
mod forward;
mod optim;

pub use backward::backward;
pub use forward::{attention_block_sparse, attention_dense, forward, ForwardCache};
pub use optim::{adamw_step, sgd_step, AdamHyperParams, AdamState, Optimizer};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng::{sample_normal, SeedSplitter};
use crate::scalar::{Precision, Scalar};

/// Model dimensions and initialization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
    #[serde(default = "default_rms_eps")]
    pub rms_eps: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    pub seed: u64,
}

fn default_rope_theta() -> f64 {
    10_000.0
}

fn default_rms_eps() -> f64 {
    1e-6
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    /// A small default suitable for experiments; override fields as needed.
    pub fn toy(vocab_size: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            rope_theta: default_rope_theta(),
            rms_eps: default_rms_eps(),
            init_std: default_init_std(),
            seed,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::Config(
                "vocab_size, d_model, n_heads, and d_ff must be >= 1".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.d_head().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "head dimension {} must be even for rotary embeddings",
                self.d_head()
            )));
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return Err(Error::Config("rope_theta must be positive".into()));
        }
        if !(self.rms_eps.is_finite() && self.rms_eps > 0.0) {
            return Err(Error::Config("rms_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Weights of one transformer layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<S> {
    pub attn_norm: Vec<S>,
    pub wq: Matrix<S>,
    pub wk: Matrix<S>,
    pub wv: Matrix<S>,
    pub wo: Matrix<S>,
    pub mlp_norm: Vec<S>,
    pub w_gate: Matrix<S>,
    pub w_up: Matrix<S>,
    pub w_down: Matrix<S>,
}

/// All model weights. Also reused as the gradient container, since gradients
/// mirror the parameter shapes exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    pub config: ModelConfig,
    pub embed: Matrix<S>,
    pub layers: Vec<LayerParams<S>>,
    pub final_norm: Vec<S>,
    pub output: Matrix<S>,
}

/// Deterministic initialization: every tensor draws from its own named RNG
/// stream, so the result is a pure function of (config, seed).
pub fn init<S: Scalar>(config: &ModelConfig) -> Result<ModelParams<S>> {
    config.validate()?;
    let splitter = SeedSplitter::new(config.seed);
    let normal = |name: &str, rows: usize, cols: usize| -> Matrix<S> {
        let mut rng = splitter.stream(name);
        let data = (0..rows * cols)
            .map(|_| S::from_f64(sample_normal(&mut rng, config.init_std)))
            .collect();
        Matrix::from_vec(rows, cols, data).expect("sized by construction")
    };
    let d = config.d_model;
    let layers = (0..config.n_layers)
        .map(|l| LayerParams {
            attn_norm: vec![S::one(); d],
            wq: normal(&format!("layer{l}.wq"), d, d),
            wk: normal(&format!("layer{l}.wk"), d, d),
            wv: normal(&format!("layer{l}.wv"), d, d),
            wo: normal(&format!("layer{l}.wo"), d, d),
            mlp_norm: vec![S::one(); d],
            w_gate: normal(&format!("layer{l}.w_gate"), d, config.d_ff),
            w_up: normal(&format!("layer{l}.w_up"), d, config.d_ff),
            w_down: normal(&format!("layer{l}.w_down"), config.d_ff, d),
        })
        .collect();
    Ok(ModelParams {
        embed: normal("embed", config.vocab_size, d),
        layers,
        final_norm: vec![S::one(); d],
        output: normal("output", d, config.vocab_size),
        config: config.clone(),
    })
}

impl<S: Scalar> ModelParams<S> {
    /// Same shapes, all zeros. The gradient container.
    pub fn zeros_like(&self) -> Self {
        let d = self.config.d_model;
        Self {
            config: self.config.clone(),
            embed: Matrix::zeros(self.config.vocab_size, d),
            layers: self
                .layers
                .iter()
                .map(|_| LayerParams {
                    attn_norm: vec![S::zero(); d],
                    wq: Matrix::zeros(d, d),
                    wk: Matrix::zeros(d, d),
                    wv: Matrix::zeros(d, d),
                    wo: Matrix::zeros(d, d),
                    mlp_norm: vec![S::zero(); d],
                    w_gate: Matrix::zeros(d, self.config.d_ff),
                    w_up: Matrix::zeros(d, self.config.d_ff),
                    w_down: Matrix::zeros(self.config.d_ff, d),
                })
                .collect(),
            final_norm: vec![S::zero(); d],
            output: Matrix::zeros(d, self.config.vocab_size),
        }
    }

    /// Named views of every parameter tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[S])> {
        let mut out: Vec<(String, &[S])> = vec![("embed".into(), self.embed.data())];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.attn_norm"), &layer.attn_norm));
            out.push((format!("layer{l}.wq"), layer.wq.data()));
            out.push((format!("layer{l}.wk"), layer.wk.data()));
            out.push((format!("layer{l}.wv"), layer.wv.data()));
            out.push((format!("layer{l}.wo"), layer.wo.data()));
            out.push((format!("layer{l}.mlp_norm"), &layer.mlp_norm));
            out.push((format!("layer{l}.w_gate"), layer.w_gate.data()));
            out.push((format!("layer{l}.w_up"), layer.w_up.data()));
            out.push((format!("layer{l}.w_down"), layer.w_down.data()));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("output".into(), self.output.data()));
        out
    }

    /// Mutable counterpart of [`ModelParams::tensors`]; identical order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [S])> {
        let mut out: Vec<(String, &mut [S])> = vec![("embed".into(), self.embed.data_mut())];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((
                format!("layer{l}.attn_norm"),
                layer.attn_norm.as_mut_slice(),
            ));
            out.push((format!("layer{l}.wq"), layer.wq.data_mut()));
            out.push((format!("layer{l}.wk"), layer.wk.data_mut()));
            out.push((format!("layer{l}.wv"), layer.wv.data_mut()));
            out.push((format!("layer{l}.wo"), layer.wo.data_mut()));
            out.push((format!("layer{l}.mlp_norm"), layer.mlp_norm.as_mut_slice()));
            out.push((format!("layer{l}.w_gate"), layer.w_gate.data_mut()));
            out.push((format!("layer{l}.w_up"), layer.w_up.data_mut()));
            out.push((format!("layer{l}.w_down"), layer.w_down.data_mut()));
        }
        out.push(("final_norm".into(), self.final_norm.as_mut_slice()));
        out.push(("output".into(), self.output.data_mut()));
        out
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        for (name, data) in self.tensors() {
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("{what}: tensor {name}")));
            }
        }
        Ok(())
    }
}

/// Serialized model state: config plus flattened parameter tensors (always
/// stored as f64, which round-trips both precisions exactly).
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub precision: Precision,
    pub config: ModelConfig,
    pub step: u64,
    pub tensors: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub optimizer: Option<OptimizerCheckpoint>,
}

/// Adam moment estimates, stored alongside the weights so resumed runs
/// continue exactly.
#[derive(Debug, Serialize, Deserialize)]
pub struct OptimizerCheckpoint {
    pub step: u64,
    pub first_moments: BTreeMap<String, Vec<f64>>,
    pub second_moments: BTreeMap<String, Vec<f64>>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

fn tensors_to_map<S: Scalar>(params: &ModelParams<S>) -> BTreeMap<String, Vec<f64>> {
    params
        .tensors()
        .into_iter()
        .map(|(name, data)| (name, data.iter().map(|&v| Scalar::to_f64(v)).collect()))
        .collect()
}

fn tensors_from_map<S: Scalar>(
    params: &mut ModelParams<S>,
    map: &BTreeMap<String, Vec<f64>>,
) -> Result<()> {
    for (name, slot) in params.tensors_mut() {
        let values = map
            .get(&name)
            .ok_or_else(|| Error::Data(format!("checkpoint is missing tensor {name}")))?;
        if values.len() != slot.len() {
            return Err(Error::Shape(format!(
                "checkpoint tensor {name} has {} values, expected {}",
                values.len(),
                slot.len()
            )));
        }
        for (s, &v) in slot.iter_mut().zip(values) {
            *s = S::from_f64(v);
        }
    }
    Ok(())
}

/// Write a versioned JSON checkpoint.
pub fn save_checkpoint<S: Scalar>(
    params: &ModelParams<S>,
    step: u64,
    optimizer: Option<&AdamState<S>>,
    path: &Path,
) -> Result<()> {
    let checkpoint = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        precision: S::PRECISION,
        config: params.config.clone(),
        step,
        tensors: tensors_to_map(params),
        optimizer: optimizer.map(|state| OptimizerCheckpoint {
            step: state.step,
            first_moments: tensors_to_map(&state.first_moment),
            second_moments: tensors_to_map(&state.second_moment),
        }),
    };
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), &checkpoint)?;
    Ok(())
}

/// Load a checkpoint saved at the same precision.
pub fn load_checkpoint<S: Scalar>(
    path: &Path,
) -> Result<(ModelParams<S>, u64, Option<AdamState<S>>)> {
    let file = std::fs::File::open(path)?;
    let checkpoint: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
    if checkpoint.format_version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {}",
            checkpoint.format_version
        )));
    }
    if checkpoint.precision != S::PRECISION {
        return Err(Error::Config(format!(
            "checkpoint was saved at {} but this run uses {}",
            checkpoint.precision,
            S::PRECISION
        )));
    }
    let mut params: ModelParams<S> = init(&checkpoint.config)?;
    tensors_from_map(&mut params, &checkpoint.tensors)?;
    let optimizer = match checkpoint.optimizer {
        Some(opt) => {
            let mut state = AdamState::new(&params);
            state.step = opt.step;
            tensors_from_map(&mut state.first_moment, &opt.first_moments)?;
            tensors_from_map(&mut state.second_moment, &opt.second_moments)?;
            Some(state)
        }
        None => None,
    };
    Ok((params, checkpoint.step, optimizer))
}
