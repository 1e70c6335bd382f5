//! The meta-learned prompt pool: K keys paired with K continuous prompt
//! values, composed per instance by softmax attention against a query
//! embedding. Also provides the single-prompt baseline mode that skips
//! attention entirely.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{query_embedding, EncoderParams, NamedArray};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// Key/value pool with attention composition; encoder stays frozen.
    MetaPrompter,
    /// Single meta-learned prompt, no keys, no attention.
    MetaPrompting,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub k: usize,
    pub prompt_len: usize,
    pub mode: PoolMode,
    /// Divide key scores by sqrt(d_o) before the softmax. The unscaled
    /// variant exists for fidelity comparisons.
    pub sqrt_scale: bool,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig { k: 8, prompt_len: 8, mode: PoolMode::MetaPrompter, sqrt_scale: true }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.prompt_len == 0 {
            return Err(Error::Config("pool needs k >= 1 and prompt_len >= 1".into()));
        }
        if self.mode == PoolMode::MetaPrompting && self.k != 1 {
            return Err(Error::Config(format!(
                "single-prompt mode requires k = 1, got {}",
                self.k
            )));
        }
        Ok(())
    }
}

/// Meta-parameter count of a pool configuration. The single-prompt mode
/// counts the encoder parameters it meta-learns alongside its one prompt.
pub fn param_count(config: &PoolConfig, d_in: usize, d_out: usize, encoder_params: usize) -> usize {
    match config.mode {
        PoolMode::MetaPrompter => config.k * (d_out + config.prompt_len * d_in),
        PoolMode::MetaPrompting => encoder_params + config.prompt_len * d_in,
    }
}

#[derive(Clone, Debug)]
pub struct PromptPool {
    pub config: PoolConfig,
    pub d_in: usize,
    pub d_out: usize,
    /// `[K, d_out]` row-major. Empty in single-prompt mode.
    pub keys: Vec<f64>,
    /// K matrices, each `[prompt_len, d_in]` row-major.
    pub values: Vec<Vec<f64>>,
}

/// Builds a fresh pool: keys from a zero-mean Gaussian (std 0.02), every
/// value row copied from the embedding of a label token drawn uniformly
/// with replacement. Keys are drawn before values, so the two modes share
/// value initialization only at matching seeds and key counts.
pub fn init_pool(
    config: PoolConfig,
    encoder: &EncoderParams,
    label_tokens: &[usize],
    seed: u64,
) -> Result<PromptPool> {
    config.validate()?;
    if label_tokens.is_empty() {
        return Err(Error::Config("label-token pool is empty".into()));
    }
    let d = encoder.config.dim;
    for &t in label_tokens {
        if t >= encoder.vocab.len() {
            return Err(Error::Config(format!(
                "label token id {t} outside vocabulary of {}",
                encoder.vocab.len()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys = if config.mode == PoolMode::MetaPrompter {
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        (0..config.k * d).map(|_| normal.sample(&mut rng)).collect()
    } else {
        Vec::new()
    };

    let mut values = Vec::with_capacity(config.k);
    for _ in 0..config.k {
        let mut m = Vec::with_capacity(config.prompt_len * d);
        for _ in 0..config.prompt_len {
            let t = label_tokens[rng.random_range(0..label_tokens.len())];
            m.extend_from_slice(&encoder.embedding[t * d..(t + 1) * d]);
        }
        values.push(m);
    }

    Ok(PromptPool { config, d_in: d, d_out: d, keys, values })
}

impl PromptPool {
    /// Named arrays in canonical order: keys (when present), then values.
    pub fn param_arrays(&self) -> Vec<NamedArray<'_>> {
        let mut out = Vec::with_capacity(self.values.len() + 1);
        if !self.keys.is_empty() {
            out.push(NamedArray {
                name: "keys".into(),
                shape: Shape::Matrix(self.config.k, self.d_out),
                data: &self.keys,
            });
        }
        for (i, v) in self.values.iter().enumerate() {
            out.push(NamedArray {
                name: format!("value{i}"),
                shape: Shape::Matrix(self.config.prompt_len, self.d_in),
                data: v,
            });
        }
        out
    }

    pub fn param_arrays_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::with_capacity(self.values.len() + 1);
        if !self.keys.is_empty() {
            out.push(&mut self.keys);
        }
        out.extend(self.values.iter_mut());
        out
    }

    /// Number of stored parameter values (differs from `param_count` in
    /// single-prompt mode, which also counts the encoder it meta-learns).
    pub fn num_stored(&self) -> usize {
        self.keys.len() + self.values.iter().map(Vec::len).sum::<usize>()
    }

    /// Registers the pool as tape constants (evaluation-only forward).
    pub fn on_tape(&self, tape: &mut Tape) -> Result<TapePool> {
        self.register(tape, false).map(|(p, _)| p)
    }

    /// Registers the pool as gradient leaves, in `param_arrays` order.
    pub fn on_tape_trainable(&self, tape: &mut Tape) -> Result<(TapePool, Vec<Tensor>)> {
        self.register(tape, true)
    }

    fn register(&self, tape: &mut Tape, trainable: bool) -> Result<(TapePool, Vec<Tensor>)> {
        let mut leaves = Vec::new();
        let mut put = |tape: &mut Tape, data: &[f64], shape: Shape| -> Result<Tensor> {
            let t = if trainable {
                tape.leaf(data.to_vec(), shape)?
            } else {
                tape.constant(data.to_vec(), shape)?
            };
            if trainable {
                leaves.push(t);
            }
            Ok(t)
        };
        let keys = if self.keys.is_empty() {
            None
        } else {
            Some(put(tape, &self.keys, Shape::Matrix(self.config.k, self.d_out))?)
        };
        let mut values = Vec::with_capacity(self.values.len());
        for v in &self.values {
            values.push(put(tape, v, Shape::Matrix(self.config.prompt_len, self.d_in))?);
        }
        Ok((
            TapePool { keys, values, mode: self.config.mode, sqrt_scale: self.config.sqrt_scale, d_out: self.d_out },
            leaves,
        ))
    }

    /// Attention weights for a raw query vector, off any caller tape.
    pub fn attention_for(&self, q_x: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let pool = self.on_tape(&mut tape)?;
        let q = tape.constant(q_x.to_vec(), Shape::Vector(q_x.len()))?;
        let a = pool.attention_weights(&mut tape, q)?;
        Ok(tape.value(a).to_vec())
    }
}

/// Pool registered on one tape.
#[derive(Debug)]
pub struct TapePool {
    pub keys: Option<Tensor>,
    pub values: Vec<Tensor>,
    mode: PoolMode,
    sqrt_scale: bool,
    d_out: usize,
}

impl TapePool {
    /// a = softmax(K·q_x / sqrt(d_o)); differentiable w.r.t. the keys.
    pub fn attention_weights(&self, tape: &mut Tape, q_x: Tensor) -> Result<Tensor> {
        let Some(keys) = self.keys else {
            return Err(Error::contract(
                "attention_weights",
                "single-prompt mode has no keys; attention is bypassed",
            ));
        };
        let scores = tape.matvec(keys, q_x)?;
        let temperature = if self.sqrt_scale { (self.d_out as f64).sqrt() } else { 1.0 };
        tape.softmax(scores, temperature)
    }

    /// Convex combination of all K values; no top-N truncation.
    pub fn compose(&self, tape: &mut Tape, a: Tensor) -> Result<Tensor> {
        tape.weighted_sum(a, &self.values)
    }

    /// The instance prompt. Pool mode attends over keys with the supplied
    /// query embedding; single-prompt mode returns its one value whatever
    /// the input.
    pub fn instance_prompt(&self, tape: &mut Tape, q_x: Option<Tensor>) -> Result<Tensor> {
        match self.mode {
            PoolMode::MetaPrompting => Ok(self.values[0]),
            PoolMode::MetaPrompter => {
                let q = q_x.ok_or_else(|| {
                    Error::contract("instance_prompt", "pool mode needs a query embedding")
                })?;
                let a = self.attention_weights(tape, q)?;
                self.compose(tape, a)
            }
        }
    }
}

/// Convenience for callers holding raw tokens: computes q(x) with the
/// frozen encoder, then
/// attends and composes on the caller's tape. The query embedding enters
/// as a constant, so no gradient flows into the encoder.
pub fn instance_prompt_for(
    pool: &TapePool,
    tape: &mut Tape,
    x: &[usize],
    encoder: &EncoderParams,
    probe_anchors: &[usize],
) -> Result<Tensor> {
    let q = match pool.mode {
        PoolMode::MetaPrompting => None,
        PoolMode::MetaPrompter => {
            let qv = query_embedding(encoder, x, probe_anchors)?;
            Some(tape.constant(qv, Shape::Vector(encoder.config.dim))?)
        }
    };
    pool.instance_prompt(tape, q)
}
