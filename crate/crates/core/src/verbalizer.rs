//! Label prediction heads over the mask-slot outputs: a hand-crafted
//! token-set verbalizer, a soft verbalizer built from support-set feature
//! means, their convex mixture, and a small dot-product baseline head
//! trained per task.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tape, Tensor};

pub const RHO_DEFAULT: f64 = 10.0;
pub const LAMBDA_DEFAULT: f64 = 0.5;

/// Hard verbalizer: one nonempty token-id set per episode-local label.
#[derive(Clone, Debug)]
pub struct HandVerbalizer {
    sets: Vec<Vec<usize>>,
}

impl HandVerbalizer {
    pub fn new(sets: Vec<Vec<usize>>, vocab_len: usize) -> Result<Self> {
        if sets.is_empty() {
            return Err(Error::Config("verbalizer needs at least one label".into()));
        }
        for (y, set) in sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::Config(format!("label {y} has an empty token set")));
            }
            for &t in set {
                if t >= vocab_len {
                    return Err(Error::Config(format!(
                        "label {y} token id {t} outside vocabulary of {vocab_len}"
                    )));
                }
            }
        }
        Ok(HandVerbalizer { sets })
    }

    /// Builds from a JSON-style name → token-strings map, ordered by
    /// `class_order`. Every class must be present with known tokens.
    pub fn from_named_map(
        map: &BTreeMap<String, Vec<String>>,
        class_order: &[String],
        vocab: &Vocabulary,
    ) -> Result<Self> {
        let mut sets = Vec::with_capacity(class_order.len());
        for name in class_order {
            let tokens = map
                .get(name)
                .ok_or_else(|| Error::Config(format!("verbalizer file missing class {name:?}")))?;
            let mut ids = Vec::with_capacity(tokens.len());
            for t in tokens {
                let id = vocab
                    .id_of(t)
                    .ok_or_else(|| Error::Config(format!("verbalizer token {t:?} not in vocabulary")))?;
                ids.push(id);
            }
            sets.push(ids);
        }
        Self::new(sets, vocab.len())
    }

    pub fn n_labels(&self) -> usize {
        self.sets.len()
    }

    pub fn sets(&self) -> &[Vec<usize>] {
        &self.sets
    }

    /// Per-label mean of member-token probabilities. Deliberately NOT
    /// renormalized across labels; the mixture and argmax consume it raw.
    pub fn hard_prob(&self, tape: &mut Tape, vocab_dist: Tensor) -> Result<Tensor> {
        let mut per_label = Vec::with_capacity(self.sets.len());
        for set in &self.sets {
            let member = tape.gather_elems(vocab_dist, set)?;
            per_label.push(tape.mean(member)?);
        }
        tape.stack_scalars(&per_label)
    }
}

/// One support sample's mask-slot embedding, tagged for canonical ordering.
#[derive(Clone, Copy, Debug)]
pub struct SupportEmbedding {
    pub sample_id: usize,
    pub label: usize,
    pub h: Tensor,
}

/// Soft-verbalizer anchors: one support-mean embedding per label, living
/// on the tape so gradients flow back through the support forwards.
#[derive(Clone, Debug)]
pub struct LabelEmbeddings {
    pub by_label: Vec<Tensor>,
    /// Identifier of the support snapshot these means came from.
    pub provenance: u64,
}

/// v_y = mean over the label's support embeddings. Samples are summed in
/// sample_id order, so any input permutation yields bitwise-equal means.
pub fn compute_label_embeddings(
    tape: &mut Tape,
    samples: &[SupportEmbedding],
    n_labels: usize,
    provenance: u64,
) -> Result<LabelEmbeddings> {
    if n_labels == 0 {
        return Err(Error::contract("compute_label_embeddings", "n_labels must be >= 1"));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by_key(|&i| samples[i].sample_id);

    let mut by_label = Vec::with_capacity(n_labels);
    for y in 0..n_labels {
        let members: Vec<Tensor> = order
            .iter()
            .map(|&i| &samples[i])
            .filter(|s| s.label == y)
            .map(|s| s.h)
            .collect();
        if members.is_empty() {
            return Err(Error::Episode(format!("label {y} has no support samples")));
        }
        let stacked = tape.stack_rows(&members)?;
        by_label.push(tape.mean_rows(stacked)?);
    }
    Ok(LabelEmbeddings { by_label, provenance })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Cosine,
    /// Negative squared Euclidean distance. Optional variant; off by default.
    NegEuclidean,
}

/// Soft verbalizer distribution: softmax over labels of ρ·sim(v_y, h).
pub fn repverb_prob_with(
    tape: &mut Tape,
    h: Tensor,
    labels: &LabelEmbeddings,
    rho: f64,
    similarity: Similarity,
) -> Result<Tensor> {
    if !(rho.is_finite() && rho > 0.0) {
        return Err(Error::Config(format!("rho must be positive and finite, got {rho}")));
    }
    let mut sims = Vec::with_capacity(labels.by_label.len());
    for &v in &labels.by_label {
        let s = match similarity {
            Similarity::Cosine => tape.cosine(v, h)?,
            Similarity::NegEuclidean => {
                let neg_h = tape.scale(h, -1.0)?;
                let diff = tape.add(v, neg_h)?;
                let sq = tape.mul(diff, diff)?;
                let total = tape.sum(sq)?;
                tape.scale(total, -1.0)?
            }
        };
        sims.push(s);
    }
    let scores = tape.stack_scalars(&sims)?;
    tape.softmax(scores, 1.0 / rho)
}

pub fn repverb_prob(tape: &mut Tape, h: Tensor, labels: &LabelEmbeddings, rho: f64) -> Result<Tensor> {
    repverb_prob_with(tape, h, labels, rho, Similarity::Cosine)
}

/// P = (1−λ)·hard + λ·soft, elementwise.
pub fn combined_prob(tape: &mut Tape, hard: Tensor, soft: Tensor, lambda: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let a = tape.scale(hard, 1.0 - lambda)?;
    let b = tape.scale(soft, lambda)?;
    tape.add(a, b)
}

/// −log of the combined score at `target`. With `normalize` the scores are
/// first renormalized over the episode's labels, keeping the loss a proper
/// NLL; without it the raw score is used. Argmax is unaffected either way.
pub fn combined_nll(tape: &mut Tape, combined: Tensor, target: usize, normalize: bool) -> Result<Tensor> {
    let p = tape.pick(combined, target)?;
    let lp = tape.ln(p)?;
    let neg_lp = tape.scale(lp, -1.0)?;
    if !normalize {
        return Ok(neg_lp);
    }
    let total = tape.sum(combined)?;
    let log_total = tape.ln(total)?;
    tape.add(log_total, neg_lp)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpConfig {
    /// Exactly this many gradient steps, no early stop.
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for WarpConfig {
    fn default() -> Self {
        WarpConfig { steps: 5, lr: 0.5, seed: 7 }
    }
}

/// Per-task dot-product head: one learnable embedding per label.
#[derive(Clone, Debug)]
pub struct WarpHead {
    /// `[n_labels, dim]` row-major.
    pub embeddings: Vec<f64>,
    pub n_labels: usize,
    pub dim: usize,
}

/// Trains a fresh head on frozen support features: random init, then
/// exactly `steps` gradient-descent steps on the support NLL of the
/// dot-product softmax. The features never change, so they arrive as raw
/// vectors rather than tape nodes.
pub fn warp_fit(support: &[(Vec<f64>, usize)], n_labels: usize, cfg: &WarpConfig) -> Result<WarpHead> {
    if n_labels == 0 || support.is_empty() {
        return Err(Error::contract("warp_fit", "need at least one label and one sample"));
    }
    let dim = support[0].0.len();
    let mut seen = vec![false; n_labels];
    for (h, y) in support {
        if h.len() != dim {
            return Err(Error::shape("warp_fit", format!("feature of {} vs {dim}", h.len())));
        }
        if *y >= n_labels {
            return Err(Error::shape("warp_fit", format!("label {y} out of range 0..{n_labels}")));
        }
        seen[*y] = true;
    }
    if let Some(y) = seen.iter().position(|s| !s) {
        return Err(Error::Episode(format!("label {y} has no support samples")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let mut emb: Vec<f64> = (0..n_labels * dim).map(|_| normal.sample(&mut rng)).collect();

    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let v = tape.leaf(emb.clone(), Shape::Matrix(n_labels, dim))?;
        let mut losses = Vec::with_capacity(support.len());
        for (h, y) in support {
            let hc = tape.constant(h.clone(), Shape::Vector(dim))?;
            let logits = tape.matvec(v, hc)?;
            let logp = tape.log_softmax(logits)?;
            losses.push(tape.nll(logp, *y)?);
        }
        let stacked = tape.stack_scalars(&losses)?;
        let loss = tape.mean(stacked)?;
        let grads = tape.backward(loss)?;
        let g = grads.wrt(v);
        for (p, gi) in emb.iter_mut().zip(g) {
            *p -= cfg.lr * gi;
        }
    }
    Ok(WarpHead { embeddings: emb, n_labels, dim })
}

/// softmax over labels of v_y·h.
pub fn warp_predict(head: &WarpHead, h: &[f64]) -> Result<Vec<f64>> {
    if h.len() != head.dim {
        return Err(Error::shape("warp_predict", format!("feature of {} vs {}", h.len(), head.dim)));
    }
    let mut tape = Tape::new();
    let v = tape.constant(head.embeddings.clone(), Shape::Matrix(head.n_labels, head.dim))?;
    let hc = tape.constant(h.to_vec(), Shape::Vector(head.dim))?;
    let logits = tape.matvec(v, hc)?;
    let probs = tape.softmax(logits, 1.0)?;
    Ok(tape.value(probs).to_vec())
}
