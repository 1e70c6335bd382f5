//! First-order episodic meta-training of the prompt pool: an inner loop of
//! plain gradient steps adapts a copy of the pool to each episode's support
//! set, and the outer loop applies the query-loss gradient, taken at the
//! adapted parameters, to the meta pool.
//!
//! Every inner step runs on a fresh tape whose only leaves are the pool
//! parameters; the encoder always enters as constants. Discarding the tape
//! between steps is what makes the procedure first-order.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::encoder::{query_embedding, EncoderParams, TapeEncoder};
use crate::episodes::{
    derive_seed, episode_label_tokens, sample_episode, Corpus, Episode, EpisodeConfig, Split,
    ANCHOR_WORDS,
};
use crate::error::{Error, Result};
use crate::pool::{init_pool, PoolConfig, PromptPool, TapePool};
use crate::tensor::{Shape, Tape, Tensor};
use crate::verbalizer::{
    combined_nll, combined_prob, compute_label_embeddings, repverb_prob_with, HandVerbalizer,
    LabelEmbeddings, Similarity, SupportEmbedding, LAMBDA_DEFAULT, RHO_DEFAULT,
};

const POOL_STREAM: u64 = 0x706f_6f6c;
const TRAIN_STREAM: u64 = 0x7472_6169;
const VAL_STREAM: u64 = 0x7661_6c69;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    /// Inner-loop step size.
    pub alpha: f64,
    pub j_train: usize,
    pub j_eval: usize,
    /// Verbalizer mixture weight: 0 = hard only, 1 = soft only.
    pub lambda: f64,
    /// Cosine softmax temperature (multiplier).
    pub rho: f64,
    /// Renormalize combined scores over the episode's labels inside the
    /// loss. Off reproduces the raw −log score.
    pub normalize_combined: bool,
    /// Recompute label embeddings with the final adapted pool for the
    /// outer query loss. Off reuses the values from the last inner step
    /// as constants.
    pub recompute_label_embeddings: bool,
    pub similarity: Similarity,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            alpha: 0.1,
            j_train: 5,
            j_eval: 15,
            lambda: LAMBDA_DEFAULT,
            rho: RHO_DEFAULT,
            normalize_combined: true,
            recompute_label_embeddings: true,
            similarity: Similarity::Cosine,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.j_train == 0 || self.j_eval == 0 {
            return Err(Error::Config("j_train and j_eval must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(Error::Config(format!("rho must be positive, got {}", self.rho)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Outer-loop (Adam) learning rate.
    pub lr: f64,
    /// Total outer iterations, one episode each.
    pub iterations: usize,
    pub val_period: usize,
    pub val_episodes: usize,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig { lr: 1e-3, iterations: 3000, val_period: 50, val_episodes: 200, seed: 1 }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.iterations == 0 || self.val_period == 0 || self.val_episodes == 0 {
            return Err(Error::Config(
                "iterations, val_period and val_episodes must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Bias-corrected Adam over a fixed list of parameter arrays.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> AdamState {
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam step over all arrays; the step counter advances once per
    /// call. Non-finite gradients abort before any state changes.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract(
                "adam_update",
                format!("{} arrays vs state for {}", params.len(), self.m.len()),
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.len() != self.m[i].len() || params[i].len() != self.m[i].len() {
                return Err(Error::contract(
                    "adam_update",
                    format!("array {i} length mismatch against optimizer state"),
                ));
            }
            if !g.iter().sum::<f64>().is_finite() {
                return Err(Error::non_finite_in("adam_update", format!("gradient array {i}")));
            }
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, &gj) in g.iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                params[i][j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Outer-loop optimizer. Sgd exists so the meta update can be reduced to
/// `θ − lr·g` when a closed-form step is needed for comparison.
#[derive(Clone, Debug)]
pub enum OuterOptimizer {
    Adam(AdamState),
    Sgd,
}

impl OuterOptimizer {
    pub fn adam_for(pool: &PromptPool) -> OuterOptimizer {
        let sizes: Vec<usize> = pool.param_arrays().iter().map(|a| a.data.len()).collect();
        OuterOptimizer::Adam(AdamState::new(&sizes))
    }

    pub fn apply(&mut self, params: &mut [&mut Vec<f64>], grads: &[&[f64]], lr: f64) -> Result<()> {
        match self {
            OuterOptimizer::Adam(state) => {
                let mut views: Vec<&mut [f64]> = params.iter_mut().map(|p| p.as_mut_slice()).collect();
                state.update(&mut views, grads, lr)
            }
            OuterOptimizer::Sgd => {
                if params.len() != grads.len() {
                    return Err(Error::contract(
                        "sgd_update",
                        format!("{} arrays vs {} gradients", params.len(), grads.len()),
                    ));
                }
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    if p.len() != g.len() {
                        return Err(Error::contract("sgd_update", format!("array {i} length mismatch")));
                    }
                    if !g.iter().sum::<f64>().is_finite() {
                        return Err(Error::non_finite_in("sgd_update", format!("gradient array {i}")));
                    }
                    for (pj, gj) in p.iter_mut().zip(g.iter()) {
                        *pj -= lr * gj;
                    }
                }
                Ok(())
            }
        }
    }
}

/// Shared per-run state: the corpus, the frozen encoder, anchor token ids
/// for the task template and the query probe, and a cache of query
/// embeddings (pure functions of the document, so cached across steps).
pub struct RunContext<'a> {
    pub corpus: &'a Corpus,
    pub encoder: &'a EncoderParams,
    pub probe_anchors: Vec<usize>,
    pub task_anchors: Vec<usize>,
    query_cache: HashMap<usize, Vec<f64>>,
}

impl<'a> RunContext<'a> {
    /// Task and probe both use the corpus anchor words.
    pub fn new(corpus: &'a Corpus, encoder: &'a EncoderParams) -> Result<RunContext<'a>> {
        let anchors: Vec<usize> = ANCHOR_WORDS
            .iter()
            .map(|w| {
                corpus
                    .vocab
                    .id_of(w)
                    .ok_or_else(|| Error::Config(format!("anchor word {w:?} not in vocabulary")))
            })
            .collect::<Result<_>>()?;
        Self::with_anchors(corpus, encoder, anchors.clone(), anchors)
    }

    pub fn with_anchors(
        corpus: &'a Corpus,
        encoder: &'a EncoderParams,
        probe_anchors: Vec<usize>,
        task_anchors: Vec<usize>,
    ) -> Result<RunContext<'a>> {
        for &t in probe_anchors.iter().chain(&task_anchors) {
            if t >= corpus.vocab.len() {
                return Err(Error::Config(format!(
                    "anchor token id {t} outside vocabulary of {}",
                    corpus.vocab.len()
                )));
            }
        }
        Ok(RunContext { corpus, encoder, probe_anchors, task_anchors, query_cache: HashMap::new() })
    }

    /// q(doc): probe-wrapped mask embedding under the frozen encoder.
    pub fn query_vec(&mut self, doc: usize) -> Result<&[f64]> {
        if doc >= self.corpus.docs.len() {
            return Err(Error::Episode(format!(
                "document index {doc} outside corpus of {}",
                self.corpus.docs.len()
            )));
        }
        if !self.query_cache.contains_key(&doc) {
            let q = query_embedding(self.encoder, &self.corpus.docs[doc].tokens, &self.probe_anchors)?;
            self.query_cache.insert(doc, q);
        }
        Ok(&self.query_cache[&doc])
    }

    /// Mask hidden state and vocabulary distribution of one document under
    /// the task template with its instance prompt.
    fn encode_sample(
        &mut self,
        tape: &mut Tape,
        enc: &TapeEncoder,
        pool: &TapePool,
        doc: usize,
    ) -> Result<(Tensor, Tensor)> {
        let q = if pool.keys.is_some() {
            let qv = self.query_vec(doc)?.to_vec();
            Some(tape.constant(qv, Shape::Vector(self.encoder.config.dim))?)
        } else {
            None
        };
        let prompt = pool.instance_prompt(tape, q)?;
        let tokens = self.corpus.docs[doc].tokens.clone();
        let wrapped = enc.wrap(tape, &tokens, Some(prompt), &self.task_anchors)?;
        let out = enc.encode(tape, &wrapped)?;
        Ok((out.h_mask, out.vocab_dist))
    }
}

/// Hard verbalizer for an episode: each local label's token set comes from
/// its class metadata.
pub fn episode_verbalizer(corpus: &Corpus, episode: &Episode) -> Result<HandVerbalizer> {
    HandVerbalizer::new(episode_label_tokens(corpus, episode), corpus.vocab.len())
}

struct SupportPass {
    labels: LabelEmbeddings,
    nll_sum: Option<Tensor>,
}

fn support_pass(
    ctx: &mut RunContext,
    tape: &mut Tape,
    enc: &TapeEncoder,
    pool: &TapePool,
    episode: &Episode,
    verb: &HandVerbalizer,
    cfg: &AdaptConfig,
    with_loss: bool,
    provenance: u64,
) -> Result<SupportPass> {
    let mut embeddings = Vec::with_capacity(episode.support.len());
    let mut hards = Vec::with_capacity(if with_loss { episode.support.len() } else { 0 });
    for (i, s) in episode.support.iter().enumerate() {
        let (h, dist) = ctx.encode_sample(tape, enc, pool, s.doc)?;
        if with_loss {
            hards.push(verb.hard_prob(tape, dist)?);
        }
        embeddings.push(SupportEmbedding { sample_id: i, label: s.label, h });
    }
    let labels = compute_label_embeddings(tape, &embeddings, episode.n_way(), provenance)?;

    let nll_sum = if with_loss {
        let mut losses = Vec::with_capacity(episode.support.len());
        for (i, s) in episode.support.iter().enumerate() {
            let soft = repverb_prob_with(tape, embeddings[i].h, &labels, cfg.rho, cfg.similarity)?;
            let comb = combined_prob(tape, hards[i], soft, cfg.lambda)?;
            losses.push(combined_nll(tape, comb, s.label, cfg.normalize_combined)?);
        }
        let stacked = tape.stack_scalars(&losses)?;
        Some(tape.sum(stacked)?)
    } else {
        None
    };
    Ok(SupportPass { labels, nll_sum })
}

struct QueryPass {
    nll_sum: Option<Tensor>,
    n_correct: usize,
}

fn query_pass(
    ctx: &mut RunContext,
    tape: &mut Tape,
    enc: &TapeEncoder,
    pool: &TapePool,
    episode: &Episode,
    verb: &HandVerbalizer,
    cfg: &AdaptConfig,
    labels: &LabelEmbeddings,
    with_loss: bool,
) -> Result<QueryPass> {
    let mut losses = Vec::with_capacity(if with_loss { episode.query.len() } else { 0 });
    let mut n_correct = 0;
    for s in &episode.query {
        let (h, dist) = ctx.encode_sample(tape, enc, pool, s.doc)?;
        let hard = verb.hard_prob(tape, dist)?;
        let soft = repverb_prob_with(tape, h, labels, cfg.rho, cfg.similarity)?;
        let comb = combined_prob(tape, hard, soft, cfg.lambda)?;

        let scores = tape.value(comb);
        let pred = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("scores are finite"))
            .map(|(i, _)| i)
            .expect("nonempty scores");
        if pred == s.label {
            n_correct += 1;
        }
        if with_loss {
            losses.push(combined_nll(tape, comb, s.label, cfg.normalize_combined)?);
        }
    }
    let nll_sum = if with_loss {
        let stacked = tape.stack_scalars(&losses)?;
        Some(tape.sum(stacked)?)
    } else {
        None
    };
    Ok(QueryPass { nll_sum, n_correct })
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub pool: PromptPool,
    /// Mean per-sample support loss observed at the start of each step.
    pub loss_trace: Vec<f64>,
    /// Label embeddings from the last inner step (the values the final
    /// update saw), for the reuse variant of the outer step.
    pub last_label_embeddings: Vec<Vec<f64>>,
}

/// Inner loop: `steps` plain gradient steps with step size `cfg.alpha` on
/// the summed support NLL, starting from (a copy of) the meta pool. Each
/// step rebuilds instance prompts, label embeddings and both verbalizer
/// branches from scratch on its own tape.
pub fn inner_adapt(
    ctx: &mut RunContext,
    meta_pool: &PromptPool,
    episode: &Episode,
    verb: &HandVerbalizer,
    cfg: &AdaptConfig,
    steps: usize,
) -> Result<AdaptOutcome> {
    if steps == 0 {
        return Err(Error::contract("inner_adapt", "need at least one step"));
    }
    let mut pool = meta_pool.clone();
    let mut loss_trace = Vec::with_capacity(steps);
    let mut last_label_embeddings = Vec::new();

    for j in 0..steps {
        let mut tape = Tape::new();
        let enc = ctx.encoder.on_tape(&mut tape)?;
        let (pool_t, leaves) = pool.on_tape_trainable(&mut tape)?;
        let sp = support_pass(ctx, &mut tape, &enc, &pool_t, episode, verb, cfg, true, j as u64)
            .map_err(|e| match e {
                Error::NonFinite { op, .. } => Error::non_finite_in(op, format!("inner step {j}")),
                other => other,
            })?;
        let nll = sp.nll_sum.expect("support pass ran with loss");
        loss_trace.push(tape.scalar_value(nll) / episode.support.len() as f64);
        last_label_embeddings =
            sp.labels.by_label.iter().map(|&t| tape.value(t).to_vec()).collect();

        let grads = tape.backward(nll).map_err(|e| match e {
            Error::NonFinite { op, .. } => Error::non_finite_in(op, format!("inner step {j}")),
            other => other,
        })?;
        let mut arrays = pool.param_arrays_mut();
        for (arr, leaf) in arrays.iter_mut().zip(&leaves) {
            for (p, g) in arr.iter_mut().zip(grads.wrt(*leaf)) {
                *p -= cfg.alpha * g;
            }
        }
    }
    Ok(AdaptOutcome { pool, loss_trace, last_label_embeddings })
}

#[derive(Clone, Debug)]
pub struct OuterOutcome {
    /// Mean per-sample query loss at the adapted pool.
    pub query_loss: f64,
    /// Mean per-sample support loss at the adapted pool; absent when label
    /// embeddings were reused instead of recomputed.
    pub support_loss: Option<f64>,
    /// Query gradients w.r.t. the adapted pool, in parameter-array order,
    /// exactly as applied to the meta pool.
    pub grads: Vec<Vec<f64>>,
}

/// Outer step: query NLL at the adapted pool, gradient w.r.t. the ADAPTED
/// parameters (first-order), applied to the meta pool by `opt`.
pub fn outer_step(
    ctx: &mut RunContext,
    meta_pool: &mut PromptPool,
    adapted: &AdaptOutcome,
    episode: &Episode,
    verb: &HandVerbalizer,
    cfg: &AdaptConfig,
    opt: &mut OuterOptimizer,
    lr: f64,
) -> Result<OuterOutcome> {
    let mut tape = Tape::new();
    let enc = ctx.encoder.on_tape(&mut tape)?;
    let (pool_t, leaves) = adapted.pool.on_tape_trainable(&mut tape)?;

    let (labels, support_loss) = if cfg.recompute_label_embeddings {
        let sp = support_pass(ctx, &mut tape, &enc, &pool_t, episode, verb, cfg, true, u64::MAX)?;
        let loss = tape.scalar_value(sp.nll_sum.expect("support pass ran with loss"))
            / episode.support.len() as f64;
        (sp.labels, Some(loss))
    } else {
        if adapted.last_label_embeddings.is_empty() {
            return Err(Error::contract(
                "outer_step",
                "label-embedding reuse requested but the adaptation recorded none",
            ));
        }
        let mut by_label = Vec::with_capacity(adapted.last_label_embeddings.len());
        for v in &adapted.last_label_embeddings {
            by_label.push(tape.constant(v.clone(), Shape::Vector(v.len()))?);
        }
        (LabelEmbeddings { by_label, provenance: u64::MAX }, None)
    };

    let qp = query_pass(ctx, &mut tape, &enc, &pool_t, episode, verb, cfg, &labels, true)?;
    let nll = qp.nll_sum.expect("query pass ran with loss");
    let query_loss = tape.scalar_value(nll) / episode.query.len() as f64;
    let all = tape.backward(nll).map_err(|e| match e {
        Error::NonFinite { op, .. } => Error::non_finite_in(op, "outer step"),
        other => other,
    })?;
    let grads: Vec<Vec<f64>> = leaves.iter().map(|&l| all.wrt(l).to_vec()).collect();

    let mut arrays = meta_pool.param_arrays_mut();
    if arrays.len() != grads.len() {
        return Err(Error::contract(
            "outer_step",
            "adapted pool parameter layout differs from the meta pool",
        ));
    }
    let refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
    opt.apply(&mut arrays, &refs, lr)?;
    Ok(OuterOutcome { query_loss, support_loss, grads })
}

/// Forward-only accuracy of a (typically adapted) pool on one episode.
/// Label embeddings are always recomputed from the support set with this
/// pool; nothing here touches gradients.
pub fn evaluate_episode(
    ctx: &mut RunContext,
    pool: &PromptPool,
    episode: &Episode,
    verb: &HandVerbalizer,
    cfg: &AdaptConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let enc = ctx.encoder.on_tape(&mut tape)?;
    let pool_t = pool.on_tape(&mut tape)?;
    let sp = support_pass(ctx, &mut tape, &enc, &pool_t, episode, verb, cfg, false, 0)?;
    let qp = query_pass(ctx, &mut tape, &enc, &pool_t, episode, verb, cfg, &sp.labels, false)?;
    Ok(qp.n_correct as f64 / episode.query.len() as f64)
}

/// Mean per-sample support loss of a pool on one episode, forward-only.
pub fn support_loss(
    ctx: &mut RunContext,
    pool: &PromptPool,
    episode: &Episode,
    verb: &HandVerbalizer,
    cfg: &AdaptConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let enc = ctx.encoder.on_tape(&mut tape)?;
    let pool_t = pool.on_tape(&mut tape)?;
    let sp = support_pass(ctx, &mut tape, &enc, &pool_t, episode, verb, cfg, true, 0)?;
    Ok(tape.scalar_value(sp.nll_sum.expect("support pass ran with loss"))
        / episode.support.len() as f64)
}

/// Adapts `steps` inner steps from the meta pool, then scores the queries.
pub fn adapt_and_evaluate(
    ctx: &mut RunContext,
    meta_pool: &PromptPool,
    episode: &Episode,
    verb: &HandVerbalizer,
    cfg: &AdaptConfig,
    steps: usize,
) -> Result<f64> {
    let adapted = inner_adapt(ctx, meta_pool, episode, verb, cfg, steps)?;
    evaluate_episode(ctx, &adapted.pool, episode, verb, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub support_loss: f64,
    pub query_loss: f64,
    /// Present on validation iterations only.
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best_pool: PromptPool,
    pub best_iteration: usize,
    pub best_val_accuracy: f64,
    pub final_pool: PromptPool,
    pub metrics: Vec<MetricsRow>,
}

/// Full meta-training: T iterations of sample → adapt → outer step, with
/// periodic validation on a fixed episode set and argmax checkpointing
/// (ties keep the earlier iteration). A final validation always runs at
/// iteration T if the period didn't land there.
pub fn meta_train(
    ctx: &mut RunContext,
    pool_cfg: PoolConfig,
    ep_cfg: &EpisodeConfig,
    adapt: &AdaptConfig,
    meta: &MetaConfig,
) -> Result<TrainOutcome> {
    pool_cfg.validate()?;
    adapt.validate()?;
    meta.validate()?;
    for split in [Split::Train, Split::Valid] {
        let n = ctx.corpus.classes_in_split(split).len();
        if n < ep_cfg.n_way {
            return Err(Error::Config(format!(
                "{split} split has {n} classes; episodes need {}",
                ep_cfg.n_way
            )));
        }
    }

    let label_pool = ctx.corpus.label_token_pool(Split::Train);
    let mut pool = init_pool(pool_cfg, ctx.encoder, &label_pool, derive_seed(meta.seed, POOL_STREAM))?;
    let mut opt = OuterOptimizer::adam_for(&pool);
    let train_seed = derive_seed(meta.seed, TRAIN_STREAM);
    let val_seed = derive_seed(meta.seed, VAL_STREAM);

    let mut metrics = Vec::with_capacity(meta.iterations);
    let mut best: Option<(f64, usize, PromptPool)> = None;

    for t in 0..meta.iterations {
        let episode = sample_episode(ctx.corpus, Split::Train, ep_cfg, train_seed, t as u64)?;
        let verb = episode_verbalizer(ctx.corpus, &episode)?;
        let adapted = inner_adapt(ctx, &pool, &episode, &verb, adapt, adapt.j_train)?;
        let out = outer_step(ctx, &mut pool, &adapted, &episode, &verb, adapt, &mut opt, meta.lr)?;

        let mut row = MetricsRow {
            iteration: t,
            support_loss: out
                .support_loss
                .unwrap_or_else(|| *adapted.loss_trace.last().expect("at least one inner step")),
            query_loss: out.query_loss,
            val_accuracy: None,
        };
        if (t + 1) % meta.val_period == 0 || t + 1 == meta.iterations {
            let acc = validation_accuracy(ctx, &pool, ep_cfg, adapt, meta.val_episodes, val_seed)?;
            row.val_accuracy = Some(acc);
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, t, pool.clone()));
            }
        }
        metrics.push(row);
    }

    let (best_val_accuracy, best_iteration, best_pool) = best.expect("final validation always runs");
    Ok(TrainOutcome { best_pool, best_iteration, best_val_accuracy, final_pool: pool, metrics })
}

fn validation_accuracy(
    ctx: &mut RunContext,
    pool: &PromptPool,
    ep_cfg: &EpisodeConfig,
    adapt: &AdaptConfig,
    n_episodes: usize,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..n_episodes {
        let episode = sample_episode(ctx.corpus, Split::Valid, ep_cfg, seed, i as u64)?;
        let verb = episode_verbalizer(ctx.corpus, &episode)?;
        total += adapt_and_evaluate(ctx, pool, &episode, &verb, adapt, adapt.j_eval)?;
    }
    Ok(total / n_episodes as f64)
}

#[derive(Clone, Debug)]
pub struct TestOutcome {
    pub per_episode: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation across episodes (0 for a single episode).
    pub std: f64,
}

/// Meta-testing: adapt `j_eval` steps per episode on unseen-class tasks,
/// then score the queries. `episode_seed` selects the episode stream
/// directly (no mixing with any run seed) so different runs can be
/// compared on identical tasks.
pub fn meta_test(
    ctx: &mut RunContext,
    pool: &PromptPool,
    ep_cfg: &EpisodeConfig,
    adapt: &AdaptConfig,
    n_episodes: usize,
    episode_seed: u64,
) -> Result<TestOutcome> {
    if n_episodes == 0 {
        return Err(Error::Config("need at least one test episode".into()));
    }
    adapt.validate()?;
    let mut per_episode = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes {
        let episode = sample_episode(ctx.corpus, Split::Test, ep_cfg, episode_seed, i as u64)?;
        let verb = episode_verbalizer(ctx.corpus, &episode)?;
        per_episode.push(adapt_and_evaluate(ctx, pool, &episode, &verb, adapt, adapt.j_eval)?);
    }
    let mean = per_episode.iter().sum::<f64>() / n_episodes as f64;
    let std = if n_episodes > 1 {
        let var = per_episode.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>()
            / (n_episodes - 1) as f64;
        var.sqrt()
    } else {
        0.0
    };
    Ok(TestOutcome { per_episode, mean, std })
}
