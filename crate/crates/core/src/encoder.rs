//! A toy masked-LM encoder: whitespace tokenizer, learned token/positional
//! embeddings, a small post-norm transformer stack, and a tied output head.
//!
//! The encoder is pretrained once with a masked-token objective and then
//! frozen. During prompt learning its parameters enter tapes as constants,
//! so nothing can update them; only the continuous prompt rows spliced into
//! the input carry gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::episodes::Corpus;
use crate::error::{Error, Result};
use crate::meta::AdamState;
use crate::tensor::{Shape, Tape, Tensor};

/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-5;

/// Token ids fixed by construction: the validator pins the reserved strings
/// to the first five vocabulary slots.
pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const MASK: usize = 2;
pub const PAD: usize = 3;
pub const UNK: usize = 4;

#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: std::collections::HashMap<String, usize>,
}

impl Vocabulary {
    pub const RESERVED: [&'static str; 5] = ["[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"];

    /// Builds a vocabulary from the dense id → token list. The five
    /// reserved tokens must occupy ids 0..5 and appear nowhere else.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < Self::RESERVED.len() {
            return Err(Error::Config(format!(
                "vocabulary of {} tokens cannot hold the {} reserved tokens",
                tokens.len(),
                Self::RESERVED.len()
            )));
        }
        for (i, expect) in Self::RESERVED.iter().enumerate() {
            if tokens[i] != *expect {
                return Err(Error::Config(format!(
                    "reserved token {expect} must sit at id {i}, found {:?}",
                    tokens[i]
                )));
            }
        }
        let mut index = std::collections::HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn is_reserved(&self, id: usize) -> bool {
        id < Self::RESERVED.len()
    }

    /// Whitespace-split, lowercase, unknown → `[UNK]`. No `[CLS]`/`[SEP]`
    /// framing happens here.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| self.id_of(&w.to_lowercase()).unwrap_or(UNK))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { dim: 32, blocks: 2, heads: 2, ff: 64, max_len: 64 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.blocks == 0 || self.heads == 0 || self.ff == 0 || self.max_len < 4 {
            return Err(Error::Config("encoder dimensions must be positive (max_len >= 4)".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wk: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Vec<f64>,
    pub bv: Vec<f64>,
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub vocab: Vocabulary,
    /// Token embedding table, row-major `[V, dim]`. Doubles as the tied
    /// output head.
    pub embedding: Vec<f64>,
    /// Positional table `[max_len, dim]`.
    pub positional: Vec<f64>,
    pub blocks: Vec<BlockParams>,
    /// When set, `on_tape_trainable` refuses to hand out leaves.
    pub frozen: bool,
}

/// One named parameter array with its logical shape, used for checkpoints,
/// optimizer state and tape registration. Order is fixed.
pub struct NamedArray<'a> {
    pub name: String,
    pub shape: Shape,
    pub data: &'a [f64],
}

impl EncoderParams {
    pub fn init(config: EncoderConfig, vocab: Vocabulary, seed: u64) -> Result<EncoderParams> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(&mut rng)).collect() };

        let d = config.dim;
        let embedding = draw(vocab.len() * d);
        let positional = draw(config.max_len * d);
        let mut blocks = Vec::with_capacity(config.blocks);
        for _ in 0..config.blocks {
            blocks.push(BlockParams {
                wq: draw(d * d),
                bq: vec![0.0; d],
                wk: draw(d * d),
                bk: vec![0.0; d],
                wv: draw(d * d),
                bv: vec![0.0; d],
                wo: draw(d * d),
                bo: vec![0.0; d],
                ln1_g: vec![1.0; d],
                ln1_b: vec![0.0; d],
                w1: draw(d * config.ff),
                b1: vec![0.0; config.ff],
                w2: draw(config.ff * d),
                b2: vec![0.0; d],
                ln2_g: vec![1.0; d],
                ln2_b: vec![0.0; d],
            });
        }
        Ok(EncoderParams { config, vocab, embedding, positional, blocks, frozen: false })
    }

    /// Parameter arrays in canonical order. Checkpoints, Adam state and
    /// tape leaves all use this order.
    pub fn param_arrays(&self) -> Vec<NamedArray<'_>> {
        let d = self.config.dim;
        let ff = self.config.ff;
        let mut out = vec![
            NamedArray {
                name: "embedding".into(),
                shape: Shape::Matrix(self.vocab.len(), d),
                data: &self.embedding,
            },
            NamedArray {
                name: "positional".into(),
                shape: Shape::Matrix(self.config.max_len, d),
                data: &self.positional,
            },
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let fields: [(&str, Shape, &[f64]); 16] = [
                ("wq", Shape::Matrix(d, d), &b.wq),
                ("bq", Shape::Vector(d), &b.bq),
                ("wk", Shape::Matrix(d, d), &b.wk),
                ("bk", Shape::Vector(d), &b.bk),
                ("wv", Shape::Matrix(d, d), &b.wv),
                ("bv", Shape::Vector(d), &b.bv),
                ("wo", Shape::Matrix(d, d), &b.wo),
                ("bo", Shape::Vector(d), &b.bo),
                ("ln1_g", Shape::Vector(d), &b.ln1_g),
                ("ln1_b", Shape::Vector(d), &b.ln1_b),
                ("w1", Shape::Matrix(d, ff), &b.w1),
                ("b1", Shape::Vector(ff), &b.b1),
                ("w2", Shape::Matrix(ff, d), &b.w2),
                ("b2", Shape::Vector(d), &b.b2),
                ("ln2_g", Shape::Vector(d), &b.ln2_g),
                ("ln2_b", Shape::Vector(d), &b.ln2_b),
            ];
            for (name, shape, data) in fields {
                out.push(NamedArray { name: format!("block{i}.{name}"), shape, data });
            }
        }
        out
    }

    pub fn param_arrays_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = vec![&mut self.embedding, &mut self.positional];
        for b in &mut self.blocks {
            out.extend([
                &mut b.wq, &mut b.bq, &mut b.wk, &mut b.bk, &mut b.wv, &mut b.bv, &mut b.wo,
                &mut b.bo, &mut b.ln1_g, &mut b.ln1_b, &mut b.w1, &mut b.b1, &mut b.w2, &mut b.b2,
                &mut b.ln2_g, &mut b.ln2_b,
            ]);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_arrays().iter().map(|a| a.data.len()).sum()
    }

    /// Registers all parameters on `tape` as constants: the frozen path.
    pub fn on_tape(&self, tape: &mut Tape) -> Result<TapeEncoder> {
        self.register(tape, false).map(|(enc, _)| enc)
    }

    /// Registers all parameters as gradient leaves, in `param_arrays`
    /// order. Refused once the encoder is frozen.
    pub fn on_tape_trainable(&self, tape: &mut Tape) -> Result<(TapeEncoder, Vec<Tensor>)> {
        if self.frozen {
            return Err(Error::contract(
                "on_tape_trainable",
                "encoder is frozen; its parameters may not be gradient leaves",
            ));
        }
        self.register(tape, true)
    }

    fn register(&self, tape: &mut Tape, trainable: bool) -> Result<(TapeEncoder, Vec<Tensor>)> {
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

        let d = self.config.dim;
        let emb = put(tape, &self.embedding, Shape::Matrix(self.vocab.len(), d))?;
        let pos = put(tape, &self.positional, Shape::Matrix(self.config.max_len, d))?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            blocks.push(TapeBlock {
                wq: put(tape, &b.wq, Shape::Matrix(d, d))?,
                bq: put(tape, &b.bq, Shape::Vector(d))?,
                wk: put(tape, &b.wk, Shape::Matrix(d, d))?,
                bk: put(tape, &b.bk, Shape::Vector(d))?,
                wv: put(tape, &b.wv, Shape::Matrix(d, d))?,
                bv: put(tape, &b.bv, Shape::Vector(d))?,
                wo: put(tape, &b.wo, Shape::Matrix(d, d))?,
                bo: put(tape, &b.bo, Shape::Vector(d))?,
                ln1_g: put(tape, &b.ln1_g, Shape::Vector(d))?,
                ln1_b: put(tape, &b.ln1_b, Shape::Vector(d))?,
                w1: put(tape, &b.w1, Shape::Matrix(d, self.config.ff))?,
                b1: put(tape, &b.b1, Shape::Vector(self.config.ff))?,
                w2: put(tape, &b.w2, Shape::Matrix(self.config.ff, d))?,
                b2: put(tape, &b.b2, Shape::Vector(d))?,
                ln2_g: put(tape, &b.ln2_g, Shape::Vector(d))?,
                ln2_b: put(tape, &b.ln2_b, Shape::Vector(d))?,
            });
        }
        Ok((
            TapeEncoder {
                emb,
                pos,
                blocks,
                dim: d,
                heads: self.config.heads,
                max_len: self.config.max_len,
            },
            leaves,
        ))
    }
}

#[derive(Debug)]
pub struct TapeBlock {
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln1_g: Tensor,
    ln1_b: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
}

/// Encoder parameters registered on one tape.
#[derive(Debug)]
pub struct TapeEncoder {
    pub emb: Tensor,
    pos: Tensor,
    blocks: Vec<TapeBlock>,
    pub dim: usize,
    heads: usize,
    max_len: usize,
}

/// An embedded input sequence ready for the transformer stack.
#[derive(Debug)]
pub struct WrappedInput {
    /// `[rows, dim]` embedding rows: CLS, E(x), prompt, E(anchors), MASK, SEP.
    pub rows: Tensor,
    /// Row index of the `[MASK]` slot (second to last, before `[SEP]`).
    pub mask_position: usize,
    pub n_rows: usize,
    pub prompt_len: usize,
    /// How many x tokens survived tail truncation.
    pub x_len: usize,
}

/// Forward outputs at the mask slot.
#[derive(Debug)]
pub struct Encoded {
    pub h_mask: Tensor,
    /// Tied-head scores `h_mask · Eᵀ`, before softmax.
    pub logits: Tensor,
    pub vocab_dist: Tensor,
}

impl TapeEncoder {
    /// Assembles `([CLS], E(x..), θ rows, E(anchors..), E([MASK]), [SEP])`.
    /// `x` is truncated from the tail when the total would exceed max_len.
    /// Prompt rows are spliced verbatim; they are not re-embedded.
    pub fn wrap(
        &self,
        tape: &mut Tape,
        x: &[usize],
        prompt: Option<Tensor>,
        anchors: &[usize],
    ) -> Result<WrappedInput> {
        let prompt_len = match prompt {
            Some(p) => match tape.shape(p) {
                Shape::Matrix(r, c) if c == self.dim => r,
                other => {
                    return Err(Error::shape(
                        "wrap",
                        format!("prompt must be [L_p x {}], got {other}", self.dim),
                    ))
                }
            },
            None => 0,
        };
        let overhead = 1 + prompt_len + anchors.len() + 2;
        if overhead > self.max_len {
            return Err(Error::contract(
                "wrap",
                format!("prompt and anchors alone need {overhead} rows, max_len is {}", self.max_len),
            ));
        }
        let x_len = x.len().min(self.max_len - overhead);
        let x = &x[..x_len];

        let mut parts: Vec<Tensor> = Vec::with_capacity(5);
        parts.push(tape.gather_rows(self.emb, &[CLS])?);
        if !x.is_empty() {
            parts.push(tape.gather_rows(self.emb, x)?);
        }
        if let Some(p) = prompt {
            parts.push(p);
        }
        if !anchors.is_empty() {
            parts.push(tape.gather_rows(self.emb, anchors)?);
        }
        parts.push(tape.gather_rows(self.emb, &[MASK])?);
        parts.push(tape.gather_rows(self.emb, &[SEP])?);
        let rows = tape.concat_rows(&parts)?;
        let n_rows = tape.shape(rows).rows();
        Ok(WrappedInput {
            rows,
            mask_position: 1 + x_len + prompt_len + anchors.len(),
            n_rows,
            prompt_len,
            x_len,
        })
    }

    /// Full transformer forward over embedded rows; returns the final
    /// hidden matrix. Numeric failures name the offending block.
    pub fn forward_rows(&self, tape: &mut Tape, rows: Tensor) -> Result<Tensor> {
        let n = match tape.shape(rows) {
            Shape::Matrix(n, c) if c == self.dim => n,
            other => return Err(Error::shape("forward_rows", format!("expected [n x {}], got {other}", self.dim))),
        };
        if n > self.max_len {
            return Err(Error::contract(
                "forward_rows",
                format!("{n} rows exceed max_len {}", self.max_len),
            ));
        }
        let pos = tape.slice_rows(self.pos, 0, n)?;
        let mut h = tape.add(rows, pos)?;
        for (i, blk) in self.blocks.iter().enumerate() {
            h = self.block_forward(tape, blk, h).map_err(|e| match e {
                Error::NonFinite { op, .. } => Error::non_finite_in(op, format!("block {i}")),
                other => other,
            })?;
        }
        Ok(h)
    }

    fn block_forward(&self, tape: &mut Tape, blk: &TapeBlock, h: Tensor) -> Result<Tensor> {
        let head_dim = self.dim / self.heads;
        let q = tape.matmul(h, blk.wq)?;
        let q = tape.add_row_vec(q, blk.bq)?;
        let k = tape.matmul(h, blk.wk)?;
        let k = tape.add_row_vec(k, blk.bk)?;
        let v = tape.matmul(h, blk.wv)?;
        let v = tape.add_row_vec(v, blk.bv)?;

        let mut head_outs = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let off = hd * head_dim;
            let qh = tape.slice_cols(q, off, head_dim)?;
            let kh = tape.slice_cols(k, off, head_dim)?;
            let vh = tape.slice_cols(v, off, head_dim)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let attn = tape.softmax_rows(scores, (head_dim as f64).sqrt())?;
            head_outs.push(tape.matmul(attn, vh)?);
        }
        let o = tape.concat_cols(&head_outs)?;
        let o = tape.matmul(o, blk.wo)?;
        let o = tape.add_row_vec(o, blk.bo)?;
        let h = tape.add(h, o)?;
        let h = tape.layer_norm(h, blk.ln1_g, blk.ln1_b, LN_EPS)?;

        let f = tape.matmul(h, blk.w1)?;
        let f = tape.add_row_vec(f, blk.b1)?;
        let f = tape.tanh(f)?;
        let f = tape.matmul(f, blk.w2)?;
        let f = tape.add_row_vec(f, blk.b2)?;
        let h2 = tape.add(h, f)?;
        tape.layer_norm(h2, blk.ln2_g, blk.ln2_b, LN_EPS)
    }

    /// Forward pass returning the mask-slot hidden state plus the tied-head
    /// vocabulary distribution. Differentiable w.r.t. spliced prompt rows
    /// regardless of whether the encoder weights are constants.
    pub fn encode(&self, tape: &mut Tape, w: &WrappedInput) -> Result<Encoded> {
        let hidden = self.forward_rows(tape, w.rows)?;
        let h_mask = tape.select_row(hidden, w.mask_position)?;
        let logits = tape.matvec(self.emb, h_mask)?;
        let vocab_dist = tape.softmax(logits, 1.0)?;
        Ok(Encoded { h_mask, logits, vocab_dist })
    }
}

/// The query function: mask-slot embedding of `x` wrapped with the probe
/// anchors and an empty continuous prompt. Runs on a private tape with the
/// encoder as constants, so it can never join a gradient path.
pub fn query_embedding(
    params: &EncoderParams,
    x: &[usize],
    probe_anchors: &[usize],
) -> Result<Vec<f64>> {
    if !params.frozen {
        return Err(Error::contract(
            "query_embedding",
            "query function requires a frozen encoder",
        ));
    }
    let mut tape = Tape::new();
    let enc = params.on_tape(&mut tape)?;
    let w = enc.wrap(&mut tape, x, None, probe_anchors)?;
    let hidden = enc.forward_rows(&mut tape, w.rows)?;
    let h = tape.select_row(hidden, w.mask_position)?;
    Ok(tape.value(h).to_vec())
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fraction of document positions replaced by `[MASK]`; at least one
    /// position is always masked.
    pub mask_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 600, batch: 16, lr: 3e-3, mask_rate: 0.15, seed: 2 }
    }
}

pub struct PretrainReport {
    /// Mean masked-token NLL per step.
    pub losses: Vec<f64>,
}

/// Pretrains a fresh encoder on the corpus with a masked-token objective
/// and returns it frozen. Documents are framed as `[CLS] .. [SEP]`; only
/// document positions are maskable.
pub fn pretrain_encoder(
    corpus: &Corpus,
    config: EncoderConfig,
    pcfg: &PretrainConfig,
) -> Result<(EncoderParams, PretrainReport)> {
    if corpus.docs.is_empty() {
        return Err(Error::Config("cannot pretrain on an empty corpus".into()));
    }
    let non_reserved = corpus.vocab.len().saturating_sub(Vocabulary::RESERVED.len());
    if non_reserved < 2 {
        return Err(Error::Config(format!(
            "vocabulary has {non_reserved} non-reserved tokens; need at least 2"
        )));
    }
    if !(0.0 < pcfg.mask_rate && pcfg.mask_rate <= 1.0) {
        return Err(Error::Config(format!("mask_rate must lie in (0, 1], got {}", pcfg.mask_rate)));
    }
    if pcfg.steps == 0 || pcfg.batch == 0 {
        return Err(Error::Config("pretrain steps and batch must be positive".into()));
    }
    if !(pcfg.lr.is_finite() && pcfg.lr > 0.0) {
        return Err(Error::Config(format!("pretrain lr must be positive, got {}", pcfg.lr)));
    }

    let mut params = EncoderParams::init(config, corpus.vocab.clone(), pcfg.seed)?;
    let sizes: Vec<usize> = params.param_arrays().iter().map(|a| a.data.len()).collect();
    let mut adam = AdamState::new(&sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(crate::episodes::derive_seed(pcfg.seed, 0x4d4c4d));
    let mut losses = Vec::with_capacity(pcfg.steps);

    let body_budget = config.max_len - 2;
    for step in 0..pcfg.steps {
        let mut tape = Tape::new();
        let (enc, leaves) = params.on_tape_trainable(&mut tape)?;
        let mut sample_losses = Vec::new();

        for _ in 0..pcfg.batch {
            let doc = &corpus.docs[rng.random_range(0..corpus.docs.len())];
            let body: Vec<usize> = doc.tokens.iter().copied().take(body_budget).collect();
            if body.is_empty() {
                continue;
            }
            let mut masked_at: Vec<usize> = (0..body.len())
                .filter(|_| rng.random::<f64>() < pcfg.mask_rate)
                .collect();
            if masked_at.is_empty() {
                masked_at.push(rng.random_range(0..body.len()));
            }

            let mut seq = Vec::with_capacity(body.len() + 2);
            seq.push(CLS);
            seq.extend_from_slice(&body);
            seq.push(SEP);
            for &p in &masked_at {
                seq[p + 1] = MASK;
            }

            let rows = tape.gather_rows(enc.emb, &seq)?;
            let hidden = enc.forward_rows(&mut tape, rows)?;
            for &p in &masked_at {
                let h = tape.select_row(hidden, p + 1)?;
                let logits = tape.matvec(enc.emb, h)?;
                let logp = tape.log_softmax(logits)?;
                sample_losses.push(tape.nll(logp, body[p])?);
            }
        }
        if sample_losses.is_empty() {
            losses.push(f64::NAN);
            continue;
        }

        let stacked = tape.stack_scalars(&sample_losses)?;
        let loss = tape.mean(stacked)?;
        let loss_value = tape.scalar_value(loss);
        let grads = tape.backward(loss).map_err(|e| match e {
            Error::NonFinite { op, .. } => Error::non_finite_in(op, format!("pretrain step {step}")),
            other => other,
        })?;

        let grad_refs: Vec<&[f64]> = leaves.iter().map(|&l| grads.wrt(l)).collect();
        let mut arrays = params.param_arrays_mut();
        let mut views: Vec<&mut [f64]> = arrays.iter_mut().map(|a| a.as_mut_slice()).collect();
        adam.update(&mut views, &grad_refs, pcfg.lr)?;
        losses.push(loss_value);
    }

    params.frozen = true;
    Ok((params, PretrainReport { losses }))
}
