//! Post-hoc inspection of trained pools: attention usage per class,
//! nearest vocabulary tokens per prompt, prompt/topic similarity and 2-D
//! embedding exports. Everything here is read-only over checkpoints.

use metaprompter_core::encoder::EncoderParams;
use metaprompter_core::episodes::{sample_episode, Episode, EpisodeConfig, Split};
use metaprompter_core::meta::{episode_verbalizer, inner_adapt, AdaptConfig, RunContext};
use metaprompter_core::pool::{PoolMode, PromptPool};
use metaprompter_core::tensor::{Shape, Tape};
use metaprompter_core::{Error, Result};

/// Cosine with a 1e-12 norm guard; degenerate rows score zero instead of
/// erroring so ranking whole tables stays total.
fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Clone, Debug)]
pub struct ClassAttentionRow {
    pub class: usize,
    pub name: String,
    /// Episodes that contained the class. 0 marks an absent class; its
    /// attention is `None`, never a zero vector.
    pub tasks: usize,
    pub attention: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct ClassAttention {
    pub k: usize,
    pub rows: Vec<ClassAttentionRow>,
}

/// Mean key attention received by each class's support samples, averaged
/// within each episode first and then across the episodes containing the
/// class. Pools are task-adapted before reading attention.
pub fn class_attention(
    ctx: &mut RunContext,
    pool: &PromptPool,
    split: Split,
    ep_cfg: &EpisodeConfig,
    adapt: &AdaptConfig,
    n_episodes: usize,
    seed: u64,
) -> Result<ClassAttention> {
    if pool.config.mode != PoolMode::MetaPrompter {
        return Err(Error::Config(
            "class attention requires a keyed pool (MetaPrompter mode)".into(),
        ));
    }
    if n_episodes == 0 {
        return Err(Error::Config("attention averaging needs at least one episode".into()));
    }
    let k = pool.config.k;
    let classes = ctx.corpus.classes_in_split(split);
    let n_classes = ctx.corpus.n_classes();
    let mut sums = vec![vec![0.0f64; k]; n_classes];
    let mut counts = vec![0usize; n_classes];

    for index in 0..n_episodes {
        let episode = sample_episode(ctx.corpus, split, ep_cfg, seed, index as u64)?;
        let verb = episode_verbalizer(ctx.corpus, &episode)?;
        let adapted = inner_adapt(ctx, pool, &episode, &verb, adapt, adapt.j_train)?.pool;

        for (local, &class) in episode.classes.iter().enumerate() {
            let members: Vec<usize> = episode
                .support
                .iter()
                .filter(|s| s.label == local)
                .map(|s| s.doc)
                .collect();
            let mut task_mean = vec![0.0f64; k];
            for &doc in &members {
                let q = ctx.query_vec(doc)?.to_vec();
                let a = adapted.attention_for(&q)?;
                for (m, ai) in task_mean.iter_mut().zip(&a) {
                    *m += ai;
                }
            }
            for m in &mut task_mean {
                *m /= members.len() as f64;
            }
            for (s, m) in sums[class].iter_mut().zip(&task_mean) {
                *s += m;
            }
            counts[class] += 1;
        }
    }

    let rows = classes
        .iter()
        .map(|&c| ClassAttentionRow {
            class: c,
            name: ctx.corpus.classes[c].name.clone(),
            tasks: counts[c],
            attention: (counts[c] > 0).then(|| {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            }),
        })
        .collect();
    Ok(ClassAttention { k, rows })
}

/// Vocabulary tokens nearest to each prompt value, scored by the maximum
/// over the value's rows of the cosine to the token embedding. Reserved
/// tokens are excluded. Ties rank the lower token id first.
pub fn nearest_tokens(
    pool: &PromptPool,
    encoder: &EncoderParams,
    m: usize,
) -> Result<Vec<Vec<(String, f64)>>> {
    let vocab = &encoder.vocab;
    let reserved = metaprompter_core::encoder::Vocabulary::RESERVED.len();
    let candidates = vocab.len() - reserved;
    if m == 0 || m > candidates {
        return Err(Error::Config(format!(
            "top-m of {m} outside 1..={candidates} non-reserved tokens"
        )));
    }
    let d = pool.d_in;
    let l_p = pool.config.prompt_len;

    let mut out = Vec::with_capacity(pool.values.len());
    for value in &pool.values {
        let mut scored: Vec<(usize, f64)> = (reserved..vocab.len())
            .map(|t| {
                let emb = &encoder.embedding[t * d..(t + 1) * d];
                let best = (0..l_p)
                    .map(|j| cos(&value[j * d..(j + 1) * d], emb))
                    .fold(f64::NEG_INFINITY, f64::max);
                (t, best)
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        out.push(
            scored[..m]
                .iter()
                .map(|&(t, s)| (vocab.token(t).to_string(), s))
                .collect(),
        );
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TopicSimilarity {
    /// "(i,j)" per prompt value i, row j.
    pub row_labels: Vec<String>,
    pub class_names: Vec<String>,
    /// `[K * L_p][classes]` cosine entries.
    pub matrix: Vec<Vec<f64>>,
}

/// Cosine between every prompt row and every class's topic embedding (the
/// mean embedding of the class's label tokens).
pub fn prompt_topic_similarity(
    pool: &PromptPool,
    encoder: &EncoderParams,
    label_sets: &[(String, Vec<usize>)],
) -> Result<TopicSimilarity> {
    let d = pool.d_in;
    let mut topics = Vec::with_capacity(label_sets.len());
    for (name, set) in label_sets {
        if set.is_empty() {
            return Err(Error::Config(format!("label token set for {name} is empty")));
        }
        let mut mean = vec![0.0f64; d];
        for &t in set {
            if t >= encoder.vocab.len() {
                return Err(Error::Config(format!("label token id {t} outside vocabulary")));
            }
            for (m, e) in mean.iter_mut().zip(&encoder.embedding[t * d..(t + 1) * d]) {
                *m += e;
            }
        }
        for m in &mut mean {
            *m /= set.len() as f64;
        }
        topics.push(mean);
    }

    let mut row_labels = Vec::new();
    let mut matrix = Vec::new();
    for (i, value) in pool.values.iter().enumerate() {
        for j in 0..pool.config.prompt_len {
            let row = &value[j * d..(j + 1) * d];
            row_labels.push(format!("({i},{j})"));
            matrix.push(topics.iter().map(|t| cos(row, t)).collect());
        }
    }
    Ok(TopicSimilarity {
        row_labels,
        class_names: label_sets.iter().map(|(n, _)| n.clone()).collect(),
        matrix,
    })
}

/// Principal components fitted by power iteration with deflation. The
/// sign of each component is canonicalized so its largest-magnitude entry
/// is positive.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    pub components: Vec<Vec<f64>>,
}

impl Pca {
    pub fn project(&self, row: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| row.iter().zip(&self.mean).zip(c).map(|((x, m), w)| (x - m) * w).sum())
            .collect()
    }
}

pub fn pca_fit(rows: &[Vec<f64>], n_components: usize) -> Result<Pca> {
    if rows.is_empty() {
        return Err(Error::Config("PCA needs at least one row".into()));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Config("PCA rows must share one dimension".into()));
    }
    if n_components == 0 || n_components > d {
        return Err(Error::Config(format!("component count {n_components} outside 1..={d}")));
    }

    let n = rows.len() as f64;
    let mut mean = vec![0.0f64; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n;
    }

    let mut cov = vec![0.0f64; d * d];
    for r in rows {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += c[i] * c[j] / n;
            }
        }
    }

    let mut components = Vec::with_capacity(n_components);
    for _ in 0..n_components {
        let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
        if trace <= 1e-14 {
            // Remaining variance is numerically zero; the direction is
            // meaningless, so the coordinate is pinned to 0.
            components.push(vec![0.0; d]);
            continue;
        }
        let mut v = seed_vector(d);
        let mut lambda = 0.0;
        for _ in 0..2000 {
            let mut w = vec![0.0f64; d];
            for i in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += cov[i * d + j] * v[j];
                }
                w[i] = acc;
            }
            // Deflation leaves rounding residue along earlier components;
            // projecting it out keeps the basis orthogonal even when the
            // iteration stops on the step cap.
            for c in &components {
                let dot: f64 = w.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
                for (x, y) in w.iter_mut().zip(c.iter()) {
                    *x -= dot * y;
                }
            }
            let norm: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break;
            }
            for x in &mut w {
                *x /= norm;
            }
            let align: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
            v = w;
            lambda = norm;
            if 1.0 - align.abs() < 1e-14 {
                break;
            }
        }
        canonicalize_sign(&mut v);
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        components.push(v);
    }
    Ok(Pca { mean, components })
}

/// Fixed full-support start vector so fits are reproducible.
fn seed_vector(d: usize) -> Vec<f64> {
    let mut state = 0x243f_6a88_85a3_08d3u64;
    let mut v: Vec<f64> = (0..d)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
        .collect();
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

fn canonicalize_sign(v: &mut [f64]) {
    let mut idx = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[idx].abs() {
            idx = i;
        }
    }
    if v[idx] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExportRow {
    /// "sample" for mask embeddings, "label" for class prototypes.
    pub kind: &'static str,
    pub class: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug)]
pub struct EmbeddingExport {
    pub rows: Vec<ExportRow>,
    /// Pre-projection mask embeddings, support then query, episode order.
    pub support_h: Vec<Vec<f64>>,
    pub query_h: Vec<Vec<f64>>,
    /// Pre-projection label prototypes in local-label order.
    pub label_vecs: Vec<Vec<f64>>,
}

/// Adapts the pool on the episode's support set, embeds every sample plus
/// the per-class prototypes (support means) and projects all of it to 2-D
/// with PCA fitted on the sample embeddings.
pub fn export_embeddings(
    ctx: &mut RunContext,
    pool: &PromptPool,
    episode: &Episode,
    adapt: &AdaptConfig,
) -> Result<EmbeddingExport> {
    let verb = episode_verbalizer(ctx.corpus, episode)?;
    let adapted = inner_adapt(ctx, pool, episode, &verb, adapt, adapt.j_eval)?.pool;

    let embed = |ctx: &mut RunContext, doc: usize| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let enc = ctx.encoder.on_tape(&mut tape)?;
        let pool_t = adapted.on_tape(&mut tape)?;
        let q = if adapted.keys.is_empty() {
            None
        } else {
            let qv = ctx.query_vec(doc)?.to_vec();
            Some(tape.constant(qv, Shape::Vector(ctx.encoder.config.dim))?)
        };
        let prompt = pool_t.instance_prompt(&mut tape, q)?;
        let tokens = ctx.corpus.docs[doc].tokens.clone();
        let wrapped = enc.wrap(&mut tape, &tokens, Some(prompt), &ctx.task_anchors)?;
        let out = enc.encode(&mut tape, &wrapped)?;
        Ok(tape.value(out.h_mask).to_vec())
    };

    let mut support_h = Vec::with_capacity(episode.support.len());
    for s in &episode.support {
        support_h.push(embed(ctx, s.doc)?);
    }
    let mut query_h = Vec::with_capacity(episode.query.len());
    for s in &episode.query {
        query_h.push(embed(ctx, s.doc)?);
    }

    // Prototypes: support means in sample order, matching the training-time
    // label-embedding computation term for term.
    let d = ctx.encoder.config.dim;
    let mut label_vecs = Vec::with_capacity(episode.n_way());
    for y in 0..episode.n_way() {
        let mut sum = vec![0.0f64; d];
        let mut count = 0usize;
        for (s, h) in episode.support.iter().zip(&support_h) {
            if s.label == y {
                for (a, b) in sum.iter_mut().zip(h) {
                    *a += b;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Episode(format!("label {y} has no support samples")));
        }
        for a in &mut sum {
            *a /= count as f64;
        }
        label_vecs.push(sum);
    }

    let fit_rows: Vec<Vec<f64>> =
        support_h.iter().chain(query_h.iter()).cloned().collect();
    let pca = pca_fit(&fit_rows, 2)?;

    let mut rows = Vec::new();
    for (s, h) in episode.support.iter().chain(&episode.query).zip(support_h.iter().chain(&query_h)) {
        let p = pca.project(h);
        rows.push(ExportRow {
            kind: "sample",
            class: ctx.corpus.classes[episode.classes[s.label]].name.clone(),
            x: p[0],
            y: p[1],
        });
    }
    for (y, v) in label_vecs.iter().enumerate() {
        let p = pca.project(v);
        rows.push(ExportRow {
            kind: "label",
            class: ctx.corpus.classes[episode.classes[y]].name.clone(),
            x: p[0],
            y: p[1],
        });
    }

    Ok(EmbeddingExport { rows, support_h, query_h, label_vecs })
}
