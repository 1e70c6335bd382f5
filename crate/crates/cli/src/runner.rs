//! Subcommand bodies. Each one loads its inputs, runs the corresponding
//! core pipeline stage and writes artifacts plus a manifest into the run
//! directory. Artifacts are plain CSV/JSONL/checkpoint files with no
//! timestamps, so identical invocations write identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use metaprompter_core::checkpoint::{load_encoder, load_pool, save_encoder, save_pool};
use metaprompter_core::encoder::{pretrain_encoder, EncoderParams};
use metaprompter_core::episodes::{sample_episode, Corpus, Split};
use metaprompter_core::meta::{meta_test, meta_train, MetricsRow, RunContext, TestOutcome};
use metaprompter_core::{Error, Result};

use sha2::{Digest, Sha256};

use crate::analysis;
use crate::config::{Manifest, RunConfig};

pub const RUN_ROOT_ENV: &str = "METAPROMPTER_RUN_ROOT";

/// Relative run directories live under the run root (env override,
/// default: current directory).
pub fn resolve_run_dir(out: &Path) -> PathBuf {
    if out.is_absolute() {
        out.to_path_buf()
    } else {
        let root = std::env::var(RUN_ROOT_ENV).unwrap_or_else(|_| ".".into());
        Path::new(&root).join(out)
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("cannot create run dir {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

/// Shortest-roundtrip float formatting; deterministic across runs.
fn num(v: f64) -> String {
    format!("{v}")
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("iteration,support_loss,query_loss,val_accuracy\n");
    for r in rows {
        let val = r.val_accuracy.map(|a| num(a)).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.iteration,
            num(r.support_loss),
            num(r.query_loss),
            val
        ));
    }
    out
}

pub fn cmd_gen_corpus(cfg: &RunConfig, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let corpus = Corpus::generate(&cfg.corpus)?;
    corpus.save_jsonl(&dir.join("corpus.jsonl"))?;
    let hash = corpus_sha256(&dir.join("corpus.jsonl"))?;
    Manifest::new("gen-corpus", cfg, 0, corpus.vocab.len(), &hash)
        .save(&dir.join("manifest.json"))?;
    println!(
        "wrote {} ({} classes, {} docs, vocab {})",
        dir.join("corpus.jsonl").display(),
        corpus.n_classes(),
        corpus.docs.len(),
        corpus.vocab.len()
    );
    Ok(())
}

pub fn cmd_pretrain(cfg: &RunConfig, corpus_path: &Path, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let corpus = Corpus::load_jsonl(corpus_path)?;
    let (params, report) = pretrain_encoder(&corpus, cfg.encoder, &cfg.pretrain)?;
    save_encoder(&dir.join("encoder.ckpt"), &params)?;

    let mut csv = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{}\n", num(*l)));
    }
    write_text(&dir.join("pretrain_loss.csv"), &csv)?;
    Manifest::new("pretrain", cfg, params.num_params(), corpus.vocab.len(), &corpus_sha256(corpus_path)?)
        .save(&dir.join("manifest.json"))?;
    println!(
        "pretrained {} params, {} steps, final loss {:.4}",
        params.num_params(),
        report.losses.len(),
        report.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn load_inputs(corpus_path: &Path, encoder_path: &Path) -> Result<(Corpus, EncoderParams)> {
    let corpus = Corpus::load_jsonl(corpus_path)?;
    let encoder = load_encoder(encoder_path)?;
    if encoder.vocab.len() != corpus.vocab.len() {
        return Err(Error::Config(format!(
            "encoder vocabulary ({}) does not match corpus ({})",
            encoder.vocab.len(),
            corpus.vocab.len()
        )));
    }
    Ok((corpus, encoder))
}

/// Content hash of the corpus file a run consumed, recorded in manifests.
fn corpus_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Config(format!("cannot read corpus {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

pub fn cmd_meta_train(
    cfg: &RunConfig,
    corpus_path: &Path,
    encoder_path: &Path,
    dir: &Path,
) -> Result<()> {
    ensure_dir(dir)?;
    let (corpus, encoder) = load_inputs(corpus_path, encoder_path)?;
    let mut ctx = RunContext::new(&corpus, &encoder)?;
    let out = meta_train(&mut ctx, cfg.pool, &cfg.episode, &cfg.adapt, &cfg.meta)?;

    save_pool(&dir.join("pool_best.ckpt"), &out.best_pool)?;
    save_pool(&dir.join("pool_final.ckpt"), &out.final_pool)?;
    write_text(&dir.join("metrics.csv"), &metrics_csv(&out.metrics))?;
    Manifest::new("meta-train", cfg, encoder.num_params(), corpus.vocab.len(), &corpus_sha256(corpus_path)?)
        .save(&dir.join("manifest.json"))?;
    println!(
        "meta-trained {} iterations; best val accuracy {:.4} at iteration {}",
        out.metrics.len(),
        out.best_val_accuracy,
        out.best_iteration
    );
    Ok(())
}

fn test_results_csv(out: &TestOutcome) -> String {
    let mut csv = String::from("episode,accuracy\n");
    for (i, a) in out.per_episode.iter().enumerate() {
        csv.push_str(&format!("{i},{}\n", num(*a)));
    }
    csv
}

pub fn cmd_meta_test(
    cfg: &RunConfig,
    corpus_path: &Path,
    encoder_path: &Path,
    pool_path: &Path,
    dir: &Path,
) -> Result<()> {
    ensure_dir(dir)?;
    let (corpus, encoder) = load_inputs(corpus_path, encoder_path)?;
    let pool = load_pool(pool_path)?;
    let mut ctx = RunContext::new(&corpus, &encoder)?;
    let out = meta_test(&mut ctx, &pool, &cfg.episode, &cfg.adapt, cfg.test.episodes, cfg.test.seed)?;

    write_text(&dir.join("test_results.csv"), &test_results_csv(&out))?;
    let summary = serde_json::json!({
        "episodes": out.per_episode.len(),
        "mean": out.mean,
        "std": out.std,
    });
    write_text(&dir.join("test_summary.json"), &format!("{}\n", serde_json::to_string_pretty(&summary)?))?;
    Manifest::new("meta-test", cfg, encoder.num_params(), corpus.vocab.len(), &corpus_sha256(corpus_path)?)
        .save(&dir.join("manifest.json"))?;
    println!(
        "meta-test over {} episodes: accuracy {:.4} +- {:.4}",
        out.per_episode.len(),
        out.mean,
        out.std
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    K,
    PromptLen,
}

impl SweepAxis {
    pub fn apply(self, cfg: &mut RunConfig, value: usize) {
        match self {
            SweepAxis::K => cfg.pool.k = value,
            SweepAxis::PromptLen => cfg.pool.prompt_len = value,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::K => "k",
            SweepAxis::PromptLen => "prompt_len",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub value: usize,
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

/// Full train+test per (value, seed) pair. Seeds are shared across values
/// and the test episode stream is fixed, so rows differ only in the axis
/// setting.
pub fn run_sweep(
    corpus: &Corpus,
    encoder: &EncoderParams,
    base: &RunConfig,
    axis: SweepAxis,
    values: &[usize],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one axis value".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let mut ctx = RunContext::new(corpus, encoder)?;
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base.clone();
        axis.apply(&mut cfg, value);
        cfg.validate()?;
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut meta = cfg.meta;
            meta.seed = seed;
            let trained = meta_train(&mut ctx, cfg.pool, &cfg.episode, &cfg.adapt, &meta)?;
            let tested = meta_test(
                &mut ctx,
                &trained.best_pool,
                &cfg.episode,
                &cfg.adapt,
                cfg.test.episodes,
                cfg.test.seed,
            )?;
            per_seed.push(tested.mean);
        }
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        let std = if per_seed.len() < 2 {
            0.0
        } else {
            (per_seed.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>()
                / (per_seed.len() - 1) as f64)
                .sqrt()
        };
        rows.push(SweepRow { value, mean, std, per_seed });
    }
    Ok(rows)
}

pub fn cmd_sweep(
    cfg: &RunConfig,
    corpus_path: &Path,
    encoder_path: &Path,
    axis: SweepAxis,
    values: &[usize],
    seeds: &[u64],
    dir: &Path,
) -> Result<()> {
    ensure_dir(dir)?;
    let (corpus, encoder) = load_inputs(corpus_path, encoder_path)?;
    let rows = run_sweep(&corpus, &encoder, cfg, axis, values, seeds)?;

    let mut csv = String::from("value,mean,std\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.value, num(r.mean), num(r.std)));
    }
    write_text(&dir.join("sweep.csv"), &csv)?;

    let mut detail = String::from(format!("{},seed,accuracy\n", axis.name()));
    for r in &rows {
        for (s, a) in seeds.iter().zip(&r.per_seed) {
            detail.push_str(&format!("{},{s},{}\n", r.value, num(*a)));
        }
    }
    write_text(&dir.join("sweep_details.csv"), &detail)?;
    Manifest::new("sweep", cfg, encoder.num_params(), corpus.vocab.len(), &corpus_sha256(corpus_path)?)
        .save(&dir.join("manifest.json"))?;
    for r in &rows {
        println!("{}={}: accuracy {:.4} +- {:.4}", axis.name(), r.value, r.mean, r.std);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnalysisOp {
    ClassAttention,
    NearestTokens,
    TopicSimilarity,
    Embeddings,
}

pub const ALL_ANALYSIS_OPS: [AnalysisOp; 4] = [
    AnalysisOp::ClassAttention,
    AnalysisOp::NearestTokens,
    AnalysisOp::TopicSimilarity,
    AnalysisOp::Embeddings,
];

#[allow(clippy::too_many_arguments)]
pub fn cmd_analyze(
    cfg: &RunConfig,
    corpus_path: &Path,
    encoder_path: &Path,
    pool_path: &Path,
    ops: &[AnalysisOp],
    episodes: usize,
    top_m: usize,
    dir: &Path,
) -> Result<()> {
    ensure_dir(dir)?;
    let (corpus, encoder) = load_inputs(corpus_path, encoder_path)?;
    let pool = load_pool(pool_path)?;
    let mut ctx = RunContext::new(&corpus, &encoder)?;

    for op in ops {
        match op {
            AnalysisOp::ClassAttention => {
                let att = analysis::class_attention(
                    &mut ctx,
                    &pool,
                    Split::Train,
                    &cfg.episode,
                    &cfg.adapt,
                    episodes,
                    cfg.meta.seed,
                )?;
                let mut csv = String::from("class,name,tasks");
                for i in 0..att.k {
                    csv.push_str(&format!(",a{i}"));
                }
                csv.push('\n');
                for row in &att.rows {
                    csv.push_str(&format!("{},{},{}", row.class, row.name, row.tasks));
                    match &row.attention {
                        Some(a) => {
                            for v in a {
                                csv.push_str(&format!(",{}", num(*v)));
                            }
                        }
                        // Absent classes keep empty cells, not zeros.
                        None => csv.push_str(&",".repeat(att.k)),
                    }
                    csv.push('\n');
                }
                write_text(&dir.join("class_attention.csv"), &csv)?;
            }
            AnalysisOp::NearestTokens => {
                let table = analysis::nearest_tokens(&pool, &encoder, top_m)?;
                let mut csv = String::from("prompt,rank,token,score\n");
                for (i, list) in table.iter().enumerate() {
                    for (rank, (token, score)) in list.iter().enumerate() {
                        csv.push_str(&format!("{i},{rank},{token},{}\n", num(*score)));
                    }
                }
                write_text(&dir.join("nearest_tokens.csv"), &csv)?;
            }
            AnalysisOp::TopicSimilarity => {
                let sets: Vec<(String, Vec<usize>)> = corpus
                    .classes
                    .iter()
                    .map(|c| (c.name.clone(), c.label_tokens.clone()))
                    .collect();
                let sim = analysis::prompt_topic_similarity(&pool, &encoder, &sets)?;
                let mut csv = String::from("prompt_row");
                for name in &sim.class_names {
                    csv.push_str(&format!(",{name}"));
                }
                csv.push('\n');
                for (label, row) in sim.row_labels.iter().zip(&sim.matrix) {
                    csv.push_str(&format!("\"{label}\""));
                    for v in row {
                        csv.push_str(&format!(",{}", num(*v)));
                    }
                    csv.push('\n');
                }
                write_text(&dir.join("prompt_topic_similarity.csv"), &csv)?;
            }
            AnalysisOp::Embeddings => {
                let episode =
                    sample_episode(&corpus, Split::Test, &cfg.episode, cfg.test.seed, 0)?;
                let export = analysis::export_embeddings(&mut ctx, &pool, &episode, &cfg.adapt)?;
                let mut csv = String::from("kind,class,x,y\n");
                for r in &export.rows {
                    csv.push_str(&format!("{},{},{},{}\n", r.kind, r.class, num(r.x), num(r.y)));
                }
                write_text(&dir.join("embeddings.csv"), &csv)?;
            }
        }
    }
    Manifest::new("analyze", cfg, encoder.num_params(), corpus.vocab.len(), &corpus_sha256(corpus_path)?)
        .save(&dir.join("manifest.json"))?;
    println!("analysis artifacts written to {}", dir.display());
    Ok(())
}
