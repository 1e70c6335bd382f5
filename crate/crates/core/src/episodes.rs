//! Synthetic corpora and N-way k-shot episode sampling.
//!
//! A corpus is a flat list of token-id documents plus class metadata; the
//! class set is partitioned into train/valid/test splits so evaluation
//! classes are never seen by the meta-learner. Episodes reference documents
//! by corpus index and carry an episode-local label remap.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Vocabulary;
use crate::error::{Error, Result};

/// Topic tokens owned by each class. Three exclusive tokens give the
/// hand verbalizer a small member set without crowding the vocabulary.
pub const TOPIC_TOKENS_PER_CLASS: usize = 3;

/// Anchor words used by the default prompt template. They are folded into
/// the background pool so MLM pretraining sees them in context.
pub const ANCHOR_WORDS: [&str; 2] = ["topic", "is"];

/// Mixes a base seed with a stream index so independent consumers (episode
/// i, validation, test) get decorrelated but reproducible RNGs.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    // splitmix64 finalizer, applied twice for good measure.
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for _ in 0..2 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

pub fn derive_rng(base: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Valid => write!(f, "valid"),
            Split::Test => write!(f, "test"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassMeta {
    pub id: usize,
    pub name: String,
    /// Vocabulary ids whose surface forms verbalize this label.
    pub label_tokens: Vec<usize>,
    pub split: Split,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Document {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_classes: usize,
    pub docs_per_class: usize,
    pub doc_len: usize,
    pub vocab_size: usize,
    /// Probability that a document position draws from the class's own
    /// topic tokens instead of the shared background pool. 0 makes content
    /// independent of the label; 1 makes documents pure topic tokens.
    pub topic_sharpness: f64,
    pub seed: u64,
    /// Class counts per split, in train/valid/test order. Must sum to
    /// `n_classes`.
    pub split_classes: [usize; 3],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_classes: 20,
            docs_per_class: 60,
            doc_len: 12,
            vocab_size: 200,
            topic_sharpness: 0.7,
            seed: 1,
            split_classes: [10, 5, 5],
        }
    }
}

/// Header line of the corpus JSONL format.
#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    vocab: Vec<String>,
    classes: Vec<ClassMeta>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub classes: Vec<ClassMeta>,
    pub docs: Vec<Document>,
    docs_by_class: Vec<Vec<usize>>,
}

impl Corpus {
    fn build(vocab: Vocabulary, classes: Vec<ClassMeta>, docs: Vec<Document>) -> Result<Corpus> {
        for (i, c) in classes.iter().enumerate() {
            if c.id != i {
                return Err(Error::Config(format!(
                    "class ids must be dense and ordered; found id {} at position {i}",
                    c.id
                )));
            }
            if c.label_tokens.is_empty() {
                return Err(Error::Config(format!("class {} has no label tokens", c.name)));
            }
            for &t in &c.label_tokens {
                if t >= vocab.len() {
                    return Err(Error::Config(format!(
                        "class {} label token id {t} outside vocabulary of size {}",
                        c.name,
                        vocab.len()
                    )));
                }
            }
        }
        let mut docs_by_class = vec![Vec::new(); classes.len()];
        for (i, d) in docs.iter().enumerate() {
            if d.label >= classes.len() {
                return Err(Error::Config(format!(
                    "document {i} has unknown label {} (corpus has {} classes)",
                    d.label,
                    classes.len()
                )));
            }
            for &t in &d.tokens {
                if t >= vocab.len() {
                    return Err(Error::Config(format!(
                        "document {i} has token id {t} outside vocabulary of size {}",
                        vocab.len()
                    )));
                }
            }
            docs_by_class[d.label].push(i);
        }
        Ok(Corpus { vocab, classes, docs, docs_by_class })
    }

    /// Generates a topic-mixture corpus. Every class owns
    /// [`TOPIC_TOKENS_PER_CLASS`] exclusive tokens that double as its label
    /// tokens; the rest of the vocabulary is a shared background pool.
    pub fn generate(cfg: &CorpusConfig) -> Result<Corpus> {
        if cfg.n_classes == 0 || cfg.docs_per_class == 0 || cfg.doc_len == 0 {
            return Err(Error::Config("corpus dimensions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&cfg.topic_sharpness) {
            return Err(Error::Config(format!(
                "topic_sharpness must lie in [0, 1], got {}",
                cfg.topic_sharpness
            )));
        }
        if cfg.vocab_size <= cfg.n_classes * 4 {
            return Err(Error::Config(format!(
                "vocab_size {} too small for {} classes (needs more than {})",
                cfg.vocab_size,
                cfg.n_classes,
                cfg.n_classes * 4
            )));
        }
        let reserved = Vocabulary::RESERVED.len();
        let topics = cfg.n_classes * TOPIC_TOKENS_PER_CLASS;
        let min_background = ANCHOR_WORDS.len() + 2;
        if cfg.vocab_size < reserved + topics + min_background {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no background pool ({} reserved + {topics} topic tokens)",
                cfg.vocab_size, reserved
            )));
        }
        let split_total: usize = cfg.split_classes.iter().sum();
        if split_total != cfg.n_classes {
            return Err(Error::Config(format!(
                "split sizes {:?} must sum to n_classes {}",
                cfg.split_classes, cfg.n_classes
            )));
        }

        let mut tokens: Vec<String> = Vocabulary::RESERVED.iter().map(|s| s.to_string()).collect();
        for c in 0..cfg.n_classes {
            for k in 0..TOPIC_TOKENS_PER_CLASS {
                tokens.push(format!("c{c:02}t{k}"));
            }
        }
        let background_start = tokens.len();
        for w in ANCHOR_WORDS {
            tokens.push(w.to_string());
        }
        let mut filler = 0usize;
        while tokens.len() < cfg.vocab_size {
            tokens.push(format!("bg{filler:03}"));
            filler += 1;
        }
        let background: Vec<usize> = (background_start..cfg.vocab_size).collect();
        let vocab = Vocabulary::new(tokens)?;

        let mut classes = Vec::with_capacity(cfg.n_classes);
        for c in 0..cfg.n_classes {
            let first = reserved + c * TOPIC_TOKENS_PER_CLASS;
            let split = if c < cfg.split_classes[0] {
                Split::Train
            } else if c < cfg.split_classes[0] + cfg.split_classes[1] {
                Split::Valid
            } else {
                Split::Test
            };
            classes.push(ClassMeta {
                id: c,
                name: format!("class_{c:02}"),
                label_tokens: (first..first + TOPIC_TOKENS_PER_CLASS).collect(),
                split,
            });
        }

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut docs = Vec::with_capacity(cfg.n_classes * cfg.docs_per_class);
        for c in 0..cfg.n_classes {
            let topic = &classes[c].label_tokens;
            for _ in 0..cfg.docs_per_class {
                let mut toks = Vec::with_capacity(cfg.doc_len);
                for _ in 0..cfg.doc_len {
                    use rand::Rng;
                    let from_topic = rng.random::<f64>() < cfg.topic_sharpness;
                    let t = if from_topic {
                        topic[rng.random_range(0..topic.len())]
                    } else {
                        background[rng.random_range(0..background.len())]
                    };
                    toks.push(t);
                }
                docs.push(Document { tokens: toks, label: c });
            }
        }

        Corpus::build(vocab, classes, docs)
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes_in_split(&self, split: Split) -> Vec<usize> {
        self.classes.iter().filter(|c| c.split == split).map(|c| c.id).collect()
    }

    pub fn docs_of_class(&self, class: usize) -> &[usize] {
        &self.docs_by_class[class]
    }

    /// All label-token ids of the given split, deduplicated, ascending.
    /// This is the pool prompt values are initialised from.
    pub fn label_token_pool(&self, split: Split) -> Vec<usize> {
        let mut pool: Vec<usize> = self
            .classes
            .iter()
            .filter(|c| c.split == split)
            .flat_map(|c| c.label_tokens.iter().copied())
            .collect();
        pool.sort_unstable();
        pool.dedup();
        pool
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header = CorpusHeader {
            vocab: self.vocab.tokens().to_vec(),
            classes: self.classes.clone(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for d in &self.docs {
            serde_json::to_writer(&mut out, d)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Corpus> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut lines = reader.lines();

        let header_line = match lines.next() {
            Some(l) => l?,
            None => return Err(Error::CorpusParse { line: 1, detail: "empty file".into() }),
        };
        let header: CorpusHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::CorpusParse { line: 1, detail: e.to_string() })?;
        let vocab = Vocabulary::new(header.vocab)
            .map_err(|e| Error::CorpusParse { line: 1, detail: e.to_string() })?;

        let mut docs = Vec::new();
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let doc: Document = serde_json::from_str(&line)
                .map_err(|e| Error::CorpusParse { line: line_no, detail: e.to_string() })?;
            if doc.label >= header.classes.len() {
                return Err(Error::CorpusParse {
                    line: line_no,
                    detail: format!(
                        "unknown label {} (header declares {} classes)",
                        doc.label,
                        header.classes.len()
                    ),
                });
            }
            docs.push(doc);
        }
        Corpus::build(vocab, header.classes, docs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig { n_way: 5, k_shot: 5, n_query: 15 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeSample {
    /// Index into `Corpus::docs`.
    pub doc: usize,
    /// Episode-local label in `0..n_way`.
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct Episode {
    /// Sampled global class ids; position in this list is the local label.
    pub classes: Vec<usize>,
    /// Grouped by class in `classes` order, k samples each.
    pub support: Vec<EpisodeSample>,
    pub query: Vec<EpisodeSample>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }
}

/// Samples one episode. Classes are drawn without replacement from the
/// split, then `k_shot + n_query` documents per class without replacement;
/// the first `k_shot` of each per-class draw become support. The RNG is
/// derived from `(seed, index)` so episode streams are reproducible and
/// order-independent.
pub fn sample_episode(
    corpus: &Corpus,
    split: Split,
    cfg: &EpisodeConfig,
    seed: u64,
    index: u64,
) -> Result<Episode> {
    if cfg.n_way < 2 {
        return Err(Error::Sampling(format!("n_way must be at least 2, got {}", cfg.n_way)));
    }
    if cfg.k_shot == 0 || cfg.n_query == 0 {
        return Err(Error::Sampling("k_shot and n_query must be positive".into()));
    }
    let class_pool = corpus.classes_in_split(split);
    if class_pool.len() < cfg.n_way {
        return Err(Error::Sampling(format!(
            "{split} split has {} classes, episode needs {}",
            class_pool.len(),
            cfg.n_way
        )));
    }

    let mut rng = derive_rng(seed, index);
    let picked = rand::seq::index::sample(&mut rng, class_pool.len(), cfg.n_way);
    let classes: Vec<usize> = picked.iter().map(|i| class_pool[i]).collect();

    let per_class = cfg.k_shot + cfg.n_query;
    let mut support = Vec::with_capacity(cfg.n_way * cfg.k_shot);
    let mut query = Vec::with_capacity(cfg.n_way * cfg.n_query);
    for (local, &class) in classes.iter().enumerate() {
        let docs = corpus.docs_of_class(class);
        if docs.len() < per_class {
            return Err(Error::Sampling(format!(
                "class {} has {} documents, episode needs {per_class}",
                corpus.classes[class].name,
                docs.len()
            )));
        }
        let draw = rand::seq::index::sample(&mut rng, docs.len(), per_class);
        for (j, d) in draw.iter().enumerate() {
            let sample = EpisodeSample { doc: docs[d], label: local };
            if j < cfg.k_shot {
                support.push(sample);
            } else {
                query.push(sample);
            }
        }
    }
    Ok(Episode { classes, support, query })
}

/// Label-token ids per local label for an episode, in local-label order.
pub fn episode_label_tokens(corpus: &Corpus, episode: &Episode) -> Vec<Vec<usize>> {
    episode.classes.iter().map(|&c| corpus.classes[c].label_tokens.clone()).collect()
}

/// Convenience map from global class id to metadata name.
pub fn class_names(corpus: &Corpus) -> HashMap<usize, String> {
    corpus.classes.iter().map(|c| (c.id, c.name.clone())).collect()
}
