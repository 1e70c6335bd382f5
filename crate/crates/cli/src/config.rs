//! Run configuration: one JSON tree covering every stage, plus dotted-path
//! overrides (`--pool.k=16`) applied on top of a config file or the
//! defaults. A manifest written by a previous run is accepted wherever a
//! config file is, so any artifact can be regenerated from its manifest.

use std::fs;
use std::path::Path;

use metaprompter_core::encoder::{EncoderConfig, PretrainConfig};
use metaprompter_core::episodes::{CorpusConfig, EpisodeConfig};
use metaprompter_core::meta::{AdaptConfig, MetaConfig};
use metaprompter_core::pool::{param_count, PoolConfig};
use metaprompter_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Meta-test stage settings; everything else reuses a core config type.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestConfig {
    pub episodes: usize,
    /// Episode stream seed, deliberately independent of the training seed
    /// so different runs are scored on identical tasks.
    pub seed: u64,
}

impl Default for TestConfig {
    fn default() -> Self {
        TestConfig { episodes: 200, seed: 9001 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub pool: PoolConfig,
    pub adapt: AdaptConfig,
    pub meta: MetaConfig,
    pub episode: EpisodeConfig,
    pub test: TestConfig,
}

impl RunConfig {
    /// Cross-stage consistency on top of the per-stage validators.
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.pool.validate()?;
        self.adapt.validate()?;
        self.meta.validate()?;
        if self.test.episodes == 0 {
            return Err(Error::Config("test.episodes must be positive".into()));
        }
        if self.episode.n_way < 2 {
            return Err(Error::Config("episode.n_way must be at least 2".into()));
        }
        Ok(())
    }
}

/// Loads a config file (bare `RunConfig` or a manifest wrapping one under
/// `"config"`), then applies `--key.path=value` overrides. Unknown keys in
/// either source are rejected by walking the default tree.
pub fn resolve_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut tree = serde_json::to_value(RunConfig::default())?;

    if let Some(p) = path {
        let text = fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
        let mut v: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {} is not valid JSON: {e}", p.display())))?;
        if let Some(inner) = v.get("config") {
            v = inner.clone();
        }
        check_known(&v, &tree, "")?;
        merge(&mut tree, &v);
    }

    for raw in overrides {
        let (key, value) = parse_override(raw)?;
        apply_override(&mut tree, &key, value)?;
    }

    let cfg: RunConfig = serde_json::from_value(tree)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Splits `--key.path=value`; the value is parsed as JSON when possible
/// and falls back to a bare string (so `--pool.mode=MetaPrompting` works
/// without quoting).
fn parse_override(raw: &str) -> Result<(String, Value)> {
    let body = raw.strip_prefix("--").unwrap_or(raw);
    let (key, val) = body
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{raw}' is not of the form key=value")))?;
    if key.is_empty() {
        return Err(Error::Config(format!("override '{raw}' has an empty key")));
    }
    let value = serde_json::from_str(val).unwrap_or_else(|_| Value::String(val.to_string()));
    Ok((key.to_string(), value))
}

fn apply_override(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("'{}' is not a config section", parts[..i].join("."))))?;
        let entry = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
        if i + 1 == parts.len() {
            if entry.is_object() {
                return Err(Error::Config(format!(
                    "'{key}' is a config section, not a settable value"
                )));
            }
            *entry = value;
            return Ok(());
        }
        node = entry;
    }
    unreachable!("loop returns on the last path segment");
}

/// Every path present in `v` must exist in the default tree; scalar leaves
/// may replace scalar leaves only.
fn check_known(v: &Value, defaults: &Value, path: &str) -> Result<()> {
    let (Some(got), Some(known)) = (v.as_object(), defaults.as_object()) else {
        return Ok(());
    };
    for (k, child) in got {
        let sub = known
            .get(k)
            .ok_or_else(|| Error::Config(format!("unknown config key '{}{k}'", prefix(path))))?;
        if child.is_object() != sub.is_object() {
            return Err(Error::Config(format!(
                "config key '{}{k}' has the wrong structure",
                prefix(path)
            )));
        }
        check_known(child, sub, &format!("{}{k}", prefix(path)))?;
    }
    Ok(())
}

fn prefix(path: &str) -> String {
    if path.is_empty() {
        String::new()
    } else {
        format!("{path}.")
    }
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Everything a run writes next to its artifacts. Contains no timestamps
/// or absolute paths so that identical runs produce identical manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config: RunConfig,
    pub derived: Derived,
}

/// Values computed from the config rather than taken from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Derived {
    /// Trainable prompt-side parameters: K(d_o + L_p d_i) for the pool,
    /// L_p d_i for the single-prompt mode.
    pub pool_params: usize,
    /// Encoder parameter count (0 until an encoder exists in the run).
    pub encoder_params: usize,
    pub vocab_size: usize,
    /// SHA-256 of the corpus JSONL bytes the run consumed, so a manifest
    /// pins the exact data, not just the generator settings.
    pub corpus_sha256: String,
}

impl Manifest {
    pub fn new(
        command: &str,
        config: &RunConfig,
        encoder_params: usize,
        vocab_size: usize,
        corpus_sha256: &str,
    ) -> Manifest {
        let d = config.encoder.dim;
        Manifest {
            command: command.to_string(),
            config: config.clone(),
            derived: Derived {
                pool_params: param_count(&config.pool, d, d, 0),
                encoder_params,
                vocab_size,
                corpus_sha256: corpus_sha256.to_string(),
            },
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}
