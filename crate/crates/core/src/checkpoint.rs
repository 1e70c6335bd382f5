//! Checkpoint container: a JSON header describing the stored arrays,
//! followed by their raw little-endian f64 payload. Round-trips are
//! bitwise lossless.
//!
//! Layout: `b"MPCK"` magic, u32 LE format version, u64 LE header length,
//! header JSON, then every array's elements concatenated in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderParams, Vocabulary};
use crate::error::{Error, Result};
use crate::pool::{PoolConfig, PoolMode, PromptPool};

const MAGIC: &[u8; 4] = b"MPCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Header {
    Encoder { config: EncoderConfig, vocab: Vec<String>, frozen: bool, arrays: Vec<ArrayInfo> },
    Pool { config: PoolConfig, d_in: usize, d_out: usize, arrays: Vec<ArrayInfo> },
}

fn write_container(path: &Path, header: &Header, arrays: &[&[f64]]) -> Result<()> {
    let header_json = serde_json::to_vec(header)?;
    let payload_len: usize = arrays.iter().map(|a| a.len() * 8).sum();
    let mut buf = Vec::with_capacity(4 + 4 + 8 + header_json.len() + payload_len);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for a in arrays {
        for &x in *a {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_container(path: &Path) -> Result<(Header, Vec<Vec<f64>>)> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {version}, this build reads {VERSION}",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 16 + header_len {
        return Err(Error::Checkpoint(format!("{}: truncated header", path.display())));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])?;
    let infos = match &header {
        Header::Encoder { arrays, .. } => arrays,
        Header::Pool { arrays, .. } => arrays,
    };

    let expected: usize = infos.iter().map(|a| a.shape.iter().product::<usize>() * 8).sum();
    let payload = &bytes[16 + header_len..];
    if payload.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{}: payload holds {} bytes, header declares {expected}",
            path.display(),
            payload.len()
        )));
    }

    let mut arrays = Vec::with_capacity(infos.len());
    let mut off = 0;
    for info in infos {
        let n: usize = info.shape.iter().product();
        let mut a = Vec::with_capacity(n);
        for i in 0..n {
            let s = off + i * 8;
            a.push(f64::from_le_bytes(payload[s..s + 8].try_into().expect("8 bytes")));
        }
        off += n * 8;
        arrays.push(a);
    }
    Ok((header, arrays))
}

pub fn save_encoder(path: &Path, params: &EncoderParams) -> Result<()> {
    let named = params.param_arrays();
    let header = Header::Encoder {
        config: params.config,
        vocab: params.vocab.tokens().to_vec(),
        frozen: params.frozen,
        arrays: named
            .iter()
            .map(|a| ArrayInfo { name: a.name.clone(), shape: a.shape.dims() })
            .collect(),
    };
    let refs: Vec<&[f64]> = named.iter().map(|a| a.data).collect();
    write_container(path, &header, &refs)
}

pub fn load_encoder(path: &Path) -> Result<EncoderParams> {
    let (header, arrays) = read_container(path)?;
    let Header::Encoder { config, vocab, frozen, arrays: infos } = header else {
        return Err(Error::Checkpoint(format!(
            "{} holds a pool checkpoint, not an encoder",
            path.display()
        )));
    };
    config.validate()?;
    let vocab = Vocabulary::new(vocab)?;

    let mut params = EncoderParams {
        config,
        vocab,
        embedding: Vec::new(),
        positional: Vec::new(),
        blocks: Vec::new(),
        frozen,
    };
    params.blocks = (0..config.blocks)
        .map(|_| crate::encoder::BlockParams {
            wq: Vec::new(),
            bq: Vec::new(),
            wk: Vec::new(),
            bk: Vec::new(),
            wv: Vec::new(),
            bv: Vec::new(),
            wo: Vec::new(),
            bo: Vec::new(),
            ln1_g: Vec::new(),
            ln1_b: Vec::new(),
            w1: Vec::new(),
            b1: Vec::new(),
            w2: Vec::new(),
            b2: Vec::new(),
            ln2_g: Vec::new(),
            ln2_b: Vec::new(),
        })
        .collect();

    // The canonical layout defines what each stored array must look like.
    {
        let expected = expected_layout(&params);
        if infos.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "{}: {} arrays, encoder layout needs {}",
                path.display(),
                infos.len(),
                expected.len()
            )));
        }
        for (info, (name, len)) in infos.iter().zip(&expected) {
            let n: usize = info.shape.iter().product();
            if &info.name != name || n != *len {
                return Err(Error::Checkpoint(format!(
                    "{}: array {:?} ({n} values) does not match layout entry {:?} ({len} values)",
                    path.display(),
                    info.name,
                    name
                )));
            }
        }
    }
    for (slot, data) in params.param_arrays_mut().into_iter().zip(arrays) {
        *slot = data;
    }
    Ok(params)
}

/// Canonical (name, length) layout for an encoder configuration.
fn expected_layout(params: &EncoderParams) -> Vec<(String, usize)> {
    let d = params.config.dim;
    let ff = params.config.ff;
    let mut out = vec![
        ("embedding".to_string(), params.vocab.len() * d),
        ("positional".to_string(), params.config.max_len * d),
    ];
    for i in 0..params.config.blocks {
        for (name, len) in [
            ("wq", d * d),
            ("bq", d),
            ("wk", d * d),
            ("bk", d),
            ("wv", d * d),
            ("bv", d),
            ("wo", d * d),
            ("bo", d),
            ("ln1_g", d),
            ("ln1_b", d),
            ("w1", d * ff),
            ("b1", ff),
            ("w2", ff * d),
            ("b2", d),
            ("ln2_g", d),
            ("ln2_b", d),
        ] {
            out.push((format!("block{i}.{name}"), len));
        }
    }
    out
}

pub fn save_pool(path: &Path, pool: &PromptPool) -> Result<()> {
    let named = pool.param_arrays();
    let header = Header::Pool {
        config: pool.config,
        d_in: pool.d_in,
        d_out: pool.d_out,
        arrays: named
            .iter()
            .map(|a| ArrayInfo { name: a.name.clone(), shape: a.shape.dims() })
            .collect(),
    };
    let refs: Vec<&[f64]> = named.iter().map(|a| a.data).collect();
    write_container(path, &header, &refs)
}

pub fn load_pool(path: &Path) -> Result<PromptPool> {
    let (header, mut arrays) = read_container(path)?;
    let Header::Pool { config, d_in, d_out, arrays: infos } = header else {
        return Err(Error::Checkpoint(format!(
            "{} holds an encoder checkpoint, not a pool",
            path.display()
        )));
    };
    config.validate()?;

    let has_keys = config.mode == PoolMode::MetaPrompter;
    let want = config.k + usize::from(has_keys);
    if infos.len() != want || arrays.len() != want {
        return Err(Error::Checkpoint(format!(
            "{}: {} arrays, pool layout needs {want}",
            path.display(),
            infos.len()
        )));
    }
    let keys = if has_keys {
        let k = arrays.remove(0);
        if k.len() != config.k * d_out {
            return Err(Error::Checkpoint(format!(
                "{}: keys hold {} values, layout needs {}",
                path.display(),
                k.len(),
                config.k * d_out
            )));
        }
        k
    } else {
        Vec::new()
    };
    for (i, v) in arrays.iter().enumerate() {
        if v.len() != config.prompt_len * d_in {
            return Err(Error::Checkpoint(format!(
                "{}: value {i} holds {} values, layout needs {}",
                path.display(),
                v.len(),
                config.prompt_len * d_in
            )));
        }
    }
    Ok(PromptPool { config, d_in, d_out, keys, values: arrays })
}
