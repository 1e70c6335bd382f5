//! Checkpoint container: bitwise round trips and corruption handling.

use metaprompter_core::checkpoint::{load_encoder, load_pool, save_encoder, save_pool};
use metaprompter_core::encoder::{EncoderConfig, EncoderParams, Vocabulary};
use metaprompter_core::pool::{init_pool, PoolConfig, PoolMode};
use metaprompter_core::Error;
use tempfile::tempdir;

fn sample_encoder() -> EncoderParams {
    let mut tokens: Vec<String> = Vocabulary::RESERVED.iter().map(|s| s.to_string()).collect();
    for w in ["one", "two", "three", "four", "topic", "is"] {
        tokens.push(w.to_string());
    }
    let vocab = Vocabulary::new(tokens).unwrap();
    let cfg = EncoderConfig { dim: 8, blocks: 2, heads: 2, ff: 16, max_len: 16 };
    let mut p = EncoderParams::init(cfg, vocab, 5).unwrap();
    p.frozen = true;
    p
}

#[test]
fn encoder_round_trip_is_bitwise() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("encoder.ckpt");
    let a = sample_encoder();
    save_encoder(&path, &a).unwrap();
    let b = load_encoder(&path).unwrap();

    assert_eq!(a.config, b.config);
    assert_eq!(a.vocab.tokens(), b.vocab.tokens());
    assert_eq!(a.frozen, b.frozen);
    for (x, y) in a.param_arrays().iter().zip(b.param_arrays().iter()) {
        assert_eq!(x.name, y.name);
        assert_eq!(x.data, y.data, "array {} not bitwise identical", x.name);
    }

    // Save the loaded copy again: byte-identical files.
    let path2 = dir.path().join("encoder2.ckpt");
    save_encoder(&path2, &b).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn pool_round_trip_is_bitwise_in_both_modes() {
    let dir = tempdir().unwrap();
    let enc = sample_encoder();

    let pooled = init_pool(
        PoolConfig { k: 3, prompt_len: 2, mode: PoolMode::MetaPrompter, sqrt_scale: true },
        &enc,
        &[5, 6, 7],
        9,
    )
    .unwrap();
    let single = init_pool(
        PoolConfig { k: 1, prompt_len: 2, mode: PoolMode::MetaPrompting, sqrt_scale: false },
        &enc,
        &[5, 6, 7],
        9,
    )
    .unwrap();

    for (name, pool) in [("pooled", &pooled), ("single", &single)] {
        let path = dir.path().join(format!("{name}.ckpt"));
        save_pool(&path, pool).unwrap();
        let back = load_pool(&path).unwrap();
        assert_eq!(back.config, pool.config, "{name} config");
        assert_eq!(back.d_in, pool.d_in);
        assert_eq!(back.d_out, pool.d_out);
        assert_eq!(back.keys, pool.keys, "{name} keys");
        assert_eq!(back.values, pool.values, "{name} values");

        let path2 = dir.path().join(format!("{name}-again.ckpt"));
        save_pool(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}

#[test]
fn kind_mismatch_is_rejected() {
    let dir = tempdir().unwrap();
    let enc = sample_encoder();
    let pool = init_pool(PoolConfig::default(), &enc, &[5], 1).unwrap();

    let epath = dir.path().join("enc.ckpt");
    save_encoder(&epath, &enc).unwrap();
    let err = load_pool(&epath).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "got {err}");

    let ppath = dir.path().join("pool.ckpt");
    save_pool(&ppath, &pool).unwrap();
    let err = load_encoder(&ppath).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "got {err}");
}

#[test]
fn truncated_and_corrupt_files_are_rejected() {
    let dir = tempdir().unwrap();
    let enc = sample_encoder();
    let path = dir.path().join("enc.ckpt");
    save_encoder(&path, &enc).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    // Cut the payload short.
    let truncated = dir.path().join("short.ckpt");
    std::fs::write(&truncated, &bytes[..bytes.len() - 9]).unwrap();
    assert!(matches!(load_encoder(&truncated), Err(Error::Checkpoint(_))));

    // Break the magic.
    let mut broken = bytes.clone();
    broken[0] ^= 0xff;
    let bad_magic = dir.path().join("magic.ckpt");
    std::fs::write(&bad_magic, &broken).unwrap();
    assert!(matches!(load_encoder(&bad_magic), Err(Error::Checkpoint(_))));

    // Unknown version.
    let mut vbytes = bytes.clone();
    vbytes[4] = 0xfe;
    let bad_version = dir.path().join("version.ckpt");
    std::fs::write(&bad_version, &vbytes).unwrap();
    assert!(matches!(load_encoder(&bad_version), Err(Error::Checkpoint(_))));

    // Too short to even hold the header.
    let stub = dir.path().join("stub.ckpt");
    std::fs::write(&stub, &bytes[..6]).unwrap();
    assert!(matches!(load_encoder(&stub), Err(Error::Checkpoint(_))));
}

#[test]
fn missing_file_error_names_the_path() {
    let dir = tempdir().unwrap();
    let err = load_encoder(&dir.path().join("nope.ckpt")).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "got {err}");
    assert!(err.to_string().contains("nope.ckpt"));
}
