//! Encoder contracts: vocabulary rules, wrap layout, forward invariants,
//! prompt gradients, freezing, and pretraining behaviour.

use metaprompter_core::encoder::{
    pretrain_encoder, query_embedding, EncoderConfig, EncoderParams, PretrainConfig, Vocabulary,
    CLS, MASK, SEP, UNK,
};
use metaprompter_core::episodes::{Corpus, CorpusConfig};
use metaprompter_core::tensor::{finite_diff_check, Shape, Tape};
use metaprompter_core::Error;

fn small_vocab() -> Vocabulary {
    let mut tokens: Vec<String> = Vocabulary::RESERVED.iter().map(|s| s.to_string()).collect();
    for w in ["coffee", "price", "topic", "is", "market", "rain", "striker", "serum"] {
        tokens.push(w.to_string());
    }
    Vocabulary::new(tokens).unwrap()
}

fn small_encoder(seed: u64) -> EncoderParams {
    let cfg = EncoderConfig { dim: 8, blocks: 2, heads: 2, ff: 16, max_len: 32 };
    EncoderParams::init(cfg, small_vocab(), seed).unwrap()
}

fn micro_corpus() -> Corpus {
    let cfg = CorpusConfig {
        n_classes: 6,
        docs_per_class: 10,
        doc_len: 10,
        vocab_size: 40,
        topic_sharpness: 0.7,
        seed: 11,
        split_classes: [2, 2, 2],
    };
    Corpus::generate(&cfg).unwrap()
}

#[test]
fn vocabulary_pins_reserved_ids() {
    let v = small_vocab();
    assert_eq!(v.id_of("[CLS]"), Some(CLS));
    assert_eq!(v.id_of("[SEP]"), Some(SEP));
    assert_eq!(v.id_of("[MASK]"), Some(MASK));
    assert_eq!(v.id_of("[UNK]"), Some(UNK));
    assert!(v.is_reserved(CLS) && v.is_reserved(UNK));
    assert!(!v.is_reserved(5));
    assert_eq!(v.token(v.id_of("coffee").unwrap()), "coffee");
}

#[test]
fn vocabulary_rejects_misplaced_or_duplicate_tokens() {
    // Reserved tokens out of position.
    let err = Vocabulary::new(vec!["coffee".into(), "[CLS]".into()]).unwrap_err();
    assert!(matches!(err, Error::Config(_)));

    let mut tokens: Vec<String> = Vocabulary::RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.push("coffee".into());
    tokens.push("coffee".into());
    let err = Vocabulary::new(tokens).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn tokenize_lowercases_and_maps_unknowns() {
    let v = small_vocab();
    assert_eq!(v.tokenize(""), Vec::<usize>::new());
    assert_eq!(
        v.tokenize("Coffee PRICE"),
        vec![v.id_of("coffee").unwrap(), v.id_of("price").unwrap()]
    );
    assert_eq!(v.tokenize("coffee zzz"), vec![v.id_of("coffee").unwrap(), UNK]);
}

#[test]
fn config_rejects_bad_dimensions() {
    let bad_heads = EncoderConfig { dim: 10, blocks: 1, heads: 3, ff: 8, max_len: 16 };
    assert!(bad_heads.validate().is_err());
    let bad_len = EncoderConfig { dim: 8, blocks: 1, heads: 2, ff: 8, max_len: 3 };
    assert!(bad_len.validate().is_err());
    let zero = EncoderConfig { dim: 0, blocks: 1, heads: 1, ff: 8, max_len: 16 };
    assert!(zero.validate().is_err());
}

#[test]
fn wrap_probe_layout_is_five_rows() {
    // Empty x, no prompt, two anchors: CLS, topic, is, MASK, SEP.
    let params = small_encoder(3);
    let anchors = [params.vocab.id_of("topic").unwrap(), params.vocab.id_of("is").unwrap()];
    let mut tape = Tape::new();
    let enc = params.on_tape(&mut tape).unwrap();
    let w = enc.wrap(&mut tape, &[], None, &anchors).unwrap();
    assert_eq!(w.n_rows, 5);
    assert_eq!(w.mask_position, 3);
    assert_eq!(w.x_len, 0);
    assert_eq!(w.prompt_len, 0);

    // Row content: embeddings of CLS / anchors / MASK / SEP in order.
    let dim = params.config.dim;
    let rows = tape.value(w.rows).to_vec();
    let emb_row = |id: usize| &params.embedding[id * dim..(id + 1) * dim];
    assert_eq!(&rows[0..dim], emb_row(CLS));
    assert_eq!(&rows[dim..2 * dim], emb_row(anchors[0]));
    assert_eq!(&rows[2 * dim..3 * dim], emb_row(anchors[1]));
    assert_eq!(&rows[3 * dim..4 * dim], emb_row(MASK));
    assert_eq!(&rows[4 * dim..5 * dim], emb_row(SEP));
}

#[test]
fn wrap_counts_every_frame_row() {
    // 1 CLS + 10 x + 8 prompt + 2 anchors + MASK + SEP = 23 rows; the mask
    // sits second to last.
    let params = small_encoder(4);
    let dim = params.config.dim;
    let x: Vec<usize> = (0..10).map(|i| 5 + (i % 7)).collect();
    let anchors = [params.vocab.id_of("topic").unwrap(), params.vocab.id_of("is").unwrap()];
    let mut tape = Tape::new();
    let enc = params.on_tape(&mut tape).unwrap();
    let theta: Vec<f64> = (0..8 * dim).map(|i| 0.01 * i as f64).collect();
    let prompt = tape.constant(theta.clone(), Shape::Matrix(8, dim)).unwrap();
    let w = enc.wrap(&mut tape, &x, Some(prompt), &anchors).unwrap();
    assert_eq!(w.n_rows, 23);
    assert_eq!(w.mask_position, w.n_rows - 2);
    assert_eq!(w.mask_position, 1 + 10 + 8 + 2);
    assert_eq!(w.prompt_len, 8);

    // Prompt rows are spliced verbatim, not re-embedded.
    let rows = tape.value(w.rows);
    let start = (1 + 10) * dim;
    assert_eq!(&rows[start..start + 8 * dim], &theta[..]);
}

#[test]
fn wrap_truncates_input_tail() {
    let params = small_encoder(5);
    let dim = params.config.dim;
    let max_len = params.config.max_len;
    let anchors = [params.vocab.id_of("topic").unwrap()];
    // Overhead: CLS + 1 anchor + MASK + SEP = 4, so 28 x slots remain.
    let x: Vec<usize> = (0..40).map(|i| 5 + (i % 8)).collect();
    let mut tape = Tape::new();
    let enc = params.on_tape(&mut tape).unwrap();
    let w = enc.wrap(&mut tape, &x, None, &anchors).unwrap();
    assert_eq!(w.x_len, max_len - 4);
    assert_eq!(w.n_rows, max_len);
    // The surviving rows are the first x_len tokens; the tail is dropped.
    let rows = tape.value(w.rows);
    for (i, &tok) in x[..w.x_len].iter().enumerate() {
        let row = &rows[(1 + i) * dim..(2 + i) * dim];
        assert_eq!(row, &params.embedding[tok * dim..(tok + 1) * dim]);
    }
}

#[test]
fn wrap_rejects_oversized_frame() {
    let params = small_encoder(6);
    let dim = params.config.dim;
    let mut tape = Tape::new();
    let enc = params.on_tape(&mut tape).unwrap();
    // 30 prompt rows + CLS + MASK + SEP = 33 > max_len 32 even with no x.
    let prompt = tape.constant(vec![0.0; 30 * dim], Shape::Matrix(30, dim)).unwrap();
    let err = enc.wrap(&mut tape, &[], Some(prompt), &[]).unwrap_err();
    assert!(matches!(err, Error::Contract { .. }), "got {err}");
}

#[test]
fn vocab_dist_is_a_probability_vector() {
    let params = small_encoder(7);
    let mut tape = Tape::new();
    let enc = params.on_tape(&mut tape).unwrap();
    let x = [5, 6, 9, 10];
    let w = enc.wrap(&mut tape, &x, None, &[7, 8]).unwrap();
    let out = enc.encode(&mut tape, &w).unwrap();
    let dist = tape.value(out.vocab_dist);
    assert_eq!(dist.len(), params.vocab.len());
    assert!(dist.iter().all(|&p| p >= 0.0));
    assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn token_order_changes_the_mask_embedding() {
    let params = small_encoder(8);
    let run = |x: &[usize]| -> Vec<f64> {
        let mut tape = Tape::new();
        let enc = params.on_tape(&mut tape).unwrap();
        let w = enc.wrap(&mut tape, x, None, &[7, 8]).unwrap();
        let out = enc.encode(&mut tape, &w).unwrap();
        tape.value(out.h_mask).to_vec()
    };
    let a = run(&[5, 6, 9]);
    let b = run(&[6, 5, 9]);
    assert_ne!(a, b, "positional embeddings should distinguish permuted inputs");
}

#[test]
fn prompt_gradient_matches_finite_differences() {
    // End-to-end chain: loss = fixed projection of h_mask, probed at the
    // prompt rows through the whole transformer stack.
    let params = small_encoder(9);
    let dim = params.config.dim;
    let l_p = 2;
    let x = [5usize, 6, 9];
    let anchors = [7usize, 8];
    let probe: Vec<f64> = (0..dim).map(|i| 0.2 + 0.1 * i as f64).collect();

    let theta0: Vec<f64> = (0..l_p * dim).map(|i| 0.01 * (i as f64) - 0.05).collect();
    let worst = finite_diff_check(
        |tape, t| {
            let enc = params.on_tape(tape)?;
            let w = enc.wrap(tape, &x, Some(t), &anchors)?;
            let out = enc.encode(tape, &w)?;
            let pv = tape.constant(probe.clone(), Shape::Vector(dim))?;
            let prod = tape.mul(out.h_mask, pv)?;
            tape.sum(prod)
        },
        &theta0,
        Shape::Matrix(l_p, dim),
        1e-5,
    )
    .unwrap();
    assert!(worst <= 1e-4, "worst relative error {worst:.3e} exceeds 1e-4");
}

#[test]
fn swapping_embedding_rows_relabels_the_distribution() {
    // Swapping two non-reserved embedding rows and the same ids in the
    // input must leave h_mask bitwise unchanged and swap exactly those two
    // vocabulary probabilities.
    let mut params = small_encoder(10);
    let (i, j) = (5usize, 9usize);
    let x = [i, 6, 7];
    let x_swapped = [j, 6, 7];

    let run = |p: &EncoderParams, x: &[usize]| -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let enc = p.on_tape(&mut tape).unwrap();
        let w = enc.wrap(&mut tape, x, None, &[8]).unwrap();
        let out = enc.encode(&mut tape, &w).unwrap();
        (tape.value(out.h_mask).to_vec(), tape.value(out.vocab_dist).to_vec())
    };

    let (h1, d1) = run(&params, &x);
    let dim = params.config.dim;
    for k in 0..dim {
        params.embedding.swap(i * dim + k, j * dim + k);
    }
    let (h2, d2) = run(&params, &x_swapped);

    assert_eq!(h1, h2);
    assert_eq!(d1[i], d2[j]);
    assert_eq!(d1[j], d2[i]);
    for k in 0..d1.len() {
        if k != i && k != j {
            assert_eq!(d1[k], d2[k]);
        }
    }
}

#[test]
fn frozen_params_refuse_trainable_registration() {
    let mut params = small_encoder(11);
    let mut tape = Tape::new();
    assert!(params.on_tape_trainable(&mut tape).is_ok());
    params.frozen = true;
    let mut tape = Tape::new();
    let err = params.on_tape_trainable(&mut tape).unwrap_err();
    assert!(matches!(err, Error::Contract { .. }), "got {err}");
    // Constant registration still works on frozen params.
    assert!(params.on_tape(&mut tape).is_ok());
}

#[test]
fn query_embedding_requires_frozen_params() {
    let mut params = small_encoder(12);
    let err = query_embedding(&params, &[5, 6], &[7, 8]).unwrap_err();
    assert!(matches!(err, Error::Contract { .. }), "got {err}");
    params.frozen = true;
    let q1 = query_embedding(&params, &[5, 6], &[7, 8]).unwrap();
    let q2 = query_embedding(&params, &[5, 6], &[7, 8]).unwrap();
    assert_eq!(q1.len(), params.config.dim);
    assert_eq!(q1, q2);
}

#[test]
fn param_arrays_have_fixed_names_and_cover_all_params() {
    let params = small_encoder(13);
    let arrays = params.param_arrays();
    let names: Vec<&str> = arrays.iter().map(|a| a.name.as_str()).collect();
    let mut expect = vec!["embedding".to_string(), "positional".to_string()];
    for b in 0..params.config.blocks {
        for part in [
            "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_g", "ln1_b", "w1", "b1", "w2",
            "b2", "ln2_g", "ln2_b",
        ] {
            expect.push(format!("block{b}.{part}"));
        }
    }
    assert_eq!(names, expect.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    let total: usize = arrays.iter().map(|a| a.data.len()).sum();
    assert_eq!(total, params.num_params());
    assert_eq!(arrays[0].data.len(), params.vocab.len() * params.config.dim);
    for a in &arrays {
        assert_eq!(a.shape.len(), a.data.len(), "shape mismatch in {}", a.name);
    }
}

#[test]
fn init_is_deterministic_per_seed() {
    let a = small_encoder(21);
    let b = small_encoder(21);
    let c = small_encoder(22);
    assert_eq!(a.embedding, b.embedding);
    assert_eq!(a.positional, b.positional);
    assert_ne!(a.embedding, c.embedding);
}

#[test]
fn pretrain_reduces_loss_freezes_and_is_deterministic() {
    let corpus = micro_corpus();
    let cfg = EncoderConfig { dim: 16, blocks: 2, heads: 2, ff: 32, max_len: 32 };
    let pcfg = PretrainConfig { steps: 150, batch: 8, lr: 3e-3, mask_rate: 0.15, seed: 2 };

    let (enc1, report) = pretrain_encoder(&corpus, cfg, &pcfg).unwrap();
    assert!(enc1.frozen);
    assert_eq!(report.losses.len(), pcfg.steps);
    assert!(report.losses.iter().all(|l| l.is_finite()));
    let head: f64 = report.losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = report.losses[pcfg.steps - 10..].iter().sum::<f64>() / 10.0;
    assert!(
        report.losses[pcfg.steps - 1] < report.losses[0],
        "final loss {} not below initial {}",
        report.losses[pcfg.steps - 1],
        report.losses[0]
    );
    assert!(tail < head, "mean loss did not decrease: head {head}, tail {tail}");

    let (enc2, _) = pretrain_encoder(&corpus, cfg, &pcfg).unwrap();
    assert_eq!(enc1.embedding, enc2.embedding);
    assert_eq!(enc1.positional, enc2.positional);
    for (a, b) in enc1.param_arrays().iter().zip(enc2.param_arrays().iter()) {
        assert_eq!(a.data, b.data, "array {} differs between identical runs", a.name);
    }

    let other = PretrainConfig { seed: 3, ..pcfg };
    let (enc3, _) = pretrain_encoder(&corpus, cfg, &other).unwrap();
    assert_ne!(enc1.embedding, enc3.embedding);
}

#[test]
fn pretrain_rejects_degenerate_setups() {
    let corpus = micro_corpus();
    let cfg = EncoderConfig { dim: 16, blocks: 1, heads: 2, ff: 16, max_len: 32 };
    let bad_rate = PretrainConfig { mask_rate: 0.0, ..PretrainConfig::default() };
    assert!(matches!(pretrain_encoder(&corpus, cfg, &bad_rate), Err(Error::Config(_))));
    let bad_steps = PretrainConfig { steps: 0, ..PretrainConfig::default() };
    assert!(matches!(pretrain_encoder(&corpus, cfg, &bad_steps), Err(Error::Config(_))));
}

#[test]
fn query_embeddings_distinguish_documents_of_different_classes() {
    let corpus = micro_corpus();
    let cfg = EncoderConfig { dim: 16, blocks: 2, heads: 2, ff: 32, max_len: 32 };
    let pcfg = PretrainConfig { steps: 150, batch: 8, lr: 3e-3, mask_rate: 0.15, seed: 2 };
    let (enc, _) = pretrain_encoder(&corpus, cfg, &pcfg).unwrap();

    let anchors: Vec<usize> =
        ["topic", "is"].iter().map(|w| corpus.vocab.id_of(w).unwrap()).collect();
    let doc_a = corpus.docs_of_class(0)[0];
    let doc_b = corpus.docs_of_class(1)[0];
    let qa = query_embedding(&enc, &corpus.docs[doc_a].tokens, &anchors).unwrap();
    let qb = query_embedding(&enc, &corpus.docs[doc_b].tokens, &anchors).unwrap();

    let dot: f64 = qa.iter().zip(&qb).map(|(a, b)| a * b).sum();
    let na: f64 = qa.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb: f64 = qb.iter().map(|b| b * b).sum::<f64>().sqrt();
    let cos = dot / (na * nb);
    assert!(cos < 0.999, "query embeddings collapsed: cosine {cos}");
}
