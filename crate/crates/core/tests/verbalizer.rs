//! Verbalizer behaviour: hard token averaging, prototype similarity
//! scoring, the convex mixture, the training loss, and the dot-product
//! baseline head.

use std::collections::BTreeMap;

use metaprompter_core::encoder::Vocabulary;
use metaprompter_core::tensor::{Shape, Tape, Tensor};
use metaprompter_core::verbalizer::{
    combined_nll, combined_prob, compute_label_embeddings, repverb_prob, repverb_prob_with,
    warp_fit, warp_predict, HandVerbalizer, Similarity, SupportEmbedding, WarpConfig,
    LAMBDA_DEFAULT, RHO_DEFAULT,
};
use metaprompter_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dist(tape: &mut Tape, p: Vec<f64>) -> Tensor {
    let n = p.len();
    tape.constant(p, Shape::Vector(n)).unwrap()
}

fn embeddings(tape: &mut Tape, rows: &[(usize, usize, Vec<f64>)]) -> Vec<SupportEmbedding> {
    rows.iter()
        .map(|(id, label, v)| SupportEmbedding {
            sample_id: *id,
            label: *label,
            h: tape.constant(v.clone(), Shape::Vector(v.len())).unwrap(),
        })
        .collect()
}

#[test]
fn defaults_are_pinned() {
    assert_eq!(RHO_DEFAULT, 10.0);
    assert_eq!(LAMBDA_DEFAULT, 0.5);
}

#[test]
fn hand_verbalizer_rejects_bad_sets() {
    assert!(matches!(HandVerbalizer::new(vec![vec![1], vec![]], 10), Err(Error::Config(_))));
    assert!(matches!(HandVerbalizer::new(vec![vec![10]], 10), Err(Error::Config(_))));
    assert!(HandVerbalizer::new(vec![vec![1, 2], vec![3]], 10).is_ok());
}

#[test]
fn hard_prob_uniform_dist_gives_uniform_scores() {
    let v = 8;
    let verb = HandVerbalizer::new(vec![vec![1, 2], vec![3]], v).unwrap();
    let mut tape = Tape::new();
    let d = dist(&mut tape, vec![1.0 / v as f64; v]);
    let p = verb.hard_prob(&mut tape, d).unwrap();
    let got = tape.value(p);
    assert!((got[0] - 1.0 / v as f64).abs() < 1e-15);
    assert!((got[1] - 1.0 / v as f64).abs() < 1e-15);
}

#[test]
fn hard_prob_one_hot_member_is_certain() {
    let verb = HandVerbalizer::new(vec![vec![2], vec![5]], 6).unwrap();
    let mut tape = Tape::new();
    let mut raw = vec![0.0; 6];
    raw[2] = 1.0;
    let d = dist(&mut tape, raw);
    let p = verb.hard_prob(&mut tape, d).unwrap();
    assert_eq!(tape.value(p), &[1.0, 0.0][..]);
}

#[test]
fn hard_prob_averages_member_tokens_without_renormalizing() {
    let verb = HandVerbalizer::new(vec![vec![0, 1], vec![2]], 4).unwrap();
    let mut tape = Tape::new();
    let d = dist(&mut tape, vec![0.2, 0.4, 0.1, 0.3]);
    let p = verb.hard_prob(&mut tape, d).unwrap();
    let got = tape.value(p);
    assert!((got[0] - 0.3).abs() < 1e-15);
    assert!((got[1] - 0.1).abs() < 1e-15);
    // The scores are an average per label, not a distribution over labels.
    assert!((got.iter().sum::<f64>() - 0.4).abs() < 1e-15);
}

#[test]
fn from_named_map_resolves_tokens_against_vocab() {
    let mut tokens: Vec<String> = Vocabulary::RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(["sports", "game", "finance"].iter().map(|s| s.to_string()));
    let vocab = Vocabulary::new(tokens).unwrap();

    let mut map = BTreeMap::new();
    map.insert("a".to_string(), vec!["sports".to_string(), "game".to_string()]);
    map.insert("b".to_string(), vec!["finance".to_string()]);
    let verb =
        HandVerbalizer::from_named_map(&map, &["a".to_string(), "b".to_string()], &vocab).unwrap();
    assert_eq!(verb.sets(), &[vec![5, 6], vec![7]]);

    map.insert("b".to_string(), vec!["unknownword".to_string()]);
    let err = HandVerbalizer::from_named_map(&map, &["a".to_string(), "b".to_string()], &vocab)
        .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn one_shot_label_embedding_is_that_sample() {
    let mut tape = Tape::new();
    let h = vec![0.3, -0.7, 1.1];
    let samples = embeddings(&mut tape, &[(0, 0, h.clone())]);
    let labels = compute_label_embeddings(&mut tape, &samples, 1, 9).unwrap();
    assert_eq!(tape.value(labels.by_label[0]), &h[..]);
    assert_eq!(labels.provenance, 9);
}

#[test]
fn duplicate_samples_leave_the_mean_unchanged() {
    let mut tape = Tape::new();
    let h = vec![0.5, 2.0];
    let samples = embeddings(&mut tape, &[(0, 0, h.clone()), (1, 0, h.clone())]);
    let labels = compute_label_embeddings(&mut tape, &samples, 1, 0).unwrap();
    assert_eq!(tape.value(labels.by_label[0]), &h[..]);
}

#[test]
fn five_shot_mean_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 6;
    let rows: Vec<(usize, usize, Vec<f64>)> = (0..5)
        .map(|i| (i, 0, (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    let mut brute = vec![0.0; d];
    for (_, _, v) in &rows {
        for (b, x) in brute.iter_mut().zip(v) {
            *b += x;
        }
    }
    for b in &mut brute {
        *b /= 5.0;
    }
    let mut tape = Tape::new();
    let samples = embeddings(&mut tape, &rows);
    let labels = compute_label_embeddings(&mut tape, &samples, 1, 0).unwrap();
    let got = tape.value(labels.by_label[0]);
    for (g, b) in got.iter().zip(&brute) {
        assert!((g - b).abs() < 1e-15);
    }
}

#[test]
fn support_order_does_not_change_the_mean() {
    // Summation happens in sample-id order, so any input permutation gives
    // a bitwise-identical mean.
    let rows = vec![
        (2usize, 0usize, vec![0.111, -0.5]),
        (0, 0, vec![1.75, 0.3]),
        (1, 0, vec![-0.25, 2.2]),
    ];
    let mut perm = rows.clone();
    perm.reverse();

    let run = |rows: &[(usize, usize, Vec<f64>)]| {
        let mut tape = Tape::new();
        let samples = embeddings(&mut tape, rows);
        let labels = compute_label_embeddings(&mut tape, &samples, 1, 0).unwrap();
        tape.value(labels.by_label[0]).to_vec()
    };
    assert_eq!(run(&rows), run(&perm));
}

#[test]
fn missing_label_is_an_episode_error() {
    let mut tape = Tape::new();
    let samples = embeddings(&mut tape, &[(0, 0, vec![1.0, 0.0])]);
    let err = compute_label_embeddings(&mut tape, &samples, 2, 0).unwrap_err();
    assert!(matches!(err, Error::Episode(_)), "got {err}");
}

/// Orthogonal label embeddings with h aligned to label 0.
fn aligned_setup(tape: &mut Tape, n: usize) -> (Tensor, metaprompter_core::verbalizer::LabelEmbeddings) {
    let d = n;
    let rows: Vec<(usize, usize, Vec<f64>)> = (0..n)
        .map(|y| {
            let mut v = vec![0.0; d];
            v[y] = 1.0;
            (y, y, v)
        })
        .collect();
    let samples = embeddings(tape, &rows);
    let labels = compute_label_embeddings(tape, &samples, n, 0).unwrap();
    let mut hv = vec![0.0; d];
    hv[0] = 2.0; // scaled copy of v_0: cosine 1 with label 0, 0 elsewhere
    let h = tape.constant(hv, Shape::Vector(d)).unwrap();
    (h, labels)
}

#[test]
fn aligned_prototype_hand_case_five_way() {
    let mut tape = Tape::new();
    let (h, labels) = aligned_setup(&mut tape, 5);
    let p = repverb_prob(&mut tape, h, &labels, 10.0).unwrap();
    let got = tape.value(p);
    let expect = 10f64.exp() / (10f64.exp() + 4.0);
    assert!((got[0] - expect).abs() < 1e-12);
    assert!((expect - 0.99981).abs() < 1e-5);
}

#[test]
fn tiny_rho_flattens_and_huge_rho_sharpens() {
    let mut tape = Tape::new();
    let (h, labels) = aligned_setup(&mut tape, 4);
    let flat = repverb_prob(&mut tape, h, &labels, 1e-6).unwrap();
    for p in tape.value(flat) {
        assert!((p - 0.25).abs() <= 1e-6);
    }
    let sharp = repverb_prob(&mut tape, h, &labels, 1e3).unwrap();
    let got = tape.value(sharp);
    assert!((got[0] - 1.0).abs() <= 1e-6);
    for p in &got[1..] {
        assert!(p.abs() <= 1e-6);
    }
}

#[test]
fn rho_must_be_positive_and_finite() {
    let mut tape = Tape::new();
    let (h, labels) = aligned_setup(&mut tape, 3);
    assert!(matches!(repverb_prob(&mut tape, h, &labels, 0.0), Err(Error::Config(_))));
    assert!(matches!(repverb_prob(&mut tape, h, &labels, -1.0), Err(Error::Config(_))));
    assert!(matches!(repverb_prob(&mut tape, h, &labels, f64::NAN), Err(Error::Config(_))));
}

#[test]
fn prototype_argmax_ignores_input_scale() {
    let mut tape = Tape::new();
    let rows = vec![
        (0usize, 0usize, vec![0.9, 0.1, -0.3]),
        (1, 1, vec![-0.2, 1.2, 0.4]),
        (2, 2, vec![0.3, -0.8, 0.7]),
    ];
    let samples = embeddings(&mut tape, &rows);
    let labels = compute_label_embeddings(&mut tape, &samples, 3, 0).unwrap();
    let hv = vec![0.5, 0.4, -0.1];
    let argmax = |p: &[f64]| {
        p.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0
    };
    let h1 = tape.constant(hv.clone(), Shape::Vector(3)).unwrap();
    let p1 = repverb_prob(&mut tape, h1, &labels, 10.0).unwrap();
    let h2 = tape
        .constant(hv.iter().map(|x| x * 37.5).collect::<Vec<_>>(), Shape::Vector(3))
        .unwrap();
    let p2 = repverb_prob(&mut tape, h2, &labels, 10.0).unwrap();
    assert_eq!(argmax(tape.value(p1)), argmax(tape.value(p2)));
}

#[test]
fn degenerate_hidden_state_errors() {
    let mut tape = Tape::new();
    let (_, labels) = aligned_setup(&mut tape, 3);
    let zero = tape.constant(vec![0.0; 3], Shape::Vector(3)).unwrap();
    let err = repverb_prob(&mut tape, zero, &labels, 10.0).unwrap_err();
    assert!(matches!(err, Error::Degenerate { .. }), "got {err}");
}

#[test]
fn negative_euclidean_similarity_prefers_the_nearest_prototype() {
    let mut tape = Tape::new();
    let rows = vec![(0usize, 0usize, vec![1.0, 0.0]), (1, 1, vec![0.0, 1.0])];
    let samples = embeddings(&mut tape, &rows);
    let labels = compute_label_embeddings(&mut tape, &samples, 2, 0).unwrap();
    // Nearer to prototype 1 but more aligned (cosine) with prototype 0.
    let h = tape.constant(vec![0.3, 0.9], Shape::Vector(2)).unwrap();
    let pe = repverb_prob_with(&mut tape, h, &labels, 2.0, Similarity::NegEuclidean).unwrap();
    let got = tape.value(pe);
    assert!(got[1] > got[0]);
    assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn mixture_endpoints_are_exact() {
    let mut tape = Tape::new();
    let hard = dist(&mut tape, vec![0.2, 0.4]);
    let soft = dist(&mut tape, vec![0.6, 0.4]);
    let at0 = combined_prob(&mut tape, hard, soft, 0.0).unwrap();
    assert_eq!(tape.value(at0), &[0.2, 0.4][..]);
    let at1 = combined_prob(&mut tape, hard, soft, 1.0).unwrap();
    assert_eq!(tape.value(at1), &[0.6, 0.4][..]);
    let mid = combined_prob(&mut tape, hard, soft, 0.5).unwrap();
    let got = tape.value(mid);
    assert!((got[0] - 0.4).abs() < 1e-15);
    assert!((got[1] - 0.4).abs() < 1e-15);
}

#[test]
fn mixture_weight_must_be_a_probability() {
    let mut tape = Tape::new();
    let hard = dist(&mut tape, vec![0.2, 0.4]);
    let soft = dist(&mut tape, vec![0.6, 0.4]);
    assert!(matches!(combined_prob(&mut tape, hard, soft, -0.1), Err(Error::Config(_))));
    assert!(matches!(combined_prob(&mut tape, hard, soft, 1.1), Err(Error::Config(_))));
}

#[test]
fn training_loss_normalization_modes() {
    // Raw: -log s_t. Normalized: -log(s_t / sum s).
    let mut tape = Tape::new();
    let scores = dist(&mut tape, vec![0.3, 0.1]);
    let raw = combined_nll(&mut tape, scores, 0, false).unwrap();
    assert!((tape.scalar_value(raw) - (-(0.3f64.ln()))).abs() < 1e-15);
    let norm = combined_nll(&mut tape, scores, 0, true).unwrap();
    assert!((tape.scalar_value(norm) - (-((0.3f64 / 0.4).ln()))).abs() < 1e-12);
    // Renormalization is monotone, so it never flips which label is likelier,
    // but it does change the loss value.
    assert!(tape.scalar_value(norm) < tape.scalar_value(raw));
}

#[test]
fn warp_baseline_trains_and_is_deterministic() {
    // A linearly separable 2-class support set in 2-d.
    let support: Vec<(Vec<f64>, usize)> = vec![
        (vec![1.0, 0.1], 0),
        (vec![0.9, -0.2], 0),
        (vec![-0.1, 1.1], 1),
        (vec![0.2, 0.9], 1),
    ];
    let cfg = WarpConfig { steps: 5, lr: 0.5, seed: 7 };
    let head = warp_fit(&support, 2, &cfg).unwrap();
    assert_eq!(head.n_labels, 2);
    assert_eq!(head.dim, 2);
    assert_eq!(head.embeddings.len(), 4);

    let again = warp_fit(&support, 2, &cfg).unwrap();
    assert_eq!(head.embeddings, again.embeddings);
    let other = warp_fit(&support, 2, &WarpConfig { seed: 8, ..cfg }).unwrap();
    assert_ne!(head.embeddings, other.embeddings);

    // Loss decrease: compare support NLL under the trained head against the
    // untrained (0-step) head.
    let nll = |head: &metaprompter_core::verbalizer::WarpHead| -> f64 {
        support
            .iter()
            .map(|(h, y)| -warp_predict(head, h).unwrap()[*y].ln())
            .sum::<f64>()
            / support.len() as f64
    };
    let untrained = warp_fit(&support, 2, &WarpConfig { steps: 5, lr: 0.0, seed: 7 }).unwrap();
    assert!(
        nll(&head) < nll(&untrained),
        "training did not reduce support loss: {} vs {}",
        nll(&head),
        nll(&untrained)
    );
}

#[test]
fn warp_rejects_unseen_labels() {
    let support: Vec<(Vec<f64>, usize)> = vec![(vec![1.0, 0.0], 0)];
    let err = warp_fit(&support, 2, &WarpConfig { steps: 5, lr: 0.5, seed: 1 }).unwrap_err();
    assert!(matches!(err, Error::Episode(_)), "got {err}");
}

#[test]
fn warp_identical_embeddings_predict_uniformly() {
    let head = metaprompter_core::verbalizer::WarpHead {
        embeddings: vec![0.3, -0.4, 0.3, -0.4, 0.3, -0.4],
        n_labels: 3,
        dim: 2,
    };
    let p = warp_predict(&head, &[1.7, 0.4]).unwrap();
    for w in &p {
        assert!((w - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn warp_agrees_with_prototypes_on_the_unit_sphere() {
    // With unit-norm prototypes used as the head and a unit-norm h, the
    // dot-product softmax equals the cosine softmax at rho = 1.
    let inv = 1.0 / 2f64.sqrt();
    let protos = [vec![inv, inv], vec![inv, -inv], vec![0.0, 1.0]];
    let h = vec![1.0, 0.0];

    let head = metaprompter_core::verbalizer::WarpHead {
        embeddings: protos.concat(),
        n_labels: 3,
        dim: 2,
    };
    let from_warp = warp_predict(&head, &h).unwrap();

    let mut tape = Tape::new();
    let rows: Vec<(usize, usize, Vec<f64>)> =
        protos.iter().enumerate().map(|(y, v)| (y, y, v.clone())).collect();
    let samples = embeddings(&mut tape, &rows);
    let labels = compute_label_embeddings(&mut tape, &samples, 3, 0).unwrap();
    let ht = tape.constant(h, Shape::Vector(2)).unwrap();
    let p = repverb_prob(&mut tape, ht, &labels, 1.0).unwrap();
    let from_proto = tape.value(p);
    for (a, b) in from_warp.iter().zip(from_proto) {
        assert!((a - b).abs() < 1e-12, "{from_warp:?} vs {from_proto:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn warp_predictions_are_a_distribution(
        emb in proptest::collection::vec(-2.0f64..2.0, 6),
        h in proptest::collection::vec(-2.0f64..2.0, 2),
    ) {
        let head = metaprompter_core::verbalizer::WarpHead {
            embeddings: emb,
            n_labels: 3,
            dim: 2,
        };
        let p = warp_predict(&head, &h).unwrap();
        prop_assert!(p.iter().all(|&w| w >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hard_scores_stay_in_unit_range(
        raw in proptest::collection::vec(0.0f64..1.0, 6),
    ) {
        let total: f64 = raw.iter().sum::<f64>().max(1e-9);
        let pdist: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let verb = HandVerbalizer::new(vec![vec![0, 1], vec![2, 3, 4]], 6).unwrap();
        let mut tape = Tape::new();
        let d = dist(&mut tape, pdist);
        let p = verb.hard_prob(&mut tape, d).unwrap();
        let got = tape.value(p);
        prop_assert!(got.iter().all(|&x| (0.0..=1.0).contains(&x)));
        // Disjoint token sets: the weighted total mass stays below 1.
        prop_assert!(2.0 * got[0] + 3.0 * got[1] <= 1.0 + 1e-12);
    }
}
