use super::*;
use crate::backbone::BackboneDims;
use crate::tensor::grad_check;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn rand_dist(r: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

fn identity_module(f: usize) -> PlmModule {
    let mut w = Param::zeros("tpd/plm0_w", vec![f, f]);
    for j in 0..f {
        w.values[j * f + j] = 1.0;
    }
    PlmModule { w, b: Param::zeros("tpd/plm0_b", vec![f]) }
}

fn small_backbone(r: &mut ChaCha8Rng) -> BackboneParams {
    let dims = BackboneDims { img_hw: 16, patch: 4, feat: 6, classes: 2 };
    BackboneParams::init(dims, r)
}

fn seeded_bank(r: &mut ChaCha8Rng, backbone: &BackboneParams, extra: usize) -> MemoryBank {
    let mut bank = MemoryBank::init(&backbone.classifier_w, 64).unwrap();
    for t in 0..extra {
        let z = rand_vec(r, backbone.dims.feat);
        let p0 = r.random_range(0.05..0.95);
        bank.update(&z, &[p0, 1.0 - p0], t as u64 + 1).unwrap();
    }
    bank
}

// ── centroids ────────────────────────────────────────────────────────

#[test]
fn centroid_of_single_entry_is_its_normalized_map() {
    let f = 4;
    let mut r = rng(1);
    let mut w = Param::uniform("tpd/plm0_w", vec![f, f], 0.5, &mut r);
    for j in 0..f {
        w.values[j * f + j] += 1.0;
    }
    let module = PlmModule { w, b: Param::uniform("tpd/plm0_b", vec![f], 0.1, &mut r) };
    let plm = PlmParams { modules: vec![module], feat: f, centroid_cache: None };

    let clf = Param::new("c", vec![f, 2], {
        let mut v = vec![0.0; f * 2];
        v[0] = 1.0; // class 0 column = e1
        v[3] = 1.0; // class 1 column = e2 (row 1, col 1)
        v
    });
    let bank = MemoryBank::init(&clf, 8).unwrap();
    let cents = compute_centroids(&bank, &plm).unwrap();
    for c in 0..2 {
        let z = &bank.class_entries(c)[0].embedding;
        let expect = normalize_or_same(&linear_map(z, &plm.modules[0].w, &plm.modules[0].b));
        for (a, b) in cents[0][c].iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn identity_map_symmetric_entries_average_to_axis() {
    // entries symmetric about v = e1: centroid ∝ e1 under the identity map
    let f = 3;
    let module = identity_module(f);
    let plm = PlmParams { modules: vec![module], feat: f, centroid_cache: None };
    let clf = Param::new("c", vec![f, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    let mut bank = MemoryBank::init(&clf, 8).unwrap();
    let a = 0.8f64;
    let b = (1.0f64 - a * a).sqrt();
    bank.update(&[a, b, 0.0], &[0.9, 0.1], 1).unwrap();
    bank.update(&[a, -b, 0.0], &[0.9, 0.1], 2).unwrap();
    let cents = compute_centroids(&bank, &plm).unwrap();
    let mu = &cents[0][0];
    assert!((mu[0] - 1.0).abs() <= 1e-12, "centroid {mu:?} not on e1");
    assert!(mu[1].abs() <= 1e-12 && mu[2].abs() <= 1e-12);
}

#[test]
fn centroids_match_scalar_accumulation_oracle() {
    let mut r = rng(2);
    let backbone = small_backbone(&mut r);
    let f = backbone.dims.feat;
    let bank = seeded_bank(&mut r, &backbone, 20);
    let plm = PlmParams::init(2, f, &mut r);
    let cents = compute_centroids(&bank, &plm).unwrap();
    for (i, module) in plm.modules.iter().enumerate() {
        for c in 0..bank.num_classes() {
            let entries = bank.class_entries(c);
            let mut acc = vec![0.0; f];
            for e in entries {
                for o in 0..f {
                    let mut h = module.b.values[o];
                    for j in 0..f {
                        h += e.embedding[j] * module.w.values[j * f + o];
                    }
                    acc[o] += h;
                }
            }
            for v in acc.iter_mut() {
                *v /= entries.len() as f64;
            }
            let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (got, exp) in cents[i][c].iter().zip(&acc) {
                assert!((got - exp / norm).abs() <= 1e-10);
            }
        }
    }
}

// ── prototype probabilities ──────────────────────────────────────────

#[test]
fn proto_probs_exact_match_analytic() {
    // z maps exactly onto μ0; μ1 orthogonal; τ = 1 → softmax([0, −1])
    let f = 3;
    let module = identity_module(f);
    let cents = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
    let p = proto_probs(&module, &[2.0, 0.0, 0.0], &cents, 1.0);
    let e = (-1.0f64).exp();
    assert!((p[0] - 1.0 / (1.0 + e)).abs() <= 1e-12);
    assert!((p[1] - e / (1.0 + e)).abs() <= 1e-12);
    assert!((p[0] - 0.731).abs() < 1e-3);
    assert!((p[1] - 0.269).abs() < 1e-3);
}

#[test]
fn proto_probs_equidistant_is_uniform() {
    let f = 3;
    let module = identity_module(f);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let cents = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
    let p = proto_probs(&module, &[s, s, 0.0], &cents, 0.37);
    assert!((p[0] - 0.5).abs() <= 1e-12);
    assert!((p[1] - 0.5).abs() <= 1e-12);
}

#[test]
fn proto_argmax_invariant_to_temperature() {
    let mut r = rng(3);
    let f = 5;
    let module = identity_module(f);
    for _ in 0..200 {
        let cents = vec![
            normalize_or_same(&rand_vec(&mut r, f)),
            normalize_or_same(&rand_vec(&mut r, f)),
        ];
        let z = rand_vec(&mut r, f);
        let lo = proto_probs(&module, &z, &cents, 0.1);
        let hi = proto_probs(&module, &z, &cents, 10.0);
        assert_eq!(argmax_slice(&lo), argmax_slice(&hi));
    }
}

// ── pseudo-labels ────────────────────────────────────────────────────

#[test]
fn pseudo_label_unanimity_and_split() {
    let f = 3;
    let module = identity_module(f);
    let cents = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
    let nb = |e: Vec<f64>| Neighbor { embedding: e, distance: 0.0, arrival: 0, class: 0 };

    let all_one: Vec<Neighbor> = (0..8).map(|_| nb(vec![0.0, 1.0, 0.0])).collect();
    let p = neighbor_pseudo_label(&module, &all_one, &cents, 1.0).unwrap();
    assert_eq!(p, vec![0.0, 1.0]);

    let mixed: Vec<Neighbor> = (0..8)
        .map(|i| {
            if i % 2 == 0 {
                nb(vec![1.0, 0.0, 0.0])
            } else {
                nb(vec![0.0, 1.0, 0.0])
            }
        })
        .collect();
    let p = neighbor_pseudo_label(&module, &mixed, &cents, 1.0).unwrap();
    assert_eq!(p, vec![0.5, 0.5]);

    assert!(matches!(
        neighbor_pseudo_label(&module, &[], &cents, 1.0),
        Err(GttaError::EmptyNeighborSet)
    ));
}

#[test]
fn pseudo_labels_match_counting_oracle_and_lattice() {
    let mut r = rng(4);
    let f = 4;
    for _ in 0..100 {
        let module = identity_module(f);
        let cents = vec![
            normalize_or_same(&rand_vec(&mut r, f)),
            normalize_or_same(&rand_vec(&mut r, f)),
        ];
        let n = r.random_range(1..=12usize);
        let neighbors: Vec<Neighbor> = (0..n)
            .map(|i| Neighbor {
                embedding: normalize_or_same(&rand_vec(&mut r, f)),
                distance: 0.1,
                arrival: i as u64,
                class: 0,
            })
            .collect();
        let p = neighbor_pseudo_label(&module, &neighbors, &cents, 0.5).unwrap();

        let mut counts = [0usize; 2];
        for nb in &neighbors {
            let probs = proto_probs(&module, &nb.embedding, &cents, 0.5);
            counts[argmax_slice(&probs)] += 1;
        }
        assert_eq!(p[0], counts[0] as f64 / n as f64);
        assert_eq!(p[1], counts[1] as f64 / n as f64);
        assert_eq!(p[0] + p[1], 1.0);
        // lattice membership
        for v in &p {
            let scaled = v * n as f64;
            assert!((scaled - scaled.round()).abs() <= 1e-12);
        }
    }
}

// ── EPD ──────────────────────────────────────────────────────────────

#[test]
fn epd_singleton_equals_plain_kl() {
    let mut r = rng(5);
    let p_row = rand_dist(&mut r, 3);
    let q_row = rand_dist(&mut r, 3);
    let mut tape = Tape::new();
    let p = tape.constant(&[1, 3], p_row.clone()).unwrap();
    let q = tape.constant(&[1, 3], q_row.clone()).unwrap();
    let e = epd(&mut tape, p, q, 1.0, 1e-4).unwrap();
    let kl = tape.kl_divergence(p, q, 1e-4).unwrap();
    assert!((tape.scalar_value(e) - tape.values(kl)[0]).abs() <= 1e-15);
}

#[test]
fn epd_equal_entropy_rows_give_mean_kl() {
    // rows that are permutations of each other share the same entropy
    let p_rows = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.7, 0.2], vec![0.2, 0.1, 0.7]];
    let q_rows = vec![vec![0.3, 0.3, 0.4], vec![0.5, 0.25, 0.25], vec![0.2, 0.6, 0.2]];
    let flat_p: Vec<f64> = p_rows.iter().flatten().copied().collect();
    let flat_q: Vec<f64> = q_rows.iter().flatten().copied().collect();
    let mut tape = Tape::new();
    let p = tape.constant(&[3, 3], flat_p).unwrap();
    let q = tape.constant(&[3, 3], flat_q).unwrap();
    let e = epd(&mut tape, p, q, 1.0, 1e-4).unwrap();
    let kl = tape.kl_divergence(p, q, 1e-4).unwrap();
    let mean_kl: f64 = tape.values(kl).iter().sum::<f64>() / 3.0;
    assert!((tape.scalar_value(e) - mean_kl).abs() <= 1e-9);
}

#[test]
fn epd_weights_follow_batch_softmax_of_entropies() {
    let rows = vec![vec![0.5, 0.5], vec![0.999, 0.001]];
    let h: Vec<f64> = rows.iter().map(|r| entropy_slice(r)).collect();
    let w = epd_weights(&rows, 1.0);
    let oracle0 = h[0].exp() / (h[0].exp() + h[1].exp());
    assert!((w[0] - oracle0).abs() <= 1e-12);
    assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    assert!(w[0] > w[1], "higher entropy row must get the larger weight");
}

#[test]
fn epd_weights_sum_permutation_and_monotonicity() {
    let mut r = rng(6);
    for _ in 0..1000 {
        let k = r.random_range(2..=4usize);
        let b = r.random_range(2..=6usize);
        let rows: Vec<Vec<f64>> = (0..b).map(|_| rand_dist(&mut r, k)).collect();
        let tau = r.random_range(0.2..3.0);
        let w = epd_weights(&rows, tau);
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);

        // permutation equivariance
        let mut perm: Vec<usize> = (0..b).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut r);
        let rows_p: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let w_p = epd_weights(&rows_p, tau);
        for (j, &i) in perm.iter().enumerate() {
            assert!((w_p[j] - w[i]).abs() <= 1e-12);
        }

        // strict monotonicity in entropy
        let h: Vec<f64> = rows.iter().map(|row| entropy_slice(row)).collect();
        for a in 0..b {
            for c in 0..b {
                if h[a] > h[c] {
                    assert!(w[a] > w[c]);
                }
            }
        }
    }
}

// ── ttt loss ─────────────────────────────────────────────────────────

fn ttt_fixture(
    r: &mut ChaCha8Rng,
    batch: usize,
) -> (TpdConfig, BackboneParams, PlmParams, MemoryBank, Vec<Vec<f64>>) {
    let backbone = small_backbone(r);
    let f = backbone.dims.feat;
    let cfg = TpdConfig { n_modules: 2, ..TpdConfig::default() };
    let plm = PlmParams::init(cfg.n_modules, f, r);
    let bank = seeded_bank(r, &backbone, 12);
    let feats: Vec<Vec<f64>> = (0..batch).map(|_| rand_vec(r, f)).collect();
    (cfg, backbone, plm, bank, feats)
}

fn pseudo_for(
    cfg: &TpdConfig,
    bank: &MemoryBank,
    plm: &PlmParams,
    feats: &[Vec<f64>],
) -> Vec<Vec<Vec<f64>>> {
    let cents = compute_centroids(bank, plm).unwrap();
    batch_pseudo_labels(cfg, bank, plm, &cents, feats).unwrap()
}

#[test]
fn ttt_loss_self_consistent_prototypes_reach_clamp_floor() {
    // λ1 = λ2 = 0 and pseudo-labels equal to the prototype predictions: only
    // term 1 remains and it vanishes up to clamping
    let mut r = rng(7);
    let (mut cfg, backbone, plm, bank, feats) = ttt_fixture(&mut r, 3);
    cfg.lambda1 = 0.0;
    cfg.lambda2 = 0.0;

    // compute p_proto values on a probe tape, then feed them back as pseudo-labels
    let mut probe = Tape::new();
    let leaves = TpdLeaves::bind(&mut probe, &backbone, &plm, false).unwrap();
    let pseudo_dummy =
        vec![vec![vec![0.5, 0.5]; feats.len()]; cfg.n_modules];
    let _ = ttt_loss(&mut probe, &cfg, &feats, &leaves, &bank, &pseudo_dummy, None).unwrap();

    // prototype predictions recomputed directly (value level)
    let cents = compute_centroids(&bank, &plm).unwrap();
    let pseudo: Vec<Vec<Vec<f64>>> = plm
        .modules
        .iter()
        .enumerate()
        .map(|(i, m)| {
            feats
                .iter()
                .map(|z| proto_probs(m, z, &cents[i], cfg.tau_proto))
                .collect()
        })
        .collect();

    let mut tape = Tape::new();
    let leaves = TpdLeaves::bind(&mut tape, &backbone, &plm, false).unwrap();
    let (loss, _) = ttt_loss(&mut tape, &cfg, &feats, &leaves, &bank, &pseudo, None).unwrap();
    let v = tape.scalar_value(loss);
    assert!(v.abs() < 1e-3, "self-consistent loss {v}");
}

#[test]
fn ttt_loss_nonnegative_on_random_states() {
    let mut r = rng(8);
    for _ in 0..100 {
        let (cfg, backbone, plm, bank, feats) = ttt_fixture(&mut r, 3);
        let pseudo = pseudo_for(&cfg, &bank, &plm, &feats);
        let mut tape = Tape::new();
        let leaves = TpdLeaves::bind(&mut tape, &backbone, &plm, false).unwrap();
        let (loss, _) = ttt_loss(&mut tape, &cfg, &feats, &leaves, &bank, &pseudo, None).unwrap();
        assert!(tape.scalar_value(loss) >= -1e-6);
    }
}

#[test]
fn ttt_loss_gradcheck_on_frozen_bank() {
    let mut r = rng(9);
    let (cfg, backbone, plm, bank, feats) = ttt_fixture(&mut r, 2);
    let pseudo = pseudo_for(&cfg, &bank, &plm, &feats);

    // capture the EPD weights once so the checked function is the exact
    // differentiable objective
    let mut probe = Tape::new();
    let leaves = TpdLeaves::bind(&mut probe, &backbone, &plm, false).unwrap();
    let (_, weights) =
        ttt_loss(&mut probe, &cfg, &feats, &leaves, &bank, &pseudo, None).unwrap();

    let mut params: Vec<Param> = vec![
        backbone.classifier_w.clone(),
        backbone.classifier_b.clone(),
    ];
    params.extend(plm.params().into_iter().cloned());
    let n_modules = cfg.n_modules;
    let err = grad_check(
        &mut params,
        |tape, ids| {
            let leaves = TpdLeaves {
                clf_w: ids[0],
                clf_b: ids[1],
                plm: (0..n_modules).map(|i| (ids[2 + 2 * i], ids[3 + 2 * i])).collect(),
            };
            let (loss, _) =
                ttt_loss(tape, &cfg, &feats, &leaves, &bank, &pseudo, Some(&weights))?;
            Ok(loss)
        },
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "ttt_loss gradcheck rel err {err}");
}

// ── adaptation ───────────────────────────────────────────────────────

#[test]
fn zero_learning_rates_leave_predictions_bit_identical() {
    let mut r = rng(10);
    let mut backbone = small_backbone(&mut r);
    let frozen = backbone.clone();
    let cfg = TpdConfig {
        clf_lr: 0.0,
        plm_lr: 0.0,
        n_modules: 2,
        ..TpdConfig::default()
    };
    let mut state = TpdState::new(cfg, &backbone, &mut r).unwrap();
    let feats: Vec<Vec<f64>> = (0..5).map(|_| rand_vec(&mut r, backbone.dims.feat)).collect();

    let before = state.bank.total_len();
    let preds = state.adapt_features(&mut backbone, &feats).unwrap();
    let frozen_preds = classifier_probs_values(&frozen, &feats);
    assert_eq!(preds, frozen_preds);
    assert_eq!(state.bank.total_len(), before + feats.len());
    assert_eq!(backbone.classifier_w.values, frozen.classifier_w.values);
    assert_eq!(backbone.classifier_b.values, frozen.classifier_b.values);
}

#[test]
fn adaptation_moves_the_classifier_with_nonzero_lr() {
    let mut r = rng(11);
    let mut backbone = small_backbone(&mut r);
    let initial = backbone.classifier_w.values.clone();
    let cfg = TpdConfig { n_modules: 2, ..TpdConfig::default() };
    let mut state = TpdState::new(cfg, &backbone, &mut r).unwrap();
    let feats: Vec<Vec<f64>> = (0..6).map(|_| rand_vec(&mut r, backbone.dims.feat)).collect();
    state.adapt_features(&mut backbone, &feats).unwrap();
    assert_ne!(backbone.classifier_w.values, initial);
    assert!(state.bank.invariants_hold());
}

#[test]
fn stream_order_changes_bank_contents() {
    let mut r = rng(12);
    let backbone = small_backbone(&mut r);
    let feats: Vec<Vec<f64>> = (0..8).map(|_| rand_vec(&mut r, backbone.dims.feat)).collect();

    let run = |order: &[usize], r: &mut ChaCha8Rng| {
        let mut model = backbone.clone();
        let cfg = TpdConfig { n_modules: 2, ..TpdConfig::default() };
        let mut state = TpdState::new(cfg, &model, r).unwrap();
        for &i in order {
            state.adapt_features(&mut model, &[feats[i].clone()]).unwrap();
        }
        state.bank.to_json().unwrap()
    };
    let mut r1 = rng(77);
    let mut r2 = rng(77);
    let fwd = run(&[0, 1, 2, 3, 4, 5, 6, 7], &mut r1);
    let rev = run(&[7, 6, 5, 4, 3, 2, 1, 0], &mut r2);
    assert_ne!(fwd, rev, "bank must be order-dependent");
}

#[test]
fn adaptation_is_deterministic() {
    let run = || {
        let mut r = rng(13);
        let mut backbone = small_backbone(&mut r);
        let cfg = TpdConfig { n_modules: 2, ..TpdConfig::default() };
        let mut state = TpdState::new(cfg, &backbone, &mut r).unwrap();
        let feats: Vec<Vec<f64>> =
            (0..6).map(|_| rand_vec(&mut r, backbone.dims.feat)).collect();
        let preds = state.adapt_features(&mut backbone, &feats).unwrap();
        (preds, backbone.classifier_w.values.clone())
    };
    let a = run();
    let b = run();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

#[test]
fn predict_score_is_probability_of_class_one() {
    let mut r = rng(14);
    let mut backbone = small_backbone(&mut r);
    backbone.classifier_w.values.iter_mut().for_each(|v| *v = 0.0);
    backbone.classifier_b.values = vec![0.0, 0.0];
    let img: Vec<f64> = (0..crate::synthdata::IMG_C * 16 * 16)
        .map(|_| r.random_range(0.0..1.0))
        .collect();
    let score = tpd_predict_score(&backbone, &img).unwrap();
    assert!((score - 0.5).abs() <= 1e-12);
}

#[test]
fn scores_match_adapt_batch_predictions_when_replayed() {
    let mut r = rng(15);
    let mut backbone = small_backbone(&mut r);
    let cfg = TpdConfig { n_modules: 2, ..TpdConfig::default() };
    let mut state = TpdState::new(cfg, &backbone, &mut r).unwrap();
    let feats: Vec<Vec<f64>> = (0..4).map(|_| rand_vec(&mut r, backbone.dims.feat)).collect();
    let preds = state.adapt_features(&mut backbone, &feats).unwrap();
    // immediately after the batch, the per-sample score replays the batch output
    let replay = classifier_probs_values(&backbone, &feats);
    for (p, q) in preds.iter().zip(&replay) {
        assert_eq!(p[1], q[1]);
    }
}
