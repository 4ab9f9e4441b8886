//! Acceptance suite. Each test checks one numbered criterion at its stated
//! tolerance and prints a pass line; run with
//! `cargo test --test acceptance -- --nocapture` to see them.

mod common;

use std::sync::OnceLock;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use fedklpr::agg::{
    self, cosine_weights, klaw_weights, klpwa_client_weights, praw_weights, sas_aggregate,
    ClientReport, EmptyCoordRule,
};
use fedklpr::config::ExperimentConfig;
use fedklpr::fed::{run_experiment, RunOutput};
use fedklpr::losses::{
    build_bank, camera_aware_loss, inter_loss, intra_loss, kll_from_embeddings, total_loss,
    LossWeights, MemoryBank,
};
use fedklpr::params::{linear_combine, ParamLayer, ParamVector, PruneMask};
use fedklpr::prune::{
    crr_stage1, crr_stage2, CrrState, GateAction, PruneControllerState, PruneGate, Stage1Decision,
    Stage2Decision,
};
use fedklpr::pseudo::{assign_proxies, dbscan, PseudoLabeling};
use fedklpr::report::render_rounds_csv;
use fedklpr::synthdata::evaluate_retrieval;
use fedklpr::wire::{decode, encode, MessageLayer, SparseModelMessage, HEADER_LEN};

use common::*;

// ---------------------------------------------------------------------------
// criterion 1: SAS-dense equivalence
// ---------------------------------------------------------------------------

fn random_params(rng: &mut rand_chacha::ChaCha8Rng, sizes: &[usize]) -> ParamVector {
    ParamVector {
        layers: sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| ParamLayer {
                name: format!("l{i}"),
                shape: vec![n],
                values: (0..n).map(|_| rng.gen_range(-5.0f32..5.0)).collect(),
                prunable: true,
            })
            .collect(),
    }
}

#[test]
fn criterion_1_sas_dense_equivalence() {
    let start = Instant::now();
    let mut r = rng(101);
    for _ in 0..100 {
        let n_layers = r.gen_range(1..=3);
        let sizes: Vec<usize> = (0..n_layers).map(|_| r.gen_range(1..=40)).collect();
        let k = r.gen_range(2..=6);
        let reports: Vec<ClientReport> = (0..k)
            .map(|id| {
                let model = random_params(&mut r, &sizes);
                let mask = PruneMask::all_ones(&model);
                ClientReport {
                    client_id: id as u16,
                    model,
                    mask,
                    pruning_ratio: 0.0,
                    klaw_raw: 0.0,
                    dataset_size: 1,
                }
            })
            .collect();
        let raw: Vec<f64> = (0..k).map(|_| r.gen_range(0.01..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / sum).collect();

        let prev = reports[0].model.zeros_like();
        let sas = sas_aggregate(&reports, &weights, &prev, EmptyCoordRule::Retain).unwrap();
        let terms: Vec<(f64, &ParamVector)> = weights
            .iter()
            .zip(&reports)
            .map(|(&w, rep)| (w, &rep.model))
            .collect();
        let dense = linear_combine(&terms).unwrap();
        for (la, lb) in sas.layers.iter().zip(&dense.layers) {
            for (a, b) in la.values.iter().zip(&lb.values) {
                assert!(
                    (f64::from(*a) - f64::from(*b)).abs() < 1e-9,
                    "sas {a} vs dense {b}"
                );
            }
        }
    }
    assert!(start.elapsed().as_secs_f64() < 5.0);
    println!("criterion 1 (SAS-dense equivalence, 100 instances, <5s): PASS");
}

// ---------------------------------------------------------------------------
// criterion 2: aggregation-weight suite
// ---------------------------------------------------------------------------

fn assert_distribution(w: &[f64], label: &str) {
    assert!(
        w.iter().all(|&x| x >= 0.0),
        "{label}: negative weight {w:?}"
    );
    let sum: f64 = w.iter().sum();
    assert!((sum - 1.0).abs() < 1e-9, "{label}: sum {sum}");
}

#[test]
fn criterion_2_aggregation_weight_suite() {
    let mut r = rng(202);
    for case in 0..1000 {
        let k = r.gen_range(1..=8);
        let zeroed = case % 25 == 0;
        let raw: Vec<f64> = (0..k)
            .map(|_| if zeroed { 0.0 } else { r.gen_range(0.0..3.0) })
            .collect();
        assert_distribution(&klaw_weights(&raw).unwrap(), "klaw");

        let ratios: Vec<f64> = (0..k)
            .map(|_| if zeroed { 0.0 } else { r.gen_range(0.0..1.0) })
            .collect();
        assert_distribution(&praw_weights(&ratios).unwrap(), "praw");

        let gamma = r.gen_range(0.0..=1.0);
        let klaw = klaw_weights(&raw).unwrap();
        let praw = praw_weights(&ratios).unwrap();
        let combined = klpwa_client_weights(&klaw, &praw, gamma, 1.0 - gamma).unwrap();
        assert_distribution(&combined, "klpwa");

        let prev: Vec<Vec<f64>> = (0..k)
            .map(|_| random_unit_rows(&mut r, 1, 6).row(0).to_vec())
            .collect();
        let new: Vec<Vec<f64>> = if zeroed {
            prev.clone()
        } else {
            (0..k)
                .map(|_| random_unit_rows(&mut r, 1, 6).row(0).to_vec())
                .collect()
        };
        assert_distribution(&cosine_weights(&prev, &new).unwrap(), "cosine");
    }
    // squared-ratio hand case, exact within 1e-12
    let w = praw_weights(&[0.3, 0.6]).unwrap();
    assert!((w[0] - 0.2).abs() < 1e-12 && (w[1] - 0.8).abs() < 1e-12);
    println!("criterion 2 (aggregation weights, 1000 random inputs + hand case): PASS");
}

// ---------------------------------------------------------------------------
// criterion 3: gradient suite
// ---------------------------------------------------------------------------

struct LossInstance {
    lab: PseudoLabeling,
    bank: MemoryBank,
    emb: Array2<f64>,
    proxies: Vec<usize>,
    cams: Vec<usize>,
    k_hard: usize,
}

fn random_loss_instance(seed: u64) -> LossInstance {
    let mut r = rng(seed);
    let d = r.gen_range(4..=16);
    let n_cams = r.gen_range(2..=3);
    let n_pids: i32 = r.gen_range(2..=4);
    // one sample per (pid, camera) pair, each pid under at least one camera
    let mut pids = Vec::new();
    let mut cams = Vec::new();
    for pid in 0..n_pids {
        let mut used = false;
        for cam in 0..n_cams {
            if pids.len() < 12 && (r.gen_bool(0.7) || (!used && cam == n_cams - 1)) {
                pids.push(pid);
                cams.push(cam);
                used = true;
            }
        }
    }
    let lab = assign_proxies(&pids, &cams).unwrap();
    let tau = if r.gen_bool(0.5) { 0.05 } else { 0.2 };
    let all_emb = random_unit_rows(&mut r, pids.len(), d);
    let bank = build_bank(&all_emb, &lab, 0.2, tau).unwrap();

    let mut order: Vec<usize> = (0..pids.len()).collect();
    order.shuffle(&mut r);
    let b = order.len().min(8);
    let batch: Vec<usize> = order.into_iter().take(b).collect();
    LossInstance {
        emb: random_matrix(&mut r, b, d, 0.8),
        proxies: batch.iter().map(|&i| lab.proxy[i].unwrap()).collect(),
        cams: batch.iter().map(|&i| lab.camera_idx[i]).collect(),
        k_hard: if r.gen_bool(0.5) { 2 } else { 12 },
        lab,
        bank,
    }
}

#[test]
fn criterion_3_gradient_suite() {
    let start = Instant::now();
    let h = 1e-4;
    let weights = LossWeights {
        alpha: 1.0,
        beta: 1.0,
        gamma_ca: 0.5,
        delta_kl: 0.13,
        k_hard: 0, // unused below; per-loss k passed explicitly
    };
    for seed in 0..20u64 {
        let inst = random_loss_instance(1000 + seed);
        let LossInstance {
            lab,
            bank,
            emb,
            proxies,
            cams,
            k_hard,
        } = &inst;

        let ref_dist = {
            let mut r = rng(seed * 7 + 3);
            let rows = random_unit_rows(&mut r, 4, emb.ncols());
            agg::feature_distribution(&rows).unwrap()
        };

        let check_value = |v: f64, label: &str| {
            assert!(v.is_finite() && v >= -1e-12, "{label}: loss value {v}");
        };

        let (v, g) = intra_loss(bank, emb, proxies, cams, lab).unwrap();
        check_value(v, "intra");
        let fd = fd_embedding_grad(
            |e| intra_loss(bank, e, proxies, cams, lab).unwrap().0,
            emb,
            h,
        );
        assert_grads_close(&g, &fd, &format!("intra seed {seed}"));

        let (v, g) = inter_loss(bank, emb, proxies, lab, *k_hard).unwrap();
        check_value(v, "inter");
        let fd = fd_embedding_grad(
            |e| inter_loss(bank, e, proxies, lab, *k_hard).unwrap().0,
            emb,
            h,
        );
        assert_grads_close(&g, &fd, &format!("inter seed {seed}"));

        let (v, g) = camera_aware_loss(bank, emb, proxies, cams, lab, *k_hard).unwrap();
        check_value(v, "camera-aware");
        let fd = fd_embedding_grad(
            |e| {
                camera_aware_loss(bank, e, proxies, cams, lab, *k_hard)
                    .unwrap()
                    .0
            },
            emb,
            h,
        );
        assert_grads_close(&g, &fd, &format!("camera-aware seed {seed}"));

        let (v, g) = kll_from_embeddings(emb, &ref_dist).unwrap();
        check_value(v, "kll");
        let fd = fd_embedding_grad(|e| kll_from_embeddings(e, &ref_dist).unwrap().0, emb, h);
        assert_grads_close(&g, &fd, &format!("kll seed {seed}"));

        let total_of = |e: &Array2<f64>| {
            let intra = intra_loss(bank, e, proxies, cams, lab).unwrap();
            let inter = inter_loss(bank, e, proxies, lab, *k_hard).unwrap();
            let ca = camera_aware_loss(bank, e, proxies, cams, lab, *k_hard).unwrap();
            let kl = kll_from_embeddings(e, &ref_dist).unwrap();
            total_loss(&weights, &intra, &inter, &ca, &kl)
        };
        let (_, g) = total_of(emb);
        let fd = fd_embedding_grad(|e| total_of(e).0, emb, h);
        assert_grads_close(&g, &fd, &format!("total seed {seed}"));

        // the same total objective chained through a network: analytic
        // parameter gradients vs finite differences over every coordinate.
        // tanh keeps the chain smooth; relu nets with zero biases can park
        // whole rows on the norm guard, which is not differentiable there.
        if seed < 5 {
            use fedklpr::nnet::{backward, forward, init_params, Activation, NetConfig};
            let mut r = rng(9000 + seed);
            let net = NetConfig {
                input_dim: 5,
                hidden_dims: vec![6],
                embed_dim: emb.ncols(),
                activation: Activation::Tanh,
                seed: 50 + seed,
            };
            let params = init_params(&net);
            let batch = random_matrix(&mut r, emb.nrows(), 5, 1.0);
            let loss_of = |p: &ParamVector| total_of(&forward(&net, p, &batch).unwrap()).0;
            let grad_emb = total_of(&forward(&net, &params, &batch).unwrap()).1;
            let analytic = backward(&net, &params, &batch, &grad_emb).unwrap();
            for li in 0..params.layers.len() {
                for ci in 0..params.layers[li].values.len() {
                    let orig = params.layers[li].values[ci];
                    let mut plus = params.clone();
                    plus.layers[li].values[ci] = (f64::from(orig) + h) as f32;
                    let mut minus = params.clone();
                    minus.layers[li].values[ci] = (f64::from(orig) - h) as f32;
                    let span = f64::from(plus.layers[li].values[ci])
                        - f64::from(minus.layers[li].values[ci]);
                    let fd = (loss_of(&plus) - loss_of(&minus)) / span;
                    let a = f64::from(analytic.layers[li].values[ci]);
                    let tol = 1e-4 * a.abs().max(fd.abs()) + 1e-7;
                    assert!(
                        (a - fd).abs() <= tol,
                        "chain seed {seed} layer {li} coord {ci}: {a} vs {fd}"
                    );
                }
            }
        }
    }
    assert!(start.elapsed().as_secs_f64() < 60.0);
    println!("criterion 3 (gradient suite, 20 seeded instances + net chain, rel 1e-4, <60s): PASS");
}

// ---------------------------------------------------------------------------
// criterion 4: DBSCAN oracle
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_dbscan_oracle() {
    let start = Instant::now();
    let mut r = rng(404);
    for case in 0..200 {
        let n = r.gen_range(2..=64);
        let dim = r.gen_range(1..=3);
        // mixture of blob draws and uniform scatter
        let points = if case % 2 == 0 {
            let n_centers = r.gen_range(1..=4);
            let centers = random_matrix(&mut r, n_centers, dim, 3.0);
            Array2::from_shape_fn((n, dim), |(i, j)| {
                centers[[i % centers.nrows(), j]] + r.gen_range(-0.4..0.4)
            })
        } else {
            random_matrix(&mut r, n, dim, 2.5)
        };
        let eps = r.gen_range(0.3..1.5);
        let min_pts = r.gen_range(1..=5);
        let labels = dbscan(&points, eps, min_pts).unwrap();
        let oracle = reachability_oracle(&points, eps, min_pts);
        check_labels_against_oracle(&labels, &oracle).unwrap_or_else(|e| {
            panic!("case {case} (n={n}, eps={eps:.2}, min_pts={min_pts}): {e}")
        });
    }
    assert!(start.elapsed().as_secs_f64() < 30.0);
    println!("criterion 4 (DBSCAN vs brute-force reachability, 200 instances, <30s): PASS");
}

// ---------------------------------------------------------------------------
// criterion 5: CRR truth table
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_crr_truth_table() {
    // stage-1 branches
    let mut s = CrrState::new(0.55, 0.01, 0.03, 3);
    assert_eq!(crr_stage1(&mut s, 0.50), Stage1Decision::Skip); // 1: below threshold
    assert_eq!(crr_stage1(&mut s, 0.70), Stage1Decision::Skip); // 2: window not full
    assert_eq!(crr_stage1(&mut s, 0.70), Stage1Decision::Skip); // 3: last jump 0.20
    assert_eq!(crr_stage1(&mut s, 0.704), Stage1Decision::ProceedToPrune); // 4: plateau
    assert_eq!(s.pre_prune_acc, Some(0.704));

    // 5: improving run skips even above the threshold
    let mut s = CrrState::new(0.55, 0.01, 0.03, 3);
    for acc in [0.60, 0.65, 0.70] {
        assert_eq!(crr_stage1(&mut s, acc), Stage1Decision::Skip);
    }

    // stage-2 branches
    let mut s = CrrState::new(0.55, 0.01, 0.03, 3);
    s.pre_prune_acc = Some(0.70);
    assert_eq!(crr_stage2(&mut s, 0.69).unwrap(), Stage2Decision::Commit); // 6
    s.pre_prune_acc = Some(0.70);
    assert_eq!(crr_stage2(&mut s, 0.64).unwrap(), Stage2Decision::Rollback); // 7
    s.pre_prune_acc = Some(0.70);
    assert_eq!(crr_stage2(&mut s, 0.75).unwrap(), Stage2Decision::Commit); // 8: improvement
    assert!(crr_stage2(&mut s, 0.5).is_err()); // 9: protocol order

    // 10: saturation halving after two consecutive rollbacks
    let gate = || {
        PruneGate::new(
            CrrState::new(0.55, 0.01, 0.03, 2),
            PruneControllerState::new(0.70, 0.08, 10),
        )
    };
    let mut g = gate();
    assert_eq!(g.begin_round(0.80), GateAction::Skip); // window fills
    match g.begin_round(0.805) {
        GateAction::Prune { target } => assert!((target - 0.08).abs() < 1e-12),
        other => panic!("expected prune, got {other:?}"),
    }
    let d = g.stage2(0.60).unwrap(); // drop 0.205 >= 0.03
    assert_eq!(d, Stage2Decision::Rollback);
    g.record_outcome(d, 0.0);
    match g.begin_round(0.806) {
        GateAction::Prune { target } => assert!((target - 0.08).abs() < 1e-12),
        other => panic!("expected prune, got {other:?}"),
    }
    let d = g.stage2(0.55).unwrap();
    assert_eq!(d, Stage2Decision::Rollback);
    g.record_outcome(d, 0.0);
    assert!((g.controller.current_increment - 0.04).abs() < 1e-12);
    match g.begin_round(0.807) {
        GateAction::Prune { target } => assert!((target - 0.04).abs() < 1e-12), // 11: halved target
        other => panic!("expected prune, got {other:?}"),
    }

    // 12: evaluation-epoch exhaustion halts
    let mut g = PruneGate::new(
        CrrState::new(0.55, 0.01, 0.03, 2),
        PruneControllerState::new(0.70, 0.09, 2),
    );
    assert_eq!(g.begin_round(0.80), GateAction::Skip);
    for round in 0..2 {
        match g.begin_round(0.80) {
            GateAction::Prune { .. } => {
                let d = g.stage2(0.795).unwrap();
                assert_eq!(d, Stage2Decision::Commit);
                g.record_outcome(d, 0.09 * (round + 1) as f64);
            }
            other => panic!("expected prune, got {other:?}"),
        }
    }
    assert_eq!(g.begin_round(0.80), GateAction::Halted);

    // 13: reaching the 70% target halts
    let mut g = PruneGate::new(
        CrrState::new(0.55, 0.01, 0.03, 2),
        PruneControllerState::new(0.70, 0.09, 100),
    );
    assert_eq!(g.begin_round(0.90), GateAction::Skip);
    let mut ratio = 0.0;
    let mut rounds = 0;
    loop {
        rounds += 1;
        assert!(rounds < 50, "never reached the target");
        match g.begin_round(0.90) {
            GateAction::Prune { target } => {
                let d = g.stage2(0.895).unwrap();
                g.record_outcome(d, target);
                ratio = target;
            }
            GateAction::Halted => break,
            GateAction::Skip => panic!("unexpected skip"),
        }
    }
    assert!((ratio - 0.70).abs() < 1e-12);
    assert_eq!(g.begin_round(0.99), GateAction::Halted); // stays halted

    // 14: replaying a mixed trace gives identical decision sequences
    let script: Vec<(f64, f64)> = vec![
        (0.40, 0.0),
        (0.60, 0.0),
        (0.605, 0.58),
        (0.606, 0.40),
        (0.607, 0.60),
        (0.608, 0.606),
        (0.608, 0.607),
    ];
    let replay = || {
        let mut g = PruneGate::new(
            CrrState::new(0.55, 0.01, 0.03, 3),
            PruneControllerState::new(0.70, 0.09, 10),
        );
        let mut log = Vec::new();
        for &(acc, post) in &script {
            match g.begin_round(acc) {
                GateAction::Prune { target } => {
                    let d = g.stage2(post).unwrap();
                    g.record_outcome(
                        d,
                        if d == Stage2Decision::Commit {
                            target
                        } else {
                            0.0
                        },
                    );
                    log.push(format!("prune {target:.3} {d:?}"));
                }
                other => log.push(format!("{other:?}")),
            }
        }
        log
    };
    assert_eq!(replay(), replay());
    println!("criterion 5 (CRR truth table, 14 scripted cases): PASS");
}

// ---------------------------------------------------------------------------
// criterion 6: wire format
// ---------------------------------------------------------------------------

fn random_message(r: &mut rand_chacha::ChaCha8Rng) -> SparseModelMessage {
    let n_layers = r.gen_range(0..=4);
    let layers = (0..n_layers)
        .map(|i| {
            let rows = r.gen_range(1..=8);
            let cols = r.gen_range(1..=8);
            let n = rows * cols;
            let bits: Vec<bool> = (0..n).map(|_| r.gen_bool(0.6)).collect();
            let values: Vec<f32> = bits
                .iter()
                .filter(|b| **b)
                .map(|_| r.gen_range(-10.0f32..10.0))
                .collect();
            MessageLayer {
                name: format!("layer{i}"),
                shape: vec![rows, cols],
                bits,
                values,
            }
        })
        .collect();
    SparseModelMessage {
        client_id: r.gen(),
        round: r.gen(),
        pruning_ratio: r.gen_range(0.0..1.0),
        klaw_raw: r.gen_range(0.0..2.0),
        layers,
    }
}

#[test]
fn criterion_6_wire_format() {
    let mut r = rng(606);
    for _ in 0..1000 {
        let msg = random_message(&mut r);
        let bytes = encode(&msg);
        let back = decode(&bytes).expect("valid message decodes");
        assert_eq!(back, msg);
        assert_eq!(encode(&back), bytes, "re-encode is bit-exact");
    }
    // corrupted and random inputs never crash
    for _ in 0..1000 {
        let msg = random_message(&mut r);
        let mut bytes = encode(&msg);
        if !bytes.is_empty() {
            for _ in 0..r.gen_range(1..=4) {
                let i = r.gen_range(0..bytes.len());
                bytes[i] = r.gen();
            }
        }
        let _ = decode(&bytes);
        let soup: Vec<u8> = (0..r.gen_range(0..200)).map(|_| r.gen()).collect();
        let _ = decode(&soup);
    }
    // 1000-value layer at 70% sparsity: 125 mask bytes + 300 * 4 value bytes
    let bits: Vec<bool> = (0..1000).map(|i| i % 10 >= 7).collect();
    let values: Vec<f32> = (0..300).map(|i| i as f32).collect();
    let msg = SparseModelMessage {
        client_id: 0,
        round: 0,
        pruning_ratio: 0.7,
        klaw_raw: 0.0,
        layers: vec![MessageLayer {
            name: "w".into(),
            shape: vec![40, 25],
            bits,
            values,
        }],
    };
    let len = encode(&msg).len();
    let layer_meta = 2 + 1 + 1 + 2 * 4; // name_len, name, rank, dims
    assert_eq!(len - HEADER_LEN - layer_meta - 4, 1325);
    println!("criterion 6 (wire round-trips, 1325-byte case, fuzz safety): PASS");
}

// ---------------------------------------------------------------------------
// criterion 7: metrics oracle
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_metrics_oracle() {
    let mut r = rng(707);
    let mut checked = 0;
    while checked < 100 {
        let n_ids = r.gen_range(2..=12);
        let n_cams = r.gen_range(2..=4);
        let gallery_n = r.gen_range(4..=200);
        let query_n = r.gen_range(1..=50);
        let n = gallery_n + query_n;
        let d = r.gen_range(2..=8);
        let emb = random_unit_rows(&mut r, n, d);
        let ids: Vec<usize> = (0..n).map(|_| r.gen_range(0..n_ids)).collect();
        let cams: Vec<usize> = (0..n).map(|_| r.gen_range(0..n_cams)).collect();
        let is_query: Vec<bool> = (0..n).map(|i| i < query_n).collect();

        let oracle = brute_force_retrieval(&emb, &ids, &cams, &is_query);
        let got = evaluate_retrieval(&emb, &ids, &cams, &is_query);
        match (oracle, got) {
            (None, Err(_)) => continue, // degenerate draw, not counted
            (Some(o), Ok(m)) => {
                assert!(
                    (o.rank1 - m.rank1).abs() < 1e-12,
                    "{} vs {}",
                    o.rank1,
                    m.rank1
                );
                assert!((o.map - m.map).abs() < 1e-12, "{} vs {}", o.map, m.map);
                assert_eq!(o.cmc.len(), m.cmc.len());
                for (a, b) in o.cmc.iter().zip(&m.cmc) {
                    assert!((a - b).abs() < 1e-12);
                }
                assert_eq!(m.cmc[0], m.rank1);
                checked += 1;
            }
            (o, g) => panic!(
                "oracle and implementation disagree on validity: {:?} vs {:?}",
                o.is_some(),
                g.is_ok()
            ),
        }
    }
    // AP hand case: relevant items at ranks 1 and 3
    let emb = ndarray::array![
        [1.0, 0.0],
        [0.99, (1.0f64 - 0.9801).sqrt()],
        [0.9, (1.0f64 - 0.81).sqrt()],
        [0.8, (1.0f64 - 0.64).sqrt()],
    ];
    let m = evaluate_retrieval(
        &emb,
        &[1, 1, 2, 1],
        &[0, 1, 1, 1],
        &[true, false, false, false],
    )
    .unwrap();
    assert!((m.map - (0.5 * (1.0 + 2.0 / 3.0))).abs() < 1e-9);
    println!("criterion 7 (metrics vs brute force, 100 instances + AP hand case): PASS");
}

// ---------------------------------------------------------------------------
// criteria 8 and 9: the desk experiment and determinism
// ---------------------------------------------------------------------------

fn desk_config() -> ExperimentConfig {
    // the shipped defaults are the desk-scale shape: 8 clients, 20 rounds,
    // 5 local epochs, delta_kl 0.13, 70% target, 9% cap, 10 eval epochs
    let cfg = ExperimentConfig::default();
    assert_eq!(cfg.clients, 8);
    assert_eq!(cfg.rounds, 20);
    assert_eq!(cfg.local_epochs, 5);
    assert!((cfg.losses.delta_kl - 0.13).abs() < 1e-12);
    assert!((cfg.pruning.target_ratio - 0.70).abs() < 1e-12);
    assert!((cfg.pruning.per_event_cap - 0.09).abs() < 1e-12);
    assert_eq!(cfg.pruning.eval_epochs_max, 10);
    cfg
}

static PRUNED_RUN: OnceLock<RunOutput> = OnceLock::new();
static DENSE_RUN: OnceLock<RunOutput> = OnceLock::new();

fn pruned_run() -> &'static RunOutput {
    PRUNED_RUN.get_or_init(|| run_experiment(&desk_config()).unwrap())
}

fn dense_run() -> &'static RunOutput {
    DENSE_RUN.get_or_init(|| {
        let mut cfg = desk_config();
        cfg.pruning.enabled = false;
        run_experiment(&cfg).unwrap()
    })
}

#[test]
fn criterion_8_end_to_end_desk_experiment() {
    let start = Instant::now();
    let pruned = pruned_run();
    let dense = dense_run();
    let last = pruned.records.last().unwrap();

    // (a) at least 6 of 8 clients reach a pruning ratio of 0.60
    let reached = last
        .clients
        .iter()
        .filter(|c| c.pruning_ratio >= 0.60)
        .count();
    assert!(reached >= 6, "only {reached} clients reached 0.60");

    // (b) mean final rank-1 drop vs the identical-seed dense run <= 2 points
    let mean_rank1 = |run: &RunOutput| {
        let last = run.records.last().unwrap();
        last.clients.iter().map(|c| c.rank1).sum::<f64>() / last.clients.len() as f64
    };
    let drop = mean_rank1(dense) - mean_rank1(pruned);
    assert!(drop <= 0.02, "rank-1 drop {drop}");

    // (c) total upload bytes reduced by at least 20% vs the dense run
    let upload = |run: &RunOutput| -> u64 {
        run.records
            .iter()
            .flat_map(|r| r.clients.iter().map(|c| c.upload_bytes))
            .sum()
    };
    let reduction = 1.0 - upload(pruned) as f64 / upload(dense) as f64;
    assert!(reduction >= 0.20, "upload reduction {reduction}");

    assert!(start.elapsed().as_secs_f64() < 600.0);
    println!(
        "criterion 8 (desk experiment: {reached}/8 clients >= 0.60, rank-1 drop {drop:.4}, upload -{:.1}%, <10min): PASS",
        100.0 * reduction
    );
}

#[test]
fn criterion_9_determinism() {
    let cfg = desk_config();
    let first = pruned_run();
    let second = run_experiment(&cfg).unwrap();
    assert_eq!(
        render_rounds_csv(&first.records),
        render_rounds_csv(&second.records),
        "two sequential executions differ"
    );
    assert_eq!(first.final_global, second.final_global);

    let mut par_cfg = cfg.clone();
    par_cfg.parallel_clients = true;
    let parallel = run_experiment(&par_cfg).unwrap();
    assert_eq!(
        render_rounds_csv(&first.records),
        render_rounds_csv(&parallel.records),
        "parallel-client mode diverged from sequential"
    );
    assert_eq!(first.final_global, parallel.final_global);
    println!("criterion 9 (byte-identical reruns, parallel == sequential): PASS");
}
