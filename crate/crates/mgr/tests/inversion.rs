//! Recompute-engine equivalence: inversion-based reconstruction against
//! stored activations, the replay fallback, and the memory contract.

use mgr::model::{ModelConfig, ModelParams, Wiring};
use mgr::rng::Rng;
use mgr::tensor::Tensor;
use mgr::train::{mgr_grads_segmented, RecomputeMode, RecomputePlan};

fn cfg_with_depth(n_layers: usize, wiring: Wiring) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model: 16,
        n_heads: 2,
        d_head: 8,
        vocab_size: 64,
        context_len: 8,
        wiring,
        n_stream: 3,
        rope_theta: 10000.0,
        b_base: -3.0,
        l_base: 21.0,
        tie_embeddings: true,
    }
}

fn batch(rng: &mut Rng, n: usize, vocab: usize) -> (Vec<u32>, Vec<u32>) {
    (
        (0..n).map(|_| rng.next_below(vocab) as u32).collect(),
        (0..n).map(|_| rng.next_below(vocab) as u32).collect(),
    )
}

fn plan(mode: RecomputeMode, p: f64) -> RecomputePlan {
    RecomputePlan { mode, p, beta_max: 1.0 - 1e-4 }
}

#[test]
fn p0_double_precision_matches_store_all_tightly() {
    // At init every gate sits well below 0.9, so the pure inversion path
    // must reproduce stored-activation gradients to near machine precision.
    for wiring in [Wiring::MgrCompetitive, Wiring::MgrIndependent] {
        let cfg = cfg_with_depth(3, wiring);
        let params = ModelParams::<f64>::init(&cfg, 31).unwrap();
        let mut rng = Rng::new(7);
        let (tokens, targets) = batch(&mut rng, 2 * 8, 64);

        let store = mgr_grads_segmented(
            &cfg, &params, &tokens, &targets, 2, 8,
            &plan(RecomputeMode::StoreAll, 0.0),
        )
        .unwrap();
        let inv = mgr_grads_segmented(
            &cfg, &params, &tokens, &targets, 2, 8,
            &plan(RecomputeMode::FallbackInversion, 0.0),
        )
        .unwrap();
        assert_eq!(inv.inversion_replays, 0);
        assert!((store.loss - inv.loss).abs() < 1e-12);
        for (pi, (a, b)) in store.grads.iter().zip(&inv.grads).enumerate() {
            for (x, y) in a.iter().zip(b) {
                let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-3);
                assert!(
                    rel < 1e-8,
                    "{wiring:?} param {pi} rel err {rel:.2e}: {x} vs {y}"
                );
            }
        }
    }
}

#[test]
fn p1_bitwise_equality_holds_after_training_drift() {
    // Not just at init: push the params off the zero-query point first.
    let cfg = cfg_with_depth(2, Wiring::MgrCompetitive);
    let mut params = ModelParams::<f32>::init(&cfg, 3).unwrap();
    let mut rng = Rng::new(99);
    let mut opt = mgr::optim::Optimizer::<f32>::new(
        mgr::optim::OptimConfig { adamw_lr: 1e-2, muon_lr: 2e-2, ..Default::default() },
        &params,
    );
    for _ in 0..5 {
        let (tokens, targets) = batch(&mut rng, 2 * 8, 64);
        let sg = mgr_grads_segmented(
            &cfg, &params, &tokens, &targets, 2, 8,
            &plan(RecomputeMode::StoreAll, 0.0),
        )
        .unwrap();
        opt.step(&mut params, &sg.grads, 1.0).unwrap();
    }
    let (tokens, targets) = batch(&mut rng, 2 * 8, 64);
    let store = mgr_grads_segmented(
        &cfg, &params, &tokens, &targets, 2, 8,
        &plan(RecomputeMode::StoreAll, 0.0),
    )
    .unwrap();
    let inv = mgr_grads_segmented(
        &cfg, &params, &tokens, &targets, 2, 8,
        &plan(RecomputeMode::FallbackInversion, 1.0),
    )
    .unwrap();
    assert_eq!(store.loss.to_bits(), inv.loss.to_bits());
    for (a, b) in store.grads.iter().zip(&inv.grads) {
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.to_bits(), y.to_bits(), "p=1 gradients must be bit-identical");
        }
    }
}

#[test]
fn stream_storage_is_depth_independent_under_inversion() {
    let mut stored = Vec::new();
    for depth in [2usize, 4, 6] {
        let cfg = cfg_with_depth(depth, Wiring::MgrCompetitive);
        let params = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let mut rng = Rng::new(depth as u64);
        let (tokens, targets) = batch(&mut rng, 2 * 8, 64);
        let sg = mgr_grads_segmented(
            &cfg, &params, &tokens, &targets, 2, 8,
            &plan(RecomputeMode::FallbackInversion, 0.01),
        )
        .unwrap();
        stored.push(sg.mem.stored_stream_bytes);
        // F and beta storage do scale with depth
        assert!(sg.mem.f_bytes >= depth * 2 * 2 * 8 * 16 * 4);
    }
    assert_eq!(stored[0], stored[1], "stream storage grew with depth");
    assert_eq!(stored[1], stored[2], "stream storage grew with depth");

    // StoreAll, by contrast, grows linearly in depth
    let mut all = Vec::new();
    for depth in [2usize, 4] {
        let cfg = cfg_with_depth(depth, Wiring::MgrCompetitive);
        let params = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let mut rng = Rng::new(depth as u64);
        let (tokens, targets) = batch(&mut rng, 2 * 8, 64);
        let sg = mgr_grads_segmented(
            &cfg, &params, &tokens, &targets, 2, 8,
            &plan(RecomputeMode::StoreAll, 0.0),
        )
        .unwrap();
        all.push(sg.mem.stored_stream_bytes);
    }
    assert!(all[1] > all[0]);
}

#[test]
fn oversized_gates_trigger_replay_and_stay_correct() {
    // Bias the gates of one sublayer to saturation so inversion is unsafe.
    let cfg = cfg_with_depth(2, Wiring::MgrIndependent);
    let mut params = ModelParams::<f64>::init(&cfg, 17).unwrap();
    let i = params.index_of("sub3.gate_bias").unwrap();
    let n = params.entry(i).tensor.numel();
    params.entry_mut(i).tensor = Tensor::full(vec![n], 25.0); // sigmoid ~ 1

    let mut rng = Rng::new(5);
    let (tokens, targets) = batch(&mut rng, 2 * 6, 64);
    let store = mgr_grads_segmented(
        &cfg, &params, &tokens, &targets, 2, 6,
        &plan(RecomputeMode::StoreAll, 0.0),
    )
    .unwrap();
    let inv = mgr_grads_segmented(
        &cfg, &params, &tokens, &targets, 2, 6,
        &plan(RecomputeMode::FallbackInversion, 0.0),
    )
    .unwrap();
    assert!(inv.inversion_replays >= 1, "saturated gate must force a replay");
    for (pi, (a, b)) in store.grads.iter().zip(&inv.grads).enumerate() {
        for (x, y) in a.iter().zip(b) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-3);
            assert!(rel < 1e-8, "param {pi}: {x} vs {y} (rel {rel:.2e})");
        }
    }
}

#[test]
fn retained_rows_cap_reconstruction_error_where_it_matters() {
    // With p > 0 the largest-gate rows are exact; the others reconstruct
    // within the 1/(1-beta) amplification bound in single precision.
    let cfg = cfg_with_depth(3, Wiring::MgrCompetitive);
    let mut params = ModelParams::<f32>::init(&cfg, 23).unwrap();
    // make the gates content-dependent and sizable, but below 0.9
    for s in cfg.growth_steps()..cfg.n_sublayers() {
        let qi = params.index_of(&format!("sub{s}.gate_q")).unwrap();
        let mut rng = Rng::new(s as u64 + 100);
        let d = params.entry(qi).tensor.numel();
        params.entry_mut(qi).tensor = Tensor::from_fn(vec![d], |_| rng.uniform(-0.8, 0.8) as f32);
        let bi = params.index_of(&format!("sub{s}.gate_bias")).unwrap();
        let n = params.entry(bi).tensor.numel();
        params.entry_mut(bi).tensor = Tensor::full(vec![n], 0.5f32);
    }
    let mut rng = Rng::new(55);
    let (tokens, targets) = batch(&mut rng, 2 * 8, 64);
    let store = mgr_grads_segmented(
        &cfg, &params, &tokens, &targets, 2, 8,
        &plan(RecomputeMode::StoreAll, 0.0),
    )
    .unwrap();
    let inv = mgr_grads_segmented(
        &cfg, &params, &tokens, &targets, 2, 8,
        &plan(RecomputeMode::FallbackInversion, 0.05),
    )
    .unwrap();
    assert_eq!(inv.inversion_replays, 0);
    // single-precision reconstruction noise stays far below gradient scale
    let mut worst = 0.0f32;
    for (a, b) in store.grads.iter().zip(&inv.grads) {
        for (x, y) in a.iter().zip(b) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-2);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-3, "reconstruction error leaked into gradients: {worst}");
}

#[test]
fn inversion_round_trip_error_bound_single_precision() {
    // Direct check of the reconstruction bound: for beta <= 0.9 the
    // round-trip error stays within 1e-4 relative in single precision.
    let mut rng = Rng::new(2024);
    for _ in 0..200 {
        let (b, t, n, d) = (2, 3, 4, 8);
        let streams = Tensor::<f32>::from_fn(vec![b, t, n, d], |_| rng.uniform(-2.0, 2.0) as f32);
        let f = Tensor::<f32>::from_fn(vec![b, t, d], |_| rng.uniform(-2.0, 2.0) as f32);
        let beta = Tensor::<f32>::from_fn(vec![b, t, n], |_| rng.uniform(0.0, 0.9) as f32);

        let mut tape = mgr::GradTape::<f32>::new();
        let s_id = tape.leaf(streams.clone(), false);
        let f_id = tape.leaf(f.clone(), false);
        let b_id = tape.leaf(beta.clone(), false);
        let out = tape.lerp_update(s_id, f_id, b_id);
        let new_streams = tape.value(out).clone();

        let rec = mgr::residual::invert_lerp(&new_streams, &f, &beta, 1.0 - 1e-4, true).unwrap();
        for (orig, back) in streams.data().iter().zip(rec.data()) {
            let rel = (orig - back).abs() / orig.abs().max(1.0);
            assert!(rel < 1e-4, "round trip error {rel} ({orig} vs {back})");
        }
    }
}
