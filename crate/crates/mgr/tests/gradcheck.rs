//! Finite-difference verification of every tape primitive and of the gated
//! residual update, in double precision.

use mgr::check::{finite_diff_grad, max_rel_err, FD_STEP};
use mgr::model::{
    forward_on_tape, Binder, ForwardOpts, ModelConfig, ModelParams, Wiring,
};
use mgr::residual::{
    attnpool, gates_competitive, gates_independent, mgr_forward, GateVariant, MgrParamIds,
};
use mgr::rng::Rng;
use mgr::tape::{GradTape, NodeId};
use mgr::tensor::Tensor;

/// Build a loss from `inputs` on a fresh tape, then compare every analytic
/// input gradient against central finite differences.
fn check_inputs(
    name: &str,
    build: &dyn Fn(&mut GradTape<f64>, &[NodeId]) -> NodeId,
    inputs: &[Tensor<f64>],
    tol: f64,
) {
    let mut tape = GradTape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &ids);
    tape.backward(loss).unwrap();

    for (i, x) in inputs.iter().enumerate() {
        let analytic = tape.grad(ids[i]).expect("missing gradient");
        let mut eval = |probe: &Tensor<f64>| {
            let mut tp = GradTape::new();
            let ids: Vec<NodeId> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| tp.leaf(if j == i { probe.clone() } else { t.clone() }, false))
                .collect();
            let l = build(&mut tp, &ids);
            tp.value(l).item()
        };
        let numeric = finite_diff_grad(&mut eval, x, FD_STEP);
        let err = max_rel_err(analytic.data(), numeric.data());
        assert!(err < tol, "{name}: input {i} rel err {err:.3e} >= {tol:.0e}");
    }
}

fn rand_t(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform(-2.0, 2.0))
}

/// Weighted sum so the loss is sensitive to every output component.
fn weighted_sum(tape: &mut GradTape<f64>, out: NodeId, seed: u64) -> NodeId {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = Rng::new(seed);
    let w = tape.constant(Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0)));
    let prod = tape.mul(out, w);
    tape.sum(prod)
}

#[test]
fn elementwise_and_reduction_primitives() {
    let mut rng = Rng::new(100);
    let a = rand_t(&mut rng, &[3, 4]);
    let b = rand_t(&mut rng, &[3, 4]);

    check_inputs(
        "add",
        &|t, ids| {
            let y = t.add(ids[0], ids[1]);
            weighted_sum(t, y, 1)
        },
        &[a.clone(), b.clone()],
        1e-6,
    );
    check_inputs(
        "sub",
        &|t, ids| {
            let y = t.sub(ids[0], ids[1]);
            weighted_sum(t, y, 2)
        },
        &[a.clone(), b.clone()],
        1e-6,
    );
    check_inputs(
        "mul",
        &|t, ids| {
            let y = t.mul(ids[0], ids[1]);
            weighted_sum(t, y, 3)
        },
        &[a.clone(), b.clone()],
        1e-6,
    );
    check_inputs(
        "scale+mean",
        &|t, ids| {
            let y = t.scale(ids[0], -1.7);
            t.mean(y)
        },
        &[a.clone()],
        1e-6,
    );
    check_inputs(
        "reuse-accumulation",
        &|t, ids| {
            let y = t.mul(ids[0], ids[0]);
            t.sum(y)
        },
        &[a.clone()],
        1e-6,
    );
    check_inputs(
        "sigmoid",
        &|t, ids| {
            let y = t.sigmoid(ids[0]);
            weighted_sum(t, y, 4)
        },
        &[a.clone()],
        1e-6,
    );
    // keep relu^2 probes away from the kink at zero
    let off = a.map(|v| if v.abs() < 0.1 { v + 0.5 } else { v });
    check_inputs(
        "relu_squared",
        &|t, ids| {
            let y = t.relu_squared(ids[0]);
            weighted_sum(t, y, 5)
        },
        &[off],
        1e-6,
    );
}

#[test]
fn lastdim_primitives() {
    let mut rng = Rng::new(200);
    let x = rand_t(&mut rng, &[2, 3, 6]);
    let bias = rand_t(&mut rng, &[6]);
    let w = rand_t(&mut rng, &[6]);

    check_inputs(
        "add_bias_last",
        &|t, ids| {
            let y = t.add_bias_last(ids[0], ids[1]);
            weighted_sum(t, y, 6)
        },
        &[x.clone(), bias.clone()],
        1e-6,
    );
    check_inputs(
        "mul_gain_last",
        &|t, ids| {
            let y = t.mul_gain_last(ids[0], ids[1]);
            weighted_sum(t, y, 7)
        },
        &[x.clone(), bias.clone()],
        1e-6,
    );
    check_inputs(
        "dot_last",
        &|t, ids| {
            let y = t.dot_last(ids[0], ids[1]);
            weighted_sum(t, y, 8)
        },
        &[x.clone(), w.clone()],
        1e-6,
    );
    check_inputs(
        "rms_norm",
        &|t, ids| {
            let y = t.rms_norm(ids[0], 1e-6);
            weighted_sum(t, y, 9)
        },
        &[x.clone()],
        1e-6,
    );
    check_inputs(
        "softmax_last",
        &|t, ids| {
            let y = t.softmax_last(ids[0]);
            weighted_sum(t, y, 10)
        },
        &[x.clone()],
        1e-6,
    );
    check_inputs(
        "pad+narrow",
        &|t, ids| {
            let p = t.pad_front_last(ids[0]);
            let n = t.narrow_last(p, 1, 4);
            weighted_sum(t, n, 11)
        },
        &[x.clone()],
        1e-6,
    );
}

#[test]
fn linear_and_embedding_primitives() {
    let mut rng = Rng::new(300);
    let x = rand_t(&mut rng, &[2, 3, 5]);
    let w = rand_t(&mut rng, &[5, 4]);
    let wt = rand_t(&mut rng, &[4, 5]);
    let table = rand_t(&mut rng, &[7, 5]);

    check_inputs(
        "linear",
        &|t, ids| {
            let y = t.linear(ids[0], ids[1]);
            weighted_sum(t, y, 12)
        },
        &[x.clone(), w.clone()],
        1e-6,
    );
    check_inputs(
        "linear_t",
        &|t, ids| {
            let y = t.linear_t(ids[0], ids[1]);
            weighted_sum(t, y, 13)
        },
        &[x.clone(), wt.clone()],
        1e-6,
    );
    check_inputs(
        "embed",
        &|t, ids| {
            let y = t.embed(ids[0], &[1, 6, 1, 0, 3, 2], 2, 3);
            weighted_sum(t, y, 14)
        },
        &[table.clone()],
        1e-6,
    );
    check_inputs(
        "cross_entropy",
        &|t, ids| t.cross_entropy(ids[0], &[2, 0, 3, 1, 1, 0]),
        &[rand_t(&mut rng, &[2, 3, 4])],
        1e-6,
    );
}

#[test]
fn attention_primitives() {
    let mut rng = Rng::new(400);
    let (b, h, tt, dh) = (2, 2, 4, 4);
    let q = rand_t(&mut rng, &[b, h, tt, dh]);
    let k = rand_t(&mut rng, &[b, h, tt, dh]);
    let v = rand_t(&mut rng, &[b, h, tt, dh]);
    let x = rand_t(&mut rng, &[b, tt, h * dh]);

    check_inputs(
        "split+merge heads",
        &|t, ids| {
            let s = t.split_heads(ids[0], 2);
            let m = t.merge_heads(s);
            weighted_sum(t, m, 15)
        },
        &[x.clone()],
        1e-6,
    );
    check_inputs(
        "rope",
        &|t, ids| {
            let y = t.rope(ids[0], 10000.0);
            weighted_sum(t, y, 16)
        },
        &[q.clone()],
        1e-6,
    );
    check_inputs(
        "causal attention chain",
        &|t, ids| {
            let scale = 1.0 / (dh as f64).sqrt();
            let s = t.causal_scores(ids[0], ids[1], scale);
            let p = t.causal_softmax(s);
            let o = t.attn_mix(p, ids[2]);
            weighted_sum(t, o, 17)
        },
        &[q.clone(), k.clone(), v.clone()],
        1e-6,
    );
}

#[test]
fn pool_history_gradients() {
    let mut rng = Rng::new(500);
    let xs: Vec<Tensor<f64>> = (0..3).map(|_| rand_t(&mut rng, &[2, 3, 5])).collect();
    let q = rand_t(&mut rng, &[5]);
    let mut inputs = xs.clone();
    inputs.push(q);
    check_inputs(
        "pool_history",
        &|t, ids| {
            let y = t.pool_history(&ids[..3], ids[3], 1e-6);
            weighted_sum(t, y, 18)
        },
        &inputs,
        1e-6,
    );
}

#[test]
fn stream_update_primitives() {
    let mut rng = Rng::new(600);
    let s = rand_t(&mut rng, &[2, 2, 3, 4]);
    let f = rand_t(&mut rng, &[2, 2, 4]);
    let beta = Tensor::from_fn(vec![2, 2, 3], |_| rng.uniform(0.05, 0.95));
    let alpha = rand_t(&mut rng, &[2, 2, 3]);

    check_inputs(
        "concat_stream",
        &|t, ids| {
            let y = t.concat_stream(ids[0], ids[1]);
            weighted_sum(t, y, 19)
        },
        &[s.clone(), f.clone()],
        1e-6,
    );
    check_inputs(
        "lerp_update",
        &|t, ids| {
            let y = t.lerp_update(ids[0], ids[1], ids[2]);
            weighted_sum(t, y, 20)
        },
        &[s.clone(), f.clone(), beta.clone()],
        1e-6,
    );
    check_inputs(
        "stream_pool",
        &|t, ids| {
            let y = t.stream_pool(ids[0], ids[1]);
            weighted_sum(t, y, 21)
        },
        &[s.clone(), alpha.clone()],
        1e-6,
    );
}

/// Criterion-level check: full gated-residual update gradients for both
/// variants at (B, T, N, D) = (2, 3, 4, 8), w.r.t. streams, layer output,
/// both queries and the gate bias.
#[test]
fn mgr_forward_full_gradient_check() {
    let mut rng = Rng::new(700);
    let (b, t, n, d) = (2, 3, 4, 8);
    let streams = rand_t(&mut rng, &[b, t, n, d]);
    let f = rand_t(&mut rng, &[b, t, d]);
    let w1 = Tensor::from_fn(vec![d], |_| rng.uniform(-0.5, 0.5));
    let w2 = Tensor::from_fn(vec![d], |_| rng.uniform(-0.5, 0.5));

    for variant in [GateVariant::Independent, GateVariant::Competitive] {
        let blen = match variant {
            GateVariant::Independent => n,
            GateVariant::Competitive => n + 1,
        };
        let b1 = Tensor::from_fn(vec![blen], |_| rng.uniform(-1.0, 1.0));
        let inputs = [streams.clone(), f.clone(), w1.clone(), w2.clone(), b1];
        check_inputs(
            &format!("mgr_forward[{variant:?}]"),
            &|tape, ids| {
                let p = MgrParamIds { w1: ids[2], w2: ids[3], b1: ids[4] };
                let step = mgr_forward(tape, ids[1], ids[0], p, variant, n).unwrap();
                let ha = weighted_sum(tape, step.new_h, 22);
                let sa = weighted_sum(tape, step.new_streams, 23);
                tape.add(ha, sa)
            },
            &inputs,
            1e-6,
        );
    }
}

/// The fused entry point must equal the op-by-op composition exactly.
#[test]
fn mgr_forward_matches_sequential_composition() {
    let mut rng = Rng::new(800);
    let (b, t, n, d) = (2, 3, 4, 8);
    let streams_v = rand_t(&mut rng, &[b, t, n, d]);
    let f_v = rand_t(&mut rng, &[b, t, d]);
    let w1_v = rand_t(&mut rng, &[d]);
    let w2_v = rand_t(&mut rng, &[d]);

    for variant in [GateVariant::Independent, GateVariant::Competitive] {
        let blen = match variant {
            GateVariant::Independent => n,
            GateVariant::Competitive => n + 1,
        };
        let b1_v = Tensor::from_fn(vec![blen], |_| rng.uniform(-1.0, 1.0));

        let mut tape = GradTape::new();
        let s = tape.leaf(streams_v.clone(), false);
        let f = tape.leaf(f_v.clone(), false);
        let ids = MgrParamIds {
            w1: tape.leaf(w1_v.clone(), false),
            w2: tape.leaf(w2_v.clone(), false),
            b1: tape.leaf(b1_v.clone(), false),
        };
        let fused = mgr_forward(&mut tape, f, s, ids, variant, n).unwrap();

        let beta = match variant {
            GateVariant::Independent => gates_independent(&mut tape, s, ids.w1, ids.b1),
            GateVariant::Competitive => gates_competitive(&mut tape, s, ids.w1, ids.b1),
        };
        let new_streams = tape.lerp_update(s, f, beta);
        let (h, _) = attnpool(&mut tape, new_streams, ids.w2);

        assert_eq!(tape.value(fused.new_streams).data(), tape.value(new_streams).data());
        assert_eq!(tape.value(fused.new_h).data(), tape.value(h).data());
        assert_eq!(tape.value(fused.beta).data(), tape.value(beta).data());
    }
}

fn tiny_cfg(wiring: Wiring) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_head: 8,
        vocab_size: 11,
        context_len: 8,
        wiring,
        n_stream: 3,
        rope_theta: 10000.0,
        b_base: -3.0,
        l_base: 21.0,
        tie_embeddings: true,
    }
}

fn model_loss(cfg: &ModelConfig, params: &ModelParams<f64>, tokens: &[u32], targets: &[u32]) -> f64 {
    let mut tape = GradTape::new();
    let mut binder = Binder::new(params, false);
    let out =
        forward_on_tape(&mut tape, &mut binder, cfg, tokens, 2, 5, ForwardOpts::default()).unwrap();
    let loss = tape.cross_entropy(out.logits, targets);
    tape.value(loss).item()
}

/// End-to-end gradient check of the tiny model: every parameter element,
/// analytic vs central differences, for each wiring. MGR wirings check all
/// elements; the two baselines subsample for time.
fn tiny_model_gradcheck(wiring: Wiring, stride: usize) {
    let cfg = tiny_cfg(wiring);
    let params = ModelParams::<f64>::init(&cfg, 42).unwrap();
    let mut rng = Rng::new(4242);
    let tokens: Vec<u32> = (0..10).map(|_| rng.next_below(11) as u32).collect();
    let targets: Vec<u32> = (0..10).map(|_| rng.next_below(11) as u32).collect();

    let mut tape = GradTape::new();
    let mut binder = Binder::new(&params, true);
    let out =
        forward_on_tape(&mut tape, &mut binder, &cfg, &tokens, 2, 5, ForwardOpts::default())
            .unwrap();
    let loss = tape.cross_entropy(out.logits, &targets);
    tape.backward(loss).unwrap();
    let grads: Vec<(usize, Tensor<f64>)> =
        binder.bound().map(|(i, id)| (i, tape.grad(id).expect("param grad"))).collect();

    let h = FD_STEP;
    for (pi, analytic) in &grads {
        let name = &params.entry(*pi).name;
        let numel = params.entry(*pi).tensor.numel();
        let mut worst = 0.0f64;
        for e in (0..numel).step_by(stride) {
            let orig = params.entry(*pi).tensor.data()[e];
            let mut probe = params.clone();
            probe.entry_mut(*pi).tensor.data_mut()[e] = orig + h;
            let fp = model_loss(&cfg, &probe, &tokens, &targets);
            probe.entry_mut(*pi).tensor.data_mut()[e] = orig - h;
            let fm = model_loss(&cfg, &probe, &tokens, &targets);
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[e];
            let denom = a.abs().max(numeric.abs()).max(mgr::check::FD_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
        assert!(worst < 1e-4, "{wiring:?} {name}: rel err {worst:.3e}");
    }
}

#[test]
fn tiny_model_gradients_mgr_competitive() {
    tiny_model_gradcheck(Wiring::MgrCompetitive, 1);
}

#[test]
fn tiny_model_gradients_mgr_independent() {
    tiny_model_gradcheck(Wiring::MgrIndependent, 1);
}

#[test]
fn tiny_model_gradients_prenorm_sampled() {
    tiny_model_gradcheck(Wiring::PreNorm, 7);
}

#[test]
fn tiny_model_gradients_full_attn_res_sampled() {
    tiny_model_gradcheck(Wiring::FullAttnRes, 7);
}
