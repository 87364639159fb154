//! Training: gradient engines, the main loop, evaluation, metrics, and
//! checkpoint plumbing.
//!
//! Models with a single additive residual stream (and the attention-residual
//! baseline) train on one large tape. MGR models train through a segmented
//! engine that walks the network one sublayer at a time: the forward pass
//! keeps only the sublayer outputs, the gate tensors, the final stream
//! state, and (under `FallbackInversion`) the top-p stream rows by gate
//! value; the backward pass reconstructs each sublayer's input streams by
//! inverting the interpolation, overlays the retained rows, rebuilds the
//! sublayer on a small local tape and pulls gradients through it. Stream
//! storage is therefore independent of depth.

use crate::ckpt::Checkpoint;
use crate::data::{CorpusDataset, Split};
use crate::error::{MgrError, Result};
use crate::model::{
    forward_on_tape, lm_head, mgr_sublayer_on_tape, Binder, ForwardOpts, ModelConfig, ModelParams,
};
use crate::optim::{clip_grad_norm, lr_schedule, OptimConfig, Optimizer};
use crate::residual::{attnpool, invert_lerp};
use crate::rng::Rng;
use crate::tape::GradTape;
use crate::tensor::{axpy, Real, Tensor};
use std::collections::VecDeque;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Moving-average window for the reported train loss.
pub const MA_WINDOW: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecomputeMode {
    /// Keep every sublayer's input streams.
    StoreAll,
    /// Keep only gates, sublayer outputs and the top-p stream rows;
    /// reconstruct inputs by inverting the interpolation.
    FallbackInversion,
}

impl RecomputeMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "store_all" => Ok(RecomputeMode::StoreAll),
            "fallback_inversion" => Ok(RecomputeMode::FallbackInversion),
            other => Err(MgrError::Config(format!(
                "unknown recompute mode '{other}' (expected store_all or fallback_inversion)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RecomputeMode::StoreAll => "store_all",
            RecomputeMode::FallbackInversion => "fallback_inversion",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RecomputePlan {
    pub mode: RecomputeMode,
    /// Fraction of (batch, token, stream) gate entries whose input stream
    /// rows are retained exactly.
    pub p: f64,
    /// Gates above this value are unsafe to invert; non-retained offenders
    /// trigger an exact forward replay of the affected sublayer.
    pub beta_max: f64,
}

impl Default for RecomputePlan {
    fn default() -> Self {
        RecomputePlan { mode: RecomputeMode::StoreAll, p: 0.01, beta_max: 1.0 - 1e-4 }
    }
}

/// Stream-activation storage accounting for one step (bytes).
#[derive(Clone, Copy, Debug, Default)]
pub struct StreamMemStats {
    /// Stream tensors held for backward (per-sublayer inputs under
    /// StoreAll; only the final state under FallbackInversion).
    pub stored_stream_bytes: usize,
    /// Top-p retained stream rows.
    pub retained_bytes: usize,
    /// Sublayer outputs (retained for backprop in either mode).
    pub f_bytes: usize,
    /// Gate tensors (always retained).
    pub beta_bytes: usize,
}

pub struct StepGrads<F: Real> {
    pub loss: f64,
    pub grads: Vec<Vec<F>>,
    pub mem: StreamMemStats,
    /// Sublayers whose inversion was abandoned for a forward replay.
    pub inversion_replays: usize,
}

fn zero_grads<F: Real>(params: &ModelParams<F>) -> Vec<Vec<F>> {
    params.entries().iter().map(|e| vec![F::ZERO; e.tensor.numel()]).collect()
}

fn accumulate<F: Real>(binder: &Binder<F>, tape: &GradTape<F>, acc: &mut [Vec<F>]) {
    for (pi, id) in binder.bound() {
        if let Some(g) = tape.grad_slice(id) {
            axpy(&mut acc[pi], F::ONE, g);
        }
    }
}

/// Loss and parameter gradients through one big tape (single-stream
/// wirings; also valid for MGR and used to cross-check the engine).
pub fn grads_global<F: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<F>,
    tokens: &[u32],
    targets: &[u32],
    batch: usize,
    seq: usize,
) -> Result<StepGrads<F>> {
    let mut tape = GradTape::new();
    let mut binder = Binder::new(params, true);
    let out = forward_on_tape(&mut tape, &mut binder, cfg, tokens, batch, seq, ForwardOpts::default())?;
    let loss = tape.cross_entropy(out.logits, targets);
    let loss_v = tape.value(loss).item().to_f64();
    tape.backward(loss)?;
    let mut grads = zero_grads(params);
    accumulate(&binder, &tape, &mut grads);
    Ok(StepGrads { loss: loss_v, grads, mem: StreamMemStats::default(), inversion_replays: 0 })
}

// ── Segmented MGR engine ─────────────────────────────────────────────

struct Retained<F: Real> {
    /// Flat (batch * token * stream) indices, most significant gate first.
    idx: Vec<u32>,
    /// One D-row per retained index.
    values: Vec<F>,
}

struct SegRecord<F: Real> {
    f_out: Tensor<F>,
    beta: Option<Tensor<F>>,
    streams_in: Option<Tensor<F>>,
    retained: Option<Retained<F>>,
}

fn select_top_p<F: Real>(streams_in: &Tensor<F>, beta: &Tensor<F>, p: f64) -> Retained<F> {
    let d = streams_in.last_dim();
    let total = beta.numel();
    let keep = if p <= 0.0 {
        0
    } else if p >= 1.0 {
        total
    } else {
        ((p * total as f64).ceil() as usize).min(total)
    };
    if keep == 0 {
        return Retained { idx: Vec::new(), values: Vec::new() };
    }
    let mut order: Vec<u32> = (0..total as u32).collect();
    order.sort_unstable_by(|&a, &b| {
        let (ba, bb) = (beta.data()[a as usize].to_f64(), beta.data()[b as usize].to_f64());
        bb.total_cmp(&ba).then(a.cmp(&b))
    });
    order.truncate(keep);
    let mut values = Vec::with_capacity(keep * d);
    for &i in &order {
        let o = i as usize * d;
        values.extend_from_slice(&streams_in.data()[o..o + d]);
    }
    Retained { idx: order, values }
}

fn overwrite_retained<F: Real>(streams: &mut Tensor<F>, retained: &Retained<F>) {
    let d = streams.last_dim();
    for (k, &i) in retained.idx.iter().enumerate() {
        let o = i as usize * d;
        streams.data_mut()[o..o + d].copy_from_slice(&retained.values[k * d..(k + 1) * d]);
    }
}

fn any_unsafe_nonretained<F: Real>(beta: &Tensor<F>, retained: &Retained<F>, beta_max: f64) -> bool {
    let mut kept = vec![false; beta.numel()];
    for &i in &retained.idx {
        kept[i as usize] = true;
    }
    beta.data()
        .iter()
        .enumerate()
        .any(|(i, &b)| !kept[i] && b.to_f64() > beta_max)
}

fn drop_last_stream<F: Real>(streams: &Tensor<F>) -> Tensor<F> {
    let (b, t, n, d) = (
        streams.shape()[0],
        streams.shape()[1],
        streams.shape()[2],
        streams.shape()[3],
    );
    debug_assert!(n >= 2);
    let mut data = Vec::with_capacity(b * t * (n - 1) * d);
    for bt in 0..b * t {
        let o = bt * n * d;
        data.extend_from_slice(&streams.data()[o..o + (n - 1) * d]);
    }
    Tensor::new(vec![b, t, n - 1, d], data).unwrap()
}

fn embed_value<F: Real>(
    params: &ModelParams<F>,
    tokens: &[u32],
    batch: usize,
    seq: usize,
) -> Tensor<F> {
    let mut tape = GradTape::new();
    let mut binder = Binder::new(params, false);
    let table = binder.get(&mut tape, "embed.weight");
    let x0 = tape.embed(table, tokens, batch, seq);
    tape.value(x0).clone()
}

/// Pooled hidden state produced by sublayer `sub`'s attention pool over the
/// given streams (value only, same code path as the forward).
fn pool_value<F: Real>(params: &ModelParams<F>, sub: usize, streams: &Tensor<F>) -> Tensor<F> {
    let mut tape = GradTape::new();
    let mut binder = Binder::new(params, false);
    let s = tape.leaf(streams.clone(), false);
    let w2 = binder.get(&mut tape, &format!("sub{sub}.pool_q"));
    let (h, _) = attnpool(&mut tape, s, w2);
    tape.value(h).clone()
}

/// Exact recomputation of the streams entering `to_sub` by replaying the
/// forward pass from the embedding (the fallback when a gate exceeds the
/// inversion-safety threshold at a non-retained index).
fn replay_streams<F: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<F>,
    tokens: &[u32],
    batch: usize,
    seq: usize,
    to_sub: usize,
) -> Result<Tensor<F>> {
    let x0 = embed_value(params, tokens, batch, seq);
    let d = cfg.d_model;
    let mut streams = x0.clone().reshaped(vec![batch, seq, 1, d])?;
    let mut h = x0;
    for sub in 0..to_sub {
        let mut tape = GradTape::new();
        let mut binder = Binder::new(params, false);
        let h_id = tape.leaf(h, false);
        let s_id = tape.leaf(streams, false);
        let seg = mgr_sublayer_on_tape(&mut tape, &mut binder, cfg, sub, h_id, s_id)?;
        streams = tape.value(seg.new_streams).clone();
        h = tape.value(seg.new_h).clone();
    }
    Ok(streams)
}

/// Loss and parameter gradients for an MGR model via the segmented engine.
pub fn mgr_grads_segmented<F: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<F>,
    tokens: &[u32],
    targets: &[u32],
    batch: usize,
    seq: usize,
    plan: &RecomputePlan,
) -> Result<StepGrads<F>> {
    if !cfg.wiring.is_mgr() {
        return Err(MgrError::Wiring(
            "the segmented recompute engine requires an MGR wiring".into(),
        ));
    }
    crate::model::validate_tokens(cfg, tokens, batch, seq)?;
    let n_sub = cfg.n_sublayers();
    let d = cfg.d_model;
    let fb = F::BYTES;

    // forward: per-sublayer throwaway tapes, recording per plan
    let x0 = embed_value(params, tokens, batch, seq);
    let mut streams = x0.clone().reshaped(vec![batch, seq, 1, d])?;
    let mut h = x0.clone();
    let mut recs: Vec<SegRecord<F>> = Vec::with_capacity(n_sub);
    let mut mem = StreamMemStats::default();
    for sub in 0..n_sub {
        let mut tape = GradTape::new();
        let mut binder = Binder::new(params, false);
        let h_id = tape.leaf(h, false);
        let s_id = tape.leaf(streams.clone(), false);
        let seg = mgr_sublayer_on_tape(&mut tape, &mut binder, cfg, sub, h_id, s_id)?;
        let f_out = tape.value(seg.f).clone();
        let beta = seg.beta.map(|b| tape.value(b).clone());
        let new_streams = tape.value(seg.new_streams).clone();
        let new_h = tape.value(seg.new_h).clone();
        drop(tape);

        let mut rec = SegRecord { f_out, beta, streams_in: None, retained: None };
        match plan.mode {
            RecomputeMode::StoreAll => {
                mem.stored_stream_bytes += streams.numel() * fb;
                rec.streams_in = Some(streams);
            }
            RecomputeMode::FallbackInversion => {
                if let Some(beta) = &rec.beta {
                    let retained = select_top_p(&streams, beta, plan.p);
                    mem.retained_bytes += retained.values.len() * fb + retained.idx.len() * 4;
                    rec.retained = Some(retained);
                }
            }
        }
        mem.f_bytes += rec.f_out.numel() * fb;
        mem.beta_bytes += rec.beta.as_ref().map_or(0, |b| b.numel() * fb);
        recs.push(rec);
        streams = new_streams;
        h = new_h;
    }
    // the final stream state is held in both modes
    mem.stored_stream_bytes += streams.numel() * fb;

    // backward: head first
    let mut grads = zero_grads(params);
    let mut tape = GradTape::new();
    let mut binder = Binder::new(params, true);
    let h_leaf = tape.leaf(h, true);
    let logits = lm_head(&mut tape, &mut binder, cfg, h_leaf);
    let loss_id = tape.cross_entropy(logits, targets);
    let loss = tape.value(loss_id).item().to_f64();
    tape.backward(loss_id)?;
    accumulate(&binder, &tape, &mut grads);
    let mut d_h = tape.grad(h_leaf).expect("head gradient");
    drop(tape);

    let mut d_streams = Tensor::zeros(streams.shape().to_vec());
    let mut streams_after = streams;
    let mut replays = 0usize;
    for sub in (0..n_sub).rev() {
        let rec = &recs[sub];
        let streams_in: Tensor<F> = if rec.beta.is_none() {
            // growth sublayer: un-concatenate exactly
            drop_last_stream(&streams_after)
        } else if let Some(si) = &rec.streams_in {
            si.clone()
        } else {
            let beta = rec.beta.as_ref().unwrap();
            let retained = rec.retained.as_ref().unwrap();
            if any_unsafe_nonretained(beta, retained, plan.beta_max) {
                eprintln!(
                    "warning: sublayer {sub} has a gate above {} at a non-retained \
                     index; replaying the forward pass for this sublayer",
                    plan.beta_max
                );
                replays += 1;
                replay_streams(cfg, params, tokens, batch, seq, sub)?
            } else {
                let mut s =
                    invert_lerp(&streams_after, &rec.f_out, beta, plan.beta_max, false)?;
                overwrite_retained(&mut s, retained);
                s
            }
        };
        let h_in = if sub == 0 { x0.clone() } else { pool_value(params, sub - 1, &streams_in) };

        let mut tape = GradTape::new();
        let mut binder = Binder::new(params, true);
        let h_id = tape.leaf(h_in, true);
        let s_id = tape.leaf(streams_in.clone(), true);
        let seg = mgr_sublayer_on_tape(&mut tape, &mut binder, cfg, sub, h_id, s_id)?;
        tape.backward_seeded(&[(seg.new_streams, d_streams), (seg.new_h, d_h)])?;
        accumulate(&binder, &tape, &mut grads);
        d_h = tape
            .grad(h_id)
            .unwrap_or_else(|| Tensor::zeros(vec![batch, seq, d]));
        d_streams = tape
            .grad(s_id)
            .unwrap_or_else(|| Tensor::zeros(streams_in.shape().to_vec()));
        drop(tape);
        streams_after = streams_in;
    }

    // embedding segment: d(x0) = d_h + d_streams reshaped to [B, T, D]
    let d_x0 = {
        let ds = d_streams.reshaped(vec![batch, seq, d])?;
        Tensor::new(
            vec![batch, seq, d],
            d_h.data().iter().zip(ds.data()).map(|(&a, &b)| a + b).collect(),
        )?
    };
    let mut tape = GradTape::new();
    let mut binder = Binder::new(params, true);
    let table = binder.get(&mut tape, "embed.weight");
    let x0_id = tape.embed(table, tokens, batch, seq);
    tape.backward_seeded(&[(x0_id, d_x0)])?;
    accumulate(&binder, &tape, &mut grads);

    Ok(StepGrads { loss, grads, mem, inversion_replays: replays })
}

/// Dispatch to the wiring-appropriate gradient engine.
pub fn step_grads<F: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<F>,
    tokens: &[u32],
    targets: &[u32],
    batch: usize,
    seq: usize,
    plan: &RecomputePlan,
) -> Result<StepGrads<F>> {
    if cfg.wiring.is_mgr() {
        mgr_grads_segmented(cfg, params, tokens, targets, batch, seq, plan)
    } else {
        grads_global(cfg, params, tokens, targets, batch, seq)
    }
}

// ── Evaluation ───────────────────────────────────────────────────────

/// Mean cross-entropy and perplexity over fixed deterministic validation
/// batches (a pure function of the seed, not of the call site).
pub fn eval_loss<F: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<F>,
    ds: &CorpusDataset,
    n_batches: usize,
    batch: usize,
    seq: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_batches == 0 {
        return Err(MgrError::Usage("eval needs at least one batch".into()));
    }
    let mut rng = Rng::new(seed).derive("val");
    let mut total = 0.0f64;
    for _ in 0..n_batches {
        let (tokens, targets) = ds.sample_batch(Split::Val, batch, seq, &mut rng)?;
        let logits = crate::model::forward_logits(cfg, params, &tokens, batch, seq, ForwardOpts::default())?;
        total += crate::model::cross_entropy_value(&logits, &targets);
    }
    let loss = total / n_batches as f64;
    Ok((loss, loss.exp()))
}

// ── Training loop ────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub seed: u64,
    pub recompute: RecomputePlan,
    /// 0 disables periodic evaluation.
    pub eval_every: u64,
    pub eval_batches: usize,
    /// 0 saves only the final checkpoint.
    pub checkpoint_every: u64,
    /// When false the wall_ms column is written as 0 so seed-matched runs
    /// produce byte-identical metrics files.
    pub log_wall_ms: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            batch_size: 32,
            total_steps: 2000,
            warmup_steps: 200,
            seed: 0,
            recompute: RecomputePlan::default(),
            eval_every: 250,
            eval_batches: 8,
            checkpoint_every: 0,
            log_wall_ms: true,
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_step: u64,
    pub final_train_ma: f64,
    pub final_val_loss: f64,
    pub final_val_ppl: f64,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

fn checkpoint_of<F: Real>(
    params: &ModelParams<F>,
    opt: &Optimizer<F>,
    rng: &Rng,
    step: u64,
    window: &VecDeque<f64>,
    config_text: &str,
) -> Checkpoint<F> {
    let mut tensors: Vec<(String, Tensor<F>)> = params
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.tensor.clone()))
        .collect();
    for (name, data) in opt.state_tensors(params) {
        let len = data.len();
        tensors.push((name, Tensor::new(vec![len], data).unwrap()));
    }
    Checkpoint {
        step,
        optim_step: opt.step_count(),
        rng_state: rng.state(),
        loss_window: window.iter().copied().collect(),
        config_text: config_text.to_string(),
        tensors,
    }
}

/// Restore parameters and optimizer from a checkpoint, validating shapes.
pub fn restore_from_checkpoint<F: Real>(
    ck: &Checkpoint<F>,
    params: &mut ModelParams<F>,
    opt: &mut Optimizer<F>,
) -> Result<()> {
    for i in 0..params.len() {
        let name = params.entry(i).name.clone();
        let t = ck
            .tensor(&name)
            .ok_or_else(|| MgrError::Format(format!("checkpoint misses tensor '{name}'")))?;
        if t.shape() != params.entry(i).tensor.shape() {
            return Err(MgrError::Shape(format!(
                "checkpoint tensor '{name}' has shape {:?}, model expects {:?}",
                t.shape(),
                params.entry(i).tensor.shape()
            )));
        }
        params.entry_mut(i).tensor = t.clone();
    }
    opt.restore(
        params,
        |name| ck.tensor(name).map(|t| t.data().to_vec()),
        ck.optim_step,
    )?;
    Ok(())
}

/// Root-mean-square of each block boundary representation; printed when a
/// run aborts on a non-finite loss.
pub fn dump_layer_rms<F: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<F>,
    tokens: &[u32],
    batch: usize,
    seq: usize,
) -> Vec<(String, f64)> {
    let mut tape = GradTape::new();
    let mut binder = Binder::new(params, false);
    let mut out = Vec::new();
    if let Ok(fwd) = forward_on_tape(
        &mut tape,
        &mut binder,
        cfg,
        tokens,
        batch,
        seq,
        ForwardOpts { trace: true, ..Default::default() },
    ) {
        for (b, id) in fwd.trace.boundary_h.iter().enumerate() {
            out.push((format!("block{b}.input_rms"), tape.value(*id).rms()));
        }
        for (sub, id) in &fwd.trace.sublayer_outputs {
            out.push((format!("sub{sub}.output_rms"), tape.value(*id).rms()));
        }
    }
    out
}

/// Run the training loop, appending to `out_dir/metrics.csv` and writing
/// checkpoints under `out_dir`. `config_text` is embedded in checkpoints.
pub fn train_loop<F: Real>(
    cfg: &ModelConfig,
    optim_cfg: &OptimConfig,
    ts: &TrainSettings,
    ds: &CorpusDataset,
    out_dir: &Path,
    resume: Option<&Path>,
    config_text: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ts.recompute.mode == RecomputeMode::FallbackInversion && !cfg.wiring.is_mgr() {
        return Err(MgrError::Config(
            "fallback_inversion recompute requires an MGR wiring".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.csv");

    let mut params = ModelParams::<F>::init(cfg, ts.seed)?;
    let mut opt = Optimizer::<F>::new(optim_cfg.clone(), &params);
    let mut data_rng = Rng::new(ts.seed).derive("data");
    let mut window: VecDeque<f64> = VecDeque::with_capacity(MA_WINDOW);
    let mut start_step = 0u64;

    if let Some(path) = resume {
        let ck = Checkpoint::<F>::load(path)?;
        restore_from_checkpoint(&ck, &mut params, &mut opt)?;
        data_rng = Rng::restore(ck.rng_state);
        window = ck.loss_window.iter().copied().collect();
        start_step = ck.step;
    }

    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)?;
    if metrics.metadata()?.len() == 0 {
        writeln!(metrics, "step,train_loss,train_loss_ma200,val_loss,lr,grad_norm,wall_ms")?;
    }

    let seq = cfg.context_len;
    let mut last_val = f64::NAN;
    let t_run = Instant::now();

    for step in start_step + 1..=ts.total_steps {
        let t_step = Instant::now();
        let (tokens, targets) = ds.sample_batch(Split::Train, ts.batch_size, seq, &mut data_rng)?;
        let mut sg = step_grads(cfg, &params, &tokens, &targets, ts.batch_size, seq, &ts.recompute)?;

        if !sg.loss.is_finite() {
            eprintln!("non-finite loss {} at step {step}; per-layer RMS dump:", sg.loss);
            for (name, rms) in dump_layer_rms(cfg, &params, &tokens, ts.batch_size, seq) {
                eprintln!("  {name} = {rms}");
            }
            return Err(MgrError::Numeric(format!(
                "training aborted: loss {} at step {step}",
                sg.loss
            )));
        }

        let grad_norm = clip_grad_norm(&mut sg.grads, optim_cfg.grad_clip);
        let lr_scale = lr_schedule(step, ts.warmup_steps, ts.total_steps, 1.0);
        opt.step(&mut params, &sg.grads, lr_scale)?;

        if window.len() == MA_WINDOW {
            window.pop_front();
        }
        window.push_back(sg.loss);
        let ma: f64 = window.iter().sum::<f64>() / window.len() as f64;

        let val_field = if ts.eval_every > 0 && step % ts.eval_every == 0 {
            let (vl, _) = eval_loss(cfg, &params, ds, ts.eval_batches, ts.batch_size, seq, ts.seed)?;
            last_val = vl;
            format!("{vl}")
        } else {
            String::new()
        };
        let wall_ms = if ts.log_wall_ms { t_step.elapsed().as_millis() } else { 0 };
        writeln!(
            metrics,
            "{step},{},{ma},{val_field},{},{grad_norm},{wall_ms}",
            sg.loss,
            optim_cfg.adamw_lr * lr_scale
        )?;

        if ts.checkpoint_every > 0 && step % ts.checkpoint_every == 0 && step < ts.total_steps {
            let ck = checkpoint_of(&params, &opt, &data_rng, step, &window, config_text);
            ck.save(&out_dir.join(format!("ckpt_step{step}.bin")))?;
        }
    }
    metrics.flush()?;

    let checkpoint_path = out_dir.join("ckpt_final.bin");
    let ck = checkpoint_of(&params, &opt, &data_rng, ts.total_steps, &window, config_text);
    ck.save(&checkpoint_path)?;

    let (val_loss, val_ppl) =
        eval_loss(cfg, &params, ds, ts.eval_batches.max(1), ts.batch_size, seq, ts.seed)?;
    let ma = if window.is_empty() {
        f64::NAN
    } else {
        window.iter().sum::<f64>() / window.len() as f64
    };
    let _ = last_val;
    eprintln!(
        "trained {} steps ({}) in {:.1}s: train ma {:.4}, val {:.4}",
        ts.total_steps,
        cfg.wiring.name(),
        t_run.elapsed().as_secs_f64(),
        ma,
        val_loss
    );
    Ok(TrainOutcome {
        final_step: ts.total_steps,
        final_train_ma: ma,
        final_val_loss: val_loss,
        final_val_ppl: val_ppl,
        metrics_path,
        checkpoint_path,
    })
}
