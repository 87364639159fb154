//! Multi-gate residual streams: scoring, gating, gated interpolation,
//! attention pooling, growth-stage concatenation, depth-adaptive gate-bias
//! initialization, and the algebraic inversion of the interpolation step.
//!
//! Streams are carried as `[B, T, N, D]` tensors. A sublayer update is a
//! per-stream convex interpolation toward the sublayer output, so stream
//! magnitudes can never exceed the largest value already present; the test
//! suite exercises that bound directly.

use crate::error::{MgrError, Result};
use crate::tape::{GradTape, NodeId};
use crate::tensor::{Real, Tensor};

/// Which gate produces the interpolation coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateVariant {
    /// Per-stream sigmoid gates; streams are gated independently.
    Independent,
    /// Softmax over stream scores plus a forget logit, so the gate values
    /// of one token sum to strictly less than 1.
    Competitive,
}

/// Default RMS-normalization epsilon used throughout the gate/pool scoring.
pub const RMS_EPS: f64 = 1e-6;

/// Learnable per-sublayer gate and pool parameters.
///
/// `w1` scores streams for gating, `w2` scores streams for pooling; both are
/// zero-initialized so the gate value at init is governed entirely by the
/// bias. For `Competitive`, `b1` has `n_stream + 1` entries and index 0 is
/// the forget bias; for `Independent` it has `n_stream` entries.
#[derive(Clone, Debug)]
pub struct MgrParams<F: Real> {
    pub w1: Tensor<F>,
    pub w2: Tensor<F>,
    pub b1: Tensor<F>,
    pub variant: GateVariant,
    pub d_model: usize,
    pub n_stream: usize,
}

impl<F: Real> MgrParams<F> {
    /// Zero queries plus the depth-adaptive bias placement: Competitive puts
    /// `+b_init` on the forget logit, Independent puts `-b_init` on every
    /// stream bias.
    pub fn init(variant: GateVariant, d_model: usize, n_stream: usize, b_init: f64) -> Self {
        let b1 = match variant {
            GateVariant::Independent => {
                Tensor::full(vec![n_stream], F::from_f64(-b_init))
            }
            GateVariant::Competitive => {
                let mut b = Tensor::zeros(vec![n_stream + 1]);
                b.data_mut()[0] = F::from_f64(b_init);
                b
            }
        };
        MgrParams {
            w1: Tensor::zeros(vec![d_model]),
            w2: Tensor::zeros(vec![d_model]),
            b1,
            variant,
            d_model,
            n_stream,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let want = match self.variant {
            GateVariant::Independent => self.n_stream,
            GateVariant::Competitive => self.n_stream + 1,
        };
        if self.b1.numel() != want {
            return Err(MgrError::Config(format!(
                "gate bias length {} does not match {:?} with {} streams",
                self.b1.numel(),
                self.variant,
                self.n_stream
            )));
        }
        if self.w1.numel() != self.d_model || self.w2.numel() != self.d_model {
            return Err(MgrError::Config("gate/pool query length != d_model".into()));
        }
        Ok(())
    }
}

/// Node ids of one sublayer's gate/pool parameters on a tape.
#[derive(Clone, Copy, Debug)]
pub struct MgrParamIds {
    pub w1: NodeId,
    pub w2: NodeId,
    pub b1: NodeId,
}

/// The parallel residual streams of a batch, `[B, T, N, D]`.
#[derive(Clone, Debug)]
pub struct StreamSet<F: Real> {
    tensor: Tensor<F>,
}

impl<F: Real> StreamSet<F> {
    pub fn new(tensor: Tensor<F>) -> Result<Self> {
        if tensor.rank() != 4 {
            return Err(MgrError::Shape(format!(
                "streams must be [B, T, N, D], got {:?}",
                tensor.shape()
            )));
        }
        Ok(StreamSet { tensor })
    }

    /// Seed the stream set from the embedding output `[B, T, D]` (N = 1).
    pub fn seed(embedding: Tensor<F>) -> Result<Self> {
        if embedding.rank() != 3 {
            return Err(MgrError::Shape(format!(
                "seed expects [B, T, D], got {:?}",
                embedding.shape()
            )));
        }
        let (b, t, d) = (embedding.shape()[0], embedding.shape()[1], embedding.shape()[2]);
        Ok(StreamSet { tensor: embedding.reshaped(vec![b, t, 1, d])? })
    }

    pub fn n_streams(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<F> {
        self.tensor
    }
}

// ── Scoring and gating (tape builders) ───────────────────────────────

/// Raw stream compatibility scores: (w . rms_norm(s_i)) / sqrt(D), no bias.
pub fn score_streams<F: Real>(tape: &mut GradTape<F>, streams: NodeId, w: NodeId) -> NodeId {
    let d = tape.value(streams).last_dim();
    let normed = tape.rms_norm(streams, F::from_f64(RMS_EPS));
    let dots = tape.dot_last(normed, w);
    tape.scale(dots, F::from_f64(1.0 / (d as f64).sqrt()))
}

/// The scoring function with a per-stream bias: scores [B, T, N].
pub fn score_phi<F: Real>(
    tape: &mut GradTape<F>,
    streams: NodeId,
    w: NodeId,
    bias: NodeId,
) -> NodeId {
    let s = score_streams(tape, streams, w);
    tape.add_bias_last(s, bias)
}

/// Independent gates: beta = sigmoid(score + bias), each stream on its own.
pub fn gates_independent<F: Real>(
    tape: &mut GradTape<F>,
    streams: NodeId,
    w1: NodeId,
    b1: NodeId,
) -> NodeId {
    let logits = score_phi(tape, streams, w1, b1);
    tape.sigmoid(logits)
}

/// Competitive gates: a zero forget logit is prepended, the bias vector
/// (forget bias first) is added, and the softmax is taken over all N+1
/// logits; the forget channel is dropped, so the returned betas sum to
/// strictly less than 1.
pub fn gates_competitive<F: Real>(
    tape: &mut GradTape<F>,
    streams: NodeId,
    w1: NodeId,
    b1: NodeId,
) -> NodeId {
    let n = tape.value(streams).shape()[2];
    let scores = score_streams(tape, streams, w1);
    let padded = tape.pad_front_last(scores);
    let logits = tape.add_bias_last(padded, b1);
    let probs = tape.softmax_last(logits);
    tape.narrow_last(probs, 1, n)
}

/// Gates for either variant.
pub fn gates<F: Real>(
    tape: &mut GradTape<F>,
    streams: NodeId,
    ids: MgrParamIds,
    variant: GateVariant,
) -> NodeId {
    match variant {
        GateVariant::Independent => gates_independent(tape, streams, ids.w1, ids.b1),
        GateVariant::Competitive => gates_competitive(tape, streams, ids.w1, ids.b1),
    }
}

/// Attention pooling over streams: alpha = softmax_i of pool scores over the
/// rms-normed streams, h = sum_i alpha_i s_i. Returns (h, alpha).
pub fn attnpool<F: Real>(
    tape: &mut GradTape<F>,
    streams: NodeId,
    w2: NodeId,
) -> (NodeId, NodeId) {
    let scores = score_streams(tape, streams, w2);
    let alpha = tape.softmax_last(scores);
    let h = tape.stream_pool(streams, alpha);
    (h, alpha)
}

/// Outputs of one full gated-residual update.
pub struct MgrStep {
    pub new_h: NodeId,
    pub new_streams: NodeId,
    pub beta: NodeId,
    pub alpha: NodeId,
}

/// One lerping-stage update exactly as the reference composition: gating
/// scores use the rms-normed input streams, the streams are interpolated
/// toward the sublayer output, and pooling scores use the rms-normed
/// updated streams.
pub fn mgr_forward<F: Real>(
    tape: &mut GradTape<F>,
    layer_output: NodeId,
    streams: NodeId,
    ids: MgrParamIds,
    variant: GateVariant,
    n_stream: usize,
) -> Result<MgrStep> {
    let n = tape.value(streams).shape()[2];
    if n != n_stream {
        return Err(MgrError::Stage(format!(
            "mgr_forward requires {n_stream} streams, got {n}; grow_stream first"
        )));
    }
    let beta = gates(tape, streams, ids, variant);
    let new_streams = tape.lerp_update(streams, layer_output, beta);
    let (new_h, alpha) = attnpool(tape, new_streams, ids.w2);
    Ok(MgrStep { new_h, new_streams, beta, alpha })
}

/// Growth-stage update: append the sublayer output as a new stream.
pub fn grow_stream<F: Real>(
    tape: &mut GradTape<F>,
    streams: NodeId,
    layer_output: NodeId,
    n_stream: usize,
) -> Result<NodeId> {
    let n = tape.value(streams).shape()[2];
    if n >= n_stream {
        return Err(MgrError::Stage(format!(
            "stream count {n} already at the {n_stream}-stream threshold; lerp instead"
        )));
    }
    Ok(tape.concat_stream(streams, layer_output))
}

// ── Bias initialization ──────────────────────────────────────────────

/// Depth-adaptive gate-bias initialization.
///
/// Transfers a reference bias `b_base` tuned at lerping depth `l_base` to a
/// model with lerping depth `l` and `n` streams:
///
/// `b_init = ln( sqrt(l / l_base) * (exp(-b_base) + 1) - n )`
///
/// Competitive gates put `+b_init` on the forget logit; independent gates
/// put `-b_init` on every stream bias.
pub fn init_gate_bias(l: f64, l_base: f64, b_base: f64, n: usize) -> Result<f64> {
    if l <= 0.0 || l_base <= 0.0 {
        return Err(MgrError::Config(format!(
            "lerping depths must be positive (L = {l}, L_base = {l_base})"
        )));
    }
    let arg = (l / l_base).sqrt() * ((-b_base).exp() + 1.0) - n as f64;
    if arg <= 0.0 {
        return Err(MgrError::Config(format!(
            "gate-bias init undefined: sqrt(L/L_base)*(exp(-b_base)+1) - n = {arg:.6} <= 0 \
             for L = {l}, n = {n}; use fewer streams or a deeper lerping stage"
        )));
    }
    Ok(arg.ln())
}

/// Gate value each stream carries at exact initialization (zero queries).
pub fn init_gate_value(variant: GateVariant, n: usize, b_init: f64) -> f64 {
    match variant {
        // sigmoid(-b_init)
        GateVariant::Independent => 1.0 / (1.0 + b_init.exp()),
        // softmax over N zero logits plus the forget logit b_init
        GateVariant::Competitive => 1.0 / (n as f64 + b_init.exp()),
    }
}

// ── Inversion ────────────────────────────────────────────────────────

/// Default ceiling on beta for which the inversion is considered safe; the
/// reconstruction error is amplified by 1/(1-beta).
pub const BETA_MAX_DEFAULT: f64 = 1.0 - 1e-4;

/// Reverse-solve the interpolation: s = (s' - beta * f) / (1 - beta).
///
/// `checked` mode refuses any gate above `beta_max` (the caller is expected
/// to fall back to stored values); unchecked mode clamps the denominator at
/// 1e-6 and keeps going.
pub fn invert_lerp<F: Real>(
    new_streams: &Tensor<F>,
    layer_output: &Tensor<F>,
    beta: &Tensor<F>,
    beta_max: f64,
    checked: bool,
) -> Result<Tensor<F>> {
    let shape = new_streams.shape();
    if shape.len() != 4 {
        return Err(MgrError::Shape(format!("streams must be [B,T,N,D], got {shape:?}")));
    }
    let (b, t, n, d) = (shape[0], shape[1], shape[2], shape[3]);
    if layer_output.shape() != [b, t, d] {
        return Err(MgrError::Shape("layer output shape mismatch".into()));
    }
    if beta.shape() != [b, t, n] {
        return Err(MgrError::Shape("beta shape mismatch".into()));
    }
    let bmax = F::from_f64(beta_max);
    let floor = F::from_f64(1e-6);
    let mut out = Vec::with_capacity(new_streams.numel());
    for bt in 0..b * t {
        let frow = &layer_output.data()[bt * d..(bt + 1) * d];
        for i in 0..n {
            let beta_v = beta.data()[bt * n + i];
            if checked && beta_v > bmax {
                return Err(MgrError::Numeric(format!(
                    "inversion-unsafe gate {beta_v} > beta_max {beta_max}; \
                     fall back to stored stream values"
                )));
            }
            let denom = (F::ONE - beta_v).maxv(floor);
            let inv = F::ONE / denom;
            let srow = &new_streams.data()[(bt * n + i) * d..(bt * n + i + 1) * d];
            for (sv, fv) in srow.iter().zip(frow) {
                out.push((*sv - beta_v * *fv) * inv);
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

// ── Checked-mode invariants ──────────────────────────────────────────

/// Verify the convex-update contract on one lerp step: betas strictly in
/// (0,1), every output element inside the closed interval spanned by the
/// corresponding stream and layer-output elements (up to `ulps`), and the
/// per-stream norm ceiling.
pub fn check_lerp_invariants<F: Real>(
    streams: &Tensor<F>,
    layer_output: &Tensor<F>,
    beta: &Tensor<F>,
    new_streams: &Tensor<F>,
    ulps: u64,
) -> Result<()> {
    let (b, t, n, d) = (
        streams.shape()[0],
        streams.shape()[1],
        streams.shape()[2],
        streams.shape()[3],
    );
    for (i, &bv) in beta.data().iter().enumerate() {
        if !(bv > F::ZERO && bv < F::ONE) {
            return Err(MgrError::Numeric(format!(
                "gate {} = {bv} outside (0,1)",
                i
            )));
        }
    }
    for bt in 0..b * t {
        let frow = &layer_output.data()[bt * d..(bt + 1) * d];
        for si in 0..n {
            let o = (bt * n + si) * d;
            let srow = &streams.data()[o..o + d];
            let orow = &new_streams.data()[o..o + d];
            for j in 0..d {
                let lo = srow[j].minv(frow[j]);
                let hi = srow[j].maxv(frow[j]);
                let v = orow[j];
                let inside = (v >= lo || v.ulp_diff(lo) <= ulps)
                    && (v <= hi || v.ulp_diff(hi) <= ulps);
                if !inside {
                    return Err(MgrError::Numeric(format!(
                        "element escaped convex interval: {v} vs [{lo}, {hi}]"
                    )));
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), vals.to_vec()).unwrap()
    }

    #[test]
    fn golden_bias_values() {
        // Reference configuration: b_base = -3, L_base = 21. Expected values
        // frozen from direct evaluation of the formula.
        let b = init_gate_bias(21.0, 21.0, -3.0, 4).unwrap();
        assert!((b - 2.838232312).abs() < 1e-5, "{b}");
        let b = init_gate_bias(42.0, 21.0, -3.0, 4).unwrap();
        assert!((b - 3.251128172).abs() < 1e-5, "{b}");
        let b = init_gate_bias(41.0, 21.0, -3.0, 8).unwrap();
        assert!((b - 3.066298849).abs() < 1e-5, "{b}");
    }

    #[test]
    fn induced_init_gate_values() {
        let b = init_gate_bias(21.0, 21.0, -3.0, 4).unwrap();
        let comp = init_gate_value(GateVariant::Competitive, 4, b);
        let ind = init_gate_value(GateVariant::Independent, 4, b);
        assert!((comp - 0.047426).abs() < 1e-6, "{comp}");
        assert!((ind - 0.055293).abs() < 1e-6, "{ind}");
    }

    #[test]
    fn bias_init_rejects_bad_domain() {
        // Large n at shallow depth drives the log argument negative.
        let err = init_gate_bias(5.0, 21.0, -3.0, 21).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("L = 5") && msg.contains("n = 21"), "{msg}");
    }

    #[test]
    fn bias_init_monotonicity() {
        let mut prev = f64::NEG_INFINITY;
        for l in [9.0, 21.0, 42.0, 63.0, 84.0] {
            let b = init_gate_bias(l, 21.0, -3.0, 4).unwrap();
            assert!(b > prev, "not increasing in L at {l}");
            prev = b;
        }
        let mut prev = f64::INFINITY;
        for n in [2, 4, 8, 12] {
            let b = init_gate_bias(21.0, 21.0, -3.0, n).unwrap();
            assert!(b < prev, "not decreasing in n at {n}");
            prev = b;
        }
    }

    #[test]
    fn competitive_gates_closed_form_at_init() {
        // Zero query, zero stream biases, forget bias 2.838278, N = 4:
        // beta_i = 1/(4 + e^2.838278) each.
        let mut tape = GradTape::<f64>::new();
        let mut rng = Rng::new(7);
        let streams = tape.leaf(Tensor::from_fn(vec![2, 3, 4, 8], |_| rng.uniform(-2.0, 2.0)), false);
        let w1 = tape.leaf(Tensor::zeros(vec![8]), false);
        let mut b1 = Tensor::zeros(vec![5]);
        b1.data_mut()[0] = init_gate_bias(21.0, 21.0, -3.0, 4).unwrap();
        let b1 = tape.leaf(b1, false);
        let beta = gates_competitive(&mut tape, streams, w1, b1);
        for row in tape.value(beta).data().chunks_exact(4) {
            let sum: f64 = row.iter().sum();
            for &v in row {
                assert!((v - 0.047426).abs() < 1e-6, "{v}");
            }
            assert!((sum - 0.189705).abs() < 1e-5, "{sum}");
        }
    }

    #[test]
    fn competitive_gate_limits() {
        let mut tape = GradTape::<f64>::new();
        let streams = tape.leaf(Tensor::full(vec![1, 1, 3, 4], 1.0), false);
        let w1 = tape.leaf(Tensor::zeros(vec![4]), false);
        // forget bias -> +inf surrogate: pure carry
        let mut big = Tensor::zeros(vec![4]);
        big.data_mut()[0] = 60.0;
        let b_hi = tape.leaf(big, false);
        let beta = gates_competitive(&mut tape, streams, w1, b_hi);
        assert!(tape.value(beta).data().iter().all(|&v| v < 1e-20));
        // forget bias -> -inf surrogate with equal scores: 1/N each
        let mut small = Tensor::zeros(vec![4]);
        small.data_mut()[0] = -60.0;
        let b_lo = tape.leaf(small, false);
        let beta = gates_competitive(&mut tape, streams, w1, b_lo);
        for &v in tape.value(beta).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn independent_gate_values() {
        let mut tape = GradTape::<f64>::new();
        let streams = tape.leaf(Tensor::full(vec![1, 1, 2, 4], 0.5), false);
        let w1 = tape.leaf(Tensor::zeros(vec![4]), false);
        let bias = -init_gate_bias(21.0, 21.0, -3.0, 4).unwrap();
        let b1 = tape.leaf(t(&[2], &[0.0, bias]), false);
        let beta = gates_independent(&mut tape, streams, w1, b1);
        let v = tape.value(beta).data();
        assert_eq!(v[0], 0.5);
        assert!((v[1] - 0.055293).abs() < 1e-6);
    }

    #[test]
    fn score_phi_contract() {
        // Zero query: score equals the bias no matter the content.
        let mut tape = GradTape::<f64>::new();
        let mut rng = Rng::new(3);
        let streams = tape.leaf(Tensor::from_fn(vec![1, 2, 3, 4], |_| rng.uniform(-5.0, 5.0)), false);
        let w = tape.leaf(Tensor::zeros(vec![4]), false);
        let bias = tape.leaf(t(&[3], &[0.7, -0.2, 0.0]), false);
        let s = score_phi(&mut tape, streams, w, bias);
        for row in tape.value(s).data().chunks_exact(3) {
            assert!((row[0] - 0.7).abs() < 1e-12);
            assert!((row[1] + 0.2).abs() < 1e-12);
            assert!(row[2].abs() < 1e-12);
        }

        // D = 2, s = (1, 0), w = (1, 0), bias 0: rms-normed s = (sqrt 2, 0),
        // score = sqrt(2)/sqrt(2) = 1 (up to the eps regularizer).
        let mut tape = GradTape::<f64>::new();
        let streams = tape.leaf(t(&[1, 1, 1, 2], &[1.0, 0.0]), false);
        let w = tape.leaf(t(&[2], &[1.0, 0.0]), false);
        let bias = tape.leaf(t(&[1], &[0.0]), false);
        let s = score_phi(&mut tape, streams, w, bias);
        assert!((tape.value(s).data()[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn score_scale_invariance() {
        let mut rng = Rng::new(17);
        let base: Vec<f64> = (0..2 * 2 * 3 * 6).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let wv: Vec<f64> = (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let score_of = |scale: f64| {
            let mut tape = GradTape::<f64>::new();
            let s = tape.leaf(
                Tensor::new(vec![2, 2, 3, 6], base.iter().map(|v| v * scale).collect()).unwrap(),
                false,
            );
            let w = tape.leaf(Tensor::new(vec![6], wv.clone()).unwrap(), false);
            let id = score_streams(&mut tape, s, w);
            tape.value(id).data().to_vec()
        };
        let a = score_of(1.0);
        let b = score_of(37.5);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn attnpool_zero_query_is_mean() {
        let mut tape = GradTape::<f64>::new();
        let streams = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
        let w2 = tape.leaf(Tensor::zeros(vec![2]), false);
        let (h, alpha) = attnpool(&mut tape, streams, w2);
        assert_eq!(tape.value(alpha).data(), &[0.5, 0.5]);
        assert_eq!(tape.value(h).data(), &[0.5, 0.5]);
    }

    #[test]
    fn attnpool_identical_streams_fixed_point() {
        let mut tape = GradTape::<f64>::new();
        let v = [0.3, -1.2, 0.8];
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(&v);
        }
        let streams = tape.leaf(t(&[1, 1, 4, 3], &data), false);
        let mut rng = Rng::new(5);
        let w2 = tape.leaf(Tensor::from_fn(vec![3], |_| rng.uniform(-2.0, 2.0)), false);
        let (h, _) = attnpool(&mut tape, streams, w2);
        for (got, want) in tape.value(h).data().iter().zip(&v) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn attnpool_hand_case() {
        // D=2, N=2, s1=(1,0), s2=(0,1), w2=(1,0): scores ~ (1, 0) after
        // rms normalization, alpha = (e/(e+1), 1/(e+1)).
        let mut tape = GradTape::<f64>::new();
        let streams = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
        let w2 = tape.leaf(t(&[2], &[1.0, 0.0]), false);
        let (h, alpha) = attnpool(&mut tape, streams, w2);
        let a = tape.value(alpha).data();
        assert!((a[0] - 0.731059).abs() < 1e-5, "{}", a[0]);
        assert!((a[1] - 0.268941).abs() < 1e-5, "{}", a[1]);
        let hv = tape.value(h).data();
        assert!((hv[0] - 0.731059).abs() < 1e-5);
        assert!((hv[1] - 0.268941).abs() < 1e-5);
    }

    #[test]
    fn mgr_forward_stage_check() {
        let mut tape = GradTape::<f64>::new();
        let streams = tape.leaf(Tensor::zeros(vec![1, 1, 2, 4]), false);
        let f = tape.leaf(Tensor::zeros(vec![1, 1, 4]), false);
        let p = MgrParams::<f64>::init(GateVariant::Competitive, 4, 4, 1.0);
        let ids = MgrParamIds {
            w1: tape.leaf(p.w1.clone(), false),
            w2: tape.leaf(p.w2.clone(), false),
            b1: tape.leaf(p.b1.clone(), false),
        };
        let err = mgr_forward(&mut tape, f, streams, ids, GateVariant::Competitive, 4);
        assert!(matches!(err, Err(MgrError::Stage(_))));
    }

    #[test]
    fn mgr_forward_fixed_point() {
        // All streams equal to the layer output: update and pool return it.
        let mut tape = GradTape::<f64>::new();
        let v = [0.4, -0.9, 1.3, 0.2];
        let mut sdata = Vec::new();
        for _ in 0..3 {
            sdata.extend_from_slice(&v);
        }
        let streams = tape.leaf(t(&[1, 1, 3, 4], &sdata), false);
        let f = tape.leaf(t(&[1, 1, 4], &v), false);
        let p = MgrParams::<f64>::init(GateVariant::Independent, 4, 3, 2.0);
        let ids = MgrParamIds {
            w1: tape.leaf(p.w1.clone(), false),
            w2: tape.leaf(p.w2.clone(), false),
            b1: tape.leaf(p.b1.clone(), false),
        };
        let step = mgr_forward(&mut tape, f, streams, ids, GateVariant::Independent, 3).unwrap();
        for (got, want) in tape.value(step.new_h).data().iter().zip(&v) {
            assert!((got - want).abs() < 1e-12);
        }
        for chunk in tape.value(step.new_streams).data().chunks_exact(4) {
            for (got, want) in chunk.iter().zip(&v) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grow_stream_appends_and_guards() {
        let mut tape = GradTape::<f64>::new();
        let s = tape.leaf(t(&[1, 1, 1, 2], &[1.0, 2.0]), false);
        let f = tape.leaf(t(&[1, 1, 2], &[3.0, 4.0]), false);
        let grown = grow_stream(&mut tape, s, f, 3).unwrap();
        assert_eq!(tape.value(grown).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(grown).data(), &[1.0, 2.0, 3.0, 4.0]);
        let grown2 = grow_stream(&mut tape, grown, f, 3).unwrap();
        assert_eq!(tape.value(grown2).shape(), &[1, 1, 3, 2]);
        assert!(matches!(
            grow_stream(&mut tape, grown2, f, 3),
            Err(MgrError::Stage(_))
        ));
    }

    #[test]
    fn invert_lerp_hand_case_and_round_trip() {
        let new = t(&[1, 1, 1, 2], &[0.5, 0.5]);
        let f = t(&[1, 1, 2], &[0.0, 1.0]);
        let beta = t(&[1, 1, 1], &[0.5]);
        let s = invert_lerp(&new, &f, &beta, BETA_MAX_DEFAULT, true).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);

        // beta = 0 is the identity.
        let beta0 = t(&[1, 1, 1], &[0.0]);
        let s0 = invert_lerp(&new, &f, &beta0, BETA_MAX_DEFAULT, true).unwrap();
        assert_eq!(s0.data(), new.data());
    }

    #[test]
    fn invert_lerp_checked_rejects_large_beta() {
        let new = t(&[1, 1, 1, 1], &[0.5]);
        let f = t(&[1, 1, 1], &[1.0]);
        let beta = t(&[1, 1, 1], &[0.99995]);
        assert!(matches!(
            invert_lerp(&new, &f, &beta, BETA_MAX_DEFAULT, true),
            Err(MgrError::Numeric(_))
        ));
        // unchecked keeps going
        assert!(invert_lerp(&new, &f, &beta, BETA_MAX_DEFAULT, false).is_ok());
    }

    #[test]
    fn all_zero_streams_score_is_bias_only() {
        let mut tape = GradTape::<f64>::new();
        let streams = tape.leaf(Tensor::zeros(vec![1, 1, 2, 4]), false);
        let mut rng = Rng::new(8);
        let w = tape.leaf(Tensor::from_fn(vec![4], |_| rng.uniform(-3.0, 3.0)), false);
        let bias = tape.leaf(t(&[2], &[1.5, -0.5]), false);
        let s = score_phi(&mut tape, streams, w, bias);
        let v = tape.value(s).data();
        assert!(v.iter().all(|x| x.is_finite()));
        assert!((v[0] - 1.5).abs() < 1e-12);
        assert!((v[1] + 0.5).abs() < 1e-12);
    }
}
