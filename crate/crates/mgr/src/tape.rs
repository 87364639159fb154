//! Reverse-mode automatic differentiation over tensors.
//!
//! A [`GradTape`] owns every tensor produced during a forward pass and
//! records which primitive produced it. Nodes are appended in execution
//! order, so walking the node list backwards visits the graph in reverse
//! topological order; [`GradTape::backward`] does exactly that, accumulating
//! adjoints into per-node gradient buffers.
//!
//! The op set is deliberately closed: every primitive here has a hand-written
//! adjoint that is checked against central finite differences in the tests.

use crate::error::{MgrError, Result};
use crate::tensor::{axpy, dot, matmul_acc, matmul_block, par_row_ranges, pool_put, pool_take,
    pool_take_zeroed, transpose, Real, Tensor};

/// Handle to a tensor stored on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

enum Op<F: Real> {
    Leaf,
    Reshape { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: F },
    AddBiasLast { x: NodeId, b: NodeId },
    MulGainLast { x: NodeId, g: NodeId },
    DotLast { x: NodeId, w: NodeId },
    Sigmoid { x: NodeId },
    ReluSquared { x: NodeId },
    RmsNorm { x: NodeId, eps: F },
    SoftmaxLast { x: NodeId },
    PadFrontLast { x: NodeId },
    NarrowLast { x: NodeId, start: usize, len: usize },
    Linear { x: NodeId, w: NodeId },
    LinearT { x: NodeId, w: NodeId },
    Embed { table: NodeId, tokens: Vec<u32> },
    SplitHeads { x: NodeId, n_heads: usize },
    MergeHeads { x: NodeId },
    Rope { x: NodeId },
    CausalScores { q: NodeId, k: NodeId, scale: F },
    CausalSoftmax { x: NodeId },
    AttnMix { probs: NodeId, v: NodeId },
    ConcatStream { s: NodeId, f: NodeId },
    LerpUpdate { s: NodeId, f: NodeId, beta: NodeId },
    StreamPool { s: NodeId, alpha: NodeId },
    PoolHistory { inputs: Vec<NodeId>, q: NodeId, eps: F },
    Sum { x: NodeId },
    Mean { x: NodeId },
    CrossEntropy { logits: NodeId, targets: Vec<u32> },
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    /// Saved forward byproducts some adjoints need (e.g. pooling weights).
    aux: Vec<Tensor<F>>,
}

/// Recorded forward computation with reverse sweep.
pub struct GradTape<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    backward_done: bool,
}

impl<F: Real> Default for GradTape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Drop for GradTape<F> {
    fn drop(&mut self) {
        for node in self.nodes.drain(..) {
            pool_put(node.value.into_data());
            for a in node.aux {
                pool_put(a.into_data());
            }
        }
        for g in self.grads.drain(..) {
            if let Some(g) = g {
                pool_put(g);
            }
        }
    }
}

impl<F: Real> GradTape<F> {
    pub fn new() -> Self {
        crate::tensor::worker_threads(); // one-time runtime setup
        GradTape { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to node `id`.
    pub fn grad(&self, id: NodeId) -> Option<Tensor<F>> {
        self.grads[id.0].as_ref().map(|g| {
            Tensor::new(self.nodes[id.0].value.shape().to_vec(), g.clone()).expect("grad shape")
        })
    }

    /// Borrowed view of a gradient buffer.
    pub fn grad_slice(&self, id: NodeId) -> Option<&[F]> {
        self.grads[id.0].as_deref()
    }

    pub fn all_values_finite(&self) -> bool {
        self.nodes.iter().all(|n| n.value.all_finite())
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad, aux: Vec::new() });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn push_with_aux(
        &mut self,
        value: Tensor<F>,
        op: Op<F>,
        requires_grad: bool,
        aux: Vec<Tensor<F>>,
    ) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad, aux });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn req(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── Construction ─────────────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let v = self.value(x).clone().reshaped(shape).expect("reshape numel");
        self.push(v, Op::Reshape { x }, self.req(&[x]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut data = pool_take(va.numel());
        data.extend(va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y));
        let v = Tensor::new(va.shape().to_vec(), data).unwrap();
        self.push(v, Op::Add { a, b }, self.req(&[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let mut data = pool_take(va.numel());
        data.extend(va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y));
        let v = Tensor::new(va.shape().to_vec(), data).unwrap();
        self.push(v, Op::Sub { a, b }, self.req(&[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let mut data = pool_take(va.numel());
        data.extend(va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y));
        let v = Tensor::new(va.shape().to_vec(), data).unwrap();
        self.push(v, Op::Mul { a, b }, self.req(&[a, b]))
    }

    pub fn scale(&mut self, x: NodeId, c: F) -> NodeId {
        let vx = self.value(x);
        let mut data = pool_take(vx.numel());
        data.extend(vx.data().iter().map(|&t| t * c));
        let v = Tensor::new(vx.shape().to_vec(), data).unwrap();
        self.push(v, Op::Scale { x, c }, self.req(&[x]))
    }

    /// x[..., j] + b[j]
    pub fn add_bias_last(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (vx, vb) = (self.value(x), self.value(b));
        let l = vx.last_dim();
        assert_eq!(vb.shape(), [l], "bias length must match last dim");
        let mut data = pool_take(vx.numel());
        for row in vx.data().chunks_exact(l) {
            for (j, &v) in row.iter().enumerate() {
                data.push(v + vb.data()[j]);
            }
        }
        let v = Tensor::new(vx.shape().to_vec(), data).unwrap();
        self.push(v, Op::AddBiasLast { x, b }, self.req(&[x, b]))
    }

    /// x[..., j] * g[j]
    pub fn mul_gain_last(&mut self, x: NodeId, g: NodeId) -> NodeId {
        let (vx, vg) = (self.value(x), self.value(g));
        let l = vx.last_dim();
        assert_eq!(vg.shape(), [l], "gain length must match last dim");
        let mut data = pool_take(vx.numel());
        for row in vx.data().chunks_exact(l) {
            for (j, &v) in row.iter().enumerate() {
                data.push(v * vg.data()[j]);
            }
        }
        let v = Tensor::new(vx.shape().to_vec(), data).unwrap();
        self.push(v, Op::MulGainLast { x, g }, self.req(&[x, g]))
    }

    /// Dot product of each last-dim row with `w`: [..., D] -> [...].
    pub fn dot_last(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let (vx, vw) = (self.value(x), self.value(w));
        let d = vx.last_dim();
        assert_eq!(vw.shape(), [d], "query length must match last dim");
        assert!(vx.rank() >= 2, "dot_last needs rank >= 2");
        let data: Vec<F> = vx.data().chunks_exact(d).map(|row| dot(row, vw.data())).collect();
        let shape = vx.shape()[..vx.rank() - 1].to_vec();
        let v = Tensor::new(shape, data).unwrap();
        self.push(v, Op::DotLast { x, w }, self.req(&[x, w]))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let mut data = pool_take(vx.numel());
        data.extend(vx.data().iter().map(|&t| sigmoid_scalar(t)));
        let v = Tensor::new(vx.shape().to_vec(), data).unwrap();
        self.push(v, Op::Sigmoid { x }, self.req(&[x]))
    }

    pub fn relu_squared(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let mut data = pool_take(vx.numel());
        data.extend(vx.data().iter().map(|&t| {
            let r = t.maxv(F::ZERO);
            r * r
        }));
        let v = Tensor::new(vx.shape().to_vec(), data).unwrap();
        self.push(v, Op::ReluSquared { x }, self.req(&[x]))
    }

    /// Unweighted RMS normalization over the last dimension.
    pub fn rms_norm(&mut self, x: NodeId, eps: F) -> NodeId {
        let vx = self.value(x);
        let d = vx.last_dim();
        let inv_d = F::from_f64(1.0 / d as f64);
        let mut data = pool_take(vx.numel());
        for row in vx.data().chunks_exact(d) {
            let ss = dot(row, row);
            let r = F::ONE / (ss * inv_d + eps).sqrt();
            data.extend(row.iter().map(|&v| v * r));
        }
        let v = Tensor::new(vx.shape().to_vec(), data).unwrap();
        self.push(v, Op::RmsNorm { x, eps }, self.req(&[x]))
    }

    /// Numerically stable softmax over the last dimension.
    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let d = vx.last_dim();
        let mut data = pool_take(vx.numel());
        for row in vx.data().chunks_exact(d) {
            let m = row.iter().fold(row[0], |a, &b| a.maxv(b));
            let exps: Vec<F> = row.iter().map(|&v| (v - m).exp()).collect();
            let sum: F = exps.iter().fold(F::ZERO, |a, &b| a + b);
            data.extend(exps.iter().map(|&e| e / sum));
        }
        let v = Tensor::new(vx.shape().to_vec(), data).unwrap();
        self.push(v, Op::SoftmaxLast { x }, self.req(&[x]))
    }

    /// [..., K] -> [..., K+1] with a zero inserted at index 0 of the last dim.
    pub fn pad_front_last(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let d = vx.last_dim();
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = d + 1;
        let mut data = pool_take(vx.numel() / d * (d + 1));
        for row in vx.data().chunks_exact(d) {
            data.push(F::ZERO);
            data.extend_from_slice(row);
        }
        let v = Tensor::new(shape, data).unwrap();
        self.push(v, Op::PadFrontLast { x }, self.req(&[x]))
    }

    /// Slice [start, start+len) of the last dimension.
    pub fn narrow_last(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let vx = self.value(x);
        let d = vx.last_dim();
        assert!(start + len <= d, "narrow range out of bounds");
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let mut data = pool_take(vx.numel() / d * len);
        for row in vx.data().chunks_exact(d) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let v = Tensor::new(shape, data).unwrap();
        self.push(v, Op::NarrowLast { x, start, len }, self.req(&[x]))
    }

    /// [..., K] @ w[K, N] -> [..., N]
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let (vx, vw) = (self.value(x), self.value(w));
        let k = vx.last_dim();
        assert_eq!(vw.rank(), 2, "weight must be a matrix");
        assert_eq!(vw.shape()[0], k, "linear inner dim mismatch");
        let n = vw.shape()[1];
        let rows = vx.numel() / k;
        let mut data = pool_take_zeroed(rows * n);
        matmul_acc(&mut data, vx.data(), vw.data(), rows, k, n);
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let v = Tensor::new(shape, data).unwrap();
        self.push(v, Op::Linear { x, w }, self.req(&[x, w]))
    }

    /// [..., K] @ w[N, K]^T -> [..., N] (used for the tied unembedding).
    pub fn linear_t(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let (vx, vw) = (self.value(x), self.value(w));
        let k = vx.last_dim();
        assert_eq!(vw.rank(), 2, "weight must be a matrix");
        assert_eq!(vw.shape()[1], k, "linear_t inner dim mismatch");
        let n = vw.shape()[0];
        let rows = vx.numel() / k;
        let wt = transpose(vw.data(), n, k);
        let mut data = pool_take_zeroed(rows * n);
        matmul_acc(&mut data, vx.data(), &wt, rows, k, n);
        pool_put(wt);
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let v = Tensor::new(shape, data).unwrap();
        self.push(v, Op::LinearT { x, w }, self.req(&[x, w]))
    }

    /// Gather rows of `table` [V, D] for each token id; output [B, T, D].
    pub fn embed(&mut self, table: NodeId, tokens: &[u32], batch: usize, seq: usize) -> NodeId {
        let vt = self.value(table);
        assert_eq!(vt.rank(), 2, "embedding table must be a matrix");
        assert_eq!(tokens.len(), batch * seq, "token count mismatch");
        let d = vt.shape()[1];
        let vocab = vt.shape()[0];
        let mut data = pool_take(tokens.len() * d);
        for &t in tokens {
            let t = t as usize;
            assert!(t < vocab, "token id {t} out of range {vocab}");
            data.extend_from_slice(&vt.data()[t * d..(t + 1) * d]);
        }
        let v = Tensor::new(vec![batch, seq, d], data).unwrap();
        self.push(v, Op::Embed { table, tokens: tokens.to_vec() }, self.req(&[table]))
    }

    /// [B, T, D] -> [B, H, T, D/H]
    pub fn split_heads(&mut self, x: NodeId, n_heads: usize) -> NodeId {
        let vx = self.value(x);
        let (b, t, d) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert_eq!(d % n_heads, 0, "d_model not divisible by heads");
        let dh = d / n_heads;
        let mut data = pool_take_zeroed(vx.numel());
        let src = vx.data();
        for bi in 0..b {
            for h in 0..n_heads {
                for ti in 0..t {
                    let dst = ((bi * n_heads + h) * t + ti) * dh;
                    let s = (bi * t + ti) * d + h * dh;
                    data[dst..dst + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
        }
        let v = Tensor::new(vec![b, n_heads, t, dh], data).unwrap();
        self.push(v, Op::SplitHeads { x, n_heads }, self.req(&[x]))
    }

    /// [B, H, T, dh] -> [B, T, H*dh]
    pub fn merge_heads(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let (b, h, t, dh) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let d = h * dh;
        let mut data = pool_take_zeroed(vx.numel());
        let src = vx.data();
        for bi in 0..b {
            for hi in 0..h {
                for ti in 0..t {
                    let s = ((bi * h + hi) * t + ti) * dh;
                    let dst = (bi * t + ti) * d + hi * dh;
                    data[dst..dst + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
        }
        let v = Tensor::new(vec![b, t, d], data).unwrap();
        self.push(v, Op::MergeHeads { x }, self.req(&[x]))
    }

    /// Rotary position embedding on [B, H, T, dh]: consecutive pairs
    /// (2i, 2i+1) rotated by angle pos * theta^(-2i/dh).
    pub fn rope(&mut self, x: NodeId, theta: f64) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.rank(), 4, "rope expects [B, H, T, dh]");
        let (b, h, t, dh) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        assert_eq!(dh % 2, 0, "rope requires an even head dimension");
        let table = rope_table::<F>(t, dh, theta);
        let mut data = pool_take_zeroed(vx.numel());
        let src = vx.data();
        for bh in 0..b * h {
            for ti in 0..t {
                let o = (bh * t + ti) * dh;
                let trig = &table.data()[ti * dh..(ti + 1) * dh];
                for i in 0..dh / 2 {
                    let (c, s) = (trig[2 * i], trig[2 * i + 1]);
                    let (x0, x1) = (src[o + 2 * i], src[o + 2 * i + 1]);
                    data[o + 2 * i] = x0 * c - x1 * s;
                    data[o + 2 * i + 1] = x0 * s + x1 * c;
                }
            }
        }
        let v = Tensor::new(vx.shape().to_vec(), data).unwrap();
        self.push_with_aux(v, Op::Rope { x }, self.req(&[x]), vec![table])
    }

    /// Causal attention scores: q,k [B, H, T, dh] -> [B, H, T, T] with
    /// s[b,h,t,u] = scale * q_t . k_u for u <= t and 0 above the diagonal.
    pub fn causal_scores(&mut self, q: NodeId, k: NodeId, scale: F) -> NodeId {
        let (vq, vk) = (self.value(q), self.value(k));
        assert_eq!(vq.shape(), vk.shape(), "q/k shape mismatch");
        let (b, h, t, dh) = (vq.shape()[0], vq.shape()[1], vq.shape()[2], vq.shape()[3]);
        let mut out = pool_take_zeroed(b * h * t * t);
        let (qd, kd) = (vq.data(), vk.data());
        par_row_ranges(&mut out, t * t, |bh0, rows| {
            for (off, srow) in rows.chunks_exact_mut(t * t).enumerate() {
                let bh = bh0 + off;
                let qb = &qd[bh * t * dh..(bh + 1) * t * dh];
                let kb = &kd[bh * t * dh..(bh + 1) * t * dh];
                let kt = transpose(kb, t, dh); // [dh, T]
                matmul_block(srow, qb, &kt, t, dh, t, dh);
                pool_put(kt);
                for ti in 0..t {
                    for v in &mut srow[ti * t..ti * t + ti + 1] {
                        *v *= scale;
                    }
                    // the contract: entries above the diagonal are zero
                    for v in &mut srow[ti * t + ti + 1..(ti + 1) * t] {
                        *v = F::ZERO;
                    }
                }
            }
        });
        let v = Tensor::new(vec![b, h, t, t], out).unwrap();
        self.push(v, Op::CausalScores { q, k, scale }, self.req(&[q, k]))
    }

    /// Softmax over the causal prefix of each score row; upper triangle is 0.
    pub fn causal_softmax(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let t = vx.shape()[2];
        assert_eq!(vx.shape()[3], t, "scores must be square");
        let mut out = pool_take_zeroed(vx.numel());
        let src = vx.data();
        par_row_ranges(&mut out, t * t, |bh0, blocks| {
            for (off, block) in blocks.chunks_exact_mut(t * t).enumerate() {
                let sb = &src[(bh0 + off) * t * t..(bh0 + off + 1) * t * t];
                for ti in 0..t {
                    let row = &sb[ti * t..ti * t + ti + 1];
                    let orow = &mut block[ti * t..ti * t + ti + 1];
                    let m = row.iter().fold(row[0], |a, &b| a.maxv(b));
                    let mut sum = F::ZERO;
                    for (o, &v) in orow.iter_mut().zip(row) {
                        let e = (v - m).exp();
                        *o = e;
                        sum += e;
                    }
                    let inv = F::ONE / sum;
                    for o in orow.iter_mut() {
                        *o *= inv;
                    }
                }
            }
        });
        let v = Tensor::new(vx.shape().to_vec(), out).unwrap();
        self.push(v, Op::CausalSoftmax { x }, self.req(&[x]))
    }

    /// probs [B, H, T, T] x v [B, H, T, dh] -> [B, H, T, dh]
    pub fn attn_mix(&mut self, probs: NodeId, v: NodeId) -> NodeId {
        let (vp, vv) = (self.value(probs), self.value(v));
        let (b, h, t, dh) = (vv.shape()[0], vv.shape()[1], vv.shape()[2], vv.shape()[3]);
        assert_eq!(vp.shape(), [b, h, t, t], "probs shape mismatch");
        let mut out = pool_take_zeroed(b * h * t * dh);
        let (pd, vd) = (vp.data(), vv.data());
        par_row_ranges(&mut out, t * dh, |bh0, blocks| {
            for (off, block) in blocks.chunks_exact_mut(t * dh).enumerate() {
                let bh = bh0 + off;
                let pb = &pd[bh * t * t..(bh + 1) * t * t];
                let vb = &vd[bh * t * dh..(bh + 1) * t * dh];
                matmul_block(block, pb, vb, t, t, dh, t);
            }
        });
        let val = Tensor::new(vec![b, h, t, dh], out).unwrap();
        self.push(val, Op::AttnMix { probs, v }, self.req(&[probs, v]))
    }

    /// Append `f` [B, T, D] as a new stream: [B, T, N, D] -> [B, T, N+1, D].
    pub fn concat_stream(&mut self, s: NodeId, f: NodeId) -> NodeId {
        let (vs, vf) = (self.value(s), self.value(f));
        let (b, t, n, d) = (vs.shape()[0], vs.shape()[1], vs.shape()[2], vs.shape()[3]);
        assert_eq!(vf.shape(), [b, t, d], "layer output shape mismatch");
        let mut data = pool_take(b * t * (n + 1) * d);
        for bt in 0..b * t {
            data.extend_from_slice(&vs.data()[bt * n * d..(bt + 1) * n * d]);
            data.extend_from_slice(&vf.data()[bt * d..(bt + 1) * d]);
        }
        let v = Tensor::new(vec![b, t, n + 1, d], data).unwrap();
        self.push(v, Op::ConcatStream { s, f }, self.req(&[s, f]))
    }

    /// Per-stream convex update: out = (1-beta) * s + beta * f, with beta
    /// [B, T, N] broadcast over D and f [B, T, D] broadcast over N.
    pub fn lerp_update(&mut self, s: NodeId, f: NodeId, beta: NodeId) -> NodeId {
        let (vs, vf, vb) = (self.value(s), self.value(f), self.value(beta));
        let (b, t, n, d) = (vs.shape()[0], vs.shape()[1], vs.shape()[2], vs.shape()[3]);
        assert_eq!(vf.shape(), [b, t, d], "layer output shape mismatch");
        assert_eq!(vb.shape(), [b, t, n], "beta shape mismatch");
        let mut data = pool_take(vs.numel());
        for bt in 0..b * t {
            let frow = &vf.data()[bt * d..(bt + 1) * d];
            for i in 0..n {
                let beta_v = vb.data()[bt * n + i];
                let keep = F::ONE - beta_v;
                let srow = &vs.data()[(bt * n + i) * d..(bt * n + i + 1) * d];
                for (sv, fv) in srow.iter().zip(frow) {
                    data.push(keep * *sv + beta_v * *fv);
                }
            }
        }
        let v = Tensor::new(vs.shape().to_vec(), data).unwrap();
        self.push(v, Op::LerpUpdate { s, f, beta }, self.req(&[s, f, beta]))
    }

    /// Convex pooling over streams: h = sum_i alpha_i * s_i.
    pub fn stream_pool(&mut self, s: NodeId, alpha: NodeId) -> NodeId {
        let (vs, va) = (self.value(s), self.value(alpha));
        let (b, t, n, d) = (vs.shape()[0], vs.shape()[1], vs.shape()[2], vs.shape()[3]);
        assert_eq!(va.shape(), [b, t, n], "alpha shape mismatch");
        let mut data = pool_take_zeroed(b * t * d);
        for bt in 0..b * t {
            let orow = &mut data[bt * d..(bt + 1) * d];
            for i in 0..n {
                let a = va.data()[bt * n + i];
                axpy(orow, a, &vs.data()[(bt * n + i) * d..(bt * n + i + 1) * d]);
            }
        }
        let v = Tensor::new(vec![b, t, d], data).unwrap();
        self.push(v, Op::StreamPool { s, alpha }, self.req(&[s, alpha]))
    }

    /// Attention pooling over a list of [B, T, D] tensors with query `q`:
    /// alpha = softmax_j((q . rms_norm(x_j)) / sqrt(D)), h = sum_j alpha_j x_j.
    pub fn pool_history(&mut self, inputs: &[NodeId], q: NodeId, eps: F) -> NodeId {
        assert!(!inputs.is_empty(), "history must be non-empty");
        let vq = self.value(q);
        let shape = self.value(inputs[0]).shape().to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        assert_eq!(vq.shape(), [d], "pool query length mismatch");
        let m = inputs.len();
        let scale = F::from_f64(1.0 / (d as f64).sqrt());
        let inv_d = F::from_f64(1.0 / d as f64);
        let qd = vq.data().to_vec();

        // scores[b,t,j]
        let mut scores = vec![F::ZERO; b * t * m];
        for (j, &x) in inputs.iter().enumerate() {
            let vx = self.value(x);
            assert_eq!(vx.shape(), &shape[..], "history entries must share shape");
            for bt in 0..b * t {
                let row = &vx.data()[bt * d..(bt + 1) * d];
                let ss = dot(row, row);
                let r = F::ONE / (ss * inv_d + eps).sqrt();
                scores[bt * m + j] = dot(row, &qd) * r * scale;
            }
        }
        // softmax over j
        let mut alpha = vec![F::ZERO; b * t * m];
        for bt in 0..b * t {
            let row = &scores[bt * m..(bt + 1) * m];
            let mx = row.iter().fold(row[0], |a, &v| a.maxv(v));
            let arow = &mut alpha[bt * m..(bt + 1) * m];
            let mut sum = F::ZERO;
            for (a, &v) in arow.iter_mut().zip(row) {
                let e = (v - mx).exp();
                *a = e;
                sum += e;
            }
            let inv = F::ONE / sum;
            for a in arow.iter_mut() {
                *a *= inv;
            }
        }
        let mut data = vec![F::ZERO; b * t * d];
        for (j, &x) in inputs.iter().enumerate() {
            let vx = self.value(x);
            for bt in 0..b * t {
                axpy(
                    &mut data[bt * d..(bt + 1) * d],
                    alpha[bt * m + j],
                    &vx.data()[bt * d..(bt + 1) * d],
                );
            }
        }
        let alpha_t = Tensor::new(vec![b, t, m], alpha).unwrap();
        let requires = self.req(inputs) || self.req(&[q]);
        let v = Tensor::new(vec![b, t, d], data).unwrap();
        self.push_with_aux(
            v,
            Op::PoolHistory { inputs: inputs.to_vec(), q, eps },
            requires,
            vec![alpha_t],
        )
    }

    /// Pooling weights saved by the most recent `pool_history` node.
    pub fn pool_history_alpha(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].aux[0]
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().fold(F::ZERO, |a, &b| a + b);
        self.push(Tensor::scalar(s), Op::Sum { x }, self.req(&[x]))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel();
        let s = self.value(x).data().iter().fold(F::ZERO, |a, &b| a + b);
        let v = s * F::from_f64(1.0 / n as f64);
        self.push(Tensor::scalar(v), Op::Mean { x }, self.req(&[x]))
    }

    /// Mean token-level negative log-likelihood with stable log-softmax.
    /// logits [..., V] flattened to rows; one target id per row.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u32]) -> NodeId {
        let vl = self.value(logits);
        let vocab = vl.last_dim();
        let rows = vl.numel() / vocab;
        assert_eq!(targets.len(), rows, "target count mismatch");
        let mut probs = pool_take_zeroed(vl.numel());
        let mut loss = F::ZERO;
        for (r, row) in vl.data().chunks_exact(vocab).enumerate() {
            let t = targets[r] as usize;
            assert!(t < vocab, "target id {t} out of vocab {vocab}");
            let m = row.iter().fold(row[0], |a, &b| a.maxv(b));
            let mut sum = F::ZERO;
            let prow = &mut probs[r * vocab..(r + 1) * vocab];
            for (p, &v) in prow.iter_mut().zip(row) {
                let e = (v - m).exp();
                *p = e;
                sum += e;
            }
            let inv = F::ONE / sum;
            for p in prow.iter_mut() {
                *p *= inv;
            }
            // lse = m + ln(sum); nll = lse - logit[t]
            loss += m + sum.ln() - row[t];
        }
        loss *= F::from_f64(1.0 / rows as f64);
        let probs_t = Tensor::new(vl.shape().to_vec(), probs).unwrap();
        let req = self.req(&[logits]);
        self.push_with_aux(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec() },
            req,
            vec![probs_t],
        )
    }

    // ── Reverse sweep ────────────────────────────────────────────────

    /// Populate gradients of every grad-requiring node reachable from `loss`.
    /// `loss` must be scalar. Calling backward twice on one tape is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(MgrError::Usage("loss node is not on this tape".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(MgrError::Usage(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_seeded(&[(loss, Tensor::scalar(F::ONE))])
    }

    /// Reverse sweep with explicit output adjoints. Used when a tape is one
    /// segment of a larger computation and receives gradients from above.
    pub fn backward_seeded(&mut self, seeds: &[(NodeId, Tensor<F>)]) -> Result<()> {
        if self.backward_done {
            return Err(MgrError::Usage(
                "backward called twice on one tape; rebuild the forward pass first".into(),
            ));
        }
        let mut start = 0usize;
        for (id, seed) in seeds {
            if id.0 >= self.nodes.len() {
                return Err(MgrError::Usage("seed node is not on this tape".into()));
            }
            if seed.shape() != self.nodes[id.0].value.shape() {
                return Err(MgrError::Usage(format!(
                    "seed shape {:?} does not match node shape {:?}",
                    seed.shape(),
                    self.nodes[id.0].value.shape()
                )));
            }
            start = start.max(id.0);
            let n = seed.numel();
            let buf = self.grads[id.0].get_or_insert_with(|| pool_take_zeroed(n));
            axpy(buf, F::ONE, seed.data());
        }
        self.backward_done = true;

        for idx in (0..=start).rev() {
            if !self.nodes[idx].requires_grad || self.grads[idx].is_none() {
                continue;
            }
            let g = self.grads[idx].take().unwrap();
            step_backward(&self.nodes, &mut self.grads, idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

}

fn need<F: Real>(nodes: &[Node<F>], id: NodeId) -> bool {
    nodes[id.0].requires_grad
}

// Accumulate into a node's gradient buffer. Nodes are only read and grads
// only written, so the two borrows never alias.
fn acc<F: Real>(
    nodes: &[Node<F>],
    grads: &mut [Option<Vec<F>>],
    id: NodeId,
    f: impl FnOnce(&mut [F]),
) {
    if !need(nodes, id) {
        return;
    }
    let n = nodes[id.0].value.numel();
    let buf = grads[id.0].get_or_insert_with(|| pool_take_zeroed(n));
    f(buf);
}

#[allow(clippy::too_many_lines)]
fn step_backward<F: Real>(
    nodes: &[Node<F>],
    grads: &mut [Option<Vec<F>>],
    idx: usize,
    g: &[F],
) {
    match &nodes[idx].op {
        Op::Leaf => {}
        Op::Reshape { x } => {
            acc(nodes, grads, *x, |gx| axpy(gx, F::ONE, g));
        }
        Op::Add { a, b } => {
            acc(nodes, grads, *a, |ga| axpy(ga, F::ONE, g));
            acc(nodes, grads, *b, |gb| axpy(gb, F::ONE, g));
        }
        Op::Sub { a, b } => {
            acc(nodes, grads, *a, |ga| axpy(ga, F::ONE, g));
            acc(nodes, grads, *b, |gb| axpy(gb, -F::ONE, g));
        }
        Op::Mul { a, b } => {
            let va = nodes[a.0].value.data();
            let vb = nodes[b.0].value.data();
            acc(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] = g[i].mul_add(vb[i], ga[i]);
                }
            });
            acc(nodes, grads, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] = g[i].mul_add(va[i], gb[i]);
                }
            });
        }
        Op::Scale { x, c } => {
            acc(nodes, grads, *x, |gx| axpy(gx, *c, g));
        }
        Op::AddBiasLast { x, b } => {
            let l = nodes[b.0].value.numel();
            acc(nodes, grads, *x, |gx| axpy(gx, F::ONE, g));
            acc(nodes, grads, *b, |gb| {
                for row in g.chunks_exact(l) {
                    axpy(gb, F::ONE, row);
                }
            });
        }
        Op::MulGainLast { x, g: gain } => {
            let l = nodes[gain.0].value.numel();
            let gv = nodes[gain.0].value.data();
            let xv = nodes[x.0].value.data();
            acc(nodes, grads, *x, |gx| {
                for (r, row) in g.chunks_exact(l).enumerate() {
                    for j in 0..l {
                        gx[r * l + j] = row[j].mul_add(gv[j], gx[r * l + j]);
                    }
                }
            });
            acc(nodes, grads, *gain, |gg| {
                for (r, row) in g.chunks_exact(l).enumerate() {
                    for j in 0..l {
                        gg[j] = row[j].mul_add(xv[r * l + j], gg[j]);
                    }
                }
            });
        }
        Op::DotLast { x, w } => {
            let d = nodes[w.0].value.numel();
            let wv = nodes[w.0].value.data();
            let xv = nodes[x.0].value.data();
            acc(nodes, grads, *x, |gx| {
                for (r, &gr) in g.iter().enumerate() {
                    axpy(&mut gx[r * d..(r + 1) * d], gr, wv);
                }
            });
            acc(nodes, grads, *w, |gw| {
                for (r, &gr) in g.iter().enumerate() {
                    axpy(gw, gr, &xv[r * d..(r + 1) * d]);
                }
            });
        }
        Op::Sigmoid { x } => {
            let yv = nodes[idx].value.data();
            acc(nodes, grads, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * yv[i] * (F::ONE - yv[i]);
                }
            });
        }
        Op::ReluSquared { x } => {
            let xv = nodes[x.0].value.data();
            let two = F::from_f64(2.0);
            acc(nodes, grads, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * two * xv[i].maxv(F::ZERO);
                }
            });
        }
        Op::RmsNorm { x, eps } => {
            let d = nodes[x.0].value.last_dim();
            let inv_d = F::from_f64(1.0 / d as f64);
            let xv = nodes[x.0].value.data();
            let eps = *eps;
            acc(nodes, grads, *x, |gx| {
                for (r, grow) in g.chunks_exact(d).enumerate() {
                    let xrow = &xv[r * d..(r + 1) * d];
                    let ss = dot(xrow, xrow);
                    let r1 = F::ONE / (ss * inv_d + eps).sqrt();
                    let gdotx = dot(grow, xrow);
                    let coef = r1 * r1 * r1 * gdotx * inv_d;
                    let grow_out = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        grow_out[j] += r1 * grow[j] - coef * xrow[j];
                    }
                }
            });
        }
        Op::SoftmaxLast { x } => {
            let d = nodes[idx].value.last_dim();
            let yv = nodes[idx].value.data();
            acc(nodes, grads, *x, |gx| {
                for (r, grow) in g.chunks_exact(d).enumerate() {
                    let yrow = &yv[r * d..(r + 1) * d];
                    let s = dot(grow, yrow);
                    let grow_out = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        grow_out[j] += yrow[j] * (grow[j] - s);
                    }
                }
            });
        }
        Op::PadFrontLast { x } => {
            let d = nodes[x.0].value.last_dim();
            acc(nodes, grads, *x, |gx| {
                for (r, grow) in g.chunks_exact(d + 1).enumerate() {
                    axpy(&mut gx[r * d..(r + 1) * d], F::ONE, &grow[1..]);
                }
            });
        }
        Op::NarrowLast { x, start, len } => {
            let (start, len) = (*start, *len);
            let d = nodes[x.0].value.last_dim();
            acc(nodes, grads, *x, |gx| {
                for (r, grow) in g.chunks_exact(len).enumerate() {
                    axpy(&mut gx[r * d + start..r * d + start + len], F::ONE, grow);
                }
            });
        }
        Op::Linear { x, w } => {
            let k = nodes[x.0].value.last_dim();
            let n = nodes[w.0].value.shape()[1];
            let rows = nodes[x.0].value.numel() / k;
            let wv = nodes[w.0].value.data();
            let xv = nodes[x.0].value.data();
            acc(nodes, grads, *x, |gx| {
                let wt = transpose(wv, k, n);
                matmul_acc(gx, g, &wt, rows, n, k);
                pool_put(wt);
            });
            acc(nodes, grads, *w, |gw| {
                let xt = transpose(xv, rows, k);
                matmul_acc(gw, &xt, g, k, rows, n);
                pool_put(xt);
            });
        }
        Op::LinearT { x, w } => {
            let k = nodes[x.0].value.last_dim();
            let n = nodes[w.0].value.shape()[0];
            let rows = nodes[x.0].value.numel() / k;
            let wv = nodes[w.0].value.data();
            let xv = nodes[x.0].value.data();
            acc(nodes, grads, *x, |gx| {
                matmul_acc(gx, g, wv, rows, n, k);
            });
            acc(nodes, grads, *w, |gw| {
                let gt = transpose(g, rows, n);
                matmul_acc(gw, &gt, xv, n, rows, k);
                pool_put(gt);
            });
        }
        Op::Embed { table, tokens } => {
            let d = nodes[table.0].value.shape()[1];
            acc(nodes, grads, *table, |gt| {
                for (r, &tok) in tokens.iter().enumerate() {
                    let t = tok as usize;
                    axpy(&mut gt[t * d..(t + 1) * d], F::ONE, &g[r * d..(r + 1) * d]);
                }
            });
        }
        Op::SplitHeads { x, n_heads } => {
            let hn = *n_heads;
            let sh = nodes[idx].value.shape();
            let (b, t, dh) = (sh[0], sh[2], sh[3]);
            let d = hn * dh;
            acc(nodes, grads, *x, |gx| {
                for bi in 0..b {
                    for h in 0..hn {
                        for ti in 0..t {
                            let src = ((bi * hn + h) * t + ti) * dh;
                            let dst = (bi * t + ti) * d + h * dh;
                            axpy(&mut gx[dst..dst + dh], F::ONE, &g[src..src + dh]);
                        }
                    }
                }
            });
        }
        Op::MergeHeads { x } => {
            let sh = nodes[x.0].value.shape();
            let (b, hn, t, dh) = (sh[0], sh[1], sh[2], sh[3]);
            let d = hn * dh;
            acc(nodes, grads, *x, |gx| {
                for bi in 0..b {
                    for h in 0..hn {
                        for ti in 0..t {
                            let dst = ((bi * hn + h) * t + ti) * dh;
                            let src = (bi * t + ti) * d + h * dh;
                            axpy(&mut gx[dst..dst + dh], F::ONE, &g[src..src + dh]);
                        }
                    }
                }
            });
        }
        Op::Rope { x } => {
            let table = nodes[idx].aux[0].data();
            let sh = nodes[x.0].value.shape();
            let (b, h, t, dh) = (sh[0], sh[1], sh[2], sh[3]);
            acc(nodes, grads, *x, |gx| {
                for bh in 0..b * h {
                    for ti in 0..t {
                        let o = (bh * t + ti) * dh;
                        let trig = &table[ti * dh..(ti + 1) * dh];
                        for i in 0..dh / 2 {
                            let (c, s) = (trig[2 * i], trig[2 * i + 1]);
                            let (g0, g1) = (g[o + 2 * i], g[o + 2 * i + 1]);
                            gx[o + 2 * i] += g0 * c + g1 * s;
                            gx[o + 2 * i + 1] += -g0 * s + g1 * c;
                        }
                    }
                }
            });
        }
        Op::CausalScores { q, k, scale } => {
            let scale = *scale;
            let sh = nodes[q.0].value.shape();
            let (t, dh) = (sh[2], sh[3]);
            let qv = nodes[q.0].value.data();
            let kv = nodes[k.0].value.data();
            acc(nodes, grads, *q, |gq| {
                par_row_ranges(gq, t * dh, |bh0, blocks| {
                    for (off, block) in blocks.chunks_exact_mut(t * dh).enumerate() {
                        let bh = bh0 + off;
                        let kb = &kv[bh * t * dh..(bh + 1) * t * dh];
                        let gb = &g[bh * t * t..(bh + 1) * t * t];
                        // dq = scale * g @ K; entries above the diagonal of
                        // g are zero, so the dense product is exact
                        let mut scaled = pool_take(t * t);
                        scaled.extend(gb.iter().map(|&v| v * scale));
                        matmul_block(block, &scaled, kb, t, t, dh, t);
                        pool_put(scaled);
                    }
                });
            });
            acc(nodes, grads, *k, |gk| {
                par_row_ranges(gk, t * dh, |bh0, blocks| {
                    for (off, block) in blocks.chunks_exact_mut(t * dh).enumerate() {
                        let bh = bh0 + off;
                        let qb = &qv[bh * t * dh..(bh + 1) * t * dh];
                        let gb = &g[bh * t * t..(bh + 1) * t * t];
                        // dk = scale * g^T @ Q
                        let mut gt = transpose(gb, t, t);
                        for v in gt.iter_mut() {
                            *v *= scale;
                        }
                        matmul_block(block, &gt, qb, t, t, dh, t);
                        pool_put(gt);
                    }
                });
            });
        }
        Op::CausalSoftmax { x } => {
            let sh = nodes[idx].value.shape();
            let t = sh[2];
            let yv = nodes[idx].value.data();
            acc(nodes, grads, *x, |gx| {
                par_row_ranges(gx, t * t, |bh0, blocks| {
                    for (off, block) in blocks.chunks_exact_mut(t * t).enumerate() {
                        let bh = bh0 + off;
                        let yb = &yv[bh * t * t..(bh + 1) * t * t];
                        let gb = &g[bh * t * t..(bh + 1) * t * t];
                        for ti in 0..t {
                            let yrow = &yb[ti * t..ti * t + ti + 1];
                            let grow = &gb[ti * t..ti * t + ti + 1];
                            let s = dot(grow, yrow);
                            let orow = &mut block[ti * t..ti * t + ti + 1];
                            for j in 0..yrow.len() {
                                orow[j] += yrow[j] * (grow[j] - s);
                            }
                        }
                    }
                });
            });
        }
        Op::AttnMix { probs, v } => {
            let sh = nodes[v.0].value.shape();
            let (t, dh) = (sh[2], sh[3]);
            let pv = nodes[probs.0].value.data();
            let vv = nodes[v.0].value.data();
            acc(nodes, grads, *probs, |gp| {
                par_row_ranges(gp, t * t, |bh0, blocks| {
                    for (off, block) in blocks.chunks_exact_mut(t * t).enumerate() {
                        let bh = bh0 + off;
                        let vb = &vv[bh * t * dh..(bh + 1) * t * dh];
                        let gb = &g[bh * t * dh..(bh + 1) * t * dh];
                        // dense dP = g @ V^T; the entries this writes above
                        // the diagonal belong to constant-zero probs and are
                        // never read by the softmax backward
                        let vt = transpose(vb, t, dh);
                        matmul_block(block, gb, &vt, t, dh, t, dh);
                        pool_put(vt);
                    }
                });
            });
            acc(nodes, grads, *v, |gv| {
                par_row_ranges(gv, t * dh, |bh0, blocks| {
                    for (off, block) in blocks.chunks_exact_mut(t * dh).enumerate() {
                        let bh = bh0 + off;
                        let pb = &pv[bh * t * t..(bh + 1) * t * t];
                        let gb = &g[bh * t * dh..(bh + 1) * t * dh];
                        // dV = P^T @ g, exact because P is zero above the diagonal
                        let pt = transpose(pb, t, t);
                        matmul_block(block, &pt, gb, t, t, dh, t);
                        pool_put(pt);
                    }
                });
            });
        }
        Op::ConcatStream { s, f } => {
            let sh = nodes[s.0].value.shape();
            let (b, t, n, d) = (sh[0], sh[1], sh[2], sh[3]);
            acc(nodes, grads, *s, |gs| {
                for bt in 0..b * t {
                    axpy(
                        &mut gs[bt * n * d..(bt + 1) * n * d],
                        F::ONE,
                        &g[bt * (n + 1) * d..bt * (n + 1) * d + n * d],
                    );
                }
            });
            acc(nodes, grads, *f, |gf| {
                for bt in 0..b * t {
                    axpy(
                        &mut gf[bt * d..(bt + 1) * d],
                        F::ONE,
                        &g[bt * (n + 1) * d + n * d..(bt + 1) * (n + 1) * d],
                    );
                }
            });
        }
        Op::LerpUpdate { s, f, beta } => {
            let sh = nodes[s.0].value.shape();
            let (b, t, n, d) = (sh[0], sh[1], sh[2], sh[3]);
            let sv = nodes[s.0].value.data();
            let fv = nodes[f.0].value.data();
            let bv = nodes[beta.0].value.data();
            acc(nodes, grads, *s, |gs| {
                for bt in 0..b * t {
                    for i in 0..n {
                        let keep = F::ONE - bv[bt * n + i];
                        let o = (bt * n + i) * d;
                        axpy(&mut gs[o..o + d], keep, &g[o..o + d]);
                    }
                }
            });
            acc(nodes, grads, *f, |gf| {
                for bt in 0..b * t {
                    for i in 0..n {
                        let o = (bt * n + i) * d;
                        axpy(&mut gf[bt * d..(bt + 1) * d], bv[bt * n + i], &g[o..o + d]);
                    }
                }
            });
            acc(nodes, grads, *beta, |gb| {
                for bt in 0..b * t {
                    let frow = &fv[bt * d..(bt + 1) * d];
                    for i in 0..n {
                        let o = (bt * n + i) * d;
                        let mut acc_v = F::ZERO;
                        for j in 0..d {
                            acc_v += g[o + j] * (frow[j] - sv[o + j]);
                        }
                        gb[bt * n + i] += acc_v;
                    }
                }
            });
        }
        Op::StreamPool { s, alpha } => {
            let sh = nodes[s.0].value.shape();
            let (b, t, n, d) = (sh[0], sh[1], sh[2], sh[3]);
            let sv = nodes[s.0].value.data();
            let av = nodes[alpha.0].value.data();
            acc(nodes, grads, *s, |gs| {
                for bt in 0..b * t {
                    let grow = &g[bt * d..(bt + 1) * d];
                    for i in 0..n {
                        let o = (bt * n + i) * d;
                        axpy(&mut gs[o..o + d], av[bt * n + i], grow);
                    }
                }
            });
            acc(nodes, grads, *alpha, |ga| {
                for bt in 0..b * t {
                    let grow = &g[bt * d..(bt + 1) * d];
                    for i in 0..n {
                        let o = (bt * n + i) * d;
                        ga[bt * n + i] += dot(grow, &sv[o..o + d]);
                    }
                }
            });
        }
        Op::PoolHistory { inputs, q, eps } => {
            let eps = *eps;
            let m = inputs.len();
            let sh = nodes[inputs[0].0].value.shape();
            let (b, t, d) = (sh[0], sh[1], sh[2]);
            let scale = F::from_f64(1.0 / (d as f64).sqrt());
            let inv_d = F::from_f64(1.0 / d as f64);
            let alpha = nodes[idx].aux[0].data();
            let qv = nodes[q.0].value.data();
            let x_of = |j: usize| nodes[inputs[j].0].value.data();

            // dscore[b,t,j] via softmax backward with dalpha_j = g . x_j
            let mut dscore = vec![F::ZERO; b * t * m];
            for bt in 0..b * t {
                let grow = &g[bt * d..(bt + 1) * d];
                let arow = &alpha[bt * m..(bt + 1) * m];
                let mut dal = vec![F::ZERO; m];
                for (j, dv) in dal.iter_mut().enumerate() {
                    *dv = dot(grow, &x_of(j)[bt * d..(bt + 1) * d]);
                }
                let s = dot(&dal, arow);
                for j in 0..m {
                    dscore[bt * m + j] = arow[j] * (dal[j] - s);
                }
            }
            acc(nodes, grads, *q, |gq| {
                for j in 0..m {
                    let xj = x_of(j);
                    for bt in 0..b * t {
                        let row = &xj[bt * d..(bt + 1) * d];
                        let ss = dot(row, row);
                        let r1 = F::ONE / (ss * inv_d + eps).sqrt();
                        axpy(gq, dscore[bt * m + j] * scale * r1, row);
                    }
                }
            });
            for (j, &xid) in inputs.iter().enumerate() {
                let xj = x_of(j);
                acc(nodes, grads, xid, |gx| {
                    for bt in 0..b * t {
                        let grow = &g[bt * d..(bt + 1) * d];
                        let row = &xj[bt * d..(bt + 1) * d];
                        let a = alpha[bt * m + j];
                        let ds = dscore[bt * m + j] * scale;
                        // direct convex-mix term
                        axpy(&mut gx[bt * d..(bt + 1) * d], a, grow);
                        // score term through rms_norm: d/dx (q . rmsnorm(x))
                        let ss = dot(row, row);
                        let r1 = F::ONE / (ss * inv_d + eps).sqrt();
                        let qdotx = dot(qv, row);
                        let coef = r1 * r1 * r1 * qdotx * inv_d;
                        let gxrow = &mut gx[bt * d..(bt + 1) * d];
                        for p in 0..d {
                            gxrow[p] += ds * (r1 * qv[p] - coef * row[p]);
                        }
                    }
                });
            }
        }
        Op::Sum { x } => {
            let gs = g[0];
            acc(nodes, grads, *x, |gx| {
                for v in gx.iter_mut() {
                    *v += gs;
                }
            });
        }
        Op::Mean { x } => {
            let n = nodes[x.0].value.numel();
            let gs = g[0] * F::from_f64(1.0 / n as f64);
            acc(nodes, grads, *x, |gx| {
                for v in gx.iter_mut() {
                    *v += gs;
                }
            });
        }
        Op::CrossEntropy { logits, targets } => {
            let vocab = nodes[logits.0].value.last_dim();
            let rows = targets.len();
            let inv = g[0] * F::from_f64(1.0 / rows as f64);
            let probs = nodes[idx].aux[0].data();
            acc(nodes, grads, *logits, |gl| {
                for r in 0..rows {
                    let t = targets[r] as usize;
                    let prow = &probs[r * vocab..(r + 1) * vocab];
                    let grow = &mut gl[r * vocab..(r + 1) * vocab];
                    for v in 0..vocab {
                        grow[v] += inv * prow[v];
                    }
                    grow[t] -= inv;
                }
            });
        }
    }
}

#[inline]
fn sigmoid_scalar<F: Real>(x: F) -> F {
    // Branch on sign so neither branch exponentiates a large positive value.
    if x >= F::ZERO {
        F::ONE / (F::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::ONE + e)
    }
}

/// cos/sin table for rope: [T, dh] with (cos, sin) interleaved per pair.
fn rope_table<F: Real>(t: usize, dh: usize, theta: f64) -> Tensor<F> {
    let mut data = Vec::with_capacity(t * dh);
    for pos in 0..t {
        for i in 0..dh / 2 {
            let freq = theta.powf(-2.0 * i as f64 / dh as f64);
            let angle = pos as f64 * freq;
            data.push(F::from_f64(angle.cos()));
            data.push(F::from_f64(angle.sin()));
        }
    }
    Tensor::new(vec![t, dh], data).unwrap()
}

/// Numerically symmetric sigmoid, exposed for value-level code.
pub fn sigmoid<F: Real>(x: F) -> F {
    sigmoid_scalar(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t<F: Real>(shape: &[usize], vals: &[f64]) -> Tensor<F> {
        Tensor::new(shape.to_vec(), vals.iter().map(|&v| F::from_f64(v)).collect()).unwrap()
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_sum_of_squares_grad_is_x() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 3.0]), true);
        let sq = tape.mul(x, x);
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn backward_twice_is_usage_error() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(MgrError::Usage(_))));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(MgrError::Usage(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(t(&[2, 3], &[0.0, 1.0, -1.0, 5.0, 5.0, 5.0]), false);
        let y = tape.softmax_last(x);
        for row in tape.value(y).data().chunks_exact(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_handles_large_logits() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(t(&[1, 2], &[1000.0, 0.0]), false);
        let y = tape.softmax_last(x);
        let v = tape.value(y).data();
        assert!(v[0] > 0.999999 && v[1] < 1e-6);
        assert!(v.iter().all(|a| a.is_finite()));
    }

    #[test]
    fn softmax_two_thirds_case() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(t(&[1, 2], &[2.0f64.ln(), 0.0]), false);
        let y = tape.softmax_last(x);
        let v = tape.value(y).data();
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((v[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(-2.838232312f64) - 0.055293).abs() < 1e-6);
        assert_eq!(sigmoid(40.0f32), 1.0);
        assert!(sigmoid(-40.0f32) >= 0.0 && sigmoid(-40.0f32) < 1e-15);
        assert!(sigmoid(-40.0f64).is_finite());
    }

    #[test]
    fn rms_norm_hand_case() {
        // (3, 4): rms = sqrt(12.5) -> (0.848528, 1.131371)
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(t(&[1, 2], &[3.0, 4.0]), false);
        let y = tape.rms_norm(x, 0.0);
        let v = tape.value(y).data();
        assert!((v[0] - 0.848528).abs() < 1e-6);
        assert!((v[1] - 1.131371).abs() < 1e-6);
    }

    #[test]
    fn rms_norm_constant_vector_is_ones() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::full(vec![1, 5], 2.5f64), false);
        let y = tape.rms_norm(x, 0.0);
        for &v in tape.value(y).data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rms_norm_zeros_with_eps_are_zeros() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 4]), false);
        let y = tape.rms_norm(x, 1e-6);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(t(&[1, 1, 1, 4], &[1.0, 2.0, 3.0, 4.0]), false);
        let y = tape.rope(x, 10000.0);
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn rope_single_pair_rotation() {
        // pos=1, dh=2: angle = 1, (1, 0) -> (cos 1, sin 1)
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 0.0, 1.0, 0.0]), false);
        let y = tape.rope(x, 123.456);
        let v = tape.value(y).data();
        assert!((v[2] - 1.0f64.cos()).abs() < 1e-12);
        assert!((v[3] - 1.0f64.sin()).abs() < 1e-12);
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let mut rng = crate::rng::Rng::new(5);
        let mut tape = GradTape::<f64>::new();
        let vals: Vec<f64> = (0..2 * 3 * 7 * 8).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let x = tape.leaf(Tensor::new(vec![2, 3, 7, 8], vals).unwrap(), false);
        let y = tape.rope(x, 10000.0);
        let (xin, yout) = (tape.value(x).data(), tape.value(y).data());
        for i in (0..xin.len()).step_by(2) {
            let nin = (xin[i] * xin[i] + xin[i + 1] * xin[i + 1]).sqrt();
            let nout = (yout[i] * yout[i] + yout[i + 1] * yout[i + 1]).sqrt();
            assert!((nin - nout).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 256]), false);
        let loss = tape.cross_entropy(x, &[17]);
        assert!((tape.value(loss).item() - 256.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_logit() {
        let mut tape = GradTape::<f64>::new();
        let mut vals = vec![0.0; 16];
        vals[3] = 50.0;
        let x = tape.leaf(t(&[1, 16], &vals), false);
        let loss = tape.cross_entropy(x, &[3]);
        assert!(tape.value(loss).item() < 1e-12);
    }

    #[test]
    fn cross_entropy_grad_is_softmax_minus_onehot() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(t(&[1, 3], &[0.1, 0.2, 0.3]), true);
        let loss = tape.cross_entropy(x, &[1]);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        let mut tape2 = GradTape::<f64>::new();
        let x2 = tape2.leaf(t(&[1, 3], &[0.1, 0.2, 0.3]), false);
        let sm = tape2.softmax_last(x2);
        let p = tape2.value(sm).data();
        assert!((g.data()[0] - p[0]).abs() < 1e-12);
        assert!((g.data()[1] - (p[1] - 1.0)).abs() < 1e-12);
        assert!((g.data()[2] - p[2]).abs() < 1e-12);
    }

    #[test]
    fn causal_scores_match_reference() {
        let mut rng = crate::rng::Rng::new(3);
        let (b, h, tt, dh) = (2, 2, 5, 4);
        let qv: Vec<f64> = (0..b * h * tt * dh).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let kv: Vec<f64> = (0..b * h * tt * dh).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut tape = GradTape::<f64>::new();
        let q = tape.leaf(Tensor::new(vec![b, h, tt, dh], qv.clone()).unwrap(), false);
        let k = tape.leaf(Tensor::new(vec![b, h, tt, dh], kv.clone()).unwrap(), false);
        let s = tape.causal_scores(q, k, 0.5);
        let sv = tape.value(s).data();
        for bi in 0..b {
            for hi in 0..h {
                for ti in 0..tt {
                    for u in 0..tt {
                        let mut want = 0.0;
                        if u <= ti {
                            for p in 0..dh {
                                want += qv[((bi * h + hi) * tt + ti) * dh + p]
                                    * kv[((bi * h + hi) * tt + u) * dh + p];
                            }
                            want *= 0.5;
                        }
                        let got = sv[((bi * h + hi) * tt + ti) * tt + u];
                        assert!((got - want).abs() < 1e-12, "mismatch at {bi},{hi},{ti},{u}");
                    }
                }
            }
        }
    }

    #[test]
    fn lerp_update_midpoint_and_limits() {
        let mut tape = GradTape::<f64>::new();
        let s = tape.leaf(t(&[1, 1, 1, 2], &[1.0, 0.0]), false);
        let f = tape.leaf(t(&[1, 1, 2], &[0.0, 1.0]), false);
        let half = tape.leaf(t(&[1, 1, 1], &[0.5]), false);
        let mid = tape.lerp_update(s, f, half);
        assert_eq!(tape.value(mid).data(), &[0.5, 0.5]);
        let zero = tape.leaf(t(&[1, 1, 1], &[0.0]), false);
        let same = tape.lerp_update(s, f, zero);
        assert_eq!(tape.value(same).data(), tape.value(s).data());
        let one = tape.leaf(t(&[1, 1, 1], &[1.0]), false);
        let repl = tape.lerp_update(s, f, one);
        assert_eq!(tape.value(repl).data(), tape.value(f).data());
    }

    #[test]
    fn stream_pool_uniform_alpha_is_mean() {
        let mut tape = GradTape::<f64>::new();
        let s = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let a = tape.leaf(t(&[1, 1, 2], &[0.5, 0.5]), false);
        let h = tape.stream_pool(s, a);
        assert_eq!(tape.value(h).data(), &[2.0, 3.0]);
    }
}
