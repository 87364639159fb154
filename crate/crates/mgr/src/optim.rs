//! Optimizers and schedules: orthogonalized-momentum updates for hidden
//! weight matrices, AdamW for everything else, cosine decay with linear
//! warmup, and global gradient clipping.

use crate::error::{MgrError, Result};
use crate::model::{ModelParams, ParamKind};
use crate::tensor::{matmul, Real, Tensor};

/// Quintic iteration coefficients for the orthogonalization polynomial
/// X <- a X + b (XX^T) X + c (XX^T)^2 X (de-facto reference constants).
pub const NS_COEFFS: (f64, f64, f64) = (3.4445, -4.7750, 2.0315);

/// Default iteration count for the orthogonalization.
pub const NS_ITERS: usize = 5;

#[derive(Clone, Debug)]
pub struct OptimConfig {
    pub adamw_lr: f64,
    pub muon_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adamw_eps: f64,
    pub weight_decay: f64,
    pub muon_momentum: f64,
    pub ns_iters: usize,
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            adamw_lr: 3e-3,
            muon_lr: 1e-2,
            beta1: 0.9,
            beta2: 0.95,
            adamw_eps: 1e-8,
            weight_decay: 0.1,
            muon_momentum: 0.95,
            ns_iters: NS_ITERS,
            grad_clip: 1.0,
        }
    }
}

/// Which update rule a parameter gets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Muon,
    AdamW,
}

/// Hidden 2-D matrices take the orthogonalized update; vectors, biases,
/// gains and the (tied) embedding take AdamW.
pub fn group_of(kind: ParamKind) -> Group {
    match kind {
        ParamKind::Matrix => Group::Muon,
        ParamKind::Vector | ParamKind::Embedding => Group::AdamW,
    }
}

/// Per-parameter optimizer state.
enum State<F: Real> {
    Muon { momentum: Vec<F> },
    AdamW { m: Vec<F>, v: Vec<F> },
}

pub struct Optimizer<F: Real> {
    pub cfg: OptimConfig,
    states: Vec<State<F>>,
    step_count: u64,
}

impl<F: Real> Optimizer<F> {
    pub fn new<G: Real>(cfg: OptimConfig, params: &ModelParams<G>) -> Self {
        let states = params
            .entries()
            .iter()
            .map(|e| match group_of(e.kind) {
                Group::Muon => State::Muon { momentum: vec![F::ZERO; e.tensor.numel()] },
                Group::AdamW => State::AdamW {
                    m: vec![F::ZERO; e.tensor.numel()],
                    v: vec![F::ZERO; e.tensor.numel()],
                },
            })
            .collect();
        Optimizer { cfg, states, step_count: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update. `grads` must be parallel to the parameter list;
    /// `lr_scale` is the schedule multiplier applied to both peak rates.
    pub fn step(&mut self, params: &mut ModelParams<F>, grads: &[Vec<F>], lr_scale: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(MgrError::Usage(format!(
                "got {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count;
        for i in 0..params.len() {
            let entry = params.entry_mut(i);
            match &mut self.states[i] {
                State::Muon { momentum } => {
                    let shape = entry.tensor.shape().to_vec();
                    if shape.len() != 2 {
                        return Err(MgrError::Usage(format!(
                            "parameter '{}' grouped for matrix updates has shape {shape:?}",
                            entry.name
                        )));
                    }
                    muon_step(
                        &mut entry.tensor,
                        &grads[i],
                        momentum,
                        self.cfg.muon_lr * lr_scale,
                        self.cfg.muon_momentum,
                        self.cfg.ns_iters,
                    );
                }
                State::AdamW { m, v } => {
                    adamw_step(
                        &mut entry.tensor,
                        &grads[i],
                        m,
                        v,
                        t,
                        self.cfg.adamw_lr * lr_scale,
                        (self.cfg.beta1, self.cfg.beta2),
                        self.cfg.adamw_eps,
                        self.cfg.weight_decay,
                    );
                }
            }
        }
        Ok(())
    }

    /// Optimizer state tensors for checkpointing, in deterministic order.
    pub fn state_tensors(&self, params: &ModelParams<F>) -> Vec<(String, Vec<F>)> {
        let mut out = Vec::new();
        for (i, s) in self.states.iter().enumerate() {
            let name = &params.entry(i).name;
            match s {
                State::Muon { momentum } => {
                    out.push((format!("optim.{name}.momentum"), momentum.clone()));
                }
                State::AdamW { m, v } => {
                    out.push((format!("optim.{name}.m"), m.clone()));
                    out.push((format!("optim.{name}.v"), v.clone()));
                }
            }
        }
        out
    }

    /// Restore state tensors written by [`Optimizer::state_tensors`].
    pub fn restore(
        &mut self,
        params: &ModelParams<F>,
        mut lookup: impl FnMut(&str) -> Option<Vec<F>>,
        step_count: u64,
    ) -> Result<()> {
        for (i, s) in self.states.iter_mut().enumerate() {
            let name = &params.entry(i).name;
            let mut take = |suffix: &str, buf: &mut Vec<F>| -> Result<()> {
                let key = format!("optim.{name}.{suffix}");
                let data = lookup(&key)
                    .ok_or_else(|| MgrError::Format(format!("checkpoint misses '{key}'")))?;
                if data.len() != buf.len() {
                    return Err(MgrError::Shape(format!(
                        "optimizer state '{key}' has {} values, expected {}",
                        data.len(),
                        buf.len()
                    )));
                }
                *buf = data;
                Ok(())
            };
            match s {
                State::Muon { momentum } => take("momentum", momentum)?,
                State::AdamW { m, v } => {
                    take("m", m)?;
                    take("v", v)?;
                }
            }
        }
        self.step_count = step_count;
        Ok(())
    }
}

/// Decoupled-weight-decay Adam with bias correction, in place.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step<F: Real>(
    param: &mut Tensor<F>,
    grad: &[F],
    m: &mut [F],
    v: &mut [F],
    t: u64,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) {
    let (b1, b2) = (F::from_f64(betas.0), F::from_f64(betas.1));
    let one_m_b1 = F::ONE - b1;
    let one_m_b2 = F::ONE - b2;
    let bc1 = F::from_f64(1.0 - betas.0.powi(t as i32));
    let bc2 = F::from_f64(1.0 - betas.1.powi(t as i32));
    let lr_f = F::from_f64(lr);
    let eps_f = F::from_f64(eps);
    let decay = F::from_f64(lr * weight_decay);
    for (i, p) in param.data_mut().iter_mut().enumerate() {
        let g = grad[i];
        m[i] = b1 * m[i] + one_m_b1 * g;
        v[i] = b2 * v[i] + one_m_b2 * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        let update = m_hat / (v_hat.sqrt() + eps_f);
        *p = *p - lr_f * update - decay * *p;
    }
}

/// Orthogonalized-momentum update for a 2-D weight matrix, in place:
/// momentum accumulates the raw gradient, the momentum matrix is
/// approximately orthogonalized, and the step is scaled by
/// sqrt(max(rows, cols) / min(rows, cols)).
pub fn muon_step<F: Real>(
    param: &mut Tensor<F>,
    grad: &[F],
    momentum: &mut [F],
    lr: f64,
    mu: f64,
    ns_iters: usize,
) {
    let mu_f = F::from_f64(mu);
    for (mv, &g) in momentum.iter_mut().zip(grad) {
        *mv = mu_f * *mv + g;
    }
    let (rows, cols) = (param.shape()[0], param.shape()[1]);
    let ortho = newton_schulz_orthogonalize(momentum, rows, cols, ns_iters);
    let scale = (rows.max(cols) as f64 / rows.min(cols) as f64).sqrt();
    let step = F::from_f64(lr * scale);
    for (p, o) in param.data_mut().iter_mut().zip(&ortho) {
        *p -= step * *o;
    }
}

/// Approximate the polar factor of `m` ([rows, cols], row-major) by the
/// quintic iteration after Frobenius normalization. A zero matrix maps to
/// zero. Positive rescaling of the input leaves the output unchanged.
pub fn newton_schulz_orthogonalize<F: Real>(
    m: &[F],
    rows: usize,
    cols: usize,
    iters: usize,
) -> Vec<F> {
    debug_assert_eq!(m.len(), rows * cols);
    let fro: f64 = m.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
    if fro == 0.0 {
        return vec![F::ZERO; m.len()];
    }
    // operate with the short side as rows so the gram matrix stays small
    let transposed = rows > cols;
    let (r, c) = if transposed { (cols, rows) } else { (rows, cols) };
    let inv = F::from_f64(1.0 / fro);
    let mut x: Vec<F> = if transposed {
        crate::tensor::transpose(m, rows, cols).iter().map(|&v| v * inv).collect()
    } else {
        m.iter().map(|&v| v * inv).collect()
    };
    let (a, b, cc) = NS_COEFFS;
    let (a, b, cc) = (F::from_f64(a), F::from_f64(b), F::from_f64(cc));
    let xt_of = |x: &[F]| crate::tensor::transpose(x, r, c);
    for _ in 0..iters {
        let xt = xt_of(&x);
        let gram = matmul(&x, &xt, r, c, r); // X X^T, [r, r]
        let gram2 = matmul(&gram, &gram, r, r, r);
        // B = b*gram + c*gram^2
        let bmat: Vec<F> = gram
            .iter()
            .zip(&gram2)
            .map(|(&g1, &g2)| b * g1 + cc * g2)
            .collect();
        let bx = matmul(&bmat, &x, r, r, c);
        for (xv, bv) in x.iter_mut().zip(&bx) {
            *xv = a * *xv + *bv;
        }
    }
    if transposed {
        crate::tensor::transpose(&x, r, c)
    } else {
        x
    }
}

/// Linear warmup to the peak, then cosine decay to 10% of the peak by
/// `total_steps`; steps beyond the end clamp to the final value. Steps are
/// 1-indexed (the first update uses `step = 1`).
pub fn lr_schedule(step: u64, warmup_steps: u64, total_steps: u64, peak_lr: f64) -> f64 {
    if warmup_steps > 0 && step <= warmup_steps {
        return peak_lr * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps {
        return 0.1 * peak_lr;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    peak_lr * (0.1 + 0.9 * cosine)
}

/// If the global L2 norm of all gradients exceeds `max_norm`, scale every
/// gradient by `max_norm / norm`. Returns the pre-clip norm.
pub fn clip_grad_norm<F: Real>(grads: &mut [Vec<F>], max_norm: f64) -> f64 {
    debug_assert!(max_norm > 0.0);
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for v in g {
            let x = v.to_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = F::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}
