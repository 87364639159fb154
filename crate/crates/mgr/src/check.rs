//! Gradient verification against central finite differences.
//!
//! The finite-difference estimate is the independent oracle for every
//! hand-written adjoint in this crate; run it in double precision.

use crate::tensor::{Real, Tensor};

/// Default step for double-precision checks.
pub const FD_STEP: f64 = 1e-5;

/// Relative-error floor: components where both gradients are below this
/// magnitude are compared against the floor instead, since central
/// differences bottom out around 1e-10 absolute noise for O(1) functions.
pub const FD_FLOOR: f64 = 1e-3;

/// Central-difference gradient of a scalar function: per element,
/// (f(x + h e_i) - f(x - h e_i)) / (2 h). `f` must be pure.
pub fn finite_diff_grad<F: Real>(
    f: &mut dyn FnMut(&Tensor<F>) -> F,
    x: &Tensor<F>,
    h: f64,
) -> Tensor<F> {
    let hv = F::from_f64(h);
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + hv;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - hv;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((fp - fm) / (hv + hv));
    }
    Tensor::new(x.shape().to_vec(), grad).expect("finite diff shape")
}

/// Largest per-component relative error between two gradients, with the
/// denominator floored at [`FD_FLOOR`] so near-zero components are judged
/// on the absolute scale the oracle can actually resolve.
pub fn max_rel_err<F: Real>(analytic: &[F], numeric: &[F]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let (a, n) = (a.to_f64(), n.to_f64());
        let denom = a.abs().max(n.abs()).max(FD_FLOOR);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}
