//! Dense row-major tensors and the arithmetic kernels everything else uses.
//!
//! Values are generic over [`Real`] so the same code runs in single precision
//! for training and double precision for gradient verification; the precision
//! is chosen per run, never per tensor.

use crate::error::{MgrError, Result};
use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};
use std::sync::OnceLock;

/// Scalar element trait implemented for `f32` and `f64`.
pub trait Real:
    Copy
    + PartialOrd
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    /// Tag byte used in the checkpoint tensor table.
    const DTYPE: u8;
    const BYTES: usize;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn abs(self) -> Self;
    fn maxv(self, other: Self) -> Self;
    fn minv(self, other: Self) -> Self;
    fn mul_add(self, a: Self, b: Self) -> Self;
    fn is_finite(self) -> bool;
    /// Distance in units-in-the-last-place between two finite values.
    fn ulp_diff(self, other: Self) -> u64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    /// Access this element type's thread-local buffer pool.
    fn with_pool<R>(f: impl FnOnce(&mut BufferPool<Self>) -> R) -> R;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: u8 = 1;
    const BYTES: usize = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn sin(self) -> Self {
        f32::sin(self)
    }
    fn cos(self) -> Self {
        f32::cos(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maxv(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn minv(self, other: Self) -> Self {
        f32::min(self, other)
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        f32::mul_add(self, a, b)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn ulp_diff(self, other: Self) -> u64 {
        ulp_map32(self).abs_diff(ulp_map32(other)) as u64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
    fn with_pool<R>(f: impl FnOnce(&mut BufferPool<Self>) -> R) -> R {
        POOL_F32.with(|p| f(&mut p.borrow_mut()))
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: u8 = 2;
    const BYTES: usize = 8;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maxv(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn minv(self, other: Self) -> Self {
        f64::min(self, other)
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        f64::mul_add(self, a, b)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn ulp_diff(self, other: Self) -> u64 {
        ulp_map64(self).abs_diff(ulp_map64(other))
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
    fn with_pool<R>(f: impl FnOnce(&mut BufferPool<Self>) -> R) -> R {
        POOL_F64.with(|p| f(&mut p.borrow_mut()))
    }
}

// Map float bits to a monotone integer line so ulp distance is a subtraction.
fn ulp_map32(x: f32) -> u32 {
    let b = x.to_bits();
    if b & 0x8000_0000 == 0 {
        b | 0x8000_0000
    } else {
        !b
    }
}

fn ulp_map64(x: f64) -> u64 {
    let b = x.to_bits();
    if b & 0x8000_0000_0000_0000 == 0 {
        b | 0x8000_0000_0000_0000
    } else {
        !b
    }
}

// ── Tensor ───────────────────────────────────────────────────────────

/// Dense n-dimensional array, row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor<F: Real> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(MgrError::Shape(format!("zero-length dimension in {shape:?}")));
        }
        if numel != data.len() {
            return Err(MgrError::Shape(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![F::ZERO; numel] }
    }

    pub fn full(shape: Vec<usize>, v: F) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![v; numel] }
    }

    pub fn scalar(v: F) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> F) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: (0..numel).map(|i| f(i)).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(MgrError::Shape(format!(
                "cannot reshape {:?} ({} elements) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn item(&self) -> F {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn abs_max(&self) -> F {
        self.data.iter().fold(F::ZERO, |m, &v| m.maxv(v.abs()))
    }

    /// Root mean square over every element.
    pub fn rms(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let ss: f64 = self.data.iter().map(|v| v.to_f64() * v.to_f64()).sum();
        (ss / self.data.len() as f64).sqrt()
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Cast element type (used to move between verification and training precision).
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.to_f64())).collect(),
        }
    }
}

// ── Worker threads ───────────────────────────────────────────────────

static THREADS: OnceLock<usize> = OnceLock::new();

/// Number of worker threads for parallel kernels. Initialized once from
/// `MGR_THREADS` (or the machine's parallelism); results never depend on it
/// because parallel work is split over disjoint output regions.
pub fn worker_threads() -> usize {
    *THREADS.get_or_init(|| {
        tune_allocator();
        if let Ok(v) = std::env::var("MGR_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                return n.max(1);
            }
        }
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    })
}

/// Training churns through multi-megabyte buffers every step. With glibc's
/// defaults those round-trip through mmap/munmap and every step re-faults
/// hundreds of megabytes, which is ruinously slow on lazily-faulting VMs.
/// Raising the trim/mmap thresholds keeps freed pages in-process.
#[cfg(target_env = "gnu")]
fn tune_allocator() {
    extern "C" {
        fn mallopt(param: i32, value: i32) -> i32;
    }
    const M_TRIM_THRESHOLD: i32 = -1;
    const M_MMAP_THRESHOLD: i32 = -3;
    unsafe {
        mallopt(M_TRIM_THRESHOLD, i32::MAX);
        mallopt(M_MMAP_THRESHOLD, i32::MAX);
    }
}

#[cfg(not(target_env = "gnu"))]
fn tune_allocator() {}

// ── Buffer pool ──────────────────────────────────────────────────────
//
// Tape storage (node values, gradients, attention score matrices) cycles
// through the same large shapes every training step. Recycling those
// allocations keeps the hot set of pages resident, which matters on hosts
// where first-touch page faults are expensive. Correctness never depends on
// the pool: taken buffers are fully written before any read.

const POOL_MIN_BYTES: usize = 1 << 18;
const POOL_MAX_BUFFERS: usize = 64;

pub struct BufferPool<F> {
    free: Vec<Vec<F>>,
}

impl<F: Real> BufferPool<F> {
    const fn new() -> Self {
        BufferPool { free: Vec::new() }
    }

    fn take(&mut self, n: usize) -> Vec<F> {
        // best fit: smallest stored buffer that covers the request
        let mut best: Option<usize> = None;
        for (i, b) in self.free.iter().enumerate() {
            if b.capacity() >= n && best.is_none_or(|j| b.capacity() < self.free[j].capacity()) {
                best = Some(i);
            }
        }
        match best {
            Some(i) => {
                let mut b = self.free.swap_remove(i);
                b.clear();
                b
            }
            None => Vec::with_capacity(n),
        }
    }

    fn put(&mut self, buf: Vec<F>) {
        if buf.capacity() * std::mem::size_of::<F>() < POOL_MIN_BYTES {
            return;
        }
        if self.free.len() < POOL_MAX_BUFFERS {
            self.free.push(buf);
            return;
        }
        // keep the largest buffers
        if let Some((i, _)) = self
            .free
            .iter()
            .enumerate()
            .min_by_key(|(_, b)| b.capacity())
        {
            if self.free[i].capacity() < buf.capacity() {
                self.free[i] = buf;
            }
        }
    }
}

thread_local! {
    static POOL_F32: std::cell::RefCell<BufferPool<f32>> =
        const { std::cell::RefCell::new(BufferPool::new()) };
    static POOL_F64: std::cell::RefCell<BufferPool<f64>> =
        const { std::cell::RefCell::new(BufferPool::new()) };
}

/// Take a zero-length buffer with capacity for `n` values from the pool.
pub fn pool_take<F: Real>(n: usize) -> Vec<F> {
    F::with_pool(|p| p.take(n))
}

/// Take an `n`-element zero-filled buffer from the pool.
pub fn pool_take_zeroed<F: Real>(n: usize) -> Vec<F> {
    let mut b = pool_take::<F>(n);
    b.resize(n, F::ZERO);
    b
}

/// Return a buffer's allocation to the pool.
pub fn pool_put<F: Real>(buf: Vec<F>) {
    F::with_pool(|p| p.put(buf));
}

/// Force the worker count (first caller wins; later calls are ignored).
pub fn set_worker_threads(n: usize) {
    let _ = THREADS.set(n.max(1));
}

/// Split `out` into `units` equal rows of `row_len` and process contiguous
/// row ranges on worker threads. `f(first_row, rows_slice)` must only write
/// its own slice, which makes the result independent of the thread count.
pub fn par_row_ranges<F: Real>(
    out: &mut [F],
    row_len: usize,
    f: impl Fn(usize, &mut [F]) + Sync,
) {
    let units = if row_len == 0 { 0 } else { out.len() / row_len };
    debug_assert_eq!(units * row_len, out.len());
    let threads = worker_threads().min(units.max(1));
    if threads <= 1 || units < 2 {
        f(0, out);
        return;
    }
    let per = units.div_ceil(threads);
    std::thread::scope(|scope| {
        let mut rest = out;
        let mut row0 = 0;
        while !rest.is_empty() {
            let take = per.min(rest.len() / row_len);
            let (head, tail) = rest.split_at_mut(take * row_len);
            let fref = &f;
            let start = row0;
            scope.spawn(move || fref(start, head));
            rest = tail;
            row0 += take;
        }
    });
}

// ── Matrix kernels ───────────────────────────────────────────────────

/// C += A·B with A `[m,k]`, B `[k,n]`, C `[m,n]`, all row-major.
///
/// Register-blocked 4x32 micro-kernel; large-k inputs are processed in
/// packed k-panels so B stays cache-resident. Accumulation order per output
/// element is fixed, so results do not depend on the worker thread count.
pub fn matmul_acc<F: Real>(c: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    const KBLOCK: usize = 512;
    par_row_ranges(c, n, |row0, c_rows| {
        let rows = c_rows.len() / n;
        let a_rows = &a[row0 * k..(row0 + rows) * k];
        if k <= KBLOCK {
            matmul_block(c_rows, a_rows, b, rows, k, n, k);
        } else {
            let mut panel = pool_take_zeroed(rows * KBLOCK);
            let mut p0 = 0;
            while p0 < k {
                let kb = KBLOCK.min(k - p0);
                for i in 0..rows {
                    panel[i * kb..(i + 1) * kb]
                        .copy_from_slice(&a_rows[i * k + p0..i * k + p0 + kb]);
                }
                matmul_block(c_rows, &panel[..rows * kb], &b[p0 * n..(p0 + kb) * n], rows, kb, n, kb);
                p0 += kb;
            }
            pool_put(panel);
        }
    });
}

/// C = A·B freshly allocated.
pub fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::ZERO; m * n];
    matmul_acc(&mut c, a, b, m, k, n);
    c
}

// Micro-kernel: rows x 32-column blocks accumulated in locals.
pub(crate) fn matmul_block<F: Real>(
    c: &mut [F],
    a: &[F],
    b: &[F],
    m: usize,
    k: usize,
    n: usize,
    a_stride: usize,
) {
    const NB: usize = 32;
    let mut i = 0;
    while i + 4 <= m {
        let a0 = &a[i * a_stride..i * a_stride + k];
        let a1 = &a[(i + 1) * a_stride..(i + 1) * a_stride + k];
        let a2 = &a[(i + 2) * a_stride..(i + 2) * a_stride + k];
        let a3 = &a[(i + 3) * a_stride..(i + 3) * a_stride + k];
        let mut j = 0;
        while j + NB <= n {
            let mut acc0 = [F::ZERO; NB];
            let mut acc1 = [F::ZERO; NB];
            let mut acc2 = [F::ZERO; NB];
            let mut acc3 = [F::ZERO; NB];
            for p in 0..k {
                let bb = &b[p * n + j..p * n + j + NB];
                let (v0, v1, v2, v3) = (a0[p], a1[p], a2[p], a3[p]);
                for t in 0..NB {
                    let bv = bb[t];
                    acc0[t] = v0.mul_add(bv, acc0[t]);
                    acc1[t] = v1.mul_add(bv, acc1[t]);
                    acc2[t] = v2.mul_add(bv, acc2[t]);
                    acc3[t] = v3.mul_add(bv, acc3[t]);
                }
            }
            for t in 0..NB {
                c[i * n + j + t] += acc0[t];
                c[(i + 1) * n + j + t] += acc1[t];
                c[(i + 2) * n + j + t] += acc2[t];
                c[(i + 3) * n + j + t] += acc3[t];
            }
            j += NB;
        }
        if j < n {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                let (v0, v1, v2, v3) = (a0[p], a1[p], a2[p], a3[p]);
                for t in j..n {
                    let bv = brow[t];
                    c[i * n + t] = v0.mul_add(bv, c[i * n + t]);
                    c[(i + 1) * n + t] = v1.mul_add(bv, c[(i + 1) * n + t]);
                    c[(i + 2) * n + t] = v2.mul_add(bv, c[(i + 2) * n + t]);
                    c[(i + 3) * n + t] = v3.mul_add(bv, c[(i + 3) * n + t]);
                }
            }
        }
        i += 4;
    }
    while i < m {
        let arow = &a[i * a_stride..i * a_stride + k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = av.mul_add(bv, *cv);
            }
        }
        i += 1;
    }
}

/// Row-major transpose of `a` `[rows, cols]` into `[cols, rows]`.
pub fn transpose<F: Real>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = pool_take_zeroed(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// y += alpha * x over equal-length slices.
#[inline]
pub fn axpy<F: Real>(y: &mut [F], alpha: F, x: &[F]) {
    debug_assert_eq!(y.len(), x.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = alpha.mul_add(xv, *yv);
    }
}

#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut s = F::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        s = x.mul_add(y, s);
    }
    s
}

pub fn l2_norm<F: Real>(x: &[F]) -> f64 {
    x.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt()
}
