//! Dense kernels shared by the forward and backward passes. All matrices are
//! row-major; iteration order is fixed so results are bit-deterministic.

use super::scalar::Scalar;

pub(crate) const NORM_EPS: f64 = 1e-5;

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

/// y = W x, W has `out.len()` rows of `x.len()` columns.
pub(crate) fn matvec<T: Scalar>(w: &[T], x: &[T], out: &mut [T]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(x.len())) {
        *o = dot(row, x);
    }
}

/// dx += Wᵀ dy.
pub(crate) fn matvec_t_acc<T: Scalar>(w: &[T], dy: &[T], dx: &mut [T]) {
    for (g, row) in dy.iter().zip(w.chunks_exact(dx.len())) {
        for (d, wv) in dx.iter_mut().zip(row) {
            *d += *g * *wv;
        }
    }
}

/// dW += dy ⊗ x.
pub(crate) fn outer_acc<T: Scalar>(dw: &mut [T], dy: &[T], x: &[T]) {
    for (g, drow) in dy.iter().zip(dw.chunks_exact_mut(x.len())) {
        for (d, xv) in drow.iter_mut().zip(x) {
            *d += *g * *xv;
        }
    }
}

/// y = gain ⊙ x / rms(x); returns r = 1/rms(x).
pub(crate) fn rms_norm<T: Scalar>(x: &[T], gain: &[T], out: &mut [T]) -> T {
    let n = T::from_f64(x.len() as f64);
    let mut sq = T::zero();
    for v in x {
        sq += *v * *v;
    }
    let r = (sq / n + T::from_f64(NORM_EPS)).sqrt().recip();
    for ((o, xv), g) in out.iter_mut().zip(x).zip(gain) {
        *o = *g * *xv * r;
    }
    r
}

/// Backward of `rms_norm`: accumulates into dx and dgain.
pub(crate) fn rms_norm_backward<T: Scalar>(
    x: &[T],
    gain: &[T],
    r: T,
    dy: &[T],
    dx: &mut [T],
    dgain: &mut [T],
) {
    let n = T::from_f64(x.len() as f64);
    let mut proj = T::zero();
    for ((d, g), xv) in dy.iter().zip(gain).zip(x) {
        proj += *d * *g * *xv;
    }
    let coeff = r * r * r * proj / n;
    for i in 0..x.len() {
        dgain[i] += dy[i] * x[i] * r;
        dx[i] += r * gain[i] * dy[i] - coeff * x[i];
    }
}

/// In-place max-subtracted softmax.
pub(crate) fn softmax_inplace<T: Scalar>(xs: &mut [T]) {
    let mut max = xs[0];
    for v in &xs[1..] {
        if *v > max {
            max = *v;
        }
    }
    let mut sum = T::zero();
    for v in xs.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in xs.iter_mut() {
        *v /= sum;
    }
}

/// log softmax(xs)[idx], max-subtracted; always ≤ 0.
pub(crate) fn log_softmax_at<T: Scalar>(xs: &[T], idx: usize) -> T {
    let mut max = xs[0];
    for v in &xs[1..] {
        if *v > max {
            max = *v;
        }
    }
    let mut sum = T::zero();
    for v in xs {
        sum += (*v - max).exp();
    }
    xs[idx] - max - sum.ln()
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    (T::one() + (-x).exp()).recip()
}

pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

pub(crate) fn silu_prime<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Rotates one head row (length `head_dim`, paired as (j, j+half)) by
/// `pos`-dependent angles; `dir` is +1 for forward, -1 for the inverse.
pub(crate) fn rotate_head<T: Scalar>(row: &mut [T], pos: u32, base: f64, dir: f64) {
    let hd = row.len();
    let half = hd / 2;
    for j in 0..half {
        let freq = base.powf(-2.0 * j as f64 / hd as f64);
        let angle = dir * pos as f64 * freq;
        let (sin, cos) = (T::from_f64(angle.sin()), T::from_f64(angle.cos()));
        let (a, b) = (row[j], row[j + half]);
        row[j] = a * cos - b * sin;
        row[j + half] = a * sin + b * cos;
    }
}
