//! Scalar math helpers.
//!
//! Float functions route through [`libm`] so the crate works without `std`
//! and every build produces the same bits.

use alloc::vec::Vec;

pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

pub fn acos(x: f64) -> f64 {
    libm::acos(x)
}

pub fn atan2(y: f64, x: f64) -> f64 {
    libm::atan2(y, x)
}

pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

pub fn hypot(x: f64, y: f64) -> f64 {
    libm::hypot(x, y)
}

/// The logistic function 1 / (1 + e^-x).
pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + exp(-x))
}

/// Dot product with four independent accumulators folded at the end; this
/// fixed evaluation order is the crate's canonical dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4 * 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i < chunks {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut tail = 0.0;
    while i < n {
        tail += a[i] * b[i];
        i += 1;
    }
    ((s0 + s1) + (s2 + s3)) + tail
}

/// Squared Euclidean norm.
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Correctly rounded sum of a slice, independent of element order.
///
/// Uses Shewchuk-style error-free expansions: the running partial sums keep
/// every rounding residual, so the final collapse yields the f64 nearest to
/// the exact real sum. Needed where a sum must be bitwise invariant under a
/// permutation of its terms (the meta-network trunk combines per-branch
/// partial sums this way).
pub fn exact_sum(terms: &[f64]) -> f64 {
    // Grow an error-free expansion: partials stay non-overlapping and sorted
    // by increasing magnitude, and always represent the exact running sum.
    let mut partials: Vec<f64> = Vec::with_capacity(8);
    for &term in terms {
        let mut x = term;
        let mut count = 0;
        for i in 0..partials.len() {
            let mut y = partials[i];
            if abs(x) < abs(y) {
                core::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[count] = lo;
                count += 1;
            }
            x = hi;
        }
        partials.truncate(count);
        partials.push(x);
    }
    // Collapse from the largest partial down, with the half-even correction,
    // mirroring CPython's fsum tail; the result is the f64 nearest the exact
    // sum and therefore independent of term order.
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        debug_assert!(abs(y) < abs(x));
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// Max elementwise deviation between two vectors, relative to the larger of
/// the two vectors' sup-norms. Returns 0 for two all-zero vectors.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let scale = a
        .iter()
        .chain(b.iter())
        .fold(0.0f64, |acc, &x| acc.max(abs(x)));
    if scale == 0.0 {
        return 0.0;
    }
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        worst = worst.max(abs(x - y) / scale);
    }
    worst
}
