//! Regular and irregular solid harmonics for the Laplace kernel.
//!
//! With `P_n^m` the associated Legendre functions (Condon-Shortley phase):
//!
//! ```text
//! regular   R_n^m(v) = |v|^n     P_n^m(cos t) e^{i m f} / (n + m)!
//! irregular I_n^m(v) = (n - m)!  P_n^m(cos t) e^{i m f} / |v|^(n + 1)
//! ```
//!
//! This normalization makes the addition theorems free of extra factors:
//!
//! ```text
//! R_n^m(a + b)   = sum_{k,l} R_k^l(a) R_{n-k}^{m-l}(b)
//! I_n^m(D + e)   = sum_{k,l} (-1)^k conj(R_k^l(e)) I_{n+k}^{m+l}(D)   (|e| < |D|)
//! 1 / |x - y|    = sum_{n,m} conj(R_n^m(y)) I_n^m(x)                   (|y| < |x|)
//! ```
//!
//! Arrays cover degrees `0..order` and all orders `-n..=n`, stored at
//! [`slot`]`(n, m) = n^2 + n + m`.

use num_complex::Complex64;

use crate::error::{domain, Result};

/// Position of `(n, m)` in a harmonic or coefficient array.
#[inline]
pub const fn slot(n: usize, m: i64) -> usize {
    ((n * n + n) as i64 + m) as usize
}

#[inline]
fn sign(m: i64) -> f64 {
    if m & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// `P_n^m(cos t) e^{i m f}` for `m >= 0`, from the unit vector `(x, y, z)`,
/// written into the `m >= 0` slots of `out`.
fn angular(order: usize, x: f64, y: f64, z: f64, out: &mut [Complex64]) {
    // Cartesian recurrences: the sin^m factor is carried by (x + iy)^m,
    // so the poles need no special case.
    let xy = Complex64::new(x, y);
    let mut diag = Complex64::new(1.0, 0.0);
    for m in 0..order {
        if m > 0 {
            diag *= -((2 * m - 1) as f64) * xy;
        }
        out[slot(m, m as i64)] = diag;
        if m + 1 < order {
            out[slot(m + 1, m as i64)] = (2 * m + 1) as f64 * z * diag;
        }
        for n in m + 2..order {
            let a = out[slot(n - 1, m as i64)];
            let b = out[slot(n - 2, m as i64)];
            out[slot(n, m as i64)] = ((2 * n - 1) as f64 * z * a - (n + m - 1) as f64 * b) / (n - m) as f64;
        }
    }
}

fn fill_negative_orders(order: usize, out: &mut [Complex64]) {
    for n in 0..order {
        for m in 1..=n as i64 {
            out[slot(n, -m)] = sign(m) * out[slot(n, m)].conj();
        }
    }
}

/// Factorial table `0!..=max!` as floats.
pub fn factorials(max: usize) -> Vec<f64> {
    let mut f = Vec::with_capacity(max + 1);
    f.push(1.0);
    for k in 1..=max {
        let prev = f[k - 1];
        f.push(prev * k as f64);
    }
    f
}

/// Regular harmonics `R_n^m(v)` for `n < order`, into a reusable buffer.
pub fn regular_into(order: usize, v: [f64; 3], out: &mut Vec<Complex64>) {
    out.clear();
    out.resize(order * order, Complex64::new(0.0, 0.0));
    if order == 0 {
        return;
    }
    let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if r == 0.0 {
        out[0] = Complex64::new(1.0, 0.0);
        return;
    }
    angular(order, v[0] / r, v[1] / r, v[2] / r, out);
    let fact = factorials(2 * order);
    let mut rn = 1.0;
    for n in 0..order {
        for m in 0..=n {
            out[slot(n, m as i64)] *= rn / fact[n + m];
        }
        rn *= r;
    }
    fill_negative_orders(order, out);
}

pub fn regular(order: usize, v: [f64; 3]) -> Vec<Complex64> {
    let mut out = Vec::new();
    regular_into(order, v, &mut out);
    out
}

/// Irregular harmonics `I_n^m(v)` for `n < order`. Undefined at the origin.
pub fn irregular(order: usize, v: [f64; 3]) -> Result<Vec<Complex64>> {
    let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if r == 0.0 {
        return domain("irregular harmonics are singular at zero radius");
    }
    let mut out = vec![Complex64::new(0.0, 0.0); order * order];
    angular(order, v[0] / r, v[1] / r, v[2] / r, &mut out);
    let fact = factorials(2 * order);
    let mut inv = 1.0 / r;
    for n in 0..order {
        for m in 0..=n {
            out[slot(n, m as i64)] *= fact[n - m] * inv;
        }
        inv /= r;
    }
    fill_negative_orders(order, &mut out);
    Ok(out)
}

/// Real regular basis with `p^2` entries, paired with [`eval_s`] so that
/// `sum_l eval_s(y - c)[l] * eval_r(x - c)[l]` converges to `1 / |y - x|`
/// when `|x - c| < |y - c|`.
///
/// Entry `slot(n, m)` holds `R_n^0` for `m = 0`, `2 Re R_n^m` for `m > 0`
/// and `2 Im R_n^|m|` for `m < 0`.
pub fn eval_r(p: usize, v: [f64; 3]) -> Vec<f64> {
    let full = regular(p, v);
    realify(p, &full, 2.0)
}

/// Real singular basis matching [`eval_r`]: `I_n^0`, `Re I_n^m`, `Im I_n^|m|`.
pub fn eval_s(p: usize, v: [f64; 3]) -> Result<Vec<f64>> {
    let full = irregular(p, v)?;
    Ok(realify(p, &full, 1.0))
}

fn realify(p: usize, full: &[Complex64], off_diagonal: f64) -> Vec<f64> {
    let mut out = vec![0.0; p * p];
    for n in 0..p {
        out[slot(n, 0)] = full[slot(n, 0)].re;
        for m in 1..=n as i64 {
            out[slot(n, m)] = off_diagonal * full[slot(n, m)].re;
            out[slot(n, -m)] = off_diagonal * full[slot(n, m)].im;
        }
    }
    out
}
