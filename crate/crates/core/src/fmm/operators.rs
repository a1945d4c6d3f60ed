//! Expansion builders and translation operators.
//!
//! Coefficients use the real-packed layout: for degree `n` and order `m`,
//! `slot(n, m)` holds `Re C_n^m` when `m >= 0` and `Im C_n^|m|` when `m < 0`.
//! Negative orders of the complex coefficients follow from
//! `C_n^-m = (-1)^m conj(C_n^m)`, which holds for real source strengths.
//!
//! ```text
//! multipole  phi(y) = sum_{n,m} M_n^m I_n^m(y - c)
//! local      phi(y) = sum_{n,m} L_n^m conj(R_n^m(y - c))
//! ```
//!
//! Translation matrices are built once for unit box width and rescaled per
//! level: for width `w`, degree-`n` regular terms scale by `w^n` and
//! irregular ones by `w^-(n+1)`.

use std::sync::OnceLock;

use num_complex::Complex64;

use super::harmonics::{irregular, regular, regular_into, slot};
use super::ChargedPoint;
use crate::morton::Point3;

/// Largest supported truncation number.
pub const MAX_ORDER: usize = 24;

#[inline]
fn sign(m: i64) -> f64 {
    if m & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Dense `p^2 x p^2` real matrix acting on packed coefficient vectors.
#[derive(Clone, Debug)]
pub struct TranslationMatrix {
    p: usize,
    data: Vec<f64>,
}

impl TranslationMatrix {
    /// Builds the real matrix of a complex-linear map given as a list of
    /// `(out_n, out_m >= 0, in_n, in_m, weight)` contributions
    /// `C'_{out} += weight * C_{in}`.
    fn from_complex(p: usize, mut visit: impl FnMut(&mut dyn FnMut(usize, i64, usize, i64, Complex64))) -> Self {
        let dim = p * p;
        let mut data = vec![0.0; dim * dim];
        let mut add = |on: usize, om: i64, inn: usize, im: i64, w: Complex64| {
            // C_in = alpha * a_re + beta * a_im in terms of packed reals
            let (re_col, im_col, alpha, beta) = match im {
                0 => (slot(inn, 0), None, Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)),
                m if m > 0 => (slot(inn, m), Some(slot(inn, -m)), Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)),
                m => {
                    let s = sign(-m);
                    (slot(inn, -m), Some(slot(inn, m)), Complex64::new(s, 0.0), Complex64::new(0.0, -s))
                }
            };
            let re_row = slot(on, om);
            let wa = w * alpha;
            data[re_row * dim + re_col] += wa.re;
            if om > 0 {
                let im_row = slot(on, -om);
                data[im_row * dim + re_col] += wa.im;
                if let Some(c) = im_col {
                    let wb = w * beta;
                    data[re_row * dim + c] += wb.re;
                    data[im_row * dim + c] += wb.im;
                }
            } else if let Some(c) = im_col {
                data[re_row * dim + c] += (w * beta).re;
            }
        };
        visit(&mut add);
        Self { p, data }
    }

    /// `out += T * input`, with per-degree scaling of input and output:
    /// `out_k += post[k] * sum_n T_kn * pre[n] * input_n`.
    pub fn apply_scaled(&self, input: &[f64], out: &mut [f64], pre: &[f64], post: &[f64], scratch: &mut Vec<f64>) {
        let dim = self.p * self.p;
        scratch.clear();
        for (n, &s) in pre.iter().enumerate().take(self.p) {
            scratch.extend(input[n * n..(n + 1) * (n + 1)].iter().map(|v| v * s));
        }
        let mut rows = self.data.chunks_exact(dim);
        for (k, &s) in post.iter().enumerate().take(self.p) {
            for slot in out[k * k..(k + 1) * (k + 1)].iter_mut() {
                let row = rows.next().expect("row count matches p^2");
                let acc: f64 = row.iter().zip(scratch.iter()).map(|(a, b)| a * b).sum();
                *slot += s * acc;
            }
        }
    }

    pub fn apply(&self, input: &[f64], out: &mut [f64]) {
        let ones = vec![1.0; self.p];
        let mut scratch = Vec::new();
        self.apply_scaled(input, out, &ones, &ones, &mut scratch);
    }
}

/// Multipole-to-multipole: re-centres by `d = old_center - new_center`.
pub fn m2m_matrix(p: usize, d: [f64; 3]) -> TranslationMatrix {
    let rd = regular(p, d);
    TranslationMatrix::from_complex(p, |add| {
        for n in 0..p {
            for m in 0..=n as i64 {
                for k in 0..=n {
                    for l in -(k as i64)..=k as i64 {
                        let (j, mm) = (n - k, m - l);
                        if mm.unsigned_abs() as usize <= j {
                            add(n, m, j, mm, rd[slot(k, l)].conj());
                        }
                    }
                }
            }
        }
    })
}

/// Local-to-local: re-centres by `d = new_center - old_center`.
pub fn l2l_matrix(p: usize, d: [f64; 3]) -> TranslationMatrix {
    let rd = regular(p, d);
    TranslationMatrix::from_complex(p, |add| {
        for k in 0..p {
            for l in 0..=k as i64 {
                for n in k..p {
                    for m in -(n as i64)..=n as i64 {
                        let mm = m - l;
                        if mm.unsigned_abs() as usize <= n - k {
                            add(k, l, n, m, rd[slot(n - k, mm)].conj());
                        }
                    }
                }
            }
        }
    })
}

/// Multipole-to-local for `d = local_center - multipole_center`.
pub fn m2l_matrix(p: usize, d: [f64; 3]) -> TranslationMatrix {
    let id = irregular(2 * p, d).expect("M2L between coincident centres");
    TranslationMatrix::from_complex(p, |add| {
        for k in 0..p {
            let s = if k % 2 == 0 { 1.0 } else { -1.0 };
            for l in 0..=k as i64 {
                for n in 0..p {
                    for m in -(n as i64)..=n as i64 {
                        add(k, l, n, m, s * id[slot(n + k, m + l)]);
                    }
                }
            }
        }
    })
}

/// Adds the multipole moments of `points` about `center` into `out`.
pub fn p2m_into(points: &[ChargedPoint], center: &Point3, p: usize, out: &mut [f64], scratch: &mut Vec<Complex64>) {
    for pt in points {
        regular_into(p, pt.position.sub(center), scratch);
        for n in 0..p {
            out[slot(n, 0)] += pt.q * scratch[slot(n, 0)].re;
            for m in 1..=n as i64 {
                let c = scratch[slot(n, m)].conj() * pt.q;
                out[slot(n, m)] += c.re;
                out[slot(n, -m)] += c.im;
            }
        }
    }
}

/// Evaluates a packed local expansion at `y`.
pub fn l2p(coeffs: &[f64], center: &Point3, y: &Point3, p: usize, scratch: &mut Vec<Complex64>) -> f64 {
    regular_into(p, y.sub(center), scratch);
    let mut acc = 0.0;
    for n in 0..p {
        acc += coeffs[slot(n, 0)] * scratch[slot(n, 0)].re;
        for m in 1..=n as i64 {
            let r = scratch[slot(n, m)];
            acc += 2.0 * (coeffs[slot(n, m)] * r.re + coeffs[slot(n, -m)] * r.im);
        }
    }
    acc
}

/// Evaluates a packed multipole expansion at `y` (outside its sphere).
pub fn m2p(coeffs: &[f64], center: &Point3, y: &Point3, p: usize) -> f64 {
    let Ok(ir) = irregular(p, y.sub(center)) else {
        return f64::INFINITY;
    };
    let mut acc = 0.0;
    for n in 0..p {
        acc += coeffs[slot(n, 0)] * ir[slot(n, 0)].re;
        for m in 1..=n as i64 {
            let t = ir[slot(n, m)];
            acc += 2.0 * (coeffs[slot(n, m)] * t.re - coeffs[slot(n, -m)] * t.im);
        }
    }
    acc
}

/// Octant `k` of a child box: bit 0 is x, bit 1 is y, bit 2 is z.
fn child_offset(k: usize) -> [f64; 3] {
    [0, 1, 2].map(|axis| if (k >> axis) & 1 == 1 { 0.5 } else { -0.5 })
}

const M2L_SPAN: i32 = 3;
const M2L_SIDE: usize = (2 * M2L_SPAN + 1) as usize;

/// Level-independent operator set for one truncation number.
///
/// M2M/L2L matrices are stored for a child of unit width; M2L matrices for
/// boxes of unit width, keyed by the integer offset from source box to
/// receiver box (each component in `-3..=3`). M2L matrices are built on
/// first use.
pub struct Operators {
    pub p: usize,
    m2m: Vec<TranslationMatrix>,
    l2l: Vec<TranslationMatrix>,
    m2l: Vec<OnceLock<TranslationMatrix>>,
}

impl Operators {
    pub fn new(p: usize) -> Self {
        let m2m = (0..8).map(|k| m2m_matrix(p, child_offset(k))).collect();
        let l2l = (0..8).map(|k| l2l_matrix(p, child_offset(k))).collect();
        let m2l = (0..M2L_SIDE.pow(3)).map(|_| OnceLock::new()).collect();
        Self { p, m2m, l2l, m2l }
    }

    /// Powers `w^n` for `n < p`.
    pub fn powers(&self, w: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.p);
        let mut acc = 1.0;
        for _ in 0..self.p {
            out.push(acc);
            acc *= w;
        }
        out
    }

    /// Adds the M2M image of a child expansion (octant `k`, width
    /// `child_width`) into the parent's coefficients.
    pub fn m2m(&self, octant: usize, child_width: f64, child: &[f64], parent: &mut [f64], scratch: &mut Vec<f64>) {
        let pre = self.powers(1.0 / child_width);
        let post = self.powers(child_width);
        self.m2m[octant].apply_scaled(child, parent, &pre, &post, scratch);
    }

    /// Adds the L2L image of a parent expansion into a child (octant `k`).
    pub fn l2l(&self, octant: usize, child_width: f64, parent: &[f64], child: &mut [f64], scratch: &mut Vec<f64>) {
        let pre = self.powers(child_width);
        let post = self.powers(1.0 / child_width);
        self.l2l[octant].apply_scaled(parent, child, &pre, &post, scratch);
    }

    /// Adds the M2L image of a source box's multipole into a receiver box's
    /// local expansion. `offset` is receiver minus source, in boxes.
    pub fn m2l(&self, offset: [i32; 3], width: f64, multipole: &[f64], local: &mut [f64], scratch: &mut Vec<f64>) {
        let key = offset.iter().fold(0usize, |acc, &o| acc * M2L_SIDE + (o + M2L_SPAN) as usize);
        let mat = self.m2l[key].get_or_init(|| m2l_matrix(self.p, offset.map(f64::from)));
        let inv = 1.0 / width;
        let pre = self.powers(inv);
        let post: Vec<f64> = pre.iter().map(|v| v * inv).collect();
        mat.apply_scaled(multipole, local, &pre, &post, scratch);
    }

    /// Whether an offset is inside the precomputed M2L range.
    pub fn supports_offset(offset: [i32; 3]) -> bool {
        offset.iter().all(|o| o.abs() <= M2L_SPAN) && offset.iter().any(|o| o.abs() > 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct(points: &[ChargedPoint], y: &Point3) -> f64 {
        points.iter().map(|s| s.q / s.position.distance(y)).sum()
    }

    fn cluster(center: Point3, radius: f64, n: usize) -> Vec<ChargedPoint> {
        (0..n)
            .map(|i| {
                let t = i as f64 * 0.7;
                ChargedPoint::new(
                    Point3::new(
                        center.x + radius * (t.sin() * 0.8),
                        center.y + radius * ((1.3 * t).cos() * 0.7),
                        center.z + radius * ((0.9 * t).sin() * 0.6),
                    ),
                    0.5 + (i % 3) as f64 * 0.25,
                )
            })
            .collect()
    }

    fn p2m(points: &[ChargedPoint], c: &Point3, p: usize) -> Vec<f64> {
        let mut out = vec![0.0; p * p];
        p2m_into(points, c, p, &mut out, &mut Vec::new());
        out
    }

    #[test]
    fn p2m_at_center_is_pure_monopole() {
        let c = Point3::new(0.4, 0.4, 0.4);
        let m = p2m(&[ChargedPoint::new(c, 2.5)], &c, 6);
        assert_eq!(m[0], 2.5);
        assert!(m[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn multipole_evaluation_converges() {
        let c = Point3::new(0.5, 0.5, 0.5);
        let src = cluster(c, 0.05, 20);
        let y = Point3::new(0.9, 0.6, 0.2);
        let m = p2m(&src, &c, 12);
        let rel = (m2p(&m, &c, &y, 12) - direct(&src, &y)).abs() / direct(&src, &y);
        assert!(rel < 1e-10, "{rel}");
    }

    #[test]
    fn m2m_preserves_monopole_and_field() {
        let p = 10;
        let child_w = 0.125;
        let child_center = Point3::new(0.0625, 0.1875, 0.0625); // octant 2 of the box [0, .25)^3
        let parent_center = Point3::new(0.125, 0.125, 0.125);
        let src = cluster(child_center, 0.03, 15);
        let child = p2m(&src, &child_center, p);
        let ops = Operators::new(p);
        let mut parent = vec![0.0; p * p];
        ops.m2m(2, child_w, &child, &mut parent, &mut Vec::new());
        assert!((parent[0] - child[0]).abs() < 1e-14);
        let reference = p2m(&src, &parent_center, p);
        let err = parent.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn l2l_is_exact_for_polynomial_fields() {
        // a local expansion translated to a child reproduces the same field
        let p = 8;
        let ops = Operators::new(p);
        let parent_center = Point3::new(0.5, 0.5, 0.5);
        let far = cluster(Point3::new(0.05, 0.9, 0.1), 0.02, 5);
        let mut m = p2m(&far, &Point3::new(0.05, 0.9, 0.1), p);
        let mut local = vec![0.0; p * p];
        m2l_matrix(p, parent_center.sub(&Point3::new(0.05, 0.9, 0.1))).apply(&m, &mut local);
        m.clear();
        let child_center = Point3::new(0.625, 0.375, 0.625); // octant 5 of the width-0.5 box
        let mut child = vec![0.0; p * p];
        ops.l2l(5, 0.25, &local, &mut child, &mut Vec::new());
        let y = Point3::new(0.66, 0.35, 0.6);
        let a = l2p(&local, &parent_center, &y, p, &mut Vec::new());
        let b = l2p(&child, &child_center, &y, p, &mut Vec::new());
        assert!((a - b).abs() / a.abs() < 1e-12);
    }

    #[test]
    fn m2l_scaled_matches_direct_geometry() {
        let p = 10;
        let ops = Operators::new(p);
        let w = 1.0 / 16.0;
        let src_center = Point3::new(3.5 * w, 5.5 * w, 8.5 * w);
        let offset = [2, -3, 1];
        let recv_center = Point3::new((3.5 + 2.0) * w, (5.5 - 3.0) * w, (8.5 + 1.0) * w);
        let src = cluster(src_center, 0.3 * w, 10);
        let m = p2m(&src, &src_center, p);
        let mut scaled = vec![0.0; p * p];
        ops.m2l(offset, w, &m, &mut scaled, &mut Vec::new());
        let mut unscaled = vec![0.0; p * p];
        m2l_matrix(p, recv_center.sub(&src_center)).apply(&m, &mut unscaled);
        let y = Point3::new(recv_center.x + 0.2 * w, recv_center.y - 0.1 * w, recv_center.z);
        let a = l2p(&scaled, &recv_center, &y, p, &mut Vec::new());
        let b = l2p(&unscaled, &recv_center, &y, p, &mut Vec::new());
        let exact = direct(&src, &y);
        assert!((a - b).abs() / exact < 1e-12);
        assert!((a - exact).abs() / exact < 1e-5);
        assert!(Operators::supports_offset(offset));
        assert!(!Operators::supports_offset([1, 0, -1]));
    }
}
