//! Laplace-kernel fast multipole evaluation.
//!
//! The evaluator consumes [`FmmStructures`](crate::lists::FmmStructures)
//! and runs the usual pipeline: P2M at the finest level, M2M up to level
//! two, M2L over each level's translation stencil, L2L back down, then L2P
//! plus the near-field direct sum over the E2 neighbor table.

mod evaluate;
pub mod harmonics;
pub mod operators;

use rayon::prelude::*;

use crate::error::{domain, Result};
use crate::morton::{Located, MortonKey, Point3};

pub use evaluate::{downward_pass, evaluate, evaluate_with, upward_pass, EvalOptions};
pub use harmonics::{eval_r, eval_s};
pub use operators::{Operators, MAX_ORDER};

/// A source location with its strength.
#[derive(Copy, Clone, Debug, Default, PartialEq)]
pub struct ChargedPoint {
    pub position: Point3,
    pub q: f64,
}

impl ChargedPoint {
    pub const fn new(position: Point3, q: f64) -> Self {
        Self { position, q }
    }
}

impl Located for ChargedPoint {
    #[inline]
    fn position(&self) -> Point3 {
        self.position
    }
}

/// Adds `sum q / |y - x|` over `sources` to `acc`, skipping exact coincidences.
#[inline]
pub(crate) fn accumulate_kernel(acc: &mut f64, y: &Point3, sources: &[ChargedPoint]) {
    for s in sources {
        let r = s.position.distance(y);
        if r > 0.0 {
            *acc += s.q / r;
        }
    }
}

/// Brute-force potentials `phi(y_j) = sum_i q_i / |y_j - x_i|`.
///
/// A source located exactly at a receiver is skipped.
pub fn direct_sum(sources: &[ChargedPoint], receivers: &[Point3]) -> Vec<f64> {
    receivers
        .par_iter()
        .map(|y| {
            let mut acc = 0.0;
            accumulate_kernel(&mut acc, y, sources);
            acc
        })
        .collect()
}

pub(crate) fn check_order(p: usize) -> Result<()> {
    if p == 0 || p > MAX_ORDER {
        return domain(format!("truncation number {p} outside 1..={MAX_ORDER}"));
    }
    Ok(())
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ExpansionKind {
    Multipole,
    Local,
}

/// A truncated expansion about a centre, `p^2` real-packed coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct Expansion {
    pub kind: ExpansionKind,
    pub center: Point3,
    pub p: usize,
    pub coeffs: Vec<f64>,
}

impl Expansion {
    pub fn zero(kind: ExpansionKind, center: Point3, p: usize) -> Result<Self> {
        check_order(p)?;
        Ok(Self { kind, center, p, coeffs: vec![0.0; p * p] })
    }

    /// Multipole expansion of `points` about `center`.
    pub fn p2m(points: &[ChargedPoint], center: Point3, p: usize) -> Result<Self> {
        let mut e = Self::zero(ExpansionKind::Multipole, center, p)?;
        operators::p2m_into(points, &center, p, &mut e.coeffs, &mut Vec::new());
        Ok(e)
    }

    fn expect_kind(&self, kind: ExpansionKind) -> Result<()> {
        if self.kind != kind {
            return domain(format!("expected a {kind:?} expansion, got {:?}", self.kind));
        }
        Ok(())
    }

    /// Re-centres a multipole expansion.
    pub fn m2m(&self, center: Point3) -> Result<Self> {
        self.expect_kind(ExpansionKind::Multipole)?;
        let mut out = Self::zero(ExpansionKind::Multipole, center, self.p)?;
        operators::m2m_matrix(self.p, self.center.sub(&center)).apply(&self.coeffs, &mut out.coeffs);
        Ok(out)
    }

    /// Converts a multipole expansion to a local expansion about `center`.
    pub fn m2l(&self, center: Point3) -> Result<Self> {
        self.expect_kind(ExpansionKind::Multipole)?;
        if center == self.center {
            return domain("M2L between coincident centres");
        }
        let mut out = Self::zero(ExpansionKind::Local, center, self.p)?;
        operators::m2l_matrix(self.p, center.sub(&self.center)).apply(&self.coeffs, &mut out.coeffs);
        Ok(out)
    }

    /// Re-centres a local expansion.
    pub fn l2l(&self, center: Point3) -> Result<Self> {
        self.expect_kind(ExpansionKind::Local)?;
        let mut out = Self::zero(ExpansionKind::Local, center, self.p)?;
        operators::l2l_matrix(self.p, center.sub(&self.center)).apply(&self.coeffs, &mut out.coeffs);
        Ok(out)
    }

    /// Potential at `y` represented by this expansion.
    pub fn evaluate(&self, y: &Point3) -> f64 {
        match self.kind {
            ExpansionKind::Multipole => operators::m2p(&self.coeffs, &self.center, y, self.p),
            ExpansionKind::Local => operators::l2p(&self.coeffs, &self.center, y, self.p, &mut Vec::new()),
        }
    }
}

/// M2L between two octree boxes; the source must lie in the receiver's E4 set.
pub fn m2l_between_boxes(source: MortonKey, receiver: MortonKey, multipole: &Expansion) -> Result<Expansion> {
    if !receiver.has_in_e4(&source) {
        return domain(format!(
            "box {} is not in the E4 set of box {} at level {}",
            source.index(),
            receiver.index(),
            receiver.level()
        ));
    }
    multipole.m2l(receiver.center())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morton::BoxCoords;

    #[test]
    fn direct_sum_examples() {
        let src = [ChargedPoint::new(Point3::new(0.1, 0.1, 0.1), 1.0)];
        let phi = direct_sum(&src, &[Point3::new(0.1, 0.1, 0.9), Point3::new(0.1, 0.1, 0.1)]);
        assert!((phi[0] - 1.0 / 0.8).abs() < 1e-15);
        assert_eq!(phi[1], 0.0, "coincident source is skipped");

        let y = Point3::new(0.5, 0.5, 0.5);
        let pair =
            [ChargedPoint::new(Point3::new(0.3, 0.5, 0.5), 1.0), ChargedPoint::new(Point3::new(0.7, 0.5, 0.5), -1.0)];
        assert!(direct_sum(&pair, &[y])[0].abs() < 1e-15);
    }

    #[test]
    fn unit_distance_gives_unit_potential() {
        let src = [ChargedPoint::new(Point3::new(0.0, 0.0, 0.0), 1.0)];
        assert_eq!(direct_sum(&src, &[Point3::new(0.0, 0.0, 1.0)])[0], 1.0);
    }

    #[test]
    fn order_bounds() {
        assert!(Expansion::zero(ExpansionKind::Local, Point3::default(), 0).is_err());
        assert!(Expansion::zero(ExpansionKind::Local, Point3::default(), MAX_ORDER + 1).is_err());
        assert!(Expansion::zero(ExpansionKind::Local, Point3::default(), MAX_ORDER).is_ok());
    }

    #[test]
    fn box_translation_rejects_stencil_violations() {
        let r = crate::morton::interleave(BoxCoords::new(3, 2, 2, 2)).unwrap();
        let adjacent = crate::morton::interleave(BoxCoords::new(3, 3, 2, 2)).unwrap();
        let far = crate::morton::interleave(BoxCoords::new(3, 0, 2, 2)).unwrap();
        let m = Expansion::p2m(&[ChargedPoint::new(far.center(), 1.0)], far.center(), 4).unwrap();
        assert!(m2l_between_boxes(adjacent, r, &m).is_err());
        let l = m2l_between_boxes(far, r, &m).unwrap();
        let y = r.center();
        assert!((l.evaluate(&y) - 1.0 / far.center().distance(&y)).abs() < 1e-12);
        assert!(l.m2l(y).is_err(), "kind mismatch");
    }

    #[test]
    fn monopole_survives_m2m() {
        let c = Point3::new(0.2, 0.3, 0.4);
        let m = Expansion::p2m(&[ChargedPoint::new(Point3::new(0.21, 0.28, 0.43), 3.0)], c, 5).unwrap();
        let moved = m.m2m(Point3::new(0.25, 0.25, 0.25)).unwrap();
        assert_eq!(moved.coeffs[0], m.coeffs[0]);
    }

    /// One source, one E4-separated receiver, the whole translation chain:
    /// the error must fall geometrically with a ratio below 0.77.
    #[test]
    fn pipeline_error_decays_geometrically() {
        let level = 4;
        let w = 1.0 / 16.0;
        let src_box = crate::morton::interleave(BoxCoords::new(level, 5, 5, 5)).unwrap();
        let recv_box = crate::morton::interleave(BoxCoords::new(level, 7, 6, 5)).unwrap();
        assert!(recv_box.has_in_e4(&src_box));
        // points near opposite corners to stress the separation ratio
        let x = Point3::new(5.95 * w, 5.9 * w, 5.9 * w);
        let y = Point3::new(7.05 * w, 6.1 * w, 5.1 * w);
        let exact = 1.0 / x.distance(&y);
        let mut errs = Vec::new();
        for p in 2..=14 {
            let leaf = Expansion::p2m(&[ChargedPoint::new(x, 1.0)], src_box.center(), p).unwrap();
            let parent = leaf.m2m(src_box.parent().unwrap().center()).unwrap().m2m(src_box.center()).unwrap();
            let local = m2l_between_boxes(src_box, recv_box, &parent).unwrap();
            let up = local.l2l(recv_box.parent().unwrap().center()).unwrap().l2l(recv_box.center()).unwrap();
            errs.push((up.evaluate(&y) - exact).abs() / exact);
        }
        let xs: Vec<f64> = (2..=14).map(|p| p as f64).collect();
        let ys: Vec<f64> = errs.iter().map(|e| e.max(1e-17).ln()).collect();
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let slope = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>()
            / xs.iter().map(|a| (a - mx).powi(2)).sum::<f64>();
        assert!(slope.exp() < 0.77, "fitted ratio {}", slope.exp());
        assert!(errs[errs.len() - 1] < errs[0]);
    }
}
