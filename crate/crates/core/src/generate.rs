//! Seeded synthetic point sets.
//!
//! Every generator draws from ChaCha8 with a fixed stream per role, so
//! sources, receivers and subsamples stay independent of each other and
//! reproducible across runs and platforms.

use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, UnitSphere};

use crate::error::FmmError;
use crate::fmm::ChargedPoint;
use crate::morton::Point3;

pub const SOURCE_STREAM: u64 = 0;
pub const RECEIVER_STREAM: u64 = 1;
pub const SUBSAMPLE_STREAM: u64 = 2;

/// Radius of the sphere-surface distribution, centred in the unit cube.
pub const SPHERE_RADIUS: f64 = 0.45;

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub enum Distribution {
    /// Uniform in `[0, 1)^3`.
    #[default]
    Uniform,
    /// Uniform on a sphere surface; highly non-uniform at fine levels.
    Sphere,
}

impl FromStr for Distribution {
    type Err = FmmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "sphere" => Ok(Self::Sphere),
            other => Err(FmmError::Domain(format!("unknown distribution {other:?}"))),
        }
    }
}

pub fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub fn points<R: Rng>(dist: Distribution, n: usize, rng: &mut R) -> Vec<Point3> {
    (0..n)
        .map(|_| match dist {
            Distribution::Uniform => Point3::new(rng.random(), rng.random(), rng.random()),
            Distribution::Sphere => {
                let [x, y, z]: [f64; 3] = UnitSphere.sample(rng);
                Point3::new(0.5 + SPHERE_RADIUS * x, 0.5 + SPHERE_RADIUS * y, 0.5 + SPHERE_RADIUS * z)
            }
        })
        .collect()
}

/// `n` charged sources; charges are uniform in `[0, 1)`.
pub fn sources(dist: Distribution, n: usize, seed: u64) -> Vec<ChargedPoint> {
    let mut r = rng(seed, SOURCE_STREAM);
    let pos = points(dist, n, &mut r);
    pos.into_iter().map(|p| ChargedPoint::new(p, r.random())).collect()
}

pub fn receivers(dist: Distribution, m: usize, seed: u64) -> Vec<Point3> {
    points(dist, m, &mut rng(seed, RECEIVER_STREAM))
}

/// Sorted, distinct indices: `k` of `0..m`, or all of them when `k >= m`.
pub fn subsample(m: usize, k: usize, seed: u64) -> Vec<usize> {
    if k >= m {
        return (0..m).collect();
    }
    let mut idx = sample(&mut rng(seed, SUBSAMPLE_STREAM), m, k).into_vec();
    idx.sort_unstable();
    idx
}
