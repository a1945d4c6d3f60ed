#![allow(dead_code)]

use octofmm::generate::{receivers, sources, Distribution};
use octofmm::{ChargedPoint, Point3};
use rand::Rng;

/// One seeded list-oracle workload.
#[derive(Clone, Debug)]
pub struct Instance {
    pub seed: u64,
    pub dist: Distribution,
    pub l_max: u32,
    pub sources: Vec<ChargedPoint>,
    pub receivers: Vec<Point3>,
}

/// 20 instances with `N, M` in `[2^10, 2^14]`, cycling `l_max` over 3..=5
/// and alternating distributions.
pub fn list_instances() -> Vec<Instance> {
    (0..20u64)
        .map(|k| {
            let seed = 1000 + k;
            let mut rng = octofmm::generate::rng(seed, 7);
            let n = rng.random_range(1usize << 10..=1 << 14);
            let m = rng.random_range(1usize << 10..=1 << 14);
            let dist = if k % 2 == 0 { Distribution::Uniform } else { Distribution::Sphere };
            Instance {
                seed,
                dist,
                l_max: 3 + (k % 3) as u32,
                sources: sources(dist, n, seed),
                receivers: receivers(dist, m, seed),
            }
        })
        .collect()
}
