//! Brute-force oracles for the built structures.
//!
//! Each check re-derives its answer from points or box geometry without
//! going through the linear-time code paths it validates.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::boxtype::{BoxType, LevelTypes};
use crate::fmm::ChargedPoint;
use crate::lists::FmmStructures;
use crate::morton::{point_index, Located, MortonKey, Point3};
use crate::partition::PartitionPlan;
use crate::pseudosort::SortedPointSet;

/// Outcome of one oracle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub failures: usize,
    pub detail: String,
}

impl Check {
    fn new(name: &str, failures: usize, examined: usize) -> Self {
        Self {
            name: name.into(),
            passed: failures == 0,
            failures,
            detail: format!("{failures} mismatches over {examined} cases"),
        }
    }
}

/// Sorted points really are grouped by box, the permutation is a bijection
/// and the bookmarks cover every point.
pub fn check_sorted_set<T: Located + PartialEq>(set: &SortedPointSet<T>, original: &[T]) -> Check {
    let mut failures = 0;
    let n = set.len();
    if n != original.len() || set.permutation.len() != n {
        failures += 1;
    }
    let mut seen = vec![false; original.len()];
    for (pos, &orig) in set.permutation.iter().enumerate() {
        match seen.get_mut(orig as usize) {
            Some(s) if !*s => *s = true,
            _ => failures += 1,
        }
        if original.get(orig as usize) != set.points.get(pos) {
            failures += 1;
        }
    }
    if set.bookmarks.first() != Some(&0) || set.bookmarks.last().map(|&b| b as usize) != Some(n) {
        failures += 1;
    }
    failures += set.non_empty_index.windows(2).filter(|w| w[0] >= w[1]).count();
    for i in 0..set.box_count() {
        let b = set.non_empty_index[i];
        let pts = set.box_points(i);
        failures += pts.is_empty() as usize;
        failures += pts.iter().filter(|p| point_index(&p.position(), set.level) != b).count();
    }
    Check::new("pseudo-sort contract", failures, n)
}

/// Near-field table against an all-pairs adjacency scan.
pub fn check_neighbor_table(s: &FmmStructures) -> Check {
    let src = &s.sources;
    let recv = &s.receivers;
    let failures: usize = (0..recv.box_count())
        .into_par_iter()
        .map(|i| {
            let r = recv.box_key(i);
            let expect: Vec<u32> =
                (0..src.box_count()).filter(|&j| r.is_adjacent(&src.box_key(j))).map(|j| j as u32).collect();
            (s.neighbors.segment(i) != expect.as_slice()) as usize
        })
        .sum();
    Check::new("E2 neighbor lists", failures, recv.box_count())
}

/// Translation stencils against an all-pairs E4 scan at every level.
pub fn check_stencils(s: &FmmStructures) -> Check {
    let dir = &s.directory;
    let mut failures = 0;
    let mut examined = 0;
    for l in 0..=s.l_max {
        let srcs = dir.sources(l);
        let recv = dir.receivers(l);
        examined += recv.len();
        failures += (0..recv.len())
            .into_par_iter()
            .map(|i| {
                let r = MortonKey::new_unchecked(l, recv[i]);
                let expect: Vec<u32> = (0..srcs.len())
                    .filter(|&j| r.has_in_e4(&MortonKey::new_unchecked(l, srcs[j])))
                    .map(|j| j as u32)
                    .collect();
                (s.stencils.level(l).segment(i) != expect.as_slice()) as usize
            })
            .sum::<usize>();
    }
    Check::new("E4 translation stencils", failures, examined)
}

/// Every (source box, receiver box) pair at `l_max` must be reached by
/// exactly one pathway: the near-field table, or one M2L stencil entry
/// between their ancestors. Exhaustive when `max_receivers` covers every
/// receiver box, otherwise over a seeded sample.
pub fn check_coverage(s: &FmmStructures, max_receivers: usize, seed: u64) -> Check {
    let l_max = s.l_max;
    let dir = &s.directory;
    let leaf_src = dir.sources(l_max);
    let n_recv = s.receivers.box_count();
    let picks: Vec<usize> = if n_recv <= max_receivers {
        (0..n_recv).collect()
    } else {
        let mut v = sample(&mut ChaCha8Rng::seed_from_u64(seed), n_recv, max_receivers).into_vec();
        v.sort_unstable();
        v
    };
    let failures: usize = picks
        .par_iter()
        .map(|&i| {
            let mut count = vec![0u32; leaf_src.len()];
            let mut invalid = 0;
            for &j in s.neighbors.segment(i) {
                match count.get_mut(j as usize) {
                    Some(c) => *c += 1,
                    None => invalid += 1,
                }
            }
            let leaf = s.receivers.box_key(i);
            for l in 2..=l_max {
                let anc = leaf.ancestor(l);
                let r = dir.receiver_rank(l, anc.index()).expect("receiver ancestors are non-empty");
                for &sr in s.stencils.level(l).segment(r) {
                    let d = MortonKey::new_unchecked(l, dir.sources(l)[sr as usize]).descendant_range(l_max);
                    let lo = leaf_src.partition_point(|&b| b < d.start);
                    let hi = leaf_src.partition_point(|&b| b < d.end);
                    count[lo..hi].iter_mut().for_each(|c| *c += 1);
                }
            }
            invalid + count.iter().filter(|&&c| c != 1).count()
        })
        .sum();
    let mut c = Check::new("single-count coverage", failures, picks.len() * leaf_src.len());
    if picks.len() < n_recv {
        c.detail.push_str(&format!(" (sampled {} of {n_recv} receiver boxes)", picks.len()));
    }
    c
}

/// Box types computed straight from the five membership definitions, using
/// the points and the plan only.
pub fn box_types_by_predicate(
    node: usize,
    sources: &[ChargedPoint],
    receivers: &[Point3],
    plan: &PartitionPlan,
) -> Vec<LevelTypes> {
    let l_max = plan.l_max;
    let node_at = |level: u32, index: u64| {
        plan.node_of_unit(plan.box_proc_id[(index >> (3 * (level - plan.l_par))) as usize] as usize)
    };
    let src_leaf: Vec<u64> = sources.iter().map(|s| point_index(&s.position, l_max)).collect();
    let recv_leaf: Vec<u64> = receivers.iter().map(|r| point_index(r, l_max)).collect();
    let mut out = vec![LevelTypes::default(); l_max as usize + 1];
    for l in 2..=l_max {
        let shift = 3 * (l_max - l);
        // holders of each source box's data at l_par
        let mut holders: BTreeMap<u64, BTreeSet<usize>> = BTreeMap::new();
        for &b in &src_leaf {
            let at_par = if plan.l_par <= l_max { b >> (3 * (l_max - plan.l_par)) } else { b };
            holders.entry(b >> shift).or_default().insert(node_at(plan.l_par, at_par));
        }
        let recv_nodes: HashMap<u64, usize> = if l >= plan.l_par {
            recv_leaf.iter().map(|&b| (b >> shift, node_at(l, b >> shift))).collect()
        } else {
            HashMap::new()
        };
        let mut lv = LevelTypes::default();
        for (&b, held) in &holders {
            let ty = if l < plan.l_crit {
                BoxType::Domestic
            } else if l == plan.l_crit {
                if !held.contains(&node) {
                    BoxType::Import
                } else if held.len() > 1 {
                    BoxType::Root
                } else if plan.nodes > 1 {
                    BoxType::Export
                } else {
                    BoxType::Domestic
                }
            } else {
                // nodes whose receiver boxes have b in their E4 set; the
                // relation is symmetric, so walk b's own E4 set
                let needed: HashSet<usize> = MortonKey::new_unchecked(l, b)
                    .e4_neighbors()
                    .iter()
                    .filter_map(|r| recv_nodes.get(&r.index()).copied())
                    .collect();
                match (node_at(l, b) == node, needed.iter().any(|&n| n != node), needed.contains(&node)) {
                    (true, true, _) => BoxType::Export,
                    (true, false, _) => BoxType::Domestic,
                    (false, _, true) => BoxType::Import,
                    (false, _, false) => BoxType::Other,
                }
            };
            lv.boxes.push(b);
            lv.types.push(ty);
        }
        out[l as usize] = lv;
    }
    out
}

/// Relative RMS difference `||a - b|| / ||b||`.
pub fn relative_rms(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// Largest `|a - b| / |b|` over all entries.
pub fn max_relative(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| if *y == 0.0 { (x - y).abs() } else { ((x - y) / y).abs() }).fold(0.0, f64::max)
}
