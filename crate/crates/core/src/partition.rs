//! Two-level partition of the octree across nodes and their compute units.
//!
//! Units are numbered globally as `node * units_per_node + local`. Each unit
//! owns one Morton-contiguous range of boxes at the partition level `l_par`;
//! every finer box belongs to the owner of its ancestor at `l_par`.

use std::ops::{Range, RangeInclusive};

use rayon::prelude::*;

use crate::error::{domain, FmmError, Result};
use crate::fmm::ChargedPoint;
use crate::lists::e2_indices;
use crate::morton::{boxes_at_level, point_index, MortonKey, Point3};

/// Default balance tolerance: accept when `max <= (1 + 0.2) * mean`.
pub const DEFAULT_TOLERANCE: f64 = 0.2;

/// Receiver counts per non-empty box at the finest level.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadProfile {
    pub l_max: u32,
    /// Strictly increasing box indices.
    pub boxes: Vec<u64>,
    pub counts: Vec<u64>,
}

impl LoadProfile {
    pub fn new(l_max: u32, boxes: Vec<u64>, counts: Vec<u64>) -> Result<Self> {
        if boxes.len() != counts.len() {
            return domain("load profile boxes and counts differ in length");
        }
        if boxes.windows(2).any(|w| w[0] >= w[1]) {
            return domain("load profile boxes must be strictly increasing");
        }
        if boxes.last().is_some_and(|&b| b >= boxes_at_level(l_max)) {
            return domain(format!("load profile box outside level {l_max}"));
        }
        Ok(Self { l_max, boxes, counts })
    }

    /// Histogram of `points` at `l_max`; empty boxes are omitted.
    pub fn from_points(points: &[Point3], l_max: u32) -> Self {
        let mut idx: Vec<u64> = points.par_iter().map(|p| point_index(p, l_max)).collect();
        idx.par_sort_unstable();
        let mut boxes = Vec::new();
        let mut counts: Vec<u64> = Vec::new();
        for b in idx {
            if boxes.last() == Some(&b) {
                *counts.last_mut().unwrap() += 1;
            } else {
                boxes.push(b);
                counts.push(1);
            }
        }
        Self { l_max, boxes, counts }
    }

    /// Sums per-node histograms into the global one.
    pub fn merge(parts: &[LoadProfile]) -> Result<Self> {
        let l_max = parts.first().map_or(0, |p| p.l_max);
        if parts.iter().any(|p| p.l_max != l_max) {
            return domain("cannot merge load profiles of different levels");
        }
        let mut all: Vec<(u64, u64)> =
            parts.iter().flat_map(|p| p.boxes.iter().copied().zip(p.counts.iter().copied())).collect();
        all.sort_unstable_by_key(|&(b, _)| b);
        let mut boxes = Vec::new();
        let mut counts: Vec<u64> = Vec::new();
        for (b, c) in all {
            if boxes.last() == Some(&b) {
                *counts.last_mut().unwrap() += c;
            } else {
                boxes.push(b);
                counts.push(c);
            }
        }
        Ok(Self { l_max, boxes, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Aggregated non-empty loads at a coarser level, in Morton order.
    pub fn at_level(&self, level: u32) -> Vec<(u64, u64)> {
        let shift = 3 * (self.l_max - level);
        let mut out: Vec<(u64, u64)> = Vec::new();
        for (&b, &c) in self.boxes.iter().zip(&self.counts) {
            let a = b >> shift;
            match out.last_mut() {
                Some((last, acc)) if *last == a => *acc += c,
                _ => out.push((a, c)),
            }
        }
        out
    }
}

/// Box-to-unit map at the partition level plus the levels derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionPlan {
    pub nodes: usize,
    pub units_per_node: usize,
    pub l_max: u32,
    pub l_par: u32,
    pub l_crit: u32,
    /// Owner unit of every box at `l_par`, length `8^l_par`.
    pub box_proc_id: Vec<u32>,
    /// Box range owned by each unit at `l_par`; contiguous, in unit order.
    pub ranges: Vec<Range<u64>>,
    pub unit_loads: Vec<u64>,
    pub max_over_mean: f64,
    pub tolerance: f64,
    pub balanced: bool,
}

/// Critical level for a given partition level.
pub fn critical_level(l_par: u32) -> u32 {
    l_par.saturating_sub(1).max(2)
}

fn validate_units(nodes: usize, units_per_node: usize) -> Result<usize> {
    match nodes.checked_mul(units_per_node) {
        Some(u) if u >= 1 && u <= u32::MAX as usize => Ok(u),
        _ => domain(format!("need at least one unit, got {nodes} nodes x {units_per_node}")),
    }
}

impl PartitionPlan {
    /// Greedy cut of the load at a fixed partition level.
    ///
    /// A box goes to the unit whose equal-share interval contains the
    /// midpoint of its load in the Morton-ordered prefix sum, so ties fall
    /// to the earlier unit and ranges stay contiguous. Empty boxes follow
    /// their predecessor.
    pub fn with_level(
        load: &LoadProfile,
        nodes: usize,
        units_per_node: usize,
        l_par: u32,
        tolerance: f64,
    ) -> Result<Self> {
        let units = validate_units(nodes, units_per_node)?;
        if l_par < 2 || l_par > load.l_max {
            return domain(format!("partition level {l_par} outside 2..={}", load.l_max));
        }
        if tolerance.is_nan() || tolerance < 0.0 {
            return domain("balance tolerance must be non-negative");
        }
        let total = load.total();
        let coarse = load.at_level(l_par);
        let n_boxes = boxes_at_level(l_par);

        let mut starts = vec![n_boxes; units];
        starts[0] = 0;
        let mut unit_loads = vec![0u64; units];
        let mut prefix = 0u64;
        let mut opened = 0usize;
        for &(b, c) in &coarse {
            // ceil(U * (prefix + c/2) / M) - 1 in exact integer arithmetic
            let num = units as u128 * (2 * prefix as u128 + c as u128);
            let den = 2 * total.max(1) as u128;
            let u = (num.div_ceil(den) as usize).saturating_sub(1).min(units - 1);
            prefix += c;
            unit_loads[u] += c;
            // u is non-decreasing in b; units skipped over get empty ranges
            while opened < u {
                opened += 1;
                starts[opened] = b;
            }
        }
        let ranges: Vec<Range<u64>> =
            (0..units).map(|u| starts[u]..if u + 1 < units { starts[u + 1] } else { n_boxes }).collect();
        let mut box_proc_id = vec![0u32; n_boxes as usize];
        for (u, r) in ranges.iter().enumerate() {
            box_proc_id[r.start as usize..r.end as usize].fill(u as u32);
        }
        let mean = total as f64 / units as f64;
        let max = unit_loads.iter().copied().max().unwrap_or(0) as f64;
        let max_over_mean = if total == 0 { 1.0 } else { max / mean };
        Ok(Self {
            nodes,
            units_per_node,
            l_max: load.l_max,
            l_par,
            l_crit: critical_level(l_par),
            box_proc_id,
            ranges,
            unit_loads,
            max_over_mean,
            tolerance,
            balanced: max_over_mean <= 1.0 + tolerance,
        })
    }

    pub fn units(&self) -> usize {
        self.nodes * self.units_per_node
    }

    pub fn node_of_unit(&self, unit: usize) -> usize {
        unit / self.units_per_node
    }

    /// Owner unit of a box at level `>= l_par`.
    pub fn unit_of(&self, key: &MortonKey) -> Option<usize> {
        (key.level() >= self.l_par).then(|| self.box_proc_id[key.ancestor(self.l_par).index() as usize] as usize)
    }

    /// Same as [`unit_of`](Self::unit_of) for a raw index at `level >= l_par`.
    #[inline]
    pub fn unit_of_index(&self, level: u32, index: u64) -> usize {
        debug_assert!(level >= self.l_par);
        self.box_proc_id[(index >> (3 * (level - self.l_par))) as usize] as usize
    }

    #[inline]
    pub fn node_of_index(&self, level: u32, index: u64) -> usize {
        self.node_of_unit(self.unit_of_index(level, index))
    }

    /// Units owning some part of `key`: its owner at or below `l_par`,
    /// otherwise the owners of its descendants at `l_par`.
    pub fn units_of(&self, key: &MortonKey) -> RangeInclusive<usize> {
        if key.level() >= self.l_par {
            let u = self.unit_of_index(key.level(), key.index());
            return u..=u;
        }
        let d = key.descendant_range(self.l_par);
        self.box_proc_id[d.start as usize] as usize..=self.box_proc_id[d.end as usize - 1] as usize
    }

    pub fn nodes_of(&self, key: &MortonKey) -> RangeInclusive<usize> {
        let u = self.units_of(key);
        self.node_of_unit(*u.start())..=self.node_of_unit(*u.end())
    }

    /// Units of a node, as global IDs.
    pub fn units_of_node(&self, node: usize) -> Range<usize> {
        node * self.units_per_node..(node + 1) * self.units_per_node
    }
}

/// Tries `l_par = 2, 3, ..., l_max` and returns the first plan within
/// tolerance, or the most balanced one flagged `balanced = false`.
pub fn choose_partition(
    load: &LoadProfile,
    nodes: usize,
    units_per_node: usize,
    tolerance: f64,
) -> Result<PartitionPlan> {
    let units = validate_units(nodes, units_per_node)?;
    if load.l_max < 2 {
        return domain(format!("partitioning needs l_max >= 2, got {}", load.l_max));
    }
    if units > load.boxes.len() {
        return Err(FmmError::InfeasiblePartition { units, boxes: load.boxes.len(), level: load.l_max });
    }
    let mut best: Option<PartitionPlan> = None;
    for l_par in 2..=load.l_max {
        let plan = PartitionPlan::with_level(load, nodes, units_per_node, l_par, tolerance)?;
        if plan.balanced {
            return Ok(plan);
        }
        if best.as_ref().is_none_or(|b| plan.max_over_mean < b.max_over_mean) {
            best = Some(plan);
        }
    }
    Ok(best.expect("at least one level tried"))
}

/// Original point indices held by one unit after scattering.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UnitAssignment {
    pub sources: Vec<u32>,
    pub receivers: Vec<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Scatter {
    pub units: Vec<UnitAssignment>,
    /// Point copies whose destination node differs from the initial node.
    pub moved_points: u64,
    /// Source copies beyond the first.
    pub halo_copies: u64,
}

/// Initial placement before scattering: point `i` starts on node `i % P`.
pub fn initial_node(index: usize, nodes: usize) -> usize {
    index % nodes
}

/// Sends each receiver to its owner unit and each source to its owner unit
/// plus every unit owning a non-empty receiver box whose E2 set at `l_max`
/// contains the source's box.
pub fn scatter_points(plan: &PartitionPlan, sources: &[ChargedPoint], receivers: &[Point3]) -> Result<Scatter> {
    if sources.len() > u32::MAX as usize || receivers.len() > u32::MAX as usize {
        return Err(FmmError::Capacity { what: "points per set".into(), limit: u32::MAX as u64 });
    }
    let l = plan.l_max;
    let units = plan.units();
    let recv_box: Vec<u64> = receivers.par_iter().map(|p| point_index(p, l)).collect();
    let mut recv_boxes = recv_box.clone();
    recv_boxes.par_sort_unstable();
    recv_boxes.dedup();

    let src_box: Vec<u64> = sources.par_iter().map(|s| point_index(&s.position, l)).collect();
    let mut src_boxes = src_box.clone();
    src_boxes.par_sort_unstable();
    src_boxes.dedup();
    // destination units of every non-empty source box, owner first
    let destinations: Vec<Vec<u32>> = src_boxes
        .par_iter()
        .map(|&b| {
            let owner = plan.unit_of_index(l, b) as u32;
            let mut d = vec![owner];
            for n in e2_indices(l, b) {
                if recv_boxes.binary_search(&n).is_ok() {
                    let u = plan.unit_of_index(l, n) as u32;
                    if !d.contains(&u) {
                        d.push(u);
                    }
                }
            }
            d
        })
        .collect();

    let mut out = Scatter { units: vec![UnitAssignment::default(); units], ..Scatter::default() };
    for (i, &b) in recv_box.iter().enumerate() {
        let u = plan.unit_of_index(l, b);
        out.units[u].receivers.push(i as u32);
        out.moved_points += (plan.node_of_unit(u) != initial_node(i, plan.nodes)) as u64;
    }
    for (i, &b) in src_box.iter().enumerate() {
        let dest = &destinations[src_boxes.binary_search(&b).expect("box collected above")];
        out.halo_copies += dest.len() as u64 - 1;
        for &u in dest {
            out.units[u as usize].sources.push(i as u32);
            out.moved_points += (plan.node_of_unit(u as usize) != initial_node(i, plan.nodes)) as u64;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_level2(per_box: u64) -> LoadProfile {
        // l_max = 2, every box equally loaded
        LoadProfile::new(2, (0..64).collect(), vec![per_box; 64]).unwrap()
    }

    #[test]
    fn single_unit_takes_everything() {
        let plan = choose_partition(&uniform_level2(3), 1, 1, DEFAULT_TOLERANCE).unwrap();
        assert_eq!((plan.l_par, plan.l_crit), (2, 2));
        assert_eq!(plan.ranges, vec![0..64]);
        assert!(plan.balanced);
    }

    #[test]
    fn uniform_load_splits_evenly() {
        let plan = choose_partition(&uniform_level2(5), 4, 2, DEFAULT_TOLERANCE).unwrap();
        assert_eq!(plan.ranges.len(), 8);
        for (u, r) in plan.ranges.iter().enumerate() {
            assert_eq!(*r, (8 * u as u64)..(8 * u as u64 + 8));
        }
        assert_eq!(plan.max_over_mean, 1.0);
        assert_eq!(plan.node_of_unit(5), 2);
    }

    /// Every way of cutting level-2 boxes into two contiguous ranges.
    fn best_two_way_cut(loads: &[u64]) -> f64 {
        let total: u64 = loads.iter().sum();
        (0..=loads.len())
            .map(|c| {
                let left: u64 = loads[..c].iter().sum();
                left.max(total - left) as f64 / (total as f64 / 2.0)
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn concentrated_load_deepens() {
        // l_max = 4; all receivers inside level-2 box 9, spread over its
        // 64 level-4 descendants
        let boxes: Vec<u64> = (9 * 64..10 * 64).collect();
        let load = LoadProfile::new(4, boxes, vec![2; 64]).unwrap();
        let level2: Vec<u64> = (0..64).map(|b| if b == 9 { 128 } else { 0 }).collect();
        assert!(best_two_way_cut(&level2) > 1.1, "no level-2 cut can meet the tolerance");
        let plan = choose_partition(&load, 2, 1, 0.1).unwrap();
        assert!(plan.l_par > 2);
        assert!(plan.balanced);
        assert_eq!(plan.unit_loads, vec![64, 64]);
    }

    #[test]
    fn unbalanced_plan_is_flagged() {
        // two boxes, 3:1 load, two units: every level is off balance
        let load = LoadProfile::new(3, vec![0, 511], vec![3, 1]).unwrap();
        let plan = choose_partition(&load, 2, 1, 0.2).unwrap();
        assert!(!plan.balanced);
        assert_eq!(plan.max_over_mean, 1.5);
    }

    #[test]
    fn infeasible_when_units_exceed_boxes() {
        let load = LoadProfile::new(3, vec![1, 2], vec![1, 1]).unwrap();
        assert!(matches!(
            choose_partition(&load, 3, 1, 0.2),
            Err(FmmError::InfeasiblePartition { units: 3, boxes: 2, .. })
        ));
    }

    #[test]
    fn owner_examples() {
        let load = LoadProfile::new(3, (0..512).collect(), vec![1; 512]).unwrap();
        let plan = PartitionPlan::with_level(&load, 2, 1, 2, 0.2).unwrap();
        assert_eq!(plan.ranges, vec![0..32, 32..64]);
        let k = MortonKey::new(3, 100).unwrap();
        assert_eq!(plan.unit_of(&k), Some(0));
        assert_eq!(plan.units_of(&MortonKey::root()), 0..=1);
        for b in 0..64 {
            let k = MortonKey::new(2, b).unwrap();
            assert_eq!(plan.unit_of(&k), Some(plan.box_proc_id[b as usize] as usize));
        }
        assert_eq!(plan.unit_of(&MortonKey::new(1, 0).unwrap()), None);
    }

    #[test]
    fn ranges_are_contiguous_cover_and_monotone() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for trial in 0..30 {
            let mut boxes: Vec<u64> = (0..200).map(|_| rng.random_range(0..4096)).collect();
            boxes.sort_unstable();
            boxes.dedup();
            let counts = boxes.iter().map(|_| rng.random_range(1..50)).collect();
            let load = LoadProfile::new(4, boxes, counts).unwrap();
            let units = 1 + trial % 7;
            let plan = choose_partition(&load, units, 1, 0.2).unwrap();
            assert_eq!(plan.ranges[0].start, 0);
            assert_eq!(plan.ranges.last().unwrap().end, 1 << (3 * plan.l_par));
            assert!(plan.ranges.windows(2).all(|w| w[0].end == w[1].start));
            assert!(plan.box_proc_id.windows(2).all(|w| w[0] <= w[1]));
            assert_eq!(plan.unit_loads.iter().sum::<u64>(), load.total());
            if plan.balanced {
                assert!(plan.max_over_mean <= 1.2);
            }
        }
    }

    #[test]
    fn merged_histograms_equal_global() {
        let pts: Vec<Point3> = (0..300)
            .map(|i| {
                let t = i as f64 / 300.0;
                Point3::new(t, (t * 7.0).fract(), (t * 13.0).fract())
            })
            .collect();
        let parts: Vec<LoadProfile> = (0..3)
            .map(|n| {
                let mine: Vec<Point3> = pts.iter().copied().skip(n).step_by(3).collect();
                LoadProfile::from_points(&mine, 3)
            })
            .collect();
        assert_eq!(LoadProfile::merge(&parts).unwrap(), LoadProfile::from_points(&pts, 3));
    }

    #[test]
    fn scatter_single_unit_has_no_halo() {
        let src: Vec<ChargedPoint> =
            (0..50).map(|i| ChargedPoint::new(Point3::new(i as f64 / 50.0, 0.5, 0.5), 1.0)).collect();
        let recv: Vec<Point3> = src.iter().map(|s| s.position).collect();
        let load = LoadProfile::from_points(&recv, 3);
        let plan = choose_partition(&load, 1, 1, 0.2).unwrap();
        let s = scatter_points(&plan, &src, &recv).unwrap();
        assert_eq!(s.halo_copies, 0);
        assert_eq!(s.moved_points, 0);
        assert_eq!(s.units[0].sources.len(), 50);
    }

    #[test]
    fn interior_source_has_one_copy() {
        // receivers fill the whole cube at level 2, two units split at x
        // halves through Morton order; a source deep inside unit 0's range
        let recv: Vec<Point3> = (0..64).map(|b| MortonKey::new(2, b).unwrap().center()).collect();
        let load = LoadProfile::from_points(&recv, 2);
        let plan = choose_partition(&load, 2, 1, 0.2).unwrap();
        let src = [ChargedPoint::new(MortonKey::new(2, 0).unwrap().center(), 1.0)];
        let s = scatter_points(&plan, &src, &recv).unwrap();
        assert_eq!(s.halo_copies, 0);
        assert_eq!(s.units[0].sources, vec![0]);
    }

    #[test]
    fn every_receiver_lands_exactly_once() {
        let recv: Vec<Point3> = (0..400)
            .map(|i| {
                let t = (i as f64 + 0.5) / 400.0;
                Point3::new((t * 3.0).fract(), (t * 5.0).fract(), t)
            })
            .collect();
        let src: Vec<ChargedPoint> = recv.iter().map(|&p| ChargedPoint::new(p, 1.0)).collect();
        let plan = choose_partition(&LoadProfile::from_points(&recv, 3), 3, 2, 0.2).unwrap();
        let s = scatter_points(&plan, &src, &recv).unwrap();
        let mut seen = vec![0; recv.len()];
        for u in &s.units {
            for &i in &u.receivers {
                seen[i as usize] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        let copies: usize = s.units.iter().map(|u| u.sources.len()).sum();
        assert_eq!(copies as u64, src.len() as u64 + s.halo_copies);
    }
}
