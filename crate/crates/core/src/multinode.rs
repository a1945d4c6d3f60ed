//! End-to-end distributed evaluation over simulated nodes.
//!
//! Per node: P2M on owned finest-level boxes, M2M down to `l_crit`, the
//! manager exchange, M2M for the shared coarse levels, then M2L/L2L for the
//! ancestors of the node's own receivers and the per-unit final summation.

use rayon::prelude::*;

use crate::boxtype::{classify, ClassifyOptions, TypedBoxList};
use crate::error::{domain, Result};
use crate::exchange::{
    run_downward_redistribution, DataManager, LeafLocals, MStatus, MStore, NodeState, TraceRecord, TrafficLedger,
    UnitData,
};
use crate::fmm::operators::{p2m_into, Operators};
use crate::fmm::{check_order, ChargedPoint};
use crate::lists::{build_level_directory, build_translation_stencils, Depth, LevelDirectory, TranslationStencils};
use crate::morton::{point_index, MortonKey, Point3};
use crate::partition::{
    choose_partition, initial_node, scatter_points, LoadProfile, PartitionPlan, Scatter, DEFAULT_TOLERANCE,
};
use crate::pseudosort::{pseudo_sort, SortConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterConfig {
    pub nodes: usize,
    pub units_per_node: usize,
    pub depth: Depth,
    pub p: usize,
    pub tolerance: f64,
    /// Skips the balance search and partitions at this level.
    pub partition_level: Option<u32>,
    pub classify: ClassifyOptions,
    pub record_trace: bool,
}

impl ClusterConfig {
    pub fn new(nodes: usize, units_per_node: usize, depth: Depth, p: usize) -> Self {
        Self {
            nodes,
            units_per_node,
            depth,
            p,
            tolerance: DEFAULT_TOLERANCE,
            partition_level: None,
            classify: ClassifyOptions::default(),
            record_trace: false,
        }
    }
}

/// Per-box contribution counts summed over all nodes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Tally {
    /// P2M count per finest-level source box.
    pub p2m: Vec<u32>,
    /// `m2m[l]`: child-to-parent count per source box at level `l`, for
    /// `l_crit < l <= l_max`; empty elsewhere.
    pub m2m: Vec<Vec<u32>>,
}

impl Tally {
    fn new(dir: &LevelDirectory, l_crit: u32) -> Self {
        Self {
            p2m: vec![0; dir.sources(dir.l_max).len()],
            m2m: (0..=dir.l_max).map(|l| if l > l_crit { vec![0; dir.sources(l).len()] } else { Vec::new() }).collect(),
        }
    }

    fn add(&mut self, other: &Tally) {
        self.p2m.iter_mut().zip(&other.p2m).for_each(|(a, b)| *a += b);
        for (a, b) in self.m2m.iter_mut().zip(&other.m2m) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    fn counts(&self) -> impl Iterator<Item = u32> + '_ {
        self.p2m.iter().chain(self.m2m.iter().flatten()).copied()
    }

    /// Boxes translated more than once.
    pub fn duplicates(&self) -> usize {
        self.counts().filter(|&c| c > 1).count()
    }

    /// Boxes never translated.
    pub fn missing(&self) -> usize {
        self.counts().filter(|&c| c == 0).count()
    }
}

/// Global structures every node agrees on before the exchange.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterSetup {
    pub directory: LevelDirectory,
    pub plan: PartitionPlan,
    pub typed: Vec<TypedBoxList>,
    /// Histogram and box-set bytes gathered by and broadcast from the master.
    pub setup_bytes: u64,
}

#[derive(Clone, Debug)]
pub struct DistributedRun {
    /// In original receiver order.
    pub potentials: Vec<f64>,
    pub setup: ClusterSetup,
    pub scatter_moved_points: u64,
    pub halo_copies: u64,
    pub ledger: TrafficLedger,
    pub trace: Vec<TraceRecord>,
    pub tally: Tally,
    pub nodes: Vec<NodeState>,
}

fn sorted_unique(mut v: Vec<u64>) -> Vec<u64> {
    v.par_sort_unstable();
    v.dedup();
    v
}

/// Merges per-node box sets, partitions, and classifies every node.
pub fn plan_cluster(sources: &[ChargedPoint], receivers: &[Point3], cfg: &ClusterConfig) -> Result<ClusterSetup> {
    let l_max = cfg.depth.resolve(sources.len().max(receivers.len()))?;
    if l_max < 2 {
        return domain(format!("distributed runs need l_max >= 2, got {l_max}"));
    }
    if cfg.nodes == 0 {
        return domain("need at least one node");
    }
    // each node histograms the points it starts with
    let per_node: Vec<(Vec<u64>, LoadProfile)> = (0..cfg.nodes)
        .into_par_iter()
        .map(|j| {
            let src = sorted_unique(
                sources
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| initial_node(*i, cfg.nodes) == j)
                    .map(|(_, s)| point_index(&s.position, l_max))
                    .collect(),
            );
            let mine: Vec<Point3> = receivers
                .iter()
                .enumerate()
                .filter(|(i, _)| initial_node(*i, cfg.nodes) == j)
                .map(|(_, &r)| r)
                .collect();
            (src, LoadProfile::from_points(&mine, l_max))
        })
        .collect();
    let remote_bytes: u64 = per_node.iter().skip(1).map(|(s, l)| 8 * s.len() as u64 + 16 * l.boxes.len() as u64).sum();
    let src_boxes = sorted_unique(per_node.iter().flat_map(|(s, _)| s.iter().copied()).collect());
    let loads: Vec<LoadProfile> = per_node.into_iter().map(|(_, l)| l).collect();
    let load = LoadProfile::merge(&loads)?;
    let directory = build_level_directory(&src_boxes, &load.boxes, l_max)?;
    let plan = match cfg.partition_level {
        Some(l) => PartitionPlan::with_level(&load, cfg.nodes, cfg.units_per_node, l, cfg.tolerance)?,
        None => choose_partition(&load, cfg.nodes, cfg.units_per_node, cfg.tolerance)?,
    };
    let broadcast =
        (cfg.nodes as u64 - 1) * (8 * (src_boxes.len() + load.boxes.len()) as u64 + 4 * plan.box_proc_id.len() as u64);
    let typed = (0..cfg.nodes).map(|j| classify(j, &directory, &plan, &cfg.classify)).collect::<Result<Vec<_>>>()?;
    Ok(ClusterSetup { directory, plan, typed, setup_bytes: remote_bytes + broadcast })
}

fn width(level: u32) -> f64 {
    1.0 / (1u64 << level) as f64
}

/// Sums the held children of every box at `level` into it. Returns the
/// child ranks used so the caller can tally them.
fn m2m_level(
    store: &mut MStore,
    dir: &LevelDirectory,
    ops: &Operators,
    level: u32,
    require_all: bool,
) -> Result<Vec<usize>> {
    let p2 = ops.p * ops.p;
    let child_w = width(level + 1);
    let children = dir.sources(level + 1);
    let mut used = Vec::new();
    let mut scratch = Vec::new();
    let ((coarse_c, coarse_s), (fine_c, fine_s)) = store.parent_and_children(level);
    for r in 0..coarse_s.len() {
        let range = dir.source_children(level, r);
        let total = range.len();
        let mut held = 0;
        let mut all_complete = true;
        let out = &mut coarse_c[r * p2..(r + 1) * p2];
        for c in range {
            match fine_s[c] {
                MStatus::Missing => continue,
                s => all_complete &= s == MStatus::Complete,
            }
            held += 1;
            ops.m2m((children[c] & 7) as usize, child_w, &fine_c[c * p2..(c + 1) * p2], out, &mut scratch);
            used.push(c);
        }
        if require_all && (held < total || !all_complete) {
            return domain(format!("box {} at level {level} is missing child M-data", dir.sources(level)[r]));
        }
        coarse_s[r] = match held {
            0 => MStatus::Missing,
            h if h == total && all_complete => MStatus::Complete,
            _ => MStatus::Partial,
        };
    }
    Ok(used)
}

/// P2M on the finest boxes the node owns, then M2M down to `l_crit`.
fn upward_to_crit(node: &mut NodeState, dir: &LevelDirectory, plan: &PartitionPlan, ops: &Operators) -> Result<Tally> {
    let l_max = dir.l_max;
    let mut tally = Tally::new(dir, plan.l_crit);
    let mut sources: Vec<(u32, ChargedPoint)> = Vec::new();
    for u in &node.units {
        sources.extend(u.source_ids.iter().copied().zip(u.sources.iter().copied()));
    }
    sources.sort_unstable_by_key(|s| s.0);
    sources.dedup_by_key(|s| s.0);
    let points: Vec<ChargedPoint> = sources.into_iter().map(|s| s.1).collect();
    let (sorted, _) = pseudo_sort(&points, l_max, &SortConfig::deterministic())?;
    let mut scratch = Vec::new();
    for i in 0..sorted.box_count() {
        let key = sorted.box_key(i);
        if plan.node_of_index(l_max, key.index()) != node.id {
            continue;
        }
        let rank = dir.source_rank(l_max, key.index()).expect("source box in the global directory");
        p2m_into(sorted.box_points(i), &key.center(), ops.p, node.store.coeffs_mut(l_max, rank), &mut scratch);
        node.store.set_status(l_max, rank, MStatus::Complete);
        tally.p2m[rank] += 1;
    }
    for l in (plan.l_crit..l_max).rev() {
        for c in m2m_level(&mut node.store, dir, ops, l, false)? {
            tally.m2m[l as usize + 1][c] += 1;
        }
    }
    Ok(tally)
}

/// Local expansions for the ancestors of the node's receivers, down to the
/// finest level.
fn downward(node: &mut NodeState, dir: &LevelDirectory, stencils: &TranslationStencils, ops: &Operators) -> Result<()> {
    let l_max = dir.l_max;
    let p2 = ops.p * ops.p;
    let leaf: Vec<u64> = {
        let mut v: Vec<u64> =
            node.units.iter().flat_map(|u| u.receivers.iter().map(|r| point_index(r, l_max))).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let mut prev_ranks: Vec<usize> = Vec::new();
    let mut prev: Vec<f64> = Vec::new();
    let mut scratch = Vec::new();
    for l in 2..=l_max {
        let shift = 3 * (l_max - l);
        let mut idx: Vec<u64> = leaf.iter().map(|b| b >> shift).collect();
        idx.dedup();
        let ranks: Vec<usize> =
            idx.iter().map(|&b| dir.receiver_rank(l, b).expect("receiver ancestors are in the directory")).collect();
        let mut cur = vec![0.0; ranks.len() * p2];
        let recv = dir.receivers(l);
        let srcs = dir.sources(l);
        for (k, &r) in ranks.iter().enumerate() {
            let out = &mut cur[k * p2..(k + 1) * p2];
            let key = MortonKey::new_unchecked(l, recv[r]);
            if l > 2 {
                let pr = dir.receiver_rank(l - 1, recv[r] >> 3).expect("parent present");
                let pk = prev_ranks.binary_search(&pr).expect("parent computed on this node");
                ops.l2l((recv[r] & 7) as usize, width(l), &prev[pk * p2..(pk + 1) * p2], out, &mut scratch);
            }
            for &s in stencils.level(l).segment(r) {
                let s = s as usize;
                let m = node.store.complete(l, s).ok_or_else(|| {
                    crate::FmmError::Domain(format!(
                        "node {} lacks M-data of box {} at level {l} needed by receiver box {}",
                        node.id, srcs[s], recv[r]
                    ))
                })?;
                let offset = MortonKey::new_unchecked(l, srcs[s]).offset_to(&key);
                ops.m2l(offset, width(l), m, out, &mut scratch);
            }
        }
        prev_ranks = ranks;
        prev = cur;
    }
    node.locals = LeafLocals { ranks: prev_ranks, coeffs: prev };
    Ok(())
}

fn build_nodes(
    sources: &[ChargedPoint],
    receivers: &[Point3],
    setup: &ClusterSetup,
    scatter: &Scatter,
    p: usize,
) -> Vec<NodeState> {
    let plan = &setup.plan;
    (0..plan.nodes)
        .map(|j| NodeState {
            id: j,
            units: plan
                .units_of_node(j)
                .map(|u| {
                    let a = &scatter.units[u];
                    UnitData {
                        unit: u,
                        sources: a.sources.iter().map(|&i| sources[i as usize]).collect(),
                        source_ids: a.sources.clone(),
                        receivers: a.receivers.iter().map(|&i| receivers[i as usize]).collect(),
                        receiver_ids: a.receivers.clone(),
                    }
                })
                .collect(),
            store: MStore::new(&setup.directory, p),
            locals: LeafLocals::default(),
        })
        .collect()
}

/// Runs the whole distributed pipeline and returns potentials plus every
/// counter the run produced.
pub fn evaluate_distributed(
    sources: &[ChargedPoint],
    receivers: &[Point3],
    cfg: &ClusterConfig,
) -> Result<DistributedRun> {
    check_order(cfg.p)?;
    let setup = plan_cluster(sources, receivers, cfg)?;
    let dir = &setup.directory;
    let plan = &setup.plan;
    let scatter = scatter_points(plan, sources, receivers)?;
    let mut nodes = build_nodes(sources, receivers, &setup, &scatter, cfg.p);
    let ops = Operators::new(cfg.p);

    let tallies = nodes.par_iter_mut().map(|n| upward_to_crit(n, dir, plan, &ops)).collect::<Result<Vec<_>>>()?;
    let mut tally = Tally::new(dir, plan.l_crit);
    for t in &tallies {
        tally.add(t);
    }

    let mut manager = DataManager::new(cfg.record_trace);
    manager.run_upward_exchange(&mut nodes, &setup.typed, plan, dir)?;

    let stencils = build_translation_stencils(dir)?;
    nodes.par_iter_mut().try_for_each(|n| -> Result<()> {
        for l in (2..plan.l_crit).rev() {
            m2m_level(&mut n.store, dir, &ops, l, true)?;
        }
        downward(n, dir, &stencils, &ops)
    })?;
    let potentials = run_downward_redistribution(&nodes, dir, receivers.len())?;

    Ok(DistributedRun {
        potentials,
        scatter_moved_points: scatter.moved_points,
        halo_copies: scatter.halo_copies,
        ledger: manager.meter(),
        trace: manager.trace().to_vec(),
        tally,
        nodes,
        setup,
    })
}
