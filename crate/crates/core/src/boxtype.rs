//! Per-node classification of the global non-empty source boxes.
//!
//! Levels below `l_crit` are computed redundantly on every node. At `l_crit`
//! every node needs every box, so a box is IMPORT on nodes that hold none of
//! its data, ROOT on nodes that hold part of it, and EXPORT on the node that
//! holds all of it. Above `l_crit` each box has exactly one owner, and M-data
//! only moves where an E4 stencil crosses a node boundary.

use std::sync::atomic::{AtomicBool, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{domain, Result};
use crate::lists::{for_each_e4, LevelDirectory};
use crate::partition::PartitionPlan;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum BoxType {
    /// Computed and consumed on this node only.
    Domestic = 0,
    /// Owned here, needed elsewhere.
    Export = 1,
    /// Owned elsewhere, needed here.
    Import = 2,
    /// Partially held here; completed by summing contributions.
    Root = 3,
    /// Neither held nor needed here.
    Other = 4,
}

impl BoxType {
    pub const ALL: [BoxType; 5] = [Self::Domestic, Self::Export, Self::Import, Self::Root, Self::Other];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassifyOptions {
    /// Process boxes sequentially in a seeded random order instead of in
    /// parallel. The result must not depend on it.
    pub shuffle_seed: Option<u64>,
}

/// Types of one level's non-empty source boxes, parallel to the box array.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LevelTypes {
    pub boxes: Vec<u64>,
    pub types: Vec<BoxType>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TypedBoxList {
    pub node: usize,
    pub l_crit: u32,
    /// Indexed by level; levels 0 and 1 are empty.
    pub levels: Vec<LevelTypes>,
    exports: Vec<Vec<u64>>,
    imports: Vec<Vec<u64>>,
    roots: Vec<Vec<u64>>,
}

impl TypedBoxList {
    pub fn from_levels(node: usize, l_crit: u32, levels: Vec<LevelTypes>) -> Result<Self> {
        let pick = |t: BoxType| -> Vec<Vec<u64>> {
            levels
                .iter()
                .map(|lv| lv.boxes.iter().zip(&lv.types).filter(|(_, &ty)| ty == t).map(|(&b, _)| b).collect())
                .collect()
        };
        for (l, lv) in levels.iter().enumerate() {
            if lv.boxes.len() != lv.types.len() {
                return domain(format!("level {l}: {} boxes but {} types", lv.boxes.len(), lv.types.len()));
            }
            if lv.boxes.windows(2).any(|w| w[0] >= w[1]) {
                return domain(format!("level {l}: boxes not strictly increasing"));
            }
        }
        Ok(Self {
            node,
            l_crit,
            exports: pick(BoxType::Export),
            imports: pick(BoxType::Import),
            roots: pick(BoxType::Root),
            levels,
        })
    }

    pub fn l_max(&self) -> u32 {
        self.levels.len() as u32 - 1
    }

    /// Sorted EXPORT boxes at `level`.
    pub fn export_list(&self, level: u32) -> &[u64] {
        &self.exports[level as usize]
    }

    pub fn import_list(&self, level: u32) -> &[u64] {
        &self.imports[level as usize]
    }

    pub fn root_list(&self, level: u32) -> &[u64] {
        &self.roots[level as usize]
    }

    /// Type of a non-empty source box; `None` for boxes that hold no sources.
    pub fn type_of(&self, level: u32, index: u64) -> Result<Option<BoxType>> {
        if level < 2 {
            return domain(format!("no box types below level 2 (asked for level {level})"));
        }
        let Some(lv) = self.levels.get(level as usize) else {
            return domain(format!("level {level} beyond l_max {}", self.l_max()));
        };
        Ok(lv.boxes.binary_search(&index).ok().map(|r| lv.types[r]))
    }

    pub fn count(&self, level: u32, ty: BoxType) -> usize {
        self.levels[level as usize].types.iter().filter(|&&t| t == ty).count()
    }
}

/// Runs `f` over `0..n` in parallel, or sequentially in a seeded shuffled
/// order when requested.
fn for_each_box(n: usize, opts: &ClassifyOptions, salt: u64, f: impl Fn(usize) + Sync + Send) {
    match opts.shuffle_seed {
        None => (0..n).into_par_iter().for_each(f),
        Some(seed) => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
            order.into_iter().for_each(f);
        }
    }
}

/// Classifies every non-empty source box at levels `2..=l_max` for `node`.
pub fn classify(
    node: usize,
    dir: &LevelDirectory,
    plan: &PartitionPlan,
    opts: &ClassifyOptions,
) -> Result<TypedBoxList> {
    if node >= plan.nodes {
        return domain(format!("node {node} out of range ({} nodes)", plan.nodes));
    }
    if dir.l_max != plan.l_max {
        return domain(format!("directory depth {} differs from plan depth {}", dir.l_max, plan.l_max));
    }
    let (l_crit, l_par) = (plan.l_crit, plan.l_par);
    let mut levels = vec![LevelTypes::default(); dir.l_max as usize + 1];

    for l in 2..=dir.l_max {
        let boxes = dir.sources(l);
        let types: Vec<BoxType> = if l < l_crit {
            vec![BoxType::Domestic; boxes.len()]
        } else if l == l_crit {
            let out: Vec<AtomicTypeSlot> = (0..boxes.len()).map(|_| AtomicTypeSlot::default()).collect();
            for_each_box(boxes.len(), opts, l as u64, |r| {
                let holders = crit_holders(dir, plan, r);
                let ty = if !holders.contains(&node) {
                    BoxType::Import
                } else if holders.len() > 1 {
                    BoxType::Root
                } else if plan.nodes > 1 {
                    BoxType::Export
                } else {
                    BoxType::Domestic
                };
                out[r].set(ty);
            });
            out.into_iter().map(AtomicTypeSlot::get).collect()
        } else {
            debug_assert!(l >= l_par);
            // marking phase
            let export = flags(boxes.len());
            let import = flags(boxes.len());
            let receivers = dir.receivers(l);
            for_each_box(boxes.len(), opts, 2 * l as u64, |r| {
                let b = boxes[r];
                if plan.node_of_index(l, b) != node {
                    return;
                }
                let mut hit = false;
                for_each_e4(l, b, |n| {
                    hit |= !hit && plan.node_of_index(l, n) != node && dir.receiver_rank(l, n).is_some();
                });
                if hit {
                    export[r].store(true, Ordering::Relaxed);
                }
            });
            for_each_box(receivers.len(), opts, 2 * l as u64 + 1, |r| {
                let rb = receivers[r];
                if plan.node_of_index(l, rb) != node {
                    return;
                }
                for_each_e4(l, rb, |s| {
                    if plan.node_of_index(l, s) != node {
                        if let Some(sr) = dir.source_rank(l, s) {
                            import[sr].store(true, Ordering::Relaxed);
                        }
                    }
                });
            });
            // resolution phase, after the implicit barrier above
            boxes
                .iter()
                .enumerate()
                .map(|(r, &b)| {
                    let mine = plan.node_of_index(l, b) == node;
                    match (mine, export[r].load(Ordering::Relaxed), import[r].load(Ordering::Relaxed)) {
                        (true, true, _) => BoxType::Export,
                        (true, false, _) => BoxType::Domestic,
                        (false, _, true) => BoxType::Import,
                        (false, _, false) => BoxType::Other,
                    }
                })
                .collect()
        };
        levels[l as usize] = LevelTypes { boxes: boxes.to_vec(), types };
    }
    TypedBoxList::from_levels(node, l_crit, levels)
}

/// Nodes holding source data of box `rank` at `l_crit`, ascending.
pub(crate) fn crit_holders(dir: &LevelDirectory, plan: &PartitionPlan, rank: usize) -> Vec<usize> {
    let (l_crit, l_par) = (plan.l_crit, plan.l_par);
    let b = dir.sources(l_crit)[rank];
    if l_par == l_crit {
        return vec![plan.node_of_index(l_par, b)];
    }
    debug_assert_eq!(l_par, l_crit + 1);
    let children = dir.sources(l_par);
    let mut out: Vec<usize> =
        dir.source_children(l_crit, rank).map(|c| plan.node_of_index(l_par, children[c])).collect();
    out.dedup();
    out
}

fn flags(n: usize) -> Vec<AtomicBool> {
    (0..n).map(|_| AtomicBool::new(false)).collect()
}

/// Write-once type cell usable from parallel closures.
#[derive(Default)]
struct AtomicTypeSlot(std::sync::atomic::AtomicU8);

impl AtomicTypeSlot {
    fn set(&self, t: BoxType) {
        self.0.store(t as u8, Ordering::Relaxed);
    }

    fn get(self) -> BoxType {
        BoxType::from_u8(self.0.into_inner()).expect("slot written")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lists::build_level_directory;
    use crate::morton::encode;
    use crate::partition::{LoadProfile, PartitionPlan};

    fn all_boxes(level: u32) -> Vec<u64> {
        (0..1u64 << (3 * level)).collect()
    }

    #[test]
    fn single_node_is_all_domestic() {
        let dir = build_level_directory(&all_boxes(4), &all_boxes(4), 4).unwrap();
        let load = LoadProfile::new(4, all_boxes(4), vec![1; 4096]).unwrap();
        for l_par in 2..=4 {
            let plan = PartitionPlan::with_level(&load, 1, 2, l_par, 0.2).unwrap();
            let t = classify(0, &dir, &plan, &ClassifyOptions::default()).unwrap();
            for l in 2..=4 {
                assert_eq!(t.count(l, BoxType::Domestic), dir.sources(l).len());
            }
        }
    }

    /// Uniform load on the full level-3 grid: two nodes split at z = 1/2,
    /// since z is the most significant Morton bit.
    #[test]
    fn boundary_scenario() {
        let dir = build_level_directory(&all_boxes(3), &all_boxes(3), 3).unwrap();
        let load = LoadProfile::new(3, all_boxes(3), vec![1; 512]).unwrap();
        let plan = PartitionPlan::with_level(&load, 2, 1, 3, 0.2).unwrap();
        assert_eq!((plan.l_par, plan.l_crit), (3, 2));
        assert_eq!(plan.ranges, vec![0..256, 256..512]);
        let t0 = classify(0, &dir, &plan, &ClassifyOptions::default()).unwrap();
        let t1 = classify(1, &dir, &plan, &ClassifyOptions::default()).unwrap();

        // level-2 box 31 has its level-3 children 248..256 on node 0 only,
        // box 32 on node 1 only: at l_crit each is EXPORT on its holder and
        // IMPORT on the other node
        assert_eq!(t0.type_of(2, 31).unwrap(), Some(BoxType::Export));
        assert_eq!(t1.type_of(2, 31).unwrap(), Some(BoxType::Import));
        assert_eq!(t1.type_of(2, 32).unwrap(), Some(BoxType::Export));
        assert!(t0.root_list(2).is_empty(), "level-3 ranges align with level-2 boxes");

        // z-plane 3 and z-plane 4 at level 3 face each other across the cut
        let near_cut = encode(2, 2, 3);
        let across = encode(2, 2, 5);
        assert!(near_cut < 256 && across >= 256);
        // box across the cut at z=5 is within reach of node-0 receivers at
        // z=3 (two apart), so it is exported by node 1 and imported by node 0
        assert_eq!(t1.type_of(3, across).unwrap(), Some(BoxType::Export));
        assert_eq!(t0.type_of(3, across).unwrap(), Some(BoxType::Import));
        // a node-1 box far from the cut is never referenced by node 0
        let far = encode(7, 7, 7);
        assert_eq!(t0.type_of(3, far).unwrap(), Some(BoxType::Other));
        assert_eq!(t1.type_of(3, far).unwrap(), Some(BoxType::Domestic));
        assert!(t0.type_of(1, 0).is_err());
    }

    #[test]
    fn straddling_box_is_root() {
        // receivers only in the first 3 level-3 boxes and the last 5 of the
        // same level-2 parent: with two nodes the cut falls inside box 0
        let recv: Vec<u64> = (0..8).collect();
        let dir = build_level_directory(&all_boxes(3), &recv, 3).unwrap();
        let load = LoadProfile::new(3, recv.clone(), vec![1; 8]).unwrap();
        let plan = PartitionPlan::with_level(&load, 2, 1, 3, 0.2).unwrap();
        assert_eq!(plan.l_crit, 2);
        let t0 = classify(0, &dir, &plan, &ClassifyOptions::default()).unwrap();
        let t1 = classify(1, &dir, &plan, &ClassifyOptions::default()).unwrap();
        assert_eq!(t0.type_of(2, 0).unwrap(), Some(BoxType::Root));
        assert_eq!(t1.type_of(2, 0).unwrap(), Some(BoxType::Root));
        assert!(t0.levels.iter().enumerate().all(|(l, lv)| l == 2 || !lv.types.contains(&BoxType::Root)));
    }

    #[test]
    fn shuffled_order_gives_same_types() {
        let src: Vec<u64> = (0..4096).filter(|b| b % 3 != 0).collect();
        let recv: Vec<u64> = (0..4096).filter(|b| b % 5 != 1).collect();
        let dir = build_level_directory(&src, &recv, 4).unwrap();
        let load = LoadProfile::new(4, recv.clone(), recv.iter().map(|b| 1 + b % 4).collect()).unwrap();
        let plan = PartitionPlan::with_level(&load, 4, 1, 3, 0.2).unwrap();
        for node in 0..4 {
            let base = classify(node, &dir, &plan, &ClassifyOptions::default()).unwrap();
            for seed in [1, 2, 3] {
                let shuffled = classify(node, &dir, &plan, &ClassifyOptions { shuffle_seed: Some(seed) }).unwrap();
                assert_eq!(base, shuffled);
            }
        }
    }
}
