//! Interaction lists built from the compacted box arrays.
//!
//! * [`NeighborTable`]: for every non-empty receiver box at the finest
//!   level, the ranks of the non-empty source boxes in its E2 set (near
//!   field, evaluated by direct summation).
//! * [`LevelDirectory`]: non-empty source and receiver boxes at every level.
//! * [`TranslationStencils`]: for every level `l >= 2` and every non-empty
//!   receiver box, the ranks of the non-empty source boxes in its E4 set
//!   (far field, evaluated by multipole-to-local translation).
//!
//! All lists are stored as a bookmark array plus a flat entry array, and
//! every entry is a compacted rank, so consumers never search.

use rayon::prelude::*;

use crate::error::{domain, Result};
use crate::fmm::ChargedPoint;
use crate::morton::{boxes_at_level, decode, encode, MortonKey, Point3, MAX_LEVEL};
use crate::pseudosort::{pseudo_sort, Bookmarks, SortConfig, SortedPointSet};
use crate::scan::exclusive_scan;

/// Segmented list: entries of segment `i` are
/// `list[bookmarks[i]..bookmarks[i + 1]]`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NeighborTable {
    pub bookmarks: Vec<u32>,
    pub list: Vec<u32>,
}

impl NeighborTable {
    fn empty(segments: usize) -> Self {
        Self { bookmarks: vec![0; segments + 1], list: Vec::new() }
    }

    /// Number of segments (receiver boxes).
    pub fn len(&self) -> usize {
        self.bookmarks.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn segment(&self, i: usize) -> &[u32] {
        &self.list[self.bookmarks[i] as usize..self.bookmarks[i + 1] as usize]
    }

    /// Two-phase parallel build: count, scan, then fill disjoint slices.
    fn build<C, F>(segments: usize, count: C, fill: F) -> Result<Self>
    where
        C: Fn(usize) -> u32 + Sync,
        F: Fn(usize, &mut [u32]) + Sync,
    {
        if segments == 0 {
            return Ok(Self::empty(0));
        }
        let counts: Vec<u32> = (0..segments).into_par_iter().map(&count).collect();
        let (mut bookmarks, total) = exclusive_scan(&counts)?;
        bookmarks.push(total);
        let mut list = vec![0u32; total as usize];
        let mut slices = Vec::with_capacity(segments);
        let mut rest = list.as_mut_slice();
        for &c in &counts {
            let (head, tail) = rest.split_at_mut(c as usize);
            slices.push(head);
            rest = tail;
        }
        slices.into_par_iter().enumerate().for_each(|(i, out)| fill(i, out));
        Ok(Self { bookmarks, list })
    }
}

/// Box-index to rank lookup for one level.
enum RankMap<'a> {
    Dense(Vec<u32>),
    Sorted(&'a [u64]),
}

const DENSE_RANK_MAX_LEVEL: u32 = 8;

impl<'a> RankMap<'a> {
    fn new(boxes: &'a [u64], level: u32) -> Self {
        if level <= DENSE_RANK_MAX_LEVEL {
            let mut dense = vec![u32::MAX; boxes_at_level(level) as usize];
            for (r, &b) in boxes.iter().enumerate() {
                dense[b as usize] = r as u32;
            }
            Self::Dense(dense)
        } else {
            Self::Sorted(boxes)
        }
    }

    #[inline]
    fn get(&self, index: u64) -> Option<u32> {
        match self {
            Self::Dense(d) => match d[index as usize] {
                u32::MAX => None,
                r => Some(r),
            },
            Self::Sorted(s) => s.binary_search(&index).ok().map(|r| r as u32),
        }
    }
}

/// Same-level indices of the E2 set of `index`, in Morton order.
pub(crate) fn e2_indices(level: u32, index: u64) -> arrayvec::ArrayVec<u64, 27> {
    let (ix, iy, iz) = decode(index);
    let side = 1i64 << level;
    let mut out = arrayvec::ArrayVec::new();
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (x, y, z) = (ix as i64 + dx, iy as i64 + dy, iz as i64 + dz);
                if (0..side).contains(&x) && (0..side).contains(&y) && (0..side).contains(&z) {
                    out.push(encode(x as u32, y as u32, z as u32));
                }
            }
        }
    }
    out.sort_unstable();
    out
}

/// Calls `f` for every E4 index of `index` at `level`, in Morton order.
pub(crate) fn for_each_e4(level: u32, index: u64, mut f: impl FnMut(u64)) {
    if level < 2 {
        return;
    }
    let (ix, iy, iz) = decode(index);
    for pn in e2_indices(level - 1, index >> 3) {
        for k in 0..8 {
            let child = (pn << 3) + k;
            let (cx, cy, cz) = decode(child);
            let touching = cx.abs_diff(ix) <= 1 && cy.abs_diff(iy) <= 1 && cz.abs_diff(iz) <= 1;
            if !touching {
                f(child);
            }
        }
    }
}

/// Lists, for every non-empty receiver box, the non-empty source boxes in
/// its E2 set as ranks into the source bookmark arrays.
pub fn build_neighbor_table(src: &Bookmarks, recv_non_empty: &[u64], level: u32) -> Result<NeighborTable> {
    if src.level != level {
        return domain(format!("source bookmarks are at level {} but receivers at level {level}", src.level));
    }
    NeighborTable::build(
        recv_non_empty.len(),
        |i| e2_indices(level, recv_non_empty[i]).iter().filter(|&&b| src.rank_of(b).is_some()).count() as u32,
        |i, out| {
            let ranks = e2_indices(level, recv_non_empty[i]).into_iter().filter_map(|b| src.rank_of(b));
            for (slot, r) in out.iter_mut().zip(ranks) {
                *slot = r;
            }
        },
    )
}

/// Concatenates the source points of the E2 boxes of receiver box `ordinal`.
pub fn gather_e2_sources<T: Copy>(
    table: &NeighborTable,
    sorted_src: &SortedPointSet<T>,
    ordinal: usize,
) -> Result<Vec<T>> {
    if ordinal >= table.len() {
        return domain(format!("receiver box ordinal {ordinal} out of range ({} boxes)", table.len()));
    }
    Ok(table.segment(ordinal).iter().flat_map(|&s| sorted_src.box_points(s as usize).iter().copied()).collect())
}

/// Non-empty source and receiver boxes at every level `0..=l_max`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelDirectory {
    pub l_max: u32,
    pub sources: Vec<Vec<u64>>,
    pub receivers: Vec<Vec<u64>>,
}

fn parents_of(children: &[u64]) -> Vec<u64> {
    let mut out: Vec<u64> = children.iter().map(|&c| c >> 3).collect();
    out.dedup();
    out
}

impl LevelDirectory {
    pub fn sources(&self, level: u32) -> &[u64] {
        &self.sources[level as usize]
    }

    pub fn receivers(&self, level: u32) -> &[u64] {
        &self.receivers[level as usize]
    }

    pub fn source_rank(&self, level: u32, index: u64) -> Option<usize> {
        self.sources[level as usize].binary_search(&index).ok()
    }

    pub fn receiver_rank(&self, level: u32, index: u64) -> Option<usize> {
        self.receivers[level as usize].binary_search(&index).ok()
    }

    /// Ranks (at `level + 1`) of the non-empty source children of source box
    /// `rank` at `level`.
    pub fn source_children(&self, level: u32, rank: usize) -> std::ops::Range<usize> {
        children_range(&self.sources[level as usize + 1], self.sources[level as usize][rank])
    }

    pub fn receiver_children(&self, level: u32, rank: usize) -> std::ops::Range<usize> {
        children_range(&self.receivers[level as usize + 1], self.receivers[level as usize][rank])
    }
}

fn children_range(finer: &[u64], parent: u64) -> std::ops::Range<usize> {
    let lo = finer.partition_point(|&c| c < parent << 3);
    let hi = finer.partition_point(|&c| c < (parent + 1) << 3);
    lo..hi
}

/// Propagates the finest-level non-empty sets up to the root.
pub fn build_level_directory(src_lmax: &[u64], recv_lmax: &[u64], l_max: u32) -> Result<LevelDirectory> {
    if l_max > MAX_LEVEL {
        return domain(format!("level {l_max} exceeds the maximum {MAX_LEVEL}"));
    }
    for (name, set) in [("source", src_lmax), ("receiver", recv_lmax)] {
        if set.windows(2).any(|w| w[0] >= w[1]) {
            return domain(format!("{name} box indices must be strictly increasing"));
        }
        if set.last().is_some_and(|&b| b >= boxes_at_level(l_max)) {
            return domain(format!("{name} box index out of range at level {l_max}"));
        }
    }
    let mut sources = vec![Vec::new(); l_max as usize + 1];
    let mut receivers = vec![Vec::new(); l_max as usize + 1];
    sources[l_max as usize] = src_lmax.to_vec();
    receivers[l_max as usize] = recv_lmax.to_vec();
    for l in (0..l_max as usize).rev() {
        sources[l] = parents_of(&sources[l + 1]);
        receivers[l] = parents_of(&receivers[l + 1]);
    }
    Ok(LevelDirectory { l_max, sources, receivers })
}

/// Per-level E4 interaction lists; index 0 and 1 are always empty.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TranslationStencils {
    pub levels: Vec<NeighborTable>,
}

impl TranslationStencils {
    pub fn level(&self, level: u32) -> &NeighborTable {
        &self.levels[level as usize]
    }

    /// Total number of (receiver, source) translation pairs.
    pub fn pair_count(&self) -> usize {
        self.levels.iter().map(|t| t.list.len()).sum()
    }
}

/// Intersects every receiver box's E4 set with the non-empty sources.
pub fn build_translation_stencils(dir: &LevelDirectory) -> Result<TranslationStencils> {
    let mut levels = Vec::with_capacity(dir.l_max as usize + 1);
    for l in 0..=dir.l_max {
        let recv = dir.receivers(l);
        if l < 2 || dir.sources(l).is_empty() {
            levels.push(NeighborTable::empty(recv.len()));
            continue;
        }
        let ranks = RankMap::new(dir.sources(l), l);
        let table = NeighborTable::build(
            recv.len(),
            |i| {
                let mut n = 0;
                for_each_e4(l, recv[i], |s| n += ranks.get(s).is_some() as u32);
                n
            },
            |i, out| {
                let mut k = 0;
                for_each_e4(l, recv[i], |s| {
                    if let Some(r) = ranks.get(s) {
                        out[k] = r;
                        k += 1;
                    }
                });
            },
        )?;
        levels.push(table);
    }
    Ok(TranslationStencils { levels })
}

/// How the finest level is chosen.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Depth {
    Level(u32),
    /// Target maximum points per finest-level box.
    ClusterSize(usize),
}

impl Depth {
    /// Smallest `l` with `ceil(n / 8^l) <= cluster_size`, or the explicit level.
    pub fn resolve(&self, n: usize) -> Result<u32> {
        match *self {
            Depth::Level(l) if l > MAX_LEVEL => domain(format!("level {l} exceeds {MAX_LEVEL}")),
            Depth::Level(l) => Ok(l),
            Depth::ClusterSize(0) => domain("cluster size must be positive"),
            Depth::ClusterSize(s) => (0..=MAX_LEVEL)
                .find(|&l| (n as u64).div_ceil(boxes_at_level(l)) <= s as u64)
                .ok_or_else(|| crate::FmmError::Domain(format!("no level reaches cluster size {s}"))),
        }
    }
}

/// Everything the evaluator needs, built in linear time.
#[derive(Clone, Debug, PartialEq)]
pub struct FmmStructures {
    pub l_max: u32,
    pub sources: SortedPointSet<ChargedPoint>,
    pub receivers: SortedPointSet<Point3>,
    pub neighbors: NeighborTable,
    pub directory: LevelDirectory,
    pub stencils: TranslationStencils,
}

impl FmmStructures {
    /// Source points of the E2 boxes of receiver box `ordinal`, as slices.
    pub fn near_sources(&self, ordinal: usize) -> impl Iterator<Item = &[ChargedPoint]> + '_ {
        self.neighbors.segment(ordinal).iter().map(move |&s| self.sources.box_points(s as usize))
    }

    pub fn receiver_key(&self, ordinal: usize) -> MortonKey {
        self.receivers.box_key(ordinal)
    }
}

/// Sorts both point sets and builds every list. The dense per-box
/// histograms are dropped before returning.
pub fn build_all(
    sources: &[ChargedPoint],
    receivers: &[Point3],
    depth: Depth,
    config: &SortConfig,
) -> Result<FmmStructures> {
    let l_max = depth.resolve(sources.len().max(receivers.len()))?;
    let (sorted_src, src_marks) = pseudo_sort(sources, l_max, config)?;
    let (sorted_recv, recv_marks) = pseudo_sort(receivers, l_max, config)?;
    drop(recv_marks);
    let neighbors = build_neighbor_table(&src_marks, &sorted_recv.non_empty_index, l_max)?;
    drop(src_marks);
    let directory = build_level_directory(&sorted_src.non_empty_index, &sorted_recv.non_empty_index, l_max)?;
    let stencils = build_translation_stencils(&directory)?;
    Ok(FmmStructures { l_max, sources: sorted_src, receivers: sorted_recv, neighbors, directory, stencils })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudosort::{build_bookmarks, histogram_and_sort_index};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn marks_for(points: &[Point3], level: u32) -> Bookmarks {
        let (bins, _) = histogram_and_sort_index(points, level, &SortConfig::default()).unwrap();
        build_bookmarks(&bins, level).unwrap()
    }

    fn charged(p: Point3) -> ChargedPoint {
        ChargedPoint::new(p, 1.0)
    }

    #[test]
    fn neighbor_table_same_box() {
        let p = Point3::new(0.1, 0.2, 0.3);
        let src = marks_for(&[p], 1);
        let t = build_neighbor_table(&src, &[0], 1).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.segment(0), &[0]);

        let (sorted, _) = pseudo_sort(&[charged(p)], 1, &SortConfig::default()).unwrap();
        let got = gather_e2_sources(&t, &sorted, 0).unwrap();
        assert_eq!(got, vec![charged(p)]);
        assert!(gather_e2_sources(&t, &sorted, 1).is_err());
    }

    #[test]
    fn neighbor_table_opposite_corner_is_empty() {
        let src = marks_for(&[Point3::new(0.9, 0.9, 0.9)], 2);
        assert_eq!(src.non_empty_index, vec![63]);
        let t = build_neighbor_table(&src, &[0], 2).unwrap();
        assert!(t.segment(0).is_empty());
        let (sorted, _) = pseudo_sort(&[charged(Point3::new(0.9, 0.9, 0.9))], 2, &SortConfig::default()).unwrap();
        assert!(gather_e2_sources(&t, &sorted, 0).unwrap().is_empty());
    }

    #[test]
    fn level_directory_examples() {
        let dir = build_level_directory(&[0], &[0], 4).unwrap();
        for l in 0..=4 {
            assert_eq!(dir.sources(l), &[0]);
        }
        let dir = build_level_directory(&(0..8).collect::<Vec<_>>(), &[3], 1).unwrap();
        assert_eq!(dir.sources(1).len(), 8);
        assert_eq!(dir.sources(0), &[0]);
        assert_eq!(dir.source_children(0, 0), 0..8);
        assert!(build_level_directory(&[3, 1], &[], 2).is_err());
    }

    #[test]
    fn level_directory_matches_per_level_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Point3> =
            (0..3000).map(|_| Point3::new(rng.random(), rng.random::<f64>() * 0.5, rng.random())).collect();
        let m = marks_for(&pts, 5);
        let dir = build_level_directory(&m.non_empty_index, &m.non_empty_index, 5).unwrap();
        for l in 0..=5 {
            let mut expect: Vec<u64> = pts.iter().map(|p| MortonKey::from_point(p, l).unwrap().index()).collect();
            expect.sort_unstable();
            expect.dedup();
            assert_eq!(dir.sources(l), expect.as_slice());
        }
    }

    #[test]
    fn stencil_full_level_two() {
        let all: Vec<u64> = (0..64).collect();
        let dir = build_level_directory(&all, &[21], 2).unwrap();
        let st = build_translation_stencils(&dir).unwrap();
        let r = MortonKey::new(2, 21).unwrap();
        assert_eq!(st.level(2).segment(0).len(), 64 - r.e2_neighbors().len());
        assert!(st.level(1).list.is_empty());
    }

    #[test]
    fn stencil_without_sources_is_empty() {
        let dir = build_level_directory(&[], &[5, 9], 3).unwrap();
        let st = build_translation_stencils(&dir).unwrap();
        for l in 0..=3 {
            assert!(st.level(l).list.is_empty());
            assert_eq!(st.level(l).len(), dir.receivers(l).len());
        }
    }

    #[test]
    fn e4_walk_matches_key_method() {
        for i in [0u64, 77, 300, 511] {
            let k = MortonKey::new(3, i).unwrap();
            let mut walked = Vec::new();
            for_each_e4(3, i, |s| walked.push(s));
            assert_eq!(walked, k.e4_neighbors().iter().map(|k| k.index()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn cluster_size_picks_smallest_level() {
        assert_eq!(Depth::ClusterSize(64).resolve(64).unwrap(), 0);
        assert_eq!(Depth::ClusterSize(64).resolve(65).unwrap(), 1);
        assert_eq!(Depth::ClusterSize(16).resolve(1 << 20).unwrap(), 6);
        assert_eq!(Depth::ClusterSize(32).resolve(1 << 20).unwrap(), 5);
        assert_eq!(Depth::Level(3).resolve(10).unwrap(), 3);
        assert!(Depth::ClusterSize(0).resolve(10).is_err());
    }

    #[test]
    fn build_all_single_coincident_point() {
        let p = Point3::new(0.3, 0.6, 0.2);
        let s = build_all(&[charged(p)], &[p], Depth::Level(3), &SortConfig::default()).unwrap();
        assert_eq!(s.sources.len(), 1);
        assert_eq!(s.receivers.box_count(), 1);
        assert_eq!(s.neighbors.segment(0), &[0]);
        assert_eq!(s.stencils.pair_count(), 0);
        assert_eq!(s.near_sources(0).flatten().count(), 1);
    }
}
