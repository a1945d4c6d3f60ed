//! Linear-time grouping of points by finest-level Morton box.
//!
//! Points are binned into a dense histogram of `8^level` boxes; each point
//! receives a unique rank inside its box while being counted. A prefix scan
//! of the histogram then gives every box its first slot in the output, so
//! the final position of a point is `offset[box] + rank`. Points inside a box
//! are not ordered relative to each other ("pseudo-sorted").

use std::sync::atomic::{AtomicU32, Ordering};

use rayon::prelude::*;

use crate::error::{domain, FmmError, Result};
use crate::morton::{boxes_at_level, point_index, Located, MortonKey, MAX_LEVEL};
use crate::scan::{compact_flags, exclusive_scan};

/// Default cap on the temporary dense histograms, in bytes.
pub const DEFAULT_MEMORY_BUDGET: u64 = 1 << 30;

/// Number of fixed chunks used by [`SortMode::Deterministic`].
const DETERMINISTIC_CHUNKS: usize = 8;

/// How in-box ranks are assigned.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub enum SortMode {
    /// Shared histogram updated with atomic fetch-and-add. The in-box order
    /// depends on scheduling.
    #[default]
    Parallel,
    /// Per-chunk private histograms merged by a scan. Points keep their
    /// input order inside each box, so the output is bit-stable.
    Deterministic,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct SortConfig {
    pub mode: SortMode,
    /// Upper bound on the bytes held by dense per-box arrays.
    pub memory_budget: u64,
}

impl Default for SortConfig {
    fn default() -> Self {
        Self { mode: SortMode::Parallel, memory_budget: DEFAULT_MEMORY_BUDGET }
    }
}

impl SortConfig {
    pub fn deterministic() -> Self {
        Self { mode: SortMode::Deterministic, ..Self::default() }
    }

    /// Rejects levels whose dense histograms would not fit the budget.
    pub fn check_level(&self, level: u32) -> Result<()> {
        if level > MAX_LEVEL {
            return Err(FmmError::Capacity { what: format!("octree level {level}"), limit: MAX_LEVEL as u64 });
        }
        let copies = match self.mode {
            SortMode::Parallel => 2,
            SortMode::Deterministic => DETERMINISTIC_CHUNKS as u128 + 1,
        };
        let needed = boxes_at_level(level) as u128 * 4 * copies;
        if needed > self.memory_budget as u128 {
            return Err(FmmError::Capacity {
                what: format!("dense histogram of 8^{level} boxes needs {needed} bytes of memory budget"),
                limit: self.memory_budget,
            });
        }
        Ok(())
    }
}

/// Finest-level box of a point and its slot among the points of that box.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct SortIndexEntry {
    pub box_index: u64,
    pub rank_in_box: u32,
}

/// Computes the dense occupancy histogram and every point's in-box rank.
pub fn histogram_and_sort_index<T: Located + Sync>(
    points: &[T],
    level: u32,
    config: &SortConfig,
) -> Result<(Vec<u32>, Vec<SortIndexEntry>)> {
    config.check_level(level)?;
    if points.len() > u32::MAX as usize {
        return Err(FmmError::Capacity { what: format!("{} points", points.len()), limit: u32::MAX as u64 });
    }
    let nboxes = boxes_at_level(level) as usize;
    match config.mode {
        SortMode::Parallel => {
            let bins: Vec<AtomicU32> = (0..nboxes).into_par_iter().map(|_| AtomicU32::new(0)).collect();
            let index = points
                .par_iter()
                .map(|p| {
                    let b = point_index(&p.position(), level);
                    let rank = bins[b as usize].fetch_add(1, Ordering::Relaxed);
                    SortIndexEntry { box_index: b, rank_in_box: rank }
                })
                .collect();
            let bins = bins.into_par_iter().map(AtomicU32::into_inner).collect();
            Ok((bins, index))
        }
        SortMode::Deterministic => {
            let chunk = points.len().div_ceil(DETERMINISTIC_CHUNKS).max(1);
            let mut partial: Vec<(Vec<u32>, Vec<SortIndexEntry>)> = points
                .par_chunks(chunk)
                .map(|c| {
                    let mut hist = vec![0u32; nboxes];
                    let entries = c
                        .iter()
                        .map(|p| {
                            let b = point_index(&p.position(), level);
                            let slot = &mut hist[b as usize];
                            let rank = *slot;
                            *slot += 1;
                            SortIndexEntry { box_index: b, rank_in_box: rank }
                        })
                        .collect();
                    (hist, entries)
                })
                .collect();

            // Turn each chunk histogram into that chunk's per-box offset.
            let mut bins = vec![0u32; nboxes];
            for (hist, _) in partial.iter_mut() {
                bins.par_iter_mut().zip(hist.par_iter_mut()).for_each(|(total, h)| {
                    let count = *h;
                    *h = *total;
                    *total += count;
                });
            }
            let index = partial
                .into_par_iter()
                .flat_map_iter(|(offsets, entries)| {
                    entries.into_iter().map(move |mut e| {
                        e.rank_in_box += offsets[e.box_index as usize];
                        e
                    })
                })
                .collect();
            Ok((bins, index))
        }
    }
}

/// Dense and compacted views of a histogram.
#[derive(Clone, Debug)]
pub struct Bookmarks {
    pub level: u32,
    /// Exclusive scan of the histogram: first output slot of every box.
    pub offsets: Vec<u32>,
    /// Compacted rank of every box; only meaningful where the box is non-empty.
    pub ranks: Vec<u32>,
    /// `bookmarks[i]` is the first sorted point of the i-th non-empty box;
    /// the last entry is the point count.
    pub bookmarks: Vec<u32>,
    /// Morton indices of the non-empty boxes, strictly increasing.
    pub non_empty_index: Vec<u64>,
}

impl Bookmarks {
    /// Compacted rank of `index`, or `None` for an empty box.
    #[inline]
    pub fn rank_of(&self, index: u64) -> Option<u32> {
        let i = index as usize;
        let r = *self.ranks.get(i)?;
        let next = self.ranks.get(i + 1).copied().unwrap_or(self.non_empty_index.len() as u32);
        (next > r).then_some(r)
    }
}

/// Flags the non-empty boxes, compacts them and records their bookmarks.
pub fn build_bookmarks(bins: &[u32], level: u32) -> Result<Bookmarks> {
    if bins.len() as u64 != boxes_at_level(level) {
        return domain(format!("histogram of length {} does not match level {level}", bins.len()));
    }
    let (offsets, total) = exclusive_scan(bins)?;
    let flags: Vec<u32> = bins.par_iter().map(|&b| (b > 0) as u32).collect();
    let (ranks, count) = compact_flags(&flags)?;
    drop(flags);

    let mut non_empty_index = vec![0u64; count as usize];
    let mut bookmarks = vec![0u32; count as usize + 1];
    for (b, &n) in bins.iter().enumerate() {
        if n > 0 {
            let r = ranks[b] as usize;
            non_empty_index[r] = b as u64;
            bookmarks[r] = offsets[b];
        }
    }
    bookmarks[count as usize] = total;
    Ok(Bookmarks { level, offsets, ranks, bookmarks, non_empty_index })
}

/// Points grouped by finest-level box.
#[derive(Clone, Debug, PartialEq)]
pub struct SortedPointSet<T> {
    pub level: u32,
    pub points: Vec<T>,
    /// `permutation[sorted position] = original position`.
    pub permutation: Vec<u32>,
    pub bookmarks: Vec<u32>,
    pub non_empty_index: Vec<u64>,
}

impl<T> SortedPointSet<T> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Number of non-empty boxes.
    pub fn box_count(&self) -> usize {
        self.non_empty_index.len()
    }

    pub fn box_key(&self, ordinal: usize) -> MortonKey {
        MortonKey::new_unchecked(self.level, self.non_empty_index[ordinal])
    }

    pub fn box_range(&self, ordinal: usize) -> std::ops::Range<usize> {
        self.bookmarks[ordinal] as usize..self.bookmarks[ordinal + 1] as usize
    }

    pub fn box_points(&self, ordinal: usize) -> &[T] {
        &self.points[self.box_range(ordinal)]
    }

    /// Compacted ordinal of a box, by binary search.
    pub fn ordinal_of(&self, index: u64) -> Option<usize> {
        self.non_empty_index.binary_search(&index).ok()
    }
}

/// Moves every point to `offsets[box] + rank` and records the permutation.
pub fn reorder<T: Copy + Send + Sync>(
    points: &[T],
    sort_index: &[SortIndexEntry],
    marks: &Bookmarks,
) -> Result<SortedPointSet<T>> {
    if points.len() != sort_index.len() {
        return domain(format!("{} points but {} sort-index entries", points.len(), sort_index.len()));
    }
    let n = points.len();
    let mut permutation = vec![u32::MAX; n];
    for (original, e) in sort_index.iter().enumerate() {
        let Some(&base) = marks.offsets.get(e.box_index as usize) else {
            return domain(format!("box {} outside the histogram", e.box_index));
        };
        let pos = base as usize + e.rank_in_box as usize;
        match permutation.get_mut(pos) {
            Some(slot) if *slot == u32::MAX => *slot = original as u32,
            _ => return domain(format!("sort index maps two points (or none) to slot {pos}")),
        }
    }
    let sorted = permutation.par_iter().map(|&i| points[i as usize]).collect();
    Ok(SortedPointSet {
        level: marks.level,
        points: sorted,
        permutation,
        bookmarks: marks.bookmarks.clone(),
        non_empty_index: marks.non_empty_index.clone(),
    })
}

/// Histogram, bookmarks and reorder in one call. The dense bookmark arrays
/// are returned alongside for callers that need O(1) box-to-rank lookups.
pub fn pseudo_sort<T: Located + Copy + Send + Sync>(
    points: &[T],
    level: u32,
    config: &SortConfig,
) -> Result<(SortedPointSet<T>, Bookmarks)> {
    let (bins, index) = histogram_and_sort_index(points, level, config)?;
    let marks = build_bookmarks(&bins, level)?;
    drop(bins);
    let sorted = reorder(points, &index, &marks)?;
    Ok((sorted, marks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morton::Point3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn three_points() -> Vec<Point3> {
        vec![Point3::new(0.1, 0.1, 0.1), Point3::new(0.9, 0.9, 0.9), Point3::new(0.15, 0.2, 0.05)]
    }

    fn random_points(n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Point3::new(rng.random(), rng.random(), rng.random())).collect()
    }

    #[test]
    fn histogram_small_example() {
        for cfg in [SortConfig::default(), SortConfig::deterministic()] {
            let (bins, idx) = histogram_and_sort_index(&three_points(), 1, &cfg).unwrap();
            assert_eq!(bins, vec![2, 0, 0, 0, 0, 0, 0, 1]);
            assert_eq!(idx.iter().map(|e| e.box_index).collect::<Vec<_>>(), vec![0, 7, 0]);
            let mut r0 = vec![idx[0].rank_in_box, idx[2].rank_in_box];
            r0.sort();
            assert_eq!(r0, vec![0, 1]);
            assert_eq!(idx[1].rank_in_box, 0);
        }
    }

    #[test]
    fn histogram_empty_input() {
        let (bins, idx) = histogram_and_sort_index::<Point3>(&[], 2, &SortConfig::default()).unwrap();
        assert_eq!(bins.len(), 64);
        assert!(bins.iter().all(|&b| b == 0));
        assert!(idx.is_empty());
    }

    #[test]
    fn histogram_matches_counting_oracle() {
        let pts = random_points(100_000, 5);
        let mut oracle = vec![0u32; 4096];
        for p in &pts {
            let k = MortonKey::from_point(p, 4).unwrap();
            oracle[k.index() as usize] += 1;
        }
        for cfg in [SortConfig::default(), SortConfig::deterministic()] {
            let (bins, idx) = histogram_and_sort_index(&pts, 4, &cfg).unwrap();
            assert_eq!(bins, oracle);
            assert_eq!(bins.iter().sum::<u32>(), 100_000);
            let mut seen = vec![vec![false; 0]; 4096];
            for (b, s) in seen.iter_mut().enumerate() {
                *s = vec![false; oracle[b] as usize];
            }
            for e in &idx {
                let slot = &mut seen[e.box_index as usize][e.rank_in_box as usize];
                assert!(!*slot);
                *slot = true;
            }
        }
    }

    #[test]
    fn memory_budget_is_enforced() {
        let cfg = SortConfig { mode: SortMode::Parallel, memory_budget: 1 << 20 };
        let err = histogram_and_sort_index(&three_points(), 8, &cfg).unwrap_err();
        match err {
            FmmError::Capacity { limit, .. } => assert_eq!(limit, 1 << 20),
            other => panic!("unexpected {other:?}"),
        }
        assert!(cfg.check_level(5).is_ok());
        assert!(cfg.check_level(6).is_err());
        assert!(SortConfig::default().check_level(21).is_err());
    }

    #[test]
    fn bookmark_examples() {
        let m = build_bookmarks(&[2, 0, 0, 0, 0, 0, 0, 1], 1).unwrap();
        assert_eq!(m.bookmarks, vec![0, 2, 3]);
        assert_eq!(m.non_empty_index, vec![0, 7]);
        assert_eq!(m.rank_of(7), Some(1));
        assert_eq!(m.rank_of(3), None);

        let m = build_bookmarks(&[0; 8], 1).unwrap();
        assert_eq!(m.bookmarks, vec![0]);
        assert!(m.non_empty_index.is_empty());
        assert_eq!(m.rank_of(0), None);

        assert!(build_bookmarks(&[0; 7], 1).is_err());
    }

    #[test]
    fn bookmarks_match_sequential_compaction() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bins: Vec<u32> =
            (0..4096).map(|_| if rng.random_bool(0.4) { rng.random_range(1..20) } else { 0 }).collect();
        let m = build_bookmarks(&bins, 4).unwrap();
        let mut idx = Vec::new();
        let mut marks = Vec::new();
        let mut acc = 0;
        for (b, &n) in bins.iter().enumerate() {
            if n > 0 {
                idx.push(b as u64);
                marks.push(acc);
            }
            acc += n;
        }
        marks.push(acc);
        assert_eq!(m.non_empty_index, idx);
        assert_eq!(m.bookmarks, marks);
        for (i, &b) in m.non_empty_index.iter().enumerate() {
            assert_eq!(m.bookmarks[i + 1] - m.bookmarks[i], bins[b as usize]);
            assert_eq!(m.rank_of(b), Some(i as u32));
        }
    }

    #[test]
    fn reorder_small_example() {
        let pts = three_points();
        let (sorted, _) = pseudo_sort(&pts, 1, &SortConfig::default()).unwrap();
        let mut first_two = vec![sorted.permutation[0], sorted.permutation[1]];
        first_two.sort();
        assert_eq!(first_two, vec![0, 2]);
        assert_eq!(sorted.permutation[2], 1);
        assert_eq!(sorted.points[2], pts[1]);

        let (one, _) = pseudo_sort(&pts[..1], 3, &SortConfig::default()).unwrap();
        assert_eq!(one.permutation, vec![0]);
    }

    #[test]
    fn reorder_rejects_inconsistent_input() {
        let pts = three_points();
        let (bins, mut idx) = histogram_and_sort_index(&pts, 1, &SortConfig::default()).unwrap();
        let marks = build_bookmarks(&bins, 1).unwrap();
        assert!(reorder(&pts[..2], &idx, &marks).is_err());
        idx[0].rank_in_box = idx[2].rank_in_box;
        assert!(reorder(&pts, &idx, &marks).is_err());
    }

    #[test]
    fn reorder_matches_comparison_sort() {
        let pts = random_points(100_000, 21);
        let (sorted, _) = pseudo_sort(&pts, 4, &SortConfig::default()).unwrap();
        // comparison-sort oracle keyed by Morton index, ties by coordinates
        let key = |p: &Point3| MortonKey::from_point(p, 4).unwrap().index();
        let canon = |v: &mut Vec<(u64, [u64; 3])>| v.sort_unstable();
        let mut expected: Vec<_> =
            pts.iter().map(|p| (key(p), [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()])).collect();
        let mut got: Vec<_> =
            sorted.points.iter().map(|p| (key(p), [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()])).collect();
        assert!(got.windows(2).all(|w| w[0].0 <= w[1].0));
        canon(&mut expected);
        canon(&mut got);
        assert_eq!(got, expected);
        for (pos, &orig) in sorted.permutation.iter().enumerate() {
            assert_eq!(sorted.points[pos], pts[orig as usize]);
        }
    }

    #[test]
    fn deterministic_mode_keeps_input_order_within_box() {
        let pts = random_points(20_000, 33);
        let (a, _) = pseudo_sort(&pts, 3, &SortConfig::deterministic()).unwrap();
        for i in 0..a.box_count() {
            let r = a.box_range(i);
            assert!(a.permutation[r].windows(2).all(|w| w[0] < w[1]));
        }
        for workers in [1, 3, 4] {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().unwrap();
            let (b, _) = pool.install(|| pseudo_sort(&pts, 3, &SortConfig::deterministic()).unwrap());
            assert_eq!(a, b);
        }
    }
}
