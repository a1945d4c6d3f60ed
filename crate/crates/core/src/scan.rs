//! Blocked prefix sums and flag compaction.
//!
//! Each chunk is folded independently, the (few) chunk totals are scanned
//! serially, then every chunk is offset in parallel. The chunk size is a
//! constant, so the output never depends on the worker count.

use rayon::prelude::*;

use crate::error::{domain, FmmError, Result};

const CHUNK: usize = 1 << 14;

fn overflow(len: usize) -> FmmError {
    FmmError::Capacity { what: format!("prefix sum over {len} counts"), limit: u32::MAX as u64 }
}

/// Exclusive prefix sum. Returns the scanned array and the inclusive total.
pub fn exclusive_scan(values: &[u32]) -> Result<(Vec<u32>, u32)> {
    if values.is_empty() {
        return domain("cannot scan an empty count array");
    }
    let chunk_totals: Vec<Option<u32>> =
        values.par_chunks(CHUNK).map(|c| c.iter().try_fold(0u32, |acc, &v| acc.checked_add(v))).collect();

    let mut offsets = Vec::with_capacity(chunk_totals.len());
    let mut running = 0u32;
    for t in chunk_totals {
        let t = t.ok_or_else(|| overflow(values.len()))?;
        offsets.push(running);
        running = running.checked_add(t).ok_or_else(|| overflow(values.len()))?;
    }

    let mut out = vec![0u32; values.len()];
    out.par_chunks_mut(CHUNK).zip(values.par_chunks(CHUNK)).zip(offsets.par_iter()).for_each(|((dst, src), &base)| {
        let mut acc = base;
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = acc;
            acc += v;
        }
    });
    Ok((out, running))
}

/// Compacted positions of the set flags in a 0/1 array.
///
/// `ranks[i]` is the number of ones before `i`, so for every flagged `i` it
/// is that element's slot in the compacted output.
pub fn compact_flags(flags: &[u32]) -> Result<(Vec<u32>, u32)> {
    if let Some(bad) = flags.par_iter().find_any(|&&f| f > 1) {
        return domain(format!("flag array holds non-binary value {bad}"));
    }
    exclusive_scan(flags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sequential(values: &[u32]) -> (Vec<u32>, u32) {
        let mut acc = 0u32;
        let out = values
            .iter()
            .map(|&v| {
                let here = acc;
                acc += v;
                here
            })
            .collect();
        (out, acc)
    }

    #[test]
    fn scan_examples() {
        assert_eq!(exclusive_scan(&[1, 2, 3, 4]).unwrap(), (vec![0, 1, 3, 6], 10));
        assert_eq!(exclusive_scan(&[0, 0, 0]).unwrap(), (vec![0, 0, 0], 0));
        assert!(exclusive_scan(&[]).is_err());
    }

    #[test]
    fn scan_matches_sequential_fold() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let values: Vec<u32> = (0..100_000).map(|_| rng.random_range(0..1000)).collect();
        assert_eq!(exclusive_scan(&values).unwrap(), sequential(&values));
    }

    #[test]
    fn scan_overflow_is_capacity_error() {
        let err = exclusive_scan(&[u32::MAX, 1]).unwrap_err();
        assert!(matches!(err, FmmError::Capacity { .. }));
        let mut big = vec![0u32; 3 * CHUNK];
        big[0] = u32::MAX;
        big[2 * CHUNK] = 1;
        assert!(matches!(exclusive_scan(&big), Err(FmmError::Capacity { .. })));
    }

    #[test]
    fn compact_examples() {
        assert_eq!(compact_flags(&[1, 0, 1, 1]).unwrap(), (vec![0, 1, 1, 2], 3));
        assert_eq!(compact_flags(&[0, 0, 0, 0]).unwrap().1, 0);
        assert!(matches!(compact_flags(&[0, 2]), Err(FmmError::Domain(_))));
    }

    #[test]
    fn compact_random_flags() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let flags: Vec<u32> = (0..8usize.pow(5)).map(|_| rng.random_range(0..2)).collect();
        let (ranks, count) = compact_flags(&flags).unwrap();
        let flagged: Vec<u32> = flags.iter().zip(&ranks).filter(|(&f, _)| f == 1).map(|(_, &r)| r).collect();
        assert_eq!(flagged.len(), count as usize);
        assert_eq!(flagged, (0..count).collect::<Vec<_>>());
    }

    #[test]
    fn identical_across_worker_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values: Vec<u32> = (0..200_000).map(|_| rng.random_range(0..50)).collect();
        let reference = exclusive_scan(&values).unwrap();
        for workers in [1, 2, 3, 8] {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().unwrap();
            assert_eq!(pool.install(|| exclusive_scan(&values).unwrap()), reference);
        }
    }

    proptest! {
        #[test]
        fn scan_is_monotone(values in proptest::collection::vec(0u32..10_000, 1..5000)) {
            let (out, total) = exclusive_scan(&values).unwrap();
            prop_assert!(out.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(total as u64, values.iter().map(|&v| v as u64).sum::<u64>());
        }
    }
}
