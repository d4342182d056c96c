//! Work division across threads: row-split (static or dynamic batches),
//! nnz-split and merge-split. Every strategy hands out contiguous row ranges,
//! so each output row has exactly one writer.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::CsrMatrix;

pub const DEFAULT_BATCH_SIZE: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    RowSplit,
    NnzSplit,
    MergeSplit,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::RowSplit, Strategy::NnzSplit, Strategy::MergeSplit];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::RowSplit => "row",
            Strategy::NnzSplit => "nnz",
            Strategy::MergeSplit => "merge",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "row" | "row-split" => Ok(Strategy::RowSplit),
            "nnz" | "nnz-split" => Ok(Strategy::NnzSplit),
            "merge" | "merge-split" => Ok(Strategy::MergeSplit),
            other => Err(format!("unknown strategy {other:?} (expected row, nnz or merge)")),
        }
    }
}

/// Half-open row interval `[begin, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RowRange {
    pub begin: usize,
    pub end: usize,
}

impl RowRange {
    pub fn new(begin: usize, end: usize) -> Self {
        debug_assert!(begin <= end);
        Self { begin, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.begin
    }

    pub fn is_empty(&self) -> bool {
        self.begin == self.end
    }

    pub fn rows(&self) -> std::ops::Range<usize> {
        self.begin..self.end
    }
}

impl fmt::Display for RowRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})", self.begin, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DynamicDispatch {
    pub batch_size: usize,
}

/// Per-thread assignment. `ranges` is empty when rows are claimed dynamically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkPartition {
    pub strategy: Strategy,
    pub ranges: Vec<RowRange>,
    pub dynamic: Option<DynamicDispatch>,
}

impl WorkPartition {
    /// Builds the partition for `threads` workers. `dynamic_batch` selects
    /// batch dispatch and is only meaningful for row-split.
    pub fn new(a: &CsrMatrix, strategy: Strategy, threads: usize, dynamic_batch: Option<usize>) -> Result<Self> {
        if threads == 0 {
            return Err(Error::ZeroThreads);
        }
        if let Some(batch_size) = dynamic_batch {
            if batch_size == 0 {
                return Err(Error::ZeroBatch);
            }
            if strategy == Strategy::RowSplit {
                return Ok(Self { strategy, ranges: Vec::new(), dynamic: Some(DynamicDispatch { batch_size }) });
            }
        }
        let ranges = match strategy {
            Strategy::RowSplit => split_rows_static(a.rows(), threads)?,
            Strategy::NnzSplit => split_nnz(a, threads)?,
            Strategy::MergeSplit => split_merge(a, threads)?,
        };
        Ok(Self { strategy, ranges, dynamic: None })
    }
}

/// Even row split; the first `m % threads` ranges get one extra row.
pub fn split_rows_static(m: usize, threads: usize) -> Result<Vec<RowRange>> {
    if threads == 0 {
        return Err(Error::ZeroThreads);
    }
    let base = m / threads;
    let extra = m % threads;
    let mut begin = 0;
    Ok((0..threads)
        .map(|t| {
            let len = base + usize::from(t < extra);
            let r = RowRange::new(begin, begin + len);
            begin += len;
            r
        })
        .collect())
}

/// Shared row cursor for dynamic batch dispatch.
///
/// Native kernels claim batches with `lock xadd` on the same word, so the
/// counter is laid out as a bare `u64`.
#[derive(Debug, Default)]
#[repr(transparent)]
pub struct DispatchCounter {
    next: AtomicU64,
}

impl DispatchCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(&self) -> u64 {
        self.next.load(Ordering::Acquire)
    }

    pub(crate) fn as_ptr(&self) -> *mut u64 {
        self.next.as_ptr()
    }

    /// Claims the next `batch_size` rows, or `None` once `m` is exhausted.
    pub fn next_batch(&self, batch_size: usize, m: usize) -> Option<RowRange> {
        debug_assert!(batch_size >= 1);
        let v = self.next.fetch_add(batch_size as u64, Ordering::AcqRel);
        if v < m as u64 {
            let begin = v as usize;
            Some(RowRange::new(begin, begin.saturating_add(batch_size).min(m)))
        } else {
            None
        }
    }
}

/// Splits rows so that per-thread nonzero counts stay within one maximal row
/// of each other.
///
/// The plain rule (thread `t` starts at the first row `r` with
/// `row_ptr[r] >= t * nnz / T`) is used when it meets that bound. Otherwise
/// candidate load windows `[lo, lo + R]` (with `R` the longest row) are
/// searched for `lo` between `ceil(nnz / T) - R` and `floor(nnz / T)`,
/// bisecting on which way a window misses. For a fixed window the positions
/// reachable after `k` groups form an interval of row boundaries, because no
/// gap between consecutive prefix sums exceeds the window width; this makes
/// each feasibility test `O(T log m)`.
pub fn split_nnz(a: &CsrMatrix, threads: usize) -> Result<Vec<RowRange>> {
    if threads == 0 {
        return Err(Error::ZeroThreads);
    }
    let prefix = a.row_ptr();
    let m = a.rows();
    if threads == 1 {
        return Ok(vec![RowRange::new(0, m)]);
    }
    let nnz = a.nnz();
    let widest = a.max_row_nnz();
    let fast = lower_bound_split(prefix, threads);
    if load_spread(prefix, &fast) <= widest {
        return Ok(fast);
    }
    let hi = nnz / threads;
    let lo = nnz.div_ceil(threads).saturating_sub(widest);
    let to_ranges = |b: Vec<usize>| b.windows(2).map(|w| RowRange::new(w[0], w[1])).collect();
    // Feasible windows form an interval and a miss tells which side it is
    // on, so bisect first; the linear scan backs it up.
    let (mut l, mut h) = (lo, hi);
    while l <= h {
        let mid = l + (h - l) / 2;
        match window_split(prefix, threads, mid, mid + widest) {
            Ok(bounds) => return Ok(to_ranges(bounds)),
            Err(Miss::TooHigh) if mid == 0 => break,
            Err(Miss::TooHigh) => h = mid - 1,
            Err(Miss::TooLow) => l = mid + 1,
        }
    }
    for window_lo in (lo..=hi).rev() {
        if let Ok(bounds) = window_split(prefix, threads, window_lo, window_lo + widest) {
            return Ok(to_ranges(bounds));
        }
    }
    // A window always exists; keep the lower-bound split regardless.
    Ok(fast)
}

fn load_spread(prefix: &[usize], ranges: &[RowRange]) -> usize {
    let loads = ranges.iter().map(|r| prefix[r.end] - prefix[r.begin]);
    loads.clone().max().unwrap_or(0) - loads.min().unwrap_or(0)
}

fn lower_bound_split(prefix: &[usize], threads: usize) -> Vec<RowRange> {
    let m = prefix.len() - 1;
    let nnz = prefix[m] as u128;
    let mut bounds: Vec<usize> =
        (0..threads).map(|t| prefix.partition_point(|&p| (p as u128) * (threads as u128) < t as u128 * nnz)).collect();
    bounds.push(m);
    bounds.windows(2).map(|w| RowRange::new(w[0], w[1])).collect()
}

/// Why a load window admits no split.
enum Miss {
    /// Groups of at least `lo` nonzeros cannot all fit.
    TooHigh,
    /// Groups of at most `hi` nonzeros cannot cover every row.
    TooLow,
}

/// Boundaries `0 = b_0 <= ... <= b_T = m` with every group's nonzero count in
/// `[lo, hi]`. Requires `hi - lo` to be at least the longest row.
fn window_split(prefix: &[usize], threads: usize, lo: usize, hi: usize) -> Result<Vec<usize>, Miss> {
    let m = prefix.len() - 1;
    let total = prefix[m];
    // smallest q >= p with prefix[q] >= prefix[p] + lo
    let first = |p: usize| p + prefix[p..].partition_point(|&x| x < prefix[p] + lo);
    // largest q with prefix[q] <= prefix[p] + hi
    let last = |p: usize| p + prefix[p..].partition_point(|&x| x <= prefix[p] + hi) - 1;
    // positions from which a group of at least `lo` nonzeros can still start
    let last_live = prefix.partition_point(|&x| x + lo <= total).checked_sub(1).ok_or(Miss::TooHigh)?;

    let mut reach = Vec::with_capacity(threads + 1);
    reach.push((0usize, 0usize));
    for _ in 0..threads {
        let (a, b) = *reach.last().unwrap();
        let b = b.min(last_live);
        if a > b {
            return Err(Miss::TooHigh);
        }
        reach.push((first(a), last(b)));
    }
    let (a, b) = reach[threads];
    if a > m {
        return Err(Miss::TooHigh);
    }
    if b < m {
        return Err(Miss::TooLow);
    }

    let mut bounds = vec![m];
    for k in (1..threads).rev() {
        let next = *bounds.last().unwrap();
        let (a, _) = reach[k];
        let need = prefix[next].saturating_sub(hi);
        let p = a.max(prefix.partition_point(|&x| x < need));
        debug_assert!(p <= next && prefix[p] + lo <= prefix[next]);
        bounds.push(p);
    }
    bounds.push(0);
    bounds.reverse();
    Ok(bounds)
}

/// Point where a diagonal crosses the merge path of row ends × nonzeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MergeCoordinate {
    /// Rows consumed.
    pub i: usize,
    /// Nonzeros consumed.
    pub j: usize,
}

/// Binary search along diagonal `k` of the merge grid.
///
/// `row_end_offsets[r]` is `row_ptr[r + 1]`. The walk consumes row end `i`
/// whenever `row_end_offsets[i] <= j`, otherwise it consumes a nonzero.
pub fn merge_path_search(k: usize, row_end_offsets: &[usize], nnz: usize) -> Result<MergeCoordinate> {
    let m = row_end_offsets.len();
    if k > m + nnz {
        return Err(Error::DiagonalOutOfRange { k, max: m + nnz });
    }
    let mut lo = k.saturating_sub(nnz);
    let mut hi = k.min(m);
    while lo < hi {
        let pivot = lo + (hi - lo) / 2;
        if row_end_offsets[pivot] < k - pivot {
            lo = pivot + 1;
        } else {
            hi = pivot;
        }
    }
    Ok(MergeCoordinate { i: lo, j: k - lo })
}

/// Merge-path split snapped to row boundaries: thread `t` starts at the row
/// reached on diagonal `ceil(t * (m + nnz) / T)`.
pub fn split_merge(a: &CsrMatrix, threads: usize) -> Result<Vec<RowRange>> {
    if threads == 0 {
        return Err(Error::ZeroThreads);
    }
    let m = a.rows();
    let nnz = a.nnz();
    let row_ends = &a.row_ptr()[1..];
    let total = (m + nnz) as u128;
    let mut starts = Vec::with_capacity(threads + 1);
    for t in 0..threads {
        let k = (t as u128 * total).div_ceil(threads as u128) as usize;
        starts.push(merge_path_search(k, row_ends, nnz)?.i);
    }
    starts.push(m);
    Ok(starts.windows(2).map(|w| RowRange::new(w[0], w[1])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::sync::Arc;

    fn from_row_ptr(row_ptr: Vec<usize>) -> CsrMatrix {
        let nnz = *row_ptr.last().unwrap();
        let m = row_ptr.len() - 1;
        CsrMatrix::new(m, 1, row_ptr, vec![0; nnz], vec![1.0; nnz]).unwrap()
    }

    fn rr(pairs: &[(usize, usize)]) -> Vec<RowRange> {
        pairs.iter().map(|&(b, e)| RowRange::new(b, e)).collect()
    }

    #[test]
    fn static_rows() {
        assert_eq!(split_rows_static(10, 4).unwrap(), rr(&[(0, 3), (3, 6), (6, 8), (8, 10)]));
        assert_eq!(split_rows_static(4, 4).unwrap(), rr(&[(0, 1), (1, 2), (2, 3), (3, 4)]));
        assert_eq!(split_rows_static(2, 4).unwrap(), rr(&[(0, 1), (1, 2), (2, 2), (2, 2)]));
        assert!(matches!(split_rows_static(3, 0), Err(Error::ZeroThreads)));
    }

    #[test]
    fn batches_in_sequence() {
        let c = DispatchCounter::new();
        assert_eq!(c.next_batch(128, 300), Some(RowRange::new(0, 128)));
        assert_eq!(c.next_batch(128, 300), Some(RowRange::new(128, 256)));
        assert_eq!(c.next_batch(128, 300), Some(RowRange::new(256, 300)));
        assert_eq!(c.next_batch(128, 300), None);
        assert_eq!(DispatchCounter::new().next_batch(128, 0), None);
    }

    #[test]
    fn concurrent_batches_cover_exactly() {
        let c = Arc::new(DispatchCounter::new());
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let c = Arc::clone(&c);
                std::thread::spawn(move || {
                    let mut rows = Vec::new();
                    while let Some(r) = c.next_batch(7, 1000) {
                        rows.extend(r.rows());
                        std::thread::yield_now();
                    }
                    rows
                })
            })
            .collect();
        let mut all: Vec<usize> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn nnz_split_examples() {
        let a = from_row_ptr(vec![0, 4, 5, 6, 8]);
        assert_eq!(split_nnz(&a, 2).unwrap(), rr(&[(0, 1), (1, 4)]));
        assert_eq!(split_nnz(&a, 1).unwrap(), rr(&[(0, 4)]));
        let empty = from_row_ptr(vec![0, 0, 0, 0]);
        assert_eq!(split_nnz(&empty, 2).unwrap(), rr(&[(0, 0), (0, 3)]));
        assert!(matches!(split_nnz(&a, 0), Err(Error::ZeroThreads)));
    }

    #[test]
    fn nnz_split_beats_plain_lower_bound() {
        // lower bound on row_ptr puts all four nonzeros on thread 0
        let a = from_row_ptr(vec![0, 1, 4]);
        assert_eq!(lower_bound_split(a.row_ptr(), 2), rr(&[(0, 2), (2, 2)]));
        assert_eq!(split_nnz(&a, 2).unwrap(), rr(&[(0, 1), (1, 2)]));
    }

    /// Smallest achievable spread over every row-granular split.
    fn brute_force_min_spread(prefix: &[usize], threads: usize) -> usize {
        fn rec(prefix: &[usize], start: usize, left: usize, loads: &mut Vec<usize>, best: &mut usize) {
            let m = prefix.len() - 1;
            if left == 1 {
                loads.push(prefix[m] - prefix[start]);
                let spread = loads.iter().max().unwrap() - loads.iter().min().unwrap();
                *best = (*best).min(spread);
                loads.pop();
                return;
            }
            for b in start..=m {
                loads.push(prefix[b] - prefix[start]);
                rec(prefix, b, left - 1, loads, best);
                loads.pop();
            }
        }
        let mut best = usize::MAX;
        rec(prefix, 0, threads, &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn nnz_split_matches_exhaustive_bound_on_small_cases() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..400 {
            let m = rng.random_range(0..8);
            let threads = rng.random_range(1..5);
            let mut row_ptr = vec![0];
            for _ in 0..m {
                let len = [0, 0, 1, 2, 3, 5, 8, 13][rng.random_range(0..8)];
                row_ptr.push(row_ptr.last().unwrap() + len);
            }
            let a = from_row_ptr(row_ptr.clone());
            let ranges = split_nnz(&a, threads).unwrap();
            let loads: Vec<usize> = ranges.iter().map(|r| row_ptr[r.end] - row_ptr[r.begin]).collect();
            let spread = loads.iter().max().unwrap() - loads.iter().min().unwrap();
            assert!(spread <= a.max_row_nnz(), "{row_ptr:?} T={threads} {loads:?}");
            assert!(brute_force_min_spread(&row_ptr, threads) <= spread);
        }
    }

    #[test]
    fn window_misses_point_toward_the_feasible_interval() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(29);
        for _ in 0..2000 {
            let m = rng.random_range(1..40);
            let threads = rng.random_range(2..9);
            let mut row_ptr = vec![0];
            for _ in 0..m {
                let len: usize = if rng.random_bool(0.1) { rng.random_range(0..60) } else { rng.random_range(0..4) };
                row_ptr.push(row_ptr.last().unwrap() + len);
            }
            let (nnz, widest) = (row_ptr[m], (1..=m).map(|i| row_ptr[i] - row_ptr[i - 1]).max().unwrap());
            let lo = nnz.div_ceil(threads).saturating_sub(widest);
            let outcomes: Vec<_> =
                (lo..=nnz / threads).map(|w| window_split(&row_ptr, threads, w, w + widest)).collect();
            let first_ok = outcomes.iter().position(|o| o.is_ok()).expect("some window fits");
            for (i, o) in outcomes.iter().enumerate() {
                match o {
                    Err(Miss::TooLow) => assert!(i < first_ok, "{row_ptr:?} T={threads}"),
                    Err(Miss::TooHigh) => assert!(i > first_ok, "{row_ptr:?} T={threads}"),
                    Ok(_) => assert!(outcomes[first_ok..=i].iter().all(|o| o.is_ok())),
                }
            }
        }
    }

    #[test]
    fn merge_path_examples() {
        let ends = [4, 5, 6, 8];
        assert_eq!(merge_path_search(0, &ends, 8).unwrap(), MergeCoordinate { i: 0, j: 0 });
        assert_eq!(merge_path_search(12, &ends, 8).unwrap(), MergeCoordinate { i: 4, j: 8 });
        assert_eq!(merge_path_search(6, &ends, 8).unwrap(), MergeCoordinate { i: 1, j: 5 });
        assert!(matches!(merge_path_search(13, &ends, 8), Err(Error::DiagonalOutOfRange { k: 13, max: 12 })));
    }

    /// Walks the merge path step by step and records the coordinate on every diagonal.
    fn sequential_walk(ends: &[usize], nnz: usize) -> Vec<MergeCoordinate> {
        let (mut i, mut j) = (0, 0);
        let mut out = vec![MergeCoordinate { i, j }];
        while i < ends.len() || j < nnz {
            if i < ends.len() && ends[i] <= j {
                i += 1;
            } else {
                j += 1;
            }
            out.push(MergeCoordinate { i, j });
        }
        out
    }

    #[test]
    fn merge_path_search_agrees_with_sequential_walk() {
        for ends in [vec![4, 5, 6, 8], vec![0, 0, 3], vec![2, 2, 2, 7, 7], vec![]] {
            let nnz = ends.last().copied().unwrap_or(0);
            for (k, want) in sequential_walk(&ends, nnz).into_iter().enumerate() {
                assert_eq!(merge_path_search(k, &ends, nnz).unwrap(), want, "{ends:?} k={k}");
            }
        }
    }

    #[test]
    fn merge_split_examples() {
        let a = from_row_ptr(vec![0, 4, 5, 6, 8]);
        assert_eq!(split_merge(&a, 2).unwrap(), rr(&[(0, 1), (1, 4)]));
        assert_eq!(split_merge(&a, 1).unwrap(), rr(&[(0, 4)]));
        for c in 1..4 {
            for m in [4, 8, 12] {
                let a = from_row_ptr((0..=m).map(|i| i * c).collect());
                for t in [1, 2, 4] {
                    let want = split_rows_static(m, t).unwrap();
                    assert_eq!(split_merge(&a, t).unwrap(), want, "c={c} m={m} t={t}");
                }
            }
        }
    }

    #[test]
    fn dynamic_partition_only_for_row_split() {
        let a = from_row_ptr(vec![0, 1, 2]);
        let p = WorkPartition::new(&a, Strategy::RowSplit, 3, Some(128)).unwrap();
        assert!(p.ranges.is_empty());
        assert_eq!(p.dynamic, Some(DynamicDispatch { batch_size: 128 }));
        let p = WorkPartition::new(&a, Strategy::NnzSplit, 3, Some(128)).unwrap();
        assert_eq!(p.ranges.len(), 3);
        assert!(p.dynamic.is_none());
        assert!(matches!(WorkPartition::new(&a, Strategy::RowSplit, 1, Some(0)), Err(Error::ZeroBatch)));
        let rows: HashSet<usize> = p.ranges.iter().flat_map(|r| r.rows()).collect();
        assert_eq!(rows.len(), 2);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("bogus".parse::<Strategy>().is_err());
    }
}
