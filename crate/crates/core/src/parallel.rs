//! Deterministic parallelism helpers.
//!
//! All parallel work in the engine is expressed as a map over fixed index
//! ranges whose partial results are combined in range order. Outputs are
//! therefore bit-identical for any worker count, including 1. The global
//! worker count is capped by the `MVSR_THREADS` environment variable.

use rayon::prelude::*;
use std::ops::Range;
use std::sync::Once;

static INIT: Once = Once::new();

/// Install the global thread pool honoring `MVSR_THREADS`. Safe to call
/// more than once; only the first call takes effect.
pub fn init_thread_pool() {
    INIT.call_once(|| {
        if let Ok(v) = std::env::var("MVSR_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    // ignore failure: a pool may already exist (e.g. in tests)
                    let _ = rayon::ThreadPoolBuilder::new()
                        .num_threads(n)
                        .build_global();
                }
            }
        }
    });
}

/// Split `0..n` into fixed-size chunks. The chunk size depends only on `n`,
/// never on the worker count, so reduction order is stable.
pub fn fixed_chunks(n: usize, chunk: usize) -> Vec<Range<usize>> {
    assert!(chunk > 0);
    let mut out = Vec::with_capacity(n.div_ceil(chunk));
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        out.push(start..end);
        start = end;
    }
    out
}

/// Parallel map over fixed chunks of `0..n`; results are returned in chunk
/// order.
pub fn par_chunk_map<T: Send, F>(n: usize, chunk: usize, f: F) -> Vec<T>
where
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    init_thread_pool();
    fixed_chunks(n, chunk).into_par_iter().map(f).collect()
}

/// Fill a row-major output buffer in parallel: `rows` rows of `row_len`
/// values, each chunk of rows written by one task into its own slice.
pub fn par_fill_rows<F>(out: &mut [f64], rows: usize, row_len: usize, chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    assert_eq!(out.len(), rows * row_len);
    if rows == 0 {
        return;
    }
    init_thread_pool();
    let ranges = fixed_chunks(rows, chunk);
    // split the buffer into per-chunk slices so tasks write disjoint memory
    let mut slices: Vec<&mut [f64]> = Vec::with_capacity(ranges.len());
    let mut rest = out;
    for r in &ranges {
        let (head, tail) = rest.split_at_mut((r.end - r.start) * row_len);
        slices.push(head);
        rest = tail;
    }
    ranges
        .into_par_iter()
        .zip(slices.into_par_iter())
        .for_each(|(range, slice)| {
            for (i, row) in range.clone().zip(slice.chunks_mut(row_len)) {
                f(i, row);
            }
        });
}
