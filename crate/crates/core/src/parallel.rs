//! Deterministic parallel reductions over dataset rows.
//!
//! Rows are split into fixed-size chunks independent of the thread count; each
//! chunk is reduced sequentially and the chunk results are merged in chunk
//! order, so results are bit-identical for any rayon pool size.

use rayon::prelude::*;

use crate::error::Result;

pub(crate) const CHUNK_ROWS: usize = 256;

pub(crate) fn fold_rows<A, I, B, M>(rows: usize, init: I, body: B, mut merge: M) -> Result<A>
where
    A: Send,
    I: Fn() -> A + Sync,
    B: Fn(&mut A, usize) -> Result<()> + Sync,
    M: FnMut(&mut A, A),
{
    let chunks = rows.div_ceil(CHUNK_ROWS);
    let partials: Vec<A> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = init();
            let end = ((c + 1) * CHUNK_ROWS).min(rows);
            for i in c * CHUNK_ROWS..end {
                body(&mut acc, i)?;
            }
            Ok(acc)
        })
        .collect::<Result<Vec<A>>>()?;
    let mut total = init();
    for part in partials {
        merge(&mut total, part);
    }
    Ok(total)
}

/// Maps every row in parallel, preserving row order.
pub(crate) fn map_rows<R, F>(rows: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize) -> Result<R> + Sync + Send,
{
    (0..rows).into_par_iter().map(f).collect()
}
