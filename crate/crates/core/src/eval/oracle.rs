//! Global-search reference matcher: dual softmax over the full 1/8 score
//! matrix, mutual nearest neighbours and a confidence threshold.

use rayon::prelude::*;

use crate::cascade::{score_matrix, score_matrix_ops, CoarseMatch, MatchSet};
use crate::error::Result;
use crate::feature::FeatureMap;
use crate::ops::OpCount;

#[derive(Clone, Debug)]
pub struct GlobalMatch {
    pub matches: MatchSet,
    pub ops: OpCount,
}

/// Rows per parallel work item.
const CHUNK: usize = 64;

/// Best `(index, value)` with the higher value winning and the lower index
/// breaking ties.
fn better(x: Option<(usize, f32)>, y: Option<(usize, f32)>) -> Option<(usize, f32)> {
    match (x, y) {
        (Some(a), Some(b)) => Some(if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) { b } else { a }),
        (a, None) => a,
        (None, b) => b,
    }
}

/// Matches over the complete score matrix. Only `S` is materialised; the
/// confidence `P = exp(2S − lse_row − lse_col)` is recomputed entrywise.
pub fn global_oracle_match(a8: &FeatureMap, b8: &FeatureMap, theta: f32) -> Result<GlobalMatch> {
    let (ta, tb) = (a8.tokens(), b8.tokens());
    let s = score_matrix(&ta, &tb)?;
    let (n_a, n_b) = s.dims2()?;
    let data = s.data();
    let rows = |i: usize| &data[i * n_b..(i + 1) * n_b];

    let row_lse: Vec<f32> = (0..n_a)
        .into_par_iter()
        .map(|i| {
            let r = rows(i);
            let m = r.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            m + r.iter().map(|&v| (v - m).exp()).sum::<f32>().ln()
        })
        .collect();
    let col_max = data
        .par_chunks(n_b * CHUNK)
        .map(|block| {
            let mut m = vec![f32::NEG_INFINITY; n_b];
            for r in block.chunks(n_b) {
                m.iter_mut().zip(r).for_each(|(m, &v)| *m = m.max(v));
            }
            m
        })
        .reduce(
            || vec![f32::NEG_INFINITY; n_b],
            |mut x, y| {
                x.iter_mut().zip(&y).for_each(|(a, &b)| *a = a.max(b));
                x
            },
        );
    // Per-chunk partial sums are added in chunk order so the result does not
    // depend on scheduling.
    let partial: Vec<Vec<f32>> = data
        .par_chunks(n_b * CHUNK)
        .map(|block| {
            let mut acc = vec![0.0f32; n_b];
            for r in block.chunks(n_b) {
                for ((a, &v), &m) in acc.iter_mut().zip(r).zip(&col_max) {
                    *a += (v - m).exp();
                }
            }
            acc
        })
        .collect();
    let mut col_sum = vec![0.0f32; n_b];
    for p in &partial {
        col_sum.iter_mut().zip(p).for_each(|(a, &b)| *a += b);
    }
    let col_lse: Vec<f32> = col_max.iter().zip(&col_sum).map(|(m, s)| m + s.ln()).collect();

    type Best = Vec<Option<(usize, f32)>>;
    let (row_best, col_best): (Best, Best) = data
        .par_chunks(n_b * CHUNK)
        .enumerate()
        .map(|(ci, block)| {
            let mut rb = Vec::with_capacity(CHUNK);
            let mut cb: Best = vec![None; n_b];
            for (ri, r) in block.chunks(n_b).enumerate() {
                let i = ci * CHUNK + ri;
                let mut best: Option<(usize, f32)> = None;
                for (j, &v) in r.iter().enumerate() {
                    let p = (2.0 * v - row_lse[i] - col_lse[j]).exp();
                    best = better(best, Some((j, p)));
                    cb[j] = better(cb[j], Some((i, p)));
                }
                rb.push(best);
            }
            (rb, cb)
        })
        .reduce(
            || (Vec::new(), vec![None; n_b]),
            |(mut ra, ca), (rb, cb)| {
                ra.extend(rb);
                (ra, ca.into_iter().zip(cb).map(|(x, y)| better(x, y)).collect())
            },
        );

    let mut matches = Vec::new();
    for (i, rb) in row_best.iter().enumerate() {
        if let Some((j, p)) = *rb {
            if col_best[j].map(|c| c.0) == Some(i) && p >= theta {
                matches.push(CoarseMatch { a: i, b: j, confidence: p });
            }
        }
    }
    let nm = (n_a * n_b) as u64;
    let ops = score_matrix_ops(n_a, n_b, a8.channels())
        + OpCount {
            macs: 0,
            exps: 3 * nm,
            // Row and column maxima, row and column argmax, then the mutual
            // check and threshold per row.
            compares: 4 * nm + 2 * n_a as u64,
        };
    Ok(GlobalMatch {
        matches: MatchSet {
            stride: a8.stride,
            grid_a: (a8.height(), a8.width()),
            grid_b: (b8.height(), b8.width()),
            matches,
        },
        ops,
    })
}
