//! Matching-stage benchmark: global dual-softmax search at 1/8 against the
//! cascaded 1/16 → 1/8 matcher on random descriptors.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::oracle::global_oracle_match;
use crate::cascade::{cascade_match, DEFAULT_K, DEFAULT_RATIO, DEFAULT_THETA};
use crate::error::{arg_err, Result};
use crate::feature::FeatureMap;
use crate::ops::OpCount;
use crate::weights::normal_tensor;

pub const DEFAULT_SIZES: [usize; 4] = [256, 512, 832, 1152];
/// Descriptor widths at 1/16 and 1/8.
pub const BENCH_CHANNELS_16: usize = 256;
pub const BENCH_CHANNELS_8: usize = 192;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Square image sides in pixels (multiples of 16).
    pub sizes: Vec<usize>,
    pub k: usize,
    pub theta: f32,
    pub repeats: usize,
    /// Worker threads for the kernels; 1 keeps timings interpretable.
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: DEFAULT_SIZES.to_vec(),
            k: DEFAULT_K,
            theta: DEFAULT_THETA,
            repeats: 3,
            threads: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub size: usize,
    pub tokens8: usize,
    pub tokens16: usize,
    /// Median wall-clock time over the repeats, milliseconds.
    pub global_ms: f64,
    pub cascade_ms: f64,
    pub global_ops: OpCount,
    pub cascade_ops: OpCount,
    /// `cascade_ops.total() / global_ops.total()`.
    pub op_ratio: f64,
    /// `global_ms / cascade_ms`.
    pub speedup: f64,
    /// Bytes of the largest score/confidence buffers each matcher holds.
    pub global_bytes: u64,
    pub cascade_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub entries: Vec<BenchEntry>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "size,tokens8,tokens16,global_ms,cascade_ms,speedup,global_ops,cascade_ops,op_ratio,global_bytes,cascade_bytes\n",
        );
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{},{},{},{:.3},{:.3},{:.3},{},{},{:.6},{},{}",
                e.size,
                e.tokens8,
                e.tokens16,
                e.global_ms,
                e.cascade_ms,
                e.speedup,
                e.global_ops.total(),
                e.cascade_ops.total(),
                e.op_ratio,
                e.global_bytes,
                e.cascade_bytes
            );
        }
        s
    }

    /// Whitespace-separated columns for plotting time against resolution.
    pub fn to_gnuplot(&self) -> String {
        let mut s = String::from("# size global_ms cascade_ms op_ratio\n");
        for e in &self.entries {
            let _ = writeln!(s, "{} {:.3} {:.3} {:.6}", e.size, e.global_ms, e.cascade_ms, e.op_ratio);
        }
        s
    }
}

fn median_ms(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn bench_size(size: usize, cfg: &BenchConfig) -> Result<BenchEntry> {
    if size % 16 != 0 || size < 16 * 4 {
        return Err(arg_err!("benchmark size {size} must be a multiple of 16 and at least 64"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ size as u64);
    let (g8, g16) = (size / 8, size / 16);
    let mk = |rng: &mut ChaCha8Rng, g: usize, c: usize, stride: usize| {
        FeatureMap::new(normal_tensor(rng, &[g, g, c], 1.0), stride)
    };
    let a8 = mk(&mut rng, g8, BENCH_CHANNELS_8, 8)?;
    let b8 = mk(&mut rng, g8, BENCH_CHANNELS_8, 8)?;
    let a16 = mk(&mut rng, g16, BENCH_CHANNELS_16, 16)?;
    let b16 = mk(&mut rng, g16, BENCH_CHANNELS_16, 16)?;

    let (mut gt, mut ct) = (Vec::new(), Vec::new());
    let (mut g_ops, mut c_ops) = (OpCount::default(), OpCount::default());
    for _ in 0..cfg.repeats.max(1) {
        let t = Instant::now();
        let c = cascade_match(&a16, &b16, &a8, &b8, cfg.k, cfg.theta)?;
        ct.push(t.elapsed().as_secs_f64() * 1e3);
        c_ops = c.ops;
        drop(c);
        let t = Instant::now();
        let g = global_oracle_match(&a8, &b8, cfg.theta)?;
        gt.push(t.elapsed().as_secs_f64() * 1e3);
        g_ops = g.ops;
    }
    let (n8, n16) = ((g8 * g8) as u64, (g16 * g16) as u64);
    let support = (cfg.k * DEFAULT_RATIO * DEFAULT_RATIO) as u64;
    let (global_ms, cascade_ms) = (median_ms(gt), median_ms(ct));
    Ok(BenchEntry {
        size,
        tokens8: n8 as usize,
        tokens16: n16 as usize,
        global_ms,
        cascade_ms,
        global_ops: g_ops,
        cascade_ops: c_ops,
        op_ratio: c_ops.total() as f64 / g_ops.total() as f64,
        speedup: global_ms / cascade_ms.max(1e-9),
        global_bytes: 4 * n8 * n8,
        cascade_bytes: 4 * (n16 * n16 + 2 * n8 * support),
    })
}

/// Runs every size inside a pool of `cfg.threads` workers.
pub fn bench_matching(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.sizes.is_empty() {
        return Err(arg_err!("no benchmark sizes"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.max(1))
        .build()
        .map_err(|e| arg_err!("thread pool: {e}"))?;
    let entries = pool.install(|| cfg.sizes.iter().map(|&s| bench_size(s, cfg)).collect::<Result<Vec<_>>>())?;
    Ok(BenchReport {
        config: cfg.clone(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_counts_follow_the_complexity_model() {
        let cfg = BenchConfig {
            sizes: vec![128, 256],
            repeats: 1,
            ..BenchConfig::default()
        };
        let r = bench_matching(&cfg).unwrap();
        for e in &r.entries {
            let (n8, n16) = (e.tokens8 as u64, e.tokens16 as u64);
            assert_eq!(e.global_ops.macs, n8 * n8 * BENCH_CHANNELS_8 as u64);
            // 1/16 scores, plus every support score evaluated once per
            // direction.
            let support = 32;
            assert_eq!(e.cascade_ops.macs, n16 * n16 * BENCH_CHANNELS_16 as u64 + 2 * n8 * support * BENCH_CHANNELS_8 as u64);
            assert_eq!(e.cascade_ops.exps, 2 * n8 * support);
        }
        assert!(r.entries[1].op_ratio < r.entries[0].op_ratio);
        assert_eq!(r.to_csv().lines().count(), 3);
        assert_eq!(r.to_gnuplot().lines().count(), 3);
    }
}
