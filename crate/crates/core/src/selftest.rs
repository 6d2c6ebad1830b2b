//! Quick invariant suite run by `casp selftest`: each check recomputes a
//! property from an independent reference at small sizes.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{coc_cluster, BackboneConfig, LowBackbone, RepVggBlock};
use crate::cascade::{
    cascade_match, merge_cells, partial_softmax, priors_cover, select_priors, split_cells, ScaleMap, DEFAULT_RATIO,
};
use crate::eval::bench::{bench_matching, BenchConfig};
use crate::eval::metrics::compute_auc;
use crate::eval::ransac::{ransac_homography, RansacConfig};
use crate::eval::scene::{SceneSpec, TransformFamily};
use crate::eval::{run_eval, EvalSpec};
use crate::feature::FeatureMap;
use crate::geometry::{apply_homography, corner_error, Pt};
use crate::interaction::{run_hybrid, InteractionState, InteractionWeights};
use crate::supervision::{coarse_loss_grad, LOG_EPS};
use crate::tensor::Tensor;
use crate::weights::{normal_tensor, WeightStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub ms: f64,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<22} {}", self.name, self.detail)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub checks: Vec<CheckResult>,
}

impl SelftestReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

type Outcome = std::result::Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl fmt::Display) -> String {
    e.to_string()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn softmax64(x: &[f32]) -> Vec<f64> {
    let m = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let e: Vec<f64> = x.iter().map(|&v| (v as f64 - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn check_partial_softmax() -> Outcome {
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = r.random_range(2..60);
        let x: Vec<f32> = (0..n).map(|_| r.random_range(-8.0..8.0)).collect();
        let all: Vec<usize> = (0..n).collect();
        let p = partial_softmax(&x, &all).map_err(err)?;
        let want = softmax64(&x);
        worst = p.iter().zip(&want).fold(worst, |m, (&a, &b)| m.max((a as f64 - b).abs()));
        let support: Vec<usize> = (0..n).filter(|_| r.random_bool(0.4)).collect();
        if support.is_empty() {
            continue;
        }
        let q = partial_softmax(&x, &support).map_err(err)?;
        let sum: f64 = support.iter().map(|&j| q[j] as f64).sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(format!("support sums to {sum}"));
        }
        if (0..n).any(|j| !support.contains(&j) && q[j] != 0.0) {
            return Err("non-zero entry off the support".into());
        }
    }
    ensure(worst <= 1e-6, format!("max deviation from full softmax {worst:.2e}"))
}

fn random_map(r: &mut ChaCha8Rng, h: usize, w: usize, c: usize, stride: usize) -> std::result::Result<FeatureMap, String> {
    FeatureMap::new(normal_tensor(r, &[h, w, c], 1.0), stride).map_err(err)
}

fn check_prior_membership() -> Outcome {
    let mut r = rng(2);
    let mut emitted = 0;
    for _ in 0..200 {
        let (h, w) = (r.random_range(2..5), r.random_range(2..5));
        let c = 8;
        let a16 = random_map(&mut r, h, w, c, 16)?;
        let b16 = random_map(&mut r, h, w, c, 16)?;
        let a8 = random_map(&mut r, 2 * h, 2 * w, c, 8)?;
        let b8 = random_map(&mut r, 2 * h, 2 * w, c, 8)?;
        let m = cascade_match(&a16, &b16, &a8, &b8, 4, 0.0).map_err(err)?;
        let map = ScaleMap::new(DEFAULT_RATIO, 2 * h, 2 * w);
        if !priors_cover(&m.priors, map, map, &m.matches.pairs()) {
            return Err("match outside the prior support".into());
        }
        emitted += m.matches.len();
    }
    ensure(emitted > 0, format!("{emitted} matches over 200 runs, all inside the support"))
}

fn planar_eval(count: usize) -> std::result::Result<crate::eval::EvalReport, String> {
    let spec = EvalSpec {
        scene: SceneSpec {
            family: TransformFamily::Homography,
            width: 96,
            height: 96,
            seed: 100,
            ..SceneSpec::default()
        },
        count,
        ransac_iterations: 200,
        ..EvalSpec::default()
    };
    run_eval(&spec).map_err(err)
}

fn check_oracle_equivalence() -> Outcome {
    let rep = planar_eval(4)?;
    ensure(
        rep.prior_complete_scenes > 0 && rep.oracle_equal,
        format!("{} prior-complete scenes, equal = {}", rep.prior_complete_scenes, rep.oracle_equal),
    )
}

fn check_prior_invariance() -> Outcome {
    let transforms: [fn(f64) -> f64; 5] = [
        |x| 3.0 * x - 2.0,
        f64::exp,
        |x| x * x * x,
        f64::atan,
        |x| x + 0.1 * x * x * x,
    ];
    for seed in 0..20 {
        let s = normal_tensor(&mut rng(300 + seed), &[9, 11], 1.0);
        let base = select_priors(&s, 4).map_err(err)?;
        for (t, g) in transforms.iter().enumerate() {
            let gs = s.map(|v| g(v as f64) as f32);
            if select_priors(&gs, 4).map_err(err)? != base {
                return Err(format!("transform {t} changed the priors (seed {seed})"));
            }
        }
    }
    Ok("5 transforms x 20 seeds".into())
}

fn check_op_ratio() -> Outcome {
    let cfg = BenchConfig {
        sizes: vec![512],
        repeats: 1,
        ..BenchConfig::default()
    };
    let rep = bench_matching(&cfg).map_err(err)?;
    let e = &rep.entries[0];
    ensure(e.op_ratio < 0.2, format!("cascade/global ops at 512 = {:.4}", e.op_ratio))
}

fn check_parameter_budget() -> Outcome {
    let full = LowBackbone::random(&BackboneConfig::full(), &mut rng(0)).param_count() as f64;
    let lite = LowBackbone::random(&BackboneConfig::lite(), &mut rng(0)).param_count() as f64;
    ensure(
        (full / 2.0e6 - 1.0).abs() <= 0.1 && (lite / 0.8e6 - 1.0).abs() <= 0.1,
        format!("full {:.3} M, lite {:.3} M", full / 1e6, lite / 1e6),
    )
}

/// Coarse loss written directly from the definition.
fn reference_loss(s: &[f64], n: usize, gt: &[(usize, usize)]) -> f64 {
    let mut l = 0.0;
    for &(i, j) in gt {
        let row: f64 = (0..n).map(|b| (s[i * n + b] - s[i * n + j]).exp()).sum();
        let col: f64 = (0..n).map(|a| (s[a * n + j] - s[i * n + j]).exp()).sum();
        l -= (1.0 / (row * col) + LOG_EPS).ln();
    }
    l / gt.len() as f64
}

/// Largest gradient error relative to the largest finite-difference entry.
pub fn gradient_fd_error(n: usize, seed: u64) -> crate::Result<f64> {
    let s = normal_tensor(&mut rng(seed), &[n, n], 1.0);
    let gt: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, (i * 5 + 1) % n)).collect();
    let g = coarse_loss_grad(&s, &gt)?;
    let v: Vec<f64> = s.data().iter().map(|&x| x as f64).collect();
    let step = 1e-3;
    let (mut err, mut scale) = (0.0f64, 0.0f64);
    for k in 0..n * n {
        let (mut up, mut dn) = (v.clone(), v.clone());
        up[k] += step;
        dn[k] -= step;
        let fd = (reference_loss(&up, n, &gt) - reference_loss(&dn, n, &gt)) / (2.0 * step);
        scale = scale.max(fd.abs());
        err = err.max((g.data()[k] as f64 - fd).abs());
    }
    Ok(err / scale)
}

fn check_gradient() -> Outcome {
    let e6 = gradient_fd_error(6, 7).map_err(err)?;
    let e12 = gradient_fd_error(12, 8).map_err(err)?;
    ensure(e6.max(e12) < 1e-4, format!("max relative error {:.2e}", e6.max(e12)))
}

fn check_refinement() -> Outcome {
    let rep = planar_eval(3)?;
    let (Some(coarse), Some(fine)) = (rep.median_coarse_error_px, rep.median_subpixel_error_px) else {
        return Err("no correct matches to measure".into());
    };
    ensure(
        fine < 0.5 && coarse >= 8.0 * fine,
        format!("median error {fine:.4} px, coarse {coarse:.3} px"),
    )
}

fn check_geometry() -> Outcome {
    let h = nalgebra::Matrix3::new(1.05, 0.04, 3.0, -0.03, 0.97, -2.0, 2e-4, -1e-4, 1.0);
    let mut r = rng(9);
    let src: Vec<Pt> = (0..60).map(|_| (r.random_range(0.0..200.0), r.random_range(0.0..200.0))).collect();
    let dst: Vec<Pt> = src.iter().map(|&p| apply_homography(&h, p).unwrap()).collect();
    let cfg = RansacConfig {
        iterations: 100,
        ..RansacConfig::homography()
    };
    let fit = ransac_homography(&src, &dst, &cfg).map_err(err)?;
    let ce = corner_error(&fit.model, &h, 200.0, 200.0);
    let again = ransac_homography(&src, &dst, &cfg).map_err(err)?;
    let errors: Vec<f64> = (0..40).map(|i| i as f64 * 0.3).collect();
    let auc = compute_auc(&errors, &[5.0])[0];
    // Recall rises by 1/40 at each error; integrate the staircase-free
    // piecewise-linear curve directly.
    let mut pts = vec![(0.0, 0.0)];
    pts.extend(errors.iter().enumerate().filter(|(_, &e)| e <= 5.0).map(|(i, &e)| (e, (i + 1) as f64 / 40.0)));
    let last = pts.last().copied().unwrap();
    pts.push((5.0, last.1));
    let want: f64 = pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum::<f64>() / 5.0;
    ensure(
        ce < 1e-3 && fit == again && (auc - want).abs() < 1e-6,
        format!("corner error {ce:.2e} px, AUC deviation {:.2e}", (auc - want).abs()),
    )
}

fn check_structure() -> Outcome {
    let mut r = rng(11);
    let x = normal_tensor(&mut r, &[6, 8, 5], 1.0);
    let cells = split_cells(&x, 2).map_err(err)?;
    if merge_cells(&cells, 2, 6, 8).map_err(err)? != x {
        return Err("merge after split is not the identity".into());
    }
    let blk = RepVggBlock::random(&mut r, 3, 6, 2);
    let inp = normal_tensor(&mut r, &[8, 8, 3], 1.0);
    let fold = blk.forward(&inp).map_err(err)?.max_abs_diff(&blk.fold().forward(&inp).map_err(err)?);
    if fold > 1e-5 {
        return Err(format!("folded block deviates by {fold:.2e}"));
    }
    let pts = normal_tensor(&mut r, &[40, 6], 1.0);
    let anchors = normal_tensor(&mut r, &[5, 6], 1.0);
    let mut seen: Vec<usize> = coc_cluster(&pts, &anchors).map_err(err)?.clusters().concat();
    seen.sort_unstable();
    if seen != (0..40).collect::<Vec<_>>() {
        return Err("clusters do not partition the points".into());
    }
    let c = 16;
    let w = InteractionWeights::random(&mut r, c, 4, 2);
    let state = InteractionState {
        a16: random_map(&mut r, 4, 6, c, 16)?,
        b16: random_map(&mut r, 4, 6, c, 16)?,
        a32: random_map(&mut r, 2, 3, c, 32)?,
        b32: random_map(&mut r, 2, 3, c, 32)?,
    };
    let fwd = run_hybrid(state.clone(), &w, 2).map_err(err)?;
    let rev = run_hybrid(state.swapped(), &w, 2).map_err(err)?;
    ensure(fwd == rev.swapped(), format!("fold deviation {fold:.1e}; split/merge, partition and view swap exact"))
}

fn check_weight_container(path: Option<&Path>) -> Outcome {
    if let Some(p) = path {
        let store = WeightStore::load(p).map_err(|e| format!("{}: {e}", p.display()))?;
        return Ok(format!("{} tensors, checksum valid", store.len()));
    }
    let mut store = WeightStore::new();
    store.insert("probe", Tensor::from_fn(&[3, 4], |k| k as f32));
    let mut bytes = store.to_bytes();
    if WeightStore::from_bytes(&bytes).map_err(err)? != store {
        return Err("round trip changed the payload".into());
    }
    let n = bytes.len();
    bytes[n - 8] ^= 0x40;
    ensure(WeightStore::from_bytes(&bytes).is_err(), "corrupted payload rejected".into())
}

/// Runs every check; `weights` additionally validates a weight file.
pub fn run_selftest(weights: Option<&Path>) -> SelftestReport {
    let checks: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("partial-softmax", Box::new(check_partial_softmax)),
        ("prior-membership", Box::new(check_prior_membership)),
        ("oracle-equivalence", Box::new(check_oracle_equivalence)),
        ("prior-invariance", Box::new(check_prior_invariance)),
        ("op-ratio", Box::new(check_op_ratio)),
        ("parameter-budget", Box::new(check_parameter_budget)),
        ("gradient-fd", Box::new(check_gradient)),
        ("refinement", Box::new(check_refinement)),
        ("geometry", Box::new(check_geometry)),
        ("structure", Box::new(check_structure)),
        ("weights-checksum", Box::new(move || check_weight_container(weights))),
    ];
    let checks = checks
        .into_iter()
        .map(|(name, f)| {
            let t = Instant::now();
            let out = f();
            let ms = t.elapsed().as_secs_f64() * 1e3;
            let (passed, detail) = match out {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckResult {
                name: name.to_string(),
                passed,
                detail,
                ms,
            }
        })
        .collect();
    SelftestReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let rep = run_selftest(None);
        for c in &rep.checks {
            assert!(c.passed, "{c}");
        }
        assert_eq!(rep.checks.len(), 11);
    }

    #[test]
    fn corrupted_weight_file_fails_named_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let mut store = WeightStore::new();
        store.insert("x", Tensor::full(&[8], 0.5));
        store.save(&path).unwrap();
        assert!(check_weight_container(Some(&path)).is_ok());
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 6] ^= 1;
        std::fs::write(&path, bytes).unwrap();
        let rep = run_selftest(Some(&path));
        let failed: Vec<_> = rep.failed().map(|c| c.name.as_str()).collect();
        assert_eq!(failed, vec!["weights-checksum"]);
    }
}
