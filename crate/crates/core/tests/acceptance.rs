//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//! Every quantity is checked against a reference computed here.

use std::collections::BTreeSet;
use std::time::Instant;

use casp_core::backbone::{coc_cluster, BackboneConfig, LowBackbone, RepVggBlock};
use casp_core::cascade::{
    cascade_match, merge_cells, partial_softmax, score_matrix, select_priors, split_cells, LazyScores, PriorSet,
    ScaleMap, SparseConfidence,
};
use casp_core::eval::bench::{bench_matching, BenchConfig, BENCH_CHANNELS_16, BENCH_CHANNELS_8};
use casp_core::eval::metrics::compute_auc;
use casp_core::eval::oracle::global_oracle_match;
use casp_core::eval::ransac::{ransac_essential, ransac_homography, RansacConfig};
use casp_core::eval::scene::{generate_scene, SceneSpec, TransformFamily};
use casp_core::feature::{token_pixel, FeatureMap};
use casp_core::geometry::{apply_homography, Intrinsics, Pt};
use casp_core::interaction::{run_hybrid, InteractionState, InteractionWeights};
use casp_core::refine::refine_matches;
use casp_core::supervision::{coarse_loss_grad, LOG_EPS};
use casp_core::weights::normal_tensor;
use casp_core::Tensor;
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn map(r: &mut ChaCha8Rng, h: usize, w: usize, c: usize, stride: usize) -> FeatureMap {
    FeatureMap::new(normal_tensor(r, &[h, w, c], 1.0), stride).unwrap()
}

fn scores64(a: &FeatureMap, b: &FeatureMap) -> (Vec<f64>, usize, usize) {
    let (ta, tb) = (a.tokens(), b.tokens());
    let (n, m, c) = (ta.shape()[0], tb.shape()[0], ta.shape()[1]);
    let scale = (c as f64).sqrt();
    let mut s = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            s[i * m + j] = ta.row(i).iter().zip(tb.row(j)).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>() / scale;
        }
    }
    (s, n, m)
}

fn dual_softmax64(s: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut p = vec![0.0; n * m];
    for i in 0..n {
        let mx = (0..m).map(|j| s[i * m + j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..m).map(|j| (s[i * m + j] - mx).exp()).sum();
        for j in 0..m {
            p[i * m + j] = (s[i * m + j] - mx).exp() / z;
        }
    }
    for j in 0..m {
        let mx = (0..n).map(|i| s[i * m + j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n).map(|i| (s[i * m + j] - mx).exp()).sum();
        for i in 0..n {
            p[i * m + j] *= (s[i * m + j] - mx).exp() / z;
        }
    }
    p
}

/// 1/16 parent of a 1/8 token on a grid `w` tokens wide, with 2×2 cells.
fn parent(i: usize, w: usize) -> usize {
    (i / w / 2) * w.div_ceil(2) + (i % w) / 2
}

fn partial_softmax_correctness() -> Outcome {
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let c = 32;
        let (a16, b16) = (map(&mut r, 3, 4, c, 16), map(&mut r, 3, 4, c, 16));
        let (a8, b8) = (map(&mut r, 6, 8, c, 8), map(&mut r, 6, 8, c, 8));
        let s16 = score_matrix(&a16.tokens(), &b16.tokens()).unwrap();
        let priors = select_priors(&s16, 12).unwrap();
        let maps = ScaleMap::new(2, 6, 8);
        let (ta, tb) = (a8.tokens(), b8.tokens());
        let sparse = SparseConfidence::compute(&LazyScores::new(&ta, &tb).unwrap(), &priors, maps, maps).unwrap();
        let dense = sparse.to_dense(&priors);
        let (s, n, m) = scores64(&a8, &b8);
        let want = dual_softmax64(&s, n, m);
        worst = dense.data().iter().zip(&want).fold(worst, |w, (&x, &y)| w.max((x as f64 - y).abs()));
    }
    for _ in 0..200 {
        let n = r.random_range(4..80);
        let x: Vec<f32> = (0..n).map(|_| r.random_range(-10.0..10.0)).collect();
        let support: Vec<usize> = (0..n).filter(|_| r.random_bool(0.3)).collect();
        if support.is_empty() {
            continue;
        }
        let p = partial_softmax(&x, &support).unwrap();
        let sum: f64 = support.iter().map(|&j| p[j] as f64).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(format!("support sums to {sum}"));
        }
        if let Some(j) = (0..n).find(|j| !support.contains(j) && p[*j] != 0.0) {
            return Err(format!("entry {j} off the support is {}", p[j]));
        }
    }
    verdict(worst <= 1e-6, format!("complete priors: max |partial - full| = {worst:.2e}; supports sum to 1, off-support exactly 0"))
}

fn in_priors(priors: &PriorSet, pa: usize, pb: usize) -> bool {
    priors.a.row(pa).contains(&pb) && priors.b.row(pb).contains(&pa)
}

fn prior_membership() -> Outcome {
    let mut r = rng(2);
    let (mut emitted, mut violations) = (0usize, 0usize);
    for _ in 0..10_000 {
        let (h, w) = (r.random_range(2..5), r.random_range(2..5));
        let (hb, wb) = (r.random_range(2..5), r.random_range(2..5));
        let c = 4;
        let (a16, b16) = (map(&mut r, h, w, c, 16), map(&mut r, hb, wb, c, 16));
        let (a8, b8) = (map(&mut r, 2 * h, 2 * w, c, 8), map(&mut r, 2 * hb, 2 * wb, c, 8));
        let k = r.random_range(4..=(h * w).min(hb * wb).max(4));
        let theta = r.random_range(0.0..0.3);
        let Ok(m) = cascade_match(&a16, &b16, &a8, &b8, k, theta) else {
            continue;
        };
        for cm in &m.matches.matches {
            emitted += 1;
            if !in_priors(&m.priors, parent(cm.a, 2 * w), parent(cm.b, 2 * wb)) {
                violations += 1;
            }
        }
    }
    verdict(violations == 0 && emitted > 0, format!("10000 runs, {emitted} matches, {violations} outside the priors"))
}

fn oracle_equivalence() -> Outcome {
    let (mut complete, mut mismatched, mut tried) = (0usize, Vec::new(), 0usize);
    let families = TransformFamily::ALL;
    for seed in 0..400u64 {
        if complete >= 100 {
            break;
        }
        tried += 1;
        let spec = SceneSpec {
            family: families[seed as usize % families.len()],
            seed: 5000 + seed,
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec).map_err(|e| e.to_string())?;
        let c = cascade_match(&scene.a16, &scene.b16, &scene.a8, &scene.b8, 8, 0.2).map_err(|e| e.to_string())?;
        let wa = scene.a8.width();
        let wb = scene.b8.width();
        let covered = scene
            .inlier_pairs()
            .iter()
            .all(|&(a, b)| in_priors(&c.priors, parent(a, wa), parent(b, wb)));
        if !covered {
            continue;
        }
        complete += 1;
        let g = global_oracle_match(&scene.a8, &scene.b8, 0.2).map_err(|e| e.to_string())?;
        let cs: BTreeSet<_> = c.matches.pairs().into_iter().collect();
        let gs: BTreeSet<_> = g.matches.pairs().into_iter().collect();
        if cs != gs {
            mismatched.push(seed);
        }
    }
    verdict(
        complete >= 100 && mismatched.is_empty(),
        format!("{complete} prior-complete of {tried} scenes, {} mismatched {mismatched:?}", mismatched.len()),
    )
}

fn prior_invariance() -> Outcome {
    let transforms: [(&str, fn(f64) -> f64); 5] = [
        ("affine", |x| 2.5 * x + 1.0),
        ("exp", f64::exp),
        ("cube", |x| x * x * x),
        ("atan", f64::atan),
        ("sinh", f64::sinh),
    ];
    for seed in 0..100 {
        let mut r = rng(400 + seed);
        let (n, m) = (r.random_range(6..20), r.random_range(6..20));
        let s = normal_tensor(&mut r, &[n, m], 1.5);
        let base = select_priors(&s, 4).unwrap();
        for (name, g) in transforms {
            if select_priors(&s.map(|v| g(v as f64) as f32), 4).unwrap() != base {
                return Err(format!("{name} changed the priors at seed {seed}"));
            }
        }
    }
    Ok("5 transforms x 100 seeds, priors identical".into())
}

fn efficiency() -> Outcome {
    let cfg = BenchConfig {
        sizes: vec![1152],
        repeats: 1,
        threads: 1,
        ..BenchConfig::default()
    };
    let rep = bench_matching(&cfg).map_err(|e| e.to_string())?;
    let e = &rep.entries[0];
    let (n8, n16, k, r2) = (144u64 * 144, 72u64 * 72, 8u64, 4u64);
    let (c8, c16) = (BENCH_CHANNELS_8 as u64, BENCH_CHANNELS_16 as u64);
    if e.global_ops.macs != n8 * n8 * c8 || e.cascade_ops.macs != n16 * n16 * c16 + 2 * n8 * k * r2 * c8 {
        return Err(format!("MAC counters disagree with the model: {:?} / {:?}", e.global_ops, e.cascade_ops));
    }
    verdict(
        e.op_ratio < 0.2 && e.speedup >= 2.0,
        format!(
            "ops ratio {:.4} (< 0.2), single-thread {:.0} ms vs {:.0} ms = {:.2}x (>= 2)",
            e.op_ratio, e.cascade_ms, e.global_ms, e.speedup
        ),
    )
}

fn block_params(cin: usize, cout: usize, identity: bool) -> usize {
    cout * cin * 9 + 2 * cout + cout * cin + 2 * cout + if identity { 2 * cout } else { 0 }
}

fn expected_params(cfg: &BackboneConfig) -> usize {
    let mut cin = 1;
    let mut total = 0;
    for s in 0..3 {
        let cout = cfg.low_channels[s];
        total += block_params(cin, cout, false);
        total += (cfg.low_blocks[s] - 1) * block_params(cout, cout, true);
        cin = cout;
    }
    total
}

fn parameter_budget() -> Outcome {
    let mut out = Vec::new();
    let mut ok = true;
    for (cfg, target) in [(BackboneConfig::full(), 2.0e6), (BackboneConfig::lite(), 0.8e6)] {
        let built = LowBackbone::random(&cfg, &mut rng(0)).param_count();
        let want = expected_params(&cfg);
        ok &= built == want && (built as f64 / target - 1.0).abs() <= 0.1;
        out.push(format!("{:?} {:.3} M (analytic {:.3} M)", cfg.variant, built as f64 / 1e6, want as f64 / 1e6));
    }
    verdict(ok, out.join(", "))
}

fn loss64(s: &[f64], n: usize, gt: &[(usize, usize)]) -> f64 {
    let p = dual_softmax64(s, n, n);
    -gt.iter().map(|&(i, j)| (p[i * n + j] + LOG_EPS).ln()).sum::<f64>() / gt.len() as f64
}

fn gradient_check() -> Outcome {
    let mut worst = 0.0f64;
    for (n, seed) in [(6usize, 1u64), (6, 2), (12, 3), (12, 4)] {
        let mut r = rng(600 + seed);
        let s = normal_tensor(&mut r, &[n, n], 1.0);
        let mut gt = vec![(0, r.random_range(0..n))];
        for i in 1..n {
            if r.random_bool(0.7) {
                gt.push((i, r.random_range(0..n)));
            }
        }
        let g = coarse_loss_grad(&s, &gt).unwrap();
        let v: Vec<f64> = s.data().iter().map(|&x| x as f64).collect();
        let h = 1e-4;
        let (mut err, mut scale) = (0.0f64, 0.0f64);
        for k in 0..n * n {
            let (mut up, mut dn) = (v.clone(), v.clone());
            up[k] += h;
            dn[k] -= h;
            let fd = (loss64(&up, n, &gt) - loss64(&dn, n, &gt)) / (2.0 * h);
            scale = scale.max(fd.abs());
            err = err.max((g.data()[k] as f64 - fd).abs());
        }
        worst = worst.max(err / scale);
    }
    verdict(worst < 1e-4, format!("max relative error {worst:.2e} on 6x6 and 12x12"))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn dist(p: Pt, q: Pt) -> f64 {
    ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()
}

/// Half-extent in pixels of a refinement window plus its interpolation
/// apron.
const BORDER: f64 = 8.0;

fn refinement_accuracy() -> Outcome {
    let (mut fine, mut coarse) = (Vec::new(), Vec::new());
    for seed in 0..12 {
        let spec = SceneSpec {
            family: TransformFamily::Homography,
            seed: 700 + seed,
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec).map_err(|e| e.to_string())?;
        let m = cascade_match(&scene.a16, &scene.b16, &scene.a8, &scene.b8, 8, 0.2).map_err(|e| e.to_string())?;
        let refined = refine_matches(&scene.a2, &scene.b2, &m.matches, 5).map_err(|e| e.to_string())?;
        let gb = scene.b8.width();
        for r in &refined {
            let Some(t) = scene.truth.warp(r.pixel_a) else { continue };
            let cb = token_pixel(r.b, gb, 8);
            let cerr = dist((cb.0 as f64, cb.1 as f64), t);
            // Only matches whose B token contains the truth.
            if cerr > 4.0 * std::f64::consts::SQRT_2 {
                continue;
            }
            coarse.push(cerr);
            fine.push(dist(r.subpixel_b, t));
        }
    }
    if fine.is_empty() {
        return Err("no correct matches".into());
    }
    let (mf, mc) = (median(fine.clone()), median(coarse));

    let mut off = 0.0f64;
    let mut used = 0;
    for seed in 0..4 {
        let spec = SceneSpec {
            family: TransformFamily::Translation,
            seed: 800 + seed,
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec).map_err(|e| e.to_string())?;
        let m = cascade_match(&scene.a16, &scene.b16, &scene.a8, &scene.b8, 8, 0.2).map_err(|e| e.to_string())?;
        let (wd, ht) = (spec.width as f64, spec.height as f64);
        // Windows reaching past an image border have no descriptors there.
        let interior = |p: Pt| p.0 >= BORDER && p.1 >= BORDER && p.0 <= wd - 1.0 - BORDER && p.1 <= ht - 1.0 - BORDER;
        for r in refine_matches(&scene.a2, &scene.b2, &m.matches, 5).map_err(|e| e.to_string())? {
            if r.fallback || !interior(r.pixel_a) || !interior(r.subpixel_b) {
                continue;
            }
            used += 1;
            for idx in [1, 3, 6, 7] {
                off = off.max(r.h_patch[idx].abs());
            }
        }
    }
    verdict(
        mf < 0.5 && mc >= 8.0 * mf && off < 1e-3 && used > 0,
        format!(
            "median error {mf:.4} px over {} matches, coarse {mc:.3} px ({:.0}x); translation off-diagonal max {off:.1e} over {used} interior matches",
            fine.len(),
            mc / mf
        ),
    )
}

/// Trapezoid area under the recall curve, cut at `t`, written directly.
fn auc_reference(errors: &[f64], t: f64) -> f64 {
    let mut e = errors.to_vec();
    e.sort_by(f64::total_cmp);
    let n = e.len() as f64;
    let (mut area, mut prev) = (0.0, (0.0f64, 0.0f64));
    for (i, &x) in e.iter().enumerate() {
        if x >= t {
            break;
        }
        let cur = (x, (i + 1) as f64 / n);
        area += (cur.0 - prev.0) * (cur.1 + prev.1) / 2.0;
        prev = cur;
    }
    area += (t - prev.0) * prev.1;
    area / t
}

fn geometry_harness() -> Outcome {
    let mut r = rng(9);
    let h = Matrix3::new(0.93, 0.07, 12.0, -0.05, 1.08, -7.0, 3e-4, -2e-4, 1.0);
    let src: Vec<Pt> = (0..80).map(|_| (r.random_range(0.0..320.0), r.random_range(0.0..240.0))).collect();
    let dst: Vec<Pt> = src.iter().map(|&p| apply_homography(&h, p).unwrap()).collect();
    let cfg = RansacConfig {
        iterations: 200,
        seed: 3,
        ..RansacConfig::homography()
    };
    let fit = ransac_homography(&src, &dst, &cfg).map_err(|e| e.to_string())?;
    let corners = [(0.0, 0.0), (320.0, 0.0), (320.0, 240.0), (0.0, 240.0)];
    let ce = corners
        .iter()
        .map(|&c| dist(apply_homography(&fit.model, c).unwrap(), apply_homography(&h, c).unwrap()))
        .fold(0.0, f64::max);
    let again = ransac_homography(&src, &dst, &cfg).map_err(|e| e.to_string())?;

    let k = Intrinsics {
        fx: 300.0,
        fy: 300.0,
        cx: 160.0,
        cy: 120.0,
    };
    let rot = nalgebra::Rotation3::from_euler_angles(0.02, -0.05, 0.01).into_inner();
    let t = Vector3::new(0.3, 0.05, 0.02);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for _ in 0..60 {
        let x = Vector3::new(r.random_range(-2.0..2.0), r.random_range(-1.5..1.5), r.random_range(4.0..8.0));
        let y = rot * x + t;
        a.push((k.fx * x.x / x.z + k.cx, k.fy * x.y / x.z + k.cy));
        b.push((k.fx * y.x / y.z + k.cx, k.fy * y.y / y.z + k.cy));
    }
    let ecfg = RansacConfig {
        iterations: 200,
        seed: 4,
        ..RansacConfig::essential()
    };
    let e1 = ransac_essential(&a, &b, &k, &k, &ecfg).map_err(|e| e.to_string())?;
    let e2 = ransac_essential(&a, &b, &k, &k, &ecfg).map_err(|e| e.to_string())?;

    let mut auc_dev = 0.0f64;
    for seed in 0..50 {
        let mut r = rng(900 + seed);
        let n = r.random_range(1..200);
        let errs: Vec<f64> = (0..n)
            .map(|_| if r.random_bool(0.1) { f64::INFINITY } else { r.random_range(0.0..25.0) })
            .collect();
        let thresholds = [5.0, 10.0, 20.0];
        for (got, &t) in compute_auc(&errs, &thresholds).iter().zip(&thresholds) {
            auc_dev = auc_dev.max((got - auc_reference(&errs, t)).abs());
        }
    }
    verdict(
        ce < 1e-3 && fit == again && e1 == e2 && auc_dev < 1e-6,
        format!("corner error {ce:.1e} px, AUC deviation {auc_dev:.1e}, RANSAC repeatable"),
    )
}

fn structural_identities() -> Outcome {
    let mut r = rng(10);
    for _ in 0..50 {
        let (h, w, c) = (2 * r.random_range(1..8), 2 * r.random_range(1..8), r.random_range(1..9));
        let x = normal_tensor(&mut r, &[h, w, c], 1.0);
        let back = merge_cells(&split_cells(&x, 2).unwrap(), 2, h, w).unwrap();
        if back.data().iter().zip(x.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(format!("merge after split differs at {h}x{w}x{c}"));
        }
    }
    let mut fold = 0.0f32;
    for (cin, cout, stride) in [(1, 8, 2), (8, 8, 1), (8, 16, 2), (16, 16, 1)] {
        let blk = RepVggBlock::random(&mut r, cin, cout, stride);
        let x = normal_tensor(&mut r, &[10, 12, cin], 1.0);
        fold = fold.max(blk.forward(&x).unwrap().max_abs_diff(&blk.fold().forward(&x).unwrap()));
    }
    if fold > 1e-5 {
        return Err(format!("folded block deviates by {fold:.2e}"));
    }
    for _ in 0..20 {
        let (n, m, c) = (r.random_range(1..60), r.random_range(1..8), r.random_range(2..10));
        let pts = normal_tensor(&mut r, &[n, c], 1.0);
        let anchors = normal_tensor(&mut r, &[m, c], 1.0);
        let cl = coc_cluster(&pts, &anchors).unwrap();
        let clusters = cl.clusters();
        let mut seen: Vec<usize> = clusters.concat();
        seen.sort_unstable();
        if clusters.len() != m || seen != (0..n).collect::<Vec<_>>() {
            return Err("clusters are not a partition of the points".into());
        }
        for (j, members) in clusters.iter().enumerate() {
            for &i in members {
                let cos = |a: usize| {
                    let (p, q) = (pts.row(i), anchors.row(a));
                    let d: f64 = p.iter().zip(q).map(|(&x, &y)| x as f64 * y as f64).sum();
                    let np: f64 = p.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                    let nq: f64 = q.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                    d / (np * nq)
                };
                if (0..m).any(|a| cos(a) > cos(j) + 1e-6) {
                    return Err(format!("point {i} not assigned to its most similar anchor"));
                }
            }
        }
    }
    let c = 32;
    let w = InteractionWeights::random(&mut r, c, 8, 2);
    let s = InteractionState {
        a16: map(&mut r, 4, 6, c, 16),
        b16: map(&mut r, 6, 4, c, 16),
        a32: map(&mut r, 2, 3, c, 32),
        b32: map(&mut r, 3, 2, c, 32),
    };
    let fwd = run_hybrid(s.clone(), &w, 2).unwrap();
    let rev = run_hybrid(s.swapped(), &w, 2).unwrap().swapped();
    let exact = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    let swap_ok = exact(&fwd.a16.tensor, &rev.a16.tensor)
        && exact(&fwd.b16.tensor, &rev.b16.tensor)
        && exact(&fwd.a32.tensor, &rev.a32.tensor)
        && exact(&fwd.b32.tensor, &rev.b32.tensor);
    verdict(swap_ok, format!("split/merge bit-exact, fold {fold:.1e}, clusters partition, view swap bit-exact"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("partial-softmax", partial_softmax_correctness),
        ("prior-membership", prior_membership),
        ("oracle-equivalence", oracle_equivalence),
        ("prior-invariance", prior_invariance),
        ("efficiency", efficiency),
        ("parameter-budget", parameter_budget),
        ("gradient-check", gradient_check),
        ("refinement-accuracy", refinement_accuracy),
        ("geometry-harness", geometry_harness),
        ("structural-identities", structural_identities),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (n, (name, f)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let t = Instant::now();
        let out = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match out {
            Ok(d) => println!("criterion {:>2} {name:<22} PASS  {d} [{secs:.1}s]", n + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} {name:<22} FAIL  {d} [{secs:.1}s]", n + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
