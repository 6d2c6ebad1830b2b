//! Vanilla RANSAC around the minimal homography and essential solvers.

use nalgebra::Matrix3;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CaspError, Result};
use crate::geometry::{
    decompose_essential, fit_essential, fit_homography, fundamental_from_essential, sampson_distance, transfer_error,
    Intrinsics, Pose, Pt,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    /// Inlier threshold in pixels.
    pub threshold: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl RansacConfig {
    pub fn homography() -> Self {
        Self {
            threshold: 2.0,
            iterations: 1000,
            seed: 0,
        }
    }

    pub fn essential() -> Self {
        Self {
            threshold: 0.5,
            iterations: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacFit {
    pub model: Matrix3<f64>,
    pub inliers: Vec<bool>,
}

impl RansacFit {
    pub fn num_inliers(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn run(
    n: usize,
    minimal: usize,
    cfg: &RansacConfig,
    fit: impl Fn(&[usize]) -> Result<Matrix3<f64>>,
    residual: impl Fn(&Matrix3<f64>, usize) -> f64,
) -> Result<RansacFit> {
    if n < minimal {
        return Err(CaspError::Estimation(format!("{n} correspondences, at least {minimal} needed")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let classify = |m: &Matrix3<f64>| (0..n).map(|i| residual(m, i) < cfg.threshold).collect::<Vec<bool>>();
    let mut best: Option<(usize, Matrix3<f64>, Vec<bool>)> = None;
    for _ in 0..cfg.iterations.max(1) {
        let idx = sample(&mut rng, n, minimal).into_vec();
        let Ok(m) = fit(&idx) else { continue };
        let inl = classify(&m);
        let count = inl.iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|b| count > b.0) {
            best = Some((count, m, inl));
        }
    }
    let (count, model, inliers) = best.ok_or_else(|| CaspError::Estimation("no non-degenerate sample".into()))?;
    if count >= minimal {
        let idx: Vec<usize> = (0..n).filter(|&i| inliers[i]).collect();
        if let Ok(refit) = fit(&idx) {
            let inl = classify(&refit);
            if inl.iter().filter(|&&b| b).count() >= count {
                return Ok(RansacFit {
                    model: refit,
                    inliers: inl,
                });
            }
        }
    }
    Ok(RansacFit { model, inliers })
}

/// Homography mapping `src` onto `dst` with one-way transfer error as the
/// inlier test; the best sample's model is refit on its inliers.
pub fn ransac_homography(src: &[Pt], dst: &[Pt], cfg: &RansacConfig) -> Result<RansacFit> {
    if src.len() != dst.len() {
        return Err(CaspError::Argument("point lists differ in length".into()));
    }
    let pick = |idx: &[usize], pts: &[Pt]| idx.iter().map(|&i| pts[i]).collect::<Vec<_>>();
    run(
        src.len(),
        4,
        cfg,
        |idx| fit_homography(&pick(idx, src), &pick(idx, dst), None),
        |h, i| transfer_error(h, src[i], dst[i]),
    )
}

/// Essential matrix from pixel correspondences with the Sampson distance
/// (pixels) as the inlier test.
pub fn ransac_essential(a: &[Pt], b: &[Pt], ka: &Intrinsics, kb: &Intrinsics, cfg: &RansacConfig) -> Result<RansacFit> {
    if a.len() != b.len() {
        return Err(CaspError::Argument("point lists differ in length".into()));
    }
    let na: Vec<Pt> = a.iter().map(|&p| ka.normalize(p)).collect();
    let nb: Vec<Pt> = b.iter().map(|&p| kb.normalize(p)).collect();
    let pick = |idx: &[usize], pts: &[Pt]| idx.iter().map(|&i| pts[i]).collect::<Vec<_>>();
    run(
        a.len(),
        8,
        cfg,
        |idx| fit_essential(&pick(idx, &na), &pick(idx, &nb)),
        |e, i| sampson_distance(&fundamental_from_essential(e, ka, kb), a[i], b[i]),
    )
}

/// Relative pose from a RANSAC essential fit, decomposed on its inliers.
pub fn recover_pose(a: &[Pt], b: &[Pt], ka: &Intrinsics, kb: &Intrinsics, cfg: &RansacConfig) -> Result<(Pose, RansacFit)> {
    let fit = ransac_essential(a, b, ka, kb, cfg)?;
    let (ia, ib): (Vec<Pt>, Vec<Pt>) = (0..a.len())
        .filter(|&i| fit.inliers[i])
        .map(|i| (ka.normalize(a[i]), kb.normalize(b[i])))
        .unzip();
    let pose = decompose_essential(&fit.model, &ia, &ib)?;
    Ok((pose, fit))
}
