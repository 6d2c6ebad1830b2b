//! Synthetic evaluation: scene generation, the global-search reference
//! matcher, robust geometry, accuracy metrics and the matching benchmark.

pub mod bench;
pub mod metrics;
pub mod oracle;
pub mod ransac;
pub mod scene;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use bench::{bench_matching, BenchConfig, BenchEntry, BenchReport};
pub use metrics::{compute_auc, median, precision_recall};
pub use oracle::{global_oracle_match, GlobalMatch};
pub use ransac::{ransac_essential, ransac_homography, recover_pose, RansacConfig, RansacFit};
pub use scene::{generate_scene, SceneSpec, SyntheticScene, TransformFamily};

use crate::cascade::{cascade_match, priors_cover, ScaleMap, DEFAULT_K, DEFAULT_RATIO, DEFAULT_THETA};
use crate::error::{arg_err, Result};
use crate::feature::token_pixel;
use crate::geometry::{corner_error, pose_error_deg, Pt};
use crate::ops::OpCount;
use crate::refine::{refine_matches, RefinedMatch, DEFAULT_WINDOW};
use crate::supervision::SceneTruth;

pub const POSE_THRESHOLDS_DEG: [f64; 3] = [5.0, 10.0, 20.0];
pub const HOMOGRAPHY_THRESHOLDS_PX: [f64; 3] = [3.0, 5.0, 10.0];

/// A batch of scenes of one family and the matcher settings to run on them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSpec {
    /// Template for every scene; scene `i` uses seed `scene.seed + i`.
    pub scene: SceneSpec,
    pub count: usize,
    pub k: usize,
    pub theta: f32,
    pub window: usize,
    pub ransac_iterations: usize,
    /// Inlier threshold in pixels; defaults per geometry model when absent.
    pub ransac_threshold: Option<f64>,
    /// Include wall-clock timings (which make reports differ between runs).
    pub timing: bool,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            count: 10,
            k: DEFAULT_K,
            theta: DEFAULT_THETA,
            window: DEFAULT_WINDOW,
            ransac_iterations: 1000,
            ransac_threshold: None,
            timing: false,
        }
    }
}

/// Outcome for one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneResult {
    pub seed: u64,
    pub gt_pairs: usize,
    pub matches: usize,
    pub precision: f64,
    pub recall: f64,
    pub prior_complete: bool,
    pub oracle_equal: bool,
    /// Median distance of the B endpoint to its target for correct
    /// matches: token centre, stage-one pixel and final position.
    pub coarse_error_px: Option<f64>,
    pub pixel_error_px: Option<f64>,
    pub subpixel_error_px: Option<f64>,
    /// Corner error (pixels) or pose error (degrees); infinite on failure.
    pub geometry_error: f64,
    pub cascade_ops: OpCount,
    pub global_ops: OpCount,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub matching_ms: f64,
    pub oracle_ms: f64,
    pub refinement_ms: f64,
    pub geometry_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub spec: EvalSpec,
    /// `"px"` for planar families (corner error), `"deg"` for posed scenes.
    pub error_unit: String,
    pub thresholds: Vec<f64>,
    pub auc: Vec<f64>,
    pub precision: f64,
    pub recall: f64,
    pub prior_complete_scenes: usize,
    /// True when the cascade reproduced the reference matcher on every
    /// prior-complete scene.
    pub oracle_equal: bool,
    pub median_coarse_error_px: Option<f64>,
    pub median_subpixel_error_px: Option<f64>,
    pub cascade_ops: OpCount,
    pub global_ops: OpCount,
    pub times: Option<StageTimes>,
    pub scenes: Vec<SceneResult>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "seed,gt_pairs,matches,precision,recall,prior_complete,oracle_equal,coarse_error_px,subpixel_error_px,geometry_error\n",
        );
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.scenes {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{},{},{},{},{:.6}",
                r.seed,
                r.gt_pairs,
                r.matches,
                r.precision,
                r.recall,
                r.prior_complete,
                r.oracle_equal,
                opt(r.coarse_error_px),
                opt(r.subpixel_error_px),
                r.geometry_error
            );
        }
        s
    }
}

fn dist(p: Pt, q: Pt) -> f64 {
    ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()
}

/// Median B-endpoint errors for matches that agree with the ground truth:
/// `(token centre, stage-one pixel, final position)`.
pub fn localization_errors(scene: &SyntheticScene, refined: &[RefinedMatch]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let targets: HashMap<(usize, usize), Pt> = scene.gt.targets.iter().map(|t| ((t.a, t.b), t.target)).collect();
    let (mut coarse, mut pixel, mut sub) = (Vec::new(), Vec::new(), Vec::new());
    for r in refined {
        if let Some(&t) = targets.get(&(r.a, r.b)) {
            let c = token_pixel(r.b, scene.gt.grid_b.1, scene.gt.stride);
            coarse.push(dist((c.0 as f64, c.1 as f64), t));
            pixel.push(dist(r.pixel_b, t));
            sub.push(dist(r.subpixel_b, t));
        }
    }
    (coarse, pixel, sub)
}

fn geometry_error(scene: &SyntheticScene, refined: &[RefinedMatch], spec: &EvalSpec) -> f64 {
    let a: Vec<Pt> = refined.iter().map(|r| r.pixel_a).collect();
    let b: Vec<Pt> = refined.iter().map(|r| r.subpixel_b).collect();
    match &scene.truth {
        SceneTruth::Homography { h, size_a, .. } => {
            let cfg = RansacConfig {
                threshold: spec.ransac_threshold.unwrap_or(RansacConfig::homography().threshold),
                iterations: spec.ransac_iterations,
                seed: scene.spec.seed,
            };
            ransac_homography(&a, &b, &cfg)
                .map(|fit| corner_error(&fit.model, h, size_a.0 as f64, size_a.1 as f64))
                .unwrap_or(f64::INFINITY)
        }
        SceneTruth::PosedDepth { k_a, k_b, pose, .. } => {
            let cfg = RansacConfig {
                threshold: spec.ransac_threshold.unwrap_or(RansacConfig::essential().threshold),
                iterations: spec.ransac_iterations,
                seed: scene.spec.seed,
            };
            recover_pose(&a, &b, k_a, k_b, &cfg)
                .map(|(est, _)| pose_error_deg(&est, pose))
                .unwrap_or(f64::INFINITY)
        }
    }
}

/// Generates `spec.count` scenes and runs the cascade, the reference
/// matcher, refinement and geometry estimation on each.
pub fn run_eval(spec: &EvalSpec) -> Result<EvalReport> {
    if spec.count == 0 {
        return Err(arg_err!("evaluation needs at least one scene"));
    }
    let mut times = StageTimes::default();
    let start = Instant::now();
    let mut scenes = Vec::with_capacity(spec.count);
    let mut all_coarse = Vec::new();
    let mut all_sub = Vec::new();
    for i in 0..spec.count {
        let scene_spec = SceneSpec {
            seed: spec.scene.seed.wrapping_add(i as u64),
            ..spec.scene.clone()
        };
        let scene = generate_scene(&scene_spec)?;

        let t = Instant::now();
        let cascade = cascade_match(&scene.a16, &scene.b16, &scene.a8, &scene.b8, spec.k, spec.theta)?;
        times.matching_ms += t.elapsed().as_secs_f64() * 1e3;

        let t = Instant::now();
        let global = global_oracle_match(&scene.a8, &scene.b8, spec.theta)?;
        times.oracle_ms += t.elapsed().as_secs_f64() * 1e3;

        let map_a = ScaleMap::new(DEFAULT_RATIO, scene.gt.grid_a.0, scene.gt.grid_a.1);
        let map_b = ScaleMap::new(DEFAULT_RATIO, scene.gt.grid_b.0, scene.gt.grid_b.1);
        let prior_complete = priors_cover(&cascade.priors, map_a, map_b, &scene.inlier_pairs());
        let pairs = cascade.matches.pairs();
        let (precision, recall) = precision_recall(&pairs, &scene.gt.fine_pairs);

        let t = Instant::now();
        let refined = refine_matches(&scene.a2, &scene.b2, &cascade.matches, spec.window)?;
        times.refinement_ms += t.elapsed().as_secs_f64() * 1e3;
        let (coarse, pixel, sub) = localization_errors(&scene, &refined);

        let t = Instant::now();
        let geometry_error = geometry_error(&scene, &refined, spec);
        times.geometry_ms += t.elapsed().as_secs_f64() * 1e3;

        scenes.push(SceneResult {
            seed: scene_spec.seed,
            gt_pairs: scene.gt.fine_pairs.len(),
            matches: pairs.len(),
            precision,
            recall,
            prior_complete,
            oracle_equal: pairs == global.matches.pairs(),
            coarse_error_px: median(&coarse),
            pixel_error_px: median(&pixel),
            subpixel_error_px: median(&sub),
            geometry_error,
            cascade_ops: cascade.ops,
            global_ops: global.ops,
        });
        all_coarse.extend(coarse);
        all_sub.extend(sub);
    }
    times.total_ms = start.elapsed().as_secs_f64() * 1e3;

    let planar = spec.scene.family.is_planar();
    let thresholds = if planar { HOMOGRAPHY_THRESHOLDS_PX } else { POSE_THRESHOLDS_DEG }.to_vec();
    let errors: Vec<f64> = scenes.iter().map(|s| s.geometry_error).collect();
    let n = scenes.len() as f64;
    Ok(EvalReport {
        spec: spec.clone(),
        error_unit: if planar { "px" } else { "deg" }.to_string(),
        auc: compute_auc(&errors, &thresholds),
        thresholds,
        precision: scenes.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: scenes.iter().map(|s| s.recall).sum::<f64>() / n,
        prior_complete_scenes: scenes.iter().filter(|s| s.prior_complete).count(),
        oracle_equal: scenes.iter().filter(|s| s.prior_complete).all(|s| s.oracle_equal),
        median_coarse_error_px: median(&all_coarse),
        median_subpixel_error_px: median(&all_sub),
        cascade_ops: scenes.iter().map(|s| s.cascade_ops).sum(),
        global_ops: scenes.iter().map(|s| s.global_ops).sum(),
        times: spec.timing.then_some(times),
        scenes,
    })
}
