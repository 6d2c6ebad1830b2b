//! Synthetic two-view scenes with known geometry and controllable
//! descriptors.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cascade::score_matrix;
use crate::error::{arg_err, CaspError, Result};
use crate::feature::FeatureMap;
use crate::geometry::{fit_homography, rotation_from_axis_angle, Intrinsics, Pose, Pt};
use crate::supervision::{build_gt, DepthMap, GtAssignment, SceneTruth};
use crate::tensor::{avg_pool2, Tensor};

/// Geometric relation between the two views.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformFamily {
    Identity,
    Translation,
    RotationScale,
    Homography,
    TwoPlane,
}

impl TransformFamily {
    pub const ALL: [TransformFamily; 5] = [
        TransformFamily::Identity,
        TransformFamily::Translation,
        TransformFamily::RotationScale,
        TransformFamily::Homography,
        TransformFamily::TwoPlane,
    ];

    /// Planar families are evaluated by homography estimation, the rest by
    /// relative pose.
    pub fn is_planar(self) -> bool {
        self != TransformFamily::TwoPlane
    }
}

impl fmt::Display for TransformFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransformFamily::Identity => "identity",
            TransformFamily::Translation => "translation",
            TransformFamily::RotationScale => "rotation-scale",
            TransformFamily::Homography => "homography",
            TransformFamily::TwoPlane => "two-plane",
        })
    }
}

impl FromStr for TransformFamily {
    type Err = CaspError;

    fn from_str(s: &str) -> Result<Self> {
        TransformFamily::ALL
            .into_iter()
            .find(|f| f.to_string() == s)
            .ok_or_else(|| arg_err!("unknown transform family '{s}'"))
    }
}

/// Parameters of one synthetic scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub family: TransformFamily,
    /// Image extent in pixels; both must be multiples of 16.
    pub width: usize,
    pub height: usize,
    /// Descriptor width at 1/8 (and 1/16).
    pub channels: usize,
    /// Descriptor width of the 1/2 refinement maps.
    pub fine_channels: usize,
    /// Norm of the perturbation added to A's copy of a partner descriptor.
    pub noise: f32,
    /// Minimum score gap between a ground-truth partner and any distractor,
    /// in both directions.
    pub margin: f32,
    /// Fraction of matched A tokens whose descriptor is replaced by an
    /// unrelated one.
    pub outlier_fraction: f32,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            family: TransformFamily::Homography,
            width: 128,
            height: 128,
            channels: 256,
            fine_channels: 16,
            noise: 0.05,
            margin: 10.0,
            outlier_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 32 || self.height < 32 || self.width % 16 != 0 || self.height % 16 != 0 {
            return Err(arg_err!(
                "scene extent {}x{} must be at least 32 and a multiple of 16",
                self.width,
                self.height
            ));
        }
        if self.channels == 0 || self.fine_channels == 0 {
            return Err(arg_err!("descriptor widths must be positive"));
        }
        if !(self.noise >= 0.0) || !(self.margin > 0.0) {
            return Err(arg_err!("noise must be non-negative and margin positive"));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(arg_err!("outlier fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Scene truth, ground-truth assignment and descriptor maps at 1/16, 1/8
/// and 1/2 for both views.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub truth: SceneTruth,
    pub gt: GtAssignment,
    /// A tokens whose descriptors were replaced.
    pub outliers: Vec<usize>,
    pub a16: FeatureMap,
    pub b16: FeatureMap,
    pub a8: FeatureMap,
    pub b8: FeatureMap,
    pub a2: FeatureMap,
    pub b2: FeatureMap,
}

impl SyntheticScene {
    /// Ground-truth 1/8 pairs whose A descriptor was left intact.
    pub fn inlier_pairs(&self) -> Vec<(usize, usize)> {
        self.gt
            .fine_pairs
            .iter()
            .copied()
            .filter(|(a, _)| self.outliers.binary_search(a).is_err())
            .collect()
    }
}

fn unit_vector(rng: &mut impl Rng, c: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..c).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn sample_truth(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Result<SceneTruth> {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let size = (spec.width, spec.height);
    let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
    let about_center = |m: Matrix3<f64>| {
        let to = Matrix3::new(1.0, 0.0, cx, 0.0, 1.0, cy, 0.0, 0.0, 1.0);
        let from = Matrix3::new(1.0, 0.0, -cx, 0.0, 1.0, -cy, 0.0, 0.0, 1.0);
        to * m * from
    };
    let planar = |h_gt: Matrix3<f64>| SceneTruth::Homography {
        h: h_gt,
        size_a: size,
        size_b: size,
    };
    let truth = match spec.family {
        TransformFamily::Identity => planar(Matrix3::identity()),
        TransformFamily::Translation => {
            let tx = rng.random_range(-0.15..0.15) * w;
            let ty = rng.random_range(-0.15..0.15) * h;
            planar(Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0))
        }
        TransformFamily::RotationScale => {
            let ang = rng.random_range(-25.0f64..25.0).to_radians();
            let s = rng.random_range(0.85..1.2);
            let tx = rng.random_range(-0.05..0.05) * w;
            let ty = rng.random_range(-0.05..0.05) * h;
            let (c, si) = (s * ang.cos(), s * ang.sin());
            planar(about_center(Matrix3::new(c, -si, tx, si, c, ty, 0.0, 0.0, 1.0)))
        }
        TransformFamily::Homography => {
            let corners: Vec<Pt> = vec![(0.0, 0.0), (w - 1.0, 0.0), (w - 1.0, h - 1.0), (0.0, h - 1.0)];
            let moved: Vec<Pt> = corners
                .iter()
                .map(|&(x, y)| (x + rng.random_range(-0.12..0.12) * w, y + rng.random_range(-0.12..0.12) * h))
                .collect();
            planar(fit_homography(&corners, &moved, None)?)
        }
        TransformFamily::TwoPlane => two_plane(rng, spec),
    };
    Ok(truth)
}

/// Background plane with a nearer rectangular plane in front of it, seen
/// from two calibrated cameras.
fn two_plane(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> SceneTruth {
    let (w, h) = (spec.width, spec.height);
    let f = w as f64;
    let k = Intrinsics {
        fx: f,
        fy: f,
        cx: (w as f64 - 1.0) / 2.0,
        cy: (h as f64 - 1.0) / 2.0,
    };
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let angle = rng.random_range(2.0f64..6.0).to_radians();
    let r = rotation_from_axis_angle(&(axis.normalize() * angle));
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let t = Vector3::new(
        sign * rng.random_range(0.3..0.6),
        rng.random_range(-0.1..0.1),
        rng.random_range(-0.1..0.1),
    );
    let pose = Pose { r, t };
    let far = rng.random_range(5.0..7.0);
    let near = rng.random_range(2.5..3.5);
    // Extent of the near plane in normalised A coordinates.
    let x0 = rng.random_range(-0.3..0.0);
    let y0 = rng.random_range(-0.3..0.0);
    let (x1, y1) = (x0 + rng.random_range(0.2..0.35), y0 + rng.random_range(0.2..0.35));
    let on_near = |p: &Vector3<f64>| {
        let (u, v) = (p.x / p.z, p.y / p.z);
        u >= x0 && u < x1 && v >= y0 && v < y1
    };
    let depth_a = DepthMap::from_fn(w, h, |x, y| {
        let ray = k.unproject((x as f64, y as f64), 1.0);
        if on_near(&ray) {
            near as f32
        } else {
            far as f32
        }
    });
    let rt = r.transpose();
    let rtt = rt * t;
    let depth_b = DepthMap::from_fn(w, h, |x, y| {
        // Ray of B in A's frame: X_A = Rᵀ(λ·v − t); intersect with z_A = d.
        let v = k.unproject((x as f64, y as f64), 1.0);
        let dir = rt * v;
        let mut best = f64::INFINITY;
        for (d, bounded) in [(near, true), (far, false)] {
            if dir.z <= 1e-12 {
                continue;
            }
            let lambda = (d + rtt.z) / dir.z;
            if lambda <= 0.0 {
                continue;
            }
            let xa = dir * lambda - rtt;
            if bounded && !on_near(&xa) {
                continue;
            }
            best = best.min(lambda);
        }
        if best.is_finite() {
            best as f32
        } else {
            0.0
        }
    });
    SceneTruth::PosedDepth {
        k_a: k,
        k_b: k,
        pose,
        depth_a,
        depth_b,
    }
}

/// Smooth random descriptor field: every channel is a sum of three plane
/// waves with spatial frequencies between 0.08 and 0.2 rad/px.
#[derive(Clone, Debug)]
pub struct WaveField {
    waves: Vec<(f64, f64, f64)>,
    channels: usize,
}

impl WaveField {
    pub fn random(rng: &mut impl Rng, channels: usize) -> Self {
        let waves = (0..channels * 3)
            .map(|_| {
                let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let freq: f64 = rng.random_range(0.08..0.2);
                (freq * ang.cos(), freq * ang.sin(), rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Self { waves, channels }
    }

    pub fn at(&self, p: Pt, out: &mut [f32]) {
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            *o = self.waves[c * 3..c * 3 + 3]
                .iter()
                .map(|(kx, ky, ph)| (kx * p.0 + ky * p.1 + ph).sin())
                .sum::<f64>() as f32;
        }
    }

    /// Stride-2 map; cell `(u, v)` holds the field at the centre of its 2×2
    /// pixel block, pulled back through `to_source` (zero where undefined).
    pub fn half_map(&self, w: usize, h: usize, to_source: impl Fn(Pt) -> Option<Pt>) -> Result<FeatureMap> {
        let (gw, gh) = (w / 2, h / 2);
        let c = self.channels;
        let mut data = vec![0.0f32; gw * gh * c];
        for v in 0..gh {
            for u in 0..gw {
                if let Some(src) = to_source((2.0 * u as f64 + 0.5, 2.0 * v as f64 + 0.5)) {
                    self.at(src, &mut data[(v * gw + u) * c..(v * gw + u + 1) * c]);
                }
            }
        }
        FeatureMap::new(Tensor::new(vec![gh, gw, c], data)?, 2)
    }
}

/// Smallest gap, over ground-truth pairs, between the partner score and
/// the best distractor in the pair's row and column.
fn min_margin(s: &Tensor, pairs: &[(usize, usize)]) -> Result<f32> {
    let (n_a, n_b) = s.dims2()?;
    let mut worst = f32::INFINITY;
    for &(i, j) in pairs {
        let gt = s.at2(i, j);
        let row = (0..n_b).filter(|&b| b != j).map(|b| s.at2(i, b)).fold(f32::NEG_INFINITY, f32::max);
        let col = (0..n_a).filter(|&a| a != i).map(|a| s.at2(a, j)).fold(f32::NEG_INFINITY, f32::max);
        worst = worst.min(gt - row.max(col));
    }
    Ok(worst)
}

/// Deterministic scene for `spec`. B's matched tokens carry random unit
/// descriptors and A's partners a noisy copy; tokens without a partner are
/// zero. Descriptors are then scaled so that the configured margin holds.
/// The 1/16 maps are 2×2 averages of the 1/8 maps; the 1/2 maps sample one
/// smooth field consistently with the geometry.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let truth = sample_truth(&mut rng, spec)?;
    let gt = build_gt(&truth, 8)?;
    let c = spec.channels;
    let (na, nb) = (gt.grid_a.0 * gt.grid_a.1, gt.grid_b.0 * gt.grid_b.1);
    if gt.fine_pairs.is_empty() {
        return Err(CaspError::Data("scene has no ground-truth correspondences".into()));
    }

    let mut a = vec![0.0f32; na * c];
    let mut b = vec![0.0f32; nb * c];
    let n_out = (spec.outlier_fraction as f64 * gt.fine_pairs.len() as f64).floor() as usize;
    let mut outliers: Vec<usize> = sample(&mut rng, gt.fine_pairs.len(), n_out)
        .into_iter()
        .map(|k| gt.fine_pairs[k].0)
        .collect();
    outliers.sort_unstable();
    let noise_scale = spec.noise / (c as f32).sqrt();
    for &(i, j) in &gt.fine_pairs {
        let d = unit_vector(&mut rng, c);
        b[j * c..(j + 1) * c].copy_from_slice(&d);
        let dst = &mut a[i * c..(i + 1) * c];
        if outliers.binary_search(&i).is_ok() {
            dst.copy_from_slice(&unit_vector(&mut rng, c));
        } else {
            for (o, v) in dst.iter_mut().zip(&d) {
                *o = v + noise_scale * rng.sample::<f32, _>(StandardNormal);
            }
        }
    }
    let mut ta = Tensor::new(vec![na, c], a)?;
    let mut tb = Tensor::new(vec![nb, c], b)?;
    let inliers: Vec<(usize, usize)> = gt
        .fine_pairs
        .iter()
        .copied()
        .filter(|(i, _)| outliers.binary_search(i).is_err())
        .collect();
    if !inliers.is_empty() {
        let m0 = min_margin(&score_matrix(&ta, &tb)?, &inliers)?;
        if !(m0 > 0.0) {
            return Err(CaspError::Data(format!(
                "noise {} leaves no positive margin between partners and distractors",
                spec.noise
            )));
        }
        let gain = (spec.margin / m0).sqrt();
        ta = ta.scale(gain);
        tb = tb.scale(gain);
    }
    let a8 = FeatureMap::from_tokens(ta, gt.grid_a.0, gt.grid_a.1, 8)?;
    let b8 = FeatureMap::from_tokens(tb, gt.grid_b.0, gt.grid_b.1, 8)?;
    let a16 = FeatureMap::new(avg_pool2(&a8.tensor)?, 16)?;
    let b16 = FeatureMap::new(avg_pool2(&b8.tensor)?, 16)?;

    let field = WaveField::random(&mut rng, spec.fine_channels);
    let (wa, ha) = truth.size_a();
    let (wb, hb) = truth.size_b();
    let a2 = field.half_map(wa, ha, Some)?;
    let b2 = field.half_map(wb, hb, |q| truth.warp_to_a(q))?;
    Ok(SyntheticScene {
        spec: spec.clone(),
        truth,
        gt,
        outliers,
        a16,
        b16,
        a8,
        b8,
        a2,
        b2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::topk_rows;

    #[test]
    fn identity_scene_has_identity_gt() {
        let spec = SceneSpec {
            family: TransformFamily::Identity,
            noise: 0.0,
            ..SceneSpec::default()
        };
        let s = generate_scene(&spec).unwrap();
        assert_eq!(s.gt.fine_pairs, (0..256).map(|i| (i, i)).collect::<Vec<_>>());
        assert_eq!(s.a8, s.b8);
    }

    #[test]
    fn scenes_are_deterministic() {
        for family in TransformFamily::ALL {
            let spec = SceneSpec {
                family,
                seed: 11,
                outlier_fraction: 0.2,
                ..SceneSpec::default()
            };
            assert_eq!(generate_scene(&spec).unwrap(), generate_scene(&spec).unwrap());
        }
    }

    #[test]
    fn margin_gives_perfect_nearest_neighbours() {
        for family in TransformFamily::ALL {
            let spec = SceneSpec {
                family,
                noise: 0.0,
                margin: 10.0,
                seed: 3,
                ..SceneSpec::default()
            };
            let s = generate_scene(&spec).unwrap();
            let sm = score_matrix(&s.a8.tokens(), &s.b8.tokens()).unwrap();
            let nn = topk_rows(&sm, 1).unwrap();
            for &(i, j) in &s.gt.fine_pairs {
                assert_eq!(nn.row(i)[0], j, "{family}");
            }
            assert!(min_margin(&sm, &s.gt.fine_pairs).unwrap() >= 10.0 - 1e-3);
        }
    }

    #[test]
    fn family_names_round_trip() {
        for f in TransformFamily::ALL {
            assert_eq!(f.to_string().parse::<TransformFamily>().unwrap(), f);
        }
        assert!("shear".parse::<TransformFamily>().is_err());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = [
            SceneSpec { width: 120, ..SceneSpec::default() },
            SceneSpec { channels: 0, ..SceneSpec::default() },
            SceneSpec { margin: 0.0, ..SceneSpec::default() },
            SceneSpec { outlier_fraction: 1.0, ..SceneSpec::default() },
        ];
        for s in bad {
            assert!(generate_scene(&s).is_err());
        }
    }

    #[test]
    fn two_plane_depths_are_consistent() {
        let s = generate_scene(&SceneSpec {
            family: TransformFamily::TwoPlane,
            seed: 5,
            ..SceneSpec::default()
        })
        .unwrap();
        // Most visible A pixels re-project onto B pixels at matching depth.
        let mut ok = 0;
        for y in (0..128).step_by(4) {
            for x in (0..128).step_by(4) {
                if let Some(q) = s.truth.warp((x as f64, y as f64)) {
                    let back = s.truth.warp_to_a(q).unwrap();
                    assert!((back.0 - x as f64).abs() < 0.6 && (back.1 - y as f64).abs() < 0.6);
                    ok += 1;
                }
            }
        }
        assert!(ok > 500, "{ok}");
    }
}
