//! Ground truth from scene geometry and the training losses.
//!
//! The coarse loss is the negative log-likelihood of the dual-softmax
//! confidence at the ground-truth pairs. Its gradient with respect to the
//! score matrix is available in closed form so the differentiable matching
//! path can be checked against finite differences.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::ScaleMap;
use crate::error::{arg_err, CaspError, Result};
use crate::feature::{pixel_to_token, token_pixel};
use crate::geometry::{apply_homography, Intrinsics, Pose, Pt};
use crate::refine::RefinedMatch;
use crate::tensor::Tensor;

/// Added inside every logarithm so that zero confidence stays finite.
pub const LOG_EPS: f64 = 1e-12;
/// Relative depth disagreement above which a warped pixel counts as occluded.
pub const DEPTH_TOLERANCE: f64 = 0.2;
/// Temperature of the window-correlation distribution in the fine loss.
pub const FINE_TEMPERATURE: f64 = 0.1;

/// Per-pixel depth; non-positive or non-finite entries are invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(arg_err!("depth map {width}x{height} needs {} values, got {}", width * height, data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let data = (0..width * height).map(|k| f(k % width, k / width)).collect();
        Self { width, height, data }
    }

    /// Depth at the nearest pixel, if inside and valid.
    pub fn at(&self, p: Pt) -> Option<f64> {
        let (x, y) = (p.0.round(), p.1.round());
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        let d = self.data[y as usize * self.width + x as usize] as f64;
        (d.is_finite() && d > 0.0).then_some(d)
    }
}

/// Geometry relating two synthetic views.
#[derive(Clone, Debug, PartialEq)]
pub enum SceneTruth {
    /// Planar scene: pixels of A map to B through `h`. Sizes are `(width, height)`.
    Homography {
        h: Matrix3<f64>,
        size_a: (usize, usize),
        size_b: (usize, usize),
    },
    /// Calibrated views with per-pixel depth and the relative pose A→B.
    PosedDepth {
        k_a: Intrinsics,
        k_b: Intrinsics,
        pose: Pose,
        depth_a: DepthMap,
        depth_b: DepthMap,
    },
}

impl SceneTruth {
    pub fn size_a(&self) -> (usize, usize) {
        match self {
            SceneTruth::Homography { size_a, .. } => *size_a,
            SceneTruth::PosedDepth { depth_a, .. } => (depth_a.width, depth_a.height),
        }
    }

    pub fn size_b(&self) -> (usize, usize) {
        match self {
            SceneTruth::Homography { size_b, .. } => *size_b,
            SceneTruth::PosedDepth { depth_b, .. } => (depth_b.width, depth_b.height),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SceneTruth::Homography { h, .. } => {
                if !h.iter().all(|v| v.is_finite()) || h.determinant().abs() < 1e-12 {
                    return Err(CaspError::Data("ground-truth homography is not invertible".into()));
                }
            }
            SceneTruth::PosedDepth { depth_a, depth_b, .. } => {
                if depth_a.data.iter().chain(&depth_b.data).any(|&d| d < 0.0) {
                    return Err(CaspError::Data("negative depth".into()));
                }
            }
        }
        Ok(())
    }

    /// Position in B of pixel `p` of A, or `None` when it leaves B's image,
    /// lacks depth or is occluded.
    pub fn warp(&self, p: Pt) -> Option<Pt> {
        let (wb, hb) = self.size_b();
        let q = match self {
            SceneTruth::Homography { h, .. } => apply_homography(h, p)?,
            SceneTruth::PosedDepth {
                k_a,
                k_b,
                pose,
                depth_a,
                depth_b,
            } => {
                let x = pose.r * k_a.unproject(p, depth_a.at(p)?) + pose.t;
                let q = k_b.project(&x)?;
                let db = depth_b.at(q)?;
                if (x.z - db).abs() > DEPTH_TOLERANCE * db {
                    return None;
                }
                q
            }
        };
        let inside = q.0 >= -0.5 && q.1 >= -0.5 && q.0 < wb as f64 - 0.5 && q.1 < hb as f64 - 0.5;
        inside.then_some(q)
    }

    /// Position in A of pixel `q` of B, ignoring visibility in A. Used to
    /// render B-side content consistent with the geometry.
    pub fn warp_to_a(&self, q: Pt) -> Option<Pt> {
        match self {
            SceneTruth::Homography { h, .. } => apply_homography(&h.try_inverse()?, q),
            SceneTruth::PosedDepth {
                k_a, k_b, pose, depth_b, ..
            } => {
                let xb = k_b.unproject(q, depth_b.at(q)?);
                k_a.project(&(pose.r.transpose() * (xb - pose.t)))
            }
        }
    }

    /// Writes a one-line JSON header followed, for posed scenes, by both
    /// depth maps as little-endian `f32`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        let header = SceneHeader::from(self);
        serde_json::to_writer(&mut f, &header)?;
        f.write_all(b"\n")?;
        if let SceneTruth::PosedDepth { depth_a, depth_b, .. } = self {
            for v in depth_a.data.iter().chain(&depth_b.data) {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CaspError::Data("scene file has no header line".into()))?;
        let header: SceneHeader = serde_json::from_slice(&bytes[..nl])?;
        let floats: Vec<f32> = bytes[nl + 1..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let scene = header.into_scene(&floats)?;
        scene.validate()?;
        Ok(scene)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
enum SceneHeader {
    Homography {
        h: [f64; 9],
        size_a: (usize, usize),
        size_b: (usize, usize),
    },
    PosedDepth {
        k_a: [f64; 4],
        k_b: [f64; 4],
        r: [f64; 9],
        t: [f64; 3],
        size_a: (usize, usize),
        size_b: (usize, usize),
    },
}

fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = m[(r, c)];
        }
    }
    out
}

fn intrinsics_array(k: &Intrinsics) -> [f64; 4] {
    [k.fx, k.fy, k.cx, k.cy]
}

fn intrinsics_from(a: [f64; 4]) -> Intrinsics {
    Intrinsics {
        fx: a[0],
        fy: a[1],
        cx: a[2],
        cy: a[3],
    }
}

impl From<&SceneTruth> for SceneHeader {
    fn from(s: &SceneTruth) -> Self {
        match s {
            SceneTruth::Homography { h, size_a, size_b } => SceneHeader::Homography {
                h: row_major(h),
                size_a: *size_a,
                size_b: *size_b,
            },
            SceneTruth::PosedDepth { k_a, k_b, pose, .. } => SceneHeader::PosedDepth {
                k_a: intrinsics_array(k_a),
                k_b: intrinsics_array(k_b),
                r: row_major(&pose.r),
                t: [pose.t.x, pose.t.y, pose.t.z],
                size_a: s.size_a(),
                size_b: s.size_b(),
            },
        }
    }
}

impl SceneHeader {
    fn into_scene(self, floats: &[f32]) -> Result<SceneTruth> {
        match self {
            SceneHeader::Homography { h, size_a, size_b } => Ok(SceneTruth::Homography {
                h: Matrix3::from_row_slice(&h),
                size_a,
                size_b,
            }),
            SceneHeader::PosedDepth {
                k_a,
                k_b,
                r,
                t,
                size_a,
                size_b,
            } => {
                let na = size_a.0 * size_a.1;
                let nb = size_b.0 * size_b.1;
                if floats.len() != na + nb {
                    return Err(CaspError::Data(format!(
                        "scene file holds {} depth values, expected {}",
                        floats.len(),
                        na + nb
                    )));
                }
                Ok(SceneTruth::PosedDepth {
                    k_a: intrinsics_from(k_a),
                    k_b: intrinsics_from(k_b),
                    pose: Pose {
                        r: Matrix3::from_row_slice(&r),
                        t: Vector3::new(t[0], t[1], t[2]),
                    },
                    depth_a: DepthMap::new(size_a.0, size_a.1, floats[..na].to_vec())?,
                    depth_b: DepthMap::new(size_b.0, size_b.1, floats[na..].to_vec())?,
                })
            }
        }
    }
}

/// Exact B position of the warped A-token representative pixel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTarget {
    pub a: usize,
    pub b: usize,
    pub target: Pt,
}

/// One-to-one token correspondences at the matching scale, their image at
/// the coarse scale and the pixel targets for refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct GtAssignment {
    pub stride: usize,
    /// `(height, width)` of the token grids.
    pub grid_a: (usize, usize),
    pub grid_b: (usize, usize),
    pub fine_pairs: Vec<(usize, usize)>,
    pub coarse_pairs: Vec<(usize, usize)>,
    pub targets: Vec<FineTarget>,
}

/// Ground truth at token stride `stride` (coarse pairs at twice the
/// stride). Every A token's representative pixel is warped into B and
/// assigned to the B token containing it; when several A tokens land in the
/// same B token only the one closest to its representative pixel is kept
/// (lowest index on ties).
pub fn build_gt(scene: &SceneTruth, stride: usize) -> Result<GtAssignment> {
    scene.validate()?;
    if stride == 0 {
        return Err(arg_err!("stride must be positive"));
    }
    let (wa, ha) = scene.size_a();
    let (wb, hb) = scene.size_b();
    let grid_a = (ha / stride, wa / stride);
    let grid_b = (hb / stride, wb / stride);
    let warped: Vec<Option<(usize, Pt, f64)>> = (0..grid_a.0 * grid_a.1)
        .into_par_iter()
        .map(|a| {
            let (x, y) = token_pixel(a, grid_a.1, stride);
            let q = scene.warp((x as f64, y as f64))?;
            let b = pixel_to_token(q.0, q.1, grid_b.0, grid_b.1, stride)?;
            let (bx, by) = token_pixel(b, grid_b.1, stride);
            let d = (q.0 - bx as f64).powi(2) + (q.1 - by as f64).powi(2);
            Some((b, q, d))
        })
        .collect();

    let mut owner: Vec<Option<(usize, f64)>> = vec![None; grid_b.0 * grid_b.1];
    for (a, w) in warped.iter().enumerate() {
        if let Some((b, _, d)) = *w {
            match owner[b] {
                Some((_, best)) if best <= d => {}
                _ => owner[b] = Some((a, d)),
            }
        }
    }
    let mut fine_pairs = Vec::new();
    let mut targets = Vec::new();
    for (a, w) in warped.iter().enumerate() {
        if let Some((b, q, _)) = *w {
            if owner[b].map(|o| o.0) == Some(a) {
                fine_pairs.push((a, b));
                targets.push(FineTarget { a, b, target: q });
            }
        }
    }
    let map_a = ScaleMap::new(2, grid_a.0, grid_a.1);
    let map_b = ScaleMap::new(2, grid_b.0, grid_b.1);
    let mut coarse_pairs: Vec<(usize, usize)> = fine_pairs.iter().map(|&(a, b)| (map_a.parent(a), map_b.parent(b))).collect();
    coarse_pairs.sort_unstable();
    coarse_pairs.dedup();
    Ok(GtAssignment {
        stride,
        grid_a,
        grid_b,
        fine_pairs,
        coarse_pairs,
        targets,
    })
}

/// `−mean log(P[i,j] + ε)` over the ground-truth pairs, accumulated in `f64`.
pub fn coarse_loss(p: &Tensor, gt: &[(usize, usize)]) -> Result<f64> {
    let (n_a, n_b) = p.dims2()?;
    check_pairs(gt, n_a, n_b)?;
    let sum: f64 = gt.iter().map(|&(i, j)| (p.at2(i, j) as f64 + LOG_EPS).ln()).sum();
    Ok(-sum / gt.len() as f64)
}

fn check_pairs(gt: &[(usize, usize)], n_a: usize, n_b: usize) -> Result<()> {
    if gt.is_empty() {
        return Err(CaspError::EmptySupervision);
    }
    if let Some(&(i, j)) = gt.iter().find(|&&(i, j)| i >= n_a || j >= n_b) {
        return Err(CaspError::Data(format!("ground-truth pair ({i}, {j}) outside {n_a}x{n_b}")));
    }
    Ok(())
}

/// Row- and column-softmax of `s` in `f64`, both stored row-major.
fn softmaxes(s: &Tensor) -> Result<(Vec<f64>, Vec<f64>, usize, usize)> {
    let (n_a, n_b) = s.dims2()?;
    let v: Vec<f64> = s.data().iter().map(|&x| x as f64).collect();
    let mut rows = vec![0.0; n_a * n_b];
    for i in 0..n_a {
        let r = &v[i * n_b..(i + 1) * n_b];
        let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = r.iter().map(|x| (x - m).exp()).sum();
        for j in 0..n_b {
            rows[i * n_b + j] = (r[j] - m).exp() / z;
        }
    }
    let mut cols = vec![0.0; n_a * n_b];
    for j in 0..n_b {
        let m = (0..n_a).map(|i| v[i * n_b + j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n_a).map(|i| (v[i * n_b + j] - m).exp()).sum();
        for i in 0..n_a {
            cols[i * n_b + j] = (v[i * n_b + j] - m).exp() / z;
        }
    }
    Ok((rows, cols, n_a, n_b))
}

/// The coarse loss as a function of the score matrix, entirely in `f64`.
pub fn coarse_loss_from_scores(s: &Tensor, gt: &[(usize, usize)]) -> Result<f64> {
    let (rows, cols, n_a, n_b) = softmaxes(s)?;
    check_pairs(gt, n_a, n_b)?;
    let sum: f64 = gt.iter().map(|&(i, j)| (rows[i * n_b + j] * cols[i * n_b + j] + LOG_EPS).ln()).sum();
    Ok(-sum / gt.len() as f64)
}

/// `∂L/∂S` of [`coarse_loss_from_scores`]. With `R`, `C` the row and column
/// softmaxes and `P = R⊙C`, each pair `(i, j)` contributes
/// `−w/N · [δ_ia(δ_jb − R_ab) + δ_jb(δ_ia − C_ab)]` with `w = P/(P + ε)`.
pub fn coarse_loss_grad(s: &Tensor, gt: &[(usize, usize)]) -> Result<Tensor> {
    let (rows, cols, n_a, n_b) = softmaxes(s)?;
    check_pairs(gt, n_a, n_b)?;
    let n = gt.len() as f64;
    let mut g = vec![0.0f64; n_a * n_b];
    for &(i, j) in gt {
        let p = rows[i * n_b + j] * cols[i * n_b + j];
        let w = p / (p + LOG_EPS) / n;
        for b in 0..n_b {
            g[i * n_b + b] += w * rows[i * n_b + b];
        }
        for a in 0..n_a {
            g[a * n_b + j] += w * cols[a * n_b + j];
        }
        g[i * n_b + j] -= 2.0 * w;
    }
    Tensor::new(vec![n_a, n_b], g.into_iter().map(|v| v as f32).collect())
}

/// Pixel-level and sub-pixel losses with the number of matches that
/// contributed to them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FineLosses {
    pub fine: f64,
    pub sub: f64,
    pub supervised: usize,
}

/// Losses of refined matches against their targets, paired by A token.
/// Only matches whose target falls inside the refinement window count. The
/// pixel-level term is the NLL of `softmax(scores / T)` at the pixel
/// containing the target; the sub-pixel term is the mean squared distance.
pub fn fine_losses(refined: &[RefinedMatch], targets: &[FineTarget]) -> FineLosses {
    let mut by_a: Vec<(usize, Pt)> = targets.iter().map(|t| (t.a, t.target)).collect();
    by_a.sort_by_key(|t| t.0);
    let (mut fine, mut sub, mut n) = (0.0f64, 0.0f64, 0usize);
    for r in refined {
        let Ok(k) = by_a.binary_search_by_key(&r.a, |t| t.0) else {
            continue;
        };
        let t = by_a[k].1;
        let side = (r.scores.len() as f64).sqrt().round() as usize;
        if side == 0 || side * side != r.scores.len() {
            continue;
        }
        let lx = t.0 - r.window_origin_b.0 as f64;
        let ly = t.1 - r.window_origin_b.1 as f64;
        let hi = side as f64 - 0.5;
        if !(lx >= -0.5 && ly >= -0.5 && lx < hi && ly < hi) {
            continue;
        }
        let cell = ly.round() as usize * side + lx.round() as usize;
        let logits: Vec<f64> = r.scores.iter().map(|&s| s as f64 / FINE_TEMPERATURE).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        fine += lse - logits[cell];
        sub += (r.subpixel_b.0 - t.0).powi(2) + (r.subpixel_b.1 - t.1).powi(2);
        n += 1;
    }
    if n > 0 {
        fine /= n as f64;
        sub /= n as f64;
    }
    FineLosses { fine, sub, supervised: n }
}

/// Weights of the four loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub coarse16: f64,
    pub coarse8: f64,
    pub fine: f64,
    pub sub: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            coarse16: 0.5,
            coarse8: 0.5,
            fine: 0.25,
            sub: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub coarse16: f64,
    pub coarse8: f64,
    pub fine: f64,
    pub sub: f64,
    pub total: f64,
    pub weights: LossWeights,
}

pub fn total_loss(coarse16: f64, coarse8: f64, fine: f64, sub: f64, weights: LossWeights) -> LossReport {
    let total = weights.coarse16 * coarse16 + weights.coarse8 * coarse8 + weights.fine * fine + weights.sub * sub;
    LossReport {
        coarse16,
        coarse8,
        fine,
        sub,
        total,
        weights,
    }
}
