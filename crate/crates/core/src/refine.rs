//! Match refinement at the original resolution.
//!
//! The 1/4 and 1/2 maps are fused top-down from the 1/8 map. Around each
//! coarse match a `w×w` window is cut from both 1/2 maps and upsampled 2×.
//! Stage one picks the B pixel whose descriptor best correlates with the
//! A-centre descriptor. Stage two tracks a grid of A pixels around the
//! centre into B (integer search seeded by the stage-one offset, then a
//! descriptor-alignment step), fits a patch homography to those tracks with
//! a weighted normalised DLT and warps the A centre through it.
//!
//! The A endpoint stays at the token's representative pixel; only the B
//! endpoint moves.

use nalgebra::Matrix3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::MatchSet;
use crate::error::{dim_err, Result};
use crate::feature::{token_pixel, FeatureMap};
use crate::geometry::{fit_homography, Pt};
use crate::layers::TopDownFuse;
use crate::tensor::{bicubic_sample, bilinear_upsample2, dot, Tensor};
use crate::weights::WeightStore;

pub const DEFAULT_WINDOW: usize = 5;
/// Half-width of the grid of A pixels tracked for the patch homography.
const TRACK_RADIUS: i64 = 3;
const ALIGN_ITERS: usize = 10;

/// Top-down fusion producing the 1/4 and 1/2 maps.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineWeights {
    pub fuse4: TopDownFuse,
    pub fuse2: TopDownFuse,
}

impl RefineWeights {
    /// `channels` are the low-level widths at 1/2, 1/4 and 1/8.
    pub fn random(rng: &mut impl Rng, channels: [usize; 3]) -> Self {
        let [c2, c4, c8] = channels;
        Self {
            fuse4: TopDownFuse::random(rng, c4, c8, c4),
            fuse2: TopDownFuse::random(rng, c2, c4, c2),
        }
    }

    pub fn export(&self, store: &mut WeightStore) {
        self.fuse4.export("refine.fuse4", store);
        self.fuse2.export("refine.fuse2", store);
    }

    pub fn import(store: &WeightStore, channels: [usize; 3]) -> Result<Self> {
        let [c2, c4, c8] = channels;
        Ok(Self {
            fuse4: TopDownFuse::import(store, "refine.fuse4", c4, c8, c4)?,
            fuse2: TopDownFuse::import(store, "refine.fuse2", c2, c4, c2)?,
        })
    }
}

/// `(1/4, 1/2)` maps from the backbone's low-level maps and the transformed
/// 1/8 map.
pub fn fuse_pyramid(
    low4: &FeatureMap,
    low2: &FeatureMap,
    f8: &FeatureMap,
    w: &RefineWeights,
) -> Result<(FeatureMap, FeatureMap)> {
    let f4 = FeatureMap::new(w.fuse4.forward(&low4.tensor, &f8.tensor)?, low4.stride)?;
    let f2 = FeatureMap::new(w.fuse2.forward(&low2.tensor, &f4.tensor)?, low2.stride)?;
    Ok((f4, f2))
}

/// Number of extra cells kept around each window so that interpolation
/// near the window edge has support.
const APRON: usize = 1;

/// `w×w` windows of the 1/2 maps around one coarse match, each stored with
/// a one-cell apron.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub window: usize,
    pub a_ext: Tensor,
    pub b_ext: Tensor,
    /// Original-resolution pixel of the upsampled window's `(0, 0)` entry.
    pub origin_a: (i64, i64),
    pub origin_b: (i64, i64),
}

impl PatchPair {
    /// Windows centred on pixels `pa` of `map_a` and `pb` of `map_b`.
    pub fn around(map_a: &FeatureMap, pa: (f32, f32), map_b: &FeatureMap, pb: (f32, f32), w: usize) -> Result<Self> {
        let (a_ext, origin_a) = crop_window(map_a, pa.0, pa.1, w, APRON)?;
        let (b_ext, origin_b) = crop_window(map_b, pb.0, pb.1, w, APRON)?;
        Ok(Self {
            window: w,
            a_ext,
            b_ext,
            origin_a,
            origin_b,
        })
    }

    /// Local index (both axes) of the A-centre pixel in the upsampled window.
    pub fn center(&self) -> usize {
        2 * (self.window / 2)
    }

    pub fn a(&self) -> Tensor {
        inner(&self.a_ext, self.window)
    }

    pub fn b(&self) -> Tensor {
        inner(&self.b_ext, self.window)
    }
}

fn inner(ext: &Tensor, w: usize) -> Tensor {
    let (side, _, c) = ext.dims3().expect("rank-3 crop");
    let m = (side - w) / 2;
    let mut out = Vec::with_capacity(w * w * c);
    for y in m..m + w {
        out.extend_from_slice(&ext.data()[(y * side + m) * c..(y * side + m + w) * c]);
    }
    Tensor::new(vec![w, w, c], out).expect("window shape")
}

fn crop_window(map: &FeatureMap, x: f32, y: f32, w: usize, margin: usize) -> Result<(Tensor, (i64, i64))> {
    if w % 2 == 0 {
        return Err(dim_err!("patch window must be odd, got {w}"));
    }
    let (h, wd, c) = map.tensor.dims3()?;
    let s = map.stride as i64;
    let (cx, cy) = ((x as i64).div_euclid(s), (y as i64).div_euclid(s));
    let half = (w / 2) as i64;
    let (ox, oy) = (cx - half, cy - half);
    let side = w + 2 * margin;
    let m = margin as i64;
    let mut out = vec![0.0f32; side * side * c];
    for py in 0..side as i64 {
        for px in 0..side as i64 {
            let (gy, gx) = (oy - m + py, ox - m + px);
            if gy < 0 || gx < 0 || gy >= h as i64 || gx >= wd as i64 {
                continue;
            }
            let src = (gy as usize * wd + gx as usize) * c;
            let dst = (py as usize * side + px as usize) * c;
            out[dst..dst + c].copy_from_slice(&map.tensor.data()[src..src + c]);
        }
    }
    Ok((Tensor::new(vec![side, side, c], out)?, (ox * s, oy * s)))
}

/// Crops the `w×w` window of a 1/2-scale map whose centre cell contains
/// pixel `(x, y)`; cells outside the map are zero. Returns the crop and the
/// pixel coordinates of its upsampled `(0, 0)` entry.
pub fn extract_patch(map: &FeatureMap, x: f32, y: f32, w: usize) -> Result<(Tensor, (i64, i64))> {
    crop_window(map, x, y, w, 0)
}

/// Patches for every coarse match of `matches`.
pub fn extract_patches(map_a: &FeatureMap, map_b: &FeatureMap, matches: &MatchSet, w: usize) -> Result<Vec<PatchPair>> {
    matches
        .matches
        .iter()
        .map(|m| {
            let pa = token_pixel(m.a, matches.grid_a.1, matches.stride);
            let pb = token_pixel(m.b, matches.grid_b.1, matches.stride);
            PatchPair::around(map_a, pa, map_b, pb, w)
        })
        .collect()
}

/// Upsamples a patch 2× and scales every descriptor to unit length (zero
/// descriptors stay zero).
fn pixel_level(patch: &Tensor) -> Result<Tensor> {
    let mut up = bilinear_upsample2(patch)?;
    let c = up.shape()[2];
    for d in up.data_mut().chunks_mut(c.max(1)) {
        normalize(d);
    }
    Ok(up)
}

fn normalize(d: &mut [f32]) {
    let n = d.iter().map(|v| v * v).sum::<f32>().sqrt();
    if n > 0.0 {
        d.iter_mut().for_each(|v| *v /= n);
    }
}

fn descriptor(t: &Tensor, x: usize, y: usize) -> &[f32] {
    let (w, c) = (t.shape()[1], t.shape()[2]);
    &t.data()[(y * w + x) * c..(y * w + x + 1) * c]
}

/// Stage one on unit-normalised pixel-level patches: correlation of the
/// A-centre descriptor with every B pixel and the argmax (lowest index on
/// ties). A flat correlation returns the centre.
pub fn pixel_argmax(a_up: &Tensor, b_up: &Tensor, center: usize) -> (usize, usize, Vec<f32>) {
    let side = b_up.shape()[0];
    let d = descriptor(a_up, center, center);
    let scores: Vec<f32> = (0..side * side)
        .map(|k| dot(d, descriptor(b_up, k % side, k / side)))
        .collect();
    let mut best = 0;
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for (k, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = k;
        }
        lo = lo.min(s);
        hi = hi.max(s);
    }
    if hi - lo <= 1e-12 {
        return (center, center, scores);
    }
    (best % side, best / side, scores)
}

/// Pixel-level correspondence: local `(x, y)` in the upsampled B window and
/// the correlation scores over all B pixels (row-major).
pub fn pixel_refine(pair: &PatchPair) -> Result<(usize, usize, Vec<f32>)> {
    let a_up = pixel_level(&pair.a())?;
    let b_up = pixel_level(&pair.b())?;
    Ok(pixel_argmax(&a_up, &b_up, pair.center()))
}

/// A refined correspondence in original-resolution pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinedMatch {
    pub a: usize,
    pub b: usize,
    pub confidence: f32,
    /// Representative pixel of the A token.
    pub pixel_a: (f64, f64),
    /// Stage-one B pixel.
    pub pixel_b: (f64, f64),
    /// Stage-one position relative to the B window centre.
    pub offset: (i32, i32),
    /// Final B position.
    pub subpixel_b: (f64, f64),
    /// Patch homography from A-centre-relative to stage-one-relative
    /// coordinates, row-major with `H[2,2] = 1`.
    pub h_patch: [f64; 9],
    /// True when the homography fit was degenerate and the mean track
    /// displacement was used instead.
    pub fallback: bool,
    pub window_origin_b: (i64, i64),
    /// Stage-one correlation over the upsampled B window, row-major.
    pub scores: Vec<f32>,
}

/// Continuous descriptor field of one window: bicubic interpolation of the
/// cell grid, addressed in window-local pixels and normalised to unit
/// length.
struct WindowField<'a> {
    ext: &'a Tensor,
    margin: f64,
}

impl WindowField<'_> {
    fn at(&self, x: f64, y: f64, out: &mut [f32]) {
        // Pixel p of the window lies at cell coordinate (p − 0.5) / 2.
        let cx = (x - 0.5) / 2.0 + self.margin;
        let cy = (y - 0.5) / 2.0 + self.margin;
        bicubic_sample(self.ext, cy as f32, cx as f32, out);
        normalize(out);
    }
}

/// Aligns descriptor `d` inside `field` starting at integer pixel `p`:
/// Gauss-Newton on `‖B(x) − d‖²` with central-difference Jacobians, the
/// solution kept within one pixel of `p` and inside the window.
fn align(field: &WindowField, side: usize, d: &[f32], p: (i64, i64)) -> (f64, f64) {
    let c = d.len();
    let hi = (side - 1) as f64;
    let (mut x, mut y) = (p.0 as f64, p.1 as f64);
    let mut v = vec![0.0; c];
    let (mut vxp, mut vxm, mut vyp, mut vym) = (vec![0.0; c], vec![0.0; c], vec![0.0; c], vec![0.0; c]);
    const STEP: f64 = 0.25;
    for _ in 0..ALIGN_ITERS {
        field.at(x, y, &mut v);
        field.at(x + STEP, y, &mut vxp);
        field.at(x - STEP, y, &mut vxm);
        field.at(x, y + STEP, &mut vyp);
        field.at(x, y - STEP, &mut vym);
        let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
        for k in 0..c {
            let gx = (vxp[k] - vxm[k]) as f64 / (2.0 * STEP);
            let gy = (vyp[k] - vym[k]) as f64 / (2.0 * STEP);
            let r = (d[k] - v[k]) as f64;
            a11 += gx * gx;
            a12 += gx * gy;
            a22 += gy * gy;
            b1 += gx * r;
            b2 += gy * r;
        }
        let damp = 1e-9 * (a11 + a22);
        let (a11, a22) = (a11 + damp, a22 + damp);
        let det = a11 * a22 - a12 * a12;
        if !(det.abs() > 1e-300) {
            break;
        }
        let dx = ((a22 * b1 - a12 * b2) / det).clamp(-0.5, 0.5);
        let dy = ((a11 * b2 - a12 * b1) / det).clamp(-0.5, 0.5);
        let nx = (x + dx).clamp(p.0 as f64 - 1.0, p.0 as f64 + 1.0).clamp(0.0, hi);
        let ny = (y + dy).clamp(p.1 as f64 - 1.0, p.1 as f64 + 1.0).clamp(0.0, hi);
        let step = (nx - x).abs().max((ny - y).abs());
        x = nx;
        y = ny;
        if step < 1e-7 {
            break;
        }
    }
    (x, y)
}

/// Point tracks `(A offset from centre, B offset from stage one, weight)`.
fn tracks(pair: &PatchPair, b0: (usize, usize)) -> Vec<(Pt, Pt, f64)> {
    let side = 2 * pair.window;
    let center = pair.center() as i64;
    let margin = APRON as f64;
    let fa = WindowField { ext: &pair.a_ext, margin };
    let fb = WindowField { ext: &pair.b_ext, margin };
    let c = pair.a_ext.shape()[2];
    let s = side as i64;
    let mut d = vec![0.0f32; c];
    let mut cand = vec![0.0f32; c];
    let mut out = Vec::new();
    for dy in -TRACK_RADIUS..=TRACK_RADIUS {
        for dx in -TRACK_RADIUS..=TRACK_RADIUS {
            let (qx, qy) = (center + dx, center + dy);
            fa.at(qx as f64, qy as f64, &mut d);
            if d.iter().all(|&v| v == 0.0) {
                continue;
            }
            let (px, py) = ((b0.0 as i64 + dx).clamp(0, s - 1), (b0.1 as i64 + dy).clamp(0, s - 1));
            // Integer search in the 3×3 neighbourhood of the predicted pixel.
            let mut best = (px, py);
            let mut best_s = f32::NEG_INFINITY;
            let mut others = Vec::with_capacity(9);
            for sy in (py - 1).max(0)..=(py + 1).min(s - 1) {
                for sx in (px - 1).max(0)..=(px + 1).min(s - 1) {
                    fb.at(sx as f64, sy as f64, &mut cand);
                    let sc = dot(&d, &cand);
                    others.push(sc);
                    if sc > best_s {
                        best_s = sc;
                        best = (sx, sy);
                    }
                }
            }
            if best.0 == 0 || best.1 == 0 || best.0 == s - 1 || best.1 == s - 1 {
                continue;
            }
            let mean_other = (others.iter().sum::<f32>() - best_s) / (others.len() - 1).max(1) as f32;
            let weight = (best_s.max(0.0) * (best_s - mean_other).max(0.0)) as f64;
            if weight <= 0.0 {
                continue;
            }
            let (x, y) = align(&fb, side, &d, best);
            out.push(((dx as f64, dy as f64), (x - b0.0 as f64, y - b0.1 as f64), weight));
        }
    }
    out
}

/// Every corner of the upsampled window, relative to the A centre, must map
/// with a positive projective denominator.
fn homography_is_valid(h: &Matrix3<f64>, center: usize, side: usize) -> bool {
    if !h.iter().all(|v| v.is_finite()) || h.determinant().abs() < 1e-12 {
        return false;
    }
    let lo = -(center as f64);
    let hi = (side - 1 - center) as f64;
    [(lo, lo), (hi, lo), (lo, hi), (hi, hi)]
        .iter()
        .all(|&(x, y)| h[(2, 0)] * x + h[(2, 1)] * y + h[(2, 2)] > 0.0)
}

/// Stage two given the stage-one pixel `b0` (window-local): the final B
/// position (window-local), the patch homography and whether the fallback
/// was taken.
pub fn subpixel_refine(pair: &PatchPair, b0: (usize, usize)) -> (Pt, Matrix3<f64>, bool) {
    let side = 2 * pair.window;
    let tr = tracks(pair, b0);
    let src: Vec<Pt> = tr.iter().map(|t| t.0).collect();
    let dst: Vec<Pt> = tr.iter().map(|t| t.1).collect();
    let w: Vec<f64> = tr.iter().map(|t| t.2).collect();
    let (h, fallback) = match fit_homography(&src, &dst, Some(&w)) {
        Ok(h) if homography_is_valid(&h, pair.center(), side) => (h, false),
        _ => {
            let wsum: f64 = w.iter().sum();
            let (mut mx, mut my) = (0.0, 0.0);
            if wsum > 0.0 {
                for ((s, d), wi) in src.iter().zip(&dst).zip(&w) {
                    mx += wi * (d.0 - s.0);
                    my += wi * (d.1 - s.1);
                }
                mx /= wsum;
                my /= wsum;
            }
            (Matrix3::new(1.0, 0.0, mx, 0.0, 1.0, my, 0.0, 0.0, 1.0), true)
        }
    };
    // Pixels cover ±0.5 around their centres, so the window spans
    // [-0.5, side - 0.5] in local coordinates.
    let hi = side as f64 - 0.5;
    let local = (
        (b0.0 as f64 + h[(0, 2)]).clamp(-0.5, hi),
        (b0.1 as f64 + h[(1, 2)]).clamp(-0.5, hi),
    );
    (local, h, fallback)
}

/// Both refinement stages for every coarse match, in input order.
pub fn refine_matches(map_a: &FeatureMap, map_b: &FeatureMap, matches: &MatchSet, w: usize) -> Result<Vec<RefinedMatch>> {
    let pairs = extract_patches(map_a, map_b, matches, w)?;
    pairs
        .par_iter()
        .zip(matches.matches.par_iter())
        .map(|(pair, m)| {
            let center = pair.center();
            let (bx, by, scores) = pixel_refine(pair)?;
            let (local, h, fallback) = subpixel_refine(pair, (bx, by));
            let (xa, ya) = token_pixel(m.a, matches.grid_a.1, matches.stride);
            let ob = pair.origin_b;
            let mut hp = [0.0; 9];
            for r in 0..3 {
                for c in 0..3 {
                    hp[r * 3 + c] = h[(r, c)];
                }
            }
            Ok(RefinedMatch {
                a: m.a,
                b: m.b,
                confidence: m.confidence,
                pixel_a: (xa as f64, ya as f64),
                pixel_b: ((ob.0 + bx as i64) as f64, (ob.1 + by as i64) as f64),
                offset: (bx as i32 - center as i32, by as i32 - center as i32),
                subpixel_b: (ob.0 as f64 + local.0, ob.1 as f64 + local.1),
                h_patch: hp,
                fallback,
                window_origin_b: ob,
                scores,
            })
        })
        .collect()
}
