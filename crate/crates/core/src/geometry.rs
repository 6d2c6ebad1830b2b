//! Two-view geometry: homographies, essential matrices and pose errors.
//!
//! Point coordinates are `(x, y)` in the pixel-index convention used across
//! the crate. Poses map view-A camera coordinates into view B:
//! `X_B = R·X_A + t`.

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::error::{CaspError, Result};

pub type Pt = (f64, f64);

fn est_err(msg: impl Into<String>) -> CaspError {
    CaspError::Estimation(msg.into())
}

/// Similarity transform moving the centroid to the origin and the mean
/// distance to √2, over points with positive weight.
fn normalizer(pts: &[Pt], weights: &[f64]) -> Matrix3<f64> {
    let wsum: f64 = weights.iter().sum();
    let (mut cx, mut cy) = (0.0, 0.0);
    for (p, w) in pts.iter().zip(weights) {
        cx += w * p.0;
        cy += w * p.1;
    }
    cx /= wsum;
    cy /= wsum;
    let mean_d: f64 = pts
        .iter()
        .zip(weights)
        .map(|(p, w)| w * ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt())
        .sum::<f64>()
        / wsum;
    let s = if mean_d > 1e-300 { std::f64::consts::SQRT_2 / mean_d } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn transform(m: &Matrix3<f64>, p: Pt) -> Pt {
    let v = m * Vector3::new(p.0, p.1, 1.0);
    (v.x / v.z, v.y / v.z)
}

/// Right null vector of a design matrix (rows padded to at least nine),
/// together with the ratio of the two smallest singular values to the
/// largest.
fn null_vector(rows: &[[f64; 9]]) -> (Vec<f64>, f64, f64) {
    let n = rows.len().max(9);
    let mut a = DMatrix::<f64>::zeros(n, 9);
    for (r, row) in rows.iter().enumerate() {
        for c in 0..9 {
            a[(r, c)] = row[c];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.expect("v_t requested");
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&x, &y| sv[x].total_cmp(&sv[y]));
    let smallest = order[0];
    let largest = sv[order[order.len() - 1]].max(1e-300);
    let v = (0..9).map(|c| vt[(smallest, c)]).collect();
    (v, sv[order[0]] / largest, sv[order[1]] / largest)
}

/// Weighted normalised DLT: `dst ~ H·src`, with `H[2,2] = 1`.
pub fn fit_homography(src: &[Pt], dst: &[Pt], weights: Option<&[f64]>) -> Result<Matrix3<f64>> {
    if src.len() != dst.len() {
        return Err(est_err("source and destination point counts differ"));
    }
    let ones = vec![1.0; src.len()];
    let w = weights.unwrap_or(&ones);
    let active = w.iter().filter(|&&x| x > 0.0).count();
    if active < 4 {
        return Err(est_err(format!("homography needs 4 weighted points, got {active}")));
    }
    let ts = normalizer(src, w);
    let td = normalizer(dst, w);
    let mut rows = Vec::with_capacity(2 * src.len());
    for ((&p, &q), &wi) in src.iter().zip(dst).zip(w) {
        if wi <= 0.0 {
            continue;
        }
        let s = wi.sqrt();
        let (x, y) = transform(&ts, p);
        let (u, v) = transform(&td, q);
        rows.push([0.0, 0.0, 0.0, -x * s, -y * s, -s, v * x * s, v * y * s, v * s]);
        rows.push([x * s, y * s, s, 0.0, 0.0, 0.0, -u * x * s, -u * y * s, -u * s]);
    }
    let (h, _, second) = null_vector(&rows);
    if second < 1e-10 {
        return Err(est_err("degenerate point configuration"));
    }
    let hn = Matrix3::from_row_slice(&h);
    let td_inv = td.try_inverse().ok_or_else(|| est_err("singular normaliser"))?;
    let hm = td_inv * hn * ts;
    if hm[(2, 2)].abs() < 1e-12 {
        return Err(est_err("homography with vanishing H[2,2]"));
    }
    let hm = hm / hm[(2, 2)];
    if !hm.iter().all(|v| v.is_finite()) {
        return Err(est_err("non-finite homography"));
    }
    Ok(hm)
}

/// Maps a point; `None` when it lands at infinity.
pub fn apply_homography(h: &Matrix3<f64>, p: Pt) -> Option<Pt> {
    let v = h * Vector3::new(p.0, p.1, 1.0);
    (v.z.abs() > 1e-12).then(|| (v.x / v.z, v.y / v.z))
}

/// Mean displacement between the images of the four corners of a `w × h`
/// image under two homographies.
pub fn corner_error(h_est: &Matrix3<f64>, h_true: &Matrix3<f64>, w: f64, h: f64) -> f64 {
    [(0.0, 0.0), (w - 1.0, 0.0), (0.0, h - 1.0), (w - 1.0, h - 1.0)]
        .iter()
        .map(|&c| match (apply_homography(h_est, c), apply_homography(h_true, c)) {
            (Some(a), Some(b)) => ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt(),
            _ => f64::INFINITY,
        })
        .sum::<f64>()
        / 4.0
}

/// Distance between `H·p` and `q`, pixels.
pub fn transfer_error(h: &Matrix3<f64>, p: Pt, q: Pt) -> f64 {
    match apply_homography(h, p) {
        Some(m) => ((m.0 - q.0).powi(2) + (m.1 - q.1).powi(2)).sqrt(),
        None => f64::INFINITY,
    }
}

/// Pinhole intrinsics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn normalize(&self, p: Pt) -> Pt {
        ((p.0 - self.cx) / self.fx, (p.1 - self.cy) / self.fy)
    }

    pub fn project(&self, x: &Vector3<f64>) -> Option<Pt> {
        (x.z > 1e-12).then(|| (self.fx * x.x / x.z + self.cx, self.fy * x.y / x.z + self.cy))
    }

    pub fn unproject(&self, p: Pt, depth: f64) -> Vector3<f64> {
        let (x, y) = self.normalize(p);
        Vector3::new(x * depth, y * depth, depth)
    }
}

/// Relative pose `X_B = R·X_A + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

pub fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// `E = [t]× R`.
pub fn essential_from_pose(p: &Pose) -> Matrix3<f64> {
    skew(&p.t) * p.r
}

/// Normalised eight-point estimate of `E` from normalised image coordinates
/// (`x_Bᵀ E x_A = 0`), projected onto the essential manifold.
pub fn fit_essential(a: &[Pt], b: &[Pt]) -> Result<Matrix3<f64>> {
    if a.len() != b.len() || a.len() < 8 {
        return Err(est_err(format!("essential matrix needs 8 correspondences, got {}", a.len().min(b.len()))));
    }
    let w = vec![1.0; a.len()];
    let ta = normalizer(a, &w);
    let tb = normalizer(b, &w);
    let rows: Vec<[f64; 9]> = a
        .iter()
        .zip(b)
        .map(|(&p, &q)| {
            let (x1, y1) = transform(&ta, p);
            let (x2, y2) = transform(&tb, q);
            [x2 * x1, x2 * y1, x2, y2 * x1, y2 * y1, y2, x1, y1, 1.0]
        })
        .collect();
    let (e, _, second) = null_vector(&rows);
    if second < 1e-12 {
        return Err(est_err("degenerate eight-point configuration"));
    }
    let en = Matrix3::from_row_slice(&e);
    let e = tb.transpose() * en * ta;
    let svd = e.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = svd.singular_values;
    let mean = (s[0] + s[1]) / 2.0;
    // nalgebra sorts singular values in descending order for 3×3 inputs.
    s = Vector3::new(mean, mean, 0.0);
    let e = u * Matrix3::from_diagonal(&s) * vt;
    let n = e.norm();
    if !n.is_finite() || n < 1e-300 {
        return Err(est_err("degenerate essential matrix"));
    }
    Ok(e / n)
}

/// Sampson distance of a correspondence to the epipolar geometry of `f`
/// (pixel units when `f` is a fundamental matrix on pixel coordinates).
pub fn sampson_distance(f: &Matrix3<f64>, p: Pt, q: Pt) -> f64 {
    let x1 = Vector3::new(p.0, p.1, 1.0);
    let x2 = Vector3::new(q.0, q.1, 1.0);
    let fx1 = f * x1;
    let ftx2 = f.transpose() * x2;
    let num = x2.dot(&fx1);
    let den = fx1.x.powi(2) + fx1.y.powi(2) + ftx2.x.powi(2) + ftx2.y.powi(2);
    if den <= 0.0 {
        return f64::INFINITY;
    }
    (num * num / den).sqrt()
}

pub fn fundamental_from_essential(e: &Matrix3<f64>, ka: &Intrinsics, kb: &Intrinsics) -> Matrix3<f64> {
    let ka_inv = ka.matrix().try_inverse().expect("invertible intrinsics");
    let kb_inv = kb.matrix().try_inverse().expect("invertible intrinsics");
    kb_inv.transpose() * e * ka_inv
}

/// Linear triangulation of one normalised correspondence; returns depths in
/// view A and view B.
fn triangulate_depths(pose: &Pose, a: Pt, b: Pt) -> (f64, f64) {
    // Solve d_B·x_B = d_A·R·x_A + t in least squares for (d_A, d_B).
    let xa = Vector3::new(a.0, a.1, 1.0);
    let xb = Vector3::new(b.0, b.1, 1.0);
    let ra = pose.r * xa;
    // [ra, -xb] [dA, dB]^T = -t
    let m00 = ra.dot(&ra);
    let m01 = -ra.dot(&xb);
    let m11 = xb.dot(&xb);
    let r0 = -ra.dot(&pose.t);
    let r1 = xb.dot(&pose.t);
    let det = m00 * m11 - m01 * m01;
    if det.abs() < 1e-15 {
        return (0.0, 0.0);
    }
    ((r0 * m11 - m01 * r1) / det, (m00 * r1 - m01 * r0) / det)
}

/// Picks the pose among the four decompositions of `E` that places the
/// most correspondences in front of both cameras. Translation is unit-norm.
pub fn decompose_essential(e: &Matrix3<f64>, a: &[Pt], b: &[Pt]) -> Result<Pose> {
    let svd = e.svd(true, true);
    let mut u = svd.u.unwrap();
    let mut vt = svd.v_t.unwrap();
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * vt;
    let r2 = u * w.transpose() * vt;
    let t = u.column(2).into_owned();
    let mut best: Option<(usize, Pose)> = None;
    for pose in [
        Pose { r: r1, t },
        Pose { r: r1, t: -t },
        Pose { r: r2, t },
        Pose { r: r2, t: -t },
    ] {
        let front = a
            .iter()
            .zip(b)
            .filter(|(&p, &q)| {
                let (da, db) = triangulate_depths(&pose, p, q);
                da > 0.0 && db > 0.0
            })
            .count();
        if best.as_ref().is_none_or(|(n, _)| front > *n) {
            best = Some((front, pose));
        }
    }
    let (n, pose) = best.expect("four candidates");
    if n == 0 {
        return Err(est_err("no pose candidate satisfies cheirality"));
    }
    Ok(pose)
}

pub fn rotation_angle_deg(r: &Matrix3<f64>) -> f64 {
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Angle between two directions, folded to `[0°, 90°]` because the
/// translation sign is not observable from matches alone.
pub fn direction_angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na < 1e-300 || nb < 1e-300 {
        return 0.0;
    }
    let ang = (a.dot(b) / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees();
    ang.min(180.0 - ang)
}

/// Relative pose error: the larger of rotation and translation-direction
/// angular errors, degrees.
pub fn pose_error_deg(est: &Pose, gt: &Pose) -> f64 {
    let r_err = rotation_angle_deg(&(est.r * gt.r.transpose()));
    let t_err = if gt.t.norm() < 1e-12 { 0.0 } else { direction_angle_deg(&est.t, &gt.t) };
    r_err.max(t_err)
}

/// Rotation from an axis-angle vector (radians).
pub fn rotation_from_axis_angle(v: &Vector3<f64>) -> Matrix3<f64> {
    nalgebra::Rotation3::new(*v).into_inner()
}
