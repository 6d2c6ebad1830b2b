//! Dense f32 tensors and the handful of kernels the pipeline is built on.
//!
//! Everything is row-major. Spatial maps are stored `H×W×C`, token lists
//! `N×C`. Every kernel sums in a fixed order, so results are bit-identical
//! between runs and independent of the rayon thread count.

use rayon::prelude::*;

use crate::error::{arg_err, dim_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err!(
                "shape {:?} holds {} values, buffer has {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Builds a tensor from a function of the flat (row-major) index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |k| if k / n == k % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(dim_err!("expected a rank-2 tensor, got {:?}", self.shape)),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(dim_err!("expected a rank-3 tensor, got {:?}", self.shape)),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let n = self.shape[self.shape.len() - 1];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn at2(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.shape[1] + j]
    }

    pub fn at3(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.shape[1] + x) * self.shape[2] + c]
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err!(
                "cannot add {:?} and {:?}",
                self.shape,
                other.shape
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest elementwise absolute difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        if self.shape != other.shape {
            return f32::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Dot product with eight fixed partial accumulators.
///
/// The lane split is part of the numeric contract: the same inputs always
/// produce the same bits.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `c = a · b` for `a: m×k`, `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(dim_err!("matmul inner dims differ: {m}x{k} · {k2}x{n}"));
    }
    let mut out = vec![0.0f32; m * n];
    if n > 0 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            let ar = &a.data[i * k..(i + 1) * k];
            for (t, &av) in ar.iter().enumerate() {
                let br = &b.data[t * n..(t + 1) * n];
                for (o, &bv) in row.iter_mut().zip(br) {
                    *o += av * bv;
                }
            }
        });
    }
    Tensor::new(vec![m, n], out)
}

/// `c = a · bᵀ` for `a: m×k`, `b: n×k`; the shape of every score matrix.
pub fn matmul_transb(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(dim_err!("matmul_transb inner dims differ: {m}x{k} · ({n}x{k2})ᵀ"));
    }
    let mut out = vec![0.0f32; m * n];
    if n > 0 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            let ar = &a.data[i * k..(i + 1) * k];
            for (j, o) in row.iter_mut().enumerate() {
                *o = dot(ar, &b.data[j * k..(j + 1) * k]);
            }
        });
    }
    Tensor::new(vec![m, n], out)
}

/// Token-wise affine map: `x: n×cin`, `w: cin×cout`, optional bias of length `cout`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&[f32]>) -> Result<Tensor> {
    let mut y = matmul(x, w)?;
    if let Some(b) = bias {
        let (_, cout) = y.dims2()?;
        if b.len() != cout {
            return Err(dim_err!("bias length {} != {}", b.len(), cout));
        }
        for row in y.data.chunks_mut(cout) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
    Ok(y)
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub fn row_softmax(x: &Tensor) -> Result<Tensor> {
    let (_, n) = x.dims2()?;
    let mut out = x.clone();
    if n > 0 {
        out.data.par_chunks_mut(n).for_each(softmax_in_place);
    }
    Ok(out)
}

/// Row-wise top-k indices, flattened `rows × k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopK {
    pub rows: usize,
    pub k: usize,
    pub indices: Vec<usize>,
}

impl TopK {
    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }
}

/// Indices of the `k` largest entries of `row`, by descending value with
/// ties going to the lower index.
pub fn topk_slice(row: &[f32], k: usize, out: &mut Vec<usize>) {
    out.clear();
    for (j, &v) in row.iter().enumerate() {
        if out.len() == k {
            // Equal values never displace an earlier (lower) index.
            if v <= row[out[k - 1]] {
                continue;
            }
            out.pop();
        }
        let pos = out.partition_point(|&o| row[o] >= v);
        out.insert(pos, j);
    }
}

pub fn topk_rows(x: &Tensor, k: usize) -> Result<TopK> {
    let (m, n) = x.dims2()?;
    if k == 0 || k > n {
        return Err(arg_err!("top-k needs 1 <= k <= {n}, got k = {k}"));
    }
    let mut indices = vec![0usize; m * k];
    indices.par_chunks_mut(k).enumerate().for_each(|(i, dst)| {
        let mut buf = Vec::with_capacity(k + 1);
        topk_slice(x.row(i), k, &mut buf);
        dst.copy_from_slice(&buf);
    });
    Ok(TopK {
        rows: m,
        k,
        indices,
    })
}

/// Convolution geometry. Weights are laid out `[out, in/groups, kh, kw]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride,
            padding,
            groups: 1,
        }
    }

    pub fn depthwise(channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels: channels,
            out_channels: channels,
            kernel: (kernel, kernel),
            stride,
            padding,
            groups: channels,
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups.max(1),
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return Err(dim_err!(
                "conv groups {} must divide in {} and out {}",
                self.groups,
                self.in_channels,
                self.out_channels
            ));
        }
        if self.stride == 0 || self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(dim_err!("conv stride and kernel must be positive"));
        }
        Ok(())
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < kh || pw < kw {
            return Err(dim_err!("input {h}x{w} smaller than kernel {kh}x{kw}"));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }
}

/// 2-D cross-correlation with zero padding on an `H×W×Cin` map.
pub fn conv2d(x: &Tensor, spec: &ConvSpec, weight: &Tensor, bias: Option<&[f32]>) -> Result<Tensor> {
    spec.validate()?;
    let (h, w, cin) = x.dims3()?;
    if cin != spec.in_channels {
        return Err(dim_err!("conv expects {} input channels, map has {cin}", spec.in_channels));
    }
    if weight.shape() != spec.weight_shape() {
        return Err(dim_err!(
            "conv weight shape {:?} does not match spec {:?}",
            weight.shape(),
            spec.weight_shape()
        ));
    }
    if let Some(b) = bias {
        if b.len() != spec.out_channels {
            return Err(dim_err!("conv bias length {} != {}", b.len(), spec.out_channels));
        }
    }
    let (oh, ow) = spec.output_size(h, w)?;
    let (kh, kw) = spec.kernel;
    let g = spec.groups;
    let cig = cin / g;
    let cog = spec.out_channels / g;
    let cout = spec.out_channels;

    // Repack to [g][ky][kx][ci][co] so the innermost loop runs over
    // contiguous output channels.
    let mut packed = vec![0.0f32; g * kh * kw * cig * cog];
    let wd = weight.data();
    for co in 0..cout {
        let (gi, col) = (co / cog, co % cog);
        for ci in 0..cig {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = ((co * cig + ci) * kh + ky) * kw + kx;
                    let dst = ((((gi * kh + ky) * kw + kx) * cig + ci) * cog) + col;
                    packed[dst] = wd[src];
                }
            }
        }
    }

    let mut out = vec![0.0f32; oh * ow * cout];
    let pad = spec.padding as isize;
    let stride = spec.stride as isize;
    out.par_chunks_mut((ow * cout).max(1))
        .enumerate()
        .for_each(|(oy, orow)| {
            for ox in 0..ow {
                let o = &mut orow[ox * cout..(ox + 1) * cout];
                if let Some(b) = bias {
                    o.copy_from_slice(b);
                }
                for ky in 0..kh {
                    let iy = oy as isize * stride - pad + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = ox as isize * stride - pad + kx as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let px = &x.data[(iy as usize * w + ix as usize) * cin..][..cin];
                        for gi in 0..g {
                            let base = ((gi * kh + ky) * kw + kx) * cig * cog;
                            let og = &mut o[gi * cog..(gi + 1) * cog];
                            for ci in 0..cig {
                                let xv = px[gi * cig + ci];
                                let wrow = &packed[base + ci * cog..base + (ci + 1) * cog];
                                for (ov, &wv) in og.iter_mut().zip(wrow) {
                                    *ov += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        });
    Tensor::new(vec![oh, ow, cout], out)
}

fn pool2(x: &Tensor, reduce: impl Fn([f32; 4]) -> f32) -> Result<Tensor> {
    let (h, w, c) = x.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(dim_err!("2x2 pooling needs even extents, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                out[(oy * ow + ox) * c + ch] = reduce([
                    x.at3(2 * oy, 2 * ox, ch),
                    x.at3(2 * oy, 2 * ox + 1, ch),
                    x.at3(2 * oy + 1, 2 * ox, ch),
                    x.at3(2 * oy + 1, 2 * ox + 1, ch),
                ]);
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

/// 2×2 max-pooling, stride 2.
pub fn maxpool2(x: &Tensor) -> Result<Tensor> {
    pool2(x, |v| v[0].max(v[1]).max(v[2]).max(v[3]))
}

/// 2×2 average pooling, stride 2.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    pool2(x, |v| ((v[0] + v[1]) + (v[2] + v[3])) * 0.25)
}

/// Bilinear resize with the align-corners=false convention: output pixel
/// `d` samples input coordinate `(d + 0.5) · in/out − 0.5`, clamped to the
/// input extent.
pub fn bilinear_resize(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (h, w, c) = x.dims3()?;
    if h == 0 || w == 0 {
        return Err(dim_err!("cannot resize an empty map"));
    }
    let taps = |o: usize, n: usize, on: usize| -> (usize, usize, f32) {
        let src = ((o as f32 + 0.5) * n as f32 / on as f32 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f32)
    };
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        let (y0, y1, fy) = taps(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = taps(ox, w, ow);
            for ch in 0..c {
                let top = x.at3(y0, x0, ch) * (1.0 - fx) + x.at3(y0, x1, ch) * fx;
                let bot = x.at3(y1, x0, ch) * (1.0 - fx) + x.at3(y1, x1, ch) * fx;
                out[(oy * ow + ox) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

pub fn bilinear_upsample2(x: &Tensor) -> Result<Tensor> {
    let (h, w, _) = x.dims3()?;
    bilinear_resize(x, 2 * h, 2 * w)
}

/// Bilinear sample of an `H×W×C` map at a fractional (cell-index) position,
/// clamped at the border.
pub fn bilinear_sample(x: &Tensor, py: f32, px: f32, out: &mut [f32]) {
    let (h, w, c) = (x.shape[0], x.shape[1], x.shape[2]);
    let cy = py.clamp(0.0, (h - 1) as f32);
    let cx = px.clamp(0.0, (w - 1) as f32);
    let y0 = (cy.floor() as usize).min(h - 1);
    let x0 = (cx.floor() as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let (fy, fx) = (cy - y0 as f32, cx - x0 as f32);
    for ch in 0..c {
        let top = x.at3(y0, x0, ch) * (1.0 - fx) + x.at3(y0, x1, ch) * fx;
        let bot = x.at3(y1, x0, ch) * (1.0 - fx) + x.at3(y1, x1, ch) * fx;
        out[ch] = top * (1.0 - fy) + bot * fy;
    }
}

fn catmull_rom(t: f32) -> [f32; 4] {
    let (t2, t3) = (t * t, t * t * t);
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

/// Catmull-Rom bicubic sample of an `H×W×C` map at a fractional
/// (cell-index) position; taps beyond the border repeat the edge.
pub fn bicubic_sample(x: &Tensor, py: f32, px: f32, out: &mut [f32]) {
    let (h, w, c) = (x.shape[0] as i64, x.shape[1] as i64, x.shape[2]);
    let (y0, x0) = (py.floor(), px.floor());
    let wy = catmull_rom(py - y0);
    let wx = catmull_rom(px - x0);
    out[..c].iter_mut().for_each(|v| *v = 0.0);
    for (i, wyi) in wy.iter().enumerate() {
        let yy = (y0 as i64 - 1 + i as i64).clamp(0, h - 1) as usize;
        for (j, wxj) in wx.iter().enumerate() {
            let xx = (x0 as i64 - 1 + j as i64).clamp(0, w - 1) as usize;
            let wgt = wyi * wxj;
            let src = &x.data[(yy * w as usize + xx) * c..(yy * w as usize + xx + 1) * c];
            for (o, v) in out.iter_mut().zip(src) {
                *o += wgt * v;
            }
        }
    }
}

/// Zero-pads the bottom/right of an `H×W×C` map.
pub fn pad_to(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (h, w, c) = x.dims3()?;
    if oh < h || ow < w {
        return Err(dim_err!("pad target {oh}x{ow} smaller than {h}x{w}"));
    }
    let mut out = vec![0.0; oh * ow * c];
    for y in 0..h {
        out[y * ow * c..(y * ow + w) * c].copy_from_slice(&x.data[y * w * c..(y + 1) * w * c]);
    }
    Tensor::new(vec![oh, ow, c], out)
}

/// Crops the top-left `oh×ow` region of an `H×W×C` map.
pub fn crop_to(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (h, w, c) = x.dims3()?;
    if oh > h || ow > w {
        return Err(dim_err!("crop target {oh}x{ow} larger than {h}x{w}"));
    }
    let mut out = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        out.extend_from_slice(&x.data[y * w * c..(y * w + ow) * c]);
    }
    Tensor::new(vec![oh, ow, c], out)
}

pub fn relu(x: f32) -> f32 {
    x.max(0.0)
}

/// GELU, tanh approximation.
pub fn gelu(x: f32) -> f32 {
    const K: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044_715 * x * x * x)).tanh())
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let m = Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(matmul(&Tensor::identity(3), &m).unwrap(), m);
        let a = Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![1., 1.]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[7, 5]);
        let b = rand_tensor(&mut rng, &[5, 3]);
        let c = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut s = 0.0f64;
                for t in 0..5 {
                    s += a.at2(i, t) as f64 * b.at2(t, j) as f64;
                }
                assert!((c.at2(i, j) as f64 - s).abs() < 1e-5);
            }
        }
        let bt = b.transpose2().unwrap();
        assert!(matmul_transb(&a, &bt).unwrap().max_abs_diff(&c) < 1e-5);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn softmax_cases() {
        let x = Tensor::full(&[1, 5], 3.0);
        for v in row_softmax(&x).unwrap().data() {
            assert!((v - 0.2).abs() < 1e-7);
        }
        let x = Tensor::new(vec![1, 2], vec![0.0, 3f32.ln()]).unwrap();
        let p = row_softmax(&x).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-7);
        assert!((p.data()[1] - 0.75).abs() < 1e-7);
    }

    #[test]
    fn softmax_matches_f64_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_fn(&[6, 9], |_| rng.random_range(-5.0..5.0));
        let p = row_softmax(&x).unwrap();
        for i in 0..6 {
            let r: Vec<f64> = x.row(i).iter().map(|&v| v as f64).collect();
            let z: f64 = r.iter().map(|v| v.exp()).sum();
            for j in 0..9 {
                assert!((p.at2(i, j) as f64 - r[j].exp() / z).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn topk_identity_and_ties() {
        let t = topk_rows(&Tensor::identity(4), 1).unwrap();
        assert_eq!(t.indices, vec![0, 1, 2, 3]);
        let x = Tensor::new(vec![1, 3], vec![5., 5., 1.]).unwrap();
        assert_eq!(topk_rows(&x, 2).unwrap().row(0), &[0, 1]);
        assert!(topk_rows(&x, 4).is_err());
        assert!(topk_rows(&x, 0).is_err());
    }

    #[test]
    fn topk_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[10, 20]);
        let t = topk_rows(&x, 8).unwrap();
        for i in 0..10 {
            let mut idx: Vec<usize> = (0..20).collect();
            idx.sort_by(|&a, &b| x.at2(i, b).partial_cmp(&x.at2(i, a)).unwrap().then(a.cmp(&b)));
            assert_eq!(t.row(i), &idx[..8]);
        }
    }

    #[test]
    fn conv_identity_and_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[4, 5, 3]);
        let spec = ConvSpec::new(3, 3, 1, 1, 0);
        let w = Tensor::from_fn(&[3, 3, 1, 1], |k| if k / 3 == k % 3 { 1.0 } else { 0.0 });
        assert_eq!(conv2d(&x, &spec, &w, None).unwrap(), x);

        let ones = Tensor::full(&[5, 5, 1], 1.0);
        let spec = ConvSpec::new(1, 1, 3, 1, 1);
        let y = conv2d(&ones, &spec, &Tensor::full(&[1, 1, 3, 3], 1.0), None).unwrap();
        assert_eq!(y.at3(2, 2, 0), 9.0);
        assert_eq!(y.at3(0, 0, 0), 4.0);
    }

    fn naive_conv(x: &Tensor, s: &ConvSpec, w: &Tensor, b: &[f32]) -> Vec<f64> {
        let (h, wd, cin) = x.dims3().unwrap();
        let (oh, ow) = s.output_size(h, wd).unwrap();
        let cig = cin / s.groups;
        let cog = s.out_channels / s.groups;
        let mut out = vec![0.0f64; oh * ow * s.out_channels];
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..s.out_channels {
                    let g = co / cog;
                    let mut acc = b[co] as f64;
                    for ci in 0..cig {
                        for ky in 0..s.kernel.0 {
                            for kx in 0..s.kernel.1 {
                                let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                                let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let wv = w.data()[((co * cig + ci) * s.kernel.0 + ky) * s.kernel.1 + kx];
                                acc += wv as f64 * x.at3(iy as usize, ix as usize, g * cig + ci) as f64;
                            }
                        }
                    }
                    out[(oy * ow + ox) * s.out_channels + co] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for spec in [
            ConvSpec::new(3, 4, 3, 2, 1),
            ConvSpec::new(4, 6, 2, 2, 0),
            ConvSpec::depthwise(4, 3, 1, 1),
            ConvSpec {
                in_channels: 4,
                out_channels: 6,
                kernel: (3, 1),
                stride: 1,
                padding: 1,
                groups: 2,
            },
        ] {
            let x = rand_tensor(&mut rng, &[7, 6, spec.in_channels]);
            let w = rand_tensor(&mut rng, &spec.weight_shape());
            let b: Vec<f32> = (0..spec.out_channels).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = conv2d(&x, &spec, &w, Some(&b)).unwrap();
            let r = naive_conv(&x, &spec, &w, &b);
            for (a, e) in y.data().iter().zip(&r) {
                assert!((*a as f64 - e).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv_rejects_bad_spec() {
        let x = Tensor::zeros(&[4, 4, 3]);
        let spec = ConvSpec {
            groups: 2,
            ..ConvSpec::new(3, 4, 3, 1, 1)
        };
        assert!(conv2d(&x, &spec, &Tensor::zeros(&[4, 1, 3, 3]), None).is_err());
        let spec = ConvSpec::new(3, 4, 3, 1, 1);
        assert!(conv2d(&x, &spec, &Tensor::zeros(&[4, 3, 1, 1]), None).is_err());
    }

    #[test]
    fn resampling_constancy_and_maxpool() {
        let c = Tensor::full(&[4, 6, 2], 1.5);
        for t in [maxpool2(&c).unwrap(), avg_pool2(&c).unwrap(), bilinear_upsample2(&c).unwrap()] {
            assert!(t.data().iter().all(|&v| v == 1.5));
        }
        let x = Tensor::new(vec![2, 2, 1], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(maxpool2(&x).unwrap().data(), &[4.0]);
        assert!(maxpool2(&Tensor::zeros(&[3, 2, 1])).is_err());
    }

    #[test]
    fn bilinear_reproduces_ramp_after_average_subsample() {
        // Averaging then upsampling is exact away from the clamped border.
        let (h, w) = (12, 16);
        let ramp = Tensor::from_fn(&[h, w, 1], |k| 0.03 * (k % w) as f32 - 0.02 * (k / w) as f32 + 0.5);
        let up = bilinear_upsample2(&avg_pool2(&ramp).unwrap()).unwrap();
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                assert!((up.at3(y, x, 0) - ramp.at3(y, x, 0)).abs() < 1e-6, "({y},{x})");
            }
        }
    }

    #[test]
    fn pad_crop_round_trip() {
        let x = Tensor::from_fn(&[3, 5, 2], |k| k as f32);
        let p = pad_to(&x, 4, 8).unwrap();
        assert_eq!(p.at3(3, 7, 1), 0.0);
        assert_eq!(crop_to(&p, 3, 5).unwrap(), x);
    }

    #[test]
    fn bicubic_interpolates_cells_and_quadratics() {
        let (h, w) = (8, 9);
        let f = |y: f32, x: f32| 0.1 * x * x - 0.2 * x * y + 0.05 * y + 1.0;
        let t = Tensor::from_fn(&[h, w, 1], |k| f((k / w) as f32, (k % w) as f32));
        let mut out = [0.0f32];
        bicubic_sample(&t, 3.0, 4.0, &mut out);
        assert_eq!(out[0], t.at3(3, 4, 0));
        // Catmull-Rom reproduces quadratics where all taps are inside.
        for &(y, x) in &[(2.3f32, 3.7f32), (4.5, 5.25), (1.1, 6.9)] {
            bicubic_sample(&t, y, x, &mut out);
            assert!((out[0] - f(y, x)).abs() < 1e-4, "({y},{x}) {} vs {}", out[0], f(y, x));
        }
    }
}
