use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// An `H×W×C` activation grid tagged with its stride relative to the input
/// image (2 for the 1/2 scale, 8 for 1/8, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(tensor: Tensor, stride: usize) -> Result<Self> {
        tensor.dims3()?;
        Ok(Self { tensor, stride })
    }

    /// Wraps an `N×C` token list laid out row-major over an `h×w` grid.
    pub fn from_tokens(tokens: Tensor, h: usize, w: usize, stride: usize) -> Result<Self> {
        let (n, c) = tokens.dims2()?;
        if n != h * w {
            return Err(dim_err!("{n} tokens cannot fill a {h}x{w} grid"));
        }
        Ok(Self {
            tensor: tokens.reshape(&[h, w, c])?,
            stride,
        })
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn num_tokens(&self) -> usize {
        self.height() * self.width()
    }

    pub fn token(&self, i: usize) -> &[f32] {
        let c = self.channels();
        &self.tensor.data()[i * c..(i + 1) * c]
    }

    /// Copy of the map as an `N×C` token matrix.
    pub fn tokens(&self) -> Tensor {
        let c = self.channels();
        Tensor::new(vec![self.num_tokens(), c], self.tensor.data().to_vec())
            .expect("token view of a rank-3 map")
    }

    /// Pixel-index coordinates `(x, y)` of the representative pixel of token
    /// `i` in the original image: the pixel at offset `stride/2` inside the
    /// token's cell.
    pub fn token_pixel(&self, i: usize) -> (f32, f32) {
        token_pixel(i, self.width(), self.stride)
    }
}

/// Representative pixel of token `i` on a grid of width `w` at `stride`.
pub fn token_pixel(i: usize, w: usize, stride: usize) -> (f32, f32) {
    let (ty, tx) = (i / w, i % w);
    (
        (tx * stride + stride / 2) as f32,
        (ty * stride + stride / 2) as f32,
    )
}

/// Grid cell containing a pixel-index coordinate, if inside the grid.
pub fn pixel_to_token(x: f64, y: f64, h: usize, w: usize, stride: usize) -> Option<usize> {
    let s = stride as f64;
    let tx = ((x + 0.5) / s).floor();
    let ty = ((y + 0.5) / s).floor();
    if tx < 0.0 || ty < 0.0 || tx >= w as f64 || ty >= h as f64 {
        return None;
    }
    Some(ty as usize * w + tx as usize)
}

/// Multi-scale features for one image. Each extent halves exactly between
/// consecutive levels.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub s2: FeatureMap,
    pub s4: FeatureMap,
    pub s8: FeatureMap,
    pub s16: FeatureMap,
    pub s32: FeatureMap,
}

impl FeaturePyramid {
    pub fn levels(&self) -> [&FeatureMap; 5] {
        [&self.s2, &self.s4, &self.s8, &self.s16, &self.s32]
    }
}
