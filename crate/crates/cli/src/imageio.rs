use std::path::Path;

use casp_core::Tensor;

/// Reads PNG or PGM/PNM as an `H×W×1` luminance tensor in `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<Tensor, String> {
    let img = image::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let luma = img.to_luma32f();
    let (w, h) = luma.dimensions();
    Tensor::new(vec![h as usize, w as usize, 1], luma.into_raw()).map_err(|e| e.to_string())
}
