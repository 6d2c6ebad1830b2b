//! Small learnable building blocks shared by the transformer-style modules.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{dim_err, Result};
use crate::tensor::{
    bilinear_upsample2, conv2d, crop_to, dot, gelu, linear, softmax_in_place, ConvSpec, Tensor,
};
use crate::weights::{normal_tensor, WeightStore};

/// Token-wise affine map, weight stored `cin × cout`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn random(rng: &mut impl Rng, cin: usize, cout: usize, gain: f32) -> Self {
        Self {
            weight: normal_tensor(rng, &[cin, cout], gain / (cin as f32).sqrt()),
            bias: vec![0.0; cout],
        }
    }

    pub fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[cin, cout]),
            bias: vec![0.0; cout],
        }
    }

    pub fn identity(c: usize) -> Self {
        Self {
            weight: Tensor::identity(c),
            bias: vec![0.0; c],
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.weight, Some(&self.bias))
    }

    pub fn export(&self, prefix: &str, store: &mut WeightStore) {
        store.insert(format!("{prefix}.weight"), self.weight.clone());
        store.insert(
            format!("{prefix}.bias"),
            Tensor::new(vec![self.bias.len()], self.bias.clone()).expect("bias vector"),
        );
    }

    pub fn import(store: &WeightStore, prefix: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            weight: store.take(&format!("{prefix}.weight"), &[cin, cout])?,
            bias: store.take_vec(&format!("{prefix}.bias"), cout)?,
        })
    }
}

/// Scaled dot-product attention over already-projected tokens.
///
/// `q: n×c`, `k, v: m×c`; channels split into `heads` contiguous groups and
/// each head scores with `1/√d_head`. Keys with `mask[j] == false` are
/// excluded; a query whose keys are all masked receives zeros.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, mask: Option<&[bool]>) -> Result<Tensor> {
    let (n, c) = q.dims2()?;
    let (m, ck) = k.dims2()?;
    let (mv, cv) = v.dims2()?;
    if ck != c || cv != c || mv != m || heads == 0 || c % heads != 0 {
        return Err(dim_err!("attention shapes q {n}x{c}, k {m}x{ck}, v {mv}x{cv}, heads {heads}"));
    }
    if mask.is_some_and(|mk| mk.len() != m) {
        return Err(dim_err!("mask length differs from key count {m}"));
    }
    let d = c / heads;
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = vec![0.0f32; n * c];
    if c == 0 {
        return Tensor::new(vec![n, c], out);
    }
    out.par_chunks_mut(c).enumerate().for_each(|(i, orow)| {
        let qrow = q.row(i);
        let mut p = vec![0.0f32; m];
        for h in 0..heads {
            let qh = &qrow[h * d..(h + 1) * d];
            let mut any = false;
            for (j, pj) in p.iter_mut().enumerate() {
                if mask.is_none_or(|mk| mk[j]) {
                    *pj = dot(qh, &k.row(j)[h * d..(h + 1) * d]) * scale;
                    any = true;
                } else {
                    *pj = f32::NEG_INFINITY;
                }
            }
            if !any {
                continue;
            }
            softmax_in_place(&mut p);
            let oh = &mut orow[h * d..(h + 1) * d];
            for (j, &pj) in p.iter().enumerate() {
                if pj == 0.0 {
                    continue;
                }
                for (o, vv) in oh.iter_mut().zip(&v.row(j)[h * d..(h + 1) * d]) {
                    *o += pj * vv;
                }
            }
        }
    });
    Tensor::new(vec![n, c], out)
}

/// Attention probabilities of every head, `heads × (n × m)`.
pub fn attention_probs(q: &Tensor, k: &Tensor, heads: usize) -> Result<Vec<Tensor>> {
    let (n, c) = q.dims2()?;
    let (m, ck) = k.dims2()?;
    if ck != c || heads == 0 || c % heads != 0 {
        return Err(dim_err!("attention shapes q {n}x{c}, k {m}x{ck}, heads {heads}"));
    }
    let d = c / heads;
    let scale = 1.0 / (d as f32).sqrt();
    (0..heads)
        .map(|h| {
            let mut p = vec![0.0f32; n * m];
            for i in 0..n {
                let row = &mut p[i * m..(i + 1) * m];
                for (j, pj) in row.iter_mut().enumerate() {
                    *pj = dot(&q.row(i)[h * d..(h + 1) * d], &k.row(j)[h * d..(h + 1) * d]) * scale;
                }
                softmax_in_place(row);
            }
            Tensor::new(vec![n, m], p)
        })
        .collect()
}

/// Multi-head attention with learnable q/k/v/output projections.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl MultiHeadAttention {
    pub fn random(rng: &mut impl Rng, c: usize, heads: usize) -> Self {
        Self {
            heads,
            q: Linear::random(rng, c, c, 1.0),
            k: Linear::random(rng, c, c, 1.0),
            v: Linear::random(rng, c, c, 1.0),
            o: Linear::random(rng, c, c, 0.5),
        }
    }

    pub fn zeros(c: usize, heads: usize) -> Self {
        Self {
            heads,
            q: Linear::zeros(c, c),
            k: Linear::zeros(c, c),
            v: Linear::zeros(c, c),
            o: Linear::zeros(c, c),
        }
    }

    pub fn channels(&self) -> usize {
        self.q.in_features()
    }

    /// Projected message from `source` tokens to `queries` tokens.
    pub fn forward(&self, queries: &Tensor, source: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
        let q = self.q.forward(queries)?;
        let k = self.k.forward(source)?;
        let v = self.v.forward(source)?;
        self.o.forward(&attend(&q, &k, &v, self.heads, mask)?)
    }

    pub fn export(&self, prefix: &str, store: &mut WeightStore) {
        self.q.export(&format!("{prefix}.q"), store);
        self.k.export(&format!("{prefix}.k"), store);
        self.v.export(&format!("{prefix}.v"), store);
        self.o.export(&format!("{prefix}.o"), store);
    }

    pub fn import(store: &WeightStore, prefix: &str, c: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            heads,
            q: Linear::import(store, &format!("{prefix}.q"), c, c)?,
            k: Linear::import(store, &format!("{prefix}.k"), c, c)?,
            v: Linear::import(store, &format!("{prefix}.v"), c, c)?,
            o: Linear::import(store, &format!("{prefix}.o"), c, c)?,
        })
    }
}

/// Two-layer token MLP with GELU.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn random(rng: &mut impl Rng, c: usize, hidden: usize) -> Self {
        Self {
            up: Linear::random(rng, c, hidden, 1.0),
            down: Linear::random(rng, hidden, c, 0.5),
        }
    }

    pub fn zeros(c: usize, hidden: usize) -> Self {
        Self {
            up: Linear::zeros(c, hidden),
            down: Linear::zeros(hidden, c),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.map(gelu))
    }

    pub fn export(&self, prefix: &str, store: &mut WeightStore) {
        self.up.export(&format!("{prefix}.up"), store);
        self.down.export(&format!("{prefix}.down"), store);
    }

    pub fn import(store: &WeightStore, prefix: &str, c: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::import(store, &format!("{prefix}.up"), c, hidden)?,
            down: Linear::import(store, &format!("{prefix}.down"), hidden, c)?,
        })
    }
}

/// Top-down feature-pyramid step:
/// `conv3×3(lateral(low) + upsample2(top_proj(top)))`, cropped to `low`'s
/// extent.
#[derive(Clone, Debug, PartialEq)]
pub struct TopDownFuse {
    pub lateral: Linear,
    pub top: Linear,
    pub conv_w: Tensor,
    pub conv_b: Vec<f32>,
}

impl TopDownFuse {
    pub fn random(rng: &mut impl Rng, c_low: usize, c_top: usize, c_out: usize) -> Self {
        Self {
            lateral: Linear::random(rng, c_low, c_out, 1.0),
            top: Linear::random(rng, c_top, c_out, 1.0),
            conv_w: normal_tensor(rng, &[c_out, c_out, 3, 3], (1.0 / (9 * c_out) as f32).sqrt()),
            conv_b: vec![0.0; c_out],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv_b.len()
    }

    pub fn forward(&self, low: &Tensor, top: &Tensor) -> Result<Tensor> {
        let (h, w, cl) = low.dims3()?;
        let (th, tw, ct) = top.dims3()?;
        if th * 2 < h || tw * 2 < w {
            return Err(dim_err!("top map {th}x{tw} too small for {h}x{w}"));
        }
        let co = self.out_channels();
        let lat = self.lateral.forward(&low.clone().reshape(&[h * w, cl])?)?;
        let t = self.top.forward(&top.clone().reshape(&[th * tw, ct])?)?;
        let up = crop_to(&bilinear_upsample2(&t.reshape(&[th, tw, co])?)?, h, w)?;
        let sum = lat.reshape(&[h, w, co])?.add(&up)?;
        conv2d(&sum, &ConvSpec::new(co, co, 3, 1, 1), &self.conv_w, Some(&self.conv_b))
    }

    pub fn export(&self, prefix: &str, store: &mut WeightStore) {
        self.lateral.export(&format!("{prefix}.lateral"), store);
        self.top.export(&format!("{prefix}.top"), store);
        store.insert(format!("{prefix}.conv.weight"), self.conv_w.clone());
        store.insert(
            format!("{prefix}.conv.bias"),
            Tensor::new(vec![self.conv_b.len()], self.conv_b.clone()).expect("bias vector"),
        );
    }

    pub fn import(store: &WeightStore, prefix: &str, c_low: usize, c_top: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            lateral: Linear::import(store, &format!("{prefix}.lateral"), c_low, c_out)?,
            top: Linear::import(store, &format!("{prefix}.top"), c_top, c_out)?,
            conv_w: store.take(&format!("{prefix}.conv.weight"), &[c_out, c_out, 3, 3])?,
            conv_b: store.take_vec(&format!("{prefix}.conv.bias"), c_out)?,
        })
    }
}
