//! Cross-view interaction at 1/16 and 1/32.
//!
//! Each hybrid block runs, for both views with shared weights:
//! self aggregated attention, cross aggregated attention, cross context
//! clustering onto the other view's 1/32 tokens, and a 1/16↔1/32 fusion.
//! Views are updated simultaneously from the block's input state, so
//! swapping the inputs swaps the outputs exactly.

use rand::Rng;

use crate::backbone::{coc_cluster, coc_dispatch, CocWeights};
use crate::error::{arg_err, dim_err, Result};
use crate::feature::FeatureMap;
use crate::layers::{FeedForward, Linear, MultiHeadAttention};
use crate::tensor::{bilinear_upsample2, conv2d, crop_to, maxpool2, pad_to, ConvSpec, Tensor};
use crate::weights::{normal_tensor, WeightStore};

pub const DEFAULT_HEADS: usize = 8;
pub const DEFAULT_BLOCKS: usize = 2;

/// Attention whose queries come from a 2×2 stride-2 depthwise conv of `x`
/// and whose keys/values come from 2×2 max-pooling of `source`, so scores
/// are computed at half the resolution of the inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedAttention {
    /// Depthwise kernel `[c, 1, 2, 2]` producing the reduced queries.
    pub reduce_w: Tensor,
    pub reduce_b: Vec<f32>,
    pub attn: MultiHeadAttention,
    pub ffn: FeedForward,
}

impl AggregatedAttention {
    pub fn random(rng: &mut impl Rng, c: usize, heads: usize) -> Self {
        let mut reduce_w = normal_tensor(rng, &[c, 1, 2, 2], 0.05);
        reduce_w.data_mut().iter_mut().for_each(|v| *v += 0.25);
        Self {
            reduce_w,
            reduce_b: vec![0.0; c],
            attn: MultiHeadAttention::random(rng, c, heads),
            ffn: FeedForward::random(rng, c, 2 * c),
        }
    }

    pub fn zeros(c: usize, heads: usize) -> Self {
        Self {
            reduce_w: Tensor::zeros(&[c, 1, 2, 2]),
            reduce_b: vec![0.0; c],
            attn: MultiHeadAttention::zeros(c, heads),
            ffn: FeedForward::zeros(c, 2 * c),
        }
    }

    pub fn channels(&self) -> usize {
        self.reduce_b.len()
    }

    /// Reduced query grid from `x` (even extents).
    pub fn reduce_queries(&self, x: &Tensor) -> Result<Tensor> {
        let spec = ConvSpec::depthwise(self.channels(), 2, 2, 0);
        conv2d(x, &spec, &self.reduce_w, Some(&self.reduce_b))
    }

    /// Attention message at half resolution, before upsampling. Inputs must
    /// have even extents.
    pub fn message(&self, x: &Tensor, source: &Tensor) -> Result<Tensor> {
        let q = self.reduce_queries(x)?;
        let kv = maxpool2(source)?;
        let (qh, qw, c) = q.dims3()?;
        let (kh, kw, _) = kv.dims3()?;
        let msg = self.attn.forward(
            &q.reshape(&[qh * qw, c])?,
            &kv.reshape(&[kh * kw, c])?,
            None,
        )?;
        msg.reshape(&[qh, qw, c])
    }

    pub fn forward(&self, x: &FeatureMap, source: &FeatureMap) -> Result<FeatureMap> {
        let c = self.channels();
        if x.channels() != c || source.channels() != c {
            return Err(dim_err!("aggregated attention width {c}, got {} and {}", x.channels(), source.channels()));
        }
        let (h, w) = (x.height(), x.width());
        let even = |t: &Tensor| -> Result<Tensor> {
            let (h, w, _) = t.dims3()?;
            pad_to(t, h.next_multiple_of(2), w.next_multiple_of(2))
        };
        let msg = self.message(&even(&x.tensor)?, &even(&source.tensor)?)?;
        let up = crop_to(&bilinear_upsample2(&msg)?, h, w)?;
        let mut y = x.tensor.add(&up)?.reshape(&[h * w, c])?;
        let f = self.ffn.forward(&y)?;
        y.add_assign(&f)?;
        FeatureMap::new(y.reshape(&[h, w, c])?, x.stride)
    }

    pub fn export(&self, prefix: &str, store: &mut WeightStore) {
        store.insert(format!("{prefix}.reduce.weight"), self.reduce_w.clone());
        store.insert(
            format!("{prefix}.reduce.bias"),
            Tensor::new(vec![self.channels()], self.reduce_b.clone()).expect("bias vector"),
        );
        self.attn.export(&format!("{prefix}.attn"), store);
        self.ffn.export(&format!("{prefix}.ffn"), store);
    }

    pub fn import(store: &WeightStore, prefix: &str, c: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            reduce_w: store.take(&format!("{prefix}.reduce.weight"), &[c, 1, 2, 2])?,
            reduce_b: store.take_vec(&format!("{prefix}.reduce.bias"), c)?,
            attn: MultiHeadAttention::import(store, &format!("{prefix}.attn"), c, heads)?,
            ffn: FeedForward::import(store, &format!("{prefix}.ffn"), c, 2 * c)?,
        })
    }
}

/// Clusters the tokens of `x` onto the given anchor tokens and dispatches
/// the anchors' values back: `x + Wo·(g ⊙ V(anchor)) + bo`.
pub fn cross_coc(x: &FeatureMap, anchors: &FeatureMap, w: &CocWeights) -> Result<FeatureMap> {
    let tokens = x.tokens();
    let anchor_tokens = anchors.tokens();
    let cl = coc_cluster(&w.project_sim(&tokens)?, &w.project_sim(&anchor_tokens)?)?;
    let disp = coc_dispatch(&cl, &w.project_value(&anchor_tokens)?, w.gate)?;
    FeatureMap::from_tokens(w.residual_out(&tokens, &disp)?, x.height(), x.width(), x.stride)
}

/// 1×1 convolutions exchanging information between the two scales.
#[derive(Clone, Debug, PartialEq)]
pub struct Fusion {
    /// Applied to max-pooled 1/16 features before adding to 1/32.
    pub down: Linear,
    /// Applied to upsampled 1/32 features before adding to 1/16.
    pub up: Linear,
}

impl Fusion {
    pub fn random(rng: &mut impl Rng, c: usize) -> Self {
        Self {
            down: Linear::random(rng, c, c, 0.5),
            up: Linear::random(rng, c, c, 0.5),
        }
    }

    pub fn zeros(c: usize) -> Self {
        Self {
            down: Linear::zeros(c, c),
            up: Linear::zeros(c, c),
        }
    }

    pub fn identity(c: usize) -> Self {
        Self {
            down: Linear::identity(c),
            up: Linear::identity(c),
        }
    }
}

fn pointwise(t: &Tensor, l: &Linear) -> Result<Tensor> {
    let (h, w, c) = t.dims3()?;
    l.forward(&t.clone().reshape(&[h * w, c])?)?.reshape(&[h, w, l.out_features()])
}

/// `x32' = x32 + down(maxpool2(x16))`, `x16' = x16 + up(upsample2(x32))`,
/// both computed from the input maps.
pub fn fuse_scales(x16: &FeatureMap, x32: &FeatureMap, w: &Fusion) -> Result<(FeatureMap, FeatureMap)> {
    let (h16, w16) = (x16.height(), x16.width());
    let (h32, w32) = (x32.height(), x32.width());
    if h32 != h16.div_ceil(2) || w32 != w16.div_ceil(2) {
        return Err(dim_err!("fusion pair {h16}x{w16} / {h32}x{w32} is not a 2:1 pyramid"));
    }
    let padded = pad_to(&x16.tensor, 2 * h32, 2 * w32)?;
    let pooled = pointwise(&maxpool2(&padded)?, &w.down)?;
    let upsampled = crop_to(&bilinear_upsample2(&x32.tensor)?, h16, w16)?;
    let lifted = pointwise(&upsampled, &w.up)?;
    Ok((
        FeatureMap::new(x16.tensor.add(&lifted)?, x16.stride)?,
        FeatureMap::new(x32.tensor.add(&pooled)?, x32.stride)?,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridBlockWeights {
    pub self_attn: AggregatedAttention,
    pub cross_attn: AggregatedAttention,
    pub coc: CocWeights,
    pub fusion: Fusion,
}

impl HybridBlockWeights {
    pub fn random(rng: &mut impl Rng, c: usize, heads: usize) -> Self {
        Self {
            self_attn: AggregatedAttention::random(rng, c, heads),
            cross_attn: AggregatedAttention::random(rng, c, heads),
            coc: CocWeights::random(rng, c),
            fusion: Fusion::random(rng, c),
        }
    }

    pub fn zeros(c: usize, heads: usize) -> Self {
        Self {
            self_attn: AggregatedAttention::zeros(c, heads),
            cross_attn: AggregatedAttention::zeros(c, heads),
            coc: CocWeights::zeros(c),
            fusion: Fusion::zeros(c),
        }
    }

    fn export(&self, prefix: &str, store: &mut WeightStore) {
        self.self_attn.export(&format!("{prefix}.self_attn"), store);
        self.cross_attn.export(&format!("{prefix}.cross_attn"), store);
        self.coc.export(&format!("{prefix}.coc"), store);
        self.fusion.down.export(&format!("{prefix}.fuse.down"), store);
        self.fusion.up.export(&format!("{prefix}.fuse.up"), store);
    }

    fn import(store: &WeightStore, prefix: &str, c: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            self_attn: AggregatedAttention::import(store, &format!("{prefix}.self_attn"), c, heads)?,
            cross_attn: AggregatedAttention::import(store, &format!("{prefix}.cross_attn"), c, heads)?,
            coc: CocWeights::import(store, &format!("{prefix}.coc"), c)?,
            fusion: Fusion {
                down: Linear::import(store, &format!("{prefix}.fuse.down"), c, c)?,
                up: Linear::import(store, &format!("{prefix}.fuse.up"), c, c)?,
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionWeights {
    pub channels: usize,
    pub heads: usize,
    pub blocks: Vec<HybridBlockWeights>,
}

impl InteractionWeights {
    pub fn random(rng: &mut impl Rng, c: usize, heads: usize, blocks: usize) -> Self {
        Self {
            channels: c,
            heads,
            blocks: (0..blocks).map(|_| HybridBlockWeights::random(rng, c, heads)).collect(),
        }
    }

    pub fn zeros(c: usize, heads: usize, blocks: usize) -> Self {
        Self {
            channels: c,
            heads,
            blocks: (0..blocks).map(|_| HybridBlockWeights::zeros(c, heads)).collect(),
        }
    }

    pub fn export(&self, store: &mut WeightStore) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.export(&format!("hybrid.b{i}"), store);
        }
    }

    pub fn import(store: &WeightStore, c: usize, heads: usize, blocks: usize) -> Result<Self> {
        Ok(Self {
            channels: c,
            heads,
            blocks: (0..blocks)
                .map(|i| HybridBlockWeights::import(store, &format!("hybrid.b{i}"), c, heads))
                .collect::<Result<_>>()?,
        })
    }
}

/// Feature maps of both views carried through the hybrid blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionState {
    pub a16: FeatureMap,
    pub b16: FeatureMap,
    pub a32: FeatureMap,
    pub b32: FeatureMap,
}

impl InteractionState {
    pub fn swapped(self) -> Self {
        Self {
            a16: self.b16,
            b16: self.a16,
            a32: self.b32,
            b32: self.a32,
        }
    }
}

/// 2-D sinusoidal encoding: channel groups of four hold
/// `sin(x·ω), cos(x·ω), sin(y·ω), cos(y·ω)` with geometric frequencies.
pub fn positional_encoding(h: usize, w: usize, c: usize) -> Tensor {
    let groups = c / 4;
    let freqs: Vec<f32> = (0..groups)
        .map(|k| (-(10000f32.ln()) * (2 * k) as f32 / (c / 2).max(1) as f32).exp())
        .collect();
    let mut out = vec![0.0f32; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let px = &mut out[(y * w + x) * c..(y * w + x + 1) * c];
            for (k, &f) in freqs.iter().enumerate() {
                px[4 * k] = (x as f32 * f).sin();
                px[4 * k + 1] = (x as f32 * f).cos();
                px[4 * k + 2] = (y as f32 * f).sin();
                px[4 * k + 3] = (y as f32 * f).cos();
            }
        }
    }
    Tensor::new(vec![h, w, c], out).expect("encoding shape")
}

fn add_encoding(m: &FeatureMap) -> Result<FeatureMap> {
    let pe = positional_encoding(m.height(), m.width(), m.channels());
    FeatureMap::new(m.tensor.add(&pe)?, m.stride)
}

fn run_block(s: InteractionState, b: &HybridBlockWeights) -> Result<InteractionState> {
    let a = b.self_attn.forward(&s.a16, &s.a16)?;
    let bb = b.self_attn.forward(&s.b16, &s.b16)?;
    let (a, bb) = (b.cross_attn.forward(&a, &bb)?, b.cross_attn.forward(&bb, &a)?);
    let a = cross_coc(&a, &s.b32, &b.coc)?;
    let bb = cross_coc(&bb, &s.a32, &b.coc)?;
    let (a16, a32) = fuse_scales(&a, &s.a32, &b.fusion)?;
    let (b16, b32) = fuse_scales(&bb, &s.b32, &b.fusion)?;
    Ok(InteractionState { a16, b16, a32, b32 })
}

/// Adds the positional encoding to both 1/16 maps, then applies the first
/// `n` hybrid blocks.
pub fn run_hybrid(state: InteractionState, w: &InteractionWeights, n: usize) -> Result<InteractionState> {
    if n > w.blocks.len() {
        return Err(arg_err!("{n} hybrid blocks requested, {} available", w.blocks.len()));
    }
    for m in [&state.a16, &state.b16, &state.a32, &state.b32] {
        if m.channels() != w.channels {
            return Err(dim_err!("interaction width {}, got {}", w.channels, m.channels()));
        }
    }
    let mut s = InteractionState {
        a16: add_encoding(&state.a16)?,
        b16: add_encoding(&state.b16)?,
        ..state
    };
    for b in &w.blocks[..n] {
        s = run_block(s, b)?;
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::attention_probs;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_map(r: &mut ChaCha8Rng, h: usize, w: usize, c: usize, stride: usize) -> FeatureMap {
        FeatureMap::new(normal_tensor(r, &[h, w, c], 1.0), stride).unwrap()
    }

    #[test]
    fn single_key_returns_pooled_value() {
        let c = 8;
        let mut w = AggregatedAttention::zeros(c, 2);
        w.attn.v = Linear::identity(c);
        w.attn.o = Linear::identity(c);
        let mut r = rng(1);
        let x = normal_tensor(&mut r, &[2, 2, c], 1.0);
        let msg = w.message(&x, &x).unwrap();
        let pooled = maxpool2(&x).unwrap();
        assert_eq!(msg.shape(), &[1, 1, c]);
        assert!(msg.max_abs_diff(&pooled) < 1e-6);
    }

    #[test]
    fn message_matches_direct_oracle() {
        let (c, heads) = (16, 4);
        let mut r = rng(2);
        let w = AggregatedAttention::random(&mut r, c, heads);
        let x = normal_tensor(&mut r, &[8, 8, c], 1.0);
        let src = normal_tensor(&mut r, &[8, 8, c], 1.0);
        let got = w.message(&x, &src).unwrap();

        let lin = |t: &[f64], l: &Linear| -> Vec<f64> {
            let (ci, co) = (l.in_features(), l.out_features());
            (0..co)
                .map(|o| l.bias[o] as f64 + (0..ci).map(|i| t[i] * l.weight.at2(i, o) as f64).sum::<f64>())
                .collect()
        };
        let mut qs = Vec::new();
        let mut ks = Vec::new();
        for y in 0..4 {
            for x_ in 0..4 {
                let q: Vec<f64> = (0..c)
                    .map(|ch| {
                        let mut s = w.reduce_b[ch] as f64;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                s += w.reduce_w.data()[ch * 4 + dy * 2 + dx] as f64
                                    * x.at3(2 * y + dy, 2 * x_ + dx, ch) as f64;
                            }
                        }
                        s
                    })
                    .collect();
                let k: Vec<f64> = (0..c)
                    .map(|ch| {
                        let mut m = f64::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                m = m.max(src.at3(2 * y + dy, 2 * x_ + dx, ch) as f64);
                            }
                        }
                        m
                    })
                    .collect();
                qs.push(lin(&q, &w.attn.q));
                ks.push(k);
            }
        }
        let kp: Vec<Vec<f64>> = ks.iter().map(|k| lin(k, &w.attn.k)).collect();
        let vp: Vec<Vec<f64>> = ks.iter().map(|k| lin(k, &w.attn.v)).collect();
        let d = c / heads;
        for (i, q) in qs.iter().enumerate() {
            let mut o = vec![0.0f64; c];
            for h in 0..heads {
                let s: Vec<f64> = kp
                    .iter()
                    .map(|k| (0..d).map(|t| q[h * d + t] * k[h * d + t]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
                for (j, sj) in s.iter().enumerate() {
                    for t in 0..d {
                        o[h * d + t] += (sj - mx).exp() / z * vp[j][h * d + t];
                    }
                }
            }
            let want = lin(&o, &w.attn.o);
            for ch in 0..c {
                let g = got.data()[i * c + ch] as f64;
                assert!((g - want[ch]).abs() < 1e-5, "{g} vs {}", want[ch]);
            }
        }
    }

    #[test]
    fn odd_extents_are_preserved() {
        let mut r = rng(3);
        let w = AggregatedAttention::random(&mut r, 8, 2);
        let x = rand_map(&mut r, 5, 3, 8, 16);
        let src = rand_map(&mut r, 5, 3, 8, 16);
        let y = w.forward(&x, &src).unwrap();
        assert_eq!(y.tensor.shape(), &[5, 3, 8]);
        assert!(y.tensor.all_finite());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut r = rng(4);
        let w = AggregatedAttention::random(&mut r, 16, 4);
        let x = normal_tensor(&mut r, &[4, 4, 16], 1.0);
        let q = w.reduce_queries(&x).unwrap().reshape(&[4, 16]).unwrap();
        let k = maxpool2(&x).unwrap().reshape(&[4, 16]).unwrap();
        let probs = attention_probs(&w.attn.q.forward(&q).unwrap(), &w.attn.k.forward(&k).unwrap(), 4).unwrap();
        for p in probs {
            for i in 0..4 {
                assert!((p.row(i).iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cross_coc_degenerate_anchors_and_oracle() {
        let c = 4;
        let mut r = rng(5);
        let w = CocWeights::random(&mut r, c);
        let x = rand_map(&mut r, 3, 3, c, 16);
        let same = FeatureMap::new(Tensor::full(&[2, 2, c], 0.7), 32).unwrap();
        let y = cross_coc(&x, &same, &w).unwrap();
        let value = w.project_value(&Tensor::full(&[1, c], 0.7)).unwrap();
        for i in 0..9 {
            let sim = w.project_sim(&Tensor::new(vec![1, c], x.token(i).to_vec()).unwrap()).unwrap();
            let anc = w.project_sim(&Tensor::full(&[1, c], 0.7)).unwrap();
            let cos = crate::backbone::cosine_similarity(&sim, &anc).unwrap().data()[0] as f64;
            let g = 1.0 / (1.0 + (-(w.gate.scale as f64 * cos + w.gate.bias as f64)).exp());
            for o in 0..c {
                let mut want = x.token(i)[o] as f64 + w.out_b[o] as f64;
                for k in 0..c {
                    want += g * value.data()[k] as f64 * w.out_w.at2(k, o) as f64;
                }
                assert!((y.token(i)[o] as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cross_coc_token_equal_to_anchor_wins() {
        let c = 3;
        let mut w = CocWeights::zeros(c);
        w.sim_w = Tensor::identity(c);
        let x = FeatureMap::new(Tensor::new(vec![1, 2, c], vec![0., 1., 0., 1., 1., 0.]).unwrap(), 16).unwrap();
        let anchors = FeatureMap::new(Tensor::new(vec![1, 2, c], vec![1., 1., 0., 0., 1., 0.]).unwrap(), 32).unwrap();
        let cl = coc_cluster(&w.project_sim(&x.tokens()).unwrap(), &w.project_sim(&anchors.tokens()).unwrap()).unwrap();
        assert_eq!(cl.assignment, vec![1, 0]);
    }

    #[test]
    fn fusion_cases() {
        let c = 4;
        let mut r = rng(6);
        let x16 = rand_map(&mut r, 4, 4, c, 16);
        let zero32 = FeatureMap::new(Tensor::zeros(&[2, 2, c]), 32).unwrap();
        let (y16, y32) = fuse_scales(&x16, &zero32, &Fusion::identity(c)).unwrap();
        assert_eq!(y16, x16);
        assert_eq!(y32.tensor, maxpool2(&x16.tensor).unwrap());
        let f = Fusion::random(&mut r, c);
        let k16 = FeatureMap::new(Tensor::full(&[4, 4, c], 0.3), 16).unwrap();
        let k32 = FeatureMap::new(Tensor::full(&[2, 2, c], -0.2), 32).unwrap();
        let (a, b) = fuse_scales(&k16, &k32, &f).unwrap();
        assert_eq!(a.tensor.shape(), &[4, 4, c]);
        assert_eq!(b.tensor.shape(), &[2, 2, c]);
        for m in [&a, &b] {
            for i in 1..m.num_tokens() {
                assert_eq!(m.token(i), m.token(0));
            }
        }
    }

    fn state(r: &mut ChaCha8Rng, c: usize) -> InteractionState {
        InteractionState {
            a16: rand_map(r, 4, 6, c, 16),
            b16: rand_map(r, 4, 6, c, 16),
            a32: rand_map(r, 2, 3, c, 32),
            b32: rand_map(r, 2, 3, c, 32),
        }
    }

    #[test]
    fn view_swap_is_bit_exact() {
        let c = 16;
        let mut r = rng(7);
        let w = InteractionWeights::random(&mut r, c, 4, 2);
        let s = state(&mut r, c);
        let fwd = run_hybrid(s.clone(), &w, 2).unwrap();
        let rev = run_hybrid(s.swapped(), &w, 2).unwrap();
        assert_eq!(fwd, rev.swapped());
        assert_eq!(fwd.a16.tensor.shape(), &[4, 6, c]);
        assert_eq!(fwd.a32.tensor.shape(), &[2, 3, c]);
    }

    #[test]
    fn zero_weights_and_empty_loop_only_add_encoding() {
        let c = 16;
        let mut r = rng(8);
        let s = state(&mut r, c);
        let pe = positional_encoding(4, 6, c);
        let want = |m: &FeatureMap| m.tensor.add(&pe).unwrap();
        for (w, n) in [(InteractionWeights::zeros(c, 4, 2), 2), (InteractionWeights::random(&mut r, c, 4, 2), 0)] {
            let out = run_hybrid(s.clone(), &w, n).unwrap();
            assert!(out.a16.tensor.max_abs_diff(&want(&s.a16)) < 1e-6);
            assert!(out.b16.tensor.max_abs_diff(&want(&s.b16)) < 1e-6);
            assert_eq!(out.a32, s.a32);
            assert_eq!(out.b32, s.b32);
        }
        assert!(run_hybrid(s, &InteractionWeights::zeros(c, 4, 1), 2).is_err());
    }

    #[test]
    fn weights_round_trip() {
        let mut r = rng(9);
        let w = InteractionWeights::random(&mut r, 8, 2, 2);
        let mut store = WeightStore::new();
        w.export(&mut store);
        assert_eq!(InteractionWeights::import(&store, 8, 2, 2).unwrap(), w);
    }
}
