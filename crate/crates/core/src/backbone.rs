//! Feature extraction.
//!
//! The low-level pyramid (1/2, 1/4, 1/8) is a RepVGG-style CNN: every stage
//! opens with a stride-2 block and continues with stride-1 blocks, each block
//! summing a 3×3 branch, a 1×1 branch and (when shapes allow) an identity
//! branch before a ReLU. The high-level maps (1/16, 1/32) come from a 2×2
//! patch-merge followed by one context-cluster (CoC) block that clusters
//! points onto pooled anchors, aggregates, and dispatches back.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, CaspError, Result};
use crate::feature::{FeatureMap, FeaturePyramid};
use crate::tensor::{conv2d, linear, relu, sigmoid, ConvSpec, Tensor};
use crate::weights::{normal_tensor, normal_vec, WeightStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Full,
    Lite,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::Lite => "lite",
        })
    }
}

impl FromStr for Variant {
    type Err = CaspError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "lite" => Ok(Variant::Lite),
            other => Err(CaspError::Config(format!("unknown variant `{other}` (full|lite)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub variant: Variant,
    pub low_channels: [usize; 3],
    pub low_blocks: [usize; 3],
    pub high_channels: usize,
    /// Side of the square point cell averaged into one CoC anchor.
    pub anchor_cell: usize,
}

impl BackboneConfig {
    pub fn full() -> Self {
        Self {
            variant: Variant::Full,
            low_channels: [64, 128, 192],
            low_blocks: [2, 4, 4],
            high_channels: 256,
            anchor_cell: 2,
        }
    }

    pub fn lite() -> Self {
        Self {
            variant: Variant::Lite,
            low_channels: [64, 64, 128],
            ..Self::full()
        }
    }

    pub fn for_variant(v: Variant) -> Self {
        match v {
            Variant::Full => Self::full(),
            Variant::Lite => Self::lite(),
        }
    }

    pub fn fine_channels(&self) -> usize {
        self.low_channels[0]
    }

    pub fn coarse_channels(&self) -> usize {
        self.low_channels[2]
    }
}

const BN_EPS: f32 = 1e-5;

/// Inference-form batch normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

impl BatchNorm {
    pub fn identity(c: usize) -> Self {
        Self {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        }
    }

    fn random(rng: &mut impl Rng, c: usize, gain: f32) -> Self {
        Self {
            gamma: (0..c).map(|_| gain * rng.random_range(0.8..1.2)).collect(),
            beta: normal_vec(rng, c, 0.05),
            running_mean: normal_vec(rng, c, 0.05),
            running_var: (0..c).map(|_| rng.random_range(0.8..1.2)).collect(),
        }
    }

    /// Per-channel `(scale, shift)` equivalent to this normalisation.
    pub fn affine(&self) -> (Vec<f32>, Vec<f32>) {
        let scale: Vec<f32> = self
            .gamma
            .iter()
            .zip(&self.running_var)
            .map(|(g, v)| g / (v + BN_EPS).sqrt())
            .collect();
        let shift = self
            .beta
            .iter()
            .zip(&self.running_mean)
            .zip(&scale)
            .map(|((b, m), s)| b - m * s)
            .collect();
        (scale, shift)
    }

    fn export(&self, prefix: &str, store: &mut WeightStore) {
        let c = self.gamma.len();
        for (kind, v) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            store.insert(format!("{prefix}.{kind}"), Tensor::new(vec![c], v.clone()).unwrap());
        }
    }

    fn import(store: &WeightStore, prefix: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.take_vec(&format!("{prefix}.gamma"), c)?,
            beta: store.take_vec(&format!("{prefix}.beta"), c)?,
            running_mean: store.take_vec(&format!("{prefix}.running_mean"), c)?,
            running_var: store.take_vec(&format!("{prefix}.running_var"), c)?,
        })
    }
}

fn apply_affine(t: &mut Tensor, scale: &[f32], shift: &[f32]) {
    let c = scale.len();
    for px in t.data_mut().chunks_mut(c) {
        for ((v, s), b) in px.iter_mut().zip(scale).zip(shift) {
            *v = *v * s + b;
        }
    }
}

/// Training-form RepVGG block: 3×3 + 1×1 (+ identity) branches, each
/// followed by batch norm, summed, then ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct RepVggBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub dense: Tensor,
    pub dense_bn: BatchNorm,
    pub point: Tensor,
    pub point_bn: BatchNorm,
    pub identity_bn: Option<BatchNorm>,
}

impl RepVggBlock {
    pub fn random(rng: &mut impl Rng, cin: usize, cout: usize, stride: usize) -> Self {
        let has_identity = stride == 1 && cin == cout;
        let branches = if has_identity { 3.0f32 } else { 2.0 };
        let gain = branches.sqrt().recip();
        Self {
            in_channels: cin,
            out_channels: cout,
            stride,
            dense: normal_tensor(rng, &[cout, cin, 3, 3], (2.0 / (9 * cin) as f32).sqrt()),
            dense_bn: BatchNorm::random(rng, cout, gain),
            point: normal_tensor(rng, &[cout, cin, 1, 1], (2.0 / cin as f32).sqrt()),
            point_bn: BatchNorm::random(rng, cout, gain),
            identity_bn: has_identity.then(|| BatchNorm::random(rng, cout, gain)),
        }
    }

    fn dense_spec(&self) -> ConvSpec {
        ConvSpec::new(self.in_channels, self.out_channels, 3, self.stride, 1)
    }

    fn point_spec(&self) -> ConvSpec {
        ConvSpec::new(self.in_channels, self.out_channels, 1, self.stride, 0)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = conv2d(x, &self.dense_spec(), &self.dense, None)?;
        let (s, b) = self.dense_bn.affine();
        apply_affine(&mut y, &s, &b);
        let mut p = conv2d(x, &self.point_spec(), &self.point, None)?;
        let (s, b) = self.point_bn.affine();
        apply_affine(&mut p, &s, &b);
        y.add_assign(&p)?;
        if let Some(bn) = &self.identity_bn {
            let mut id = x.clone();
            let (s, b) = bn.affine();
            apply_affine(&mut id, &s, &b);
            y.add_assign(&id)?;
        }
        Ok(y.map(relu))
    }

    /// Structural reparameterisation into one 3×3 convolution with bias.
    pub fn fold(&self) -> FoldedConv {
        let (cin, cout) = (self.in_channels, self.out_channels);
        let (sd, bd) = self.dense_bn.affine();
        let (sp, bp) = self.point_bn.affine();
        let mut w = self.dense.clone();
        let mut bias: Vec<f32> = bd.iter().zip(&bp).map(|(a, b)| a + b).collect();
        let wd = w.data_mut();
        for co in 0..cout {
            for ci in 0..cin {
                let base = (co * cin + ci) * 9;
                for t in 0..9 {
                    wd[base + t] *= sd[co];
                }
                wd[base + 4] += self.point.data()[co * cin + ci] * sp[co];
            }
        }
        if let Some(bn) = &self.identity_bn {
            let (si, bi) = bn.affine();
            for c in 0..cout {
                wd[(c * cin + c) * 9 + 4] += si[c];
                bias[c] += bi[c];
            }
        }
        FoldedConv {
            spec: self.dense_spec(),
            weight: w,
            bias,
        }
    }

    fn export(&self, prefix: &str, store: &mut WeightStore) {
        store.insert(format!("{prefix}.dense.weight"), self.dense.clone());
        self.dense_bn.export(&format!("{prefix}.dense"), store);
        store.insert(format!("{prefix}.point.weight"), self.point.clone());
        self.point_bn.export(&format!("{prefix}.point"), store);
        if let Some(bn) = &self.identity_bn {
            bn.export(&format!("{prefix}.identity"), store);
        }
    }

    fn import(store: &WeightStore, prefix: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let has_identity = stride == 1 && cin == cout;
        Ok(Self {
            in_channels: cin,
            out_channels: cout,
            stride,
            dense: store.take(&format!("{prefix}.dense.weight"), &[cout, cin, 3, 3])?,
            dense_bn: BatchNorm::import(store, &format!("{prefix}.dense"), cout)?,
            point: store.take(&format!("{prefix}.point.weight"), &[cout, cin, 1, 1])?,
            point_bn: BatchNorm::import(store, &format!("{prefix}.point"), cout)?,
            identity_bn: if has_identity {
                Some(BatchNorm::import(store, &format!("{prefix}.identity"), cout)?)
            } else {
                None
            },
        })
    }
}

/// A reparameterised block: `relu(conv3x3(x) + bias)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldedConv {
    pub spec: ConvSpec,
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

impl FoldedConv {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(conv2d(x, &self.spec, &self.weight, Some(&self.bias))?.map(relu))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowBackbone {
    pub stages: Vec<Vec<RepVggBlock>>,
}

impl LowBackbone {
    pub fn random(cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let mut cin = 1;
        let stages = (0..3)
            .map(|s| {
                let cout = cfg.low_channels[s];
                let blocks = (0..cfg.low_blocks[s])
                    .map(|b| {
                        let blk = if b == 0 {
                            RepVggBlock::random(rng, cin, cout, 2)
                        } else {
                            RepVggBlock::random(rng, cout, cout, 1)
                        };
                        blk
                    })
                    .collect();
                cin = cout;
                blocks
            })
            .collect();
        Self { stages }
    }

    /// Maps at 1/2, 1/4 and 1/8 for an `H×W×1` image.
    pub fn forward(&self, image: &Tensor) -> Result<[Tensor; 3]> {
        let mut x = image.clone();
        let mut outs = Vec::with_capacity(3);
        for stage in &self.stages {
            for blk in stage {
                x = blk.forward(&x)?;
            }
            outs.push(x.clone());
        }
        Ok(outs.try_into().expect("three stages"))
    }

    pub fn fold(&self) -> FoldedLowBackbone {
        FoldedLowBackbone {
            stages: self
                .stages
                .iter()
                .map(|s| s.iter().map(RepVggBlock::fold).collect())
                .collect(),
        }
    }

    pub fn export(&self, store: &mut WeightStore) {
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, blk) in stage.iter().enumerate() {
                blk.export(&format!("low.s{s}.b{b}"), store);
            }
        }
    }

    pub fn import(store: &WeightStore, cfg: &BackboneConfig) -> Result<Self> {
        let mut cin = 1;
        let mut stages = Vec::new();
        for s in 0..3 {
            let cout = cfg.low_channels[s];
            let mut blocks = Vec::new();
            for b in 0..cfg.low_blocks[s] {
                let (ci, st) = if b == 0 { (cin, 2) } else { (cout, 1) };
                blocks.push(RepVggBlock::import(store, &format!("low.s{s}.b{b}"), ci, cout, st)?);
            }
            cin = cout;
            stages.push(blocks);
        }
        Ok(Self { stages })
    }

    /// Learnable parameters: conv kernels plus BN scale/shift.
    pub fn param_count(&self) -> usize {
        let mut store = WeightStore::new();
        self.export(&mut store);
        store.param_count("low.")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldedLowBackbone {
    pub stages: Vec<Vec<FoldedConv>>,
}

impl FoldedLowBackbone {
    pub fn forward(&self, image: &Tensor) -> Result<[Tensor; 3]> {
        let mut x = image.clone();
        let mut outs = Vec::with_capacity(3);
        for stage in &self.stages {
            for blk in stage {
                x = blk.forward(&x)?;
            }
            outs.push(x.clone());
        }
        Ok(outs.try_into().expect("three stages"))
    }
}

// ---------------------------------------------------------------------------
// Context clusters

/// Result of assigning every point to its most similar anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    /// Cosine similarity, `points × anchors`.
    pub similarity: Tensor,
    /// Anchor index per point.
    pub assignment: Vec<usize>,
}

impl Clustering {
    pub fn num_anchors(&self) -> usize {
        self.similarity.shape()[1]
    }

    /// Member points of every anchor's cluster, in ascending point order.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut c = vec![Vec::new(); self.num_anchors()];
        for (i, &a) in self.assignment.iter().enumerate() {
            c[a].push(i);
        }
        c
    }

    /// Similarity of each point to its own anchor.
    pub fn own_similarity(&self, i: usize) -> f32 {
        self.similarity.at2(i, self.assignment[i])
    }
}

fn l2_normalized_rows(x: &Tensor) -> Result<Tensor> {
    let (_, c) = x.dims2()?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c.max(1)) {
        let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        // Zero-norm rows stay zero and score 0 against everything.
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    Ok(out)
}

pub fn cosine_similarity(points: &Tensor, anchors: &Tensor) -> Result<Tensor> {
    crate::tensor::matmul_transb(&l2_normalized_rows(points)?, &l2_normalized_rows(anchors)?)
}

/// Assigns each point (row of `points_s`) to the anchor with the highest
/// cosine similarity, lowest anchor index on ties.
pub fn coc_cluster(points_s: &Tensor, anchors_s: &Tensor) -> Result<Clustering> {
    let (m, _) = anchors_s.dims2()?;
    if m == 0 {
        return Err(dim_err!("clustering needs at least one anchor"));
    }
    let similarity = cosine_similarity(points_s, anchors_s)?;
    let assignment = (0..similarity.shape()[0])
        .map(|i| {
            let row = similarity.row(i);
            let mut best = 0;
            for j in 1..m {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    Ok(Clustering {
        similarity,
        assignment,
    })
}

/// Updates each anchor value with its cluster members:
/// `Â[j] = (A[j] + Σ s⁺·P[k]) / (1 + Σ s⁺)` over `k ∈ C[j]`, where `s⁺` is
/// the non-negative part of the point-to-anchor similarity. An empty cluster
/// leaves its anchor unchanged.
pub fn coc_aggregate(cl: &Clustering, anchors_v: &Tensor, points_v: &Tensor) -> Result<Tensor> {
    let (m, c) = anchors_v.dims2()?;
    let (n, c2) = points_v.dims2()?;
    if c != c2 || m != cl.num_anchors() || n != cl.assignment.len() {
        return Err(dim_err!("aggregate: anchors {m}x{c}, points {n}x{c2}, clustering {}x{}", cl.assignment.len(), cl.num_anchors()));
    }
    let mut num = anchors_v.clone();
    let mut den = vec![1.0f32; m];
    for (k, &j) in cl.assignment.iter().enumerate() {
        let s = cl.similarity.at2(k, j).max(0.0);
        den[j] += s;
        let dst = &mut num.data_mut()[j * c..(j + 1) * c];
        for (d, p) in dst.iter_mut().zip(points_v.row(k)) {
            *d += s * p;
        }
    }
    for (j, row) in num.data_mut().chunks_mut(c.max(1)).enumerate() {
        row.iter_mut().for_each(|v| *v /= den[j]);
    }
    Ok(num)
}

/// Learnable affine applied to the similarity before the dispatch sigmoid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gate {
    pub scale: f32,
    pub bias: f32,
}

impl Default for Gate {
    fn default() -> Self {
        Self {
            scale: 1.0,
            bias: 0.0,
        }
    }
}

/// Sends each anchor's value back to its members:
/// `P̂[i] = sigmoid(α·S[i, a(i)] + β) · Â[a(i)]`.
pub fn coc_dispatch(cl: &Clustering, anchors_hat: &Tensor, gate: Gate) -> Result<Tensor> {
    let (m, c) = anchors_hat.dims2()?;
    if m != cl.num_anchors() {
        return Err(dim_err!("dispatch: {m} anchors vs clustering over {}", cl.num_anchors()));
    }
    let n = cl.assignment.len();
    let mut out = vec![0.0f32; n * c];
    for (i, dst) in out.chunks_mut(c.max(1)).enumerate() {
        let j = cl.assignment[i];
        let g = sigmoid(gate.scale * cl.similarity.at2(i, j) + gate.bias);
        for (d, a) in dst.iter_mut().zip(anchors_hat.row(j)) {
            *d = g * a;
        }
    }
    Tensor::new(vec![n, c], out)
}

/// Anchor grid: mean over `cell×cell` blocks of the point grid (partial
/// blocks at the border average what they cover).
pub fn pool_anchors(x: &FeatureMap, cell: usize) -> Result<(Tensor, usize, usize)> {
    let (h, w, c) = x.tensor.dims3()?;
    let (ah, aw) = (h.div_ceil(cell), w.div_ceil(cell));
    let mut out = vec![0.0f32; ah * aw * c];
    for ay in 0..ah {
        for ax in 0..aw {
            let dst = &mut out[(ay * aw + ax) * c..(ay * aw + ax + 1) * c];
            let mut count = 0.0f32;
            for y in ay * cell..((ay + 1) * cell).min(h) {
                for x_ in ax * cell..((ax + 1) * cell).min(w) {
                    count += 1.0;
                    for (d, v) in dst.iter_mut().zip(x.token(y * w + x_)) {
                        *d += v;
                    }
                }
            }
            dst.iter_mut().for_each(|v| *v /= count);
        }
    }
    Ok((Tensor::new(vec![ah * aw, c], out)?, ah, aw))
}

/// Projections of one CoC block. Points and anchors share the similarity and
/// value projections; the output projection feeds the residual.
#[derive(Clone, Debug, PartialEq)]
pub struct CocWeights {
    pub channels: usize,
    pub sim_w: Tensor,
    pub sim_b: Vec<f32>,
    pub val_w: Tensor,
    pub val_b: Vec<f32>,
    pub out_w: Tensor,
    pub out_b: Vec<f32>,
    pub gate: Gate,
}

impl CocWeights {
    pub fn random(rng: &mut impl Rng, c: usize) -> Self {
        let std = (1.0 / c as f32).sqrt();
        Self {
            channels: c,
            sim_w: normal_tensor(rng, &[c, c], std),
            sim_b: vec![0.0; c],
            val_w: normal_tensor(rng, &[c, c], std),
            val_b: vec![0.0; c],
            out_w: normal_tensor(rng, &[c, c], std * 0.5),
            out_b: vec![0.0; c],
            gate: Gate::default(),
        }
    }

    pub fn zeros(c: usize) -> Self {
        Self {
            channels: c,
            sim_w: Tensor::zeros(&[c, c]),
            sim_b: vec![0.0; c],
            val_w: Tensor::zeros(&[c, c]),
            val_b: vec![0.0; c],
            out_w: Tensor::zeros(&[c, c]),
            out_b: vec![0.0; c],
            gate: Gate::default(),
        }
    }

    pub fn project_sim(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.sim_w, Some(&self.sim_b))
    }

    pub fn project_value(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.val_w, Some(&self.val_b))
    }

    /// `x + Wo·P̂` on token matrices.
    pub fn residual_out(&self, x: &Tensor, dispatched: &Tensor) -> Result<Tensor> {
        let mut y = linear(dispatched, &self.out_w, Some(&self.out_b))?;
        y.add_assign(x)?;
        Ok(y)
    }

    /// Self-CoC: anchors are pooled from the map itself.
    pub fn self_forward(&self, x: &FeatureMap, cell: usize) -> Result<FeatureMap> {
        let tokens = x.tokens();
        let (anchors, _, _) = pool_anchors(x, cell)?;
        let cl = coc_cluster(&self.project_sim(&tokens)?, &self.project_sim(&anchors)?)?;
        let agg = coc_aggregate(&cl, &self.project_value(&anchors)?, &self.project_value(&tokens)?)?;
        let disp = coc_dispatch(&cl, &agg, self.gate)?;
        FeatureMap::from_tokens(self.residual_out(&tokens, &disp)?, x.height(), x.width(), x.stride)
    }

    pub fn export(&self, prefix: &str, store: &mut WeightStore) {
        let c = self.channels;
        store.insert(format!("{prefix}.sim.weight"), self.sim_w.clone());
        store.insert(format!("{prefix}.sim.bias"), Tensor::new(vec![c], self.sim_b.clone()).unwrap());
        store.insert(format!("{prefix}.value.weight"), self.val_w.clone());
        store.insert(format!("{prefix}.value.bias"), Tensor::new(vec![c], self.val_b.clone()).unwrap());
        store.insert(format!("{prefix}.out.weight"), self.out_w.clone());
        store.insert(format!("{prefix}.out.bias"), Tensor::new(vec![c], self.out_b.clone()).unwrap());
        store.insert(format!("{prefix}.gate.scale"), Tensor::full(&[1], self.gate.scale));
        store.insert(format!("{prefix}.gate.bias"), Tensor::full(&[1], self.gate.bias));
    }

    pub fn import(store: &WeightStore, prefix: &str, c: usize) -> Result<Self> {
        Ok(Self {
            channels: c,
            sim_w: store.take(&format!("{prefix}.sim.weight"), &[c, c])?,
            sim_b: store.take_vec(&format!("{prefix}.sim.bias"), c)?,
            val_w: store.take(&format!("{prefix}.value.weight"), &[c, c])?,
            val_b: store.take_vec(&format!("{prefix}.value.bias"), c)?,
            out_w: store.take(&format!("{prefix}.out.weight"), &[c, c])?,
            out_b: store.take_vec(&format!("{prefix}.out.bias"), c)?,
            gate: Gate {
                scale: store.take_scalar(&format!("{prefix}.gate.scale"))?,
                bias: store.take_scalar(&format!("{prefix}.gate.bias"))?,
            },
        })
    }
}

/// 2×2 stride-2 patch merge followed by a self-CoC block.
#[derive(Clone, Debug, PartialEq)]
pub struct HighStage {
    pub merge_spec: ConvSpec,
    pub merge_w: Tensor,
    pub merge_b: Vec<f32>,
    pub coc: CocWeights,
}

impl HighStage {
    fn random(rng: &mut impl Rng, cin: usize, c: usize) -> Self {
        let spec = ConvSpec::new(cin, c, 2, 2, 0);
        Self {
            merge_spec: spec,
            merge_w: normal_tensor(rng, &spec.weight_shape(), (1.0 / (4 * cin) as f32).sqrt()),
            merge_b: vec![0.0; c],
            coc: CocWeights::random(rng, c),
        }
    }

    fn forward(&self, x: &FeatureMap, cell: usize) -> Result<FeatureMap> {
        if x.height() % 2 != 0 || x.width() % 2 != 0 {
            return Err(dim_err!("patch merge needs even extents, got {}x{}", x.height(), x.width()));
        }
        let merged = conv2d(&x.tensor, &self.merge_spec, &self.merge_w, Some(&self.merge_b))?;
        self.coc.self_forward(&FeatureMap::new(merged, x.stride * 2)?, cell)
    }

    fn export(&self, prefix: &str, store: &mut WeightStore) {
        store.insert(format!("{prefix}.merge.weight"), self.merge_w.clone());
        store.insert(
            format!("{prefix}.merge.bias"),
            Tensor::new(vec![self.merge_b.len()], self.merge_b.clone()).unwrap(),
        );
        self.coc.export(&format!("{prefix}.coc"), store);
    }

    fn import(store: &WeightStore, prefix: &str, cin: usize, c: usize) -> Result<Self> {
        let spec = ConvSpec::new(cin, c, 2, 2, 0);
        Ok(Self {
            merge_spec: spec,
            merge_w: store.take(&format!("{prefix}.merge.weight"), &spec.weight_shape())?,
            merge_b: store.take_vec(&format!("{prefix}.merge.bias"), c)?,
            coc: CocWeights::import(store, &format!("{prefix}.coc"), c)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HighBackbone {
    pub s16: HighStage,
    pub s32: HighStage,
    pub anchor_cell: usize,
}

impl HighBackbone {
    pub fn random(cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        Self {
            s16: HighStage::random(rng, cfg.coarse_channels(), cfg.high_channels),
            s32: HighStage::random(rng, cfg.high_channels, cfg.high_channels),
            anchor_cell: cfg.anchor_cell,
        }
    }

    /// 1/16 and 1/32 maps from the 1/8 map.
    pub fn forward(&self, map8: &FeatureMap) -> Result<(FeatureMap, FeatureMap)> {
        let f16 = self.s16.forward(map8, self.anchor_cell)?;
        let f32_ = self.s32.forward(&f16, self.anchor_cell)?;
        Ok((f16, f32_))
    }

    pub fn export(&self, store: &mut WeightStore) {
        self.s16.export("high.s16", store);
        self.s32.export("high.s32", store);
    }

    pub fn import(store: &WeightStore, cfg: &BackboneConfig) -> Result<Self> {
        Ok(Self {
            s16: HighStage::import(store, "high.s16", cfg.coarse_channels(), cfg.high_channels)?,
            s32: HighStage::import(store, "high.s32", cfg.high_channels, cfg.high_channels)?,
            anchor_cell: cfg.anchor_cell,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub low: LowBackbone,
    pub high: HighBackbone,
    folded: FoldedLowBackbone,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, low: LowBackbone, high: HighBackbone) -> Self {
        let folded = low.fold();
        Self {
            cfg,
            low,
            high,
            folded,
        }
    }

    pub fn random(cfg: BackboneConfig, rng: &mut impl Rng) -> Self {
        let low = LowBackbone::random(&cfg, rng);
        let high = HighBackbone::random(&cfg, rng);
        Self::new(cfg, low, high)
    }

    pub fn import(store: &WeightStore, cfg: BackboneConfig) -> Result<Self> {
        let low = LowBackbone::import(store, &cfg)?;
        let high = HighBackbone::import(store, &cfg)?;
        Ok(Self::new(cfg, low, high))
    }

    pub fn export(&self, store: &mut WeightStore) {
        self.low.export(store);
        self.high.export(store);
    }

    /// Low-level maps at 1/2, 1/4, 1/8 using the folded blocks.
    pub fn extract_low(&self, image: &Tensor) -> Result<[FeatureMap; 3]> {
        let (h, w, c) = image.dims3()?;
        if c != 1 || h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(dim_err!("backbone expects a padded H×W×1 image with H, W multiples of 32, got {h}x{w}x{c}"));
        }
        let [a, b, c] = self.folded.forward(image)?;
        Ok([
            FeatureMap::new(a, 2)?,
            FeatureMap::new(b, 4)?,
            FeatureMap::new(c, 8)?,
        ])
    }

    pub fn extract_high(&self, map8: &FeatureMap) -> Result<(FeatureMap, FeatureMap)> {
        self.high.forward(map8)
    }

    pub fn forward(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let [s2, s4, s8] = self.extract_low(image)?;
        let (s16, s32) = self.extract_high(&s8)?;
        Ok(FeaturePyramid {
            s2,
            s4,
            s8,
            s16,
            s32,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn parameter_budget_matches_variants() {
        let full = LowBackbone::random(&BackboneConfig::full(), &mut rng(0)).param_count() as f64;
        let lite = LowBackbone::random(&BackboneConfig::lite(), &mut rng(0)).param_count() as f64;
        assert!((full / 2.0e6 - 1.0).abs() <= 0.10, "full = {full}");
        assert!((lite / 0.8e6 - 1.0).abs() <= 0.10, "lite = {lite}");
    }

    #[test]
    fn pyramid_extents_for_64px_input() {
        let bb = Backbone::random(BackboneConfig::lite(), &mut rng(1));
        let img = Tensor::from_fn(&[64, 64, 1], |k| ((k * 37) % 101) as f32 / 101.0);
        let p = bb.forward(&img).unwrap();
        let dims: Vec<_> = p.levels().iter().map(|m| (m.height(), m.width(), m.stride)).collect();
        assert_eq!(dims, vec![(32, 32, 2), (16, 16, 4), (8, 8, 8), (4, 4, 16), (2, 2, 32)]);
        assert_eq!(p.s16.channels(), 256);
        assert!(bb.forward(&Tensor::zeros(&[48, 64, 1])).is_err());
    }

    #[test]
    fn fold_matches_three_branch_forward() {
        let mut r = rng(2);
        for (cin, cout, stride) in [(4, 4, 1), (3, 5, 2), (1, 6, 2)] {
            let blk = RepVggBlock::random(&mut r, cin, cout, stride);
            let x = normal_tensor(&mut r, &[8, 6, cin], 1.0);
            let a = blk.forward(&x).unwrap();
            let b = blk.fold().forward(&x).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-5, "{}", a.max_abs_diff(&b));
        }
    }

    #[test]
    fn cluster_self_similarity_and_antipodes() {
        let a = Tensor::new(vec![3, 2], vec![1., 0., 0., 1., -1., -1.]).unwrap();
        let cl = coc_cluster(&a, &a).unwrap();
        assert_eq!(cl.assignment, vec![0, 1, 2]);
        for i in 0..3 {
            assert!((cl.similarity.at2(i, i) - 1.0).abs() < 1e-6);
        }
        let anchors = Tensor::new(vec![2, 2], vec![1., 0., -1., 0.]).unwrap();
        let pts = Tensor::new(vec![4, 2], vec![0.9, 0.1, 1.1, -0.2, -0.8, 0.1, -1.2, -0.1]).unwrap();
        let cl = coc_cluster(&pts, &anchors).unwrap();
        assert_eq!(cl.clusters(), vec![vec![0, 1], vec![2, 3]]);
    }

    #[test]
    fn zero_norm_point_scores_zero() {
        let pts = Tensor::zeros(&[1, 3]);
        let anchors = Tensor::new(vec![2, 3], vec![1., 2., 3., -1., 0., 1.]).unwrap();
        let cl = coc_cluster(&pts, &anchors).unwrap();
        assert_eq!(cl.similarity.data(), &[0.0, 0.0]);
        assert_eq!(cl.assignment, vec![0]);
    }

    #[test]
    fn cluster_matches_exhaustive_argmax() {
        let mut r = rng(3);
        let pts = normal_tensor(&mut r, &[50, 6], 1.0);
        let anchors = normal_tensor(&mut r, &[4, 6], 1.0);
        let cl = coc_cluster(&pts, &anchors).unwrap();
        for i in 0..50 {
            let p: Vec<f64> = pts.row(i).iter().map(|&v| v as f64).collect();
            let mut best = (f64::NEG_INFINITY, 0);
            for j in 0..4 {
                let a: Vec<f64> = anchors.row(j).iter().map(|&v| v as f64).collect();
                let dot: f64 = p.iter().zip(&a).map(|(x, y)| x * y).sum();
                let cos = dot / (p.iter().map(|x| x * x).sum::<f64>().sqrt() * a.iter().map(|x| x * x).sum::<f64>().sqrt());
                if cos > best.0 {
                    best = (cos, j);
                }
            }
            assert_eq!(cl.assignment[i], best.1);
        }
        let total: usize = cl.clusters().iter().map(Vec::len).sum();
        assert_eq!(total, 50);
    }

    #[test]
    fn aggregate_reductions() {
        // Point 0 sits exactly on anchor 0 (S = 1); anchor 1 gets nobody.
        let cl = Clustering {
            similarity: Tensor::new(vec![1, 2], vec![1.0, 0.2]).unwrap(),
            assignment: vec![0],
        };
        let av = Tensor::new(vec![2, 2], vec![2., 4., 7., 9.]).unwrap();
        let pv = Tensor::new(vec![1, 2], vec![6., 0.]).unwrap();
        let agg = coc_aggregate(&cl, &av, &pv).unwrap();
        assert_eq!(agg.row(0), &[4.0, 2.0]);
        assert_eq!(agg.row(1), av.row(1));
    }

    #[test]
    fn aggregate_matches_direct_summation() {
        let mut r = rng(4);
        let pts = normal_tensor(&mut r, &[30, 5], 1.0);
        let anchors = normal_tensor(&mut r, &[3, 5], 1.0);
        let cl = coc_cluster(&pts, &anchors).unwrap();
        let pv = normal_tensor(&mut r, &[30, 4], 1.0);
        let av = normal_tensor(&mut r, &[3, 4], 1.0);
        let agg = coc_aggregate(&cl, &av, &pv).unwrap();
        for j in 0..3 {
            let mut num: Vec<f64> = av.row(j).iter().map(|&v| v as f64).collect();
            let mut den = 1.0f64;
            for k in 0..30 {
                if cl.assignment[k] == j {
                    let s = (cl.similarity.at2(k, j) as f64).max(0.0);
                    den += s;
                    for (n, p) in num.iter_mut().zip(pv.row(k)) {
                        *n += s * *p as f64;
                    }
                }
            }
            for (c, n) in num.iter().enumerate() {
                assert!((agg.at2(j, c) as f64 - n / den).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn dispatch_gate_and_degenerate_anchors() {
        let cl = Clustering {
            similarity: Tensor::zeros(&[2, 1]),
            assignment: vec![0, 0],
        };
        let ah = Tensor::new(vec![1, 2], vec![2., -4.]).unwrap();
        let d = coc_dispatch(&cl, &ah, Gate::default()).unwrap();
        assert_eq!(d.data(), &[1.0, -2.0, 1.0, -2.0]);

        let mut r = rng(5);
        let pts = normal_tensor(&mut r, &[12, 4], 1.0);
        let anchors = normal_tensor(&mut r, &[3, 4], 1.0);
        let cl = coc_cluster(&pts, &anchors).unwrap();
        let ah = normal_tensor(&mut r, &[3, 6], 1.0);
        let gate = Gate { scale: 1.7, bias: -0.3 };
        let d = coc_dispatch(&cl, &ah, gate).unwrap();
        for i in 0..12 {
            let j = cl.assignment[i];
            let g = 1.0 / (1.0 + (-(1.7 * cl.similarity.at2(i, j) as f64 - 0.3)).exp());
            for c in 0..6 {
                assert!((d.at2(i, c) as f64 - g * ah.at2(j, c) as f64).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn high_extraction_shapes_and_constancy() {
        let cfg = BackboneConfig::full();
        let high = HighBackbone::random(&cfg, &mut rng(6));
        let m8 = FeatureMap::new(Tensor::full(&[8, 8, 192], 0.3), 8).unwrap();
        let (f16, f32_) = high.forward(&m8).unwrap();
        assert_eq!(f16.tensor.shape(), &[4, 4, 256]);
        assert_eq!(f32_.tensor.shape(), &[2, 2, 256]);
        for m in [&f16, &f32_] {
            for i in 1..m.num_tokens() {
                assert_eq!(m.token(i), m.token(0));
            }
        }
        let (anchors, ah, aw) = pool_anchors(&f16, 2).unwrap();
        assert_eq!((anchors.shape()[0], ah, aw), (4, 2, 2));
    }

    #[test]
    fn weights_round_trip_through_store() {
        let bb = Backbone::random(BackboneConfig::lite(), &mut rng(7));
        let mut store = WeightStore::new();
        bb.export(&mut store);
        let back = Backbone::import(&store, BackboneConfig::lite()).unwrap();
        assert_eq!(back.low, bb.low);
        assert_eq!(back.high, bb.high);
        assert!(Backbone::import(&store, BackboneConfig::full()).is_err());
    }
}
