//! Cascaded matching.
//!
//! One-to-many: top-k correspondence priors per 1/16 token in both views.
//! RSCA: every r×r cell of the 1/8 map attends only to the cells of its
//! priors in the other view. One-to-one: a partial softmax over the prior
//! support in each direction, thresholding and mutual argmax, all evaluated
//! without materialising the full 1/8 score matrix.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, CaspError, Result};
use crate::feature::{token_pixel, FeatureMap};
use crate::layers::{attend, Linear, MultiHeadAttention, TopDownFuse};
use crate::ops::OpCount;
use crate::tensor::{conv2d, dot, gelu, matmul_transb, topk_rows, ConvSpec, Tensor, TopK};
use crate::weights::{normal_tensor, WeightStore};

pub const MIN_K: usize = 4;
pub const DEFAULT_K: usize = 8;
pub const DEFAULT_THETA: f32 = 0.2;
pub const DEFAULT_RATIO: usize = 2;
pub const DEFAULT_RSCA_BLOCKS: usize = 2;

/// `S[i, j] = ⟨a_i, b_j⟩ / √c`.
pub fn score_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, c) = a.dims2()?;
    let s = matmul_transb(a, b)?;
    Ok(s.scale(1.0 / (c.max(1) as f32).sqrt()))
}

/// Multiply-accumulates spent by [`score_matrix`].
pub fn score_matrix_ops(n_a: usize, n_b: usize, c: usize) -> OpCount {
    OpCount {
        macs: (n_a * n_b * c) as u64,
        ..OpCount::default()
    }
}

/// Pairwise scores, either precomputed or evaluated on demand.
pub trait ScoreSource: Sync {
    fn num_a(&self) -> usize;
    fn num_b(&self) -> usize;
    fn score(&self, i: usize, j: usize) -> f32;
    /// Multiply-accumulates per call to [`ScoreSource::score`].
    fn macs_per_score(&self) -> u64;
}

impl ScoreSource for Tensor {
    fn num_a(&self) -> usize {
        self.shape()[0]
    }

    fn num_b(&self) -> usize {
        self.shape()[1]
    }

    fn score(&self, i: usize, j: usize) -> f32 {
        self.at2(i, j)
    }

    fn macs_per_score(&self) -> u64 {
        0
    }
}

/// Scores computed from token descriptors when requested. Values are
/// bit-identical to the corresponding [`score_matrix`] entries.
#[derive(Clone, Copy, Debug)]
pub struct LazyScores<'a> {
    a: &'a Tensor,
    b: &'a Tensor,
    scale: f32,
}

impl<'a> LazyScores<'a> {
    pub fn new(a: &'a Tensor, b: &'a Tensor) -> Result<Self> {
        let (_, ca) = a.dims2()?;
        let (_, cb) = b.dims2()?;
        if ca != cb {
            return Err(dim_err!("descriptor widths differ: {ca} vs {cb}"));
        }
        Ok(Self {
            a,
            b,
            scale: 1.0 / (ca.max(1) as f32).sqrt(),
        })
    }
}

impl ScoreSource for LazyScores<'_> {
    fn num_a(&self) -> usize {
        self.a.shape()[0]
    }

    fn num_b(&self) -> usize {
        self.b.shape()[0]
    }

    fn score(&self, i: usize, j: usize) -> f32 {
        dot(self.a.row(i), self.b.row(j)) * self.scale
    }

    fn macs_per_score(&self) -> u64 {
        self.a.shape()[1] as u64
    }
}

/// Top-k cross-view candidates per 1/16 token, in both directions. Each row
/// is ordered by descending score.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PriorSet {
    pub a: TopK,
    pub b: TopK,
}

impl PriorSet {
    pub fn k(&self) -> usize {
        self.a.k
    }
}

/// `π^A = top-k rows of S`, `π^B = top-k rows of Sᵀ`.
pub fn select_priors(s: &Tensor, k: usize) -> Result<PriorSet> {
    if k < MIN_K {
        return Err(arg_err!("k = {k} is below the minimum of {MIN_K}"));
    }
    let (n_a, n_b) = s.dims2()?;
    if k > n_a.min(n_b) {
        return Err(arg_err!("k = {k} exceeds the token count ({n_a} x {n_b})"));
    }
    Ok(PriorSet {
        a: topk_rows(s, k)?,
        b: topk_rows(&s.transpose2()?, k)?,
    })
}

/// Comparisons made by [`select_priors`]: every score is scanned once per
/// direction.
pub fn select_priors_ops(n_a: usize, n_b: usize) -> OpCount {
    OpCount {
        compares: 2 * (n_a * n_b) as u64,
        ..OpCount::default()
    }
}

/// `P = softmax_row(S) ⊙ softmax_col(S)`.
pub fn dual_softmax(s: &Tensor) -> Result<Tensor> {
    let (n_a, n_b) = s.dims2()?;
    let rows = crate::tensor::row_softmax(s)?;
    let cols = crate::tensor::row_softmax(&s.transpose2()?)?;
    Ok(Tensor::from_fn(&[n_a, n_b], |k| {
        let (i, j) = (k / n_b.max(1), k % n_b.max(1));
        rows.data()[k] * cols.data()[j * n_a + i]
    }))
}

fn inject_rows(p: &Tensor, transpose: bool, top: &TopK, partners: &[Vec<usize>]) -> TopK {
    let k = top.k;
    let score = |i: usize, j: usize| if transpose { p.at2(j, i) } else { p.at2(i, j) };
    let mut indices = Vec::with_capacity(top.indices.len());
    for (i, gt) in partners.iter().enumerate() {
        let pred = top.row(i);
        let mut gt = gt.clone();
        gt.sort_unstable();
        gt.dedup();
        if gt.len() > k {
            gt.sort_by(|&x, &y| score(i, y).total_cmp(&score(i, x)).then(x.cmp(&y)));
            gt.truncate(k);
        }
        let missing: Vec<usize> = gt.iter().copied().filter(|j| !pred.contains(j)).collect();
        // Drop the lowest-ranked predictions that are not GT partners.
        let mut drop = missing.len();
        let mut keep = vec![true; k];
        for s in (0..k).rev() {
            if drop == 0 {
                break;
            }
            if !gt.contains(&pred[s]) {
                keep[s] = false;
                drop -= 1;
            }
        }
        indices.extend(pred.iter().zip(&keep).filter(|(_, &kp)| kp).map(|(&j, _)| j));
        indices.extend(missing);
    }
    TopK {
        rows: top.rows,
        k,
        indices,
    }
}

/// Forces ground-truth partners into the priors: every GT partner is kept
/// and the remaining slots go to the best-ranked predictions. With more than
/// `k` partners, the `k` highest-confidence ones are kept. Rows whose
/// partners are already present are returned unchanged.
pub fn inject_ground_truth(p16: &Tensor, priors: &PriorSet, gt: &[(usize, usize)]) -> Result<PriorSet> {
    let (n_a, n_b) = p16.dims2()?;
    if priors.a.rows != n_a || priors.b.rows != n_b {
        return Err(dim_err!("priors cover {}x{} tokens, confidence is {n_a}x{n_b}", priors.a.rows, priors.b.rows));
    }
    let mut pa = vec![Vec::new(); n_a];
    let mut pb = vec![Vec::new(); n_b];
    for &(i, j) in gt {
        if i >= n_a || j >= n_b {
            return Err(CaspError::Data(format!("ground-truth pair ({i}, {j}) outside {n_a}x{n_b}")));
        }
        pa[i].push(j);
        pb[j].push(i);
    }
    Ok(PriorSet {
        a: inject_rows(p16, false, &priors.a, &pa),
        b: inject_rows(p16, true, &priors.b, &pb),
    })
}

/// Index map between a coarse grid and the fine grid `r` times denser.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleMap {
    pub r: usize,
    pub coarse_h: usize,
    pub coarse_w: usize,
    pub fine_h: usize,
    pub fine_w: usize,
}

impl ScaleMap {
    pub fn new(r: usize, fine_h: usize, fine_w: usize) -> Self {
        Self {
            r,
            coarse_h: fine_h.div_ceil(r),
            coarse_w: fine_w.div_ceil(r),
            fine_h,
            fine_w,
        }
    }

    pub fn cell_size(&self) -> usize {
        self.r * self.r
    }

    pub fn num_coarse(&self) -> usize {
        self.coarse_h * self.coarse_w
    }

    pub fn num_fine(&self) -> usize {
        self.fine_h * self.fine_w
    }

    pub fn parent(&self, i: usize) -> usize {
        let (y, x) = (i / self.fine_w, i % self.fine_w);
        (y / self.r) * self.coarse_w + x / self.r
    }

    /// Position of fine token `i` inside its parent cell.
    pub fn slot(&self, i: usize) -> usize {
        let (y, x) = (i / self.fine_w, i % self.fine_w);
        (y % self.r) * self.r + x % self.r
    }

    pub fn child(&self, p: usize, slot: usize) -> Option<usize> {
        let y = (p / self.coarse_w) * self.r + slot / self.r;
        let x = (p % self.coarse_w) * self.r + slot % self.r;
        (y < self.fine_h && x < self.fine_w).then_some(y * self.fine_w + x)
    }

    /// The `r²` children of coarse token `p`, `None` where the cell overhangs
    /// the fine grid.
    pub fn children(&self, p: usize) -> impl Iterator<Item = Option<usize>> + '_ {
        (0..self.cell_size()).map(move |s| self.child(p, s))
    }
}

/// `Split_r`: `H×W×C → (⌈H/r⌉·⌈W/r⌉)×r²×C`, zero-filling overhanging slots.
pub fn split_cells(x: &Tensor, r: usize) -> Result<Tensor> {
    let (h, w, c) = x.dims3()?;
    let map = ScaleMap::new(r, h, w);
    let mut out = vec![0.0f32; map.num_coarse() * map.cell_size() * c];
    for i in 0..h * w {
        let dst = (map.parent(i) * map.cell_size() + map.slot(i)) * c;
        out[dst..dst + c].copy_from_slice(&x.data()[i * c..(i + 1) * c]);
    }
    Tensor::new(vec![map.num_coarse(), map.cell_size(), c], out)
}

/// `Merge_r`: inverse of [`split_cells`] for an `h×w` target.
pub fn merge_cells(cells: &Tensor, r: usize, h: usize, w: usize) -> Result<Tensor> {
    let (n, s, c) = cells.dims3()?;
    let map = ScaleMap::new(r, h, w);
    if n != map.num_coarse() || s != map.cell_size() {
        return Err(dim_err!("{n} cells of {s} cannot tile {h}x{w} with r = {r}"));
    }
    let mut out = vec![0.0f32; h * w * c];
    for (i, dst) in out.chunks_mut(c.max(1)).enumerate() {
        let src = (map.parent(i) * s + map.slot(i)) * c;
        dst.copy_from_slice(&cells.data()[src..src + c]);
    }
    Tensor::new(vec![h, w, c], out)
}

/// One RSCA block: restricted cross-attention plus the convolutional FFN
/// `Conv3×3(GELU(Linear([F ‖ m])))`.
#[derive(Clone, Debug, PartialEq)]
pub struct RscaWeights {
    pub attn: MultiHeadAttention,
    pub ffn_in: Linear,
    pub conv_w: Tensor,
    pub conv_b: Vec<f32>,
}

impl RscaWeights {
    pub fn random(rng: &mut impl Rng, c: usize, heads: usize) -> Self {
        Self {
            attn: MultiHeadAttention::random(rng, c, heads),
            ffn_in: Linear::random(rng, 2 * c, 2 * c, 1.0),
            conv_w: normal_tensor(rng, &[c, 2 * c, 3, 3], 0.5 / ((18 * c) as f32).sqrt()),
            conv_b: vec![0.0; c],
        }
    }

    pub fn zeros(c: usize, heads: usize) -> Self {
        Self {
            attn: MultiHeadAttention::zeros(c, heads),
            ffn_in: Linear::zeros(2 * c, 2 * c),
            conv_w: Tensor::zeros(&[c, 2 * c, 3, 3]),
            conv_b: vec![0.0; c],
        }
    }

    pub fn channels(&self) -> usize {
        self.conv_b.len()
    }

    fn ffn(&self, f: &FeatureMap, m: &Tensor) -> Result<Tensor> {
        let (h, w, c) = f.tensor.dims3()?;
        let mut cat = Vec::with_capacity(h * w * 2 * c);
        for (a, b) in f.tensor.data().chunks(c).zip(m.data().chunks(c)) {
            cat.extend_from_slice(a);
            cat.extend_from_slice(b);
        }
        let hidden = self
            .ffn_in
            .forward(&Tensor::new(vec![h * w, 2 * c], cat)?)?
            .map(gelu)
            .reshape(&[h, w, 2 * c])?;
        conv2d(&hidden, &ConvSpec::new(2 * c, c, 3, 1, 1), &self.conv_w, Some(&self.conv_b))
    }

    pub fn export(&self, prefix: &str, store: &mut WeightStore) {
        self.attn.export(&format!("{prefix}.attn"), store);
        self.ffn_in.export(&format!("{prefix}.ffn.linear"), store);
        store.insert(format!("{prefix}.ffn.conv.weight"), self.conv_w.clone());
        store.insert(
            format!("{prefix}.ffn.conv.bias"),
            Tensor::new(vec![self.conv_b.len()], self.conv_b.clone()).expect("bias vector"),
        );
    }

    pub fn import(store: &WeightStore, prefix: &str, c: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::import(store, &format!("{prefix}.attn"), c, heads)?,
            ffn_in: Linear::import(store, &format!("{prefix}.ffn.linear"), 2 * c, 2 * c)?,
            conv_w: store.take(&format!("{prefix}.ffn.conv.weight"), &[c, 2 * c, 3, 3])?,
            conv_b: store.take_vec(&format!("{prefix}.ffn.conv.bias"), c)?,
        })
    }
}

/// Messages `m^{A←B}`: each cell of `fa` attends to the `k·r²` tokens of
/// `fb` inside the cells listed in `priors_a`. Slots of cells that overhang
/// `fb` are masked out.
pub fn rsca_messages(
    fa: &FeatureMap,
    fb: &FeatureMap,
    priors_a: &TopK,
    r: usize,
    attn: &MultiHeadAttention,
) -> Result<Tensor> {
    let (ha, wa, c) = fa.tensor.dims3()?;
    let (hb, wb, cb) = fb.tensor.dims3()?;
    if cb != c || attn.channels() != c {
        return Err(dim_err!("RSCA widths: {c}, {cb}, attention {}", attn.channels()));
    }
    let map_a = ScaleMap::new(r, ha, wa);
    let map_b = ScaleMap::new(r, hb, wb);
    if priors_a.rows != map_a.num_coarse() {
        return Err(dim_err!("{} prior rows for {} cells", priors_a.rows, map_a.num_coarse()));
    }
    if priors_a.indices.iter().any(|&p| p >= map_b.num_coarse()) {
        return Err(dim_err!("prior index outside the {} cells of the other view", map_b.num_coarse()));
    }
    let q = attn.q.forward(&fa.tokens())?;
    let kt = attn.k.forward(&fb.tokens())?;
    let vt = attn.v.forward(&fb.tokens())?;
    let cell = map_a.cell_size();
    let keys = priors_a.k * cell;
    let per_cell: Vec<Result<Vec<(usize, Vec<f32>)>>> = (0..map_a.num_coarse())
        .into_par_iter()
        .map(|p| {
            let members: Vec<usize> = map_a.children(p).flatten().collect();
            let mut qd = Vec::with_capacity(members.len() * c);
            for &i in &members {
                qd.extend_from_slice(q.row(i));
            }
            let mut kd = vec![0.0f32; keys * c];
            let mut vd = vec![0.0f32; keys * c];
            let mut mask = vec![false; keys];
            for (s, slot) in priors_a
                .row(p)
                .iter()
                .flat_map(|&pb| map_b.children(pb))
                .enumerate()
            {
                if let Some(j) = slot {
                    kd[s * c..(s + 1) * c].copy_from_slice(kt.row(j));
                    vd[s * c..(s + 1) * c].copy_from_slice(vt.row(j));
                    mask[s] = true;
                }
            }
            let out = attend(
                &Tensor::new(vec![members.len(), c], qd)?,
                &Tensor::new(vec![keys, c], kd)?,
                &Tensor::new(vec![keys, c], vd)?,
                attn.heads,
                Some(&mask),
            )?;
            Ok(members
                .iter()
                .enumerate()
                .map(|(t, &i)| (i, out.row(t).to_vec()))
                .collect())
        })
        .collect();
    let mut msg = vec![0.0f32; ha * wa * c];
    for cell in per_cell {
        for (i, row) in cell? {
            msg[i * c..(i + 1) * c].copy_from_slice(&row);
        }
    }
    let msg = attn.o.forward(&Tensor::new(vec![ha * wa, c], msg)?)?;
    msg.reshape(&[ha, wa, c])
}

/// Symmetric RSCA update; both views are updated from the input maps.
pub fn rsca_block(
    fa: &FeatureMap,
    fb: &FeatureMap,
    priors: &PriorSet,
    r: usize,
    w: &RscaWeights,
) -> Result<(FeatureMap, FeatureMap)> {
    let m_ab = rsca_messages(fa, fb, &priors.a, r, &w.attn)?;
    let m_ba = rsca_messages(fb, fa, &priors.b, r, &w.attn)?;
    let ya = fa.tensor.add(&w.ffn(fa, &m_ab)?)?;
    let yb = fb.tensor.add(&w.ffn(fb, &m_ba)?)?;
    Ok((FeatureMap::new(ya, fa.stride)?, FeatureMap::new(yb, fb.stride)?))
}

/// Partial softmax (full-length output): zero outside `support`, softmax of
/// `x` restricted to `support` inside.
pub fn partial_softmax(x: &[f32], support: &[usize]) -> Result<Vec<f32>> {
    if support.is_empty() {
        return Err(arg_err!("partial softmax over an empty support"));
    }
    if let Some(&j) = support.iter().find(|&&j| j >= x.len()) {
        return Err(arg_err!("support index {j} outside a row of {}", x.len()));
    }
    let vals: Vec<f32> = support.iter().map(|&j| x[j]).collect();
    let probs = softmax_support(&vals);
    let mut out = vec![0.0f32; x.len()];
    for (&j, p) in support.iter().zip(probs) {
        out[j] = p;
    }
    Ok(out)
}

/// Softmax of `vals`, with `-inf` entries treated as absent.
fn softmax_support(vals: &[f32]) -> Vec<f32> {
    let max = vals.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        return vec![0.0; vals.len()];
    }
    let mut out: Vec<f32> = vals.iter().map(|v| (v - max).exp()).collect();
    let sum: f32 = out.iter().sum();
    let inv = 1.0 / sum;
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

/// A coarse correspondence between 1/8 tokens.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseMatch {
    pub a: usize,
    pub b: usize,
    pub confidence: f32,
}

/// One-to-one coarse matches on the 1/8 grids, sorted by `(a, b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchSet {
    pub stride: usize,
    pub grid_a: (usize, usize),
    pub grid_b: (usize, usize),
    pub matches: Vec<CoarseMatch>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.matches.iter().map(|m| (m.a, m.b)).collect()
    }

    /// Representative pixels of every match, `((xa, ya), (xb, yb))`.
    pub fn pixel_pairs(&self) -> Vec<((f32, f32), (f32, f32))> {
        self.matches
            .iter()
            .map(|m| {
                (
                    token_pixel(m.a, self.grid_a.1, self.stride),
                    token_pixel(m.b, self.grid_b.1, self.stride),
                )
            })
            .collect()
    }
}

/// Partial-softmax confidences on the prior support of both directions.
///
/// Slot `s` of token `i`'s row is child `s % r²` of prior `s / r²`.
pub struct SparseConfidence {
    pub map_a: ScaleMap,
    pub map_b: ScaleMap,
    pub k: usize,
    row_p: Vec<f32>,
    col_p: Vec<f32>,
    pub ops: OpCount,
}

fn position(list: &[usize], v: usize, compares: &mut u64) -> Option<usize> {
    for (t, &x) in list.iter().enumerate() {
        *compares += 1;
        if x == v {
            return Some(t);
        }
    }
    None
}

impl SparseConfidence {
    pub fn compute<S: ScoreSource>(scores: &S, priors: &PriorSet, map_a: ScaleMap, map_b: ScaleMap) -> Result<Self> {
        if scores.num_a() != map_a.num_fine() || scores.num_b() != map_b.num_fine() {
            return Err(dim_err!(
                "scores {}x{} vs grids {} and {}",
                scores.num_a(),
                scores.num_b(),
                map_a.num_fine(),
                map_b.num_fine()
            ));
        }
        if map_a.r != map_b.r {
            return Err(dim_err!("scale ratios differ between views"));
        }
        if priors.a.rows != map_a.num_coarse() || priors.b.rows != map_b.num_coarse() || priors.a.k != priors.b.k {
            return Err(dim_err!("prior set does not match the coarse grids"));
        }
        let k = priors.k();
        let width = k * map_a.cell_size();
        let mac = scores.macs_per_score();
        let side = |n: usize, own: ScaleMap, other: ScaleMap, pri: &TopK, flip: bool| -> (Vec<f32>, OpCount) {
            let rows: Vec<(Vec<f32>, OpCount)> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut ops = OpCount::default();
                    let vals: Vec<f32> = pri
                        .row(own.parent(i))
                        .iter()
                        .flat_map(|&p| other.children(p))
                        .map(|slot| match slot {
                            Some(j) => {
                                ops.macs += mac;
                                ops.exps += 1;
                                ops.compares += 1;
                                if flip {
                                    scores.score(j, i)
                                } else {
                                    scores.score(i, j)
                                }
                            }
                            None => f32::NEG_INFINITY,
                        })
                        .collect();
                    (softmax_support(&vals), ops)
                })
                .collect();
            let mut out = Vec::with_capacity(n * width);
            let mut ops = OpCount::default();
            for (r, o) in rows {
                out.extend(r);
                ops += o;
            }
            (out, ops)
        };
        let (row_p, ops_a) = side(map_a.num_fine(), map_a, map_b, &priors.a, false);
        let (col_p, ops_b) = side(map_b.num_fine(), map_b, map_a, &priors.b, true);
        Ok(Self {
            map_a,
            map_b,
            k,
            row_p,
            col_p,
            ops: ops_a + ops_b,
        })
    }

    fn width(&self) -> usize {
        self.k * self.map_a.cell_size()
    }

    /// Slot of `j` in `i`'s row, given the prior list of `i`'s parent.
    fn slot_in(pri: &[usize], other: ScaleMap, j: usize, compares: &mut u64) -> Option<usize> {
        position(pri, other.parent(j), compares).map(|t| t * other.cell_size() + other.slot(j))
    }

    /// `P[i, j]`, or `None` when the pair is outside the support of either
    /// direction.
    pub fn get(&self, priors: &PriorSet, i: usize, j: usize) -> Option<f32> {
        let mut c = 0;
        let sa = Self::slot_in(priors.a.row(self.map_a.parent(i)), self.map_b, j, &mut c)?;
        let sb = Self::slot_in(priors.b.row(self.map_b.parent(j)), self.map_a, i, &mut c)?;
        Some(self.row_p[i * self.width() + sa] * self.col_p[j * self.width() + sb])
    }

    /// Best partner of every token in one direction: highest `P`, then
    /// lowest partner index.
    fn best(&self, priors: &PriorSet, from_a: bool) -> (Vec<Option<(usize, f32)>>, u64) {
        let (n, own, other, pri_own, pri_other, own_p, other_p) = if from_a {
            (self.map_a.num_fine(), self.map_a, self.map_b, &priors.a, &priors.b, &self.row_p, &self.col_p)
        } else {
            (self.map_b.num_fine(), self.map_b, self.map_a, &priors.b, &priors.a, &self.col_p, &self.row_p)
        };
        let w = self.width();
        let res: Vec<(Option<(usize, f32)>, u64)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut compares = 0u64;
                let mut best: Option<(usize, f32)> = None;
                for (s, slot) in pri_own
                    .row(own.parent(i))
                    .iter()
                    .flat_map(|&p| other.children(p))
                    .enumerate()
                {
                    let Some(j) = slot else { continue };
                    let Some(back) = Self::slot_in(pri_other.row(other.parent(j)), own, i, &mut compares) else {
                        continue;
                    };
                    let p = own_p[i * w + s] * other_p[j * w + back];
                    compares += 1;
                    best = match best {
                        Some((bj, bp)) if bp > p || (bp == p && bj < j) => Some((bj, bp)),
                        _ => Some((j, p)),
                    };
                }
                (best, compares)
            })
            .collect();
        let compares = res.iter().map(|r| r.1).sum();
        (res.into_iter().map(|r| r.0).collect(), compares)
    }

    /// Dense `n_A × n_B` confidence with zeros off the support.
    pub fn to_dense(&self, priors: &PriorSet) -> Tensor {
        let (na, nb) = (self.map_a.num_fine(), self.map_b.num_fine());
        let mut out = Tensor::zeros(&[na, nb]);
        for i in 0..na {
            for slot in priors.a.row(self.map_a.parent(i)).iter().flat_map(|&p| self.map_b.children(p)) {
                if let Some(j) = slot {
                    if let Some(p) = self.get(priors, i, j) {
                        out.data_mut()[i * nb + j] = p;
                    }
                }
            }
        }
        out
    }
}

/// Matches with their instrumentation.
#[derive(Clone, Debug)]
pub struct OneToOne {
    pub matches: MatchSet,
    pub ops: OpCount,
}

/// Mutual-argmax matching on the partial-softmax confidence with threshold
/// `theta`. Only scores inside the prior support are ever evaluated.
pub fn match_one_to_one<S: ScoreSource>(
    scores: &S,
    priors: &PriorSet,
    map_a: ScaleMap,
    map_b: ScaleMap,
    theta: f32,
) -> Result<OneToOne> {
    let conf = SparseConfidence::compute(scores, priors, map_a, map_b)?;
    let (row_best, ca) = conf.best(priors, true);
    let (col_best, cb) = conf.best(priors, false);
    let mut ops = conf.ops;
    ops.compares += ca + cb;
    let mut matches = Vec::new();
    for (i, rb) in row_best.iter().enumerate() {
        let Some((j, p)) = *rb else { continue };
        ops.compares += 2;
        if col_best[j].map(|(bi, _)| bi) == Some(i) && p >= theta {
            matches.push(CoarseMatch {
                a: i,
                b: j,
                confidence: p,
            });
        }
    }
    Ok(OneToOne {
        matches: MatchSet {
            stride: 8,
            grid_a: (map_a.fine_h, map_a.fine_w),
            grid_b: (map_b.fine_h, map_b.fine_w),
            matches,
        },
        ops,
    })
}

/// Output of the two matching phases.
#[derive(Clone, Debug)]
pub struct CascadeMatch {
    pub priors: PriorSet,
    pub matches: MatchSet,
    pub ops: OpCount,
}

/// Inference-mode matching: top-k priors from the raw 1/16 scores, then
/// one-to-one matching at 1/8 restricted to the prior support. Only the
/// sparse 1/8 scores are ever evaluated.
pub fn cascade_match(a16: &FeatureMap, b16: &FeatureMap, a8: &FeatureMap, b8: &FeatureMap, k: usize, theta: f32) -> Result<CascadeMatch> {
    let (ta16, tb16) = (a16.tokens(), b16.tokens());
    let s16 = score_matrix(&ta16, &tb16)?;
    let priors = select_priors(&s16, k)?;
    let (ta8, tb8) = (a8.tokens(), b8.tokens());
    let map_a = ScaleMap::new(DEFAULT_RATIO, a8.height(), a8.width());
    let map_b = ScaleMap::new(DEFAULT_RATIO, b8.height(), b8.width());
    if map_a.coarse_h != a16.height() || map_a.coarse_w != a16.width() || map_b.coarse_h != b16.height() || map_b.coarse_w != b16.width() {
        return Err(dim_err!("1/16 grids do not match the 1/8 grids"));
    }
    let one = match_one_to_one(&LazyScores::new(&ta8, &tb8)?, &priors, map_a, map_b, theta)?;
    let ops = score_matrix_ops(ta16.shape()[0], tb16.shape()[0], a16.channels())
        + select_priors_ops(ta16.shape()[0], tb16.shape()[0])
        + one.ops;
    let mut matches = one.matches;
    matches.stride = a8.stride;
    Ok(CascadeMatch { priors, matches, ops })
}

/// True when every pair's coarse parents are in each other's priors, i.e.
/// the pair lies inside the sparse support.
pub fn priors_cover(priors: &PriorSet, map_a: ScaleMap, map_b: ScaleMap, pairs: &[(usize, usize)]) -> bool {
    pairs.iter().all(|&(i, j)| {
        let (pa, pb) = (map_a.parent(i), map_b.parent(j));
        priors.a.row(pa).contains(&pb) && priors.b.row(pb).contains(&pa)
    })
}

/// Learnable parts of the cascade: the 1/16 → 1/8 fusion and the RSCA
/// blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeWeights {
    pub fuse8: TopDownFuse,
    pub rsca: Vec<RscaWeights>,
}

impl CascadeWeights {
    pub fn random(rng: &mut impl Rng, c8: usize, c16: usize, heads: usize, blocks: usize) -> Self {
        Self {
            fuse8: TopDownFuse::random(rng, c8, c16, c8),
            rsca: (0..blocks).map(|_| RscaWeights::random(rng, c8, heads)).collect(),
        }
    }

    pub fn export(&self, store: &mut WeightStore) {
        self.fuse8.export("cascade.fuse8", store);
        for (i, b) in self.rsca.iter().enumerate() {
            b.export(&format!("cascade.rsca.b{i}"), store);
        }
    }

    pub fn import(store: &WeightStore, c8: usize, c16: usize, heads: usize, blocks: usize) -> Result<Self> {
        Ok(Self {
            fuse8: TopDownFuse::import(store, "cascade.fuse8", c8, c16, c8)?,
            rsca: (0..blocks)
                .map(|i| RscaWeights::import(store, &format!("cascade.rsca.b{i}"), c8, heads))
                .collect::<Result<_>>()?,
        })
    }
}
