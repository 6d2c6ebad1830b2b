//! End-to-end matching of two grayscale images.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::cascade::{
    dual_softmax, match_one_to_one, rsca_block, score_matrix, score_matrix_ops, select_priors, select_priors_ops,
    CascadeWeights, LazyScores, MatchSet, PriorSet, ScaleMap, SparseConfidence, DEFAULT_RATIO,
};
use crate::config::{Mode, PadPolicy, PipelineConfig};
use crate::error::{dim_err, CaspError, Result};
use crate::feature::FeatureMap;
use crate::interaction::{run_hybrid, InteractionState, InteractionWeights};
use crate::ops::OpCount;
use crate::refine::{fuse_pyramid, refine_matches, RefineWeights, RefinedMatch};
use crate::tensor::{pad_to, Tensor};
use crate::weights::WeightStore;

/// All learnable parameters.
#[derive(Clone, Debug)]
pub struct PipelineWeights {
    pub backbone: Backbone,
    pub interaction: InteractionWeights,
    pub cascade: CascadeWeights,
    pub refine: RefineWeights,
}

impl PipelineWeights {
    /// Seeded random parameters: a structural stand-in for trained weights.
    pub fn random(cfg: &PipelineConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let bc = BackboneConfig::for_variant(cfg.variant);
        let (c2, c4, c8, c16) = (bc.low_channels[0], bc.low_channels[1], bc.low_channels[2], bc.high_channels);
        let backbone = Backbone::random(bc, &mut rng);
        Self {
            backbone,
            interaction: InteractionWeights::random(&mut rng, c16, cfg.heads, cfg.blocks16),
            cascade: CascadeWeights::random(&mut rng, c8, c16, cfg.heads, cfg.blocks8),
            refine: RefineWeights::random(&mut rng, [c2, c4, c8]),
        }
    }

    pub fn export(&self) -> WeightStore {
        let mut store = WeightStore::new();
        self.backbone.export(&mut store);
        self.interaction.export(&mut store);
        self.cascade.export(&mut store);
        self.refine.export(&mut store);
        store
    }

    pub fn import(store: &WeightStore, cfg: &PipelineConfig) -> Result<Self> {
        let bc = BackboneConfig::for_variant(cfg.variant);
        let (c2, c4, c8, c16) = (bc.low_channels[0], bc.low_channels[1], bc.low_channels[2], bc.high_channels);
        Ok(Self {
            backbone: Backbone::import(store, bc)?,
            interaction: InteractionWeights::import(store, c16, cfg.heads, cfg.blocks16)?,
            cascade: CascadeWeights::import(store, c8, c16, cfg.heads, cfg.blocks8)?,
            refine: RefineWeights::import(store, [c2, c4, c8])?,
        })
    }
}

/// Wall-clock time per stage, milliseconds, summed over both views.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub extraction_ms: f64,
    pub interaction_ms: f64,
    pub matching_ms: f64,
    pub refinement_ms: f64,
    pub total_ms: f64,
}

/// Dense confidences kept for the losses in training mode.
#[derive(Clone, Debug)]
pub struct TrainingOutputs {
    pub p16: Tensor,
    /// Partial-softmax confidence at 1/8, zero off the support.
    pub p8: Tensor,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    /// Coarse matches inside both original images.
    pub coarse: MatchSet,
    pub refined: Vec<RefinedMatch>,
    pub priors: PriorSet,
    /// Original `(width, height)` of both images.
    pub size_a: (usize, usize),
    pub size_b: (usize, usize),
    /// Matching-stage operations (1/16 scores, top-k, sparse 1/8 matching).
    pub ops: OpCount,
    pub times: StageTimes,
    pub training: Option<TrainingOutputs>,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub weights: PipelineWeights,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Extends an `H×W×1` image on the bottom and right to multiples of 32.
pub fn pad_image(image: &Tensor, policy: PadPolicy) -> Result<Tensor> {
    let (h, w, c) = image.dims3()?;
    if h == 0 || w == 0 || c != 1 {
        return Err(dim_err!("expected a non-empty H×W×1 image, got {h}x{w}x{c}"));
    }
    let (ph, pw) = (h.div_ceil(32) * 32, w.div_ceil(32) * 32);
    match policy {
        PadPolicy::Zero => pad_to(image, ph, pw),
        PadPolicy::Edge => Ok(Tensor::from_fn(&[ph, pw, 1], |k| {
            let (y, x) = ((k / pw).min(h - 1), (k % pw).min(w - 1));
            image.data()[y * w + x]
        })),
    }
}

fn inside(p: (f64, f64), size: (usize, usize)) -> bool {
    p.0 >= -0.5 && p.1 >= -0.5 && p.0 < size.0 as f64 - 0.5 && p.1 < size.1 as f64 - 0.5
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, weights: PipelineWeights) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, weights })
    }

    pub fn random(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let weights = PipelineWeights::random(&cfg);
        Ok(Self { cfg, weights })
    }

    /// Matches two `H×W×1` images with intensities in `[0, 1]`.
    pub fn match_images(&self, image_a: &Tensor, image_b: &Tensor) -> Result<PipelineOutput> {
        let start = Instant::now();
        let mut times = StageTimes::default();
        let w = &self.weights;
        let cfg = &self.cfg;
        let (ha, wa, _) = image_a.dims3()?;
        let (hb, wb, _) = image_b.dims3()?;

        let t = Instant::now();
        let pa = w.backbone.forward(&pad_image(image_a, cfg.pad)?)?;
        let pb = w.backbone.forward(&pad_image(image_b, cfg.pad)?)?;
        times.extraction_ms = ms(t);

        let t = Instant::now();
        let state = run_hybrid(
            InteractionState {
                a16: pa.s16.clone(),
                b16: pb.s16.clone(),
                a32: pa.s32.clone(),
                b32: pb.s32.clone(),
            },
            &w.interaction,
            cfg.blocks16,
        )?;
        times.interaction_ms = ms(t);

        let t = Instant::now();
        let (ta16, tb16) = (state.a16.tokens(), state.b16.tokens());
        let s16 = score_matrix(&ta16, &tb16)?;
        let priors = select_priors(&s16, cfg.k)?;
        let p16 = (cfg.mode == Mode::TrainMath).then(|| dual_softmax(&s16)).transpose()?;
        let mut ops = score_matrix_ops(ta16.shape()[0], tb16.shape()[0], state.a16.channels())
            + select_priors_ops(ta16.shape()[0], tb16.shape()[0]);

        let fuse8 = &w.cascade.fuse8;
        let mut fa = FeatureMap::new(fuse8.forward(&pa.s8.tensor, &state.a16.tensor)?, 8)?;
        let mut fb = FeatureMap::new(fuse8.forward(&pb.s8.tensor, &state.b16.tensor)?, 8)?;
        for block in w.cascade.rsca.iter().take(cfg.blocks8) {
            (fa, fb) = rsca_block(&fa, &fb, &priors, DEFAULT_RATIO, block)?;
        }
        let map_a = ScaleMap::new(DEFAULT_RATIO, fa.height(), fa.width());
        let map_b = ScaleMap::new(DEFAULT_RATIO, fb.height(), fb.width());
        let (ta8, tb8) = (fa.tokens(), fb.tokens());
        let scores = LazyScores::new(&ta8, &tb8)?;
        let one = match_one_to_one(&scores, &priors, map_a, map_b, cfg.theta)?;
        ops += one.ops;
        let training = match p16 {
            Some(p16) => {
                let sparse = SparseConfidence::compute(&scores, &priors, map_a, map_b)?;
                Some(TrainingOutputs {
                    p16,
                    p8: sparse.to_dense(&priors),
                })
            }
            None => None,
        };
        times.matching_ms = ms(t);

        let t = Instant::now();
        let (_, f2a) = fuse_pyramid(&pa.s4, &pa.s2, &fa, &w.refine)?;
        let (_, f2b) = fuse_pyramid(&pb.s4, &pb.s2, &fb, &w.refine)?;
        let refined = refine_matches(&f2a, &f2b, &one.matches, cfg.window)?;
        times.refinement_ms = ms(t);

        let (size_a, size_b) = ((wa, ha), (wb, hb));
        let keep: Vec<bool> = refined
            .iter()
            .map(|r| inside(r.pixel_a, size_a) && inside(r.subpixel_b, size_b))
            .collect();
        let mut coarse = one.matches;
        coarse.matches = coarse.matches.into_iter().zip(&keep).filter(|(_, &k)| k).map(|(m, _)| m).collect();
        let refined = refined.into_iter().zip(&keep).filter(|(_, &k)| k).map(|(r, _)| r).collect();
        times.total_ms = ms(start);
        Ok(PipelineOutput {
            coarse,
            refined,
            priors,
            size_a,
            size_b,
            ops,
            times,
            training,
        })
    }
}

/// One match in the exchange format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    #[serde(rename = "iA")]
    pub i_a: [f64; 2],
    #[serde(rename = "iB")]
    pub i_b: [f64; 2],
    pub conf: f32,
    #[serde(rename = "subpix_B")]
    pub subpix_b: [f64; 2],
    #[serde(rename = "H_patch")]
    pub h_patch: [f64; 9],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSizes {
    pub a: [usize; 2],
    pub b: [usize; 2],
}

/// Matches as written by the command-line tool: token-centre pixels in the
/// original frames, the refined B position and the patch homography.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub matches: Vec<MatchRecord>,
    pub scale: usize,
    pub image_sizes: ImageSizes,
}

impl PipelineOutput {
    pub fn report(&self) -> MatchReport {
        let stride = self.coarse.stride;
        let matches = self
            .refined
            .iter()
            .map(|r| {
                let pb = crate::feature::token_pixel(r.b, self.coarse.grid_b.1, stride);
                MatchRecord {
                    i_a: [r.pixel_a.0, r.pixel_a.1],
                    i_b: [pb.0 as f64, pb.1 as f64],
                    conf: r.confidence,
                    subpix_b: [r.subpixel_b.0, r.subpixel_b.1],
                    h_patch: r.h_patch,
                }
            })
            .collect();
        MatchReport {
            matches,
            scale: stride,
            image_sizes: ImageSizes {
                a: [self.size_a.0, self.size_a.1],
                b: [self.size_b.0, self.size_b.1],
            },
        }
    }
}

impl MatchReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(CaspError::from)
    }
}
