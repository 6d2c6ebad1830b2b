//! Pipeline settings and their flat `key = value` file format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::Variant;
use crate::cascade::{DEFAULT_K, DEFAULT_RSCA_BLOCKS, DEFAULT_THETA, MIN_K};
use crate::error::{CaspError, Result};
use crate::interaction::{DEFAULT_BLOCKS, DEFAULT_HEADS};
use crate::refine::DEFAULT_WINDOW;
use crate::supervision::LossWeights;

/// Training mode additionally materialises the dense confidence matrices
/// used by the losses; inference mode only evaluates the sparse support.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    TrainMath,
    Inference,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::TrainMath => "train-math",
            Mode::Inference => "inference",
        })
    }
}

impl FromStr for Mode {
    type Err = CaspError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train-math" => Ok(Mode::TrainMath),
            "inference" => Ok(Mode::Inference),
            _ => Err(CaspError::Config(format!("unknown mode '{s}'"))),
        }
    }
}

/// How images are extended to a multiple of 32 before feature extraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PadPolicy {
    /// Zeros on the bottom and right.
    Zero,
    /// Last row and column repeated on the bottom and right.
    Edge,
}

impl fmt::Display for PadPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PadPolicy::Zero => "zero",
            PadPolicy::Edge => "edge",
        })
    }
}

impl FromStr for PadPolicy {
    type Err = CaspError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(PadPolicy::Zero),
            "edge" => Ok(PadPolicy::Edge),
            _ => Err(CaspError::Config(format!("unknown pad policy '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub variant: Variant,
    /// Correspondence priors per 1/16 token.
    pub k: usize,
    /// Confidence threshold of the 1/8 matches.
    pub theta: f32,
    /// Hybrid interaction blocks at 1/16.
    pub blocks16: usize,
    /// RSCA blocks at 1/8.
    pub blocks8: usize,
    pub heads: usize,
    /// Refinement window side, in 1/2-scale cells.
    pub window: usize,
    pub loss_weights: LossWeights,
    pub mode: Mode,
    pub pad: PadPolicy,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            k: DEFAULT_K,
            theta: DEFAULT_THETA,
            blocks16: DEFAULT_BLOCKS,
            blocks8: DEFAULT_RSCA_BLOCKS,
            heads: DEFAULT_HEADS,
            window: DEFAULT_WINDOW,
            loss_weights: LossWeights::default(),
            mode: Mode::Inference,
            pad: PadPolicy::Zero,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CaspError::Config(format!("invalid value '{value}' for '{key}'")))
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < MIN_K {
            return Err(CaspError::Config(format!("k = {} is below the minimum of {MIN_K}", self.k)));
        }
        if !self.theta.is_finite() || self.theta < 0.0 {
            return Err(CaspError::Config(format!("theta = {} must be a non-negative number", self.theta)));
        }
        if self.window < 3 || self.window % 2 == 0 {
            return Err(CaspError::Config(format!("window = {} must be odd and at least 3", self.window)));
        }
        if self.heads == 0 {
            return Err(CaspError::Config("heads must be positive".into()));
        }
        let w = &self.loss_weights;
        if [w.coarse16, w.coarse8, w.fine, w.sub].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CaspError::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Sets one field by its file/flag name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "variant" => self.variant = v.parse().map_err(|_| CaspError::Config(format!("unknown variant '{v}'")))?,
            "k" => self.k = parse(key, v)?,
            "theta" => self.theta = parse(key, v)?,
            "blocks16" => self.blocks16 = parse(key, v)?,
            "blocks8" => self.blocks8 = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "w" | "window" => self.window = parse(key, v)?,
            "lambda1" => self.loss_weights.coarse16 = parse(key, v)?,
            "lambda2" => self.loss_weights.coarse8 = parse(key, v)?,
            "lambda3" => self.loss_weights.fine = parse(key, v)?,
            "lambda4" => self.loss_weights.sub = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "pad" => self.pad = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            other => return Err(CaspError::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are
    /// ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CaspError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults overridden by the file at `path`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let w = &self.loss_weights;
        format!(
            "variant = {}\nk = {}\ntheta = {}\nblocks16 = {}\nblocks8 = {}\nheads = {}\nwindow = {}\n\
             lambda1 = {}\nlambda2 = {}\nlambda3 = {}\nlambda4 = {}\nmode = {}\npad = {}\nseed = {}\n",
            self.variant,
            self.k,
            self.theta,
            self.blocks16,
            self.blocks8,
            self.heads,
            self.window,
            w.coarse16,
            w.coarse8,
            w.fine,
            w.sub,
            self.mode,
            self.pad,
            self.seed
        )
    }
}
