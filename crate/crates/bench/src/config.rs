//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored; every other line must set a
//! key the target configuration knows.

use std::path::Path;
use std::str::FromStr;

use nrmatch_core::{MatcherConfig, PeMode, Profile};

use crate::error::{BenchError, Result};
use crate::noise::NoiseKind;

pub trait Configurable {
    fn set(&mut self, key: &str, value: &str) -> Result<()>;
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| BenchError::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(BenchError::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn unknown(key: &str) -> BenchError {
    BenchError::Config(format!("unknown key {key:?}"))
}

pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| BenchError::Config(format!("line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn apply_text<C: Configurable>(cfg: &mut C, text: &str) -> Result<()> {
    for (k, v) in parse_pairs(text)? {
        cfg.set(&k, &v)?;
    }
    Ok(())
}

pub fn apply_file<C: Configurable>(cfg: &mut C, path: impl AsRef<Path>) -> Result<()> {
    apply_text(cfg, &std::fs::read_to_string(path)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutlierTrainConfig {
    pub seed: u64,
    pub steps: usize,
    /// Correspondences per training batch.
    pub batch: usize,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Fraction of steps trained on classification alone before the
    /// essential-matrix term is switched on.
    pub ess_warmup: f64,
    pub min_inlier_ratio: f64,
    pub max_inlier_ratio: f64,
    /// Inlier jitter bound in pixels, with `focal` pixels per normalized unit.
    pub jitter_px: f64,
    pub focal: f64,
    /// Share of batches drawn from planar (homography) scenes.
    pub planar_share: f64,
}

impl Default for OutlierTrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            steps: 10_000,
            batch: 100,
            lr: 1e-3,
            alpha: nrmatch_core::losses::ALPHA,
            beta: nrmatch_core::losses::BETA,
            ess_warmup: 0.2,
            min_inlier_ratio: 0.3,
            max_inlier_ratio: 0.9,
            jitter_px: 1.0,
            focal: 64.0,
            planar_share: 0.5,
        }
    }
}

impl Configurable for OutlierTrainConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "ess_warmup" => self.ess_warmup = parse(key, v)?,
            "min_inlier_ratio" => self.min_inlier_ratio = parse(key, v)?,
            "max_inlier_ratio" => self.max_inlier_ratio = parse(key, v)?,
            "jitter_px" => self.jitter_px = parse(key, v)?,
            "focal" => self.focal = parse(key, v)?,
            "planar_share" => self.planar_share = parse(key, v)?,
            _ => return Err(unknown(key)),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatcherTrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub size: usize,
    pub lr: f64,
    /// Ground-truth coarse matches refined per step.
    pub fine_pairs: usize,
    /// Probability that the query image of a training pair is corrupted;
    /// zero trains on clean pairs only.
    pub noise_prob: f64,
    pub warp: f64,
    pub clip_norm: f64,
}

impl Default for MatcherTrainConfig {
    fn default() -> Self {
        Self { seed: 1, steps: 2000, size: 128, lr: 1e-3, fine_pairs: 32, noise_prob: 0.0, warp: 1.0, clip_norm: 1.0 }
    }
}

impl Configurable for MatcherTrainConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "size" => self.size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "fine_pairs" => self.fine_pairs = parse(key, v)?,
            "noise_prob" => self.noise_prob = parse(key, v)?,
            "warp" => self.warp = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            _ => return Err(unknown(key)),
        }
        Ok(())
    }
}

/// How candidate matches are filtered before evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutlierMode {
    Learned,
    Consensus,
    Off,
}

impl FromStr for OutlierMode {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Self::Learned),
            "consensus" => Ok(Self::Consensus),
            "off" | "none" => Ok(Self::Off),
            _ => Err(BenchError::Config(format!("unknown outlier mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub kind: NoiseKind,
    pub levels: Vec<f64>,
}

impl FromStr for Sweep {
    type Err = BenchError;
    /// `kind:l1,l2,...`, e.g. `gaussian:5,2,0,-2,-5`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, levels) =
            s.split_once(':').ok_or_else(|| BenchError::Config(format!("sweep {s:?} is not kind:levels")))?;
        let levels = levels.split(',').map(|l| parse::<f64>("sweep", l.trim())).collect::<Result<Vec<_>>>()?;
        if levels.is_empty() {
            return Err(BenchError::Config("empty sweep".into()));
        }
        Ok(Self { kind: kind.trim().parse()?, levels })
    }
}

impl Sweep {
    pub fn gaussian_default() -> Self {
        Self { kind: NoiseKind::Gaussian, levels: vec![5.0, 2.0, 0.0, -2.0, -5.0] }
    }
    pub fn stripe_default() -> Self {
        Self { kind: NoiseKind::Stripe, levels: vec![0.05, 0.08, 0.10, 0.12, 0.15] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub seed: u64,
    /// Number of synthetic pairs when no pair directory is given.
    pub synthetic: usize,
    pub size: usize,
    pub warp: f64,
    pub sweeps: Vec<Sweep>,
    pub profile: Profile,
    pub fpm: bool,
    pub pe: PeMode,
    pub outlier: OutlierMode,
    /// Record wall-clock run time; off gives byte-identical reports.
    pub timing: bool,
    pub consensus_iters: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            synthetic: 20,
            size: 128,
            warp: 1.0,
            sweeps: vec![Sweep::gaussian_default(), Sweep::stripe_default()],
            profile: Profile::Desk,
            fpm: true,
            pe: PeMode::Normalized,
            outlier: OutlierMode::Learned,
            timing: true,
            consensus_iters: nrmatch_core::geometry::CONSENSUS_ITERS,
        }
    }
}

impl BenchConfig {
    pub fn matcher_config(&self) -> MatcherConfig {
        MatcherConfig { fpm: self.fpm, pe: self.pe, ..MatcherConfig::for_profile(self.profile) }
    }
}

impl Configurable for BenchConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "synthetic" => self.synthetic = parse(key, v)?,
            "size" => self.size = parse(key, v)?,
            "warp" => self.warp = parse(key, v)?,
            "sweeps" => self.sweeps = v.split(';').map(|s| s.trim().parse()).collect::<Result<_>>()?,
            "profile" => self.profile = v.parse()?,
            "fpm" => self.fpm = parse_bool(key, v)?,
            "pe" => {
                self.pe = match v {
                    "normalized" => PeMode::Normalized,
                    "absolute" => PeMode::Absolute,
                    _ => return Err(BenchError::Config(format!("unknown encoding {v:?}"))),
                }
            }
            "outlier" => self.outlier = v.parse()?,
            "timing" => self.timing = parse_bool(key, v)?,
            "consensus_iters" => self.consensus_iters = parse(key, v)?,
            _ => return Err(unknown(key)),
        }
        Ok(())
    }
}
