//! Noise sweeps over image pairs: corrupt the query, match, filter, score.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nrmatch_core::geometry::{evaluate_pair, EvalReport, Mat3, NCM_TOL_PX};
use nrmatch_core::outlier::{consensus_baseline, CorrespondenceBatch, Intrinsics};
use nrmatch_core::{CoreError, Image, Matcher, OutlierNet, PixelMatchSet};
use nrmatch_tensor::{ParamStore, Rng};

use crate::config::{BenchConfig, OutlierMode};
use crate::error::{BenchError, Result};
use crate::noise::NoiseSpec;
use crate::pgm;
use crate::synth::generate_pair;

pub const REPORT_HEADER: &str = "pair_id,noise_type,noise_level,ncm,sr,rmse,rt_s";
pub const SUMMARY_HEADER: &str = "noise_type,noise_level,pairs,mean_ncm,sr,mean_rmse,mean_rt_s,acr";

/// Query, reference and the homography taking query pixels to reference pixels.
#[derive(Clone, Debug)]
pub struct BenchPair {
    pub id: String,
    pub a: Image,
    pub b: Image,
    pub h: Mat3,
}

pub fn synthetic_pairs(cfg: &BenchConfig, count: usize) -> Result<Vec<BenchPair>> {
    let mut rng = Rng::named(cfg.seed, "bench.pairs");
    (0..count)
        .map(|i| {
            let p = generate_pair(rng.next_u64(), cfg.size, cfg.warp)?;
            Ok(BenchPair { id: format!("syn{i:03}"), a: p.a, b: p.b, h: p.h })
        })
        .collect()
}

fn read_homography(path: &Path) -> Result<Mat3> {
    let text = std::fs::read_to_string(path)?;
    let v: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| BenchError::Config(format!("{}: bad number {t:?}", path.display()))))
        .collect::<Result<_>>()?;
    v.try_into().map_err(|v: Vec<f64>| BenchError::Config(format!("{}: {} values, expected 9", path.display(), v.len())))
}

fn load_dir_pair(dir: &Path, id: &str) -> Result<BenchPair> {
    let a = pgm::read(dir.join(format!("{id}_a.pgm")))?;
    let b = pgm::read(dir.join(format!("{id}_b.pgm")))?;
    for im in [&a, &b] {
        if im.width % 8 != 0 || im.height % 8 != 0 {
            return Err(BenchError::Image(format!("{}×{} is not a multiple of 8", im.width, im.height)));
        }
    }
    Ok(BenchPair { id: id.to_string(), a, b, h: read_homography(&dir.join(format!("{id}_h.txt")))? })
}

/// Pairs stored as `<id>_a.pgm`, `<id>_b.pgm` and `<id>_h.txt` (nine
/// row-major homography entries). Unreadable pairs are skipped with a
/// message on stderr.
pub fn directory_pairs(dir: impl AsRef<Path>) -> Result<Vec<BenchPair>> {
    let dir = dir.as_ref();
    let mut ids: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix("_a.pgm")).map(str::to_string))
        .collect();
    ids.sort();
    let mut out = Vec::new();
    for id in ids {
        match load_dir_pair(dir, &id) {
            Ok(p) => out.push(p),
            Err(e) => eprintln!("skipping pair {id}: {e}"),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub enum PairSource {
    Synthetic(usize),
    Dir(PathBuf),
}

impl PairSource {
    pub fn load(&self, cfg: &BenchConfig) -> Result<Vec<BenchPair>> {
        match self {
            Self::Synthetic(n) => synthetic_pairs(cfg, *n),
            Self::Dir(d) => directory_pairs(d),
        }
    }
}

/// Networks used by a bench run.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub matcher: Matcher,
    pub outlier: Option<OutlierNet>,
    pub mode: OutlierMode,
    pub consensus_iters: usize,
}

impl Pipeline {
    /// Builds the configured matcher and, in learned mode, the classifier.
    /// Without weights both start from their seeded initialisation.
    pub fn new(cfg: &BenchConfig, weights: Option<&ParamStore>) -> Result<Self> {
        let mut matcher = Matcher::init(cfg.matcher_config(), cfg.seed)?;
        let mut outlier = None;
        if cfg.outlier == OutlierMode::Learned {
            outlier = Some(OutlierNet::init(cfg.seed)?);
        }
        if let Some(w) = weights {
            matcher.load(w)?;
            if let Some(net) = outlier.as_mut() {
                net.load(w)?;
            }
        }
        Ok(Self { matcher, outlier, mode: cfg.outlier, consensus_iters: cfg.consensus_iters })
    }

    /// Candidate matches after outlier removal. Sets the selected filter
    /// cannot work on pass through unchanged.
    pub fn filter(&self, matches: &PixelMatchSet, a: &Image, b: &Image, rng: &mut Rng) -> Result<Vec<[f64; 4]>> {
        let pts = matches.points();
        match self.mode {
            OutlierMode::Off => Ok(pts),
            OutlierMode::Consensus => {
                if pts.len() < 4 {
                    return Ok(pts);
                }
                match consensus_baseline(matches, self.consensus_iters, NCM_TOL_PX, rng) {
                    Ok((mask, _)) => Ok(pts.into_iter().zip(mask).filter(|(_, m)| *m).map(|(p, _)| p).collect()),
                    // No usable minimal sample: nothing to filter against.
                    Err(CoreError::Degenerate(_)) => Ok(pts),
                    Err(e) => Err(e.into()),
                }
            }
            OutlierMode::Learned => {
                let net = self.outlier.as_ref().ok_or_else(|| BenchError::Config("learned mode without a classifier".into()))?;
                if pts.len() < 2 {
                    return Ok(pts);
                }
                let batch = CorrespondenceBatch::from_pixels(
                    &pts,
                    &Intrinsics::half_extent(a.width, a.height),
                    &Intrinsics::half_extent(b.width, b.height),
                )?;
                let mask = net.classify(&batch)?.mask();
                Ok(pts.into_iter().zip(mask).filter(|(_, m)| *m).map(|(p, _)| p).collect())
            }
        }
    }

    /// Matches, filters and scores one pair.
    pub fn evaluate(&self, a: &Image, b: &Image, truth: &Mat3, rng: &mut Rng, timing: bool) -> Result<EvalReport> {
        let start = Instant::now();
        let out = self.matcher.match_pair(a, b)?;
        let kept = self.filter(&out.pixels, a, b, rng)?;
        let rt = if timing { start.elapsed().as_secs_f64() } else { 0.0 };
        Ok(evaluate_pair(&kept, truth, rt))
    }
}

/// One line of the report. The clean row has kind `clean` and level 0.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub pair_id: String,
    pub noise_type: String,
    pub noise_level: f64,
    pub eval: EvalReport,
}

impl ReportRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6}",
            self.pair_id,
            self.noise_type,
            self.noise_level,
            self.eval.ncm,
            u8::from(self.eval.success),
            self.eval.rmse,
            self.eval.runtime
        )
    }
}

/// Per-level aggregate; `acr` is the ratio of mean NCMs against the clean rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelSummary {
    pub noise_type: String,
    pub noise_level: f64,
    pub pairs: usize,
    pub mean_ncm: f64,
    pub sr: f64,
    pub mean_rmse: f64,
    pub mean_rt: f64,
    pub acr: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<ReportRow>,
}

impl BenchReport {
    pub fn csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv());
            s.push('\n');
        }
        s
    }

    /// Levels in first-appearance order, clean first.
    pub fn summary(&self) -> Vec<LevelSummary> {
        let mut keys: Vec<(String, f64)> = Vec::new();
        for r in &self.rows {
            if !keys.iter().any(|(t, l)| *t == r.noise_type && *l == r.noise_level) {
                keys.push((r.noise_type.clone(), r.noise_level));
            }
        }
        let mut out: Vec<LevelSummary> = keys
            .into_iter()
            .map(|(t, l)| {
                let rows: Vec<&ReportRow> = self.rows.iter().filter(|r| r.noise_type == t && r.noise_level == l).collect();
                let n = rows.len() as f64;
                LevelSummary {
                    pairs: rows.len(),
                    mean_ncm: rows.iter().map(|r| r.eval.ncm as f64).sum::<f64>() / n,
                    sr: rows.iter().filter(|r| r.eval.success).count() as f64 / n,
                    mean_rmse: rows.iter().map(|r| r.eval.rmse).sum::<f64>() / n,
                    mean_rt: rows.iter().map(|r| r.eval.runtime).sum::<f64>() / n,
                    noise_type: t,
                    noise_level: l,
                    acr: None,
                }
            })
            .collect();
        let clean = out.iter().find(|s| s.noise_type == "clean").map(|s| s.mean_ncm);
        for s in &mut out {
            s.acr = clean.and_then(|c| nrmatch_core::geometry::acr(s.mean_ncm, c));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from(SUMMARY_HEADER);
        s.push('\n');
        for l in self.summary() {
            let acr = l.acr.map_or(String::new(), |a| format!("{a:.6}"));
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
                l.noise_type, l.noise_level, l.pairs, l.mean_ncm, l.sr, l.mean_rmse, l.mean_rt, acr
            );
        }
        s
    }

    /// Mean-NCM ratio per level of one noise kind, in sweep order.
    pub fn acr_curve(&self, kind: &str) -> Vec<(f64, Option<f64>)> {
        self.summary().into_iter().filter(|s| s.noise_type == kind).map(|s| (s.noise_level, s.acr)).collect()
    }
}

fn noise_seed(base: u64, pair: &str, spec: &str) -> u64 {
    Rng::named(base, &format!("bench.noise.{pair}.{spec}")).next_u64()
}

/// Runs every pair clean and at every sweep level. Rows come out in
/// pair-then-level order; pairs are processed one after another.
pub fn run_bench(cfg: &BenchConfig, pipeline: &Pipeline, pairs: &[BenchPair]) -> Result<BenchReport> {
    let mut report = BenchReport::default();
    for pair in pairs {
        let mut rng = Rng::named(cfg.seed, &format!("bench.filter.{}", pair.id));
        let eval = pipeline.evaluate(&pair.a, &pair.b, &pair.h, &mut rng, cfg.timing)?;
        report.rows.push(ReportRow { pair_id: pair.id.clone(), noise_type: "clean".into(), noise_level: 0.0, eval });
        for sweep in &cfg.sweeps {
            for &level in &sweep.levels {
                let seed = noise_seed(cfg.seed, &pair.id, &format!("{}.{level}", sweep.kind));
                let query = NoiseSpec { kind: sweep.kind, level, seed }.apply(&pair.a);
                let eval = pipeline.evaluate(&query, &pair.b, &pair.h, &mut rng, cfg.timing)?;
                report.rows.push(ReportRow {
                    pair_id: pair.id.clone(),
                    noise_type: sweep.kind.to_string(),
                    noise_level: level,
                    eval,
                });
            }
        }
    }
    Ok(report)
}

/// Writes the report and, next to it, `<stem>.summary.csv`.
pub fn write_report(path: impl AsRef<Path>, report: &BenchReport) -> Result<PathBuf> {
    let path = path.as_ref();
    std::fs::write(path, report.csv())?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let summary = path.with_file_name(format!("{stem}.summary.csv"));
    std::fs::write(&summary, report.summary_csv())?;
    Ok(summary)
}
