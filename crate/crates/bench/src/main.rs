use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nrmatch_bench::bench::{run_bench, write_report, PairSource, Pipeline};
use nrmatch_bench::config::{apply_file, BenchConfig, MatcherTrainConfig, OutlierMode, OutlierTrainConfig, Sweep};
use nrmatch_bench::noise::{NoiseKind, NoiseSpec};
use nrmatch_bench::train::{outlier_accuracy, train_matcher, train_outlier, write_log, StepLog};
use nrmatch_bench::{pgm, selftest, BenchError, Result};
use nrmatch_core::outlier::{CorrespondenceBatch, Intrinsics};
use nrmatch_core::{Matcher, MatcherConfig, OutlierNet, PeMode, Profile};
use nrmatch_tensor::ParamStore;

#[derive(Parser)]
#[command(name = "nrmatch", version, about = "Noise-robust coarse-to-fine image matching")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Match two PGM images and write pixel correspondences.
    Match(MatchArgs),
    /// Corrupt a PGM image with Gaussian or stripe noise.
    Noise(NoiseArgs),
    /// Train the outlier classifier on synthetic two-view scenes.
    TrainOutlier(TrainArgs),
    /// Train the desk-profile matcher on synthetic pairs.
    TrainMatcher(TrainArgs),
    /// Run the noise sweep benchmark.
    Bench(BenchArgs),
    /// Weight a correspondence CSV with the outlier classifier.
    Classify(ClassifyArgs),
    /// Run the invariant checks; exit status 0 iff all pass.
    Selftest,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    left: PathBuf,
    #[arg(long)]
    right: PathBuf,
    /// Weight files; may be repeated, later files override earlier ones.
    #[arg(long)]
    weights: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "desk")]
    profile: Profile,
}

#[derive(Args)]
struct NoiseArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    kind: NoiseKind,
    /// SNR in dB for gaussian, multiplier variance for stripe.
    #[arg(long, allow_hyphen_values = true)]
    level: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Flat key = value file applied before the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Loss log CSV; defaults to the weight path with a .log.csv suffix.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, conflicts_with = "synthetic")]
    pairs: Option<PathBuf>,
    #[arg(long)]
    synthetic: Option<usize>,
    /// `kind:l1,l2,...`; may be repeated.
    #[arg(long, allow_hyphen_values = true)]
    sweep: Vec<Sweep>,
    #[arg(long)]
    weights: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    profile: Option<Profile>,
    /// learned, consensus or off.
    #[arg(long)]
    outlier: Option<OutlierMode>,
    #[arg(long)]
    no_fpm: bool,
    #[arg(long)]
    absolute_pe: bool,
    /// Report zero run times so that reports are byte-identical.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct ClassifyArgs {
    /// CSV with header `uA,vA,uB,vB` in pixels.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    weights: Vec<PathBuf>,
    #[arg(long)]
    width: usize,
    #[arg(long)]
    height: usize,
    #[arg(long)]
    out: PathBuf,
}

fn load_weights(paths: &[PathBuf]) -> Result<Option<ParamStore>> {
    if paths.is_empty() {
        return Ok(None);
    }
    let mut store = ParamStore::new();
    for p in paths {
        store.merge(&ParamStore::load(p)?);
    }
    Ok(Some(store))
}

fn log_path(out: &Path, log: Option<PathBuf>) -> PathBuf {
    log.unwrap_or_else(|| out.with_extension("log.csv"))
}

fn progress(steps: usize) -> impl FnMut(&StepLog) {
    let every = (steps / 20).max(1);
    move |l: &StepLog| {
        if l.step % every == 0 || l.step + 1 == steps {
            eprintln!("step {:>6}  loss {:.5}", l.step, l.total);
        }
    }
}

fn cmd_match(a: MatchArgs) -> Result<()> {
    let left = pgm::read(&a.left)?;
    let right = pgm::read(&a.right)?;
    let mut m = Matcher::init(MatcherConfig::for_profile(a.profile), 1)?;
    match load_weights(&a.weights)? {
        Some(w) => {
            m.load(&w)?;
        }
        None => eprintln!("no weights given, matching with random initialisation"),
    }
    let out = m.match_pair(&left, &right)?;
    let mut s = String::from("uA,vA,uB,vB,conf_coarse,conf_fine,var_heatmap\n");
    for p in &out.pixels.entries {
        s.push_str(&format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            p.ua, p.va, p.ub, p.vb, p.conf_coarse, p.conf_fine, p.var_heatmap
        ));
    }
    std::fs::write(&a.out, s)?;
    eprintln!("{} matches ({} coarse, {} skipped at the border)", out.pixels.len(), out.coarse.len(), out.pixels.skipped);
    Ok(())
}

fn cmd_noise(a: NoiseArgs) -> Result<()> {
    let img = pgm::read(&a.input)?;
    pgm::write(&a.out, &NoiseSpec { kind: a.kind, level: a.level, seed: a.seed }.apply(&img))
}

fn cmd_train_outlier(a: TrainArgs) -> Result<()> {
    let mut cfg = OutlierTrainConfig::default();
    if let Some(c) = &a.config {
        apply_file(&mut cfg, c)?;
    }
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.steps = a.steps.unwrap_or(cfg.steps);
    let mut rows = Vec::with_capacity(cfg.steps);
    let mut show = progress(cfg.steps);
    let net = train_outlier(&cfg, |l| {
        show(l);
        rows.push(*l);
    })?;
    net.params.save(&a.out)?;
    write_log(log_path(&a.out, a.log), &rows)?;
    let acc = outlier_accuracy(&net, cfg.seed.wrapping_add(1), 100, 100, cfg.jitter_px / cfg.focal)?;
    eprintln!("held-out accuracy at 50% outliers: {acc:.4}");
    Ok(())
}

fn cmd_train_matcher(a: TrainArgs) -> Result<()> {
    let mut cfg = MatcherTrainConfig::default();
    if let Some(c) = &a.config {
        apply_file(&mut cfg, c)?;
    }
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.steps = a.steps.unwrap_or(cfg.steps);
    let mut rows = Vec::with_capacity(cfg.steps);
    let mut show = progress(cfg.steps);
    let mcfg = MatcherConfig { train_w: cfg.size, train_h: cfg.size, ..MatcherConfig::desk() };
    let m = train_matcher(&cfg, mcfg, |l| {
        show(l);
        rows.push(*l);
    })?;
    m.params.save(&a.out)?;
    write_log(log_path(&a.out, a.log), &rows)
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let mut cfg = BenchConfig::default();
    if let Some(c) = &a.config {
        apply_file(&mut cfg, c)?;
    }
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.profile = a.profile.unwrap_or(cfg.profile);
    cfg.outlier = a.outlier.unwrap_or(cfg.outlier);
    if !a.sweep.is_empty() {
        cfg.sweeps = a.sweep;
    }
    cfg.fpm &= !a.no_fpm;
    if a.absolute_pe {
        cfg.pe = PeMode::Absolute;
    }
    cfg.timing &= !a.no_timing;
    let source = match (a.pairs, a.synthetic) {
        (Some(d), _) => PairSource::Dir(d),
        (None, n) => PairSource::Synthetic(n.unwrap_or(cfg.synthetic)),
    };
    let weights = load_weights(&a.weights)?;
    if weights.is_none() {
        eprintln!("no weights given, benchmarking the random initialisation");
    }
    let pipeline = Pipeline::new(&cfg, weights.as_ref())?;
    let pairs = source.load(&cfg)?;
    let report = run_bench(&cfg, &pipeline, &pairs)?;
    let summary = write_report(&a.out, &report)?;
    eprint!("{}", report.summary_csv());
    eprintln!("wrote {} rows to {} and {}", report.rows.len(), a.out.display(), summary.display());
    Ok(())
}

fn cmd_classify(a: ClassifyArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.input)?;
    let mut pts = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let v: Vec<f64> = line
            .split(',')
            .take(4)
            .map(|t| t.trim().parse().map_err(|_| BenchError::Config(format!("bad number {t:?}"))))
            .collect::<Result<_>>()?;
        if v.len() != 4 {
            return Err(BenchError::Config(format!("row {line:?} has fewer than 4 columns")));
        }
        pts.push([v[0], v[1], v[2], v[3]]);
    }
    let mut net = OutlierNet::init(1)?;
    if let Some(w) = load_weights(&a.weights)? {
        net.load(&w)?;
    }
    let k = Intrinsics::half_extent(a.width, a.height);
    let weights = net.classify(&CorrespondenceBatch::from_pixels(&pts, &k, &k)?)?;
    let mut s = String::from("uA,vA,uB,vB,w\n");
    for (p, w) in pts.iter().zip(&weights.w) {
        s.push_str(&format!("{:.6},{:.6},{:.6},{:.6},{:.6}\n", p[0], p[1], p[2], p[3], w));
    }
    std::fs::write(&a.out, s)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = match cli.cmd {
        Cmd::Match(a) => cmd_match(a),
        Cmd::Noise(a) => cmd_noise(a),
        Cmd::TrainOutlier(a) => cmd_train_outlier(a),
        Cmd::TrainMatcher(a) => cmd_train_matcher(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Classify(a) => cmd_classify(a),
        Cmd::Selftest => {
            let results = selftest::run_all();
            print!("{}", selftest::report(&results));
            return if results.iter().all(|r| r.passed) { ExitCode::SUCCESS } else { ExitCode::FAILURE };
        }
    };
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
