use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use casp_core::eval::bench::{bench_matching, BenchConfig, BENCH_CHANNELS_16, BENCH_CHANNELS_8};
use casp_core::eval::{run_eval, EvalSpec};
use casp_core::selftest::run_selftest;
use casp_core::{CaspError, Pipeline, PipelineConfig, PipelineWeights, WeightStore};
use log::{info, warn};

use crate::imageio::read_gray;
use crate::{Cli, Command, GlobalArgs};

/// Failure classes and their exit codes.
#[derive(Debug)]
pub enum Failure {
    Input(String),
    Weights(String),
    Invariant(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Weights(_) => 3,
            Failure::Invariant(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Input(m) => write!(f, "input error: {m}"),
            Failure::Weights(m) => write!(f, "weights error: {m}"),
            Failure::Invariant(m) => write!(f, "invariant failure: {m}"),
        }
    }
}

fn input(e: impl fmt::Display) -> Failure {
    Failure::Input(e.to_string())
}

type Result<T> = std::result::Result<T, Failure>;

/// Defaults, then the config file, then flags.
fn pipeline_config(g: &GlobalArgs) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::from_file(p).map_err(|e| input(format!("{}: {e}", p.display())))?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = g.variant {
        cfg.variant = v;
    }
    if let Some(k) = g.k {
        cfg.k = k;
    }
    if let Some(t) = g.theta {
        cfg.theta = t;
    }
    if let Some(w) = g.w {
        cfg.window = w;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Writes `name` inside the output directory, or prints it when there is
/// none and `stdout` is set.
struct Output {
    dir: Option<PathBuf>,
}

impl Output {
    fn new(dir: Option<PathBuf>) -> Result<Self> {
        if let Some(d) = &dir {
            fs::create_dir_all(d).map_err(|e| input(format!("{}: {e}", d.display())))?;
        }
        Ok(Self { dir })
    }

    fn emit(&self, name: &str, text: &str, stdout: bool) -> Result<()> {
        match &self.dir {
            Some(d) => {
                let p = d.join(name);
                fs::write(&p, text).map_err(|e| input(format!("{}: {e}", p.display())))?;
                info!("wrote {}", p.display());
            }
            None if stdout => print!("{text}"),
            None => {}
        }
        Ok(())
    }
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(input)
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(input)?;
    }
    let out = Output::new(cli.global.out.clone())?;
    match &cli.command {
        Command::Match {
            image_a,
            image_b,
            weights,
            mode,
            pad,
        } => {
            let mut cfg = pipeline_config(&cli.global)?;
            if let Some(m) = mode {
                cfg.mode = *m;
            }
            if let Some(p) = pad {
                cfg.pad = *p;
            }
            cmd_match(image_a, image_b, weights.as_deref(), cfg, &out)
        }
        Command::Eval { spec, timing } => cmd_eval(spec, *timing, &cli.global, &out),
        Command::Bench { sizes, repeats } => cmd_bench(sizes.clone(), *repeats, &cli.global, &out),
        Command::Selftest { weights } => cmd_selftest(weights.as_deref(), &out),
    }
}

fn cmd_match(a: &Path, b: &Path, weights: Option<&Path>, cfg: PipelineConfig, out: &Output) -> Result<()> {
    cfg.validate().map_err(input)?;
    let img_a = read_gray(a).map_err(Failure::Input)?;
    let img_b = read_gray(b).map_err(Failure::Input)?;
    let w = match weights {
        Some(p) => {
            let store = WeightStore::load(p).map_err(|e| Failure::Weights(format!("{}: {e}", p.display())))?;
            PipelineWeights::import(&store, &cfg).map_err(|e| Failure::Weights(e.to_string()))?
        }
        None => {
            warn!("no weights given: using seeded random weights (demo only)");
            PipelineWeights::random(&cfg)
        }
    };
    let pipeline = Pipeline::new(cfg, w).map_err(input)?;
    let res = pipeline.match_images(&img_a, &img_b).map_err(|e| match e {
        CaspError::Dimension(_) | CaspError::Argument(_) | CaspError::Config(_) => input(e),
        other => Failure::Invariant(other.to_string()),
    })?;
    let t = &res.times;
    info!(
        "{} matches; extraction {:.1} ms, interaction {:.1} ms, matching {:.1} ms, refinement {:.1} ms",
        res.refined.len(),
        t.extraction_ms,
        t.interaction_ms,
        t.matching_ms,
        t.refinement_ms
    );
    out.emit("matches.json", &json(&res.report())?, true)
}

fn cmd_eval(spec_path: &Path, timing: bool, g: &GlobalArgs, out: &Output) -> Result<()> {
    let text = fs::read_to_string(spec_path).map_err(|e| input(format!("{}: {e}", spec_path.display())))?;
    let mut spec: EvalSpec = serde_json::from_str(&text).map_err(|e| input(format!("{}: {e}", spec_path.display())))?;
    if let Some(k) = g.k {
        spec.k = k;
    }
    if let Some(t) = g.theta {
        spec.theta = t;
    }
    if let Some(w) = g.w {
        spec.window = w;
    }
    if let Some(s) = g.seed {
        spec.scene.seed = s;
    }
    spec.timing |= timing;
    let report = run_eval(&spec).map_err(input)?;
    info!(
        "{} scenes: precision {:.4}, AUC {:?} at {:?} {}",
        report.scenes.len(),
        report.precision,
        report.auc,
        report.thresholds,
        report.error_unit
    );
    out.emit("eval_report.json", &json(&report)?, true)?;
    out.emit("eval_report.csv", &report.to_csv(), false)?;
    if report.prior_complete_scenes > 0 && !report.oracle_equal {
        return Err(Failure::Invariant("cascade differs from the reference matcher on a prior-complete scene".into()));
    }
    Ok(())
}

fn cmd_bench(sizes: Option<Vec<usize>>, repeats: usize, g: &GlobalArgs, out: &Output) -> Result<()> {
    let mut cfg = BenchConfig {
        repeats,
        ..BenchConfig::default()
    };
    if let Some(s) = sizes {
        cfg.sizes = s;
    }
    if let Some(k) = g.k {
        cfg.k = k;
    }
    if let Some(t) = g.theta {
        cfg.theta = t;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(n) = g.threads {
        cfg.threads = n;
    }
    let report = bench_matching(&cfg).map_err(input)?;
    println!(
        "{:>6} {:>8} {:>12} {:>12} {:>8} {:>10}",
        "size", "tokens8", "global_ms", "cascade_ms", "speedup", "op_ratio"
    );
    for e in &report.entries {
        println!(
            "{:>6} {:>8} {:>12.1} {:>12.1} {:>8.2} {:>10.4}",
            e.size, e.tokens8, e.global_ms, e.cascade_ms, e.speedup, e.op_ratio
        );
    }
    out.emit("bench.json", &json(&report)?, false)?;
    out.emit("bench.csv", &report.to_csv(), false)?;
    out.emit("bench.dat", &report.to_gnuplot(), false)?;

    let support = (cfg.k * 4) as u64;
    for e in &report.entries {
        let (n8, n16) = (e.tokens8 as u64, e.tokens16 as u64);
        let global = n8 * n8 * BENCH_CHANNELS_8 as u64;
        let cascade = n16 * n16 * BENCH_CHANNELS_16 as u64 + 2 * n8 * support * BENCH_CHANNELS_8 as u64;
        if e.global_ops.macs != global || e.cascade_ops.macs != cascade {
            return Err(Failure::Invariant(format!("operation counters at {} disagree with the cost model", e.size)));
        }
        if e.size >= 1152 && e.op_ratio >= 0.2 {
            return Err(Failure::Invariant(format!("op ratio {:.4} at {} is not below 0.2", e.op_ratio, e.size)));
        }
    }
    Ok(())
}

fn cmd_selftest(weights: Option<&Path>, out: &Output) -> Result<()> {
    let report = run_selftest(weights);
    for c in &report.checks {
        println!("{c} [{:.0} ms]", c.ms);
    }
    out.emit("selftest.json", &json(&report)?, false)?;
    let failed: Vec<&str> = report.failed().map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", report.checks.len());
        Ok(())
    } else {
        Err(Failure::Invariant(format!("failed checks: {}", failed.join(", "))))
    }
}
