//! `zakai`: simulate paths, run the spectral and particle filters, and run
//! convergence, oracle and std-reduction studies.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error,
//! 3 failed assertion.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use zakai_core::config::ConfigFile;
use zakai_core::harness::{self, effective_quad_order, emit_report, OracleTolerance, Prepared, StudyConfig};
use zakai_core::model::{ModelSpec, PRESETS};
use zakai_core::oracle::{particle_filter, ParticleOptions};
use zakai_core::{simulate_path, Error, SeedRecord};

#[derive(Parser, Debug)]
#[command(name = "zakai", version, about = "Splitting-up Zakai filter with Cox observations")]
struct Cli {
    /// Worker threads for path-parallel work (default: available cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate signal/observation paths and write one CSV per path.
    Simulate(SimulateArgs),
    /// Filter one simulated path; writes `trajectory.csv`.
    Filter(FilterArgs),
    /// Strong convergence study against a fine reference grid.
    Converge(ConvergeArgs),
    /// Compare the spectral filter with the particle and Kalman-Bucy oracles.
    Compare(CompareArgs),
    /// Conditional std under the model intensity versus `λ ≡ 1`.
    StdReduction(StdReductionArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Preset name or a config file holding a `[model]` section.
    #[arg(long, default_value = "example1")]
    model: String,
    /// Config file; its entries override the model file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `section.key=value` overrides, applied last.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct SpectralFlags {
    /// Number of Hermite functions.
    #[arg(long)]
    basis: Option<usize>,
    #[arg(long)]
    quad_order: Option<usize>,
    /// `coercive`, `full` or a number.
    #[arg(long)]
    mu: Option<String>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 1024)]
    steps: usize,
    #[arg(long)]
    paths: Option<usize>,
}

#[derive(Args, Debug)]
struct FilterArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    spectral: SpectralFlags,
    #[arg(long, default_value_t = 4096)]
    steps: usize,
    /// 0 runs the spectral filter only.
    #[arg(long)]
    particles: Option<usize>,
    /// Index of the simulated path to filter.
    #[arg(long, default_value_t = 0)]
    path: u64,
    /// Also write G.csv, Bm.csv, Cm.csv and moments.csv into `<out>/matrices`.
    #[arg(long)]
    dump_matrices: bool,
}

#[derive(Args, Debug)]
struct ConvergeArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    spectral: SpectralFlags,
    #[arg(long)]
    ref_level: Option<u32>,
    /// `a..b` or `a,b,c`.
    #[arg(long)]
    levels: Option<String>,
    #[arg(long)]
    paths: Option<usize>,
    /// Exit 3 unless the fitted slope lies in `[lo, hi]`.
    #[arg(long, value_name = "LO,HI")]
    assert_slope: Option<String>,
    /// Keep per-path trajectories under `<out>/trajectories`.
    #[arg(long)]
    trajectories: bool,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    spectral: SpectralFlags,
    /// Steps are `2^ref_level`.
    #[arg(long)]
    ref_level: Option<u32>,
    #[arg(long)]
    paths: Option<usize>,
    /// 0 skips the particle oracle.
    #[arg(long)]
    particles: Option<usize>,
}

#[derive(Args, Debug)]
struct StdReductionArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    spectral: SpectralFlags,
    #[arg(long)]
    ref_level: Option<u32>,
    #[arg(long)]
    paths: Option<usize>,
}

enum Failure {
    Runtime(String),
    Config(String),
    Assertion(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_)
            | Error::InvalidArgument(_)
            | Error::InvalidModel(_)
            | Error::Parse(_)
            | Error::NotLinear(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Serialize)]
struct RunManifest {
    subcommand: String,
    /// Command-line arguments as given.
    argv: Vec<String>,
    /// Merged config entries, flags included; feed back with `--config`.
    config: Value,
    /// Every setting the run used, defaults materialized.
    resolved: Value,
    seed: u64,
    versions: Value,
    started_unix: f64,
    finished_unix: f64,
    outputs: Vec<String>,
    warnings: Vec<String>,
    #[serde(skip_serializing_if = "Value::is_null")]
    status: Value,
}

struct Run {
    manifest: RunManifest,
    out: PathBuf,
    clock: Instant,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl Run {
    fn start(subcommand: &str, out: &Path, cfg: &ConfigFile, seed: u64) -> Result<Self, Failure> {
        fs::create_dir_all(out)?;
        Ok(Self {
            manifest: RunManifest {
                subcommand: subcommand.to_string(),
                argv: std::env::args().collect(),
                config: serde_json::to_value(cfg.entries())?,
                resolved: Value::Null,
                seed,
                versions: json!({
                    "zakai": env!("CARGO_PKG_VERSION"),
                    "manifest": 1,
                }),
                started_unix: unix_now(),
                finished_unix: 0.0,
                outputs: Vec::new(),
                warnings: Vec::new(),
                status: Value::Null,
            },
            out: out.to_path_buf(),
            clock: Instant::now(),
        })
    }

    fn create(&mut self, rel: &str) -> Result<BufWriter<File>, Failure> {
        let p = self.out.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        self.manifest.outputs.push(rel.to_string());
        Ok(BufWriter::new(File::create(p)?))
    }

    fn warn(&mut self, msg: String) {
        eprintln!("warning: {msg}");
        self.manifest.warnings.push(msg);
    }

    fn finish(mut self) -> CmdResult {
        self.manifest.finished_unix = unix_now();
        if let Value::Object(m) = &mut self.manifest.resolved {
            m.insert("elapsed_secs".into(), json!(self.clock.elapsed().as_secs_f64()));
        }
        let mut f = BufWriter::new(File::create(self.out.join("manifest.json"))?);
        serde_json::to_writer_pretty(&mut f, &self.manifest)?;
        writeln!(f)?;
        f.flush()?;
        Ok(())
    }
}

/// Model file (or preset), then `--config`, then flag overrides.
fn load_config(common: &Common, extra: &[String]) -> Result<ConfigFile, Failure> {
    let mut cfg = ConfigFile::default();
    if PRESETS.contains(&common.model.as_str()) {
        cfg.set(&format!("model.preset={}", common.model))?;
    } else {
        let path = Path::new(&common.model);
        if !path.is_file() {
            return Err(Failure::Config(format!(
                "unknown model `{}`: not a preset ({}) and not a readable file",
                common.model,
                PRESETS.join(", ")
            )));
        }
        cfg = ConfigFile::load(path)?;
    }
    if let Some(p) = &common.config {
        cfg.merge(&ConfigFile::load(p)?);
    }
    if let Some(s) = common.seed {
        cfg.set(&format!("study.seed={s}"))?;
    }
    for a in extra.iter().chain(&common.set) {
        cfg.set(a)?;
    }
    if !cfg.has_model() {
        return Err(Failure::Config("no [model] section and no preset given".into()));
    }
    Ok(cfg)
}

fn spectral_overrides(s: &SpectralFlags) -> Vec<String> {
    let mut v = Vec::new();
    if let Some(n) = s.basis {
        v.push(format!("spectral.basis={n}"));
    }
    if let Some(q) = s.quad_order {
        v.push(format!("spectral.quad_order={q}"));
    }
    if let Some(m) = &s.mu {
        v.push(format!("spectral.mu={m}"));
    }
    v
}

fn push<T: std::fmt::Display>(v: &mut Vec<String>, key: &str, val: Option<T>) {
    if let Some(x) = val {
        v.push(format!("{key}={x}"));
    }
}

fn study_from(cfg: &ConfigFile) -> Result<StudyConfig, Failure> {
    let model = cfg.model()?;
    Ok(cfg.study(model)?)
}

fn resolved_study(cfg: &StudyConfig) -> Value {
    json!({
        "model": cfg.model.summary(),
        "basis": cfg.basis,
        "quad_order": effective_quad_order(cfg),
        "mu_rule": cfg.mu,
        "mass_floor": cfg.mass_floor,
        "seed": cfg.seed,
        "paths": cfg.paths,
        "ref_level": cfg.ref_level,
        "levels": cfg.levels,
        "particles": cfg.particles,
        "trajectories": cfg.keep_trajectories,
    })
}

fn check_steps(steps: usize) -> CmdResult {
    if steps == 0 {
        return Err(Failure::Config("--steps must be positive".into()));
    }
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs) -> CmdResult {
    let mut extra = Vec::new();
    push(&mut extra, "study.paths", a.paths);
    let cfg = load_config(&a.common, &extra)?;
    let study = study_from(&cfg)?;
    check_steps(a.steps)?;
    study.validate_common()?;
    let mut run = Run::start("simulate", &a.common.out, &cfg, study.seed)?;
    let mut resolved = resolved_study(&study);
    resolved["steps"] = json!(a.steps);
    run.manifest.resolved = resolved;

    let bundles: Vec<_> = {
        use rayon::prelude::*;
        (0..study.paths as u64)
            .into_par_iter()
            .map(|j| simulate_path(&study.model, a.steps, SeedRecord::new(study.seed, j)))
            .collect::<Result<_, _>>()?
    };
    let mut jumps = Vec::with_capacity(bundles.len());
    for (j, b) in bundles.iter().enumerate() {
        let mut f = run.create(&format!("path{j}.csv"))?;
        b.write_csv(&mut f)?;
        f.flush()?;
        jumps.push(b.total_jumps());
    }
    run.manifest.status = json!({ "total_jumps": jumps });
    println!("wrote {} path(s) to {}", bundles.len(), a.common.out.display());
    run.finish()
}

fn cmd_filter(a: &FilterArgs) -> CmdResult {
    let mut extra = spectral_overrides(&a.spectral);
    push(&mut extra, "study.particles", a.particles);
    let cfg = load_config(&a.common, &extra)?;
    let study = study_from(&cfg)?;
    check_steps(a.steps)?;
    study.validate_common()?;
    let mut run = Run::start("filter", &a.common.out, &cfg, study.seed)?;
    let prep = Prepared::new(&study.model, study.basis, study.quad_order, study.mu)?;
    let mut resolved = resolved_study(&study);
    resolved["steps"] = json!(a.steps);
    resolved["path"] = json!(a.path);
    resolved["mu"] = json!(prep.mu);
    run.manifest.resolved = resolved;

    let seed = SeedRecord::new(study.seed, a.path);
    let path = simulate_path(&study.model, a.steps, seed)?;
    let traj = prep.filter(&path, study.filter_options())?;
    let particles = if study.particles > 0 {
        let opts = ParticleOptions {
            n_particles: study.particles,
            ..ParticleOptions::default()
        };
        Some(particle_filter(&prep.derived, &path, opts, seed)?)
    } else {
        None
    };

    let mut f = run.create("trajectory.csv")?;
    match &particles {
        Some(_) => writeln!(f, "t,x,mean,std,mass,pf_mean,pf_std,pf_se")?,
        None => writeln!(f, "t,x,mean,std,mass")?,
    }
    for r in 0..=a.steps {
        write!(
            f,
            "{},{},{},{},{}",
            path.time(r),
            path.x[r],
            traj.means[r],
            traj.stds[r],
            traj.masses[r]
        )?;
        if let Some(p) = &particles {
            write!(f, ",{},{},{}", p.means[r], p.stds[r], p.std_errors[r])?;
        }
        writeln!(f)?;
    }
    f.flush()?;
    if a.dump_matrices {
        prep.space.dump_csv(&a.common.out.join("matrices"))?;
        for m in ["G", "Bm", "Cm", "moments"] {
            run.manifest.outputs.push(format!("matrices/{m}.csv"));
        }
    }

    let degenerate = traj.is_degenerate();
    if degenerate {
        run.warn(format!(
            "spectral density degenerated at step {}; statistics carried forward from there",
            traj.degenerate_from.unwrap_or(0)
        ));
    }
    run.manifest.status = json!({
        "degenerate": degenerate,
        "degenerate_from": traj.degenerate_from,
        "negative_mass_events": traj.negative_mass_events,
        "min_mass": traj.min_mass,
        "total_jumps": path.total_jumps(),
        "particle_resample_steps": particles.as_ref().map(|p| p.resample_steps.len()),
        "particle_aborted": particles.as_ref().map(|p| p.aborted),
    });
    println!(
        "filtered {} steps (mu = {:.4}){}",
        a.steps,
        prep.mu,
        if degenerate { ", degenerate" } else { "" }
    );
    run.finish()
}

fn parse_range(s: &str) -> Result<(f64, f64), Failure> {
    let bad = || Failure::Config(format!("--assert-slope expects `lo,hi`, got `{s}`"));
    let (lo, hi) = s.split_once(',').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    if lo.is_nan() || hi.is_nan() || lo > hi {
        return Err(bad());
    }
    Ok((lo, hi))
}

fn cmd_converge(a: &ConvergeArgs) -> CmdResult {
    let mut extra = spectral_overrides(&a.spectral);
    push(&mut extra, "study.ref_level", a.ref_level);
    push(&mut extra, "study.levels", a.levels.as_deref());
    push(&mut extra, "study.paths", a.paths);
    if a.trajectories {
        extra.push("study.trajectories=true".into());
    }
    let cfg = load_config(&a.common, &extra)?;
    let study = study_from(&cfg)?;
    let range = a.assert_slope.as_deref().map(parse_range).transpose()?;
    study.validate()?;
    let mut run = Run::start("converge", &a.common.out, &cfg, study.seed)?;
    let mut resolved = resolved_study(&study);
    resolved["assert_slope"] = json!(range);
    run.manifest.resolved = resolved;
    let report = harness::convergence_study(&study)?;
    emit_report(&report, &a.common.out)?;
    run.manifest
        .outputs
        .extend(["report.json".to_string(), "dkappa.csv".to_string()]);
    for p in &report.trajectories {
        for t in std::iter::once(&p.reference).chain(&p.levels) {
            run.manifest
                .outputs
                .push(format!("trajectories/path{}_N{}.csv", p.path, t.len() - 1));
        }
    }
    for w in &report.warnings {
        run.warn(w.clone());
    }
    for l in &report.levels {
        println!(
            "N = 2^{:<2} d = {:.6e}  (used {}, degenerate {})",
            l.level, l.d, l.used_paths, l.degenerate
        );
    }
    match report.slope {
        Some(s) => println!("slope = {s:.4}{}", if report.valid { "" } else { " (report invalid)" }),
        None => println!("slope = n/a"),
    }
    let passed = range.map(|(lo, hi)| report.valid && report.slope.is_some_and(|s| (lo..=hi).contains(&s)));
    run.manifest.status = json!({
        "slope": report.slope,
        "valid": report.valid,
        "assertion_passed": passed,
    });
    run.finish()?;
    match (passed, range) {
        (Some(false), Some((lo, hi))) => Err(Failure::Assertion(format!(
            "slope {:?} (valid = {}) outside [{lo}, {hi}]",
            report.slope, report.valid
        ))),
        _ => Ok(()),
    }
}

fn cmd_compare(a: &CompareArgs) -> CmdResult {
    let mut extra = spectral_overrides(&a.spectral);
    push(&mut extra, "study.ref_level", a.ref_level);
    push(&mut extra, "study.paths", a.paths);
    push(&mut extra, "study.particles", a.particles);
    let cfg = load_config(&a.common, &extra)?;
    let study = study_from(&cfg)?;
    study.validate_common()?;
    let mut run = Run::start("compare", &a.common.out, &cfg, study.seed)?;
    let tol = OracleTolerance::default();
    let mut resolved = resolved_study(&study);
    resolved["tolerance"] = json!(tol);
    run.manifest.resolved = resolved;

    let table = harness::oracle_comparison(&study, tol)?;
    let mut f = run.create("oracle.json")?;
    serde_json::to_writer_pretty(&mut f, &table)?;
    writeln!(f)?;
    f.flush()?;
    let mut f = run.create("oracle.csv")?;
    writeln!(
        f,
        "path,degenerate,particle_rmse,particle_se,particle_ok,kalman_rmse,kalman_var_rel,kalman_ok"
    )?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let optb = |v: Option<bool>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &table.rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            r.path,
            r.degenerate,
            opt(r.particle_rmse),
            opt(r.particle_se),
            optb(r.particle_ok),
            opt(r.kalman_rmse),
            opt(r.kalman_var_rel),
            optb(r.kalman_ok)
        )?;
    }
    f.flush()?;
    let count = |sel: fn(&harness::OracleRow) -> Option<bool>| {
        let v: Vec<bool> = table.rows.iter().filter_map(sel).collect();
        (v.iter().filter(|&&b| b).count(), v.len())
    };
    let (pp, pn) = count(|r| r.particle_ok);
    let (kp, kn) = count(|r| r.kalman_ok);
    if pn > 0 {
        println!("particle oracle: {pp}/{pn} paths within tolerance");
    }
    if kn > 0 {
        println!("Kalman-Bucy oracle: {kp}/{kn} paths within tolerance");
    }
    if pn == 0 && kn == 0 {
        run.warn("no oracle applies: particles = 0 and the model is not linear-Gaussian".into());
    }
    run.manifest.status = json!({
        "particle_passed": [pp, pn],
        "kalman_passed": [kp, kn],
    });
    run.finish()
}

fn cmd_std_reduction(a: &StdReductionArgs) -> CmdResult {
    let mut extra = spectral_overrides(&a.spectral);
    push(&mut extra, "study.ref_level", a.ref_level);
    push(&mut extra, "study.paths", a.paths);
    let cfg = load_config(&a.common, &extra)?;
    let study = study_from(&cfg)?;
    study.validate_common()?;
    let mut run = Run::start("std-reduction", &a.common.out, &cfg, study.seed)?;
    run.manifest.resolved = resolved_study(&study);

    let base: &ModelSpec = &study.model;
    let variants = vec![
        ("informative".to_string(), base.clone()),
        ("uninformative".to_string(), base.clone().with_constant_intensity(1.0)),
    ];
    let table = harness::std_reduction_study(&study, &variants)?;
    let mut f = run.create("std_reduction.json")?;
    serde_json::to_writer_pretty(&mut f, &table)?;
    writeln!(f)?;
    f.flush()?;
    for r in &table.rows {
        println!(
            "{:<14} {:<28} mean std = {:.6} (degenerate {})",
            r.label, r.intensity, r.mean_std, r.degenerate
        );
    }
    run.manifest.status = json!({
        "reduced": table.rows[0].mean_std < table.rows[1].mean_std,
    });
    run.finish()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set up {n} workers: {e}");
            return ExitCode::from(2);
        }
    }
    let res = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Filter(a) => cmd_filter(a),
        Command::Converge(a) => cmd_converge(a),
        Command::Compare(a) => cmd_compare(a),
        Command::StdReduction(a) => cmd_std_reduction(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Assertion(m)) => {
            eprintln!("assertion failed: {m}");
            ExitCode::from(3)
        }
    }
}
