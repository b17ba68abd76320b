//! Batch front-end.
//!
//! Every workflow is a subcommand driven by a JSON run config; flags are
//! reserved for the seed, the output directory, verbosity and the worker
//! cap. Exit codes are fixed so CI can tell failure classes apart:
//!
//! * `0` success (including a passing certification),
//! * `1` configuration error (bad JSON, bad field, unknown model, IO),
//! * `2` blow-up (partial outputs are retained on disk),
//! * `3` certification failed scientifically.
//!
//! The run config schema (unknown keys are rejected):
//!
//! ```json
//! {
//!   "model": "ex51_ou",             // builtin name, file path, or inline doc
//!   "output_dir": "out",
//!   "init": {"kind": "gaussian", "mean": [0.0], "std": 1.0},
//!   "sim": {"n_particles": 2000, "dt": 0.001, "t0": 0.0, "t1": 12.566,
//!           "seed": 7, "record_stride": 100, "blowup_radius": 1e6},
//!   "certify": {"burn_in_periods": 20, "trailing_periods": 5, "phases": 8,
//!               "tol": 0.05, "tail_radii": [1.0, 2.0, 4.0, 8.0]},
//!   "lyapunov": {"v0": "x1^2", "v1": "y1^2", "r_grid": [2, 3, 4, 5],
//!                "chebyshev_radius": 10.0, "tail_r_grid": [2, 4, 8]},
//!   "sweep": {"models": ["ex51_ou", {"d": 1, "m": 1, "T": 6.283185307179586,
//!             "drift": ["-1*x1"], "diffusion": [["1"]]}]}
//! }
//! ```
//!
//! All outputs are plain JSON/CSV with no wall-clock fields, so a fixed seed
//! reproduces them byte for byte.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::lyapunov::{
    chebyshev_tail_bound, radial_scan, tail_criteria, LvEngine, LyapunovSpec, ScanParams,
};
use crate::measure::{cloud_from_csv, ParticleCloud};
use crate::model::{builtin_example, builtin_names, ModelSpec};
use crate::periodic::{
    certify_periodic, export_phase_set, parameter_sweep, CertifyParams,
};
use crate::rng::{derive, KeyStream};
use crate::simulate::{export_trajectory, resample, simulate_flow, SimConfig, SimError};

#[derive(Debug, Parser)]
#[command(
    name = "mvlab",
    version,
    about = "Particle laboratory for time-periodic mean-field SDEs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Cap worker threads (default: MVLAB_THREADS or all cores). Results do
    /// not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Print progress information to stderr.
    #[arg(short, long, global = true, default_value_t = false)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evolve the particle ensemble and export the trajectory.
    Simulate(RunArgs),
    /// Certify a periodic law; exit 3 when certification fails.
    Certify(RunArgs),
    /// Radial drift scan, tail criteria and the Chebyshev bound along a run.
    Lyapunov(RunArgs),
    /// Certify a model family and report the tightness statistic.
    Sweep(RunArgs),
    /// Inspect the builtin example models.
    Examples {
        #[command(subcommand)]
        what: ExamplesCmd,
    },
}

#[derive(Debug, Subcommand)]
pub enum ExamplesCmd {
    /// List builtin model names.
    List,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Path of the JSON run config.
    #[arg(short, long)]
    pub config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    BlowUp(String),
    CertificationFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::BlowUp(_) => 2,
            CliError::CertificationFailed(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::BlowUp(m) | CliError::CertificationFailed(m) => m,
        }
    }
}

fn config_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Config(e.to_string())
}

// ---------------------------------------------------------------------------
// Run config schema

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    model: ModelRef,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    sim: SimConfig,
    #[serde(default)]
    init: Option<InitSpec>,
    #[serde(default)]
    certify: Option<CertifyParams>,
    #[serde(default)]
    lyapunov: Option<LyapunovBlock>,
    #[serde(default)]
    sweep: Option<SweepBlock>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ModelRef {
    Name(String),
    Inline(serde_json::Value),
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum InitSpec {
    /// All particles at one point.
    Delta { point: Vec<f64> },
    /// Independent Gaussian draws around a mean.
    Gaussian { mean: Vec<f64>, std: f64 },
    /// Load a cloud CSV; resampled to `n_particles` when sizes differ.
    Csv { path: PathBuf },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LyapunovBlock {
    v0: String,
    v1: String,
    r_grid: Vec<f64>,
    #[serde(default)]
    samples_per_radius: Option<usize>,
    #[serde(default)]
    cloud_size: Option<usize>,
    /// Drift bound for the Chebyshev check; defaults to the sampled
    /// supremum of LV over the run when omitted.
    #[serde(default)]
    lambda: Option<f64>,
    #[serde(default)]
    chebyshev_radius: Option<f64>,
    #[serde(default)]
    tail_r_grid: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepBlock {
    models: Vec<ModelRef>,
}

fn resolve_model(r: &ModelRef) -> Result<ModelSpec, CliError> {
    match r {
        ModelRef::Name(name) => {
            if builtin_names().iter().any(|(n, _)| n == name) {
                builtin_example(name).map_err(config_err)
            } else {
                let text = fs::read_to_string(name).map_err(|e| {
                    CliError::Config(format!(
                        "model `{name}` is neither a builtin nor a readable file: {e}"
                    ))
                })?;
                ModelSpec::from_json(&text).map_err(config_err)
            }
        }
        ModelRef::Inline(doc) => {
            ModelSpec::from_json(&serde_json::to_string(doc).map_err(config_err)?)
                .map_err(config_err)
        }
    }
}

fn build_init(
    spec: Option<&InitSpec>,
    ms: &ModelSpec,
    cfg: &SimConfig,
) -> Result<ParticleCloud, CliError> {
    let d = ms.dim();
    let n = cfg.n_particles;
    match spec {
        None => ParticleCloud::delta(&vec![0.0; d], n, cfg.t0).map_err(config_err),
        Some(InitSpec::Delta { point }) => {
            if point.len() != d {
                return Err(CliError::Config(format!(
                    "init.point has length {}, model dimension is {d}",
                    point.len()
                )));
            }
            ParticleCloud::delta(point, n, cfg.t0).map_err(config_err)
        }
        Some(InitSpec::Gaussian { mean, std }) => {
            if mean.len() != d {
                return Err(CliError::Config(format!(
                    "init.mean has length {}, model dimension is {d}",
                    mean.len()
                )));
            }
            if !(*std >= 0.0) {
                return Err(CliError::Config("init.std must be >= 0".into()));
            }
            let mut stream = KeyStream::new(derive(cfg.seed, 0x1417));
            let mut pos = Vec::with_capacity(n * d);
            for _ in 0..n {
                for mj in mean {
                    pos.push(mj + std * stream.next_normal());
                }
            }
            ParticleCloud::uniform(d, pos, cfg.t0).map_err(config_err)
        }
        Some(InitSpec::Csv { path }) => {
            let file = fs::File::open(path).map_err(config_err)?;
            let cloud = cloud_from_csv(std::io::BufReader::new(file)).map_err(config_err)?;
            if cloud.dim() != d {
                return Err(CliError::Config(format!(
                    "init csv has dimension {}, model dimension is {d}",
                    cloud.dim()
                )));
            }
            let cloud = if cloud.len() == n {
                cloud
            } else {
                resample(&cloud, n, derive(cfg.seed, 0x1418)).map_err(config_err)?
            };
            Ok(cloud.with_time(cfg.t0))
        }
    }
}

fn load_config(args: &RunArgs) -> Result<(RunConfig, PathBuf), CliError> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let mut cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.config.display())))?;
    if let Some(seed) = args.seed {
        cfg.sim.seed = seed;
    }
    let out = args
        .output
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("mvlab-out"));
    cfg.output_dir = Some(out.clone());
    Ok((cfg, out))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(config_err)?;
    }
    let mut f = fs::File::create(path).map_err(config_err)?;
    let text = serde_json::to_string_pretty(value).map_err(config_err)?;
    f.write_all(text.as_bytes()).map_err(config_err)?;
    f.write_all(b"\n").map_err(config_err)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(config_err)?;
    }
    fs::write(path, text).map_err(config_err)
}

// ---------------------------------------------------------------------------
// Commands

pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ms = resolve_model(&cfg.model)?;
    cfg.sim.validate(ms.period()).map_err(config_err)?;
    let init = build_init(cfg.init.as_ref(), &ms, &cfg.sim)?;
    match simulate_flow(&ms, &init, &cfg.sim) {
        Ok(traj) => {
            export_trajectory(&traj, &out.join("trajectory")).map_err(config_err)?;
            Ok(())
        }
        Err(SimError::BlowUp {
            t,
            particle,
            reason,
            partial,
        }) => {
            export_trajectory(&partial, &out.join("trajectory")).map_err(config_err)?;
            Err(CliError::BlowUp(format!(
                "blow-up at t={t}, particle {particle} ({reason}); partial trajectory exported"
            )))
        }
        Err(e) => Err(config_err(e)),
    }
}

pub fn cmd_certify(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ms = resolve_model(&cfg.model)?;
    cfg.sim.validate(ms.period()).map_err(config_err)?;
    let params = cfg.certify.clone().unwrap_or_default();
    let init = build_init(cfg.init.as_ref(), &ms, &cfg.sim)?;
    match certify_periodic(&ms, &init, &cfg.sim, &params) {
        Ok(law) => {
            write_json(&out.join("certificate.json"), &law.certificate)?;
            export_phase_set(&law.phases, &out.join("phases")).map_err(config_err)?;
            if law.certificate.pass {
                Ok(())
            } else {
                Err(CliError::CertificationFailed(format!(
                    "max trailing distance {} exceeds tol {}",
                    law.certificate.max_distance, law.certificate.tol
                )))
            }
        }
        Err(crate::periodic::PeriodicError::Sim(e)) => match *e {
            SimError::BlowUp {
                t,
                particle,
                reason,
                partial,
            } => {
                export_trajectory(&partial, &out.join("trajectory")).map_err(config_err)?;
                Err(CliError::BlowUp(format!(
                    "blow-up at t={t}, particle {particle} ({reason}); partial trajectory exported"
                )))
            }
            other => Err(config_err(other)),
        },
        Err(e) => Err(config_err(e)),
    }
}

pub fn cmd_lyapunov(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ms = resolve_model(&cfg.model)?;
    cfg.sim.validate(ms.period()).map_err(config_err)?;
    let block = cfg
        .lyapunov
        .as_ref()
        .ok_or_else(|| CliError::Config("missing `lyapunov` block".into()))?;
    let v0 = crate::expr::Expr::parse(&block.v0).map_err(config_err)?;
    let v1 = crate::expr::Expr::parse(&block.v1).map_err(config_err)?;
    let ls = LyapunovSpec::new(ms.dim(), ms.period(), v0, v1).map_err(config_err)?;
    let mut scan_params = ScanParams {
        seed: derive(cfg.sim.seed, 0x5CA0),
        ..ScanParams::default()
    };
    if let Some(s) = block.samples_per_radius {
        scan_params.samples_per_radius = s;
    }
    if let Some(c) = block.cloud_size {
        scan_params.cloud_size = c;
    }

    let scan = radial_scan(&ls, &ms, &block.r_grid, scan_params).map_err(config_err)?;
    write_json(&out.join("radial_scan.json"), &scan)?;
    write_text(&out.join("radial_scan.csv"), &scan.to_csv())?;

    // snap the step so a period is an exact multiple of the stride: the
    // tail criteria sample the run at period boundaries
    let mut run_cfg = cfg.sim;
    let per_stride = (ms.period() / (run_cfg.dt * run_cfg.record_stride as f64))
        .round()
        .max(1.0) as usize;
    run_cfg.dt = ms.period() / (per_stride * run_cfg.record_stride) as f64;
    let init = build_init(cfg.init.as_ref(), &ms, &run_cfg)?;
    let traj = match simulate_flow(&ms, &init, &run_cfg) {
        Ok(t) => t,
        Err(SimError::BlowUp {
            t,
            particle,
            reason,
            partial,
        }) => {
            export_trajectory(&partial, &out.join("trajectory")).map_err(config_err)?;
            return Err(CliError::BlowUp(format!(
                "blow-up at t={t}, particle {particle} ({reason}); partial trajectory exported"
            )));
        }
        Err(e) => return Err(config_err(e)),
    };

    if let Some(grid) = &block.tail_r_grid {
        let report = tail_criteria(&traj, grid, ms.period()).map_err(config_err)?;
        write_json(&out.join("tail_criteria.json"), &report)?;
        write_text(&out.join("tail_criteria.csv"), &report.to_csv())?;
    }

    if let Some(radius) = block.chebyshev_radius {
        let lambda = match block.lambda {
            Some(l) => l,
            None => {
                // default: sampled supremum of LV over the visited states
                let engine = LvEngine::new(&ls, &ms).map_err(config_err)?;
                let mut sup = f64::NEG_INFINITY;
                for cloud in &traj.snapshots {
                    let ctx = engine.step_ctx(cloud.time_stamp(), cloud);
                    for i in 0..cloud.len() {
                        sup = sup.max(engine.lv_at(&ctx, cloud.position(i)));
                    }
                }
                sup
            }
        };
        let report =
            chebyshev_tail_bound(&ls, &ms, &traj, lambda, radius).map_err(config_err)?;
        write_json(&out.join("chebyshev.json"), &report)?;
    }
    Ok(())
}

pub fn cmd_sweep(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let block = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Config("missing `sweep` block".into()))?;
    let models: Vec<ModelSpec> = block
        .models
        .iter()
        .map(resolve_model)
        .collect::<Result<_, _>>()?;
    if models.is_empty() {
        return Err(CliError::Config("sweep.models must be nonempty".into()));
    }
    models[0]
        .period()
        .is_finite()
        .then_some(())
        .ok_or_else(|| CliError::Config("bad model period".into()))?;
    cfg.sim.validate(models[0].period()).map_err(config_err)?;
    let params = cfg.certify.clone().unwrap_or_default();
    let init = build_init(cfg.init.as_ref(), &models[0], &cfg.sim)?;
    let report =
        parameter_sweep(&models, &init, &cfg.sim, &params).map_err(config_err)?;
    write_json(&out.join("sweep.json"), &report)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Entry point

fn init_threads(cap: Option<usize>) {
    let n = cap.or_else(|| {
        std::env::var("MVLAB_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
    });
    if let Some(n) = n {
        // ignore the error when a pool already exists (tests, repeat calls)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

pub fn run(cli: Cli) -> i32 {
    init_threads(cli.threads);
    let outcome = match &cli.command {
        Command::Examples {
            what: ExamplesCmd::List,
        } => {
            for (name, blurb) in builtin_names() {
                println!("{name:14} {blurb}");
            }
            Ok(())
        }
        Command::Simulate(args) => {
            load_config(args).and_then(|(cfg, out)| cmd_simulate(&cfg, &out))
        }
        Command::Certify(args) => {
            load_config(args).and_then(|(cfg, out)| cmd_certify(&cfg, &out))
        }
        Command::Lyapunov(args) => {
            load_config(args).and_then(|(cfg, out)| cmd_lyapunov(&cfg, &out))
        }
        Command::Sweep(args) => load_config(args).and_then(|(cfg, out)| cmd_sweep(&cfg, &out)),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(config: &Path, out: &Path) -> RunArgs {
        RunArgs {
            config: config.to_path_buf(),
            seed: None,
            output: Some(out.to_path_buf()),
        }
    }

    fn write_cfg(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("run.json");
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn simulate_tiny_run_writes_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfgp = write_cfg(
            dir.path(),
            r#"{
              "model": "ex51_ou",
              "sim": {"n_particles": 16, "dt": 0.05, "t0": 0.0, "t1": 1.0,
                      "seed": 7, "record_stride": 5, "blowup_radius": 1e6}
            }"#,
        );
        let (cfg, out) = load_config(&args(&cfgp, &dir.path().join("out"))).unwrap();
        cmd_simulate(&cfg, &out).unwrap();
        assert!(out.join("trajectory/manifest.json").exists());
    }

    #[test]
    fn bad_dt_is_a_config_error_naming_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let cfgp = write_cfg(
            dir.path(),
            r#"{
              "model": "ex51_ou",
              "sim": {"n_particles": 16, "dt": -0.05, "t0": 0.0, "t1": 1.0,
                      "seed": 7, "record_stride": 5, "blowup_radius": 1e6}
            }"#,
        );
        let (cfg, out) = load_config(&args(&cfgp, &dir.path().join("out"))).unwrap();
        let err = cmd_simulate(&cfg, &out).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.message().contains("dt"), "message: {}", err.message());
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfgp = write_cfg(
            dir.path(),
            r#"{"model": "ex51_ou", "simulate": {}, "sim": {"n_particles": 1,
              "dt": 0.05, "t0": 0, "t1": 1, "seed": 1, "record_stride": 1,
              "blowup_radius": 1e6}}"#,
        );
        assert!(load_config(&args(&cfgp, &dir.path().join("out"))).is_err());
    }

    #[test]
    fn forced_blowup_exits_2_with_partial_export() {
        let dir = tempfile::tempdir().unwrap();
        let cfgp = write_cfg(
            dir.path(),
            r#"{
              "model": "ex52_quartic",
              "init": {"kind": "gaussian", "mean": [0.0], "std": 1.0},
              "sim": {"n_particles": 64, "dt": 0.01, "t0": 0.0, "t1": 6.0,
                      "seed": 3, "record_stride": 10, "blowup_radius": 0.1}
            }"#,
        );
        let (cfg, out) = load_config(&args(&cfgp, &dir.path().join("out"))).unwrap();
        let err = cmd_simulate(&cfg, &out).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(out.join("trajectory/manifest.json").exists());
    }

    #[test]
    fn certify_zero_model_exits_clean() {
        let dir = tempfile::tempdir().unwrap();
        let model = r#"{"d":1,"m":1,"T":6.283185307179586,"drift":["0"],"diffusion":[["0"]]}"#;
        let cfgp = write_cfg(
            dir.path(),
            &format!(
                r#"{{
                  "model": {model},
                  "sim": {{"n_particles": 16, "dt": 0.05, "t0": 0.0, "t1": 1.0,
                          "seed": 5, "record_stride": 1, "blowup_radius": 1e6}},
                  "certify": {{"burn_in_periods": 1, "trailing_periods": 2,
                               "phases": 2, "tol": 1e-9, "tail_radii": [1.0]}}
                }}"#
            ),
        );
        let (cfg, out) = load_config(&args(&cfgp, &dir.path().join("out"))).unwrap();
        cmd_certify(&cfg, &out).unwrap();
        assert!(out.join("certificate.json").exists());
        assert!(out.join("phases/phases.json").exists());
    }

    #[test]
    fn certify_below_noise_floor_exits_3() {
        let dir = tempfile::tempdir().unwrap();
        let cfgp = write_cfg(
            dir.path(),
            r#"{
              "model": "ex51_ou",
              "init": {"kind": "gaussian", "mean": [0.0], "std": 0.5},
              "sim": {"n_particles": 200, "dt": 0.05, "t0": 0.0, "t1": 1.0,
                      "seed": 11, "record_stride": 1, "blowup_radius": 1e6},
              "certify": {"burn_in_periods": 2, "trailing_periods": 2,
                          "phases": 2, "tol": 1e-6, "tail_radii": [4.0]}
            }"#,
        );
        let (cfg, out) = load_config(&args(&cfgp, &dir.path().join("out"))).unwrap();
        let err = cmd_certify(&cfg, &out).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn lyapunov_command_writes_reports() {
        let dir = tempfile::tempdir().unwrap();
        let cfgp = write_cfg(
            dir.path(),
            r#"{
              "model": "ex52_quartic",
              "init": {"kind": "gaussian", "mean": [0.0], "std": 0.4},
              "sim": {"n_particles": 100, "dt": 0.0157079632679, "t0": 0.0,
                      "t1": 12.566370614359172, "seed": 2, "record_stride": 50,
                      "blowup_radius": 50.0},
              "lyapunov": {"v0": "x1^2", "v1": "y1^2", "r_grid": [2.0, 3.0],
                           "samples_per_radius": 64, "chebyshev_radius": 5.0,
                           "tail_r_grid": [2.0, 4.0]}
            }"#,
        );
        let (cfg, out) = load_config(&args(&cfgp, &dir.path().join("out"))).unwrap();
        cmd_lyapunov(&cfg, &out).unwrap();
        assert!(out.join("radial_scan.json").exists());
        assert!(out.join("radial_scan.csv").exists());
        assert!(out.join("tail_criteria.json").exists());
        assert!(out.join("chebyshev.json").exists());
    }

    #[test]
    fn sweep_command_writes_report() {
        let dir = tempfile::tempdir().unwrap();
        let cfgp = write_cfg(
            dir.path(),
            r#"{
              "model": "ex51_ou",
              "sim": {"n_particles": 120, "dt": 0.0157079632679, "t0": 0.0,
                      "t1": 1.0, "seed": 17, "record_stride": 1,
                      "blowup_radius": 1e6},
              "certify": {"burn_in_periods": 2, "trailing_periods": 2,
                          "phases": 2, "tol": 0.8, "tail_radii": [10.0]},
              "sweep": {"models": ["ex51_ou", "ex53_forced"]}
            }"#,
        );
        let (cfg, out) = load_config(&args(&cfgp, &dir.path().join("out"))).unwrap();
        cmd_sweep(&cfg, &out).unwrap();
        assert!(out.join("sweep.json").exists());
    }
}
