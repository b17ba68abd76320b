//! Periodic-law construction and certification.
//!
//! A `T`-periodic law is approximated by a [`PhaseMeasureSet`]: one particle
//! cloud per phase `s = k T / m`. Two constructions are provided:
//!
//! * [`kb_average`] pools the ensembles observed at `s0 + s + kT` over `k`
//!   into one weighted cloud per phase, the particle realization of a Cesaro
//!   average of the law along period shifts;
//! * [`period_map_iterate`] iterates the one-period flow map on the law and
//!   stops when successive iterates are close in transport distance.
//!
//! [`certify_periodic`] runs burn-in plus trailing periods and declares the
//! law periodic when every consecutive-period distance over the trailing
//! window stays within the tolerance; the certificate embeds its full
//! provenance and a tail-mass profile. [`parameter_sweep`] certifies a family
//! of models and reports the uniform tail profile (the tightness statistic)
//! plus distances to the last family member.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{Compiled, Expr, ExprError, MultiIndex, TrigTable};
use crate::measure::{
    cloud_from_csv, cloud_to_csv, sliced_wasserstein2, wasserstein2_1d, Kahan, MeasureError,
    ParticleCloud,
};
use crate::model::{ModelError, ModelSpec};
use crate::rng::derive;
use crate::simulate::{
    resample, simulate_flow, steps_per_period, SimConfig, SimError, Trajectory,
};

#[derive(Debug, Error)]
pub enum PeriodicError {
    #[error(transparent)]
    Sim(#[from] Box<SimError>),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("params: {0}")]
    BadParams(String),
    #[error("snapshot stride misaligned: {0}")]
    Misaligned(String),
    #[error("trajectory too short: spans {got:.3} periods, need {need}")]
    InsufficientSpan { got: f64, need: f64 },
    #[error("sweep family mismatch: {0}")]
    MixedFamily(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("export: {0}")]
    Export(String),
}

impl From<SimError> for PeriodicError {
    fn from(e: SimError) -> Self {
        PeriodicError::Sim(Box::new(e))
    }
}

/// Transport distance dispatch: exact in one dimension, sliced otherwise.
pub fn w2_auto(a: &ParticleCloud, b: &ParticleCloud, seed: u64) -> Result<f64, MeasureError> {
    if a.dim() == 1 {
        wasserstein2_1d(a, b)
    } else {
        sliced_wasserstein2(a, b, 64, seed)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseProvenance {
    pub periods_averaged: usize,
    pub seed: u64,
    pub n_particles: usize,
    pub dt: f64,
}

/// Family of clouds indexed by phase, the discrete surrogate of a
/// `T`-periodic law.
#[derive(Debug, Clone)]
pub struct PhaseMeasureSet {
    pub period: f64,
    /// Exactly `k T / m` for `k = 0..m`.
    pub phases: Vec<f64>,
    pub clouds: Vec<ParticleCloud>,
    pub provenance: PhaseProvenance,
}

impl PhaseMeasureSet {
    pub fn phase_count(&self) -> usize {
        self.phases.len()
    }
}

/// Pool the ensembles at `s0 + s + kT`, `k = 1..=n`, into one cloud per
/// phase `s = j T / m`, weights renormalized by `1/n`.
pub fn kb_average(
    traj: &Trajectory,
    s0: f64,
    period: f64,
    n: usize,
    m: usize,
) -> Result<PhaseMeasureSet, PeriodicError> {
    if m < 2 {
        return Err(PeriodicError::BadParams(format!(
            "phase count m = {m} must be >= 2"
        )));
    }
    if n < 1 {
        return Err(PeriodicError::BadParams("n must be >= 1".into()));
    }
    let t0 = traj.config.t0;
    let dt = traj.dt_eff;
    let stride_dt = dt * traj.config.record_stride as f64;
    let phase_gap = period / m as f64;
    let ratio = phase_gap / stride_dt;
    if (ratio - ratio.round()).abs() > 1e-6 || ratio.round() < 1.0 {
        return Err(PeriodicError::Misaligned(format!(
            "snapshot spacing {stride_dt} does not divide T/m = {phase_gap}"
        )));
    }
    let span_need = s0 + (n as f64 + 1.0) * period;
    let t_last = t0 + *traj.snapshot_steps.last().unwrap() as f64 * dt;
    if t_last + 1e-9 * period < span_need {
        return Err(PeriodicError::InsufficientSpan {
            got: (t_last - s0) / period,
            need: n as f64 + 1.0,
        });
    }

    let snap_at = |time: f64| -> Result<&ParticleCloud, PeriodicError> {
        let step = ((time - t0) / dt).round() as u64;
        let rel = ((time - t0) / dt - step as f64).abs();
        if rel > 1e-6 {
            return Err(PeriodicError::Misaligned(format!(
                "time {time} is not on the step grid"
            )));
        }
        traj.index_of_step(step)
            .map(|k| &traj.snapshots[k])
            .ok_or_else(|| {
                PeriodicError::Misaligned(format!("no snapshot recorded at step {step}"))
            })
    };

    let mut phases = Vec::with_capacity(m);
    let mut clouds = Vec::with_capacity(m);
    let d = traj.model.dim();
    for j in 0..m {
        let s = period * j as f64 / m as f64;
        let mut positions = Vec::new();
        let mut weights = Vec::new();
        for k in 1..=n {
            let cloud = snap_at(s0 + s + k as f64 * period)?;
            positions.extend_from_slice(cloud.positions());
            weights.extend(cloud.weights().iter().map(|w| w / n as f64));
        }
        phases.push(s);
        clouds.push(ParticleCloud::new(d, positions, weights, s)?);
    }
    Ok(PhaseMeasureSet {
        period,
        phases,
        clouds,
        provenance: PhaseProvenance {
            periods_averaged: n,
            seed: traj.config.seed,
            n_particles: traj.config.n_particles,
            dt,
        },
    })
}

// ---------------------------------------------------------------------------
// Certification

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyParams {
    pub burn_in_periods: usize,
    pub trailing_periods: usize,
    /// Phase count `m`.
    pub phases: usize,
    /// Largest admissible consecutive-period transport distance.
    pub tol: f64,
    /// Radii of the attached tail-mass profile.
    pub tail_radii: Vec<f64>,
}

impl Default for CertifyParams {
    /// Defaults calibrated on the linear builtin at `N = 5000`, `dt = 1e-3`.
    fn default() -> Self {
        CertifyParams {
            burn_in_periods: 20,
            trailing_periods: 5,
            phases: 8,
            tol: 0.05,
            tail_radii: vec![1.0, 2.0, 4.0, 8.0, 16.0],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TailProfileRow {
    pub radius: f64,
    pub sup_tail_mass: f64,
}

/// Per-phase trailing-distance record with verdict and provenance.
#[derive(Debug, Clone, Serialize)]
pub struct PeriodicCertificate {
    pub pass: bool,
    pub max_distance: f64,
    pub tol: f64,
    /// `phases x (trailing - 1)` consecutive-period distances.
    pub trailing_distances: Vec<Vec<f64>>,
    pub phases: usize,
    pub burn_in_periods: usize,
    pub trailing_periods: usize,
    pub n_particles: usize,
    pub dt_eff: f64,
    pub seed: u64,
    pub period: f64,
    pub tail_profile: Vec<TailProfileRow>,
    pub model: serde_json::Value,
}

/// A certificate together with the pooled phase measures it certifies.
#[derive(Debug, Clone)]
pub struct CertifiedPeriodicLaw {
    pub certificate: PeriodicCertificate,
    pub phases: PhaseMeasureSet,
}

fn aligned_config(
    ms: &ModelSpec,
    cfg: &SimConfig,
    periods: usize,
    m: usize,
) -> (SimConfig, usize) {
    let spp = steps_per_period(ms.period(), cfg.dt, m);
    let stride = spp / m;
    let run = SimConfig {
        dt: ms.period() / spp as f64,
        t0: cfg.t0,
        t1: cfg.t0 + periods as f64 * ms.period(),
        record_stride: stride,
        ..*cfg
    };
    (run, spp)
}

/// Simulate burn-in plus trailing periods and certify periodicity of the law
/// flow: per phase, every consecutive-period transport distance over the
/// trailing window must stay within `params.tol`. Blow-up propagates as an
/// error, never as a verdict.
///
/// `init` is resampled to `cfg.n_particles` draws (seed-dependent) when the
/// sizes differ.
pub fn certify_periodic(
    ms: &ModelSpec,
    init: &ParticleCloud,
    cfg: &SimConfig,
    params: &CertifyParams,
) -> Result<CertifiedPeriodicLaw, PeriodicError> {
    if params.trailing_periods < 2 {
        return Err(PeriodicError::BadParams(
            "trailing_periods must be >= 2".into(),
        ));
    }
    if params.burn_in_periods < 1 {
        return Err(PeriodicError::BadParams(
            "burn_in_periods must be >= 1".into(),
        ));
    }
    if !(params.tol > 0.0) {
        return Err(PeriodicError::BadParams("tol must be positive".into()));
    }
    if params.phases < 2 {
        return Err(PeriodicError::BadParams("phases must be >= 2".into()));
    }
    let total = params.burn_in_periods + params.trailing_periods;
    let m = params.phases;
    let (run_cfg, _) = aligned_config(ms, cfg, total, m);
    let init = if init.len() == run_cfg.n_particles {
        init.clone().with_time(run_cfg.t0)
    } else {
        resample(init, run_cfg.n_particles, derive(cfg.seed, 0x1217))?.with_time(run_cfg.t0)
    };
    let traj = simulate_flow(ms, &init, &run_cfg)?;

    let snap = |p: usize, j: usize| -> &ParticleCloud { &traj.snapshots[p * m + j] };
    let mut trailing_distances = Vec::with_capacity(m);
    let mut max_distance = 0.0f64;
    for j in 0..m {
        let mut row = Vec::with_capacity(params.trailing_periods - 1);
        for p in params.burn_in_periods..total - 1 {
            let dist = w2_auto(snap(p, j), snap(p + 1, j), derive(cfg.seed, 0xD157))?;
            max_distance = max_distance.max(dist);
            row.push(dist);
        }
        trailing_distances.push(row);
    }

    let phases = kb_average(
        &traj,
        run_cfg.t0 + (params.burn_in_periods as f64 - 1.0) * ms.period(),
        ms.period(),
        params.trailing_periods,
        m,
    )?;

    let mut tail_profile = Vec::with_capacity(params.tail_radii.len());
    for &r in &params.tail_radii {
        let mut sup = 0.0f64;
        for cloud in &phases.clouds {
            let mass = if cloud.second_moment_norm() > r {
                1.0
            } else {
                cloud.tail_mass(r)?
            };
            sup = sup.max(mass);
        }
        tail_profile.push(TailProfileRow {
            radius: r,
            sup_tail_mass: sup,
        });
    }

    let certificate = PeriodicCertificate {
        pass: max_distance <= params.tol,
        max_distance,
        tol: params.tol,
        trailing_distances,
        phases: m,
        burn_in_periods: params.burn_in_periods,
        trailing_periods: params.trailing_periods,
        n_particles: run_cfg.n_particles,
        dt_eff: traj.dt_eff,
        seed: run_cfg.seed,
        period: ms.period(),
        tail_profile,
        model: serde_json::from_str(&ms.to_json())?,
    };
    Ok(CertifiedPeriodicLaw {
        certificate,
        phases,
    })
}

// ---------------------------------------------------------------------------
// Period-map iteration

#[derive(Debug, Clone, Serialize)]
pub struct IterationLog {
    /// Transport distance between consecutive one-period iterates.
    pub distances: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub tol: f64,
}

/// Iterate the one-period flow map `mu -> law at t0 + T started from mu`
/// until successive iterates are within `tol`, then record one period of the
/// fixed point as a phase set. A non-convergent run returns the best iterate
/// with `converged = false` in the log.
pub fn period_map_iterate(
    ms: &ModelSpec,
    init: &ParticleCloud,
    cfg: &SimConfig,
    max_iters: usize,
    tol: f64,
    m: usize,
) -> Result<(PhaseMeasureSet, IterationLog), PeriodicError> {
    if max_iters == 0 {
        return Err(PeriodicError::BadParams("max_iters must be >= 1".into()));
    }
    if !(tol > 0.0) {
        return Err(PeriodicError::BadParams("tol must be positive".into()));
    }
    let (one_period, _) = aligned_config(ms, cfg, 1, m.max(2));
    let mut current = if init.len() == one_period.n_particles {
        init.clone().with_time(one_period.t0)
    } else {
        resample(init, one_period.n_particles, derive(cfg.seed, 0x9A9))?
            .with_time(one_period.t0)
    };
    let mut distances = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..max_iters {
        let cfg_i = SimConfig {
            seed: derive(cfg.seed, iter as u64),
            ..one_period
        };
        let traj = simulate_flow(ms, &current, &cfg_i)?;
        let next = traj.last().clone().with_time(one_period.t0);
        let dist = w2_auto(&current, &next, derive(cfg.seed, 0xA11))?;
        distances.push(dist);
        current = next;
        iterations = iter + 1;
        if dist <= tol {
            converged = true;
            break;
        }
    }
    // one more recorded period from the fixed point
    let cfg_f = SimConfig {
        seed: derive(cfg.seed, 0xF1),
        ..one_period
    };
    let traj = simulate_flow(ms, &current, &cfg_f)?;
    let phases = kb_average(&traj, one_period.t0 - ms.period(), ms.period(), 1, m.max(2))?;
    Ok((
        phases,
        IterationLog {
            distances,
            converged,
            iterations,
            tol,
        },
    ))
}

// ---------------------------------------------------------------------------
// Cesaro functional averages

#[derive(Debug, Clone, Serialize)]
pub struct CesaroReport {
    pub ns: Vec<usize>,
    /// `(1/(nT)) int <f(s,.,mu_s), mu_s> ds` per requested `n`.
    pub averages: Vec<f64>,
    /// Absolute increments between consecutive averages.
    pub increments: Vec<f64>,
    /// Increments failed to shrink monotonically.
    pub non_monotone: bool,
    pub max_abs_integrand: f64,
}

/// Time averages of the ensemble functional `<f(s, ., mu_s), mu_s>` over
/// `n` periods for each `n` in `ns` (trapezoid rule on snapshots). `f` may
/// reference coordinates, observables and harmonics of the model period.
pub fn cesaro_functional_convergence(
    ms: &ModelSpec,
    init: &ParticleCloud,
    f: &Expr,
    cfg: &SimConfig,
    ns: &[usize],
) -> Result<CesaroReport, PeriodicError> {
    if ns.is_empty() || ns.windows(2).any(|w| w[0] >= w[1]) || ns[0] == 0 {
        return Err(PeriodicError::BadParams(
            "ns must be a strictly increasing list of positive periods".into(),
        ));
    }
    if let Some(idx) = f.max_coord() {
        if idx >= ms.dim() {
            return Err(PeriodicError::BadParams(format!(
                "f references coordinate x{} beyond dimension {}",
                idx + 1,
                ms.dim()
            )));
        }
    }
    let mut obs_idx: Vec<MultiIndex> = Vec::new();
    f.collect_obs(&mut obs_idx);
    for mi in &obs_idx {
        if mi.len() != ms.dim() {
            return Err(PeriodicError::BadParams(format!(
                "f observable M[{mi}] does not match dimension {}",
                ms.dim()
            )));
        }
    }
    let n_max = *ns.last().unwrap();
    let (run_cfg, _) = aligned_config(ms, cfg, n_max, 2);
    let init = if init.len() == run_cfg.n_particles {
        init.clone().with_time(run_cfg.t0)
    } else {
        resample(init, run_cfg.n_particles, derive(cfg.seed, 0xCE5))?.with_time(run_cfg.t0)
    };
    let traj = simulate_flow(ms, &init, &run_cfg)?;

    let mut slots = Vec::new();
    let compiled = Compiled::compile(f, &mut slots);
    let omega = ms.omega();
    let max_k = f.max_harmonic().max(1);

    let times = traj.times();
    let mut g = Vec::with_capacity(traj.snapshots.len());
    let mut max_abs: f64 = 0.0;
    for cloud in &traj.snapshots {
        let t = cloud.time_stamp();
        let trig = TrigTable::at(t, omega, max_k);
        let order = cloud.canonical_order();
        let obs: Vec<f64> = slots
            .iter()
            .map(|mi| cloud.moment_in_order(mi.exps(), &order))
            .collect();
        let mut acc = Kahan::default();
        for i in 0..cloud.len() {
            acc.add(cloud.weights()[i] * compiled.eval(cloud.position(i), &trig, &obs));
        }
        let v = acc.value();
        if !v.is_finite() {
            return Err(PeriodicError::BadParams(
                "functional is unbounded on the visited region".into(),
            ));
        }
        max_abs = max_abs.max(v.abs());
        g.push(v);
    }

    let mut averages = Vec::with_capacity(ns.len());
    for &n in ns {
        let t_end = run_cfg.t0 + n as f64 * ms.period();
        let mut num = Kahan::default();
        let mut den = Kahan::default();
        for w in 0..g.len() - 1 {
            if times[w + 1] > t_end + 1e-9 {
                break;
            }
            let h = times[w + 1] - times[w];
            num.add(0.5 * (g[w] + g[w + 1]) * h);
            den.add(h);
        }
        averages.push(num.value() / den.value());
    }
    let increments: Vec<f64> = averages.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let non_monotone = increments.windows(2).any(|w| w[1] > w[0] + 1e-12);
    Ok(CesaroReport {
        ns: ns.to_vec(),
        averages,
        increments,
        non_monotone,
        max_abs_integrand: max_abs,
    })
}

// ---------------------------------------------------------------------------
// Parameter sweep

#[derive(Debug, Clone, Serialize)]
pub struct SweepMember {
    pub index: usize,
    pub pass: Option<bool>,
    pub max_distance: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub members: Vec<SweepMember>,
    /// `sup_k` tail mass of the certified phase measures, per radius.
    pub uniform_tail: Vec<TailProfileRow>,
    /// Per member (all but the last), per phase: distance to the last
    /// member's phase measure.
    pub distance_to_last: Vec<Vec<f64>>,
    pub params: CertifyParams,
    pub n_particles: usize,
    pub dt: f64,
    pub seed: u64,
}

/// Certify every family member (independent derived seeds) and report the
/// tightness statistic plus per-phase distances to the last member. A member
/// that fails to certify is recorded, not fatal.
pub fn parameter_sweep(
    models: &[ModelSpec],
    init: &ParticleCloud,
    cfg: &SimConfig,
    params: &CertifyParams,
) -> Result<SweepReport, PeriodicError> {
    if models.len() < 2 {
        return Err(PeriodicError::BadParams(
            "sweep needs at least two models".into(),
        ));
    }
    let d = models[0].dim();
    let period = models[0].period();
    for (k, ms) in models.iter().enumerate() {
        if ms.dim() != d || (ms.period() - period).abs() > 1e-12 * period {
            return Err(PeriodicError::MixedFamily(format!(
                "member {k} has (d, T) = ({}, {}), expected ({d}, {period})",
                ms.dim(),
                ms.period()
            )));
        }
    }
    let mut members = Vec::with_capacity(models.len());
    let mut laws: Vec<Option<CertifiedPeriodicLaw>> = Vec::with_capacity(models.len());
    for (k, ms) in models.iter().enumerate() {
        let cfg_k = SimConfig {
            seed: derive(cfg.seed, 0x5EED + k as u64),
            ..*cfg
        };
        match certify_periodic(ms, init, &cfg_k, params) {
            Ok(law) => {
                members.push(SweepMember {
                    index: k,
                    pass: Some(law.certificate.pass),
                    max_distance: Some(law.certificate.max_distance),
                    error: None,
                });
                laws.push(Some(law));
            }
            Err(e) => {
                members.push(SweepMember {
                    index: k,
                    pass: None,
                    max_distance: None,
                    error: Some(e.to_string()),
                });
                laws.push(None);
            }
        }
    }

    let mut uniform_tail = Vec::with_capacity(params.tail_radii.len());
    for (ri, &r) in params.tail_radii.iter().enumerate() {
        let mut sup = 0.0f64;
        for law in laws.iter().flatten() {
            sup = sup.max(law.certificate.tail_profile[ri].sup_tail_mass);
        }
        uniform_tail.push(TailProfileRow {
            radius: r,
            sup_tail_mass: sup,
        });
    }

    let mut distance_to_last = Vec::new();
    if let Some(Some(last)) = laws.last() {
        for law in laws.iter().take(laws.len() - 1) {
            let mut row = Vec::new();
            if let Some(law) = law {
                for (a, b) in law.phases.clouds.iter().zip(&last.phases.clouds) {
                    row.push(w2_auto(a, b, derive(cfg.seed, 0xD25))?);
                }
            }
            distance_to_last.push(row);
        }
    }
    Ok(SweepReport {
        members,
        uniform_tail,
        distance_to_last,
        params: params.clone(),
        n_particles: cfg.n_particles,
        dt: cfg.dt,
        seed: cfg.seed,
    })
}

// ---------------------------------------------------------------------------
// Phase-set export

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PhasesManifest {
    format: String,
    period: f64,
    phases: Vec<f64>,
    provenance: PhaseProvenance,
}

/// Write one cloud CSV per phase plus `phases.json`.
pub fn export_phase_set(set: &PhaseMeasureSet, dir: &Path) -> Result<(), PeriodicError> {
    fs::create_dir_all(dir)?;
    let manifest = PhasesManifest {
        format: "mvlab-phases/1".into(),
        period: set.period,
        phases: set.phases.clone(),
        provenance: set.provenance.clone(),
    };
    let mut mf = BufWriter::new(fs::File::create(dir.join("phases.json"))?);
    serde_json::to_writer_pretty(&mut mf, &manifest)?;
    mf.write_all(b"\n")?;
    mf.flush()?;
    for (j, cloud) in set.clouds.iter().enumerate() {
        let mut f = BufWriter::new(fs::File::create(dir.join(format!("phase_{j:03}.csv")))?);
        cloud_to_csv(cloud, &mut f)?;
        f.flush()?;
    }
    Ok(())
}

pub fn import_phase_set(dir: &Path) -> Result<PhaseMeasureSet, PeriodicError> {
    let text = fs::read_to_string(dir.join("phases.json"))?;
    let manifest: PhasesManifest = serde_json::from_str(&text)?;
    if manifest.format != "mvlab-phases/1" {
        return Err(PeriodicError::Export(format!(
            "unsupported format `{}`",
            manifest.format
        )));
    }
    let mut clouds = Vec::with_capacity(manifest.phases.len());
    for j in 0..manifest.phases.len() {
        let f = BufReader::new(fs::File::open(dir.join(format!("phase_{j:03}.csv")))?);
        clouds.push(cloud_from_csv(f)?);
    }
    Ok(PhaseMeasureSet {
        period: manifest.period,
        phases: manifest.phases,
        clouds,
        provenance: manifest.provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_example;

    fn zero_model() -> ModelSpec {
        ModelSpec::new(
            1,
            1,
            std::f64::consts::TAU,
            vec![Expr::Const(0.0)],
            vec![vec![Expr::Const(0.0)]],
            None,
            None,
            None,
        )
        .unwrap()
    }

    fn base_cfg(n: usize, seed: u64) -> SimConfig {
        SimConfig {
            n_particles: n,
            dt: std::f64::consts::TAU / 160.0,
            t0: 0.0,
            t1: 1.0, // overwritten by the aligned config
            seed,
            record_stride: 1,
            blowup_radius: 1e6,
        }
    }

    #[test]
    fn kb_average_of_a_constant_flow_reproduces_the_cloud() {
        let ms = zero_model();
        let init = ParticleCloud::uniform(1, vec![-1.0, 0.0, 2.0], 0.0).unwrap();
        let (cfg, _) = aligned_config(&ms, &base_cfg(3, 4), 4, 4);
        let traj = simulate_flow(&ms, &init, &cfg).unwrap();
        let set = kb_average(&traj, 0.0, ms.period(), 3, 4).unwrap();
        for cloud in &set.clouds {
            // pooled copies of the same three atoms
            assert_eq!(cloud.len(), 9);
            for (i, chunk) in cloud.positions().chunks(3).enumerate() {
                let _ = i;
                assert_eq!(chunk, init.positions());
            }
            let m1 = cloud.moment(&[1]).unwrap();
            let expect = init.moment(&[1]).unwrap();
            assert!((m1 - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn kb_average_with_one_period_is_the_raw_snapshot() {
        let ms = builtin_example("ex51_ou").unwrap();
        let init = ParticleCloud::delta(&[0.0], 64, 0.0).unwrap();
        let (cfg, _) = aligned_config(&ms, &base_cfg(64, 11), 3, 4);
        let traj = simulate_flow(&ms, &init, &cfg).unwrap();
        let set = kb_average(&traj, 0.0, ms.period(), 1, 4).unwrap();
        for (j, cloud) in set.clouds.iter().enumerate() {
            let snap = &traj.snapshots[4 + j];
            assert_eq!(cloud.positions(), snap.positions());
        }
    }

    #[test]
    fn kb_average_weight_and_moment_identities() {
        let ms = builtin_example("ex51_ou").unwrap();
        let init = ParticleCloud::delta(&[0.3], 50, 0.0).unwrap();
        let (cfg, _) = aligned_config(&ms, &base_cfg(50, 21), 5, 2);
        let traj = simulate_flow(&ms, &init, &cfg).unwrap();
        let n = 4;
        let set = kb_average(&traj, 0.0, ms.period(), n, 2).unwrap();
        for (j, cloud) in set.clouds.iter().enumerate() {
            let total: f64 = cloud.weights().iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            // pooled moment equals the mean of per-period moments
            let mut per_period = 0.0;
            for k in 1..=n {
                let snap = &traj.snapshots[(k * 2) + j];
                per_period += snap.moment(&[2]).unwrap();
            }
            per_period /= n as f64;
            let pooled = cloud.moment(&[2]).unwrap();
            assert!((pooled - per_period).abs() < 1e-12);
        }
    }

    #[test]
    fn kb_average_rejects_misaligned_stride() {
        let ms = zero_model();
        let init = ParticleCloud::delta(&[0.0], 4, 0.0).unwrap();
        let (mut cfg, _) = aligned_config(&ms, &base_cfg(4, 1), 3, 4);
        cfg.record_stride = 7; // does not divide T/m
        let traj = simulate_flow(&ms, &init, &cfg).unwrap();
        assert!(matches!(
            kb_average(&traj, 0.0, ms.period(), 2, 4),
            Err(PeriodicError::Misaligned(_))
        ));
    }

    #[test]
    fn certify_zero_model_passes_with_zero_distance() {
        let ms = zero_model();
        let init = ParticleCloud::delta(&[0.0], 32, 0.0).unwrap();
        let params = CertifyParams {
            burn_in_periods: 1,
            trailing_periods: 2,
            phases: 4,
            tol: 1e-12,
            tail_radii: vec![1.0],
        };
        let law = certify_periodic(&ms, &init, &base_cfg(32, 3), &params).unwrap();
        assert!(law.certificate.pass);
        assert_eq!(law.certificate.max_distance, 0.0);
        assert_eq!(law.certificate.tail_profile[0].sup_tail_mass, 0.0);
    }

    #[test]
    fn certify_blowup_is_an_error_not_a_verdict() {
        let ms = builtin_example("ex52_quartic").unwrap();
        let init = ParticleCloud::uniform(1, vec![0.8, -0.9, 1.1, -1.2], 0.0).unwrap();
        let mut cfg = base_cfg(4, 9);
        cfg.blowup_radius = 0.5;
        let params = CertifyParams {
            burn_in_periods: 1,
            trailing_periods: 2,
            phases: 2,
            tol: 10.0,
            tail_radii: vec![1.0],
        };
        assert!(matches!(
            certify_periodic(&ms, &init, &cfg, &params),
            Err(PeriodicError::Sim(_))
        ));
    }

    #[test]
    fn shift_by_one_period_stays_within_the_trailing_distance() {
        let ms = builtin_example("ex51_ou").unwrap();
        let init = ParticleCloud::delta(&[0.0], 400, 0.0).unwrap();
        let params = CertifyParams {
            burn_in_periods: 4,
            trailing_periods: 4,
            phases: 4,
            tol: 1.0,
            tail_radii: vec![4.0],
        };
        let cfg = base_cfg(400, 77);
        let law = certify_periodic(&ms, &init, &cfg, &params).unwrap();

        // rebuild the two pooled sets offset by one period from the same run
        let total = params.burn_in_periods + params.trailing_periods;
        let (run_cfg, _) = aligned_config(&ms, &cfg, total, params.phases);
        let traj = simulate_flow(&ms, &init, &run_cfg).unwrap();
        let a = kb_average(
            &traj,
            (params.burn_in_periods as f64 - 1.0) * ms.period(),
            ms.period(),
            params.trailing_periods - 1,
            params.phases,
        )
        .unwrap();
        let b = kb_average(
            &traj,
            params.burn_in_periods as f64 * ms.period(),
            ms.period(),
            params.trailing_periods - 1,
            params.phases,
        )
        .unwrap();
        let max_trailing = law.certificate.max_distance;
        for (ca, cb) in a.clouds.iter().zip(&b.clouds) {
            let d = wasserstein2_1d(ca, cb).unwrap();
            assert!(
                d <= max_trailing + 1e-9,
                "shifted pooled distance {d} exceeds max trailing {max_trailing}"
            );
        }
    }

    #[test]
    fn period_map_converges_immediately_for_the_zero_model() {
        let ms = zero_model();
        let init = ParticleCloud::uniform(1, vec![0.5, -0.5], 0.0).unwrap();
        let (set, log) = period_map_iterate(&ms, &init, &base_cfg(2, 5), 10, 1e-9, 2).unwrap();
        assert!(log.converged);
        assert_eq!(log.iterations, 1);
        assert_eq!(set.clouds.len(), 2);
    }

    #[test]
    fn cesaro_average_of_one_is_exactly_one() {
        let ms = builtin_example("ex51_ou").unwrap();
        let init = ParticleCloud::delta(&[0.2], 64, 0.0).unwrap();
        let report = cesaro_functional_convergence(
            &ms,
            &init,
            &Expr::Const(1.0),
            &base_cfg(64, 13),
            &[1, 2, 4],
        )
        .unwrap();
        for a in &report.averages {
            assert_eq!(*a, 1.0);
        }
    }

    #[test]
    fn cesaro_zero_model_from_origin_is_zero() {
        let ms = zero_model();
        let init = ParticleCloud::delta(&[0.0], 16, 0.0).unwrap();
        let report = cesaro_functional_convergence(
            &ms,
            &init,
            &Expr::parse("x1^2").unwrap(),
            &base_cfg(16, 2),
            &[1, 2],
        )
        .unwrap();
        for a in &report.averages {
            assert_eq!(*a, 0.0);
        }
    }

    #[test]
    fn sweep_constant_family_has_small_pairwise_distances() {
        let ms = builtin_example("ex51_ou").unwrap();
        let family = vec![ms.clone(), ms.clone(), ms];
        let init = ParticleCloud::delta(&[0.0], 600, 0.0).unwrap();
        let params = CertifyParams {
            burn_in_periods: 4,
            trailing_periods: 3,
            phases: 4,
            tol: 0.5,
            tail_radii: vec![4.0, 10.0],
        };
        let report =
            parameter_sweep(&family, &init, &base_cfg(600, 99), &params).unwrap();
        assert!(report.members.iter().all(|m| m.pass == Some(true)));
        // identical models, independent seeds: distances at the MC floor
        for row in &report.distance_to_last {
            for d in row {
                assert!(*d < 0.25, "pairwise distance {d}");
            }
        }
    }

    #[test]
    fn period_map_fixed_point_tracks_the_oracle_mean() {
        let ms = builtin_example("ex51_ou").unwrap();
        let n = 1500;
        let cfg = SimConfig {
            n_particles: n,
            dt: std::f64::consts::TAU / 1570.0,
            t0: 0.0,
            t1: 0.0,
            seed: 41,
            record_stride: 1,
            blowup_radius: 1e6,
        };
        let init = ParticleCloud::delta(&[3.0], n, 0.0).unwrap();
        let (set, log) = period_map_iterate(&ms, &init, &cfg, 20, 0.15, 4).unwrap();
        assert!(log.converged);
        let oracle = crate::reference::OuMoments::from_model_defaults();
        let m0 = set.clouds[0].moment(&[1]).unwrap();
        let band = 3.0 / (2.0f64 * 0.75 * n as f64).sqrt() + 10.0 * cfg.dt;
        assert!(
            (m0 - oracle.periodic_mean(0.0)).abs() <= band,
            "fixed-point mean {m0} vs orbit {} (band {band})",
            oracle.periodic_mean(0.0)
        );
    }

    #[test]
    fn cesaro_second_moment_approaches_the_oracle_average() {
        let ms = builtin_example("ex51_ou").unwrap();
        let n = 1000;
        let cfg = SimConfig {
            n_particles: n,
            dt: std::f64::consts::TAU / 1570.0,
            t0: 0.0,
            t1: 0.0,
            seed: 23,
            record_stride: 10,
            blowup_radius: 1e6,
        };
        // a start at the origin keeps the Cesaro transient term small
        let init = ParticleCloud::delta(&[0.0], n, 0.0).unwrap();
        let report = cesaro_functional_convergence(
            &ms,
            &init,
            &Expr::parse("x1^2").unwrap(),
            &cfg,
            &[2, 4, 8, 16],
        )
        .unwrap();
        let oracle = crate::reference::OuMoments::from_model_defaults()
            .period_average_second_moment(1e-4);
        let last = *report.averages.last().unwrap();
        // MC error of a long time average plus O(1/n) transient plus O(dt)
        let band = 3.0 * 1.3 / (n as f64).sqrt() + 1.0 / 16.0 + 10.0 * cfg.dt;
        assert!(
            (last - oracle).abs() <= band,
            "cesaro {last} vs oracle {oracle} (band {band})"
        );
        // increments shrink along the ladder
        assert!(report.increments.last().unwrap() < report.increments.first().unwrap());
    }

    #[test]
    fn certification_is_deterministic_for_a_fixed_seed() {
        let ms = builtin_example("ex51_ou").unwrap();
        let init = ParticleCloud::delta(&[0.0], 300, 0.0).unwrap();
        let params = CertifyParams {
            burn_in_periods: 2,
            trailing_periods: 2,
            phases: 4,
            tol: 0.5,
            tail_radii: vec![4.0],
        };
        let cfg = base_cfg(300, 1234);
        let a = certify_periodic(&ms, &init, &cfg, &params).unwrap();
        let b = certify_periodic(&ms, &init, &cfg, &params).unwrap();
        assert_eq!(
            serde_json::to_string(&a.certificate).unwrap(),
            serde_json::to_string(&b.certificate).unwrap()
        );
        for (ca, cb) in a.phases.clouds.iter().zip(&b.phases.clouds) {
            assert_eq!(ca, cb);
        }
    }

    #[test]
    fn phase_set_roundtrips_through_disk() {
        let ms = builtin_example("ex51_ou").unwrap();
        let init = ParticleCloud::delta(&[0.0], 32, 0.0).unwrap();
        let (cfg, _) = aligned_config(&ms, &base_cfg(32, 8), 3, 4);
        let traj = simulate_flow(&ms, &init, &cfg).unwrap();
        let set = kb_average(&traj, 0.0, ms.period(), 2, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_phase_set(&set, dir.path()).unwrap();
        let back = import_phase_set(dir.path()).unwrap();
        assert_eq!(back.phases, set.phases);
        for (a, b) in back.clouds.iter().zip(&set.clouds) {
            assert_eq!(a, b);
        }
    }
}
