//! Distribution-dependent Lyapunov functionals and their generator.
//!
//! The functionals have the separable form
//!
//! ```text
//! V(t, x, mu) = v0(t, x) + int v1(t, y) mu(dy)
//! ```
//!
//! with `v0`, `v1` polynomial in space and `T`-periodic in time. For this
//! family the measure derivative is exact: the Lions derivative of
//! `mu -> int v1 dmu` at `y` is `grad v1(y)` and its `y`-derivative is the
//! Hessian of `v1`. The generator evaluated here is
//!
//! ```text
//! LV(t,x,mu) = dV/dt + bbar . grad_x v0 + 1/2 tr(sbar sbar^T hess_x v0)
//!            + int [ b . grad v1 + 1/2 tr(s s^T hess v1) ] dmu
//! ```
//!
//! where the coupled coefficients `(bbar, sbar)` act on the `x` slot and the
//! plain ones under the integral, and `dV/dt` includes the time derivative of
//! the `v1` integral. All `V`-derivatives are symbolic; the combination is
//! numeric.
//!
//! The drift condition behind the diagnostics reads: the supremum of `LV`
//! over the lifted shell `{|x| v |mu|_2 > R}` should fall to `-infinity` and
//! the infimum of `V` there should grow without bound. [`radial_scan`]
//! estimates both by shell sampling (an estimate, never a certified bound);
//! [`chebyshev_tail_bound`] and [`tail_criteria`] check the induced tail
//! bounds along simulated runs, and [`ito_consistency`] verifies that
//! ensemble averages of `V` actually move at rate `LV`.

use serde::Serialize;
use thiserror::Error;

use crate::expr::{Compiled, Expr, ExprError, TrigTable};
use crate::measure::{Kahan, MeasureError, ParticleCloud};
use crate::model::{clip_positions, CompiledModel, ModelError, ModelSpec};
use crate::rng::{derive, KeyStream};
use crate::simulate::{simulate_streaming, SimConfig, SimError, Trajectory};

#[derive(Debug, Error)]
pub enum LyapunovError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Sim(#[from] Box<SimError>),
    #[error("{which} must not reference observables")]
    ObservableInV { which: &'static str },
    #[error("{which} has space degree {got}, bound is 6")]
    DegreeBound { which: &'static str, got: u32 },
    #[error("{which} uses coordinate beyond dimension {d}")]
    CoordBound { which: &'static str, d: usize },
    #[error("period must be positive, got {got}")]
    BadPeriod { got: f64 },
    #[error("{which} is negative ({value}) at t={t}, point {point:?}")]
    NegativeOnGrid {
        which: &'static str,
        t: f64,
        point: Vec<f64>,
        value: f64,
    },
    #[error("lyapunov period {ls} does not match model period {ms}")]
    PeriodMismatch { ls: f64, ms: f64 },
    #[error("dimension mismatch: lyapunov spec has {ls}, model has {ms}")]
    DimMismatch { ls: usize, ms: usize },
    #[error("radius grid must be nonempty and strictly increasing")]
    BadRadiusGrid,
    #[error("lambda {lambda} is below the sampled supremum {observed} of LV")]
    InvalidLambda { lambda: f64, observed: f64 },
    #[error("trajectory spans {got:.3} periods, need at least {need}")]
    InsufficientSpan { got: f64, need: usize },
    #[error("snapshots are not aligned with the period: {0}")]
    Misaligned(String),
    #[error("empty evaluation grid")]
    EmptyGrid,
}

impl From<SimError> for LyapunovError {
    fn from(e: SimError) -> Self {
        LyapunovError::Sim(Box::new(e))
    }
}

/// Separable Lyapunov functional with precomputed symbolic derivatives.
#[derive(Debug, Clone)]
pub struct LyapunovSpec {
    d: usize,
    period: f64,
    v0: Expr,
    v1: Expr,
    dv0_dt: Expr,
    grad_v0: Vec<Expr>,
    hess_v0: Vec<Expr>,
    dv1_dt: Expr,
    grad_v1: Vec<Expr>,
    hess_v1: Vec<Expr>,
}

/// Coordinate values the nonnegativity screen samples, combined with 17
/// times spread over one period.
const NONNEG_GRID: [f64; 11] = [
    -10.0, -5.0, -2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 5.0, 10.0,
];

fn validate_v(e: &Expr, which: &'static str, d: usize) -> Result<(), LyapunovError> {
    if e.has_obs() {
        return Err(LyapunovError::ObservableInV { which });
    }
    let deg = e.space_degree();
    if deg > crate::model::MAX_SPACE_DEGREE {
        return Err(LyapunovError::DegreeBound { which, got: deg });
    }
    if let Some(idx) = e.max_coord() {
        if idx >= d {
            return Err(LyapunovError::CoordBound { which, d });
        }
    }
    Ok(())
}

fn grid_points(d: usize) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![]];
    for _ in 0..d {
        let mut next = Vec::with_capacity(pts.len() * NONNEG_GRID.len());
        for p in &pts {
            for &g in &NONNEG_GRID {
                let mut q = p.clone();
                q.push(g);
                next.push(q);
            }
        }
        pts = next;
    }
    pts
}

impl LyapunovSpec {
    /// Build the functional `v0(t,x) + int v1(t,y) mu(dy)` over dimension
    /// `d` with period `T`. Nonnegativity of both parts is screened on the
    /// grid [`NONNEG_GRID`]`^d x {k T/16}` and rejected when violated.
    pub fn new(d: usize, period: f64, v0: Expr, v1: Expr) -> Result<Self, LyapunovError> {
        if !(period > 0.0) || !period.is_finite() {
            return Err(LyapunovError::BadPeriod { got: period });
        }
        validate_v(&v0, "v0", d)?;
        validate_v(&v1, "v1", d)?;
        let omega = std::f64::consts::TAU / period;
        let mut no_obs = |_: &crate::expr::MultiIndex| -> f64 { unreachable!() };
        for (e, which) in [(&v0, "v0"), (&v1, "v1")] {
            for kt in 0..16 {
                let t = period * kt as f64 / 16.0;
                for p in grid_points(d) {
                    let val = e.eval_checked(t, omega, &p, &mut no_obs)?;
                    if val < -1e-9 {
                        return Err(LyapunovError::NegativeOnGrid {
                            which,
                            t,
                            point: p,
                            value: val,
                        });
                    }
                }
            }
        }
        let grad = |e: &Expr| -> Vec<Expr> { (0..d).map(|i| e.d_coord(i)).collect() };
        let hess = |e: &Expr| -> Vec<Expr> {
            let g = grad(e);
            let mut h = Vec::with_capacity(d * d);
            for gi in &g {
                for j in 0..d {
                    h.push(gi.d_coord(j));
                }
            }
            h
        };
        Ok(Self {
            dv0_dt: v0.d_time(),
            grad_v0: grad(&v0),
            hess_v0: hess(&v0),
            dv1_dt: v1.d_time(),
            grad_v1: grad(&v1),
            hess_v1: hess(&v1),
            d,
            period,
            v0,
            v1,
        })
    }

    /// The standard quadratic functional `|x|^2 + int |y|^2 mu(dy)`.
    pub fn quadratic(d: usize, period: f64) -> Result<Self, LyapunovError> {
        let sq = |_dummy: ()| -> Expr {
            let mut acc = Expr::Const(0.0);
            for i in 0..d {
                acc = Expr::add(acc, Expr::pow(Expr::Coord(i), 2));
            }
            acc
        };
        Self::new(d, period, sq(()), sq(()))
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn omega(&self) -> f64 {
        std::f64::consts::TAU / self.period
    }

    pub fn v0(&self) -> &Expr {
        &self.v0
    }

    pub fn v1(&self) -> &Expr {
        &self.v1
    }

    pub fn grad_v1(&self) -> &[Expr] {
        &self.grad_v1
    }

    pub fn hess_v1(&self) -> &[Expr] {
        &self.hess_v1
    }

    /// `V(t, x, mu)`.
    pub fn value(
        &self,
        t: f64,
        x: &[f64],
        mu: &ParticleCloud,
    ) -> Result<f64, LyapunovError> {
        let omega = self.omega();
        let mut no_obs = |_: &crate::expr::MultiIndex| -> f64 { unreachable!() };
        let v0 = self.v0.eval_checked(t, omega, x, &mut no_obs)?;
        let mut acc = Kahan::default();
        for i in 0..mu.len() {
            let vi = self
                .v1
                .eval_checked(t, omega, mu.position(i), &mut no_obs)?;
            acc.add(mu.weights()[i] * vi);
        }
        Ok(v0 + acc.value())
    }
}

// ---------------------------------------------------------------------------
// Generator engine

/// Compiled evaluator for `V` and `LV` against one model. Build once, then
/// feed it step contexts (one per `(t, cloud)` pair) and evaluate at many
/// space points cheaply.
pub struct LvEngine {
    cm: CompiledModel,
    d: usize,
    m: usize,
    max_k: u32,
    omega: f64,
    c_v0: Compiled,
    c_dv0_dt: Compiled,
    c_grad_v0: Vec<Compiled>,
    c_hess_v0: Vec<Compiled>,
    c_v1: Compiled,
    c_dv1_dt: Compiled,
    c_grad_v1: Vec<Compiled>,
    c_hess_v1: Vec<Compiled>,
}

/// Per-`(t, cloud)` context: harmonics, model observables and the measure
/// integrals shared by every space point.
pub struct LvStepCtx {
    pub t: f64,
    trig: TrigTable,
    obs: Vec<f64>,
    /// Integral part of `LV`: `int [dv1/dt + b . grad v1 + tr/2] dmu`.
    pub mu_part: f64,
    /// `int v1 dmu`.
    pub v1_integral: f64,
}

impl LvEngine {
    pub fn new(ls: &LyapunovSpec, ms: &ModelSpec) -> Result<Self, LyapunovError> {
        if ls.d != ms.dim() {
            return Err(LyapunovError::DimMismatch {
                ls: ls.d,
                ms: ms.dim(),
            });
        }
        let rel = (ls.period - ms.period()).abs() / ms.period();
        if rel > 1e-12 {
            return Err(LyapunovError::PeriodMismatch {
                ls: ls.period,
                ms: ms.period(),
            });
        }
        let cm = ms.compile();
        let mut vslots = Vec::new();
        let c = |e: &Expr, vslots: &mut Vec<crate::expr::MultiIndex>| {
            Compiled::compile(e, vslots)
        };
        let c_v0 = c(&ls.v0, &mut vslots);
        let c_dv0_dt = c(&ls.dv0_dt, &mut vslots);
        let c_grad_v0 = ls.grad_v0.iter().map(|e| c(e, &mut vslots)).collect();
        let c_hess_v0 = ls.hess_v0.iter().map(|e| c(e, &mut vslots)).collect();
        let c_v1 = c(&ls.v1, &mut vslots);
        let c_dv1_dt = c(&ls.dv1_dt, &mut vslots);
        let c_grad_v1: Vec<_> = ls.grad_v1.iter().map(|e| c(e, &mut vslots)).collect();
        let c_hess_v1: Vec<_> = ls.hess_v1.iter().map(|e| c(e, &mut vslots)).collect();
        debug_assert!(vslots.is_empty(), "V must be observable-free");
        let mut max_k = cm.max_k;
        for e in [&ls.v0, &ls.dv0_dt, &ls.v1, &ls.dv1_dt] {
            max_k = max_k.max(e.max_harmonic());
        }
        for e in ls
            .grad_v0
            .iter()
            .chain(&ls.hess_v0)
            .chain(&ls.grad_v1)
            .chain(&ls.hess_v1)
        {
            max_k = max_k.max(e.max_harmonic());
        }
        Ok(Self {
            d: ls.d,
            m: ms.brownian_dim(),
            omega: cm.omega,
            max_k,
            cm,
            c_v0,
            c_dv0_dt,
            c_grad_v0,
            c_hess_v0,
            c_v1,
            c_dv1_dt,
            c_grad_v1,
            c_hess_v1,
        })
    }

    /// Clip an evaluation point like the model does when truncated.
    fn clipped<'x>(&self, x: &'x [f64], buf: &'x mut [f64; crate::expr::MAX_DIM]) -> &'x [f64] {
        match self.cm.trunc {
            None => x,
            Some(r) => {
                buf[..self.d].copy_from_slice(x);
                clip_positions(&mut buf[..self.d], self.d, r);
                &buf[..self.d]
            }
        }
    }

    pub fn step_ctx(&self, t: f64, cloud: &ParticleCloud) -> LvStepCtx {
        let trig = TrigTable::at(t, self.omega, self.max_k.max(1));
        let obs = self.cm.obs_table(cloud);
        let no_obs: Vec<f64> = Vec::new();
        let (d, m) = (self.d, self.m);
        let mut mu_acc = Kahan::default();
        let mut v1_acc = Kahan::default();
        let mut sigma = vec![0.0f64; d * m];
        for i in 0..cloud.len() {
            let y = cloud.position(i);
            let w = cloud.weights()[i];
            let mut buf = [0.0f64; crate::expr::MAX_DIM];
            let ye = self.clipped(y, &mut buf);
            // dv1/dt + b . grad v1
            let mut val = self.c_dv1_dt.eval(y, &trig, &no_obs);
            for j in 0..d {
                let bj = self.cm.drift_main[j].eval(ye, &trig, &obs);
                val += bj * self.c_grad_v1[j].eval(y, &trig, &no_obs);
            }
            // 1/2 tr(sigma sigma^T hess v1)
            for (jc, s) in sigma.iter_mut().enumerate() {
                *s = self.cm.diff_main[jc].eval(ye, &trig, &obs);
            }
            let mut tr = 0.0;
            for j in 0..d {
                for l in 0..d {
                    let mut a = 0.0;
                    for c in 0..m {
                        a += sigma[j * m + c] * sigma[l * m + c];
                    }
                    tr += a * self.c_hess_v1[j * d + l].eval(y, &trig, &no_obs);
                }
            }
            val += 0.5 * tr;
            mu_acc.add(w * val);
            v1_acc.add(w * self.c_v1.eval(y, &trig, &no_obs));
        }
        LvStepCtx {
            t,
            trig,
            obs,
            mu_part: mu_acc.value(),
            v1_integral: v1_acc.value(),
        }
    }

    /// `V(t, x, mu)` under the context's `(t, mu)`.
    pub fn v_at(&self, ctx: &LvStepCtx, x: &[f64]) -> f64 {
        self.c_v0.eval(x, &ctx.trig, &[]) + ctx.v1_integral
    }

    /// `LV(t, x, mu)` under the context's `(t, mu)`.
    pub fn lv_at(&self, ctx: &LvStepCtx, x: &[f64]) -> f64 {
        let (d, m) = (self.d, self.m);
        let mut buf = [0.0f64; crate::expr::MAX_DIM];
        let xe = self.clipped(x, &mut buf);
        let mut val = self.c_dv0_dt.eval(x, &ctx.trig, &[]) + ctx.mu_part;
        for j in 0..d {
            let bj = self.cm.drift_coupled[j].eval(xe, &ctx.trig, &ctx.obs);
            val += bj * self.c_grad_v0[j].eval(x, &ctx.trig, &[]);
        }
        let mut sigma = [0.0f64; crate::expr::MAX_DIM * crate::model::MAX_BROWNIAN_DIM];
        for jc in 0..d * m {
            sigma[jc] = self.cm.diff_coupled[jc].eval(xe, &ctx.trig, &ctx.obs);
        }
        let mut tr = 0.0;
        for j in 0..d {
            for l in 0..d {
                let mut a = 0.0;
                for c in 0..m {
                    a += sigma[j * m + c] * sigma[l * m + c];
                }
                tr += a * self.c_hess_v0[j * d + l].eval(x, &ctx.trig, &[]);
            }
        }
        val + 0.5 * tr
    }
}

/// `LV(t, x, mu)` in one call. The coupled coefficients (or the plain ones
/// when no coupled block is declared) act on the `x` slot.
pub fn eval_lv(
    ls: &LyapunovSpec,
    ms: &ModelSpec,
    t: f64,
    x: &[f64],
    mu: &ParticleCloud,
) -> Result<f64, LyapunovError> {
    let engine = LvEngine::new(ls, ms)?;
    let ctx = engine.step_ctx(t, mu);
    Ok(engine.lv_at(&ctx, x))
}

// ---------------------------------------------------------------------------
// Lions closed form against finite differences

/// Compare the closed-form measure derivative of `V` with finite differences
/// of the flat derivative, and the symbolic Hessian of `v1` with central
/// differences of the symbolic gradient. Returns the largest discrepancy
/// over the grid (`y_points` is row-major `K x d`).
///
/// The flat derivative is evaluated through actual cloud mixtures
/// `(1 - eps) mu + eps delta_y`, so this exercises the same measure-integral
/// path the engine uses; for the linear-in-measure family the quotient is
/// exact in `eps`.
pub fn check_lions_closed_form(
    ls: &LyapunovSpec,
    t: f64,
    y_points: &[f64],
) -> Result<f64, LyapunovError> {
    let d = ls.d;
    if y_points.is_empty() || y_points.len() % d != 0 {
        return Err(LyapunovError::EmptyGrid);
    }
    let eps = 0.5;
    let h = 1e-4;
    // a fixed, documented base measure and base point
    let base_atoms: Vec<f64> = match d {
        1 => vec![-1.5, -0.5, 0.5, 1.5],
        _ => {
            let mut v = Vec::new();
            for k in 0..4 {
                for j in 0..d {
                    v.push(if j == k % d { 1.0 - 0.5 * k as f64 } else { 0.25 });
                }
            }
            v
        }
    };
    let base = ParticleCloud::uniform(d, base_atoms, t).map_err(LyapunovError::Measure)?;
    let x0 = vec![0.0; d];
    let v_base = ls.value(t, &x0, &base)?;

    let mixture_value = |y: &[f64]| -> Result<f64, LyapunovError> {
        let mut pos = base.positions().to_vec();
        pos.extend_from_slice(y);
        let mut w: Vec<f64> = base.weights().iter().map(|v| v * (1.0 - eps)).collect();
        w.push(eps);
        let mix =
            ParticleCloud::new(d, pos, w, t).map_err(LyapunovError::Measure)?;
        ls.value(t, &x0, &mix)
    };

    let omega = ls.omega();
    let mut no_obs = |_: &crate::expr::MultiIndex| -> f64 { unreachable!() };
    let mut worst: f64 = 0.0;
    for y in y_points.chunks_exact(d) {
        for j in 0..d {
            let mut yp = y.to_vec();
            let mut ym = y.to_vec();
            yp[j] += h;
            ym[j] -= h;
            let phi_p = (mixture_value(&yp)? - v_base) / eps;
            let phi_m = (mixture_value(&ym)? - v_base) / eps;
            let fd_grad = (phi_p - phi_m) / (2.0 * h);
            let sym_grad = ls.grad_v1[j].eval_checked(t, omega, y, &mut no_obs)?;
            worst = worst.max((fd_grad - sym_grad).abs());
            // Hessian column j against central differences of the gradient
            for l in 0..d {
                let gp = ls.grad_v1[l].eval_checked(t, omega, &yp, &mut no_obs)?;
                let gm = ls.grad_v1[l].eval_checked(t, omega, &ym, &mut no_obs)?;
                let fd_hess = (gp - gm) / (2.0 * h);
                let sym_hess =
                    ls.hess_v1[l * d + j].eval_checked(t, omega, y, &mut no_obs)?;
                worst = worst.max((fd_hess - sym_hess).abs());
            }
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Radial scan

#[derive(Debug, Clone, Copy)]
pub struct ScanParams {
    pub samples_per_radius: usize,
    pub cloud_size: usize,
    pub seed: u64,
}

impl Default for ScanParams {
    fn default() -> Self {
        ScanParams {
            samples_per_radius: 256,
            cloud_size: 32,
            seed: 0x5CA7,
        }
    }
}

/// Shell-sampling estimates of `sup LV` and `inf V` per radius.
#[derive(Debug, Clone, Serialize)]
pub struct RadialScanReport {
    pub radii: Vec<f64>,
    /// `A_hat(R)`: max of `LV` over the sampled shell at each radius.
    pub sup_lv: Vec<f64>,
    /// `V_hat(R)`: min of `V` over the same samples.
    pub inf_v: Vec<f64>,
    pub samples_per_radius: usize,
    pub cloud_size: usize,
    pub seed: u64,
    pub family: String,
}

impl RadialScanReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("R,sup_lv,inf_v\n");
        for ((r, a), v) in self.radii.iter().zip(&self.sup_lv).zip(&self.inf_v) {
            out.push_str(&format!("{r},{a},{v}\n"));
        }
        out
    }
}

/// Sample a cloud from the documented family, rescaled so `|mu|_2 = target`.
/// Families alternate between a symmetric two-point cloud and a two-component
/// Gaussian location mixture.
fn sample_shell_cloud(
    stream: &mut KeyStream,
    d: usize,
    cloud_size: usize,
    target: f64,
    family: usize,
    t: f64,
) -> ParticleCloud {
    if family % 2 == 0 {
        let e = stream.unit_vector(d);
        let mut pos = Vec::with_capacity(2 * d);
        pos.extend(e.iter().map(|v| -v * target));
        pos.extend(e.iter().map(|v| v * target));
        ParticleCloud::uniform(d, pos, t).expect("two-point cloud is valid")
    } else {
        let e = stream.unit_vector(d);
        let n = cloud_size.max(2);
        let mut pos = Vec::with_capacity(n * d);
        for i in 0..n {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            for ej in e.iter().take(d) {
                pos.push(sign * ej + 0.3 * stream.next_normal());
            }
        }
        let cloud = ParticleCloud::uniform(d, pos, t).expect("mixture cloud is valid");
        let norm = cloud.second_moment_norm().max(1e-9);
        let scale = target / norm;
        let scaled: Vec<f64> = cloud.positions().iter().map(|v| v * scale).collect();
        ParticleCloud::uniform(d, scaled, t).expect("scaled cloud is valid")
    }
}

/// Estimate the radial drift profile: for each `R`, sample lifted points with
/// `|x| v |mu|_2` in `[R, 1.05 R]` (alternating which slot drives the norm)
/// and record the extreme values of `LV` and `V`.
pub fn radial_scan(
    ls: &LyapunovSpec,
    ms: &ModelSpec,
    r_grid: &[f64],
    params: ScanParams,
) -> Result<RadialScanReport, LyapunovError> {
    if r_grid.is_empty() || r_grid.windows(2).any(|w| w[0] >= w[1]) || r_grid[0] <= 0.0 {
        return Err(LyapunovError::BadRadiusGrid);
    }
    let engine = LvEngine::new(ls, ms)?;
    let d = ls.d;
    let mut sup_lv = Vec::with_capacity(r_grid.len());
    let mut inf_v = Vec::with_capacity(r_grid.len());
    for (ri, &r) in r_grid.iter().enumerate() {
        let mut a_hat = f64::NEG_INFINITY;
        let mut v_hat = f64::INFINITY;
        for j in 0..params.samples_per_radius {
            let mut stream = KeyStream::new(derive(
                params.seed,
                (ri as u64) << 32 | j as u64,
            ));
            let t = stream.next_in(0.0, ls.period);
            let x_driven = j % 2 == 0;
            let family = j / 2;
            let (x, cloud) = if x_driven {
                let rx = stream.next_in(r, 1.05 * r);
                let dir = stream.unit_vector(d);
                let x: Vec<f64> = dir.iter().map(|v| v * rx).collect();
                let s = stream.next_in(0.0, rx);
                (x, sample_shell_cloud(&mut stream, d, params.cloud_size, s, family, t))
            } else {
                let s = stream.next_in(r, 1.05 * r);
                let dir = stream.unit_vector(d);
                let rx = s * stream.next_uniform().powf(1.0 / d as f64);
                let x: Vec<f64> = dir.iter().map(|v| v * rx).collect();
                (x, sample_shell_cloud(&mut stream, d, params.cloud_size, s, family, t))
            };
            let ctx = engine.step_ctx(t, &cloud);
            a_hat = a_hat.max(engine.lv_at(&ctx, &x));
            v_hat = v_hat.min(engine.v_at(&ctx, &x));
        }
        sup_lv.push(a_hat);
        inf_v.push(v_hat);
    }
    Ok(RadialScanReport {
        radii: r_grid.to_vec(),
        sup_lv,
        inf_v,
        samples_per_radius: params.samples_per_radius,
        cloud_size: params.cloud_size,
        seed: params.seed,
        family: "two-point and gaussian-location-mixture clouds scaled to the target |mu|_2"
            .into(),
    })
}

// ---------------------------------------------------------------------------
// Chebyshev tail bound along a trajectory

#[derive(Debug, Clone, Serialize)]
pub struct ChebyshevRow {
    pub t: f64,
    pub empirical_tail: f64,
    pub bound: f64,
    pub mc_slack: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChebyshevReport {
    pub radius: f64,
    pub lambda: f64,
    pub observed_sup_lv: f64,
    pub v_initial: f64,
    pub inf_v_estimate: f64,
    pub rows: Vec<ChebyshevRow>,
    pub holds: bool,
}

/// Check the drift-induced tail bound
/// `P(lifted state in U_R^c) <= (V(0) + lambda (t - t0)) / inf_{U_R^c} V`
/// at every snapshot, with a 3-standard-error Monte Carlo slack. `lambda`
/// must dominate the supremum of `LV` over the visited states, which is
/// validated by evaluation and rejected otherwise.
pub fn chebyshev_tail_bound(
    ls: &LyapunovSpec,
    ms: &ModelSpec,
    traj: &Trajectory,
    lambda: f64,
    radius: f64,
) -> Result<ChebyshevReport, LyapunovError> {
    if !(radius > 0.0) {
        return Err(LyapunovError::Measure(MeasureError::BadRadius {
            got: radius,
        }));
    }
    let engine = LvEngine::new(ls, ms)?;

    // sampled sup of LV over the visited region
    let mut observed = f64::NEG_INFINITY;
    for cloud in &traj.snapshots {
        let ctx = engine.step_ctx(cloud.time_stamp(), cloud);
        for i in 0..cloud.len() {
            observed = observed.max(engine.lv_at(&ctx, cloud.position(i)));
        }
    }
    if lambda < observed {
        return Err(LyapunovError::InvalidLambda {
            lambda,
            observed,
        });
    }

    // inf of V over the tail set, estimated on the boundary shell
    let scan = radial_scan(ls, ms, &[radius], ScanParams::default())?;
    let inf_v = scan.inf_v[0];

    let first = &traj.snapshots[0];
    let t0 = first.time_stamp();
    let ctx0 = engine.step_ctx(t0, first);
    let mut acc = Kahan::default();
    for i in 0..first.len() {
        acc.add(first.weights()[i] * engine.v_at(&ctx0, first.position(i)));
    }
    let v_initial = acc.value();

    let mut rows = Vec::with_capacity(traj.snapshots.len());
    let mut holds = true;
    for cloud in &traj.snapshots {
        let t = cloud.time_stamp();
        let mu_norm = cloud.second_moment_norm();
        let p = if mu_norm > radius {
            1.0
        } else {
            cloud.tail_mass(radius)?
        };
        let n = cloud.len() as f64;
        let slack = 3.0 * (p * (1.0 - p) / n).max(0.0).sqrt();
        let bound = (v_initial + lambda * (t - t0)) / inf_v.max(1e-300);
        let ok = p <= bound + slack;
        holds &= ok;
        rows.push(ChebyshevRow {
            t,
            empirical_tail: p,
            bound,
            mc_slack: slack,
            holds: ok,
        });
    }
    Ok(ChebyshevReport {
        radius,
        lambda,
        observed_sup_lv: observed,
        v_initial,
        inf_v_estimate: inf_v,
        rows,
        holds,
    })
}

// ---------------------------------------------------------------------------
// Tail criteria along a trajectory

#[derive(Debug, Clone, Serialize)]
pub struct TailCriteriaRow {
    pub radius: f64,
    /// Period-sampled Cesaro average of the lifted tail mass.
    pub cesaro_period_avg: f64,
    /// Trapezoid time average of the lifted tail mass over the whole span.
    pub time_integral_avg: f64,
    /// Worst within-one-period tail transition probability out of
    /// `U_{R/2}`, when any qualifying start exists.
    pub alpha_surrogate: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TailCriteriaReport {
    pub period: f64,
    pub periods_used: usize,
    pub beta_ratio: f64,
    pub rows: Vec<TailCriteriaRow>,
}

impl TailCriteriaReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("R,cesaro_period_avg,time_integral_avg,alpha_surrogate\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.radius,
                r.cesaro_period_avg,
                r.time_integral_avg,
                r.alpha_surrogate
                    .map(|a| a.to_string())
                    .unwrap_or_else(|| "".into())
            ));
        }
        out
    }
}

fn lifted_tail(cloud: &ParticleCloud, radius: f64) -> Result<f64, LyapunovError> {
    Ok(if cloud.second_moment_norm() > radius {
        1.0
    } else {
        cloud.tail_mass(radius)?
    })
}

/// Tail statistics per radius: the period-sampled Cesaro average, the
/// time-integral average, and the within-one-period transition surrogate
/// with `beta(R) = R/2`.
pub fn tail_criteria(
    traj: &Trajectory,
    r_grid: &[f64],
    period: f64,
) -> Result<TailCriteriaReport, LyapunovError> {
    if r_grid.is_empty() || r_grid.iter().any(|r| *r <= 0.0) {
        return Err(LyapunovError::BadRadiusGrid);
    }
    let times = traj.times();
    let span = times.last().unwrap() - times[0];
    let n_periods = (span / period + 1e-9).floor() as usize;
    if n_periods < 1 {
        return Err(LyapunovError::InsufficientSpan {
            got: span / period,
            need: 1,
        });
    }
    // snapshot index at t0 + k T
    let steps_per_period = period / traj.dt_eff;
    let spp = steps_per_period.round();
    if (steps_per_period - spp).abs() > 1e-6 {
        return Err(LyapunovError::Misaligned(format!(
            "period/dt_eff = {steps_per_period} is not an integer"
        )));
    }
    let period_index = |k: usize| -> Result<usize, LyapunovError> {
        let step = (k as f64 * spp).round() as u64;
        traj.index_of_step(step).ok_or_else(|| {
            LyapunovError::Misaligned(format!("no snapshot at period {k} (step {step})"))
        })
    };

    let beta_ratio = 0.5;
    let mut rows = Vec::with_capacity(r_grid.len());
    for &r in r_grid {
        let mut ces = Kahan::default();
        for k in 1..=n_periods {
            ces.add(lifted_tail(&traj.snapshots[period_index(k)?], r)?);
        }
        let cesaro = ces.value() / n_periods as f64;

        let mut ti = Kahan::default();
        for w in 0..traj.snapshots.len() - 1 {
            let a = lifted_tail(&traj.snapshots[w], r)?;
            let b = lifted_tail(&traj.snapshots[w + 1], r)?;
            ti.add(0.5 * (a + b) * (times[w + 1] - times[w]));
        }
        let time_avg = ti.value() / span;

        // alpha surrogate: worst conditional tail exit within one period
        let beta = beta_ratio * r;
        let mut alpha: Option<f64> = None;
        for j in 0..traj.snapshots.len() {
            let start = &traj.snapshots[j];
            if start.second_moment_norm() > beta {
                continue;
            }
            for k in (j + 1)..traj.snapshots.len() {
                let gap = times[k] - times[j];
                if gap > period * (1.0 + 1e-9) {
                    break;
                }
                let end = &traj.snapshots[k];
                let end_mu_in_tail = end.second_moment_norm() > r;
                let mut started = Kahan::default();
                let mut escaped = Kahan::default();
                for i in 0..start.len() {
                    let xn = start.position(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if xn <= beta {
                        let w = start.weights()[i];
                        started.add(w);
                        let xe = end.position(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                        if end_mu_in_tail || xe > r {
                            escaped.add(w);
                        }
                    }
                }
                let s = started.value();
                if s > 0.0 {
                    let a = escaped.value() / s;
                    alpha = Some(alpha.map_or(a, |prev| prev.max(a)));
                }
            }
        }
        rows.push(TailCriteriaRow {
            radius: r,
            cesaro_period_avg: cesaro,
            time_integral_avg: time_avg,
            alpha_surrogate: alpha,
        });
    }
    Ok(TailCriteriaReport {
        period,
        periods_used: n_periods,
        beta_ratio,
        rows,
    })
}

// ---------------------------------------------------------------------------
// Ito consistency along a streamed run

#[derive(Debug, Clone, Serialize)]
pub struct ItoReport {
    pub n_steps: u64,
    pub dt: f64,
    /// `E V(end) - E V(start) - sum_k mean(LV) dt`.
    pub aggregate_residual: f64,
    /// Quadrature sum of the per-step standard errors.
    pub se_aggregate: f64,
    /// `10 dt^2` per step, summed.
    pub dt_term: f64,
    pub holds: bool,
    /// Largest per-step ratio `|mean residual| / (3 SE + 10 dt^2)`.
    pub worst_step_ratio: f64,
}

/// Stream a run and test that ensemble averages of `V` move at rate `LV`:
/// the per-step residual `Delta E V - mean(LV) dt` aggregated over the run
/// stays within `3 SE + 10 dt^2` per step (errors summed in quadrature, the
/// discretization term linearly).
pub fn ito_consistency(
    ls: &LyapunovSpec,
    ms: &ModelSpec,
    init: &ParticleCloud,
    cfg: &SimConfig,
) -> Result<ItoReport, LyapunovError> {
    let engine = LvEngine::new(ls, ms)?;
    let n = init.len();
    let mut prev_v: Vec<f64> = Vec::new();
    let mut prev_lv: Vec<f64> = Vec::new();
    let mut dt = 0.0;
    let mut prev_t = cfg.t0;
    let mut sum_resid = Kahan::default();
    let mut sum_se2 = Kahan::default();
    let mut worst_ratio: f64 = 0.0;
    let mut steps = 0u64;

    let mut cfg_stream = *cfg;
    cfg_stream.record_stride = 1;
    simulate_streaming(ms, init, &cfg_stream, |step, cloud| {
        let t = cloud.time_stamp();
        let ctx = engine.step_ctx(t, cloud);
        let v_now: Vec<f64> = (0..n).map(|i| engine.v_at(&ctx, cloud.position(i))).collect();
        if step > 0 {
            dt = t - prev_t;
            // per-particle residual of the one-step identity
            let mut mean = Kahan::default();
            for i in 0..n {
                mean.add((v_now[i] - prev_v[i]) - prev_lv[i] * dt);
            }
            let mean = mean.value() / n as f64;
            let mut var = Kahan::default();
            for i in 0..n {
                let r = (v_now[i] - prev_v[i]) - prev_lv[i] * dt - mean;
                var.add(r * r);
            }
            let se = (var.value() / (n as f64 * (n as f64 - 1.0))).sqrt();
            sum_resid.add(mean);
            sum_se2.add(se * se);
            let tol = 3.0 * se + 10.0 * dt * dt;
            if tol > 0.0 {
                worst_ratio = worst_ratio.max(mean.abs() / tol);
            }
            steps += 1;
        }
        prev_lv = (0..n).map(|i| engine.lv_at(&ctx, cloud.position(i))).collect();
        prev_v = v_now;
        prev_t = t;
    })?;

    let se_agg = sum_se2.value().max(0.0).sqrt();
    let dt_term = 10.0 * dt * dt * steps as f64;
    let resid = sum_resid.value();
    Ok(ItoReport {
        n_steps: steps,
        dt,
        aggregate_residual: resid,
        se_aggregate: se_agg,
        dt_term,
        holds: resid.abs() <= 3.0 * se_agg + dt_term,
        worst_step_ratio: worst_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_example, ou_model};

    fn quadratic(period: f64) -> LyapunovSpec {
        LyapunovSpec::quadratic(1, period).unwrap()
    }

    #[test]
    fn hand_evaluated_generator() {
        // V = x^2 + int y^2 mu, b = -x, sigma = sqrt(2): at x = 1, mu = delta_0
        // LV = 2*1*(-1) + 2 + [0 + 2] = 2
        let ms = ModelSpec::new(
            1,
            1,
            std::f64::consts::TAU,
            vec![Expr::parse("-1*x1").unwrap()],
            vec![vec![Expr::Const(std::f64::consts::SQRT_2)]],
            None,
            None,
            None,
        )
        .unwrap();
        let ls = quadratic(std::f64::consts::TAU);
        let mu = ParticleCloud::delta(&[0.0], 1, 0.0).unwrap();
        let lv = eval_lv(&ls, &ms, 0.3, &[1.0], &mu).unwrap();
        assert!((lv - 2.0).abs() < 1e-12, "got {lv}");
    }

    #[test]
    fn constant_v_has_zero_generator() {
        let ms = builtin_example("ex52_quartic").unwrap();
        let ls = LyapunovSpec::new(
            1,
            std::f64::consts::TAU,
            Expr::Const(3.0),
            Expr::Const(0.0),
        )
        .unwrap();
        let mu = ParticleCloud::uniform(1, vec![0.5, -1.0, 2.0], 0.0).unwrap();
        let lv = eval_lv(&ls, &ms, 1.1, &[0.7], &mu).unwrap();
        assert_eq!(lv, 0.0);
    }

    #[test]
    fn quartic_generator_is_dominated_by_the_rederived_bound() {
        // at x = R, mu = delta_R the exact value is
        // -16 R^4 + R^2 sin(t)/2 + 8 R^2, below -16 R^4 + 10.5 R^2
        let ms = builtin_example("ex52_quartic").unwrap();
        let ls = quadratic(std::f64::consts::TAU);
        for r in [2.0f64, 3.0, 4.0] {
            let mu = ParticleCloud::delta(&[r], 8, 0.0).unwrap();
            for t in [0.0, 1.0, 4.4] {
                let lv = eval_lv(&ls, &ms, t, &[r], &mu).unwrap();
                let bound = -16.0 * r.powi(4) + 10.5 * r * r;
                assert!(lv <= bound + 1e-9, "R={r}, t={t}: {lv} > {bound}");
            }
        }
    }

    #[test]
    fn generator_is_linear_in_v() {
        let ms = builtin_example("ex51_ou").unwrap();
        let tau = std::f64::consts::TAU;
        let l1 = LyapunovSpec::new(1, tau, Expr::parse("x1^2").unwrap(), Expr::parse("y1^4").unwrap()).unwrap();
        let l2 = LyapunovSpec::new(1, tau, Expr::parse("x1^4").unwrap(), Expr::parse("y1^2").unwrap()).unwrap();
        let (a, b) = (0.7, 1.9);
        let combo = LyapunovSpec::new(
            1,
            tau,
            Expr::add(
                Expr::mul(Expr::Const(a), Expr::parse("x1^2").unwrap()),
                Expr::mul(Expr::Const(b), Expr::parse("x1^4").unwrap()),
            ),
            Expr::add(
                Expr::mul(Expr::Const(a), Expr::parse("y1^4").unwrap()),
                Expr::mul(Expr::Const(b), Expr::parse("y1^2").unwrap()),
            ),
        )
        .unwrap();
        let mu = ParticleCloud::uniform(1, vec![-0.9, 0.1, 1.7], 0.0).unwrap();
        for (t, x) in [(0.0, 0.5), (2.2, -1.3)] {
            let lhs = eval_lv(&combo, &ms, t, &[x], &mu).unwrap();
            let rhs = a * eval_lv(&l1, &ms, t, &[x], &mu).unwrap()
                + b * eval_lv(&l2, &ms, t, &[x], &mu).unwrap();
            assert!(
                (lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()),
                "{lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn x_slot_uses_coupled_coefficients() {
        // bbar = 0 kills the x-part drift term while the mu-part keeps b
        let tau = std::f64::consts::TAU;
        let ms = ModelSpec::new(
            1,
            1,
            tau,
            vec![Expr::parse("-1*x1").unwrap()],
            vec![vec![Expr::Const(0.0)]],
            Some(vec![Expr::Const(0.0)]),
            Some(vec![vec![Expr::Const(0.0)]]),
            None,
        )
        .unwrap();
        let ls = quadratic(tau);
        let mu = ParticleCloud::delta(&[2.0], 1, 0.0).unwrap();
        // x part: 0; mu part: b(y)=-y => 2y*(-y) = -2*4 = -8
        let lv = eval_lv(&ls, &ms, 0.0, &[3.0], &mu).unwrap();
        assert!((lv - (-8.0)).abs() < 1e-12, "got {lv}");
    }

    #[test]
    fn lions_closed_form_matches_finite_differences() {
        let tau = std::f64::consts::TAU;
        let grid: Vec<f64> = (0..13).map(|k| -3.0 + 0.5 * k as f64).collect();
        for (v1, tol) in [
            ("y1^2", 1e-8),
            ("y1^4", 1e-6),
            ("y1^2 + y1^4", 1e-6),
        ] {
            let ls = LyapunovSpec::new(
                1,
                tau,
                Expr::parse("x1^2").unwrap(),
                Expr::parse(v1).unwrap(),
            )
            .unwrap();
            let err = check_lions_closed_form(&ls, 0.7, &grid).unwrap();
            assert!(err <= tol, "{v1}: err {err} > {tol}");
        }
        // constant v1 has zero measure derivative
        let ls = LyapunovSpec::new(1, tau, Expr::parse("x1^2").unwrap(), Expr::Const(5.0)).unwrap();
        let err = check_lions_closed_form(&ls, 0.0, &grid).unwrap();
        assert!(err < 1e-12);
    }

    #[test]
    fn radial_scan_zero_model_is_flat() {
        let tau = std::f64::consts::TAU;
        let zero = ModelSpec::new(
            1,
            1,
            tau,
            vec![Expr::Const(0.0)],
            vec![vec![Expr::Const(0.0)]],
            None,
            None,
            None,
        )
        .unwrap();
        let ls = quadratic(tau);
        let report = radial_scan(&ls, &zero, &[1.0, 2.0, 4.0], ScanParams::default()).unwrap();
        for a in &report.sup_lv {
            assert_eq!(*a, 0.0);
        }
        for (v, r) in report.inf_v.iter().zip(&report.radii) {
            assert!(*v >= r * r - 1e-9);
        }
    }

    #[test]
    fn radial_scan_quartic_decreases() {
        let ms = builtin_example("ex52_quartic").unwrap();
        let ls = quadratic(std::f64::consts::TAU);
        let report = radial_scan(&ls, &ms, &[2.0, 3.0, 4.0, 5.0], ScanParams::default()).unwrap();
        for w in report.sup_lv.windows(2) {
            assert!(w[1] < w[0], "sup LV not decreasing: {:?}", report.sup_lv);
        }
        assert!(report.sup_lv[3] < -4000.0, "A_hat(5) = {}", report.sup_lv[3]);
        for (v, r) in report.inf_v.iter().zip(&report.radii) {
            assert!(*v >= r * r - 1e-9, "V_hat({r}) = {v}");
        }
    }

    #[test]
    fn classical_generator_when_v1_is_zero() {
        // against a finite-difference estimate of E[V(t+h, X_{t+h}) - V]/h
        // driven by one EM step from a point
        let ms = ou_model(1.0, 0.25, 1.0, 1.0, std::f64::consts::TAU).unwrap();
        let ls = LyapunovSpec::new(
            1,
            std::f64::consts::TAU,
            Expr::parse("x1^2").unwrap(),
            Expr::Const(0.0),
        )
        .unwrap();
        let x0 = 0.8;
        let t = 1.3;
        let n = 200_000;
        let h = 1e-2;
        let mu = ParticleCloud::delta(&[x0], n, t).unwrap();
        let noise: Vec<f64> = (0..n)
            .map(|i| crate::rng::normal_at(2024, 0, i as u64, 0))
            .collect();
        let stepped = crate::simulate::em_step(&ms, &mu, t, h, &noise, 1e9).unwrap();
        let engine = LvEngine::new(&ls, &ms).unwrap();
        let ctx_t = engine.step_ctx(t, &mu);
        let ctx_h = engine.step_ctx(t + h, &stepped);
        let mut acc = Kahan::default();
        for i in 0..n {
            acc.add(engine.v_at(&ctx_h, stepped.position(i)));
        }
        let fd = (acc.value() / n as f64 - engine.v_at(&ctx_t, &[x0])) / h;
        let lv = engine.lv_at(&ctx_t, &[x0]);
        // O(h) discretization plus MC error of order sigma/sqrt(N h)
        assert!((fd - lv).abs() < 0.05 + 10.0 * h, "fd {fd} vs LV {lv}");
    }

    #[test]
    fn ito_consistency_on_the_linear_model() {
        let ms = builtin_example("ex51_ou").unwrap();
        let ls = quadratic(std::f64::consts::TAU);
        let init = ParticleCloud::delta(&[0.5], 2000, 0.0).unwrap();
        let cfg = SimConfig {
            n_particles: 2000,
            dt: 2e-3,
            t0: 0.0,
            t1: std::f64::consts::TAU,
            seed: 99,
            record_stride: 1,
            blowup_radius: 1e6,
        };
        let report = ito_consistency(&ls, &ms, &init, &cfg).unwrap();
        assert!(
            report.holds,
            "residual {} vs 3se {} + dt {}",
            report.aggregate_residual,
            3.0 * report.se_aggregate,
            report.dt_term
        );
    }

    #[test]
    fn chebyshev_bound_with_huge_offset_v_is_trivial() {
        let tau = std::f64::consts::TAU;
        let ms = builtin_example("ex51_ou").unwrap();
        let ls = LyapunovSpec::new(
            1,
            tau,
            Expr::parse("x1^2 + 1000000").unwrap(),
            Expr::parse("y1^2").unwrap(),
        )
        .unwrap();
        let init = ParticleCloud::delta(&[0.0], 100, 0.0).unwrap();
        let cfg = SimConfig {
            n_particles: 100,
            dt: 0.01,
            t0: 0.0,
            t1: tau,
            seed: 31,
            record_stride: 10,
            blowup_radius: 1e6,
        };
        let traj = crate::simulate::simulate_flow(&ms, &init, &cfg).unwrap();
        let report = chebyshev_tail_bound(&ls, &ms, &traj, 50.0, 10.0).unwrap();
        assert!(report.holds);
        // the offset dominates: every bound sits at 1 up to R^2/offset, and
        // the lambda term pushes later snapshots strictly above 1
        assert!(report.rows.iter().all(|r| r.bound > 0.99));
        assert!(report.rows.last().unwrap().bound > 1.0);
    }

    #[test]
    fn chebyshev_rejects_small_lambda() {
        let tau = std::f64::consts::TAU;
        let ms = builtin_example("ex51_ou").unwrap();
        let ls = quadratic(tau);
        let init = ParticleCloud::delta(&[0.0], 50, 0.0).unwrap();
        let cfg = SimConfig {
            n_particles: 50,
            dt: 0.01,
            t0: 0.0,
            t1: 1.0,
            seed: 8,
            record_stride: 10,
            blowup_radius: 1e6,
        };
        let traj = crate::simulate::simulate_flow(&ms, &init, &cfg).unwrap();
        assert!(matches!(
            chebyshev_tail_bound(&ls, &ms, &traj, -1e9, 5.0),
            Err(LyapunovError::InvalidLambda { .. })
        ));
    }

    #[test]
    fn tail_criteria_zero_model_from_origin() {
        let tau = std::f64::consts::TAU;
        let zero = ModelSpec::new(
            1,
            1,
            tau,
            vec![Expr::Const(0.0)],
            vec![vec![Expr::Const(0.0)]],
            None,
            None,
            None,
        )
        .unwrap();
        let init = ParticleCloud::delta(&[0.0], 20, 0.0).unwrap();
        // dt chosen so a period is exactly 100 steps
        let cfg = SimConfig {
            n_particles: 20,
            dt: tau / 100.0,
            t0: 0.0,
            t1: 3.0 * tau,
            seed: 5,
            record_stride: 10,
            blowup_radius: 1e6,
        };
        let traj = crate::simulate::simulate_flow(&zero, &init, &cfg).unwrap();
        let report = tail_criteria(&traj, &[1.0, 2.0], tau).unwrap();
        for row in &report.rows {
            assert_eq!(row.cesaro_period_avg, 0.0);
            assert_eq!(row.time_integral_avg, 0.0);
            assert_eq!(row.alpha_surrogate, Some(0.0));
        }
    }

    #[test]
    fn stationary_model_has_matching_tail_statistics() {
        // for a time-homogeneous model the period-sampled average and the
        // time-integral average both estimate the stationary tail
        let tau = std::f64::consts::TAU;
        let ms = ou_model(1.0, 0.25, 0.0, 1.0, tau).unwrap();
        let n = 2000;
        let spp = 320usize;
        let mut stream = crate::rng::KeyStream::new(50);
        let pos: Vec<f64> = (0..n).map(|_| 0.8 * stream.next_normal()).collect();
        let init = ParticleCloud::uniform(1, pos, 0.0).unwrap();
        let cfg = SimConfig {
            n_particles: n,
            dt: tau / spp as f64,
            t0: 0.0,
            t1: 8.0 * tau,
            seed: 88,
            record_stride: spp / 8,
            blowup_radius: 1e6,
        };
        let traj = crate::simulate::simulate_flow(&ms, &init, &cfg).unwrap();
        let report = tail_criteria(&traj, &[1.0], tau).unwrap();
        let row = &report.rows[0];
        // stationary tail at R = 1 is ~0.22; both estimators see it through
        // correlated Monte Carlo noise of scale ~ 3 sqrt(p(1-p)/N)
        let slack = 6.0 * (0.25f64 / n as f64).sqrt() + 0.02;
        assert!(
            (row.cesaro_period_avg - row.time_integral_avg).abs() <= slack,
            "cesaro {} vs time average {}",
            row.cesaro_period_avg,
            row.time_integral_avg
        );
        assert!(row.cesaro_period_avg > 0.05, "tail unexpectedly empty");
    }

    #[test]
    fn negative_v_is_rejected() {
        let tau = std::f64::consts::TAU;
        let r = LyapunovSpec::new(1, tau, Expr::parse("x1").unwrap(), Expr::Const(0.0));
        assert!(matches!(r, Err(LyapunovError::NegativeOnGrid { .. })));
        let r = LyapunovSpec::new(1, tau, Expr::parse("M[2]").unwrap(), Expr::Const(0.0));
        assert!(matches!(r, Err(LyapunovError::ObservableInV { .. })));
    }
}
