//! Time-periodic mean-field coefficients.
//!
//! A [`ModelSpec`] holds the drift vector `b` and diffusion matrix `sigma` of
//!
//! ```text
//! dX_t = b(t, X_t, mu_t) dt + sigma(t, X_t, mu_t) dW_t,    mu_t = L(X_t)
//! ```
//!
//! as expression trees (see [`crate::expr`]), plus optional coupled
//! coefficients `b_bar`, `sigma_bar` for the paired system driven by the law
//! of the first component, and an optional truncation radius. The law slot is
//! closed with the empirical measure of the simulated ensemble; measure
//! dependence is restricted to moment observables of order at most 4, which
//! keeps every derivative used by the generator in closed form.
//!
//! Truncation with radius `n` evaluates the coefficients at the projection of
//! the state onto the closed ball of radius `n`, and computes the observables
//! from the projected ensemble. Inside the ball this changes nothing, which
//! is exactly the stopped-process picture the truncation mimics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{Compiled, Expr, ExprError, MultiIndex, TrigTable, MAX_DIM, MAX_POW};
use crate::measure::{Kahan, MeasureError, ParticleCloud};

/// Largest supported Brownian dimension.
pub const MAX_BROWNIAN_DIM: usize = 8;
/// Largest polynomial degree in the space coordinates.
pub const MAX_SPACE_DEGREE: u32 = 6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("unknown builtin model `{0}`")]
    UnknownBuiltin(String),
    #[error("dimension {got} not in 1..={MAX_DIM}")]
    BadDimension { got: usize },
    #[error("brownian dimension {got} not in 1..={MAX_BROWNIAN_DIM}")]
    BadBrownianDim { got: usize },
    #[error("period must be positive and finite, got {got}")]
    BadPeriod { got: f64 },
    #[error("truncation radius must be positive and finite, got {got}")]
    BadTruncRadius { got: f64 },
    #[error("{what}: expected {expected} entries, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{what} uses coordinate x{} beyond dimension {d}", idx + 1)]
    CoordBound { what: &'static str, idx: usize, d: usize },
    #[error("{what} has observable M[{mi}] of length {}, expected {d}", mi.len())]
    ObsShape {
        what: &'static str,
        mi: MultiIndex,
        d: usize,
    },
    #[error("{what} has space degree {got}, bound is {MAX_SPACE_DEGREE}")]
    DegreeBound { what: &'static str, got: u32 },
    #[error("{what} uses power {got}, bound is {MAX_POW}")]
    PowBound { what: &'static str, got: u32 },
    #[error("evaluation point has dimension {got}, model has {expected}")]
    PointDim { expected: usize, got: usize },
    #[error("cloud has dimension {got}, model has {expected}")]
    CloudDim { expected: usize, got: usize },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Selects the plain coefficients or the coupled ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Main,
    Coupled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    d: usize,
    m: usize,
    period: f64,
    drift: Vec<Expr>,
    /// Row-major `d x m`.
    diffusion: Vec<Expr>,
    coupled_drift: Option<Vec<Expr>>,
    coupled_diffusion: Option<Vec<Expr>>,
    trunc_radius: Option<f64>,
}

fn validate_component(e: &Expr, what: &'static str, d: usize) -> Result<(), ModelError> {
    if let Some(idx) = e.max_coord() {
        if idx >= d {
            return Err(ModelError::CoordBound { what, idx, d });
        }
    }
    let mut obs = Vec::new();
    e.collect_obs(&mut obs);
    for mi in obs {
        if mi.len() != d {
            return Err(ModelError::ObsShape { what, mi, d });
        }
    }
    let deg = e.space_degree();
    if deg > MAX_SPACE_DEGREE {
        return Err(ModelError::DegreeBound { what, got: deg });
    }
    let pw = e.max_pow();
    if pw > MAX_POW {
        return Err(ModelError::PowBound { what, got: pw });
    }
    Ok(())
}

impl ModelSpec {
    pub fn new(
        d: usize,
        m: usize,
        period: f64,
        drift: Vec<Expr>,
        diffusion_rows: Vec<Vec<Expr>>,
        coupled_drift: Option<Vec<Expr>>,
        coupled_diffusion_rows: Option<Vec<Vec<Expr>>>,
        trunc_radius: Option<f64>,
    ) -> Result<Self, ModelError> {
        if d == 0 || d > MAX_DIM {
            return Err(ModelError::BadDimension { got: d });
        }
        if m == 0 || m > MAX_BROWNIAN_DIM {
            return Err(ModelError::BadBrownianDim { got: m });
        }
        if !(period > 0.0) || !period.is_finite() {
            return Err(ModelError::BadPeriod { got: period });
        }
        if let Some(r) = trunc_radius {
            if !(r > 0.0) || !r.is_finite() {
                return Err(ModelError::BadTruncRadius { got: r });
            }
        }
        let flatten = |rows: Vec<Vec<Expr>>, what: &'static str| -> Result<Vec<Expr>, ModelError> {
            if rows.len() != d {
                return Err(ModelError::Shape {
                    what,
                    expected: d,
                    got: rows.len(),
                });
            }
            let mut flat = Vec::with_capacity(d * m);
            for row in rows {
                if row.len() != m {
                    return Err(ModelError::Shape {
                        what,
                        expected: m,
                        got: row.len(),
                    });
                }
                flat.extend(row);
            }
            Ok(flat)
        };
        if drift.len() != d {
            return Err(ModelError::Shape {
                what: "drift",
                expected: d,
                got: drift.len(),
            });
        }
        let diffusion = flatten(diffusion_rows, "diffusion")?;
        let coupled_drift = match coupled_drift {
            Some(cd) => {
                if cd.len() != d {
                    return Err(ModelError::Shape {
                        what: "coupled_drift",
                        expected: d,
                        got: cd.len(),
                    });
                }
                Some(cd)
            }
            None => None,
        };
        let coupled_diffusion = match coupled_diffusion_rows {
            Some(rows) => Some(flatten(rows, "coupled_diffusion")?),
            None => None,
        };

        let spec = Self {
            d,
            m,
            period,
            drift,
            diffusion,
            coupled_drift,
            coupled_diffusion,
            trunc_radius,
        };
        for (es, what) in [
            (&spec.drift, "drift"),
            (&spec.diffusion, "diffusion"),
        ] {
            for e in es.iter() {
                validate_component(e, what, d)?;
            }
        }
        if let Some(cd) = &spec.coupled_drift {
            for e in cd {
                validate_component(e, "coupled_drift", d)?;
            }
        }
        if let Some(cs) = &spec.coupled_diffusion {
            for e in cs {
                validate_component(e, "coupled_diffusion", d)?;
            }
        }
        Ok(spec)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn brownian_dim(&self) -> usize {
        self.m
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn omega(&self) -> f64 {
        std::f64::consts::TAU / self.period
    }

    pub fn trunc_radius(&self) -> Option<f64> {
        self.trunc_radius
    }

    pub fn with_trunc_radius(mut self, radius: Option<f64>) -> Result<Self, ModelError> {
        if let Some(r) = radius {
            if !(r > 0.0) || !r.is_finite() {
                return Err(ModelError::BadTruncRadius { got: r });
            }
        }
        self.trunc_radius = radius;
        Ok(self)
    }

    pub fn drift_exprs(&self, which: Which) -> &[Expr] {
        match which {
            Which::Main => &self.drift,
            Which::Coupled => self.coupled_drift.as_deref().unwrap_or(&self.drift),
        }
    }

    /// Row-major `d x m`.
    pub fn diffusion_exprs(&self, which: Which) -> &[Expr] {
        match which {
            Which::Main => &self.diffusion,
            Which::Coupled => self.coupled_diffusion.as_deref().unwrap_or(&self.diffusion),
        }
    }

    pub fn has_coupled(&self) -> bool {
        self.coupled_drift.is_some() || self.coupled_diffusion.is_some()
    }

    fn check_point(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.d {
            return Err(ModelError::PointDim {
                expected: self.d,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn check_cloud(&self, mu: &ParticleCloud) -> Result<(), ModelError> {
        if mu.dim() != self.d {
            return Err(ModelError::CloudDim {
                expected: self.d,
                got: mu.dim(),
            });
        }
        Ok(())
    }

    /// The cloud the observables are computed from: the ensemble projected
    /// onto the truncation ball when a radius is configured.
    fn observable_cloud<'a>(&self, mu: &'a ParticleCloud) -> std::borrow::Cow<'a, ParticleCloud> {
        match self.trunc_radius {
            None => std::borrow::Cow::Borrowed(mu),
            Some(r) => {
                let mut pos = mu.positions().to_vec();
                clip_positions(&mut pos, self.d, r);
                std::borrow::Cow::Owned(ParticleCloud::from_raw_unchecked(
                    self.d,
                    pos,
                    mu.weights().to_vec(),
                    mu.time_stamp(),
                ))
            }
        }
    }

    /// Drift vector at `(t, x, mu)`, with truncation applied when configured.
    pub fn eval_drift(
        &self,
        which: Which,
        t: f64,
        x: &[f64],
        mu: &ParticleCloud,
    ) -> Result<Vec<f64>, ModelError> {
        self.check_point(x)?;
        self.check_cloud(mu)?;
        let xc = self.clipped_point(x);
        let obs_cloud = self.observable_cloud(mu);
        let mut memo = ObsMemo::new(&obs_cloud);
        let omega = self.omega();
        self.drift_exprs(which)
            .iter()
            .map(|e| Ok(e.eval_checked(t, omega, &xc, &mut |mi| memo.get(mi))?))
            .collect()
    }

    /// Diffusion matrix at `(t, x, mu)`, row-major `d x m`.
    pub fn eval_diffusion(
        &self,
        which: Which,
        t: f64,
        x: &[f64],
        mu: &ParticleCloud,
    ) -> Result<Vec<f64>, ModelError> {
        self.check_point(x)?;
        self.check_cloud(mu)?;
        let xc = self.clipped_point(x);
        let obs_cloud = self.observable_cloud(mu);
        let mut memo = ObsMemo::new(&obs_cloud);
        let omega = self.omega();
        self.diffusion_exprs(which)
            .iter()
            .map(|e| Ok(e.eval_checked(t, omega, &xc, &mut |mi| memo.get(mi))?))
            .collect()
    }

    fn clipped_point(&self, x: &[f64]) -> Vec<f64> {
        let mut xc = x.to_vec();
        if let Some(r) = self.trunc_radius {
            clip_positions(&mut xc, self.d, r);
        }
        xc
    }

    pub(crate) fn compile(&self) -> CompiledModel {
        let mut slots = Vec::new();
        let compile_all = |es: &[Expr], slots: &mut Vec<MultiIndex>| -> Vec<Compiled> {
            es.iter().map(|e| Compiled::compile(e, slots)).collect()
        };
        let mut max_k = 0;
        for e in self
            .drift
            .iter()
            .chain(self.diffusion.iter())
            .chain(self.coupled_drift.iter().flatten())
            .chain(self.coupled_diffusion.iter().flatten())
        {
            max_k = max_k.max(e.max_harmonic());
        }
        let drift_main = compile_all(&self.drift, &mut slots);
        let diff_main = compile_all(&self.diffusion, &mut slots);
        let drift_coupled = compile_all(self.drift_exprs(Which::Coupled), &mut slots);
        let diff_coupled = compile_all(self.diffusion_exprs(Which::Coupled), &mut slots);
        CompiledModel {
            d: self.d,
            m: self.m,
            omega: self.omega(),
            max_k,
            slots,
            drift_main,
            diff_main,
            drift_coupled,
            diff_coupled,
            trunc: self.trunc_radius,
        }
    }

    pub fn to_json(&self) -> String {
        let doc = ModelJson::from(self);
        serde_json::to_string_pretty(&doc).expect("model serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let doc: ModelJson = serde_json::from_str(text)?;
        doc.try_into()
    }
}

/// Project each `d`-vector in `buf` onto the closed ball of radius `r`.
pub fn clip_positions(buf: &mut [f64], d: usize, r: f64) {
    for chunk in buf.chunks_exact_mut(d) {
        let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > r {
            let s = r / norm;
            for v in chunk {
                *v *= s;
            }
        }
    }
}

/// Evaluate an expression at `(t, x, mu)` with observables taken from `mu`.
pub fn eval_expr(
    e: &Expr,
    period: f64,
    t: f64,
    x: &[f64],
    mu: &ParticleCloud,
) -> Result<f64, ModelError> {
    if !(period > 0.0) {
        return Err(ModelError::BadPeriod { got: period });
    }
    let mut memo = ObsMemo::new(mu);
    let omega = std::f64::consts::TAU / period;
    Ok(e.eval_checked(t, omega, x, &mut |mi| memo.get(mi))?)
}

/// Memoized observable lookup so repeated atoms cost one pass each.
struct ObsMemo<'a> {
    cloud: &'a ParticleCloud,
    order: Option<Vec<u32>>,
    cache: Vec<(MultiIndex, f64)>,
}

impl<'a> ObsMemo<'a> {
    fn new(cloud: &'a ParticleCloud) -> Self {
        ObsMemo {
            cloud,
            order: None,
            cache: Vec::new(),
        }
    }

    fn get(&mut self, mi: &MultiIndex) -> f64 {
        if let Some((_, v)) = self.cache.iter().find(|(k, _)| k == mi) {
            return *v;
        }
        let order = self
            .order
            .get_or_insert_with(|| self.cloud.canonical_order());
        let v = self.cloud.moment_in_order(mi.exps(), order);
        self.cache.push((*mi, v));
        v
    }
}

// ---------------------------------------------------------------------------
// Compiled form used by the stepping loops

pub(crate) struct CompiledModel {
    pub d: usize,
    pub m: usize,
    pub omega: f64,
    pub max_k: u32,
    pub slots: Vec<MultiIndex>,
    pub drift_main: Vec<Compiled>,
    pub diff_main: Vec<Compiled>,
    pub drift_coupled: Vec<Compiled>,
    pub diff_coupled: Vec<Compiled>,
    pub trunc: Option<f64>,
}

impl CompiledModel {
    pub fn trig(&self, t: f64) -> TrigTable {
        TrigTable::at(t, self.omega, self.max_k.max(1))
    }

    /// Observable table for one step, computed from the (possibly clipped)
    /// ensemble. The simulation path accumulates in particle-index order
    /// with compensated summation: the ensemble is an ordered family of
    /// paths here, and index order keeps the per-step cost linear. The
    /// measure-level ops ([`ParticleCloud::moment`]) sort into canonical
    /// order instead, which is what makes them permutation-stable.
    pub fn obs_table(&self, cloud: &ParticleCloud) -> Vec<f64> {
        if self.slots.is_empty() {
            return Vec::new();
        }
        let clipped;
        let source = match self.trunc {
            None => cloud,
            Some(r) => {
                let mut pos = cloud.positions().to_vec();
                clip_positions(&mut pos, self.d, r);
                clipped = ParticleCloud::from_raw_unchecked(
                    self.d,
                    pos,
                    cloud.weights().to_vec(),
                    cloud.time_stamp(),
                );
                &clipped
            }
        };
        let mut accs = vec![Kahan::default(); self.slots.len()];
        for i in 0..source.len() {
            let x = source.position(i);
            let w = source.weights()[i];
            for (s, mi) in self.slots.iter().enumerate() {
                let mut v = w;
                for (c, &a) in x.iter().zip(mi.exps()) {
                    if a > 0 {
                        v *= c.powi(i32::from(a));
                    }
                }
                accs[s].add(v);
            }
        }
        accs.into_iter().map(Kahan::value).collect()
    }
}

// ---------------------------------------------------------------------------
// Builtins

/// Linear mean-field model
/// `dX = (-a X + b M[1] + c sin(w t)) dt + sigma dW` with period `T`.
///
/// The first two moments of this model close into an ODE system, so runs can
/// be validated against an independent integrator (see [`crate::reference`]).
pub fn ou_model(a: f64, b: f64, c: f64, sigma: f64, period: f64) -> Result<ModelSpec, ModelError> {
    let drift = Expr::add(
        Expr::add(
            Expr::mul(Expr::Const(-a), Expr::Coord(0)),
            Expr::mul(Expr::Const(b), Expr::obs(&[1])?),
        ),
        Expr::mul(Expr::Const(c), Expr::sin_harmonic(1)),
    );
    ModelSpec::new(
        1,
        1,
        period,
        vec![drift],
        vec![vec![Expr::Const(sigma)]],
        None,
        None,
        None,
    )
}

/// Builtin example models.
///
/// * `ex51_ou` - linear mean-field model, defaults `a = 1`, `b = 0.25`,
///   `c = 1`, `sigma = 1`, `T = 2 pi`.
/// * `ex52_quartic` - quartic confinement with multiplicative noise:
///   drift `-4 x^3 + x sin(w t)/8 + M[1]`, diffusion `sqrt(2) x`, `T = 2 pi`.
/// * `ex53_forced` - `ex51_ou` plus the periodic force `cos(w t)/2`.
pub fn builtin_example(name: &str) -> Result<ModelSpec, ModelError> {
    let tau = std::f64::consts::TAU;
    match name {
        "ex51_ou" => ou_model(1.0, 0.25, 1.0, 1.0, tau),
        "ex52_quartic" => {
            let drift = Expr::parse("-4*x1^3 + 0.125*x1*sin(w*t) + M[1]")?;
            let sigma = Expr::mul(Expr::Const(std::f64::consts::SQRT_2), Expr::Coord(0));
            ModelSpec::new(1, 1, tau, vec![drift], vec![vec![sigma]], None, None, None)
        }
        "ex53_forced" => {
            let base = builtin_example("ex51_ou")?;
            let force = Expr::mul(Expr::Const(0.5), Expr::cos_harmonic(1));
            let drift = Expr::add(base.drift[0].clone(), force);
            ModelSpec::new(
                1,
                1,
                tau,
                vec![drift],
                vec![vec![base.diffusion[0].clone()]],
                None,
                None,
                None,
            )
        }
        other => Err(ModelError::UnknownBuiltin(other.to_string())),
    }
}

/// Names and one-line descriptions for the CLI listing.
pub fn builtin_names() -> &'static [(&'static str, &'static str)] {
    &[
        (
            "ex51_ou",
            "linear mean-field model -a*x + b*M[1] + c*sin(w*t), additive noise",
        ),
        (
            "ex52_quartic",
            "quartic confinement -4x^3 + x*sin(w*t)/8 + M[1], diffusion sqrt(2)*x",
        ),
        ("ex53_forced", "ex51_ou plus the periodic force cos(w*t)/2"),
    ]
}

// ---------------------------------------------------------------------------
// JSON document

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelJson {
    d: usize,
    m: usize,
    #[serde(rename = "T")]
    period: f64,
    drift: Vec<String>,
    diffusion: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    coupled_drift: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    coupled_diffusion: Option<Vec<Vec<String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trunc_radius: Option<f64>,
}

impl From<&ModelSpec> for ModelJson {
    fn from(ms: &ModelSpec) -> Self {
        let rows = |flat: &[Expr]| -> Vec<Vec<String>> {
            flat.chunks_exact(ms.m)
                .map(|row| row.iter().map(|e| e.to_string()).collect())
                .collect()
        };
        ModelJson {
            d: ms.d,
            m: ms.m,
            period: ms.period,
            drift: ms.drift.iter().map(|e| e.to_string()).collect(),
            diffusion: rows(&ms.diffusion),
            coupled_drift: ms
                .coupled_drift
                .as_ref()
                .map(|cd| cd.iter().map(|e| e.to_string()).collect()),
            coupled_diffusion: ms.coupled_diffusion.as_deref().map(rows),
            trunc_radius: ms.trunc_radius,
        }
    }
}

impl TryFrom<ModelJson> for ModelSpec {
    type Error = ModelError;

    fn try_from(doc: ModelJson) -> Result<Self, ModelError> {
        let parse_vec = |ss: &[String]| -> Result<Vec<Expr>, ModelError> {
            ss.iter().map(|s| Ok(Expr::parse(s)?)).collect()
        };
        let parse_rows = |rows: &[Vec<String>]| -> Result<Vec<Vec<Expr>>, ModelError> {
            rows.iter().map(|r| parse_vec(r)).collect()
        };
        ModelSpec::new(
            doc.d,
            doc.m,
            doc.period,
            parse_vec(&doc.drift)?,
            parse_rows(&doc.diffusion)?,
            doc.coupled_drift.as_deref().map(parse_vec).transpose()?,
            doc.coupled_diffusion
                .as_deref()
                .map(parse_rows)
                .transpose()?,
            doc.trunc_radius,
        )
    }
}
