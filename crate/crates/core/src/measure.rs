//! Weighted particle clouds as probability measures, with the transport
//! distances used throughout the lab.
//!
//! A cloud carries `N` positions in `R^d`, nonnegative weights summing to one
//! and a model-time stamp. Moments are accumulated with compensated (Kahan)
//! summation in a canonical particle order (positions lexicographic, ties by
//! weight and then input index), which makes every moment bit-for-bit
//! invariant under particle permutations.
//!
//! Distances:
//! * [`wasserstein2_1d`] is the exact quadratic-cost transport distance in
//!   one dimension via the quantile coupling on the common refinement of the
//!   cumulative weights.
//! * [`sliced_wasserstein2`] is the deterministic-given-seed surrogate for
//!   `d >= 2`: the root mean of squared 1-d distances along random
//!   projections. It lower-bounds the true distance, which is all the
//!   diagnostics here need.
//! * [`levy_prohorov_upper`] turns `W_p >= omega^{1+1/p}` around into an
//!   upper bound `omega <= W_p^{p/(p+1)}` for the Levy-Prohorov distance.
//! * [`omega_small`] evaluates the Levy-Prohorov distance itself by bisection
//!   over the finite lattice of candidate closed sets, feasible only for
//!   small supports and meant as an oracle.

use std::io::{self, BufRead, Read, Write};

use thiserror::Error;

use crate::rng::KeyStream;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("cloud must contain at least one particle")]
    Empty,
    #[error("dimension {got} unsupported (expected 1..=3)")]
    BadDimension { got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("positions length {len} is not a multiple of dimension {d}")]
    RaggedPositions { len: usize, d: usize },
    #[error("weights must be nonnegative and finite")]
    BadWeights,
    #[error("weights sum to {sum}, not 1 within 1e-12")]
    WeightSum { sum: f64 },
    #[error("non-finite position at particle {index}")]
    NonFinitePosition { index: usize },
    #[error("moment order {order} exceeds the supported bound 8")]
    MomentOrder { order: u32 },
    #[error("operation requires dimension 1, cloud has dimension {got}")]
    NotOneDimensional { got: usize },
    #[error("sliced distance requires dimension >= 2; use the exact 1-d route")]
    SlicedOneDimensional,
    #[error("combined support {got} exceeds the oracle bound {max}")]
    SupportTooLarge { got: usize, max: usize },
    #[error("radius must be positive, got {got}")]
    BadRadius { got: f64 },
    #[error("csv: {0}")]
    Csv(String),
    #[error("binary dump: {0}")]
    Binary(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Monotone bit pattern for IEEE total order (same ordering as `total_cmp`).
#[inline(always)]
fn f64_total_order_key(v: f64) -> u64 {
    let b = v.to_bits();
    if b >> 63 == 0 {
        b | 0x8000_0000_0000_0000
    } else {
        !b
    }
}

/// Compensated (Kahan) accumulator.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct Kahan {
    sum: f64,
    carry: f64,
}

impl Kahan {
    #[inline(always)]
    pub fn add(&mut self, v: f64) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    #[inline(always)]
    pub fn value(self) -> f64 {
        self.sum
    }
}

/// Weighted sample representation of a probability measure at a time stamp.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    d: usize,
    /// Row-major `N x d`.
    positions: Vec<f64>,
    weights: Vec<f64>,
    time_stamp: f64,
}

impl ParticleCloud {
    pub fn new(
        d: usize,
        positions: Vec<f64>,
        weights: Vec<f64>,
        time_stamp: f64,
    ) -> Result<Self, MeasureError> {
        if d == 0 || d > crate::expr::MAX_DIM {
            return Err(MeasureError::BadDimension { got: d });
        }
        if positions.is_empty() {
            return Err(MeasureError::Empty);
        }
        if positions.len() % d != 0 {
            return Err(MeasureError::RaggedPositions {
                len: positions.len(),
                d,
            });
        }
        let n = positions.len() / d;
        if weights.len() != n {
            return Err(MeasureError::DimensionMismatch {
                expected: n,
                got: weights.len(),
            });
        }
        for (i, chunk) in positions.chunks_exact(d).enumerate() {
            if chunk.iter().any(|v| !v.is_finite()) {
                return Err(MeasureError::NonFinitePosition { index: i });
            }
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(MeasureError::BadWeights);
        }
        let mut acc = Kahan::default();
        for &w in &weights {
            acc.add(w);
        }
        let sum = acc.value();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(MeasureError::WeightSum { sum });
        }
        Ok(Self {
            d,
            positions,
            weights,
            time_stamp,
        })
    }

    /// Skip validation for buffers produced by the stepping loop, which are
    /// finite-checked there anyway.
    pub(crate) fn from_raw_unchecked(
        d: usize,
        positions: Vec<f64>,
        weights: Vec<f64>,
        time_stamp: f64,
    ) -> Self {
        Self {
            d,
            positions,
            weights,
            time_stamp,
        }
    }

    pub(crate) fn into_parts(self) -> (Vec<f64>, Vec<f64>) {
        (self.positions, self.weights)
    }

    /// Uniform weights over the given positions.
    pub fn uniform(d: usize, positions: Vec<f64>, time_stamp: f64) -> Result<Self, MeasureError> {
        if d == 0 || positions.len() % d != 0 {
            return Err(MeasureError::RaggedPositions {
                len: positions.len(),
                d,
            });
        }
        let n = positions.len() / d;
        let w = 1.0 / n as f64;
        Self::new(d, positions, vec![w; n], time_stamp)
    }

    /// `n` copies of the point mass at `x`.
    pub fn delta(x: &[f64], n: usize, time_stamp: f64) -> Result<Self, MeasureError> {
        let d = x.len();
        let mut positions = Vec::with_capacity(n * d);
        for _ in 0..n {
            positions.extend_from_slice(x);
        }
        Self::uniform(d, positions, time_stamp)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time_stamp(&self) -> f64 {
        self.time_stamp
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline(always)]
    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.d..(i + 1) * self.d]
    }

    pub fn with_time(mut self, t: f64) -> Self {
        self.time_stamp = t;
        self
    }

    /// Canonical particle order: positions lexicographic, ties broken by
    /// weight, then by input index. One dimension sorts on packed integer
    /// keys (the IEEE total-order transform), which is what the stepping
    /// loop hits every step.
    pub fn canonical_order(&self) -> Vec<u32> {
        let n = self.len();
        if self.d == 1 {
            let mut keys: Vec<(u64, u64, u32)> = (0..n)
                .map(|i| {
                    (
                        f64_total_order_key(self.positions[i]),
                        f64_total_order_key(self.weights[i]),
                        i as u32,
                    )
                })
                .collect();
            keys.sort_unstable();
            return keys.into_iter().map(|(_, _, i)| i).collect();
        }
        let mut idx: Vec<u32> = (0..n as u32).collect();
        idx.sort_by(|&a, &b| {
            let pa = self.position(a as usize);
            let pb = self.position(b as usize);
            for (va, vb) in pa.iter().zip(pb) {
                match va.total_cmp(vb) {
                    std::cmp::Ordering::Equal => continue,
                    o => return o,
                }
            }
            self.weights[a as usize].total_cmp(&self.weights[b as usize])
        });
        idx
    }

    /// Weighted empirical moment `sum_i w_i x_i^alpha`, `|alpha| <= 8`.
    pub fn moment(&self, alpha: &[u8]) -> Result<f64, MeasureError> {
        if alpha.len() != self.d {
            return Err(MeasureError::DimensionMismatch {
                expected: self.d,
                got: alpha.len(),
            });
        }
        let order: u32 = alpha.iter().map(|&a| u32::from(a)).sum();
        if order > 8 {
            return Err(MeasureError::MomentOrder { order });
        }
        let order_idx = self.canonical_order();
        Ok(self.moment_in_order(alpha, &order_idx))
    }

    pub(crate) fn moment_in_order(&self, alpha: &[u8], order: &[u32]) -> f64 {
        let mut acc = Kahan::default();
        for &i in order {
            let x = self.position(i as usize);
            let mut m = self.weights[i as usize];
            for (v, &a) in x.iter().zip(alpha) {
                if a > 0 {
                    m *= v.powi(i32::from(a));
                }
            }
            acc.add(m);
        }
        acc.value()
    }

    /// `|mu|_2 = (int |x|^2 mu(dx))^{1/2}`.
    pub fn second_moment_norm(&self) -> f64 {
        let order = self.canonical_order();
        let mut acc = Kahan::default();
        for &i in &order {
            let x = self.position(i as usize);
            let sq: f64 = x.iter().map(|v| v * v).sum();
            acc.add(self.weights[i as usize] * sq);
        }
        acc.value().max(0.0).sqrt()
    }

    /// Weight of the particles strictly outside the centered ball of radius `R`.
    pub fn tail_mass(&self, radius: f64) -> Result<f64, MeasureError> {
        if !(radius > 0.0) {
            return Err(MeasureError::BadRadius { got: radius });
        }
        let order = self.canonical_order();
        let mut acc = Kahan::default();
        for &i in &order {
            let x = self.position(i as usize);
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > radius {
                acc.add(self.weights[i as usize]);
            }
        }
        Ok(acc.value())
    }

    /// Orthogonal projection onto a unit direction, keeping weights and time.
    pub fn project(&self, direction: &[f64]) -> Result<ParticleCloud, MeasureError> {
        if direction.len() != self.d {
            return Err(MeasureError::DimensionMismatch {
                expected: self.d,
                got: direction.len(),
            });
        }
        let mut proj = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let x = self.position(i);
            proj.push(x.iter().zip(direction).map(|(a, b)| a * b).sum());
        }
        Ok(ParticleCloud::from_raw_unchecked(
            1,
            proj,
            self.weights.clone(),
            self.time_stamp,
        ))
    }
}

/// A point of the lifted state space `R^d x P(R^d)`.
#[derive(Debug, Clone)]
pub struct LiftedPoint {
    pub x: Vec<f64>,
    pub mu: ParticleCloud,
}

impl LiftedPoint {
    pub fn new(x: Vec<f64>, mu: ParticleCloud) -> Result<Self, MeasureError> {
        if x.len() != mu.dim() {
            return Err(MeasureError::DimensionMismatch {
                expected: mu.dim(),
                got: x.len(),
            });
        }
        Ok(Self { x, mu })
    }

    pub fn norm(&self) -> f64 {
        let xn = self.x.iter().map(|v| v * v).sum::<f64>().sqrt();
        xn.max(self.mu.second_moment_norm())
    }
}

/// Membership in the lifted tail `{(x, mu): |x| v |mu|_2 > R}`.
pub fn lifted_in_tail(lp: &LiftedPoint, radius: f64) -> Result<bool, MeasureError> {
    if !(radius > 0.0) {
        return Err(MeasureError::BadRadius { got: radius });
    }
    Ok(lp.norm() > radius)
}

// ---------------------------------------------------------------------------
// Wasserstein distances

/// `(position, weight)` list sorted by position, ties by input index.
fn sorted_support_1d(mu: &ParticleCloud) -> Vec<(f64, f64)> {
    let mut pairs: Vec<(f64, f64)> = mu
        .positions()
        .iter()
        .copied()
        .zip(mu.weights().iter().copied())
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs
}

pub(crate) fn wasserstein_p_1d(
    mu: &ParticleCloud,
    nu: &ParticleCloud,
    p: u32,
) -> Result<f64, MeasureError> {
    if mu.dim() != 1 {
        return Err(MeasureError::NotOneDimensional { got: mu.dim() });
    }
    if nu.dim() != 1 {
        return Err(MeasureError::NotOneDimensional { got: nu.dim() });
    }
    let a = sorted_support_1d(mu);
    let b = sorted_support_1d(nu);
    let mut cost = Kahan::default();
    let (mut i, mut j) = (0usize, 0usize);
    let mut ra = a[0].1;
    let mut rb = b[0].1;
    // Walk the common refinement of the two cumulative-weight partitions.
    while i < a.len() && j < b.len() {
        let m = ra.min(rb);
        if m > 0.0 {
            let gap = (a[i].0 - b[j].0).abs();
            cost.add(m * if p == 1 { gap } else { gap * gap });
        }
        ra -= m;
        rb -= m;
        if ra <= 0.0 {
            i += 1;
            if i < a.len() {
                ra = a[i].1;
            }
        }
        if rb <= 0.0 {
            j += 1;
            if j < b.len() {
                rb = b[j].1;
            }
        }
    }
    let c = cost.value().max(0.0);
    Ok(if p == 1 { c } else { c.sqrt() })
}

/// Exact quadratic-cost transport distance between 1-d clouds via the
/// quantile coupling. Symmetric, nonnegative, zero exactly when the two
/// clouds coincide as measures.
pub fn wasserstein2_1d(mu: &ParticleCloud, nu: &ParticleCloud) -> Result<f64, MeasureError> {
    wasserstein_p_1d(mu, nu, 2)
}

/// Exact linear-cost transport distance between 1-d clouds.
pub fn wasserstein1_1d(mu: &ParticleCloud, nu: &ParticleCloud) -> Result<f64, MeasureError> {
    wasserstein_p_1d(mu, nu, 1)
}

/// Sliced quadratic transport surrogate for `d >= 2`: root mean of squared
/// 1-d distances along `n_proj` random unit directions. Deterministic given
/// the seed, identical regardless of worker count (the sum runs in projection
/// order).
pub fn sliced_wasserstein2(
    mu: &ParticleCloud,
    nu: &ParticleCloud,
    n_proj: usize,
    seed: u64,
) -> Result<f64, MeasureError> {
    let d = mu.dim();
    if d < 2 {
        return Err(MeasureError::SlicedOneDimensional);
    }
    if nu.dim() != d {
        return Err(MeasureError::DimensionMismatch {
            expected: d,
            got: nu.dim(),
        });
    }
    let n_proj = n_proj.max(1);
    let mut acc = Kahan::default();
    for j in 0..n_proj {
        let mut stream = KeyStream::new(crate::rng::derive(seed, j as u64));
        let dir = stream.unit_vector(d);
        let pa = mu.project(&dir)?;
        let pb = nu.project(&dir)?;
        let w = wasserstein_p_1d(&pa, &pb, 2)?;
        acc.add(w * w);
    }
    Ok((acc.value() / n_proj as f64).max(0.0).sqrt())
}

/// Which transport route backed a derived quantity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WpRoute {
    Exact1d,
    /// Sliced surrogate; it lower-bounds `W_p`, so the Levy-Prohorov bound
    /// built on it is an estimate rather than a certified bound.
    Sliced,
}

#[derive(Debug, Clone, Copy)]
pub struct LevyProhorovBound {
    pub value: f64,
    pub wp: f64,
    pub route: WpRoute,
}

/// Upper bound for the Levy-Prohorov distance from `W_p >= omega^{1+1/p}`,
/// i.e. `omega <= W_p^{p/(p+1)}`. Exact `W_p` in one dimension; the sliced
/// surrogate (with the `route` caveat flagged) otherwise.
pub fn levy_prohorov_upper(
    mu: &ParticleCloud,
    nu: &ParticleCloud,
    p: u32,
    seed: u64,
) -> Result<LevyProhorovBound, MeasureError> {
    assert!(p == 1 || p == 2, "p must be 1 or 2");
    let (wp, route) = if mu.dim() == 1 {
        (wasserstein_p_1d(mu, nu, p)?, WpRoute::Exact1d)
    } else {
        // Only the quadratic sliced surrogate is implemented for d >= 2.
        (sliced_wasserstein2(mu, nu, 128, seed)?, WpRoute::Sliced)
    };
    let expo = p as f64 / (p as f64 + 1.0);
    Ok(LevyProhorovBound {
        value: wp.powf(expo),
        wp,
        route,
    })
}

/// Largest combined support for [`omega_small`].
pub const OMEGA_SUPPORT_MAX: usize = 12;

/// Levy-Prohorov distance by bisection at oracle scale.
///
/// For discrete measures it suffices to test the defining inequalities
/// `mu(A) < nu(A^delta) + delta` and symmetrically over the subsets `A` of the
/// combined support: intersecting an arbitrary closed set with the support
/// leaves `mu(A)` unchanged and can only shrink `A^delta`. The predicate is
/// monotone in `delta`, so bisection finds the infimum.
pub fn omega_small(mu: &ParticleCloud, nu: &ParticleCloud) -> Result<f64, MeasureError> {
    if mu.dim() != nu.dim() {
        return Err(MeasureError::DimensionMismatch {
            expected: mu.dim(),
            got: nu.dim(),
        });
    }
    let d = mu.dim();

    // Merge coincident support points, accumulating per-measure weights.
    let mut points: Vec<Vec<f64>> = Vec::new();
    let mut wa: Vec<f64> = Vec::new();
    let mut wb: Vec<f64> = Vec::new();
    let put = |x: &[f64], w: f64, which: usize, points: &mut Vec<Vec<f64>>,
                   wa: &mut Vec<f64>, wb: &mut Vec<f64>| {
        if let Some(k) = points.iter().position(|p| p.as_slice() == x) {
            if which == 0 {
                wa[k] += w;
            } else {
                wb[k] += w;
            }
        } else {
            points.push(x.to_vec());
            wa.push(if which == 0 { w } else { 0.0 });
            wb.push(if which == 1 { w } else { 0.0 });
        }
    };
    for i in 0..mu.len() {
        put(mu.position(i), mu.weights()[i], 0, &mut points, &mut wa, &mut wb);
    }
    for i in 0..nu.len() {
        put(nu.position(i), nu.weights()[i], 1, &mut points, &mut wa, &mut wb);
    }
    let k = points.len();
    if k > OMEGA_SUPPORT_MAX {
        return Err(MeasureError::SupportTooLarge {
            got: k,
            max: OMEGA_SUPPORT_MAX,
        });
    }

    let dist = |i: usize, j: usize| -> f64 {
        points[i]
            .iter()
            .zip(&points[j])
            .map(|(a, b)| (a - b) * (a - b))
            .take(d)
            .sum::<f64>()
            .sqrt()
    };
    // dist_to_set[i][mask]: distance from point i to the subset `mask`,
    // filled by peeling the lowest set bit.
    let masks = 1usize << k;
    let mut dist_to_set = vec![f64::INFINITY; k * masks];
    for i in 0..k {
        for mask in 1..masks {
            let low = mask.trailing_zeros() as usize;
            let rest = mask & (mask - 1);
            let via_rest = if rest == 0 {
                f64::INFINITY
            } else {
                dist_to_set[i * masks + rest]
            };
            dist_to_set[i * masks + mask] = via_rest.min(dist(i, low));
        }
    }
    let mut mass_a = vec![0.0f64; masks];
    let mut mass_b = vec![0.0f64; masks];
    for mask in 1..masks {
        let low = mask.trailing_zeros() as usize;
        let rest = mask & (mask - 1);
        mass_a[mask] = mass_a[rest] + wa[low];
        mass_b[mask] = mass_b[rest] + wb[low];
    }

    let check = |delta: f64| -> bool {
        for mask in 1..masks {
            let mut infl_a = 0.0;
            let mut infl_b = 0.0;
            for i in 0..k {
                if dist_to_set[i * masks + mask] < delta {
                    infl_a += wa[i];
                    infl_b += wb[i];
                }
            }
            if mass_a[mask] >= infl_b + delta || mass_b[mask] >= infl_a + delta {
                return false;
            }
        }
        true
    };

    let mut lo = 0.0f64;
    let mut hi = {
        let diam = (0..k)
            .flat_map(|i| (0..k).map(move |j| (i, j)))
            .map(|(i, j)| dist(i, j))
            .fold(0.0f64, f64::max);
        diam + 1.0
    };
    debug_assert!(check(hi));
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if check(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

// ---------------------------------------------------------------------------
// Serialization: CSV and the MVPC1 binary columnar dump

/// Write `t,w,x1[,x2,x3]` rows, one particle per row. Floats print in the
/// shortest round-trip form, so re-importing reproduces the cloud exactly.
pub fn cloud_to_csv<W: Write>(mu: &ParticleCloud, out: &mut W) -> io::Result<()> {
    let mut header = String::from("t,w");
    for j in 0..mu.dim() {
        header.push_str(&format!(",x{}", j + 1));
    }
    writeln!(out, "{header}")?;
    for i in 0..mu.len() {
        let mut row = format!("{},{}", mu.time_stamp(), mu.weights()[i]);
        for v in mu.position(i) {
            row.push_str(&format!(",{v}"));
        }
        writeln!(out, "{row}")?;
    }
    Ok(())
}

pub fn cloud_from_csv<R: BufRead>(input: R) -> Result<ParticleCloud, MeasureError> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| MeasureError::Csv("empty file".into()))??;
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.len() < 3 || cols[0] != "t" || cols[1] != "w" {
        return Err(MeasureError::Csv(format!("unexpected header `{header}`")));
    }
    let d = cols.len() - 2;
    for (j, c) in cols[2..].iter().enumerate() {
        if *c != format!("x{}", j + 1) {
            return Err(MeasureError::Csv(format!("unexpected header `{header}`")));
        }
    }
    let mut positions = Vec::new();
    let mut weights = Vec::new();
    let mut time = None;
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != d + 2 {
            return Err(MeasureError::Csv(format!(
                "row {}: expected {} fields, got {}",
                lineno + 2,
                d + 2,
                fields.len()
            )));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| MeasureError::Csv(format!("row {}: bad float `{s}`", lineno + 2)))
        };
        let t = parse(fields[0])?;
        match time {
            None => time = Some(t),
            Some(t0) if t0 == t => {}
            Some(t0) => {
                return Err(MeasureError::Csv(format!(
                    "row {}: time stamp {t} differs from {t0}",
                    lineno + 2
                )))
            }
        }
        weights.push(parse(fields[1])?);
        for f in &fields[2..] {
            positions.push(parse(f)?);
        }
    }
    let time = time.ok_or_else(|| MeasureError::Csv("no particle rows".into()))?;
    ParticleCloud::new(d, positions, weights, time)
}

const MVPC_MAGIC: &[u8; 5] = b"MVPC1";

/// Binary columnar dump: magic `MVPC1`, then little-endian `u64 n`, `u32 d`,
/// `f64 time`, then the weight column and the `d` coordinate columns as
/// little-endian f64.
pub fn cloud_to_mvpc<W: Write>(mu: &ParticleCloud, out: &mut W) -> io::Result<()> {
    out.write_all(MVPC_MAGIC)?;
    out.write_all(&(mu.len() as u64).to_le_bytes())?;
    out.write_all(&(mu.dim() as u32).to_le_bytes())?;
    out.write_all(&mu.time_stamp().to_le_bytes())?;
    for &w in mu.weights() {
        out.write_all(&w.to_le_bytes())?;
    }
    for j in 0..mu.dim() {
        for i in 0..mu.len() {
            out.write_all(&mu.position(i)[j].to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn cloud_from_mvpc<R: Read>(input: &mut R) -> Result<ParticleCloud, MeasureError> {
    let mut magic = [0u8; 5];
    input.read_exact(&mut magic)?;
    if &magic != MVPC_MAGIC {
        return Err(MeasureError::Binary("bad magic".into()));
    }
    let mut b8 = [0u8; 8];
    let mut b4 = [0u8; 4];
    input.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    input.read_exact(&mut b4)?;
    let d = u32::from_le_bytes(b4) as usize;
    input.read_exact(&mut b8)?;
    let time = f64::from_le_bytes(b8);
    if n == 0 || d == 0 || d > crate::expr::MAX_DIM || n > (1 << 40) {
        return Err(MeasureError::Binary(format!("implausible shape {n}x{d}")));
    }
    let mut read_col = |len: usize| -> Result<Vec<f64>, MeasureError> {
        let mut col = Vec::with_capacity(len);
        for _ in 0..len {
            input.read_exact(&mut b8)?;
            col.push(f64::from_le_bytes(b8));
        }
        Ok(col)
    };
    let weights = read_col(n)?;
    let mut cols = Vec::with_capacity(d);
    for _ in 0..d {
        cols.push(read_col(n)?);
    }
    let mut positions = Vec::with_capacity(n * d);
    for i in 0..n {
        for col in &cols {
            positions.push(col[i]);
        }
    }
    ParticleCloud::new(d, positions, weights, time)
}
