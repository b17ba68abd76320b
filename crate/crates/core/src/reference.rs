//! Independent moment references for the linear mean-field model.
//!
//! For `dX = (-a X + b m1 + c sin(w t)) dt + sigma dW` with `m1 = E X`, the
//! first two moments close:
//!
//! ```text
//! m' = -(a - b) m + c sin(w t)
//! v' = -2 a v + 2 b m^2 + 2 c m sin(w t) + sigma^2
//! ```
//!
//! The mean has the explicit periodic orbit
//! `m*(t) = c (abar sin(w t) - w cos(w t)) / (abar^2 + w^2)`, `abar = a - b`.
//! The second moment's periodic orbit is obtained by integrating the system
//! until the exponential transients (rate `2a`) are gone.
//!
//! Everything here is classical RK4 on the closed ODEs and shares no code
//! with the particle simulator, so it can serve as an oracle for it.

/// Parameters of the linear model (see [`crate::model::ou_model`]).
#[derive(Debug, Clone, Copy)]
pub struct OuMoments {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub sigma: f64,
    pub period: f64,
}

impl OuMoments {
    /// The documented defaults of the `ex51_ou` builtin.
    pub fn from_model_defaults() -> Self {
        OuMoments {
            a: 1.0,
            b: 0.25,
            c: 1.0,
            sigma: 1.0,
            period: std::f64::consts::TAU,
        }
    }

    pub fn omega(&self) -> f64 {
        std::f64::consts::TAU / self.period
    }

    /// The explicit periodic mean orbit.
    pub fn periodic_mean(&self, t: f64) -> f64 {
        let w = self.omega();
        let abar = self.a - self.b;
        self.c * (abar * (w * t).sin() - w * (w * t).cos()) / (abar * abar + w * w)
    }

    fn rhs(&self, t: f64, m: f64, v: f64) -> (f64, f64) {
        let s = (self.omega() * t).sin();
        let dm = -(self.a - self.b) * m + self.c * s;
        let dv = -2.0 * self.a * v + 2.0 * self.b * m * m + 2.0 * self.c * m * s
            + self.sigma * self.sigma;
        (dm, dv)
    }

    fn rk4_step(&self, t: f64, m: f64, v: f64, h: f64) -> (f64, f64) {
        let (k1m, k1v) = self.rhs(t, m, v);
        let (k2m, k2v) = self.rhs(t + 0.5 * h, m + 0.5 * h * k1m, v + 0.5 * h * k1v);
        let (k3m, k3v) = self.rhs(t + 0.5 * h, m + 0.5 * h * k2m, v + 0.5 * h * k2v);
        let (k4m, k4v) = self.rhs(t + h, m + h * k3m, v + h * k3v);
        (
            m + h / 6.0 * (k1m + 2.0 * k2m + 2.0 * k3m + k4m),
            v + h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v),
        )
    }

    /// RK4-integrate `(m, v)` from `t0` to `t1` with step near `h`.
    pub fn integrate(&self, m0: f64, v0: f64, t0: f64, t1: f64, h: f64) -> (f64, f64) {
        let steps = (((t1 - t0) / h).ceil() as usize).max(1);
        let h = (t1 - t0) / steps as f64;
        let (mut m, mut v) = (m0, v0);
        for k in 0..steps {
            let t = t0 + k as f64 * h;
            (m, v) = self.rk4_step(t, m, v, h);
        }
        (m, v)
    }

    /// Sampled path of `(t, m, v)` including both endpoints.
    pub fn integrate_path(
        &self,
        m0: f64,
        v0: f64,
        t0: f64,
        t1: f64,
        samples: usize,
        h: f64,
    ) -> Vec<(f64, f64, f64)> {
        let samples = samples.max(2);
        let mut out = Vec::with_capacity(samples);
        let (mut m, mut v) = (m0, v0);
        let mut t = t0;
        out.push((t, m, v));
        for k in 1..samples {
            let tn = t0 + (t1 - t0) * k as f64 / (samples - 1) as f64;
            (m, v) = self.integrate(m, v, t, tn, h);
            t = tn;
            out.push((t, m, v));
        }
        out
    }

    /// State `(m, v)` of the settled periodic orbit at phase 0, obtained by
    /// integrating transients away (they decay at rate `2a`).
    fn settled_state(&self, h: f64) -> (f64, f64) {
        let t_relax = 30.0 / (2.0 * self.a.max(0.05));
        let periods = (t_relax / self.period).ceil().max(2.0) as usize;
        let start = self.periodic_mean(0.0);
        self.integrate(start, 1.0, 0.0, periods as f64 * self.period, h)
    }

    /// Periodic `(m, v)` at the given phases in `[0, T)`.
    pub fn periodic_moments(&self, phases: &[f64], h: f64) -> Vec<(f64, f64)> {
        let (m0, v0) = self.settled_state(h);
        phases
            .iter()
            .map(|&s| self.integrate(m0, v0, 0.0, s.max(0.0), h))
            .collect()
    }

    /// Period average of the periodic second moment, by trapezoid on a fine
    /// grid of the settled orbit.
    pub fn period_average_second_moment(&self, h: f64) -> f64 {
        let (m0, v0) = self.settled_state(h);
        let grid = 2048;
        let path = self.integrate_path(m0, v0, 0.0, self.period, grid + 1, h);
        let mut acc = 0.0;
        for k in 0..grid {
            acc += 0.5 * (path[k].2 + path[k + 1].2) * (path[k + 1].0 - path[k].0);
        }
        acc / self.period
    }

    /// Mean of the second component of the coupled pair: `mbar` follows
    /// `mbar' = -a mbar + b m(t) + c sin(w t)` with `m(t)` the driving mean.
    pub fn integrate_coupled_mean(
        &self,
        mbar0: f64,
        m0: f64,
        t0: f64,
        t1: f64,
        h: f64,
    ) -> f64 {
        let steps = (((t1 - t0) / h).ceil() as usize).max(1);
        let h = (t1 - t0) / steps as f64;
        let (mut m, mut mb) = (m0, mbar0);
        for k in 0..steps {
            let t = t0 + k as f64 * h;
            // joint RK4 on (m, mbar)
            let f = |t: f64, m: f64, mb: f64| {
                let s = (self.omega() * t).sin();
                (
                    -(self.a - self.b) * m + self.c * s,
                    -self.a * mb + self.b * m + self.c * s,
                )
            };
            let (k1a, k1b) = f(t, m, mb);
            let (k2a, k2b) = f(t + 0.5 * h, m + 0.5 * h * k1a, mb + 0.5 * h * k1b);
            let (k3a, k3b) = f(t + 0.5 * h, m + 0.5 * h * k2a, mb + 0.5 * h * k2b);
            let (k4a, k4b) = f(t + h, m + h * k3a, mb + h * k3b);
            m += h / 6.0 * (k1a + 2.0 * k2a + 2.0 * k3a + k4a);
            mb += h / 6.0 * (k1b + 2.0 * k2b + 2.0 * k3b + k4b);
        }
        mb
    }
}
