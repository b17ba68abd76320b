//! Flow-composition (Chapman-Kolmogorov) check: the law reached in one pass
//! `s -> t` versus through an intermediate stop `s -> u -> t` with fresh
//! noise. The gap is pure Monte Carlo error and shrinks like 1/sqrt(N).
//!
//! ```sh
//! cargo run --release --example semigroup_gap
//! ```

use mvlab::measure::ParticleCloud;
use mvlab::model::builtin_example;
use mvlab::simulate::{flow_semigroup_gap, SimConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ms = builtin_example("ex51_ou")?;
    let t_half = ms.period() / 2.0;
    println!("{:>6}  {:>10}  {:>10}", "N", "gap", "5/sqrt(N)+2dt");
    for n in [500usize, 2000, 8000] {
        let cfg = SimConfig {
            n_particles: n,
            dt: 2e-3,
            t0: 0.0,
            t1: ms.period(),
            seed: 10 + n as u64,
            record_stride: 100,
            blowup_radius: 1e6,
        };
        let init = ParticleCloud::delta(&[0.5], n, 0.0)?;
        let gap = flow_semigroup_gap(&ms, &init, 0.0, t_half, ms.period(), &cfg)?;
        let tol = 5.0 / (n as f64).sqrt() + 2.0 * cfg.dt;
        println!("{n:>6}  {gap:>10.5}  {tol:>10.5}");
    }
    Ok(())
}
