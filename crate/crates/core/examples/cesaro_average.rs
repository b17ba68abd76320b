//! Cesaro averages of the ensemble functional <x^2, mu_s> over growing
//! numbers of periods, with the Cauchy increments that witness convergence,
//! against the independent RK4 reference.
//!
//! ```sh
//! cargo run --release --example cesaro_average
//! ```

use mvlab::expr::Expr;
use mvlab::measure::ParticleCloud;
use mvlab::model::builtin_example;
use mvlab::periodic::cesaro_functional_convergence;
use mvlab::reference::OuMoments;
use mvlab::simulate::SimConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ms = builtin_example("ex51_ou")?;
    let n = 3000;
    let cfg = SimConfig {
        n_particles: n,
        dt: 2e-3,
        t0: 0.0,
        t1: 0.0,
        seed: 1618,
        record_stride: 20,
        blowup_radius: 1e6,
    };
    let init = ParticleCloud::delta(&[1.5], n, 0.0)?;
    let f = Expr::parse("x1^2")?;
    let report = cesaro_functional_convergence(&ms, &init, &f, &cfg, &[1, 2, 4, 8, 16])?;

    let oracle = OuMoments::from_model_defaults().period_average_second_moment(1e-4);
    println!("period-average of the periodic second moment (RK4): {oracle:.5}");
    println!("\n  n      average     |increment|");
    for (k, (n, a)) in report.ns.iter().zip(&report.averages).enumerate() {
        let inc = if k == 0 {
            "".to_string()
        } else {
            format!("{:.5}", report.increments[k - 1])
        };
        println!("{n:>3}    {a:.5}     {inc}");
    }
    println!("\nincrements non-monotone: {}", report.non_monotone);
    Ok(())
}
