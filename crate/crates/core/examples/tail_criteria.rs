//! Tail diagnostics along a long quartic run: the period-sampled Cesaro
//! average and the time-integral average of the lifted tail mass, plus the
//! within-one-period escape surrogate, all shrinking in the radius.
//!
//! ```sh
//! cargo run --release --example tail_criteria
//! ```

use mvlab::lyapunov::tail_criteria;
use mvlab::measure::ParticleCloud;
use mvlab::model::builtin_example;
use mvlab::simulate::{simulate_flow, SimConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ms = builtin_example("ex52_quartic")?;
    let n = 1000;
    let spp = 640usize;
    let periods = 30;
    let mut stream = mvlab::rng::KeyStream::new(12);
    let pos: Vec<f64> = (0..n).map(|_| stream.next_normal()).collect();
    let init = ParticleCloud::uniform(1, pos, 0.0)?;
    let cfg = SimConfig {
        n_particles: n,
        dt: ms.period() / spp as f64,
        t0: 0.0,
        t1: periods as f64 * ms.period(),
        seed: 271828,
        record_stride: spp / 8,
        blowup_radius: 50.0,
    };
    let traj = simulate_flow(&ms, &init, &cfg)?;
    let report = tail_criteria(&traj, &[1.0, 2.0, 4.0, 8.0], ms.period())?;
    println!(
        "{} periods, beta(R) = {} R",
        report.periods_used, report.beta_ratio
    );
    println!("{:>5}  {:>12}  {:>12}  {:>10}", "R", "cesaro", "time-avg", "alpha");
    for row in &report.rows {
        println!(
            "{:>5.1}  {:>12.4e}  {:>12.4e}  {:>10}",
            row.radius,
            row.cesaro_period_avg,
            row.time_integral_avg,
            row.alpha_surrogate
                .map(|a| format!("{a:.2e}"))
                .unwrap_or_else(|| "n/a".into())
        );
    }
    Ok(())
}
