//! Fixed-point acceleration: iterate the one-period flow map on the law and
//! watch successive iterates contract to the periodic measure.
//!
//! ```sh
//! cargo run --release --example period_map
//! ```

use mvlab::measure::ParticleCloud;
use mvlab::model::builtin_example;
use mvlab::periodic::period_map_iterate;
use mvlab::reference::OuMoments;
use mvlab::simulate::SimConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ms = builtin_example("ex51_ou")?;
    let n = 2000;
    let cfg = SimConfig {
        n_particles: n,
        dt: 2e-3,
        t0: 0.0,
        t1: 0.0,
        seed: 99,
        record_stride: 1,
        blowup_radius: 1e6,
    };
    // start far from the periodic law on purpose
    let init = ParticleCloud::delta(&[4.0], n, 0.0)?;
    let (phases, log) = period_map_iterate(&ms, &init, &cfg, 25, 0.08, 8)?;

    println!("iteration log (W2 between successive one-period iterates):");
    for (k, d) in log.distances.iter().enumerate() {
        println!("  iter {:2}: {d:.4}", k + 1);
    }
    println!(
        "converged: {} after {} iterations (tol {})",
        log.converged, log.iterations, log.tol
    );

    let oracle = OuMoments::from_model_defaults();
    let m0 = phases.clouds[0].moment(&[1])?;
    println!(
        "\nphase-0 mean of the fixed point: {:+.4}  (orbit: {:+.4})",
        m0,
        oracle.periodic_mean(0.0)
    );
    Ok(())
}
