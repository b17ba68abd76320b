//! Evolve the quartic-confinement model and export the trajectory as
//! `manifest.json` plus one cloud CSV per snapshot.
//!
//! ```sh
//! cargo run --release --example simulate_flow [out_dir]
//! ```

use mvlab::measure::ParticleCloud;
use mvlab::model::builtin_example;
use mvlab::simulate::{export_trajectory, simulate_flow, SimConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "quartic-run".into());
    let ms = builtin_example("ex52_quartic")?;
    let n = 2000;
    let spp = 640usize; // steps per period
    let periods = 6;

    // standard Gaussian start
    let mut stream = mvlab::rng::KeyStream::new(7);
    let pos: Vec<f64> = (0..n).map(|_| stream.next_normal()).collect();
    let init = ParticleCloud::uniform(1, pos, 0.0)?;

    let cfg = SimConfig {
        n_particles: n,
        dt: ms.period() / spp as f64,
        t0: 0.0,
        t1: periods as f64 * ms.period(),
        seed: 20240601,
        record_stride: spp / 8,
        blowup_radius: 50.0,
    };
    let traj = simulate_flow(&ms, &init, &cfg)?;
    println!("snapshots: {}", traj.snapshots.len());
    for k in (0..traj.snapshots.len()).step_by(8) {
        let c = &traj.snapshots[k];
        println!(
            "t = {:7.3}  mean = {:+.4}  |mu|_2 = {:.4}",
            c.time_stamp(),
            c.moment(&[1])?,
            c.second_moment_norm()
        );
    }
    export_trajectory(&traj, std::path::Path::new(&out))?;
    println!("exported to {out}/");
    Ok(())
}
