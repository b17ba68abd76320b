//! Tour of the measure module: exact 1-d transport distance, the sliced
//! surrogate, the Levy-Prohorov upper bound and the small-support oracle.
//!
//! ```sh
//! cargo run --release --example distances
//! ```

use mvlab::measure::{
    levy_prohorov_upper, omega_small, sliced_wasserstein2, wasserstein2_1d, ParticleCloud,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mu = ParticleCloud::uniform(1, vec![0.0, 2.0], 0.0)?;
    let nu = ParticleCloud::uniform(1, vec![1.0, 3.0], 0.0)?;
    println!("W2(uniform{{0,2}}, uniform{{1,3}})   = {}", wasserstein2_1d(&mu, &nu)?);

    let a = ParticleCloud::delta(&[0.0], 1, 0.0)?;
    let b = ParticleCloud::delta(&[3.0], 1, 0.0)?;
    println!("W2(delta_0, delta_3)             = {}", wasserstein2_1d(&a, &b)?);
    let lp = levy_prohorov_upper(&a, &b, 2, 0)?;
    println!("LP upper bound (p=2)             = {}  (= 3^(2/3))", lp.value);
    println!("LP exact by bisection            = {}", omega_small(&a, &b)?);

    let eps = ParticleCloud::new(1, vec![0.0, 3.0], vec![0.9, 0.1], 0.0)?;
    println!(
        "omega((1-eps) delta_0 + eps delta_3, delta_0) = {}  (eps = 0.1)",
        omega_small(&eps, &a)?
    );

    // d = 2: sliced surrogate against a pure translation
    let mut pos = Vec::new();
    for i in 0..32 {
        let t = i as f64 * 0.2;
        pos.extend_from_slice(&[t.cos(), t.sin()]);
    }
    let ring = ParticleCloud::uniform(2, pos.clone(), 0.0)?;
    let shift: Vec<f64> = pos.chunks(2).flat_map(|c| [c[0] + 0.6, c[1] - 0.8]).collect();
    let moved = ParticleCloud::uniform(2, shift, 0.0)?;
    let sw = sliced_wasserstein2(&ring, &moved, 128, 42)?;
    println!("sliced W2 of a |v| = 1 translate = {sw}  (lower-bounds the true 1.0)");
    Ok(())
}
