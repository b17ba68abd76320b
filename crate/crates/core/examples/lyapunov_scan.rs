//! Radial drift scan for the quartic model with the quadratic functional
//! `V = x^2 + int y^2 mu(dy)`: the sampled supremum of `LV` over the lifted
//! shell falls like `-16 R^4` while the infimum of `V` grows like `R^2`.
//!
//! ```sh
//! cargo run --release --example lyapunov_scan
//! ```

use mvlab::lyapunov::{radial_scan, LyapunovSpec, ScanParams};
use mvlab::model::builtin_example;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ms = builtin_example("ex52_quartic")?;
    let ls = LyapunovSpec::quadratic(1, ms.period())?;
    let grid = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let report = radial_scan(&ls, &ms, &grid, ScanParams::default())?;

    println!("{:>5}  {:>14}  {:>10}  {:>14}", "R", "sup LV", "inf V", "-16R^4+10.5R^2");
    for ((r, a), v) in report
        .radii
        .iter()
        .zip(&report.sup_lv)
        .zip(&report.inf_v)
    {
        let bound = -16.0 * r.powi(4) + 10.5 * r * r;
        println!("{r:>5.1}  {a:>14.2}  {v:>10.2}  {bound:>14.2}");
    }
    println!("\nsampler: {} samples/radius, clouds of {} ({})",
        report.samples_per_radius, report.cloud_size, report.family);
    Ok(())
}
