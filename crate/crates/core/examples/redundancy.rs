//! Find sensors in the forging benchmark that carry the same information.

use metromodel::pipeline::redundancy_report;
use metromodel::sim::{forging_process, forging_sensors, make_benchmark};
use metromodel::uncertain::RandomStream;

fn main() -> metromodel::Result<()> {
    let bench = make_benchmark(&forging_process(), &forging_sensors(), 20, RandomStream::new(2021, 0))?;
    let runs = bench.series();
    for threshold in [0.999, 0.99, 0.9] {
        let r = redundancy_report(&runs, threshold)?;
        println!("|r| >= {threshold}:");
        for g in &r.groups {
            println!("  {}", g.join(", "));
        }
    }
    let r = redundancy_report(&runs, 0.99)?;
    let at = |s: &str| r.sensors.iter().position(|x| x == s).unwrap();
    println!("r(power, power_dup) = {:.5}", r.correlations[at("power")][at("power_dup")]);
    println!("r(noise_1, noise_2) = {:.5}", r.correlations[at("noise_1")][at("noise_2")]);
    Ok(())
}
