//! Propagate input uncertainty through a parsed expression with the linear
//! law and with Monte Carlo, then compare the two.

use metromodel::expr::Expression;
use metromodel::propagation::{validate_lpu_vs_mc, MeasurementFunction};
use metromodel::uncertain::{Distribution, RandomStream};

fn main() -> metromodel::Result<()> {
    let names: Vec<String> = ["V", "R"].iter().map(|s| s.to_string()).collect();
    // Power dissipated in a resistor.
    let expr = Expression::parse("V^2 / R", &names)?;
    let f = MeasurementFunction::from_expression(expr);
    let inputs = [
        Distribution::Normal { mean: 12.0, std: 0.05 },
        Distribution::Uniform { lower: 99.0, upper: 101.0 },
    ];
    let v = validate_lpu_vs_mc(&f, &inputs, 200_000, RandomStream::new(1, 0), 0.05)?;
    println!("LPU: {:.6} ± {:.6}", v.lpu.estimate, v.lpu.std_uncertainty);
    println!(
        "MC:  {:.6} ± {:.6}, 95% interval [{:.6}, {:.6}]",
        v.mc.estimate, v.mc.std_uncertainty, v.mc.interval.lower, v.mc.interval.upper
    );
    println!("relative difference {:.2e}, accepted = {}", v.relative_difference, v.accepted);

    // A strongly non-linear case where linearisation breaks down.
    let expr = Expression::parse("cos(V)", &names[..1])?;
    let f = MeasurementFunction::from_expression(expr);
    let v = validate_lpu_vs_mc(&f, &[Distribution::Normal { mean: 0.0, std: 0.3 }], 100_000, RandomStream::new(2, 0), 0.05)?;
    println!("cos at its maximum: LPU u = {:.4}, MC u = {:.4}, accepted = {}", v.lpu.std_uncertainty, v.mc.std_uncertainty, v.accepted);
    Ok(())
}
