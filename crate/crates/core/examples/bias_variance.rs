//! Bias-variance trade-off on a noisy cubic: ridge strength and tree depth
//! move error between bias and variance while the decomposition still adds up.

use metromodel::ml::{bias_variance_estimate, Family, PolynomialProcess};
use metromodel::uncertain::RandomStream;

fn main() -> metromodel::Result<()> {
    let process = PolynomialProcess::new(vec![0.2, -1.0, 0.0, 2.0], 0.25, (-1.0, 1.0))?;
    let families = [
        Family::Ridge { lambda: 0.0 },
        Family::Ridge { lambda: 10.0 },
        Family::Tree { max_depth: Some(1), min_leaf: 1 },
        Family::Tree { max_depth: Some(3), min_leaf: 1 },
        Family::Tree { max_depth: None, min_leaf: 1 },
        Family::Forest { n_trees: 50, max_depth: None, min_leaf: 2, feature_fraction: 1.0, bootstrap: true },
    ];
    println!("{:<42} {:>8} {:>8} {:>8} {:>8} {:>9}", "family", "bias²", "var", "noise", "mse", "|d|/3SE");
    for f in &families {
        let r = bias_variance_estimate(f, &process, 60, 100, RandomStream::new(9, 0))?;
        println!(
            "{:<42} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>9.3}",
            format!("{f:?}"),
            r.bias_sq,
            r.variance,
            r.noise_var,
            r.total_mse,
            r.discrepancy.abs() / r.tolerance
        );
    }
    Ok(())
}
