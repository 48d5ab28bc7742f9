//! Calibrate a quadratic sensor against reference stimuli, then turn a new
//! indication into a stimulus estimate with its uncertainty.

use metromodel::calibration::{calibrate_least_squares, invert_model, CalibrationDataset, ForwardModel};
use metromodel::propagation::{propagate_lpu, MeasurementFunction};
use metromodel::uncertain::{RandomStream, UncertainVector};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

fn main() -> metromodel::Result<()> {
    let truth = [0.3, 1.8, 0.05];
    let model = ForwardModel::Polynomial { degree: 2 };
    let mut rng = RandomStream::new(11, 0).rng();
    let points: Vec<(f64, f64, f64)> = (0..15)
        .map(|i| {
            let eta = i as f64;
            let u = 0.02 + 0.002 * eta;
            let xi = truth[0] + truth[1] * eta + truth[2] * eta * eta + u * rng.sample::<f64, _>(StandardNormal);
            (eta, xi, u)
        })
        .collect();
    let data = CalibrationDataset::from_triples(&points)?;
    let fit = calibrate_least_squares(&model, &data, &[0.0, 1.0, 0.0])?;
    let b: Vec<f64> = fit.b.estimates().iter().copied().collect();
    println!("b = {b:.5?}");
    println!("u(b) = {:.5?}", fit.b.std_uncertainties());
    println!("chi² = {:.3} with {} degrees of freedom, {} iterations", fit.chi_square, data.len() - 3, fit.iterations);

    let (z, u_z) = (20.0, 0.03);
    let bracket = (0.0, 14.0);
    let y = invert_model(&model, z, &b, bracket)?;
    let g = {
        let model = model.clone();
        MeasurementFunction::new(4, move |x| invert_model(&model, x[0], &x[1..], bracket).unwrap_or(f64::NAN))
    };
    let mut cov = DMatrix::zeros(4, 4);
    cov[(0, 0)] = u_z * u_z;
    cov.view_mut((1, 1), (3, 3)).copy_from(fit.b.covariance());
    let x = UncertainVector::new(DVector::from_vec(vec![z, b[0], b[1], b[2]]), cov)?;
    let u = propagate_lpu(&g, &x)?;
    println!("indication {z} -> stimulus {y:.5} ± {:.5}", u.std_uncertainty);
    Ok(())
}
