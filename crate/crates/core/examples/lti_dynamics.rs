//! A second-order sensor three ways: sampled impulse response, state-space
//! simulation, and regularised deconvolution of a noisy response.

use metromodel::lti::{convolve, deconvolve, impulse_response, roughness, simulate_state_space, to_state_space, SecondOrderSystem, Signal};
use metromodel::uncertain::RandomStream;
use rand::Rng;
use rand_distr::StandardNormal;

fn rel_rms(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (num / b.iter().map(|y| y * y).sum::<f64>()).sqrt()
}

fn main() -> metromodel::Result<()> {
    let sys = SecondOrderSystem::unit_gain(0.2, 2.0 * std::f64::consts::PI * 25.0)?;
    let dt = 2e-4;
    let n = 2500;
    let stimulus = Signal::from_fn(n, dt, 0.0, |t| if (0.1..0.2).contains(&t) { 1.0 } else { 0.0 } + 0.3 * (30.0 * t).sin())?;
    let h = impulse_response(&sys, dt, n)?;
    let conv = convolve(&h, &stimulus)?;
    let ss = simulate_state_space(&to_state_space(&sys)?, &stimulus)?;
    println!("convolution vs state space: relative RMS {:.2e}", rel_rms(&conv.samples, &ss.samples));

    let mut rng = RandomStream::new(3, 0).rng();
    let noisy = Signal::new(conv.samples.iter().map(|v| v + 0.01 * rng.sample::<f64, _>(StandardNormal)).collect(), dt, 0.0)?;
    println!("raw response vs stimulus: relative RMS {:.3}", rel_rms(&noisy.samples, &stimulus.samples));
    let h = impulse_response(&sys, dt, 600)?;
    for lambda in [1e-6, 1e-4, 1e-2, 1e-1, 1.0, 10.0] {
        let est = deconvolve(&h, &noisy, lambda)?;
        println!(
            "lambda {lambda:e}: relative RMS {:.3}, roughness {:.3e}",
            rel_rms(&est.samples, &stimulus.samples),
            roughness(&est)
        );
    }
    Ok(())
}
