//! Pulse amplitudes seen through an underdamped sensor: compare a moments +
//! ridge pipeline with and without deconvolution pre-processing.
//!
//! `cargo run --example greybox_deconvolution -- 1e-4 1e-2 1e-1` sweeps the
//! regularisation weight; without arguments the preset weight is used.

use metromodel::pipeline::{fit_pipeline, greybox_spec, predict_pipeline, PipelineSpec, GREYBOX_LAMBDA};
use metromodel::sim::{greybox_process, greybox_sensors, make_benchmark};
use metromodel::uncertain::RandomStream;

fn held_out_mse(spec: &PipelineSpec, seed: u64) -> metromodel::Result<f64> {
    let bench = make_benchmark(&greybox_process(), &greybox_sensors(), 80, RandomStream::new(seed, 0))?;
    let runs = bench.series();
    let y = bench.target("pulse_amplitude")?;
    let model = fit_pipeline(spec, &runs[..60], &y[..60], RandomStream::new(seed, 1))?;
    let pred = predict_pipeline(&model, &runs[60..])?;
    Ok(pred.iter().zip(&y[60..]).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
}

fn mean_mse(spec: &PipelineSpec) -> metromodel::Result<f64> {
    Ok((0..10u64).map(|s| held_out_mse(spec, s)).sum::<metromodel::Result<f64>>()? / 10.0)
}

fn main() -> metromodel::Result<()> {
    let lambdas: Vec<f64> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let lambdas = if lambdas.is_empty() { vec![GREYBOX_LAMBDA] } else { lambdas };
    println!("without deconvolution: mean held-out MSE {:.6}", mean_mse(&greybox_spec(false))?);
    for l in lambdas {
        let mut spec = greybox_spec(true);
        spec.preprocess[0].lambda = l;
        println!("with deconvolution (lambda {l:e}): mean held-out MSE {:.6}", mean_mse(&spec)?);
    }
    Ok(())
}
