//! Simulate the forging benchmark, pick a pipeline by cross-validation on 60
//! runs and score it on the 21 held-out runs.

use std::time::Instant;

use metromodel::pipeline::{auto_select, fit_pipeline, forging_candidates, predict_pipeline, r_squared, train_test_split};
use metromodel::sim::{forging_process, forging_sensors, make_benchmark, DEFAULT_RUNS};
use metromodel::uncertain::RandomStream;

fn main() -> metromodel::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2021);
    let start = Instant::now();
    let stream = RandomStream::new(seed, 0);
    let bench = make_benchmark(&forging_process(), &forging_sensors(), DEFAULT_RUNS, stream.derive(0))?;
    let runs = bench.series();
    let energy = bench.target("energy")?;
    println!("simulated {} runs in {:.2?}", runs.len(), start.elapsed());

    let (train, test) = train_test_split(runs.len(), 21, stream.derive(1))?;
    let pick = |idx: &[usize]| (idx.iter().map(|&i| runs[i].clone()).collect::<Vec<_>>(), idx.iter().map(|&i| energy[i]).collect::<Vec<_>>());
    let (train_runs, train_y) = pick(&train);
    let (test_runs, test_y) = pick(&test);

    let candidates = forging_candidates();
    let report = auto_select(&candidates, &train_runs, &train_y, 5, stream.derive(2))?;
    for c in &report.ranking {
        println!("{:<24} cv mse {:>10.3} ± {:.3}", c.name, c.mean_risk, c.std_risk);
    }
    let best = &candidates[report.ranking[0].index];
    let model = fit_pipeline(best, &train_runs, &train_y, stream.derive(3))?;
    let pred = predict_pipeline(&model, &test_runs)?;
    println!("selected {}: held-out R² = {:.4}", best.name, r_squared(&pred, &test_y));
    println!("features used: {:?}", model.selected_names());
    println!("total {:.2?}", start.elapsed());
    Ok(())
}
