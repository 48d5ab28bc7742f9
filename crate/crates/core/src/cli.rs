//! Command-line front end.
//!
//! Every command reads a TOML configuration, resolves relative paths against
//! the directory holding that file, and writes its outputs under `--out`.
//! Exit codes: 0 success, 1 runtime or model failure, 2 configuration or
//! parse failure. Randomised commands take their seed from `--seed`, then the
//! `seed` key of the configuration, then [`DEFAULT_SEED`].
//!
//! Seeds are split into fixed child streams so that `simulate` followed by
//! `train` with the same seed is a pure function of (config, seed):
//! simulation uses child 0, the train/test split child 1, candidate ranking
//! child 2, the final fit child 3 and prediction noise child 4.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{calibrate_least_squares, invert_model, CalibrationDataset, ForwardModel};
use crate::error::Error;
use crate::expr::Expression;
use crate::pipeline::{
    auto_select, evaluate_candidates, fit_pipeline, forging_candidates, greybox_spec, pearson,
    predict_pipeline, predict_with_uncertainty, r_squared, redundancy_report, train_test_split,
    AutoSelectReport, CvRecord, PipelineModel, PipelineSpec,
};
use crate::propagation::{propagate_lpu, validate_lpu_vs_mc, MeasurementFunction};
use crate::sim::{
    forging_process, forging_sensors, greybox_process, greybox_sensors, make_benchmark,
    read_benchmark, BenchmarkData, ProcessSpec, SensorSpec, DEFAULT_RUNS,
};
use crate::uncertain::{mean_std, Distribution, RandomStream, UncertainVector};

pub const DEFAULT_SEED: u64 = 2021;
pub const DEFAULT_OUT: &str = "metromodel-out";
const DEFAULT_MC_TRIALS: usize = 100_000;
const DEFAULT_PREDICT_TRIALS: usize = 1000;

#[derive(Debug, Parser)]
#[command(name = "metromodel", version, about = "Measurement modelling toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML configuration document.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for every random draw.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Monte Carlo trials (propagate, predict).
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    /// Only print errors.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic benchmark directory.
    Simulate,
    /// Fit a forward model to calibration data and invert readings.
    Calibrate,
    /// Propagate input uncertainty through an expression by LPU and Monte Carlo.
    Propagate,
    /// Rank candidate pipelines by cross-validation and fit the best.
    Train,
    /// Apply a trained pipeline to a benchmark.
    Predict,
    /// Group sensors whose signals are nearly collinear.
    Redundancy,
    /// Extract the feature table of a pipeline with summary statistics.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Calibrate => "calibrate",
            Command::Propagate => "propagate",
            Command::Train => "train",
            Command::Predict => "predict",
            Command::Redundancy => "redundancy",
            Command::Report => "report",
        }
    }
}

/// A failed command with its exit code.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Parse { .. } => Failure::config(e.to_string()),
            _ => Failure::runtime(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Provenance block embedded in every JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// SHA-256 of the configuration bytes; absent when none was given.
    pub config_sha256: Option<String>,
    pub trials: Option<usize>,
}

/// Parse `args` (program name first), run the command and return the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(lines) => {
            if !cli.quiet {
                for l in lines {
                    println!("{l}");
                }
            }
            0
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

/// Run a parsed command. Returns the summary lines it would print.
pub fn run(cli: &Cli) -> CliResult<Vec<String>> {
    let cfg = LoadedConfig::load(cli)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let ctx = Context { cli, cfg, out };
    match cli.command {
        Command::Simulate => simulate(&ctx),
        Command::Calibrate => calibrate(&ctx),
        Command::Propagate => propagate(&ctx),
        Command::Train => train(&ctx),
        Command::Predict => predict(&ctx),
        Command::Redundancy => redundancy(&ctx),
        Command::Report => report(&ctx),
    }
}

struct LoadedConfig {
    text: Option<String>,
    digest: Option<String>,
    base: PathBuf,
    display: String,
}

impl LoadedConfig {
    fn load(cli: &Cli) -> CliResult<Self> {
        let Some(path) = &cli.config else {
            return Ok(Self { text: None, digest: None, base: PathBuf::from("."), display: String::new() });
        };
        let bytes = fs::read(path)
            .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Failure::config(format!("config {} is not UTF-8", path.display())))?;
        let digest = Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { text: Some(text), digest: Some(digest), base, display: path.display().to_string() })
    }
}

struct Context<'a> {
    cli: &'a Cli,
    cfg: LoadedConfig,
    out: PathBuf,
}

impl Context<'_> {
    /// Deserialize the config, or the default when none was given and one exists.
    fn parse<T: DeserializeOwned>(&self, default: Option<&str>) -> CliResult<T> {
        let text = match (&self.cfg.text, default) {
            (Some(t), _) => t.as_str(),
            (None, Some(d)) => d,
            (None, None) => {
                return Err(Failure::config(format!("{} needs --config", self.cli.command.name())))
            }
        };
        toml::from_str(text).map_err(|e| {
            Failure::config(format!("invalid config {}: {e}", self.cfg.display))
        })
    }

    fn seed(&self, from_config: Option<u64>) -> u64 {
        self.cli.seed.or(from_config).unwrap_or(DEFAULT_SEED)
    }

    fn root(&self, seed: u64) -> RandomStream {
        RandomStream::new(seed, 0)
    }

    /// Resolve a config path and insist it exists.
    fn input(&self, key: &str, rel: &Path) -> CliResult<PathBuf> {
        let p = self.cfg.base.join(rel);
        if !p.exists() {
            return Err(Failure::config(format!("{key} path {} does not exist", p.display())));
        }
        Ok(p)
    }

    fn manifest(&self, seed: u64, trials: Option<usize>) -> Manifest {
        Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.cli.command.name().into(),
            seed,
            config_sha256: self.cfg.digest.clone(),
            trials,
        }
    }

    fn out_dir(&self) -> CliResult<&Path> {
        fs::create_dir_all(&self.out).map_err(|e| Failure::runtime(format!("cannot create {}: {e}", self.out.display())))?;
        Ok(&self.out)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<PathBuf> {
        let path = self.out_dir()?.join(name);
        let text = serde_json::to_string_pretty(value).map_err(|e| Failure::runtime(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

fn read_bench(path: &Path) -> CliResult<BenchmarkData> {
    Ok(read_benchmark(path)?)
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimPreset {
    Forging,
    Greybox,
}

/// `simulate` configuration. A preset supplies process and sensors unless
/// they are given explicitly.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub preset: Option<SimPreset>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    pub seed: Option<u64>,
    pub process: Option<ProcessSpec>,
    pub sensors: Option<Vec<SensorSpec>>,
}

fn default_runs() -> usize {
    DEFAULT_RUNS
}

impl SimulateConfig {
    pub fn resolve(&self) -> std::result::Result<(ProcessSpec, Vec<SensorSpec>), String> {
        let (p, s) = match self.preset {
            Some(SimPreset::Forging) => (Some(forging_process()), Some(forging_sensors())),
            Some(SimPreset::Greybox) => (Some(greybox_process()), Some(greybox_sensors())),
            None => (None, None),
        };
        let process = self.process.clone().or(p).ok_or("no process given and no preset")?;
        let sensors = self.sensors.clone().or(s).ok_or("no sensors given and no preset")?;
        Ok((process, sensors))
    }
}

#[derive(Serialize)]
struct SimulateReport {
    manifest: Manifest,
    runs: usize,
    sensors: Vec<String>,
    targets: Vec<String>,
}

fn simulate(ctx: &Context) -> CliResult<Vec<String>> {
    let cfg: SimulateConfig = ctx.parse(Some("preset = \"forging\""))?;
    let (process, sensors) = cfg.resolve().map_err(Failure::config)?;
    process.validate().map_err(|e| Failure::config(format!("process: {e}")))?;
    crate::sim::validate_sensors(&process, &sensors).map_err(|e| Failure::config(format!("sensors: {e}")))?;
    if cfg.runs == 0 {
        return Err(Failure::config("runs must be >= 1"));
    }
    let seed = ctx.seed(cfg.seed);
    let bench = make_benchmark(&process, &sensors, cfg.runs, ctx.root(seed).derive(0))?;
    bench.write(ctx.out_dir()?)?;
    ctx.write_json(
        "simulate.json",
        &SimulateReport {
            manifest: ctx.manifest(seed, None),
            runs: cfg.runs,
            sensors: sensors.iter().map(|s| s.id.clone()).collect(),
            targets: process.targets.iter().map(|t| t.name.clone()).collect(),
        },
    )?;
    Ok(vec![format!("wrote {} runs to {}", cfg.runs, ctx.out.display())])
}

// --------------------------------------------------------------- calibrate

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reading {
    pub value: f64,
    #[serde(default)]
    pub std_uncertainty: f64,
}

/// `calibrate` configuration: a CSV with header `eta,xi,u_xi`, a forward model
/// and optional readings to convert back to stimulus values.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateConfig {
    pub data: PathBuf,
    pub model: ForwardModel,
    pub initial: Vec<f64>,
    pub bracket: Option<[f64; 2]>,
    #[serde(default)]
    pub readings: Vec<Reading>,
}

#[derive(Serialize)]
struct Inverted {
    reading: f64,
    stimulus: f64,
    std_uncertainty: f64,
}

#[derive(Serialize)]
struct CalibrateReport {
    manifest: Manifest,
    parameters: Vec<f64>,
    std_uncertainties: Vec<f64>,
    covariance: Vec<Vec<f64>>,
    residuals: Vec<f64>,
    chi_square: f64,
    converged: bool,
    iterations: usize,
    readings: Vec<Inverted>,
}

fn calibrate(ctx: &Context) -> CliResult<Vec<String>> {
    let cfg: CalibrateConfig = ctx.parse(None)?;
    cfg.model.validate().map_err(|e| Failure::config(e.to_string()))?;
    if cfg.initial.len() != cfg.model.parameter_count() {
        return Err(Failure::config(format!(
            "model takes {} parameters, initial has {}",
            cfg.model.parameter_count(),
            cfg.initial.len()
        )));
    }
    if !cfg.readings.is_empty() && cfg.bracket.is_none() {
        return Err(Failure::config("readings need a bracket"));
    }
    let data = CalibrationDataset::from_csv(&ctx.input("data", &cfg.data)?)?;
    let fit = calibrate_least_squares(&cfg.model, &data, &cfg.initial)?;
    let beta: Vec<f64> = fit.b.estimates().iter().copied().collect();
    let p = beta.len();

    let mut readings = Vec::new();
    if let Some([lo, hi]) = cfg.bracket {
        // y = g(z, β): LPU over the reading and the fitted parameters.
        let model = cfg.model.clone();
        let g = MeasurementFunction::new(p + 1, move |x| {
            invert_model(&model, x[0], &x[1..], (lo, hi)).unwrap_or(f64::NAN)
        });
        for r in &cfg.readings {
            let stimulus = invert_model(&cfg.model, r.value, &beta, (lo, hi))?;
            let mut mean = vec![r.value];
            mean.extend(&beta);
            let mut cov = nalgebra::DMatrix::zeros(p + 1, p + 1);
            cov[(0, 0)] = r.std_uncertainty * r.std_uncertainty;
            cov.view_mut((1, 1), (p, p)).copy_from(fit.b.covariance());
            let x = UncertainVector::new(nalgebra::DVector::from_vec(mean), cov)?;
            let u = propagate_lpu(&g, &x)?;
            readings.push(Inverted { reading: r.value, stimulus, std_uncertainty: u.std_uncertainty });
        }
    }

    let cov = fit.b.covariance();
    let report = CalibrateReport {
        manifest: ctx.manifest(ctx.seed(None), None),
        parameters: beta.clone(),
        std_uncertainties: fit.b.std_uncertainties(),
        covariance: (0..p).map(|i| (0..p).map(|j| cov[(i, j)]).collect()).collect(),
        residuals: fit.residuals.clone(),
        chi_square: fit.chi_square,
        converged: fit.converged,
        iterations: fit.iterations,
        readings,
    };
    ctx.write_json("calibrate.json", &report)?;
    let mut lines = vec![format!(
        "b = {:?}, u(b) = {:?}, chi² = {:.4}, converged = {}",
        beta, report.std_uncertainties, fit.chi_square, fit.converged
    )];
    for r in &report.readings {
        lines.push(format!("z = {} -> y = {} ± {}", r.reading, r.stimulus, r.std_uncertainty));
    }
    Ok(lines)
}

// --------------------------------------------------------------- propagate

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum InputNames {
    One(String),
    Many(Vec<String>),
}

impl InputNames {
    fn list(&self) -> Vec<String> {
        match self {
            InputNames::One(n) => vec![n.clone()],
            InputNames::Many(v) => v.clone(),
        }
    }
}

/// One input quantity. Multivariate normals name one input per component.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct InputSpec {
    pub name: InputNames,
    #[serde(flatten)]
    pub distribution: Distribution,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagateConfig {
    pub expression: String,
    pub inputs: Vec<InputSpec>,
    pub trials: Option<usize>,
    /// Accept LPU when `|u_LPU − u_MC| ≤ tolerance·u_MC`.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    pub seed: Option<u64>,
}

fn default_tolerance() -> f64 {
    0.05
}

#[derive(Serialize)]
struct PropagateReport {
    manifest: Manifest,
    expression: String,
    inputs: Vec<String>,
    lpu: crate::propagation::PropagationResult,
    mc: crate::propagation::PropagationResult,
    verdict: Verdict,
}

#[derive(Serialize)]
struct Verdict {
    accepted: bool,
    tolerance: f64,
    relative_difference: f64,
}

fn propagate(ctx: &Context) -> CliResult<Vec<String>> {
    let cfg: PropagateConfig = ctx.parse(None)?;
    let names: Vec<String> = cfg.inputs.iter().flat_map(|i| i.name.list()).collect();
    for i in &cfg.inputs {
        i.distribution.validate().map_err(|e| Failure::config(e.to_string()))?;
        if i.name.list().len() != i.distribution.dim() {
            return Err(Failure::config(format!(
                "input {:?} names {} quantities but its distribution has dimension {}",
                i.name.list(),
                i.name.list().len(),
                i.distribution.dim()
            )));
        }
    }
    let expr = Expression::parse(&cfg.expression, &names).map_err(|e| match e {
        Error::Parse { position, message } => {
            Failure::config(format!("expression {:?}: parse error at position {position}: {message}", cfg.expression))
        }
        other => Failure::config(other.to_string()),
    })?;
    let trials = ctx.cli.trials.or(cfg.trials).unwrap_or(DEFAULT_MC_TRIALS);
    let seed = ctx.seed(cfg.seed);
    let dists: Vec<Distribution> = cfg.inputs.iter().map(|i| i.distribution.clone()).collect();
    let f = MeasurementFunction::from_expression(expr);
    let v = validate_lpu_vs_mc(&f, &dists, trials, ctx.root(seed), cfg.tolerance)?;
    let lines = vec![
        format!("LPU: y = {:.6}, u = {:.6}", v.lpu.estimate, v.lpu.std_uncertainty),
        format!("MC ({trials} trials, seed {seed}): y = {:.6}, u = {:.6}", v.mc.estimate, v.mc.std_uncertainty),
        format!("LPU {} at tolerance {}", if v.accepted { "accepted" } else { "rejected" }, v.tolerance),
    ];
    ctx.write_json(
        "propagate.json",
        &PropagateReport {
            manifest: ctx.manifest(seed, Some(trials)),
            expression: cfg.expression,
            inputs: names,
            verdict: Verdict {
                accepted: v.accepted,
                tolerance: v.tolerance,
                relative_difference: v.relative_difference,
            },
            lpu: v.lpu,
            mc: v.mc,
        },
    )?;
    Ok(lines)
}

// ------------------------------------------------------------------- train

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidatePreset {
    Forging,
    Greybox,
}

impl CandidatePreset {
    pub fn specs(self) -> Vec<PipelineSpec> {
        match self {
            CandidatePreset::Forging => forging_candidates(),
            CandidatePreset::Greybox => vec![greybox_spec(false), greybox_spec(true)],
        }
    }
}

/// `train` configuration. Candidates come from a preset or from
/// `[[candidates]]` tables, not both.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub benchmark: PathBuf,
    pub target: String,
    #[serde(default = "default_test_runs")]
    pub test_runs: usize,
    #[serde(default = "default_folds")]
    pub folds: usize,
    pub preset: Option<CandidatePreset>,
    #[serde(default)]
    pub candidates: Vec<PipelineSpec>,
    pub seed: Option<u64>,
}

fn default_test_runs() -> usize {
    21
}

fn default_folds() -> usize {
    5
}

fn candidates(preset: Option<CandidatePreset>, listed: &[PipelineSpec]) -> CliResult<Vec<PipelineSpec>> {
    let specs = match (preset, listed.is_empty()) {
        (Some(p), true) => p.specs(),
        (None, false) => listed.to_vec(),
        (Some(_), false) => return Err(Failure::config("give either preset or candidates, not both")),
        (None, true) => return Err(Failure::config("no candidates: set preset or add [[candidates]]")),
    };
    for (i, s) in specs.iter().enumerate() {
        s.validate().map_err(|e| Failure::config(format!("candidate {i} ({}): {e}", s.name)))?;
    }
    Ok(specs)
}

#[derive(Serialize)]
struct TrainReport {
    manifest: Manifest,
    target: String,
    train_runs: Vec<String>,
    test_runs: Vec<String>,
    selection: AutoSelectReport,
    selected: String,
    selected_features: Vec<String>,
    held_out_r2: Option<f64>,
    held_out_mse: Option<f64>,
}

fn train(ctx: &Context) -> CliResult<Vec<String>> {
    let cfg: TrainConfig = ctx.parse(None)?;
    let specs = candidates(cfg.preset, &cfg.candidates)?;
    let dir = ctx.input("benchmark", &cfg.benchmark)?;
    let seed = ctx.seed(cfg.seed);
    let root = ctx.root(seed);
    let bench = read_bench(&dir)?;
    let y = bench.column(&cfg.target)?;
    let n = bench.runs.len();

    let (train_idx, test_idx) = if cfg.test_runs == 0 {
        ((0..n).collect(), Vec::new())
    } else {
        train_test_split(n, cfg.test_runs, root.derive(1))?
    };
    let train = bench.subset(&train_idx);
    let y_train: Vec<f64> = train_idx.iter().map(|&i| y[i]).collect();
    let selection = if specs.len() == 1 {
        evaluate_candidates(&specs, &train.runs, &y_train, cfg.folds, root.derive(2))?
    } else {
        auto_select(&specs, &train.runs, &y_train, cfg.folds, root.derive(2))?
    };
    let Some(best) = selection.best().cloned() else {
        let detail: Vec<String> = selection
            .ranking
            .iter()
            .map(|c| format!("{}: {}", c.name, c.error.as_deref().unwrap_or("unknown")))
            .collect();
        return Err(Failure::runtime(format!("every candidate failed\n  {}", detail.join("\n  "))));
    };
    let mut model = fit_pipeline(&specs[best.index], &train.runs, &y_train, root.derive(3))?;
    model.cv = Some(CvRecord {
        k: selection.k,
        fold_risks: best.fold_risks.clone(),
        mean: best.mean_risk,
        std: best.std_risk,
    });

    let (r2, mse) = if test_idx.is_empty() {
        (None, None)
    } else {
        let test = bench.subset(&test_idx);
        let y_test: Vec<f64> = test_idx.iter().map(|&i| y[i]).collect();
        let pred = predict_pipeline(&model, &test.runs)?;
        let mse = pred.iter().zip(&y_test).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y_test.len() as f64;
        (Some(r_squared(&pred, &y_test)), Some(mse))
    };

    let mut lines: Vec<String> = selection
        .ranking
        .iter()
        .map(|c| match &c.error {
            None => format!("{:<28} cv mse {:.6} ± {:.6}", c.name, c.mean_risk, c.std_risk),
            Some(e) => format!("{:<28} failed: {e}", c.name),
        })
        .collect();
    lines.push(format!("selected {}", best.name));
    if let Some(r2) = r2 {
        lines.push(format!("held-out R² = {r2:.4} on {} runs", test_idx.len()));
    }
    let ids = |idx: &[usize]| idx.iter().map(|&i| bench.runs[i].run_id().to_string()).collect();
    ctx.write_json("model.json", &model)?;
    ctx.write_json(
        "train.json",
        &TrainReport {
            manifest: ctx.manifest(seed, None),
            target: cfg.target,
            train_runs: ids(&train_idx),
            test_runs: ids(&test_idx),
            selected: best.name.clone(),
            selected_features: model.selected_names(),
            selection,
            held_out_r2: r2,
            held_out_mse: mse,
        },
    )?;
    Ok(lines)
}

// ----------------------------------------------------------------- predict

/// `predict` configuration. With `noise`, each prediction carries a Monte
/// Carlo standard uncertainty from white noise of the given std per sensor.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    pub model: PathBuf,
    pub benchmark: PathBuf,
    /// Column of `targets.csv` to score against.
    pub target: Option<String>,
    #[serde(default)]
    pub noise: BTreeMap<String, f64>,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Serialize)]
struct PredictReport {
    manifest: Manifest,
    pipeline: String,
    runs: usize,
    target: Option<String>,
    r2: Option<f64>,
    mse: Option<f64>,
}

fn predict(ctx: &Context) -> CliResult<Vec<String>> {
    let cfg: PredictConfig = ctx.parse(None)?;
    let model_path = ctx.input("model", &cfg.model)?;
    let dir = ctx.input("benchmark", &cfg.benchmark)?;
    let text = fs::read_to_string(&model_path)
        .map_err(|e| Failure::config(format!("cannot read {}: {e}", model_path.display())))?;
    let model: PipelineModel = serde_json::from_str(&text)
        .map_err(|e| Failure::config(format!("{} is not a pipeline model: {e}", model_path.display())))?;
    let seed = ctx.seed(cfg.seed);
    let bench = read_bench(&dir)?;
    let pred = predict_pipeline(&model, &bench.runs)?;
    let (uncertain, trials) = if cfg.noise.is_empty() {
        (None, None)
    } else {
        let trials = ctx.cli.trials.or(cfg.trials).unwrap_or(DEFAULT_PREDICT_TRIALS);
        let u = predict_with_uncertainty(&model, &bench.runs, &cfg.noise, trials, ctx.root(seed).derive(4))?;
        (Some(u), Some(trials))
    };

    let path = ctx.out_dir()?.join("predictions.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Failure::runtime(e.to_string()))?;
    let mut header = vec!["run_id", "prediction"];
    if uncertain.is_some() {
        header.extend(["mc_mean", "std_uncertainty"]);
    }
    w.write_record(&header).map_err(|e| Failure::runtime(e.to_string()))?;
    for (i, run) in bench.runs.iter().enumerate() {
        let mut rec = vec![run.run_id().to_string(), pred[i].to_string()];
        if let Some(u) = &uncertain {
            rec.push(u[i].estimate.to_string());
            rec.push(u[i].std_uncertainty.to_string());
        }
        w.write_record(&rec).map_err(|e| Failure::runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| Failure::runtime(e.to_string()))?;

    let (r2, mse) = match &cfg.target {
        Some(t) => {
            let y = bench.column(t)?;
            let mse = pred.iter().zip(&y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.len() as f64;
            (Some(r_squared(&pred, &y)), Some(mse))
        }
        None => (None, None),
    };
    ctx.write_json(
        "predict.json",
        &PredictReport {
            manifest: ctx.manifest(seed, trials),
            pipeline: model.spec.name.clone(),
            runs: bench.runs.len(),
            target: cfg.target.clone(),
            r2,
            mse,
        },
    )?;
    let mut lines = vec![format!("wrote {} predictions to {}", pred.len(), path.display())];
    if let Some(r2) = r2 {
        lines.push(format!("R² = {r2:.4}"));
    }
    Ok(lines)
}

// -------------------------------------------------------------- redundancy

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RedundancyConfig {
    pub benchmark: PathBuf,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    0.99
}

#[derive(Serialize)]
struct RedundancyOut {
    manifest: Manifest,
    #[serde(flatten)]
    report: crate::pipeline::RedundancyReport,
}

fn redundancy(ctx: &Context) -> CliResult<Vec<String>> {
    let cfg: RedundancyConfig = ctx.parse(None)?;
    if !(cfg.threshold > 0.0 && cfg.threshold < 1.0) {
        return Err(Failure::config(format!("threshold must lie in (0, 1), got {}", cfg.threshold)));
    }
    let dir = ctx.input("benchmark", &cfg.benchmark)?;
    let bench = read_bench(&dir)?;
    let report = redundancy_report(&bench.runs, cfg.threshold)?;
    let mut lines = vec![format!("{} sensors, {} samples each", report.sensors.len(), report.samples)];
    if report.groups.is_empty() {
        lines.push(format!("no groups at |r| >= {}", cfg.threshold));
    }
    for g in &report.groups {
        lines.push(format!("redundant: {}", g.join(", ")));
    }
    ctx.write_json("redundancy.json", &RedundancyOut { manifest: ctx.manifest(ctx.seed(None), None), report })?;
    Ok(lines)
}

// ------------------------------------------------------------------ report

/// `report` configuration: one pipeline, either inline or picked by name
/// from the preset candidates.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    pub benchmark: PathBuf,
    pub target: Option<String>,
    pub pipeline: Option<PipelineSpec>,
    pub pipeline_name: Option<String>,
}

#[derive(Serialize)]
struct FeatureSummary {
    name: String,
    mean: f64,
    std: f64,
    min: f64,
    max: f64,
    missing: usize,
    /// Pearson correlation with the target over runs where the feature exists.
    target_correlation: Option<f64>,
}

#[derive(Serialize)]
struct ReportSummary {
    manifest: Manifest,
    pipeline: String,
    runs: usize,
    features: Vec<FeatureSummary>,
    issues: Vec<crate::pipeline::FeatureIssue>,
}

fn report(ctx: &Context) -> CliResult<Vec<String>> {
    let cfg: ReportConfig = ctx.parse(None)?;
    let spec = match (&cfg.pipeline, &cfg.pipeline_name) {
        (Some(p), None) => p.clone(),
        (None, Some(name)) => CandidatePreset::Forging
            .specs()
            .into_iter()
            .chain(CandidatePreset::Greybox.specs())
            .find(|s| &s.name == name)
            .ok_or_else(|| Failure::config(format!("no preset pipeline named {name}")))?,
        _ => return Err(Failure::config("give exactly one of pipeline or pipeline_name")),
    };
    spec.validate().map_err(|e| Failure::config(e.to_string()))?;
    let dir = ctx.input("benchmark", &cfg.benchmark)?;
    let bench = read_bench(&dir)?;
    let y = cfg.target.as_deref().map(|t| bench.column(t)).transpose()?;
    let fm = spec.features(&bench.runs)?;

    let features = (0..fm.names.len())
        .map(|j| {
            let col: Vec<(usize, f64)> = fm.values.column(j).iter().copied().enumerate().filter(|(_, v)| v.is_finite()).collect();
            let vals: Vec<f64> = col.iter().map(|(_, v)| *v).collect();
            let (mean, std) = if vals.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&vals) };
            FeatureSummary {
                name: fm.names[j].clone(),
                mean,
                std,
                min: vals.iter().copied().fold(f64::INFINITY, f64::min),
                max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                missing: fm.run_ids.len() - vals.len(),
                target_correlation: y.as_ref().map(|y| {
                    let t: Vec<f64> = col.iter().map(|(i, _)| y[*i]).collect();
                    pearson(&vals, &t)
                }),
            }
        })
        .collect::<Vec<_>>();
    fm.to_csv(&ctx.out_dir()?.join("features.csv"))?;
    let mut lines = vec![format!("{} runs x {} features from {}", fm.run_ids.len(), fm.names.len(), spec.name)];
    if !fm.issues.is_empty() {
        lines.push(format!("{} missing feature values", fm.issues.len()));
    }
    ctx.write_json(
        "summary.json",
        &ReportSummary {
            manifest: ctx.manifest(ctx.seed(None), None),
            pipeline: spec.name.clone(),
            runs: fm.run_ids.len(),
            features,
            issues: fm.issues.clone(),
        },
    )?;
    Ok(lines)
}

/// Shared helper for the examples and tests: parse a config file.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::config(format!("invalid config {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cli(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("metromodel").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_parse_in_any_position() {
        let c = cli(&["--seed", "7", "train", "--config", "a.toml", "--quiet"]);
        assert_eq!(c.command, Command::Train);
        assert_eq!(c.seed, Some(7));
        assert!(c.quiet);
        assert_eq!(c.config.as_deref(), Some(Path::new("a.toml")));
    }

    #[test]
    fn unknown_command_is_a_usage_error() {
        for args in [&["metromodel", "explode"][..], &["metromodel", "train", "--seed", "x"]] {
            let e = Cli::try_parse_from(args).unwrap_err();
            assert!(e.use_stderr());
        }
    }

    #[test]
    fn missing_config_names_the_path() {
        let c = cli(&["train", "--config", "/nonexistent/train.toml"]);
        let f = run(&c).unwrap_err();
        assert_eq!(f.code, 2);
        assert!(f.message.contains("/nonexistent/train.toml"));
        assert_eq!(run(&cli(&["propagate"])).unwrap_err().code, 2);
    }

    #[test]
    fn expression_errors_carry_position() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("p.toml");
        fs::write(
            &cfg,
            "expression = \"X1*\"\n[[inputs]]\nname = \"X1\"\nkind = \"normal\"\nmean = 0\nstd = 1\n",
        )
        .unwrap();
        let c = cli(&["propagate", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
        let f = run(&c).unwrap_err();
        assert_eq!(f.code, 2);
        assert!(f.message.contains("position 3"), "{}", f.message);
    }

    #[test]
    fn simulate_config_resolution() {
        let c: SimulateConfig = toml::from_str("preset = \"greybox\"\nruns = 4").unwrap();
        let (p, s) = c.resolve().unwrap();
        assert_eq!(p, greybox_process());
        assert_eq!(s, greybox_sensors());
        let c: SimulateConfig = toml::from_str("runs = 4").unwrap();
        assert!(c.resolve().is_err());
        assert!(toml::from_str::<SimulateConfig>("preset = \"forging\"\nrun = 4").is_err());
    }

    #[test]
    fn candidate_sources_are_exclusive() {
        assert_eq!(candidates(Some(CandidatePreset::Forging), &[]).unwrap(), forging_candidates());
        assert_eq!(candidates(None, &[]).unwrap_err().code, 2);
        assert_eq!(candidates(Some(CandidatePreset::Greybox), &[greybox_spec(true)]).unwrap_err().code, 2);
    }

    #[test]
    fn multivariate_inputs_name_each_component() {
        let text = r#"
            expression = "a - b"
            [[inputs]]
            name = ["a", "b"]
            kind = "multi_normal"
            mean = [1.0, 2.0]
            covariance = [[1.0, 0.5], [0.5, 1.0]]
        "#;
        let c: PropagateConfig = toml::from_str(text).unwrap();
        assert_eq!(c.inputs[0].name.list(), vec!["a", "b"]);
        assert_eq!(c.inputs[0].distribution.dim(), 2);
    }
}
