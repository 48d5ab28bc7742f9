//! Synthetic multi-sensor process generator with known ground truth.
//!
//! A run draws its variables, synthesises noiseless latent channels phase by
//! phase at ten times the highest sensor rate, and reads each channel through
//! its sensor: static or second-order dynamics, then sampling jitter, then
//! additive noise. Targets are computed from the latent channels.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::{convolve, impulse_response, interpolate_index, SecondOrderSystem, Signal};
use crate::pipeline::{PhaseBounds, TimeSeriesSet};
use crate::uncertain::{sample_with, Distribution, RandomStream};

/// Latent channels are synthesised at this multiple of the fastest sensor rate.
pub const LATENT_OVERSAMPLING: f64 = 10.0;
pub const DEFAULT_RUNS: usize = 81;

/// A waveform parameter: a constant, a variable name, or an affine
/// combination of variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Param {
    Value(f64),
    Variable(String),
    Linear {
        #[serde(default)]
        offset: f64,
        terms: BTreeMap<String, f64>,
    },
}

impl Param {
    fn eval(&self, vars: &BTreeMap<String, f64>) -> Result<f64> {
        let get = |name: &str| {
            vars.get(name)
                .copied()
                .ok_or_else(|| Error::param(format!("unknown variable {name}")))
        };
        match self {
            Param::Value(v) => Ok(*v),
            Param::Variable(name) => get(name),
            Param::Linear { offset, terms } => terms
                .iter()
                .try_fold(*offset, |acc, (name, w)| Ok(acc + w * get(name)?)),
        }
    }

    fn variables(&self) -> Vec<&str> {
        match self {
            Param::Value(_) => Vec::new(),
            Param::Variable(n) => vec![n.as_str()],
            Param::Linear { terms, .. } => terms.keys().map(String::as_str).collect(),
        }
    }
}

/// Channel stimulus within one phase, in phase-local time. An absent `start`
/// continues from the channel's value at the end of the previous phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum Waveform {
    Constant {
        level: Param,
    },
    /// Linear from `start` to `end` across the phase.
    Ramp {
        #[serde(default)]
        start: Option<Param>,
        end: Param,
    },
    Sinusoid {
        #[serde(default = "zero")]
        offset: Param,
        amplitude: Param,
        /// Hz
        frequency: Param,
        /// rad
        #[serde(default = "zero")]
        phase: Param,
    },
    /// `target + (start − target)·e^{−t/τ}`.
    Exponential {
        #[serde(default)]
        start: Option<Param>,
        target: Param,
        tau: Param,
    },
}

fn zero() -> Param {
    Param::Value(0.0)
}

/// Waveform with every parameter evaluated for one run.
#[derive(Debug, Clone, Copy)]
enum Resolved {
    Constant(f64),
    Ramp { start: f64, end: f64, duration: f64 },
    Sinusoid { offset: f64, amplitude: f64, omega: f64, phase: f64 },
    Exponential { start: f64, target: f64, tau: f64 },
}

impl Resolved {
    fn at(&self, t: f64) -> f64 {
        match *self {
            Resolved::Constant(v) => v,
            Resolved::Ramp {
                start,
                end,
                duration,
            } => start + (end - start) * (t / duration),
            Resolved::Sinusoid {
                offset,
                amplitude,
                omega,
                phase,
            } => offset + amplitude * (omega * t + phase).sin(),
            Resolved::Exponential { start, target, tau } => target + (start - target) * (-t / tau).exp(),
        }
    }
}

impl Waveform {
    fn resolve(&self, vars: &BTreeMap<String, f64>, carry: f64, duration: f64) -> Result<Resolved> {
        let start = |p: &Option<Param>| p.as_ref().map_or(Ok(carry), |p| p.eval(vars));
        Ok(match self {
            Waveform::Constant { level } => Resolved::Constant(level.eval(vars)?),
            Waveform::Ramp { start: s, end } => Resolved::Ramp {
                start: start(s)?,
                end: end.eval(vars)?,
                duration,
            },
            Waveform::Sinusoid {
                offset,
                amplitude,
                frequency,
                phase,
            } => Resolved::Sinusoid {
                offset: offset.eval(vars)?,
                amplitude: amplitude.eval(vars)?,
                omega: 2.0 * std::f64::consts::PI * frequency.eval(vars)?,
                phase: phase.eval(vars)?,
            },
            Waveform::Exponential { start: s, target, tau } => {
                let tau = tau.eval(vars)?;
                if !(tau > 0.0) {
                    return Err(Error::param(format!("exponential tau must be > 0, got {tau}")));
                }
                Resolved::Exponential {
                    start: start(s)?,
                    target: target.eval(vars)?,
                    tau,
                }
            }
        })
    }

    fn params(&self) -> Vec<&Param> {
        match self {
            Waveform::Constant { level } => vec![level],
            Waveform::Ramp { start, end } => start.iter().chain([end]).collect(),
            Waveform::Sinusoid {
                offset,
                amplitude,
                frequency,
                phase,
            } => vec![offset, amplitude, frequency, phase],
            Waveform::Exponential { start, target, tau } => start.iter().chain([target, tau]).collect(),
        }
    }
}

/// A variable drawn once per run from a univariate distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variable {
    pub name: String,
    pub distribution: Distribution,
}

/// Channels absent from a phase hold their previous value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub name: String,
    /// Seconds.
    pub duration: Param,
    #[serde(default)]
    pub channels: BTreeMap<String, Waveform>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetRule {
    /// Integral of a latent channel over a phase.
    EnergyIntegral { channel: String, phase: String },
    /// `offset + Σ w·variable + σ_y·ε`.
    LinearCombination {
        #[serde(default)]
        offset: f64,
        weights: BTreeMap<String, f64>,
        #[serde(default)]
        noise_std: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub name: String,
    pub rule: TargetRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessSpec {
    #[serde(default)]
    pub variables: Vec<Variable>,
    pub phases: Vec<Phase>,
    #[serde(default)]
    pub targets: Vec<TargetSpec>,
}

impl ProcessSpec {
    pub fn channels(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for p in &self.phases {
            for c in p.channels.keys() {
                if !out.contains(&c.as_str()) {
                    out.push(c);
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::param("process needs at least one phase"));
        }
        let mut names = HashSet::new();
        for v in &self.variables {
            if !names.insert(v.name.as_str()) {
                return Err(Error::param(format!("duplicate variable {}", v.name)));
            }
            if v.distribution.dim() != 1 {
                return Err(Error::param(format!("variable {} must be univariate", v.name)));
            }
            v.distribution.validate()?;
        }
        let known = |n: &str| -> Result<()> {
            if names.contains(n) {
                Ok(())
            } else {
                Err(Error::param(format!("unknown variable {n}")))
            }
        };
        let mut phases = HashSet::new();
        for p in &self.phases {
            if !phases.insert(p.name.as_str()) {
                return Err(Error::param(format!("duplicate phase {}", p.name)));
            }
            for v in p.duration.variables() {
                known(v)?;
            }
            for w in p.channels.values() {
                for v in w.params().into_iter().flat_map(Param::variables) {
                    known(v)?;
                }
            }
        }
        let channels = self.channels();
        let mut targets = HashSet::new();
        for t in &self.targets {
            if names.contains(t.name.as_str()) || !targets.insert(t.name.as_str()) || t.name == "run_id" {
                return Err(Error::param(format!("target name {} is duplicated or clashes with a variable", t.name)));
            }
            match &t.rule {
                TargetRule::EnergyIntegral { channel, phase } => {
                    if !channels.contains(&channel.as_str()) {
                        return Err(Error::param(format!("target {} uses unknown channel {channel}", t.name)));
                    }
                    if !phases.contains(phase.as_str()) {
                        return Err(Error::param(format!("target {} uses unknown phase {phase}", t.name)));
                    }
                }
                TargetRule::LinearCombination { weights, noise_std, .. } => {
                    for v in weights.keys() {
                        known(v)?;
                    }
                    if !(*noise_std >= 0.0) {
                        return Err(Error::param("target noise_std must be >= 0"));
                    }
                }
            }
        }
        Ok(())
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SensorKind {
    Static {
        #[serde(default = "one")]
        gain: f64,
        #[serde(default)]
        offset: f64,
    },
    Dynamic {
        delta: f64,
        omega0: f64,
        /// Defaults to `omega0²` (unit static gain).
        #[serde(default)]
        rho: Option<f64>,
    },
}

impl Default for SensorKind {
    fn default() -> Self {
        SensorKind::Static {
            gain: 1.0,
            offset: 0.0,
        }
    }
}

/// A sensor reads a latent `channel`, duplicates another sensor
/// (`redundancy_of`), or, with neither, records pure noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub id: String,
    #[serde(default)]
    pub channel: Option<String>,
    #[serde(default)]
    pub kind: SensorKind,
    #[serde(default)]
    pub noise_std: f64,
    /// Seconds.
    #[serde(default)]
    pub jitter_std: f64,
    /// Hz
    pub sample_rate: f64,
    #[serde(default)]
    pub redundancy_of: Option<String>,
}

pub fn validate_sensors(process: &ProcessSpec, sensors: &[SensorSpec]) -> Result<()> {
    if sensors.is_empty() {
        return Err(Error::param("at least one sensor is required"));
    }
    let channels = process.channels();
    let mut ids = HashSet::new();
    let rate = sensors[0].sample_rate;
    for s in sensors {
        if !ids.insert(s.id.as_str()) || s.id == "t" {
            return Err(Error::param(format!("sensor id {} is duplicated or reserved", s.id)));
        }
        if !(s.sample_rate > 0.0 && s.sample_rate.is_finite()) {
            return Err(Error::param(format!("sensor {}: sample_rate must be > 0", s.id)));
        }
        if s.sample_rate != rate {
            return Err(Error::param(format!(
                "sensor {} samples at {} Hz but the run uses {rate} Hz",
                s.id, s.sample_rate
            )));
        }
        if !(s.noise_std >= 0.0 && s.jitter_std >= 0.0) {
            return Err(Error::param(format!("sensor {}: noise and jitter must be >= 0", s.id)));
        }
        if let Some(c) = &s.channel {
            if !channels.contains(&c.as_str()) {
                return Err(Error::param(format!("sensor {} reads unknown channel {c}", s.id)));
            }
        }
        if let SensorKind::Dynamic { delta, omega0, rho } = s.kind {
            SecondOrderSystem::new(delta, omega0, rho.unwrap_or(omega0 * omega0))?;
        }
        if let Some(src) = &s.redundancy_of {
            if s.channel.is_some() {
                return Err(Error::param(format!("sensor {} cannot both read a channel and duplicate", s.id)));
            }
            let ok = sensors
                .iter()
                .any(|o| &o.id == src && o.redundancy_of.is_none() && o.id != s.id);
            if !ok {
                return Err(Error::param(format!(
                    "sensor {} duplicates {src}, which is not a non-redundant sensor",
                    s.id
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimRun {
    pub series: TimeSeriesSet,
    pub ground_truth: BTreeMap<String, f64>,
    pub variables: BTreeMap<String, f64>,
    pub phases: Vec<PhaseBounds>,
    /// Noiseless channels on the latent grid.
    pub latent: Vec<(String, Signal)>,
    pub stream: RandomStream,
}

impl SimRun {
    pub fn latent(&self, channel: &str) -> Option<&Signal> {
        self.latent.iter().find(|c| c.0 == channel).map(|c| &c.1)
    }
}

/// Trapezoidal integral of `power` over `[t0, t1]`, with linear interpolation
/// at endpoints that fall between samples.
pub fn energy_target(power: &Signal, t0: f64, t1: f64) -> Result<f64> {
    if power.len() < 2 {
        return Err(Error::InsufficientData("energy needs at least two samples".into()));
    }
    if !(t0 < t1) {
        return Err(Error::Range(format!("need t0 < t1, got [{t0}, {t1}]")));
    }
    let last = (power.len() - 1) as f64;
    let snap = |t: f64| {
        let p = (t - power.t0) / power.dt;
        let r = p.round();
        if (p - r).abs() <= 1e-9 * r.abs().max(1.0) {
            r
        } else {
            p
        }
    };
    let (a, b) = (snap(t0), snap(t1));
    if a < 0.0 || b > last {
        return Err(Error::Range(format!(
            "[{t0}, {t1}] is outside the signal span [{}, {}]",
            power.t0,
            power.end_time()
        )));
    }
    let x = &power.samples;
    let va = interpolate_index(x, a);
    let vb = interpolate_index(x, b);
    let (i0, i1) = (a.ceil() as usize, b.floor() as usize);
    let units = if (i0 as f64) > b {
        (b - a) * 0.5 * (va + vb)
    } else {
        let mut s = (i0 as f64 - a) * 0.5 * (va + x[i0]);
        for k in i0..i1 {
            s += 0.5 * (x[k] + x[k + 1]);
        }
        s + (b - i1 as f64) * 0.5 * (x[i1] + vb)
    };
    Ok(units * power.dt)
}

/// Outcome of [`inject_jitter`]; `severe` flags `jitter_std > dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Jittered {
    pub signal: Signal,
    pub severe: bool,
}

/// Re-read `samples` at index positions `k·ratio + ε_k/dt_latent`.
fn jittered_read(
    latent: &[f64],
    ratio: f64,
    latent_rate: f64,
    n: usize,
    jitter_std: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let mut pos = k as f64 * ratio;
            if jitter_std > 0.0 {
                let e: f64 = rng.sample(StandardNormal);
                pos += jitter_std * e * latent_rate;
            }
            interpolate_index(latent, pos)
        })
        .collect()
}

/// Perturb each nominal sample time by `Normal(0, jitter_std)` and read the
/// signal there by linear interpolation, keeping the nominal grid.
pub fn inject_jitter(signal: &Signal, jitter_std: f64, stream: RandomStream) -> Result<Jittered> {
    if !(jitter_std >= 0.0 && jitter_std.is_finite()) {
        return Err(Error::param(format!("jitter_std must be >= 0, got {jitter_std}")));
    }
    if signal.is_empty() {
        return Ok(Jittered {
            signal: signal.clone(),
            severe: false,
        });
    }
    let samples = jittered_read(
        &signal.samples,
        1.0,
        1.0 / signal.dt,
        signal.len(),
        jitter_std,
        &mut stream.rng(),
    );
    Ok(Jittered {
        signal: Signal {
            samples,
            dt: signal.dt,
            t0: signal.t0,
        },
        severe: jitter_std > signal.dt,
    })
}

pub fn simulate_run(process: &ProcessSpec, sensors: &[SensorSpec], stream: RandomStream) -> Result<SimRun> {
    simulate_named_run(process, sensors, stream, "run")
}

/// Stream layout: `derive(0)` draws variables then target noise, sensor `i`
/// draws jitter then noise from `derive(1 + i)`.
pub fn simulate_named_run(
    process: &ProcessSpec,
    sensors: &[SensorSpec],
    stream: RandomStream,
    run_id: &str,
) -> Result<SimRun> {
    process.validate()?;
    validate_sensors(process, sensors)?;

    let mut rng = stream.derive(0).rng();
    let mut vars = BTreeMap::new();
    for v in &process.variables {
        vars.insert(v.name.clone(), sample_with(&v.distribution, &mut rng, 1)?[(0, 0)]);
    }

    let mut phases = Vec::with_capacity(process.phases.len());
    let mut at = 0.0;
    for p in &process.phases {
        let d = p.duration.eval(&vars)?;
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::param(format!("phase {} has duration {d}", p.name)));
        }
        phases.push(PhaseBounds {
            name: p.name.clone(),
            start: at,
            end: at + d,
        });
        at += d;
    }
    let total = at;

    let rate = sensors[0].sample_rate;
    let latent_rate = LATENT_OVERSAMPLING * rate;
    let dt_l = 1.0 / latent_rate;
    let n_l = (total * latent_rate + 1e-9).floor() as usize + 1;

    let mut latent = Vec::new();
    for ch in process.channels() {
        let mut pieces = Vec::with_capacity(phases.len());
        let mut carry = 0.0;
        for (p, b) in process.phases.iter().zip(&phases) {
            let d = b.end - b.start;
            let r = match p.channels.get(ch) {
                Some(w) => w.resolve(&vars, carry, d)?,
                None => Resolved::Constant(carry),
            };
            carry = r.at(d);
            pieces.push(r);
        }
        let mut idx = 0;
        let samples = (0..n_l)
            .map(|k| {
                let t = k as f64 * dt_l;
                while idx + 1 < phases.len() && t >= phases[idx].end {
                    idx += 1;
                }
                pieces[idx].at(t - phases[idx].start)
            })
            .collect();
        latent.push((ch.to_string(), Signal::new(samples, dt_l, 0.0)?));
    }
    let find_latent = |c: &str| &latent.iter().find(|l| l.0 == c).expect("validated channel").1;

    let n_s = (total * rate + 1e-9).floor() as usize + 1;
    let ratio = latent_rate / rate;
    let mut clean: Vec<Option<Vec<f64>>> = vec![None; sensors.len()];
    let mut rngs: Vec<ChaCha8Rng> = (0..sensors.len()).map(|i| stream.derive(1 + i as u64).rng()).collect();
    for (i, s) in sensors.iter().enumerate() {
        if s.redundancy_of.is_some() {
            continue;
        }
        let read = match &s.channel {
            None => vec![0.0; n_s],
            Some(c) => {
                let x = find_latent(c);
                let processed: Vec<f64> = match s.kind {
                    SensorKind::Static { gain, offset } => x.samples.iter().map(|v| gain * v + offset).collect(),
                    SensorKind::Dynamic { delta, omega0, rho } => {
                        let sys = SecondOrderSystem::new(delta, omega0, rho.unwrap_or(omega0 * omega0))?;
                        let h = impulse_response(&sys, dt_l, sys.settling_samples(dt_l, n_l))?;
                        convolve(&h, x)?.samples
                    }
                };
                jittered_read(&processed, ratio, latent_rate, n_s, s.jitter_std, &mut rngs[i])
            }
        };
        clean[i] = Some(read);
    }
    let mut channels = Vec::with_capacity(sensors.len());
    for (i, s) in sensors.iter().enumerate() {
        let mut out = match &s.redundancy_of {
            Some(src) => {
                let j = sensors.iter().position(|o| &o.id == src).expect("validated source");
                clean[j].clone().expect("source is not redundant")
            }
            None => clean[i].clone().expect("computed above"),
        };
        if s.noise_std > 0.0 {
            for v in &mut out {
                let e: f64 = rngs[i].sample(StandardNormal);
                *v += s.noise_std * e;
            }
        }
        channels.push((s.id.clone(), Signal::new(out, 1.0 / rate, 0.0)?));
    }

    let mut truth = BTreeMap::new();
    for t in &process.targets {
        let v = match &t.rule {
            TargetRule::EnergyIntegral { channel, phase } => {
                let b = phases.iter().find(|p| &p.name == phase).expect("validated phase");
                let x = find_latent(channel);
                energy_target(x, b.start, b.end.min(x.end_time()))?
            }
            TargetRule::LinearCombination {
                offset,
                weights,
                noise_std,
            } => {
                let mut v = *offset + weights.iter().map(|(n, w)| w * vars[n]).sum::<f64>();
                if *noise_std > 0.0 {
                    let e: f64 = rng.sample(StandardNormal);
                    v += noise_std * e;
                }
                v
            }
        };
        truth.insert(t.name.clone(), v);
    }

    Ok(SimRun {
        series: TimeSeriesSet::new(run_id, channels)?,
        ground_truth: truth,
        variables: vars,
        phases,
        latent,
        stream,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub process: ProcessSpec,
    pub sensors: Vec<SensorSpec>,
    pub stream: RandomStream,
    pub runs: Vec<SimRun>,
}

pub fn run_id(index: usize) -> String {
    format!("run_{index:03}")
}

/// `n_runs` independent runs; run `i` uses `stream.derive(i)`.
pub fn make_benchmark(
    process: &ProcessSpec,
    sensors: &[SensorSpec],
    n_runs: usize,
    stream: RandomStream,
) -> Result<Benchmark> {
    if n_runs < 1 {
        return Err(Error::param("n_runs must be >= 1"));
    }
    process.validate()?;
    validate_sensors(process, sensors)?;
    let runs = (0..n_runs)
        .into_par_iter()
        .map(|i| simulate_named_run(process, sensors, stream.derive(i as u64), &run_id(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Benchmark {
        process: process.clone(),
        sensors: sensors.to_vec(),
        stream,
        runs,
    })
}

impl Benchmark {
    pub fn series(&self) -> Vec<TimeSeriesSet> {
        self.runs.iter().map(|r| r.series.clone()).collect()
    }

    pub fn target(&self, name: &str) -> Result<Vec<f64>> {
        self.runs
            .iter()
            .map(|r| {
                r.ground_truth
                    .get(name)
                    .copied()
                    .ok_or_else(|| Error::param(format!("unknown target {name}")))
            })
            .collect()
    }

    /// Column names of `targets.csv` after `run_id`.
    pub fn table_columns(&self) -> Vec<String> {
        self.process
            .targets
            .iter()
            .map(|t| t.name.clone())
            .chain(self.process.variables.iter().map(|v| v.name.clone()))
            .collect()
    }

    /// One CSV per run, `targets.csv` and `manifest.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for r in &self.runs {
            r.series.to_csv(&dir.join(format!("{}.csv", r.series.run_id())))?;
        }
        let path = dir.join("targets.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, e))?;
        let cols = self.table_columns();
        let mut header = vec!["run_id".to_string()];
        header.extend(cols.iter().cloned());
        w.write_record(&header).map_err(|e| Error::io(&path, e))?;
        for r in &self.runs {
            let mut rec = vec![r.series.run_id().to_string()];
            for t in &self.process.targets {
                rec.push(r.ground_truth[&t.name].to_string());
            }
            for v in &self.process.variables {
                rec.push(r.variables[&v.name].to_string());
            }
            w.write_record(&rec).map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let manifest = BenchmarkManifest {
            master_seed: self.stream.master_seed,
            stream_index: self.stream.stream_index,
            n_runs: self.runs.len(),
            process: self.process.clone(),
            sensors: self.sensors.clone(),
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::io(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub master_seed: u64,
    pub stream_index: u64,
    pub n_runs: usize,
    pub process: ProcessSpec,
    pub sensors: Vec<SensorSpec>,
}

/// A benchmark directory as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkData {
    pub runs: Vec<TimeSeriesSet>,
    /// Columns of `targets.csv` after `run_id`.
    pub columns: Vec<String>,
    /// One row per run.
    pub table: Vec<Vec<f64>>,
}

impl BenchmarkData {
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let j = self
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Data(format!("targets.csv has no column {name}")))?;
        Ok(self.table.iter().map(|r| r[j]).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            runs: idx.iter().map(|&i| self.runs[i].clone()).collect(),
            columns: self.columns.clone(),
            table: idx.iter().map(|&i| self.table[i].clone()).collect(),
        }
    }
}

/// Read `targets.csv` and the run CSV it lists for each `run_id`. The
/// manifest is not required.
pub fn read_benchmark(dir: &Path) -> Result<BenchmarkData> {
    let path = dir.join("targets.csv");
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let csv_err = |line: u64, message: String| Error::Csv {
        path: path.display().to_string(),
        line,
        message,
    };
    let headers = reader.headers().map_err(|e| csv_err(1, e.to_string()))?.clone();
    if headers.get(0) != Some("run_id") {
        return Err(csv_err(1, "first column must be run_id".into()));
    }
    let columns: Vec<String> = headers.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let mut ids = Vec::new();
    let mut table = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let line = k as u64 + 2;
        let rec = rec.map_err(|e| csv_err(line, e.to_string()))?;
        if rec.len() != headers.len() {
            return Err(csv_err(line, format!("expected {} fields, found {}", headers.len(), rec.len())));
        }
        ids.push(rec[0].trim().to_string());
        let row = rec
            .iter()
            .skip(1)
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| csv_err(line, format!("cannot parse {f:?} as a number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        table.push(row);
    }
    let runs = ids
        .iter()
        .map(|id| TimeSeriesSet::from_csv(&dir.join(format!("{id}.csv")), id.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchmarkData { runs, columns, table })
}

fn lin(offset: f64, terms: &[(&str, f64)]) -> Param {
    Param::Linear {
        offset,
        terms: terms.iter().map(|(n, w)| (n.to_string(), *w)).collect(),
    }
}

fn var(name: &str) -> Param {
    Param::Variable(name.into())
}

fn uniform(name: &str, lower: f64, upper: f64) -> Variable {
    Variable {
        name: name.into(),
        distribution: Distribution::Uniform { lower, upper },
    }
}

fn waveforms(list: Vec<(&str, Waveform)>) -> BTreeMap<String, Waveform> {
    list.into_iter().map(|(k, w)| (k.to_string(), w)).collect()
}

fn constant(v: f64) -> Waveform {
    Waveform::Constant { level: Param::Value(v) }
}

/// Two-phase forging analogue: an idle lead-in of random length, a heating
/// phase and a forming phase whose power, force and speeds depend on three
/// controlled variables. The target is the forming energy.
pub fn forging_process() -> ProcessSpec {
    ProcessSpec {
        variables: vec![
            uniform("idle_duration", 0.5, 2.0),
            uniform("entry_temperature", 1050.0, 1250.0),
            uniform("axial_speed", 2.0, 6.0),
            uniform("radial_speed", 40.0, 70.0),
        ],
        phases: vec![
            Phase {
                name: "idle".into(),
                duration: var("idle_duration"),
                channels: waveforms(vec![
                    ("power", constant(0.5)),
                    ("temperature", constant(20.0)),
                    ("force", constant(0.0)),
                    ("chuck_speed", constant(0.0)),
                    ("hammer_speed", constant(0.0)),
                ]),
            },
            Phase {
                name: "heating".into(),
                duration: Param::Value(4.0),
                channels: waveforms(vec![
                    ("power", constant(15.0)),
                    (
                        "temperature",
                        Waveform::Exponential {
                            start: None,
                            target: var("entry_temperature"),
                            tau: Param::Value(0.8),
                        },
                    ),
                ]),
            },
            Phase {
                name: "forming".into(),
                duration: Param::Value(5.0),
                channels: waveforms(vec![
                    (
                        "power",
                        Waveform::Sinusoid {
                            offset: lin(30.0, &[("entry_temperature", -0.015), ("axial_speed", 2.0), ("radial_speed", 0.08)]),
                            amplitude: Param::Value(1.0),
                            frequency: Param::Value(20.0),
                            phase: Param::Value(0.0),
                        },
                    ),
                    (
                        "temperature",
                        Waveform::Exponential {
                            start: None,
                            target: lin(-150.0, &[("entry_temperature", 1.0)]),
                            tau: Param::Value(3.0),
                        },
                    ),
                    (
                        "force",
                        Waveform::Sinusoid {
                            offset: lin(400.0, &[("axial_speed", 100.0), ("entry_temperature", -0.2)]),
                            amplitude: lin(50.0, &[("radial_speed", 0.5)]),
                            frequency: Param::Value(20.0),
                            phase: Param::Value(0.0),
                        },
                    ),
                    ("chuck_speed", Waveform::Constant { level: var("radial_speed") }),
                    ("hammer_speed", Waveform::Constant { level: lin(0.0, &[("axial_speed", 10.0)]) }),
                ]),
            },
        ],
        targets: vec![TargetSpec {
            name: "energy".into(),
            rule: TargetRule::EnergyIntegral {
                channel: "power".into(),
                phase: "forming".into(),
            },
        }],
    }
}

fn sensor(id: &str, channel: Option<&str>, kind: SensorKind, noise_std: f64, jitter_std: f64) -> SensorSpec {
    SensorSpec {
        id: id.into(),
        channel: channel.map(String::from),
        kind,
        noise_std,
        jitter_std,
        sample_rate: 100.0,
        redundancy_of: None,
    }
}

fn duplicate(id: &str, of: &str, noise_std: f64) -> SensorSpec {
    SensorSpec {
        redundancy_of: Some(of.into()),
        ..sensor(id, None, SensorKind::default(), noise_std, 0.0)
    }
}

/// Twelve sensors at 100 Hz: seven process sensors, three noisy duplicates
/// (noise 1% of the source's standard deviation) and two pure-noise channels.
pub fn forging_sensors() -> Vec<SensorSpec> {
    let st = SensorKind::default();
    vec![
        sensor("power", Some("power"), st, 0.2, 0.0),
        sensor("temp_1", Some("temperature"), st, 2.0, 1e-3),
        sensor("temp_2", Some("temperature"), SensorKind::Static { gain: 0.98, offset: 5.0 }, 2.0, 1e-3),
        sensor(
            "force_left",
            Some("force"),
            SensorKind::Dynamic {
                delta: 0.6,
                omega0: 2.0 * std::f64::consts::PI * 60.0,
                rho: None,
            },
            5.0,
            0.0,
        ),
        sensor("force_right", Some("force"), SensorKind::Static { gain: 1.02, offset: 0.0 }, 5.0, 1e-4),
        sensor("chuck_speed", Some("chuck_speed"), st, 0.5, 0.0),
        sensor("hammer_speed", Some("hammer_speed"), st, 0.2, 0.0),
        duplicate("temp_1_dup", "temp_1", 3.7),
        duplicate("force_left_dup", "force_left", 2.9),
        duplicate("power_dup", "power", 0.08),
        sensor("noise_1", None, st, 1.0, 0.0),
        sensor("noise_2", None, st, 1.0, 0.0),
    ]
}

/// A rectangular pulse of random width and amplitude seen through an
/// underdamped sensor; the target is the amplitude.
pub fn greybox_process() -> ProcessSpec {
    ProcessSpec {
        variables: vec![uniform("width", 0.03, 0.15), uniform("amplitude", 0.5, 2.0)],
        phases: vec![
            Phase {
                name: "lead".into(),
                duration: Param::Value(0.2),
                channels: waveforms(vec![("stimulus", constant(0.0))]),
            },
            Phase {
                name: "pulse".into(),
                duration: var("width"),
                channels: waveforms(vec![("stimulus", Waveform::Constant { level: var("amplitude") })]),
            },
            Phase {
                name: "tail".into(),
                duration: Param::Value(1.0),
                channels: waveforms(vec![("stimulus", constant(0.0))]),
            },
        ],
        targets: vec![TargetSpec {
            name: "pulse_amplitude".into(),
            rule: TargetRule::LinearCombination {
                offset: 0.0,
                weights: [("amplitude".to_string(), 1.0)].into(),
                noise_std: 0.0,
            },
        }],
    }
}

pub const GREYBOX_DELTA: f64 = 0.3;
pub const GREYBOX_OMEGA0: f64 = 2.0 * std::f64::consts::PI * 8.0;

pub fn greybox_sensors() -> Vec<SensorSpec> {
    vec![SensorSpec {
        sample_rate: 200.0,
        ..sensor(
            "sensor",
            Some("stimulus"),
            SensorKind::Dynamic {
                delta: GREYBOX_DELTA,
                omega0: GREYBOX_OMEGA0,
                rho: None,
            },
            0.01,
            0.0,
        )
    }]
}
