//! Grey-box pipeline from multi-sensor runs to a predicted measurand:
//! optional deconvolution, alignment and phase segmentation, feature
//! extraction, Pearson selection, PCA and a learner, plus cross-validated
//! selection between candidate pipelines.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use nalgebra::DMatrix;
use petgraph::unionfind::UnionFind;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::lti::{deconvolve, impulse_response, uniform_step, SecondOrderSystem, Signal};
use crate::ml::{self, empirical_risk, fold_partition, Dataset, LearningProblem, TrainedModel};
use crate::uncertain::{mean_std, RandomStream, UncertainScalar};

/// Relative tolerance on the shared sample interval of a run.
pub const DT_TOLERANCE: f64 = 1e-9;
/// Hysteresis of the marker detector as a fraction of the threshold.
pub const HYSTERESIS: f64 = 0.05;

/// All sensor channels of one run, sampled on a common interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesSet {
    run_id: String,
    dt: f64,
    channels: Vec<(String, Signal)>,
}

impl TimeSeriesSet {
    pub fn new(run_id: impl Into<String>, channels: Vec<(String, Signal)>) -> Result<Self> {
        let run_id = run_id.into();
        let Some(dt) = channels.first().map(|c| c.1.dt) else {
            return Err(Error::Data(format!("run {run_id} has no channels")));
        };
        let mut seen = HashSet::new();
        for (name, s) in &channels {
            if !seen.insert(name.as_str()) {
                return Err(Error::Data(format!("run {run_id}: duplicate sensor {name}")));
            }
            if (s.dt - dt).abs() > DT_TOLERANCE * dt {
                return Err(Error::ResamplingRequired(format!(
                    "run {run_id}: sensor {name} has dt {} but the run uses {dt}",
                    s.dt
                )));
            }
        }
        Ok(Self {
            run_id,
            dt,
            channels,
        })
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sensors(&self) -> impl Iterator<Item = &str> {
        self.channels.iter().map(|c| c.0.as_str())
    }

    pub fn channels(&self) -> &[(String, Signal)] {
        &self.channels
    }

    pub fn get(&self, sensor: &str) -> Option<&Signal> {
        self.channels.iter().find(|c| c.0 == sensor).map(|c| &c.1)
    }

    pub fn require(&self, sensor: &str) -> Result<&Signal> {
        self.get(sensor).ok_or_else(|| Error::Schema {
            sensor: sensor.to_string(),
        })
    }

    pub fn replace(&mut self, sensor: &str, signal: Signal) -> Result<()> {
        let slot = self
            .channels
            .iter_mut()
            .find(|c| c.0 == sensor)
            .ok_or_else(|| Error::Schema {
                sensor: sensor.to_string(),
            })?;
        slot.1 = signal;
        Ok(())
    }

    /// Add `delta` to every time stamp.
    pub fn shifted(&self, delta: f64) -> Self {
        let mut out = self.clone();
        for (_, s) in &mut out.channels {
            s.t0 += delta;
        }
        out
    }

    /// CSV with columns `t,<sensor>,…`; all channels must share length and start.
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let first = &self.channels[0].1;
        if self
            .channels
            .iter()
            .any(|(_, s)| s.len() != first.len() || s.t0 != first.t0)
        {
            return Err(Error::Shape(format!(
                "run {}: channels must share length and start to be written as one table",
                self.run_id
            )));
        }
        let mut headers = vec!["t".to_string()];
        headers.extend(self.channels.iter().map(|c| c.0.clone()));
        let rows: Vec<Vec<f64>> = (0..first.len())
            .map(|k| {
                let mut r = vec![first.time(k)];
                r.extend(self.channels.iter().map(|c| c.1.samples[k]));
                r
            })
            .collect();
        io::write_numeric_csv(path, &headers, &rows)
    }

    pub fn from_csv(path: &Path, run_id: impl Into<String>) -> Result<Self> {
        let table = io::read_numeric_csv(path)?;
        if table.headers.first().map(String::as_str) != Some("t") || table.headers.len() < 2 {
            return Err(Error::Csv {
                path: path.display().to_string(),
                line: 1,
                message: "expected header t,<sensor>,…".into(),
            });
        }
        let times: Vec<f64> = table.rows.iter().map(|r| r[0]).collect();
        let dt = uniform_step(&times).map_err(|message| Error::Csv {
            path: path.display().to_string(),
            line: 1,
            message,
        })?;
        let channels = table.headers[1..]
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let samples = table.rows.iter().map(|r| r[j + 1]).collect();
                Ok((name.clone(), Signal::new(samples, dt, times[0])?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(run_id, channels)
    }
}

/// Marker sensor whose first rising threshold crossing defines `T0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Marker {
    pub sensor: String,
    pub threshold: f64,
}

/// Phase window relative to `T0`; an absent end runs to the end of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseWindow {
    pub name: String,
    pub start: f64,
    #[serde(default)]
    pub end: Option<f64>,
}

/// Without a marker `T0 = 0` and the windows are fixed in run time.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseRules {
    #[serde(default)]
    pub marker: Option<Marker>,
    #[serde(default)]
    pub phases: Vec<PhaseWindow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseBounds {
    pub name: String,
    pub start: f64,
    pub end: f64,
}

/// A run shifted so that `T0` sits at `t = 0`, with its phase bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentedRun {
    pub series: TimeSeriesSet,
    /// Time added to every stamp, `−T0`.
    pub shift: f64,
    pub phases: Vec<PhaseBounds>,
}

impl SegmentedRun {
    pub fn unsegmented(series: TimeSeriesSet) -> Self {
        Self {
            series,
            shift: 0.0,
            phases: Vec::new(),
        }
    }

    pub fn phase(&self, name: &str) -> Option<&PhaseBounds> {
        self.phases.iter().find(|p| p.name == name)
    }

    /// Samples of `sensor` inside the phase, or the whole signal for `None`.
    pub fn window(&self, sensor: &str, phase: Option<&str>) -> Result<Signal> {
        let s = self.series.require(sensor)?;
        let Some(name) = phase else {
            return Ok(s.clone());
        };
        let p = self
            .phase(name)
            .ok_or_else(|| Error::Data(format!("run {} has no phase {name}", self.series.run_id)))?;
        crop(s, p.start, p.end).ok_or_else(|| {
            Error::Data(format!(
                "run {}: phase {name} [{}, {}] holds no samples of {sensor}",
                self.series.run_id, p.start, p.end
            ))
        })
    }
}

fn crop(s: &Signal, start: f64, end: f64) -> Option<Signal> {
    if s.is_empty() {
        return None;
    }
    let lo = ((start - s.t0) / s.dt - 1e-9).ceil().max(0.0);
    let hi = ((end - s.t0) / s.dt + 1e-9).floor().min((s.len() - 1) as f64);
    if lo > hi {
        return None;
    }
    let (lo, hi) = (lo as usize, hi as usize);
    Some(Signal {
        samples: s.samples[lo..=hi].to_vec(),
        dt: s.dt,
        t0: s.time(lo),
    })
}

/// Time of the first sample at or above `threshold` after the signal has
/// been below `threshold − 5%·|threshold|`.
pub fn detect_crossing(signal: &Signal, threshold: f64) -> Option<f64> {
    let arm = threshold - HYSTERESIS * threshold.abs();
    let mut armed = false;
    for (k, &v) in signal.samples.iter().enumerate() {
        if v < arm {
            armed = true;
        } else if armed && v >= threshold {
            return Some(signal.time(k));
        }
    }
    None
}

pub fn segment_run(run: &TimeSeriesSet, rules: &PhaseRules) -> Result<SegmentedRun> {
    let t0 = match &rules.marker {
        None => 0.0,
        Some(m) => {
            let s = run.require(&m.sensor)?;
            detect_crossing(s, m.threshold).ok_or_else(|| Error::Segmentation {
                run: run.run_id.clone(),
                reason: format!("marker {} never crosses {}", m.sensor, m.threshold),
            })?
        }
    };
    let series = if t0 == 0.0 { run.clone() } else { run.shifted(-t0) };
    let end = series
        .channels
        .iter()
        .map(|c| c.1.end_time())
        .fold(f64::NEG_INFINITY, f64::max);
    let phases = rules
        .phases
        .iter()
        .map(|w| PhaseBounds {
            name: w.name.clone(),
            start: w.start,
            end: w.end.unwrap_or(end),
        })
        .collect();
    Ok(SegmentedRun {
        series,
        shift: -t0,
        phases,
    })
}

pub fn align_and_segment(runs: &[TimeSeriesSet], rules: &PhaseRules) -> Result<Vec<SegmentedRun>> {
    let mut names = HashSet::new();
    for w in &rules.phases {
        if !names.insert(w.name.as_str()) {
            return Err(Error::param(format!("duplicate phase {}", w.name)));
        }
        if w.end.is_some_and(|e| !(e > w.start)) {
            return Err(Error::param(format!("phase {} must end after it starts", w.name)));
        }
    }
    runs.par_iter().map(|r| segment_run(r, rules)).collect()
}

/// Feature extraction method applied to one window of one sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureSpec {
    /// Mean, population variance, maximum and minimum.
    Moments,
    /// Sum of `|X_j|²/n` over DFT bins with frequency in `[lo, hi)` Hz.
    BandEnergy { bands: Vec<[f64; 2]> },
    /// Index and amplitude `2|X_j|/n` of the `k` largest non-DC bins.
    TopFourier { k: usize },
    /// Means over `segments` equal sub-windows.
    SegmentMeans { segments: usize },
    /// Last value in phase `from` minus first value in phase `to`.
    Drop { from: String, to: String },
}

impl FeatureSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            FeatureSpec::BandEnergy { bands } => {
                if bands.is_empty() || bands.iter().any(|b| !(b[0] >= 0.0 && b[1] > b[0])) {
                    return Err(Error::param("bands need 0 <= lo < hi"));
                }
            }
            FeatureSpec::TopFourier { k } if *k == 0 => {
                return Err(Error::param("top_fourier needs k >= 1"))
            }
            FeatureSpec::SegmentMeans { segments } if *segments == 0 => {
                return Err(Error::param("segment_means needs segments >= 1"))
            }
            _ => {}
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        match self {
            FeatureSpec::Moments => 4,
            FeatureSpec::BandEnergy { bands } => bands.len(),
            FeatureSpec::TopFourier { k } => 2 * k,
            FeatureSpec::SegmentMeans { segments } => *segments,
            FeatureSpec::Drop { .. } => 1,
        }
    }

    fn method(&self) -> &'static str {
        match self {
            FeatureSpec::Moments => "moments",
            FeatureSpec::BandEnergy { .. } => "band_energy",
            FeatureSpec::TopFourier { .. } => "top_fourier",
            FeatureSpec::SegmentMeans { .. } => "segment_means",
            FeatureSpec::Drop { .. } => "drop",
        }
    }

    pub fn names(&self, prefix: &str) -> Vec<String> {
        let m = self.method();
        let params: Vec<String> = match self {
            FeatureSpec::Moments => ["mean", "variance", "max", "min"].map(String::from).to_vec(),
            FeatureSpec::BandEnergy { bands } => {
                bands.iter().map(|b| format!("{}-{}", b[0], b[1])).collect()
            }
            FeatureSpec::TopFourier { k } => (1..=*k)
                .flat_map(|i| [format!("idx{i}"), format!("mag{i}")])
                .collect(),
            FeatureSpec::SegmentMeans { segments } => (0..*segments).map(|i| i.to_string()).collect(),
            FeatureSpec::Drop { from, to } => vec![format!("{from}-{to}")],
        };
        params.into_iter().map(|p| format!("{prefix}.{m}.{p}")).collect()
    }
}

/// Features of one sensor, optionally restricted to a phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionSpec {
    pub sensor: String,
    #[serde(default)]
    pub phase: Option<String>,
    pub features: Vec<FeatureSpec>,
}

impl ExtractionSpec {
    fn prefix(&self) -> String {
        match &self.phase {
            Some(p) => format!("{}@{p}", self.sensor),
            None => self.sensor.clone(),
        }
    }

    pub fn count(&self) -> usize {
        self.features.iter().map(FeatureSpec::count).sum()
    }

    pub fn names(&self) -> Vec<String> {
        let p = self.prefix();
        self.features.iter().flat_map(|f| f.names(&p)).collect()
    }
}

/// A feature that could not be computed for a run; its cell holds NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureIssue {
    pub run_id: String,
    pub feature: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub run_ids: Vec<String>,
    pub names: Vec<String>,
    /// One row per run; missing cells are NaN.
    pub values: DMatrix<f64>,
    pub issues: Vec<FeatureIssue>,
}

impl FeatureMatrix {
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e))?;
        let mut header = vec!["run_id".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header).map_err(|e| Error::io(path, e))?;
        for (i, id) in self.run_ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(self.values.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn dft_magnitudes(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf[..=n / 2].iter().map(|c| c.norm()).collect()
}

fn compute_feature(
    run: &SegmentedRun,
    ex: &ExtractionSpec,
    spec: &FeatureSpec,
) -> std::result::Result<Vec<f64>, String> {
    if let FeatureSpec::Drop { from, to } = spec {
        let a = run.window(&ex.sensor, Some(from)).map_err(|e| e.to_string())?;
        let b = run.window(&ex.sensor, Some(to)).map_err(|e| e.to_string())?;
        return Ok(vec![a.samples[a.len() - 1] - b.samples[0]]);
    }
    let s = run
        .window(&ex.sensor, ex.phase.as_deref())
        .map_err(|e| e.to_string())?;
    let x = &s.samples;
    let n = x.len();
    if n == 0 {
        return Err("empty window".into());
    }
    let nf = n as f64;
    Ok(match spec {
        FeatureSpec::Moments => {
            let mean = x.iter().sum::<f64>() / nf;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
            let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = x.iter().copied().fold(f64::INFINITY, f64::min);
            vec![mean, var, max, min]
        }
        FeatureSpec::BandEnergy { bands } => {
            if n < 2 {
                return Err("band energy needs at least 2 samples".into());
            }
            let mag = dft_magnitudes(x);
            let df = 1.0 / (nf * s.dt);
            bands
                .iter()
                .map(|b| {
                    mag.iter()
                        .enumerate()
                        .filter(|(j, _)| {
                            let f = *j as f64 * df;
                            f >= b[0] && f < b[1]
                        })
                        .map(|(_, m)| m * m / nf)
                        .sum()
                })
                .collect()
        }
        FeatureSpec::TopFourier { k } => {
            if n / 2 < *k {
                return Err(format!("{n} samples give fewer than {k} non-DC bins"));
            }
            let mag = dft_magnitudes(x);
            let mut bins: Vec<usize> = (1..mag.len()).collect();
            bins.sort_by(|a, b| mag[*b].total_cmp(&mag[*a]).then(a.cmp(b)));
            bins[..*k]
                .iter()
                .flat_map(|&j| [j as f64, 2.0 * mag[j] / nf])
                .collect()
        }
        FeatureSpec::SegmentMeans { segments } => {
            if n < *segments {
                return Err(format!("{n} samples cannot fill {segments} segments"));
            }
            (0..*segments)
                .map(|i| {
                    let (lo, hi) = (i * n / segments, (i + 1) * n / segments);
                    x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
                })
                .collect()
        }
        FeatureSpec::Drop { .. } => unreachable!(),
    })
}

/// One row per run, columns named `<sensor>[@phase].<method>.<param>`.
pub fn extract_features(runs: &[SegmentedRun], specs: &[ExtractionSpec]) -> Result<FeatureMatrix> {
    for ex in specs {
        if ex.features.is_empty() {
            return Err(Error::param(format!("no features requested for {}", ex.sensor)));
        }
        for f in &ex.features {
            f.validate()?;
        }
    }
    for run in runs {
        for ex in specs {
            run.series.require(&ex.sensor)?;
        }
    }
    let names: Vec<String> = specs.iter().flat_map(ExtractionSpec::names).collect();
    let per_run: Vec<(Vec<f64>, Vec<FeatureIssue>)> = runs
        .par_iter()
        .map(|run| {
            let mut row = Vec::with_capacity(names.len());
            let mut issues = Vec::new();
            for ex in specs {
                let prefix = ex.prefix();
                for f in &ex.features {
                    match compute_feature(run, ex, f) {
                        Ok(v) => row.extend(v),
                        Err(reason) => {
                            for name in f.names(&prefix) {
                                issues.push(FeatureIssue {
                                    run_id: run.series.run_id.clone(),
                                    feature: name,
                                    reason: reason.clone(),
                                });
                            }
                            row.extend(std::iter::repeat_n(f64::NAN, f.count()));
                        }
                    }
                }
            }
            (row, issues)
        })
        .collect();
    let values = DMatrix::from_fn(runs.len(), names.len(), |i, j| per_run[i].0[j]);
    Ok(FeatureMatrix {
        run_ids: runs.iter().map(|r| r.series.run_id.clone()).collect(),
        names,
        values,
        issues: per_run.into_iter().flat_map(|p| p.1).collect(),
    })
}

/// Pearson correlation; zero when either side has no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Chosen columns by decreasing score.
    pub indices: Vec<usize>,
    /// `|r|` of every column against the target.
    pub scores: Vec<f64>,
    #[serde(default)]
    pub warning: Option<String>,
}

/// Top-`k` columns by `|r|` with the target; ties go to the lower index.
pub fn select_features_pearson(features: &DMatrix<f64>, target: &[f64], k: usize) -> Result<Selection> {
    let d = features.ncols();
    if k < 1 || k > d {
        return Err(Error::param(format!("k must lie in [1, {d}], got {k}")));
    }
    if features.nrows() != target.len() {
        return Err(Error::Shape(format!(
            "{} feature rows but {} targets",
            features.nrows(),
            target.len()
        )));
    }
    let scores: Vec<f64> = features
        .column_iter()
        .map(|c| pearson(c.as_slice(), target).abs())
        .collect();
    let warning = {
        let first = target.first().copied();
        target
            .iter()
            .all(|v| Some(*v) == first)
            .then(|| "target is constant; every score is 0".to_string())
    };
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
    order.truncate(k);
    Ok(Selection {
        indices: order,
        scores,
        warning,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub means: Vec<f64>,
    /// Unit loading vectors, one per component.
    pub components: Vec<Vec<f64>>,
    /// Fraction of total variance per component, non-increasing.
    pub explained_ratio: Vec<f64>,
}

impl PcaModel {
    pub fn loadings(&self) -> DMatrix<f64> {
        let d = self.means.len();
        DMatrix::from_fn(d, self.components.len(), |i, j| self.components[j][i])
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.means.len() {
            return Err(Error::Shape(format!(
                "PCA expects {} columns, got {}",
                self.means.len(),
                x.ncols()
            )));
        }
        let centred = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - self.means[j]);
        Ok(centred * self.loadings())
    }

    pub fn reconstruct(&self, scores: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = scores * self.loadings().transpose();
        for (j, m) in self.means.iter().enumerate() {
            x.column_mut(j).add_scalar_mut(*m);
        }
        x
    }
}

/// Principal components of the sample covariance. The largest-magnitude
/// entry of each loading vector is made positive.
pub fn pca_reduce(x: &DMatrix<f64>, n_components: usize) -> Result<(DMatrix<f64>, PcaModel)> {
    let (n, d) = x.shape();
    let max = d.min(n.saturating_sub(1));
    if n_components < 1 || n_components > max {
        return Err(Error::param(format!(
            "n_components must lie in [1, {max}], got {n_components}"
        )));
    }
    let means: Vec<f64> = x.column_iter().map(|c| c.sum() / n as f64).collect();
    let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - means[j]);
    let cov = centred.transpose() * &centred / (n - 1) as f64;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]).then(a.cmp(b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut components = Vec::with_capacity(n_components);
    let mut explained = Vec::with_capacity(n_components);
    for &k in &order[..n_components] {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let big = v
            .iter()
            .enumerate()
            .fold(0, |best, (i, a)| if a.abs() > v[best].abs() { i } else { best });
        if v[big] < 0.0 {
            v.iter_mut().for_each(|a| *a = -*a);
        }
        components.push(v);
        explained.push(if total > 0.0 { eig.eigenvalues[k].max(0.0) / total } else { 0.0 });
    }
    let model = PcaModel {
        means,
        components,
        explained_ratio: explained,
    };
    let scores = model.transform(x)?;
    Ok((scores, model))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyReport {
    pub threshold: f64,
    pub sensors: Vec<String>,
    pub samples: usize,
    /// Pairwise Pearson correlations in `sensors` order.
    pub correlations: Vec<Vec<f64>>,
    /// Connected components of `|r| >= threshold`, singletons omitted.
    pub groups: Vec<Vec<String>>,
}

/// Group sensors whose concatenated samples correlate at `|r| >= threshold`.
/// Each run contributes its first `min length` samples of every sensor present
/// in all runs.
pub fn redundancy_report(runs: &[TimeSeriesSet], threshold: f64) -> Result<RedundancyReport> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::param(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let Some(first) = runs.first() else {
        return Err(Error::InsufficientOverlap("no runs".into()));
    };
    let sensors: Vec<String> = first
        .sensors()
        .filter(|s| runs.iter().all(|r| r.get(s).is_some()))
        .map(String::from)
        .collect();
    let mut series = vec![Vec::new(); sensors.len()];
    for run in runs {
        let len = sensors
            .iter()
            .map(|s| run.get(s).map_or(0, Signal::len))
            .min()
            .unwrap_or(0);
        for (j, s) in sensors.iter().enumerate() {
            series[j].extend_from_slice(&run.get(s).expect("shared sensor").samples[..len]);
        }
    }
    let samples = series.first().map_or(0, Vec::len);
    if samples < 2 || sensors.len() < 2 {
        return Err(Error::InsufficientOverlap(format!(
            "{} shared sensors with {samples} overlapping samples",
            sensors.len()
        )));
    }
    let m = sensors.len();
    let mut corr = vec![vec![0.0; m]; m];
    let mut uf = UnionFind::<usize>::new(m);
    for i in 0..m {
        corr[i][i] = if pearson(&series[i], &series[i]) > 0.0 { 1.0 } else { 0.0 };
        for j in i + 1..m {
            let r = pearson(&series[i], &series[j]);
            corr[i][j] = r;
            corr[j][i] = r;
            if r.abs() >= threshold {
                uf.union(i, j);
            }
        }
    }
    let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..m {
        by_root.entry(uf.find(i)).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = by_root.into_values().filter(|g| g.len() > 1).collect();
    groups.sort();
    Ok(RedundancyReport {
        threshold,
        sensors: sensors.clone(),
        samples,
        correlations: corr,
        groups: groups
            .into_iter()
            .map(|g| g.into_iter().map(|i| sensors[i].clone()).collect())
            .collect(),
    })
}

/// Replace a sensor by its Tikhonov deconvolution through a known
/// second-order response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Deconvolution {
    pub sensor: String,
    pub delta: f64,
    pub omega0: f64,
    /// Defaults to `omega0²` (unit static gain).
    #[serde(default)]
    pub rho: Option<f64>,
    pub lambda: f64,
    /// Impulse-response length in samples; defaults to the settling length.
    #[serde(default)]
    pub length: Option<usize>,
}

impl Deconvolution {
    fn system(&self) -> Result<SecondOrderSystem> {
        SecondOrderSystem::new(self.delta, self.omega0, self.rho.unwrap_or(self.omega0 * self.omega0))
    }

    pub fn apply(&self, s: &Signal) -> Result<Signal> {
        let sys = self.system()?;
        let n = self.length.unwrap_or_else(|| sys.settling_samples(s.dt, s.len())).min(s.len()).max(1);
        deconvolve(&impulse_response(&sys, s.dt, n)?, s, self.lambda)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PearsonTopK {
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reduction {
    pub n_components: usize,
}

/// Ordered stages: preprocess, segment, extract, impute, select, reduce, learn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub preprocess: Vec<Deconvolution>,
    #[serde(default)]
    pub segmentation: Option<PhaseRules>,
    pub extraction: Vec<ExtractionSpec>,
    #[serde(default)]
    pub selection: Option<PearsonTopK>,
    #[serde(default)]
    pub reduction: Option<Reduction>,
    pub learner: LearningProblem,
}

impl PipelineSpec {
    /// Number of extracted columns, known before any data is seen.
    pub fn feature_count(&self) -> usize {
        self.extraction.iter().map(ExtractionSpec::count).sum()
    }

    /// Width of the learner input.
    pub fn learner_inputs(&self) -> usize {
        let after_select = self.selection.map_or(self.feature_count(), |s| s.k);
        self.reduction.map_or(after_select, |r| r.n_components)
    }

    pub fn sensors(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for s in self
            .preprocess
            .iter()
            .map(|p| p.sensor.as_str())
            .chain(self.segmentation.iter().flat_map(|r| r.marker.iter().map(|m| m.sensor.as_str())))
            .chain(self.extraction.iter().map(|e| e.sensor.as_str()))
        {
            if !out.contains(&s) {
                out.push(s);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.extraction.is_empty() {
            return Err(Error::param("pipeline needs at least one extraction"));
        }
        for ex in &self.extraction {
            for f in &ex.features {
                f.validate()?;
            }
        }
        let total = self.feature_count();
        if let Some(s) = self.selection {
            if s.k < 1 || s.k > total {
                return Err(Error::param(format!("selection k must lie in [1, {total}], got {}", s.k)));
            }
        }
        if let Some(r) = self.reduction {
            let avail = self.selection.map_or(total, |s| s.k);
            if r.n_components < 1 || r.n_components > avail {
                return Err(Error::param(format!(
                    "n_components must lie in [1, {avail}], got {}",
                    r.n_components
                )));
            }
        }
        self.learner.family.validate()
    }

    /// Per-run stages that need no fitting.
    pub fn features(&self, runs: &[TimeSeriesSet]) -> Result<FeatureMatrix> {
        for run in runs {
            for s in self.sensors() {
                run.require(s)?;
            }
        }
        let prepared: Vec<TimeSeriesSet> = if self.preprocess.is_empty() {
            runs.to_vec()
        } else {
            runs.par_iter()
                .map(|run| {
                    let mut out = run.clone();
                    for p in &self.preprocess {
                        let s = p.apply(run.require(&p.sensor)?)?;
                        out.replace(&p.sensor, s)?;
                    }
                    Ok(out)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::stage("preprocess", e))?
        };
        let segmented = match &self.segmentation {
            Some(rules) => align_and_segment(&prepared, rules).map_err(|e| Error::stage("segment", e))?,
            None => prepared.into_iter().map(SegmentedRun::unsegmented).collect(),
        };
        extract_features(&segmented, &self.extraction).map_err(|e| Error::stage("extract", e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRecord {
    pub k: usize,
    pub fold_risks: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineModel {
    pub spec: PipelineSpec,
    pub feature_names: Vec<String>,
    /// Column means used in place of missing features.
    pub imputation: Vec<f64>,
    pub selection: Option<Selection>,
    pub pca: Option<PcaModel>,
    pub learner: TrainedModel,
    /// Learner outputs on the training runs.
    pub fitted: Vec<f64>,
    #[serde(default)]
    pub cv: Option<CvRecord>,
}

impl PipelineModel {
    /// Names of the columns that reach the selection output.
    pub fn selected_names(&self) -> Vec<String> {
        match &self.selection {
            Some(s) => s.indices.iter().map(|&i| self.feature_names[i].clone()).collect(),
            None => self.feature_names.clone(),
        }
    }

    fn learner_input(&self, fm: &FeatureMatrix) -> Result<DMatrix<f64>> {
        let x = impute(&fm.values, &self.imputation);
        let x = match &self.selection {
            Some(s) => x.select_columns(&s.indices),
            None => x,
        };
        match &self.pca {
            Some(p) => p.transform(&x),
            None => Ok(x),
        }
    }
}

fn impute(x: &DMatrix<f64>, fill: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
        let v = x[(i, j)];
        if v.is_nan() {
            fill[j]
        } else {
            v
        }
    })
}

fn column_fill(x: &DMatrix<f64>) -> Vec<f64> {
    x.column_iter()
        .map(|c| {
            let (s, n) = c
                .iter()
                .filter(|v| !v.is_nan())
                .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            if n == 0 {
                0.0
            } else {
                s / n as f64
            }
        })
        .collect()
}

/// Fit every stage after extraction on rows `rows` of a feature matrix.
fn fit_from_features(
    spec: &PipelineSpec,
    fm: &FeatureMatrix,
    rows: &[usize],
    targets: &[f64],
    stream: RandomStream,
) -> Result<PipelineModel> {
    let x = fm.values.select_rows(rows);
    let imputation = column_fill(&x);
    let x = impute(&x, &imputation);
    let selection = spec
        .selection
        .map(|s| select_features_pearson(&x, targets, s.k))
        .transpose()
        .map_err(|e| Error::stage("select", e))?;
    let x = match &selection {
        Some(s) => x.select_columns(&s.indices),
        None => x,
    };
    let (x, pca) = match spec.reduction {
        Some(r) => {
            let (scores, model) = pca_reduce(&x, r.n_components).map_err(|e| Error::stage("reduce", e))?;
            (scores, Some(model))
        }
        None => (x, None),
    };
    let data = Dataset::new(x, targets.to_vec()).map_err(|e| Error::stage("learn", e))?;
    let learner = ml::fit(&spec.learner.family, &data, stream).map_err(|e| Error::stage("learn", e))?;
    let fitted = learner.predict_all(data.features())?;
    Ok(PipelineModel {
        spec: spec.clone(),
        feature_names: fm.names.clone(),
        imputation,
        selection,
        pca,
        learner,
        fitted,
        cv: None,
    })
}

pub fn fit_pipeline(
    spec: &PipelineSpec,
    runs: &[TimeSeriesSet],
    targets: &[f64],
    stream: RandomStream,
) -> Result<PipelineModel> {
    spec.validate()?;
    if runs.len() != targets.len() {
        return Err(Error::Shape(format!("{} runs but {} targets", runs.len(), targets.len())));
    }
    let fm = spec.features(runs)?;
    let rows: Vec<usize> = (0..runs.len()).collect();
    fit_from_features(spec, &fm, &rows, targets, stream)
}

/// Replay the fitted stages on new runs.
pub fn predict_pipeline(model: &PipelineModel, runs: &[TimeSeriesSet]) -> Result<Vec<f64>> {
    let fm = model.spec.features(runs)?;
    model.learner.predict_all(&model.learner_input(&fm)?)
}

/// Monte Carlo over additive white noise on the listed sensors, propagated
/// through the frozen pipeline. Run `i` uses `stream.derive(i)`, trial `t`
/// a child of that.
pub fn predict_with_uncertainty(
    model: &PipelineModel,
    runs: &[TimeSeriesSet],
    noise: &BTreeMap<String, f64>,
    trials: usize,
    stream: RandomStream,
) -> Result<Vec<UncertainScalar>> {
    if trials < crate::propagation::MIN_TRIALS {
        return Err(Error::param(format!(
            "need at least {} trials, got {trials}",
            crate::propagation::MIN_TRIALS
        )));
    }
    for (s, sd) in noise {
        if !(*sd >= 0.0 && sd.is_finite()) {
            return Err(Error::param(format!("noise std for {s} must be >= 0")));
        }
    }
    runs.iter()
        .enumerate()
        .map(|(i, run)| {
            for s in noise.keys() {
                run.require(s)?;
            }
            let unit = stream.derive(i as u64);
            let values = (0..trials)
                .into_par_iter()
                .map(|t| {
                    let mut rng = unit.derive(t as u64).rng();
                    let mut noisy = run.clone();
                    for (s, sd) in noise {
                        let mut sig = run.require(s)?.clone();
                        for v in &mut sig.samples {
                            let e: f64 = rng.sample(StandardNormal);
                            *v += sd * e;
                        }
                        noisy.replace(s, sig)?;
                    }
                    Ok(predict_pipeline(model, std::slice::from_ref(&noisy))?[0])
                })
                .collect::<Result<Vec<f64>>>()?;
            // Deviations from the first draw keep a constant sample exact.
            let base = values[0];
            let dev: Vec<f64> = values.iter().map(|v| v - base).collect();
            let (m, s) = mean_std(&dev);
            UncertainScalar::new(base + m, s)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    /// Position in the candidate list.
    pub index: usize,
    pub name: String,
    pub fold_risks: Vec<f64>,
    pub mean_risk: f64,
    pub std_risk: f64,
    pub n_features: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoSelectReport {
    pub k: usize,
    pub folds: Vec<Vec<usize>>,
    /// Best first.
    pub ranking: Vec<CandidateScore>,
}

impl AutoSelectReport {
    pub fn best(&self) -> Option<&CandidateScore> {
        self.ranking.first().filter(|c| c.error.is_none())
    }
}

fn score_candidate(
    index: usize,
    spec: &PipelineSpec,
    runs: &[TimeSeriesSet],
    targets: &[f64],
    folds: &[Vec<usize>],
    stream: RandomStream,
) -> CandidateScore {
    let mut score = CandidateScore {
        index,
        name: spec.name.clone(),
        fold_risks: Vec::new(),
        mean_risk: f64::INFINITY,
        std_risk: f64::INFINITY,
        n_features: spec.learner_inputs(),
        error: None,
    };
    let attempt = || -> Result<Vec<f64>> {
        spec.validate()?;
        let fm = spec.features(runs)?;
        (0..folds.len())
            .into_par_iter()
            .map(|f| {
                let mut train: Vec<usize> = folds
                    .iter()
                    .enumerate()
                    .filter(|(g, _)| *g != f)
                    .flat_map(|(_, v)| v.iter().copied())
                    .collect();
                train.sort_unstable();
                let y: Vec<f64> = train.iter().map(|&i| targets[i]).collect();
                let model = fit_from_features(spec, &fm, &train, &y, stream.derive(f as u64))?;
                let held = FeatureMatrix {
                    run_ids: folds[f].iter().map(|&i| fm.run_ids[i].clone()).collect(),
                    names: fm.names.clone(),
                    values: fm.values.select_rows(&folds[f]),
                    issues: Vec::new(),
                };
                let x = model.learner_input(&held)?;
                let yt: Vec<f64> = folds[f].iter().map(|&i| targets[i]).collect();
                empirical_risk(&model.learner, &Dataset::new(x, yt)?, spec.learner.loss)
            })
            .collect::<Vec<Result<f64>>>()
            .into_iter()
            .collect()
    };
    match attempt() {
        Ok(risks) => {
            let (m, s) = mean_std(&risks);
            score.fold_risks = risks;
            score.mean_risk = m;
            score.std_risk = s;
        }
        Err(e) => score.error = Some(e.to_string()),
    }
    score
}

/// Cross-validated ranking of candidates on one shared fold partition. Fold
/// `f` of every candidate is fitted with `stream.derive(f)`; the partition
/// itself comes from `stream`.
pub fn evaluate_candidates(
    candidates: &[PipelineSpec],
    runs: &[TimeSeriesSet],
    targets: &[f64],
    k: usize,
    stream: RandomStream,
) -> Result<AutoSelectReport> {
    if candidates.is_empty() {
        return Err(Error::param("no candidate pipelines"));
    }
    if runs.len() != targets.len() {
        return Err(Error::Shape(format!("{} runs but {} targets", runs.len(), targets.len())));
    }
    let folds = fold_partition(runs.len(), k, stream)?;
    let mut ranking: Vec<CandidateScore> = candidates
        .par_iter()
        .enumerate()
        .map(|(i, c)| score_candidate(i, c, runs, targets, &folds, stream))
        .collect();
    ranking.sort_by(|a, b| {
        a.error
            .is_some()
            .cmp(&b.error.is_some())
            .then(a.mean_risk.total_cmp(&b.mean_risk))
            .then(a.n_features.cmp(&b.n_features))
            .then(a.index.cmp(&b.index))
    });
    Ok(AutoSelectReport { k, folds, ranking })
}

/// As [`evaluate_candidates`] for two or more candidates.
pub fn auto_select(
    candidates: &[PipelineSpec],
    runs: &[TimeSeriesSet],
    targets: &[f64],
    k: usize,
    stream: RandomStream,
) -> Result<AutoSelectReport> {
    if candidates.len() < 2 {
        return Err(Error::param(format!(
            "auto selection needs at least 2 candidates, got {}",
            candidates.len()
        )));
    }
    evaluate_candidates(candidates, runs, targets, k, stream)
}

/// Coefficient of determination of `pred` against `truth`.
pub fn r_squared(pred: &[f64], truth: &[f64]) -> f64 {
    let n = truth.len() as f64;
    let m = truth.iter().sum::<f64>() / n;
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (t - p).powi(2)).sum();
    let ss_tot: f64 = truth.iter().map(|t| (t - m).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

/// Shuffled split of `0..n` into (train, test) with `n_test` test indices,
/// both returned sorted.
pub fn train_test_split(n: usize, n_test: usize, stream: RandomStream) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_test == 0 || n_test >= n {
        return Err(Error::param(format!("n_test must lie in [1, {}], got {n_test}", n.saturating_sub(1))));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut stream.rng());
    let mut test = perm[..n_test].to_vec();
    let mut train = perm[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

fn forming_rules() -> PhaseRules {
    PhaseRules {
        marker: Some(Marker {
            sensor: "power".into(),
            threshold: 5.0,
        }),
        phases: vec![
            PhaseWindow {
                name: "heating".into(),
                start: 0.0,
                end: Some(4.0),
            },
            PhaseWindow {
                name: "forming".into(),
                start: 4.0,
                end: None,
            },
        ],
    }
}

/// Sensor ids of the default forging benchmark.
pub const FORGING_SENSORS: [&str; 12] = [
    "power",
    "temp_1",
    "temp_2",
    "force_left",
    "force_right",
    "chuck_speed",
    "hammer_speed",
    "temp_1_dup",
    "force_left_dup",
    "power_dup",
    "noise_1",
    "noise_2",
];

fn forest() -> LearningProblem {
    LearningProblem::regression(ml::Family::Forest {
        n_trees: 100,
        max_depth: None,
        min_leaf: 2,
        feature_fraction: ml::DEFAULT_FEATURE_FRACTION,
        bootstrap: true,
    })
}

/// Candidate forest pipelines for the forging benchmark.
pub fn forging_candidates() -> Vec<PipelineSpec> {
    let per_sensor = |features: Vec<FeatureSpec>| -> Vec<ExtractionSpec> {
        FORGING_SENSORS
            .iter()
            .map(|s| ExtractionSpec {
                sensor: s.to_string(),
                phase: Some("forming".into()),
                features: features.clone(),
            })
            .collect()
    };
    let mut segments = per_sensor(vec![FeatureSpec::SegmentMeans { segments: 5 }]);
    segments.push(ExtractionSpec {
        sensor: "temp_1".into(),
        phase: None,
        features: vec![FeatureSpec::Drop {
            from: "heating".into(),
            to: "forming".into(),
        }],
    });
    vec![
        PipelineSpec {
            name: "moments-top12-forest".into(),
            preprocess: Vec::new(),
            segmentation: Some(forming_rules()),
            extraction: per_sensor(vec![FeatureSpec::Moments]),
            selection: Some(PearsonTopK { k: 12 }),
            reduction: None,
            learner: forest(),
        },
        PipelineSpec {
            name: "segments-top10-forest".into(),
            preprocess: Vec::new(),
            segmentation: Some(forming_rules()),
            extraction: segments,
            selection: Some(PearsonTopK { k: 10 }),
            reduction: None,
            learner: forest(),
        },
        PipelineSpec {
            name: "moments-pca5-forest".into(),
            preprocess: Vec::new(),
            segmentation: Some(forming_rules()),
            extraction: per_sensor(vec![FeatureSpec::Moments]),
            selection: None,
            reduction: Some(Reduction { n_components: 5 }),
            learner: forest(),
        },
    ]
}

/// Tikhonov weight for the grey-box deconvolution preset.
pub const GREYBOX_LAMBDA: f64 = 1e-2;

/// Moments of the single grey-box sensor fed to ridge regression, optionally
/// after deconvolving the known sensor dynamics.
pub fn greybox_spec(deconvolve: bool) -> PipelineSpec {
    PipelineSpec {
        name: if deconvolve { "deconvolved-moments-ridge" } else { "moments-ridge" }.into(),
        preprocess: if deconvolve {
            vec![Deconvolution {
                sensor: "sensor".into(),
                delta: crate::sim::GREYBOX_DELTA,
                omega0: crate::sim::GREYBOX_OMEGA0,
                rho: None,
                lambda: GREYBOX_LAMBDA,
                length: None,
            }]
        } else {
            Vec::new()
        },
        segmentation: None,
        extraction: vec![ExtractionSpec {
            sensor: "sensor".into(),
            phase: None,
            features: vec![FeatureSpec::Moments],
        }],
        selection: None,
        reduction: None,
        learner: LearningProblem::regression(ml::Family::Ridge { lambda: 1e-8 }),
    }
}
