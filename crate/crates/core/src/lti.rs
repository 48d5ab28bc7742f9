//! Linear time-invariant sensor dynamics.
//!
//! A second-order sensor obeys `Z'' + 2δω₀Z' + ω₀²Z = ρY`. The same system is
//! available as a sampled impulse response (driven by discrete convolution) and
//! as a companion state-space realisation `V' = CV + DY`, `Z = EV + FY`. All
//! simulations start from rest.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// Largest admissible `dt·ω₀` when sampling a second-order response.
pub const MAX_DT_OMEGA: f64 = 0.5;
const INSTABILITY_BOUND: f64 = 1e12;

/// Uniformly sampled signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    pub samples: Vec<f64>,
    pub dt: f64,
    pub t0: f64,
}

impl Signal {
    pub fn new(samples: Vec<f64>, dt: f64, t0: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::param(format!("dt must be positive, got {dt}")));
        }
        if !t0.is_finite() {
            return Err(Error::param("t0 must be finite"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("sample {i} is not finite")));
        }
        Ok(Self { samples, dt, t0 })
    }

    /// Sample `f` at `t0 + k·dt` for `k < n`.
    pub fn from_fn(n: usize, dt: f64, t0: f64, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new((0..n).map(|k| f(t0 + k as f64 * dt)).collect(), dt, t0)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn end_time(&self) -> f64 {
        self.time(self.len().saturating_sub(1))
    }

    /// Linear interpolation at `t`, clamped to the end samples.
    pub fn value_at(&self, t: f64) -> f64 {
        interpolate_index(&self.samples, (t - self.t0) / self.dt)
    }

    /// Read a two-column CSV with header `t,value`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let table = io::read_numeric_csv(path)?;
        io::expect_headers(path, &table, &["t", "value"])?;
        let times: Vec<f64> = table.rows.iter().map(|r| r[0]).collect();
        let dt = uniform_step(&times).map_err(|msg| Error::Csv {
            path: path.display().to_string(),
            line: 1,
            message: msg,
        })?;
        Self::new(table.rows.iter().map(|r| r[1]).collect(), dt, times[0])
    }

    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<Vec<f64>> = self
            .samples
            .iter()
            .enumerate()
            .map(|(k, v)| vec![self.time(k), *v])
            .collect();
        io::write_numeric_csv(path, &["t".into(), "value".into()], &rows)
    }
}

/// Infer the sample interval of a time column and check uniformity to 1e-9 relative.
pub(crate) fn uniform_step(times: &[f64]) -> std::result::Result<f64, String> {
    if times.len() < 2 {
        return Err("at least two samples are needed to infer dt".into());
    }
    let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
    if !(dt > 0.0) {
        return Err(format!("time column is not increasing (dt = {dt})"));
    }
    for (k, w) in times.windows(2).enumerate() {
        let step = w[1] - w[0];
        if (step - dt).abs() > 1e-9 * dt {
            return Err(format!("non-uniform sampling at row {}: step {step} vs dt {dt}", k + 2));
        }
    }
    Ok(dt)
}

/// Linear interpolation at fractional index `pos`, clamped to the ends.
pub(crate) fn interpolate_index(samples: &[f64], pos: f64) -> f64 {
    let last = samples.len() - 1;
    if pos <= 0.0 {
        return samples[0];
    }
    if pos >= last as f64 {
        return samples[last];
    }
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if frac == 0.0 {
        samples[i]
    } else {
        samples[i] + frac * (samples[i + 1] - samples[i])
    }
}

/// Damped second-order sensor `Z'' + 2δω₀Z' + ω₀²Z = ρY`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondOrderSystem {
    pub delta: f64,
    pub omega0: f64,
    pub rho: f64,
}

impl SecondOrderSystem {
    pub fn new(delta: f64, omega0: f64, rho: f64) -> Result<Self> {
        let sys = Self { delta, omega0, rho };
        sys.validate()?;
        Ok(sys)
    }

    /// System with unit static gain (`ρ = ω₀²`).
    pub fn unit_gain(delta: f64, omega0: f64) -> Result<Self> {
        Self::new(delta, omega0, omega0 * omega0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega0.is_finite() && self.omega0 > 0.0) {
            return Err(Error::param(format!("omega0 must be positive, got {}", self.omega0)));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(Error::param(format!("delta must be >= 0, got {}", self.delta)));
        }
        if !(self.rho.is_finite() && self.rho != 0.0) {
            return Err(Error::param(format!("rho must be finite and non-zero, got {}", self.rho)));
        }
        Ok(())
    }

    pub fn static_gain(&self) -> f64 {
        self.rho / (self.omega0 * self.omega0)
    }

    /// Continuous-time impulse response `h(t)` for `t ≥ 0`.
    pub fn impulse_at(&self, t: f64) -> f64 {
        let SecondOrderSystem { delta, omega0, rho } = *self;
        if delta < 1.0 {
            let wd = omega0 * (1.0 - delta * delta).sqrt();
            rho / wd * (-delta * omega0 * t).exp() * (wd * t).sin()
        } else if delta == 1.0 {
            rho * t * (-omega0 * t).exp()
        } else {
            let root = (delta * delta - 1.0).sqrt();
            let s1 = -omega0 * (delta - root);
            let s2 = -omega0 * (delta + root);
            rho / (s1 - s2) * ((s1 * t).exp() - (s2 * t).exp())
        }
    }

    /// Number of samples after which the response envelope has decayed by
    /// `e^-20`, capped at `max_len`. Undamped systems use `max_len`.
    pub fn settling_samples(&self, dt: f64, max_len: usize) -> usize {
        let rate = if self.delta < 1.0 {
            self.delta * self.omega0
        } else {
            self.omega0 * (self.delta - (self.delta * self.delta - 1.0).sqrt())
        };
        if rate <= 0.0 {
            return max_len;
        }
        ((20.0 / rate / dt).ceil() as usize + 1).min(max_len).max(1)
    }
}

/// Sampled impulse response `h[k] = h(k·dt)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpulseResponse {
    pub h: Vec<f64>,
    pub dt: f64,
}

impl ImpulseResponse {
    pub fn new(h: Vec<f64>, dt: f64) -> Result<Self> {
        if h.is_empty() {
            return Err(Error::param("impulse response needs at least one sample"));
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("impulse response must be finite"));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::param(format!("dt must be positive, got {dt}")));
        }
        Ok(Self { h, dt })
    }

    /// Discrete identity: `h[0] = 1/dt`.
    pub fn delta(dt: f64) -> Result<Self> {
        Self::new(vec![1.0 / dt], dt)
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }
}

/// Sample the closed-form impulse response of `sys`.
pub fn impulse_response(sys: &SecondOrderSystem, dt: f64, n: usize) -> Result<ImpulseResponse> {
    sys.validate()?;
    if !(dt.is_finite() && dt > 0.0) || n == 0 {
        return Err(Error::param(format!("need dt > 0 and n >= 1, got dt = {dt}, n = {n}")));
    }
    if dt * sys.omega0 >= MAX_DT_OMEGA {
        return Err(Error::Aliasing(format!(
            "dt·omega0 = {:.4} must stay below {MAX_DT_OMEGA}",
            dt * sys.omega0
        )));
    }
    ImpulseResponse::new((0..n).map(|k| sys.impulse_at(k as f64 * dt)).collect(), dt)
}

fn check_dt(a: f64, b: f64) -> Result<()> {
    if (a - b).abs() > 1e-12 * a.abs().max(b.abs()) {
        return Err(Error::ResamplingRequired(format!("dt {a} differs from {b}")));
    }
    Ok(())
}

/// Causal discrete convolution `Z[k] = dt·Σ_j h[k−j]·Y[j]`, output length equal to the input.
pub fn convolve(h: &ImpulseResponse, input: &Signal) -> Result<Signal> {
    check_dt(h.dt, input.dt)?;
    let y = &input.samples;
    let nh = h.h.len();
    let out = (0..y.len())
        .map(|k| {
            let lo = (k + 1).saturating_sub(nh);
            let mut acc = 0.0;
            for j in lo..=k {
                acc += h.h[k - j] * y[j];
            }
            acc * h.dt
        })
        .collect();
    Ok(Signal {
        samples: out,
        dt: input.dt,
        t0: input.t0,
    })
}

/// Linear state-space model `V' = state·V + input·Y`, `Z = output·V + feedthrough·Y`.
///
/// The four matrices correspond to `C`, `D`, `E` and `F` in the usual metrology
/// notation for this form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpaceModel {
    pub state: DMatrix<f64>,
    pub input: DMatrix<f64>,
    pub output: DMatrix<f64>,
    pub feedthrough: DMatrix<f64>,
}

impl StateSpaceModel {
    pub fn new(
        state: DMatrix<f64>,
        input: DMatrix<f64>,
        output: DMatrix<f64>,
        feedthrough: DMatrix<f64>,
    ) -> Result<Self> {
        let m = Self {
            state,
            input,
            output,
            feedthrough,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state.nrows();
        let p = self.input.ncols();
        let q = self.output.nrows();
        let ok = self.state.ncols() == n
            && self.input.nrows() == n
            && self.output.ncols() == n
            && self.feedthrough.nrows() == q
            && self.feedthrough.ncols() == p;
        if !ok {
            return Err(Error::Shape(format!(
                "inconsistent state-space shapes: state {}x{}, input {}x{}, output {}x{}, feedthrough {}x{}",
                self.state.nrows(),
                self.state.ncols(),
                self.input.nrows(),
                self.input.ncols(),
                self.output.nrows(),
                self.output.ncols(),
                self.feedthrough.nrows(),
                self.feedthrough.ncols()
            )));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.state.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.input.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.output.nrows()
    }

    /// Largest real part among the eigenvalues of the state matrix.
    pub fn spectral_abscissa(&self) -> f64 {
        if self.state_dim() == 0 {
            return f64::NEG_INFINITY;
        }
        self.state
            .complex_eigenvalues()
            .iter()
            .map(|c| c.re)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Simulate from rest with one signal per input channel; returns one signal per output.
    ///
    /// Each step is classical fourth-order Runge-Kutta with the input held
    /// constant over the step. For a linear system with held input RK4
    /// collapses to `V ← Φ·V + Γ·u` with the truncated exponential series
    /// below, which is what is evaluated.
    pub fn simulate(&self, inputs: &[Signal]) -> Result<Vec<Signal>> {
        self.validate()?;
        if inputs.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "model has {} inputs, got {} signals",
                self.input_dim(),
                inputs.len()
            )));
        }
        let Some(first) = inputs.first() else {
            return Err(Error::Shape("at least one input signal is required".into()));
        };
        for s in &inputs[1..] {
            check_dt(first.dt, s.dt)?;
            if s.len() != first.len() {
                return Err(Error::Shape("input signals differ in length".into()));
            }
        }
        let dt = first.dt;
        let n = self.state_dim();
        let a = &self.state * dt;
        let eye = DMatrix::<f64>::identity(n, n);
        let a2 = &a * &a;
        let a3 = &a2 * &a;
        let a4 = &a3 * &a;
        let phi = &eye + &a + &a2 * 0.5 + &a3 * (1.0 / 6.0) + &a4 * (1.0 / 24.0);
        let gamma = (&eye + &a * 0.5 + &a2 * (1.0 / 6.0) + &a3 * (1.0 / 24.0)) * &self.input * dt;

        let len = first.len();
        let mut v = DVector::<f64>::zeros(n);
        let mut u = DVector::<f64>::zeros(self.input_dim());
        let mut out = vec![Vec::with_capacity(len); self.output_dim()];
        for k in 0..len {
            for (c, s) in inputs.iter().enumerate() {
                u[c] = s.samples[k];
            }
            let z = &self.output * &v + &self.feedthrough * &u;
            for (o, zo) in out.iter_mut().zip(z.iter()) {
                o.push(*zo);
            }
            v = &phi * &v + &gamma * &u;
            if v.iter().any(|x| !x.is_finite() || x.abs() > INSTABILITY_BOUND) {
                return Err(Error::Instability {
                    abscissa: self.spectral_abscissa(),
                });
            }
        }
        Ok(out
            .into_iter()
            .map(|samples| Signal {
                samples,
                dt,
                t0: first.t0,
            })
            .collect())
    }
}

/// Companion realisation with states `(Z, Z')`.
pub fn to_state_space(sys: &SecondOrderSystem) -> Result<StateSpaceModel> {
    sys.validate()?;
    let w2 = sys.omega0 * sys.omega0;
    StateSpaceModel::new(
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -w2, -2.0 * sys.delta * sys.omega0]),
        DMatrix::from_row_slice(2, 1, &[0.0, sys.rho]),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        DMatrix::zeros(1, 1),
    )
}

/// Single-input single-output simulation.
pub fn simulate_state_space(model: &StateSpaceModel, input: &Signal) -> Result<Signal> {
    if model.input_dim() != 1 || model.output_dim() != 1 {
        return Err(Error::Shape(format!(
            "single-channel simulation needs a 1-in/1-out model, got {} in / {} out",
            model.input_dim(),
            model.output_dim()
        )));
    }
    Ok(model.simulate(std::slice::from_ref(input))?.remove(0))
}

/// Lower band of a symmetric positive definite matrix, `rows[i][d] = A[i][i-d]`.
struct BandMatrix {
    n: usize,
    width: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    fn zeros(n: usize, width: usize) -> Self {
        Self {
            n,
            width,
            data: vec![0.0; n * (width + 1)],
        }
    }

    #[inline]
    fn idx(&self, i: usize, d: usize) -> usize {
        i * (self.width + 1) + d
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i >= j && i - j <= self.width);
        let k = self.idx(i, i - j);
        self.data[k] += v;
    }

    /// In-place banded Cholesky; returns the smallest and largest pivot.
    fn cholesky(&mut self) -> std::result::Result<(f64, f64), usize> {
        let w = self.width;
        let (mut pmin, mut pmax) = (f64::INFINITY, 0.0f64);
        for i in 0..self.n {
            let lo = i.saturating_sub(w);
            for j in lo..=i {
                let klo = lo.max(j.saturating_sub(w));
                let mut s = self.data[self.idx(i, i - j)];
                for k in klo..j {
                    s -= self.data[self.idx(i, i - k)] * self.data[self.idx(j, j - k)];
                }
                if i == j {
                    if !(s > 0.0) {
                        return Err(i);
                    }
                    let p = s.sqrt();
                    pmin = pmin.min(p);
                    pmax = pmax.max(p);
                    let k = self.idx(i, 0);
                    self.data[k] = p;
                } else {
                    let k = self.idx(i, i - j);
                    self.data[k] = s / self.data[self.idx(j, 0)];
                }
            }
        }
        Ok((pmin, pmax))
    }

    fn solve(&self, rhs: &mut [f64]) {
        let w = self.width;
        for i in 0..self.n {
            let mut s = rhs[i];
            for k in i.saturating_sub(w)..i {
                s -= self.data[self.idx(i, i - k)] * rhs[k];
            }
            rhs[i] = s / self.data[self.idx(i, 0)];
        }
        for i in (0..self.n).rev() {
            let mut s = rhs[i];
            for k in (i + 1)..(i + w + 1).min(self.n) {
                s -= self.data[self.idx(k, k - i)] * rhs[k];
            }
            rhs[i] = s / self.data[self.idx(i, 0)];
        }
    }
}

/// Tikhonov-regularised deconvolution.
///
/// Minimises `‖H·y − z‖² + λ‖L·y‖²` with `H` the causal convolution operator of
/// `h` and `L` the second-difference operator, by a banded Cholesky solve of
/// the normal equations.
pub fn deconvolve(h: &ImpulseResponse, output: &Signal, lambda_reg: f64) -> Result<Signal> {
    check_dt(h.dt, output.dt)?;
    if !(lambda_reg.is_finite() && lambda_reg >= 0.0) {
        return Err(Error::param(format!("lambda must be >= 0, got {lambda_reg}")));
    }
    let n = output.len();
    if n == 0 {
        return Err(Error::InsufficientData("cannot deconvolve an empty signal".into()));
    }
    let hmax = h.h.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if lambda_reg == 0.0 && h.h[0].abs() <= 1e-12 * hmax {
        return Err(Error::IllPosed(
            "h[0] vanishes so the convolution operator is singular; use lambda > 0".into(),
        ));
    }
    let dt = h.dt;
    let nh = h.h.len().min(n);
    let width = (nh - 1).max(2).min(n - 1);
    let mut a = BandMatrix::zeros(n, width);
    let hk = |m: usize| if m < nh { h.h[m] * dt } else { 0.0 };

    // (HᵀH)[i][i+d] = (HᵀH)[i+1][i+1+d] + H[n-1][i]·H[n-1][i+d]
    for d in 0..nh.min(n) {
        let mut acc = 0.0;
        for i in (0..n - d).rev() {
            let j = i + d;
            acc += hk(n - 1 - i) * hk(n - 1 - j);
            a.add(j, i, acc);
        }
    }
    if n >= 3 && lambda_reg > 0.0 {
        for r in 0..n - 2 {
            let taps = [(r, 1.0), (r + 1, -2.0), (r + 2, 1.0)];
            for &(i, ci) in &taps {
                for &(j, cj) in &taps {
                    if i >= j {
                        a.add(i, j, lambda_reg * ci * cj);
                    }
                }
            }
        }
    }
    let mut rhs: Vec<f64> = (0..n)
        .map(|j| (j..n.min(j + nh)).map(|k| hk(k - j) * output.samples[k]).sum())
        .collect();

    match a.cholesky() {
        Err(row) => {
            return Err(Error::IllPosed(format!(
                "normal matrix is singular at row {row}; increase lambda"
            )))
        }
        Ok((pmin, pmax)) => {
            if lambda_reg == 0.0 && pmin <= 1e-8 * pmax {
                return Err(Error::IllPosed(format!(
                    "pivot ratio {:.3e} makes the unregularised inversion unstable; use lambda > 0",
                    pmin / pmax
                )));
            }
        }
    }
    a.solve(&mut rhs);
    Signal::new(rhs, output.dt, output.t0)
}

/// Seminorm `‖L·y‖` of a signal under the second-difference operator.
pub fn roughness(signal: &Signal) -> f64 {
    signal
        .samples
        .windows(3)
        .map(|w| (w[0] - 2.0 * w[1] + w[2]).powi(2))
        .sum::<f64>()
        .sqrt()
}
