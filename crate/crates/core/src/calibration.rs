//! Parametric forward models `Z = φ(Y, β)`, their inversion into measurement
//! models, and weighted least-squares calibration.
//!
//! Parameters are laid out per family:
//!
//! * `Affine`: `(gain, offset)`, `φ(y) = gain·y + offset`
//! * `Polynomial { degree }`: `(c0, c1, …, c_degree)`, `φ(y) = Σ c_k y^k`
//! * `Composed(stages)`: the stage parameter vectors concatenated, stages
//!   applied in order so the output of one is the input of the next.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::uncertain::UncertainVector;

pub const MAX_POLYNOMIAL_DEGREE: usize = 5;
pub const MAX_ITERATIONS: usize = 200;
const RELATIVE_COST_TOLERANCE: f64 = 1e-12;
const GRADIENT_TOLERANCE: f64 = 1e-10;
const INVERSION_GRID: usize = 129;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ForwardModel {
    Affine,
    Polynomial { degree: usize },
    Composed { stages: Vec<ForwardModel> },
}

impl ForwardModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            ForwardModel::Affine => Ok(()),
            ForwardModel::Polynomial { degree } if *degree > MAX_POLYNOMIAL_DEGREE => Err(
                Error::param(format!("polynomial degree {degree} exceeds {MAX_POLYNOMIAL_DEGREE}")),
            ),
            ForwardModel::Polynomial { .. } => Ok(()),
            ForwardModel::Composed { stages } if stages.is_empty() => {
                Err(Error::param("composed model needs at least one stage"))
            }
            ForwardModel::Composed { stages } => stages.iter().try_for_each(Self::validate),
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            ForwardModel::Affine => 2,
            ForwardModel::Polynomial { degree } => degree + 1,
            ForwardModel::Composed { stages } => stages.iter().map(Self::parameter_count).sum(),
        }
    }

    fn check_beta(&self, beta: &[f64]) -> Result<()> {
        self.validate()?;
        if beta.len() != self.parameter_count() {
            return Err(Error::param(format!(
                "model takes {} parameters, got {}",
                self.parameter_count(),
                beta.len()
            )));
        }
        Ok(())
    }

    fn eval_unchecked(&self, y: f64, beta: &[f64]) -> f64 {
        match self {
            ForwardModel::Affine => beta[0] * y + beta[1],
            ForwardModel::Polynomial { .. } => beta.iter().rev().fold(0.0, |acc, c| acc * y + c),
            ForwardModel::Composed { stages } => {
                let mut value = y;
                let mut offset = 0;
                for stage in stages {
                    let n = stage.parameter_count();
                    value = stage.eval_unchecked(value, &beta[offset..offset + n]);
                    offset += n;
                }
                value
            }
        }
    }

    /// `dφ/dy`, exact for every family.
    fn slope_unchecked(&self, y: f64, beta: &[f64]) -> f64 {
        match self {
            ForwardModel::Affine => beta[0],
            ForwardModel::Polynomial { .. } => beta
                .iter()
                .enumerate()
                .skip(1)
                .rev()
                .fold(0.0, |acc, (k, c)| acc * y + k as f64 * c),
            ForwardModel::Composed { stages } => {
                let mut value = y;
                let mut slope = 1.0;
                let mut offset = 0;
                for stage in stages {
                    let n = stage.parameter_count();
                    let b = &beta[offset..offset + n];
                    slope *= stage.slope_unchecked(value, b);
                    value = stage.eval_unchecked(value, b);
                    offset += n;
                }
                slope
            }
        }
    }

    /// Row of `∂φ/∂β` at `y`: analytic for affine and polynomial families,
    /// central differences for composed chains.
    fn parameter_gradient(&self, y: f64, beta: &[f64]) -> Vec<f64> {
        match self {
            ForwardModel::Affine => vec![y, 1.0],
            ForwardModel::Polynomial { degree } => {
                let mut row = Vec::with_capacity(degree + 1);
                let mut p = 1.0;
                for _ in 0..=*degree {
                    row.push(p);
                    p *= y;
                }
                row
            }
            ForwardModel::Composed { .. } => {
                let mut work = beta.to_vec();
                (0..beta.len())
                    .map(|j| {
                        let h = 1e-6 * (1.0 + beta[j].abs());
                        work[j] = beta[j] + h;
                        let up = self.eval_unchecked(y, &work);
                        work[j] = beta[j] - h;
                        let down = self.eval_unchecked(y, &work);
                        work[j] = beta[j];
                        (up - down) / (2.0 * h)
                    })
                    .collect()
            }
        }
    }
}

/// Evaluate `φ(y, β)`.
pub fn eval_forward(model: &ForwardModel, y: f64, beta: &[f64]) -> Result<f64> {
    model.check_beta(beta)?;
    Ok(model.eval_unchecked(y, beta))
}

/// Solve `φ(y, β) = z` for `y` inside `bracket`.
pub fn invert_model(model: &ForwardModel, z: f64, beta: &[f64], bracket: (f64, f64)) -> Result<f64> {
    model.check_beta(beta)?;
    let (lo, hi) = bracket;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::param(format!("bracket [{lo}, {hi}] is not a finite interval")));
    }
    let tol = 1e-12 * z.abs().max(1.0);

    if let ForwardModel::Affine = model {
        if beta[0] == 0.0 {
            return Err(Error::Invertibility("affine gain is zero".into()));
        }
        let y = (z - beta[1]) / beta[0];
        if !(lo..=hi).contains(&y) {
            return Err(Error::Range(format!("z = {z} maps to y = {y} outside [{lo}, {hi}]")));
        }
        return Ok(y);
    }

    let grid: Vec<f64> = (0..INVERSION_GRID)
        .map(|i| lo + (hi - lo) * i as f64 / (INVERSION_GRID - 1) as f64)
        .collect();
    let values: Vec<f64> = grid.iter().map(|&y| model.eval_unchecked(y, beta)).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invertibility("model is not finite on the bracket".into()));
    }
    let increasing = values.windows(2).all(|w| w[1] > w[0]);
    let decreasing = values.windows(2).all(|w| w[1] < w[0]);
    if !(increasing || decreasing) {
        let turns = values
            .windows(3)
            .filter(|w| (w[1] - w[0]) * (w[2] - w[1]) <= 0.0)
            .count();
        return Err(Error::Invertibility(format!(
            "model changes direction {turns} time(s) on [{lo}, {hi}]"
        )));
    }
    let (vmin, vmax) = if increasing {
        (values[0], values[INVERSION_GRID - 1])
    } else {
        (values[INVERSION_GRID - 1], values[0])
    };
    if z < vmin - tol || z > vmax + tol {
        return Err(Error::Range(format!(
            "z = {z} is outside the image [{vmin}, {vmax}] of the bracket"
        )));
    }

    let g = |y: f64| model.eval_unchecked(y, beta) - z;
    // Locate the grid cell holding the single sign change.
    let cell = values
        .windows(2)
        .position(|w| (w[0] - z) * (w[1] - z) <= 0.0)
        .unwrap_or(0);
    let (mut a, mut b) = (grid[cell], grid[cell + 1]);
    let (ga, _gb) = (g(a), g(b));
    if ga.abs() <= tol {
        return Ok(a);
    }
    let rising = increasing;
    let mut y = 0.5 * (a + b);
    for _ in 0..200 {
        let gy = g(y);
        if gy.abs() <= tol {
            return Ok(y);
        }
        if (gy > 0.0) == rising {
            b = y;
        } else {
            a = y;
        }
        let slope = model.slope_unchecked(y, beta);
        let newton = if slope != 0.0 { y - gy / slope } else { f64::NAN };
        let next = if newton.is_finite() && newton > a && newton < b {
            newton
        } else {
            0.5 * (a + b)
        };
        if next == y || b - a <= f64::EPSILON * y.abs().max(f64::MIN_POSITIVE) {
            break;
        }
        y = next;
    }
    // Interval exhausted at floating resolution: return the better endpoint.
    let best = [a, y, b]
        .into_iter()
        .min_by(|p, q| g(*p).abs().total_cmp(&g(*q).abs()))
        .unwrap_or(y);
    Ok(best)
}

/// One calibration observation: stimulus, indicated response and its standard uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub eta: f64,
    pub xi: f64,
    pub u_xi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDataset {
    points: Vec<CalibrationPoint>,
}

impl CalibrationDataset {
    pub fn new(points: Vec<CalibrationPoint>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !(p.eta.is_finite() && p.xi.is_finite()) {
                return Err(Error::Data(format!("point {i} is not finite")));
            }
            if !(p.u_xi.is_finite() && p.u_xi > 0.0) {
                return Err(Error::Data(format!("point {i} has u(xi) = {} (must be > 0)", p.u_xi)));
            }
        }
        Ok(Self { points })
    }

    /// Build from `(eta, xi, u_xi)` triples.
    pub fn from_triples(triples: &[(f64, f64, f64)]) -> Result<Self> {
        Self::new(
            triples
                .iter()
                .map(|&(eta, xi, u_xi)| CalibrationPoint { eta, xi, u_xi })
                .collect(),
        )
    }

    /// Read a CSV with header `eta,xi,u_xi`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let table = io::read_numeric_csv(path)?;
        io::expect_headers(path, &table, &["eta", "xi", "u_xi"])?;
        Self::new(
            table
                .rows
                .iter()
                .map(|r| CalibrationPoint {
                    eta: r[0],
                    xi: r[1],
                    u_xi: r[2],
                })
                .collect(),
        )
    }

    pub fn points(&self) -> &[CalibrationPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// Parameter estimates with their covariance `(JᵀWJ)⁻¹`.
    pub b: UncertainVector,
    /// `ξ_i − φ(η_i, b)`, unweighted.
    pub residuals: Vec<f64>,
    pub chi_square: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Weighted least-squares cost `Σ((ξ_i − φ(η_i, β))/u(ξ_i))²`.
pub fn calibration_cost(model: &ForwardModel, data: &CalibrationDataset, beta: &[f64]) -> Result<f64> {
    model.check_beta(beta)?;
    Ok(cost_unchecked(model, data, beta))
}

fn cost_unchecked(model: &ForwardModel, data: &CalibrationDataset, beta: &[f64]) -> f64 {
    data.points
        .iter()
        .map(|p| ((p.xi - model.eval_unchecked(p.eta, beta)) / p.u_xi).powi(2))
        .sum()
}

/// Normal matrix `JᵀWJ` and `JᵀW r` at `beta`.
fn normal_system(
    model: &ForwardModel,
    data: &CalibrationDataset,
    beta: &[f64],
) -> (DMatrix<f64>, DVector<f64>) {
    let p = beta.len();
    let mut a = DMatrix::zeros(p, p);
    let mut g = DVector::zeros(p);
    for pt in &data.points {
        let w = 1.0 / (pt.u_xi * pt.u_xi);
        let row = model.parameter_gradient(pt.eta, beta);
        let r = pt.xi - model.eval_unchecked(pt.eta, beta);
        for i in 0..p {
            g[i] += w * row[i] * r;
            for j in 0..p {
                a[(i, j)] += w * row[i] * row[j];
            }
        }
    }
    (a, g)
}

fn invert_normal(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(a.clone());
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    if !(lmax > 0.0) || lmin <= 1e-14 * lmax {
        return Err(Error::RankDeficient(format!(
            "JᵀWJ eigenvalues span [{lmin:.3e}, {lmax:.3e}]"
        )));
    }
    a.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::RankDeficient("JᵀWJ is not positive definite".into()))
}

/// Minimise the weighted least-squares cost by damped Gauss-Newton.
///
/// Stops when the relative cost decrease drops below `1e-12` or the gradient
/// ∞-norm below `1e-10`. Hitting the iteration cap is reported through
/// `converged = false`, not as an error.
pub fn calibrate_least_squares(
    model: &ForwardModel,
    data: &CalibrationDataset,
    beta0: &[f64],
) -> Result<CalibrationResult> {
    model.check_beta(beta0)?;
    if beta0.iter().any(|b| !b.is_finite()) {
        return Err(Error::param("initial parameters must be finite"));
    }
    let p = model.parameter_count();
    if data.len() < p {
        return Err(Error::Data(format!(
            "{} points cannot identify {p} parameters",
            data.len()
        )));
    }

    let mut beta = beta0.to_vec();
    let mut cost = cost_unchecked(model, data, &beta);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let (a, g) = normal_system(model, data, &beta);
        if 2.0 * g.amax() < GRADIENT_TOLERANCE {
            converged = true;
            break;
        }
        let inv = invert_normal(&a)?;
        let step = inv * g;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let candidate: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + t * s).collect();
            let c = cost_unchecked(model, data, &candidate);
            if c <= cost {
                accepted = Some((candidate, c));
                break;
            }
            t *= 0.5;
        }
        let Some((candidate, new_cost)) = accepted else {
            converged = true;
            break;
        };
        let decrease = if cost > 0.0 { (cost - new_cost) / cost } else { 0.0 };
        beta = candidate;
        cost = new_cost;
        if cost == 0.0 || decrease < RELATIVE_COST_TOLERANCE {
            converged = true;
            break;
        }
    }

    let (a, _) = normal_system(model, data, &beta);
    let covariance = invert_normal(&a)?;
    let covariance = (&covariance + covariance.transpose()) * 0.5;
    let residuals = data
        .points
        .iter()
        .map(|pt| pt.xi - model.eval_unchecked(pt.eta, &beta))
        .collect();
    Ok(CalibrationResult {
        b: UncertainVector::new(DVector::from_vec(beta), covariance)?,
        residuals,
        chi_square: cost,
        converged,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Closed-form weighted straight-line fit, solved as a direct 2x2 system.
    fn weighted_line(points: &[(f64, f64, f64)]) -> ([f64; 2], [[f64; 2]; 2]) {
        let (mut sw, mut sx, mut sxx, mut sy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(x, y, u) in points {
            let w = 1.0 / (u * u);
            sw += w;
            sx += w * x;
            sxx += w * x * x;
            sy += w * y;
            sxy += w * x * y;
        }
        let det = sxx * sw - sx * sx;
        let gain = (sw * sxy - sx * sy) / det;
        let offset = (sxx * sy - sx * sxy) / det;
        (
            [gain, offset],
            [[sw / det, -sx / det], [-sx / det, sxx / det]],
        )
    }

    #[test]
    fn eval_examples() {
        assert_eq!(eval_forward(&ForwardModel::Affine, 3.0, &[1.0, 0.0]).unwrap(), 3.0);
        assert_eq!(eval_forward(&ForwardModel::Affine, 3.0, &[2.0, 1.0]).unwrap(), 7.0);
        let quad = ForwardModel::Polynomial { degree: 2 };
        assert_eq!(eval_forward(&quad, -2.0, &[0.0, 0.0, 1.0]).unwrap(), 4.0);
        assert!(matches!(
            eval_forward(&ForwardModel::Affine, 1.0, &[1.0]),
            Err(Error::Parameter(_))
        ));
        assert!(ForwardModel::Polynomial { degree: 6 }.validate().is_err());
        assert!(ForwardModel::Composed { stages: vec![] }.validate().is_err());
    }

    #[test]
    fn composed_applies_stages_in_order() {
        let m = ForwardModel::Composed {
            stages: vec![ForwardModel::Affine, ForwardModel::Polynomial { degree: 2 }],
        };
        assert_eq!(m.parameter_count(), 5);
        // (2y + 1)^2 at y = 1
        assert_eq!(eval_forward(&m, 1.0, &[2.0, 1.0, 0.0, 0.0, 1.0]).unwrap(), 9.0);
    }

    #[test]
    fn inversion_examples() {
        assert_eq!(invert_model(&ForwardModel::Affine, 7.0, &[2.0, 1.0], (-10.0, 10.0)).unwrap(), 3.0);
        let cube = ForwardModel::Polynomial { degree: 3 };
        let y = invert_model(&cube, 8.0, &[0.0, 0.0, 0.0, 1.0], (0.0, 3.0)).unwrap();
        assert!((y - 2.0).abs() < 1e-12, "{y}");
        assert!(matches!(
            invert_model(&cube, 30.0, &[0.0, 0.0, 0.0, 1.0], (0.0, 3.0)),
            Err(Error::Range(_))
        ));
        let square = ForwardModel::Polynomial { degree: 2 };
        assert!(matches!(
            invert_model(&square, 1.0, &[0.0, 0.0, 1.0], (-2.0, 2.0)),
            Err(Error::Invertibility(_))
        ));
        assert!(matches!(
            invert_model(&ForwardModel::Affine, 1.0, &[0.0, 1.0], (-2.0, 2.0)),
            Err(Error::Invertibility(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn inversion_round_trip(
            c1 in 0.5f64..3.0,
            c3 in 0.01f64..1.0,
            c0 in -5.0f64..5.0,
            sign in prop::bool::ANY,
            y in -1.9f64..1.9,
        ) {
            // c1 + 3 c3 y^2 > 0 keeps the cubic strictly monotone.
            let s = if sign { 1.0 } else { -1.0 };
            let beta = [c0, s * c1, 0.0, s * c3];
            let model = ForwardModel::Polynomial { degree: 3 };
            let z = eval_forward(&model, y, &beta).unwrap();
            let back = invert_model(&model, z, &beta, (-2.0, 2.0)).unwrap();
            prop_assert!((back - y).abs() < 1e-10, "y = {y}, back = {back}");
            let resid = (eval_forward(&model, back, &beta).unwrap() - z).abs();
            prop_assert!(resid <= 1e-12 * z.abs().max(1.0));
        }
    }

    #[test]
    fn two_point_exact_fit() {
        let data = CalibrationDataset::from_triples(&[(0.0, 1.0, 1.0), (1.0, 3.0, 1.0)]).unwrap();
        let r = calibrate_least_squares(&ForwardModel::Affine, &data, &[1.0, 0.0]).unwrap();
        assert!(r.converged);
        assert!((r.b.estimates()[0] - 2.0).abs() < 1e-14);
        assert!((r.b.estimates()[1] - 1.0).abs() < 1e-14);
        assert!(r.chi_square < 1e-28);
    }

    #[test]
    fn three_point_matches_normal_equations() {
        let pts = [(0.0, 0.0, 1.0), (1.0, 1.0, 1.0), (2.0, 2.2, 1.0)];
        let data = CalibrationDataset::from_triples(&pts).unwrap();
        let r = calibrate_least_squares(&ForwardModel::Affine, &data, &[0.0, 0.0]).unwrap();
        let (b, v) = weighted_line(&pts);
        for i in 0..2 {
            assert!((r.b.estimates()[i] - b[i]).abs() < 1e-10);
            for j in 0..2 {
                assert!((r.b.covariance()[(i, j)] - v[i][j]).abs() < 1e-10);
            }
        }
        let resid_chi: f64 = r.residuals.iter().map(|e| e * e).sum();
        assert!((r.chi_square - resid_chi).abs() <= 1e-10 * resid_chi);
    }

    #[test]
    fn downweighted_point_approaches_two_point_fit() {
        let pts = [(0.0, 0.0, 1.0), (1.0, 1.0, 1.0), (2.0, 2.2, 1e3)];
        let data = CalibrationDataset::from_triples(&pts).unwrap();
        let r = calibrate_least_squares(&ForwardModel::Affine, &data, &[0.0, 0.0]).unwrap();
        // the first two points alone give gain 1, offset 0
        assert!((r.b.estimates()[0] - 1.0).abs() < 1e-3);
        assert!(r.b.estimates()[1].abs() < 1e-3);
    }

    #[test]
    fn covariance_scales_with_uncertainty_squared() {
        let base = [(0.0, 0.1, 0.2), (1.0, 1.9, 0.1), (2.0, 4.2, 0.3), (3.0, 5.8, 0.2)];
        let k = 4.0; // power of two keeps the scaling exact
        let scaled: Vec<_> = base.iter().map(|&(x, y, u)| (x, y, u * k)).collect();
        let r1 = calibrate_least_squares(
            &ForwardModel::Affine,
            &CalibrationDataset::from_triples(&base).unwrap(),
            &[0.0, 0.0],
        )
        .unwrap();
        let r2 = calibrate_least_squares(
            &ForwardModel::Affine,
            &CalibrationDataset::from_triples(&scaled).unwrap(),
            &[0.0, 0.0],
        )
        .unwrap();
        for i in 0..2 {
            assert!((r1.b.estimates()[i] - r2.b.estimates()[i]).abs() < 1e-12);
            for j in 0..2 {
                let a = r1.b.covariance()[(i, j)] * k * k;
                let b = r2.b.covariance()[(i, j)];
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-30), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn redundant_composition_is_rank_deficient() {
        // A quadratic after an affine map is still a quadratic: five parameters, three directions.
        let model = ForwardModel::Composed {
            stages: vec![ForwardModel::Affine, ForwardModel::Polynomial { degree: 2 }],
        };
        let pts: Vec<(f64, f64, f64)> = (0..8).map(|i| (i as f64, (i * i) as f64, 0.1)).collect();
        let data = CalibrationDataset::from_triples(&pts).unwrap();
        let r = calibrate_least_squares(&model, &data, &[1.0, 0.1, 0.0, 0.0, 1.0]);
        assert!(matches!(r, Err(Error::RankDeficient(_))));
    }

    #[test]
    fn composed_minimiser_is_stationary() {
        let wobble = [0.01, -0.02, 0.015, 0.0, -0.01, 0.02, -0.005, 0.01, -0.015, 0.005];
        let pts: Vec<(f64, f64, f64)> = (0..10)
            .map(|i| {
                let x = i as f64 * 0.3;
                (x, 0.4 + 1.7 * x - 0.3 * x * x + wobble[i], 0.01 + 0.002 * i as f64)
            })
            .collect();
        let data = CalibrationDataset::from_triples(&pts).unwrap();
        let model = ForwardModel::Composed {
            stages: vec![ForwardModel::Polynomial { degree: 2 }],
        };
        let r = calibrate_least_squares(&model, &data, &[0.0, 1.0, 0.0]).unwrap();
        assert!(r.converged);
        let b: Vec<f64> = r.b.estimates().iter().copied().collect();
        let mut grad_inf = 0.0f64;
        for j in 0..b.len() {
            let h = 1e-6 * (1.0 + b[j].abs());
            let mut up = b.clone();
            up[j] += h;
            let mut down = b.clone();
            down[j] -= h;
            let g = (calibration_cost(&model, &data, &up).unwrap()
                - calibration_cost(&model, &data, &down).unwrap())
                / (2.0 * h);
            grad_inf = grad_inf.max(g.abs());
        }
        assert!(grad_inf < 1e-6, "gradient {grad_inf}");
        let c = calibration_cost(&model, &data, &b).unwrap();
        assert!((r.chi_square - c).abs() <= 1e-10 * c);
    }

    #[test]
    fn rejects_bad_datasets() {
        assert!(CalibrationDataset::from_triples(&[(0.0, 1.0, 0.0)]).is_err());
        let one = CalibrationDataset::from_triples(&[(0.0, 1.0, 1.0)]).unwrap();
        assert!(matches!(
            calibrate_least_squares(&ForwardModel::Affine, &one, &[1.0, 0.0]),
            Err(Error::Data(_))
        ));
        let same_x = CalibrationDataset::from_triples(&[(1.0, 1.0, 1.0), (1.0, 2.0, 1.0)]).unwrap();
        assert!(matches!(
            calibrate_least_squares(&ForwardModel::Affine, &same_x, &[1.0, 0.0]),
            Err(Error::RankDeficient(_))
        ));
    }
}
