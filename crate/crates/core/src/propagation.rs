//! Uncertainty propagation through a measurement function, by first-order
//! linearisation (LPU) and by Monte Carlo, plus a cross-check of the two.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expression;
use crate::uncertain::{sample_with, summarize, Distribution, RandomStream, UncertainVector};

/// Expansion factor for the LPU coverage interval.
pub const COVERAGE_FACTOR: f64 = 1.96;
pub const COVERAGE_LEVEL: f64 = 0.95;
pub const MIN_TRIALS: usize = 1_000;
/// Draws per Monte Carlo batch; batch `b` uses stream `derive(b)`.
pub const MC_BATCH: usize = 1_024;

type ValueFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type GradientFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// A measurand as a deterministic function of its input quantities.
///
/// Sensitivities come from the attached gradient when one is supplied
/// (expressions always supply one) and from central differences otherwise.
#[derive(Clone)]
pub struct MeasurementFunction {
    arity: usize,
    value: Arc<ValueFn>,
    gradient: Option<Arc<GradientFn>>,
}

impl fmt::Debug for MeasurementFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MeasurementFunction")
            .field("arity", &self.arity)
            .field("exact_gradient", &self.gradient.is_some())
            .finish()
    }
}

impl MeasurementFunction {
    pub fn new(arity: usize, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            arity,
            value: Arc::new(f),
            gradient: None,
        }
    }

    pub fn with_gradient(
        mut self,
        g: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        self.gradient = Some(Arc::new(g));
        self
    }

    pub fn from_expression(expr: Expression) -> Self {
        let expr = Arc::new(expr);
        let e2 = Arc::clone(&expr);
        Self::new(expr.arity(), move |x| expr.eval(x)).with_gradient(move |x| e2.gradient(x))
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    /// Central differences with step `1e-6·(1+|x_i|)`, rounded so that the
    /// perturbed points are exactly `x_i ± h`.
    pub fn finite_difference_sensitivities(&self, x: &[f64]) -> Vec<f64> {
        let mut work = x.to_vec();
        (0..x.len())
            .map(|i| {
                let h = 1e-6 * (1.0 + x[i].abs());
                let up = x[i] + h;
                let down = x[i] - h;
                work[i] = up;
                let fu = self.eval(&work);
                work[i] = down;
                let fd = self.eval(&work);
                work[i] = x[i];
                (fu - fd) / (up - down)
            })
            .collect()
    }

    pub fn sensitivities(&self, x: &[f64]) -> Vec<f64> {
        match &self.gradient {
            Some(g) => g(x),
            None => self.finite_difference_sensitivities(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lpu,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageInterval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationResult {
    pub estimate: f64,
    pub std_uncertainty: f64,
    pub interval: CoverageInterval,
    pub method: Method,
    /// Zero for LPU.
    pub trials: usize,
    /// Master seed and stream index of a Monte Carlo run.
    pub seed: Option<u64>,
    pub stream_index: Option<u64>,
}

/// Linearised propagation: `u² = cᵀ V c`.
pub fn propagate_lpu(f: &MeasurementFunction, x: &UncertainVector) -> Result<PropagationResult> {
    if f.arity() != x.len() {
        return Err(Error::Shape(format!(
            "function takes {} inputs, got {}",
            f.arity(),
            x.len()
        )));
    }
    let point: Vec<f64> = x.estimates().iter().copied().collect();
    let estimate = f.eval(&point);
    if !estimate.is_finite() {
        return Err(Error::NonFinite(format!("f is not finite at {point:?}")));
    }
    let c = f.sensitivities(&point);
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("sensitivities are not finite near {point:?}")));
    }
    let c = DVector::from_vec(c);
    let var = (c.transpose() * x.covariance() * &c)[(0, 0)];
    let u = var.max(0.0).sqrt();
    Ok(PropagationResult {
        estimate,
        std_uncertainty: u,
        interval: CoverageInterval {
            lower: estimate - COVERAGE_FACTOR * u,
            upper: estimate + COVERAGE_FACTOR * u,
            level: COVERAGE_LEVEL,
        },
        method: Method::Lpu,
        trials: 0,
        seed: None,
        stream_index: None,
    })
}

/// Stack the moments of independent input distributions block-diagonally.
pub fn joint_moments(dists: &[Distribution]) -> Result<UncertainVector> {
    let parts = dists
        .iter()
        .map(Distribution::moments)
        .collect::<Result<Vec<_>>>()?;
    let n: usize = parts.iter().map(UncertainVector::len).sum();
    let mut mean = DVector::zeros(n);
    let mut cov = DMatrix::zeros(n, n);
    let mut at = 0;
    for p in &parts {
        let k = p.len();
        mean.rows_mut(at, k).copy_from(p.estimates());
        cov.view_mut((at, at), (k, k)).copy_from(p.covariance());
        at += k;
    }
    UncertainVector::new(mean, cov)
}

/// Monte Carlo propagation over independent inputs (a `MultiNormal` entry
/// carries its own correlations).
pub fn propagate_mc(
    f: &MeasurementFunction,
    dists: &[Distribution],
    trials: usize,
    stream: RandomStream,
) -> Result<PropagationResult> {
    let dim: usize = dists.iter().map(Distribution::dim).sum();
    if dim != f.arity() {
        return Err(Error::Shape(format!(
            "function takes {} inputs, distributions provide {dim}",
            f.arity()
        )));
    }
    if trials < MIN_TRIALS {
        return Err(Error::param(format!("need at least {MIN_TRIALS} trials, got {trials}")));
    }
    for d in dists {
        d.validate()?;
    }
    let batches = trials.div_ceil(MC_BATCH);
    let values: Vec<Vec<f64>> = (0..batches)
        .into_par_iter()
        .map(|b| -> Result<Vec<f64>> {
            let len = MC_BATCH.min(trials - b * MC_BATCH);
            let mut rng = stream.derive(b as u64).rng();
            let blocks = dists
                .iter()
                .map(|d| sample_with(d, &mut rng, len))
                .collect::<Result<Vec<_>>>()?;
            let mut x = vec![0.0; dim];
            let mut out = Vec::with_capacity(len);
            for r in 0..len {
                let mut at = 0;
                for block in &blocks {
                    for c in 0..block.ncols() {
                        x[at] = block[(r, c)];
                        at += 1;
                    }
                }
                let v = f.eval(&x);
                if !v.is_finite() {
                    return Err(Error::Evaluation {
                        index: b * MC_BATCH + r,
                    });
                }
                out.push(v);
            }
            Ok(out)
        })
        .collect::<Vec<Result<Vec<f64>>>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = values.into_iter().flatten().collect();
    let s = summarize(&values, COVERAGE_LEVEL)?;
    Ok(PropagationResult {
        estimate: s.mean,
        std_uncertainty: s.std,
        interval: CoverageInterval {
            lower: s.lower,
            upper: s.upper,
            level: COVERAGE_LEVEL,
        },
        method: Method::MonteCarlo,
        trials,
        seed: Some(stream.master_seed),
        stream_index: Some(stream.stream_index),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpuMcVerdict {
    pub accepted: bool,
    pub tolerance: f64,
    /// `|u_LPU − u_MC| / u_MC`.
    pub relative_difference: f64,
    pub lpu: PropagationResult,
    pub mc: PropagationResult,
}

/// Accept iff `|u_LPU − u_MC| ≤ tol·u_MC`.
pub fn validate_lpu_vs_mc(
    f: &MeasurementFunction,
    dists: &[Distribution],
    trials: usize,
    stream: RandomStream,
    tol: f64,
) -> Result<LpuMcVerdict> {
    if !(tol >= 0.0) {
        return Err(Error::param(format!("tolerance must be >= 0, got {tol}")));
    }
    let lpu = propagate_lpu(f, &joint_moments(dists)?)?;
    let mc = propagate_mc(f, dists, trials, stream)?;
    let diff = (lpu.std_uncertainty - mc.std_uncertainty).abs();
    let accepted = tol.is_infinite() || diff <= tol * mc.std_uncertainty;
    Ok(LpuMcVerdict {
        accepted,
        tolerance: tol,
        relative_difference: if mc.std_uncertainty > 0.0 {
            diff / mc.std_uncertainty
        } else {
            f64::INFINITY
        },
        lpu,
        mc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sum2() -> MeasurementFunction {
        MeasurementFunction::new(2, |x| x[0] + x[1])
    }

    fn normal(mean: f64, std: f64) -> Distribution {
        Distribution::Normal { mean, std }
    }

    #[test]
    fn lpu_examples() {
        let x = UncertainVector::independent(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert_eq!(propagate_lpu(&sum2(), &x).unwrap().std_uncertainty, 5.0);

        let prod = MeasurementFunction::new(2, |x| x[0] * x[1]);
        let x = UncertainVector::independent(&[2.0, 3.0], &[0.1, 0.2]).unwrap();
        let r = propagate_lpu(&prod, &x).unwrap();
        assert!((r.std_uncertainty - 0.5).abs() < 1e-9, "{}", r.std_uncertainty);

        let diff = MeasurementFunction::new(2, |x| x[0] - x[1]);
        let x = UncertainVector::new(
            DVector::from_vec(vec![1.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[0.04, 0.04, 0.04, 0.04]),
        )
        .unwrap();
        assert!(propagate_lpu(&diff, &x).unwrap().std_uncertainty < 1e-12);
    }

    #[test]
    fn finite_differences_are_close_at_nonzero_estimates() {
        let x = UncertainVector::independent(&[10.0, 20.0], &[3.0, 4.0]).unwrap();
        let u = propagate_lpu(&sum2(), &x).unwrap().std_uncertainty;
        assert!((u - 5.0).abs() < 1e-8, "{u}");
    }

    #[test]
    fn lpu_rejects_non_finite() {
        let f = MeasurementFunction::new(1, |x| x[0].ln());
        let x = UncertainVector::independent(&[-1.0], &[0.1]).unwrap();
        assert!(matches!(propagate_lpu(&f, &x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn mc_identity_and_square() {
        let id = MeasurementFunction::new(1, |x| x[0]);
        let r = propagate_mc(&id, &[normal(0.0, 1.0)], 100_000, RandomStream::new(1, 0)).unwrap();
        assert!(r.estimate.abs() < 0.01);
        assert!((r.std_uncertainty - 1.0).abs() < 0.02);

        let sq = MeasurementFunction::new(1, |x| x[0] * x[0]);
        let r = propagate_mc(&sq, &[normal(0.0, 1.0)], 100_000, RandomStream::new(2, 0)).unwrap();
        assert!((r.estimate - 1.0).abs() < 0.02);
        assert!((r.std_uncertainty - 2f64.sqrt()).abs() < 0.02 * 2f64.sqrt());
    }

    #[test]
    fn mc_agrees_with_lpu_on_linear_sum() {
        let r = propagate_mc(
            &sum2(),
            &[normal(0.0, 3.0), normal(0.0, 4.0)],
            100_000,
            RandomStream::new(3, 0),
        )
        .unwrap();
        assert!((r.std_uncertainty - 5.0).abs() < 0.05);
    }

    #[test]
    fn mc_reports_offending_draw() {
        let f = MeasurementFunction::new(1, |x| x[0].ln());
        let err = propagate_mc(&f, &[normal(0.0, 1.0)], 2000, RandomStream::new(4, 0)).unwrap_err();
        assert!(matches!(err, Error::Evaluation { .. }));
        assert!(propagate_mc(&f, &[normal(0.0, 1.0)], 999, RandomStream::new(4, 0)).is_err());
    }

    #[test]
    fn mc_is_reproducible() {
        let d = [normal(1.0, 0.5), Distribution::Uniform { lower: 0.0, upper: 2.0 }];
        let f = MeasurementFunction::new(2, |x| x[0] * x[1].exp());
        let a = propagate_mc(&f, &d, 5000, RandomStream::new(9, 9)).unwrap();
        let b = propagate_mc(&f, &d, 5000, RandomStream::new(9, 9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn verdicts() {
        let d = [normal(0.0, 3.0), normal(0.0, 4.0)];
        assert!(validate_lpu_vs_mc(&sum2(), &d, 100_000, RandomStream::new(5, 0), 0.02).unwrap().accepted);

        let sq = MeasurementFunction::new(1, |x| x[0] * x[0]);
        let v = validate_lpu_vs_mc(&sq, &[normal(0.0, 1.0)], 100_000, RandomStream::new(6, 0), 0.02).unwrap();
        assert!(!v.accepted);
        assert_eq!(v.lpu.std_uncertainty, 0.0);
        assert!((v.mc.std_uncertainty - 2f64.sqrt()).abs() < 0.05);

        let v = validate_lpu_vs_mc(&sq, &[normal(0.0, 1.0)], 10_000, RandomStream::new(6, 0), f64::INFINITY).unwrap();
        assert!(v.accepted);
    }

    #[test]
    fn mc_standard_error_shrinks_as_inverse_sqrt() {
        let f = MeasurementFunction::new(2, |x| x[0] * x[1] + x[0]);
        let d = [normal(1.0, 0.3), normal(2.0, 0.5)];
        let replicates = 40;
        let mut pts = Vec::new();
        for (level, &trials) in [1_000usize, 10_000, 100_000].iter().enumerate() {
            let estimates: Vec<f64> = (0..replicates)
                .map(|r| {
                    let s = RandomStream::new(77, (level * 1000 + r) as u64);
                    propagate_mc(&f, &d, trials, s).unwrap().estimate
                })
                .collect();
            let (_, spread) = crate::uncertain::mean_std(&estimates);
            pts.push(((trials as f64).ln(), spread.ln()));
        }
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / 3.0;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / 3.0;
        let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        assert!((slope + 0.5).abs() < 0.15, "slope {slope}");
    }

    fn affine_expression(coeffs: &[f64], offset: f64) -> MeasurementFunction {
        let names: Vec<String> = (0..coeffs.len()).map(|i| format!("X{}", i + 1)).collect();
        let src = coeffs
            .iter()
            .enumerate()
            .map(|(i, a)| format!("({a:e})*X{}", i + 1))
            .chain(std::iter::once(format!("({offset:e})")))
            .collect::<Vec<_>>()
            .join(" + ");
        MeasurementFunction::from_expression(Expression::parse(&src, &names).unwrap())
    }

    fn random_cov(seed: &[f64], n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |i, j| seed[i * n + j]);
        &a * a.transpose() + DMatrix::identity(n, n) * 0.1
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn lpu_exact_on_affine_functions(
            coeffs in prop::collection::vec(-3.0f64..3.0, 3),
            offset in -5.0f64..5.0,
            x in prop::collection::vec(-5.0f64..5.0, 3),
            seed in prop::collection::vec(-1.0f64..1.0, 9),
        ) {
            let f = affine_expression(&coeffs, offset);
            let cov = random_cov(&seed, 3);
            let xv = UncertainVector::new(DVector::from_vec(x), cov.clone()).unwrap();
            let u = propagate_lpu(&f, &xv).unwrap().std_uncertainty;
            let a = DVector::from_vec(coeffs);
            let exact = (a.transpose() * &cov * &a)[(0, 0)];
            prop_assert!((u * u - exact).abs() <= 1e-10 * exact);
        }

        #[test]
        fn lpu_is_permutation_invariant(
            coeffs in prop::collection::vec(-3.0f64..3.0, 3),
            x in prop::collection::vec(-5.0f64..5.0, 3),
            seed in prop::collection::vec(-1.0f64..1.0, 9),
        ) {
            let perm = [2usize, 0, 1];
            let names: Vec<String> = (1..=3).map(|i| format!("X{i}")).collect();
            let src = format!("({:e})*X1*X2 + ({:e})*exp(X3/5) + ({:e})*X1", coeffs[0], coeffs[1], coeffs[2]);
            let f = MeasurementFunction::from_expression(Expression::parse(&src, &names).unwrap());
            // Same function with its inputs listed in permuted order.
            let pnames: Vec<String> = perm.iter().map(|&p| names[p].clone()).collect();
            let g = MeasurementFunction::from_expression(Expression::parse(&src, &pnames).unwrap());
            let cov = random_cov(&seed, 3);
            let pcov = DMatrix::from_fn(3, 3, |i, j| cov[(perm[i], perm[j])]);
            let px: Vec<f64> = perm.iter().map(|&p| x[p]).collect();
            let u1 = propagate_lpu(&f, &UncertainVector::new(DVector::from_vec(x), cov).unwrap()).unwrap().std_uncertainty;
            let u2 = propagate_lpu(&g, &UncertainVector::new(DVector::from_vec(px), pcov).unwrap()).unwrap().std_uncertainty;
            prop_assert!((u1 - u2).abs() <= 1e-12 * u1.max(1e-300));
        }
    }
}
