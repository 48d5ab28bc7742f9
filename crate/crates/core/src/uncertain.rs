//! Value types for uncertain quantities, the supported input distributions and
//! the seeded random streams every stochastic routine draws from.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance on the smallest admissible eigenvalue of a covariance.
pub const PSD_TOLERANCE: f64 = 1e-10;
/// Relative tolerance on covariance asymmetry.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// A scalar estimate with its standard uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertainScalar {
    pub estimate: f64,
    pub std_uncertainty: f64,
}

impl UncertainScalar {
    pub fn new(estimate: f64, std_uncertainty: f64) -> Result<Self> {
        if !estimate.is_finite() || !std_uncertainty.is_finite() || std_uncertainty < 0.0 {
            return Err(Error::param(format!(
                "uncertain scalar needs finite estimate and u >= 0, got ({estimate}, {std_uncertainty})"
            )));
        }
        Ok(Self {
            estimate,
            std_uncertainty,
        })
    }
}

/// Vector of estimates together with their covariance matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertainVector {
    estimates: DVector<f64>,
    covariance: DMatrix<f64>,
}

impl UncertainVector {
    pub fn new(estimates: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        if covariance.nrows() != estimates.len() || covariance.ncols() != estimates.len() {
            return Err(Error::Shape(format!(
                "covariance is {}x{} but there are {} estimates",
                covariance.nrows(),
                covariance.ncols(),
                estimates.len()
            )));
        }
        if estimates.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("estimates must be finite"));
        }
        let verdict = validate_covariance(&covariance)?;
        if !verdict.accepted {
            return Err(Error::param(format!("invalid covariance: {}", verdict.worst)));
        }
        Ok(Self {
            estimates,
            covariance,
        })
    }

    /// Independent components with the given standard uncertainties.
    pub fn independent(estimates: &[f64], std_uncertainties: &[f64]) -> Result<Self> {
        if estimates.len() != std_uncertainties.len() {
            return Err(Error::Shape(format!(
                "{} estimates but {} uncertainties",
                estimates.len(),
                std_uncertainties.len()
            )));
        }
        let cov = DMatrix::from_diagonal(&DVector::from_iterator(
            std_uncertainties.len(),
            std_uncertainties.iter().map(|u| u * u),
        ));
        Self::new(DVector::from_column_slice(estimates), cov)
    }

    pub fn estimates(&self) -> &DVector<f64> {
        &self.estimates
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn len(&self) -> usize {
        self.estimates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimates.is_empty()
    }

    pub fn std_uncertainties(&self) -> Vec<f64> {
        self.covariance.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }
}

/// Probability distributions available for input quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Normal { mean: f64, std: f64 },
    MultiNormal { mean: Vec<f64>, covariance: Vec<Vec<f64>> },
    Uniform { lower: f64, upper: f64 },
}

impl Distribution {
    pub fn dim(&self) -> usize {
        match self {
            Distribution::MultiNormal { mean, .. } => mean.len(),
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Distribution::Normal { mean, std } => {
                if !(mean.is_finite() && std.is_finite() && *std > 0.0) {
                    return Err(Error::param(format!("normal needs std > 0, got {std}")));
                }
            }
            Distribution::Uniform { lower, upper } => {
                if !(lower.is_finite() && upper.is_finite() && lower < upper) {
                    return Err(Error::param(format!(
                        "uniform needs lower < upper, got [{lower}, {upper}]"
                    )));
                }
            }
            Distribution::MultiNormal { mean, covariance } => {
                self.multinormal_parts(mean, covariance)?;
            }
        }
        Ok(())
    }

    fn multinormal_parts(
        &self,
        mean: &[f64],
        covariance: &[Vec<f64>],
    ) -> Result<UncertainVector> {
        let n = mean.len();
        if n == 0 {
            return Err(Error::param("multinormal needs at least one component"));
        }
        if covariance.len() != n || covariance.iter().any(|row| row.len() != n) {
            return Err(Error::Shape(format!(
                "multinormal covariance must be {n}x{n}"
            )));
        }
        let cov = DMatrix::from_fn(n, n, |i, j| covariance[i][j]);
        UncertainVector::new(DVector::from_column_slice(mean), cov)
    }

    /// Expectation and covariance of the distribution.
    pub fn moments(&self) -> Result<UncertainVector> {
        self.validate()?;
        match self {
            Distribution::Normal { mean, std } => UncertainVector::independent(&[*mean], &[*std]),
            Distribution::Uniform { lower, upper } => UncertainVector::independent(
                &[0.5 * (lower + upper)],
                &[(upper - lower) / 12f64.sqrt()],
            ),
            Distribution::MultiNormal { mean, covariance } => {
                self.multinormal_parts(mean, covariance)
            }
        }
    }
}

/// Deterministic random stream addressed by a master seed and a stream index.
///
/// Child streams are derived with [`RandomStream::derive`]; the child index is a
/// fixed function of the parent index and the unit index, so work split into
/// units draws the same numbers whatever order the units run in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RandomStream {
    pub master_seed: u64,
    pub stream_index: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RandomStream {
    pub fn new(master_seed: u64, stream_index: u64) -> Self {
        Self {
            master_seed,
            stream_index,
        }
    }

    pub fn derive(&self, unit: u64) -> Self {
        let child = splitmix64(splitmix64(self.stream_index) ^ unit.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        Self {
            master_seed: self.master_seed,
            stream_index: child,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_index);
        rng
    }
}

/// Factor `L` with `L Lᵀ = cov`, valid for singular PSD matrices.
pub(crate) fn psd_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(cov.clone());
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let cutoff = 1e-12 * lmax;
    let mut factor = eig.eigenvectors.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let s = if lambda > cutoff { lambda.sqrt() } else { 0.0 };
        factor.column_mut(j).scale_mut(s);
    }
    factor
}

/// Draw `n` samples; one row per draw, one column per component.
pub fn sample(dist: &Distribution, stream: RandomStream, n: usize) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::param("sample count must be at least 1"));
    }
    dist.validate()?;
    let mut rng = stream.rng();
    sample_with(dist, &mut rng, n)
}

pub(crate) fn sample_with<R: Rng>(
    dist: &Distribution,
    rng: &mut R,
    n: usize,
) -> Result<DMatrix<f64>> {
    match dist {
        Distribution::Normal { mean, std } => Ok(DMatrix::from_fn(n, 1, |_, _| {
            mean + std * rng.sample::<f64, _>(StandardNormal)
        })),
        Distribution::Uniform { lower, upper } => Ok(DMatrix::from_fn(n, 1, |_, _| {
            lower + (upper - lower) * rng.random::<f64>()
        })),
        Distribution::MultiNormal { .. } => {
            let moments = dist.moments()?;
            let factor = psd_factor(moments.covariance());
            let dim = moments.len();
            let mut out = DMatrix::zeros(n, dim);
            let mut z = DVector::zeros(dim);
            for row in 0..n {
                for v in z.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                let draw = moments.estimates() + &factor * &z;
                out.row_mut(row).copy_from(&draw.transpose());
            }
            Ok(out)
        }
    }
}

/// Monte Carlo summary of a scalar sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub lower: f64,
    pub upper: f64,
    pub coverage: f64,
}

/// Linear-interpolation quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub(crate) fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean, unbiased standard deviation and percentile coverage interval.
pub fn summarize(samples: &[f64], coverage: f64) -> Result<Summary> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "summary needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(Error::param(format!("coverage must lie in (0, 1), got {coverage}")));
    }
    let (mean, std) = mean_std(samples);
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Summary {
        mean,
        std,
        lower: quantile_sorted(&sorted, 0.5 * (1.0 - coverage)),
        upper: quantile_sorted(&sorted, 0.5 * (1.0 + coverage)),
        coverage,
    })
}

/// Outcome of a covariance validity check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceVerdict {
    pub accepted: bool,
    /// Largest `|m_ij - m_ji|` relative to the largest entry magnitude.
    pub asymmetry: f64,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub worst: String,
}

pub fn validate_covariance(m: &DMatrix<f64>) -> Result<CovarianceVerdict> {
    if m.nrows() != m.ncols() {
        return Err(Error::Shape(format!(
            "covariance must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Ok(CovarianceVerdict {
            accepted: false,
            asymmetry: f64::NAN,
            min_eigenvalue: f64::NAN,
            max_eigenvalue: f64::NAN,
            worst: "non-finite entry".into(),
        });
    }
    if m.is_empty() {
        return Ok(CovarianceVerdict {
            accepted: true,
            asymmetry: 0.0,
            min_eigenvalue: 0.0,
            max_eigenvalue: 0.0,
            worst: "none".into(),
        });
    }
    let scale = m.amax();
    let mut asym = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            asym = asym.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    let asymmetry = if scale > 0.0 { asym / scale } else { 0.0 };
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let min_eigenvalue = eig.eigenvalues.min();
    let max_eigenvalue = eig.eigenvalues.max();
    let symmetric = asymmetry <= SYMMETRY_TOLERANCE;
    let psd = min_eigenvalue >= -PSD_TOLERANCE * max_eigenvalue.max(0.0);
    let worst = if !symmetric {
        format!("asymmetry {asymmetry:.3e} exceeds {SYMMETRY_TOLERANCE:e}")
    } else if !psd {
        format!("eigenvalue {min_eigenvalue:.6e} is negative")
    } else {
        "none".into()
    };
    Ok(CovarianceVerdict {
        accepted: symmetric && psd,
        asymmetry,
        min_eigenvalue,
        max_eigenvalue,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_mean_is_half() {
        let s = sample(
            &Distribution::Uniform {
                lower: 0.0,
                upper: 1.0,
            },
            RandomStream::new(1, 0),
            100_000,
        )
        .unwrap();
        let mean = s.column(0).mean();
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
    }

    #[test]
    fn normal_sample_std_within_chi_bound() {
        // The sample std of n standard normals has std ~ 1/sqrt(2n) = 0.00224 at
        // n = 1e5, so +-0.02 is about nine standard errors.
        let s = sample(
            &Distribution::Normal { mean: 0.0, std: 1.0 },
            RandomStream::new(2, 0),
            100_000,
        )
        .unwrap();
        let (_, std) = mean_std(s.column(0).as_slice());
        assert!((std - 1.0).abs() < 0.02, "{std}");
    }

    #[test]
    fn rank_one_multinormal_has_equal_components() {
        let d = Distribution::MultiNormal {
            mean: vec![0.0, 0.0],
            covariance: vec![vec![1.0, 1.0], vec![1.0, 1.0]],
        };
        let s = sample(&d, RandomStream::new(3, 7), 1000).unwrap();
        for r in 0..s.nrows() {
            assert!((s[(r, 0)] - s[(r, 1)]).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_distribution_parameters_fail() {
        let bad = [
            Distribution::Normal { mean: 0.0, std: 0.0 },
            Distribution::Uniform {
                lower: 1.0,
                upper: 1.0,
            },
            Distribution::MultiNormal {
                mean: vec![0.0, 0.0],
                covariance: vec![vec![1.0, 2.0], vec![2.0, 1.0]],
            },
        ];
        for d in bad {
            assert!(matches!(
                sample(&d, RandomStream::new(0, 0), 10),
                Err(Error::Parameter(_))
            ));
        }
        assert!(sample(&Distribution::Normal { mean: 0.0, std: 1.0 }, RandomStream::new(0, 0), 0).is_err());
    }

    #[test]
    fn multinormal_moments_within_three_standard_errors() {
        let cov = [[4.0, 1.2], [1.2, 1.0]];
        let d = Distribution::MultiNormal {
            mean: vec![1.0, -2.0],
            covariance: cov.iter().map(|r| r.to_vec()).collect(),
        };
        let n = 100_000;
        let s = sample(&d, RandomStream::new(11, 3), n).unwrap();
        let nf = n as f64;
        let m0 = s.column(0).mean();
        let m1 = s.column(1).mean();
        assert!((m0 - 1.0).abs() < 3.0 * (4.0f64 / nf).sqrt());
        assert!((m1 + 2.0).abs() < 3.0 * (1.0f64 / nf).sqrt());
        for (i, mi) in [(0usize, m0), (1, m1)] {
            for (j, mj) in [(0usize, m0), (1, m1)] {
                let c: f64 = (0..n)
                    .map(|r| (s[(r, i)] - mi) * (s[(r, j)] - mj))
                    .sum::<f64>()
                    / (nf - 1.0);
                // var of a sample covariance: (s_ii s_jj + s_ij^2) / n
                let se = ((cov[i][i] * cov[j][j] + cov[i][j] * cov[i][j]) / nf).sqrt();
                assert!((c - cov[i][j]).abs() < 3.0 * se, "cov[{i}][{j}] = {c}");
            }
        }
    }

    #[test]
    fn streams_reproduce_and_differ() {
        let d = Distribution::Normal { mean: 0.0, std: 1.0 };
        let a = sample(&d, RandomStream::new(5, 1), 64).unwrap();
        let b = sample(&d, RandomStream::new(5, 1), 64).unwrap();
        let c = sample(&d, RandomStream::new(5, 2), 64).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let parent = RandomStream::new(5, 1);
        assert_eq!(parent.derive(3), parent.derive(3));
        assert_ne!(parent.derive(3), parent.derive(4));
    }

    #[test]
    fn summarize_examples() {
        let s = summarize(&[5.0; 4], 0.95).unwrap();
        assert_eq!((s.mean, s.std, s.lower, s.upper), (5.0, 0.0, 5.0, 5.0));
        let s = summarize(&[1.0, 2.0, 3.0], 0.5).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert!(matches!(summarize(&[1.0], 0.95), Err(Error::InsufficientData(_))));
        assert!(summarize(&[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn normal_interval_matches_quantiles() {
        let s = sample(
            &Distribution::Normal { mean: 0.0, std: 1.0 },
            RandomStream::new(9, 0),
            100_000,
        )
        .unwrap();
        let sum = summarize(s.column(0).as_slice(), 0.95).unwrap();
        assert!((sum.lower + 1.959964).abs() < 0.03, "{}", sum.lower);
        assert!((sum.upper - 1.959964).abs() < 0.03, "{}", sum.upper);
    }

    #[test]
    fn interval_widens_with_coverage() {
        let s = sample(
            &Distribution::Uniform {
                lower: -1.0,
                upper: 3.0,
            },
            RandomStream::new(4, 4),
            5000,
        )
        .unwrap();
        let mut width = 0.0;
        for c in [0.1, 0.3, 0.5, 0.68, 0.9, 0.95, 0.99] {
            let sm = summarize(s.column(0).as_slice(), c).unwrap();
            assert!(sm.upper - sm.lower >= width);
            width = sm.upper - sm.lower;
        }
    }

    #[test]
    fn covariance_verdicts() {
        assert!(validate_covariance(&DMatrix::identity(3, 3)).unwrap().accepted);
        let bad = validate_covariance(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).unwrap();
        assert!(!bad.accepted);
        assert!((bad.min_eigenvalue + 1.0).abs() < 1e-12);
        let rank1 = validate_covariance(&DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])).unwrap();
        assert!(rank1.accepted);
        let asym = validate_covariance(&DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0])).unwrap();
        assert!(!asym.accepted);
        assert!(matches!(
            validate_covariance(&DMatrix::zeros(2, 3)),
            Err(Error::Shape(_))
        ));
    }
}
