//! Black-box learners: ridge regression, regression trees and forests, a
//! nearest-centroid classifier, k-fold cross-validation and a Monte Carlo
//! bias-variance estimate against a synthetic process.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_numeric_csv;
use crate::uncertain::{mean_std, RandomStream};

pub const DEFAULT_FEATURE_FRACTION: f64 = 1.0 / 3.0;

/// Feature matrix (one row per instance) with regression targets or class
/// labels. Labels are stored as integral reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: DMatrix<f64>,
    targets: Vec<f64>,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, targets: Vec<f64>) -> Result<Self> {
        if features.nrows() != targets.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} targets",
                features.nrows(),
                targets.len()
            )));
        }
        if features.ncols() == 0 {
            return Err(Error::Shape("dataset needs at least one feature column".into()));
        }
        if features.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("dataset contains non-finite entries".into()));
        }
        Ok(Self { features, targets })
    }

    pub fn from_rows(rows: &[Vec<f64>], targets: &[f64]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        let m = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
        Self::new(m, targets.to_vec())
    }

    /// Feature columns followed by a final target column, with a header row.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let table = read_numeric_csv(path)?;
        if table.headers.len() < 2 {
            return Err(Error::Data(format!(
                "{}: need at least one feature column and a target column",
                path.display()
            )));
        }
        let d = table.headers.len() - 1;
        let rows: Vec<Vec<f64>> = table.rows.iter().map(|r| r[..d].to_vec()).collect();
        let y: Vec<f64> = table.rows.iter().map(|r| r[d]).collect();
        Self::from_rows(&rows, &y)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.features.row(i).iter().copied().collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
        }
    }
}

fn default_feature_fraction() -> f64 {
    DEFAULT_FEATURE_FRACTION
}

fn yes() -> bool {
    true
}

/// Model family with its hyper-parameters. `max_depth = None` grows until the
/// leaves are pure or `min_leaf` stops further splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Ridge {
        lambda: f64,
    },
    Tree {
        #[serde(default)]
        max_depth: Option<usize>,
        min_leaf: usize,
    },
    Forest {
        n_trees: usize,
        #[serde(default)]
        max_depth: Option<usize>,
        min_leaf: usize,
        #[serde(default = "default_feature_fraction")]
        feature_fraction: f64,
        #[serde(default = "yes")]
        bootstrap: bool,
    },
    NearestCentroid,
    /// Predicts the training-target mean.
    Mean,
}

impl Family {
    pub fn validate(&self) -> Result<()> {
        let depth_ok = |d: &Option<usize>| d.is_none_or(|d| d >= 1);
        match self {
            Family::Ridge { lambda } if !(*lambda >= 0.0 && lambda.is_finite()) => {
                Err(Error::param(format!("lambda must be finite and >= 0, got {lambda}")))
            }
            Family::Tree { max_depth, min_leaf } if !depth_ok(max_depth) || *min_leaf < 1 => {
                Err(Error::param("tree needs max_depth >= 1 and min_leaf >= 1"))
            }
            Family::Forest {
                n_trees,
                max_depth,
                min_leaf,
                feature_fraction,
                ..
            } => {
                if *n_trees < 1 || !depth_ok(max_depth) || *min_leaf < 1 {
                    Err(Error::param("forest needs n_trees, max_depth and min_leaf >= 1"))
                } else if !(*feature_fraction > 0.0 && *feature_fraction <= 1.0) {
                    Err(Error::param(format!(
                        "feature_fraction must lie in (0, 1], got {feature_fraction}"
                    )))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Ridge { .. } => "ridge",
            Family::Tree { .. } => "tree",
            Family::Forest { .. } => "forest",
            Family::NearestCentroid => "nearest_centroid",
            Family::Mean => "mean",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    SquaredError,
    ZeroOne,
}

impl Loss {
    pub fn eval(&self, prediction: f64, target: f64) -> f64 {
        match self {
            Loss::SquaredError => (prediction - target).powi(2),
            Loss::ZeroOne => f64::from(u8::from(prediction != target)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningProblem {
    #[serde(flatten)]
    pub family: Family,
    #[serde(default)]
    pub loss: Loss,
}

impl LearningProblem {
    pub fn new(family: Family, loss: Loss) -> Self {
        Self { family, loss }
    }

    pub fn regression(family: Family) -> Self {
        Self::new(family, Loss::SquaredError)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Leaf {
        value: f64,
    },
    /// `x[feature] <= threshold` goes left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    pub fn depth(&self) -> usize {
        fn go(t: &RegressionTree, at: usize) -> usize {
            match t.nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Parameters {
    Linear { intercept: f64, coefficients: Vec<f64> },
    Tree(RegressionTree),
    Forest { trees: Vec<RegressionTree> },
    Centroids { labels: Vec<f64>, centroids: Vec<Vec<f64>> },
    Constant { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub n_train: usize,
    pub n_features: usize,
    pub stream: Option<RandomStream>,
    pub fold: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub family: Family,
    pub parameters: Parameters,
    pub meta: TrainingMeta,
}

impl TrainedModel {
    pub fn n_features(&self) -> usize {
        self.meta.n_features
    }

    /// Caller guarantees `x.len() == n_features()`.
    pub fn predict(&self, x: &[f64]) -> f64 {
        match &self.parameters {
            Parameters::Linear {
                intercept,
                coefficients,
            } => intercept + coefficients.iter().zip(x).map(|(a, b)| a * b).sum::<f64>(),
            Parameters::Tree(t) => t.predict(x),
            Parameters::Forest { trees } => {
                trees.iter().map(|t| t.predict(x)).sum::<f64>() / trees.len() as f64
            }
            Parameters::Centroids { labels, centroids } => {
                let mut best = (f64::INFINITY, 0usize);
                for (k, c) in centroids.iter().enumerate() {
                    let d: f64 = c.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
                    if d < best.0 {
                        best = (d, k);
                    }
                }
                labels[best.1]
            }
            Parameters::Constant { value } => *value,
        }
    }

    pub fn predict_checked(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features() {
            return Err(Error::Shape(format!(
                "model expects {} features, got {}",
                self.n_features(),
                x.len()
            )));
        }
        Ok(self.predict(x))
    }

    pub fn predict_all(&self, features: &DMatrix<f64>) -> Result<Vec<f64>> {
        if features.ncols() != self.n_features() {
            return Err(Error::Shape(format!(
                "model expects {} features, got {}",
                self.n_features(),
                features.ncols()
            )));
        }
        let mut x = vec![0.0; features.ncols()];
        Ok((0..features.nrows())
            .map(|i| {
                for (j, v) in x.iter_mut().enumerate() {
                    *v = features[(i, j)];
                }
                self.predict(&x)
            })
            .collect())
    }
}

/// Mean loss over the dataset.
pub fn empirical_risk(model: &TrainedModel, data: &Dataset, loss: Loss) -> Result<f64> {
    let pred = model.predict_all(data.features())?;
    if pred.is_empty() {
        return Err(Error::Data("empirical risk of an empty dataset".into()));
    }
    Ok(pred
        .iter()
        .zip(data.targets())
        .map(|(p, y)| loss.eval(*p, *y))
        .sum::<f64>()
        / pred.len() as f64)
}

fn meta(data: &Dataset, stream: Option<RandomStream>) -> TrainingMeta {
    TrainingMeta {
        n_train: data.len(),
        n_features: data.dim(),
        stream,
        fold: None,
    }
}

fn column_means(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows() as f64;
    x.column_iter().map(|c| c.sum() / n).collect()
}

/// Ridge regression with an unpenalised intercept, solved on centred data.
pub fn fit_ridge(data: &Dataset, lambda: f64) -> Result<TrainedModel> {
    let family = Family::Ridge { lambda };
    family.validate()?;
    if data.is_empty() {
        return Err(Error::Data("ridge fit on an empty dataset".into()));
    }
    let n = data.len() as f64;
    let d = data.dim();
    let xm = column_means(data.features());
    let ym = data.targets().iter().sum::<f64>() / n;
    let xc = DMatrix::from_fn(data.len(), d, |i, j| data.features()[(i, j)] - xm[j]);
    let yc = DVector::from_iterator(data.len(), data.targets().iter().map(|y| y - ym));
    let gram = xc.transpose() * &xc / n;
    let rhs = xc.transpose() * yc / n;
    if lambda == 0.0 {
        let eig = gram.clone().symmetric_eigen().eigenvalues;
        let max = eig.max();
        let min = eig.min();
        if !(max > 0.0) || min <= 1e-12 * max {
            return Err(Error::RankDeficient(
                "feature Gram matrix is singular; use lambda > 0".into(),
            ));
        }
    }
    let system = gram + DMatrix::identity(d, d) * lambda;
    let theta = system
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("ridge system is not positive definite; increase lambda".into()))?
        .solve(&rhs);
    let intercept = ym - theta.iter().zip(&xm).map(|(a, b)| a * b).sum::<f64>();
    Ok(TrainedModel {
        family,
        parameters: Parameters::Linear {
            intercept,
            coefficients: theta.iter().copied().collect(),
        },
        meta: meta(data, None),
    })
}

struct TreeGrower<'a> {
    x: &'a DMatrix<f64>,
    y: &'a [f64],
    max_depth: usize,
    min_leaf: usize,
    /// Features considered per split; all of them when `None`.
    per_split: Option<(usize, &'a mut ChaCha8Rng)>,
    nodes: Vec<Node>,
}

struct Candidate {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl TreeGrower<'_> {
    fn grow(&mut self, idx: &mut [usize], depth: usize) -> usize {
        let at = self.nodes.len();
        let n = idx.len() as f64;
        let mean = idx.iter().map(|&i| self.y[i]).sum::<f64>() / n;
        self.nodes.push(Node::Leaf { value: mean });
        let first = self.y[idx[0]];
        let pure = idx.iter().all(|&i| self.y[i] == first);
        if pure || depth >= self.max_depth || idx.len() < 2 * self.min_leaf {
            return at;
        }
        let features: Vec<usize> = match &mut self.per_split {
            Some((m, rng)) if *m < self.x.ncols() => {
                let mut f = sample_indices(&mut **rng, self.x.ncols(), *m).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..self.x.ncols()).collect(),
        };
        let Some(best) = self.best_split(idx, &features) else {
            return at;
        };
        let (f, t) = (best.feature, best.threshold);
        let mid = partition(idx, |i| self.x[(i, f)] <= t);
        let (l, r) = idx.split_at_mut(mid);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[at] = Node::Split {
            feature: f,
            threshold: t,
            left,
            right,
        };
        at
    }

    /// Largest variance reduction; ties go to the lowest feature index, then
    /// the lowest threshold.
    fn best_split(&self, idx: &[usize], features: &[usize]) -> Option<Candidate> {
        let n = idx.len();
        let total: f64 = idx.iter().map(|&i| self.y[i]).sum();
        let mut best: Option<Candidate> = None;
        let mut order: Vec<(f64, f64)> = Vec::with_capacity(n);
        for &f in features {
            order.clear();
            order.extend(idx.iter().map(|&i| (self.x[(i, f)], self.y[i])));
            order.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_sum = 0.0;
            for k in 1..n {
                left_sum += order[k - 1].1;
                let (a, b) = (order[k - 1].0, order[k].0);
                if a == b || k < self.min_leaf || n - k < self.min_leaf {
                    continue;
                }
                let (nl, nr) = (k as f64, (n - k) as f64);
                let ml = left_sum / nl;
                let mr = (total - left_sum) / nr;
                let gain = nl * nr / (nl + nr) * (ml - mr).powi(2);
                let better = match &best {
                    None => true,
                    Some(c) => gain > c.gain * (1.0 + 1e-12) + f64::MIN_POSITIVE,
                };
                if better {
                    let mut threshold = 0.5 * (a + b);
                    if threshold >= b {
                        threshold = a;
                    }
                    best = Some(Candidate {
                        feature: f,
                        threshold,
                        gain,
                    });
                }
            }
        }
        best
    }
}

fn partition(idx: &mut [usize], pred: impl Fn(usize) -> bool) -> usize {
    let mut left: Vec<usize> = Vec::with_capacity(idx.len());
    let mut right: Vec<usize> = Vec::new();
    for &i in idx.iter() {
        if pred(i) {
            left.push(i);
        } else {
            right.push(i);
        }
    }
    let mid = left.len();
    left.extend(right);
    idx.copy_from_slice(&left);
    mid
}

fn grow_tree(
    data: &Dataset,
    rows: &mut [usize],
    max_depth: Option<usize>,
    min_leaf: usize,
    per_split: Option<(usize, &mut ChaCha8Rng)>,
) -> RegressionTree {
    let mut g = TreeGrower {
        x: data.features(),
        y: data.targets(),
        max_depth: max_depth.unwrap_or(usize::MAX),
        min_leaf,
        per_split,
        nodes: Vec::new(),
    };
    g.grow(rows, 0);
    RegressionTree { nodes: g.nodes }
}

pub fn fit_tree(data: &Dataset, max_depth: Option<usize>, min_leaf: usize) -> Result<TrainedModel> {
    let family = Family::Tree { max_depth, min_leaf };
    family.validate()?;
    if data.is_empty() {
        return Err(Error::Data("tree fit on an empty dataset".into()));
    }
    let mut rows: Vec<usize> = (0..data.len()).collect();
    let tree = grow_tree(data, &mut rows, max_depth, min_leaf, None);
    Ok(TrainedModel {
        family,
        parameters: Parameters::Tree(tree),
        meta: meta(data, None),
    })
}

/// Bagged trees with per-split feature subsampling. Tree `t` draws from
/// `stream.derive(t)`.
pub fn fit_forest(
    data: &Dataset,
    n_trees: usize,
    max_depth: Option<usize>,
    min_leaf: usize,
    feature_fraction: f64,
    bootstrap: bool,
    stream: RandomStream,
) -> Result<TrainedModel> {
    let family = Family::Forest {
        n_trees,
        max_depth,
        min_leaf,
        feature_fraction,
        bootstrap,
    };
    family.validate()?;
    if data.is_empty() {
        return Err(Error::Data("forest fit on an empty dataset".into()));
    }
    let n = data.len();
    let m = ((feature_fraction * data.dim() as f64).ceil() as usize).clamp(1, data.dim());
    let trees: Vec<RegressionTree> = (0..n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream.derive(t as u64).rng();
            let mut rows: Vec<usize> = if bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            grow_tree(data, &mut rows, max_depth, min_leaf, Some((m, &mut rng)))
        })
        .collect();
    Ok(TrainedModel {
        family,
        parameters: Parameters::Forest { trees },
        meta: meta(data, Some(stream)),
    })
}

pub fn fit_nearest_centroid(data: &Dataset) -> Result<TrainedModel> {
    if data.is_empty() {
        return Err(Error::Data("nearest-centroid fit needs at least one class".into()));
    }
    if let Some(bad) = data.targets().iter().find(|v| v.fract() != 0.0) {
        return Err(Error::Data(format!("class labels must be integers, got {bad}")));
    }
    let mut labels: Vec<f64> = data.targets().to_vec();
    labels.sort_by(f64::total_cmp);
    labels.dedup();
    let d = data.dim();
    let mut centroids = vec![vec![0.0; d]; labels.len()];
    let mut counts = vec![0usize; labels.len()];
    for i in 0..data.len() {
        let k = labels
            .binary_search_by(|l| l.total_cmp(&data.targets()[i]))
            .expect("label present");
        counts[k] += 1;
        for (j, c) in centroids[k].iter_mut().enumerate() {
            *c += data.features()[(i, j)];
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(TrainedModel {
        family: Family::NearestCentroid,
        parameters: Parameters::Centroids { labels, centroids },
        meta: meta(data, None),
    })
}

pub fn fit_mean(data: &Dataset) -> Result<TrainedModel> {
    if data.is_empty() {
        return Err(Error::Data("mean fit on an empty dataset".into()));
    }
    let value = data.targets().iter().sum::<f64>() / data.len() as f64;
    Ok(TrainedModel {
        family: Family::Mean,
        parameters: Parameters::Constant { value },
        meta: meta(data, None),
    })
}

/// Fit any family; only forests consume the stream.
pub fn fit(family: &Family, data: &Dataset, stream: RandomStream) -> Result<TrainedModel> {
    family.validate()?;
    match *family {
        Family::Ridge { lambda } => fit_ridge(data, lambda),
        Family::Tree { max_depth, min_leaf } => fit_tree(data, max_depth, min_leaf),
        Family::Forest {
            n_trees,
            max_depth,
            min_leaf,
            feature_fraction,
            bootstrap,
        } => fit_forest(
            data,
            n_trees,
            max_depth,
            min_leaf,
            feature_fraction,
            bootstrap,
            stream,
        ),
        Family::NearestCentroid => fit_nearest_centroid(data),
        Family::Mean => fit_mean(data),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    /// Held-out row indices of each fold.
    pub folds: Vec<Vec<usize>>,
    pub fold_risks: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation of the fold risks.
    pub std: f64,
}

/// Shuffled partition of `0..n` into `k` contiguous folds whose sizes differ
/// by at most one.
pub fn fold_partition(n: usize, k: usize, stream: RandomStream) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(Error::param(format!("k must lie in [2, {n}], got {k}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream.rng());
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut at = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(perm[at..at + len].to_vec());
        at += len;
    }
    Ok(folds)
}

/// Fold `f` is fitted with `stream.derive(f)`, so the report does not depend
/// on the order in which folds run.
pub fn kfold_cv(
    problem: &LearningProblem,
    data: &Dataset,
    k: usize,
    stream: RandomStream,
) -> Result<CvReport> {
    problem.family.validate()?;
    let folds = fold_partition(data.len(), k, stream)?;
    let risks = (0..k)
        .into_par_iter()
        .map(|f| {
            let mut train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .flat_map(|(_, v)| v.iter().copied())
                .collect();
            train.sort_unstable();
            let mut model = fit(&problem.family, &data.subset(&train), stream.derive(f as u64))?;
            model.meta.fold = Some(f);
            empirical_risk(&model, &data.subset(&folds[f]), problem.loss)
        })
        .collect::<Vec<Result<f64>>>()
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
    let (mean, std) = mean_std(&risks);
    Ok(CvReport {
        k,
        folds,
        fold_risks: risks,
        mean,
        std,
    })
}

/// A data source with (optionally) observable ground truth.
pub trait SyntheticProcess: Sync {
    fn dim(&self) -> usize;
    fn noise_std(&self) -> f64;
    /// Noiseless regression function, when the process exposes it.
    fn truth(&self, x: &[f64]) -> Option<f64>;
    /// Draw `n` noisy training instances.
    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset>;
    /// Fixed evaluation inputs.
    fn test_grid(&self) -> Vec<Vec<f64>>;
}

/// `y = Σ a_k x^k + σ·ε` with `x` uniform on `range`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolynomialProcess {
    pub coefficients: Vec<f64>,
    pub noise_std: f64,
    pub range: (f64, f64),
    pub grid_points: usize,
}

impl PolynomialProcess {
    pub fn new(coefficients: Vec<f64>, noise_std: f64, range: (f64, f64)) -> Result<Self> {
        if coefficients.is_empty() || !(noise_std >= 0.0) || !(range.0 < range.1) {
            return Err(Error::param("polynomial process needs coefficients, σ >= 0 and lo < hi"));
        }
        Ok(Self {
            coefficients,
            noise_std,
            range,
            grid_points: 50,
        })
    }

    fn poly(&self, x: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, a| acc * x + a)
    }
}

impl SyntheticProcess for PolynomialProcess {
    fn dim(&self) -> usize {
        1
    }

    fn noise_std(&self) -> f64 {
        self.noise_std
    }

    fn truth(&self, x: &[f64]) -> Option<f64> {
        Some(self.poly(x[0]))
    }

    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
        let (lo, hi) = self.range;
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|&x| {
                let e: f64 = rng.sample(StandardNormal);
                self.poly(x) + self.noise_std * e
            })
            .collect();
        Dataset::new(DMatrix::from_vec(n, 1, xs), ys)
    }

    fn test_grid(&self) -> Vec<Vec<f64>> {
        let (lo, hi) = self.range;
        let m = self.grid_points.max(2);
        (0..m)
            .map(|g| vec![lo + (hi - lo) * g as f64 / (m - 1) as f64])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasVarianceReport {
    pub bias_sq: f64,
    pub variance: f64,
    pub noise_var: f64,
    pub total_mse: f64,
    pub repeats: usize,
    pub grid_points: usize,
    /// `total_mse − (bias_sq + variance + noise_var)`.
    pub discrepancy: f64,
    /// Three standard errors of the discrepancy.
    pub tolerance: f64,
}

impl BiasVarianceReport {
    pub fn identity_holds(&self) -> bool {
        self.discrepancy.abs() <= self.tolerance
    }
}

/// Monte Carlo estimate of the bias-variance decomposition on the process's
/// test grid. Repeat `r` draws its training set and fresh test targets from
/// `stream.derive(r)`; the fit uses a child of that stream.
pub fn bias_variance_estimate(
    family: &Family,
    process: &dyn SyntheticProcess,
    n_train: usize,
    repeats: usize,
    stream: RandomStream,
) -> Result<BiasVarianceReport> {
    family.validate()?;
    if repeats < 30 {
        return Err(Error::param(format!("need at least 30 repeats, got {repeats}")));
    }
    let grid = process.test_grid();
    let truth: Vec<f64> = grid
        .iter()
        .map(|x| process.truth(x))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Capability("process does not expose its ground truth".into()))?;
    let sigma = process.noise_std();
    let gm = DMatrix::from_fn(grid.len(), process.dim(), |i, j| grid[i][j]);
    // (predictions, fresh noisy targets) per repeat
    let runs = (0..repeats)
        .into_par_iter()
        .map(|r| -> Result<(Vec<f64>, Vec<f64>)> {
            let unit = stream.derive(r as u64);
            let mut rng = unit.rng();
            let train = process.sample(n_train, &mut rng)?;
            let model = fit(family, &train, unit.derive(1))?;
            let pred = model.predict_all(&gm)?;
            let fresh = truth
                .iter()
                .map(|t| {
                    let e: f64 = rng.sample(StandardNormal);
                    t + sigma * e
                })
                .collect();
            Ok((pred, fresh))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let g = grid.len();
    let rf = repeats as f64;
    let mut bias_sq = 0.0;
    let mut variance = 0.0;
    let mut total = 0.0;
    let mut d = Vec::with_capacity(g * repeats);
    for (j, t) in truth.iter().enumerate() {
        let mean = runs.iter().map(|(p, _)| p[j]).sum::<f64>() / rf;
        bias_sq += (mean - t).powi(2);
        variance += runs.iter().map(|(p, _)| (p[j] - mean).powi(2)).sum::<f64>() / rf;
        for (p, y) in &runs {
            let e = (y[j] - p[j]).powi(2);
            total += e;
            d.push(e - (t - p[j]).powi(2) - sigma * sigma);
        }
    }
    let gf = g as f64;
    let (dm, ds) = mean_std(&d);
    let report = BiasVarianceReport {
        bias_sq: bias_sq / gf,
        variance: variance / gf,
        noise_var: sigma * sigma,
        total_mse: total / (gf * rf),
        repeats,
        grid_points: g,
        discrepancy: 0.0,
        tolerance: 3.0 * ds / (d.len() as f64).sqrt(),
    };
    let discrepancy = report.total_mse - (report.bias_sq + report.variance + report.noise_var);
    debug_assert!((discrepancy - dm).abs() <= 1e-9 * (1.0 + report.total_mse));
    Ok(BiasVarianceReport { discrepancy, ..report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_data(seed: u64, n: usize, d: usize) -> Dataset {
        let mut rng = RandomStream::new(seed, 0).rng();
        let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let y = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Dataset::new(x, y).unwrap()
    }

    #[test]
    fn dataset_invariants() {
        assert!(matches!(
            Dataset::new(DMatrix::zeros(3, 1), vec![0.0; 2]),
            Err(Error::Shape(_))
        ));
        assert!(Dataset::new(DMatrix::zeros(2, 0), vec![0.0; 2]).is_err());
        assert!(matches!(
            Dataset::new(DMatrix::from_element(1, 1, f64::NAN), vec![0.0]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn csv_last_column_is_target() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "a,b,y\n1,2,3\n4,5,6\n").unwrap();
        let d = Dataset::from_csv(&p).unwrap();
        assert_eq!(d.dim(), 2);
        assert_eq!(d.targets(), &[3.0, 6.0]);
        assert_eq!(d.row(1), vec![4.0, 5.0]);
    }

    #[test]
    fn risk_examples() {
        let data = Dataset::from_rows(&[vec![0.0], vec![1.0]], &[1.0, -1.0]).unwrap();
        let zero = TrainedModel {
            family: Family::Mean,
            parameters: Parameters::Constant { value: 0.0 },
            meta: meta(&data, None),
        };
        assert_eq!(empirical_risk(&zero, &data, Loss::SquaredError).unwrap(), 1.0);

        let exact = fit_tree(&data, None, 1).unwrap();
        assert_eq!(empirical_risk(&exact, &data, Loss::SquaredError).unwrap(), 0.0);

        let labels = Dataset::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]], &[1.0, 1.0, 1.0, 0.0]).unwrap();
        let one = TrainedModel {
            family: Family::Mean,
            parameters: Parameters::Constant { value: 1.0 },
            meta: meta(&labels, None),
        };
        assert_eq!(empirical_risk(&one, &labels, Loss::ZeroOne).unwrap(), 0.25);

        let wide = random_data(1, 4, 3);
        assert!(matches!(empirical_risk(&zero, &wide, Loss::SquaredError), Err(Error::Shape(_))));
    }

    #[test]
    fn ridge_interpolates_square_system() {
        let data = random_data(2, 4, 3);
        let m = fit_ridge(&data, 0.0).unwrap();
        assert!(empirical_risk(&m, &data, Loss::SquaredError).unwrap() < 1e-20);
    }

    #[test]
    fn ridge_heavy_penalty_predicts_mean() {
        let data = random_data(3, 30, 3);
        let m = fit_ridge(&data, 1e9).unwrap();
        let Parameters::Linear { coefficients, .. } = &m.parameters else { panic!() };
        assert!(coefficients.iter().map(|c| c * c).sum::<f64>().sqrt() < 1e-6);
        let ym = data.targets().iter().sum::<f64>() / 30.0;
        assert!((m.predict(&[0.3, -0.2, 0.9]) - ym).abs() < 1e-6);
    }

    #[test]
    fn ridge_matches_augmented_normal_equations() {
        let data = random_data(4, 50, 3);
        let lambda = 0.1;
        let m = fit_ridge(&data, lambda).unwrap();
        let Parameters::Linear { intercept, coefficients } = &m.parameters else { panic!() };
        // Oracle: solve the augmented system with LU, penalty off the intercept.
        let n = 50.0;
        let a = DMatrix::from_fn(50, 4, |i, j| if j == 0 { 1.0 } else { data.features()[(i, j - 1)] });
        let mut p = DMatrix::identity(4, 4) * lambda;
        p[(0, 0)] = 0.0;
        let lhs = a.transpose() * &a / n + p;
        let rhs = a.transpose() * DVector::from_column_slice(data.targets()) / n;
        let theta = lhs.lu().solve(&rhs).unwrap();
        assert!((intercept - theta[0]).abs() < 1e-8);
        for j in 0..3 {
            assert!((coefficients[j] - theta[j + 1]).abs() < 1e-8);
        }
    }

    #[test]
    fn ridge_singular_needs_penalty() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let data = Dataset::from_rows(&rows, &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!(matches!(fit_ridge(&data, 0.0), Err(Error::RankDeficient(_))));
        assert!(fit_ridge(&data, 1e-3).is_ok());
        assert!(fit_ridge(&data, -1.0).is_err());
    }

    #[test]
    fn ridge_predictions_continuous_in_lambda() {
        let data = random_data(5, 40, 4);
        let x = [0.1, 0.2, -0.3, 0.4];
        let p0 = fit_ridge(&data, 0.5).unwrap().predict(&x);
        let p1 = fit_ridge(&data, 0.5 + 1e-8).unwrap().predict(&x);
        assert!((p0 - p1).abs() < 1e-6);
    }

    #[test]
    fn constant_target_is_single_leaf() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let data = Dataset::from_rows(&rows, &[2.5; 10]).unwrap();
        let m = fit_tree(&data, None, 1).unwrap();
        let Parameters::Tree(t) = &m.parameters else { panic!() };
        assert_eq!(t.nodes.len(), 1);
        assert_eq!(m.predict(&[100.0]), 2.5);
    }

    #[test]
    fn step_split_at_straddling_midpoint() {
        let xs = [-3.0, -1.5, -0.5, 0.25, 1.0, 2.0];
        let rows: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| f64::from(u8::from(x > 0.0))).collect();
        let data = Dataset::from_rows(&rows, &ys).unwrap();
        let m = fit_tree(&data, Some(1), 1).unwrap();
        let Parameters::Tree(t) = &m.parameters else { panic!() };
        // Brute force over every midpoint: the best one has zero residual.
        let mut best = (f64::INFINITY, 0.0);
        for k in 1..xs.len() {
            let thr = 0.5 * (xs[k - 1] + xs[k]);
            let sse = |s: &[f64]| {
                let m = s.iter().sum::<f64>() / s.len() as f64;
                s.iter().map(|v| (v - m).powi(2)).sum::<f64>()
            };
            let total = sse(&ys[..k]) + sse(&ys[k..]);
            if total < best.0 {
                best = (total, thr);
            }
        }
        assert_eq!(best.0, 0.0);
        assert!(matches!(t.nodes[0], Node::Split { threshold, .. } if threshold == best.1));
        assert_eq!(empirical_risk(&m, &data, Loss::SquaredError).unwrap(), 0.0);
    }

    #[test]
    fn tie_prefers_lowest_feature_then_threshold() {
        // Both columns separate the targets identically.
        let rows = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]];
        let data = Dataset::from_rows(&rows, &[0.0, 0.0, 1.0, 1.0]).unwrap();
        let Parameters::Tree(t) = fit_tree(&data, Some(1), 1).unwrap().parameters else { panic!() };
        assert!(matches!(t.nodes[0], Node::Split { feature: 0, threshold, .. } if threshold == 1.5));

        // Symmetric targets: splits at 0.5 and 2.5 give the same gain.
        let rows: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64]).collect();
        let data = Dataset::from_rows(&rows, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let Parameters::Tree(t) = fit_tree(&data, Some(1), 1).unwrap().parameters else { panic!() };
        assert!(matches!(t.nodes[0], Node::Split { threshold, .. } if threshold == 0.5));
    }

    #[test]
    fn deep_tree_memorises_distinct_rows() {
        for seed in 0..5 {
            let data = random_data(10 + seed, 60, 3);
            let m = fit_tree(&data, None, 1).unwrap();
            assert_eq!(empirical_risk(&m, &data, Loss::SquaredError).unwrap(), 0.0);
        }
        // XOR has no single split with positive gain but is still memorised.
        let rows = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]];
        let data = Dataset::from_rows(&rows, &[0.0, 1.0, 1.0, 0.0]).unwrap();
        let m = fit_tree(&data, None, 1).unwrap();
        assert_eq!(empirical_risk(&m, &data, Loss::SquaredError).unwrap(), 0.0);
    }

    #[test]
    fn min_leaf_respected() {
        let data = random_data(6, 40, 2);
        let m = fit_tree(&data, None, 5).unwrap();
        let Parameters::Tree(t) = &m.parameters else { panic!() };
        let mut counts = vec![0usize; t.nodes.len()];
        for i in 0..data.len() {
            let x = data.row(i);
            let mut at = 0;
            while let Node::Split { feature, threshold, left, right } = t.nodes[at] {
                at = if x[feature] <= threshold { left } else { right };
            }
            counts[at] += 1;
        }
        for (k, node) in t.nodes.iter().enumerate() {
            if matches!(node, Node::Leaf { .. }) {
                assert!(counts[k] >= 5);
            }
        }
        assert!(fit_tree(&data, None, 0).is_err());
        assert!(fit_tree(&data, Some(0), 1).is_err());
    }

    #[test]
    fn training_risk_non_increasing_in_depth() {
        let mut avg = vec![0.0; 8];
        for seed in 0..30 {
            let data = random_data(100 + seed, 50, 3);
            for (k, depth) in (1..=8).enumerate() {
                let m = fit_tree(&data, Some(depth), 1).unwrap();
                avg[k] += empirical_risk(&m, &data, Loss::SquaredError).unwrap() / 30.0;
            }
        }
        assert!(avg.windows(2).all(|w| w[1] <= w[0]), "{avg:?}");
    }

    #[test]
    fn degenerate_forest_is_a_tree() {
        let data = random_data(7, 40, 4);
        let tree = fit_tree(&data, Some(4), 2).unwrap();
        let forest = fit_forest(&data, 1, Some(4), 2, 1.0, false, RandomStream::new(1, 1)).unwrap();
        let (Parameters::Tree(t), Parameters::Forest { trees }) = (&tree.parameters, &forest.parameters) else {
            panic!()
        };
        assert_eq!(t, &trees[0]);
    }

    #[test]
    fn forest_constant_target_and_reproducibility() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let data = Dataset::from_rows(&rows, &[4.0; 20]).unwrap();
        for seed in 0..3 {
            let m = fit_forest(&data, 10, None, 1, DEFAULT_FEATURE_FRACTION, true, RandomStream::new(seed, 0)).unwrap();
            assert_eq!(m.predict(&[3.0, 7.0]), 4.0);
        }
        let data = random_data(8, 50, 5);
        let a = fit_forest(&data, 20, None, 1, 0.4, true, RandomStream::new(3, 4)).unwrap();
        let b = fit_forest(&data, 20, None, 1, 0.4, true, RandomStream::new(3, 4)).unwrap();
        assert_eq!(a, b);
        assert!(fit_forest(&data, 5, None, 1, 0.0, true, RandomStream::new(3, 4)).is_err());
        assert!(fit_forest(&data, 0, None, 1, 0.5, true, RandomStream::new(3, 4)).is_err());
    }

    #[test]
    fn forest_beats_single_deep_tree_on_average() {
        let (mut forest_mse, mut tree_mse) = (0.0, 0.0);
        let test: Vec<Vec<f64>> = (0..200).map(|i| vec![-3.0 + 6.0 * i as f64 / 199.0]).collect();
        for seed in 0..30 {
            let mut rng = RandomStream::new(seed, 9).rng();
            let rows: Vec<Vec<f64>> = (0..80).map(|_| vec![rng.random_range(-3.0..3.0)]).collect();
            let ys: Vec<f64> = rows
                .iter()
                .map(|x| x[0].sin() + 0.3 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let data = Dataset::from_rows(&rows, &ys).unwrap();
            let t = fit_tree(&data, None, 1).unwrap();
            let f = fit_forest(&data, 50, None, 1, 1.0, true, RandomStream::new(seed, 1)).unwrap();
            for x in &test {
                tree_mse += (t.predict(x) - x[0].sin()).powi(2);
                forest_mse += (f.predict(x) - x[0].sin()).powi(2);
            }
        }
        assert!(forest_mse <= tree_mse, "{forest_mse} > {tree_mse}");
    }

    #[test]
    fn nearest_centroid_examples() {
        let rows = vec![vec![-1.0, -1.0], vec![1.0, 1.0], vec![9.0, 9.0], vec![11.0, 11.0]];
        let data = Dataset::from_rows(&rows, &[0.0, 0.0, 1.0, 1.0]).unwrap();
        let m = fit_nearest_centroid(&data).unwrap();
        assert_eq!(m.predict(&[1.0, 1.0]), 0.0);
        assert_eq!(m.predict(&[5.0, 5.0]), 0.0);
        assert_eq!(m.predict(&[6.0, 5.0]), 1.0);

        let on = Dataset::from_rows(&[vec![0.0, 0.0], vec![10.0, 10.0]], &[3.0, 7.0]).unwrap();
        let m = fit_nearest_centroid(&on).unwrap();
        assert_eq!(empirical_risk(&m, &on, Loss::ZeroOne).unwrap(), 0.0);

        let bad = Dataset::from_rows(&[vec![0.0]], &[0.5]).unwrap();
        assert!(matches!(fit_nearest_centroid(&bad), Err(Error::Data(_))));
    }

    #[test]
    fn kfold_examples() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i % 3) as f64]).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let data = Dataset::from_rows(&rows, &ys).unwrap();
        let p = LearningProblem::regression(Family::Ridge { lambda: 0.0 });
        let r = kfold_cv(&p, &data, 5, RandomStream::new(1, 0)).unwrap();
        assert!(r.mean < 1e-10);
        assert_eq!(r, kfold_cv(&p, &data, 5, RandomStream::new(1, 0)).unwrap());

        let small = data.subset(&[0, 1, 2, 3, 4]);
        let folds = fold_partition(5, 5, RandomStream::new(2, 0)).unwrap();
        assert!(folds.iter().all(|f| f.len() == 1));
        let p = LearningProblem::regression(Family::Mean);
        assert_eq!(kfold_cv(&p, &small, 5, RandomStream::new(2, 0)).unwrap().fold_risks.len(), 5);
        assert!(kfold_cv(&p, &small, 1, RandomStream::new(2, 0)).is_err());
        assert!(kfold_cv(&p, &small, 6, RandomStream::new(2, 0)).is_err());
    }

    proptest! {
        #[test]
        fn folds_partition_rows(n in 2usize..60, kseed in 0usize..1000, seed in any::<u64>()) {
            let k = 2 + kseed % (n - 1);
            let folds = fold_partition(n, k, RandomStream::new(seed, 0)).unwrap();
            prop_assert_eq!(folds.len(), k);
            let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let mut all: Vec<usize> = folds.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn model_roundtrips_through_json() {
        let data = random_data(9, 30, 3);
        let m = fit_forest(&data, 3, Some(3), 2, 0.5, true, RandomStream::new(1, 2)).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: TrainedModel = serde_json::from_str(&s).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn bias_variance_noiseless_realisable() {
        let p = PolynomialProcess::new(vec![1.0, 2.0], 0.0, (-1.0, 1.0)).unwrap();
        let r = bias_variance_estimate(&Family::Ridge { lambda: 0.0 }, &p, 20, 30, RandomStream::new(1, 0)).unwrap();
        assert!(r.bias_sq < 1e-6);
        assert!((r.total_mse - r.variance).abs() < 1e-12);
    }

    #[test]
    fn mean_predictor_bias_matches_analytic() {
        // Line a·x + b on [lo, hi]: the mean predictor converges to a·mid + b,
        // so bias² over the grid is a²·(population variance of the grid).
        let (a, lo, hi) = (3.0, 0.0, 2.0);
        let p = PolynomialProcess::new(vec![1.0, a], 0.1, (lo, hi)).unwrap();
        let grid: Vec<f64> = p.test_grid().iter().map(|x| x[0]).collect();
        let gm = grid.iter().sum::<f64>() / grid.len() as f64;
        let gvar = grid.iter().map(|x| (x - gm).powi(2)).sum::<f64>() / grid.len() as f64;
        let expected = a * a * gvar;
        for repeats in [100, 400] {
            let r = bias_variance_estimate(&Family::Mean, &p, 200, repeats, RandomStream::new(2, 0)).unwrap();
            assert!((r.bias_sq - expected).abs() < 0.02 * expected, "{} vs {expected}", r.bias_sq);
        }
    }

    #[test]
    fn decomposition_identity_holds() {
        let p = PolynomialProcess::new(vec![0.5, -1.0, 2.0], 0.3, (-1.0, 1.0)).unwrap();
        for fam in [
            Family::Ridge { lambda: 0.01 },
            Family::Tree { max_depth: Some(4), min_leaf: 2 },
        ] {
            let r = bias_variance_estimate(&fam, &p, 40, 100, RandomStream::new(3, 0)).unwrap();
            assert!(r.identity_holds(), "{r:?}");
        }
    }

    struct Opaque;
    impl SyntheticProcess for Opaque {
        fn dim(&self) -> usize {
            1
        }
        fn noise_std(&self) -> f64 {
            0.0
        }
        fn truth(&self, _: &[f64]) -> Option<f64> {
            None
        }
        fn sample(&self, n: usize, _: &mut ChaCha8Rng) -> Result<Dataset> {
            Dataset::new(DMatrix::zeros(n, 1), vec![0.0; n])
        }
        fn test_grid(&self) -> Vec<Vec<f64>> {
            vec![vec![0.0]]
        }
    }

    #[test]
    fn bias_variance_preconditions() {
        let fam = Family::Mean;
        assert!(matches!(
            bias_variance_estimate(&fam, &Opaque, 10, 30, RandomStream::new(0, 0)),
            Err(Error::Capability(_))
        ));
        let p = PolynomialProcess::new(vec![1.0], 0.1, (0.0, 1.0)).unwrap();
        assert!(bias_variance_estimate(&fam, &p, 10, 29, RandomStream::new(0, 0)).is_err());
    }
}
