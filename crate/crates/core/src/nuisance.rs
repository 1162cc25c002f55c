//! Outcome regression `Q(w, a)`, conditional exposure density `g(a | w)` and the derived
//! quantities every estimator needs: the plug-in curve and the stability weights.
//!
//! Learners plug in through [`RegressionLearner`]. The default is a ridge-penalized sieve
//! ([`RidgeLearner`]) over low-order polynomial and trigonometric features, tuned by K-fold
//! cross-validation. The density is a kernel-smoothed conditional regression on a grid of
//! exposure values, fitted on the log scale and linearly interpolated.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::SobolevBasis;
use crate::data::ObservationSet;
use crate::error::{Error, Result};
use crate::numerics::{linspace, log_grid, std_normal_pdf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Squared,
    /// Poisson-type loss with a log link; predictions are positive.
    Log,
}

/// A fitted regression function of a feature row.
pub trait Predictor: Send + Sync {
    fn predict(&self, x: &[f64]) -> f64;
}

/// A learner with a finite hyperparameter grid, tuned by cross-validation.
pub trait RegressionLearner: Send + Sync {
    /// Number of hyperparameter settings.
    fn grid_len(&self) -> usize;

    /// A numeric label for setting `k`, used in CV tables.
    fn hyper_label(&self, k: usize) -> f64;

    fn fit(&self, x: &DMatrix<f64>, y: &[f64], loss: Loss, hyper: usize)
        -> Result<Box<dyn Predictor>>;
}

/// Cross-validated error for every hyperparameter setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvTable {
    pub hyper: Vec<f64>,
    pub mean_error: Vec<f64>,
    /// Standard deviation of the per-fold errors.
    pub fold_sd: Vec<f64>,
    pub chosen: usize,
}

/// Fold label of row `i`; rows are dealt out in turn.
pub fn fold_of(i: usize, folds: usize) -> usize {
    i % folds
}

fn loss_value(loss: Loss, y: f64, pred: f64) -> f64 {
    match loss {
        Loss::Squared => (y - pred) * (y - pred),
        // Poisson deviance, finite for y = 0.
        Loss::Log => {
            let p = pred.max(1e-300);
            let t = if y > 0.0 { y * (y / p).ln() } else { 0.0 };
            2.0 * (t - (y - p))
        }
    }
}

/// K-fold cross-validation over the learner's grid; picks the smallest mean error.
pub fn cross_validate(
    learner: &dyn RegressionLearner,
    x: &DMatrix<f64>,
    y: &[f64],
    loss: Loss,
    folds: usize,
) -> Result<CvTable> {
    let n = y.len();
    if folds < 2 || n < 2 * folds {
        return Err(Error::InvalidInput(format!(
            "cross-validation needs at least {} rows for {folds} folds, found {n}",
            2 * folds
        )));
    }
    let splits: Vec<(Vec<usize>, Vec<usize>)> = (0..folds)
        .map(|f| (0..n).partition(|&i| fold_of(i, folds) != f))
        .collect();
    let per_fold: Vec<Vec<f64>> = splits
        .par_iter()
        .map(|(train, test)| -> Result<Vec<f64>> {
            let xt = x.select_rows(train.iter());
            let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            (0..learner.grid_len())
                .map(|k| {
                    let p = learner.fit(&xt, &yt, loss, k)?;
                    let err: f64 = test
                        .iter()
                        .map(|&i| {
                            let row: Vec<f64> = x.row(i).iter().copied().collect();
                            loss_value(loss, y[i], p.predict(&row))
                        })
                        .sum();
                    Ok(err / test.len() as f64)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let grid = learner.grid_len();
    let mut mean_error = vec![0.0; grid];
    let mut fold_sd = vec![0.0; grid];
    for k in 0..grid {
        let errs: Vec<f64> = per_fold.iter().map(|f| f[k]).collect();
        let m = errs.iter().sum::<f64>() / folds as f64;
        let v = errs.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / (folds - 1) as f64;
        mean_error[k] = m;
        fold_sd[k] = v.sqrt();
    }
    let chosen = argmin(&mean_error);
    Ok(CvTable {
        hyper: (0..grid).map(|k| learner.hyper_label(k)).collect(),
        mean_error,
        fold_sd,
        chosen,
    })
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &e) in v.iter().enumerate() {
        if e < v[best] {
            best = k;
        }
    }
    best
}

/// Ridge regression on standardized features with an unpenalized intercept.
///
/// For squared loss it minimizes `(1/2n)‖y − b0 − Xβ‖² + (λ/2)‖β‖²`; for the log loss it
/// minimizes `(1/n)Σ(exp(η) − yη) + (λ/2)‖β‖²` by damped Newton steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeLearner {
    pub penalties: Vec<f64>,
}

impl Default for RidgeLearner {
    fn default() -> Self {
        Self {
            penalties: log_grid(1e-6, 1e2, 17),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinearPredictor {
    pub intercept: f64,
    pub beta: Vec<f64>,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    pub loss: Loss,
}

impl LinearPredictor {
    fn eta(&self, x: &[f64]) -> f64 {
        self.intercept
            + self
                .beta
                .iter()
                .zip(x)
                .zip(self.center.iter().zip(&self.scale))
                .map(|((b, x), (c, s))| b * (x - c) / s)
                .sum::<f64>()
    }
}

impl Predictor for LinearPredictor {
    fn predict(&self, x: &[f64]) -> f64 {
        let e = self.eta(x);
        match self.loss {
            Loss::Squared => e,
            Loss::Log => e.clamp(-50.0, 50.0).exp(),
        }
    }
}

fn standardize(x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    let mut center = Vec::with_capacity(x.ncols());
    let mut scale = Vec::with_capacity(x.ncols());
    let mut xs = x.clone();
    for j in 0..x.ncols() {
        let col = x.column(j);
        let m = col.sum() / n;
        let s = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
        let s = if s > 1e-12 * (1.0 + m.abs()) { s } else { 1.0 };
        for i in 0..x.nrows() {
            xs[(i, j)] = (x[(i, j)] - m) / s;
        }
        center.push(m);
        scale.push(s);
    }
    (xs, center, scale)
}

impl RidgeLearner {
    pub fn new(penalties: Vec<f64>) -> Self {
        Self { penalties }
    }

    fn fit_squared(&self, xs: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<(f64, Vec<f64>)> {
        let n = y.len() as f64;
        let ybar = y.iter().sum::<f64>() / n;
        let p = xs.ncols();
        if p == 0 {
            return Ok((ybar, vec![]));
        }
        let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - ybar));
        let mut a = xs.tr_mul(xs) / n;
        for j in 0..p {
            a[(j, j)] += lambda;
        }
        let b = xs.tr_mul(&yc) / n;
        let beta = a
            .cholesky()
            .ok_or_else(|| Error::Learner("ridge system is not positive definite".into()))?
            .solve(&b);
        Ok((ybar, beta.iter().copied().collect()))
    }

    fn fit_log(&self, xs: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<(f64, Vec<f64>)> {
        let n = y.len();
        let nf = n as f64;
        let p = xs.ncols();
        let ybar = y.iter().sum::<f64>() / nf;
        if !(ybar > 0.0) {
            return Err(Error::Learner("log-link fit needs a positive mean response".into()));
        }
        // θ = (b0, β); design with a leading column of ones.
        let mut theta = DVector::zeros(p + 1);
        theta[0] = ybar.ln();
        let design = {
            let mut d = DMatrix::from_element(n, p + 1, 1.0);
            d.view_mut((0, 1), (n, p)).copy_from(xs);
            d
        };
        let objective = |th: &DVector<f64>| -> f64 {
            let eta = &design * th;
            let data: f64 = eta
                .iter()
                .zip(y)
                .map(|(e, yi)| e.clamp(-50.0, 50.0).exp() - yi * e)
                .sum::<f64>()
                / nf;
            data + 0.5 * lambda * th.rows(1, p).norm_squared()
        };
        let mut obj = objective(&theta);
        for _ in 0..100 {
            let eta = &design * &theta;
            let mu: Vec<f64> = eta.iter().map(|e| e.clamp(-50.0, 50.0).exp()).collect();
            let resid = DVector::from_iterator(n, mu.iter().zip(y).map(|(m, yi)| m - yi));
            let mut grad = design.tr_mul(&resid) / nf;
            let mut weighted = design.clone();
            for i in 0..n {
                let s = mu[i].sqrt();
                for j in 0..=p {
                    weighted[(i, j)] *= s;
                }
            }
            let mut hess = weighted.tr_mul(&weighted) / nf;
            for j in 1..=p {
                grad[j] += lambda * theta[j];
                hess[(j, j)] += lambda;
            }
            // A tiny jitter keeps the intercept direction solvable when every μ underflows.
            for j in 0..=p {
                hess[(j, j)] += 1e-12;
            }
            let step = hess
                .cholesky()
                .ok_or_else(|| Error::Learner("log-link Newton system is singular".into()))?
                .solve(&grad);
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let cand = &theta - &step * t;
                let c = objective(&cand);
                if c <= obj {
                    theta = cand;
                    obj = c;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted || step.amax() * t < 1e-10 {
                break;
            }
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Learner("log-link fit diverged".into()));
        }
        Ok((theta[0], theta.rows(1, p).iter().copied().collect()))
    }
}

impl RegressionLearner for RidgeLearner {
    fn grid_len(&self) -> usize {
        self.penalties.len()
    }

    fn hyper_label(&self, k: usize) -> f64 {
        self.penalties[k]
    }

    fn fit(
        &self,
        x: &DMatrix<f64>,
        y: &[f64],
        loss: Loss,
        hyper: usize,
    ) -> Result<Box<dyn Predictor>> {
        let lambda = *self
            .penalties
            .get(hyper)
            .ok_or_else(|| Error::InvalidInput(format!("no penalty at index {hyper}")))?;
        let (xs, center, scale) = standardize(x);
        let (intercept, beta) = match loss {
            Loss::Squared => self.fit_squared(&xs, y, lambda)?,
            Loss::Log => self.fit_log(&xs, y, lambda)?,
        };
        Ok(Box::new(LinearPredictor {
            intercept,
            beta,
            center,
            scale,
            loss,
        }))
    }
}

/// Covariate terms up to the given total degree (at most 3): `w_j`, `w_j²`, `w_j w_k`, `w_j³`.
pub fn covariate_features(w: &[f64], degree: usize, out: &mut Vec<f64>) {
    let q = w.len();
    if degree >= 1 {
        out.extend_from_slice(w);
    }
    if degree >= 2 {
        out.extend(w.iter().map(|v| v * v));
        for j in 0..q {
            for k in j + 1..q {
                out.push(w[j] * w[k]);
            }
        }
    }
    if degree >= 3 {
        out.extend(w.iter().map(|v| v * v * v));
    }
}

/// Feature map of the default outcome sieve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeFeatures {
    /// Margin of the periodic embedding used by the trigonometric terms.
    pub margin: f64,
    pub covariate_degree: usize,
    pub trig_terms: usize,
}

impl OutcomeFeatures {
    pub fn new(basis: &SobolevBasis) -> Self {
        Self {
            margin: basis.margin(),
            covariate_degree: 3,
            trig_terms: 2,
        }
    }

    pub fn row(&self, w: &[f64], a01: f64) -> Vec<f64> {
        let mut cov = Vec::new();
        covariate_features(w, self.covariate_degree, &mut cov);
        let t = a01 - 0.5;
        let mut out = Vec::with_capacity(cov.len() * 2 + 3 + 2 * self.trig_terms);
        out.extend_from_slice(&[t, t * t, t * t * t]);
        let u = self.margin + (1.0 - 2.0 * self.margin) * a01;
        for k in 1..=self.trig_terms {
            let x = 2.0 * PI * k as f64 * u;
            out.push(x.cos());
            out.push(x.sin());
        }
        out.extend(cov.iter().map(|c| c * t));
        out.extend(cov);
        out
    }

    pub fn design(&self, data: &ObservationSet) -> DMatrix<f64> {
        let rows: Vec<Vec<f64>> = (0..data.n())
            .map(|i| self.row(&data.w_row(i), data.a01()[i]))
            .collect();
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }
}

/// Conditional mean `Q(w, a01)`.
pub trait OutcomeModel: Send + Sync {
    fn predict(&self, w: &[f64], a01: f64) -> f64;
}

impl<F: Fn(&[f64], f64) -> f64 + Send + Sync> OutcomeModel for F {
    fn predict(&self, w: &[f64], a01: f64) -> f64 {
        self(w, a01)
    }
}

/// Conditional density `g(a01 | w)` on the rescaled exposure scale, before flooring.
pub trait ConditionalDensity: Send + Sync {
    fn density(&self, w: &[f64], a01: f64) -> f64;

    /// Density at several exposures for one covariate row.
    fn density_many(&self, w: &[f64], a01: &[f64]) -> Vec<f64> {
        a01.iter().map(|&a| self.density(w, a)).collect()
    }
}

impl<F: Fn(&[f64], f64) -> f64 + Send + Sync> ConditionalDensity for F {
    fn density(&self, w: &[f64], a01: f64) -> f64 {
        self(w, a01)
    }
}

/// Outcome regression selected by cross-validation.
pub struct FittedOutcome {
    pub features: OutcomeFeatures,
    predictor: Box<dyn Predictor>,
    pub cv: Option<CvTable>,
}

impl fmt::Debug for FittedOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FittedOutcome")
            .field("features", &self.features)
            .field("cv", &self.cv)
            .finish()
    }
}

struct ConstantPredictor(f64);

impl Predictor for ConstantPredictor {
    fn predict(&self, _: &[f64]) -> f64 {
        self.0
    }
}

impl OutcomeModel for FittedOutcome {
    fn predict(&self, w: &[f64], a01: f64) -> f64 {
        self.predictor.predict(&self.features.row(w, a01))
    }
}

/// Fits `Q(w, a01)` with `learner`, choosing the hyperparameter by `folds`-fold CV on squared error.
pub fn fit_conditional_mean(
    data: &ObservationSet,
    learner: &dyn RegressionLearner,
    folds: usize,
    features: OutcomeFeatures,
) -> Result<FittedOutcome> {
    let n = data.n();
    if n < 2 * folds {
        return Err(Error::TooFewRows {
            needed: 2 * folds,
            found: n,
        });
    }
    let y = data.y();
    let first = y[0];
    if y.iter().all(|&v| v == first) {
        return Ok(FittedOutcome {
            features,
            predictor: Box::new(ConstantPredictor(first)),
            cv: None,
        });
    }
    let x = features.design(data);
    let cv = cross_validate(learner, &x, y, Loss::Squared, folds)?;
    let predictor = learner.fit(&x, y, Loss::Squared, cv.chosen)?;
    Ok(FittedOutcome {
        features,
        predictor,
        cv: Some(cv),
    })
}

/// Gaussian kernel of width `r` centred at `center`, reflected at both ends of `[0, 1]`.
pub fn reflected_kernel(x: f64, center: f64, r: f64) -> f64 {
    (std_normal_pdf((x - center) / r)
        + std_normal_pdf((x + center) / r)
        + std_normal_pdf((2.0 - x - center) / r))
        / r
}

/// Leave-one-out log-likelihood of the reflected marginal KDE for each bandwidth.
pub fn marginal_bandwidth_scores(a01: &[f64], bandwidths: &[f64]) -> Vec<f64> {
    let n = a01.len();
    bandwidths
        .par_iter()
        .map(|&r| {
            let mut ll = 0.0;
            for i in 0..n {
                let mut s = 0.0;
                for j in 0..n {
                    if j != i {
                        s += reflected_kernel(a01[i], a01[j], r);
                    }
                }
                ll += (s / (n - 1) as f64).max(1e-300).ln();
            }
            ll / n as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensityConfig {
    pub grid_size: usize,
    pub bandwidths: Vec<f64>,
    pub g_floor: f64,
    /// Choose the bandwidth by held-out conditional log-likelihood instead of the marginal KDE.
    pub conditional_cv: bool,
    /// Number of grid points pooled when cross-validating the penalty.
    pub cv_points: usize,
    pub covariate_degree: usize,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            grid_size: 51,
            bandwidths: log_grid(0.01, 0.5, 12),
            g_floor: 0.01,
            conditional_cv: false,
            cv_points: 9,
            covariate_degree: 2,
        }
    }
}

/// Grid-based density: log-linear regressions at each grid point, renormalized per `w`.
pub struct GridDensity {
    pub grid: Vec<f64>,
    pub bandwidth: f64,
    pub penalty: f64,
    covariate_degree: usize,
    predictors: Vec<Box<dyn Predictor>>,
}

impl fmt::Debug for GridDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GridDensity")
            .field("grid_size", &self.grid.len())
            .field("bandwidth", &self.bandwidth)
            .field("penalty", &self.penalty)
            .finish()
    }
}

impl GridDensity {
    /// Normalized density values at the grid points for covariate row `w`.
    pub fn profile(&self, w: &[f64]) -> Vec<f64> {
        let mut x = Vec::new();
        covariate_features(w, self.covariate_degree, &mut x);
        let mut vals: Vec<f64> = self.predictors.iter().map(|p| p.predict(&x)).collect();
        let g = &self.grid;
        let mut area = 0.0;
        for j in 1..g.len() {
            area += 0.5 * (vals[j] + vals[j - 1]) * (g[j] - g[j - 1]);
        }
        let span = g[g.len() - 1] - g[0];
        if area > 0.0 && area.is_finite() {
            for v in &mut vals {
                *v /= area;
            }
        } else {
            vals.iter_mut().for_each(|v| *v = 1.0 / span);
        }
        vals
    }

    fn interpolate(&self, profile: &[f64], a01: f64) -> f64 {
        let g = &self.grid;
        let last = g.len() - 1;
        if a01 <= g[0] {
            return profile[0];
        }
        if a01 >= g[last] {
            return profile[last];
        }
        let h = (g[last] - g[0]) / last as f64;
        let j = (((a01 - g[0]) / h).floor() as usize).min(last - 1);
        let t = (a01 - g[j]) / (g[j + 1] - g[j]);
        profile[j] * (1.0 - t) + profile[j + 1] * t
    }
}

impl ConditionalDensity for GridDensity {
    fn density(&self, w: &[f64], a01: f64) -> f64 {
        let p = self.profile(w);
        self.interpolate(&p, a01)
    }

    fn density_many(&self, w: &[f64], a01: &[f64]) -> Vec<f64> {
        let p = self.profile(w);
        a01.iter().map(|&a| self.interpolate(&p, a)).collect()
    }
}

fn covariate_design(data: &ObservationSet, degree: usize) -> DMatrix<f64> {
    let rows: Vec<Vec<f64>> = (0..data.n())
        .map(|i| {
            let mut v = Vec::new();
            covariate_features(&data.w_row(i), degree, &mut v);
            v
        })
        .collect();
    let p = rows[0].len();
    DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j])
}

fn kernel_targets(a01: &[f64], center: f64, r: f64) -> Vec<f64> {
    a01.iter().map(|&a| reflected_kernel(a, center, r)).collect()
}

/// Penalty chosen by CV pooled over a subset of grid points.
fn density_penalty(
    x: &DMatrix<f64>,
    a01: &[f64],
    grid: &[f64],
    r: f64,
    learner: &dyn RegressionLearner,
    folds: usize,
    points: usize,
) -> Result<(usize, CvTable)> {
    let pick: Vec<usize> = if points >= grid.len() {
        (0..grid.len()).collect()
    } else {
        (0..points)
            .map(|k| (k * (grid.len() - 1)) / (points - 1).max(1))
            .collect()
    };
    let mut pooled: Option<CvTable> = None;
    for &j in &pick {
        let y = kernel_targets(a01, grid[j], r);
        let t = cross_validate(learner, x, &y, Loss::Log, folds)?;
        pooled = Some(match pooled {
            None => t,
            Some(mut acc) => {
                for k in 0..acc.mean_error.len() {
                    acc.mean_error[k] += t.mean_error[k];
                    acc.fold_sd[k] = (acc.fold_sd[k].powi(2) + t.fold_sd[k].powi(2)).sqrt();
                }
                acc
            }
        });
    }
    let mut table = pooled.expect("at least one grid point");
    table.chosen = argmin(&table.mean_error);
    Ok((table.chosen, table))
}

fn fit_grid_density(
    x: &DMatrix<f64>,
    a01: &[f64],
    grid: &[f64],
    r: f64,
    learner: &dyn RegressionLearner,
    hyper: usize,
    degree: usize,
) -> Result<GridDensity> {
    let predictors = grid
        .par_iter()
        .map(|&c| learner.fit(x, &kernel_targets(a01, c, r), Loss::Log, hyper))
        .collect::<Result<Vec<_>>>()?;
    Ok(GridDensity {
        grid: grid.to_vec(),
        bandwidth: r,
        penalty: learner.hyper_label(hyper),
        covariate_degree: degree,
        predictors,
    })
}

/// Fits `g(a01 | w)` and returns it with the chosen bandwidth.
pub fn fit_conditional_density(
    data: &ObservationSet,
    learner: &dyn RegressionLearner,
    cfg: &DensityConfig,
    folds: usize,
) -> Result<(GridDensity, f64)> {
    if cfg.grid_size < 10 {
        return Err(Error::InvalidInput(format!(
            "density grid needs at least 10 points, got {}",
            cfg.grid_size
        )));
    }
    if cfg.bandwidths.is_empty() || cfg.bandwidths.iter().any(|&b| !(b > 0.0)) {
        return Err(Error::InvalidInput(
            "bandwidth list must be nonempty and positive".into(),
        ));
    }
    let a01 = data.a01();
    if a01.iter().all(|&a| a == a01[0]) {
        return Err(Error::DegenerateExposure(data.a()[0]));
    }
    let grid = linspace(0.0, 1.0, cfg.grid_size);
    let x = covariate_design(data, cfg.covariate_degree);

    let r = if cfg.conditional_cv {
        conditional_bandwidth(data, &x, &grid, learner, cfg, folds)?
    } else {
        let scores = marginal_bandwidth_scores(a01, &cfg.bandwidths);
        let mut best = 0;
        for k in 1..scores.len() {
            if scores[k] > scores[best] {
                best = k;
            }
        }
        cfg.bandwidths[best]
    };
    let (hyper, _) = density_penalty(&x, a01, &grid, r, learner, folds, cfg.cv_points)?;
    let fit = fit_grid_density(&x, a01, &grid, r, learner, hyper, cfg.covariate_degree)?;
    Ok((fit, r))
}

fn conditional_bandwidth(
    data: &ObservationSet,
    x: &DMatrix<f64>,
    grid: &[f64],
    learner: &dyn RegressionLearner,
    cfg: &DensityConfig,
    folds: usize,
) -> Result<f64> {
    let a01 = data.a01();
    let n = data.n();
    let mut best = (f64::NEG_INFINITY, cfg.bandwidths[0]);
    for &r in &cfg.bandwidths {
        let (hyper, _) = density_penalty(x, a01, grid, r, learner, folds, cfg.cv_points)?;
        let mut ll = 0.0;
        for f in 0..folds {
            let (train, test): (Vec<usize>, Vec<usize>) =
                (0..n).partition(|&i| fold_of(i, folds) != f);
            let xt = x.select_rows(train.iter());
            let at: Vec<f64> = train.iter().map(|&i| a01[i]).collect();
            let fit = fit_grid_density(&xt, &at, grid, r, learner, hyper, cfg.covariate_degree)?;
            for &i in &test {
                let g = fit.density(&data.w_row(i), a01[i]).max(cfg.g_floor);
                ll += g.ln();
            }
        }
        if ll > best.0 {
            best = (ll, r);
        }
    }
    Ok(best.1)
}

/// Full nuisance configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NuisanceConfig {
    pub folds: usize,
    pub penalties: Vec<f64>,
    pub density: DensityConfig,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            penalties: RidgeLearner::default().penalties,
            density: DensityConfig::default(),
        }
    }
}

/// Fitted nuisances. Any outcome model and density can be supplied directly.
#[derive(Clone)]
pub struct NuisanceFit {
    pub outcome: Arc<dyn OutcomeModel>,
    pub density: Arc<dyn ConditionalDensity>,
    /// Kernel bandwidth on the rescaled exposure scale.
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub g_floor: f64,
}

impl fmt::Debug for NuisanceFit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NuisanceFit")
            .field("bandwidth", &self.bandwidth)
            .field("grid_size", &self.grid.len())
            .field("g_floor", &self.g_floor)
            .finish()
    }
}

impl NuisanceFit {
    pub fn new(
        outcome: Arc<dyn OutcomeModel>,
        density: Arc<dyn ConditionalDensity>,
        g_floor: f64,
    ) -> Self {
        Self {
            outcome,
            density,
            bandwidth: f64::NAN,
            grid: vec![],
            g_floor,
        }
    }

    pub fn fit(data: &ObservationSet, cfg: &NuisanceConfig, basis: &SobolevBasis) -> Result<Self> {
        let learner = RidgeLearner::new(cfg.penalties.clone());
        let outcome =
            fit_conditional_mean(data, &learner, cfg.folds, OutcomeFeatures::new(basis))?;
        let (density, r) = fit_conditional_density(data, &learner, &cfg.density, cfg.folds)?;
        let grid = density.grid.clone();
        Ok(Self {
            outcome: Arc::new(outcome),
            density: Arc::new(density),
            bandwidth: r,
            grid,
            g_floor: cfg.density.g_floor,
        })
    }

    pub fn q(&self, w: &[f64], a01: f64) -> f64 {
        self.outcome.predict(w, a01)
    }

    /// Floored density.
    pub fn g(&self, w: &[f64], a01: f64) -> f64 {
        self.density.density(w, a01).max(self.g_floor)
    }

    /// Evaluates everything the estimators need on the sample.
    pub fn evaluate(&self, data: &ObservationSet) -> NuisanceEval {
        NuisanceEval::new(self, data)
    }
}

/// Stability weights and the number of rows whose own density was floored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityWeights {
    pub values: Vec<f64>,
    pub floored: usize,
}

/// `weight_i = mean_j g(A_i | W_j) / max(g(A_i | W_i), floor)`.
pub fn stability_weights(fit: &NuisanceFit, data: &ObservationSet) -> StabilityWeights {
    let eval = fit.evaluate(data);
    StabilityWeights {
        values: eval.weights,
        floored: eval.floored,
    }
}

/// Nuisances evaluated on every pair of sample rows.
#[derive(Debug, Clone)]
pub struct NuisanceEval {
    /// `q_mat[(i, k)] = Q(W_i, A_k)`.
    pub q_mat: DMatrix<f64>,
    /// `Q(W_i, A_i)`.
    pub q_obs: Vec<f64>,
    /// Plug-in curve at the observed exposures, `θ_n(A_k)`.
    pub theta: Vec<f64>,
    /// `g_mat[(i, k)] = max(g(A_k | W_i), floor)`.
    pub g_mat: DMatrix<f64>,
    /// `mean_i g_mat[(i, k)]`.
    pub g_marginal: Vec<f64>,
    pub weights: Vec<f64>,
    pub residuals: Vec<f64>,
    pub floored: usize,
}

impl NuisanceEval {
    pub fn new(fit: &NuisanceFit, data: &ObservationSet) -> Self {
        let n = data.n();
        let a01 = data.a01();
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let w = data.w_row(i);
                let q: Vec<f64> = a01.iter().map(|&a| fit.outcome.predict(&w, a)).collect();
                let g = fit.density.density_many(&w, a01);
                (q, g)
            })
            .collect();
        let q_mat = DMatrix::from_fn(n, n, |i, k| rows[i].0[k]);
        let raw_diag: Vec<f64> = (0..n).map(|i| rows[i].1[i]).collect();
        let floored = raw_diag.iter().filter(|&&g| !(g >= fit.g_floor)).count();
        let g_mat = DMatrix::from_fn(n, n, |i, k| rows[i].1[k].max(fit.g_floor));
        let q_obs: Vec<f64> = (0..n).map(|i| q_mat[(i, i)]).collect();
        let theta: Vec<f64> = (0..n).map(|k| q_mat.column(k).sum() / n as f64).collect();
        let g_marginal: Vec<f64> = (0..n).map(|k| g_mat.column(k).sum() / n as f64).collect();
        let weights = (0..n).map(|k| g_marginal[k] / g_mat[(k, k)]).collect();
        let residuals = (0..n).map(|i| data.y()[i] - q_obs[i]).collect();
        Self {
            q_mat,
            q_obs,
            theta,
            g_mat,
            g_marginal,
            weights,
            residuals,
            floored,
        }
    }

    pub fn n(&self) -> usize {
        self.q_obs.len()
    }
}

/// `θ_n(a) = mean_i Q(W_i, a)`, with cached values on a grid.
#[derive(Clone)]
pub struct PluginCurve {
    outcome: Arc<dyn OutcomeModel>,
    rows: Vec<Vec<f64>>,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

impl fmt::Debug for PluginCurve {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PluginCurve")
            .field("grid", &self.grid)
            .field("values", &self.values)
            .finish()
    }
}

impl PluginCurve {
    pub fn eval(&self, a01: f64) -> f64 {
        self.rows.iter().map(|w| self.outcome.predict(w, a01)).sum::<f64>() / self.rows.len() as f64
    }
}

pub fn plugin_curve(outcome: Arc<dyn OutcomeModel>, data: &ObservationSet, grid: &[f64]) -> PluginCurve {
    let rows: Vec<Vec<f64>> = (0..data.n()).map(|i| data.w_row(i)).collect();
    let mut curve = PluginCurve {
        outcome,
        rows,
        grid: grid.to_vec(),
        values: vec![],
    };
    curve.values = grid.iter().map(|&a| curve.eval(a)).collect();
    curve
}
