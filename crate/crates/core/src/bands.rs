//! Data-adaptive roughness bound and simultaneous confidence bands by test inversion.
//!
//! A candidate curve `θ* = Σ c_d η_d` shifts the estimated inner products linearly,
//! `U(c) = U₀ − Vc`. Holding the multipliers `(λ1, λ2)` of the `θ* = 0` solve fixed, the
//! statistic becomes the quadratic `U(c)ᵀ S U(c)` with `S = λ1⁻¹ (V + λ2 Γ)⁻¹`, and the band at
//! `a0` is the range of `Σ c_d (η_d(a0) − mean η_d(A))` over
//!
//! ```text
//! { c : Σ c_d² / γ_d ≤ ν,  U(c)ᵀ S U(c) ≤ t* }
//! ```
//!
//! Each endpoint is a convex problem with two quadratic constraints, solved through its dual.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::roughness_of;
use crate::data::{NullCurve, ObservationSet};
use crate::eif::{eif_matrix, CenteredDesign, EstimatorKind};
use crate::error::{Error, Result};
use crate::nuisance::{NuisanceConfig, NuisanceEval};
use crate::numerics::{linspace, log_grid, quantile_type7};
use crate::qcqp::{psi_value, solve_with, QcqpRegime};
use crate::sup_test::{bootstrap_null, FittedProblem, KappaPolicy};
use crate::tml::TmlConfig;

/// Cross-validation table of the ridge fit behind [`select_kappa`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeCv {
    pub lambdas: Vec<f64>,
    pub errors: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub min_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaSelection {
    pub kappa: f64,
    /// Unit-variance direction `h_n`.
    pub h_coefs: DVector<f64>,
    /// Raw ridge coefficients.
    pub coefs: DVector<f64>,
    pub lambda: f64,
    /// `Σ c_d² / γ_d` of the raw fit.
    pub roughness: f64,
    /// Roughness of the fit at the CV-minimizing `λ`, which shrinks less than the one-SE choice.
    pub roughness_min_cv: f64,
    pub cv: RidgeCv,
    /// The fit had no variance and the fallback `κ` was used.
    pub degenerate: bool,
}

/// Default ridge grid for [`select_kappa`].
pub fn kappa_lambdas() -> Vec<f64> {
    log_grid(1e-14, 1.0, 50)
}

fn ridge_solve(v: &DMatrix<f64>, gamma: &DVector<f64>, rhs: &DVector<f64>, lambda: f64) -> DVector<f64> {
    let mut a = v.clone();
    for d in 0..gamma.len() {
        a[(d, d)] += lambda * gamma[d];
    }
    match a.clone().cholesky() {
        Some(ch) => ch.solve(rhs),
        None => a.lu().solve(rhs).unwrap_or_else(|| DVector::zeros(rhs.len())),
    }
}

/// Regresses `f_i = θ_n(A_i) + w_i r_i − θ*(A_i)` on the basis with penalty `λ Σ c_d²/γ_d`,
/// picks `λ` by the one-standard-error rule and returns `κ_n = J(c)/Var_n(Σ c_d η_d(A))`.
pub fn select_kappa(
    eval: &NuisanceEval,
    design: &CenteredDesign,
    v: &DMatrix<f64>,
    theta_star: &[f64],
    folds: usize,
) -> Result<KappaSelection> {
    select_kappa_with(eval, design, v, theta_star, folds, &kappa_lambdas())
}

pub fn select_kappa_with(
    eval: &NuisanceEval,
    design: &CenteredDesign,
    v: &DMatrix<f64>,
    theta_star: &[f64],
    folds: usize,
    lambdas: &[f64],
) -> Result<KappaSelection> {
    let n = eval.n();
    if folds < 2 || n < 2 * folds {
        return Err(Error::TooFewRows {
            needed: 2 * folds.max(2),
            found: n,
        });
    }
    let f: Vec<f64> = (0..n)
        .map(|i| eval.theta[i] + eval.weights[i] * eval.residuals[i] - theta_star[i])
        .collect();
    pseudo_outcome_kappa(&f, design, v, folds, lambdas)
}

/// The ridge fit and `κ` for a given pseudo-outcome.
pub fn pseudo_outcome_kappa(
    f: &[f64],
    design: &CenteredDesign,
    v: &DMatrix<f64>,
    folds: usize,
    lambdas: &[f64],
) -> Result<KappaSelection> {
    let n = f.len();
    let h = &design.h;
    let gamma = design.basis.gamma_diag();
    let fbar = f.iter().sum::<f64>() / n as f64;
    let fvar = f.iter().map(|x| (x - fbar) * (x - fbar)).sum::<f64>() / n as f64;

    let mut errs = vec![vec![0.0; folds]; lambdas.len()];
    #[allow(clippy::needless_range_loop)]
    for fold in 0..folds {
        let train: Vec<usize> = (0..n).filter(|i| i % folds != fold).collect();
        let test: Vec<usize> = (0..n).filter(|i| i % folds == fold).collect();
        let ht = h.select_rows(train.iter());
        let nt = train.len() as f64;
        let means = DVector::from_iterator(ht.ncols(), ht.column_iter().map(|c| c.sum() / nt));
        let mut hc = ht.clone();
        for mut row in hc.row_iter_mut() {
            row -= means.transpose();
        }
        let ft: Vec<f64> = train.iter().map(|&i| f[i]).collect();
        let ftbar = ft.iter().sum::<f64>() / nt;
        let fc = DVector::from_iterator(ft.len(), ft.iter().map(|x| x - ftbar));
        let vt = hc.tr_mul(&hc) / nt;
        let rhs = hc.tr_mul(&fc) / nt;
        for (k, &lam) in lambdas.iter().enumerate() {
            let c = ridge_solve(&vt, &gamma, &rhs, lam);
            let e: f64 = test
                .iter()
                .map(|&i| {
                    let pred = ftbar + (h.row(i).transpose() - &means).dot(&c);
                    (f[i] - pred).powi(2)
                })
                .sum::<f64>()
                / test.len() as f64;
            errs[k][fold] = e;
        }
    }
    let k = folds as f64;
    let errors: Vec<f64> = errs.iter().map(|e| e.iter().sum::<f64>() / k).collect();
    let std_errors: Vec<f64> = errs
        .iter()
        .zip(&errors)
        .map(|(e, m)| (e.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (k - 1.0)).sqrt() / k.sqrt())
        .collect();
    let mut min_index = 0;
    for j in 1..errors.len() {
        if errors[j] < errors[min_index] {
            min_index = j;
        }
    }
    let bound = errors[min_index] + std_errors[min_index];
    let mut chosen = min_index;
    for j in 0..lambdas.len() {
        if errors[j] <= bound && lambdas[j] > lambdas[chosen] {
            chosen = j;
        }
    }
    let lambda = lambdas[chosen];
    let fc = DVector::from_iterator(n, f.iter().map(|x| x - fbar));
    let rhs = h.tr_mul(&fc) / n as f64;
    let coefs = ridge_solve(v, &gamma, &rhs, lambda);
    let var = coefs.dot(&(v * &coefs));
    let roughness = roughness_of(&coefs, &design.basis);
    let roughness_min_cv = if chosen == min_index {
        roughness
    } else {
        roughness_of(&ridge_solve(v, &gamma, &rhs, lambdas[min_index]), &design.basis)
    };
    let cv = RidgeCv {
        lambdas: lambdas.to_vec(),
        errors,
        std_errors,
        min_index,
    };
    if !(var > 1e-14 * fvar) || !(fvar > 0.0) {
        // Smoothest nontrivial direction.
        let mut e1 = DVector::zeros(design.dim());
        e1[0] = 1.0 / v[(0, 0)].sqrt();
        return Ok(KappaSelection {
            kappa: gamma[0] / v[(0, 0)],
            h_coefs: e1,
            coefs,
            lambda,
            roughness,
            roughness_min_cv,
            cv,
            degenerate: true,
        });
    }
    Ok(KappaSelection {
        kappa: roughness / var,
        h_coefs: &coefs / var.sqrt(),
        coefs,
        lambda,
        roughness,
        roughness_min_cv,
        cv,
        degenerate: false,
    })
}

/// Type-7 `(1 − α)` quantile, and whether `M α < 5` makes it unreliable.
pub fn critical_value(samples: &[f64], alpha: f64) -> Result<(f64, bool)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if samples.is_empty() {
        return Err(Error::InvalidInput("no bootstrap samples".into()));
    }
    let warn = (samples.len() as f64) * alpha < 5.0;
    Ok((quantile_type7(samples, 1.0 - alpha), warn))
}

/// The statistic constraint and roughness ball in whitened coordinates `z`, where
/// `c = Γ^{-1/2} Q z`, `‖z‖² = Σ c_d²/γ_d` and the statistic is `zᵀLz − 2ρᵀz + s0`.
#[derive(Debug, Clone)]
pub struct BandProblem {
    /// `Γ^{-1/2} Q`.
    to_coefs: DMatrix<f64>,
    l: DVector<f64>,
    rho: DVector<f64>,
    s0: f64,
    pub nu: f64,
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Statistic matrix `S`, kept for audits.
    s: DMatrix<f64>,
    u0: DVector<f64>,
    v: DMatrix<f64>,
}

/// One band endpoint pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandLimits {
    pub lower: f64,
    pub upper: f64,
    pub feasible: bool,
    /// Largest normalized KKT residual of the two solves.
    pub kkt_residual: f64,
}

impl BandProblem {
    /// `u0` is `U` at `θ* = 0`; `gamma` the diagonal of `Γ⁻¹`, i.e. the eigenvalues `γ_d`.
    pub fn new(
        u0: &DVector<f64>,
        v: &DMatrix<f64>,
        gamma: &DVector<f64>,
        nu: f64,
        lambda1: f64,
        lambda2: f64,
        tau: f64,
    ) -> Result<Self> {
        let d = u0.len();
        let mut m = v.clone();
        for k in 0..d {
            m[(k, k)] += lambda2 / gamma[k];
        }
        let m_inv = m
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("V + λ2 Γ is singular".into()))?;
        let mut s = m_inv / lambda1;
        s = (&s + s.transpose()) * 0.5;
        let sqrt_g = gamma.map(f64::sqrt);
        // Γ^{-1/2} V S V Γ^{-1/2}
        let vsv = v * &s * v;
        let mut a = vsv.clone();
        for i in 0..d {
            for j in 0..d {
                a[(i, j)] *= sqrt_g[i] * sqrt_g[j];
            }
        }
        a = (&a + a.transpose()) * 0.5;
        let eig = a.symmetric_eigen();
        let q = eig.eigenvectors;
        let l = eig.eigenvalues.map(|x| x.max(0.0));
        let vsu = v * &s * u0;
        let rho = q.tr_mul(&vsu.component_mul(&sqrt_g));
        let s0 = u0.dot(&(&s * u0));
        let mut to_coefs = q.clone();
        for i in 0..d {
            for j in 0..d {
                to_coefs[(i, j)] *= sqrt_g[i];
            }
        }
        if !s0.is_finite() || l.iter().any(|x| !x.is_finite()) {
            return Err(Error::Degenerate("band statistic is not finite".into()));
        }
        Ok(Self {
            to_coefs,
            l,
            rho,
            s0,
            nu,
            tau,
            lambda1,
            lambda2,
            s,
            u0: u0.clone(),
            v: v.clone(),
        })
    }

    fn whiten(&self, g: &DVector<f64>) -> DVector<f64> {
        self.to_coefs.tr_mul(g)
    }

    pub fn coefs(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.to_coefs * z
    }

    fn q(&self, z: &DVector<f64>) -> f64 {
        let mut v = self.s0;
        for k in 0..z.len() {
            v += self.l[k] * z[k] * z[k] - 2.0 * self.rho[k] * z[k];
        }
        v
    }

    /// Fixed-multiplier statistic at coefficient vector `c`.
    pub fn statistic(&self, c: &DVector<f64>) -> f64 {
        let u = &self.u0 - &self.v * c;
        u.dot(&(&self.s * &u))
    }

    /// Smallest statistic over the roughness ball.
    pub fn min_statistic(&self) -> f64 {
        let z = trust_region(&self.l, &self.rho, self.nu);
        self.q(&z)
    }

    /// `z(μ1, μ2) = (ĝ + 2μ2ρ) / (2(μ1 + μ2 L))`.
    fn z_of(&self, g: &DVector<f64>, mu1: f64, mu2: f64) -> DVector<f64> {
        DVector::from_fn(g.len(), |k, _| {
            (g[k] + 2.0 * mu2 * self.rho[k]) / (2.0 * (mu1 + mu2 * self.l[k]))
        })
    }

    /// `μ1` making `‖z‖² = ν` (or zero when the ball is slack) for fixed `μ2`.
    fn inner(&self, g: &DVector<f64>, mu2: f64) -> (f64, DVector<f64>) {
        if mu2 > 0.0 && self.l.iter().all(|&x| mu2 * x > 0.0) {
            let z = self.z_of(g, 0.0, mu2);
            if z.norm_squared() <= self.nu {
                return (0.0, z);
            }
        }
        let num = DVector::from_fn(g.len(), |k, _| g[k] + 2.0 * mu2 * self.rho[k]);
        let nn = num.norm();
        if nn == 0.0 {
            return (0.0, DVector::zeros(g.len()));
        }
        let mut hi = nn / (2.0 * self.nu.sqrt());
        let mut lo = hi;
        while self.z_of(g, lo, mu2).norm_squared() < self.nu && lo > 1e-300 {
            lo *= 0.5;
        }
        if lo == hi {
            return (hi, self.z_of(g, hi, mu2));
        }
        for _ in 0..200 {
            let mid = (lo * hi).sqrt();
            if self.z_of(g, mid, mu2).norm_squared() > self.nu {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi / lo - 1.0 < 1e-15 {
                break;
            }
        }
        (hi, self.z_of(g, hi, mu2))
    }

    /// `max ĝᵀz` over the feasible set; returns `(value, z, kkt residual)`.
    fn maximize(&self, g_white: &DVector<f64>) -> (f64, DVector<f64>, f64) {
        let gn = g_white.norm();
        if gn == 0.0 {
            let z = trust_region(&self.l, &self.rho, self.nu);
            return (0.0, z, 0.0);
        }
        let z0 = g_white * (self.nu.sqrt() / gn);
        if self.q(&z0) <= self.tau {
            return (g_white.dot(&z0), z0.clone(), self.kkt(g_white, &z0, gn / (2.0 * self.nu.sqrt()), 0.0));
        }
        // q(z(μ2)) decreases in μ2; bracket the crossing of τ.
        let mut lo = 0.0_f64;
        let mut hi = 1.0_f64;
        let scale = gn / (self.rho.norm() + self.l.amax().sqrt() + 1e-300);
        hi *= scale.max(1e-12);
        let mut guard = 0;
        while self.q(&self.inner(g_white, hi).1) > self.tau && guard < 2000 {
            lo = hi;
            hi *= 2.0;
            guard += 1;
        }
        for _ in 0..200 {
            let mid = if lo == 0.0 { 0.5 * hi } else { (lo * hi).sqrt() };
            if self.q(&self.inner(g_white, mid).1) > self.tau {
                lo = mid;
            } else {
                hi = mid;
            }
            if lo > 0.0 && hi / lo - 1.0 < 1e-15 {
                break;
            }
        }
        let (mu1, z) = self.inner(g_white, hi);
        let res = self.kkt(g_white, &z, mu1, hi);
        (g_white.dot(&z), z, res)
    }

    /// Normalized KKT residual: stationarity, primal feasibility, complementary slackness.
    fn kkt(&self, g: &DVector<f64>, z: &DVector<f64>, mu1: f64, mu2: f64) -> f64 {
        let stat = DVector::from_fn(g.len(), |k, _| {
            g[k] + 2.0 * mu2 * self.rho[k] - 2.0 * (mu1 + mu2 * self.l[k]) * z[k]
        });
        let gscale = g.norm().max(1e-300);
        let ball = (z.norm_squared() - self.nu).max(0.0) / self.nu.max(1e-300);
        let q = self.q(z);
        let tscale = self.tau.abs().max(1e-300);
        let statc = (q - self.tau).max(0.0) / tscale;
        let cs1 = mu1 * (self.nu - z.norm_squared()).abs() / (gscale * self.nu.sqrt());
        let cs2 = mu2 * (self.tau - q).abs() / (gscale * self.nu.sqrt());
        (stat.norm() / gscale).max(ball).max(statc).max(cs1).max(cs2)
    }

    /// Band limits for the centered basis vector `g = η(a0) − mean η(A)`.
    pub fn band_at(&self, g: &DVector<f64>) -> BandLimits {
        if self.min_statistic() > self.tau * (1.0 + 1e-12) {
            return BandLimits {
                lower: f64::NAN,
                upper: f64::NAN,
                feasible: false,
                kkt_residual: f64::NAN,
            };
        }
        let gw = self.whiten(g);
        let (up, _, r1) = self.maximize(&gw);
        let (lo, _, r2) = self.maximize(&(-&gw));
        BandLimits {
            lower: -lo,
            upper: up,
            feasible: true,
            kkt_residual: r1.max(r2),
        }
    }

    /// Maximizing coefficients for the upper limit, for audits.
    pub fn argmax(&self, g: &DVector<f64>) -> DVector<f64> {
        let (_, z, _) = self.maximize(&self.whiten(g));
        self.coefs(&z)
    }
}

/// `argmin zᵀLz − 2ρᵀz` over `‖z‖² ≤ ν` for diagonal `L ≥ 0`.
fn trust_region(l: &DVector<f64>, rho: &DVector<f64>, nu: f64) -> DVector<f64> {
    let z_of = |mu: f64| DVector::from_fn(l.len(), |k, _| rho[k] / (l[k] + mu));
    if l.iter().all(|&x| x > 0.0) {
        let z = z_of(0.0);
        if z.norm_squared() <= nu {
            return z;
        }
    }
    if rho.norm() == 0.0 {
        return DVector::zeros(l.len());
    }
    let mut hi = rho.norm() / nu.sqrt();
    let mut lo = hi;
    while z_of(lo).norm_squared() < nu && lo > 1e-300 {
        lo *= 0.5;
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if z_of(mid).norm_squared() > nu {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-15 {
            break;
        }
    }
    z_of(hi)
}

/// How `ν` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NuRepr", into = "NuRepr")]
pub enum NuPolicy {
    Value(f64),
    /// `multiplier × J` of the `θ* = 0` ridge fit at the CV-minimizing penalty.
    Auto { multiplier: f64 },
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum NuRepr {
    Number(f64),
    Word(String),
}

impl TryFrom<NuRepr> for NuPolicy {
    type Error = String;

    fn try_from(r: NuRepr) -> std::result::Result<Self, String> {
        match r {
            NuRepr::Number(v) if v.is_finite() && v >= 0.0 => Ok(NuPolicy::Value(v)),
            NuRepr::Number(v) => Err(format!("nu must be nonnegative, got {v}")),
            NuRepr::Word(w) if w == "auto" => Ok(NuPolicy::Auto { multiplier: 4.0 }),
            NuRepr::Word(w) => Err(format!("nu must be a number or \"auto\", got {w:?}")),
        }
    }
}

impl From<NuPolicy> for NuRepr {
    fn from(p: NuPolicy) -> Self {
        match p {
            NuPolicy::Value(v) => NuRepr::Number(v),
            NuPolicy::Auto { .. } => NuRepr::Word("auto".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BandConfig {
    pub alpha: f64,
    pub grid_size: usize,
    pub estimator: EstimatorKind,
    pub kappa: KappaPolicy,
    pub nu: NuPolicy,
    pub dim: usize,
    pub margin: f64,
    pub bootstrap_samples: usize,
    pub seed: u64,
    pub nuisance: NuisanceConfig,
    pub tml: TmlConfig,
    pub kappa_folds: usize,
    /// Re-solve the exact statistic at each upper-limit maximizer.
    pub audit_exact: bool,
}

impl Default for BandConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            grid_size: 101,
            estimator: EstimatorKind::OneStep,
            kappa: KappaPolicy::Adaptive,
            nu: NuPolicy::Auto { multiplier: 4.0 },
            dim: 20,
            margin: 0.25,
            bootstrap_samples: 2000,
            seed: 0,
            nuisance: NuisanceConfig::default(),
            tml: TmlConfig::default(),
            kappa_folds: 5,
            audit_exact: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandResult {
    /// Grid in original exposure units.
    pub a: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub feasible: Vec<bool>,
    pub alpha: f64,
    pub kappa: f64,
    pub nu: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub t_star: f64,
    pub t_star_unreliable: bool,
    pub estimator: String,
    pub n: usize,
    pub seed: u64,
    pub max_kkt_residual: f64,
    /// Largest `exact statistic − t*` over the grid when auditing.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub audit_max_excess: Option<f64>,
}

impl BandResult {
    pub fn widths(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).collect()
    }

    pub fn contains(&self, truth: impl Fn(f64) -> f64) -> bool {
        self.a.iter().enumerate().all(|(k, &a)| {
            let t = truth(a);
            self.feasible[k] && self.lower[k] <= t && t <= self.upper[k]
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["a", "lower", "upper"])?;
        for k in 0..self.a.len() {
            w.write_record([
                format!("{}", self.a[k]),
                format!("{}", self.lower[k]),
                format!("{}", self.upper[k]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, mut out: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, self)?;
        Ok(())
    }
}

/// Band on data whose nuisances are already fitted.
pub fn build_band_fitted(data: &ObservationSet, prob: &FittedProblem, cfg: &BandConfig) -> Result<BandResult> {
    if cfg.grid_size < 1 {
        return Err(Error::InvalidInput("grid size must be positive".into()));
    }
    let zero = NullCurve::Zero;
    let selection = prob.select_kappa(data, &zero, cfg.kappa_folds)?;
    let kappa = match cfg.kappa {
        KappaPolicy::Value(k) => k,
        KappaPolicy::Adaptive => selection.kappa,
    };
    let nu = match cfg.nu {
        NuPolicy::Value(v) => v,
        NuPolicy::Auto { multiplier } => multiplier * selection.roughness_min_cv,
    };
    if !(nu > 0.0) {
        return Err(Error::InvalidInput(format!(
            "nu must be positive, got {nu}; increase nu"
        )));
    }
    let spec = prob.class(kappa)?;
    let (psi, _) = prob.psi(
        data,
        cfg.estimator,
        &zero,
        Some((&spec, &selection.h_coefs, &cfg.tml)),
    )?;
    let sol = solve_with(spec.geometry(), &psi.u, kappa)?;
    if matches!(sol.regime, QcqpRegime::Degenerate | QcqpRegime::HardCase) {
        return Err(Error::Degenerate(
            "the zero-null solve has no usable multipliers".into(),
        ));
    }
    let eif = eif_matrix(&prob.eval, None, &prob.design.h);
    let boot = bootstrap_null(&eif, &spec, cfg.bootstrap_samples, cfg.seed)?;
    let (t_star, unreliable) = critical_value(&boot.samples, cfg.alpha)?;
    let gamma = prob.basis.eigenvalues();
    let problem = BandProblem::new(&psi.u, &spec.v, &gamma, nu, sol.lambda1, sol.lambda2, t_star)?;

    let grid01 = linspace(0.0, 1.0, cfg.grid_size);
    let limits: Vec<BandLimits> = grid01
        .par_iter()
        .map(|&a| problem.band_at(&prob.design.centered_at(a)))
        .collect();
    if limits.iter().all(|l| !l.feasible) {
        return Err(Error::EmptyBand);
    }
    let audit = if cfg.audit_exact {
        let mut worst = f64::NEG_INFINITY;
        for &a in &grid01 {
            let c = problem.argmax(&prob.design.centered_at(a));
            let u = &psi.u - &spec.v * &c;
            let exact = psi_value(spec.geometry(), &u, kappa)?;
            worst = worst.max(exact - t_star);
        }
        Some(worst)
    } else {
        None
    };
    Ok(BandResult {
        a: grid01.iter().map(|&u| data.to_original(u)).collect(),
        lower: limits.iter().map(|l| l.lower).collect(),
        upper: limits.iter().map(|l| l.upper).collect(),
        feasible: limits.iter().map(|l| l.feasible).collect(),
        alpha: cfg.alpha,
        kappa,
        nu,
        lambda1: sol.lambda1,
        lambda2: sol.lambda2,
        t_star,
        t_star_unreliable: unreliable,
        estimator: cfg.estimator.as_str().into(),
        n: data.n(),
        seed: cfg.seed,
        max_kkt_residual: limits
            .iter()
            .filter(|l| l.feasible)
            .map(|l| l.kkt_residual)
            .fold(0.0, f64::max),
        audit_max_excess: audit,
    })
}

/// Fits nuisances and builds the band described by `cfg`.
pub fn build_band(data: &ObservationSet, cfg: &BandConfig) -> Result<BandResult> {
    let basis = crate::basis::SobolevBasis::with_margin(cfg.dim, cfg.margin);
    let prob = FittedProblem::new(data, basis, &cfg.nuisance)?;
    build_band_fitted(data, &prob, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn critical_value_examples() {
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        let (t, warn) = critical_value(&s, 0.05).unwrap();
        assert_relative_eq!(t, 95.05, epsilon = 1e-12);
        assert!(!warn);
        let (t, _) = critical_value(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.5).unwrap();
        assert_eq!(t, 3.0);
        assert_eq!(critical_value(&[2.5; 10], 0.1).unwrap().0, 2.5);
        assert!(critical_value(&[1.0; 10], 0.1).unwrap().1);
    }

    fn small_problem(tau: f64, nu: f64) -> (BandProblem, DVector<f64>) {
        let v = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.1, 0.2, 0.8, 0.0, 0.1, 0.0, 0.6]);
        let gamma = DVector::from_vec(vec![0.5, 0.3, 0.1]);
        let u0 = DVector::from_vec(vec![0.3, -0.2, 0.1]);
        let p = BandProblem::new(&u0, &v, &gamma, nu, 0.7, 0.4, tau).unwrap();
        (p, DVector::from_vec(vec![0.5, -1.0, 0.8]))
    }

    #[test]
    fn huge_tau_gives_cauchy_schwarz() {
        let (p, g) = small_problem(1e12, 2.0);
        let b = p.band_at(&g);
        let gamma = [0.5, 0.3, 0.1];
        let r = (2.0 * (0..3).map(|k| gamma[k] * g[k] * g[k]).sum::<f64>()).sqrt();
        assert_relative_eq!(b.upper, r, max_relative = 1e-10);
        assert_relative_eq!(b.lower, -r, max_relative = 1e-10);
    }

    #[test]
    fn tiny_nu_collapses() {
        let (p, g) = small_problem(1e6, 1e-14);
        let b = p.band_at(&g);
        assert!(b.upper.abs() < 1e-6 && b.lower.abs() < 1e-6);
    }

    #[test]
    fn matches_grid_search() {
        let (p0, g) = small_problem(1.0, 1.0);
        let lo_stat = p0.min_statistic();
        let tau = lo_stat + 0.5 * (p0.statistic(&DVector::zeros(3)) - lo_stat) + 0.01;
        let (p, _) = small_problem(tau, 1.0);
        let b = p.band_at(&g);
        assert!(b.feasible);
        assert!(b.kkt_residual <= 1e-6, "kkt {}", b.kkt_residual);
        let gamma = [0.5, 0.3, 0.1];
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let steps = 80;
        for i in 0..=steps {
            for j in 0..=steps {
                for k in 0..=steps {
                    let x = [i, j, k].map(|s| -1.0 + 2.0 * s as f64 / steps as f64);
                    if x.iter().map(|v| v * v).sum::<f64>() > 1.0 {
                        continue;
                    }
                    let c = DVector::from_fn(3, |d, _| x[d] * f64::sqrt(gamma[d]));
                    if p.statistic(&c) <= tau {
                        let val = g.dot(&c);
                        lo = lo.min(val);
                        hi = hi.max(val);
                    }
                }
            }
        }
        assert!((b.upper - hi).abs() < 1e-2, "{} vs {}", b.upper, hi);
        assert!((b.lower - lo).abs() < 1e-2, "{} vs {}", b.lower, lo);
        assert!(b.upper >= hi - 1e-9 && b.lower <= lo + 1e-9);
    }

    #[test]
    fn infeasible_flagged() {
        let (p, g) = small_problem(1e-12, 1e-6);
        let b = p.band_at(&g);
        assert!(!b.feasible);
    }
}
