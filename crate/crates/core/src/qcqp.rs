//! Closed-form solution of
//!
//! ```text
//! maximize Uᵀc  subject to  cᵀVc = 1,  cᵀΓc ≤ κ
//! ```
//!
//! Stationarity gives `U = λ1 (V + λ2 Γ) c`, so `c = λ1⁻¹ (V + λ2 Γ)⁻¹ U` where `λ2` makes the
//! roughness-to-variance ratio
//!
//! ```text
//! R(λ2) = Uᵀ(V+λ2Γ)⁻¹Γ(V+λ2Γ)⁻¹U / Uᵀ(V+λ2Γ)⁻¹V(V+λ2Γ)⁻¹U
//! ```
//!
//! equal to `κ`, `λ1 = {Uᵀ(V+λ2Γ)⁻¹V(V+λ2Γ)⁻¹U}^{1/2}`, and the optimum is
//! `Ψ = λ1⁻¹ Uᵀ(V+λ2Γ)⁻¹U`.
//!
//! All of this is evaluated in the coordinates that diagonalize `V` and `Γ` simultaneously:
//! with `S = Γ^{-1/2}` and `S V S = P diag(μ) Pᵀ`, the vector `u = Pᵀ S U` turns every
//! quadratic form above into a weighted sum over `k`, so a root-finding step costs `O(D)`.
//!
//! `R` decreases from `R(0)` towards `R(∞) = Σu²/Σμu²` on `λ2 > 0`. When `κ < R(∞)` the
//! constrained maximizer sits on the other branch `λ2 < -μ_max` with `λ1 < 0`; both branches
//! keep `λ1 (V + λ2 Γ)` positive definite, which is the global-optimality condition.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum bisection iterations for `λ2`.
pub const MAX_BISECTION: usize = 200;

/// Precomputed simultaneous diagonalization of `(V, Γ)`.
#[derive(Debug, Clone)]
pub struct QcqpGeometry {
    /// `√γ_d`, i.e. the diagonal of `Γ^{-1/2}`.
    scale: DVector<f64>,
    mu: DVector<f64>,
    vectors: DMatrix<f64>,
    mu_max: f64,
    /// Indices with `μ_k` numerically equal to `μ_max`.
    top: Vec<usize>,
}

impl QcqpGeometry {
    pub fn new(v: &DMatrix<f64>, gamma: &DVector<f64>) -> Self {
        let scale = gamma.map(|g| 1.0 / g.sqrt());
        let mut sv = v.clone();
        for i in 0..sv.nrows() {
            for j in 0..sv.ncols() {
                sv[(i, j)] *= scale[i] * scale[j];
            }
        }
        let eig = sv.symmetric_eigen();
        let mu = eig.eigenvalues.map(|m| m.max(0.0));
        let mu_max = mu.max();
        let top = (0..mu.len())
            .filter(|&k| mu[k] >= mu_max * (1.0 - 1e-12))
            .collect();
        Self {
            scale,
            mu,
            vectors: eig.eigenvectors,
            mu_max,
            top,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `min_c cᵀΓc / cᵀVc = 1/μ_max`.
    pub fn min_ratio(&self) -> f64 {
        1.0 / self.mu_max
    }

    pub fn to_spectral(&self, u: &DVector<f64>) -> DVector<f64> {
        self.vectors.tr_mul(&u.component_mul(&self.scale))
    }

    pub fn from_spectral(&self, y: &DVector<f64>) -> DVector<f64> {
        (&self.vectors * y).component_mul(&self.scale)
    }

    fn sums(&self, u: &DVector<f64>, lambda: f64) -> (f64, f64, f64) {
        // (Σu²/(μ+λ)², Σμu²/(μ+λ)², Σu²/(μ+λ))
        let mut num = 0.0;
        let mut den = 0.0;
        let mut lin = 0.0;
        for (uk, mk) in u.iter().zip(self.mu.iter()) {
            let s = mk + lambda;
            let w = uk * uk / (s * s);
            num += w;
            den += mk * w;
            lin += uk * uk / s;
        }
        (num, den, lin)
    }

    fn ratio(&self, u: &DVector<f64>, lambda: f64) -> f64 {
        let (num, den, _) = self.sums(u, lambda);
        num / den
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QcqpRegime {
    /// `U = 0`: every direction gives zero.
    Degenerate,
    /// Roughness constraint slack, `λ2 = 0`.
    Inactive,
    /// Roughness binding with `λ1, λ2 > 0`.
    Active,
    /// Roughness binding with `λ2 < -μ_max`, `λ1 < 0`.
    ActiveNegative,
    /// Binding at `λ2 = -μ_max` with `U` orthogonal to the top eigenspace.
    HardCase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcqpSolution {
    pub coefs: DVector<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub psi: f64,
    pub regime: QcqpRegime,
}

impl QcqpSolution {
    pub fn roughness_active(&self) -> bool {
        !matches!(self.regime, QcqpRegime::Inactive | QcqpRegime::Degenerate)
    }

    pub fn is_degenerate(&self) -> bool {
        self.regime == QcqpRegime::Degenerate
    }
}

/// Solves the QCQP from scratch for explicit `V`, diagonal `Γ` and `κ`.
pub fn solve_qcqp(
    u: &DVector<f64>,
    v: &DMatrix<f64>,
    gamma: &DVector<f64>,
    kappa: f64,
) -> Result<QcqpSolution> {
    let geom = QcqpGeometry::new(v, gamma);
    solve_with(&geom, u, kappa)
}

/// Optimal value only; skips building the coefficient vector.
pub fn psi_value(geom: &QcqpGeometry, u: &DVector<f64>, kappa: f64) -> Result<f64> {
    let us = geom.to_spectral(u);
    Ok(solve_spectral(geom, &us, kappa)?.psi)
}

pub fn solve_with(geom: &QcqpGeometry, u: &DVector<f64>, kappa: f64) -> Result<QcqpSolution> {
    if u.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite entry in U".into()));
    }
    let us = geom.to_spectral(u);
    let sol = solve_spectral(geom, &us, kappa)?;
    Ok(QcqpSolution {
        coefs: geom.from_spectral(&sol.y),
        lambda1: sol.lambda1,
        lambda2: sol.lambda2,
        psi: sol.psi,
        regime: sol.regime,
    })
}

struct SpectralSolution {
    y: DVector<f64>,
    lambda1: f64,
    lambda2: f64,
    psi: f64,
    regime: QcqpRegime,
}

fn solve_spectral(geom: &QcqpGeometry, u: &DVector<f64>, kappa: f64) -> Result<SpectralSolution> {
    let d = geom.dim();
    if !(kappa > 0.0) {
        return Err(Error::InvalidInput(format!("kappa must be positive, got {kappa}")));
    }
    let unorm2 = u.norm_squared();
    if unorm2 == 0.0 || !unorm2.is_normal() {
        return Ok(SpectralSolution {
            y: DVector::zeros(d),
            lambda1: 0.0,
            lambda2: 0.0,
            psi: 0.0,
            regime: QcqpRegime::Degenerate,
        });
    }
    let min_ratio = geom.min_ratio();
    if kappa < min_ratio * (1.0 - 1e-10) {
        return Err(Error::EmptyClass { kappa, min_ratio });
    }

    let mu = &geom.mu;
    let mu_max = geom.mu_max;
    let tiny = mu_max * 1e-300_f64.max(f64::EPSILON * 1e-3);

    // λ2 = 0: c ∝ V⁻¹U.
    if mu.iter().all(|&m| m > tiny) {
        let r0 = geom.ratio(u, 0.0);
        if r0 <= kappa {
            return Ok(finish(geom, u, 0.0, QcqpRegime::Inactive, 1.0));
        }
    }

    let r_inf = unorm2 / u.iter().zip(mu.iter()).map(|(a, m)| m * a * a).sum::<f64>();
    if kappa >= r_inf {
        // λ2 ∈ (0, ∞), R decreasing.
        let lo = 1e-12 * mu_max;
        let hi = 1e12 * mu_max;
        let r_lo = geom.ratio(u, lo);
        let r_hi = geom.ratio(u, hi);
        if r_hi > kappa * (1.0 + 1e-10) {
            return Err(Error::Bracket {
                low: r_hi,
                high: r_lo,
                target: kappa,
            });
        }
        if r_lo <= kappa {
            // R(0+) is already below κ; only reachable when some μ_k ≈ 0 and u_k ≈ 0.
            return Ok(finish(geom, u, lo, QcqpRegime::Active, 1.0));
        }
        let lambda = bisect_log(lo, hi, |l| geom.ratio(u, l) - kappa, false);
        return Ok(finish(geom, u, lambda, QcqpRegime::Active, 1.0));
    }

    // λ2 = -μ_max - t, t ∈ (0, ∞), R increasing in t from ≈1/μ_max to R(∞).
    let lo = 1e-12 * mu_max;
    let hi = 1e12 * mu_max;
    let r_lo = geom.ratio(u, -mu_max - lo);
    if r_lo <= kappa {
        let t = bisect_log(lo, hi, |t| geom.ratio(u, -mu_max - t) - kappa, true);
        return Ok(finish(geom, u, -mu_max - t, QcqpRegime::ActiveNegative, -1.0));
    }
    hard_case(geom, u, kappa).ok_or(Error::Bracket {
        low: r_lo,
        high: r_inf,
        target: kappa,
    })
}

/// Bisection on `ln λ`. `increasing` states the sign pattern of `f`.
fn bisect_log(lo: f64, hi: f64, f: impl Fn(f64) -> f64, increasing: bool) -> f64 {
    let mut a = lo.ln();
    let mut b = hi.ln();
    for _ in 0..MAX_BISECTION {
        let mid = 0.5 * (a + b);
        let v = f(mid.exp());
        let go_right = if increasing { v < 0.0 } else { v > 0.0 };
        if go_right {
            a = mid;
        } else {
            b = mid;
        }
        if (b - a).abs() <= 1e-15 * a.abs().max(1.0) {
            break;
        }
    }
    (0.5 * (a + b)).exp()
}

fn finish(
    geom: &QcqpGeometry,
    u: &DVector<f64>,
    lambda2: f64,
    regime: QcqpRegime,
    sign: f64,
) -> SpectralSolution {
    let (_, den, lin) = geom.sums(u, lambda2);
    let lambda1 = sign * den.sqrt();
    let y = DVector::from_fn(u.len(), |k, _| u[k] / (lambda1 * (geom.mu[k] + lambda2)));
    SpectralSolution {
        y,
        lambda1,
        lambda2,
        psi: lin / lambda1,
        regime,
    }
}

/// `λ2 = -μ_max` with `u` (numerically) orthogonal to the top eigenspace.
fn hard_case(geom: &QcqpGeometry, u: &DVector<f64>, kappa: f64) -> Option<SpectralSolution> {
    let mu = &geom.mu;
    let mu_max = geom.mu_max;
    let d = u.len();
    let mut w = DVector::zeros(d);
    for k in 0..d {
        if !geom.top.contains(&k) {
            w[k] = u[k] / (mu[k] - mu_max);
        }
    }
    let wdiff: f64 = (0..d).map(|k| (mu[k] - mu_max) * w[k] * w[k]).sum();
    let s2 = (1.0 - mu_max * kappa) / wdiff;
    if !(s2 >= 0.0) {
        return None;
    }
    let tau2 = kappa - s2 * w.norm_squared();
    if tau2 < -1e-12 * kappa {
        return None;
    }
    let s = -s2.sqrt();
    let mut y = &w * s;
    y[geom.top[0]] += tau2.max(0.0).sqrt();
    let psi = u.dot(&y);
    Some(SpectralSolution {
        y,
        lambda1: 1.0 / s,
        lambda2: -mu_max,
        psi,
        regime: QcqpRegime::HardCase,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random_spd(d: usize, seed: u64) -> DMatrix<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(d, d) * 0.1
    }

    #[test]
    fn identity_case_is_cauchy_schwarz() {
        let d = 4;
        let v = DMatrix::identity(d, d);
        let g = DVector::from_element(d, 1.0);
        let u = DVector::from_vec(vec![0.3, -1.2, 0.5, 2.0]);
        let sol = solve_qcqp(&u, &v, &g, 1.0).unwrap();
        assert_relative_eq!(sol.psi, u.norm(), max_relative = 1e-12);
        assert_relative_eq!(sol.coefs, &u / u.norm(), epsilon = 1e-12);
        assert_eq!(sol.regime, QcqpRegime::Inactive);
        let sol = solve_qcqp(&u, &v, &g, 5.0).unwrap();
        assert_relative_eq!(sol.psi, u.norm(), max_relative = 1e-12);
    }

    #[test]
    fn zero_u_is_degenerate() {
        let v = DMatrix::identity(3, 3);
        let g = DVector::from_element(3, 1.0);
        let sol = solve_qcqp(&DVector::zeros(3), &v, &g, 2.0).unwrap();
        assert_eq!(sol.psi, 0.0);
        assert!(sol.is_degenerate());
    }

    #[test]
    fn empty_class_errors() {
        let v = DMatrix::identity(2, 2);
        let g = DVector::from_vec(vec![4.0, 9.0]);
        let err = solve_qcqp(&DVector::from_vec(vec![1.0, 1.0]), &v, &g, 3.0).unwrap_err();
        assert!(matches!(err, Error::EmptyClass { .. }));
    }

    #[test]
    fn constraints_and_closed_form_agree() {
        for seed in 0..30 {
            let d = 6;
            let v = random_spd(d, seed);
            let g = DVector::from_fn(d, |j, _| (1.0 + j as f64).powi(4));
            let u = random_spd(d, seed + 100).column(0).into_owned();
            let geom = QcqpGeometry::new(&v, &g);
            for &mult in &[1.01, 1.5, 3.0, 10.0, 1e3] {
                let kappa = geom.min_ratio() * mult;
                let sol = solve_with(&geom, &u, kappa).unwrap();
                let c = &sol.coefs;
                assert_relative_eq!(c.dot(&(&v * c)), 1.0, epsilon = 1e-8);
                let rough: f64 = c.iter().zip(g.iter()).map(|(a, b)| a * a * b).sum();
                assert!(rough <= kappa * (1.0 + 1e-8), "rough {rough} kappa {kappa}");
                assert_relative_eq!(sol.psi, u.dot(c), epsilon = 1e-10, max_relative = 1e-10);
                if sol.regime != QcqpRegime::HardCase {
                    let m = &v + DMatrix::from_diagonal(&g) * sol.lambda2;
                    let x = m.lu().solve(&u).unwrap();
                    assert_relative_eq!(sol.psi, u.dot(&x) / sol.lambda1, max_relative = 1e-8);
                }
            }
        }
    }

    #[test]
    fn hard_case_handled() {
        // u orthogonal to the smoothest direction, κ just above the minimum ratio.
        let v = DMatrix::identity(3, 3);
        let g = DVector::from_vec(vec![1.0, 4.0, 9.0]);
        let u = DVector::from_vec(vec![0.0, 0.0, 1.0]);
        let sol = solve_qcqp(&u, &v, &g, 2.0).unwrap();
        let c = &sol.coefs;
        assert_relative_eq!(c.norm_squared(), 1.0, epsilon = 1e-10);
        let rough: f64 = c.iter().zip(g.iter()).map(|(a, b)| a * a * b).sum();
        assert!(rough <= 2.0 + 1e-9);
        // Optimum: c = (√(7/8), 0, √(1/8)).
        assert_relative_eq!(sol.psi, (1.0f64 / 8.0).sqrt(), max_relative = 1e-9);
    }
}
