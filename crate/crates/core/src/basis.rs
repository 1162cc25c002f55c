//! Second-order Sobolev eigenbasis, the roughness functional, and the direction class `H_κ`.
//!
//! The eigenfunctions are the periodic trigonometric system on `[0, 1]`:
//!
//! ```text
//! η_{2k-1}(u) = √2 cos(2πku),   η_{2k}(u) = √2 sin(2πku),   γ_{2k-1} = γ_{2k} = (2πk)^-4
//! ```
//!
//! Every member of the span is periodic. A rescaled exposure `a01 ∈ [0, 1]` is therefore
//! placed at `u = m + (1 - 2m)·a01` for a configurable margin `m ∈ [0, 1/2)`. With `m > 0`
//! the two ends of the observed exposure range are no longer glued together, so curves whose
//! values differ at the two ends stay representable. `m = 0` evaluates the basis directly at
//! `a01`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qcqp::QcqpGeometry;

/// Truncated Sobolev eigenbasis of dimension `dim`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SobolevBasis {
    dim: usize,
    margin: f64,
}

impl SobolevBasis {
    /// Basis evaluated directly on `[0, 1]` (no margin).
    pub fn new(dim: usize) -> Self {
        Self::with_margin(dim, 0.0)
    }

    pub fn with_margin(dim: usize, margin: f64) -> Self {
        assert!(dim >= 1, "basis dimension must be positive");
        assert!(
            (0.0..0.5).contains(&margin),
            "margin must lie in [0, 1/2), got {margin}"
        );
        Self { dim, margin }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    /// Position on the period for a rescaled exposure.
    pub fn embed(&self, a01: f64) -> f64 {
        self.margin + (1.0 - 2.0 * self.margin) * a01
    }

    /// `du / da01`.
    pub fn stretch(&self) -> f64 {
        1.0 - 2.0 * self.margin
    }

    /// Frequency `k` of the zero-based index `j`.
    fn freq(j: usize) -> f64 {
        (j / 2 + 1) as f64
    }

    /// Eigenvalue `γ_j` for the zero-based index `j`.
    pub fn eigenvalue(&self, j: usize) -> f64 {
        (2.0 * PI * Self::freq(j)).powi(-4)
    }

    pub fn eigenvalues(&self) -> DVector<f64> {
        DVector::from_fn(self.dim, |j, _| self.eigenvalue(j))
    }

    /// Diagonal of `Γ = diag(1/γ_1, ..., 1/γ_D)`.
    pub fn gamma_diag(&self) -> DVector<f64> {
        DVector::from_fn(self.dim, |j, _| 1.0 / self.eigenvalue(j))
    }

    /// Evaluates the eigenfunction at a position `u` on the period (no embedding).
    pub fn eval_at_period(&self, j: usize, u: f64) -> f64 {
        let x = 2.0 * PI * Self::freq(j) * u;
        if j.is_multiple_of(2) {
            2f64.sqrt() * x.cos()
        } else {
            2f64.sqrt() * x.sin()
        }
    }

    /// `(η_1(a01), ..., η_D(a01))`. Inputs outside `[0, 1]` follow the periodic extension.
    pub fn eval(&self, a01: f64) -> DVector<f64> {
        let u = self.embed(a01);
        DVector::from_fn(self.dim, |j, _| self.eval_at_period(j, u))
    }

    /// `n x D` matrix of basis evaluations at the given rescaled exposures.
    pub fn design(&self, a01: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(a01.len(), self.dim);
        for (i, &a) in a01.iter().enumerate() {
            let u = self.embed(a);
            for j in 0..self.dim {
                m[(i, j)] = self.eval_at_period(j, u);
            }
        }
        m
    }
}

/// `Σ c_d²/γ_d` for a coefficient vector; any intercept is excluded.
pub fn roughness_of(coefs: &DVector<f64>, basis: &SobolevBasis) -> f64 {
    coefs
        .iter()
        .enumerate()
        .map(|(j, c)| c * c / basis.eigenvalue(j))
        .sum()
}

/// `c_0 + Σ c_d η_d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisFunction {
    pub intercept: f64,
    pub coefs: DVector<f64>,
}

impl BasisFunction {
    pub fn new(coefs: DVector<f64>) -> Self {
        Self {
            intercept: 0.0,
            coefs,
        }
    }

    pub fn eval(&self, basis: &SobolevBasis, a01: f64) -> f64 {
        self.intercept + basis.eval(a01).dot(&self.coefs)
    }
}

/// Roughness `J(f) = Σ c_d²/γ_d`.
pub fn roughness(f: &BasisFunction, basis: &SobolevBasis) -> f64 {
    roughness_of(&f.coefs, basis)
}

/// Empirical Gram matrices over the sample.
#[derive(Debug, Clone)]
pub struct GramMatrices {
    /// `V[d1][d2]`: empirical covariance of `η_{d1}(A)` and `η_{d2}(A)` (1/n normalization).
    pub v: DMatrix<f64>,
    /// Diagonal of `Γ`.
    pub gamma: DVector<f64>,
}

impl GramMatrices {
    pub fn gamma_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.gamma)
    }
}

/// Column-centers a design matrix, returning the centered copy and the column means.
pub fn center_columns(design: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = design.nrows() as f64;
    let means = DVector::from_iterator(
        design.ncols(),
        design.column_iter().map(|c| c.sum() / n),
    );
    let mut centered = design.clone();
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    (centered, means)
}

pub fn gram_matrices(basis: &SobolevBasis, a01: &[f64]) -> Result<GramMatrices> {
    if a01.len() < 2 {
        return Err(Error::TooFewRows {
            needed: 2,
            found: a01.len(),
        });
    }
    let (centered, _) = center_columns(&basis.design(a01));
    Ok(GramMatrices {
        v: gram_from_centered(&centered),
        gamma: basis.gamma_diag(),
    })
}

pub(crate) fn gram_from_centered(centered: &DMatrix<f64>) -> DMatrix<f64> {
    let n = centered.nrows() as f64;
    let mut v = centered.tr_mul(centered) / n;
    symmetrize(&mut v);
    v
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let k = m.nrows();
    for i in 0..k {
        for j in (i + 1)..k {
            let s = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
}

/// Tolerance used by membership checks.
pub const MEMBERSHIP_TOL: f64 = 1e-8;

/// The class `H_κ = {Σ c_d η_d : cᵀΓc ≤ κ, cᵀVc = 1}` on a fixed sample.
#[derive(Debug, Clone)]
pub struct FunctionClassSpec {
    pub basis: SobolevBasis,
    pub kappa: f64,
    /// Gram matrix, including any stabilizing ridge.
    pub v: DMatrix<f64>,
    pub gamma: DVector<f64>,
    /// Ridge added to the diagonal of `V` (zero when `V` was well conditioned).
    pub ridge: f64,
    geometry: QcqpGeometry,
}

impl FunctionClassSpec {
    pub fn new(basis: SobolevBasis, a01: &[f64], kappa: f64) -> Result<Self> {
        let gram = gram_matrices(&basis, a01)?;
        Self::from_gram(basis, gram.v, kappa)
    }

    /// Builds the class from a precomputed `V`. A ridge of `1e-10·tr(V)/D` is added when `V`
    /// is numerically singular.
    pub fn from_gram(basis: SobolevBasis, mut v: DMatrix<f64>, kappa: f64) -> Result<Self> {
        if !(kappa > 0.0) || !kappa.is_finite() {
            return Err(Error::InvalidInput(format!(
                "kappa must be positive and finite, got {kappa}"
            )));
        }
        if v.nrows() != basis.dim() || v.ncols() != basis.dim() {
            return Err(Error::InvalidInput("Gram matrix does not match the basis".into()));
        }
        symmetrize(&mut v);
        let dim = basis.dim() as f64;
        let ridge_size = 1e-10 * v.trace().max(f64::MIN_POSITIVE) / dim;
        let min_eig = v.clone().symmetric_eigenvalues().min();
        let ridge = if min_eig < ridge_size { ridge_size } else { 0.0 };
        if ridge > 0.0 {
            for i in 0..basis.dim() {
                v[(i, i)] += ridge;
            }
        }
        let gamma = basis.gamma_diag();
        let geometry = QcqpGeometry::new(&v, &gamma);
        Ok(Self {
            basis,
            kappa,
            v,
            gamma,
            ridge,
            geometry,
        })
    }

    pub fn with_kappa(&self, kappa: f64) -> Result<Self> {
        if !(kappa > 0.0) || !kappa.is_finite() {
            return Err(Error::InvalidInput(format!(
                "kappa must be positive and finite, got {kappa}"
            )));
        }
        let mut out = self.clone();
        out.kappa = kappa;
        Ok(out)
    }

    pub fn geometry(&self) -> &QcqpGeometry {
        &self.geometry
    }

    /// Smallest attainable `J(h)/Var_n(h)`; the class is empty for smaller `κ`.
    pub fn min_roughness_ratio(&self) -> f64 {
        self.geometry.min_ratio()
    }

    pub fn gamma_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.gamma)
    }
}

/// Constraint diagnostics for a candidate coefficient vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Membership {
    pub member: bool,
    pub roughness: f64,
    pub variance: f64,
}

pub fn project_membership(c: &DVector<f64>, spec: &FunctionClassSpec) -> Membership {
    let roughness: f64 = c
        .iter()
        .zip(spec.gamma.iter())
        .map(|(ci, g)| ci * ci * g)
        .sum();
    let variance = c.dot(&(&spec.v * c));
    let member = roughness <= spec.kappa * (1.0 + MEMBERSHIP_TOL)
        && (variance - 1.0).abs() <= MEMBERSHIP_TOL;
    Membership {
        member,
        roughness,
        variance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const S2: f64 = std::f64::consts::SQRT_2;

    #[test]
    fn closed_form_values() {
        let b = SobolevBasis::new(2);
        let v = b.eval(0.0);
        assert_relative_eq!(v[0], S2);
        assert_relative_eq!(v[1], 0.0);
        let v = b.eval(0.25);
        assert!(v[0].abs() < 1e-15);
        assert_relative_eq!(v[1], S2);
        let v = SobolevBasis::new(4).eval(0.5);
        let expect = [-S2, 0.0, S2, 0.0];
        for (x, e) in v.iter().zip(expect) {
            assert!((x - e).abs() < 1e-14);
        }
    }

    #[test]
    fn eigenvalues_nonincreasing() {
        let b = SobolevBasis::new(20);
        let g = b.eigenvalues();
        assert_relative_eq!(g[0], (2.0 * PI).powi(-4));
        assert_eq!(g[0], g[1]);
        assert_eq!(g[18], g[19]);
        assert!(g.as_slice().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn roughness_examples() {
        let b = SobolevBasis::new(6);
        assert_eq!(roughness(&BasisFunction::new(DVector::zeros(6)), &b), 0.0);
        let mut e1 = DVector::zeros(6);
        e1[0] = 1.0;
        assert_relative_eq!(
            roughness(&BasisFunction::new(e1.clone()), &b),
            (2.0 * PI).powi(4),
            max_relative = 1e-14
        );
        let f = BasisFunction {
            intercept: 7.0,
            coefs: e1.clone() * 3.0,
        };
        assert_relative_eq!(
            roughness(&f, &b),
            9.0 * (2.0 * PI).powi(4),
            max_relative = 1e-14
        );
    }

    #[test]
    fn gram_examples() {
        let b = SobolevBasis::new(4);
        let g = gram_matrices(&b, &[0.3, 0.3]).unwrap();
        assert!(g.v.iter().all(|x| x.abs() < 1e-15));
        assert_relative_eq!(g.gamma[0], (2.0 * PI).powi(4));
        assert_relative_eq!(g.gamma_matrix()[(0, 0)], (2.0 * PI).powi(4));
        assert!(gram_matrices(&b, &[0.1]).is_err());
    }

    #[test]
    fn singular_gram_gets_ridge() {
        let b = SobolevBasis::new(4);
        let spec = FunctionClassSpec::new(b, &[0.1, 0.1, 0.6], 1e6).unwrap();
        assert!(spec.ridge > 0.0);
        let spec = FunctionClassSpec::new(b, &[0.05, 0.2, 0.45, 0.6, 0.85, 0.95], 1e6).unwrap();
        assert_eq!(spec.ridge, 0.0);
    }

    #[test]
    fn membership_examples() {
        let b = SobolevBasis::new(2);
        let a: Vec<f64> = (0..40).map(|i| i as f64 / 40.0).collect();
        let kappa0 = 1e4;
        let spec = FunctionClassSpec::new(b, &a, kappa0).unwrap();
        let zero = project_membership(&DVector::zeros(2), &spec);
        assert!(!zero.member);

        let mut c = DVector::from_vec(vec![1.0, 0.0]);
        let var = c.dot(&(&spec.v * &c));
        c /= var.sqrt();
        let rough = project_membership(&c, &spec).roughness;
        let half = spec.with_kappa(2.0 * rough).unwrap();
        let m = project_membership(&c, &half);
        assert!(m.member);
        assert_relative_eq!(m.roughness, half.kappa / 2.0, max_relative = 1e-12);
        let exact = spec.with_kappa(rough).unwrap();
        assert!(project_membership(&c, &exact).member);
        let tight = spec.with_kappa(rough * 0.99).unwrap();
        assert!(!project_membership(&c, &tight).member);
    }

    #[test]
    fn margin_embedding() {
        let b = SobolevBasis::with_margin(2, 0.25);
        assert_eq!(b.embed(0.0), 0.25);
        assert_eq!(b.embed(1.0), 0.75);
        let v = b.eval(0.0);
        assert!(v[0].abs() < 1e-15);
        assert_relative_eq!(v[1], S2);
    }
}
