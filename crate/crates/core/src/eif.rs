//! Inner products of the centered curve with each basis function, and the estimated
//! efficient influence function.
//!
//! With `δ_i = θ(A_i) − θ*(A_i)` and `H̃` the column-centered basis design,
//!
//! ```text
//! plug-in   U[d] = (1/n) Σ_i (δ_i − δ̄) H̃[i][d]
//! one-step  U[d] = plug-in + (1/n) Σ_i w_i (Y_i − Q(W_i, A_i)) H̃[i][d]
//! ```
//!
//! Both are linear in the direction: `ψ̂(Σ c_d η_d) = Uᵀc`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{center_columns, SobolevBasis};
use crate::data::{NullCurve, ObservationSet};
use crate::nuisance::NuisanceEval;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Plugin,
    OneStep,
    Tml,
}

impl EstimatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Plugin => "plugin",
            EstimatorKind::OneStep => "one_step",
            EstimatorKind::Tml => "tml",
        }
    }
}

/// Basis evaluated at the sample exposures, centered column by column.
#[derive(Debug, Clone)]
pub struct CenteredDesign {
    pub basis: SobolevBasis,
    /// `n × D`, column means zero.
    pub h: DMatrix<f64>,
    /// Column means of the raw design.
    pub means: DVector<f64>,
}

impl CenteredDesign {
    pub fn new(basis: SobolevBasis, a01: &[f64]) -> Self {
        let (h, means) = center_columns(&basis.design(a01));
        Self { basis, h, means }
    }

    pub fn n(&self) -> usize {
        self.h.nrows()
    }

    pub fn dim(&self) -> usize {
        self.h.ncols()
    }

    /// Centered basis at an arbitrary point: `η(a01) − means`.
    pub fn centered_at(&self, a01: f64) -> DVector<f64> {
        self.basis.eval(a01) - &self.means
    }
}

/// TML bookkeeping carried by a [`PsiVector`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TmlMeta {
    pub steps: usize,
    pub final_dn: f64,
    pub threshold: f64,
    /// `D` at every step, kept on request.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiVector {
    pub u: DVector<f64>,
    pub kind: EstimatorKind,
    /// Representation tag of the null curve.
    pub null: String,
    pub tml: Option<TmlMeta>,
}

impl PsiVector {
    /// `ψ̂(Σ c_d η_d)`.
    pub fn apply(&self, c: &DVector<f64>) -> f64 {
        self.u.dot(c)
    }
}

/// Plug-in inner products from curve values at the sample points.
pub fn plugin_u(theta: &[f64], theta_star: &[f64], h: &DMatrix<f64>) -> DVector<f64> {
    let n = h.nrows();
    let delta: Vec<f64> = theta.iter().zip(theta_star).map(|(a, b)| a - b).collect();
    let dbar = delta.iter().sum::<f64>() / n as f64;
    let dc = DVector::from_iterator(n, delta.iter().map(|d| d - dbar));
    h.tr_mul(&dc) / n as f64
}

/// `(1/n) Σ_i w_i r_i H̃[i][·]`: the one-step correction, also the TML residual moment.
pub fn correction_u(weights: &[f64], residuals: &[f64], h: &DMatrix<f64>) -> DVector<f64> {
    let n = h.nrows();
    let wr = DVector::from_iterator(n, weights.iter().zip(residuals).map(|(w, r)| w * r));
    h.tr_mul(&wr) / n as f64
}

pub fn psi_plugin(
    theta: &[f64],
    null: &NullCurve,
    data: &ObservationSet,
    design: &CenteredDesign,
) -> PsiVector {
    let star = null.eval_many(data.a01());
    PsiVector {
        u: plugin_u(theta, &star, &design.h),
        kind: EstimatorKind::Plugin,
        null: null.tag().into(),
        tml: None,
    }
}

pub fn psi_one_step(
    eval: &NuisanceEval,
    null: &NullCurve,
    data: &ObservationSet,
    design: &CenteredDesign,
) -> PsiVector {
    let star = null.eval_many(data.a01());
    let u = plugin_u(&eval.theta, &star, &design.h)
        + correction_u(&eval.weights, &eval.residuals, &design.h);
    PsiVector {
        u,
        kind: EstimatorKind::OneStep,
        null: null.tag().into(),
        tml: None,
    }
}

/// Estimated influence function of `ψ(η_d)` at each observation.
#[derive(Debug, Clone, PartialEq)]
pub struct EifMatrix {
    /// `n × D`.
    pub phi: DMatrix<f64>,
    /// Whether `θ*` was replaced by the plug-in curve.
    pub null_mode: bool,
}

impl EifMatrix {
    pub fn column_means(&self) -> DVector<f64> {
        let n = self.phi.nrows() as f64;
        DVector::from_iterator(self.phi.ncols(), self.phi.column_iter().map(|c| c.sum() / n))
    }
}

/// Assembles `Φ[i][d]` from four pieces:
///
/// ```text
/// (δ_i − δ̄) H̃[i][d]
/// + w_i r_i H̃[i][d]
/// + (1/n) Σ_l Q(W_i, A_l) H̃[l][d]
/// − { 2 E_n[θ̄ η̃_d] − E_n[θ̄* η̃_d] }
/// ```
///
/// `theta_star = None` selects null mode, where `θ* = θ_n` and the first piece vanishes.
/// `h` is any column-centered design, one column per direction.
pub fn eif_matrix(eval: &NuisanceEval, theta_star: Option<&[f64]>, h: &DMatrix<f64>) -> EifMatrix {
    let n = h.nrows();
    let nf = n as f64;
    let theta = &eval.theta;
    let star: Vec<f64> = match theta_star {
        Some(s) => s.to_vec(),
        None => theta.clone(),
    };
    let delta: Vec<f64> = theta.iter().zip(&star).map(|(a, b)| a - b).collect();
    let dbar = delta.iter().sum::<f64>() / nf;
    let t_vec = h.tr_mul(&DVector::from_column_slice(theta)) / nf;
    let s_vec = h.tr_mul(&DVector::from_column_slice(&star)) / nf;
    let constant = &t_vec * 2.0 - &s_vec;

    let mut phi = &eval.q_mat * h / nf;
    for i in 0..n {
        let a = if theta_star.is_some() { delta[i] - dbar } else { 0.0 }
            + eval.weights[i] * eval.residuals[i];
        for d in 0..h.ncols() {
            phi[(i, d)] += a * h[(i, d)] - constant[d];
        }
    }
    EifMatrix {
        phi,
        null_mode: theta_star.is_none(),
    }
}

/// [`eif_matrix`] with the null given as a curve; `None` selects null mode.
pub fn eif_evaluate(
    eval: &NuisanceEval,
    null: Option<&NullCurve>,
    data: &ObservationSet,
    design: &CenteredDesign,
) -> EifMatrix {
    match null {
        Some(c) => {
            let star = c.eval_many(data.a01());
            eif_matrix(eval, Some(&star), &design.h)
        }
        None => eif_matrix(eval, None, &design.h),
    }
}
