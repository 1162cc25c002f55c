//! Targeted update of the outcome regression along a universal least-favorable path.
//!
//! For a direction `h = Σ c_d η_d` the path score is
//! `Z(w, a; h) = ω(w, a) · (h(a) − mean_i h(A_i))` with
//! `ω(w, a) = mean_k g(a | W_k) / max(g(a | w), floor)`, so `Z(W_i, A_i; h) = w_i (H̃c)_i`.
//!
//! Each step picks the direction in `H_κ` with the largest residual moment
//! `D = max_h (1/n) Σ_i r_i Z(O_i; h)` and moves `Q ← Q + ε Z(·; h)`. Along the current
//! segment the half squared-error loss `½ mean (Y − Q)²` has derivative exactly `−D`.

use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::basis::FunctionClassSpec;
use crate::data::{NullCurve, ObservationSet};
use crate::eif::{correction_u, plugin_u, CenteredDesign, EstimatorKind, PsiVector, TmlMeta};
use crate::error::{Error, Result};
use crate::nuisance::{ConditionalDensity, NuisanceEval, NuisanceFit, OutcomeModel};
use crate::numerics::{sd, var_n};
use crate::qcqp::solve_with;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TmlConfig {
    /// Step size as a multiple of `sd(Y)`.
    pub epsilon_scale: f64,
    pub max_steps: usize,
}

impl Default for TmlConfig {
    fn default() -> Self {
        Self {
            epsilon_scale: 1e-3,
            max_steps: 500,
        }
    }
}

impl TmlConfig {
    pub fn epsilon_for(&self, data: &ObservationSet) -> f64 {
        let s = sd(data.y());
        self.epsilon_scale * if s > 0.0 { s } else { 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TmlUpdate {
    pub epsilon: f64,
    /// Number of steps taken.
    pub steps: usize,
    /// Direction coefficients used at each step.
    pub directions: Vec<DVector<f64>>,
    /// `D` before each step and after the last one (`steps + 1` values).
    pub trace: Vec<f64>,
    pub threshold: f64,
    /// Sum of the step directions.
    pub cumulative: DVector<f64>,
    /// `Y_i − Q̃(W_i, A_i)` after the update.
    pub residuals: Vec<f64>,
    /// Maximizing direction at the final point (zero when degenerate).
    pub final_direction: DVector<f64>,
}

impl TmlUpdate {
    pub fn final_dn(&self) -> f64 {
        *self.trace.last().expect("trace is never empty")
    }

    /// Residuals at `β = b ε`, before step `b`.
    pub fn residuals_at(&self, eval: &NuisanceEval, design: &CenteredDesign, b: usize) -> Vec<f64> {
        let mut r = eval.residuals.clone();
        for c in &self.directions[..b] {
            let hc = &design.h * c;
            for i in 0..r.len() {
                r[i] -= self.epsilon * eval.weights[i] * hc[i];
            }
        }
        r
    }

    /// The fluctuated regression as a predictor usable anywhere.
    pub fn fluctuated(&self, fit: &NuisanceFit, data: &ObservationSet, design: &CenteredDesign) -> FluctuatedOutcome {
        FluctuatedOutcome {
            base: fit.outcome.clone(),
            density: fit.density.clone(),
            g_floor: fit.g_floor,
            rows: (0..data.n()).map(|i| data.w_row(i)).collect(),
            design: design.clone(),
            epsilon: self.epsilon,
            cumulative: self.cumulative.clone(),
        }
    }
}

/// `Q̃(w, a) = Q(w, a) + ε ω(w, a) Σ_d C_d (η_d(a) − m_d)`.
pub struct FluctuatedOutcome {
    base: Arc<dyn OutcomeModel>,
    density: Arc<dyn ConditionalDensity>,
    g_floor: f64,
    rows: Vec<Vec<f64>>,
    design: CenteredDesign,
    epsilon: f64,
    cumulative: DVector<f64>,
}

impl OutcomeModel for FluctuatedOutcome {
    fn predict(&self, w: &[f64], a01: f64) -> f64 {
        let marg = self
            .rows
            .iter()
            .map(|r| self.density.density(r, a01).max(self.g_floor))
            .sum::<f64>()
            / self.rows.len() as f64;
        let omega = marg / self.density.density(w, a01).max(self.g_floor);
        let h = self.design.centered_at(a01).dot(&self.cumulative);
        self.base.predict(w, a01) + self.epsilon * omega * h
    }
}

/// `{n log n}^{-1/2} Var_n((Y − Q) Z(·; h_ref))^{-1/2}`.
pub fn tml_threshold(eval: &NuisanceEval, design: &CenteredDesign, h_ref: &DVector<f64>) -> Result<f64> {
    let n = eval.n() as f64;
    let hc = &design.h * h_ref;
    let terms: Vec<f64> = (0..eval.n())
        .map(|i| eval.residuals[i] * eval.weights[i] * hc[i])
        .collect();
    let v = var_n(&terms);
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::DegenerateThreshold);
    }
    Ok(1.0 / ((n * n.ln()).sqrt() * v.sqrt()))
}

/// Largest residual moment over `H_κ` and its maximizing direction.
pub fn residual_moment(
    weights: &[f64],
    residuals: &[f64],
    design: &CenteredDesign,
    spec: &FunctionClassSpec,
) -> Result<(f64, DVector<f64>)> {
    let m = correction_u(weights, residuals, &design.h);
    let sol = solve_with(spec.geometry(), &m, spec.kappa)?;
    Ok((sol.psi, sol.coefs))
}

pub fn tml_update(
    eval: &NuisanceEval,
    design: &CenteredDesign,
    spec: &FunctionClassSpec,
    epsilon: f64,
    h_ref: &DVector<f64>,
    max_steps: usize,
) -> Result<TmlUpdate> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput(format!("step size must be positive, got {epsilon}")));
    }
    let threshold = tml_threshold(eval, design, h_ref)?;
    let n = eval.n();
    let mut r = eval.residuals.clone();
    let mut trace = Vec::new();
    let mut directions = Vec::new();
    let mut cumulative = DVector::zeros(design.dim());
    loop {
        let (dn, c) = residual_moment(&eval.weights, &r, design, spec)?;
        trace.push(dn);
        if dn <= threshold {
            return Ok(TmlUpdate {
                epsilon,
                steps: directions.len(),
                directions,
                trace,
                threshold,
                cumulative,
                residuals: r,
                final_direction: c,
            });
        }
        if directions.len() >= max_steps {
            return Err(Error::TmlNonConvergence {
                steps: max_steps,
                last: dn,
                threshold,
                trace,
            });
        }
        let hc = &design.h * &c;
        for i in 0..n {
            r[i] -= epsilon * eval.weights[i] * hc[i];
        }
        cumulative += &c;
        directions.push(c);
    }
}

/// Targeted curve at the sample exposures: `θ̃(A_k) = θ_n(A_k) + ε (H̃C)_k mean_i ω(W_i, A_k)`.
pub fn tml_theta(eval: &NuisanceEval, design: &CenteredDesign, update: &TmlUpdate) -> Vec<f64> {
    let n = eval.n();
    let hc = &design.h * &update.cumulative;
    (0..n)
        .map(|k| {
            let col = eval.g_mat.column(k);
            let mean_omega = col.iter().map(|g| eval.g_marginal[k] / g).sum::<f64>() / n as f64;
            eval.theta[k] + update.epsilon * hc[k] * mean_omega
        })
        .collect()
}

pub fn psi_tml(
    eval: &NuisanceEval,
    design: &CenteredDesign,
    update: &TmlUpdate,
    null: &NullCurve,
    data: &ObservationSet,
) -> PsiVector {
    let theta = tml_theta(eval, design, update);
    let star = null.eval_many(data.a01());
    PsiVector {
        u: plugin_u(&theta, &star, &design.h),
        kind: EstimatorKind::Tml,
        null: null.tag().into(),
        tml: Some(TmlMeta {
            steps: update.steps,
            final_dn: update.final_dn(),
            threshold: update.threshold,
            trace: None,
        }),
    }
}

/// `½ mean_i (Y_i − Q_β(W_i, A_i))²` at `β = b ε + t` along segment `b`'s direction.
pub fn path_loss(
    eval: &NuisanceEval,
    design: &CenteredDesign,
    update: &TmlUpdate,
    b: usize,
    t: f64,
    direction: &DVector<f64>,
) -> f64 {
    let r = update.residuals_at(eval, design, b);
    let hc = &design.h * direction;
    let n = r.len();
    (0..n)
        .map(|i| {
            let e = r[i] - t * eval.weights[i] * hc[i];
            0.5 * e * e
        })
        .sum::<f64>()
        / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{gram_matrices, SobolevBasis};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize, noise: f64) -> (ObservationSet, NuisanceFit, CenteredDesign, FunctionClassSpec) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0));
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| (3.0 * a[i]).sin() + noise * rng.random_range(-1.0..1.0))
            .collect();
        let data = ObservationSet::new(w, a, y).unwrap();
        let fit = NuisanceFit::new(
            Arc::new(|_: &[f64], a: f64| 0.5 * a),
            Arc::new(|w: &[f64], _a: f64| 1.0 + 0.3 * w[0]),
            0.01,
        );
        let basis = SobolevBasis::with_margin(6, 0.25);
        let design = CenteredDesign::new(basis, data.a01());
        let g = gram_matrices(&basis, data.a01()).unwrap();
        let spec = FunctionClassSpec::from_gram(basis, g.v, 1e5).unwrap();
        (data, fit, design, spec)
    }

    #[test]
    fn update_reaches_threshold() {
        let (data, fit, design, spec) = setup(200, 0.5);
        let eval = fit.evaluate(&data);
        let h_ref = {
            let mut c = DVector::zeros(6);
            c[1] = 1.0;
            let v = c.dot(&(&spec.v * &c));
            c / v.sqrt()
        };
        let up = tml_update(&eval, &design, &spec, 1e-3, &h_ref, 5000).unwrap();
        assert!(up.steps > 0);
        assert!(up.final_dn() <= up.threshold);
        assert_eq!(up.trace.len(), up.steps + 1);
        let (dn, _) = residual_moment(&eval.weights, &up.residuals, &design, &spec).unwrap();
        assert!((dn - up.final_dn()).abs() < 1e-12);
    }

    #[test]
    fn immediate_stop_matches_plugin() {
        let (data, fit, design, spec) = setup(100, 0.5);
        let eval = fit.evaluate(&data);
        let h_ref = DVector::from_element(6, 1e-9);
        let up = tml_update(&eval, &design, &spec, 1e-3, &h_ref, 10).unwrap();
        assert_eq!(up.steps, 0);
        let tml = psi_tml(&eval, &design, &up, &NullCurve::Zero, &data);
        let pl = plugin_u(&eval.theta, &vec![0.0; data.n()], &design.h);
        assert_eq!(tml.u, pl);
    }

    #[test]
    fn fluctuated_predictor_matches_sample_residuals() {
        let (data, fit, design, spec) = setup(60, 0.5);
        let eval = fit.evaluate(&data);
        let mut h_ref = DVector::zeros(6);
        h_ref[0] = 1.0;
        let up = tml_update(&eval, &design, &spec, 1e-2, &h_ref, 5000).unwrap();
        let q = up.fluctuated(&fit, &data, &design);
        for i in 0..data.n() {
            let pred = q.predict(&data.w_row(i), data.a01()[i]);
            assert!((data.y()[i] - pred - up.residuals[i]).abs() < 1e-10);
        }
        let theta = tml_theta(&eval, &design, &up);
        for k in [0, 7, 30] {
            let direct = (0..data.n())
                .map(|i| q.predict(&data.w_row(i), data.a01()[k]))
                .sum::<f64>()
                / data.n() as f64;
            assert!((direct - theta[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn degenerate_threshold() {
        let (data, fit, design, _) = setup(30, 0.5);
        let eval = fit.evaluate(&data);
        let err = tml_threshold(&eval, &design, &DVector::zeros(6)).unwrap_err();
        assert!(matches!(err, Error::DegenerateThreshold));
    }
}
