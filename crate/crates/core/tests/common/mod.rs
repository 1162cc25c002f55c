#![allow(dead_code)]

use drinfer::basis::{gram_matrices, SobolevBasis};
use drinfer::data::NullCurve;
use drinfer::eif::{eif_matrix, psi_one_step, psi_plugin};
use drinfer::nuisance::{
    fit_conditional_density, ConditionalDensity, DensityConfig, NuisanceConfig, RidgeLearner,
};
use drinfer::numerics::{integrate, kolmogorov_distance};
use drinfer::qcqp::solve_qcqp;
use drinfer::sim::{exposure_quantile, g0, gen_data, DgpConfig};
use drinfer::sup_test::{bootstrap_null, FittedProblem};
use drinfer::ObservationSet;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn dataset(setting: u8, n: usize, seed: u64) -> ObservationSet {
    gen_data(&DgpConfig { setting, n, seed }).unwrap()
}

pub fn fitted(data: &ObservationSet) -> FittedProblem {
    FittedProblem::new(data, SobolevBasis::with_margin(20, 0.25), &NuisanceConfig::default()).unwrap()
}

/// A random QCQP instance with `D ≤ 10`.
pub struct Instance {
    pub u: DVector<f64>,
    pub v: DMatrix<f64>,
    /// Diagonal of `Γ`.
    pub gamma: DVector<f64>,
    pub kappa: f64,
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let d = rng.random_range(2..=10);
    let u = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let b = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let v = &b * b.transpose() / d as f64 + DMatrix::identity(d, d) * 0.05;
    let mut gamma = DVector::from_fn(d, |_, _| rng.random_range(0.5..50.0));
    gamma.as_mut_slice().sort_by(|a: &f64, b: &f64| a.total_cmp(b));
    // κ between the smallest attainable ratio and a few times the unconstrained one.
    let lo = min_ratio(&v, &gamma);
    let kappa = lo * (1.0 + 10f64.powf(rng.random_range(-3.0..1.5)));
    Instance { u, v, gamma, kappa }
}

/// `min cᵀΓc / cᵀVc`, from the generalized eigenproblem via Cholesky of `Γ`.
pub fn min_ratio(v: &DMatrix<f64>, gamma: &DVector<f64>) -> f64 {
    let s = gamma.map(|g| 1.0 / g.sqrt());
    let m = DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] * s[i] * s[j]);
    1.0 / m.symmetric_eigen().eigenvalues.max()
}

/// Independent optimizer for `max Uᵀc s.t. cᵀVc = 1, cᵀΓc ≤ κ`: the interior candidate plus
/// every KKT point of the both-active system reached by damped Newton from random starts.
pub fn qcqp_oracle(inst: &Instance, starts: usize, seed: u64) -> f64 {
    let Instance { u, v, gamma, kappa } = inst;
    let d = u.len();
    let g = DMatrix::from_diagonal(gamma);
    let mut best = f64::NEG_INFINITY;

    if let Some(ch) = v.clone().cholesky() {
        let x = ch.solve(u);
        let c = &x / u.dot(&x).sqrt();
        if c.dot(&(&g * &c)) <= *kappa {
            best = u.dot(&c);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let residual = |c: &DVector<f64>, l1: f64, l2: f64| -> DVector<f64> {
        let mut f = DVector::zeros(d + 2);
        let stat = u - (v * c) * l1 - (&g * c) * l2;
        f.rows_mut(0, d).copy_from(&stat);
        f[d] = c.dot(&(v * c)) - 1.0;
        f[d + 1] = c.dot(&(&g * c)) - kappa;
        f
    };
    for _ in 0..starts {
        let mut c = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        c /= c.dot(&(v * &c)).sqrt();
        let mut l1: f64 = rng.random_range(-3.0..3.0);
        let mut l2: f64 = rng.random_range(-1.0..1.0);
        let mut f = residual(&c, l1, l2);
        for _ in 0..200 {
            let mut j = DMatrix::zeros(d + 2, d + 2);
            let h = v * l1 + &g * l2;
            j.view_mut((0, 0), (d, d)).copy_from(&(-h));
            j.view_mut((0, d), (d, 1)).copy_from(&(-(v * &c)));
            j.view_mut((0, d + 1), (d, 1)).copy_from(&(-(&g * &c)));
            j.view_mut((d, 0), (1, d)).copy_from(&((v * &c) * 2.0).transpose());
            j.view_mut((d + 1, 0), (1, d)).copy_from(&((&g * &c) * 2.0).transpose());
            let Some(step) = j.lu().solve(&(-&f)) else { break };
            let mut t = 1.0;
            let norm0 = f.norm();
            loop {
                let c2 = &c + step.rows(0, d) * t;
                let (a, b) = (l1 + t * step[d], l2 + t * step[d + 1]);
                let f2 = residual(&c2, a, b);
                if f2.norm() < norm0 || t < 1e-8 {
                    c = c2;
                    l1 = a;
                    l2 = b;
                    f = f2;
                    break;
                }
                t *= 0.5;
            }
            if f.norm() < 1e-13 * (1.0 + u.norm()) {
                break;
            }
        }
        if f.norm() < 1e-10 * (1.0 + u.norm()) && l2 >= -1e-10 {
            best = best.max(u.dot(&c));
        }
    }
    best
}

pub type Check = Result<String, String>;

fn verdict(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// `∫₀¹ η_d = 0` and `∫₀¹ η_d² = 1` by quadrature.
pub fn check_orthonormality() -> Check {
    let basis = SobolevBasis::new(20);
    let mut worst: f64 = 0.0;
    for j in 0..20 {
        let m = integrate(|u| basis.eval_at_period(j, u), 0.0, 1.0, 1e-13);
        let s = integrate(|u| basis.eval_at_period(j, u).powi(2), 0.0, 1.0, 1e-13);
        worst = worst.max(m.abs()).max((s - 1.0).abs());
    }
    verdict(worst <= 1e-10, format!("max quadrature error {worst:.2e}"))
}

/// `V` against a two-pass covariance on random exposures.
pub fn check_gram(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(5..60);
        let a: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let basis = SobolevBasis::with_margin(rng.random_range(1..12), 0.25);
        let gm = gram_matrices(&basis, &a).unwrap();
        let x = basis.design(&a);
        for p in 0..basis.dim() {
            for q in 0..basis.dim() {
                let mp = x.column(p).sum() / n as f64;
                let mq = x.column(q).sum() / n as f64;
                let cov = (0..n).map(|i| (x[(i, p)] - mp) * (x[(i, q)] - mq)).sum::<f64>() / n as f64;
                worst = worst.max((gm.v[(p, q)] - cov).abs());
            }
        }
    }
    verdict(worst <= 1e-10, format!("max |V - two-pass covariance| {worst:.2e}"))
}

/// The fitted conditional density integrates to about one for random covariate rows.
pub fn check_density_integral(seed: u64) -> Check {
    let data = dataset(2, 400, seed);
    let (dens, _) = fit_conditional_density(&data, &RidgeLearner::default(), &DensityConfig::default(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for _ in 0..10 {
        let w = [rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)];
        let q = integrate(|a| dens.density(&w, a), 0.0, 1.0, 1e-8);
        lo = lo.min(q);
        hi = hi.max(q);
    }
    verdict(lo >= 0.9 && hi <= 1.1, format!("integrals in [{lo:.4}, {hi:.4}]"))
}

/// Exposure sampler against the quadrature CDF of `g0(· | w)`.
pub fn check_sampler(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for &z in &[-1.4, -0.5, 0.0, 0.6, 1.3] {
        let draws: Vec<f64> = (0..10_000).map(|_| exposure_quantile(rng.random(), z)).collect();
        let cdf = |a: f64| integrate(|t| g0(t, z), -1.0, a.clamp(-1.0, 1.0), 1e-10);
        worst = worst.max(kolmogorov_distance(&draws, cdf));
    }
    verdict(worst < 0.02, format!("max Kolmogorov distance {worst:.4}"))
}

/// `Ψ` is nondecreasing in `κ`.
pub fn check_psi_monotone(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let inst = random_instance(&mut rng);
        let mut prev = f64::NEG_INFINITY;
        for k in 0..12 {
            let kappa = inst.kappa * 1.5f64.powi(k);
            let psi = solve_qcqp(&inst.u, &inst.v, &inst.gamma, kappa).unwrap().psi;
            worst = worst.max((prev - psi) / psi.abs().max(1e-300));
            prev = psi;
        }
    }
    verdict(worst <= 1e-10, format!("largest relative decrease {worst:.2e}"))
}

/// Same seed, same bootstrap draws.
pub fn check_bootstrap_determinism(seed: u64) -> Check {
    let data = dataset(1, 150, seed);
    let prob = fitted(&data);
    let spec = prob.class(3000.0).unwrap();
    let eif = eif_matrix(&prob.eval, None, &prob.design.h);
    let a = bootstrap_null(&eif, &spec, 500, 42).unwrap();
    let b = bootstrap_null(&eif, &spec, 500, 42).unwrap();
    let c = bootstrap_null(&eif, &spec, 500, 43).unwrap();
    verdict(
        a.samples == b.samples && a.samples != c.samples,
        "identical under a repeated seed, different under a new one".into(),
    )
}

/// Largest `|column mean of Φ − (one-step − plug-in)|` on a dataset.
pub fn eif_identity_gap(data: &ObservationSet, prob: &FittedProblem) -> f64 {
    let null = NullCurve::Zero;
    let star = null.eval_many(data.a01());
    let phi = eif_matrix(&prob.eval, Some(&star), &prob.design.h);
    let os = psi_one_step(&prob.eval, &null, data, &prob.design);
    let pl = psi_plugin(&prob.eval.theta, &null, data, &prob.design);
    (phi.column_means() - (os.u - pl.u)).amax()
}
