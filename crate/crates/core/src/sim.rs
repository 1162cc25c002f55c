//! Synthetic data with a known dose-response curve, and a Monte Carlo driver.
//!
//! Covariates are standard bivariate normal with correlation 1/2. Given `W = w`, the
//! exposure on `[-1, 1]` has density `expit(ζ(w) a)` with `ζ(w) = 3 (expit(w1 + w2) − 1/2)`;
//! that density already integrates to one because `expit(x) + expit(−x) = 1`. The outcome is
//! `Y = θ0(A) − ζ(W)(1 − A/2) + ε`, `ε ~ U[−2, 2]`, with `θ0 = 0` in the flat setting and
//! `θ0(a) = (2a + a² − a³)/2` in the curved one. Since `E[ζ(W)] = 0`, the dose-response
//! curve is exactly `θ0`.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bands::{build_band_fitted, BandConfig, NuPolicy};
use crate::basis::SobolevBasis;
use crate::data::{NullCurve, ObservationSet};
use crate::eif::EstimatorKind;
use crate::error::{Error, Result};
use crate::nuisance::NuisanceConfig;
use crate::numerics::{expit, integrate, softplus, softplus_inv};
use crate::sup_test::{primitive_function_test, run_test_fitted, FittedProblem, KappaPolicy, TestConfig};
use crate::tml::TmlConfig;

/// `κ0` of the curved setting with the default embedding margin of 1/4.
pub const KAPPA0_SETTING2: f64 = 645120.0 / 241.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DgpConfig {
    /// 1 (flat curve) or 2 (curved).
    pub setting: u8,
    pub n: usize,
    pub seed: u64,
}

pub fn zeta(w1: f64, w2: f64) -> f64 {
    3.0 * (expit(w1 + w2) - 0.5)
}

/// Curved-setting dose-response on the original exposure scale.
pub fn theta0(a: f64) -> f64 {
    (2.0 * a + a * a - a * a * a) / 2.0
}

pub fn theta0_second(a: f64) -> f64 {
    1.0 - 3.0 * a
}

/// Dose-response of a setting.
pub fn true_curve(setting: u8, a: f64) -> f64 {
    if setting == 2 {
        theta0(a)
    } else {
        0.0
    }
}

/// `Q0(w, a)`.
pub fn q0(setting: u8, w1: f64, w2: f64, a: f64) -> f64 {
    true_curve(setting, a) - zeta(w1, w2) * (1.0 - a / 2.0)
}

/// `g0(a | ζ)` on `[-1, 1]`.
pub fn g0(a: f64, z: f64) -> f64 {
    if (-1.0..=1.0).contains(&a) {
        expit(z * a)
    } else {
        0.0
    }
}

/// Conditional CDF of the exposure in closed form.
pub fn exposure_cdf(a: f64, z: f64) -> f64 {
    let a = a.clamp(-1.0, 1.0);
    if z.abs() < 1e-8 {
        return (a + 1.0) / 2.0;
    }
    (softplus(z * a) - softplus(-z)) / z
}

/// Inverse of [`exposure_cdf`].
pub fn exposure_quantile(u: f64, z: f64) -> f64 {
    if z.abs() < 1e-8 {
        return 2.0 * u - 1.0;
    }
    (softplus_inv(z * u + softplus(-z)) / z).clamp(-1.0, 1.0)
}

fn check_setting(setting: u8) -> Result<()> {
    if setting == 1 || setting == 2 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("unknown setting {setting}; expected 1 or 2")))
    }
}

pub fn gen_data(cfg: &DgpConfig) -> Result<ObservationSet> {
    check_setting(cfg.setting)?;
    if cfg.n < 10 {
        return Err(Error::InvalidInput(format!("n must be at least 10, got {}", cfg.n)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n;
    let mut w = DMatrix::zeros(n, 2);
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let c = 0.75f64.sqrt();
    for i in 0..n {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let (w1, w2) = (z1, 0.5 * z1 + c * z2);
        let u: f64 = rng.random();
        let e: f64 = rng.random_range(-2.0..2.0);
        let ai = exposure_quantile(u, zeta(w1, w2));
        w[(i, 0)] = w1;
        w[(i, 1)] = w2;
        a.push(ai);
        y.push(q0(cfg.setting, w1, w2, ai) + e);
    }
    ObservationSet::with_names(w, a, y, vec!["w1".into(), "w2".into()])
}

/// Marginal exposure density `E_W[g0(a | W)]` from antithetic covariate draws.
pub fn marginal_density(draws: usize, seed: u64) -> impl Fn(f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 0.75f64.sqrt();
    let mut z = Vec::with_capacity(draws);
    for _ in 0..draws.div_ceil(2) {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let (w1, w2) = (z1, 0.5 * z1 + c * z2);
        z.push(zeta(w1, w2));
        z.push(zeta(-w1, -w2));
    }
    move |a| z.iter().map(|&zi| g0(a, zi)).sum::<f64>() / z.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleKappa {
    pub kappa: f64,
    /// Roughness of the curve on the embedded basis scale.
    pub roughness: f64,
    pub variance: f64,
    /// `J = 0`: the curve has no curvature and `κ0 = 0`.
    pub flat: bool,
}

/// `J(θ)/Var0(θ(A))` with `J = ∫ (d²θ/du²)² du` on the embedded scale and the variance under
/// the exposure marginal.
pub fn oracle_kappa_for(
    theta: impl Fn(f64) -> f64,
    theta_second: impl Fn(f64) -> f64,
    basis: &SobolevBasis,
    marginal: impl Fn(f64) -> f64,
) -> OracleKappa {
    // a ∈ [−1, 1] ↦ a01 = (a + 1)/2 ↦ u = m + (1 − 2m) a01.
    let da_du = 2.0 / basis.stretch();
    let j = da_du.powi(3) * integrate(|a| theta_second(a).powi(2), -1.0, 1.0, 1e-12);
    let m1 = integrate(|a| theta(a) * marginal(a), -1.0, 1.0, 1e-10);
    let m2 = integrate(|a| theta(a).powi(2) * marginal(a), -1.0, 1.0, 1e-10);
    let variance = m2 - m1 * m1;
    let flat = j <= 1e-12 * (1.0 + variance);
    OracleKappa {
        kappa: if flat { 0.0 } else { j / variance },
        roughness: j,
        variance,
        flat,
    }
}

/// Oracle `κ0` of the curved setting. The flat setting reuses it, since its own ratio is `0/0`.
pub fn oracle_kappa(setting: u8, basis: &SobolevBasis, draws: usize) -> Result<OracleKappa> {
    check_setting(setting)?;
    let marginal = marginal_density(draws, 0x9e37_79b9);
    Ok(oracle_kappa_for(theta0, theta0_second, basis, marginal))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    OneStepOracle,
    OneStepAdaptive,
    TmlOracle,
    TmlAdaptive,
    Primitive,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::OneStepOracle,
        Method::OneStepAdaptive,
        Method::TmlOracle,
        Method::TmlAdaptive,
        Method::Primitive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::OneStepOracle => "one_step_oracle",
            Method::OneStepAdaptive => "one_step_adaptive",
            Method::TmlOracle => "tml_oracle",
            Method::TmlAdaptive => "tml_adaptive",
            Method::Primitive => "primitive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    pub setting: u8,
    pub n_list: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub bootstrap_samples: usize,
    pub dim: usize,
    pub margin: f64,
    pub nuisance: NuisanceConfig,
    pub tml: TmlConfig,
    pub kappa_folds: usize,
    pub alphas: Vec<f64>,
    /// Also build a band per replicate and record coverage of the true centered curve.
    pub bands: bool,
    pub band_alpha: f64,
    pub band_grid: usize,
    pub band_nu: NuPolicy,
    /// Covariate draws for the oracle `κ0`.
    pub oracle_draws: usize,
    /// Replaces the quadrature `κ0` when set.
    pub oracle_kappa: Option<f64>,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            setting: 1,
            n_list: vec![100, 200, 300, 400, 500],
            reps: 500,
            seed: 0,
            methods: Method::ALL.to_vec(),
            bootstrap_samples: 2000,
            dim: 20,
            margin: 0.25,
            nuisance: NuisanceConfig::default(),
            tml: TmlConfig::default(),
            kappa_folds: 5,
            alphas: vec![0.01, 0.05, 0.1],
            bands: false,
            band_alpha: 0.05,
            band_grid: 101,
            band_nu: NuPolicy::Auto { multiplier: 4.0 },
            oracle_draws: 100_000,
            oracle_kappa: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRecord {
    pub method: String,
    pub n: usize,
    pub rep: usize,
    pub seed: u64,
    pub p_value: Option<f64>,
    pub statistic: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandRecord {
    pub n: usize,
    pub rep: usize,
    pub covered: Option<bool>,
    pub mean_width: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionRow {
    pub method: String,
    pub n: usize,
    pub alpha: f64,
    pub rate: f64,
    pub completed: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSummary {
    pub n: usize,
    pub coverage: f64,
    pub median_width: f64,
    pub completed: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub setting: u8,
    pub reps: usize,
    pub seed: u64,
    pub oracle_kappa: f64,
    pub records: Vec<McRecord>,
    pub rejection: Vec<RejectionRow>,
    pub bands: Vec<BandRecord>,
    pub band_summary: Vec<BandSummary>,
}

/// Seed of replicate `rep` at sample size `n`; any replicate can be rerun alone.
pub fn rep_seed(master: u64, n: usize, rep: usize) -> u64 {
    let mut x = master ^ (n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (rep as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl McReport {
    pub fn p_values(&self, method: Method, n: usize) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.method == method.as_str() && r.n == n)
            .filter_map(|r| r.p_value)
            .collect()
    }

    pub fn rejection_rate(&self, method: Method, n: usize, alpha: f64) -> Option<f64> {
        let p = self.p_values(method, n);
        (!p.is_empty()).then(|| p.iter().filter(|&&v| v <= alpha).count() as f64 / p.len() as f64)
    }

    pub fn band_summary_for(&self, n: usize) -> Option<&BandSummary> {
        self.band_summary.iter().find(|b| b.n == n)
    }

    /// ECDF table with columns `method, n, p`.
    pub fn write_pvalues_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["method", "n", "p"])?;
        for r in &self.records {
            if let Some(p) = r.p_value {
                w.write_record([r.method.clone(), r.n.to_string(), p.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, mut out: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, self)?;
        Ok(())
    }
}

fn method_config(method: Method, cfg: &McConfig, oracle: f64, seed: u64) -> TestConfig {
    let (estimator, kappa) = match method {
        Method::OneStepOracle => (EstimatorKind::OneStep, KappaPolicy::Value(oracle)),
        Method::OneStepAdaptive => (EstimatorKind::OneStep, KappaPolicy::Adaptive),
        Method::TmlOracle => (EstimatorKind::Tml, KappaPolicy::Value(oracle)),
        Method::TmlAdaptive | Method::Primitive => (EstimatorKind::Tml, KappaPolicy::Adaptive),
    };
    TestConfig {
        estimator,
        kappa,
        dim: cfg.dim,
        margin: cfg.margin,
        bootstrap_samples: cfg.bootstrap_samples,
        seed,
        nuisance: cfg.nuisance.clone(),
        tml: cfg.tml.clone(),
        kappa_folds: cfg.kappa_folds,
        ..TestConfig::default()
    }
}

struct RepOutput {
    records: Vec<McRecord>,
    band: Option<BandRecord>,
}

fn run_rep(cfg: &McConfig, oracle: f64, n: usize, rep: usize) -> RepOutput {
    let seed = rep_seed(cfg.seed, n, rep);
    let boot_seed = seed ^ 0x5bd1_e995;
    let failed = |msg: String| RepOutput {
        records: cfg
            .methods
            .iter()
            .map(|m| McRecord {
                method: m.as_str().into(),
                n,
                rep,
                seed,
                p_value: None,
                statistic: None,
                error: Some(msg.clone()),
            })
            .collect(),
        band: cfg.bands.then(|| BandRecord {
            n,
            rep,
            covered: None,
            mean_width: None,
            error: Some(msg.clone()),
        }),
    };
    let data = match gen_data(&DgpConfig {
        setting: cfg.setting,
        n,
        seed,
    }) {
        Ok(d) => d,
        Err(e) => return failed(e.to_string()),
    };
    let basis = SobolevBasis::with_margin(cfg.dim, cfg.margin);
    let prob = match FittedProblem::new(&data, basis, &cfg.nuisance) {
        Ok(p) => p,
        Err(e) => return failed(e.to_string()),
    };
    let null = NullCurve::Zero;
    let records = cfg
        .methods
        .iter()
        .map(|&m| {
            let res = if m == Method::Primitive {
                primitive_function_test(&data, &prob.eval, &null, cfg.bootstrap_samples, boot_seed)
            } else {
                run_test_fitted(&data, &prob, &null, &method_config(m, cfg, oracle, boot_seed))
            };
            match res {
                Ok(r) => McRecord {
                    method: m.as_str().into(),
                    n,
                    rep,
                    seed,
                    p_value: Some(r.p_value),
                    statistic: Some(r.psi_stat),
                    error: None,
                },
                Err(e) => McRecord {
                    method: m.as_str().into(),
                    n,
                    rep,
                    seed,
                    p_value: None,
                    statistic: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let band = cfg.bands.then(|| {
        let bcfg = BandConfig {
            alpha: cfg.band_alpha,
            grid_size: cfg.band_grid,
            estimator: EstimatorKind::OneStep,
            kappa: KappaPolicy::Adaptive,
            nu: cfg.band_nu,
            dim: cfg.dim,
            margin: cfg.margin,
            bootstrap_samples: cfg.bootstrap_samples,
            seed: boot_seed,
            nuisance: cfg.nuisance.clone(),
            tml: cfg.tml.clone(),
            kappa_folds: cfg.kappa_folds,
            audit_exact: false,
        };
        match build_band_fitted(&data, &prob, &bcfg) {
            Ok(b) => {
                let center = data.a().iter().map(|&a| true_curve(cfg.setting, a)).sum::<f64>()
                    / data.n() as f64;
                let covered = b.contains(|a| true_curve(cfg.setting, a) - center);
                let w = b.widths();
                let finite: Vec<f64> = w.into_iter().filter(|x| x.is_finite()).collect();
                BandRecord {
                    n,
                    rep,
                    covered: Some(covered),
                    mean_width: Some(finite.iter().sum::<f64>() / finite.len().max(1) as f64),
                    error: None,
                }
            }
            Err(e) => BandRecord {
                n,
                rep,
                covered: None,
                mean_width: None,
                error: Some(e.to_string()),
            },
        }
    });
    RepOutput { records, band }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Runs every method on `reps` fresh datasets per sample size. Replicate failures are recorded,
/// not fatal.
pub fn run_mc(cfg: &McConfig) -> Result<McReport> {
    check_setting(cfg.setting)?;
    if cfg.reps == 0 {
        return Err(Error::InvalidInput("reps must be at least 1".into()));
    }
    let basis = SobolevBasis::with_margin(cfg.dim, cfg.margin);
    let oracle = match cfg.oracle_kappa {
        Some(k) => k,
        None => oracle_kappa(2, &basis, cfg.oracle_draws)?.kappa,
    };
    let jobs: Vec<(usize, usize)> = cfg
        .n_list
        .iter()
        .flat_map(|&n| (0..cfg.reps).map(move |r| (n, r)))
        .collect();
    let outputs: Vec<RepOutput> = jobs
        .par_iter()
        .map(|&(n, rep)| run_rep(cfg, oracle, n, rep))
        .collect();
    let mut records = Vec::new();
    let mut bands = Vec::new();
    for o in outputs {
        records.extend(o.records);
        bands.extend(o.band);
    }
    let mut report = McReport {
        setting: cfg.setting,
        reps: cfg.reps,
        seed: cfg.seed,
        oracle_kappa: oracle,
        records,
        rejection: vec![],
        bands,
        band_summary: vec![],
    };
    for &m in &cfg.methods {
        for &n in &cfg.n_list {
            let failures = report
                .records
                .iter()
                .filter(|r| r.method == m.as_str() && r.n == n && r.error.is_some())
                .count();
            let p = report.p_values(m, n);
            for &alpha in &cfg.alphas {
                report.rejection.push(RejectionRow {
                    method: m.as_str().into(),
                    n,
                    alpha,
                    rate: report.rejection_rate(m, n, alpha).unwrap_or(f64::NAN),
                    completed: p.len(),
                    failures,
                });
            }
        }
    }
    if cfg.bands {
        for &n in &cfg.n_list {
            let rows: Vec<&BandRecord> = report.bands.iter().filter(|b| b.n == n).collect();
            let ok: Vec<&&BandRecord> = rows.iter().filter(|b| b.covered.is_some()).collect();
            let covered = ok.iter().filter(|b| b.covered == Some(true)).count();
            report.band_summary.push(BandSummary {
                n,
                coverage: covered as f64 / ok.len().max(1) as f64,
                median_width: median(ok.iter().filter_map(|b| b.mean_width).collect()),
                completed: ok.len(),
                failures: rows.len() - ok.len(),
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zeta_at_origin_gives_uniform() {
        assert_eq!(zeta(0.0, 0.0), 0.0);
        for &a in &[-1.0, -0.3, 0.8] {
            assert_eq!(g0(a, 0.0), 0.5);
        }
    }

    #[test]
    fn theta0_values() {
        assert_eq!(theta0(1.0), 1.0);
        assert_eq!(theta0(0.0), 0.0);
        assert_eq!(theta0(-1.0), 0.0);
    }

    #[test]
    fn density_normalized_and_cdf_consistent() {
        for &z in &[-1.5, -0.2, 0.0, 0.7, 1.5] {
            assert_relative_eq!(integrate(|a| g0(a, z), -1.0, 1.0, 1e-12), 1.0, epsilon = 1e-10);
            for &a in &[-0.9, -0.1, 0.4, 0.99] {
                let q = integrate(|t| g0(t, z), -1.0, a, 1e-12);
                assert_relative_eq!(exposure_cdf(a, z), q, epsilon = 1e-9);
                assert_relative_eq!(exposure_quantile(exposure_cdf(a, z), z), a, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn oracle_kappa_frozen() {
        let basis = SobolevBasis::with_margin(20, 0.25);
        let k = oracle_kappa(2, &basis, 2000).unwrap();
        assert_relative_eq!(k.roughness, 512.0, max_relative = 1e-10);
        assert_relative_eq!(k.variance, 241.0 / 1260.0, max_relative = 1e-8);
        assert_relative_eq!(k.kappa, KAPPA0_SETTING2, max_relative = 1e-8);
    }

    #[test]
    fn oracle_kappa_edge_cases() {
        let basis = SobolevBasis::with_margin(20, 0.25);
        let uniform = |_a: f64| 0.5;
        let lin = oracle_kappa_for(|a| 3.0 * a, |_| 0.0, &basis, uniform);
        assert!(lin.flat);
        assert_eq!(lin.kappa, 0.0);
        let base = oracle_kappa_for(theta0, theta0_second, &basis, uniform);
        let doubled = oracle_kappa_for(|a| 2.0 * theta0(a), |a| 2.0 * theta0_second(a), &basis, uniform);
        assert_relative_eq!(base.kappa, doubled.kappa, max_relative = 1e-10);
    }

    #[test]
    fn unknown_setting_rejected() {
        assert!(gen_data(&DgpConfig { setting: 3, n: 50, seed: 1 }).is_err());
    }

    #[test]
    fn gen_data_deterministic() {
        let c = DgpConfig { setting: 2, n: 50, seed: 4 };
        let a = gen_data(&c).unwrap();
        let b = gen_data(&c).unwrap();
        assert_eq!(a.y(), b.y());
        assert_eq!(a.a(), b.a());
        assert!(a.a().iter().all(|&x| (-1.0..=1.0).contains(&x)));
    }

    #[test]
    fn rep_seeds_distinct() {
        let s: std::collections::HashSet<u64> =
            (0..100).flat_map(|r| [100, 500].map(|n| rep_seed(1, n, r))).collect();
        assert_eq!(s.len(), 200);
    }
}
