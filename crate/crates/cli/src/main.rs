//! `drinfer` command-line front end: `test`, `bands` and `simulate`.
//!
//! Every run reads one JSON config; flags override individual fields. Outputs carry the
//! SHA-256 of the resolved config and the seed, and contain no timings, so rerunning a
//! config reproduces them byte for byte.

// `!(x > 0.0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use drinfer::bands::{build_band, BandConfig, NuPolicy};
use drinfer::data::NullCurveSpec;
use drinfer::eif::EstimatorKind;
use drinfer::nuisance::NuisanceConfig;
use drinfer::sim::{run_mc, McConfig, Method};
use drinfer::sup_test::{run_test, KappaPolicy, TestConfig};
use drinfer::tml::TmlConfig;
use drinfer::ObservationSet;

#[derive(Parser)]
#[command(name = "drinfer", version, about = "Dose-response tests and confidence bands")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Test a null dose-response curve.
    Test(RunArgs),
    /// Simultaneous confidence band for the centered curve.
    Bands(RunArgs),
    /// Monte Carlo study on synthetic data.
    Simulate(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the bootstrap and Monte Carlo loops.
    #[arg(long)]
    threads: Option<usize>,
    /// Output file (`test`, `bands`) or directory (`simulate`).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Input CSV.
    #[arg(long)]
    input: Option<PathBuf>,
    /// `plugin`, `one_step` or `tml`.
    #[arg(long)]
    estimator: Option<String>,
    /// A positive number or `adaptive`.
    #[arg(long)]
    kappa: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    /// A positive number or `auto`.
    #[arg(long)]
    nu: Option<String>,
    #[arg(long)]
    grid_size: Option<usize>,
    #[arg(long)]
    bootstrap_samples: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SimSection {
    setting: u8,
    n_list: Vec<usize>,
    reps: usize,
    methods: Vec<Method>,
    alphas: Vec<f64>,
    bands: bool,
    oracle_draws: usize,
    oracle_kappa: Option<f64>,
}

impl Default for SimSection {
    fn default() -> Self {
        let mc = McConfig::default();
        Self {
            setting: mc.setting,
            n_list: mc.n_list,
            reps: mc.reps,
            methods: mc.methods,
            alphas: mc.alphas,
            bands: mc.bands,
            oracle_draws: mc.oracle_draws,
            oracle_kappa: mc.oracle_kappa,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    input: Option<PathBuf>,
    /// Defaults to every column other than the exposure and outcome.
    covariates: Option<Vec<String>>,
    exposure: String,
    outcome: String,
    estimator: EstimatorKind,
    kappa: KappaPolicy,
    dim: usize,
    margin: f64,
    bootstrap_samples: usize,
    alpha: f64,
    nu: NuPolicy,
    grid_size: usize,
    seed: Option<u64>,
    output: Option<PathBuf>,
    null: NullCurveSpec,
    dump_bootstrap: bool,
    tml_trace: bool,
    audit_exact: bool,
    nuisance: NuisanceConfig,
    tml: TmlConfig,
    kappa_folds: usize,
    simulate: SimSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TestConfig::default();
        let b = BandConfig::default();
        Self {
            input: None,
            covariates: None,
            exposure: "a".into(),
            outcome: "y".into(),
            estimator: t.estimator,
            kappa: t.kappa,
            dim: t.dim,
            margin: t.margin,
            bootstrap_samples: t.bootstrap_samples,
            alpha: b.alpha,
            nu: b.nu,
            grid_size: b.grid_size,
            seed: None,
            output: None,
            null: t.null,
            dump_bootstrap: false,
            tml_trace: false,
            audit_exact: false,
            nuisance: t.nuisance,
            tml: t.tml,
            kappa_folds: t.kappa_folds,
            simulate: SimSection::default(),
        }
    }
}

#[derive(Debug)]
enum CliError {
    /// Bad config or input; exit 2.
    Validation(String),
    /// Numerical failure; exit 3.
    Numerical(String),
}

impl From<drinfer::Error> for CliError {
    fn from(e: drinfer::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Numerical(e.to_string())
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Validation(format!("{}: {e}", path.display()))
}

fn parse_json<T: serde::de::DeserializeOwned>(s: &str) -> CliResult<T> {
    serde_json::from_str(s).map_err(|e| invalid(e.to_string()))
}

fn load_config(args: &RunArgs) -> CliResult<RunConfig> {
    let text = fs::read_to_string(&args.config).map_err(|e| io_err(&args.config, e))?;
    let mut cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", args.config.display())))?;
    if let Some(s) = args.seed {
        cfg.seed = Some(s);
    }
    if let Some(p) = &args.output {
        cfg.output = Some(p.clone());
    }
    if let Some(p) = &args.input {
        cfg.input = Some(p.clone());
    }
    if let Some(e) = &args.estimator {
        cfg.estimator = parse_json(&format!("\"{e}\""))?;
    }
    if let Some(k) = &args.kappa {
        cfg.kappa = parse_json(&policy_literal(k))?;
    }
    if let Some(a) = args.alpha {
        cfg.alpha = a;
    }
    if let Some(v) = &args.nu {
        cfg.nu = parse_json(&policy_literal(v))?;
    }
    if let Some(g) = args.grid_size {
        cfg.grid_size = g;
    }
    if let Some(m) = args.bootstrap_samples {
        cfg.bootstrap_samples = m;
    }
    if let Some(r) = args.reps {
        cfg.simulate.reps = r;
    }
    if cfg.seed.is_none() {
        return Err(invalid("seed is required (set \"seed\" in the config or pass --seed)"));
    }
    Ok(cfg)
}

/// Numbers pass through as JSON numbers, words become strings.
fn policy_literal(s: &str) -> String {
    if s.parse::<f64>().is_ok() {
        s.to_string()
    } else {
        format!("\"{s}\"")
    }
}

/// SHA-256 of the resolved config, ignoring where the output goes.
fn config_hash(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.output = None;
    let bytes = serde_json::to_vec(&c).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

fn load_data(cfg: &RunConfig) -> CliResult<ObservationSet> {
    let input = cfg
        .input
        .as_ref()
        .ok_or_else(|| invalid("an input CSV is required (\"input\" or --input)"))?;
    let covariates = match &cfg.covariates {
        Some(c) => c.clone(),
        None => {
            let text = fs::read_to_string(input).map_err(|e| io_err(input, e))?;
            let header = text.lines().next().unwrap_or("");
            header
                .split(',')
                .map(|h| h.trim().trim_matches('"').to_string())
                .filter(|h| !h.is_empty() && *h != cfg.exposure && *h != cfg.outcome)
                .collect()
        }
    };
    Ok(ObservationSet::load_csv(input, &covariates, &cfg.exposure, &cfg.outcome)?)
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    command: &'a str,
    config_hash: &'a str,
    seed: u64,
    result: &'a T,
}

fn envelope_json<T: Serialize>(command: &str, hash: &str, seed: u64, result: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(&Envelope {
        command,
        config_hash: hash,
        seed,
        result,
    })
    .map_err(|e| CliError::Numerical(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn csv_preamble(hash: &str, seed: u64) -> String {
    format!("# config_hash={hash} seed={seed}\n")
}

fn cmd_test(cfg: &RunConfig) -> CliResult<()> {
    let seed = cfg.seed.expect("checked");
    let data = load_data(cfg)?;
    let tc = TestConfig {
        estimator: cfg.estimator,
        kappa: cfg.kappa,
        dim: cfg.dim,
        margin: cfg.margin,
        bootstrap_samples: cfg.bootstrap_samples,
        seed,
        null: cfg.null.clone(),
        nuisance: cfg.nuisance.clone(),
        tml: cfg.tml.clone(),
        kappa_folds: cfg.kappa_folds,
        keep_samples: cfg.dump_bootstrap,
        keep_trace: cfg.tml_trace,
    };
    let result = run_test(&data, &tc)?;
    let json = envelope_json("test", &config_hash(cfg), seed, &result)?;
    match &cfg.output {
        Some(p) => write_file(p, &json),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

fn cmd_bands(cfg: &RunConfig) -> CliResult<()> {
    let seed = cfg.seed.expect("checked");
    let data = load_data(cfg)?;
    if let NuPolicy::Value(v) = cfg.nu {
        if !(v > 0.0) {
            return Err(invalid(format!(
                "nu = {v} leaves only the zero curve in the class; increase nu or use \"auto\""
            )));
        }
    }
    let bc = BandConfig {
        alpha: cfg.alpha,
        grid_size: cfg.grid_size,
        estimator: cfg.estimator,
        kappa: cfg.kappa,
        nu: cfg.nu,
        dim: cfg.dim,
        margin: cfg.margin,
        bootstrap_samples: cfg.bootstrap_samples,
        seed,
        nuisance: cfg.nuisance.clone(),
        tml: cfg.tml.clone(),
        kappa_folds: cfg.kappa_folds,
        audit_exact: cfg.audit_exact,
    };
    let band = build_band(&data, &bc)?;
    let hash = config_hash(cfg);
    let csv_path = cfg.output.clone().unwrap_or_else(|| PathBuf::from("bands.csv"));
    let mut csv = csv_preamble(&hash, seed);
    csv.push_str("a,lower,upper\n");
    for k in 0..band.a.len() {
        let _ = writeln!(csv, "{},{},{}", band.a[k], band.lower[k], band.upper[k]);
    }
    write_file(&csv_path, &csv)?;
    write_file(&csv_path.with_extension("json"), &envelope_json("bands", &hash, seed, &band)?)
}

fn cmd_simulate(cfg: &RunConfig) -> CliResult<()> {
    let seed = cfg.seed.expect("checked");
    let s = &cfg.simulate;
    if s.setting != 1 && s.setting != 2 {
        return Err(invalid(format!("unknown setting {}; expected 1 or 2", s.setting)));
    }
    let mc = McConfig {
        setting: s.setting,
        n_list: s.n_list.clone(),
        reps: s.reps,
        seed,
        methods: s.methods.clone(),
        bootstrap_samples: cfg.bootstrap_samples,
        dim: cfg.dim,
        margin: cfg.margin,
        nuisance: cfg.nuisance.clone(),
        tml: cfg.tml.clone(),
        kappa_folds: cfg.kappa_folds,
        alphas: s.alphas.clone(),
        bands: s.bands,
        band_alpha: cfg.alpha,
        band_grid: cfg.grid_size,
        band_nu: cfg.nu,
        oracle_draws: s.oracle_draws,
        oracle_kappa: s.oracle_kappa,
    };
    let report = run_mc(&mc)?;
    let hash = config_hash(cfg);
    let dir = cfg.output.clone().unwrap_or_else(|| PathBuf::from("simulation"));
    write_file(&dir.join("report.json"), &envelope_json("simulate", &hash, seed, &report)?)?;

    let mut p = csv_preamble(&hash, seed);
    p.push_str("method,n,rep,p_value,error\n");
    for r in &report.records {
        let pv = r.p_value.map(|v| v.to_string()).unwrap_or_default();
        let err = r.error.as_deref().unwrap_or("").replace(['"', ',', '\n'], " ");
        let _ = writeln!(p, "{},{},{},{},{}", r.method, r.n, r.rep, pv, err);
    }
    write_file(&dir.join("pvalues.csv"), &p)?;

    let mut rej = csv_preamble(&hash, seed);
    rej.push_str("method,n,alpha,rate,completed,failures\n");
    for r in &report.rejection {
        let _ = writeln!(rej, "{},{},{},{},{},{}", r.method, r.n, r.alpha, r.rate, r.completed, r.failures);
    }
    write_file(&dir.join("rejection.csv"), &rej)?;

    if s.bands {
        let mut b = csv_preamble(&hash, seed);
        b.push_str("n,coverage,median_width,completed,failures\n");
        for r in &report.band_summary {
            let _ = writeln!(b, "{},{},{},{},{}", r.n, r.coverage, r.median_width, r.completed, r.failures);
        }
        write_file(&dir.join("bands.csv"), &b)?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let (name, args) = match &cli.command {
        Command::Test(a) => ("test", a),
        Command::Bands(a) => ("bands", a),
        Command::Simulate(a) => ("simulate", a),
    };
    if let Some(t) = args.threads {
        if t == 0 {
            return Err(invalid("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Numerical(e.to_string()))?;
    }
    let cfg = load_config(args)?;
    match name {
        "test" => cmd_test(&cfg),
        "bands" => cmd_bands(&cfg),
        _ => cmd_simulate(&cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Numerical(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
