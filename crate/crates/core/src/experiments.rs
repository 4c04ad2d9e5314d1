//! Closure test cases: bi-modal and noisy bi-modal densities, BGK and BKW
//! relaxation, realizability scans, kernel comparison and the GP-vs-Newton
//! timing benchmark. Every runner returns a serializable report with flat
//! tables for plotting.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closure::{close_moments_with_rule, lambda_relative_error, moment_relative_error, ClosureResult};
use crate::datagen::{write_atomic, Dataset};
use crate::error::{Error, Result};
use crate::gp::{train_model, FitOptions, GpModel, KernelFamily};
use crate::med::{
    kl_divergence_values, newton_solve, rescale_multipliers, standardize_raw_moments, LagrangeVector, MaxEntDensity, MomentVector,
    SolverOptions,
};
use crate::quadrature::QuadratureRule;
use crate::scalar::binomial;

/// Points of the density grids written to the CSV tables.
pub const GRID_POINTS: usize = 401;

/// Seeds tried, in order, for a Newton reference solution.
const NEWTON_SEED_ATTEMPTS: u64 = 4;

fn normal_pdf(v: f64, mu: f64, sigma: f64) -> f64 {
    let z = (v - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// `Σ_k w_k f_k v_k^j` for `j = 1..n` (no normalization).
pub fn node_moments(rule: &QuadratureRule<f64>, values: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for ((&v, &w), &f) in rule.nodes().iter().zip(rule.weights()).zip(values) {
        let mut pw = w * f;
        for o in out.iter_mut() {
            pw *= v;
            *o += pw;
        }
    }
    out
}

fn node_values(rule: &QuadratureRule<f64>, f: impl Fn(f64) -> f64) -> Vec<f64> {
    rule.nodes().iter().map(|&v| f(v)).collect()
}

/// Symmetric two-Gaussian mixture with zero mean and unit variance:
/// `μ₂ = −μ₁`, `σ₂ = √(2 − σ₁² − 2μ₁²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiModalParams {
    pub mu1: f64,
    pub sigma1: f64,
}

/// `(μ₁, σ₁)` of the three bi-modal test cases.
pub const BIMODAL_CASES: [(f64, f64); 3] = [(0.8, 0.3), (0.9, 0.2), (0.95, 0.15)];

impl BiModalParams {
    pub fn new(mu1: f64, sigma1: f64) -> Result<Self> {
        let rest = 2.0 - (sigma1 * sigma1 + 2.0 * mu1 * mu1);
        if !(sigma1 > 0.0) || !(rest > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "bi-modal parameters (mu1 = {mu1}, sigma1 = {sigma1}) leave no variance for the second mode"
            )));
        }
        Ok(Self { mu1, sigma1 })
    }

    pub fn paper_cases() -> Vec<Self> {
        BIMODAL_CASES
            .iter()
            .map(|&(m, s)| Self::new(m, s).expect("valid case"))
            .collect()
    }

    pub fn mu2(&self) -> f64 {
        -self.mu1
    }

    pub fn sigma2(&self) -> f64 {
        (2.0 - (self.sigma1 * self.sigma1 + 2.0 * self.mu1 * self.mu1)).sqrt()
    }

    pub fn density(&self, v: f64) -> f64 {
        0.5 * (normal_pdf(v, self.mu1, self.sigma1) + normal_pdf(v, self.mu2(), self.sigma2()))
    }

    /// Untruncated raw moments from the Gaussian moment formulas.
    pub fn exact_moments(&self, n: usize) -> Vec<f64> {
        let gauss = |mu: f64, s: f64, j: usize| -> f64 {
            // E[(μ + sZ)^j] = Σ_{even i} C(j,i) μ^{j−i} s^i (i−1)!!
            let mut acc = 0.0;
            let mut dfact = 1.0;
            for i in (0..=j).step_by(2) {
                if i >= 2 {
                    dfact *= (i - 1) as f64;
                }
                acc += binomial::<f64>(j, i) * mu.powi((j - i) as i32) * s.powi(i as i32) * dfact;
            }
            acc
        };
        (1..=n)
            .map(|j| 0.5 * (gauss(self.mu1, self.sigma1, j) + gauss(self.mu2(), self.sigma2(), j)))
            .collect()
    }

    pub fn label(&self) -> String {
        format!("({}, {})", self.mu1, self.sigma1)
    }
}

/// Free-function form of [`BiModalParams::density`].
pub fn bimodal_density(params: &BiModalParams, v: f64) -> f64 {
    params.density(v)
}

/// Flat table written as CSV next to the JSON report.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let line = |fields: &[String]| {
            let quoted: Vec<String> = fields
                .iter()
                .map(|f| {
                    if f.contains([',', '"', '\n']) {
                        format!("\"{}\"", f.replace('"', "\"\""))
                    } else {
                        f.clone()
                    }
                })
                .collect();
            quoted.join(",") + "\n"
        };
        let mut out = line(&self.columns);
        for r in &self.rows {
            out.push_str(&line(r));
        }
        out
    }
}

fn num(x: f64) -> String {
    format!("{x:.10e}")
}

fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// A report that can be written as `<name>.json` plus `<name>_<table>.csv` files.
pub trait Report: Serialize {
    fn name(&self) -> &str;
    fn tables(&self) -> Vec<Table>;
}

/// Writes the JSON report and its CSV tables into `dir`; returns the written paths.
pub fn write_report<R: Report>(dir: &Path, report: &R) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let json_path = dir.join(format!("{}.json", report.name()));
    write_atomic(&json_path, serde_json::to_string_pretty(report)?.as_bytes())?;
    written.push(json_path);
    for t in report.tables() {
        let path = dir.join(format!("{}_{}.csv", report.name(), t.name));
        write_atomic(&path, t.to_csv().as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

/// Newton solution of `p` from the first of a few seeds that converges.
pub fn newton_reference(
    p: &MomentVector<f64>,
    rule: &QuadratureRule<f64>,
    seed: u64,
) -> Option<(LagrangeVector<f64>, f64)> {
    let opts = SolverOptions::default();
    for s in seed..seed + NEWTON_SEED_ATTEMPTS {
        let t = Instant::now();
        if let Ok(sol) = newton_solve(p, rule, &opts, s) {
            return Some((sol.lambda, t.elapsed().as_secs_f64()));
        }
    }
    None
}

/// Metrics of one closure against a known reference density.
#[derive(Debug, Clone, Serialize)]
pub struct ClosureRecord {
    pub label: String,
    pub n_moments: usize,
    pub m_train: usize,
    pub raw_moments: Vec<f64>,
    pub standardized_moments: Vec<f64>,
    pub reconstructed_moments: Vec<f64>,
    pub lambda_hat: Vec<f64>,
    pub lambda_newton: Option<Vec<f64>>,
    /// `KL(f_ref ‖ f̂)` on the quadrature nodes.
    pub kl: f64,
    /// `KL(f_ref ‖ f_eq)` for the truncated Gaussian with the reference's mean and variance.
    pub baseline_kl: f64,
    pub lambda_rel_error: Option<f64>,
    pub moment_rel_error: f64,
    pub posterior_variance: Vec<f64>,
    pub mean_variance: f64,
    pub out_of_box: bool,
    pub gp_seconds: f64,
    pub newton_seconds: Option<f64>,
    /// `(v, f_ref(v), f̂(v))` on the plotting grid.
    #[serde(skip)]
    pub grid: Vec<[f64; 3]>,
}

/// Reference density given by its values at the quadrature nodes and, for
/// plotting, as a function.
struct Reference<'a> {
    at_nodes: Vec<f64>,
    grid: Vec<(f64, f64)>,
    raw_moments: Vec<f64>,
    _f: std::marker::PhantomData<&'a ()>,
}

impl Reference<'_> {
    fn from_fn(rule: &QuadratureRule<f64>, n: usize, f: impl Fn(f64) -> f64) -> Self {
        let at_nodes = node_values(rule, &f);
        let raw_moments = node_moments(rule, &at_nodes, n);
        Self {
            grid: grid(rule).into_iter().map(|v| (v, f(v))).collect(),
            at_nodes,
            raw_moments,
            _f: std::marker::PhantomData,
        }
    }
}

fn grid(rule: &QuadratureRule<f64>) -> Vec<f64> {
    let d = rule.domain();
    (0..GRID_POINTS)
        .map(|i| d.v_min + d.width() * i as f64 / (GRID_POINTS - 1) as f64)
        .collect()
}

fn evaluate_closure(
    model: &GpModel,
    rule: &Arc<QuadratureRule<f64>>,
    label: String,
    reference: &Reference<'_>,
    seed: u64,
) -> Result<ClosureRecord> {
    let raw = MomentVector::new(reference.raw_moments.clone())?;
    let t = Instant::now();
    let closure: ClosureResult = close_moments_with_rule(model, &raw, rule)?;
    let gp_seconds = t.elapsed().as_secs_f64();
    let original = closure.density_in_original_coordinates(rule.clone())?;
    let kl = kl_divergence_values(&reference.at_nodes, &original, rule)?;
    let baseline = MaxEntDensity::new(
        rescale_multipliers(&equilibrium_multipliers(model.n_moments()), -closure.mu / closure.sigma, 1.0 / closure.sigma)?,
        rule.clone(),
    )?;
    let baseline_kl = kl_divergence_values(&reference.at_nodes, &baseline, rule)?;
    let newton = newton_reference(&closure.standardized_input, rule, seed);
    let lambda_rel_error = match &newton {
        Some((l, _)) => Some(lambda_relative_error(closure.lambda_hat.values(), l.values())?),
        None => None,
    };
    let grid = reference
        .grid
        .iter()
        .map(|&(v, f)| [v, f, (original.log_density(v)).exp()])
        .collect();
    let mean_variance = closure.posterior_variance.iter().sum::<f64>() / closure.posterior_variance.len() as f64;
    Ok(ClosureRecord {
        label,
        n_moments: model.n_moments(),
        m_train: model.n_train(),
        raw_moments: reference.raw_moments.clone(),
        standardized_moments: closure.standardized_input.values().to_vec(),
        reconstructed_moments: closure.reconstructed_moments.values().to_vec(),
        lambda_hat: closure.lambda_hat.values().to_vec(),
        lambda_newton: newton.as_ref().map(|(l, _)| l.values().to_vec()),
        kl,
        baseline_kl,
        lambda_rel_error,
        moment_rel_error: moment_relative_error(
            closure.reconstructed_moments.values(),
            closure.standardized_input.values(),
        ),
        posterior_variance: closure.posterior_variance.clone(),
        mean_variance,
        out_of_box: closure.out_of_box,
        gp_seconds,
        newton_seconds: newton.map(|(_, s)| s),
        grid,
    })
}

/// Multipliers of the standard Gaussian: `λ = (0, 1/2, 0, …)`.
pub fn equilibrium_multipliers(n: usize) -> LagrangeVector<f64> {
    let mut l = vec![0.0; n];
    l[1] = 0.5;
    LagrangeVector::new(l).expect("finite")
}

fn shared_rule(models: &[&GpModel]) -> Result<Arc<QuadratureRule<f64>>> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidArgument("at least one model is required".into()))?;
    for m in models {
        if m.domain() != first.domain() || m.quad_order() != first.quad_order() {
            return Err(Error::InvalidArgument(
                "models were trained with different domains or quadrature orders".into(),
            ));
        }
    }
    Ok(Arc::new(first.rule()?))
}

fn closure_summary_table(records: &[ClosureRecord], key: &str) -> Table {
    let mut t = Table::new(
        "summary",
        &[
            key,
            "n_moments",
            "m_train",
            "kl",
            "baseline_kl",
            "lambda_rel_error",
            "moment_rel_error",
            "mean_variance",
            "out_of_box",
            "gp_seconds",
            "newton_seconds",
        ],
    );
    for r in records {
        t.push(vec![
            r.label.clone(),
            r.n_moments.to_string(),
            r.m_train.to_string(),
            num(r.kl),
            num(r.baseline_kl),
            opt_num(r.lambda_rel_error),
            num(r.moment_rel_error),
            num(r.mean_variance),
            r.out_of_box.to_string(),
            num(r.gp_seconds),
            opt_num(r.newton_seconds),
        ]);
    }
    t
}

fn closure_density_table(records: &[ClosureRecord], key: &str) -> Table {
    let mut t = Table::new("densities", &[key, "n_moments", "v", "f_ref", "f_hat"]);
    for r in records {
        for [v, f, g] in &r.grid {
            t.push(vec![r.label.clone(), r.n_moments.to_string(), num(*v), num(*f), num(*g)]);
        }
    }
    t
}

/// Closure of the bi-modal mixtures with every model.
#[derive(Debug, Clone, Serialize)]
pub struct BimodalReport {
    pub name: String,
    pub cases: Vec<BiModalParams>,
    pub noise_sigma: f64,
    pub seed: Option<u64>,
    /// Nodes clamped to zero per (case, model), in record order.
    pub clamped_nodes: Vec<usize>,
    pub records: Vec<ClosureRecord>,
}

impl Report for BimodalReport {
    fn name(&self) -> &str {
        &self.name
    }

    fn tables(&self) -> Vec<Table> {
        vec![
            closure_summary_table(&self.records, "case"),
            closure_density_table(&self.records, "case"),
        ]
    }
}

/// KL, λ error against Newton, moment error and posterior variance for each
/// case and model.
pub fn run_bimodal(models: &[&GpModel], cases: &[BiModalParams]) -> Result<BimodalReport> {
    let rule = shared_rule(models)?;
    let jobs: Vec<(usize, &GpModel)> = (0..cases.len())
        .flat_map(|c| models.iter().map(move |m| (c, *m)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(c, model)| {
            let case = cases[c];
            let reference = Reference::from_fn(&rule, model.n_moments(), |v| case.density(v));
            evaluate_closure(model, &rule, case.label(), &reference, c as u64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BimodalReport {
        name: "bimodal".into(),
        cases: cases.to_vec(),
        noise_sigma: 0.0,
        seed: None,
        clamped_nodes: vec![0; records.len()],
        records,
    })
}

/// As [`run_bimodal`] with `f_ε = f_bi·(1 + ε)` at every quadrature node,
/// `ε ~ N(0, noise_sigma²)`; negative values are clamped to 0 and counted.
/// One noise realization per case (shared across models); no renormalization.
pub fn run_noisy_bimodal(
    models: &[&GpModel],
    cases: &[BiModalParams],
    noise_sigma: f64,
    seed: u64,
) -> Result<BimodalReport> {
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise sigma {noise_sigma} must be non-negative")));
    }
    let rule = shared_rule(models)?;
    let noisy: Vec<(Vec<f64>, usize)> = cases
        .iter()
        .enumerate()
        .map(|(c, case)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let normal = Normal::new(0.0, noise_sigma).expect("non-negative sigma");
            let mut clamped = 0;
            let values = rule
                .nodes()
                .iter()
                .map(|&v| {
                    let f = case.density(v) * (1.0 + normal.sample(&mut rng));
                    if f < 0.0 {
                        clamped += 1;
                        0.0
                    } else {
                        f
                    }
                })
                .collect();
            (values, clamped)
        })
        .collect();
    let jobs: Vec<(usize, &GpModel)> = (0..cases.len())
        .flat_map(|c| models.iter().map(move |m| (c, *m)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(c, model)| {
            let values = &noisy[c].0;
            let reference = Reference {
                at_nodes: values.clone(),
                grid: rule.nodes().iter().copied().zip(values.iter().copied()).collect(),
                raw_moments: node_moments(&rule, values, model.n_moments()),
                _f: std::marker::PhantomData,
            };
            evaluate_closure(model, &rule, cases[c].label(), &reference, c as u64)
        })
        .collect::<Result<Vec<_>>>()?;
    let clamped_nodes = jobs.iter().map(|&(c, _)| noisy[c].1).collect();
    Ok(BimodalReport {
        name: "noisy".into(),
        cases: cases.to_vec(),
        noise_sigma,
        seed: Some(seed),
        clamped_nodes,
        records,
    })
}

/// BGK relaxation `∂f/∂t = ν (f_eq − f)` from a bi-modal start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BgkSpec {
    pub nu: f64,
    pub times: Vec<f64>,
    pub initial: BiModalParams,
}

impl Default for BgkSpec {
    fn default() -> Self {
        Self {
            nu: 0.25,
            times: vec![0.0, 3.0, 8.0, 20.0],
            initial: BiModalParams {
                mu1: 0.98,
                sigma1: 0.2,
            },
        }
    }
}

impl BgkSpec {
    pub fn validate(&self) -> Result<()> {
        BiModalParams::new(self.initial.mu1, self.initial.sigma1)?;
        if !(self.nu > 0.0) {
            return Err(Error::InvalidArgument(format!("collision frequency {} must be positive", self.nu)));
        }
        if self.times.iter().any(|t| !(*t >= 0.0)) || self.times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument("BGK times must be non-negative and increasing".into()));
        }
        Ok(())
    }

    /// Standard normal renormalized on the rule's domain.
    fn equilibrium_norm(rule: &QuadratureRule<f64>) -> f64 {
        rule.integrate_values(&node_values(rule, |v| normal_pdf(v, 0.0, 1.0)))
            .expect("finite Gaussian")
    }

    /// `f^ex(v | t) = (1 − e^{−νt}) f_eq(v) + e^{−νt} f_0(v)`.
    pub fn exact_density(&self, t: f64, v: f64, rule: &QuadratureRule<f64>) -> f64 {
        let e = (-self.nu * t).exp();
        (1.0 - e) * normal_pdf(v, 0.0, 1.0) / Self::equilibrium_norm(rule) + e * self.initial.density(v)
    }
}

/// `p_k(t) = (1 − e^{−νt}) p_k^eq + e^{−νt} p_k(0)`, with both endpoint
/// moment vectors by quadrature.
pub fn bgk_exact_moments(spec: &BgkSpec, t: f64, rule: &QuadratureRule<f64>, n: usize) -> Result<MomentVector<f64>> {
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("time {t} must be non-negative")));
    }
    let z = BgkSpec::equilibrium_norm(rule);
    let p_eq = node_moments(rule, &node_values(rule, |v| normal_pdf(v, 0.0, 1.0) / z), n);
    let p_0 = node_moments(rule, &node_values(rule, |v| spec.initial.density(v)), n);
    let e = (-spec.nu * t).exp();
    MomentVector::new(p_eq.iter().zip(&p_0).map(|(a, b)| (1.0 - e) * a + e * b).collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct RelaxationReport {
    pub name: String,
    pub times: Vec<f64>,
    pub records: Vec<ClosureRecord>,
    /// Extra per-record diagnostics (BKW: both standardized moment paths).
    pub diagnostics: Vec<serde_json::Value>,
}

impl Report for RelaxationReport {
    fn name(&self) -> &str {
        &self.name
    }

    fn tables(&self) -> Vec<Table> {
        let mut moments = Table::new(
            "moments",
            &["time", "n_moments", "k", "p_hat_input", "p_hat_reconstructed"],
        );
        for r in &self.records {
            for (k, (a, b)) in r.standardized_moments.iter().zip(&r.reconstructed_moments).enumerate() {
                moments.push(vec![
                    r.label.clone(),
                    r.n_moments.to_string(),
                    (k + 1).to_string(),
                    num(*a),
                    num(*b),
                ]);
            }
        }
        vec![
            closure_summary_table(&self.records, "time"),
            closure_density_table(&self.records, "time"),
            moments,
        ]
    }
}

/// Closes the exact BGK moments at every time with every model.
pub fn run_bgk(models: &[&GpModel], spec: &BgkSpec) -> Result<RelaxationReport> {
    spec.validate()?;
    let rule = shared_rule(models)?;
    let jobs: Vec<(usize, &GpModel)> = (0..spec.times.len())
        .flat_map(|i| models.iter().map(move |m| (i, *m)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(i, model)| {
            let t = spec.times[i];
            let n = model.n_moments();
            let mut reference = Reference::from_fn(&rule, n, |v| spec.exact_density(t, v, &rule));
            reference.raw_moments = bgk_exact_moments(spec, t, &rule, n)?.into_values();
            evaluate_closure(model, &rule, format!("{t}"), &reference, i as u64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RelaxationReport {
        name: "bgk".into(),
        times: spec.times.clone(),
        diagnostics: Vec::new(),
        records,
    })
}

/// `K(t̂) = 1 − exp(−t̂/6)`.
pub fn bkw_k(t_hat: f64) -> f64 {
    1.0 - (-t_hat / 6.0).exp()
}

/// Earliest valid BKW time, `6 ln(5/2)`, where `K = 3/5`.
pub fn bkw_min_time() -> f64 {
    6.0 * 2.5f64.ln()
}

/// BKW solution at a fixed time, normalized on a quadrature rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BkwDensity {
    pub k: f64,
    norm: f64,
}

impl BkwDensity {
    pub fn new(t_hat: f64, rule: &QuadratureRule<f64>) -> Result<Self> {
        let k = bkw_k(t_hat);
        if !(k >= 0.6 - 1e-12 && k <= 1.0) {
            return Err(Error::BkwValidity { k });
        }
        let unnorm = Self { k, norm: 1.0 };
        let norm = rule.integrate(|v| unnorm.value(v))?;
        Ok(Self { k, norm })
    }

    pub fn value(&self, v: f64) -> f64 {
        let k = self.k;
        let pref = (-v * v / (2.0 * k)).exp() / (2.0 * k * (2.0 * std::f64::consts::PI * k).powf(1.5));
        pref * ((5.0 * k - 3.0) + (1.0 - k) / k * v * v) / self.norm
    }
}

/// Free-function form of [`BkwDensity::value`].
pub fn bkw_density(t_hat: f64, v: f64, rule: &QuadratureRule<f64>) -> Result<f64> {
    Ok(BkwDensity::new(t_hat, rule)?.value(v))
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Closed-form `p_k(t̂)` for any `k ≥ 0`: odd moments vanish and
/// `p_{2n} = (4n+1)!/(2^{2n}(2n)!) · K^{2n−1}(2n − (2n−1)K)`.
pub fn bkw_closed_form_moment(t_hat: f64, k: usize) -> f64 {
    if k % 2 == 1 {
        return 0.0;
    }
    let kk = bkw_k(t_hat);
    let m = k as f64;
    let c = factorial(2 * k + 1) / (2f64.powi(k as i32) * factorial(k));
    c * kk.powf(m - 1.0) * (m - (m - 1.0) * kk)
}

/// Closed-form raw moments `p_1..p_n`.
pub fn bkw_closed_form_raw(t_hat: f64, n: usize) -> Vec<f64> {
    (1..=n).map(|k| bkw_closed_form_moment(t_hat, k)).collect()
}

/// Standardized moments from the closed form (`p̂_k = p_k / p_2^{k/2}`) and
/// from quadrature of the normalized density.
pub fn bkw_moments(
    t_hat: f64,
    n: usize,
    rule: &QuadratureRule<f64>,
) -> Result<(MomentVector<f64>, MomentVector<f64>)> {
    let density = BkwDensity::new(t_hat, rule)?;
    let raw = bkw_closed_form_raw(t_hat, n);
    let p2 = raw[1];
    let closed = MomentVector::new(
        raw.iter()
            .enumerate()
            .map(|(i, p)| p / p2.powf((i + 1) as f64 / 2.0))
            .collect(),
    )?;
    let quad_raw = node_moments(rule, &node_values(rule, |v| density.value(v)), n);
    let (_, _, quad) = standardize_raw_moments(&MomentVector::new(quad_raw)?)?;
    Ok((closed, quad))
}

/// BKW test times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BkwSpec {
    pub times: Vec<f64>,
}

impl Default for BkwSpec {
    fn default() -> Self {
        Self {
            times: vec![5.8, 6.5, 7.5, 8.5],
        }
    }
}

/// Closes the quadrature-path BKW moments; the closed-form path is reported alongside.
pub fn run_bkw(models: &[&GpModel], spec: &BkwSpec) -> Result<RelaxationReport> {
    let rule = shared_rule(models)?;
    for &t in &spec.times {
        BkwDensity::new(t, &rule)?;
    }
    let jobs: Vec<(usize, &GpModel)> = (0..spec.times.len())
        .flat_map(|i| models.iter().map(move |m| (i, *m)))
        .collect();
    let out = jobs
        .par_iter()
        .map(|&(i, model)| {
            let t = spec.times[i];
            let n = model.n_moments();
            let density = BkwDensity::new(t, &rule)?;
            let reference = Reference::from_fn(&rule, n, |v| density.value(v));
            let record = evaluate_closure(model, &rule, format!("{t}"), &reference, i as u64)?;
            let (closed, quad) = bkw_moments(t, n, &rule)?;
            let diag = serde_json::json!({
                "time": t,
                "n_moments": n,
                "k": density.k,
                "closed_form_standardized": closed.values(),
                "quadrature_standardized": quad.values(),
                "p4_discrepancy": closed.values().get(3).zip(quad.values().get(3)).map(|(a, b)| a - b),
                "out_of_box": record.out_of_box,
            });
            Ok((record, diag))
        })
        .collect::<Result<Vec<_>>>()?;
    let (records, diagnostics) = out.into_iter().unzip();
    Ok(RelaxationReport {
        name: "bkw".into(),
        times: spec.times.clone(),
        records,
        diagnostics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScanFamily {
    /// `(0, 1, α, α² + 1 + d)`: distance `d` above the realizability limit.
    D,
    /// `(0, 1, β, 4 − d)`: distance `d` below the top of the training box.
    U,
    /// `(0, 1, β/d, (10βd)² + 3)`: approaching the line `p_3 = 0, p_4 > 3`.
    S,
}

/// Test grid of one realizability family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizabilityScanSpec {
    pub family: ScanFamily,
    pub d_values: Vec<f64>,
    /// `[min, max]` of `α` (D) or `β` (U); ignored for S, whose range is `±1/(10d)`.
    pub range: [f64; 2],
    pub n_test: usize,
}

impl RealizabilityScanSpec {
    pub fn paper(family: ScanFamily) -> Self {
        match family {
            ScanFamily::D => Self {
                family,
                d_values: vec![0.04, 0.02, 0.01],
                range: [-0.5, 0.5],
                n_test: 100,
            },
            ScanFamily::U => Self {
                family,
                d_values: vec![0.1, 0.05, 0.0],
                range: [-0.1, 0.1],
                n_test: 200,
            },
            ScanFamily::S => Self {
                family,
                d_values: vec![1.0, 8.0, 64.0],
                range: [-0.1, 0.1],
                n_test: 100,
            },
        }
    }

    /// `x_i = min + i·h`, `i = 1..n_test`, `h = (max − min)/n_test`.
    pub fn points(&self, d: f64) -> Vec<[f64; 4]> {
        let [lo, hi] = match self.family {
            ScanFamily::S => [-1.0 / (10.0 * d), 1.0 / (10.0 * d)],
            _ => self.range,
        };
        let h = (hi - lo) / self.n_test as f64;
        (1..=self.n_test)
            .map(|i| {
                let x = lo + i as f64 * h;
                match self.family {
                    ScanFamily::D => [0.0, 1.0, x, x * x + 1.0 + d],
                    ScanFamily::U => [0.0, 1.0, x, 4.0 - d],
                    ScanFamily::S => [0.0, 1.0, x / d, (10.0 * x * d).powi(2) + 3.0],
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScanPoint {
    pub d: f64,
    pub m_train: usize,
    pub p3: f64,
    pub p4: f64,
    pub newton_converged: bool,
    /// Against the input moments, which a convergent Newton solution reproduces.
    pub moment_rel_error: f64,
    pub lambda_rel_error: Option<f64>,
    pub mean_variance: f64,
    pub out_of_box: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScanCell {
    pub d: f64,
    pub m_train: usize,
    pub n_points: usize,
    pub newton_failures: usize,
    pub mean_moment_rel_error: f64,
    /// Mean over Newton-convergent points (NaN when there are none).
    pub mean_lambda_rel_error: f64,
    /// Mean over all points of the output-averaged posterior variance.
    pub mean_variance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RealizabilityReport {
    pub name: String,
    pub seed: u64,
    pub spec: RealizabilityScanSpec,
    pub cells: Vec<ScanCell>,
    pub points: Vec<ScanPoint>,
}

impl Report for RealizabilityReport {
    fn name(&self) -> &str {
        &self.name
    }

    fn tables(&self) -> Vec<Table> {
        let mut cells = Table::new(
            "cells",
            &[
                "d",
                "m_train",
                "n_points",
                "newton_failures",
                "mean_moment_rel_error",
                "mean_lambda_rel_error",
                "mean_variance",
            ],
        );
        for c in &self.cells {
            cells.push(vec![
                num(c.d),
                c.m_train.to_string(),
                c.n_points.to_string(),
                c.newton_failures.to_string(),
                num(c.mean_moment_rel_error),
                num(c.mean_lambda_rel_error),
                num(c.mean_variance),
            ]);
        }
        let mut points = Table::new(
            "points",
            &[
                "d",
                "m_train",
                "p3",
                "p4",
                "newton_converged",
                "moment_rel_error",
                "lambda_rel_error",
                "mean_variance",
                "out_of_box",
            ],
        );
        for p in &self.points {
            points.push(vec![
                num(p.d),
                p.m_train.to_string(),
                num(p.p3),
                num(p.p4),
                p.newton_converged.to_string(),
                num(p.moment_rel_error),
                opt_num(p.lambda_rel_error),
                num(p.mean_variance),
                p.out_of_box.to_string(),
            ]);
        }
        vec![cells, points]
    }
}

/// Closure accuracy and posterior variance along one realizability family,
/// for each `N = 4` model (typically trained on different `M`).
pub fn realizability_scan(models: &[&GpModel], spec: &RealizabilityScanSpec, seed: u64) -> Result<RealizabilityReport> {
    let rule = shared_rule(models)?;
    if let Some(m) = models.iter().find(|m| m.n_moments() != 4) {
        return Err(Error::InvalidArgument(format!(
            "realizability scans need N = 4 models, got N = {}",
            m.n_moments()
        )));
    }
    let mut cells = Vec::new();
    let mut points = Vec::new();
    for &d in &spec.d_values {
        let grid = spec.points(d);
        let references: Vec<Option<LagrangeVector<f64>>> = grid
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let p = MomentVector::new(p.to_vec()).ok()?;
                newton_reference(&p, &rule, seed.wrapping_add(i as u64)).map(|(l, _)| l)
            })
            .collect();
        for model in models {
            let evaluated = grid
                .par_iter()
                .zip(&references)
                .map(|(p, reference)| {
                    let raw = MomentVector::new(p.to_vec())?;
                    let closure = close_moments_with_rule(model, &raw, &rule)?;
                    let mean_variance =
                        closure.posterior_variance.iter().sum::<f64>() / closure.posterior_variance.len() as f64;
                    let lambda_err = match reference {
                        Some(l) => Some(lambda_relative_error(closure.lambda_hat.values(), l.values())?),
                        None => None,
                    };
                    Ok(ScanPoint {
                        d,
                        m_train: model.n_train(),
                        p3: p[2],
                        p4: p[3],
                        newton_converged: reference.is_some(),
                        moment_rel_error: moment_relative_error(closure.reconstructed_moments.values(), p),
                        lambda_rel_error: lambda_err,
                        mean_variance,
                        out_of_box: closure.out_of_box,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let lambda_errors: Vec<f64> = evaluated.iter().filter_map(|p| p.lambda_rel_error).collect();
            let count = evaluated.len() as f64;
            cells.push(ScanCell {
                d,
                m_train: model.n_train(),
                n_points: evaluated.len(),
                newton_failures: evaluated.len() - lambda_errors.len(),
                mean_moment_rel_error: evaluated.iter().map(|p| p.moment_rel_error).sum::<f64>() / count,
                mean_lambda_rel_error: if lambda_errors.is_empty() {
                    f64::NAN
                } else {
                    lambda_errors.iter().sum::<f64>() / lambda_errors.len() as f64
                },
                mean_variance: evaluated.iter().map(|p| p.mean_variance).sum::<f64>() / count,
            });
            points.extend(evaluated);
        }
    }
    let name = match spec.family {
        ScanFamily::D => "realizability_d",
        ScanFamily::U => "realizability_u",
        ScanFamily::S => "realizability_s",
    };
    Ok(RealizabilityReport {
        name: name.into(),
        seed,
        spec: spec.clone(),
        cells,
        points,
    })
}

/// Relative λ errors of `model` over a held-out dataset.
pub fn held_out_errors(model: &GpModel, test: &Dataset) -> Result<Vec<f64>> {
    if test.n_moments() != model.n_moments() {
        return Err(Error::Dimension {
            expected: model.n_moments(),
            found: test.n_moments(),
        });
    }
    test.pairs
        .par_iter()
        .map(|pr| lambda_relative_error(&model.predict_mean(pr.p.values())?, pr.lambda.values()))
        .collect()
}

/// Mean and population variance.
pub fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (mean, xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n)
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelCell {
    pub family: KernelFamily,
    pub m_train: usize,
    pub mean_error: Option<f64>,
    pub error_variance: Option<f64>,
    pub train_seconds: f64,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelReport {
    pub name: String,
    pub n_moments: usize,
    pub n_test: usize,
    pub train_seed: u64,
    pub test_seed: u64,
    pub fit_options: FitOptions,
    pub cells: Vec<KernelCell>,
}

impl KernelReport {
    pub fn cell(&self, family: KernelFamily, m: usize) -> Option<&KernelCell> {
        self.cells.iter().find(|c| c.family == family && c.m_train == m)
    }
}

impl Report for KernelReport {
    fn name(&self) -> &str {
        &self.name
    }

    fn tables(&self) -> Vec<Table> {
        let mut t = Table::new(
            "errors",
            &["family", "m_train", "mean_error", "error_variance", "train_seconds", "failure"],
        );
        for c in &self.cells {
            t.push(vec![
                c.family.to_string(),
                c.m_train.to_string(),
                opt_num(c.mean_error),
                opt_num(c.error_variance),
                num(c.train_seconds),
                c.failure.clone().unwrap_or_default(),
            ]);
        }
        vec![t]
    }
}

/// Trains each family on the first `M` training pairs for every `M` and
/// tabulates held-out λ errors. Training failures are recorded per cell.
pub fn kernel_comparison(
    train: &Dataset,
    test: &Dataset,
    families: &[KernelFamily],
    m_list: &[usize],
    opts: &FitOptions,
) -> Result<KernelReport> {
    if train.n_moments() != test.n_moments() {
        return Err(Error::Dimension {
            expected: train.n_moments(),
            found: test.n_moments(),
        });
    }
    let mut cells = Vec::new();
    for &family in families {
        for &m in m_list {
            if m > train.len() {
                return Err(Error::InvalidArgument(format!(
                    "training size {m} exceeds the {} available pairs",
                    train.len()
                )));
            }
            let t = Instant::now();
            let cell = match train_model(&train.truncated(m), family, opts).and_then(|model| held_out_errors(&model, test)) {
                Ok(errors) => {
                    let (mean, var) = mean_and_variance(&errors);
                    KernelCell {
                        family,
                        m_train: m,
                        mean_error: Some(mean),
                        error_variance: Some(var),
                        train_seconds: t.elapsed().as_secs_f64(),
                        failure: None,
                    }
                }
                Err(e) => KernelCell {
                    family,
                    m_train: m,
                    mean_error: None,
                    error_variance: None,
                    train_seconds: t.elapsed().as_secs_f64(),
                    failure: Some(e.to_string()),
                },
            };
            log::info!("{family} M={m}: {:?}", cell.mean_error);
            cells.push(cell);
        }
    }
    Ok(KernelReport {
        name: "kernels".into(),
        n_moments: train.n_moments(),
        n_test: test.len(),
        train_seed: train.meta.seed,
        test_seed: test.meta.seed,
        fit_options: opts.clone(),
        cells,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkResult {
    pub n_moments: usize,
    pub m_train: usize,
    pub n_points: usize,
    pub repeats: usize,
    /// Median over repeats of the per-point GP mean-prediction time.
    pub median_gp_seconds: f64,
    /// Median over repeats of the per-point Newton time (seeded random start).
    pub median_newton_seconds: f64,
    pub ratio: f64,
    pub gp_seconds: Vec<f64>,
    pub newton_seconds: Vec<f64>,
    pub newton_failures: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkReport {
    pub name: String,
    pub results: Vec<BenchmarkResult>,
}

impl Report for BenchmarkReport {
    fn name(&self) -> &str {
        &self.name
    }

    fn tables(&self) -> Vec<Table> {
        let mut t = Table::new(
            "timings",
            &[
                "n_moments",
                "m_train",
                "n_points",
                "repeats",
                "median_gp_seconds",
                "median_newton_seconds",
                "ratio",
                "newton_failures",
            ],
        );
        for r in &self.results {
            t.push(vec![
                r.n_moments.to_string(),
                r.m_train.to_string(),
                r.n_points.to_string(),
                r.repeats.to_string(),
                num(r.median_gp_seconds),
                num(r.median_newton_seconds),
                num(r.ratio),
                r.newton_failures.to_string(),
            ]);
        }
        vec![t]
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Wall-clock medians of GP mean prediction versus the Newton solve on the
/// same standardized moments, single-threaded, `repeats` passes each.
pub fn benchmark_speedup(
    model: &GpModel,
    test_moments: &[MomentVector<f64>],
    repeats: usize,
    seed: u64,
) -> Result<BenchmarkResult> {
    if test_moments.is_empty() || repeats == 0 {
        return Err(Error::InvalidArgument("benchmark needs test moments and at least one repeat".into()));
    }
    let rule = model.rule()?;
    let opts = SolverOptions::default();
    let n = test_moments.len() as f64;
    let mut gp_seconds = Vec::with_capacity(repeats);
    let mut newton_seconds = Vec::with_capacity(repeats);
    let mut newton_failures = 0;
    let mut sink = 0.0;
    for r in 0..repeats {
        let t = Instant::now();
        for p in test_moments {
            sink += model.predict_mean(p.values())?[0];
        }
        gp_seconds.push(t.elapsed().as_secs_f64() / n);

        let t = Instant::now();
        let mut failures = 0;
        for (i, p) in test_moments.iter().enumerate() {
            match newton_solve(p, &rule, &opts, seed.wrapping_add(i as u64)) {
                Ok(sol) => sink += sol.lambda.values()[0],
                Err(_) => failures += 1,
            }
        }
        newton_seconds.push(t.elapsed().as_secs_f64() / n);
        if r == 0 {
            newton_failures = failures;
        }
    }
    std::hint::black_box(sink);
    let (g, nw) = (median(&gp_seconds), median(&newton_seconds));
    Ok(BenchmarkResult {
        n_moments: model.n_moments(),
        m_train: model.n_train(),
        n_points: test_moments.len(),
        repeats,
        median_gp_seconds: g,
        median_newton_seconds: nw,
        ratio: nw / g,
        gp_seconds,
        newton_seconds,
        newton_failures,
    })
}

/// Human-readable one-line summary per record, for logs.
pub fn describe_records(records: &[ClosureRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(
            s,
            "{} N={} M={}: KL {:.3e}, lambda err {}, moment err {:.3e}, mean var {:.3e}{}",
            r.label,
            r.n_moments,
            r.m_train,
            r.kl,
            r.lambda_rel_error.map_or("n/a".into(), |e| format!("{e:.3e}")),
            r.moment_rel_error,
            r.mean_variance,
            if r.out_of_box { " (outside training box)" } else { "" }
        );
    }
    s
}
