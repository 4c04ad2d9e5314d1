//! Gaussian-process regression with stationary ARD kernels: kernel evaluation,
//! Gram matrices, the log marginal likelihood with its gradient in log
//! hyperparameters, projected BFGS fitting, and posterior prediction from a
//! precomputed Cholesky factor.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{compute_scaling, write_atomic, Dataset, ScalingStats};
use crate::error::{Error, Result};
use crate::linalg::{dot, Cholesky, Matrix};
use crate::med::MomentVector;
use crate::quadrature::{QuadratureRule, VelocityDomain, DEFAULT_ORDER};
use crate::scalar::Real;

/// Gram diagonal nugget relative to the signal variance.
pub const DEFAULT_JITTER: f64 = 1e-8;

/// Extra jitter retries (×10 each) if the nugget alone does not factor.
const JITTER_RETRIES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Rbf,
    Matern12,
    Matern32,
    Matern52,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 4] = [
        KernelFamily::Rbf,
        KernelFamily::Matern12,
        KernelFamily::Matern32,
        KernelFamily::Matern52,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Rbf => "rbf",
            KernelFamily::Matern12 => "matern12",
            KernelFamily::Matern32 => "matern32",
            KernelFamily::Matern52 => "matern52",
        }
    }

    /// `k(r²) / σ`.
    #[inline]
    fn shape<T: Real>(self, r2: T) -> T {
        match self {
            KernelFamily::Rbf => (-r2 * T::lit(0.5)).exp(),
            KernelFamily::Matern12 => (-r2.sqrt()).exp(),
            KernelFamily::Matern32 => {
                let a = T::lit(3.0).sqrt() * r2.sqrt();
                (T::one() + a) * (-a).exp()
            }
            KernelFamily::Matern52 => {
                let a = T::lit(5.0).sqrt() * r2.sqrt();
                (T::one() + a + T::lit(5.0 / 3.0) * r2) * (-a).exp()
            }
        }
    }

    /// `d(k/σ)/d(r²)`; the Matérn-1/2 derivative is singular at `r = 0`
    /// and reported as 0 there (it only ever multiplies `r²`-sized terms).
    #[inline]
    fn shape_derivative<T: Real>(self, r2: T) -> T {
        match self {
            KernelFamily::Rbf => -T::lit(0.5) * (-r2 * T::lit(0.5)).exp(),
            KernelFamily::Matern12 => {
                if r2 > T::zero() {
                    let r = r2.sqrt();
                    -(-r).exp() / (T::lit(2.0) * r)
                } else {
                    T::zero()
                }
            }
            KernelFamily::Matern32 => -T::lit(1.5) * (-(T::lit(3.0).sqrt() * r2.sqrt())).exp(),
            KernelFamily::Matern52 => {
                let a = T::lit(5.0).sqrt() * r2.sqrt();
                -T::lit(5.0 / 6.0) * (T::one() + a) * (-a).exp()
            }
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "rbf" => Ok(KernelFamily::Rbf),
            "matern12" => Ok(KernelFamily::Matern12),
            "matern32" => Ok(KernelFamily::Matern32),
            "matern52" => Ok(KernelFamily::Matern52),
            _ => Err(Error::InvalidArgument(format!(
                "unknown kernel family `{s}` (expected rbf, matern12, matern32 or matern52)"
            ))),
        }
    }
}

/// Kernel family with signal variance `σ` and diagonal inverse length scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec<T> {
    pub family: KernelFamily,
    pub signal_variance: T,
    pub inv_length_scales: Vec<T>,
}

impl<T: Real> KernelSpec<T> {
    pub fn new(family: KernelFamily, signal_variance: T, inv_length_scales: Vec<T>) -> Result<Self> {
        if !(signal_variance > T::zero()) || !signal_variance.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "signal variance {signal_variance} must be positive"
            )));
        }
        if inv_length_scales.iter().any(|l| !(*l > T::zero()) || !l.is_finite()) {
            return Err(Error::InvalidArgument("inverse length scales must be positive".into()));
        }
        Ok(Self {
            family,
            signal_variance,
            inv_length_scales,
        })
    }

    pub fn dim(&self) -> usize {
        self.inv_length_scales.len()
    }

    /// `r² = Σ_f ℓ_f (x_f − x'_f)²`.
    #[inline]
    pub fn r2(&self, x: &[T], x2: &[T]) -> T {
        let mut acc = T::zero();
        for ((a, b), l) in x.iter().zip(x2).zip(&self.inv_length_scales) {
            let d = *a - *b;
            acc += *l * d * d;
        }
        acc
    }

    #[inline]
    pub fn eval_r2(&self, r2: T) -> T {
        self.signal_variance * self.family.shape(r2)
    }

    pub fn eval(&self, x: &[T], x2: &[T]) -> T {
        self.eval_r2(self.r2(x, x2))
    }

    /// `(ln σ, ln ℓ_1, …, ln ℓ_F)`.
    pub fn log_params(&self) -> Vec<T> {
        std::iter::once(self.signal_variance.ln())
            .chain(self.inv_length_scales.iter().map(|l| l.ln()))
            .collect()
    }

    pub fn from_log_params(family: KernelFamily, theta: &[T]) -> Self {
        Self {
            family,
            signal_variance: theta[0].exp(),
            inv_length_scales: theta[1..].iter().map(|t| t.exp()).collect(),
        }
    }
}

/// Free-function form of [`KernelSpec::eval`].
pub fn kernel_eval<T: Real>(spec: &KernelSpec<T>, x: &[T], x2: &[T]) -> Result<T> {
    if x.len() != spec.dim() || x2.len() != spec.dim() {
        return Err(Error::Dimension {
            expected: spec.dim(),
            found: if x.len() != spec.dim() { x.len() } else { x2.len() },
        });
    }
    Ok(spec.eval(x, x2))
}

/// `K(X, X) + jitter_rel·σ·I` for inputs stored as rows of `x`.
pub fn gram_matrix<T: Real>(spec: &KernelSpec<T>, x: &Matrix<T>, jitter_rel: T) -> Result<Matrix<T>> {
    if x.ncols() != spec.dim() {
        return Err(Error::Dimension {
            expected: spec.dim(),
            found: x.ncols(),
        });
    }
    let m = x.nrows();
    let mut g = Matrix::zeros(m, m);
    for a in 0..m {
        for b in 0..a {
            let k = spec.eval(x.row(a), x.row(b));
            g[(a, b)] = k;
            g[(b, a)] = k;
        }
        g[(a, a)] = spec.signal_variance * (T::one() + jitter_rel);
    }
    Ok(g)
}

/// Factors a jittered Gram matrix, escalating the nugget if needed.
/// Returns the factor and the total diagonal jitter.
fn factor_gram<T: Real>(gram: &Matrix<T>, sigma: T, jitter_rel: T) -> Result<(Cholesky<T>, T)> {
    let base = jitter_rel * sigma;
    let chol = match Cholesky::new(gram) {
        Some(c) => c,
        None => Cholesky::jittered(gram, base.max(T::epsilon() * sigma) * T::lit(10.0), JITTER_RETRIES - 1)?,
    };
    let extra = chol.jitter();
    Ok((chol, base + extra))
}

/// Per-dimension squared differences `D_f[a, b] = (x_af − x_bf)²`, reused
/// across likelihood evaluations.
struct PairwiseSquares<T> {
    m: usize,
    per_dim: Vec<Vec<T>>,
}

impl<T: Real> PairwiseSquares<T> {
    fn new(x: &Matrix<T>) -> Self {
        let m = x.nrows();
        let per_dim = (0..x.ncols())
            .map(|f| {
                let mut d = vec![T::zero(); m * m];
                for a in 0..m {
                    for b in 0..a {
                        let diff = x[(a, f)] - x[(b, f)];
                        d[a * m + b] = diff * diff;
                        d[b * m + a] = diff * diff;
                    }
                }
                d
            })
            .collect();
        Self { m, per_dim }
    }

    fn r2(&self, inv_ls: &[T]) -> Vec<T> {
        let mut r2 = vec![T::zero(); self.m * self.m];
        for (d, &l) in self.per_dim.iter().zip(inv_ls) {
            for (r, &v) in r2.iter_mut().zip(d) {
                *r += l * v;
            }
        }
        r2
    }
}

struct LikelihoodEval<T> {
    value: T,
    gradient: Option<Vec<T>>,
}

fn lml_eval<T: Real>(
    sq: &PairwiseSquares<T>,
    family: KernelFamily,
    theta: &[T],
    y: &[T],
    jitter_rel: T,
    with_gradient: bool,
) -> Result<LikelihoodEval<T>> {
    let m = sq.m;
    let spec = KernelSpec::from_log_params(family, theta);
    let sigma = spec.signal_variance;
    let r2 = sq.r2(&spec.inv_length_scales);
    let mut k = Matrix::from_fn(m, m, |a, b| spec.eval_r2(r2[a * m + b]));
    for a in 0..m {
        k[(a, a)] = sigma * (T::one() + jitter_rel);
    }
    let (chol, _) = factor_gram(&k, sigma, jitter_rel)?;
    let alpha = chol.solve(y);
    let two_pi = T::lit(2.0) * T::PI();
    let value = -T::lit(0.5) * dot(y, &alpha) - T::lit(0.5) * chol.ln_det()
        - T::lit(0.5) * T::from_count(m) * two_pi.ln();
    if !value.is_finite() {
        return Err(Error::Optimization {
            reason: format!("log likelihood is not finite at {:?}", spec.log_params()),
        });
    }
    if !with_gradient {
        return Ok(LikelihoodEval { value, gradient: None });
    }
    // W = α αᵀ − K⁻¹; ∂L/∂θ = ½ Σ_ab W_ab ∂K_ab/∂θ.
    let kinv = chol.inverse();
    let half = T::lit(0.5);
    let mut g_sigma = T::zero();
    let mut weighted = vec![T::zero(); m * m];
    for a in 0..m {
        for b in 0..m {
            let w = alpha[a] * alpha[b] - kinv[(a, b)];
            // Jitter scales with σ, so ∂K/∂ln σ = K including the diagonal.
            g_sigma += w * k[(a, b)];
            weighted[a * m + b] = if a == b {
                T::zero()
            } else {
                w * sigma * family.shape_derivative(r2[a * m + b])
            };
        }
    }
    let mut gradient = Vec::with_capacity(theta.len());
    gradient.push(half * g_sigma);
    for (d, &l) in sq.per_dim.iter().zip(&spec.inv_length_scales) {
        gradient.push(half * l * dot(&weighted, d));
    }
    Ok(LikelihoodEval {
        value,
        gradient: Some(gradient),
    })
}

/// `ln p(y | X, θ)` and its gradient with respect to `(ln σ, ln ℓ_1..F)`.
pub fn log_marginal_likelihood<T: Real>(
    spec: &KernelSpec<T>,
    x: &Matrix<T>,
    y: &[T],
    jitter_rel: T,
) -> Result<(T, Vec<T>)> {
    if x.ncols() != spec.dim() {
        return Err(Error::Dimension {
            expected: spec.dim(),
            found: x.ncols(),
        });
    }
    if y.len() != x.nrows() {
        return Err(Error::Dimension {
            expected: x.nrows(),
            found: y.len(),
        });
    }
    let sq = PairwiseSquares::new(x);
    let e = lml_eval(&sq, spec.family, &spec.log_params(), y, jitter_rel, true)?;
    Ok((e.value, e.gradient.expect("gradient requested")))
}

/// Settings for [`fit_hyperparameters`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub n_starts: usize,
    pub max_iters: usize,
    /// Converged when the projected gradient ∞-norm falls below this.
    pub grad_tol: f64,
    /// Converged when a step moves every log-parameter by less than this.
    pub step_tol: f64,
    /// Box on every log-parameter.
    pub log_bounds: [f64; 2],
    /// Random starts are drawn uniformly from this box (the first start is 0).
    pub start_box: [f64; 2],
    pub jitter_rel: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            n_starts: 4,
            max_iters: 200,
            grad_tol: 1e-6,
            step_tol: 1e-9,
            log_bounds: [-10.0, 10.0],
            start_box: [-2.0, 2.0],
            jitter_rel: DEFAULT_JITTER,
            seed: 0,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.log_bounds;
        if self.n_starts == 0 || self.max_iters == 0 || !(lo < hi) || !(self.jitter_rel >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid fit options {self:?}")));
        }
        Ok(())
    }
}

/// Result of one optimizer run.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport<T> {
    pub spec: KernelSpec<T>,
    pub log_likelihood: T,
    pub iterations: usize,
    pub converged: bool,
    /// Log likelihood at each start point, in start order.
    pub start_values: Vec<T>,
}

/// Start points: the origin, then uniform draws from `opts.start_box`.
pub fn start_points(dim: usize, opts: &FitOptions) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let [lo, hi] = opts.start_box;
    let mut out = vec![vec![0.0; dim]];
    for _ in 1..opts.n_starts {
        out.push((0..dim).map(|_| rng.random_range(lo..=hi)).collect());
    }
    out
}

/// Maximizes the log marginal likelihood over log-hyperparameters with a
/// box-projected BFGS from several starts; returns the best optimum.
pub fn fit_hyperparameters<T: Real>(
    x: &Matrix<T>,
    y: &[T],
    family: KernelFamily,
    opts: &FitOptions,
) -> Result<FitReport<T>> {
    opts.validate()?;
    if x.nrows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "fitting needs at least 2 training points, got {}",
            x.nrows()
        )));
    }
    if y.len() != x.nrows() {
        return Err(Error::Dimension {
            expected: x.nrows(),
            found: y.len(),
        });
    }
    let sq = PairwiseSquares::new(x);
    let dim = x.ncols() + 1;
    let jitter = T::lit(opts.jitter_rel);
    let objective = |theta: &[T], grad: bool| lml_eval(&sq, family, theta, y, jitter, grad);

    let mut best: Option<FitReport<T>> = None;
    let mut start_values = Vec::new();
    let mut last_err = None;
    for start in start_points(dim, opts) {
        let start: Vec<T> = start.iter().map(|v| T::lit(*v)).collect();
        match projected_bfgs(&objective, start, opts) {
            Ok((theta, value, iterations, converged, start_value)) => {
                start_values.push(start_value);
                if best.as_ref().is_none_or(|b| value > b.log_likelihood) {
                    best = Some(FitReport {
                        spec: KernelSpec::from_log_params(family, &theta),
                        log_likelihood: value,
                        iterations,
                        converged,
                        start_values: Vec::new(),
                    });
                }
            }
            Err(e) => {
                start_values.push(T::neg_infinity());
                last_err = Some(e);
            }
        }
    }
    match best {
        Some(mut b) => {
            b.start_values = start_values;
            Ok(b)
        }
        None => Err(Error::Optimization {
            reason: last_err.map_or_else(|| "no start point".into(), |e| e.to_string()),
        }),
    }
}

type BfgsOutcome<T> = (Vec<T>, T, usize, bool, T);

/// Minimizes `−L(θ)` on the box; returns `(θ, L(θ), iterations, converged, L(θ_0))`.
fn projected_bfgs<T: Real>(
    objective: &impl Fn(&[T], bool) -> Result<LikelihoodEval<T>>,
    start: Vec<T>,
    opts: &FitOptions,
) -> Result<BfgsOutcome<T>> {
    let n = start.len();
    let (lo, hi) = (T::lit(opts.log_bounds[0]), T::lit(opts.log_bounds[1]));
    let clamp = |v: T| v.max(lo).min(hi);
    let grad_tol = T::lit(opts.grad_tol);
    let step_tol = T::lit(opts.step_tol);
    // Longest first trial step in log space.
    let max_step = T::lit(2.0);

    let mut x: Vec<T> = start.into_iter().map(clamp).collect();
    let eval = |x: &[T]| -> Result<(T, Vec<T>)> {
        let e = objective(x, true)?;
        Ok((-e.value, e.gradient.expect("gradient").into_iter().map(|g| -g).collect()))
    };
    let (mut f, mut g) = eval(&x)?;
    let start_value = -f;
    let mut h = Matrix::<T>::identity(n);
    let mut fresh = true;

    for it in 0..opts.max_iters {
        let blocked: Vec<bool> = (0..n)
            .map(|i| (x[i] <= lo && g[i] > T::zero()) || (x[i] >= hi && g[i] < T::zero()))
            .collect();
        let pg: Vec<T> = (0..n).map(|i| if blocked[i] { T::zero() } else { g[i] }).collect();
        if pg.iter().all(|v| v.abs() <= grad_tol) {
            return Ok((x, -f, it, true, start_value));
        }
        let mut d: Vec<T> = h.matvec(&pg).into_iter().map(|v| -v).collect();
        for i in 0..n {
            if blocked[i] {
                d[i] = T::zero();
            }
        }
        if !(dot(&d, &pg) < T::zero()) {
            h = Matrix::identity(n);
            fresh = true;
            d = pg.iter().map(|v| -*v).collect();
        }
        let dmax = d.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        let mut t = if dmax > max_step { max_step / dmax } else { T::one() };

        // The first trial usually succeeds, so it is evaluated with its gradient.
        let mut accepted = None;
        for attempt in 0..40 {
            let trial: Vec<T> = (0..n).map(|i| clamp(x[i] + t * d[i])).collect();
            let moved: Vec<T> = (0..n).map(|i| trial[i] - x[i]).collect();
            let decrease = dot(&g, &moved);
            if let Ok(e) = objective(&trial, attempt == 0) {
                let ft = -e.value;
                if ft <= f + T::lit(1e-4) * decrease {
                    accepted = Some((trial, moved, ft, e.gradient));
                    break;
                }
            }
            t *= T::lit(0.5);
        }
        let Some((trial, s, f_new, g_new)) = accepted else {
            if !fresh {
                h = Matrix::identity(n);
                fresh = true;
                continue;
            }
            // No descent along the projected gradient at this resolution.
            return Ok((x, -f, it, false, start_value));
        };
        let g_new = match g_new {
            Some(gr) => gr.into_iter().map(|v| -v).collect(),
            None => eval(&trial)?.1,
        };
        let yv: Vec<T> = (0..n).map(|i| g_new[i] - g[i]).collect();
        let step_small = s.iter().all(|v| v.abs() <= step_tol);
        x = trial;
        f = f_new;
        g = g_new;
        if step_small {
            return Ok((x, -f, it + 1, true, start_value));
        }
        let sy = dot(&s, &yv);
        if sy > T::lit(1e-12) * dot(&s, &s).sqrt() * dot(&yv, &yv).sqrt() {
            if fresh {
                let scale = sy / dot(&yv, &yv);
                h = Matrix::identity(n);
                for i in 0..n {
                    h[(i, i)] = scale;
                }
            }
            bfgs_update(&mut h, &s, &yv, sy);
            fresh = false;
        }
    }
    Ok((x, -f, opts.max_iters, false, start_value))
}

/// Inverse-Hessian update `H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ`.
fn bfgs_update<T: Real>(h: &mut Matrix<T>, s: &[T], y: &[T], sy: T) {
    let n = s.len();
    let rho = T::one() / sy;
    let hy = h.matvec(y);
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[(i, j)] += rho * ((T::one() + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
        }
    }
}

/// One fitted output: kernel, Cholesky factor of the jittered Gram matrix and
/// the weights `α = K⁻¹ y`. Inputs are shared between outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GpOutputModel<T> {
    kernel: KernelSpec<T>,
    inputs: Arc<Matrix<T>>,
    targets: Vec<T>,
    chol: Cholesky<T>,
    alpha: Vec<T>,
    jitter: T,
}

impl<T: Real> GpOutputModel<T> {
    /// Factors `K(X, X) + jitter_rel·σ·I` and precomputes `α`.
    pub fn new(kernel: KernelSpec<T>, inputs: Arc<Matrix<T>>, targets: Vec<T>, jitter_rel: T) -> Result<Self> {
        if targets.len() != inputs.nrows() {
            return Err(Error::Dimension {
                expected: inputs.nrows(),
                found: targets.len(),
            });
        }
        let gram = gram_matrix(&kernel, &inputs, jitter_rel)?;
        let (chol, jitter) = factor_gram(&gram, kernel.signal_variance, jitter_rel)?;
        Ok(Self::from_factor(kernel, inputs, targets, chol, jitter))
    }

    /// Rebuilds a model from a stored factor; `α` is recomputed the same way
    /// as in [`GpOutputModel::new`].
    pub fn from_factor(kernel: KernelSpec<T>, inputs: Arc<Matrix<T>>, targets: Vec<T>, chol: Cholesky<T>, jitter: T) -> Self {
        let alpha = chol.solve(&targets);
        Self {
            kernel,
            inputs,
            targets,
            chol,
            alpha,
            jitter,
        }
    }

    pub fn kernel(&self) -> &KernelSpec<T> {
        &self.kernel
    }

    pub fn inputs(&self) -> &Arc<Matrix<T>> {
        &self.inputs
    }

    pub fn targets(&self) -> &[T] {
        &self.targets
    }

    pub fn chol(&self) -> &Cholesky<T> {
        &self.chol
    }

    pub fn alpha(&self) -> &[T] {
        &self.alpha
    }

    /// Total diagonal jitter in the factored matrix.
    pub fn jitter(&self) -> T {
        self.jitter
    }

    /// `k(x*, X)`.
    pub fn cross_covariance(&self, x: &[T]) -> Vec<T> {
        (0..self.inputs.nrows())
            .map(|a| self.kernel.eval(self.inputs.row(a), x))
            .collect()
    }

    /// Posterior mean `k(x*, X)·α`.
    pub fn predict_mean(&self, x: &[T]) -> T {
        let mut acc = T::zero();
        for (a, &w) in self.alpha.iter().enumerate() {
            acc += w * self.kernel.eval(self.inputs.row(a), x);
        }
        acc
    }

    /// Posterior mean and variance `k(x*,x*) − vᵀv`, `v = L⁻¹ k(X, x*)`,
    /// with the variance clamped at 0.
    pub fn predict(&self, x: &[T]) -> (T, T) {
        let mut v = self.cross_covariance(x);
        let mean = dot(&v, &self.alpha);
        self.chol.solve_lower_in_place(&mut v);
        let var = self.kernel.signal_variance - dot(&v, &v);
        (mean, var.max(T::zero()))
    }
}

/// Current model file layout.
pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Per-output GPs mapping scaled `(p_3..p_N)` to scaled `λ_i`, with the
/// scaling needed to go back to raw multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct GpModel {
    n_moments: usize,
    family: KernelFamily,
    inputs: Arc<Matrix<f64>>,
    outputs: Vec<GpOutputModel<f64>>,
    scaling: ScalingStats,
    dataset_hash: String,
    domain: VelocityDomain<f64>,
    quad_order: usize,
    fit_options: Option<FitOptions>,
}

/// Posterior summary for one moment vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Raw (unscaled) `λ̂`.
    pub mean: Vec<f64>,
    /// Posterior variance per output, in scaled-target units.
    pub variance: Vec<f64>,
}

/// Fits one GP per multiplier on the scaled dataset, in parallel over outputs.
pub fn train_model(ds: &Dataset, family: KernelFamily, opts: &FitOptions) -> Result<GpModel> {
    let n = ds.n_moments();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("GP inputs need N ≥ 3 moments, got {n}")));
    }
    let scaling = compute_scaling(ds)?;
    let rows: Vec<Vec<f64>> = ds
        .pairs
        .iter()
        .map(|pr| scaling.scale_input(pr.p.values()))
        .collect::<Result<_>>()?;
    let inputs = Arc::new(Matrix::from_rows(&rows)?);
    let outputs = (0..n)
        .into_par_iter()
        .map(|i| {
            let y: Vec<f64> = ds
                .pairs
                .iter()
                .map(|pr| scaling.scale_target(i, pr.lambda.values()[i]))
                .collect();
            let out_opts = FitOptions {
                seed: opts.seed.wrapping_add(i as u64),
                ..opts.clone()
            };
            let wrap = |e| Error::Output {
                output: i + 1,
                source: Box::new(e),
            };
            let fit = fit_hyperparameters(&inputs, &y, family, &out_opts).map_err(wrap)?;
            log::info!(
                "output {}: log likelihood {:.6e} after {} iterations{}",
                i + 1,
                fit.log_likelihood,
                fit.iterations,
                if fit.converged { "" } else { " (not converged)" }
            );
            GpOutputModel::new(fit.spec, inputs.clone(), y, opts.jitter_rel).map_err(wrap)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GpModel {
        n_moments: n,
        family,
        inputs,
        outputs,
        scaling,
        dataset_hash: ds.content_hash(),
        domain: ds.meta.domain()?,
        quad_order: ds.meta.quad_order,
        fit_options: Some(opts.clone()),
    })
}

#[derive(Serialize, Deserialize)]
struct OutputFile {
    signal_variance: f64,
    inv_length_scales: Vec<f64>,
    jitter: f64,
    targets: Vec<f64>,
    chol_lower_packed: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    schema_version: u32,
    n_moments: usize,
    family: KernelFamily,
    outputs: Vec<OutputFile>,
    train_inputs: Vec<Vec<f64>>,
    scaling: ScalingStats,
    dataset_hash: String,
    #[serde(default = "default_domain")]
    domain: VelocityDomain<f64>,
    #[serde(default = "default_quad_order")]
    quad_order: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fit_options: Option<FitOptions>,
}

fn default_domain() -> VelocityDomain<f64> {
    VelocityDomain::default()
}

fn default_quad_order() -> usize {
    DEFAULT_ORDER
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: u32,
}

impl GpModel {
    pub fn n_moments(&self) -> usize {
        self.n_moments
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn n_train(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn outputs(&self) -> &[GpOutputModel<f64>] {
        &self.outputs
    }

    pub fn scaling(&self) -> &ScalingStats {
        &self.scaling
    }

    pub fn dataset_hash(&self) -> &str {
        &self.dataset_hash
    }

    /// Velocity domain of the training densities (standardized coordinates).
    pub fn domain(&self) -> &VelocityDomain<f64> {
        &self.domain
    }

    /// Optimizer settings used in training, including the seed (absent in older files).
    pub fn fit_options(&self) -> Option<&FitOptions> {
        self.fit_options.as_ref()
    }

    pub fn quad_order(&self) -> usize {
        self.quad_order
    }

    /// Quadrature rule matching the training data.
    pub fn rule(&self) -> Result<QuadratureRule<f64>> {
        QuadratureRule::new(self.domain, self.quad_order)
    }

    /// Whether `ds` is the dataset this model was trained on.
    pub fn dataset_matches(&self, ds: &Dataset) -> bool {
        self.dataset_hash == ds.content_hash()
    }

    /// Logs a warning and returns `false` when `ds` is not the training dataset.
    pub fn warn_if_dataset_mismatch(&self, ds: &Dataset) -> bool {
        let ok = self.dataset_matches(ds);
        if !ok {
            log::warn!(
                "model was trained on dataset {} but the given dataset hashes to {}",
                self.dataset_hash,
                ds.content_hash()
            );
        }
        ok
    }

    fn scaled_input(&self, p: &[f64]) -> Result<Vec<f64>> {
        if p.len() != self.n_moments {
            return Err(Error::Dimension {
                expected: self.n_moments,
                found: p.len(),
            });
        }
        self.scaling.scale_input(p)
    }

    /// Posterior mean (raw `λ̂`) and variance (scaled units) for standardized `p`.
    pub fn predict(&self, p: &MomentVector<f64>) -> Result<Prediction> {
        if !p.is_standardized() {
            return Err(Error::InvalidArgument(format!(
                "prediction needs standardized moments (p1 = {}, p2 = {})",
                p.values()[0],
                p.values().get(1).copied().unwrap_or(f64::NAN)
            )));
        }
        let x = self.scaled_input(p.values())?;
        let (mean, variance) = self
            .outputs
            .iter()
            .enumerate()
            .map(|(i, o)| {
                let (m, v) = o.predict(&x);
                (self.scaling.unscale_target(i, m), v)
            })
            .unzip();
        Ok(Prediction { mean, variance })
    }

    /// Raw `λ̂` only; skips the variance solve.
    pub fn predict_mean(&self, p: &[f64]) -> Result<Vec<f64>> {
        let x = self.scaled_input(p)?;
        Ok(self
            .outputs
            .iter()
            .enumerate()
            .map(|(i, o)| self.scaling.unscale_target(i, o.predict_mean(&x)))
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        let outputs = self
            .outputs
            .iter()
            .map(|o| {
                let l = o.chol().lower();
                let packed = (0..l.nrows()).flat_map(|i| l.row(i)[..=i].to_vec()).collect();
                OutputFile {
                    signal_variance: o.kernel().signal_variance,
                    inv_length_scales: o.kernel().inv_length_scales.clone(),
                    jitter: o.jitter(),
                    targets: o.targets().to_vec(),
                    chol_lower_packed: packed,
                }
            })
            .collect();
        let file = ModelFile {
            schema_version: MODEL_SCHEMA_VERSION,
            n_moments: self.n_moments,
            family: self.family,
            outputs,
            train_inputs: self.inputs.to_rows(),
            scaling: self.scaling.clone(),
            dataset_hash: self.dataset_hash.clone(),
            domain: self.domain,
            quad_order: self.quad_order,
            fit_options: self.fit_options.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let parse_err = |e: serde_json::Error| Error::parse(origin, e.line(), e.to_string());
        let probe: VersionProbe = serde_json::from_str(text).map_err(parse_err)?;
        if probe.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: probe.schema_version,
                expected: MODEL_SCHEMA_VERSION,
            });
        }
        let file: ModelFile = serde_json::from_str(text).map_err(parse_err)?;
        let bad = |msg: String| Error::parse(origin, 0, msg);
        let n = file.n_moments;
        if n < 3 || file.outputs.len() != n {
            return Err(bad(format!("expected {n} outputs, found {}", file.outputs.len())));
        }
        let inputs = Arc::new(Matrix::from_rows(&file.train_inputs).map_err(|e| bad(e.to_string()))?);
        let (m, f) = (inputs.nrows(), inputs.ncols());
        if f != n - 2 || file.scaling.n_moments() != n || file.scaling.input_means.len() != f {
            return Err(bad(format!("inconsistent dimensions for N = {n}")));
        }
        let mut outputs = Vec::with_capacity(n);
        for (i, o) in file.outputs.into_iter().enumerate() {
            if o.targets.len() != m || o.chol_lower_packed.len() != m * (m + 1) / 2 || o.inv_length_scales.len() != f {
                return Err(bad(format!("output {} has inconsistent sizes", i + 1)));
            }
            let kernel = KernelSpec::new(file.family, o.signal_variance, o.inv_length_scales)
                .map_err(|e| bad(format!("output {}: {e}", i + 1)))?;
            let mut l = Matrix::zeros(m, m);
            let mut it = o.chol_lower_packed.into_iter();
            for r in 0..m {
                for c in 0..=r {
                    l[(r, c)] = it.next().expect("length checked");
                }
            }
            let extra = o.jitter - DEFAULT_JITTER * kernel.signal_variance;
            let chol = Cholesky::from_lower(l, extra.max(0.0));
            outputs.push(GpOutputModel::from_factor(kernel, inputs.clone(), o.targets, chol, o.jitter));
        }
        Ok(Self {
            n_moments: n,
            family: file.family,
            inputs,
            outputs,
            scaling: file.scaling,
            dataset_hash: file.dataset_hash,
            domain: VelocityDomain::new(file.domain.v_min, file.domain.v_max).map_err(|e| bad(e.to_string()))?,
            quad_order: file.quad_order,
            fit_options: file.fit_options,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}
