//! Maximum-entropy densities `f(v) = exp(-Σ_j λ_j v^j) / Z` on a bounded interval,
//! the convex dual used to find `λ` from moments, and the damped Newton solver.
//!
//! The dual is taken in its normalized form
//!
//! ```text
//! D(λ) = ln Z(λ) + Σ_j λ_j p_j,     ∇D = p - E[v^j],     ∇²D = Cov(v^i, v^j)
//! ```
//!
//! so that a stationary point matches the moments and the Hessian is SPD.
//! All integrals go through a shared [`QuadratureRule`]; `ln Z` is evaluated
//! with the exponent shifted by its maximum over the nodes.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::quadrature::{QuadratureRule, VelocityDomain};
use crate::scalar::{binomial, Real};

/// Tolerance on `|p_1|` and `|p_2 - 1|` for the standardized flag.
pub const STANDARDIZED_TOL: f64 = 1e-8;

/// Raw power moments `p_j = ∫ v^j f dv`, `j = 1..N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentVector<T> {
    values: Vec<T>,
    standardized: bool,
}

impl<T: Real> MomentVector<T> {
    /// Validates finiteness and positivity of the even moments, then sets the
    /// standardized flag from `p_1` and `p_2`.
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("moment vector is empty".into()));
        }
        for (i, p) in values.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::InvalidArgument(format!("moment p_{} is not finite", i + 1)));
            }
            if (i + 1) % 2 == 0 && !(*p > T::zero()) {
                return Err(Error::InvalidArgument(format!(
                    "even moment p_{} = {} must be positive",
                    i + 1,
                    p
                )));
            }
        }
        let standardized = is_standardized(&values);
        Ok(Self {
            values,
            standardized,
        })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn n_moments(&self) -> usize {
        self.values.len()
    }

    pub fn is_standardized(&self) -> bool {
        self.standardized
    }

    /// `p_j`, one-based.
    pub fn get(&self, j: usize) -> T {
        self.values[j - 1]
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }
}

fn is_standardized<T: Real>(values: &[T]) -> bool {
    let tol = T::lit(STANDARDIZED_TOL);
    values.len() >= 2 && values[0].abs() <= tol && (values[1] - T::one()).abs() <= tol
}

/// Lagrange multipliers `λ_1..λ_N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LagrangeVector<T>(Vec<T>);

impl<T: Real> LagrangeVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("multiplier vector is empty".into()));
        }
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!("multiplier λ_{} is not finite", i + 1)));
        }
        Ok(Self(values))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![T::zero(); n])
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn into_values(self) -> Vec<T> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm2(&self) -> T {
        self.0.iter().map(|x| *x * *x).sum::<T>().sqrt()
    }
}

/// `-Σ_j λ_j v^j` by Horner's scheme.
#[inline]
pub fn exponent<T: Real>(lambda: &[T], v: T) -> T {
    let mut acc = T::zero();
    for &l in lambda.iter().rev() {
        acc = (acc + l) * v;
    }
    -acc
}

/// `ln Z` and the normalized quadrature masses `q_k = w_k f(v_k)`.
fn masses<T: Real>(lambda: &[T], rule: &QuadratureRule<T>) -> Result<(T, Vec<T>)> {
    let exps: Vec<T> = rule.nodes().iter().map(|&v| exponent(lambda, v)).collect();
    let shift = exps.iter().copied().fold(T::neg_infinity(), T::max);
    if !shift.is_finite() || exps.iter().any(|e| e.is_nan()) {
        return Err(Error::PartitionOverflow {
            max_exponent: shift.to_f64_lossy(),
        });
    }
    let mut q: Vec<T> = exps
        .iter()
        .zip(rule.weights())
        .map(|(&e, &w)| w * (e - shift).exp())
        .collect();
    let s: T = q.iter().copied().sum();
    for x in &mut q {
        *x /= s;
    }
    Ok((shift + s.ln(), q))
}

/// `ln Z(λ) = ln ∫ exp(-Σ λ_j v^j) dv`.
pub fn log_partition<T: Real>(lambda: &LagrangeVector<T>, rule: &QuadratureRule<T>) -> Result<T> {
    masses(lambda.values(), rule).map(|(ln_z, _)| ln_z)
}

/// `E[v^j]` for `j = 0..=max_power` from normalized masses.
fn power_expectations<T: Real>(rule: &QuadratureRule<T>, q: &[T], max_power: usize) -> Vec<T> {
    let mut out = vec![T::zero(); max_power + 1];
    for (&v, &qk) in rule.nodes().iter().zip(q) {
        let mut pw = qk;
        for o in out.iter_mut() {
            *o += pw;
            pw *= v;
        }
    }
    out
}

/// Normalized maximum-entropy density on the domain of its quadrature rule.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxEntDensity<T> {
    lambda: LagrangeVector<T>,
    rule: Arc<QuadratureRule<T>>,
    ln_z: T,
}

impl<T: Real> MaxEntDensity<T> {
    pub fn new(lambda: LagrangeVector<T>, rule: Arc<QuadratureRule<T>>) -> Result<Self> {
        let ln_z = log_partition(&lambda, &rule)?;
        Ok(Self { lambda, rule, ln_z })
    }

    pub fn lambda(&self) -> &LagrangeVector<T> {
        &self.lambda
    }

    pub fn rule(&self) -> &Arc<QuadratureRule<T>> {
        &self.rule
    }

    pub fn domain(&self) -> &VelocityDomain<T> {
        self.rule.domain()
    }

    pub fn ln_z(&self) -> T {
        self.ln_z
    }

    /// Normalizer `Z`; may be `inf` where only `ln Z` is representable.
    pub fn z(&self) -> T {
        self.ln_z.exp()
    }

    /// `ln f(v)`; defined for every real `v` (the formula, not the domain).
    pub fn log_density(&self, v: T) -> T {
        exponent(self.lambda.values(), v) - self.ln_z
    }

    /// `f(v)` for `v` inside the domain.
    pub fn value(&self, v: T) -> Result<T> {
        if !self.domain().contains(v) {
            return Err(Error::InvalidArgument(format!(
                "v = {v} outside [{}, {}]",
                self.domain().v_min,
                self.domain().v_max
            )));
        }
        let e = self.log_density(v);
        if e > T::max_exp_arg() {
            return Err(Error::Saturation {
                v: v.to_f64_lossy(),
                exponent: e.to_f64_lossy(),
            });
        }
        Ok(e.exp())
    }

    /// `p_j = ∫ v^j f dv` for `j = 1..n_moments`.
    pub fn moments(&self, n_moments: usize) -> Result<MomentVector<T>> {
        let (_, q) = masses(self.lambda.values(), &self.rule)?;
        let e = power_expectations(&self.rule, &q, n_moments);
        MomentVector::new(e[1..].to_vec())
    }

    /// `∫ f dv` by quadrature (1 up to rounding).
    pub fn total_mass(&self) -> Result<T> {
        self.rule.integrate(|v| self.log_density(v).exp())
    }

    /// Mean and standard deviation of the density.
    pub fn mean_std(&self) -> Result<(T, T)> {
        let (_, q) = masses(self.lambda.values(), &self.rule)?;
        let e = power_expectations(&self.rule, &q, 2);
        let var = e[2] - e[1] * e[1];
        Ok((e[1], var.max(T::zero()).sqrt()))
    }
}

/// Free-function form of [`MaxEntDensity::value`].
pub fn density_value<T: Real>(d: &MaxEntDensity<T>, v: T) -> Result<T> {
    d.value(v)
}

/// Free-function form of [`MaxEntDensity::moments`].
pub fn moments_of<T: Real>(d: &MaxEntDensity<T>, n_moments: usize) -> Result<MomentVector<T>> {
    d.moments(n_moments)
}

fn check_len<T>(lambda: &LagrangeVector<T>, p: &MomentVector<T>) -> Result<()> {
    if lambda.0.len() != p.values.len() {
        return Err(Error::Dimension {
            expected: p.values.len(),
            found: lambda.0.len(),
        });
    }
    Ok(())
}

/// `D(λ) = ln Z(λ) + Σ_j λ_j p_j`.
pub fn dual_objective<T: Real>(
    lambda: &LagrangeVector<T>,
    p: &MomentVector<T>,
    rule: &QuadratureRule<T>,
) -> Result<T> {
    check_len(lambda, p)?;
    let ln_z = log_partition(lambda, rule)?;
    Ok(ln_z + linalg::dot(lambda.values(), p.values()))
}

/// `g_i = p_i - E[v^i]`.
pub fn dual_gradient<T: Real>(
    lambda: &LagrangeVector<T>,
    p: &MomentVector<T>,
    rule: &QuadratureRule<T>,
) -> Result<Vec<T>> {
    check_len(lambda, p)?;
    let (_, q) = masses(lambda.values(), rule)?;
    let e = power_expectations(rule, &q, p.n_moments());
    Ok(p.values().iter().zip(&e[1..]).map(|(pi, ei)| *pi - *ei).collect())
}

/// `H_ij = Cov(v^i, v^j)`, accumulated in centered form.
pub fn dual_hessian<T: Real>(lambda: &LagrangeVector<T>, rule: &QuadratureRule<T>) -> Result<Matrix<T>> {
    let (_, q) = masses(lambda.values(), rule)?;
    Ok(centered_covariance(rule, &q, lambda.len()).1)
}

/// Means `E[v^1..v^n]` and their covariance matrix.
fn centered_covariance<T: Real>(rule: &QuadratureRule<T>, q: &[T], n: usize) -> (Vec<T>, Matrix<T>) {
    let e = power_expectations(rule, q, n);
    let mean = &e[1..];
    let mut h = Matrix::zeros(n, n);
    let mut c = vec![T::zero(); n];
    for (&v, &qk) in rule.nodes().iter().zip(q) {
        let mut pw = v;
        for (ci, mi) in c.iter_mut().zip(mean) {
            *ci = pw - *mi;
            pw *= v;
        }
        for i in 0..n {
            let a = qk * c[i];
            let row = h.row_mut(i);
            for j in 0..=i {
                row[j] += a * c[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            h[(j, i)] = h[(i, j)];
        }
    }
    (mean.to_vec(), h)
}

struct DualState<T> {
    value: T,
    gradient: Vec<T>,
    hessian: Matrix<T>,
}

fn dual_state<T: Real>(lambda: &[T], p: &[T], rule: &QuadratureRule<T>) -> Result<DualState<T>> {
    let (ln_z, q) = masses(lambda, rule)?;
    let (mean, hessian) = centered_covariance(rule, &q, lambda.len());
    Ok(DualState {
        value: ln_z + linalg::dot(lambda, p),
        gradient: p.iter().zip(&mean).map(|(a, b)| *a - *b).collect(),
        hessian,
    })
}

fn dual_value<T: Real>(lambda: &[T], p: &[T], rule: &QuadratureRule<T>) -> Result<T> {
    let (ln_z, _) = masses(lambda, rule)?;
    Ok(ln_z + linalg::dot(lambda, p))
}

/// Newton–Armijo parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions<T> {
    /// Stop when `‖∇D‖_∞ ≤ tol`.
    pub tol: T,
    pub armijo_c: T,
    /// Backtracking factor `s`: trial steps are `s^0, s^1, …, s^max_backtracks`.
    pub armijo_s: T,
    pub max_backtracks: usize,
    pub max_iters: usize,
    /// Half-width of the random start box, in the domain-scaled monomial basis.
    pub init_box: T,
}

impl<T: Real> Default for SolverOptions<T> {
    fn default() -> Self {
        Self {
            tol: T::lit(1e-10).max(T::epsilon() * T::lit(100.0)),
            armijo_c: T::lit(1e-4),
            armijo_s: T::lit(0.5),
            max_backtracks: 30,
            max_iters: 200,
            init_box: T::lit(0.1),
        }
    }
}

impl<T: Real> SolverOptions<T> {
    pub fn validate(&self) -> Result<()> {
        let (zero, one) = (T::zero(), T::one());
        if !(self.tol > zero) {
            return Err(Error::InvalidArgument("tol must be positive".into()));
        }
        if !(self.armijo_c > zero && self.armijo_c < one) {
            return Err(Error::InvalidArgument("armijo_c must lie in (0, 1)".into()));
        }
        if !(self.armijo_s > zero && self.armijo_s < one) {
            return Err(Error::InvalidArgument("armijo_s must lie in (0, 1)".into()));
        }
        if !(self.init_box >= zero) {
            return Err(Error::InvalidArgument("init_box must be non-negative".into()));
        }
        Ok(())
    }
}

/// Converged multipliers with iteration diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct NewtonSolution<T> {
    pub lambda: LagrangeVector<T>,
    pub iterations: usize,
    pub gradient_norm: T,
    /// `D(λ^(n))` for every accepted iterate, starting with the initial guess.
    pub objective_trace: Vec<T>,
}

/// Seeded uniform draw from `[-half_width, half_width]^n`.
pub fn random_multipliers<T: Real>(n: usize, half_width: T, seed: u64) -> LagrangeVector<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = half_width.to_f64_lossy();
    let values = (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(-1.0..=1.0);
            T::lit(u * hw)
        })
        .collect();
    LagrangeVector(values)
}

/// Random starting point for the Newton solver: uniform in `[-init_box, init_box]`
/// for the multipliers of the domain-scaled monomials `(v / h)^j`,
/// `h = max(|v_min|, |v_max|)`, mapped back to the `v^j` basis.
pub fn initial_multipliers<T: Real>(
    n: usize,
    domain: &VelocityDomain<T>,
    init_box: T,
    seed: u64,
) -> LagrangeVector<T> {
    let h = domain.v_min.abs().max(domain.v_max.abs());
    let mut lambda = random_multipliers(n, init_box, seed);
    for (j, l) in lambda.0.iter_mut().enumerate() {
        *l = *l / h.powi(j as i32 + 1);
    }
    lambda
}

/// Solves the dual from a seeded random start (see [`initial_multipliers`]).
pub fn newton_solve<T: Real>(
    p: &MomentVector<T>,
    rule: &QuadratureRule<T>,
    opts: &SolverOptions<T>,
    seed: u64,
) -> Result<NewtonSolution<T>> {
    let start = initial_multipliers(p.n_moments(), rule.domain(), opts.init_box, seed);
    newton_solve_from(p, rule, opts, start)
}

/// Damped Newton iteration on the dual from a given starting point.
///
/// Each step solves `H Δλ = -g` and backtracks `β ∈ {1, s, s², …, s^N_s}` until
/// `D(λ + βΔλ) ≤ D(λ) + c β (g·Δλ)`.
pub fn newton_solve_from<T: Real>(
    p: &MomentVector<T>,
    rule: &QuadratureRule<T>,
    opts: &SolverOptions<T>,
    start: LagrangeVector<T>,
) -> Result<NewtonSolution<T>> {
    opts.validate()?;
    check_len(&start, p)?;
    let p = p.values();
    let n = p.len();
    let mut lambda = start.0;
    let mut state = dual_state(&lambda, p, rule)?;
    let mut trace = vec![state.value];
    // Below this decrease the Armijo test compares rounding noise.
    let noise = T::epsilon() * T::lit(64.0);

    for iteration in 0..opts.max_iters {
        let gnorm = inf_norm(&state.gradient);
        if gnorm <= opts.tol {
            return Ok(NewtonSolution {
                lambda: LagrangeVector(lambda),
                iterations: iteration,
                gradient_norm: gnorm,
                objective_trace: trace,
            });
        }
        let mut dir = linalg::solve_spd_equilibrated(&state.hessian, &state.gradient, T::lit(1e-12), 5)?;
        for d in &mut dir {
            *d = -*d;
        }
        let mut slope = linalg::dot(&state.gradient, &dir);
        if !(slope < T::zero()) {
            // Factorization noise; fall back to steepest descent.
            dir = state.gradient.iter().map(|g| -*g).collect();
            slope = -linalg::dot(&state.gradient, &state.gradient);
        }

        let floor = noise * state.value.abs().max(T::one());
        let mut trial = vec![T::zero(); n];
        let mut accepted = false;
        if -slope <= floor {
            // Predicted decrease is below the resolution of D, so the Armijo test
            // would compare rounding noise; take the full step unless D
            // measurably increases.
            for i in 0..n {
                trial[i] = lambda[i] + dir[i];
            }
            accepted = matches!(dual_value(&trial, p, rule), Ok(v) if v <= state.value + floor);
        } else {
            let mut beta = T::one();
            for _ in 0..=opts.max_backtracks {
                for i in 0..n {
                    trial[i] = lambda[i] + beta * dir[i];
                }
                if let Ok(v) = dual_value(&trial, p, rule) {
                    if v <= state.value + opts.armijo_c * beta * slope {
                        accepted = true;
                        break;
                    }
                }
                beta *= opts.armijo_s;
            }
        }
        if !accepted {
            return Err(Error::LineSearchStalled {
                iteration,
                backtracks: opts.max_backtracks,
                gradient_norm: gnorm.to_f64_lossy(),
            });
        }
        lambda.copy_from_slice(&trial);
        state = dual_state(&lambda, p, rule)?;
        trace.push(state.value);
    }
    let gnorm = inf_norm(&state.gradient);
    if gnorm <= opts.tol {
        return Ok(NewtonSolution {
            lambda: LagrangeVector(lambda),
            iterations: opts.max_iters,
            gradient_norm: gnorm,
            objective_trace: trace,
        });
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iters,
        gradient_norm: gnorm.to_f64_lossy(),
    })
}

fn inf_norm<T: Real>(x: &[T]) -> T {
    x.iter().map(|v| v.abs()).fold(T::zero(), T::max)
}

/// Multipliers of `σ f_λ̃(σ v + μ)` (up to normalization):
/// `λ_i = Σ_{j≥i} λ̃_j C(j,i) σ^i μ^{j-i}`.
pub fn rescale_multipliers<T: Real>(lambda_tilde: &LagrangeVector<T>, mu: T, sigma: T) -> Result<LagrangeVector<T>> {
    if !(sigma > T::zero()) || !mu.is_finite() || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "rescale needs finite mu and sigma > 0 (got mu = {mu}, sigma = {sigma})"
        )));
    }
    let lt = lambda_tilde.values();
    let n = lt.len();
    let mut out = Vec::with_capacity(n);
    for i in 1..=n {
        let mut acc = T::zero();
        let mut mu_pow = T::one();
        for j in i..=n {
            acc += lt[j - 1] * binomial::<T>(j, i) * mu_pow;
            mu_pow *= mu;
        }
        out.push(acc * sigma.powi(i as i32));
    }
    LagrangeVector::new(out)
}

/// `∫ f_ref ln(f_ref / f_λ) dv` on `rule`, with `0 ln 0 = 0`.
pub fn kl_divergence<T: Real>(
    f_ref: impl Fn(T) -> T,
    d: &MaxEntDensity<T>,
    rule: &QuadratureRule<T>,
) -> Result<T> {
    let values: Vec<T> = rule.nodes().iter().map(|&v| f_ref(v)).collect();
    kl_divergence_values(&values, d, rule)
}

/// As [`kl_divergence`] with the reference already sampled at the rule nodes.
pub fn kl_divergence_values<T: Real>(
    ref_values: &[T],
    d: &MaxEntDensity<T>,
    rule: &QuadratureRule<T>,
) -> Result<T> {
    if ref_values.len() != rule.order() {
        return Err(Error::Dimension {
            expected: rule.order(),
            found: ref_values.len(),
        });
    }
    let mut acc = T::zero();
    for ((&v, &w), &f) in rule.nodes().iter().zip(rule.weights()).zip(ref_values) {
        if !(f >= T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "reference density {f} at v = {v} is negative or NaN"
            )));
        }
        if f == T::zero() {
            continue;
        }
        let log_model = d.log_density(v);
        if log_model == T::neg_infinity() {
            return Err(Error::InfiniteDivergence { v: v.to_f64_lossy() });
        }
        acc += w * f * (f.ln() - log_model);
    }
    Ok(acc)
}

/// Standardizes raw moments: `μ = p_1`, `σ² = p_2 - p_1²`,
/// `p̂_k = σ^{-k} Σ_i C(k,i) p_i (-μ)^{k-i}` with `p_0 = 1`.
pub fn standardize_raw_moments<T: Real>(raw: &MomentVector<T>) -> Result<(T, T, MomentVector<T>)> {
    let p = raw.values();
    if p.len() < 2 {
        return Err(Error::InvalidArgument("standardization needs at least two moments".into()));
    }
    let mu = p[0];
    let var = p[1] - mu * mu;
    if !(var > T::zero()) {
        return Err(Error::DegenerateMoments {
            variance: var.to_f64_lossy(),
        });
    }
    let sigma = var.sqrt();
    let moment = |i: usize| if i == 0 { T::one() } else { p[i - 1] };
    let mut out = Vec::with_capacity(p.len());
    for k in 1..=p.len() {
        let mut acc = T::zero();
        let mut neg_mu_pow = T::one();
        for i in (0..=k).rev() {
            acc += binomial::<T>(k, i) * moment(i) * neg_mu_pow;
            neg_mu_pow *= -mu;
        }
        out.push(acc / sigma.powi(k as i32));
    }
    out[0] = T::zero();
    out[1] = T::one();
    Ok((mu, sigma, MomentVector::new(out)?))
}
