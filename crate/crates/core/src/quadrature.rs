//! Gauss–Legendre quadrature on a bounded velocity interval.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Default rule order for moment, normalizer and divergence integrals.
pub const DEFAULT_ORDER: usize = 64;

/// Bounded velocity interval `[v_min, v_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityDomain<T> {
    pub v_min: T,
    pub v_max: T,
}

impl<T: Real> VelocityDomain<T> {
    pub fn new(v_min: T, v_max: T) -> Result<Self> {
        if !(v_min < v_max) || !v_min.is_finite() || !v_max.is_finite() {
            return Err(Error::InvalidDomain {
                v_min: v_min.to_f64_lossy(),
                v_max: v_max.to_f64_lossy(),
            });
        }
        Ok(Self { v_min, v_max })
    }

    /// `[-half_width, half_width]`.
    pub fn symmetric(half_width: T) -> Result<Self> {
        Self::new(-half_width, half_width)
    }

    pub fn width(&self) -> T {
        self.v_max - self.v_min
    }

    pub fn contains(&self, v: T) -> bool {
        v >= self.v_min && v <= self.v_max
    }
}

impl<T: Real> Default for VelocityDomain<T> {
    fn default() -> Self {
        Self {
            v_min: T::lit(-10.0),
            v_max: T::lit(10.0),
        }
    }
}

/// Gauss–Legendre nodes and weights mapped onto a [`VelocityDomain`].
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule<T> {
    domain: VelocityDomain<T>,
    nodes: Vec<T>,
    weights: Vec<T>,
}

impl<T: Real> QuadratureRule<T> {
    /// Builds the `order`-point rule on `domain`.
    pub fn new(domain: VelocityDomain<T>, order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidArgument("quadrature order must be at least 1".into()));
        }
        let domain = VelocityDomain::new(domain.v_min, domain.v_max)?;
        let reference = reference_rule(order);
        let half = domain.width() / T::lit(2.0);
        let mid = (domain.v_max + domain.v_min) / T::lit(2.0);
        let nodes = reference.0.iter().map(|&x| mid + half * T::lit(x)).collect();
        let weights = reference.1.iter().map(|&w| half * T::lit(w)).collect();
        Ok(Self {
            domain,
            nodes,
            weights,
        })
    }

    pub fn domain(&self) -> &VelocityDomain<T> {
        &self.domain
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// `Σ_k w_k f(v_k)`; fails on the first non-finite integrand value.
    pub fn integrate(&self, mut f: impl FnMut(T) -> T) -> Result<T> {
        let mut acc = T::zero();
        for (&v, &w) in self.nodes.iter().zip(&self.weights) {
            let fv = f(v);
            if !fv.is_finite() {
                return Err(Error::NonFiniteIntegrand {
                    node: v.to_f64_lossy(),
                });
            }
            acc += w * fv;
        }
        Ok(acc)
    }

    /// Weighted sum of values already sampled at the nodes.
    pub fn integrate_values(&self, values: &[T]) -> Result<T> {
        if values.len() != self.order() {
            return Err(Error::Dimension {
                expected: self.order(),
                found: values.len(),
            });
        }
        let mut i = 0;
        self.integrate(|_| {
            let v = values[i];
            i += 1;
            v
        })
    }
}

/// Convenience wrapper matching the free-function form used elsewhere.
pub fn build_rule<T: Real>(domain: VelocityDomain<T>, order: usize) -> Result<QuadratureRule<T>> {
    QuadratureRule::new(domain, order)
}

type Reference = Arc<(Vec<f64>, Vec<f64>)>;

fn reference_rule(order: usize) -> Reference {
    static CACHE: OnceLock<Mutex<HashMap<usize, Reference>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(r) = cache.lock().expect("quadrature cache poisoned").get(&order) {
        return r.clone();
    }
    let r = Arc::new(legendre_nodes_weights(order));
    cache
        .lock()
        .expect("quadrature cache poisoned")
        .entry(order)
        .or_insert(r)
        .clone()
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Nodes ascending on `[-1, 1]` with their weights, by Newton iteration on `P_n`.
fn legendre_nodes_weights(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let half = n.div_ceil(2);
    for i in 0..half {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_with_derivative(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() <= 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // i-th largest root and its mirror.
        nodes[n - 1 - i] = x;
        nodes[i] = -x;
        weights[n - 1 - i] = w;
        weights[i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}
