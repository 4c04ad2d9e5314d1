//! Moment closure through a trained GP: standardize raw moments, predict the
//! multipliers, rebuild the density and report how well it reproduces the input.

use std::sync::Arc;

use serde::Serialize;

use crate::datagen::strictly_inside_default_moment_box;
use crate::error::{Error, Result};
use crate::gp::GpModel;
use crate::med::{rescale_multipliers, standardize_raw_moments, LagrangeVector, MaxEntDensity, MomentVector};
use crate::quadrature::QuadratureRule;

/// Output of [`close_moments`]. The density lives in standardized coordinates
/// `u = (v − μ) / σ`.
#[derive(Debug, Clone)]
pub struct ClosureResult {
    pub density: MaxEntDensity<f64>,
    pub lambda_hat: LagrangeVector<f64>,
    pub posterior_variance: Vec<f64>,
    pub reconstructed_moments: MomentVector<f64>,
    pub standardized_input: MomentVector<f64>,
    pub mu: f64,
    pub sigma: f64,
    /// The standardized input lies outside the training moment box or on its boundary.
    pub out_of_box: bool,
}

/// Serializable summary of a closure.
#[derive(Debug, Clone, Serialize)]
pub struct ClosureSummary {
    pub lambda: Vec<f64>,
    pub variance: Vec<f64>,
    pub reconstructed_moments: Vec<f64>,
    pub standardized_moments: Vec<f64>,
    pub mu: f64,
    pub sigma: f64,
    pub out_of_box: bool,
}

impl ClosureResult {
    /// The closure density in the original coordinates, normalized on `rule`'s domain:
    /// multipliers of `f̂((v − μ)/σ)`.
    pub fn density_in_original_coordinates(&self, rule: Arc<QuadratureRule<f64>>) -> Result<MaxEntDensity<f64>> {
        let lambda = rescale_multipliers(&self.lambda_hat, -self.mu / self.sigma, 1.0 / self.sigma)?;
        MaxEntDensity::new(lambda, rule)
    }

    pub fn summary(&self) -> ClosureSummary {
        ClosureSummary {
            lambda: self.lambda_hat.values().to_vec(),
            variance: self.posterior_variance.clone(),
            reconstructed_moments: self.reconstructed_moments.values().to_vec(),
            standardized_moments: self.standardized_input.values().to_vec(),
            mu: self.mu,
            sigma: self.sigma,
            out_of_box: self.out_of_box,
        }
    }
}

/// Closes raw moments with `model`; `rule` must be the model's quadrature rule.
pub fn close_moments_with_rule(
    model: &GpModel,
    raw: &MomentVector<f64>,
    rule: &Arc<QuadratureRule<f64>>,
) -> Result<ClosureResult> {
    if raw.n_moments() != model.n_moments() {
        return Err(Error::Dimension {
            expected: model.n_moments(),
            found: raw.n_moments(),
        });
    }
    let (mu, sigma, p_hat) = standardize_raw_moments(raw)?;
    let out_of_box = !strictly_inside_default_moment_box(p_hat.values());
    if out_of_box {
        log::warn!("standardized moments {:?} lie outside the training box", p_hat.values());
    }
    let prediction = model.predict(&p_hat)?;
    let lambda_hat = LagrangeVector::new(prediction.mean)?;
    let density = MaxEntDensity::new(lambda_hat.clone(), rule.clone())?;
    let reconstructed_moments = density.moments(model.n_moments())?;
    Ok(ClosureResult {
        density,
        lambda_hat,
        posterior_variance: prediction.variance,
        reconstructed_moments,
        standardized_input: p_hat,
        mu,
        sigma,
        out_of_box,
    })
}

/// Closes raw moments with `model` using its own quadrature settings.
pub fn close_moments(model: &GpModel, raw: &MomentVector<f64>) -> Result<ClosureResult> {
    close_moments_with_rule(model, raw, &Arc::new(model.rule()?))
}

/// `‖λ̂ − λ^ex‖₂ / ‖λ^ex‖₂`.
pub fn lambda_relative_error(lambda_hat: &[f64], lambda_ex: &[f64]) -> Result<f64> {
    if lambda_hat.len() != lambda_ex.len() {
        return Err(Error::Dimension {
            expected: lambda_ex.len(),
            found: lambda_hat.len(),
        });
    }
    let norm = lambda_ex.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let diff = lambda_hat
        .iter()
        .zip(lambda_ex)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(diff / norm)
}

/// Mean of `|p̂_k − p_k| / max(|p_k|, 1)` over `k = 3..N`.
pub fn moment_relative_error(p_hat: &[f64], p_ref: &[f64]) -> f64 {
    let terms: Vec<f64> = p_hat
        .iter()
        .zip(p_ref)
        .skip(2)
        .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
        .collect();
    if terms.is_empty() {
        0.0
    } else {
        terms.iter().sum::<f64>() / terms.len() as f64
    }
}
