use std::sync::{Arc, OnceLock};

use maxent::closure::*;
use maxent::datagen::{default_rule, generate_dataset, Dataset, SamplingSpec};
use maxent::experiments::{equilibrium_multipliers, held_out_errors, newton_reference, BiModalParams};
use maxent::gp::{train_model, FitOptions, GpModel, KernelFamily};
use maxent::med::{MaxEntDensity, MomentVector};
use maxent::quadrature::{QuadratureRule, VelocityDomain};
use maxent::scalar::binomial;
use maxent::Error;
use proptest::prelude::*;

fn model() -> &'static (GpModel, Dataset) {
    static MODEL: OnceLock<(GpModel, Dataset)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let ds = generate_dataset(150, &SamplingSpec::new(4), &default_rule(), 101).unwrap();
        let opts = FitOptions { n_starts: 2, seed: 1, ..FitOptions::default() };
        (train_model(&ds, KernelFamily::Rbf, &opts).unwrap(), ds)
    })
}

/// Raw moments of `aX + b` from those of `X`.
fn affine_moments(raw: &[f64], a: f64, b: f64) -> Vec<f64> {
    let m = |j: usize| if j == 0 { 1.0 } else { raw[j - 1] };
    (1..=raw.len())
        .map(|k| (0..=k).map(|j| binomial::<f64>(k, j) * a.powi(j as i32) * b.powi((k - j) as i32) * m(j)).sum())
        .collect()
}

#[test]
fn lambda_error_examples() {
    let ex = [0.3, -1.2, 0.05, 0.7];
    assert_eq!(lambda_relative_error(&ex, &ex).unwrap(), 0.0);
    let doubled: Vec<f64> = ex.iter().map(|x| 2.0 * x).collect();
    assert!((lambda_relative_error(&doubled, &ex).unwrap() - 1.0).abs() < 1e-15);
    let norm = ex.iter().map(|x| x * x).sum::<f64>().sqrt();
    let shifted: Vec<f64> = ex.iter().map(|x| x + norm / 2.0).collect();
    assert!((lambda_relative_error(&shifted, &ex).unwrap() - 1.0).abs() < 1e-12);
    assert!(matches!(lambda_relative_error(&ex, &[0.0; 4]), Err(Error::ZeroNorm)));
    assert!(matches!(lambda_relative_error(&ex[..3], &ex), Err(Error::Dimension { .. })));
}

#[test]
fn moment_error_examples() {
    let p = [0.0, 1.0, 0.2, 3.0];
    assert_eq!(moment_relative_error(&p, &p), 0.0);
    let bumped = [0.0, 1.0, 0.2, 3.1];
    assert!((moment_relative_error(&bumped, &p) - 0.1 / 3.0 / 2.0).abs() < 1e-12);
    assert!((moment_relative_error(&bumped, &p) - 0.01667).abs() < 1e-5);
    let moved = [0.4, 1.7, 0.2, 3.1];
    assert_eq!(moment_relative_error(&moved, &p), moment_relative_error(&bumped, &p));
}

#[test]
fn equilibrium_input_recovers_gaussian_multipliers() {
    let (model, _) = model();
    let rule = default_rule();
    let raw = MaxEntDensity::new(equilibrium_multipliers(4), rule.clone()).unwrap().moments(4).unwrap();
    let res = close_moments(model, &raw).unwrap();
    let (newton, _) = newton_reference(&res.standardized_input, &rule, 0).unwrap();
    let err = lambda_relative_error(res.lambda_hat.values(), newton.values()).unwrap();
    let test = generate_dataset(100, &SamplingSpec::new(4), &rule, 202).unwrap();
    let held_out = held_out_errors(model, &test).unwrap();
    let avg = held_out.iter().sum::<f64>() / held_out.len() as f64;
    assert!(err < avg, "equilibrium error {err} vs held-out average {avg}");
    assert!(!res.out_of_box);
}

#[test]
fn training_points_are_reconstructed() {
    // Near-noiseless fit: the posterior mean interpolates, so the moments come back.
    let ds = generate_dataset(150, &SamplingSpec::new(4), &default_rule(), 101).unwrap();
    let opts = FitOptions { n_starts: 1, seed: 1, jitter_rel: 1e-14, ..FitOptions::default() };
    let tight = train_model(&ds, KernelFamily::Rbf, &opts).unwrap();
    // Residual round-off in the factor of a near-singular Gram matrix leaves a few 1e-6.
    for pr in &ds.pairs[..10] {
        let res = close_moments(&tight, &pr.p).unwrap();
        assert!(res.reconstructed_moments.max_abs_diff(&pr.p) <= 1e-5, "{:?} vs {:?}", res.reconstructed_moments, pr.p);
        assert!((res.mu).abs() < 1e-9 && (res.sigma - 1.0).abs() < 1e-9);
    }
    // The default nugget trades exact interpolation for smoother fits.
    let (model, ds) = model();
    for pr in &ds.pairs[..10] {
        let res = close_moments(model, &pr.p).unwrap();
        assert!(res.reconstructed_moments.max_abs_diff(&pr.p) <= 1e-2);
    }
}

#[test]
fn result_is_deterministic_and_self_consistent() {
    let (model, _) = model();
    let raw = MomentVector::new(BiModalParams::new(0.8, 0.3).unwrap().exact_moments(4)).unwrap();
    let a = close_moments(model, &raw).unwrap();
    let b = close_moments(model, &raw).unwrap();
    assert_eq!(a.lambda_hat, b.lambda_hat);
    assert_eq!(a.posterior_variance, b.posterior_variance);
    assert_eq!(a.reconstructed_moments, b.reconstructed_moments);
    assert_eq!((a.mu, a.sigma), (b.mu, b.sigma));
    let again = a.density.moments(4).unwrap();
    assert!(again.max_abs_diff(&a.reconstructed_moments) <= 1e-10);
    let s = a.summary();
    assert_eq!(s.lambda, a.lambda_hat.values());
}

#[test]
fn closure_rejects_bad_inputs() {
    let (model, _) = model();
    let short = MomentVector::new(vec![0.0, 1.0, 0.0]).unwrap();
    assert!(matches!(close_moments(model, &short), Err(Error::Dimension { expected: 4, found: 3 })));
    let degenerate = MomentVector::new(vec![1.0, 1.0, 1.0, 1.0]).unwrap();
    assert!(close_moments(model, &degenerate).is_err());
}

#[test]
fn far_inputs_are_flagged_not_rejected() {
    let (model, _) = model();
    let raw = MomentVector::new(vec![0.0, 1.0, 0.0, 9.0]).unwrap();
    let res = close_moments(model, &raw).unwrap();
    assert!(res.out_of_box);
    assert!(res.posterior_variance.iter().all(|v| v.is_finite()));
}

#[test]
fn original_coordinate_density_has_input_mean_and_variance() {
    let (model, ds) = model();
    let base = ds.pairs[3].p.values();
    let raw = MomentVector::new(affine_moments(base, 0.5, 0.25)).unwrap();
    let res = close_moments(model, &raw).unwrap();
    assert!((res.mu - 0.25).abs() < 1e-12 && (res.sigma - 0.5).abs() < 1e-12);
    // σ = 1/2 halves the node density per unit width, so refine the rule.
    let fine = Arc::new(QuadratureRule::new(VelocityDomain::default(), 256).unwrap());
    let f = res.density_in_original_coordinates(fine).unwrap();
    let (m, s) = f.mean_std().unwrap();
    let (m0, s0) = res.density.mean_std().unwrap();
    assert!((m - (0.25 + 0.5 * m0)).abs() < 1e-9 && (s - 0.5 * s0).abs() < 1e-9, "{m} {s}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shift_scale_equivariance(idx in 0usize..150, a in 0.2f64..3.0, b in -2.0f64..2.0) {
        let (model, ds) = model();
        let x = ds.pairs[idx].p.values();
        let base = close_moments(model, &ds.pairs[idx].p).unwrap();
        let moved = close_moments(model, &MomentVector::new(affine_moments(x, a, b)).unwrap()).unwrap();
        for (u, v) in base.lambda_hat.values().iter().zip(moved.lambda_hat.values()) {
            prop_assert!((u - v).abs() <= 1e-10 * u.abs().max(1.0), "{:?} vs {:?}", base.lambda_hat, moved.lambda_hat);
        }
        prop_assert!((moved.mu - (a * base.mu + b)).abs() <= 1e-10 * (a + b.abs()).max(1.0));
        prop_assert!((moved.sigma - a * base.sigma).abs() <= 1e-10 * a);
    }
}

#[test]
fn affine_moment_helper_matches_closed_form() {
    // N(0,1) moments (0, 1, 0, 3) mapped by 2X + 1: N(1, 4) has moments (1, 5, 13, 73).
    let got = affine_moments(&[0.0, 1.0, 0.0, 3.0], 2.0, 1.0);
    assert_eq!(got, vec![1.0, 5.0, 13.0, 73.0]);
}
