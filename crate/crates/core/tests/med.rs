use maxent::med::*;
use maxent::quadrature::*;
use maxent::Error;
use std::sync::Arc;

fn rule() -> Arc<QuadratureRule<f64>> {
    Arc::new(QuadratureRule::new(VelocityDomain::default(), DEFAULT_ORDER).unwrap())
}

fn lam(v: &[f64]) -> LagrangeVector<f64> {
    LagrangeVector::new(v.to_vec()).unwrap()
}

fn mom(v: &[f64]) -> MomentVector<f64> {
    MomentVector::new(v.to_vec()).unwrap()
}

#[test]
fn standard_normal_peak() {
    let d = MaxEntDensity::new(lam(&[0.0, 0.5, 0.0, 0.0]), rule()).unwrap();
    assert!((d.value(0.0).unwrap() - 0.398_942_280_401_432_7).abs() < 1e-6);
}

#[test]
fn zero_multipliers_are_uniform() {
    let d = MaxEntDensity::new(LagrangeVector::zeros(4), rule()).unwrap();
    for v in [-10.0, -3.3, 0.0, 7.5, 10.0] {
        assert!((d.value(v).unwrap() - 0.05).abs() < 1e-14);
    }
    let p = d.moments(4).unwrap();
    let expect = [0.0, 100.0 / 3.0, 0.0, 2000.0];
    for (a, b) in p.values().iter().zip(expect) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
}

#[test]
fn asymmetric_ratio() {
    let d = MaxEntDensity::new(lam(&[1.0, 0.5, 0.0, 0.0]), rule()).unwrap();
    let ratio = d.value(-1.0).unwrap() / d.value(1.0).unwrap();
    assert!((ratio / std::f64::consts::E.powi(2) - 1.0).abs() < 1e-12);
}

#[test]
fn value_outside_domain_rejected() {
    let d = MaxEntDensity::new(lam(&[0.0, 0.5]), rule()).unwrap();
    assert!(d.value(10.5).is_err());
}

#[test]
fn saturation_detected() {
    // A spike K (v - c)² narrower than the node spacing, centred between two
    // nodes: the quadrature normalizer misses it and f(c) overflows.
    let r = rule();
    let c = 0.5 * (r.nodes()[31] + r.nodes()[32]) + 0.5 * (r.nodes()[32] - r.nodes()[31]) / 2.0;
    let k = 1e6;
    let d = MaxEntDensity::new(lam(&[-2.0 * k * c, k]), r).unwrap();
    assert!(matches!(d.value(c), Err(Error::Saturation { .. })));
}

#[test]
fn gaussian_moments_and_mass() {
    let d = MaxEntDensity::new(lam(&[0.0, 0.5, 0.0, 0.0]), rule()).unwrap();
    let p = d.moments(4).unwrap();
    for (a, b) in p.values().iter().zip([0.0, 1.0, 0.0, 3.0]) {
        assert!((a - b).abs() < 1e-8);
    }
    assert!(p.is_standardized());
    assert!((d.total_mass().unwrap() - 1.0).abs() < 1e-10);
}

#[test]
fn dual_values() {
    let r = rule();
    let d0 = dual_objective(&LagrangeVector::zeros(4), &mom(&[0.0, 1.0, 0.0, 3.0]), &r).unwrap();
    assert!((d0 - 20f64.ln()).abs() < 1e-10);
    let d = dual_objective(&lam(&[0.0, 0.5, 0.0, 0.0]), &mom(&[0.0, 1.0, 0.0, 3.0]), &r).unwrap();
    let expect = (2.0 * std::f64::consts::PI).sqrt().ln() + 0.5;
    assert!((d - expect).abs() < 1e-6);
}

#[test]
fn gradient_examples() {
    let r = rule();
    let l = lam(&[0.0, 0.5, 0.0, 0.0]);
    let g = dual_gradient(&l, &mom(&[0.0, 1.0, 0.0, 3.0]), &r).unwrap();
    assert!(g.iter().all(|x| x.abs() < 1e-8));
    let g = dual_gradient(&l, &mom(&[0.1, 1.0, 0.0, 3.0]), &r).unwrap();
    assert!((g[0] - 0.1).abs() < 1e-8 && g[1..].iter().all(|x| x.abs() < 1e-8));
}

#[test]
fn hessian_gaussian_entries() {
    let h = dual_hessian(&lam(&[0.0, 0.5, 0.0, 0.0]), &rule()).unwrap();
    assert!((h[(0, 0)] - 1.0).abs() < 1e-6);
    assert!((h[(0, 2)] - 3.0).abs() < 1e-6);
    // Var(v²) = 3 - 1, Var(v⁴) = 105 - 9
    assert!((h[(1, 1)] - 2.0).abs() < 1e-6);
    assert!((h[(3, 3)] - 96.0).abs() < 1e-6);
    assert_eq!(h, h.transpose());
}

#[test]
fn dimension_mismatch() {
    let r = rule();
    assert!(matches!(
        dual_objective(&lam(&[0.0, 0.5]), &mom(&[0.0, 1.0, 0.0, 3.0]), &r),
        Err(Error::Dimension { expected: 4, found: 2 })
    ));
}

#[test]
fn newton_recovers_standard_normal() {
    let sol = newton_solve(&mom(&[0.0, 1.0, 0.0, 3.0]), &rule(), &SolverOptions::default(), 1).unwrap();
    for (a, b) in sol.lambda.values().iter().zip([0.0, 0.5, 0.0, 0.0]) {
        assert!((a - b).abs() < 1e-6, "{:?}", sol.lambda);
    }
    assert!(sol.gradient_norm <= 1e-10);
    assert!(sol.iterations <= 30, "{} iterations", sol.iterations);
}

#[test]
fn newton_errors() {
    let r = rule();
    let opts = SolverOptions {
        max_iters: 1,
        ..SolverOptions::default()
    };
    assert!(matches!(
        newton_solve(&mom(&[0.3, 1.2, 0.1, 3.5]), &r, &opts, 3),
        Err(Error::NonConvergence { iterations: 1, .. })
    ));
    let bad = SolverOptions {
        armijo_s: 1.5,
        ..SolverOptions::default()
    };
    assert!(newton_solve(&mom(&[0.0, 1.0, 0.0, 3.0]), &r, &bad, 3).is_err());
}

#[test]
fn newton_stalls_on_unrealizable_moments() {
    // p_4 < p_2² has no density at all.
    let r = rule();
    let res = newton_solve(&mom(&[0.0, 1.0, 0.0, 0.5]), &r, &SolverOptions::default(), 5);
    assert!(res.is_err());
}

#[test]
fn rescale_identity_and_gaussian_completion() {
    let l = lam(&[0.3, -0.2, 0.7, 0.1]);
    assert_eq!(rescale_multipliers(&l, 0.0, 1.0).unwrap(), l);

    let (l1, l2) = (0.8_f64, 2.5_f64);
    let mu = -l1 / (2.0 * l2);
    let sigma = (1.0 / (2.0 * l2)).sqrt();
    let out = rescale_multipliers(&lam(&[l1, l2]), mu, sigma).unwrap();
    assert!(out.values()[0].abs() < 1e-15);
    assert!((out.values()[1] - 0.5).abs() < 1e-15);

    let (s, m) = (1.7, -0.4);
    let out = rescale_multipliers(&lam(&[l1, l2]), m, s).unwrap();
    assert!((out.values()[0] - (s * l1 + 2.0 * s * m * l2)).abs() < 1e-14);
    assert!((out.values()[1] - s * s * l2).abs() < 1e-14);
    assert!(rescale_multipliers(&l, 0.0, 0.0).is_err());
}

#[test]
fn kl_examples() {
    let r = rule();
    let d = MaxEntDensity::new(lam(&[0.0, 0.5, 0.0, 0.0]), r.clone()).unwrap();
    let same = kl_divergence(|v| d.log_density(v).exp(), &d, &r).unwrap();
    assert!(same.abs() < 1e-12);
    let n01 = |v: f64| (-v * v / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    assert!(kl_divergence(n01, &d, &r).unwrap().abs() < 1e-8);
    let shifted = |v: f64| n01(v - 0.1);
    assert!((kl_divergence(shifted, &d, &r).unwrap() - 0.005).abs() < 1e-6);
    assert!(kl_divergence(|_| -1.0, &d, &r).is_err());
}

#[test]
fn standardize_examples() {
    let p = mom(&[0.0, 1.0, 0.2, 2.9]);
    let (mu, sigma, s) = standardize_raw_moments(&p).unwrap();
    assert_eq!((mu, sigma), (0.0, 1.0));
    assert_eq!(s, p);

    // N(2, 9): E v = 2, E v² = 13, E v³ = 8 + 3·2·9 = 62, E v⁴ = 16 + 6·4·9 + 3·81 = 475
    let (mu, sigma, s) = standardize_raw_moments(&mom(&[2.0, 13.0, 62.0, 475.0])).unwrap();
    assert!((mu - 2.0).abs() < 1e-14 && (sigma - 3.0).abs() < 1e-14);
    for (a, b) in s.values().iter().zip([0.0, 1.0, 0.0, 3.0]) {
        assert!((a - b).abs() < 1e-12, "{:?}", s);
    }

    let (sk, ku) = (0.4, 2.2);
    let (_, sigma, s) = standardize_raw_moments(&mom(&[0.0, 4.0, 8.0 * sk, 16.0 * ku])).unwrap();
    assert_eq!(sigma, 2.0);
    assert!((s.get(3) - sk).abs() < 1e-15 && (s.get(4) - ku).abs() < 1e-15);
    assert!(s.is_standardized());

    assert!(matches!(
        standardize_raw_moments(&mom(&[2.0, 4.0, 0.0, 1.0])),
        Err(Error::DegenerateMoments { .. })
    ));
}

#[test]
fn moment_vector_validation() {
    assert!(MomentVector::new(vec![0.0, -1.0]).is_err());
    assert!(MomentVector::new(vec![0.0, 1.0, f64::NAN]).is_err());
    assert!(!mom(&[0.5, 1.0]).is_standardized());
    assert!(LagrangeVector::new(vec![f64::INFINITY]).is_err());
}

#[test]
fn single_precision_solve() {
    let r = QuadratureRule::<f32>::new(VelocityDomain::default(), 64).unwrap();
    let p = MomentVector::new(vec![0.0f32, 1.0, 0.0, 3.0]).unwrap();
    let opts = SolverOptions {
        tol: 1e-4,
        ..SolverOptions::default()
    };
    let sol = newton_solve(&p, &r, &opts, 2).unwrap();
    assert!((sol.lambda.values()[1] - 0.5).abs() < 1e-3, "{:?}", sol.lambda);
}
