use maxent::quadrature::*;
use proptest::prelude::*;

fn rule(a: f64, b: f64, order: usize) -> QuadratureRule<f64> {
    QuadratureRule::new(VelocityDomain::new(a, b).unwrap(), order).unwrap()
}

fn smooth(u: f64) -> f64 {
    (-u * u / 2.0).exp() * (1.0 + 0.3 * u.sin())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn monomials_integrated_exactly(order in 1usize..40, a in -3.0f64..0.0, w in 0.1f64..4.0, frac in 0.0f64..1.0) {
        let b = a + w;
        let r = rule(a, b, order);
        let d = ((2 * order - 1) as f64 * frac).round() as i32;
        let exact = (b.powi(d + 1) - a.powi(d + 1)) / (d + 1) as f64;
        // Scale of ∫|v|^d, so cancelling odd monomials are judged against their magnitude.
        let scale = (b.abs().max(a.abs())).powi(d) * w;
        let got = r.integrate(|v| v.powi(d)).unwrap();
        prop_assert!((got - exact).abs() <= 1e-10 * scale.max(exact.abs()), "d={} got {} exact {}", d, got, exact);
    }

    #[test]
    fn affine_change_of_variables(alpha in 0.2f64..3.0, beta in -2.0f64..2.0, a in -4.0f64..0.0, w in 0.5f64..6.0) {
        let b = a + w;
        let lhs = rule(a, b, 64).integrate(|v| smooth(alpha * v + beta)).unwrap();
        let rhs = rule(alpha * a + beta, alpha * b + beta, 64).integrate(smooth).unwrap() / alpha;
        prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1e-300), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn doubling_order_converged(order in 48usize..96, shift in -1.0f64..1.0) {
        let f = |v: f64| smooth(v - shift);
        let r1 = rule(-10.0, 10.0, order).integrate(f).unwrap();
        let r2 = rule(-10.0, 10.0, 2 * order).integrate(f).unwrap();
        prop_assert!((r1 - r2).abs() <= 1e-8 * r2.abs());
    }
}
