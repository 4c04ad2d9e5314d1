use std::f64::consts::PI;
use std::sync::OnceLock;

use maxent::datagen::{default_rule, generate_dataset, Dataset, SamplingSpec};
use maxent::experiments::*;
use maxent::gp::{train_model, FitOptions, GpModel, KernelFamily};
use maxent::quadrature::{QuadratureRule, VelocityDomain};
use proptest::prelude::*;

fn gauss(v: f64) -> f64 {
    (-0.5 * v * v).exp() / (2.0 * PI).sqrt()
}

fn quad_moments(rule: &QuadratureRule<f64>, f: impl Fn(f64) -> f64, n: usize) -> Vec<f64> {
    (1..=n).map(|k| rule.integrate(|v| f(v) * v.powi(k as i32)).unwrap()).collect()
}

fn model4() -> &'static (GpModel, Dataset) {
    static MODEL: OnceLock<(GpModel, Dataset)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let ds = generate_dataset(120, &SamplingSpec::new(4), &default_rule(), 7).unwrap();
        let opts = FitOptions { n_starts: 1, seed: 7, ..FitOptions::default() };
        (train_model(&ds, KernelFamily::Rbf, &opts).unwrap(), ds)
    })
}

/// Moments of `exp(−Σ λ_j v^j)` normalized on the rule, computed directly.
fn requadrature(rule: &QuadratureRule<f64>, lambda: &[f64]) -> Vec<f64> {
    let f = |v: f64| (-lambda.iter().enumerate().map(|(j, l)| l * v.powi(j as i32 + 1)).sum::<f64>()).exp();
    let z = rule.integrate(f).unwrap();
    quad_moments(rule, |v| f(v) / z, lambda.len())
}

#[test]
fn bimodal_case_a_construction() {
    let case = BiModalParams::new(0.8, 0.3).unwrap();
    assert!((case.sigma2() - 0.63f64.sqrt()).abs() < 1e-15);
    assert!((case.sigma2() - 0.79373).abs() < 1e-5);
    assert_eq!(case.mu2(), -0.8);
    // The narrow mode needs more nodes than the default rule has.
    let fine = QuadratureRule::new(VelocityDomain::default(), 256).unwrap();
    let m = quad_moments(&fine, |v| bimodal_density(&case, v), 3);
    assert!(m[0].abs() < 1e-10 && (m[1] - 1.0).abs() < 1e-10, "{m:?}");
    // ½Σ(μ³ + 3μσ²) over the two modes.
    let oracle: f64 = 0.5 * ((0.512 + 3.0 * 0.8 * 0.09) + (-0.512 - 3.0 * 0.8 * 0.63));
    assert!((oracle + 0.648).abs() < 1e-12);
    assert!((m[2] - oracle).abs() < 1e-9, "{}", m[2]);
    assert!((case.exact_moments(3)[2] - oracle).abs() < 1e-12);
    assert_eq!(case.label(), "(0.8, 0.3)");
}

#[test]
fn degenerate_bimodal_is_standard_normal() {
    let case = BiModalParams::new(0.0, 1.0).unwrap();
    assert_eq!(case.sigma2(), 1.0);
    for i in 0..50 {
        let v = -5.0 + 0.2 * i as f64;
        assert!((case.density(v) - gauss(v)).abs() < 1e-15);
    }
    assert!(BiModalParams::new(1.0, 0.1).is_err());
    assert!(BiModalParams::new(0.5, 0.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bimodal_mixture_has_zero_mean_unit_variance(mu1 in -0.99f64..0.99, frac in 0.01f64..0.99) {
        let sigma1 = frac * (2.0 - 2.0 * mu1 * mu1).sqrt();
        let case = BiModalParams::new(mu1, sigma1).unwrap();
        let m = case.exact_moments(2);
        prop_assert!(m[0].abs() <= 1e-12 && (m[1] - 1.0).abs() <= 1e-12, "{:?}", m);
    }
}

#[test]
fn bgk_moments_at_both_ends_and_midway() {
    let rule = default_rule();
    let spec = BgkSpec::default();
    spec.validate().unwrap();
    let p0 = quad_moments(&rule, |v| spec.initial.density(v), 6);
    let at0 = bgk_exact_moments(&spec, 0.0, &rule, 6).unwrap();
    for (a, b) in at0.values().iter().zip(&p0) {
        assert!((a - b).abs() < 1e-14);
    }
    let late = bgk_exact_moments(&spec, 1e6, &rule, 6).unwrap();
    for (a, b) in late.values().iter().zip([0.0, 1.0, 0.0, 3.0, 0.0, 15.0]) {
        assert!((a - b).abs() < 1e-10, "{:?}", late.values());
    }
    for t in [3.0, 8.0] {
        let direct = quad_moments(&rule, |v| spec.exact_density(t, v, &rule), 6);
        let closed = bgk_exact_moments(&spec, t, &rule, 6).unwrap();
        for (a, b) in closed.values().iter().zip(&direct) {
            assert!((a - b).abs() < 1e-10, "t={t}: {a} vs {b}");
        }
    }
    let e = (-0.75f64).exp();
    let at3 = bgk_exact_moments(&spec, 3.0, &rule, 4).unwrap();
    let eq = [0.0, 1.0, 0.0, 3.0];
    for k in 0..4 {
        assert!((at3.values()[k] - ((1.0 - e) * eq[k] + e * p0[k])).abs() < 1e-10);
    }
    assert!(bgk_exact_moments(&spec, -1.0, &rule, 4).is_err());
    let bad = BgkSpec { times: vec![3.0, 1.0], ..BgkSpec::default() };
    assert!(bad.validate().is_err());
}

#[test]
fn bkw_density_contract() {
    let rule = default_rule();
    let t_min = bkw_min_time();
    assert!((t_min - 6.0 * 2.5f64.ln()).abs() < 1e-15 && (t_min - 5.4977).abs() < 1e-4);
    assert!((bkw_k(t_min) - 0.6).abs() < 1e-15);
    assert!(bkw_density(t_min, 0.0, &rule).unwrap().abs() < 1e-15);
    for t in [t_min, 5.8, 6.5, 7.5, 8.5, 20.0] {
        let d = BkwDensity::new(t, &rule).unwrap();
        assert!((rule.integrate(|v| d.value(v)).unwrap() - 1.0).abs() < 1e-10);
        assert!(rule.nodes().iter().all(|&v| d.value(v) >= 0.0));
    }
    let z = rule.integrate(gauss).unwrap();
    let eq = BkwDensity::new(1e6, &rule).unwrap();
    for i in 0..=40 {
        let v = -10.0 + 0.5 * i as f64;
        assert!((eq.value(v) - gauss(v) / z).abs() < 1e-8);
    }
    assert!(bkw_density(5.0, 0.0, &rule).is_err());
}

#[test]
fn bkw_moment_paths() {
    let rule = default_rule();
    for t in [5.8, 7.5, 1e6] {
        assert_eq!(bkw_closed_form_moment(t, 0), 1.0);
        assert_eq!(bkw_closed_form_moment(t, 3), 0.0);
        let (closed, quad) = bkw_moments(t, 6, &rule).unwrap();
        assert!(quad.values()[0].abs() < 1e-10 && quad.values()[2].abs() < 1e-10 && quad.values()[4].abs() < 1e-10);
        assert_eq!(closed.values()[1], 1.0);
    }
    let (closed, quad) = bkw_moments(1e6, 4, &rule).unwrap();
    assert!((quad.values()[3] - 3.0).abs() < 1e-8, "{:?}", quad.values());
    // 9!/(2⁴·4!) / (5!/(2²·2!))² = 945/225 at K = 1.
    assert!((closed.values()[3] - 945.0 / 225.0).abs() < 1e-12);
    assert_eq!(bkw_closed_form_raw(1e6, 4), vec![0.0, 15.0, 0.0, 945.0]);
}

#[test]
fn scan_points_follow_family_formulas() {
    let d_spec = RealizabilityScanSpec::paper(ScanFamily::D);
    for &d in &d_spec.d_values {
        let pts = d_spec.points(d);
        assert_eq!(pts.len(), 100);
        for p in &pts {
            assert_eq!((p[0], p[1]), (0.0, 1.0));
            assert!((p[3] - p[2] * p[2] - 1.0 - d).abs() < 1e-15);
        }
        assert!((pts[99][2] - 0.5).abs() < 1e-15);
    }
    let u = RealizabilityScanSpec::paper(ScanFamily::U);
    assert_eq!(u.points(0.0).len(), 200);
    assert!(u.points(0.0).iter().all(|p| p[3] == 4.0 && p[2].abs() <= 0.1 + 1e-15));
    let s = RealizabilityScanSpec::paper(ScanFamily::S);
    for &d in &s.d_values {
        for p in s.points(d) {
            assert!(p[2].abs() <= 1.0 / (10.0 * d * d) + 1e-15);
            assert!((3.0..=4.0 + 1e-12).contains(&p[3]), "{p:?}");
        }
    }
}

#[test]
fn bimodal_report_metrics() {
    let (model, _) = model4();
    let rule = default_rule();
    let cases = [BiModalParams::paper_cases(), vec![BiModalParams::new(0.0, 1.0).unwrap()]].concat();
    let report = run_bimodal(&[model], &cases).unwrap();
    assert_eq!(report.records.len(), 4);
    for r in &report.records {
        let back = requadrature(&rule, &r.lambda_hat);
        for (a, b) in back.iter().zip(&r.reconstructed_moments) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(r.kl.is_finite() && r.kl >= -1e-12);
        assert_eq!(r.grid.len(), GRID_POINTS);
    }
    let eq = &report.records[3];
    assert!(eq.kl < 1e-3 && eq.baseline_kl < 1e-12, "{} {}", eq.kl, eq.baseline_kl);
    let again = run_bimodal(&[model], &cases).unwrap();
    for (a, b) in report.records.iter().zip(&again.records) {
        assert_eq!((a.kl, &a.lambda_hat, a.lambda_rel_error), (b.kl, &b.lambda_hat, b.lambda_rel_error));
    }
}

#[test]
fn noisy_bimodal_reduces_and_reproduces() {
    let (model, _) = model4();
    let cases = BiModalParams::paper_cases();
    let clean = run_bimodal(&[model], &cases).unwrap();
    let zero = run_noisy_bimodal(&[model], &cases, 0.0, 5).unwrap();
    for (a, b) in clean.records.iter().zip(&zero.records) {
        assert_eq!(a.raw_moments, b.raw_moments);
        assert_eq!(a.lambda_hat, b.lambda_hat);
        assert_eq!(a.kl, b.kl);
        assert_eq!(a.moment_rel_error, b.moment_rel_error);
    }
    assert!(zero.clamped_nodes.iter().all(|&c| c == 0));
    let a = run_noisy_bimodal(&[model], &cases, 0.1, 11).unwrap();
    let b = run_noisy_bimodal(&[model], &cases, 0.1, 11).unwrap();
    let c = run_noisy_bimodal(&[model], &cases, 0.1, 12).unwrap();
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!((x.kl, &x.raw_moments), (y.kl, &y.raw_moments));
    }
    assert_ne!(a.records[0].raw_moments, c.records[0].raw_moments);
    assert!(run_noisy_bimodal(&[model], &cases, -0.1, 1).is_err());
}

#[test]
fn noisy_moments_are_unbiased() {
    // E[f(1 + ε)] = f, and ε < −1 is a 10σ event, so clamping adds no visible bias.
    let (model, _) = model4();
    let cases = BiModalParams::paper_cases();
    let clean = run_bimodal(&[model], &cases).unwrap();
    let draws: Vec<Vec<Vec<f64>>> = (0..64)
        .map(|seed| {
            let r = run_noisy_bimodal(&[model], &cases, 0.1, seed).unwrap();
            r.records.iter().map(|rec| rec.raw_moments.clone()).collect()
        })
        .collect();
    for (c, rec) in clean.records.iter().enumerate() {
        for k in 0..4 {
            let xs: Vec<f64> = draws.iter().map(|d| d[c][k]).collect();
            let (mean, var) = mean_and_variance(&xs);
            let se = (var / 63.0).sqrt();
            assert!((mean - rec.raw_moments[k]).abs() <= 4.0 * se, "case {c} p{}: {mean} vs {} (se {se})", k + 1, rec.raw_moments[k]);
        }
    }
}

#[test]
fn relaxation_reports() {
    let (model, _) = model4();
    let bgk = run_bgk(&[model], &BgkSpec::default()).unwrap();
    assert_eq!(bgk.records.len(), 4);
    let late = bgk.records.last().unwrap();
    assert!(late.kl < late.baseline_kl + 1e-3);
    let bkw = run_bkw(&[model], &BkwSpec::default()).unwrap();
    assert_eq!(bkw.diagnostics.len(), 4);
    assert!(bkw.diagnostics.iter().all(|d| d["p4_discrepancy"].as_f64().unwrap() > 0.0));
    assert!(run_bkw(&[model], &BkwSpec { times: vec![5.0] }).is_err());

    let dir = tempfile::tempdir().unwrap();
    let written = write_report(dir.path(), &bgk).unwrap();
    let names: Vec<String> = written.iter().map(|p| p.file_name().unwrap().to_string_lossy().into()).collect();
    assert_eq!(names, ["bgk.json", "bgk_summary.csv", "bgk_densities.csv", "bgk_moments.csv"]);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&written[0]).unwrap()).unwrap();
    assert_eq!(json["records"].as_array().unwrap().len(), 4);
    let summary = std::fs::read_to_string(&written[1]).unwrap();
    assert_eq!(summary.lines().count(), 5);
    assert!(summary.starts_with("time,n_moments,m_train,kl"));
}

#[test]
fn csv_fields_are_quoted() {
    let (model, _) = model4();
    let report = run_bimodal(&[model], &BiModalParams::paper_cases()).unwrap();
    let summary = report.tables().into_iter().find(|t| t.name == "summary").unwrap();
    let csv = summary.to_csv();
    let row = csv.lines().nth(1).unwrap();
    assert!(row.starts_with("\"(0.8, 0.3)\",4,120,"), "{row}");
    assert_eq!(
        Table { name: "t".into(), columns: vec!["a".into()], rows: vec![vec!["x\"y".into()]] }.to_csv(),
        "a\n\"x\"\"y\"\n"
    );
}

#[test]
fn realizability_scan_is_deterministic() {
    let (model, _) = model4();
    let spec = RealizabilityScanSpec { n_test: 10, ..RealizabilityScanSpec::paper(ScanFamily::U) };
    let a = realizability_scan(&[model], &spec, 3).unwrap();
    let b = realizability_scan(&[model], &spec, 3).unwrap();
    assert_eq!(a.cells.len(), 3);
    assert_eq!(a.points.len(), 30);
    for (x, y) in a.cells.iter().zip(&b.cells) {
        assert_eq!(x.mean_moment_rel_error, y.mean_moment_rel_error);
        assert_eq!(x.mean_variance, y.mean_variance);
        assert_eq!(x.n_points, 10);
    }
    assert!(a.points.iter().filter(|p| p.d == 0.0).all(|p| p.out_of_box));
}

#[test]
fn kernel_comparison_is_reproducible() {
    let rule = default_rule();
    let train = generate_dataset(40, &SamplingSpec::new(6), &rule, 1).unwrap();
    let test = generate_dataset(50, &SamplingSpec::new(6), &rule, 2).unwrap();
    let opts = FitOptions { n_starts: 1, max_iters: 50, seed: 1, ..FitOptions::default() };
    let fams = [KernelFamily::Rbf, KernelFamily::Matern12];
    let a = kernel_comparison(&train, &test, &fams, &[20, 40], &opts).unwrap();
    let b = kernel_comparison(&train, &test, &fams, &[20, 40], &opts).unwrap();
    assert_eq!(a.cells.len(), 4);
    for (x, y) in a.cells.iter().zip(&b.cells) {
        assert_eq!((x.mean_error, x.error_variance), (y.mean_error, y.error_variance));
    }
    assert!(a.cell(KernelFamily::Rbf, 40).unwrap().mean_error.unwrap().is_finite());
    assert!(kernel_comparison(&train, &test, &fams, &[41], &opts).is_err());
}

#[test]
fn small_model_benchmark() {
    let (model, _) = model4();
    let test = generate_dataset(10, &SamplingSpec::new(4), &default_rule(), 99).unwrap();
    let moments: Vec<_> = test.pairs.iter().map(|p| p.p.clone()).collect();
    let r = benchmark_speedup(model, &moments, 3, 0).unwrap();
    assert_eq!((r.n_points, r.repeats, r.newton_failures), (10, 3, 0));
    assert!(r.ratio > 1.0, "{r:?}");
    assert!((r.ratio - r.median_newton_seconds / r.median_gp_seconds).abs() < 1e-12 * r.ratio);
}

#[test]
fn held_out_error_statistics() {
    let (model, _) = model4();
    let test = generate_dataset(30, &SamplingSpec::new(4), &default_rule(), 31).unwrap();
    let errs = held_out_errors(model, &test).unwrap();
    assert_eq!(errs.len(), 30);
    let (mean, var) = mean_and_variance(&errs);
    assert!(mean > 0.0 && mean < 0.5 && var >= 0.0);
    let (m, v) = mean_and_variance(&[1.0, 3.0]);
    assert_eq!((m, v), (2.0, 1.0));
    let wrong = generate_dataset(5, &SamplingSpec::new(6), &default_rule(), 31).unwrap();
    assert!(held_out_errors(model, &wrong).is_err());
}
