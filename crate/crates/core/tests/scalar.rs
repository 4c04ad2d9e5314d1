use maxent::scalar::*;

#[test]
fn binomials() {
    assert_eq!(binomial::<f64>(8, 0), 1.0);
    assert_eq!(binomial::<f64>(8, 3), 56.0);
    assert_eq!(binomial::<f64>(6, 6), 1.0);
    assert_eq!(binomial::<f64>(3, 4), 0.0);
    assert_eq!(binomial::<f32>(16, 8), 12870.0);
}
