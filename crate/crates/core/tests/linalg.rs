use maxent::linalg::*;
use maxent::Error;

fn spd(n: usize) -> Matrix<f64> {
    let b = Matrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 5) as f64 + if i == j { 1.0 } else { 0.0 });
    let mut a = b.matmul(&b.transpose());
    a.add_diagonal(0.5);
    a
}

#[test]
fn cholesky_reconstructs() {
    let a = spd(9);
    let c = Cholesky::new(&a).unwrap();
    assert!(c.reconstruct().max_abs_diff(&a) < 1e-10);
}

#[test]
fn solve_and_inverse() {
    let a = spd(7);
    let c = Cholesky::new(&a).unwrap();
    let b: Vec<f64> = (0..7).map(|i| i as f64 - 2.0).collect();
    let x = c.solve(&b);
    let r = a.matvec(&x);
    for (ri, bi) in r.iter().zip(&b) {
        assert!((ri - bi).abs() < 1e-10);
    }
    let inv = c.inverse();
    let id = a.matmul(&inv);
    assert!(id.max_abs_diff(&Matrix::identity(7)) < 1e-10);
    let linv = c.inverse_lower();
    assert!(c.lower().matmul(&linv).max_abs_diff(&Matrix::identity(7)) < 1e-12);
}

#[test]
fn ln_det_matches_product_of_pivots() {
    let a = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
    let c = Cholesky::new(&a).unwrap();
    assert!((c.ln_det() - 8.0_f64.ln()).abs() < 1e-14);
}

#[test]
fn indefinite_needs_ladder() {
    let a = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
    assert!(Cholesky::new(&a).is_none());
    let c = Cholesky::with_jitter_ladder(&a, 1e-12, 5).unwrap();
    assert!(c.jitter() > 0.0);
    let bad = Matrix::from_rows(&[vec![-1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    assert!(matches!(
        Cholesky::with_jitter_ladder(&bad, 1e-12, 5),
        Err(Error::IllConditioned { retries: 5, .. })
    ));
}

#[test]
fn equilibrated_solve_handles_wild_scales() {
    let a: Matrix<f64> = Matrix::from_rows(&[vec![1e12, 1e5], vec![1e5, 1.0]]).unwrap();
    let x = solve_spd_equilibrated(&a, &[1e12, 1.0], 1e-12, 5).unwrap();
    let r = a.matvec(&x);
    assert!((r[0] - 1e12).abs() / 1e12 < 1e-10);
    assert!((r[1] - 1.0).abs() < 1e-6);
}

#[test]
fn dot_tail_lengths() {
    for n in 0..11 {
        let a: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let expected: f64 = a.iter().map(|x| x * x).sum();
        assert_eq!(dot(&a, &a), expected);
    }
}
