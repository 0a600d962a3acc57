use mixprune::{cholesky, matmul, solve_spd, spd_inverse, Matrix};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Matrix::new(rows, cols, v).unwrap())
}

fn spd(max_dim: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_dim, 1..=max_dim).prop_flat_map(|(d, n)| {
        matrix(n, d).prop_map(move |b| {
            let mut a = matmul(&b.transpose(), &b).unwrap();
            for i in 0..d {
                a.set(i, i, a.get(i, i) + 1.0);
            }
            a
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cholesky_reconstructs(a in spd(64)) {
        let f = cholesky(&a).unwrap();
        let err = f.reconstruct().sub(&a).unwrap().max_abs();
        prop_assert!(err <= 1e-10 * a.max_abs().max(1.0), "reconstruction error {err}");
    }

    #[test]
    fn inverse_times_matrix_is_identity(a in spd(24)) {
        let inv = spd_inverse(&a).unwrap();
        let prod = matmul(&inv, &a).unwrap();
        prop_assert!(prod.sub(&Matrix::identity(a.rows())).unwrap().max_abs() <= 1e-8);
    }

    #[test]
    fn solve_agrees_with_inverse(a in spd(16), seed in 0u64..1000) {
        let d = a.rows();
        let rhs = Matrix::from_fn(d, 2, |r, c| ((r * 7 + c * 3) as f64 + seed as f64).sin());
        let x = solve_spd(&a, &rhs).unwrap();
        let y = matmul(&spd_inverse(&a).unwrap(), &rhs).unwrap();
        prop_assert!(x.sub(&y).unwrap().max_abs() <= 1e-8 * y.max_abs().max(1.0));
    }

    #[test]
    fn matmul_is_associative(a in matrix(5, 4), b in matrix(4, 6), c in matrix(6, 3)) {
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.sub(&right).unwrap().max_abs() <= 1e-10 * left.max_abs().max(1.0));
    }

    #[test]
    fn matmul_is_deterministic(a in matrix(7, 9), b in matrix(9, 5)) {
        let x = matmul(&a, &b).unwrap();
        let y = matmul(&a, &b).unwrap();
        prop_assert_eq!(
            x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn transpose_of_product(a in matrix(3, 4), b in matrix(4, 2)) {
        let lhs = matmul(&a, &b).unwrap().transpose();
        let rhs = matmul(&b.transpose(), &a.transpose()).unwrap();
        prop_assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-12);
    }
}

#[test]
fn ill_conditioned_inverse_stays_accurate() {
    // diagonal scaling up to condition 1e6 on top of a rotation
    let d = 6;
    let theta: f64 = 0.3;
    let mut q = Matrix::identity(d);
    for i in 0..d - 1 {
        let mut g = Matrix::identity(d);
        g.set(i, i, theta.cos());
        g.set(i, i + 1, -theta.sin());
        g.set(i + 1, i, theta.sin());
        g.set(i + 1, i + 1, theta.cos());
        q = matmul(&q, &g).unwrap();
    }
    let diag = Matrix::from_fn(d, d, |r, c| if r == c { 10f64.powf(6.0 * r as f64 / (d - 1) as f64) } else { 0.0 });
    let a = matmul(&matmul(&q, &diag).unwrap(), &q.transpose()).unwrap();
    let sym = Matrix::from_fn(d, d, |r, c| 0.5 * (a.get(r, c) + a.get(c, r)));
    let inv = spd_inverse(&sym).unwrap();
    let prod = matmul(&inv, &sym).unwrap();
    assert!(prod.sub(&Matrix::identity(d)).unwrap().max_abs() <= 1e-8);
}
