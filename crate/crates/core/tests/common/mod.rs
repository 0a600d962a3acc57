#![allow(dead_code)]

use mixprune::{HessianState, Matrix, SparsityMask};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Random layer with `d_out ≤ 8`, `d_in ≤ 16` and `n ≥ d_in` samples.
pub struct RandomLayer {
    pub w: Matrix,
    pub x: Matrix,
}

pub fn random_layer(rng: &mut ChaCha8Rng) -> RandomLayer {
    let d_out = rng.random_range(1..=8);
    let d_in = rng.random_range(1..=16);
    let n = rng.random_range(d_in..=3 * d_in);
    // correlated inputs so the Hessian is far from diagonal
    let mix = gaussian_matrix(d_in, d_in, rng);
    let z = gaussian_matrix(n, d_in, rng);
    let x = mixprune::matmul(&z, &mix).unwrap();
    RandomLayer {
        w: gaussian_matrix(d_out, d_in, rng),
        x,
    }
}

pub fn dampened(x: &Matrix, damp: f64) -> HessianState {
    HessianState::from_samples(x).unwrap().dampen(damp).unwrap()
}

pub fn random_mask(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> SparsityMask {
    let p: f64 = rng.random();
    let keep = (0..rows * cols).map(|_| rng.random::<f64>() >= p).collect();
    SparsityMask::from_keep(rows, cols, keep).unwrap()
}

/// Direct `‖W·X − Ŵ·X‖²` with `X` stored as sample rows.
pub fn direct_error(w: &Matrix, w_hat: &Matrix, x: &Matrix) -> f64 {
    let a = mixprune::matmul(x, &w.transpose()).unwrap();
    let b = mixprune::matmul(x, &w_hat.transpose()).unwrap();
    a.sub(&b).unwrap().data().iter().map(|v| v * v).sum()
}
