//! Synthetic multi-layer fixtures.
//!
//! All randomness comes from one `ChaCha8Rng` seeded with the fixture seed.
//! Layer `l` draws stratified Gaussian weights and calibration rows
//! `x = sqrt(g_l) · (U ∘ sqrt(λ)) · Qᵀ`, where `U` is a random `n × d_in`
//! matrix with orthonormal columns (so `XᵀX = g_l · Q diag(λ) Qᵀ` holds
//! exactly), `Q` is a random orthogonal matrix and `λ` a log-spaced spectrum with condition
//! number `1 + hetero` normalized to mean 1. Layer gains `g_l` are
//! `(1 + hetero)^t` for `t` evenly spaced over `[-1/2, 1/2]` and shuffled
//! across layers, so `hetero = 0` gives statistically identical layers and
//! the spread of input energy between layers is `1 + hetero`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model_io::{DType, LayerEntry, ModelManifest, TensorContainer};
use crate::tensor::Matrix;

/// Calibration samples per input feature.
pub const DEFAULT_SAMPLES_PER_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub model: TensorContainer,
    pub calib: TensorContainer,
    pub manifest: ModelManifest,
}

/// Parses `"8x16,16x16"` into weight shapes `(d_out, d_in)`.
pub fn parse_layer_shapes(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(|part| {
            let part = part.trim();
            let (a, b) = part
                .split_once(['x', 'X'])
                .ok_or_else(|| Error::Config(format!("layer shape `{part}` is not ROWSxCOLS")))?;
            let parse = |t: &str| {
                t.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|v| *v > 0)
                    .ok_or_else(|| Error::Config(format!("invalid dimension `{t}` in `{part}`")))
            };
            Ok((parse(a)?, parse(b)?))
        })
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `n × d` matrix with orthonormal columns, by modified Gram-Schmidt on
/// Gaussian columns. Requires `n >= d`.
fn orthonormal_columns(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..n).map(|_| gaussian(rng)).collect())
        .collect();
    for j in 0..d {
        for k in 0..j {
            let (done, rest) = cols.split_at_mut(j);
            let dot: f64 = done[k].iter().zip(&rest[0]).map(|(a, b)| a * b).sum();
            for (v, q) in rest[0].iter_mut().zip(&done[k]) {
                *v -= dot * q;
            }
        }
        let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        cols[j].iter_mut().for_each(|v| *v /= norm);
    }
    Matrix::from_fn(n, d, |r, c| cols[c][r])
}

/// Gaussian weights whose magnitudes are the `N` midpoint quantiles of the
/// half-normal distribution, with random signs and placement. Layers of the
/// same size share one empirical weight distribution.
fn stratified_gaussian(rows: usize, cols: usize, normal: &Normal, rng: &mut ChaCha8Rng) -> Matrix {
    let n = rows * cols;
    let mut values: Vec<f64> = (0..n)
        .map(|k| {
            let mag = normal.inverse_cdf(0.5 + 0.5 * (k as f64 + 0.5) / n as f64);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    values.shuffle(rng);
    Matrix::new(rows, cols, values).expect("finite quantiles")
}

fn spectrum(d: usize, condition: f64) -> Vec<f64> {
    if d == 1 {
        return vec![1.0];
    }
    let base = condition;
    let raw: Vec<f64> = (0..d)
        .map(|j| base.powf(j as f64 / (d - 1) as f64))
        .collect();
    let mean = raw.iter().sum::<f64>() / d as f64;
    raw.into_iter().map(|v| v / mean).collect()
}

pub fn gen_fixture(
    seed: u64,
    shapes: &[(usize, usize)],
    hetero: f64,
    samples_per_dim: usize,
) -> Result<Fixture> {
    if shapes.is_empty() || shapes.iter().any(|&(a, b)| a == 0 || b == 0) {
        return Err(Error::Config("fixture needs at least one layer with positive shape".into()));
    }
    if !(hetero >= 0.0) || !hetero.is_finite() {
        return Err(Error::Config(format!("heterogeneity must be finite and >= 0, got {hetero}")));
    }
    if samples_per_dim == 0 {
        return Err(Error::Config("samples per dimension must be >= 1".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::standard();
    let n_layers = shapes.len();
    let mut positions: Vec<f64> = (0..n_layers)
        .map(|i| {
            if n_layers == 1 {
                0.0
            } else {
                i as f64 / (n_layers - 1) as f64 - 0.5
            }
        })
        .collect();
    positions.shuffle(&mut rng);

    let mut model = TensorContainer::new();
    let mut calib = TensorContainer::new();
    let mut layers = Vec::with_capacity(n_layers);
    for (i, (&(d_out, d_in), t)) in shapes.iter().zip(&positions).enumerate() {
        let gain = (1.0 + hetero).powf(*t);
        let w = stratified_gaussian(d_out, d_in, &normal, &mut rng);

        let q = orthonormal_columns(d_in, d_in, &mut rng);
        let lambda = spectrum(d_in, 1.0 + hetero);
        let n = samples_per_dim * d_in;
        let scale = gain.sqrt();
        let u = orthonormal_columns(n, d_in, &mut rng);
        let z = Matrix::from_fn(n, d_in, |r, c| u.get(r, c) * lambda[c].sqrt());
        // x = scale · z · Qᵀ
        let x = Matrix::from_fn(n, d_in, |r, c| {
            let zr = z.row(r);
            let mut acc = 0.0;
            for k in 0..d_in {
                acc += zr[k] * q.get(c, k);
            }
            scale * acc
        });

        let name = format!("layer{i}");
        let weight = format!("{name}.weight");
        let input = format!("{name}.input");
        model.insert(weight.clone(), DType::F64, w)?;
        calib.insert(input.clone(), DType::F64, x)?;
        layers.push(LayerEntry {
            name,
            weight,
            bias: None,
            calib: input,
        });
    }
    Ok(Fixture {
        model,
        calib,
        manifest: ModelManifest { layers },
    })
}
