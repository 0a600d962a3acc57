//! Weight reconstruction after masking.
//!
//! Every method minimizes the layer-wise objective `‖WX − ŴX‖²` subject to
//! `Ŵ` being zero off the mask:
//!
//! * `closed_form` solves the per-row least-squares problem over the kept
//!   columns directly;
//! * `iterative_obs` removes pruned weights one at a time with the OBS
//!   update `δw = −(w_c / [H⁻¹]_cc) · H⁻¹[:, c]`, downdating `H⁻¹` after
//!   each removal. It reaches the same optimum as `closed_form`;
//! * `blocked` walks columns left to right, choosing each block's mask on
//!   entry and only propagating compensation to columns not yet visited.
//!
//! Reconstruction uses the dampened Hessian. Reported errors always use the
//! raw one, so they equal `‖WX − ŴX‖²` on the calibration data.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::HessianState;
use crate::error::{Error, Result};
use crate::saliency::{lowest_in_row, prune_count, Criterion, SparsityMask};
use crate::tensor::{cholesky, solve_spd, Matrix};

/// Pivots at or below this are treated as singular by the OBS paths.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMethod {
    PruneOnly,
    #[default]
    ClosedForm,
    IterativeObs,
    Blocked,
}

impl std::str::FromStr for PruneMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prune-only" | "prune_only" => Ok(PruneMethod::PruneOnly),
            "closed-form" | "closed_form" => Ok(PruneMethod::ClosedForm),
            "iterative-obs" | "iterative_obs" => Ok(PruneMethod::IterativeObs),
            "blocked" => Ok(PruneMethod::Blocked),
            other => Err(Error::Config(format!(
                "unknown method `{other}` (expected prune-only, closed-form, iterative-obs or blocked)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunedLayer {
    pub weights: Matrix,
    pub mask: SparsityMask,
    pub recon_error: f64,
    pub method: PruneMethod,
}

fn check_layer(w: &Matrix, mask: &SparsityMask, state: &HessianState) -> Result<()> {
    if w.shape() != mask.shape() {
        return Err(Error::Shape(format!(
            "weight is {:?} but mask is {:?}",
            w.shape(),
            mask.shape()
        )));
    }
    if state.dim() != w.cols() {
        return Err(Error::Shape(format!(
            "weight has {} inputs but hessian is {}x{}",
            w.cols(),
            state.dim(),
            state.dim()
        )));
    }
    Ok(())
}

fn assemble(rows: Vec<Vec<f64>>, cols: usize) -> Matrix {
    let n = rows.len();
    Matrix::new(n, cols, rows.into_iter().flatten().collect())
        .expect("reconstructed weights are finite")
}

fn finish(
    w: &Matrix,
    weights: Matrix,
    mask: SparsityMask,
    state: &HessianState,
    method: PruneMethod,
) -> Result<PrunedLayer> {
    let recon_error = layer_recon_error(w, &weights, state)?;
    Ok(PrunedLayer {
        weights,
        mask,
        recon_error,
        method,
    })
}

fn check_finite(row: &[f64], r: usize) -> Result<()> {
    if row.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "row {r} produced non-finite weights; increase dampening"
        )))
    }
}

/// `trace((W−Ŵ)·H·(W−Ŵ)ᵀ)` over the raw Hessian.
pub fn layer_recon_error(w: &Matrix, w_hat: &Matrix, state: &HessianState) -> Result<f64> {
    let d = w.sub(w_hat)?;
    let h = state.raw_hessian();
    if h.rows() != d.cols() {
        return Err(Error::Shape(format!(
            "weight has {} inputs but hessian is {}x{}",
            d.cols(),
            h.rows(),
            h.cols()
        )));
    }
    let n = d.cols();
    let mut total = 0.0;
    for r in 0..d.rows() {
        let dr = d.row(r);
        for i in 0..n {
            if dr[i] == 0.0 {
                continue;
            }
            let hi = h.row(i);
            let mut acc = 0.0;
            for j in 0..n {
                acc += hi[j] * dr[j];
            }
            total += dr[i] * acc;
        }
    }
    // rounding can push an exact-zero quadratic form slightly negative
    Ok(total.max(0.0))
}

/// Zeroes masked weights without touching survivors.
pub fn prune_only(w: &Matrix, mask: &SparsityMask, state: &HessianState) -> Result<PrunedLayer> {
    check_layer(w, mask, state)?;
    finish(w, mask.apply(w), mask.clone(), state, PruneMethod::PruneOnly)
}

/// Exact per-row minimizer: `ŵ_K = H_KK⁻¹ · H_K: · wᵀ`, zeros elsewhere.
pub fn reconstruct_closed_form(
    w: &Matrix,
    mask: &SparsityMask,
    state: &HessianState,
) -> Result<PrunedLayer> {
    check_layer(w, mask, state)?;
    let h = state.hessian();
    let cols = w.cols();
    let rows: Vec<Vec<f64>> = (0..w.rows())
        .into_par_iter()
        .map(|r| {
            let wr = w.row(r);
            let keep = mask.row(r);
            let kept: Vec<usize> = (0..cols).filter(|&c| keep[c]).collect();
            if kept.len() == cols {
                return Ok(wr.to_vec());
            }
            let mut out = vec![0.0; cols];
            if kept.is_empty() {
                return Ok(out);
            }
            let h_kk = h.principal_submatrix(&kept);
            let rhs = Matrix::from_fn(kept.len(), 1, |i, _| {
                let hk = h.row(kept[i]);
                let mut acc = 0.0;
                for j in 0..cols {
                    acc += hk[j] * wr[j];
                }
                acc
            });
            let x = solve_spd(&h_kk, &rhs).map_err(|e| match e {
                Error::NotPositiveDefinite { .. } | Error::NotSymmetric { .. } => {
                    Error::Numerical(format!(
                        "kept-column hessian of row {r} is singular; increase dampening"
                    ))
                }
                other => other,
            })?;
            for (i, &c) in kept.iter().enumerate() {
                out[c] = x.get(i, 0);
            }
            check_finite(&out, r)?;
            Ok(out)
        })
        .collect::<Result<_>>()?;
    finish(w, assemble(rows, cols), mask.clone(), state, PruneMethod::ClosedForm)
}

/// Removes column `c` from an inverse Hessian: `H⁻¹ − H⁻¹[:,c]·H⁻¹[c,:] / [H⁻¹]_cc`,
/// then freezes row and column `c` as an identity slot.
pub fn obs_downdate(h_inv: &Matrix, c: usize) -> Result<Matrix> {
    let mut out = h_inv.clone();
    downdate_in_place(&mut out, c, 0.0)?;
    Ok(out)
}

fn downdate_in_place(h_inv: &mut Matrix, c: usize, tol: f64) -> Result<()> {
    let n = h_inv.rows();
    if c >= n || !h_inv.is_square() {
        return Err(Error::Shape(format!(
            "cannot downdate column {c} of a {:?} matrix",
            h_inv.shape()
        )));
    }
    let pivot = h_inv.get(c, c);
    if !(pivot > tol) {
        return Err(Error::Numerical(format!(
            "inverse hessian pivot at column {c} is {pivot:e}"
        )));
    }
    let col: Vec<f64> = (0..n).map(|i| h_inv.get(i, c)).collect();
    for i in 0..n {
        if col[i] == 0.0 {
            continue;
        }
        let f = col[i] / pivot;
        let row = h_inv.row_mut(i);
        for j in 0..n {
            row[j] -= f * col[j];
        }
    }
    for i in 0..n {
        h_inv.set(i, c, 0.0);
        h_inv.set(c, i, 0.0);
    }
    h_inv.set(c, c, 1.0);
    Ok(())
}

/// Sequential OBS elimination. Each row removes its pruned columns in
/// ascending order of initial `w²/[H⁻¹]_cc` on a private copy of `H⁻¹`.
pub fn prune_iterative_obs(
    w: &Matrix,
    mask: &SparsityMask,
    state: &HessianState,
) -> Result<PrunedLayer> {
    check_layer(w, mask, state)?;
    let h_inv = state.invert()?;
    let cols = w.cols();
    let rows: Vec<Vec<f64>> = (0..w.rows())
        .into_par_iter()
        .map(|r| {
            let mut wr = w.row(r).to_vec();
            let keep = mask.row(r);
            let mut order: Vec<usize> = (0..cols).filter(|&c| !keep[c]).collect();
            if order.is_empty() {
                return Ok(wr);
            }
            let cost = |c: usize| wr[c] * wr[c] / h_inv.get(c, c);
            order.sort_by(|&a, &b| cost(a).total_cmp(&cost(b)).then(a.cmp(&b)));

            let mut hinv = h_inv.clone();
            for c in order {
                let d = hinv.get(c, c);
                if !(d > PIVOT_TOLERANCE) {
                    return Err(Error::Numerical(format!(
                        "row {r}: inverse hessian pivot at column {c} is {d:e}; increase dampening"
                    )));
                }
                let f = wr[c] / d;
                if f != 0.0 {
                    for (j, wj) in wr.iter_mut().enumerate() {
                        *wj -= f * hinv.get(j, c);
                    }
                }
                wr[c] = 0.0;
                downdate_in_place(&mut hinv, c, PIVOT_TOLERANCE)
                    .map_err(|e| Error::Numerical(format!("row {r}: {e}")))?;
            }
            // frozen slots are exact zeros; clear any rounding residue
            for c in 0..cols {
                if !keep[c] {
                    wr[c] = 0.0;
                }
            }
            check_finite(&wr, r)?;
            Ok(wr)
        })
        .collect::<Result<_>>()?;
    finish(w, assemble(rows, cols), mask.clone(), state, PruneMethod::IterativeObs)
}

/// Block-sequential pruning at per-row sparsity `p`.
///
/// Uses the upper Cholesky factor `U` of `H⁻¹` (`H⁻¹ = UᵀU`): row `j` of `U`
/// scaled by `1/U_jj` is the OBS update for column `j` once every column left
/// of `j` is fixed. Block masks are chosen from the costs at block entry with
/// `[H⁻¹]_cc` taken over the columns not yet visited. Each block gets
/// `round(p·end) − round(p·start)` pruned weights per row, so row totals
/// match one-shot selection exactly.
pub fn prune_blocked(
    w: &Matrix,
    p: f64,
    criterion: Criterion,
    state: &HessianState,
    block: usize,
) -> Result<PrunedLayer> {
    if block == 0 {
        return Err(Error::Config("block size must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("sparsity must lie in [0, 1], got {p}")));
    }
    let cols = w.cols();
    check_layer(w, &SparsityMask::all_kept(w.rows(), cols), state)?;
    if matches!(criterion, Criterion::Isc) {
        return Err(Error::Config(
            "criterion `isc` has no built-in scoring rule".into(),
        ));
    }
    let h_inv = state.invert()?;
    // U[k][c] = L[c][k]
    let lower = cholesky(&h_inv)
        .map_err(|e| Error::Numerical(format!("inverse hessian factorization failed: {e}")))?
        .into_lower();
    let norms = state.column_norms();

    let rows: Vec<(Vec<f64>, Vec<bool>)> = (0..w.rows())
        .into_par_iter()
        .map(|r| {
            let mut wr = w.row(r).to_vec();
            let mut keep = vec![true; cols];
            let mut start = 0;
            while start < cols {
                let end = (start + block).min(cols);
                let quota = prune_count(p, end) - prune_count(p, start);
                if quota > 0 {
                    let cost = Matrix::from_fn(1, cols, |_, c| {
                        if c < start || c >= end {
                            return 0.0;
                        }
                        match criterion {
                            Criterion::Magnitude => wr[c] * wr[c],
                            Criterion::ActNorm => wr[c].abs() * norms[c],
                            _ => {
                                let diag: f64 =
                                    (start..=c).map(|k| lower.get(c, k).powi(2)).sum();
                                wr[c] * wr[c] / diag
                            }
                        }
                    });
                    for c in lowest_in_row(&cost, 0, start..end, quota) {
                        keep[c] = false;
                    }
                }
                for j in start..end {
                    if keep[j] {
                        continue;
                    }
                    let ujj = lower.get(j, j);
                    if !(ujj * ujj > PIVOT_TOLERANCE) {
                        return Err(Error::Numerical(format!(
                            "row {r}: inverse hessian pivot at column {j} is {:e}",
                            ujj * ujj
                        )));
                    }
                    let err = wr[j] / ujj;
                    for k in j + 1..cols {
                        wr[k] -= err * lower.get(k, j);
                    }
                    wr[j] = 0.0;
                }
                start = end;
            }
            check_finite(&wr, r)?;
            Ok((wr, keep))
        })
        .collect::<Result<_>>()?;

    let mut weights = Vec::with_capacity(w.len());
    let mut keep = Vec::with_capacity(w.len());
    for (wr, kr) in rows {
        weights.extend(wr);
        keep.extend(kr);
    }
    let weights = Matrix::new(w.rows(), cols, weights).expect("finite rows");
    let mask = SparsityMask::from_keep(w.rows(), cols, keep)?;
    finish(w, weights, mask, state, PruneMethod::Blocked)
}

/// Dispatches a fixed-mask method.
pub fn prune_with_mask(
    w: &Matrix,
    mask: &SparsityMask,
    state: &HessianState,
    method: PruneMethod,
) -> Result<PrunedLayer> {
    match method {
        PruneMethod::PruneOnly => prune_only(w, mask, state),
        PruneMethod::ClosedForm => reconstruct_closed_form(w, mask, state),
        PruneMethod::IterativeObs => prune_iterative_obs(w, mask, state),
        PruneMethod::Blocked => Err(Error::Config(
            "blocked pruning selects its own mask; call prune_blocked".into(),
        )),
    }
}
