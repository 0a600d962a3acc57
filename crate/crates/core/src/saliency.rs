//! Per-weight pruning costs and keep-mask selection.
//!
//! Costs index weight `(r, c)` as output row `r`, input column `c`; the
//! Hessian and its inverse live over input columns and are shared by rows.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::HessianState;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Magnitude,
    ActNorm,
    Obs,
    Isc,
}

impl Criterion {
    /// Name used on the command line.
    pub fn cli_name(self) -> &'static str {
        match self {
            Criterion::Magnitude => "magnitude",
            Criterion::ActNorm => "act-norm",
            Criterion::Obs => "obs",
            Criterion::Isc => "isc",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude" => Ok(Criterion::Magnitude),
            "act-norm" | "act_norm" => Ok(Criterion::ActNorm),
            "obs" => Ok(Criterion::Obs),
            "isc" => Ok(Criterion::Isc),
            other => Err(Error::Config(format!(
                "unknown criterion `{other}` (expected magnitude, act-norm, obs or isc)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    PerRow,
    PerLayer,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-row" | "per_row" => Ok(Scope::PerRow),
            "per-layer" | "per_layer" => Ok(Scope::PerLayer),
            other => Err(Error::Config(format!(
                "unknown scope `{other}` (expected per-row or per-layer)"
            ))),
        }
    }
}

/// Non-negative pruning cost for every weight of a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    values: Matrix,
    criterion: Criterion,
}

impl SaliencyMap {
    /// Wraps precomputed costs, checking they are finite and non-negative.
    pub fn new(values: Matrix, criterion: Criterion) -> Result<Self> {
        if let Some(i) = values.data().iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            let cols = values.cols().max(1);
            return Err(Error::Numerical(format!(
                "saliency at ({}, {}) is {}, expected finite and >= 0",
                i / cols,
                i % cols,
                values.data()[i]
            )));
        }
        Ok(Self { values, criterion })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn criterion(&self) -> Criterion {
        self.criterion
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }
}

/// A pruning-cost rule. Built-in rules cover magnitude, activation-norm and
/// OBS costs; other rules (ISC among them) plug in through this trait and
/// [`compute_saliency_with`].
pub trait SaliencyCriterion {
    fn tag(&self) -> Criterion;

    fn score(&self, w: &Matrix, state: &HessianState, h_inv: &Matrix) -> Result<Matrix>;
}

pub struct MagnitudeCriterion;
pub struct ActNormCriterion;
pub struct ObsCriterion;

impl SaliencyCriterion for MagnitudeCriterion {
    fn tag(&self) -> Criterion {
        Criterion::Magnitude
    }

    fn score(&self, w: &Matrix, _: &HessianState, _: &Matrix) -> Result<Matrix> {
        Ok(Matrix::from_fn(w.rows(), w.cols(), |r, c| w.get(r, c).powi(2)))
    }
}

impl SaliencyCriterion for ActNormCriterion {
    fn tag(&self) -> Criterion {
        Criterion::ActNorm
    }

    fn score(&self, w: &Matrix, state: &HessianState, _: &Matrix) -> Result<Matrix> {
        let norms = state.column_norms();
        Ok(Matrix::from_fn(w.rows(), w.cols(), |r, c| {
            w.get(r, c).abs() * norms[c]
        }))
    }
}

impl SaliencyCriterion for ObsCriterion {
    fn tag(&self) -> Criterion {
        Criterion::Obs
    }

    fn score(&self, w: &Matrix, _: &HessianState, h_inv: &Matrix) -> Result<Matrix> {
        let diag = obs_diagonal(h_inv)?;
        Ok(Matrix::from_fn(w.rows(), w.cols(), |r, c| {
            w.get(r, c).powi(2) / diag[c]
        }))
    }
}

/// Diagonal of `H⁻¹`, rejecting non-positive entries.
pub(crate) fn obs_diagonal(h_inv: &Matrix) -> Result<Vec<f64>> {
    (0..h_inv.rows())
        .map(|c| {
            let d = h_inv.get(c, c);
            if d > 0.0 {
                Ok(d)
            } else {
                Err(Error::Numerical(format!(
                    "inverse hessian diagonal at column {c} is {d}, expected > 0"
                )))
            }
        })
        .collect()
}

fn builtin(criterion: Criterion) -> Result<&'static dyn SaliencyCriterion> {
    match criterion {
        Criterion::Magnitude => Ok(&MagnitudeCriterion),
        Criterion::ActNorm => Ok(&ActNormCriterion),
        Criterion::Obs => Ok(&ObsCriterion),
        Criterion::Isc => Err(Error::Config(
            "criterion `isc` has no built-in scoring rule; supply one through \
             SaliencyCriterion and compute_saliency_with"
                .into(),
        )),
    }
}

/// Scores `w` with a built-in criterion.
pub fn compute_saliency(
    w: &Matrix,
    state: &HessianState,
    h_inv: &Matrix,
    criterion: Criterion,
) -> Result<SaliencyMap> {
    compute_saliency_with(w, state, h_inv, builtin(criterion)?)
}

pub fn compute_saliency_with(
    w: &Matrix,
    state: &HessianState,
    h_inv: &Matrix,
    rule: &dyn SaliencyCriterion,
) -> Result<SaliencyMap> {
    let d_in = w.cols();
    if state.dim() != d_in || h_inv.shape() != (d_in, d_in) {
        return Err(Error::Shape(format!(
            "weight has {d_in} inputs but hessian is {}x{} and its inverse {:?}",
            state.dim(),
            state.dim(),
            h_inv.shape()
        )));
    }
    let values = rule.score(w, state, h_inv)?;
    if values.shape() != w.shape() {
        return Err(Error::Shape(format!(
            "criterion `{}` produced {:?} costs for a {:?} weight",
            rule.tag(),
            values.shape(),
            w.shape()
        )));
    }
    SaliencyMap::new(values, rule.tag())
}

/// Boolean keep-mask; `true` keeps the weight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityMask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl SparsityMask {
    pub fn all_kept(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            keep: vec![true; rows * cols],
        }
    }

    pub fn from_keep(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} mask needs {} entries, got {}",
                rows * cols,
                keep.len()
            )));
        }
        Ok(Self { rows, cols, keep })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn keep(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, keep: bool) {
        self.keep[r * self.cols + c] = keep;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.keep[r * self.cols..(r + 1) * self.cols]
    }

    pub fn pruned_count(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    pub fn row_pruned_count(&self, r: usize) -> usize {
        self.row(r).iter().filter(|k| !**k).count()
    }

    /// Fraction of pruned entries. Empty masks report 0.
    pub fn achieved_sparsity(&self) -> f64 {
        if self.keep.is_empty() {
            0.0
        } else {
            self.pruned_count() as f64 / self.keep.len() as f64
        }
    }

    /// `M ∘ W`.
    pub fn apply(&self, w: &Matrix) -> Matrix {
        assert_eq!(w.shape(), self.shape(), "mask/weight shape mismatch");
        Matrix::from_fn(w.rows(), w.cols(), |r, c| {
            if self.keep(r, c) {
                w.get(r, c)
            } else {
                0.0
            }
        })
    }
}

/// Number of weights pruned out of `n` at sparsity `p`, rounding half up.
pub fn prune_count(p: f64, n: usize) -> usize {
    ((p * n as f64 + 0.5).floor() as usize).min(n)
}

fn check_sparsity(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("sparsity must lie in [0, 1], got {p}")))
    }
}

/// Ascending cost, then lower column, then lower row.
#[inline]
fn rank(s: &Matrix, a: (usize, usize), b: (usize, usize)) -> Ordering {
    s.get(a.0, a.1)
        .total_cmp(&s.get(b.0, b.1))
        .then(a.1.cmp(&b.1))
        .then(a.0.cmp(&b.0))
}

/// Column indices of `cols` holding the `k` smallest costs in row `r`.
pub(crate) fn lowest_in_row(s: &Matrix, r: usize, cols: std::ops::Range<usize>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = cols.collect();
    idx.sort_by(|&a, &b| rank(s, (r, a), (r, b)));
    idx.truncate(k);
    idx
}

/// Prunes the lowest-cost `round(p·N)` weights of every row (`PerRow`) or of
/// the whole layer (`PerLayer`).
pub fn select_mask_unstructured(s: &SaliencyMap, p: f64, scope: Scope) -> Result<SparsityMask> {
    check_sparsity(p)?;
    let v = s.values();
    let (rows, cols) = v.shape();
    let mut mask = SparsityMask::all_kept(rows, cols);
    match scope {
        Scope::PerRow => {
            let k = prune_count(p, cols);
            for r in 0..rows {
                for c in lowest_in_row(v, r, 0..cols, k) {
                    mask.set(r, c, false);
                }
            }
        }
        Scope::PerLayer => {
            let k = prune_count(p, rows * cols);
            let mut idx: Vec<(usize, usize)> =
                (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
            idx.sort_by(|&a, &b| rank(v, a, b));
            for &(r, c) in &idx[..k] {
                mask.set(r, c, false);
            }
        }
    }
    Ok(mask)
}

/// n:m pattern: in every run of `m` consecutive columns of a row, the `n`
/// lowest-cost weights are pruned.
pub fn select_mask_nm(s: &SaliencyMap, n: usize, m: usize) -> Result<SparsityMask> {
    if m == 0 || n >= m {
        return Err(Error::Config(format!("n:m pattern needs n < m, got {n}:{m}")));
    }
    let v = s.values();
    let (rows, cols) = v.shape();
    if cols % m != 0 {
        return Err(Error::Config(format!(
            "{cols} input columns are not divisible by group size {m}"
        )));
    }
    let mut mask = SparsityMask::all_kept(rows, cols);
    for r in 0..rows {
        for g in (0..cols).step_by(m) {
            for c in lowest_in_row(v, r, g..g + m, n) {
                mask.set(r, c, false);
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_state(d: usize) -> (HessianState, Matrix) {
        let s = HessianState::from_samples(&Matrix::identity(d)).unwrap();
        let inv = s.invert().unwrap();
        (s, inv)
    }

    fn map(rows: &[&[f64]]) -> SaliencyMap {
        SaliencyMap::new(Matrix::from_rows(rows), Criterion::Obs).unwrap()
    }

    #[test]
    fn obs_with_identity_is_squared_weight() {
        let (s, inv) = identity_state(2);
        let w = Matrix::from_rows(&[[3.0, -1.0]]);
        let sal = compute_saliency(&w, &s, &inv, Criterion::Obs).unwrap();
        assert_eq!(sal.values(), &Matrix::from_rows(&[[9.0, 1.0]]));
        assert_eq!(sal.criterion(), Criterion::Obs);
    }

    #[test]
    fn obs_with_correlated_hessian() {
        // H = [[2,1],[1,1]] from rows [1,0],[1,1]
        let s = HessianState::from_samples(&Matrix::from_rows(&[[1.0, 0.0], [1.0, 1.0]])).unwrap();
        let inv = s.invert().unwrap();
        let w = Matrix::from_rows(&[[1.0, 2.0]]);
        let sal = compute_saliency(&w, &s, &inv, Criterion::Obs).unwrap();
        // 1²/1, 2²/2
        assert!((sal.values().get(0, 0) - 1.0).abs() < 1e-12);
        assert!((sal.values().get(0, 1) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn act_norm_uses_column_norms() {
        let s = HessianState::from_samples(&Matrix::from_rows(&[[3.0, 0.0], [4.0, 2.0]])).unwrap();
        let inv = Matrix::identity(2);
        let w = Matrix::from_rows(&[[-2.0, 1.0]]);
        let sal = compute_saliency(&w, &s, &inv, Criterion::ActNorm).unwrap();
        assert_eq!(sal.values(), &Matrix::from_rows(&[[10.0, 2.0]]));
    }

    #[test]
    fn isc_needs_a_registered_rule() {
        let (s, inv) = identity_state(2);
        let w = Matrix::from_rows(&[[3.0, -1.0]]);
        assert!(matches!(
            compute_saliency(&w, &s, &inv, Criterion::Isc),
            Err(Error::Config(_))
        ));

        struct Plugged;
        impl SaliencyCriterion for Plugged {
            fn tag(&self) -> Criterion {
                Criterion::Isc
            }
            fn score(&self, w: &Matrix, _: &HessianState, _: &Matrix) -> Result<Matrix> {
                Ok(Matrix::from_fn(w.rows(), w.cols(), |r, c| w.get(r, c).abs()))
            }
        }
        let sal = compute_saliency_with(&w, &s, &inv, &Plugged).unwrap();
        assert_eq!(sal.criterion(), Criterion::Isc);
        assert_eq!(sal.values(), &Matrix::from_rows(&[[3.0, 1.0]]));
    }

    #[test]
    fn nonpositive_inverse_diagonal_names_column() {
        let (s, _) = identity_state(2);
        let bad = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]);
        let w = Matrix::from_rows(&[[1.0, 2.0]]);
        match compute_saliency(&w, &s, &bad, Criterion::Obs) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("column 1"), "{msg}"),
            other => panic!("expected numerical error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_criterion_tag() {
        assert!(matches!("wanda".parse::<Criterion>(), Err(Error::Config(_))));
        assert_eq!("act-norm".parse::<Criterion>().unwrap(), Criterion::ActNorm);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (s, inv) = identity_state(3);
        let w = Matrix::zeros(1, 2);
        assert!(matches!(
            compute_saliency(&w, &s, &inv, Criterion::Magnitude),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn extreme_sparsities() {
        let s = map(&[&[1.0, 2.0, 3.0], &[0.5, 0.1, 9.0]]);
        let none = select_mask_unstructured(&s, 0.0, Scope::PerRow).unwrap();
        assert_eq!(none.achieved_sparsity(), 0.0);
        assert_eq!(none, SparsityMask::all_kept(2, 3));
        let all = select_mask_unstructured(&s, 1.0, Scope::PerLayer).unwrap();
        assert_eq!(all.achieved_sparsity(), 1.0);
        assert!(select_mask_unstructured(&s, 1.5, Scope::PerRow).is_err());
    }

    #[test]
    fn half_sparsity_prunes_lower_cost() {
        let mask = select_mask_unstructured(&map(&[&[1.0, 2.0]]), 0.5, Scope::PerRow).unwrap();
        assert!(!mask.keep(0, 0));
        assert!(mask.keep(0, 1));
    }

    #[test]
    fn ties_break_by_column_then_row() {
        let s = map(&[&[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0]]);
        let row = select_mask_unstructured(&s, 0.34, Scope::PerRow).unwrap();
        assert_eq!(row.row(0), &[false, true, true]);
        assert_eq!(row.row(1), &[false, true, true]);
        let layer = select_mask_unstructured(&s, 0.5, Scope::PerLayer).unwrap();
        // (0,0), (1,0), (0,1)
        assert_eq!(layer.row(0), &[false, false, true]);
        assert_eq!(layer.row(1), &[false, true, true]);
    }

    #[test]
    fn round_half_up() {
        assert_eq!(prune_count(0.5, 3), 2);
        assert_eq!(prune_count(0.25, 2), 1);
        assert_eq!(prune_count(0.24, 2), 0);
        assert_eq!(prune_count(1.0, 7), 7);
    }

    #[test]
    fn two_four_per_group() {
        let mask = select_mask_nm(&map(&[&[4.0, 1.0, 3.0, 2.0]]), 2, 4).unwrap();
        assert_eq!(mask.row(0), &[true, false, true, false]);
        assert_eq!(mask.achieved_sparsity(), 0.5);
    }

    #[test]
    fn zero_of_m_keeps_all() {
        let s = map(&[&[4.0, 1.0, 3.0, 2.0]]);
        assert_eq!(select_mask_nm(&s, 0, 4).unwrap(), SparsityMask::all_kept(1, 4));
    }

    #[test]
    fn nm_config_errors() {
        let s = map(&[&[4.0, 1.0, 3.0, 2.0, 5.0, 6.0]]);
        assert!(matches!(select_mask_nm(&s, 2, 4), Err(Error::Config(_))));
        assert!(matches!(select_mask_nm(&s, 3, 3), Err(Error::Config(_))));
        assert!(matches!(select_mask_nm(&s, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn two_four_is_always_half() {
        let s = map(&[
            &[0.3, 0.1, 0.9, 0.4, 0.0, 0.0, 0.0, 0.0],
            &[5.0, 4.0, 3.0, 2.0, 1.0, 2.0, 3.0, 4.0],
        ]);
        assert_eq!(select_mask_nm(&s, 2, 4).unwrap().achieved_sparsity(), 0.5);
    }

    #[test]
    fn saliency_map_rejects_negative_values() {
        assert!(SaliencyMap::new(Matrix::from_rows(&[[-1.0]]), Criterion::Magnitude).is_err());
    }
}
