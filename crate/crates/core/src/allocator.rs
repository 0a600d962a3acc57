//! Per-layer sensitivity and global sparsity budgeting.
//!
//! The built-in `inverse` rule sets `p_l = clamp(c / (score_l + τ), p_min, p_max)`
//! and solves for the common level `c` that makes the parameter-weighted mean
//! equal the global target. `g(c) = Σ n_l·p_l(c)` is continuous, piecewise
//! linear and non-decreasing, so the level is found exactly by walking its
//! breakpoints (the water-filling solution).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::saliency::{prune_count, SaliencyMap};

/// Offset keeping `1/(score + τ)` finite for zero-sensitivity layers.
pub const SCORE_OFFSET: f64 = 1e-12;

/// Tolerance on the parameter-weighted mean of a plan.
pub const BUDGET_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSensitivity {
    pub layer: String,
    pub score: f64,
    pub param_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocatorKind {
    Uniform,
    #[default]
    Inverse,
    Paper,
}

impl fmt::Display for AllocatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AllocatorKind::Uniform => "uniform",
            AllocatorKind::Inverse => "inverse",
            AllocatorKind::Paper => "paper",
        })
    }
}

impl FromStr for AllocatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(AllocatorKind::Uniform),
            "inverse" => Ok(AllocatorKind::Inverse),
            "paper" => Ok(AllocatorKind::Paper),
            other => Err(Error::Config(format!(
                "unknown allocator `{other}` (expected uniform, inverse or paper)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub layer: String,
    pub sparsity: f64,
    pub param_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityPlan {
    pub global_target: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub allocator: AllocatorKind,
    pub layers: Vec<PlanEntry>,
}

impl SparsityPlan {
    pub fn get(&self, layer: &str) -> Option<f64> {
        self.layers.iter().find(|e| e.layer == layer).map(|e| e.sparsity)
    }

    /// Parameter-weighted mean of the per-layer ratios.
    pub fn weighted_mean(&self) -> f64 {
        let n: usize = self.layers.iter().map(|e| e.param_count).sum();
        if n == 0 {
            return 0.0;
        }
        self.layers
            .iter()
            .map(|e| e.sparsity * e.param_count as f64)
            .sum::<f64>()
            / n as f64
    }
}

/// Estimated pruning cost per parameter at `probe` sparsity: the sum of the
/// `round(probe·N)` smallest costs divided by `N`.
pub fn layer_sensitivity(layer: &str, s: &SaliencyMap, probe: f64) -> Result<LayerSensitivity> {
    if !(probe > 0.0 && probe <= 1.0) {
        return Err(Error::Config(format!(
            "sensitivity probe must lie in (0, 1], got {probe}"
        )));
    }
    let mut v = s.values().data().to_vec();
    let n = v.len();
    v.sort_by(f64::total_cmp);
    let k = prune_count(probe, n);
    let score = if n == 0 {
        0.0
    } else {
        v[..k].iter().sum::<f64>() / n as f64
    };
    Ok(LayerSensitivity {
        layer: layer.to_string(),
        score,
        param_count: n,
    })
}

/// Default clip bounds around a global target: `[0.1·p̄, min(0.9, 2·p̄)]`,
/// widened so the target itself is always admissible.
pub fn default_clips(target: f64) -> (f64, f64) {
    let lo = (0.1 * target).max(0.0);
    let hi = (2.0 * target).min(0.9).max(target);
    (lo, hi)
}

fn check_inputs(sens: &[LayerSensitivity], target: f64, p_min: f64, p_max: f64) -> Result<()> {
    if sens.is_empty() {
        return Err(Error::Config("allocation needs at least one layer".into()));
    }
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Config(format!("global sparsity must lie in [0, 1], got {target}")));
    }
    if !(0.0 <= p_min && p_min <= p_max && p_max <= 1.0) {
        return Err(Error::Config(format!(
            "clip bounds must satisfy 0 <= pmin <= pmax <= 1, got [{p_min}, {p_max}]"
        )));
    }
    if target < p_min {
        return Err(Error::Budget(format!(
            "target {target} is below the pmin bound {p_min}"
        )));
    }
    if target > p_max {
        return Err(Error::Budget(format!(
            "target {target} is above the pmax bound {p_max}"
        )));
    }
    if let Some(s) = sens.iter().find(|s| s.score.is_nan() || s.score < 0.0) {
        return Err(Error::Config(format!(
            "layer `{}` has invalid sensitivity {}",
            s.layer, s.score
        )));
    }
    Ok(())
}

/// Every layer at the global target.
pub fn plan_uniform(layers: &[(String, usize)], target: f64) -> Result<SparsityPlan> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Config(format!("global sparsity must lie in [0, 1], got {target}")));
    }
    Ok(SparsityPlan {
        global_target: target,
        p_min: target,
        p_max: target,
        allocator: AllocatorKind::Uniform,
        layers: layers
            .iter()
            .map(|(name, n)| PlanEntry {
                layer: name.clone(),
                sparsity: target,
                param_count: *n,
                score: None,
            })
            .collect(),
    })
}

/// Inverse-sensitivity allocation with clipping.
pub fn allocate_sparsity(
    sens: &[LayerSensitivity],
    target: f64,
    p_min: f64,
    p_max: f64,
) -> Result<SparsityPlan> {
    check_inputs(sens, target, p_min, p_max)?;
    let weights: Vec<f64> = sens.iter().map(|s| s.param_count as f64).collect();
    let total: f64 = weights.iter().sum();
    let raw: Vec<f64> = sens.iter().map(|s| 1.0 / (s.score + SCORE_OFFSET)).collect();

    let entries = |ratios: Vec<f64>| -> Vec<PlanEntry> {
        sens.iter()
            .zip(ratios)
            .map(|(s, p)| PlanEntry {
                layer: s.layer.clone(),
                sparsity: p,
                param_count: s.param_count,
                score: Some(s.score),
            })
            .collect()
    };
    let plan = |ratios| SparsityPlan {
        global_target: target,
        p_min,
        p_max,
        allocator: AllocatorKind::Inverse,
        layers: entries(ratios),
    };

    if total == 0.0 {
        return Ok(plan(vec![target; sens.len()]));
    }

    let budget = target * total;
    let ratios_at = |c: f64| -> Vec<f64> {
        raw.iter().map(|r| (c * r).clamp(p_min, p_max)).collect()
    };
    let mass = |c: f64| -> f64 {
        raw.iter()
            .zip(&weights)
            .map(|(r, n)| n * (c * r).clamp(p_min, p_max))
            .sum()
    };

    let max_mass = mass(f64::MAX);
    if max_mass < budget - BUDGET_TOLERANCE * total {
        return Err(Error::Budget(format!(
            "target {target} is unreachable: layers with infinite sensitivity are pinned at pmin {p_min}, \
             and every other layer at the pmax bound {p_max} only reaches {}",
            max_mass / total
        )));
    }
    if mass(0.0) >= budget {
        return Ok(plan(ratios_at(0.0)));
    }

    let mut breaks: Vec<f64> = raw
        .iter()
        .filter(|r| **r > 0.0)
        .flat_map(|r| [p_min / r, p_max / r])
        .filter(|c| c.is_finite())
        .collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();

    let mut lo = 0.0;
    let mut lo_mass = mass(0.0);
    for &b in &breaks {
        let b_mass = mass(b);
        if b_mass >= budget {
            let mid = 0.5 * (lo + b);
            let slope: f64 = raw
                .iter()
                .zip(&weights)
                .filter(|(r, _)| {
                    let v = mid * **r;
                    v > p_min && v < p_max
                })
                .map(|(r, n)| r * n)
                .sum();
            let c = if slope > 0.0 {
                (lo + (budget - lo_mass) / slope).clamp(lo, b)
            } else {
                b
            };
            return Ok(plan(ratios_at(c)));
        }
        lo = b;
        lo_mass = b_mass;
    }
    // only reachable when the budget sits within tolerance of max_mass
    Ok(plan(ratios_at(breaks.last().copied().unwrap_or(0.0))))
}

/// Dispatches on the allocator tag.
pub fn allocate(
    kind: AllocatorKind,
    sens: &[LayerSensitivity],
    target: f64,
    p_min: f64,
    p_max: f64,
) -> Result<SparsityPlan> {
    match kind {
        AllocatorKind::Uniform => {
            check_inputs(sens, target, p_min.min(target), p_max.max(target))?;
            let layers: Vec<(String, usize)> = sens
                .iter()
                .map(|s| (s.layer.clone(), s.param_count))
                .collect();
            let mut plan = plan_uniform(&layers, target)?;
            for (e, s) in plan.layers.iter_mut().zip(sens) {
                e.score = Some(s.score);
            }
            Ok(plan)
        }
        AllocatorKind::Inverse => allocate_sparsity(sens, target, p_min, p_max),
        AllocatorKind::Paper => Err(Error::Config(
            "allocator `paper` has no built-in rule; use `inverse` or `uniform`".into(),
        )),
    }
}
