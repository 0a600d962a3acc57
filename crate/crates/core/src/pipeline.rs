//! End-to-end pruning: Hessians, sensitivities, allocation, reconstruction.
//!
//! Layers are pruned independently against the dense activations recorded
//! in the calibration container. Report rows follow manifest order.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocator::{allocate, default_clips, layer_sensitivity, plan_uniform, AllocatorKind, LayerSensitivity, SparsityPlan};
use crate::calibration::{HessianState, DEFAULT_DAMP_PERCENT};
use crate::error::{Error, Result};
use crate::model_io::{validate_manifest, LayerHandle, ModelManifest, TensorContainer, FORMAT_VERSION};
use crate::pruner::{prune_blocked, prune_with_mask, PruneMethod, PrunedLayer};
use crate::saliency::{compute_saliency, select_mask_nm, select_mask_unstructured, Criterion, SaliencyMap, Scope};
use crate::tensor::{matmul, Matrix};

pub const REPORT_VERSION: u32 = 1;

/// Default block width when the blocked method is selected without one.
pub const DEFAULT_BLOCK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NmPattern {
    pub n: usize,
    pub m: usize,
}

impl std::str::FromStr for NmPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("n:m pattern `{s}` is not N:M"));
        let (n, m) = s.split_once(':').ok_or_else(bad)?;
        let n = n.trim().parse().map_err(|_| bad())?;
        let m = m.trim().parse().map_err(|_| bad())?;
        if m == 0 || n >= m {
            return Err(Error::Config(format!("n:m pattern needs n < m, got {n}:{m}")));
        }
        Ok(NmPattern { n, m })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub sparsity: f64,
    pub criterion: Criterion,
    pub allocator: AllocatorKind,
    pub scope: Scope,
    pub method: PruneMethod,
    pub damp: f64,
    #[serde(default)]
    pub block: Option<usize>,
    #[serde(default)]
    pub nm: Option<NmPattern>,
    #[serde(default)]
    pub p_min: Option<f64>,
    #[serde(default)]
    pub p_max: Option<f64>,
    #[serde(default)]
    pub probe: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            sparsity: 0.5,
            criterion: Criterion::Obs,
            allocator: AllocatorKind::Inverse,
            scope: Scope::PerRow,
            method: PruneMethod::ClosedForm,
            damp: DEFAULT_DAMP_PERCENT,
            block: None,
            nm: None,
            p_min: None,
            p_max: None,
            probe: None,
            seed: 0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("sparsity", self.sparsity)?;
        if let Some(v) = self.p_min {
            unit("pmin", v)?;
        }
        if let Some(v) = self.p_max {
            unit("pmax", v)?;
        }
        if let Some(v) = self.probe {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("probe must lie in (0, 1], got {v}")));
            }
        }
        if !(self.damp >= 0.0) || !self.damp.is_finite() {
            return Err(Error::Config(format!("dampening must be finite and >= 0, got {}", self.damp)));
        }
        if let Some(NmPattern { n, m }) = self.nm {
            if m == 0 || n >= m {
                return Err(Error::Config(format!("n:m pattern needs n < m, got {n}:{m}")));
            }
        }
        match (self.method, self.block) {
            (PruneMethod::Blocked, Some(0)) => {
                return Err(Error::Config("block size must be at least 1".into()))
            }
            (PruneMethod::Blocked, _) => {
                if self.nm.is_some() {
                    return Err(Error::Config("n:m patterns cannot be combined with blocked pruning".into()));
                }
                if self.scope == Scope::PerLayer {
                    return Err(Error::Config("blocked pruning selects per row; use --scope per-row".into()));
                }
            }
            (_, Some(_)) => {
                return Err(Error::Config("a block size only applies to the blocked method".into()))
            }
            _ => {}
        }
        Ok(())
    }

    /// Sparsity at which layer sensitivities are measured.
    pub fn effective_probe(&self) -> f64 {
        self.probe
            .unwrap_or(if self.sparsity > 0.0 { self.sparsity } else { 1.0 })
    }

    pub fn clip_bounds(&self) -> (f64, f64) {
        let (lo, hi) = default_clips(self.sparsity);
        (self.p_min.unwrap_or(lo), self.p_max.unwrap_or(hi))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub weight: String,
    pub target_sparsity: f64,
    pub achieved_sparsity: f64,
    pub pruned_count: usize,
    pub param_count: usize,
    pub recon_error: f64,
    pub criterion: Criterion,
    pub method: PruneMethod,
    pub sensitivity: f64,
    pub n_samples: usize,
    pub damp_lambda: f64,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalReport {
    pub param_count: usize,
    pub pruned_count: usize,
    pub sparsity: f64,
    pub total_recon_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub report_version: u32,
    pub format_version: u32,
    pub config: PruneConfig,
    pub probe: f64,
    pub plan: SparsityPlan,
    pub layers: Vec<LayerReport>,
    pub global: GlobalReport,
}

impl PruneReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// One layer's Hessian state and saliency, ready for pruning.
pub struct PreparedLayer {
    pub handle: LayerHandle,
    pub weights: Matrix,
    pub state: HessianState,
    pub saliency: SaliencyMap,
    pub elapsed_ms: f64,
}

fn prepare_layer(
    handle: &LayerHandle,
    model: &TensorContainer,
    calib: &TensorContainer,
    criterion: Criterion,
    damp: f64,
) -> Result<PreparedLayer> {
    let t0 = Instant::now();
    let w = model.matrix(&handle.weight).expect("validated").clone();
    let x = calib.matrix(&handle.calib).expect("validated");
    let state = HessianState::new(handle.d_in).accumulate(x)?.dampen(damp)?;
    let h_inv = state.invert()?;
    let saliency = compute_saliency(&w, &state, &h_inv, criterion)?;
    Ok(PreparedLayer {
        handle: handle.clone(),
        weights: w,
        state,
        saliency,
        elapsed_ms: t0.elapsed().as_secs_f64() * 1e3,
    })
}

/// Validates inputs and builds every layer's Hessian and saliency.
pub fn prepare_layers(
    manifest: &ModelManifest,
    model: &TensorContainer,
    calib: &TensorContainer,
    criterion: Criterion,
    damp: f64,
) -> Result<Vec<PreparedLayer>> {
    let validated = validate_manifest(manifest, model, calib)?;
    validated
        .layers
        .par_iter()
        .map(|h| prepare_layer(h, model, calib, criterion, damp).map_err(|e| e.in_layer(&h.name)))
        .collect()
}

/// Sensitivity of each prepared layer at `probe` sparsity.
pub fn sensitivities(layers: &[PreparedLayer], probe: f64) -> Result<Vec<LayerSensitivity>> {
    layers
        .iter()
        .map(|l| layer_sensitivity(&l.handle.name, &l.saliency, probe))
        .collect()
}

fn prune_layer(layer: &PreparedLayer, p: f64, cfg: &PruneConfig) -> Result<PrunedLayer> {
    if cfg.method == PruneMethod::Blocked {
        let block = cfg.block.unwrap_or(DEFAULT_BLOCK);
        return prune_blocked(&layer.weights, p, cfg.criterion, &layer.state, block);
    }
    let mask = match cfg.nm {
        Some(NmPattern { n, m }) => select_mask_nm(&layer.saliency, n, m)?,
        None => select_mask_unstructured(&layer.saliency, p, cfg.scope)?,
    };
    prune_with_mask(&layer.weights, &mask, &layer.state, cfg.method)
}

/// Runs the full pipeline and returns the pruned model (all tensors of
/// `model`, with layer weights replaced) and its report.
pub fn run_pipeline(
    cfg: &PruneConfig,
    model: &TensorContainer,
    manifest: &ModelManifest,
    calib: &TensorContainer,
) -> Result<(TensorContainer, PruneReport)> {
    cfg.validate()?;
    let prepared = prepare_layers(manifest, model, calib, cfg.criterion, cfg.damp)?;
    let probe = cfg.effective_probe();
    let sens = sensitivities(&prepared, probe)?;

    let plan = match cfg.nm {
        Some(NmPattern { n, m }) => {
            let layers: Vec<(String, usize)> = sens
                .iter()
                .map(|s| (s.layer.clone(), s.param_count))
                .collect();
            plan_uniform(&layers, n as f64 / m as f64)?
        }
        None => {
            let (lo, hi) = cfg.clip_bounds();
            allocate(cfg.allocator, &sens, cfg.sparsity, lo, hi)?
        }
    };

    let pruned: Vec<(PrunedLayer, f64)> = prepared
        .par_iter()
        .zip(&plan.layers)
        .map(|(layer, entry)| {
            let t0 = Instant::now();
            let out = prune_layer(layer, entry.sparsity, cfg).map_err(|e| e.in_layer(&layer.handle.name))?;
            Ok((out, t0.elapsed().as_secs_f64() * 1e3))
        })
        .collect::<Result<_>>()?;

    let mut output = model.clone();
    let mut rows = Vec::with_capacity(prepared.len());
    for (((layer, (out, ms)), entry), s) in prepared.iter().zip(pruned).zip(&plan.layers).zip(&sens) {
        let pruned_count = out.mask.pruned_count();
        rows.push(LayerReport {
            name: layer.handle.name.clone(),
            weight: layer.handle.weight.clone(),
            target_sparsity: entry.sparsity,
            achieved_sparsity: out.mask.achieved_sparsity(),
            pruned_count,
            param_count: layer.handle.param_count(),
            recon_error: out.recon_error,
            criterion: cfg.criterion,
            method: out.method,
            sensitivity: s.score,
            n_samples: layer.state.n_samples(),
            damp_lambda: layer.state.damp_lambda(),
            wall_time_ms: layer.elapsed_ms + ms,
        });
        output.replace(&layer.handle.weight, out.weights)?;
    }

    let param_count: usize = rows.iter().map(|r| r.param_count).sum();
    let pruned_count: usize = rows.iter().map(|r| r.pruned_count).sum();
    let global = GlobalReport {
        param_count,
        pruned_count,
        sparsity: if param_count == 0 {
            0.0
        } else {
            pruned_count as f64 / param_count as f64
        },
        total_recon_error: rows.iter().map(|r| r.recon_error).sum(),
    };
    let report = PruneReport {
        report_version: REPORT_VERSION,
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        probe,
        plan,
        layers: rows,
        global,
    };
    Ok((output, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEval {
    pub name: String,
    pub output_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub layers: Vec<LayerEval>,
    pub total: f64,
}

/// `‖X·Aᵀ − X·Bᵀ‖_F²` per layer from the recorded activations.
pub fn eval_model(
    a: &TensorContainer,
    b: &TensorContainer,
    manifest: &ModelManifest,
    calib: &TensorContainer,
) -> Result<EvalReport> {
    let va = validate_manifest(manifest, a, calib)?;
    let vb = validate_manifest(manifest, b, calib)?;
    let mut layers = Vec::with_capacity(va.layers.len());
    for (ha, hb) in va.layers.iter().zip(&vb.layers) {
        if (ha.d_out, ha.d_in) != (hb.d_out, hb.d_in) {
            return Err(Error::Validation {
                layer: ha.name.clone(),
                reason: format!(
                    "weights differ in shape: {}x{} vs {}x{}",
                    ha.d_out, ha.d_in, hb.d_out, hb.d_in
                ),
            });
        }
        let x = calib.matrix(&ha.calib).expect("validated");
        let ya = matmul(x, &a.matrix(&ha.weight).expect("validated").transpose())?;
        let yb = matmul(x, &b.matrix(&hb.weight).expect("validated").transpose())?;
        let err = ya
            .data()
            .iter()
            .zip(yb.data())
            .map(|(p, q)| (p - q) * (p - q))
            .sum();
        layers.push(LayerEval {
            name: ha.name.clone(),
            output_error: err,
        });
    }
    let total = layers.iter().map(|l| l.output_error).sum();
    Ok(EvalReport { layers, total })
}
