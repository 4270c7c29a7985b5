//! Central finite-difference gradient verification.
//!
//! The checker perturbs one stored parameter value at a time, re-evaluates a
//! scalar loss, and compares `(f(x+h) - f(x-h)) / 2h` against the analytic
//! gradient from [`crate::tensor::Graph::backward`]. Relative error uses an
//! absolute floor so near-zero gradients are compared on an absolute scale.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::params::ParamStore;

/// Step size for the central difference (64-bit precision assumed).
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Step for whole-model checks: the 1/tau = 14.3 logit scaling raises third
/// derivatives enough that h = 1e-5 truncation error (~h^2 f'''/6) sits at
/// the 1e-4 relative threshold for near-zero gradients; 3e-6 balances
/// truncation against rounding.
pub const MODEL_FD_STEP: f64 = 3e-6;

/// Relative-error floor: gradients below this magnitude are compared
/// absolutely against the floor.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// Central difference of a scalar function of a scalar.
pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Worst relative error per parameter, for one scalar loss over a store.
///
/// `loss_fn` must be a pure function of the store contents: it is invoked
/// repeatedly on perturbed copies. `analytic` maps parameter name to the
/// gradient produced by one backward pass at the unperturbed point.
pub fn check_store_gradients(
    store: &ParamStore,
    analytic: &BTreeMap<String, Vec<f64>>,
    mut loss_fn: impl FnMut(&ParamStore) -> Result<f64>,
    h: f64,
) -> Result<BTreeMap<String, f64>> {
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    let mut scratch = store.clone();
    for (name, param) in store.iter() {
        let grad = analytic
            .get(name)
            .cloned()
            .unwrap_or_else(|| vec![0.0; param.numel()]);
        let mut max_err = 0.0f64;
        for j in 0..param.numel() {
            let orig = param.data[j];
            scratch.get_mut(name).unwrap().data[j] = orig + h;
            let plus = loss_fn(&scratch)?;
            scratch.get_mut(name).unwrap().data[j] = orig - h;
            let minus = loss_fn(&scratch)?;
            scratch.get_mut(name).unwrap().data[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            max_err = max_err.max(rel_err(grad[j], numeric));
        }
        worst.insert(name.to_string(), max_err);
    }
    Ok(worst)
}

// ── Whole-model gradient verification ────────────────────────────────

use crate::data::{generate, TaskSpec};
use crate::encoder::{EncoderConfig, PromptMode};
use crate::independence::{Bandwidth, KernelKind, KernelSpec};
use crate::model::{DimpleModel, Objective};
use crate::objectives::{LossWeights, TermMask};
use crate::tensor::Graph;

/// One parameter group's verdict.
#[derive(Clone, Debug)]
pub struct GroupResult {
    pub group: String,
    pub worst_rel_err: f64,
    pub worst_tensor: String,
}

#[derive(Clone, Debug)]
pub struct ObjectiveReport {
    pub objective: Objective,
    pub groups: Vec<GroupResult>,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub objectives: Vec<ObjectiveReport>,
    pub threshold: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.objectives
            .iter()
            .flat_map(|o| &o.groups)
            .all(|g| g.worst_rel_err < self.threshold)
    }

    pub fn render(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        for obj in &self.objectives {
            let _ = writeln!(out, "objective {}", obj.objective);
            for g in &obj.groups {
                let verdict = if g.worst_rel_err < self.threshold { "ok" } else { "FAIL" };
                let _ = writeln!(
                    out,
                    "  {:<10} worst rel err {:.3e} ({}) [{verdict}]",
                    g.group, g.worst_rel_err, g.worst_tensor
                );
            }
        }
        out
    }
}

/// Group a parameter name for the report.
fn param_group(name: &str) -> &'static str {
    if name.starts_with("bank.couple") || name.starts_with("bank.mu_u") || name.starts_with("bank.eta_s") {
        "coupling"
    } else if name.starts_with("bank.") {
        "prompts"
    } else if name.starts_with("heads.") {
        "heads"
    } else {
        "encoder"
    }
}

pub const GRADCHECK_THRESHOLD: f64 = 1e-4;

/// Verify every parameter gradient of every objective on a micro model
/// (K=2, J=2, b=1, d=8, N=4, C=3) against central finite differences.
///
/// The kernel bandwidth is fixed during checking: the median heuristic is
/// deliberately excluded from differentiation, so the comparison must hold
/// sigma constant on both the analytic and the numeric side.
///
/// `fault` (test fixture) corrupts the named tensor's analytic gradient so
/// the failure path stays honest.
pub fn run_model_gradcheck(seed: u64, fault: Option<&str>) -> Result<GradcheckReport> {
    let task = TaskSpec {
        num_classes: 3,
        samples_per_class: 4,
        test_samples_per_class: 4,
        spurious_attr_cardinality: 2,
        d_v: 8,
        num_patch_tokens: 4,
        noise_std: 0.3,
        semantic_rank: 3,
        seed,
        ..Default::default()
    };
    let enc = EncoderConfig {
        num_layers: 2,
        prompt_depth: 2,
        prompt_len: 1,
        d_l: 8,
        d_v: 8,
        d_vl: 8,
        num_heads: 2,
        vocab_size: 20,
        num_patch_tokens: 4,
        temperature: 0.07,
    };
    let data = generate(&task)?;
    // labels [0, 0, 1, 1]: two classes with two samples each keep every CMI
    // path differentiable; the text head still spans all three classes.
    let batch = data.test_id.select(&[0, 1, 4, 5], &task);
    let classes: Vec<usize> = (0..task.num_classes).collect();
    let weights = LossWeights { alpha: 1.0, beta: 1.0, tau: 0.07 };
    let kspec = KernelSpec {
        kind: KernelKind::Rbf,
        bandwidth: Bandwidth::Fixed(1.0),
        fallback_sigma: 1.0,
    };

    let mut objectives = Vec::new();
    for objective in Objective::ALL {
        let mode = if objective == Objective::DimpleEarly { PromptMode::Early } else { PromptMode::Coupled };
        let model = DimpleModel::new(enc.clone(), mode, objective, &task, seed)?;

        let mut analytic: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        {
            let mut g = Graph::new();
            let ctx = model.bind(&mut g)?;
            let report = model.loss(&mut g, &ctx, &batch, &classes, &weights, &kspec, TermMask::ALL)?;
            g.backward(report.total_id)?;
            for (name, id) in ctx.bound.iter() {
                let grad = g.grad(id).map_or_else(
                    || vec![0.0; model.store.get(name).unwrap().numel()],
                    |gr| gr.to_vec(),
                );
                analytic.insert(name.to_string(), grad);
            }
        }
        if let Some(bad) = fault {
            if let Some(grad) = analytic.get_mut(bad) {
                for v in grad.iter_mut() {
                    *v += 0.5;
                }
            }
        }

        let loss_fn = |store: &ParamStore| -> Result<f64> {
            let probe = model.with_store(store.clone());
            let mut g = Graph::new();
            let ctx = probe.bind(&mut g)?;
            let report = probe.loss(&mut g, &ctx, &batch, &classes, &weights, &kspec, TermMask::ALL)?;
            Ok(report.total)
        };
        let per_tensor = check_store_gradients(&model.store, &analytic, loss_fn, MODEL_FD_STEP)?;

        let mut groups: BTreeMap<&'static str, GroupResult> = BTreeMap::new();
        for (name, err) in per_tensor {
            let group = param_group(&name);
            let entry = groups.entry(group).or_insert_with(|| GroupResult {
                group: group.to_string(),
                worst_rel_err: -1.0,
                worst_tensor: String::new(),
            });
            if err > entry.worst_rel_err {
                entry.worst_rel_err = err;
                entry.worst_tensor = name;
            }
        }
        objectives.push(ObjectiveReport { objective, groups: groups.into_values().collect() });
    }
    Ok(GradcheckReport { objectives, threshold: GRADCHECK_THRESHOLD })
}
