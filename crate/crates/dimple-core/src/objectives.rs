//! Training objectives.
//!
//! All losses are temperature-scaled cosine-similarity classifiers over unit
//! embeddings:
//!
//! - invariant cross-entropy: softmax over classes of `cos(z_v_u, z_t_u)/tau`
//!   against the sample's label (one image against all class embeddings);
//! - spurious uniformity: `KL(p_s || uniform)` on the spurious-vs-spurious
//!   logits, which equals `log C - H(p_s)` per sample;
//! - class-conditioned HSIC penalty from [`crate::independence`].
//!
//! The combined objective is `ce + alpha * sp_r + beta * cmi`. Terms with a
//! zero coefficient (or masked out for ablations) are skipped entirely and
//! reported as zero, so e.g. `alpha = beta = 0` yields a total that is the
//! cross-entropy node itself. Batch means (not sums) keep `alpha`, `beta`
//! batch-size independent.
//!
//! Cosine logits are bounded by `1/tau`, so softmax probabilities stay
//! strictly positive; `log(p)` is safe on every realistic path (underflow
//! would need logit gaps beyond ~700).

use crate::error::{Error, Result};
use crate::heads::{FeatureBundle, HeadSet, LinearHead};
use crate::independence::{cmi_loss, conditional_hsic, KernelSpec};
use crate::tensor::{Graph, TensorId};

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    /// Spurious-uniformity weight.
    pub alpha: f64,
    /// Conditional mutual-information weight.
    pub beta: f64,
    /// Similarity temperature.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 1.0, tau: 0.07 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.tau <= 0.0 {
            return Err(Error::Config(format!(
                "loss weights require alpha >= 0, beta >= 0, tau > 0; got alpha={} beta={} tau={}",
                self.alpha, self.beta, self.tau
            )));
        }
        Ok(())
    }
}

/// Which loss terms participate in the total (ablation control; all on for
/// the published objectives).
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TermMask {
    pub ce: bool,
    pub sp: bool,
    pub cmi: bool,
}

impl TermMask {
    pub const ALL: TermMask = TermMask { ce: true, sp: true, cmi: true };
}

impl Default for TermMask {
    fn default() -> Self {
        TermMask::ALL
    }
}

/// Row-major probability matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ProbMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(j, _)| j)
                    .unwrap()
            })
            .collect()
    }
}

/// Everything a training step needs to know about one loss evaluation.
/// `total = ce_u + alpha * sp_r + beta * cmi` holds by construction (skipped
/// terms are zero). `total_id` is the differentiable node for backward.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub total: f64,
    pub ce_u: f64,
    pub sp_r: f64,
    pub cmi: f64,
    pub p_u: ProbMatrix,
    pub p_s: Option<ProbMatrix>,
    pub total_id: TensorId,
}

fn prob_matrix(g: &Graph, id: TensorId) -> ProbMatrix {
    let shape = g.shape(id);
    ProbMatrix { rows: shape[0], cols: shape[1], data: g.value(id).to_vec() }
}

/// `cos(za_i, zb_c) / tau` as an `[N x C]` logit matrix (rows unit-norm by
/// the callers' contracts, so the matmul is a literal cosine).
fn cosine_logits(g: &mut Graph, z_a: TensorId, z_b: TensorId, tau: f64) -> Result<TensorId> {
    let bt = g.transpose(z_b)?;
    let sims = g.matmul(z_a, bt)?;
    g.scale(sims, 1.0 / tau)
}

/// Mean negative log-likelihood of the labels under row-softmax logits.
fn ce_from_logits(g: &mut Graph, logits: TensorId, labels: &[usize]) -> Result<(TensorId, TensorId)> {
    let n = g.shape(logits)[0];
    let probs = g.softmax(logits, 1)?;
    let picked = g.select_per_row(probs, labels)?;
    let lp = g.log(picked)?;
    let s = g.sum(lp)?;
    let loss = g.scale(s, -1.0 / n as f64)?;
    Ok((loss, probs))
}

/// Mean `KL(softmax(logits) || uniform)`; always >= 0.
fn kl_uniform_from_logits(g: &mut Graph, logits: TensorId) -> Result<(TensorId, TensorId)> {
    let (n, c) = {
        let s = g.shape(logits);
        (s[0], s[1])
    };
    let probs = g.softmax(logits, 1)?;
    let scaled = g.scale(probs, c as f64)?;
    let lp = g.log(scaled)?;
    let plp = g.mul(probs, lp)?;
    let s = g.sum(plp)?;
    let loss = g.scale(s, 1.0 / n as f64)?;
    Ok((loss, probs))
}

/// Invariant cross-modal alignment loss over a decomposed bundle.
pub fn invariant_ce(g: &mut Graph, bundle: &FeatureBundle, w: &LossWeights) -> Result<(TensorId, TensorId)> {
    w.validate()?;
    if bundle.num_classes(g) < 2 {
        return Err(Error::DegenerateTask(format!(
            "classification needs >= 2 classes, got {}",
            bundle.num_classes(g)
        )));
    }
    let logits = cosine_logits(g, bundle.z_v_u, bundle.z_t_u, w.tau)?;
    ce_from_logits(g, logits, &bundle.labels)
}

/// Uniformity regularizer on the spurious pathway.
pub fn spurious_uniformity(g: &mut Graph, bundle: &FeatureBundle, w: &LossWeights) -> Result<(TensorId, TensorId)> {
    w.validate()?;
    let logits = cosine_logits(g, bundle.z_v_s, bundle.z_t_s, w.tau)?;
    kl_uniform_from_logits(g, logits)
}

struct Assembled {
    total_id: TensorId,
    total: f64,
    ce: f64,
    sp: f64,
    cmi: f64,
}

/// Weighted sum of whichever terms are present. Zero-coefficient or masked
/// terms never enter the graph, so degenerate configurations reduce bitwise.
fn assemble(
    g: &mut Graph,
    ce: Option<TensorId>,
    sp: Option<TensorId>,
    cmi: Option<TensorId>,
    w: &LossWeights,
) -> Result<Assembled> {
    let mut total: Option<TensorId> = ce;
    if let Some(sp_id) = sp {
        let term = if w.alpha == 1.0 { sp_id } else { g.scale(sp_id, w.alpha)? };
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    if let Some(cmi_id) = cmi {
        let term = if w.beta == 1.0 { cmi_id } else { g.scale(cmi_id, w.beta)? };
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total_id = total.ok_or_else(|| Error::Config("all loss terms masked out".to_string()))?;
    Ok(Assembled {
        total_id,
        total: g.scalar_value(total_id),
        ce: ce.map_or(0.0, |id| g.scalar_value(id)),
        sp: sp.map_or(0.0, |id| g.scalar_value(id)),
        cmi: cmi.map_or(0.0, |id| g.scalar_value(id)),
    })
}

/// The combined objective with ablation control over the three terms.
pub fn dimple_total_masked(
    g: &mut Graph,
    bundle: &FeatureBundle,
    w: &LossWeights,
    spec: &KernelSpec,
    mask: TermMask,
) -> Result<LossReport> {
    w.validate()?;
    let (ce_id, p_u) = {
        let (loss, probs) = invariant_ce(g, bundle, w)?;
        (mask.ce.then_some(loss), probs)
    };
    let (sp_id, p_s) = {
        let (loss, probs) = spurious_uniformity(g, bundle, w)?;
        ((mask.sp && w.alpha != 0.0).then_some(loss), probs)
    };
    let cmi_id = if mask.cmi && w.beta != 0.0 {
        Some(cmi_loss(g, bundle, spec)?)
    } else {
        None
    };
    let a = assemble(g, ce_id, sp_id, cmi_id, w)?;
    Ok(LossReport {
        total: a.total,
        ce_u: a.ce,
        sp_r: a.sp,
        cmi: a.cmi,
        p_u: prob_matrix(g, p_u),
        p_s: Some(prob_matrix(g, p_s)),
        total_id: a.total_id,
    })
}

/// `L = L_ce^u + alpha L_r^sp + beta L_cmi` over a decomposed bundle.
pub fn dimple_total(
    g: &mut Graph,
    bundle: &FeatureBundle,
    w: &LossWeights,
    spec: &KernelSpec,
) -> Result<LossReport> {
    dimple_total_masked(g, bundle, w, spec, TermMask::ALL)
}

/// Early-disentanglement total: alignment on the invariant encodings,
/// uniformity on the spurious ones, and a vision-only CMI term.
#[allow(clippy::too_many_arguments)]
pub fn early_total(
    g: &mut Graph,
    t_u: TensorId,
    t_s: TensorId,
    v_u: TensorId,
    v_s: TensorId,
    labels: &[usize],
    w: &LossWeights,
    spec: &KernelSpec,
) -> Result<LossReport> {
    w.validate()?;
    if g.shape(t_u)[0] < 2 {
        return Err(Error::DegenerateTask(format!(
            "classification needs >= 2 classes, got {}",
            g.shape(t_u)[0]
        )));
    }
    let inv_logits = cosine_logits(g, v_u, t_u, w.tau)?;
    let (ce_id, p_u) = ce_from_logits(g, inv_logits, labels)?;
    let spu_logits = cosine_logits(g, v_s, t_s, w.tau)?;
    let (sp_id, p_s) = kl_uniform_from_logits(g, spu_logits)?;
    let cmi_id = if w.beta != 0.0 {
        Some(conditional_hsic(g, v_u, v_s, labels, spec)?)
    } else {
        None
    };
    let a = assemble(g, Some(ce_id), (w.alpha != 0.0).then_some(sp_id), cmi_id, w)?;
    Ok(LossReport {
        total: a.total,
        ce_u: a.ce,
        sp_r: a.sp,
        cmi: a.cmi,
        p_u: prob_matrix(g, p_u),
        p_s: Some(prob_matrix(g, p_s)),
        total_id: a.total_id,
    })
}

/// Plain contrastive cross-entropy on undecomposed embeddings.
pub fn coop_baseline(
    g: &mut Graph,
    z_v: TensorId,
    z_t: TensorId,
    labels: &[usize],
    w: &LossWeights,
) -> Result<LossReport> {
    w.validate()?;
    if g.shape(z_t)[0] < 2 {
        return Err(Error::DegenerateTask(format!(
            "classification needs >= 2 classes, got {}",
            g.shape(z_t)[0]
        )));
    }
    let logits = cosine_logits(g, z_v, z_t, w.tau)?;
    let (ce_id, p_u) = ce_from_logits(g, logits, labels)?;
    Ok(LossReport {
        total: g.scalar_value(ce_id),
        ce_u: g.scalar_value(ce_id),
        sp_r: 0.0,
        cmi: 0.0,
        p_u: prob_matrix(g, p_u),
        p_s: None,
        total_id: ce_id,
    })
}

/// Vision-only decoupling: image features are split into invariant/spurious
/// components, but both terms pull on the same general text features. The
/// CMI term is vision-only.
pub fn coop_ood_baseline(
    g: &mut Graph,
    z_v: TensorId,
    z_t: TensorId,
    heads: &HeadSet,
    labels: &[usize],
    w: &LossWeights,
    spec: &KernelSpec,
) -> Result<LossReport> {
    w.validate()?;
    if g.shape(z_t)[0] < 2 {
        return Err(Error::DegenerateTask(format!(
            "classification needs >= 2 classes, got {}",
            g.shape(z_t)[0]
        )));
    }
    let z_v_u = project_normalized(g, &heads.phi_v, z_v)?;
    let z_v_s = project_normalized(g, &heads.psi_v, z_v)?;
    let inv_logits = cosine_logits(g, z_v_u, z_t, w.tau)?;
    let (ce_id, p_u) = ce_from_logits(g, inv_logits, labels)?;
    let spu_logits = cosine_logits(g, z_v_s, z_t, w.tau)?;
    let (sp_id, p_s) = kl_uniform_from_logits(g, spu_logits)?;
    let cmi_id = if w.beta != 0.0 {
        Some(conditional_hsic(g, z_v_u, z_v_s, labels, spec)?)
    } else {
        None
    };
    let a = assemble(g, Some(ce_id), (w.alpha != 0.0).then_some(sp_id), cmi_id, w)?;
    Ok(LossReport {
        total: a.total,
        ce_u: a.ce,
        sp_r: a.sp,
        cmi: a.cmi,
        p_u: prob_matrix(g, p_u),
        p_s: Some(prob_matrix(g, p_s)),
        total_id: a.total_id,
    })
}

pub(crate) fn project_normalized(g: &mut Graph, head: &LinearHead, x: TensorId) -> Result<TensorId> {
    let h = head.apply(g, x)?;
    g.normalize_rows(h).map_err(|e| match e {
        Error::ZeroRow { row } => {
            Error::DegenerateProjection(format!("head mapped row {row} to a zero vector"))
        }
        other => other,
    })
}
