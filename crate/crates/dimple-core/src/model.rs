//! Model assembly: parameters, forward passes, and per-objective losses.
//!
//! A [`DimpleModel`] owns the parameter store plus enough configuration to
//! rebuild every forward graph: encoder dims, prompt mode, objective, and
//! the task (for tokenization and class semantics). Class-token embeddings
//! are initialized from the task's core directions — the desk-scale stand-in
//! for a pretrained word embedding whose class names carry visual meaning;
//! this is init-only and novel-class rows never receive gradients.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Directions, LabeledBatch, TaskSpec};
use crate::encoder::{
    encode_image, encode_image_early, encode_text, encode_text_early, register_bank,
    register_encoders, tokenize_classes, tokenize_classes_early, EarlyClassTokens, EncoderConfig,
    EncoderParams, PromptBank, PromptMode, TokenizedClass, CLASS_TOKEN_BASE,
};
use crate::error::{Error, Result};
use crate::heads::{decompose, register_heads, HeadSet};
use crate::independence::KernelSpec;
use crate::objectives::{
    coop_baseline, coop_ood_baseline, dimple_total_masked, early_total, project_normalized,
    LossReport, LossWeights, TermMask,
};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::{Graph, TensorId};

/// Scale of the semantic class-token embedding rows (comparable to the norm
/// of a Gaussian 0.02-init embedding row at d = 32).
pub const SEMANTIC_EMBED_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    Dimple,
    DimpleEarly,
    Coop,
    CoopOod,
}

impl Objective {
    pub const ALL: [Objective; 4] = [Objective::Dimple, Objective::DimpleEarly, Objective::Coop, Objective::CoopOod];

    pub fn as_str(&self) -> &'static str {
        match self {
            Objective::Dimple => "dimple",
            Objective::DimpleEarly => "dimple_early",
            Objective::Coop => "coop",
            Objective::CoopOod => "coop_ood",
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.as_str())
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dimple" => Ok(Objective::Dimple),
            "dimple_early" => Ok(Objective::DimpleEarly),
            "coop" => Ok(Objective::Coop),
            "coop_ood" => Ok(Objective::CoopOod),
            other => Err(Error::Config(format!("unknown objective `{other}`"))),
        }
    }
}

/// Tokenized class sequences for whichever pathway the model runs.
#[derive(Clone, Debug)]
enum ClassTokens {
    Standard(Vec<TokenizedClass>),
    Early(Vec<EarlyClassTokens>),
}

#[derive(Clone, Debug)]
pub struct DimpleModel {
    pub store: ParamStore,
    pub enc_cfg: EncoderConfig,
    pub mode: PromptMode,
    pub objective: Objective,
    pub task: TaskSpec,
    pub seed: u64,
    tokens: ClassTokens,
}

/// Everything bound into one forward graph.
pub struct ForwardCtx {
    pub bound: BoundParams,
    pub enc: EncoderParams,
    pub bank: PromptBank,
    pub heads: HeadSet,
}

impl DimpleModel {
    /// Build and initialize a model. `objective = dimple_early` requires the
    /// early prompt mode and vice versa.
    pub fn new(
        enc_cfg: EncoderConfig,
        mode: PromptMode,
        objective: Objective,
        task: &TaskSpec,
        seed: u64,
    ) -> Result<Self> {
        enc_cfg.validate()?;
        task.validate()?;
        if (objective == Objective::DimpleEarly) != (mode == PromptMode::Early) {
            return Err(Error::Config(format!(
                "objective {objective} is incompatible with prompt mode {mode}: early objective <=> early mode"
            )));
        }
        if enc_cfg.num_patch_tokens != task.num_patch_tokens || enc_cfg.d_v != task.d_v {
            return Err(Error::Config(format!(
                "encoder expects {} patch tokens of width {}, task generates {} of width {}",
                enc_cfg.num_patch_tokens, enc_cfg.d_v, task.num_patch_tokens, task.d_v
            )));
        }
        let mut rng = crate::rng::substream(seed, "init");
        let mut store = ParamStore::new();
        register_encoders(&mut store, &enc_cfg, &mut rng);
        seed_class_semantics(&mut store, &enc_cfg, task);
        register_bank(&mut store, &enc_cfg, mode, &mut rng);
        register_heads(&mut store, enc_cfg.d_vl, &mut rng);
        let tokens = match mode {
            PromptMode::Early => ClassTokens::Early(tokenize_classes_early(task.num_classes, enc_cfg.vocab_size)?),
            _ => ClassTokens::Standard(tokenize_classes(
                crate::encoder::STANDARD_TEMPLATE,
                task.num_classes,
                enc_cfg.vocab_size,
            )?),
        };
        Ok(DimpleModel { store, enc_cfg, mode, objective, task: task.clone(), seed, tokens })
    }

    /// Clone of this model with a replaced parameter store (gradient
    /// checking perturbs copies).
    pub fn with_store(&self, store: ParamStore) -> DimpleModel {
        let mut m = self.clone();
        m.store = store;
        m
    }

    /// Bind all parameters into a fresh graph (learnable leaves).
    pub fn bind(&self, g: &mut Graph) -> Result<ForwardCtx> {
        let bound = self.store.bind(g)?;
        self.ctx_from(bound)
    }

    fn ctx_from(&self, bound: BoundParams) -> Result<ForwardCtx> {
        let enc = EncoderParams::bind(&bound, &self.enc_cfg)?;
        let bank = PromptBank::bind(&bound, &self.enc_cfg, self.mode)?;
        let heads = HeadSet::bind(&bound)?;
        Ok(ForwardCtx { bound, enc, bank, heads })
    }

    fn standard_tokens(&self, classes: &[usize]) -> Result<Vec<TokenizedClass>> {
        match &self.tokens {
            ClassTokens::Standard(all) => classes.iter().map(|&c| Ok(all[c].clone())).collect(),
            ClassTokens::Early(_) => Err(Error::Mode(
                "model is in early mode; standard class tokens unavailable".to_string(),
            )),
        }
    }

    fn early_tokens(&self, classes: &[usize]) -> Result<Vec<EarlyClassTokens>> {
        match &self.tokens {
            ClassTokens::Early(all) => classes.iter().map(|&c| Ok(all[c].clone())).collect(),
            ClassTokens::Standard(_) => Err(Error::Mode(
                "model is not in early mode; early class tokens unavailable".to_string(),
            )),
        }
    }

    /// Build the training loss for a minibatch against the class list
    /// `classes` (global ids; batch labels must belong to it).
    pub fn loss(
        &self,
        g: &mut Graph,
        ctx: &ForwardCtx,
        batch: &LabeledBatch,
        classes: &[usize],
        w: &LossWeights,
        kspec: &KernelSpec,
        mask: TermMask,
    ) -> Result<LossReport> {
        let labels = map_labels(&batch.labels, classes)?;
        match self.objective {
            Objective::Dimple => {
                let z_t = encode_text(g, &self.standard_tokens(classes)?, &ctx.bank, &ctx.enc, &self.enc_cfg)?;
                let z_v = encode_image(g, &batch.images, &ctx.bank, &ctx.enc, &self.enc_cfg)?;
                let bundle = decompose(g, z_v, z_t, &ctx.heads, &labels)?;
                dimple_total_masked(g, &bundle, w, kspec, mask)
            }
            Objective::DimpleEarly => {
                let (t_u, t_s) = encode_text_early(g, &self.early_tokens(classes)?, &ctx.bank, &ctx.enc, &self.enc_cfg)?;
                let (v_u, v_s) = encode_image_early(g, &batch.images, &ctx.bank, &ctx.enc, &self.enc_cfg)?;
                early_total(g, t_u, t_s, v_u, v_s, &labels, w, kspec)
            }
            Objective::Coop => {
                let z_t = encode_text(g, &self.standard_tokens(classes)?, &ctx.bank, &ctx.enc, &self.enc_cfg)?;
                let z_v = encode_image(g, &batch.images, &ctx.bank, &ctx.enc, &self.enc_cfg)?;
                coop_baseline(g, z_v, z_t, &labels, w)
            }
            Objective::CoopOod => {
                let z_t = encode_text(g, &self.standard_tokens(classes)?, &ctx.bank, &ctx.enc, &self.enc_cfg)?;
                let z_v = encode_image(g, &batch.images, &ctx.bank, &ctx.enc, &self.enc_cfg)?;
                coop_ood_baseline(g, z_v, z_t, &ctx.heads, &labels, w, kspec)
            }
        }
    }

    /// Invariant-pathway class scores for a batch: `[N x |classes|]` cosine
    /// logits (temperature-free; argmax is temperature-invariant).
    fn invariant_logits(
        &self,
        g: &mut Graph,
        ctx: &ForwardCtx,
        images: &[f64],
        classes: &[usize],
    ) -> Result<TensorId> {
        match self.objective {
            Objective::Dimple => {
                let z_t = encode_text(g, &self.standard_tokens(classes)?, &ctx.bank, &ctx.enc, &self.enc_cfg)?;
                let z_v = encode_image(g, images, &ctx.bank, &ctx.enc, &self.enc_cfg)?;
                let z_v_u = project_normalized(g, &ctx.heads.phi_v, z_v)?;
                let z_t_u = project_normalized(g, &ctx.heads.phi_t, z_t)?;
                let t = g.transpose(z_t_u)?;
                g.matmul(z_v_u, t)
            }
            Objective::DimpleEarly => {
                let (t_u, _) = encode_text_early(g, &self.early_tokens(classes)?, &ctx.bank, &ctx.enc, &self.enc_cfg)?;
                let (v_u, _) = encode_image_early(g, images, &ctx.bank, &ctx.enc, &self.enc_cfg)?;
                let t = g.transpose(t_u)?;
                g.matmul(v_u, t)
            }
            Objective::Coop => {
                let z_t = encode_text(g, &self.standard_tokens(classes)?, &ctx.bank, &ctx.enc, &self.enc_cfg)?;
                let z_v = encode_image(g, images, &ctx.bank, &ctx.enc, &self.enc_cfg)?;
                let t = g.transpose(z_t)?;
                g.matmul(z_v, t)
            }
            Objective::CoopOod => {
                let z_t = encode_text(g, &self.standard_tokens(classes)?, &ctx.bank, &ctx.enc, &self.enc_cfg)?;
                let z_v = encode_image(g, images, &ctx.bank, &ctx.enc, &self.enc_cfg)?;
                let z_v_u = project_normalized(g, &ctx.heads.phi_v, z_v)?;
                let t = g.transpose(z_t)?;
                g.matmul(z_v_u, t)
            }
        }
    }

    /// Predict global class ids for every sample, evaluating in frozen
    /// chunks so eval memory stays flat.
    pub fn predict(&self, batch: &LabeledBatch, classes: &[usize]) -> Result<Vec<usize>> {
        let per = self.task.num_patch_tokens * self.task.d_v;
        let chunk = 32usize;
        let n = batch.len();
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let images = &batch.images[start * per..end * per];
            let mut g = Graph::new();
            let bound = self.store.bind_frozen(&mut g)?;
            let ctx = self.ctx_from(bound)?;
            let logits = self.invariant_logits(&mut g, &ctx, images, classes)?;
            let vals = g.value(logits);
            let c = classes.len();
            for i in 0..(end - start) {
                let row = &vals[i * c..(i + 1) * c];
                let best = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(j, _)| j)
                    .unwrap();
                out.push(classes[best]);
            }
            start = end;
        }
        Ok(out)
    }

    /// Materialized decomposed embeddings for export: per-sample vision
    /// blocks and per-class text blocks, all unit rows.
    pub fn embeddings(
        &self,
        batch: &LabeledBatch,
        classes: &[usize],
    ) -> Result<EmbeddingExport> {
        let mut g = Graph::new();
        let bound = self.store.bind_frozen(&mut g)?;
        let ctx = self.ctx_from(bound)?;
        let (v_u, v_s, t_u, t_s) = match self.objective {
            Objective::DimpleEarly => {
                let (t_u, t_s) = encode_text_early(&mut g, &self.early_tokens(classes)?, &ctx.bank, &ctx.enc, &self.enc_cfg)?;
                let (v_u, v_s) = encode_image_early(&mut g, &batch.images, &ctx.bank, &ctx.enc, &self.enc_cfg)?;
                (v_u, v_s, t_u, t_s)
            }
            _ => {
                let z_t = encode_text(&mut g, &self.standard_tokens(classes)?, &ctx.bank, &ctx.enc, &self.enc_cfg)?;
                let z_v = encode_image(&mut g, &batch.images, &ctx.bank, &ctx.enc, &self.enc_cfg)?;
                let labels = map_labels(&batch.labels, classes)?;
                let bundle = decompose(&mut g, z_v, z_t, &ctx.heads, &labels)?;
                (bundle.z_v_u, bundle.z_v_s, bundle.z_t_u, bundle.z_t_s)
            }
        };
        Ok(EmbeddingExport {
            d_vl: self.enc_cfg.d_vl,
            vision_invariant: g.value(v_u).to_vec(),
            vision_spurious: g.value(v_s).to_vec(),
            text_invariant: g.value(t_u).to_vec(),
            text_spurious: g.value(t_s).to_vec(),
        })
    }
}

/// Decomposed embeddings pulled out of a graph for serialization.
pub struct EmbeddingExport {
    pub d_vl: usize,
    pub vision_invariant: Vec<f64>,
    pub vision_spurious: Vec<f64>,
    pub text_invariant: Vec<f64>,
    pub text_spurious: Vec<f64>,
}

/// Map global class ids to row indices of `classes`.
pub fn map_labels(labels: &[usize], classes: &[usize]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|l| {
            classes
                .iter()
                .position(|c| c == l)
                .ok_or_else(|| Error::Config(format!("label {l} not in the evaluated class list {classes:?}")))
        })
        .collect()
}

/// Overwrite class-token embedding rows with (projected) class core
/// directions. Novel-class rows get semantics too, exactly like a pretrained
/// vocabulary: they are init-only and never see gradients during training.
fn seed_class_semantics(store: &mut ParamStore, cfg: &EncoderConfig, task: &TaskSpec) {
    let dirs = Directions::derive(task);
    let proj: Option<Vec<f64>> = if cfg.d_v == cfg.d_l {
        None
    } else {
        let mut rng = crate::rng::substream(task.seed, "init/semantic_proj");
        let scale = 1.0 / (cfg.d_v as f64).sqrt();
        Some((0..cfg.d_v * cfg.d_l).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
    };
    let embed = store.get_mut("text.embed").expect("embedding registered");
    for (class, dir) in dirs.class_core.iter().enumerate() {
        let token = CLASS_TOKEN_BASE + class;
        let row = &mut embed.data[token * cfg.d_l..(token + 1) * cfg.d_l];
        match &proj {
            None => {
                for (r, d) in row.iter_mut().zip(dir) {
                    *r = SEMANTIC_EMBED_SCALE * d;
                }
            }
            Some(p) => {
                for (j, r) in row.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for (k, d) in dir.iter().enumerate() {
                        s += d * p[k * cfg.d_l + j];
                    }
                    *r = SEMANTIC_EMBED_SCALE * s;
                }
            }
        }
    }
}

impl ParamStore {
    /// Bind every parameter as a frozen (no-grad) leaf, for evaluation.
    pub fn bind_frozen(&self, graph: &mut Graph) -> Result<BoundParams> {
        self.bind_with(graph, false)
    }
}
