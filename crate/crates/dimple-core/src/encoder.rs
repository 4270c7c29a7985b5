//! Dual text/vision transformer encoders with multi-stage deep prompting.
//!
//! Both branches are small pre-LN transformers. Learnable prompt tokens are
//! injected up to depth `J`: the prompts of depth 1 are part of the input
//! sequence, and before each layer `i` (2 <= i <= J) the previous layer's
//! outputs at the prompt positions are discarded and replaced by that depth's
//! fresh prompts. From layer `J+1` on, prompt outputs propagate normally.
//!
//! Vision prompts are never free parameters in coupled mode: at every depth
//! they are the linear image `F_i(P_i)` of the text prompts. Independent mode
//! gives the vision branch its own prompt stack. Early mode maintains two
//! full text prompt stacks (invariant and spurious) sharing one projection
//! each (`mu_u`, `eta_s`) into the vision token space.
//!
//! Sequence layouts (prompts carry no separate positional embedding; they are
//! already per-position parameters, and content positions use a learnable
//! table shared across depth):
//!
//! - text:   `[prompt_1 .. prompt_b, template tokens, class token, eos]`,
//!   read out at the final (eos) position;
//! - vision: `[class token, patch tokens, prompt_1 .. prompt_b]`, read out at
//!   the class-token position.

use rand::Rng;

use crate::error::{Error, Result};
use crate::heads::LinearHead;
use crate::params::{BoundParams, ParamStore};
use crate::tensor::{Graph, TensorId};

pub const LN_EPS: f64 = 1e-5;
pub const WEIGHT_INIT_STD: f64 = 0.02;
/// MLP hidden width multiplier.
const MLP_MULT: usize = 4;

pub const STANDARD_TEMPLATE: &str = "a photo of a";
pub const INVARIANT_TEMPLATE: &str = "a photo capturing core and invariant features of a";
pub const SPURIOUS_TEMPLATE: &str = "a photo with features that keep changing of a";

/// Word-level vocabulary: id 0 is the end-of-sequence token, ids 1..=12 the
/// template words, and class tokens start at [`CLASS_TOKEN_BASE`].
const WORDS: [&str; 12] = [
    "a", "photo", "of", "capturing", "core", "and", "invariant", "features", "with", "that",
    "keep", "changing",
];
pub const EOS_TOKEN: usize = 0;
pub const CLASS_TOKEN_BASE: usize = 1 + WORDS.len();

/// Longest template (9 words) + class token + eos.
pub const MAX_CONTENT_TOKENS: usize = 11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PromptMode {
    Coupled,
    Independent,
    Early,
}

impl std::fmt::Display for PromptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PromptMode::Coupled => write!(f, "coupled"),
            PromptMode::Independent => write!(f, "independent"),
            PromptMode::Early => write!(f, "early"),
        }
    }
}

impl std::str::FromStr for PromptMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coupled" => Ok(PromptMode::Coupled),
            "independent" => Ok(PromptMode::Independent),
            "early" => Ok(PromptMode::Early),
            other => Err(Error::Config(format!("unknown prompt mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    /// Transformer layers per branch (K).
    pub num_layers: usize,
    /// Prompted depth (J), 1..=K.
    pub prompt_depth: usize,
    /// Prompt tokens per depth (b). Zero disables prompting entirely.
    pub prompt_len: usize,
    pub d_l: usize,
    pub d_v: usize,
    pub d_vl: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub num_patch_tokens: usize,
    /// Softmax temperature for the similarity logits.
    pub temperature: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 4,
            prompt_depth: 3,
            prompt_len: 2,
            d_l: 32,
            d_v: 32,
            d_vl: 32,
            num_heads: 4,
            vocab_size: 64,
            num_patch_tokens: 16,
            temperature: 0.07,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompt_depth < 1 || self.prompt_depth > self.num_layers {
            return Err(Error::Config(format!(
                "prompt_depth must satisfy 1 <= J <= K; got J={} K={}",
                self.prompt_depth, self.num_layers
            )));
        }
        if self.d_l % self.num_heads != 0 || self.d_v % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "widths d_l={} d_v={} must be divisible by num_heads={}",
                self.d_l, self.d_v, self.num_heads
            )));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.vocab_size <= CLASS_TOKEN_BASE {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room for class tokens (base {CLASS_TOKEN_BASE})",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn head_dim_text(&self) -> usize {
        self.d_l / self.num_heads
    }

    pub fn head_dim_vision(&self) -> usize {
        self.d_v / self.num_heads
    }
}

// ── Tokenization ─────────────────────────────────────────────────────

/// One class's token sequence: template words, then the class token, then
/// eos. Sequence length is constant across classes for a fixed template.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedClass {
    pub class_id: usize,
    pub token_ids: Vec<usize>,
}

fn word_id(word: &str) -> Result<usize> {
    WORDS
        .iter()
        .position(|w| *w == word)
        .map(|i| i + 1)
        .ok_or_else(|| Error::Config(format!("word `{word}` not in the fixed vocabulary")))
}

/// Tokenize `template` followed by the class token for `class_id`.
pub fn tokenize_class(template: &str, class_id: usize, vocab_size: usize) -> Result<TokenizedClass> {
    let class_token = CLASS_TOKEN_BASE + class_id;
    if class_token >= vocab_size {
        return Err(Error::Config(format!(
            "class {class_id} needs token id {class_token}, beyond vocab_size {vocab_size}"
        )));
    }
    let mut token_ids = Vec::new();
    for word in template.split_whitespace() {
        token_ids.push(word_id(word)?);
    }
    token_ids.push(class_token);
    token_ids.push(EOS_TOKEN);
    Ok(TokenizedClass { class_id, token_ids })
}

/// Tokenize all `num_classes` classes under one template.
pub fn tokenize_classes(template: &str, num_classes: usize, vocab_size: usize) -> Result<Vec<TokenizedClass>> {
    (0..num_classes).map(|c| tokenize_class(template, c, vocab_size)).collect()
}

/// Class token sequences for the early-disentanglement pathways.
#[derive(Clone, Debug)]
pub struct EarlyClassTokens {
    pub invariant: TokenizedClass,
    pub spurious: TokenizedClass,
}

pub fn tokenize_classes_early(num_classes: usize, vocab_size: usize) -> Result<Vec<EarlyClassTokens>> {
    (0..num_classes)
        .map(|c| {
            Ok(EarlyClassTokens {
                invariant: tokenize_class(INVARIANT_TEMPLATE, c, vocab_size)?,
                spurious: tokenize_class(SPURIOUS_TEMPLATE, c, vocab_size)?,
            })
        })
        .collect()
}

// ── Parameter registration ───────────────────────────────────────────

/// Weight matrices are trained from scratch, so they use a 1/sqrt(fan_in)
/// init (the 0.02 convention assumes a pretrained backbone and stalls a
/// cold start: block outputs of ~1e-3 leave the similarity logits without
/// class signal for hundreds of steps).
fn fan_in_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

fn register_branch(store: &mut ParamStore, prefix: &str, d: usize, cfg: &EncoderConfig, rng: &mut impl Rng) {
    for l in 0..cfg.num_layers {
        let p = format!("{prefix}.l{l}");
        store.insert_ones(&format!("{p}.ln1.g"), vec![d]);
        store.insert_zeros(&format!("{p}.ln1.b"), vec![d]);
        store.insert_ones(&format!("{p}.ln2.g"), vec![d]);
        store.insert_zeros(&format!("{p}.ln2.b"), vec![d]);
        let dh = d / cfg.num_heads;
        for h in 0..cfg.num_heads {
            for proj in ["q", "k", "v"] {
                store.insert_normal(&format!("{p}.attn.{proj}{h}.w"), vec![d, dh], fan_in_std(d), rng);
                store.insert_zeros(&format!("{p}.attn.{proj}{h}.b"), vec![dh]);
            }
            store.insert_normal(&format!("{p}.attn.o{h}.w"), vec![dh, d], fan_in_std(dh), rng);
        }
        store.insert_zeros(&format!("{p}.attn.o.b"), vec![d]);
        store.insert_normal(&format!("{p}.mlp.w1"), vec![d, MLP_MULT * d], fan_in_std(d), rng);
        store.insert_zeros(&format!("{p}.mlp.b1"), vec![MLP_MULT * d]);
        store.insert_normal(&format!("{p}.mlp.w2"), vec![MLP_MULT * d, d], fan_in_std(MLP_MULT * d), rng);
        store.insert_zeros(&format!("{p}.mlp.b2"), vec![d]);
    }
    store.insert_ones(&format!("{prefix}.ln_f.g"), vec![d]);
    store.insert_zeros(&format!("{prefix}.ln_f.b"), vec![d]);
}

/// Register both encoder branches: embedding/positional tables, transformer
/// stacks, final norms, and the joint-space projections.
pub fn register_encoders(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) {
    store.insert_normal("text.embed", vec![cfg.vocab_size, cfg.d_l], WEIGHT_INIT_STD, rng);
    store.insert_normal("text.pos", vec![MAX_CONTENT_TOKENS, cfg.d_l], WEIGHT_INIT_STD, rng);
    register_branch(store, "text", cfg.d_l, cfg, rng);
    store.insert_normal("text.proj", vec![cfg.d_l, cfg.d_vl], fan_in_std(cfg.d_l), rng);

    store.insert_normal("vision.cls", vec![1, cfg.d_v], WEIGHT_INIT_STD, rng);
    store.insert_normal(
        "vision.pos",
        vec![1 + cfg.num_patch_tokens, cfg.d_v],
        WEIGHT_INIT_STD,
        rng,
    );
    register_branch(store, "vision", cfg.d_v, cfg, rng);
    store.insert_normal("vision.proj", vec![cfg.d_v, cfg.d_vl], fan_in_std(cfg.d_v), rng);
}

/// First-depth prompts copy the embedding rows of the template's first `b`
/// words (falling back to Gaussian rows if `b` exceeds the template); deeper
/// prompts are Gaussian.
fn prompt_init(store: &ParamStore, template: &str, depth: usize, b: usize, d_l: usize, rng: &mut impl Rng) -> Vec<f64> {
    use rand_distr::StandardNormal;
    let mut data = Vec::with_capacity(b * d_l);
    let template_ids: Vec<usize> = template
        .split_whitespace()
        .map(|w| word_id(w).expect("template words are in the vocabulary"))
        .collect();
    let embed = store.get("text.embed").expect("embedding registered before prompts");
    for row in 0..b {
        if depth == 0 && row < template_ids.len() {
            let t = template_ids[row];
            data.extend_from_slice(&embed.data[t * d_l..(t + 1) * d_l]);
        } else {
            data.extend((0..d_l).map(|_| WEIGHT_INIT_STD * rng.sample::<f64, _>(StandardNormal)));
        }
    }
    data
}

/// Register the prompt bank for `mode`. No-op when `prompt_len == 0`.
pub fn register_bank(store: &mut ParamStore, cfg: &EncoderConfig, mode: PromptMode, rng: &mut impl Rng) {
    let (b, j) = (cfg.prompt_len, cfg.prompt_depth);
    if b == 0 {
        return;
    }
    match mode {
        PromptMode::Coupled => {
            for i in 0..j {
                let init = prompt_init(store, STANDARD_TEMPLATE, i, b, cfg.d_l, rng);
                store.insert(&format!("bank.text_p{i}"), vec![b, cfg.d_l], init);
                store.insert_normal(&format!("bank.couple{i}.w"), vec![cfg.d_l, cfg.d_v], WEIGHT_INIT_STD, rng);
                store.insert_zeros(&format!("bank.couple{i}.b"), vec![cfg.d_v]);
            }
        }
        PromptMode::Independent => {
            for i in 0..j {
                let init = prompt_init(store, STANDARD_TEMPLATE, i, b, cfg.d_l, rng);
                store.insert(&format!("bank.text_p{i}"), vec![b, cfg.d_l], init);
                store.insert_normal(&format!("bank.vision_p{i}"), vec![b, cfg.d_v], WEIGHT_INIT_STD, rng);
            }
        }
        PromptMode::Early => {
            for i in 0..j {
                let inv = prompt_init(store, INVARIANT_TEMPLATE, i, b, cfg.d_l, rng);
                store.insert(&format!("bank.inv_p{i}"), vec![b, cfg.d_l], inv);
                let spu = prompt_init(store, SPURIOUS_TEMPLATE, i, b, cfg.d_l, rng);
                store.insert(&format!("bank.spu_p{i}"), vec![b, cfg.d_l], spu);
            }
            store.insert_normal("bank.mu_u.w", vec![cfg.d_l, cfg.d_v], WEIGHT_INIT_STD, rng);
            store.insert_zeros("bank.mu_u.b", vec![cfg.d_v]);
            store.insert_normal("bank.eta_s.w", vec![cfg.d_l, cfg.d_v], WEIGHT_INIT_STD, rng);
            store.insert_zeros("bank.eta_s.b", vec![cfg.d_v]);
        }
    }
}

// ── Bound parameter views ────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub ln1: (TensorId, TensorId),
    pub ln2: (TensorId, TensorId),
    pub q: Vec<LinearHead>,
    pub k: Vec<LinearHead>,
    pub v: Vec<LinearHead>,
    pub o_w: Vec<TensorId>,
    pub o_b: TensorId,
    pub mlp_w1: TensorId,
    pub mlp_b1: TensorId,
    pub mlp_w2: TensorId,
    pub mlp_b2: TensorId,
}

#[derive(Clone, Debug)]
pub struct BranchParams {
    pub pos: TensorId,
    pub layers: Vec<LayerParams>,
    pub ln_f: (TensorId, TensorId),
    pub proj: TensorId,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub text_embed: TensorId,
    pub vision_cls: TensorId,
    pub text: BranchParams,
    pub vision: BranchParams,
}

fn bind_branch(bound: &BoundParams, prefix: &str, cfg: &EncoderConfig) -> Result<BranchParams> {
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let p = format!("{prefix}.l{l}");
        let mut q = Vec::new();
        let mut k = Vec::new();
        let mut v = Vec::new();
        let mut o_w = Vec::new();
        for h in 0..cfg.num_heads {
            q.push(LinearHead {
                w: bound.id(&format!("{p}.attn.q{h}.w"))?,
                b: bound.id(&format!("{p}.attn.q{h}.b"))?,
            });
            k.push(LinearHead {
                w: bound.id(&format!("{p}.attn.k{h}.w"))?,
                b: bound.id(&format!("{p}.attn.k{h}.b"))?,
            });
            v.push(LinearHead {
                w: bound.id(&format!("{p}.attn.v{h}.w"))?,
                b: bound.id(&format!("{p}.attn.v{h}.b"))?,
            });
            o_w.push(bound.id(&format!("{p}.attn.o{h}.w"))?);
        }
        layers.push(LayerParams {
            ln1: (bound.id(&format!("{p}.ln1.g"))?, bound.id(&format!("{p}.ln1.b"))?),
            ln2: (bound.id(&format!("{p}.ln2.g"))?, bound.id(&format!("{p}.ln2.b"))?),
            q,
            k,
            v,
            o_w,
            o_b: bound.id(&format!("{p}.attn.o.b"))?,
            mlp_w1: bound.id(&format!("{p}.mlp.w1"))?,
            mlp_b1: bound.id(&format!("{p}.mlp.b1"))?,
            mlp_w2: bound.id(&format!("{p}.mlp.w2"))?,
            mlp_b2: bound.id(&format!("{p}.mlp.b2"))?,
        });
    }
    Ok(BranchParams {
        pos: bound.id(&format!("{prefix}.pos"))?,
        layers,
        ln_f: (bound.id(&format!("{prefix}.ln_f.g"))?, bound.id(&format!("{prefix}.ln_f.b"))?),
        proj: bound.id(&format!("{prefix}.proj"))?,
    })
}

impl EncoderParams {
    pub fn bind(bound: &BoundParams, cfg: &EncoderConfig) -> Result<Self> {
        Ok(EncoderParams {
            text_embed: bound.id("text.embed")?,
            vision_cls: bound.id("vision.cls")?,
            text: bind_branch(bound, "text", cfg)?,
            vision: bind_branch(bound, "vision", cfg)?,
        })
    }
}

/// Per-depth prompt tensors resolved for both branches.
#[derive(Clone, Debug)]
pub enum PromptBank {
    Coupled { text: Vec<TensorId>, maps: Vec<LinearHead> },
    Independent { text: Vec<TensorId>, vision: Vec<TensorId> },
    Early {
        invariant: Vec<TensorId>,
        spurious: Vec<TensorId>,
        mu_u: LinearHead,
        eta_s: LinearHead,
    },
    /// `prompt_len == 0`: plain transformers.
    None,
}

impl PromptBank {
    pub fn bind(bound: &BoundParams, cfg: &EncoderConfig, mode: PromptMode) -> Result<Self> {
        if cfg.prompt_len == 0 {
            return Ok(PromptBank::None);
        }
        let j = cfg.prompt_depth;
        match mode {
            PromptMode::Coupled => {
                let mut text = Vec::new();
                let mut maps = Vec::new();
                for i in 0..j {
                    text.push(bound.id(&format!("bank.text_p{i}"))?);
                    maps.push(LinearHead {
                        w: bound.id(&format!("bank.couple{i}.w"))?,
                        b: bound.id(&format!("bank.couple{i}.b"))?,
                    });
                }
                Ok(PromptBank::Coupled { text, maps })
            }
            PromptMode::Independent => {
                let mut text = Vec::new();
                let mut vision = Vec::new();
                for i in 0..j {
                    text.push(bound.id(&format!("bank.text_p{i}"))?);
                    vision.push(bound.id(&format!("bank.vision_p{i}"))?);
                }
                Ok(PromptBank::Independent { text, vision })
            }
            PromptMode::Early => {
                let mut invariant = Vec::new();
                let mut spurious = Vec::new();
                for i in 0..j {
                    invariant.push(bound.id(&format!("bank.inv_p{i}"))?);
                    spurious.push(bound.id(&format!("bank.spu_p{i}"))?);
                }
                Ok(PromptBank::Early {
                    invariant,
                    spurious,
                    mu_u: LinearHead { w: bound.id("bank.mu_u.w")?, b: bound.id("bank.mu_u.b")? },
                    eta_s: LinearHead { w: bound.id("bank.eta_s.w")?, b: bound.id("bank.eta_s.b")? },
                })
            }
        }
    }

    pub fn mode(&self) -> Option<PromptMode> {
        match self {
            PromptBank::Coupled { .. } => Some(PromptMode::Coupled),
            PromptBank::Independent { .. } => Some(PromptMode::Independent),
            PromptBank::Early { .. } => Some(PromptMode::Early),
            PromptBank::None => None,
        }
    }

    /// Text prompts per depth for the single-stack modes.
    fn text_prompts(&self) -> Result<&[TensorId]> {
        match self {
            PromptBank::Coupled { text, .. } => Ok(text),
            PromptBank::Independent { text, .. } => Ok(text),
            PromptBank::None => Ok(&[]),
            PromptBank::Early { .. } => Err(Error::Mode(
                "bank is in early mode; use encode_text_early / encode_image_early".to_string(),
            )),
        }
    }

    /// Vision prompts per depth for the single-stack modes.
    fn vision_prompts(&self, g: &mut Graph) -> Result<Vec<TensorId>> {
        match self {
            PromptBank::Coupled { text, maps } => text
                .iter()
                .zip(maps)
                .map(|(&p, m)| m.apply(g, p))
                .collect(),
            PromptBank::Independent { vision, .. } => Ok(vision.clone()),
            PromptBank::None => Ok(Vec::new()),
            PromptBank::Early { .. } => Err(Error::Mode(
                "bank is in early mode; use encode_text_early / encode_image_early".to_string(),
            )),
        }
    }

    fn early_text(&self) -> Result<(&[TensorId], &[TensorId])> {
        match self {
            PromptBank::Early { invariant, spurious, .. } => Ok((invariant, spurious)),
            _ => Err(Error::Mode("early mode absent from the prompt bank".to_string())),
        }
    }

    fn early_vision(&self, g: &mut Graph) -> Result<(Vec<TensorId>, Vec<TensorId>)> {
        match self {
            PromptBank::Early { invariant, spurious, mu_u, eta_s } => {
                let inv: Result<Vec<TensorId>> = invariant.iter().map(|&p| mu_u.apply(g, p)).collect();
                let spu: Result<Vec<TensorId>> = spurious.iter().map(|&p| eta_s.apply(g, p)).collect();
                Ok((inv?, spu?))
            }
            _ => Err(Error::Mode("early mode absent from the prompt bank".to_string())),
        }
    }
}

// ── Forward passes ───────────────────────────────────────────────────

/// Captured layer inputs for instrumentation tests: `layer_inputs[i]` is the
/// value of the sequence fed into layer `i`.
#[derive(Default, Debug)]
pub struct EncodeTrace {
    pub layer_inputs: Vec<Vec<f64>>,
}

fn multi_head_attention(g: &mut Graph, x: TensorId, layer: &LayerParams, head_dim: usize) -> Result<TensorId> {
    let mut acc: Option<TensorId> = None;
    let scale = 1.0 / (head_dim as f64).sqrt();
    for h in 0..layer.q.len() {
        let q = layer.q[h].apply(g, x)?;
        let k = layer.k[h].apply(g, x)?;
        let v = layer.v[h].apply(g, x)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax(scores, 1)?;
        let ctx = g.matmul(attn, v)?;
        let out = g.matmul(ctx, layer.o_w[h])?;
        acc = Some(match acc {
            Some(prev) => g.add(prev, out)?,
            None => out,
        });
    }
    g.add_bias(acc.expect("at least one attention head"), layer.o_b)
}

/// One pre-LN transformer block: `x + attn(ln1(x))`, then `+ mlp(ln2(x))`.
fn transformer_layer(g: &mut Graph, x: TensorId, layer: &LayerParams, head_dim: usize) -> Result<TensorId> {
    let normed = g.layer_norm(x, layer.ln1.0, layer.ln1.1, LN_EPS)?;
    let attn = multi_head_attention(g, normed, layer, head_dim)?;
    let x = g.add(x, attn)?;
    let normed = g.layer_norm(x, layer.ln2.0, layer.ln2.1, LN_EPS)?;
    let h = g.matmul(normed, layer.mlp_w1)?;
    let h = g.add_bias(h, layer.mlp_b1)?;
    let h = g.gelu(h)?;
    let h = g.matmul(h, layer.mlp_w2)?;
    let h = g.add_bias(h, layer.mlp_b2)?;
    g.add(x, h)
}

/// Where the prompt rows sit in a sequence.
#[derive(Clone, Copy)]
enum PromptSlot {
    /// Text: rows `0..b`.
    Front { b: usize },
    /// Vision: rows `start..`.
    Back { start: usize },
}

/// Run one sequence through a branch with deep prompt replacement, returning
/// the projected readout row (`[1 x d_vl]`, not yet normalized).
#[allow(clippy::too_many_arguments)]
fn encode_sequence(
    g: &mut Graph,
    content: TensorId,
    prompts: &[TensorId],
    slot: Option<PromptSlot>,
    branch: &BranchParams,
    head_dim: usize,
    readout_last: bool,
    mut trace: Option<&mut EncodeTrace>,
) -> Result<TensorId> {
    let mut x = match (slot, prompts.first()) {
        (Some(PromptSlot::Front { .. }), Some(&p0)) => g.concat_rows(&[p0, content])?,
        (Some(PromptSlot::Back { .. }), Some(&p0)) => g.concat_rows(&[content, p0])?,
        _ => content,
    };
    let seq_len = g.shape(x)[0];
    for (idx, layer) in branch.layers.iter().enumerate() {
        // Replacement depth: before layer idx (1-based depth idx+1 <= J),
        // discard the previous layer's prompt outputs and splice in this
        // depth's fresh prompts.
        if idx > 0 && idx < prompts.len() {
            x = match slot.expect("slot present when prompts exist") {
                PromptSlot::Front { b } => {
                    let rest = g.slice_rows(x, b, seq_len)?;
                    g.concat_rows(&[prompts[idx], rest])?
                }
                PromptSlot::Back { start } => {
                    let front = g.slice_rows(x, 0, start)?;
                    g.concat_rows(&[front, prompts[idx]])?
                }
            };
        }
        if let Some(t) = trace.as_deref_mut() {
            t.layer_inputs.push(g.value(x).to_vec());
        }
        x = transformer_layer(g, x, layer, head_dim)?;
    }
    let x = g.layer_norm(x, branch.ln_f.0, branch.ln_f.1, LN_EPS)?;
    let row = if readout_last { seq_len - 1 } else { 0 };
    let readout = g.gather_rows(x, &[row])?;
    g.matmul(readout, branch.proj)
}

/// Embed one tokenized class and add content positional embeddings.
fn embed_class(g: &mut Graph, class: &TokenizedClass, enc: &EncoderParams) -> Result<TensorId> {
    let embedded = g.gather_rows(enc.text_embed, &class.token_ids)?;
    let pos = g.slice_rows(enc.text.pos, 0, class.token_ids.len())?;
    g.add(embedded, pos)
}

fn encode_text_with(
    g: &mut Graph,
    classes: &[TokenizedClass],
    prompts: &[TensorId],
    enc: &EncoderParams,
    cfg: &EncoderConfig,
    mut trace: Option<&mut EncodeTrace>,
) -> Result<TensorId> {
    if classes.is_empty() {
        return Err(Error::Config("encode_text requires at least one class".to_string()));
    }
    cfg.validate()?;
    let slot = (!prompts.is_empty()).then_some(PromptSlot::Front { b: cfg.prompt_len });
    let mut rows = Vec::with_capacity(classes.len());
    for (i, class) in classes.iter().enumerate() {
        let content = embed_class(g, class, enc)?;
        let row = encode_sequence(
            g,
            content,
            prompts,
            slot,
            &enc.text,
            cfg.head_dim_text(),
            true,
            if i == 0 { trace.as_deref_mut() } else { None },
        )?;
        rows.push(row);
    }
    let stacked = g.concat_rows(&rows)?;
    g.normalize_rows(stacked)
}

/// Encode all classes through the text branch: `[C x d_vl]`, unit rows.
pub fn encode_text(
    g: &mut Graph,
    classes: &[TokenizedClass],
    bank: &PromptBank,
    enc: &EncoderParams,
    cfg: &EncoderConfig,
) -> Result<TensorId> {
    let prompts = bank.text_prompts()?.to_vec();
    encode_text_with(g, classes, &prompts, enc, cfg, None)
}

/// As [`encode_text`], capturing the first class's per-layer inputs.
pub fn encode_text_traced(
    g: &mut Graph,
    classes: &[TokenizedClass],
    bank: &PromptBank,
    enc: &EncoderParams,
    cfg: &EncoderConfig,
    trace: &mut EncodeTrace,
) -> Result<TensorId> {
    let prompts = bank.text_prompts()?.to_vec();
    encode_text_with(g, classes, &prompts, enc, cfg, Some(trace))
}

fn encode_image_with(
    g: &mut Graph,
    images: &[f64],
    prompts: &[TensorId],
    enc: &EncoderParams,
    cfg: &EncoderConfig,
    mut trace: Option<&mut EncodeTrace>,
) -> Result<TensorId> {
    cfg.validate()?;
    let tokens = cfg.num_patch_tokens;
    let per_image = tokens * cfg.d_v;
    if images.is_empty() || images.len() % per_image != 0 {
        return Err(Error::Shape(format!(
            "image batch of {} values is not a multiple of tokens x d_v = {per_image}",
            images.len()
        )));
    }
    let n = images.len() / per_image;
    let slot = (!prompts.is_empty()).then_some(PromptSlot::Back { start: 1 + tokens });
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let patch = g.constant(images[i * per_image..(i + 1) * per_image].to_vec(), vec![tokens, cfg.d_v])?;
        let with_cls = g.concat_rows(&[enc.vision_cls, patch])?;
        let content = g.add(with_cls, enc.vision.pos)?;
        let row = encode_sequence(
            g,
            content,
            prompts,
            slot,
            &enc.vision,
            cfg.head_dim_vision(),
            false,
            if i == 0 { trace.as_deref_mut() } else { None },
        )?;
        rows.push(row);
    }
    let stacked = g.concat_rows(&rows)?;
    g.normalize_rows(stacked)
}

/// Encode a flat `[N x tokens x d_v]` image batch: `[N x d_vl]`, unit rows.
pub fn encode_image(
    g: &mut Graph,
    images: &[f64],
    bank: &PromptBank,
    enc: &EncoderParams,
    cfg: &EncoderConfig,
) -> Result<TensorId> {
    let prompts = bank.vision_prompts(g)?;
    encode_image_with(g, images, &prompts, enc, cfg, None)
}

/// As [`encode_image`], capturing the first image's per-layer inputs.
pub fn encode_image_traced(
    g: &mut Graph,
    images: &[f64],
    bank: &PromptBank,
    enc: &EncoderParams,
    cfg: &EncoderConfig,
    trace: &mut EncodeTrace,
) -> Result<TensorId> {
    let prompts = bank.vision_prompts(g)?;
    encode_image_with(g, images, &prompts, enc, cfg, Some(trace))
}

/// Early text encodings: one per prompt pathway, both `[C x d_vl]`.
pub fn encode_text_early(
    g: &mut Graph,
    classes: &[EarlyClassTokens],
    bank: &PromptBank,
    enc: &EncoderParams,
    cfg: &EncoderConfig,
) -> Result<(TensorId, TensorId)> {
    let (inv, spu) = bank.early_text()?;
    let (inv, spu) = (inv.to_vec(), spu.to_vec());
    let inv_classes: Vec<TokenizedClass> = classes.iter().map(|c| c.invariant.clone()).collect();
    let spu_classes: Vec<TokenizedClass> = classes.iter().map(|c| c.spurious.clone()).collect();
    let t_u = encode_text_with(g, &inv_classes, &inv, enc, cfg, None)?;
    let t_s = encode_text_with(g, &spu_classes, &spu, enc, cfg, None)?;
    Ok((t_u, t_s))
}

/// Early vision encodings driven by the projected invariant/spurious prompts.
pub fn encode_image_early(
    g: &mut Graph,
    images: &[f64],
    bank: &PromptBank,
    enc: &EncoderParams,
    cfg: &EncoderConfig,
) -> Result<(TensorId, TensorId)> {
    let (inv, spu) = bank.early_vision(g)?;
    let v_u = encode_image_with(g, images, &inv, enc, cfg, None)?;
    let v_s = encode_image_with(g, images, &spu, enc, cfg, None)?;
    Ok((v_u, v_s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_cfg() -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            prompt_depth: 2,
            prompt_len: 1,
            d_l: 8,
            d_v: 8,
            d_vl: 8,
            num_heads: 2,
            vocab_size: 24,
            num_patch_tokens: 4,
            temperature: 0.07,
        }
    }

    fn build_store(cfg: &EncoderConfig, mode: PromptMode, seed: u64) -> ParamStore {
        let mut rng = crate::rng::substream(seed, "init");
        let mut store = ParamStore::new();
        register_encoders(&mut store, cfg, &mut rng);
        register_bank(&mut store, cfg, mode, &mut rng);
        store
    }

    fn rand_images(seed: u64, n: usize, cfg: &EncoderConfig) -> Vec<f64> {
        use rand::Rng;
        let mut rng = crate::rng::substream(seed, "test/images");
        (0..n * cfg.num_patch_tokens * cfg.d_v)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect()
    }

    #[test]
    fn config_validation() {
        let mut cfg = micro_cfg();
        cfg.prompt_depth = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.prompt_depth = 2;
        cfg.num_heads = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn tokenize_fixed_length_and_unique_class_tokens() {
        let a = tokenize_class(STANDARD_TEMPLATE, 0, 64).unwrap();
        let b = tokenize_class(STANDARD_TEMPLATE, 3, 64).unwrap();
        assert_eq!(a.token_ids.len(), b.token_ids.len());
        assert_eq!(a.token_ids.len(), 6); // 4 words + class + eos
        assert_ne!(a.token_ids[4], b.token_ids[4]);
        assert_eq!(a.token_ids[5], EOS_TOKEN);
        assert!(tokenize_class(STANDARD_TEMPLATE, 60, 64).is_err());
    }

    #[test]
    fn text_rows_are_unit_norm() {
        let cfg = micro_cfg();
        let store = build_store(&cfg, PromptMode::Coupled, 7);
        let classes = tokenize_classes(STANDARD_TEMPLATE, 3, cfg.vocab_size).unwrap();
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let enc = EncoderParams::bind(&bound, &cfg).unwrap();
        let bank = PromptBank::bind(&bound, &cfg, PromptMode::Coupled).unwrap();
        let z_t = encode_text(&mut g, &classes, &bank, &enc, &cfg).unwrap();
        assert_eq!(g.shape(z_t), &[3, cfg.d_vl]);
        for row in g.value(z_t).chunks(cfg.d_vl) {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn deep_prompt_replacement_feeds_bank_prompts_exactly() {
        let cfg = micro_cfg();
        let store = build_store(&cfg, PromptMode::Coupled, 8);
        let classes = tokenize_classes(STANDARD_TEMPLATE, 2, cfg.vocab_size).unwrap();
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let enc = EncoderParams::bind(&bound, &cfg).unwrap();
        let bank = PromptBank::bind(&bound, &cfg, PromptMode::Coupled).unwrap();
        let mut trace = EncodeTrace::default();
        encode_text_traced(&mut g, &classes, &bank, &enc, &cfg, &mut trace).unwrap();
        assert_eq!(trace.layer_inputs.len(), cfg.num_layers);
        let b = cfg.prompt_len;
        for depth in 0..cfg.prompt_depth {
            let input = &trace.layer_inputs[depth];
            let expected = store.get(&format!("bank.text_p{depth}")).unwrap();
            assert_eq!(&input[..b * cfg.d_l], &expected.data[..], "depth {depth}");
        }

        // vision side: prompt rows must equal F_i(P_i) exactly
        let mut vtrace = EncodeTrace::default();
        let images = rand_images(9, 1, &cfg);
        encode_image_traced(&mut g, &images, &bank, &enc, &cfg, &mut vtrace).unwrap();
        let start = (1 + cfg.num_patch_tokens) * cfg.d_v;
        for depth in 0..cfg.prompt_depth {
            let input = &vtrace.layer_inputs[depth];
            // recompute F_i(P_i) on a fresh graph
            let mut g2 = Graph::new();
            let bound2 = store.bind(&mut g2).unwrap();
            let p = bound2.id(&format!("bank.text_p{depth}")).unwrap();
            let w = bound2.id(&format!("bank.couple{depth}.w")).unwrap();
            let bb = bound2.id(&format!("bank.couple{depth}.b")).unwrap();
            let prod = g2.matmul(p, w).unwrap();
            let mapped = g2.add_bias(prod, bb).unwrap();
            assert_eq!(&input[start..], g2.value(mapped), "vision depth {depth}");
        }
    }

    #[test]
    fn coupled_zero_maps_give_zero_vision_prompts_and_unit_output() {
        let cfg = micro_cfg();
        let mut store = build_store(&cfg, PromptMode::Coupled, 10);
        for i in 0..cfg.prompt_depth {
            let w = store.get_mut(&format!("bank.couple{i}.w")).unwrap();
            w.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let enc = EncoderParams::bind(&bound, &cfg).unwrap();
        let bank = PromptBank::bind(&bound, &cfg, PromptMode::Coupled).unwrap();
        let mut trace = EncodeTrace::default();
        let images = rand_images(11, 2, &cfg);
        let z_v = encode_image_traced(&mut g, &images, &bank, &enc, &cfg, &mut trace).unwrap();
        let start = (1 + cfg.num_patch_tokens) * cfg.d_v;
        assert!(trace.layer_inputs[0][start..].iter().all(|&v| v == 0.0));
        for row in g.value(z_v).chunks(cfg.d_vl) {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn independent_and_coupled_modes_differ() {
        let cfg = micro_cfg();
        // same encoder weights; bank params differ by construction, so align
        // the text prompts and check the vision paths diverge.
        let store_c = build_store(&cfg, PromptMode::Coupled, 12);
        let mut store_i = build_store(&cfg, PromptMode::Independent, 12);
        for i in 0..cfg.prompt_depth {
            let name = format!("bank.text_p{i}");
            let src = store_c.get(&name).unwrap().data.clone();
            store_i.get_mut(&name).unwrap().data = src;
        }
        let images = rand_images(13, 2, &cfg);
        let out_c = {
            let mut g = Graph::new();
            let bound = store_c.bind(&mut g).unwrap();
            let enc = EncoderParams::bind(&bound, &cfg).unwrap();
            let bank = PromptBank::bind(&bound, &cfg, PromptMode::Coupled).unwrap();
            let z = encode_image(&mut g, &images, &bank, &enc, &cfg).unwrap();
            g.value(z).to_vec()
        };
        let out_i = {
            let mut g = Graph::new();
            let bound = store_i.bind(&mut g).unwrap();
            let enc = EncoderParams::bind(&bound, &cfg).unwrap();
            let bank = PromptBank::bind(&bound, &cfg, PromptMode::Independent).unwrap();
            let z = encode_image(&mut g, &images, &bank, &enc, &cfg).unwrap();
            g.value(z).to_vec()
        };
        assert_ne!(out_c, out_i);
    }

    #[test]
    fn permuting_patches_without_positions_fixes_class_output() {
        let mut cfg = micro_cfg();
        cfg.prompt_len = 0;
        let mut store = build_store(&cfg, PromptMode::Coupled, 14);
        store.get_mut("vision.pos").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        let images = rand_images(15, 1, &cfg);
        let mut permuted = images.clone();
        // swap patch tokens 0 and 3
        let d = cfg.d_v;
        for k in 0..d {
            permuted.swap(k, 3 * d + k);
        }
        let run = |imgs: &[f64]| {
            let mut g = Graph::new();
            let bound = store.bind(&mut g).unwrap();
            let enc = EncoderParams::bind(&bound, &cfg).unwrap();
            let bank = PromptBank::bind(&bound, &cfg, PromptMode::Coupled).unwrap();
            let z = encode_image(&mut g, imgs, &bank, &enc, &cfg).unwrap();
            g.value(z).to_vec()
        };
        let a = run(&images);
        let b = run(&permuted);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn early_mode_with_identical_pathways_is_bitwise_equal() {
        let cfg = micro_cfg();
        let mut store = build_store(&cfg, PromptMode::Early, 16);
        // make the two pathways identical
        for i in 0..cfg.prompt_depth {
            let inv = store.get(&format!("bank.inv_p{i}")).unwrap().data.clone();
            store.get_mut(&format!("bank.spu_p{i}")).unwrap().data = inv;
        }
        let w = store.get("bank.mu_u.w").unwrap().data.clone();
        store.get_mut("bank.eta_s.w").unwrap().data = w;
        let b = store.get("bank.mu_u.b").unwrap().data.clone();
        store.get_mut("bank.eta_s.b").unwrap().data = b;

        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let enc = EncoderParams::bind(&bound, &cfg).unwrap();
        let bank = PromptBank::bind(&bound, &cfg, PromptMode::Early).unwrap();

        // same template on both sides so the token sequences agree
        let classes: Vec<EarlyClassTokens> = (0..2)
            .map(|c| {
                let t = tokenize_class(INVARIANT_TEMPLATE, c, cfg.vocab_size).unwrap();
                EarlyClassTokens { invariant: t.clone(), spurious: t }
            })
            .collect();
        let (t_u, t_s) = encode_text_early(&mut g, &classes, &bank, &enc, &cfg).unwrap();
        assert_eq!(g.value(t_u), g.value(t_s));

        let images = rand_images(17, 2, &cfg);
        let (v_u, v_s) = encode_image_early(&mut g, &images, &bank, &enc, &cfg).unwrap();
        assert_eq!(g.value(v_u), g.value(v_s));
        for row in g.value(v_u).chunks(cfg.d_vl) {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn early_differs_from_late_under_different_templates() {
        let cfg = micro_cfg();
        let store = build_store(&cfg, PromptMode::Early, 18);
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let enc = EncoderParams::bind(&bound, &cfg).unwrap();
        let bank = PromptBank::bind(&bound, &cfg, PromptMode::Early).unwrap();
        let early_classes = tokenize_classes_early(2, cfg.vocab_size).unwrap();
        let (t_u, _) = encode_text_early(&mut g, &early_classes, &bank, &enc, &cfg).unwrap();

        // a coupled bank sharing the text prompt values, driven by the
        // standard template, must encode differently
        let cstore = {
            let mut s = build_store(&cfg, PromptMode::Coupled, 18);
            for i in 0..cfg.prompt_depth {
                let inv = store.get(&format!("bank.inv_p{i}")).unwrap().data.clone();
                s.get_mut(&format!("bank.text_p{i}")).unwrap().data = inv;
            }
            s
        };
        let mut g2 = Graph::new();
        let bound2 = cstore.bind(&mut g2).unwrap();
        let enc2 = EncoderParams::bind(&bound2, &cfg).unwrap();
        let bank2 = PromptBank::bind(&bound2, &cfg, PromptMode::Coupled).unwrap();
        let classes = tokenize_classes(STANDARD_TEMPLATE, 2, cfg.vocab_size).unwrap();
        let z_t = encode_text(&mut g2, &classes, &bank2, &enc2, &cfg).unwrap();
        assert_ne!(g.value(t_u), g2.value(z_t));
    }

    #[test]
    fn early_ops_reject_non_early_banks_and_vice_versa() {
        let cfg = micro_cfg();
        let store = build_store(&cfg, PromptMode::Coupled, 19);
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let enc = EncoderParams::bind(&bound, &cfg).unwrap();
        let bank = PromptBank::bind(&bound, &cfg, PromptMode::Coupled).unwrap();
        let early_classes = tokenize_classes_early(2, cfg.vocab_size).unwrap();
        assert!(matches!(
            encode_text_early(&mut g, &early_classes, &bank, &enc, &cfg),
            Err(Error::Mode(_))
        ));

        let estore = build_store(&cfg, PromptMode::Early, 19);
        let mut g2 = Graph::new();
        let bound2 = estore.bind(&mut g2).unwrap();
        let enc2 = EncoderParams::bind(&bound2, &cfg).unwrap();
        let ebank = PromptBank::bind(&bound2, &cfg, PromptMode::Early).unwrap();
        let classes = tokenize_classes(STANDARD_TEMPLATE, 2, cfg.vocab_size).unwrap();
        assert!(matches!(
            encode_text(&mut g2, &classes, &ebank, &enc2, &cfg),
            Err(Error::Mode(_))
        ));
    }

    /// With one layer, one head, zero prompts, and hand-set weights, the
    /// encoder must reproduce an independently coded attention forward.
    #[test]
    fn single_layer_matches_hand_computed_attention() {
        let d = 4;
        let cfg = EncoderConfig {
            num_layers: 1,
            prompt_depth: 1,
            prompt_len: 0,
            d_l: d,
            d_v: d,
            d_vl: d,
            num_heads: 1,
            vocab_size: 20,
            num_patch_tokens: 2, // sequence: cls + 2 patches = 3 tokens
            temperature: 0.07,
        };
        let mut store = build_store(&cfg, PromptMode::Coupled, 20);
        // identity q/k/v/o and projection; zero out positions and mlp,
        // neutral layer norms
        let eye: Vec<f64> = (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect();
        for name in ["vision.l0.attn.q0.w", "vision.l0.attn.k0.w", "vision.l0.attn.v0.w", "vision.l0.attn.o0.w", "vision.proj"] {
            store.get_mut(name).unwrap().data = eye.clone();
        }
        store.get_mut("vision.l0.mlp.w1").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        store.get_mut("vision.l0.mlp.w2").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        store.get_mut("vision.pos").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        let cls = vec![0.3, -0.2, 0.4, 0.1];
        store.get_mut("vision.cls").unwrap().data = cls.clone();

        let image = vec![0.5, 0.1, -0.3, 0.2, -0.1, 0.4, 0.2, -0.5];
        let got = {
            let mut g = Graph::new();
            let bound = store.bind(&mut g).unwrap();
            let enc = EncoderParams::bind(&bound, &cfg).unwrap();
            let bank = PromptBank::bind(&bound, &cfg, PromptMode::Coupled).unwrap();
            let z = encode_image(&mut g, &image, &bank, &enc, &cfg).unwrap();
            g.value(z).to_vec()
        };

        // hand-computed oracle: plain scalar math, no graph machinery
        let seq: Vec<Vec<f64>> = vec![cls.clone(), image[0..4].to_vec(), image[4..8].to_vec()];
        let ln = |row: &[f64]| -> Vec<f64> {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            row.iter().map(|v| (v - mean) / (var + LN_EPS).sqrt()).collect()
        };
        let normed: Vec<Vec<f64>> = seq.iter().map(|r| ln(r)).collect();
        // identity q/k/v: scores = normed . normed^T / sqrt(d)
        let mut attn_out = vec![vec![0.0; d]; 3];
        for i in 0..3 {
            let mut scores = [0.0; 3];
            for j in 0..3 {
                let dot: f64 = normed[i].iter().zip(&normed[j]).map(|(a, b)| a * b).sum();
                scores[j] = dot / (d as f64).sqrt();
            }
            let maxv = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - maxv).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..3 {
                for k in 0..d {
                    attn_out[i][k] += exps[j] / sum * normed[j][k];
                }
            }
        }
        let resid: Vec<Vec<f64>> = seq
            .iter()
            .zip(&attn_out)
            .map(|(x, a)| x.iter().zip(a).map(|(xv, av)| xv + av).collect())
            .collect();
        // mlp is zeroed: second residual is identity; then final ln + proj(identity)
        let cls_out = ln(&resid[0]);
        let norm: f64 = cls_out.iter().map(|v| v * v).sum::<f64>().sqrt();
        let want: Vec<f64> = cls_out.iter().map(|v| v / norm).collect();
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    /// b = 0 with J = 1 must equal a prompt-free reference forward.
    #[test]
    fn zero_prompt_len_reduces_to_plain_transformer() {
        let mut cfg = micro_cfg();
        cfg.prompt_len = 0;
        cfg.prompt_depth = 1;
        let store = build_store(&cfg, PromptMode::Coupled, 21);
        let classes = tokenize_classes(STANDARD_TEMPLATE, 2, cfg.vocab_size).unwrap();
        let images = rand_images(22, 2, &cfg);

        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let enc = EncoderParams::bind(&bound, &cfg).unwrap();
        let bank = PromptBank::bind(&bound, &cfg, PromptMode::Coupled).unwrap();
        assert!(matches!(bank, PromptBank::None));
        let z_t = encode_text(&mut g, &classes, &bank, &enc, &cfg).unwrap();
        let z_v = encode_image(&mut g, &images, &bank, &enc, &cfg).unwrap();

        // reference forward: run encode_sequence machinery manually without
        // any prompt logic by calling with an empty prompt list
        let t_ref = encode_text_with(&mut g, &classes, &[], &enc, &cfg, None).unwrap();
        let v_ref = encode_image_with(&mut g, &images, &[], &enc, &cfg, None).unwrap();
        assert_eq!(g.value(z_t), g.value(t_ref));
        assert_eq!(g.value(z_v), g.value(v_ref));
    }

    #[test]
    fn coupling_carries_gradient_to_text_prompts_from_vision_only_loss() {
        let cfg = micro_cfg();
        let store = build_store(&cfg, PromptMode::Coupled, 23);
        let images = rand_images(24, 2, &cfg);
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let enc = EncoderParams::bind(&bound, &cfg).unwrap();
        let bank = PromptBank::bind(&bound, &cfg, PromptMode::Coupled).unwrap();
        let z_v = encode_image(&mut g, &images, &bank, &enc, &cfg).unwrap();
        let sq = g.mul(z_v, z_v).unwrap();
        let loss = g.mean(sq).unwrap();
        g.backward(loss).unwrap();
        for i in 0..cfg.prompt_depth {
            let p = bound.id(&format!("bank.text_p{i}")).unwrap();
            let grad = g.grad(p).unwrap();
            assert!(grad.iter().any(|&v| v != 0.0), "text prompt {i} got no gradient from the vision path");
        }
        // text embedding is untouched by a vision-only loss
        let emb = bound.id("text.embed").unwrap();
        assert!(g.grad(emb).unwrap().iter().all(|&v| v == 0.0));
    }
}
