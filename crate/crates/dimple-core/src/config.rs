//! Plain-text `key = value` configuration files with `[task]`, `[encoder]`,
//! `[loss]`, and `[train]` sections, plus `--set section.key=value`
//! overrides. Unknown keys report the nearest valid key. The rendered echo
//! is canonical: parsing it reproduces the configuration exactly.

use crate::error::{Error, Result};
use crate::harness::TrainConfig;

/// All valid `section.key` names, in echo order.
pub const KEYS: [&str; 32] = [
    "task.num_classes",
    "task.samples_per_class",
    "task.test_samples_per_class",
    "task.spurious_attr_cardinality",
    "task.train_correlation",
    "task.test_correlation",
    "task.noise_std",
    "task.num_patch_tokens",
    "task.d_v",
    "task.core_scale",
    "task.spur_scale",
    "task.semantic_rank",
    "task.seed",
    "encoder.num_layers",
    "encoder.prompt_depth",
    "encoder.prompt_len",
    "encoder.d_l",
    "encoder.d_v",
    "encoder.d_vl",
    "encoder.num_heads",
    "encoder.vocab_size",
    "encoder.num_patch_tokens",
    "encoder.temperature",
    "loss.alpha",
    "loss.beta",
    "loss.tau",
    "loss.terms",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.momentum",
    "train.seed",
];

// "train.objective" and "train.prompt_mode" are also valid; they live
// outside KEYS' fixed numeric ordering only for historical echo layout.
pub const EXTRA_KEYS: [&str; 2] = ["train.objective", "train.prompt_mode"];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{value}`")))
}

fn terms_to_string(cfg: &TrainConfig) -> String {
    let mut parts = Vec::new();
    if cfg.terms.ce {
        parts.push("ce");
    }
    if cfg.terms.sp {
        parts.push("sp");
    }
    if cfg.terms.cmi {
        parts.push("cmi");
    }
    parts.join(",")
}

fn parse_terms(key: &str, value: &str) -> Result<crate::objectives::TermMask> {
    let mut mask = crate::objectives::TermMask { ce: false, sp: false, cmi: false };
    for part in value.split(',') {
        match part.trim() {
            "ce" => mask.ce = true,
            "sp" => mask.sp = true,
            "cmi" => mask.cmi = true,
            "" => {}
            other => return Err(Error::Config(format!("key `{key}`: unknown loss term `{other}`"))),
        }
    }
    if !(mask.ce || mask.sp || mask.cmi) {
        return Err(Error::Config(format!("key `{key}`: at least one loss term required")));
    }
    Ok(mask)
}

/// Apply one `section.key = value` assignment.
pub fn apply_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    let value = value.trim();
    match key {
        "task.num_classes" => cfg.task.num_classes = parse_num(key, value)?,
        "task.samples_per_class" => cfg.task.samples_per_class = parse_num(key, value)?,
        "task.test_samples_per_class" => cfg.task.test_samples_per_class = parse_num(key, value)?,
        "task.spurious_attr_cardinality" => cfg.task.spurious_attr_cardinality = parse_num(key, value)?,
        "task.train_correlation" => cfg.task.train_correlation = parse_num(key, value)?,
        "task.test_correlation" => cfg.task.test_correlation = parse_num(key, value)?,
        "task.noise_std" => cfg.task.noise_std = parse_num(key, value)?,
        "task.num_patch_tokens" => cfg.task.num_patch_tokens = parse_num(key, value)?,
        "task.d_v" => cfg.task.d_v = parse_num(key, value)?,
        "task.core_scale" => cfg.task.core_scale = parse_num(key, value)?,
        "task.spur_scale" => cfg.task.spur_scale = parse_num(key, value)?,
        "task.semantic_rank" => cfg.task.semantic_rank = parse_num(key, value)?,
        "task.seed" => cfg.task.seed = parse_num(key, value)?,
        "encoder.num_layers" => cfg.encoder.num_layers = parse_num(key, value)?,
        "encoder.prompt_depth" => cfg.encoder.prompt_depth = parse_num(key, value)?,
        "encoder.prompt_len" => cfg.encoder.prompt_len = parse_num(key, value)?,
        "encoder.d_l" => cfg.encoder.d_l = parse_num(key, value)?,
        "encoder.d_v" => cfg.encoder.d_v = parse_num(key, value)?,
        "encoder.d_vl" => cfg.encoder.d_vl = parse_num(key, value)?,
        "encoder.num_heads" => cfg.encoder.num_heads = parse_num(key, value)?,
        "encoder.vocab_size" => cfg.encoder.vocab_size = parse_num(key, value)?,
        "encoder.num_patch_tokens" => cfg.encoder.num_patch_tokens = parse_num(key, value)?,
        "encoder.temperature" => cfg.encoder.temperature = parse_num(key, value)?,
        "loss.alpha" => cfg.weights.alpha = parse_num(key, value)?,
        "loss.beta" => cfg.weights.beta = parse_num(key, value)?,
        "loss.tau" => {
            cfg.weights.tau = parse_num(key, value)?;
            cfg.encoder.temperature = cfg.weights.tau;
        }
        "loss.terms" => cfg.terms = parse_terms(key, value)?,
        "train.epochs" => cfg.epochs = parse_num(key, value)?,
        "train.batch_size" => cfg.batch_size = parse_num(key, value)?,
        "train.lr" => cfg.lr = parse_num(key, value)?,
        "train.momentum" => cfg.momentum = parse_num(key, value)?,
        "train.seed" => cfg.seed = parse_num(key, value)?,
        "train.objective" => cfg.objective = value.parse()?,
        "train.prompt_mode" => cfg.prompt_mode = value.parse()?,
        other => {
            return Err(Error::UnknownKey {
                key: other.to_string(),
                nearest: nearest_key(other),
            })
        }
    }
    Ok(())
}

/// Parse a config file body on top of the defaults.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            if !["task", "encoder", "loss", "train"].contains(&section.as_str()) {
                return Err(Error::Config(format!(
                    "line {}: unknown section `{section}`",
                    lineno + 1
                )));
            }
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)));
        };
        let full = if key.trim().contains('.') {
            key.trim().to_string()
        } else if section.is_empty() {
            return Err(Error::Config(format!(
                "line {}: key `{}` appears before any [section]",
                lineno + 1,
                key.trim()
            )));
        } else {
            format!("{section}.{}", key.trim())
        };
        apply_key(&mut cfg, &full, value)?;
    }
    Ok(cfg)
}

/// Apply a `--set section.key=value` override.
pub fn apply_override(cfg: &mut TrainConfig, assignment: &str) -> Result<()> {
    let Some((key, value)) = assignment.split_once('=') else {
        return Err(Error::Config(format!(
            "override `{assignment}` must look like section.key=value"
        )));
    };
    apply_key(cfg, key.trim(), value)
}

/// Canonical echo; `parse_config(render_config(cfg))` reproduces `cfg`.
pub fn render_config(cfg: &TrainConfig) -> String {
    let t = &cfg.task;
    let e = &cfg.encoder;
    let w = &cfg.weights;
    format!(
        "[task]\n\
         num_classes = {}\n\
         samples_per_class = {}\n\
         test_samples_per_class = {}\n\
         spurious_attr_cardinality = {}\n\
         train_correlation = {}\n\
         test_correlation = {}\n\
         noise_std = {}\n\
         num_patch_tokens = {}\n\
         d_v = {}\n\
         core_scale = {}\n\
         spur_scale = {}\n\
         semantic_rank = {}\n\
         seed = {}\n\
         \n\
         [encoder]\n\
         num_layers = {}\n\
         prompt_depth = {}\n\
         prompt_len = {}\n\
         d_l = {}\n\
         d_v = {}\n\
         d_vl = {}\n\
         num_heads = {}\n\
         vocab_size = {}\n\
         num_patch_tokens = {}\n\
         temperature = {}\n\
         \n\
         [loss]\n\
         alpha = {}\n\
         beta = {}\n\
         tau = {}\n\
         terms = {}\n\
         \n\
         [train]\n\
         epochs = {}\n\
         batch_size = {}\n\
         lr = {}\n\
         momentum = {}\n\
         seed = {}\n\
         objective = {}\n\
         prompt_mode = {}\n",
        t.num_classes,
        t.samples_per_class,
        t.test_samples_per_class,
        t.spurious_attr_cardinality,
        t.train_correlation,
        t.test_correlation,
        t.noise_std,
        t.num_patch_tokens,
        t.d_v,
        t.core_scale,
        t.spur_scale,
        t.semantic_rank,
        t.seed,
        e.num_layers,
        e.prompt_depth,
        e.prompt_len,
        e.d_l,
        e.d_v,
        e.d_vl,
        e.num_heads,
        e.vocab_size,
        e.num_patch_tokens,
        e.temperature,
        w.alpha,
        w.beta,
        w.tau,
        terms_to_string(cfg),
        cfg.epochs,
        cfg.batch_size,
        cfg.lr,
        cfg.momentum,
        cfg.seed,
        cfg.objective,
        cfg.prompt_mode,
    )
}

fn levenshtein(a: &str, b: &str) -> usize {
    let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            cur[j] = (prev[j] + 1).min(cur[j - 1] + 1).min(prev[j - 1] + cost);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Closest valid key by edit distance.
pub fn nearest_key(bad: &str) -> String {
    KEYS.iter()
        .chain(EXTRA_KEYS.iter())
        .min_by_key(|k| levenshtein(bad, k))
        .map(|k| k.to_string())
        .unwrap_or_default()
}
