//! Deterministic synthetic multi-modal classification tasks.
//!
//! Each sample is a grid of `num_patch_tokens` token vectors in `R^{d_v}`:
//! the first half of the tokens carries a fixed per-class core direction, the
//! second half a fixed per-attribute spurious direction, both under Gaussian
//! noise. The spurious attribute equals the class-aligned attribute
//! (`label % A`) with probability `rho` in training and `rho'` in the test
//! splits, which recreates the group-imbalance regime of real worst-group
//! benchmarks at desk scale. Painting the two signals on disjoint tokens
//! keeps the disentanglement question falsifiable: an attention model can in
//! principle separate them.
//!
//! Every sample is generated from its own named RNG substream
//! (`data/<split>/c<class>/s<index>`), so any sample can be rebuilt in
//! isolation; the domain-shift transforms exploit this to reconstruct token
//! blocks bit-exactly instead of accumulating floating-point edits.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TaskSpec {
    pub num_classes: usize,
    /// Training samples per base class.
    pub samples_per_class: usize,
    /// Evaluation samples per class, for each of the two test splits.
    pub test_samples_per_class: usize,
    /// Spurious attribute cardinality (A).
    pub spurious_attr_cardinality: usize,
    /// P(attribute == class-aligned attribute) in the train split.
    pub train_correlation: f64,
    /// Same probability in the test splits.
    pub test_correlation: f64,
    pub noise_std: f64,
    pub num_patch_tokens: usize,
    pub d_v: usize,
    /// Magnitude of the per-class core pattern.
    pub core_scale: f64,
    /// Magnitude of the per-attribute spurious pattern.
    pub spur_scale: f64,
    /// Class core directions are drawn inside a shared random subspace of
    /// this rank (0 = full space). A low rank gives class semantics that
    /// extrapolate from base to novel classes.
    pub semantic_rank: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            num_classes: 4,
            samples_per_class: 500,
            test_samples_per_class: 250,
            spurious_attr_cardinality: 2,
            train_correlation: 0.95,
            test_correlation: 0.5,
            noise_std: 0.25,
            num_patch_tokens: 16,
            d_v: 32,
            core_scale: 1.0,
            spur_scale: 1.2,
            semantic_rank: 6,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::DegenerateTask(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.spurious_attr_cardinality < 2 {
            return Err(Error::Config("spurious_attr_cardinality must be >= 2".to_string()));
        }
        if self.samples_per_class < self.spurious_attr_cardinality
            || self.test_samples_per_class < self.spurious_attr_cardinality
        {
            return Err(Error::GroupCoverage(format!(
                "samples_per_class {} / test {} below attribute cardinality {}",
                self.samples_per_class, self.test_samples_per_class, self.spurious_attr_cardinality
            )));
        }
        if !(0.0..=1.0).contains(&self.train_correlation) || !(0.0..=1.0).contains(&self.test_correlation) {
            return Err(Error::Config("correlations must lie in [0, 1]".to_string()));
        }
        if self.num_patch_tokens < 2 {
            return Err(Error::Config("need at least 2 patch tokens".to_string()));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be nonnegative".to_string()));
        }
        if self.semantic_rank > self.d_v {
            return Err(Error::Config(format!(
                "semantic_rank {} exceeds d_v {}",
                self.semantic_rank, self.d_v
            )));
        }
        Ok(())
    }

    /// Tokens `0..core_token_count` carry the class pattern.
    pub fn core_token_count(&self) -> usize {
        self.num_patch_tokens / 2
    }

    pub fn num_groups(&self) -> usize {
        self.num_classes * self.spurious_attr_cardinality
    }
}

/// Deterministic first-half/second-half class split: base gets the first
/// `ceil(C / 2)` classes.
pub fn split_base_novel(task: &TaskSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if task.num_classes < 2 {
        return Err(Error::DegenerateTask(format!(
            "cannot split {} classes into base and novel",
            task.num_classes
        )));
    }
    let cut = task.num_classes.div_ceil(2);
    Ok(((0..cut).collect(), (cut..task.num_classes).collect()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Environment {
    Train,
    TestId,
    TestShift,
}

impl Environment {
    pub fn as_str(&self) -> &'static str {
        match self {
            Environment::Train => "train",
            Environment::TestId => "test_id",
            Environment::TestShift => "test_shift",
        }
    }
}

/// Where a sample came from, sufficient to regenerate it bit-exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleRef {
    pub env: Environment,
    pub class: usize,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct LabeledBatch {
    /// Flat `[N x tokens x d_v]`, row-major.
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    /// `label * A + attribute`.
    pub group_ids: Vec<usize>,
    pub env: Environment,
    /// Regeneration provenance, parallel to the samples.
    pub provenance: Vec<SampleRef>,
    /// Net attribute-flip rotation applied by [`domain_shift`] (0 = painted
    /// attributes match `group_ids`).
    pub flip_delta: usize,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize, task: &TaskSpec) -> &[f64] {
        let per = task.num_patch_tokens * task.d_v;
        &self.images[i * per..(i + 1) * per]
    }

    pub fn attribute(&self, i: usize, task: &TaskSpec) -> usize {
        self.group_ids[i] % task.spurious_attr_cardinality
    }

    /// Keep only samples of the listed classes (order preserved).
    pub fn filter_classes(&self, classes: &[usize], task: &TaskSpec) -> LabeledBatch {
        let per = task.num_patch_tokens * task.d_v;
        let mut out = LabeledBatch {
            images: Vec::new(),
            labels: Vec::new(),
            group_ids: Vec::new(),
            env: self.env,
            provenance: Vec::new(),
            flip_delta: self.flip_delta,
        };
        for i in 0..self.len() {
            if classes.contains(&self.labels[i]) {
                out.images.extend_from_slice(&self.images[i * per..(i + 1) * per]);
                out.labels.push(self.labels[i]);
                out.group_ids.push(self.group_ids[i]);
                out.provenance.push(self.provenance[i]);
            }
        }
        out
    }

    /// Select rows by index (for shuffled minibatches).
    pub fn select(&self, rows: &[usize], task: &TaskSpec) -> LabeledBatch {
        let per = task.num_patch_tokens * task.d_v;
        let mut out = LabeledBatch {
            images: Vec::with_capacity(rows.len() * per),
            labels: Vec::with_capacity(rows.len()),
            group_ids: Vec::with_capacity(rows.len()),
            env: self.env,
            provenance: Vec::with_capacity(rows.len()),
            flip_delta: self.flip_delta,
        };
        for &i in rows {
            out.images.extend_from_slice(&self.images[i * per..(i + 1) * per]);
            out.labels.push(self.labels[i]);
            out.group_ids.push(self.group_ids[i]);
            out.provenance.push(self.provenance[i]);
        }
        out
    }
}

/// The fixed random directions of a task, derived purely from its seed.
#[derive(Clone, Debug)]
pub struct Directions {
    pub class_core: Vec<Vec<f64>>,
    pub attr_spur: Vec<Vec<f64>>,
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

impl Directions {
    pub fn derive(task: &TaskSpec) -> Directions {
        let mut rng = substream(task.seed, "data/directions");
        let d = task.d_v;
        let rank = if task.semantic_rank == 0 { d } else { task.semantic_rank };
        // shared semantic subspace basis (rows need not be orthogonal; the
        // span is what matters)
        let basis: Vec<Vec<f64>> = (0..rank)
            .map(|_| {
                let mut row: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                normalize(&mut row);
                row
            })
            .collect();
        let class_core: Vec<Vec<f64>> = (0..task.num_classes)
            .map(|_| {
                let coefs: Vec<f64> = (0..rank).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let mut dir = vec![0.0; d];
                for (c, b) in coefs.iter().zip(&basis) {
                    for (dv, bv) in dir.iter_mut().zip(b) {
                        *dv += c * bv;
                    }
                }
                normalize(&mut dir);
                dir
            })
            .collect();
        // attribute directions share the semantic subspace: a spurious signal
        // orthogonal to every class direction could be projected away by any
        // linear map for free, which would make the disentanglement question
        // vacuous in embedding space (token attention can still separate the
        // two signals, since they sit on disjoint tokens)
        let attr_spur: Vec<Vec<f64>> = (0..task.spurious_attr_cardinality)
            .map(|_| {
                let coefs: Vec<f64> = (0..rank).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let mut dir = vec![0.0; d];
                for (c, b) in coefs.iter().zip(&basis) {
                    for (dv, bv) in dir.iter_mut().zip(b) {
                        *dv += c * bv;
                    }
                }
                normalize(&mut dir);
                dir
            })
            .collect();
        Directions { class_core, attr_spur }
    }
}

fn sample_stream_name(env: Environment, class: usize, index: usize) -> String {
    format!("data/{}/c{class}/s{index}", env.as_str())
}

/// Draw the sample's attribute and noise grid from its private stream.
/// The draw order (attribute first, then the token-major noise grid) is a
/// format invariant: reconstruction in [`domain_shift`] replays it.
fn draw_sample(
    task: &TaskSpec,
    env: Environment,
    class: usize,
    index: usize,
    correlation: f64,
) -> (usize, Vec<f64>) {
    let mut rng = substream(task.seed, &sample_stream_name(env, class, index));
    let a = task.spurious_attr_cardinality;
    let aligned = class % a;
    let attr = if rng.random_range(0.0..1.0) < correlation {
        aligned
    } else {
        let other = rng.random_range(0..a - 1);
        if other >= aligned {
            other + 1
        } else {
            other
        }
    };
    let noise: Vec<f64> = (0..task.num_patch_tokens * task.d_v)
        .map(|_| task.noise_std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    (attr, noise)
}

/// Paint one sample: noise plus class pattern on the core tokens and
/// attribute pattern on the spurious tokens.
fn paint(
    task: &TaskSpec,
    dirs: &Directions,
    class: usize,
    attr: usize,
    noise: &[f64],
    core_scale: f64,
) -> Vec<f64> {
    let d = task.d_v;
    let core_tokens = task.core_token_count();
    let mut img = noise.to_vec();
    for t in 0..task.num_patch_tokens {
        let row = &mut img[t * d..(t + 1) * d];
        if t < core_tokens {
            for (v, c) in row.iter_mut().zip(&dirs.class_core[class]) {
                *v += core_scale * c;
            }
        } else {
            for (v, s) in row.iter_mut().zip(&dirs.attr_spur[attr]) {
                *v += task.spur_scale * s;
            }
        }
    }
    img
}

fn generate_split(
    task: &TaskSpec,
    dirs: &Directions,
    env: Environment,
    classes: &[usize],
    per_class: usize,
    correlation: f64,
) -> LabeledBatch {
    let a = task.spurious_attr_cardinality;
    let mut batch = LabeledBatch {
        images: Vec::with_capacity(classes.len() * per_class * task.num_patch_tokens * task.d_v),
        labels: Vec::with_capacity(classes.len() * per_class),
        group_ids: Vec::with_capacity(classes.len() * per_class),
        env,
        provenance: Vec::with_capacity(classes.len() * per_class),
        flip_delta: 0,
    };
    for &class in classes {
        for index in 0..per_class {
            let (attr, noise) = draw_sample(task, env, class, index, correlation);
            batch.images.extend(paint(task, dirs, class, attr, &noise, task.core_scale));
            batch.labels.push(class);
            batch.group_ids.push(class * a + attr);
            batch.provenance.push(SampleRef { env, class, index });
        }
    }
    batch
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub train: LabeledBatch,
    pub test_id: LabeledBatch,
    pub test_shift: LabeledBatch,
}

/// Generate the three splits. Training covers base classes only; both test
/// splits cover every class at the test correlation.
pub fn generate(task: &TaskSpec) -> Result<SynthData> {
    task.validate()?;
    let dirs = Directions::derive(task);
    let (base, _novel) = split_base_novel(task)?;
    let all: Vec<usize> = (0..task.num_classes).collect();
    let train = generate_split(task, &dirs, Environment::Train, &base, task.samples_per_class, task.train_correlation);
    let test_id = generate_split(task, &dirs, Environment::TestId, &all, task.test_samples_per_class, task.test_correlation);
    let test_shift = generate_split(task, &dirs, Environment::TestShift, &all, task.test_samples_per_class, task.test_correlation);
    Ok(SynthData { train, test_id, test_shift })
}

// ── Domain shifts ────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShiftKind {
    /// Add fresh Gaussian noise of std `magnitude` to every value.
    NoiseUp,
    /// Rebuild core tokens with the class pattern scaled by `1 - magnitude`.
    CoreScaleDown,
    /// Repaint each sample's spurious tokens with the next attribute
    /// (`(a + 1) mod A`); any nonzero magnitude applies the flip.
    AttrFlip,
}

impl std::str::FromStr for ShiftKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise_up" => Ok(ShiftKind::NoiseUp),
            "core_scale_down" => Ok(ShiftKind::CoreScaleDown),
            "attr_flip" => Ok(ShiftKind::AttrFlip),
            other => Err(Error::Config(format!("unknown shift kind `{other}`"))),
        }
    }
}

impl ShiftKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ShiftKind::NoiseUp => "noise_up",
            ShiftKind::CoreScaleDown => "core_scale_down",
            ShiftKind::AttrFlip => "attr_flip",
        }
    }
    pub const ALL: [ShiftKind; 3] = [ShiftKind::NoiseUp, ShiftKind::CoreScaleDown, ShiftKind::AttrFlip];
}

/// Apply a distribution shift. Labels, groups, and environment tags are
/// unchanged; magnitude zero returns the batch bitwise.
///
/// `core_scale_down` and `attr_flip` regenerate the affected token blocks
/// from each sample's private stream, so applying `attr_flip` twice with
/// `A = 2` reconstructs the original batch bit-exactly.
pub fn domain_shift(task: &TaskSpec, batch: &LabeledBatch, kind: ShiftKind, magnitude: f64) -> Result<LabeledBatch> {
    task.validate()?;
    if magnitude < 0.0 || !magnitude.is_finite() {
        return Err(Error::Config(format!("shift magnitude must be finite and >= 0, got {magnitude}")));
    }
    if magnitude == 0.0 {
        return Ok(batch.clone());
    }
    let mut out = batch.clone();
    let dirs = Directions::derive(task);
    let a = task.spurious_attr_cardinality;
    let d = task.d_v;
    let per = task.num_patch_tokens * d;
    let core_tokens = task.core_token_count();
    match kind {
        ShiftKind::NoiseUp => {
            let mut rng = substream(task.seed, &format!("shift/noise_up/{}", batch.env.as_str()));
            for v in out.images.iter_mut() {
                *v += magnitude * rng.sample::<f64, _>(StandardNormal);
            }
        }
        ShiftKind::CoreScaleDown => {
            let scale = (1.0 - magnitude).max(0.0) * task.core_scale;
            for i in 0..out.len() {
                let sr = out.provenance[i];
                let correlation = correlation_of(task, sr.env);
                let (attr, noise) = draw_sample(task, sr.env, sr.class, sr.index, correlation);
                let painted_attr = (attr + out.flip_delta) % a;
                let rebuilt = paint_with_attr(task, &dirs, sr.class, painted_attr, &noise, scale);
                out.images[i * per..i * per + core_tokens * d]
                    .copy_from_slice(&rebuilt[..core_tokens * d]);
            }
        }
        ShiftKind::AttrFlip => {
            let new_delta = (out.flip_delta + 1) % a;
            for i in 0..out.len() {
                let sr = out.provenance[i];
                let correlation = correlation_of(task, sr.env);
                let (attr, noise) = draw_sample(task, sr.env, sr.class, sr.index, correlation);
                let painted_attr = (attr + new_delta) % a;
                let rebuilt = paint_with_attr(task, &dirs, sr.class, painted_attr, &noise, task.core_scale);
                out.images[i * per + core_tokens * d..(i + 1) * per]
                    .copy_from_slice(&rebuilt[core_tokens * d..]);
            }
            out.flip_delta = new_delta;
        }
    }
    Ok(out)
}

fn correlation_of(task: &TaskSpec, env: Environment) -> f64 {
    match env {
        Environment::Train => task.train_correlation,
        _ => task.test_correlation,
    }
}

fn paint_with_attr(
    task: &TaskSpec,
    dirs: &Directions,
    class: usize,
    attr: usize,
    noise: &[f64],
    core_scale: f64,
) -> Vec<f64> {
    paint(task, dirs, class, attr, noise, core_scale)
}

/// Check that every (class x attribute) group reachable under the split's
/// correlation actually appears; realistic evaluation sizes guarantee this,
/// tiny ones may not.
pub fn verify_group_coverage(task: &TaskSpec, batch: &LabeledBatch) -> Result<()> {
    let mut counts = vec![0usize; task.num_groups()];
    for &gid in &batch.group_ids {
        counts[gid] += 1;
    }
    let a = task.spurious_attr_cardinality;
    let rho = correlation_of(task, batch.env);
    let classes: std::collections::BTreeSet<usize> = batch.labels.iter().copied().collect();
    for &class in &classes {
        for attr in 0..a {
            let p = if attr == class % a { rho } else { (1.0 - rho) / (a - 1) as f64 };
            if p > 0.0 && counts[class * a + attr] == 0 {
                return Err(Error::GroupCoverage(format!(
                    "group (class {class}, attr {attr}) is empty in split {}",
                    batch.env.as_str()
                )));
            }
        }
    }
    Ok(())
}

/// Nearest-class-core-direction classifier over the mean core token: the
/// Bayes-style reference that ignores spurious tokens entirely.
pub fn core_oracle_predict(task: &TaskSpec, dirs: &Directions, batch: &LabeledBatch, classes: &[usize]) -> Vec<usize> {
    let d = task.d_v;
    let per = task.num_patch_tokens * d;
    let core_tokens = task.core_token_count();
    (0..batch.len())
        .map(|i| {
            let img = &batch.images[i * per..(i + 1) * per];
            let mut mean = vec![0.0; d];
            for t in 0..core_tokens {
                for k in 0..d {
                    mean[k] += img[t * d + k] / core_tokens as f64;
                }
            }
            *classes
                .iter()
                .max_by(|&&a, &&b| {
                    let sa: f64 = mean.iter().zip(&dirs.class_core[a]).map(|(m, c)| m * c).sum();
                    let sb: f64 = mean.iter().zip(&dirs.class_core[b]).map(|(m, c)| m * c).sum();
                    sa.partial_cmp(&sb).unwrap()
                })
                .unwrap()
        })
        .collect()
}

// ── Dataset file format ──────────────────────────────────────────────

pub const DATASET_MAGIC: &str = "DIMPLESYN v1";

#[derive(Serialize, Deserialize)]
struct SplitManifest {
    name: String,
    num_samples: usize,
    images_offset: u64,
    labels_offset: u64,
    groups_offset: u64,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    spec: TaskSpec,
    num_patch_tokens: usize,
    d_v: usize,
    splits: Vec<SplitManifest>,
}

/// Write the dataset: magic line, one-line JSON manifest (spec echo, split
/// sizes, byte offsets relative to the start of the data section), then per
/// split the raw little-endian f64 image block and u32 label/group arrays.
pub fn write_dataset(path: &Path, task: &TaskSpec, data: &SynthData) -> Result<()> {
    let splits = [&data.train, &data.test_id, &data.test_shift];
    let names = ["train", "test_id", "test_shift"];
    let mut manifest = DatasetManifest {
        spec: task.clone(),
        num_patch_tokens: task.num_patch_tokens,
        d_v: task.d_v,
        splits: Vec::new(),
    };
    let mut offset = 0u64;
    for (name, split) in names.iter().zip(splits) {
        let n = split.len() as u64;
        let images_len = n * (task.num_patch_tokens * task.d_v) as u64 * 8;
        manifest.splits.push(SplitManifest {
            name: name.to_string(),
            num_samples: split.len(),
            images_offset: offset,
            labels_offset: offset + images_len,
            groups_offset: offset + images_len + n * 4,
        });
        offset += images_len + n * 8;
    }
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{DATASET_MAGIC}")?;
    let manifest_json = serde_json::to_string(&manifest)
        .map_err(|e| Error::DatasetFile(format!("manifest serialization: {e}")))?;
    writeln!(file, "{manifest_json}")?;
    for split in splits {
        for v in &split.images {
            file.write_all(&v.to_le_bytes())?;
        }
        for &l in &split.labels {
            file.write_all(&(l as u32).to_le_bytes())?;
        }
        for &gid in &split.group_ids {
            file.write_all(&(gid as u32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a dataset written by [`write_dataset`], reconstructing provenance
/// from the generation layout (splits are stored class-major in generation
/// order).
pub fn read_dataset(path: &Path) -> Result<(TaskSpec, SynthData)> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let first_nl = raw
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::DatasetFile("missing magic line".to_string()))?;
    let magic = std::str::from_utf8(&raw[..first_nl])
        .map_err(|_| Error::DatasetFile("magic line is not utf-8".to_string()))?;
    if magic != DATASET_MAGIC {
        return Err(Error::DatasetFile(format!(
            "bad magic `{magic}`; expected `{DATASET_MAGIC}`"
        )));
    }
    let rest = &raw[first_nl + 1..];
    let second_nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::DatasetFile("missing manifest line".to_string()))?;
    let manifest: DatasetManifest = serde_json::from_slice(&rest[..second_nl])
        .map_err(|e| Error::DatasetFile(format!("manifest parse: {e}")))?;
    let body = &rest[second_nl + 1..];
    let task = manifest.spec.clone();
    let per = task.num_patch_tokens * task.d_v;

    let read_split = |m: &SplitManifest, env: Environment| -> Result<LabeledBatch> {
        let n = m.num_samples;
        let need = m.groups_offset as usize + n * 4;
        if body.len() < need {
            return Err(Error::DatasetFile(format!(
                "split {} extends to byte {need} but data section has {}",
                m.name,
                body.len()
            )));
        }
        let mut images = Vec::with_capacity(n * per);
        let base = m.images_offset as usize;
        for i in 0..n * per {
            let b = &body[base + i * 8..base + i * 8 + 8];
            images.push(f64::from_le_bytes(b.try_into().unwrap()));
        }
        let mut labels = Vec::with_capacity(n);
        let base = m.labels_offset as usize;
        for i in 0..n {
            let b = &body[base + i * 4..base + i * 4 + 4];
            labels.push(u32::from_le_bytes(b.try_into().unwrap()) as usize);
        }
        let mut group_ids = Vec::with_capacity(n);
        let base = m.groups_offset as usize;
        for i in 0..n {
            let b = &body[base + i * 4..base + i * 4 + 4];
            group_ids.push(u32::from_le_bytes(b.try_into().unwrap()) as usize);
        }
        // generation order is class-major with per-class indices
        let mut provenance = Vec::with_capacity(n);
        let mut counters = std::collections::HashMap::new();
        for &class in &labels {
            let idx = counters.entry(class).or_insert(0usize);
            provenance.push(SampleRef { env, class, index: *idx });
            *idx += 1;
        }
        Ok(LabeledBatch { images, labels, group_ids, env, provenance, flip_delta: 0 })
    };

    let find = |name: &str| -> Result<&SplitManifest> {
        manifest
            .splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::DatasetFile(format!("manifest lacks split `{name}`")))
    };
    let data = SynthData {
        train: read_split(find("train")?, Environment::Train)?,
        test_id: read_split(find("test_id")?, Environment::TestId)?,
        test_shift: read_split(find("test_shift")?, Environment::TestShift)?,
    };
    Ok((task, data))
}
