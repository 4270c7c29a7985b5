//! Training loop, evaluation protocols, and experiment drivers.
//!
//! Training is plain SGD (momentum exposed, default off) over seeded
//! shuffles, single-threaded for determinism: (seed, config) fully
//! determines every emitted byte. Evaluation reports accuracies in percent.
//! Predictions always go through the invariant pathway of the configured
//! objective; the spurious pathway never votes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{domain_shift, split_base_novel, LabeledBatch, ShiftKind, SynthData, TaskSpec};
use crate::encoder::{EncoderConfig, PromptMode};
use crate::error::{Error, Result};
use crate::independence::KernelSpec;
use crate::model::{DimpleModel, Objective};
use crate::objectives::{LossWeights, TermMask};
use crate::rng::substream;
use crate::tensor::Graph;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub objective: Objective,
    pub prompt_mode: PromptMode,
    pub weights: LossWeights,
    pub terms: TermMask,
    pub encoder: EncoderConfig,
    pub task: TaskSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            lr: 0.0035,
            momentum: 0.0,
            seed: 0,
            objective: Objective::Dimple,
            prompt_mode: PromptMode::Coupled,
            weights: LossWeights::default(),
            terms: TermMask::ALL,
            encoder: EncoderConfig::default(),
            task: TaskSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".to_string()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".to_string()));
        }
        if (self.objective == Objective::DimpleEarly) != (self.prompt_mode == PromptMode::Early) {
            return Err(Error::Config(
                "objective/mode mismatch: dimple_early <=> early prompt mode".to_string(),
            ));
        }
        self.weights.validate()?;
        self.encoder.validate()?;
        self.task.validate()
    }

    /// The paper-style few-shot regime: 16 samples per class, batch 4,
    /// 5 epochs, lr 0.0035.
    pub fn apply_paper_regime(&mut self) {
        self.task.samples_per_class = 16;
        self.batch_size = 4;
        self.epochs = 5;
        self.lr = 0.0035;
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub ce_u: f64,
    pub sp_r: f64,
    pub cmi: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub ce_u: f64,
    pub sp_r: f64,
    pub cmi: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GroupAccuracy {
    pub group_id: usize,
    pub count: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ShiftAccuracy {
    pub kind: String,
    pub magnitude: f64,
    pub accuracy: f64,
}

/// Everything a run reports. Accuracies are percentages.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunMetrics {
    pub base_acc: f64,
    pub novel_acc: f64,
    pub hm: f64,
    pub avg_group_acc: f64,
    pub worst_group_acc: f64,
    pub per_group: Vec<GroupAccuracy>,
    pub group_warnings: Vec<String>,
    pub shifts: Vec<ShiftAccuracy>,
    pub epoch_losses: Vec<EpochLoss>,
    #[serde(skip)]
    pub steps: Vec<StepRecord>,
}

/// `2 b n / (b + n)`, zero when both are zero.
pub fn harmonic_mean(base: f64, novel: f64) -> f64 {
    if base + novel > 0.0 {
        2.0 * base * novel / (base + novel)
    } else {
        0.0
    }
}

fn accuracy_pct(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * correct as f64 / labels.len() as f64
}

/// Train a model on the task's train split (base classes only).
pub fn train(cfg: &TrainConfig, data: &SynthData) -> Result<(DimpleModel, Vec<StepRecord>, Vec<EpochLoss>)> {
    cfg.validate()?;
    let mut model = DimpleModel::new(
        cfg.encoder.clone(),
        cfg.prompt_mode,
        cfg.objective,
        &cfg.task,
        cfg.seed,
    )?;
    let (base_classes, _) = split_base_novel(&cfg.task)?;
    let kspec = KernelSpec::default();
    let mut velocity = BTreeMap::new();
    let mut steps = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut step_idx = 0usize;
    let n = data.train.len();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = substream(cfg.seed, &format!("shuffle/epoch{epoch}"));
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.train.select(chunk, &cfg.task);
            let mut g = Graph::new();
            let ctx = model.bind(&mut g)?;
            let report = match model.loss(&mut g, &ctx, &batch, &base_classes, &cfg.weights, &kspec, cfg.terms) {
                Ok(r) => r,
                // a batch where no class has two samples carries no CMI
                // information; train that step without the term
                Err(Error::EstimatorUndefined(_)) => {
                    let mut g2 = Graph::new();
                    let ctx2 = model.bind(&mut g2)?;
                    let masked = TermMask { cmi: false, ..cfg.terms };
                    let r = model.loss(&mut g2, &ctx2, &batch, &base_classes, &cfg.weights, &kspec, masked)?;
                    g = g2;
                    g.backward(r.total_id)?;
                    model.store.sgd_step(&g, &ctx2.bound, cfg.lr, cfg.momentum, &mut velocity);
                    record_step(&mut steps, &mut sums, &mut batches, step_idx, epoch, &r);
                    step_idx += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if !report.total.is_finite() {
                return Err(Error::Diverged { step: step_idx });
            }
            g.backward(report.total_id)?;
            model.store.sgd_step(&g, &ctx.bound, cfg.lr, cfg.momentum, &mut velocity);
            record_step(&mut steps, &mut sums, &mut batches, step_idx, epoch, &report);
            step_idx += 1;
        }
        let denom = batches.max(1) as f64;
        epoch_losses.push(EpochLoss {
            epoch,
            ce_u: sums.0 / denom,
            sp_r: sums.1 / denom,
            cmi: sums.2 / denom,
            total: sums.3 / denom,
        });
    }
    Ok((model, steps, epoch_losses))
}

fn record_step(
    steps: &mut Vec<StepRecord>,
    sums: &mut (f64, f64, f64, f64),
    batches: &mut usize,
    step: usize,
    epoch: usize,
    report: &crate::objectives::LossReport,
) {
    sums.0 += report.ce_u;
    sums.1 += report.sp_r;
    sums.2 += report.cmi;
    sums.3 += report.total;
    *batches += 1;
    steps.push(StepRecord {
        step,
        epoch,
        ce_u: report.ce_u,
        sp_r: report.sp_r,
        cmi: report.cmi,
        total: report.total,
    });
}

/// Base-to-novel evaluation: accuracy on base-class test samples among base
/// classes, zero-shot accuracy on novel-class samples among novel classes,
/// and their harmonic mean (all percent).
pub fn eval_base_novel(
    model: &DimpleModel,
    base_test: &LabeledBatch,
    novel_test: &LabeledBatch,
) -> Result<(f64, f64, f64)> {
    if base_test.is_empty() || novel_test.is_empty() {
        return Err(Error::Config("base/novel evaluation needs non-empty splits".to_string()));
    }
    let mut base_classes: Vec<usize> = base_test.labels.clone();
    base_classes.sort_unstable();
    base_classes.dedup();
    let mut novel_classes: Vec<usize> = novel_test.labels.clone();
    novel_classes.sort_unstable();
    novel_classes.dedup();
    let base_preds = model.predict(base_test, &base_classes)?;
    let novel_preds = model.predict(novel_test, &novel_classes)?;
    let base_acc = accuracy_pct(&base_preds, &base_test.labels);
    let novel_acc = accuracy_pct(&novel_preds, &novel_test.labels);
    Ok((base_acc, novel_acc, harmonic_mean(base_acc, novel_acc)))
}

#[derive(Clone, Debug)]
pub struct GroupEval {
    pub avg: f64,
    pub per_group: Vec<GroupAccuracy>,
    pub worst: f64,
    pub warnings: Vec<String>,
}

/// Per-(class x attribute) group accuracy over whatever classes the batch
/// carries; `avg` is the sample-weighted overall accuracy and `worst` the
/// minimum over non-empty groups. Groups absent from the batch are excluded
/// with a warning record.
pub fn eval_groups(model: &DimpleModel, test: &LabeledBatch) -> Result<GroupEval> {
    if test.is_empty() {
        return Err(Error::Config("group evaluation needs a non-empty split".to_string()));
    }
    let mut classes: Vec<usize> = test.labels.clone();
    classes.sort_unstable();
    classes.dedup();
    let preds = model.predict(test, &classes)?;
    let a = model.task.spurious_attr_cardinality;
    let mut hit: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for ((p, l), gid) in preds.iter().zip(&test.labels).zip(&test.group_ids) {
        let entry = hit.entry(*gid).or_insert((0, 0));
        entry.1 += 1;
        if p == l {
            entry.0 += 1;
        }
    }
    let mut warnings = Vec::new();
    for &class in &classes {
        for attr in 0..a {
            let gid = class * a + attr;
            if !hit.contains_key(&gid) {
                warnings.push(format!("group {gid} (class {class}, attribute {attr}) absent; excluded"));
            }
        }
    }
    let per_group: Vec<GroupAccuracy> = hit
        .iter()
        .map(|(&group_id, &(correct, count))| GroupAccuracy {
            group_id,
            count,
            accuracy: 100.0 * correct as f64 / count as f64,
        })
        .collect();
    let avg = accuracy_pct(&preds, &test.labels);
    let worst = per_group
        .iter()
        .map(|gx| gx.accuracy)
        .fold(f64::INFINITY, f64::min);
    Ok(GroupEval { avg, per_group, worst, warnings })
}

/// Accuracy per shift kind at the given magnitudes, predicting through the
/// invariant pathway among the batch's classes.
pub fn eval_shift(
    model: &DimpleModel,
    task: &TaskSpec,
    batch: &LabeledBatch,
    shifts: &[(ShiftKind, f64)],
) -> Result<Vec<ShiftAccuracy>> {
    let mut classes: Vec<usize> = batch.labels.clone();
    classes.sort_unstable();
    classes.dedup();
    let mut out = Vec::with_capacity(shifts.len());
    for &(kind, magnitude) in shifts {
        let shifted = domain_shift(task, batch, kind, magnitude)?;
        let preds = model.predict(&shifted, &classes)?;
        out.push(ShiftAccuracy {
            kind: kind.as_str().to_string(),
            magnitude,
            accuracy: accuracy_pct(&preds, &shifted.labels),
        });
    }
    Ok(out)
}

/// Default shift battery reported by a run.
pub fn default_shifts(task: &TaskSpec) -> Vec<(ShiftKind, f64)> {
    vec![
        (ShiftKind::NoiseUp, task.noise_std),
        (ShiftKind::CoreScaleDown, 0.5),
        (ShiftKind::AttrFlip, 1.0),
    ]
}

/// Train and run the full evaluation battery.
pub fn run_experiment(cfg: &TrainConfig, data: &SynthData) -> Result<(DimpleModel, RunMetrics)> {
    let (model, steps, epoch_losses) = train(cfg, data)?;
    let metrics = evaluate(&model, cfg, data, steps, epoch_losses)?;
    Ok((model, metrics))
}

/// Evaluation battery for an already-trained model.
pub fn evaluate(
    model: &DimpleModel,
    cfg: &TrainConfig,
    data: &SynthData,
    steps: Vec<StepRecord>,
    epoch_losses: Vec<EpochLoss>,
) -> Result<RunMetrics> {
    let (base_classes, novel_classes) = split_base_novel(&cfg.task)?;
    let base_test = data.test_id.filter_classes(&base_classes, &cfg.task);
    let novel_test = data.test_id.filter_classes(&novel_classes, &cfg.task);
    let (base_acc, novel_acc, hm) = eval_base_novel(model, &base_test, &novel_test)?;
    // worst-group protocol over the trained (base) classes
    let groups = eval_groups(model, &base_test)?;
    let shift_base = data.test_shift.filter_classes(&base_classes, &cfg.task);
    let shifts = eval_shift(model, &cfg.task, &shift_base, &default_shifts(&cfg.task))?;
    Ok(RunMetrics {
        base_acc,
        novel_acc,
        hm,
        avg_group_acc: groups.avg,
        worst_group_acc: groups.worst,
        per_group: groups.per_group,
        group_warnings: groups.warnings,
        shifts,
        epoch_losses,
        steps,
    })
}

// ── Serialization of run outputs ─────────────────────────────────────

impl RunMetrics {
    /// `run.json` body (pretty JSON, trailing newline). Per-step records go
    /// to `steps.csv` instead.
    pub fn run_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }

    /// `steps.csv` body.
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,epoch,ce_u,sp_r,cmi,total\n");
        for r in &self.steps {
            let _ = writeln!(out, "{},{},{},{},{},{}", r.step, r.epoch, r.ce_u, r.sp_r, r.cmi, r.total);
        }
        out
    }
}

/// Write embeddings CSV: one row per (sample, modality, component) plus one
/// per (class, modality, component). Floats use the shortest representation
/// that round-trips `f64` exactly.
pub fn export_embeddings(
    model: &DimpleModel,
    batch: &LabeledBatch,
    classes: &[usize],
    path: &Path,
) -> Result<()> {
    let export = model.embeddings(batch, classes)?;
    let d = export.d_vl;
    let mut out = String::from("sample_id,label,group_id,modality,component");
    for j in 0..d {
        let _ = write!(out, ",dim_{j}");
    }
    out.push('\n');
    let mut push_row = |id: i64, label: i64, gid: i64, modality: &str, component: &str, row: &[f64]| {
        let _ = write!(out, "{id},{label},{gid},{modality},{component}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    };
    for i in 0..batch.len() {
        let (label, gid) = (batch.labels[i] as i64, batch.group_ids[i] as i64);
        push_row(i as i64, label, gid, "v", "u", &export.vision_invariant[i * d..(i + 1) * d]);
        push_row(i as i64, label, gid, "v", "s", &export.vision_spurious[i * d..(i + 1) * d]);
    }
    for (row, &class) in classes.iter().enumerate() {
        push_row(class as i64, class as i64, -1, "t", "u", &export.text_invariant[row * d..(row + 1) * d]);
        push_row(class as i64, class as i64, -1, "t", "s", &export.text_spurious[row * d..(row + 1) * d]);
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ── Gridsearch ───────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct GridRow {
    pub alpha: f64,
    pub beta: f64,
    pub prompt_len: usize,
    pub prompt_depth: usize,
    pub status: String,
    pub base_acc: Option<f64>,
    pub novel_acc: Option<f64>,
    pub hm: Option<f64>,
    pub avg_group_acc: Option<f64>,
    pub worst_group_acc: Option<f64>,
}

/// Cross product over `{alpha, beta, prompt_len, prompt_depth}` with a
/// shared seed. Invalid cells (prompt_depth > num_layers) are recorded as
/// skipped. Rows come back sorted by harmonic mean, descending, skipped
/// rows last; ties break on cell order so reruns are byte-identical.
pub fn gridsearch(
    base_cfg: &TrainConfig,
    alphas: &[f64],
    betas: &[f64],
    prompt_lens: &[usize],
    prompt_depths: &[usize],
) -> Result<Vec<GridRow>> {
    use rayon::prelude::*;
    let mut cells = Vec::new();
    for &alpha in alphas {
        for &beta in betas {
            for &b in prompt_lens {
                for &j in prompt_depths {
                    cells.push((alpha, beta, b, j));
                }
            }
        }
    }
    let data = crate::data::generate(&base_cfg.task)?;
    let results: Vec<(usize, GridRow)> = cells
        .par_iter()
        .enumerate()
        .map(|(idx, &(alpha, beta, b, j))| {
            let mut cfg = base_cfg.clone();
            cfg.weights.alpha = alpha;
            cfg.weights.beta = beta;
            cfg.encoder.prompt_len = b;
            cfg.encoder.prompt_depth = j;
            let mut row = GridRow {
                alpha,
                beta,
                prompt_len: b,
                prompt_depth: j,
                status: "ok".to_string(),
                base_acc: None,
                novel_acc: None,
                hm: None,
                avg_group_acc: None,
                worst_group_acc: None,
            };
            if j > cfg.encoder.num_layers || j < 1 {
                row.status = format!("skipped: prompt_depth {j} outside 1..={}", cfg.encoder.num_layers);
                return (idx, row);
            }
            match run_experiment(&cfg, &data) {
                Ok((_, m)) => {
                    row.base_acc = Some(m.base_acc);
                    row.novel_acc = Some(m.novel_acc);
                    row.hm = Some(m.hm);
                    row.avg_group_acc = Some(m.avg_group_acc);
                    row.worst_group_acc = Some(m.worst_group_acc);
                }
                Err(e) => row.status = format!("error: {e}"),
            }
            (idx, row)
        })
        .collect();
    let mut indexed = results;
    indexed.sort_by(|(ia, a), (ib, b)| {
        match (a.hm, b.hm) {
            (Some(x), Some(y)) => y.partial_cmp(&x).unwrap().then(ia.cmp(ib)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => ia.cmp(ib),
        }
    });
    Ok(indexed.into_iter().map(|(_, r)| r).collect())
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut out = String::from(
        "alpha,beta,prompt_len,prompt_depth,status,base_acc,novel_acc,hm,avg_group_acc,worst_group_acc\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.alpha,
            r.beta,
            r.prompt_len,
            r.prompt_depth,
            r.status,
            fmt(r.base_acc),
            fmt(r.novel_acc),
            fmt(r.hm),
            fmt(r.avg_group_acc),
            fmt(r.worst_group_acc)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate;

    fn micro_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 8,
            lr: 0.0035,
            seed: 11,
            encoder: EncoderConfig {
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
            },
            task: TaskSpec {
                num_classes: 4,
                samples_per_class: 16,
                test_samples_per_class: 12,
                d_v: 8,
                num_patch_tokens: 4,
                noise_std: 0.2,
                seed: 11,
                semantic_rank: 3,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn harmonic_mean_identities() {
        assert!((harmonic_mean(76.09, 73.35) - 74.70).abs() < 0.01);
        assert!((harmonic_mean(62.72, 65.60) - 64.13).abs() < 0.01);
        assert_eq!(harmonic_mean(50.0, 50.0), 50.0);
        assert_eq!(harmonic_mean(0.0, 80.0), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    }

    #[test]
    fn zero_lr_is_rejected_and_training_is_deterministic() {
        let cfg = micro_cfg();
        let mut bad = cfg.clone();
        bad.lr = 0.0;
        assert!(bad.validate().is_err());

        let data = generate(&cfg.task).unwrap();
        let (_, m1) = run_experiment(&cfg, &data).unwrap();
        let (_, m2) = run_experiment(&cfg, &data).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1.run_json(), m2.run_json());
        assert_eq!(m1.steps_csv(), m2.steps_csv());
    }

    #[test]
    fn training_decreases_loss_on_a_fixed_probe_batch() {
        for seed in 0..5u64 {
            let mut cfg = micro_cfg();
            cfg.seed = seed;
            cfg.task.seed = seed;
            let data = generate(&cfg.task).unwrap();
            let (base, _) = split_base_novel(&cfg.task).unwrap();
            // class-balanced probe: the train split is class-major ordered
            let half = cfg.task.samples_per_class;
            let idx: Vec<usize> = (0..8).chain(half..half + 8).collect();
            let probe = data.train.select(&idx, &cfg.task);
            let probe_loss = |model: &DimpleModel| {
                let mut g = Graph::new();
                let ctx = model.bind(&mut g).unwrap();
                model
                    .loss(&mut g, &ctx, &probe, &base, &cfg.weights, &KernelSpec::default(), cfg.terms)
                    .unwrap()
                    .total
            };
            let untrained =
                DimpleModel::new(cfg.encoder.clone(), cfg.prompt_mode, cfg.objective, &cfg.task, cfg.seed).unwrap();
            let before = probe_loss(&untrained);
            let (model, _, _) = train(&cfg, &data).unwrap();
            let after = probe_loss(&model);
            assert!(after < before, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn eval_groups_worst_bounds_and_warnings() {
        let cfg = micro_cfg();
        let data = generate(&cfg.task).unwrap();
        let (model, _, _) = train(&cfg, &data).unwrap();
        let (base, _) = split_base_novel(&cfg.task).unwrap();
        let base_test = data.test_id.filter_classes(&base, &cfg.task);
        let g = eval_groups(&model, &base_test).unwrap();
        assert!(g.worst <= g.avg + 1e-12);
        for gx in &g.per_group {
            assert!(g.worst <= gx.accuracy + 1e-12);
        }
        let min = g.per_group.iter().map(|x| x.accuracy).fold(f64::INFINITY, f64::min);
        assert_eq!(g.worst, min);
    }

    #[test]
    fn shift_magnitude_zero_matches_test_id_accuracy() {
        let cfg = micro_cfg();
        let data = generate(&cfg.task).unwrap();
        let (model, _, _) = train(&cfg, &data).unwrap();
        let (base, _) = split_base_novel(&cfg.task).unwrap();
        let shift_base = data.test_shift.filter_classes(&base, &cfg.task);
        let accs = eval_shift(&model, &cfg.task, &shift_base, &[(ShiftKind::NoiseUp, 0.0)]).unwrap();
        let mut classes = shift_base.labels.clone();
        classes.sort_unstable();
        classes.dedup();
        let direct = model.predict(&shift_base, &classes).unwrap();
        let direct_acc = 100.0 * direct.iter().zip(&shift_base.labels).filter(|(p, l)| p == l).count() as f64
            / shift_base.len() as f64;
        assert_eq!(accs[0].accuracy, direct_acc);
    }

    #[test]
    fn gridsearch_counts_and_skips() {
        let mut cfg = micro_cfg();
        cfg.task.samples_per_class = 8;
        cfg.task.test_samples_per_class = 8;
        let rows = gridsearch(&cfg, &[1.0], &[0.0], &[1], &[1, 2, 5]).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows.iter().filter(|r| r.status.starts_with("skipped")).count(), 1);
        let csv1 = grid_csv(&rows);
        let rows2 = gridsearch(&cfg, &[1.0], &[0.0], &[1], &[1, 2, 5]).unwrap();
        assert_eq!(csv1, grid_csv(&rows2));
    }

    #[test]
    fn export_embeddings_row_count_and_bitwise_reparse() {
        let cfg = micro_cfg();
        let data = generate(&cfg.task).unwrap();
        let (model, _, _) = train(&cfg, &data).unwrap();
        let (base, _) = split_base_novel(&cfg.task).unwrap();
        let batch = data.test_id.filter_classes(&base, &cfg.task);
        let small = batch.select(&[0, 1, 2], &cfg.task);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        export_embeddings(&model, &small, &base, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 2 * small.len() + 2 * base.len());

        let export = model.embeddings(&small, &base).unwrap();
        // first data row is sample 0, vision invariant
        let fields: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(fields[3], "v");
        assert_eq!(fields[4], "u");
        let d = model.enc_cfg.d_vl;
        for j in 0..d {
            let reparsed: f64 = fields[5 + j].parse().unwrap();
            assert_eq!(reparsed.to_bits(), export.vision_invariant[j].to_bits());
            let norm_ok = {
                let row = &export.vision_invariant[..d];
                (row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6
            };
            assert!(norm_ok);
        }
    }

    #[test]
    fn diverged_training_reports_step_index() {
        let mut cfg = micro_cfg();
        cfg.lr = 1e9; // drive the weights to overflow
        let data = generate(&cfg.task).unwrap();
        match train(&cfg, &data) {
            Err(Error::Diverged { .. }) | Err(Error::Domain(_)) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
