//! Activation-magnitude importance, dimension selection and structural surgery.
//!
//! Selection always works per prunable layer and, for TSRA layers, separately
//! within the `U` and `V` subspaces. Every subspace keeps at least one dimension.

use std::ops::Range;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::cob::{apply_cob, subspace_ranges, ActivationCapture};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Layer, Model, SubspaceSplit};
use crate::tensor::Tensor;
use crate::train::{evaluate, finetune, TrainConfig};

/// `score[j] = sqrt(sum_s X[j, s]^2)`, accumulated in `f64`.
pub fn importance_scores(capture: &ActivationCapture) -> Vec<f64> {
    (0..capture.dim)
        .map(|j| {
            capture
                .row(j)
                .iter()
                .map(|&v| v as f64 * v as f64)
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerImportance {
    /// Dense/conv layer index.
    pub layer: usize,
    pub scores: Vec<f64>,
    pub split: Option<SubspaceSplit>,
    pub samples: usize,
}

impl LayerImportance {
    pub fn subspaces(&self) -> Vec<Range<usize>> {
        subspace_ranges(self.scores.len(), self.split)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImportanceReport {
    pub layers: Vec<LayerImportance>,
}

impl ImportanceReport {
    pub fn from_captures(captures: &[ActivationCapture]) -> Self {
        Self {
            layers: captures
                .iter()
                .map(|c| LayerImportance {
                    layer: c.layer,
                    scores: importance_scores(c),
                    split: c.split,
                    samples: c.samples,
                })
                .collect(),
        }
    }

    /// Captures `inputs` through `m` and scores every prunable layer.
    pub fn measure(m: &Model, inputs: &Tensor) -> Result<Self> {
        Ok(Self::from_captures(&m.capture(inputs, 64)?))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerMask {
    pub layer: usize,
    pub keep: Vec<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeepMask {
    pub layers: Vec<LayerMask>,
}

impl KeepMask {
    pub fn kept(&self) -> usize {
        self.layers.iter().map(|l| l.keep.iter().filter(|&&k| k).count()).sum()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(|l| l.keep.len()).sum()
    }

    /// Fraction of prunable dimensions removed.
    pub fn pruned_fraction(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            (total - self.kept()) as f64 / total as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdKind {
    /// Prune where `(s - mean) / std < T` (population std).
    Zscore,
    /// Prune where `s < T * mean`.
    PropAvg,
    /// Prune where `s < T * median` (midpoint median for even counts).
    PropMedian,
    /// Prune where `s < T * max`.
    PropMax,
}

impl ThresholdKind {
    pub const ALL: [ThresholdKind; 4] = [
        ThresholdKind::Zscore,
        ThresholdKind::PropAvg,
        ThresholdKind::PropMedian,
        ThresholdKind::PropMax,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ThresholdKind::Zscore => "zscore",
            ThresholdKind::PropAvg => "prop_avg",
            ThresholdKind::PropMedian => "prop_median",
            ThresholdKind::PropMax => "prop_max",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown threshold rule {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdRule {
    pub kind: ThresholdKind,
    pub t: f64,
}

impl ThresholdRule {
    pub fn new(kind: ThresholdKind, t: f64) -> Result<Self> {
        if !t.is_finite() {
            return Err(Error::contract(format!("threshold T must be finite, got {t}")));
        }
        Ok(Self { kind, t })
    }
}

/// Number of dimensions kept out of `n` at prune ratio `p`: `ceil((1 - p) n)`,
/// with a `1e-9` allowance so that e.g. `(1 - 0.7) * 10` keeps 3, and never below 1.
pub fn fixed_ratio_keep_count(n: usize, p: f64) -> usize {
    let k = ((1.0 - p) * n as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(n)
}

/// Indices ordered by descending score, ties toward the lower index.
fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn build_mask(report: &ImportanceReport, mut per_subspace: impl FnMut(&[f64]) -> Vec<bool>) -> KeepMask {
    KeepMask {
        layers: report
            .layers
            .iter()
            .map(|l| {
                let mut keep = vec![false; l.scores.len()];
                for r in l.subspaces() {
                    let sub = per_subspace(&l.scores[r.clone()]);
                    keep[r].copy_from_slice(&sub);
                }
                LayerMask { layer: l.layer, keep }
            })
            .collect(),
    }
}

/// Keeps the `ceil((1 - p) size)` highest-scoring dims of every subspace.
pub fn select_fixed_ratio(report: &ImportanceReport, p: f64) -> Result<KeepMask> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::contract(format!("prune ratio must be in [0, 1), got {p}")));
    }
    Ok(build_mask(report, |scores| {
        let k = fixed_ratio_keep_count(scores.len(), p);
        let mut keep = vec![false; scores.len()];
        for &i in &rank_desc(scores)[..k] {
            keep[i] = true;
        }
        keep
    }))
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub(crate) fn median(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Keep flags for one subspace under a threshold rule, including the floor guard.
pub fn threshold_keep(scores: &[f64], rule: &ThresholdRule) -> Vec<bool> {
    let t = rule.t;
    let mut keep: Vec<bool> = match rule.kind {
        ThresholdKind::Zscore => {
            let mu = mean(scores);
            let std = (scores.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / scores.len() as f64).sqrt();
            if std == 0.0 {
                warn!("zscore rule on a constant subspace of {} dims; nothing pruned", scores.len());
                return vec![true; scores.len()];
            }
            scores.iter().map(|s| !((s - mu) / std < t)).collect()
        }
        ThresholdKind::PropAvg => {
            let cut = t * mean(scores);
            scores.iter().map(|&s| !(s < cut)).collect()
        }
        ThresholdKind::PropMedian => {
            let cut = t * median(scores);
            scores.iter().map(|&s| !(s < cut)).collect()
        }
        ThresholdKind::PropMax => {
            let cut = t * scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            scores.iter().map(|&s| !(s < cut)).collect()
        }
    };
    if !keep.iter().any(|&k| k) {
        keep[rank_desc(scores)[0]] = true;
    }
    keep
}

pub fn select_threshold(report: &ImportanceReport, rule: &ThresholdRule) -> KeepMask {
    build_mask(report, |scores| threshold_keep(scores, rule))
}

/// Parameter counts around a surgery.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SurgeryStats {
    pub params_before: usize,
    pub params_after: usize,
}

fn kept_indices(keep: &[bool]) -> Vec<usize> {
    keep.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect()
}

/// Keeps the listed output rows (channels) of a linear layer.
fn select_outputs(layer: &mut Layer, rows: &[usize]) {
    let (w, b) = layer.params_mut().expect("linear layer");
    let mut shape = w.shape().to_vec();
    let row_len = w.len() / shape[0];
    let mut data = Vec::with_capacity(rows.len() * row_len);
    for &r in rows {
        data.extend_from_slice(&w.data()[r * row_len..(r + 1) * row_len]);
    }
    shape[0] = rows.len();
    *w = Tensor::new(shape, data).expect("row selection");
    let bias = rows.iter().map(|&r| b.data()[r]).collect();
    *b = Tensor::new(vec![rows.len()], bias).expect("bias selection");
}

/// Keeps the listed input channels (columns) of a linear layer.
fn select_inputs(layer: &mut Layer, cols: &[usize]) {
    let (w, _) = layer.params_mut().expect("linear layer");
    let mut shape = w.shape().to_vec();
    let (out, d) = (shape[0], shape[1]);
    let taps: usize = shape[2..].iter().product();
    let mut data = Vec::with_capacity(out * cols.len() * taps);
    for o in 0..out {
        for &c in cols {
            data.extend_from_slice(&w.data()[(o * d + c) * taps..(o * d + c + 1) * taps]);
        }
    }
    shape[1] = cols.len();
    *w = Tensor::new(shape, data).expect("column selection");
}

/// Removes every unkept dimension: its row (output channel) and bias entry in the
/// producing layer and its column (input channel) in the consuming layer. TSRA
/// splits shrink accordingly.
pub fn surgery(m: &Model, mask: &KeepMask) -> Result<(Model, SurgeryStats)> {
    let prunable = m.prunable_layers();
    let mut out = m.clone();
    for lm in &mask.layers {
        let Some(p) = prunable.iter().find(|p| p.linear == lm.layer) else {
            return Err(Error::contract(format!("mask names layer {} which is not prunable", lm.layer)));
        };
        if lm.keep.len() != p.width {
            return Err(Error::contract(format!(
                "mask for layer {} has {} flags, layer width is {}",
                lm.layer,
                lm.keep.len(),
                p.width
            )));
        }
        for r in subspace_ranges(p.width, p.split) {
            if !lm.keep[r.clone()].iter().any(|&k| k) {
                return Err(Error::contract(format!(
                    "mask empties subspace {r:?} of layer {}",
                    lm.layer
                )));
            }
        }
        if lm.keep.iter().all(|&k| k) {
            continue;
        }
        let kept = kept_indices(&lm.keep);
        let layers = out.layers_mut();
        select_outputs(&mut layers[p.linear], &kept);
        select_inputs(&mut layers[p.successor], &kept);
        if let Layer::Tsra { split, .. } = &mut layers[p.activation] {
            let k_u = lm.keep[..split.split()].iter().filter(|&&k| k).count();
            *split = SubspaceSplit::new(kept.len(), k_u)?;
        }
    }
    let out = Model::new(out.input_shape().to_vec(), out.layers().to_vec())?;
    let stats = SurgeryStats {
        params_before: m.param_count(),
        params_after: out.param_count(),
    };
    Ok((out, stats))
}

/// Which dimensions to prune in a sweep.
#[derive(Clone, Debug, PartialEq)]
pub enum Schedule {
    FixedRatio(Vec<f64>),
    Threshold { kind: ThresholdKind, values: Vec<f64> },
}

/// One point of a sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Setting {
    Ratio(f64),
    Rule(ThresholdRule),
}

impl Schedule {
    pub fn settings(&self) -> Result<Vec<Setting>> {
        match self {
            Schedule::FixedRatio(ps) => ps
                .iter()
                .map(|&p| {
                    if (0.0..1.0).contains(&p) {
                        Ok(Setting::Ratio(p))
                    } else {
                        Err(Error::config(format!("prune ratio must be in [0, 1), got {p}")))
                    }
                })
                .collect(),
            Schedule::Threshold { kind, values } => values
                .iter()
                .map(|&t| Ok(Setting::Rule(ThresholdRule::new(*kind, t)?)))
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub schedule: Schedule,
    /// Rotate with un-centered PCA before scoring.
    pub cob: bool,
    /// Number of training samples used for captures.
    pub n_capture: usize,
    pub capture_seed: u64,
    /// Fine-tune after pruning with this config (`finetune_epochs` > 0).
    pub finetune: Option<TrainConfig>,
    /// Label for the CSV `variant` column.
    pub variant: String,
}

/// One sweep setting, in the column layout of the fixed-ratio/threshold tables.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineRow {
    pub variant: String,
    pub setting: Setting,
    pub dim_prune_frac: f64,
    pub param_prune_frac: f64,
    pub params_before: usize,
    pub params_after: usize,
    pub dense_acc: f64,
    pub acc_pre_ft: f64,
    pub acc_post_ft: Option<f64>,
}

/// The shared state of a sweep: the (optionally rotated) model and its importance scores.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub base: Model,
    pub report: ImportanceReport,
    pub dense_acc: f64,
}

/// Evaluates the dense model, applies the optional change of basis, and scores
/// every prunable layer on `n_capture` training samples.
pub fn prepare(m: &Model, train: &Dataset, test: &Dataset, cfg: &PipelineConfig) -> Result<Prepared> {
    let dense_acc = evaluate(m, test)?;
    let capture_batch = crate::cob::select_samples(&train.images, cfg.n_capture, cfg.capture_seed)?;
    let base = if cfg.cob {
        apply_cob(m, &capture_batch, cfg.n_capture, cfg.capture_seed)?.0
    } else {
        m.clone()
    };
    let report = ImportanceReport::measure(&base, &capture_batch)?;
    Ok(Prepared {
        base,
        report,
        dense_acc,
    })
}

/// Selection, surgery, evaluation and optional fine-tuning for one setting.
pub fn run_setting(
    prep: &Prepared,
    setting: Setting,
    train: &Dataset,
    test: &Dataset,
    cfg: &PipelineConfig,
) -> Result<(PipelineRow, Model)> {
    let mask = match setting {
        Setting::Ratio(p) => select_fixed_ratio(&prep.report, p)?,
        Setting::Rule(r) => select_threshold(&prep.report, &r),
    };
    let (pruned, stats) = surgery(&prep.base, &mask)?;
    let acc_pre_ft = evaluate(&pruned, test)?;
    let (pruned, acc_post_ft) = match &cfg.finetune {
        Some(tc) if tc.finetune_epochs > 0 => {
            let (tuned, _) = finetune(&pruned, train, tc)?;
            let acc = evaluate(&tuned, test)?;
            (tuned, Some(acc))
        }
        _ => (pruned, None),
    };
    let row = PipelineRow {
        variant: cfg.variant.clone(),
        setting,
        dim_prune_frac: mask.pruned_fraction(),
        param_prune_frac: 1.0 - stats.params_after as f64 / stats.params_before as f64,
        params_before: stats.params_before,
        params_after: stats.params_after,
        dense_acc: prep.dense_acc,
        acc_pre_ft,
        acc_post_ft,
    };
    Ok((row, pruned))
}

pub struct PipelineOutput {
    pub rows: Vec<PipelineRow>,
    pub models: Vec<Model>,
}

/// Prunes `m` once per schedule setting: optional change of basis, importance
/// from `n_capture` training samples, selection, surgery, evaluation on `test`,
/// and optional fine-tuning on `train`.
pub fn prune_pipeline(m: &Model, train: &Dataset, test: &Dataset, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let settings = cfg.schedule.settings()?;
    let prep = prepare(m, train, test, cfg)?;
    let mut rows = Vec::with_capacity(settings.len());
    let mut models = Vec::with_capacity(settings.len());
    for s in settings {
        let (row, model) = run_setting(&prep, s, train, test, cfg)?;
        rows.push(row);
        models.push(model);
    }
    Ok(PipelineOutput { rows, models })
}
