//! VOC-style average precision and the ablation harness.
//!
//! Matching is greedy in descending score order (ties keep input order): a
//! detection is a true positive iff some still-unmatched ground-truth box in
//! its image overlaps it with IoU ≥ the threshold, and it then claims the
//! best-overlapping such box. AP is the area under the precision envelope
//! (all-point interpolation) unless 11-point sampling is requested.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxgeom::{iou, BBox};
use crate::detector::{DetectorError, DetectorModel, DEFAULT_NMS_THRESH, DEFAULT_SCORE_THRESH};
use crate::pseudo_gt::Thresholds;
use crate::synthdata::Scene;
use crate::trainer::{train_incremental, LossSwitches, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("class {class} is outside the model's {num_classes} classes")]
    ClassRange { class: usize, num_classes: usize },
}

impl From<EvalError> for TrainError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Detector(d) => TrainError::Detector(d),
            other => TrainError::Config(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMethod {
    #[default]
    AllPoint,
    ElevenPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub iou_thresh: f64,
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub method: ApMethod,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            score_thresh: DEFAULT_SCORE_THRESH,
            nms_thresh: DEFAULT_NMS_THRESH,
            method: ApMethod::AllPoint,
        }
    }
}

/// One scored box of a single class, tagged with the image it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageDet {
    pub image: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    /// No ground truth: the AP is 0 by convention and carries no information.
    pub vacuous: bool,
}

/// True-positive flags of `dets` in ranked order, together with that order.
pub fn match_detections(dets: &[ImageDet], gts: &[Vec<BBox>], iou_thresh: f64) -> (Vec<usize>, Vec<bool>) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let tp = order
        .iter()
        .map(|&i| {
            let d = &dets[i];
            let Some(boxes) = gts.get(d.image) else {
                return false;
            };
            let best = boxes
                .iter()
                .enumerate()
                .filter(|(j, _)| !used[d.image][*j])
                .map(|(j, b)| (j, iou(&d.bbox, b)))
                .filter(|&(_, v)| v >= iou_thresh)
                .max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.cmp(&x.0)));
            match best {
                Some((j, _)) => {
                    used[d.image][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (order, tp)
}

/// AP from ranked true-positive flags and the ground-truth count.
pub fn ap_from_flags(tp: &[bool], num_gt: usize, method: ApMethod) -> f64 {
    if num_gt == 0 || tp.is_empty() {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    match method {
        ApMethod::AllPoint => {
            let mut env = precision.clone();
            for k in (0..env.len().saturating_sub(1)).rev() {
                env[k] = env[k].max(env[k + 1]);
            }
            let mut ap = 0.0;
            let mut prev_r = 0.0;
            for (r, p) in recall.iter().zip(&env) {
                ap += (r - prev_r) * p;
                prev_r = *r;
            }
            ap
        }
        ApMethod::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    recall
                        .iter()
                        .zip(&precision)
                        .filter(|(r, _)| **r >= t)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// AP of one class over a set of images; `gts[i]` are the boxes of image `i`.
pub fn voc_ap(dets: &[ImageDet], gts: &[Vec<BBox>], iou_thresh: f64, method: ApMethod) -> ApResult {
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    let (_, tp) = match_detections(dets, gts, iou_thresh);
    ApResult {
        ap: ap_from_flags(&tp, num_gt, method),
        vacuous: num_gt == 0,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub detections: usize,
    pub gt: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub per_class_ap: BTreeMap<usize, f64>,
    pub counts: BTreeMap<usize, ClassCounts>,
    /// Classes without ground truth, left out of every mean.
    pub vacuous: Vec<usize>,
    pub map_all: f64,
    pub map_old: f64,
    pub map_new: f64,
}

fn mean_over(report: &ApReport, classes: &[usize]) -> f64 {
    let aps: Vec<f64> = classes
        .iter()
        .filter(|c| !report.vacuous.contains(c))
        .filter_map(|c| report.per_class_ap.get(c).copied())
        .collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// Builds a report from per-image detections; `dets[i]` belongs to `scenes[i]`.
pub fn report_from_detections(
    dets: &[Vec<crate::boxgeom::Detection>],
    scenes: &[Scene],
    old: &[usize],
    new: &[usize],
    opts: &EvalOptions,
) -> ApReport {
    let mut report = ApReport::default();
    for &c in old.iter().chain(new) {
        let class_dets: Vec<ImageDet> = dets
            .iter()
            .enumerate()
            .flat_map(|(i, ds)| {
                ds.iter().filter(|d| d.class_id == c).map(move |d| ImageDet {
                    image: i,
                    score: d.score,
                    bbox: d.bbox,
                })
            })
            .collect();
        let gts: Vec<Vec<BBox>> = scenes
            .iter()
            .map(|s| s.annotations.iter().filter(|a| a.class_id == c).map(|a| a.bbox).collect())
            .collect();
        let r = voc_ap(&class_dets, &gts, opts.iou_thresh, opts.method);
        report.per_class_ap.insert(c, r.ap);
        report.counts.insert(
            c,
            ClassCounts {
                detections: class_dets.len(),
                gt: gts.iter().map(Vec::len).sum(),
            },
        );
        if r.vacuous {
            report.vacuous.push(c);
        }
    }
    let all: Vec<usize> = old.iter().chain(new).copied().collect();
    report.map_all = mean_over(&report, &all);
    report.map_old = mean_over(&report, old);
    report.map_new = mean_over(&report, new);
    report
}

pub fn evaluate_model(
    model: &DetectorModel,
    scenes: &[Scene],
    old: &[usize],
    new: &[usize],
    opts: &EvalOptions,
) -> Result<ApReport, EvalError> {
    if let Some(&class) = old.iter().chain(new).find(|&&c| c == 0 || c > model.num_classes) {
        return Err(EvalError::ClassRange {
            class,
            num_classes: model.num_classes,
        });
    }
    let dets = scenes
        .iter()
        .map(|s| model.detect(&s.image, opts.score_thresh, opts.nms_thresh))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(report_from_detections(&dets, scenes, old, new, opts))
}

/// One row of an ablation: either the old model evaluated as is, or an
/// incremental run with the given switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    /// `None` evaluates the old model without training.
    pub switches: Option<LossSwitches>,
}

impl Variant {
    pub fn old_model() -> Self {
        Self {
            name: "old-model".into(),
            switches: None,
        }
    }

    pub fn train(name: &str, switches: LossSwitches) -> Self {
        Self {
            name: name.into(),
            switches: Some(switches),
        }
    }
}

/// Old model, finetuning, the single-threshold pseudo-GT baseline, each
/// component alone on top of that baseline, then the cumulative combinations.
pub fn ablation_variants() -> Vec<Variant> {
    let base = LossSwitches {
        pseudo_gt: true,
        ..LossSwitches::NONE
    };
    vec![
        Variant::old_model(),
        Variant::train("finetune", LossSwitches::NONE),
        Variant::train("pseudo-gt", base),
        Variant::train("+d_fea", LossSwitches { d_fea: true, ..base }),
        Variant::train("+d_res", LossSwitches { d_res: true, ..base }),
        Variant::train("+d_cls", LossSwitches { d_cls: true, ..base }),
        Variant::train("+2th", LossSwitches { two_threshold: true, ..base }),
        Variant::train("d_fea+d_res", LossSwitches { d_fea: true, d_res: true, ..base }),
        Variant::train("d_fea+d_res+d_cls", LossSwitches { two_threshold: false, ..LossSwitches::ALL }),
        Variant::train("full", LossSwitches::ALL),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Shared settings; each variant overrides `switches` and `seed`.
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub variant: String,
    /// `None` marks the mean over seeds.
    pub seed: Option<u64>,
    pub map_old: f64,
    pub map_new: f64,
    pub map_all: f64,
    pub secs: f64,
    /// Error message of an aborted run; its mAP fields are NaN.
    pub failed: Option<String>,
}

pub const TABLE_HEADER: &str = "variant,seed,map_old,map_new,map_all,secs";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTable {
    pub rows: Vec<Row>,
    pub reports: Vec<(String, Option<u64>, ApReport)>,
}

impl ExperimentTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{TABLE_HEADER}\n");
        for r in &self.rows {
            let seed = r.seed.map_or_else(|| "mean".to_string(), |s| s.to_string());
            if r.failed.is_some() {
                let _ = writeln!(out, "{},{seed},failed,failed,failed,{:.3}", r.variant, r.secs);
            } else {
                let _ = writeln!(
                    out,
                    "{},{seed},{:.6},{:.6},{:.6},{:.3}",
                    r.variant, r.map_old, r.map_new, r.map_all, r.secs
                );
            }
        }
        out
    }

    pub fn mean_row(&self, variant: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.variant == variant && r.seed.is_none())
    }
}

/// Runs every variant for every seed from the same old model, evaluating
/// on `test` with old classes `1..=om.num_classes` and the given new classes.
/// A failing run is recorded and the harness moves on. Rows come variant by
/// variant, seeds in order, followed by the variant's mean row.
pub fn run_experiment(
    protocol: &Protocol,
    om: &DetectorModel,
    train: &[Scene],
    test: &[Scene],
    new: &[usize],
    mut progress: impl FnMut(&Row),
) -> ExperimentTable {
    let old: Vec<usize> = (1..=om.num_classes).collect();
    let mut table = ExperimentTable::default();
    for v in &protocol.variants {
        let mut done = Vec::new();
        for &seed in &protocol.seeds {
            let start = Instant::now();
            let result = match v.switches {
                None => evaluate_model(om, test, &old, &[], &protocol.eval).map_err(TrainError::from),
                Some(switches) => {
                    let cfg = TrainConfig {
                        switches,
                        seed,
                        ..protocol.train.clone()
                    };
                    train_incremental(om.clone(), train, &cfg, None).and_then(|(triple, _)| {
                        evaluate_model(&triple.im, test, &old, new, &protocol.eval).map_err(TrainError::from)
                    })
                }
            };
            let secs = start.elapsed().as_secs_f64();
            let row = match result {
                Ok(rep) => {
                    let row = Row {
                        variant: v.name.clone(),
                        seed: Some(seed),
                        map_old: rep.map_old,
                        map_new: rep.map_new,
                        map_all: rep.map_all,
                        secs,
                        failed: None,
                    };
                    table.reports.push((v.name.clone(), Some(seed), rep));
                    done.push(row.clone());
                    row
                }
                Err(e) => Row {
                    variant: v.name.clone(),
                    seed: Some(seed),
                    map_old: f64::NAN,
                    map_new: f64::NAN,
                    map_all: f64::NAN,
                    secs,
                    failed: Some(e.to_string()),
                },
            };
            progress(&row);
            table.rows.push(row);
        }
        let n = done.len() as f64;
        let mean = |f: fn(&Row) -> f64| done.iter().map(f).sum::<f64>() / n;
        let row = if done.is_empty() {
            Row {
                variant: v.name.clone(),
                seed: None,
                map_old: f64::NAN,
                map_new: f64::NAN,
                map_all: f64::NAN,
                secs: 0.0,
                failed: Some("every seed failed".into()),
            }
        } else {
            Row {
                variant: v.name.clone(),
                seed: None,
                map_old: mean(|r| r.map_old),
                map_new: mean(|r| r.map_new),
                map_all: mean(|r| r.map_all),
                secs: mean(|r| r.secs),
                failed: None,
            }
        };
        progress(&row);
        table.rows.push(row);
    }
    table
}

/// Threshold pairs swept by the 2-threshold study, `(theta_low, theta_high)`.
pub fn threshold_sweep() -> Vec<Thresholds> {
    [(0.5, 0.5), (0.3, 0.7), (0.1, 0.9), (0.1, 0.7), (0.3, 0.9)]
        .iter()
        .map(|&(lo, hi)| Thresholds {
            theta_low: lo,
            theta_high: hi,
            ..Thresholds::default()
        })
        .collect()
}
