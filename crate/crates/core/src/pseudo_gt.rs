//! Pseudo ground-truth from the frozen old model and its split into RPN and
//! R-CNN target sets.
//!
//! The old model runs once per image with `theta_low` as its confidence
//! floor and `theta_iou` as its NMS threshold. Detections overlapping a
//! new-class ground-truth box by more than `theta_iou` are dropped. The
//! survivors with `score > theta_low` join the RPN targets, those with
//! `score > theta_high` join the R-CNN targets, both together with the new
//! ground truth.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxgeom::{iou, BBox, Detection};
use crate::detector::{DetectorError, DetectorModel, Targets};
use crate::synthdata::{write_manifest, Annotation, ManifestEntry, SynthError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum PseudoGtError {
    #[error("invalid thresholds: {0}")]
    Thresholds(String),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Dump(#[from] SynthError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub theta_low: f64,
    pub theta_high: f64,
    pub theta_iou: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            theta_low: 0.1,
            theta_high: 0.9,
            theta_iou: 0.3,
        }
    }
}

impl Thresholds {
    /// The single-threshold baseline: both confidence thresholds equal `t`.
    pub fn single(t: f64) -> Self {
        Self {
            theta_low: t,
            theta_high: t,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PseudoGtError> {
        let Self {
            theta_low: lo,
            theta_high: hi,
            theta_iou: t,
        } = *self;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(PseudoGtError::Thresholds(format!(
                "need 0 < theta_low <= theta_high < 1, got {lo} and {hi}"
            )));
        }
        if !(t > 0.0 && t < 1.0) {
            return Err(PseudoGtError::Thresholds(format!("theta_iou must lie in (0, 1), got {t}")));
        }
        Ok(())
    }
}

/// Keeps detections whose IoU with every new-class box is at most `theta_iou`.
pub fn filter_pseudo(dets: &[Detection], new_gt: &[(BBox, usize)], theta_iou: f64) -> Vec<Detection> {
    dets.iter()
        .filter(|d| new_gt.iter().all(|(b, _)| iou(&d.bbox, b) <= theta_iou))
        .copied()
        .collect()
}

/// Old-model detections on `image` that do not conflict with `new_gt`.
pub fn generate_pseudo_gt(
    om: &DetectorModel,
    image: &Tensor,
    new_gt: &[(BBox, usize)],
    th: &Thresholds,
) -> Result<Vec<Detection>, PseudoGtError> {
    th.validate()?;
    let dets = om.detect(image, th.theta_low, th.theta_iou)?;
    Ok(filter_pseudo(&dets, new_gt, th.theta_iou))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoGtSet {
    pub boxes_p: Vec<Detection>,
    /// Class-agnostic: pseudo boxes above `theta_low`, then the new ground truth.
    pub rpn_targets: Vec<BBox>,
    /// Pseudo boxes above `theta_high` with their old-class labels, then the
    /// new ground truth.
    pub rcnn_targets: Vec<(BBox, usize)>,
}

impl PseudoGtSet {
    pub fn to_targets(&self) -> Targets {
        Targets {
            rpn: self.rpn_targets.clone(),
            rcnn: self.rcnn_targets.clone(),
        }
    }
}

pub fn build_training_targets(
    boxes_p: &[Detection],
    new_gt: &[(BBox, usize)],
    th: &Thresholds,
) -> Result<PseudoGtSet, PseudoGtError> {
    th.validate()?;
    let rpn_targets = boxes_p
        .iter()
        .filter(|d| d.score > th.theta_low)
        .map(|d| d.bbox)
        .chain(new_gt.iter().map(|(b, _)| *b))
        .collect();
    let rcnn_targets = boxes_p
        .iter()
        .filter(|d| d.score > th.theta_high)
        .map(|d| (d.bbox, d.class_id))
        .chain(new_gt.iter().copied())
        .collect();
    Ok(PseudoGtSet {
        boxes_p: boxes_p.to_vec(),
        rpn_targets,
        rcnn_targets,
    })
}

/// Writes pseudo boxes in the dataset manifest format, one entry per image.
/// `files[i]` names the image the `i`-th set belongs to.
pub fn dump_pseudo_gt(sets: &[Vec<Detection>], files: &[String], size: usize, dir: &Path) -> Result<(), PseudoGtError> {
    let entries: Vec<ManifestEntry> = sets
        .iter()
        .zip(files)
        .map(|(dets, file)| ManifestEntry {
            file: file.clone(),
            width: size,
            height: size,
            objects: dets
                .iter()
                .map(|d| Annotation {
                    bbox: d.bbox,
                    class_id: d.class_id,
                })
                .collect(),
        })
        .collect();
    std::fs::create_dir_all(dir).map_err(|source| SynthError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write_manifest(&entries, dir)?;
    Ok(())
}
