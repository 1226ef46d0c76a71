//! A small two-stage detector: three-layer conv backbone, an anchor-based
//! region proposal network, nearest-neighbour RoI pooling and a two-layer
//! fully connected classification/regression head.
//!
//! Class index 0 of the head is background; foreground classes are
//! `1..=num_classes`.

mod checkpoint;
mod loss;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxgeom::{decode_corners, nms_indices, nms_per_class, BBox, Detection};
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub use checkpoint::{load_checkpoint, param_hash, save_checkpoint, CheckpointError};
pub use loss::{
    frcnn_loss, frcnn_loss_with_plan, plan_targets, AnchorSample, FrcnnLoss, LossPlan, RoiSample, Targets,
};

/// Total spatial stride of the backbone (two 2×2 max-pools).
pub const FEATURE_STRIDE: usize = 4;

/// Regression targets are multiplied by these weights before the loss so
/// that typical deltas reach the linear part of smooth-L1.
pub const REG_WEIGHTS: [f64; 4] = [10.0, 10.0, 5.0, 5.0];

/// Boxes narrower or shorter than this after clipping are dropped.
pub const MIN_BOX_SIZE: f64 = 1.0;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("expected image of shape [3, {size}, {size}], got {got:?}")]
    ImageShape { size: usize, got: Vec<usize> },
}

pub type Result<T, E = DetectorError> = std::result::Result<T, E>;

/// Architecture and training-target hyperparameters, scaled down from the
/// usual Faster R-CNN defaults for 64×64 images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub image_size: usize,
    pub channels: [usize; 3],
    pub rpn_channels: usize,
    pub fc_width: usize,
    pub pool_size: usize,
    pub anchor_sizes: Vec<f64>,
    pub pre_nms_top_n: usize,
    pub rpn_nms_thresh: f64,
    /// Proposals kept after RPN NMS (K).
    pub num_proposals: usize,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f64,
    pub roi_pos_iou: f64,
    pub roi_batch: usize,
    pub roi_pos_fraction: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: [8, 16, 16],
            rpn_channels: 16,
            fc_width: 64,
            pool_size: 4,
            anchor_sizes: vec![8.0, 16.0, 32.0],
            pre_nms_top_n: 200,
            rpn_nms_thresh: 0.7,
            num_proposals: 32,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_batch: 64,
            rpn_pos_fraction: 0.5,
            roi_pos_iou: 0.5,
            roi_batch: 16,
            roi_pos_fraction: 0.25,
        }
    }
}

impl DetectorConfig {
    /// A two-channel model on 32×32 images, small enough for exhaustive
    /// finite-difference checks.
    pub fn micro() -> Self {
        Self {
            image_size: 32,
            channels: [2, 2, 2],
            rpn_channels: 2,
            fc_width: 4,
            pool_size: 2,
            anchor_sizes: vec![8.0, 16.0],
            pre_nms_top_n: 50,
            num_proposals: 8,
            rpn_batch: 16,
            roi_batch: 6,
            ..Self::default()
        }
    }

    pub fn feature_size(&self) -> usize {
        self.image_size / FEATURE_STRIDE
    }

    pub fn num_anchors(&self) -> usize {
        self.anchor_sizes.len()
    }

    /// Square anchors centred on every feature cell. Anchor `k` corresponds to
    /// flat index `k` of the `[A, H, W]` objectness map, i.e. `k = a·H·W + i·W + j`.
    pub fn anchors(&self) -> Vec<BBox> {
        let fs = self.feature_size();
        let stride = FEATURE_STRIDE as f64;
        let mut out = Vec::with_capacity(self.num_anchors() * fs * fs);
        for &side in &self.anchor_sizes {
            for i in 0..fs {
                for j in 0..fs {
                    let cx = (j as f64 + 0.5) * stride;
                    let cy = (i as f64 + 0.5) * stride;
                    out.push(BBox::from_center(cx, cy, side, side).expect("positive anchor size"));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: T,
    pub bias: T,
}

/// All parameters of a detector, generic over storage so the same layout
/// holds tensors, graph handles, gradients or optimizer state.
///
/// Dense weights are stored `[in, out]`. `bbox_pred` columns are grouped per
/// foreground class: column `(c - 1) * 4 + k` is delta `k` of class `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layers<T> {
    pub conv1: Conv<T>,
    pub conv2: Conv<T>,
    pub conv3: Conv<T>,
    pub rpn_conv: Conv<T>,
    pub rpn_obj: Conv<T>,
    pub rpn_delta: Conv<T>,
    pub fc1: Dense<T>,
    pub fc2: Dense<T>,
    pub cls_score: Dense<T>,
    pub bbox_pred: Dense<T>,
}

pub const LAYER_NAMES: [&str; 20] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
    "rpn_conv.weight",
    "rpn_conv.bias",
    "rpn_obj.weight",
    "rpn_obj.bias",
    "rpn_delta.weight",
    "rpn_delta.bias",
    "fc1.weight",
    "fc1.bias",
    "fc2.weight",
    "fc2.bias",
    "cls_score.weight",
    "cls_score.bias",
    "bbox_pred.weight",
    "bbox_pred.bias",
];

/// Number of leading entries of [`LAYER_NAMES`] that belong to the backbone.
pub const BACKBONE_PARAMS: usize = 6;

impl<T> Layers<T> {
    /// Parameters in [`LAYER_NAMES`] order.
    pub fn to_vec(&self) -> Vec<&T> {
        vec![
            &self.conv1.weight,
            &self.conv1.bias,
            &self.conv2.weight,
            &self.conv2.bias,
            &self.conv3.weight,
            &self.conv3.bias,
            &self.rpn_conv.weight,
            &self.rpn_conv.bias,
            &self.rpn_obj.weight,
            &self.rpn_obj.bias,
            &self.rpn_delta.weight,
            &self.rpn_delta.bias,
            &self.fc1.weight,
            &self.fc1.bias,
            &self.fc2.weight,
            &self.fc2.bias,
            &self.cls_score.weight,
            &self.cls_score.bias,
            &self.bbox_pred.weight,
            &self.bbox_pred.bias,
        ]
    }

    pub fn to_vec_mut(&mut self) -> Vec<&mut T> {
        vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.conv3.weight,
            &mut self.conv3.bias,
            &mut self.rpn_conv.weight,
            &mut self.rpn_conv.bias,
            &mut self.rpn_obj.weight,
            &mut self.rpn_obj.bias,
            &mut self.rpn_delta.weight,
            &mut self.rpn_delta.bias,
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
            &mut self.cls_score.weight,
            &mut self.cls_score.bias,
            &mut self.bbox_pred.weight,
            &mut self.bbox_pred.bias,
        ]
    }

    /// Rebuilds a layout from 20 values in [`LAYER_NAMES`] order.
    pub fn from_vec(values: Vec<T>) -> Option<Self> {
        if values.len() != LAYER_NAMES.len() {
            return None;
        }
        let mut it = values.into_iter();
        let mut conv = || Conv {
            weight: it.next().unwrap(),
            bias: it.next().unwrap(),
        };
        let (conv1, conv2, conv3, rpn_conv, rpn_obj, rpn_delta) = (conv(), conv(), conv(), conv(), conv(), conv());
        let mut dense = || Dense {
            weight: it.next().unwrap(),
            bias: it.next().unwrap(),
        };
        let (fc1, fc2, cls_score, bbox_pred) = (dense(), dense(), dense(), dense());
        Some(Self {
            conv1,
            conv2,
            conv3,
            rpn_conv,
            rpn_obj,
            rpn_delta,
            fc1,
            fc2,
            cls_score,
            bbox_pred,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Layers<U> {
        let values = LAYER_NAMES
            .iter()
            .zip(self.to_vec())
            .map(|(name, v)| f(name, v))
            .collect();
        Layers::from_vec(values).expect("20 parameters")
    }
}

/// A detector's configuration, class count and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub config: DetectorConfig,
    pub num_classes: usize,
    /// Seed the parameters were initialised from.
    pub seed: u64,
    pub params: Layers<Tensor>,
}

/// Expected parameter shapes, in [`LAYER_NAMES`] order.
pub fn param_shapes(cfg: &DetectorConfig, num_classes: usize) -> Vec<Vec<usize>> {
    let [c1, c2, c3] = cfg.channels;
    let (r, a, fc, p) = (cfg.rpn_channels, cfg.num_anchors(), cfg.fc_width, cfg.pool_size);
    vec![
        vec![c1, 3, 3, 3],
        vec![c1],
        vec![c2, c1, 3, 3],
        vec![c2],
        vec![c3, c2, 3, 3],
        vec![c3],
        vec![r, c3, 3, 3],
        vec![r],
        vec![a, r, 1, 1],
        vec![a],
        vec![4 * a, r, 1, 1],
        vec![4 * a],
        vec![c3 * p * p, fc],
        vec![fc],
        vec![fc, fc],
        vec![fc],
        vec![fc, num_classes + 1],
        vec![num_classes + 1],
        vec![fc, 4 * num_classes],
        vec![4 * num_classes],
    ]
}

impl DetectorModel {
    /// Random initialisation: He-normal for hidden layers, small normal for
    /// output heads, zero biases.
    pub fn new(config: DetectorConfig, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = param_shapes(&config, num_classes);
        let tensors = LAYER_NAMES
            .iter()
            .zip(shapes)
            .map(|(name, shape)| {
                if name.ends_with(".bias") {
                    return Tensor::zeros(shape);
                }
                let std = match *name {
                    "rpn_obj.weight" | "rpn_delta.weight" | "cls_score.weight" => 0.01,
                    "bbox_pred.weight" => 0.001,
                    _ => {
                        let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
                        (2.0 / fan_in as f64).sqrt()
                    }
                };
                Tensor::randn(shape, std, &mut rng)
            })
            .collect();
        Self {
            config,
            num_classes,
            seed,
            params: Layers::from_vec(tensors).expect("20 parameters"),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.to_vec().iter().map(|t| t.numel()).sum()
    }

    /// Adds every parameter to `g` as a leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound<'_> {
        Bound {
            model: self,
            vars: self.params.map(|_, t| g.leaf(t.clone(), trainable)),
        }
    }

    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = self.config.image_size;
        if image.shape() != [3, s, s] {
            return Err(DetectorError::ImageShape {
                size: s,
                got: image.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Backbone feature map `[c, S/4, S/4]` of one image.
    pub fn forward_features(&self, image: &Tensor) -> Result<Tensor> {
        self.check_image(image)?;
        let mut g = Graph::new();
        let net = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let f = net.features(&mut g, x)?;
        Ok(g.value(f).clone())
    }

    /// Classification logits and per-class deltas for already pooled RoIs.
    pub fn head_forward(&self, pooled: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let net = self.bind(&mut g, false);
        let p = g.constant(pooled.clone());
        let (logits, deltas) = net.head(&mut g, p)?;
        Ok((g.value(logits).clone(), g.value(deltas).clone()))
    }

    /// RPN proposals for one image.
    pub fn propose_image(&self, image: &Tensor) -> Result<Vec<Proposal>> {
        self.check_image(image)?;
        let mut g = Graph::new();
        let net = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let f = net.features(&mut g, x)?;
        let (obj, deltas) = net.rpn(&mut g, f)?;
        Ok(propose(&self.config, g.value(obj), g.value(deltas)))
    }

    /// Full inference: proposals, RoI head, per-class decoding, score filter
    /// (`score > score_thresh`) and per-class NMS. Background is never emitted.
    pub fn detect(&self, image: &Tensor, score_thresh: f64, nms_thresh: f64) -> Result<Vec<Detection>> {
        self.check_image(image)?;
        let mut g = Graph::new();
        let net = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let f = net.features(&mut g, x)?;
        let (obj, deltas) = net.rpn(&mut g, f)?;
        let proposals = propose(&self.config, g.value(obj), g.value(deltas));
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let rois: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
        let pooled = net.roi_pool(&mut g, f, &rois)?;
        let (logits, reg) = net.head(&mut g, pooled)?;
        let probs = g.softmax(logits, 1, None)?;
        Ok(decode_detections(
            &self.config,
            self.num_classes,
            &rois,
            g.value(probs),
            g.value(reg),
            score_thresh,
            nms_thresh,
        ))
    }
}

/// Default inference thresholds (confidence 0.5, NMS IoU 0.3).
pub const DEFAULT_SCORE_THRESH: f64 = 0.5;
pub const DEFAULT_NMS_THRESH: f64 = 0.3;

fn decode_detections(
    cfg: &DetectorConfig,
    num_classes: usize,
    rois: &[BBox],
    probs: &Tensor,
    reg: &Tensor,
    score_thresh: f64,
    nms_thresh: f64,
) -> Vec<Detection> {
    let size = cfg.image_size as f64;
    let (p, d) = (probs.data(), reg.data());
    let width = num_classes + 1;
    let mut dets = Vec::new();
    for (i, roi) in rois.iter().enumerate() {
        for c in 1..=num_classes {
            let score = p[i * width + c];
            if score <= score_thresh {
                continue;
            }
            let base = i * 4 * num_classes + (c - 1) * 4;
            let deltas: [f64; 4] = std::array::from_fn(|k| d[base + k] / REG_WEIGHTS[k]);
            if let Some(bbox) = BBox::clip(decode_corners(roi, deltas), size, size, MIN_BOX_SIZE) {
                dets.push(Detection {
                    bbox,
                    class_id: c,
                    score,
                });
            }
        }
    }
    nms_per_class(&dets, nms_thresh)
}

/// A region proposal with its objectness probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
}

/// Decodes every anchor, clips to the image, keeps the `pre_nms_top_n`
/// highest-scoring boxes, applies NMS and returns at most `num_proposals`.
/// Equal scores are ordered by anchor index.
pub fn propose(cfg: &DetectorConfig, objectness: &Tensor, deltas: &Tensor) -> Vec<Proposal> {
    let anchors = cfg.anchors();
    let plane = cfg.feature_size() * cfg.feature_size();
    let size = cfg.image_size as f64;
    let (obj, del) = (objectness.data(), deltas.data());
    let mut cand: Vec<(usize, f64, BBox)> = Vec::with_capacity(anchors.len());
    for (k, anchor) in anchors.iter().enumerate() {
        let (a, cell) = (k / plane, k % plane);
        let d: [f64; 4] = std::array::from_fn(|j| del[(a * 4 + j) * plane + cell] / REG_WEIGHTS[j]);
        if let Some(bbox) = BBox::clip(decode_corners(anchor, d), size, size, MIN_BOX_SIZE) {
            cand.push((k, crate::tensor::sigmoid(obj[k]), bbox));
        }
    }
    cand.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    cand.truncate(cfg.pre_nms_top_n);
    let boxes: Vec<BBox> = cand.iter().map(|c| c.2).collect();
    let scores: Vec<f64> = cand.iter().map(|c| c.1).collect();
    nms_indices(&boxes, &scores, cfg.rpn_nms_thresh)
        .into_iter()
        .take(cfg.num_proposals)
        .map(|i| Proposal {
            bbox: boxes[i],
            objectness: scores[i],
        })
        .collect()
}

/// A model whose parameters have been added to a graph.
pub struct Bound<'m> {
    pub model: &'m DetectorModel,
    pub vars: Layers<Var>,
}

impl Bound<'_> {
    pub fn config(&self) -> &DetectorConfig {
        &self.model.config
    }

    fn conv(g: &mut Graph, x: Var, layer: &Conv<Var>, pad: usize) -> Result<Var> {
        Ok(g.conv2d(x, layer.weight, layer.bias, 1, pad)?)
    }

    fn dense(g: &mut Graph, x: Var, layer: &Dense<Var>) -> Result<Var> {
        let y = g.matmul(x, layer.weight)?;
        Ok(g.add_row_bias(y, layer.bias)?)
    }

    /// conv-relu-pool, conv-relu-pool, conv-relu.
    pub fn features(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let v = &self.vars;
        let s = self.config().image_size;
        if g.shape(image) != [3, s, s] {
            return Err(DetectorError::ImageShape {
                size: s,
                got: g.shape(image).to_vec(),
            });
        }
        let x = Self::conv(g, image, &v.conv1, 1)?;
        let x = g.relu(x);
        let x = g.max_pool2(x)?;
        let x = Self::conv(g, x, &v.conv2, 1)?;
        let x = g.relu(x);
        let x = g.max_pool2(x)?;
        let x = Self::conv(g, x, &v.conv3, 1)?;
        Ok(g.relu(x))
    }

    /// Objectness logits `[A, H, W]` and deltas `[4A, H, W]`.
    pub fn rpn(&self, g: &mut Graph, features: Var) -> Result<(Var, Var)> {
        let v = &self.vars;
        let h = Self::conv(g, features, &v.rpn_conv, 1)?;
        let h = g.relu(h);
        let obj = Self::conv(g, h, &v.rpn_obj, 0)?;
        let del = Self::conv(g, h, &v.rpn_delta, 0)?;
        Ok((obj, del))
    }

    pub fn roi_pool(&self, g: &mut Graph, features: Var, rois: &[BBox]) -> Result<Var> {
        let corners: Vec<[f64; 4]> = rois.iter().map(|b| b.corners()).collect();
        Ok(g.roi_pool(features, &corners, self.config().pool_size, FEATURE_STRIDE as f64)?)
    }

    /// Class logits `[n, C+1]` and class-specific deltas `[n, 4C]`.
    pub fn head(&self, g: &mut Graph, pooled: Var) -> Result<(Var, Var)> {
        let v = &self.vars;
        let s = g.shape(pooled).to_vec();
        let flat = g.reshape(pooled, vec![s[0], s[1..].iter().product()])?;
        let h = Self::dense(g, flat, &v.fc1)?;
        let h = g.relu(h);
        let h = Self::dense(g, h, &v.fc2)?;
        let h = g.relu(h);
        let logits = Self::dense(g, h, &v.cls_score)?;
        let deltas = Self::dense(g, h, &v.bbox_pred)?;
        Ok((logits, deltas))
    }
}

/// Standalone RoI pooling of a feature map, as used by the head.
pub fn roi_pool(features: &Tensor, rois: &[BBox], pool_size: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let corners: Vec<[f64; 4]> = rois.iter().map(|b| b.corners()).collect();
    let p = g.roi_pool(f, &corners, pool_size, FEATURE_STRIDE as f64)?;
    Ok(g.value(p).clone())
}
