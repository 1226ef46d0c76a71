//! Training targets and losses for the RPN and the R-CNN head.
//!
//! Target assignment and sampling depend only on forward values, so they
//! are computed once into a [`LossPlan`]; the differentiable loss is then
//! built from the plan. Holding the plan fixed makes the loss a smooth
//! function of the parameters, which is what the gradient checks rely on.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{propose, Bound, DetectorConfig, Result, REG_WEIGHTS};
use crate::boxgeom::{encode_deltas, iou, BBox};
use crate::tensor::{Graph, Tensor, Var};

/// Boxes the RPN should find (class-agnostic) and labelled boxes for the head.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Targets {
    pub rpn: Vec<BBox>,
    pub rcnn: Vec<(BBox, usize)>,
}

impl Targets {
    /// Plain ground truth used for both stages.
    pub fn from_gt(gt: &[(BBox, usize)]) -> Self {
        Self {
            rpn: gt.iter().map(|(b, _)| *b).collect(),
            rcnn: gt.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSample {
    pub anchor: usize,
    /// Encoded regression target for positives, `None` for negatives.
    pub target: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiSample {
    pub roi: BBox,
    /// 0 for background.
    pub label: usize,
    pub target: Option<[f64; 4]>,
}

/// Sampled anchors and RoIs for one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossPlan {
    pub anchors: Vec<AnchorSample>,
    pub rois: Vec<RoiSample>,
}

impl LossPlan {
    pub fn roi_boxes(&self) -> Vec<BBox> {
        self.rois.iter().map(|r| r.roi).collect()
    }
}

/// Loss terms of one image, each already normalised by its sample count.
#[derive(Debug, Clone)]
pub struct FrcnnLoss {
    pub total: Var,
    pub rpn_cls: Var,
    pub rpn_reg: Var,
    pub rcnn_cls: Var,
    pub rcnn_reg: Var,
    pub features: Var,
    /// Pooled features and head outputs of the sampled RoIs, absent when
    /// nothing could be sampled.
    pub pooled: Option<Var>,
    pub logits: Option<Var>,
    pub plan: LossPlan,
}

/// Labels anchors against `targets.rpn` (positive: IoU ≥ `rpn_pos_iou` or best
/// anchor of some target; negative: IoU ≤ `rpn_neg_iou`) and RoIs against
/// `targets.rcnn` (positive: IoU ≥ `roi_pos_iou`), then samples both.
///
/// RNG draw order: shuffle positive anchors, shuffle negative anchors,
/// shuffle positive RoIs, shuffle negative RoIs.
pub fn plan_targets<R: Rng + ?Sized>(
    cfg: &DetectorConfig,
    objectness: &Tensor,
    deltas: &Tensor,
    targets: &Targets,
    rng: &mut R,
) -> LossPlan {
    let anchors = cfg.anchors();
    let (mut pos, mut neg) = match_anchors(cfg, &anchors, &targets.rpn);
    pos.shuffle(rng);
    neg.shuffle(rng);
    let n_pos = pos.len().min((cfg.rpn_batch as f64 * cfg.rpn_pos_fraction) as usize);
    let n_neg = neg.len().min(cfg.rpn_batch - n_pos);
    let mut samples: Vec<AnchorSample> = pos[..n_pos]
        .iter()
        .map(|&(k, t)| AnchorSample {
            anchor: k,
            target: Some(encode_deltas(&anchors[k], &targets.rpn[t])),
        })
        .collect();
    samples.extend(neg[..n_neg].iter().map(|&k| AnchorSample { anchor: k, target: None }));

    let mut candidates: Vec<BBox> = propose(cfg, objectness, deltas).iter().map(|p| p.bbox).collect();
    candidates.extend(targets.rcnn.iter().map(|(b, _)| *b));
    let mut roi_pos = Vec::new();
    let mut roi_neg = Vec::new();
    for roi in candidates {
        let best = targets
            .rcnn
            .iter()
            .map(|(b, c)| (iou(&roi, b), b, *c))
            .max_by(|x, y| x.0.total_cmp(&y.0));
        match best {
            Some((v, b, c)) if v >= cfg.roi_pos_iou => roi_pos.push(RoiSample {
                roi,
                label: c,
                target: Some(encode_deltas(&roi, b)),
            }),
            _ => roi_neg.push(RoiSample {
                roi,
                label: 0,
                target: None,
            }),
        }
    }
    roi_pos.shuffle(rng);
    roi_neg.shuffle(rng);
    let n_pos = roi_pos.len().min((cfg.roi_batch as f64 * cfg.roi_pos_fraction) as usize);
    let n_neg = roi_neg.len().min(cfg.roi_batch - n_pos);
    roi_pos.truncate(n_pos);
    roi_neg.truncate(n_neg);
    roi_pos.extend(roi_neg);

    LossPlan {
        anchors: samples,
        rois: roi_pos,
    }
}

/// Positive anchors paired with their best target, and negative anchors.
/// The two sets are disjoint.
fn match_anchors(cfg: &DetectorConfig, anchors: &[BBox], targets: &[BBox]) -> (Vec<(usize, usize)>, Vec<usize>) {
    if targets.is_empty() {
        return (Vec::new(), (0..anchors.len()).collect());
    }
    let ious: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| targets.iter().map(|t| iou(a, t)).collect())
        .collect();
    let best_per_target: Vec<f64> = (0..targets.len())
        .map(|t| ious.iter().map(|row| row[t]).fold(0.0, f64::max))
        .collect();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (k, row) in ious.iter().enumerate() {
        let (best_t, best) = row
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (t, v)| if v > acc.1 { (t, v) } else { acc });
        let is_best_anchor = row
            .iter()
            .zip(&best_per_target)
            .any(|(&v, &m)| m > 0.0 && v == m);
        if best >= cfg.rpn_pos_iou || is_best_anchor {
            pos.push((k, best_t));
        } else if best <= cfg.rpn_neg_iou {
            neg.push(k);
        }
    }
    (pos, neg)
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

fn weighted(t: [f64; 4]) -> impl Iterator<Item = f64> {
    t.into_iter().zip(REG_WEIGHTS).map(|(v, w)| v * w)
}

/// Mean smooth-L1 per sample between gathered predictions and weighted targets.
fn reg_loss(g: &mut Graph, pred: Var, idx: &[usize], targets: &[f64], n: usize) -> Result<Var> {
    let p = g.gather(pred, idx)?;
    let t = g.constant(Tensor::from_vec(vec![targets.len()], targets.to_vec())?);
    let d = g.sub(p, t)?;
    let l = g.smooth_l1(d);
    let s = g.sum(l);
    Ok(g.scale(s, 1.0 / n as f64))
}

/// Builds the differentiable RPN + R-CNN loss for a fixed plan.
pub fn frcnn_loss_with_plan(
    g: &mut Graph,
    net: &Bound,
    features: Var,
    objectness: Var,
    deltas: Var,
    plan: LossPlan,
) -> Result<FrcnnLoss> {
    let cfg = net.config();
    let plane = cfg.feature_size() * cfg.feature_size();

    let rpn_cls = if plan.anchors.is_empty() {
        zero(g)
    } else {
        let idx: Vec<usize> = plan.anchors.iter().map(|s| s.anchor).collect();
        let labels: Vec<f64> = plan.anchors.iter().map(|s| f64::from(u8::from(s.target.is_some()))).collect();
        let logits = g.gather(objectness, &idx)?;
        let bce = g.bce_with_logits(logits, &labels)?;
        g.mean_all(bce)
    };

    let mut idx = Vec::new();
    let mut tgt = Vec::new();
    for s in &plan.anchors {
        if let Some(t) = s.target {
            let (a, cell) = (s.anchor / plane, s.anchor % plane);
            idx.extend((0..4).map(|j| (a * 4 + j) * plane + cell));
            tgt.extend(weighted(t));
        }
    }
    let rpn_reg = if idx.is_empty() {
        zero(g)
    } else {
        reg_loss(g, deltas, &idx, &tgt, idx.len() / 4)?
    };

    let (rcnn_cls, rcnn_reg, pooled, logits) = if plan.rois.is_empty() {
        (zero(g), zero(g), None, None)
    } else {
        let rois = plan.roi_boxes();
        let pooled = net.roi_pool(g, features, &rois)?;
        let (logits, reg) = net.head(g, pooled)?;
        let k = net.model.num_classes;
        let n = plan.rois.len();
        let logp = g.log_softmax(logits, 1)?;
        let idx: Vec<usize> = plan.rois.iter().enumerate().map(|(i, r)| i * (k + 1) + r.label).collect();
        let picked = g.gather(logp, &idx)?;
        let s = g.sum(picked);
        let cls = g.scale(s, -1.0 / n as f64);

        let mut idx = Vec::new();
        let mut tgt = Vec::new();
        for (i, r) in plan.rois.iter().enumerate() {
            if let Some(t) = r.target {
                let base = i * 4 * k + (r.label - 1) * 4;
                idx.extend(base..base + 4);
                tgt.extend(weighted(t));
            }
        }
        let reg_l = if idx.is_empty() {
            zero(g)
        } else {
            reg_loss(g, reg, &idx, &tgt, idx.len() / 4)?
        };
        (cls, reg_l, Some(pooled), Some(logits))
    };

    let t = g.add(rpn_cls, rpn_reg)?;
    let t = g.add(t, rcnn_cls)?;
    let total = g.add(t, rcnn_reg)?;
    Ok(FrcnnLoss {
        total,
        rpn_cls,
        rpn_reg,
        rcnn_cls,
        rcnn_reg,
        features,
        pooled,
        logits,
        plan,
    })
}

/// Forward pass, target sampling and loss for one image.
pub fn frcnn_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    net: &Bound,
    image: Var,
    targets: &Targets,
    rng: &mut R,
) -> Result<FrcnnLoss> {
    let features = net.features(g, image)?;
    let (obj, deltas) = net.rpn(g, features)?;
    let plan = plan_targets(net.config(), g.value(obj), g.value(deltas), targets, rng);
    frcnn_loss_with_plan(g, net, features, obj, deltas, plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorModel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gt() -> Vec<(BBox, usize)> {
        vec![
            (BBox::new(10.0, 10.0, 30.0, 28.0).unwrap(), 1),
            (BBox::new(40.0, 36.0, 54.0, 60.0).unwrap(), 2),
        ]
    }

    #[test]
    fn anchor_sets_are_disjoint_and_cover_every_target() {
        let cfg = DetectorConfig::default();
        let anchors = cfg.anchors();
        let boxes: Vec<BBox> = gt().iter().map(|g| g.0).collect();
        let (pos, neg) = match_anchors(&cfg, &anchors, &boxes);
        let pos_set: std::collections::HashSet<usize> = pos.iter().map(|p| p.0).collect();
        assert!(neg.iter().all(|k| !pos_set.contains(k)));
        for t in 0..boxes.len() {
            assert!(pos.iter().any(|p| p.1 == t));
        }
    }

    #[test]
    fn plan_is_reproducible_and_respects_caps() {
        let cfg = DetectorConfig::default();
        let m = DetectorModel::new(cfg.clone(), 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::randn(vec![3, 64, 64], 0.2, &mut rng);
        let targets = Targets::from_gt(&gt());
        let run = |seed| {
            let mut g = Graph::new();
            let net = m.bind(&mut g, true);
            let x = g.constant(img.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = frcnn_loss(&mut g, &net, x, &targets, &mut rng).unwrap();
            (g.item(out.total), out.plan)
        };
        let (l1, p1) = run(7);
        let (l2, p2) = run(7);
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(p1, p2);
        assert!(l1 >= 0.0);
        assert!(p1.anchors.len() <= cfg.rpn_batch);
        assert!(p1.anchors.iter().filter(|a| a.target.is_some()).count() <= 32);
        assert!(p1.rois.len() <= 16);
        assert!(p1.rois.iter().filter(|r| r.label > 0).count() <= 4);
        // ground-truth boxes are always candidates, so positives exist
        assert!(p1.rois.iter().any(|r| r.label > 0));
    }

    #[test]
    fn no_targets_gives_negative_only_rpn_loss() {
        let cfg = DetectorConfig::default();
        let m = DetectorModel::new(cfg, 2, 3);
        let mut g = Graph::new();
        let net = m.bind(&mut g, true);
        let x = g.constant(Tensor::full(vec![3, 64, 64], 0.2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = frcnn_loss(&mut g, &net, x, &Targets::default(), &mut rng).unwrap();
        assert!(out.plan.anchors.iter().all(|a| a.target.is_none()));
        assert_eq!(g.item(out.rpn_reg), 0.0);
        assert_eq!(g.item(out.rcnn_reg), 0.0);
        assert!(out.plan.rois.iter().all(|r| r.label == 0));
        assert!(g.item(out.total) > 0.0);
    }
}
