//! Base training, the triple network and incremental training.
//!
//! Seeds: a run seed feeds a ChaCha8 generator. Stream 0 yields the
//! initialisation seeds (IM head, then RM); stream 1 drives training, drawing
//! in this order per epoch: the shuffle of image indices, then for every image
//! the IM sampling plan followed by the RM sampling plan (see
//! [`plan_targets`](crate::detector::plan_targets) for the order inside a plan).

use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxgeom::{BBox, Detection};
use crate::detector::{
    frcnn_loss, frcnn_loss_with_plan, plan_targets, Bound, DetectorConfig, DetectorError, DetectorModel, Layers,
    LossPlan, Targets, BACKBONE_PARAMS,
};
use crate::distill::{d_cls, d_fea, d_res, FeatureTriple, LogitTriple, PooledTriple};
use crate::eval::{evaluate_model, EvalOptions};
use crate::pseudo_gt::{build_training_targets, generate_pseudo_gt, PseudoGtError, Thresholds};
use crate::synthdata::Scene;
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Confidence threshold used for both target sets when the 2-threshold
/// strategy is switched off.
pub const SINGLE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    PseudoGt(#[from] PseudoGtError),
    #[error("non-finite {term} loss at epoch {epoch}, step {step}")]
    NonFinite { term: &'static str, epoch: usize, step: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Which parts of the incremental objective are active. With everything off
/// incremental training is plain finetuning of IM on the new annotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSwitches {
    pub d_fea: bool,
    pub d_res: bool,
    pub d_cls: bool,
    pub two_threshold: bool,
    pub pseudo_gt: bool,
}

impl LossSwitches {
    pub const ALL: Self = Self {
        d_fea: true,
        d_res: true,
        d_cls: true,
        two_threshold: true,
        pseudo_gt: true,
    };
    pub const NONE: Self = Self {
        d_fea: false,
        d_res: false,
        d_cls: false,
        two_threshold: false,
        pseudo_gt: false,
    };
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Epochs after which the learning rate is divided by 10.
    pub lr_milestones: Vec<usize>,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub thresholds: Thresholds,
    pub switches: LossSwitches,
    /// Detach RM features and logits inside the distillation terms.
    pub rm_stop_gradient: bool,
    /// Initialise RM's backbone randomly instead of copying OM's.
    pub rm_random_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::incremental()
    }
}

impl TrainConfig {
    pub fn base() -> Self {
        Self {
            lambda: 1.0,
            epochs: 20,
            lr: 0.01,
            lr_milestones: vec![15],
            momentum: 0.9,
            batch_size: 2,
            seed: 0,
            thresholds: Thresholds::default(),
            switches: LossSwitches::NONE,
            rm_stop_gradient: false,
            rm_random_backbone: false,
        }
    }

    pub fn incremental() -> Self {
        Self {
            epochs: 10,
            lr: 0.001,
            lr_milestones: vec![5],
            switches: LossSwitches::ALL,
            ..Self::base()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("need lr > 0 and momentum in [0, 1), got {} and {}", self.lr, self.momentum));
        }
        self.thresholds.validate()?;
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * 0.1f64.powi(drops as i32)
    }

    /// Thresholds the pseudo-GT split actually uses.
    pub fn effective_thresholds(&self) -> Thresholds {
        if self.switches.two_threshold {
            self.thresholds
        } else {
            Thresholds {
                theta_iou: self.thresholds.theta_iou,
                ..Thresholds::single(SINGLE_THRESHOLD)
            }
        }
    }
}

/// SGD with momentum: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(model: &DetectorModel, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: model.params.to_vec().iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn step(&mut self, model: &mut DetectorModel, grads: &[Vec<f64>], lr: f64) {
        for ((p, v), g) in model.params.to_vec_mut().into_iter().zip(&mut self.velocity).zip(grads) {
            for ((p, v), g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *v = self.momentum * *v + g;
                *p -= lr * *v;
            }
        }
    }
}

fn zero_grads(model: &DetectorModel) -> Vec<Vec<f64>> {
    model.params.to_vec().iter().map(|t| vec![0.0; t.numel()]).collect()
}

fn accumulate(acc: &mut [Vec<f64>], grads: &crate::tensor::Gradients, vars: &Layers<Var>, scale: f64) {
    for (a, v) in acc.iter_mut().zip(vars.to_vec()) {
        if let Some(g) = grads.get(*v) {
            a.iter_mut().zip(g.data()).for_each(|(a, g)| *a += scale * g);
        }
    }
}

/// Mean loss terms over one epoch, plus evaluation results when requested.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
    pub map_old: Option<f64>,
    pub map_new: Option<f64>,
    pub map_all: Option<f64>,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,lr,frcnn_im,frcnn_rm,d_fea,d_res,d_cls,total,map_old,map_new,map_all";

pub fn epoch_log_csv(records: &[EpochRecord]) -> String {
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    let mut out = format!("{EPOCH_LOG_HEADER}\n");
    for r in records {
        let l = &r.losses;
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            r.epoch,
            r.lr,
            l.frcnn_im,
            l.frcnn_rm,
            l.d_fea,
            l.d_res,
            l.d_cls,
            l.total,
            opt(r.map_old),
            opt(r.map_new),
            opt(r.map_all)
        );
    }
    out
}

pub fn write_epoch_log(records: &[EpochRecord], path: &Path) -> Result<()> {
    std::fs::write(path, epoch_log_csv(records)).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Held-out scenes evaluated at the end of every epoch.
pub struct Monitor<'a> {
    pub scenes: &'a [Scene],
    pub old: &'a [usize],
    pub new: &'a [usize],
}

fn monitor(model: &DetectorModel, m: Option<&Monitor>, rec: &mut EpochRecord) -> Result<()> {
    if let Some(m) = m {
        let report = evaluate_model(model, m.scenes, m.old, m.new, &EvalOptions::default())?;
        rec.map_old = Some(report.map_old);
        rec.map_new = Some(report.map_new);
        rec.map_all = Some(report.map_all);
    }
    Ok(())
}

fn check_finite(term: &'static str, v: f64, epoch: usize, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFinite { term, epoch, step })
    }
}

fn seeds(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let init = ChaCha8Rng::seed_from_u64(seed);
    let mut train = ChaCha8Rng::seed_from_u64(seed);
    train.set_stream(1);
    (init, train)
}

/// Trains a fresh detector on fully annotated scenes.
pub fn train_base(
    scenes: &[Scene],
    num_classes: usize,
    model_cfg: DetectorConfig,
    cfg: &TrainConfig,
    mon: Option<&Monitor>,
) -> Result<(DetectorModel, Vec<EpochRecord>)> {
    cfg.validate()?;
    let (mut init, mut rng) = seeds(cfg.seed);
    let mut model = DetectorModel::new(model_cfg, num_classes, init.next_u64());
    let mut opt = Sgd::new(&model, cfg.momentum);
    let targets: Vec<Targets> = scenes.iter().map(|s| Targets::from_gt(&s.gt())).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc = zero_grads(&model);
            for &i in batch {
                let mut g = Graph::new();
                let net = model.bind(&mut g, true);
                let x = g.constant(scenes[i].image.clone());
                let loss = frcnn_loss(&mut g, &net, x, &targets[i], &mut rng)?;
                let v = g.item(loss.total);
                check_finite("frcnn", v, epoch, step)?;
                sum += v;
                let grads = g.backward(loss.total)?;
                accumulate(&mut acc, &grads, &net.vars, 1.0 / batch.len() as f64);
            }
            opt.step(&mut model, &acc, lr);
        }
        let mut rec = EpochRecord {
            epoch,
            lr,
            losses: LossBreakdown {
                frcnn_im: sum / scenes.len().max(1) as f64,
                total: sum / scenes.len().max(1) as f64,
                ..Default::default()
            },
            ..Default::default()
        };
        monitor(&model, mon, &mut rec)?;
        log.push(rec);
    }
    Ok((model, log))
}

/// IM initialised from OM: every parameter copied, class logits and
/// class-specific deltas widened with `N(0, 0.01²)` weights and zero bias
/// for the new classes.
pub fn init_incremental(om: &DetectorModel, num_new: usize, seed: u64) -> DetectorModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut im = om.clone();
    im.num_classes = om.num_classes + num_new;
    im.seed = seed;
    let widen = |t: &Tensor, extra: usize, rng: &mut ChaCha8Rng| {
        let s = t.shape();
        let (rows, cols) = if s.len() == 2 { (s[0], s[1]) } else { (1, s[0]) };
        let mut data = Vec::with_capacity(rows * (cols + extra));
        for r in 0..rows {
            data.extend_from_slice(&t.data()[r * cols..(r + 1) * cols]);
            for _ in 0..extra {
                data.push(if s.len() == 2 { 0.01 * rng.sample::<f64, _>(rand_distr::StandardNormal) } else { 0.0 });
            }
        }
        let shape = if s.len() == 2 { vec![rows, cols + extra] } else { vec![cols + extra] };
        Tensor::from_vec(shape, data).expect("widened shape")
    };
    let p = &mut im.params;
    p.cls_score.weight = widen(&om.params.cls_score.weight, num_new, &mut rng);
    p.cls_score.bias = widen(&om.params.cls_score.bias, num_new, &mut rng);
    p.bbox_pred.weight = widen(&om.params.bbox_pred.weight, 4 * num_new, &mut rng);
    p.bbox_pred.bias = widen(&om.params.bbox_pred.bias, 4 * num_new, &mut rng);
    im
}

/// RM for `num_new` classes: backbone copied from OM (or random when
/// `random_backbone`), everything else freshly initialised under `seed`.
pub fn init_residual(om: &DetectorModel, num_new: usize, seed: u64, random_backbone: bool) -> DetectorModel {
    let mut rm = DetectorModel::new(om.config.clone(), num_new, seed);
    if !random_backbone {
        for (dst, src) in rm.params.to_vec_mut().into_iter().zip(om.params.to_vec()).take(BACKBONE_PARAMS) {
            *dst = src.clone();
        }
    }
    rm
}

/// Frozen old model, incremental model and residual model.
#[derive(Debug, Clone)]
pub struct TripleNetwork {
    om: DetectorModel,
    pub im: DetectorModel,
    pub rm: DetectorModel,
}

impl TripleNetwork {
    pub fn new(om: DetectorModel, num_new: usize, seed: u64, random_backbone: bool) -> Result<Self> {
        if num_new == 0 {
            return Err(TrainError::Config("at least one new class is required".into()));
        }
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        let im = init_incremental(&om, num_new, init.next_u64());
        let rm = init_residual(&om, num_new, init.next_u64(), random_backbone);
        Ok(Self { om, im, rm })
    }

    /// Assembles a triple from existing models, checking class widths.
    pub fn from_parts(om: DetectorModel, im: DetectorModel, rm: DetectorModel) -> Result<Self> {
        if im.num_classes != om.num_classes + rm.num_classes || im.config != om.config || rm.config != om.config {
            return Err(TrainError::Config(format!(
                "inconsistent triple: om {} classes, im {}, rm {}",
                om.num_classes, im.num_classes, rm.num_classes
            )));
        }
        Ok(Self { om, im, rm })
    }

    /// The old model is only ever exposed immutably.
    pub fn om(&self) -> &DetectorModel {
        &self.om
    }

    pub fn num_old(&self) -> usize {
        self.om.num_classes
    }

    pub fn num_new(&self) -> usize {
        self.rm.num_classes
    }
}

/// Scalar values of every term of the incremental objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub frcnn_im: f64,
    pub frcnn_rm: f64,
    pub d_fea: f64,
    pub d_res: f64,
    pub d_cls: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, o: &LossBreakdown, s: f64) {
        self.frcnn_im += s * o.frcnn_im;
        self.frcnn_rm += s * o.frcnn_rm;
        self.d_fea += s * o.d_fea;
        self.d_res += s * o.d_res;
        self.d_cls += s * o.d_cls;
        self.total += s * o.total;
    }
}

/// Graph nodes of every term; disabled terms are constant zeros.
#[derive(Debug, Clone, Copy)]
pub struct TermVars {
    pub frcnn_im: Var,
    pub frcnn_rm: Var,
    pub d_fea: Var,
    pub d_res: Var,
    pub d_cls: Var,
    pub distill: Var,
    pub total: Var,
}

impl TermVars {
    pub fn values(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            frcnn_im: g.item(self.frcnn_im),
            frcnn_rm: g.item(self.frcnn_rm),
            d_fea: g.item(self.d_fea),
            d_res: g.item(self.d_res),
            d_cls: g.item(self.d_cls),
            total: g.item(self.total),
        }
    }
}

/// Sampling plans of IM and RM for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Plans {
    pub im: LossPlan,
    pub rm: LossPlan,
}

/// Per-image training targets: IM's (pseudo-GT ∪ new GT) and RM's (new GT
/// with class ids shifted down by the number of old classes).
#[derive(Debug, Clone, PartialEq)]
pub struct StepTargets {
    pub im: Targets,
    pub rm: Targets,
}

impl StepTargets {
    pub fn new(pseudo: &[Detection], gt_new: &[(BBox, usize)], num_old: usize, cfg: &TrainConfig) -> Result<Self> {
        let im = if cfg.switches.pseudo_gt {
            build_training_targets(pseudo, gt_new, &cfg.effective_thresholds())?.to_targets()
        } else {
            Targets::from_gt(gt_new)
        };
        let local: Vec<(BBox, usize)> = gt_new.iter().map(|&(b, c)| (b, c - num_old)).collect();
        Ok(Self {
            im,
            rm: Targets::from_gt(&local),
        })
    }
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

fn detach(g: &mut Graph, v: Var, on: bool) -> Var {
    if on {
        g.constant(g.value(v).clone())
    } else {
        v
    }
}

/// Builds `L_all = L_IM + L_RM + λ·(D_fea + D_res + D_cls)` for one image on
/// already bound models. Plans are sampled from `rng` (IM first) unless given.
#[allow(clippy::too_many_arguments)]
pub fn build_objective<R: Rng + ?Sized>(
    g: &mut Graph,
    om: &Bound,
    im: &Bound,
    rm: &Bound,
    image: Var,
    targets: &StepTargets,
    plans: Option<&Plans>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(TermVars, Plans)> {
    let sw = cfg.switches;
    let (num_old, num_new) = (om.model.num_classes, rm.model.num_classes);

    let f_im = im.features(g, image)?;
    let (obj_im, del_im) = im.rpn(g, f_im)?;
    let f_rm = rm.features(g, image)?;
    let (obj_rm, del_rm) = rm.rpn(g, f_rm)?;
    let plans = match plans {
        Some(p) => p.clone(),
        None => {
            let pim = plan_targets(im.config(), g.value(obj_im), g.value(del_im), &targets.im, rng);
            let prm = plan_targets(rm.config(), g.value(obj_rm), g.value(del_rm), &targets.rm, rng);
            Plans { im: pim, rm: prm }
        }
    };
    let loss_im = frcnn_loss_with_plan(g, im, f_im, obj_im, del_im, plans.im.clone())?;
    let loss_rm = frcnn_loss_with_plan(g, rm, f_rm, obj_rm, del_rm, plans.rm.clone())?;

    let (mut t_fea, mut t_res, mut t_cls) = (None, None, None);
    if sw.d_fea || sw.d_res || sw.d_cls {
        let f_om = om.features(g, image)?;
        let f_rm_d = detach(g, f_rm, cfg.rm_stop_gradient);
        let feats = FeatureTriple {
            om: f_om,
            im: f_im,
            rm: f_rm_d,
        };
        if sw.d_fea {
            t_fea = Some(d_fea(g, feats)?);
        }
        let rois = plans.im.roi_boxes();
        if (sw.d_res || sw.d_cls) && !rois.is_empty() {
            let p_im = loss_im.pooled.expect("pooled features exist when RoIs were sampled");
            let p_om = om.roi_pool(g, f_om, &rois)?;
            let p_rm = rm.roi_pool(g, f_rm, &rois)?;
            let p_rm_d = detach(g, p_rm, cfg.rm_stop_gradient);
            if sw.d_res {
                let pooled = PooledTriple {
                    om: p_om,
                    im: p_im,
                    rm: p_rm_d,
                };
                t_res = Some(d_res(g, feats, pooled)?.total);
            }
            if sw.d_cls {
                let (l_om, _) = om.head(g, p_om)?;
                let (l_rm, _) = rm.head(g, p_rm)?;
                let l_rm = detach(g, l_rm, cfg.rm_stop_gradient);
                let logits = LogitTriple {
                    om: l_om,
                    im: loss_im.logits.expect("logits exist when RoIs were sampled"),
                    rm: l_rm,
                };
                t_cls = Some(d_cls(g, logits, num_old, num_new)?);
            }
        }
    }
    let d_fea = t_fea.unwrap_or_else(|| zero(g));
    let d_res = t_res.unwrap_or_else(|| zero(g));
    let d_cls = t_cls.unwrap_or_else(|| zero(g));
    let s = g.add(d_fea, d_res)?;
    let distill = g.add(s, d_cls)?;
    let weighted = g.scale(distill, cfg.lambda);
    let base = g.add(loss_im.total, loss_rm.total)?;
    let total = g.add(base, weighted)?;
    let terms = TermVars {
        frcnn_im: loss_im.total,
        frcnn_rm: loss_rm.total,
        d_fea,
        d_res,
        d_cls,
        distill,
        total,
    };
    Ok((terms, plans))
}

/// Loss values and parameter gradients of one image.
pub struct StepOutput {
    pub losses: LossBreakdown,
    pub im_grads: Vec<Vec<f64>>,
    pub rm_grads: Vec<Vec<f64>>,
    pub plans: Plans,
}

/// Forward and backward of the full objective on one image, without updating.
pub fn step_gradients<R: Rng + ?Sized>(
    triple: &TripleNetwork,
    image: &Tensor,
    targets: &StepTargets,
    plans: Option<&Plans>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepOutput> {
    triple.im.check_image(image)?;
    let mut g = Graph::new();
    let om = triple.om.bind(&mut g, false);
    let im = triple.im.bind(&mut g, true);
    let rm = triple.rm.bind(&mut g, true);
    let x = g.constant(image.clone());
    let (terms, plans) = build_objective(&mut g, &om, &im, &rm, x, targets, plans, cfg, rng)?;
    let losses = terms.values(&g);
    let grads = g.backward(terms.total)?;
    let mut im_grads = zero_grads(&triple.im);
    let mut rm_grads = zero_grads(&triple.rm);
    accumulate(&mut im_grads, &grads, &im.vars, 1.0);
    accumulate(&mut rm_grads, &grads, &rm.vars, 1.0);
    Ok(StepOutput {
        losses,
        im_grads,
        rm_grads,
        plans,
    })
}

fn check_terms(l: &LossBreakdown, epoch: usize, step: usize) -> Result<()> {
    check_finite("frcnn_im", l.frcnn_im, epoch, step)?;
    check_finite("frcnn_rm", l.frcnn_rm, epoch, step)?;
    check_finite("d_fea", l.d_fea, epoch, step)?;
    check_finite("d_res", l.d_res, epoch, step)?;
    check_finite("d_cls", l.d_cls, epoch, step)?;
    check_finite("total", l.total, epoch, step)
}

/// Incremental trainer state: the triple plus one optimiser per trainable model.
pub struct IncrementalTrainer {
    pub triple: TripleNetwork,
    im_opt: Sgd,
    rm_opt: Sgd,
}

impl IncrementalTrainer {
    pub fn new(triple: TripleNetwork, momentum: f64) -> Self {
        let im_opt = Sgd::new(&triple.im, momentum);
        let rm_opt = Sgd::new(&triple.rm, momentum);
        Self { triple, im_opt, rm_opt }
    }

    /// One SGD update on a batch of `(image, targets)` pairs. Gradients and
    /// losses are averaged over the batch.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        batch: &[(&Tensor, &StepTargets)],
        cfg: &TrainConfig,
        lr: f64,
        rng: &mut R,
        (epoch, step): (usize, usize),
    ) -> Result<LossBreakdown> {
        let scale = 1.0 / batch.len() as f64;
        let mut im_acc = zero_grads(&self.triple.im);
        let mut rm_acc = zero_grads(&self.triple.rm);
        let mut mean = LossBreakdown::default();
        for (image, targets) in batch {
            let out = step_gradients(&self.triple, image, targets, None, cfg, rng)?;
            check_terms(&out.losses, epoch, step)?;
            mean.add_scaled(&out.losses, scale);
            for (a, g) in im_acc.iter_mut().zip(&out.im_grads).chain(rm_acc.iter_mut().zip(&out.rm_grads)) {
                a.iter_mut().zip(g).for_each(|(a, g)| *a += scale * g);
            }
        }
        self.im_opt.step(&mut self.triple.im, &im_acc, lr);
        self.rm_opt.step(&mut self.triple.rm, &rm_acc, lr);
        Ok(mean)
    }
}

/// Pseudo-GT of every scene from the frozen old model, computed once per run.
pub fn pseudo_gt_for(om: &DetectorModel, scenes: &[Scene], th: &Thresholds) -> Result<Vec<Vec<Detection>>> {
    scenes
        .iter()
        .map(|s| Ok(generate_pseudo_gt(om, &s.image, &s.gt(), th)?))
        .collect()
}

/// Trains IM and RM on new-class scenes. Scene annotations must carry only
/// new-class ids (global numbering, above the old classes).
pub fn train_incremental(
    om: DetectorModel,
    scenes: &[Scene],
    cfg: &TrainConfig,
    mon: Option<&Monitor>,
) -> Result<(TripleNetwork, Vec<EpochRecord>)> {
    cfg.validate()?;
    let num_old = om.num_classes;
    let num_new = scenes
        .iter()
        .flat_map(|s| s.annotations.iter().map(|a| a.class_id))
        .max()
        .filter(|&m| m > num_old)
        .map(|m| m - num_old)
        .ok_or_else(|| TrainError::Config("incremental data has no new-class annotations".into()))?;
    if let Some(s) = scenes.iter().find(|s| s.annotations.iter().any(|a| a.class_id <= num_old)) {
        let ids: Vec<usize> = s.annotations.iter().map(|a| a.class_id).collect();
        return Err(TrainError::Config(format!("incremental scene carries old-class annotations {ids:?}")));
    }
    let (mut init, mut rng) = seeds(cfg.seed);
    let triple = TripleNetwork::new(om, num_new, init.next_u64(), cfg.rm_random_backbone)?;
    let pseudo = if cfg.switches.pseudo_gt {
        pseudo_gt_for(triple.om(), scenes, &cfg.effective_thresholds())?
    } else {
        vec![Vec::new(); scenes.len()]
    };
    let targets: Vec<StepTargets> = scenes
        .iter()
        .zip(&pseudo)
        .map(|(s, p)| StepTargets::new(p, &s.gt(), num_old, cfg))
        .collect::<Result<_>>()?;

    let mut trainer = IncrementalTrainer::new(triple, cfg.momentum);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(&Tensor, &StepTargets)> = idx.iter().map(|&i| (&scenes[i].image, &targets[i])).collect();
            let l = trainer.train_step(&batch, cfg, lr, &mut rng, (epoch, step))?;
            sum.add_scaled(&l, idx.len() as f64 / scenes.len() as f64);
        }
        let mut rec = EpochRecord {
            epoch,
            lr,
            losses: sum,
            ..Default::default()
        };
        monitor(&trainer.triple.im, mon, &mut rec)?;
        log.push(rec);
    }
    Ok((trainer.triple, log))
}
