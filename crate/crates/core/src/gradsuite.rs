//! Finite-difference gradient suite over every primitive op, every
//! distillation loss, the detection loss and the full incremental objective.
//!
//! Each check draws random instances from a seeded generator and compares
//! reverse-mode gradients with central differences. Instances whose graph
//! passes within `margin` of a non-smooth point (see [`Graph::kink_margin`])
//! are redrawn.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::boxgeom::BBox;
use crate::detector::{frcnn_loss_with_plan, plan_targets, Bound, DetectorConfig, DetectorModel, Layers, Targets};
use crate::distill::{attn_pair_loss, d_cls, d_fea, d_res, FeatureTriple, LogitTriple, PooledTriple};
use crate::tensor::{grad_check, Graph, Result, Tensor, TensorError, Var};
use crate::trainer::{build_objective, LossSwitches, Plans, StepTargets, TrainConfig, TripleNetwork};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Distance from kinks required of primitive and distillation instances.
pub const MARGIN: f64 = 1e-3;
/// Detector-level graphs hold thousands of relu inputs; they only need to
/// stay clear of kinks by well over the finite-difference step.
pub const MODEL_MARGIN: f64 = 1e-4;
const MAX_DRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub instances: usize,
    /// Instances redrawn for passing too close to a kink.
    pub redrawn: usize,
    pub max_rel_error: f64,
    pub secs: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// A loss instance: input point and the function building the loss.
struct Case {
    point: Vec<Tensor>,
    f: Builder,
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::randn(shape.to_vec(), std, rng)
}

/// Contracts an arbitrary output with fixed random weights so every output
/// coordinate contributes to the checked scalar.
fn contract(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn margin_of(case: &Case) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.point.iter().map(|t| g.leaf(t.clone(), true)).collect();
    (case.f)(&mut g, &vars)?;
    Ok(g.kink_margin())
}

fn run_check(
    name: &str,
    instances: usize,
    margin: f64,
    rng: &mut ChaCha8Rng,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> Result<Case>,
) -> Result<SuiteEntry> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut redrawn = 0;
    for _ in 0..instances {
        let case = loop {
            let c = draw(rng)?;
            if margin_of(&c)? >= margin {
                break c;
            }
            redrawn += 1;
            if redrawn > MAX_DRAWS {
                return Err(TensorError::Invalid {
                    op: "gradient suite",
                    reason: format!("{name}: no instance clear of kinks after {MAX_DRAWS} draws"),
                });
            }
        };
        let report = grad_check(&case.f, &case.point, STEP)?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(SuiteEntry {
        name: name.to_string(),
        instances,
        redrawn,
        max_rel_error: worst,
        secs: start.elapsed().as_secs_f64(),
    })
}

/// A unary or binary primitive applied to inputs of the given shapes and
/// contracted to a scalar.
fn primitive(
    shapes: &[&[usize]],
    out_shape: &[usize],
    op: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> impl FnMut(&mut ChaCha8Rng) -> Result<Case> {
    let shapes: Vec<Vec<usize>> = shapes.iter().map(|s| s.to_vec()).collect();
    let out_shape = out_shape.to_vec();
    let op = std::rc::Rc::new(op);
    move |rng| {
        let point = shapes.iter().map(|s| rand_t(rng, s, 1.0)).collect();
        let weights = rand_t(rng, &out_shape, 1.0);
        let op = op.clone();
        Ok(Case {
            point,
            f: Box::new(move |g, v| {
                let out = op(g, v)?;
                contract(g, out, &weights)
            }),
        })
    }
}

/// Checks of every primitive op the detector and the losses are built from.
pub fn primitive_checks(instances: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let n = instances;
    let m = MARGIN;
    let rois = vec![[1.0, 2.0, 13.0, 11.0], [4.0, 0.0, 16.0, 16.0], [6.5, 7.5, 9.0, 12.0]];
    Ok(vec![
        run_check("add", n, m, r, primitive(&[&[2, 3], &[2, 3]], &[2, 3], |g, v| g.add(v[0], v[1])))?,
        run_check("sub", n, m, r, primitive(&[&[2, 3], &[2, 3]], &[2, 3], |g, v| g.sub(v[0], v[1])))?,
        run_check("mul", n, m, r, primitive(&[&[2, 3], &[2, 3]], &[2, 3], |g, v| g.mul(v[0], v[1])))?,
        run_check("scale", n, m, r, primitive(&[&[4]], &[4], |g, v| Ok(g.scale(v[0], -1.7))))?,
        run_check("add_scalar", n, m, r, primitive(&[&[4]], &[4], |g, v| Ok(g.add_scalar(v[0], 0.3))))?,
        run_check("div_scalar", n, m, r, |rng: &mut ChaCha8Rng| {
            let weights = rand_t(rng, &[2, 3], 1.0);
            let denom = Tensor::scalar(rng.random_range(0.5..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 });
            Ok(Case {
                point: vec![rand_t(rng, &[2, 3], 1.0), denom],
                f: Box::new(move |g, v| {
                    let out = g.div_scalar(v[0], v[1])?;
                    contract(g, out, &weights)
                }),
            })
        })?,
        run_check("add_row_bias", n, m, r, primitive(&[&[3, 4], &[4]], &[3, 4], |g, v| g.add_row_bias(v[0], v[1])))?,
        run_check("matmul", n, m, r, primitive(&[&[3, 4], &[4, 2]], &[3, 2], |g, v| g.matmul(v[0], v[1])))?,
        run_check(
            "conv2d",
            n,
            m,
            r,
            primitive(&[&[2, 5, 5], &[3, 2, 3, 3], &[3]], &[3, 5, 5], |g, v| g.conv2d(v[0], v[1], v[2], 1, 1)),
        )?,
        run_check(
            "conv2d_strided",
            n,
            m,
            r,
            primitive(&[&[2, 6, 6], &[2, 2, 3, 3], &[2]], &[2, 2, 2], |g, v| g.conv2d(v[0], v[1], v[2], 2, 0)),
        )?,
        run_check("relu", n, m, r, primitive(&[&[3, 4]], &[3, 4], |g, v| Ok(g.relu(v[0]))))?,
        run_check("max_pool2", n, m, r, primitive(&[&[2, 4, 4]], &[2, 2, 2], |g, v| g.max_pool2(v[0])))?,
        run_check("mean", n, m, r, primitive(&[&[2, 3, 4]], &[2, 4], |g, v| g.mean_axis(v[0], 1)))?,
        run_check("sum", n, m, r, primitive(&[&[2, 3]], &[], |g, v| Ok(g.sum(v[0]))))?,
        run_check("abs", n, m, r, primitive(&[&[3, 4]], &[3, 4], |g, v| Ok(g.abs(v[0]))))?,
        run_check("square", n, m, r, primitive(&[&[3, 4]], &[3, 4], |g, v| Ok(g.square(v[0]))))?,
        run_check("softmax", n, m, r, primitive(&[&[3, 5]], &[3, 5], |g, v| g.softmax(v[0], 1, None)))?,
        run_check(
            "softmax_range",
            n,
            m,
            r,
            primitive(&[&[3, 5]], &[3, 3], |g, v| g.softmax(v[0], 1, Some((1, 4)))),
        )?,
        run_check("softmax_axis0", n, m, r, primitive(&[&[3, 2]], &[3, 2], |g, v| g.softmax(v[0], 0, None)))?,
        run_check("log_softmax", n, m, r, primitive(&[&[3, 5]], &[3, 5], |g, v| g.log_softmax(v[0], 1)))?,
        run_check("frobenius_norm", n, m, r, primitive(&[&[3, 4]], &[], |g, v| Ok(g.frobenius_norm(v[0]))))?,
        run_check("smooth_l1", n, m, r, |rng: &mut ChaCha8Rng| {
            let weights = rand_t(rng, &[8], 1.0);
            Ok(Case {
                point: vec![rand_t(rng, &[8], 2.0)],
                f: Box::new(move |g, v| {
                    let out = g.smooth_l1(v[0]);
                    contract(g, out, &weights)
                }),
            })
        })?,
        run_check("gram", n, m, r, primitive(&[&[4, 3]], &[4, 4], |g, v| g.gram(v[0])))?,
        run_check(
            "roi_pool",
            n,
            m,
            r,
            primitive(&[&[2, 5, 5]], &[3, 2, 4, 4], move |g, v| g.roi_pool(v[0], &rois, 4, 4.0)),
        )?,
        run_check("gather", n, m, r, primitive(&[&[3, 4]], &[5], |g, v| g.gather(v[0], &[0, 5, 5, 11, 2])))?,
        run_check("reshape", n, m, r, primitive(&[&[3, 4]], &[2, 6], |g, v| g.reshape(v[0], vec![2, 6])))?,
        run_check("bce_with_logits", n, m, r, |rng: &mut ChaCha8Rng| {
            let weights = rand_t(rng, &[6], 1.0);
            let targets: Vec<f64> = (0..6).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
            Ok(Case {
                point: vec![rand_t(rng, &[6], 2.0)],
                f: Box::new(move |g, v| {
                    let out = g.bce_with_logits(v[0], &targets)?;
                    contract(g, out, &weights)
                }),
            })
        })?,
    ])
}

/// Random boxes inside a `size × size` image, sides between 6 and `size/2`.
fn rand_box(rng: &mut ChaCha8Rng, size: f64) -> BBox {
    let w = rng.random_range(6.0..size / 2.0);
    let h = rng.random_range(6.0..size / 2.0);
    let x = rng.random_range(0.0..size - w);
    let y = rng.random_range(0.0..size - h);
    BBox::new(x, y, x + w, y + h).expect("positive size")
}

/// A micro triple (2 old classes, 1 new) on a random 32×32 image with
/// two old-class and one new-class target box. IM and RM parameters are
/// jittered by `N(0, 0.1²)`.
pub fn micro_fixture(rng: &mut ChaCha8Rng) -> (TripleNetwork, Tensor, StepTargets) {
    let cfg = DetectorConfig::micro();
    let om = DetectorModel::new(cfg.clone(), 2, rng.random());
    let mut triple = TripleNetwork::new(om, 1, rng.random(), false).expect("one new class");
    // a freshly initialised IM copies OM exactly, which puts every
    // distillation difference on the kink of |x|; jitter moves the triple
    // to a generic mid-training point and keeps relu inputs off exact zeros
    for m in [&mut triple.im, &mut triple.rm] {
        for t in m.params.to_vec_mut() {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v += 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal));
        }
    }
    let size = cfg.image_size as f64;
    let image = Tensor::from_vec(
        vec![3, cfg.image_size, cfg.image_size],
        (0..3 * cfg.image_size * cfg.image_size).map(|_| rng.random::<f64>()).collect(),
    )
    .expect("image shape");
    let gt = [(rand_box(rng, size), 1), (rand_box(rng, size), 2), (rand_box(rng, size), 3)];
    let targets = StepTargets {
        im: Targets::from_gt(&gt),
        rm: Targets::from_gt(&[(gt[2].0, 1)]),
    };
    (triple, image, targets)
}

fn bound<'m>(model: &'m DetectorModel, vars: &[Var]) -> Bound<'m> {
    Bound {
        model,
        vars: Layers::from_vec(vars.to_vec()).expect("20 parameters"),
    }
}

fn frcnn_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (triple, image, targets) = micro_fixture(rng);
    let model = triple.im.clone();
    let plan = {
        let mut g = Graph::new();
        let net = model.bind(&mut g, false);
        let x = g.constant(image.clone());
        let f = net.features(&mut g, x).map_err(detector_err)?;
        let (obj, del) = net.rpn(&mut g, f).map_err(detector_err)?;
        plan_targets(&model.config, g.value(obj), g.value(del), &targets.im, rng)
    };
    let point = model.params.to_vec().into_iter().cloned().collect();
    Ok(Case {
        point,
        f: Box::new(move |g, v| {
            let net = bound(&model, v);
            let x = g.constant(image.clone());
            let f = net.features(g, x).map_err(detector_err)?;
            let (obj, del) = net.rpn(g, f).map_err(detector_err)?;
            let loss = frcnn_loss_with_plan(g, &net, f, obj, del, plan.clone()).map_err(detector_err)?;
            Ok(loss.total)
        }),
    })
}

fn detector_err(e: crate::detector::DetectorError) -> TensorError {
    match e {
        crate::detector::DetectorError::Tensor(t) => t,
        other => TensorError::Invalid {
            op: "detector",
            reason: other.to_string(),
        },
    }
}

fn objective_err(e: crate::trainer::TrainError) -> TensorError {
    match e {
        crate::trainer::TrainError::Tensor(t) => t,
        crate::trainer::TrainError::Detector(d) => detector_err(d),
        other => TensorError::Invalid {
            op: "objective",
            reason: other.to_string(),
        },
    }
}

fn l_all_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (triple, image, targets) = micro_fixture(rng);
    let cfg = TrainConfig {
        switches: LossSwitches::ALL,
        lambda: 1.0,
        ..TrainConfig::incremental()
    };
    let plans: Plans = {
        let mut g = Graph::new();
        let om = triple.om().bind(&mut g, false);
        let im = triple.im.bind(&mut g, false);
        let rm = triple.rm.bind(&mut g, false);
        let x = g.constant(image.clone());
        build_objective(&mut g, &om, &im, &rm, x, &targets, None, &cfg, rng)
            .map_err(objective_err)?
            .1
    };
    let point: Vec<Tensor> = triple
        .im
        .params
        .to_vec()
        .into_iter()
        .chain(triple.rm.params.to_vec())
        .cloned()
        .collect();
    Ok(Case {
        point,
        f: Box::new(move |g, v| {
            let om = triple.om().bind(g, false);
            let im = bound(&triple.im, &v[..20]);
            let rm = bound(&triple.rm, &v[20..]);
            let x = g.constant(image.clone());
            let mut unused = ChaCha8Rng::seed_from_u64(0);
            let (terms, _) = build_objective(g, &om, &im, &rm, x, &targets, Some(&plans), &cfg, &mut unused)
                .map_err(objective_err)?;
            Ok(terms.total)
        }),
    })
}

/// Gradient checks of every loss of the incremental objective.
pub fn loss_checks(instances: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let n = instances;
    let feat = [2usize, 4, 4];
    let pooled = [3usize, 2, 2, 2];
    Ok(vec![
        run_check("attn_pair_loss", n, MARGIN, r, |rng: &mut ChaCha8Rng| {
            Ok(Case {
                point: vec![rand_t(rng, &[4, 4], 1.0), rand_t(rng, &[4, 4], 1.0)],
                f: Box::new(|g, v| attn_pair_loss(g, v[0], v[1])),
            })
        })?,
        run_check("d_fea", n, MARGIN, r, |rng: &mut ChaCha8Rng| {
            Ok(Case {
                point: (0..3).map(|_| rand_t(rng, &feat, 1.0)).collect(),
                f: Box::new(|g, v| d_fea(g, FeatureTriple { om: v[0], im: v[1], rm: v[2] })),
            })
        })?,
        run_check("d_res_base", n, MARGIN, r, |rng: &mut ChaCha8Rng| {
            let p: Vec<Tensor> = (0..3).map(|_| rand_t(rng, &pooled, 1.0)).collect();
            Ok(Case {
                point: (0..3).map(|_| rand_t(rng, &feat, 1.0)).collect(),
                f: Box::new(move |g, v| {
                    let pv: Vec<Var> = p.iter().map(|t| g.constant(t.clone())).collect();
                    let feats = FeatureTriple { om: v[0], im: v[1], rm: v[2] };
                    Ok(d_res(g, feats, PooledTriple { om: pv[0], im: pv[1], rm: pv[2] })?.base)
                }),
            })
        })?,
        run_check("d_res_pool", n, MARGIN, r, |rng: &mut ChaCha8Rng| {
            let f: Vec<Tensor> = (0..3).map(|_| rand_t(rng, &feat, 1.0)).collect();
            Ok(Case {
                point: (0..3).map(|_| rand_t(rng, &pooled, 1.0)).collect(),
                f: Box::new(move |g, v| {
                    let fv: Vec<Var> = f.iter().map(|t| g.constant(t.clone())).collect();
                    let feats = FeatureTriple { om: fv[0], im: fv[1], rm: fv[2] };
                    Ok(d_res(g, feats, PooledTriple { om: v[0], im: v[1], rm: v[2] })?.pool)
                }),
            })
        })?,
        run_check("d_res", n, MARGIN, r, |rng: &mut ChaCha8Rng| {
            let mut point: Vec<Tensor> = (0..3).map(|_| rand_t(rng, &feat, 1.0)).collect();
            point.extend((0..3).map(|_| rand_t(rng, &pooled, 1.0)));
            Ok(Case {
                point,
                f: Box::new(|g, v| {
                    let feats = FeatureTriple { om: v[0], im: v[1], rm: v[2] };
                    Ok(d_res(g, feats, PooledTriple { om: v[3], im: v[4], rm: v[5] })?.total)
                }),
            })
        })?,
        run_check("d_cls", n, MARGIN, r, |rng: &mut ChaCha8Rng| {
            let (a, b, rois) = (2usize, 2usize, 3usize);
            Ok(Case {
                point: vec![
                    rand_t(rng, &[rois, a + 1], 1.5),
                    rand_t(rng, &[rois, a + b + 1], 1.5),
                    rand_t(rng, &[rois, b + 1], 1.5),
                ],
                f: Box::new(move |g, v| d_cls(g, LogitTriple { om: v[0], im: v[1], rm: v[2] }, a, b)),
            })
        })?,
        run_check("frcnn_loss", n, MODEL_MARGIN, r, frcnn_case)?,
        run_check("l_all", n, MODEL_MARGIN, r, l_all_case)?,
    ])
}

/// Primitive checks followed by loss checks.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = primitive_checks(instances, seed)?;
    out.extend(loss_checks(instances, seed.wrapping_add(1))?);
    Ok(out)
}
