//! Independent scalar reference implementations and random case drivers
//! shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tridet::boxgeom::{iou, nms_per_class, BBox, Detection};
use tridet::detector::{frcnn_loss, Targets};
use tridet::distill::{attn_pair_loss, d_cls, d_fea, d_res, FeatureTriple, LogitTriple, PooledTriple};
use tridet::eval::{voc_ap, ApMethod, ImageDet};
use tridet::gradsuite::micro_fixture;
use tridet::pseudo_gt::{build_training_targets, filter_pseudo, Thresholds};
use tridet::trainer::{step_gradients, LossSwitches, StepTargets, TrainConfig, TripleNetwork};
use tridet::{Graph, Tensor};

pub const EPS: f64 = 1e-12;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Integer corners `[x1, y1, x2, y2]` inside `[0, 32]²`.
pub fn int_box(rng: &mut impl Rng) -> [i64; 4] {
    let x1 = rng.random_range(0..28);
    let y1 = rng.random_range(0..28);
    let x2 = rng.random_range(x1 + 1..=32);
    let y2 = rng.random_range(y1 + 1..=32);
    [x1, y1, x2, y2]
}

pub fn to_bbox(c: [i64; 4]) -> BBox {
    BBox::new(c[0] as f64, c[1] as f64, c[2] as f64, c[3] as f64).unwrap()
}

/// IoU of integer boxes by counting unit cells.
pub fn raster_iou(a: [i64; 4], b: [i64; 4]) -> f64 {
    let inside = |c: [i64; 4], x: i64, y: i64| x >= c[0] && x < c[2] && y >= c[1] && y < c[3];
    let (mut inter, mut union) = (0u64, 0u64);
    for y in 0..32 {
        for x in 0..32 {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    if inter == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Repeatedly takes the best remaining detection (highest score, then lowest
/// index) and discards everything of its class that overlaps it too much.
pub fn nms_oracle(boxes: &[[i64; 4]], classes: &[usize], scores: &[f64], thresh: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..boxes.len()).collect();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        let mut best = 0;
        for k in 1..alive.len() {
            let (i, b) = (alive[k], alive[best]);
            if scores[i] > scores[b] || (scores[i] == scores[b] && i < b) {
                best = k;
            }
        }
        let top = alive.remove(best);
        kept.push(top);
        alive.retain(|&i| !(classes[i] == classes[top] && raster_iou(boxes[i], boxes[top]) > thresh));
    }
    kept
}

/// Boxes with scores drawn from a small set so that ties occur.
pub fn random_dets(rng: &mut impl Rng, n: usize, num_classes: usize) -> (Vec<[i64; 4]>, Vec<usize>, Vec<f64>) {
    let boxes = (0..n).map(|_| int_box(rng)).collect();
    let classes = (0..n).map(|_| rng.random_range(1..=num_classes)).collect();
    let scores = (0..n).map(|_| f64::from(rng.random_range(1..=6u8)) / 8.0).collect();
    (boxes, classes, scores)
}

/// Number of cases where library IoU or NMS differs from the oracles.
pub fn geometry_mismatches(cases: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let n = r.random_range(0..=10);
        let (boxes, classes, scores) = random_dets(&mut r, n, 2);
        let thresh = [0.1, 0.3, 0.5, 0.7][r.random_range(0..4)];
        let iou_ok = boxes.iter().all(|&a| {
            boxes
                .iter()
                .all(|&b| iou(&to_bbox(a), &to_bbox(b)).to_bits() == raster_iou(a, b).to_bits())
        });
        let dets: Vec<Detection> = (0..n)
            .map(|i| Detection {
                bbox: to_bbox(boxes[i]),
                class_id: classes[i],
                score: scores[i],
            })
            .collect();
        let got = nms_per_class(&dets, thresh);
        let want: Vec<Detection> = nms_oracle(&boxes, &classes, &scores, thresh)
            .into_iter()
            .map(|i| dets[i])
            .collect();
        if !iou_ok || got != want {
            bad += 1;
        }
    }
    bad
}

/// All-point AP written as a sum over true positives of the best precision
/// reachable at or after that rank, plus the 11-point variant.
pub fn ap_oracle(dets: &[(usize, f64, [i64; 4])], gts: &[Vec<[i64; 4]>], thresh: f64, method: ApMethod) -> f64 {
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    if num_gt == 0 {
        return 0.0;
    }
    // Insertion sort keeps equal scores in input order.
    let mut order: Vec<usize> = Vec::new();
    for i in 0..dets.len() {
        let pos = order.iter().position(|&j| dets[j].1 < dets[i].1).unwrap_or(order.len());
        order.insert(pos, i);
    }
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::new();
    for &i in &order {
        let (img, _, b) = dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, &g) in gts[img].iter().enumerate() {
            let v = raster_iou(b, g);
            if used[img][j] || v < thresh {
                continue;
            }
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            used[img][j] = true;
        }
        tp.push(best.is_some());
    }
    let n = tp.len();
    let mut precision = vec![0.0; n];
    let mut recall = vec![0.0; n];
    let mut hits = 0.0;
    for k in 0..n {
        if tp[k] {
            hits += 1.0;
        }
        precision[k] = hits / (k + 1) as f64;
        recall[k] = hits / num_gt as f64;
    }
    match method {
        ApMethod::AllPoint => (0..n)
            .filter(|&k| tp[k])
            .map(|k| precision[k..].iter().copied().fold(0.0, f64::max) / num_gt as f64)
            .sum(),
        ApMethod::ElevenPoint => {
            let mut s = 0.0;
            for t in 0..=10 {
                let t = t as f64 / 10.0;
                let mut best = 0.0f64;
                for k in 0..n {
                    if recall[k] >= t {
                        best = best.max(precision[k]);
                    }
                }
                s += best;
            }
            s / 11.0
        }
    }
}

/// Random single-class AP case: a few images with integer GT boxes and
/// detections that are either perturbed GT or random clutter.
pub fn random_ap_case(r: &mut impl Rng) -> (Vec<(usize, f64, [i64; 4])>, Vec<Vec<[i64; 4]>>) {
    let images = r.random_range(1..=4);
    let gts: Vec<Vec<[i64; 4]>> = (0..images)
        .map(|_| (0..r.random_range(0..=3)).map(|_| int_box(r)).collect())
        .collect();
    let n = r.random_range(0..=12);
    let dets = (0..n)
        .map(|_| {
            let img = r.random_range(0..images);
            let b = if !gts[img].is_empty() && r.random_bool(0.6) {
                let g = gts[img][r.random_range(0..gts[img].len())];
                let mut c = g.map(|v| (v + r.random_range(-2..=2)).clamp(0, 32));
                if c[2] <= c[0] {
                    c[2] = (c[0] + 1).min(32);
                    c[0] = c[2] - 1;
                }
                if c[3] <= c[1] {
                    c[3] = (c[1] + 1).min(32);
                    c[1] = c[3] - 1;
                }
                c
            } else {
                int_box(r)
            };
            (img, f64::from(r.random_range(1..=5u8)) / 5.0, b)
        })
        .collect();
    (dets, gts)
}

/// Largest |library − oracle| AP over random cases, both AP methods.
pub fn ap_max_error(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (dets, gts) = random_ap_case(&mut r);
        let lib_dets: Vec<ImageDet> = dets
            .iter()
            .map(|&(image, score, b)| ImageDet {
                image,
                score,
                bbox: to_bbox(b),
            })
            .collect();
        let lib_gts: Vec<Vec<BBox>> = gts.iter().map(|g| g.iter().map(|&b| to_bbox(b)).collect()).collect();
        for method in [ApMethod::AllPoint, ApMethod::ElevenPoint] {
            let got = voc_ap(&lib_dets, &lib_gts, 0.5, method).ap;
            let want = ap_oracle(&dets, &gts, 0.5, method);
            worst = worst.max((got - want).abs());
        }
    }
    worst
}

// Scalar-loop distillation oracles. Feature maps are flat `[c][h][w]`.

pub fn attention_oracle(f: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut m = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for k in 0..c {
                s += f[k * h * w + i * w + j];
            }
            m[i * w + j] = s / c as f64;
        }
    }
    m
}

fn normalized_gram_oracle(m: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut g = vec![0.0; h * h];
    for i in 0..h {
        for j in 0..h {
            for k in 0..w {
                g[i * h + j] += m[i * w + k] * m[j * w + k];
            }
        }
    }
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    g.iter().map(|v| v / (norm + EPS)).collect()
}

pub fn pair_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let ga = normalized_gram_oracle(a, h, w);
    let gb = normalized_gram_oracle(b, h, w);
    let mut s = 0.0;
    for k in 0..h * h {
        s += (gb[k] - ga[k]).abs();
    }
    s / (h * h) as f64
}

pub fn d_fea_oracle(om: &[f64], im: &[f64], rm: &[f64], c: usize, h: usize, w: usize) -> f64 {
    let syn: Vec<f64> = (0..om.len()).map(|k| om[k] + rm[k]).collect();
    let m_om = attention_oracle(om, c, h, w);
    let m_im = attention_oracle(im, c, h, w);
    let m_syn = attention_oracle(&syn, c, h, w);
    pair_oracle(&m_om, &m_im, h, w) + pair_oracle(&m_syn, &m_im, h, w)
}

pub fn d_res_oracle(f: [&[f64]; 3], p: [&[f64]; 3], (c, h, w): (usize, usize, usize)) -> f64 {
    let [om, im, rm] = f;
    let res: Vec<f64> = (0..om.len()).map(|k| im[k] - om[k]).collect();
    let base = pair_oracle(&attention_oracle(&res, c, h, w), &attention_oracle(rm, c, h, w), h, w);
    let [pom, pim, prm] = p;
    let n = pom.len();
    let mut t1 = 0.0;
    let mut t2 = 0.0;
    for k in 0..n {
        t1 += (pim[k] - pom[k] - prm[k]).abs();
        t2 += (pim[k] - prm[k] - pom[k]).abs();
    }
    base + t1 / n as f64 + t2 / n as f64
}

fn softmax_oracle(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Logits are row-major `[n, width]`.
pub fn d_cls_oracle(om: &[f64], im: &[f64], rm: &[f64], n: usize, a: usize, b: usize) -> f64 {
    let mut total = 0.0;
    for r in 0..n {
        let im_row = &im[r * (a + b + 1)..(r + 1) * (a + b + 1)];
        let om_row = &om[r * (a + 1)..(r + 1) * (a + 1)];
        let rm_row = &rm[r * (b + 1)..(r + 1) * (b + 1)];
        let p_im = softmax_oracle(&im_row[..=a]);
        let p_om = softmax_oracle(om_row);
        let mut old = 0.0;
        for k in 0..=a {
            old += (p_im[k] - p_om[k]).powi(2);
        }
        let mut new = 0.0;
        if b > 0 {
            let q_im = softmax_oracle(&im_row[a + 1..]);
            let q_rm = softmax_oracle(&rm_row[1..]);
            for k in 0..b {
                new += (q_im[k] - q_rm[k]).powi(2);
            }
            new /= b as f64;
        }
        total += old / (a + 1) as f64 + new;
    }
    total / n as f64
}

pub fn randn(r: &mut impl Rng, n: usize) -> Vec<f64> {
    let d = rand_distr::Normal::new(0.0, 1.0).unwrap();
    (0..n).map(|_| r.sample(d)).collect()
}

pub fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Largest |library − oracle| over random inputs for the pair loss, D_fea,
/// D_res and D_cls.
pub fn distill_max_error(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (c, h, w) = (r.random_range(1..=4), r.random_range(1..=6), r.random_range(1..=6));
        let fs: Vec<Vec<f64>> = (0..3).map(|_| randn(&mut r, c * h * w)).collect();
        let (n, pp) = (r.random_range(1..=4), r.random_range(1..=3));
        let ps: Vec<Vec<f64>> = (0..3).map(|_| randn(&mut r, n * c * pp * pp)).collect();
        let (a, b) = (r.random_range(1..=4), r.random_range(0..=3));
        let l_om = randn(&mut r, n * (a + 1));
        let l_im = randn(&mut r, n * (a + b + 1));
        let l_rm = randn(&mut r, n * (b + 1));

        let mut g = Graph::new();
        let fv: Vec<_> = fs.iter().map(|f| g.constant(tensor(&[c, h, w], f.clone()))).collect();
        let pv: Vec<_> = ps.iter().map(|p| g.constant(tensor(&[n, c, pp, pp], p.clone()))).collect();
        let feats = FeatureTriple {
            om: fv[0],
            im: fv[1],
            rm: fv[2],
        };
        let pooled = PooledTriple {
            om: pv[0],
            im: pv[1],
            rm: pv[2],
        };
        let ma = g.constant(tensor(&[h, w], fs[0][..h * w].to_vec()));
        let mb = g.constant(tensor(&[h, w], fs[1][..h * w].to_vec()));
        let pair = attn_pair_loss(&mut g, ma, mb).unwrap();
        let fea = d_fea(&mut g, feats).unwrap();
        let res = d_res(&mut g, feats, pooled).unwrap();
        let logits = LogitTriple {
            om: g.constant(tensor(&[n, a + 1], l_om.clone())),
            im: g.constant(tensor(&[n, a + b + 1], l_im.clone())),
            rm: g.constant(tensor(&[n, b + 1], l_rm.clone())),
        };
        let cls = d_cls(&mut g, logits, a, b).unwrap();

        let errs = [
            g.item(pair) - pair_oracle(&fs[0][..h * w], &fs[1][..h * w], h, w),
            g.item(fea) - d_fea_oracle(&fs[0], &fs[1], &fs[2], c, h, w),
            g.item(res.total) - d_res_oracle([&fs[0], &fs[1], &fs[2]], [&ps[0], &ps[1], &ps[2]], (c, h, w)),
            g.item(cls) - d_cls_oracle(&l_om, &l_im, &l_rm, n, a, b),
        ];
        worst = errs.iter().fold(worst, |m, e| m.max(e.abs()));
    }
    worst
}

/// Cases where the pseudo-GT filter or the threshold split disagree with
/// exhaustive pairwise checks.
pub fn pseudo_filter_mismatches(cases: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let n = r.random_range(0..=8);
        let m = r.random_range(0..=3);
        let boxes: Vec<[i64; 4]> = (0..n).map(|_| int_box(&mut r)).collect();
        let gt: Vec<[i64; 4]> = (0..m).map(|_| int_box(&mut r)).collect();
        let theta_iou = [0.1, 0.3, 0.5][r.random_range(0..3)];
        let dets: Vec<Detection> = boxes
            .iter()
            .map(|&b| Detection {
                bbox: to_bbox(b),
                class_id: r.random_range(1..=3),
                score: f64::from(r.random_range(1..=19u8)) / 20.0,
            })
            .collect();
        let new_gt: Vec<(BBox, usize)> = gt.iter().map(|&b| (to_bbox(b), 4)).collect();

        let mut conflict = vec![false; n];
        for i in 0..n {
            for j in 0..m {
                if raster_iou(boxes[i], gt[j]) > theta_iou {
                    conflict[i] = true;
                }
            }
        }
        let want: Vec<Detection> = (0..n).filter(|&i| !conflict[i]).map(|i| dets[i]).collect();
        let got = filter_pseudo(&dets, &new_gt, theta_iou);

        let lo = f64::from(r.random_range(1..=9u8)) / 10.0;
        let hi = f64::from(r.random_range((lo * 10.0) as u8..=9)) / 10.0;
        let th = Thresholds {
            theta_low: lo,
            theta_high: hi,
            theta_iou,
        };
        let set = build_training_targets(&got, &new_gt, &th).unwrap();
        let rpn: Vec<BBox> = got
            .iter()
            .filter(|d| d.score > lo)
            .map(|d| d.bbox)
            .chain(new_gt.iter().map(|g| g.0))
            .collect();
        let rcnn: Vec<(BBox, usize)> = got
            .iter()
            .filter(|d| d.score > hi)
            .map(|d| (d.bbox, d.class_id))
            .chain(new_gt.iter().copied())
            .collect();
        if got != want || set.rpn_targets != rpn || set.rcnn_targets != rcnn {
            bad += 1;
        }
    }
    bad
}


fn flat(grads: &[Vec<f64>]) -> Vec<f64> {
    grads.iter().flatten().copied().collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Finetune-style loss and parameter gradients of one model, on its own graph.
fn standalone(model: &tridet::DetectorModel, image: &Tensor, targets: &Targets, rng: &mut ChaCha8Rng) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let net = model.bind(&mut g, true);
    let x = g.constant(image.clone());
    let loss = frcnn_loss(&mut g, &net, x, targets, rng).unwrap();
    let grads = g.backward(loss.total).unwrap();
    let flat = net
        .vars
        .to_vec()
        .into_iter()
        .flat_map(|v| grads.get(*v).unwrap().data().to_vec())
        .collect();
    (g.item(loss.total), flat)
}

/// Micro triple with 2 old classes and 1 new one, its image, the new-class
/// ground truth (global ids) and a confident old-class pseudo box.
pub fn algebra_fixture(seed: u64) -> (TripleNetwork, Tensor, Vec<(BBox, usize)>, Vec<Detection>) {
    let (triple, image, targets) = micro_fixture(&mut rng(seed));
    let gt_new: Vec<(BBox, usize)> = targets.im.rcnn.iter().filter(|t| t.1 == 3).copied().collect();
    let pseudo: Vec<Detection> = targets.im.rcnn.iter().filter(|t| t.1 < 3).map(|&(bbox, class_id)| Detection { bbox, class_id, score: 0.95 }).collect();
    (triple, image, gt_new, pseudo)
}

/// With every switch off, the objective's terms and gradients against a
/// plain finetune of IM on the new ground truth plus an independent RM
/// loss. Returns the largest absolute deviation.
pub fn all_off_deviation(seed: u64) -> f64 {
    let (triple, image, gt_new, pseudo) = algebra_fixture(seed);
    let cfg = TrainConfig {
        switches: LossSwitches::NONE,
        ..TrainConfig::incremental()
    };
    let targets = StepTargets::new(&pseudo, &gt_new, triple.num_old(), &cfg).unwrap();
    let out = step_gradients(&triple, &image, &targets, None, &cfg, &mut rng(seed + 1)).unwrap();

    let mut r = rng(seed + 1);
    let (ft_im, ft_im_grads) = standalone(&triple.im, &image, &Targets::from_gt(&gt_new), &mut r);
    let local: Vec<(BBox, usize)> = gt_new.iter().map(|&(b, c)| (b, c - triple.num_old())).collect();
    let (ft_rm, ft_rm_grads) = standalone(&triple.rm, &image, &Targets::from_gt(&local), &mut r);

    let l = out.losses;
    [
        (l.frcnn_im - ft_im).abs(),
        (l.frcnn_rm - ft_rm).abs(),
        l.d_fea.abs(),
        l.d_res.abs(),
        l.d_cls.abs(),
        (l.total - ft_im - ft_rm).abs(),
        max_diff(&flat(&out.im_grads), &ft_im_grads),
        max_diff(&flat(&out.rm_grads), &ft_rm_grads),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// Largest deviation of `L_all(λ)` and its gradients from
/// `L_all(0) + λ·(L_all(1) − L_all(0))` over the given λ values, with all
/// switches on and sampling plans held fixed. Also returns the distillation
/// sum at the fixture so callers can check it is not trivially zero.
pub fn lambda_affinity_deviation(seed: u64, lambdas: &[f64]) -> (f64, f64) {
    let (triple, image, gt_new, pseudo) = algebra_fixture(seed);
    let at = |lambda: f64| TrainConfig {
        lambda,
        switches: LossSwitches::ALL,
        ..TrainConfig::incremental()
    };
    let targets = StepTargets::new(&pseudo, &gt_new, triple.num_old(), &at(1.0)).unwrap();
    let first = step_gradients(&triple, &image, &targets, None, &at(1.0), &mut rng(seed + 1)).unwrap();
    let plans = first.plans.clone();
    let run = |lambda: f64| step_gradients(&triple, &image, &targets, Some(&plans), &at(lambda), &mut rng(0)).unwrap();
    let (z, one) = (run(0.0), run(1.0));
    let grads = |o: &tridet::trainer::StepOutput| [flat(&o.im_grads), flat(&o.rm_grads)].concat();
    let (gz, g1) = (grads(&z), grads(&one));
    let distill = one.losses.d_fea + one.losses.d_res + one.losses.d_cls;
    let mut worst = 0.0f64;
    for &lambda in lambdas {
        let o = run(lambda);
        let l = o.losses;
        worst = worst
            .max((l.total - (z.losses.total + lambda * (one.losses.total - z.losses.total))).abs())
            .max((l.total - (l.frcnn_im + l.frcnn_rm + lambda * (l.d_fea + l.d_res + l.d_cls))).abs())
            .max((l.frcnn_im - z.losses.frcnn_im).abs());
        let want: Vec<f64> = gz.iter().zip(&g1).map(|(a, b)| a + lambda * (b - a)).collect();
        worst = worst.max(max_diff(&grads(&o), &want));
    }
    (worst, distill)
}
