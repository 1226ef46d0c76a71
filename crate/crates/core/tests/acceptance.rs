//! Acceptance checks, one line per criterion. Runs as a plain binary so the
//! lines are printed even when every check passes; exits non-zero if any
//! criterion fails.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use tridet::detector::{param_hash, save_checkpoint};
use tridet::distill::{d_cls, d_fea, d_res, FeatureTriple, LogitTriple, PooledTriple};
use tridet::eval::{evaluate_model, EvalOptions};
use tridet::gradsuite::{run_suite, TOLERANCE};
use tridet::synthdata::{default_classes, generate_cooccurring, generate_dataset, incremental_subset, Scene};
use tridet::trainer::{train_base, train_incremental, LossSwitches, TrainConfig, TripleNetwork};
use tridet::{DetectorConfig, DetectorModel, Graph};

use common::{randn, rng, tensor};

const GRAD_SECS: f64 = 120.0;
const ZERO_TOL: f64 = 1e-12;
const AP_TOL: f64 = 1e-9;
const DISTILL_TOL: f64 = 1e-12;
const DETERMINISM_SECS: f64 = 600.0;
const FORGETTING_DROP: f64 = 0.30;
const RETENTION_MARGIN: f64 = 0.10;
const RETENTION_TO_OM: f64 = 0.15;
const PROTOCOL_SECS: f64 = 45.0 * 60.0;
const THRESHOLD_SLACK: f64 = 0.01;
const ALGEBRA_TOL: f64 = 1e-12;

const SEEDS: [u64; 3] = [0, 1, 2];
const BASE_IMAGES: usize = 200;
const INCREMENTAL_IMAGES: usize = 100;
const TEST_IMAGES: usize = 100;
const OLD: [usize; 3] = [1, 2, 3];
const NEW: [usize; 1] = [4];

struct Run {
    map_old: f64,
    map_new: f64,
    om_hash_after: String,
}

struct Fixture {
    om: DetectorModel,
    om_hash: String,
    om_map_old: f64,
    incremental: Vec<Scene>,
    runs: BTreeMap<(&'static str, u64), Run>,
    /// The full-method triple of the first seed, kept for the rerun check.
    first_full: TripleNetwork,
    first_full_secs: f64,
    secs: f64,
}

fn variants() -> [(&'static str, LossSwitches); 3] {
    [
        ("finetune", LossSwitches::NONE),
        ("full", LossSwitches::ALL),
        ("single", LossSwitches { two_threshold: false, ..LossSwitches::ALL }),
    ]
}

fn build_fixture() -> Fixture {
    let start = Instant::now();
    let classes = default_classes();
    let base = generate_dataset(&classes[..3], BASE_IMAGES, 1).expect("base scenes");
    let inc = generate_cooccurring(&classes[3..4], &classes[..3], INCREMENTAL_IMAGES, 0.5, 3).expect("incremental scenes");
    let incremental = incremental_subset(&inc, &NEW);
    let test = generate_dataset(&classes[..4], TEST_IMAGES, 4).expect("test scenes");
    let opts = EvalOptions::default();

    eprintln!("training the old model on {} scenes", base.len());
    let (om, _) = train_base(&base, OLD.len(), DetectorConfig::default(), &TrainConfig::base(), None).expect("base training");
    let om_hash = param_hash(&om);
    let om_map_old = evaluate_model(&om, &test, &OLD, &[], &opts).expect("evaluation").map_old;
    eprintln!("old model: old-class mAP {om_map_old:.4}");

    let mut runs = BTreeMap::new();
    let mut first_full = None;
    let mut first_full_secs = 0.0;
    for (name, switches) in variants() {
        for seed in SEEDS {
            let t = Instant::now();
            let cfg = TrainConfig { switches, seed, ..TrainConfig::incremental() };
            let (triple, _) = train_incremental(om.clone(), &incremental, &cfg, None).expect("incremental training");
            let secs = t.elapsed().as_secs_f64();
            let rep = evaluate_model(&triple.im, &test, &OLD, &NEW, &opts).expect("evaluation");
            eprintln!("{name} seed {seed}: old {:.4} new {:.4} ({secs:.0} s)", rep.map_old, rep.map_new);
            runs.insert(
                (name, seed),
                Run {
                    map_old: rep.map_old,
                    map_new: rep.map_new,
                    om_hash_after: param_hash(triple.om()),
                },
            );
            if name == "full" && seed == SEEDS[0] {
                first_full = Some(triple);
                first_full_secs = secs;
            }
        }
    }
    Fixture {
        om,
        om_hash,
        om_map_old,
        incremental,
        runs,
        first_full: first_full.expect("full run"),
        first_full_secs,
        secs: start.elapsed().as_secs_f64(),
    }
}

impl Fixture {
    fn mean(&self, variant: &str, f: fn(&Run) -> f64) -> f64 {
        SEEDS.iter().map(|s| f(&self.runs[&(variant, *s)])).sum::<f64>() / SEEDS.len() as f64
    }

    fn per_seed(&self, variant: &str) -> String {
        SEEDS
            .iter()
            .map(|s| format!("{:.3}", self.runs[&(variant, *s)].map_old))
            .collect::<Vec<_>>()
            .join("/")
    }
}

fn gradient_suite() -> (bool, String) {
    let t = Instant::now();
    let entries = run_suite(10, 0).expect("gradient suite runs");
    let secs = t.elapsed().as_secs_f64();
    let worst = entries.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).expect("entries");
    let min_instances = entries.iter().map(|e| e.instances).min().unwrap_or(0);
    let ok = entries.iter().all(|e| e.passed()) && worst.max_rel_error < TOLERANCE && min_instances >= 10 && secs < GRAD_SECS;
    (
        ok,
        format!(
            "gradient suite: {} checks, >= {min_instances} instances each, worst {} at {:.2e} (limit {TOLERANCE:e}), {secs:.1} s (limit {GRAD_SECS} s)",
            entries.len(),
            worst.name,
            worst.max_rel_error
        ),
    )
}

fn zero_cases() -> (bool, String) {
    let mut r = rng(77);
    let mut worst = [0.0f64; 3];
    for _ in 0..20 {
        let shape = [4, 6, 6];
        let f_om = randn(&mut r, 144);
        let f_im = randn(&mut r, 144);
        let mut g = Graph::new();
        let om = g.constant(tensor(&shape, f_om.clone()));
        let zero = g.constant(tensor(&shape, vec![0.0; 144]));
        let fea = d_fea(&mut g, FeatureTriple { om, im: om, rm: zero }).expect("d_fea");
        worst[0] = worst[0].max(g.item(fea).abs());

        let im = g.constant(tensor(&shape, f_im.clone()));
        let res: Vec<f64> = f_im.iter().zip(&f_om).map(|(a, b)| a - b).collect();
        let rm = g.constant(tensor(&shape, res));
        let p_om = randn(&mut r, 3 * 4 * 4);
        let p_rm = randn(&mut r, 3 * 4 * 4);
        let p_im: Vec<f64> = p_om.iter().zip(&p_rm).map(|(a, b)| a + b).collect();
        let ps = [p_om, p_im, p_rm].map(|p| g.constant(tensor(&[3, 4, 2, 2], p)));
        let d = d_res(&mut g, FeatureTriple { om, im, rm }, PooledTriple { om: ps[0], im: ps[1], rm: ps[2] }).expect("d_res");
        worst[1] = worst[1].max(g.item(d.total).abs());

        let (n, a, b) = (5, 3, 2);
        let lo = randn(&mut r, n * (a + 1));
        let lr = randn(&mut r, n * (b + 1));
        let mut li = Vec::new();
        for k in 0..n {
            li.extend(&lo[k * (a + 1)..(k + 1) * (a + 1)]);
            li.extend(&lr[k * (b + 1) + 1..(k + 1) * (b + 1)]);
        }
        let l = LogitTriple {
            om: g.constant(tensor(&[n, a + 1], lo)),
            im: g.constant(tensor(&[n, a + b + 1], li)),
            rm: g.constant(tensor(&[n, b + 1], lr)),
        };
        let c = d_cls(&mut g, l, a, b).expect("d_cls");
        worst[2] = worst[2].max(g.item(c).abs());
    }
    let ok = worst.iter().all(|w| *w < ZERO_TOL);
    (
        ok,
        format!(
            "zero cases over 20 draws: d_fea {:.1e}, d_res {:.1e}, d_cls {:.1e} (limit {ZERO_TOL:e})",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn oracles() -> (bool, String) {
    let geo = common::geometry_mismatches(1000, 101);
    let ap = common::ap_max_error(500, 102);
    let dist = common::distill_max_error(500, 103);
    let filt = common::pseudo_filter_mismatches(1000, 104);
    let ok = geo == 0 && ap < AP_TOL && dist < DISTILL_TOL && filt == 0;
    (
        ok,
        format!(
            "oracles: IoU/NMS 0 of 1000 expected, got {geo} mismatches; AP max dev {ap:.1e} over 500 (limit {AP_TOL:e}); distill max dev {dist:.1e} (limit {DISTILL_TOL:e}); pseudo filter {filt} mismatches of 1000"
        ),
    )
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .expect("checkpoint dir")
        .map(|e| {
            let e = e.expect("dir entry");
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).expect("checkpoint file"))
        })
        .collect()
}

fn determinism(fx: &Fixture) -> (bool, String) {
    let t = Instant::now();
    let cfg = TrainConfig { seed: SEEDS[0], ..TrainConfig::incremental() };
    let (again, _) = train_incremental(fx.om.clone(), &fx.incremental, &cfg, None).expect("rerun");
    let secs = fx.first_full_secs + t.elapsed().as_secs_f64();

    let tmp = tempfile::tempdir().expect("tempdir");
    let mut identical = true;
    for (name, a, b) in [("im", &fx.first_full.im, &again.im), ("rm", &fx.first_full.rm, &again.rm)] {
        let (pa, pb) = (tmp.path().join(format!("{name}-a")), tmp.path().join(format!("{name}-b")));
        save_checkpoint(a, &pa).expect("save");
        save_checkpoint(b, &pb).expect("save");
        identical &= dir_bytes(&pa) == dir_bytes(&pb);
    }
    let frozen = fx.runs.values().all(|r| r.om_hash_after == fx.om_hash)
        && param_hash(again.om()) == fx.om_hash
        && param_hash(&fx.om) == fx.om_hash;
    let ok = identical && frozen && secs < DETERMINISM_SECS;
    (
        ok,
        format!(
            "frozen old model across {} runs: {frozen}; rerun checkpoints bit-identical: {identical}; two runs {secs:.0} s (limit {DETERMINISM_SECS} s)",
            fx.runs.len() + 1
        ),
    )
}

fn forgetting(fx: &Fixture) -> (bool, String) {
    let om = fx.om_map_old;
    let ft = fx.mean("finetune", |r| r.map_old);
    let full = fx.mean("full", |r| r.map_old);
    let a = om - ft > FORGETTING_DROP;
    let b = full >= ft + RETENTION_MARGIN && om - full <= RETENTION_TO_OM;
    let ok = a && b && fx.secs < PROTOCOL_SECS;
    (
        ok,
        format!(
            "forgetting gap: old model {om:.3}, finetune {ft:.3} [{}] (drop {:.3}, need > {FORGETTING_DROP}), full {full:.3} [{}] (+{:.3} over finetune, need >= {RETENTION_MARGIN}; {:.3} below old model, need <= {RETENTION_TO_OM}); full-method new-class mAP {:.3}; protocol {:.0} s (limit {PROTOCOL_SECS} s)",
            fx.per_seed("finetune"),
            om - ft,
            fx.per_seed("full"),
            full - ft,
            om - full,
            fx.mean("full", |r| r.map_new),
            fx.secs
        ),
    )
}

fn threshold_ablation(fx: &Fixture) -> (bool, String) {
    let two = fx.mean("full", |r| r.map_old);
    let single = fx.mean("single", |r| r.map_old);
    let ok = two >= single - THRESHOLD_SLACK;
    (
        ok,
        format!(
            "threshold ablation: two-threshold (0.1, 0.9) old mAP {two:.3} [{}], single (0.5) {single:.3} [{}], difference {:+.3} (need >= -{THRESHOLD_SLACK})",
            fx.per_seed("full"),
            fx.per_seed("single"),
            two - single
        ),
    )
}

fn switch_algebra() -> (bool, String) {
    let off = (0..5).map(common::all_off_deviation).fold(0.0, f64::max);
    let (aff, distill) = common::lambda_affinity_deviation(5, &[0.0, 0.5, 1.0, 2.0]);
    let ok = off < ALGEBRA_TOL && aff < ALGEBRA_TOL && distill > 0.0;
    (
        ok,
        format!(
            "switch algebra: all-off vs finetune max dev {off:.1e} over 5 batches; lambda affinity at {{0, 0.5, 1, 2}} max dev {aff:.1e} (limit {ALGEBRA_TOL:e}, distillation sum {distill:.3})"
        ),
    )
}

fn main() {
    let start = Instant::now();
    let mut failed = 0;
    let mut report = |n: usize, (ok, msg): (bool, String)| {
        println!("{} criterion {n}: {msg}", if ok { "PASS" } else { "FAIL" });
        failed += usize::from(!ok);
    };
    report(1, gradient_suite());
    report(2, zero_cases());
    report(3, oracles());
    let fx = build_fixture();
    report(4, determinism(&fx));
    report(5, forgetting(&fx));
    report(6, threshold_ablation(&fx));
    report(7, switch_algebra());
    println!("acceptance: {} of 7 criteria passed in {:.0} s", 7 - failed, start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
