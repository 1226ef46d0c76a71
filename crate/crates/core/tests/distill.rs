mod common;

use common::{randn, rng, tensor};
use proptest::prelude::*;
use tridet::distill::{attention_map, attn_pair_loss, d_cls, d_fea, d_res, FeatureTriple, LogitTriple, PooledTriple};
use tridet::{Graph, Tensor};

#[test]
fn losses_match_scalar_oracles() {
    let worst = common::distill_max_error(300, 21);
    assert!(worst < 1e-12, "max deviation {worst:e}");
}

#[test]
fn attention_map_matches_oracle_on_4x5x5() {
    let mut r = rng(3);
    let f = randn(&mut r, 100);
    let mut g = Graph::new();
    let v = g.constant(tensor(&[4, 5, 5], f.clone()));
    let m = attention_map(&mut g, v).unwrap();
    let want = common::attention_oracle(&f, 4, 5, 5);
    for (a, b) in g.value(m).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn pair_loss_on_fixed_2x2_maps() {
    let a = [1.0, 2.0, 3.0, 4.0];
    let b = [0.5, -1.0, 2.0, 0.0];
    let mut g = Graph::new();
    let va = g.constant(tensor(&[2, 2], a.to_vec()));
    let vb = g.constant(tensor(&[2, 2], b.to_vec()));
    let l = attn_pair_loss(&mut g, va, vb).unwrap();
    // Gram of a: [[5, 11], [11, 25]], norm sqrt(892); gram of b: [[1.25, 1], [1, 4]], norm sqrt(19.5625).
    let na = 892f64.sqrt();
    let nb = 19.5625f64.sqrt();
    let want = ((1.25 / nb - 5.0 / na).abs() + 2.0 * (1.0 / nb - 11.0 / na).abs() + (4.0 / nb - 25.0 / na).abs()) / 4.0;
    assert!((g.item(l) - want).abs() < 1e-12);
    assert!((g.item(l) - common::pair_oracle(&a, &b, 2, 2)).abs() < 1e-12);
}

#[test]
fn d_cls_one_roi_fixed_logits() {
    let om = [0.2, -0.4, 1.0];
    let im = [0.1, 0.3, -0.2, 0.7];
    let rm = [2.0, -1.0];
    let mut g = Graph::new();
    let l = LogitTriple {
        om: g.constant(tensor(&[1, 3], om.to_vec())),
        im: g.constant(tensor(&[1, 4], im.to_vec())),
        rm: g.constant(tensor(&[1, 2], rm.to_vec())),
    };
    let v = d_cls(&mut g, l, 2, 1).unwrap();
    // With one new class both restricted softmaxes are exactly 1, so only the old part remains.
    let sm = |x: &[f64]| {
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        x.iter().map(|v| v.exp() / z).collect::<Vec<_>>()
    };
    let (p, q) = (sm(&im[..3]), sm(&om));
    let want = (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>() / 3.0;
    assert!((g.item(v) - want).abs() < 1e-12);
}

fn triple(g: &mut Graph, om: &[f64], im: &[f64], rm: &[f64], shape: &[usize]) -> FeatureTriple {
    FeatureTriple {
        om: g.constant(tensor(shape, om.to_vec())),
        im: g.constant(tensor(shape, im.to_vec())),
        rm: g.constant(tensor(shape, rm.to_vec())),
    }
}

#[test]
fn zero_cases() {
    let mut r = rng(5);
    let shape = [3, 4, 4];
    let f = randn(&mut r, 48);
    let other = randn(&mut r, 48);
    let zeros = vec![0.0; 48];
    let mut g = Graph::new();

    let t = triple(&mut g, &f, &f, &zeros, &shape);
    let v = d_fea(&mut g, t).unwrap();
    assert!(g.item(v).abs() < 1e-12);

    // With f_rm = 0 the merged feature equals f_om, so both terms coincide.
    let t = triple(&mut g, &f, &other, &zeros, &shape);
    let v = d_fea(&mut g, t).unwrap();
    let m_om = attention_map(&mut g, t.om).unwrap();
    let m_im = attention_map(&mut g, t.im).unwrap();
    let keep = attn_pair_loss(&mut g, m_om, m_im).unwrap();
    assert!((g.item(v) - 2.0 * g.item(keep)).abs() < 1e-15);

    let res: Vec<f64> = other.iter().zip(&f).map(|(a, b)| a - b).collect();
    let t = triple(&mut g, &f, &other, &res, &shape);
    let p_om = randn(&mut r, 2 * 3 * 4);
    let p_rm = randn(&mut r, 2 * 3 * 4);
    let p_im: Vec<f64> = p_om.iter().zip(&p_rm).map(|(a, b)| a + b).collect();
    let p = PooledTriple {
        om: g.constant(tensor(&[2, 3, 2, 2], p_om)),
        im: g.constant(tensor(&[2, 3, 2, 2], p_im.clone())),
        rm: g.constant(tensor(&[2, 3, 2, 2], p_rm)),
    };
    let v = d_res(&mut g, t, p).unwrap();
    assert!(g.item(v.total).abs() < 1e-12);

    let zero_p = g.constant(Tensor::zeros(vec![2, 3, 2, 2]));
    let p = PooledTriple { om: zero_p, im: p.im, rm: zero_p };
    let v = d_res(&mut g, t, p).unwrap();
    let mean_abs = p_im.iter().map(|x| x.abs()).sum::<f64>() / p_im.len() as f64;
    assert!((g.item(v.pool) - 2.0 * mean_abs).abs() < 1e-12);

    let (a, b, n) = (3, 2, 4);
    let om = randn(&mut r, n * (a + 1));
    let rm = randn(&mut r, n * (b + 1));
    let mut im = Vec::new();
    for k in 0..n {
        im.extend(om[k * (a + 1)..(k + 1) * (a + 1)].iter().map(|v| v + 0.7));
        im.extend(&rm[k * (b + 1) + 1..(k + 1) * (b + 1)]);
    }
    let l = LogitTriple {
        om: g.constant(tensor(&[n, a + 1], om)),
        im: g.constant(tensor(&[n, a + b + 1], im)),
        rm: g.constant(tensor(&[n, b + 1], rm)),
    };
    let v = d_cls(&mut g, l, a, b).unwrap();
    assert!(g.item(v).abs() < 1e-12);

    let l = LogitTriple {
        om: g.constant(Tensor::zeros(vec![n, a + 1])),
        im: g.constant(Tensor::zeros(vec![n, a + b + 1])),
        rm: g.constant(Tensor::zeros(vec![n, b + 1])),
    };
    let v = d_cls(&mut g, l, a, b).unwrap();
    assert_eq!(g.item(v), 0.0);
}

#[test]
fn zero_maps_are_finite() {
    let mut g = Graph::new();
    let z = g.leaf(Tensor::zeros(vec![3, 3]), true);
    let l = attn_pair_loss(&mut g, z, z).unwrap();
    assert_eq!(g.item(l), 0.0);
    let grads = g.backward(l).unwrap();
    assert!(grads.get(z).unwrap().is_finite());
}

#[test]
fn shape_mismatch_is_rejected() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(vec![2, 3, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3, 4]));
    assert!(d_fea(&mut g, FeatureTriple { om: a, im: a, rm: b }).is_err());
    let l = g.constant(Tensor::zeros(vec![1, 3]));
    assert!(d_cls(&mut g, LogitTriple { om: l, im: l, rm: l }, 2, 1).is_err());
}

fn map(h: usize, w: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, h * w)
}

proptest! {
    #[test]
    fn pair_loss_symmetric_nonnegative_scale_invariant(a in map(4, 3), b in map(4, 3), s in 0.1..10.0f64) {
        let mut g = Graph::new();
        let va = g.constant(tensor(&[4, 3], a.clone()));
        let vb = g.constant(tensor(&[4, 3], b));
        let ab = attn_pair_loss(&mut g, va, vb).unwrap();
        let ba = attn_pair_loss(&mut g, vb, va).unwrap();
        let sa = g.scale(va, s);
        let sab = attn_pair_loss(&mut g, sa, vb).unwrap();
        prop_assert!(g.item(ab) >= 0.0);
        prop_assert_eq!(g.item(ab), g.item(ba));
        prop_assume!(a.iter().map(|x| x * x).sum::<f64>() > 1e-3);
        prop_assert!((g.item(ab) - g.item(sab)).abs() < 1e-9);
    }

    #[test]
    fn distill_losses_nonnegative(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut g = Graph::new();
        let fs: Vec<Vec<f64>> = (0..3).map(|_| randn(&mut r, 2 * 3 * 3)).collect();
        let t = triple(&mut g, &fs[0], &fs[1], &fs[2], &[2, 3, 3]);
        let ps: Vec<_> = (0..3).map(|_| g.constant(tensor(&[1, 2, 2, 2], randn(&mut r, 8)))).collect();
        let fea = d_fea(&mut g, t).unwrap();
        let res = d_res(&mut g, t, PooledTriple { om: ps[0], im: ps[1], rm: ps[2] }).unwrap();
        prop_assert!(g.item(fea) >= 0.0);
        prop_assert!(g.item(res.base) >= 0.0 && g.item(res.pool) >= 0.0);
        prop_assert!((g.item(res.total) - g.item(res.base) - g.item(res.pool)).abs() < 1e-15);
    }
}
