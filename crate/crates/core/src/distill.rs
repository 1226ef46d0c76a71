//! Distillation losses between the old, incremental and residual models.
//!
//! All losses are built on a [`Graph`] so gradients flow into whichever
//! inputs require them. Every loss is a mean over its index set.
//!
//! - [`attention_map`]: channel mean of a `[c, h, w]` feature map.
//! - [`attn_pair_loss`]: mean absolute difference between the
//!   Frobenius-normalised Gram matrices `M·Mᵀ` of two attention maps.
//! - [`d_fea`]: old↔incremental feature distillation plus the merge term
//!   comparing `F_om + F_rm` with `F_im`.
//! - [`d_res`]: residual distillation on backbone features (`F_im − F_om`
//!   against `F_rm`) and on pooled RoI features in both directions.
//! - [`d_cls`]: squared distance between the incremental model's restricted
//!   softmaxes and the old/residual models' distributions.

use crate::tensor::{Graph, Result, TensorError, Var, NORM_EPS};

/// Backbone features of the three models on the same image.
#[derive(Debug, Clone, Copy)]
pub struct FeatureTriple {
    pub om: Var,
    pub im: Var,
    pub rm: Var,
}

/// RoI-pooled features of the three models, pooled with the same RoIs.
#[derive(Debug, Clone, Copy)]
pub struct PooledTriple {
    pub om: Var,
    pub im: Var,
    pub rm: Var,
}

/// Head logits of the three models on the same RoIs:
/// `om: [n, A+1]`, `im: [n, A+B+1]`, `rm: [n, B+1]`.
#[derive(Debug, Clone, Copy)]
pub struct LogitTriple {
    pub om: Var,
    pub im: Var,
    pub rm: Var,
}

/// Both parts of the residual loss and their sum.
#[derive(Debug, Clone, Copy)]
pub struct ResidualLoss {
    pub base: Var,
    pub pool: Var,
    pub total: Var,
}

fn same_shapes(g: &Graph, op: &'static str, vars: [Var; 3]) -> Result<()> {
    let s0 = g.shape(vars[0]);
    for v in &vars[1..] {
        if g.shape(*v) != s0 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: s0.to_vec(),
                rhs: g.shape(*v).to_vec(),
            });
        }
    }
    Ok(())
}

/// `M(i, j) = mean_k F(k, i, j)` for a `[c, h, w]` feature map.
pub fn attention_map(g: &mut Graph, features: Var) -> Result<Var> {
    if g.shape(features).len() != 3 {
        return Err(TensorError::Invalid {
            op: "attention_map",
            reason: format!("expected [c, h, w], got {:?}", g.shape(features)),
        });
    }
    g.mean_axis(features, 0)
}

/// `M·Mᵀ / (‖M·Mᵀ‖_F + ε)`.
pub fn normalized_gram(g: &mut Graph, map: Var) -> Result<Var> {
    let gram = g.gram(map)?;
    let norm = g.frobenius_norm(gram);
    let denom = g.add_scalar(norm, NORM_EPS);
    g.div_scalar(gram, denom)
}

/// Mean over `h×h` entries of `|G_b − G_a|` with `G` the normalised Gram matrix.
pub fn attn_pair_loss(g: &mut Graph, m_a: Var, m_b: Var) -> Result<Var> {
    if g.shape(m_a) != g.shape(m_b) {
        return Err(TensorError::ShapeMismatch {
            op: "attn_pair_loss",
            lhs: g.shape(m_a).to_vec(),
            rhs: g.shape(m_b).to_vec(),
        });
    }
    let ga = normalized_gram(g, m_a)?;
    let gb = normalized_gram(g, m_b)?;
    let d = g.sub(gb, ga)?;
    let a = g.abs(d);
    Ok(g.mean_all(a))
}

pub fn d_fea(g: &mut Graph, f: FeatureTriple) -> Result<Var> {
    same_shapes(g, "d_fea", [f.om, f.im, f.rm])?;
    let syn = g.add(f.om, f.rm)?;
    let m_om = attention_map(g, f.om)?;
    let m_im = attention_map(g, f.im)?;
    let m_syn = attention_map(g, syn)?;
    let keep = attn_pair_loss(g, m_om, m_im)?;
    let merge = attn_pair_loss(g, m_syn, m_im)?;
    g.add(keep, merge)
}

pub fn d_res(g: &mut Graph, f: FeatureTriple, p: PooledTriple) -> Result<ResidualLoss> {
    same_shapes(g, "d_res", [f.om, f.im, f.rm])?;
    same_shapes(g, "d_res", [p.om, p.im, p.rm])?;
    let res = g.sub(f.im, f.om)?;
    let m_res = attention_map(g, res)?;
    let m_rm = attention_map(g, f.rm)?;
    let base = attn_pair_loss(g, m_res, m_rm)?;

    let im_minus_om = g.sub(p.im, p.om)?;
    let d1 = g.sub(im_minus_om, p.rm)?;
    let d1 = g.abs(d1);
    let t1 = g.mean_all(d1);
    let im_minus_rm = g.sub(p.im, p.rm)?;
    let d2 = g.sub(im_minus_rm, p.om)?;
    let d2 = g.abs(d2);
    let t2 = g.mean_all(d2);
    let pool = g.add(t1, t2)?;

    let total = g.add(base, pool)?;
    Ok(ResidualLoss { base, pool, total })
}

/// Joint classification distillation for `num_old` old and `num_new` new classes.
///
/// Old part: softmax of IM logits `0..=A` against OM's softmax. New part:
/// softmax of IM logits `A+1..=A+B` against the softmax of RM logits `1..=B`
/// (RM background excluded). Each part is averaged over its classes, the
/// sum is averaged over RoIs. With `num_new == 0` the new part is zero.
pub fn d_cls(g: &mut Graph, l: LogitTriple, num_old: usize, num_new: usize) -> Result<Var> {
    let (so, si, sr) = (g.shape(l.om).to_vec(), g.shape(l.im).to_vec(), g.shape(l.rm).to_vec());
    let widths_ok = so.len() == 2
        && si.len() == 2
        && sr.len() == 2
        && so[1] == num_old + 1
        && si[1] == num_old + num_new + 1
        && sr[1] == num_new + 1
        && so[0] == si[0]
        && sr[0] == si[0];
    if !widths_ok {
        return Err(TensorError::Invalid {
            op: "d_cls",
            reason: format!("logit shapes om {so:?}, im {si:?}, rm {sr:?} inconsistent with {num_old} old / {num_new} new classes"),
        });
    }
    let im_old = g.softmax(l.im, 1, Some((0, num_old + 1)))?;
    let om = g.softmax(l.om, 1, None)?;
    let d = g.sub(im_old, om)?;
    let sq = g.square(d);
    let mut per_roi = g.mean_axis(sq, 1)?;
    if num_new > 0 {
        let im_new = g.softmax(l.im, 1, Some((num_old + 1, num_old + num_new + 1)))?;
        let rm = g.softmax(l.rm, 1, Some((1, num_new + 1)))?;
        let d = g.sub(im_new, rm)?;
        let sq = g.square(d);
        let new_part = g.mean_axis(sq, 1)?;
        per_roi = g.add(per_roi, new_part)?;
    }
    Ok(g.mean_all(per_roi))
}
