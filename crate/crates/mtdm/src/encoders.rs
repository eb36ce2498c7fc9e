//! Neural building blocks: deep-memory RGCN, residual structural encoder,
//! GRU time encoder, reset gate and control gate.

use std::rc::Rc;

use crate::error::Result;
use crate::graph::SparseAdjacency;
use crate::scalar::{s, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Negative slope of the leaky rectifier used as the activation everywhere.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Shared residual structural encoder weights. One parameter set serves all
/// hops and both the transient and evolutional paths.
#[derive(Copy, Clone, Debug)]
pub struct ResGcnVars {
    pub w_loop: Var,
    pub w_e: Var,
    pub w_r: Var,
    pub hops: usize,
}

/// One deep-memory RGCN layer: basis-decomposed relation transforms plus a
/// self-loop weight.
#[derive(Copy, Clone, Debug)]
pub struct RgcnLayerVars {
    /// (num_relations x num_bases) mixing coefficients.
    pub coeff: Var,
    /// (num_bases x d*d) basis matrices, each row a flattened d x d block.
    pub basis: Var,
    pub w_loop: Var,
}

#[derive(Copy, Clone, Debug)]
pub struct GruVars {
    pub wz: Var,
    pub uz: Var,
    pub bz: Var,
    pub wr: Var,
    pub ur: Var,
    pub br: Var,
    pub wh: Var,
    pub uh: Var,
    pub bh: Var,
}

/// x W^T + b
pub fn linear<S: Scalar>(tape: &mut Tape<S>, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul_bt(x, w)?;
    tape.add_bias(xw, b)
}

/// Multi-layer relation-specific aggregation over the deep-memory static
/// graph. Each layer applies f(sum_r W_r e_o / |N_s| + W_loop e_s); with no
/// edges this degrades to f(W_loop e_s).
pub fn rgcn_encode<S: Scalar>(
    tape: &mut Tape<S>,
    h_init: Var,
    layers: &[RgcnLayerVars],
    adj: &Rc<SparseAdjacency>,
) -> Result<Var> {
    let slope = s::<S>(LEAKY_SLOPE);
    let mut h = h_init;
    for layer in layers {
        let w_all = tape.matmul(layer.coeff, layer.basis)?;
        let agg = tape.rgcn_aggregate(h, w_all, adj)?;
        let selfloop = tape.matmul_bt(h, layer.w_loop)?;
        let pre = tape.add(agg, selfloop)?;
        h = tape.leaky_relu(pre, slope)?;
    }
    Ok(h)
}

/// Residual structural encoder. The self-loop term is computed once from the
/// layer-0 input; each hop adds a fresh residual message on top of all
/// earlier ones before the activation.
pub fn res_gcn<S: Scalar>(
    tape: &mut Tape<S>,
    e_in: Var,
    rel_emb: Var,
    adj: &Rc<SparseAdjacency>,
    p: &ResGcnVars,
) -> Result<Var> {
    let slope = s::<S>(LEAKY_SLOPE);
    let e_loop = tape.matmul_bt(e_in, p.w_loop)?;
    let rel_mapped = tape.matmul_bt(rel_emb, p.w_r)?;
    let mut res_sum: Option<Var> = None;
    let mut cur = e_in;
    let mut out = cur;
    for _ in 0..p.hops {
        let ent_mapped = tape.matmul_bt(cur, p.w_e)?;
        let res = tape.rel_aggregate(ent_mapped, rel_mapped, adj)?;
        res_sum = Some(match res_sum {
            None => res,
            Some(acc) => tape.add(acc, res)?,
        });
        let pre = tape.add(e_loop, res_sum.unwrap())?;
        out = tape.leaky_relu(pre, slope)?;
        cur = out;
    }
    if p.hops == 0 {
        out = tape.leaky_relu(e_loop, slope)?;
    }
    Ok(out)
}

/// Standard GRU cell applied row-wise:
/// z = sig(xWz + hUz + bz), r = sig(xWr + hUr + br),
/// h~ = tanh(xWh + (r.h)Uh + bh), h' = (1-z).h + z.h~
pub fn gru_cell<S: Scalar>(tape: &mut Tape<S>, x: Var, h: Var, g: &GruVars) -> Result<Var> {
    let zx = tape.matmul_bt(x, g.wz)?;
    let zh = tape.matmul_bt(h, g.uz)?;
    let zsum = tape.add(zx, zh)?;
    let zpre = tape.add_bias(zsum, g.bz)?;
    let z = tape.sigmoid(zpre)?;

    let rx = tape.matmul_bt(x, g.wr)?;
    let rh = tape.matmul_bt(h, g.ur)?;
    let rsum = tape.add(rx, rh)?;
    let rpre = tape.add_bias(rsum, g.br)?;
    let r = tape.sigmoid(rpre)?;

    let hx = tape.matmul_bt(x, g.wh)?;
    let rh_gated = tape.mul(r, h)?;
    let hh = tape.matmul_bt(rh_gated, g.uh)?;
    let hsum = tape.add(hx, hh)?;
    let hpre = tape.add_bias(hsum, g.bh)?;
    let h_cand = tape.tanh(hpre)?;

    let keep = tape.one_minus(z)?;
    let old = tape.mul(keep, h)?;
    let new = tape.mul(z, h_cand)?;
    tape.add(old, new)
}

/// V = sig(h_gru W_V^T + b_V); out = V.h_gru + (1-V).e_deep.
pub fn reset_gate<S: Scalar>(
    tape: &mut Tape<S>,
    h_gru: Var,
    e_deep: Var,
    w_v: Var,
    b_v: Var,
) -> Result<Var> {
    let v = linear(tape, h_gru, w_v, b_v)?;
    let v = tape.sigmoid(v)?;
    let keep = tape.mul(v, h_gru)?;
    let inv = tape.one_minus(v)?;
    let back = tape.mul(inv, e_deep)?;
    tape.add(keep, back)
}

/// Output of the control gate together with the soft and effective gate
/// activations (hard mode rounds at 0.5 and detaches the gate).
pub struct ControlGateOut {
    pub fused: Var,
    pub u_soft: Var,
    pub u_used: Var,
}

/// U = sig(h_tln W_U^T + b_U); out = U.h_tln + (1-U).h_tren.
pub fn control_gate<S: Scalar>(
    tape: &mut Tape<S>,
    h_tln: Var,
    h_tren: Var,
    w_u: Var,
    b_u: Var,
    hard: bool,
) -> Result<ControlGateOut> {
    let upre = linear(tape, h_tln, w_u, b_u)?;
    let u_soft = tape.sigmoid(upre)?;
    let u_used = if hard {
        let rounded = round01(tape.value(u_soft));
        tape.constant(rounded)
    } else {
        u_soft
    };
    let keep = tape.mul(u_used, h_tln)?;
    let inv = tape.one_minus(u_used)?;
    let back = tape.mul(inv, h_tren)?;
    let fused = tape.add(keep, back)?;
    Ok(ControlGateOut {
        fused,
        u_soft,
        u_used,
    })
}

/// Threshold a gate activation to {0, 1} at 0.5.
pub fn round01<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let half = s::<S>(0.5);
    let data = t
        .data()
        .iter()
        .map(|&x| if x >= half { S::one() } else { S::zero() })
        .collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}
