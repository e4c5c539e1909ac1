// SPDX-License-Identifier: MIT OR Apache-2.0

//! Adapter forward pass on the differentiation tape.

use super::adapter::EditSignal;
use super::params::{Mlp2, VeadParams};
use crate::numerics::{DiffGraph, Scalar, Tensor, Var};

pub struct Mlp2Vars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub struct VeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
    pub mu1: Mlp2Vars,
    pub mu2: Mlp2Vars,
}

impl VeadVars {
    /// Handles in the order of [`VeadParams::named`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.w1, self.b1, self.w2, self.b2, self.w3, self.b3];
        for m in [&self.mu1, &self.mu2] {
            out.extend([m.w1, m.b1, m.w2, m.b2]);
        }
        out
    }
}

/// Per-signal quantities shared by every sequence adapted with the same signal.
#[derive(Clone, Copy)]
pub struct SignalVars {
    pub keys: Var,
    pub values: Var,
    /// `1 x d_a` mapper feature of the last edit-prompt state.
    pub f2: Var,
}

/// Adapter output for one visual block.
#[derive(Clone, Copy)]
pub struct AdaptedVars {
    pub h: Var,
    /// `1 x N_v` mapper logits.
    pub im_logits: Var,
}

fn mlp_graph<T: Scalar>(g: &mut DiffGraph<T>, m: &Mlp2Vars, x: Var) -> Var {
    let z = g.matmul(x, m.w1);
    let z = g.add_row(z, m.b1);
    let z = g.relu(z);
    let y = g.matmul(z, m.w2);
    g.add_row(y, m.b2)
}

fn leaf<T: Scalar>(g: &mut DiffGraph<T>, t: &Tensor<T>, trainable: bool) -> Var {
    if trainable {
        g.param(t.clone())
    } else {
        g.constant(t.clone())
    }
}

impl<T: Scalar> Mlp2<T> {
    fn to_graph(&self, g: &mut DiffGraph<T>, trainable: bool) -> Mlp2Vars {
        Mlp2Vars {
            w1: leaf(g, &self.w1, trainable),
            b1: leaf(g, &self.b1, trainable),
            w2: leaf(g, &self.w2, trainable),
            b2: leaf(g, &self.b2, trainable),
        }
    }
}

impl<T: Scalar> VeadParams<T> {
    pub fn to_graph(&self, g: &mut DiffGraph<T>, trainable: bool) -> VeadVars {
        VeadVars {
            w1: leaf(g, &self.w1, trainable),
            b1: leaf(g, &self.b1, trainable),
            w2: leaf(g, &self.w2, trainable),
            b2: leaf(g, &self.b2, trainable),
            w3: leaf(g, &self.w3, trainable),
            b3: leaf(g, &self.b3, trainable),
            mu1: self.mu1.to_graph(g, trainable),
            mu2: self.mu2.to_graph(g, trainable),
        }
    }
}

pub fn signal_graph<T: Scalar>(g: &mut DiffGraph<T>, vv: &VeadVars, signal: &EditSignal<T>) -> SignalVars {
    let hbar = g.constant(signal.hbar.clone());
    let k = g.matmul(hbar, vv.w2);
    let keys = g.add_row(k, vv.b2);
    let v = g.matmul(hbar, vv.w3);
    let values = g.add_row(v, vv.b3);
    let last = g.slice_rows(hbar, signal.n_vt, signal.n_vt + 1);
    let f2 = mlp_graph(g, &vv.mu2, last);
    SignalVars { keys, values, f2 }
}

/// Adapts the visual block `h_v` (`N_v x d_h`).
pub fn adapt_graph<T: Scalar>(
    g: &mut DiffGraph<T>,
    vead: &VeadParams<T>,
    vv: &VeadVars,
    sv: &SignalVars,
    h_v: Var,
) -> AdaptedVars {
    let f1 = mlp_graph(g, &vv.mu1, h_v);
    let im_logits = g.matmul_t(sv.f2, f1);
    if vead.drop_ca {
        return AdaptedVars { h: h_v, im_logits };
    }
    let q = g.matmul(h_v, vv.w1);
    let q = g.add_row(q, vv.b1);
    let s = g.matmul_t(q, sv.keys);
    let s = g.scale(s, T::one() / T::from_usize_lossy(vead.d_a).sqrt());
    let p = g.softmax_rows(s);
    let h_dot = g.matmul(p, sv.values);
    let delta = if vead.drop_im {
        h_dot
    } else {
        let c = g.sigmoid(im_logits);
        g.scale_rows(h_dot, c)
    };
    AdaptedVars {
        h: g.add(h_v, delta),
        im_logits,
    }
}
