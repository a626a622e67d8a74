//! LSTM cell on the tape. Sequences backpropagate through time simply by
//! recording every step.

use super::adam::NamedParam;
use super::graph::{Graph, NodeId};
use super::real::Real;
use super::tensor::{Shape, Tensor};
use crate::error::{EattsError, Result};
use crate::rng::Rng;

/// Gate layout in the fused weight matrices: input, forget, candidate, output.
pub const GATES: usize = 4;

/// One LSTM layer's parameters. Weights are fused across the four gates:
/// `w_x` is (d_in x 4*d_h), `w_h` is (d_h x 4*d_h), `bias` is [4*d_h].
#[derive(Debug, Clone)]
pub struct LstmParams<T: Real> {
    pub w_x: Tensor<T>,
    pub w_h: Tensor<T>,
    pub bias: Tensor<T>,
    pub d_in: usize,
    pub d_h: usize,
}

impl<T: Real> LstmParams<T> {
    /// Uniform +-1/sqrt(fan_in) init with forget-gate bias +1.
    pub fn init(d_in: usize, d_h: usize, rng: &mut Rng) -> LstmParams<T> {
        let bx = 1.0 / (d_in as f64).sqrt();
        let bh = 1.0 / (d_h as f64).sqrt();
        let w_x = Tensor::uniform(Shape::matrix(d_in, GATES * d_h), bx, rng);
        let w_h = Tensor::uniform(Shape::matrix(d_h, GATES * d_h), bh, rng);
        let mut bias = Tensor::zeros(Shape::vector(GATES * d_h));
        for i in d_h..2 * d_h {
            bias.data_mut()[i] = T::ONE;
        }
        LstmParams {
            w_x,
            w_h,
            bias,
            d_in,
            d_h,
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<NamedParam<T>> {
        vec![
            NamedParam::new(format!("{prefix}.w_x"), self.w_x.clone()),
            NamedParam::new(format!("{prefix}.w_h"), self.w_h.clone()),
            NamedParam::new(format!("{prefix}.bias"), self.bias.clone()),
        ]
    }

    /// Rebuilds from a named slice in the order produced by [`Self::named`].
    pub fn from_named(params: &[NamedParam<T>], d_in: usize, d_h: usize) -> LstmParams<T> {
        LstmParams {
            w_x: params[0].value.clone(),
            w_h: params[1].value.clone(),
            bias: params[2].value.clone(),
            d_in,
            d_h,
        }
    }
}

/// Tape handles for one staged LSTM layer.
#[derive(Debug, Clone, Copy)]
pub struct LstmIds {
    pub w_x: NodeId,
    pub w_h: NodeId,
    pub bias: NodeId,
    pub d_h: usize,
}

pub fn stage_lstm<T: Real>(g: &mut Graph<T>, p: &LstmParams<T>, trainable: bool) -> LstmIds {
    LstmIds {
        w_x: g.leaf(&p.w_x.clone().requires_grad(trainable)),
        w_h: g.leaf(&p.w_h.clone().requires_grad(trainable)),
        bias: g.leaf(&p.bias.clone().requires_grad(trainable)),
        d_h: p.d_h,
    }
}

/// One cell step over a batch: x is (B x d_in), h and c are (B x d_h).
/// Returns (h', c').
pub fn lstm_cell<T: Real>(
    g: &mut Graph<T>,
    ids: &LstmIds,
    x: NodeId,
    h: NodeId,
    c: NodeId,
) -> Result<(NodeId, NodeId)> {
    let xw = g.matmul(x, ids.w_x)?;
    lstm_cell_from_pre(g, ids, xw, h, c)
}

/// Cell step where `x * w_x` has been precomputed (e.g. hoisted over all
/// timesteps as one large matmul).
pub fn lstm_cell_from_pre<T: Real>(
    g: &mut Graph<T>,
    ids: &LstmIds,
    xw: NodeId,
    h: NodeId,
    c: NodeId,
) -> Result<(NodeId, NodeId)> {
    let d_h = ids.d_h;
    if g.shape(h).dims() != g.shape(c).dims() {
        return Err(EattsError::dim(
            "lstm_cell h/c",
            g.shape(h).dims(),
            g.shape(c).dims(),
        ));
    }
    let hw = g.matmul(h, ids.w_h)?;
    let lin = g.add(xw, hw)?;
    let pre = g.broadcast_row_add(lin, ids.bias)?;
    let i_pre = g.slice_cols(pre, 0, d_h)?;
    let f_pre = g.slice_cols(pre, d_h, d_h)?;
    let g_pre = g.slice_cols(pre, 2 * d_h, d_h)?;
    let o_pre = g.slice_cols(pre, 3 * d_h, d_h)?;
    let i_gate = g.sigmoid(i_pre);
    let f_gate = g.sigmoid(f_pre);
    let cand = g.tanh(g_pre);
    let o_gate = g.sigmoid(o_pre);
    let keep = g.mul(f_gate, c)?;
    let write = g.mul(i_gate, cand)?;
    let c_next = g.add(keep, write)?;
    let c_act = g.tanh(c_next);
    let h_next = g.mul(o_gate, c_act)?;
    Ok((h_next, c_next))
}
