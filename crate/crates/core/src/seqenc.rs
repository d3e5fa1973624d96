//! Per-channel LSTM encoders.

use crate::error::Result;
use crate::ndtensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Single-layer LSTM over a scalar input stream. Gate blocks in the stacked
/// weights are ordered input, forget, candidate, output.
#[derive(Debug, Clone)]
pub struct ChannelLstm {
    hidden: usize,
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
}

/// Hidden states of one channel: each step as a `[d_1, 1]` column, and all of
/// them side by side as `[d_1, T]`.
#[derive(Debug, Clone)]
pub struct HiddenSeq {
    pub steps: Vec<Var>,
    pub matrix: Var,
}

impl HiddenSeq {
    pub fn last(&self) -> Var {
        *self.steps.last().expect("non-empty sequence")
    }
}

impl ChannelLstm {
    /// Registers `seqenc/ch{channel}/{w_ih,w_hh,b}` drawn from
    /// `U[-1/sqrt(d), 1/sqrt(d)]`.
    pub fn new(store: &mut ParamStore, channel: usize, hidden: usize, seed: u64) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let prefix = format!("seqenc/ch{channel}");
        let w_ih = store.register_uniform(&format!("{prefix}/w_ih"), &[4 * hidden, 1], bound, seed)?;
        let w_hh = store.register_uniform(&format!("{prefix}/w_hh"), &[4 * hidden, hidden], bound, seed)?;
        let bias = store.register_uniform(&format!("{prefix}/b"), &[4 * hidden, 1], bound, seed)?;
        Ok(ChannelLstm { hidden, w_ih, w_hh, bias })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> [ParamId; 3] {
        [self.w_ih, self.w_hh, self.bias]
    }

    /// Run the recurrence from zero hidden and cell state.
    pub fn forward(&self, tape: &mut Tape, series: &[f64]) -> Result<HiddenSeq> {
        let d = self.hidden;
        let w_ih = tape.param(self.w_ih);
        let w_hh = tape.param(self.w_hh);
        let bias = tape.param(self.bias);
        let mut h = tape.constant(Tensor::zeros(&[d, 1]));
        let mut c = tape.constant(Tensor::zeros(&[d, 1]));
        let mut steps = Vec::with_capacity(series.len());
        for &x in series {
            let rec = tape.matmul(w_hh, h)?;
            let inp = tape.scale(w_ih, x)?;
            let z = tape.add(rec, inp)?;
            let z = tape.add(z, bias)?;
            let i = tape.narrow(z, 0, 0, d)?;
            let f = tape.narrow(z, 0, d, d)?;
            let g = tape.narrow(z, 0, 2 * d, d)?;
            let o = tape.narrow(z, 0, 3 * d, d)?;
            let i = tape.sigmoid(i)?;
            let f = tape.sigmoid(f)?;
            let g = tape.tanh(g)?;
            let o = tape.sigmoid(o)?;
            let keep = tape.mul(f, c)?;
            let write = tape.mul(i, g)?;
            c = tape.add(keep, write)?;
            let squashed = tape.tanh(c)?;
            h = tape.mul(o, squashed)?;
            steps.push(h);
        }
        let matrix = tape.concat(&steps, 1)?;
        Ok(HiddenSeq { steps, matrix })
    }
}
