//! Harmonic β-attention: per-channel key-query attention whose score
//! temperature carries a learned weighted harmonic mean of a time-decay term
//! and an observation-significance term.

use crate::error::{Error, Result};
use crate::ndtensor::{sigmoid, ParamId, ParamStore, ReduceKind, Tape, Tensor, Unary, Var};
use crate::seqenc::HiddenSeq;

/// Smallest magnitude allowed for the score denominator.
pub const DENOM_FLOOR: f64 = 1e-8;

/// `1 - Δt / max(Δt)` with `Δt = T - t` and `max(Δt) = T`, for 1-based `t`;
/// computed as the algebraically equal `t / T`.
pub fn time_decay(t: usize, len: usize) -> f64 {
    t as f64 / len as f64
}

/// `σ(S_t) / σ(max_τ |S_τ|)` for every step of one channel.
pub fn significance(series: &[f64]) -> Vec<f64> {
    let peak = Tensor::vector(series.to_vec()).reduce(ReduceKind::MaxAbs, None).map_or(0.0, |t| t.item());
    let denom = sigmoid(peak);
    series.iter().map(|&v| sigmoid(v) / denom).collect()
}

/// `(1 + β) d o / (β d + o)`: the weighted harmonic mean of `d` and `o`.
///
/// Evaluated as `(1 + β) d / (β (d / o) + 1)` (`o > 0` always), which returns
/// `d` bit-exactly at `β = 0`.
pub fn harmonic_weight(decay: f64, significance: f64, beta: f64) -> f64 {
    (1.0 + beta) * decay / (beta * (decay / significance) + 1.0)
}

/// `β_{n,t}` for every step of one channel at a fixed trade-off `beta`.
pub fn harmonic_weights(series: &[f64], beta: f64) -> Vec<f64> {
    let len = series.len();
    significance(series)
        .into_iter()
        .enumerate()
        .map(|(i, o)| harmonic_weight(time_decay(i + 1, len), o, beta))
        .collect()
}

/// Differentiable `β_{n,t}` as a `[1, T]` row. The decay and significance
/// statistics are constants; gradient reaches only `beta`.
pub fn harmonic_weights_on_tape(tape: &mut Tape, beta: Var, series: &[f64]) -> Result<Var> {
    let len = series.len();
    let decay: Vec<f64> = (1..=len).map(|t| time_decay(t, len)).collect();
    let ratio: Vec<f64> = decay.iter().zip(significance(series)).map(|(d, o)| d / o).collect();
    let decay = tape.constant(Tensor::row(decay));
    let ratio = tape.constant(Tensor::row(ratio));
    let one_plus = tape.shift(beta, 1.0)?;
    let num = tape.mul(one_plus, decay)?;
    let scaled = tape.mul(beta, ratio)?;
    let den = tape.shift(scaled, 1.0)?;
    tape.div(num, den)
}

/// `θ_t = tanh(s_t / guard(γ · log(c + 1 - σ(s_t)) · β_t · T))` for a `[1, T]`
/// row of raw scores `s`.
pub fn harmonic_theta(tape: &mut Tape, scores: Var, gamma: Var, betas: Var, c: f64) -> Result<Var> {
    let len = tape.shape(scores)[1];
    let sig = tape.sigmoid(scores)?;
    let flipped = tape.neg(sig)?;
    let inner = tape.shift(flipped, c + 1.0)?;
    let log_term = tape.log(inner)?;
    let den = tape.mul(log_term, betas)?;
    let den = tape.mul(gamma, den)?;
    let den = tape.scale(den, len as f64)?;
    let den = tape.unary(Unary::MagnitudeFloor(DENOM_FLOOR), den)?;
    let ratio = tape.div(scores, den)?;
    tape.tanh(ratio)
}

/// Per-channel attention pooling. With `harmonic` off this is the plain
/// scaled key-query attention used by the ablation.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    d2: usize,
    c: f64,
    wq: Vec<ParamId>,
    wk: Vec<ParamId>,
    gamma: Vec<ParamId>,
    beta_raw: Option<ParamId>,
}

/// Output of attention over one channel.
#[derive(Debug, Clone, Copy)]
pub struct ChannelAttnOut {
    /// `[1, T]` softmax weights.
    pub alpha: Var,
    /// `[1, T]` harmonic weights, absent for plain attention.
    pub betas: Option<Var>,
    /// `[d_1, 1]` weighted channel representation.
    pub repr: Var,
}

impl ChannelAttention {
    pub fn new(
        store: &mut ParamStore,
        n_channels: usize,
        d1: usize,
        d2: usize,
        c: f64,
        harmonic: bool,
        seed: u64,
    ) -> Result<Self> {
        if !(c > 0.0) {
            return Err(Error::Config(format!("attention constant c must be positive, got {c}")));
        }
        let bound = 1.0 / (d1 as f64).sqrt();
        let mut wq = Vec::with_capacity(n_channels);
        let mut wk = Vec::with_capacity(n_channels);
        let mut gamma = Vec::new();
        for n in 0..n_channels {
            wq.push(store.register_uniform(&format!("battn/ch{n}/wq"), &[d2, d1], bound, seed)?);
            wk.push(store.register_uniform(&format!("battn/ch{n}/wk"), &[d2, d1], bound, seed)?);
            if harmonic {
                gamma.push(store.register(format!("battn/ch{n}/gamma"), Tensor::scalar(1.0))?);
            }
        }
        let beta_raw = if harmonic { Some(store.register("battn/beta_raw", Tensor::scalar(0.0))?) } else { None };
        Ok(ChannelAttention { d2, c, wq, wk, gamma, beta_raw })
    }

    pub fn is_harmonic(&self) -> bool {
        self.beta_raw.is_some()
    }

    pub fn beta_raw(&self) -> Option<ParamId> {
        self.beta_raw
    }

    pub fn channel_params(&self, n: usize) -> Vec<ParamId> {
        let mut v = vec![self.wq[n], self.wk[n]];
        v.extend(self.gamma.get(n));
        v
    }

    /// `β = softplus(β_raw)`, placed on the tape once per forward pass.
    pub fn beta(&self, tape: &mut Tape) -> Result<Option<Var>> {
        self.beta_raw
            .map(|id| {
                let raw = tape.param(id);
                tape.softplus(raw)
            })
            .transpose()
    }

    /// Raw scores `(W_q h_T)ᵀ (W_k h_t)` for every `t`, as `[1, T]`.
    fn scores(&self, tape: &mut Tape, n: usize, hs: &HiddenSeq) -> Result<Var> {
        let wq = tape.param(self.wq[n]);
        let wk = tape.param(self.wk[n]);
        let q = tape.matmul(wq, hs.last())?;
        let keys = tape.matmul(wk, hs.matrix)?;
        let qt = tape.transpose(q)?;
        tape.matmul(qt, keys)
    }

    /// Attention weights over the steps of channel `n`. `beta` must be
    /// `Some` exactly when the attention is harmonic.
    pub fn alpha(
        &self,
        tape: &mut Tape,
        n: usize,
        hs: &HiddenSeq,
        series: &[f64],
        beta: Option<Var>,
    ) -> Result<(Var, Option<Var>)> {
        let scores = self.scores(tape, n, hs)?;
        match (beta, self.gamma.get(n)) {
            (Some(beta), Some(&gamma)) => {
                let betas = harmonic_weights_on_tape(tape, beta, series)?;
                let gamma = tape.param(gamma);
                let theta = harmonic_theta(tape, scores, gamma, betas, self.c)?;
                Ok((tape.softmax(theta, 1)?, Some(betas)))
            }
            (None, None) => {
                let scaled = tape.scale(scores, 1.0 / (self.d2 as f64).sqrt())?;
                let theta = tape.tanh(scaled)?;
                Ok((tape.softmax(theta, 1)?, None))
            }
            _ => Err(Error::structural("beta must be supplied exactly for harmonic attention")),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        n: usize,
        hs: &HiddenSeq,
        series: &[f64],
        beta: Option<Var>,
    ) -> Result<ChannelAttnOut> {
        let (alpha, betas) = self.alpha(tape, n, hs, series, beta)?;
        let repr = channel_represent(tape, hs.matrix, alpha)?;
        Ok(ChannelAttnOut { alpha, betas, repr })
    }
}

/// `Σ_t α_t h_t` for `hidden` of shape `[d_1, T]` and `alpha` of shape `[1, T]`.
pub fn channel_represent(tape: &mut Tape, hidden: Var, alpha: Var) -> Result<Var> {
    let col = tape.transpose(alpha)?;
    tape.matmul(hidden, col)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_zero_gives_decay() {
        let series = [0.3, -2.0, 1.5, 0.1, 4.0];
        let w = harmonic_weights(&series, 0.0);
        for (i, v) in w.iter().enumerate() {
            assert_eq!(*v, (i + 1) as f64 / 5.0);
        }
    }

    #[test]
    fn last_step_has_full_decay() {
        assert_eq!(time_decay(7, 7), 1.0);
    }

    #[test]
    fn equal_terms_are_fixed_points() {
        assert_eq!(harmonic_weight(0.5, 0.5, 1.0), 0.5);
    }

    #[test]
    fn peak_has_unit_significance() {
        let o = significance(&[0.2, 3.0, -1.0]);
        assert_eq!(o[1], 1.0);
        // A negative peak still normalises by |max|.
        let o = significance(&[0.2, -3.0, 1.0]);
        assert!(o.iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn extreme_scores_saturate_without_nan() {
        for s in [50.0, -50.0] {
            let mut tape = Tape::detached();
            let scores = tape.constant(Tensor::row(vec![s, 0.3]));
            let gamma = tape.constant(Tensor::scalar(1.0));
            let betas = tape.constant(Tensor::row(vec![0.01, 0.5]));
            let theta = harmonic_theta(&mut tape, scores, gamma, betas, 1.0).unwrap();
            let v = tape.value(theta).data()[0];
            assert!(v.is_finite());
            assert!((v.abs() - 1.0).abs() < 1e-6, "s={s}: theta={v}");
        }
    }

    #[test]
    fn one_hot_alpha_selects_last_state() {
        let mut tape = Tape::detached();
        let h = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap());
        let a = tape.constant(Tensor::row(vec![0.0, 0.0, 1.0]));
        let e = channel_represent(&mut tape, h, a).unwrap();
        assert_eq!(tape.value(e).data(), &[3.0, 6.0]);
    }

    #[test]
    fn uniform_alpha_over_equal_states() {
        let mut tape = Tape::detached();
        let h = tape.constant(Tensor::from_rows(&[vec![0.25; 4], vec![-0.5; 4]]).unwrap());
        let a = tape.constant(Tensor::row(vec![0.25; 4]));
        let e = channel_represent(&mut tape, h, a).unwrap();
        assert_eq!(tape.value(e).data(), &[0.25, -0.5]);
    }

    #[test]
    fn rejects_nonpositive_c() {
        let mut store = ParamStore::new();
        assert!(ChannelAttention::new(&mut store, 2, 4, 2, 0.0, true, 0).is_err());
    }
}
