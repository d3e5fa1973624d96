//! Training objective (cross-entropy + DeCov) and ranking metrics with
//! bootstrap estimates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndtensor::{ReduceKind, Tape, Tensor, Unary, Var};

/// Predictions are clamped into `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-12;

fn check_labels(labels: &[u8]) -> Result<()> {
    match labels.iter().position(|&y| y > 1) {
        Some(i) => Err(Error::domain(format!("label {} at index {i} is not 0 or 1", labels[i]))),
        None => Ok(()),
    }
}

/// Summed binary cross-entropy of `preds` (any shape with one entry per
/// label) against `labels`.
pub fn ce_loss(tape: &mut Tape, preds: Var, labels: &[u8]) -> Result<Var> {
    check_labels(labels)?;
    let shape = tape.shape(preds).to_vec();
    if tape.value(preds).len() != labels.len() {
        return Err(Error::structural(format!("{} predictions for {} labels", tape.value(preds).len(), labels.len())));
    }
    let pos = Tensor::new(shape.clone(), labels.iter().map(|&y| y as f64).collect())?;
    let neg = Tensor::new(shape, labels.iter().map(|&y| 1.0 - y as f64).collect())?;
    let p = tape.unary(Unary::Clamp { lo: PROB_EPS, hi: 1.0 - PROB_EPS }, preds)?;
    let log_p = tape.log(p)?;
    let not_p = tape.neg(p)?;
    let not_p = tape.shift(not_p, 1.0)?;
    let log_q = tape.log(not_p)?;
    let pos = tape.constant(pos);
    let neg = tape.constant(neg);
    let a = tape.mul(pos, log_p)?;
    let b = tape.mul(neg, log_q)?;
    let ll = tape.add(a, b)?;
    let total = tape.sum(ll)?;
    tape.neg(total)
}

/// DeCov penalty `½(‖C‖_F² − ‖diag C‖²)` of the batch covariance of `acts`
/// (`[B, F]`, one row per case).
pub fn decov_loss(tape: &mut Tape, acts: Var) -> Result<Var> {
    let (b, f) = match tape.shape(acts) {
        &[b, f] => (b, f),
        s => return Err(Error::structural(format!("DeCov expects [B, F] activations, got {s:?}"))),
    };
    let mean = tape.reduce(ReduceKind::Mean, acts, Some(0))?;
    let mean = tape.reshape(mean, &[1, f])?;
    let ones = tape.constant(Tensor::full(&[b, 1], 1.0));
    let spread = tape.matmul(ones, mean)?;
    let centred = tape.sub(acts, spread)?;
    let ct = tape.transpose(centred)?;
    let cov = tape.matmul(ct, centred)?;
    let cov = tape.scale(cov, 1.0 / b as f64)?;
    let sq = tape.mul(cov, cov)?;
    let mut mask = Tensor::full(&[f, f], 1.0);
    for i in 0..f {
        mask.data_mut()[i * f + i] = 0.0;
    }
    let mask = tape.constant(mask);
    let off = tape.mul(sq, mask)?;
    let total = tape.sum(off)?;
    tape.scale(total, 0.5)
}

/// Off-tape DeCov value.
pub fn decov_value(acts: &Tensor) -> Result<f64> {
    let mut tape = Tape::detached();
    let a = tape.constant(acts.clone());
    let l = decov_loss(&mut tape, a)?;
    Ok(tape.value(l).item())
}

/// `L_C + λ_d · L_DeCov`.
pub fn hybrid_loss(tape: &mut Tape, ce: Var, decov: Var, lambda_d: f64) -> Result<Var> {
    if !(lambda_d >= 0.0) {
        return Err(Error::Config(format!("lambda_d must be >= 0, got {lambda_d}")));
    }
    let weighted = tape.scale(decov, lambda_d)?;
    tape.add(ce, weighted)
}

fn class_counts(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::structural(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    check_labels(labels)?;
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::domain(format!("non-finite score at index {i}")));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    Ok((pos, labels.len() - pos))
}

fn need_both(pos: usize, neg: usize, what: &str) -> Result<()> {
    if pos == 0 || neg == 0 {
        return Err(Error::protocol(format!("{what} needs both classes ({pos} positive, {neg} negative)")));
    }
    Ok(())
}

/// Indices ordered by descending score, ties by ascending index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (Mann-Whitney with mid-ranks).
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    need_both(pos, neg, "AUROC")?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Average precision: precision at each positive in ranked order, weighted by
/// the recall it adds.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = class_counts(scores, labels)?;
    if pos == 0 {
        return Err(Error::protocol("AUPRC needs at least one positive"));
    }
    let mut tp = 0usize;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (k, &i) in ranking(scores).iter().enumerate() {
        if labels[i] == 1 {
            tp += 1;
            let recall = tp as f64 / pos as f64;
            let precision = tp as f64 / (k + 1) as f64;
            ap += precision * (recall - prev_recall);
            prev_recall = recall;
        }
    }
    Ok(ap)
}

/// Best value over score thresholds of min(sensitivity, precision), with
/// "positive" meaning score >= threshold.
pub fn min_se_pplus(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    need_both(pos, neg, "min(Se, P+)")?;
    let order = ranking(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best: f64 = 0.0;
    let mut k = 0;
    while k < order.len() {
        let tau = scores[order[k]];
        while k < order.len() && scores[order[k]] == tau {
            if labels[order[k]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let se = tp as f64 / pos as f64;
        let pp = tp as f64 / (tp + fp) as f64;
        best = best.max(se.min(pp));
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Auroc,
    Auprc,
    MinSePplus,
}

impl Metric {
    pub fn compute(self, scores: &[f64], labels: &[u8]) -> Result<f64> {
        match self {
            Metric::Auroc => auroc(scores, labels),
            Metric::Auprc => auprc(scores, labels),
            Metric::MinSePplus => min_se_pplus(scores, labels),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootStats {
    pub mean: f64,
    pub std: f64,
    /// Resamples thrown away because they held a single class.
    pub redraws: usize,
}

const MAX_REDRAWS: usize = 10_000;

/// Bootstrap mean and (population) standard deviation of `metric`. Resample
/// `i` uses its own stream seeded with `seed + i`.
pub fn bootstrap(metric: Metric, scores: &[f64], labels: &[u8], n_boot: usize, seed: u64) -> Result<BootStats> {
    if n_boot == 0 {
        return Err(Error::Config("n_boot must be >= 1".into()));
    }
    let (pos, neg) = class_counts(scores, labels)?;
    need_both(pos, neg, "bootstrap")?;
    let n = scores.len();
    let mut values = Vec::with_capacity(n_boot);
    let mut redraws = 0;
    let (mut s, mut l) = (vec![0.0; n], vec![0u8; n]);
    for i in 0..n_boot {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let mut attempts = 0;
        loop {
            for k in 0..n {
                let j = rng.gen_range(0..n);
                s[k] = scores[j];
                l[k] = labels[j];
            }
            let p = l.iter().filter(|&&y| y == 1).count();
            if p > 0 && p < n {
                break;
            }
            attempts += 1;
            if attempts > MAX_REDRAWS {
                return Err(Error::protocol("bootstrap could not draw a two-class resample"));
            }
        }
        redraws += attempts;
        values.push(metric.compute(&s, &l)?);
    }
    if redraws > 0 {
        log::info!("bootstrap redrew {redraws} single-class resamples");
    }
    let mean = values.iter().sum::<f64>() / n_boot as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n_boot as f64;
    Ok(BootStats { mean, std: var.sqrt(), redraws })
}

/// Point values and bootstrap summaries of the three ranking metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auroc: f64,
    pub auroc_mean: f64,
    pub auroc_std: f64,
    pub auprc: f64,
    pub auprc_mean: f64,
    pub auprc_std: f64,
    pub min_se_pplus: f64,
    pub min_se_pplus_mean: f64,
    pub min_se_pplus_std: f64,
    pub n_boot: usize,
    pub n: usize,
}

impl MetricReport {
    pub fn compute(scores: &[f64], labels: &[u8], n_boot: usize, seed: u64) -> Result<MetricReport> {
        let point = |m: Metric| m.compute(scores, labels);
        let boot = |m: Metric| bootstrap(m, scores, labels, n_boot, seed);
        let (a, p, m) = (boot(Metric::Auroc)?, boot(Metric::Auprc)?, boot(Metric::MinSePplus)?);
        Ok(MetricReport {
            auroc: point(Metric::Auroc)?,
            auroc_mean: a.mean,
            auroc_std: a.std,
            auprc: point(Metric::Auprc)?,
            auprc_mean: p.mean,
            auprc_std: p.std,
            min_se_pplus: point(Metric::MinSePplus)?,
            min_se_pplus_mean: m.mean,
            min_se_pplus_std: m.std,
            n_boot,
            n: scores.len(),
        })
    }
}
