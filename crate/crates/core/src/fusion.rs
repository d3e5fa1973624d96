//! Heterogeneous aggregation and the end-to-end network.
//!
//! The instance-level view `G` (static embedding fused with the graph
//! embedding) is stacked after the `N_d` channel representations into a
//! `[d_1, N_d + 1]` matrix. Multi-head self-attention runs over those
//! `N_d + 1` columns, a residual adds the stack back, and the refined
//! columns are pooled with softmax weights given by their inner products
//! with the refined instance-level column.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::battn::ChannelAttention;
use crate::data::{Dims, InstanceRecord};
use crate::error::{Error, Result};
use crate::gge::{build_corr_graph, CorrGraph, GgeConfig, GgeParams};
use crate::ndtensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::objective::{ce_loss, decov_loss, hybrid_loss};
use crate::seqenc::ChannelLstm;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_d: usize,
    pub n_b: usize,
    pub t: usize,
    pub d1: usize,
    pub d2: usize,
    pub d_b: usize,
    pub d_g: usize,
    pub n_heads: usize,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub c: f64,
    pub dropout: f64,
    /// Feed the graph embedding into the instance-level view.
    pub use_gge: bool,
    /// Harmonic β-attention; plain scaled attention when off.
    pub harmonic_attention: bool,
}

impl ModelConfig {
    /// The small configuration used for gradient checks and quick tests.
    pub fn tiny() -> Self {
        ModelConfig {
            n_d: 3,
            n_b: 2,
            t: 8,
            d1: 8,
            d2: 4,
            d_b: 8,
            d_g: 8,
            n_heads: 2,
            conv_channels: vec![4, 8],
            kernel: 3,
            stride: 1,
            c: 1.0,
            dropout: 0.0,
            use_gge: true,
            harmonic_attention: true,
        }
    }

    pub fn dims(&self) -> Dims {
        Dims { n_d: self.n_d, n_b: self.n_b, t: self.t }
    }

    pub fn gge_config(&self) -> GgeConfig {
        GgeConfig {
            t: self.t,
            conv_channels: self.conv_channels.clone(),
            kernel: self.kernel,
            stride: self.stride,
            d_g: self.d_g,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [self.n_d, self.n_b, self.t, self.d1, self.d2, self.d_b, self.d_g, self.n_heads];
        if sizes.contains(&0) {
            return Err(Error::Config("all dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.c > 0.0) {
            return Err(Error::Config(format!("c must be positive, got {}", self.c)));
        }
        if self.use_gge {
            self.gge_config().flatten_len()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Eval,
    /// Dropout active, masks drawn from a stream seeded with `dropout_seed`.
    Train {
        dropout_seed: u64,
    },
}

#[derive(Debug, Clone)]
pub struct AttentionHead {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

/// Everything a forward pass leaves behind on the tape.
#[derive(Debug, Clone)]
pub struct Forward {
    pub graph: CorrGraph,
    /// `[d_1, N_d + 1]`: channel representations then the instance view.
    pub stack: Var,
    /// Multi-head output plus residual (and dropout in training).
    pub refined: Var,
    /// `[N_d + 1, 1]` global-view weights.
    pub mu: Var,
    /// `[d_1, 1]`.
    pub h_rep: Var,
    /// `[1, 1]` risk probability.
    pub y_hat: Var,
    /// Per channel `[1, T]` attention weights.
    pub alphas: Vec<Var>,
    /// Per channel `[1, T]` harmonic weights (empty for plain attention).
    pub betas: Vec<Var>,
}

/// Plain-value snapshot of a forward pass for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub id: String,
    pub g: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub y_hat: f64,
}

impl Forward {
    pub fn trace(&self, tape: &Tape, id: &str) -> Trace {
        let rows = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).data().to_vec()).collect();
        Trace {
            id: id.to_string(),
            g: self.graph.rows(),
            alpha: rows(&self.alphas),
            beta: rows(&self.betas),
            mu: tape.value(self.mu).data().to_vec(),
            y_hat: tape.value(self.y_hat).item(),
        }
    }
}

/// Loss terms of one mini-batch.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: Var,
    pub ce: Var,
    pub decov: Var,
    /// `[B, 1]` predictions.
    pub preds: Var,
}

/// Parameter layout of the whole network. Values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct HgvNet {
    config: ModelConfig,
    gge: Option<GgeParams>,
    static_w: ParamId,
    static_b: ParamId,
    fuse_w: ParamId,
    fuse_b: ParamId,
    lstms: Vec<ChannelLstm>,
    attention: ChannelAttention,
    heads: Vec<AttentionHead>,
    w_h: ParamId,
    pred_w1: ParamId,
    pred_b1: ParamId,
    pred_w2: ParamId,
    pred_b2: ParamId,
}

fn uniform(store: &mut ParamStore, name: &str, shape: &[usize], fan_in: usize, seed: u64) -> Result<ParamId> {
    store.register_uniform(name, shape, 1.0 / (fan_in as f64).sqrt(), seed)
}

impl HgvNet {
    pub fn new(store: &mut ParamStore, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let gge = if c.use_gge { Some(GgeParams::new(store, c.gge_config(), seed)?) } else { None };
        let static_w = uniform(store, "fusion/static/w", &[c.d_b, c.n_b], c.n_b, seed)?;
        let static_b = uniform(store, "fusion/static/b", &[c.d_b, 1], c.n_b, seed)?;
        let fuse_in = c.d_b + if c.use_gge { c.d_g } else { 0 };
        let fuse_w = uniform(store, "fusion/fuse/w", &[c.d1, fuse_in], fuse_in, seed)?;
        let fuse_b = uniform(store, "fusion/fuse/b", &[c.d1, 1], fuse_in, seed)?;
        let lstms = (0..c.n_d).map(|n| ChannelLstm::new(store, n, c.d1, seed)).collect::<Result<Vec<_>>>()?;
        let attention = ChannelAttention::new(store, c.n_d, c.d1, c.d2, c.c, c.harmonic_attention, seed)?;
        let mut heads = Vec::with_capacity(c.n_heads);
        for h in 0..c.n_heads {
            heads.push(AttentionHead {
                wq: uniform(store, &format!("mha/head{h}/wq"), &[c.d1, c.d1], c.d1, seed)?,
                wk: uniform(store, &format!("mha/head{h}/wk"), &[c.d1, c.d1], c.d1, seed)?,
                wv: uniform(store, &format!("mha/head{h}/wv"), &[c.d1, c.d1], c.d1, seed)?,
            });
        }
        let w_h = uniform(store, "mha/wh", &[c.d1 * c.n_heads, c.d1], c.d1 * c.n_heads, seed)?;
        let pred_w1 = uniform(store, "predictor/w1", &[c.d1, c.d1], c.d1, seed)?;
        let pred_b1 = uniform(store, "predictor/b1", &[c.d1, 1], c.d1, seed)?;
        let pred_w2 = uniform(store, "predictor/w2", &[1, c.d1], c.d1, seed)?;
        let pred_b2 = uniform(store, "predictor/b2", &[1, 1], c.d1, seed)?;
        Ok(HgvNet {
            config,
            gge,
            static_w,
            static_b,
            fuse_w,
            fuse_b,
            lstms,
            attention,
            heads,
            w_h,
            pred_w1,
            pred_b1,
            pred_w2,
            pred_b2,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn gge(&self) -> Option<&GgeParams> {
        self.gge.as_ref()
    }

    pub fn lstm(&self, n: usize) -> &ChannelLstm {
        &self.lstms[n]
    }

    pub fn attention(&self) -> &ChannelAttention {
        &self.attention
    }

    pub fn heads(&self) -> &[AttentionHead] {
        &self.heads
    }

    pub fn output_projection(&self) -> ParamId {
        self.w_h
    }

    /// Instance-level view `G` as `[d_1, 1]`; `graph_embedding` must be
    /// present exactly when the net uses the GGE.
    pub fn embed_and_fuse(
        &self,
        tape: &mut Tape,
        static_features: &[f64],
        graph_embedding: Option<Var>,
    ) -> Result<Var> {
        let f = tape.constant(Tensor::column(static_features.to_vec()));
        let (w, b) = (tape.param(self.static_w), tape.param(self.static_b));
        let z = tape.matmul(w, f)?;
        let z = tape.add(z, b)?;
        let e_b = tape.relu(z)?;
        let input = match graph_embedding {
            Some(e_g) => tape.concat(&[e_b, e_g], 0)?,
            None => e_b,
        };
        let (w, b) = (tape.param(self.fuse_w), tape.param(self.fuse_b));
        let z = tape.matmul(w, input)?;
        tape.add(z, b)
    }

    pub fn predict(&self, tape: &mut Tape, h_rep: Var) -> Result<Var> {
        let (w1, b1) = (tape.param(self.pred_w1), tape.param(self.pred_b1));
        let (w2, b2) = (tape.param(self.pred_w2), tape.param(self.pred_b2));
        let z = tape.matmul(w1, h_rep)?;
        let z = tape.add(z, b1)?;
        let z = tape.relu(z)?;
        let z = tape.matmul(w2, z)?;
        let z = tape.add(z, b2)?;
        tape.sigmoid(z)
    }

    pub fn forward(&self, tape: &mut Tape, rec: &InstanceRecord, mode: ForwardMode) -> Result<Forward> {
        let c = &self.config;
        if rec.dynamic.len() != c.n_d
            || rec.static_features.len() != c.n_b
            || rec.dynamic.iter().any(|ch| ch.len() != c.t)
        {
            return Err(Error::Schema(format!(
                "record {} does not match model dims (n_d={}, n_b={}, t={})",
                rec.id, c.n_d, c.n_b, c.t
            )));
        }
        let graph = build_corr_graph(&rec.dynamic);
        let e_g = self.gge.as_ref().map(|g| g.forward(tape, &graph)).transpose()?;
        let g_view = self.embed_and_fuse(tape, &rec.static_features, e_g)?;

        let beta = self.attention.beta(tape)?;
        let mut columns = Vec::with_capacity(c.n_d + 1);
        let mut alphas = Vec::with_capacity(c.n_d);
        let mut betas = Vec::new();
        for (n, series) in rec.dynamic.iter().enumerate() {
            let hs = self.lstms[n].forward(tape, series)?;
            let out = self.attention.forward(tape, n, &hs, series, beta)?;
            columns.push(out.repr);
            alphas.push(out.alpha);
            betas.extend(out.betas);
        }
        columns.push(g_view);
        let stack = tape.concat(&columns, 1)?;

        let attended = multi_head_attention(tape, stack, &self.heads, self.w_h)?;
        let mut refined = tape.add(attended, stack)?;
        if let ForwardMode::Train { dropout_seed } = mode {
            refined = dropout(tape, refined, c.dropout, dropout_seed)?;
        }
        let (h_rep, mu) = global_view_aggregate(tape, refined)?;
        let y_hat = self.predict(tape, h_rep)?;
        Ok(Forward { graph, stack, refined, mu, h_rep, y_hat, alphas, betas })
    }

    /// Hybrid loss over a mini-batch. `mode(i)` picks the forward mode of the
    /// `i`-th record.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        records: &[&InstanceRecord],
        mode: impl Fn(usize) -> ForwardMode,
        lambda_d: f64,
    ) -> Result<BatchLoss> {
        if records.is_empty() {
            return Err(Error::protocol("empty mini-batch"));
        }
        let mut preds = Vec::with_capacity(records.len());
        let mut reps = Vec::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            let fwd = self.forward(tape, rec, mode(i))?;
            preds.push(fwd.y_hat);
            reps.push(tape.transpose(fwd.h_rep)?);
        }
        let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
        let preds = tape.concat(&preds, 0)?;
        let acts = tape.concat(&reps, 0)?;
        let ce = ce_loss(tape, preds, &labels)?;
        let decov = decov_loss(tape, acts)?;
        let loss = hybrid_loss(tape, ce, decov, lambda_d)?;
        Ok(BatchLoss { loss, ce, decov, preds })
    }
}

/// Softmax attention matrix of one head over the columns of `stack`:
/// `A = softmax_rows(Qᵀ K / sqrt(d_1))`, shape `[M, M]`.
pub fn attention_matrix(tape: &mut Tape, stack: Var, head: &AttentionHead) -> Result<Var> {
    let d1 = tape.shape(stack)[0];
    let (wq, wk) = (tape.param(head.wq), tape.param(head.wk));
    let q = tape.matmul(wq, stack)?;
    let k = tape.matmul(wk, stack)?;
    let qt = tape.transpose(q)?;
    let scores = tape.matmul(qt, k)?;
    let scores = tape.scale(scores, 1.0 / (d1 as f64).sqrt())?;
    tape.softmax(scores, 1)
}

/// Multi-head self-attention over the columns of `stack` (`[d_1, M]`),
/// without the residual. Output column `j` of a head is `Σ_m A[j,m] V[:,m]`;
/// heads are stacked along features and projected by `w_hᵀ`.
pub fn multi_head_attention(tape: &mut Tape, stack: Var, heads: &[AttentionHead], w_h: ParamId) -> Result<Var> {
    let mut outs = Vec::with_capacity(heads.len());
    for head in heads {
        let a = attention_matrix(tape, stack, head)?;
        let wv = tape.param(head.wv);
        let v = tape.matmul(wv, stack)?;
        let at = tape.transpose(a)?;
        outs.push(tape.matmul(v, at)?);
    }
    let cat = tape.concat(&outs, 0)?;
    let w_h = tape.param(w_h);
    let proj = tape.transpose(w_h)?;
    tape.matmul(proj, cat)
}

/// `μ = softmax_m(H_mᵀ H_last)` and `H_rep = Σ_m μ_m H_m`.
pub fn global_view_aggregate(tape: &mut Tape, refined: Var) -> Result<(Var, Var)> {
    let m = tape.shape(refined)[1];
    let last = tape.narrow(refined, 1, m - 1, 1)?;
    let ht = tape.transpose(refined)?;
    let logits = tape.matmul(ht, last)?;
    let mu = tape.softmax(logits, 0)?;
    let h_rep = tape.matmul(refined, mu)?;
    Ok((h_rep, mu))
}

/// Inverted dropout with a seeded mask.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, seed: u64) -> Result<Var> {
    if rate == 0.0 {
        return Ok(x);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 - rate;
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask = (0..n).map(|_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 }).collect();
    let mask = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, mask)
}

/// A network layout together with its parameter values.
#[derive(Debug, Clone)]
pub struct HgvModel {
    pub net: HgvNet,
    pub store: ParamStore,
}

impl HgvModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = HgvNet::new(&mut store, config, seed)?;
        Ok(HgvModel { net, store })
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    /// Eval-mode risk probability.
    pub fn predict(&self, rec: &InstanceRecord) -> Result<f64> {
        let mut tape = Tape::new(&self.store);
        let fwd = self.net.forward(&mut tape, rec, ForwardMode::Eval)?;
        Ok(tape.value(fwd.y_hat).item())
    }

    pub fn trace(&self, rec: &InstanceRecord) -> Result<Trace> {
        let mut tape = Tape::new(&self.store);
        let fwd = self.net.forward(&mut tape, rec, ForwardMode::Eval)?;
        Ok(fwd.trace(&tape, &rec.id))
    }

    pub fn zero_parameters(&mut self) {
        for p in self.store.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(cfg: &ModelConfig, seed: u64) -> InstanceRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        InstanceRecord {
            id: format!("r{seed}"),
            static_features: (0..cfg.n_b).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            dynamic: (0..cfg.n_d).map(|_| (0..cfg.t).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect(),
            label: (seed % 2) as u8,
        }
    }

    #[test]
    fn zero_model_predicts_half() {
        let cfg = ModelConfig::tiny();
        let mut model = HgvModel::new(cfg.clone(), 1).unwrap();
        model.zero_parameters();
        assert_eq!(model.predict(&record(&cfg, 3)).unwrap(), 0.5);
    }

    #[test]
    fn fuse_weight_shape_at_default_sizes() {
        let mut cfg = ModelConfig::tiny();
        cfg.d1 = 64;
        cfg.d_b = 64;
        cfg.d_g = 64;
        let model = HgvModel::new(cfg, 0).unwrap();
        assert_eq!(model.store.by_name("fusion/fuse/w").unwrap().value.shape(), &[64, 128]);
    }

    #[test]
    fn eval_is_deterministic() {
        let cfg = ModelConfig::tiny();
        let model = HgvModel::new(cfg.clone(), 5).unwrap();
        let r = record(&cfg, 8);
        assert_eq!(model.predict(&r).unwrap().to_bits(), model.predict(&r).unwrap().to_bits());
    }

    #[test]
    fn dimension_mismatch_is_schema_error() {
        let cfg = ModelConfig::tiny();
        let model = HgvModel::new(cfg.clone(), 5).unwrap();
        let mut r = record(&cfg, 8);
        r.dynamic.pop();
        assert!(matches!(model.predict(&r), Err(Error::Schema(_))));
    }

    #[test]
    fn uniform_attention_averages_columns() {
        let mut store = ParamStore::new();
        let d = 3;
        let head = AttentionHead {
            wq: store.register("wq", Tensor::zeros(&[d, d])).unwrap(),
            wk: store.register("wk", Tensor::zeros(&[d, d])).unwrap(),
            wv: store.register("wv", Tensor::eye(d)).unwrap(),
        };
        let w_h = store.register("wh", Tensor::eye(d)).unwrap();
        let e = Tensor::from_rows(&[vec![1.0, 2.0, 6.0, 3.0], vec![0.0, -4.0, 4.0, 8.0], vec![1.0, 1.0, 1.0, 1.0]])
            .unwrap();
        let mut tape = Tape::new(&store);
        let ev = tape.constant(e.clone());
        let h = multi_head_attention(&mut tape, ev, std::slice::from_ref(&head), w_h).unwrap();
        for row in tape.value(h).to_rows() {
            let mean = row.iter().sum::<f64>() / 4.0;
            for v in row {
                assert!((v - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_of_identical_columns() {
        let mut tape = Tape::detached();
        let h = tape.constant(Tensor::from_rows(&[vec![0.5; 4], vec![-1.0; 4]]).unwrap());
        let (rep, mu) = global_view_aggregate(&mut tape, h).unwrap();
        for &m in tape.value(mu).data() {
            assert!((m - 0.25).abs() < 1e-15);
        }
        assert_eq!(tape.value(rep).data(), &[0.5, -1.0]);
    }

    #[test]
    fn zero_projections_leave_residual_identity() {
        let cfg = ModelConfig::tiny();
        let mut model = HgvModel::new(cfg.clone(), 2).unwrap();
        let ids: Vec<ParamId> =
            model.net.heads().iter().flat_map(|h| [h.wq, h.wk, h.wv]).chain([model.net.output_projection()]).collect();
        for id in ids {
            model.store.get_mut(id).value.data_mut().fill(0.0);
        }
        let mut tape = Tape::new(&model.store);
        let fwd = model.net.forward(&mut tape, &record(&cfg, 4), ForwardMode::Eval).unwrap();
        assert_eq!(tape.value(fwd.refined), tape.value(fwd.stack));
    }

    #[test]
    fn dropout_zero_rate_is_identity_and_train_differs() {
        let mut cfg = ModelConfig::tiny();
        cfg.dropout = 0.5;
        let model = HgvModel::new(cfg.clone(), 2).unwrap();
        let r = record(&cfg, 6);
        let mut tape = Tape::new(&model.store);
        let a = model.net.forward(&mut tape, &r, ForwardMode::Train { dropout_seed: 1 }).unwrap();
        let b = model.net.forward(&mut tape, &r, ForwardMode::Train { dropout_seed: 1 }).unwrap();
        let e = model.net.forward(&mut tape, &r, ForwardMode::Eval).unwrap();
        assert_eq!(tape.value(a.y_hat), tape.value(b.y_hat));
        assert_ne!(tape.value(a.refined), tape.value(e.refined));
    }

    #[test]
    fn ablations_drop_their_parameters() {
        let mut cfg = ModelConfig::tiny();
        cfg.use_gge = false;
        cfg.harmonic_attention = false;
        let model = HgvModel::new(cfg.clone(), 2).unwrap();
        assert!(model.store.by_name("gge/fc/w").is_none());
        assert!(model.store.by_name("battn/beta_raw").is_none());
        assert_eq!(model.store.by_name("fusion/fuse/w").unwrap().value.shape(), &[8, 8]);
        let tr = model.trace(&record(&cfg, 1)).unwrap();
        assert!(tr.beta.is_empty());
        assert_eq!(tr.alpha.len(), 3);
    }

    #[test]
    fn shared_parameters_initialise_identically_across_variants() {
        let cfg = ModelConfig::tiny();
        let full = HgvModel::new(cfg.clone(), 9).unwrap();
        let mut no_gge = cfg.clone();
        no_gge.use_gge = false;
        let ablated = HgvModel::new(no_gge, 9).unwrap();
        for (_, p) in ablated.store.iter() {
            // The fuse layer's fan-in, and hence its init bound, differs.
            if p.name.starts_with("fusion/fuse/") {
                continue;
            }
            assert_eq!(full.store.by_name(&p.name).unwrap().value, p.value, "{}", p.name);
        }
    }
}
