//! Temporal correlation graph and its convolutional global embedding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndtensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// `T x T` matrix of cosine similarities between time-step status vectors,
/// mapped from `[-1, 1]` to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrGraph {
    t: usize,
    adj: Vec<f64>,
}

impl CorrGraph {
    pub fn size(&self) -> usize {
        self.t
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.adj[i * self.t + j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.adj.chunks(self.t).map(<[f64]>::to_vec).collect()
    }

    /// The graph as a single-channel image `[1, T, T]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.t, self.t], self.adj.clone()).expect("square adjacency")
    }

    /// Largest entry off the diagonal and its `(row, col)`, scanning the upper
    /// triangle in row-major order.
    pub fn max_off_diagonal(&self) -> (f64, usize, usize) {
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for i in 0..self.t {
            for j in i + 1..self.t {
                if self.get(i, j) > best.0 {
                    best = (self.get(i, j), i, j);
                }
            }
        }
        best
    }

    pub fn mean_off_diagonal(&self) -> f64 {
        let t = self.t;
        let total: f64 = (0..t)
            .flat_map(|i| (0..t).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .sum();
        total / (t * (t - 1)) as f64
    }
}

/// Build `g[t1,t2] = (cos(S[:,t1], S[:,t2]) + 1) / 2`, with cos defined as 0
/// when either status vector is zero. `dynamic` is channel-major (`N_d` rows
/// of `T` values).
pub fn build_corr_graph(dynamic: &[Vec<f64>]) -> CorrGraph {
    let t = dynamic.first().map_or(0, Vec::len);
    let column = |s: usize| dynamic.iter().map(move |ch| ch[s]);
    let norms: Vec<f64> = (0..t).map(|s| column(s).map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut adj = vec![0.0; t * t];
    for i in 0..t {
        adj[i * t + i] = if norms[i] > 0.0 { 1.0 } else { 0.5 };
        for j in i + 1..t {
            let cos = if norms[i] > 0.0 && norms[j] > 0.0 {
                let dot: f64 = column(i).zip(column(j)).map(|(a, b)| a * b).sum();
                (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            let g = (cos + 1.0) / 2.0;
            adj[i * t + j] = g;
            adj[j * t + i] = g;
        }
    }
    CorrGraph { t, adj }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GgeConfig {
    /// Graph side length (time steps).
    pub t: usize,
    /// Output channels of each conv layer, first to last.
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    /// Embedding size.
    pub d_g: usize,
}

impl GgeConfig {
    /// Length of the flattened last feature map. Fails if any layer's input
    /// is smaller than the kernel.
    pub fn flatten_len(&self) -> Result<usize> {
        if self.conv_channels.is_empty() || self.kernel == 0 || self.stride == 0 || self.d_g == 0 {
            return Err(Error::structural("GGE needs at least one conv layer, kernel/stride >= 1 and d_g >= 1"));
        }
        let mut side = self.t;
        for (l, _) in self.conv_channels.iter().enumerate() {
            if side < self.kernel {
                return Err(Error::structural(format!(
                    "conv layer {} sees a {side}x{side} map, smaller than the {k}x{k} kernel",
                    l + 1,
                    k = self.kernel
                )));
            }
            side = (side - self.kernel) / self.stride + 1;
        }
        Ok(self.conv_channels.last().unwrap() * side * side)
    }
}

#[derive(Debug, Clone)]
pub struct GgeParams {
    pub config: GgeConfig,
    convs: Vec<(ParamId, ParamId)>,
    fc_w: ParamId,
    fc_b: ParamId,
}

impl GgeParams {
    pub fn new(store: &mut ParamStore, config: GgeConfig, seed: u64) -> Result<Self> {
        let flat = config.flatten_len()?;
        let mut convs = Vec::with_capacity(config.conv_channels.len());
        let mut cin = 1;
        for (l, &cout) in config.conv_channels.iter().enumerate() {
            let k = config.kernel;
            let bound = 1.0 / ((cin * k * k) as f64).sqrt();
            let w = store.register_uniform(&format!("gge/conv{}/w", l + 1), &[cout, cin, k, k], bound, seed)?;
            let b = store.register_uniform(&format!("gge/conv{}/b", l + 1), &[cout], bound, seed)?;
            convs.push((w, b));
            cin = cout;
        }
        let bound = 1.0 / (flat as f64).sqrt();
        let fc_w = store.register_uniform("gge/fc/w", &[config.d_g, flat], bound, seed)?;
        let fc_b = store.register_uniform("gge/fc/b", &[config.d_g, 1], bound, seed)?;
        Ok(GgeParams { config, convs, fc_w, fc_b })
    }

    pub fn conv_params(&self) -> &[(ParamId, ParamId)] {
        &self.convs
    }

    pub fn fc_params(&self) -> (ParamId, ParamId) {
        (self.fc_w, self.fc_b)
    }

    /// `E_g` as a `[d_g, 1]` column. The graph enters as a constant.
    pub fn forward(&self, tape: &mut Tape, graph: &CorrGraph) -> Result<Var> {
        if graph.size() != self.config.t {
            return Err(Error::structural(format!(
                "graph has {} steps, GGE built for {}",
                graph.size(),
                self.config.t
            )));
        }
        let mut x = tape.constant(graph.to_tensor());
        for &(w, b) in &self.convs {
            let (w, b) = (tape.param(w), tape.param(b));
            let z = tape.conv2d(x, w, b, self.config.stride)?;
            x = tape.relu(z)?;
        }
        let n = tape.value(x).len();
        let flat = tape.reshape(x, &[n, 1])?;
        let w = tape.param(self.fc_w);
        let b = tape.param(self.fc_b);
        let z = tape.matmul(w, flat)?;
        let z = tape.add(z, b)?;
        tape.relu(z)
    }
}
