//! Dataset schema, JSONL ingestion, normalization, splitting and a synthetic
//! generator with planted temporal structure.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One user/patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub id: String,
    /// `N_b` static features.
    #[serde(rename = "static")]
    pub static_features: Vec<f64>,
    /// `N_d` channels, each a series of `T` observations.
    pub dynamic: Vec<Vec<f64>>,
    pub label: u8,
}

impl InstanceRecord {
    /// Column `t` of the dynamic matrix: the status vector at one time step.
    pub fn status_at(&self, t: usize) -> Vec<f64> {
        self.dynamic.iter().map(|ch| ch[t]).collect()
    }

    fn validate(&self, dims: Dims) -> Result<()> {
        if self.label > 1 {
            return Err(Error::Schema(format!("record {}: label {} is not 0 or 1", self.id, self.label)));
        }
        let shape_ok = self.static_features.len() == dims.n_b
            && self.dynamic.len() == dims.n_d
            && self.dynamic.iter().all(|ch| ch.len() == dims.t);
        if !shape_ok {
            return Err(Error::Schema(format!(
                "record {} does not match dims (n_d={}, n_b={}, t={})",
                self.id, dims.n_d, dims.n_b, dims.t
            )));
        }
        let finite = self.static_features.iter().chain(self.dynamic.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Domain(format!("record {} has a non-finite value", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_d: usize,
    pub n_b: usize,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<InstanceRecord>,
    dims: Dims,
    sparsity: f64,
}

impl Dataset {
    /// Validates that every record shares the first record's dims.
    pub fn new(records: Vec<InstanceRecord>) -> Result<Self> {
        let first = records.first().ok_or_else(|| Error::Schema("no records".into()))?;
        let dims = Dims {
            n_d: first.dynamic.len(),
            n_b: first.static_features.len(),
            t: first.dynamic.first().map_or(0, Vec::len),
        };
        if dims.n_d == 0 || dims.n_b == 0 || dims.t == 0 {
            return Err(Error::Schema(format!("record {} has an empty dimension", first.id)));
        }
        for r in &records {
            r.validate(dims)?;
        }
        let positives = records.iter().filter(|r| r.label == 1).count();
        let sparsity = positives as f64 / records.len() as f64;
        Ok(Dataset { records, dims, sparsity })
    }

    pub fn records(&self) -> &[InstanceRecord] {
        &self.records
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Fraction of positive labels.
    pub fn sparsity(&self) -> f64 {
        self.sparsity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn get(&self, id: &str) -> Option<&InstanceRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Dataset::new(indices.iter().map(|&i| self.records[i].clone()).collect())
    }

    fn map_records(&self, f: impl Fn(&InstanceRecord) -> InstanceRecord) -> Dataset {
        Dataset { records: self.records.iter().map(f).collect(), dims: self.dims, sparsity: self.sparsity }
    }
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        records.push(rec);
    }
    Dataset::new(records)
}

pub fn write_jsonl(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in ds.records() {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

const STD_FLOOR: f64 = 1e-8;

/// Training-split statistics for z-scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub dynamic_mean: Vec<f64>,
    pub dynamic_std: Vec<f64>,
    pub static_mean: Vec<f64>,
    pub static_std: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl NormStats {
    pub fn fit(train: &Dataset) -> Result<NormStats> {
        if train.is_empty() {
            return Err(Error::protocol("cannot fit normalization on an empty training split"));
        }
        let Dims { n_d, n_b, .. } = train.dims();
        let mut warnings = Vec::new();
        let mut floor = |what: &str, k: usize, std: f64| {
            if std < STD_FLOOR {
                let msg = format!("{what} {k} is constant on the training split; std clamped to {STD_FLOOR}");
                log::warn!("{msg}");
                warnings.push(msg);
                STD_FLOOR
            } else {
                std
            }
        };
        let (mut dynamic_mean, mut dynamic_std) = (Vec::new(), Vec::new());
        for n in 0..n_d {
            let (m, s) = mean_std(train.records().iter().flat_map(move |r| r.dynamic[n].iter().copied()));
            dynamic_mean.push(m);
            dynamic_std.push(floor("channel", n, s));
        }
        let (mut static_mean, mut static_std) = (Vec::new(), Vec::new());
        for b in 0..n_b {
            let (m, s) = mean_std(train.records().iter().map(move |r| r.static_features[b]));
            static_mean.push(m);
            static_std.push(floor("static feature", b, s));
        }
        Ok(NormStats { dynamic_mean, dynamic_std, static_mean, static_std, warnings })
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        let d = ds.dims();
        if d.n_d != self.dynamic_mean.len() || d.n_b != self.static_mean.len() {
            return Err(Error::Schema(format!(
                "normalization fitted for n_d={}, n_b={} but dataset has n_d={}, n_b={}",
                self.dynamic_mean.len(),
                self.static_mean.len(),
                d.n_d,
                d.n_b
            )));
        }
        Ok(ds.map_records(|r| InstanceRecord {
            id: r.id.clone(),
            static_features: r
                .static_features
                .iter()
                .enumerate()
                .map(|(b, v)| (v - self.static_mean[b]) / self.static_std[b])
                .collect(),
            dynamic: r
                .dynamic
                .iter()
                .enumerate()
                .map(|(n, ch)| ch.iter().map(|v| (v - self.dynamic_mean[n]) / self.dynamic_std[n]).collect())
                .collect(),
            label: r.label,
        }))
    }
}

/// Fit z-score statistics on `train` (population std) and apply them to it
/// and to every dataset in `others`.
pub fn fit_apply_zscore(train: &Dataset, others: &[&Dataset]) -> Result<(Dataset, Vec<Dataset>, NormStats)> {
    let stats = NormStats::fit(train)?;
    let train = stats.apply(train)?;
    let others = others.iter().map(|d| stats.apply(d)).collect::<Result<Vec<_>>>()?;
    Ok((train, others, stats))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, valid: f64, test: f64, seed: u64) -> Result<Self> {
        let spec = SplitSpec { train, valid, test, seed };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        let fr = [self.train, self.valid, self.test];
        if fr.iter().any(|f| !(*f > 0.0)) || ((fr.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {fr:?} must be positive and sum to 1")));
        }
        Ok(())
    }
}

/// Label-stratified, seeded split into (train, valid, test).
pub fn split(ds: &Dataset, spec: SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let n = ds.len();
    let fr = [spec.train, spec.valid, spec.test];
    let sizes = apportion(n, &fr);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pos: Vec<usize> = (0..n).filter(|&i| ds.records[i].label == 1).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| ds.records[i].label == 0).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let mut pos_counts = apportion(pos.len(), &fr);
    // Keep every split's positive count within its size, moving any excess
    // to the split with the most room.
    for k in 0..3 {
        while pos_counts[k] > sizes[k] {
            pos_counts[k] -= 1;
            let j = (0..3).max_by_key(|&j| sizes[j] as i64 - pos_counts[j] as i64).unwrap();
            pos_counts[j] += 1;
        }
    }

    let names = ["train", "valid", "test"];
    let (mut p_iter, mut n_iter) = (pos.into_iter(), neg.into_iter());
    let mut parts = Vec::with_capacity(3);
    for k in 0..3 {
        let n_neg = sizes[k] - pos_counts[k];
        if pos_counts[k] == 0 || n_neg == 0 {
            return Err(Error::protocol(format!(
                "{} split would have {} positives and {} negatives; metrics need both classes",
                names[k], pos_counts[k], n_neg
            )));
        }
        let mut idx: Vec<usize> = p_iter.by_ref().take(pos_counts[k]).chain(n_iter.by_ref().take(n_neg)).collect();
        idx.sort_unstable();
        parts.push(ds.subset(&idx)?);
    }
    let test = parts.pop().unwrap();
    let valid = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    Ok((train, valid, test))
}

/// Integer counts summing to `n`, rounding the first splits and giving the
/// remainder to the last.
fn apportion(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let a = ((fractions[0] * n as f64).round() as usize).min(n);
    let b = ((fractions[1] * n as f64).round() as usize).min(n - a);
    [a, b, n - a - b]
}

/// Parameters of the planted-rhythm generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub n_d: usize,
    pub n_b: usize,
    pub t: usize,
    pub seed: u64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// Target fraction of positives before label flips.
    pub sparsity: f64,
    /// Probability of flipping each label.
    pub label_flip: f64,
    pub amplitude: f64,
}

impl SynthSpec {
    pub fn new(n: usize, n_d: usize, n_b: usize, t: usize, seed: u64) -> Self {
        SynthSpec { n, n_d, n_b, t, seed, noise: 0.3, sparsity: 0.5, label_flip: 0.05, amplitude: 1.0 }
    }
}

/// Where the spike and repeated window of a planted positive sit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Plant {
    pub channel: usize,
    /// Zero-based step `t*` of the spike; the window `[t*, t*+2]` is copied to
    /// start at `t* + lag`.
    pub step: usize,
    pub lag: usize,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: Dataset,
    /// One entry per record; `Some` for instances whose true label is positive.
    pub plants: Vec<Option<Plant>>,
}

/// Channel periods are fixed by channel index so independently generated
/// datasets share a distribution.
fn channel_period(n: usize) -> f64 {
    4.0 + 3.0 * n as f64
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthOutput> {
    if spec.t < 8 || spec.n_d < 2 {
        return Err(Error::Config(format!(
            "synthetic data needs t >= 8 and n_d >= 2 (got t={}, n_d={})",
            spec.t, spec.n_d
        )));
    }
    if spec.n == 0 || spec.n_b == 0 {
        return Err(Error::Config("synthetic data needs n >= 1 and n_b >= 1".into()));
    }
    if !(0.0..=1.0).contains(&spec.sparsity) || !(0.0..=1.0).contains(&spec.label_flip) || !(spec.noise >= 0.0) {
        return Err(Error::Config("sparsity and label_flip must lie in [0,1], noise must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let t = spec.t;
    let lag = t / 2;
    // Latest spike step that keeps the copied window inside the series.
    let last_step = t - lag - 3;

    let n_pos = ((spec.n as f64) * spec.sparsity).round() as usize;
    let mut truth = vec![0u8; spec.n];
    truth[..n_pos].fill(1);
    truth.shuffle(&mut rng);

    let mut records = Vec::with_capacity(spec.n);
    let mut plants = Vec::with_capacity(spec.n);
    for (i, &y) in truth.iter().enumerate() {
        let mut dynamic: Vec<Vec<f64>> = (0..spec.n_d)
            .map(|ch| {
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let period = channel_period(ch);
                (0..t)
                    .map(|s| {
                        let clean = spec.amplitude * (std::f64::consts::TAU * s as f64 / period + phase).sin();
                        clean + spec.noise * unit.sample(&mut rng)
                    })
                    .collect()
            })
            .collect();
        let plant = if y == 1 {
            let channel = rng.gen_range(0..spec.n_d);
            let step = rng.gen_range(0..=last_step);
            dynamic[channel][step] = 3.0 * spec.amplitude + spec.noise * unit.sample(&mut rng);
            for ch in dynamic.iter_mut() {
                for j in 0..3 {
                    ch[step + lag + j] = ch[step + j];
                }
            }
            Some(Plant { channel, step, lag })
        } else {
            None
        };
        let mut static_features: Vec<f64> = (0..spec.n_b).map(|_| unit.sample(&mut rng)).collect();
        static_features[0] += y as f64;
        let flip = rng.gen_bool(spec.label_flip);
        records.push(InstanceRecord {
            id: format!("synth-{i:06}"),
            static_features,
            dynamic,
            label: if flip { 1 - y } else { y },
        });
        plants.push(plant);
    }
    Ok(SynthOutput { dataset: Dataset::new(records)?, plants })
}
