use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::{synth_generate, Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::fusion::{ForwardMode, HgvModel};
use crate::harness::{predict_all, train, TrainConfig};
use crate::ndtensor::{grad_check, DEFAULT_STEP};
use crate::objective::Metric;

pub const DEFAULT_GRID_D1: [usize; 2] = [32, 64];
pub const DEFAULT_GRID_D2: [usize; 2] = [16, 32];
pub const DEFAULT_GRID_HEADS: [usize; 2] = [2, 4];

/// One cell of a hyperparameter sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub d1: usize,
    pub d2: usize,
    pub n_heads: usize,
    pub valid_auroc: Option<f64>,
    pub valid_auprc: Option<f64>,
    pub valid_min_se_pplus: Option<f64>,
    pub error: Option<String>,
}

/// Train every distinct `(d1, d2, n_heads)` combination with the base seed
/// and report its validation metrics. Failures are recorded per row.
pub fn grid_search(
    train_ds: &Dataset,
    valid_ds: &Dataset,
    base: &TrainConfig,
    d1s: &[usize],
    d2s: &[usize],
    heads: &[usize],
) -> Vec<GridRow> {
    let mut combos: Vec<(usize, usize, usize)> = Vec::new();
    for &d1 in d1s {
        for &d2 in d2s {
            for &h in heads {
                if !combos.contains(&(d1, d2, h)) {
                    combos.push((d1, d2, h));
                }
            }
        }
    }
    combos
        .into_iter()
        .map(|(d1, d2, n_heads)| {
            let cfg = TrainConfig { d1, d2, n_heads, ..base.clone() };
            let metrics = train(train_ds, valid_ds, &cfg).and_then(|out| {
                let model = out.best.to_model()?;
                point_metrics(&model, valid_ds)
            });
            match metrics {
                Ok([a, p, m]) => GridRow {
                    d1,
                    d2,
                    n_heads,
                    valid_auroc: Some(a),
                    valid_auprc: Some(p),
                    valid_min_se_pplus: Some(m),
                    error: None,
                },
                Err(e) => {
                    log::warn!("grid cell ({d1}, {d2}, {n_heads}) failed: {e}");
                    GridRow {
                        d1,
                        d2,
                        n_heads,
                        valid_auroc: None,
                        valid_auprc: None,
                        valid_min_se_pplus: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect()
}

fn point_metrics(model: &HgvModel, ds: &Dataset) -> Result<[f64; 3]> {
    let scores = predict_all(model, ds)?;
    let labels = ds.labels();
    Ok([
        Metric::Auroc.compute(&scores, &labels)?,
        Metric::Auprc.compute(&scores, &labels)?,
        Metric::MinSePplus.compute(&scores, &labels)?,
    ])
}

pub fn write_csv<T: Serialize>(rows: &[T], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::domain(format!("csv: {other:?}")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    WoBetaAttn,
    WoGge,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::WoBetaAttn, Variant::WoGge];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WoBetaAttn => "wo_beta_attn",
            Variant::WoGge => "wo_gge",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::WoBetaAttn => cfg.disable_beta_attn = true,
            Variant::WoGge => cfg.disable_gge = true,
        }
        cfg
    }
}

/// Test metrics of one variant trained with one seed. `seed` is `None` on the
/// median rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: Option<u64>,
    pub test_auroc: f64,
    pub test_auprc: f64,
    pub test_min_se_pplus: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub medians: Vec<AblationRow>,
}

impl AblationTable {
    pub fn median(&self, variant: Variant) -> Option<&AblationRow> {
        self.medians.iter().find(|r| r.variant == variant)
    }

    /// Per-seed rows followed by the median rows.
    pub fn all_rows(&self) -> Vec<AblationRow> {
        self.rows.iter().chain(&self.medians).cloned().collect()
    }
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Train the full model and both ablations for every seed; evaluate the
/// best-validation checkpoint of each on the test set. Variants share the
/// seed, so shared parameters start from identical values.
pub fn ablate(
    train_ds: &Dataset,
    valid_ds: &Dataset,
    test_ds: &Dataset,
    base: &TrainConfig,
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(seeds.len() * Variant::ALL.len());
    for &seed in seeds {
        for variant in Variant::ALL {
            let cfg = TrainConfig { seed, ..variant.apply(base) };
            let out = train(train_ds, valid_ds, &cfg)?;
            let [a, p, m] = point_metrics(&out.best.to_model()?, test_ds)?;
            log::info!("ablation {} seed {seed}: test AUROC {a:.4}", variant.name());
            rows.push(AblationRow { variant, seed: Some(seed), test_auroc: a, test_auprc: p, test_min_se_pplus: m });
        }
    }
    let medians = Variant::ALL
        .into_iter()
        .map(|variant| {
            let of = |f: fn(&AblationRow) -> f64| {
                median(&rows.iter().filter(|r| r.variant == variant).map(f).collect::<Vec<_>>())
            };
            AblationRow {
                variant,
                seed: None,
                test_auroc: of(|r| r.test_auroc),
                test_auprc: of(|r| r.test_auprc),
                test_min_se_pplus: of(|r| r.test_min_se_pplus),
            }
        })
        .collect();
    Ok(AblationTable { rows, medians })
}

/// Write one `<id>.json` trace per requested instance. All ids are resolved
/// before anything is written.
pub fn export_trace(model: &HgvModel, ds: &Dataset, ids: &[String], outdir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let records = ids
        .iter()
        .map(|id| ds.get(id).ok_or_else(|| Error::Lookup(format!("no instance with id {id:?}"))))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(&outdir)?;
    let mut paths = Vec::with_capacity(records.len());
    for rec in records {
        let trace = model.trace(rec)?;
        let path = outdir.as_ref().join(format!("{}.json", rec.id));
        let text =
            serde_json::to_string_pretty(&trace).map_err(|e| Error::domain(format!("cannot serialise trace: {e}")))?;
        std::fs::write(&path, text)?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckSummary {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub checked: usize,
    pub skipped: usize,
    pub n_params: usize,
}

/// Central-difference check of the full hybrid loss over every parameter, on
/// a small synthetic batch shaped by `config` (dropout forced off).
pub fn run_gradcheck(config: &TrainConfig, seed: u64) -> Result<GradCheckSummary> {
    let cfg = TrainConfig { dropout: 0.0, seed, ..config.clone() };
    let dims = cfg.dims()?;
    let mut spec = SynthSpec::new(6, dims.n_d, dims.n_b, dims.t, seed);
    spec.sparsity = 0.5;
    let data = synth_generate(&spec)?.dataset;
    let HgvModel { net, mut store } = HgvModel::new(cfg.model_config()?, seed)?;
    let records: Vec<_> = data.records().iter().collect();
    let report = grad_check(&mut store, DEFAULT_STEP, |tape| {
        Ok(net.batch_loss(tape, &records, |_| ForwardMode::Eval, cfg.lambda_d)?.loss)
    })?;
    Ok(GradCheckSummary {
        max_rel_error: report.max_rel_error(),
        worst_param: report.worst().map(|p| p.name.clone()),
        checked: report.checked(),
        skipped: report.skipped(),
        n_params: report.params.len(),
    })
}
