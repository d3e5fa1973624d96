use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hgv_core::data::{fit_apply_zscore, load_jsonl, split, synth_generate, write_jsonl, Dataset, SplitSpec, SynthSpec};
use hgv_core::harness::{
    ablate, evaluate, export_trace, grid_search, run_gradcheck, train, write_csv, Checkpoint, Profile, TrainConfig,
    DEFAULT_GRID_D1, DEFAULT_GRID_D2, DEFAULT_GRID_HEADS,
};
use hgv_core::{Error, Result};

/// Train and analyse HGV risk-prediction models.
#[derive(Debug, Parser)]
#[command(name = "hgv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a planted-rhythm synthetic dataset as JSON lines.
    Synth(SynthArgs),
    /// Train on a dataset (80/10/10 stratified split) and save the best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint with bootstrap metrics.
    Eval(EvalArgs),
    /// Check model gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Compare the full model against its two ablations over several seeds.
    Ablate(AblateArgs),
    /// Sweep d1 x d2 x heads and report validation metrics.
    Grid(GridArgs),
    /// Export per-instance attention traces.
    Trace(TraceArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    nd: usize,
    #[arg(long)]
    nb: usize,
    #[arg(long)]
    t: usize,
    /// Fraction of positive instances.
    #[arg(long, default_value_t = 0.5)]
    sparsity: f64,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probability of flipping each label.
    #[arg(long, default_value_t = 0.05)]
    label_flip: f64,
    /// Also write the planted spike locations as JSON.
    #[arg(long)]
    plants: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "mimic", value_parser = parse_profile)]
    profile: Profile,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Write the per-epoch log as JSON.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1000)]
    boot: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Overrides on top of the tiny gradient-check configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args)]
struct GridArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_delimiter = ',')]
    d1: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    d2: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    heads: Option<Vec<usize>>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args)]
struct TraceArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    ids: Vec<String>,
    #[arg(long)]
    outdir: PathBuf,
}

fn parse_profile(s: &str) -> std::result::Result<Profile, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Split fractions used by `train`, `ablate` and `grid`.
const SPLIT: (f64, f64, f64) = (0.8, 0.1, 0.1);

struct Prepared {
    train: Dataset,
    valid: Dataset,
    test: Dataset,
    config: TrainConfig,
    norm: hgv_core::data::NormStats,
}

fn prepare(data: &Path, cfg: &ConfigArgs) -> Result<Prepared> {
    let config = TrainConfig::load(&cfg.config, cfg.profile)?;
    let ds = load_jsonl(data)?;
    let config = config.with_dims(ds.dims())?;
    let (train, valid, test) = split(&ds, SplitSpec::new(SPLIT.0, SPLIT.1, SPLIT.2, config.seed)?)?;
    let (train, mut rest, norm) = fit_apply_zscore(&train, &[&valid, &test])?;
    for w in &norm.warnings {
        log::warn!("{w}");
    }
    let test = rest.pop().expect("two held-out sets");
    let valid = rest.pop().expect("two held-out sets");
    Ok(Prepared { train, valid, test, config, norm })
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Domain(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let spec = SynthSpec {
                sparsity: a.sparsity,
                noise: a.noise,
                label_flip: a.label_flip,
                ..SynthSpec::new(a.n, a.nd, a.nb, a.t, a.seed)
            };
            let out = synth_generate(&spec)?;
            write_jsonl(&out.dataset, &a.out)?;
            if let Some(path) = a.plants {
                let plants: Vec<_> = out
                    .dataset
                    .records()
                    .iter()
                    .zip(&out.plants)
                    .filter_map(|(r, p)| {
                        p.map(|p| serde_json::json!({"id": r.id, "channel": p.channel, "step": p.step, "lag": p.lag}))
                    })
                    .collect();
                write_json(&plants, &path)?;
            }
            println!(
                "wrote {} records ({:.3} positive) to {}",
                out.dataset.len(),
                out.dataset.sparsity(),
                a.out.display()
            );
        }
        Command::Train(a) => {
            let p = prepare(&a.data, &a.cfg)?;
            let outcome = train(&p.train, &p.valid, &p.config)?;
            let mut best = outcome.best.clone();
            best.norm = Some(p.norm);
            best.save(&a.out)?;
            if let Some(log) = &a.log {
                write_json(&outcome.log, log)?;
            }
            let e = outcome.best_epoch();
            println!(
                "best epoch {} valid AUROC {:.4} AUPRC {:.4}; saved {}",
                e.epoch,
                e.valid_auroc,
                e.valid_auprc,
                a.out.display()
            );
        }
        Command::Eval(a) => {
            let ckpt = Checkpoint::load(&a.ckpt)?;
            let model = ckpt.to_model()?;
            let ds = load_jsonl(&a.data)?;
            let ds = match &ckpt.norm {
                Some(norm) => norm.apply(&ds)?,
                None => ds,
            };
            let report = evaluate(&model, &ds, a.boot, a.seed)?;
            write_json(&report, &a.report)?;
            println!(
                "AUROC {:.4} ({:.4} ± {:.4})  AUPRC {:.4} ({:.4} ± {:.4})  min(Se,P+) {:.4} ({:.4} ± {:.4})",
                report.auroc,
                report.auroc_mean,
                report.auroc_std,
                report.auprc,
                report.auprc_mean,
                report.auprc_std,
                report.min_se_pplus,
                report.min_se_pplus_mean,
                report.min_se_pplus_std
            );
        }
        Command::Gradcheck(a) => {
            let config = match &a.config {
                Some(path) => TrainConfig::overlay_json(&std::fs::read_to_string(path)?, &TrainConfig::tiny())?,
                None => TrainConfig::tiny(),
            };
            let summary = run_gradcheck(&config, a.seed)?;
            println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
            // Written so that a NaN error also fails.
            if summary.max_rel_error.partial_cmp(&a.tol) != Some(std::cmp::Ordering::Less) {
                return Err(Error::Domain(format!(
                    "max relative error {:e} in {} exceeds tolerance {:e}",
                    summary.max_rel_error,
                    summary.worst_param.as_deref().unwrap_or("?"),
                    a.tol
                )));
            }
        }
        Command::Ablate(a) => {
            let p = prepare(&a.data, &a.cfg)?;
            let table = ablate(&p.train, &p.valid, &p.test, &p.config, &a.seeds)?;
            write_csv(&table.all_rows(), &a.report)?;
            for m in &table.medians {
                println!("{:<14} median test AUROC {:.4}", m.variant.name(), m.test_auroc);
            }
        }
        Command::Grid(a) => {
            let p = prepare(&a.data, &a.cfg)?;
            let d1 = a.d1.unwrap_or_else(|| DEFAULT_GRID_D1.to_vec());
            let d2 = a.d2.unwrap_or_else(|| DEFAULT_GRID_D2.to_vec());
            let heads = a.heads.unwrap_or_else(|| DEFAULT_GRID_HEADS.to_vec());
            let rows = grid_search(&p.train, &p.valid, &p.config, &d1, &d2, &heads);
            write_csv(&rows, &a.report)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            println!("{} grid cells ({failed} failed) written to {}", rows.len(), a.report.display());
        }
        Command::Trace(a) => {
            let ckpt = Checkpoint::load(&a.ckpt)?;
            let model = ckpt.to_model()?;
            let ds = load_jsonl(&a.data)?;
            let ds = match &ckpt.norm {
                Some(norm) => norm.apply(&ds)?,
                None => ds,
            };
            let paths = export_trace(&model, &ds, &a.ids, &a.outdir)?;
            println!("wrote {} traces to {}", paths.len(), a.outdir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
