//! Command-line interface.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{run_bench, BenchConfig, BenchReport};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::dataio::{ingest, synth_generate, SynthConfig};
use crate::error::{Error, Result};
use crate::learning::{
    evaluate_model, fit, ha_report, predict_windows, write_history_csv, Dataset, MetricReport,
    SplitName, TrainConfig,
};
use crate::multiscale::{DyhslModel, ModelConfig, ModelParameters};
use crate::verify::{run_all, OracleResult, VerifyOptions};

#[derive(Debug, Parser)]
#[command(
    name = "dyhsl",
    version,
    about = "Traffic forecasting with dynamic hypergraph structure learning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write model.ckpt, history.csv and summary.json.
    Train(TrainArgs),
    /// Report MAE, RMSE and MAPE of a checkpoint on one split.
    Eval(EvalArgs),
    /// Write per-node forecasts of a checkpoint as CSV.
    Predict(PredictArgs),
    /// Generate a community-structured synthetic dataset.
    Synth(SynthArgs),
    /// Run the built-in numerical self-checks.
    Verify(VerifyArgs),
    /// Time the forward pass over graph sizes and window lengths.
    Bench(BenchArgs),
    /// Dump the learned incidence matrix for one input window.
    ExportIncidence(ExportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Signal file (`.bin` with a `.json` sidecar).
    #[arg(long)]
    pub data: PathBuf,
    /// Road network CSV with header `from,to,weight`.
    #[arg(long)]
    pub edges: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Hidden dimension.
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    /// Number of hyperedges.
    #[arg(long, default_value_t = 32)]
    pub hyperedges: usize,
    /// Temporal pooling window sizes.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,6,12")]
    pub windows: Vec<usize>,
    /// Prior graph convolution layers.
    #[arg(long, default_value_t = 6)]
    pub lp: usize,
    /// Multi-scale layers per window size.
    #[arg(long, default_value_t = 2)]
    pub ls: usize,
    /// Hypergraph convolution layers inside each structure-learning block.
    #[arg(long, default_value_t = 1)]
    pub lh: usize,
    /// Forecast horizon in steps.
    #[arg(long, default_value_t = 12)]
    pub horizon: usize,
    /// Input window length in steps.
    #[arg(long, default_value_t = 12)]
    pub lookback: usize,
}

impl ModelArgs {
    pub fn config(&self, n_nodes: usize, n_features: usize) -> ModelConfig {
        ModelConfig {
            n_nodes,
            n_features,
            lookback: self.lookback,
            horizon: self.horizon,
            dim: self.d,
            hyperedges: self.hyperedges,
            prior_layers: self.lp,
            hyper_layers: self.lh,
            scale_layers: self.ls,
            windows: self.windows.clone(),
        }
    }

    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        self.config(1, 1).validate()
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    /// Clip the global gradient norm to this value.
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Threads computing per-sample gradients. Results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[command(flatten)]
    pub model: ModelArgs,
}

impl TrainArgs {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            seed: self.seed,
            grad_clip: self.grad_clip,
            workers: self.workers,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CheckpointArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CheckpointArgs,
    /// train, val, test or all.
    #[arg(long, default_value = "test")]
    pub split: SplitName,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: CheckpointArgs,
    #[arg(long, default_value = "test")]
    pub split: SplitName,
    /// Output CSV with columns `t,node,y_true,y_pred`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: CheckpointArgs,
    /// Start step of the input window; defaults to the first test window.
    #[arg(long)]
    pub start: Option<usize>,
    /// Output CSV with columns `t,node,hyperedge,value`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub nodes: usize,
    #[arg(long, default_value_t = 3)]
    pub communities: usize,
    /// Number of time steps (288 per day).
    #[arg(long, default_value_t = 4032)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Standard deviation of the additive noise.
    #[arg(long, default_value_t = 5.0)]
    pub noise: f64,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, hide = true)]
    pub corrupt_w2_grad: bool,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Directory for bench.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "64,128,256,512")]
    pub nodes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "6,12,24,48")]
    pub steps: Vec<usize>,
    /// N used while sweeping the window length.
    #[arg(long, default_value_t = 128)]
    pub base_nodes: usize,
    /// T used while sweeping the node count.
    #[arg(long, default_value_t = 12)]
    pub base_steps: usize,
    /// Timed passes per size; the fastest is kept.
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 32)]
    pub hyperedges: usize,
    /// Must divide every swept window length.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub windows: Vec<usize>,
    #[arg(long, default_value_t = 6)]
    pub lp: usize,
    #[arg(long, default_value_t = 2)]
    pub ls: usize,
    #[arg(long, default_value_t = 12)]
    pub horizon: usize,
}

impl BenchArgs {
    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            nodes: self.nodes.clone(),
            steps: self.steps.clone(),
            base_nodes: self.base_nodes,
            base_steps: self.base_steps,
            repeats: self.repeats,
            seed: self.seed,
            model: ModelConfig {
                n_nodes: 1,
                n_features: 1,
                lookback: self.base_steps,
                horizon: self.horizon,
                dim: self.d,
                hyperedges: self.hyperedges,
                prior_layers: self.lp,
                hyper_layers: 1,
                scale_layers: self.ls,
                windows: self.windows.clone(),
            },
        }
    }
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub test_mae: f64,
    pub test_rmse: f64,
    /// `null` when every target is zero.
    pub test_mape: Option<f64>,
    pub ha_test_mae: f64,
    pub best_epoch: usize,
    pub steps: u64,
    pub n_parameters: usize,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn check_workers(workers: usize) -> Result<()> {
    if workers == 0 {
        return Err(Error::Config("workers must be at least 1".into()));
    }
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<TrainSummary> {
    args.model.validate()?;
    let train_cfg = args.train_config();
    train_cfg.validate()?;

    let (raw, net) = ingest(&args.data.data, &args.data.edges)?;
    let config = args.model.config(raw.n_nodes(), raw.n_features());
    let data = Dataset::prepare(&raw, config.lookback, config.horizon)?;
    let model = DyhslModel::new(config.clone(), &net)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    rng.set_stream(1);
    let init = ModelParameters::init(&config, &mut rng)?;
    let outcome = fit(&model, init, &data, &train_cfg)?;
    for r in &outcome.history {
        eprintln!(
            "epoch {:>4} {:<5} mae {:.4} rmse {:.4} mape {}",
            r.epoch,
            r.split.as_str(),
            r.report.mae,
            r.report.rmse,
            r.report.mape_display()
        );
    }

    create_dir(&args.out)?;
    Checkpoint {
        meta: CheckpointMeta {
            model: config,
            norm: data.stats.clone(),
            train: Some(train_cfg.clone()),
        },
        params: outcome.params.clone(),
    }
    .save(&args.out.join("model.ckpt"))?;
    write_history_csv(&args.out.join("history.csv"), &outcome.history)?;

    let test = evaluate_model(
        &model,
        &outcome.params,
        &data,
        SplitName::Test,
        args.workers,
    )?;
    let summary = TrainSummary {
        test_mae: test.mae,
        test_rmse: test.rmse,
        test_mape: test.mape,
        ha_test_mae: ha_report(&data, SplitName::Test)?.mae,
        best_epoch: outcome.best_epoch,
        steps: outcome.steps,
        n_parameters: outcome.params.n_parameters(),
    };
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    write_file(&args.out.join("summary.json"), &json)?;
    Ok(summary)
}

/// Checkpoint, model and dataset normalized with the checkpoint statistics.
pub fn load_for_inference(args: &CheckpointArgs) -> Result<(Checkpoint, DyhslModel, Dataset)> {
    check_workers(args.workers)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let (raw, net) = ingest(&args.data.data, &args.data.edges)?;
    let cfg = &ck.meta.model;
    if raw.n_nodes() != cfg.n_nodes || raw.n_features() != cfg.n_features {
        return Err(Error::Config(format!(
            "checkpoint expects N={} F={}, data has N={} F={}",
            cfg.n_nodes,
            cfg.n_features,
            raw.n_nodes(),
            raw.n_features()
        )));
    }
    let data = Dataset::with_stats(&raw, ck.meta.norm.clone(), cfg.lookback, cfg.horizon)?;
    let model = DyhslModel::new(cfg.clone(), &net)?;
    model.check_params(&ck.params)?;
    Ok((ck, model, data))
}

pub fn eval(args: &EvalArgs) -> Result<MetricReport> {
    let (ck, model, data) = load_for_inference(&args.common)?;
    evaluate_model(&model, &ck.params, &data, args.split, args.common.workers)
}

/// Writes the forecast CSV and returns the number of data rows.
pub fn predict(args: &PredictArgs) -> Result<usize> {
    let (ck, model, data) = load_for_inference(&args.common)?;
    let rows = predict_windows(
        &model,
        &ck.params,
        &data,
        data.range(args.split),
        args.common.workers,
    )?;
    let lookback = data.lookback;
    let mut out = String::from("t,node,y_true,y_pred\n");
    let mut count = 0;
    for (start, pred, target) in &rows {
        for s in 0..pred.rows() {
            for node in 0..pred.cols() {
                writeln!(
                    out,
                    "{},{},{},{}",
                    start + lookback + s,
                    node,
                    target.get(s, node),
                    pred.get(s, node)
                )
                .expect("writing to a String");
                count += 1;
            }
        }
    }
    write_file(&args.out, &out)?;
    Ok(count)
}

/// Writes the incidence CSV for the window size 1 scale and returns the
/// number of data rows.
pub fn export_incidence(args: &ExportArgs) -> Result<usize> {
    let (ck, model, data) = load_for_inference(&args.common)?;
    let cfg = model.config();
    let scale =
        cfg.windows.iter().position(|&w| w == 1).ok_or_else(|| {
            Error::Config("the checkpoint has no window of size 1 to export".into())
        })?;
    let start = args.start.unwrap_or(data.split.test.start);
    if start >= data.n_windows() {
        return Err(Error::Config(format!(
            "window start {start} is out of range (0..{})",
            data.n_windows()
        )));
    }
    let sample = data.sample(start);
    let lambda = &model.incidences(&ck.params, &sample.input)?[scale];
    let n = cfg.n_nodes;
    let mut out = String::from("t,node,hyperedge,value\n");
    let mut count = 0;
    for row in 0..lambda.rows() {
        for (e, v) in lambda.row(row).iter().enumerate() {
            writeln!(out, "{},{},{},{}", row / n, row % n, e, v).expect("writing to a String");
            count += 1;
        }
    }
    write_file(&args.out, &out)?;
    Ok(count)
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        noise_std: args.noise,
        ..SynthConfig::new(args.nodes, args.communities, args.steps, args.seed)
    };
    let data = synth_generate(&cfg)?;
    create_dir(&args.out)?;
    data.signals.write(&args.out.join("signals.bin"))?;
    data.network.write_csv(&args.out.join("edges.csv"))?;
    let mut membership = String::from("node,community\n");
    for (i, c) in data.membership.iter().enumerate() {
        writeln!(membership, "{i},{c}").expect("writing to a String");
    }
    write_file(&args.out.join("membership.csv"), &membership)
}

pub fn verify(args: &VerifyArgs) -> Result<Vec<OracleResult>> {
    run_all(VerifyOptions {
        seed: args.seed,
        corrupt_w2_grad: args.corrupt_w2_grad,
    })
}

pub fn bench(args: &BenchArgs) -> Result<BenchReport> {
    let cfg = args.bench_config();
    cfg.validate()?;
    let report = run_bench(&cfg)?;
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        let mut csv = String::from("n,t,nnz,seconds\n");
        for p in &report.points {
            writeln!(csv, "{},{},{},{}", p.n, p.t, p.nnz, p.seconds).expect("writing to a String");
        }
        write_file(&dir.join("bench.csv"), &csv)?;
    }
    Ok(report)
}

fn print_report(split: SplitName, r: &MetricReport) {
    println!(
        "split={} mae={:.6} rmse={:.6} mape={}",
        split.as_str(),
        r.mae,
        r.rmse,
        r.mape_display()
    );
}

/// Runs one command. `Ok(false)` means the command ran but a check failed.
pub fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(a) => {
            let s = train(&a)?;
            println!("{}", serde_json::to_string(&s)?);
            println!("wrote {}", a.out.display());
        }
        Command::Eval(a) => {
            let r = eval(&a)?;
            if a.json {
                println!("{}", serde_json::to_string(&r)?);
            } else {
                print_report(a.split, &r);
            }
        }
        Command::Predict(a) => {
            let rows = predict(&a)?;
            println!("wrote {rows} rows to {}", a.out.display());
        }
        Command::ExportIncidence(a) => {
            let rows = export_incidence(&a)?;
            println!("wrote {rows} rows to {}", a.out.display());
        }
        Command::Synth(a) => {
            synth(&a)?;
            println!("wrote {}", a.out.display());
        }
        Command::Verify(a) => {
            let results = verify(&a)?;
            let mut ok = true;
            for r in &results {
                ok &= r.passed();
                println!(
                    "{:<5} {:<15} observed {:<12.3e} tolerance {:<9.1e} {}",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.name,
                    r.observed,
                    r.tolerance,
                    r.detail
                );
            }
            return Ok(ok);
        }
        Command::Bench(a) => {
            let r = bench(&a)?;
            println!("n,t,nnz,seconds");
            for p in &r.points {
                println!("{},{},{},{:.6}", p.n, p.t, p.nnz, p.seconds);
            }
            println!("slope_nnz={:.3} slope_t={:.3}", r.slope_nnz, r.slope_t);
        }
    }
    Ok(true)
}
