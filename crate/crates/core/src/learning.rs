//! Loss, metrics, data splits, Adam, the training loop and the historical
//! average baseline.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{sample_at, window_count, zscore, ForecastSample, NormStats, SignalTensor};
use crate::error::{Error, Result};
use crate::multiscale::{DyhslModel, ModelParameters};
use crate::numerics::Tensor;

/// Mean absolute error.
pub fn mae_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::dim("mae_loss", pred.shape(), target.shape()));
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(total / pred.len() as f64)
}

/// MAE, RMSE and MAPE (percent) over de-normalized values. MAPE skips
/// targets equal to zero and is `None` when every target is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    pub mape: Option<f64>,
}

impl MetricReport {
    pub fn mape_display(&self) -> String {
        self.mape
            .map_or_else(|| "NA".to_string(), |m| format!("{m}"))
    }
}

/// Streaming accumulator behind [`evaluate`].
#[derive(Debug, Clone, Copy, Default)]
pub struct MetricAccumulator {
    abs: f64,
    sq: f64,
    count: usize,
    pct: f64,
    pct_count: usize,
}

impl MetricAccumulator {
    pub fn push(&mut self, pred: f64, target: f64) {
        let err = pred - target;
        self.abs += err.abs();
        self.sq += err * err;
        self.count += 1;
        if target.abs() > MAPE_MASK_THRESHOLD {
            self.pct += (err / target).abs();
            self.pct_count += 1;
        }
    }

    pub fn merge(&mut self, other: &Self) {
        self.abs += other.abs;
        self.sq += other.sq;
        self.count += other.count;
        self.pct += other.pct;
        self.pct_count += other.pct_count;
    }

    pub fn report(&self) -> Result<MetricReport> {
        if self.count == 0 {
            return Err(Error::Data("no values to evaluate".into()));
        }
        let n = self.count as f64;
        Ok(MetricReport {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape: (self.pct_count > 0).then(|| 100.0 * self.pct / self.pct_count as f64),
        })
    }
}

/// Targets with magnitude at or below this are excluded from MAPE.
pub const MAPE_MASK_THRESHOLD: f64 = 0.0;

pub fn evaluate(pred: &[f64], target: &[f64]) -> Result<MetricReport> {
    if pred.len() != target.len() {
        return Err(Error::dim("evaluate", &[pred.len()], &[target.len()]));
    }
    let mut acc = MetricAccumulator::default();
    for (&p, &t) in pred.iter().zip(target) {
        acc.push(p, t);
    }
    acc.report()
}

/// Chronological split of window indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSplit {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// 60/20/20 by window start: train and validation sizes are floored and
/// the test split takes the remainder.
pub fn split_dataset(n_windows: usize) -> Result<DataSplit> {
    if n_windows < 5 {
        return Err(Error::Data(format!(
            "need at least 5 windows to split, found {n_windows}"
        )));
    }
    let train = n_windows * 6 / 10;
    let val = n_windows * 2 / 10;
    Ok(DataSplit {
        train: 0..train,
        val: train..train + val,
        test: train + val..n_windows,
    })
}

/// Windowed, normalized data ready for training. Statistics come from the
/// steps covered by training windows only.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub normalized: SignalTensor,
    pub stats: NormStats,
    pub split: DataSplit,
    pub lookback: usize,
    pub horizon: usize,
}

impl Dataset {
    pub fn prepare(raw: &SignalTensor, lookback: usize, horizon: usize) -> Result<Self> {
        let count = window_count(raw.n_timesteps(), lookback, horizon)?;
        let split = split_dataset(count)?;
        let stats = NormStats::fit(raw, Self::train_steps(&split, lookback, horizon))?;
        Self::with_stats(raw, stats, lookback, horizon)
    }

    /// Uses given statistics instead of fitting them.
    pub fn with_stats(
        raw: &SignalTensor,
        stats: NormStats,
        lookback: usize,
        horizon: usize,
    ) -> Result<Self> {
        let count = window_count(raw.n_timesteps(), lookback, horizon)?;
        let split = split_dataset(count)?;
        Ok(Self {
            normalized: zscore(raw, &stats)?,
            stats,
            split,
            lookback,
            horizon,
        })
    }

    /// Steps `0..k` touched by any training window.
    pub fn train_steps(split: &DataSplit, lookback: usize, horizon: usize) -> usize {
        split.train.end - 1 + lookback + horizon
    }

    pub fn n_windows(&self) -> usize {
        self.split.test.end
    }

    /// Normalized input and target for window `start`.
    pub fn sample(&self, start: usize) -> ForecastSample {
        sample_at(&self.normalized, start, self.lookback, self.horizon)
    }

    pub fn range(&self, which: SplitName) -> Range<usize> {
        match which {
            SplitName::Train => self.split.train.clone(),
            SplitName::Val => self.split.val.clone(),
            SplitName::Test => self.split.test.clone(),
            SplitName::All => 0..self.n_windows(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
            SplitName::All => "all",
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            "all" => Ok(Self::All),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    /// Threads for per-sample gradients. Results do not depend on it.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            grad_clip: None,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.workers == 0 {
            return Err(Error::Config(
                "batch size and workers must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return Err(Error::Config(
                "adam betas must lie in [0, 1) and eps > 0".into(),
            ));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config(
                "gradient clip threshold must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim("adam", &[params.len()], &[grads.len()]));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::dim("adam", p.shape(), g.shape()));
            }
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One row of the metric history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: SplitName,
    pub report: MetricReport,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters with the best validation MAE seen (initial ones if no
    /// epoch improved on them).
    pub params: ModelParameters,
    /// Parameters after the last optimizer step.
    pub last: ModelParameters,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub steps: u64,
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Mini-batch Adam on the MAE loss. Batches are reshuffled every epoch from
/// a generator seeded with `cfg.seed`; per-sample gradients are summed in
/// batch order, so the result is independent of `cfg.workers`.
pub fn fit(
    model: &DyhslModel,
    init: ModelParameters,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<FitOutcome> {
    fit_windows(model, init, data, data.split.train.clone().collect(), cfg)
}

/// [`fit`] restricted to the given training windows.
pub fn fit_windows(
    model: &DyhslModel,
    init: ModelParameters,
    data: &Dataset,
    train_windows: Vec<usize>,
    cfg: &TrainConfig,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let mut params = init;
    let mut history = Vec::new();
    if cfg.epochs == 0 {
        return Ok(FitOutcome {
            last: params.clone(),
            params,
            history,
            best_epoch: 0,
            steps: 0,
        });
    }
    if train_windows.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    let pool = thread_pool(cfg.workers)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps);
    let val_range = data.split.val.clone();
    let mut best_val = if val_range.is_empty() {
        f64::INFINITY
    } else {
        evaluate_windows(model, &params, data, val_range.clone(), &pool)?.mae
    };
    let mut best_params = params.clone();
    let mut best_epoch = 0;
    let mut order = train_windows;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut train_acc = MetricAccumulator::default();
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<(f64, Vec<Tensor>, Tensor)>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&start| {
                        let s = data.sample(start);
                        model.loss_and_grads(&params, &s.input, &s.target)
                    })
                    .collect()
            });
            let mut loss = 0.0;
            let mut total: Option<Vec<Tensor>> = None;
            for (r, &start) in results.into_iter().zip(batch) {
                let (l, grads, pred) =
                    r.map_err(|e| Error::Data(format!("epoch {epoch}, batch {batch_idx}: {e}")))?;
                loss += l;
                let target = data.sample(start).target;
                for (p, t) in pred.data().iter().zip(target.data()) {
                    train_acc.push(
                        data.stats.denormalize_flow(*p),
                        data.stats.denormalize_flow(*t),
                    );
                }
                match &mut total {
                    None => total = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.data_mut()
                                .iter_mut()
                                .zip(g.data())
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            loss *= scale;
            if !loss.is_finite() {
                return Err(Error::Data(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_idx}"
                )));
            }
            let mut grads = total.expect("non-empty batch");
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
            if let Some(limit) = cfg.grad_clip {
                clip_global_norm(&mut grads, limit);
            }
            adam.step(&mut params.tensors_mut(), &grads)?;
            if params.named_tensors().iter().any(|(_, t)| !t.is_finite()) {
                return Err(Error::Data(format!(
                    "parameters became non-finite at epoch {epoch}, batch {batch_idx}"
                )));
            }
        }
        history.push(EpochRecord {
            epoch,
            split: SplitName::Train,
            report: train_acc.report()?,
        });
        if !val_range.is_empty() {
            let val = evaluate_windows(model, &params, data, val_range.clone(), &pool)?;
            history.push(EpochRecord {
                epoch,
                split: SplitName::Val,
                report: val,
            });
            if val.mae < best_val {
                best_val = val.mae;
                best_params = params.clone();
                best_epoch = epoch;
            }
        } else {
            best_params = params.clone();
            best_epoch = epoch;
        }
    }
    Ok(FitOutcome {
        params: best_params,
        last: params,
        history,
        best_epoch,
        steps: adam.steps_taken(),
    })
}

fn clip_global_norm(grads: &mut [Tensor], limit: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > limit {
        let f = limit / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|x| *x *= f);
        }
    }
}

/// De-normalized predictions and targets for a range of windows, each as
/// `T' x N` tensors in window order.
pub fn predict_windows(
    model: &DyhslModel,
    params: &ModelParameters,
    data: &Dataset,
    windows: Range<usize>,
    workers: usize,
) -> Result<Vec<(usize, Tensor, Tensor)>> {
    let pool = thread_pool(workers)?;
    let preds: Vec<Result<(usize, Tensor, Tensor)>> = pool.install(|| {
        windows
            .into_par_iter()
            .map(|start| {
                let s = data.sample(start);
                let pred = model.predict(params, &s.input)?;
                Ok((
                    start,
                    denormalize(&pred, &data.stats),
                    denormalize(&s.target, &data.stats),
                ))
            })
            .collect()
    });
    preds.into_iter().collect()
}

fn denormalize(t: &Tensor, stats: &NormStats) -> Tensor {
    let data = t
        .data()
        .iter()
        .map(|&v| stats.denormalize_flow(v))
        .collect();
    Tensor::from_parts_checked(t.shape().to_vec(), data)
}

fn evaluate_windows(
    model: &DyhslModel,
    params: &ModelParameters,
    data: &Dataset,
    windows: Range<usize>,
    pool: &rayon::ThreadPool,
) -> Result<MetricReport> {
    let accs: Vec<Result<MetricAccumulator>> = pool.install(|| {
        windows
            .into_par_iter()
            .map(|start| {
                let s = data.sample(start);
                let pred = model.predict(params, &s.input)?;
                let mut acc = MetricAccumulator::default();
                for (p, t) in pred.data().iter().zip(s.target.data()) {
                    acc.push(
                        data.stats.denormalize_flow(*p),
                        data.stats.denormalize_flow(*t),
                    );
                }
                Ok(acc)
            })
            .collect()
    });
    let mut total = MetricAccumulator::default();
    for a in accs {
        total.merge(&a?);
    }
    total.report()
}

/// Metrics of the model on one split, in de-normalized units.
pub fn evaluate_model(
    model: &DyhslModel,
    params: &ModelParameters,
    data: &Dataset,
    split: SplitName,
    workers: usize,
) -> Result<MetricReport> {
    evaluate_windows(
        model,
        params,
        data,
        data.range(split),
        &thread_pool(workers)?,
    )
}

/// Historical average: every horizon step predicts the mean of the input
/// window's flow channel, per node. Input `[T, N, F]`, output `[T', N]`.
pub fn ha_baseline(input: &Tensor, horizon: usize) -> Result<Tensor> {
    let shape = input.shape();
    if shape.len() != 3 || horizon == 0 {
        return Err(Error::dim("ha_baseline", shape, &[horizon]));
    }
    let (t, n, f) = (shape[0], shape[1], shape[2]);
    let mut means = vec![0.0; n];
    for step in 0..t {
        for (i, m) in means.iter_mut().enumerate() {
            *m += input.data()[(step * n + i) * f];
        }
    }
    means.iter_mut().for_each(|m| *m /= t as f64);
    let data = (0..horizon).flat_map(|_| means.iter().copied()).collect();
    Tensor::new(vec![horizon, n], data)
}

/// Historical-average metrics on a split, de-normalized.
pub fn ha_report(data: &Dataset, split: SplitName) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::default();
    for start in data.range(split) {
        let s = data.sample(start);
        let pred = ha_baseline(&s.input, data.horizon)?;
        for (p, t) in pred.data().iter().zip(s.target.data()) {
            acc.push(
                data.stats.denormalize_flow(*p),
                data.stats.denormalize_flow(*t),
            );
        }
    }
    acc.report()
}

/// Writes `epoch,split,mae,rmse,mape`.
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::from("epoch,split,mae,rmse,mape\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch,
            r.split.as_str(),
            r.report.mae,
            r.report.rmse,
            r.report.mape_display()
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
