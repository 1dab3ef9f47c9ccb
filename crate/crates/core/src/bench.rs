//! Forward-pass timing over graph size and window length.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::multiscale::{DyhslModel, ModelConfig, ModelParameters};
use crate::topology::{Edge, RoadNetwork};
use crate::verify::random_tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    /// Node counts swept at `base_steps`.
    pub nodes: Vec<usize>,
    /// Window lengths swept at `base_nodes`.
    pub steps: Vec<usize>,
    pub base_nodes: usize,
    pub base_steps: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Template for everything except `n_nodes` and `lookback`.
    pub model: ModelConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchPoint {
    pub n: usize,
    pub t: usize,
    /// Nonzeros of the road network adjacency.
    pub nnz: usize,
    /// Fastest of the repeated forward passes.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub points: Vec<BenchPoint>,
    /// Log-log slope of time against nnz(A) at fixed T.
    pub slope_nnz: f64,
    /// Log-log slope of time against T at fixed N.
    pub slope_t: f64,
}

/// Road network with a constant number of edges per node: each node links
/// both ways to its next two neighbours on a ring.
pub fn banded_network(n: usize) -> Result<RoadNetwork> {
    let mut edges = Vec::new();
    for i in 0..n {
        for k in 1..=2usize.min(n.saturating_sub(1)) {
            let j = (i + k) % n;
            for (a, b) in [(i, j), (j, i)] {
                if !edges.iter().any(|e: &Edge| e.from == a && e.to == b) {
                    edges.push(Edge {
                        from: a,
                        to: b,
                        weight: 1.0,
                    });
                }
            }
        }
    }
    RoadNetwork::new(n, edges)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Config("a slope needs at least two sizes".into()));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("sizes must not all be equal".into()));
    }
    Ok(sxy / sxx)
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be positive".into()));
        }
        for (what, grid) in [("nodes", &self.nodes), ("steps", &self.steps)] {
            let mut distinct = grid.clone();
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() < 2 || distinct[0] == 0 {
                return Err(Error::Config(format!(
                    "{what} grid needs at least two distinct positive sizes"
                )));
            }
        }
        for (n, t) in self.sizes() {
            self.config_for(n, t).validate()?;
        }
        Ok(())
    }

    fn sizes(&self) -> Vec<(usize, usize)> {
        let mut sizes: Vec<(usize, usize)> =
            self.nodes.iter().map(|&n| (n, self.base_steps)).collect();
        sizes.extend(self.steps.iter().map(|&t| (self.base_nodes, t)));
        sizes
    }

    fn config_for(&self, n: usize, t: usize) -> ModelConfig {
        ModelConfig {
            n_nodes: n,
            lookback: t,
            ..self.model.clone()
        }
    }
}

/// Seconds for the fastest of `repeats` forward passes at one size.
pub fn time_forward(cfg: &ModelConfig, repeats: usize, seed: u64) -> Result<BenchPoint> {
    let net = banded_network(cfg.n_nodes)?;
    let model = DyhslModel::new(cfg.clone(), &net)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParameters::init(cfg, &mut rng)?;
    let x = random_tensor(&mut rng, &[cfg.lookback, cfg.n_nodes, cfg.n_features]);
    // warm-up pass
    model.predict(&params, &x)?;
    let mut best = f64::INFINITY;
    for _ in 0..repeats {
        let start = Instant::now();
        let y = model.predict(&params, &x)?;
        best = best.min(start.elapsed().as_secs_f64());
        std::hint::black_box(y);
    }
    Ok(BenchPoint {
        n: cfg.n_nodes,
        t: cfg.lookback,
        nnz: net.nnz(),
        seconds: best,
    })
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let mut points = Vec::new();
    for (n, t) in cfg.sizes() {
        points.push(time_forward(&cfg.config_for(n, t), cfg.repeats, cfg.seed)?);
    }
    let k = cfg.nodes.len();
    let slope_nnz = log_log_slope(
        &points[..k]
            .iter()
            .map(|p| (p.nnz as f64, p.seconds))
            .collect::<Vec<_>>(),
    )?;
    let slope_t = log_log_slope(
        &points[k..]
            .iter()
            .map(|p| (p.t as f64, p.seconds))
            .collect::<Vec<_>>(),
    )?;
    Ok(BenchReport {
        points,
        slope_nnz,
        slope_t,
    })
}
