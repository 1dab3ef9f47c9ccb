//! Self-checks run by `dyhsl verify`.
//!
//! Each check compares the production code path with an independent
//! computation (brute-force loops, finite differences or a known identity)
//! and reports the observed discrepancy next to its tolerance.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::interaction::{interaction_preactivation, IgcParams};
use crate::multiscale::{DyhslModel, ModelConfig, ModelParameters};
use crate::numerics::{finite_difference_check, softmax, Tape, Tensor};
use crate::topology::{Edge, RoadNetwork, TemporalGraph};

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const GRADIENT_STEP: f64 = 1e-5;
/// Instances whose closest relu or residual kink is nearer than this are
/// resampled before finite differencing.
pub const KINK_MARGIN: f64 = 1e-4;
pub const FACTORIZATION_TOLERANCE: f64 = 1e-10;
pub const PERMUTATION_TOLERANCE: f64 = 1e-9;
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;
pub const FUSION_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub name: &'static str,
    pub observed: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl OracleResult {
    pub fn passed(&self) -> bool {
        self.observed <= self.tolerance
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Scales the analytic gradient of every `W2` by 1.5 before comparing.
    pub corrupt_w2_grad: bool,
}

/// A small random model with one input window and target.
#[derive(Debug)]
pub struct TinyProblem {
    pub network: RoadNetwork,
    pub model: DyhslModel,
    pub params: ModelParameters,
    pub input: Tensor,
    pub target: Tensor,
}

/// N=6, T=12, T'=4, F=1, d=8, I=4, windows {1,2}, two prior layers and one
/// multi-scale layer.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_nodes: 6,
        n_features: 1,
        lookback: 12,
        horizon: 4,
        dim: 8,
        hyperedges: 4,
        prior_layers: 2,
        hyper_layers: 1,
        scale_layers: 1,
        windows: vec![1, 2],
    }
}

pub fn random_network<R: Rng>(rng: &mut R, n: usize, extra_prob: f64) -> Result<RoadNetwork> {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let ring = n > 1 && j == (i + 1) % n;
            if i != j && (ring || rng.random_bool(extra_prob)) {
                edges.push(Edge {
                    from: i,
                    to: j,
                    weight: rng.random_range(0.5..2.0),
                });
            }
        }
    }
    RoadNetwork::new(n, edges)
}

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite normal samples")
}

pub fn tiny_problem(config: ModelConfig, seed: u64) -> Result<TinyProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let network = random_network(&mut rng, config.n_nodes, 0.3)?;
    let params = ModelParameters::init(&config, &mut rng)?;
    let input = random_tensor(
        &mut rng,
        &[config.lookback, config.n_nodes, config.n_features],
    );
    let target = random_tensor(&mut rng, &[config.horizon, config.n_nodes]);
    let model = DyhslModel::new(config, &network)?;
    Ok(TinyProblem {
        network,
        model,
        params,
        input,
        target,
    })
}

impl TinyProblem {
    /// Closest kink to any relu pre-activation or loss residual.
    pub fn kink_distance(&self) -> Result<f64> {
        let mut tape = Tape::new();
        let (bound, _) = self.params.bind(&mut tape);
        let out = self.model.forward(&mut tape, &bound, &self.input)?;
        tape.mae(out.prediction, Arc::new(self.target.clone()))?;
        Ok(tape.min_kink_distance())
    }
}

/// First seed at or after `seed` whose problem stays clear of kinks.
pub fn smooth_tiny_problem(config: &ModelConfig, seed: u64) -> Result<(TinyProblem, u64)> {
    for s in seed..seed + 1000 {
        let p = tiny_problem(config.clone(), s)?;
        if p.kink_distance()? >= KINK_MARGIN {
            return Ok((p, s));
        }
    }
    Err(Error::Data(format!(
        "no kink-free instance within 1000 seeds of {seed}"
    )))
}

/// Worst relative error per parameter tensor between backpropagation and
/// central differences of the MAE loss.
pub fn model_gradient_errors(
    problem: &TinyProblem,
    step: f64,
    corrupt_w2_grad: bool,
) -> Result<Vec<(String, f64)>> {
    let names: Vec<String> = problem
        .params
        .named_tensors()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let mut out = Vec::with_capacity(names.len());
    for (k, name) in names.iter().enumerate() {
        let corrupt = corrupt_w2_grad && name.ends_with(".igc.w2");
        let theta = problem.params.named_tensors()[k].1.clone();
        let err = finite_difference_check(
            |t| {
                let mut p = problem.params.clone();
                *p.tensors_mut()[k] = t.clone();
                let (loss, grads, _) =
                    problem
                        .model
                        .loss_and_grads(&p, &problem.input, &problem.target)?;
                let mut g = grads[k].clone();
                if corrupt {
                    g.data_mut().iter_mut().for_each(|v| *v *= 1.5);
                }
                Ok((loss, g))
            },
            &theta,
            step,
        )?;
        out.push((name.clone(), err));
    }
    Ok(out)
}

fn gradient_oracle(opts: VerifyOptions) -> Result<OracleResult> {
    let (problem, seed) = smooth_tiny_problem(&tiny_config(), opts.seed)?;
    let errors = model_gradient_errors(&problem, GRADIENT_STEP, opts.corrupt_w2_grad)?;
    let (worst_name, worst) =
        errors
            .iter()
            .cloned()
            .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    Ok(OracleResult {
        name: "gradient",
        observed: worst,
        tolerance: GRADIENT_TOLERANCE,
        detail: format!(
            "{} tensors, step {GRADIENT_STEP:e}, instance seed {seed}, worst {worst_name}",
            errors.len()
        ),
    })
}

/// `sum_j sum_k A_ij A_ik (h_j W1) ⊙ (h_k W2)` by explicit loops.
pub fn interaction_double_sum(a: &[Vec<f64>], h: &Tensor, w1: &Tensor, w2: &Tensor) -> Vec<f64> {
    let n = a.len();
    let (d_in, d_out) = (w1.rows(), w1.cols());
    let project = |w: &Tensor, j: usize| -> Vec<f64> {
        (0..d_out)
            .map(|c| (0..d_in).map(|r| h.get(j, r) * w.get(r, c)).sum())
            .collect()
    };
    let p1: Vec<Vec<f64>> = (0..n).map(|j| project(w1, j)).collect();
    let p2: Vec<Vec<f64>> = (0..n).map(|j| project(w2, j)).collect();
    let mut out = vec![0.0; n * d_out];
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let c = a[i][j] * a[i][k];
                if c == 0.0 {
                    continue;
                }
                for q in 0..d_out {
                    out[i * d_out + q] += c * p1[j][q] * p2[k][q];
                }
            }
        }
    }
    out
}

/// Largest gap between the factorized interaction term and the explicit
/// double sum over `instances` random small graphs.
pub fn factorization_gap(seed: u64, instances: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = rng.random_range(1..=5);
        let t = rng.random_range(1..=3);
        let d = rng.random_range(1..=4);
        let net = random_network(&mut rng, n, 0.4)?;
        let graph = TemporalGraph::build(&net, t)?;
        let rows = graph.n_nodes();
        let a = graph.require_normalized()?.to_dense();
        let h = random_tensor(&mut rng, &[rows, d]);
        let params = IgcParams::init(&mut rng, d);
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let bound = params.bind(&mut tape);
        let pre = interaction_preactivation(&mut tape, hv, &graph, &bound)?;
        let brute = interaction_double_sum(&a, &h, &params.w1, &params.w2);
        for (x, y) in tape.value(pre).data().iter().zip(&brute) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(worst)
}

fn factorization_oracle(opts: VerifyOptions) -> Result<OracleResult> {
    let instances = 100;
    Ok(OracleResult {
        name: "factorization",
        observed: factorization_gap(opts.seed, instances)?,
        tolerance: FACTORIZATION_TOLERANCE,
        detail: format!("{instances} random graphs with N<=5, T<=3"),
    })
}

/// Relabels nodes with a random permutation and returns the largest gap
/// between the permuted forecast and the forecast of the permuted problem.
pub fn permutation_gap(problem: &TinyProblem, seed: u64) -> Result<f64> {
    let cfg = problem.model.config().clone();
    let n = cfg.n_nodes;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let base = problem.model.predict(&problem.params, &problem.input)?;
    let net = problem.network.permuted(&perm)?;
    let model = DyhslModel::new(cfg.clone(), &net)?;
    let params = problem.params.permute_nodes(&perm)?;
    let (t, f) = (cfg.lookback, cfg.n_features);
    let mut x = vec![0.0; t * n * f];
    for s in 0..t {
        for (i, &p) in perm.iter().enumerate() {
            for k in 0..f {
                x[(s * n + p) * f + k] = problem.input.data()[(s * n + i) * f + k];
            }
        }
    }
    let permuted = model.predict(&params, &Tensor::new(vec![t, n, f], x)?)?;
    let mut worst: f64 = 0.0;
    for s in 0..cfg.horizon {
        for (i, &p) in perm.iter().enumerate() {
            worst = worst.max((base.get(s, i) - permuted.get(s, p)).abs());
        }
    }
    Ok(worst)
}

fn permutation_oracle(opts: VerifyOptions) -> Result<OracleResult> {
    let problem = tiny_problem(tiny_config(), opts.seed)?;
    Ok(OracleResult {
        name: "permutation",
        observed: permutation_gap(&problem, opts.seed)?,
        tolerance: PERMUTATION_TOLERANCE,
        detail: "forecast of relabelled nodes vs relabelled forecast".into(),
    })
}

fn pooling_oracle(opts: VerifyOptions) -> Result<OracleResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (n, t, d) = (3, 12, 4);
    let h = random_tensor(&mut rng, &[t * n, d]);
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let mut worst: f64 = 0.0;

    // window 1 is the identity
    let same = crate::multiscale::temporal_pool(&mut tape, hv, n, 1)?;
    worst = worst.max(tape.value(same).max_abs_diff(&h));

    for window in [2, 3, 4, 6, 12] {
        let pooled = crate::multiscale::temporal_pool(&mut tape, hv, n, window)?;
        let p = tape.value(pooled);
        for g in 0..t / window {
            for i in 0..n {
                for c in 0..d {
                    let group: Vec<f64> = (0..window)
                        .map(|k| h.get((g * window + k) * n + i, c))
                        .collect();
                    let max = group.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mean = group.iter().sum::<f64>() / window as f64;
                    let v = p.get(g * n + i, c);
                    worst = worst.max((v - max).abs());
                    // max pooling dominates mean pooling
                    worst = worst.max((mean - v).max(0.0));
                }
            }
        }
    }
    Ok(OracleResult {
        name: "pooling",
        observed: worst,
        tolerance: 0.0,
        detail: "identity at window 1, exact group maxima, max >= mean".into(),
    })
}

fn adjacency_oracle(opts: VerifyOptions) -> Result<OracleResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst: f64 = 0.0;
    let mut nnz_mismatches = 0;
    for _ in 0..20 {
        let n = rng.random_range(1..=20);
        let t = rng.random_range(1..=12);
        let net = random_network(&mut rng, n, 0.2)?;
        let graph = TemporalGraph::build(&net, t)?;
        let expected = t * net.off_diagonal_nnz() + n * t + n * (t - 1);
        if graph.adjacency().nnz() != expected {
            nnz_mismatches += 1;
        }
        for s in graph.require_normalized()?.row_sums() {
            worst = worst.max((s - 1.0).abs());
        }
    }
    Ok(OracleResult {
        name: "row-stochastic",
        observed: if nnz_mismatches > 0 {
            f64::INFINITY
        } else {
            worst
        },
        tolerance: ROW_SUM_TOLERANCE,
        detail: format!("20 random graphs, {nnz_mismatches} nnz-formula mismatches"),
    })
}

fn fusion_oracle(opts: VerifyOptions) -> Result<OracleResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let j = rng.random_range(1..=6);
        let logits: Vec<f64> = (0..j).map(|_| rng.random_range(-5.0..5.0)).collect();
        let shift = rng.random_range(-50.0..50.0);
        let w = softmax(&logits);
        let shifted = softmax(&logits.iter().map(|v| v + shift).collect::<Vec<_>>());
        worst = worst.max((w.iter().sum::<f64>() - 1.0).abs());
        for (a, b) in w.iter().zip(&shifted) {
            worst = worst.max((a - b).abs());
        }

        let inputs: Vec<Tensor> = (0..j).map(|_| random_tensor(&mut rng, &[3, 2])).collect();
        let mut tape = Tape::new();
        let lv = tape.constant(Tensor::vector(logits.clone())?);
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let fused = crate::multiscale::fuse_scales(&mut tape, &vars, lv)?;
        for (k, v) in tape.value(fused).data().iter().enumerate() {
            let manual: f64 = inputs.iter().zip(&w).map(|(x, wj)| wj * x.data()[k]).sum();
            worst = worst.max((v - manual).abs());
        }
    }
    Ok(OracleResult {
        name: "fusion",
        observed: worst,
        tolerance: FUSION_TOLERANCE,
        detail: "softmax sums to one, shift invariance, weighted sum".into(),
    })
}

/// Runs every check. Errors inside a check abort the run.
pub fn run_all(opts: VerifyOptions) -> Result<Vec<OracleResult>> {
    Ok(vec![
        gradient_oracle(opts)?,
        factorization_oracle(opts)?,
        permutation_oracle(opts)?,
        pooling_oracle(opts)?,
        adjacency_oracle(opts)?,
        fusion_oracle(opts)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for r in run_all(VerifyOptions::default()).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn corrupted_w2_gradient_fails_only_the_gradient_check() {
        let opts = VerifyOptions {
            seed: 0,
            corrupt_w2_grad: true,
        };
        for r in run_all(opts).unwrap() {
            assert_eq!(r.passed(), r.name != "gradient", "{r:?}");
        }
    }
}
