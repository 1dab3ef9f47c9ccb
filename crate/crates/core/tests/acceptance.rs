//! Acceptance suite. Runs every criterion in order inside one test so that
//! timing-sensitive checks are not disturbed by concurrent tests, prints one
//! PASS/FAIL line per criterion and fails if any criterion failed.

#![allow(clippy::needless_range_loop, clippy::type_complexity)]

mod common;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use dyhsl::dataio::{synth_generate, SignalTensor, SynthConfig};
use dyhsl::interaction::{interaction_preactivation, IgcParams};
use dyhsl::learning::{fit_windows, predict_windows, Dataset, TrainConfig};
use dyhsl::multiscale::{temporal_pool, DyhslModel, ModelConfig, ModelParameters};
use dyhsl::numerics::{softmax, Tape, Tensor};
use dyhsl::topology::{Edge, RoadNetwork, TemporalGraph};
use dyhsl::verify::{
    model_gradient_errors, random_network, random_tensor, smooth_tiny_problem, tiny_config,
    GRADIENT_STEP,
};

const GRADIENT_TOL: f64 = 1e-4;
const GRADIENT_SECONDS: f64 = 60.0;
const FACTORIZATION_TOL: f64 = 1e-10;
const TRANSCRIPTION_TOL: f64 = 1e-9;
const ROW_SUM_TOL: f64 = 1e-9;
const FUSION_TOL: f64 = 1e-12;
const PERMUTATION_TOL: f64 = 1e-9;
const OVERFIT_FRACTION: f64 = 0.05;
const OVERFIT_STEPS: usize = 500;
const SKILL_RATIO: f64 = 0.8;
const SKILL_SECONDS: f64 = 600.0;
const SLOPE_RANGE: (f64, f64) = (0.7, 1.3);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_dyhsl")
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(bin())
        .args(args)
        .output()
        .map_err(|e| format!("spawn: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "dyhsl {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let (problem, seed) = smooth_tiny_problem(&tiny_config(), 0).expect("tiny problem");
    let errors = model_gradient_errors(&problem, GRADIENT_STEP, false).expect("gradient check");
    let secs = start.elapsed().as_secs_f64();
    let (name, worst) =
        errors
            .iter()
            .cloned()
            .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    outcome(
        worst < GRADIENT_TOL
            && secs < GRADIENT_SECONDS
            && errors.len() == problem.params.named_tensors().len(),
        format!(
            "{} parameter groups, max relative error {worst:.2e} ({name}) < {GRADIENT_TOL:e}, \
             instance seed {seed}, {secs:.1} s < {GRADIENT_SECONDS} s",
            errors.len()
        ),
    )
}

fn factorization_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=5);
        let t = rng.random_range(1..=3);
        let d = rng.random_range(1..=4);
        let net = random_network(&mut rng, n, 0.5).unwrap();
        let h = random_tensor(&mut rng, &[n * t, d]);
        let params = IgcParams::init(&mut rng, d);

        let graph = TemporalGraph::build(&net, t).unwrap();
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let bound = params.bind(&mut tape);
        let pre = interaction_preactivation(&mut tape, hv, &graph, &bound).unwrap();

        let expected = interaction_pairs(
            &normalized_temporal(&net, t),
            &to_mat(&h),
            &to_mat(&params.w1),
            &to_mat(&params.w2),
        );
        worst = worst.max(max_gap(&expected, tape.value(pre)));
    }
    outcome(
        worst < FACTORIZATION_TOL,
        format!("100 instances (N<=5, T<=3), max gap {worst:.2e} < {FACTORIZATION_TOL:e}"),
    )
}

fn path_config() -> ModelConfig {
    ModelConfig {
        n_nodes: 3,
        n_features: 1,
        lookback: 4,
        horizon: 2,
        dim: 4,
        hyperedges: 2,
        prior_layers: 1,
        hyper_layers: 1,
        scale_layers: 1,
        windows: vec![1, 2],
    }
}

fn path_network() -> RoadNetwork {
    let e = |from, to| Edge {
        from,
        to,
        weight: 1.0,
    };
    RoadNetwork::new(3, vec![e(0, 1), e(1, 0), e(1, 2), e(2, 1)]).unwrap()
}

/// Non-zero fusion logits and bias so every term of the readout matters.
fn perturb(params: &mut ModelParameters, rng: &mut ChaCha8Rng) {
    for v in params.fusion.logits.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    for v in params.readout.bias.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
}

fn transcription_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut setups = vec![(path_config(), path_network())];
        let tiny = tiny_config();
        setups.push((
            tiny.clone(),
            random_network(&mut rng, tiny.n_nodes, 0.3).unwrap(),
        ));
        let mut layered = tiny;
        layered.scale_layers = 2;
        layered.hyper_layers = 2;
        layered.n_features = 2;
        layered.windows = vec![1, 2, 3];
        setups.push((
            layered.clone(),
            random_network(&mut rng, layered.n_nodes, 0.3).unwrap(),
        ));
        for (cfg, net) in setups {
            let mut params = ModelParameters::init(&cfg, &mut rng).unwrap();
            perturb(&mut params, &mut rng);
            let x = random_tensor(&mut rng, &[cfg.lookback, cfg.n_nodes, cfg.n_features]);
            let model = DyhslModel::new(cfg.clone(), &net).unwrap();
            let got = model.predict(&params, &x).unwrap();
            let expected = reference_forward(&cfg, &net, &params, &x);
            worst = worst.max(max_gap(&expected, &got));
            cases += 1;
        }
    }
    outcome(
        worst < TRANSCRIPTION_TOL,
        format!("{cases} models, max gap {worst:.2e} < {TRANSCRIPTION_TOL:e}"),
    )
}

fn structural_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut row_gap: f64 = 0.0;
    let mut nnz_bad = 0;
    for _ in 0..50 {
        let n = rng.random_range(1..=25);
        let t = rng.random_range(1..=12);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in 0..n {
                // diagonal entries included on purpose
                if rng.random_bool(0.15) {
                    edges.push(Edge {
                        from: i,
                        to: j,
                        weight: rng.random_range(0.1..3.0),
                    });
                }
            }
        }
        let off_diag = edges.iter().filter(|e| e.from != e.to).count();
        let net = RoadNetwork::new(n, edges).unwrap();
        let g = TemporalGraph::build(&net, t).unwrap();
        if g.adjacency().nnz() != t * off_diag + n * t + n * (t - 1) {
            nnz_bad += 1;
        }
        for s in g.require_normalized().unwrap().row_sums() {
            row_gap = row_gap.max((s - 1.0).abs());
        }
    }

    let mut fusion_gap: f64 = 0.0;
    for _ in 0..100 {
        let j = rng.random_range(1..=8);
        let logits: Vec<f64> = (0..j).map(|_| rng.random_range(-20.0..20.0)).collect();
        fusion_gap = fusion_gap.max((softmax(&logits).iter().sum::<f64>() - 1.0).abs());
    }

    let h = random_tensor(&mut rng, &[5 * 12, 7]);
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let pooled = temporal_pool(&mut tape, hv, 5, 1).unwrap();
    let identity = tape.value(pooled) == &h;

    let mut perm_gap: f64 = 0.0;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig {
            n_features: 2,
            ..tiny_config()
        };
        let n = cfg.n_nodes;
        let net = random_network(&mut rng, n, 0.3).unwrap();
        let mut params = ModelParameters::init(&cfg, &mut rng).unwrap();
        perturb(&mut params, &mut rng);
        let x = random_tensor(&mut rng, &[cfg.lookback, n, cfg.n_features]);
        let base = DyhslModel::new(cfg.clone(), &net)
            .unwrap()
            .predict(&params, &x)
            .unwrap();

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let moved_edges = net
            .edges()
            .iter()
            .map(|e| Edge {
                from: perm[e.from],
                to: perm[e.to],
                weight: e.weight,
            })
            .collect();
        let moved_net = RoadNetwork::new(n, moved_edges).unwrap();
        let mut moved_params = params.clone();
        for i in 0..n {
            for c in 0..cfg.dim {
                let v = params.encoder.spatial_emb.get(i, c);
                moved_params.encoder.spatial_emb.data_mut()[perm[i] * cfg.dim + c] = v;
            }
        }
        let f = cfg.n_features;
        let mut moved_x = vec![0.0; x.len()];
        for s in 0..cfg.lookback {
            for i in 0..n {
                for k in 0..f {
                    moved_x[(s * n + perm[i]) * f + k] = x.data()[(s * n + i) * f + k];
                }
            }
        }
        let moved_x = Tensor::new(x.shape().to_vec(), moved_x).unwrap();
        let moved = DyhslModel::new(cfg.clone(), &moved_net)
            .unwrap()
            .predict(&moved_params, &moved_x)
            .unwrap();
        for s in 0..cfg.horizon {
            for i in 0..n {
                perm_gap = perm_gap.max((base.get(s, i) - moved.get(s, perm[i])).abs());
            }
        }
    }

    outcome(
        row_gap < ROW_SUM_TOL
            && nnz_bad == 0
            && fusion_gap < FUSION_TOL
            && identity
            && perm_gap < PERMUTATION_TOL,
        format!(
            "row sums {row_gap:.1e} < {ROW_SUM_TOL:e}, nnz mismatches {nnz_bad}/50, \
             fusion {fusion_gap:.1e} < {FUSION_TOL:e}, window-1 identity {identity}, \
             permutation {perm_gap:.1e} < {PERMUTATION_TOL:e}"
        ),
    )
}

fn overfit() -> Outcome {
    // tiny model, noise-free generator output; 20 steps give five 12-in/4-out
    // windows of which the first four are fitted
    let cfg = dyhsl::verify::tiny_config();
    let synth = SynthConfig {
        noise_std: 0.0,
        ..SynthConfig::new(cfg.n_nodes, 3, 20, 5)
    };
    let data = synth_generate(&synth).unwrap();
    let ds = Dataset::prepare(&data.signals, cfg.lookback, cfg.horizon).unwrap();
    let model = DyhslModel::new(cfg.clone(), &data.network).unwrap();
    let init = ModelParameters::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let tc = TrainConfig {
        epochs: OVERFIT_STEPS,
        batch_size: 4,
        learning_rate: 0.01,
        ..TrainConfig::default()
    };
    let fitted = fit_windows(&model, init, &ds, (0..4).collect(), &tc).unwrap();
    let preds = predict_windows(&model, &fitted.last, &ds, 0..4, 1).unwrap();

    let mut targets = Vec::new();
    let mut abs_err = 0.0;
    for (start, pred, _) in &preds {
        for s in 0..cfg.horizon {
            for i in 0..cfg.n_nodes {
                // raw signal, not the de-normalized target
                let y = data.signals.get(start + cfg.lookback + s, i, 0);
                targets.push(y);
                abs_err += (pred.get(s, i) - y).abs();
            }
        }
    }
    let mae = abs_err / targets.len() as f64;
    let std = std_dev(&targets);
    outcome(
        mae < OVERFIT_FRACTION * std && fitted.steps as usize <= OVERFIT_STEPS,
        format!(
            "train MAE {mae:.3} < {OVERFIT_FRACTION} x target std {std:.3} after {} steps",
            fitted.steps
        ),
    )
}

/// HA on the test split computed straight from the raw file.
fn ha_test_mae(signals: &SignalTensor, lookback: usize, horizon: usize) -> f64 {
    let windows = signals.n_timesteps() - lookback - horizon + 1;
    let train = windows * 6 / 10;
    let val = windows * 2 / 10;
    let n = signals.n_nodes();
    let (mut total, mut count) = (0.0, 0usize);
    for start in train + val..windows {
        for i in 0..n {
            let mean = (start..start + lookback)
                .map(|t| signals.get(t, i, 0))
                .sum::<f64>()
                / lookback as f64;
            for t in start + lookback..start + lookback + horizon {
                total += (signals.get(t, i, 0) - mean).abs();
                count += 1;
            }
        }
    }
    total / count as f64
}

fn skill(dir: &Path) -> Outcome {
    let start = Instant::now();
    let data = dir.join("data");
    let run = dir.join("run");
    let result = run_cli(&[
        "synth",
        "--out",
        p(&data),
        "--nodes",
        "30",
        "--communities",
        "3",
        "--steps",
        "4032",
        "--seed",
        "7",
    ])
    .and_then(|_| {
        run_cli(&[
            "train",
            "--data",
            p(&data.join("signals.bin")),
            "--edges",
            p(&data.join("edges.csv")),
            "--out",
            p(&run),
            "--seed",
            "0",
            "--epochs",
            "30",
            "--d",
            "16",
            "--hyperedges",
            "8",
            "--windows",
            "1,2,3",
        ])
    });
    if let Err(e) = result {
        return outcome(false, e);
    }
    let secs = start.elapsed().as_secs_f64();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    let mae = summary["test_mae"].as_f64().unwrap();
    let signals = SignalTensor::read(&data.join("signals.bin")).unwrap();
    let ha = ha_test_mae(&signals, 12, 12);
    let ratio = mae / ha;
    outcome(
        ratio <= SKILL_RATIO && secs < SKILL_SECONDS,
        format!(
            "test MAE {mae:.3} vs HA {ha:.3}: ratio {ratio:.3} <= {SKILL_RATIO}, \
             {secs:.0} s < {SKILL_SECONDS} s"
        ),
    )
}

fn slope(points: &[(f64, f64)]) -> f64 {
    let k = points.len() as f64;
    let logs: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    let mx = logs.iter().map(|v| v.0).sum::<f64>() / k;
    let my = logs.iter().map(|v| v.1).sum::<f64>() / k;
    let num: f64 = logs.iter().map(|v| (v.0 - mx) * (v.1 - my)).sum();
    let den: f64 = logs.iter().map(|v| (v.0 - mx).powi(2)).sum();
    num / den
}

fn complexity(dir: &Path) -> Outcome {
    let out = dir.join("bench");
    if let Err(e) = run_cli(&["bench", "--out", p(&out)]) {
        return outcome(false, e);
    }
    let csv = fs::read_to_string(out.join("bench.csv")).unwrap();
    let rows: Vec<(usize, usize, usize, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let v: Vec<&str> = l.split(',').collect();
            (
                v[0].parse().unwrap(),
                v[1].parse().unwrap(),
                v[2].parse().unwrap(),
                v[3].parse().unwrap(),
            )
        })
        .collect();
    // default grids: four node counts at T=12, then T in {6,12,24,48}
    let (node_rows, step_rows) = rows.split_at(4);
    let t_fixed: Vec<(f64, f64)> = node_rows.iter().map(|r| (r.2 as f64, r.3)).collect();
    let n_fixed: Vec<(f64, f64)> = step_rows.iter().map(|r| (r.1 as f64, r.3)).collect();
    let t_steps: Vec<usize> = step_rows.iter().map(|r| r.1).collect();
    let fixed =
        node_rows.iter().all(|r| r.1 == 12) && step_rows.iter().all(|r| r.0 == step_rows[0].0);
    let s_nnz = slope(&t_fixed);
    let s_t = slope(&n_fixed);
    let inside = |s: f64| (SLOPE_RANGE.0..=SLOPE_RANGE.1).contains(&s);
    outcome(
        inside(s_nnz) && inside(s_t) && fixed && t_steps == [6, 12, 24, 48],
        format!(
            "slope vs nnz(A) {s_nnz:.3}, slope vs T {s_t:.3}, both within [{}, {}]",
            SLOPE_RANGE.0, SLOPE_RANGE.1
        ),
    )
}

fn reproducibility(dir: &Path) -> Outcome {
    let data = dir.join("repro-data");
    if let Err(e) = run_cli(&[
        "synth",
        "--out",
        p(&data),
        "--nodes",
        "12",
        "--communities",
        "3",
        "--steps",
        "600",
        "--seed",
        "3",
    ]) {
        return outcome(false, e);
    }
    let mut summaries = Vec::new();
    for k in 0..2 {
        let run = dir.join(format!("repro-{k}"));
        let r = run_cli(&[
            "train",
            "--data",
            p(&data.join("signals.bin")),
            "--edges",
            p(&data.join("edges.csv")),
            "--out",
            p(&run),
            "--seed",
            "11",
            "--epochs",
            "2",
            "--d",
            "16",
            "--hyperedges",
            "8",
            "--windows",
            "1,2,3",
            "--workers",
            "1",
        ]);
        if let Err(e) = r {
            return outcome(false, e);
        }
        summaries.push(fs::read(run.join("summary.json")).unwrap());
    }
    outcome(
        summaries[0] == summaries[1],
        format!(
            "summary.json identical across two runs ({} bytes)",
            summaries[0].len()
        ),
    )
}

fn incidence_dynamics(dir: &Path) -> Outcome {
    let data = dir.join("data");
    let ckpt = dir.join("run").join("model.ckpt");
    let csv_path = dir.join("incidence.csv");
    if let Err(e) = run_cli(&[
        "export-incidence",
        "--data",
        p(&data.join("signals.bin")),
        "--edges",
        p(&data.join("edges.csv")),
        "--checkpoint",
        p(&ckpt),
        "--out",
        p(&csv_path),
    ]) {
        return outcome(false, e);
    }
    let (t_steps, n, hyperedges) = (12, 30, 8);
    let mut lambda = vec![vec![vec![0.0f64; hyperedges]; n]; t_steps];
    let csv = fs::read_to_string(&csv_path).unwrap();
    let mut rows = 0;
    for line in csv.lines().skip(1) {
        let v: Vec<&str> = line.split(',').collect();
        let (t, i, e): (usize, usize, usize) = (
            v[0].parse().unwrap(),
            v[1].parse().unwrap(),
            v[2].parse().unwrap(),
        );
        lambda[t][i][e] = v[3].parse().unwrap();
        rows += 1;
    }

    let mut diff = 0.0;
    for t in 1..t_steps {
        for i in 0..n {
            for e in 0..hyperedges {
                diff += (lambda[t][i][e] - lambda[t - 1][i][e]).abs();
            }
        }
    }
    diff /= ((t_steps - 1) * n * hyperedges) as f64;

    let membership: Vec<usize> = fs::read_to_string(data.join("membership.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    let vectors: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..t_steps).flat_map(|t| lambda[t][i].clone()).collect())
        .collect();
    let (mut same, mut same_n, mut cross, mut cross_n) = (0.0, 0, 0.0, 0);
    for i in 0..n {
        for j in i + 1..n {
            let c = cosine(&vectors[i], &vectors[j]);
            if membership[i] == membership[j] {
                same += c;
                same_n += 1;
            } else {
                cross += c;
                cross_n += 1;
            }
        }
    }
    let (same, cross) = (same / same_n as f64, cross / cross_n as f64);
    outcome(
        rows == t_steps * n * hyperedges && diff > 0.0 && same > cross,
        format!(
            "{rows} rows, mean inter-step change {diff:.3e} > 0, \
             same-community cosine {same:.4} > cross-community {cross:.4}"
        ),
    )
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("gradient oracle", Box::new(gradient_oracle)),
        ("interaction factorization", Box::new(factorization_oracle)),
        ("whole-model transcription", Box::new(transcription_oracle)),
        ("structural invariants", Box::new(structural_invariants)),
        ("overfit four windows", Box::new(overfit)),
        ("forecast skill vs HA", Box::new(|| skill(dir.path()))),
        ("linear complexity", Box::new(|| complexity(dir.path()))),
        (
            "reproducible summary",
            Box::new(|| reproducibility(dir.path())),
        ),
        (
            "incidence dynamics",
            Box::new(|| incidence_dynamics(dir.path())),
        ),
    ];
    let mut failed = Vec::new();
    for (k, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = check();
        println!(
            "criterion {} {} {name}: {} [{:.1} s]",
            k + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed.push(k + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
