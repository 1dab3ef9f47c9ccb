//! Dense, loop-based reference computations shared by the integration tests.
//! Nothing here calls into the model code beyond reading parameter values.

#![allow(dead_code)]

use dyhsl::multiscale::{ModelConfig, ModelParameters};
use dyhsl::numerics::Tensor;
use dyhsl::topology::RoadNetwork;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = zeros(n, m);
    for i in 0..n {
        assert_eq!(a[i].len(), k);
        for p in 0..k {
            for j in 0..m {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len())
        .map(|j| a.iter().map(|row| row[j]).collect())
        .collect()
}

pub fn relu(a: &Mat) -> Mat {
    a.iter()
        .map(|r| r.iter().map(|v| v.max(0.0)).collect())
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn hadamard(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).collect())
        .collect()
}

/// Time-expanded adjacency: row `(t, i)` is `t * n + i`. Spatial weight
/// `A_ij` within a step, weight 1 on `(t,i)->(t,i)` and `(t,i)->(t+1,i)`.
pub fn temporal_adjacency(n: usize, edges: &[(usize, usize, f64)], t: usize) -> Mat {
    let mut a = zeros(n * t, n * t);
    for s in 0..t {
        for &(i, j, w) in edges {
            if i != j {
                a[s * n + i][s * n + j] = w;
            }
        }
        for i in 0..n {
            a[s * n + i][s * n + i] = 1.0;
            if s + 1 < t {
                a[s * n + i][(s + 1) * n + i] = 1.0;
            }
        }
    }
    a
}

pub fn row_normalize(a: &Mat) -> Mat {
    a.iter()
        .map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn edge_list(net: &RoadNetwork) -> Vec<(usize, usize, f64)> {
    net.edges()
        .iter()
        .map(|e| (e.from, e.to, e.weight))
        .collect()
}

pub fn normalized_temporal(net: &RoadNetwork, t: usize) -> Mat {
    row_normalize(&temporal_adjacency(net.n_nodes(), &edge_list(net), t))
}

/// Explicit ordered-pair sum `sum_j sum_k A_ij A_ik (h_j W1) ⊙ (h_k W2)`.
pub fn interaction_pairs(a: &Mat, h: &Mat, w1: &Mat, w2: &Mat) -> Mat {
    let n = a.len();
    let d = w1[0].len();
    let mut out = zeros(n, d);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let c = a[i][j] * a[i][k];
                if c == 0.0 {
                    continue;
                }
                for q in 0..d {
                    let left: f64 = (0..h[j].len()).map(|r| h[j][r] * w1[r][q]).sum();
                    let right: f64 = (0..h[k].len()).map(|r| h[k][r] * w2[r][q]).sum();
                    out[i][q] += c * left * right;
                }
            }
        }
    }
    out
}

/// The whole forecast, one step at a time, returned as `T' x N`.
pub fn reference_forward(
    cfg: &ModelConfig,
    net: &RoadNetwork,
    p: &ModelParameters,
    x: &Tensor,
) -> Mat {
    let (n, t, f, d) = (cfg.n_nodes, cfg.lookback, cfg.n_features, cfg.dim);
    let proj = to_mat(&p.encoder.input_proj);
    let spatial = to_mat(&p.encoder.spatial_emb);
    let temporal = to_mat(&p.encoder.temporal_emb);

    // node features
    let mut h = zeros(n * t, d);
    for s in 0..t {
        for i in 0..n {
            for c in 0..d {
                let mut v = spatial[i][c] + temporal[s][c];
                for k in 0..f {
                    v += x.data()[(s * n + i) * f + k] * proj[k][c];
                }
                h[s * n + i][c] = v;
            }
        }
    }

    // prior graph convolution
    let a_full = normalized_temporal(net, t);
    for w in &p.encoder.layer_weights {
        h = relu(&matmul(&a_full, &matmul(&h, &to_mat(w))));
    }

    // multi-scale blocks
    let mut per_scale = Vec::new();
    for (scale, &eps) in p.scales.iter().zip(&cfg.windows) {
        let steps = t / eps;
        let mut delta = zeros(n * steps, d);
        for g in 0..steps {
            for i in 0..n {
                for c in 0..d {
                    delta[g * n + i][c] = (0..eps)
                        .map(|k| h[(g * eps + k) * n + i][c])
                        .fold(f64::NEG_INFINITY, f64::max);
                }
            }
        }
        let a = normalized_temporal(net, steps);
        let w_inc = to_mat(&scale.hyper.incidence_factor);
        let u = to_mat(&scale.hyper.hyperedge_relations);
        let (w1, w2, w3) = (
            to_mat(&scale.igc.w1),
            to_mat(&scale.igc.w2),
            to_mat(&scale.igc.w3),
        );
        for _ in 0..cfg.scale_layers {
            // hypergraph branch
            let mut states = delta.clone();
            for _ in 0..cfg.hyper_layers {
                let lambda = matmul(&states, &w_inc);
                let gathered = matmul(&transpose(&lambda), &states);
                let e = add(&relu(&matmul(&u, &gathered)), &gathered);
                states = matmul(&lambda, &e);
            }
            // interactive branch
            let agg = matmul(&a, &delta);
            let pi = relu(&hadamard(&matmul(&agg, &w1), &matmul(&agg, &w2)));
            let r = add(&pi, &relu(&matmul(&agg, &w3)));
            delta = add(&states, &r)
                .iter()
                .map(|row| row.iter().map(|v| 0.5 * v).collect())
                .collect();
        }
        let mut gamma = zeros(n, d);
        for g in 0..steps {
            for i in 0..n {
                for c in 0..d {
                    gamma[i][c] += delta[g * n + i][c] / steps as f64;
                }
            }
        }
        per_scale.push(gamma);
    }

    // softmax fusion
    let logits = p.fusion.logits.data();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let mut gamma = zeros(n, d);
    for (j, g) in per_scale.iter().enumerate() {
        let w = (logits[j] - m).exp() / z;
        for i in 0..n {
            for c in 0..d {
                gamma[i][c] += w * g[i][c];
            }
        }
    }

    // readout
    let weight = to_mat(&p.readout.weight);
    let bias = p.readout.bias.data();
    let mut out = zeros(cfg.horizon, n);
    for i in 0..n {
        let joined: Vec<f64> = gamma[i]
            .iter()
            .chain(&h[(t - 1) * n + i])
            .copied()
            .collect();
        for s in 0..cfg.horizon {
            out[s][i] = bias[s]
                + joined
                    .iter()
                    .zip(&weight)
                    .map(|(v, w)| v * w[s])
                    .sum::<f64>();
        }
    }
    out
}

pub fn max_gap(a: &Mat, b: &Tensor) -> f64 {
    let mut worst: f64 = 0.0;
    for (r, row) in a.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            worst = worst.max((v - b.get(r, c)).abs());
        }
    }
    worst
}

pub fn std_dev(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}
