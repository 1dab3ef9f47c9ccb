//! Signal files, normalization, windowing and the synthetic generator.
//!
//! Signals are stored as row-major little-endian `f32` values of shape
//! `T_total x N x F` in `<name>.bin`, described by a `<name>.json` sidecar
//! `{"T":..,"N":..,"F":..,"interval_minutes":5}`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::topology::{Edge, RoadNetwork};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalMeta {
    #[serde(rename = "T")]
    pub n_timesteps: usize,
    #[serde(rename = "N")]
    pub n_nodes: usize,
    #[serde(rename = "F")]
    pub n_features: usize,
    pub interval_minutes: u32,
}

/// Multivariate node signals over time. Feature 0 is the forecast target.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalTensor {
    meta: SignalMeta,
    values: Vec<f64>,
}

impl SignalTensor {
    pub fn new(meta: SignalMeta, values: Vec<f64>) -> Result<Self> {
        let expected = meta.n_timesteps * meta.n_nodes * meta.n_features;
        if meta.n_timesteps == 0 || meta.n_nodes == 0 || meta.n_features == 0 {
            return Err(Error::Format(format!("empty signal shape {meta:?}")));
        }
        if values.len() != expected {
            return Err(Error::Format(format!(
                "signal metadata {}x{}x{} needs {expected} values, found {}",
                meta.n_timesteps,
                meta.n_nodes,
                meta.n_features,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let f = meta.n_features;
            let n = meta.n_nodes;
            return Err(Error::Data(format!(
                "non-finite signal value at t={}, node={}, feature={}",
                pos / (n * f),
                (pos / f) % n,
                pos % f
            )));
        }
        Ok(Self { meta, values })
    }

    pub fn meta(&self) -> &SignalMeta {
        &self.meta
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_timesteps(&self) -> usize {
        self.meta.n_timesteps
    }

    pub fn n_nodes(&self) -> usize {
        self.meta.n_nodes
    }

    pub fn n_features(&self) -> usize {
        self.meta.n_features
    }

    pub fn get(&self, t: usize, node: usize, feature: usize) -> f64 {
        let m = &self.meta;
        self.values[(t * m.n_nodes + node) * m.n_features + feature]
    }

    /// Steps `start..start + len` as a `[len, N, F]` tensor.
    pub fn slice_steps(&self, start: usize, len: usize) -> Tensor {
        let stride = self.meta.n_nodes * self.meta.n_features;
        let data = self.values[start * stride..(start + len) * stride].to_vec();
        Tensor::from_parts_checked(vec![len, self.meta.n_nodes, self.meta.n_features], data)
    }

    /// Feature 0 over steps `start..start + len`, as `[len, N]`.
    pub fn flow_steps(&self, start: usize, len: usize) -> Tensor {
        let n = self.meta.n_nodes;
        let data = (start..start + len)
            .flat_map(|t| (0..n).map(move |i| (t, i)))
            .map(|(t, i)| self.get(t, i, 0))
            .collect();
        Tensor::from_parts_checked(vec![len, n], data)
    }

    /// Applies a node relabeling (`node i` becomes `perm[i]`).
    pub fn permute_nodes(&self, perm: &[usize]) -> Result<Self> {
        crate::topology::check_permutation(perm, self.meta.n_nodes)?;
        let (n, f) = (self.meta.n_nodes, self.meta.n_features);
        let mut values = vec![0.0; self.values.len()];
        for t in 0..self.meta.n_timesteps {
            for (i, &p) in perm.iter().enumerate() {
                let src = (t * n + i) * f;
                let dst = (t * n + p) * f;
                values[dst..dst + f].copy_from_slice(&self.values[src..src + f]);
            }
        }
        Self::new(self.meta, values)
    }

    /// Writes `path` (binary) and the sidecar next to it.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.values.len() * 4);
        for &v in &self.values {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let sidecar = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.meta)?;
        fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let sidecar = sidecar_path(path);
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let meta: SignalMeta = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", sidecar.display())))?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Format(format!(
                "{}: length {} is not a multiple of 4",
                path.display(),
                bytes.len()
            )));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Self::new(meta, values)
    }
}

/// `signals.bin` -> `signals.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Loads the signal tensor and the road network, checking they agree on N.
pub fn ingest(signals_path: &Path, edges_path: &Path) -> Result<(SignalTensor, RoadNetwork)> {
    let signals = SignalTensor::read(signals_path)?;
    let net = RoadNetwork::read_csv(edges_path, usize::MAX)?;
    let max_id = net
        .edges()
        .iter()
        .map(|e| e.from.max(e.to) + 1)
        .max()
        .unwrap_or(0);
    if max_id > signals.n_nodes() {
        return Err(Error::Format(format!(
            "signals have N={} nodes but {} references N>={max_id}",
            signals.n_nodes(),
            edges_path.display()
        )));
    }
    // re-read with the real bound so errors carry line numbers
    let net = RoadNetwork::read_csv(edges_path, signals.n_nodes())?;
    Ok((signals, net))
}

/// Per-feature z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Statistics over steps `0..end` of every node.
    pub fn fit(x: &SignalTensor, end: usize) -> Result<Self> {
        let (n, f) = (x.n_nodes(), x.n_features());
        let end = end.min(x.n_timesteps());
        if end == 0 {
            return Err(Error::Data("no steps to compute statistics on".into()));
        }
        let count = (end * n) as f64;
        let mut mean = vec![0.0; f];
        for t in 0..end {
            for i in 0..n {
                for (k, m) in mean.iter_mut().enumerate() {
                    *m += x.get(t, i, k);
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; f];
        for t in 0..end {
            for i in 0..n {
                for (k, v) in var.iter_mut().enumerate() {
                    let d = x.get(t, i, k) - mean[k];
                    *v += d * d;
                }
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / count).sqrt()).collect();
        let stats = Self { mean, std };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(k) = self
            .std
            .iter()
            .position(|&s| !(s > 1e-12) || !s.is_finite())
        {
            return Err(Error::Data(format!(
                "feature {k} is constant on the training range and cannot be normalized"
            )));
        }
        Ok(())
    }

    /// De-normalizes a flow (feature 0) value.
    pub fn denormalize_flow(&self, v: f64) -> f64 {
        v * self.std[0] + self.mean[0]
    }

    pub fn normalize_flow(&self, v: f64) -> f64 {
        (v - self.mean[0]) / self.std[0]
    }
}

/// `(x - mean) / std` per feature.
pub fn zscore(x: &SignalTensor, stats: &NormStats) -> Result<SignalTensor> {
    map_features(x, stats, |v, m, s| (v - m) / s)
}

pub fn inverse_zscore(x: &SignalTensor, stats: &NormStats) -> Result<SignalTensor> {
    map_features(x, stats, |v, m, s| v * s + m)
}

fn map_features(
    x: &SignalTensor,
    stats: &NormStats,
    f: impl Fn(f64, f64, f64) -> f64,
) -> Result<SignalTensor> {
    stats.validate()?;
    let nf = x.n_features();
    if stats.mean.len() != nf || stats.std.len() != nf {
        return Err(Error::dim("zscore", &[nf], &[stats.mean.len()]));
    }
    let values = x
        .values()
        .iter()
        .enumerate()
        .map(|(k, &v)| f(v, stats.mean[k % nf], stats.std[k % nf]))
        .collect();
    SignalTensor::new(x.meta, values)
}

/// One input/target pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSample {
    /// `[T, N, F]`
    pub input: Tensor,
    /// `[T', N]`, feature 0 only.
    pub target: Tensor,
    pub start: usize,
}

/// Number of stride-1 windows of `lookback + horizon` steps.
pub fn window_count(n_timesteps: usize, lookback: usize, horizon: usize) -> Result<usize> {
    if lookback == 0 || horizon == 0 {
        return Err(Error::Config(
            "lookback and horizon must be positive".into(),
        ));
    }
    if n_timesteps < lookback + horizon {
        return Err(Error::Data(format!(
            "series of {n_timesteps} steps is shorter than lookback {lookback} + horizon {horizon}"
        )));
    }
    Ok(n_timesteps - lookback - horizon + 1)
}

pub fn sample_at(
    x: &SignalTensor,
    start: usize,
    lookback: usize,
    horizon: usize,
) -> ForecastSample {
    ForecastSample {
        input: x.slice_steps(start, lookback),
        target: x.flow_steps(start + lookback, horizon),
        start,
    }
}

/// All stride-1 windows in start order.
pub fn make_windows(
    x: &SignalTensor,
    lookback: usize,
    horizon: usize,
) -> Result<Vec<ForecastSample>> {
    let count = window_count(x.n_timesteps(), lookback, horizon)?;
    Ok((0..count)
        .map(|s| sample_at(x, s, lookback, horizon))
        .collect())
}

/// Synthetic data settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_nodes: usize,
    pub n_communities: usize,
    pub t_total: usize,
    pub seed: u64,
    /// Steps per day.
    pub period: usize,
    pub base_level: f64,
    pub amplitude: f64,
    pub noise_std: f64,
    /// Per-community, per-step probability that an event starts.
    pub event_rate: f64,
    pub event_magnitude: f64,
    /// Geometric decay of an event per step.
    pub event_decay: f64,
}

impl SynthConfig {
    pub fn new(n_nodes: usize, n_communities: usize, t_total: usize, seed: u64) -> Self {
        Self {
            n_nodes,
            n_communities,
            t_total,
            seed,
            period: 288,
            base_level: 200.0,
            amplitude: 100.0,
            noise_std: 5.0,
            event_rate: 0.02,
            event_magnitude: 80.0,
            event_decay: 0.8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub signals: SignalTensor,
    pub network: RoadNetwork,
    /// Community of each node.
    pub membership: Vec<usize>,
}

/// Community-structured traffic: a shared daily sinusoid per community with
/// its own phase, events that hit one node and reach the rest of its
/// community one step later, and Gaussian noise. The road network is a ring
/// inside each community plus one bridge between consecutive communities.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthData> {
    let (n, c) = (cfg.n_nodes, cfg.n_communities);
    if n == 0 || c == 0 || c > n || cfg.t_total == 0 || cfg.period == 0 {
        return Err(Error::Config(format!(
            "invalid synthetic sizes: {n} nodes, {c} communities, {} steps",
            cfg.t_total
        )));
    }
    if !(cfg.noise_std >= 0.0) || !(0.0..=1.0).contains(&cfg.event_rate) {
        return Err(Error::Config(
            "noise must be >= 0 and event rate in [0, 1]".into(),
        ));
    }
    let membership: Vec<usize> = (0..n).map(|i| i * c / n).collect();
    let members: Vec<Vec<usize>> = (0..c)
        .map(|k| (0..n).filter(|&i| membership[i] == k).collect())
        .collect();

    let mut edges = Vec::new();
    let mut push = |a: usize, b: usize| {
        if a != b && !edges.iter().any(|e: &Edge| e.from == a && e.to == b) {
            edges.push(Edge {
                from: a,
                to: b,
                weight: 1.0,
            });
        }
    };
    for group in &members {
        let m = group.len();
        if m < 2 {
            continue;
        }
        for k in 0..m {
            let (a, b) = (group[k], group[(k + 1) % m]);
            push(a, b);
            push(b, a);
        }
    }
    for k in 0..c.saturating_sub(1) {
        let (a, b) = (members[k][0], members[k + 1][0]);
        push(a, b);
        push(b, a);
    }
    let network = RoadNetwork::new(n, edges)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let phases: Vec<f64> = (0..c)
        .map(|k| (k as f64 / c as f64) * cfg.period as f64)
        .collect();
    let mut values = vec![0.0; cfg.t_total * n];
    for t in 0..cfg.t_total {
        for i in 0..n {
            let k = membership[i];
            let angle = 2.0 * PI * (t as f64 + phases[k]) / cfg.period as f64;
            values[t * n + i] = cfg.base_level + cfg.amplitude * angle.sin();
        }
    }

    // events: origin node at step s, its community from s + 1
    let horizon = event_span(cfg.event_decay);
    for t in 0..cfg.t_total {
        for group in &members {
            if cfg.event_rate == 0.0 || !rng.random_bool(cfg.event_rate) {
                continue;
            }
            let origin = group[rng.random_range(0..group.len())];
            let scale = cfg.event_magnitude * rng.random_range(0.5..1.5);
            for &node in group {
                let lag = usize::from(node != origin);
                for k in 0..horizon {
                    let step = t + lag + k;
                    if step >= cfg.t_total {
                        break;
                    }
                    values[step * n + node] += scale * cfg.event_decay.powi(k as i32);
                }
            }
        }
    }

    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std)
            .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
        for v in &mut values {
            *v += noise.sample(&mut rng);
        }
    }

    let signals = SignalTensor::new(
        SignalMeta {
            n_timesteps: cfg.t_total,
            n_nodes: n,
            n_features: 1,
            interval_minutes: 5,
        },
        values,
    )?;
    Ok(SynthData {
        signals,
        network,
        membership,
    })
}

fn event_span(decay: f64) -> usize {
    if decay <= 0.0 {
        return 1;
    }
    // until the tail falls below 1% of the peak
    ((0.01f64).ln() / decay.min(0.999).ln()).ceil().max(1.0) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(t: usize, n: usize, f: usize) -> SignalMeta {
        SignalMeta {
            n_timesteps: t,
            n_nodes: n,
            n_features: f,
            interval_minutes: 5,
        }
    }

    #[test]
    fn zscore_by_hand_and_inverse() {
        let x = SignalTensor::new(meta(1, 1, 1), vec![14.0]).unwrap();
        let stats = NormStats {
            mean: vec![10.0],
            std: vec![2.0],
        };
        assert_eq!(zscore(&x, &stats).unwrap().values(), &[2.0]);

        let y = SignalTensor::new(
            meta(4, 2, 2),
            (0..16).map(|v| v as f64 * 1.7 - 3.0).collect(),
        )
        .unwrap();
        let s = NormStats::fit(&y, 4).unwrap();
        let back = inverse_zscore(&zscore(&y, &s).unwrap(), &s).unwrap();
        for (a, b) in back.values().iter().zip(y.values()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_feature_rejected() {
        let x = SignalTensor::new(meta(3, 1, 2), vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap();
        assert!(matches!(NormStats::fit(&x, 3), Err(Error::Data(_))));
        let stats = NormStats {
            mean: vec![0.0],
            std: vec![0.0],
        };
        assert!(zscore(
            &SignalTensor::new(meta(1, 1, 1), vec![1.0]).unwrap(),
            &stats
        )
        .is_err());
    }

    #[test]
    fn window_counts() {
        let x = SignalTensor::new(meta(24, 1, 1), vec![0.0; 24]).unwrap();
        assert_eq!(make_windows(&x, 12, 12).unwrap().len(), 1);
        let x = SignalTensor::new(meta(26, 1, 1), (0..26).map(f64::from).collect()).unwrap();
        let w = make_windows(&x, 12, 12).unwrap();
        assert_eq!(w.len(), 3);
        for (k, s) in w.iter().enumerate() {
            assert_eq!(s.start, k);
            assert_eq!(s.input.data()[0], k as f64);
            assert_eq!(s.target.data()[0], (k + 12) as f64);
        }
        let short = SignalTensor::new(meta(20, 1, 1), vec![0.0; 20]).unwrap();
        assert!(make_windows(&short, 12, 12).is_err());
    }

    #[test]
    fn degenerate_single_value_signal() {
        let x = SignalTensor::new(meta(1, 1, 1), vec![3.5]).unwrap();
        assert_eq!(x.get(0, 0, 0), 3.5);
    }

    #[test]
    fn non_finite_signal_names_index() {
        let mut v = vec![0.0; 6];
        v[5] = f64::NAN;
        let err = SignalTensor::new(meta(3, 2, 1), v).unwrap_err().to_string();
        assert!(err.contains("t=2") && err.contains("node=1"), "{err}");
    }

    #[test]
    fn file_round_trip_and_ingest_checks() {
        let dir = tempfile::tempdir().unwrap();
        let sig = dir.path().join("signals.bin");
        let x = SignalTensor::new(meta(3, 2, 1), vec![1.0, 2.5, -3.0, 4.0, 0.5, 6.0]).unwrap();
        x.write(&sig).unwrap();
        assert_eq!(SignalTensor::read(&sig).unwrap(), x);
        let sidecar = fs::read_to_string(dir.path().join("signals.json")).unwrap();
        assert!(sidecar.contains("\"T\": 3") && sidecar.contains("\"interval_minutes\": 5"));

        let edges = dir.path().join("edges.csv");
        fs::write(&edges, "from,to,weight\n0,1,1.0\n").unwrap();
        let (_, net) = ingest(&sig, &edges).unwrap();
        assert_eq!(net.nnz(), 1);

        fs::write(&edges, "from,to,weight\n0,1,1.0\n3,0,1.0\n").unwrap();
        let err = ingest(&sig, &edges).unwrap_err().to_string();
        assert!(err.contains("N=2") && err.contains("N>=4"), "{err}");
    }

    #[test]
    fn sidecar_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let sig = dir.path().join("s.bin");
        fs::write(&sig, [0u8; 8]).unwrap();
        fs::write(
            dir.path().join("s.json"),
            r#"{"T":3,"N":1,"F":1,"interval_minutes":5}"#,
        )
        .unwrap();
        assert!(matches!(SignalTensor::read(&sig), Err(Error::Format(_))));
    }

    #[test]
    fn synth_is_reproducible() {
        let cfg = SynthConfig::new(9, 3, 400, 11);
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        assert_eq!(a.signals, b.signals);
        assert_eq!(a.network, b.network);
        assert_eq!(a.membership, vec![0, 0, 0, 1, 1, 1, 2, 2, 2]);
    }

    #[test]
    fn noiseless_eventless_synth_is_community_sinusoid() {
        let mut cfg = SynthConfig::new(6, 2, 300, 1);
        cfg.noise_std = 0.0;
        cfg.event_rate = 0.0;
        let data = synth_generate(&cfg).unwrap();
        for t in 0..300 {
            for i in 0..6 {
                let k = data.membership[i];
                let phase = k as f64 / 2.0 * 288.0;
                let expect = 200.0 + 100.0 * (2.0 * PI * (t as f64 + phase) / 288.0).sin();
                assert_eq!(data.signals.get(t, i, 0), expect);
            }
        }
    }

    #[test]
    fn synth_rejects_bad_counts() {
        assert!(synth_generate(&SynthConfig::new(2, 3, 10, 0)).is_err());
        assert!(synth_generate(&SynthConfig::new(0, 0, 10, 0)).is_err());
    }
}
