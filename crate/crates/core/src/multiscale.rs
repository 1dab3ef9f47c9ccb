//! Multi-scale correlation extraction, scale fusion, readout and the full
//! forward pass.
//!
//! For every window size the encoder states are max-pooled in time, passed
//! through `L_s` layers that average the hypergraph and interactive blocks,
//! and mean-pooled over the remaining steps. The per-scale node embeddings
//! are fused with softmax weights, concatenated with the encoder state at
//! the last input step, and mapped to the horizon by an affine readout.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::encoder::{
    build_node_features, prior_graph_convolution, uniform, BoundEncoder, EncoderParams,
};
use crate::error::{Error, Result, StageExt};
use crate::hyperstruct::{dhsl_block, BoundHyper, HyperParams};
use crate::interaction::{igc_block, BoundIgc, IgcParams};
use crate::numerics::{Tape, Tensor, Var};
use crate::topology::{check_permutation, RoadNetwork, TemporalGraph};

/// Model hyperparameters. Defaults follow the reference configuration:
/// 6 prior layers, 32 hyperedges, windows {1,2,3,4,6,12}, 2 scale layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_nodes: usize,
    pub n_features: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub dim: usize,
    pub hyperedges: usize,
    pub prior_layers: usize,
    pub hyper_layers: usize,
    pub scale_layers: usize,
    pub windows: Vec<usize>,
}

impl ModelConfig {
    pub fn with_defaults(n_nodes: usize, n_features: usize) -> Self {
        Self {
            n_nodes,
            n_features,
            lookback: 12,
            horizon: 12,
            dim: 64,
            hyperedges: 32,
            prior_layers: 6,
            hyper_layers: 1,
            scale_layers: 2,
            windows: vec![1, 2, 3, 4, 6, 12],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_nodes", self.n_nodes),
            ("n_features", self.n_features),
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("dim", self.dim),
            ("hyperedges", self.hyperedges),
            ("prior_layers", self.prior_layers),
            ("hyper_layers", self.hyper_layers),
            ("scale_layers", self.scale_layers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.windows.is_empty() {
            return Err(Error::Config(
                "at least one pooling window is required".into(),
            ));
        }
        for &w in &self.windows {
            if w == 0 || !self.lookback.is_multiple_of(w) {
                return Err(Error::Config(format!(
                    "window {w} does not divide lookback {}",
                    self.lookback
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleParams {
    pub hyper: HyperParams,
    pub igc: IgcParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// One logit per window size.
    pub logits: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutParams {
    /// `2d x T'`
    pub weight: Tensor,
    /// `T'`
    pub bias: Tensor,
}

/// Every trainable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub encoder: EncoderParams,
    pub scales: Vec<ScaleParams>,
    pub fusion: FusionParams,
    pub readout: ReadoutParams,
}

impl ModelParameters {
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let encoder = EncoderParams::init(
            rng,
            config.n_nodes,
            config.lookback,
            config.n_features,
            d,
            config.prior_layers,
        );
        let scales = config
            .windows
            .iter()
            .map(|&w| {
                let rows = config.n_nodes * config.lookback / w;
                ScaleParams {
                    hyper: HyperParams::init(rng, d, config.hyperedges, rows),
                    igc: IgcParams::init(rng, d),
                }
            })
            .collect();
        let fusion = FusionParams {
            logits: Tensor::zeros(&[config.windows.len()]),
        };
        let readout = ReadoutParams {
            weight: uniform(rng, &[2 * d, config.horizon], 1.0 / ((2 * d) as f64).sqrt()),
            bias: Tensor::zeros(&[config.horizon]),
        };
        Ok(Self {
            encoder,
            scales,
            fusion,
            readout,
        })
    }

    /// Named tensors in a fixed order shared by [`Self::tensors_mut`] and
    /// [`Self::bind`].
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.tensors();
        for (j, s) in self.scales.iter().enumerate() {
            out.extend(s.hyper.tensors(&format!("scale{j}.hyper")));
            out.extend(s.igc.tensors(&format!("scale{j}.igc")));
        }
        out.push(("fusion.logits".into(), &self.fusion.logits));
        out.push(("readout.weight".into(), &self.readout.weight));
        out.push(("readout.bias".into(), &self.readout.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.tensors_mut();
        for s in &mut self.scales {
            out.extend(s.hyper.tensors_mut());
            out.extend(s.igc.tensors_mut());
        }
        out.push(&mut self.fusion.logits);
        out.push(&mut self.readout.weight);
        out.push(&mut self.readout.bias);
        out
    }

    pub fn n_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rebuilds a parameter set from named tensors, using `self` as the
    /// template for names and shapes.
    pub fn with_tensors(&self, mut named: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut out = self.clone();
        let names: Vec<String> = self.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(out.tensors_mut()) {
            let t = named
                .remove(name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        Ok(out)
    }

    /// Records every tensor as a leaf; the returned vars follow
    /// [`Self::named_tensors`] order.
    pub fn bind(&self, tape: &mut Tape) -> (BoundParams, Vec<Var>) {
        let encoder = self.encoder.bind(tape);
        let scales: Vec<(BoundHyper, BoundIgc)> = self
            .scales
            .iter()
            .map(|s| (s.hyper.bind(tape), s.igc.bind(tape)))
            .collect();
        let logits = tape.leaf(self.fusion.logits.clone());
        let weight = tape.leaf(self.readout.weight.clone());
        let bias = tape.leaf(self.readout.bias.clone());
        let mut vars = encoder.vars();
        for (h, i) in &scales {
            vars.extend([h.incidence_factor, h.hyperedge_relations, i.w1, i.w2, i.w3]);
        }
        vars.extend([logits, weight, bias]);
        (
            BoundParams {
                encoder,
                scales,
                logits,
                readout: BoundReadout { weight, bias },
            },
            vars,
        )
    }

    /// Moves the spatial embedding of node `i` to row `perm[i]`.
    pub fn permute_nodes(&self, perm: &[usize]) -> Result<Self> {
        let emb = &self.encoder.spatial_emb;
        check_permutation(perm, emb.rows())?;
        let d = emb.cols();
        let mut data = vec![0.0; emb.len()];
        for (i, &p) in perm.iter().enumerate() {
            data[p * d..(p + 1) * d].copy_from_slice(emb.row(i));
        }
        let mut out = self.clone();
        out.encoder.spatial_emb = Tensor::new(emb.shape().to_vec(), data)?;
        Ok(out)
    }

    /// All-zero parameters with the shapes of `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        let mut p = Self::init(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        for t in p.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        Ok(p)
    }
}

#[derive(Debug, Clone)]
pub struct BoundParams {
    pub encoder: BoundEncoder,
    pub scales: Vec<(BoundHyper, BoundIgc)>,
    pub logits: Var,
    pub readout: BoundReadout,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundReadout {
    pub weight: Var,
    pub bias: Var,
}

/// Local-max pooling over non-overlapping windows of `window` steps.
/// A window of one returns the input unchanged.
pub fn temporal_pool(tape: &mut Tape, h: Var, n_nodes: usize, window: usize) -> Result<Var> {
    if window == 1 {
        return Ok(h);
    }
    tape.time_max_pool(h, n_nodes, window)
}

/// One averaged layer: `(BLOCK_H(x) + BLOCK_I(x)) / 2`. Also returns the
/// incidence matrices learned inside the hypergraph block.
pub fn mhce_layer(
    tape: &mut Tape,
    delta: Var,
    graph: &TemporalGraph,
    hyper: &BoundHyper,
    igc: &BoundIgc,
    hyper_layers: usize,
) -> Result<(Var, Vec<Var>)> {
    let dhsl = dhsl_block(tape, delta, hyper, hyper_layers)?;
    let interactive = igc_block(tape, delta, graph, igc)?;
    let sum = tape.add(dhsl.states, interactive)?;
    Ok((tape.scale(sum, 0.5)?, dhsl.incidences))
}

/// `gamma = sum_j softmax(logits)_j * gamma_j`.
pub fn fuse_scales(tape: &mut Tape, per_scale: &[Var], logits: Var) -> Result<Var> {
    let weights = tape.softmax(logits)?;
    tape.weighted_sum(weights, per_scale)
}

/// `[gamma | h_last] * W + b` per node, returned as `T' x N`.
pub fn forecast_head(tape: &mut Tape, gamma: Var, h_last: Var, p: &BoundReadout) -> Result<Var> {
    let joined = tape.concat_cols(gamma, h_last)?;
    let mapped = tape.matmul(joined, p.weight)?;
    let biased = tape.add_row_bias(mapped, p.bias)?;
    tape.transpose(biased)
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `T' x N`, normalized units.
    pub prediction: Var,
    /// Incidence matrix of the first hypergraph layer in the first scale
    /// layer, one per window size.
    pub incidences: Vec<Var>,
}

/// A configured model bound to a road network, with one temporal graph per
/// distinct pooled length.
#[derive(Debug, Clone)]
pub struct DyhslModel {
    config: ModelConfig,
    graphs: BTreeMap<usize, TemporalGraph>,
    param_shapes: Vec<(String, Vec<usize>)>,
}

impl DyhslModel {
    pub fn new(config: ModelConfig, net: &RoadNetwork) -> Result<Self> {
        config.validate()?;
        if net.n_nodes() != config.n_nodes {
            return Err(Error::Config(format!(
                "road network has {} nodes but the model expects {}",
                net.n_nodes(),
                config.n_nodes
            )));
        }
        let mut graphs = BTreeMap::new();
        let mut lengths = vec![config.lookback];
        lengths.extend(config.windows.iter().map(|w| config.lookback / w));
        for len in lengths {
            if let std::collections::btree_map::Entry::Vacant(e) = graphs.entry(len) {
                e.insert(TemporalGraph::build(net, len)?);
            }
        }
        let param_shapes = ModelParameters::zeros(&config)?
            .named_tensors()
            .into_iter()
            .map(|(name, t)| (name, t.shape().to_vec()))
            .collect();
        Ok(Self {
            config,
            graphs,
            param_shapes,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Temporal graph over `t_steps` steps.
    pub fn graph(&self, t_steps: usize) -> Option<&TemporalGraph> {
        self.graphs.get(&t_steps)
    }

    /// Fails unless `params` has exactly the tensors this config needs.
    pub fn check_params(&self, params: &ModelParameters) -> Result<()> {
        let named = params.named_tensors();
        if named.len() != self.param_shapes.len() {
            return Err(Error::Config(format!(
                "parameter set has {} tensors, config expects {}",
                named.len(),
                self.param_shapes.len()
            )));
        }
        for ((name, t), (expect_name, shape)) in named.iter().zip(&self.param_shapes) {
            if name != expect_name || t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, config expects {expect_name} {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }

    /// Full forward pass for one input window `x` of shape `[T, N, F]`.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: &Tensor) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let n = cfg.n_nodes;
        let expected = [cfg.lookback, n, cfg.n_features];
        if x.shape() != expected {
            return Err(Error::dim("dyhsl_forward", x.shape(), &expected));
        }
        let base = &self.graphs[&cfg.lookback];
        let features = build_node_features(tape, x, &p.encoder).stage("encoder")?;
        let h = prior_graph_convolution(tape, features, base, &p.encoder.layer_weights)
            .stage("prior graph convolution")?;

        let mut per_scale = Vec::with_capacity(cfg.windows.len());
        let mut incidences = Vec::with_capacity(cfg.windows.len());
        for (&window, (hyper, igc)) in cfg.windows.iter().zip(&p.scales) {
            let graph = &self.graphs[&(cfg.lookback / window)];
            let mut delta = temporal_pool(tape, h, n, window).stage("temporal pooling")?;
            for layer in 0..cfg.scale_layers {
                let (next, lambdas) = mhce_layer(tape, delta, graph, hyper, igc, cfg.hyper_layers)
                    .stage("multi-scale layer")?;
                if layer == 0 {
                    incidences.push(lambdas[0]);
                }
                delta = next;
            }
            per_scale.push(tape.time_mean_pool(delta, n).stage("time mean pooling")?);
        }
        let gamma = fuse_scales(tape, &per_scale, p.logits).stage("scale fusion")?;
        let h_last = tape
            .slice_rows(h, (cfg.lookback - 1) * n, n)
            .stage("readout")?;
        let prediction = forecast_head(tape, gamma, h_last, &p.readout).stage("readout")?;
        Ok(ForwardOutput {
            prediction,
            incidences,
        })
    }

    /// Prediction (`T' x N`, normalized units) without keeping the tape.
    pub fn predict(&self, params: &ModelParameters, x: &Tensor) -> Result<Tensor> {
        self.check_params(params)?;
        let mut tape = Tape::new();
        let (bound, _) = params.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(out.prediction).clone())
    }

    /// First-layer incidence matrix (`T/w*N x I`) of every window size `w`,
    /// in config order.
    pub fn incidences(&self, params: &ModelParameters, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_params(params)?;
        let mut tape = Tape::new();
        let (bound, _) = params.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, x)?;
        Ok(out
            .incidences
            .iter()
            .map(|&v| tape.value(v).clone())
            .collect())
    }

    /// MAE loss and its gradient for every parameter tensor, in
    /// [`ModelParameters::named_tensors`] order.
    pub fn loss_and_grads(
        &self,
        params: &ModelParameters,
        x: &Tensor,
        target: &Tensor,
    ) -> Result<(f64, Vec<Tensor>, Tensor)> {
        self.check_params(params)?;
        let mut tape = Tape::new();
        let (bound, vars) = params.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, x)?;
        let loss = tape.mae(out.prediction, std::sync::Arc::new(target.clone()))?;
        tape.backward(loss)?;
        let grads = vars
            .iter()
            .map(|&v| tape.grad(v).expect("gradients present after backward"))
            .collect();
        Ok((
            tape.value(loss).data()[0],
            grads,
            tape.value(out.prediction).clone(),
        ))
    }
}
