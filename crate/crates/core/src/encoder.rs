//! Observation features and prior graph convolution over the temporal graph.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::topology::TemporalGraph;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `F x d`
    pub input_proj: Tensor,
    /// `N x d`
    pub spatial_emb: Tensor,
    /// `T x d`
    pub temporal_emb: Tensor,
    /// One `d x d` matrix per prior convolution layer.
    pub layer_weights: Vec<Tensor>,
}

impl EncoderParams {
    pub fn init<R: Rng>(
        rng: &mut R,
        n_nodes: usize,
        t_steps: usize,
        n_features: usize,
        dim: usize,
        n_layers: usize,
    ) -> Self {
        let emb = 1.0 / (dim as f64).sqrt();
        let he = (6.0 / dim as f64).sqrt();
        Self {
            input_proj: uniform(rng, &[n_features, dim], 1.0 / (n_features as f64).sqrt()),
            spatial_emb: uniform(rng, &[n_nodes, dim], emb),
            temporal_emb: uniform(rng, &[t_steps, dim], emb),
            layer_weights: (0..n_layers)
                .map(|_| uniform(rng, &[dim, dim], he))
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.input_proj.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundEncoder {
        BoundEncoder {
            input_proj: tape.leaf(self.input_proj.clone()),
            spatial_emb: tape.leaf(self.spatial_emb.clone()),
            temporal_emb: tape.leaf(self.temporal_emb.clone()),
            layer_weights: self
                .layer_weights
                .iter()
                .map(|w| tape.leaf(w.clone()))
                .collect(),
        }
    }

    pub(crate) fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("encoder.input_proj".to_string(), &self.input_proj),
            ("encoder.spatial_emb".to_string(), &self.spatial_emb),
            ("encoder.temporal_emb".to_string(), &self.temporal_emb),
        ];
        for (l, w) in self.layer_weights.iter().enumerate() {
            out.push((format!("encoder.layer{l}"), w));
        }
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.input_proj,
            &mut self.spatial_emb,
            &mut self.temporal_emb,
        ];
        out.extend(self.layer_weights.iter_mut());
        out
    }
}

/// Encoder parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundEncoder {
    pub input_proj: Var,
    pub spatial_emb: Var,
    pub temporal_emb: Var,
    pub layer_weights: Vec<Var>,
}

impl BoundEncoder {
    pub(crate) fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.input_proj, self.spatial_emb, self.temporal_emb];
        out.extend(&self.layer_weights);
        out
    }
}

/// Row `(t, i)` = `x[t, i, :] * input_proj + spatial_emb[i] + temporal_emb[t]`.
///
/// `x` has shape `[T, N, F]`; the result is `(T*N) x d`, time-major.
pub fn build_node_features(tape: &mut Tape, x: &Tensor, p: &BoundEncoder) -> Result<Var> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::dim("build_node_features", shape, &[0, 0, 0]));
    }
    let (t_steps, n_nodes, n_features) = (shape[0], shape[1], shape[2]);
    let proj_shape = tape.shape(p.input_proj).to_vec();
    let spatial_rows = tape.shape(p.spatial_emb)[0];
    let temporal_rows = tape.shape(p.temporal_emb)[0];
    if proj_shape[0] != n_features || spatial_rows != n_nodes || temporal_rows != t_steps {
        return Err(Error::dim(
            "build_node_features",
            shape,
            &[temporal_rows, spatial_rows, proj_shape[0]],
        ));
    }
    let signal = tape.constant(x.clone().reshape(vec![t_steps * n_nodes, n_features])?);
    let projected = tape.matmul(signal, p.input_proj)?;

    let node_idx: Arc<[usize]> = (0..t_steps).flat_map(|_| 0..n_nodes).collect();
    let step_idx: Arc<[usize]> = (0..t_steps)
        .flat_map(|t| std::iter::repeat_n(t, n_nodes))
        .collect();
    let spatial = tape.gather_rows(p.spatial_emb, node_idx)?;
    let temporal = tape.gather_rows(p.temporal_emb, step_idx)?;
    let emb = tape.add(spatial, temporal)?;
    tape.add(projected, emb)
}

/// `L_p` rounds of `h <- relu(A_norm h W_l)`.
pub fn prior_graph_convolution(
    tape: &mut Tape,
    h: Var,
    graph: &TemporalGraph,
    layer_weights: &[Var],
) -> Result<Var> {
    let norm = graph.require_normalized()?;
    if tape.shape(h)[0] != graph.n_nodes() {
        return Err(Error::dim(
            "prior_graph_convolution",
            tape.shape(h),
            &[graph.n_nodes()],
        ));
    }
    let mut h = h;
    for &w in layer_weights {
        let hw = tape.matmul(h, w)?;
        let agg = tape.spmm(norm, hw)?;
        h = tape.relu(agg)?;
    }
    Ok(h)
}

pub(crate) fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_parts_checked(shape.to_vec(), data)
}
