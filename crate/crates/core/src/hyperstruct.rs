//! Dynamic hypergraph structure learning.
//!
//! The incidence matrix is produced from the current states by a low-rank
//! factor, `Lambda = H W`, so it changes with every input. Hyperedge
//! embeddings are `E = relu(U Lambda^T H) + Lambda^T H` and nodes read back
//! `Lambda E`.

use rand::Rng;

use crate::encoder::uniform;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    /// `d x I`
    pub incidence_factor: Tensor,
    /// `I x I`
    pub hyperedge_relations: Tensor,
}

impl HyperParams {
    /// `rows` is the number of temporal nodes the block will see. The
    /// incidence factor is scaled so that the three-fold product in the
    /// block starts near unit magnitude.
    pub fn init<R: Rng>(rng: &mut R, dim: usize, n_hyperedges: usize, rows: usize) -> Self {
        let std = 1.0 / ((dim * n_hyperedges * rows) as f64).sqrt();
        Self {
            incidence_factor: uniform(rng, &[dim, n_hyperedges], std * 3f64.sqrt()),
            hyperedge_relations: uniform(
                rng,
                &[n_hyperedges, n_hyperedges],
                1.0 / (n_hyperedges as f64).sqrt(),
            ),
        }
    }

    pub fn n_hyperedges(&self) -> usize {
        self.incidence_factor.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundHyper {
        BoundHyper {
            incidence_factor: tape.leaf(self.incidence_factor.clone()),
            hyperedge_relations: tape.leaf(self.hyperedge_relations.clone()),
        }
    }

    pub(crate) fn tensors(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{prefix}.incidence_factor"), &self.incidence_factor),
            (
                format!("{prefix}.hyperedge_relations"),
                &self.hyperedge_relations,
            ),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.incidence_factor, &mut self.hyperedge_relations]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundHyper {
    pub incidence_factor: Var,
    pub hyperedge_relations: Var,
}

/// `Lambda = H W`, unnormalized and possibly signed.
pub fn learn_incidence(tape: &mut Tape, h: Var, p: &BoundHyper) -> Result<Var> {
    tape.matmul(h, p.incidence_factor)
}

/// `E = relu(U Lambda^T H) + Lambda^T H`, shape `I x d`.
pub fn hyperedge_embed(tape: &mut Tape, h: Var, incidence: Var, p: &BoundHyper) -> Result<Var> {
    if tape.shape(h)[0] != tape.shape(incidence)[0] {
        return Err(Error::dim(
            "hyperedge_embed",
            tape.shape(h),
            tape.shape(incidence),
        ));
    }
    let lt = tape.transpose(incidence)?;
    let gathered = tape.matmul(lt, h)?;
    let related = tape.matmul(p.hyperedge_relations, gathered)?;
    let activated = tape.relu(related)?;
    tape.add(activated, gathered)
}

/// `F = Lambda E`.
pub fn hypergraph_convolve(tape: &mut Tape, incidence: Var, hyperedges: Var) -> Result<Var> {
    tape.matmul(incidence, hyperedges)
}

/// Output of [`dhsl_block`], with the incidence matrix of every layer.
#[derive(Debug, Clone)]
pub struct DhslOutput {
    pub states: Var,
    pub incidences: Vec<Var>,
}

/// Stacks `layers` hypergraph convolutions, relearning the incidence
/// matrix from the evolving states at each layer.
pub fn dhsl_block(tape: &mut Tape, h: Var, p: &BoundHyper, layers: usize) -> Result<DhslOutput> {
    if layers == 0 {
        return Err(Error::Config(
            "hypergraph block needs at least one layer".into(),
        ));
    }
    let mut states = h;
    let mut incidences = Vec::with_capacity(layers);
    for _ in 0..layers {
        let incidence = learn_incidence(tape, states, p)?;
        let edges = hyperedge_embed(tape, states, incidence, p)?;
        states = hypergraph_convolve(tape, incidence, edges)?;
        incidences.push(incidence);
    }
    Ok(DhslOutput { states, incidences })
}
