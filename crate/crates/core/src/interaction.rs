//! Interactive graph convolution.
//!
//! The pairwise neighbour interaction
//! `sum_{j, j'} A_ij A_ij' (h_j W1 ⊙ h_j' W2)`, taken over all ordered
//! neighbour pairs including `j = j'`, factorizes into
//! `(A h W1) ⊙ (A h W2)`, which costs one sparse product instead of a
//! quadratic pair enumeration.

use rand::Rng;

use crate::encoder::uniform;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::topology::TemporalGraph;

#[derive(Debug, Clone, PartialEq)]
pub struct IgcParams {
    pub w1: Tensor,
    pub w2: Tensor,
    pub w3: Tensor,
}

impl IgcParams {
    pub fn init<R: Rng>(rng: &mut R, dim: usize) -> Self {
        let product = (3.0 / dim as f64).sqrt();
        let he = (6.0 / dim as f64).sqrt();
        Self {
            w1: uniform(rng, &[dim, dim], product),
            w2: uniform(rng, &[dim, dim], product),
            w3: uniform(rng, &[dim, dim], he),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundIgc {
        BoundIgc {
            w1: tape.leaf(self.w1.clone()),
            w2: tape.leaf(self.w2.clone()),
            w3: tape.leaf(self.w3.clone()),
        }
    }

    pub(crate) fn tensors(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{prefix}.w1"), &self.w1),
            (format!("{prefix}.w2"), &self.w2),
            (format!("{prefix}.w3"), &self.w3),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.w2, &mut self.w3]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundIgc {
    pub w1: Var,
    pub w2: Var,
    pub w3: Var,
}

fn aggregate(tape: &mut Tape, h: Var, graph: &TemporalGraph) -> Result<Var> {
    let norm = graph.require_normalized()?;
    if tape.shape(h)[0] != graph.n_nodes() {
        return Err(Error::dim(
            "interactive_aggregate",
            tape.shape(h),
            &[graph.n_nodes()],
        ));
    }
    tape.spmm(norm, h)
}

/// `(A h W1) ⊙ (A h W2)` before the activation.
pub fn interaction_preactivation(
    tape: &mut Tape,
    h: Var,
    graph: &TemporalGraph,
    p: &BoundIgc,
) -> Result<Var> {
    let agg = aggregate(tape, h, graph)?;
    pairwise_product(tape, agg, p)
}

fn pairwise_product(tape: &mut Tape, agg: Var, p: &BoundIgc) -> Result<Var> {
    let left = tape.matmul(agg, p.w1)?;
    let right = tape.matmul(agg, p.w2)?;
    tape.hadamard(left, right)
}

/// `pi = relu((A h W1) ⊙ (A h W2))`.
pub fn interactive_aggregate(
    tape: &mut Tape,
    h: Var,
    graph: &TemporalGraph,
    p: &BoundIgc,
) -> Result<Var> {
    let pre = interaction_preactivation(tape, h, graph, p)?;
    tape.relu(pre)
}

/// `r = pi + relu(A h W3)`.
pub fn igc_block(tape: &mut Tape, h: Var, graph: &TemporalGraph, p: &BoundIgc) -> Result<Var> {
    let agg = aggregate(tape, h, graph)?;
    let pre = pairwise_product(tape, agg, p)?;
    let interaction = tape.relu(pre)?;
    let linear = tape.matmul(agg, p.w3)?;
    let linear = tape.relu(linear)?;
    tape.add(interaction, linear)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_temporal_graph, Edge, RoadNetwork};

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn isolated(n: usize) -> TemporalGraph {
        TemporalGraph::build(&RoadNetwork::new(n, vec![]).unwrap(), 1).unwrap()
    }

    #[test]
    fn single_neighbour_is_one_term() {
        let g = isolated(2);
        let mut tape = Tape::new();
        let p = IgcParams {
            w1: m(&[vec![1.0, 2.0], vec![0.0, 1.0]]),
            w2: m(&[vec![-1.0, 0.5], vec![1.0, 1.0]]),
            w3: Tensor::zeros(&[2, 2]),
        };
        let b = p.bind(&mut tape);
        let h = tape.constant(m(&[vec![1.0, 1.0], vec![2.0, -1.0]]));
        let pi = interactive_aggregate(&mut tape, h, &g, &b).unwrap();
        let hv = tape.value(h).clone();
        let a = hv.matmul(&p.w1).unwrap();
        let c = hv.matmul(&p.w2).unwrap();
        let expect: Vec<f64> = a
            .data()
            .iter()
            .zip(c.data())
            .map(|(x, y)| (x * y).max(0.0))
            .collect();
        assert_eq!(tape.value(pi).data(), expect.as_slice());
    }

    #[test]
    fn zero_state_gives_zero() {
        let g = isolated(3);
        let mut tape = Tape::new();
        let p = IgcParams {
            w1: Tensor::filled(&[2, 2], 1.0),
            w2: Tensor::filled(&[2, 2], 1.0),
            w3: Tensor::filled(&[2, 2], 1.0),
        };
        let b = p.bind(&mut tape);
        let h = tape.constant(Tensor::zeros(&[3, 2]));
        let pi = interactive_aggregate(&mut tape, h, &g, &b).unwrap();
        assert!(tape.value(pi).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn interaction_off_leaves_linear_term() {
        let net = RoadNetwork::new(
            2,
            vec![Edge {
                from: 0,
                to: 1,
                weight: 2.0,
            }],
        )
        .unwrap();
        let g = TemporalGraph::build(&net, 2).unwrap();
        let mut tape = Tape::new();
        let p = IgcParams {
            w1: Tensor::zeros(&[2, 2]),
            w2: m(&[vec![1.0, 2.0], vec![3.0, 4.0]]),
            w3: m(&[vec![0.5, -1.0], vec![1.0, 0.25]]),
        };
        let b = p.bind(&mut tape);
        let h = tape.constant(m(&[
            vec![1.0, -1.0],
            vec![0.5, 2.0],
            vec![-0.3, 0.7],
            vec![1.2, 0.1],
        ]));
        let r = igc_block(&mut tape, h, &g, &b).unwrap();
        let agg = tape.spmm(g.normalized().unwrap(), h).unwrap();
        let lin = tape.matmul(agg, b.w3).unwrap();
        let lin = tape.relu(lin).unwrap();
        assert_eq!(tape.value(r), tape.value(lin));
    }

    #[test]
    fn unnormalized_graph_rejected() {
        let g = build_temporal_graph(&RoadNetwork::new(2, vec![]).unwrap(), 1).unwrap();
        let mut tape = Tape::new();
        let b = IgcParams::init(&mut rand::rng(), 2).bind(&mut tape);
        let h = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            igc_block(&mut tape, h, &g, &b),
            Err(Error::Contract(_))
        ));
    }
}
