//! Road network and its time expansion into a temporal graph.
//!
//! Temporal node `(t, i)` has id `t * N + i`. Row `(t, i)` of the adjacency
//! holds the spatial weights `A[i][j]` at the same step, a unit self-loop,
//! and a unit edge to `(t + 1, i)`.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

/// Static weighted directed graph over `n_nodes` sensors.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadNetwork {
    n_nodes: usize,
    edges: Vec<Edge>,
}

impl RoadNetwork {
    pub fn new(n_nodes: usize, edges: Vec<Edge>) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(edges.len());
        for (k, e) in edges.iter().enumerate() {
            if e.from >= n_nodes || e.to >= n_nodes {
                return Err(Error::Data(format!(
                    "edge {k} ({} -> {}) references a node outside 0..{n_nodes}",
                    e.from, e.to
                )));
            }
            if !(e.weight >= 0.0) || !e.weight.is_finite() {
                return Err(Error::Data(format!(
                    "edge {k} ({} -> {}) has invalid weight {}",
                    e.from, e.to, e.weight
                )));
            }
            if !seen.insert((e.from, e.to)) {
                return Err(Error::Data(format!(
                    "duplicate edge {} -> {}",
                    e.from, e.to
                )));
            }
        }
        Ok(Self { n_nodes, edges })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Number of nonzero entries of `A`.
    pub fn nnz(&self) -> usize {
        self.edges.iter().filter(|e| e.weight > 0.0).count()
    }

    /// Number of nonzero off-diagonal entries of `A`.
    pub fn off_diagonal_nnz(&self) -> usize {
        self.edges
            .iter()
            .filter(|e| e.weight > 0.0 && e.from != e.to)
            .count()
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.n_nodes)?;
        let edges = self
            .edges
            .iter()
            .map(|e| Edge {
                from: perm[e.from],
                to: perm[e.to],
                weight: e.weight,
            })
            .collect();
        Self::new(self.n_nodes, edges)
    }

    /// Reads a `from,to,weight` CSV. `n_nodes` bounds the ids; errors name
    /// the offending line (header is line 1).
    pub fn read_csv(path: &Path, n_nodes: usize) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let headers = reader.headers()?.clone();
        let expected = ["from", "to", "weight"];
        if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h.trim() != e) {
            return Err(Error::Format(format!(
                "{}: expected header `from,to,weight`, found `{}`",
                path.display(),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut edges = Vec::new();
        for (k, record) in reader.deserialize::<Edge>().enumerate() {
            let line = k + 2;
            let e = record
                .map_err(|err| Error::Format(format!("{} line {line}: {err}", path.display())))?;
            if e.from >= n_nodes || e.to >= n_nodes {
                return Err(Error::Data(format!(
                    "{} line {line}: edge {} -> {} references a node >= {n_nodes}",
                    path.display(),
                    e.from,
                    e.to
                )));
            }
            edges.push(e);
        }
        Self::new(n_nodes, edges)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        for e in &self.edges {
            writer.serialize(e)?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::dim("permutation", &[perm.len()], &[n]));
    }
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Contract(format!("{perm:?} is not a permutation")));
        }
    }
    Ok(())
}

/// Time-expanded graph over `N * T` observation nodes.
#[derive(Debug, Clone)]
pub struct TemporalGraph {
    n_spatial: usize,
    t_steps: usize,
    adjacency: CsrMatrix,
    normalized: Option<Arc<CsrMatrix>>,
}

impl TemporalGraph {
    pub fn n_nodes(&self) -> usize {
        self.n_spatial * self.t_steps
    }

    pub fn n_spatial(&self) -> usize {
        self.n_spatial
    }

    pub fn t_steps(&self) -> usize {
        self.t_steps
    }

    pub fn adjacency(&self) -> &CsrMatrix {
        &self.adjacency
    }

    /// Row-normalized adjacency, if [`normalize_adjacency`] has run.
    pub fn normalized(&self) -> Option<&Arc<CsrMatrix>> {
        self.normalized.as_ref()
    }

    /// The normalized adjacency, or a contract error if absent.
    pub fn require_normalized(&self) -> Result<&Arc<CsrMatrix>> {
        self.normalized.as_ref().ok_or_else(|| {
            Error::Contract("temporal graph adjacency has not been normalized".into())
        })
    }

    pub fn node_id(&self, t: usize, i: usize) -> usize {
        t * self.n_spatial + i
    }

    /// Builds and normalizes in one step.
    pub fn build(net: &RoadNetwork, t_steps: usize) -> Result<Self> {
        normalize_adjacency(build_temporal_graph(net, t_steps)?)
    }

    /// Expected `nnz` of the unnormalized adjacency.
    pub fn expected_nnz(net: &RoadNetwork, t_steps: usize) -> usize {
        let n = net.n_nodes();
        t_steps * net.off_diagonal_nnz() + n * t_steps + n * (t_steps - 1)
    }
}

pub fn build_temporal_graph(net: &RoadNetwork, t_steps: usize) -> Result<TemporalGraph> {
    let n = net.n_nodes();
    if t_steps == 0 {
        return Err(Error::Contract(
            "temporal graph needs at least one step".into(),
        ));
    }
    if n == 0 {
        return Err(Error::Contract("road network has no nodes".into()));
    }
    let spatial: Vec<&Edge> = net
        .edges()
        .iter()
        .filter(|e| e.weight > 0.0 && e.from != e.to)
        .collect();
    let mut triplets = Vec::with_capacity(t_steps * (spatial.len() + 2 * n));
    for t in 0..t_steps {
        let base = t * n;
        for e in &spatial {
            triplets.push((base + e.from, base + e.to, e.weight));
        }
        for i in 0..n {
            triplets.push((base + i, base + i, 1.0));
            if t + 1 < t_steps {
                triplets.push((base + i, base + n + i, 1.0));
            }
        }
    }
    let adjacency = CsrMatrix::from_triplets(n * t_steps, n * t_steps, triplets)?;
    Ok(TemporalGraph {
        n_spatial: n,
        t_steps,
        adjacency,
        normalized: None,
    })
}

pub fn normalize_adjacency(mut g: TemporalGraph) -> Result<TemporalGraph> {
    let normalized = g
        .adjacency
        .row_normalized()
        .map_err(|e| Error::Contract(format!("internal invariant violated: {e}")))?;
    g.normalized = Some(Arc::new(normalized));
    Ok(g)
}
