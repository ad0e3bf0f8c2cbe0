//! Communication graphs and symmetric doubly stochastic mixing matrices.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::rng::{self, Domain};

const MAX_RESAMPLES: usize = 10_000;

/// Undirected graph; self-communication is implicit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    n_nodes: usize,
    edges: BTreeSet<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
}

impl Graph {
    pub fn new(n_nodes: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n_nodes == 0 {
            return Err(invalid("graph needs at least one node"));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= n_nodes || b >= n_nodes {
                return Err(invalid(format!("edge ({a},{b}) references a node outside 0..{n_nodes}")));
            }
            if a != b {
                set.insert((a.min(b), a.max(b)));
            }
        }
        let mut adjacency = vec![Vec::new(); n_nodes];
        for &(a, b) in &set {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Ok(Self { n_nodes, edges: set, adjacency })
    }

    pub fn ring(n: usize) -> Result<Self> {
        Self::new(n, (0..n).map(|i| (i, (i + 1) % n)))
    }

    pub fn complete(n: usize) -> Result<Self> {
        Self::new(n, (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))))
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    /// Neighbors in ascending id order.
    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    /// Hop distances from `origin`; `None` for unreachable nodes.
    pub fn distances(&self, origin: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n_nodes];
        let mut queue = VecDeque::new();
        dist[origin] = Some(0);
        queue.push_back(origin);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap_or(0);
            for &v in &self.adjacency[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    pub fn is_connected(&self) -> bool {
        self.distances(0).iter().all(Option::is_some)
    }

    /// Subgraph on `keep` (ascending original ids), relabelled 0..keep.len().
    pub fn induced(&self, keep: &[usize]) -> Result<Self> {
        let mut index = vec![None; self.n_nodes];
        for (new, &old) in keep.iter().enumerate() {
            if old >= self.n_nodes {
                return Err(invalid(format!("node {old} out of range")));
            }
            index[old] = Some(new);
        }
        let edges = self
            .edges
            .iter()
            .filter_map(|&(a, b)| Some((index[a]?, index[b]?)));
        Self::new(keep.len(), edges.collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TopologySpec {
    Ring { n: usize },
    ErdosRenyi { n: usize, p: f64, seed: u64 },
}

impl TopologySpec {
    pub fn n_nodes(&self) -> usize {
        match *self {
            TopologySpec::Ring { n } | TopologySpec::ErdosRenyi { n, .. } => n,
        }
    }

    pub fn build(&self) -> Result<MixingMatrix> {
        match *self {
            TopologySpec::Ring { n } => build_ring(n),
            TopologySpec::ErdosRenyi { n, p, seed } => build_erdos_renyi(n, p, seed),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MixingMatrix {
    graph: Graph,
    weights: DMatrix<f64>,
    rho: f64,
}

impl MixingMatrix {
    /// Validates the invariants and caches rho.
    pub fn new(graph: Graph, weights: DMatrix<f64>) -> Result<Self> {
        let n = graph.n_nodes();
        if weights.shape() != (n, n) {
            return Err(Error::DimensionMismatch { expected: n, got: weights.nrows() });
        }
        for i in 0..n {
            let mut row = 0.0;
            let mut col = 0.0;
            for j in 0..n {
                let w = weights[(i, j)];
                if !(w >= 0.0) {
                    return Err(invalid(format!("negative or NaN weight at ({i},{j})")));
                }
                if w != weights[(j, i)] {
                    return Err(invalid(format!("weights not symmetric at ({i},{j})")));
                }
                if i != j && w != 0.0 && !graph.has_edge(i, j) {
                    return Err(invalid(format!("weight on non-edge ({i},{j})")));
                }
                row += w;
                col += weights[(j, i)];
            }
            if (row - 1.0).abs() > 1e-12 || (col - 1.0).abs() > 1e-12 {
                return Err(invalid(format!("row/column {i} does not sum to 1")));
            }
        }
        let rho = spectral_rho(&weights)?;
        Ok(Self { graph, weights, rho })
    }

    /// Metropolis-Hastings weights for an arbitrary connected graph.
    pub fn metropolis_hastings(graph: Graph) -> Result<Self> {
        if !graph.is_connected() {
            return Err(Error::Protocol("mixing requires a connected graph".into()));
        }
        let n = graph.n_nodes();
        let mut w = DMatrix::zeros(n, n);
        for &(a, b) in graph.edges() {
            let v = 1.0 / (1.0 + graph.degree(a).max(graph.degree(b)) as f64);
            w[(a, b)] = v;
            w[(b, a)] = v;
        }
        for i in 0..n {
            let off: f64 = graph.neighbors(i).iter().map(|&j| w[(i, j)]).sum();
            w[(i, i)] = 1.0 - off;
        }
        Self::new(graph, w)
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn n_nodes(&self) -> usize {
        self.graph.n_nodes()
    }

    /// Mixing restricted to the surviving nodes, re-weighted with Metropolis-Hastings.
    pub fn without_node(&self, node: usize) -> Result<Self> {
        let keep: Vec<usize> = (0..self.n_nodes()).filter(|&i| i != node).collect();
        if keep.is_empty() {
            return Err(Error::Protocol("cannot remove the only client".into()));
        }
        let sub = self.graph.induced(&keep)?;
        Self::metropolis_hastings(sub)
    }

    /// Row-major CSV with round-trip precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n_nodes() {
            let row: Vec<String> = (0..self.n_nodes()).map(|j| format!("{:?}", self.weights[(i, j)])).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Ring with weight 1/3 on self and both neighbors (1/2 for two nodes).
pub fn build_ring(n: usize) -> Result<MixingMatrix> {
    let graph = Graph::ring(n)?;
    let mut w = DMatrix::zeros(n, n);
    match n {
        1 => w[(0, 0)] = 1.0,
        2 => w.fill(0.5),
        _ => {
            let third = 1.0 / 3.0;
            for i in 0..n {
                w[(i, i)] = third;
                w[(i, (i + 1) % n)] = third;
                w[(i, (i + n - 1) % n)] = third;
            }
        }
    }
    MixingMatrix::new(graph, w)
}

/// G(n, p) resampled until connected, with Metropolis-Hastings weights.
pub fn build_erdos_renyi(n: usize, p: f64, seed: u64) -> Result<MixingMatrix> {
    if n == 0 {
        return Err(invalid("graph needs at least one node"));
    }
    if !(p > 0.0 && p <= 1.0) {
        if n == 1 && p == 0.0 {
            return MixingMatrix::metropolis_hastings(Graph::new(1, [])?);
        }
        return Err(invalid(format!("edge probability must lie in (0, 1], got {p}")));
    }
    let mut rng = rng::stream(seed, Domain::Topology, n as u64, 0);
    for _ in 0..MAX_RESAMPLES {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < p {
                    edges.push((i, j));
                }
            }
        }
        let graph = Graph::new(n, edges)?;
        if graph.is_connected() {
            return MixingMatrix::metropolis_hastings(graph);
        }
    }
    Err(Error::Disconnected { attempts: MAX_RESAMPLES })
}

/// Squared largest magnitude among the eigenvalues left after removing the leading 1 once.
pub fn spectral_rho(weights: &DMatrix<f64>) -> Result<f64> {
    if weights.nrows() <= 1 {
        return Ok(0.0);
    }
    let vals = linalg::symmetric_eigenvalues(weights);
    let lead = vals
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - 1.0).abs().total_cmp(&(b.1 - 1.0).abs()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let second = vals
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != lead)
        .fold(0.0_f64, |m, (_, v)| m.max(v.abs()));
    let rho = second * second;
    if rho >= 1.0 - 1e-12 {
        return Err(Error::MixingAssumption { rho });
    }
    Ok(rho)
}

/// `||Q^k - J/N||_2^2`.
pub fn consensus_gap(weights: &DMatrix<f64>, k: usize) -> f64 {
    let n = weights.nrows();
    let mut power = DMatrix::identity(n, n);
    for _ in 0..k {
        power = &power * weights;
    }
    let diff = power - DMatrix::from_element(n, n, 1.0 / n as f64);
    // symmetrize away rounding so the symmetric solver applies
    let sym = (&diff + diff.transpose()) * 0.5;
    let norm = linalg::symmetric_spectral_norm(&sym);
    norm * norm
}
