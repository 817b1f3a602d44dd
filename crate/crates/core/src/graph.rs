//! Weighted directed sensor graphs.
//!
//! An edge `(src, dst, w)` carries messages from `src` to `dst`, so the
//! neighborhood of a node is its set of *in*-neighbors. Self-loops are never
//! stored: a node's own history is handled by intra-node attention.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensorGraph {
    n_nodes: usize,
    edges: Vec<Edge>,
    in_adj: Vec<Vec<(usize, f64)>>,
    distances: Option<Vec<f64>>,
}

/// A node-induced subgraph plus the mapping back to the parent graph.
#[derive(Clone, Debug)]
pub struct Subgraph {
    pub graph: SensorGraph,
    /// `nodes[new] = old`, ascending.
    pub nodes: Vec<usize>,
    /// True for nodes that were seeds of the sampling.
    pub is_seed: Vec<bool>,
}

impl SensorGraph {
    /// Builds a graph from an edge list. Self-loops are dropped; duplicate
    /// edges and non-positive weights are rejected.
    pub fn from_edges(n_nodes: usize, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::Invalid("graph needs at least one node".into()));
        }
        let mut in_adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_nodes];
        let mut dropped_loops = 0;
        for e in edges {
            for idx in [e.src, e.dst] {
                if idx >= n_nodes {
                    return Err(Error::OutOfRange {
                        what: "edge endpoint",
                        index: idx,
                        len: n_nodes,
                    });
                }
            }
            if !(e.weight > 0.0 && e.weight.is_finite()) {
                return Err(Error::Invalid(format!(
                    "edge {}->{} has non-positive weight {}",
                    e.src, e.dst, e.weight
                )));
            }
            if e.src == e.dst {
                dropped_loops += 1;
                continue;
            }
            in_adj[e.dst].push((e.src, e.weight));
        }
        if dropped_loops > 0 {
            log::debug!("dropped {dropped_loops} self-loop edges");
        }
        for (dst, list) in in_adj.iter_mut().enumerate() {
            list.sort_by_key(|&(j, _)| j);
            if let Some(w) = list.windows(2).find(|w| w[0].0 == w[1].0) {
                return Err(Error::Invalid(format!("duplicate edge {}->{dst}", w[0].0)));
            }
        }
        let edges = in_adj
            .iter()
            .enumerate()
            .flat_map(|(dst, list)| list.iter().map(move |&(src, weight)| Edge { src, dst, weight }))
            .collect();
        Ok(Self {
            n_nodes,
            edges,
            in_adj,
            distances: None,
        })
    }

    /// Thresholded Gaussian kernel: `a_ij = exp(−d_ij²/γ)` when `d_ij ≤ δ`,
    /// no edge otherwise. `distances` is row-major `n×n`.
    pub fn from_gaussian_kernel(distances: &[f64], n_nodes: usize, gamma: f64, delta: f64) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(Error::Invalid(format!("kernel shape gamma must be positive, got {gamma}")));
        }
        if distances.len() != n_nodes * n_nodes {
            return Err(Error::shape(
                "build_adjacency_gaussian",
                format!("{} distances for {n_nodes} nodes", distances.len()),
            ));
        }
        if let Some(pos) = distances.iter().position(|&d| !(d >= 0.0) || !d.is_finite()) {
            return Err(Error::Invalid(format!(
                "distance ({}, {}) is negative or not finite",
                pos / n_nodes,
                pos % n_nodes
            )));
        }
        if let Some(i) = (0..n_nodes).find(|&i| distances[i * n_nodes + i] != 0.0) {
            return Err(Error::Invalid(format!("distance diagonal entry {i} is not zero")));
        }
        let mut edges = Vec::new();
        for i in 0..n_nodes {
            for j in 0..n_nodes {
                let d = distances[i * n_nodes + j];
                if i == j || d > delta {
                    continue;
                }
                let w = (-(d * d) / gamma).exp();
                // underflow to zero means "no edge"
                if w > 0.0 {
                    edges.push(Edge { src: i, dst: j, weight: w });
                }
            }
        }
        let mut g = Self::from_edges(n_nodes, edges)?;
        g.distances = Some(distances.to_vec());
        Ok(g)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Edges ordered by destination, then source.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn distances(&self) -> Option<&[f64]> {
        self.distances.as_deref()
    }

    /// Senders of messages to `i`, ascending by sender index.
    pub fn in_neighbors(&self, i: usize) -> Result<&[(usize, f64)]> {
        self.in_adj.get(i).map(Vec::as_slice).ok_or(Error::OutOfRange {
            what: "node",
            index: i,
            len: self.n_nodes,
        })
    }

    pub(crate) fn in_adj(&self) -> &[Vec<(usize, f64)>] {
        &self.in_adj
    }

    /// Nodes that can reach a seed in at most `k` hops, with the induced
    /// edges. Traversal follows edges backwards, toward their sources.
    pub fn khop_subgraph(&self, seeds: &[usize], k: usize) -> Result<Subgraph> {
        if seeds.is_empty() {
            return Err(Error::Invalid("k-hop sampling needs at least one seed".into()));
        }
        let mut depth = vec![usize::MAX; self.n_nodes];
        let mut queue = VecDeque::new();
        for &s in seeds {
            if s >= self.n_nodes {
                return Err(Error::OutOfRange {
                    what: "seed node",
                    index: s,
                    len: self.n_nodes,
                });
            }
            if depth[s] == usize::MAX {
                depth[s] = 0;
                queue.push_back(s);
            }
        }
        while let Some(v) = queue.pop_front() {
            if depth[v] == k {
                continue;
            }
            for &(u, _) in &self.in_adj[v] {
                if depth[u] == usize::MAX {
                    depth[u] = depth[v] + 1;
                    queue.push_back(u);
                }
            }
        }
        let seed_set: BTreeSet<usize> = seeds.iter().copied().collect();
        let nodes: Vec<usize> = (0..self.n_nodes).filter(|&v| depth[v] != usize::MAX).collect();
        let mut new_index = vec![usize::MAX; self.n_nodes];
        for (new, &old) in nodes.iter().enumerate() {
            new_index[old] = new;
        }
        let edges = self
            .edges
            .iter()
            .filter(|e| new_index[e.src] != usize::MAX && new_index[e.dst] != usize::MAX)
            .map(|e| Edge {
                src: new_index[e.src],
                dst: new_index[e.dst],
                weight: e.weight,
            });
        let mut graph = SensorGraph::from_edges(nodes.len(), edges)?;
        if let Some(d) = &self.distances {
            let m = nodes.len();
            let mut sub = vec![0.0; m * m];
            for (a, &oa) in nodes.iter().enumerate() {
                for (b, &ob) in nodes.iter().enumerate() {
                    sub[a * m + b] = d[oa * self.n_nodes + ob];
                }
            }
            graph.distances = Some(sub);
        }
        let is_seed = nodes.iter().map(|v| seed_set.contains(v)).collect();
        Ok(Subgraph { graph, nodes, is_seed })
    }

    /// Relabels nodes: old node `v` becomes `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.n_nodes)?;
        let edges = self.edges.iter().map(|e| Edge {
            src: perm[e.src],
            dst: perm[e.dst],
            weight: e.weight,
        });
        let mut g = Self::from_edges(self.n_nodes, edges)?;
        if let Some(d) = &self.distances {
            let n = self.n_nodes;
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    out[perm[i] * n + perm[j]] = d[i * n + j];
                }
            }
            g.distances = Some(out);
        }
        Ok(g)
    }

    /// Reads an edge list CSV with header `src,dst,weight`.
    pub fn read_edges_csv(path: &Path, n_nodes: usize) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            src: usize,
            dst: usize,
            weight: f64,
        }
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_open_error(path, e))?;
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["src", "dst", "weight"] {
            return Err(Error::data(
                path.display().to_string(),
                format!("expected header src,dst,weight, found {}", headers.iter().collect::<Vec<_>>().join(",")),
            ));
        }
        let mut edges = Vec::new();
        for row in reader.deserialize::<Row>() {
            let r = row.map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
            edges.push(Edge {
                src: r.src,
                dst: r.dst,
                weight: r.weight,
            });
        }
        Self::from_edges(n_nodes, edges)
    }

    pub fn write_edges_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_open_error(path, e))?;
        w.write_record(["src", "dst", "weight"])?;
        for e in &self.edges {
            w.write_record([e.src.to_string(), e.dst.to_string(), format!("{}", e.weight)])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Reads a headerless `n×n` distance matrix. Returns `(n, row-major data)`.
pub fn read_distance_csv(path: &Path) -> Result<(usize, Vec<f64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_open_error(path, e))?;
    let mut data = Vec::new();
    let mut n = None;
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
        let width = *n.get_or_insert(rec.len());
        if rec.len() != width {
            return Err(Error::data(
                path.display().to_string(),
                format!("row {r} has {} columns, expected {width}", rec.len()),
            ));
        }
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::data(path.display().to_string(), format!("row {r}, column {c}: not a number: {field:?}"))
            })?;
            data.push(v);
        }
    }
    let n = n.unwrap_or(0);
    if n == 0 || data.len() != n * n {
        return Err(Error::data(
            path.display().to_string(),
            format!("distance matrix must be square, got {} entries for width {n}", data.len()),
        ));
    }
    Ok((n, data))
}

pub fn write_distance_csv(path: &Path, n: usize, data: &[f64]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_open_error(path, e))?;
    for row in data.chunks(n) {
        w.write_record(row.iter().map(|v| format!("{v}")))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_open_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::data(path.display().to_string(), format!("{other:?}")),
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::Invalid(format!("permutation of length {} for {n} nodes", perm.len())));
    }
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::Invalid("not a permutation".into()));
        }
        seen[p] = true;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn path3() -> SensorGraph {
        // 0 -> 1 -> 2
        SensorGraph::from_edges(
            3,
            [
                Edge { src: 0, dst: 1, weight: 1.0 },
                Edge { src: 1, dst: 2, weight: 1.0 },
            ],
        )
        .unwrap()
    }

    #[test]
    fn kernel_examples() {
        let gamma: f64 = 2.0;
        let d = gamma.sqrt();
        // node 0 and 1 co-located, node 2 at sqrt(gamma) from 0, node 1 far from 2
        let dist = vec![0.0, 0.0, d, 0.0, 0.0, 10.0, d, 10.0, 0.0];
        let g = SensorGraph::from_gaussian_kernel(&dist, 3, gamma, 5.0).unwrap();
        let w = |s: usize, t: usize| g.in_neighbors(t).unwrap().iter().find(|e| e.0 == s).map(|e| e.1);
        assert_eq!(w(0, 1), Some(1.0));
        assert!((w(0, 2).unwrap() - (-1f64).exp()).abs() < 1e-15);
        assert_eq!(w(1, 2), None);
        assert_eq!(w(0, 0), None);
    }

    #[test]
    fn kernel_rejects_bad_input() {
        assert!(SensorGraph::from_gaussian_kernel(&[0.0, 1.0, 1.0, 0.0], 2, 0.0, 1.0).is_err());
        assert!(SensorGraph::from_gaussian_kernel(&[0.0, -1.0, 1.0, 0.0], 2, 1.0, 1.0).is_err());
        assert!(SensorGraph::from_gaussian_kernel(&[0.0, 1.0, 1.0], 2, 1.0, 1.0).is_err());
    }

    #[test]
    fn in_neighbor_examples() {
        let g = SensorGraph::from_edges(
            3,
            [
                Edge { src: 2, dst: 1, weight: 0.3 },
                Edge { src: 0, dst: 1, weight: 0.5 },
            ],
        )
        .unwrap();
        assert_eq!(g.in_neighbors(1).unwrap(), &[(0, 0.5), (2, 0.3)]);
        assert!(g.in_neighbors(0).unwrap().is_empty());
        assert!(g.in_neighbors(3).is_err());

        let asym = SensorGraph::from_edges(2, [Edge { src: 0, dst: 1, weight: 1.0 }]).unwrap();
        assert!(asym.in_neighbors(0).unwrap().is_empty());
    }

    #[test]
    fn edge_list_validation() {
        let e = |s, d, w| Edge { src: s, dst: d, weight: w };
        assert!(SensorGraph::from_edges(2, [e(0, 1, 0.0)]).is_err());
        assert!(SensorGraph::from_edges(2, [e(0, 2, 1.0)]).is_err());
        assert!(SensorGraph::from_edges(2, [e(0, 1, 1.0), e(0, 1, 2.0)]).is_err());
        let g = SensorGraph::from_edges(2, [e(0, 0, 1.0), e(0, 1, 1.0)]).unwrap();
        assert_eq!(g.n_edges(), 1);
    }

    #[test]
    fn khop_examples() {
        let g = path3();
        let s0 = g.khop_subgraph(&[2], 0).unwrap();
        assert_eq!(s0.nodes, vec![2]);
        assert_eq!(s0.graph.n_edges(), 0);

        let s1 = g.khop_subgraph(&[2], 1).unwrap();
        assert_eq!(s1.nodes, vec![1, 2]);
        assert_eq!(s1.is_seed, vec![false, true]);
        assert_eq!(s1.graph.edges(), &[Edge { src: 0, dst: 1, weight: 1.0 }]);

        let all = g.khop_subgraph(&[0, 1, 2], 3).unwrap();
        assert_eq!(all.graph, g);

        assert!(g.khop_subgraph(&[5], 1).is_err());
        assert!(g.khop_subgraph(&[], 1).is_err());
    }

    fn random_graph(n: usize, bits: &[bool]) -> SensorGraph {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j && bits[i * n + j] {
                    edges.push(Edge { src: i, dst: j, weight: 0.5 });
                }
            }
        }
        SensorGraph::from_edges(n, edges).unwrap()
    }

    proptest! {
        #[test]
        fn kernel_weights_in_unit_interval_and_monotone(d1 in 0.0f64..5.0, d2 in 0.0f64..5.0, gamma in 0.1f64..10.0) {
            let dist = vec![0.0, d1, d2, d1, 0.0, 0.0, d2, 0.0, 0.0];
            let g = SensorGraph::from_gaussian_kernel(&dist, 3, gamma, 10.0).unwrap();
            for e in g.edges() {
                prop_assert!(e.weight > 0.0 && e.weight <= 1.0);
            }
            let w1 = (-(d1 * d1) / gamma).exp();
            let w2 = (-(d2 * d2) / gamma).exp();
            if d1 <= d2 { prop_assert!(w1 >= w2); }
        }

        #[test]
        fn khop_is_monotone_in_k(bits in proptest::collection::vec(any::<bool>(), 36), seed in 0usize..6, k in 0usize..4) {
            let g = random_graph(6, &bits);
            let small = g.khop_subgraph(&[seed], k).unwrap();
            let big = g.khop_subgraph(&[seed], k + 1).unwrap();
            prop_assert!(small.nodes.iter().all(|v| big.nodes.contains(v)));
        }

        #[test]
        fn permutation_preserves_structure(bits in proptest::collection::vec(any::<bool>(), 25), perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle()) {
            let g = random_graph(5, &bits);
            let p = g.permuted(&perm).unwrap();
            prop_assert_eq!(p.n_edges(), g.n_edges());
            for e in g.edges() {
                prop_assert!(p.in_neighbors(perm[e.dst]).unwrap().contains(&(perm[e.src], e.weight)));
            }
        }
    }
}
