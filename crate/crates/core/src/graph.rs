//! Attributed graphs, symmetric normalisation, k-hop subgraphs and a
//! stochastic-block-model generator.

use std::collections::{BTreeSet, VecDeque};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diff::Matrix;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::sparse::CsrMatrix;

/// Simple undirected graph with dense node features and optional labels.
///
/// Edges are stored once as `(u, v)` with `u < v`, sorted. Self-loops are
/// never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributedGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    features: Matrix,
    labels: Option<Vec<usize>>,
    num_classes: usize,
    neighbors: Vec<Vec<usize>>,
}

impl AttributedGraph {
    /// Validates and canonicalises. Edges given as `(v, u)` with `v > u` are
    /// flipped; self-loops, duplicates and out-of-range endpoints are errors.
    pub fn new(
        n: usize,
        edges: Vec<(usize, usize)>,
        features: Matrix,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if features.rows() != n {
            return Err(Error::InvalidGraph(format!(
                "feature matrix has {} rows, expected {n}",
                features.rows()
            )));
        }
        let mut canon = Vec::with_capacity(edges.len());
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::NodeOutOfRange { node: u.max(v), n });
            }
            if u == v {
                return Err(Error::InvalidGraph(format!("self-loop on node {u}")));
            }
            canon.push((u.min(v), u.max(v)));
        }
        canon.sort_unstable();
        if let Some(w) = canon.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidGraph(format!(
                "duplicate edge ({}, {})",
                w[0].0, w[0].1
            )));
        }
        let num_classes = match &labels {
            Some(l) => {
                if l.len() != n {
                    return Err(Error::InvalidGraph(format!(
                        "{} labels for {n} nodes",
                        l.len()
                    )));
                }
                l.iter().max().map_or(0, |m| m + 1)
            }
            None => 0,
        };
        let mut neighbors = vec![Vec::new(); n];
        for &(u, v) in &canon {
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        for nb in &mut neighbors {
            nb.sort_unstable();
        }
        Ok(Self {
            n,
            edges: canon,
            features,
            labels,
            num_classes,
            neighbors,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Number of label classes (`max label + 1`), 0 when unlabelled.
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Overrides the class count, e.g. when a file header declares classes
    /// that no node happens to carry.
    pub fn with_num_classes(mut self, c: usize) -> Result<Self> {
        if c < self.num_classes {
            return Err(Error::InvalidGraph(format!(
                "class count {c} below largest label {}",
                self.num_classes.saturating_sub(1)
            )));
        }
        self.num_classes = c;
        Ok(self)
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.neighbors[v].len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        u < self.n && self.neighbors[u].binary_search(&v).is_ok()
    }

    /// Same structure, new features.
    pub fn with_features(&self, features: Matrix) -> Result<Self> {
        if features.rows() != self.n {
            return Err(Error::shape("with_features", self.n, features.rows()));
        }
        Ok(Self {
            features,
            ..self.clone()
        })
    }

    /// Toggles each listed pair: existing edges are removed, absent ones added.
    pub fn flip_edges(&self, flips: &[(usize, usize)]) -> Result<Self> {
        let mut set: BTreeSet<(usize, usize)> = self.edges.iter().copied().collect();
        for &(u, v) in flips {
            if u >= self.n || v >= self.n {
                return Err(Error::NodeOutOfRange {
                    node: u.max(v),
                    n: self.n,
                });
            }
            if u == v {
                return Err(Error::InvalidGraph(format!("self-loop flip on node {u}")));
            }
            let key = (u.min(v), u.max(v));
            if !set.remove(&key) {
                set.insert(key);
            }
        }
        let g = Self::new(
            self.n,
            set.into_iter().collect(),
            self.features.clone(),
            self.labels.clone(),
        )?;
        Ok(Self {
            num_classes: self.num_classes,
            ..g
        })
    }
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    csr: Arc<CsrMatrix>,
}

impl NormalizedAdjacency {
    pub fn csr(&self) -> &Arc<CsrMatrix> {
        &self.csr
    }

    pub fn n(&self) -> usize {
        self.csr.rows()
    }

    pub fn matmul(&self, x: &Matrix) -> Matrix {
        self.csr.matmul_dense(x)
    }

    pub fn to_dense(&self) -> Matrix {
        self.csr.to_dense()
    }
}

pub fn normalize_adjacency(g: &AttributedGraph) -> NormalizedAdjacency {
    let n = g.num_nodes();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|v| 1.0 / ((g.degree(v) + 1) as f64).sqrt())
        .collect();
    let mut triplets = Vec::with_capacity(n + 2 * g.num_edges());
    triplets.extend(inv_sqrt.iter().enumerate().map(|(v, s)| (v, v, s * s)));
    for &(u, v) in g.edges() {
        let w = inv_sqrt[u] * inv_sqrt[v];
        triplets.push((u, v, w));
        triplets.push((v, u, w));
    }
    NormalizedAdjacency {
        csr: Arc::new(CsrMatrix::from_triplets(n, n, &triplets)),
    }
}

/// Scales every nonzero row to unit ℓ2 norm; zero rows are left alone.
pub fn row_l2_normalize(features: &Matrix) -> Matrix {
    let mut out = features.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }
    out
}

/// Induced subgraph on the k-hop neighbourhood of `center`.
#[derive(Debug, Clone, PartialEq)]
pub struct Subgraph {
    pub center: usize,
    /// Global ids, ascending.
    pub nodes: Vec<usize>,
    /// Position of `center` in `nodes`.
    pub center_local: usize,
    /// Induced graph over local ids `0..nodes.len()`.
    pub graph: AttributedGraph,
}

pub fn k_hop_subgraph(g: &AttributedGraph, node: usize, k: usize) -> Result<Subgraph> {
    let n = g.num_nodes();
    if node >= n {
        return Err(Error::NodeOutOfRange { node, n });
    }
    let mut dist = vec![usize::MAX; n];
    dist[node] = 0;
    let mut queue = VecDeque::from([node]);
    while let Some(u) = queue.pop_front() {
        if dist[u] == k {
            continue;
        }
        for &w in g.neighbors(u) {
            if dist[w] == usize::MAX {
                dist[w] = dist[u] + 1;
                queue.push_back(w);
            }
        }
    }
    let nodes: Vec<usize> = (0..n).filter(|&v| dist[v] != usize::MAX).collect();
    let mut local = vec![usize::MAX; n];
    for (i, &v) in nodes.iter().enumerate() {
        local[v] = i;
    }
    let edges = g
        .edges()
        .iter()
        .filter(|&&(u, v)| local[u] != usize::MAX && local[v] != usize::MAX)
        .map(|&(u, v)| (local[u], local[v]))
        .collect();
    let features = g.features().select_rows(&nodes);
    let labels = g.labels().map(|l| nodes.iter().map(|&v| l[v]).collect());
    let graph = AttributedGraph::new(nodes.len(), edges, features, labels)?;
    Ok(Subgraph {
        center: node,
        center_local: local[node],
        nodes,
        graph,
    })
}

/// Parameters for [`generate_sbm`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SbmSpec {
    pub n_per_block: usize,
    pub blocks: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    pub feature_shift: f64,
}

/// Stochastic block model. Block `b` owns nodes `b*n_per_block..`; its
/// features are standard normal plus `feature_shift` on every coordinate
/// `j` with `j % blocks == b`. Labels are block ids.
pub fn generate_sbm(spec: &SbmSpec, seed: u64) -> Result<AttributedGraph> {
    let SbmSpec {
        n_per_block,
        blocks,
        p_in,
        p_out,
        feature_dim,
        feature_shift,
    } = *spec;
    if n_per_block == 0 || blocks == 0 || feature_dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "degenerate SBM size: n_per_block={n_per_block}, blocks={blocks}, d={feature_dim}"
        )));
    }
    for (name, p) in [("p_in", p_in), ("p_out", p_out)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("{name}={p} outside [0, 1]")));
        }
    }
    if !feature_shift.is_finite() {
        return Err(Error::InvalidArgument(
            "feature_shift must be finite".into(),
        ));
    }
    let n = n_per_block * blocks;
    let block = |v: usize| v / n_per_block;

    let mut rng = stream(seed, Stream::Graph, 0);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if block(u) == block(v) { p_in } else { p_out };
            // Always draw so the stream position does not depend on p.
            let r: f64 = rng.random();
            if r < p {
                edges.push((u, v));
            }
        }
    }

    let mut rng = stream(seed, Stream::Graph, 1);
    let features = Matrix::from_fn(n, feature_dim, |i, j| {
        let z: f64 = StandardNormal.sample(&mut rng);
        if j % blocks == block(i) {
            z + feature_shift
        } else {
            z
        }
    });
    let labels = (0..n).map(block).collect();
    AttributedGraph::new(n, edges, features, Some(labels))?.with_num_classes(blocks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(n: usize) -> AttributedGraph {
        let edges = (0..n - 1).map(|i| (i, i + 1)).collect();
        AttributedGraph::new(n, edges, Matrix::from_fn(n, 2, |i, j| (i + j) as f64), None).unwrap()
    }

    #[test]
    fn construction_canonicalises_and_validates() {
        let g = AttributedGraph::new(3, vec![(2, 0), (1, 2)], Matrix::zeros(3, 1), None).unwrap();
        assert_eq!(g.edges(), &[(0, 2), (1, 2)]);
        assert!(AttributedGraph::new(3, vec![(0, 3)], Matrix::zeros(3, 1), None).is_err());
        assert!(AttributedGraph::new(3, vec![(1, 1)], Matrix::zeros(3, 1), None).is_err());
        assert!(AttributedGraph::new(3, vec![(0, 1), (1, 0)], Matrix::zeros(3, 1), None).is_err());
        assert!(AttributedGraph::new(3, vec![], Matrix::zeros(2, 1), None).is_err());
    }

    #[test]
    fn normalize_single_node() {
        let g = AttributedGraph::new(1, vec![], Matrix::zeros(1, 1), None).unwrap();
        assert_eq!(normalize_adjacency(&g).to_dense(), Matrix::scalar(1.0));
    }

    #[test]
    fn normalize_single_edge_is_all_halves() {
        let a = normalize_adjacency(&path(2)).to_dense();
        assert!(a.max_abs_diff(&Matrix::filled(2, 2, 0.5)) < 1e-15);
    }

    #[test]
    fn normalize_triangle_is_all_thirds() {
        let g = AttributedGraph::new(3, vec![(0, 1), (1, 2), (0, 2)], Matrix::zeros(3, 1), None)
            .unwrap();
        let a = normalize_adjacency(&g).to_dense();
        assert!(a.max_abs_diff(&Matrix::filled(3, 3, 1.0 / 3.0)) < 1e-15);
    }

    #[test]
    fn row_normalisation_cases() {
        let x = Matrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let y = row_l2_normalize(&x);
        assert!((y[(0, 0)] - 0.6).abs() < 1e-15 && (y[(0, 1)] - 0.8).abs() < 1e-15);
        assert_eq!(y.row(1), &[0.0, 0.0]);
        assert_eq!(y.row(2), &[1.0, 0.0]);
        assert!(row_l2_normalize(&y).max_abs_diff(&y) < 1e-15);
    }

    #[test]
    fn k_hop_on_path() {
        let g = path(3);
        let s0 = k_hop_subgraph(&g, 0, 0).unwrap();
        assert_eq!(s0.nodes, vec![0]);
        assert_eq!(s0.graph.num_edges(), 0);
        let s1 = k_hop_subgraph(&g, 0, 1).unwrap();
        assert_eq!(s1.nodes, vec![0, 1]);
        assert_eq!(s1.graph.num_edges(), 1);
        let s2 = k_hop_subgraph(&g, 0, 2).unwrap();
        assert_eq!(s2.nodes, vec![0, 1, 2]);
        assert_eq!(s2.graph.num_edges(), 2);
        assert_eq!(s2.graph.features(), g.features());
        assert!(matches!(
            k_hop_subgraph(&g, 5, 1),
            Err(Error::NodeOutOfRange { node: 5, n: 3 })
        ));
    }

    #[test]
    fn sbm_extremes() {
        let spec = SbmSpec {
            n_per_block: 6,
            blocks: 1,
            p_in: 1.0,
            p_out: 0.0,
            feature_dim: 3,
            feature_shift: 1.0,
        };
        let g = generate_sbm(&spec, 1).unwrap();
        assert_eq!(g.num_edges(), 15);
        let empty = generate_sbm(
            &SbmSpec {
                blocks: 3,
                p_in: 0.0,
                ..spec
            },
            1,
        )
        .unwrap();
        assert_eq!(empty.num_edges(), 0);
        assert_eq!(empty.num_classes(), 3);
    }

    #[test]
    fn sbm_is_deterministic() {
        let spec = SbmSpec {
            n_per_block: 100,
            blocks: 3,
            p_in: 0.1,
            p_out: 0.01,
            feature_dim: 8,
            feature_shift: 1.0,
        };
        let a = generate_sbm(&spec, 42).unwrap();
        let b = generate_sbm(&spec, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.num_edges() > 0);
        let c = generate_sbm(&spec, 43).unwrap();
        assert_ne!(a.edges(), c.edges());
    }

    #[test]
    fn sbm_rejects_degenerate_input() {
        let spec = SbmSpec {
            n_per_block: 0,
            blocks: 2,
            p_in: 0.5,
            p_out: 0.1,
            feature_dim: 2,
            feature_shift: 0.0,
        };
        assert!(generate_sbm(&spec, 0).is_err());
        assert!(generate_sbm(
            &SbmSpec {
                n_per_block: 2,
                p_in: 1.5,
                ..spec
            },
            0
        )
        .is_err());
    }

    #[test]
    fn flip_edges_toggles() {
        let g = path(4);
        let h = g.flip_edges(&[(1, 0), (0, 3)]).unwrap();
        assert_eq!(h.edges(), &[(0, 3), (1, 2), (2, 3)]);
        assert_eq!(h.flip_edges(&[(0, 1), (3, 0)]).unwrap().edges(), g.edges());
    }
}
