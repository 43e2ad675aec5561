//! Guideway graph and the distance-derived quantities used by dispatch scoring.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Station,
    /// Parking depot: holds vehicles, never has a passenger queue.
    Capacitor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    pub berth_count: u32,
    #[serde(default)]
    pub name: String,
}

impl Node {
    pub fn station(id: usize, berth_count: u32, name: impl Into<String>) -> Self {
        Node { id: NodeId(id), kind: NodeKind::Station, berth_count, name: name.into() }
    }

    pub fn capacitor(id: usize, berth_count: u32, name: impl Into<String>) -> Self {
        Node { id: NodeId(id), kind: NodeKind::Capacitor, berth_count, name: name.into() }
    }

    pub fn is_station(&self) -> bool {
        self.kind == NodeKind::Station
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Edge<T> {
    pub from: NodeId,
    pub to: NodeId,
    /// Meters.
    pub length: T,
}

impl<T: Scalar> Edge<T> {
    pub fn new(from: usize, to: usize, length: T) -> Self {
        Edge { from: NodeId(from), to: NodeId(to), length }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("a network needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("node at position {position} has id {id}; ids must be 0..n in order")]
    InvalidNodeId { position: usize, id: usize },
    #[error("node {0} has no berths")]
    NoBerths(NodeId),
    #[error("invalid edge {from} -> {to}: {reason}")]
    InvalidEdge { from: usize, to: usize, reason: &'static str },
    #[error("node {to} is unreachable from node {from}")]
    NotStronglyConnected { from: NodeId, to: NodeId },
    #[error("normalized inverse distance is undefined from a node to itself ({0})")]
    SameNode(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
}

/// Directed guideway with precomputed shortest distances.
///
/// `dist[i][j]` is the shortest path length from `i` to `j`, `d_av` its mean
/// over ordered pairs of distinct nodes and `nd[i][j] = d_av / dist[i][j]`.
/// The diagonal of `nd` holds zero and is never exposed through
/// [`NetworkModel::nd_between`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct NetworkModel<T> {
    nodes: Vec<Node>,
    edges: Vec<Edge<T>>,
    dist: Vec<Vec<T>>,
    d_av: T,
    nd: Vec<Vec<T>>,
}

impl<T: Scalar> NetworkModel<T> {
    pub fn build(nodes: Vec<Node>, edges: Vec<Edge<T>>) -> Result<Self, NetworkError> {
        let n = nodes.len();
        if n < 2 {
            return Err(NetworkError::TooFewNodes(n));
        }
        for (position, node) in nodes.iter().enumerate() {
            if node.id.0 != position {
                return Err(NetworkError::InvalidNodeId { position, id: node.id.0 });
            }
            if node.berth_count == 0 {
                return Err(NetworkError::NoBerths(node.id));
            }
        }

        let inf = T::infinity();
        let mut dist = vec![vec![inf; n]; n];
        for (i, row) in dist.iter_mut().enumerate() {
            row[i] = T::zero();
        }
        let mut seen = vec![vec![false; n]; n];
        for e in &edges {
            let (from, to) = (e.from.0, e.to.0);
            let bad = |reason| NetworkError::InvalidEdge { from, to, reason };
            if from >= n || to >= n {
                return Err(bad("unknown node"));
            }
            if from == to {
                return Err(bad("self-loop"));
            }
            if !(e.length > T::zero()) || !e.length.is_finite() {
                return Err(bad("length must be positive and finite"));
            }
            if seen[from][to] {
                return Err(bad("parallel edge"));
            }
            seen[from][to] = true;
            dist[from][to] = e.length;
        }

        // Floyd-Warshall; desk-scale networks stay well under 100 nodes.
        for k in 0..n {
            for i in 0..n {
                let dik = dist[i][k];
                if dik == inf {
                    continue;
                }
                for j in 0..n {
                    let via = dik + dist[k][j];
                    if via < dist[i][j] {
                        dist[i][j] = via;
                    }
                }
            }
        }

        let mut total = T::zero();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    if dist[i][j] == inf {
                        return Err(NetworkError::NotStronglyConnected { from: NodeId(i), to: NodeId(j) });
                    }
                    total = total + dist[i][j];
                }
            }
        }
        let d_av = total / T::of_usize(n * (n - 1));
        let nd = (0..n).map(|i| (0..n).map(|j| if i == j { T::zero() } else { d_av / dist[i][j] }).collect()).collect();

        Ok(NetworkModel { nodes, edges, dist, d_av, nd })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn edges(&self) -> &[Edge<T>] {
        &self.edges
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn stations(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().filter(|n| n.is_station()).map(|n| n.id)
    }

    pub fn dist(&self, from: NodeId, to: NodeId) -> T {
        self.dist[from.0][to.0]
    }

    pub fn dist_matrix(&self) -> &[Vec<T>] {
        &self.dist
    }

    pub fn d_av(&self) -> T {
        self.d_av
    }

    /// Normalized inverse distance from `i` to `j`; 1 at the average distance.
    pub fn nd_between(&self, i: NodeId, j: NodeId) -> Result<T, NetworkError> {
        if i.0 >= self.len() {
            return Err(NetworkError::UnknownNode(i));
        }
        if j.0 >= self.len() {
            return Err(NetworkError::UnknownNode(j));
        }
        if i == j {
            return Err(NetworkError::SameNode(i));
        }
        Ok(self.nd[i.0][j.0])
    }

    /// Unchecked variant for hot loops where `i != j` is already known.
    pub(crate) fn nd_raw(&self, i: NodeId, j: NodeId) -> T {
        self.nd[i.0][j.0]
    }

    /// Fewest-hop edge counts from `from` to every node (`usize::MAX` if unreachable).
    pub fn hops(&self, from: NodeId) -> Vec<usize> {
        let n = self.len();
        let mut hops = vec![usize::MAX; n];
        hops[from.0] = 0;
        let mut frontier = std::collections::VecDeque::from([from.0]);
        while let Some(u) = frontier.pop_front() {
            for e in self.edges.iter().filter(|e| e.from.0 == u) {
                if hops[e.to.0] == usize::MAX {
                    hops[e.to.0] = hops[u] + 1;
                    frontier.push_back(e.to.0);
                }
            }
        }
        hops
    }

    pub fn total_berths(&self) -> u64 {
        self.nodes.iter().map(|n| n.berth_count as u64).sum()
    }

    /// Converts every length to another precision.
    pub fn cast<U: Scalar>(&self) -> NetworkModel<U> {
        let conv = |v: T| U::of(v.as_f64());
        NetworkModel {
            nodes: self.nodes.clone(),
            edges: self.edges.iter().map(|e| Edge { from: e.from, to: e.to, length: conv(e.length) }).collect(),
            dist: self.dist.iter().map(|r| r.iter().copied().map(conv).collect()).collect(),
            d_av: conv(self.d_av),
            nd: self.nd.iter().map(|r| r.iter().copied().map(conv).collect()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ring3() -> NetworkModel<f64> {
        let nodes = vec![Node::station(0, 2, "A"), Node::station(1, 2, "B"), Node::station(2, 2, "C")];
        let edges = vec![Edge::new(0, 1, 100.0), Edge::new(1, 2, 100.0), Edge::new(2, 0, 100.0)];
        NetworkModel::build(nodes, edges).unwrap()
    }

    #[test]
    fn two_node_shuttle_has_unit_nd() {
        let nodes = vec![Node::station(0, 1, "A"), Node::station(1, 1, "B")];
        let edges = vec![Edge::new(0, 1, 100.0), Edge::new(1, 0, 100.0)];
        let net = NetworkModel::build(nodes, edges).unwrap();
        assert_eq!(net.d_av(), 100.0);
        assert_eq!(net.nd_between(NodeId(0), NodeId(1)).unwrap(), 1.0);
    }

    #[test]
    fn directed_ring_distances() {
        let net = ring3();
        assert_eq!(net.dist(NodeId(0), NodeId(1)), 100.0);
        assert_eq!(net.dist(NodeId(1), NodeId(0)), 200.0);
        assert_eq!(net.d_av(), 150.0);
        assert_eq!(net.nd_between(NodeId(0), NodeId(1)).unwrap(), 1.5);
        assert_eq!(net.nd_between(NodeId(1), NodeId(0)).unwrap(), 0.75);
    }

    #[test]
    fn half_average_distance_gives_nd_two() {
        // A->B 50, B->A 150: d_av = 100, dist[A][B] = d_av / 2.
        let nodes = vec![Node::station(0, 1, "A"), Node::station(1, 1, "B")];
        let edges = vec![Edge::new(0, 1, 50.0), Edge::new(1, 0, 150.0)];
        let net = NetworkModel::build(nodes, edges).unwrap();
        assert_eq!(net.nd_between(NodeId(0), NodeId(1)).unwrap(), 2.0);
    }

    #[test]
    fn same_node_is_rejected() {
        let net = ring3();
        assert_eq!(net.nd_between(NodeId(1), NodeId(1)), Err(NetworkError::SameNode(NodeId(1))));
    }

    #[test]
    fn unreachable_node_is_rejected() {
        let nodes = vec![Node::station(0, 1, "A"), Node::station(1, 1, "B"), Node::station(2, 1, "C")];
        let edges = vec![Edge::new(0, 1, 10.0), Edge::new(1, 0, 10.0), Edge::new(2, 0, 10.0)];
        let err = NetworkModel::build(nodes, edges).unwrap_err();
        assert!(matches!(err, NetworkError::NotStronglyConnected { .. }));
    }

    #[test]
    fn invalid_edges_are_rejected() {
        let nodes = || vec![Node::station(0, 1, "A"), Node::station(1, 1, "B")];
        for edges in [
            vec![Edge::new(0, 0, 10.0)],
            vec![Edge::new(0, 5, 10.0)],
            vec![Edge::new(0, 1, 0.0)],
            vec![Edge::new(0, 1, -3.0)],
            vec![Edge::new(0, 1, 10.0), Edge::new(0, 1, 12.0)],
        ] {
            let err = NetworkModel::build(nodes(), edges).unwrap_err();
            assert!(matches!(err, NetworkError::InvalidEdge { .. }), "{err}");
        }
    }

    #[test]
    fn f32_network_matches_f64() {
        let net32 = ring3().cast::<f32>();
        assert_eq!(net32.d_av(), 150.0f32);
        assert_eq!(net32.nd_between(NodeId(1), NodeId(0)).unwrap(), 0.75f32);
    }

    fn arb_network() -> impl Strategy<Value = (usize, Vec<(usize, usize, f64)>)> {
        (2usize..7).prop_flat_map(|n| {
            let extra = proptest::collection::vec((0..n, 0..n, 1.0f64..500.0), 0..12);
            let ring = proptest::collection::vec(1.0f64..500.0, n);
            (Just(n), ring, extra).prop_map(|(n, ring, extra)| {
                let mut edges: Vec<(usize, usize, f64)> =
                    ring.into_iter().enumerate().map(|(i, l)| (i, (i + 1) % n, l)).collect();
                for (a, b, l) in extra {
                    if a != b && !edges.iter().any(|e| e.0 == a && e.1 == b) {
                        edges.push((a, b, l));
                    }
                }
                (n, edges)
            })
        })
    }

    fn build(n: usize, edges: &[(usize, usize, f64)]) -> NetworkModel<f64> {
        let nodes = (0..n).map(|i| Node::station(i, 2, format!("S{i}"))).collect();
        let edges = edges.iter().map(|&(a, b, l)| Edge::new(a, b, l)).collect();
        NetworkModel::build(nodes, edges).unwrap()
    }

    proptest! {
        #[test]
        fn nd_times_distance_is_average((n, edges) in arb_network()) {
            let net = build(n, &edges);
            let mut inv_sum = 0.0;
            for i in net.node_ids() {
                for j in net.node_ids().filter(|&j| j != i) {
                    let nd = net.nd_between(i, j).unwrap();
                    let prod = nd * net.dist(i, j);
                    prop_assert!((prod - net.d_av()).abs() <= 1e-12 * net.d_av());
                    inv_sum += 1.0 / nd;
                }
            }
            let mean_inv = inv_sum / (n * (n - 1)) as f64;
            prop_assert!((mean_inv - 1.0).abs() < 1e-12);
        }

        #[test]
        fn triangle_inequality_holds((n, edges) in arb_network()) {
            let net = build(n, &edges);
            for i in net.node_ids() {
                for j in net.node_ids() {
                    for k in net.node_ids() {
                        prop_assert!(net.dist(i, j) <= net.dist(i, k) + net.dist(k, j) + 1e-9);
                    }
                }
            }
        }

        #[test]
        fn lengthening_an_edge_never_shortens_paths(
            (n, edges) in arb_network(),
            pick in any::<prop::sample::Index>(),
            extra in 0.0f64..300.0,
        ) {
            let before = build(n, &edges);
            let mut longer = edges.clone();
            let e = pick.index(longer.len());
            longer[e].2 += extra;
            let after = build(n, &longer);
            for i in before.node_ids() {
                for j in before.node_ids() {
                    prop_assert!(after.dist(i, j) >= before.dist(i, j));
                }
            }
        }
    }
}
