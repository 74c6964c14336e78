//! Communication graphs.
//!
//! Static families (ring, cluster, star) are built once as templates of
//! potential neighbors. Each round, [`sample_round_graph`] turns the template,
//! or fresh random sampling, into per-node receive sets restricted to active
//! nodes and capped at the communication batch size `B`.

use std::io::Write;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{stream, Purpose};

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("{kind} topology needs at least {min} nodes, got {n}")]
    TooFewNodes { kind: &'static str, min: usize, n: usize },
    #[error("cluster size must be in 2..{n}, got {size}")]
    BadClusterSize { size: usize, n: usize },
    #[error("communication batch size must be >= 1")]
    ZeroBatch,
    #[error("active mask has {got} entries for {n} nodes")]
    MaskLength { n: usize, got: usize },
    #[error("graph invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Ring,
    Cluster,
    /// Directed: each active node draws up to `B` senders.
    Random,
    /// Symmetric random edges, degree capped at `B` greedily.
    RandomUndirected,
    Star,
}

impl TopologyKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Ring => "ring",
            Self::Cluster => "cluster",
            Self::Random => "random",
            Self::RandomUndirected => "random_undirected",
            Self::Star => "star",
        }
    }

    pub fn is_random(self) -> bool {
        matches!(self, Self::Random | Self::RandomUndirected)
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [Self::Ring, Self::Cluster, Self::Random, Self::RandomUndirected, Self::Star]
            .into_iter()
            .find(|k| k.name() == name)
    }
}

impl std::fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub kind: TopologyKind,
    /// Only used by [`TopologyKind::Cluster`].
    pub cluster_size: usize,
    /// Maximum number of neighbor models a node aggregates per round.
    pub comm_batch: usize,
}

impl TopologySpec {
    pub fn new(kind: TopologyKind, comm_batch: usize) -> Self {
        Self {
            kind,
            cluster_size: 4,
            comm_batch,
        }
    }
}

/// Per-node receive sets for one round. `in_neighbors[n]` lists, in
/// ascending id order, the nodes whose parameters `n` averages with its own.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommGraph {
    pub n_nodes: usize,
    pub in_neighbors: Vec<Vec<usize>>,
}

#[derive(Serialize)]
struct DumpLine<'a> {
    t: usize,
    node: usize,
    #[serde(rename = "in")]
    senders: &'a [usize],
}

impl CommGraph {
    fn from_undirected(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut in_neighbors = vec![Vec::new(); n];
        for (a, b) in edges {
            in_neighbors[a].push(b);
            in_neighbors[b].push(a);
        }
        for list in &mut in_neighbors {
            list.sort_unstable();
            list.dedup();
        }
        Self {
            n_nodes: n,
            in_neighbors,
        }
    }

    pub fn in_degree(&self, node: usize) -> usize {
        self.in_neighbors[node].len()
    }

    /// Number of directed (sender, receiver) links.
    pub fn directed_edges(&self) -> usize {
        self.in_neighbors.iter().map(Vec::len).sum()
    }

    /// Number of unordered node pairs linked in either direction.
    pub fn undirected_edges(&self) -> usize {
        let mut pairs: Vec<(usize, usize)> = self
            .in_neighbors
            .iter()
            .enumerate()
            .flat_map(|(n, list)| list.iter().map(move |&m| (n.min(m), n.max(m))))
            .collect();
        pairs.sort_unstable();
        pairs.dedup();
        pairs.len()
    }

    pub fn is_symmetric(&self) -> bool {
        self.in_neighbors
            .iter()
            .enumerate()
            .all(|(n, list)| list.iter().all(|&m| self.in_neighbors[m].binary_search(&n).is_ok()))
    }

    /// Checks the round-graph invariants: ids in range, sorted, no self-loops,
    /// at most `cap` senders per node and inactive nodes fully isolated.
    pub fn validate(&self, cap: usize, active: Option<&[bool]>) -> Result<(), TopologyError> {
        let bad = |m: String| Err(TopologyError::Invariant(m));
        if self.in_neighbors.len() != self.n_nodes {
            return bad("receive-set count differs from node count".into());
        }
        for (n, list) in self.in_neighbors.iter().enumerate() {
            if list.len() > cap {
                return bad(format!("node {n} has {} senders, cap {cap}", list.len()));
            }
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("node {n} senders not strictly ascending"));
            }
            for &m in list {
                if m >= self.n_nodes || m == n {
                    return bad(format!("node {n} has invalid sender {m}"));
                }
                if let Some(active) = active {
                    if !active[m] || !active[n] {
                        return bad(format!("inactive node on link {m} -> {n}"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Writes one JSON object per node: `{"t":t,"node":n,"in":[...]}`.
    pub fn write_json_lines<W: Write>(&self, t: usize, mut w: W) -> std::io::Result<()> {
        for (node, senders) in self.in_neighbors.iter().enumerate() {
            serde_json::to_writer(&mut w, &DumpLine { t, node, senders })?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn build_ring(n: usize) -> Result<CommGraph, TopologyError> {
    if n < 3 {
        return Err(TopologyError::TooFewNodes {
            kind: "ring",
            min: 3,
            n,
        });
    }
    Ok(CommGraph::from_undirected(n, (0..n).map(|i| (i, (i + 1) % n))))
}

/// Consecutive-id clusters, each complete internally; the first node of each
/// cluster links to the first node of the next, closing a ring of clusters.
/// The last cluster takes the remainder and may be smaller.
pub fn build_cluster(n: usize, cluster_size: usize) -> Result<CommGraph, TopologyError> {
    if n < 4 {
        return Err(TopologyError::TooFewNodes {
            kind: "cluster",
            min: 4,
            n,
        });
    }
    if cluster_size < 2 || cluster_size >= n {
        return Err(TopologyError::BadClusterSize { size: cluster_size, n });
    }
    let heads: Vec<usize> = (0..n).step_by(cluster_size).collect();
    let mut edges = Vec::new();
    for &head in &heads {
        let members: Vec<usize> = (head..(head + cluster_size).min(n)).collect();
        for (i, &a) in members.iter().enumerate() {
            edges.extend(members[i + 1..].iter().map(|&b| (a, b)));
        }
    }
    for (i, &head) in heads.iter().enumerate() {
        edges.push((head, heads[(i + 1) % heads.len()]));
    }
    Ok(CommGraph::from_undirected(n, edges))
}

/// Node 0 is the server.
pub fn build_star(n: usize) -> Result<CommGraph, TopologyError> {
    if n < 2 {
        return Err(TopologyError::TooFewNodes {
            kind: "star",
            min: 2,
            n,
        });
    }
    Ok(CommGraph::from_undirected(n, (1..n).map(|c| (0, c))))
}

/// Static neighbor template, `None` for the random families.
pub fn build_template(spec: &TopologySpec, n: usize) -> Result<Option<CommGraph>, TopologyError> {
    if spec.comm_batch == 0 {
        return Err(TopologyError::ZeroBatch);
    }
    match spec.kind {
        TopologyKind::Ring => build_ring(n).map(Some),
        TopologyKind::Cluster => build_cluster(n, spec.cluster_size).map(Some),
        TopologyKind::Star => build_star(n).map(Some),
        TopologyKind::Random | TopologyKind::RandomUndirected => {
            if n < 2 {
                return Err(TopologyError::TooFewNodes {
                    kind: "random",
                    min: 2,
                    n,
                });
            }
            Ok(None)
        }
    }
}

/// The receive sets for round `t`.
///
/// Random: each active node draws `min(B, #other active)` distinct active
/// senders uniformly, from a stream keyed by `(seed, t, node)`. Static: the
/// template neighbors that are active, truncated to the `B` lowest ids.
/// Inactive nodes neither send nor receive.
pub fn sample_round_graph(
    spec: &TopologySpec,
    template: Option<&CommGraph>,
    active: &[bool],
    seed: u64,
    t: usize,
) -> CommGraph {
    let n = active.len();
    let cap = spec.comm_batch;
    let in_neighbors = match (spec.kind, template) {
        (TopologyKind::Random, _) => {
            let live: Vec<usize> = (0..n).filter(|&i| active[i]).collect();
            (0..n)
                .map(|node| {
                    if !active[node] {
                        return Vec::new();
                    }
                    let others: Vec<usize> = live.iter().copied().filter(|&m| m != node).collect();
                    let k = cap.min(others.len());
                    let mut rng = stream(seed, Purpose::Topology, t as u64, node as u64);
                    let mut picked: Vec<usize> =
                        index::sample(&mut rng, others.len(), k).into_iter().map(|i| others[i]).collect();
                    picked.sort_unstable();
                    picked
                })
                .collect()
        }
        (TopologyKind::RandomUndirected, _) => {
            let live: Vec<usize> = (0..n).filter(|&i| active[i]).collect();
            let mut pairs: Vec<(usize, usize)> = live
                .iter()
                .enumerate()
                .flat_map(|(i, &a)| live[i + 1..].iter().map(move |&b| (a, b)))
                .collect();
            let mut rng = stream(seed, Purpose::Topology, t as u64, u64::MAX);
            pairs.shuffle(&mut rng);
            let mut degree = vec![0usize; n];
            let mut edges = Vec::new();
            for (a, b) in pairs {
                if degree[a] < cap && degree[b] < cap {
                    degree[a] += 1;
                    degree[b] += 1;
                    edges.push((a, b));
                }
            }
            return CommGraph::from_undirected(n, edges);
        }
        (_, Some(template)) => (0..n)
            .map(|node| {
                if !active[node] {
                    return Vec::new();
                }
                template.in_neighbors[node]
                    .iter()
                    .copied()
                    .filter(|&m| active[m])
                    .take(cap)
                    .collect()
            })
            .collect(),
        (kind, None) => panic!("{kind} topology needs a template"),
    };
    CommGraph {
        n_nodes: n,
        in_neighbors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn names_round_trip() {
        for k in [TopologyKind::Ring, TopologyKind::Cluster, TopologyKind::Random, TopologyKind::RandomUndirected, TopologyKind::Star] {
            assert_eq!(TopologyKind::from_name(k.name()), Some(k));
        }
        assert_eq!(TopologyKind::from_name("mesh"), None);
    }

    #[test]
    fn ring_examples() {
        let g = build_ring(4).unwrap();
        assert_eq!(g.in_neighbors[0], vec![1, 3]);
        let g3 = build_ring(3).unwrap();
        assert!((0..3).all(|n| g3.in_degree(n) == 2));
        for n in 3..20 {
            assert_eq!(build_ring(n).unwrap().undirected_edges(), n);
        }
        assert!(build_ring(2).is_err());
    }

    #[test]
    fn cluster_examples() {
        let g = build_cluster(8, 4).unwrap();
        // Intra-cluster degree 3; the bridge 0 <-> 4 adds one sender to each
        // bridge node and one directed link each way.
        assert_eq!(g.in_neighbors[0], vec![1, 2, 3, 4]);
        assert_eq!(g.in_neighbors[4], vec![0, 5, 6, 7]);
        assert_eq!(g.in_neighbors[5], vec![4, 6, 7]);
        assert_eq!(g.directed_edges(), 2 * (6 + 6 + 1));

        let g = build_cluster(6, 3).unwrap();
        assert_eq!(g.in_neighbors[0], vec![1, 2, 3]);
        assert_eq!(g.in_neighbors[3], vec![0, 4, 5]);
        assert_eq!(g.undirected_edges(), 3 + 3 + 1);

        let g = build_cluster(16, 4).unwrap();
        assert_eq!(g.in_neighbors[4], vec![0, 5, 6, 7, 8]);
        assert_eq!(g.in_neighbors[0], vec![1, 2, 3, 4, 12]);

        // Remainder cluster {8} is reached only through its bridge.
        let g = build_cluster(9, 4).unwrap();
        assert_eq!(g.in_neighbors[8], vec![0, 4]);

        assert!(build_cluster(8, 8).is_err());
        assert!(build_cluster(8, 1).is_err());
        assert!(build_cluster(3, 2).is_err());
    }

    #[test]
    fn star_examples() {
        let g = build_star(5).unwrap();
        assert_eq!(g.in_degree(0), 4);
        assert_eq!(g.in_neighbors[3], vec![0]);
        assert_eq!(g.undirected_edges(), 4);
    }

    #[test]
    fn all_inactive_is_empty() {
        for kind in [TopologyKind::Ring, TopologyKind::Cluster, TopologyKind::Random, TopologyKind::RandomUndirected] {
            let spec = TopologySpec::new(kind, 3);
            let tmpl = build_template(&spec, 8).unwrap();
            let g = sample_round_graph(&spec, tmpl.as_ref(), &[false; 8], 1, 1);
            assert_eq!(g.directed_edges(), 0);
        }
    }

    #[test]
    fn random_complete_when_cap_allows() {
        let spec = TopologySpec::new(TopologyKind::Random, 7);
        let g = sample_round_graph(&spec, None, &[true; 8], 3, 10);
        assert!((0..8).all(|n| g.in_degree(n) == 7));
    }

    #[test]
    fn ring_filters_inactive() {
        let spec = TopologySpec::new(TopologyKind::Ring, 7);
        let tmpl = build_template(&spec, 6).unwrap();
        let mut active = [true; 6];
        active[3] = false;
        let g = sample_round_graph(&spec, tmpl.as_ref(), &active, 0, 1);
        assert_eq!(g.in_neighbors[2], vec![1]);
        assert!(g.in_neighbors[3].is_empty());
    }

    #[test]
    fn static_truncation_by_ascending_id() {
        let spec = TopologySpec {
            kind: TopologyKind::Cluster,
            cluster_size: 4,
            comm_batch: 2,
        };
        let tmpl = build_template(&spec, 16).unwrap();
        let g = sample_round_graph(&spec, tmpl.as_ref(), &[true; 16], 0, 1);
        assert_eq!(g.in_neighbors[4], vec![0, 5]);
    }

    #[test]
    fn json_lines_dump() {
        let g = build_ring(3).unwrap();
        let mut out = Vec::new();
        g.write_json_lines(7, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next().unwrap(), r#"{"t":7,"node":0,"in":[1,2]}"#);
        assert_eq!(text.lines().count(), 3);
    }

    /// Exact probability that a given other node is among the `k` senders of
    /// a node with `m` active peers: C(m-1, k-1) / C(m, k) = k / m.
    fn exact_pair_probability(m: usize, k: usize) -> f64 {
        let choose = |n: usize, r: usize| -> f64 {
            (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
        };
        choose(m - 1, k - 1) / choose(m, k)
    }

    #[test]
    fn random_sampling_is_uniform() {
        let (n, cap, rounds) = (8, 2, 100_000);
        let spec = TopologySpec::new(TopologyKind::Random, cap);
        let mut counts = vec![vec![0u32; n]; n];
        for t in 0..rounds {
            let g = sample_round_graph(&spec, None, &vec![true; n], 2024, t);
            for (node, senders) in g.in_neighbors.iter().enumerate() {
                for &m in senders {
                    counts[node][m] += 1;
                }
            }
        }
        let p = exact_pair_probability(n - 1, cap);
        assert!((p - 2.0 / 7.0).abs() < 1e-12);
        let sigma = (rounds as f64 * p * (1.0 - p)).sqrt();
        for (node, row) in counts.iter().enumerate() {
            for (m, &c) in row.iter().enumerate() {
                if m == node {
                    assert_eq!(c, 0);
                } else {
                    let dev = (c as f64 - rounds as f64 * p).abs();
                    assert!(dev < 3.0 * sigma, "pair ({m}->{node}) off by {dev}");
                }
            }
        }
    }

    fn kind_strategy() -> impl Strategy<Value = TopologyKind> {
        prop_oneof![
            Just(TopologyKind::Ring),
            Just(TopologyKind::Cluster),
            Just(TopologyKind::Random),
            Just(TopologyKind::RandomUndirected),
            Just(TopologyKind::Star),
        ]
    }

    proptest! {
        #[test]
        fn round_graphs_respect_invariants(
            kind in kind_strategy(),
            n in 5usize..24,
            cap in 1usize..8,
            cluster in 2usize..5,
            seed in any::<u64>(),
            t in 0usize..1000,
            mask_bits in any::<u32>(),
        ) {
            let spec = TopologySpec { kind, cluster_size: cluster, comm_batch: cap };
            let tmpl = build_template(&spec, n).unwrap();
            let active: Vec<bool> = (0..n).map(|i| mask_bits >> i & 1 == 1).collect();
            let g = sample_round_graph(&spec, tmpl.as_ref(), &active, seed, t);
            prop_assert!(g.validate(cap, Some(&active)).is_ok(), "{:?}", g.validate(cap, Some(&active)));
            if kind == TopologyKind::RandomUndirected {
                prop_assert!(g.is_symmetric());
            }
            let again = sample_round_graph(&spec, tmpl.as_ref(), &active, seed, t);
            prop_assert_eq!(g, again);
        }
    }
}
