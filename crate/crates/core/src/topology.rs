//! Interaction graph and desired formation.
//!
//! A directed edge `(j, i)` means agent `i` measures agent `j`; it is stored
//! as a positive entry `a_ij` of the adjacency matrix. Agent indices are
//! zero-based here; file formats and printed diagnostics use one-based ids.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_to_pi, wrap_to_tau};

/// Spacings and certificates are compared modulo 2pi to this tolerance.
pub const ADMISSIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("a topology needs at least 2 agents, got {0}")]
    TooFewAgents(usize),
    #[error("edge {from}->{to} references an agent outside 1..={n}")]
    AgentOutOfRange { from: usize, to: usize, n: usize },
    #[error("self-loop on agent {0}")]
    SelfLoop(usize),
    #[error("edge {from}->{to} has invalid weight {weight}")]
    InvalidWeight { from: usize, to: usize, weight: f64 },
    #[error("edge {from}->{to} listed twice")]
    DuplicateEdge { from: usize, to: usize },
}

/// Reasons a formation is not admissible over a topology.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Inadmissible {
    #[error("expected {expected} radii, got {got}")]
    RadiusCount { expected: usize, got: usize },
    #[error("admissibility: desired radius of agent {agent} must be positive, got {value}")]
    NonPositiveRadius { agent: usize, value: f64 },
    #[error("admissibility: edge {j}->{i} has no desired spacing")]
    MissingSpacing { i: usize, j: usize },
    #[error("admissibility: spacing for pair ({i}, {j}) is not an edge of the topology")]
    SpacingWithoutEdge { i: usize, j: usize },
    #[error("admissibility: spacing d_{i}{j} = {value} outside [0, 2pi)")]
    SpacingOutOfRange { i: usize, j: usize, value: f64 },
    #[error(
        "admissibility: spacings are inconsistent on edge {j}->{i}: d_{i}{j} = {given} but the phase vector implies {implied}"
    )]
    InconsistentEdge { i: usize, j: usize, given: f64, implied: f64 },
    #[error("admissibility: certificate disagrees with spacing d_{i}{j} by {gap:e} rad")]
    CertificateMismatch { i: usize, j: usize, gap: f64 },
    #[error("admissibility undetermined: agents {unreached:?} are not reached from any root (no directed spanning tree)")]
    Undetermined { unreached: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    n: usize,
    /// Row-major `n x n`, entry `[i * n + j]` is `a_ij`.
    adjacency: Vec<f64>,
}

impl Topology {
    /// Builds a topology from `(from, to, weight)` triples where `to`
    /// measures `from`. Indices are zero-based.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self, TopologyError> {
        if n < 2 {
            return Err(TopologyError::TooFewAgents(n));
        }
        let mut adjacency = vec![0.0; n * n];
        for &(from, to, weight) in edges {
            if from >= n || to >= n {
                return Err(TopologyError::AgentOutOfRange { from: from + 1, to: to + 1, n });
            }
            if from == to {
                return Err(TopologyError::SelfLoop(from + 1));
            }
            if !(weight.is_finite() && weight > 0.0) {
                return Err(TopologyError::InvalidWeight { from: from + 1, to: to + 1, weight });
            }
            let cell = &mut adjacency[to * n + from];
            if *cell > 0.0 {
                return Err(TopologyError::DuplicateEdge { from: from + 1, to: to + 1 });
            }
            *cell = weight;
        }
        Ok(Self { n, adjacency })
    }

    /// Unit-weight directed loop in which agent `i` measures agent `i + 1`.
    pub fn directed_ring(n: usize) -> Result<Self, TopologyError> {
        let edges: Vec<_> = (0..n).map(|i| ((i + 1) % n, i, 1.0)).collect();
        Self::from_edges(n, &edges)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// `a_ij`: weight with which agent `i` listens to agent `j`.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency[i * self.n + j]
    }

    /// Neighbors of `i` (the agents it measures) with their weights.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let row = &self.adjacency[i * self.n..(i + 1) * self.n];
        row.iter().enumerate().filter(|(_, &a)| a > 0.0).map(|(j, &a)| (j, a))
    }

    /// All edges as `(i, j, a_ij)`, ordered by `i` then `j`.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        (0..self.n).flat_map(|i| self.neighbors(i).map(move |(j, a)| (i, j, a))).collect()
    }

    pub fn in_degree(&self, i: usize) -> f64 {
        self.neighbors(i).map(|(_, a)| a).sum()
    }

    /// Agents reachable from `root` following information flow `j -> i`.
    pub fn reachable_from(&self, root: usize) -> Vec<bool> {
        let mut seen = vec![false; self.n];
        let mut stack = vec![root];
        seen[root] = true;
        while let Some(j) = stack.pop() {
            for i in 0..self.n {
                if !seen[i] && self.weight(i, j) > 0.0 {
                    seen[i] = true;
                    stack.push(i);
                }
            }
        }
        seen
    }

    /// Lowest-index agent from which every agent is reachable.
    pub fn spanning_root(&self) -> Option<usize> {
        (0..self.n).find(|&r| self.reachable_from(r).iter().all(|&s| s))
    }

    pub fn has_directed_spanning_tree(&self) -> bool {
        self.spanning_root().is_some()
    }

    pub fn degree_stats(&self) -> DegreeStats {
        let degrees: Vec<f64> = (0..self.n).map(|i| self.in_degree(i)).collect();
        let d_max = degrees.iter().copied().fold(0.0, f64::max);
        DegreeStats { d_max, degrees }
    }
}

/// Row sums of the adjacency matrix; `degrees` is the diagonal of `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct DegreeStats {
    pub d_max: f64,
    pub degrees: Vec<f64>,
}

/// `|mu|` times the largest weighted in-degree. The coupling offset `c`
/// must be strictly larger for the coupling function to stay positive.
pub fn gain_lower_bound(topology: &Topology, mu: f64) -> f64 {
    mu.abs() * topology.degree_stats().d_max
}

/// Desired radii and per-edge angular spacings.
///
/// `spacings[(i, j)]` is the desired counterclockwise angle, about the
/// target, from agent `i` to its neighbor `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormationSpec {
    pub radii: Vec<f64>,
    pub spacings: BTreeMap<(usize, usize), f64>,
    pub certificate: Option<Vec<f64>>,
}

impl FormationSpec {
    /// Expands a phase vector into spacings `d_ij = (d_j - d_i) mod 2pi` on
    /// every edge of `topology`.
    pub fn from_certificate(radii: Vec<f64>, phases: Vec<f64>, topology: &Topology) -> Self {
        let spacings = topology
            .edges()
            .into_iter()
            .map(|(i, j, _)| ((i, j), wrap_to_tau(phases[j] - phases[i])))
            .collect();
        let phases = phases.into_iter().map(wrap_to_tau).collect();
        Self { radii, spacings, certificate: Some(phases) }
    }

    pub fn spacing(&self, i: usize, j: usize) -> Option<f64> {
        self.spacings.get(&(i, j)).copied()
    }

    pub fn max_radius(&self) -> f64 {
        self.radii.iter().copied().fold(0.0, f64::max)
    }
}

/// Checks that the formation is realizable and returns a phase vector `d`
/// with `d_ij = d_j - d_i (mod 2pi)` on every edge, the root's phase set to 0.
pub fn check_admissible(spec: &FormationSpec, topology: &Topology) -> Result<Vec<f64>, Inadmissible> {
    let n = topology.len();
    if spec.radii.len() != n {
        return Err(Inadmissible::RadiusCount { expected: n, got: spec.radii.len() });
    }
    if let Some((agent, &value)) = spec.radii.iter().enumerate().find(|(_, r)| !(**r > 0.0 && r.is_finite())) {
        return Err(Inadmissible::NonPositiveRadius { agent: agent + 1, value });
    }
    for &(i, j) in spec.spacings.keys() {
        if i >= n || j >= n || topology.weight(i, j) <= 0.0 {
            return Err(Inadmissible::SpacingWithoutEdge { i: i + 1, j: j + 1 });
        }
    }
    for (i, j, _) in topology.edges() {
        let value = spec.spacing(i, j).ok_or(Inadmissible::MissingSpacing { i: i + 1, j: j + 1 })?;
        if !(0.0..TAU).contains(&value) {
            return Err(Inadmissible::SpacingOutOfRange { i: i + 1, j: j + 1, value });
        }
    }

    let root = topology.spanning_root().ok_or_else(|| {
        let seen = topology.reachable_from(0);
        let unreached = (0..n).filter(|&k| !seen[k]).map(|k| k + 1).collect();
        Inadmissible::Undetermined { unreached }
    })?;

    let mut phases: Vec<Option<f64>> = vec![None; n];
    phases[root] = Some(0.0);
    let mut queue = std::collections::VecDeque::from([root]);
    while let Some(j) = queue.pop_front() {
        let dj = phases[j].expect("queued agents have a phase");
        for i in 0..n {
            if phases[i].is_none() && topology.weight(i, j) > 0.0 {
                let dij = spec.spacings[&(i, j)];
                phases[i] = Some(wrap_to_tau(dj - dij));
                queue.push_back(i);
            }
        }
    }
    let phases: Vec<f64> = phases.into_iter().map(|p| p.expect("spanning root reaches all")).collect();

    for (i, j, _) in topology.edges() {
        let given = spec.spacings[&(i, j)];
        let implied = wrap_to_tau(phases[j] - phases[i]);
        if wrap_to_pi(given - implied).abs() > ADMISSIBILITY_TOL {
            return Err(Inadmissible::InconsistentEdge { i: i + 1, j: j + 1, given, implied });
        }
    }
    if let Some(cert) = &spec.certificate {
        if cert.len() != n {
            return Err(Inadmissible::RadiusCount { expected: n, got: cert.len() });
        }
        for (i, j, _) in topology.edges() {
            let gap = wrap_to_pi(spec.spacings[&(i, j)] - (cert[j] - cert[i])).abs();
            if gap > ADMISSIBILITY_TOL {
                return Err(Inadmissible::CertificateMismatch { i: i + 1, j: j + 1, gap });
            }
        }
    }
    Ok(phases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    /// Transitive closure by Warshall's algorithm; independent of the DFS
    /// used by the implementation.
    fn closure_has_root(n: usize, edges: &[(usize, usize)]) -> bool {
        let mut reach = vec![vec![false; n]; n];
        for (k, row) in reach.iter_mut().enumerate() {
            row[k] = true;
        }
        for &(from, to) in edges {
            reach[from][to] = true;
        }
        for k in 0..n {
            for a in 0..n {
                if reach[a][k] {
                    for b in 0..n {
                        if reach[k][b] {
                            reach[a][b] = true;
                        }
                    }
                }
            }
        }
        reach.iter().any(|row| row.iter().all(|&r| r))
    }

    fn all_pairs(n: usize) -> Vec<(usize, usize)> {
        (0..n).flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b))).collect()
    }

    fn topo(n: usize, edges: &[(usize, usize)]) -> Topology {
        let weighted: Vec<_> = edges.iter().map(|&(f, t)| (f, t, 1.0)).collect();
        Topology::from_edges(n, &weighted).unwrap()
    }

    #[test]
    fn spanning_tree_examples() {
        assert!(topo(3, &[(0, 1), (1, 2)]).has_directed_spanning_tree());
        assert!(!topo(3, &[(0, 1), (2, 1)]).has_directed_spanning_tree());
        assert!(Topology::directed_ring(7).unwrap().has_directed_spanning_tree());
    }

    #[test]
    fn spanning_tree_matches_closure_exhaustively_up_to_four() {
        for n in 2..=4 {
            let pairs = all_pairs(n);
            for mask in 0u32..(1 << pairs.len()) {
                let edges: Vec<_> =
                    pairs.iter().enumerate().filter(|(k, _)| mask >> k & 1 == 1).map(|(_, &p)| p).collect();
                assert_eq!(topo(n, &edges).has_directed_spanning_tree(), closure_has_root(n, &edges), "{edges:?}");
            }
        }
    }

    #[test]
    fn spanning_tree_matches_closure_randomized_five() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pairs = all_pairs(5);
        for _ in 0..10_000 {
            let density: f64 = rng.gen_range(0.05..0.5);
            let edges: Vec<_> = pairs.iter().copied().filter(|_| rng.gen_bool(density)).collect();
            assert_eq!(topo(5, &edges).has_directed_spanning_tree(), closure_has_root(5, &edges));
        }
    }

    #[test]
    fn invalid_topologies() {
        assert_eq!(Topology::from_edges(1, &[]), Err(TopologyError::TooFewAgents(1)));
        assert!(matches!(Topology::from_edges(2, &[(0, 0, 1.0)]), Err(TopologyError::SelfLoop(1))));
        assert!(matches!(Topology::from_edges(2, &[(0, 1, -1.0)]), Err(TopologyError::InvalidWeight { .. })));
        assert!(matches!(Topology::from_edges(2, &[(0, 5, 1.0)]), Err(TopologyError::AgentOutOfRange { .. })));
    }

    #[test]
    fn triangle_ring_is_admissible() {
        let t = Topology::directed_ring(3).unwrap();
        let third = 2.0 * PI / 3.0;
        let spacings = t.edges().into_iter().map(|(i, j, _)| ((i, j), third)).collect();
        let spec = FormationSpec { radii: vec![1.0; 3], spacings, certificate: None };
        let d = check_admissible(&spec, &t).unwrap();
        // agent 1 listens to agent 2 with d_12 = 2pi/3, so agent 2 sits 2pi/3 ahead
        assert_abs_diff_eq!(d[0], 0.0);
        assert_abs_diff_eq!(d[1], third, epsilon = 1e-12);
        assert_abs_diff_eq!(d[2], 2.0 * third, epsilon = 1e-12);
    }

    #[test]
    fn inconsistent_pair_is_inadmissible() {
        let t = topo(2, &[(1, 0), (0, 1)]);
        let spacings = BTreeMap::from([((0, 1), PI), ((1, 0), PI / 2.0)]);
        let spec = FormationSpec { radii: vec![1.0, 1.0], spacings, certificate: None };
        assert!(matches!(check_admissible(&spec, &t), Err(Inadmissible::InconsistentEdge { .. })));
    }

    #[test]
    fn nonpositive_radius_is_inadmissible() {
        let t = Topology::directed_ring(3).unwrap();
        let spec = FormationSpec::from_certificate(vec![1.0, 0.0, 2.0], vec![0.0, 1.0, 2.0], &t);
        assert_eq!(
            check_admissible(&spec, &t),
            Err(Inadmissible::NonPositiveRadius { agent: 2, value: 0.0 })
        );
    }

    #[test]
    fn missing_root_is_undetermined() {
        let t = topo(3, &[(0, 1), (2, 1)]);
        let spec = FormationSpec::from_certificate(vec![1.0; 3], vec![0.0, 1.0, 2.0], &t);
        assert!(matches!(check_admissible(&spec, &t), Err(Inadmissible::Undetermined { .. })));
    }

    #[test]
    fn certificate_mismatch_is_reported() {
        let t = Topology::directed_ring(3).unwrap();
        let mut spec = FormationSpec::from_certificate(vec![1.0; 3], vec![0.0, 1.0, 2.0], &t);
        spec.certificate = Some(vec![0.0, 1.0, 2.5]);
        assert!(matches!(check_admissible(&spec, &t), Err(Inadmissible::CertificateMismatch { .. })));
    }

    #[test]
    fn gain_bound_examples() {
        let ring = Topology::directed_ring(7).unwrap();
        assert_eq!(gain_lower_bound(&ring, -1.0), 1.0);
        assert!(1.1 > gain_lower_bound(&ring, -1.0));
        assert_eq!(gain_lower_bound(&ring, 0.0), 0.0);
        let fan_in = topo(3, &[(1, 0), (2, 0)]);
        assert_eq!(gain_lower_bound(&fan_in, 2.0), 4.0);
    }

    #[test]
    fn degree_stats_examples() {
        assert_eq!(Topology::directed_ring(7).unwrap().degree_stats().d_max, 1.0);
        assert_eq!(Topology::from_edges(3, &[]).unwrap().degree_stats().d_max, 0.0);
        let t = Topology::from_edges(3, &[(1, 0, 0.5), (2, 0, 0.7)]).unwrap();
        let stats = t.degree_stats();
        assert_abs_diff_eq!(stats.d_max, 1.2, epsilon = 1e-15);
        assert_eq!(stats.degrees[1], 0.0);
    }

    /// Random graph containing a spanning tree rooted at `root`, plus extras.
    fn graph_with_tree() -> impl Strategy<Value = (usize, Vec<(usize, usize)>, Vec<f64>, usize)> {
        (3usize..=6).prop_flat_map(|n| {
            (
                Just(n),
                proptest::collection::vec(any::<u32>(), n),
                proptest::collection::vec(0.0..TAU, n),
                0..n,
                proptest::collection::vec(any::<bool>(), n * n),
            )
                .prop_map(|(n, parents, phases, root, extra)| {
                    let mut edges = Vec::new();
                    for k in 1..n {
                        // parent is any earlier node in a root-first labelling
                        let child = (root + k) % n;
                        let parent = (root + (parents[k] as usize % k)) % n;
                        edges.push((parent, child));
                    }
                    for a in 0..n {
                        for b in 0..n {
                            if a != b && extra[a * n + b] && !edges.contains(&(a, b)) {
                                edges.push((a, b));
                            }
                        }
                    }
                    (n, edges, phases, root)
                })
        })
    }

    proptest! {
        #[test]
        fn certificate_regenerates_spacings((n, edges, phases, _root) in graph_with_tree()) {
            let t = topo(n, &edges);
            let spec = FormationSpec::from_certificate(vec![1.0; n], phases, &t);
            let d = check_admissible(&spec, &t).unwrap();
            for (i, j, _) in t.edges() {
                let regenerated = wrap_to_tau(d[j] - d[i]);
                prop_assert!(wrap_to_pi(regenerated - spec.spacings[&(i, j)]).abs() < 1e-9);
            }
        }

        #[test]
        fn certificate_is_unique_up_to_a_constant((n, edges, phases, _root) in graph_with_tree()) {
            let t = topo(n, &edges);
            let spec = FormationSpec::from_certificate(vec![1.0; n], phases.clone(), &t);
            let d = check_admissible(&spec, &t).unwrap();
            // any other valid phase vector differs from ours by one shift
            let shift = wrap_to_pi(phases[0] - d[0]);
            for k in 0..n {
                prop_assert!(wrap_to_pi(phases[k] - d[k] - shift).abs() < 1e-9);
            }
        }

        #[test]
        fn perturbed_cycle_edge_breaks_admissibility(n in 3usize..7, bump in 1e-6..1.0f64) {
            let t = Topology::directed_ring(n).unwrap();
            let phases: Vec<f64> = (0..n).map(|k| k as f64 * 0.7).collect();
            let mut spec = FormationSpec::from_certificate(vec![1.0; n], phases, &t);
            spec.certificate = None;
            let entry = spec.spacings.get_mut(&(n - 1, 0)).unwrap();
            *entry = wrap_to_tau(*entry + bump);
            prop_assert!(check_admissible(&spec, &t).is_err());
        }
    }
}
