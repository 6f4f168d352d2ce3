use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::Sbom;

pub const HISTOGRAM_BUCKETS: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DependencyGraph {
    pub nodes: BTreeSet<String>,
    pub edges: BTreeMap<String, BTreeSet<String>>,
    pub roots: BTreeSet<String>,
}

impl DependencyGraph {
    /// Roots are the subject's direct dependencies; without a subject entry,
    /// every node nobody depends on.
    pub fn from_sbom(sbom: &Sbom) -> Self {
        let nodes: BTreeSet<String> = sbom.components.iter().map(|c| c.key.clone()).collect();
        let edges = sbom.dependencies.clone();
        let roots = match &sbom.subject_depends_on {
            Some(r) => r.iter().filter(|k| nodes.contains(*k)).cloned().collect(),
            None => {
                let targets: BTreeSet<&String> = edges.values().flatten().collect();
                nodes.iter().filter(|n| !targets.contains(n)).cloned().collect()
            }
        };
        DependencyGraph { nodes, edges, roots }
    }

    pub fn new(
        nodes: impl IntoIterator<Item = String>,
        edges: impl IntoIterator<Item = (String, String)>,
        roots: impl IntoIterator<Item = String>,
    ) -> Self {
        let mut g = DependencyGraph {
            nodes: nodes.into_iter().collect(),
            ..Default::default()
        };
        for (a, b) in edges {
            g.edges.entry(a).or_default().insert(b);
        }
        g.roots = roots.into_iter().collect();
        g
    }

    pub fn children(&self, n: &str) -> impl Iterator<Item = &String> {
        self.edges.get(n).into_iter().flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DepthAssignment {
    pub depths: BTreeMap<String, u32>,
    pub unreachable: BTreeSet<String>,
}

impl DepthAssignment {
    pub fn depth(&self, node: &str) -> Option<u32> {
        self.depths.get(node).copied()
    }
}

/// Shortest distance from the root set, by multi-source breadth-first search.
/// Cycles are harmless: a node is settled the first time it is reached.
pub fn compute_depths(g: &DependencyGraph) -> DepthAssignment {
    let mut depths: BTreeMap<String, u32> = BTreeMap::new();
    let mut queue = VecDeque::new();
    for r in &g.roots {
        if depths.insert(r.clone(), 0).is_none() {
            queue.push_back(r.clone());
        }
    }
    while let Some(n) = queue.pop_front() {
        let d = depths[&n];
        for c in g.children(&n) {
            if !depths.contains_key(c) {
                depths.insert(c.clone(), d + 1);
                queue.push_back(c.clone());
            }
        }
    }
    let unreachable = g.nodes.iter().filter(|n| !depths.contains_key(*n)).cloned().collect();
    DepthAssignment { depths, unreachable }
}

/// Counts per depth 0..=4, with bucket 5 holding everything at depth ≥ 5.
pub fn depth_histogram(a: &DepthAssignment) -> [u64; HISTOGRAM_BUCKETS] {
    let mut h = [0u64; HISTOGRAM_BUCKETS];
    for &d in a.depths.values() {
        h[(d as usize).min(HISTOGRAM_BUCKETS - 1)] += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(x: &str) -> String {
        x.to_string()
    }

    #[test]
    fn trivial_shapes() {
        let g = DependencyGraph::new([s("r")], [], [s("r")]);
        let a = compute_depths(&g);
        assert_eq!(a.depth("r"), Some(0));
        assert_eq!(depth_histogram(&a), [1, 0, 0, 0, 0, 0]);

        let g = DependencyGraph::new([s("r"), s("a"), s("b")], [(s("r"), s("a")), (s("a"), s("b"))], [s("r")]);
        let a = compute_depths(&g);
        assert_eq!((a.depth("r"), a.depth("a"), a.depth("b")), (Some(0), Some(1), Some(2)));
    }

    #[test]
    fn chain_of_eight_caps_at_five() {
        let names: Vec<String> = (0..8).map(|i| format!("n{i}")).collect();
        let edges = names.windows(2).map(|w| (w[0].clone(), w[1].clone()));
        let g = DependencyGraph::new(names.clone(), edges, [names[0].clone()]);
        assert_eq!(depth_histogram(&compute_depths(&g)), [1, 1, 1, 1, 1, 3]);
    }

    #[test]
    fn diamond_takes_shortest_path() {
        let edges = [("r", "n"), ("r", "x"), ("x", "y"), ("y", "n")].map(|(a, b)| (s(a), s(b)));
        let g = DependencyGraph::new(["r", "n", "x", "y"].map(s), edges, [s("r")]);
        assert_eq!(compute_depths(&g).depth("n"), Some(1));
    }

    #[test]
    fn cycles_and_unreachable() {
        let edges = [("r", "a"), ("a", "r"), ("u", "v"), ("v", "u")].map(|(a, b)| (s(a), s(b)));
        let g = DependencyGraph::new(["r", "a", "u", "v"].map(s), edges, [s("r")]);
        let a = compute_depths(&g);
        assert_eq!(a.depths.len(), 2);
        assert_eq!(a.unreachable, ["u", "v"].map(s).into_iter().collect());
        assert_eq!(depth_histogram(&a).iter().sum::<u64>(), 2);
    }

    #[test]
    fn node_that_is_root_and_transitive_gets_zero() {
        let edges = [("r", "a"), ("a", "q")].map(|(a, b)| (s(a), s(b)));
        let g = DependencyGraph::new(["r", "a", "q"].map(s), edges, [s("r"), s("q")]);
        assert_eq!(compute_depths(&g).depth("q"), Some(0));
    }

    /// Independent oracle: Bellman-Ford style relaxation from every root
    /// until a fixed point, taking the minimum over roots.
    fn relaxation_oracle(n: usize, edges: &[(usize, usize)], roots: &[usize]) -> Vec<Option<u32>> {
        let mut dist: Vec<Option<u32>> = vec![None; n];
        for &r in roots {
            dist[r] = Some(0);
        }
        loop {
            let mut changed = false;
            for &(a, b) in edges {
                if let Some(da) = dist[a] {
                    if dist[b].is_none_or(|db| da + 1 < db) {
                        dist[b] = Some(da + 1);
                        changed = true;
                    }
                }
            }
            if !changed {
                return dist;
            }
        }
    }

    fn graph_strategy() -> impl Strategy<Value = (usize, Vec<(usize, usize)>, Vec<usize>)> {
        (1usize..200).prop_flat_map(|n| {
            (
                Just(n),
                prop::collection::vec((0..n, 0..n), 0..(n * 3)),
                prop::collection::vec(0..n, 1..4),
            )
        })
    }

    proptest! {
        #[test]
        fn depths_match_relaxation_oracle((n, edges, roots) in graph_strategy()) {
            let name = |i: usize| format!("n{i:03}");
            let g = DependencyGraph::new(
                (0..n).map(name),
                edges.iter().map(|&(a, b)| (name(a), name(b))),
                roots.iter().map(|&r| name(r)),
            );
            let a = compute_depths(&g);
            let oracle = relaxation_oracle(n, &edges, &roots);
            for (i, expected) in oracle.iter().enumerate() {
                prop_assert_eq!(a.depth(&name(i)), *expected);
                prop_assert_eq!(a.unreachable.contains(&name(i)), expected.is_none());
            }
            let zero: BTreeSet<String> = a.depths.iter().filter(|(_, d)| **d == 0).map(|(k, _)| k.clone()).collect();
            prop_assert_eq!(zero, g.roots.clone());
            let mut recount = [0u64; HISTOGRAM_BUCKETS];
            for d in oracle.iter().flatten() {
                recount[(*d as usize).min(5)] += 1;
            }
            prop_assert_eq!(depth_histogram(&a), recount);
            for (p, cs) in &g.edges {
                if let Some(dp) = a.depth(p) {
                    for c in cs {
                        prop_assert!(a.depth(c).unwrap() <= dp + 1);
                    }
                }
            }
        }
    }
}
