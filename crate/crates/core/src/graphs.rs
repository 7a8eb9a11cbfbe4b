//! Process-level graph `G0`, its clique expansion to the rate-level graph `G`,
//! and the Bernoulli edge prior.
//!
//! Within-process rate nodes always form a clique; an edge `h - k` in `G0`
//! switches on the complete bipartite block between the rate nodes of `h` and
//! `k`. Graph moves act on `G0` only, so `G` never leaves the image of
//! [`expand`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::StudyDesign;

/// Largest supported rate-level graph.
pub const MAX_RATE_NODES: usize = 128;

/// Simple undirected graph over processes, stored as adjacency bitmasks.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProcessGraph {
    p: usize,
    adj: Vec<u64>,
}

impl ProcessGraph {
    pub fn empty(p: usize) -> Self {
        assert!(p <= 64, "at most 64 processes");
        ProcessGraph { p, adj: vec![0; p] }
    }

    pub fn complete(p: usize) -> Self {
        let mut g = Self::empty(p);
        for (h, k) in all_pairs(p) {
            g.set(h, k, true);
        }
        g
    }

    pub fn from_edges(p: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = Self::empty(p);
        for &(h, k) in edges {
            if h == k || h >= p || k >= p {
                return Err(Error::validation(format!("invalid process edge ({h}, {k}) for {p} processes")));
            }
            if g.has_edge(h, k) {
                return Err(Error::validation(format!("duplicate process edge ({h}, {k})")));
            }
            g.set(h, k, true);
        }
        Ok(g)
    }

    pub fn n_nodes(&self) -> usize {
        self.p
    }

    pub fn has_edge(&self, h: usize, k: usize) -> bool {
        h != k && self.adj[h] >> k & 1 == 1
    }

    pub fn set(&mut self, h: usize, k: usize, present: bool) {
        assert!(h != k, "self-loops are not allowed");
        if present {
            self.adj[h] |= 1 << k;
            self.adj[k] |= 1 << h;
        } else {
            self.adj[h] &= !(1 << k);
            self.adj[k] &= !(1 << h);
        }
    }

    /// Flips edge `h - k`; returns whether it is present afterwards.
    pub fn toggle(&mut self, h: usize, k: usize) -> bool {
        let now = !self.has_edge(h, k);
        self.set(h, k, now);
        now
    }

    pub fn with_toggled(&self, h: usize, k: usize) -> Self {
        let mut g = self.clone();
        g.toggle(h, k);
        g
    }

    pub fn n_edges(&self) -> usize {
        self.adj.iter().map(|a| a.count_ones() as usize).sum::<usize>() / 2
    }

    /// Edges `(h, k)` with `h < k`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        all_pairs(self.p).filter(|&(h, k)| self.has_edge(h, k)).collect()
    }
}

/// All unordered pairs `(h, k)`, `h < k`, in lexicographic order.
pub fn all_pairs(p: usize) -> impl Iterator<Item = (usize, usize)> + Clone {
    (0..p).flat_map(move |h| ((h + 1)..p).map(move |k| (h, k)))
}

pub fn n_pairs(p: usize) -> usize {
    p * p.saturating_sub(1) / 2
}

/// Undirected graph over the `D_p` rate nodes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct RateGraph {
    n: usize,
    adj: Vec<u128>,
}

impl RateGraph {
    pub fn empty(n: usize) -> Self {
        assert!(n <= MAX_RATE_NODES, "at most {MAX_RATE_NODES} rate nodes");
        RateGraph { n, adj: vec![0; n] }
    }

    pub fn complete(n: usize) -> Self {
        let mut g = Self::empty(n);
        let full = if n == 128 { u128::MAX } else { (1u128 << n) - 1 };
        for i in 0..n {
            g.adj[i] = full & !(1u128 << i);
        }
        g
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i != j && self.adj[i] >> j & 1 == 1
    }

    pub fn set(&mut self, i: usize, j: usize, present: bool) {
        assert!(i != j, "self-loops are not allowed");
        if present {
            self.adj[i] |= 1 << j;
            self.adj[j] |= 1 << i;
        } else {
            self.adj[i] &= !(1 << j);
            self.adj[j] &= !(1 << i);
        }
    }

    pub fn neighbours(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let mask = self.adj[i];
        (0..self.n).filter(move |&j| mask >> j & 1 == 1)
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adj[i].count_ones() as usize
    }

    pub fn n_edges(&self) -> usize {
        self.adj.iter().map(|a| a.count_ones() as usize).sum::<usize>() / 2
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        all_pairs(self.n).filter(|&(i, j)| self.has_edge(i, j)).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.n_edges() == n_pairs(self.n)
    }

    /// Connected components, each sorted, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.n];
        let mut out = Vec::new();
        for start in 0..self.n {
            if seen[start] {
                continue;
            }
            let mut comp = vec![start];
            seen[start] = true;
            let mut stack = vec![start];
            while let Some(v) = stack.pop() {
                for w in self.neighbours(v) {
                    if !seen[w] {
                        seen[w] = true;
                        comp.push(w);
                        stack.push(w);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// True when every component is a clique.
    pub fn is_disjoint_cliques(&self) -> bool {
        self.components().iter().all(|c| {
            c.iter().all(|&i| self.degree(i) == c.len() - 1)
        })
    }
}

/// Clique expansion `G0 -> G`.
pub fn expand(g0: &ProcessGraph, design: &StudyDesign) -> RateGraph {
    assert_eq!(g0.n_nodes(), design.n_processes(), "graph and design disagree on p");
    let mut g = RateGraph::empty(design.total_rates());
    for h in 0..design.n_processes() {
        let range = design.rate_range(h);
        for i in range.clone() {
            for j in (i + 1)..range.end {
                g.set(i, j, true);
            }
        }
    }
    for (h, k) in g0.edges() {
        for i in design.rate_range(h) {
            for j in design.rate_range(k) {
                g.set(i, j, true);
            }
        }
    }
    g
}

/// Inverse of [`expand`]; fails when `g` is not in its image.
pub fn contract(g: &RateGraph, design: &StudyDesign) -> Result<ProcessGraph> {
    if g.n_nodes() != design.total_rates() {
        return Err(Error::Structural(format!(
            "graph has {} nodes, design has {} rates",
            g.n_nodes(),
            design.total_rates()
        )));
    }
    let p = design.n_processes();
    for h in 0..p {
        let range = design.rate_range(h);
        for i in range.clone() {
            for j in (i + 1)..range.end {
                if !g.has_edge(i, j) {
                    return Err(Error::Structural(format!(
                        "within-process edge {i}-{j} of process {} is missing",
                        h + 1
                    )));
                }
            }
        }
    }
    let mut g0 = ProcessGraph::empty(p);
    for (h, k) in all_pairs(p) {
        let mut present = 0usize;
        let mut total = 0usize;
        for i in design.rate_range(h) {
            for j in design.rate_range(k) {
                total += 1;
                present += usize::from(g.has_edge(i, j));
            }
        }
        if present == total {
            g0.set(h, k, true);
        } else if present != 0 {
            return Err(Error::Structural(format!(
                "partial block between processes {} and {} ({present} of {total} edges)",
                h + 1,
                k + 1
            )));
        }
    }
    Ok(g0)
}

/// Edge count of `expand(g0)` from the closed-form sum.
pub fn expanded_edge_count(g0: &ProcessGraph, design: &StudyDesign) -> usize {
    let within: usize = (0..design.n_processes()).map(|h| n_pairs(design.n_rates(h))).sum();
    let cross: usize = g0
        .edges()
        .into_iter()
        .map(|(h, k)| design.n_rates(h) * design.n_rates(k))
        .sum();
    within + cross
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta < 1.0 {
        Ok(())
    } else {
        Err(Error::validation(format!("edge probability must lie in (0, 1), got {eta}")))
    }
}

/// `log(eta^|E0| (1 - eta)^(C(p,2) - |E0|))`.
pub fn log_prior(g0: &ProcessGraph, eta: f64) -> Result<f64> {
    check_eta(eta)?;
    let e = g0.n_edges() as f64;
    let absent = n_pairs(g0.n_nodes()) as f64 - e;
    Ok(e * eta.ln() + absent * (-eta).ln_1p())
}

/// Log prior ratio for toggling edge `h - k` of `g0`.
pub fn log_prior_ratio(g0: &ProcessGraph, h: usize, k: usize, eta: f64) -> Result<f64> {
    check_eta(eta)?;
    let odds = eta.ln() - (-eta).ln_1p();
    Ok(if g0.has_edge(h, k) { -odds } else { odds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ProcessSpec;
    use proptest::prelude::*;

    fn design(states: &[usize]) -> StudyDesign {
        StudyDesign::new(
            states
                .iter()
                .enumerate()
                .map(|(h, &d)| ProcessSpec::new(format!("p{h}"), d))
                .collect(),
        )
        .unwrap()
    }

    fn every_graph(p: usize) -> Vec<ProcessGraph> {
        let pairs: Vec<_> = all_pairs(p).collect();
        (0u32..(1 << pairs.len()))
            .map(|mask| {
                let edges: Vec<_> = pairs
                    .iter()
                    .enumerate()
                    .filter(|(b, _)| mask >> b & 1 == 1)
                    .map(|(_, &e)| e)
                    .collect();
                ProcessGraph::from_edges(p, &edges).unwrap()
            })
            .collect()
    }

    #[test]
    fn empty_graph_expands_to_disjoint_cliques() {
        let d = design(&[2, 2, 2]);
        let g = expand(&ProcessGraph::empty(3), &d);
        assert_eq!(g.n_edges(), 3);
        assert_eq!(g.components().len(), 3);
        assert!(g.is_disjoint_cliques());
        for h in 0..3 {
            assert!(g.has_edge(2 * h, 2 * h + 1));
        }
    }

    #[test]
    fn single_cross_edge_adds_one_block() {
        let d = design(&[2, 2, 2]);
        let g0 = ProcessGraph::from_edges(3, &[(0, 1)]).unwrap();
        let g = expand(&g0, &d);
        assert_eq!(g.n_edges(), 7);
        for i in 0..2 {
            for j in 2..4 {
                assert!(g.has_edge(i, j));
            }
            for j in 4..6 {
                assert!(!g.has_edge(i, j));
            }
        }
    }

    #[test]
    fn complete_graph_expands_to_complete() {
        let d = design(&[2, 3, 2]);
        let g = expand(&ProcessGraph::complete(3), &d);
        assert!(g.is_complete());
        assert_eq!(contract(&RateGraph::complete(d.total_rates()), &d).unwrap(), ProcessGraph::complete(3));
    }

    #[test]
    fn round_trip_and_edge_count_exhaustive() {
        for states in [vec![2, 2, 2], vec![2, 3], vec![3, 2, 2, 2], vec![2, 2, 3, 2]] {
            let d = design(&states);
            for g0 in every_graph(states.len()) {
                let g = expand(&g0, &d);
                assert_eq!(contract(&g, &d).unwrap(), g0);
                assert_eq!(g.n_edges(), expanded_edge_count(&g0, &d));
            }
        }
    }

    #[test]
    fn contract_rejects_graphs_outside_the_image() {
        let d = design(&[2, 2, 2]);
        let mut g = expand(&ProcessGraph::empty(3), &d);
        g.set(0, 1, false);
        assert!(matches!(contract(&g, &d), Err(Error::Structural(_))));

        let mut partial = expand(&ProcessGraph::empty(3), &d);
        partial.set(0, 2, true);
        assert!(matches!(contract(&partial, &d), Err(Error::Structural(_))));
    }

    #[test]
    fn prior_ratio_examples() {
        let g0 = ProcessGraph::empty(3);
        let r = log_prior_ratio(&g0, 0, 1, 0.1).unwrap();
        assert!((r - (1.0f64 / 9.0).ln()).abs() < 1e-15);
        assert!((r + 2.1972).abs() < 1e-4);
        assert_eq!(log_prior_ratio(&g0, 0, 2, 0.5).unwrap(), 0.0);
        let added = g0.with_toggled(0, 1);
        let back = log_prior_ratio(&added, 0, 1, 0.1).unwrap();
        assert!((r + back).abs() < 1e-15);
        assert!(log_prior_ratio(&g0, 0, 1, 1.0).is_err());
    }

    #[test]
    fn prior_ratio_agrees_with_prior_difference() {
        for g0 in every_graph(4) {
            for (h, k) in all_pairs(4) {
                let diff = log_prior(&g0.with_toggled(h, k), 0.3).unwrap() - log_prior(&g0, 0.3).unwrap();
                assert!((diff - log_prior_ratio(&g0, h, k, 0.3).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prior_normalises() {
        for p in 1..=4 {
            for eta in [0.1, 0.5, 0.77] {
                let total: f64 = every_graph(p).iter().map(|g| log_prior(g, eta).unwrap().exp()).sum();
                assert!((total - 1.0).abs() < 1e-12, "p={p} eta={eta} total={total}");
            }
        }
    }

    #[test]
    fn from_edges_validates() {
        assert!(ProcessGraph::from_edges(3, &[(0, 0)]).is_err());
        assert!(ProcessGraph::from_edges(3, &[(0, 3)]).is_err());
        assert!(ProcessGraph::from_edges(3, &[(0, 1), (1, 0)]).is_err());
    }

    proptest! {
        #[test]
        fn expansion_commutes_with_relabelling(mask in 0u32..64, perm_seed in 0usize..24) {
            // four binary processes: relabelling processes permutes rate blocks
            let p = 4;
            let pairs: Vec<_> = all_pairs(p).collect();
            let edges: Vec<_> = pairs.iter().enumerate().filter(|(b, _)| mask >> b & 1 == 1).map(|(_, &e)| e).collect();
            let g0 = ProcessGraph::from_edges(p, &edges).unwrap();
            let mut perm: Vec<usize> = (0..p).collect();
            let mut s = perm_seed;
            for i in (1..p).rev() {
                perm.swap(i, s % (i + 1));
                s /= i + 1;
            }
            let relabelled: Vec<_> = edges.iter().map(|&(h, k)| (perm[h].min(perm[k]), perm[h].max(perm[k]))).collect();
            let g0p = ProcessGraph::from_edges(p, &relabelled).unwrap();
            let d = design(&[2, 2, 2, 2]);
            let g = expand(&g0, &d);
            let gp = expand(&g0p, &d);
            let node = |i: usize| 2 * perm[i / 2] + i % 2;
            for i in 0..8 {
                for j in 0..8 {
                    if i != j {
                        prop_assert_eq!(g.has_edge(i, j), gp.has_edge(node(i), node(j)));
                    }
                }
            }
        }
    }
}
