//! Sum-product networks over discrete indicator leaves.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

mod fg;
mod gates;
mod lipschitz;
mod passes;
mod region;

pub use fg::{spn_to_factor_graph, SpnFactorGraph};
pub use gates::{gate_report, kkt_multipliers, GateEntry, Kkt, ProductEdge};
pub use lipschitz::{lipschitz_probe, LipschitzReport, LogBox};
pub use passes::{
    derivative_sums, downward_pass, downward_pass_log, marginals_batch, raw_marginals, upward_pass,
    upward_pass_log, variable_marginals, variable_marginals_log, AdjointMap, ValueMap,
};
pub use region::{region_two_step, Region, RegionFamily, REGION_BUDGET};

#[derive(Debug, Clone, PartialEq)]
pub enum SpnNode {
    Sum { children: Vec<(usize, f64)> },
    Product { children: Vec<usize> },
    Leaf { var: usize, state: usize },
}

impl SpnNode {
    pub fn children(&self) -> Vec<usize> {
        match self {
            SpnNode::Sum { children } => children.iter().map(|c| c.0).collect(),
            SpnNode::Product { children } => children.clone(),
            SpnNode::Leaf { .. } => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpnIssue {
    BadRoot,
    UnknownChild {
        node: usize,
        child: usize,
    },
    NoChildren {
        node: usize,
    },
    NonPositiveWeight {
        node: usize,
        child: usize,
        weight: f64,
    },
    BadLeaf {
        node: usize,
        var: usize,
        state: usize,
    },
    Cycle {
        nodes: Vec<usize>,
    },
    Unreachable {
        node: usize,
    },
    Incomplete {
        sum: usize,
        child: usize,
    },
    NotDecomposable {
        product: usize,
        var: usize,
    },
    VariableOutOfScope {
        var: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SpnReport {
    pub issues: Vec<SpnIssue>,
    /// Sorted scope per node; empty when structure could not be resolved.
    pub scopes: Vec<Vec<usize>>,
}

impl SpnReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Children-before-parents ordering of the nodes reachable from `root`
/// (ascending index among ready nodes); `Err` lists nodes on a cycle.
fn bottom_up_order(nodes: &[SpnNode], root: usize) -> core::result::Result<Vec<usize>, Vec<usize>> {
    // Iterative DFS with colors: 0 unseen, 1 on stack, 2 done.
    let mut color = vec![0u8; nodes.len()];
    let mut order = Vec::new();
    let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
    color[root] = 1;
    while let Some(&mut (n, ref mut k)) = stack.last_mut() {
        let ch = nodes[n].children();
        if *k < ch.len() {
            let c = ch[*k];
            *k += 1;
            match color[c] {
                0 => {
                    color[c] = 1;
                    stack.push((c, 0));
                }
                1 => {
                    let mut cyc: Vec<usize> = stack.iter().map(|s| s.0).collect();
                    cyc.sort_unstable();
                    return Err(cyc);
                }
                _ => {}
            }
        } else {
            color[n] = 2;
            order.push(n);
            stack.pop();
        }
    }
    Ok(order)
}

pub fn validate_spn_parts(nodes: &[SpnNode], root: usize, cards: &[usize]) -> SpnReport {
    let mut issues = Vec::new();
    if root >= nodes.len() {
        return SpnReport {
            issues: vec![SpnIssue::BadRoot],
            scopes: Vec::new(),
        };
    }
    let mut links_ok = true;
    for (i, n) in nodes.iter().enumerate() {
        match n {
            SpnNode::Leaf { var, state } => {
                if *var >= cards.len() || *state >= cards[*var] {
                    issues.push(SpnIssue::BadLeaf {
                        node: i,
                        var: *var,
                        state: *state,
                    });
                }
            }
            SpnNode::Sum { children } => {
                for &(c, w) in children {
                    if !(w > 0.0 && w.is_finite()) {
                        issues.push(SpnIssue::NonPositiveWeight {
                            node: i,
                            child: c,
                            weight: w,
                        });
                    }
                }
            }
            SpnNode::Product { .. } => {}
        }
        if !matches!(n, SpnNode::Leaf { .. }) && n.children().is_empty() {
            issues.push(SpnIssue::NoChildren { node: i });
        }
        for c in n.children() {
            if c >= nodes.len() {
                issues.push(SpnIssue::UnknownChild { node: i, child: c });
                links_ok = false;
            }
        }
    }
    if !links_ok {
        return SpnReport {
            issues,
            scopes: Vec::new(),
        };
    }
    let order = match bottom_up_order(nodes, root) {
        Ok(o) => o,
        Err(cyc) => {
            issues.push(SpnIssue::Cycle { nodes: cyc });
            return SpnReport {
                issues,
                scopes: Vec::new(),
            };
        }
    };
    let mut reached = vec![false; nodes.len()];
    order.iter().for_each(|&n| reached[n] = true);
    for (i, r) in reached.iter().enumerate() {
        if !r {
            issues.push(SpnIssue::Unreachable { node: i });
        }
    }
    let mut scopes: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); nodes.len()];
    for &n in &order {
        match &nodes[n] {
            SpnNode::Leaf { var, .. } => {
                scopes[n].insert(*var);
            }
            SpnNode::Sum { children } => {
                let mut s = BTreeSet::new();
                for &(c, _) in children {
                    s.extend(scopes[c].iter().copied());
                }
                for &(c, _) in children {
                    if scopes[c] != s {
                        issues.push(SpnIssue::Incomplete { sum: n, child: c });
                    }
                }
                scopes[n] = s;
            }
            SpnNode::Product { children } => {
                let mut s = BTreeSet::new();
                let mut clash = BTreeSet::new();
                for &c in children {
                    for &v in &scopes[c] {
                        if !s.insert(v) {
                            clash.insert(v);
                        }
                    }
                }
                for var in clash {
                    issues.push(SpnIssue::NotDecomposable { product: n, var });
                }
                scopes[n] = s;
            }
        }
    }
    for var in 0..cards.len() {
        if !scopes[root].contains(&var) {
            issues.push(SpnIssue::VariableOutOfScope { var });
        }
    }
    SpnReport {
        issues,
        scopes: scopes
            .into_iter()
            .map(|s| s.into_iter().collect())
            .collect(),
    }
}

/// A validated, complete and decomposable circuit whose root reaches every node.
#[derive(Debug, Clone, PartialEq)]
pub struct SpnCircuit {
    nodes: Vec<SpnNode>,
    root: usize,
    cards: Vec<usize>,
    order: Vec<usize>,
    scopes: Vec<Vec<usize>>,
    parents: Vec<Vec<usize>>,
}

impl SpnCircuit {
    pub fn new(nodes: Vec<SpnNode>, root: usize, cards: Vec<usize>) -> Result<Self> {
        let report = validate_spn_parts(&nodes, root, &cards);
        if let Some(issue) = report.issues.first() {
            return Err(Error::Invalid(alloc::format!("{issue:?}")));
        }
        let order = bottom_up_order(&nodes, root).map_err(|_| Error::Cycle)?;
        let mut parents = vec![Vec::new(); nodes.len()];
        for (i, n) in nodes.iter().enumerate() {
            for c in n.children() {
                parents[c].push(i);
            }
        }
        Ok(Self {
            nodes,
            root,
            cards,
            order,
            scopes: report.scopes,
            parents,
        })
    }

    /// Alphabet sizes implied by the leaves: `max state + 1` per variable.
    pub fn infer_cards(nodes: &[SpnNode]) -> Vec<usize> {
        let mut cards = Vec::new();
        for n in nodes {
            if let SpnNode::Leaf { var, state } = *n {
                if cards.len() <= var {
                    cards.resize(var + 1, 0);
                }
                cards[var] = cards[var].max(state + 1);
            }
        }
        cards
    }

    pub fn nodes(&self) -> &[SpnNode] {
        &self.nodes
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn cards(&self) -> &[usize] {
        &self.cards
    }

    pub fn n_vars(&self) -> usize {
        self.cards.len()
    }

    /// Children before parents.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn scope(&self, n: usize) -> &[usize] {
        &self.scopes[n]
    }

    pub fn parents(&self, n: usize) -> &[usize] {
        &self.parents[n]
    }

    /// No node has more than one parent edge.
    pub fn is_tree(&self) -> bool {
        let mut count = vec![0usize; self.nodes.len()];
        for n in &self.nodes {
            for c in n.children() {
                count[c] += 1;
            }
        }
        count.iter().all(|&k| k <= 1)
    }

    /// Depth of the longest root-to-leaf path, in edges.
    pub fn depth(&self) -> usize {
        let mut d = vec![0usize; self.nodes.len()];
        for &n in &self.order {
            d[n] = self.nodes[n]
                .children()
                .iter()
                .map(|&c| d[c] + 1)
                .max()
                .unwrap_or(0);
        }
        d[self.root]
    }
}

pub fn validate_spn(c: &SpnCircuit) -> SpnReport {
    validate_spn_parts(&c.nodes, c.root, &c.cards)
}

/// Default budget for [`unroll`].
pub const UNROLL_BUDGET: usize = 10_000;

/// Copies shared sub-circuits so every node has a single parent.
pub fn unroll(c: &SpnCircuit, max_nodes: usize) -> Result<SpnCircuit> {
    // Count the tree size first so the budget is checked before allocating.
    let mut size = vec![0usize; c.nodes.len()];
    for &n in &c.order {
        let s = c.nodes[n]
            .children()
            .iter()
            .try_fold(1usize, |acc, &ch| acc.checked_add(size[ch]));
        size[n] = s.unwrap_or(usize::MAX);
    }
    if size[c.root] > max_nodes {
        return Err(Error::BudgetExceeded {
            size: size[c.root],
            budget: max_nodes,
        });
    }
    let mut out: Vec<SpnNode> = Vec::with_capacity(size[c.root]);
    fn copy(c: &SpnCircuit, n: usize, out: &mut Vec<SpnNode>) -> usize {
        let idx = out.len();
        out.push(SpnNode::Leaf { var: 0, state: 0 });
        let node = match &c.nodes[n] {
            SpnNode::Leaf { var, state } => SpnNode::Leaf {
                var: *var,
                state: *state,
            },
            SpnNode::Sum { children } => SpnNode::Sum {
                children: children
                    .iter()
                    .map(|&(ch, w)| (copy(c, ch, out), w))
                    .collect(),
            },
            SpnNode::Product { children } => SpnNode::Product {
                children: children.iter().map(|&ch| copy(c, ch, out)).collect(),
            },
        };
        out[idx] = node;
        idx
    }
    let root = copy(c, c.root, &mut out);
    SpnCircuit::new(out, root, c.cards.clone())
}

/// Per-variable indicator values `λ_{i,t}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Evidence {
    pub lambda: Vec<Vec<f64>>,
}

impl Evidence {
    /// All ones.
    pub fn ones(cards: &[usize]) -> Self {
        Self {
            lambda: cards.iter().map(|&k| vec![1.0; k]).collect(),
        }
    }

    pub fn is_soft(&self) -> bool {
        self.lambda.iter().flatten().all(|&l| l > 0.0)
    }

    pub fn check(&self, c: &SpnCircuit) -> Result<()> {
        if self.lambda.len() != c.n_vars() {
            return Err(Error::DimensionMismatch {
                expected: c.n_vars(),
                found: self.lambda.len(),
            });
        }
        for (i, (l, &k)) in self.lambda.iter().zip(c.cards()).enumerate() {
            if l.len() != k {
                return Err(Error::DimensionMismatch {
                    expected: k,
                    found: l.len(),
                });
            }
            if let Some(t) = l.iter().position(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::NonPositiveEntry {
                    index: t,
                    value: l[t],
                });
            }
            if l.iter().all(|&x| x == 0.0) {
                return Err(Error::EmptySupport(i));
            }
        }
        Ok(())
    }

    /// One-hot evidence for a complete assignment.
    pub fn one_hot(cards: &[usize], x: &[usize]) -> Self {
        Self {
            lambda: cards
                .iter()
                .zip(x)
                .map(|(&k, &xi)| (0..k).map(|t| if t == xi { 1.0 } else { 0.0 }).collect())
                .collect(),
        }
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Two binary variables: r = w1·[X=0][Y=0] + w2·[X=1][Y=1].
    /// Nodes: 0 r, 1 P1, 2 P2, 3 X0, 4 Y0, 5 X1, 6 Y1.
    pub fn example(w1: f64, w2: f64) -> SpnCircuit {
        SpnCircuit::new(
            vec![
                SpnNode::Sum {
                    children: vec![(1, w1), (2, w2)],
                },
                SpnNode::Product {
                    children: vec![3, 4],
                },
                SpnNode::Product {
                    children: vec![5, 6],
                },
                SpnNode::Leaf { var: 0, state: 0 },
                SpnNode::Leaf { var: 1, state: 0 },
                SpnNode::Leaf { var: 0, state: 1 },
                SpnNode::Leaf { var: 1, state: 1 },
            ],
            0,
            vec![2, 2],
        )
        .unwrap()
    }

    pub fn e1() -> (SpnCircuit, Evidence) {
        (
            example(0.6, 0.4),
            Evidence {
                lambda: vec![vec![1.0, 0.5], vec![1.0, 0.8]],
            },
        )
    }

    /// Brute-force marginals via one-hot evaluation of every assignment.
    pub fn enumerate(c: &SpnCircuit, e: &Evidence) -> Vec<Vec<f64>> {
        let cards = c.cards();
        let total: usize = cards.iter().product();
        let mut m: Vec<Vec<f64>> = cards.iter().map(|&k| vec![0.0; k]).collect();
        let mut z = 0.0;
        for idx in 0..total {
            let mut x = vec![0; cards.len()];
            let mut r = idx;
            for v in (0..cards.len()).rev() {
                x[v] = r % cards[v];
                r /= cards[v];
            }
            let coef = upward_pass(c, &Evidence::one_hot(cards, &x)).unwrap().s[c.root()];
            let w = coef
                * x.iter()
                    .enumerate()
                    .map(|(i, &t)| e.lambda[i][t])
                    .product::<f64>();
            z += w;
            for (i, &t) in x.iter().enumerate() {
                m[i][t] += w;
            }
        }
        m.iter_mut()
            .for_each(|v| v.iter_mut().for_each(|p| *p /= z));
        m
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn example_is_valid_with_full_scopes() {
        let c = example(0.6, 0.4);
        let r = validate_spn(&c);
        assert!(r.is_valid());
        assert_eq!(r.scopes[0], vec![0, 1]);
        assert_eq!(r.scopes[1], vec![0, 1]);
        assert_eq!(r.scopes[2], vec![0, 1]);
        assert!(c.is_tree());
    }

    #[test]
    fn structural_violations() {
        let leaf = |var, state| SpnNode::Leaf { var, state };
        let r = validate_spn_parts(
            &[
                SpnNode::Product {
                    children: vec![1, 2],
                },
                leaf(0, 0),
                leaf(0, 1),
            ],
            0,
            &[2],
        );
        assert_eq!(
            r.issues,
            vec![SpnIssue::NotDecomposable { product: 0, var: 0 }]
        );
        let r = validate_spn_parts(
            &[
                SpnNode::Sum {
                    children: vec![(1, 0.5), (2, 0.5)],
                },
                leaf(0, 0),
                leaf(1, 0),
            ],
            0,
            &[1, 1],
        );
        assert!(r
            .issues
            .contains(&SpnIssue::Incomplete { sum: 0, child: 1 }));
        let r = validate_spn_parts(
            &[
                SpnNode::Sum {
                    children: vec![(1, -1.0)],
                },
                leaf(0, 0),
            ],
            0,
            &[1],
        );
        assert!(matches!(r.issues[0], SpnIssue::NonPositiveWeight { .. }));
        let r = validate_spn_parts(
            &[
                SpnNode::Product { children: vec![1] },
                SpnNode::Product { children: vec![0] },
            ],
            0,
            &[],
        );
        assert!(matches!(r.issues[0], SpnIssue::Cycle { .. }));
    }

    #[test]
    fn unroll_removes_sharing() {
        // r = 0.3·(A·B) + 0.7·(A·C) with leaf A shared.
        let nodes = vec![
            SpnNode::Sum {
                children: vec![(1, 0.3), (2, 0.7)],
            },
            SpnNode::Product {
                children: vec![3, 4],
            },
            SpnNode::Product {
                children: vec![3, 5],
            },
            SpnNode::Leaf { var: 0, state: 0 },
            SpnNode::Leaf { var: 1, state: 0 },
            SpnNode::Leaf { var: 1, state: 1 },
        ];
        let c = SpnCircuit::new(nodes, 0, vec![1, 2]).unwrap();
        assert!(!c.is_tree());
        let t = unroll(&c, UNROLL_BUDGET).unwrap();
        assert!(t.is_tree());
        assert_eq!(t.nodes().len(), 7);
        let e = Evidence {
            lambda: vec![vec![0.7], vec![0.2, 0.9]],
        };
        let a = upward_pass(&c, &e).unwrap().s[c.root()];
        let b = upward_pass(&t, &e).unwrap().s[t.root()];
        assert_eq!(a, b);
        assert!(matches!(
            unroll(&c, 5),
            Err(Error::BudgetExceeded { size: 7, budget: 5 })
        ));
    }
}
