//! Region tables over node scopes and the consensus/product two-step.
//!
//! Every node `n` contributes one region on `sc(n)`, initialized with
//! `q(x) ∝ S_n(one-hot x) ∏_{i∈sc(n)} λ_{i,x_i}`. By multilinearity that is the
//! sub-network evaluated on evidence clipped to `x`, so the tables are built
//! bottom-up: leaves are scaled indicators, products outer products, sums
//! weighted sums. Tables may carry structural zeros.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::{Evidence, SpnCircuit, SpnNode};
use crate::error::{Error, Result};
use crate::geometry::{consensus_geomean, DistVec};

pub const REGION_BUDGET: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub node: usize,
    /// Sorted variable ids; the table is row-major over them, last fastest.
    pub scope: Vec<usize>,
    pub table: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionFamily {
    /// One region per node, by node id.
    pub regions: Vec<Region>,
    /// Node ids sharing a scope, ordered by scope.
    pub groups: Vec<Vec<usize>>,
    /// Single-variable region marginals per variable.
    pub marginals: Vec<Vec<f64>>,
    /// Marginals of the root region, per variable in its scope.
    pub root_marginals: Vec<Vec<f64>>,
}

fn outcome_size(scope: &[usize], cards: &[usize]) -> Result<usize> {
    let mut size = 1usize;
    for &v in scope {
        size = size.saturating_mul(cards[v]);
    }
    if size > REGION_BUDGET {
        return Err(Error::BudgetExceeded {
            size,
            budget: REGION_BUDGET,
        });
    }
    Ok(size)
}

/// Assignment for a flat index over `scope`.
fn decode(mut idx: usize, scope: &[usize], cards: &[usize]) -> Vec<usize> {
    let mut x = vec![0; scope.len()];
    for k in (0..scope.len()).rev() {
        x[k] = idx % cards[scope[k]];
        idx /= cards[scope[k]];
    }
    x
}

/// Flat index of the restriction of an assignment over `outer` to `inner ⊆ outer`.
fn restrict(x: &[usize], outer: &[usize], inner: &[usize], cards: &[usize]) -> usize {
    inner.iter().fold(0, |acc, v| {
        let k = outer
            .binary_search(v)
            .expect("inner scope is contained in outer");
        acc * cards[*v] + x[k]
    })
}

fn outer_product(
    parts: &[(&[usize], &[f64])],
    scope: &[usize],
    cards: &[usize],
    size: usize,
) -> Vec<f64> {
    (0..size)
        .map(|idx| {
            let x = decode(idx, scope, cards);
            parts
                .iter()
                .map(|(s, t)| t[restrict(&x, scope, s, cards)])
                .product()
        })
        .collect()
}

fn normalized(mut t: Vec<f64>, scope: &[usize]) -> Result<Vec<f64>> {
    let z: f64 = t.iter().sum();
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::EmptySupport(scope.first().copied().unwrap_or(0)));
    }
    t.iter_mut().for_each(|p| *p /= z);
    Ok(t)
}

fn marginal(table: &[f64], scope: &[usize], var: usize, cards: &[usize]) -> Vec<f64> {
    let mut m = vec![0.0; cards[var]];
    let k = scope.binary_search(&var).expect("variable in scope");
    for (idx, p) in table.iter().enumerate() {
        m[decode(idx, scope, cards)[k]] += p;
    }
    m
}

/// Geometric-mean consensus on the common support of a group; zero elsewhere.
fn consensus(tables: &[&[f64]], scope: &[usize]) -> Result<Vec<f64>> {
    let n = tables[0].len();
    let support: Vec<usize> = (0..n)
        .filter(|&i| tables.iter().all(|t| t[i] > 0.0))
        .collect();
    if support.is_empty() {
        return Err(Error::EmptyConsensusSupport {
            scope: scope.to_vec(),
        });
    }
    let restricted = tables
        .iter()
        .map(|t| DistVec::normalize(&support.iter().map(|&i| t[i]).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let g = consensus_geomean(&restricted)?;
    let mut out = vec![0.0; n];
    for (&i, p) in support.iter().zip(g.probs()) {
        out[i] = *p;
    }
    Ok(out)
}

/// Builds the region tables, applies consensus over equal-scope groups, then
/// replaces every product region by the outer product of its children's
/// consensus tables.
pub fn region_two_step(c: &SpnCircuit, e: &Evidence) -> Result<RegionFamily> {
    if !c.is_tree() {
        return Err(Error::SharedNodes);
    }
    e.check(c)?;
    let cards = c.cards();
    let n = c.nodes().len();
    let mut sizes = vec![0; n];
    for i in 0..n {
        sizes[i] = outcome_size(c.scope(i), cards)?;
    }

    let mut raw: Vec<Vec<f64>> = vec![Vec::new(); n];
    for &i in c.order() {
        let scope = c.scope(i);
        raw[i] = match &c.nodes()[i] {
            SpnNode::Leaf { var, state } => {
                let mut t = vec![0.0; cards[*var]];
                t[*state] = e.lambda[*var][*state];
                t
            }
            SpnNode::Sum { children } => {
                let mut t = vec![0.0; sizes[i]];
                for &(ch, w) in children {
                    t.iter_mut().zip(&raw[ch]).for_each(|(a, b)| *a += w * b);
                }
                t
            }
            SpnNode::Product { children } => {
                let parts: Vec<(&[usize], &[f64])> = children
                    .iter()
                    .map(|&ch| (c.scope(ch), raw[ch].as_slice()))
                    .collect();
                outer_product(&parts, scope, cards, sizes[i])
            }
        };
    }
    let init = (0..n)
        .map(|i| normalized(raw[i].clone(), c.scope(i)))
        .collect::<Result<Vec<_>>>()?;

    let mut by_scope: BTreeMap<&[usize], Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        by_scope.entry(c.scope(i)).or_default().push(i);
    }
    let mut agreed = init.clone();
    for (scope, members) in &by_scope {
        if members.len() < 2 {
            continue;
        }
        let tables: Vec<&[f64]> = members.iter().map(|&m| init[m].as_slice()).collect();
        let g = consensus(&tables, scope)?;
        for &m in members {
            agreed[m] = g.clone();
        }
    }

    let mut projected = agreed.clone();
    for (i, node) in c.nodes().iter().enumerate() {
        if let SpnNode::Product { children } = node {
            let parts: Vec<(&[usize], &[f64])> = children
                .iter()
                .map(|&ch| (c.scope(ch), agreed[ch].as_slice()))
                .collect();
            projected[i] = outer_product(&parts, c.scope(i), cards, sizes[i]);
        }
    }

    let mut marginals = vec![Vec::new(); c.n_vars()];
    for (i, t) in projected.iter().enumerate() {
        if let [v] = c.scope(i) {
            marginals[*v] = t.clone();
        }
    }
    let root = c.root();
    let root_marginals = c
        .scope(root)
        .iter()
        .map(|&v| marginal(&projected[root], c.scope(root), v, cards))
        .collect();
    let regions = projected
        .into_iter()
        .enumerate()
        .map(|(i, table)| Region {
            node: i,
            scope: c.scope(i).to_vec(),
            table,
        })
        .collect();
    Ok(RegionFamily {
        regions,
        groups: by_scope.into_values().collect(),
        marginals,
        root_marginals,
    })
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::{e1, enumerate};
    use super::super::{downward_pass, upward_pass, variable_marginals};
    use super::*;
    use crate::math::max_abs_diff;

    #[test]
    fn e1_single_variable_groups_disagree() {
        let (c, e) = e1();
        match region_two_step(&c, &e) {
            Err(Error::EmptyConsensusSupport { scope }) => assert!(!scope.is_empty()),
            other => panic!("expected an empty consensus support, got {other:?}"),
        }
    }

    #[test]
    fn product_only_circuit_matches_marginals() {
        let nodes = vec![
            SpnNode::Product {
                children: vec![1, 2],
            },
            SpnNode::Leaf { var: 0, state: 1 },
            SpnNode::Product {
                children: vec![3, 4],
            },
            SpnNode::Leaf { var: 1, state: 0 },
            SpnNode::Leaf { var: 2, state: 2 },
        ];
        let c = SpnCircuit::new(nodes, 0, vec![2, 2, 3]).unwrap();
        let e = Evidence {
            lambda: vec![vec![0.3, 0.7], vec![0.2, 0.9], vec![1.0, 0.5, 0.4]],
        };
        let fam = region_two_step(&c, &e).unwrap();
        let v = upward_pass(&c, &e).unwrap();
        let m = variable_marginals(&c, &e, &v, &downward_pass(&c, &v)).unwrap();
        for (got, want) in fam.marginals.iter().zip(&m) {
            assert!(max_abs_diff(got, &want.to_dense()) < 1e-12);
        }
        assert_eq!(fam.groups.len(), 5);
        assert_eq!(fam.regions[0].table.len(), 12);
        assert!((fam.regions[0].table.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn root_region_carries_the_posterior() {
        // A sum over two products with identical leaf structure shares every
        // support, so the consensus steps go through.
        let nodes = vec![
            SpnNode::Sum {
                children: vec![(1, 0.3), (2, 0.7)],
            },
            SpnNode::Product {
                children: vec![3, 4],
            },
            SpnNode::Product {
                children: vec![5, 6],
            },
            SpnNode::Leaf { var: 0, state: 0 },
            SpnNode::Leaf { var: 1, state: 1 },
            SpnNode::Leaf { var: 0, state: 0 },
            SpnNode::Leaf { var: 1, state: 1 },
        ];
        let c = SpnCircuit::new(nodes, 0, vec![1, 2]).unwrap();
        let e = Evidence {
            lambda: vec![vec![0.5], vec![0.4, 0.6]],
        };
        let fam = region_two_step(&c, &e).unwrap();
        let want = enumerate(&c, &e);
        for (got, w) in fam.root_marginals.iter().zip(&want) {
            assert!(max_abs_diff(got, w) < 1e-12);
        }
        let full = fam.groups.iter().find(|g| g.contains(&0)).unwrap();
        assert_eq!(full, &vec![0, 1, 2]);
        assert_eq!(fam.regions[1].table, fam.regions[2].table);
    }

    #[test]
    fn budget_is_enforced() {
        let leaves: Vec<SpnNode> = (0..3).map(|v| SpnNode::Leaf { var: v, state: 0 }).collect();
        let mut nodes = vec![SpnNode::Product {
            children: vec![1, 2, 3],
        }];
        nodes.extend(leaves);
        let c = SpnCircuit::new(nodes, 0, vec![20, 20, 20]).unwrap();
        let e = Evidence::ones(&[20, 20, 20]);
        assert!(matches!(
            region_two_step(&c, &e),
            Err(Error::BudgetExceeded { .. })
        ));
    }
}
