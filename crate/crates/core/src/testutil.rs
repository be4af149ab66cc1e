//! Shared fixtures for unit tests.

use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;

use crate::factor_graph::{Factor, FactorGraph};

pub fn fac(vars: &[usize], table: &[f64]) -> Factor {
    Factor {
        vars: vars.to_vec(),
        table: table.to_vec(),
    }
}

/// Exact marginals from the full joint.
pub fn brute_marginals(fg: &FactorGraph) -> Vec<Vec<f64>> {
    let cards = fg.cards();
    let total: usize = cards.iter().product();
    let mut margs: Vec<Vec<f64>> = cards.iter().map(|&c| vec![0.0; c]).collect();
    let mut z = 0.0;
    for idx in 0..total {
        let mut x = vec![0; cards.len()];
        let mut r = idx;
        for v in (0..cards.len()).rev() {
            x[v] = r % cards[v];
            r /= cards[v];
        }
        let mut w = 1.0;
        for f in fg.factors() {
            let mut ti = 0;
            for &v in &f.vars {
                ti = ti * cards[v] + x[v];
            }
            w *= f.table[ti];
        }
        z += w;
        for v in 0..cards.len() {
            margs[v][x[v]] += w;
        }
    }
    margs
        .iter_mut()
        .for_each(|m| m.iter_mut().for_each(|p| *p /= z));
    margs
}

/// Random tree: a unary on every variable plus one pairwise factor per tree edge.
pub fn random_tree(max_vars: usize, max_card: usize) -> impl Strategy<Value = FactorGraph> {
    (2usize..=max_vars)
        .prop_flat_map(move |n| {
            (
                proptest::collection::vec(1usize..=max_card, n),
                proptest::collection::vec(any::<proptest::sample::Index>(), n - 1),
                proptest::collection::vec(0.1f64..3.0, 256),
            )
        })
        .prop_map(|(cards, parents, pool)| {
            let mut factors = Vec::new();
            let mut cursor = 0;
            let mut take = |n: usize| {
                let t: Vec<f64> = (0..n).map(|k| pool[(cursor + k) % pool.len()]).collect();
                cursor += n;
                t
            };
            for v in 0..cards.len() {
                factors.push(fac(&[v], &take(cards[v])));
            }
            for (i, p) in parents.iter().enumerate() {
                let child = i + 1;
                let parent = p.index(child);
                factors.push(fac(&[parent, child], &take(cards[parent] * cards[child])));
            }
            FactorGraph::new(cards, factors).unwrap()
        })
}

fn spn_strategy(
    max_vars: usize,
    max_states: usize,
    max_nodes: usize,
    share: bool,
) -> impl Strategy<Value = (crate::spn::SpnCircuit, crate::spn::Evidence)> {
    (1usize..=max_vars, any::<u64>()).prop_map(move |(vars, seed)| {
        let p = crate::gen::SpnParams {
            vars,
            states: max_states,
            max_nodes,
            share,
        };
        crate::gen::random_spn(p, seed).unwrap()
    })
}

/// Random valid circuit, possibly with shared single-variable sub-circuits.
pub fn random_spn(
    max_vars: usize,
    max_states: usize,
    max_nodes: usize,
) -> impl Strategy<Value = (crate::spn::SpnCircuit, crate::spn::Evidence)> {
    spn_strategy(max_vars, max_states, max_nodes, true)
}

pub fn random_spn_tree(
    max_vars: usize,
    max_states: usize,
    max_nodes: usize,
) -> impl Strategy<Value = (crate::spn::SpnCircuit, crate::spn::Evidence)> {
    spn_strategy(max_vars, max_states, max_nodes, false)
}
