//! A tree circuit as a factor graph over parse activations.
//!
//! Each node `n` gets a binary activation `A_n` (is `n` on the parse tree?),
//! each sum `s` a gate `Y_s` over its children. Selection factors are 0/1:
//! an active sum activates exactly the child its gate names, an active product
//! activates every child, inactive parents keep their children inactive. Gate
//! unaries carry weights renormalized as `w'_sc = w_sc Z(c) / Z(s)` with `Z`
//! the all-ones upward value, so that a free gate under an inactive sum sums
//! to one and every parse tree `T` gets weight `∏_{T} w' ∏_{leaves in T} λ`.

use alloc::vec;
use alloc::vec::Vec;

use super::{upward_pass, Evidence, SpnCircuit, SpnNode};
use crate::error::{Error, Result};
use crate::factor_graph::{Factor, FactorGraph};

#[derive(Debug, Clone)]
pub struct SpnFactorGraph {
    pub graph: FactorGraph,
    /// Factor-graph variable holding `A_n`, per circuit node.
    pub activation: Vec<usize>,
    /// Factor-graph variable holding `Y_s`, per circuit node (sums only).
    pub gate: Vec<Option<usize>>,
    cards: Vec<usize>,
    leaves: Vec<(usize, usize, usize)>,
}

/// Builds the activation/gate factor graph for a tree circuit under evidence `e`.
pub fn spn_to_factor_graph(c: &SpnCircuit, e: &Evidence) -> Result<SpnFactorGraph> {
    if !c.is_tree() {
        return Err(Error::SharedNodes);
    }
    e.check(c)?;
    let z = upward_pass(c, &Evidence::ones(c.cards()))?.s;
    let n = c.nodes().len();
    let mut cards = vec![2usize; n];
    let activation: Vec<usize> = (0..n).collect();
    let mut gate = vec![None; n];
    for (i, node) in c.nodes().iter().enumerate() {
        if let SpnNode::Sum { children } = node {
            gate[i] = Some(cards.len());
            cards.push(children.len());
        }
    }
    let mut factors = Vec::new();
    let mut leaves = Vec::new();
    for (i, node) in c.nodes().iter().enumerate() {
        match node {
            SpnNode::Sum { children } => {
                let y = gate[i].expect("sum has a gate");
                let k = children.len();
                let mut vars = vec![activation[i], y];
                vars.extend(children.iter().map(|&(ch, _)| activation[ch]));
                // Layout: A_s, Y_s, then A_c for each child; last fastest.
                let mut table = vec![0.0; 2 * k * (1 << k)];
                for sel in 0..k {
                    // A_s = 0: every child inactive, gate free.
                    table[sel * (1 << k)] = 1.0;
                    // A_s = 1: only the selected child active.
                    table[(k + sel) * (1 << k) + (1 << (k - 1 - sel))] = 1.0;
                }
                factors.push(Factor { vars, table });
                let w: Vec<f64> = children.iter().map(|&(ch, w)| w * z[ch] / z[i]).collect();
                factors.push(Factor {
                    vars: vec![y],
                    table: w,
                });
            }
            SpnNode::Product { children } => {
                let k = children.len();
                let mut vars = vec![activation[i]];
                vars.extend(children.iter().map(|&ch| activation[ch]));
                let mut table = vec![0.0; 2 << k];
                table[0] = 1.0;
                table[(2 << k) - 1] = 1.0;
                factors.push(Factor { vars, table });
            }
            SpnNode::Leaf { var, state } => {
                let lam = e.lambda[*var][*state];
                let off = if i == c.root() { 0.0 } else { 1.0 };
                factors.push(Factor {
                    vars: vec![activation[i]],
                    table: vec![off, lam],
                });
                leaves.push((i, *var, *state));
            }
        }
    }
    if !matches!(c.nodes()[c.root()], SpnNode::Leaf { .. }) {
        factors.push(Factor {
            vars: vec![activation[c.root()]],
            table: vec![0.0, 1.0],
        });
    }
    let graph = FactorGraph::new_structural(cards, factors)?;
    Ok(SpnFactorGraph {
        graph,
        activation,
        gate,
        cards: c.cards().to_vec(),
        leaves,
    })
}

impl SpnFactorGraph {
    /// `Pr(X_i = t | e) = Σ_{leaves ℓ = (i,t)} Pr(A_ℓ = 1)`.
    pub fn variable_marginals(&self, beliefs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut m: Vec<Vec<f64>> = self.cards.iter().map(|&k| vec![0.0; k]).collect();
        for &(leaf, var, state) in &self.leaves {
            m[var][state] += beliefs[self.activation[leaf]][1];
        }
        m
    }

    /// Belief of the gate `Y_s`, when `s` is a sum.
    pub fn gate_belief<'a>(&self, beliefs: &'a [Vec<f64>], s: usize) -> Option<&'a [f64]> {
        self.gate[s].map(|y| beliefs[y].as_slice())
    }

    /// `π(n) = Pr(A_n = 1)`.
    pub fn visit(&self, beliefs: &[Vec<f64>], n: usize) -> f64 {
        beliefs[self.activation[n]][1]
    }
}
