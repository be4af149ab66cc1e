//! Gate distributions at sums and the dual quantities of the backward pass.

use alloc::vec::Vec;

use super::passes::{AdjointMap, ValueMap};
use super::{SpnCircuit, SpnNode};
use crate::math;

#[derive(Debug, Clone, PartialEq)]
pub struct GateEntry {
    pub node: usize,
    /// `b_s(c) = w_sc S(c) / S(s)`
    pub local: Vec<f64>,
    /// `π(s) = D(s) S(s) / S(e)`
    pub visit: f64,
    /// `p_s^glob(c) = D(s) w_sc S(c) / S(e)`
    pub global: Vec<f64>,
}

impl GateEntry {
    /// `max_c |p_s^glob(c) − π(s) b_s(c)|`.
    pub fn factorization_residual(&self) -> f64 {
        self.global
            .iter()
            .zip(&self.local)
            .map(|(g, b)| math::abs(g - self.visit * b))
            .fold(0.0, f64::max)
    }
}

/// One entry per sum node, by ascending id.
pub fn gate_report(c: &SpnCircuit, values: &ValueMap, adj: &AdjointMap) -> Vec<GateEntry> {
    let s = &values.s;
    let se = s[c.root()];
    c.nodes()
        .iter()
        .enumerate()
        .filter_map(|(n, node)| match node {
            SpnNode::Sum { children } => Some(GateEntry {
                node: n,
                local: children.iter().map(|&(ch, w)| w * s[ch] / s[n]).collect(),
                visit: adj.d[n] * s[n] / se,
                global: children
                    .iter()
                    .map(|&(ch, w)| adj.d[n] * w * s[ch] / se)
                    .collect(),
            }),
            _ => None,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProductEdge {
    pub parent: usize,
    pub child: usize,
    /// `μ_{p→c} = D_{p→c}(c) / S(e)`
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Kkt {
    /// `(s, π(s))` per sum.
    pub visit: Vec<(usize, f64)>,
    pub edges: Vec<ProductEdge>,
    /// `max_s |D(s)/S(e) − π(s)/S(s)|`
    pub sum_residual: f64,
    /// `max_(p,c) |D_{p→c}(c)/S(e) − μ_{p→c}|`
    pub edge_residual: f64,
}

pub fn kkt_multipliers(c: &SpnCircuit, values: &ValueMap, adj: &AdjointMap) -> Kkt {
    let s = &values.s;
    let se = s[c.root()];
    let mut visit = Vec::new();
    let mut edges = Vec::new();
    let mut sum_residual: f64 = 0.0;
    let mut edge_residual: f64 = 0.0;
    for (n, node) in c.nodes().iter().enumerate() {
        match node {
            SpnNode::Sum { .. } => {
                let pi = adj.d[n] * s[n] / se;
                sum_residual = sum_residual.max(math::abs(adj.d[n] / se - pi / s[n]));
                visit.push((n, pi));
            }
            SpnNode::Product { children } => {
                for (k, &ch) in children.iter().enumerate() {
                    let mu = adj.edge[n][k] / se;
                    edge_residual = edge_residual.max(math::abs(adj.edge[n][k] / se - mu));
                    edges.push(ProductEdge {
                        parent: n,
                        child: ch,
                        mu,
                    });
                }
            }
            SpnNode::Leaf { .. } => {}
        }
    }
    Kkt {
        visit,
        edges,
        sum_residual,
        edge_residual,
    }
}
