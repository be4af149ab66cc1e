//! Upward values, downward values and derivative-based marginals.

use alloc::vec;
use alloc::vec::Vec;

use super::{Evidence, SpnCircuit, SpnNode};
use crate::error::{Error, Result};
use crate::geometry::SupportDist;
use crate::math;

/// `S(n)` per node.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueMap {
    pub s: Vec<f64>,
}

/// `D(n)` per node and the per-edge contributions `D_{n→c}(c)`, indexed by
/// parent then child slot.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointMap {
    pub d: Vec<f64>,
    pub edge: Vec<Vec<f64>>,
}

pub fn upward_pass(c: &SpnCircuit, e: &Evidence) -> Result<ValueMap> {
    e.check(c)?;
    let mut s = vec![0.0; c.nodes().len()];
    for &n in c.order() {
        s[n] = match &c.nodes()[n] {
            SpnNode::Leaf { var, state } => e.lambda[*var][*state],
            SpnNode::Product { children } => children.iter().map(|&ch| s[ch]).product(),
            SpnNode::Sum { children } => children.iter().map(|&(ch, w)| w * s[ch]).sum(),
        };
    }
    Ok(ValueMap { s })
}

/// `∏_{j≠k} v_j` for every `k`, without division.
pub(crate) fn products_except(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut out = vec![1.0; n];
    let mut acc = 1.0;
    for k in 0..n {
        out[k] = acc;
        acc *= v[k];
    }
    acc = 1.0;
    for k in (0..n).rev() {
        out[k] *= acc;
        acc *= v[k];
    }
    out
}

pub fn downward_pass(c: &SpnCircuit, values: &ValueMap) -> AdjointMap {
    let s = &values.s;
    let mut d = vec![0.0; c.nodes().len()];
    let mut edge = vec![Vec::new(); c.nodes().len()];
    d[c.root()] = 1.0;
    for &n in c.order().iter().rev() {
        let contrib: Vec<f64> = match &c.nodes()[n] {
            SpnNode::Leaf { .. } => Vec::new(),
            SpnNode::Sum { children } => children.iter().map(|&(_, w)| d[n] * w).collect(),
            SpnNode::Product { children } => {
                let vals: Vec<f64> = children.iter().map(|&ch| s[ch]).collect();
                products_except(&vals)
                    .into_iter()
                    .map(|p| d[n] * p)
                    .collect()
            }
        };
        for (ch, &x) in c.nodes()[n].children().into_iter().zip(&contrib) {
            d[ch] += x;
        }
        edge[n] = contrib;
    }
    AdjointMap { d, edge }
}

/// `∂S/∂λ_{i,t}`: the sum of `D` over every leaf carrying indicator `(i, t)`.
pub fn derivative_sums(c: &SpnCircuit, adj: &AdjointMap) -> Vec<Vec<f64>> {
    let mut acc: Vec<Vec<f64>> = c.cards().iter().map(|&k| vec![0.0; k]).collect();
    for (n, node) in c.nodes().iter().enumerate() {
        if let SpnNode::Leaf { var, state } = *node {
            acc[var][state] += adj.d[n];
        }
    }
    acc
}

/// `λ_{i,t} ∂S/∂λ_{i,t} / S(e)` before any renormalization.
pub fn raw_marginals(
    c: &SpnCircuit,
    e: &Evidence,
    values: &ValueMap,
    adj: &AdjointMap,
) -> Result<Vec<Vec<f64>>> {
    let se = values.s[c.root()];
    if !(se > 0.0) || !se.is_finite() {
        return Err(Error::Underflow(
            "S(e) is not a positive finite number".into(),
        ));
    }
    Ok(derivative_sums(c, adj)
        .into_iter()
        .zip(&e.lambda)
        .map(|(ds, l)| ds.iter().zip(l).map(|(d, l)| l * d / se).collect())
        .collect())
}

/// Posterior marginals `b_i`; zero-evidence states fall outside the support.
pub fn variable_marginals(
    c: &SpnCircuit,
    e: &Evidence,
    values: &ValueMap,
    adj: &AdjointMap,
) -> Result<Vec<SupportDist>> {
    raw_marginals(c, e, values, adj)?
        .iter()
        .enumerate()
        .map(|(i, b)| SupportDist::from_weights(b).map_err(|_| Error::EmptySupport(i)))
        .collect()
}

/// Evaluates many evidence vectors independently.
pub fn marginals_batch(c: &SpnCircuit, evidence: &[Evidence]) -> Result<Vec<Vec<SupportDist>>> {
    evidence
        .iter()
        .map(|e| {
            let v = upward_pass(c, e)?;
            let a = downward_pass(c, &v);
            variable_marginals(c, e, &v, &a)
        })
        .collect()
}

/// `log S(n)`; `-inf` where the value is zero.
pub fn upward_pass_log(c: &SpnCircuit, e: &Evidence) -> Result<Vec<f64>> {
    e.check(c)?;
    let mut s = vec![f64::NEG_INFINITY; c.nodes().len()];
    for &n in c.order() {
        s[n] = match &c.nodes()[n] {
            SpnNode::Leaf { var, state } => math::ln(e.lambda[*var][*state]),
            SpnNode::Product { children } => children.iter().map(|&ch| s[ch]).sum(),
            SpnNode::Sum { children } => {
                let terms: Vec<f64> = children
                    .iter()
                    .map(|&(ch, w)| math::ln(w) + s[ch])
                    .collect();
                math::log_sum_exp(&terms)
            }
        };
    }
    Ok(s)
}

/// `log D(n)` from log upward values.
pub fn downward_pass_log(c: &SpnCircuit, log_s: &[f64]) -> Vec<f64> {
    let mut d = vec![f64::NEG_INFINITY; c.nodes().len()];
    d[c.root()] = 0.0;
    for &n in c.order().iter().rev() {
        match &c.nodes()[n] {
            SpnNode::Leaf { .. } => {}
            SpnNode::Sum { children } => {
                for &(ch, w) in children {
                    d[ch] = math::log_add(d[ch], d[n] + math::ln(w));
                }
            }
            SpnNode::Product { children } => {
                let k = children.len();
                let mut prefix = vec![0.0; k + 1];
                for j in 0..k {
                    prefix[j + 1] = prefix[j] + log_s[children[j]];
                }
                let mut suffix = 0.0;
                for j in (0..k).rev() {
                    let others = prefix[j] + suffix;
                    d[children[j]] = math::log_add(d[children[j]], d[n] + others);
                    suffix += log_s[children[j]];
                }
            }
        }
    }
    d
}

/// Marginals computed entirely in the log domain.
pub fn variable_marginals_log(c: &SpnCircuit, e: &Evidence) -> Result<Vec<Vec<f64>>> {
    let ls = upward_pass_log(c, e)?;
    let ld = downward_pass_log(c, &ls);
    let lse = ls[c.root()];
    if lse == f64::NEG_INFINITY {
        return Err(Error::Underflow("S(e) is zero".into()));
    }
    let mut acc: Vec<Vec<f64>> = c
        .cards()
        .iter()
        .map(|&k| vec![f64::NEG_INFINITY; k])
        .collect();
    for (n, node) in c.nodes().iter().enumerate() {
        if let SpnNode::Leaf { var, state } = *node {
            acc[var][state] = math::log_add(acc[var][state], ld[n]);
        }
    }
    Ok(acc
        .into_iter()
        .zip(&e.lambda)
        .map(|(ld, l)| {
            ld.iter()
                .zip(l)
                .map(|(d, l)| {
                    if *l == 0.0 {
                        0.0
                    } else {
                        math::exp(math::ln(*l) + d - lse)
                    }
                })
                .collect()
        })
        .collect())
}
