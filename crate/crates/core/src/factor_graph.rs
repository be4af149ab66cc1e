//! Discrete factor graphs and normalized sum-product message passing.
//!
//! Variables and factors are addressed by dense indices. Tables are row-major
//! over the factor's variable list, last variable fastest.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub vars: Vec<usize>,
    pub table: Vec<f64>,
}

/// One (factor, slot) incidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub factor: usize,
    pub slot: usize,
    pub var: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorGraph {
    cards: Vec<usize>,
    factors: Vec<Factor>,
    edges: Vec<Edge>,
    factor_edges: Vec<Vec<usize>>,
    var_edges: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Issue {
    UnknownVariable {
        factor: usize,
        var: usize,
    },
    RepeatedVariable {
        factor: usize,
        var: usize,
    },
    EmptyScope {
        factor: usize,
    },
    ZeroCardinality {
        var: usize,
    },
    ArityMismatch {
        factor: usize,
        expected: usize,
        found: usize,
    },
    NonPositive {
        factor: usize,
        index: usize,
        value: f64,
    },
    AllZero {
        factor: usize,
    },
    Disconnected {
        components: usize,
    },
}

impl Issue {
    /// Disconnected graphs are processed per component; everything else is fatal.
    pub fn is_fatal(&self) -> bool {
        !matches!(self, Issue::Disconnected { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        !self.issues.iter().any(Issue::is_fatal)
    }
}

/// Structural and positivity checks. With `allow_zeros`, nonnegative tables
/// are accepted as long as no table is identically zero.
pub fn validate_parts(cards: &[usize], factors: &[Factor], allow_zeros: bool) -> ValidationReport {
    let mut issues = Vec::new();
    for (v, &c) in cards.iter().enumerate() {
        if c == 0 {
            issues.push(Issue::ZeroCardinality { var: v });
        }
    }
    let mut shape_ok = vec![true; factors.len()];
    for (f, fac) in factors.iter().enumerate() {
        if fac.vars.is_empty() {
            issues.push(Issue::EmptyScope { factor: f });
            shape_ok[f] = false;
            continue;
        }
        for (k, &v) in fac.vars.iter().enumerate() {
            if v >= cards.len() {
                issues.push(Issue::UnknownVariable { factor: f, var: v });
                shape_ok[f] = false;
            } else if fac.vars[..k].contains(&v) {
                issues.push(Issue::RepeatedVariable { factor: f, var: v });
                shape_ok[f] = false;
            }
        }
        if shape_ok[f] {
            let expected: usize = fac.vars.iter().map(|&v| cards[v]).product();
            if expected != fac.table.len() {
                issues.push(Issue::ArityMismatch {
                    factor: f,
                    expected,
                    found: fac.table.len(),
                });
            }
        }
        let mut any_positive = false;
        for (index, &value) in fac.table.iter().enumerate() {
            let bad = !value.is_finite() || value < 0.0 || (!allow_zeros && value == 0.0);
            if bad {
                issues.push(Issue::NonPositive {
                    factor: f,
                    index,
                    value,
                });
            }
            any_positive |= value > 0.0;
        }
        if allow_zeros && !any_positive && !fac.table.is_empty() {
            issues.push(Issue::AllZero { factor: f });
        }
    }
    if issues.is_empty() {
        let components = count_components(cards.len(), factors);
        if components > 1 {
            issues.push(Issue::Disconnected { components });
        }
    }
    ValidationReport { issues }
}

fn count_components(n_vars: usize, factors: &[Factor]) -> usize {
    let mut parent: Vec<usize> = (0..n_vars).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for f in factors {
        for w in f.vars.windows(2) {
            let (a, b) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
            if a != b {
                parent[a] = b;
            }
        }
    }
    (0..n_vars).filter(|&v| find(&mut parent, v) == v).count()
}

pub fn validate_fg(fg: &FactorGraph) -> ValidationReport {
    validate_parts(&fg.cards, &fg.factors, false)
}

impl FactorGraph {
    /// Strictly positive tables required.
    pub fn new(cards: Vec<usize>, factors: Vec<Factor>) -> Result<Self> {
        Self::build(cards, factors, false)
    }

    /// Accepts structural zeros in tables (selection factors and the like).
    pub fn new_structural(cards: Vec<usize>, factors: Vec<Factor>) -> Result<Self> {
        Self::build(cards, factors, true)
    }

    fn build(cards: Vec<usize>, factors: Vec<Factor>, allow_zeros: bool) -> Result<Self> {
        let report = validate_parts(&cards, &factors, allow_zeros);
        if let Some(issue) = report.issues.iter().find(|i| i.is_fatal()) {
            return Err(Error::Invalid(format!("{issue:?}")));
        }
        let mut edges = Vec::new();
        let mut factor_edges = Vec::with_capacity(factors.len());
        let mut var_edges = vec![Vec::new(); cards.len()];
        for (f, fac) in factors.iter().enumerate() {
            let mut fe = Vec::with_capacity(fac.vars.len());
            for (slot, &var) in fac.vars.iter().enumerate() {
                var_edges[var].push(edges.len());
                fe.push(edges.len());
                edges.push(Edge {
                    factor: f,
                    slot,
                    var,
                });
            }
            factor_edges.push(fe);
        }
        Ok(Self {
            cards,
            factors,
            edges,
            factor_edges,
            var_edges,
        })
    }

    pub fn cards(&self) -> &[usize] {
        &self.cards
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn n_vars(&self) -> usize {
        self.cards.len()
    }

    /// Edge ids adjacent to a factor, in slot order.
    pub fn factor_edges(&self, f: usize) -> &[usize] {
        &self.factor_edges[f]
    }

    /// Edge ids adjacent to a variable, in factor order.
    pub fn var_edges(&self, v: usize) -> &[usize] {
        &self.var_edges[v]
    }

    /// True when every connected component is acyclic.
    pub fn is_forest(&self) -> bool {
        let nodes = self.cards.len() + self.factors.len();
        let mut parent: Vec<usize> = (0..nodes).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for e in &self.edges {
            let a = find(&mut parent, e.var);
            let b = find(&mut parent, self.cards.len() + e.factor);
            if a == b {
                return false;
            }
            parent[a] = b;
        }
        true
    }
}

/// One message per directed edge, both directions indexed by edge id.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageState {
    pub f2v: Vec<Vec<f64>>,
    pub v2f: Vec<Vec<f64>>,
}

impl MessageState {
    pub fn uniform(fg: &FactorGraph) -> Self {
        let f2v: Vec<Vec<f64>> = fg
            .edges
            .iter()
            .map(|e| vec![1.0 / fg.cards[e.var] as f64; fg.cards[e.var]])
            .collect();
        Self {
            v2f: f2v.clone(),
            f2v,
        }
    }

    /// Max-norm change over every message.
    pub fn residual(&self, other: &MessageState) -> f64 {
        let a = self.f2v.iter().zip(&other.f2v);
        let b = self.v2f.iter().zip(&other.v2f);
        a.chain(b)
            .map(|(x, y)| math::max_abs_diff(x, y))
            .fold(0.0, f64::max)
    }
}

fn normalize_in_place(v: &mut [f64], what: impl FnOnce() -> String) -> Result<()> {
    let s: f64 = v.iter().sum();
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Underflow(what()));
    }
    v.iter_mut().for_each(|x| *x /= s);
    Ok(())
}

fn damp(old: &[f64], new: Vec<f64>, d: f64, edge: usize) -> Result<Vec<f64>> {
    if d == 0.0 {
        return Ok(new);
    }
    let mut out: Vec<f64> = old
        .iter()
        .zip(&new)
        .map(|(o, n)| math::powf(*o, d) * math::powf(*n, 1.0 - d))
        .collect();
    normalize_in_place(&mut out, || format!("damped message on edge {edge}"))?;
    Ok(out)
}

/// `m_{g→i}` for edge `e`, from the current variable-to-factor messages.
pub fn factor_to_var(fg: &FactorGraph, v2f: &[Vec<f64>], e: usize) -> Result<Vec<f64>> {
    let Edge { factor, slot, var } = fg.edges[e];
    let fac = &fg.factors[factor];
    let axes: Vec<usize> = fac.vars.iter().map(|&v| fg.cards[v]).collect();
    let incoming: Vec<&Vec<f64>> = fg.factor_edges[factor].iter().map(|&k| &v2f[k]).collect();
    let mut out = vec![0.0; fg.cards[var]];
    let mut digits = vec![0usize; axes.len()];
    for &g in &fac.table {
        if g != 0.0 {
            let mut w = g;
            for (k, m) in incoming.iter().enumerate() {
                if k != slot {
                    w *= m[digits[k]];
                }
            }
            out[digits[slot]] += w;
        }
        for a in (0..axes.len()).rev() {
            digits[a] += 1;
            if digits[a] < axes[a] {
                break;
            }
            digits[a] = 0;
        }
    }
    normalize_in_place(&mut out, || format!("factor {factor} -> variable {var}"))?;
    Ok(out)
}

/// `m_{i→g}` for edge `e`, from the current factor-to-variable messages.
pub fn var_to_factor(fg: &FactorGraph, f2v: &[Vec<f64>], e: usize) -> Result<Vec<f64>> {
    let var = fg.edges[e].var;
    let mut out = vec![1.0; fg.cards[var]];
    for &k in &fg.var_edges[var] {
        if k != e {
            out.iter_mut().zip(&f2v[k]).for_each(|(o, m)| *o *= m);
        }
    }
    normalize_in_place(&mut out, || {
        format!("variable {var} -> factor {}", fg.edges[e].factor)
    })?;
    Ok(out)
}

/// One synchronous round: all factor-to-variable updates from the old
/// variable-to-factor messages, then all variable-to-factor updates from the
/// new factor-to-variable messages. Damping is geometric.
pub fn bp_sweep(fg: &FactorGraph, msgs: &MessageState, damping: f64) -> Result<MessageState> {
    if !(0.0..1.0).contains(&damping) {
        return Err(Error::Invalid(format!("damping {damping} outside [0, 1)")));
    }
    let mut f2v = Vec::with_capacity(fg.edges.len());
    for e in 0..fg.edges.len() {
        let m = factor_to_var(fg, &msgs.v2f, e)?;
        f2v.push(damp(&msgs.f2v[e], m, damping, e)?);
    }
    let mut v2f = Vec::with_capacity(fg.edges.len());
    for e in 0..fg.edges.len() {
        let m = var_to_factor(fg, &f2v, e)?;
        v2f.push(damp(&msgs.v2f[e], m, damping, e)?);
    }
    Ok(MessageState { f2v, v2f })
}

/// `b_i ∝ ∏_g m_{g→i}`, normalized. Entries may be zero on structural graphs.
pub fn bp_beliefs(fg: &FactorGraph, msgs: &MessageState) -> Result<Vec<Vec<f64>>> {
    (0..fg.n_vars())
        .map(|v| {
            let mut b = vec![1.0; fg.cards[v]];
            for &k in &fg.var_edges[v] {
                b.iter_mut().zip(&msgs.f2v[k]).for_each(|(o, m)| *o *= m);
            }
            normalize_in_place(&mut b, || format!("belief of variable {v}"))?;
            Ok(b)
        })
        .collect()
}

/// `b_g(x) ∝ g(x) ∏_i m_{i→g}(x_i)`, row-major like the table.
pub fn bp_factor_beliefs(fg: &FactorGraph, msgs: &MessageState) -> Result<Vec<Vec<f64>>> {
    fg.factors
        .iter()
        .enumerate()
        .map(|(f, fac)| {
            let axes: Vec<usize> = fac.vars.iter().map(|&v| fg.cards[v]).collect();
            let mut digits = vec![0usize; axes.len()];
            let mut out = Vec::with_capacity(fac.table.len());
            for &g in &fac.table {
                let mut w = g;
                for (k, &e) in fg.factor_edges[f].iter().enumerate() {
                    w *= msgs.v2f[e][digits[k]];
                }
                out.push(w);
                for a in (0..axes.len()).rev() {
                    digits[a] += 1;
                    if digits[a] < axes[a] {
                        break;
                    }
                    digits[a] = 0;
                }
            }
            normalize_in_place(&mut out, || format!("belief of factor {f}"))?;
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TreeRun {
    pub messages: MessageState,
    pub beliefs: Vec<Vec<f64>>,
}

#[derive(Clone, Copy)]
enum Node {
    Var(usize),
    Fac(usize),
}

/// Exact marginals on a forest: per component, rooted at its smallest
/// variable, one leaf-to-root pass followed by one root-to-leaf pass.
pub fn bp_run_tree(fg: &FactorGraph) -> Result<TreeRun> {
    if !fg.is_forest() {
        return Err(Error::NotATree);
    }
    let mut msgs = MessageState::uniform(fg);
    let mut seen_var = vec![false; fg.n_vars()];
    let mut seen_fac = vec![false; fg.factors.len()];
    // (node, edge to parent) in BFS order.
    let mut order: Vec<(Node, Option<usize>)> = Vec::new();
    for root in 0..fg.n_vars() {
        if seen_var[root] {
            continue;
        }
        seen_var[root] = true;
        let start = order.len();
        order.push((Node::Var(root), None));
        let mut queue: VecDeque<usize> = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let (node, up) = order[i];
            match node {
                Node::Var(v) => {
                    for &e in &fg.var_edges[v] {
                        let f = fg.edges[e].factor;
                        if Some(e) != up && !seen_fac[f] {
                            seen_fac[f] = true;
                            queue.push_back(order.len());
                            order.push((Node::Fac(f), Some(e)));
                        }
                    }
                }
                Node::Fac(f) => {
                    for &e in &fg.factor_edges[f] {
                        let v = fg.edges[e].var;
                        if Some(e) != up && !seen_var[v] {
                            seen_var[v] = true;
                            queue.push_back(order.len());
                            order.push((Node::Var(v), Some(e)));
                        }
                    }
                }
            }
        }
    }
    for &(node, up) in order.iter().rev() {
        if let Some(e) = up {
            match node {
                Node::Var(_) => msgs.v2f[e] = var_to_factor(fg, &msgs.f2v, e)?,
                Node::Fac(_) => msgs.f2v[e] = factor_to_var(fg, &msgs.v2f, e)?,
            }
        }
    }
    for &(node, up) in &order {
        match node {
            Node::Var(v) => {
                for &e in &fg.var_edges[v] {
                    if Some(e) != up {
                        msgs.v2f[e] = var_to_factor(fg, &msgs.f2v, e)?;
                    }
                }
            }
            Node::Fac(f) => {
                for &e in &fg.factor_edges[f] {
                    if Some(e) != up {
                        msgs.f2v[e] = factor_to_var(fg, &msgs.v2f, e)?;
                    }
                }
            }
        }
    }
    let beliefs = bp_beliefs(fg, &msgs)?;
    Ok(TreeRun {
        messages: msgs,
        beliefs,
    })
}

pub const LOOPY_TOL: f64 = 1e-10;
pub const LOOPY_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone)]
pub struct LoopyRun {
    pub messages: MessageState,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Synchronous sweeps from uniform messages until the max-norm change drops below `tol`.
pub fn bp_run_loopy(fg: &FactorGraph, damping: f64, tol: f64, max_iter: usize) -> Result<LoopyRun> {
    let mut msgs = MessageState::uniform(fg);
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        let next = bp_sweep(fg, &msgs, damping)?;
        residual = next.residual(&msgs);
        msgs = next;
        if residual < tol {
            return Ok(LoopyRun {
                messages: msgs,
                iterations: it,
                residual,
                converged: true,
            });
        }
    }
    Ok(LoopyRun {
        messages: msgs,
        iterations: max_iter,
        residual,
        converged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{brute_marginals as brute, random_tree};
    use proptest::prelude::*;

    fn fac(vars: &[usize], table: &[f64]) -> Factor {
        Factor {
            vars: vars.to_vec(),
            table: table.to_vec(),
        }
    }

    #[test]
    fn validation_reports() {
        assert!(validate_parts(&[2], &[fac(&[0], &[3.0, 1.0])], false).is_valid());
        let r = validate_parts(&[2], &[fac(&[0], &[3.0, 0.0])], false);
        assert_eq!(
            r.issues,
            vec![Issue::NonPositive {
                factor: 0,
                index: 1,
                value: 0.0
            }]
        );
        let r = validate_parts(&[2, 2], &[fac(&[0, 1], &[1.0; 3])], false);
        assert!(matches!(
            r.issues[0],
            Issue::ArityMismatch {
                expected: 4,
                found: 3,
                ..
            }
        ));
        let r = validate_parts(
            &[2, 2],
            &[fac(&[0], &[1.0; 2]), fac(&[1], &[1.0; 2])],
            false,
        );
        assert!(r.is_valid());
        assert_eq!(r.issues, vec![Issue::Disconnected { components: 2 }]);
    }

    #[test]
    fn unary_message_and_belief() {
        let fg = FactorGraph::new(vec![2], vec![fac(&[0], &[3.0, 1.0])]).unwrap();
        let m = bp_sweep(&fg, &MessageState::uniform(&fg), 0.0).unwrap();
        assert_eq!(m.f2v[0], vec![0.75, 0.25]);
        assert_eq!(bp_beliefs(&fg, &m).unwrap()[0], vec![0.75, 0.25]);
        assert_eq!(bp_run_tree(&fg).unwrap().beliefs[0], vec![0.75, 0.25]);
    }

    #[test]
    fn pairwise_tree_example() {
        let fg = FactorGraph::new(
            vec![2, 2],
            vec![
                fac(&[0], &[1.0, 1.0]),
                fac(&[0, 1], &[2.0, 1.0, 1.0, 2.0]),
                fac(&[1], &[1.0, 1.0]),
            ],
        )
        .unwrap();
        let run = bp_run_tree(&fg).unwrap();
        assert_eq!(run.beliefs[0], vec![0.5, 0.5]);
        assert_eq!(run.beliefs[1], vec![0.5, 0.5]);
    }

    #[test]
    fn uniform_factors_stay_uniform() {
        let fg = FactorGraph::new(
            vec![3, 2, 2],
            vec![
                fac(&[0, 1], &[0.4; 6]),
                fac(&[1, 2], &[2.0; 4]),
                fac(&[2, 0], &[1.0; 6]),
            ],
        )
        .unwrap();
        let mut m = MessageState::uniform(&fg);
        for _ in 0..3 {
            m = bp_sweep(&fg, &m, 0.3).unwrap();
        }
        for b in bp_beliefs(&fg, &m).unwrap() {
            let u = 1.0 / b.len() as f64;
            assert!(b.iter().all(|p| (p - u).abs() < 1e-15));
        }
    }

    #[test]
    fn rejects_cycles_for_tree_schedule() {
        let t = [1.0, 2.0, 3.0, 1.0];
        let fg = FactorGraph::new(
            vec![2, 2, 2],
            vec![fac(&[0, 1], &t), fac(&[1, 2], &t), fac(&[2, 0], &t)],
        )
        .unwrap();
        assert!(matches!(bp_run_tree(&fg), Err(Error::NotATree)));
        let run = bp_run_loopy(&fg, 0.0, LOOPY_TOL, LOOPY_MAX_ITER).unwrap();
        assert!(run.converged);
    }

    #[test]
    fn beliefs_gauge_invariant() {
        let fg = FactorGraph::new(
            vec![2, 3],
            vec![
                fac(&[0, 1], &[1.0, 2.0, 0.5, 3.0, 1.0, 0.2]),
                fac(&[1], &[1.0, 4.0, 2.0]),
            ],
        )
        .unwrap();
        let m = bp_run_tree(&fg).unwrap().messages;
        let mut scaled = m.clone();
        for (k, msg) in scaled.f2v.iter_mut().enumerate() {
            msg.iter_mut().for_each(|x| *x *= 3.7 + k as f64);
        }
        let a = bp_beliefs(&fg, &m).unwrap();
        let b = bp_beliefs(&fg, &scaled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(math::max_abs_diff(x, y) < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn tree_bp_is_exact(fg in random_tree(6, 3)) {
            let run = bp_run_tree(&fg).unwrap();
            for (b, m) in run.beliefs.iter().zip(brute(&fg)) {
                prop_assert!(math::max_abs_diff(b, &m) < 1e-10);
            }
        }
    }
}
