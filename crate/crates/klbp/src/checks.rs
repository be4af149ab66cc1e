//! Engine-versus-oracle comparisons shared by the subcommands, `oracle
//! compare` and the acceptance suite.
//!
//! Relative errors are `|a - b| / max(1, |b|)` throughout.

use std::collections::BTreeMap;

use klbp_core::dag::{
    backward_adjoints, central_slope, downward_log_belief, forward_eval, seed_score, CompGraph,
    OutputFactor,
};
use klbp_core::factor_graph::{bp_run_tree, FactorGraph};
use klbp_core::gen::Rng;
use klbp_core::geometry::{
    consensus_geomean, i_project_diagonal, kl, m_project_product, DistVec, Generator, JointShape,
    Metric,
};
use klbp_core::posterior::{
    log_marginal_likelihood, posterior_grad_bp, posterior_grad_enum_with_budget, DiscretePriorModel,
};
use klbp_core::spn::{
    derivative_sums, downward_pass, gate_report, kkt_multipliers, raw_marginals,
    spn_to_factor_graph, upward_pass, Evidence, SpnCircuit, SpnNode,
};
use klbp_core::{Error, Result};

use crate::oracle::{self, ConstraintSpec, Side};

pub const EXACT_TOL: f64 = 1e-12;
pub const ORACLE_TOL: f64 = 1e-10;
pub const FD_TOL: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;
pub const SPREAD_TOL: f64 = 1e-8;
pub const GAUGE_STEP: f64 = 1e-2;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

pub fn max_abs(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| rel_err(*x, *y))
        .fold(0.0, f64::max)
}

/// Budget override from `KLBP_BUDGET`, else `default`.
pub fn budget(default: usize) -> usize {
    std::env::var("KLBP_BUDGET")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

// ---------------------------------------------------------------- circuits

#[derive(Debug, Clone, PartialEq)]
pub struct SpnComparison {
    pub s_e: f64,
    pub marginals: Vec<Vec<f64>>,
    /// Max abs deviation from the enumerated marginals.
    pub oracle_err: f64,
    /// Max over variables of `|Σ_t λ ∂S/∂λ - S(e)| / S(e)`.
    pub euler_rel: f64,
    pub normalization_err: f64,
    /// Every upward value, adjoint, marginal on supported states and edge flow is positive.
    pub positive: bool,
    /// Max abs deviation of `∂ log S / ∂ log λ` by central differences.
    pub fd_err: f64,
}

pub fn compare_spn(c: &SpnCircuit, e: &Evidence, enum_budget: usize) -> Result<SpnComparison> {
    let v = upward_pass(c, e)?;
    let adj = downward_pass(c, &v);
    let s_e = v.s[c.root()];
    let marginals = raw_marginals(c, e, &v, &adj)?;
    let want = oracle::enumerate_spn_marginals(c, e, enum_budget)?;
    let euler_rel = derivative_sums(c, &adj)
        .iter()
        .zip(&e.lambda)
        .map(|(d, l)| (d.iter().zip(l).map(|(a, b)| a * b).sum::<f64>() - s_e).abs() / s_e)
        .fold(0.0, f64::max);
    let normalization_err = marginals
        .iter()
        .map(|m| (m.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let mut positive = v.s.iter().all(|&s| s > 0.0) && adj.d.iter().all(|&d| d > 0.0);
    for (m, l) in marginals.iter().zip(&e.lambda) {
        positive &= m.iter().zip(l).all(|(b, l)| *l == 0.0 || *b > 0.0);
    }
    positive &= adj.edge.iter().flatten().all(|&x| x > 0.0);

    let u: Vec<f64> = e.lambda.iter().flatten().map(|l| l.ln()).collect();
    let cards = c.cards().to_vec();
    let log_s = |u: &[f64]| -> Result<f64> {
        let mut k = 0;
        let lambda = cards
            .iter()
            .map(|&n| {
                let row = u[k..k + n].iter().map(|x| x.exp()).collect();
                k += n;
                row
            })
            .collect();
        Ok(upward_pass(c, &Evidence { lambda })?.s[c.root()].ln())
    };
    let fd_err = if u.iter().all(|x| x.is_finite()) {
        let g = oracle::finite_diff_grad(log_s, &u, FD_STEP)?;
        g.iter()
            .zip(marginals.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    } else {
        // Hard zeros have no log coordinate.
        0.0
    };
    Ok(SpnComparison {
        s_e,
        oracle_err: max_abs(&marginals, &want),
        marginals,
        euler_rel,
        normalization_err,
        positive,
        fd_err,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateComparison {
    /// Max `|p_s^glob - π(s) b_s|`.
    pub factorization_err: f64,
    /// `|π(root) - 1|` when the root is a sum.
    pub root_err: f64,
    /// SPN marginals against activation-graph BP; `None` for shared circuits.
    pub fg_err: Option<f64>,
    /// Activation-graph BP against enumeration; `None` for shared circuits.
    pub fg_oracle_err: Option<f64>,
}

pub fn compare_gates(c: &SpnCircuit, e: &Evidence, enum_budget: usize) -> Result<GateComparison> {
    let v = upward_pass(c, e)?;
    let adj = downward_pass(c, &v);
    let gates = gate_report(c, &v, &adj);
    let factorization_err = gates
        .iter()
        .map(|g| g.factorization_residual())
        .fold(0.0, f64::max);
    let root_err = gates
        .iter()
        .find(|g| g.node == c.root())
        .map_or(0.0, |g| (g.visit - 1.0).abs());
    let (fg_err, fg_oracle_err) = if c.is_tree() {
        let sfg = spn_to_factor_graph(c, e)?;
        let run = bp_run_tree(&sfg.graph)?;
        let fg_m = sfg.variable_marginals(&run.beliefs);
        let spn_m = raw_marginals(c, e, &v, &adj)?;
        let want = oracle::enumerate_spn_marginals(c, e, enum_budget)?;
        (Some(max_abs(&spn_m, &fg_m)), Some(max_abs(&fg_m, &want)))
    } else {
        (None, None)
    };
    Ok(GateComparison {
        factorization_err,
        root_err,
        fg_err,
        fg_oracle_err,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KktComparison {
    pub sum_residual: f64,
    pub edge_residual: f64,
    /// Every `π(s)` lies in `(0, 1]` up to rounding.
    pub visits_in_range: bool,
    pub multipliers_positive: bool,
}

pub fn compare_kkt(c: &SpnCircuit, e: &Evidence) -> Result<KktComparison> {
    let v = upward_pass(c, e)?;
    let adj = downward_pass(c, &v);
    let k = kkt_multipliers(c, &v, &adj);
    Ok(KktComparison {
        sum_residual: k.sum_residual,
        edge_residual: k.edge_residual,
        visits_in_range: k
            .visit
            .iter()
            .all(|&(_, p)| p > 0.0 && p <= 1.0 + EXACT_TOL),
        multipliers_positive: k.edges.iter().all(|m| m.mu > 0.0),
    })
}

/// Sum nodes count, for reporting.
pub fn sum_nodes(c: &SpnCircuit) -> usize {
    c.nodes()
        .iter()
        .filter(|n| matches!(n, SpnNode::Sum { .. }))
        .count()
}

// ---------------------------------------------------------------- factor graphs

pub fn compare_fg_tree(fg: &FactorGraph, enum_budget: usize) -> Result<f64> {
    let run = bp_run_tree(fg)?;
    Ok(max_abs(
        &run.beliefs,
        &oracle::enumerate_fg_marginals(fg, enum_budget)?,
    ))
}

/// Positive definite tridiagonal metric used for the Mahalanobis generator.
pub fn banded_metric(n: usize) -> Result<Metric> {
    let mut rows = vec![0.0; n * n];
    for i in 0..n {
        rows[i * n + i] = 1.0 + 0.01 * (i % 5) as f64;
        if i + 1 < n {
            rows[i * n + i + 1] = 0.05;
            rows[(i + 1) * n + i] = 0.05;
        }
    }
    Metric::new(n, &rows)
}

// ---------------------------------------------------------------- projections

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionComparison {
    pub closed_form: Vec<f64>,
    pub numeric: Vec<f64>,
    pub err: f64,
    pub spread: f64,
    /// Diagonal face only.
    pub pythagorean_err: Option<f64>,
}

/// Closed form for the family against the numeric oracle. The diagonal face
/// and copies use the left (I-) projection, the product family the right
/// (M-) projection.
pub fn compare_projection(
    spec: &ConstraintSpec,
    q: &[f64],
    seed: u64,
) -> Result<ProjectionComparison> {
    let (closed, side, pyth) = match spec {
        ConstraintSpec::DiagonalFace(shape) => {
            let qd = DistVec::new(q.to_vec())?;
            let diag = shape.diagonal_indices();
            let mut p = vec![0.0; q.len()];
            for (&i, x) in diag.iter().zip(i_project_diagonal(&qd, shape)?.probs()) {
                p[i] = *x;
            }
            // Any interior point of the face; here a seeded random one.
            let mut rng = Rng::new(seed ^ 0x9e37_79b9);
            let w: Vec<f64> = diag.iter().map(|_| rng.range(0.1, 1.0)).collect();
            let total: f64 = w.iter().sum();
            let mut r = vec![0.0; q.len()];
            for (&i, wi) in diag.iter().zip(&w) {
                r[i] = wi / total;
            }
            // r and p share the face as support; compare them there.
            let on_face = |x: &[f64]| diag.iter().map(|&i| x[i]).collect::<Vec<_>>();
            let err = (kl(&r, q)? - kl(&on_face(&r), &on_face(&p))? - kl(&p, q)?).abs();
            (p, Side::Left, Some(err))
        }
        ConstraintSpec::ProductFamily(shape) => (
            m_project_product(&DistVec::new(q.to_vec())?, shape)?.into_vec(),
            Side::Right,
            None,
        ),
        ConstraintSpec::EqualCopies(k) => {
            if *k == 0 || !q.len().is_multiple_of(*k) {
                return Err(Error::Invalid(format!(
                    "{} entries do not split into {k} copies",
                    q.len()
                )));
            }
            let tables = q
                .chunks(q.len() / k)
                .map(DistVec::normalize)
                .collect::<Result<Vec<_>>>()?;
            (consensus_geomean(&tables)?.into_vec(), Side::Left, None)
        }
    };
    let num = oracle::numeric_projection(&Generator::NegativeEntropy, spec, q, side, seed)?;
    let err = closed
        .iter()
        .zip(&num.point)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(ProjectionComparison {
        closed_form: closed,
        numeric: num.point,
        err,
        spread: num.spread,
        pythagorean_err: pyth,
    })
}

/// Random strictly positive target of the given shape.
pub fn random_joint(rng: &mut Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.range(0.05, 1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Random projection instance for `family` (0 diagonal, 1 product, 2 copies).
pub fn random_projection(family: usize, seed: u64) -> Result<(ConstraintSpec, Vec<f64>)> {
    let mut rng = Rng::new(seed);
    Ok(match family {
        0 => {
            let k = rng.between(2, 3);
            let m = rng.between(2, 3);
            let shape = JointShape::new(vec![k; m], vec![(0..m).collect()])?;
            let q = random_joint(&mut rng, shape.size());
            (ConstraintSpec::DiagonalFace(shape), q)
        }
        1 => {
            let axes = vec![rng.between(2, 3), rng.between(2, 3)];
            let shape = JointShape::new(axes, vec![vec![0], vec![1]])?;
            let q = random_joint(&mut rng, shape.size());
            (ConstraintSpec::ProductFamily(shape), q)
        }
        _ => {
            let count = rng.between(2, 4);
            let n = rng.between(2, 4);
            let q = (0..count).flat_map(|_| random_joint(&mut rng, n)).collect();
            (ConstraintSpec::EqualCopies(count), q)
        }
    })
}

// ---------------------------------------------------------------- computation graphs

#[derive(Debug, Clone, PartialEq)]
pub struct DagComparison {
    pub z: f64,
    pub seed: f64,
    pub adjoints: Vec<f64>,
    /// Against `seed · ∇z` from the tape accumulator, every node.
    pub tape_rel: f64,
    /// Against `seed · ∂z/∂x` by central differences, input nodes.
    pub fd_rel: f64,
}

pub fn compare_dag(
    g: &CompGraph,
    inputs: &BTreeMap<usize, f64>,
    factor: &OutputFactor,
) -> Result<DagComparison> {
    let trace = forward_eval(g, inputs)?;
    let z = trace.output(g);
    let adj = backward_adjoints(g, &trace, factor)?;
    let seed = seed_score(factor, z);
    let (tz, grad) = oracle::tape_gradient(g, inputs)?;
    let mut tape_rel = rel_err(tz, z);
    for (s, d) in adj.s.iter().zip(&grad) {
        tape_rel = tape_rel.max(rel_err(*s, seed * d));
    }
    let vars: Vec<usize> = inputs.keys().copied().collect();
    let x: Vec<f64> = vars.iter().map(|v| inputs[v]).collect();
    let f = |x: &[f64]| -> Result<f64> {
        let at: BTreeMap<usize, f64> = vars.iter().copied().zip(x.iter().copied()).collect();
        Ok(forward_eval(g, &at)?.output(g))
    };
    let fd = oracle::finite_diff_grad(f, &x, FD_STEP)?;
    let fd_rel = vars
        .iter()
        .zip(&fd)
        .map(|(&v, d)| rel_err(adj.s[v], seed * d))
        .fold(0.0, f64::max);
    Ok(DagComparison {
        z,
        seed,
        adjoints: adj.s,
        tape_rel,
        fd_rel,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaugeComparison {
    /// `(input node, slope without scaling, slope with scaling)`.
    pub slopes: Vec<(usize, f64, f64)>,
    pub max_change: f64,
}

/// Log-belief slopes at each input before and after random positive
/// rescaling of every edge message.
pub fn compare_gauge(
    g: &CompGraph,
    inputs: &BTreeMap<usize, f64>,
    factor: &OutputFactor,
    seed: u64,
) -> Result<GaugeComparison> {
    let trace = forward_eval(g, inputs)?;
    let mut rng = Rng::new(seed);
    // Scales near one and a wide grid keep the rounding of the added
    // constant well below the comparison tolerance.
    let scales: BTreeMap<(usize, usize), f64> = g
        .nodes()
        .iter()
        .enumerate()
        .flat_map(|(to, n)| n.inputs.iter().map(move |&from| (from, to)))
        .map(|e| (e, rng.range(0.5, 2.0)))
        .collect();
    let mut slopes = Vec::new();
    let mut max_change: f64 = 0.0;
    for (&v, &x) in inputs {
        let h = GAUGE_STEP * x.abs().max(1.0);
        let grid = [x - h, x, x + h];
        let base = central_slope(
            &grid,
            &downward_log_belief(g, &trace, factor, v, &grid, &BTreeMap::new())?,
        )?;
        let scaled = central_slope(
            &grid,
            &downward_log_belief(g, &trace, factor, v, &grid, &scales)?,
        )?;
        max_change = max_change.max((base - scaled).abs());
        slopes.push((v, base, scaled));
    }
    Ok(GaugeComparison { slopes, max_change })
}

// ---------------------------------------------------------------- posterior

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorComparison {
    pub log_ml: f64,
    pub grad_enum: Vec<f64>,
    pub grad_bp: Option<Vec<f64>>,
    pub fd_rel: f64,
    pub bp_err: Option<f64>,
}

pub fn compare_posterior(
    model: &DiscretePriorModel,
    theta: &[f64],
    enum_budget: usize,
) -> Result<PosteriorComparison> {
    let log_ml = log_marginal_likelihood(model, theta, enum_budget)?;
    let grad_enum = posterior_grad_enum_with_budget(model, theta, enum_budget)?;
    let fd = oracle::finite_diff_grad(
        |t| log_marginal_likelihood(model, t, enum_budget),
        theta,
        FD_STEP,
    )?;
    let fd_rel = max_rel(&grad_enum, &fd);
    let (grad_bp, bp_err) = match model.likelihood {
        OutputFactor::ExpScale(_) => {
            let bp = posterior_grad_bp(model, theta)?;
            let err = bp
                .iter()
                .zip(&grad_enum)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            (Some(bp), Some(err))
        }
        _ => (None, None),
    };
    Ok(PosteriorComparison {
        log_ml,
        grad_enum,
        grad_bp,
        fd_rel,
        bp_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use klbp_core::dag::{Node, Op};

    #[test]
    fn e1_comparison() {
        let nodes = vec![
            SpnNode::Sum {
                children: vec![(1, 0.6), (2, 0.4)],
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
        ];
        let c = SpnCircuit::new(nodes, 0, vec![2, 2]).unwrap();
        let e = Evidence {
            lambda: vec![vec![1.0, 0.5], vec![1.0, 0.8]],
        };
        let r = compare_spn(&c, &e, 1000).unwrap();
        assert!(r.oracle_err < 1e-15 && r.euler_rel < 1e-15 && r.positive && r.fd_err < 1e-8);
        let g = compare_gates(&c, &e, 1000).unwrap();
        assert!(g.root_err < 1e-15 && g.fg_err.unwrap() < 1e-12);
        let k = compare_kkt(&c, &e).unwrap();
        assert!(k.visits_in_range && k.multipliers_positive);
    }

    #[test]
    fn logistic_unit() {
        let g = CompGraph::new(
            vec![
                Node {
                    op: Op::Input,
                    inputs: vec![],
                },
                Node {
                    op: Op::Input,
                    inputs: vec![],
                },
                Node {
                    op: Op::Mul,
                    inputs: vec![0, 1],
                },
                Node {
                    op: Op::Sigmoid,
                    inputs: vec![2],
                },
            ],
            3,
        )
        .unwrap();
        let at = BTreeMap::from([(0, 0.0), (1, 1.0)]);
        let r = compare_dag(&g, &at, &OutputFactor::ExpScale(2.0)).unwrap();
        assert_eq!((r.adjoints[0], r.adjoints[1]), (0.5, 0.0));
        assert!(r.tape_rel < EXACT_TOL && r.fd_rel < FD_TOL);
        let gauge = compare_gauge(&g, &at, &OutputFactor::ExpScale(2.0), 3).unwrap();
        assert!(gauge.max_change < EXACT_TOL);
    }

    #[test]
    fn projection_families() {
        for family in 0..3 {
            let (spec, q) = random_projection(family, 11).unwrap();
            let r = compare_projection(&spec, &q, 5).unwrap();
            assert!(r.err < FD_TOL && r.spread < SPREAD_TOL, "{family}: {r:?}");
            if let Some(p) = r.pythagorean_err {
                assert!(p < ORACLE_TOL);
            }
        }
    }
}
