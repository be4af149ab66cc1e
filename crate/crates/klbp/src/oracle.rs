//! Brute-force references. Nothing here calls the engine's inference or
//! differentiation code; the circuit oracle uses only the circuit's structure
//! and a plain recursive evaluator.

use std::collections::BTreeMap;

use klbp_core::dag::{CompGraph, Op};
use klbp_core::factor_graph::FactorGraph;
use klbp_core::gen::Rng;
use klbp_core::geometry::{Generator, JointShape};
use klbp_core::spn::{Evidence, SpnCircuit, SpnNode};
use klbp_core::{Error, Result};

pub const ENUM_BUDGET: usize = 1_000_000;
pub const PROJECTION_MAX_DIM: usize = 64;
pub const PROJECTION_STARTS: usize = 8;
pub const PROJECTION_MAX_STEPS: usize = 100_000;
/// Stop once the sup-norm of the gradient in the interior coordinates is below this.
pub const PROJECTION_GRAD_TOL: f64 = 1e-10;

fn assignments(cards: &[usize], budget: usize) -> Result<usize> {
    let total = cards
        .iter()
        .try_fold(1usize, |a, &c| a.checked_mul(c))
        .unwrap_or(usize::MAX);
    if total > budget {
        return Err(Error::BudgetExceeded {
            size: total,
            budget,
        });
    }
    Ok(total)
}

fn decode(mut idx: usize, cards: &[usize], x: &mut [usize]) {
    for v in (0..cards.len()).rev() {
        x[v] = idx % cards[v];
        idx /= cards[v];
    }
}

fn spn_value(c: &SpnCircuit, n: usize, x: &[usize], memo: &mut [Option<f64>]) -> f64 {
    if let Some(v) = memo[n] {
        return v;
    }
    let v = match &c.nodes()[n] {
        SpnNode::Leaf { var, state } => {
            if x[*var] == *state {
                1.0
            } else {
                0.0
            }
        }
        SpnNode::Product { children } => children
            .iter()
            .map(|&ch| spn_value(c, ch, x, memo))
            .product(),
        SpnNode::Sum { children } => children
            .iter()
            .map(|&(ch, w)| w * spn_value(c, ch, x, memo))
            .sum(),
    };
    memo[n] = Some(v);
    v
}

/// `Pr(X_i = t | e)` from the network-polynomial coefficients `c(x)`, each
/// obtained by evaluating the circuit on the one-hot indicator of `x`.
pub fn enumerate_spn_marginals(
    c: &SpnCircuit,
    e: &Evidence,
    budget: usize,
) -> Result<Vec<Vec<f64>>> {
    e.check(c)?;
    let cards = c.cards();
    let total = assignments(cards, budget)?;
    let mut m: Vec<Vec<f64>> = cards.iter().map(|&k| vec![0.0; k]).collect();
    let mut z = 0.0;
    let mut x = vec![0; cards.len()];
    let mut memo = vec![None; c.nodes().len()];
    for idx in 0..total {
        decode(idx, cards, &mut x);
        memo.iter_mut().for_each(|v| *v = None);
        let coef = spn_value(c, c.root(), &x, &mut memo);
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
    if !(z > 0.0) {
        return Err(Error::Underflow(
            "enumerated evidence probability is zero".into(),
        ));
    }
    m.iter_mut().flatten().for_each(|p| *p /= z);
    Ok(m)
}

/// `S(e)` by direct enumeration.
pub fn enumerate_spn_value(c: &SpnCircuit, e: &Evidence, budget: usize) -> Result<f64> {
    let cards = c.cards();
    let total = assignments(cards, budget)?;
    let mut x = vec![0; cards.len()];
    let mut memo = vec![None; c.nodes().len()];
    let mut z = 0.0;
    for idx in 0..total {
        decode(idx, cards, &mut x);
        memo.iter_mut().for_each(|v| *v = None);
        z += spn_value(c, c.root(), &x, &mut memo)
            * x.iter()
                .enumerate()
                .map(|(i, &t)| e.lambda[i][t])
                .product::<f64>();
    }
    Ok(z)
}

/// Normalized product of all factor tables, marginalized per variable.
pub fn enumerate_fg_marginals(fg: &FactorGraph, budget: usize) -> Result<Vec<Vec<f64>>> {
    let cards = fg.cards();
    let total = assignments(cards, budget)?;
    let mut m: Vec<Vec<f64>> = cards.iter().map(|&k| vec![0.0; k]).collect();
    let mut x = vec![0; cards.len()];
    let mut z = 0.0;
    for idx in 0..total {
        decode(idx, cards, &mut x);
        let w: f64 = fg
            .factors()
            .iter()
            .map(|f| f.table[f.vars.iter().fold(0, |acc, &v| acc * cards[v] + x[v])])
            .product();
        z += w;
        for (i, &t) in x.iter().enumerate() {
            m[i][t] += w;
        }
    }
    m.iter_mut().flatten().for_each(|p| *p /= z);
    Ok(m)
}

/// Central differences with step `h·max(1, |x_i|)`.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::Invalid("step must be positive".into()));
    }
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let step = h * x[i].abs().max(1.0);
            p[i] = x[i] + step;
            let up = f(&p)?;
            p[i] = x[i] - step;
            let down = f(&p)?;
            p[i] = x[i];
            Ok((up - down) / (2.0 * step))
        })
        .collect()
}

// ---------------------------------------------------------------- reverse-mode tape

/// Textbook reverse accumulation: record every node as `(value, [(parent,
/// ∂node/∂parent)])` in evaluation order, then sweep the tape backwards.
/// Returns `z` and `∂z/∂v` for every node.
pub fn tape_gradient(g: &CompGraph, inputs: &BTreeMap<usize, f64>) -> Result<(f64, Vec<f64>)> {
    let n = g.nodes().len();
    let mut value: Vec<Option<f64>> = vec![None; n];
    let mut tape: Vec<(usize, Vec<(usize, f64)>)> = Vec::with_capacity(n);
    // Depth-first from the output; nodes land on the tape after their inputs.
    let mut stack = vec![(g.output(), false)];
    let mut all: Vec<usize> = (0..n).collect();
    all.retain(|&i| i != g.output());
    stack.extend(all.into_iter().rev().map(|i| (i, false)));
    stack.reverse();
    while let Some((i, expanded)) = stack.pop() {
        if value[i].is_some() {
            continue;
        }
        let node = &g.nodes()[i];
        if !expanded {
            stack.push((i, true));
            for &j in node.inputs.iter().rev() {
                if value[j].is_none() {
                    stack.push((j, false));
                }
            }
            continue;
        }
        let a: Vec<f64> = node
            .inputs
            .iter()
            .map(|&j| value[j].expect("inputs first"))
            .collect();
        let domain = |r: &str| Error::Domain {
            node: i,
            reason: r.into(),
        };
        let (v, d): (f64, Vec<f64>) = match node.op {
            Op::Input => (*inputs.get(&i).ok_or(Error::MissingInput(i))?, vec![]),
            Op::Constant(c) => (c, vec![]),
            Op::Add => (a[0] + a[1], vec![1.0, 1.0]),
            Op::Sub => (a[0] - a[1], vec![1.0, -1.0]),
            Op::Mul => (a[0] * a[1], vec![a[1], a[0]]),
            Op::Div => {
                if a[1] == 0.0 {
                    return Err(domain("division by zero"));
                }
                (a[0] / a[1], vec![1.0 / a[1], -a[0] / a[1].powi(2)])
            }
            Op::Exp => (a[0].exp(), vec![a[0].exp()]),
            Op::Log => {
                if a[0] <= 0.0 {
                    return Err(domain("log of a nonpositive value"));
                }
                (a[0].ln(), vec![a[0].recip()])
            }
            Op::Sigmoid => {
                let e = (-a[0].abs()).exp();
                let s = if a[0] >= 0.0 {
                    1.0 / (1.0 + e)
                } else {
                    e / (1.0 + e)
                };
                (s, vec![e / (1.0 + e).powi(2)])
            }
            Op::Tanh => (a[0].tanh(), vec![a[0].cosh().powi(-2)]),
            Op::Softplus => {
                let v = a[0].max(0.0) + (-a[0].abs()).exp().ln_1p();
                (v, vec![1.0 / (1.0 + (-a[0]).exp())])
            }
            Op::Pow(c) => (a[0].powf(c), vec![c * a[0].powf(c - 1.0)]),
        };
        if !v.is_finite() {
            return Err(domain("non-finite value"));
        }
        value[i] = Some(v);
        tape.push((i, node.inputs.iter().copied().zip(d).collect()));
    }
    let mut adj = vec![0.0; n];
    adj[g.output()] = 1.0;
    for (i, partials) in tape.iter().rev() {
        let a = adj[*i];
        for &(j, d) in partials {
            adj[j] += a * d;
        }
    }
    Ok((value[g.output()].expect("output evaluated"), adj))
}

// ---------------------------------------------------------------- numeric projection

#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintSpec {
    DiagonalFace(JointShape),
    ProductFamily(JointShape),
    /// The target holds `count` equal-length tables back to back.
    EqualCopies(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// `argmin_{r ∈ C} D(r, q)`
    Left,
    /// `argmin_{r ∈ C} D(q, r)`
    Right,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NumericProjection {
    /// Best minimizer, embedded in the target's space (one table for copies).
    pub point: Vec<f64>,
    pub objective: f64,
    /// Minimizer reached from each start.
    pub starts: Vec<Vec<f64>>,
    /// Largest sup-norm distance between any start's minimizer and `point`.
    pub spread: f64,
    pub steps: usize,
}

/// Interior parametrization: softmax blocks mapped into the ambient space.
struct Problem<'a> {
    generator: &'a Generator,
    side: Side,
    targets: Vec<Vec<f64>>,
    /// Softmax blocks of the parameter vector.
    blocks: Vec<usize>,
    map: Map,
}

enum Map {
    /// Softmax over these ambient indices, zero elsewhere.
    Support { dim: usize, support: Vec<usize> },
    /// Outer product of the block softmaxes over these axis groups.
    Product {
        axes: Vec<usize>,
        groups: Vec<Vec<usize>>,
    },
    /// One softmax table compared against every target.
    Shared,
}

fn softmax(t: &[f64]) -> Vec<f64> {
    let m = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = t.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

impl Problem<'_> {
    fn split<'b>(&self, theta: &'b [f64]) -> Vec<&'b [f64]> {
        let mut out = Vec::new();
        let mut k = 0;
        for &b in &self.blocks {
            out.push(&theta[k..k + b]);
            k += b;
        }
        out
    }

    fn group_strides(axes: &[usize], group: &[usize]) -> Vec<(usize, usize)> {
        group.iter().map(|&a| (a, axes[a])).collect()
    }

    fn block_index(axes: &[usize], group: &[usize], x: usize) -> usize {
        // Decode `x` over all axes, then read the group's axes row-major.
        let mut digits = vec![0; axes.len()];
        let mut r = x;
        for a in (0..axes.len()).rev() {
            digits[a] = r % axes[a];
            r /= axes[a];
        }
        Self::group_strides(axes, group)
            .iter()
            .fold(0, |acc, &(a, c)| acc * c + digits[a])
    }

    /// Ambient point and the per-block softmax tables.
    fn point(&self, theta: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let tables: Vec<Vec<f64>> = self.split(theta).into_iter().map(softmax).collect();
        let r = match &self.map {
            Map::Support { dim, support } => {
                let mut r = vec![0.0; *dim];
                for (&i, p) in support.iter().zip(&tables[0]) {
                    r[i] = *p;
                }
                r
            }
            Map::Product { axes, groups } => {
                let size: usize = axes.iter().product();
                (0..size)
                    .map(|x| {
                        groups
                            .iter()
                            .zip(&tables)
                            .map(|(g, t)| t[Self::block_index(axes, g, x)])
                            .product()
                    })
                    .collect()
            }
            Map::Shared => tables[0].clone(),
        };
        (r, tables)
    }

    fn objective(&self, r: &[f64]) -> Result<f64> {
        self.targets.iter().try_fold(0.0, |acc, q| {
            let d = match self.side {
                Side::Left => self.generator.divergence_raw(r, q)?,
                Side::Right => self.generator.divergence_raw(q, r)?,
            };
            Ok(acc + d)
        })
    }

    /// `∂F/∂r` in the ambient space.
    fn ambient_grad(&self, r: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; r.len()];
        for q in &self.targets {
            match (self.generator, self.side) {
                (Generator::NegativeEntropy, Side::Left) => {
                    for i in 0..r.len() {
                        if r[i] > 0.0 {
                            g[i] += (r[i] / q[i]).ln() + 1.0;
                        }
                    }
                }
                (Generator::NegativeEntropy, Side::Right) => {
                    for i in 0..r.len() {
                        if q[i] > 0.0 {
                            g[i] += 1.0 - q[i] / r[i];
                        } else {
                            g[i] += 1.0;
                        }
                    }
                }
                (Generator::Mahalanobis(m), _) => {
                    let d: Vec<f64> = r.iter().zip(q).map(|(a, b)| a - b).collect();
                    g.iter_mut().zip(m.apply(&d)).for_each(|(a, b)| *a += b);
                }
            }
        }
        g
    }

    fn grad(&self, theta: &[f64]) -> Vec<f64> {
        let (r, tables) = self.point(theta);
        let gr = self.ambient_grad(&r);
        // Gradient with respect to each block's table, then through softmax.
        let table_grads: Vec<Vec<f64>> = match &self.map {
            Map::Support { support, .. } => vec![support.iter().map(|&i| gr[i]).collect()],
            Map::Shared => vec![gr],
            Map::Product { axes, groups } => {
                let mut out: Vec<Vec<f64>> = tables.iter().map(|t| vec![0.0; t.len()]).collect();
                for (x, gx) in gr.iter().enumerate() {
                    let idx: Vec<usize> = groups
                        .iter()
                        .map(|g| Self::block_index(axes, g, x))
                        .collect();
                    for b in 0..groups.len() {
                        let others: f64 = (0..groups.len())
                            .filter(|&c| c != b)
                            .map(|c| tables[c][idx[c]])
                            .product();
                        out[b][idx[b]] += gx * others;
                    }
                }
                out
            }
        };
        let mut g = Vec::with_capacity(theta.len());
        for (t, gt) in tables.iter().zip(&table_grads) {
            let mean: f64 = t.iter().zip(gt).map(|(p, x)| p * x).sum();
            g.extend(t.iter().zip(gt).map(|(p, x)| p * (x - mean)));
        }
        g
    }
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

fn minimize(p: &Problem, mut theta: Vec<f64>) -> Result<(Vec<f64>, f64, usize)> {
    let mut f = p.objective(&p.point(&theta).0)?;
    let mut g = p.grad(&theta);
    let mut step = 1.0;
    for it in 0..PROJECTION_MAX_STEPS {
        let gmax = sup_norm(&g);
        if gmax <= PROJECTION_GRAD_TOL {
            return Ok((theta, f, it));
        }
        let gg: f64 = g.iter().map(|x| x * x).sum();
        step *= 2.0;
        loop {
            let trial: Vec<f64> = theta.iter().zip(&g).map(|(t, d)| t - step * d).collect();
            let ft = p.objective(&p.point(&trial).0)?;
            let gt = p.grad(&trial);
            if ft <= f - 1e-4 * step * gg {
                theta = trial;
                f = ft;
                g = gt;
                break;
            }
            // Near the minimum the objective is flat to rounding. Take the
            // secant step on the directional derivative instead.
            if (f - ft).abs() <= 1e-13 * (1.0 + f.abs()) {
                let d1: f64 = gt.iter().zip(&g).map(|(a, b)| a * b).sum();
                if d1 < gg {
                    let s = step * gg / (gg - d1);
                    let trial: Vec<f64> = theta.iter().zip(&g).map(|(t, d)| t - s * d).collect();
                    let gs = p.grad(&trial);
                    if sup_norm(&gs) < gmax {
                        f = p.objective(&p.point(&trial).0)?;
                        theta = trial;
                        g = gs;
                        step = s;
                        break;
                    }
                }
            }
            step *= 0.5;
            if step < 1e-30 {
                return Err(Error::Invalid("numeric projection stalled".into()));
            }
        }
    }
    Err(Error::Invalid(format!(
        "numeric projection did not converge in {PROJECTION_MAX_STEPS} steps"
    )))
}

/// Minimizes the requested divergence over the constraint set from
/// `PROJECTION_STARTS` seeded random interior starts.
pub fn numeric_projection(
    generator: &Generator,
    spec: &ConstraintSpec,
    q: &[f64],
    side: Side,
    seed: u64,
) -> Result<NumericProjection> {
    if q.len() > PROJECTION_MAX_DIM {
        return Err(Error::BudgetExceeded {
            size: q.len(),
            budget: PROJECTION_MAX_DIM,
        });
    }
    let (targets, blocks, map) = match spec {
        ConstraintSpec::DiagonalFace(shape) => {
            check_len(shape, q)?;
            let support = shape.diagonal_indices();
            (
                vec![q.to_vec()],
                vec![support.len()],
                Map::Support {
                    dim: q.len(),
                    support,
                },
            )
        }
        ConstraintSpec::ProductFamily(shape) => {
            check_len(shape, q)?;
            // One factor per axis, whatever the replica grouping.
            let groups: Vec<Vec<usize>> = (0..shape.axes().len()).map(|a| vec![a]).collect();
            let blocks = shape.axes().to_vec();
            (
                vec![q.to_vec()],
                blocks,
                Map::Product {
                    axes: shape.axes().to_vec(),
                    groups,
                },
            )
        }
        ConstraintSpec::EqualCopies(k) => {
            if *k == 0 || !q.len().is_multiple_of(*k) {
                return Err(Error::Invalid(format!(
                    "{} entries do not split into {k} copies",
                    q.len()
                )));
            }
            let n = q.len() / k;
            let targets = q
                .chunks(n)
                .map(|c| {
                    let s: f64 = c.iter().sum();
                    c.iter().map(|x| x / s).collect()
                })
                .collect();
            (targets, vec![n], Map::Shared)
        }
    };
    let problem = Problem {
        generator,
        side,
        targets,
        blocks,
        map,
    };
    let dim: usize = problem.blocks.iter().sum();
    let mut rng = Rng::new(seed);
    let mut results = Vec::with_capacity(PROJECTION_STARTS);
    let mut steps = 0;
    for _ in 0..PROJECTION_STARTS {
        let start: Vec<f64> = (0..dim).map(|_| rng.range(-2.0, 2.0)).collect();
        let (theta, f, s) = minimize(&problem, start)?;
        steps = steps.max(s);
        results.push((problem.point(&theta).0, f));
    }
    let best = results
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(r, f)| (r.clone(), *f))
        .expect("at least one start");
    let spread = results
        .iter()
        .map(|(r, _)| {
            r.iter()
                .zip(&best.0)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    Ok(NumericProjection {
        point: best.0,
        objective: best.1,
        starts: results.into_iter().map(|(r, _)| r).collect(),
        spread,
        steps,
    })
}

fn check_len(shape: &JointShape, q: &[f64]) -> Result<()> {
    if shape.size() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: shape.size(),
            found: q.len(),
        });
    }
    Ok(())
}
