//! Scalar computation DAGs over a fixed set of C¹ primitives, with forward
//! evaluation and reverse-mode adjoints read as log-derivatives of downward
//! delta-lift messages.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Input,
    Constant(f64),
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Softplus,
    Pow(f64),
}

/// Names that are recognized but refused because they are not C¹.
pub const NON_SMOOTH: &[&str] = &[
    "relu", "abs", "max", "min", "sign", "step", "floor", "ceil", "round",
];

impl Op {
    pub fn arity(&self) -> usize {
        match self {
            Op::Input | Op::Constant(_) => 0,
            Op::Add | Op::Sub | Op::Mul | Op::Div => 2,
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Constant(_) => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Softplus => "softplus",
            Op::Pow(_) => "pow",
        }
    }

    /// `value` carries the constant or the exponent.
    pub fn parse(name: &str, value: Option<f64>) -> core::result::Result<Op, DagIssueKind> {
        let need = |v: Option<f64>| {
            v.filter(|x| x.is_finite())
                .ok_or(DagIssueKind::MissingValue)
        };
        Ok(match name {
            "input" => Op::Input,
            "constant" | "const" => Op::Constant(need(value)?),
            "add" => Op::Add,
            "sub" => Op::Sub,
            "mul" => Op::Mul,
            "div" => Op::Div,
            "exp" => Op::Exp,
            "log" => Op::Log,
            "sigmoid" => Op::Sigmoid,
            "tanh" => Op::Tanh,
            "softplus" => Op::Softplus,
            "pow" => Op::Pow(need(value)?),
            other if NON_SMOOTH.contains(&other) => {
                return Err(DagIssueKind::NotSmooth(other.to_string()))
            }
            other => return Err(DagIssueKind::UnknownOp(other.to_string())),
        })
    }

    fn has_domain_hazard(&self) -> bool {
        matches!(self, Op::Div | Op::Log)
            || matches!(self, Op::Pow(c) if math::fract(*c) != 0.0 || *c < 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<usize>,
}

/// Unchecked node list with textual op names, as read from a file.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub op: String,
    pub inputs: Vec<usize>,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DagSpec {
    pub nodes: Vec<NodeSpec>,
    pub output: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DagIssueKind {
    UnknownOp(String),
    NotSmooth(String),
    MissingValue,
    Arity { expected: usize, found: usize },
    UnknownInput(usize),
    Cycle,
    BadOutput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DagIssue {
    pub node: usize,
    pub kind: DagIssueKind,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DagReport {
    pub issues: Vec<DagIssue>,
    /// Nodes whose domain (div, log, fractional pow) must be re-checked at evaluation.
    pub hazards: Vec<usize>,
}

impl DagReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }
}

pub fn validate_dag(spec: &DagSpec) -> DagReport {
    let mut report = DagReport::default();
    let n = spec.nodes.len();
    if spec.output >= n {
        report.issues.push(DagIssue {
            node: spec.output,
            kind: DagIssueKind::BadOutput,
        });
    }
    let mut edges_ok = true;
    for (i, node) in spec.nodes.iter().enumerate() {
        match Op::parse(&node.op, node.value) {
            Ok(op) => {
                if op.arity() != node.inputs.len() {
                    report.issues.push(DagIssue {
                        node: i,
                        kind: DagIssueKind::Arity {
                            expected: op.arity(),
                            found: node.inputs.len(),
                        },
                    });
                }
                if op.has_domain_hazard() {
                    report.hazards.push(i);
                }
            }
            Err(kind) => report.issues.push(DagIssue { node: i, kind }),
        }
        for &j in &node.inputs {
            if j >= n {
                report.issues.push(DagIssue {
                    node: i,
                    kind: DagIssueKind::UnknownInput(j),
                });
                edges_ok = false;
            }
        }
    }
    if edges_ok {
        let inputs: Vec<Vec<usize>> = spec.nodes.iter().map(|n| n.inputs.clone()).collect();
        if let Err(stuck) = topo_order(&inputs) {
            for node in stuck {
                report.issues.push(DagIssue {
                    node,
                    kind: DagIssueKind::Cycle,
                });
            }
        }
    }
    report
}

/// Kahn ordering with ties broken by ascending index. On a cycle, returns the
/// nodes that could not be ordered.
fn topo_order(inputs: &[Vec<usize>]) -> core::result::Result<Vec<usize>, Vec<usize>> {
    let n = inputs.len();
    let mut indeg: Vec<usize> = inputs.iter().map(Vec::len).collect();
    let mut children = vec![Vec::new(); n];
    for (i, ins) in inputs.iter().enumerate() {
        for &j in ins {
            children[j].push(i);
        }
    }
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &c in &children[i] {
            indeg[c] -= 1;
            if indeg[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() == n {
        Ok(order)
    } else {
        Err((0..n).filter(|&i| indeg[i] > 0).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompGraph {
    nodes: Vec<Node>,
    output: usize,
    order: Vec<usize>,
    children: Vec<Vec<usize>>,
}

impl CompGraph {
    pub fn new(nodes: Vec<Node>, output: usize) -> Result<Self> {
        let spec = DagSpec {
            nodes: nodes
                .iter()
                .map(|n| NodeSpec {
                    op: n.op.name().to_string(),
                    inputs: n.inputs.clone(),
                    value: match n.op {
                        Op::Constant(v) | Op::Pow(v) => Some(v),
                        _ => None,
                    },
                })
                .collect(),
            output,
        };
        Self::from_spec(&spec)
    }

    pub fn from_spec(spec: &DagSpec) -> Result<Self> {
        let report = validate_dag(spec);
        if let Some(issue) = report.issues.first() {
            return Err(match issue.kind {
                DagIssueKind::Cycle => Error::Cycle,
                _ => Error::Invalid(alloc::format!("node {}: {:?}", issue.node, issue.kind)),
            });
        }
        let nodes: Vec<Node> = spec
            .nodes
            .iter()
            .map(|n| Node {
                op: Op::parse(&n.op, n.value).expect("validated"),
                inputs: n.inputs.clone(),
            })
            .collect();
        let inputs: Vec<Vec<usize>> = nodes.iter().map(|n| n.inputs.clone()).collect();
        let order = topo_order(&inputs).map_err(|_| Error::Cycle)?;
        let mut children = vec![Vec::new(); nodes.len()];
        for (i, n) in nodes.iter().enumerate() {
            for &j in &n.inputs {
                if !children[j].contains(&i) {
                    children[j].push(i);
                }
            }
        }
        Ok(Self {
            nodes,
            output: spec.output,
            order,
            children,
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn output(&self) -> usize {
        self.output
    }

    pub fn topo_order(&self) -> &[usize] {
        &self.order
    }

    pub fn input_nodes(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].op == Op::Input)
            .collect()
    }

    /// `var` together with every node reachable from it.
    pub fn downstream(&self, var: usize) -> Vec<bool> {
        let mut mark = vec![false; self.nodes.len()];
        let mut stack = vec![var];
        mark[var] = true;
        while let Some(i) = stack.pop() {
            for &c in &self.children[i] {
                if !mark[c] {
                    mark[c] = true;
                    stack.push(c);
                }
            }
        }
        mark
    }
}

fn eval_op(node: usize, op: Op, args: &[f64]) -> Result<f64> {
    let domain = |reason: &str| Error::Domain {
        node,
        reason: reason.to_string(),
    };
    let v = match op {
        Op::Input => unreachable!("inputs are assigned, not evaluated"),
        Op::Constant(c) => c,
        Op::Add => args[0] + args[1],
        Op::Sub => args[0] - args[1],
        Op::Mul => args[0] * args[1],
        Op::Div => {
            if args[1] == 0.0 {
                return Err(domain("division by zero"));
            }
            args[0] / args[1]
        }
        Op::Exp => math::exp(args[0]),
        Op::Log => {
            if !(args[0] > 0.0) {
                return Err(domain("log of a nonpositive value"));
            }
            math::ln(args[0])
        }
        Op::Sigmoid => math::sigmoid(args[0]),
        Op::Tanh => math::tanh(args[0]),
        Op::Softplus => math::softplus(args[0]),
        Op::Pow(c) => {
            let x = args[0];
            if x < 0.0 && math::fract(c) != 0.0 {
                return Err(domain("fractional power of a negative value"));
            }
            if x == 0.0 && c < 1.0 {
                return Err(domain("power not differentiable at zero"));
            }
            math::powf(x, c)
        }
    };
    if !v.is_finite() {
        return Err(domain("non-finite value"));
    }
    Ok(v)
}

/// `∂ node / ∂ input_k` at the given argument values.
pub fn local_partials(op: Op, args: &[f64], value: f64) -> Vec<f64> {
    match op {
        Op::Input | Op::Constant(_) => Vec::new(),
        Op::Add => vec![1.0, 1.0],
        Op::Sub => vec![1.0, -1.0],
        Op::Mul => vec![args[1], args[0]],
        Op::Div => vec![1.0 / args[1], -args[0] / (args[1] * args[1])],
        Op::Exp => vec![value],
        Op::Log => vec![1.0 / args[0]],
        Op::Sigmoid => vec![value * (1.0 - value)],
        Op::Tanh => vec![1.0 - value * value],
        Op::Softplus => vec![math::sigmoid(args[0])],
        Op::Pow(c) => vec![c * math::powf(args[0], c - 1.0)],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub values: Vec<f64>,
}

impl ForwardTrace {
    pub fn output(&self, g: &CompGraph) -> f64 {
        self.values[g.output]
    }
}

pub fn forward_eval(g: &CompGraph, inputs: &BTreeMap<usize, f64>) -> Result<ForwardTrace> {
    let mut values = vec![f64::NAN; g.nodes.len()];
    for &i in &g.order {
        let node = &g.nodes[i];
        values[i] = match node.op {
            Op::Input => {
                let v = *inputs.get(&i).ok_or(Error::MissingInput(i))?;
                if !v.is_finite() {
                    return Err(Error::Domain {
                        node: i,
                        reason: "non-finite input".to_string(),
                    });
                }
                v
            }
            op => {
                let args: Vec<f64> = node.inputs.iter().map(|&j| values[j]).collect();
                eval_op(i, op, &args)?
            }
        };
    }
    Ok(ForwardTrace { values })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Loss {
    /// `½ (z − target)²`
    SquaredError { target: f64 },
    /// `log(1 + e^z) − label·z`
    Logistic { label: f64 },
}

impl Loss {
    pub fn value(&self, z: f64) -> f64 {
        match *self {
            Loss::SquaredError { target } => 0.5 * (z - target) * (z - target),
            Loss::Logistic { label } => math::softplus(z) - label * z,
        }
    }

    pub fn derivative(&self, z: f64) -> f64 {
        match *self {
            Loss::SquaredError { target } => z - target,
            Loss::Logistic { label } => math::sigmoid(z) - label,
        }
    }
}

/// Positive output factor `φ` attached to the scalar output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputFactor {
    /// `φ(z) = e^{αz}`
    ExpScale(f64),
    /// `φ(z) = e^{−L(z)/T}`
    NegLossTemp { loss: Loss, temperature: f64 },
}

impl OutputFactor {
    pub fn validate(&self) -> Result<()> {
        match *self {
            OutputFactor::ExpScale(a) if !a.is_finite() => {
                Err(Error::Invalid("non-finite α".to_string()))
            }
            OutputFactor::NegLossTemp { temperature, .. }
                if !(temperature > 0.0 && temperature.is_finite()) =>
            {
                Err(Error::Invalid("temperature must be positive".to_string()))
            }
            _ => Ok(()),
        }
    }

    pub fn log_phi(&self, z: f64) -> f64 {
        match *self {
            OutputFactor::ExpScale(a) => a * z,
            OutputFactor::NegLossTemp { loss, temperature } => -loss.value(z) / temperature,
        }
    }
}

/// `s(z) = φ′(z*)/φ(z*)`.
pub fn seed_score(factor: &OutputFactor, z_star: f64) -> f64 {
    match *factor {
        OutputFactor::ExpScale(a) => a,
        OutputFactor::NegLossTemp { loss, temperature } => -loss.derivative(z_star) / temperature,
    }
}

/// `s(v) = ∂_v log b↓(v)` for every node.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointSet {
    pub s: Vec<f64>,
}

fn check_trace(g: &CompGraph, trace: &ForwardTrace) -> Result<()> {
    if trace.values.len() != g.nodes.len() {
        return Err(Error::TraceMismatch(alloc::format!(
            "{} values for {} nodes",
            trace.values.len(),
            g.nodes.len()
        )));
    }
    for &i in &g.order {
        let node = &g.nodes[i];
        let v = trace.values[i];
        if node.op == Op::Input {
            if !v.is_finite() {
                return Err(Error::TraceMismatch(alloc::format!(
                    "input {i} has no finite value"
                )));
            }
            continue;
        }
        let args: Vec<f64> = node.inputs.iter().map(|&j| trace.values[j]).collect();
        let expect = eval_op(i, node.op, &args)?;
        if expect.to_bits() != v.to_bits() {
            return Err(Error::TraceMismatch(alloc::format!(
                "node {i} does not satisfy its op"
            )));
        }
    }
    Ok(())
}

/// Reverse sweep `s(x) = Σ_{y ∈ Ch(x)} s(y) ∂_x y`, seeded with `s(z)`.
pub fn backward_adjoints(
    g: &CompGraph,
    trace: &ForwardTrace,
    factor: &OutputFactor,
) -> Result<AdjointSet> {
    factor.validate()?;
    check_trace(g, trace)?;
    let mut s = vec![0.0; g.nodes.len()];
    s[g.output] = seed_score(factor, trace.values[g.output]);
    for &i in g.order.iter().rev() {
        let node = &g.nodes[i];
        if s[i] == 0.0 || node.inputs.is_empty() {
            continue;
        }
        let args: Vec<f64> = node.inputs.iter().map(|&j| trace.values[j]).collect();
        let partials = local_partials(node.op, &args, trace.values[i]);
        for (&j, d) in node.inputs.iter().zip(partials) {
            s[j] += s[i] * d;
        }
    }
    Ok(AdjointSet { s })
}

/// Unary maps used to exercise the delta-factor chain rule; binary primitives
/// appear with one operand clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Identity,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Softplus,
    Pow(f64),
    AddConst(f64),
    SubConst(f64),
    SubFrom(f64),
    MulConst(f64),
    DivByConst(f64),
    DivInto(f64),
}

impl Primitive {
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Primitive::Identity => x,
            Primitive::Exp => math::exp(x),
            Primitive::Log => math::ln(x),
            Primitive::Sigmoid => math::sigmoid(x),
            Primitive::Tanh => math::tanh(x),
            Primitive::Softplus => math::softplus(x),
            Primitive::Pow(c) => math::powf(x, c),
            Primitive::AddConst(c) => x + c,
            Primitive::SubConst(c) => x - c,
            Primitive::SubFrom(c) => c - x,
            Primitive::MulConst(c) => x * c,
            Primitive::DivByConst(c) => x / c,
            Primitive::DivInto(c) => c / x,
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            Primitive::Identity | Primitive::AddConst(_) | Primitive::SubConst(_) => 1.0,
            Primitive::SubFrom(_) => -1.0,
            Primitive::Exp => math::exp(x),
            Primitive::Log => 1.0 / x,
            Primitive::Sigmoid => {
                let s = math::sigmoid(x);
                s * (1.0 - s)
            }
            Primitive::Tanh => {
                let t = math::tanh(x);
                1.0 - t * t
            }
            Primitive::Softplus => math::sigmoid(x),
            Primitive::Pow(c) => c * math::powf(x, c - 1.0),
            Primitive::MulConst(c) => c,
            Primitive::DivByConst(c) => 1.0 / c,
            Primitive::DivInto(c) => -c / (x * x),
        }
    }
}

/// Central-difference step used throughout: `h = 1e-5 · max(1, |x|)`.
pub fn fd_step(x: f64) -> f64 {
    1e-5 * f64::max(1.0, math::abs(x))
}

/// Left: central difference of `log m_{g→x}(x) = s_y · ψ(x)` (the exponential
/// representative message pulled back through `ψ`). Right: `s_y ψ′(x*)`.
pub fn delta_chain_check(psi: Primitive, s_y: f64, x_star: f64) -> (f64, f64) {
    let h = fd_step(x_star);
    let log_msg = |x: f64| s_y * psi.apply(x);
    let left = (log_msg(x_star + h) - log_msg(x_star - h)) / (2.0 * h);
    (left, s_y * psi.derivative(x_star))
}

/// `log b↓(var)` on `grid`: the downstream cone of `var` is recomputed with
/// `var` perturbed and everything else clamped to the trace, giving
/// `log φ(z(v, rest*))`, plus `Σ log c_e` over message scalings `c_e` on edges
/// inside the cone. Edges are `(from, to)` node pairs.
pub fn downward_log_belief(
    g: &CompGraph,
    trace: &ForwardTrace,
    factor: &OutputFactor,
    var: usize,
    grid: &[f64],
    edge_scales: &BTreeMap<(usize, usize), f64>,
) -> Result<Vec<f64>> {
    factor.validate()?;
    check_trace(g, trace)?;
    if var >= g.nodes.len() {
        return Err(Error::Invalid(alloc::format!("node {var} does not exist")));
    }
    let cone = g.downstream(var);
    let mut offset = 0.0;
    for (&(from, to), &c) in edge_scales {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Invalid(alloc::format!(
                "edge scale on ({from},{to}) must be positive"
            )));
        }
        let is_edge = to < g.nodes.len() && g.nodes[to].inputs.contains(&from);
        if is_edge && cone[from] && cone[to] {
            offset += math::ln(c);
        }
    }
    let mut values = trace.values.clone();
    grid.iter()
        .map(|&v| {
            values[var] = v;
            for &i in &g.order {
                if i == var || !cone[i] {
                    continue;
                }
                let node = &g.nodes[i];
                let args: Vec<f64> = node.inputs.iter().map(|&j| values[j]).collect();
                values[i] = eval_op(i, node.op, &args)?;
            }
            Ok(factor.log_phi(values[g.output]) + offset)
        })
        .collect()
}

/// Central slope at the middle point of an odd-length grid.
pub fn central_slope(grid: &[f64], values: &[f64]) -> Result<f64> {
    if grid.len() != values.len() || grid.len() < 3 || grid.len().is_multiple_of(2) {
        return Err(Error::Invalid(
            "slope needs an odd grid of at least three points".to_string(),
        ));
    }
    let c = grid.len() / 2;
    Ok((values[c + 1] - values[c - 1]) / (grid[c + 1] - grid[c - 1]))
}
