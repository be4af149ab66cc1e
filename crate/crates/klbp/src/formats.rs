//! JSON input formats. Ids may be integers or strings; they are mapped to
//! dense indices in order of appearance (variables in SPN leaves sort by id).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use klbp_core::dag::{DagSpec, Loss, NodeSpec, OutputFactor};
use klbp_core::factor_graph::{validate_parts, Factor, FactorGraph};
use klbp_core::geometry::DistVec;
use klbp_core::posterior::{DiscretePriorModel, ScoreTerm};
use klbp_core::spn::{validate_spn_parts, Evidence, SpnCircuit, SpnNode};

use crate::FormatError;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Id {
    Int(i64),
    Str(String),
}

impl fmt::Display for Id {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Id::Int(i) => write!(f, "{i}"),
            Id::Str(s) => f.write_str(s),
        }
    }
}

impl From<usize> for Id {
    fn from(i: usize) -> Self {
        Id::Int(i as i64)
    }
}

impl Id {
    /// Matches a command-line token against this id.
    pub fn matches(&self, token: &str) -> bool {
        match self {
            Id::Int(i) => token.parse::<i64>().is_ok_and(|t| t == *i),
            Id::Str(s) => s == token,
        }
    }
}

fn index_of(ids: &[Id]) -> Result<BTreeMap<&Id, usize>, FormatError> {
    let mut map = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        if map.insert(id, i).is_some() {
            return Err(FormatError::Schema(format!("duplicate id {id}")));
        }
    }
    Ok(map)
}

fn lookup(map: &BTreeMap<&Id, usize>, id: &Id, what: &str) -> Result<usize, FormatError> {
    map.get(id)
        .copied()
        .ok_or_else(|| FormatError::Schema(format!("unknown {what} id {id}")))
}

// ---------------------------------------------------------------- SPN

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChildJson {
    pub id: Id,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpnNodeJson {
    pub id: Id,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<ChildJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub var: Option<Id>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpnJson {
    pub nodes: Vec<SpnNodeJson>,
    pub root: Id,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceJson {
    pub lambda: BTreeMap<String, Vec<f64>>,
}

/// A circuit with its node and variable labels.
#[derive(Debug, Clone)]
pub struct LoadedSpn {
    pub circuit: SpnCircuit,
    pub node_ids: Vec<Id>,
    pub var_ids: Vec<Id>,
}

impl LoadedSpn {
    pub fn var_label(&self, i: usize) -> String {
        self.var_ids[i].to_string()
    }
}

/// Converts the circuit; cardinalities come from leaf states, widened by the
/// evidence vectors when given. Structural violations come back as
/// `FormatError::Structure` with the report's issue list.
pub fn load_spn(
    json: &SpnJson,
    evidence: Option<&EvidenceJson>,
) -> Result<(LoadedSpn, Option<Evidence>), FormatError> {
    let node_ids: Vec<Id> = json.nodes.iter().map(|n| n.id.clone()).collect();
    let idx = index_of(&node_ids)?;
    let mut var_ids: Vec<Id> = json.nodes.iter().filter_map(|n| n.var.clone()).collect();
    var_ids.sort();
    var_ids.dedup();
    let vidx = index_of(&var_ids)?;
    let mut nodes = Vec::with_capacity(json.nodes.len());
    for n in &json.nodes {
        let node = match n.kind.as_str() {
            "sum" => SpnNode::Sum {
                children: n
                    .children
                    .iter()
                    .map(|c| {
                        let w = c.weight.ok_or_else(|| {
                            FormatError::Schema(format!(
                                "sum {} child {} has no weight",
                                n.id, c.id
                            ))
                        })?;
                        Ok((lookup(&idx, &c.id, "node")?, w))
                    })
                    .collect::<Result<_, FormatError>>()?,
            },
            "product" => SpnNode::Product {
                children: n
                    .children
                    .iter()
                    .map(|c| lookup(&idx, &c.id, "node"))
                    .collect::<Result<_, _>>()?,
            },
            "leaf" => {
                let var = n
                    .var
                    .as_ref()
                    .ok_or_else(|| FormatError::Schema(format!("leaf {} has no var", n.id)))?;
                let state = n
                    .state
                    .ok_or_else(|| FormatError::Schema(format!("leaf {} has no state", n.id)))?;
                SpnNode::Leaf {
                    var: lookup(&vidx, var, "variable")?,
                    state,
                }
            }
            other => {
                return Err(FormatError::Schema(format!(
                    "node {}: unknown kind {other:?}",
                    n.id
                )))
            }
        };
        nodes.push(node);
    }
    let root = lookup(&idx, &json.root, "node")?;
    let mut cards = SpnCircuit::infer_cards(&nodes);
    let lambda = match evidence {
        Some(e) => {
            let mut lambda: Vec<Option<Vec<f64>>> = vec![None; var_ids.len()];
            for (key, values) in &e.lambda {
                let i = var_ids.iter().position(|v| v.matches(key)).ok_or_else(|| {
                    FormatError::Schema(format!("evidence names unknown variable {key:?}"))
                })?;
                cards[i] = cards[i].max(values.len());
                lambda[i] = Some(values.clone());
            }
            let lambda = lambda
                .into_iter()
                .enumerate()
                .map(|(i, l)| {
                    l.ok_or_else(|| {
                        FormatError::Schema(format!("evidence misses variable {}", var_ids[i]))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            for (i, l) in lambda.iter().enumerate() {
                if l.len() != cards[i] {
                    return Err(FormatError::Schema(format!(
                        "variable {} has {} states but {} evidence values",
                        var_ids[i],
                        cards[i],
                        l.len()
                    )));
                }
            }
            Some(Evidence { lambda })
        }
        None => None,
    };
    let report = validate_spn_parts(&nodes, root, &cards);
    if !report.is_valid() {
        let issues = report.issues.iter().map(|i| format!("{i:?}")).collect();
        return Err(FormatError::Structure(issues));
    }
    let circuit = SpnCircuit::new(nodes, root, cards)
        .map_err(|e| FormatError::Structure(vec![e.to_string()]))?;
    Ok((
        LoadedSpn {
            circuit,
            node_ids,
            var_ids,
        },
        lambda,
    ))
}

pub fn spn_to_json(c: &SpnCircuit) -> SpnJson {
    let nodes = c
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, n)| match n {
            SpnNode::Sum { children } => SpnNodeJson {
                id: i.into(),
                kind: "sum".into(),
                children: children
                    .iter()
                    .map(|&(c, w)| ChildJson {
                        id: c.into(),
                        weight: Some(w),
                    })
                    .collect(),
                var: None,
                state: None,
            },
            SpnNode::Product { children } => SpnNodeJson {
                id: i.into(),
                kind: "product".into(),
                children: children
                    .iter()
                    .map(|&c| ChildJson {
                        id: c.into(),
                        weight: None,
                    })
                    .collect(),
                var: None,
                state: None,
            },
            SpnNode::Leaf { var, state } => SpnNodeJson {
                id: i.into(),
                kind: "leaf".into(),
                children: Vec::new(),
                var: Some((*var).into()),
                state: Some(*state),
            },
        })
        .collect();
    SpnJson {
        nodes,
        root: c.root().into(),
    }
}

pub fn evidence_to_json(e: &Evidence) -> EvidenceJson {
    EvidenceJson {
        lambda: e
            .lambda
            .iter()
            .enumerate()
            .map(|(i, l)| (i.to_string(), l.clone()))
            .collect(),
    }
}

// ---------------------------------------------------------------- factor graphs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableJson {
    pub id: Id,
    pub cardinality: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorJson {
    pub id: Id,
    pub vars: Vec<Id>,
    pub table: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorGraphJson {
    pub variables: Vec<VariableJson>,
    pub factors: Vec<FactorJson>,
}

#[derive(Debug, Clone)]
pub struct LoadedFg {
    pub graph: FactorGraph,
    pub var_ids: Vec<Id>,
}

pub fn load_fg(json: &FactorGraphJson) -> Result<LoadedFg, FormatError> {
    let var_ids: Vec<Id> = json.variables.iter().map(|v| v.id.clone()).collect();
    let idx = index_of(&var_ids)?;
    let factor_ids: Vec<Id> = json.factors.iter().map(|f| f.id.clone()).collect();
    index_of(&factor_ids)?;
    let cards: Vec<usize> = json.variables.iter().map(|v| v.cardinality).collect();
    let factors = json
        .factors
        .iter()
        .map(|f| {
            Ok(Factor {
                vars: f
                    .vars
                    .iter()
                    .map(|v| lookup(&idx, v, "variable"))
                    .collect::<Result<_, FormatError>>()?,
                table: f.table.clone(),
            })
        })
        .collect::<Result<Vec<_>, FormatError>>()?;
    let report = validate_parts(&cards, &factors, false);
    if !report.is_valid() {
        return Err(FormatError::Structure(
            report.issues.iter().map(|i| format!("{i:?}")).collect(),
        ));
    }
    let graph = FactorGraph::new(cards, factors)
        .map_err(|e| FormatError::Structure(vec![e.to_string()]))?;
    Ok(LoadedFg { graph, var_ids })
}

pub fn fg_to_json(fg: &FactorGraph) -> FactorGraphJson {
    FactorGraphJson {
        variables: fg
            .cards()
            .iter()
            .enumerate()
            .map(|(i, &c)| VariableJson {
                id: i.into(),
                cardinality: c,
            })
            .collect(),
        factors: fg
            .factors()
            .iter()
            .enumerate()
            .map(|(i, f)| FactorJson {
                id: i.into(),
                vars: f.vars.iter().map(|&v| v.into()).collect(),
                table: f.table.clone(),
            })
            .collect(),
    }
}

// ---------------------------------------------------------------- computation graphs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DagNodeJson {
    pub id: Id,
    pub op: String,
    #[serde(default)]
    pub inputs: Vec<Id>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DagJson {
    pub nodes: Vec<DagNodeJson>,
    pub output: Id,
}

impl DagJson {
    pub fn node_ids(&self) -> Vec<Id> {
        self.nodes.iter().map(|n| n.id.clone()).collect()
    }

    /// Index-based spec for validation and construction.
    pub fn to_spec(&self) -> Result<DagSpec, FormatError> {
        let ids = self.node_ids();
        let idx = index_of(&ids)?;
        let nodes = self
            .nodes
            .iter()
            .map(|n| {
                Ok(NodeSpec {
                    op: n.op.clone(),
                    inputs: n
                        .inputs
                        .iter()
                        .map(|i| lookup(&idx, i, "node"))
                        .collect::<Result<_, FormatError>>()?,
                    value: n.value,
                })
            })
            .collect::<Result<Vec<_>, FormatError>>()?;
        Ok(DagSpec {
            nodes,
            output: lookup(&idx, &self.output, "node")?,
        })
    }

    /// Resolves a command-line token (id) to a node index.
    pub fn resolve(&self, token: &str) -> Result<usize, FormatError> {
        self.nodes
            .iter()
            .position(|n| n.id.matches(token))
            .ok_or_else(|| FormatError::Schema(format!("no node with id {token:?}")))
    }
}

pub fn dag_to_json(g: &klbp_core::dag::CompGraph) -> DagJson {
    DagJson {
        nodes: g
            .nodes()
            .iter()
            .enumerate()
            .map(|(i, n)| DagNodeJson {
                id: i.into(),
                op: n.op.name().into(),
                inputs: n.inputs.iter().map(|&j| j.into()).collect(),
                value: match n.op {
                    klbp_core::dag::Op::Constant(v) | klbp_core::dag::Op::Pow(v) => Some(v),
                    _ => None,
                },
            })
            .collect(),
        output: g.output().into(),
    }
}

pub fn load_dag(json: &DagJson) -> Result<klbp_core::dag::CompGraph, FormatError> {
    let spec = json.to_spec()?;
    let report = klbp_core::dag::validate_dag(&spec);
    if !report.is_valid() {
        let ids = json.node_ids();
        let issues = report
            .issues
            .iter()
            .map(|i| {
                format!(
                    "node {}: {:?}",
                    ids.get(i.node).map_or("?".into(), |x| x.to_string()),
                    i.kind
                )
            })
            .collect();
        return Err(FormatError::Structure(issues));
    }
    klbp_core::dag::CompGraph::from_spec(&spec)
        .map_err(|e| FormatError::Structure(vec![e.to_string()]))
}

// ---------------------------------------------------------------- output factors

/// `exp:α`, `sq:target:T` or `logistic:label:T`.
pub fn parse_factor(s: &str) -> Result<OutputFactor, FormatError> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |t: &str| {
        t.parse::<f64>()
            .map_err(|_| FormatError::Schema(format!("bad number {t:?} in factor {s:?}")))
    };
    let f = match parts.as_slice() {
        ["exp", a] => OutputFactor::ExpScale(num(a)?),
        ["sq", t, temp] => OutputFactor::NegLossTemp {
            loss: Loss::SquaredError { target: num(t)? },
            temperature: num(temp)?,
        },
        ["logistic", l, temp] => OutputFactor::NegLossTemp {
            loss: Loss::Logistic { label: num(l)? },
            temperature: num(temp)?,
        },
        _ => {
            return Err(FormatError::Schema(format!(
                "unknown factor {s:?}; expected exp:α, sq:target:T or logistic:label:T"
            )))
        }
    };
    f.validate()
        .map_err(|e| FormatError::Schema(e.to_string()))?;
    Ok(f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LikelihoodJson {
    ExpScale { alpha: f64 },
    SquaredError { target: f64, temperature: f64 },
    Logistic { label: f64, temperature: f64 },
}

impl LikelihoodJson {
    pub fn to_factor(&self) -> OutputFactor {
        match *self {
            LikelihoodJson::ExpScale { alpha } => OutputFactor::ExpScale(alpha),
            LikelihoodJson::SquaredError {
                target,
                temperature,
            } => OutputFactor::NegLossTemp {
                loss: Loss::SquaredError { target },
                temperature,
            },
            LikelihoodJson::Logistic { label, temperature } => OutputFactor::NegLossTemp {
                loss: Loss::Logistic { label },
                temperature,
            },
        }
    }

    pub fn from_factor(f: &OutputFactor) -> Self {
        match *f {
            OutputFactor::ExpScale(alpha) => LikelihoodJson::ExpScale { alpha },
            OutputFactor::NegLossTemp {
                loss: Loss::SquaredError { target },
                temperature,
            } => LikelihoodJson::SquaredError {
                target,
                temperature,
            },
            OutputFactor::NegLossTemp {
                loss: Loss::Logistic { label },
                temperature,
            } => LikelihoodJson::Logistic { label, temperature },
        }
    }
}

// ---------------------------------------------------------------- grid models

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaWire {
    pub index: usize,
    pub node: Id,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermJson {
    pub graph: DagJson,
    pub x: Id,
    pub theta: Vec<ThetaWire>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelJson {
    pub grids: Vec<Vec<f64>>,
    pub priors: Vec<Vec<f64>>,
    pub theta: Vec<f64>,
    pub terms: Vec<TermJson>,
    pub likelihood: LikelihoodJson,
}

pub fn load_model(json: &ModelJson) -> Result<DiscretePriorModel, FormatError> {
    let priors = json
        .priors
        .iter()
        .map(|p| DistVec::new(p.clone()).map_err(|e| FormatError::Schema(format!("prior: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let terms = json
        .terms
        .iter()
        .map(|t| {
            let graph = load_dag(&t.graph)?;
            let x_node = t.graph.resolve(&t.x.to_string())?;
            let theta = t
                .theta
                .iter()
                .map(|w| Ok((w.index, t.graph.resolve(&w.node.to_string())?)))
                .collect::<Result<Vec<_>, FormatError>>()?;
            Ok(ScoreTerm {
                graph,
                x_node,
                theta,
            })
        })
        .collect::<Result<Vec<_>, FormatError>>()?;
    DiscretePriorModel::new(
        json.grids.clone(),
        priors,
        json.theta.clone(),
        terms,
        json.likelihood.to_factor(),
    )
    .map_err(|e| FormatError::Structure(vec![e.to_string()]))
}

pub fn model_to_json(m: &DiscretePriorModel) -> ModelJson {
    ModelJson {
        grids: m.grids.clone(),
        priors: m.priors.iter().map(|p| p.probs().to_vec()).collect(),
        theta: m.theta.clone(),
        terms: m
            .terms
            .iter()
            .map(|t| TermJson {
                graph: dag_to_json(&t.graph),
                x: t.x_node.into(),
                theta: t
                    .theta
                    .iter()
                    .map(|&(k, n)| ThetaWire {
                        index: k,
                        node: n.into(),
                    })
                    .collect(),
            })
            .collect(),
        likelihood: LikelihoodJson::from_factor(&m.likelihood),
    }
}

// ---------------------------------------------------------------- projection targets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyJson {
    Diagonal,
    Product,
    Copies,
}

/// A target vector with its constraint family. `axes`/`groups` describe the
/// joint for the diagonal and product families; `count` the number of equal
/// copies (the vector then holds them back to back).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionJson {
    pub q: Vec<f64>,
    pub family: FamilyJson,
    #[serde(default)]
    pub axes: Vec<usize>,
    #[serde(default)]
    pub groups: Vec<Vec<usize>>,
    #[serde(default)]
    pub count: Option<usize>,
}
