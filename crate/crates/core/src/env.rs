//! The acquisition MDP: pruned observation trees, legal actions, the
//! transition function, rewards and recursive observation masks.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Map, Value as Json};
use thiserror::Error;

use crate::dataset::{value_to_json, ObjectInstance, Sample, Value};
use crate::schema::{FeaturePath, FeatureType, ObjectSchema, PathError, Schema};

/// Hard cap on episode length; never reached since every acquisition removes
/// one unobserved node from a finite tree.
pub const MAX_EPISODE_STEPS: usize = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("episode already finished")]
    Done,
    #[error("node `{0}` is already observed")]
    AlreadyObserved(String),
    #[error("`{0}` does not address a node of the observation")]
    NoSuchNode(String),
    #[error(transparent)]
    Path(#[from] PathError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObsNode {
    Unobserved,
    /// An observed non-set feature with its true value.
    Observed(Value),
    /// An observed set: one child skeleton per object of the full sample.
    Expanded(Vec<ObsObject>),
}

impl ObsNode {
    pub fn is_observed(&self) -> bool {
        !matches!(self, ObsNode::Unobserved)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObsObject {
    pub nodes: Vec<ObsNode>,
}

impl ObsObject {
    fn unobserved(schema: &ObjectSchema) -> Self {
        ObsObject { nodes: vec![ObsNode::Unobserved; schema.features.len()] }
    }

    /// Unweighted mean of the feature masks; an object without features counts as fully observed.
    pub fn mask(&self) -> f64 {
        if self.nodes.is_empty() {
            return 1.0;
        }
        self.nodes.iter().map(compute_mask).sum::<f64>() / self.nodes.len() as f64
    }
}

/// Fraction of a node's branch that is observed: 1/0 for features and
/// unobserved sets, the mean over child objects for expanded sets, and 1 for
/// an expanded set without children.
pub fn compute_mask(node: &ObsNode) -> f64 {
    match node {
        ObsNode::Unobserved => 0.0,
        ObsNode::Observed(_) => 1.0,
        ObsNode::Expanded(children) if children.is_empty() => 1.0,
        ObsNode::Expanded(children) => children.iter().map(ObsObject::mask).sum::<f64>() / children.len() as f64,
    }
}

/// A pruned copy of a sample. The underlying sample is kept for the
/// transition function only; policies see `root`.
#[derive(Debug, Clone)]
pub struct Observation {
    pub root: ObsObject,
    sample: Arc<Sample>,
}

impl PartialEq for Observation {
    fn eq(&self, other: &Self) -> bool {
        self.root == other.root && self.sample == other.sample
    }
}

impl Observation {
    /// Builds an observation from an explicit tree; `root` must mirror `sample`.
    pub fn from_parts(root: ObsObject, sample: Arc<Sample>) -> Observation {
        Observation { root, sample }
    }

    pub fn sample(&self) -> &Arc<Sample> {
        &self.sample
    }

    pub fn fully_observed(sample: Arc<Sample>, schema: &Schema) -> Observation {
        fn go(inst: &ObjectInstance, schema: &ObjectSchema) -> ObsObject {
            let nodes = inst
                .values
                .iter()
                .zip(&schema.features)
                .map(|(v, f)| match (v, &f.ftype) {
                    (Value::Set(objs), FeatureType::Set(child)) => {
                        ObsNode::Expanded(objs.iter().map(|o| go(o, child)).collect())
                    }
                    _ => ObsNode::Observed(v.clone()),
                })
                .collect();
            ObsObject { nodes }
        }
        Observation { root: go(&sample.root, &schema.root), sample }
    }

    /// Number of observed nodes with positive cost, over the whole tree.
    pub fn observed_costly(&self, schema: &Schema) -> usize {
        fn go(obj: &ObsObject, schema: &ObjectSchema) -> usize {
            obj.nodes
                .iter()
                .zip(&schema.features)
                .map(|(n, f)| {
                    let own = usize::from(n.is_observed() && f.cost > 0.0);
                    match (n, &f.ftype) {
                        (ObsNode::Expanded(ch), FeatureType::Set(cs)) => own + ch.iter().map(|c| go(c, cs)).sum::<usize>(),
                        _ => own,
                    }
                })
                .sum()
        }
        go(&self.root, &schema.root)
    }

    /// Total count of observed nodes, any cost.
    pub fn observed_nodes(&self) -> usize {
        fn go(obj: &ObsObject) -> usize {
            obj.nodes
                .iter()
                .map(|n| match n {
                    ObsNode::Unobserved => 0,
                    ObsNode::Observed(_) => 1,
                    ObsNode::Expanded(ch) => 1 + ch.iter().map(go).sum::<usize>(),
                })
                .sum()
        }
        go(&self.root)
    }

    /// True when every node observed here is observed in `other` too.
    pub fn is_subset_of(&self, other: &Observation) -> bool {
        fn go(a: &ObsObject, b: &ObsObject) -> bool {
            a.nodes.iter().zip(&b.nodes).all(|(x, y)| match (x, y) {
                (ObsNode::Unobserved, _) => true,
                (ObsNode::Observed(u), ObsNode::Observed(v)) => u == v,
                (ObsNode::Expanded(c), ObsNode::Expanded(d)) => c.len() == d.len() && c.iter().zip(d).all(|(p, q)| go(p, q)),
                _ => false,
            })
        }
        go(&self.root, &other.root)
    }

    pub fn to_json(&self, schema: &Schema) -> Json {
        obs_object_json(&self.root, &schema.root)
    }
}

fn obs_object_json(obj: &ObsObject, schema: &ObjectSchema) -> Json {
    let mut map = Map::new();
    for (n, f) in obj.nodes.iter().zip(&schema.features) {
        let entry = match (n, &f.ftype) {
            (ObsNode::Unobserved, _) => json!({"status": "unobserved", "cost": f.cost}),
            (ObsNode::Observed(v), t) => json!({"status": "observed", "cost": f.cost, "value": value_to_json(t, v)}),
            (ObsNode::Expanded(ch), FeatureType::Set(cs)) => json!({
                "status": "observed",
                "cost": f.cost,
                "mask": compute_mask(n),
                "items": ch.iter().map(|c| obs_object_json(c, cs)).collect::<Vec<_>>(),
            }),
            (ObsNode::Expanded(_), _) => Json::Null,
        };
        map.insert(f.name.clone(), entry);
    }
    Json::Object(map)
}

/// Total node count of a full sample tree, counting only positive-cost nodes.
pub fn costly_nodes(sample: &Sample, schema: &Schema) -> usize {
    fn go(inst: &ObjectInstance, schema: &ObjectSchema) -> usize {
        inst.values
            .iter()
            .zip(&schema.features)
            .map(|(v, f)| {
                let own = usize::from(f.cost > 0.0);
                match (v, &f.ftype) {
                    (Value::Set(objs), FeatureType::Set(cs)) => own + objs.iter().map(|o| go(o, cs)).sum::<usize>(),
                    _ => own,
                }
            })
            .sum()
    }
    go(&sample.root, &schema.root)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Action {
    Terminal,
    Acquire(FeaturePath),
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Terminal => f.write_str("terminal"),
            Action::Acquire(p) => write!(f, "{p}"),
        }
    }
}

impl std::str::FromStr for Action {
    type Err = PathError;
    fn from_str(s: &str) -> Result<Self, PathError> {
        if s == "terminal" {
            Ok(Action::Terminal)
        } else {
            FeaturePath::parse(s).map(Action::Acquire)
        }
    }
}

impl Serialize for Action {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Reveals zero-cost nodes of `obj`, recursing into zero-cost sets.
fn auto_reveal(obj: &mut ObsObject, inst: &ObjectInstance, schema: &ObjectSchema) {
    for ((node, value), spec) in obj.nodes.iter_mut().zip(&inst.values).zip(&schema.features) {
        if spec.cost == 0.0 && !node.is_observed() {
            *node = reveal(value, &spec.ftype);
        }
    }
}

fn reveal(value: &Value, ftype: &FeatureType) -> ObsNode {
    match (value, ftype) {
        (Value::Set(objs), FeatureType::Set(child)) => ObsNode::Expanded(
            objs.iter()
                .map(|o| {
                    let mut skel = ObsObject::unobserved(child);
                    auto_reveal(&mut skel, o, child);
                    skel
                })
                .collect(),
        ),
        _ => ObsNode::Observed(value.clone()),
    }
}

/// The step-0 observation: every root feature unobserved except zero-cost
/// nodes, which are revealed (recursively for sets).
pub fn initial_observation(sample: Arc<Sample>, schema: &Schema) -> Observation {
    let mut root = ObsObject::unobserved(&schema.root);
    auto_reveal(&mut root, &sample.root, &schema.root);
    Observation { root, sample }
}

/// Terminal first, then one Acquire per unobserved node in depth-first
/// order: schema feature order, descending into expanded sets child by child.
pub fn enumerate_actions(obs: &Observation, schema: &Schema) -> Vec<Action> {
    fn go(obj: &ObsObject, schema: &ObjectSchema, prefix: &FeaturePath, out: &mut Vec<Action>) {
        for (node, spec) in obj.nodes.iter().zip(&schema.features) {
            match (node, &spec.ftype) {
                (ObsNode::Unobserved, _) => out.push(Action::Acquire(prefix.clone().then(&spec.name, None))),
                (ObsNode::Expanded(children), FeatureType::Set(cs)) => {
                    for (i, c) in children.iter().enumerate() {
                        go(c, cs, &prefix.clone().then(&spec.name, Some(i)), out);
                    }
                }
                _ => {}
            }
        }
    }
    let mut out = vec![Action::Terminal];
    go(&obs.root, &schema.root, &FeaturePath::new(), &mut out);
    out
}

/// True iff no unobserved node remains, so Terminal is the only legal action.
pub fn forced_terminal(obs: &Observation) -> bool {
    fn any_unobserved(obj: &ObsObject) -> bool {
        obj.nodes.iter().any(|n| match n {
            ObsNode::Unobserved => true,
            ObsNode::Observed(_) => false,
            ObsNode::Expanded(ch) => ch.iter().any(any_unobserved),
        })
    }
    !any_unobserved(&obs.root)
}

/// Resolves a path to (object, feature index, value in the full sample, feature spec) for mutation.
fn locate<'o, 's>(
    root: &'o mut ObsObject,
    sample: &'s ObjectInstance,
    schema: &'s ObjectSchema,
    path: &FeaturePath,
) -> Result<(&'o mut ObsNode, &'s Value, &'s crate::schema::FeatureSpec), EnvError> {
    let (last, init) = path.steps.split_last().ok_or(PathError::Empty)?;
    let mut obj = root;
    let mut inst = sample;
    let mut sch = schema;
    for step in init {
        let idx = sch.index_of(&step.name).ok_or_else(|| PathError::UnknownFeature(step.name.clone()))?;
        let spec = &sch.features[idx];
        let FeatureType::Set(child_schema) = &spec.ftype else {
            return Err(PathError::NotASet(step.name.clone()).into());
        };
        let i = step.index.ok_or_else(|| EnvError::NoSuchNode(path.to_string()))?;
        match (&mut obj.nodes[idx], &inst.values[idx]) {
            (ObsNode::Expanded(ch), Value::Set(objs)) if i < ch.len() => {
                obj = &mut ch[i];
                inst = &objs[i];
                sch = child_schema;
            }
            _ => return Err(EnvError::NoSuchNode(path.to_string())),
        }
    }
    if last.index.is_some() {
        return Err(EnvError::NoSuchNode(path.to_string()));
    }
    let idx = sch.index_of(&last.name).ok_or_else(|| PathError::UnknownFeature(last.name.clone()))?;
    Ok((&mut obj.nodes[idx], &inst.values[idx], &sch.features[idx]))
}

impl Observation {
    /// Reveals the node at `path` with its true value, applying zero-cost
    /// auto-reveal inside newly expanded sets. Returns the node's cost.
    pub fn acquire(&mut self, path: &FeaturePath, schema: &Schema) -> Result<f64, EnvError> {
        let sample = self.sample.clone();
        let (node, value, spec) = locate(&mut self.root, &sample.root, &schema.root, path)?;
        if node.is_observed() {
            return Err(EnvError::AlreadyObserved(path.to_string()));
        }
        *node = reveal(value, &spec.ftype);
        Ok(spec.cost)
    }

    pub fn node(&self, path: &FeaturePath, schema: &Schema) -> Result<&ObsNode, EnvError> {
        let (last, init) = path.steps.split_last().ok_or(PathError::Empty)?;
        let mut obj = &self.root;
        let mut sch = &schema.root;
        for step in init {
            let idx = sch.index_of(&step.name).ok_or_else(|| PathError::UnknownFeature(step.name.clone()))?;
            let FeatureType::Set(cs) = &sch.features[idx].ftype else {
                return Err(PathError::NotASet(step.name.clone()).into());
            };
            match (&obj.nodes[idx], step.index) {
                (ObsNode::Expanded(ch), Some(i)) if i < ch.len() => {
                    obj = &ch[i];
                    sch = cs;
                }
                _ => return Err(EnvError::NoSuchNode(path.to_string())),
            }
        }
        let idx = sch.index_of(&last.name).ok_or_else(|| PathError::UnknownFeature(last.name.clone()))?;
        Ok(&obj.nodes[idx])
    }
}

/// One episode: the observation plus cost accounting.
#[derive(Debug, Clone)]
pub struct EpisodeState {
    pub observation: Observation,
    pub accumulated_cost: f64,
    pub done: bool,
    pub label: usize,
    pub steps: usize,
}

impl EpisodeState {
    pub fn new(sample: Arc<Sample>, schema: &Schema) -> EpisodeState {
        let label = sample.label;
        EpisodeState { observation: initial_observation(sample, schema), accumulated_cost: 0.0, done: false, label, steps: 0 }
    }

    /// Applies `action` in place and returns the cost paid (0 for Terminal).
    pub fn transition(&mut self, action: &Action, schema: &Schema) -> Result<f64, EnvError> {
        if self.done {
            return Err(EnvError::Done);
        }
        let cost = match action {
            Action::Terminal => {
                self.done = true;
                0.0
            }
            Action::Acquire(path) => {
                let cost = self.observation.acquire(path, schema)?;
                self.accumulated_cost += cost;
                cost
            }
        };
        self.steps += 1;
        Ok(cost)
    }

    pub fn forced_terminal(&self) -> bool {
        forced_terminal(&self.observation) || self.steps + 1 >= MAX_EPISODE_STEPS
    }
}

/// Functional form of [`EpisodeState::transition`].
pub fn transition(state: &EpisodeState, action: &Action, schema: &Schema) -> Result<EpisodeState, EnvError> {
    let mut next = state.clone();
    next.transition(action, schema)?;
    Ok(next)
}

/// Binary classification loss on Terminal, `-lambda * cost` on acquisition.
pub fn reward(state: &EpisodeState, action: &Action, prediction: usize, lambda: f64, schema: &Schema) -> Result<f64, EnvError> {
    match action {
        Action::Terminal => Ok(terminal_reward(prediction, state.label)),
        Action::Acquire(path) => Ok(-lambda * schema.feature_cost(path)?),
    }
}

pub fn terminal_reward(prediction: usize, label: usize) -> f64 {
    if prediction == label {
        0.0
    } else {
        -1.0
    }
}
