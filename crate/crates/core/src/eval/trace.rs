use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use super::{episode_rng, EvalMode};
use crate::autodiff::Tape;
use crate::dataset::Sample;
use crate::env::{Action, EpisodeState};
use crate::model::{greedy_action, sample_action, BnMode, Model, ModelError};

/// One decision node on the chosen path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathStepRecord {
    pub options: Vec<String>,
    pub probs: Vec<f64>,
    pub chosen: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// Observation before the action.
    pub observation: Json,
    pub path: Vec<PathStepRecord>,
    pub class_probs: Vec<f64>,
    pub value: f64,
    pub action: Action,
    pub cost: f64,
}

/// A recorded episode: one step per acquisition plus the final Terminal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub steps: Vec<TraceStep>,
    pub prediction: String,
    pub label: String,
    pub sample: usize,
    pub lambda: f64,
    pub mode: EvalMode,
    pub seed: u64,
}

impl Trace {
    pub fn total_cost(&self) -> f64 {
        self.steps.iter().map(|s| s.cost).sum()
    }
}

/// Runs one episode on `sample` (its dataset index selects the random
/// stream in sampled mode) and records every step.
pub fn export_trace(
    model: &Model,
    index: usize,
    sample: Arc<Sample>,
    lambda: f64,
    mode: EvalMode,
    seed: u64,
) -> Result<Trace, ModelError> {
    let schema = model.schema.clone();
    let mut rng = (mode == EvalMode::Sampled).then(|| episode_rng(seed, index));
    let mut state = EpisodeState::new(sample.clone(), &schema);
    let mut steps = Vec::new();
    loop {
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &[&state.observation], BnMode::Running)?;
        let tree = &fwd.trees[0];
        let action = match rng.as_mut() {
            Some(r) => sample_action(tree, r).0,
            None => greedy_action(tree),
        };
        let path = tree
            .path_to(&action)
            .ok_or_else(|| ModelError::NotInTree(action.to_string()))?
            .into_iter()
            .map(|(n, o)| {
                let node = &tree.nodes[n];
                PathStepRecord {
                    options: (0..node.options.len()).map(|i| node.option_label(i, tree)).collect(),
                    probs: node.probs.clone(),
                    chosen: o,
                }
            })
            .collect();
        let observation = state.observation.to_json(&schema);
        let cost = state.transition(&action, &schema).map_err(|_| ModelError::NotInTree(action.to_string()))?;
        let terminal = action == Action::Terminal;
        steps.push(TraceStep {
            observation,
            path,
            class_probs: fwd.class_probs.row(0).to_vec(),
            value: fwd.values[0],
            action,
            cost,
        });
        if terminal {
            let prediction = fwd.prediction(0);
            return Ok(Trace {
                steps,
                prediction: schema.class_names[prediction].clone(),
                label: schema.class_names[sample.label].clone(),
                sample: index,
                lambda,
                mode,
                seed,
            });
        }
    }
}

/// Replays a trace's actions through the environment and the model.
/// Returns the per-step costs and the final prediction's class name.
pub fn replay_trace(model: &Model, trace: &Trace, sample: Arc<Sample>) -> Result<(Vec<f64>, String), ModelError> {
    let schema = model.schema.clone();
    let mut state = EpisodeState::new(sample, &schema);
    let mut costs = Vec::new();
    for step in &trace.steps {
        if step.action == Action::Terminal {
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &[&state.observation], BnMode::Running)?;
            costs.push(0.0);
            return Ok((costs, schema.class_names[fwd.prediction(0)].clone()));
        }
        costs.push(state.transition(&step.action, &schema).map_err(|_| ModelError::NotInTree(step.action.to_string()))?);
    }
    Err(ModelError::NotInTree("terminal".into()))
}
