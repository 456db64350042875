//! Cost/accuracy evaluation, Pareto frontiers and acquisition traces.

mod pareto;
mod trace;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use pareto::{pareto_brute_force, pareto_frontier, Frontier, FRONTIER_WARNING};
pub use trace::{export_trace, replay_trace, PathStepRecord, Trace, TraceStep};

use crate::autodiff::Tape;
use crate::dataset::{Dataset, Sample, SplitTag};
use crate::env::{terminal_reward, Action, EpisodeState, Observation};
use crate::model::{greedy_action, sample_action, BnMode, Model, ModelError};

/// Episodes are embedded in chunks of this many observations.
const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    #[default]
    Greedy,
    Sampled,
}

impl FromStr for EvalMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "greedy" => Ok(EvalMode::Greedy),
            "sampled" => Ok(EvalMode::Sampled),
            other => Err(format!("unknown evaluation mode `{other}`")),
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Greedy => "greedy",
            EvalMode::Sampled => "sampled",
        })
    }
}

/// One point of a cost/accuracy plot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    /// Mean acquired cost per sample, not scaled by lambda.
    pub avg_cost: f64,
    pub accuracy: f64,
    pub avg_reward: f64,
    pub lambda: f64,
    pub seed: u64,
    pub split: SplitTag,
    /// Producer of the point, e.g. `cwcf`, `rs`, `hmil-full`.
    #[serde(default)]
    pub algorithm: String,
    #[serde(default)]
    pub samples: usize,
}

impl EvalPoint {
    pub fn from_outcomes(outcomes: &[EpisodeOutcome], lambda: f64, seed: u64, split: SplitTag, algorithm: &str) -> EvalPoint {
        let n = outcomes.len().max(1) as f64;
        let avg_cost = outcomes.iter().map(|o| o.cost).sum::<f64>() / n;
        let accuracy = outcomes.iter().filter(|o| o.correct()).count() as f64 / n;
        let avg_reward = outcomes.iter().map(|o| o.reward(lambda)).sum::<f64>() / n;
        EvalPoint { avg_cost, accuracy, avg_reward, lambda, seed, split, algorithm: algorithm.to_string(), samples: outcomes.len() }
    }
}

/// Result of one evaluation episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    /// Index of the sample in the dataset.
    pub sample: usize,
    pub actions: Vec<Action>,
    pub cost: f64,
    pub prediction: usize,
    pub label: usize,
}

impl EpisodeOutcome {
    pub fn correct(&self) -> bool {
        self.prediction == self.label
    }

    /// Episode return: `-loss - lambda * cost`.
    pub fn reward(&self, lambda: f64) -> f64 {
        terminal_reward(self.prediction, self.label) - lambda * self.cost
    }
}

/// Random stream for sampled-mode episode `sample` under `seed`, shared by
/// evaluation and trace export so both see the same draws.
pub fn episode_rng(seed: u64, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample as u64 + 1);
    rng
}

/// Runs one episode per listed sample, in lockstep batches, with the
/// running batch-normalization statistics.
pub fn run_episodes(
    model: &Model,
    samples: &[(usize, Arc<Sample>)],
    mode: EvalMode,
    seed: u64,
) -> Result<Vec<EpisodeOutcome>, ModelError> {
    let schema = model.schema.clone();
    let mut states: Vec<EpisodeState> = samples.iter().map(|(_, s)| EpisodeState::new(s.clone(), &schema)).collect();
    let mut rngs: Vec<Option<ChaCha8Rng>> = samples
        .iter()
        .map(|(i, _)| (mode == EvalMode::Sampled).then(|| episode_rng(seed, *i)))
        .collect();
    let mut actions: Vec<Vec<Action>> = vec![Vec::new(); samples.len()];
    let mut predictions = vec![0usize; samples.len()];
    let mut active: Vec<usize> = (0..samples.len()).collect();
    while !active.is_empty() {
        let mut still = Vec::with_capacity(active.len());
        for chunk in active.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let obs: Vec<&Observation> = chunk.iter().map(|&e| &states[e].observation).collect();
            let fwd = model.forward(&mut tape, &obs, BnMode::Running)?;
            for (j, &e) in chunk.iter().enumerate() {
                let tree = &fwd.trees[j];
                let action = match rngs[e].as_mut() {
                    Some(rng) => sample_action(tree, rng).0,
                    None => greedy_action(tree),
                };
                if action == Action::Terminal {
                    predictions[e] = fwd.prediction(j);
                } else {
                    still.push(e);
                }
                states[e].transition(&action, &schema).map_err(|_| ModelError::NotInTree(action.to_string()))?;
                actions[e].push(action);
            }
        }
        active = still;
    }
    Ok(samples
        .iter()
        .enumerate()
        .map(|(e, (i, s))| EpisodeOutcome {
            sample: *i,
            actions: std::mem::take(&mut actions[e]),
            cost: states[e].accumulated_cost,
            prediction: predictions[e],
            label: s.label,
        })
        .collect())
}

/// Evaluates the acquisition policy on one split.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    split: SplitTag,
    lambda: f64,
    mode: EvalMode,
    seed: u64,
) -> Result<EvalPoint, ModelError> {
    let samples: Vec<(usize, Arc<Sample>)> =
        dataset.indices(split).iter().map(|&i| (i, dataset.samples[i].clone())).collect();
    let outcomes = run_episodes(model, &samples, mode, seed)?;
    Ok(EvalPoint::from_outcomes(&outcomes, lambda, seed, split, "cwcf"))
}

/// Classifier accuracy on fixed observations (no acquisition decisions).
/// Returns predictions in input order.
pub fn classify(model: &Model, observations: &[Observation]) -> Result<Vec<usize>, ModelError> {
    let mut out = Vec::with_capacity(observations.len());
    for chunk in observations.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let refs: Vec<&Observation> = chunk.iter().collect();
        let fwd = model.forward(&mut tape, &refs, BnMode::Running)?;
        out.extend((0..chunk.len()).map(|i| fwd.prediction(i)));
    }
    Ok(out)
}
