use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{TrainConfig, TrainError};
use crate::autodiff::{AdamState, BatchNormState, ParamStore, Tape};
use crate::dataset::{Dataset, Sample, SplitTag};
use crate::env::{costly_nodes, enumerate_actions, initial_observation, Action, Observation};
use crate::eval::{classify, episode_rng, EpisodeOutcome, EvalPoint};
use crate::model::{BnMode, Model};
use crate::schema::Schema;

/// Partial observation for classifier pretraining: draws a target rate
/// rho ~ U(0, 1) and acquires uniformly random legal nodes until at least
/// that fraction of the sample's positive-cost nodes is observed.
pub fn random_mask_sample<R: Rng + ?Sized>(sample: Arc<Sample>, schema: &Schema, rng: &mut R) -> Observation {
    let total = costly_nodes(&sample, schema);
    let rho: f64 = rng.gen();
    let mut obs = initial_observation(sample, schema);
    while (obs.observed_costly(schema) as f64) < rho * total as f64 {
        let actions = enumerate_actions(&obs, schema);
        if actions.len() == 1 {
            break;
        }
        if let Action::Acquire(p) = &actions[rng.gen_range(1..actions.len())] {
            obs.acquire(p, schema).expect("enumerated actions are legal");
        }
    }
    obs
}

/// Random-selection observation: uniformly random legal acquisitions,
/// stopping before the first one that would push the total past `budget`.
/// Returns the observation and its cost.
pub fn rs_observation<R: Rng + ?Sized>(sample: Arc<Sample>, schema: &Schema, budget: f64, rng: &mut R) -> (Observation, f64) {
    let mut obs = initial_observation(sample, schema);
    let mut cost = 0.0;
    loop {
        let actions = enumerate_actions(&obs, schema);
        if actions.len() == 1 {
            break;
        }
        let Action::Acquire(p) = &actions[rng.gen_range(1..actions.len())] else { unreachable!() };
        let c = schema.feature_cost(p).expect("enumerated paths resolve");
        if cost + c > budget {
            break;
        }
        obs.acquire(p, schema).expect("enumerated actions are legal");
        cost += c;
    }
    (obs, cost)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierReport {
    pub epochs_run: usize,
    /// 0-based epoch whose parameters were kept; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub train_ce: Vec<f64>,
    pub val_ce: Vec<f64>,
}

fn mean_ce(model: &Model, obs: &[Observation]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for chunk in obs.chunks(512) {
        let mut tape = Tape::new();
        let refs: Vec<&Observation> = chunk.iter().collect();
        let fwd = model.forward(&mut tape, &refs, BnMode::Running)?;
        let labels: Vec<usize> = chunk.iter().map(|o| o.sample().label).collect();
        let ce = tape.cross_entropy_logits(fwd.logits, &labels).map_err(crate::model::ModelError::from)?;
        total += tape.value(ce).item() * chunk.len() as f64;
    }
    Ok(total / obs.len().max(1) as f64)
}

/// Cross-entropy training of the classifier part (every θ, batch norms and
/// the class head) on observations produced by `make_obs`. Validation
/// observations are drawn once; training ones afresh every epoch. Stops
/// after `pretrain_patience` epochs without a validation improvement and
/// restores the best epoch's parameters.
pub fn train_classifier<G>(model: &mut Model, dataset: &Dataset, cfg: &TrainConfig, make_obs: G) -> Result<ClassifierReport, TrainError>
where
    G: Fn(Arc<Sample>, &mut ChaCha8Rng) -> Observation,
{
    cfg.validate()?;
    let mut report = ClassifierReport { epochs_run: 0, best_epoch: None, train_ce: Vec::new(), val_ce: Vec::new() };
    if cfg.pretrain_max_epochs == 0 {
        return Ok(report);
    }
    if dataset.split.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if dataset.split.val.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_7a11);
    let val: Vec<Observation> = dataset.split_samples(SplitTag::Val).map(|s| make_obs(s.clone(), &mut val_rng)).collect();
    let subset = model.classifier_params();
    let mut adam = AdamState::new(&model.params);
    let mut best: Option<(f64, ParamStore, Vec<BatchNormState>)> = None;
    let mut stale = 0;
    let mut order = dataset.split.train.clone();
    for epoch in 0..cfg.pretrain_max_epochs {
        order.shuffle(&mut rng);
        let obs: Vec<Observation> = order.iter().map(|&i| make_obs(dataset.samples[i].clone(), &mut rng)).collect();
        let mut epoch_ce = 0.0;
        for batch in obs.chunks(cfg.pretrain_batch) {
            let mut tape = Tape::new();
            let refs: Vec<&Observation> = batch.iter().collect();
            let fwd = model.forward(&mut tape, &refs, BnMode::Batch)?;
            let labels: Vec<usize> = batch.iter().map(|o| o.sample().label).collect();
            let ce = tape.cross_entropy_logits(fwd.logits, &labels).map_err(crate::model::ModelError::from)?;
            epoch_ce += tape.value(ce).item() * batch.len() as f64;
            model.params.zero_grads();
            tape.backward(ce, &mut model.params).map_err(crate::model::ModelError::from)?;
            adam.step(&mut model.params, cfg.pretrain_lr, 0.0, Some(&subset));
            model.update_bn(&fwd.bn_stats);
        }
        model.params.zero_grads();
        report.train_ce.push(epoch_ce / obs.len() as f64);
        let v = mean_ce(model, &val)?;
        report.val_ce.push(v);
        report.epochs_run = epoch + 1;
        if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
            best = Some((v, model.params.clone(), model.bn.clone()));
            report.best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.pretrain_patience {
                break;
            }
        }
    }
    if let Some((_, params, bn)) = best {
        model.params = params;
        model.bn = bn;
    }
    Ok(report)
}

/// Pretraining on randomly masked samples.
pub fn pretrain_classifier(model: &mut Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<ClassifierReport, TrainError> {
    let schema = model.schema.clone();
    train_classifier(model, dataset, cfg, |s, rng| random_mask_sample(s, &schema, rng))
}

/// The full-information reference: a classifier trained on fully observed samples.
pub fn train_hmil_full(model: &mut Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<ClassifierReport, TrainError> {
    let schema = model.schema.clone();
    train_classifier(model, dataset, cfg, |s, _| Observation::fully_observed(s, &schema))
}

/// Classifier for budget-truncated random acquisitions.
#[derive(Debug, Clone)]
pub struct RSPolicy {
    pub budget: f64,
    pub model: Model,
}

pub fn train_rs_baseline(mut model: Model, dataset: &Dataset, budget: f64, cfg: &TrainConfig) -> Result<(RSPolicy, ClassifierReport), TrainError> {
    if budget.is_nan() || budget < 0.0 {
        return Err(TrainError::Config(format!("budget must be nonnegative, got {budget}")));
    }
    let schema = model.schema.clone();
    let report = train_classifier(&mut model, dataset, cfg, |s, rng| rs_observation(s, &schema, budget, rng).0)?;
    Ok((RSPolicy { budget, model }, report))
}

/// Evaluates random selection with fresh acquisitions per sample.
pub fn evaluate_rs(policy: &RSPolicy, dataset: &Dataset, split: SplitTag, lambda: f64, seed: u64) -> Result<EvalPoint, TrainError> {
    let schema = policy.model.schema.clone();
    let mut obs = Vec::new();
    let mut costs = Vec::new();
    for &i in dataset.indices(split) {
        let (o, c) = rs_observation(dataset.samples[i].clone(), &schema, policy.budget, &mut episode_rng(seed, i));
        obs.push(o);
        costs.push(c);
    }
    let preds = classify(&policy.model, &obs)?;
    let outcomes: Vec<EpisodeOutcome> = dataset
        .indices(split)
        .iter()
        .zip(preds)
        .zip(costs)
        .map(|((&i, prediction), cost)| EpisodeOutcome {
            sample: i,
            actions: Vec::new(),
            cost,
            prediction,
            label: dataset.samples[i].label,
        })
        .collect();
    Ok(EvalPoint::from_outcomes(&outcomes, lambda, seed, split, "rs"))
}

/// Evaluates a classifier that sees every feature and pays for all of them.
pub fn evaluate_hmil_full(model: &Model, dataset: &Dataset, split: SplitTag, lambda: f64) -> Result<EvalPoint, TrainError> {
    let schema = model.schema.clone();
    let idx = dataset.indices(split);
    let obs: Vec<Observation> = idx.iter().map(|&i| Observation::fully_observed(dataset.samples[i].clone(), &schema)).collect();
    let preds = classify(model, &obs)?;
    let outcomes: Vec<EpisodeOutcome> = idx
        .iter()
        .zip(preds)
        .map(|(&i, prediction)| {
            let s = &dataset.samples[i];
            EpisodeOutcome { sample: i, actions: Vec::new(), cost: s.total_cost(&schema), prediction, label: s.label }
        })
        .collect();
    Ok(EvalPoint::from_outcomes(&outcomes, lambda, 0, split, "hmil-full"))
}
