use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError};
use crate::autodiff::{apply_l2, clip_global_norm, AdamState, Tape, Tensor, Var};
use crate::dataset::{Dataset, Sample, SplitTag};
use crate::env::{terminal_reward, Action, EpisodeState, Observation};
use crate::eval::{run_episodes, EvalMode, EvalPoint};
use crate::model::{sample_action, BnMode, Forward, Model, ModelError};

/// One environment's step within a synchronous batch. The observation and
/// log-probability live in the [`Forward`] the batch was sampled from.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub action: Action,
    pub reward: f64,
    /// `V(s')` from the frozen copy; `None` when the episode ended.
    pub next_value: Option<f64>,
    pub label: usize,
}

/// Values of the objective's terms, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub classifier: f64,
}

/// Builds the scalar A2C objective on `tape` for transitions sampled from
/// `fwd`: the mean over the batch of `-A log pi + alpha_v (target - V)^2 +
/// alpha_h log pi * sg(log pi)`, plus the class cross-entropy averaged over
/// transitions that chose Terminal. Bootstrap values enter as constants.
pub fn a2c_objective(
    model: &Model,
    tape: &mut Tape,
    fwd: &Forward,
    batch: &[Transition],
    gamma: f64,
    alpha_v: f64,
    alpha_h: f64,
) -> Result<(Var, LossParts), ModelError> {
    let n = batch.len();
    let nf = n as f64;
    let mut lps = Vec::with_capacity(n);
    for (i, t) in batch.iter().enumerate() {
        lps.push(model.log_prob_var(tape, fwd, i, &t.action)?);
    }
    let lp = tape.concat_cols(&lps)?;
    let lp_vals = tape.value(lp).data.clone();
    let v = tape.reshape(fwd.value, 1, n)?;
    let targets: Vec<f64> = batch.iter().map(|t| t.reward + gamma * t.next_value.unwrap_or(0.0)).collect();
    let adv: Vec<f64> = targets.iter().zip(&fwd.values).map(|(t, v)| t - v).collect();

    let w_pol = tape.constant(Tensor::row_vector(adv.iter().map(|a| -a / nf).collect()));
    let pol = tape.mul(lp, w_pol)?;
    let policy = tape.sum(pol);

    let tv = tape.constant(Tensor::row_vector(targets));
    let diff = tape.sub(tv, v)?;
    let sq = tape.mul(diff, diff)?;
    let sq_sum = tape.sum(sq);
    let value = tape.scale(sq_sum, alpha_v / nf);

    let w_ent = tape.constant(Tensor::row_vector(lp_vals.iter().map(|l| alpha_h * l / nf).collect()));
    let ent = tape.mul(lp, w_ent)?;
    let entropy = tape.sum(ent);

    let mut total = tape.add(policy, value)?;
    total = tape.add(total, entropy)?;
    let term: Vec<usize> = (0..n).filter(|&i| batch[i].action == Action::Terminal).collect();
    let mut classifier = 0.0;
    if !term.is_empty() {
        let rows = tape.gather_rows(fwd.logits, &term)?;
        let labels: Vec<usize> = term.iter().map(|&i| batch[i].label).collect();
        let ce = tape.cross_entropy_logits(rows, &labels)?;
        classifier = tape.value(ce).item();
        total = tape.add(total, ce)?;
    }
    let parts = LossParts {
        policy: tape.value(policy).item(),
        value: tape.value(value).item(),
        entropy: tape.value(entropy).item(),
        classifier,
    };
    Ok((total, parts))
}

/// Validation result recorded every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub step: usize,
    pub val_reward: f64,
    pub val_accuracy: f64,
    pub val_cost: f64,
    pub lr: f64,
    pub alpha_h: f64,
}

/// Per-update diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub alpha_h: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub loss: LossParts,
}

/// One finished training episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub step: usize,
    pub sample: usize,
    /// Sum of rewards collected.
    #[serde(rename = "return")]
    pub ret: f64,
    pub cost: f64,
    pub correct: bool,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    /// Parameters of the best validation point.
    pub model: Model,
    pub config: TrainConfig,
    pub history: Vec<ValRecord>,
    /// Index into `history` of the selected point.
    pub best: Option<usize>,
    pub steps: Vec<StepRecord>,
    pub episodes: Vec<EpisodeRecord>,
}

struct Env {
    state: EpisodeState,
    sample: usize,
    ret: f64,
}

fn fresh_env(dataset: &Dataset, rng: &mut ChaCha8Rng) -> Env {
    let train = &dataset.split.train;
    let sample = train[rng.gen_range(0..train.len())];
    Env { state: EpisodeState::new(dataset.samples[sample].clone(), &dataset.schema), sample, ret: 0.0 }
}

fn validate(model: &Model, val: &[(usize, Arc<Sample>)], lambda: f64, seed: u64) -> Result<EvalPoint, ModelError> {
    let outcomes = run_episodes(model, val, EvalMode::Greedy, seed)?;
    Ok(EvalPoint::from_outcomes(&outcomes, lambda, seed, SplitTag::Val, "cwcf"))
}

/// Synchronous advantage actor-critic. `batch_size` environments each take
/// one sampled action per step, followed by one update (gradients, L2,
/// global-norm clipping, Adam). Finished episodes restart on a uniformly
/// drawn training sample. Every `epoch_length` steps the greedy policy is
/// validated; the best validation reward's parameters are returned.
/// `on_validation` sees each record with the current model.
pub fn train<F>(model: Model, dataset: &Dataset, cfg: &TrainConfig, mut on_validation: F) -> Result<TrainedModel, TrainError>
where
    F: FnMut(&ValRecord, &Model),
{
    cfg.validate()?;
    if dataset.split.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if dataset.split.val.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    let schema = model.schema.clone();
    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.params);
    let mut envs: Vec<Env> = (0..cfg.batch_size).map(|_| fresh_env(dataset, &mut rng)).collect();
    let val_n = cfg.val_samples.unwrap_or(usize::MAX).min(dataset.split.val.len());
    let val: Vec<(usize, Arc<Sample>)> =
        dataset.split.val[..val_n].iter().map(|&i| (i, dataset.samples[i].clone())).collect();

    let mut out = TrainedModel {
        model: model.clone(),
        config: cfg.clone(),
        history: Vec::new(),
        best: None,
        steps: Vec::with_capacity(cfg.total_steps()),
        episodes: Vec::new(),
    };
    for step in 0..cfg.total_steps() {
        let lr = cfg.lr_at(step);
        let alpha_h = cfg.alpha_h_at(step);
        let mut tape = Tape::new();
        let obs: Vec<&Observation> = envs.iter().map(|e| &e.state.observation).collect();
        let fwd = model.forward(&mut tape, &obs, BnMode::Batch)?;

        let mut batch = Vec::with_capacity(envs.len());
        for (i, env) in envs.iter_mut().enumerate() {
            let (action, _) = sample_action(&fwd.trees[i], &mut rng);
            let cost = env.state.transition(&action, &schema)?;
            let reward = match &action {
                Action::Terminal => terminal_reward(fwd.prediction(i), env.state.label),
                Action::Acquire(_) => -cfg.lambda * cost,
            };
            env.ret += reward;
            batch.push(Transition { action, reward, next_value: None, label: env.state.label });
        }

        // Bootstrap values from the pre-update parameters, outside the tape.
        let live: Vec<usize> = (0..envs.len()).filter(|&i| !envs[i].state.done).collect();
        if !live.is_empty() {
            let mut frozen = Tape::new();
            let next: Vec<&Observation> = live.iter().map(|&i| &envs[i].state.observation).collect();
            let nf = model.forward(&mut frozen, &next, BnMode::Batch)?;
            for (j, &i) in live.iter().enumerate() {
                batch[i].next_value = Some(nf.values[j]);
            }
        }

        let (objective, loss) = a2c_objective(&model, &mut tape, &fwd, &batch, cfg.gamma, cfg.alpha_v, alpha_h)?;
        model.params.zero_grads();
        tape.backward(objective, &mut model.params).map_err(ModelError::from)?;
        apply_l2(&mut model.params, cfg.l2, None);
        let (grad_norm, clipped_norm) = clip_global_norm(&mut model.params, cfg.clip_norm, None);
        adam.step(&mut model.params, lr, 0.0, None);
        model.update_bn(&fwd.bn_stats);
        out.steps.push(StepRecord { step, lr, alpha_h, grad_norm, clipped_norm, loss });

        for (i, t) in batch.iter().enumerate() {
            if t.action == Action::Terminal {
                let env = &envs[i];
                out.episodes.push(EpisodeRecord {
                    step,
                    sample: env.sample,
                    ret: env.ret,
                    cost: env.state.accumulated_cost,
                    correct: t.reward == 0.0,
                });
                envs[i] = fresh_env(dataset, &mut rng);
            }
        }

        if (step + 1) % cfg.epoch_length == 0 {
            let p = validate(&model, &val, cfg.lambda, cfg.seed)?;
            let rec = ValRecord { step: step + 1, val_reward: p.avg_reward, val_accuracy: p.accuracy, val_cost: p.avg_cost, lr, alpha_h };
            on_validation(&rec, &model);
            let better = out.best.is_none_or(|b| rec.val_reward > out.history[b].val_reward);
            out.history.push(rec);
            if better {
                out.best = Some(out.history.len() - 1);
                out.model = model.clone();
            }
        }
    }
    if out.best.is_none() {
        out.model = model;
    }
    Ok(out)
}
