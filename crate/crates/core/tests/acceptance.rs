//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! nonzero if any criterion fails.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

use std::collections::{HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cwcf::autodiff::{
    clip_global_norm, global_grad_norm, grad_check, relative_error, AutodiffError, BatchNormState, ParamId, ParamStore,
    Tape, Tensor, Var,
};
use cwcf::dataset::{generate_synthetic, load_dataset, random_sample, Dataset, NormStats, Sample, SplitTag, SynthConfig, Value};
use cwcf::env::{enumerate_actions, initial_observation, reward, Action, EpisodeState, ObsNode, ObsObject, Observation};
use cwcf::eval::{evaluate, export_trace, replay_trace, run_episodes, EvalMode, EvalPoint, Frontier};
use cwcf::model::{action_logprob, sample_action, BnMode, Model};
use cwcf::schema::{parse_schema, FeatureType, ObjectSchema, Schema};
use cwcf::training::{
    a2c_objective, evaluate_hmil_full, evaluate_rs, pretrain_classifier, train, train_hmil_full, train_rs_baseline,
    TrainConfig, TrainedModel, Transition,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const STATS: &str = r#"{"classes":["low","high"],"root":{
    "reputation":{"type":"real","cost":1},
    "views":{"type":"real","cost":0.5},
    "posts":{"type":"set","cost":2,"schema":{
        "title":{"type":"text","cost":1},
        "score":{"type":"real","cost":0.5},
        "comments":{"type":"set","cost":1,"schema":{"text":{"type":"text","cost":0.5},"score":{"type":"real","cost":0.25}}}}},
    "badges":{"type":"set","cost":1,"schema":{"name":{"type":"cat","cost":0.5,"categories":["gold","silver","bronze"]}}}}}"#;

const FLAT: &str = r#"{"classes":["a","b","c"],"root":{
    "u":{"type":"real","cost":1},"v":{"type":"text","cost":2},"w":{"type":"cat","cost":0.5,"categories":["p","q","r"]},
    "s":{"type":"set","cost":1,"schema":{"x":{"type":"real","cost":1},"y":{"type":"text","cost":1}}}}}"#;

/// Mixes zero-cost features and zero-cost sets at several depths. All costs
/// are dyadic so reward sums are exact in floating point.
const FREE: &str = r#"{"classes":["a","b","c"],"root":{
    "id":{"type":"real","cost":0},
    "tags":{"type":"set","cost":0,"schema":{"t":{"type":"text","cost":0.5},"w":{"type":"real","cost":0}}},
    "items":{"type":"set","cost":1,"schema":{
        "k":{"type":"cat","cost":0,"categories":["x","y"]},
        "sub":{"type":"set","cost":0.25,"schema":{"v":{"type":"real","cost":0},"u":{"type":"real","cost":2}}}}},
    "x":{"type":"real","cost":0.5}}}"#;

fn schema(doc: &str) -> Arc<Schema> {
    Arc::new(parse_schema(doc).expect("valid schema"))
}

fn fresh_model(schema: &Arc<Schema>, seed: u64) -> Model {
    Model::new(schema.clone(), NormStats::compute(&schema.root, std::iter::empty()), seed)
}

fn random_observation(schema: &Schema, rng: &mut ChaCha8Rng, max_items: usize) -> Observation {
    let sample = Arc::new(random_sample(schema, rng, max_items));
    let mut obs = initial_observation(sample, schema);
    for _ in 0..rng.gen_range(0..10) {
        let acts = enumerate_actions(&obs, schema);
        if acts.len() == 1 {
            break;
        }
        if let Action::Acquire(p) = &acts[rng.gen_range(1..acts.len())] {
            obs.acquire(p, schema).unwrap();
        }
    }
    obs
}

fn one_forward(model: &Model, obs: &Observation) -> cwcf::model::Forward {
    let mut tape = Tape::new();
    model.forward(&mut tape, &[obs], BnMode::Running).unwrap()
}

// 1 -------------------------------------------------------------------------

fn policy_normalization() -> Outcome {
    let schemas: Vec<Arc<Schema>> = [STATS, FLAT, FREE].into_iter().map(schema).collect();
    let models: Vec<Model> = schemas.iter().enumerate().map(|(i, s)| fresh_model(s, i as u64 + 1)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let draws = 100_000;
    let (mut worst_sum, mut worst_tv, mut n) = (0.0f64, 0.0f64, 0);
    while n < 200 {
        let k = n % models.len();
        let (model, sch) = (&models[k], &schemas[k]);
        let obs = random_observation(sch, &mut rng, 3);
        let actions = enumerate_actions(&obs, sch);
        if actions.len() > 30 {
            continue;
        }
        let f = one_forward(model, &obs);
        let tree = &f.trees[0];
        let probs: Vec<f64> = actions.iter().map(|a| action_logprob(tree, a).unwrap().exp()).collect();
        let total: f64 = probs.iter().sum();
        worst_sum = worst_sum.max((total - 1.0).abs());
        let index: HashMap<&Action, usize> = actions.iter().enumerate().map(|(i, a)| (a, i)).collect();
        let mut counts = vec![0usize; actions.len()];
        let mut srng = ChaCha8Rng::seed_from_u64(1000 + n as u64);
        for _ in 0..draws {
            let (a, _) = sample_action(tree, &mut srng);
            counts[*index.get(&a).ok_or_else(|| format!("sampled illegal action {a}"))?] += 1;
        }
        let tv: f64 = counts.iter().zip(&probs).map(|(&c, p)| (c as f64 / draws as f64 - p).abs()).sum::<f64>() / 2.0;
        worst_tv = worst_tv.max(tv);
        n += 1;
    }
    ensure!(worst_sum <= 1e-9, "|sum - 1| reached {worst_sum:e}");
    ensure!(worst_tv < 0.02, "total variation reached {worst_tv:.4}");
    Ok(format!("{n} observations: max |sum-1| = {worst_sum:.1e}, max TV = {worst_tv:.4}"))
}

// 2 -------------------------------------------------------------------------

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn store_with(shapes: &[(usize, usize)], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for (i, &(r, c)) in shapes.iter().enumerate() {
        s.add(format!("p{i}"), rand_tensor(&mut rng, r, c));
    }
    s
}

type Build = Box<dyn Fn(&mut Tape, &ParamStore) -> Result<Var, AutodiffError>>;

/// Max relative error of `build` reduced to a scalar by a fixed random projection.
fn check_primitive(shapes: &[(usize, usize)], seed: u64, build: &Build) -> f64 {
    let mut store = store_with(shapes, seed);
    grad_check(
        |s| {
            let mut t = Tape::new();
            let v = build(&mut t, s)?;
            let (r, c) = t.shape(v);
            let w = t.constant(rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed + 7), r, c));
            let prod = t.mul(v, w)?;
            let out = t.sum(prod);
            Ok((t, out))
        },
        &mut store,
        1e-5,
    )
    .unwrap()
}

fn p(t: &mut Tape, s: &ParamStore, i: usize) -> Var {
    t.param(s, ParamId(i))
}

fn primitive_cases() -> Vec<(&'static str, Vec<(usize, usize)>, Build)> {
    let mut bn = BatchNormState::new(3);
    bn.running_mean = vec![0.1, -0.2, 0.3];
    bn.running_var = vec![0.5, 2.0, 1.5];
    let bn2 = bn.clone();
    vec![
        ("linear", vec![(3, 4), (4, 5), (1, 5)], Box::new(|t, s| {
            let (x, w, b) = (p(t, s, 0), p(t, s, 1), p(t, s, 2));
            t.linear(x, w, b)
        })),
        ("relu", vec![(3, 4)], Box::new(|t, s| {
            let x = p(t, s, 0);
            Ok(t.relu(x))
        })),
        ("softmax", vec![(3, 4)], Box::new(|t, s| {
            let x = p(t, s, 0);
            Ok(t.softmax_row(x))
        })),
        ("log_softmax", vec![(3, 4)], Box::new(|t, s| {
            let x = p(t, s, 0);
            Ok(t.log_softmax_row(x))
        })),
        ("log", vec![(3, 4)], Box::new(|t, s| {
            let x = p(t, s, 0);
            let e = t.softmax_row(x);
            t.log(e)
        })),
        ("mean_rows", vec![(5, 3)], Box::new(|t, s| {
            let x = p(t, s, 0);
            Ok(t.mean_rows(x))
        })),
        ("segment_mean", vec![(5, 3)], Box::new(|t, s| {
            let x = p(t, s, 0);
            t.segment_mean(x, &[(0, 2), (2, 0), (2, 3)])
        })),
        ("batchnorm/batch", vec![(6, 3), (1, 3), (1, 3)], Box::new(move |t, s| {
            let (x, g, b) = (p(t, s, 0), p(t, s, 1), p(t, s, 2));
            Ok(t.batchnorm(x, g, b, &bn, true)?.0)
        })),
        ("batchnorm/running", vec![(6, 3), (1, 3), (1, 3)], Box::new(move |t, s| {
            let (x, g, b) = (p(t, s, 0), p(t, s, 1), p(t, s, 2));
            Ok(t.batchnorm(x, g, b, &bn2, false)?.0)
        })),
        ("concat_cols", vec![(2, 3), (2, 1)], Box::new(|t, s| {
            let (a, c) = (p(t, s, 0), p(t, s, 1));
            t.concat_cols(&[c, a, c])
        })),
        ("gather_rows", vec![(5, 3)], Box::new(|t, s| {
            let x = p(t, s, 0);
            t.gather_rows(x, &[4, 1, 1, 0])
        })),
        ("scatter_rows", vec![(5, 3)], Box::new(|t, s| {
            let x = p(t, s, 0);
            t.scatter_rows(x, &[6, 0, 2, 3, 5], 7)
        })),
        ("gather", vec![(5, 3)], Box::new(|t, s| {
            let x = p(t, s, 0);
            t.gather(x, &[0, 14, 7, 7])
        })),
        ("add/sub/mul", vec![(2, 3), (2, 3)], Box::new(|t, s| {
            let (a, b) = (p(t, s, 0), p(t, s, 1));
            let m = t.mul(a, b)?;
            let d = t.sub(m, b)?;
            t.add(d, a)
        })),
        ("reshape/sum/mean/scale", vec![(5, 3)], Box::new(|t, s| {
            let x = p(t, s, 0);
            let y = t.reshape(x, 3, 5)?;
            let m = t.mean(y);
            let q = t.sum(x);
            let a = t.scale(q, 0.3);
            t.add(m, a)
        })),
        ("cross_entropy", vec![(4, 3)], Box::new(|t, s| {
            let x = p(t, s, 0);
            let pr = t.softmax_row(x);
            t.cross_entropy(pr, &[2, 0, 1, 1])
        })),
        ("cross_entropy_logits", vec![(4, 3)], Box::new(|t, s| {
            let x = p(t, s, 0);
            t.cross_entropy_logits(x, &[2, 0, 1, 1])
        })),
    ]
}

const TOY: &str = r#"{"classes":["n","y"],"root":{
    "a":{"type":"real","cost":1},
    "s":{"type":"set","cost":1,"schema":{"x":{"type":"real","cost":1}}}}}"#;

/// Central differences of the A2C objective on toy observations. The
/// objective treats advantages and the entropy weights as constants, so the
/// finite-difference target freezes them at the unperturbed parameters.
fn objective_check() -> f64 {
    let sch = schema(TOY);
    let mut model = fresh_model(&sch, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ids: Vec<ParamId> = model.params.ids().collect();
    for &id in &ids {
        model.params.value_mut(id).data.iter_mut().for_each(|x| *x += rng.gen_range(-0.1..0.1));
    }
    let mut batch: Vec<(Observation, Action)> = Vec::new();
    while batch.len() < 5 {
        let obs = random_observation(&sch, &mut rng, 3);
        let acts = enumerate_actions(&obs, &sch);
        let a = if batch.is_empty() { Action::Terminal } else { acts[rng.gen_range(0..acts.len())].clone() };
        batch.push((obs, a));
    }
    let transitions: Vec<Transition> = batch
        .iter()
        .map(|(o, a)| Transition {
            action: a.clone(),
            reward: rng.gen_range(-1.0..0.0),
            next_value: (*a != Action::Terminal).then(|| rng.gen_range(-1.0..1.0)),
            label: o.sample().label,
        })
        .collect();
    let obs: Vec<&Observation> = batch.iter().map(|(o, _)| o).collect();
    let (gamma, alpha_v, alpha_h) = (0.95, 0.5, 0.05);
    let n = batch.len() as f64;

    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &obs, BnMode::Batch).unwrap();
    let (obj, _) = a2c_objective(&model, &mut tape, &fwd, &transitions, gamma, alpha_v, alpha_h).unwrap();
    model.params.zero_grads();
    tape.backward(obj, &mut model.params).unwrap();

    let targets: Vec<f64> = transitions.iter().map(|t| t.reward + gamma * t.next_value.unwrap_or(0.0)).collect();
    let lp0: Vec<f64> = (0..batch.len()).map(|i| action_logprob(&fwd.trees[i], &batch[i].1).unwrap()).collect();
    let adv0: Vec<f64> = targets.iter().zip(&fwd.values).map(|(t, v)| t - v).collect();
    let terminal: Vec<usize> = (0..batch.len()).filter(|&i| batch[i].1 == Action::Terminal).collect();
    let surrogate = |m: &Model| -> f64 {
        let mut tape = Tape::new();
        let f = m.forward(&mut tape, &obs, BnMode::Batch).unwrap();
        let mut total = 0.0;
        for i in 0..batch.len() {
            let lp = action_logprob(&f.trees[i], &batch[i].1).unwrap();
            total += (-adv0[i] * lp + alpha_v * (targets[i] - f.values[i]).powi(2) + alpha_h * lp0[i] * lp) / n;
        }
        let ce: f64 = terminal.iter().map(|&i| -f.class_probs.get(i, transitions[i].label).ln()).sum();
        total + ce / terminal.len() as f64
    };
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for &id in &ids {
        for j in 0..model.params.value(id).len() {
            let x = model.params.value(id).data[j];
            probe.params.value_mut(id).data[j] = x + eps;
            let up = surrogate(&probe);
            probe.params.value_mut(id).data[j] = x - eps;
            let down = surrogate(&probe);
            probe.params.value_mut(id).data[j] = x;
            worst = worst.max(relative_error(model.params.grad(id).data[j], (up - down) / (2.0 * eps)));
        }
    }
    worst
}

fn gradient_checks() -> Outcome {
    let mut worst = (0.0f64, "");
    for (i, (name, shapes, build)) in primitive_cases().iter().enumerate() {
        let e = check_primitive(shapes, 10 + i as u64, build);
        ensure!(e < 1e-4, "{name}: relative error {e:e}");
        if e > worst.0 {
            worst = (e, name);
        }
    }
    let e = objective_check();
    ensure!(e < 1e-4, "A2C objective: relative error {e:e}");
    Ok(format!("{} primitives, worst {:.1e} ({}); A2C objective {:.1e}", primitive_cases().len(), worst.0, worst.1, e))
}

// 3 -------------------------------------------------------------------------

/// Observation implied by a set of explicitly acquired paths: a node is
/// observed iff it is reachable and either free or acquired.
fn reference_observation(sample: &Sample, schema: &Schema, acquired: &HashSet<String>) -> ObsObject {
    fn object(values: &[Value], schema: &ObjectSchema, prefix: &str, acquired: &HashSet<String>) -> ObsObject {
        let mut nodes = Vec::new();
        for (v, f) in values.iter().zip(&schema.features) {
            let path = if prefix.is_empty() { f.name.clone() } else { format!("{prefix}/{}", f.name) };
            if f.cost != 0.0 && !acquired.contains(&path) {
                nodes.push(ObsNode::Unobserved);
                continue;
            }
            nodes.push(match (v, &f.ftype) {
                (Value::Set(objs), FeatureType::Set(child)) => ObsNode::Expanded(
                    objs.iter()
                        .enumerate()
                        .map(|(i, o)| object(&o.values, child, &format!("{path}[{i}]"), acquired))
                        .collect(),
                ),
                _ => ObsNode::Observed(v.clone()),
            });
        }
        ObsObject { nodes }
    }
    object(&sample.root.values, &schema.root, "", acquired)
}

fn environment_accounting() -> Outcome {
    let schemas: Vec<Arc<Schema>> = [FREE, STATS, FLAT].into_iter().map(schema).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let lambdas = [0.0, 0.125, 0.5, 1.0, 2.0];
    let mut steps = 0;
    for ep in 0..1000 {
        let sch = &schemas[ep % schemas.len()];
        let sample = Arc::new(random_sample(sch, &mut rng, 3));
        let lambda = lambdas[rng.gen_range(0..lambdas.len())];
        let mut state = EpisodeState::new(sample.clone(), sch);
        let mut acquired = HashSet::new();
        let mut total = 0.0;
        let mut prediction = 0;
        ensure!(state.observation.root == reference_observation(&sample, sch, &acquired), "episode {ep}: initial auto-reveal differs");
        loop {
            let acts = enumerate_actions(&state.observation, sch);
            let stop = acts.len() == 1 || rng.gen_bool(0.15);
            let action = if stop { Action::Terminal } else { acts[rng.gen_range(1..acts.len())].clone() };
            if stop {
                prediction = rng.gen_range(0..sch.class_count());
            }
            total += reward(&state, &action, prediction, lambda, sch).map_err(|e| e.to_string())?;
            let before = state.observation.clone();
            let nodes_before = before.observed_nodes();
            state.transition(&action, sch).map_err(|e| e.to_string())?;
            steps += 1;
            ensure!(before.is_subset_of(&state.observation), "episode {ep}: observation shrank");
            if let Action::Acquire(p) = &action {
                ensure!(state.observation.observed_nodes() > nodes_before, "episode {ep}: {p} revealed nothing");
                acquired.insert(p.to_string());
            }
            ensure!(
                state.observation.root == reference_observation(&sample, sch, &acquired),
                "episode {ep}: auto-reveal differs from the reference after {action}"
            );
            if stop {
                break;
            }
        }
        let loss = if prediction == sample.label { 0.0 } else { 1.0 };
        let expected = -loss - lambda * state.accumulated_cost;
        ensure!(total == expected, "episode {ep}: reward sum {total} != {expected}");
    }
    Ok(format!("1000 rollouts, {steps} transitions, reward sums exact"))
}

// 4 and 5 -------------------------------------------------------------------

/// Settings for the synthetic runs. Ten-times-shorter epochs than the
/// library default keep nine runs within the single-core time budget.
fn synthetic_config(lambda: f64, seed: u64) -> TrainConfig {
    TrainConfig { lambda, seed, epoch_length: 300, batch_size: 128, pretrain_max_epochs: 30, ..TrainConfig::default() }
}

fn synthetic_dataset() -> Dataset {
    let cfg = SynthConfig { samples: 7000, ..SynthConfig::default() };
    let (_, ds) = generate_synthetic(&cfg, 0).unwrap();
    ds.split((5000, 1000, 1000), 0).unwrap()
}

fn train_cwcf(ds: &Dataset, lambda: f64, seed: u64) -> (TrainedModel, EvalPoint) {
    let cfg = synthetic_config(lambda, seed);
    let mut model = Model::new(ds.schema.clone(), ds.norm.clone(), seed);
    pretrain_classifier(&mut model, ds, &cfg).unwrap();
    let trained = train(model, ds, &cfg, |_, _| {}).unwrap();
    let point = evaluate(&trained.model, ds, SplitTag::Test, lambda, EvalMode::Greedy, seed).unwrap();
    (trained, point)
}

struct Runs {
    ds: Dataset,
    /// (lambda, seed) -> test point
    points: HashMap<(u64, u64), EvalPoint>,
}

fn lambda_key(l: f64) -> u64 {
    l.to_bits()
}

fn synthetic_learning(runs: &mut Runs) -> Outcome {
    let ds = &runs.ds;
    let cfg = synthetic_config(0.01, 0);
    let mut full = Model::new(ds.schema.clone(), ds.norm.clone(), 0);
    train_hmil_full(&mut full, ds, &cfg).unwrap();
    let hmil = evaluate_hmil_full(&full, ds, SplitTag::Test, 0.01).unwrap();

    let (_, cw) = train_cwcf(ds, 0.01, 0);
    runs.points.insert((lambda_key(0.01), 0), cw.clone());

    let (rs, _) = train_rs_baseline(Model::new(ds.schema.clone(), ds.norm.clone(), 0), ds, cw.avg_cost, &cfg).unwrap();
    let rsp = evaluate_rs(&rs, ds, SplitTag::Test, 0.01, 0).unwrap();

    let detail = format!(
        "HMIL-full acc {:.3} (cost {:.2}); CwCF acc {:.3} cost {:.2} ({:.0}% of full); RS acc {:.3} at budget {:.2}",
        hmil.accuracy,
        hmil.avg_cost,
        cw.accuracy,
        cw.avg_cost,
        100.0 * cw.avg_cost / hmil.avg_cost,
        rsp.accuracy,
        cw.avg_cost
    );
    ensure!(hmil.accuracy >= 0.95, "HMIL-full below 0.95: {detail}");
    ensure!(cw.accuracy >= 0.90, "CwCF below 0.90: {detail}");
    ensure!(cw.avg_cost <= 0.6 * hmil.avg_cost, "CwCF cost above 60% of full: {detail}");
    ensure!(rsp.accuracy <= cw.accuracy - 0.05, "RS within 5 points of CwCF: {detail}");
    Ok(detail)
}

fn lambda_monotonicity(runs: &mut Runs) -> Outcome {
    let lambdas = [0.001, 0.01, 0.1];
    let mut inversions = 0;
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let mut costs = Vec::new();
        for &l in &lambdas {
            let key = (lambda_key(l), seed);
            if !runs.points.contains_key(&key) {
                let (_, pt) = train_cwcf(&runs.ds, l, seed);
                runs.points.insert(key, pt);
            }
            costs.push(runs.points[&key].avg_cost);
        }
        inversions += costs.windows(2).filter(|w| w[1] > w[0]).count();
        rows.push(format!("seed {seed}: {}", costs.iter().map(|c| format!("{c:.2}")).collect::<Vec<_>>().join(" / ")));
    }
    let detail = format!("test costs at lambda 0.001/0.01/0.1, {}; {inversions} inversion(s)", rows.join(", "));
    ensure!(inversions <= 1, "{detail}");
    Ok(detail)
}

// 6 -------------------------------------------------------------------------

fn schedule_conformance() -> Outcome {
    let cfg = SynthConfig { samples: 300, ..SynthConfig::default() };
    let (_, ds) = generate_synthetic(&cfg, 1).unwrap();
    let ds = ds.split((200, 50, 50), 1).unwrap();
    let e = 5;
    let tc = TrainConfig { epoch_length: e, epochs: 12, batch_size: 16, val_samples: Some(20), lambda: 0.01, ..TrainConfig::default() };
    let out = train(Model::new(ds.schema.clone(), ds.norm.clone(), 1), &ds, &tc, |_, _| {}).unwrap();
    ensure!(out.steps.len() == 60, "expected 60 steps, got {}", out.steps.len());
    let mut worst_post: f64 = 0.0;
    for s in &out.steps {
        let lr = if s.step < 10 * e { 3e-3 } else { 1.5e-3 };
        let mut ah = 0.05;
        for _ in 0..s.step / e {
            ah *= 0.5;
        }
        ensure!(s.lr == lr, "step {}: lr {} != {lr}", s.step, s.lr);
        ensure!(s.alpha_h == ah, "step {}: alpha_h {} != {ah}", s.step, s.alpha_h);
        ensure!(s.clipped_norm <= 0.1 + 1e-12, "step {}: post-clip norm {}", s.step, s.clipped_norm);
        worst_post = worst_post.max(s.clipped_norm);
    }
    ensure!(out.steps[49].lr == 3e-3 && out.steps[50].lr == 1.5e-3, "lr does not halve at step 50");

    // Direct recomputation of the clipped norm on random gradients.
    let mut rng = ChaCha8Rng::seed_from_u64(600);
    for _ in 0..200 {
        let mut store = store_with(&[(3, 4), (1, 7)], rng.gen());
        let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            for g in store.grad_mut(id).data.iter_mut() {
                *g = rng.gen_range(-1.0..1.0) * scale;
            }
        }
        let (pre, post) = clip_global_norm(&mut store, 0.1, None);
        let again = global_grad_norm(&store, None);
        ensure!(again <= 0.1 + 1e-12, "recomputed norm {again} after clipping {pre}");
        ensure!((again - post).abs() <= 1e-12, "reported {post}, recomputed {again}");
    }
    Ok(format!("60 logged steps (E = 5): lr and alpha_h exact, max post-clip norm {worst_post:.6}; 200 random clips"))
}

// 7 -------------------------------------------------------------------------

fn brute_force(points: &[EvalPoint]) -> Vec<(f64, f64)> {
    let mut keep: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| {
            !points.iter().any(|q| {
                q.avg_cost <= p.avg_cost && q.accuracy >= p.accuracy && (q.avg_cost < p.avg_cost || q.accuracy > p.accuracy)
            })
        })
        .map(|p| (p.avg_cost, p.accuracy))
        .collect();
    keep.sort_by(|a, b| a.partial_cmp(b).unwrap());
    keep
}

fn pareto_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(700);
    let mut sizes = 0;
    for cloud in 0..100 {
        let n = rng.gen_range(0..60);
        let coarse = cloud % 2 == 0;
        let points: Vec<EvalPoint> = (0..n)
            .map(|i| {
                let (c, a) = if coarse {
                    (rng.gen_range(0..6) as f64, rng.gen_range(0..6) as f64 / 5.0)
                } else {
                    (rng.gen_range(0.0..20.0), rng.gen_range(0.0..1.0))
                };
                EvalPoint { avg_cost: c, accuracy: a, avg_reward: -c, lambda: 0.01, seed: i, split: SplitTag::Test, algorithm: "x".into(), samples: 1 }
            })
            .collect();
        let f = Frontier::new(&points);
        let mut got: Vec<(f64, f64)> = f.points.iter().map(|p| (p.avg_cost, p.accuracy)).collect();
        ensure!(got.windows(2).all(|w| w[0].0 <= w[1].0), "cloud {cloud}: frontier not sorted by cost");
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ensure!(got == brute_force(&points), "cloud {cloud}: frontier differs from brute force");
        ensure!(Frontier::new(&f.points).points == f.points, "cloud {cloud}: not idempotent");
        ensure!(!f.warning.is_empty(), "missing warning");
        sizes += got.len();
    }
    Ok(format!("100 clouds match brute force, {sizes} frontier points in total, idempotent"))
}

// 8 -------------------------------------------------------------------------

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cwcf")).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("cwcf {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn determinism_and_replay() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = |name: &str| -> PathBuf { dir.path().join(name) };
    let s = |p: &PathBuf| p.to_str().unwrap().to_string();
    run_cli(&["gen-synthetic", "--out", &s(&d("data")), "--samples", "400", "--seed", "3"])?;
    std::fs::write(d("cfg.json"), r#"{"epoch_length": 20, "epochs": 3, "batch_size": 16, "pretrain_max_epochs": 3}"#)
        .map_err(|e| e.to_string())?;
    let (schema_f, data_f, cfg_f) = (s(&d("data/schema.json")), s(&d("data/data.jsonl")), s(&d("cfg.json")));
    for run in ["a", "b"] {
        run_cli(&[
            "train", "--schema", &schema_f, "--data", &data_f, "--train", "240", "--val", "80", "--test", "80",
            "--config", &cfg_f, "--lambda", "0.02", "--seed", "9", "--out", &s(&d(run)),
        ])?;
    }
    for file in ["metrics.jsonl", "log.jsonl", "checkpoint.json"] {
        ensure!(read(&d("a").join(file))? == read(&d("b").join(file))?, "{file} differs between identical runs");
    }

    let doc: serde_json::Value = serde_json::from_slice(&read(&d("a/checkpoint.json"))?).map_err(|e| e.to_string())?;
    let model = Model::from_checkpoint(&doc).map_err(|e| e.to_string())?;
    let text = String::from_utf8(read(&d("data/data.jsonl"))?).unwrap();
    let ds = load_dataset(model.schema.clone(), &text).map_err(|e| e.to_string())?.split((240, 80, 80), 0).unwrap();
    let mut traces = 0;
    for mode in [EvalMode::Greedy, EvalMode::Sampled] {
        let samples: Vec<(usize, Arc<Sample>)> = ds.split.test.iter().map(|&i| (i, ds.samples[i].clone())).collect();
        let outcomes = run_episodes(&model, &samples, mode, 4).map_err(|e| e.to_string())?;
        for ((i, sample), outcome) in samples.iter().zip(&outcomes) {
            let trace = export_trace(&model, *i, sample.clone(), 0.02, mode, 4).map_err(|e| e.to_string())?;
            let (costs, pred) = replay_trace(&model, &trace, sample.clone()).map_err(|e| e.to_string())?;
            let recorded: Vec<f64> = trace.steps.iter().map(|s| s.cost).collect();
            ensure!(costs == recorded, "sample {i}: replayed costs differ");
            ensure!(pred == trace.prediction, "sample {i}: replayed prediction differs");
            ensure!(trace.total_cost() == outcome.cost, "sample {i}: trace cost differs from evaluation");
            let actions: Vec<Action> = trace.steps.iter().map(|s| s.action.clone()).collect();
            ensure!(actions == outcome.actions, "sample {i}: trace actions differ from evaluation");
            traces += 1;
        }
    }
    Ok(format!("two CLI training runs byte-identical; {traces} traces replay exactly"))
}

// 9 -------------------------------------------------------------------------

fn real_dataset() -> Result<Option<String>, String> {
    let dir = std::env::var("CWCF_CARCINOGENESIS_DIR").map(PathBuf::from).unwrap_or_else(|_| PathBuf::from("data/carcinogenesis"));
    let (sf, df) = (dir.join("schema.json"), dir.join("data.jsonl"));
    if !sf.exists() || !df.exists() {
        return Ok(None);
    }
    let sch = Arc::new(parse_schema(&String::from_utf8(read(&sf)?).unwrap()).map_err(|e| e.to_string())?);
    let ds = load_dataset(sch, &String::from_utf8(read(&df)?).unwrap()).map_err(|e| e.to_string())?;
    let n = ds.samples.len();
    let ds = ds.split((n * 6 / 10, n * 2 / 10, n - n * 6 / 10 - n * 2 / 10), 0).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { lambda: 0.01, epoch_length: 300, ..TrainConfig::default() };
    let mut full = Model::new(ds.schema.clone(), ds.norm.clone(), 0);
    train_hmil_full(&mut full, &ds, &cfg).map_err(|e| e.to_string())?;
    let hmil = evaluate_hmil_full(&full, &ds, SplitTag::Test, cfg.lambda).map_err(|e| e.to_string())?;
    let mut model = Model::new(ds.schema.clone(), ds.norm.clone(), 0);
    pretrain_classifier(&mut model, &ds, &cfg).map_err(|e| e.to_string())?;
    let trained = train(model, &ds, &cfg, |_, _| {}).map_err(|e| e.to_string())?;
    let cw = evaluate(&trained.model, &ds, SplitTag::Test, cfg.lambda, EvalMode::Greedy, 0).map_err(|e| e.to_string())?;
    let detail = format!("HMIL-full acc {:.3}; CwCF acc {:.3} at cost {:.2}", hmil.accuracy, cw.accuracy, cw.avg_cost);
    ensure!((hmil.accuracy - 0.60).abs() <= 0.07, "{detail}");
    ensure!(cw.accuracy >= hmil.accuracy - 1e-9 && cw.avg_cost < 10.0, "{detail}");
    Ok(Some(detail))
}

// ---------------------------------------------------------------------------

enum Status {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn guarded<F: FnOnce() -> Result<Option<String>, String>>(f: F) -> Status {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(Some(d))) => Status::Pass(d),
        Ok(Ok(None)) => Status::Skip("dataset not present".into()),
        Ok(Err(e)) => Status::Fail(e),
        Err(p) => Status::Fail(format!(
            "panicked: {}",
            p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
        )),
    }
}

fn main() {
    // `cargo test -- --list` and filters are accepted but ignored.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    // Comma-separated criterion numbers to run, e.g. CWCF_ACCEPTANCE_ONLY=1,2,7.
    let only: Option<HashSet<u32>> =
        std::env::var("CWCF_ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let selected = |id: u32| only.as_ref().is_none_or(|o| o.contains(&id));
    let mut runs = Runs { ds: synthetic_dataset(), points: HashMap::new() };
    let mut failed = 0;
    let mut report = |id: u32, name: &str, status: Status, start: Instant| {
        let secs = start.elapsed().as_secs_f64();
        let line = match status {
            Status::Pass(d) => format!("PASS  {id}. {name} ({secs:.1}s): {d}"),
            Status::Fail(d) => {
                failed += 1;
                format!("FAIL  {id}. {name} ({secs:.1}s): {d}")
            }
            Status::Skip(d) => format!("SKIP  {id}. {name}: {d}"),
        };
        println!("{line}");
    };
    let t = Instant::now();
    if selected(1) { report(1, "policy normalization", guarded(|| policy_normalization().map(Some)), t); }
    let t = Instant::now();
    if selected(2) { report(2, "gradient checks", guarded(|| gradient_checks().map(Some)), t); }
    let t = Instant::now();
    if selected(3) { report(3, "environment accounting", guarded(|| environment_accounting().map(Some)), t); }
    let t = Instant::now();
    if selected(4) { report(4, "synthetic end-to-end learning", guarded(|| synthetic_learning(&mut runs).map(Some)), t); }
    let t = Instant::now();
    if selected(5) { report(5, "lambda monotonicity", guarded(|| lambda_monotonicity(&mut runs).map(Some)), t); }
    let t = Instant::now();
    if selected(6) { report(6, "schedule conformance", guarded(|| schedule_conformance().map(Some)), t); }
    let t = Instant::now();
    if selected(7) { report(7, "pareto oracle", guarded(|| pareto_oracle().map(Some)), t); }
    let t = Instant::now();
    if selected(8) { report(8, "determinism and trace replay", guarded(|| determinism_and_replay().map(Some)), t); }
    let t = Instant::now();
    if selected(9) { report(9, "real dataset (optional)", guarded(real_dataset), t); }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
