//! The hierarchical set embedding network, its heads and the tree-structured
//! action policy.
//!
//! Every set position of the schema (plus the root, a set holding one object)
//! is a *bag* with its own object embedder θ and action scorer φ. A batch of
//! observations is embedded bag by bag: all objects of one bag across the
//! whole batch go through θ together, children are averaged per parent
//! object, batch-normalized, and written into the parent's input rows.

mod policy;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value as Json};
use thiserror::Error;

pub use policy::{action_logprob, greedy_action, sample_action, PolicyNode, PolicyOption, PolicyTree};

use crate::autodiff::{
    softmax_rows, AutodiffError, BatchNormState, BatchStats, ParamId, ParamStore, Tape, Tensor, Var,
};
use crate::dataset::{encode_into, encoded_dim, DataError, NormStats};
use crate::env::{compute_mask, Action, ObsNode, ObsObject, Observation};
use crate::schema::{FeaturePath, FeatureType, ObjectSchema, Schema, SchemaError};
use crate::EMBED_DIM;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("observation does not conform to the model schema")]
    SchemaMismatch,
    #[error("action `{0}` is not a leaf of the policy tree")]
    NotInTree(String),
    #[error("model checkpoint: {0}")]
    Checkpoint(String),
}

/// Which batch-normalization statistics a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Statistics of the current batch; they are returned for folding into
    /// the running estimates.
    Batch,
    /// The stored running estimates.
    Running,
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Linear {
        let bound = (6.0 / (inp + out).max(1) as f64).sqrt();
        let w = Tensor::from_vec(inp, out, (0..inp * out).map(|_| rng.gen_range(-bound..bound)).collect())
            .expect("sized");
        Linear { w: store.add(format!("{name}/W"), w), b: store.add(format!("{name}/b"), Tensor::zeros(1, out)) }
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, AutodiffError> {
        let (w, b) = (tape.param(store, self.w), tape.param(store, self.b));
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
struct Bag {
    name: String,
    schema: ObjectSchema,
    norm: NormStats,
    /// Child bags keyed by the feature index of the set in this bag's schema.
    children: Vec<(usize, usize)>,
    input_dim: usize,
    theta: Linear,
    phi: Linear,
    /// Scale and shift of the batch normalization applied to this bag's
    /// aggregated embedding inside its parent object (non-root bags only).
    bn: Option<(ParamId, ParamId)>,
}

/// The network: parameters, batch-normalization running statistics and the
/// normalization of real inputs, bound to one schema.
#[derive(Debug, Clone)]
pub struct Model {
    pub schema: Arc<Schema>,
    pub norm: NormStats,
    pub params: ParamStore,
    /// Running statistics per bag; the root entry is unused.
    pub bn: Vec<BatchNormState>,
    bags: Vec<Bag>,
    head_p: Linear,
    head_v: Linear,
    head_at: Linear,
}

fn input_dim(schema: &ObjectSchema) -> usize {
    schema.features.iter().map(|f| encoded_dim(&f.ftype) + 1).sum()
}

impl Model {
    pub fn new(schema: Arc<Schema>, norm: NormStats, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut bags: Vec<Bag> = Vec::new();
        // Pre-order walk: a parent bag always precedes its children.
        let mut stack: Vec<(String, ObjectSchema, NormStats, Option<(usize, usize)>)> =
            vec![("root".to_string(), schema.root.clone(), norm.clone(), None)];
        while let Some((name, obj, onorm, parent)) = stack.pop() {
            let idx = bags.len();
            let d = input_dim(&obj);
            let theta = Linear::new(&mut params, &format!("{name}/theta"), d, EMBED_DIM, &mut rng);
            let phi = Linear::new(&mut params, &format!("{name}/phi"), 2 * EMBED_DIM, obj.features.len(), &mut rng);
            let bn = parent.map(|_| {
                (
                    params.add(format!("{name}/bn/gamma"), Tensor::filled(1, EMBED_DIM, 1.0)),
                    params.add(format!("{name}/bn/beta"), Tensor::zeros(1, EMBED_DIM)),
                )
            });
            if let Some((p, k)) = parent {
                bags[p].children.push((k, idx));
            }
            let mut kids = Vec::new();
            for (k, f) in obj.features.iter().enumerate() {
                if let FeatureType::Set(cs) = &f.ftype {
                    let cn = onorm.child(k).cloned().unwrap_or_default();
                    kids.push((format!("{name}/{}", f.name), (**cs).clone(), cn, Some((idx, k))));
                }
            }
            // Reverse so the stack pops children in schema order.
            stack.extend(kids.into_iter().rev());
            bags.push(Bag { name, schema: obj, norm: onorm, children: Vec::new(), input_dim: d, theta, phi, bn });
        }
        let k = schema.class_count();
        let head_p = Linear::new(&mut params, "head/p", EMBED_DIM, k, &mut rng);
        let head_v = Linear::new(&mut params, "head/V", EMBED_DIM, 1, &mut rng);
        let head_at = Linear::new(&mut params, "head/At", EMBED_DIM, 1, &mut rng);
        let bn = bags.iter().map(|_| BatchNormState::new(EMBED_DIM)).collect();
        Model { schema, norm, params, bn, bags, head_p, head_v, head_at }
    }

    /// Bag names in pre-order, starting with `root`.
    pub fn bag_names(&self) -> Vec<&str> {
        self.bags.iter().map(|b| b.name.as_str()).collect()
    }

    /// Parameters of the classifier: every θ, every batch-normalization
    /// scale/shift and the class head.
    pub fn classifier_params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for b in &self.bags {
            ids.extend([b.theta.w, b.theta.b]);
            if let Some((g, s)) = b.bn {
                ids.extend([g, s]);
            }
        }
        ids.extend([self.head_p.w, self.head_p.b]);
        ids
    }

    /// Folds batch statistics from a [`BnMode::Batch`] pass into the running estimates.
    pub fn update_bn(&mut self, stats: &[Option<BatchStats>]) {
        for (state, s) in self.bn.iter_mut().zip(stats) {
            if let Some(s) = s {
                state.update(s);
            }
        }
    }

    /// Runs the network on a batch of observations.
    pub fn forward(&self, tape: &mut Tape, batch: &[&Observation], mode: BnMode) -> Result<Forward, ModelError> {
        let n_obs = batch.len();
        let insts = self.collect_instances(batch)?;
        let mut z: Vec<Option<Var>> = vec![None; self.bags.len()];
        let mut bn_stats: Vec<Option<BatchStats>> = vec![None; self.bags.len()];
        for b in (0..self.bags.len()).rev() {
            let (v, stats) = self.embed_bag(tape, b, &insts, &z, mode)?;
            z[b] = Some(v);
            for (c, s) in stats {
                bn_stats[c] = Some(s);
            }
        }
        let z_root = z[0].expect("root embedded");

        let logits = self.head_p.apply(tape, &self.params, z_root)?;
        let value = self.head_v.apply(tape, &self.params, z_root)?;
        let terminal = self.head_at.apply(tape, &self.params, z_root)?;

        // Flat potentials: A_t of every observation, then each bag's scores row-major.
        let mut parts = vec![tape.reshape(terminal, 1, n_obs)?];
        let mut offsets = vec![0; self.bags.len()];
        let mut off = n_obs;
        for (b, bag) in self.bags.iter().enumerate() {
            offsets[b] = off;
            let n = insts[b].len();
            let f = bag.schema.features.len();
            if n == 0 || f == 0 {
                continue;
            }
            let zr = tape.gather_rows(z_root, &insts[b].iter().map(|i| i.obs).collect::<Vec<_>>())?;
            let zi = z[b].expect("embedded");
            let cat = tape.concat_cols(&[zr, zi])?;
            let scores = bag.phi.apply(tape, &self.params, cat)?;
            parts.push(tape.reshape(scores, 1, n * f)?);
            off += n * f;
        }
        let potentials = tape.concat_cols(&parts)?;

        let pv = tape.value(potentials).data.clone();
        let trees = (0..n_obs).map(|i| self.build_tree(i, &insts, &offsets, &pv)).collect();
        Ok(Forward {
            z: z_root,
            logits,
            value,
            terminal,
            potentials,
            class_probs: softmax_rows(tape.value(logits)),
            values: tape.value(value).data.clone(),
            trees,
            bn_stats,
        })
    }

    /// Per-object embeddings of one observation, with batch normalization
    /// from the running statistics.
    pub fn embed(&self, obs: &Observation) -> Result<EmbeddingTree, ModelError> {
        let mut tape = Tape::new();
        let insts = self.collect_instances(&[obs])?;
        let mut z: Vec<Option<Var>> = vec![None; self.bags.len()];
        for b in (0..self.bags.len()).rev() {
            z[b] = Some(self.embed_bag(&mut tape, b, &insts, &z, BnMode::Running)?.0);
        }
        let mut objects = Vec::new();
        for (b, list) in insts.iter().enumerate().skip(1) {
            let t = tape.value(z[b].expect("embedded"));
            for (r, inst) in list.iter().enumerate() {
                objects.push((inst.prefix.clone(), t.row(r).to_vec()));
            }
        }
        let root = tape.value(z[0].expect("embedded")).row(0).to_vec();
        Ok(EmbeddingTree { root, objects })
    }

    /// Top-down collection of every object instance per bag.
    fn collect_instances<'o>(&self, batch: &[&'o Observation]) -> Result<Vec<Vec<Instance<'o>>>, ModelError> {
        let mut insts: Vec<Vec<Instance<'o>>> = vec![Vec::new(); self.bags.len()];
        for (i, o) in batch.iter().enumerate() {
            if o.root.nodes.len() != self.schema.root.features.len() {
                return Err(ModelError::SchemaMismatch);
            }
            insts[0].push(Instance { obj: &o.root, obs: i, prefix: FeaturePath::new(), sets: Vec::new() });
        }
        for b in 0..self.bags.len() {
            for &(k, c) in &self.bags[b].children.clone() {
                let name = &self.bags[b].schema.features[k].name;
                let child_len = self.bags[c].schema.features.len();
                let mut kids = Vec::new();
                for j in 0..insts[b].len() {
                    let pobj: &'o ObsObject = insts[b][j].obj;
                    let (pobs, pprefix) = (insts[b][j].obs, insts[b][j].prefix.clone());
                    let seg = match &pobj.nodes[k] {
                        ObsNode::Expanded(children) => {
                            let start = kids.len();
                            for (ci, child) in children.iter().enumerate() {
                                if child.nodes.len() != child_len {
                                    return Err(ModelError::SchemaMismatch);
                                }
                                kids.push(Instance {
                                    obj: child,
                                    obs: pobs,
                                    prefix: pprefix.clone().then(name, Some(ci)),
                                    sets: Vec::new(),
                                });
                            }
                            Some((start, children.len()))
                        }
                        ObsNode::Unobserved => None,
                        ObsNode::Observed(_) => return Err(ModelError::SchemaMismatch),
                    };
                    insts[b][j].sets.push(seg);
                }
                insts[c] = kids;
            }
        }
        Ok(insts)
    }

    /// Embeds all instances of bag `b`; child bags must already be embedded.
    /// Returns the embedding and batch statistics of the child bags' batch norms.
    fn embed_bag(
        &self,
        tape: &mut Tape,
        b: usize,
        insts: &[Vec<Instance<'_>>],
        z: &[Option<Var>],
        mode: BnMode,
    ) -> Result<(Var, Vec<(usize, BatchStats)>), ModelError> {
        let bag = &self.bags[b];
        let n = insts[b].len();
        let mut x = Tensor::zeros(n, bag.input_dim);
        let mut col_of = Vec::with_capacity(bag.schema.features.len());
        let mut col = 0;
        for f in &bag.schema.features {
            col_of.push(col);
            col += encoded_dim(&f.ftype) + 1;
        }
        for (r, inst) in insts[b].iter().enumerate() {
            let row = x.row_mut(r);
            for (k, (node, f)) in inst.obj.nodes.iter().zip(&bag.schema.features).enumerate() {
                let d = encoded_dim(&f.ftype);
                let c = col_of[k];
                match node {
                    ObsNode::Observed(v) => {
                        encode_into(&f.ftype, v, bag.norm.real(k), &mut row[c..c + d])?;
                        row[c + d] = 1.0;
                    }
                    ObsNode::Expanded(_) => row[c + d] = compute_mask(node),
                    ObsNode::Unobserved => {}
                }
            }
        }

        // Assemble the input column blocks: constant encodings interleaved
        // with the aggregated embeddings of child sets.
        let mut stats = Vec::new();
        let mut pieces = Vec::new();
        let mut start = 0;
        for (slot, &(k, c)) in bag.children.iter().enumerate() {
            let c0 = col_of[k];
            if c0 > start {
                pieces.push(tape.constant(column_block(&x, start, c0)));
            }
            let segs: Vec<(usize, usize)> = insts[b].iter().filter_map(|i| i.sets[slot]).collect();
            let rows: Vec<usize> =
                insts[b].iter().enumerate().filter(|(_, i)| i.sets[slot].is_some()).map(|(r, _)| r).collect();
            let emb = if segs.is_empty() {
                tape.constant(Tensor::zeros(n, EMBED_DIM))
            } else {
                let zc = z[c].expect("child bag embedded first");
                let agg = tape.segment_mean(zc, &segs)?;
                let (g, s) = self.bags[c].bn.expect("non-root bag has batch norm");
                let (g, s) = (tape.param(&self.params, g), tape.param(&self.params, s));
                let (normed, st) = tape.batchnorm(agg, g, s, &self.bn[c], mode == BnMode::Batch)?;
                if let Some(st) = st {
                    stats.push((c, st));
                }
                tape.scatter_rows(normed, &rows, n)?
            };
            pieces.push(emb);
            start = c0 + EMBED_DIM;
        }
        if bag.input_dim > start || pieces.is_empty() {
            pieces.push(tape.constant(column_block(&x, start, bag.input_dim)));
        }
        let input = if pieces.len() == 1 { pieces[0] } else { tape.concat_cols(&pieces)? };
        let pre = bag.theta.apply(tape, &self.params, input)?;
        Ok((tape.relu(pre), stats))
    }

    fn build_tree(&self, i: usize, insts: &[Vec<Instance<'_>>], offsets: &[usize], pv: &[f64]) -> PolicyTree {
        let mut tree = PolicyTree::default();
        let root = &insts[0][i];
        let mut options = vec![(PolicyOption::Leaf(Action::Terminal), i)];
        self.object_options(0, i, root, insts, offsets, &mut tree, &mut options);
        tree.push_root(options, pv);
        tree
    }

    /// Appends the options of one object (its eligible features) to `options`,
    /// building descent nodes for partially observed sets.
    #[allow(clippy::too_many_arguments)]
    fn object_options(
        &self,
        b: usize,
        r: usize,
        inst: &Instance<'_>,
        insts: &[Vec<Instance<'_>>],
        offsets: &[usize],
        tree: &mut PolicyTree,
        options: &mut Vec<(PolicyOption, usize)>,
    ) {
        let bag = &self.bags[b];
        let nf = bag.schema.features.len();
        for (k, (node, f)) in inst.obj.nodes.iter().zip(&bag.schema.features).enumerate() {
            let pot = offsets[b] + r * nf + k;
            match node {
                ObsNode::Unobserved => {
                    options.push((PolicyOption::Leaf(Action::Acquire(inst.prefix.clone().then(&f.name, None))), pot))
                }
                ObsNode::Expanded(_) if compute_mask(node) < 1.0 => {
                    let slot = bag.children.iter().position(|&(kk, _)| kk == k).expect("set feature has a bag");
                    let c = bag.children[slot].1;
                    let (start, len) = inst.sets[slot].expect("expanded set has a segment");
                    let mut sub = Vec::new();
                    for cr in start..start + len {
                        self.object_options(c, cr, &insts[c][cr], insts, offsets, tree, &mut sub);
                    }
                    let label = inst.prefix.clone().then(&f.name, None);
                    let node_id = tree.push_node(label, sub);
                    options.push((PolicyOption::Descend(node_id), pot));
                }
                _ => {}
            }
        }
    }

    /// Per-node probabilities are fixed at construction; this rebuilds
    /// `log π(action)` on the tape for observation `i` of `fwd`.
    pub fn log_prob_var(&self, tape: &mut Tape, fwd: &Forward, i: usize, action: &Action) -> Result<Var, ModelError> {
        let tree = &fwd.trees[i];
        let path = tree.path_to(action).ok_or_else(|| ModelError::NotInTree(action.to_string()))?;
        let mut total: Option<Var> = None;
        for (node, opt) in path {
            let g = tape.gather(fwd.potentials, &tree.nodes[node].potentials)?;
            let ls = tape.log_softmax_row(g);
            let sel = tape.gather(ls, &[opt])?;
            total = Some(match total {
                None => sel,
                Some(t) => tape.add(t, sel)?,
            });
        }
        Ok(total.expect("paths are nonempty"))
    }

    /// Checkpoint document: parameters plus running statistics, input
    /// normalization and the schema.
    pub fn to_checkpoint(&self) -> Json {
        let mut doc = self.params.to_json();
        let mut bn = Map::new();
        for (bag, st) in self.bags.iter().zip(&self.bn).skip(1) {
            bn.insert(bag.name.clone(), json!({"running_mean": st.running_mean, "running_var": st.running_var}));
        }
        doc["batchnorm"] = Json::Object(bn);
        doc["normalization"] = serde_json::to_value(&self.norm).expect("serializable");
        doc["schema"] = self.schema.to_json();
        doc
    }

    pub fn from_checkpoint(doc: &Json) -> Result<Model, ModelError> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        let schema_doc = doc.get("schema").ok_or_else(|| bad("missing schema"))?;
        let schema = Schema::parse(&schema_doc.to_string())?;
        let norm: NormStats = serde_json::from_value(doc.get("normalization").cloned().ok_or_else(|| bad("missing normalization"))?)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut model = Model::new(Arc::new(schema), norm, 0);
        model.params.load_json(doc)?;
        let bn = doc.get("batchnorm").and_then(Json::as_object).ok_or_else(|| bad("missing batchnorm"))?;
        for b in 1..model.bags.len() {
            let entry = bn.get(&model.bags[b].name).ok_or_else(|| bad("missing batchnorm entry"))?;
            let read = |key: &str| -> Result<Vec<f64>, ModelError> {
                let v: Vec<f64> = serde_json::from_value(entry.get(key).cloned().unwrap_or(Json::Null))
                    .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
                if v.len() != EMBED_DIM {
                    return Err(ModelError::Checkpoint(format!("{key} has {} values", v.len())));
                }
                Ok(v)
            };
            model.bn[b].running_mean = read("running_mean")?;
            model.bn[b].running_var = read("running_var")?;
        }
        Ok(model)
    }
}

fn column_block(x: &Tensor, from: usize, to: usize) -> Tensor {
    let w = to - from;
    let mut out = Tensor::zeros(x.rows, w);
    for r in 0..x.rows {
        out.row_mut(r).copy_from_slice(&x.row(r)[from..to]);
    }
    out
}

#[derive(Debug, Clone)]
struct Instance<'o> {
    obj: &'o ObsObject,
    /// Index of the observation in the batch.
    obs: usize,
    /// Path to this object (empty for the root).
    prefix: FeaturePath,
    /// Segment of child instances for each of the bag's set features, in
    /// the order of `Bag::children`; `None` while the set is unobserved.
    sets: Vec<Option<(usize, usize)>>,
}

/// Output of [`Model::forward`] for a batch.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Root embeddings, one row per observation.
    pub z: Var,
    /// Class logits.
    pub logits: Var,
    pub value: Var,
    /// Terminal potentials A_t.
    pub terminal: Var,
    potentials: Var,
    pub class_probs: Tensor,
    pub values: Vec<f64>,
    pub trees: Vec<PolicyTree>,
    pub bn_stats: Vec<Option<BatchStats>>,
}

impl Forward {
    /// Most probable class; ties go to the lowest index.
    pub fn prediction(&self, i: usize) -> usize {
        argmax(self.class_probs.row(i))
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Embeddings of one observation: the root `z` and every object below it.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTree {
    pub root: Vec<f64>,
    pub objects: Vec<(FeaturePath, Vec<f64>)>,
}
