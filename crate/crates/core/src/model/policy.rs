use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::log_softmax_rows;
use crate::autodiff::Tensor;
use crate::env::Action;
use crate::schema::FeaturePath;

use super::ModelError;

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyOption {
    Leaf(Action),
    /// Descend into the decision node with this index.
    Descend(usize),
}

/// One local distribution of the hierarchical softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNode {
    /// The set this node descends into; `None` at the root.
    pub set: Option<FeaturePath>,
    pub options: Vec<PolicyOption>,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// Indices of the options' scores in the model's flat potential vector.
    pub(crate) potentials: Vec<usize>,
}

impl PolicyNode {
    pub fn option_label(&self, i: usize, tree: &PolicyTree) -> String {
        match &self.options[i] {
            PolicyOption::Leaf(a) => a.to_string(),
            PolicyOption::Descend(n) => match &tree.nodes[*n].set {
                Some(p) => format!("{p}/*"),
                None => "*".to_string(),
            },
        }
    }
}

/// Decision tree over the legal actions of one observation. An action's
/// probability is the product of the local probabilities on its path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolicyTree {
    pub nodes: Vec<PolicyNode>,
    pub root: usize,
    parent: Vec<Option<(usize, usize)>>,
    leaves: HashMap<Action, (usize, usize)>,
}

impl PolicyTree {
    pub(crate) fn push_node(&mut self, set: FeaturePath, options: Vec<(PolicyOption, usize)>) -> usize {
        self.push(Some(set), options)
    }

    /// Adds the root and computes every node's local distribution from the
    /// potential values.
    pub(crate) fn push_root(&mut self, options: Vec<(PolicyOption, usize)>, potentials: &[f64]) {
        self.root = self.push(None, options);
        for node in &mut self.nodes {
            let scores: Vec<f64> = node.potentials.iter().map(|&i| potentials[i]).collect();
            let lp = log_softmax_rows(&Tensor::row_vector(scores)).data;
            node.probs = lp.iter().map(|l| l.exp()).collect();
            node.log_probs = lp;
        }
    }

    /// Builds a tree from explicit local scores, for tests and tools.
    /// `spec[0]` is the root; a `Descend(j)` must point to a later entry.
    pub fn from_scores(spec: Vec<(Option<FeaturePath>, Vec<(PolicyOption, f64)>)>) -> PolicyTree {
        let mut flat = Vec::new();
        let mut tree = PolicyTree::default();
        let mut ids = vec![0; spec.len()];
        for (i, (set, opts)) in spec.into_iter().enumerate().rev() {
            let options: Vec<(PolicyOption, usize)> = opts
                .into_iter()
                .map(|(o, s)| {
                    flat.push(s);
                    let o = match o {
                        PolicyOption::Descend(j) => PolicyOption::Descend(ids[j]),
                        leaf => leaf,
                    };
                    (o, flat.len() - 1)
                })
                .collect();
            if i == 0 {
                tree.push_root(options, &flat);
            } else {
                ids[i] = tree.push(set, options);
            }
        }
        tree
    }

    fn push(&mut self, set: Option<FeaturePath>, options: Vec<(PolicyOption, usize)>) -> usize {
        let id = self.nodes.len();
        self.parent.push(None);
        let mut node = PolicyNode { set, options: Vec::new(), probs: Vec::new(), log_probs: Vec::new(), potentials: Vec::new() };
        for (j, (opt, pot)) in options.into_iter().enumerate() {
            match &opt {
                PolicyOption::Leaf(a) => {
                    self.leaves.insert(a.clone(), (id, j));
                }
                PolicyOption::Descend(c) => self.parent[*c] = Some((id, j)),
            }
            node.options.push(opt);
            node.potentials.push(pot);
        }
        self.nodes.push(node);
        id
    }

    /// Every action reachable in the tree, in canonical order.
    pub fn leaves(&self) -> Vec<Action> {
        let mut out = Vec::new();
        self.collect(self.root, &mut out);
        out
    }

    fn collect(&self, node: usize, out: &mut Vec<Action>) {
        for o in &self.nodes[node].options {
            match o {
                PolicyOption::Leaf(a) => out.push(a.clone()),
                PolicyOption::Descend(c) => self.collect(*c, out),
            }
        }
    }

    /// `(node, option)` pairs from the root down to `action`.
    pub fn path_to(&self, action: &Action) -> Option<Vec<(usize, usize)>> {
        let mut at = *self.leaves.get(action)?;
        let mut path = vec![at];
        while let Some(p) = self.parent[at.0] {
            path.push(p);
            at = p;
        }
        path.reverse();
        Some(path)
    }
}

/// Samples one option per node from the root down. Returns the action and
/// the sum of log probabilities along the path.
pub fn sample_action<R: Rng + ?Sized>(tree: &PolicyTree, rng: &mut R) -> (Action, f64) {
    let mut node = tree.root;
    let mut logp = 0.0;
    loop {
        let n = &tree.nodes[node];
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = n.probs.len() - 1;
        for (i, p) in n.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        // Never land on a zero-probability option through rounding at the tail.
        while n.probs[pick] == 0.0 && pick > 0 {
            pick -= 1;
        }
        logp += n.log_probs[pick];
        match &n.options[pick] {
            PolicyOption::Leaf(a) => return (a.clone(), logp),
            PolicyOption::Descend(c) => node = *c,
        }
    }
}

pub fn action_logprob(tree: &PolicyTree, action: &Action) -> Result<f64, ModelError> {
    let path = tree.path_to(action).ok_or_else(|| ModelError::NotInTree(action.to_string()))?;
    Ok(path.iter().map(|&(n, o)| tree.nodes[n].log_probs[o]).sum())
}

/// Descends through the locally most probable option; ties go to the
/// earliest option in canonical order.
pub fn greedy_action(tree: &PolicyTree) -> Action {
    let mut node = tree.root;
    loop {
        let n = &tree.nodes[node];
        let pick = super::argmax(&n.probs);
        match &n.options[pick] {
            PolicyOption::Leaf(a) => return a.clone(),
            PolicyOption::Descend(c) => node = *c,
        }
    }
}
