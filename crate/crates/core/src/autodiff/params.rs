use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value as Json};

use super::{AutodiffError, Tensor};

/// Index of a parameter in its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameters with their gradient accumulators.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.values.len());
        self.grads.push(Tensor::zeros(value.rows, value.cols));
        self.values.push(value);
        self.index.insert(name.clone(), id);
        self.names.push(name);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Versioned checkpoint document: parameter name -> shape + row-major values.
    pub fn to_json(&self) -> Json {
        let mut params = Map::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            params.insert(name.clone(), json!({"shape": [v.rows, v.cols], "data": v.data}));
        }
        json!({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "params": params})
    }

    /// Overwrites values from a checkpoint document. Every parameter of the
    /// store must be present with a matching shape.
    pub fn load_json(&mut self, doc: &Json) -> Result<(), AutodiffError> {
        let params = read_params(doc)?;
        for (i, name) in self.names.iter().enumerate() {
            let t = params.get(name).ok_or_else(|| AutodiffError::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.shape() != self.values[i].shape() {
                return Err(AutodiffError::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = t.clone();
        }
        Ok(())
    }

    /// Builds a store holding exactly the parameters of a checkpoint, in document order.
    pub fn from_json(doc: &Json) -> Result<ParamStore, AutodiffError> {
        let mut store = ParamStore::new();
        for (name, t) in read_params_ordered(doc)? {
            store.add(name, t);
        }
        Ok(store)
    }
}

pub const CHECKPOINT_FORMAT: &str = "cwcf-params";
pub const CHECKPOINT_VERSION: u64 = 1;

fn read_params(doc: &Json) -> Result<HashMap<String, Tensor>, AutodiffError> {
    Ok(read_params_ordered(doc)?.into_iter().collect())
}

fn read_params_ordered(doc: &Json) -> Result<Vec<(String, Tensor)>, AutodiffError> {
    let bad = |m: &str| AutodiffError::Checkpoint(m.to_string());
    if doc.get("format").and_then(Json::as_str) != Some(CHECKPOINT_FORMAT) {
        return Err(bad("not a parameter checkpoint"));
    }
    match doc.get("version").and_then(Json::as_u64) {
        Some(CHECKPOINT_VERSION) => {}
        Some(v) => return Err(AutodiffError::Checkpoint(format!("unsupported checkpoint version {v}"))),
        None => return Err(bad("missing version")),
    }
    let params = doc.get("params").and_then(Json::as_object).ok_or_else(|| bad("missing params"))?;
    params
        .iter()
        .map(|(name, p)| {
            let shape = p.get("shape").and_then(Json::as_array).ok_or_else(|| bad("missing shape"))?;
            let dims: Vec<usize> = shape.iter().filter_map(Json::as_u64).map(|d| d as usize).collect();
            if dims.len() != 2 {
                return Err(bad("shape must have two dimensions"));
            }
            let data: Vec<f64> = p
                .get("data")
                .and_then(Json::as_array)
                .ok_or_else(|| bad("missing data"))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| bad("non-numeric value")))
                .collect::<Result<_, _>>()?;
            Ok((name.clone(), Tensor::from_vec(dims[0], dims[1], data)?))
        })
        .collect()
}
