//! Samples, datasets, splits and per-position normalization statistics.

mod encode;
mod synth;

pub use encode::{encode_feature, encode_into, encoded_dim, trigram_histogram, EncodedFeature, TRIGRAM_BINS};
pub use synth::{generate_synthetic, majority_label, random_sample, SynthConfig};

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value as Json};
use thiserror::Error;

use crate::schema::{FeatureType, ObjectSchema, Schema};

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("line {line}: invalid JSON record: {msg}")]
    Json { line: usize, msg: String },
    #[error("line {line}: missing feature `{path}`")]
    MissingFeature { line: usize, path: String },
    #[error("line {line}: unexpected feature `{path}` not in schema")]
    UnknownFeature { line: usize, path: String },
    #[error("line {line}: feature `{path}` expected a {expected} value")]
    TypeMismatch { line: usize, path: String, expected: &'static str },
    #[error("line {line}: `{value}` is not a category of `{path}`")]
    UnknownCategory { line: usize, path: String, value: String },
    #[error("line {line}: label `{label}` is not a declared class")]
    UnknownLabel { line: usize, label: String },
    #[error("split of {requested} samples exceeds the {available} available")]
    SplitTooLarge { requested: usize, available: usize },
    #[error("degenerate synthetic config: {0}")]
    DegenerateConfig(String),
    #[error("value does not match feature type `{0}`")]
    VariantMismatch(&'static str),
}

/// A feature value. Categorical values hold the index of their symbol in the
/// schema's category list.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Real(f64),
    Cat(usize),
    Text(String),
    Set(Vec<ObjectInstance>),
}

impl Value {
    pub fn matches(&self, ftype: &FeatureType) -> bool {
        match (self, ftype) {
            (Value::Real(_), FeatureType::Real) | (Value::Text(_), FeatureType::Text) => true,
            (Value::Cat(i), FeatureType::Categorical(cats)) => *i < cats.len(),
            (Value::Set(objs), FeatureType::Set(child)) => objs.iter().all(|o| o.conforms(child)),
            _ => false,
        }
    }
}

/// A complete object: one value per feature of its object schema, in schema order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObjectInstance {
    pub values: Vec<Value>,
}

impl ObjectInstance {
    pub fn conforms(&self, schema: &ObjectSchema) -> bool {
        self.values.len() == schema.features.len()
            && self.values.iter().zip(&schema.features).all(|(v, f)| v.matches(&f.ftype))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub root: ObjectInstance,
    pub label: usize,
}

impl Sample {
    /// Sum of all node costs in the full tree, i.e. the price of observing everything.
    pub fn total_cost(&self, schema: &Schema) -> f64 {
        fn go(obj: &ObjectInstance, schema: &ObjectSchema) -> f64 {
            obj.values
                .iter()
                .zip(&schema.features)
                .map(|(v, f)| match (v, &f.ftype) {
                    (Value::Set(children), FeatureType::Set(child)) => {
                        f.cost + children.iter().map(|c| go(c, child)).sum::<f64>()
                    }
                    _ => f.cost,
                })
                .sum()
        }
        go(&self.root, &schema.root)
    }
}

/// Standardization statistics for one real-valued schema position.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RealStats {
    pub mean: f64,
    pub std: f64,
}

impl Default for RealStats {
    fn default() -> Self {
        RealStats { mean: 0.0, std: 1.0 }
    }
}

/// Normalization statistics laid out like the schema tree.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureNorm {
    Real(RealStats),
    Set(NormStats),
    None,
}

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub features: Vec<FeatureNorm>,
}

impl NormStats {
    /// Statistics over the given samples, pooling every object at a schema position.
    pub fn compute<'a>(schema: &ObjectSchema, samples: impl Iterator<Item = &'a Sample>) -> NormStats {
        let mut acc = Accum::new(schema);
        for s in samples {
            acc.add(&s.root);
        }
        acc.finish(schema)
    }

    pub fn real_positions(&self) -> usize {
        self.features
            .iter()
            .map(|f| match f {
                FeatureNorm::Real(_) => 1,
                FeatureNorm::Set(child) => child.real_positions(),
                FeatureNorm::None => 0,
            })
            .sum()
    }

    pub fn real(&self, feature: usize) -> Option<RealStats> {
        match self.features.get(feature) {
            Some(FeatureNorm::Real(s)) => Some(*s),
            _ => None,
        }
    }

    pub fn child(&self, feature: usize) -> Option<&NormStats> {
        match self.features.get(feature) {
            Some(FeatureNorm::Set(s)) => Some(s),
            _ => None,
        }
    }
}

enum AccumSlot {
    Real { n: usize, sum: f64, sum_sq: f64 },
    Set(Accum),
    None,
}

struct Accum {
    slots: Vec<AccumSlot>,
}

impl Accum {
    fn new(schema: &ObjectSchema) -> Self {
        let slots = schema
            .features
            .iter()
            .map(|f| match &f.ftype {
                FeatureType::Real => AccumSlot::Real { n: 0, sum: 0.0, sum_sq: 0.0 },
                FeatureType::Set(child) => AccumSlot::Set(Accum::new(child)),
                _ => AccumSlot::None,
            })
            .collect();
        Accum { slots }
    }

    fn add(&mut self, obj: &ObjectInstance) {
        for (slot, v) in self.slots.iter_mut().zip(&obj.values) {
            match (slot, v) {
                (AccumSlot::Real { n, sum, sum_sq }, Value::Real(x)) => {
                    *n += 1;
                    *sum += x;
                    *sum_sq += x * x;
                }
                (AccumSlot::Set(child), Value::Set(objs)) => objs.iter().for_each(|o| child.add(o)),
                _ => {}
            }
        }
    }

    fn finish(self, schema: &ObjectSchema) -> NormStats {
        let features = self
            .slots
            .into_iter()
            .zip(&schema.features)
            .map(|(slot, f)| match (slot, &f.ftype) {
                (AccumSlot::Real { n, sum, sum_sq }, _) => {
                    if n == 0 {
                        FeatureNorm::Real(RealStats::default())
                    } else {
                        let mean = sum / n as f64;
                        let var = (sum_sq / n as f64 - mean * mean).max(0.0);
                        FeatureNorm::Real(RealStats { mean, std: var.sqrt() })
                    }
                }
                (AccumSlot::Set(acc), FeatureType::Set(child)) => FeatureNorm::Set(acc.finish(child)),
                _ => FeatureNorm::None,
            })
            .collect();
        NormStats { features }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitTag {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub schema: Arc<Schema>,
    pub samples: Vec<Arc<Sample>>,
    pub split: Split,
    pub norm: NormStats,
}

impl Dataset {
    /// Wraps samples with every index in the training split.
    pub fn new(schema: Arc<Schema>, samples: Vec<Sample>) -> Dataset {
        let samples: Vec<Arc<Sample>> = samples.into_iter().map(Arc::new).collect();
        let split = Split { train: (0..samples.len()).collect(), ..Split::default() };
        let norm = NormStats::compute(&schema.root, samples.iter().map(|s| s.as_ref()));
        Dataset { schema, samples, split, norm }
    }

    pub fn indices(&self, tag: SplitTag) -> &[usize] {
        match tag {
            SplitTag::Train => &self.split.train,
            SplitTag::Val => &self.split.val,
            SplitTag::Test => &self.split.test,
        }
    }

    pub fn split_samples(&self, tag: SplitTag) -> impl Iterator<Item = &Arc<Sample>> + '_ {
        self.indices(tag).iter().map(move |&i| &self.samples[i])
    }

    /// Deterministic shuffle under `seed`, then partition into train/val/test.
    /// Normalization statistics are recomputed from the new training split.
    pub fn split(&self, counts: (usize, usize, usize), seed: u64) -> Result<Dataset, DataError> {
        let (n_train, n_val, n_test) = counts;
        let requested = n_train + n_val + n_test;
        if requested > self.samples.len() {
            return Err(DataError::SplitTooLarge { requested, available: self.samples.len() });
        }
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let split = Split {
            train: order[..n_train].to_vec(),
            val: order[n_train..n_train + n_val].to_vec(),
            test: order[n_train + n_val..requested].to_vec(),
        };
        let norm = NormStats::compute(&self.schema.root, split.train.iter().map(|&i| self.samples[i].as_ref()));
        Ok(Dataset { schema: self.schema.clone(), samples: self.samples.clone(), split, norm })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&sample_to_json(&self.schema, s).to_string());
            out.push('\n');
        }
        out
    }
}

pub fn split_dataset(dataset: &Dataset, counts: (usize, usize, usize), seed: u64) -> Result<Dataset, DataError> {
    dataset.split(counts, seed)
}

/// Parses a JSON-lines samples document against `schema`. All samples land in
/// the training split; use [`Dataset::split`] to partition.
pub fn load_dataset(schema: Arc<Schema>, text: &str) -> Result<Dataset, DataError> {
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        samples.push(parse_sample(&schema, line, i + 1)?);
    }
    Ok(Dataset::new(schema, samples))
}

pub fn parse_sample(schema: &Schema, line: &str, line_no: usize) -> Result<Sample, DataError> {
    let json: Json = serde_json::from_str(line).map_err(|e| DataError::Json { line: line_no, msg: e.to_string() })?;
    let label_name = json
        .get("label")
        .and_then(Json::as_str)
        .ok_or_else(|| DataError::Json { line: line_no, msg: "missing string `label`".into() })?;
    let label = schema
        .class_index(label_name)
        .ok_or_else(|| DataError::UnknownLabel { line: line_no, label: label_name.to_string() })?;
    let features = json
        .get("features")
        .ok_or_else(|| DataError::Json { line: line_no, msg: "missing `features`".into() })?;
    let root = parse_object(&schema.root, features, "", line_no)?;
    Ok(Sample { root, label })
}

fn parse_object(schema: &ObjectSchema, json: &Json, prefix: &str, line: usize) -> Result<ObjectInstance, DataError> {
    let map = json.as_object().ok_or_else(|| DataError::TypeMismatch {
        line,
        path: if prefix.is_empty() { "<root>".into() } else { prefix.to_string() },
        expected: "object",
    })?;
    let mut values = Vec::with_capacity(schema.features.len());
    for f in &schema.features {
        let path = if prefix.is_empty() { f.name.clone() } else { format!("{prefix}/{}", f.name) };
        let v = map.get(&f.name).ok_or_else(|| DataError::MissingFeature { line, path: path.clone() })?;
        let value = match &f.ftype {
            FeatureType::Real => Value::Real(v.as_f64().ok_or(DataError::TypeMismatch { line, path, expected: "real" })?),
            FeatureType::Text => {
                Value::Text(v.as_str().ok_or(DataError::TypeMismatch { line, path, expected: "text" })?.to_string())
            }
            FeatureType::Categorical(cats) => {
                let sym = v.as_str().ok_or_else(|| DataError::TypeMismatch { line, path: path.clone(), expected: "cat" })?;
                let idx = cats
                    .iter()
                    .position(|c| c == sym)
                    .ok_or_else(|| DataError::UnknownCategory { line, path, value: sym.to_string() })?;
                Value::Cat(idx)
            }
            FeatureType::Set(child) => {
                let arr = v.as_array().ok_or_else(|| DataError::TypeMismatch { line, path: path.clone(), expected: "set" })?;
                let objs = arr
                    .iter()
                    .enumerate()
                    .map(|(i, o)| parse_object(child, o, &format!("{path}[{i}]"), line))
                    .collect::<Result<Vec<_>, _>>()?;
                Value::Set(objs)
            }
        };
        values.push(value);
    }
    if let Some(extra) = map.keys().find(|k| schema.index_of(k).is_none()) {
        let path = if prefix.is_empty() { extra.clone() } else { format!("{prefix}/{extra}") };
        return Err(DataError::UnknownFeature { line, path });
    }
    Ok(ObjectInstance { values })
}

pub fn value_to_json(ftype: &FeatureType, v: &Value) -> Json {
    match (v, ftype) {
        (Value::Real(x), _) => json!(x),
        (Value::Text(s), _) => json!(s),
        (Value::Cat(i), FeatureType::Categorical(cats)) => json!(cats[*i]),
        (Value::Set(objs), FeatureType::Set(child)) => Json::Array(objs.iter().map(|o| object_to_json(child, o)).collect()),
        (Value::Cat(i), _) => json!(i),
        (Value::Set(_), _) => Json::Null,
    }
}

pub fn object_to_json(schema: &ObjectSchema, obj: &ObjectInstance) -> Json {
    let mut map = Map::new();
    for (f, v) in schema.features.iter().zip(&obj.values) {
        map.insert(f.name.clone(), value_to_json(&f.ftype, v));
    }
    Json::Object(map)
}

pub fn sample_to_json(schema: &Schema, sample: &Sample) -> Json {
    json!({
        "label": schema.class_names[sample.label],
        "features": object_to_json(&schema.root, &sample.root),
    })
}
