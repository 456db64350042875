//! Dataset schemas: typed, costed trees of feature specifications.
//!
//! A schema document is JSON. An object schema maps feature names to specs,
//! and the top level names the classes:
//!
//! ```json
//! {"classes": ["young", "old"],
//!  "root": {"reputation": {"type": "real", "cost": 0.1},
//!           "posts": {"type": "set", "cost": 2.0,
//!                     "schema": {"title": {"type": "text", "cost": 0.5}}}}}
//! ```
//!
//! Feature order in the document is significant: it fixes encoding layout and
//! the canonical action order.

use std::collections::HashSet;
use std::fmt;

use serde::de::{self, Deserializer, MapAccess, SeqAccess, Visitor};
use serde::Deserialize;
use serde_json::{json, Map, Value as Json};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SchemaError {
    #[error("malformed schema document: {0}")]
    Malformed(String),
    #[error("duplicate feature name `{0}`")]
    DuplicateFeature(String),
    #[error("feature `{feature}` has negative cost {cost}")]
    NegativeCost { feature: String, cost: f64 },
    #[error("feature `{feature}` has unknown type tag `{tag}`")]
    UnknownType { feature: String, tag: String },
    #[error("set feature `{0}` has no child schema")]
    MissingChildSchema(String),
    #[error("categorical feature `{0}` must declare at least one distinct category")]
    BadCategories(String),
    #[error("a schema needs at least two distinct class names")]
    BadClasses,
}

#[derive(Debug, Error, PartialEq)]
pub enum PathError {
    #[error("empty path addresses the root, not a feature")]
    Empty,
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("cannot descend through non-set feature `{0}`")]
    NotASet(String),
    #[error("path ends on an object of set `{0}`, not on a feature")]
    ObjectAddress(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureType {
    Real,
    Categorical(Vec<String>),
    Text,
    Set(Box<ObjectSchema>),
}

impl FeatureType {
    pub fn tag(&self) -> &'static str {
        match self {
            FeatureType::Real => "real",
            FeatureType::Categorical(_) => "cat",
            FeatureType::Text => "text",
            FeatureType::Set(_) => "set",
        }
    }

    pub fn child_schema(&self) -> Option<&ObjectSchema> {
        match self {
            FeatureType::Set(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpec {
    pub name: String,
    pub ftype: FeatureType,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObjectSchema {
    pub features: Vec<FeatureSpec>,
}

impl ObjectSchema {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn feature(&self, name: &str) -> Option<&FeatureSpec> {
        self.features.iter().find(|f| f.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub root: ObjectSchema,
    pub class_names: Vec<String>,
}

impl Schema {
    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    /// Depth of the tree counting the root object as level 1.
    pub fn depth(&self) -> usize {
        fn go(o: &ObjectSchema) -> usize {
            1 + o
                .features
                .iter()
                .filter_map(|f| f.ftype.child_schema())
                .map(go)
                .max()
                .unwrap_or(0)
        }
        go(&self.root)
    }

    pub fn resolve_path(&self, path: &FeaturePath) -> Result<&FeatureSpec, PathError> {
        let (last, init) = path.steps.split_last().ok_or(PathError::Empty)?;
        let mut obj = &self.root;
        for step in init {
            let spec = obj
                .feature(&step.name)
                .ok_or_else(|| PathError::UnknownFeature(step.name.clone()))?;
            obj = spec
                .ftype
                .child_schema()
                .ok_or_else(|| PathError::NotASet(step.name.clone()))?;
        }
        let spec = obj
            .feature(&last.name)
            .ok_or_else(|| PathError::UnknownFeature(last.name.clone()))?;
        if last.index.is_some() {
            return Err(match spec.ftype {
                FeatureType::Set(_) => PathError::ObjectAddress(last.name.clone()),
                _ => PathError::NotASet(last.name.clone()),
            });
        }
        Ok(spec)
    }

    pub fn feature_cost(&self, path: &FeaturePath) -> Result<f64, PathError> {
        self.resolve_path(path).map(|s| s.cost)
    }

    pub fn parse(text: &str) -> Result<Schema, SchemaError> {
        parse_schema(text)
    }

    pub fn to_json(&self) -> Json {
        json!({
            "classes": self.class_names,
            "root": object_to_json(&self.root),
        })
    }

    pub fn serialize(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("schema serializes")
    }
}

/// One step of a [`FeaturePath`]: a feature name, plus the object index when
/// the step descends through a set into one of its objects.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PathStep {
    pub name: String,
    pub index: Option<usize>,
}

/// Canonical address of a node in a schema or an observation tree.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct FeaturePath {
    pub steps: Vec<PathStep>,
}

impl FeaturePath {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn feature(name: &str) -> Self {
        FeaturePath::new().then(name, None)
    }

    pub fn then(mut self, name: &str, index: Option<usize>) -> Self {
        self.steps.push(PathStep { name: name.to_string(), index });
        self
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Parses the display form, e.g. `posts[3]/title`.
    pub fn parse(s: &str) -> Result<Self, PathError> {
        if s.is_empty() {
            return Err(PathError::Empty);
        }
        let mut steps = Vec::new();
        for part in s.split('/') {
            let (name, index) = match part.strip_suffix(']').and_then(|p| p.split_once('[')) {
                Some((n, i)) => {
                    let idx = i.parse().map_err(|_| PathError::UnknownFeature(part.to_string()))?;
                    (n, Some(idx))
                }
                None => (part, None),
            };
            if name.is_empty() {
                return Err(PathError::UnknownFeature(part.to_string()));
            }
            steps.push(PathStep { name: name.to_string(), index });
        }
        Ok(FeaturePath { steps })
    }
}

impl fmt::Display for FeaturePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.steps.iter().enumerate() {
            if i > 0 {
                f.write_str("/")?;
            }
            f.write_str(&s.name)?;
            if let Some(idx) = s.index {
                write!(f, "[{idx}]")?;
            }
        }
        Ok(())
    }
}

fn object_to_json(obj: &ObjectSchema) -> Json {
    let mut map = Map::new();
    for f in &obj.features {
        let mut spec = Map::new();
        spec.insert("type".into(), json!(f.ftype.tag()));
        spec.insert("cost".into(), json!(f.cost));
        match &f.ftype {
            FeatureType::Categorical(cats) => {
                spec.insert("categories".into(), json!(cats));
            }
            FeatureType::Set(child) => {
                spec.insert("schema".into(), object_to_json(child));
            }
            FeatureType::Real | FeatureType::Text => {}
        }
        map.insert(f.name.clone(), Json::Object(spec));
    }
    Json::Object(map)
}

/// JSON tree that keeps object entries in document order, duplicates included,
/// so that duplicate feature names can be reported instead of silently merged.
#[derive(Debug, Clone)]
enum Raw {
    Null,
    Bool,
    Num(f64),
    Str(String),
    Arr(Vec<Raw>),
    Obj(Vec<(String, Raw)>),
}

impl Raw {
    fn kind(&self) -> &'static str {
        match self {
            Raw::Null => "null",
            Raw::Bool => "bool",
            Raw::Num(_) => "number",
            Raw::Str(_) => "string",
            Raw::Arr(_) => "array",
            Raw::Obj(_) => "object",
        }
    }

    fn get(&self, key: &str) -> Option<&Raw> {
        match self {
            Raw::Obj(entries) => entries.iter().find(|(k, _)| k == key).map(|(_, v)| v),
            _ => None,
        }
    }
}

impl<'de> Deserialize<'de> for Raw {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct RawVisitor;
        impl<'de> Visitor<'de> for RawVisitor {
            type Value = Raw;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("any JSON value")
            }
            fn visit_unit<E: de::Error>(self) -> Result<Raw, E> {
                Ok(Raw::Null)
            }
            fn visit_bool<E: de::Error>(self, _: bool) -> Result<Raw, E> {
                Ok(Raw::Bool)
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Raw, E> {
                Ok(Raw::Num(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Raw, E> {
                Ok(Raw::Num(v as f64))
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Raw, E> {
                Ok(Raw::Num(v))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Raw, E> {
                Ok(Raw::Str(v.to_string()))
            }
            fn visit_string<E: de::Error>(self, v: String) -> Result<Raw, E> {
                Ok(Raw::Str(v))
            }
            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Raw, A::Error> {
                let mut out = Vec::new();
                while let Some(v) = seq.next_element()? {
                    out.push(v);
                }
                Ok(Raw::Arr(out))
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Raw, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Raw>()? {
                    out.push((k, v));
                }
                Ok(Raw::Obj(out))
            }
        }
        d.deserialize_any(RawVisitor)
    }
}

pub fn parse_schema(text: &str) -> Result<Schema, SchemaError> {
    let raw: Raw = serde_json::from_str(text).map_err(|e| SchemaError::Malformed(e.to_string()))?;
    if !matches!(raw, Raw::Obj(_)) {
        return Err(SchemaError::Malformed(format!("top level must be an object, got {}", raw.kind())));
    }
    let classes = match raw.get("classes") {
        Some(Raw::Arr(items)) => items
            .iter()
            .map(|c| match c {
                Raw::Str(s) => Ok(s.clone()),
                other => Err(SchemaError::Malformed(format!("class names must be strings, got {}", other.kind()))),
            })
            .collect::<Result<Vec<_>, _>>()?,
        Some(other) => return Err(SchemaError::Malformed(format!("`classes` must be an array, got {}", other.kind()))),
        None => return Err(SchemaError::Malformed("missing `classes`".into())),
    };
    let distinct: HashSet<&String> = classes.iter().collect();
    if classes.len() < 2 || distinct.len() != classes.len() {
        return Err(SchemaError::BadClasses);
    }
    let root = match raw.get("root") {
        Some(r) => parse_object(r)?,
        None => return Err(SchemaError::Malformed("missing `root`".into())),
    };
    Ok(Schema { root, class_names: classes })
}

fn parse_object(raw: &Raw) -> Result<ObjectSchema, SchemaError> {
    let Raw::Obj(entries) = raw else {
        return Err(SchemaError::Malformed(format!("object schema must be an object, got {}", raw.kind())));
    };
    let mut seen = HashSet::new();
    let mut features = Vec::with_capacity(entries.len());
    for (name, spec) in entries {
        if !seen.insert(name.as_str()) {
            return Err(SchemaError::DuplicateFeature(name.clone()));
        }
        features.push(parse_feature(name, spec)?);
    }
    Ok(ObjectSchema { features })
}

fn parse_feature(name: &str, spec: &Raw) -> Result<FeatureSpec, SchemaError> {
    if !matches!(spec, Raw::Obj(_)) {
        return Err(SchemaError::Malformed(format!("spec of `{name}` must be an object")));
    }
    let cost = match spec.get("cost") {
        Some(Raw::Num(c)) => *c,
        Some(other) => return Err(SchemaError::Malformed(format!("cost of `{name}` must be a number, got {}", other.kind()))),
        None => return Err(SchemaError::Malformed(format!("feature `{name}` has no cost"))),
    };
    if cost < 0.0 {
        return Err(SchemaError::NegativeCost { feature: name.to_string(), cost });
    }
    let tag = match spec.get("type") {
        Some(Raw::Str(t)) => t.as_str(),
        Some(other) => return Err(SchemaError::Malformed(format!("type of `{name}` must be a string, got {}", other.kind()))),
        None => return Err(SchemaError::Malformed(format!("feature `{name}` has no type"))),
    };
    let ftype = match tag {
        "real" => FeatureType::Real,
        "text" => FeatureType::Text,
        "cat" => {
            let cats = match spec.get("categories") {
                Some(Raw::Arr(items)) => items
                    .iter()
                    .map(|c| match c {
                        Raw::Str(s) => Ok(s.clone()),
                        _ => Err(SchemaError::BadCategories(name.to_string())),
                    })
                    .collect::<Result<Vec<_>, _>>()?,
                _ => return Err(SchemaError::BadCategories(name.to_string())),
            };
            let distinct: HashSet<&String> = cats.iter().collect();
            if cats.is_empty() || distinct.len() != cats.len() {
                return Err(SchemaError::BadCategories(name.to_string()));
            }
            FeatureType::Categorical(cats)
        }
        "set" => match spec.get("schema") {
            Some(child) => FeatureType::Set(Box::new(parse_object(child)?)),
            None => return Err(SchemaError::MissingChildSchema(name.to_string())),
        },
        other => {
            return Err(SchemaError::UnknownType { feature: name.to_string(), tag: other.to_string() });
        }
    };
    Ok(FeatureSpec { name: name.to_string(), ftype, cost })
}
