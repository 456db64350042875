//! Synthetic sets-of-objects data with a majority-vote label.
//!
//! Schema: the root holds one costly set `items`; every item has a
//! categorical `signal` with one category per class and `distractors` random
//! text features. The label is the most frequent signal (ties go to the
//! lowest class index). Distractor texts carry no label information.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::schema::{FeatureSpec, FeatureType, ObjectSchema, Schema};

use super::{DataError, Dataset, ObjectInstance, Sample, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: usize,
    pub samples: usize,
    pub items_min: usize,
    pub items_max: usize,
    pub distractors: usize,
    pub set_cost: f64,
    pub signal_cost: f64,
    pub distractor_cost: f64,
    /// When set, the label is drawn uniformly first and signals are resampled
    /// until their majority agrees, which keeps classes balanced even when
    /// ties are possible.
    pub balanced: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 2,
            samples: 1000,
            items_min: 3,
            items_max: 5,
            distractors: 3,
            set_cost: 2.0,
            signal_cost: 1.0,
            distractor_cost: 1.0,
            balanced: true,
        }
    }
}

/// Most frequent category; ties resolve to the lowest index.
pub fn majority_label(signals: &[usize], classes: usize) -> usize {
    let mut counts = vec![0usize; classes];
    for &s in signals {
        counts[s] += 1;
    }
    let mut best = 0;
    for (k, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = k;
        }
    }
    best
}

fn synth_schema(cfg: &SynthConfig) -> Schema {
    let mut item = vec![FeatureSpec {
        name: "signal".into(),
        ftype: FeatureType::Categorical((0..cfg.classes).map(|k| format!("s{k}")).collect()),
        cost: cfg.signal_cost,
    }];
    item.extend((0..cfg.distractors).map(|d| FeatureSpec {
        name: format!("noise{d}"),
        ftype: FeatureType::Text,
        cost: cfg.distractor_cost,
    }));
    Schema {
        root: ObjectSchema {
            features: vec![FeatureSpec {
                name: "items".into(),
                ftype: FeatureType::Set(Box::new(ObjectSchema { features: item })),
                cost: cfg.set_cost,
            }],
        },
        class_names: (0..cfg.classes).map(|k| format!("c{k}")).collect(),
    }
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(4..=12);
    (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
}

pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<(Arc<Schema>, Dataset), DataError> {
    if cfg.samples == 0 {
        return Err(DataError::DegenerateConfig("zero samples".into()));
    }
    if cfg.items_max == 0 || cfg.items_min > cfg.items_max {
        return Err(DataError::DegenerateConfig(format!(
            "item range {}..={} is empty or zero",
            cfg.items_min, cfg.items_max
        )));
    }
    if cfg.classes < 2 {
        return Err(DataError::DegenerateConfig("need at least two classes".into()));
    }
    if [cfg.set_cost, cfg.signal_cost, cfg.distractor_cost].iter().any(|c| *c < 0.0) {
        return Err(DataError::DegenerateConfig("negative cost".into()));
    }
    let items_min = cfg.items_min.max(1);
    let schema = Arc::new(synth_schema(cfg));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let n = rng.gen_range(items_min..=cfg.items_max);
        let target = cfg.balanced.then(|| rng.gen_range(0..cfg.classes));
        let signals = loop {
            let s: Vec<usize> = (0..n).map(|_| rng.gen_range(0..cfg.classes)).collect();
            match target {
                Some(t) if majority_label(&s, cfg.classes) != t => continue,
                _ => break s,
            }
        };
        let label = majority_label(&signals, cfg.classes);
        let items = signals
            .iter()
            .map(|&s| {
                let mut values = vec![Value::Cat(s)];
                values.extend((0..cfg.distractors).map(|_| Value::Text(random_text(&mut rng))));
                ObjectInstance { values }
            })
            .collect();
        samples.push(Sample { root: ObjectInstance { values: vec![Value::Set(items)] }, label });
    }
    Ok((schema.clone(), Dataset::new(schema, samples)))
}

/// A random sample conforming to any schema: reals in [-3, 3), uniform
/// categories, short random texts and sets of `0..=max_items` objects.
pub fn random_sample<R: Rng + ?Sized>(schema: &Schema, rng: &mut R, max_items: usize) -> Sample {
    fn object<R: Rng + ?Sized>(schema: &ObjectSchema, rng: &mut R, max_items: usize) -> ObjectInstance {
        let values = schema
            .features
            .iter()
            .map(|f| match &f.ftype {
                FeatureType::Real => Value::Real(rng.gen_range(-3.0..3.0)),
                FeatureType::Categorical(c) => Value::Cat(rng.gen_range(0..c.len())),
                FeatureType::Text => {
                    let len = rng.gen_range(0..8);
                    Value::Text((0..len).map(|_| rng.gen_range(b'a'..=b'e') as char).collect())
                }
                FeatureType::Set(cs) => {
                    let n = rng.gen_range(0..=max_items);
                    Value::Set((0..n).map(|_| object(cs, rng, max_items)).collect())
                }
            })
            .collect();
        ObjectInstance { values }
    }
    Sample { root: object(&schema.root, rng, max_items), label: rng.gen_range(0..schema.class_count()) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_and_ties() {
        assert_eq!(majority_label(&[0, 0, 1], 2), 0);
        assert_eq!(majority_label(&[0, 1], 2), 0);
        assert_eq!(majority_label(&[1, 1, 0], 2), 1);
        assert_eq!(majority_label(&[2, 1, 2, 1], 3), 1);
    }

    #[test]
    fn labels_are_majorities_and_schema_is_depth_two_sets() {
        let cfg = SynthConfig { samples: 200, ..SynthConfig::default() };
        let (schema, ds) = generate_synthetic(&cfg, 7).unwrap();
        assert_eq!(schema.depth(), 2);
        for s in &ds.samples {
            assert!(s.root.conforms(&schema.root));
            let Value::Set(items) = &s.root.values[0] else { panic!() };
            assert!((3..=5).contains(&items.len()));
            let signals: Vec<usize> = items
                .iter()
                .map(|o| match o.values[0] {
                    Value::Cat(c) => c,
                    _ => panic!(),
                })
                .collect();
            assert_eq!(s.label, majority_label(&signals, 2));
        }
    }

    #[test]
    fn label_distribution_near_uniform() {
        for balanced in [true, false] {
            // Odd item counts rule out ties, so unbalanced generation is symmetric too.
            let cfg = SynthConfig { samples: 10_000, items_min: 3, items_max: 3, balanced, ..SynthConfig::default() };
            let (_, ds) = generate_synthetic(&cfg, 1).unwrap();
            let ones = ds.samples.iter().filter(|s| s.label == 1).count() as f64 / 10_000.0;
            assert!((ones - 0.5).abs() < 0.05, "balanced={balanced}: {ones}");
        }
        let cfg = SynthConfig { samples: 10_000, items_min: 2, items_max: 6, ..SynthConfig::default() };
        let (_, ds) = generate_synthetic(&cfg, 2).unwrap();
        let ones = ds.samples.iter().filter(|s| s.label == 1).count() as f64 / 10_000.0;
        assert!((ones - 0.5).abs() < 0.05, "{ones}");
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = SynthConfig { samples: 50, ..SynthConfig::default() };
        let a = generate_synthetic(&cfg, 9).unwrap().1;
        let b = generate_synthetic(&cfg, 9).unwrap().1;
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn degenerate_configs_rejected() {
        let zero = SynthConfig { samples: 0, ..SynthConfig::default() };
        assert!(generate_synthetic(&zero, 0).is_err());
        let no_items = SynthConfig { items_min: 0, items_max: 0, ..SynthConfig::default() };
        assert!(generate_synthetic(&no_items, 0).is_err());
    }
}
