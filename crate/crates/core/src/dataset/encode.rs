//! Fixed-width real encodings of feature values.

use crate::schema::{FeatureSpec, FeatureType};
use crate::EMBED_DIM;

use super::{DataError, RealStats, Value};

/// Number of hash bins of the character tri-gram histogram.
pub const TRIGRAM_BINS: usize = 13;

const START: u8 = b'^';
const END: u8 = b'$';

#[inline]
fn trigram_bin(c0: u8, c1: u8, c2: u8) -> usize {
    ((c0 as u32 * 31 * 31 + c1 as u32 * 31 + c2 as u32) % TRIGRAM_BINS as u32) as usize
}

/// L1-normalized histogram of hashed byte tri-grams of `^s$`.
/// The empty string has no tri-grams and maps to the zero vector.
pub fn trigram_histogram(s: &str) -> [f64; TRIGRAM_BINS] {
    let mut out = [0.0; TRIGRAM_BINS];
    trigram_into(s, &mut out);
    out
}

fn trigram_into(s: &str, out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    if s.is_empty() {
        return;
    }
    let mut wrapped = Vec::with_capacity(s.len() + 2);
    wrapped.push(START);
    wrapped.extend_from_slice(s.as_bytes());
    wrapped.push(END);
    let windows = wrapped.windows(3);
    let n = windows.len() as f64;
    for w in windows {
        out[trigram_bin(w[0], w[1], w[2])] += 1.0;
    }
    out.iter_mut().for_each(|x| *x /= n);
}

/// Width of a non-set feature's encoding. Sets are encoded by the model with
/// an embedding of [`EMBED_DIM`] values.
pub fn encoded_dim(ftype: &FeatureType) -> usize {
    match ftype {
        FeatureType::Real => 1,
        FeatureType::Categorical(cats) => cats.len(),
        FeatureType::Text => TRIGRAM_BINS,
        FeatureType::Set(_) => EMBED_DIM,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFeature {
    pub vec: Vec<f64>,
    pub mask: f64,
}

/// Writes the encoding of an observed non-set value into `out`, which must be
/// `encoded_dim` long. Zero-variance reals encode as 0.
pub fn encode_into(ftype: &FeatureType, value: &Value, stats: Option<RealStats>, out: &mut [f64]) -> Result<(), DataError> {
    match (ftype, value) {
        (FeatureType::Real, Value::Real(x)) => {
            let s = stats.unwrap_or_default();
            out[0] = if s.std > 0.0 { (x - s.mean) / s.std } else { 0.0 };
        }
        (FeatureType::Categorical(cats), Value::Cat(i)) if *i < cats.len() => {
            out.iter_mut().for_each(|x| *x = 0.0);
            out[*i] = 1.0;
        }
        (FeatureType::Text, Value::Text(s)) => trigram_into(s, out),
        (FeatureType::Set(_), Value::Set(_)) => out.iter_mut().for_each(|x| *x = 0.0),
        (t, _) => return Err(DataError::VariantMismatch(t.tag())),
    }
    Ok(())
}

/// Encodes an optional value: observed values get mask 1, absent ones a zero
/// vector of the same width and mask 0. For sets the vector is a zero
/// placeholder; the model fills it with the aggregated embedding and the
/// environment supplies the fractional mask.
pub fn encode_feature(spec: &FeatureSpec, value: Option<&Value>, stats: Option<RealStats>) -> Result<EncodedFeature, DataError> {
    let mut vec = vec![0.0; encoded_dim(&spec.ftype)];
    match value {
        Some(v) => {
            encode_into(&spec.ftype, v, stats, &mut vec)?;
            Ok(EncodedFeature { vec, mask: 1.0 })
        }
        None => Ok(EncodedFeature { vec, mask: 0.0 }),
    }
}
