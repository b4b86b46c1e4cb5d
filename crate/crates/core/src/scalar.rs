//! Scalar abstraction for the numeric parts of the engine.
//!
//! Similarity search, reciprocal-path scoring and layout geometry are written
//! against [`Scalar`] so they run unchanged on `f32` or `f64`. Records that
//! cross a wire boundary (JSON payloads, graph files) are fixed to `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumCast};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// floating point: f32 or f64
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + NumCast
    + Sum
    + Default
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Cosine similarity of two equal-length vectors. A zero vector has
/// similarity 0 with everything.
pub fn cosine<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = S::zero();
    let mut na = S::zero();
    let mut nb = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot = dot + x * y;
        na = na + x * x;
        nb = nb + y * y;
    }
    if na == S::zero() || nb == S::zero() {
        return S::zero();
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Dot product; equals cosine when both inputs are unit length.
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Returns a unit-length copy, or the zero vector unchanged.
pub fn normalized<S: Scalar>(v: &[S]) -> Vec<S> {
    let norm = v.iter().map(|&x| x * x).sum::<S>().sqrt();
    if norm == S::zero() {
        return v.to_vec();
    }
    v.iter().map(|&x| x / norm).collect()
}

pub fn convert_vec<S: Scalar>(v: &[f64]) -> Vec<S> {
    v.iter().map(|&x| S::lit(x)).collect()
}
