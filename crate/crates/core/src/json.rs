//! Fixed-precision float serialization for the JSON outputs.
//!
//! Every float written by the tool is rendered with six decimal places.
//! These helpers only work with `serde_json`.

use serde::ser::Error as _;
use serde::{Serialize, Serializer};
use serde_json::value::RawValue;

fn raw(v: f64) -> Result<Box<RawValue>, String> {
    if !v.is_finite() {
        return Err(format!("cannot serialize non-finite float {v}"));
    }
    let mut text = format!("{v:.6}");
    if text == "-0.000000" {
        text.remove(0);
    }
    RawValue::from_string(text).map_err(|e| e.to_string())
}

pub fn f6<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    raw(*v).map_err(S::Error::custom)?.serialize(s)
}

pub fn opt_f6<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(v) => f6(v, s),
        None => s.serialize_none(),
    }
}

pub fn vec_f6<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
    let items: Result<Vec<_>, _> = v.iter().map(|x| raw(*x)).collect();
    items.map_err(S::Error::custom)?.serialize(s)
}

/// A float that serializes with six decimals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fixed6(pub f64);

impl Serialize for Fixed6 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        f6(&self.0, s)
    }
}

/// Box corners as a six-decimal array.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box6(pub [f64; 4]);

impl Serialize for Box6 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        vec_f6(&self.0, s)
    }
}
