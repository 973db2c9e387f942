//! JSON has no infinities; these helpers spell them `"inf"` / `"-inf"`.

use serde::de::{self, Deserializer};
use serde::ser::{SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Repr {
    Num(f64),
    Text(String),
}

fn to_repr(v: f64) -> Repr {
    if v == f64::INFINITY {
        Repr::Text("inf".into())
    } else if v == f64::NEG_INFINITY {
        Repr::Text("-inf".into())
    } else if v.is_nan() {
        Repr::Text("nan".into())
    } else {
        Repr::Num(v)
    }
}

fn from_repr<E: de::Error>(r: Repr) -> Result<f64, E> {
    match r {
        Repr::Num(v) => Ok(v),
        Repr::Text(s) => match s.as_str() {
            "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
            "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
            "nan" => Ok(f64::NAN),
            other => Err(E::custom(format!("not a number: {other:?}"))),
        },
    }
}

/// `#[serde(with = "ext_f64")]` for a single float.
pub mod ext_f64 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }
}

/// `#[serde(with = "ext_bounds")]` for a list of `(lo, hi)` pairs.
pub mod ext_bounds {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[(f64, f64)], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for &(lo, hi) in v {
            seq.serialize_element(&(to_repr(lo), to_repr(hi)))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<(f64, f64)>, D::Error> {
        let raw: Vec<(Repr, Repr)> = Vec::deserialize(d)?;
        raw.into_iter()
            .map(|(a, b)| Ok((from_repr(a)?, from_repr(b)?)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use serde::{Deserialize, Serialize};

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Probe {
        #[serde(with = "super::ext_f64")]
        a: f64,
        #[serde(with = "super::ext_bounds")]
        b: Vec<(f64, f64)>,
    }

    #[test]
    fn infinities_round_trip() {
        let p = Probe {
            a: f64::NEG_INFINITY,
            b: vec![(0.0, 1.0), (f64::NEG_INFINITY, f64::INFINITY)],
        };
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, r#"{"a":"-inf","b":[[0.0,1.0],["-inf","inf"]]}"#);
        assert_eq!(serde_json::from_str::<Probe>(&s).unwrap(), p);
    }
}
