//! JSON encoding of extended reals: finite values as numbers, `±∞` as the
//! strings `"inf"` / `"-inf"`. NaN is rejected.

use serde::de::Error as _;
use serde::ser::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Repr<'a> {
    Num(f64),
    Str(std::borrow::Cow<'a, str>),
}

fn to_repr(v: f64) -> Result<Repr<'static>, &'static str> {
    if v.is_nan() {
        Err("NaN cannot be serialized")
    } else if v == f64::INFINITY {
        Ok(Repr::Str("inf".into()))
    } else if v == f64::NEG_INFINITY {
        Ok(Repr::Str("-inf".into()))
    } else {
        Ok(Repr::Num(v))
    }
}

fn from_repr(r: Repr<'_>) -> Result<f64, String> {
    match r {
        Repr::Num(v) => Ok(v),
        Repr::Str(s) => match s.as_ref() {
            "inf" | "+inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            other => Err(format!("expected a number or \"inf\", found {other:?}")),
        },
    }
}

/// Newtype usable inside containers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Ext(pub f64);

impl Serialize for Ext {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        to_repr(self.0).map_err(S::Error::custom)?.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Ext {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        from_repr(Repr::deserialize(d)?)
            .map(Ext)
            .map_err(D::Error::custom)
    }
}

pub(crate) fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    Ext(*v).serialize(s)
}

pub(crate) fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ext::deserialize(d).map(|e| e.0)
}

pub(crate) mod option {
    use super::Ext;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub(crate) fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.map(Ext).serialize(s)
    }

    pub(crate) fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(Option::<Ext>::deserialize(d)?.map(|e| e.0))
    }
}

pub(crate) mod vec {
    use super::Ext;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub(crate) fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().copied().map(Ext).collect::<Vec<_>>().serialize(s)
    }

    pub(crate) fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Ext>::deserialize(d)?
            .into_iter()
            .map(|e| e.0)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encodes_infinities_as_strings() {
        assert_eq!(
            serde_json::to_string(&Ext(f64::INFINITY)).unwrap(),
            "\"inf\""
        );
        assert_eq!(serde_json::to_string(&Ext(-2.5)).unwrap(), "-2.5");
        let back: Ext = serde_json::from_str("\"inf\"").unwrap();
        assert_eq!(back.0, f64::INFINITY);
        let int: Ext = serde_json::from_str("3").unwrap();
        assert_eq!(int.0, 3.0);
        assert!(serde_json::to_string(&Ext(f64::NAN)).is_err());
        assert!(serde_json::from_str::<Ext>("\"nan\"").is_err());
    }
}
