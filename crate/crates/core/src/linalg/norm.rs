use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, Mul};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NormKind {
    L1,
    L2,
    LInf,
}

impl NormKind {
    pub const ALL: [NormKind; 3] = [NormKind::L1, NormKind::L2, NormKind::LInf];

    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::L1 => "L1",
            NormKind::L2 => "L2",
            NormKind::LInf => "LInf",
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(NormKind::L1),
            "l2" => Ok(NormKind::L2),
            "linf" | "l_inf" | "inf" => Ok(NormKind::LInf),
            _ => Err(Error::InvalidParam(format!("unknown norm '{s}'"))),
        }
    }
}

/// `‖x‖_p` for p in {1, 2, ∞}.
pub fn vector_norm(x: &[f64], kind: NormKind) -> f64 {
    match kind {
        NormKind::L1 => x.iter().map(|v| v.abs()).sum(),
        NormKind::L2 => x.iter().map(|v| v * v).sum::<f64>().sqrt(),
        NormKind::LInf => x.iter().fold(0.0f64, |m, v| m.max(v.abs())),
    }
}

/// Nonnegative real or `+∞`.
///
/// `0 · ∞` is taken to be `0`: a zero factor makes the composed map constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ExtendedReal {
    Finite(f64),
    Infinite,
}

impl ExtendedReal {
    pub const ZERO: ExtendedReal = ExtendedReal::Finite(0.0);
    pub const ONE: ExtendedReal = ExtendedReal::Finite(1.0);

    pub fn new(v: f64) -> Result<Self> {
        if v.is_nan() || v < 0.0 {
            return Err(Error::InvalidParam(format!(
                "extended real must be >= 0, got {v}"
            )));
        }
        Ok(Self::from_f64(v))
    }

    /// Maps `+∞` to `Infinite`; negative and NaN inputs are a logic error.
    pub(crate) fn from_f64(v: f64) -> Self {
        debug_assert!(v >= 0.0, "negative extended real {v}");
        if v.is_infinite() {
            ExtendedReal::Infinite
        } else {
            ExtendedReal::Finite(v)
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, ExtendedReal::Finite(_))
    }

    pub fn to_f64(self) -> f64 {
        match self {
            ExtendedReal::Finite(v) => v,
            ExtendedReal::Infinite => f64::INFINITY,
        }
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            ExtendedReal::Finite(v) => Some(v),
            ExtendedReal::Infinite => None,
        }
    }
}

impl Mul for ExtendedReal {
    type Output = ExtendedReal;

    fn mul(self, rhs: ExtendedReal) -> ExtendedReal {
        use ExtendedReal::*;
        match (self, rhs) {
            (Finite(a), Finite(b)) => ExtendedReal::from_f64(a * b),
            (Finite(a), Infinite) | (Infinite, Finite(a)) if a == 0.0 => Finite(0.0),
            _ => Infinite,
        }
    }
}

impl Mul<f64> for ExtendedReal {
    type Output = ExtendedReal;

    fn mul(self, rhs: f64) -> ExtendedReal {
        self * ExtendedReal::from_f64(rhs.abs())
    }
}

impl Add for ExtendedReal {
    type Output = ExtendedReal;

    fn add(self, rhs: ExtendedReal) -> ExtendedReal {
        match (self, rhs) {
            (ExtendedReal::Finite(a), ExtendedReal::Finite(b)) => ExtendedReal::from_f64(a + b),
            _ => ExtendedReal::Infinite,
        }
    }
}

impl Add<f64> for ExtendedReal {
    type Output = ExtendedReal;

    fn add(self, rhs: f64) -> ExtendedReal {
        self + ExtendedReal::from_f64(rhs)
    }
}

impl std::iter::Product for ExtendedReal {
    fn product<I: Iterator<Item = ExtendedReal>>(iter: I) -> Self {
        iter.fold(ExtendedReal::ONE, |acc, x| acc * x)
    }
}

impl PartialOrd for ExtendedReal {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        self.to_f64().partial_cmp(&other.to_f64())
    }
}

impl fmt::Display for ExtendedReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtendedReal::Finite(v) => write!(f, "{v}"),
            ExtendedReal::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for ExtendedReal {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        serialize_real(&self.to_f64(), s)
    }
}

impl<'de> Deserialize<'de> for ExtendedReal {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = deserialize_real(d)?;
        ExtendedReal::new(v).map_err(serde::de::Error::custom)
    }
}

/// Writes finite reals as JSON numbers and infinities as the strings
/// `"inf"` / `"-inf"` (JSON has no literal for them).
pub fn serialize_real<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

pub fn deserialize_real<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }
    match Repr::deserialize(d)? {
        Repr::Num(v) => Ok(v),
        Repr::Text(t) => t
            .parse::<f64>()
            .map_err(|_| serde::de::Error::custom(format!("not a real: {t}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norms_of_three_four() {
        assert_eq!(vector_norm(&[3.0, 4.0], NormKind::L2), 5.0);
        assert_eq!(vector_norm(&[3.0, -4.0], NormKind::L1), 7.0);
        assert_eq!(vector_norm(&[3.0, -4.0], NormKind::LInf), 4.0);
    }

    #[test]
    fn infinity_absorbs_positive_factors() {
        let inf = ExtendedReal::Infinite;
        assert_eq!(inf * ExtendedReal::Finite(3.0), inf);
        assert_eq!(ExtendedReal::ONE + inf, inf);
        assert_eq!(inf * ExtendedReal::ZERO, ExtendedReal::ZERO);
        assert!(ExtendedReal::new(-1.0).is_err());
    }

    #[test]
    fn json_round_trip() {
        let v = vec![ExtendedReal::Finite(2.5), ExtendedReal::Infinite];
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(s, r#"[2.5,"inf"]"#);
        let back: Vec<ExtendedReal> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
    }
}
