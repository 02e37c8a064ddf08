//! CWE identifiers and the 25-weakness benchmark class list.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CweId(pub u32);

#[derive(Debug, Error, PartialEq, Eq)]
#[error("malformed CWE id `{0}` (expected CWE-<number>)")]
pub struct ParseCweError(pub String);

impl FromStr for CweId {
    type Err = ParseCweError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let digits = t
            .strip_prefix("CWE-")
            .or_else(|| t.strip_prefix("cwe-"))
            .unwrap_or(t);
        digits
            .parse::<u32>()
            .map(CweId)
            .map_err(|_| ParseCweError(s.to_string()))
    }
}

impl fmt::Display for CweId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CWE-{}", self.0)
    }
}

impl Serialize for CweId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CweId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The 25 weaknesses covered by the benchmark, in classifier-head order.
pub const CASTLE_CWES: [u32; 25] = [
    22, 78, 89, 125, 134, 190, 253, 327, 362, 369, 401, 415, 416, 476, 522, 617, 628, 674, 761,
    770, 787, 798, 822, 835, 843,
];

pub fn castle_classes() -> Vec<CweId> {
    CASTLE_CWES.iter().map(|&n| CweId(n)).collect()
}

/// Default rank table text (`CWE-id,rank` lines).
pub const DEFAULT_RANKS: &str = include_str!("../data/ranks.csv");

/// Minimal parent/child fixture used when no hierarchy file is given.
pub const DEFAULT_HIERARCHY: &str = include_str!("../data/hierarchy.txt");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display() {
        assert_eq!("CWE-787".parse::<CweId>().unwrap(), CweId(787));
        assert_eq!("416".parse::<CweId>().unwrap(), CweId(416));
        assert!("CWE-x".parse::<CweId>().is_err());
        assert_eq!(CweId(22).to_string(), "CWE-22");
        let j = serde_json::to_string(&CweId(89)).unwrap();
        assert_eq!(j, "\"CWE-89\"");
        assert_eq!(serde_json::from_str::<CweId>(&j).unwrap(), CweId(89));
    }

    #[test]
    fn class_list_is_sorted_and_unique() {
        assert!(CASTLE_CWES.windows(2).all(|w| w[0] < w[1]));
    }
}
