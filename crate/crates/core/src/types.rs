//! Identifiers and records shared by every stage of the benchmark.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

macro_rules! numeric_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }

        impl From<u32> for $name {
            fn from(v: u32) -> Self {
                Self(v)
            }
        }
    };
}

numeric_id!(
    /// A unified face, shared across every service's crop of it.
    FaceId
);
numeric_id!(
    /// All images sourced with the same name string share a query id.
    QueryId
);
numeric_id!(ImageId);

/// Name of a verification service under test.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ServiceId(pub String);

impl ServiceId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ServiceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ServiceId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

/// Identity label of a face relative to its query's correct identity.
///
/// `Unknown` marks faces that are excluded (estimated labels) or could not be
/// identified (annotated labels).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "i8", try_from = "i8")]
pub enum Label {
    Positive,
    Negative,
    Unknown,
}

impl Label {
    pub fn as_i8(self) -> i8 {
        match self {
            Label::Positive => 1,
            Label::Negative => 0,
            Label::Unknown => -1,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    /// Row/column position in the 3x3 confusion layout `[1, 0, -1]`.
    pub fn index(self) -> usize {
        match self {
            Label::Positive => 0,
            Label::Negative => 1,
            Label::Unknown => 2,
        }
    }
}

impl From<Label> for i8 {
    fn from(l: Label) -> i8 {
        l.as_i8()
    }
}

impl TryFrom<i8> for Label {
    type Error = String;

    fn try_from(v: i8) -> Result<Self, String> {
        match v {
            1 => Ok(Label::Positive),
            0 => Ok(Label::Negative),
            -1 => Ok(Label::Unknown),
            other => Err(format!("label must be one of -1, 0, 1; got {other}")),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_i8())
    }
}

/// Categorical demographic tuple (gender x race-or-region x age band).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DemographicKey {
    pub gender: String,
    pub group: String,
    #[serde(default)]
    pub age_band: String,
}

impl DemographicKey {
    pub fn new(gender: &str, group: &str, age_band: &str) -> Self {
        Self {
            gender: gender.to_owned(),
            group: group.to_owned(),
            age_band: age_band.to_owned(),
        }
    }
}

impl fmt::Display for DemographicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.age_band.is_empty() {
            write!(f, "{}/{}", self.gender, self.group)
        } else {
            write!(f, "{}/{}/{}", self.gender, self.group, self.age_band)
        }
    }
}

impl FromStr for DemographicKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split('/').collect();
        match parts.as_slice() {
            [g, r] => Ok(Self::new(g, r, "")),
            [g, r, a] => Ok(Self::new(g, r, a)),
            _ => Err(format!("malformed demographic key {s:?}")),
        }
    }
}

/// One detected face admitted to the benchmark. Labels live in separate maps.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FaceRecord {
    pub face_id: FaceId,
    pub image_id: ImageId,
    pub query_id: QueryId,
    pub demographic: DemographicKey,
}

/// Unordered face pair stored as `(min, max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pair(FaceId, FaceId);

impl Pair {
    pub fn new(a: FaceId, b: FaceId) -> Self {
        if a <= b {
            Pair(a, b)
        } else {
            Pair(b, a)
        }
    }

    pub fn first(&self) -> FaceId {
        self.0
    }

    pub fn second(&self) -> FaceId {
        self.1
    }
}
