//! Entity types, the 14-label tag inventory and the language inventory.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntityType {
    #[serde(rename = "PER")]
    Per,
    #[serde(rename = "LOC")]
    Loc,
    #[serde(rename = "ORG")]
    Org,
    #[serde(rename = "PRO")]
    Pro,
    #[serde(rename = "EVT")]
    Evt,
}

impl EntityType {
    /// Inventory order, which fixes label indices.
    pub const ALL: [EntityType; 5] = [
        EntityType::Per,
        EntityType::Loc,
        EntityType::Org,
        EntityType::Pro,
        EntityType::Evt,
    ];

    /// Row order used in evaluation reports.
    pub const REPORT_ORDER: [EntityType; 5] = [
        EntityType::Per,
        EntityType::Pro,
        EntityType::Evt,
        EntityType::Loc,
        EntityType::Org,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Per => "PER",
            EntityType::Loc => "LOC",
            EntityType::Org => "ORG",
            EntityType::Pro => "PRO",
            EntityType::Evt => "EVT",
        }
    }

    fn ordinal(self) -> usize {
        self as usize
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown label `{0}`")]
pub struct UnknownLabel(pub String);

impl FromStr for EntityType {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EntityType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| UnknownLabel(s.to_string()))
    }
}

/// One of the 14 tags: `O`, `B-`/`I-` per entity type, and the supporting
/// labels `X` (non-initial subword), `[CLS]` and `pad`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Label {
    O,
    B(EntityType),
    I(EntityType),
    X,
    Cls,
    Pad,
}

pub const LABEL_COUNT: usize = 14;
pub const MEANINGFUL_LABELS: usize = 11;

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::O => 0,
            Label::B(t) => 1 + 2 * t.ordinal(),
            Label::I(t) => 2 + 2 * t.ordinal(),
            Label::X => 11,
            Label::Cls => 12,
            Label::Pad => 13,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Some(match i {
            0 => Label::O,
            1..=10 => {
                let t = EntityType::ALL[(i - 1) / 2];
                if i % 2 == 1 {
                    Label::B(t)
                } else {
                    Label::I(t)
                }
            }
            11 => Label::X,
            12 => Label::Cls,
            13 => Label::Pad,
            _ => return None,
        })
    }

    pub fn entity_type(self) -> Option<EntityType> {
        match self {
            Label::B(t) | Label::I(t) => Some(t),
            _ => None,
        }
    }

    /// `O` or a `B-`/`I-` label.
    pub fn is_meaningful(self) -> bool {
        self.index() < MEANINGFUL_LABELS
    }

    pub fn is_supporting(self) -> bool {
        !self.is_meaningful()
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::O => f.write_str("O"),
            Label::B(t) => write!(f, "B-{t}"),
            Label::I(t) => write!(f, "I-{t}"),
            Label::X => f.write_str("X"),
            Label::Cls => f.write_str("[CLS]"),
            Label::Pad => f.write_str("pad"),
        }
    }
}

impl FromStr for Label {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "O" => Ok(Label::O),
            "X" => Ok(Label::X),
            "[CLS]" => Ok(Label::Cls),
            "pad" => Ok(Label::Pad),
            _ => {
                let err = || UnknownLabel(s.to_string());
                let (prefix, ty) = s.split_once('-').ok_or_else(err)?;
                let ty: EntityType = ty.parse().map_err(|_| err())?;
                match prefix {
                    "B" => Ok(Label::B(ty)),
                    "I" => Ok(Label::I(ty)),
                    _ => Err(err()),
                }
            }
        }
    }
}

impl From<Label> for String {
    fn from(l: Label) -> String {
        l.to_string()
    }
}

impl TryFrom<String> for Label {
    type Error = UnknownLabel;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// The ordered tag set shared by the encoder head and the CRF.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelInventory {
    labels: Vec<Label>,
}

impl Default for LabelInventory {
    fn default() -> Self {
        LabelInventory {
            labels: (0..LABEL_COUNT).map(|i| Label::from_index(i).unwrap()).collect(),
        }
    }
}

impl LabelInventory {
    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: Label) -> usize {
        label.index()
    }

    pub fn names(&self) -> Vec<String> {
        self.labels.iter().map(|l| l.to_string()).collect()
    }

    /// Rebuilds the inventory from stored names, which must match the
    /// standard order exactly.
    pub fn from_names(names: &[String]) -> Result<Self, UnknownLabel> {
        let inv = Self::default();
        if names != inv.names().as_slice() {
            return Err(UnknownLabel(names.join(",")));
        }
        Ok(inv)
    }
}

/// Ordered language tags; the position is the classifier's class index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LanguageInventory {
    tags: Vec<String>,
}

impl Default for LanguageInventory {
    fn default() -> Self {
        Self::new(["bg", "cs", "pl", "ru"].map(String::from).to_vec())
    }
}

impl LanguageInventory {
    pub fn new(tags: Vec<String>) -> Self {
        LanguageInventory { tags }
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn index_of(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.index_of(tag).is_some()
    }
}
