//! Typed links between items. Each relation is a fixed 11-byte record:
//! `u8 target_kind | u16 relation_type | u64 target`.

use serde::{Deserialize, Serialize};

use super::wire::{Reader, Writer};
use crate::error::{Error, Result};

pub const RELATION_RECORD_LEN: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    ItemId,
    SeriesId,
}

/// Relation type code. 1..=3 are built in; 1000 and above are user-defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationType(pub u16);

impl RelationType {
    pub const PREVIOUS_VERSION: RelationType = RelationType(1);
    pub const RENDITION_OF: RelationType = RelationType(2);
    pub const REFERENCES: RelationType = RelationType(3);
    pub const FIRST_USER_DEFINED: u16 = 1000;

    pub fn name(self) -> String {
        match self.0 {
            1 => "previous_version".into(),
            2 => "rendition_of".into(),
            3 => "references".into(),
            n => n.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Relation {
    pub target_kind: TargetKind,
    pub target: u64,
    pub relation_type: RelationType,
}

impl Relation {
    pub fn previous_version(item: u64) -> Self {
        Self {
            target_kind: TargetKind::ItemId,
            target: item,
            relation_type: RelationType::PREVIOUS_VERSION,
        }
    }

    pub fn rendition_of(item: u64) -> Self {
        Self {
            target_kind: TargetKind::ItemId,
            target: item,
            relation_type: RelationType::RENDITION_OF,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.relation_type.0 == 0 {
            return Err(Error::InvalidItem("relation type 0 is reserved".into()));
        }
        if self.relation_type == RelationType::PREVIOUS_VERSION
            && self.target_kind != TargetKind::ItemId
        {
            return Err(Error::InvalidItem(
                "previous-version relation must target an item id".into(),
            ));
        }
        Ok(())
    }
}

pub fn encode_relations(relations: &[Relation]) -> Vec<u8> {
    let mut out = Vec::with_capacity(relations.len() * RELATION_RECORD_LEN);
    let mut w = Writer::new(&mut out);
    for r in relations {
        w.u8(match r.target_kind {
            TargetKind::ItemId => 1,
            TargetKind::SeriesId => 2,
        });
        w.u16(r.relation_type.0);
        w.u64(r.target);
    }
    out
}

pub fn decode_relations(payload: &[u8]) -> std::result::Result<Vec<Relation>, String> {
    if !payload.len().is_multiple_of(RELATION_RECORD_LEN) {
        return Err(format!(
            "relations payload length {} is not a multiple of {RELATION_RECORD_LEN}",
            payload.len()
        ));
    }
    let mut r = Reader::new(payload);
    let mut out = Vec::with_capacity(payload.len() / RELATION_RECORD_LEN);
    while !r.is_empty() {
        let target_kind = match r.u8().unwrap() {
            1 => TargetKind::ItemId,
            2 => TargetKind::SeriesId,
            k => return Err(format!("unknown relation target kind {k}")),
        };
        let relation = Relation {
            target_kind,
            relation_type: RelationType(r.u16().unwrap()),
            target: r.u64().unwrap(),
        };
        relation.validate().map_err(|e| e.to_string())?;
        out.push(relation);
    }
    Ok(out)
}
