use std::io;

use crate::format::{Protection, SectionKind};
use crate::store::ItemId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid item: {0}")]
    InvalidItem(String),

    #[error("invalid page size {0}: must be a power of two in 512..=65536")]
    PageSizeInvalid(u64),

    #[error("bad magic: not an item file")]
    BadMagic,

    #[error("truncated item file: {0}")]
    Truncated(String),

    #[error("corrupt section directory: {0}")]
    CorruptDirectory(String),

    #[error("corrupt {kind} section: {reason}")]
    CorruptSection { kind: SectionKind, reason: String },

    #[error("{kind} section is {protection}; write rejected")]
    ProtectionViolation {
        kind: SectionKind,
        protection: Protection,
    },

    #[error("cannot loosen {kind} protection from {from} to {to}")]
    ProtectionDowngrade {
        kind: SectionKind,
        from: Protection,
        to: Protection,
    },

    #[error("item file is sealed")]
    SealedFile,

    #[error("unknown section kind {0}")]
    UnknownSection(u8),

    #[error("store is sealed (WORM mode)")]
    StoreSealed,

    #[error("could not allocate a free item id after {0} attempts")]
    IdCollision(u32),

    #[error("item {0} not found")]
    NotFound(ItemId),

    #[error("signature record {0} not found")]
    RecordNotFound(usize),

    #[error("range {offset}+{length} exceeds {kind} section length {section_length}")]
    RangeOutOfBounds {
        kind: SectionKind,
        offset: u64,
        length: u64,
        section_length: u64,
    },

    #[error("operator not applicable to attribute `{attribute}`: {reason}")]
    OperatorTypeMismatch { attribute: String, reason: String },

    #[error("catalog is rebuilding or invalid; retry after a completed rebuild")]
    CatalogRebuilding,

    #[error("invalid query: {0}")]
    InvalidQuery(String),

    #[error("store config: {0}")]
    Config(String),

    #[error("signing key: {0}")]
    Key(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
