use std::fmt;
use std::num::NonZeroU64;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Nonzero 64-bit item identifier, rendered as 16 lowercase hex digits.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ItemId(NonZeroU64);

impl ItemId {
    pub fn new(raw: u64) -> Option<Self> {
        NonZeroU64::new(raw).map(ItemId)
    }

    pub fn get(self) -> u64 {
        self.0.get()
    }

    /// The eight bytes of the id, most significant first.
    pub fn pairs(self) -> [u8; 8] {
        self.get().to_be_bytes()
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.get())
    }
}

impl fmt::Debug for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ItemId({self})")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid item id `{0}`: expected 1 to 16 hex digits, nonzero")]
pub struct ParseItemIdError(String);

impl FromStr for ItemId {
    type Err = ParseItemIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseItemIdError(s.to_string());
        if s.is_empty() || s.len() > 16 || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(err());
        }
        u64::from_str_radix(s, 16)
            .ok()
            .and_then(ItemId::new)
            .ok_or_else(err)
    }
}

impl Serialize for ItemId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ItemId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Relative path of an item file: seven directory levels and a file name,
/// one hex pair each, most significant pair outermost. Every directory
/// therefore has at most 256 children.
pub fn path_for(id: ItemId) -> PathBuf {
    id.pairs().iter().map(|b| format!("{b:02x}")).collect()
}

/// Inverse of [`path_for`] for a path relative to the items directory.
pub fn id_from_path(relative: &Path) -> Option<ItemId> {
    let mut raw = 0u64;
    let mut n = 0;
    for comp in relative.components() {
        let s = comp.as_os_str().to_str()?;
        if s.len() != 2 || !s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return None;
        }
        raw = (raw << 8) | u64::from_str_radix(s, 16).ok()?;
        n += 1;
    }
    if n == 8 {
        ItemId::new(raw)
    } else {
        None
    }
}
