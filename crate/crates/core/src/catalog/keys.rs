use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use crate::format::{EntryValue, MetadataEntry, ScalarType, Value};

/// Reserved attribute name of the full-text agent.
pub const CONTENT_ATTRIBUTE: &str = "$content";

/// f64 ordered by IEEE-754 total order, so every float (NaN, -0.0) is a
/// distinct, comparable key.
#[derive(Debug, Clone, Copy)]
pub struct FloatKey(pub f64);

impl PartialEq for FloatKey {
    fn eq(&self, other: &Self) -> bool {
        self.0.total_cmp(&other.0) == Ordering::Equal
    }
}

impl Eq for FloatKey {}

impl PartialOrd for FloatKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for FloatKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl Hash for FloatKey {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.0.to_bits().hash(state);
    }
}

/// Typed index key. Variants order first by type, so the keys of one type
/// form a contiguous run in an ordered map.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum IndexKey {
    String(String),
    Int64(i64),
    Float64(FloatKey),
    Bool(bool),
    DateTimeMicros(u64),
    Bytes(Vec<u8>),
    Token(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KeyType {
    Scalar(ScalarType),
    Token,
}

impl IndexKey {
    pub fn key_type(&self) -> KeyType {
        match self {
            IndexKey::String(_) => KeyType::Scalar(ScalarType::String),
            IndexKey::Int64(_) => KeyType::Scalar(ScalarType::Int64),
            IndexKey::Float64(_) => KeyType::Scalar(ScalarType::Float64),
            IndexKey::Bool(_) => KeyType::Scalar(ScalarType::Bool),
            IndexKey::DateTimeMicros(_) => KeyType::Scalar(ScalarType::DateTimeMicros),
            IndexKey::Bytes(_) => KeyType::Scalar(ScalarType::Bytes),
            IndexKey::Token(_) => KeyType::Token,
        }
    }
}

impl From<&Value> for IndexKey {
    fn from(v: &Value) -> Self {
        match v {
            Value::String(s) => IndexKey::String(s.clone()),
            Value::Int64(n) => IndexKey::Int64(*n),
            Value::Float64(f) => IndexKey::Float64(FloatKey(*f)),
            Value::Bool(b) => IndexKey::Bool(*b),
            Value::DateTimeMicros(t) => IndexKey::DateTimeMicros(*t),
            Value::Bytes(b) => IndexKey::Bytes(b.clone()),
        }
    }
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

/// Splits an item's effective metadata into per-attribute key sets. Table
/// entries `t` index each cell of column `c` under the attribute `t.c`.
/// Text content, when present, lands under [`CONTENT_ATTRIBUTE`].
pub fn extract_keys(
    effective: &[MetadataEntry],
    content_text: Option<&str>,
) -> BTreeMap<String, Vec<IndexKey>> {
    let mut out: BTreeMap<String, Vec<IndexKey>> = BTreeMap::new();
    for entry in effective {
        match &entry.value {
            EntryValue::Single(_) | EntryValue::Repeated(_) => {
                out.entry(entry.name.clone())
                    .or_default()
                    .extend(entry.scalars().iter().map(IndexKey::from));
            }
            EntryValue::Table(table) => {
                for (i, column) in table.columns.iter().enumerate() {
                    let attr = format!("{}.{}", entry.name, column.name);
                    out.entry(attr)
                        .or_default()
                        .extend(table.column_values(i).map(IndexKey::from));
                }
            }
        }
    }
    if let Some(text) = content_text {
        out.entry(CONTENT_ATTRIBUTE.to_string())
            .or_default()
            .extend(tokenize(text).map(IndexKey::Token));
    }
    for keys in out.values_mut() {
        keys.sort_unstable();
        keys.dedup();
    }
    out.retain(|_, keys| !keys.is_empty());
    out
}
