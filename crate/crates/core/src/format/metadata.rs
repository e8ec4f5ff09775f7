//! Self-described metadata entries: each entry carries its own name, type tag
//! and multiplicity so a metadata section decodes without any dictionary.
//!
//! Entry layout (little-endian):
//!
//! ```text
//! u16 name_len | name (UTF-8) | u8 value_type | u8 multiplicity
//! scalar: u32 count | count × value
//! table:  u16 column_count | column_count × (u16 len | name | u8 type)
//!         u32 row_count | row_count × column_count × value (row-major)
//! ```
//!
//! Entries are concatenated with no leading count, so appending an entry
//! keeps the previous payload as an exact prefix.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::wire::{Reader, Writer};
use crate::error::{Error, Result};

pub const MAX_NAME_LEN: usize = 255;
pub const MAX_STRING_LEN: usize = u16::MAX as usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarType {
    String,
    Int64,
    Float64,
    Bool,
    DateTimeMicros,
    Bytes,
}

impl ScalarType {
    pub const ALL: [ScalarType; 6] = [
        ScalarType::String,
        ScalarType::Int64,
        ScalarType::Float64,
        ScalarType::Bool,
        ScalarType::DateTimeMicros,
        ScalarType::Bytes,
    ];

    pub fn code(self) -> u8 {
        match self {
            ScalarType::String => 1,
            ScalarType::Int64 => 2,
            ScalarType::Float64 => 3,
            ScalarType::Bool => 4,
            ScalarType::DateTimeMicros => 5,
            ScalarType::Bytes => 6,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            ScalarType::String => "string",
            ScalarType::Int64 => "int",
            ScalarType::Float64 => "float",
            ScalarType::Bool => "bool",
            ScalarType::DateTimeMicros => "datetime",
            ScalarType::Bytes => "bytes",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }
}

impl fmt::Display for ScalarType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const TABLE_CODE: u8 = 7;

/// A single typed scalar. Floats compare by bit pattern so that decoded values
/// are structurally equal to what was encoded, NaN included.
#[derive(Debug, Clone)]
pub enum Value {
    String(String),
    Int64(i64),
    Float64(f64),
    Bool(bool),
    DateTimeMicros(u64),
    Bytes(Vec<u8>),
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Value::String(a), Value::String(b)) => a == b,
            (Value::Int64(a), Value::Int64(b)) => a == b,
            (Value::Float64(a), Value::Float64(b)) => a.to_bits() == b.to_bits(),
            (Value::Bool(a), Value::Bool(b)) => a == b,
            (Value::DateTimeMicros(a), Value::DateTimeMicros(b)) => a == b,
            (Value::Bytes(a), Value::Bytes(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for Value {}

impl Value {
    pub fn scalar_type(&self) -> ScalarType {
        match self {
            Value::String(_) => ScalarType::String,
            Value::Int64(_) => ScalarType::Int64,
            Value::Float64(_) => ScalarType::Float64,
            Value::Bool(_) => ScalarType::Bool,
            Value::DateTimeMicros(_) => ScalarType::DateTimeMicros,
            Value::Bytes(_) => ScalarType::Bytes,
        }
    }

    fn encode(&self, w: &mut Writer<'_>) {
        match self {
            Value::String(s) => {
                w.u16(s.len() as u16);
                w.bytes(s.as_bytes());
            }
            Value::Int64(v) => w.u64(*v as u64),
            Value::Float64(v) => w.u64(v.to_bits()),
            Value::Bool(v) => w.u8(*v as u8),
            Value::DateTimeMicros(v) => w.u64(*v),
            Value::Bytes(b) => {
                w.u32(b.len() as u32);
                w.bytes(b);
            }
        }
    }

    fn decode(ty: ScalarType, r: &mut Reader<'_>) -> Option<std::result::Result<Value, String>> {
        Some(Ok(match ty {
            ScalarType::String => {
                let len = r.u16()? as usize;
                match std::str::from_utf8(r.take(len)?) {
                    Ok(s) => Value::String(s.to_owned()),
                    Err(_) => return Some(Err("string value is not UTF-8".into())),
                }
            }
            ScalarType::Int64 => Value::Int64(r.u64()? as i64),
            ScalarType::Float64 => Value::Float64(f64::from_bits(r.u64()?)),
            ScalarType::Bool => match r.u8()? {
                0 => Value::Bool(false),
                1 => Value::Bool(true),
                b => return Some(Err(format!("bool byte {b:#04x}"))),
            },
            ScalarType::DateTimeMicros => Value::DateTimeMicros(r.u64()?),
            ScalarType::Bytes => {
                let len = r.u32()? as usize;
                Value::Bytes(r.take(len)?.to_vec())
            }
        }))
    }

    fn check(&self) -> Result<()> {
        match self {
            Value::String(s) if s.len() > MAX_STRING_LEN => Err(Error::InvalidItem(format!(
                "string value of {} bytes exceeds {MAX_STRING_LEN}",
                s.len()
            ))),
            Value::Bytes(b) if b.len() > u32::MAX as usize => {
                Err(Error::InvalidItem("bytes value exceeds 4 GiB".into()))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::String(s) => f.write_str(s),
            Value::Int64(v) => write!(f, "{v}"),
            Value::Float64(v) => write!(f, "{v}"),
            Value::Bool(v) => write!(f, "{v}"),
            Value::DateTimeMicros(v) => write!(f, "{v}"),
            Value::Bytes(b) => f.write_str(&hex::encode(b)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Column {
    pub name: String,
    pub value_type: ScalarType,
}

/// Row-major table value. Every row holds exactly one cell per column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn column_values(&self, column: usize) -> impl Iterator<Item = &Value> {
        self.rows.iter().filter_map(move |row| row.get(column))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Multiplicity {
    Single,
    Repeated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueType {
    Scalar(ScalarType),
    Table,
}

impl fmt::Display for ValueType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValueType::Scalar(t) => t.fmt(f),
            ValueType::Table => f.write_str("table"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EntryValue {
    Single(Value),
    /// One or more values of the same scalar type.
    Repeated(Vec<Value>),
    Table(Table),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetadataEntry {
    pub name: String,
    pub value: EntryValue,
}

impl MetadataEntry {
    pub fn new(name: impl Into<String>, value: EntryValue) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }

    pub fn single(name: impl Into<String>, value: Value) -> Self {
        Self::new(name, EntryValue::Single(value))
    }

    pub fn string(name: impl Into<String>, value: impl Into<String>) -> Self {
        Self::single(name, Value::String(value.into()))
    }

    pub fn int(name: impl Into<String>, value: i64) -> Self {
        Self::single(name, Value::Int64(value))
    }

    pub fn value_type(&self) -> ValueType {
        match &self.value {
            EntryValue::Single(v) => ValueType::Scalar(v.scalar_type()),
            EntryValue::Repeated(vs) => {
                ValueType::Scalar(vs.first().map_or(ScalarType::String, Value::scalar_type))
            }
            EntryValue::Table(_) => ValueType::Table,
        }
    }

    pub fn multiplicity(&self) -> Multiplicity {
        match self.value {
            EntryValue::Repeated(_) => Multiplicity::Repeated,
            _ => Multiplicity::Single,
        }
    }

    /// Scalar values of a single or repeated entry; empty for tables.
    pub fn scalars(&self) -> &[Value] {
        match &self.value {
            EntryValue::Single(v) => std::slice::from_ref(v),
            EntryValue::Repeated(vs) => vs,
            EntryValue::Table(_) => &[],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.len() > MAX_NAME_LEN {
            return Err(Error::InvalidItem(format!(
                "metadata name must be 1..={MAX_NAME_LEN} bytes, got {}",
                self.name.len()
            )));
        }
        match &self.value {
            EntryValue::Single(v) => v.check(),
            EntryValue::Repeated(vs) => {
                let Some(first) = vs.first() else {
                    return Err(Error::InvalidItem(format!(
                        "repeated entry `{}` has no values",
                        self.name
                    )));
                };
                let ty = first.scalar_type();
                if vs.len() > u32::MAX as usize {
                    return Err(Error::InvalidItem("too many values".into()));
                }
                for v in vs {
                    if v.scalar_type() != ty {
                        return Err(Error::InvalidItem(format!(
                            "entry `{}` mixes {} and {} values",
                            self.name,
                            ty,
                            v.scalar_type()
                        )));
                    }
                    v.check()?;
                }
                Ok(())
            }
            EntryValue::Table(t) => {
                if t.columns.len() > u16::MAX as usize || t.rows.len() > u32::MAX as usize {
                    return Err(Error::InvalidItem(format!("table `{}` too large", self.name)));
                }
                for c in &t.columns {
                    if c.name.is_empty() || c.name.len() > MAX_NAME_LEN {
                        return Err(Error::InvalidItem(format!(
                            "table `{}` has a column name of {} bytes",
                            self.name,
                            c.name.len()
                        )));
                    }
                }
                for (i, row) in t.rows.iter().enumerate() {
                    if row.len() != t.columns.len() {
                        return Err(Error::InvalidItem(format!(
                            "table `{}` row {i} has {} cells for {} columns",
                            self.name,
                            row.len(),
                            t.columns.len()
                        )));
                    }
                    for (cell, col) in row.iter().zip(&t.columns) {
                        if cell.scalar_type() != col.value_type {
                            return Err(Error::InvalidItem(format!(
                                "table `{}` column `{}` expects {}, got {}",
                                self.name,
                                col.name,
                                col.value_type,
                                cell.scalar_type()
                            )));
                        }
                        cell.check()?;
                    }
                }
                Ok(())
            }
        }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        let mut w = Writer::new(out);
        w.u16(self.name.len() as u16);
        w.bytes(self.name.as_bytes());
        match &self.value {
            EntryValue::Single(v) => {
                w.u8(v.scalar_type().code());
                w.u8(0);
                w.u32(1);
                v.encode(&mut w);
            }
            EntryValue::Repeated(vs) => {
                w.u8(vs[0].scalar_type().code());
                w.u8(1);
                w.u32(vs.len() as u32);
                for v in vs {
                    v.encode(&mut w);
                }
            }
            EntryValue::Table(t) => {
                w.u8(TABLE_CODE);
                w.u8(0);
                w.u16(t.columns.len() as u16);
                for c in &t.columns {
                    w.u16(c.name.len() as u16);
                    w.bytes(c.name.as_bytes());
                    w.u8(c.value_type.code());
                }
                w.u32(t.rows.len() as u32);
                for cell in t.rows.iter().flatten() {
                    cell.encode(&mut w);
                }
            }
        }
    }

    fn decode(r: &mut Reader<'_>) -> std::result::Result<Self, String> {
        const SHORT: &str = "entry runs past end of section";
        let name = decode_name(r)?;
        let type_code = r.u8().ok_or(SHORT)?;
        let multiplicity = r.u8().ok_or(SHORT)?;
        let value = if type_code == TABLE_CODE {
            if multiplicity != 0 {
                return Err(format!("table `{name}` marked repeated"));
            }
            let ncols = r.u16().ok_or(SHORT)? as usize;
            let mut columns = Vec::with_capacity(ncols);
            for _ in 0..ncols {
                let cname = decode_name(r)?;
                let code = r.u8().ok_or(SHORT)?;
                let value_type = ScalarType::from_code(code)
                    .ok_or_else(|| format!("column `{cname}` has unknown type {code}"))?;
                columns.push(Column {
                    name: cname,
                    value_type,
                });
            }
            let nrows = r.u32().ok_or(SHORT)? as usize;
            if ncols == 0 && nrows > 0 {
                return Err(format!("table `{name}` has rows but no columns"));
            }
            let mut rows = Vec::new();
            for _ in 0..nrows {
                let mut row = Vec::with_capacity(ncols);
                for c in &columns {
                    row.push(Value::decode(c.value_type, r).ok_or(SHORT)??);
                }
                rows.push(row);
            }
            EntryValue::Table(Table { columns, rows })
        } else {
            let ty = ScalarType::from_code(type_code)
                .ok_or_else(|| format!("entry `{name}` has unknown type {type_code}"))?;
            let count = r.u32().ok_or(SHORT)?;
            match (multiplicity, count) {
                (0, 1) => EntryValue::Single(Value::decode(ty, r).ok_or(SHORT)??),
                (1, n) if n >= 1 => {
                    let mut vs = Vec::new();
                    for _ in 0..n {
                        vs.push(Value::decode(ty, r).ok_or(SHORT)??);
                    }
                    EntryValue::Repeated(vs)
                }
                (m, n) => return Err(format!("entry `{name}`: multiplicity {m} with {n} values")),
            }
        };
        Ok(MetadataEntry { name, value })
    }
}

fn decode_name(r: &mut Reader<'_>) -> std::result::Result<String, String> {
    let len = r.u16().ok_or("name runs past end of section")? as usize;
    if len == 0 || len > MAX_NAME_LEN {
        return Err(format!("name length {len} out of range"));
    }
    let raw = r.take(len).ok_or("name runs past end of section")?;
    std::str::from_utf8(raw)
        .map(str::to_owned)
        .map_err(|_| "name is not UTF-8".to_string())
}

/// Checks every entry and that names are unique within the list.
pub fn validate_entries(entries: &[MetadataEntry]) -> Result<()> {
    let mut seen = HashSet::new();
    for e in entries {
        e.validate()?;
        if !seen.insert(e.name.as_str()) {
            return Err(Error::InvalidItem(format!(
                "duplicate metadata name `{}`",
                e.name
            )));
        }
    }
    Ok(())
}

pub fn encode_entries(entries: &[MetadataEntry]) -> Vec<u8> {
    let mut out = Vec::new();
    for e in entries {
        e.encode(&mut out);
    }
    out
}

pub fn decode_entries(payload: &[u8]) -> std::result::Result<Vec<MetadataEntry>, String> {
    let mut r = Reader::new(payload);
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    while !r.is_empty() {
        let at = r.position();
        let e = MetadataEntry::decode(&mut r).map_err(|e| format!("at byte {at}: {e}"))?;
        if !seen.insert(e.name.clone()) {
            return Err(format!("duplicate metadata name `{}`", e.name));
        }
        entries.push(e);
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_table() -> Table {
        Table {
            columns: vec![
                Column {
                    name: "sku".into(),
                    value_type: ScalarType::String,
                },
                Column {
                    name: "qty".into(),
                    value_type: ScalarType::Int64,
                },
            ],
            rows: vec![
                vec![Value::String("a-1".into()), Value::Int64(3)],
                vec![Value::String("b-2".into()), Value::Int64(-7)],
            ],
        }
    }

    #[test]
    fn entries_round_trip() {
        let entries = vec![
            MetadataEntry::string("author", "ana"),
            MetadataEntry::int("year", 2001),
            MetadataEntry::single("score", Value::Float64(f64::NAN)),
            MetadataEntry::new(
                "tags",
                EntryValue::Repeated(vec![Value::String("x".into()), Value::String("y".into())]),
            ),
            MetadataEntry::single("blob", Value::Bytes(vec![0, 1, 2])),
            MetadataEntry::new("lines", EntryValue::Table(sample_table())),
        ];
        validate_entries(&entries).unwrap();
        let bytes = encode_entries(&entries);
        assert_eq!(decode_entries(&bytes).unwrap(), entries);
    }

    #[test]
    fn appending_an_entry_preserves_prefix() {
        let a = vec![MetadataEntry::string("author", "ana")];
        let mut b = a.clone();
        b.push(MetadataEntry::int("year", 2001));
        let ea = encode_entries(&a);
        let eb = encode_entries(&b);
        assert!(eb.starts_with(&ea));
    }

    #[test]
    fn rejects_duplicate_names() {
        let entries = vec![
            MetadataEntry::string("author", "ana"),
            MetadataEntry::string("author", "bob"),
        ];
        assert!(matches!(
            validate_entries(&entries),
            Err(Error::InvalidItem(_))
        ));
    }

    #[test]
    fn rejects_ragged_table_and_mixed_repeated() {
        let mut t = sample_table();
        t.rows[1].pop();
        assert!(MetadataEntry::new("t", EntryValue::Table(t)).validate().is_err());

        let mixed = MetadataEntry::new(
            "m",
            EntryValue::Repeated(vec![Value::Int64(1), Value::Bool(true)]),
        );
        assert!(mixed.validate().is_err());
        assert!(MetadataEntry::new("e", EntryValue::Repeated(vec![]))
            .validate()
            .is_err());
        assert!(MetadataEntry::string("", "x").validate().is_err());
        assert!(MetadataEntry::string("n".repeat(256), "x").validate().is_err());
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let bytes = encode_entries(&[MetadataEntry::string("author", "ana")]);
        for cut in 1..bytes.len() {
            assert!(decode_entries(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }
}
