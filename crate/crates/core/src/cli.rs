//! `cif` command-line front end. Every subcommand maps onto one engine call;
//! this module only parses arguments and renders output.
//!
//! With `--json` every output line is one [`Record`] serialized as JSON.
//! Exit codes: 0 success, 1 usage error, 2 store error (not found,
//! protection, sealed, ...), 3 signature not valid, 4 corruption found.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::format::{
    Column, EntryValue, ItemFile, MetadataEntry, Multiplicity, ScalarType, SectionKind, Table,
    Value,
};
use crate::query::{self, Predicate, Query, QueryEvent};
use crate::signatures::{Algorithm, CoveredRange, Verification};
use crate::store::{CorruptItem, IdAllocation, ItemId, Store, StoreConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_STORE: i32 = 2;
pub const EXIT_INVALID_SIGNATURE: i32 = 3;
pub const EXIT_CORRUPT: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "cif", version, about = "Self-describing content item store")]
pub struct Cli {
    /// Store root directory.
    #[arg(long, env = "CIF_STORE", global = true)]
    pub store: Option<PathBuf>,

    /// Emit one JSON record per line.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AlgorithmArg {
    HmacSha256,
    Ed25519,
}

impl From<AlgorithmArg> for Algorithm {
    fn from(a: AlgorithmArg) -> Self {
        match a {
            AlgorithmArg::HmacSha256 => Algorithm::HmacSha256,
            AlgorithmArg::Ed25519 => Algorithm::Ed25519,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a new store.
    Init {
        /// Store root; defaults to --store.
        path: Option<PathBuf>,
        #[arg(long, default_value_t = crate::format::DEFAULT_PAGE_SIZE)]
        page_size: u32,
        /// Write-once store: refuse all new items and mutations.
        #[arg(long)]
        worm: bool,
        /// Allocate ids 1, 2, 3, ... instead of at random.
        #[arg(long)]
        sequential: bool,
        /// Refuse new signatures on sealed items.
        #[arg(long)]
        no_sign_after_seal: bool,
    },
    /// Store a new item; prints its id.
    Ingest {
        /// Metadata as name:type=value (type: string, int, float, bool,
        /// datetime, bytes). Repeating a name makes a repeated entry.
        #[arg(long = "meta")]
        meta: Vec<String>,
        /// Table metadata as name=@file (CSV, header cells `column:type`).
        #[arg(long = "meta-table")]
        meta_table: Vec<String>,
        #[arg(long)]
        content: Option<PathBuf>,
        #[arg(long)]
        page_size: Option<u32>,
    },
    /// Show an item.
    Get {
        id: String,
        #[arg(long, conflicts_with = "content_only")]
        meta_only: bool,
        /// Write the raw content bytes to stdout.
        #[arg(long)]
        content_only: bool,
    },
    /// Add the next version of an item; prints the new id.
    Version {
        id: String,
        #[arg(long = "meta")]
        meta: Vec<String>,
        #[arg(long = "meta-table")]
        meta_table: Vec<String>,
        #[arg(long)]
        content: Option<PathBuf>,
    },
    /// Add an alternative format of an item; prints the rendition id.
    Rendition {
        id: String,
        #[arg(long)]
        format: String,
        #[arg(long)]
        content: PathBuf,
    },
    /// Find items matching every --where predicate.
    Search {
        /// attr=value, attr:type=value, attr:range=lo..hi,
        /// attr:range:type=lo..hi, attr:exists, content~token
        #[arg(long = "where", required = true)]
        predicates: Vec<String>,
        /// Report items matching at least this fraction of predicates.
        #[arg(long, default_value_t = 1.0)]
        partial: f64,
        /// Re-check complete results against the item files.
        #[arg(long)]
        verify: bool,
        /// Print the dispatch plan before results.
        #[arg(long)]
        explain: bool,
    },
    /// Make every section of an item read-only, permanently.
    Seal { id: String },
    /// Append a signature over section byte ranges.
    Sign {
        id: String,
        /// section:start..end (end exclusive, `END` = section length);
        /// comma-separated or repeated.
        #[arg(long = "ranges", required = true, value_delimiter = ',')]
        ranges: Vec<String>,
        #[arg(long)]
        key_file: PathBuf,
        #[arg(long, value_enum, default_value = "hmac-sha256")]
        algorithm: AlgorithmArg,
        #[arg(long, default_value = "cif")]
        signer: String,
    },
    /// Check a signature record; exit 3 unless valid.
    Verify {
        id: String,
        #[arg(long)]
        record: usize,
        #[arg(long)]
        key_file: PathBuf,
    },
    /// Rebuild the catalog from the item files and report statistics.
    RebuildIndex,
    /// Decode every item file; exit 4 if any is corrupt.
    Fsck,
}

// ---- machine records ------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnRecord {
    pub name: String,
    #[serde(rename = "type")]
    pub value_type: ScalarType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRecord {
    pub name: String,
    /// Scalar type name or `table`.
    #[serde(rename = "type")]
    pub value_type: String,
    pub multiplicity: Multiplicity,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub values: Vec<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub columns: Option<Vec<ColumnRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<Vec<Vec<serde_json::Value>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationRecord {
    #[serde(rename = "type")]
    pub relation_type: String,
    pub target_kind: crate::format::TargetKind,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureSummary {
    pub index: usize,
    pub algorithm: Algorithm,
    pub signer_id: String,
    pub signed_at: u64,
    pub covered: Vec<CoveredRange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: ItemId,
    pub series_id: ItemId,
    pub version_id: u32,
    pub sealed: bool,
    pub protection: BTreeMap<String, crate::format::Protection>,
    pub metadata: Vec<MetaRecord>,
    pub relations: Vec<RelationRecord>,
    pub content_length: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_hex: Option<String>,
    pub signatures: Vec<SignatureSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Record {
    Init {
        store: String,
        page_size: u32,
    },
    Created {
        id: ItemId,
        series_id: ItemId,
        version_id: u32,
    },
    Item(ItemRecord),
    Plan(serde_json::Value),
    Result {
        id: ItemId,
        complete: bool,
        matched: Vec<usize>,
    },
    Summary {
        complete: usize,
        partial_only: usize,
        rejected: usize,
    },
    Sealed {
        id: ItemId,
    },
    Signed {
        id: ItemId,
        record: usize,
    },
    Verified {
        id: ItemId,
        record: usize,
        status: Verification,
    },
    Rebuild {
        items_scanned: usize,
        agents_built: usize,
        corrupt: Vec<CorruptItem>,
    },
    Corrupt {
        id: ItemId,
        error: String,
    },
    Fsck {
        checked: usize,
        corrupt: usize,
    },
    Error {
        code: i32,
        message: String,
    },
}

// CorruptItem is only serialized by the engine; records need to parse it back.
impl<'de> Deserialize<'de> for CorruptItem {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            id: ItemId,
            error: String,
        }
        let raw = Raw::deserialize(d)?;
        Ok(CorruptItem {
            id: raw.id,
            error: raw.error,
        })
    }
}

pub fn value_to_json(v: &Value) -> serde_json::Value {
    use serde_json::Value as J;
    match v {
        Value::String(s) => J::String(s.clone()),
        Value::Int64(n) => J::from(*n),
        Value::Float64(f) if f.is_finite() => J::from(*f),
        Value::Float64(f) => J::String(f.to_string()),
        Value::Bool(b) => J::Bool(*b),
        Value::DateTimeMicros(t) => J::from(*t),
        Value::Bytes(b) => J::String(hex::encode(b)),
    }
}

pub fn value_from_json(ty: ScalarType, j: &serde_json::Value) -> anyhow::Result<Value> {
    use serde_json::Value as J;
    Ok(match (ty, j) {
        (ScalarType::String, J::String(s)) => Value::String(s.clone()),
        (ScalarType::Int64, J::Number(n)) => Value::Int64(n.as_i64().context("int out of range")?),
        (ScalarType::Float64, J::Number(n)) => Value::Float64(n.as_f64().context("float")?),
        (ScalarType::Float64, J::String(s)) => Value::Float64(s.parse().context("float")?),
        (ScalarType::Bool, J::Bool(b)) => Value::Bool(*b),
        (ScalarType::DateTimeMicros, J::Number(n)) => {
            Value::DateTimeMicros(n.as_u64().context("datetime out of range")?)
        }
        (ScalarType::Bytes, J::String(s)) => Value::Bytes(hex::decode(s)?),
        (ty, j) => bail!("{j} is not a {ty} value"),
    })
}

impl MetaRecord {
    pub fn from_entry(e: &MetadataEntry) -> Self {
        let (columns, rows) = match &e.value {
            EntryValue::Table(t) => (
                Some(
                    t.columns
                        .iter()
                        .map(|c| ColumnRecord {
                            name: c.name.clone(),
                            value_type: c.value_type,
                        })
                        .collect(),
                ),
                Some(
                    t.rows
                        .iter()
                        .map(|r| r.iter().map(value_to_json).collect())
                        .collect(),
                ),
            ),
            _ => (None, None),
        };
        MetaRecord {
            name: e.name.clone(),
            value_type: e.value_type().to_string(),
            multiplicity: e.multiplicity(),
            values: e.scalars().iter().map(value_to_json).collect(),
            columns,
            rows,
        }
    }

    /// Rebuilds the typed entry from its machine rendering.
    pub fn to_entry(&self) -> anyhow::Result<MetadataEntry> {
        if self.value_type == "table" {
            let columns: Vec<Column> = self
                .columns
                .clone()
                .unwrap_or_default()
                .into_iter()
                .map(|c| Column {
                    name: c.name,
                    value_type: c.value_type,
                })
                .collect();
            let rows = self
                .rows
                .clone()
                .unwrap_or_default()
                .iter()
                .map(|row| {
                    row.iter()
                        .zip(&columns)
                        .map(|(cell, col)| value_from_json(col.value_type, cell))
                        .collect::<anyhow::Result<Vec<_>>>()
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            return Ok(MetadataEntry::new(
                self.name.clone(),
                EntryValue::Table(Table { columns, rows }),
            ));
        }
        let ty = ScalarType::from_name(&self.value_type)
            .ok_or_else(|| anyhow!("unknown type {}", self.value_type))?;
        let values = self
            .values
            .iter()
            .map(|j| value_from_json(ty, j))
            .collect::<anyhow::Result<Vec<_>>>()?;
        let value = match self.multiplicity {
            Multiplicity::Single => {
                EntryValue::Single(values.into_iter().next().context("missing value")?)
            }
            Multiplicity::Repeated => EntryValue::Repeated(values),
        };
        Ok(MetadataEntry::new(self.name.clone(), value))
    }
}

impl ItemRecord {
    pub fn from_item(item: &ItemFile, with_content: bool) -> Self {
        ItemRecord {
            id: item.identity.item_id,
            series_id: item.identity.series_id,
            version_id: item.identity.version_id,
            sealed: item.sealed,
            protection: SectionKind::ALL
                .iter()
                .map(|k| (k.name().to_string(), item.protections.get(*k)))
                .collect(),
            metadata: item.metadata.iter().map(MetaRecord::from_entry).collect(),
            relations: item
                .relations
                .iter()
                .map(|r| RelationRecord {
                    relation_type: r.relation_type.name(),
                    target_kind: r.target_kind,
                    target: format!("{:016x}", r.target),
                })
                .collect(),
            content_length: item.content.len() as u64,
            content_hex: with_content.then(|| hex::encode(&item.content)),
            signatures: item
                .signatures
                .iter()
                .enumerate()
                .map(|(index, s)| SignatureSummary {
                    index,
                    algorithm: s.algorithm,
                    signer_id: s.signer_id.clone(),
                    signed_at: s.signed_at,
                    covered: s.covered.clone(),
                })
                .collect(),
        }
    }
}

// ---- argument parsing -----------------------------------------------------

/// Error carrying the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(e: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_USAGE,
            message: e.to_string(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::BadMagic
            | Error::Truncated(_)
            | Error::CorruptDirectory(_)
            | Error::CorruptSection { .. } => EXIT_CORRUPT,
            Error::InvalidQuery(_) | Error::PageSizeInvalid(_) => EXIT_USAGE,
            _ => EXIT_STORE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn parse_scalar(ty: ScalarType, raw: &str) -> anyhow::Result<Value> {
    Ok(match ty {
        ScalarType::String => Value::String(raw.to_string()),
        ScalarType::Int64 => Value::Int64(raw.parse().with_context(|| format!("`{raw}` is not an int"))?),
        ScalarType::Float64 => {
            Value::Float64(raw.parse().with_context(|| format!("`{raw}` is not a float"))?)
        }
        ScalarType::Bool => match raw {
            "true" => Value::Bool(true),
            "false" => Value::Bool(false),
            _ => bail!("`{raw}` is not a bool (true/false)"),
        },
        ScalarType::DateTimeMicros => Value::DateTimeMicros(match raw.parse::<u64>() {
            Ok(micros) => micros,
            Err(_) => {
                let t = chrono::DateTime::parse_from_rfc3339(raw).with_context(|| {
                    format!("`{raw}` is neither microseconds nor an RFC 3339 timestamp")
                })?;
                u64::try_from(t.timestamp_micros()).context("datetime before 1970")?
            }
        }),
        ScalarType::Bytes => Value::Bytes(hex::decode(raw).with_context(|| format!("`{raw}` is not hex"))?),
    })
}

/// `name:type=value`, type defaulting to string.
pub fn parse_meta(arg: &str) -> anyhow::Result<(String, Value)> {
    let (lhs, raw) = arg
        .split_once('=')
        .ok_or_else(|| anyhow!("--meta `{arg}`: expected name:type=value"))?;
    let (name, ty) = match lhs.rsplit_once(':') {
        Some((name, ty)) => (
            name,
            ScalarType::from_name(ty).ok_or_else(|| anyhow!("--meta `{arg}`: unknown type `{ty}`"))?,
        ),
        None => (lhs, ScalarType::String),
    };
    Ok((name.to_string(), parse_scalar(ty, raw)?))
}

/// Reads a table file: CSV whose header cells are `column:type`.
pub fn read_table_file(path: &Path) -> anyhow::Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .with_context(|| format!("reading table {}", path.display()))?;
    let columns = reader
        .headers()?
        .iter()
        .map(|h| {
            let (name, ty) = h
                .rsplit_once(':')
                .ok_or_else(|| anyhow!("table header `{h}` must be column:type"))?;
            Ok(Column {
                name: name.to_string(),
                value_type: ScalarType::from_name(ty)
                    .ok_or_else(|| anyhow!("table header `{h}`: unknown type"))?,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != columns.len() {
            bail!("table row has {} cells for {} columns", record.len(), columns.len());
        }
        rows.push(
            record
                .iter()
                .zip(&columns)
                .map(|(cell, c)| parse_scalar(c.value_type, cell))
                .collect::<anyhow::Result<Vec<_>>>()?,
        );
    }
    Ok(Table { columns, rows })
}

/// Builds metadata entries from `--meta` and `--meta-table` flags. A name
/// given several times becomes one repeated entry.
pub fn build_metadata(meta: &[String], tables: &[String]) -> anyhow::Result<Vec<MetadataEntry>> {
    let mut entries: Vec<MetadataEntry> = Vec::new();
    for arg in meta {
        let (name, value) = parse_meta(arg)?;
        match entries.iter_mut().find(|e| e.name == name) {
            Some(existing) => {
                let prev = std::mem::replace(&mut existing.value, EntryValue::Repeated(vec![]));
                existing.value = match prev {
                    EntryValue::Single(v) => EntryValue::Repeated(vec![v, value]),
                    EntryValue::Repeated(mut vs) => {
                        vs.push(value);
                        EntryValue::Repeated(vs)
                    }
                    EntryValue::Table(_) => bail!("`{name}` given as both table and scalar"),
                };
            }
            None => entries.push(MetadataEntry::single(name, value)),
        }
    }
    for arg in tables {
        let (name, file) = arg
            .split_once("=@")
            .ok_or_else(|| anyhow!("--meta-table `{arg}`: expected name=@file"))?;
        if entries.iter().any(|e| e.name == name) {
            bail!("`{name}` given more than once");
        }
        let table = read_table_file(Path::new(file))?;
        entries.push(MetadataEntry::new(name, EntryValue::Table(table)));
    }
    for e in &entries {
        e.validate().map_err(|err| anyhow!("{err}"))?;
    }
    Ok(entries)
}

fn infer_value(raw: &str) -> Value {
    if let Ok(n) = raw.parse::<i64>() {
        Value::Int64(n)
    } else if let Ok(f) = raw.parse::<f64>() {
        Value::Float64(f)
    } else if raw == "true" || raw == "false" {
        Value::Bool(raw == "true")
    } else {
        Value::String(raw.to_string())
    }
}

fn infer_bounds(lo: &str, hi: &str) -> (Value, Value) {
    match (infer_value(lo), infer_value(hi)) {
        (a @ Value::Int64(_), b @ Value::Int64(_)) => (a, b),
        (a, b) if a.scalar_type() == b.scalar_type() => (a, b),
        _ => match (lo.parse::<f64>(), hi.parse::<f64>()) {
            (Ok(a), Ok(b)) => (Value::Float64(a), Value::Float64(b)),
            _ => (Value::String(lo.into()), Value::String(hi.into())),
        },
    }
}

/// Parses one `--where` predicate.
pub fn parse_where(arg: &str) -> anyhow::Result<Predicate> {
    let eq_pos = arg.find('=');
    if let Some(tilde) = arg.find('~') {
        if eq_pos.is_none_or(|e| tilde < e) {
            let (attr, token) = arg.split_at(tilde);
            if attr != "content" {
                bail!("--where `{arg}`: token search applies to `content` only");
            }
            return Ok(Predicate::contains_text(&token[1..]));
        }
    }
    let Some((lhs, raw)) = arg.split_once('=') else {
        return match arg.strip_suffix(":exists") {
            Some(attr) if !attr.is_empty() => Ok(Predicate::exists(attr)),
            _ => bail!("--where `{arg}`: expected attr=value, attr:range=lo..hi, attr:exists or content~token"),
        };
    };
    let range_bounds = || {
        raw.split_once("..")
            .ok_or_else(|| anyhow!("--where `{arg}`: range needs lo..hi"))
    };
    if let Some(attr) = lhs.strip_suffix(":range") {
        let (lo, hi) = range_bounds()?;
        let (lo, hi) = infer_bounds(lo, hi);
        return Ok(Predicate::range(attr, lo, hi));
    }
    if let Some((head, ty)) = lhs.rsplit_once(':') {
        if let Some(ty) = ScalarType::from_name(ty) {
            if let Some(attr) = head.strip_suffix(":range") {
                let (lo, hi) = range_bounds()?;
                return Ok(Predicate::range(attr, parse_scalar(ty, lo)?, parse_scalar(ty, hi)?));
            }
            return Ok(Predicate::eq(head, parse_scalar(ty, raw)?));
        }
    }
    if lhs.is_empty() {
        bail!("--where `{arg}`: missing attribute");
    }
    Ok(Predicate::eq(lhs, infer_value(raw)))
}

/// `section:start..end` with `END` meaning the section length.
pub fn parse_range(arg: &str, section_length: impl Fn(SectionKind) -> u64) -> anyhow::Result<CoveredRange> {
    let (kind, span) = arg
        .split_once(':')
        .ok_or_else(|| anyhow!("--ranges `{arg}`: expected section:start..end"))?;
    let kind = SectionKind::from_name(kind).ok_or_else(|| anyhow!("--ranges `{arg}`: unknown section"))?;
    let (lo, hi) = span
        .split_once("..")
        .ok_or_else(|| anyhow!("--ranges `{arg}`: expected start..end"))?;
    let bound = |s: &str| -> anyhow::Result<u64> {
        if s == "END" {
            Ok(section_length(kind))
        } else {
            s.parse().with_context(|| format!("--ranges `{arg}`: bad offset `{s}`"))
        }
    };
    let (lo, hi) = (bound(lo)?, bound(hi)?);
    if hi < lo {
        bail!("--ranges `{arg}`: end before start");
    }
    Ok(CoveredRange {
        kind,
        offset: lo,
        length: hi - lo,
    })
}

fn read_key(path: &Path, algorithm: Option<Algorithm>) -> CliResult<Vec<u8>> {
    let raw = std::fs::read(path)
        .map_err(|e| CliError::usage(format!("key file {}: {e}", path.display())))?;
    // Ed25519 keys may be given as 64 hex digits.
    let trimmed = String::from_utf8_lossy(&raw).trim().to_string();
    if algorithm != Some(Algorithm::HmacSha256) && trimmed.len() == 64 {
        if let Ok(bytes) = hex::decode(&trimmed) {
            return Ok(bytes);
        }
    }
    Ok(raw)
}

fn parse_id(raw: &str) -> CliResult<ItemId> {
    raw.parse().map_err(CliError::usage)
}

fn read_content(path: Option<&Path>) -> CliResult<Vec<u8>> {
    match path {
        None => Ok(Vec::new()),
        Some(p) => std::fs::read(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display()))),
    }
}

// ---- execution ------------------------------------------------------------

struct Output<'a> {
    out: &'a mut dyn Write,
    json: bool,
}

impl Output<'_> {
    fn emit(&mut self, record: &Record, human: impl FnOnce() -> String) -> CliResult<()> {
        let line = if self.json {
            serde_json::to_string(record).expect("records serialize")
        } else {
            human()
        };
        writeln!(self.out, "{line}").map_err(|e| CliError {
            code: EXIT_STORE,
            message: e.to_string(),
        })
    }
}

fn describe_item(item: &ItemRecord) -> String {
    let mut s = format!(
        "id {}\nseries {} version {}{}\n",
        item.id,
        item.series_id,
        item.version_id,
        if item.sealed { " (sealed)" } else { "" }
    );
    for m in &item.metadata {
        let values: Vec<String> = m.values.iter().map(|v| v.to_string()).collect();
        match &m.rows {
            Some(rows) => s.push_str(&format!("  {} (table, {} rows)\n", m.name, rows.len())),
            None => s.push_str(&format!("  {}:{} = {}\n", m.name, m.value_type, values.join(", "))),
        }
    }
    for r in &item.relations {
        s.push_str(&format!("  -> {} {}\n", r.relation_type, r.target));
    }
    s.push_str(&format!("content {} bytes, {} signature(s)", item.content_length, item.signatures.len()));
    s
}

fn open_store(cli: &Cli) -> CliResult<Store> {
    let path = cli
        .store
        .as_ref()
        .ok_or_else(|| CliError::usage("--store or CIF_STORE is required"))?;
    Store::open(path).map_err(CliError::from)
}

fn execute(cli: &Cli, out: &mut Output<'_>) -> CliResult<i32> {
    match &cli.command {
        Command::Init {
            path,
            page_size,
            worm,
            sequential,
            no_sign_after_seal,
        } => {
            let root = path
                .clone()
                .or_else(|| cli.store.clone())
                .ok_or_else(|| CliError::usage("init needs a path or --store"))?;
            let config = StoreConfig {
                default_page_size: crate::format::validate_page_size(*page_size as u64)?,
                worm_mode: *worm,
                id_allocation: if *sequential {
                    IdAllocation::Sequential
                } else {
                    IdAllocation::Random
                },
                allow_sign_after_seal: !no_sign_after_seal,
            };
            Store::init(&root, config)?;
            out.emit(
                &Record::Init {
                    store: root.display().to_string(),
                    page_size: *page_size,
                },
                || format!("initialized store at {} (page size {page_size})", root.display()),
            )?;
        }
        Command::Ingest {
            meta,
            meta_table,
            content,
            page_size,
        } => {
            let metadata = build_metadata(meta, meta_table).map_err(CliError::usage)?;
            let content = read_content(content.as_deref())?;
            let store = open_store(cli)?;
            let id = store.create_item(metadata, content, *page_size)?;
            emit_created(&store, id, out)?;
        }
        Command::Get {
            id,
            meta_only,
            content_only,
        } => {
            let id = parse_id(id)?;
            let store = open_store(cli)?;
            let item = store.read_item(id)?;
            if *content_only {
                out.out.write_all(&item.content).map_err(|e| CliError {
                    code: EXIT_STORE,
                    message: e.to_string(),
                })?;
            } else {
                let record = ItemRecord::from_item(&item, !meta_only);
                let human = describe_item(&record);
                out.emit(&Record::Item(record), || human)?;
            }
        }
        Command::Version {
            id,
            meta,
            meta_table,
            content,
        } => {
            let metadata = build_metadata(meta, meta_table).map_err(CliError::usage)?;
            let content = read_content(content.as_deref())?;
            let store = open_store(cli)?;
            let new = store.create_version(parse_id(id)?, metadata, content)?;
            emit_created(&store, new, out)?;
        }
        Command::Rendition { id, format, content } => {
            let id = parse_id(id)?;
            let content = read_content(Some(content))?;
            let store = open_store(cli)?;
            let new = store.add_rendition(id, format, content)?;
            emit_created(&store, new, out)?;
        }
        Command::Search {
            predicates,
            partial,
            verify,
            explain,
        } => {
            let predicates = predicates
                .iter()
                .map(|p| parse_where(p))
                .collect::<anyhow::Result<Vec<_>>>()
                .map_err(CliError::usage)?;
            let q = Query::new(predicates)?.with_partial_threshold(*partial)?;
            let store = open_store(cli)?;
            store.rebuild_catalog()?;
            if *explain {
                let plan = query::explain(store.catalog(), &q);
                let text = plan.to_string();
                out.emit(
                    &Record::Plan(serde_json::to_value(&plan).expect("plan serializes")),
                    || text.trim_end().to_string(),
                )?;
            }
            let source: Option<&dyn query::ItemSource> = if *verify { Some(&store) } else { None };
            for event in query::execute(store.catalog(), &q, source)? {
                match event? {
                    QueryEvent::Result(r) => out.emit(
                        &Record::Result {
                            id: r.item_id,
                            complete: r.complete,
                            matched: r.matched.clone(),
                        },
                        || {
                            format!(
                                "{} {} matched {:?}",
                                if r.complete { "complete" } else { "partial " },
                                r.item_id,
                                r.matched
                            )
                        },
                    )?,
                    QueryEvent::Summary(s) => out.emit(
                        &Record::Summary {
                            complete: s.complete,
                            partial_only: s.partial_only,
                            rejected: s.rejected,
                        },
                        || {
                            format!(
                                "{} complete, {} partial only{}",
                                s.complete,
                                s.partial_only,
                                if s.rejected > 0 {
                                    format!(", {} rejected by verification", s.rejected)
                                } else {
                                    String::new()
                                }
                            )
                        },
                    )?,
                }
            }
        }
        Command::Seal { id } => {
            let id = parse_id(id)?;
            let store = open_store(cli)?;
            store.seal_item(id)?;
            out.emit(&Record::Sealed { id }, || format!("sealed {id}"))?;
        }
        Command::Sign {
            id,
            ranges,
            key_file,
            algorithm,
            signer,
        } => {
            let id = parse_id(id)?;
            let store = open_store(cli)?;
            let header = store.read_header(id)?;
            let covered = ranges
                .iter()
                .map(|r| parse_range(r, |k| header.section(k).byte_length))
                .collect::<anyhow::Result<Vec<_>>>()
                .map_err(CliError::usage)?;
            let algorithm = Algorithm::from(*algorithm);
            let key = read_key(key_file, Some(algorithm))?;
            let record = store.sign(id, covered, algorithm, &key, signer)?;
            out.emit(&Record::Signed { id, record }, || {
                format!("signed {id}: record {record}")
            })?;
        }
        Command::Verify {
            id,
            record,
            key_file,
        } => {
            let id = parse_id(id)?;
            let store = open_store(cli)?;
            let item = store.read_item(id)?;
            let algorithm = item.signatures.get(*record).map(|r| r.algorithm);
            let key = read_key(key_file, algorithm)?;
            let status = store.verify(id, *record, &key)?;
            out.emit(
                &Record::Verified {
                    id,
                    record: *record,
                    status,
                },
                || format!("{id} record {record}: {status:?}"),
            )?;
            if status != Verification::Valid {
                return Ok(EXIT_INVALID_SIGNATURE);
            }
        }
        Command::RebuildIndex => {
            let store = open_store(cli)?;
            let stats = store.rebuild_catalog()?;
            let human = format!(
                "scanned {} items, built {} agents, {} corrupt",
                stats.items_scanned,
                stats.agents_built,
                stats.corrupt.len()
            );
            out.emit(
                &Record::Rebuild {
                    items_scanned: stats.items_scanned,
                    agents_built: stats.agents_built,
                    corrupt: stats.corrupt,
                },
                || human,
            )?;
        }
        Command::Fsck => {
            let store = open_store(cli)?;
            let report = store.fsck()?;
            for c in &report.corrupt {
                out.emit(
                    &Record::Corrupt {
                        id: c.id,
                        error: c.error.clone(),
                    },
                    || format!("corrupt {}: {}", c.id, c.error),
                )?;
            }
            out.emit(
                &Record::Fsck {
                    checked: report.checked,
                    corrupt: report.corrupt.len(),
                },
                || format!("checked {} items, {} corrupt", report.checked, report.corrupt.len()),
            )?;
            if !report.corrupt.is_empty() {
                return Ok(EXIT_CORRUPT);
            }
        }
    }
    Ok(EXIT_OK)
}

fn emit_created(store: &Store, id: ItemId, out: &mut Output<'_>) -> CliResult<()> {
    let header = store.read_header(id)?;
    out.emit(
        &Record::Created {
            id,
            series_id: header.identity.series_id,
            version_id: header.identity.version_id,
        },
        || id.to_string(),
    )
}

/// Runs one invocation and returns its exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{}", e.render());
                return EXIT_OK;
            }
            if args.iter().any(|a| a == "--json") {
                let rec = Record::Error {
                    code: EXIT_USAGE,
                    message: e.kind().to_string(),
                };
                let _ = writeln!(stderr, "{}", serde_json::to_string(&rec).expect("records serialize"));
            } else {
                let _ = write!(stderr, "{}", e.render());
            }
            return EXIT_USAGE;
        }
    };
    let mut out = Output {
        out: stdout,
        json: cli.json,
    };
    match execute(&cli, &mut out) {
        Ok(code) => code,
        Err(e) => {
            if cli.json {
                let rec = Record::Error {
                    code: e.code,
                    message: e.message.clone(),
                };
                let _ = writeln!(stderr, "{}", serde_json::to_string(&rec).expect("records serialize"));
            } else {
                let _ = writeln!(stderr, "cif: {}", e.message);
            }
            e.code
        }
    }
}
