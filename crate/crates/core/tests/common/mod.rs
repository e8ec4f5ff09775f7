//! Seeded generators and an independent query oracle shared by the
//! integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use cif_core::format::{
    Column, EntryValue, ItemFile, ItemIdentity, MetadataEntry, Protection, Relation, RelationType,
    ScalarType, SectionKind, Table, TargetKind, Value,
};
use cif_core::query::Predicate;
use cif_core::signatures::{Algorithm, CoveredRange, SignatureRecord};
use cif_core::catalog::Operator;
use cif_core::store::ItemId;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub const PAGE_SIZES: [u32; 3] = [512, 1024, 4096];
pub const MAX_CONTENT: u64 = 8 << 20;

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

pub fn word(rng: &mut StdRng, max: usize) -> String {
    let len = rng.random_range(1..=max);
    (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
}

pub fn scalar(rng: &mut StdRng, ty: ScalarType) -> Value {
    match ty {
        ScalarType::String => {
            let len = rng.random_range(0..40);
            Value::String((0..len).map(|_| rng.random_range(' '..='~')).collect())
        }
        ScalarType::Int64 => Value::Int64(rng.random()),
        ScalarType::Float64 => Value::Float64(rng.random_range(-1e12..1e12)),
        ScalarType::Bool => Value::Bool(rng.random()),
        ScalarType::DateTimeMicros => Value::DateTimeMicros(rng.random()),
        ScalarType::Bytes => {
            let len = rng.random_range(0..64);
            Value::Bytes((0..len).map(|_| rng.random()).collect())
        }
    }
}

pub fn scalar_type(rng: &mut StdRng) -> ScalarType {
    ScalarType::ALL[rng.random_range(0..ScalarType::ALL.len())]
}

pub fn table(rng: &mut StdRng, max_cols: usize, max_rows: usize) -> Table {
    let columns: Vec<Column> = (0..rng.random_range(1..=max_cols))
        .map(|i| Column {
            name: format!("c{i}"),
            value_type: scalar_type(rng),
        })
        .collect();
    let rows = (0..rng.random_range(0..=max_rows))
        .map(|_| columns.iter().map(|c| scalar(rng, c.value_type)).collect())
        .collect();
    Table { columns, rows }
}

/// Any entry shape: single, repeated or a table of up to 10 × 100.
pub fn entry(rng: &mut StdRng, name: String) -> MetadataEntry {
    let value = match rng.random_range(0..10) {
        0..=5 => {
            let ty = scalar_type(rng);
            EntryValue::Single(scalar(rng, ty))
        }
        6..=8 => {
            let ty = scalar_type(rng);
            EntryValue::Repeated((0..rng.random_range(1..=6)).map(|_| scalar(rng, ty)).collect())
        }
        _ => EntryValue::Table(table(rng, 10, 100)),
    };
    MetadataEntry::new(name, value)
}

pub fn metadata(rng: &mut StdRng, max_entries: usize) -> Vec<MetadataEntry> {
    (0..rng.random_range(0..=max_entries))
        .map(|i| {
            let name = format!("{}{i}", word(rng, 12));
            entry(rng, name)
        })
        .collect()
}

/// Log-uniform size in 0..=max, with an explicit share of empty content.
pub fn log_uniform_size(rng: &mut StdRng, max: u64) -> usize {
    if rng.random_range(0..20) == 0 {
        return 0;
    }
    let x: f64 = rng.random_range(0.0..=(max as f64).ln());
    (x.exp() as u64).min(max) as usize
}

pub fn bytes(rng: &mut StdRng, len: usize) -> Vec<u8> {
    let mut v = vec![0u8; len];
    rng.fill(&mut v[..]);
    v
}

pub fn relation(rng: &mut StdRng) -> Relation {
    let relation_type = match rng.random_range(0..4) {
        0 => RelationType::PREVIOUS_VERSION,
        1 => RelationType::RENDITION_OF,
        2 => RelationType::REFERENCES,
        _ => RelationType(rng.random_range(4..u16::MAX)),
    };
    let target_kind = if relation_type == RelationType::PREVIOUS_VERSION || rng.random() {
        TargetKind::ItemId
    } else {
        TargetKind::SeriesId
    };
    Relation {
        target_kind,
        target: rng.random(),
        relation_type,
    }
}

pub fn signature_record(rng: &mut StdRng) -> SignatureRecord {
    let kinds = [SectionKind::Metadata, SectionKind::Relations, SectionKind::Content];
    SignatureRecord {
        covered: (0..rng.random_range(1..4))
            .map(|_| CoveredRange {
                kind: kinds[rng.random_range(0..3)],
                offset: rng.random_range(0..1000),
                length: rng.random_range(0..1000),
            })
            .collect(),
        algorithm: match rng.random_range(0..3) {
            0 => Algorithm::HmacSha256,
            1 => Algorithm::Ed25519,
            _ => Algorithm::Other(rng.random_range(3..=255)),
        },
        signer_id: word(rng, 20),
        signed_at: rng.random(),
        signature: {
            let len = rng.random_range(0..96);
            bytes(rng, len)
        },
    }
}

pub fn random_id(rng: &mut StdRng) -> ItemId {
    ItemId::new(rng.random_range(1..=u64::MAX)).unwrap()
}

/// A structurally random item: up to 50 entries, tables up to 10 × 100,
/// content log-uniform up to `max_content` bytes.
pub fn item(rng: &mut StdRng, max_content: u64) -> ItemFile {
    let id = random_id(rng);
    let identity = if rng.random() {
        ItemIdentity::first_version(id)
    } else {
        ItemIdentity {
            item_id: id,
            series_id: random_id(rng),
            version_id: rng.random_range(2..=u32::MAX),
        }
    };
    let mut it = ItemFile::new(identity);
    it.metadata = metadata(rng, 50);
    it.relations = (0..rng.random_range(0..6)).map(|_| relation(rng)).collect();
    let len = log_uniform_size(rng, max_content);
    it.content = bytes(rng, len);
    it.signatures = (0..rng.random_range(0..4)).map(|_| signature_record(rng)).collect();
    if rng.random_range(0..5) == 0 {
        it.sealed = true;
        for k in SectionKind::ALL {
            it.protections.set(k, Protection::ReadOnly);
        }
    } else {
        for k in [SectionKind::Metadata, SectionKind::Relations, SectionKind::Content] {
            let levels = [Protection::Writable, Protection::AppendOnly, Protection::ReadOnly];
            it.protections.set(k, levels[rng.random_range(0..3)]);
        }
    }
    it
}

// ---- query corpora ---------------------------------------------------------

pub const CONTENT_WORDS: [&str; 12] = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet",
    "kilo", "lima",
];

/// Attribute schema of one corpus: a fixed scalar type per attribute keeps
/// range queries well-typed.
#[derive(Debug, Clone)]
pub struct Schema {
    pub attributes: Vec<(String, ScalarType)>,
}

impl Schema {
    pub fn random(rng: &mut StdRng) -> Self {
        let types = [
            ScalarType::String,
            ScalarType::Int64,
            ScalarType::Float64,
            ScalarType::Bool,
            ScalarType::DateTimeMicros,
        ];
        let n = rng.random_range(3..=6);
        Schema {
            attributes: (0..n).map(|i| (format!("a{i}"), types[rng.random_range(0..types.len())])).collect(),
        }
    }

    /// Small domains so equality predicates hit.
    pub fn value(&self, rng: &mut StdRng, ty: ScalarType) -> Value {
        small_value(rng, ty)
    }
}

pub fn small_value(rng: &mut StdRng, ty: ScalarType) -> Value {
    match ty {
        ScalarType::String => Value::String(["ana", "bob", "cy", "dee", "eve"][rng.random_range(0..5)].into()),
        ScalarType::Int64 => Value::Int64(rng.random_range(-5..15)),
        ScalarType::Float64 => Value::Float64(rng.random_range(0..12) as f64 * 0.5),
        ScalarType::Bool => Value::Bool(rng.random()),
        ScalarType::DateTimeMicros => Value::DateTimeMicros(rng.random_range(0..10) * 1_000_000),
        ScalarType::Bytes => Value::Bytes(vec![rng.random_range(0..4)]),
    }
}

/// How an item in a corpus was created.
#[derive(Debug, Clone)]
pub enum Origin {
    Original,
    Version(usize),
    Rendition(usize),
}

/// What the test believes an item holds, kept independently of the engine.
#[derive(Debug, Clone)]
pub struct ModelItem {
    pub id: Option<ItemId>,
    pub origin: Origin,
    pub own: Vec<MetadataEntry>,
    pub content: String,
}

pub fn corpus_metadata(rng: &mut StdRng, schema: &Schema) -> Vec<MetadataEntry> {
    let mut out = Vec::new();
    for (name, ty) in &schema.attributes {
        match rng.random_range(0..10) {
            0..=5 => out.push(MetadataEntry::single(name.clone(), schema.value(rng, *ty))),
            6..=7 => out.push(MetadataEntry::new(
                name.clone(),
                EntryValue::Repeated((0..rng.random_range(1..4)).map(|_| schema.value(rng, *ty)).collect()),
            )),
            _ => {}
        }
    }
    if rng.random_range(0..3) == 0 {
        let columns = vec![
            Column { name: "n".into(), value_type: ScalarType::Int64 },
            Column { name: "s".into(), value_type: ScalarType::String },
        ];
        let rows = (0..rng.random_range(0..4))
            .map(|_| vec![small_value(rng, ScalarType::Int64), small_value(rng, ScalarType::String)])
            .collect();
        out.push(MetadataEntry::new("lines", EntryValue::Table(Table { columns, rows })));
    }
    if rng.random_range(0..4) != 0 {
        out.push(MetadataEntry::string("content_type", "text/plain"));
    } else {
        out.push(MetadataEntry::string("content_type", "application/octet-stream"));
    }
    out
}

pub fn corpus_text(rng: &mut StdRng) -> String {
    let n = rng.random_range(0..8);
    let words: Vec<String> = (0..n)
        .map(|_| {
            let w = CONTENT_WORDS[rng.random_range(0..CONTENT_WORDS.len())];
            if rng.random() { w.to_uppercase() } else { w.to_string() }
        })
        .collect();
    words.join(if rng.random() { " " } else { ", " })
}

/// Values an item exposes under `attribute`, following rendition links with
/// the nearest item winning each name.
pub fn oracle_values(items: &[ModelItem], index: usize, attribute: &str) -> Vec<Value> {
    let mut seen = BTreeSet::new();
    let mut cur = Some(index);
    let mut found: BTreeMap<String, &MetadataEntry> = BTreeMap::new();
    while let Some(i) = cur {
        if !seen.insert(i) {
            break;
        }
        for e in &items[i].own {
            found.entry(e.name.clone()).or_insert(e);
        }
        cur = match items[i].origin {
            Origin::Rendition(parent) => Some(parent),
            _ => None,
        };
    }
    let mut out = Vec::new();
    for (name, e) in found {
        match &e.value {
            EntryValue::Single(v) if name == attribute => out.push(v.clone()),
            EntryValue::Repeated(vs) if name == attribute => out.extend(vs.iter().cloned()),
            EntryValue::Table(t) => {
                for (c, col) in t.columns.iter().enumerate() {
                    if format!("{name}.{}", col.name) == attribute {
                        out.extend(t.rows.iter().map(|r| r[c].clone()));
                    }
                }
            }
            _ => {}
        }
    }
    out
}

fn oracle_is_text(items: &[ModelItem], index: usize) -> bool {
    let text = |vals: Vec<Value>| match vals.first() {
        Some(Value::String(s)) => Some(s.starts_with("text/")),
        _ => None,
    };
    let own_format = items[index]
        .own
        .iter()
        .find(|e| e.name == "format")
        .and_then(|e| text(e.scalars().to_vec()));
    own_format
        .or_else(|| text(oracle_values(items, index, "content_type")))
        .unwrap_or(false)
}

fn within(v: &Value, lo: &Value, hi: &Value) -> bool {
    match (v, lo, hi) {
        (Value::String(v), Value::String(l), Value::String(h)) => l <= v && v <= h,
        (Value::Int64(v), Value::Int64(l), Value::Int64(h)) => l <= v && v <= h,
        (Value::Float64(v), Value::Float64(l), Value::Float64(h)) => l <= v && v <= h,
        (Value::Bool(v), Value::Bool(l), Value::Bool(h)) => l <= v && v <= h,
        (Value::DateTimeMicros(v), Value::DateTimeMicros(l), Value::DateTimeMicros(h)) => {
            l <= v && v <= h
        }
        (Value::Bytes(v), Value::Bytes(l), Value::Bytes(h)) => l <= v && v <= h,
        _ => false,
    }
}

/// Scan-and-filter evaluation of one predicate against the model.
pub fn oracle_matches(items: &[ModelItem], index: usize, p: &Predicate) -> bool {
    match &p.operator {
        Operator::ContainsToken(token) => {
            let token = token.to_lowercase();
            oracle_is_text(items, index)
                && items[index]
                    .content
                    .split(|c: char| !c.is_ascii_alphanumeric())
                    .any(|w| w.to_lowercase() == token)
        }
        op => {
            let values = oracle_values(items, index, &p.attribute);
            match op {
                Operator::Eq(x) => values.contains(x),
                Operator::Range(lo, hi) => values.iter().any(|v| within(v, lo, hi)),
                Operator::Exists => !values.is_empty(),
                Operator::ContainsToken(_) => unreachable!(),
            }
        }
    }
}

pub fn oracle_query(items: &[ModelItem], predicates: &[Predicate]) -> BTreeSet<ItemId> {
    (0..items.len())
        .filter(|&i| predicates.iter().all(|p| oracle_matches(items, i, p)))
        .filter_map(|i| items[i].id)
        .collect()
}

pub fn random_predicate(rng: &mut StdRng, schema: &Schema) -> Predicate {
    match rng.random_range(0..12) {
        0..=4 => {
            let (name, ty) = &schema.attributes[rng.random_range(0..schema.attributes.len())];
            Predicate::eq(name.clone(), schema.value(rng, *ty))
        }
        5..=7 => {
            let (name, ty) = &schema.attributes[rng.random_range(0..schema.attributes.len())];
            let (a, b) = (schema.value(rng, *ty), schema.value(rng, *ty));
            let (lo, hi) = if within(&a, &a, &b) { (a, b) } else { (b, a) };
            Predicate::range(name.clone(), lo, hi)
        }
        8 => {
            let name = if rng.random() {
                schema.attributes[rng.random_range(0..schema.attributes.len())].0.clone()
            } else {
                ["lines.n", "lines.s", "format", "missing"][rng.random_range(0..4)].to_string()
            };
            Predicate::exists(name)
        }
        9 => {
            if rng.random() {
                Predicate::eq("lines.n", small_value(rng, ScalarType::Int64))
            } else {
                Predicate::eq("lines.s", small_value(rng, ScalarType::String))
            }
        }
        _ => {
            let w = CONTENT_WORDS[rng.random_range(0..CONTENT_WORDS.len())];
            Predicate::contains_text(if rng.random() { w.to_uppercase() } else { w.to_string() })
        }
    }
}
