//! Paged, self-describing item container.
//!
//! Page 0 carries the header and section directory; each section (metadata,
//! relations, content, signatures) lives in one or more page-granular extents.
//! The byte-level layout is documented in `docs/format.md`.

mod handle;
pub mod metadata;
pub mod relation;
pub(crate) mod wire;

use std::fmt;
use std::io::Cursor;

use serde::{Deserialize, Serialize};

pub use handle::ItemHandle;
pub use metadata::{
    Column, EntryValue, MetadataEntry, Multiplicity, ScalarType, Table, Value, ValueType,
};
pub use relation::{Relation, RelationType, TargetKind};

use crate::error::{Error, Result};
use crate::signatures::{self, SignatureRecord};
use crate::store::ItemId;
use wire::{Reader, Writer};

pub const MAGIC: [u8; 4] = *b"CIFI";
pub const FORMAT_VERSION: u16 = 1;
pub const MIN_PAGE_SIZE: u32 = 512;
pub const MAX_PAGE_SIZE: u32 = 65536;
pub const DEFAULT_PAGE_SIZE: u32 = 1024;
/// Upper bound on extents per section; small pages lower it further so the
/// whole directory always fits in page 0.
pub const MAX_EXTENTS_PER_SECTION: usize = 16;

const FLAG_SEALED: u16 = 0x0001;
const HEADER_FIXED_LEN: usize = 41;
const DESCRIPTOR_FIXED_LEN: usize = 12;
const EXTENT_LEN: usize = 12;
const CHECKSUM_LEN: usize = 4;

pub fn validate_page_size(page_size: u64) -> Result<u32> {
    if page_size.is_power_of_two()
        && (MIN_PAGE_SIZE as u64..=MAX_PAGE_SIZE as u64).contains(&page_size)
    {
        Ok(page_size as u32)
    } else {
        Err(Error::PageSizeInvalid(page_size))
    }
}

/// Extents a single section may hold at this page size before growth forces a
/// compaction into one contiguous extent.
pub fn extent_capacity(page_size: u32) -> usize {
    let budget = page_size as usize
        - HEADER_FIXED_LEN
        - SectionKind::ALL.len() * DESCRIPTOR_FIXED_LEN
        - CHECKSUM_LEN;
    (budget / EXTENT_LEN / SectionKind::ALL.len()).min(MAX_EXTENTS_PER_SECTION)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SectionKind {
    Metadata,
    Relations,
    Content,
    Signatures,
}

impl SectionKind {
    /// Logical order of sections within an item.
    pub const ALL: [SectionKind; 4] = [
        SectionKind::Metadata,
        SectionKind::Relations,
        SectionKind::Content,
        SectionKind::Signatures,
    ];

    pub fn code(self) -> u8 {
        match self {
            SectionKind::Metadata => 1,
            SectionKind::Relations => 2,
            SectionKind::Content => 3,
            SectionKind::Signatures => 4,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.code() == code)
            .ok_or(Error::UnknownSection(code))
    }

    pub fn name(self) -> &'static str {
        match self {
            SectionKind::Metadata => "metadata",
            SectionKind::Relations => "relations",
            SectionKind::Content => "content",
            SectionKind::Signatures => "signatures",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    fn index(self) -> usize {
        self.code() as usize - 1
    }
}

impl fmt::Display for SectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-section write protection. Levels only ever tighten.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protection {
    Writable,
    AppendOnly,
    ReadOnly,
}

impl Protection {
    fn code(self) -> u8 {
        match self {
            Protection::Writable => 0,
            Protection::AppendOnly => 1,
            Protection::ReadOnly => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Protection::Writable),
            1 => Some(Protection::AppendOnly),
            2 => Some(Protection::ReadOnly),
            _ => None,
        }
    }
}

impl fmt::Display for Protection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protection::Writable => "writable",
            Protection::AppendOnly => "append-only",
            Protection::ReadOnly => "read-only",
        })
    }
}

/// Protection level of each section of an item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Protections([Protection; 4]);

impl Default for Protections {
    fn default() -> Self {
        Protections([
            Protection::Writable,
            Protection::Writable,
            Protection::Writable,
            Protection::AppendOnly,
        ])
    }
}

impl Protections {
    pub fn get(&self, kind: SectionKind) -> Protection {
        self.0[kind.index()]
    }

    pub fn set(&mut self, kind: SectionKind, level: Protection) {
        self.0[kind.index()] = level;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Extent {
    pub start_page: u64,
    pub page_count: u32,
}

impl Extent {
    pub fn end_page(&self) -> u64 {
        self.start_page + self.page_count as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectionDescriptor {
    pub kind: SectionKind,
    pub extents: Vec<Extent>,
    pub byte_length: u64,
    pub protection: Protection,
}

impl SectionDescriptor {
    fn empty(kind: SectionKind, protection: Protection) -> Self {
        Self {
            kind,
            extents: Vec::new(),
            byte_length: 0,
            protection,
        }
    }

    pub fn allocated_pages(&self) -> u64 {
        self.extents.iter().map(|e| e.page_count as u64).sum()
    }

    /// Physical byte ranges `(file_offset, len)` holding logical bytes
    /// `[0, len)` of this section, in logical order.
    pub fn physical_ranges(&self, page_size: u32, len: u64) -> Vec<(u64, u64)> {
        let ps = page_size as u64;
        let mut remaining = len;
        let mut out = Vec::new();
        for e in &self.extents {
            if remaining == 0 {
                break;
            }
            let take = remaining.min(e.page_count as u64 * ps);
            out.push((e.start_page * ps, take));
            remaining -= take;
        }
        out
    }

    /// Maps a logical payload offset to its physical file offset.
    pub fn physical_offset(&self, page_size: u32, logical: u64) -> Option<u64> {
        let ps = page_size as u64;
        let mut base = 0u64;
        for e in &self.extents {
            let span = e.page_count as u64 * ps;
            if logical < base + span {
                return Some(e.start_page * ps + (logical - base));
            }
            base += span;
        }
        None
    }
}

/// Identity fields stored in the header page.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ItemIdentity {
    pub item_id: ItemId,
    pub series_id: ItemId,
    /// 1-based ordinal within the version series.
    pub version_id: u32,
}

impl ItemIdentity {
    pub fn first_version(id: ItemId) -> Self {
        Self {
            item_id: id,
            series_id: id,
            version_id: 1,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.version_id == 0 {
            return Err("version_id must be at least 1".into());
        }
        if self.version_id == 1 && self.series_id != self.item_id {
            return Err("first version must have series_id == item_id".into());
        }
        Ok(())
    }
}

/// Decoded page 0: identity, layout and protection of every section.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemHeader {
    pub format_version: u16,
    pub sealed: bool,
    pub page_size: u32,
    pub identity: ItemIdentity,
    /// Total pages in the file, header page included.
    pub page_count: u64,
    pub sections: Vec<SectionDescriptor>,
}

impl ItemHeader {
    pub fn section(&self, kind: SectionKind) -> &SectionDescriptor {
        self.sections
            .iter()
            .find(|s| s.kind == kind)
            .expect("header always carries all section kinds")
    }

    pub(crate) fn section_mut(&mut self, kind: SectionKind) -> &mut SectionDescriptor {
        self.sections
            .iter_mut()
            .find(|s| s.kind == kind)
            .expect("header always carries all section kinds")
    }

    pub fn protections(&self) -> Protections {
        let mut p = Protections::default();
        for s in &self.sections {
            p.set(s.kind, s.protection);
        }
        p
    }

    /// Serializes the header into a full zero-padded page.
    pub fn to_page(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.page_size as usize);
        let mut w = Writer::new(&mut out);
        w.bytes(&MAGIC);
        w.u16(self.format_version);
        w.u16(if self.sealed { FLAG_SEALED } else { 0 });
        w.u32(self.page_size);
        w.u64(self.identity.item_id.get());
        w.u64(self.identity.series_id.get());
        w.u32(self.identity.version_id);
        w.u64(self.page_count);
        w.u8(self.sections.len() as u8);
        for s in &self.sections {
            w.u8(s.kind.code());
            w.u8(s.protection.code());
            w.u8(s.extents.len() as u8);
            w.u8(0);
            w.u64(s.byte_length);
            for e in &s.extents {
                w.u64(e.start_page);
                w.u32(e.page_count);
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        if out.len() > self.page_size as usize {
            return Err(Error::InvalidItem(format!(
                "section directory needs {} bytes, page is {}",
                out.len(),
                self.page_size
            )));
        }
        out.resize(self.page_size as usize, 0);
        Ok(out)
    }

    /// Parses and validates page 0. `page` must be exactly one page long.
    pub fn parse(page: &[u8]) -> Result<Self> {
        let corrupt = |msg: &str| Error::CorruptDirectory(msg.to_string());
        let mut r = Reader::new(page);
        let short = || corrupt("directory runs past the header page");
        if r.take(4).ok_or(short())? != MAGIC {
            return Err(Error::BadMagic);
        }
        let format_version = r.u16().ok_or(short())?;
        let flags = r.u16().ok_or(short())?;
        let page_size = r.u32().ok_or(short())?;
        let item_id = r.u64().ok_or(short())?;
        let series_id = r.u64().ok_or(short())?;
        let version_id = r.u32().ok_or(short())?;
        let page_count = r.u64().ok_or(short())?;
        let section_count = r.u8().ok_or(short())?;

        if section_count as usize > SectionKind::ALL.len() {
            return Err(corrupt("too many sections"));
        }
        let mut sections: Vec<SectionDescriptor> = Vec::new();
        for _ in 0..section_count {
            let kind = SectionKind::from_code(r.u8().ok_or(short())?)
                .map_err(|e| Error::CorruptDirectory(e.to_string()))?;
            let protection =
                Protection::from_code(r.u8().ok_or(short())?).ok_or(corrupt("bad protection"))?;
            let extent_count = r.u8().ok_or(short())? as usize;
            let _reserved = r.u8().ok_or(short())?;
            let byte_length = r.u64().ok_or(short())?;
            let mut extents = Vec::with_capacity(extent_count);
            for _ in 0..extent_count {
                extents.push(Extent {
                    start_page: r.u64().ok_or(short())?,
                    page_count: r.u32().ok_or(short())?,
                });
            }
            if sections.iter().any(|s| s.kind == kind) {
                return Err(corrupt("duplicate section kind"));
            }
            sections.push(SectionDescriptor {
                kind,
                extents,
                byte_length,
                protection,
            });
        }
        let body_len = r.position();
        let stored = r.u32().ok_or(short())?;
        if crc32fast::hash(&page[..body_len]) != stored {
            return Err(corrupt("header checksum mismatch"));
        }
        if flags & !FLAG_SEALED != 0 {
            return Err(corrupt("unknown header flags"));
        }
        if format_version == 0 || format_version > FORMAT_VERSION {
            return Err(Error::CorruptDirectory(format!(
                "unsupported format version {format_version}"
            )));
        }
        if validate_page_size(page_size as u64)? as usize != page.len() {
            return Err(corrupt("page size does not match header page"));
        }
        let identity = ItemIdentity {
            item_id: ItemId::new(item_id).ok_or(corrupt("item id is zero"))?,
            series_id: ItemId::new(series_id).ok_or(corrupt("series id is zero"))?,
            version_id,
        };
        identity.validate().map_err(Error::CorruptDirectory)?;

        for kind in SectionKind::ALL {
            if !sections.iter().any(|s| s.kind == kind) {
                let default = Protections::default().get(kind);
                sections.push(SectionDescriptor::empty(kind, default));
            }
        }
        sections.sort_by_key(|s| s.kind);

        let header = ItemHeader {
            format_version,
            sealed: flags & FLAG_SEALED != 0,
            page_size,
            identity,
            page_count,
            sections,
        };
        header.validate_layout()?;
        Ok(header)
    }

    fn validate_layout(&self) -> Result<()> {
        let corrupt = |msg: String| Error::CorruptDirectory(msg);
        if self.page_count == 0 {
            return Err(corrupt("page count is zero".into()));
        }
        let mut used: Vec<(u64, u64)> = Vec::new();
        for s in &self.sections {
            if s.kind == SectionKind::Signatures && s.protection == Protection::Writable {
                return Err(corrupt("signatures section marked writable".into()));
            }
            if s.extents.len() > MAX_EXTENTS_PER_SECTION {
                return Err(corrupt(format!("{} has too many extents", s.kind)));
            }
            for e in &s.extents {
                let end = e
                    .start_page
                    .checked_add(e.page_count as u64)
                    .ok_or(corrupt("extent overflows".into()))?;
                if e.page_count == 0 || e.start_page == 0 || end > self.page_count {
                    return Err(corrupt(format!(
                        "{} extent {}+{} out of range (file has {} pages)",
                        s.kind, e.start_page, e.page_count, self.page_count
                    )));
                }
                used.push((e.start_page, end));
            }
            let capacity = s
                .allocated_pages()
                .checked_mul(self.page_size as u64)
                .ok_or(corrupt("allocation overflows".into()))?;
            if s.byte_length > capacity {
                return Err(corrupt(format!(
                    "{} length {} exceeds its {} allocated bytes",
                    s.kind, s.byte_length, capacity
                )));
            }
        }
        used.sort_unstable();
        if used.windows(2).any(|w| w[0].1 > w[1].0) {
            return Err(corrupt("overlapping extents".into()));
        }
        Ok(())
    }
}

/// In-memory model of one item. Physical layout (page size, extents) is not
/// part of the model: two files with the same logical content compare equal.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemFile {
    pub identity: ItemIdentity,
    pub sealed: bool,
    pub protections: Protections,
    pub metadata: Vec<MetadataEntry>,
    pub relations: Vec<Relation>,
    pub content: Vec<u8>,
    pub signatures: Vec<SignatureRecord>,
}

impl ItemFile {
    pub fn new(identity: ItemIdentity) -> Self {
        Self {
            identity,
            sealed: false,
            protections: Protections::default(),
            metadata: Vec::new(),
            relations: Vec::new(),
            content: Vec::new(),
            signatures: Vec::new(),
        }
    }

    pub fn metadata_entry(&self, name: &str) -> Option<&MetadataEntry> {
        self.metadata.iter().find(|e| e.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        self.identity.validate().map_err(Error::InvalidItem)?;
        metadata::validate_entries(&self.metadata)?;
        for r in &self.relations {
            r.validate()?;
        }
        if self.protections.get(SectionKind::Signatures) == Protection::Writable {
            return Err(Error::InvalidItem(
                "signatures section cannot be writable".into(),
            ));
        }
        for s in &self.signatures {
            s.validate()?;
        }
        Ok(())
    }

    /// Encoded logical payload of each section, in `SectionKind::ALL` order.
    pub fn section_payloads(&self) -> [Vec<u8>; 4] {
        [
            metadata::encode_entries(&self.metadata),
            relation::encode_relations(&self.relations),
            self.content.clone(),
            signatures::encode_records(&self.signatures),
        ]
    }
}

fn pages_for(len: u64, page_size: u32) -> u64 {
    len.div_ceil(page_size as u64)
}

/// Encodes an item into a page-aligned container. Sections are laid out
/// contiguously in logical order after the header page.
pub fn encode_item(item: &ItemFile, page_size: u32) -> Result<Vec<u8>> {
    let page_size = validate_page_size(page_size as u64)?;
    item.validate()?;
    let payloads = item.section_payloads();

    let mut next_page = 1u64;
    let mut sections = Vec::with_capacity(4);
    for (kind, payload) in SectionKind::ALL.into_iter().zip(&payloads) {
        let pages = pages_for(payload.len() as u64, page_size);
        let mut extents = Vec::new();
        let mut remaining = pages;
        // Extents are u32 page counts; giant sections split across several.
        while remaining > 0 {
            let n = remaining.min(u32::MAX as u64);
            extents.push(Extent {
                start_page: next_page,
                page_count: n as u32,
            });
            next_page += n;
            remaining -= n;
        }
        sections.push(SectionDescriptor {
            kind,
            extents,
            byte_length: payload.len() as u64,
            protection: item.protections.get(kind),
        });
    }
    let header = ItemHeader {
        format_version: FORMAT_VERSION,
        sealed: item.sealed,
        page_size,
        identity: item.identity,
        page_count: next_page,
        sections,
    };

    let mut out = header.to_page()?;
    out.reserve((next_page as usize - 1) * page_size as usize);
    for payload in &payloads {
        out.extend_from_slice(payload);
        let padded = pages_for(payload.len() as u64, page_size) as usize * page_size as usize;
        out.resize(out.len() + padded - payload.len(), 0);
    }
    Ok(out)
}

/// Decodes an item from its bytes alone.
pub fn decode_item(bytes: &[u8]) -> Result<ItemFile> {
    ItemHandle::open(Cursor::new(bytes))?.read_item()
}

/// Decodes only the header page.
pub fn decode_header(bytes: &[u8]) -> Result<ItemHeader> {
    ItemHandle::open(Cursor::new(bytes)).map(|h| h.header().clone())
}
