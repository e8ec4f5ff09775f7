use std::io::{Read, Seek, SeekFrom, Write};

use super::{
    extent_capacity, metadata, pages_for, relation, validate_page_size, Extent, ItemFile,
    ItemHeader, Protection, SectionDescriptor, SectionKind, MAGIC,
};
use crate::error::{Error, Result};
use crate::signatures;

/// Open item container supporting section reads and in-place section
/// rewrites. Writes touch only the affected section's pages plus page 0,
/// and page 0 is always written last.
#[derive(Debug)]
pub struct ItemHandle<F> {
    file: F,
    header: ItemHeader,
}

fn read_up_to<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

impl<F: Read + Seek> ItemHandle<F> {
    pub fn open(mut file: F) -> Result<Self> {
        let len = file.seek(SeekFrom::End(0))?;
        file.seek(SeekFrom::Start(0))?;
        let mut prefix = [0u8; 12];
        let n = read_up_to(&mut file, &mut prefix)?;
        let magic_len = n.min(MAGIC.len());
        if prefix[..magic_len] != MAGIC[..magic_len] {
            return Err(Error::BadMagic);
        }
        if n < prefix.len() {
            return Err(Error::Truncated(format!("{len} bytes, header needs more")));
        }
        let page_size = u32::from_le_bytes(prefix[8..12].try_into().unwrap());
        let page_size = validate_page_size(page_size as u64)
            .map_err(|e| Error::CorruptDirectory(e.to_string()))?;
        if len < page_size as u64 {
            return Err(Error::Truncated(format!(
                "{len} bytes, header page is {page_size}"
            )));
        }
        let mut page = vec![0u8; page_size as usize];
        file.seek(SeekFrom::Start(0))?;
        file.read_exact(&mut page)?;
        let header = ItemHeader::parse(&page)?;
        let expected = header.page_count.saturating_mul(page_size as u64);
        if len < expected {
            return Err(Error::Truncated(format!(
                "{len} bytes, directory references {expected}"
            )));
        }
        Ok(Self { file, header })
    }

    pub fn header(&self) -> &ItemHeader {
        &self.header
    }

    pub fn into_inner(self) -> F {
        self.file
    }

    /// Logical payload of one section, stitched together from its extents.
    pub fn read_section(&mut self, kind: SectionKind) -> Result<Vec<u8>> {
        let desc = self.header.section(kind);
        let ranges = desc.physical_ranges(self.header.page_size, desc.byte_length);
        let mut out = Vec::with_capacity(desc.byte_length as usize);
        for (offset, len) in ranges {
            let start = out.len();
            out.resize(start + len as usize, 0);
            self.file.seek(SeekFrom::Start(offset))?;
            self.file.read_exact(&mut out[start..])?;
        }
        Ok(out)
    }

    pub fn read_item(&mut self) -> Result<ItemFile> {
        let corrupt = |kind: SectionKind| move |reason: String| Error::CorruptSection { kind, reason };
        let metadata = metadata::decode_entries(&self.read_section(SectionKind::Metadata)?)
            .map_err(corrupt(SectionKind::Metadata))?;
        let relations = relation::decode_relations(&self.read_section(SectionKind::Relations)?)
            .map_err(corrupt(SectionKind::Relations))?;
        let content = self.read_section(SectionKind::Content)?;
        let signatures = signatures::decode_records(&self.read_section(SectionKind::Signatures)?)
            .map_err(corrupt(SectionKind::Signatures))?;
        Ok(ItemFile {
            identity: self.header.identity,
            sealed: self.header.sealed,
            protections: self.header.protections(),
            metadata,
            relations,
            content,
            signatures,
        })
    }
}

impl<F: Read + Write + Seek> ItemHandle<F> {
    /// Replaces a section's payload. Fits within the current allocation are
    /// rewritten in place; growth appends pages at end of file (extending the
    /// section's last extent when it already ends there). When the section
    /// would exceed its extent budget it is compacted into a single new
    /// extent at end of file. Other sections' pages are never touched.
    pub fn update_section(
        &mut self,
        kind: SectionKind,
        payload: &[u8],
    ) -> Result<SectionDescriptor> {
        self.write_section(kind, payload, false)
    }

    /// Appends to the signatures section, bypassing the seal when
    /// `allow_after_seal` is set. The old payload must be a prefix of the new.
    pub(crate) fn append_signatures(
        &mut self,
        payload: &[u8],
        allow_after_seal: bool,
    ) -> Result<SectionDescriptor> {
        self.write_section(SectionKind::Signatures, payload, allow_after_seal)
    }

    fn check_writable(&mut self, kind: SectionKind, payload: &[u8], bypass_seal: bool) -> Result<()> {
        let desc = self.header.section(kind);
        let protection = desc.protection;
        debug_assert!(!bypass_seal || kind == SectionKind::Signatures);
        let append_only = match protection {
            Protection::Writable => false,
            Protection::AppendOnly => true,
            Protection::ReadOnly if bypass_seal && self.header.sealed => true,
            Protection::ReadOnly => {
                return Err(Error::ProtectionViolation { kind, protection })
            }
        };
        if self.header.sealed && !bypass_seal {
            return Err(Error::SealedFile);
        }
        if append_only {
            let old_len = desc.byte_length as usize;
            if payload.len() < old_len {
                return Err(Error::ProtectionViolation { kind, protection });
            }
            let old = self.read_section(kind)?;
            if payload[..old_len] != old[..] {
                return Err(Error::ProtectionViolation { kind, protection });
            }
        }
        Ok(())
    }

    fn write_section(
        &mut self,
        kind: SectionKind,
        payload: &[u8],
        bypass_seal: bool,
    ) -> Result<SectionDescriptor> {
        self.check_writable(kind, payload, bypass_seal)?;

        let page_size = self.header.page_size;
        let ps = page_size as u64;
        let new_len = payload.len() as u64;
        let needed = pages_for(new_len, page_size);
        let capacity = extent_capacity(page_size);
        let mut new_header = self.header.clone();
        let eof = new_header.page_count;
        let desc = new_header.section_mut(kind);
        let old_len = desc.byte_length;
        let allocated = desc.allocated_pages();
        let mut abandoned: Vec<Extent> = Vec::new();

        if needed > allocated {
            let extra = needed - allocated;
            let extends_last = desc
                .extents
                .last()
                .is_some_and(|e| e.end_page() == eof && e.page_count as u64 + extra <= u32::MAX as u64);
            if extends_last {
                desc.extents.last_mut().unwrap().page_count += extra as u32;
            } else if desc.extents.len() < capacity && extra <= u32::MAX as u64 {
                desc.extents.push(Extent {
                    start_page: eof,
                    page_count: extra as u32,
                });
            } else {
                // compaction: move the whole section into one fresh extent
                let pages = u32::try_from(needed).map_err(|_| {
                    Error::InvalidItem(format!("{kind} payload of {new_len} bytes is too large"))
                })?;
                abandoned = std::mem::replace(
                    &mut desc.extents,
                    vec![Extent {
                        start_page: eof,
                        page_count: pages,
                    }],
                );
            }
            new_header.page_count = eof + needed - if abandoned.is_empty() { allocated } else { 0 };
        }

        let desc = new_header.section_mut(kind);
        desc.byte_length = new_len;
        let desc = desc.clone();
        // Must fit before any byte is written.
        let header_page = new_header.to_page()?;

        // Bytes past the old length are already zero, so rewriting up to
        // max(old, new) suffices to leave the unused tail zeroed.
        let span = if abandoned.is_empty() {
            new_len.max(old_len)
        } else {
            new_len
        };
        let span = pages_for(span, page_size) * ps;
        let mut written = 0u64;
        for (offset, len) in desc.physical_ranges(page_size, span) {
            self.file.seek(SeekFrom::Start(offset))?;
            let from = written.min(new_len) as usize;
            let to = (written + len).min(new_len) as usize;
            self.file.write_all(&payload[from..to])?;
            let zeros = len as usize - (to - from);
            write_zeros(&mut self.file, zeros)?;
            written += len;
        }
        for e in &abandoned {
            self.file.seek(SeekFrom::Start(e.start_page * ps))?;
            write_zeros(&mut self.file, (e.page_count as u64 * ps) as usize)?;
        }

        self.file.seek(SeekFrom::Start(0))?;
        self.file.write_all(&header_page)?;
        self.file.flush()?;
        self.header = new_header;
        Ok(desc)
    }

    /// Tightens a section's protection. Loosening is rejected.
    pub fn set_protection(&mut self, kind: SectionKind, level: Protection) -> Result<()> {
        let current = self.header.section(kind).protection;
        if self.header.sealed && level != current {
            return Err(Error::SealedFile);
        }
        if level < current {
            return Err(Error::ProtectionDowngrade {
                kind,
                from: current,
                to: level,
            });
        }
        if level == current {
            return Ok(());
        }
        let mut new_header = self.header.clone();
        new_header.section_mut(kind).protection = level;
        self.write_header(new_header)
    }

    /// Marks the file sealed and every section read-only. Irreversible.
    pub fn seal(&mut self) -> Result<()> {
        if self.header.sealed {
            return Ok(());
        }
        let mut new_header = self.header.clone();
        new_header.sealed = true;
        for s in &mut new_header.sections {
            s.protection = Protection::ReadOnly;
        }
        self.write_header(new_header)
    }

    fn write_header(&mut self, header: ItemHeader) -> Result<()> {
        let page = header.to_page()?;
        self.file.seek(SeekFrom::Start(0))?;
        self.file.write_all(&page)?;
        self.file.flush()?;
        self.header = header;
        Ok(())
    }
}

fn write_zeros<W: Write>(w: &mut W, mut n: usize) -> std::io::Result<()> {
    const ZEROS: [u8; 4096] = [0; 4096];
    while n > 0 {
        let k = n.min(ZEROS.len());
        w.write_all(&ZEROS[..k])?;
        n -= k;
    }
    Ok(())
}
