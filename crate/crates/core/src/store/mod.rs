//! Item lifecycle on a sharded directory tree.
//!
//! ```text
//! <root>/cif.conf                  store configuration (key=value)
//! <root>/cif.lock                  advisory lock for sequential id allocation
//! <root>/next_id                   sequential allocation counter
//! <root>/staging/                  files being written before publication
//! <root>/items/11/22/33/44/55/66/77/88   item 1122334455667788
//! ```
//!
//! Item files are locked with OS advisory locks: exclusive for writers,
//! shared for readers. New files are written to `staging/` and published
//! with a no-clobber hard link, so readers never see a partial item and an
//! id collision is detected atomically.

mod config;
mod layout;

use std::collections::{HashSet, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

pub use config::{IdAllocation, StoreConfig};
pub use layout::{id_from_path, path_for, ItemId, ParseItemIdError};

use crate::catalog::{Catalog, IndexDocument};
use crate::error::{Error, Result};
use crate::format::{
    encode_item, metadata, ItemFile, ItemHandle, ItemHeader, ItemIdentity, MetadataEntry,
    Protection, Relation, RelationType, SectionKind, TargetKind,
};
use crate::signatures::{self, Algorithm, CoveredRange, Verification};

pub const CONFIG_FILE: &str = "cif.conf";
pub const ITEMS_DIR: &str = "items";
const STAGING_DIR: &str = "staging";
const LOCK_FILE: &str = "cif.lock";
const COUNTER_FILE: &str = "next_id";
const MAX_ID_ATTEMPTS: u32 = 16;

/// Metadata attribute naming a rendition's format.
pub const FORMAT_ATTRIBUTE: &str = "format";
/// Metadata attribute declaring the content media type.
pub const CONTENT_TYPE_ATTRIBUTE: &str = "content_type";

pub fn now_micros() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_micros() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CorruptItem {
    pub id: ItemId,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RebuildStats {
    pub items_scanned: usize,
    pub agents_built: usize,
    pub corrupt: Vec<CorruptItem>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FsckReport {
    pub checked: usize,
    pub corrupt: Vec<CorruptItem>,
}

#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    config: StoreConfig,
    catalog: Arc<Catalog>,
}

impl Store {
    /// Creates a new store at `root` (the directory may already exist but
    /// must not hold a store).
    pub fn init(root: impl AsRef<Path>, config: StoreConfig) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join(ITEMS_DIR))?;
        fs::create_dir_all(root.join(STAGING_DIR))?;
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(root.join(CONFIG_FILE))
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => {
                    Error::Config(format!("{} already holds a store", root.display()))
                }
                _ => e.into(),
            })?;
        f.write_all(config.to_text().as_bytes())?;
        f.sync_all()?;
        Ok(Self {
            root,
            config,
            catalog: Arc::new(Catalog::new()),
        })
    }

    /// Opens an existing store with an empty catalog; call
    /// [`rebuild_catalog`](Store::rebuild_catalog) to index existing items.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let config = StoreConfig::load(&root.join(CONFIG_FILE)).map_err(|e| match e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                Error::Config(format!("no store at {}", root.display()))
            }
            e => e,
        })?;
        Ok(Self {
            root,
            config,
            catalog: Arc::new(Catalog::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn catalog(&self) -> &Arc<Catalog> {
        &self.catalog
    }

    pub fn items_dir(&self) -> PathBuf {
        self.root.join(ITEMS_DIR)
    }

    pub fn item_path(&self, id: ItemId) -> PathBuf {
        self.items_dir().join(path_for(id))
    }

    pub fn exists(&self, id: ItemId) -> bool {
        self.item_path(id).is_file()
    }

    fn ensure_writable(&self) -> Result<()> {
        if self.config.worm_mode {
            Err(Error::StoreSealed)
        } else {
            Ok(())
        }
    }

    fn open_locked(&self, id: ItemId, write: bool) -> Result<File> {
        let file = OpenOptions::new()
            .read(true)
            .write(write)
            .open(self.item_path(id))
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::NotFound(id),
                _ => e.into(),
            })?;
        if write {
            file.lock()?;
        } else {
            file.lock_shared()?;
        }
        Ok(file)
    }

    fn read_handle(&self, id: ItemId) -> Result<ItemHandle<File>> {
        ItemHandle::open(self.open_locked(id, false)?)
    }

    fn write_handle(&self, id: ItemId) -> Result<ItemHandle<File>> {
        ItemHandle::open(self.open_locked(id, true)?)
    }

    // ---- creation -------------------------------------------------------

    fn next_sequential_id(&self) -> Result<ItemId> {
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(self.root.join(LOCK_FILE))?;
        lock.lock()?;
        let mut counter = OpenOptions::new()
            .create(true)
            .truncate(false)
            .read(true)
            .write(true)
            .open(self.root.join(COUNTER_FILE))?;
        let mut text = String::new();
        counter.read_to_string(&mut text)?;
        let next: u64 = match text.trim() {
            "" => 1,
            t => t
                .parse()
                .map_err(|_| Error::Config(format!("corrupt id counter `{t}`")))?,
        };
        let id = ItemId::new(next).ok_or_else(|| Error::Config("id counter is zero".into()))?;
        counter.set_len(0)?;
        counter.seek(SeekFrom::Start(0))?;
        write!(counter, "{}", next + 1)?;
        counter.sync_all()?;
        Ok(id)
    }

    fn allocate_id(&self) -> Result<ItemId> {
        match self.config.id_allocation {
            IdAllocation::Random => loop {
                if let Some(id) = ItemId::new(rand::random()) {
                    return Ok(id);
                }
            },
            IdAllocation::Sequential => self.next_sequential_id(),
        }
    }

    /// Allocates an id, encodes the item built for it and publishes the file
    /// without ever overwriting an existing one.
    fn create_with(
        &self,
        page_size: u32,
        build: impl Fn(ItemId) -> ItemFile,
    ) -> Result<ItemId> {
        self.ensure_writable()?;
        let staging_dir = self.root.join(STAGING_DIR);
        fs::create_dir_all(&staging_dir)?;
        for _ in 0..MAX_ID_ATTEMPTS {
            let id = self.allocate_id()?;
            let bytes = encode_item(&build(id), page_size)?;
            let staging = staging_dir.join(format!("{id}.{:016x}", rand::random::<u64>()));
            {
                let mut f = File::create_new(&staging)?;
                f.write_all(&bytes)?;
                f.sync_all()?;
            }
            let target = self.item_path(id);
            fs::create_dir_all(target.parent().expect("item paths are nested"))?;
            let linked = fs::hard_link(&staging, &target);
            fs::remove_file(&staging)?;
            match linked {
                Ok(()) => {
                    self.notify(id, self.catalog.next_sequence());
                    return Ok(id);
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    log::debug!("item id {id} already taken, retrying");
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(Error::IdCollision(MAX_ID_ATTEMPTS))
    }

    pub fn create_item(
        &self,
        metadata: Vec<MetadataEntry>,
        content: Vec<u8>,
        page_size: Option<u32>,
    ) -> Result<ItemId> {
        metadata::validate_entries(&metadata)?;
        let page_size = page_size.unwrap_or(self.config.default_page_size);
        self.create_with(page_size, |id| {
            let mut item = ItemFile::new(ItemIdentity::first_version(id));
            item.metadata = metadata.clone();
            item.content = content.clone();
            item
        })
    }

    /// Adds the next version of `predecessor`'s series. The predecessor file
    /// is only read; the link lives in the new item.
    pub fn create_version(
        &self,
        predecessor: ItemId,
        metadata: Vec<MetadataEntry>,
        content: Vec<u8>,
    ) -> Result<ItemId> {
        self.ensure_writable()?;
        metadata::validate_entries(&metadata)?;
        let prev = self.read_handle(predecessor)?.header().clone();
        let version_id = prev.identity.version_id.checked_add(1).ok_or_else(|| {
            Error::InvalidItem(format!("series of {predecessor} has no versions left"))
        })?;
        self.create_with(prev.page_size, |id| {
            let mut item = ItemFile::new(ItemIdentity {
                item_id: id,
                series_id: prev.identity.series_id,
                version_id,
            });
            item.metadata = metadata.clone();
            item.relations = vec![Relation::previous_version(predecessor.get())];
            item.content = content.clone();
            item
        })
    }

    /// Stores an alternative format of `of`. Only the `format` attribute is
    /// stored; everything else is inherited through the rendition link.
    pub fn add_rendition(&self, of: ItemId, format_label: &str, content: Vec<u8>) -> Result<ItemId> {
        self.ensure_writable()?;
        let page_size = self.read_handle(of)?.header().page_size;
        let entry = MetadataEntry::string(FORMAT_ATTRIBUTE, format_label);
        entry.validate()?;
        self.create_with(page_size, |id| {
            let mut item = ItemFile::new(ItemIdentity::first_version(id));
            item.metadata = vec![entry.clone()];
            item.relations = vec![Relation::rendition_of(of.get())];
            item.content = content.clone();
            item
        })
    }

    // ---- reads ----------------------------------------------------------

    pub fn read_item(&self, id: ItemId) -> Result<ItemFile> {
        self.read_handle(id)?.read_item()
    }

    pub fn read_header(&self, id: ItemId) -> Result<ItemHeader> {
        Ok(self.read_handle(id)?.header().clone())
    }

    /// Raw file bytes, read under a shared lock.
    pub fn read_file_bytes(&self, id: ItemId) -> Result<Vec<u8>> {
        let mut f = self.open_locked(id, false)?;
        let mut out = Vec::new();
        f.read_to_end(&mut out)?;
        Ok(out)
    }

    /// Own entries plus everything reachable over rendition links,
    /// breadth-first; the nearest item wins a name conflict. Unreadable
    /// targets are skipped.
    pub fn resolve_effective_metadata(&self, id: ItemId) -> Result<Vec<MetadataEntry>> {
        let item = self.read_item(id)?;
        Ok(self.resolve_from(&item))
    }

    fn resolve_from(&self, item: &ItemFile) -> Vec<MetadataEntry> {
        let mut out = item.metadata.clone();
        let mut names: HashSet<String> = out.iter().map(|e| e.name.clone()).collect();
        let mut visited = HashSet::from([item.identity.item_id]);
        let mut queue: VecDeque<ItemId> = rendition_targets(&item.relations).collect();
        while let Some(next) = queue.pop_front() {
            if !visited.insert(next) {
                continue;
            }
            let target = match self.read_item(next) {
                Ok(t) => t,
                Err(e) => {
                    log::warn!("skipping rendition target {next}: {e}");
                    continue;
                }
            };
            for entry in target.metadata {
                if names.insert(entry.name.clone()) {
                    out.push(entry);
                }
            }
            queue.extend(rendition_targets(&target.relations));
        }
        out
    }

    /// Catalog input for one item: effective metadata, text content and
    /// rendition targets.
    pub fn index_document(&self, id: ItemId) -> Result<IndexDocument> {
        let item = self.read_item(id)?;
        Ok(self.document_for(item))
    }

    fn document_for(&self, item: ItemFile) -> IndexDocument {
        let effective = self.resolve_from(&item);
        let content_text =
            content_is_text(&item.metadata, &effective).then(|| String::from_utf8_lossy(&item.content).into_owned());
        IndexDocument {
            id: item.identity.item_id,
            effective,
            content_text,
            rendition_of: rendition_targets(&item.relations).collect(),
        }
    }

    fn notify(&self, id: ItemId, seq: u64) {
        match self.index_document(id) {
            Ok(doc) => self.catalog.notify_upsert(&doc, seq),
            Err(e) => log::warn!("catalog not updated for {id}: {e}"),
        }
        for dep in self.catalog.dependents(id) {
            let seq = self.catalog.next_sequence();
            match self.index_document(dep) {
                Ok(doc) => self.catalog.notify_upsert(&doc, seq),
                Err(e) => log::warn!("catalog not updated for dependent {dep}: {e}"),
            }
        }
    }

    // ---- mutations ------------------------------------------------------

    /// Upserts entries by name: existing names are replaced in place, new
    /// names are appended (so append-only metadata accepts pure additions).
    pub fn update_metadata(&self, id: ItemId, entries: Vec<MetadataEntry>) -> Result<()> {
        self.ensure_writable()?;
        metadata::validate_entries(&entries)?;
        let seq = {
            let mut handle = self.write_handle(id)?;
            let mut current = handle.read_item()?.metadata;
            for e in entries {
                match current.iter_mut().find(|c| c.name == e.name) {
                    Some(slot) => *slot = e,
                    None => current.push(e),
                }
            }
            handle.update_section(SectionKind::Metadata, &metadata::encode_entries(&current))?;
            self.catalog.next_sequence()
        };
        self.notify(id, seq);
        Ok(())
    }

    pub fn update_content(&self, id: ItemId, content: &[u8]) -> Result<()> {
        self.ensure_writable()?;
        let seq = {
            let mut handle = self.write_handle(id)?;
            handle.update_section(SectionKind::Content, content)?;
            self.catalog.next_sequence()
        };
        self.notify(id, seq);
        Ok(())
    }

    pub fn set_protection(&self, id: ItemId, kind: SectionKind, level: Protection) -> Result<()> {
        self.ensure_writable()?;
        self.write_handle(id)?.set_protection(kind, level)
    }

    /// Makes every section of the item read-only, irreversibly.
    pub fn seal_item(&self, id: ItemId) -> Result<()> {
        self.write_handle(id)?.seal()
    }

    pub fn sign(
        &self,
        id: ItemId,
        covered: Vec<CoveredRange>,
        algorithm: Algorithm,
        key: &[u8],
        signer_id: &str,
    ) -> Result<usize> {
        if self.config.worm_mode && !self.config.allow_sign_after_seal {
            return Err(Error::StoreSealed);
        }
        let mut handle = self.write_handle(id)?;
        signatures::sign(
            &mut handle,
            covered,
            algorithm,
            key,
            signer_id,
            now_micros(),
            self.config.allow_sign_after_seal,
        )
    }

    pub fn verify(&self, id: ItemId, record: usize, key: &[u8]) -> Result<Verification> {
        signatures::verify(&mut self.read_handle(id)?, record, key)
    }

    // ---- whole-store operations ------------------------------------------

    /// Every item id under the store, found by walking the shard tree.
    pub fn scan_store(&self) -> ScanIter {
        ScanIter::new(self.items_dir())
    }

    /// Discards the catalog and re-indexes every item from its file. Corrupt
    /// items are reported and skipped; an I/O failure while walking leaves
    /// the catalog invalid.
    pub fn rebuild_catalog(&self) -> Result<RebuildStats> {
        self.catalog.begin_rebuild();
        let mut stats = RebuildStats::default();
        for id in self.scan_store() {
            let id = match id {
                Ok(id) => id,
                Err(e) => {
                    self.catalog.finish_rebuild(false);
                    return Err(e);
                }
            };
            stats.items_scanned += 1;
            let seq = self.catalog.next_sequence();
            match self.index_document(id) {
                Ok(doc) => self.catalog.notify_upsert(&doc, seq),
                Err(Error::Io(e)) => {
                    self.catalog.finish_rebuild(false);
                    return Err(Error::Io(e));
                }
                Err(e) => stats.corrupt.push(CorruptItem {
                    id,
                    error: e.to_string(),
                }),
            }
        }
        self.catalog.finish_rebuild(true);
        stats.agents_built = self.catalog.attributes().len();
        Ok(stats)
    }

    /// Re-feeds a single attribute's agent from the files.
    pub fn reindex_attribute(&self, attribute: &str) -> Result<usize> {
        let mut n = 0;
        for id in self.scan_store() {
            let id = id?;
            if let Ok(doc) = self.index_document(id) {
                self.catalog
                    .notify_attribute(&doc, self.catalog.next_sequence(), attribute);
                n += 1;
            }
        }
        self.catalog.flush();
        Ok(n)
    }

    /// Decodes every item file and checks it sits at its own id's path.
    pub fn fsck(&self) -> Result<FsckReport> {
        let mut report = FsckReport::default();
        for id in self.scan_store() {
            let id = id?;
            report.checked += 1;
            let outcome = self
                .read_file_bytes(id)
                .and_then(|bytes| crate::format::decode_item(&bytes));
            let problem = match outcome {
                Ok(item) if item.identity.item_id != id => Some(format!(
                    "file at {id}'s path holds item {}",
                    item.identity.item_id
                )),
                Ok(_) => None,
                Err(Error::Io(e)) => return Err(Error::Io(e)),
                Err(e) => Some(e.to_string()),
            };
            if let Some(error) = problem {
                report.corrupt.push(CorruptItem { id, error });
            }
        }
        Ok(report)
    }
}

fn rendition_targets(relations: &[Relation]) -> impl Iterator<Item = ItemId> + '_ {
    relations
        .iter()
        .filter(|r| r.relation_type == RelationType::RENDITION_OF && r.target_kind == TargetKind::ItemId)
        .filter_map(|r| ItemId::new(r.target))
}

/// Content is indexed as text when the item's own `format` (renditions) or
/// else its effective `content_type` is a `text/*` media type.
fn content_is_text(own: &[MetadataEntry], effective: &[MetadataEntry]) -> bool {
    let media_type = |entries: &[MetadataEntry], name: &str| {
        entries.iter().find(|e| e.name == name).and_then(|e| match e.scalars().first() {
            Some(crate::format::Value::String(s)) => Some(s.clone()),
            _ => None,
        })
    };
    media_type(own, FORMAT_ATTRIBUTE)
        .or_else(|| media_type(effective, CONTENT_TYPE_ATTRIBUTE))
        .is_some_and(|t| t.starts_with("text/"))
}

/// Depth-first walk of the shard tree yielding item ids. Entries that are
/// not two-digit lowercase hex names are ignored.
pub struct ScanIter {
    base: PathBuf,
    stack: Vec<fs::ReadDir>,
    pending_error: Option<std::io::Error>,
}

impl ScanIter {
    fn new(base: PathBuf) -> Self {
        let mut it = Self {
            base,
            stack: Vec::new(),
            pending_error: None,
        };
        match fs::read_dir(&it.base) {
            Ok(rd) => it.stack.push(rd),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => it.pending_error = Some(e),
        }
        it
    }
}

impl Iterator for ScanIter {
    type Item = Result<ItemId>;

    fn next(&mut self) -> Option<Self::Item> {
        if let Some(e) = self.pending_error.take() {
            return Some(Err(e.into()));
        }
        loop {
            let depth = self.stack.len();
            let entry = match self.stack.last_mut()?.next() {
                None => {
                    self.stack.pop();
                    continue;
                }
                Some(Err(e)) => return Some(Err(e.into())),
                Some(Ok(entry)) => entry,
            };
            let name = entry.file_name();
            let valid = name
                .to_str()
                .is_some_and(|s| s.len() == 2 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')));
            if !valid {
                continue;
            }
            let file_type = match entry.file_type() {
                Ok(t) => t,
                Err(e) => return Some(Err(e.into())),
            };
            if depth < 8 && file_type.is_dir() {
                match fs::read_dir(entry.path()) {
                    Ok(rd) => self.stack.push(rd),
                    Err(e) => return Some(Err(e.into())),
                }
            } else if depth == 8 && file_type.is_file() {
                let path = entry.path();
                let rel = path.strip_prefix(&self.base).expect("walk stays under base");
                if let Some(id) = id_from_path(rel) {
                    return Some(Ok(id));
                }
            }
        }
    }
}
