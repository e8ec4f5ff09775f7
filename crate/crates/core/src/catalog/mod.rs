//! Rebuildable, non-authoritative index layer.
//!
//! The catalog holds one [`IndexAgent`] per metadata attribute (created the
//! first time the attribute is seen) plus the `$content` text agent. Item
//! files stay the source of truth; the whole catalog can be discarded and
//! rebuilt from a store scan.

mod agent;
mod keys;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

pub use agent::{AgentStats, IndexAgent, Operator, PostingList};
pub use keys::{extract_keys, tokenize, FloatKey, IndexKey, KeyType, CONTENT_ATTRIBUTE};

use agent::PendingUpdate;
use crate::error::{Error, Result};
use crate::format::MetadataEntry;
use crate::store::ItemId;

/// What the store hands the catalog after a create or update.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexDocument {
    pub id: ItemId,
    /// Own entries merged with everything inherited through renditions.
    pub effective: Vec<MetadataEntry>,
    /// Content as text, only for items whose content is declared `text/*`.
    pub content_text: Option<String>,
    /// Direct rendition targets, tracked so updates can re-index dependents.
    pub rendition_of: Vec<ItemId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CatalogState {
    Valid,
    Rebuilding,
    /// The last rebuild failed; queries are refused until one completes.
    Invalid,
}

#[derive(Debug, Default)]
struct ItemRegistry {
    items: HashMap<ItemId, ItemEntry>,
    /// target -> items that are renditions of it
    renditions: HashMap<ItemId, BTreeSet<ItemId>>,
}

#[derive(Debug, Default)]
struct ItemEntry {
    seq: u64,
    attributes: BTreeSet<String>,
    rendition_of: Vec<ItemId>,
}

#[derive(Debug)]
pub struct Catalog {
    agents: RwLock<BTreeMap<String, Arc<IndexAgent>>>,
    registry: Mutex<ItemRegistry>,
    state: Mutex<CatalogState>,
    seq: AtomicU64,
}

impl Default for Catalog {
    fn default() -> Self {
        Self::new()
    }
}

impl Catalog {
    pub fn new() -> Self {
        Self {
            agents: RwLock::new(BTreeMap::new()),
            registry: Mutex::new(ItemRegistry::default()),
            state: Mutex::new(CatalogState::Valid),
            seq: AtomicU64::new(1),
        }
    }

    /// Per-item ordering token. Writers take it while holding the item's
    /// write lock, so a later write always carries a larger sequence.
    pub fn next_sequence(&self) -> u64 {
        self.seq.fetch_add(1, Ordering::Relaxed)
    }

    pub fn state(&self) -> CatalogState {
        *self.state.lock().unwrap()
    }

    pub fn ensure_queryable(&self) -> Result<()> {
        match self.state() {
            CatalogState::Valid => Ok(()),
            _ => Err(Error::CatalogRebuilding),
        }
    }

    fn agent_or_create(&self, attribute: &str) -> Arc<IndexAgent> {
        if let Some(a) = self.agents.read().unwrap().get(attribute) {
            return a.clone();
        }
        self.agents
            .write()
            .unwrap()
            .entry(attribute.to_string())
            .or_insert_with(|| Arc::new(IndexAgent::new(attribute)))
            .clone()
    }

    /// Queues the item's current values with every agent that indexes (or
    /// used to index) one of its attributes. Returns once every agent has
    /// accepted its update; indexing itself may finish later (see [`flush`]).
    ///
    /// [`flush`]: Catalog::flush
    pub fn notify_upsert(&self, doc: &IndexDocument, seq: u64) {
        self.notify_inner(doc, seq, None);
    }

    /// Like [`notify_upsert`](Catalog::notify_upsert) but only feeds the
    /// agent for `attribute`.
    pub fn notify_attribute(&self, doc: &IndexDocument, seq: u64, attribute: &str) {
        self.notify_inner(doc, seq, Some(attribute));
    }

    fn notify_inner(&self, doc: &IndexDocument, seq: u64, only: Option<&str>) {
        let mut keys = extract_keys(&doc.effective, doc.content_text.as_deref());
        let mut touched = Vec::new();
        {
            let mut reg = self.registry.lock().unwrap();
            let entry = reg.items.entry(doc.id).or_default();
            if entry.seq > seq {
                log::debug!("dropping stale catalog update for {} (seq {seq})", doc.id);
                return;
            }
            let mut attributes: BTreeSet<String> = entry.attributes.clone();
            attributes.extend(keys.keys().cloned());
            if only.is_none() {
                entry.seq = seq;
                entry.attributes = keys.keys().cloned().collect();
                let old_targets = std::mem::replace(&mut entry.rendition_of, doc.rendition_of.clone());
                for t in old_targets {
                    if let Some(set) = reg.renditions.get_mut(&t) {
                        set.remove(&doc.id);
                    }
                }
                for t in &doc.rendition_of {
                    reg.renditions.entry(*t).or_default().insert(doc.id);
                }
            }
            for attr in attributes {
                if only.is_some_and(|o| o != attr) {
                    continue;
                }
                let agent = self.agent_or_create(&attr);
                agent.enqueue(PendingUpdate {
                    id: doc.id,
                    seq,
                    keys: keys.remove(&attr).unwrap_or_default(),
                });
                touched.push(agent);
            }
        }
        for agent in touched {
            agent.drain(false);
        }
    }

    /// Blocks until every agent's queue is applied.
    pub fn flush(&self) {
        let agents: Vec<_> = self.agents.read().unwrap().values().cloned().collect();
        for a in agents {
            a.drain(true);
        }
    }

    pub fn agent(&self, attribute: &str) -> Option<Arc<IndexAgent>> {
        self.agents.read().unwrap().get(attribute).cloned()
    }

    pub fn attributes(&self) -> Vec<String> {
        self.agents.read().unwrap().keys().cloned().collect()
    }

    pub fn agent_stats(&self) -> Vec<AgentStats> {
        let agents: Vec<_> = self.agents.read().unwrap().values().cloned().collect();
        agents.iter().map(|a| a.stats()).collect()
    }

    /// Discards one agent's state. Re-notifying that attribute restores it.
    pub fn drop_agent(&self, attribute: &str) -> bool {
        self.agents.write().unwrap().remove(attribute).is_some()
    }

    /// Validates `op` for `attribute` without needing the agent to exist.
    pub fn check(&self, attribute: &str, op: &Operator) -> Result<()> {
        match self.agent(attribute) {
            Some(agent) => agent.check(op),
            None => IndexAgent::new(attribute).check(op),
        }
    }

    /// Ids matching one basic operator, ascending. Unknown attributes yield
    /// nothing.
    pub fn lookup(&self, attribute: &str, op: &Operator) -> Result<Vec<ItemId>> {
        self.ensure_queryable()?;
        match self.agent(attribute) {
            Some(agent) => agent.lookup(op),
            None => IndexAgent::new(attribute).lookup(op),
        }
    }

    /// Items that inherit from `id` through rendition links, transitively.
    pub fn dependents(&self, id: ItemId) -> Vec<ItemId> {
        let reg = self.registry.lock().unwrap();
        let mut seen = HashSet::from([id]);
        let mut out = Vec::new();
        let mut queue = VecDeque::from([id]);
        while let Some(next) = queue.pop_front() {
            for &r in reg.renditions.get(&next).into_iter().flatten() {
                if seen.insert(r) {
                    out.push(r);
                    queue.push_back(r);
                }
            }
        }
        out
    }

    pub fn item_count(&self) -> usize {
        self.registry.lock().unwrap().items.len()
    }

    /// Drops every agent and marks the catalog as rebuilding.
    pub fn begin_rebuild(&self) {
        *self.state.lock().unwrap() = CatalogState::Rebuilding;
        self.agents.write().unwrap().clear();
        *self.registry.lock().unwrap() = ItemRegistry::default();
    }

    pub fn finish_rebuild(&self, success: bool) {
        self.flush();
        *self.state.lock().unwrap() = if success {
            CatalogState::Valid
        } else {
            CatalogState::Invalid
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::Value;

    fn id(n: u64) -> ItemId {
        ItemId::new(n).unwrap()
    }

    fn doc(n: u64, entries: Vec<MetadataEntry>, text: Option<&str>) -> IndexDocument {
        IndexDocument {
            id: id(n),
            effective: entries,
            content_text: text.map(str::to_string),
            rendition_of: vec![],
        }
    }

    fn eq(s: &str) -> Operator {
        Operator::Eq(Value::String(s.into()))
    }

    #[test]
    fn upsert_then_lookup() {
        let c = Catalog::new();
        c.notify_upsert(&doc(1, vec![MetadataEntry::string("author", "ana")], None), c.next_sequence());
        c.flush();
        assert_eq!(c.lookup("author", &eq("ana")).unwrap(), vec![id(1)]);
        assert!(c.lookup("nobody", &eq("ana")).unwrap().is_empty());
    }

    #[test]
    fn changed_and_removed_values_leave_the_index() {
        let c = Catalog::new();
        c.notify_upsert(
            &doc(1, vec![MetadataEntry::string("author", "ana"), MetadataEntry::int("year", 1)], None),
            c.next_sequence(),
        );
        c.notify_upsert(&doc(1, vec![MetadataEntry::string("author", "bob")], None), c.next_sequence());
        c.flush();
        assert!(c.lookup("author", &eq("ana")).unwrap().is_empty());
        assert_eq!(c.lookup("author", &eq("bob")).unwrap(), vec![id(1)]);
        assert!(c.lookup("year", &Operator::Exists).unwrap().is_empty());
    }

    #[test]
    fn text_agent_matches_whole_tokens_only() {
        let c = Catalog::new();
        c.notify_upsert(&doc(1, vec![], Some("The quick fox")), c.next_sequence());
        let hits = |t: &str| c.lookup(CONTENT_ATTRIBUTE, &Operator::ContainsToken(t.into())).unwrap();
        assert_eq!(hits("quick"), vec![id(1)]);
        assert_eq!(hits("QUICK"), vec![id(1)]);
        assert!(hits("quicker").is_empty());
        assert!(matches!(
            c.lookup(CONTENT_ATTRIBUTE, &eq("quick")),
            Err(Error::OperatorTypeMismatch { .. })
        ));
        assert!(matches!(
            c.lookup("author", &Operator::ContainsToken("x".into())),
            Err(Error::OperatorTypeMismatch { .. })
        ));
    }

    #[test]
    fn dropped_agent_is_restored_by_reindexing_that_attribute() {
        let c = Catalog::new();
        let docs: Vec<_> = (1..=5)
            .map(|n| {
                doc(
                    n,
                    vec![
                        MetadataEntry::string("author", if n % 2 == 0 { "ana" } else { "bob" }),
                        MetadataEntry::int("year", 2000 + n as i64),
                    ],
                    None,
                )
            })
            .collect();
        for d in &docs {
            c.notify_upsert(d, c.next_sequence());
        }
        c.flush();
        let before = c.lookup("author", &eq("ana")).unwrap();
        let year_agent = c.agent("year").unwrap();
        assert!(c.drop_agent("author"));
        assert!(c.lookup("author", &eq("ana")).unwrap().is_empty());
        for d in &docs {
            c.notify_attribute(d, c.next_sequence(), "author");
        }
        c.flush();
        assert_eq!(c.lookup("author", &eq("ana")).unwrap(), before);
        assert!(Arc::ptr_eq(&year_agent, &c.agent("year").unwrap()));
    }

    #[test]
    fn rebuilding_catalog_refuses_queries() {
        let c = Catalog::new();
        c.begin_rebuild();
        assert!(matches!(c.lookup("a", &Operator::Exists), Err(Error::CatalogRebuilding)));
        c.finish_rebuild(false);
        assert_eq!(c.state(), CatalogState::Invalid);
        assert!(c.lookup("a", &Operator::Exists).is_err());
        c.begin_rebuild();
        c.finish_rebuild(true);
        assert!(c.lookup("a", &Operator::Exists).unwrap().is_empty());
    }

    #[test]
    fn dependents_follow_rendition_chains_without_looping() {
        let c = Catalog::new();
        let mut d2 = doc(2, vec![], None);
        d2.rendition_of = vec![id(1)];
        let mut d3 = doc(3, vec![], None);
        d3.rendition_of = vec![id(2)];
        let mut d1 = doc(1, vec![], None);
        d1.rendition_of = vec![id(3)];
        for d in [&d1, &d2, &d3] {
            c.notify_upsert(d, c.next_sequence());
        }
        assert_eq!(c.dependents(id(1)), vec![id(2), id(3)]);
    }

    #[test]
    fn concurrent_notifiers_converge() {
        let c = Arc::new(Catalog::new());
        std::thread::scope(|s| {
            for t in 0..4u64 {
                let c = c.clone();
                s.spawn(move || {
                    for n in 0..200u64 {
                        let item = t * 1000 + n + 1;
                        let d = doc(item, vec![MetadataEntry::int("n", n as i64)], None);
                        c.notify_upsert(&d, c.next_sequence());
                    }
                });
            }
        });
        c.flush();
        assert_eq!(c.lookup("n", &Operator::Exists).unwrap().len(), 800);
        assert_eq!(
            c.lookup("n", &Operator::Eq(Value::Int64(7))).unwrap(),
            vec![id(8), id(1008), id(2008), id(3008)]
        );
    }
}
