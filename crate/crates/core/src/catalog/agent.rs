use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::sync::{Mutex, RwLock};

use super::keys::{IndexKey, KeyType, CONTENT_ATTRIBUTE};
use crate::error::{Error, Result};
use crate::format::Value;
use crate::store::ItemId;

/// Basic operator answered by a single agent.
#[derive(Debug, Clone, PartialEq)]
pub enum Operator {
    Eq(Value),
    /// Inclusive on both ends.
    Range(Value, Value),
    Exists,
    ContainsToken(String),
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operator::Eq(v) => write!(f, "= {v} ({})", v.scalar_type()),
            Operator::Range(lo, hi) => write!(f, "in [{lo}, {hi}] ({})", lo.scalar_type()),
            Operator::Exists => f.write_str("exists"),
            Operator::ContainsToken(t) => write!(f, "contains token {t:?}"),
        }
    }
}

/// Sorted, duplicate-free list of item ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PostingList(Vec<ItemId>);

impl PostingList {
    pub fn insert(&mut self, id: ItemId) {
        if let Err(pos) = self.0.binary_search(&id) {
            self.0.insert(pos, id);
        }
    }

    pub fn remove(&mut self, id: ItemId) {
        if let Ok(pos) = self.0.binary_search(&id) {
            self.0.remove(pos);
        }
    }

    pub fn ids(&self) -> &[ItemId] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug)]
pub(crate) struct PendingUpdate {
    pub id: ItemId,
    pub seq: u64,
    /// Current keys of the item for this attribute; empty removes it.
    pub keys: Vec<IndexKey>,
}

#[derive(Debug, Default)]
struct AgentIndex {
    postings: BTreeMap<IndexKey, PostingList>,
    by_item: HashMap<ItemId, (u64, Vec<IndexKey>)>,
    type_counts: BTreeMap<KeyType, usize>,
}

impl AgentIndex {
    fn apply(&mut self, update: PendingUpdate) {
        if let Some((seq, _)) = self.by_item.get(&update.id) {
            if *seq > update.seq {
                return;
            }
        }
        if let Some((_, old)) = self.by_item.remove(&update.id) {
            for key in old {
                if let Some(list) = self.postings.get_mut(&key) {
                    list.remove(update.id);
                    if list.is_empty() {
                        *self.type_counts.get_mut(&key.key_type()).unwrap() -= 1;
                        self.postings.remove(&key);
                    }
                }
            }
        }
        for key in &update.keys {
            let list = self.postings.entry(key.clone()).or_insert_with(|| {
                *self.type_counts.entry(key.key_type()).or_default() += 1;
                PostingList::default()
            });
            list.insert(update.id);
        }
        // A removal still records its sequence so an older, delayed upsert
        // cannot resurrect stale keys.
        self.by_item.insert(update.id, (update.seq, update.keys));
    }

    fn has_type(&self, ty: KeyType) -> bool {
        self.type_counts.get(&ty).is_some_and(|&n| n > 0)
    }

    fn is_empty(&self) -> bool {
        self.postings.is_empty()
    }
}

/// Index over exactly one attribute. Updates are queued by writers and
/// applied by whichever caller holds the index write lock, so a single
/// consumer applies them in queue order.
#[derive(Debug)]
pub struct IndexAgent {
    attribute: String,
    queue: Mutex<VecDeque<PendingUpdate>>,
    index: RwLock<AgentIndex>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentStats {
    pub attribute: String,
    pub distinct_keys: usize,
    pub items: usize,
    pub pending: usize,
}

impl IndexAgent {
    pub(crate) fn new(attribute: impl Into<String>) -> Self {
        Self {
            attribute: attribute.into(),
            queue: Mutex::new(VecDeque::new()),
            index: RwLock::new(AgentIndex::default()),
        }
    }

    pub fn attribute(&self) -> &str {
        &self.attribute
    }

    pub(crate) fn enqueue(&self, update: PendingUpdate) {
        self.queue.lock().unwrap().push_back(update);
    }

    /// Applies queued updates. Non-blocking drains give up if another thread
    /// already holds the index; that thread rechecks the queue before leaving.
    pub(crate) fn drain(&self, blocking: bool) {
        loop {
            let mut index = if blocking {
                self.index.write().unwrap()
            } else {
                match self.index.try_write() {
                    Ok(guard) => guard,
                    Err(_) => return,
                }
            };
            loop {
                let next = self.queue.lock().unwrap().pop_front();
                match next {
                    Some(update) => index.apply(update),
                    None => break,
                }
            }
            drop(index);
            if self.queue.lock().unwrap().is_empty() {
                return;
            }
        }
    }

    pub fn stats(&self) -> AgentStats {
        let index = self.index.read().unwrap();
        AgentStats {
            attribute: self.attribute.clone(),
            distinct_keys: index.postings.len(),
            items: index.by_item.values().filter(|(_, k)| !k.is_empty()).count(),
            pending: self.queue.lock().unwrap().len(),
        }
    }

    fn is_text_agent(&self) -> bool {
        self.attribute == CONTENT_ATTRIBUTE
    }

    fn mismatch(&self, reason: impl Into<String>) -> Error {
        Error::OperatorTypeMismatch {
            attribute: self.attribute.clone(),
            reason: reason.into(),
        }
    }

    /// Checks that `op` can be evaluated by this agent against its current
    /// postings.
    pub fn check(&self, op: &Operator) -> Result<()> {
        self.drain(true);
        let index = self.index.read().unwrap();
        self.check_locked(&index, op)
    }

    fn check_locked(&self, index: &AgentIndex, op: &Operator) -> Result<()> {
        match op {
            Operator::ContainsToken(_) if !self.is_text_agent() => {
                Err(self.mismatch("token search applies only to content"))
            }
            Operator::Eq(_) | Operator::Range(..) if self.is_text_agent() => {
                Err(self.mismatch("content supports token search and exists only"))
            }
            Operator::Range(lo, hi) => {
                let ty = lo.scalar_type();
                if hi.scalar_type() != ty {
                    return Err(self.mismatch(format!(
                        "range bounds have different types ({ty} and {})",
                        hi.scalar_type()
                    )));
                }
                if !index.is_empty() && !index.has_type(KeyType::Scalar(ty)) {
                    return Err(self.mismatch(format!("no {ty} values to compare against")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Ids satisfying `op`, ascending and duplicate-free.
    pub fn lookup(&self, op: &Operator) -> Result<Vec<ItemId>> {
        self.drain(true);
        let index = self.index.read().unwrap();
        self.check_locked(&index, op)?;
        Ok(match op {
            Operator::Eq(v) => index
                .postings
                .get(&IndexKey::from(v))
                .map(|l| l.ids().to_vec())
                .unwrap_or_default(),
            Operator::Range(lo, hi) => {
                let (lo, hi) = (IndexKey::from(lo), IndexKey::from(hi));
                if lo > hi {
                    return Ok(Vec::new());
                }
                let ids: BTreeSet<ItemId> = index
                    .postings
                    .range(lo..=hi)
                    .flat_map(|(_, l)| l.ids().iter().copied())
                    .collect();
                ids.into_iter().collect()
            }
            Operator::Exists => {
                let mut ids: Vec<ItemId> = index
                    .by_item
                    .iter()
                    .filter(|(_, (_, keys))| !keys.is_empty())
                    .map(|(id, _)| *id)
                    .collect();
                ids.sort_unstable();
                ids
            }
            Operator::ContainsToken(token) => {
                let token: String = token.to_lowercase();
                index
                    .postings
                    .get(&IndexKey::Token(token))
                    .map(|l| l.ids().to_vec())
                    .unwrap_or_default()
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(n: u64) -> ItemId {
        ItemId::new(n).unwrap()
    }

    fn agent_with(values: &[(u64, Value)]) -> IndexAgent {
        let agent = IndexAgent::new("year");
        for (seq, (n, v)) in values.iter().enumerate() {
            agent.enqueue(PendingUpdate {
                id: id(*n),
                seq: seq as u64,
                keys: vec![IndexKey::from(v)],
            });
        }
        agent.drain(true);
        agent
    }

    #[test]
    fn empty_agent_yields_nothing() {
        let agent = IndexAgent::new("author");
        assert!(agent.lookup(&Operator::Eq(Value::String("x".into()))).unwrap().is_empty());
        assert!(agent
            .lookup(&Operator::Range(Value::Int64(1), Value::Int64(2)))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn range_is_inclusive_against_linear_scan() {
        let data: Vec<(u64, Value)> = (1..=60)
            .map(|n| (n, Value::Int64(1990 + (n as i64 * 7) % 30)))
            .collect();
        let agent = agent_with(&data);
        let got = agent
            .lookup(&Operator::Range(Value::Int64(2000), Value::Int64(2005)))
            .unwrap();
        let expected: Vec<ItemId> = data
            .iter()
            .filter(|(_, v)| matches!(v, Value::Int64(y) if (2000..=2005).contains(y)))
            .map(|(n, _)| id(*n))
            .collect();
        assert_eq!(got, expected);
        assert!(agent
            .lookup(&Operator::Range(Value::Int64(2005), Value::Int64(2000)))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn range_needs_comparable_postings() {
        let agent = agent_with(&[(1, Value::String("2001".into()))]);
        assert!(matches!(
            agent.lookup(&Operator::Range(Value::Int64(0), Value::Int64(9))),
            Err(Error::OperatorTypeMismatch { .. })
        ));
        assert!(matches!(
            agent.lookup(&Operator::Range(Value::Int64(0), Value::Float64(9.0))),
            Err(Error::OperatorTypeMismatch { .. })
        ));
        assert!(matches!(
            agent.lookup(&Operator::ContainsToken("x".into())),
            Err(Error::OperatorTypeMismatch { .. })
        ));
    }

    #[test]
    fn mixed_types_compare_within_type() {
        let agent = agent_with(&[
            (1, Value::Int64(2001)),
            (2, Value::String("2001".into())),
            (3, Value::Float64(2001.0)),
        ]);
        assert_eq!(
            agent.lookup(&Operator::Range(Value::Int64(0), Value::Int64(3000))).unwrap(),
            vec![id(1)]
        );
        assert_eq!(
            agent.lookup(&Operator::Eq(Value::String("2001".into()))).unwrap(),
            vec![id(2)]
        );
        assert_eq!(agent.lookup(&Operator::Exists).unwrap(), vec![id(1), id(2), id(3)]);
    }

    #[test]
    fn stale_values_are_replaced_and_old_sequences_ignored() {
        let agent = IndexAgent::new("author");
        let ana = Value::String("ana".into());
        let bob = Value::String("bob".into());
        agent.enqueue(PendingUpdate { id: id(1), seq: 1, keys: vec![IndexKey::from(&ana)] });
        agent.enqueue(PendingUpdate { id: id(1), seq: 3, keys: vec![IndexKey::from(&bob)] });
        agent.enqueue(PendingUpdate { id: id(1), seq: 2, keys: vec![IndexKey::from(&ana)] });
        assert!(agent.lookup(&Operator::Eq(ana)).unwrap().is_empty());
        assert_eq!(agent.lookup(&Operator::Eq(bob.clone())).unwrap(), vec![id(1)]);
        agent.enqueue(PendingUpdate { id: id(1), seq: 4, keys: vec![] });
        assert!(agent.lookup(&Operator::Eq(bob)).unwrap().is_empty());
        assert!(agent.lookup(&Operator::Exists).unwrap().is_empty());
        assert_eq!(agent.stats().distinct_keys, 0);
    }

    #[test]
    fn posting_list_stays_sorted_and_unique() {
        let mut list = PostingList::default();
        for n in [5, 1, 3, 5, 1, 9] {
            list.insert(id(n));
        }
        assert_eq!(list.ids(), &[id(1), id(3), id(5), id(9)]);
        list.remove(id(3));
        list.remove(id(4));
        assert_eq!(list.ids(), &[id(1), id(5), id(9)]);
    }
}
