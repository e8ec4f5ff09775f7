//! Conjunctive queries over the catalog.
//!
//! A query is split into its basic predicates; each predicate runs on its own
//! lane (thread) against the agent for its attribute, and a single aggregator
//! merges the lane streams. Items are reported as soon as they match enough
//! predicates: a partial result once `ceil(threshold × k)` of the `k`
//! predicates matched, a complete result once all of them did. There is no
//! plan or reordering step.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::mpsc::{self, Receiver};
use std::sync::Arc;
use std::thread;

use serde::Serialize;

use crate::catalog::{extract_keys, Catalog, IndexAgent, IndexKey, Operator, CONTENT_ATTRIBUTE};
use crate::error::{Error, Result};
use crate::format::Value;
use crate::store::{ItemId, Store};

const LANE_BUFFER: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct Predicate {
    pub attribute: String,
    pub operator: Operator,
}

impl Predicate {
    pub fn new(attribute: impl Into<String>, operator: Operator) -> Self {
        Self {
            attribute: attribute.into(),
            operator,
        }
    }

    pub fn eq(attribute: impl Into<String>, value: Value) -> Self {
        Self::new(attribute, Operator::Eq(value))
    }

    pub fn range(attribute: impl Into<String>, lo: Value, hi: Value) -> Self {
        Self::new(attribute, Operator::Range(lo, hi))
    }

    pub fn exists(attribute: impl Into<String>) -> Self {
        Self::new(attribute, Operator::Exists)
    }

    pub fn contains_text(token: impl Into<String>) -> Self {
        Self::new(CONTENT_ATTRIBUTE, Operator::ContainsToken(token.into()))
    }

    /// Evaluates the predicate against an item's extracted keys (see
    /// [`extract_keys`]), with the same semantics the agents apply.
    pub fn matches(&self, keys: &BTreeMap<String, Vec<IndexKey>>) -> bool {
        let Some(values) = keys.get(&self.attribute) else {
            return false;
        };
        match &self.operator {
            Operator::Eq(v) => values.contains(&IndexKey::from(v)),
            Operator::Range(lo, hi) => {
                let (lo, hi) = (IndexKey::from(lo), IndexKey::from(hi));
                values.iter().any(|k| *k >= lo && *k <= hi)
            }
            Operator::Exists => !values.is_empty(),
            Operator::ContainsToken(t) => {
                self.attribute == CONTENT_ATTRIBUTE
                    && values.contains(&IndexKey::Token(t.to_lowercase()))
            }
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.attribute, self.operator)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    predicates: Vec<Predicate>,
    partial_threshold: f64,
}

impl Query {
    pub fn new(predicates: Vec<Predicate>) -> Result<Self> {
        if predicates.is_empty() {
            return Err(Error::InvalidQuery("a query needs at least one predicate".into()));
        }
        Ok(Self {
            predicates,
            partial_threshold: 1.0,
        })
    }

    /// Fraction of predicates an item must match to be reported as a
    /// partial result; must lie in (0, 1].
    pub fn with_partial_threshold(mut self, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(Error::InvalidQuery(format!(
                "partial threshold {threshold} not in (0, 1]"
            )));
        }
        self.partial_threshold = threshold;
        Ok(self)
    }

    pub fn predicates(&self) -> &[Predicate] {
        &self.predicates
    }

    pub fn partial_threshold(&self) -> f64 {
        self.partial_threshold
    }

    /// Matched-predicate count at which a partial result is emitted.
    pub fn partial_at(&self) -> usize {
        let k = self.predicates.len();
        // tolerate representation error such as 0.3 * 10 = 3.0000000000000004
        let raw = (self.partial_threshold * k as f64 - 1e-9).ceil();
        (raw as usize).clamp(1, k)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QueryResult {
    pub item_id: ItemId,
    /// Indices of the predicates matched when the result was emitted.
    pub matched: Vec<usize>,
    pub complete: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct QuerySummary {
    pub complete: usize,
    /// Items reported as partial that never became complete.
    pub partial_only: usize,
    /// Complete index matches dropped because the file did not satisfy the
    /// query (only with verification enabled).
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QueryEvent {
    Result(QueryResult),
    Summary(QuerySummary),
}

/// Source of truth used to double-check complete results.
pub trait ItemSource {
    fn satisfies(&self, id: ItemId, predicates: &[Predicate]) -> Result<bool>;
}

impl ItemSource for Store {
    fn satisfies(&self, id: ItemId, predicates: &[Predicate]) -> Result<bool> {
        let doc = self.index_document(id)?;
        let keys = extract_keys(&doc.effective, doc.content_text.as_deref());
        Ok(predicates.iter().all(|p| p.matches(&keys)))
    }
}

enum LaneMessage {
    Hit(usize, ItemId),
    Failed(Error),
}

#[derive(Default)]
struct ItemProgress {
    matched: BTreeSet<usize>,
    partial_sent: bool,
    complete_sent: bool,
}

/// Streamed query answer. Yields results in arrival order, then exactly one
/// [`QueryEvent::Summary`]. A lane failure ends the stream with an error.
pub struct QueryStream<'a> {
    rx: Receiver<LaneMessage>,
    k: usize,
    partial_at: usize,
    predicates: Vec<Predicate>,
    verify: Option<&'a dyn ItemSource>,
    progress: HashMap<ItemId, ItemProgress>,
    summary: QuerySummary,
    finished: bool,
}

impl Iterator for QueryStream<'_> {
    type Item = Result<QueryEvent>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        loop {
            let (lane, id) = match self.rx.recv() {
                Ok(LaneMessage::Hit(lane, id)) => (lane, id),
                Ok(LaneMessage::Failed(e)) => {
                    self.finished = true;
                    return Some(Err(e));
                }
                Err(_) => {
                    self.finished = true;
                    self.summary.partial_only = self
                        .progress
                        .values()
                        .filter(|p| p.partial_sent && !p.complete_sent)
                        .count();
                    return Some(Ok(QueryEvent::Summary(self.summary.clone())));
                }
            };
            let p = self.progress.entry(id).or_default();
            if !p.matched.insert(lane) {
                continue;
            }
            let count = p.matched.len();
            if count == self.k && !p.complete_sent {
                p.complete_sent = true;
                let matched: Vec<usize> = p.matched.iter().copied().collect();
                if let Some(source) = self.verify {
                    match source.satisfies(id, &self.predicates) {
                        Ok(true) => {}
                        Ok(false) => {
                            self.summary.rejected += 1;
                            continue;
                        }
                        Err(e) => {
                            self.finished = true;
                            return Some(Err(e));
                        }
                    }
                }
                self.summary.complete += 1;
                return Some(Ok(QueryEvent::Result(QueryResult {
                    item_id: id,
                    matched,
                    complete: true,
                })));
            }
            if count == self.partial_at && count < self.k && !p.partial_sent {
                p.partial_sent = true;
                return Some(Ok(QueryEvent::Result(QueryResult {
                    item_id: id,
                    matched: p.matched.iter().copied().collect(),
                    complete: false,
                })));
            }
        }
    }
}

impl QueryStream<'_> {
    /// Drains the stream into its results and summary.
    pub fn collect_all(self) -> Result<(Vec<QueryResult>, QuerySummary)> {
        let mut results = Vec::new();
        let mut summary = QuerySummary::default();
        for event in self {
            match event? {
                QueryEvent::Result(r) => results.push(r),
                QueryEvent::Summary(s) => summary = s,
            }
        }
        Ok((results, summary))
    }
}

/// Dispatches every predicate to its agent on a separate lane and returns
/// the merged stream. Operator/type errors are reported before any lane
/// starts. With `verify`, complete results are re-checked against the
/// item files before being emitted.
pub fn execute<'a>(
    catalog: &Catalog,
    query: &Query,
    verify: Option<&'a dyn ItemSource>,
) -> Result<QueryStream<'a>> {
    catalog.ensure_queryable()?;
    let agents: Vec<Option<Arc<IndexAgent>>> = query
        .predicates
        .iter()
        .map(|p| {
            catalog.check(&p.attribute, &p.operator)?;
            Ok(catalog.agent(&p.attribute))
        })
        .collect::<Result<_>>()?;

    let (tx, rx) = mpsc::sync_channel(LANE_BUFFER);
    for (lane, (agent, predicate)) in agents.into_iter().zip(&query.predicates).enumerate() {
        let Some(agent) = agent else { continue };
        let tx = tx.clone();
        let op = predicate.operator.clone();
        thread::Builder::new()
            .name(format!("query-lane-{lane}"))
            .spawn(move || match agent.lookup(&op) {
                Ok(ids) => {
                    for id in ids {
                        if tx.send(LaneMessage::Hit(lane, id)).is_err() {
                            return;
                        }
                    }
                }
                Err(e) => {
                    let _ = tx.send(LaneMessage::Failed(e));
                }
            })?;
    }
    drop(tx);

    Ok(QueryStream {
        rx,
        k: query.predicates.len(),
        partial_at: query.partial_at(),
        predicates: query.predicates.clone(),
        verify,
        progress: HashMap::new(),
        summary: QuerySummary::default(),
        finished: false,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum LaneAgent {
    Ready { distinct_keys: usize, items: usize },
    /// No item has ever carried the attribute; the lane yields nothing.
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LanePlan {
    pub lane: usize,
    pub attribute: String,
    pub operator: String,
    pub agent: LaneAgent,
}

/// Description of how a query will be dispatched.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryPlan {
    pub lanes: Vec<LanePlan>,
    pub threshold: f64,
    pub predicates: usize,
    pub partial_at: usize,
}

pub fn explain(catalog: &Catalog, query: &Query) -> QueryPlan {
    let lanes = query
        .predicates
        .iter()
        .enumerate()
        .map(|(lane, p)| LanePlan {
            lane,
            attribute: p.attribute.clone(),
            operator: p.operator.to_string(),
            agent: match catalog.agent(&p.attribute) {
                Some(a) => {
                    let stats = a.stats();
                    LaneAgent::Ready {
                        distinct_keys: stats.distinct_keys,
                        items: stats.items,
                    }
                }
                None => LaneAgent::Empty,
            },
        })
        .collect();
    QueryPlan {
        lanes,
        threshold: query.partial_threshold,
        predicates: query.predicates.len(),
        partial_at: query.partial_at(),
    }
}

impl fmt::Display for QueryPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} parallel lane(s), threshold {} (partial at {} of {} matched)",
            self.lanes.len(),
            self.threshold,
            self.partial_at,
            self.predicates
        )?;
        for lane in &self.lanes {
            let agent = match &lane.agent {
                LaneAgent::Ready {
                    distinct_keys,
                    items,
                } => format!("agent ready: {distinct_keys} keys, {items} items"),
                LaneAgent::Empty => "empty agent".to_string(),
            };
            writeln!(
                f,
                "  lane {}: {} {} [{}]",
                lane.lane, lane.attribute, lane.operator, agent
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::IndexDocument;
    use crate::format::MetadataEntry;

    fn id(n: u64) -> ItemId {
        ItemId::new(n).unwrap()
    }

    /// a: ana/2001, b: ana/2010, c: bob/2003
    fn three_items() -> Catalog {
        let c = Catalog::new();
        for (n, author, year) in [(1, "ana", 2001), (2, "ana", 2010), (3, "bob", 2003)] {
            let doc = IndexDocument {
                id: id(n),
                effective: vec![
                    MetadataEntry::string("author", author),
                    MetadataEntry::int("year", year),
                ],
                content_text: None,
                rendition_of: vec![],
            };
            c.notify_upsert(&doc, c.next_sequence());
        }
        c.flush();
        c
    }

    fn worked_query() -> Query {
        Query::new(vec![
            Predicate::eq("author", Value::String("ana".into())),
            Predicate::range("year", Value::Int64(2000), Value::Int64(2005)),
        ])
        .unwrap()
    }

    #[test]
    fn worked_example_partial_and_complete() {
        let c = three_items();
        let q = worked_query().with_partial_threshold(0.5).unwrap();
        let (results, summary) = execute(&c, &q, None).unwrap().collect_all().unwrap();
        let complete: BTreeSet<_> = results.iter().filter(|r| r.complete).map(|r| r.item_id).collect();
        let partial: BTreeSet<_> = results.iter().filter(|r| !r.complete).map(|r| r.item_id).collect();
        assert_eq!(complete, BTreeSet::from([id(1)]));
        assert!(partial.is_superset(&BTreeSet::from([id(2), id(3)])));
        assert_eq!(summary.complete, 1);
        assert_eq!(summary.partial_only, 2);
        let b = results.iter().find(|r| r.item_id == id(2)).unwrap();
        assert_eq!(b.matched, vec![0]);
        let cc = results.iter().find(|r| r.item_id == id(3)).unwrap();
        assert_eq!(cc.matched, vec![1]);
    }

    #[test]
    fn default_threshold_emits_only_complete() {
        let c = three_items();
        let (results, summary) = execute(&c, &worked_query(), None).unwrap().collect_all().unwrap();
        assert_eq!(
            results,
            vec![QueryResult {
                item_id: id(1),
                matched: vec![0, 1],
                complete: true
            }]
        );
        assert_eq!(summary.partial_only, 0);
    }

    #[test]
    fn single_predicate_equals_agent_lookup() {
        let c = three_items();
        let op = Operator::Eq(Value::String("ana".into()));
        let q = Query::new(vec![Predicate::new("author", op.clone())]).unwrap();
        let (results, _) = execute(&c, &q, None).unwrap().collect_all().unwrap();
        let mut got: Vec<_> = results.iter().map(|r| r.item_id).collect();
        got.sort();
        assert_eq!(got, c.lookup("author", &op).unwrap());
        assert!(results.iter().all(|r| r.complete));
    }

    #[test]
    fn type_errors_fail_fast() {
        let c = three_items();
        let q = Query::new(vec![
            Predicate::eq("author", Value::String("ana".into())),
            Predicate::range("author", Value::Int64(1), Value::Int64(2)),
        ])
        .unwrap();
        assert!(matches!(execute(&c, &q, None), Err(Error::OperatorTypeMismatch { .. })));
        c.begin_rebuild();
        assert!(matches!(execute(&c, &worked_query(), None), Err(Error::CatalogRebuilding)));
    }

    #[test]
    fn query_validation() {
        assert!(Query::new(vec![]).is_err());
        for t in [0.0, -0.1, 1.01, f64::NAN] {
            assert!(worked_query().with_partial_threshold(t).is_err());
        }
    }

    #[test]
    fn partial_threshold_count() {
        let preds = |k: usize| (0..k).map(|i| Predicate::exists(format!("a{i}"))).collect::<Vec<_>>();
        let q = |k, t| Query::new(preds(k)).unwrap().with_partial_threshold(t).unwrap();
        assert_eq!(q(4, 0.5).partial_at(), 2);
        assert_eq!(q(10, 0.3).partial_at(), 3);
        assert_eq!(q(3, 0.01).partial_at(), 1);
        assert_eq!(q(3, 1.0).partial_at(), 3);
    }

    #[test]
    fn explain_lists_lanes() {
        let c = three_items();
        let q = Query::new(vec![
            Predicate::eq("author", Value::String("ana".into())),
            Predicate::exists("colour"),
        ])
        .unwrap();
        let plan = explain(&c, &q);
        assert_eq!(plan.lanes.len(), 2);
        assert_eq!(plan.lanes[1].agent, LaneAgent::Empty);
        assert!(matches!(plan.lanes[0].agent, LaneAgent::Ready { items: 3, .. }));
        let text = plan.to_string();
        assert!(text.contains("empty agent"));
        let plan = explain(&c, &Query::new((0..4).map(|i| Predicate::exists(format!("x{i}"))).collect()).unwrap().with_partial_threshold(0.5).unwrap());
        assert_eq!(plan.partial_at, 2);
    }

    struct RejectAll;
    impl ItemSource for RejectAll {
        fn satisfies(&self, _: ItemId, _: &[Predicate]) -> Result<bool> {
            Ok(false)
        }
    }

    #[test]
    fn verification_drops_unconfirmed_results() {
        let c = three_items();
        let (results, summary) = execute(&c, &worked_query(), Some(&RejectAll))
            .unwrap()
            .collect_all()
            .unwrap();
        assert!(results.is_empty());
        assert_eq!(summary.rejected, 1);
    }

    #[test]
    fn dropping_a_stream_early_releases_lanes() {
        let c = Catalog::new();
        for n in 1..=5000u64 {
            let doc = IndexDocument {
                id: id(n),
                effective: vec![MetadataEntry::int("k", 1)],
                content_text: None,
                rendition_of: vec![],
            };
            c.notify_upsert(&doc, c.next_sequence());
        }
        let q = Query::new(vec![Predicate::eq("k", Value::Int64(1))]).unwrap();
        let mut stream = execute(&c, &q, None).unwrap();
        assert!(stream.next().is_some());
        drop(stream);
    }
}
