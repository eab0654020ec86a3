//! Violation detection.
//!
//! Each rule has a detect worker owning a [`DataHistory`]: RHS cells grouped
//! by `(rule, LHS value)` into cell groups, and within a group compressed
//! into super cells of equal value. A worker answers every sub-tuple with
//! exactly one [`ViolationMessage`]; the [`Egress`] collector assembles the
//! per-rule answers into one [`TupleBundle`] per input tuple.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rustc_hash::FxHashMap as HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, ProtocolError};
use crate::model::{project, AttributeId, Cell, Rule, RuleId, SubTuple, Tuple, TupleId, Value};
use crate::windowing::{ExpiryLog, KListQueue, Slide, WindowConfig};

/// Cells of one attribute sharing a value, compressed to their tuple ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperCell {
    /// Sorted ascending, no duplicates.
    pub tuple_ids: Vec<TupleId>,
    pub attr: AttributeId,
    pub value: Value,
}

impl SuperCell {
    pub fn single(cell: &Cell) -> Self {
        Self {
            tuple_ids: vec![cell.tuple_id],
            attr: cell.attr.clone(),
            value: cell.value.clone(),
        }
    }

    /// Inserts `id` keeping the id list sorted. Returns false if present.
    pub fn insert(&mut self, id: TupleId) -> bool {
        match self.tuple_ids.binary_search(&id) {
            Ok(_) => false,
            Err(pos) => {
                self.tuple_ids.insert(pos, id);
                true
            }
        }
    }

    /// Drops ids below `lo`, returning how many were dropped.
    pub fn trim_below(&mut self, lo: TupleId) -> usize {
        let cut = self.tuple_ids.partition_point(|id| *id < lo);
        self.tuple_ids.drain(..cut);
        cut
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        self.tuple_ids.iter().map(|id| Cell {
            tuple_id: *id,
            attr: self.attr.clone(),
            value: self.value.clone(),
        })
    }
}

/// `(rule, LHS values)`. Cheap to clone.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellGroupId {
    pub rule_id: RuleId,
    #[serde(rename = "lhs")]
    pub lhs_values: Arc<[Value]>,
}

impl CellGroupId {
    pub fn new(rule_id: RuleId, lhs_values: Vec<Value>) -> Self {
        Self {
            rule_id,
            lhs_values: lhs_values.into(),
        }
    }

    pub fn of(st: &SubTuple) -> Self {
        Self::new(st.rule_id, st.lhs_values.clone())
    }
}

impl std::fmt::Debug for CellGroupId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "cg({:?}, {:?})", self.rule_id, &self.lhs_values[..])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellGroup {
    pub id: CellGroupId,
    /// Pairwise distinct values.
    pub super_cells: Vec<SuperCell>,
}

impl CellGroup {
    fn insert(&mut self, cell: &Cell) {
        match self.super_cells.iter_mut().find(|sc| sc.value == cell.value) {
            Some(sc) => {
                sc.insert(cell.tuple_id);
            }
            None => self.super_cells.push(SuperCell::single(cell)),
        }
    }

    pub fn cell_count(&self) -> usize {
        self.super_cells.iter().map(|sc| sc.tuple_ids.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViolationMessage {
    NoViolation {
        rule_id: RuleId,
        tuple_id: TupleId,
    },
    /// The group held a single super cell with a different value.
    CompleteViolation {
        cg_id: CellGroupId,
        current: Cell,
        old: SuperCell,
    },
    /// The group already held several super cells; those were shipped by
    /// earlier messages.
    AppendOnlyViolation { cg_id: CellGroupId, current: Cell },
}

impl ViolationMessage {
    pub fn rule_id(&self) -> RuleId {
        match self {
            Self::NoViolation { rule_id, .. } => *rule_id,
            Self::CompleteViolation { cg_id, .. } | Self::AppendOnlyViolation { cg_id, .. } => {
                cg_id.rule_id
            }
        }
    }

    pub fn tuple_id(&self) -> TupleId {
        match self {
            Self::NoViolation { tuple_id, .. } => *tuple_id,
            Self::CompleteViolation { current, .. } | Self::AppendOnlyViolation { current, .. } => {
                current.tuple_id
            }
        }
    }

    pub fn is_violation(&self) -> bool {
        !matches!(self, Self::NoViolation { .. })
    }

    pub fn cg_id(&self) -> Option<&CellGroupId> {
        match self {
            Self::NoViolation { .. } => None,
            Self::CompleteViolation { cg_id, .. } | Self::AppendOnlyViolation { cg_id, .. } => {
                Some(cg_id)
            }
        }
    }

    pub fn current(&self) -> Option<&Cell> {
        match self {
            Self::NoViolation { .. } => None,
            Self::CompleteViolation { current, .. } | Self::AppendOnlyViolation { current, .. } => {
                Some(current)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TupleBundle {
    pub tuple: Tuple,
    pub messages: BTreeMap<RuleId, ViolationMessage>,
}

impl TupleBundle {
    pub fn is_clean(&self) -> bool {
        self.messages.values().all(|m| !m.is_violation())
    }

    pub fn violations(&self) -> impl Iterator<Item = &ViolationMessage> {
        self.messages.values().filter(|m| m.is_violation())
    }
}

/// Splits a tuple into one sub-tuple per active rule.
pub fn route_ingress<'a>(
    t: &Tuple,
    rules: impl IntoIterator<Item = &'a Rule>,
) -> Result<Vec<SubTuple>, ModelError> {
    rules.into_iter().map(|r| project(t, r)).collect()
}

/// The state of one detect worker.
#[derive(Clone, Debug)]
pub struct DataHistory {
    rule_id: RuleId,
    groups: HashMap<CellGroupId, CellGroup>,
    queue: Option<KListQueue<CellGroupId>>,
    expiry: ExpiryLog<CellGroupId>,
}

impl DataHistory {
    pub fn new(rule_id: RuleId, window: Option<WindowConfig>) -> Self {
        Self {
            rule_id,
            groups: HashMap::default(),
            queue: window.map(|w| KListQueue::new(w.k())),
            expiry: ExpiryLog::default(),
        }
    }

    pub fn rule_id(&self) -> RuleId {
        self.rule_id
    }

    /// One step of the detection algorithm. Sub-tuples whose condition
    /// fails or whose LHS holds a Null are answered without touching the
    /// history.
    pub fn detect(&mut self, st: &SubTuple) -> ViolationMessage {
        debug_assert_eq!(st.rule_id, self.rule_id);
        if !st.cond_holds || st.lhs_has_null() {
            return ViolationMessage::NoViolation {
                rule_id: st.rule_id,
                tuple_id: st.tuple_id,
            };
        }
        let cg_id = CellGroupId::of(st);
        let current = &st.rhs_cell;
        let msg = match self.groups.get_mut(&cg_id) {
            None => {
                self.groups.insert(
                    cg_id.clone(),
                    CellGroup {
                        id: cg_id.clone(),
                        super_cells: Vec::new(),
                    },
                );
                ViolationMessage::NoViolation {
                    rule_id: st.rule_id,
                    tuple_id: st.tuple_id,
                }
            }
            Some(group) => match group.super_cells.as_slice() {
                [] => ViolationMessage::NoViolation {
                    rule_id: st.rule_id,
                    tuple_id: st.tuple_id,
                },
                [old] if old.value == current.value => ViolationMessage::NoViolation {
                    rule_id: st.rule_id,
                    tuple_id: st.tuple_id,
                },
                [old] => ViolationMessage::CompleteViolation {
                    cg_id: cg_id.clone(),
                    current: current.clone(),
                    old: old.clone(),
                },
                _ => ViolationMessage::AppendOnlyViolation {
                    cg_id: cg_id.clone(),
                    current: current.clone(),
                },
            },
        };
        self.groups
            .get_mut(&cg_id)
            .expect("group exists")
            .insert(current);
        if let Some(q) = &mut self.queue {
            q.touch(&cg_id);
            self.expiry.record(current.tuple_id, cg_id);
        }
        msg
    }

    /// Advances the window: drops groups untouched for `k` periods, then
    /// trims older cells from the surviving ones.
    pub fn slide(&mut self, slide: Slide) {
        let Some(q) = &mut self.queue else {
            return;
        };
        for dead in q.slide() {
            self.groups.remove(&dead);
        }
        let mut touched: Vec<CellGroupId> = self
            .expiry
            .expire_below(slide.lo)
            .into_iter()
            .map(|(_, cg)| cg)
            .collect();
        touched.sort();
        touched.dedup();
        for cg in touched {
            let Some(group) = self.groups.get_mut(&cg) else {
                continue;
            };
            for sc in &mut group.super_cells {
                sc.trim_below(slide.lo);
            }
            group.super_cells.retain(|sc| !sc.tuple_ids.is_empty());
            if group.super_cells.is_empty() {
                self.groups.remove(&cg);
                q.remove(&cg);
            }
        }
    }

    pub fn group(&self, id: &CellGroupId) -> Option<&CellGroup> {
        self.groups.get(id)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn cell_count(&self) -> usize {
        self.groups.values().map(CellGroup::cell_count).sum()
    }

    pub fn min_tuple_id(&self) -> Option<TupleId> {
        self.groups
            .values()
            .flat_map(|g| g.super_cells.iter())
            .filter_map(|sc| sc.tuple_ids.first().copied())
            .min()
    }

    /// Groups sorted by id, for inspection dumps.
    pub fn snapshot(&self) -> Vec<CellGroup> {
        let mut groups: Vec<_> = self.groups.values().cloned().collect();
        groups.sort_by(|a, b| a.id.cmp(&b.id));
        groups
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "rule_id": self.rule_id,
            "groups": self.snapshot(),
        })
    }
}

#[derive(Debug)]
enum EgressSlot<B> {
    Tuple {
        tuple: Tuple,
        expected: BTreeSet<RuleId>,
        messages: BTreeMap<RuleId, ViolationMessage>,
    },
    Barrier(B),
}

/// Something released by the egress collector, in ingress order.
#[derive(Debug, PartialEq)]
pub enum Released<B> {
    Bundle(TupleBundle),
    Barrier(B),
}

/// Collects per-rule messages and releases complete bundles strictly in
/// ingress order. Barriers (slides, rule updates) registered between tuples
/// are released at their position.
#[derive(Debug)]
pub struct Egress<B> {
    slots: VecDeque<EgressSlot<B>>,
    index: HashMap<TupleId, usize>,
    /// Number of slots popped so far; `index` holds absolute positions.
    released: usize,
    /// Messages that arrived before their tuple was registered.
    early: HashMap<TupleId, Vec<ViolationMessage>>,
    last: Option<TupleId>,
}

impl<B> Default for Egress<B> {
    fn default() -> Self {
        Self {
            slots: VecDeque::new(),
            index: HashMap::default(),
            released: 0,
            early: HashMap::default(),
            last: None,
        }
    }
}

impl<B> Egress<B> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Announces a tuple and the rules that will answer for it.
    pub fn register(
        &mut self,
        tuple: Tuple,
        expected: BTreeSet<RuleId>,
    ) -> Result<(), ProtocolError> {
        if let Some(prev) = self.last {
            if tuple.id <= prev {
                return Err(ProtocolError::OutOfOrder {
                    tuple: tuple.id,
                    previous: prev,
                });
            }
        }
        self.last = Some(tuple.id);
        let id = tuple.id;
        self.index.insert(id, self.released + self.slots.len());
        self.slots.push_back(EgressSlot::Tuple {
            tuple,
            expected,
            messages: BTreeMap::new(),
        });
        for msg in self.early.remove(&id).unwrap_or_default() {
            self.accept(msg)?;
        }
        Ok(())
    }

    pub fn barrier(&mut self, barrier: B) {
        self.slots.push_back(EgressSlot::Barrier(barrier));
    }

    pub fn accept(&mut self, msg: ViolationMessage) -> Result<(), ProtocolError> {
        let tuple = msg.tuple_id();
        let rule = msg.rule_id();
        let Some(&pos) = self.index.get(&tuple) else {
            self.early.entry(tuple).or_default().push(msg);
            return Ok(());
        };
        let EgressSlot::Tuple {
            expected, messages, ..
        } = &mut self.slots[pos - self.released]
        else {
            unreachable!("index points at a tuple slot");
        };
        if !expected.contains(&rule) {
            return Err(ProtocolError::UnexpectedMessage { tuple, rule });
        }
        if messages.contains_key(&rule) {
            return Err(ProtocolError::DuplicateMessage { tuple, rule });
        }
        messages.insert(rule, msg);
        Ok(())
    }

    /// Pops everything at the head of the queue that is complete.
    pub fn drain_ready(&mut self) -> Vec<Released<B>> {
        let mut out = Vec::new();
        loop {
            let ready = match self.slots.front() {
                Some(EgressSlot::Tuple {
                    expected, messages, ..
                }) => expected.len() == messages.len(),
                Some(EgressSlot::Barrier(_)) => true,
                None => false,
            };
            if !ready {
                break;
            }
            self.released += 1;
            match self.slots.pop_front().unwrap() {
                EgressSlot::Tuple {
                    tuple, messages, ..
                } => {
                    self.index.remove(&tuple.id);
                    out.push(Released::Bundle(TupleBundle { tuple, messages }));
                }
                EgressSlot::Barrier(b) => out.push(Released::Barrier(b)),
            }
        }
        out
    }

    pub fn pending(&self) -> usize {
        self.slots.len()
    }
}

/// Convenience wrapper around [`Egress`] for one tuple: feeds `partial` and
/// returns the bundle once `expected` rules answered.
pub fn collect_egress(
    partial: impl IntoIterator<Item = ViolationMessage>,
    t: Tuple,
    expected: BTreeSet<RuleId>,
) -> Result<Option<TupleBundle>, ProtocolError> {
    let mut egress: Egress<()> = Egress::new();
    egress.register(t, expected)?;
    for msg in partial {
        egress.accept(msg)?;
    }
    Ok(egress.drain_ready().into_iter().find_map(|r| match r {
        Released::Bundle(b) => Some(b),
        Released::Barrier(()) => None,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::windowing::WindowStrategy;

    fn st(id: u64, rule: u32, lhs: &str, attr: &str, rhs: &str) -> SubTuple {
        SubTuple {
            tuple_id: TupleId(id),
            rule_id: RuleId(rule),
            lhs_values: vec![Value::text(lhs)],
            rhs_cell: Cell {
                tuple_id: TupleId(id),
                attr: attr.into(),
                value: Value::text(rhs),
            },
            cond_holds: true,
        }
    }

    fn ids(v: &[u64]) -> Vec<TupleId> {
        v.iter().copied().map(TupleId).collect()
    }

    #[test]
    fn complete_violation_for_zip_city() {
        let mut dh = DataHistory::new(RuleId(3), None);
        assert!(!dh.detect(&st(1, 3, "59801", "city", "Missoula")).is_violation());
        let msg = dh.detect(&st(3, 3, "59801", "city", "Helena"));
        assert_eq!(
            msg,
            ViolationMessage::CompleteViolation {
                cg_id: CellGroupId::new(RuleId(3), vec![Value::text("59801")]),
                current: st(3, 3, "59801", "city", "Helena").rhs_cell,
                old: SuperCell {
                    tuple_ids: ids(&[1]),
                    attr: "city".into(),
                    value: "Missoula".into()
                },
            }
        );
    }

    #[test]
    fn new_key_creates_group() {
        let mut dh = DataHistory::new(RuleId(3), None);
        dh.detect(&st(1, 3, "59801", "city", "Missoula"));
        let msg = dh.detect(&st(2, 3, "59923", "city", "Libby"));
        assert!(matches!(msg, ViolationMessage::NoViolation { .. }));
        let cg = CellGroupId::new(RuleId(3), vec![Value::text("59923")]);
        assert_eq!(dh.group(&cg).unwrap().super_cells.len(), 1);
    }

    #[test]
    fn equal_value_with_single_super_cell_is_clean() {
        let mut dh = DataHistory::new(RuleId(0), None);
        dh.detect(&st(1, 0, "k", "b", "x"));
        assert!(!dh.detect(&st(2, 0, "k", "b", "x")).is_violation());
        let cg = CellGroupId::new(RuleId(0), vec![Value::text("k")]);
        assert_eq!(dh.group(&cg).unwrap().super_cells[0].tuple_ids, ids(&[1, 2]));
    }

    #[test]
    fn append_only_once_group_is_split() {
        let mut dh = DataHistory::new(RuleId(3), None);
        dh.detect(&st(1, 3, "59801", "city", "Missoula"));
        dh.detect(&st(2, 3, "59801", "city", "Helena"));
        let msg = dh.detect(&st(3, 3, "59801", "city", "Butte"));
        assert!(matches!(msg, ViolationMessage::AppendOnlyViolation { .. }));
        // A value matching one of several super cells still conflicts with the rest.
        let msg = dh.detect(&st(4, 3, "59801", "city", "Missoula"));
        assert!(matches!(msg, ViolationMessage::AppendOnlyViolation { .. }));
        let cg = CellGroupId::new(RuleId(3), vec![Value::text("59801")]);
        let g = dh.group(&cg).unwrap();
        assert_eq!(g.super_cells.len(), 3);
        assert_eq!(g.super_cells[0].tuple_ids, ids(&[1, 4]));
    }

    #[test]
    fn condition_and_null_lhs_bypass_history() {
        let mut dh = DataHistory::new(RuleId(0), None);
        let mut s = st(1, 0, "k", "b", "x");
        s.cond_holds = false;
        assert!(!dh.detect(&s).is_violation());
        let mut s = st(2, 0, "k", "b", "x");
        s.lhs_values = vec![Value::Null];
        assert!(!dh.detect(&s).is_violation());
        assert!(dh.is_empty());
    }

    #[test]
    fn slide_trims_and_evicts() {
        let w = WindowConfig::new(4, 2, WindowStrategy::Basic).unwrap();
        let mut dh = DataHistory::new(RuleId(0), Some(w));
        let mut clock = crate::windowing::WindowClock::new(Some(w));
        let stream = [(1, "a", "b"), (2, "a", "b"), (3, "a", "b"), (4, "a", "c"), (5, "z", "q")];
        for (id, k, v) in stream {
            if let Some(s) = clock.arrive(TupleId(id)) {
                dh.slide(s);
            }
            dh.detect(&st(id, 0, k, "B", v));
        }
        let a = CellGroupId::new(RuleId(0), vec![Value::text("a")]);
        let g = dh.group(&a).unwrap();
        assert_eq!(g.super_cells[0].tuple_ids, ids(&[3]));
        assert_eq!(g.super_cells[1].tuple_ids, ids(&[4]));
        assert!(dh.min_tuple_id().unwrap() >= TupleId(3));

        // Group "a" untouched for two periods disappears without a scan.
        for id in 6..=9 {
            if let Some(s) = clock.arrive(TupleId(id)) {
                dh.slide(s);
            }
            dh.detect(&st(id, 0, "z", "B", "q"));
        }
        assert!(dh.group(&a).is_none());
    }

    #[test]
    fn egress_orders_bundles_and_rejects_duplicates() {
        let mut eg: Egress<&'static str> = Egress::new();
        let rules: BTreeSet<_> = [RuleId(1), RuleId(2)].into();
        let t1 = Tuple::new(1, [("a", "x".into())]);
        let t2 = Tuple::new(2, [("a", "y".into())]);
        eg.register(t1, rules.clone()).unwrap();
        eg.barrier("slide");
        eg.register(t2, rules.clone()).unwrap();
        let nv = |t, r| ViolationMessage::NoViolation {
            rule_id: RuleId(r),
            tuple_id: TupleId(t),
        };
        eg.accept(nv(2, 1)).unwrap();
        eg.accept(nv(2, 2)).unwrap();
        assert!(eg.drain_ready().is_empty());
        assert_eq!(
            eg.accept(nv(2, 2)),
            Err(ProtocolError::DuplicateMessage {
                tuple: TupleId(2),
                rule: RuleId(2)
            })
        );
        eg.accept(nv(1, 2)).unwrap();
        eg.accept(nv(1, 1)).unwrap();
        let out = eg.drain_ready();
        assert_eq!(out.len(), 3);
        assert!(matches!(&out[0], Released::Bundle(b) if b.tuple.id == TupleId(1)));
        assert!(matches!(&out[1], Released::Barrier("slide")));
        assert!(matches!(&out[2], Released::Bundle(b) if b.tuple.id == TupleId(2) && b.is_clean()));
    }

    #[test]
    fn egress_buffers_early_messages() {
        let mut eg: Egress<()> = Egress::new();
        eg.accept(ViolationMessage::NoViolation {
            rule_id: RuleId(0),
            tuple_id: TupleId(5),
        })
        .unwrap();
        eg.register(Tuple::new(5, []), [RuleId(0)].into()).unwrap();
        assert_eq!(eg.drain_ready().len(), 1);
        assert!(eg.register(Tuple::new(5, []), BTreeSet::new()).is_err());
    }

    #[test]
    fn collect_with_no_rules_is_immediate() {
        let b = collect_egress([], Tuple::new(1, []), BTreeSet::new())
            .unwrap()
            .unwrap();
        assert!(b.messages.is_empty() && b.is_clean());
    }

    #[test]
    fn collect_three_rules() {
        let t = Tuple::new(3, [("city", "Helena".into())]);
        let rules: BTreeSet<_> = [RuleId(1), RuleId(2), RuleId(3)].into();
        let msgs = vec![
            ViolationMessage::NoViolation {
                rule_id: RuleId(1),
                tuple_id: TupleId(3),
            },
            ViolationMessage::NoViolation {
                rule_id: RuleId(2),
                tuple_id: TupleId(3),
            },
            ViolationMessage::CompleteViolation {
                cg_id: CellGroupId::new(RuleId(3), vec![Value::text("59801")]),
                current: t.cell(&"city".into()).unwrap(),
                old: SuperCell {
                    tuple_ids: ids(&[1]),
                    attr: "city".into(),
                    value: "Missoula".into(),
                },
            },
        ];
        let b = collect_egress(msgs[..2].to_vec(), t.clone(), rules.clone()).unwrap();
        assert!(b.is_none());
        let b = collect_egress(msgs, t, rules).unwrap().unwrap();
        assert_eq!(b.messages.len(), 3);
        assert!(!b.is_clean());
    }

    #[test]
    fn route_ingress_fans_out() {
        let t = Tuple::new(
            1,
            [
                ("item", "book".into()),
                ("category", "education".into()),
                ("clientid", "c01".into()),
                ("city", "Missoula".into()),
                ("zipcode", "59801".into()),
            ],
        );
        let rules = vec![
            Rule::fd(1, &["item"], "category").unwrap(),
            Rule::fd(2, &["clientid"], "city").unwrap(),
            Rule::cfd_not_null(3, &["zipcode"], "city").unwrap(),
        ];
        let subs = route_ingress(&t, &rules).unwrap();
        assert_eq!(subs.len(), 3);
        assert!(subs.iter().all(|s| s.tuple_id == TupleId(1)));
        assert_eq!(subs[1].rhs_cell, subs[2].rhs_cell);
        assert!(route_ingress(&t, &[]).unwrap().is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn history_partitions_cells(stream in prop::collection::vec((0u8..3, 0u8..3), 1..80)) {
                let mut dh = DataHistory::new(RuleId(0), None);
                let mut msgs = Vec::new();
                for (i, (k, v)) in stream.iter().enumerate() {
                    let s = st(i as u64 + 1, 0, &k.to_string(), "B", &v.to_string());
                    msgs.push(dh.detect(&s));
                    prop_assert!(dh.group(&CellGroupId::of(&s)).unwrap()
                        .super_cells.iter().any(|sc| sc.tuple_ids.contains(&s.tuple_id)));
                }
                prop_assert_eq!(msgs.len(), stream.len());
                prop_assert_eq!(dh.cell_count(), stream.len());
                for g in dh.snapshot() {
                    let mut vals: Vec<_> = g.super_cells.iter().map(|s| s.value.clone()).collect();
                    vals.sort(); vals.dedup();
                    prop_assert_eq!(vals.len(), g.super_cells.len());
                }
                let mut replay = DataHistory::new(RuleId(0), None);
                for (i, (k, v)) in stream.iter().enumerate() {
                    let s = st(i as u64 + 1, 0, &k.to_string(), "B", &v.to_string());
                    prop_assert_eq!(&replay.detect(&s), &msgs[i]);
                }
            }
        }
    }
}
