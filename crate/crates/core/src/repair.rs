//! Violation-graph repair.
//!
//! Every repair worker receives every violation bundle but stores only the
//! cells whose tuple id partitions to it. A subgraph is identified by the
//! set of cell groups it contains; cells shared by several groups (hinge
//! cells) bridge those groups. Workers agree on subgraph ids through a
//! stateless coordinator, and an aggregator sums per-worker candidate
//! frequencies to pick the repair value of each violated attribute.

use std::cell::OnceCell;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rustc_hash::FxHashMap as HashMap;
use serde::{Deserialize, Serialize};

use crate::detect::{CellGroupId, SuperCell, TupleBundle, ViolationMessage};
use crate::dynamics::connected_components;
use crate::error::{CoordinationError, EngineError};
use crate::model::{AttributeId, Cell, RuleId, Tuple, TupleId, Value};
use crate::windowing::{ExpiryLog, KListQueue, Slide, WindowConfig, WindowStrategy};

/// Candidates shipped per attribute in a repair proposal.
pub const TOP_K: usize = 5;

pub type SubgraphId = BTreeSet<CellGroupId>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Coordinate every violating tuple.
    Basic,
    /// Coordinate only when needed; wait for the decision before proposing.
    #[default]
    Dr,
    /// Coordinate only when needed; propose immediately from local state.
    Ir,
}

impl std::str::FromStr for Protocol {
    type Err = crate::error::ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "basic" => Ok(Self::Basic),
            "dr" => Ok(Self::Dr),
            "ir" => Ok(Self::Ir),
            other => Err(crate::error::ConfigError::Invalid(format!(
                "unknown protocol `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Basic => "basic",
            Self::Dr => "dr",
            Self::Ir => "ir",
        })
    }
}

/// Worker owning the cell of tuple `tid`: `(tid - 1) mod n`.
pub fn partition(tid: TupleId, n_workers: usize) -> usize {
    assert!(n_workers >= 1);
    (tid.0.wrapping_sub(1) % n_workers as u64) as usize
}

pub fn partition_cell(c: &Cell, n_workers: usize) -> usize {
    partition(c.tuple_id, n_workers)
}

/// A super cell that remembers how many cells it has absorbed, including
/// cells flushed out of the window.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CumulativeSuperCell {
    pub super_cell: SuperCell,
    pub count: u64,
    /// Smallest id among flushed cells.
    pub flushed_first: Option<TupleId>,
}

impl CumulativeSuperCell {
    fn empty(attr: &AttributeId, value: &Value) -> Self {
        Self {
            super_cell: SuperCell {
                tuple_ids: Vec::new(),
                attr: attr.clone(),
                value: value.clone(),
            },
            count: 0,
            flushed_first: None,
        }
    }

    fn add(&mut self, tid: TupleId) {
        if self.super_cell.insert(tid) {
            self.count += 1;
        }
    }

    fn remove_live(&mut self, tid: TupleId) -> bool {
        match self.super_cell.tuple_ids.binary_search(&tid) {
            Ok(pos) => {
                self.super_cell.tuple_ids.remove(pos);
                self.count -= 1;
                true
            }
            Err(_) => false,
        }
    }

    fn flush(&mut self, tid: TupleId) {
        if let Ok(pos) = self.super_cell.tuple_ids.binary_search(&tid) {
            self.super_cell.tuple_ids.remove(pos);
            self.flushed_first = Some(self.flushed_first.map_or(tid, |f| f.min(tid)));
        }
    }

    fn absorb(&mut self, other: CumulativeSuperCell) {
        for id in other.super_cell.tuple_ids {
            self.super_cell.insert(id);
        }
        self.count += other.count;
        self.flushed_first = match (self.flushed_first, other.flushed_first) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
    }

    /// Earliest tuple id that contributed to this cell, live or flushed.
    pub fn first_seen(&self) -> Option<TupleId> {
        match (self.super_cell.tuple_ids.first().copied(), self.flushed_first) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    pub fn value(&self) -> &Value {
        &self.super_cell.value
    }

    pub fn ids(&self) -> &[TupleId] {
        &self.super_cell.tuple_ids
    }
}

/// The cells of one cell group inside a subgraph partition, by value.
/// Hinge cells are kept apart in [`Subgraph`] hinge records.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GroupCells {
    pub super_cells: BTreeMap<Value, CumulativeSuperCell>,
}

impl GroupCells {
    pub fn get(&self, value: &Value) -> Option<&CumulativeSuperCell> {
        self.super_cells.get(value)
    }
}

/// Hinge cells sharing a value and a set of connected groups are
/// compressed into one record. Records of cells stored on another worker
/// (`owned == false`) carry connectivity only and never count as
/// candidates.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HingeKey {
    pub connects: BTreeSet<CellGroupId>,
    pub value: Value,
    pub owned: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct CellSlot {
    value: Value,
    groups: BTreeSet<CellGroupId>,
    owned: bool,
}

/// One worker's partition of a subgraph. The subgraph id is the set of its
/// group keys.
#[derive(Clone, Debug)]
pub struct Subgraph {
    attr: AttributeId,
    groups: BTreeMap<CellGroupId, GroupCells>,
    hinges: HashMap<HingeKey, CumulativeSuperCell>,
    cells: HashMap<TupleId, CellSlot>,
    /// Ranked candidates, cleared by every mutation.
    ranked: OnceCell<Vec<Candidate>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub value: Value,
    pub frequency: u64,
    pub first_seen: TupleId,
}

impl Candidate {
    /// Higher frequency first, then the value seen earliest, then the
    /// lexicographically smaller value.
    pub fn rank(&self) -> (Reverse<u64>, TupleId, &Value) {
        (Reverse(self.frequency), self.first_seen, &self.value)
    }
}

impl Subgraph {
    fn new(attr: AttributeId) -> Self {
        Self {
            attr,
            groups: BTreeMap::new(),
            hinges: HashMap::default(),
            cells: HashMap::default(),
            ranked: OnceCell::new(),
        }
    }

    pub fn id(&self) -> SubgraphId {
        self.groups.keys().cloned().collect()
    }

    pub fn attr(&self) -> &AttributeId {
        &self.attr
    }

    pub fn group(&self, cg: &CellGroupId) -> Option<&GroupCells> {
        self.groups.get(cg)
    }

    pub fn hinges(&self) -> impl Iterator<Item = (&HingeKey, &CumulativeSuperCell)> {
        self.hinges.iter()
    }

    /// Tuple ids of the cells this worker holds (owned or known hinges).
    pub fn tuple_ids(&self) -> BTreeSet<TupleId> {
        self.cells.keys().copied().collect()
    }

    fn size(&self) -> usize {
        self.cells.len() + self.groups.len()
    }

    fn record_mut(&mut self, slot: &CellSlot) -> Option<&mut CumulativeSuperCell> {
        if slot.groups.len() >= 2 {
            self.hinges.get_mut(&HingeKey {
                connects: slot.groups.clone(),
                value: slot.value.clone(),
                owned: slot.owned,
            })
        } else {
            let cg = slot.groups.first()?;
            self.groups.get_mut(cg)?.super_cells.get_mut(&slot.value)
        }
    }

    fn drop_record_if_empty(&mut self, slot: &CellSlot) {
        if slot.groups.len() >= 2 {
            let key = HingeKey {
                connects: slot.groups.clone(),
                value: slot.value.clone(),
                owned: slot.owned,
            };
            if self.hinges.get(&key).is_some_and(|r| r.count == 0) {
                self.hinges.remove(&key);
            }
        } else if let Some(g) = slot.groups.first().and_then(|cg| self.groups.get_mut(cg)) {
            if g.super_cells.get(&slot.value).is_some_and(|r| r.count == 0) {
                g.super_cells.remove(&slot.value);
            }
        }
    }

    /// Adds the cell of `tid` to the groups in `add`, promoting it to a
    /// hinge cell when it ends up in two or more groups. Cells not owned by
    /// this worker are kept only while they are hinges.
    fn attach(&mut self, tid: TupleId, value: &Value, add: &BTreeSet<CellGroupId>, owned: bool) {
        // Cells of other workers never count towards the ranking.
        if owned {
            self.ranked.take();
        }
        let mut groups = self
            .cells
            .get(&tid)
            .map(|s| s.groups.clone())
            .unwrap_or_default();
        let before = groups.len();
        groups.extend(add.iter().cloned());
        if groups.len() == before {
            return;
        }
        if let Some(old) = self.cells.remove(&tid) {
            if let Some(rec) = self.record_mut(&old) {
                rec.remove_live(tid);
            }
            self.drop_record_if_empty(&old);
        }
        let slot = CellSlot {
            value: value.clone(),
            groups,
            owned,
        };
        if slot.groups.len() >= 2 {
            let key = HingeKey {
                connects: slot.groups.clone(),
                value: value.clone(),
                owned,
            };
            let attr = &self.attr;
            self.hinges
                .entry(key)
                .or_insert_with(|| CumulativeSuperCell::empty(attr, value))
                .add(tid);
        } else if owned {
            let cg = slot.groups.first().expect("non-empty");
            self.groups
                .get_mut(cg)
                .expect("group added before its cells")
                .super_cells
                .entry(value.clone())
                .or_insert_with(|| CumulativeSuperCell::empty(&self.attr, value))
                .add(tid);
        } else {
            return;
        }
        self.cells.insert(tid, slot);
    }

    /// Removes an out-of-window cell. Returns whether it was a hinge.
    fn expire(&mut self, tid: TupleId, strategy: WindowStrategy) -> Option<bool> {
        let slot = self.cells.remove(&tid)?;
        if slot.owned {
            self.ranked.take();
        }
        if let Some(rec) = self.record_mut(&slot) {
            match strategy {
                WindowStrategy::Basic => {
                    rec.remove_live(tid);
                }
                WindowStrategy::Cumulative => rec.flush(tid),
            }
        }
        self.drop_record_if_empty(&slot);
        Some(slot.groups.len() >= 2)
    }

    fn absorb(&mut self, other: Subgraph) {
        self.ranked.take();
        self.groups.extend(other.groups);
        for (k, rec) in other.hinges {
            let attr = &self.attr;
            let value = k.value.clone();
            self.hinges
                .entry(k)
                .or_insert_with(|| CumulativeSuperCell::empty(attr, &value))
                .absorb(rec);
        }
        self.cells.extend(other.cells);
    }

    /// Removes the given groups and updates hinge records: a hinge left
    /// with one group becomes a plain cell of it, one left with none is
    /// dropped. Returns the tuple ids no longer held.
    fn remove_groups(&mut self, dead: &BTreeSet<CellGroupId>) -> Vec<TupleId> {
        self.ranked.take();
        for cg in dead {
            self.groups.remove(cg);
        }
        let hinges = std::mem::take(&mut self.hinges);
        for (k, rec) in hinges {
            let rest: BTreeSet<CellGroupId> = k.connects.difference(dead).cloned().collect();
            match rest.len() {
                0 => {}
                1 => {
                    if k.owned {
                        let cg = rest.first().unwrap();
                        let attr = &self.attr;
                        self.groups
                            .get_mut(cg)
                            .expect("remaining group")
                            .super_cells
                            .entry(k.value.clone())
                            .or_insert_with(|| CumulativeSuperCell::empty(attr, &k.value))
                            .absorb(rec);
                    }
                }
                _ => {
                    let attr = &self.attr;
                    let value = k.value.clone();
                    self.hinges
                        .entry(HingeKey {
                            connects: rest,
                            ..k
                        })
                        .or_insert_with(|| CumulativeSuperCell::empty(attr, &value))
                        .absorb(rec);
                }
            }
        }
        let mut gone = Vec::new();
        self.cells.retain(|tid, slot| {
            if slot.groups.is_disjoint(dead) {
                return true;
            }
            slot.groups.retain(|g| !dead.contains(g));
            let keep = if slot.owned {
                !slot.groups.is_empty()
            } else {
                slot.groups.len() >= 2
            };
            if !keep {
                gone.push(*tid);
            }
            keep
        });
        gone
    }

    /// Moves the groups in `comp`, with their hinges and cells, into a new
    /// subgraph.
    fn extract(&mut self, comp: &BTreeSet<CellGroupId>) -> Subgraph {
        self.ranked.take();
        let mut out = Subgraph::new(self.attr.clone());
        for cg in comp {
            if let Some(g) = self.groups.remove(cg) {
                out.groups.insert(cg.clone(), g);
            }
        }
        let keys: Vec<HingeKey> = self
            .hinges
            .keys()
            .filter(|k| k.connects.first().is_some_and(|g| comp.contains(g)))
            .cloned()
            .collect();
        for k in keys {
            let rec = self.hinges.remove(&k).unwrap();
            out.hinges.insert(k, rec);
        }
        let tids: Vec<TupleId> = self
            .cells
            .iter()
            .filter(|(_, s)| s.groups.first().is_some_and(|g| comp.contains(g)))
            .map(|(t, _)| *t)
            .collect();
        for t in tids {
            let slot = self.cells.remove(&t).unwrap();
            out.cells.insert(t, slot);
        }
        out
    }

    /// Value frequencies over this worker's partition of the subgraph,
    /// best first. Hinge cells are stored once, so they count once.
    pub fn candidates(&self) -> Vec<Candidate> {
        self.ranked().to_vec()
    }

    fn ranked(&self) -> &[Candidate] {
        self.ranked.get_or_init(|| self.rank_candidates())
    }

    fn rank_candidates(&self) -> Vec<Candidate> {
        let mut acc: HashMap<&Value, (u64, TupleId)> = HashMap::default();
        let records = self
            .groups
            .values()
            .flat_map(|g| g.super_cells.values())
            .chain(self.hinges.iter().filter(|(k, _)| k.owned).map(|(_, r)| r));
        for rec in records {
            let Some(first) = rec.first_seen() else {
                continue;
            };
            if rec.count == 0 {
                continue;
            }
            let e = acc.entry(rec.value()).or_insert((0, first));
            e.0 += rec.count;
            e.1 = e.1.min(first);
        }
        let mut out: Vec<Candidate> = acc
            .into_iter()
            .map(|(v, (frequency, first_seen))| Candidate {
                value: v.clone(),
                frequency,
                first_seen,
            })
            .collect();
        out.sort_by(|a, b| a.rank().cmp(&b.rank()));
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        let groups: Vec<_> = self
            .groups
            .iter()
            .map(|(cg, g)| {
                serde_json::json!({
                    "cg": cg,
                    "super_cells": g.super_cells.values().collect::<Vec<_>>(),
                })
            })
            .collect();
        let mut hinges: Vec<_> = self.hinges.iter().collect();
        hinges.sort_by(|a, b| a.0.cmp(b.0));
        let hinges: Vec<_> = hinges
            .into_iter()
            .map(|(k, r)| {
                serde_json::json!({
                    "connects": k.connects,
                    "owned": k.owned,
                    "cell": r,
                })
            })
            .collect();
        serde_json::json!({
            "id": self.id(),
            "attr": self.attr,
            "groups": groups,
            "hinges": hinges,
        })
    }
}

/// The subgraphs of one attribute on one worker. Subgraphs never span
/// attributes since they connect only through shared cells.
#[derive(Clone, Debug, Default)]
struct AttrGraph {
    subgraphs: HashMap<u64, Subgraph>,
    cg_home: HashMap<CellGroupId, u64>,
    cell_home: HashMap<TupleId, u64>,
    next_key: u64,
    merges: u64,
    splits: u64,
}

impl AttrGraph {
    fn create(&mut self, attr: &AttributeId) -> u64 {
        let k = self.next_key;
        self.next_key += 1;
        self.subgraphs.insert(k, Subgraph::new(attr.clone()));
        k
    }

    /// Merges `keys` into the largest of them.
    fn merge(&mut self, keys: &BTreeSet<u64>) -> Option<u64> {
        let keep = *keys
            .iter()
            .max_by_key(|k| (self.subgraphs[k].size(), Reverse(**k)))?;
        for &k in keys {
            if k == keep {
                continue;
            }
            let other = self.subgraphs.remove(&k).expect("live key");
            for cg in other.groups.keys() {
                self.cg_home.insert(cg.clone(), keep);
            }
            for tid in other.cells.keys() {
                self.cell_home.insert(*tid, keep);
            }
            self.subgraphs.get_mut(&keep).unwrap().absorb(other);
            self.merges += 1;
        }
        Some(keep)
    }

    /// Finds or creates the subgraph holding `cgs` and the cells `tids`,
    /// merging as needed, and makes sure every group in `cgs` exists.
    fn target(
        &mut self,
        attr: &AttributeId,
        cgs: &BTreeSet<CellGroupId>,
        tids: impl IntoIterator<Item = TupleId>,
    ) -> u64 {
        let keys: BTreeSet<u64> = cgs
            .iter()
            .filter_map(|c| self.cg_home.get(c).copied())
            .chain(
                tids.into_iter()
                    .filter_map(|t| self.cell_home.get(&t).copied()),
            )
            .collect();
        let key = match self.merge(&keys) {
            Some(k) => k,
            None => self.create(attr),
        };
        let sg = self.subgraphs.get_mut(&key).unwrap();
        for cg in cgs {
            sg.groups.entry(cg.clone()).or_default();
            self.cg_home.insert(cg.clone(), key);
        }
        key
    }

    fn attach(&mut self, key: u64, tid: TupleId, value: &Value, add: &BTreeSet<CellGroupId>, owned: bool) {
        let sg = self.subgraphs.get_mut(&key).unwrap();
        sg.attach(tid, value, add, owned);
        if sg.cells.contains_key(&tid) {
            self.cell_home.insert(tid, key);
        }
    }

    fn drop_groups(&mut self, key: u64, dead: &BTreeSet<CellGroupId>) {
        let Some(sg) = self.subgraphs.get_mut(&key) else {
            return;
        };
        for tid in sg.remove_groups(dead) {
            self.cell_home.remove(&tid);
        }
        for cg in dead {
            self.cg_home.remove(cg);
        }
        self.resplit(key);
    }

    /// Splits subgraph `key` into its connected components, where two
    /// groups are connected when a hinge record links them.
    fn resplit(&mut self, key: u64) {
        let Some(sg) = self.subgraphs.get(&key) else {
            return;
        };
        if sg.groups.is_empty() {
            let sg = self.subgraphs.remove(&key).unwrap();
            for tid in sg.cells.keys() {
                self.cell_home.remove(tid);
            }
            return;
        }
        let comps = connected_components(
            sg.groups.keys().cloned(),
            sg.hinges.keys().map(|h| h.connects.iter().cloned()),
        );
        if comps.len() <= 1 {
            return;
        }
        let mut sg = self.subgraphs.remove(&key).unwrap();
        self.splits += comps.len() as u64 - 1;
        for (i, comp) in comps.iter().enumerate() {
            let part = sg.extract(comp);
            let k = if i == 0 {
                key
            } else {
                self.next_key += 1;
                self.next_key - 1
            };
            for cg in part.groups.keys() {
                self.cg_home.insert(cg.clone(), k);
            }
            for tid in part.cells.keys() {
                self.cell_home.insert(*tid, k);
            }
            self.subgraphs.insert(k, part);
        }
    }
}

/// A hinge cell learned by one worker that others may not know about.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HingeLink {
    pub tuple_id: TupleId,
    pub value: Value,
    pub connects: BTreeSet<CellGroupId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeProposal {
    pub worker: usize,
    pub tuple_id: TupleId,
    pub attr: AttributeId,
    pub cg_ids: SubgraphId,
    pub links: Vec<HingeLink>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeDecision {
    pub tuple_id: TupleId,
    pub attr: AttributeId,
    pub cg_ids: SubgraphId,
    pub links: Vec<HingeLink>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairProposal {
    pub worker: usize,
    pub tuple_id: TupleId,
    pub attr: AttributeId,
    pub candidates: Vec<Candidate>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairDecision {
    pub tuple_id: TupleId,
    pub attr: AttributeId,
    pub chosen: Value,
    pub original: Value,
}

impl RepairDecision {
    pub fn changed(&self) -> bool {
        self.chosen != self.original
    }
}

/// The stateless coordinator: the decision is the union of all proposals.
pub fn decide(
    n_workers: usize,
    tuple_id: TupleId,
    attr: &AttributeId,
    proposals: &[MergeProposal],
) -> Result<MergeDecision, CoordinationError> {
    for w in 0..n_workers {
        if !proposals.iter().any(|p| p.worker == w) {
            return Err(CoordinationError::MissingProposal { worker: w, tuple: tuple_id });
        }
    }
    let mut cg_ids = SubgraphId::new();
    let mut links = BTreeSet::new();
    for p in proposals.iter().filter(|p| p.tuple_id == tuple_id && &p.attr == attr) {
        cg_ids.extend(p.cg_ids.iter().cloned());
        links.extend(p.links.iter().cloned());
    }
    Ok(MergeDecision {
        tuple_id,
        attr: attr.clone(),
        cg_ids,
        links: links.into_iter().collect(),
    })
}

/// Sums candidate frequencies across workers and rewrites the violated
/// attributes of `t`.
pub fn aggregate(t: &Tuple, proposals: &[RepairProposal]) -> (Tuple, Vec<RepairDecision>) {
    let mut by_attr: BTreeMap<&AttributeId, HashMap<&Value, (u64, TupleId)>> = BTreeMap::new();
    for p in proposals.iter().filter(|p| p.tuple_id == t.id) {
        let acc = by_attr.entry(&p.attr).or_default();
        for c in &p.candidates {
            let e = acc.entry(&c.value).or_insert((0, c.first_seen));
            e.0 += c.frequency;
            e.1 = e.1.min(c.first_seen);
        }
    }
    let mut out = t.clone();
    let mut decisions = Vec::new();
    for (attr, acc) in by_attr {
        let Ok(original) = t.get(attr) else {
            continue;
        };
        let best = acc
            .into_iter()
            .map(|(value, (frequency, first_seen))| Candidate {
                value: value.clone(),
                frequency,
                first_seen,
            })
            .min_by(|a, b| a.rank().cmp(&b.rank()));
        let chosen = best.map_or_else(|| original.clone(), |c| c.value);
        out.values.insert(attr.clone(), chosen.clone());
        decisions.push(RepairDecision {
            tuple_id: t.id,
            attr: attr.clone(),
            chosen,
            original: original.clone(),
        });
    }
    (out, decisions)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairCounters {
    pub violation_messages: u64,
    pub coordination_rounds: u64,
    pub merge_proposals: u64,
    pub merge_decisions: u64,
    pub subgraph_merges: u64,
    pub subgraph_splits: u64,
    pub repairs: u64,
}

impl std::ops::AddAssign for RepairCounters {
    fn add_assign(&mut self, o: Self) {
        self.violation_messages += o.violation_messages;
        self.coordination_rounds += o.coordination_rounds;
        self.merge_proposals += o.merge_proposals;
        self.merge_decisions += o.merge_decisions;
        self.subgraph_merges += o.subgraph_merges;
        self.subgraph_splits += o.subgraph_splits;
        self.repairs += o.repairs;
    }
}

/// Groups the violation messages of a bundle by the attribute they repair.
pub fn violations_by_attr(b: &TupleBundle) -> BTreeMap<AttributeId, Vec<&ViolationMessage>> {
    let mut out: BTreeMap<AttributeId, Vec<&ViolationMessage>> = BTreeMap::new();
    for m in b.violations() {
        let attr = m.current().expect("violation carries a cell").attr.clone();
        out.entry(attr).or_default().push(m);
    }
    out
}

#[derive(Clone, Debug)]
pub struct RepairWorker {
    index: usize,
    n_workers: usize,
    strategy: WindowStrategy,
    graphs: BTreeMap<AttributeId, AttrGraph>,
    queue: Option<KListQueue<(AttributeId, CellGroupId)>>,
    expiry: ExpiryLog<AttributeId>,
}

impl RepairWorker {
    pub fn new(index: usize, n_workers: usize, window: Option<WindowConfig>) -> Self {
        assert!(index < n_workers);
        Self {
            index,
            n_workers,
            strategy: window.map_or(WindowStrategy::Basic, |w| w.strategy),
            graphs: BTreeMap::new(),
            queue: window.map(|w| KListQueue::new(w.k())),
            expiry: ExpiryLog::default(),
        }
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn owns(&self, tid: TupleId) -> bool {
        partition(tid, self.n_workers) == self.index
    }

    /// Attributes of `b` whose messages carry an old cell that this worker
    /// already holds in a group of another rule. Evaluated before `b` is
    /// applied.
    pub fn coordination_attrs(&self, b: &TupleBundle) -> BTreeSet<AttributeId> {
        let mut out = BTreeSet::new();
        for m in b.violations() {
            let ViolationMessage::CompleteViolation { cg_id, old, .. } = m else {
                continue;
            };
            let Some(graph) = self.graphs.get(&old.attr) else {
                continue;
            };
            let shared = old.tuple_ids.iter().any(|tid| {
                graph
                    .cell_home
                    .get(tid)
                    .and_then(|k| graph.subgraphs[k].cells.get(tid))
                    .is_some_and(|slot| slot.groups.iter().any(|g| g.rule_id != cg_id.rule_id))
            });
            if shared {
                out.insert(old.attr.clone());
            }
        }
        out
    }

    pub fn needs_coordination(&self, b: &TupleBundle) -> bool {
        !self.coordination_attrs(b).is_empty()
    }

    /// Adds the cells of a bundle's violation messages to the local graph
    /// and returns one merge proposal per violated attribute.
    pub fn apply_bundle(&mut self, b: &TupleBundle) -> Vec<MergeProposal> {
        self.apply(b);
        let attrs = violations_by_attr(b).into_keys().collect();
        self.merge_proposals(b, &attrs)
    }

    /// Merge proposals for `attrs` of an already applied bundle: the local
    /// id of the subgraph holding the bundle's groups, plus the owned old
    /// cells that are hinges here.
    pub fn merge_proposals(&self, b: &TupleBundle, attrs: &BTreeSet<AttributeId>) -> Vec<MergeProposal> {
        let mut out = Vec::new();
        for (attr, msgs) in violations_by_attr(b) {
            if !attrs.contains(&attr) {
                continue;
            }
            let graph = self.graphs.get(&attr);
            let sg = graph.and_then(|g| {
                let cg = msgs.iter().find_map(|m| m.cg_id())?;
                g.subgraphs.get(g.cg_home.get(cg)?)
            });
            let mut links = BTreeSet::new();
            if let Some(sg) = sg {
                for m in &msgs {
                    let ViolationMessage::CompleteViolation { old, .. } = m else {
                        continue;
                    };
                    for tid in &old.tuple_ids {
                        if let Some(slot) = sg.cells.get(tid) {
                            if slot.owned && slot.groups.len() >= 2 {
                                links.insert(HingeLink {
                                    tuple_id: *tid,
                                    value: slot.value.clone(),
                                    connects: slot.groups.clone(),
                                });
                            }
                        }
                    }
                }
            }
            out.push(MergeProposal {
                worker: self.index,
                tuple_id: b.tuple.id,
                attr: attr.clone(),
                cg_ids: sg.map(Subgraph::id).unwrap_or_default(),
                links: links.into_iter().collect(),
            });
        }
        out
    }

    fn apply(&mut self, b: &TupleBundle) {
        for (attr, msgs) in violations_by_attr(b) {
            let cgs: BTreeSet<CellGroupId> =
                msgs.iter().filter_map(|m| m.cg_id()).cloned().collect();
            let old_tids: Vec<TupleId> = msgs
                .iter()
                .filter_map(|m| match m {
                    ViolationMessage::CompleteViolation { old, .. } => Some(old.tuple_ids.iter()),
                    _ => None,
                })
                .flatten()
                .copied()
                .collect();
            if let Some(q) = &mut self.queue {
                for cg in &cgs {
                    q.touch(&(attr.clone(), cg.clone()));
                }
            }
            let (index, n) = (self.index, self.n_workers);
            let graph = self.graphs.entry(attr.clone()).or_default();
            let key = graph.target(&attr, &cgs, old_tids.iter().copied());

            for m in &msgs {
                let ViolationMessage::CompleteViolation { cg_id, old, .. } = m else {
                    continue;
                };
                let add = BTreeSet::from([cg_id.clone()]);
                for &tid in &old.tuple_ids {
                    let owned = partition(tid, n) == index;
                    if owned || graph.subgraphs[&key].cells.contains_key(&tid) {
                        graph.attach(key, tid, &old.value, &add, owned);
                        self.expiry.record(tid, attr.clone());
                    }
                }
            }
            let current = msgs[0].current().expect("violation");
            let owned = partition(current.tuple_id, n) == index;
            if owned || cgs.len() >= 2 {
                graph.attach(key, current.tuple_id, &current.value, &cgs, owned);
                self.expiry.record(current.tuple_id, attr.clone());
            }
        }
    }

    /// Merges local subgraphs so that the decided id exists here too.
    pub fn apply_decision(&mut self, d: &MergeDecision) {
        let graph = self.graphs.entry(d.attr.clone()).or_default();
        let key = graph.target(&d.attr, &d.cg_ids, d.links.iter().map(|l| l.tuple_id));
        for l in &d.links {
            let owned = partition(l.tuple_id, self.n_workers) == self.index;
            if !owned {
                graph.attach(key, l.tuple_id, &l.value, &l.connects, false);
                self.expiry.record(l.tuple_id, d.attr.clone());
            }
        }
    }

    /// Local candidate frequencies for every violated attribute of `b`.
    pub fn repair_propose(&self, b: &TupleBundle) -> Vec<RepairProposal> {
        violations_by_attr(b)
            .into_iter()
            .map(|(attr, msgs)| {
                let candidates = self
                    .graphs
                    .get(&attr)
                    .and_then(|g| {
                        let cg = msgs[0].cg_id()?;
                        g.subgraphs.get(g.cg_home.get(cg)?)
                    })
                    .map(|sg| {
                        let r = sg.ranked();
                        r[..r.len().min(TOP_K)].to_vec()
                    })
                    .unwrap_or_default();
                RepairProposal {
                    worker: self.index,
                    tuple_id: b.tuple.id,
                    attr,
                    candidates,
                }
            })
            .collect()
    }

    /// Advances the window: drops cell groups untouched for `k` periods,
    /// splitting subgraphs they bridged, then removes (basic) or flushes
    /// (cumulative) cells below `slide.lo`.
    pub fn slide(&mut self, slide: Slide) {
        let Some(q) = &mut self.queue else {
            return;
        };
        let mut dead: BTreeMap<AttributeId, BTreeMap<u64, BTreeSet<CellGroupId>>> = BTreeMap::new();
        for (attr, cg) in q.slide() {
            if let Some(key) = self.graphs.get(&attr).and_then(|g| g.cg_home.get(&cg)) {
                dead.entry(attr.clone())
                    .or_default()
                    .entry(*key)
                    .or_default()
                    .insert(cg);
            }
        }
        for (attr, by_key) in dead {
            let graph = self.graphs.get_mut(&attr).unwrap();
            for (key, cgs) in by_key {
                graph.drop_groups(key, &cgs);
            }
        }

        let mut resplit: BTreeMap<AttributeId, BTreeSet<u64>> = BTreeMap::new();
        for (tid, attr) in self.expiry.expire_below(slide.lo) {
            let Some(graph) = self.graphs.get_mut(&attr) else {
                continue;
            };
            let Some(key) = graph.cell_home.remove(&tid) else {
                continue;
            };
            let was_hinge = graph
                .subgraphs
                .get_mut(&key)
                .and_then(|sg| sg.expire(tid, self.strategy))
                .unwrap_or(false);
            if was_hinge && self.strategy == WindowStrategy::Basic {
                resplit.entry(attr).or_default().insert(key);
            }
        }
        for (attr, keys) in resplit {
            let graph = self.graphs.get_mut(&attr).unwrap();
            for key in keys {
                graph.resplit(key);
            }
        }
    }

    /// Removes every cell group of `rule`, splitting subgraphs it bridged.
    pub fn drop_rule(&mut self, rule: RuleId) {
        for (attr, graph) in &mut self.graphs {
            let mut by_key: BTreeMap<u64, BTreeSet<CellGroupId>> = BTreeMap::new();
            for (cg, key) in &graph.cg_home {
                if cg.rule_id == rule {
                    by_key.entry(*key).or_default().insert(cg.clone());
                }
            }
            for (key, cgs) in by_key {
                if let Some(q) = &mut self.queue {
                    for cg in &cgs {
                        q.remove(&(attr.clone(), cg.clone()));
                    }
                }
                graph.drop_groups(key, &cgs);
            }
        }
    }

    /// Local subgraph ids of `attr`, sorted.
    pub fn subgraph_ids(&self, attr: &AttributeId) -> Vec<SubgraphId> {
        let mut ids: Vec<_> = self
            .graphs
            .get(attr)
            .map(|g| g.subgraphs.values().map(Subgraph::id).collect())
            .unwrap_or_default();
        ids.sort();
        ids
    }

    pub fn subgraph_of(&self, attr: &AttributeId, cg: &CellGroupId) -> Option<&Subgraph> {
        let g = self.graphs.get(attr)?;
        g.subgraphs.get(g.cg_home.get(cg)?)
    }

    /// Cells stored or tracked on this worker.
    pub fn cell_count(&self) -> usize {
        self.graphs.values().map(|g| g.cell_home.len()).sum()
    }

    pub fn subgraph_count(&self) -> usize {
        self.graphs.values().map(|g| g.subgraphs.len()).sum()
    }

    pub fn counters(&self) -> RepairCounters {
        RepairCounters {
            subgraph_merges: self.graphs.values().map(|g| g.merges).sum(),
            subgraph_splits: self.graphs.values().map(|g| g.splits).sum(),
            ..Default::default()
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut sgs: Vec<&Subgraph> = self
            .graphs
            .values()
            .flat_map(|g| g.subgraphs.values())
            .collect();
        sgs.sort_by_key(|s| (s.attr.clone(), s.id()));
        serde_json::json!({
            "worker": self.index,
            "subgraphs": sgs.into_iter().map(Subgraph::to_json).collect::<Vec<_>>(),
        })
    }

    pub fn handle(&mut self, cmd: &WorkerCmd) -> WorkerReply {
        match cmd {
            WorkerCmd::Prepare(b) => {
                let flagged = self.coordination_attrs(b);
                self.apply(b);
                WorkerReply::Prepared(flagged)
            }
            WorkerCmd::ProposeMerges { bundle, attrs } => {
                WorkerReply::Merges(self.merge_proposals(bundle, attrs))
            }
            WorkerCmd::Finish {
                bundle,
                decisions,
                protocol,
            } => {
                let proposals = if *protocol == Protocol::Ir {
                    let p = self.repair_propose(bundle);
                    decisions.iter().for_each(|d| self.apply_decision(d));
                    p
                } else {
                    decisions.iter().for_each(|d| self.apply_decision(d));
                    self.repair_propose(bundle)
                };
                WorkerReply::Proposals(proposals)
            }
            WorkerCmd::Slide(s) => {
                self.slide(*s);
                WorkerReply::Done
            }
            WorkerCmd::DropRule(r) => {
                self.drop_rule(*r);
                WorkerReply::Done
            }
            WorkerCmd::Dump => WorkerReply::Dump(self.to_json()),
            WorkerCmd::Stats => WorkerReply::Stats {
                counters: self.counters(),
                cells: self.cell_count(),
                subgraphs: self.subgraph_count(),
            },
        }
    }
}

/// Requests sent to every repair worker.
#[derive(Clone, Debug)]
pub enum WorkerCmd {
    /// Check the coordination need, then apply the bundle.
    Prepare(Arc<TupleBundle>),
    /// Report local subgraph ids for the attributes being coordinated.
    ProposeMerges {
        bundle: Arc<TupleBundle>,
        attrs: Arc<BTreeSet<AttributeId>>,
    },
    /// Apply merge decisions and emit repair proposals.
    Finish {
        bundle: Arc<TupleBundle>,
        decisions: Arc<Vec<MergeDecision>>,
        protocol: Protocol,
    },
    Slide(Slide),
    DropRule(RuleId),
    Dump,
    Stats,
}

#[derive(Clone, Debug)]
pub enum WorkerReply {
    /// Attributes this worker wants coordinated.
    Prepared(BTreeSet<AttributeId>),
    Merges(Vec<MergeProposal>),
    Proposals(Vec<RepairProposal>),
    Done,
    Dump(serde_json::Value),
    Stats {
        counters: RepairCounters,
        cells: usize,
        subgraphs: usize,
    },
}

/// A set of repair workers addressed by broadcast. Replies come back in
/// worker index order.
pub trait WorkerPool {
    fn n_workers(&self) -> usize;
    fn broadcast(&mut self, cmd: WorkerCmd) -> Result<Vec<WorkerReply>, EngineError>;
}

/// Workers called one after the other on the caller's thread.
#[derive(Debug)]
pub struct LocalPool {
    workers: Vec<RepairWorker>,
}

impl LocalPool {
    pub fn new(n_workers: usize, window: Option<WindowConfig>) -> Self {
        Self {
            workers: (0..n_workers)
                .map(|i| RepairWorker::new(i, n_workers, window))
                .collect(),
        }
    }

    pub fn workers(&self) -> &[RepairWorker] {
        &self.workers
    }
}

impl WorkerPool for LocalPool {
    fn n_workers(&self) -> usize {
        self.workers.len()
    }

    fn broadcast(&mut self, cmd: WorkerCmd) -> Result<Vec<WorkerReply>, EngineError> {
        Ok(self.workers.iter_mut().map(|w| w.handle(&cmd)).collect())
    }
}

/// Runs the repair protocol for each released bundle: workers apply it,
/// the coordinator settles subgraph ids where needed, workers propose and
/// the aggregator picks values.
#[derive(Debug)]
pub struct RepairStage<P> {
    pool: P,
    protocol: Protocol,
    counters: RepairCounters,
}

impl<P: WorkerPool> RepairStage<P> {
    pub fn new(pool: P, protocol: Protocol) -> Self {
        Self {
            pool,
            protocol,
            counters: RepairCounters::default(),
        }
    }

    pub fn pool(&self) -> &P {
        &self.pool
    }

    pub fn protocol(&self) -> Protocol {
        self.protocol
    }

    pub fn process(&mut self, bundle: TupleBundle) -> Result<(Tuple, Vec<RepairDecision>), EngineError> {
        if bundle.is_clean() {
            return Ok((bundle.tuple, Vec::new()));
        }
        self.counters.violation_messages += bundle.violations().count() as u64;
        let bundle = Arc::new(bundle);
        let n = self.pool.n_workers();

        let mut flagged = BTreeSet::new();
        for reply in self.pool.broadcast(WorkerCmd::Prepare(bundle.clone()))? {
            let WorkerReply::Prepared(f) = reply else {
                unreachable!("prepare answers with flagged attributes");
            };
            flagged.extend(f);
        }
        let attrs: BTreeSet<AttributeId> = match self.protocol {
            Protocol::Basic => violations_by_attr(&bundle).into_keys().collect(),
            Protocol::Dr | Protocol::Ir => flagged,
        };

        let mut decisions = Vec::new();
        if !attrs.is_empty() {
            let mut merges: BTreeMap<AttributeId, Vec<MergeProposal>> = BTreeMap::new();
            for reply in self.pool.broadcast(WorkerCmd::ProposeMerges {
                bundle: bundle.clone(),
                attrs: Arc::new(attrs),
            })? {
                let WorkerReply::Merges(m) = reply else {
                    unreachable!("merge request answers with proposals");
                };
                for p in m {
                    merges.entry(p.attr.clone()).or_default().push(p);
                }
            }
            for (attr, proposals) in &merges {
                decisions.push(decide(n, bundle.tuple.id, attr, proposals)?);
                self.counters.coordination_rounds += 1;
                self.counters.merge_proposals += n as u64;
                self.counters.merge_decisions += n as u64;
            }
        }

        let mut proposals = Vec::new();
        for reply in self.pool.broadcast(WorkerCmd::Finish {
            bundle: bundle.clone(),
            decisions: Arc::new(decisions),
            protocol: self.protocol,
        })? {
            let WorkerReply::Proposals(p) = reply else {
                unreachable!("finish answers with repair proposals");
            };
            proposals.extend(p);
        }
        let (out, decisions) = aggregate(&bundle.tuple, &proposals);
        self.counters.repairs += decisions.iter().filter(|d| d.changed()).count() as u64;
        Ok((out, decisions))
    }

    pub fn slide(&mut self, s: Slide) -> Result<(), EngineError> {
        self.pool.broadcast(WorkerCmd::Slide(s)).map(drop)
    }

    pub fn drop_rule(&mut self, r: RuleId) -> Result<(), EngineError> {
        self.pool.broadcast(WorkerCmd::DropRule(r)).map(drop)
    }

    pub fn dump(&mut self) -> Result<Vec<serde_json::Value>, EngineError> {
        Ok(self
            .pool
            .broadcast(WorkerCmd::Dump)?
            .into_iter()
            .filter_map(|r| match r {
                WorkerReply::Dump(v) => Some(v),
                _ => None,
            })
            .collect())
    }

    /// Protocol counters plus the workers' merge/split counts, and the
    /// total number of cells held and subgraph partitions.
    pub fn stats(&mut self) -> Result<(RepairCounters, usize, usize), EngineError> {
        let mut total = self.counters;
        let (mut cells, mut sgs) = (0, 0);
        for r in self.pool.broadcast(WorkerCmd::Stats)? {
            if let WorkerReply::Stats {
                counters,
                cells: c,
                subgraphs: s,
            } = r
            {
                total += counters;
                cells += c;
                sgs += s;
            }
        }
        Ok((total, cells, sgs))
    }

    pub fn counters(&self) -> RepairCounters {
        self.counters
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::windowing::WindowClock;

    fn cg(rule: u32, key: &str) -> CellGroupId {
        CellGroupId::new(RuleId(rule), vec![Value::text(key)])
    }

    fn cell(tid: u64, v: &str) -> Cell {
        Cell {
            tuple_id: TupleId(tid),
            attr: "B".into(),
            value: Value::text(v),
        }
    }

    fn sc(ids: &[u64], v: &str) -> SuperCell {
        SuperCell {
            tuple_ids: ids.iter().copied().map(TupleId).collect(),
            attr: "B".into(),
            value: Value::text(v),
        }
    }

    fn complete(g: CellGroupId, cur: Cell, old: SuperCell) -> ViolationMessage {
        ViolationMessage::CompleteViolation { cg_id: g, current: cur, old }
    }

    fn append(g: CellGroupId, cur: Cell) -> ViolationMessage {
        ViolationMessage::AppendOnlyViolation { cg_id: g, current: cur }
    }

    fn bundle(tid: u64, v: &str, msgs: Vec<ViolationMessage>) -> TupleBundle {
        TupleBundle {
            tuple: Tuple::new(tid, [("B", Value::text(v))]),
            messages: msgs.into_iter().map(|m| (m.rule_id(), m)).collect(),
        }
    }

    fn set(cgs: &[CellGroupId]) -> SubgraphId {
        cgs.iter().cloned().collect()
    }

    /// Two workers holding sg{cg1} = {c1,c2,c3} and sg{cg2} = {c4,c5}.
    fn initial_state() -> Vec<RepairWorker> {
        let mut ws: Vec<_> = (0..2).map(|i| RepairWorker::new(i, 2, None)).collect();
        let bundles = [
            bundle(2, "y", vec![complete(cg(1, "k"), cell(2, "y"), sc(&[1], "x"))]),
            bundle(3, "z", vec![append(cg(1, "k"), cell(3, "z"))]),
            bundle(5, "q", vec![complete(cg(2, "m"), cell(5, "q"), sc(&[4], "p"))]),
        ];
        for b in &bundles {
            for w in &mut ws {
                assert!(!w.needs_coordination(b));
                w.apply_bundle(b);
            }
        }
        ws
    }

    #[test]
    fn partition_is_offset_modulo() {
        assert_eq!(partition(TupleId(7), 1), 0);
        let owners: Vec<_> = (1..=6).map(|t| partition(TupleId(t), 2)).collect();
        assert_eq!(owners, vec![0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn initial_state_layout() {
        let ws = initial_state();
        let attr = AttributeId::new("B");
        for w in &ws {
            assert_eq!(w.subgraph_ids(&attr), vec![set(&[cg(1, "k")]), set(&[cg(2, "m")])]);
        }
        let held = |w: &RepairWorker, g| w.subgraph_of(&attr, &g).unwrap().tuple_ids();
        let ids = |v: &[u64]| v.iter().copied().map(TupleId).collect::<BTreeSet<_>>();
        assert_eq!(held(&ws[0], cg(1, "k")), ids(&[1, 3]));
        assert_eq!(held(&ws[0], cg(2, "m")), ids(&[5]));
        assert_eq!(held(&ws[1], cg(1, "k")), ids(&[2]));
        assert_eq!(held(&ws[1], cg(2, "m")), ids(&[4]));
    }

    #[test]
    fn old_cell_of_another_rule_needs_coordination() {
        let mut ws = initial_state();
        let attr = AttributeId::new("B");
        let b = bundle(6, "w", vec![complete(cg(3, "n"), cell(6, "w"), sc(&[1], "x"))]);
        assert!(ws[0].needs_coordination(&b));
        assert!(!ws[1].needs_coordination(&b));
        let proposals: Vec<_> = ws.iter_mut().flat_map(|w| w.apply_bundle(&b)).collect();
        // Only the owner of c1 merges.
        assert_eq!(
            ws[0].subgraph_ids(&attr),
            vec![set(&[cg(1, "k"), cg(3, "n")]), set(&[cg(2, "m")])]
        );
        assert_eq!(
            ws[1].subgraph_ids(&attr),
            vec![set(&[cg(1, "k")]), set(&[cg(2, "m")]), set(&[cg(3, "n")])]
        );
        let d = decide(2, TupleId(6), &attr, &proposals).unwrap();
        assert_eq!(d.cg_ids, set(&[cg(1, "k"), cg(3, "n")]));
        for w in &mut ws {
            w.apply_decision(&d);
        }
        for w in &ws {
            assert_eq!(
                w.subgraph_ids(&attr),
                vec![set(&[cg(1, "k"), cg(3, "n")]), set(&[cg(2, "m")])]
            );
        }
        // rw2 learned that c1 bridges both groups.
        let sg = ws[1].subgraph_of(&attr, &cg(1, "k")).unwrap();
        assert!(sg
            .hinges()
            .any(|(k, _)| !k.owned && k.connects == set(&[cg(1, "k"), cg(3, "n")])));
    }

    #[test]
    fn current_cell_overlap_merges_without_coordination() {
        let mut ws = initial_state();
        let attr = AttributeId::new("B");
        let b = bundle(
            6,
            "w",
            vec![append(cg(1, "k"), cell(6, "w")), append(cg(2, "m"), cell(6, "w"))],
        );
        for w in &mut ws {
            assert!(!w.needs_coordination(&b));
            w.apply_bundle(&b);
        }
        for w in &ws {
            assert_eq!(w.subgraph_ids(&attr), vec![set(&[cg(1, "k"), cg(2, "m")])]);
        }
        // c6 is stored once, on its owner, but both workers know the hinge.
        let owner = partition(TupleId(6), 2);
        for w in &ws {
            let sg = w.subgraph_of(&attr, &cg(1, "k")).unwrap();
            let (k, rec) = sg.hinges().next().unwrap();
            assert_eq!(k.owned, w.index() == owner);
            assert_eq!(rec.ids(), &[TupleId(6)]);
        }
    }

    #[test]
    fn candidates_count_hinges_once() {
        let mut w = RepairWorker::new(0, 1, None);
        let b = bundle(
            3,
            "y",
            vec![
                complete(cg(1, "k"), cell(3, "y"), sc(&[1], "x")),
                complete(cg(2, "m"), cell(3, "y"), sc(&[2], "x")),
            ],
        );
        w.apply_bundle(&b);
        let p = w.repair_propose(&b);
        assert_eq!(p.len(), 1);
        let freq: Vec<_> = p[0].candidates.iter().map(|c| (c.value.clone(), c.frequency)).collect();
        assert_eq!(freq, vec![(Value::text("x"), 2), (Value::text("y"), 1)]);
    }

    #[test]
    fn aggregate_sums_and_breaks_ties() {
        let t = Tuple::new(4, [("B", "c".into())]);
        let cand = |v: &str, f, s| Candidate {
            value: v.into(),
            frequency: f,
            first_seen: TupleId(s),
        };
        let p = |w, cs| RepairProposal {
            worker: w,
            tuple_id: TupleId(4),
            attr: "B".into(),
            candidates: cs,
        };
        let (out, d) = aggregate(&t, &[p(0, vec![cand("b", 3, 1)]), p(1, vec![cand("c", 1, 4)])]);
        assert_eq!(out.values[&AttributeId::new("B")], Value::text("b"));
        assert!(d[0].changed());

        let (out, _) = aggregate(&t, &[p(0, vec![cand("c", 2, 4), cand("b", 1, 1)])]);
        assert_eq!(out, t);

        // Equal frequency: the value seen first wins.
        let (out, _) = aggregate(&t, &[p(0, vec![cand("c", 2, 4)]), p(1, vec![cand("b", 2, 2)])]);
        assert_eq!(out.values[&AttributeId::new("B")], Value::text("b"));
        let (out, _) = aggregate(&t, &[p(0, vec![cand("c", 2, 2)]), p(1, vec![cand("b", 2, 2)])]);
        assert_eq!(out.values[&AttributeId::new("B")], Value::text("b"));
    }

    #[test]
    fn coordinator_requires_every_worker() {
        let p = MergeProposal {
            worker: 0,
            tuple_id: TupleId(1),
            attr: "B".into(),
            cg_ids: set(&[cg(1, "k")]),
            links: vec![],
        };
        assert_eq!(
            decide(2, TupleId(1), &"B".into(), std::slice::from_ref(&p)),
            Err(CoordinationError::MissingProposal { worker: 1, tuple: TupleId(1) })
        );
        assert!(decide(1, TupleId(1), &"B".into(), &[p]).is_ok());
    }

    fn run_window(strategy: WindowStrategy) -> (Vec<Value>, RepairWorker) {
        // A -> B over b,b,b,c,c with W=4, S=2.
        let w = WindowConfig::new(4, 2, strategy).unwrap();
        let mut clock = WindowClock::new(Some(w));
        let mut worker = RepairWorker::new(0, 1, Some(w));
        let mut out = Vec::new();
        let stream: [(u64, &str, Vec<ViolationMessage>); 5] = [
            (1, "b", vec![]),
            (2, "b", vec![]),
            (3, "b", vec![]),
            (4, "c", vec![complete(cg(0, "a"), cell(4, "c"), sc(&[1, 2, 3], "b"))]),
            (5, "c", vec![append(cg(0, "a"), cell(5, "c"))]),
        ];
        for (tid, v, msgs) in stream {
            if let Some(s) = clock.arrive(TupleId(tid)) {
                worker.slide(s);
            }
            let b = bundle(tid, v, msgs);
            if b.is_clean() {
                out.push(Value::text(v));
                continue;
            }
            worker.apply_bundle(&b);
            let (t, _) = aggregate(&b.tuple, &worker.repair_propose(&b));
            out.push(t.values[&AttributeId::new("B")].clone());
        }
        (out, worker)
    }

    #[test]
    fn basic_window_loses_history() {
        let (out, w) = run_window(WindowStrategy::Basic);
        let expect: Vec<Value> = ["b", "b", "b", "b", "c"].map(Value::text).to_vec();
        assert_eq!(out, expect);
        let sg = w.subgraph_of(&"B".into(), &cg(0, "a")).unwrap();
        let g = sg.group(&cg(0, "a")).unwrap();
        assert_eq!(g.get(&"b".into()).unwrap().count, 1);
        assert_eq!(g.get(&"c".into()).unwrap().count, 2);
    }

    #[test]
    fn cumulative_window_keeps_counts() {
        let (out, w) = run_window(WindowStrategy::Cumulative);
        let expect: Vec<Value> = ["b", "b", "b", "b", "b"].map(Value::text).to_vec();
        assert_eq!(out, expect);
        let g = w
            .subgraph_of(&"B".into(), &cg(0, "a"))
            .unwrap()
            .group(&cg(0, "a"))
            .unwrap();
        let b = g.get(&"b".into()).unwrap();
        assert_eq!((b.ids(), b.count), (&[TupleId(3)][..], 3));
        let c = g.get(&"c".into()).unwrap();
        assert_eq!((c.ids(), c.count), (&[TupleId(4), TupleId(5)][..], 2));
    }

    #[test]
    fn stage_counts_rounds_per_protocol() {
        let b6 = bundle(6, "w", vec![complete(cg(3, "n"), cell(6, "w"), sc(&[1], "x"))]);
        let b7 = bundle(7, "z", vec![append(cg(1, "k"), cell(7, "z"))]);
        let rounds = |p| {
            let ws = initial_state();
            let mut stage = RepairStage::new(LocalPool { workers: ws }, p);
            stage.process(b6.clone()).unwrap();
            stage.process(b7.clone()).unwrap();
            let ids: Vec<_> = stage
                .pool()
                .workers()
                .iter()
                .map(|w| w.subgraph_ids(&"B".into()))
                .collect();
            assert_eq!(ids[0], ids[1]);
            stage.counters().coordination_rounds
        };
        assert_eq!(rounds(Protocol::Basic), 2);
        assert_eq!(rounds(Protocol::Dr), 1);
        assert_eq!(rounds(Protocol::Ir), 1);
    }
}
