//! Rule updates at runtime and the connectivity check used to split
//! subgraphs when cell groups disappear.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, RuleUpdateError};
use crate::model::{Rule, RuleId, TupleId};
use crate::repair::RepairWorker;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum RuleOp {
    Add { rule: Rule },
    Delete { rule_id: RuleId },
}

/// A rule update applied right before the first tuple whose id is at
/// least `effective_seq`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleUpdate {
    #[serde(rename = "at")]
    pub effective_seq: TupleId,
    #[serde(flatten)]
    pub op: RuleOp,
}

impl RuleUpdate {
    pub fn add(at: u64, rule: Rule) -> Self {
        Self {
            effective_seq: TupleId(at),
            op: RuleOp::Add { rule },
        }
    }

    pub fn delete(at: u64, rule_id: u32) -> Self {
        Self {
            effective_seq: TupleId(at),
            op: RuleOp::Delete {
                rule_id: RuleId(rule_id),
            },
        }
    }
}

/// Parses a JSONL schedule of rule updates, sorted by position.
pub fn parse_schedule(text: &str) -> Result<Vec<RuleUpdate>, ModelError> {
    let mut out: Vec<RuleUpdate> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()?;
    out.sort_by_key(|u| u.effective_seq);
    Ok(out)
}

/// The active rule set.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RuleSet {
    rules: BTreeMap<RuleId, Rule>,
}

impl RuleSet {
    pub fn new(rules: impl IntoIterator<Item = Rule>) -> Result<Self, RuleUpdateError> {
        let mut set = Self::default();
        for r in rules {
            set.apply_add(r)?;
        }
        Ok(set)
    }

    pub fn apply_add(&mut self, rule: Rule) -> Result<(), RuleUpdateError> {
        if self.rules.contains_key(&rule.id) {
            return Err(RuleUpdateError::DuplicateRule(rule.id));
        }
        self.rules.insert(rule.id, rule);
        Ok(())
    }

    pub fn apply_delete(&mut self, id: RuleId) -> Result<Rule, RuleUpdateError> {
        self.rules
            .remove(&id)
            .ok_or(RuleUpdateError::UnknownRule(id))
    }

    pub fn apply(&mut self, op: &RuleOp) -> Result<(), RuleUpdateError> {
        match op {
            RuleOp::Add { rule } => self.apply_add(rule.clone()),
            RuleOp::Delete { rule_id } => self.apply_delete(*rule_id).map(drop),
        }
    }

    pub fn get(&self, id: RuleId) -> Option<&Rule> {
        self.rules.get(&id)
    }

    pub fn ids(&self) -> BTreeSet<RuleId> {
        self.rules.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Rule> {
        self.rules.values()
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

/// Removes the cell groups of `deleted` from every subgraph of `worker`
/// and splits subgraphs whose remaining groups are no longer bridged.
pub fn split_subgraphs(worker: &mut RepairWorker, deleted: RuleId) {
    worker.drop_rule(deleted);
}

/// Connected components of `nodes`, where each edge list joins all of its
/// members. Edge members that are not nodes are ignored. Components are
/// returned ordered by their smallest node.
pub fn connected_components<K, E>(
    nodes: impl IntoIterator<Item = K>,
    edges: impl IntoIterator<Item = E>,
) -> Vec<BTreeSet<K>>
where
    K: Ord + Clone + std::hash::Hash,
    E: IntoIterator<Item = K>,
{
    let nodes: Vec<K> = nodes.into_iter().collect();
    let index: HashMap<&K, usize> = nodes.iter().enumerate().map(|(i, k)| (k, i)).collect();
    let mut uf = UnionFind::new(nodes.len());
    for e in edges {
        let mut first = None;
        for k in e {
            let Some(&i) = index.get(&k) else {
                continue;
            };
            match first {
                None => first = Some(i),
                Some(f) => uf.union(f, i),
            }
        }
    }
    let mut comps: BTreeMap<usize, BTreeSet<K>> = BTreeMap::new();
    for (i, k) in nodes.iter().enumerate() {
        comps.entry(uf.find(i)).or_default().insert(k.clone());
    }
    let mut out: Vec<BTreeSet<K>> = comps.into_values().collect();
    out.sort_by(|a, b| a.first().cmp(&b.first()));
    out
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (a, b) = (self.find(a), self.find(b));
        if a == b {
            return;
        }
        match self.rank[a].cmp(&self.rank[b]) {
            std::cmp::Ordering::Less => self.parent[a] = b,
            std::cmp::Ordering::Greater => self.parent[b] = a,
            std::cmp::Ordering::Equal => {
                self.parent[b] = a;
                self.rank[a] += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{CellGroupId, SuperCell, TupleBundle, ViolationMessage};
    use crate::model::{Cell, Tuple, Value};
    use crate::repair::SubgraphId;

    fn cg(rule: u32) -> CellGroupId {
        CellGroupId::new(RuleId(rule), vec![Value::text("k")])
    }

    fn cell(tid: u64) -> Cell {
        Cell {
            tuple_id: TupleId(tid),
            attr: "B".into(),
            value: Value::text(&format!("v{tid}")),
        }
    }

    fn bundle(tid: u64, msgs: Vec<ViolationMessage>) -> TupleBundle {
        TupleBundle {
            tuple: Tuple::new(tid, [("B", cell(tid).value)]),
            messages: msgs.into_iter().map(|m| (m.rule_id(), m)).collect(),
        }
    }

    fn complete(rule: u32, cur: u64, old: u64) -> ViolationMessage {
        ViolationMessage::CompleteViolation {
            cg_id: cg(rule),
            current: cell(cur),
            old: SuperCell {
                tuple_ids: vec![TupleId(old)],
                attr: "B".into(),
                value: cell(old).value,
            },
        }
    }

    fn append(rule: u32, cur: u64) -> ViolationMessage {
        ViolationMessage::AppendOnlyViolation {
            cg_id: cg(rule),
            current: cell(cur),
        }
    }

    fn ids(rules: &[u32]) -> SubgraphId {
        rules.iter().map(|r| cg(*r)).collect()
    }

    /// One subgraph over cg1, cg2, cg3 with hinge cells c1 (cg1, cg3) and
    /// c7 (cg2, cg3), replicated on two workers.
    fn bridged() -> Vec<RepairWorker> {
        let mut ws: Vec<_> = (0..2).map(|i| RepairWorker::new(i, 2, None)).collect();
        let bundles = [
            bundle(2, vec![complete(1, 2, 1)]),
            bundle(3, vec![complete(3, 3, 1)]),
            bundle(5, vec![complete(2, 5, 4)]),
            bundle(7, vec![append(2, 7), append(3, 7)]),
        ];
        for b in &bundles {
            let flagged = ws.iter().any(|w| w.needs_coordination(b));
            let props: Vec<_> = ws.iter_mut().flat_map(|w| w.apply_bundle(b)).collect();
            if flagged {
                let d = crate::repair::decide(2, b.tuple.id, &"B".into(), &props).unwrap();
                ws.iter_mut().for_each(|w| w.apply_decision(&d));
            }
        }
        for w in &ws {
            assert_eq!(w.subgraph_ids(&"B".into()), vec![ids(&[1, 2, 3])]);
        }
        ws
    }

    fn hinge_sets(w: &RepairWorker, rule: u32) -> BTreeSet<SubgraphId> {
        w.subgraph_of(&"B".into(), &cg(rule))
            .unwrap()
            .hinges()
            .map(|(k, _)| k.connects.clone())
            .collect()
    }

    #[test]
    fn deleting_a_leaf_group_shrinks() {
        let mut ws = bridged();
        for w in &mut ws {
            split_subgraphs(w, RuleId(2));
            assert_eq!(w.subgraph_ids(&"B".into()), vec![ids(&[1, 3])]);
            assert_eq!(hinge_sets(w, 1), BTreeSet::from([ids(&[1, 3])]));
        }
        // c7 stays, as a plain cell of cg3, on its owner.
        let owner = crate::repair::partition(TupleId(7), 2);
        let sg = ws[owner].subgraph_of(&"B".into(), &cg(3)).unwrap();
        assert!(sg.group(&cg(3)).unwrap().get(&cell(7).value).is_some());
    }

    #[test]
    fn deleting_the_bridge_group_splits() {
        let mut ws = bridged();
        for w in &mut ws {
            split_subgraphs(w, RuleId(3));
            assert_eq!(w.subgraph_ids(&"B".into()), vec![ids(&[1]), ids(&[2])]);
            assert!(hinge_sets(w, 1).is_empty() && hinge_sets(w, 2).is_empty());
        }
        let c1_owner = &ws[crate::repair::partition(TupleId(1), 2)];
        let sg = c1_owner.subgraph_of(&"B".into(), &cg(1)).unwrap();
        assert_eq!(sg.group(&cg(1)).unwrap().get(&cell(1).value).unwrap().count, 1);
    }

    #[test]
    fn deleting_an_isolated_rule() {
        let mut w = RepairWorker::new(0, 1, None);
        w.apply_bundle(&bundle(2, vec![complete(1, 2, 1)]));
        split_subgraphs(&mut w, RuleId(9));
        assert_eq!(w.subgraph_ids(&"B".into()), vec![ids(&[1])]);
        split_subgraphs(&mut w, RuleId(1));
        assert!(w.subgraph_ids(&"B".into()).is_empty());
        assert_eq!(w.cell_count(), 0);
    }

    #[test]
    fn rule_set_updates() {
        let mut rs = RuleSet::new([Rule::fd(1, &["a"], "b").unwrap()]).unwrap();
        assert!(matches!(
            rs.apply_add(Rule::fd(1, &["a"], "c").unwrap()),
            Err(RuleUpdateError::DuplicateRule(_))
        ));
        assert!(matches!(
            rs.apply_delete(RuleId(2)),
            Err(RuleUpdateError::UnknownRule(_))
        ));
        rs.apply_delete(RuleId(1)).unwrap();
        assert!(rs.is_empty());
    }

    #[test]
    fn schedule_format() {
        let text = "{\"at\":90,\"op\":\"add\",\"rule\":{\"id\":6,\"lhs\":[\"a\"],\"rhs\":\"e\"}}\n\
                    {\"at\":60,\"op\":\"delete\",\"rule_id\":5}\n";
        let s = parse_schedule(text).unwrap();
        assert_eq!(s[0], RuleUpdate::delete(60, 5));
        assert_eq!(s[1], RuleUpdate::add(90, Rule::fd(6, &["a"], "e").unwrap()));
        let line = serde_json::to_string(&s[0]).unwrap();
        assert_eq!(line, r#"{"at":60,"op":"delete","rule_id":5}"#);
    }

    #[test]
    fn components_ignore_foreign_members() {
        let comps = connected_components([1, 2, 3, 4], vec![vec![1, 9, 3], vec![4]]);
        assert_eq!(
            comps,
            vec![BTreeSet::from([1, 3]), BTreeSet::from([2]), BTreeSet::from([4])]
        );
        assert!(connected_components(Vec::<u8>::new(), Vec::<Vec<u8>>::new()).is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn union_find_matches_search(n in 1usize..12, edges in prop::collection::vec(prop::collection::vec(0usize..12, 0..4), 0..10)) {
                let comps = connected_components(0..n, edges.clone());
                // Reachability by repeated relaxation.
                let mut label: Vec<usize> = (0..n).collect();
                loop {
                    let mut changed = false;
                    for e in &edges {
                        let members: Vec<usize> = e.iter().copied().filter(|&x| x < n).collect();
                        if let Some(m) = members.iter().map(|&x| label[x]).min() {
                            for &x in &members {
                                if label[x] != m { label[x] = m; changed = true; }
                            }
                        }
                    }
                    if !changed { break; }
                }
                for c in &comps {
                    let l = label[*c.first().unwrap()];
                    prop_assert!(c.iter().all(|&x| label[x] == l));
                }
                let distinct: BTreeSet<_> = label.iter().collect();
                prop_assert_eq!(distinct.len(), comps.len());
            }
        }
    }
}
