//! Synthetic dirty streams with ground truth, dirty-ratio evaluation, an
//! offline equivalence-class cleaner, the micro-batch baseline and the
//! canned benchmark scenarios.
//!
//! The schema is a flattened retail sales fact joined with its item,
//! address, promotion, store and customer dimensions. Every dimension key
//! maps to exactly one attribute value, so the clean stream satisfies all
//! eight rules of [`sales_rules`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{connected_components, RuleUpdate};
use crate::error::{ConfigError, EngineError, EvalError, ModelError};
use crate::model::{eval_condition, AttributeId, Rule, RuleId, Tuple, TupleId, Value};
use crate::repair::{Candidate, Protocol};
use crate::runtime::{run, Counters, PipelineConfig, RunResult, Transport};
use crate::windowing::{WindowConfig, WindowStrategy};

pub const ITEM_SK: &str = "ss_item_sk";
pub const BRAND: &str = "i_brand";
pub const CATEGORY: &str = "i_category";
pub const STATE: &str = "ca_state";
pub const CITY: &str = "ca_city";
pub const ZIP: &str = "ca_zip";
pub const PROMO_SK: &str = "ss_promo_sk";
pub const PROMO_NAME: &str = "p_promo_name";
pub const STORE_SK: &str = "ss_store_sk";
pub const STORE_NAME: &str = "s_store_name";
pub const TICKET: &str = "ss_ticket_num";
pub const CUSTOMER_SK: &str = "ss_customer_sk";
pub const EMAIL: &str = "c_email_addr";

/// The eight sales rules, ids 0..=7. Each applies only when its left-hand
/// side is not null. Rules 4/5 share a right-hand side, as do 6/7.
pub fn sales_rules() -> Vec<Rule> {
    let shapes: [(&[&str], &str); 8] = [
        (&[ITEM_SK], BRAND),
        (&[ITEM_SK], CATEGORY),
        (&[STATE, CITY], ZIP),
        (&[PROMO_SK], PROMO_NAME),
        (&[STORE_SK], STORE_NAME),
        (&[TICKET], STORE_NAME),
        (&[TICKET], EMAIL),
        (&[CUSTOMER_SK], EMAIL),
    ];
    shapes.iter()
        .enumerate()
        .map(|(i, (lhs, rhs))| Rule::cfd_not_null(i as u32, lhs, rhs).expect("static rule"))
        .collect()
}

/// Rules by id from [`sales_rules`].
pub fn sales_subset(ids: &[u32]) -> Vec<Rule> {
    let all = sales_rules();
    ids.iter().map(|i| all[*i as usize].clone()).collect()
}

/// A stretch of the stream with a different RHS dirt probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirtSpike {
    /// First tuple id of the spike.
    pub from: u64,
    /// First tuple id after the spike.
    pub to: u64,
    pub p_rhs_dirty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_tuples: u64,
    pub seed: u64,
    pub p_rhs_dirty: f64,
    pub p_lhs_null: f64,
    pub items: u32,
    pub brands: u32,
    pub categories: u32,
    /// Distinct (state, city) pairs, each with its own zip.
    pub addresses: u32,
    pub states: u32,
    pub promos: u32,
    pub promo_names: u32,
    pub stores: u32,
    pub store_names: u32,
    pub customers: u32,
    /// Mean number of line items per ticket.
    pub ticket_lines: u32,
    pub spike: Option<DirtSpike>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_tuples: 200_000,
            seed: 7,
            p_rhs_dirty: 0.10,
            p_lhs_null: 0.10,
            items: 2_000,
            brands: 400,
            categories: 40,
            addresses: 200,
            states: 50,
            promos: 300,
            promo_names: 300,
            stores: 40,
            store_names: 40,
            customers: 10_000,
            ticket_lines: 10,
            spike: None,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let probs = [
            self.p_rhs_dirty,
            self.p_lhs_null,
            self.spike.map_or(0.0, |s| s.p_rhs_dirty),
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(ConfigError::Invalid("probabilities must lie in [0, 1]".into()));
        }
        let cards = [
            ("items", self.items),
            ("brands", self.brands),
            ("categories", self.categories),
            ("addresses", self.addresses),
            ("states", self.states),
            ("promos", self.promos),
            ("promo_names", self.promo_names),
            ("stores", self.stores),
            ("store_names", self.store_names),
            ("customers", self.customers),
            ("ticket_lines", self.ticket_lines),
        ];
        if let Some((name, _)) = cards.iter().find(|(_, c)| *c == 0) {
            return Err(ConfigError::Invalid(format!("cardinality `{name}` is 0")));
        }
        Ok(())
    }

    fn p_rhs_at(&self, id: u64) -> f64 {
        match self.spike {
            Some(s) if (s.from..s.to).contains(&id) => s.p_rhs_dirty,
            _ => self.p_rhs_dirty,
        }
    }
}

/// Clean values and injected-dirt flags of one tuple.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub id: TupleId,
    pub clean: BTreeMap<AttributeId, Value>,
    pub dirty: BTreeSet<AttributeId>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GroundTruth {
    pub records: Vec<TruthRecord>,
}

impl GroundTruth {
    pub fn clean_tuples(&self) -> Vec<Tuple> {
        self.records
            .iter()
            .map(|r| Tuple {
                id: r.id,
                values: r.clean.clone(),
            })
            .collect()
    }

    /// Fraction of tuples with injected dirt on `attr`.
    pub fn dirt_rate(&self, attr: &AttributeId) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        let n = self.records.iter().filter(|r| r.dirty.contains(attr)).count();
        n as f64 / self.records.len() as f64
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self, ModelError> {
        let mut records = Vec::new();
        for line in r.lines() {
            let line = line.map_err(|e| ModelError::Json(serde_json::Error::io(e)))?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { records })
    }
}

struct Dims {
    item_brand: Vec<u32>,
    item_category: Vec<u32>,
    address_state: Vec<u32>,
    promo_name: Vec<u32>,
    store_name: Vec<u32>,
    customer_address: Vec<u32>,
}

fn text(prefix: &str, i: u32) -> Value {
    Value::Text(format!("{prefix}{i}").into())
}

fn zip_of(address: u32) -> Value {
    Value::Text(format!("{:05}", 10_000 + address * 7).into())
}

fn email_of(customer: u32) -> Value {
    Value::Text(format!("customer{customer}@example.org").into())
}

/// Builds the dirty stream and its ground truth. Deterministic in the seed.
///
/// Tuples are line items of consecutive tickets; each ticket has one store
/// and one customer. Every RHS attribute is replaced w.p. `p_rhs_dirty` by
/// another value of its own dictionary. Every LHS attribute is nulled
/// w.p. `p_lhs_null`, except in a tuple where a rule reading it had its
/// RHS replaced, so that injected RHS dirt stays detectable.
pub fn generate(cfg: &GenConfig) -> Result<(Vec<Tuple>, GroundTruth), ConfigError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pick = |rng: &mut ChaCha8Rng, n: u32, count: u32| -> Vec<u32> {
        (0..count).map(|_| rng.gen_range(0..n)).collect()
    };
    let dims = Dims {
        item_brand: pick(&mut rng, cfg.brands, cfg.items),
        item_category: pick(&mut rng, cfg.categories, cfg.items),
        address_state: pick(&mut rng, cfg.states, cfg.addresses),
        promo_name: pick(&mut rng, cfg.promo_names, cfg.promos),
        store_name: pick(&mut rng, cfg.store_names, cfg.stores),
        customer_address: pick(&mut rng, cfg.addresses, cfg.customers),
    };
    let rules = sales_rules();
    let rhs_attrs: BTreeSet<AttributeId> = rules.iter().map(|r| r.rhs.clone()).collect();

    let mut tuples = Vec::with_capacity(cfg.n_tuples as usize);
    let mut truth = Vec::with_capacity(cfg.n_tuples as usize);
    let mut ticket = 0u32;
    let mut left_in_ticket = 0u32;
    let (mut store, mut customer) = (0u32, 0u32);
    for id in 1..=cfg.n_tuples {
        if left_in_ticket == 0 {
            ticket += 1;
            left_in_ticket = rng.gen_range(1..2 * cfg.ticket_lines);
            store = rng.gen_range(0..cfg.stores);
            customer = rng.gen_range(0..cfg.customers);
        }
        left_in_ticket -= 1;
        let item = rng.gen_range(0..cfg.items);
        let promo = rng.gen_range(0..cfg.promos);
        let address = dims.customer_address[customer as usize];
        let clean: BTreeMap<AttributeId, Value> = [
            (ITEM_SK, text("", item)),
            (BRAND, text("brand#", dims.item_brand[item as usize])),
            (CATEGORY, text("category#", dims.item_category[item as usize])),
            (STATE, text("state#", dims.address_state[address as usize])),
            (CITY, text("city#", address)),
            (ZIP, zip_of(address)),
            (PROMO_SK, text("", promo)),
            (PROMO_NAME, text("promo#", dims.promo_name[promo as usize])),
            (STORE_SK, text("", store)),
            (STORE_NAME, text("store#", dims.store_name[store as usize])),
            (TICKET, text("", ticket)),
            (CUSTOMER_SK, text("", customer)),
            (EMAIL, email_of(customer)),
        ]
        .into_iter()
        .map(|(a, v)| (AttributeId::new(a), v))
        .collect();

        let mut values = clean.clone();
        let mut dirty = BTreeSet::new();
        let p_rhs = cfg.p_rhs_at(id);
        for attr in &rhs_attrs {
            if rng.gen_bool(p_rhs) {
                let v = confusable(&mut rng, cfg, attr.as_str(), &clean[attr]);
                if v != clean[attr] {
                    values.insert(attr.clone(), v);
                    dirty.insert(attr.clone());
                }
            }
        }
        let mut lhs_attrs: Vec<&AttributeId> = rules.iter().flat_map(|r| r.lhs.iter()).collect();
        lhs_attrs.sort();
        lhs_attrs.dedup();
        for attr in lhs_attrs {
            let protected = rules
                .iter()
                .any(|r| r.lhs.contains(attr) && dirty.contains(&r.rhs));
            if rng.gen_bool(cfg.p_lhs_null) && !protected {
                values.insert(attr.clone(), Value::Null);
                dirty.insert(attr.clone());
            }
        }
        tuples.push(Tuple {
            id: TupleId(id),
            values,
        });
        truth.push(TruthRecord {
            id: TupleId(id),
            clean,
            dirty,
        });
    }
    Ok((tuples, GroundTruth { records: truth }))
}

/// Another value from the dictionary of `attr`, different from `clean`
/// whenever the dictionary has more than one entry.
fn confusable(rng: &mut ChaCha8Rng, cfg: &GenConfig, attr: &str, clean: &Value) -> Value {
    let (n, make): (u32, &dyn Fn(u32) -> Value) = match attr {
        BRAND => (cfg.brands, &|i| text("brand#", i)),
        CATEGORY => (cfg.categories, &|i| text("category#", i)),
        ZIP => (cfg.addresses, &zip_of),
        PROMO_NAME => (cfg.promo_names, &|i| text("promo#", i)),
        STORE_NAME => (cfg.store_names, &|i| text("store#", i)),
        EMAIL => (cfg.customers, &email_of),
        _ => unreachable!("not a right-hand side: {attr}"),
    };
    if n < 2 {
        return clean.clone();
    }
    loop {
        let v = make(rng.gen_range(0..n));
        if &v != clean {
            return v;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleDirtiness {
    pub rule: RuleId,
    pub attr: AttributeId,
    pub tuples: u64,
    pub dirty: u64,
    pub ratio: f64,
    /// Restricted to tuples whose LHS is non-null and whose condition holds.
    pub checkable: u64,
    pub checkable_dirty: u64,
    pub checkable_ratio: f64,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Per rule, the fraction of output tuples whose RHS value differs from
/// the ground truth. Only tuples with ids in `range` are counted.
pub fn dirty_ratio_in(
    output: &[Tuple],
    gt: &GroundTruth,
    rules: &[Rule],
    range: std::ops::Range<u64>,
) -> Result<Vec<RuleDirtiness>, EvalError> {
    let truth: HashMap<TupleId, &TruthRecord> = gt.records.iter().map(|r| (r.id, r)).collect();
    let mut seen = BTreeSet::new();
    for t in output {
        if !truth.contains_key(&t.id) {
            return Err(EvalError::MissingTruth(t.id));
        }
        if !seen.insert(t.id) {
            return Err(EvalError::Duplicate(t.id));
        }
    }
    if let Some(r) = gt.records.iter().find(|r| !seen.contains(&r.id)) {
        return Err(EvalError::MissingOutput(r.id));
    }
    let mut out = Vec::new();
    for rule in rules {
        let mut d = RuleDirtiness {
            rule: rule.id,
            attr: rule.rhs.clone(),
            tuples: 0,
            dirty: 0,
            ratio: 0.0,
            checkable: 0,
            checkable_dirty: 0,
            checkable_ratio: 0.0,
        };
        for t in output.iter().filter(|t| range.contains(&t.id.0)) {
            let wrong = t.get(&rule.rhs)? != &truth[&t.id].clean[&rule.rhs];
            d.tuples += 1;
            d.dirty += wrong as u64;
            let checkable = rule.lhs.iter().all(|a| t.get(a).is_ok_and(|v| !v.is_null()))
                && eval_condition(&rule.condition, t)?;
            if checkable {
                d.checkable += 1;
                d.checkable_dirty += wrong as u64;
            }
        }
        d.ratio = ratio(d.dirty, d.tuples);
        d.checkable_ratio = ratio(d.checkable_dirty, d.checkable);
        out.push(d);
    }
    Ok(out)
}

pub fn dirty_ratio(
    output: &[Tuple],
    gt: &GroundTruth,
    rules: &[Rule],
) -> Result<Vec<RuleDirtiness>, EvalError> {
    dirty_ratio_in(output, gt, rules, 0..u64::MAX)
}

pub fn write_dirtiness_csv(w: impl Write, rows: &[RuleDirtiness]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record([
        "rule",
        "attr",
        "tuples",
        "dirty",
        "dirty_ratio",
        "checkable",
        "checkable_dirty",
        "checkable_ratio",
    ])?;
    for d in rows {
        w.write_record([
            d.rule.to_string(),
            d.attr.to_string(),
            d.tuples.to_string(),
            d.dirty.to_string(),
            format!("{:.6}", d.ratio),
            d.checkable.to_string(),
            d.checkable_dirty.to_string(),
            format!("{:.6}", d.checkable_ratio),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Offline cleaning of a finite list. For each repaired attribute, cells
/// that share a cell group of any rule are put in one equivalence class
/// (connected components through shared cells), and every cell of a class
/// takes the class's best value, ranked like the streaming repair:
/// frequency, then earliest tuple id, then the value itself.
pub fn batch_oracle(tuples: &[Tuple], rules: &[Rule]) -> Vec<Tuple> {
    let mut out = tuples.to_vec();
    let attrs: BTreeSet<&AttributeId> = rules.iter().map(|r| &r.rhs).collect();
    for attr in attrs {
        let mut edges: Vec<[usize; 2]> = Vec::new();
        let mut members: BTreeSet<usize> = BTreeSet::new();
        for rule in rules.iter().filter(|r| &r.rhs == attr) {
            let mut groups: HashMap<Vec<&Value>, usize> = HashMap::new();
            for (i, t) in tuples.iter().enumerate() {
                let Ok(lhs) = rule.lhs.iter().map(|a| t.get(a)).collect::<Result<Vec<_>, _>>()
                else {
                    continue;
                };
                if lhs.iter().any(|v| v.is_null())
                    || t.get(attr).is_err()
                    || !eval_condition(&rule.condition, t).unwrap_or(false)
                {
                    continue;
                }
                members.insert(i);
                match groups.get(&lhs) {
                    Some(&first) => edges.push([first, i]),
                    None => {
                        groups.insert(lhs, i);
                    }
                }
            }
        }
        for class in connected_components(members, edges) {
            if class.len() < 2 {
                continue;
            }
            let mut acc: HashMap<&Value, (u64, TupleId)> = HashMap::new();
            for &i in &class {
                let v = tuples[i].get(attr).expect("member has attr");
                let e = acc.entry(v).or_insert((0, tuples[i].id));
                e.0 += 1;
                e.1 = e.1.min(tuples[i].id);
            }
            let best = acc
                .into_iter()
                .map(|(v, (frequency, first_seen))| Candidate {
                    value: v.clone(),
                    frequency,
                    first_seen,
                })
                .min_by(|a, b| a.rank().cmp(&b.rank()))
                .expect("non-empty class");
            for &i in &class {
                out[i].values.insert(attr.clone(), best.value.clone());
            }
        }
    }
    out
}

/// Simulated-time cost model shared by the micro-batch baseline and the
/// streaming pipeline estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimCosts {
    /// Tuples per second entering the system.
    pub arrival_rate: f64,
    /// One message hop between two workers.
    pub hop_ms: f64,
    /// Processing cost per tuple, batch or stream.
    pub per_tuple_ms: f64,
    /// Fixed cost of launching one batch job.
    pub batch_overhead_ms: f64,
}

impl Default for SimCosts {
    fn default() -> Self {
        Self {
            arrival_rate: 15_000.0,
            hop_ms: 2.0,
            per_tuple_ms: 0.05,
            batch_overhead_ms: 100.0,
        }
    }
}

impl SimCosts {
    /// Mean latency of a tuple through ingress, detect, egress, repair and
    /// aggregation: four hops, the tuple's processing cost, and a round
    /// trip to the coordinator for each coordination round.
    pub fn stream_latency_ms(&self, c: &Counters) -> f64 {
        let rounds_per_tuple = ratio(c.coordination_rounds, c.tuples_out);
        4.0 * self.hop_ms + self.per_tuple_ms + 2.0 * self.hop_ms * rounds_per_tuple
    }

    fn batch_exec_ms(&self, size: usize) -> f64 {
        self.batch_overhead_ms + self.per_tuple_ms * size as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroBatchResult {
    pub window: usize,
    pub output: Vec<Tuple>,
    pub avg_latency_ms: f64,
}

/// Buffers `window` tuples at a time and cleans each full buffer (and the
/// final partial one) with [`batch_oracle`]. Tuple `i` arrives at
/// `i / arrival_rate`; it leaves when its buffer closes plus the batch's
/// execution time.
pub fn micro_batch_clean(
    input: &[Tuple],
    window: usize,
    rules: &[Rule],
    costs: &SimCosts,
) -> MicroBatchResult {
    assert!(window >= 1);
    let ms_per_tuple = 1e3 / costs.arrival_rate;
    let mut output = Vec::with_capacity(input.len());
    let mut total = 0.0;
    for (b, chunk) in input.chunks(window).enumerate() {
        let first = b * window;
        let close = (first + chunk.len() - 1) as f64 * ms_per_tuple;
        let exec = costs.batch_exec_ms(chunk.len());
        for j in 0..chunk.len() {
            total += close - (first + j) as f64 * ms_per_tuple + exec;
        }
        output.extend(batch_oracle(chunk, rules));
    }
    MicroBatchResult {
        window,
        output,
        avg_latency_ms: if input.is_empty() {
            0.0
        } else {
            total / input.len() as f64
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    CoordinationComparison,
    WindowingComparison,
    DynamicRules,
    MicroBatchBaseline,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Self::CoordinationComparison,
        Self::WindowingComparison,
        Self::DynamicRules,
        Self::MicroBatchBaseline,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::CoordinationComparison => "coordination-comparison",
            Self::WindowingComparison => "windowing-comparison",
            Self::DynamicRules => "dynamic-rules",
            Self::MicroBatchBaseline => "micro-batch-baseline",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown scenario `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub scenario: Scenario,
    pub gen: GenConfig,
    pub window_size: u64,
    pub slide: u64,
    pub n_workers: usize,
    /// Used where the scenario does not sweep protocols.
    pub protocol: Protocol,
    /// Used where the scenario does not sweep strategies.
    pub strategy: WindowStrategy,
    pub transport: Transport,
    pub costs: SimCosts,
    /// Micro-batch window sizes, in tuples. Below a few hundred tuples a
    /// batch rarely holds two tuples with the same key.
    pub batch_windows: Vec<usize>,
}

impl BenchConfig {
    /// Desk-scale defaults: 200k tuples, a 20k window sliding by 10k.
    pub fn new(scenario: Scenario) -> Self {
        let mut gen = GenConfig::default();
        if scenario == Scenario::WindowingComparison {
            let n = gen.n_tuples;
            gen.spike = Some(DirtSpike {
                from: n * 2 / 5,
                to: n / 2,
                p_rhs_dirty: 0.5,
            });
        }
        Self {
            scenario,
            gen,
            window_size: 20_000,
            slide: 10_000,
            n_workers: 4,
            protocol: Protocol::Dr,
            strategy: WindowStrategy::Cumulative,
            transport: Transport::InProcess,
            costs: SimCosts::default(),
            batch_windows: (8..=16).map(|i| 1usize << i).collect(),
        }
    }

    /// Rules active at the start of the run.
    pub fn initial_rules(&self) -> Vec<Rule> {
        match self.scenario {
            Scenario::MicroBatchBaseline => sales_subset(&[0]),
            _ => sales_subset(&[0, 1, 2, 3, 4, 5]),
        }
    }

    /// Delete the ticket→store rule at 60% of the stream, add the two
    /// email rules at 90%.
    pub fn schedule(&self) -> Vec<RuleUpdate> {
        if self.scenario != Scenario::DynamicRules {
            return Vec::new();
        }
        let n = self.gen.n_tuples;
        let [r6, r7] = [6, 7].map(|i| sales_rules()[i].clone());
        vec![
            RuleUpdate::delete(n * 3 / 5 + 1, 5),
            RuleUpdate::add(n * 9 / 10 + 1, r6),
            RuleUpdate::add(n * 9 / 10 + 1, r7),
        ]
    }

    pub fn pipeline(&self, protocol: Protocol, strategy: WindowStrategy) -> Result<PipelineConfig, ConfigError> {
        let mut p = PipelineConfig::new(self.initial_rules());
        p.n_repair_workers = self.n_workers;
        p.protocol = protocol;
        p.window = Some(WindowConfig::new(self.window_size, self.slide, strategy)?);
        p.transport = self.transport;
        p.schedule = self.schedule();
        p.throughput_interval = (self.gen.n_tuples / 20).max(1);
        Ok(p)
    }
}

#[derive(Clone, Debug)]
pub struct BenchRun {
    pub label: String,
    pub pipeline: PipelineConfig,
    pub result: RunResult,
    pub dirtiness: Vec<RuleDirtiness>,
    pub sim_latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroBatchPoint {
    pub window: usize,
    pub dirty_ratio: f64,
    pub avg_latency_ms: f64,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub input_dirtiness: Vec<RuleDirtiness>,
    pub runs: Vec<BenchRun>,
    pub micro_batch: Vec<MicroBatchPoint>,
}

impl BenchReport {
    pub fn run(&self, label: &str) -> Option<&BenchRun> {
        self.runs.iter().find(|r| r.label == label)
    }

    /// Smallest micro-batch window whose dirty ratio is at most the
    /// streaming run's, if any.
    pub fn matching_batch(&self) -> Option<&MicroBatchPoint> {
        let stream = self.runs.first()?.dirtiness.first()?.ratio;
        self.micro_batch.iter().find(|p| p.dirty_ratio <= stream)
    }
}

fn eval_err(e: EvalError) -> EngineError {
    EngineError::Io(std::io::Error::other(e))
}

/// Runs one scenario end to end in memory.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport, EngineError> {
    let (input, truth) = generate(&cfg.gen)?;
    let all_rules = sales_rules();
    let eval_rules: Vec<Rule> = match cfg.scenario {
        Scenario::DynamicRules => all_rules.clone(),
        _ => cfg.initial_rules(),
    };
    let input_dirtiness = dirty_ratio(&input, &truth, &eval_rules).map_err(eval_err)?;
    let variants: Vec<(String, Protocol, WindowStrategy)> = match cfg.scenario {
        Scenario::CoordinationComparison => [Protocol::Basic, Protocol::Dr, Protocol::Ir]
            .into_iter()
            .map(|p| (p.to_string(), p, cfg.strategy))
            .collect(),
        Scenario::WindowingComparison => [WindowStrategy::Basic, WindowStrategy::Cumulative]
            .into_iter()
            .map(|s| (format!("{s:?}").to_lowercase(), cfg.protocol, s))
            .collect(),
        Scenario::DynamicRules | Scenario::MicroBatchBaseline => {
            vec![("bleach".to_string(), cfg.protocol, cfg.strategy)]
        }
    };
    let mut runs = Vec::new();
    for (label, protocol, strategy) in variants {
        let pipeline = cfg.pipeline(protocol, strategy)?;
        log::info!("{}: running {label}", cfg.scenario.name());
        let result = run(&pipeline, input.iter().cloned())?;
        let out = result.tuples();
        let dirtiness = if cfg.scenario == Scenario::DynamicRules {
            dynamic_dirtiness(cfg, &out, &truth, &all_rules)?
        } else {
            dirty_ratio(&out, &truth, &eval_rules).map_err(eval_err)?
        };
        let sim_latency_ms = cfg.costs.stream_latency_ms(&result.metrics.counters);
        runs.push(BenchRun {
            label,
            pipeline,
            result,
            dirtiness,
            sim_latency_ms,
        });
    }
    let mut micro_batch = Vec::new();
    if cfg.scenario == Scenario::MicroBatchBaseline {
        for &w in &cfg.batch_windows {
            let mb = micro_batch_clean(&input, w, &eval_rules, &cfg.costs);
            let d = dirty_ratio(&mb.output, &truth, &eval_rules).map_err(eval_err)?;
            micro_batch.push(MicroBatchPoint {
                window: w,
                dirty_ratio: d[0].ratio,
                avg_latency_ms: mb.avg_latency_ms,
            });
        }
    }
    Ok(BenchReport {
        config: cfg.clone(),
        input_dirtiness,
        runs,
        micro_batch,
    })
}

/// Each rule is scored only over the stretch of stream where it is active.
fn dynamic_dirtiness(
    cfg: &BenchConfig,
    out: &[Tuple],
    truth: &GroundTruth,
    rules: &[Rule],
) -> Result<Vec<RuleDirtiness>, EngineError> {
    let mut active: BTreeMap<RuleId, (u64, u64)> = cfg
        .initial_rules()
        .iter()
        .map(|r| (r.id, (1, u64::MAX)))
        .collect();
    for u in cfg.schedule() {
        match u.op {
            crate::dynamics::RuleOp::Add { rule } => {
                active.insert(rule.id, (u.effective_seq.0, u64::MAX));
            }
            crate::dynamics::RuleOp::Delete { rule_id } => {
                if let Some(span) = active.get_mut(&rule_id) {
                    span.1 = u.effective_seq.0;
                }
            }
        }
    }
    let mut rows = Vec::new();
    for rule in rules {
        let Some(&(from, to)) = active.get(&rule.id) else {
            continue;
        };
        rows.extend(
            dirty_ratio_in(out, truth, std::slice::from_ref(rule), from..to).map_err(eval_err)?,
        );
    }
    Ok(rows)
}

/// Writes `config.json`, per-run metrics CSVs, `dirty_ratio.csv`,
/// `runs.csv` and, for the micro-batch scenario, `micro_batch.csv`.
pub fn write_report(report: &BenchReport, dir: &Path) -> Result<(), EngineError> {
    std::fs::create_dir_all(dir)?;
    let cfg_json = serde_json::to_string_pretty(&report.config).map_err(std::io::Error::other)?;
    std::fs::write(dir.join("config.json"), cfg_json)?;
    let csv_err = |e: csv::Error| EngineError::Io(std::io::Error::other(e));

    let mut w = csv::Writer::from_path(dir.join("dirty_ratio.csv")).map_err(csv_err)?;
    w.write_record(["run", "rule", "attr", "dirty_ratio", "checkable_ratio"])
        .map_err(csv_err)?;
    let input_rows = report.input_dirtiness.iter().map(|d| ("input", d));
    let run_rows = report
        .runs
        .iter()
        .flat_map(|r| r.dirtiness.iter().map(move |d| (r.label.as_str(), d)));
    for (label, d) in input_rows.chain(run_rows) {
        w.write_record([
            label.to_string(),
            d.rule.to_string(),
            d.attr.to_string(),
            format!("{:.6}", d.ratio),
            format!("{:.6}", d.checkable_ratio),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("runs.csv")).map_err(csv_err)?;
    w.write_record([
        "run",
        "tuples_out",
        "violation_messages",
        "coordination_rounds",
        "merge_proposals",
        "merge_decisions",
        "subgraph_merges",
        "subgraph_splits",
        "repairs",
        "graph_cells",
        "mean_latency_ms",
        "sim_latency_ms",
    ])
    .map_err(csv_err)?;
    for r in &report.runs {
        let c = &r.result.metrics.counters;
        w.write_record([
            r.label.clone(),
            c.tuples_out.to_string(),
            c.violation_messages.to_string(),
            c.coordination_rounds.to_string(),
            c.merge_proposals.to_string(),
            c.merge_decisions.to_string(),
            c.subgraph_merges.to_string(),
            c.subgraph_splits.to_string(),
            c.repairs.to_string(),
            c.graph_cells.to_string(),
            format!("{:.4}", r.result.metrics.mean_latency_ms().unwrap_or(0.0)),
            format!("{:.4}", r.sim_latency_ms),
        ])
        .map_err(csv_err)?;
        r.result.metrics.write_csv(&dir.join(&r.label))?;
    }
    w.flush()?;

    if !report.micro_batch.is_empty() {
        let mut w = csv::Writer::from_path(dir.join("micro_batch.csv")).map_err(csv_err)?;
        for p in &report.micro_batch {
            w.serialize(p).map_err(csv_err)?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Plain-text summary table of a report.
pub fn summary(report: &BenchReport) -> String {
    let mut s = format!("scenario {}\n", report.config.scenario.name());
    s.push_str(&format!("{:<12}", "rule"));
    s.push_str(&format!("{:>12}", "input"));
    for r in &report.runs {
        s.push_str(&format!("{:>12}", r.label));
    }
    s.push('\n');
    for d in &report.input_dirtiness {
        s.push_str(&format!("{:<12}{:>11.3}%", format!("r{}", d.rule), d.ratio * 100.0));
        for r in &report.runs {
            match r.dirtiness.iter().find(|x| x.rule == d.rule) {
                Some(x) => s.push_str(&format!("{:>11.3}%", x.ratio * 100.0)),
                None => s.push_str(&format!("{:>12}", "-")),
            }
        }
        s.push('\n');
    }
    for r in &report.runs {
        let c = &r.result.metrics.counters;
        s.push_str(&format!(
            "{}: {} tuples, {} violation msgs, {} coordination rounds, {} merges, {} splits, sim latency {:.2} ms\n",
            r.label,
            c.tuples_out,
            c.violation_messages,
            c.coordination_rounds,
            c.subgraph_merges,
            c.subgraph_splits,
            r.sim_latency_ms
        ));
    }
    for p in &report.micro_batch {
        s.push_str(&format!(
            "micro-batch window {:>7}: dirty {:.3}%, latency {:.1} ms\n",
            p.window,
            p.dirty_ratio * 100.0,
            p.avg_latency_ms
        ));
    }
    s
}

/// Shuffled copy of `v`, for tests that need an arbitrary interleaving.
pub fn shuffled<T: Clone>(v: &[T], seed: u64) -> Vec<T> {
    let mut out = v.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: u64) -> GenConfig {
        GenConfig {
            n_tuples: n,
            ..GenConfig::default()
        }
    }

    fn violations(tuples: &[Tuple], rules: &[Rule]) -> usize {
        let mut n = 0;
        for r in rules {
            let mut seen: HashMap<Vec<Value>, BTreeSet<Value>> = HashMap::new();
            for t in tuples {
                let lhs: Vec<Value> = r.lhs.iter().map(|a| t.get(a).unwrap().clone()).collect();
                if lhs.iter().any(Value::is_null) {
                    continue;
                }
                seen.entry(lhs).or_default().insert(t.get(&r.rhs).unwrap().clone());
            }
            n += seen.values().filter(|v| v.len() > 1).count();
        }
        n
    }

    #[test]
    fn clean_stream_has_no_violations() {
        let cfg = GenConfig {
            p_rhs_dirty: 0.0,
            p_lhs_null: 0.0,
            ..small(5_000)
        };
        let (tuples, truth) = generate(&cfg).unwrap();
        assert_eq!(violations(&tuples, &sales_rules()), 0);
        assert_eq!(tuples, truth.clean_tuples());
    }

    #[test]
    fn ground_truth_is_always_clean() {
        let (_, truth) = generate(&small(5_000)).unwrap();
        assert_eq!(violations(&truth.clean_tuples(), &sales_rules()), 0);
    }

    #[test]
    fn full_dirt_makes_every_repeated_key_violate() {
        let cfg = GenConfig {
            p_rhs_dirty: 1.0,
            p_lhs_null: 0.0,
            items: 5,
            ..small(200)
        };
        let (tuples, _) = generate(&cfg).unwrap();
        let rule = &sales_rules()[0];
        let mut by_item: HashMap<Value, BTreeSet<Value>> = HashMap::new();
        for t in &tuples {
            by_item
                .entry(t.get(&rule.lhs[0]).unwrap().clone())
                .or_default()
                .insert(t.get(&rule.rhs).unwrap().clone());
        }
        assert!(by_item.values().all(|v| v.len() > 1));
    }

    #[test]
    fn injected_rate_is_about_ten_percent() {
        let (tuples, truth) = generate(&small(100_000)).unwrap();
        let rules = sales_rules();
        for r in &rules {
            let rate = truth.dirt_rate(&r.rhs);
            assert!((rate - 0.10).abs() <= 0.01, "{}: {rate}", r.rhs);
        }
        for d in dirty_ratio(&tuples, &truth, &rules).unwrap() {
            assert!((d.ratio - 0.10).abs() <= 0.01);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small(2_000)).unwrap();
        let b = generate(&small(2_000)).unwrap();
        assert_eq!(a, b);
        let c = generate(&GenConfig { seed: 8, ..small(2_000) }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn zero_cardinality_is_rejected() {
        assert!(generate(&GenConfig { items: 0, ..small(10) }).is_err());
        assert!(generate(&GenConfig { p_lhs_null: 1.5, ..small(10) }).is_err());
    }

    #[test]
    fn spike_raises_dirt_inside_its_range() {
        let cfg = GenConfig {
            spike: Some(DirtSpike {
                from: 5_001,
                to: 10_001,
                p_rhs_dirty: 0.5,
            }),
            ..small(15_000)
        };
        let (tuples, truth) = generate(&cfg).unwrap();
        let r = &sales_rules()[0..1];
        let inside = dirty_ratio_in(&tuples, &truth, r, 5_001..10_001).unwrap()[0].ratio;
        let outside = dirty_ratio_in(&tuples, &truth, r, 1..5_001).unwrap()[0].ratio;
        assert!((inside - 0.5).abs() < 0.03 && (outside - 0.1).abs() < 0.02);
    }

    #[test]
    fn dirty_ratio_of_truth_is_zero_and_ids_must_match() {
        let (tuples, truth) = generate(&small(1_000)).unwrap();
        let rules = sales_rules();
        let clean = truth.clean_tuples();
        assert!(dirty_ratio(&clean, &truth, &rules).unwrap().iter().all(|d| d.ratio == 0.0));
        assert!(matches!(
            dirty_ratio(&tuples[1..], &truth, &rules),
            Err(EvalError::MissingOutput(TupleId(1)))
        ));
        let mut dup = tuples.clone();
        dup.push(tuples[0].clone());
        assert!(matches!(dirty_ratio(&dup, &truth, &rules), Err(EvalError::Duplicate(_))));
    }

    fn shop_stream() -> (Vec<Tuple>, Vec<Rule>) {
        let rows = [
            ("book", "education", "c01", "Missoula", "59801"),
            ("bike", "sports", "c02", "Libby", "59923"),
            ("laptop", "electronics", "c03", "Helena", "59801"),
            ("bike", "toys", "c04", "Butte", "59701"),
            ("shoes", "fashion", "c01", "Misoula", "59715"),
        ];
        let tuples = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                Tuple::new(
                    i as u64 + 1,
                    [
                        ("item", r.0.into()),
                        ("category", r.1.into()),
                        ("clientid", r.2.into()),
                        ("city", r.3.into()),
                        ("zipcode", r.4.into()),
                    ],
                )
            })
            .collect();
        let rules = vec![
            Rule::fd(1, &["item"], "category").unwrap(),
            Rule::fd(2, &["clientid"], "city").unwrap(),
            Rule::cfd_not_null(3, &["zipcode"], "city").unwrap(),
        ];
        (tuples, rules)
    }

    #[test]
    fn oracle_on_running_example() {
        let (tuples, rules) = shop_stream();
        let out = batch_oracle(&tuples, &rules);
        let city = AttributeId::new("city");
        let cat = AttributeId::new("category");
        // {t1,t3,t5} hold Missoula, Helena, Misoula once each; t1 is first.
        for i in [0, 2, 4] {
            assert_eq!(out[i].values[&city], Value::text("Missoula"));
        }
        // {t2,t4}: sports vs toys, t2 is first.
        assert_eq!(out[1].values[&cat], Value::text("sports"));
        assert_eq!(out[3].values[&cat], Value::text("sports"));
        assert_eq!(out[1].values[&city], Value::text("Libby"));
    }

    #[test]
    fn oracle_without_violations_is_identity() {
        let (tuples, rules) = shop_stream();
        let clean: Vec<Tuple> = tuples.into_iter().take(3).collect();
        assert_eq!(batch_oracle(&clean, &rules[..1]), clean);
    }

    #[test]
    fn oracle_is_idempotent_on_generated_data() {
        let (tuples, _) = generate(&small(3_000)).unwrap();
        let rules = sales_rules();
        let once = batch_oracle(&tuples, &rules);
        assert_eq!(batch_oracle(&once, &rules), once);
        assert_eq!(violations(&once, &rules), 0);
    }

    #[test]
    fn micro_batch_queueing_latency_is_half_the_window() {
        let (tuples, _) = generate(&small(4_000)).unwrap();
        let costs = SimCosts {
            per_tuple_ms: 0.0,
            batch_overhead_ms: 0.0,
            ..SimCosts::default()
        };
        let w = 1_000;
        let mb = micro_batch_clean(&tuples, w, &sales_subset(&[0]), &costs);
        let expect = (w - 1) as f64 / 2.0 * 1e3 / costs.arrival_rate;
        assert!((mb.avg_latency_ms - expect).abs() < 1e-9);
    }

    #[test]
    fn micro_batch_of_one_changes_nothing() {
        let (tuples, _) = generate(&small(1_000)).unwrap();
        let mb = micro_batch_clean(&tuples, 1, &sales_rules(), &SimCosts::default());
        assert_eq!(mb.output, tuples);
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
        assert!("nope".parse::<Scenario>().is_err());
    }

    #[test]
    fn dynamic_schedule_positions() {
        let cfg = BenchConfig::new(Scenario::DynamicRules);
        let s = cfg.schedule();
        assert_eq!(s.len(), 3);
        assert_eq!(s[0].effective_seq, TupleId(120_001));
        assert_eq!(s[1].effective_seq, TupleId(180_001));
    }
}
