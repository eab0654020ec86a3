//! Pipeline wiring: ingress, detect workers, egress, repair workers with
//! the coordinator, and the aggregator. Two transports are available: a
//! deterministic single-threaded one and one with a thread per worker.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, Sender};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::{route_ingress, DataHistory, Egress, Released, ViolationMessage};
use crate::dynamics::{RuleOp, RuleSet, RuleUpdate};
use crate::error::{ConfigError, EngineError};
use crate::model::{Rule, RuleId, SubTuple, Tuple, TupleId};
use crate::repair::{
    LocalPool, Protocol, RepairCounters, RepairDecision, RepairStage, RepairWorker, WorkerCmd,
    WorkerPool, WorkerReply,
};
use crate::windowing::{Slide, WindowClock, WindowConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transport {
    /// Everything runs on the caller's thread in a fixed order.
    #[default]
    InProcess,
    /// One thread per detect worker and per repair worker.
    Threads,
}

impl std::str::FromStr for Transport {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "in-process" => Ok(Self::InProcess),
            "threads" => Ok(Self::Threads),
            other => Err(ConfigError::Invalid(format!("unknown transport `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub rules: Vec<Rule>,
    pub n_repair_workers: usize,
    pub protocol: Protocol,
    /// `None` keeps the whole stream.
    pub window: Option<WindowConfig>,
    pub latency_sample_rate: f64,
    pub transport: Transport,
    /// In-process only: delivers each tuple's detect messages to egress in
    /// a seeded random order instead of rule order.
    pub shuffle_seed: Option<u64>,
    pub schedule: Vec<RuleUpdate>,
    /// Output tuples per throughput measurement.
    pub throughput_interval: u64,
    /// Capacity of each ingress channel in threaded mode.
    pub channel_capacity: usize,
}

impl PipelineConfig {
    pub fn new(rules: Vec<Rule>) -> Self {
        Self {
            rules,
            n_repair_workers: 2,
            protocol: Protocol::Dr,
            window: None,
            latency_sample_rate: 0.01,
            transport: Transport::InProcess,
            shuffle_seed: None,
            schedule: Vec::new(),
            throughput_interval: 10_000,
            channel_capacity: 1024,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_repair_workers == 0 {
            return Err(ConfigError::NoWorkers);
        }
        if !(self.latency_sample_rate > 0.0 && self.latency_sample_rate <= 1.0) {
            return Err(ConfigError::SampleRate(self.latency_sample_rate));
        }
        if let Some(w) = self.window {
            WindowConfig::new(w.size, w.slide, w.strategy)?;
        }
        if self.throughput_interval == 0 || self.channel_capacity == 0 {
            return Err(ConfigError::Invalid(
                "throughput interval and channel capacity must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Output {
    pub tuple: Tuple,
    pub decisions: Vec<RepairDecision>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeadLetter {
    /// 1-based input line, when read from a text stream.
    pub line: Option<u64>,
    pub tuple_id: Option<TupleId>,
    pub reason: String,
    pub raw: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputPoint {
    pub tuples: u64,
    pub elapsed_ms: f64,
    pub tuples_per_sec: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub tuple_id: TupleId,
    pub latency_ms: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub tuples_in: u64,
    pub tuples_out: u64,
    pub dead_letters: u64,
    pub violation_messages: u64,
    pub coordination_rounds: u64,
    pub merge_proposals: u64,
    pub merge_decisions: u64,
    pub subgraph_merges: u64,
    pub subgraph_splits: u64,
    pub repairs: u64,
    pub rule_updates: u64,
    pub slides: u64,
    /// Cells held across repair workers at the end of the run.
    pub graph_cells: u64,
    pub subgraphs: u64,
}

impl Counters {
    fn absorb_repair(&mut self, r: RepairCounters) {
        self.violation_messages = r.violation_messages;
        self.coordination_rounds = r.coordination_rounds;
        self.merge_proposals = r.merge_proposals;
        self.merge_decisions = r.merge_decisions;
        self.subgraph_merges = r.subgraph_merges;
        self.subgraph_splits = r.subgraph_splits;
        self.repairs = r.repairs;
    }

    fn rows(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("tuples_in", self.tuples_in),
            ("tuples_out", self.tuples_out),
            ("dead_letters", self.dead_letters),
            ("violation_messages", self.violation_messages),
            ("coordination_rounds", self.coordination_rounds),
            ("merge_proposals", self.merge_proposals),
            ("merge_decisions", self.merge_decisions),
            ("subgraph_merges", self.subgraph_merges),
            ("subgraph_splits", self.subgraph_splits),
            ("repairs", self.repairs),
            ("rule_updates", self.rule_updates),
            ("slides", self.slides),
            ("graph_cells", self.graph_cells),
            ("subgraphs", self.subgraphs),
        ]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub throughput: Vec<ThroughputPoint>,
    pub latency: Vec<LatencySample>,
    pub counters: Counters,
}

impl Metrics {
    pub fn mean_latency_ms(&self) -> Option<f64> {
        if self.latency.is_empty() {
            return None;
        }
        Some(self.latency.iter().map(|l| l.latency_ms).sum::<f64>() / self.latency.len() as f64)
    }

    /// Writes `throughput.csv`, `latency.csv` and `counters.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<(), EngineError> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("throughput.csv")).map_err(csv_err)?;
        for p in &self.throughput {
            w.serialize(p).map_err(csv_err)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("latency.csv")).map_err(csv_err)?;
        w.write_record(["tuple_id", "latency_ms"]).map_err(csv_err)?;
        for l in &self.latency {
            w.write_record([l.tuple_id.to_string(), format!("{:.4}", l.latency_ms)])
                .map_err(csv_err)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("counters.csv")).map_err(csv_err)?;
        w.write_record(["counter", "value"]).map_err(csv_err)?;
        for (k, v) in self.counters.rows() {
            w.write_record([k.to_string(), v.to_string()]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> EngineError {
    EngineError::Io(std::io::Error::other(e))
}

/// Stream-positioned events travelling with the tuples.
#[derive(Clone, Debug, PartialEq)]
enum Barrier {
    Slide(Slide),
    DropRule(RuleId),
}

enum DetectCmd {
    Sub(SubTuple),
    Slide(Slide),
    Dump(Sender<serde_json::Value>),
}

struct DetectThread {
    tx: Sender<DetectCmd>,
    handle: JoinHandle<()>,
}

enum DetectStage {
    Local {
        workers: BTreeMap<RuleId, DataHistory>,
        window: Option<WindowConfig>,
        rng: Option<Box<ChaCha8Rng>>,
        buf: Vec<ViolationMessage>,
    },
    Threads {
        workers: BTreeMap<RuleId, DetectThread>,
        retired: Vec<JoinHandle<()>>,
        window: Option<WindowConfig>,
        out_tx: Sender<ViolationMessage>,
        out_rx: Receiver<ViolationMessage>,
        capacity: usize,
    },
}

impl DetectStage {
    fn new(cfg: &PipelineConfig) -> Self {
        match cfg.transport {
            Transport::InProcess => Self::Local {
                workers: BTreeMap::new(),
                window: cfg.window,
                rng: cfg.shuffle_seed.map(|s| Box::new(ChaCha8Rng::seed_from_u64(s))),
                buf: Vec::new(),
            },
            Transport::Threads => {
                // Unbounded so that detect workers never block on egress
                // while ingress blocks on them.
                let (out_tx, out_rx) = unbounded();
                Self::Threads {
                    workers: BTreeMap::new(),
                    retired: Vec::new(),
                    window: cfg.window,
                    out_tx,
                    out_rx,
                    capacity: cfg.channel_capacity,
                }
            }
        }
    }

    fn add(&mut self, rule: RuleId) {
        match self {
            Self::Local { workers, window, .. } => {
                workers.insert(rule, DataHistory::new(rule, *window));
            }
            Self::Threads {
                workers,
                window,
                out_tx,
                capacity,
                ..
            } => {
                let (tx, rx) = bounded::<DetectCmd>(*capacity);
                let out = out_tx.clone();
                let mut dh = DataHistory::new(rule, *window);
                let handle = std::thread::Builder::new()
                    .name(format!("detect-{rule}"))
                    .spawn(move || {
                        for cmd in rx {
                            match cmd {
                                DetectCmd::Sub(st) => {
                                    if out.send(dh.detect(&st)).is_err() {
                                        return;
                                    }
                                }
                                DetectCmd::Slide(s) => dh.slide(s),
                                DetectCmd::Dump(reply) => {
                                    let _ = reply.send(dh.to_json());
                                }
                            }
                        }
                    })
                    .expect("spawn detect worker");
                workers.insert(rule, DetectThread { tx, handle });
            }
        }
    }

    fn delete(&mut self, rule: RuleId) {
        match self {
            Self::Local { workers, .. } => {
                workers.remove(&rule);
            }
            Self::Threads {
                workers, retired, ..
            } => {
                // Dropping the sender lets the worker finish its queue and exit.
                if let Some(w) = workers.remove(&rule) {
                    drop(w.tx);
                    retired.push(w.handle);
                }
            }
        }
    }

    fn slide(&mut self, s: Slide) -> Result<(), EngineError> {
        match self {
            Self::Local { workers, .. } => workers.values_mut().for_each(|w| w.slide(s)),
            Self::Threads { workers, .. } => {
                for w in workers.values() {
                    w.tx.send(DetectCmd::Slide(s))
                        .map_err(|_| EngineError::WorkerGone)?;
                }
            }
        }
        Ok(())
    }

    fn submit(&mut self, subs: Vec<SubTuple>) -> Result<(), EngineError> {
        match self {
            Self::Local {
                workers, rng, buf, ..
            } => {
                let mut msgs: Vec<ViolationMessage> = subs
                    .iter()
                    .map(|st| workers.get_mut(&st.rule_id).expect("active rule").detect(st))
                    .collect();
                if let Some(rng) = rng {
                    msgs.shuffle(rng.as_mut());
                }
                buf.extend(msgs);
            }
            Self::Threads { workers, .. } => {
                for st in subs {
                    workers[&st.rule_id]
                        .tx
                        .send(DetectCmd::Sub(st))
                        .map_err(|_| EngineError::WorkerGone)?;
                }
            }
        }
        Ok(())
    }

    /// Messages available now; with `block`, waits for at least one.
    fn poll(&mut self, block: bool) -> Result<Vec<ViolationMessage>, EngineError> {
        match self {
            Self::Local { buf, .. } => Ok(std::mem::take(buf)),
            Self::Threads { out_rx, .. } => {
                let mut out = Vec::new();
                if block {
                    out.push(
                        out_rx
                            .recv_timeout(Duration::from_secs(60))
                            .map_err(|_| EngineError::WorkerGone)?,
                    );
                }
                out.extend(out_rx.try_iter());
                Ok(out)
            }
        }
    }

    fn dump(&mut self) -> Vec<serde_json::Value> {
        match self {
            Self::Local { workers, .. } => workers.values().map(DataHistory::to_json).collect(),
            Self::Threads { workers, .. } => workers
                .values()
                .filter_map(|w| {
                    let (tx, rx) = bounded(1);
                    w.tx.send(DetectCmd::Dump(tx)).ok()?;
                    rx.recv().ok()
                })
                .collect(),
        }
    }

    fn shutdown(&mut self) {
        if let Self::Threads {
            workers, retired, ..
        } = self
        {
            for (_, w) in std::mem::take(workers) {
                drop(w.tx);
                retired.push(w.handle);
            }
            for h in retired.drain(..) {
                let _ = h.join();
            }
        }
    }
}

struct ThreadPool {
    txs: Vec<Sender<Arc<WorkerCmd>>>,
    rxs: Vec<Receiver<WorkerReply>>,
    handles: Vec<JoinHandle<()>>,
}

impl ThreadPool {
    fn new(n: usize, window: Option<WindowConfig>) -> Self {
        let mut pool = Self {
            txs: Vec::new(),
            rxs: Vec::new(),
            handles: Vec::new(),
        };
        for i in 0..n {
            let (tx, rx) = bounded::<Arc<WorkerCmd>>(1);
            let (rtx, rrx) = bounded::<WorkerReply>(1);
            let handle = std::thread::Builder::new()
                .name(format!("repair-{i}"))
                .spawn(move || {
                    let mut w = RepairWorker::new(i, n, window);
                    for cmd in rx {
                        if rtx.send(w.handle(&cmd)).is_err() {
                            return;
                        }
                    }
                })
                .expect("spawn repair worker");
            pool.txs.push(tx);
            pool.rxs.push(rrx);
            pool.handles.push(handle);
        }
        pool
    }
}

impl Drop for ThreadPool {
    fn drop(&mut self) {
        self.txs.clear();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

enum AnyPool {
    Local(LocalPool),
    Threads(ThreadPool),
}

impl WorkerPool for AnyPool {
    fn n_workers(&self) -> usize {
        match self {
            Self::Local(p) => p.n_workers(),
            Self::Threads(p) => p.txs.len(),
        }
    }

    fn broadcast(&mut self, cmd: WorkerCmd) -> Result<Vec<WorkerReply>, EngineError> {
        match self {
            Self::Local(p) => p.broadcast(cmd),
            Self::Threads(p) => {
                let cmd = Arc::new(cmd);
                for tx in &p.txs {
                    tx.send(cmd.clone()).map_err(|_| EngineError::WorkerGone)?;
                }
                p.rxs
                    .iter()
                    .map(|rx| rx.recv().map_err(|_| EngineError::WorkerGone))
                    .collect()
            }
        }
    }
}

/// A running pipeline. Feed tuples with [`Engine::push`]; cleaned tuples
/// come back in tuple id order, possibly later than their push in threaded
/// mode.
pub struct Engine {
    rules: RuleSet,
    clock: WindowClock,
    detect: DetectStage,
    egress: Egress<Barrier>,
    repair: RepairStage<AnyPool>,
    schedule: VecDeque<RuleUpdate>,
    last_id: Option<TupleId>,
    accepted: u64,
    dead: Vec<DeadLetter>,
    counters: Counters,
    sample_every: u64,
    sampled: HashMap<TupleId, Instant>,
    latency: Vec<LatencySample>,
    throughput: Vec<ThroughputPoint>,
    throughput_interval: u64,
    started: Instant,
    last_mark: Duration,
}

impl Engine {
    pub fn new(cfg: &PipelineConfig) -> Result<Self, EngineError> {
        cfg.validate()?;
        let rules = RuleSet::new(cfg.rules.iter().cloned())?;
        let mut detect = DetectStage::new(cfg);
        for id in rules.ids() {
            detect.add(id);
        }
        let pool = match cfg.transport {
            Transport::InProcess => AnyPool::Local(LocalPool::new(cfg.n_repair_workers, cfg.window)),
            Transport::Threads => AnyPool::Threads(ThreadPool::new(cfg.n_repair_workers, cfg.window)),
        };
        let mut schedule = cfg.schedule.clone();
        schedule.sort_by_key(|u| u.effective_seq);
        Ok(Self {
            rules,
            clock: WindowClock::new(cfg.window),
            detect,
            egress: Egress::new(),
            repair: RepairStage::new(pool, cfg.protocol),
            schedule: schedule.into(),
            last_id: None,
            accepted: 0,
            dead: Vec::new(),
            counters: Counters::default(),
            sample_every: (1.0 / cfg.latency_sample_rate).round().max(1.0) as u64,
            sampled: HashMap::new(),
            latency: Vec::new(),
            throughput: Vec::new(),
            throughput_interval: cfg.throughput_interval,
            started: Instant::now(),
            last_mark: Duration::ZERO,
        })
    }

    pub fn rules(&self) -> &RuleSet {
        &self.rules
    }

    fn apply_update(&mut self, u: RuleUpdate) -> Result<(), EngineError> {
        log::info!("rule update at {}: {:?}", u.effective_seq, u.op);
        self.rules.apply(&u.op)?;
        match u.op {
            RuleOp::Add { rule } => self.detect.add(rule.id),
            RuleOp::Delete { rule_id } => {
                self.detect.delete(rule_id);
                self.egress.barrier(Barrier::DropRule(rule_id));
            }
        }
        self.counters.rule_updates += 1;
        Ok(())
    }

    fn dead_letter(&mut self, d: DeadLetter) {
        log::warn!("dead letter: {}", d.reason);
        self.counters.dead_letters += 1;
        self.dead.push(d);
    }

    /// Records a line that could not be parsed into a tuple.
    pub fn reject(&mut self, line: Option<u64>, raw: &str, reason: String) {
        self.counters.tuples_in += 1;
        self.dead_letter(DeadLetter {
            line,
            tuple_id: None,
            reason,
            raw: raw.to_string(),
        });
    }

    pub fn push(&mut self, t: Tuple) -> Result<Vec<Output>, EngineError> {
        self.push_line(t, None)
    }

    fn push_line(&mut self, t: Tuple, line: Option<u64>) -> Result<Vec<Output>, EngineError> {
        let arrived = Instant::now();
        self.counters.tuples_in += 1;
        if let Some(prev) = self.last_id {
            if t.id <= prev {
                let raw = serde_json::to_string(&t).unwrap_or_default();
                self.dead_letter(DeadLetter {
                    line,
                    tuple_id: Some(t.id),
                    reason: format!("tuple id {} not greater than previous id {}", t.id, prev),
                    raw,
                });
                return Ok(Vec::new());
            }
        }
        while self
            .schedule
            .front()
            .is_some_and(|u| u.effective_seq <= t.id)
        {
            let u = self.schedule.pop_front().unwrap();
            self.apply_update(u)?;
        }
        let subs = match route_ingress(&t, self.rules.iter()) {
            Ok(s) => s,
            Err(e) => {
                let raw = serde_json::to_string(&t).unwrap_or_default();
                self.dead_letter(DeadLetter {
                    line,
                    tuple_id: Some(t.id),
                    reason: e.to_string(),
                    raw,
                });
                return Ok(Vec::new());
            }
        };
        self.last_id = Some(t.id);
        if let Some(s) = self.clock.arrive(t.id) {
            self.counters.slides += 1;
            self.detect.slide(s)?;
            self.egress.barrier(Barrier::Slide(s));
        }
        self.accepted += 1;
        if (self.accepted - 1).is_multiple_of(self.sample_every) {
            self.sampled.insert(t.id, arrived);
        }
        let expected: BTreeSet<RuleId> = subs.iter().map(|s| s.rule_id).collect();
        self.egress.register(t, expected)?;
        self.detect.submit(subs)?;
        self.pump(false)
    }

    /// Moves detect output through egress and repair. With `drain`, keeps
    /// going until every registered tuple has been emitted.
    fn pump(&mut self, drain: bool) -> Result<Vec<Output>, EngineError> {
        let mut out = Vec::new();
        loop {
            let msgs = self.detect.poll(drain && self.egress.pending() > 0)?;
            let got = !msgs.is_empty();
            for m in msgs {
                self.egress.accept(m)?;
            }
            for r in self.egress.drain_ready() {
                match r {
                    Released::Bundle(b) => {
                        let (tuple, decisions) = self.repair.process(b)?;
                        self.emit(&tuple);
                        out.push(Output { tuple, decisions });
                    }
                    Released::Barrier(Barrier::Slide(s)) => self.repair.slide(s)?,
                    Released::Barrier(Barrier::DropRule(r)) => self.repair.drop_rule(r)?,
                }
            }
            if !drain || self.egress.pending() == 0 || !got {
                break;
            }
        }
        Ok(out)
    }

    fn emit(&mut self, t: &Tuple) {
        self.counters.tuples_out += 1;
        if let Some(at) = self.sampled.remove(&t.id) {
            self.latency.push(LatencySample {
                tuple_id: t.id,
                latency_ms: at.elapsed().as_secs_f64() * 1e3,
            });
        }
        if self.counters.tuples_out.is_multiple_of(self.throughput_interval) {
            let now = self.started.elapsed();
            let dt = (now - self.last_mark).as_secs_f64();
            self.last_mark = now;
            self.throughput.push(ThroughputPoint {
                tuples: self.counters.tuples_out,
                elapsed_ms: now.as_secs_f64() * 1e3,
                tuples_per_sec: if dt > 0.0 {
                    self.throughput_interval as f64 / dt
                } else {
                    f64::INFINITY
                },
            });
        }
    }

    /// Data history of every detect worker and graph partition of every
    /// repair worker, as JSON.
    pub fn dump(&mut self) -> Result<serde_json::Value, EngineError> {
        Ok(serde_json::json!({
            "detect": self.detect.dump(),
            "repair": self.repair.dump()?,
        }))
    }

    pub fn dead_letters(&self) -> &[DeadLetter] {
        &self.dead
    }

    /// Drains in-flight tuples and stops the workers.
    pub fn finish(mut self) -> Result<(Vec<Output>, Metrics, Vec<DeadLetter>), EngineError> {
        let out = self.pump(true)?;
        let (rc, cells, sgs) = self.repair.stats()?;
        self.counters.absorb_repair(rc);
        self.counters.graph_cells = cells as u64;
        self.counters.subgraphs = sgs as u64;
        self.detect.shutdown();
        let metrics = Metrics {
            throughput: std::mem::take(&mut self.throughput),
            latency: std::mem::take(&mut self.latency),
            counters: self.counters,
        };
        Ok((out, metrics, std::mem::take(&mut self.dead)))
    }
}

/// Result of running a finite tuple list through a pipeline.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub outputs: Vec<Output>,
    pub metrics: Metrics,
    pub dead_letters: Vec<DeadLetter>,
}

impl RunResult {
    pub fn tuples(&self) -> Vec<Tuple> {
        self.outputs.iter().map(|o| o.tuple.clone()).collect()
    }
}

pub fn run(cfg: &PipelineConfig, input: impl IntoIterator<Item = Tuple>) -> Result<RunResult, EngineError> {
    let mut engine = Engine::new(cfg)?;
    let mut outputs = Vec::new();
    for t in input {
        outputs.extend(engine.push(t)?);
    }
    let (rest, metrics, dead_letters) = engine.finish()?;
    outputs.extend(rest);
    Ok(RunResult {
        outputs,
        metrics,
        dead_letters,
    })
}

/// Runs a JSONL stream: one tuple per input line, one cleaned tuple per
/// output line. Lines that fail to parse go to the dead letters.
pub fn run_jsonl(
    cfg: &PipelineConfig,
    input: impl BufRead,
    mut output: impl Write,
) -> Result<(Metrics, Vec<DeadLetter>), EngineError> {
    let mut engine = Engine::new(cfg)?;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = Some(i as u64 + 1);
        let outs = match Tuple::from_json(&line) {
            Ok(t) => engine.push_line(t, lineno)?,
            Err(e) => {
                engine.reject(lineno, &line, e.to_string());
                continue;
            }
        };
        write_outputs(&mut output, &outs)?;
    }
    let (rest, metrics, dead) = engine.finish()?;
    write_outputs(&mut output, &rest)?;
    output.flush()?;
    Ok((metrics, dead))
}

fn write_outputs(w: &mut impl Write, outs: &[Output]) -> Result<(), EngineError> {
    for o in outs {
        serde_json::to_writer(&mut *w, &o.tuple).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// `-` for stdin, `tcp://host:port` to connect, anything else is a path.
pub fn open_input(endpoint: &str) -> std::io::Result<Box<dyn BufRead + Send>> {
    if endpoint == "-" {
        return Ok(Box::new(BufReader::new(std::io::stdin())));
    }
    if let Some(addr) = endpoint.strip_prefix("tcp://") {
        return Ok(Box::new(BufReader::new(std::net::TcpStream::connect(addr)?)));
    }
    Ok(Box::new(BufReader::new(std::fs::File::open(endpoint)?)))
}

/// `-` for stdout, `tcp://host:port` to connect, anything else is a path.
pub fn open_output(endpoint: &str) -> std::io::Result<Box<dyn Write + Send>> {
    if endpoint == "-" {
        return Ok(Box::new(BufWriter::new(std::io::stdout())));
    }
    if let Some(addr) = endpoint.strip_prefix("tcp://") {
        return Ok(Box::new(BufWriter::new(std::net::TcpStream::connect(addr)?)));
    }
    Ok(Box::new(BufWriter::new(std::fs::File::create(endpoint)?)))
}

pub fn write_dead_letters(path: &Path, dead: &[DeadLetter]) -> Result<(), EngineError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for d in dead {
        serde_json::to_writer(&mut w, d).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
