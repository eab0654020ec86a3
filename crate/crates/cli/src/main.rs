#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use bleach_core::dynamics::parse_schedule;
use bleach_core::error::{ConfigError, EngineError};
use bleach_core::genbench::{
    dirty_ratio, generate, run_bench, sales_rules, summary, write_dirtiness_csv,
    write_report, BenchConfig, DirtSpike, GenConfig, GroundTruth, Scenario,
};
use bleach_core::model::{parse_rules, Tuple};
use bleach_core::repair::Protocol;
use bleach_core::runtime::{
    open_input, open_output, run_jsonl, write_dead_letters, Engine, PipelineConfig, Transport,
};
use bleach_core::windowing::{WindowConfig, WindowStrategy};
use clap::{Args, Parser, Subcommand};

/// Streaming detection and repair of FD/CFD violations.
#[derive(Parser, Debug)]
#[command(name = "bleach", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Clean a JSONL tuple stream.
    Run(RunArgs),
    /// Generate a dirty stream and its ground truth.
    Gen(GenArgs),
    /// Score a cleaned stream against ground truth.
    Eval(EvalArgs),
    /// Run a canned experiment and write a report directory.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Clone)]
struct WindowArgs {
    /// Window size in tuples; omit for an unbounded window.
    #[arg(long, requires = "slide")]
    window_size: Option<u64>,
    /// Slide in tuples; must divide the window size.
    #[arg(long, requires = "window_size")]
    slide: Option<u64>,
    #[arg(long, default_value = "cumulative")]
    window_strategy: WindowStrategy,
}

impl WindowArgs {
    fn config(&self) -> Result<Option<WindowConfig>, ConfigError> {
        match (self.window_size, self.slide) {
            (Some(w), Some(s)) => WindowConfig::new(w, s, self.window_strategy).map(Some),
            _ => Ok(None),
        }
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Rules as a JSON array or one JSON object per line.
    #[arg(long)]
    rules: PathBuf,
    #[command(flatten)]
    window: WindowArgs,
    /// Coordination protocol: basic, dr or ir.
    #[arg(long, default_value = "dr")]
    protocol: Protocol,
    /// Number of repair workers.
    #[arg(long, default_value_t = 2)]
    workers: usize,
    /// JSONL rule updates applied at their tuple positions.
    #[arg(long)]
    schedule: Option<PathBuf>,
    /// `-`, a file path or tcp://host:port.
    #[arg(long, default_value = "-")]
    input: String,
    /// `-`, a file path or tcp://host:port.
    #[arg(long, default_value = "-")]
    output: String,
    /// Where rejected input lines go, as JSONL.
    #[arg(long)]
    dead_letters: Option<PathBuf>,
    /// Directory for throughput.csv, latency.csv and counters.csv.
    #[arg(long)]
    metrics_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    latency_sample_rate: f64,
    /// in-process or threads.
    #[arg(long, default_value = "in-process")]
    transport: Transport,
    /// In-process only: shuffle detect message delivery with this seed.
    #[arg(long)]
    shuffle_seed: Option<u64>,
    /// Write the detect and repair worker state as JSON after the run.
    #[arg(long)]
    dump_state: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct GenArgs {
    #[arg(long, default_value_t = 200_000)]
    n: u64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 0.10)]
    p_rhs_dirty: f64,
    #[arg(long, default_value_t = 0.10)]
    p_lhs_null: f64,
    #[arg(long)]
    items: Option<u32>,
    #[arg(long)]
    customers: Option<u32>,
    #[arg(long)]
    stores: Option<u32>,
    /// Dirt spike as FROM:TO:P, e.g. 80000:100000:0.5.
    #[arg(long, value_parser = parse_spike)]
    spike: Option<DirtSpike>,
    /// Dirty stream output.
    #[arg(long, default_value = "stream.jsonl")]
    out: PathBuf,
    /// Ground truth output.
    #[arg(long, default_value = "truth.jsonl")]
    truth: PathBuf,
    /// Also write the eight sales rules here.
    #[arg(long)]
    rules_out: Option<PathBuf>,
}

impl GenArgs {
    fn config(&self) -> GenConfig {
        let d = GenConfig::default();
        GenConfig {
            n_tuples: self.n,
            seed: self.seed,
            p_rhs_dirty: self.p_rhs_dirty,
            p_lhs_null: self.p_lhs_null,
            items: self.items.unwrap_or(d.items),
            customers: self.customers.unwrap_or(d.customers),
            stores: self.stores.unwrap_or(d.stores),
            spike: self.spike,
            ..d
        }
    }
}

fn parse_spike(s: &str) -> Result<DirtSpike, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [from, to, p] = parts.as_slice() else {
        return Err("expected FROM:TO:P".into());
    };
    Ok(DirtSpike {
        from: from.parse().map_err(|e| format!("{e}"))?,
        to: to.parse().map_err(|e| format!("{e}"))?,
        p_rhs_dirty: p.parse().map_err(|e| format!("{e}"))?,
    })
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Cleaned stream (JSONL).
    #[arg(long)]
    output: PathBuf,
    /// Ground truth written by `gen`.
    #[arg(long)]
    truth: PathBuf,
    /// Rules to score; defaults to the eight sales rules.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Per-rule dirty ratio CSV; `-` for stdout.
    #[arg(long, default_value = "-")]
    csv: String,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// coordination-comparison, windowing-comparison, dynamic-rules or
    /// micro-batch-baseline.
    scenario: Scenario,
    /// Report directory.
    #[arg(long, default_value = "bench-report")]
    out: PathBuf,
    #[arg(long)]
    n: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    window_size: Option<u64>,
    #[arg(long)]
    slide: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    transport: Option<Transport>,
    /// Drop the dirt spike of the windowing comparison.
    #[arg(long)]
    no_spike: bool,
    /// Override item cardinality.
    #[arg(long)]
    items: Option<u32>,
    /// Override (state, city) cardinality.
    #[arg(long)]
    addresses: Option<u32>,
}

/// Failures that are the caller's fault exit with 2, everything else
/// with 3.
fn exit_code(e: &anyhow::Error) -> u8 {
    let usage = e.chain().any(|c| {
        c.downcast_ref::<ConfigError>().is_some()
            || matches!(c.downcast_ref::<EngineError>(), Some(EngineError::Config(_)))
    });
    if usage {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BLEACH_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let res = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Gen(a) => cmd_gen(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let rules = parse_rules(&read(&a.rules)?).context("parsing rules")?;
    let mut cfg = PipelineConfig::new(rules);
    cfg.window = a.window.config()?;
    cfg.protocol = a.protocol;
    cfg.n_repair_workers = a.workers;
    cfg.latency_sample_rate = a.latency_sample_rate;
    cfg.transport = a.transport;
    cfg.shuffle_seed = a.shuffle_seed;
    if let Some(p) = &a.schedule {
        cfg.schedule = parse_schedule(&read(p)?).context("parsing schedule")?;
    }
    cfg.validate()?;
    let input = open_input(&a.input).with_context(|| format!("opening {}", a.input))?;
    let output = open_output(&a.output).with_context(|| format!("opening {}", a.output))?;
    let (metrics, dead) = if let Some(dump) = &a.dump_state {
        run_with_dump(&cfg, input, output, dump)?
    } else {
        run_jsonl(&cfg, input, output)?
    };
    if let Some(p) = &a.dead_letters {
        write_dead_letters(p, &dead)?;
    }
    if let Some(dir) = &a.metrics_dir {
        metrics.write_csv(dir)?;
    }
    log::info!(
        "{} tuples in, {} out, {} dead letters",
        metrics.counters.tuples_in,
        metrics.counters.tuples_out,
        metrics.counters.dead_letters
    );
    Ok(())
}

/// Like `run_jsonl`, but snapshots worker state before shutdown.
fn run_with_dump(
    cfg: &PipelineConfig,
    input: Box<dyn BufRead + Send>,
    mut output: Box<dyn Write + Send>,
    dump: &Path,
) -> Result<(bleach_core::runtime::Metrics, Vec<bleach_core::runtime::DeadLetter>)> {
    let mut engine = Engine::new(cfg)?;
    let mut outs = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match Tuple::from_json(&line) {
            Ok(t) => outs.extend(engine.push(t)?),
            Err(e) => engine.reject(Some(i as u64 + 1), &line, e.to_string()),
        }
    }
    let state = engine.dump()?;
    let (rest, metrics, dead) = engine.finish()?;
    outs.extend(rest);
    for o in &outs {
        serde_json::to_writer(&mut output, &o.tuple)?;
        output.write_all(b"\n")?;
    }
    output.flush()?;
    std::fs::write(dump, serde_json::to_string_pretty(&state)?)?;
    Ok((metrics, dead))
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let (stream, truth) = generate(&a.config())?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(&a.out)?);
    for t in &stream {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(&a.truth)?);
    truth.write_jsonl(&mut w)?;
    w.flush()?;
    if let Some(p) = &a.rules_out {
        std::fs::write(p, serde_json::to_string_pretty(&sales_rules())?)?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let rules = match &a.rules {
        Some(p) => parse_rules(&read(p)?).context("parsing rules")?,
        None => sales_rules(),
    };
    let output: Vec<Tuple> = read(&a.output)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(Tuple::from_json)
        .collect::<Result<_, _>>()
        .context("parsing output stream")?;
    let truth = GroundTruth::read_jsonl(std::io::BufReader::new(std::fs::File::open(&a.truth)?))
        .context("parsing ground truth")?;
    let rows = dirty_ratio(&output, &truth, &rules)?;
    let w = open_output(&a.csv)?;
    write_dirtiness_csv(w, &rows)?;
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let mut cfg = BenchConfig::new(a.scenario);
    if let Some(n) = a.n {
        // Keep the spike at the same relative position.
        if let Some(s) = &mut cfg.gen.spike {
            s.from = n * 2 / 5;
            s.to = n / 2;
        }
        cfg.gen.n_tuples = n;
    }
    if let Some(s) = a.seed {
        cfg.gen.seed = s;
    }
    if let Some(w) = a.window_size {
        cfg.window_size = w;
    }
    if let Some(s) = a.slide {
        cfg.slide = s;
    }
    if let Some(w) = a.workers {
        cfg.n_workers = w;
    }
    if let Some(t) = a.transport {
        cfg.transport = t;
    }
    if a.no_spike {
        cfg.gen.spike = None;
    }
    if let Some(i) = a.items {
        cfg.gen.items = i;
    }
    if let Some(x) = a.addresses {
        cfg.gen.addresses = x;
    }
    WindowConfig::new(cfg.window_size, cfg.slide, cfg.strategy)?;
    let report = run_bench(&cfg)?;
    write_report(&report, &a.out)?;
    let text = summary(&report);
    std::fs::write(a.out.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}
