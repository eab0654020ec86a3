//! The threaded transport and shuffled detect delivery give the same
//! cleaned stream as the single-threaded run.

use bleach_core::genbench::{generate, sales_subset, GenConfig};
use bleach_core::repair::Protocol;
use bleach_core::runtime::{run, PipelineConfig, Transport};
use bleach_core::windowing::{WindowConfig, WindowStrategy};

fn config(protocol: Protocol, strategy: WindowStrategy) -> PipelineConfig {
    let mut cfg = PipelineConfig::new(sales_subset(&[0, 1, 2, 3, 4, 5]));
    cfg.n_repair_workers = 3;
    cfg.protocol = protocol;
    cfg.window = Some(WindowConfig::new(1_000, 500, strategy).unwrap());
    cfg
}

#[test]
fn transports_and_interleavings_agree() {
    let gen = GenConfig {
        n_tuples: 4_000,
        items: 300,
        customers: 800,
        ..GenConfig::default()
    };
    let (input, _) = generate(&gen).unwrap();
    for protocol in [Protocol::Basic, Protocol::Dr] {
        for strategy in [WindowStrategy::Basic, WindowStrategy::Cumulative] {
            let base = config(protocol, strategy);
            let reference = run(&base, input.iter().cloned()).unwrap();
            assert_eq!(reference.outputs.len(), input.len());
            assert_ne!(reference.tuples(), input, "nothing was repaired");

            let mut threaded = base.clone();
            threaded.transport = Transport::Threads;
            let t = run(&threaded, input.iter().cloned()).unwrap();
            assert_eq!(t.tuples(), reference.tuples(), "{protocol} {strategy:?} threads");
            assert_eq!(t.metrics.counters, reference.metrics.counters);

            for seed in [1, 2, 3] {
                let mut shuffled = base.clone();
                shuffled.shuffle_seed = Some(seed);
                let s = run(&shuffled, input.iter().cloned()).unwrap();
                assert_eq!(s.tuples(), reference.tuples(), "{protocol} {strategy:?} seed {seed}");
            }
        }
    }
}

#[test]
fn replay_is_identical() {
    let gen = GenConfig {
        n_tuples: 3_000,
        ..GenConfig::default()
    };
    let (input, _) = generate(&gen).unwrap();
    let cfg = config(Protocol::Ir, WindowStrategy::Cumulative);
    let a = run(&cfg, input.iter().cloned()).unwrap();
    let b = run(&cfg, input.iter().cloned()).unwrap();
    assert_eq!(a.tuples(), b.tuples());
    assert_eq!(a.metrics.counters, b.metrics.counters);
}
