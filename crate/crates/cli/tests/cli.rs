use std::path::Path;
use std::process::{Command, Output};

fn bleach(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bleach"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

#[test]
fn window_must_be_a_multiple_of_the_slide() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("rules.json"), r#"[{"id":0,"lhs":["a"],"rhs":"b"}]"#).unwrap();
    let out = bleach(
        &["run", "--rules", "rules.json", "--window-size", "5", "--slide", "2", "--input", "rules.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_scenario_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bleach(&["bench", "no-such-scenario"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-such-scenario"));
}

#[test]
fn gen_run_eval() {
    let dir = tempfile::tempdir().unwrap();
    let ok = |o: Output| {
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        o
    };
    ok(bleach(
        &["gen", "--n", "3000", "--items", "200", "--out", "s.jsonl", "--truth", "t.jsonl", "--rules-out", "rules.json"],
        dir.path(),
    ));
    let score = |file: &str| -> Vec<f64> {
        let o = ok(bleach(&["eval", "--output", file, "--truth", "t.jsonl", "--rules", "rules.json"], dir.path()));
        let text = String::from_utf8(o.stdout).unwrap();
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let col = rdr.headers().unwrap().iter().position(|h| h == "dirty_ratio").unwrap();
        rdr.records().map(|r| r.unwrap()[col].parse().unwrap()).collect()
    };
    let before = score("s.jsonl");

    std::fs::write(dir.path().join("s.jsonl"), {
        let mut s = std::fs::read_to_string(dir.path().join("s.jsonl")).unwrap();
        s.push_str("{broken\n");
        s
    })
    .unwrap();
    ok(bleach(
        &[
            "run", "--rules", "rules.json", "--input", "s.jsonl", "--output", "o.jsonl", "--dead-letters", "dead.jsonl",
            "--metrics-dir", "m", "--window-size", "1000", "--slide", "500", "--transport", "threads",
        ],
        dir.path(),
    ));
    let lines = std::fs::read_to_string(dir.path().join("o.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 3000);
    let dead = std::fs::read_to_string(dir.path().join("dead.jsonl")).unwrap();
    assert_eq!(dead.lines().count(), 1);
    for f in ["throughput.csv", "latency.csv", "counters.csv"] {
        assert!(dir.path().join("m").join(f).exists(), "{f}");
    }

    let after = score("o.jsonl");
    assert_eq!(before.len(), 8);
    for (b, a) in before.iter().zip(&after) {
        assert!(a < b, "{a} not below {b}");
    }
}
