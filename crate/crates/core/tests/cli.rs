//! Command-line round trip on a small benchmark, and exit codes on bad input.

use std::path::Path;

use featloc::cli::run_from_args;
use featloc::evaluation::read_results;

fn run(args: &[&str]) -> i32 {
    run_from_args(std::iter::once("featloc").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_localize_evaluate_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.toml");
    std::fs::write(&cfg, "num_keyframes = 12\nnum_queries = 4\npoints_per_keyframe = 150\n").unwrap();
    let bench = dir.path().join("bench");
    let out = dir.path().join("out");
    assert_eq!(run(&["synth", "--config", s(&cfg), "--out", s(&bench)]), 0);
    assert!(bench.join("map.json").is_file() && bench.join("oracle.json").is_file());

    for mode in ["ra", "rp", "rpa"] {
        assert_eq!(run(&["localize", "--bench", s(&bench), "--out", s(&out), "--mode", mode, "--threads", "1"]), 0);
    }
    let rpa = out.join("results_rpa.csv");
    let rows = read_results(&rpa).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(out.join("effective_config.toml").is_file());

    let oracle = bench.join("oracle.json");
    assert_eq!(
        run(&["evaluate", "--results", s(&rpa), "--oracle", s(&oracle), "--thresholds", "0.25,2;0.5,5;5,10"]),
        0
    );
    assert!(out.join("results_rpa.summary.json").is_file());

    let report = dir.path().join("report.md");
    let table = dir.path().join("report.csv");
    let files: Vec<String> =
        ["ra", "rp", "rpa"].iter().map(|m| s(&out.join(format!("results_{m}.csv"))).to_owned()).collect();
    let mut args = vec!["report"];
    args.extend(files.iter().map(String::as_str));
    args.extend(["--out", s(&report), "--csv", s(&table)]);
    assert_eq!(run(&args), 0);
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("R+P+A") && text.contains("R+A"));
    assert!(table.is_file());
}

#[test]
fn bad_input_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let oracle = dir.path().join("oracle.json");
    assert_eq!(run(&["evaluate", "--results", s(&missing), "--oracle", s(&oracle)]), 1);

    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(run(&["report", s(&empty)]), 1);

    assert_eq!(run(&["localize", "--bench", s(dir.path()), "--out", s(dir.path()), "--mode", "xyz"]), 2);
    assert_eq!(run(&["frobnicate"]), 2);
    assert_eq!(run(&["synth", "--out", s(&dir.path().join("b")), "--config", s(&missing)]), 1);
}
