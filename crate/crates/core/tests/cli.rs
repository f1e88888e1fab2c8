use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_danger-ais"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn generated_benign_scenario_replays_without_deny() {
    let dir = tempfile::tempdir().unwrap();
    let gen = cli(dir.path(), &["--seed", "42", "--out-dir", "s", "gen-scenario", "benign", "--ticks", "80"]);
    assert!(gen.status.success(), "{}", stderr(&gen));
    for f in ["trace.txt", "metrics.txt", "holdout.txt"] {
        assert!(dir.path().join("s").join(f).exists(), "{f} missing");
    }
    let run = cli(
        dir.path(),
        &["--seed", "42", "--out-dir", "out", "run", "s/trace.txt", "--metrics", "s/metrics.txt"],
    );
    assert!(run.status.success(), "{}", stderr(&run));
    assert!(stdout(&run).contains("ticks executed:            80"));
    let policy = fs::read_to_string(dir.path().join("out/policy.txt")).unwrap();
    assert!(policy.ends_with("default -> ask\n"));
    assert!(!policy.contains("-> deny"));
    let report = fs::read_to_string(dir.path().join("out/report.txt")).unwrap();
    assert_eq!(report, stdout(&run));
    let actions = fs::read_to_string(dir.path().join("out/actions.jsonl")).unwrap();
    for line in actions.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["action"], "permit");
        assert!(v["statement"].as_str().unwrap().starts_with("match seq("));
    }
}

#[test]
fn quiet_suppresses_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(dir.path(), &["--quiet", "gen-scenario", "attack", "--ticks", "10"]);
    assert!(o.status.success());
    assert!(stdout(&o).is_empty());
}

#[test]
fn empty_trace_echoes_base_policy() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("empty.txt"), "").unwrap();
    let base = "# hand written\nmatch seq(open, *, write) arg 0 substr \"/tmp/\" -> permit\n\ndefault -> deny\n";
    fs::write(dir.path().join("base.txt"), base).unwrap();
    let o = cli(dir.path(), &["run", "empty.txt", "--base-policy", "base.txt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("ticks executed:            0"));
    let policy = fs::read_to_string(dir.path().join("policy.txt")).unwrap();
    assert_eq!(policy, "match seq(open, *, write) arg 0 substr \"/tmp/\" -> permit\ndefault -> deny\n");
    assert_eq!(fs::read_to_string(dir.path().join("actions.jsonl")).unwrap(), "");
}

#[test]
fn missing_base_policy_defaults_to_ask() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("t.txt"), "S\t0\t1\topen\t/etc/passwd\n").unwrap();
    let o = cli(dir.path(), &["--quiet", "run", "t.txt", "--base-policy", "nope.txt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(dir.path().join("policy.txt")).unwrap(), "default -> ask\n");
}

#[test]
fn malformed_trace_line_reports_its_number() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("t.txt"), "S\t0\t1\topen\t\n# comment\nX\t1\t2\n").unwrap();
    let o = cli(dir.path(), &["run", "t.txt"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn config_file_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let gen = cli(dir.path(), &["--quiet", "--seed", "3", "gen-scenario", "attack", "--ticks", "40", "--burst-start", "20", "--burst-len", "5"]);
    assert!(gen.status.success());
    fs::write(dir.path().join("a.conf"), "rng_seed = 1\ndc_population_size = 30 # small\n").unwrap();
    let run = |out: &str, extra: &[&str]| {
        let mut args = vec!["--quiet", "--config", "a.conf", "--out-dir", out];
        args.extend_from_slice(extra);
        args.extend_from_slice(&["run", "trace.txt", "--metrics", "metrics.txt"]);
        let o = cli(dir.path(), &args);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read_to_string(dir.path().join(out).join("actions.jsonl")).unwrap()
            + &fs::read_to_string(dir.path().join(out).join("policy.txt")).unwrap()
    };
    let a = run("a", &[]);
    let b = run("b", &["--seed", "1"]);
    let c = run("c", &["--seed", "2"]);
    assert_eq!(a, b);
    assert_ne!(a, c);

    fs::write(dir.path().join("bad.conf"), "rng_seed = 1\nrng_sed = 2\n").unwrap();
    let o = cli(dir.path(), &["--config", "bad.conf", "run", "trace.txt"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("rng_sed"), "{}", stderr(&o));
}

#[test]
fn check_policy_canonicalises_and_rejects() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("p.txt"), "match  seq(open,read)   ->   deny\ndefault -> permit\n").unwrap();
    let o = cli(dir.path(), &["check-policy", "p.txt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "match seq(open, read) -> deny\ndefault -> permit\n");

    fs::write(dir.path().join("bad.txt"), "match seq(open) -> deny\nmatch seq() -> deny\n").unwrap();
    let o = cli(dir.path(), &["check-policy", "bad.txt"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn adapt_strace_extracts_name_and_first_argument() {
    let dir = tempfile::tempdir().unwrap();
    let raw = "\
1699.01 433 open(\"/etc/passwd\", O_RDONLY) = 3
1699.50 433 read(3, \"root:x\", 4096) = 6
1700.20 433 write(1, \"a|b\", 3 <unfinished ...>
1700.30 433 <... write resumed> ) = 3
garbage
1701.05 433 close(3) = 0
";
    fs::write(dir.path().join("raw.txt"), raw).unwrap();
    let o = cli(dir.path(), &["adapt-strace", "raw.txt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        stdout(&o),
        "S\t0\t433\topen\t/etc/passwd\nS\t0\t433\tread\t3\nS\t2\t433\tclose\t3\n"
    );
    assert!(stderr(&o).contains("skipped 3"), "{}", stderr(&o));

    let o = cli(dir.path(), &["adapt-strace", "raw.txt", "--output", "t.txt", "--tick-secs", "0.5"]);
    assert!(o.status.success());
    let adapted = fs::read_to_string(dir.path().join("t.txt")).unwrap();
    assert_eq!(adapted.lines().map(|l| l.split('\t').nth(1).unwrap()).collect::<Vec<_>>(), ["0", "0", "4"]);

    // The adapted trace is directly replayable.
    let o = cli(dir.path(), &["--quiet", "run", "t.txt"]);
    assert!(o.status.success(), "{}", stderr(&o));

    fs::write(dir.path().join("empty.txt"), "").unwrap();
    let o = cli(dir.path(), &["adapt-strace", "empty.txt"]);
    assert!(o.status.success());
    assert!(stdout(&o).is_empty());
}
