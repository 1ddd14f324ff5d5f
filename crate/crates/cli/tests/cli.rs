use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dygmamba"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(o: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&o.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("{l:?}: {e}")))
        .collect()
}

fn error_record(o: &Output) -> Value {
    let err = String::from_utf8_lossy(&o.stderr);
    let last = err.lines().last().expect("an error line");
    serde_json::from_str(last).unwrap_or_else(|e| panic!("{last:?}: {e}"))
}

#[rustfmt::skip]
const TINY: &[&str] = &[
    "--set", "synth=true",
    "--set", "synth.num_pairs=4",
    "--set", "synth.noise_edges=30",
    "--set", "synth.horizon=12",
    "--d", "4", "--rho", "4", "--k", "2", "--patch", "2",
    "--set", "d_n=3", "--set", "d_e=3", "--set", "d_t=4", "--set", "d_f=4",
    "--set", "l_n=1", "--set", "l_t=1",
    "--set", "epochs=2", "--set", "batch_size=16",
];

fn tiny(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn help_and_usage_errors() {
    let help = run(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("edgebank"));

    for bad in [
        &["frobnicate"][..],
        &["train", "--variant", "c"],
        &["train", "--rho", "many"],
        &[],
    ] {
        let o = run(bad);
        assert_eq!(o.status.code(), Some(2), "{bad:?}");
        assert_eq!(error_record(&o)["error"], "usage");
    }
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    for extra in [
        &["--set", "nope=1"][..],
        &["--set", "lr"],
        &["--set", "synth.decay=0.5"],
    ] {
        let o = tiny("train", &out, extra);
        assert_eq!(o.status.code(), Some(2), "{extra:?}");
        assert_eq!(error_record(&o)["error"], "config");
    }
    let o = run(&["train", "--config", "/nonexistent/run.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["train", "--data", "/nonexistent/edges.csv"]);
    assert_eq!(o.status.code(), Some(2));
    let o = tiny("eval", &out, &[]);
    assert_eq!(o.status.code(), Some(2), "no checkpoint under {}", out.display());
    let rec = error_record(&o);
    assert!(rec["message"].as_str().unwrap().contains("checkpoint"), "{rec}");
}

#[test]
fn malformed_data_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let edges = dir.path().join("edges.csv");
    std::fs::write(&edges, "src,dst,ts\n0,1,1.0\n1,2,oops\n").unwrap();
    let o = run(&[
        "edgebank",
        "--data",
        edges.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_record(&o)["error"], "parse");
}

#[test]
fn synth_writes_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny("synth", dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let edges = std::fs::read_to_string(dir.path().join("edges.csv")).unwrap();
    assert!(edges.starts_with("src,dst,ts\n"));
    assert!(dir.path().join("manifest.json").is_file());
    // the written dataset loads back through --data
    let o = run(&[
        "edgebank",
        "--data",
        dir.path().to_str().unwrap(),
        "--out",
        dir.path().join("eb").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let reports = stdout_json(&o);
    assert_eq!(reports.len(), 5);
    assert_eq!(reports[4]["model"], "edgebank_max");
}

#[test]
fn train_then_eval_reproduces_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let t = tiny("train", out, &["--set", "seeds=3,4"]);
    assert_eq!(t.status.code(), Some(0), "{}", String::from_utf8_lossy(&t.stderr));
    let trained = stdout_json(&t);
    assert_eq!(trained.len(), 2);
    let epochs: Vec<Value> = String::from_utf8_lossy(&t.stderr)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(epochs.len(), 4);
    assert_eq!(
        (epochs[0]["seed"].as_u64(), epochs[0]["epoch"].as_u64()),
        (Some(3), Some(1))
    );
    for f in [
        "config.txt",
        "reports.jsonl",
        "aggregate.json",
        "seed_3/model.ckpt",
        "seed_4/history.csv",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }

    let e = tiny("eval", out, &["--set", "seeds=3,4"]);
    assert_eq!(e.status.code(), Some(0), "{}", String::from_utf8_lossy(&e.stderr));
    assert_eq!(stdout_json(&e), trained);

    // an explicit checkpoint, reusing the snapshot as the config
    let cfg = out.join("config.txt");
    let ckpt = out.join("seed_4/model.ckpt");
    let e = run(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--seed",
        "4",
        "--out",
        out.join("again").to_str().unwrap(),
    ]);
    assert_eq!(e.status.code(), Some(0), "{}", String::from_utf8_lossy(&e.stderr));
    assert_eq!(stdout_json(&e), vec![trained[1].clone()]);
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "bench",
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "bench_lengths=8,16",
        "--set",
        "bench_width=4",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = stdout_json(&o);
    assert_eq!(
        rows.iter().map(|r| r["seq_len"].as_u64().unwrap()).collect::<Vec<_>>(),
        vec![8, 16]
    );
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}
