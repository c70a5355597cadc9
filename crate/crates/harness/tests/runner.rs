use pisa_harness::config::{load_preset, parse_config_str, RunConfig};
use pisa_harness::presets;
use pisa_harness::runner::{
    emit_summary, execute, exit_code, parse_record_line, read_summary, run_experiment, StreamRecord,
    SummaryError, SummaryRow, SCHEMA_VERSION, SUMMARY_HEADER,
};

fn small(extra: &str) -> RunConfig {
    parse_config_str(&format!(
        r#"
[problem]
kind = "least-squares"
d = 5
n = 80
seed = 3

[partition]
m = 4

[algorithm]
kind = "sisa"
sigma0 = 4.0
gamma = 0.99
k0 = 1

[run]
name = "small"
max_iters = 50
{extra}
"#
    ))
    .unwrap()
}

fn row(name: &str) -> SummaryRow {
    SummaryRow {
        schema_version: SCHEMA_VERSION,
        name: name.into(),
        config_hash: "ab12".into(),
        algorithm: "sisa".into(),
        status: "completed".into(),
        iterations: 10,
        grad_evals: 800,
        final_loss: 0.25,
        final_gap: Some(1e-9),
        gamma_hat: None,
        stationarity: 3.5e-7,
        test_accuracy: None,
        wallclock_s: 0.0,
    }
}

#[test]
fn empty_summary_is_header_only() {
    let mut buf = Vec::new();
    emit_summary(&[], &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf.clone()).unwrap(), format!("{}\n", SUMMARY_HEADER.join(",")));
    assert!(read_summary(&buf[..]).unwrap().is_empty());
}

#[test]
fn summary_round_trips() {
    let rows = vec![row("a"), row("b,with comma")];
    let mut buf = Vec::new();
    emit_summary(&rows, &mut buf).unwrap();
    assert_eq!(read_summary(&buf[..]).unwrap(), rows);
}

#[test]
fn summary_rejects_foreign_versions_and_headers() {
    let mut r = row("a");
    r.schema_version = SCHEMA_VERSION + 1;
    let mut buf = Vec::new();
    emit_summary(&[r], &mut buf).unwrap();
    assert!(matches!(read_summary(&buf[..]), Err(SummaryError::Version(v)) if v == SCHEMA_VERSION + 1));
    assert!(matches!(read_summary(&b"name,loss\nx,1\n"[..]), Err(SummaryError::Header)));
}

#[test]
fn schema_version_is_pinned() {
    assert_eq!(SCHEMA_VERSION, 1);
}

#[test]
fn stream_has_start_iters_and_end() {
    let cfg = small("");
    let mut buf = Vec::new();
    let out = execute(&cfg, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let recs: Vec<StreamRecord> = text.lines().map(|l| parse_record_line(l).unwrap()).collect();
    assert!(matches!(&recs[0], StreamRecord::Start { name, .. } if name == "small"));
    assert!(matches!(recs.last().unwrap(), StreamRecord::End { iterations: 50, .. }));
    let iters = recs.iter().filter(|r| matches!(r, StreamRecord::Iter { .. })).count();
    assert_eq!(iters, out.trajectory.records.len());
    for (line, rec) in text.lines().zip(&recs) {
        let again = serde_json::to_string(rec).unwrap();
        assert_eq!(parse_record_line(&again).unwrap(), *rec, "{line}");
    }
    assert_eq!(out.summary.iterations, 50);
    assert_eq!(exit_code(&[out]), 0);
}

#[test]
fn missed_tolerance_exits_with_3() {
    let mut cfg = small("stationarity_tol = 1e-30");
    cfg.run.max_iters = 3;
    let out = execute(&cfg, &mut std::io::sink()).unwrap();
    assert_eq!(out.summary.status, "tolerance-not-met");
    assert_eq!(exit_code(&[out]), 3);
}

#[test]
fn divergence_writes_abort_and_exits_with_2() {
    let mut cfg = small("");
    cfg.algorithm.kind = pisa_harness::config::AlgorithmKind::SgdMomentum;
    cfg.algorithm.lr = 1e6;
    cfg.run.max_iters = 2000;
    let mut buf = Vec::new();
    let out = execute(&cfg, &mut buf).unwrap();
    let last = String::from_utf8(buf).unwrap().lines().last().unwrap().to_owned();
    assert!(matches!(parse_record_line(&last).unwrap(), StreamRecord::Abort { .. }), "{last}");
    assert_eq!(out.summary.status, "diverged");
    assert_eq!(exit_code(&[out]), 2);
}

#[test]
fn experiment_writes_stream_per_point_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small("");
    cfg.sweep.gamma = vec![0.5, 0.9];
    cfg.algorithm.k0 = None;
    let outs = run_experiment(&cfg, Some(dir.path())).unwrap();
    assert_eq!(outs.len(), 2);
    let rows = read_summary(std::fs::File::open(dir.path().join("summary.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert!(dir.path().join(format!("{}.jsonl", r.name)).exists());
    }
    assert_ne!(rows[0].config_hash, rows[1].config_hash);
}

#[test]
fn presets_load_and_validate() {
    for name in presets::NAMES {
        let cfg = load_preset(name).unwrap();
        cfg.validate().unwrap();
        assert!(!cfg.expand().is_empty(), "{name}");
    }
    let a2 = load_preset("appendix-a2").unwrap();
    assert_eq!((a2.problem.d, a2.problem.n, a2.partition.m), (100, 3200, 32));
    assert_eq!(a2.run.max_iters, 3000);
    let names: Vec<String> = a2.expand().into_iter().map(|c| c.run.name).collect();
    assert_eq!(names.len(), 4);
}
