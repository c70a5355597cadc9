//! Replays the checked-in fuzz seeds through the parsers under plain `cargo test`.

use std::path::PathBuf;

use pisa_core::problems::idx::{parse_images, parse_labels};
use pisa_harness::parse_config_str;
use pisa_harness::runner::{parse_record_line, read_summary};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn idx_seeds() {
    for (name, bytes) in seeds("idx_images") {
        assert_eq!(parse_images(&bytes).is_ok(), name != "truncated", "{name}");
    }
    for (name, bytes) in seeds("idx_labels") {
        let parsed = parse_labels(&bytes);
        assert_eq!(parsed.is_ok(), name != "bad_magic", "{name}");
    }
    assert_eq!(parse_labels(&seeds("idx_labels")[1].1).unwrap(), [0, 1, 2, 9, 4]);
}

#[test]
fn config_seeds() {
    for (name, bytes) in seeds("config_parse") {
        let cfg = parse_config_str(std::str::from_utf8(&bytes).unwrap()).unwrap();
        cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn jsonl_seeds() {
    for (name, bytes) in seeds("jsonl_record") {
        for line in std::str::from_utf8(&bytes).unwrap().lines() {
            parse_record_line(line).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
}

#[test]
fn summary_seeds() {
    for (name, bytes) in seeds("summary_csv") {
        read_summary(&bytes[..]).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}
