#![no_main]

use libfuzzer_sys::fuzz_target;
use pisa_core::problems::idx::{parse_idx, parse_labels};

fuzz_target!(|data: &[u8]| {
    let _ = parse_idx(data);
    if let Ok(labels) = parse_labels(data) {
        assert!(labels.len() <= data.len());
    }
});
