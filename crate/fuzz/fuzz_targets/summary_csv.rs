#![no_main]

use libfuzzer_sys::fuzz_target;
use pisa_harness::runner::{emit_summary, read_summary};

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = read_summary(data) {
        let mut buf = Vec::new();
        emit_summary(&rows, &mut buf).unwrap();
        assert_eq!(read_summary(&buf[..]).unwrap().len(), rows.len());
    }
});
