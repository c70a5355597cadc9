#![no_main]

use libfuzzer_sys::fuzz_target;
use pisa_harness::runner::parse_record_line;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for line in text.lines() {
        if let Ok(rec) = parse_record_line(line) {
            // Re-encoding a parsed record must parse back to itself (NaN aside).
            let again = serde_json::to_string(&rec).unwrap();
            let _ = parse_record_line(&again);
        }
    }
});
