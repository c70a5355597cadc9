#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    // Anything that parses must also survive validation and sweep expansion.
    if let Ok(cfg) = pisa_harness::parse_config_str(text) {
        if cfg.validate().is_ok() && cfg.expand().len() <= 4096 {
            for point in cfg.expand() {
                let _ = point.client_params();
                let _ = point.preconditioner();
            }
        }
    }
});
