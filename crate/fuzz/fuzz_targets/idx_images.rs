#![no_main]

use libfuzzer_sys::fuzz_target;
use pisa_core::problems::idx::parse_images;

fuzz_target!(|data: &[u8]| {
    if let Ok((count, rows, cols, pixels)) = parse_images(data) {
        assert_eq!(pixels.len(), count * rows * cols);
    }
});
