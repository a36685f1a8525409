#![no_main]

use gpn::data::{parse_labels, MAX_CLASS_ID};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(labels) = parse_labels(text) {
        assert!(labels.iter().all(|&l| l <= MAX_CLASS_ID));
    }
});
