#![no_main]

use gpn::data::parse_features;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(x) = parse_features(text) {
        assert!(x.all_finite());
        assert_eq!(x.len(), x.rows() * x.cols());
    }
});
