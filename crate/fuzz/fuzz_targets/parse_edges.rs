#![no_main]

use gpn::data::parse_edges;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let bounded = parse_edges(text, Some(64));
    let unbounded = parse_edges(text, None);
    if let Ok(edges) = bounded {
        assert!(edges.iter().all(|&(u, v)| u < 64 && v < 64));
        assert_eq!(unbounded.expect("a bounded parse implies an unbounded one"), edges);
    }
});
