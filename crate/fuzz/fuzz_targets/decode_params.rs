#![no_main]

use gpn::params_io::{decode, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(params) = decode(data) {
        let bytes = encode(&params);
        let again = decode(&bytes).expect("re-encoded parameters decode");
        assert_eq!(encode(&again), bytes);
    }
});
