#![no_main]

use hpvd_core::io::parse_index;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(idx) = parse_index(data) {
        assert_eq!(parse_index(&serde_json::to_vec(&idx).unwrap()).unwrap(), idx);
    }
});
