#![no_main]

use hpvd_core::io::parse_manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = parse_manifest(data) {
        assert!(!m.phases.is_empty());
        parse_manifest(&serde_json::to_vec(&m).unwrap()).expect("re-encoded manifest parses");
    }
});
