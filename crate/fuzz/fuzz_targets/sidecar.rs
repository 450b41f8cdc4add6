#![no_main]

use hpvd_core::io::parse_sidecar;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = parse_sidecar(data) {
        let again = parse_sidecar(&serde_json::to_vec(&s).unwrap()).expect("re-encoded sidecar parses");
        assert_eq!(again.dims, s.dims);
        assert_eq!(again.dtype, s.dtype);
    }
});
