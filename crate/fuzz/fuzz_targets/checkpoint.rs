#![no_main]

use hpvd_net::parse_checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = parse_checkpoint(data) {
        assert_eq!(parse_checkpoint(c.to_json().as_bytes()).unwrap(), c);
    }
});
