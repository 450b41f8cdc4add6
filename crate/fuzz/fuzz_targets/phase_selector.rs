#![no_main]

use hpvd_core::PhaseSet;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(set) = s.parse::<PhaseSet>() {
        assert!(!set.is_empty());
        assert_eq!(set.to_string().parse::<PhaseSet>().unwrap(), set);
    }
});
