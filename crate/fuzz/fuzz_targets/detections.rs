#![no_main]

use hpvd_core::io::parse_detections;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(list) = parse_detections(data) {
        for s in &list {
            for d in &s.detections {
                assert!((0.0..=1.0).contains(&d.score));
                assert!(d.bbox.volume() > 0.0);
            }
        }
        let again = parse_detections(&serde_json::to_vec(&list).unwrap()).expect("re-encoded detections parse");
        assert_eq!(again.len(), list.len());
    }
});
