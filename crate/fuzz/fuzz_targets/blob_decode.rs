#![no_main]

use hpvd_core::io::{decode_blob, encode_blob, Dtype};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let [sel, lo, hi, rest @ ..] = data else { return };
    let dtype = if sel & 1 == 0 { Dtype::Int16Le } else { Dtype::F32Le };
    let voxels = usize::from(u16::from_le_bytes([*lo, *hi]));
    if let Ok(values) = decode_blob(rest, dtype, voxels) {
        assert_eq!(values.len(), voxels);
        if dtype == Dtype::Int16Le {
            assert_eq!(encode_blob(&values, dtype).unwrap(), rest);
        }
    }
});
