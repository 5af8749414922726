#![no_main]

use fuseloc_core::projection::blob::{decode_map, encode_map};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(map) = decode_map(data) {
        let again = decode_map(&encode_map(&map)).expect("re-encoded map decodes");
        assert_eq!(again.points(), map.points());
    }
});
