#![no_main]

use fuseloc_net::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((model, meta)) = decode_checkpoint(data) {
        let bytes = encode_checkpoint(&model, meta);
        let (again, _) = decode_checkpoint(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.params(), model.params());
    }
});
