#![no_main]

use fuseloc_net::pretrained::parse_safetensors;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(tensors) = parse_safetensors(data) {
        for t in &tensors {
            assert_eq!(t.values.len(), t.shape.iter().product::<usize>());
        }
    }
});
