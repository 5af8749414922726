#![no_main]

use fuseloc_core::dataset::DatasetManifest;
use libfuzzer_sys::fuzz_target;
use std::path::Path;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let root = Path::new("/fuzz");
    if let Ok(m) = DatasetManifest::parse(text, root) {
        let again = DatasetManifest::parse(&m.to_cfg_string(), root).expect("written manifest parses");
        assert_eq!(again, m);
    }
});
