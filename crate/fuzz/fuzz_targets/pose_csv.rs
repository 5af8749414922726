#![no_main]

use fuseloc_core::dataset::{format_pose_csv, parse_pose_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(poses) = parse_pose_csv(text) {
        let again = parse_pose_csv(&format_pose_csv(&poses)).expect("formatted poses parse");
        assert_eq!(again.len(), poses.len());
    }
});
