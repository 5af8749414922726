#![allow(dead_code)]

use std::path::Path;

use fuseloc_core::synthworld::{build_benchmark, BenchmarkSpec};

/// A small benchmark at 64×96 that is quick to generate and train on.
pub fn small_spec(seed: u64, n_frames: usize, n_dynamic: usize) -> BenchmarkSpec {
    BenchmarkSpec {
        seed,
        n_frames,
        n_dynamic,
        width: 96,
        height: 64,
        ..BenchmarkSpec::default()
    }
}

pub fn build_small(dir: &Path, seed: u64, n_frames: usize) {
    build_benchmark(&small_spec(seed, n_frames, 4), dir).unwrap();
}

/// Every file under `dir`, relative path and contents, sorted by path.
pub fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
