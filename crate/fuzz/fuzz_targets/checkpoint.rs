#![no_main]

use std::io::Write;

use libfuzzer_sys::fuzz_target;
use reflab::harness::{load_checkpoint, save_checkpoint};

fuzz_target!(|data: &[u8]| {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(data).unwrap();
    f.flush().unwrap();
    if let Ok(params) = load_checkpoint(f.path()) {
        // anything that loads must round-trip bit-exactly
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ck.json");
        save_checkpoint(&out, &params).unwrap();
        let back = load_checkpoint(&out).unwrap();
        let a = params.tensors.flatten();
        let b = back.tensors.flatten();
        assert_eq!(a.len(), b.len());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
});
