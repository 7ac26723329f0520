#![no_main]

use std::io::Write;

use libfuzzer_sys::fuzz_target;
use reflab::harness::{to_canonical_json, ExperimentConfig};

fuzz_target!(|data: &[u8]| {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(data).unwrap();
    f.flush().unwrap();
    if let Ok(cfg) = ExperimentConfig::load(f.path()) {
        cfg.validate().unwrap(); // load must only return validated configs
        if let Ok(a) = to_canonical_json(&cfg) {
            let back: ExperimentConfig = serde_json::from_str(&a).unwrap();
            assert_eq!(a, to_canonical_json(&back).unwrap());
        }
    }
});
