#![no_main]

use std::io::Write;

use libfuzzer_sys::fuzz_target;
use reflab::harness::{read_dataset, to_canonical_json, InstanceRecord};

fuzz_target!(|data: &[u8]| {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(data).unwrap();
    f.flush().unwrap();
    if let Ok(records) = read_dataset(f.path()) {
        for r in &records {
            // canonical form is a fixed point of serialize -> parse -> serialize
            if let Ok(a) = to_canonical_json(r) {
                let back: InstanceRecord = serde_json::from_str(&a).unwrap();
                assert_eq!(a, to_canonical_json(&back).unwrap());
            }
        }
    }
});
