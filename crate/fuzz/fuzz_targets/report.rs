#![no_main]

use kronflow_bench::report::{from_json, to_csv, to_json};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(r) = from_json(text) {
        let _ = to_csv(&r.steps);
        let _ = to_json(&r);
    }
});
