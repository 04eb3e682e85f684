#![no_main]

use kronflow::io::{parse_profiles, write_profiles};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(p) = parse_profiles(text) {
        let again = parse_profiles(&write_profiles(&p).unwrap()).unwrap();
        assert_eq!(p, again);
    }
});
