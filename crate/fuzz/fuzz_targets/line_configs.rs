#![no_main]

use kronflow::io::parse_line_configs;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_line_configs(text);
    }
});
