#![no_main]

use kronflow::grid::validate_hypotheses;
use kronflow::io::{parse_grid, parse_line_configs};
use libfuzzer_sys::fuzz_target;

const CONFIGS: &str = include_str!("../../data/line_configs.json");

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let configs = parse_line_configs(CONFIGS).unwrap();
    if let Ok(grid) = parse_grid(text, Some(&configs)) {
        let _ = validate_hypotheses(&grid);
    }
});
