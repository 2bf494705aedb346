#![no_main]

use libfuzzer_sys::fuzz_target;
use mediate_calib_cli::config::{parse_file_config, Overrides, RunConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(file) = parse_file_config(text) {
        if let Ok(c) = RunConfig::resolve(&file, &Overrides::default()) {
            assert!(c.level > 0.0 && c.level < 1.0);
            let _ = c.columns.schema();
        }
    }
});
