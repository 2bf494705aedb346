#![no_main]

use libfuzzer_sys::fuzz_target;
use mediate_calib_cli::config::parse_column_list;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cols) = parse_column_list(text) {
        assert!(!cols.is_empty());
        assert_eq!(parse_column_list(&cols.join(",")).unwrap(), cols);
    }
});
