#![no_main]

use libfuzzer_sys::fuzz_target;
use mediate_calib::oracle::DgpSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(spec) = toml::from_str::<DgpSpec>(text) else { return };
    if let Ok(dgp) = spec.build() {
        let t = dgp.true_values();
        assert!((t.nie + t.nde - t.ate).abs() <= 1e-9 * (1.0 + t.ate.abs()));
        let _ = dgp.true_influence_variance();
    }
});
