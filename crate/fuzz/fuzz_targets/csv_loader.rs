#![no_main]

use libfuzzer_sys::fuzz_target;
use mediate_calib::dataset::{read_csv, ColumnRole, Role};

fuzz_target!(|data: &[u8]| {
    let schema = [
        ColumnRole::new(Role::Treatment, "t"),
        ColumnRole::new(Role::Mediator, "m1"),
        ColumnRole::new(Role::Outcome, "y"),
        ColumnRole::new(Role::Covariate, "x1"),
    ];
    if let Ok(d) = read_csv(data, &schema) {
        // Whatever loads must survive a write/read round trip.
        let mut buf = Vec::new();
        d.write_csv(&mut buf).expect("loaded data writes");
        let back = read_csv(buf.as_slice(), &schema).expect("written data reloads");
        assert_eq!(back.n(), d.n());
        assert_eq!(back.y(), d.y());
    }
});
