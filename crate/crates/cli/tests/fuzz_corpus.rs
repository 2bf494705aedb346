//! Replays the checked-in fuzz corpus through the parser entry points so the
//! seeds stay meaningful without a nightly toolchain.

use std::path::PathBuf;

use mediate_calib::dataset::{read_csv, ColumnRole, Role};
use mediate_calib::oracle::DgpSpec;
use mediate_calib_cli::config::{parse_column_list, parse_file_config, Overrides, RunConfig};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty());
    out
}

#[test]
fn csv_seeds() {
    let schema = [
        ColumnRole::new(Role::Treatment, "t"),
        ColumnRole::new(Role::Mediator, "m1"),
        ColumnRole::new(Role::Outcome, "y"),
        ColumnRole::new(Role::Covariate, "x1"),
    ];
    let mut loaded = Vec::new();
    for (name, bytes) in seeds("csv_loader") {
        if read_csv(bytes.as_slice(), &schema).is_ok() {
            loaded.push(name);
        }
    }
    assert_eq!(loaded, ["basic.csv", "reordered.csv"]);
}

#[test]
fn run_config_seeds() {
    let mut valid = Vec::new();
    for (name, bytes) in seeds("run_config") {
        let file = parse_file_config(std::str::from_utf8(&bytes).unwrap()).unwrap();
        if RunConfig::resolve(&file, &Overrides::default()).is_ok() {
            valid.push(name);
        }
    }
    assert_eq!(valid, ["full.toml", "simulation.toml"]);
}

#[test]
fn dgp_spec_seeds() {
    for (name, bytes) in seeds("dgp_spec") {
        let spec: DgpSpec = toml::from_str(std::str::from_utf8(&bytes).unwrap()).unwrap();
        let dgp = spec.build().unwrap_or_else(|e| panic!("{name}: {e}"));
        let t = dgp.true_values();
        assert!((t.nie + t.nde - t.ate).abs() < 1e-12, "{name}");
    }
}

#[test]
fn column_list_seeds() {
    let ok: Vec<String> = seeds("column_list")
        .into_iter()
        .filter(|(_, b)| parse_column_list(std::str::from_utf8(b).unwrap()).is_ok())
        .map(|(n, _)| n)
        .collect();
    assert_eq!(ok, ["spaced"]);
}
