#![no_main]

use cpoe_bench::dataset::{parse_csv, write_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(t) = parse_csv(text) else { return };
    assert!(t.rows.iter().all(|r| r.len() == t.n_cols() && r.iter().all(|v| v.is_finite())));
    // Anything accepted survives a write and a re-read unchanged.
    let path = std::env::temp_dir().join(format!("cpoe-fuzz-csv-{}", std::process::id()));
    if write_csv(Some(&path), &t.header, t.rows.clone().into_iter()).is_ok() {
        if let Ok(back) = std::fs::read_to_string(&path) {
            if let Ok(again) = parse_csv(&back) {
                assert_eq!(again.rows, t.rows);
            }
        }
    }
});
