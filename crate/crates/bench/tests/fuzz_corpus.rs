//! Replays the fuzz corpus seeds through the parsers on the stable toolchain.

use std::path::{Path, PathBuf};

use cpoe::kernels::parse_kernel_config;
use cpoe::model::SavedModel;
use cpoe_bench::config::ExperimentConfig;
use cpoe_bench::dataset::parse_csv;
use cpoe_bench::model_io::parse_model_file;

fn seeds(target: &str) -> Vec<(String, String)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<(String, String)> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read_to_string(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

/// Seeds whose names start with one of `bad` must be rejected, all others
/// accepted.
fn check(target: &str, bad: &[&str], accepts: impl Fn(&str) -> bool) {
    for (name, text) in seeds(target) {
        let want = !bad.iter().any(|b| name.starts_with(b));
        assert_eq!(accepts(&text), want, "{target}/{name}");
    }
}

#[test]
fn csv_seeds() {
    check("csv", &["ragged", "nonfinite"], |t| parse_csv(t).is_ok());
}

#[test]
fn experiment_config_seeds() {
    check("experiment_config", &["bad_"], |t| ExperimentConfig::parse(t, Path::new("/base")).is_ok());
}

#[test]
fn kernel_config_seeds() {
    check("kernel_config", &["negative"], |t| match parse_kernel_config(t) {
        Ok(p) => {
            let written: String = p.to_kv().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
            let back = parse_kernel_config(&written).unwrap();
            for (a, b) in p.to_vec().iter().zip(back.to_vec()) {
                assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
            true
        }
        Err(_) => false,
    });
}

#[test]
fn model_file_seeds() {
    check("model_file", &["bad_"], |t| match SavedModel::from_text(t) {
        Ok(m) => {
            assert_eq!(SavedModel::from_text(&m.to_text()).unwrap(), m);
            parse_model_file(t, Path::new("/base")).is_ok()
        }
        Err(_) => false,
    });
}
