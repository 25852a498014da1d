#![no_main]

use std::path::Path;

use cpoe_bench::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = ExperimentConfig::parse(text, Path::new("/base")) else { return };
    assert!(!cfg.methods.is_empty() && !cfg.seeds.is_empty());
    assert!((0.0..1.0).contains(&cfg.test_fraction));
    assert_eq!(cfg.hash.len(), 16);
    assert_eq!(ExperimentConfig::parse(text, Path::new("/base")).unwrap().hash, cfg.hash);
});
