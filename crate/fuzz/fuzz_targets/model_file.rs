#![no_main]

use std::path::Path;

use cpoe::model::SavedModel;
use cpoe_bench::model_io::parse_model_file;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = SavedModel::from_text(text) {
        assert_eq!(SavedModel::from_text(&m.to_text()).expect("written model parses"), m);
    }
    if let Ok(f) = parse_model_file(text, Path::new("/base")) {
        assert_eq!(f.x_scale.mean.len(), f.input_names.len());
        assert!(f.train_path.starts_with("/base") || f.train_path.is_absolute());
    }
});
