#![no_main]

use cpoe::kernels::parse_kernel_config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(p) = parse_kernel_config(text) else { return };
    let theta = p.to_vec();
    assert_eq!(theta.len(), p.n_params());
    assert!(theta.iter().all(|v| v.is_finite()));
    // The written form parses back to the same parameters.
    let written: String = p.to_kv().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    let back = parse_kernel_config(&written).expect("written kernel config parses");
    for (a, b) in theta.iter().zip(back.to_vec()) {
        assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
    }
});
