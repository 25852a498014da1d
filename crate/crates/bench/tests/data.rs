use cpoe::kernels::{GpParams, KernelSpec};
use cpoe_bench::dataset::{parse_csv, read_csv, write_csv, Dataset};
use cpoe_bench::synth::synth_gp_data_with_cap;
use nalgebra::{DMatrix, DVector};

#[test]
fn csv_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    let header: Vec<String> = ["a", "b", "y"].iter().map(|s| s.to_string()).collect();
    let rows = vec![
        vec![0.1, -2.5e-300, 1.0 / 3.0],
        vec![f64::MAX, f64::MIN_POSITIVE, -0.0],
        vec![123_456_789.123_456_79, 1e-7, std::f64::consts::PI],
    ];
    write_csv(Some(&path), &header, rows.clone().into_iter()).unwrap();
    let t = read_csv(&path).unwrap();
    assert_eq!(t.header, header);
    assert_eq!(t.rows, rows);
}

#[test]
fn csv_errors_name_the_line() {
    let e = parse_csv("a,b\n1,2\n3,oops\n").unwrap_err();
    let msg = format!("{e:#}");
    assert!(msg.contains("line 3") && msg.contains("'b'"), "{msg}");
}

#[test]
fn split_is_a_seeded_partition() {
    let x = DMatrix::from_fn(97, 3, |i, k| (i * 7 + k) as f64);
    let y = DVector::from_fn(97, |i, _| i as f64);
    let names = || vec!["a".to_string(), "b".to_string(), "c".to_string()];
    let a = Dataset::from_xy(&x, &y, 0.25, 3, true, names(), "y".into()).unwrap();
    let b = Dataset::from_xy(&x, &y, 0.25, 3, true, names(), "y".into()).unwrap();
    let c = Dataset::from_xy(&x, &y, 0.25, 4, true, names(), "y".into()).unwrap();
    assert_eq!((a.train_idx.clone(), a.test_idx.clone()), (b.train_idx.clone(), b.test_idx.clone()));
    assert_ne!(a.test_idx, c.test_idx);
    assert_eq!(a.n_test(), 24);
    let mut all: Vec<usize> = a.train_idx.iter().chain(&a.test_idx).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..97).collect::<Vec<_>>());
    // Training rows keep their order and map back to the raw data.
    for (r, &i) in a.train_idx.iter().enumerate() {
        let (m, _) = a.destandardize(a.y_train[r], 0.0);
        assert!((m - y[i]).abs() < 1e-9);
        let back = a.x_scale.invert(&a.x_train.rows(r, 1).into_owned());
        assert!((back - x.rows(i, 1)).abs().max() < 1e-9);
    }
}

#[test]
fn unstandardised_split_keeps_units() {
    let x = DMatrix::from_fn(20, 1, |i, _| i as f64 * 0.1);
    let y = DVector::from_fn(20, |i, _| 5.0 + i as f64);
    let d = Dataset::from_xy(&x, &y, 0.2, 0, false, vec!["x".into()], "y".into()).unwrap();
    for (r, &i) in d.test_idx.iter().enumerate() {
        assert_eq!(d.y_test[r], y[i]);
        assert_eq!(d.x_test[(r, 0)], x[(i, 0)]);
    }
}

/// Binned Monte-Carlo estimate of E[y_i y_k] against the SE covariance
/// written out by hand.
fn check_covariance(cap: usize) {
    let (amp, ls, noise) = (1.3, 0.3, 0.05);
    let p = GpParams::new(KernelSpec::se_ard(amp, &[ls, ls]), noise).unwrap();
    let bins = [0.0, 0.1, 0.2, 0.3];
    let (mut prod, mut kern, mut count) = (vec![0.0; 3], vec![0.0; 3], vec![0usize; 3]);
    let (mut sq, mut sq_n) = (0.0, 0usize);
    for seed in 0..400 {
        let (x, y) = synth_gp_data_with_cap(&p, 48, 2, seed, cap).unwrap();
        for i in 0..48 {
            sq += y[i] * y[i];
            sq_n += 1;
            for k in i + 1..48 {
                let r2 = (x[(i, 0)] - x[(k, 0)]).powi(2) + (x[(i, 1)] - x[(k, 1)]).powi(2);
                let r = r2.sqrt();
                if let Some(b) = bins.windows(2).position(|w| r >= w[0] && r < w[1]) {
                    prod[b] += y[i] * y[k];
                    kern[b] += amp * (-0.5 * r2 / (ls * ls)).exp();
                    count[b] += 1;
                }
            }
        }
    }
    let var = sq / sq_n as f64;
    assert!((var / (amp + noise) - 1.0).abs() < 0.05, "cap {cap}: variance {var}");
    for b in 0..3 {
        let (emp, want) = (prod[b] / count[b] as f64, kern[b] / count[b] as f64);
        assert!((emp / want - 1.0).abs() < 0.05, "cap {cap}: bin {b}: {emp} vs {want}");
    }
}

#[test]
fn exact_draw_has_the_kernel_covariance() {
    check_covariance(usize::MAX);
}

#[test]
fn fourier_draw_has_the_kernel_covariance() {
    check_covariance(0);
}

#[test]
fn synth_rejects_bad_shapes() {
    let p = GpParams::new(KernelSpec::se_ard(1.0, &[0.2, 0.2]), 0.01).unwrap();
    assert!(synth_gp_data_with_cap(&p, 0, 2, 0, 10).is_err());
    assert!(synth_gp_data_with_cap(&p, 10, 3, 0, 10).is_err());
}
