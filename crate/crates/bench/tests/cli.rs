use std::collections::HashMap;
use std::path::Path;
use std::process::{Command, Output};

use cpoe_bench::dataset::read_csv;
use cpoe_bench::model_io::load_model;

const KERNEL: &str = "kernel.components = se\nkernel.0.amplitude = 1.0\nkernel.0.lengthscale = 0.3\nnoise.variance = 0.01\n";

fn bench(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bench"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .env_remove("CPOE_THREADS")
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn results(path: &Path) -> Vec<HashMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(str::to_string).collect();
    r.records()
        .map(|rec| header.iter().cloned().zip(rec.unwrap().iter().map(str::to_string)).collect())
        .collect()
}

#[test]
fn synth_run_predict() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("k.txt"), KERNEL).unwrap();
    ok(bench(d, &["synth", "--kernel", "k.txt", "--n", "300", "--d", "2", "--seed", "4", "--output", "data.csv"]));
    let data = read_csv(&d.join("data.csv")).unwrap();
    assert_eq!(data.header, ["x0", "x1", "y"]);
    assert_eq!(data.rows.len(), 300);
    // Same seed, same sample.
    let again = ok(bench(d, &["synth", "--kernel", "k.txt", "--n", "300", "--d", "2", "--seed", "4"]));
    assert_eq!(again, std::fs::read_to_string(d.join("data.csv")).unwrap());

    let cfg = "output = out\nseeds = 7,8\ndata.path = data.csv\ndata.target = y\ndata.test_fraction = 0.2\nkernel.file = k.txt\nmethods = full,sgp,gpoe,cpoe\ngraph.experts = 4\ncpoe.correlation = 1,2\nsgp.inducing = 40\ntrain.mode = deterministic\ntrain.max_epochs = 5\n";
    std::fs::write(d.join("exp.txt"), cfg).unwrap();
    let stdout = ok(bench(d, &["run", "--config", "exp.txt"]));
    assert!(stdout.contains("10 runs (0 failed)"), "{stdout}");

    let rows = results(&d.join("out/results.csv"));
    let hash = rows[0]["config_hash"].clone();
    assert_eq!(hash.len(), 16);
    assert!(rows.iter().all(|r| r["config_hash"] == hash));
    let per_rep: Vec<_> = rows.iter().filter(|r| r["rep"] != "mean" && r["rep"] != "std").collect();
    assert_eq!(per_rep.len(), 10);
    for r in &per_rep {
        assert_eq!(r["status"], "ok");
        assert_eq!(r["seed"], if r["rep"] == "0" { "7" } else { "8" });
        assert_eq!(r["n_test"], "60");
        for k in ["kl", "crps", "rmse", "nlp", "cov95", "lml"] {
            assert!(r[k].parse::<f64>().unwrap().is_finite(), "{k}");
        }
    }
    let full = per_rep.iter().find(|r| r["method"] == "full").unwrap();
    assert_eq!(full["kl"].parse::<f64>().unwrap(), 0.0);
    let mean_rows: Vec<_> = rows.iter().filter(|r| r["rep"] == "mean").collect();
    assert_eq!(mean_rows.len(), 5);
    assert!(mean_rows.iter().all(|r| r["seed"] == "7;8" && r["status"] == "2/2"));
    assert!(d.join("out/timing.csv").exists());
    let trace = results(&d.join("out/trace_cpoe_c2.csv"));
    for rep in ["0", "1"] {
        let its: Vec<usize> = trace.iter().filter(|r| r["rep"] == rep).map(|r| r["iteration"].parse().unwrap()).collect();
        assert_eq!(its[0], 0);
        assert!(its.len() > 1 && its.windows(2).all(|w| w[1] == w[0] + 1), "{its:?}");
    }
    assert!(trace.iter().all(|r| r["config_hash"] == hash && r.contains_key("log_noise")));

    // A saved model refits to the reported marginal likelihood.
    let model_path = d.join("out/model_cpoe_c2_rep1.txt");
    let m = load_model(&model_path).unwrap();
    let row = per_rep.iter().find(|r| r["method"] == "cpoe_c2" && r["rep"] == "1").unwrap();
    let lml: f64 = row["lml"].parse().unwrap();
    assert!((m.model.log_marginal_likelihood() - lml).abs() <= 1e-9 * lml.abs().max(1.0));

    let input = "x1,x0\n0.5,0.25\n0.1,0.9\n";
    std::fs::write(d.join("in.csv"), input).unwrap();
    ok(bench(d, &["predict", "--model", "out/model_cpoe_c2_rep1.txt", "--input", "in.csv", "--output", "pred.csv"]));
    let pred = read_csv(&d.join("pred.csv")).unwrap();
    assert_eq!(pred.header, ["x0", "x1", "mean", "variance"]);
    assert_eq!(pred.rows[0][..2], [0.25, 0.5]);
    let direct = m.predict(&nalgebra::DMatrix::from_row_slice(2, 2, &[0.25, 0.5, 0.9, 0.1]), false).unwrap();
    for (r, (mu, v)) in pred.rows.iter().zip(direct) {
        assert_eq!((r[2], r[3]), (mu, v));
        assert!(v > 0.0);
    }
    let noisy = ok(bench(d, &["predict", "--model", "out/model_cpoe_c2_rep1.txt", "--input", "in.csv", "--noisy"]));
    let noisy = cpoe_bench::dataset::parse_csv(&noisy).unwrap();
    let noise = m.model.params().noise_variance() * m.y_scale.1 * m.y_scale.1;
    assert!((noisy.rows[0][3] - pred.rows[0][3] - noise).abs() < 1e-9 * noise.max(1.0));
}

#[test]
fn failing_method_is_recorded_and_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = format!("output = out\ndata.synthetic = true\ndata.n = 64\n{KERNEL}methods = full,cpoe\ngraph.experts = 3\n");
    std::fs::write(d.join("exp.txt"), cfg).unwrap();
    let stdout = ok(bench(d, &["run", "--config", "exp.txt"]));
    assert!(stdout.contains("2 runs (1 failed)"), "{stdout}");
    let rows = results(&d.join("out/results.csv"));
    let full = rows.iter().find(|r| r["method"] == "full" && r["rep"] == "0").unwrap();
    assert_eq!(full["status"], "ok");
    assert_eq!(full["kl"].parse::<f64>().unwrap(), 0.0);
    assert_eq!(full["err"].parse::<f64>().unwrap(), 0.0);
    let cpoe = rows.iter().find(|r| r["method"] == "cpoe_c2" && r["rep"] == "0").unwrap();
    assert_eq!(cpoe["status"], "failed");
    assert!(cpoe["message"].contains("power of two"), "{}", cpoe["message"]);
    assert_eq!(cpoe["kl"], "");
}

#[test]
fn bad_inputs_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("exp.txt"), "output = out\nbogus = 1\n").unwrap();
    let out = bench(d, &["run", "--config", "exp.txt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
    assert!(!bench(d, &["run", "--config", "missing.txt"]).status.success());
    assert!(!bench(d, &["predict", "--model", "missing.txt", "--input", "x.csv"]).status.success());

    std::fs::write(d.join("k.txt"), KERNEL).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_bench"))
        .args(["synth", "--kernel", "k.txt", "--n", "5", "--d", "1"])
        .current_dir(d)
        .env("CPOE_THREADS", "many")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("CPOE_THREADS"));
}
