//! Numeric CSV tables, standardisation and train/test splits.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A rectangular numeric table with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn n_cols(&self) -> usize {
        self.header.len()
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("column '{name}' not found; columns are {:?}", self.header))
    }

    /// Splits into the inputs (every column but `target`) and the target.
    pub fn split_target(&self, target: usize) -> (DMatrix<f64>, DVector<f64>) {
        let d = self.n_cols() - 1;
        let x = DMatrix::from_fn(self.rows.len(), d, |i, k| self.rows[i][if k < target { k } else { k + 1 }]);
        let y = DVector::from_fn(self.rows.len(), |i, _| self.rows[i][target]);
        (x, y)
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows.len(), self.n_cols(), |i, k| self.rows[i][k])
    }
}

/// Parses a comma separated table. Every row must have as many cells as the
/// header and every cell must be a finite number.
pub fn parse_csv(text: &str) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers().context("reading header")?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        bail!("missing header row");
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| anyhow!("malformed row: {e}"))?;
        let line = rec.position().map_or(0, |p| p.line());
        let row = rec
            .iter()
            .enumerate()
            .map(|(k, cell)| match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(anyhow!("line {line}, column '{}': '{cell}' is not a finite number", header[k])),
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("no data rows");
    }
    Ok(Table { header, rows })
}

pub fn read_csv(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_csv(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_csv(path: Option<&Path>, header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let out: Box<dyn std::io::Write> = match path {
        Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|v| format!("{v:e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Per-column affine map to zero mean and unit standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Statistics of the columns of `m`; constant columns keep scale 1.
    pub fn fit(m: &DMatrix<f64>) -> Self {
        let n = m.nrows() as f64;
        let mut mean = Vec::with_capacity(m.ncols());
        let mut std = Vec::with_capacity(m.ncols());
        for c in m.column_iter() {
            let mu = c.sum() / n;
            let var = c.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            mean.push(mu);
            std.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Standardizer { mean, std }
    }

    pub fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, k| (m[(i, k)] - self.mean[k]) / self.std[k])
    }

    pub fn invert(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, k| m[(i, k)] * self.std[k] + self.mean[k])
    }
}

/// Standardised training and test data.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x_train: DMatrix<f64>,
    pub y_train: DVector<f64>,
    pub x_test: DMatrix<f64>,
    pub y_test: DVector<f64>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub x_scale: Standardizer,
    /// Mean and standard deviation of the training targets.
    pub y_scale: (f64, f64),
    pub seed: u64,
    pub input_names: Vec<String>,
    pub target_name: String,
}

impl Dataset {
    /// Shuffles rows with `seed`, keeps the first `round(test_fraction * N)`
    /// as test rows and, if asked, standardises everything with training
    /// statistics.
    pub fn from_xy(
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        test_fraction: f64,
        seed: u64,
        standardize: bool,
        input_names: Vec<String>,
        target_name: String,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&test_fraction) {
            bail!("test fraction must lie in [0, 1), got {test_fraction}");
        }
        let n = x.nrows();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (test_fraction * n as f64).round() as usize;
        if n - n_test < 2 {
            bail!("too few training rows ({} of {n})", n - n_test);
        }
        let mut test_idx = idx[..n_test].to_vec();
        let mut train_idx = idx[n_test..].to_vec();
        test_idx.sort_unstable();
        train_idx.sort_unstable();
        let pick = |rows: &[usize]| {
            (
                DMatrix::from_fn(rows.len(), x.ncols(), |i, k| x[(rows[i], k)]),
                DVector::from_fn(rows.len(), |i, _| y[rows[i]]),
            )
        };
        let (xr, yr) = pick(&train_idx);
        let (xt, yt) = pick(&test_idx);
        let (x_scale, y_scale) = if standardize {
            let ys = Standardizer::fit(&DMatrix::from_column_slice(yr.len(), 1, yr.as_slice()));
            (Standardizer::fit(&xr), (ys.mean[0], ys.std[0]))
        } else {
            let d = x.ncols();
            (Standardizer { mean: vec![0.0; d], std: vec![1.0; d] }, (0.0, 1.0))
        };
        let sy = |v: &DVector<f64>| v.map(|t| (t - y_scale.0) / y_scale.1);
        Ok(Dataset {
            x_train: x_scale.apply(&xr),
            y_train: sy(&yr),
            x_test: x_scale.apply(&xt),
            y_test: sy(&yt),
            train_idx,
            test_idx,
            x_scale,
            y_scale,
            seed,
            input_names,
            target_name,
        })
    }

    pub fn from_table(t: &Table, target: &str, test_fraction: f64, seed: u64) -> Result<Self> {
        let ti = t.column_index(target)?;
        let (x, y) = t.split_target(ti);
        let names = t.header.iter().enumerate().filter(|(k, _)| *k != ti).map(|(_, h)| h.clone()).collect();
        Self::from_xy(&x, &y, test_fraction, seed, true, names, target.to_string())
    }

    pub fn n_train(&self) -> usize {
        self.x_train.nrows()
    }

    pub fn n_test(&self) -> usize {
        self.x_test.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.x_train.ncols()
    }

    /// Maps a standardised predictive mean and variance back to target units.
    pub fn destandardize(&self, mean: f64, variance: f64) -> (f64, f64) {
        (mean * self.y_scale.1 + self.y_scale.0, variance * self.y_scale.1 * self.y_scale.1)
    }
}

/// Loads a CSV file and prepares a dataset; the target defaults to the last
/// column.
pub fn load_csv(path: &Path, target: Option<&str>, test_fraction: f64, seed: u64) -> Result<Dataset> {
    let t = read_csv(path)?;
    let target = match target {
        Some(t) => t.to_string(),
        None => t.header.last().cloned().unwrap_or_default(),
    };
    Dataset::from_table(&t, &target, test_fraction, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_toy_file() {
        let t = parse_csv("a,b,y\n1,2.5,-3\n# note\n4,5e-1,6\n7, 8 ,9\n").unwrap();
        assert_eq!(t.header, vec!["a", "b", "y"]);
        assert_eq!(t.rows, vec![vec![1.0, 2.5, -3.0], vec![4.0, 0.5, 6.0], vec![7.0, 8.0, 9.0]]);
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(parse_csv("a,b\n1,2\n3\n").is_err());
        assert!(parse_csv("a,b\n1,x\n").is_err());
        assert!(parse_csv("a,b\n1,nan\n").is_err());
        assert!(parse_csv("a,b\n").is_err());
        assert!(parse_csv("").is_err());
        let t = parse_csv("a,b\n1,2\n").unwrap();
        assert!(Dataset::from_table(&t, "c", 0.0, 0).is_err());
    }

    #[test]
    fn standardize_round_trip() {
        let m = DMatrix::from_fn(7, 3, |i, k| (i * 3 + k) as f64 * 1.7 - 4.0 + if k == 2 { 0.0 } else { 1.0 });
        let s = Standardizer::fit(&m);
        let back = s.invert(&s.apply(&m));
        assert!((back - m).abs().max() < 1e-12);
    }

    #[test]
    fn split_is_seeded_and_standardised() {
        let x = DMatrix::from_fn(50, 2, |i, k| (i as f64 * (k as f64 + 1.3)).sin() * 10.0 + 3.0);
        let y = DVector::from_fn(50, |i, _| i as f64);
        let a = Dataset::from_xy(&x, &y, 0.2, 9, true, vec!["a".into(), "b".into()], "y".into()).unwrap();
        let b = Dataset::from_xy(&x, &y, 0.2, 9, true, vec!["a".into(), "b".into()], "y".into()).unwrap();
        assert_eq!(a.test_idx, b.test_idx);
        assert_eq!(a.n_test(), 10);
        for c in a.x_train.column_iter() {
            let mu = c.mean();
            let sd = (c.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c.len() as f64).sqrt();
            assert!(mu.abs() < 1e-12 && (sd - 1.0).abs() < 1e-12);
        }
        let (m, _) = a.destandardize(a.y_test[0], 1.0);
        assert!((m - y[a.test_idx[0]]).abs() < 1e-12);
    }
}
