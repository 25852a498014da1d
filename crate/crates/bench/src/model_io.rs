//! Saved CPoE models and batch prediction from CSV.
//!
//! A model file holds the hyperparameters, the graph configuration and the
//! inducing rows, plus `data.*` keys that point at the standardised training
//! table written next to it and record the standardisation.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use cpoe::graph::ExpertGraph;
use cpoe::model::{CpoeModel, SavedModel};
use cpoe::prediction::PredictConfig;
use nalgebra::DMatrix;

use crate::dataset::{parse_csv, read_csv, write_csv, Dataset, Standardizer, Table};

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",")
}

fn split_f64(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| anyhow!("cannot parse '{}'", t.trim())))
        .collect()
}

/// Writes `saved` with the `data.*` keys describing `data`; `train_file` is
/// the training table relative to the model file.
pub fn save_model(
    path: &Path,
    mut saved: SavedModel,
    data: &Dataset,
    train_file: &str,
    sharpening: Option<f64>,
) -> Result<()> {
    let e = &mut saved.extra;
    e.insert("data.path".into(), train_file.into());
    e.insert("data.inputs".into(), data.input_names.join(","));
    e.insert("data.target".into(), data.target_name.clone());
    e.insert("data.x_mean".into(), join(&data.x_scale.mean));
    e.insert("data.x_std".into(), join(&data.x_scale.std));
    e.insert("data.y_mean".into(), format!("{:e}", data.y_scale.0));
    e.insert("data.y_std".into(), format!("{:e}", data.y_scale.1));
    if let Some(z) = sharpening {
        e.insert("predict.sharpening".into(), format!("{z:e}"));
    }
    std::fs::write(path, saved.to_text()).with_context(|| format!("writing {}", path.display()))
}

/// A refitted model with the scaling needed to predict in data units.
pub struct LoadedModel {
    pub model: CpoeModel,
    pub input_names: Vec<String>,
    pub target_name: String,
    pub x_scale: Standardizer,
    pub y_scale: (f64, f64),
    pub sharpening: Option<f64>,
}

/// Metadata of a model file, before the training data is touched.
#[derive(Debug, Clone)]
pub struct ModelFile {
    pub saved: SavedModel,
    pub train_path: PathBuf,
    pub input_names: Vec<String>,
    pub target_name: String,
    pub x_scale: Standardizer,
    pub y_scale: (f64, f64),
    pub sharpening: Option<f64>,
}

/// Parses a model file; relative data paths are resolved against `base`.
pub fn parse_model_file(text: &str, base: &Path) -> Result<ModelFile> {
    let saved = SavedModel::from_text(text)?;
    let get = |k: &str| saved.extra.get(k).map(String::as_str).ok_or_else(|| anyhow!("model file lacks '{k}'"));
    let input_names: Vec<String> = get("data.inputs")?.split(',').map(|s| s.trim().to_string()).collect();
    let x_scale = Standardizer {
        mean: split_f64(get("data.x_mean")?)?,
        std: split_f64(get("data.x_std")?)?,
    };
    let d = input_names.len();
    if x_scale.mean.len() != d || x_scale.std.len() != d {
        bail!("data.x_mean and data.x_std need {d} entries");
    }
    if x_scale.std.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        bail!("data.x_std entries must be positive");
    }
    let y_mean: f64 = get("data.y_mean")?.trim().parse().map_err(|_| anyhow!("bad data.y_mean"))?;
    let y_std: f64 = get("data.y_std")?.trim().parse().map_err(|_| anyhow!("bad data.y_std"))?;
    if !y_mean.is_finite() || !(y_std > 0.0 && y_std.is_finite()) {
        bail!("data.y_mean must be finite and data.y_std positive");
    }
    let sharpening = match saved.extra.get("predict.sharpening") {
        Some(s) => Some(s.trim().parse().map_err(|_| anyhow!("bad predict.sharpening"))?),
        None => None,
    };
    Ok(ModelFile {
        train_path: base.join(get("data.path")?),
        target_name: get("data.target")?.to_string(),
        input_names,
        x_scale,
        y_scale: (y_mean, y_std),
        sharpening,
        saved,
    })
}

/// Reads a model file and refits the model on its training table.
pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let f = parse_model_file(&text, path.parent().unwrap_or(Path::new(".")))
        .with_context(|| format!("parsing {}", path.display()))?;
    let table = read_csv(&f.train_path)?;
    let (x, y) = table.split_target(table.column_index(&f.target_name)?);
    if x.ncols() != f.input_names.len() {
        bail!("training table has {} inputs, the model expects {}", x.ncols(), f.input_names.len());
    }
    let graph = ExpertGraph::build(&x, &f.saved.graph)?;
    f.saved.check_graph(&graph)?;
    let model = CpoeModel::fit(&x, &y, graph, &f.saved.params, f.saved.variant)?;
    Ok(LoadedModel {
        model,
        input_names: f.input_names,
        target_name: f.target_name,
        x_scale: f.x_scale,
        y_scale: f.y_scale,
        sharpening: f.sharpening,
    })
}

impl LoadedModel {
    /// Picks the model inputs from `t` by column name.
    pub fn inputs(&self, t: &Table) -> Result<DMatrix<f64>> {
        let cols = self.input_names.iter().map(|n| t.column_index(n)).collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_fn(t.rows.len(), cols.len(), |i, k| t.rows[i][cols[k]]))
    }

    /// Predictive means and variances in data units.
    pub fn predict(&self, x: &DMatrix<f64>, noisy: bool) -> Result<Vec<(f64, f64)>> {
        let xs = self.x_scale.apply(x);
        let cfg = PredictConfig {
            sharpening: self.sharpening,
            noisy,
        };
        let (m, s) = self.y_scale;
        Ok(self
            .model
            .predict(&xs, &cfg)?
            .into_iter()
            .map(|p| (p.mean * s + m, p.variance * s * s))
            .collect())
    }
}

/// Predicts every row of the CSV text `input` and writes the inputs with
/// `mean` and `variance` columns to `output` (stdout when `None`).
pub fn predict_csv(model: &LoadedModel, input: &str, output: Option<&Path>, noisy: bool) -> Result<()> {
    let t = parse_csv(input)?;
    let x = model.inputs(&t)?;
    let preds = model.predict(&x, noisy)?;
    let mut header = model.input_names.clone();
    header.extend(["mean".to_string(), "variance".to_string()]);
    let rows = preds.into_iter().enumerate().map(|(i, (m, v))| {
        let mut r: Vec<f64> = x.row(i).iter().copied().collect();
        r.extend([m, v]);
        r
    });
    write_csv(output, &header, rows)
}
