//! Experiment configuration in flat `key = value` text.
//!
//! ```text
//! output = out
//! seeds = 0,1,2
//! data.path = train.csv          # or: data.synthetic = true, data.n, data.d
//! data.target = y
//! data.test_fraction = 0.1
//! kernel.file = kernel.txt       # or inline kernel.* and noise.variance keys
//! methods = full,sgp,minvar,gpoe,gpoe_sharp,cpoe
//! graph.experts = 16
//! graph.gamma = 0.5
//! cpoe.correlation = 1,2,4
//! cpoe.variant = fitc
//! sgp.inducing = 128,256
//! train.mode = none              # deterministic | stochastic
//! prior.log_noise = -4, 1        # log-normal prior (nu, lambda) by parameter name
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use cpoe::config::KvMap;
use cpoe::kernels::GpParams;
use cpoe::model::Variant;
use cpoe::training::{ObjectiveKind, OptimMode, OptimizerConfig};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Csv {
        path: PathBuf,
        target: Option<String>,
    },
    /// GP sample under the experiment kernel on the unit cube.
    Synthetic { n: usize, d: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelSource {
    Inline(GpParams),
    File(PathBuf),
}

impl KernelSource {
    pub fn resolve(&self) -> Result<GpParams> {
        match self {
            KernelSource::Inline(p) => Ok(p.clone()),
            KernelSource::File(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                cpoe::kernels::parse_kernel_config(&text).with_context(|| format!("parsing {}", path.display()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    FullGp,
    Sgp { inducing: usize },
    MinVar,
    Gpoe,
    GpoeSharpened,
    Cpoe { correlation: usize },
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::FullGp => f.write_str("full"),
            Method::Sgp { inducing } => write!(f, "sgp_m{inducing}"),
            Method::MinVar => f.write_str("minvar"),
            Method::Gpoe => f.write_str("gpoe"),
            Method::GpoeSharpened => f.write_str("gpoe_sharp"),
            Method::Cpoe { correlation } => write!(f, "cpoe_c{correlation}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub test_fraction: f64,
    pub kernel: KernelSource,
    pub methods: Vec<Method>,
    pub experts: usize,
    pub gamma: f64,
    pub variant: Variant,
    pub sharpening: Option<f64>,
    pub graph_seed: Option<u64>,
    pub train: Option<OptimizerConfig>,
    /// `(parameter name, nu, lambda)`.
    pub priors: Vec<(String, f64, f64)>,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    pub noisy: bool,
    /// Hex digest of the canonical configuration text.
    pub hash: String,
}

fn parse_list<T: std::str::FromStr>(map: &KvMap, key: &str, default: Vec<T>) -> Result<Vec<T>> {
    let Some(raw) = map.get(key) else {
        return Ok(default);
    };
    raw.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| anyhow!(map.err_at(key, &format!("cannot parse '{}'", s.trim())))))
        .collect()
}

impl ExperimentConfig {
    /// Parses the config text; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let map = KvMap::parse(text)?;
        let known_prefix = ["data.", "kernel.", "noise.", "graph.", "cpoe.", "sgp.", "train.", "prior.", "predict."];
        for k in map.keys() {
            if !matches!(k, "methods" | "seeds" | "output" | "name") && !known_prefix.iter().any(|p| k.starts_with(p)) {
                bail!(map.err_at(k, "unknown key"));
            }
        }
        let data = if map.value_or("data.synthetic", false)? {
            let n: usize = map.value("data.n")?;
            let d: usize = map.value_or("data.d", 2)?;
            if n < 2 || d == 0 {
                bail!(map.err_at("data.n", "synthetic data needs n >= 2 and d >= 1"));
            }
            DataSource::Synthetic { n, d }
        } else {
            DataSource::Csv {
                path: base.join(map.str("data.path")?),
                target: map.get("data.target").map(str::to_string),
            }
        };
        let test_fraction = map.f64_or("data.test_fraction", 0.1)?;
        if !(0.0..1.0).contains(&test_fraction) {
            bail!(map.err_at("data.test_fraction", "must lie in [0, 1)"));
        }
        let kernel = match map.get("kernel.file") {
            Some(f) => KernelSource::File(base.join(f)),
            None => KernelSource::Inline(GpParams::from_kv(&map)?),
        };
        let experts = map.value_or("graph.experts", 8usize)?;
        let gamma = map.f64_or("graph.gamma", 0.5)?;
        let correlations = parse_list(&map, "cpoe.correlation", vec![2usize])?;
        let inducing = parse_list(&map, "sgp.inducing", vec![128usize])?;
        if correlations.iter().chain(&inducing).any(|&v| v == 0) {
            bail!("correlation and inducing counts must be positive");
        }
        let names = parse_list(&map, "methods", vec!["cpoe".to_string()])?;
        let mut methods = Vec::new();
        for name in &names {
            match name.to_ascii_lowercase().as_str() {
                "full" | "fullgp" => methods.push(Method::FullGp),
                "sgp" => methods.extend(inducing.iter().map(|&m| Method::Sgp { inducing: m })),
                "minvar" => methods.push(Method::MinVar),
                "gpoe" => methods.push(Method::Gpoe),
                "gpoe_sharp" => methods.push(Method::GpoeSharpened),
                "cpoe" => methods.extend(correlations.iter().map(|&c| Method::Cpoe { correlation: c })),
                other => bail!(map.err_at("methods", &format!("unknown method '{other}'"))),
            }
        }
        if methods.is_empty() {
            bail!(map.err_at("methods", "no methods"));
        }
        let variant: Variant = map.value_or("cpoe.variant", Variant::Fitc)?;
        let sharpening = match map.get("cpoe.sharpening") {
            Some(_) => Some(map.f64("cpoe.sharpening")?),
            None => None,
        };
        let graph_seed = match map.get("graph.seed") {
            Some(_) => Some(map.value("graph.seed")?),
            None => None,
        };
        let train = match map.get("train.mode").unwrap_or("none") {
            "none" => None,
            mode => {
                let mut cfg = match mode {
                    "deterministic" => OptimizerConfig::deterministic(),
                    "stochastic" => OptimizerConfig::stochastic(0),
                    _ => bail!(map.err_at("train.mode", "expected none, deterministic or stochastic")),
                };
                cfg.objective = match map.get("train.objective").unwrap_or("lml") {
                    "lml" => ObjectiveKind::Lml,
                    "map" => ObjectiveKind::Map,
                    _ => bail!(map.err_at("train.objective", "expected lml or map")),
                };
                cfg.learning_rate = map.f64_or("train.learning_rate", cfg.learning_rate)?;
                cfg.max_epochs = map.value_or("train.max_epochs", cfg.max_epochs)?;
                cfg.tolerance = map.f64_or("train.tolerance", cfg.tolerance)?;
                cfg.validate()?;
                debug_assert!(matches!(cfg.mode, OptimMode::Deterministic | OptimMode::Stochastic));
                Some(cfg)
            }
        };
        let mut priors = Vec::new();
        for k in map.keys().filter(|k| k.starts_with("prior.")) {
            let v = map.f64_list(k)?;
            if v.len() != 2 || !(v[1] > 0.0) {
                bail!(map.err_at(k, "expected 'nu, lambda' with lambda > 0"));
            }
            priors.push((k["prior.".len()..].to_string(), v[0], v[1]));
        }
        let seeds = parse_list(&map, "seeds", vec![0u64])?;
        if seeds.is_empty() {
            bail!(map.err_at("seeds", "no seeds"));
        }
        let output = base.join(map.get("output").unwrap_or("results"));
        let noisy = map.value_or("predict.noisy", false)?;
        let hash = hex::encode(Sha256::digest(map.to_text().as_bytes()))[..16].to_string();
        Ok(ExperimentConfig {
            data,
            test_fraction,
            kernel,
            methods,
            experts,
            gamma,
            variant,
            sharpening,
            graph_seed,
            train,
            priors,
            seeds,
            output,
            noisy,
            hash,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).with_context(|| format!("parsing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "seeds = 1,2\ndata.synthetic = true\ndata.n = 64\nkernel.components = se\nkernel.0.lengthscale = 0.3\nnoise.variance = 0.01\nmethods = full,cpoe,sgp\ncpoe.correlation = 1,3\nsgp.inducing = 16\n";

    #[test]
    fn parses_and_expands_methods() {
        let c = ExperimentConfig::parse(TEXT, Path::new("/tmp")).unwrap();
        assert_eq!(
            c.methods,
            vec![
                Method::FullGp,
                Method::Cpoe { correlation: 1 },
                Method::Cpoe { correlation: 3 },
                Method::Sgp { inducing: 16 }
            ]
        );
        assert_eq!(c.seeds, vec![1, 2]);
        assert_eq!(c.data, DataSource::Synthetic { n: 64, d: 2 });
        assert_eq!(c.output, Path::new("/tmp/results"));
        assert!(c.train.is_none());
    }

    #[test]
    fn hash_ignores_layout_but_not_values() {
        let a = ExperimentConfig::parse(TEXT, Path::new(".")).unwrap();
        let shuffled: String = TEXT.lines().rev().map(|l| format!("{l}   # c\n")).collect();
        let b = ExperimentConfig::parse(&shuffled, Path::new(".")).unwrap();
        assert_eq!(a.hash, b.hash);
        let c = ExperimentConfig::parse(&TEXT.replace("0.3", "0.4"), Path::new(".")).unwrap();
        assert_ne!(a.hash, c.hash);
    }

    #[test]
    fn rejects_bad_configs() {
        for bad in [
            "data.path = a.csv\nmethods = nope\nkernel.components = se\n",
            "data.path = a.csv\nbogus = 1\nkernel.components = se\n",
            "data.path = a.csv\ntrain.mode = fast\nkernel.components = se\n",
            "data.path = a.csv\nprior.log_noise = 1\nkernel.components = se\n",
            "data.synthetic = true\nkernel.components = se\n",
            "data.path = a.csv\ndata.test_fraction = 1.5\nkernel.components = se\n",
        ] {
            assert!(ExperimentConfig::parse(bad, Path::new(".")).is_err(), "{bad}");
        }
    }
}
