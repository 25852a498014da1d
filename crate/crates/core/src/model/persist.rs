//! Plain text model files.
//!
//! A model file stores everything needed to rebuild a fitted model from its
//! training data: the hyperparameters, the variant, the graph settings and the
//! inducing rows chosen for every expert. Keys the library does not know are
//! kept in `extra`, so callers can record where the training data lives.

use std::collections::BTreeMap;

use super::{CpoeModel, Variant};
use crate::config::KvMap;
use crate::error::{CpoeError, Result};
use crate::graph::{ExpertGraph, GraphConfig};
use crate::kernels::{fmt_f64, GpParams};

const FORMAT: &str = "cpoe-model-1";

#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub params: GpParams,
    pub variant: Variant,
    pub graph: GraphConfig,
    /// Global training rows of the inducing inputs, per expert position.
    pub inducing: Vec<Vec<usize>>,
    pub extra: BTreeMap<String, String>,
}

impl SavedModel {
    pub fn from_model(m: &CpoeModel) -> Self {
        let g = m.graph();
        SavedModel {
            params: m.params().clone(),
            variant: m.variant(),
            graph: GraphConfig::new(g.n_experts, g.gamma, g.correlation, g.seed),
            inducing: (0..g.n_experts).map(|j| g.inducing_rows(j)).collect(),
            extra: BTreeMap::new(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("format = {FORMAT}\n"));
        out.push_str(&format!("variant = {}\n", self.variant));
        out.push_str(&format!("graph.experts = {}\n", self.graph.n_experts));
        out.push_str(&format!("graph.gamma = {}\n", fmt_f64(self.graph.gamma)));
        out.push_str(&format!("graph.correlation = {}\n", self.graph.correlation));
        out.push_str(&format!("graph.seed = {}\n", self.graph.seed));
        for (k, v) in self.params.to_kv() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        let theta: Vec<String> = self.params.to_vec().iter().map(|v| fmt_f64(*v)).collect();
        out.push_str(&format!("theta = {}\n", theta.join(",")));
        for (j, rows) in self.inducing.iter().enumerate() {
            let r: Vec<String> = rows.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!("inducing.{j} = {}\n", r.join(",")));
        }
        for (k, v) in &self.extra {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let map = KvMap::parse(text)?;
        if map.str("format")? != FORMAT {
            return Err(map.err_at("format", &format!("expected '{FORMAT}'")));
        }
        let variant: Variant = map.str("variant")?.parse().map_err(|e: CpoeError| map.err_at("variant", &e.to_string()))?;
        let graph = GraphConfig::new(
            map.value("graph.experts")?,
            map.f64("graph.gamma")?,
            map.value("graph.correlation")?,
            map.value("graph.seed")?,
        );
        let shape = GpParams::from_kv(&map)?;
        let theta = map.f64_list("theta")?;
        let params = shape
            .with_vec(&theta)
            .map_err(|e| map.err_at("theta", &e.to_string()))?;
        if graph.n_experts == 0 || graph.n_experts > 1 << 24 {
            return Err(map.err_at("graph.experts", "expert count out of range"));
        }
        let mut inducing = Vec::with_capacity(graph.n_experts);
        for j in 0..graph.n_experts {
            inducing.push(map.usize_list(&format!("inducing.{j}"))?);
        }
        let known = |k: &str| {
            matches!(k, "format" | "variant" | "theta")
                || k.starts_with("graph.")
                || k.starts_with("kernel.")
                || k.starts_with("noise.")
                || k.starts_with("inducing.")
        };
        let extra = map
            .keys()
            .filter(|k| !known(k))
            .map(|k| (k.to_string(), map.get(k).unwrap().to_string()))
            .collect();
        Ok(SavedModel {
            params,
            variant,
            graph,
            inducing,
            extra,
        })
    }

    /// Checks that a rebuilt graph picked the recorded inducing rows.
    pub fn check_graph(&self, g: &ExpertGraph) -> Result<()> {
        let rebuilt: Vec<Vec<usize>> = (0..g.n_experts).map(|j| g.inducing_rows(j)).collect();
        if rebuilt != self.inducing {
            return Err(CpoeError::config(
                "rebuilt graph selects different inducing rows than the saved model",
            ));
        }
        Ok(())
    }
}
