use std::path::{Path, PathBuf};

use anyhow::Context;
use flowlens_core::attribution::ExplainConfig;
use flowlens_core::pipeline::ModelKind;
use flowlens_service::ServiceConfig;
use serde::{Deserialize, Serialize};

/// Defaults loaded with `--config`; every key has a matching flag.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolConfig {
    pub grid: GridConfig,
    pub ingest: IngestConfig,
    pub train: TrainConfig,
    pub regions: RegionsConfig,
    pub explain: ExplainDefaults,
    pub synth: SynthConfig,
    pub service: ServiceConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub rows: Option<usize>,
    pub cols: Option<usize>,
    pub slice_seconds: Option<f64>,
    pub epoch_origin: Option<f64>,
    /// `[lon_min, lat_min, lon_max, lat_max]`.
    pub bbox: Option<[f64; 4]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub input: Option<PathBuf>,
    pub delimiter: Option<char>,
    pub has_header: Option<bool>,
    /// Column positions of id, timestamp, lon, lat.
    pub columns: Option<[usize; 4]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: Option<ModelKind>,
    pub lambda: Option<f64>,
    pub radius: Option<usize>,
    pub history: Option<usize>,
    pub intercept: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionsConfig {
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub kmin: Option<usize>,
    pub kmax: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainDefaults {
    pub exact_max_players: Option<usize>,
    pub nsamples: Option<usize>,
    pub seed: Option<u64>,
    pub top_k: Option<usize>,
}

impl ExplainDefaults {
    pub fn resolve(&self, nsamples: Option<usize>, seed: Option<u64>, exact_max: Option<usize>) -> ExplainConfig {
        let d = ExplainConfig::default();
        ExplainConfig {
            exact_max_players: exact_max.or(self.exact_max_players).unwrap_or(d.exact_max_players),
            nsamples: nsamples.or(self.nsamples).unwrap_or(d.nsamples),
            seed: seed.or(self.seed).unwrap_or(d.seed),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub scenario: Option<PathBuf>,
    pub preset: Option<String>,
    pub seed: Option<u64>,
}

impl ToolConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_file_parses() {
        let c: ToolConfig = toml::from_str(
            r#"
            [grid]
            rows = 12
            cols = 10
            bbox = [0.0, 0.0, 1.0, 1.0]
            [train]
            model = "havg"
            [regions]
            k = 21
            [explain]
            nsamples = 2048
            [service]
            port = 9100
            "#,
        )
        .unwrap();
        assert_eq!(c.grid.rows, Some(12));
        assert_eq!(c.train.model, Some(ModelKind::Havg));
        assert_eq!(c.regions.k, Some(21));
        assert_eq!(c.service.port, 9100);
        let e = c.explain.resolve(None, Some(3), None);
        assert_eq!((e.nsamples, e.seed, e.exact_max_players), (2048, 3, 12));
        assert!(toml::from_str::<ToolConfig>("[grid]\nrowz = 1\n").is_err());
    }
}
