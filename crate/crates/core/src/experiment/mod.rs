//! Experiment configuration, orchestration and reporting.

pub mod formats;
mod pipeline;
pub mod report;
pub mod store;

pub use pipeline::{analyze_correlation, run_pipeline, BranchResult, EvalReport, Pipeline, SeedResult};
pub use report::{report_tables, ReportFiles};
pub use store::{content_key, ArtifactStore};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
#[cfg(test)]
use crate::error::Error;
use crate::inference::BeamConfig;
use crate::model::{ModelConfig, TrainConfig};
use crate::synthworld::{DurationMode, ToyLanguageSpec, TtsSystemSpec};
use crate::targetprep::{AsrConfig, DatasetMode};
use crate::unitizer::KMeansConfig;

/// Environment variable naming the artifact store root.
pub const STORE_ENV: &str = "S2UT_STORE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnitizerConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    pub n_init: usize,
    /// Train utterances per system pooled into the fit; 0 pools all of them.
    pub fit_utterances: usize,
}

impl Default for UnitizerConfig {
    fn default() -> Self {
        let k = KMeansConfig::default();
        Self {
            k: k.k,
            seed: k.seed,
            max_iters: k.max_iters,
            tol: k.tol,
            n_init: k.n_init,
            fit_utterances: 60,
        }
    }
}

impl UnitizerConfig {
    pub fn kmeans(&self) -> KMeansConfig {
        KMeansConfig {
            k: self.k,
            seed: self.seed,
            max_iters: self.max_iters,
            tol: self.tol,
            n_init: self.n_init,
        }
    }
}

/// One row group of the experiment matrix: a dataset mode trained once per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    #[serde(flatten)]
    pub mode: DatasetMode,
    pub seeds: Vec<u64>,
}

impl CellSpec {
    pub fn id(&self) -> String {
        format!("{}-{}", self.mode.name(), self.mode.systems().join("+"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub world: ToyLanguageSpec,
    pub systems: Vec<TtsSystemSpec>,
    pub unitizer: UnitizerConfig,
    pub asr: AsrConfig,
    /// `input_dim`, `units` and `branch_count` are filled in per cell.
    pub model: ModelConfig,
    /// `seed` is replaced by each cell seed.
    pub train: TrainConfig,
    pub decode: BeamConfig,
    pub cells: Vec<CellSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: ToyLanguageSpec::default(),
            systems: default_registry(),
            unitizer: UnitizerConfig::default(),
            asr: AsrConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: BeamConfig {
                max_len: 100,
                ..BeamConfig::default()
            },
            cells: default_cells(&["B", "E", "G"], &[1, 2, 3]),
        }
    }
}

fn system(
    id: &str,
    lexicon_seed: u64,
    duration_mode: DurationMode,
    speed_factor: f64,
    vocoder_id: &str,
    vocoder_noise_rate: f64,
    synthesis_error_rate: f64,
) -> TtsSystemSpec {
    TtsSystemSpec {
        system_id: id.into(),
        lexicon_seed,
        lexicon_agreement: 0.9,
        duration_mode,
        speed_factor,
        vocoder_id: vocoder_id.into(),
        vocoder_noise_rate,
        synthesis_error_rate,
    }
}

/// Simulated systems A–K: an autoregressive family (A–C) and a
/// non-autoregressive family (D–F) each with three vocoders, a direct
/// text-to-wave family (G), and speed variants of E (H, I) and G (J, K).
pub fn default_registry() -> Vec<TtsSystemSpec> {
    use DurationMode::{Deterministic as Det, Stochastic as Sto};
    vec![
        system("A", 102, Sto, 1.0, "pwg", 0.02, 0.15),
        system("B", 102, Sto, 1.0, "hfg", 0.01, 0.14),
        system("C", 102, Sto, 1.0, "smg", 0.015, 0.14),
        system("D", 236, Det, 1.0, "pwg", 0.02, 0.11),
        system("E", 236, Det, 1.0, "hfg", 0.01, 0.09),
        system("F", 236, Det, 1.0, "smg", 0.015, 0.10),
        system("G", 308, Det, 1.0, "text2wav", 0.01, 0.08),
        system("H", 236, Det, 0.95, "hfg", 0.01, 0.10),
        system("I", 236, Det, 1.05, "hfg", 0.01, 0.12),
        system("J", 308, Det, 0.95, "text2wav", 0.01, 0.09),
        system("K", 308, Det, 1.05, "text2wav", 0.01, 0.09),
    ]
}

/// Single-system cells for each system, then their combination and multitask cells.
pub fn default_cells(systems: &[&str], seeds: &[u64]) -> Vec<CellSpec> {
    let ids: Vec<String> = systems.iter().map(|s| s.to_string()).collect();
    let mut cells: Vec<CellSpec> = ids
        .iter()
        .map(|s| CellSpec {
            mode: DatasetMode::Single(s.clone()),
            seeds: seeds.to_vec(),
        })
        .collect();
    cells.push(CellSpec {
        mode: DatasetMode::Combined(ids.clone()),
        seeds: seeds.to_vec(),
    });
    cells.push(CellSpec {
        mode: DatasetMode::Multitask(ids),
        seeds: seeds.to_vec(),
    });
    cells
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(format!("cannot serialize config: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn system(&self, id: &str) -> Result<&TtsSystemSpec> {
        self.systems
            .iter()
            .find(|s| s.system_id == id)
            .ok_or_else(|| config_err(format!("unknown system `{id}`")))
    }

    /// Model configuration for a cell with `branches` decoder branches.
    pub fn model_config(&self, branches: usize) -> ModelConfig {
        ModelConfig {
            input_dim: self.world.feature_dim,
            units: self.unitizer.k,
            branch_count: branches,
            ..self.model.clone()
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        if self.systems.is_empty() {
            return Err(config_err("at least one system is required"));
        }
        let mut ids = BTreeSet::new();
        for s in &self.systems {
            s.validate()?;
            if !ids.insert(s.system_id.as_str()) {
                return Err(config_err(format!("duplicate system `{}`", s.system_id)));
            }
            if s.system_id.contains(['+', ',', '/']) {
                return Err(config_err(format!("system id `{}` may not contain + , or /", s.system_id)));
            }
        }
        if self.unitizer.k < 2 {
            return Err(config_err("unitizer.k must be at least 2"));
        }
        self.model_config(1).validate()?;
        self.train.validate()?;
        if self.decode.beam == 0 || self.decode.max_len == 0 {
            return Err(config_err("decode.beam and decode.max_len must be at least 1"));
        }
        let mut cell_ids = BTreeSet::new();
        for cell in &self.cells {
            let systems = cell.mode.systems();
            if systems.is_empty() {
                return Err(config_err(format!("cell {} lists no systems", cell.id())));
            }
            for s in &systems {
                self.system(s)?;
            }
            if systems.iter().collect::<BTreeSet<_>>().len() != systems.len() {
                return Err(config_err(format!("cell {} repeats a system", cell.id())));
            }
            if cell.seeds.is_empty() {
                return Err(config_err(format!("cell {} needs at least one seed", cell.id())));
            }
            if !cell_ids.insert(cell.id()) {
                return Err(config_err(format!("duplicate cell {}", cell.id())));
            }
        }
        Ok(())
    }
}
