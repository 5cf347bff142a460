use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{ModelParams, ScheduleParams, ToySetup, DEFAULT_BIAS_WEIGHT};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::importance::ImportanceConfig;

pub const DEFAULT_OUTPUT_DIR: &str = "cdg-out";

pub const DEFAULT_PROMPTS: [&str; 8] = [
    "a man is cooking minecraft style",
    "a red fox sitting in fresh snow",
    "two sailboats on a calm lake at dawn",
    "an astronaut riding a horse",
    "a bowl of ramen with chopsticks",
    "an old clock tower in the rain",
    "a watercolor painting of a lighthouse",
    "a corgi wearing sunglasses on the beach",
];

/// One JSON document drives every command. Missing fields take defaults, so
/// `{}` is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderParams,
    pub model: ModelParams,
    pub schedule: ScheduleParams,
    pub guidance: GuidanceConfig,
    pub importance: ImportanceConfig,
    pub attention_bias_weight: f64,
    pub prompts: Vec<String>,
    /// One prompt per non-empty line; relative paths resolve against the
    /// config file's directory.
    pub prompts_file: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Geometry subspace dimension; energy-based default when absent.
    pub subspace_dim: Option<usize>,
    /// R_deg values for `sweep`; 0.0, 0.1, ..., 2.0 when absent.
    pub r_deg_grid: Option<Vec<f64>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            encoder: EncoderParams::default(),
            model: ModelParams::default(),
            schedule: ScheduleParams::default(),
            guidance: GuidanceConfig::default(),
            importance: ImportanceConfig::default(),
            attention_bias_weight: DEFAULT_BIAS_WEIGHT,
            prompts: Vec::new(),
            prompts_file: None,
            output_dir: None,
            subspace_dim: None,
            r_deg_grid: None,
        }
    }
}

pub fn default_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 10.0).collect()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("cannot parse config {}: {e}", path.display())))?;
        if let Some(file) = &cfg.prompts_file {
            if file.is_relative() {
                let base = path.parent().unwrap_or_else(|| Path::new("."));
                cfg.prompts_file = Some(base.join(file));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.guidance.validate()?;
        if !self.attention_bias_weight.is_finite() {
            return Err(Error::Config("attention_bias_weight must be finite".into()));
        }
        if self.subspace_dim == Some(0) {
            return Err(Error::Config("subspace_dim must be at least 1".into()));
        }
        if let Some(grid) = &self.r_deg_grid {
            if grid.is_empty() {
                return Err(Error::Config("r_deg_grid is empty".into()));
            }
            if let Some(&bad) = grid.iter().find(|r| !(0.0..=2.0).contains(*r)) {
                return Err(Error::InvalidRatio(bad));
            }
        }
        if let Some(file) = &self.prompts_file {
            if !file.is_file() {
                return Err(Error::Config(format!("prompts_file {} does not exist", file.display())));
            }
        }
        Ok(())
    }

    pub fn setup(&self) -> ToySetup {
        ToySetup {
            encoder: self.encoder,
            model: self.model,
            attention_bias_weight: self.attention_bias_weight,
            importance: self.importance,
        }
    }

    /// Inline prompts, then the prompts file; the built-in list when both are
    /// empty.
    pub fn resolved_prompts(&self) -> Result<Vec<String>> {
        let mut prompts = self.prompts.clone();
        if let Some(file) = &self.prompts_file {
            let text = fs::read_to_string(file)
                .map_err(|e| Error::Config(format!("cannot read prompts file {}: {e}", file.display())))?;
            prompts.extend(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from));
        }
        if prompts.is_empty() {
            prompts = DEFAULT_PROMPTS.iter().map(|p| p.to_string()).collect();
        }
        Ok(prompts)
    }

    pub fn grid(&self) -> Vec<f64> {
        self.r_deg_grid.clone().unwrap_or_else(default_grid)
    }
}
