use std::path::Path;

use clap::Args;
use glyco::experiment::ExperimentConfig;

use crate::error::CliError;

/// Flags that override values from the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML file with experiment settings; missing keys keep their defaults
    #[arg(long, global = true)]
    pub config: Option<std::path::PathBuf>,
    /// Master seed; also seeds the generator
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Class weight on the more aggressive arm
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Fraction of matched pairs kept after discarding the least similar
    #[arg(long, global = true)]
    pub keep_fraction: Option<f64>,
    /// Trees per regression forest
    #[arg(long, global = true)]
    pub forest_trees: Option<usize>,
}

pub fn read_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        detail: e.message().to_string(),
    })
}

impl Overrides {
    pub fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => read_config(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.generator.seed = seed;
        }
        if let Some(alpha) = self.alpha {
            if alpha.is_nan() || alpha < 1.0 {
                return Err(CliError::Argument(format!(
                    "--alpha must be >= 1, got {alpha}"
                )));
            }
            cfg.policy.alpha = alpha;
        }
        if let Some(k) = self.keep_fraction {
            if !(k > 0.0 && k <= 1.0) {
                return Err(CliError::Argument(format!(
                    "--keep-fraction must be in (0, 1], got {k}"
                )));
            }
            cfg.debias.keep_fraction = k;
        }
        if let Some(t) = self.forest_trees {
            if t == 0 {
                return Err(CliError::Argument("--forest-trees must be positive".into()));
            }
            cfg.forest.tree_count = t;
            cfg.gtm.forest.tree_count = t;
        }
        Ok(cfg)
    }
}
