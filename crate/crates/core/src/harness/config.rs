use std::path::PathBuf;
use std::str::FromStr;

use crate::adablending::{BlendConfig, Fusion};
use crate::error::{AsiError, Result};

/// Every free parameter of a synthetic run.
///
/// Each field is addressable by a flat key through [`ExperimentConfig::set`];
/// the key names are listed in [`ExperimentConfig::KEYS`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub heads: usize,
    pub head_dim: usize,
    /// Flattened spatial positions `m`.
    pub positions: usize,
    /// Prompt tokens `L`, shared by the content and style prompts.
    pub tokens: usize,
    pub timesteps: usize,
    pub layers_per_step: usize,
    pub blend: BlendConfig,
    /// Scale of the seeded offset added to the content prompt to form the style prompt.
    pub perturbation: f64,
    pub apply_asi: bool,
    /// Output directory; `None` disables file output.
    pub dump_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            heads: 8,
            head_dim: 8,
            positions: 16,
            tokens: 4,
            timesteps: 50,
            layers_per_step: 1,
            blend: BlendConfig::default(),
            perturbation: 1.0,
            apply_asi: true,
            dump_dir: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| AsiError::config(key, format!("cannot parse `{value}`: {e}")))
}

impl ExperimentConfig {
    pub const KEYS: [&'static str; 14] = [
        "seed",
        "heads",
        "head_dim",
        "positions",
        "tokens",
        "timesteps",
        "layers_per_step",
        "n",
        "alpha",
        "eps",
        "perturbation",
        "apply_asi",
        "dump_dir",
        "fusion",
    ];

    /// Sets one field from its textual form. Does not validate cross-field
    /// constraints; call [`ExperimentConfig::validate`] once all keys are set.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "seed" => self.seed = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "head_dim" => self.head_dim = parse(key, value)?,
            "positions" => self.positions = parse(key, value)?,
            "tokens" => self.tokens = parse(key, value)?,
            "timesteps" | "T" => self.timesteps = parse(key, value)?,
            "layers_per_step" => self.layers_per_step = parse(key, value)?,
            "n" => self.blend.n = parse(key, value)?,
            "alpha" => self.blend.alpha = parse(key, value)?,
            "eps" => self.blend.eps = parse(key, value)?,
            "perturbation" => self.perturbation = parse(key, value)?,
            "apply_asi" => self.apply_asi = parse(key, value)?,
            "fusion" => self.blend.fusion = value.parse::<Fusion>()?,
            "dump_dir" => {
                self.dump_dir = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            other => return Err(AsiError::config(other, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("heads", self.heads, 1),
            ("head_dim", self.head_dim, 1),
            ("positions", self.positions, 2),
            ("tokens", self.tokens, 1),
            ("timesteps", self.timesteps, 1),
            ("layers_per_step", self.layers_per_step, 1),
        ];
        for (key, value, min) in counts {
            if value < min {
                return Err(AsiError::config(key, format!("must be at least {min}, got {value}")));
            }
        }
        self.blend.validate(self.heads)?;
        if !(self.perturbation.is_finite() && self.perturbation >= 0.0) {
            return Err(AsiError::config(
                "perturbation",
                format!("must be finite and non-negative, got {}", self.perturbation),
            ));
        }
        Ok(())
    }

    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Canonical `key = value` rendering, one key per line in [`Self::KEYS`] order.
    pub fn to_config_string(&self) -> String {
        let dump = self
            .dump_dir
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        let values = [
            self.seed.to_string(),
            self.heads.to_string(),
            self.head_dim.to_string(),
            self.positions.to_string(),
            self.tokens.to_string(),
            self.timesteps.to_string(),
            self.layers_per_step.to_string(),
            self.blend.n.to_string(),
            self.blend.alpha.to_string(),
            self.blend.eps.to_string(),
            self.perturbation.to_string(),
            self.apply_asi.to_string(),
            dump,
            self.blend.fusion.as_str().to_string(),
        ];
        Self::KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
