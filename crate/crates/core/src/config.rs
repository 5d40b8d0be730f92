//! One TOML file per experiment. The experiment grid is 16+ cells of
//! method x objective x order/weights; files keep it scriptable and
//! diffable where flag strings would not be.

use crate::corpus::PromptStyle;
use crate::model::{ModelConfig, TinyLm, VOCAB_SIZE};
use crate::objectives::{default_attach_points, Objective, Regime, Schedule, StageSpec, TrainOpts};
use serde::Deserialize;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("key {key}: {what}")]
    BadValue { key: &'static str, what: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

fn bad(key: &'static str, what: impl Into<String>) -> ConfigError {
    ConfigError::BadValue { key, what: what.into() }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub adapter: AdapterSection,
    pub training: TrainingSection,
    #[serde(default)]
    pub prompt: PromptSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub fusion: Option<FusionSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
}

impl Default for ModelSection {
    fn default() -> ModelSection {
        let base = ModelConfig::default();
        ModelSection {
            dim: base.dim,
            n_layers: base.n_layers,
            n_heads: base.n_heads,
            context_len: base.context_len,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSection {
    pub rank: usize,
    pub alpha: f64,
    pub rank2: usize,
    pub alpha2: f64,
    /// Attachment points, either full names ("layer0.attn.q", "lm_head")
    /// or per-layer shorthands ("attn.q", "mlp.fc1") expanded over every
    /// layer. Empty means all attention projections.
    #[serde(default)]
    pub attach: Vec<String>,
}

impl Default for AdapterSection {
    fn default() -> AdapterSection {
        let base = TrainOpts::default();
        AdapterSection {
            rank: base.rank,
            alpha: base.alpha,
            rank2: base.rank2,
            alpha2: base.alpha2,
            attach: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub regime: Regime,
    #[serde(default = "default_objective")]
    pub objective: String,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub stages: Vec<StageSection>,
}

fn default_objective() -> String {
    "sft".into()
}

fn default_beta() -> f64 {
    0.1
}

fn default_batch_size() -> usize {
    4
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    /// Dataset path, resolved relative to the experiment out-dir.
    pub data: String,
    pub steps: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSection {
    pub style: String,
}

impl Default for PromptSection {
    fn default() -> PromptSection {
        PromptSection { style: "compact".into() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub max_new_tokens: usize,
}

impl Default for EvalSection {
    fn default() -> EvalSection {
        EvalSection { max_new_tokens: 120 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSection {
    pub weights: Vec<f64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
        let config: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| ConfigError::Parse {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_str_for_tests(text: &str) -> Result<ExperimentConfig> {
        let config: ExperimentConfig = toml::from_str(text)
            .map_err(|e| ConfigError::Parse { path: "<inline>".into(), message: e.to_string() })?;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(bad("id", "must be nonempty"));
        }
        if self
            .id
            .chars()
            .any(|c| !(c.is_ascii_alphanumeric() || c == '-' || c == '_'))
        {
            return Err(bad("id", "use only ASCII letters, digits, '-', '_'"));
        }
        self.model_config().validate().map_err(|e| bad("model", e.to_string()))?;
        if self.adapter.rank == 0 {
            return Err(bad("adapter.rank", "must be positive"));
        }
        if !(self.adapter.alpha.is_finite() && self.adapter.alpha > 0.0) {
            return Err(bad("adapter.alpha", "must be a positive finite number"));
        }
        if !(self.adapter.alpha2.is_finite() && self.adapter.alpha2 > 0.0) {
            return Err(bad("adapter.alpha2", "must be a positive finite number"));
        }
        if self.training.regime == Regime::Hlora && self.adapter.rank2 >= self.adapter.rank {
            return Err(bad("adapter.rank2", "must be less than adapter.rank"));
        }
        match self.training.objective.as_str() {
            "sft" | "dpo" => {}
            other => return Err(bad("training.objective", format!("unknown objective {other:?}, expected \"sft\" or \"dpo\""))),
        }
        if !(self.training.beta.is_finite() && self.training.beta > 0.0) {
            return Err(bad("training.beta", "must be a positive finite number"));
        }
        if self.training.batch_size == 0 {
            return Err(bad("training.batch_size", "must be positive"));
        }
        for (i, stage) in self.training.stages.iter().enumerate() {
            if stage.data.is_empty() {
                return Err(bad("training.stages.data", format!("stage {i} names no dataset")));
            }
            if stage.steps == 0 {
                return Err(bad("training.stages.steps", format!("stage {i} has zero steps")));
            }
            if !(stage.lr.is_finite() && stage.lr > 0.0) {
                return Err(bad("training.stages.lr", format!("stage {i} needs a positive finite rate")));
            }
        }
        self.prompt_style()?;
        if self.eval.max_new_tokens == 0 {
            return Err(bad("eval.max_new_tokens", "must be positive"));
        }
        if let Some(fusion) = &self.fusion {
            if fusion.weights.is_empty() {
                return Err(bad("fusion.weights", "must list at least one weight"));
            }
            if fusion.weights.iter().any(|w| !w.is_finite()) {
                return Err(bad("fusion.weights", "weights must be finite"));
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            dim: self.model.dim,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            context_len: self.model.context_len,
            seed: self.seed,
        }
    }

    pub fn prompt_style(&self) -> Result<PromptStyle> {
        match self.prompt.style.as_str() {
            "compact" => Ok(PromptStyle::Compact),
            "instruct" => Ok(PromptStyle::Instruct),
            other => Err(bad("prompt.style", format!("unknown style {other:?}, expected \"compact\" or \"instruct\""))),
        }
    }

    pub fn objective(&self) -> Objective {
        match self.training.objective.as_str() {
            "dpo" => Objective::Dpo { beta: self.training.beta },
            _ => Objective::Sft,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            regime: self.training.regime,
            stages: self
                .training
                .stages
                .iter()
                .map(|s| StageSpec { dataset: s.data.clone(), steps: s.steps, lr: s.lr })
                .collect(),
        }
    }

    /// Expands `adapter.attach` against the model's real attachment points.
    /// A shorthand like "attn.q" selects that projection on every layer.
    pub fn attach_points(&self, model: &TinyLm) -> Result<Vec<String>> {
        if self.adapter.attach.is_empty() {
            return Ok(default_attach_points(model));
        }
        let all = model.attachment_points();
        let mut picked: Vec<String> = Vec::new();
        for entry in &self.adapter.attach {
            let suffix = format!(".{entry}");
            let matches: Vec<&String> =
                all.iter().filter(|p| *p == entry || p.ends_with(&suffix)).collect();
            if matches.is_empty() {
                return Err(bad(
                    "adapter.attach",
                    format!("{entry:?} matches no attachment point"),
                ));
            }
            for m in matches {
                if !picked.contains(m) {
                    picked.push(m.clone());
                }
            }
        }
        Ok(picked)
    }

    pub fn train_opts(&self, model: &TinyLm) -> Result<TrainOpts> {
        Ok(TrainOpts {
            rank: self.adapter.rank,
            alpha: self.adapter.alpha,
            rank2: self.adapter.rank2,
            alpha2: self.adapter.alpha2,
            attach_points: self.attach_points(model)?,
            batch_size: self.training.batch_size,
            objective: self.objective(),
            seed: self.seed,
        })
    }
}
