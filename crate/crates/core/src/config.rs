//! Run configuration: one JSON document with `model`, `plan`, `data`,
//! `train` and `eval` sections. Every field has a default; unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, CuePolicy, CueSet, SampleSpec};
use crate::model::{LrSchedule, ModelConfig, ModelError, TrainOptions};
use crate::plan::{PlanKind, PlanSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSection {
    pub kind: PlanKind,
    /// Context tokens per sample.
    pub a: u64,
    /// Target context length.
    #[serde(rename = "L")]
    pub target_len: u64,
    /// Context length of the base model; the default scale is `L / L_pretrain`.
    #[serde(rename = "L_pretrain")]
    pub pretrain_len: u64,
    /// Interpolation scale; `null` means `max(1, L / L_pretrain)`.
    pub s: Option<f64>,
    pub pose_chunks: usize,
}

impl Default for PlanSection {
    fn default() -> Self {
        Self { kind: PlanKind::EndPrompt, a: 120, target_len: 1024, pretrain_len: 128, s: None, pose_chunks: 2 }
    }
}

impl PlanSection {
    pub fn scale(&self) -> f64 {
        self.s.unwrap_or((self.target_len as f64 / self.pretrain_len as f64).max(1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueSetName {
    /// Short stand-ins of at most 8 tokens.
    Desk,
    /// The full reference prompts.
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Byte corpus to window; `null` generates synthetic retrieval episodes.
    pub corpus: Option<PathBuf>,
    /// Number of samples to write (synthetic corpus only).
    pub samples: usize,
    pub prompt_weight: f64,
    pub context_weight: f64,
    pub cues: CueSetName,
    /// `null` samples a cue per sample; otherwise the id of a fixed cue.
    pub fixed_cue: Option<String>,
    /// Letters used for synthetic haystacks, keys and values.
    pub filler: String,
    /// Key/value pairs per synthetic episode.
    pub needles: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            corpus: None,
            samples: 256,
            prompt_weight: 0.1,
            context_weight: 1.0,
            cues: CueSetName::Desk,
            fixed_cue: None,
            filler: crate::eval::DEFAULT_FILLER.to_string(),
            needles: 2,
        }
    }
}

impl DataSection {
    pub fn cue_set(&self) -> CueSet {
        match self.cues {
            CueSetName::Desk => data::desk_cues(),
            CueSetName::Reference => data::default_cues(),
        }
    }

    pub fn filler_tokens(&self) -> Vec<u32> {
        self.filler.bytes().map(u32::from).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    /// Start from this checkpoint instead of a fresh initialization.
    pub init: Option<PathBuf>,
    pub threads: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { seed: 0, steps: 200, batch_size: 4, lr: 3e-4, warmup_steps: 20, init: None, threads: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    #[serde(rename = "T_eval")]
    pub t_eval: usize,
    pub tasks: usize,
    pub key_len: usize,
    pub value_len: usize,
    pub depth_fraction: f64,
    /// Row label in reports; defaults to the checkpoint file stem.
    pub model_name: Option<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { t_eval: 1024, tasks: 50, key_len: 2, value_len: 2, depth_fraction: 0.0, model_name: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub plan: PlanSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    /// The resolved snapshot with every default filled in.
    pub fn resolved(&self) -> serde_json::Value {
        let mut value = serde_json::to_value(self).expect("config serializes");
        value["plan"]["s"] = serde_json::json!(self.plan.scale());
        value
    }

    pub fn resolved_json(&self) -> String {
        serde_json::to_string_pretty(&self.resolved()).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.model.validate().map_err(|e: ModelError| ConfigError::Invalid(e.to_string()))?;
        if self.plan.pretrain_len == 0 {
            return bad("L_pretrain must be positive".into());
        }
        let s = self.plan.scale();
        if !(s.is_finite() && s >= 1.0) {
            return bad(format!("scale {s} must be at least 1"));
        }
        self.sample_spec().validate(&self.data.cue_set()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.train.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return bad(format!("learning rate {}", self.train.lr));
        }
        if self.eval.t_eval == 0 || self.eval.key_len == 0 || self.eval.value_len == 0 {
            return bad("eval lengths must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.eval.depth_fraction) {
            return bad(format!("depth_fraction {}", self.eval.depth_fraction));
        }
        let filler = self.data.filler_tokens();
        let mut sorted = filler.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != filler.len() || sorted.len() <= self.eval.key_len + self.eval.value_len {
            return bad("filler must hold distinct letters, more than key_len + value_len".into());
        }
        if self.data.needles == 0 || sorted.len() <= 4 * self.data.needles {
            return bad(format!("{} needles need more than {} filler letters", self.data.needles, 4 * self.data.needles));
        }
        Ok(())
    }

    pub fn sample_spec(&self) -> SampleSpec {
        SampleSpec {
            a: self.plan.a,
            target_len: self.plan.target_len,
            scale: self.plan.scale(),
            plan_kind: self.plan.kind,
            prompt_weight: self.data.prompt_weight,
            context_weight: self.data.context_weight,
            cue_policy: match &self.data.fixed_cue {
                Some(id) => CuePolicy::Fixed(id.clone()),
                None => CuePolicy::PerSample,
            },
            pose_chunks: self.plan.pose_chunks,
        }
    }

    /// Two-segment spec using the longest cue, for distance buckets.
    pub fn plan_spec(&self) -> PlanSpec {
        let cues = self.data.cue_set();
        let b = match &self.data.fixed_cue {
            Some(id) => cues.get(id).map_or(1, |c| c.tokens.len()),
            None => cues.max_len(),
        };
        PlanSpec { a: self.plan.a, b: b as u64, target_len: self.plan.target_len, scale: self.plan.scale() }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            schedule: LrSchedule { peak: self.train.lr, warmup_steps: self.train.warmup_steps },
            max_steps: self.train.steps,
            seed: self.train.seed,
            threads: self.train.threads,
            record_wall_clock: false,
        }
    }
}
