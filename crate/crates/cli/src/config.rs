//! Run configuration: one TOML file drives data synthesis, training, and
//! the comparison grids. Unknown keys are rejected, and every command
//! serializes the resolved configuration back into its output directory so
//! runs are replayable from the artifacts alone.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use mutualseq_core::augment::{SamplingSchedule, SpecAugmentConfig};
use mutualseq_core::data::SyntheticTaskConfig;
use mutualseq_core::model::ModelConfig;
use mutualseq_core::objectives::ObjectiveConfig;
use mutualseq_core::trainer::{AdamConfig, SelectionMode, TrainerConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub frames_per_token: usize,
    pub noise_std: f64,
    pub len_min: usize,
    pub len_max: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub seed: u64,
    /// How many disjoint test splits to synthesize (columns of `compare`).
    pub test_splits: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        let d = SyntheticTaskConfig::default();
        TaskSection {
            vocab_size: d.vocab_size,
            feature_dim: d.feature_dim,
            frames_per_token: d.frames_per_token,
            noise_std: d.noise_std,
            len_min: d.len_min,
            len_max: d.len_max,
            train_size: d.train_size,
            valid_size: d.valid_size,
            test_size: d.test_size,
            seed: d.seed,
            test_splits: 1,
        }
    }
}

impl TaskSection {
    pub fn to_core(&self) -> SyntheticTaskConfig {
        SyntheticTaskConfig {
            vocab_size: self.vocab_size,
            feature_dim: self.feature_dim,
            frames_per_token: self.frames_per_token,
            noise_std: self.noise_std,
            len_min: self.len_min,
            len_max: self.len_max,
            train_size: self.train_size,
            valid_size: self.valid_size,
            test_size: self.test_size,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub num_encoder_blocks: usize,
    pub num_decoder_blocks: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub dropout_rate: f64,
    pub max_positions: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            num_encoder_blocks: 1,
            num_decoder_blocks: 1,
            model_dim: 32,
            ffn_dim: 64,
            num_heads: 2,
            dropout_rate: 0.1,
            max_positions: 512,
        }
    }
}

impl ModelSection {
    /// Bind the task's vocabulary and feature dimension into a full model
    /// config (vocabulary gains the three special tokens implicitly; the
    /// task's vocab_size already includes them).
    pub fn to_core(&self, task: &TaskSection) -> ModelConfig {
        ModelConfig {
            num_encoder_blocks: self.num_encoder_blocks,
            num_decoder_blocks: self.num_decoder_blocks,
            model_dim: self.model_dim,
            ffn_dim: self.ffn_dim,
            num_heads: self.num_heads,
            vocab_size: task.vocab_size,
            feature_dim: task.feature_dim,
            dropout_rate: self.dropout_rate,
            max_positions: self.max_positions,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveSection {
    pub alpha: f64,
    pub lambda: f64,
    pub label_smoothing: bool,
    pub scheduled_sampling: bool,
    pub spec_augment: bool,
    /// Distillation weight; requires `teacher`.
    pub kd_weight: Option<f64>,
    /// Teacher checkpoint path for distillation.
    pub teacher: Option<PathBuf>,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        ObjectiveSection {
            alpha: 0.1,
            lambda: 0.4,
            label_smoothing: false,
            scheduled_sampling: false,
            spec_augment: false,
            kd_weight: None,
            teacher: None,
        }
    }
}

impl ObjectiveSection {
    pub fn to_core(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            alpha: self.alpha,
            lambda: self.lambda,
            label_smoothing: self.label_smoothing,
            scheduled_sampling: self.scheduled_sampling,
            spec_augment: self.spec_augment,
            kd_weight: self.kd_weight,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub target_probability: f64,
    pub ramp_epochs: usize,
}

impl Default for SamplingSection {
    fn default() -> Self {
        let d = SamplingSchedule::default();
        SamplingSection { target_probability: d.target_probability, ramp_epochs: d.ramp_epochs }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecAugmentSection {
    pub num_freq_masks: usize,
    pub num_time_masks: usize,
    pub max_freq_width: usize,
    pub max_time_width: usize,
    pub fill_value: f64,
}

impl Default for SpecAugmentSection {
    fn default() -> Self {
        let d = SpecAugmentConfig::default();
        SpecAugmentSection {
            num_freq_masks: d.num_freq_masks,
            num_time_masks: d.num_time_masks,
            max_freq_width: d.max_freq_width,
            max_time_width: d.max_time_width,
            fill_value: d.fill_value,
        }
    }
}

impl SpecAugmentSection {
    pub fn to_core(&self) -> SpecAugmentConfig {
        SpecAugmentConfig {
            num_freq_masks: self.num_freq_masks,
            num_time_masks: self.num_time_masks,
            max_freq_width: self.max_freq_width,
            max_time_width: self.max_time_width,
            fill_value: self.fill_value,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    /// Number of students when `students` overrides are absent.
    pub cohort: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Explicit per-student seeds; derived from `seed` when empty.
    pub student_seeds: Vec<u64>,
    /// Model selection: "best" or "compact".
    pub select: String,
    /// Designated compact student for `select = "compact"`.
    pub compact_index: Option<usize>,
    /// Load corpora from this directory instead of synthesizing from
    /// `[task]` (expects train.msqc / valid.msqc / test.msqc).
    pub data_dir: Option<PathBuf>,
}

impl Default for TrainerSection {
    fn default() -> Self {
        TrainerSection {
            cohort: 1,
            batch_size: 32,
            warmup_steps: 4000,
            max_epochs: 100,
            patience: 5,
            clip_norm: 5.0,
            seed: 1,
            student_seeds: Vec::new(),
            select: String::from("best"),
            compact_index: None,
            data_dir: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    pub beam: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection { beam: 20 }
    }
}

/// Per-student structural overrides of the `[model]` template (compact
/// setups mix sizes).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentSection {
    pub num_encoder_blocks: Option<usize>,
    pub num_decoder_blocks: Option<usize>,
    pub model_dim: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub num_heads: Option<usize>,
}

impl StudentSection {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            num_encoder_blocks: self.num_encoder_blocks.unwrap_or(base.num_encoder_blocks),
            num_decoder_blocks: self.num_decoder_blocks.unwrap_or(base.num_decoder_blocks),
            model_dim: self.model_dim.unwrap_or(base.model_dim),
            ffn_dim: self.ffn_dim.unwrap_or(base.ffn_dim),
            num_heads: self.num_heads.unwrap_or(base.num_heads),
            ..base.clone()
        }
    }
}

/// One row of a comparison grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareRow {
    pub label: String,
    /// "large" or "compact".
    pub setup: String,
    #[serde(default)]
    pub label_smoothing: bool,
    #[serde(default)]
    pub scheduled_sampling: bool,
    #[serde(default)]
    pub spec_augment: bool,
    /// "independent", "kd" (compact only), or "dml".
    pub method: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    pub rows: Vec<CompareRow>,
    /// Cohort size for mutual-learning rows.
    pub dml_cohort: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskSection,
    pub model: ModelSection,
    /// Compact template used by `compare` compact rows.
    pub compact_model: Option<ModelSection>,
    pub students: Vec<StudentSection>,
    pub objective: ObjectiveSection,
    pub sampling: SamplingSection,
    pub specaugment: SpecAugmentSection,
    pub trainer: TrainerSection,
    pub decode: DecodeSection,
    pub compare: CompareSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).context("serializing resolved config")?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    /// All student model configs: explicit `[[students]]` overrides, or
    /// `trainer.cohort` copies of the `[model]` template.
    pub fn student_model_configs(&self) -> Result<Vec<ModelConfig>> {
        let base = self.model.to_core(&self.task);
        let configs: Vec<ModelConfig> = if self.students.is_empty() {
            if self.trainer.cohort == 0 {
                bail!("trainer.cohort must be >= 1");
            }
            vec![base; self.trainer.cohort]
        } else {
            self.students.iter().map(|s| s.apply(&base)).collect()
        };
        for c in &configs {
            c.validate()?;
        }
        Ok(configs)
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            batch_size: self.trainer.batch_size,
            warmup_steps: self.trainer.warmup_steps,
            max_epochs: self.trainer.max_epochs,
            patience: self.trainer.patience,
            clip_norm: self.trainer.clip_norm,
            global_seed: self.trainer.seed,
            student_seeds: if self.trainer.student_seeds.is_empty() {
                None
            } else {
                Some(self.trainer.student_seeds.clone())
            },
            schedule: SamplingSchedule {
                target_probability: self.sampling.target_probability,
                ramp_epochs: self.sampling.ramp_epochs,
            },
            sa_cfg: self.specaugment.to_core(),
            objective: self.objective.to_core(),
            adam: AdamConfig::default(),
        }
    }

    pub fn selection_mode(&self) -> Result<SelectionMode> {
        match self.trainer.select.as_str() {
            "best" => Ok(SelectionMode::Best),
            "compact" => match self.trainer.compact_index {
                Some(i) => Ok(SelectionMode::Compact(i)),
                None => bail!("select = \"compact\" requires trainer.compact_index"),
            },
            other => bail!("unknown selection mode {other:?} (expected \"best\" or \"compact\")"),
        }
    }
}
