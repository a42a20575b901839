//! Subcommand implementations.

mod compare;
mod evaluate;
mod gradcheck;
mod synth;
mod train;

pub use compare::run_compare;
pub use evaluate::run_evaluate;
pub use gradcheck::run_gradcheck;
pub use synth::run_synth_data;
pub use train::run_train;

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use crate::config::RunConfig;
use mutualseq_core::data::{Corpus, TaskData};

/// Environment variable naming the default output root when `--out` is
/// absent.
pub const OUT_ROOT_ENV: &str = "MUTUALSEQ_OUT";

/// Resolve the output directory: explicit flag, else
/// `$MUTUALSEQ_OUT/<name>`, else `./<name>`; created if missing.
pub fn resolve_out_dir(explicit: Option<PathBuf>, name: &str) -> Result<PathBuf> {
    let dir = match explicit {
        Some(d) => d,
        None => match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(name),
            None => PathBuf::from(name),
        },
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Corpora for a training run: read from `trainer.data_dir` when set,
/// otherwise synthesized in memory from `[task]`. When reading from files,
/// the task section is replaced by the corpus header so model shapes always
/// match the data.
pub fn load_or_generate(cfg: &mut RunConfig) -> Result<(Corpus, Corpus, Corpus)> {
    match cfg.trainer.data_dir.clone() {
        Some(dir) => {
            let train = crate::formats::read_corpus(&dir.join("train.msqc"))?;
            let valid = crate::formats::read_corpus(&dir.join("valid.msqc"))?;
            let test = crate::formats::read_corpus(&dir.join("test.msqc"))?;
            let c = &train.cfg;
            cfg.task.vocab_size = c.vocab_size;
            cfg.task.feature_dim = c.feature_dim;
            cfg.task.frames_per_token = c.frames_per_token;
            cfg.task.noise_std = c.noise_std;
            cfg.task.len_min = c.len_min;
            cfg.task.len_max = c.len_max;
            cfg.task.seed = c.seed;
            Ok((train, valid, test))
        }
        None => {
            let task: TaskData = mutualseq_core::data::generate_task(&cfg.task.to_core())
                .map_err(anyhow::Error::from)?;
            Ok((task.train, task.valid, task.test))
        }
    }
}

/// Write the resolved configuration next to the run outputs for provenance.
pub fn save_resolved_config(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    cfg.save(&out_dir.join("config.toml"))
}
