//! `synth-data`: generate the synthetic task corpora and write them out.

use std::path::PathBuf;

use anyhow::Result;
use mutualseq_core::data::{generate_extra_tests, generate_task};

use crate::commands::{resolve_out_dir, save_resolved_config};
use crate::config::RunConfig;
use crate::formats::write_corpus;

pub fn run_synth_data(config_path: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let cfg = RunConfig::load(&config_path)?;
    let out_dir = resolve_out_dir(out, "data")?;
    let task = generate_task(&cfg.task.to_core())?;
    write_corpus(&out_dir.join("train.msqc"), &task.train)?;
    write_corpus(&out_dir.join("valid.msqc"), &task.valid)?;
    write_corpus(&out_dir.join("test.msqc"), &task.test)?;
    if cfg.task.test_splits > 1 {
        for (i, extra) in generate_extra_tests(&task, cfg.task.test_splits - 1).iter().enumerate() {
            write_corpus(&out_dir.join(format!("test{}.msqc", i + 2)), extra)?;
        }
    }
    save_resolved_config(&cfg, &out_dir)?;
    println!(
        "wrote {} train / {} valid / {} test utterances ({} test split(s)) to {}",
        task.train.len(),
        task.valid.len(),
        task.test.len(),
        cfg.task.test_splits,
        out_dir.display()
    );
    Ok(())
}
