//! `train`: run the cohort training loop and write metrics, best
//! checkpoints, the selection marker, and the resolved config.

use std::path::PathBuf;

use anyhow::{Context, Result};
use serde::Serialize;

use crate::commands::{load_or_generate, resolve_out_dir, save_resolved_config};
use crate::config::RunConfig;
use crate::exec::ThreadExecutor;
use crate::formats::read_checkpoint;
use crate::metrics::RunSink;
use mutualseq_core::trainer::{init_students, select_model, train};

#[derive(Serialize)]
struct Selection {
    mode: String,
    selected_student: usize,
    valid_losses: Vec<f64>,
    checkpoints: Vec<String>,
    epochs_run: usize,
    total_steps: u64,
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub workers: usize,
    pub seed: Option<u64>,
    pub quiet: bool,
}

pub fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.trainer.seed = seed;
    }
    let out_dir = resolve_out_dir(args.out, "run")?;
    let (train_corpus, valid_corpus, _test) = load_or_generate(&mut cfg)?;

    let model_cfgs = cfg.student_model_configs()?;
    let trainer_cfg = cfg.trainer_config();
    let seeds = trainer_cfg.resolve_seeds(model_cfgs.len())?;
    let students = init_students(&model_cfgs, &seeds, trainer_cfg.adam.clone())?;
    let teacher = match &cfg.objective.teacher {
        Some(path) => Some(read_checkpoint(path)?),
        None => None,
    };
    let selection_mode = cfg.selection_mode()?;

    let exec = ThreadExecutor::new(args.workers);
    let mut sink = RunSink::create(&out_dir, args.quiet)?;
    let outcome = train(
        &train_corpus,
        &valid_corpus,
        students,
        teacher.as_ref(),
        &trainer_cfg,
        &mut sink,
        &exec,
    )?;
    sink.finish()?;

    let valid_losses: Vec<f64> = outcome.best.iter().map(|(_, v)| *v).collect();
    let selected = select_model(&valid_losses, selection_mode)?;
    let selection = Selection {
        mode: cfg.trainer.select.clone(),
        selected_student: selected,
        valid_losses,
        checkpoints: (0..outcome.best.len()).map(|k| format!("student_{k}.ckpt")).collect(),
        epochs_run: outcome.epochs_run,
        total_steps: outcome.total_steps,
    };
    let selection_path = out_dir.join("selection.json");
    std::fs::write(&selection_path, serde_json::to_string_pretty(&selection)?)
        .with_context(|| format!("writing {}", selection_path.display()))?;
    save_resolved_config(&cfg, &out_dir)?;

    if !args.quiet {
        println!(
            "trained {} student(s) for {} epoch(s); selected student {} -> {}",
            outcome.best.len(),
            outcome.epochs_run,
            selected,
            out_dir.join(format!("student_{selected}.ckpt")).display()
        );
    }
    Ok(())
}
