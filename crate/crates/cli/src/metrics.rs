//! JSON-lines metrics sink and best-checkpoint writer.
//!
//! Step rows: `{"step":..,"epoch":..,"student":..,"lr":..,"loss":..,
//! "mle_term":..,"mimicry_term":..}`; epoch rows: `{"epoch":..,
//! "student":..,"valid_loss":..,"cer_greedy":..}`. Exactly these fields, in
//! this order, appended as one JSON object per line.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use mutualseq_core::model::ModelParams;
use mutualseq_core::trainer::{EpochRecord, StepRecord, TrainSink};

#[derive(Serialize)]
struct StepRow {
    step: u64,
    epoch: usize,
    student: usize,
    lr: f64,
    loss: f64,
    mle_term: f64,
    mimicry_term: f64,
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    student: usize,
    valid_loss: f64,
    cer_greedy: f64,
}

/// Writes the metrics stream and maintains one best-so-far checkpoint file
/// per student in the run directory.
pub struct RunSink {
    writer: BufWriter<File>,
    out_dir: PathBuf,
    pub quiet: bool,
    error: Option<anyhow::Error>,
}

impl RunSink {
    pub fn create(out_dir: &Path, quiet: bool) -> Result<Self> {
        let path = out_dir.join("metrics.jsonl");
        let file =
            File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(RunSink { writer: BufWriter::new(file), out_dir: out_dir.to_path_buf(), quiet, error: None })
    }

    pub fn checkpoint_path(out_dir: &Path, student: usize) -> PathBuf {
        out_dir.join(format!("student_{student}.ckpt"))
    }

    fn write_line<T: Serialize>(&mut self, row: &T) {
        if self.error.is_some() {
            return;
        }
        let res = serde_json::to_string(row)
            .map_err(anyhow::Error::from)
            .and_then(|line| {
                self.writer.write_all(line.as_bytes())?;
                self.writer.write_all(b"\n")?;
                Ok(())
            });
        if let Err(e) = res {
            self.error = Some(e);
        }
    }

    /// Flush and surface any deferred IO error.
    pub fn finish(mut self) -> Result<()> {
        self.writer.flush()?;
        match self.error.take() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

impl TrainSink for RunSink {
    fn on_step(&mut self, r: &StepRecord) {
        self.write_line(&StepRow {
            step: r.step,
            epoch: r.epoch,
            student: r.student,
            lr: r.lr,
            loss: r.loss,
            mle_term: r.mle_term,
            mimicry_term: r.mimicry_term,
        });
    }

    fn on_epoch(&mut self, r: &EpochRecord) {
        self.write_line(&EpochRow {
            epoch: r.epoch,
            student: r.student,
            valid_loss: r.valid_loss,
            cer_greedy: r.cer_greedy,
        });
        if !self.quiet {
            eprintln!(
                "epoch {:>3} student {}: valid_loss {:.6} cer_greedy {:.4}",
                r.epoch, r.student, r.valid_loss, r.cer_greedy
            );
        }
    }

    fn on_checkpoint(&mut self, student: usize, params: &ModelParams, _valid_loss: f64) {
        if self.error.is_some() {
            return;
        }
        let path = Self::checkpoint_path(&self.out_dir, student);
        if let Err(e) = crate::formats::write_checkpoint(&path, params) {
            self.error = Some(e);
        }
    }

    fn on_warning(&mut self, student: usize, message: &str) {
        if !self.quiet {
            eprintln!("warning (student {student}): {message}");
        }
    }
}
