//! `evaluate`: decode a corpus with a checkpoint and report error rates.
//!
//! The CSV schema is fixed: `utterance_id,ref,hyp,S,I,D,cer`, token ids
//! space-separated inside the ref/hyp cells.

use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use serde::Serialize;

use crate::commands::resolve_out_dir;
use crate::exec::ThreadExecutor;
use crate::formats::{read_checkpoint, read_corpus};
use mutualseq_core::decode::{decode_utterance, micro_average, UtteranceEval};
use mutualseq_core::trainer::Executor;

pub struct EvaluateArgs {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    pub beam: usize,
    pub out: Option<PathBuf>,
    pub workers: usize,
}

#[derive(Serialize)]
struct Summary {
    cer: f64,
    utterances: usize,
    beam: usize,
}

fn join_tokens(tokens: &[usize]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn write_report_csv(path: &std::path::Path, evals: &[UtteranceEval]) -> Result<()> {
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    writeln!(w, "utterance_id,ref,hyp,S,I,D,cer")?;
    for e in evals {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            e.index,
            join_tokens(&e.reference),
            join_tokens(&e.hypothesis),
            e.report.substitutions,
            e.report.insertions,
            e.report.deletions,
            e.report.cer
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn run_evaluate(args: EvaluateArgs) -> Result<()> {
    let params = read_checkpoint(&args.checkpoint)?;
    let corpus = read_corpus(&args.corpus)?;
    if corpus.is_empty() {
        anyhow::bail!("{}: empty corpus", args.corpus.display());
    }
    let out_dir = resolve_out_dir(args.out, "eval")?;
    let exec = ThreadExecutor::new(args.workers);
    let evals: Result<Vec<UtteranceEval>, mutualseq_core::Error> = exec
        .map_vec((0..corpus.len()).collect(), |i| decode_utterance(&params, &corpus, i, args.beam))
        .into_iter()
        .collect();
    let evals = evals?;
    let cer = micro_average(&evals);

    write_report_csv(&out_dir.join("report.csv"), &evals)?;
    let summary = Summary { cer, utterances: evals.len(), beam: args.beam };
    std::fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("cer {cer:.6} over {} utterances (beam {})", evals.len(), args.beam);
    Ok(())
}
