//! Beam-search decoding and character-error-rate scoring.
//!
//! Hypotheses are scored by summed next-token log-probabilities with no
//! length normalization. Ties break deterministically: higher score first,
//! then lexicographically smaller token sequence (a strict prefix sorts
//! before its extensions). Finished hypotheses retire into a pool and the
//! best retired hypothesis wins; greedy decoding is beam search with width
//! one.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{
    add_positional_encoding, bind_model, conv_subsample, decoder_forward, encoder_forward,
    subsampled_len, BoundModel, DropoutCtx, Memory, ModelParams, EOS, SOS,
};

/// One search hypothesis: emitted content tokens (SOS and EOS excluded) and
/// the accumulated log-probability. Scores only decrease as the prefix
/// grows; finished hypotheses are never extended.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

/// Levenshtein alignment counts against a reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CerReport {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
    /// (S + I + D) / ref_len; may exceed 1.
    pub cer: f64,
}

/// Default generation cap for a subsampled memory of m' frames.
pub fn default_max_len(subsampled_frames: usize) -> usize {
    2 * (subsampled_frames + 2)
}

fn better(a: &(Vec<usize>, f64), b: &(Vec<usize>, f64)) -> core::cmp::Ordering {
    // Higher score first; ties prefer the lexicographically smaller
    // sequence, with a strict prefix before its extensions.
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Encoder pass shared by every decode step of one utterance.
struct DecodeState {
    graph: Graph,
    bound: BoundModel,
    memory: Memory,
}

impl DecodeState {
    fn new(params: &ModelParams, feats: &[f64], rows: usize, valid: usize) -> Result<Self> {
        let mut graph = Graph::inference();
        let bound = bind_model(&mut graph, params);
        let (h, v) = conv_subsample(&mut graph, &bound, feats, rows, valid)?;
        let h0 = add_positional_encoding(&mut graph, &bound.cfg, h)?;
        let enc = encoder_forward(&mut graph, &bound, h0, v, &mut DropoutCtx::off())?;
        let mem_rows = graph.value(enc).dims2().0;
        Ok(DecodeState { graph, bound, memory: Memory { h: enc, rows: mem_rows, valid: v } })
    }

    /// Log-probabilities over the vocabulary for the next token after
    /// `prefix` content tokens.
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut dec_input = Vec::with_capacity(prefix.len() + 1);
        dec_input.push(SOS);
        dec_input.extend_from_slice(prefix);
        let logits =
            decoder_forward(&mut self.graph, &self.bound, &dec_input, &self.memory, &mut DropoutCtx::off())?;
        let lp = self.graph.log_softmax_rows(logits)?;
        let t = self.graph.value(lp);
        let (rows, vocab) = t.dims2();
        Ok(t.data[(rows - 1) * vocab..rows * vocab].to_vec())
    }
}

/// Beam search over the auto-regressive model. Returns the best retired
/// hypothesis; generation is hard-capped at `max_len` content tokens, at
/// which point EOS is forced (its log-probability still counts).
pub fn beam_search(
    params: &ModelParams,
    feats: &[f64],
    rows: usize,
    valid: usize,
    beam: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    if beam < 1 {
        return Err(Error::Config(String::from("beam size must be >= 1")));
    }
    if max_len < 1 {
        return Err(Error::Config(String::from("max_len must be >= 1")));
    }
    let mut state = DecodeState::new(params, feats, rows, valid)?;

    let mut active: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut pool: Vec<(Vec<usize>, f64)> = Vec::new();

    for step in 0..=max_len {
        let mut candidates: Vec<(Vec<usize>, f64)> = Vec::new();
        for (prefix, score) in &active {
            let lp = state.next_log_probs(prefix)?;
            if step == max_len {
                // Hard stop: force EOS.
                pool.push((prefix.clone(), score + lp[EOS]));
                continue;
            }
            for (v, &l) in lp.iter().enumerate() {
                if v == EOS {
                    pool.push((prefix.clone(), score + l));
                } else {
                    let mut next = prefix.clone();
                    next.push(v);
                    candidates.push((next, score + l));
                }
            }
        }
        if step == max_len || candidates.is_empty() {
            break;
        }
        candidates.sort_by(better);
        candidates.truncate(beam);
        // Sound pruning: scores only decrease, so once the best retired
        // hypothesis strictly beats every active one nothing can improve.
        pool.sort_by(better);
        pool.truncate(4 * beam.max(1));
        if let Some(best_pool) = pool.first() {
            if best_pool.1 > candidates[0].1 {
                break;
            }
        }
        active = candidates;
    }

    pool.sort_by(better);
    let (tokens, log_prob) = pool
        .into_iter()
        .next()
        .ok_or_else(|| Error::Contract(String::from("beam search retired no hypothesis")))?;
    Ok(Hypothesis { tokens, log_prob, finished: true })
}

/// Greedy decoding: beam search with width one.
pub fn greedy_decode(
    params: &ModelParams,
    feats: &[f64],
    rows: usize,
    valid: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    beam_search(params, feats, rows, valid, 1, max_len)
}

/// Unit-cost Levenshtein alignment. Among minimum-cost alignments the one
/// with the most matches is reported; substitution/insertion/deletion counts
/// follow from (cost, matches) and the two lengths, which keeps the report
/// symmetric: swapping arguments exchanges I and D.
pub fn edit_distance(reference: &[usize], hypothesis: &[usize]) -> Result<CerReport> {
    if reference.is_empty() {
        return Err(Error::Contract(String::from("edit distance needs a non-empty reference")));
    }
    let r = reference.len();
    let h = hypothesis.len();
    // dp[(i, j)] = (cost, matches): min cost, then max matches.
    let mut prev: Vec<(usize, usize)> = (0..=h).map(|j| (j, 0)).collect();
    let mut cur = vec![(0usize, 0usize); h + 1];
    for i in 1..=r {
        cur[0] = (i, 0);
        for j in 1..=h {
            let equal = reference[i - 1] == hypothesis[j - 1];
            let diag = prev[j - 1];
            let diag_cand =
                (diag.0 + if equal { 0 } else { 1 }, diag.1 + if equal { 1 } else { 0 });
            let del_cand = (prev[j].0 + 1, prev[j].1);
            let ins_cand = (cur[j - 1].0 + 1, cur[j - 1].1);
            let mut best = diag_cand;
            for cand in [del_cand, ins_cand] {
                if cand.0 < best.0 || (cand.0 == best.0 && cand.1 > best.1) {
                    best = cand;
                }
            }
            cur[j] = best;
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    let (cost, matches) = prev[h];
    let substitutions = r + h - 2 * matches - cost;
    let deletions = r - matches - substitutions;
    let insertions = h - matches - substitutions;
    debug_assert_eq!(substitutions + insertions + deletions, cost);
    Ok(CerReport {
        substitutions,
        insertions,
        deletions,
        ref_len: r,
        cer: cost as f64 / r as f64,
    })
}

/// Per-utterance decode result within a corpus evaluation.
#[derive(Debug, Clone)]
pub struct UtteranceEval {
    pub index: usize,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub report: CerReport,
}

/// Corpus-level evaluation: decode every utterance and micro-average the
/// error rate, sum(S+I+D) / sum(ref_len).
#[derive(Debug, Clone)]
pub struct CorpusEval {
    pub cer: f64,
    pub utterances: Vec<UtteranceEval>,
}

/// Decode one standardized utterance of a corpus.
pub fn decode_utterance(
    params: &ModelParams,
    corpus: &Corpus,
    index: usize,
    beam: usize,
) -> Result<UtteranceEval> {
    let u = &corpus.utterances[index];
    let feats = corpus.standardized_feats(index);
    let max_len = default_max_len(subsampled_len(u.frames));
    let hyp = beam_search(params, &feats, u.frames, u.frames, beam, max_len)?;
    let report = edit_distance(&u.tokens, &hyp.tokens)?;
    Ok(UtteranceEval { index, reference: u.tokens.clone(), hypothesis: hyp.tokens, report })
}

/// Evaluate a whole corpus sequentially. Decoding is read-only over the
/// parameters; callers may shard utterances across workers and reassemble
/// reports in index order instead.
pub fn evaluate_corpus(params: &ModelParams, corpus: &Corpus, beam: usize) -> Result<CorpusEval> {
    if corpus.is_empty() {
        return Err(Error::Config(String::from("cannot evaluate an empty corpus")));
    }
    let mut utterances = Vec::with_capacity(corpus.len());
    for i in 0..corpus.len() {
        utterances.push(decode_utterance(params, corpus, i, beam)?);
    }
    Ok(CorpusEval { cer: micro_average(&utterances), utterances })
}

/// sum(S+I+D) / sum(ref_len) over per-utterance reports.
pub fn micro_average(evals: &[UtteranceEval]) -> f64 {
    let edits: usize = evals
        .iter()
        .map(|e| e.report.substitutions + e.report.insertions + e.report.deletions)
        .sum();
    let refs: usize = evals.iter().map(|e| e.report.ref_len).sum();
    edits as f64 / refs as f64
}

/// Exhaustive search over every content-token sequence up to `max_len`,
/// scored exactly like beam search. Exponential; toy models only.
pub fn exhaustive_best(
    params: &ModelParams,
    feats: &[f64],
    rows: usize,
    valid: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    let vocab = params.cfg.vocab_size;
    let mut state = DecodeState::new(params, feats, rows, valid)?;
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut frontier: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    for step in 0..=max_len {
        let mut next_frontier = Vec::new();
        for (prefix, score) in frontier {
            let lp = state.next_log_probs(&prefix)?;
            let finished = (prefix.clone(), score + lp[EOS]);
            match &best {
                Some(b) if better(b, &finished).is_le() => {}
                _ => best = Some(finished),
            }
            if step < max_len {
                for v in 0..vocab {
                    if v == EOS {
                        continue;
                    }
                    let mut next = prefix.clone();
                    next.push(v);
                    next_frontier.push((next, score + lp[v]));
                }
            }
        }
        frontier = next_frontier;
    }
    let (tokens, log_prob) =
        best.ok_or_else(|| Error::Contract(String::from("empty enumeration")))?;
    Ok(Hypothesis { tokens, log_prob, finished: true })
}
