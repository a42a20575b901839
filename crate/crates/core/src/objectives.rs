//! Training objectives over model-emitted distributions.
//!
//! Every objective is a masked, token-mean cross-entropy between the
//! student's per-position distributions and some constant target rows:
//! one-hot references (maximum likelihood), smoothed references (label
//! smoothing), a peer student's detached distribution (mutual-learning
//! mimicry), or a frozen teacher's distribution (knowledge distillation).
//! Scheduled sampling and feature masking change the context a student's
//! distribution is computed under, not the loss formula.
//!
//! The mutual-learning objective for student k interpolates its own term
//! with the average mimicry toward its K-1 peers:
//!
//! ```text
//! L_k = (1 - lambda) * own_k + lambda / (K-1) * sum_{i != k} CE(P_i -> P_k)
//! ```
//!
//! Peer distributions are snapshots taken before any update and carry no
//! gradient, so backward for student k touches only student k's parameters.
//! All reduction paths are shared: lambda = 0, alpha = 0, sampling
//! probability 0, or zero mask widths reproduce the plain objective bit for
//! bit.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::augment::{scheduled_sample, spec_augment, SpecAugmentConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{bind_model, forward_probs, BoundModel, DropoutCtx, ModelParams};
use crate::rng::{stream, Domain};

/// Objective switches and weights for a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    /// Label-smoothing weight alpha in [0,1].
    pub alpha: f64,
    /// Mutual-learning interpolation weight lambda in [0,1].
    pub lambda: f64,
    pub label_smoothing: bool,
    pub scheduled_sampling: bool,
    pub spec_augment: bool,
    /// Frozen-teacher distillation weight; mutually exclusive with lambda > 0.
    pub kd_weight: Option<f64>,
}

impl Default for ObjectiveConfig {
    /// Reference defaults: alpha 0.1, lambda 0.4, all techniques off.
    fn default() -> Self {
        ObjectiveConfig {
            alpha: 0.1,
            lambda: 0.4,
            label_smoothing: false,
            scheduled_sampling: false,
            spec_augment: false,
            kd_weight: None,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self, cohort_size: usize, has_teacher: bool) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0,1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0,1]", self.lambda)));
        }
        if self.lambda > 0.0 && cohort_size < 2 && self.kd_weight.is_none() {
            return Err(Error::Config(format!(
                "mutual learning with lambda {} needs at least 2 students, got {cohort_size}",
                self.lambda
            )));
        }
        if let Some(w) = self.kd_weight {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Config(format!("kd weight {w} outside [0,1]")));
            }
            if self.lambda > 0.0 {
                return Err(Error::Config(String::from(
                    "knowledge distillation and mutual learning are mutually exclusive",
                )));
            }
            if !has_teacher {
                return Err(Error::Config(String::from("kd_weight set but no teacher checkpoint given")));
            }
        }
        Ok(())
    }

    pub fn effective_alpha(&self) -> f64 {
        if self.label_smoothing {
            self.alpha
        } else {
            0.0
        }
    }
}

/// Per-student distributions over one batch of positions, as produced by the
/// phase-1 forward passes. Rows are probability distributions; when consumed
/// in another student's loss they are constants.
#[derive(Debug, Clone)]
pub struct CohortDistributions {
    pub rows: usize,
    pub vocab: usize,
    /// One flat [rows x vocab] matrix per student.
    pub probs: Vec<Vec<f64>>,
}

impl CohortDistributions {
    pub fn validate(&self) -> Result<()> {
        for (k, p) in self.probs.iter().enumerate() {
            if p.len() != self.rows * self.vocab {
                return Err(Error::Dim(format!(
                    "student {k}: {} values, expected {}",
                    p.len(),
                    self.rows * self.vocab
                )));
            }
            for r in 0..self.rows {
                let s: f64 = p[r * self.vocab..(r + 1) * self.vocab].iter().sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(Error::Numeric(format!("student {k} row {r} sums to {s}")));
                }
            }
        }
        Ok(())
    }
}

/// One-hot target rows for a reference token sequence.
pub fn one_hot_rows(refs: &[usize], vocab: usize) -> Vec<f64> {
    let mut rows = vec![0.0; refs.len() * vocab];
    for (r, &t) in refs.iter().enumerate() {
        rows[r * vocab + t] = 1.0;
    }
    rows
}

/// Smoothed target rows: (1 - alpha) . one_hot + alpha / vocab.
pub fn smooth_truth(refs: &[usize], alpha: f64, vocab: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0,1]")));
    }
    let floor = alpha / vocab as f64;
    let mut rows = vec![floor; refs.len() * vocab];
    for (r, &t) in refs.iter().enumerate() {
        rows[r * vocab + t] = (1.0 - alpha) + floor;
    }
    Ok(rows)
}

fn mask_count(mask: &[bool]) -> usize {
    mask.iter().filter(|&&m| m).count()
}

/// Masked token-mean cross-entropy of `probs` rows under constant target
/// rows, evaluated through the same graph op the training path records.
/// Returns the value and the number of probability-floor clamps.
pub fn cross_entropy_mean_value(
    probs: &[f64],
    targets: &[f64],
    rows: usize,
    vocab: usize,
    mask: &[bool],
) -> Result<(f64, u64)> {
    let count = mask_count(mask);
    if count == 0 {
        return Err(Error::Contract(String::from("cross entropy over an empty mask")));
    }
    let mut g = Graph::inference();
    let p = g.constant(vec![rows, vocab], probs.to_vec())?;
    let ce = g.cross_entropy_sum(p, targets, mask)?;
    Ok((g.scalar_value(ce) / count as f64, g.clamp_warnings))
}

/// Maximum-likelihood objective: token-mean negative log-probability of the
/// reference tokens.
pub fn mle_loss(probs: &[f64], rows: usize, vocab: usize, refs: &[usize], mask: &[bool]) -> Result<f64> {
    let targets = one_hot_rows(refs, vocab);
    Ok(cross_entropy_mean_value(probs, &targets, rows, vocab, mask)?.0)
}

/// Label-smoothing objective: cross-entropy under smoothed target rows.
pub fn ls_loss(
    probs: &[f64],
    rows: usize,
    vocab: usize,
    refs: &[usize],
    alpha: f64,
    mask: &[bool],
) -> Result<f64> {
    let targets = smooth_truth(refs, alpha, vocab)?;
    Ok(cross_entropy_mean_value(probs, &targets, rows, vocab, mask)?.0)
}

/// Mimicry loss: cross-entropy of `own` rows under detached `peer` rows.
pub fn mimicry_loss(
    peer: &[f64],
    own: &[f64],
    rows: usize,
    vocab: usize,
    mask: &[bool],
) -> Result<f64> {
    Ok(cross_entropy_mean_value(own, peer, rows, vocab, mask)?.0)
}

/// Mutual-learning objective value for student `k` given the cohort's
/// phase-1 distributions and (already smoothed or one-hot) own-target rows.
pub fn dml_loss(
    k: usize,
    cohort: &CohortDistributions,
    own_targets: &[f64],
    mask: &[bool],
    lambda: f64,
) -> Result<f64> {
    let kn = cohort.probs.len();
    if k >= kn {
        return Err(Error::Contract(format!("student index {k} out of {kn}")));
    }
    if lambda > 0.0 && kn < 2 {
        return Err(Error::Config(String::from("lambda > 0 requires at least 2 students")));
    }
    let own =
        cross_entropy_mean_value(&cohort.probs[k], own_targets, cohort.rows, cohort.vocab, mask)?.0;
    if lambda == 0.0 {
        return Ok(own);
    }
    let mut mimicry = 0.0;
    for (i, peer) in cohort.probs.iter().enumerate() {
        if i == k {
            continue;
        }
        mimicry += mimicry_loss(peer, &cohort.probs[k], cohort.rows, cohort.vocab, mask)?;
    }
    mimicry /= (kn - 1) as f64;
    Ok((1.0 - lambda) * own + lambda * mimicry)
}

/// Distillation objective value: interpolation between the student's own
/// term and mimicry toward a frozen teacher.
pub fn kd_loss(
    student: &[f64],
    teacher: &[f64],
    rows: usize,
    vocab: usize,
    own_targets: &[f64],
    mask: &[bool],
    weight: f64,
) -> Result<f64> {
    let own = cross_entropy_mean_value(student, own_targets, rows, vocab, mask)?.0;
    if weight == 0.0 {
        return Ok(own);
    }
    let mim = mimicry_loss(teacher, student, rows, vocab, mask)?;
    Ok((1.0 - weight) * own + weight * mim)
}

// ---- graph-level assembly ---------------------------------------------------

/// Per-student loss terms for one utterance, ready for backward.
pub struct UtteranceLossTerms {
    /// Scalar var: ((1-lambda) * own + lambda/(K-1) * sum peer CE) * inv_norm.
    pub total: Var,
    /// Raw summed own cross-entropy over the utterance's masked positions.
    pub own_sum: f64,
    /// Raw summed mimicry cross-entropy, averaged over peers.
    pub mimicry_sum: f64,
}

/// Build the scalar loss for one (student, utterance) pair on the student's
/// recorded graph. `peers` are detached distribution snapshots aligned
/// row-for-row with `own_probs`; `inv_norm` is 1 / (total masked tokens in
/// the batch) so summing per-utterance totals yields the batch objective.
pub fn build_utterance_loss(
    g: &mut Graph,
    own_probs: Var,
    target_rows: &[f64],
    mask: &[bool],
    peers: &[&[f64]],
    lambda: f64,
    inv_norm: f64,
) -> Result<UtteranceLossTerms> {
    if lambda > 0.0 && peers.is_empty() {
        return Err(Error::Config(String::from("lambda > 0 with no peer distributions")));
    }
    let own_ce = g.cross_entropy_sum(own_probs, target_rows, mask)?;
    let own_sum = g.scalar_value(own_ce);
    let total = g.scale(own_ce, (1.0 - lambda) * inv_norm)?;
    if lambda == 0.0 || peers.is_empty() {
        return Ok(UtteranceLossTerms { total, own_sum, mimicry_sum: 0.0 });
    }
    let mut mimicry_sum = 0.0;
    let mut acc = total;
    let peer_w = lambda * inv_norm / peers.len() as f64;
    for peer in peers {
        let ce = g.cross_entropy_sum(own_probs, peer, mask)?;
        mimicry_sum += g.scalar_value(ce);
        let scaled = g.scale(ce, peer_w)?;
        acc = g.add(acc, scaled)?;
    }
    mimicry_sum /= peers.len() as f64;
    Ok(UtteranceLossTerms { total: acc, own_sum, mimicry_sum })
}

// ---- forward orchestration ----------------------------------------------------

/// One utterance as the model consumes it: a (possibly padded) feature slab
/// with its valid frame count, the teacher-forced decoder input (SOS +
/// references), and the shifted targets (references + EOS).
#[derive(Debug, Clone, Copy)]
pub struct UtteranceView<'a> {
    pub feats: &'a [f64],
    pub feat_rows: usize,
    pub valid_frames: usize,
    pub dec_input: &'a [usize],
    pub targets: &'a [usize],
}

impl<'a> UtteranceView<'a> {
    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        if self.feats.len() != self.feat_rows * feature_dim {
            return Err(Error::Dim(format!(
                "feature slab {} values for {} x {feature_dim}",
                self.feats.len(),
                self.feat_rows
            )));
        }
        if self.dec_input.len() != self.targets.len() {
            return Err(Error::Contract(format!(
                "decoder input length {} vs target length {}",
                self.dec_input.len(),
                self.targets.len()
            )));
        }
        Ok(())
    }
}

/// Resolved stochastic context for the forward passes of one student on one
/// mini-batch: which deformations apply and which seed streams drive them.
#[derive(Debug, Clone)]
pub struct ForwardSpec {
    pub seed: u64,
    pub epoch: u64,
    pub batch_index: u64,
    /// Scheduled-sampling probability; 0 keeps pure teacher forcing.
    pub sampling_p: f64,
    /// Feature masking config; `None` leaves features untouched.
    pub spec_augment: Option<SpecAugmentConfig>,
    /// Draw dropout masks (training passes only).
    pub dropout: bool,
}

impl ForwardSpec {
    /// Deterministic evaluation pass: no deformation, no sampling, no
    /// dropout.
    pub fn plain(seed: u64) -> Self {
        ForwardSpec { seed, epoch: 0, batch_index: 0, sampling_p: 0.0, spec_augment: None, dropout: false }
    }
}

/// Result of one recorded (or probe) forward: the graph, the bound
/// parameters, the distribution var, and a detached snapshot of its values
/// for peers to consume.
pub struct UttForward {
    pub graph: Graph,
    pub bound: BoundModel,
    pub probs: Var,
    pub prob_values: Vec<f64>,
    pub rows: usize,
}

/// Row-wise argmax with ties resolved to the smallest token id.
pub fn argmax_rows(data: &[f64], rows: usize, vocab: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &data[r * vocab..(r + 1) * vocab];
        let mut best = 0;
        for (i, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = i;
            }
        }
        out.push(best);
    }
    out
}

/// Run one student's forward pass for one utterance under its own stochastic
/// context: deform features, optionally mix model predictions into the
/// conditioning tokens (two-pass scheme: a probe pass picks argmax tokens,
/// the recorded pass consumes the mixed context), then compute per-position
/// distributions.
pub fn student_utterance_forward(
    params: &ModelParams,
    fwd: &ForwardSpec,
    utt: &UtteranceView,
    utt_index: u64,
    recording: bool,
) -> Result<UttForward> {
    utt.validate(params.cfg.feature_dim)?;
    let dim = params.cfg.feature_dim;

    // G: feature deformation over the valid frames only.
    let deformed: Option<Vec<f64>> = match &fwd.spec_augment {
        Some(cfg) => {
            let mut rng = stream(fwd.seed, Domain::Augment, fwd.epoch, fwd.batch_index, utt_index);
            let mut full = utt.feats.to_vec();
            let valid =
                spec_augment(&utt.feats[..utt.valid_frames * dim], utt.valid_frames, dim, cfg, &mut rng);
            full[..utt.valid_frames * dim].copy_from_slice(&valid);
            Some(full)
        }
        None => None,
    };
    let feats: &[f64] = deformed.as_deref().unwrap_or(utt.feats);

    // S: mix argmax predictions from a teacher-forced probe pass into the
    // conditioning tokens. The probe runs on the same (deformed) features
    // the loss pass will see, without dropout.
    let context: Vec<usize> = if fwd.sampling_p > 0.0 {
        let mut probe = Graph::inference();
        let bm = bind_model(&mut probe, params);
        let probs = forward_probs(
            &mut probe,
            &bm,
            feats,
            utt.feat_rows,
            utt.valid_frames,
            utt.dec_input,
            &mut DropoutCtx::off(),
        )?;
        let preds = argmax_rows(&probe.value(probs).data, utt.dec_input.len(), params.cfg.vocab_size);
        let mut rng = stream(fwd.seed, Domain::Sample, fwd.epoch, fwd.batch_index, utt_index);
        scheduled_sample(utt.dec_input, &preds[..utt.dec_input.len() - 1], fwd.sampling_p, &mut rng)?
    } else {
        utt.dec_input.to_vec()
    };

    let mut graph = if recording { Graph::new() } else { Graph::inference() };
    let bound = bind_model(&mut graph, params);
    let probs = if fwd.dropout && params.cfg.dropout_rate > 0.0 {
        let mut rng = stream(fwd.seed, Domain::Dropout, fwd.epoch, fwd.batch_index, utt_index);
        let mut drop = DropoutCtx::training(&mut rng, params.cfg.dropout_rate);
        forward_probs(&mut graph, &bound, feats, utt.feat_rows, utt.valid_frames, &context, &mut drop)?
    } else {
        forward_probs(
            &mut graph,
            &bound,
            feats,
            utt.feat_rows,
            utt.valid_frames,
            &context,
            &mut DropoutCtx::off(),
        )?
    };
    let prob_values = graph.value(probs).data.clone();
    let rows = context.len();
    Ok(UttForward { graph, bound, probs, prob_values, rows })
}

/// Batch-level loss aggregate for one student.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StudentLoss {
    pub total: f64,
    pub own_sum: f64,
    pub mimicry_sum: f64,
    pub own_mean: f64,
    pub mimicry_mean: f64,
}

/// Sequential value-only evaluation of the full cohort objective on one
/// batch: every student's loss under its own stochastic context with
/// detached peers, exactly as the training step computes it. Used by the
/// gradient checker, the reduction-identity tests, and validation probes.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective_values(
    students: &[(&ModelParams, u64)],
    teacher: Option<(&ModelParams, u64)>,
    objective: &ObjectiveConfig,
    sa_cfg: &SpecAugmentConfig,
    sampling_p: f64,
    epoch: u64,
    batch_index: u64,
    utts: &[UtteranceView<'_>],
) -> Result<Vec<StudentLoss>> {
    objective.validate(students.len(), teacher.is_some())?;
    let total_tokens: usize = utts.iter().map(|u| u.targets.len()).sum();
    if total_tokens == 0 {
        return Err(Error::Contract(String::from("empty batch")));
    }
    let inv_norm = 1.0 / total_tokens as f64;
    let alpha = objective.effective_alpha();
    let p = if objective.scheduled_sampling { sampling_p } else { 0.0 };
    let sa = if objective.spec_augment { Some(sa_cfg.clone()) } else { None };

    let vocab = students[0].0.cfg.vocab_size;
    let mut losses = vec![StudentLoss::default(); students.len()];
    for (u_idx, utt) in utts.iter().enumerate() {
        let mask = vec![true; utt.targets.len()];
        let targets = smooth_truth(utt.targets, alpha, vocab)?;
        let mut fwds = Vec::with_capacity(students.len());
        for &(params, seed) in students {
            let fwd = ForwardSpec {
                seed,
                epoch,
                batch_index,
                sampling_p: p,
                spec_augment: sa.clone(),
                dropout: false,
            };
            fwds.push(student_utterance_forward(params, &fwd, utt, u_idx as u64, false)?);
        }
        let teacher_fwd = match teacher {
            Some((tp, tseed)) => {
                let fwd = ForwardSpec {
                    seed: tseed,
                    epoch,
                    batch_index,
                    sampling_p: p,
                    spec_augment: sa.clone(),
                    dropout: false,
                };
                Some(student_utterance_forward(tp, &fwd, utt, u_idx as u64, false)?)
            }
            None => None,
        };
        for k in 0..students.len() {
            let (lambda, peers): (f64, Vec<&[f64]>) = match (objective.kd_weight, &teacher_fwd) {
                (Some(w), Some(t)) => (w, vec![t.prob_values.as_slice()]),
                _ => (
                    objective.lambda,
                    (0..students.len())
                        .filter(|&i| i != k)
                        .map(|i| fwds[i].prob_values.as_slice())
                        .collect(),
                ),
            };
            let mut g = Graph::inference();
            let own = g.constant(vec![utt.targets.len(), vocab], fwds[k].prob_values.clone())?;
            let terms = build_utterance_loss(&mut g, own, &targets, &mask, &peers, lambda, inv_norm)?;
            losses[k].total += g.scalar_value(terms.total);
            losses[k].own_sum += terms.own_sum;
            losses[k].mimicry_sum += terms.mimicry_sum;
        }
    }
    for l in &mut losses {
        l.own_mean = l.own_sum * inv_norm;
        l.mimicry_mean = l.mimicry_sum * inv_norm;
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{simple_stream, Domain};

    const LN4: f64 = 1.3862943611198906;

    fn random_distributions(rows: usize, vocab: usize, seed: u64) -> Vec<f64> {
        let mut rng = simple_stream(seed, Domain::DataProto);
        let mut out = vec![0.0; rows * vocab];
        for r in 0..rows {
            let logits: Vec<f64> = (0..vocab).map(|_| crate::rng::gaussian(&mut rng)).collect();
            crate::graph::softmax_row(&logits, &mut out[r * vocab..(r + 1) * vocab]);
        }
        out
    }

    #[test]
    fn mle_perfect_prediction_is_zero() {
        let refs = [3, 1, 2];
        let probs = one_hot_rows(&refs, 4);
        let loss = mle_loss(&probs, 3, 4, &refs, &[true; 3]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn mle_uniform_is_log_vocab() {
        let refs = [0, 3];
        let probs = vec![0.25; 8];
        let loss = mle_loss(&probs, 2, 4, &refs, &[true; 2]).unwrap();
        assert!((loss - LN4).abs() < 1e-12);
    }

    #[test]
    fn mle_matches_hand_sum() {
        let refs = [2, 0, 1];
        let probs = random_distributions(3, 3, 7);
        // Independent per-token hand sum.
        let mut expect = 0.0;
        for (r, &t) in refs.iter().enumerate() {
            expect -= libm::log(probs[r * 3 + t]);
        }
        expect /= 3.0;
        let got = mle_loss(&probs, 3, 3, &refs, &[true; 3]).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn mle_respects_mask() {
        let refs = [2, 0];
        let probs = random_distributions(2, 3, 8);
        let only_first = mle_loss(&probs, 2, 3, &refs, &[true, false]).unwrap();
        assert!((only_first + libm::log(probs[2])).abs() < 1e-12);
    }

    #[test]
    fn smooth_truth_cases() {
        let refs = [0];
        assert_eq!(smooth_truth(&refs, 0.0, 4).unwrap(), one_hot_rows(&refs, 4));
        let s = smooth_truth(&refs, 0.1, 4).unwrap();
        assert!((s[0] - 0.925).abs() < 1e-15);
        for &v in &s[1..] {
            assert!((v - 0.025).abs() < 1e-15);
        }
        let u = smooth_truth(&refs, 1.0, 4).unwrap();
        for &v in &u {
            assert!((v - 0.25).abs() < 1e-15);
        }
        assert!(smooth_truth(&refs, 1.5, 4).is_err());
        assert!(smooth_truth(&refs, -0.1, 4).is_err());
        // Rows sum to 1 up to rounding.
        let s = smooth_truth(&[2, 3], 0.37, 5).unwrap();
        for r in 0..2 {
            let sum: f64 = s[r * 5..(r + 1) * 5].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ls_reduces_to_mle_at_alpha_zero() {
        let refs = [1, 3, 2];
        let probs = random_distributions(3, 4, 9);
        let a = ls_loss(&probs, 3, 4, &refs, 0.0, &[true; 3]).unwrap();
        let b = mle_loss(&probs, 3, 4, &refs, &[true; 3]).unwrap();
        assert_eq!(a.to_bits(), b.to_bits(), "alpha = 0 must be bit-identical to mle");
    }

    #[test]
    fn ls_uniform_probs_independent_of_alpha() {
        let refs = [0, 2];
        let probs = vec![0.25; 8];
        for alpha in [0.0, 0.1, 0.5, 1.0] {
            let loss = ls_loss(&probs, 2, 4, &refs, alpha, &[true; 2]).unwrap();
            assert!((loss - LN4).abs() < 1e-12, "alpha {alpha}");
        }
    }

    #[test]
    fn ls_frozen_scalar_case() {
        // alpha=0.1, vocab 4, probs [0.7,0.1,0.1,0.1], ref 0:
        // -(0.925 ln 0.7 + 3 * 0.025 ln 0.1), evaluated at 50-digit precision.
        let probs = [0.7, 0.1, 0.1, 0.1];
        let loss = ls_loss(&probs, 1, 4, &[0], 0.1, &[true]).unwrap();
        assert!((loss - 0.5026182051178809).abs() < 1e-15, "got {loss}");
    }

    #[test]
    fn mimicry_zero_for_identical_one_hot_and_entropy_for_uniform() {
        let one_hot = one_hot_rows(&[2], 4);
        assert_eq!(mimicry_loss(&one_hot, &one_hot, 1, 4, &[true]).unwrap(), 0.0);
        let uniform = vec![0.25; 4];
        let m = mimicry_loss(&uniform, &uniform, 1, 4, &[true]).unwrap();
        assert!((m - LN4).abs() < 1e-12);
    }

    #[test]
    fn mimicry_gibbs_inequality() {
        // CE(peer -> own) >= H(peer), equality iff own == peer.
        for seed in 0..20 {
            let peer = random_distributions(2, 5, 100 + seed);
            let own = random_distributions(2, 5, 200 + seed);
            let ce = mimicry_loss(&peer, &own, 2, 5, &[true; 2]).unwrap();
            let h = mimicry_loss(&peer, &peer, 2, 5, &[true; 2]).unwrap();
            assert!(ce >= h - 1e-12, "seed {seed}: ce {ce} < entropy {h}");
            assert!(ce >= 0.0);
        }
    }

    #[test]
    fn dml_reduces_to_mle_at_lambda_zero() {
        let refs = [3, 1];
        let cohort = CohortDistributions {
            rows: 2,
            vocab: 4,
            probs: vec![random_distributions(2, 4, 11), random_distributions(2, 4, 12)],
        };
        cohort.validate().unwrap();
        let targets = one_hot_rows(&refs, 4);
        let a = dml_loss(0, &cohort, &targets, &[true; 2], 0.0).unwrap();
        let b = mle_loss(&cohort.probs[0], 2, 4, &refs, &[true; 2]).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn dml_identical_students_mimic_their_own_entropy() {
        let p = random_distributions(3, 4, 13);
        let cohort = CohortDistributions { rows: 3, vocab: 4, probs: vec![p.clone(), p.clone()] };
        let refs = [1, 2, 3];
        let targets = one_hot_rows(&refs, 4);
        let lambda = 0.4;
        let got = dml_loss(0, &cohort, &targets, &[true; 3], lambda).unwrap();
        let own = mle_loss(&p, 3, 4, &refs, &[true; 3]).unwrap();
        let entropy = mimicry_loss(&p, &p, 3, 4, &[true; 3]).unwrap();
        assert!((got - ((1.0 - lambda) * own + lambda * entropy)).abs() < 1e-12);
    }

    #[test]
    fn dml_three_students_matches_scalar_recomputation() {
        let cohort = CohortDistributions {
            rows: 2,
            vocab: 4,
            probs: vec![
                random_distributions(2, 4, 21),
                random_distributions(2, 4, 22),
                random_distributions(2, 4, 23),
            ],
        };
        let refs = [3, 0];
        let targets = one_hot_rows(&refs, 4);
        let lambda = 0.4;
        let k = 1;
        // Independent scalar recomputation of the interpolated objective.
        let mut expect = 0.0;
        for (r, &t) in refs.iter().enumerate() {
            expect -= libm::log(cohort.probs[k][r * 4 + t]);
        }
        expect /= 2.0;
        let mut mim = 0.0;
        for i in [0usize, 2] {
            let mut ce = 0.0;
            for r in 0..2 {
                for v in 0..4 {
                    ce -= cohort.probs[i][r * 4 + v] * libm::log(cohort.probs[k][r * 4 + v]);
                }
            }
            mim += ce / 2.0;
        }
        mim /= 2.0;
        expect = (1.0 - lambda) * expect + lambda * mim;
        let got = dml_loss(k, &cohort, &targets, &[true; 2], lambda).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn dml_lambda_without_peers_is_an_error() {
        let cohort =
            CohortDistributions { rows: 1, vocab: 4, probs: vec![random_distributions(1, 4, 31)] };
        let targets = one_hot_rows(&[1], 4);
        assert!(dml_loss(0, &cohort, &targets, &[true], 0.4).is_err());
    }

    #[test]
    fn kd_cases() {
        let refs = [2, 1];
        let student = random_distributions(2, 4, 41);
        let teacher = random_distributions(2, 4, 42);
        let targets = one_hot_rows(&refs, 4);
        let mask = [true; 2];
        // weight 0 -> plain mle.
        let a = kd_loss(&student, &teacher, 2, 4, &targets, &mask, 0.0).unwrap();
        let b = mle_loss(&student, 2, 4, &refs, &mask).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        // teacher == student -> mimicry term is the student's entropy.
        let w = 0.4;
        let c = kd_loss(&student, &student, 2, 4, &targets, &mask, w).unwrap();
        let h = mimicry_loss(&student, &student, 2, 4, &mask).unwrap();
        assert!((c - ((1.0 - w) * b + w * h)).abs() < 1e-12);
        // Scalar recomputation at weight 0.4.
        let mut mim = 0.0;
        for r in 0..2 {
            for v in 0..4 {
                mim -= teacher[r * 4 + v] * libm::log(student[r * 4 + v]);
            }
        }
        mim /= 2.0;
        let expect = (1.0 - w) * b + w * mim;
        let d = kd_loss(&student, &teacher, 2, 4, &targets, &mask, w).unwrap();
        assert!((d - expect).abs() < 1e-12);
    }

    #[test]
    fn objective_config_validation() {
        let mut cfg = ObjectiveConfig { lambda: 0.4, ..Default::default() };
        assert!(cfg.validate(2, false).is_ok());
        assert!(cfg.validate(1, false).is_err());
        cfg.lambda = 0.0;
        assert!(cfg.validate(1, false).is_ok());
        cfg.kd_weight = Some(0.4);
        assert!(cfg.validate(1, false).is_err(), "kd needs a teacher");
        assert!(cfg.validate(1, true).is_ok());
        cfg.lambda = 0.2;
        assert!(cfg.validate(2, true).is_err(), "kd and dml are exclusive");
        cfg.kd_weight = None;
        cfg.alpha = 1.2;
        assert!(cfg.validate(2, false).is_err());
    }

    #[test]
    fn cohort_distribution_validation_catches_bad_rows() {
        let mut probs = random_distributions(2, 3, 51);
        probs[0] += 0.5;
        let cohort = CohortDistributions { rows: 2, vocab: 3, probs: vec![probs] };
        assert!(cohort.validate().is_err());
    }
}
