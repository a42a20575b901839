//! Joint cohort optimization.
//!
//! Each mini-batch step runs in three phases. Phase 1 computes every
//! student's (and, for distillation, the frozen teacher's) per-position
//! distributions on the shared batch, each under its own seeded stochastic
//! context; the results are detached snapshots. Phase 2 builds every
//! student's loss from its own recorded forward plus the phase-1 peer
//! snapshots and runs backward. Phase 3 applies per-student gradient
//! clipping and Adam updates. Updates always use the phase-1 snapshots
//! (synchronous update), so reordering or parallelizing students cannot
//! change any result.
//!
//! All randomness is pre-seeded per (student, epoch, batch, utterance), and
//! every cross-utterance reduction runs in a fixed order, so runs are
//! byte-reproducible regardless of the executor's worker count.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::augment::{sampling_probability, SamplingSchedule, SpecAugmentConfig};
use crate::data::{make_batches, Batch, Corpus};
use crate::decode::{decode_utterance, micro_average};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::objectives::{
    build_utterance_loss, smooth_truth, student_utterance_forward, ForwardSpec, ObjectiveConfig,
    StudentLoss, UtteranceView,
};
use crate::rng::{default_student_seed, stream_seed, Domain};

/// Inverse-square-root warmup schedule:
/// lr = model_dim^-0.5 * min(step^-0.5, step * warmup^-1.5).
pub fn learning_rate(step: usize, model_dim: usize, warmup_steps: usize) -> Result<f64> {
    if step == 0 {
        return Err(Error::Contract(String::from("learning_rate is defined for steps >= 1")));
    }
    if model_dim == 0 || warmup_steps == 0 {
        return Err(Error::Config(String::from("model_dim and warmup_steps must be positive")));
    }
    let s = step as f64;
    let w = warmup_steps as f64;
    let scale = 1.0 / libm::sqrt(model_dim as f64);
    Ok(scale * libm::fmin(1.0 / libm::sqrt(s), s / (w * libm::sqrt(w))))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, cfg: AdamConfig) -> Self {
        let mut m = Vec::new();
        params.for_each(&mut |_, t| m.push(vec![0.0; t.numel()]));
        let v = m.clone();
        OptimizerState { cfg, m, v, step: 0 }
    }

    /// One Adam update with bias correction. Every parameter must carry a
    /// populated gradient; gradients are zeroed afterwards. A non-finite
    /// gradient aborts before any parameter changes.
    pub fn adam_step(&mut self, params: &mut ModelParams, lr: f64) -> Result<()> {
        let mut bad = false;
        let mut missing = false;
        params.for_each(&mut |_, t| match &t.grad {
            Some(g) => bad |= g.iter().any(|v| !v.is_finite()),
            None => missing = true,
        });
        if missing {
            return Err(Error::Contract(String::from("adam_step requires populated gradients")));
        }
        if bad {
            return Err(Error::Numeric(String::from("non-finite gradient in adam_step")));
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - libm::pow(beta1, t as f64);
        let bc2 = 1.0 - libm::pow(beta2, t as f64);
        let mut idx = 0;
        let m = &mut self.m;
        let v = &mut self.v;
        params.for_each_mut(&mut |tensor| {
            let g = tensor.grad.as_ref().unwrap().clone();
            let (ms, vs) = (&mut m[idx], &mut v[idx]);
            for i in 0..g.len() {
                ms[i] = beta1 * ms[i] + (1.0 - beta1) * g[i];
                vs[i] = beta2 * vs[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = ms[i] / bc1;
                let v_hat = vs[i] / bc2;
                tensor.data[i] -= lr * m_hat / (libm::sqrt(v_hat) + eps);
            }
            tensor.zero_grad();
            idx += 1;
        });
        Ok(())
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`. Returns
/// the pre-clip norm when clipping fired.
pub fn clip_global_norm(params: &mut ModelParams, max_norm: f64) -> Option<f64> {
    let mut sq = 0.0;
    params.for_each(&mut |_, t| {
        if let Some(g) = &t.grad {
            sq += g.iter().map(|&x| x * x).sum::<f64>();
        }
    });
    let norm = libm::sqrt(sq);
    if norm <= max_norm || norm == 0.0 {
        return None;
    }
    let scale = max_norm / norm;
    params.for_each_mut(&mut |t| {
        if let Some(g) = &mut t.grad {
            g.iter_mut().for_each(|x| *x *= scale);
        }
    });
    Some(norm)
}

/// Order-preserving work mapper. Implementations may fan the items out to
/// any number of workers; results come back in input order, so the caller's
/// reductions are schedule-independent.
pub trait Executor: Sync {
    fn map_vec<I: Send, T: Send, F: Fn(I) -> T + Sync>(&self, items: Vec<I>, f: F) -> Vec<T>;
}

/// In-process sequential executor.
pub struct Sequential;

impl Executor for Sequential {
    fn map_vec<I: Send, T: Send, F: Fn(I) -> T + Sync>(&self, items: Vec<I>, f: F) -> Vec<T> {
        items.into_iter().map(f).collect()
    }
}

/// One student's training state.
pub struct StudentState {
    pub params: ModelParams,
    pub opt: OptimizerState,
    /// Drives initialization, dropout, sampling, and deformation streams.
    pub seed: u64,
}

/// Per-step telemetry, one record per student.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub student: usize,
    pub lr: f64,
    pub loss: f64,
    pub mle_term: f64,
    pub mimicry_term: f64,
}

/// Per-epoch telemetry, one record per student.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub student: usize,
    pub valid_loss: f64,
    pub cer_greedy: f64,
}

/// Receiver for training telemetry and best-so-far checkpoints.
pub trait TrainSink {
    fn on_step(&mut self, _record: &StepRecord) {}
    fn on_epoch(&mut self, _record: &EpochRecord) {}
    fn on_checkpoint(&mut self, _student: usize, _params: &ModelParams, _valid_loss: f64) {}
    fn on_warning(&mut self, _student: usize, _message: &str) {}
}

pub struct NullSink;

impl TrainSink for NullSink {}

/// Sink that buffers everything; used by tests and probes.
#[derive(Default)]
pub struct MemorySink {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub warnings: Vec<(usize, String)>,
    pub checkpoints: Vec<(usize, f64)>,
}

impl TrainSink for MemorySink {
    fn on_step(&mut self, record: &StepRecord) {
        self.steps.push(record.clone());
    }
    fn on_epoch(&mut self, record: &EpochRecord) {
        self.epochs.push(record.clone());
    }
    fn on_checkpoint(&mut self, student: usize, _params: &ModelParams, valid_loss: f64) {
        self.checkpoints.push((student, valid_loss));
    }
    fn on_warning(&mut self, student: usize, message: &str) {
        self.warnings.push((student, String::from(message)));
    }
}

/// Everything the per-(student, utterance) evaluation worker needs.
#[derive(Debug, Clone)]
pub struct StudentEvalSpec {
    pub seed: u64,
    pub epoch: u64,
    pub batch_index: u64,
    /// Effective sampling probability (0 when the switch is off).
    pub sampling_p: f64,
    /// Effective feature-masking config (None when the switch is off).
    pub spec_augment: Option<SpecAugmentConfig>,
    /// Effective smoothing weight (0 when the switch is off).
    pub alpha: f64,
    /// Mimicry interpolation weight: lambda, or the distillation weight.
    pub lambda: f64,
    pub dropout: bool,
    pub inv_norm: f64,
}

/// Loss (and optionally the flat gradient vector in canonical parameter
/// order) of one student on one utterance, against detached peer snapshots.
pub fn student_utterance_eval(
    params: &ModelParams,
    spec: &StudentEvalSpec,
    view: &UtteranceView,
    utt_index: u64,
    peers: &[&[f64]],
    with_grads: bool,
) -> Result<(f64, f64, f64, Option<Vec<f64>>)> {
    let fwd = ForwardSpec {
        seed: spec.seed,
        epoch: spec.epoch,
        batch_index: spec.batch_index,
        sampling_p: spec.sampling_p,
        spec_augment: spec.spec_augment.clone(),
        dropout: spec.dropout,
    };
    let mut uf = student_utterance_forward(params, &fwd, view, utt_index, with_grads)?;
    let vocab = params.cfg.vocab_size;
    let targets = smooth_truth(view.targets, spec.alpha, vocab)?;
    let mask = vec![true; view.targets.len()];
    let terms = build_utterance_loss(
        &mut uf.graph,
        uf.probs,
        &targets,
        &mask,
        peers,
        spec.lambda,
        spec.inv_norm,
    )?;
    let total = uf.graph.scalar_value(terms.total);
    let grads = if with_grads {
        uf.graph.backward(terms.total)?;
        Some(uf.bound.grads_flat(&uf.graph))
    } else {
        None
    };
    Ok((total, terms.own_sum, terms.mimicry_sum, grads))
}

/// Distribution snapshots for one participant over a batch, one matrix per
/// utterance.
type Snapshots = Vec<Vec<f64>>;

fn phase1_snapshots<E: Executor>(
    params: &ModelParams,
    spec: &StudentEvalSpec,
    views: &[UtteranceView<'_>],
    exec: &E,
) -> Result<Snapshots> {
    let results = exec.map_vec((0..views.len()).collect(), |u| {
        let fwd = ForwardSpec {
            seed: spec.seed,
            epoch: spec.epoch,
            batch_index: spec.batch_index,
            sampling_p: spec.sampling_p,
            spec_augment: spec.spec_augment.clone(),
            dropout: spec.dropout,
        };
        student_utterance_forward(params, &fwd, &views[u], u as u64, false)
            .map(|uf| uf.prob_values)
    });
    results.into_iter().collect()
}

/// Outcome of one cohort step.
pub struct CohortStepOutcome {
    pub losses: Vec<StudentLoss>,
    /// Pre-clip gradient norm per student when clipping fired.
    pub clipped: Vec<Option<f64>>,
}

/// One synchronous mini-batch step over all K students (and an optional
/// frozen teacher). Any numeric failure aborts the whole step before any
/// parameter is updated.
#[allow(clippy::too_many_arguments)]
pub fn cohort_step<E: Executor>(
    students: &mut [StudentState],
    teacher: Option<(&ModelParams, u64)>,
    objective: &ObjectiveConfig,
    sa_cfg: &SpecAugmentConfig,
    sampling_p: f64,
    epoch: usize,
    batch_index: u64,
    batch: &Batch,
    lrs: &[f64],
    clip_norm: f64,
    exec: &E,
) -> Result<CohortStepOutcome> {
    let kn = students.len();
    if kn == 0 {
        return Err(Error::Contract(String::from("cohort_step with no students")));
    }
    objective.validate(kn, teacher.is_some())?;
    let views: Vec<UtteranceView<'_>> = (0..batch.size).map(|i| batch.utterance_view(i)).collect();
    let total_tokens = batch.total_tokens();
    let inv_norm = 1.0 / total_tokens as f64;
    let p = if objective.scheduled_sampling { sampling_p } else { 0.0 };
    let sa = if objective.spec_augment { Some(sa_cfg.clone()) } else { None };
    let alpha = objective.effective_alpha();

    let spec_for = |seed: u64, dropout: bool, lambda: f64| StudentEvalSpec {
        seed,
        epoch: epoch as u64,
        batch_index,
        sampling_p: p,
        spec_augment: sa.clone(),
        alpha,
        lambda,
        dropout,
        inv_norm,
    };

    // Phase 1: detached distribution snapshots, only where a mimicry term
    // will consume them.
    let kd = objective.kd_weight;
    let need_peer_snaps = kd.is_none() && objective.lambda > 0.0;
    let peer_snaps: Vec<Snapshots> = if need_peer_snaps {
        let mut all = Vec::with_capacity(kn);
        for st in students.iter() {
            all.push(phase1_snapshots(&st.params, &spec_for(st.seed, true, 0.0), &views, exec)?);
        }
        all
    } else {
        Vec::new()
    };
    let teacher_snaps: Option<Snapshots> = match (kd, teacher) {
        (Some(w), Some((tp, tseed))) if w > 0.0 => {
            Some(phase1_snapshots(tp, &spec_for(tseed, false, 0.0), &views, exec)?)
        }
        _ => None,
    };

    // Phase 2: recorded forwards, losses against the snapshots, backward.
    let lambda_eff = kd.unwrap_or(objective.lambda);
    let items: Vec<(usize, usize)> =
        (0..kn).flat_map(|k| (0..views.len()).map(move |u| (k, u))).collect();
    let students_ro: &[StudentState] = students;
    let results = exec.map_vec(items.clone(), |(k, u)| {
        let peers: Vec<&[f64]> = if let Some(ts) = &teacher_snaps {
            vec![ts[u].as_slice()]
        } else if need_peer_snaps {
            (0..kn).filter(|&i| i != k).map(|i| peer_snaps[i][u].as_slice()).collect()
        } else {
            Vec::new()
        };
        let spec = spec_for(students_ro[k].seed, true, lambda_eff);
        student_utterance_eval(&students_ro[k].params, &spec, &views[u], u as u64, &peers, true)
    });

    // Reduce in fixed (student, utterance) order.
    let mut losses = vec![StudentLoss::default(); kn];
    let mut grads: Vec<Vec<f64>> = vec![Vec::new(); kn];
    for ((k, _u), res) in items.into_iter().zip(results) {
        let (total, own_sum, mim_sum, flat) = res?;
        losses[k].total += total;
        losses[k].own_sum += own_sum;
        losses[k].mimicry_sum += mim_sum;
        let flat = flat.expect("phase 2 always computes gradients");
        if grads[k].is_empty() {
            grads[k] = flat;
        } else {
            for (a, b) in grads[k].iter_mut().zip(flat) {
                *a += b;
            }
        }
    }
    for l in &mut losses {
        l.own_mean = l.own_sum * inv_norm;
        l.mimicry_mean = l.mimicry_sum * inv_norm;
    }

    // Phase 3: clip + Adam per student, only after every backward succeeded.
    let mut clipped = Vec::with_capacity(kn);
    for (k, st) in students.iter_mut().enumerate() {
        st.params.zero_grads();
        let mut offset = 0;
        let flat = &grads[k];
        st.params.for_each_mut(&mut |t| {
            let n = t.numel();
            t.accumulate_grad(&flat[offset..offset + n]);
            offset += n;
        });
        clipped.push(clip_global_norm(&mut st.params, clip_norm));
        st.opt.adam_step(&mut st.params, lrs[k])?;
    }
    Ok(CohortStepOutcome { losses, clipped })
}

/// Trainer configuration; contains the cohort-level switches and seeds.
#[derive(Debug, Clone)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub max_epochs: usize,
    /// Early-stopping patience in non-improving epochs (by the best student
    /// validation loss). 0 stops at the first non-improving epoch.
    pub patience: usize,
    pub clip_norm: f64,
    pub global_seed: u64,
    /// Per-student seed overrides; derived from `global_seed` when absent.
    pub student_seeds: Option<Vec<u64>>,
    pub schedule: SamplingSchedule,
    pub sa_cfg: SpecAugmentConfig,
    pub objective: ObjectiveConfig,
    pub adam: AdamConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            batch_size: 32,
            warmup_steps: 4000,
            max_epochs: 100,
            patience: 5,
            clip_norm: 5.0,
            global_seed: 1,
            student_seeds: None,
            schedule: SamplingSchedule::default(),
            sa_cfg: SpecAugmentConfig::default(),
            objective: ObjectiveConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn resolve_seeds(&self, cohort_size: usize) -> Result<Vec<u64>> {
        match &self.student_seeds {
            Some(s) => {
                if s.len() != cohort_size {
                    return Err(Error::Config(format!(
                        "{} student seeds for {cohort_size} students",
                        s.len()
                    )));
                }
                Ok(s.clone())
            }
            None => Ok((0..cohort_size).map(|k| default_student_seed(self.global_seed, k)).collect()),
        }
    }

    pub fn teacher_seed(&self, cohort_size: usize) -> u64 {
        default_student_seed(self.global_seed, cohort_size)
    }
}

/// Initialize a cohort from per-student configs and seeds.
pub fn init_students(cfgs: &[ModelConfig], seeds: &[u64], adam: AdamConfig) -> Result<Vec<StudentState>> {
    if cfgs.len() != seeds.len() {
        return Err(Error::Config(format!("{} configs for {} seeds", cfgs.len(), seeds.len())));
    }
    cfgs.iter()
        .zip(seeds)
        .map(|(cfg, &seed)| {
            let params = ModelParams::init(cfg, seed)?;
            let opt = OptimizerState::new(&params, adam.clone());
            Ok(StudentState { params, opt, seed })
        })
        .collect()
}

/// Teacher-forced validation loss per student: plain token-mean MLE with no
/// smoothing, no sampling, no deformation, no dropout, no mimicry — so
/// numbers are comparable across every objective configuration.
pub fn validation_losses<E: Executor>(
    students: &[&ModelParams],
    seeds: &[u64],
    corpus: &Corpus,
    exec: &E,
) -> Result<Vec<f64>> {
    let kn = students.len();
    let items: Vec<usize> = (0..corpus.len()).collect();
    let per_utt = exec.map_vec(items, |i| -> Result<(Vec<f64>, usize)> {
        let feats = corpus.standardized_feats(i);
        let frames = corpus.utterances[i].frames;
        let (dec_input, targets) = corpus.sequences(i);
        let view = UtteranceView {
            feats: &feats,
            feat_rows: frames,
            valid_frames: frames,
            dec_input: &dec_input,
            targets: &targets,
        };
        let mut sums = Vec::with_capacity(kn);
        for (k, params) in students.iter().enumerate() {
            let spec = StudentEvalSpec {
                seed: seeds[k],
                epoch: 0,
                batch_index: 0,
                sampling_p: 0.0,
                spec_augment: None,
                alpha: 0.0,
                lambda: 0.0,
                dropout: false,
                inv_norm: 1.0,
            };
            let (sum, _, _, _) = student_utterance_eval(params, &spec, &view, i as u64, &[], false)?;
            sums.push(sum);
        }
        Ok((sums, targets.len()))
    });
    let mut totals = vec![0.0; kn];
    let mut tokens = 0usize;
    for r in per_utt {
        let (sums, t) = r?;
        for (k, s) in sums.into_iter().enumerate() {
            totals[k] += s;
        }
        tokens += t;
    }
    Ok(totals.into_iter().map(|s| s / tokens as f64).collect())
}

/// Mean pairwise mimicry loss over a corpus under teacher forcing: for every
/// ordered student pair (i, k), the token-mean cross-entropy of student k's
/// distribution under student i's. Shrinks as the cohort's predictions
/// agree (and sharpen).
pub fn validation_mimicry<E: Executor>(
    students: &[&ModelParams],
    seeds: &[u64],
    corpus: &Corpus,
    exec: &E,
) -> Result<f64> {
    let kn = students.len();
    if kn < 2 {
        return Err(Error::Contract(String::from("pairwise mimicry needs at least 2 students")));
    }
    let items: Vec<usize> = (0..corpus.len()).collect();
    let per_utt = exec.map_vec(items, |i| -> Result<(f64, usize)> {
        let feats = corpus.standardized_feats(i);
        let frames = corpus.utterances[i].frames;
        let (dec_input, targets) = corpus.sequences(i);
        let view = UtteranceView {
            feats: &feats,
            feat_rows: frames,
            valid_frames: frames,
            dec_input: &dec_input,
            targets: &targets,
        };
        let mut snaps = Vec::with_capacity(kn);
        for (k, params) in students.iter().enumerate() {
            let fwd = ForwardSpec::plain(seeds[k]);
            snaps.push(student_utterance_forward(params, &fwd, &view, i as u64, false)?.prob_values);
        }
        let vocab = students[0].cfg.vocab_size;
        let rows = targets.len();
        let mask = vec![true; rows];
        let mut sum = 0.0;
        for i_s in 0..kn {
            for k_s in 0..kn {
                if i_s == k_s {
                    continue;
                }
                let (v, _) = crate::objectives::cross_entropy_mean_value(
                    &snaps[k_s], &snaps[i_s], rows, vocab, &mask,
                )?;
                sum += v * rows as f64;
            }
        }
        Ok((sum / (kn * (kn - 1)) as f64, rows))
    });
    let mut total = 0.0;
    let mut tokens = 0usize;
    for r in per_utt {
        let (s, t) = r?;
        total += s;
        tokens += t;
    }
    Ok(total / tokens as f64)
}

/// Greedy character error rate of one model over a corpus.
pub fn greedy_cer<E: Executor>(params: &ModelParams, corpus: &Corpus, exec: &E) -> Result<f64> {
    let items: Vec<usize> = (0..corpus.len()).collect();
    let evals = exec.map_vec(items, |i| decode_utterance(params, corpus, i, 1));
    let evals: Result<Vec<_>> = evals.into_iter().collect();
    Ok(micro_average(&evals?))
}

/// Result of a full training run.
pub struct TrainOutcome {
    /// Best-so-far parameters and validation loss per student.
    pub best: Vec<(ModelParams, f64)>,
    pub final_params: Vec<ModelParams>,
    pub epochs_run: usize,
    pub total_steps: u64,
    /// Index of the student with the smallest best validation loss (ties
    /// break to the lowest index).
    pub selected_best: usize,
}

/// Model selection over per-student best checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    /// Smallest validation loss; ties break to the lowest student index.
    Best,
    /// A designated (compact) student index.
    Compact(usize),
}

pub fn select_model(best_valid: &[f64], mode: SelectionMode) -> Result<usize> {
    if best_valid.is_empty() {
        return Err(Error::Contract(String::from("no checkpoints to select from")));
    }
    match mode {
        SelectionMode::Best => {
            let mut best = 0;
            for (i, &v) in best_valid.iter().enumerate().skip(1) {
                if v < best_valid[best] {
                    best = i;
                }
            }
            Ok(best)
        }
        SelectionMode::Compact(i) => {
            if i >= best_valid.len() {
                return Err(Error::Config(format!(
                    "designated compact student {i} out of {} students",
                    best_valid.len()
                )));
            }
            Ok(i)
        }
    }
}

/// Full training loop: epoch over shuffled batches, synchronous cohort
/// steps, per-epoch teacher-forced validation and greedy error rate,
/// best-so-far checkpointing, and early stopping on the cohort's best
/// validation loss.
pub fn train<E: Executor, S: TrainSink>(
    train_corpus: &Corpus,
    valid_corpus: &Corpus,
    mut students: Vec<StudentState>,
    teacher: Option<&ModelParams>,
    cfg: &TrainerConfig,
    sink: &mut S,
    exec: &E,
) -> Result<TrainOutcome> {
    let kn = students.len();
    if kn == 0 {
        return Err(Error::Config(String::from("no students to train")));
    }
    cfg.objective.validate(kn, teacher.is_some())?;
    cfg.schedule.validate()?;
    if cfg.max_epochs == 0 {
        return Err(Error::Config(String::from("max_epochs must be >= 1")));
    }
    let teacher_seed = cfg.teacher_seed(kn);

    let mut best: Vec<Option<(ModelParams, f64)>> = (0..kn).map(|_| None).collect();
    let mut best_cohort = f64::INFINITY;
    let mut bad_epochs = 0usize;
    let mut step: u64 = 0;
    let mut epochs_run = 0;

    for epoch in 0..cfg.max_epochs {
        let shuffle = stream_seed(cfg.global_seed, Domain::Shuffle, epoch as u64, 0, 0);
        let batches = make_batches(train_corpus, cfg.batch_size, shuffle)?;
        let p = sampling_probability(epoch, &cfg.schedule);
        for (bi, batch) in batches.iter().enumerate() {
            step += 1;
            let lrs: Vec<f64> = students
                .iter()
                .map(|st| learning_rate(step as usize, st.params.cfg.model_dim, cfg.warmup_steps))
                .collect::<Result<_>>()?;
            let out = cohort_step(
                &mut students,
                teacher.map(|t| (t, teacher_seed)),
                &cfg.objective,
                &cfg.sa_cfg,
                p,
                epoch,
                bi as u64,
                batch,
                &lrs,
                cfg.clip_norm,
                exec,
            )?;
            for (k, loss) in out.losses.iter().enumerate() {
                if let Some(norm) = out.clipped[k] {
                    sink.on_warning(k, &format!("gradient norm {norm:.3} clipped at step {step}"));
                }
                sink.on_step(&StepRecord {
                    step,
                    epoch,
                    student: k,
                    lr: lrs[k],
                    loss: loss.total,
                    mle_term: loss.own_mean,
                    mimicry_term: loss.mimicry_mean,
                });
            }
        }
        epochs_run = epoch + 1;

        let params_ro: Vec<&ModelParams> = students.iter().map(|s| &s.params).collect();
        let seeds: Vec<u64> = students.iter().map(|s| s.seed).collect();
        let valid = validation_losses(&params_ro, &seeds, valid_corpus, exec)?;
        for (k, st) in students.iter().enumerate() {
            let cer = greedy_cer(&st.params, valid_corpus, exec)?;
            sink.on_epoch(&EpochRecord { epoch, student: k, valid_loss: valid[k], cer_greedy: cer });
            let improved = best[k].as_ref().map(|(_, b)| valid[k] < *b).unwrap_or(true);
            if improved {
                best[k] = Some((st.params.clone(), valid[k]));
                sink.on_checkpoint(k, &st.params, valid[k]);
            }
        }

        let cohort_best = valid.iter().cloned().fold(f64::INFINITY, f64::min);
        if cohort_best < best_cohort {
            best_cohort = cohort_best;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs > cfg.patience {
                break;
            }
        }
    }

    let best: Vec<(ModelParams, f64)> =
        best.into_iter().map(|b| b.expect("at least one epoch ran")).collect();
    let best_valid: Vec<f64> = best.iter().map(|(_, v)| *v).collect();
    let selected_best = select_model(&best_valid, SelectionMode::Best)?;
    Ok(TrainOutcome {
        best,
        final_params: students.into_iter().map(|s| s.params).collect(),
        epochs_run,
        total_steps: step,
        selected_best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_closed_form() {
        // Peak at step == warmup: model_dim^-0.5 * warmup^-0.5.
        let lr = learning_rate(4000, 256, 4000).unwrap();
        assert!((lr - 9.882117688026185e-4).abs() < 1e-18, "got {lr}");
        // Linear region below warmup.
        let a = learning_rate(10, 256, 4000).unwrap();
        let b = learning_rate(20, 256, 4000).unwrap();
        assert!((b / a - 2.0).abs() < 1e-12);
        // Peak is at the warmup step.
        let peak = learning_rate(4000, 256, 4000).unwrap();
        assert!(learning_rate(3999, 256, 4000).unwrap() < peak);
        assert!(learning_rate(4001, 256, 4000).unwrap() < peak);
        assert!(learning_rate(0, 256, 4000).is_err());
    }

    #[test]
    fn adam_zero_grads_leave_params_unchanged() {
        let cfg = crate::model::ModelConfig {
            num_encoder_blocks: 1,
            num_decoder_blocks: 1,
            model_dim: 8,
            ffn_dim: 8,
            num_heads: 1,
            vocab_size: 5,
            feature_dim: 3,
            dropout_rate: 0.0,
            max_positions: 16,
        };
        let mut params = ModelParams::init(&cfg, 3).unwrap();
        let before = params.clone();
        params.zero_grads();
        // zero_grad only touches existing accumulators; force-populate all.
        params.for_each_mut(&mut |t| t.accumulate_grad(&vec![0.0; t.numel()]));
        let mut opt = OptimizerState::new(&params, AdamConfig::default());
        opt.adam_step(&mut params, 1e-3).unwrap();
        let mut same = true;
        let mut i = 0;
        before.for_each(&mut |_, t| {
            let mut other = None;
            let mut j = 0;
            params.for_each(&mut |_, t2| {
                if j == i {
                    other = Some(t2.data.clone());
                }
                j += 1;
            });
            same &= t.data == other.unwrap();
            i += 1;
        });
        assert!(same);
    }

    #[test]
    fn adam_single_scalar_matches_hand_formula() {
        // One step on a single scalar parameter: m̂ = g, v̂ = g², so the
        // update is lr * g / (|g| + eps).
        let mut t = crate::tensor::Tensor::param(vec![1], vec![2.0]).unwrap();
        let g = -0.37;
        t.accumulate_grad(&[g]);
        let acfg = AdamConfig::default();
        let beta1 = acfg.beta1;
        let beta2 = acfg.beta2;
        let eps = acfg.eps;
        let lr = 0.01;
        // Hand recomputation of one bias-corrected step.
        let m = (1.0 - beta1) * g / (1.0 - beta1);
        let v = (1.0 - beta2) * g * g / (1.0 - beta2);
        let expect = 2.0 - lr * m / (libm::sqrt(v) + eps);

        // Run through a one-parameter stand-in model by reusing the moment
        // machinery directly.
        let mut m_s = 0.0;
        let mut v_s = 0.0;
        m_s = beta1 * m_s + (1.0 - beta1) * g;
        v_s = beta2 * v_s + (1.0 - beta2) * g * g;
        let m_hat = m_s / (1.0 - beta1);
        let v_hat = v_s / (1.0 - beta2);
        let got = 2.0 - lr * m_hat / (libm::sqrt(v_hat) + eps);
        assert!((got - expect).abs() < 1e-15);
        assert!((got - (2.0 - lr * g / (g.abs() + eps))).abs() < 1e-12);
    }

    #[test]
    fn selection_rules() {
        assert_eq!(select_model(&[0.5, 0.4, 0.4], SelectionMode::Best).unwrap(), 1);
        assert_eq!(select_model(&[0.5], SelectionMode::Best).unwrap(), 0);
        assert_eq!(select_model(&[0.5, 0.1], SelectionMode::Compact(0)).unwrap(), 0);
        assert!(select_model(&[0.5, 0.1], SelectionMode::Compact(4)).is_err());
        assert!(select_model(&[], SelectionMode::Best).is_err());
    }

    #[test]
    fn clip_fires_only_above_threshold() {
        let cfg = crate::model::ModelConfig {
            num_encoder_blocks: 1,
            num_decoder_blocks: 1,
            model_dim: 8,
            ffn_dim: 8,
            num_heads: 1,
            vocab_size: 5,
            feature_dim: 3,
            dropout_rate: 0.0,
            max_positions: 16,
        };
        let mut params = ModelParams::init(&cfg, 5).unwrap();
        params.for_each_mut(&mut |t| t.accumulate_grad(&vec![1.0; t.numel()]));
        let n = params.num_scalars() as f64;
        let norm = libm::sqrt(n);
        assert!(clip_global_norm(&mut params, norm + 1.0).is_none());
        let fired = clip_global_norm(&mut params, 1.0).unwrap();
        assert!((fired - norm).abs() < 1e-9);
        let mut sq = 0.0;
        params.for_each(&mut |_, t| sq += t.grad.as_ref().unwrap().iter().map(|g| g * g).sum::<f64>());
        assert!((libm::sqrt(sq) - 1.0).abs() < 1e-9);
    }
}
