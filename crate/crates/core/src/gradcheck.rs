//! Central finite-difference verification of every training objective.
//!
//! For a toy model every parameter's reverse-mode gradient is compared
//! against (f(x+h) - f(x-h)) / 2h computed through the exact same loss
//! evaluation path. Peer and teacher distributions are fixed snapshots, so
//! the objective under test is a deterministic scalar function of the probed
//! student's parameters.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::augment::SpecAugmentConfig;
use crate::data::{generate_task, SyntheticTaskConfig, TaskData};
use crate::error::Result;
use crate::model::{ModelConfig, ModelParams};
use crate::objectives::{student_utterance_forward, ForwardSpec, ObjectiveConfig, UtteranceView};
use crate::trainer::{student_utterance_eval, StudentEvalSpec};

/// Gradient agreement tolerance.
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Per-objective check result.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub objective: String,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked_params: usize,
    pub passed: bool,
}

/// Toy model used by the whole gradient suite.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        num_encoder_blocks: 1,
        num_decoder_blocks: 1,
        model_dim: 8,
        ffn_dim: 16,
        num_heads: 1,
        vocab_size: 5,
        feature_dim: 4,
        dropout_rate: 0.0,
        max_positions: 64,
    }
}

/// Tiny synthetic task matching the toy model.
pub fn toy_task() -> Result<TaskData> {
    generate_task(&SyntheticTaskConfig {
        vocab_size: 5,
        feature_dim: 4,
        frames_per_token: 4,
        noise_std: 0.3,
        len_min: 1,
        len_max: 2,
        train_size: 2,
        valid_size: 1,
        test_size: 1,
        seed: 1234,
    })
}

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = libm::fmax(libm::fmax(a.abs(), b.abs()), 1e-6);
    (a - b).abs() / denom
}

fn flatten(params: &ModelParams) -> (Vec<f64>, Vec<(String, usize, usize)>) {
    let mut flat = Vec::new();
    let mut spans = Vec::new();
    params.for_each(&mut |name, t| {
        spans.push((name, flat.len(), t.numel()));
        flat.extend_from_slice(&t.data);
    });
    (flat, spans)
}

fn unflatten(template: &ModelParams, flat: &[f64]) -> ModelParams {
    let mut out = template.clone();
    let mut offset = 0;
    out.for_each_mut(&mut |t| {
        let n = t.numel();
        t.data.copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    });
    out
}

struct CheckSetup<'a> {
    spec: StudentEvalSpec,
    views: Vec<UtteranceView<'a>>,
    /// Detached peer (or teacher) snapshots, one list per utterance.
    peers_per_utt: Vec<Vec<Vec<f64>>>,
}

impl<'a> CheckSetup<'a> {
    fn loss(&self, params: &ModelParams) -> Result<f64> {
        let mut total = 0.0;
        for (u, view) in self.views.iter().enumerate() {
            let peers: Vec<&[f64]> = self.peers_per_utt[u].iter().map(|p| p.as_slice()).collect();
            let (t, _, _, _) =
                student_utterance_eval(params, &self.spec, view, u as u64, &peers, false)?;
            total += t;
        }
        Ok(total)
    }

    fn autodiff_grads(&self, params: &ModelParams) -> Result<Vec<f64>> {
        let mut acc: Vec<f64> = Vec::new();
        for (u, view) in self.views.iter().enumerate() {
            let peers: Vec<&[f64]> = self.peers_per_utt[u].iter().map(|p| p.as_slice()).collect();
            let (_, _, _, grads) =
                student_utterance_eval(params, &self.spec, view, u as u64, &peers, true)?;
            let grads = grads.unwrap();
            if acc.is_empty() {
                acc = grads;
            } else {
                for (a, g) in acc.iter_mut().zip(grads) {
                    *a += g;
                }
            }
        }
        Ok(acc)
    }
}

/// Check one objective configuration: reverse-mode gradient of the probed
/// student against central finite differences over every parameter.
/// `sabotage` corrupts one gradient component first (negative control).
fn check_with_setup(
    name: &str,
    params: &ModelParams,
    setup: &CheckSetup<'_>,
    sabotage: bool,
) -> Result<GradCheckReport> {
    let mut auto = setup.autodiff_grads(params)?;
    if sabotage {
        auto[0] += 1.0;
    }
    let (flat, spans) = flatten(params);
    let mut max_rel = 0.0;
    let mut worst = String::new();
    for j in 0..flat.len() {
        let mut plus = flat.clone();
        plus[j] += FD_STEP;
        let mut minus = flat.clone();
        minus[j] -= FD_STEP;
        let lp = setup.loss(&unflatten(params, &plus))?;
        let lm = setup.loss(&unflatten(params, &minus))?;
        let fd = (lp - lm) / (2.0 * FD_STEP);
        let re = rel_err(auto[j], fd);
        if re > max_rel {
            max_rel = re;
            let (pname, start, len) = spans
                .iter()
                .find(|(_, s, l)| j >= *s && j < s + l)
                .cloned()
                .unwrap_or((String::from("?"), 0, 0));
            let _ = len;
            worst = format!("{pname}[{}]", j - start);
        }
    }
    Ok(GradCheckReport {
        objective: String::from(name),
        max_rel_err: max_rel,
        worst_param: worst,
        checked_params: flat.len(),
        passed: max_rel < GRAD_REL_TOL,
    })
}

fn toy_sa_cfg() -> SpecAugmentConfig {
    SpecAugmentConfig {
        num_freq_masks: 1,
        num_time_masks: 1,
        max_freq_width: 2,
        max_time_width: 3,
        fill_value: 0.0,
    }
}

/// The standard objective grid: plain MLE, each technique alone, mutual
/// learning plain and with each technique, everything combined, and frozen
/// teacher distillation.
pub fn standard_objectives() -> Vec<(&'static str, ObjectiveConfig)> {
    let base = ObjectiveConfig {
        alpha: 0.1,
        lambda: 0.0,
        label_smoothing: false,
        scheduled_sampling: false,
        spec_augment: false,
        kd_weight: None,
    };
    vec![
        ("mle", base.clone()),
        ("label_smoothing", ObjectiveConfig { label_smoothing: true, ..base.clone() }),
        ("scheduled_sampling", ObjectiveConfig { scheduled_sampling: true, ..base.clone() }),
        ("spec_augment", ObjectiveConfig { spec_augment: true, ..base.clone() }),
        ("dml", ObjectiveConfig { lambda: 0.4, ..base.clone() }),
        (
            "dml_label_smoothing",
            ObjectiveConfig { lambda: 0.4, label_smoothing: true, ..base.clone() },
        ),
        (
            "dml_scheduled_sampling",
            ObjectiveConfig { lambda: 0.4, scheduled_sampling: true, ..base.clone() },
        ),
        ("dml_spec_augment", ObjectiveConfig { lambda: 0.4, spec_augment: true, ..base.clone() }),
        (
            "dml_combined",
            ObjectiveConfig {
                lambda: 0.4,
                label_smoothing: true,
                scheduled_sampling: true,
                spec_augment: true,
                ..base.clone()
            },
        ),
        ("kd", ObjectiveConfig { kd_weight: Some(0.4), ..base }),
    ]
}

/// Nudge every parameter off its initialization point. Freshly initialized
/// biases are exactly zero, and zero-filled masked cells then land the ReLU
/// pre-activations exactly on the kink, where the loss is not
/// differentiable; a generic point avoids that measure-zero pathology.
fn jitter(params: &mut ModelParams, seed: u64) {
    use rand::Rng;
    let mut rng = crate::rng::simple_stream(seed, crate::rng::Domain::Init);
    params.for_each_mut(&mut |t| {
        for v in &mut t.data {
            *v += rng.gen::<f64>() * 0.1 - 0.05;
        }
    });
}

/// Run the whole gradient suite on the toy model. With `sabotage` set, one
/// gradient component is corrupted so every report must fail — the negative
/// control for the harness itself.
pub fn run_standard_checks(sabotage: bool) -> Result<Vec<GradCheckReport>> {
    let task = toy_task()?;
    let cfg = toy_model_config();
    let mut probed = ModelParams::init(&cfg, 71)?;
    let mut peer = ModelParams::init(&cfg, 72)?;
    let mut teacher = ModelParams::init(&cfg, 73)?;
    jitter(&mut probed, 901);
    jitter(&mut peer, 902);
    jitter(&mut teacher, 903);
    let probed_seed = 810u64;
    let peer_seed = 811u64;
    let teacher_seed = 812u64;
    let sampling_p = 0.5;

    // Materialize the two train utterances as one batch.
    let corpus = &task.train;
    let mats: Vec<(Vec<f64>, usize, Vec<usize>, Vec<usize>)> = (0..corpus.len())
        .map(|i| {
            let feats = corpus.standardized_feats(i);
            let frames = corpus.utterances[i].frames;
            let (dec, tgt) = corpus.sequences(i);
            (feats, frames, dec, tgt)
        })
        .collect();
    let views: Vec<UtteranceView<'_>> = mats
        .iter()
        .map(|(feats, frames, dec, tgt)| UtteranceView {
            feats,
            feat_rows: *frames,
            valid_frames: *frames,
            dec_input: dec,
            targets: tgt,
        })
        .collect();
    let total_tokens: usize = views.iter().map(|v| v.targets.len()).sum();
    let inv_norm = 1.0 / total_tokens as f64;

    let mut reports = Vec::new();
    for (name, obj) in standard_objectives() {
        let p = if obj.scheduled_sampling { sampling_p } else { 0.0 };
        let sa = if obj.spec_augment { Some(toy_sa_cfg()) } else { None };
        let lambda_eff = obj.kd_weight.unwrap_or(obj.lambda);

        // Detached peer/teacher snapshots under their own contexts.
        let mut peers_per_utt: Vec<Vec<Vec<f64>>> = vec![Vec::new(); views.len()];
        if lambda_eff > 0.0 {
            let (other, other_seed) = if obj.kd_weight.is_some() {
                (&teacher, teacher_seed)
            } else {
                (&peer, peer_seed)
            };
            for (u, view) in views.iter().enumerate() {
                let fwd = ForwardSpec {
                    seed: other_seed,
                    epoch: 0,
                    batch_index: 0,
                    sampling_p: p,
                    spec_augment: sa.clone(),
                    dropout: false,
                };
                let uf = student_utterance_forward(other, &fwd, view, u as u64, false)?;
                peers_per_utt[u].push(uf.prob_values);
            }
        }

        let setup = CheckSetup {
            spec: StudentEvalSpec {
                seed: probed_seed,
                epoch: 0,
                batch_index: 0,
                sampling_p: p,
                spec_augment: sa,
                alpha: obj.effective_alpha(),
                lambda: lambda_eff,
                dropout: false,
                inv_norm,
            },
            views: views.clone(),
            peers_per_utt,
        };
        reports.push(check_with_setup(name, &probed, &setup, sabotage)?);
    }
    Ok(reports)
}
