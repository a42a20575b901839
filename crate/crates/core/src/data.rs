//! Synthetic transduction tasks and mini-batch assembly.
//!
//! Each vocabulary symbol owns a fixed prototype feature vector drawn once
//! per task; an utterance emits `frames_per_token` noisy copies of its
//! tokens' prototypes in order. The result keeps the time-compression
//! structure the subsampler expects (several frames per output token) while
//! staying fully synthetic and seed-reproducible.
//!
//! Features are stored raw; per-channel standardization statistics computed
//! on the train split travel with every corpus and are applied when batches
//! (or evaluation views) are assembled, so a zero fill value after masking
//! sits at the channel mean.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{EOS, FIRST_CONTENT_TOKEN, PAD, SOS};
use crate::rng::{gaussian, stream, Domain};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskConfig {
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// Feature frames emitted per token; at least 4 so a one-token
    /// utterance still survives the 4x subsampler.
    pub frames_per_token: usize,
    pub noise_std: f64,
    pub len_min: usize,
    pub len_max: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        SyntheticTaskConfig {
            vocab_size: 16,
            feature_dim: 8,
            frames_per_token: 4,
            noise_std: 0.5,
            len_min: 3,
            len_max: 8,
            train_size: 2000,
            valid_size: 200,
            test_size: 200,
            seed: 7,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size {} too small: needs PAD, SOS, EOS plus one symbol",
                self.vocab_size
            )));
        }
        if self.frames_per_token < 4 {
            return Err(Error::Config(format!(
                "frames_per_token {} too small: the subsampler needs 4 frames",
                self.frames_per_token
            )));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config(format!("noise_std {} negative", self.noise_std)));
        }
        if self.len_min < 1 || self.len_min > self.len_max {
            return Err(Error::Config(format!(
                "utterance length range [{}, {}] invalid",
                self.len_min, self.len_max
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config(String::from("feature_dim must be positive")));
        }
        if self.train_size == 0 {
            return Err(Error::Config(String::from("train split must be non-empty")));
        }
        Ok(())
    }
}

/// One utterance: content tokens (no SOS/EOS) and raw feature frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub tokens: Vec<usize>,
    /// Row-major [frames x feature_dim], unstandardized.
    pub feats: Vec<f64>,
    pub frames: usize,
}

/// Per-channel standardization statistics, always from the train split.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    pub fn identity(dim: usize) -> Self {
        FeatureNorm { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub cfg: SyntheticTaskConfig,
    pub norm: FeatureNorm,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Standardized copy of one utterance's features.
    pub fn standardized_feats(&self, index: usize) -> Vec<f64> {
        let u = &self.utterances[index];
        let dim = self.cfg.feature_dim;
        let mut out = u.feats.clone();
        for r in 0..u.frames {
            for c in 0..dim {
                out[r * dim + c] = (out[r * dim + c] - self.norm.mean[c]) / self.norm.std[c];
            }
        }
        out
    }

    /// Decoder input (SOS + tokens) and targets (tokens + EOS).
    pub fn sequences(&self, index: usize) -> (Vec<usize>, Vec<usize>) {
        let t = &self.utterances[index].tokens;
        let mut dec_input = Vec::with_capacity(t.len() + 1);
        dec_input.push(SOS);
        dec_input.extend_from_slice(t);
        let mut targets = Vec::with_capacity(t.len() + 1);
        targets.extend_from_slice(t);
        targets.push(EOS);
        (dec_input, targets)
    }
}

/// Generated corpora plus the prototype matrix they were emitted from.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Corpus,
    pub valid: Corpus,
    pub test: Corpus,
    /// [vocab_size x feature_dim] prototype vectors.
    pub prototypes: Vec<f64>,
}

fn generate_split(
    cfg: &SyntheticTaskConfig,
    prototypes: &[f64],
    split_id: u64,
    count: usize,
) -> Vec<Utterance> {
    let dim = cfg.feature_dim;
    let mut rng = stream(cfg.seed, Domain::DataSplit, split_id, 0, 0);
    (0..count)
        .map(|_| {
            let len = rng.gen_range(cfg.len_min..=cfg.len_max);
            let tokens: Vec<usize> =
                (0..len).map(|_| rng.gen_range(FIRST_CONTENT_TOKEN..cfg.vocab_size)).collect();
            let frames = len * cfg.frames_per_token;
            let mut feats = Vec::with_capacity(frames * dim);
            for &t in &tokens {
                for _ in 0..cfg.frames_per_token {
                    for c in 0..dim {
                        feats.push(prototypes[t * dim + c] + cfg.noise_std * gaussian(&mut rng));
                    }
                }
            }
            Utterance { tokens, feats, frames }
        })
        .collect()
}

/// Generate disjoint train/valid/test corpora from `cfg.seed`. The
/// standardization statistics of all three corpora come from the train
/// split.
pub fn generate_task(cfg: &SyntheticTaskConfig) -> Result<TaskData> {
    cfg.validate()?;
    let dim = cfg.feature_dim;
    let mut proto_rng = stream(cfg.seed, Domain::DataProto, 0, 0, 0);
    let prototypes: Vec<f64> =
        (0..cfg.vocab_size * dim).map(|_| gaussian(&mut proto_rng)).collect();

    let train_utts = generate_split(cfg, &prototypes, 0, cfg.train_size);
    let valid_utts = generate_split(cfg, &prototypes, 1, cfg.valid_size);
    let test_utts = generate_split(cfg, &prototypes, 2, cfg.test_size);

    // Per-channel moments over every train frame.
    let mut mean = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    let mut count = 0usize;
    for u in &train_utts {
        for r in 0..u.frames {
            for c in 0..dim {
                let v = u.feats[r * dim + c];
                mean[c] += v;
                sq[c] += v * v;
            }
        }
        count += u.frames;
    }
    let n = count as f64;
    for c in 0..dim {
        mean[c] /= n;
        let var = sq[c] / n - mean[c] * mean[c];
        sq[c] = libm::sqrt(var.max(0.0)).max(1e-8);
    }
    let norm = FeatureNorm { mean, std: sq };

    Ok(TaskData {
        train: Corpus { cfg: cfg.clone(), norm: norm.clone(), utterances: train_utts },
        valid: Corpus { cfg: cfg.clone(), norm: norm.clone(), utterances: valid_utts },
        test: Corpus { cfg: cfg.clone(), norm, utterances: test_utts },
        prototypes,
    })
}

/// Additional disjoint test corpora beyond the standard three splits, drawn
/// from split streams 3, 4, ... of the same task seed. They carry the same
/// train-split standardization statistics.
pub fn generate_extra_tests(task: &TaskData, count: usize) -> Vec<Corpus> {
    let cfg = &task.train.cfg;
    (0..count)
        .map(|i| Corpus {
            cfg: cfg.clone(),
            norm: task.train.norm.clone(),
            utterances: generate_split(cfg, &task.prototypes, 3 + i as u64, cfg.test_size),
        })
        .collect()
}

/// One padded mini-batch. Feature slabs are standardized; masks delimit the
/// true lengths exactly, PAD fills the remainder.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub feat_rows: usize,
    pub feature_dim: usize,
    /// [size x feat_rows x feature_dim].
    pub feats: Vec<f64>,
    /// [size x feat_rows].
    pub frame_mask: Vec<bool>,
    pub frame_len: Vec<usize>,
    pub token_cols: usize,
    /// Padded target matrix [size x token_cols]: tokens + EOS, then PAD.
    pub targets: Vec<usize>,
    /// [size x token_cols].
    pub token_mask: Vec<bool>,
    pub token_len: Vec<usize>,
    /// Decoder inputs (SOS + tokens), true length per utterance.
    pub dec_inputs: Vec<Vec<usize>>,
    /// Corpus index of each utterance.
    pub corpus_indices: Vec<usize>,
}

impl Batch {
    pub fn total_tokens(&self) -> usize {
        self.token_len.iter().sum()
    }

    /// Borrow utterance `i` as the model consumes it: padded feature slab
    /// with valid length, decoder input, and true-length target slice.
    pub fn utterance_view(&self, i: usize) -> crate::objectives::UtteranceView<'_> {
        let fs = self.feat_rows * self.feature_dim;
        crate::objectives::UtteranceView {
            feats: &self.feats[i * fs..(i + 1) * fs],
            feat_rows: self.feat_rows,
            valid_frames: self.frame_len[i],
            dec_input: &self.dec_inputs[i],
            targets: &self.targets[i * self.token_cols..i * self.token_cols + self.token_len[i]],
        }
    }
}

/// Shuffle the corpus with `shuffle_seed` and pack it into padded batches.
/// Every utterance appears exactly once; the final batch may be short.
pub fn make_batches(corpus: &Corpus, batch_size: usize, shuffle_seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config(String::from("batch_size must be >= 1")));
    }
    if corpus.is_empty() {
        return Err(Error::Config(String::from("cannot batch an empty corpus")));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = stream(shuffle_seed, Domain::Shuffle, 0, 0, 0);
    order.shuffle(&mut rng);

    let dim = corpus.cfg.feature_dim;
    let mut batches = Vec::with_capacity(order.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let size = chunk.len();
        let feat_rows = chunk.iter().map(|&i| corpus.utterances[i].frames).max().unwrap();
        let token_cols = chunk.iter().map(|&i| corpus.utterances[i].tokens.len() + 1).max().unwrap();
        let mut feats = vec![0.0; size * feat_rows * dim];
        let mut frame_mask = vec![false; size * feat_rows];
        let mut frame_len = Vec::with_capacity(size);
        let mut targets = vec![PAD; size * token_cols];
        let mut token_mask = vec![false; size * token_cols];
        let mut token_len = Vec::with_capacity(size);
        let mut dec_inputs = Vec::with_capacity(size);
        for (row, &ci) in chunk.iter().enumerate() {
            let u = &corpus.utterances[ci];
            let std_feats = corpus.standardized_feats(ci);
            feats[row * feat_rows * dim..row * feat_rows * dim + u.frames * dim]
                .copy_from_slice(&std_feats);
            for r in 0..u.frames {
                frame_mask[row * feat_rows + r] = true;
            }
            frame_len.push(u.frames);
            let (dec_input, tgt) = corpus.sequences(ci);
            for (c, &t) in tgt.iter().enumerate() {
                targets[row * token_cols + c] = t;
                token_mask[row * token_cols + c] = true;
            }
            token_len.push(tgt.len());
            dec_inputs.push(dec_input);
        }
        batches.push(Batch {
            size,
            feat_rows,
            feature_dim: dim,
            feats,
            frame_mask,
            frame_len,
            token_cols,
            targets,
            token_mask,
            token_len,
            dec_inputs,
            corpus_indices: chunk.to_vec(),
        });
    }
    Ok(batches)
}
