//! Binary file formats.
//!
//! Both formats are little-endian with fixed-width fields and are stable
//! across versions; parse failures report the byte offset.
//!
//! Corpus (`.msqc`):
//!
//! ```text
//! magic  b"MSQC"
//! u32    version (1)
//! u32    vocab_size        u32 feature_dim      u32 frames_per_token
//! f64    noise_std         u32 len_min          u32 len_max
//! u32    train_size        u32 valid_size       u32 test_size
//! u64    seed
//! f64[feature_dim]  per-channel mean (train-split statistics)
//! f64[feature_dim]  per-channel std
//! u32    utterance count
//! per utterance:
//!   u32 token_count, u32[token_count] token ids,
//!   u32 frame_count, f64[frame_count * feature_dim] raw features
//! ```
//!
//! Checkpoint (`.ckpt`):
//!
//! ```text
//! magic  b"MSQK"
//! u32    version (1)
//! u32    num_encoder_blocks   u32 num_decoder_blocks  u32 model_dim
//! u32    ffn_dim              u32 num_heads           u32 vocab_size
//! u32    feature_dim          f64 dropout_rate        u32 max_positions
//! u32    tensor count
//! per tensor (canonical traversal order):
//!   u32 name length, utf-8 name, u32 ndim, u32[ndim] dims, f64[] data
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use mutualseq_core::data::{Corpus, FeatureNorm, SyntheticTaskConfig, Utterance};
use mutualseq_core::model::{ModelConfig, ModelParams};

const CORPUS_MAGIC: &[u8; 4] = b"MSQC";
const CHECKPOINT_MAGIC: &[u8; 4] = b"MSQK";
const FORMAT_VERSION: u32 = 1;

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn new(inner: R) -> Self {
        CountingReader { inner, offset: 0 }
    }

    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner
            .read_exact(buf)
            .with_context(|| format!("truncated {what} at byte offset {}", self.offset))?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }

    fn f64_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; n * 8];
        self.read_exact(&mut bytes, what)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    w.write_all(CORPUS_MAGIC)?;
    write_u32(&mut w, FORMAT_VERSION)?;
    let c = &corpus.cfg;
    for v in [c.vocab_size, c.feature_dim, c.frames_per_token] {
        write_u32(&mut w, v as u32)?;
    }
    write_f64(&mut w, c.noise_std)?;
    for v in [c.len_min, c.len_max, c.train_size, c.valid_size, c.test_size] {
        write_u32(&mut w, v as u32)?;
    }
    write_u64(&mut w, c.seed)?;
    for &m in &corpus.norm.mean {
        write_f64(&mut w, m)?;
    }
    for &s in &corpus.norm.std {
        write_f64(&mut w, s)?;
    }
    write_u32(&mut w, corpus.utterances.len() as u32)?;
    for u in &corpus.utterances {
        write_u32(&mut w, u.tokens.len() as u32)?;
        for &t in &u.tokens {
            write_u32(&mut w, t as u32)?;
        }
        write_u32(&mut w, u.frames as u32)?;
        for &f in &u.feats {
            write_f64(&mut w, f)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut r = CountingReader::new(BufReader::new(file));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic, "corpus magic")?;
    if &magic != CORPUS_MAGIC {
        bail!("{}: not a corpus file (bad magic at byte offset 0)", path.display());
    }
    let version = r.u32("corpus version")?;
    if version != FORMAT_VERSION {
        bail!("{}: unsupported corpus version {version}", path.display());
    }
    let vocab_size = r.u32("vocab_size")? as usize;
    let feature_dim = r.u32("feature_dim")? as usize;
    let frames_per_token = r.u32("frames_per_token")? as usize;
    let noise_std = r.f64("noise_std")?;
    let len_min = r.u32("len_min")? as usize;
    let len_max = r.u32("len_max")? as usize;
    let train_size = r.u32("train_size")? as usize;
    let valid_size = r.u32("valid_size")? as usize;
    let test_size = r.u32("test_size")? as usize;
    let seed = r.u64("seed")?;
    let mean = r.f64_vec(feature_dim, "norm mean")?;
    let std = r.f64_vec(feature_dim, "norm std")?;
    let count = r.u32("utterance count")? as usize;
    let mut utterances = Vec::with_capacity(count);
    for i in 0..count {
        let token_count = r.u32("token count")? as usize;
        let mut tokens = Vec::with_capacity(token_count);
        for _ in 0..token_count {
            let t = r.u32("token id")? as usize;
            if t >= vocab_size {
                bail!(
                    "{}: utterance {i}: token id {t} out of vocabulary {vocab_size} (near byte offset {})",
                    path.display(),
                    r.offset
                );
            }
            tokens.push(t);
        }
        let frames = r.u32("frame count")? as usize;
        let feats = r.f64_vec(frames * feature_dim, "features")?;
        utterances.push(Utterance { tokens, feats, frames });
    }
    Ok(Corpus {
        cfg: SyntheticTaskConfig {
            vocab_size,
            feature_dim,
            frames_per_token,
            noise_std,
            len_min,
            len_max,
            train_size,
            valid_size,
            test_size,
            seed,
        },
        norm: FeatureNorm { mean, std },
        utterances,
    })
}

pub fn write_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(&mut w, FORMAT_VERSION)?;
    let c = &params.cfg;
    for v in [
        c.num_encoder_blocks,
        c.num_decoder_blocks,
        c.model_dim,
        c.ffn_dim,
        c.num_heads,
        c.vocab_size,
        c.feature_dim,
    ] {
        write_u32(&mut w, v as u32)?;
    }
    write_f64(&mut w, c.dropout_rate)?;
    write_u32(&mut w, c.max_positions as u32)?;
    write_u32(&mut w, params.num_tensors() as u32)?;
    let mut err: Option<std::io::Error> = None;
    params.for_each(&mut |name, t| {
        if err.is_some() {
            return;
        }
        let mut write_all = || -> std::io::Result<()> {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        if let Err(e) = write_all() {
            err = Some(e);
        }
    });
    if let Some(e) = err {
        return Err(e.into());
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut r = CountingReader::new(BufReader::new(file));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic, "checkpoint magic")?;
    if &magic != CHECKPOINT_MAGIC {
        bail!("{}: not a checkpoint file (bad magic at byte offset 0)", path.display());
    }
    let version = r.u32("checkpoint version")?;
    if version != FORMAT_VERSION {
        bail!("{}: unsupported checkpoint version {version}", path.display());
    }
    let cfg = ModelConfig {
        num_encoder_blocks: r.u32("num_encoder_blocks")? as usize,
        num_decoder_blocks: r.u32("num_decoder_blocks")? as usize,
        model_dim: r.u32("model_dim")? as usize,
        ffn_dim: r.u32("ffn_dim")? as usize,
        num_heads: r.u32("num_heads")? as usize,
        vocab_size: r.u32("vocab_size")? as usize,
        feature_dim: r.u32("feature_dim")? as usize,
        dropout_rate: r.f64("dropout_rate")?,
        max_positions: r.u32("max_positions")? as usize,
    };
    let count = r.u32("tensor count")? as usize;
    // Seed value is irrelevant; every tensor is overwritten below.
    let mut params =
        ModelParams::init(&cfg, 0).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    if count != params.num_tensors() {
        bail!("{}: {count} tensors for a model with {}", path.display(), params.num_tensors());
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes, "tensor name")?;
        let name = String::from_utf8(name_bytes)
            .with_context(|| format!("{}: tensor name not utf-8 near byte offset {}", path.display(), r.offset))?;
        let ndim = r.u32("tensor rank")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32("tensor dim")? as usize);
        }
        let numel: usize = dims.iter().product();
        let data = r.f64_vec(numel, "tensor data")?;
        tensors.push((name, dims, data));
    }
    let mut idx = 0;
    let mut names_ok = true;
    let mut shape_err: Option<String> = None;
    params.for_each(&mut |name, t| {
        let (fname, fdims, _) = &tensors[idx];
        if fname != &name {
            names_ok = false;
        }
        if fdims != &t.shape && shape_err.is_none() {
            shape_err = Some(format!("tensor {name}: shape {:?} in file, {:?} expected", fdims, t.shape));
        }
        idx += 1;
    });
    if !names_ok {
        bail!("{}: tensor names out of canonical order", path.display());
    }
    if let Some(e) = shape_err {
        bail!("{}: {e}", path.display());
    }
    let mut idx = 0;
    params.for_each_mut(&mut |t| {
        t.data.copy_from_slice(&tensors[idx].2);
        idx += 1;
    });
    params.check_finite().map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    Ok(params)
}
