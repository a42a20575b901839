//! Parameter containers, initialization, and traversal.
//!
//! Every struct here exposes its tensors in one fixed order through
//! `for_each` / `for_each_mut`; the graph-binding code in `forward` walks the
//! same order, so optimizer state, checkpoints, and gradient write-back all
//! agree on parameter identity by position.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::rng::{simple_stream, Domain};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    /// [in x out]; applied as x . w + b on row vectors.
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// [3*in x out], kernel-major layout for the kernel-3 time convolution.
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub o: LinearParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub w1: LinearParams,
    pub w2: LinearParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlockParams {
    pub attn: AttentionParams,
    pub norm1: NormParams,
    pub ffn: FfnParams,
    pub norm2: NormParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlockParams {
    pub self_attn: AttentionParams,
    pub norm1: NormParams,
    pub cross_attn: AttentionParams,
    pub norm2: NormParams,
    pub ffn: FfnParams,
    pub norm3: NormParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsamplerParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub proj: LinearParams,
}

/// Full parameter set of one student model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub subsampler: SubsamplerParams,
    pub encoder: Vec<EncoderBlockParams>,
    pub decoder: Vec<DecoderBlockParams>,
    /// [vocab x model_dim]; scaled by sqrt(model_dim) at lookup.
    pub embedding: Tensor,
    /// Output head, model_dim -> vocab. Untied from the embedding.
    pub output: LinearParams,
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, shape: Vec<usize>) -> Tensor {
    let s = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen::<f64>() * 2.0 * s - s).collect();
    Tensor::param(shape, data).unwrap()
}

fn zeros_param(shape: Vec<usize>) -> Tensor {
    let numel: usize = shape.iter().product();
    let mut t = Tensor::new(shape, vec![0.0; numel]).unwrap();
    t.requires_grad = true;
    t
}

fn ones_param(shape: Vec<usize>) -> Tensor {
    let numel: usize = shape.iter().product();
    let mut t = Tensor::new(shape, vec![1.0; numel]).unwrap();
    t.requires_grad = true;
    t
}

fn init_linear(rng: &mut ChaCha8Rng, din: usize, dout: usize) -> LinearParams {
    LinearParams { w: glorot(rng, din, dout, vec![din, dout]), b: zeros_param(vec![dout]) }
}

fn init_norm(dim: usize) -> NormParams {
    NormParams { gain: ones_param(vec![dim]), bias: zeros_param(vec![dim]) }
}

fn init_conv(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> ConvParams {
    ConvParams { w: glorot(rng, 3 * cin, cout, vec![3 * cin, cout]), b: zeros_param(vec![cout]) }
}

fn init_attention(rng: &mut ChaCha8Rng, dim: usize) -> AttentionParams {
    AttentionParams {
        q: init_linear(rng, dim, dim),
        k: init_linear(rng, dim, dim),
        v: init_linear(rng, dim, dim),
        o: init_linear(rng, dim, dim),
    }
}

impl ModelParams {
    /// Fresh parameters drawn from the init stream of `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> crate::Result<Self> {
        cfg.validate()?;
        let mut rng = simple_stream(seed, Domain::Init);
        let d = cfg.model_dim;
        let subsampler = SubsamplerParams {
            conv1: init_conv(&mut rng, cfg.feature_dim, d),
            conv2: init_conv(&mut rng, d, d),
            proj: init_linear(&mut rng, d, d),
        };
        let encoder = (0..cfg.num_encoder_blocks)
            .map(|_| EncoderBlockParams {
                attn: init_attention(&mut rng, d),
                norm1: init_norm(d),
                ffn: FfnParams {
                    w1: init_linear(&mut rng, d, cfg.ffn_dim),
                    w2: init_linear(&mut rng, cfg.ffn_dim, d),
                },
                norm2: init_norm(d),
            })
            .collect();
        let decoder = (0..cfg.num_decoder_blocks)
            .map(|_| DecoderBlockParams {
                self_attn: init_attention(&mut rng, d),
                norm1: init_norm(d),
                cross_attn: init_attention(&mut rng, d),
                norm2: init_norm(d),
                ffn: FfnParams {
                    w1: init_linear(&mut rng, d, cfg.ffn_dim),
                    w2: init_linear(&mut rng, cfg.ffn_dim, d),
                },
                norm3: init_norm(d),
            })
            .collect();
        let embedding = glorot(&mut rng, cfg.vocab_size, d, vec![cfg.vocab_size, d]);
        let output = init_linear(&mut rng, d, cfg.vocab_size);
        Ok(ModelParams { cfg: cfg.clone(), subsampler, encoder, decoder, embedding, output })
    }

    /// Visit every parameter tensor with its path, in the canonical order.
    pub fn for_each<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        let s = &self.subsampler;
        f(String::from("subsampler.conv1.w"), &s.conv1.w);
        f(String::from("subsampler.conv1.b"), &s.conv1.b);
        f(String::from("subsampler.conv2.w"), &s.conv2.w);
        f(String::from("subsampler.conv2.b"), &s.conv2.b);
        f(String::from("subsampler.proj.w"), &s.proj.w);
        f(String::from("subsampler.proj.b"), &s.proj.b);
        for (i, blk) in self.encoder.iter().enumerate() {
            for (tag, lin) in
                [("q", &blk.attn.q), ("k", &blk.attn.k), ("v", &blk.attn.v), ("o", &blk.attn.o)]
            {
                f(format!("enc.{i}.attn.{tag}.w"), &lin.w);
                f(format!("enc.{i}.attn.{tag}.b"), &lin.b);
            }
            f(format!("enc.{i}.norm1.gain"), &blk.norm1.gain);
            f(format!("enc.{i}.norm1.bias"), &blk.norm1.bias);
            f(format!("enc.{i}.ffn.w1.w"), &blk.ffn.w1.w);
            f(format!("enc.{i}.ffn.w1.b"), &blk.ffn.w1.b);
            f(format!("enc.{i}.ffn.w2.w"), &blk.ffn.w2.w);
            f(format!("enc.{i}.ffn.w2.b"), &blk.ffn.w2.b);
            f(format!("enc.{i}.norm2.gain"), &blk.norm2.gain);
            f(format!("enc.{i}.norm2.bias"), &blk.norm2.bias);
        }
        for (i, blk) in self.decoder.iter().enumerate() {
            for (tag, lin) in [
                ("self.q", &blk.self_attn.q),
                ("self.k", &blk.self_attn.k),
                ("self.v", &blk.self_attn.v),
                ("self.o", &blk.self_attn.o),
            ] {
                f(format!("dec.{i}.{tag}.w"), &lin.w);
                f(format!("dec.{i}.{tag}.b"), &lin.b);
            }
            f(format!("dec.{i}.norm1.gain"), &blk.norm1.gain);
            f(format!("dec.{i}.norm1.bias"), &blk.norm1.bias);
            for (tag, lin) in [
                ("cross.q", &blk.cross_attn.q),
                ("cross.k", &blk.cross_attn.k),
                ("cross.v", &blk.cross_attn.v),
                ("cross.o", &blk.cross_attn.o),
            ] {
                f(format!("dec.{i}.{tag}.w"), &lin.w);
                f(format!("dec.{i}.{tag}.b"), &lin.b);
            }
            f(format!("dec.{i}.norm2.gain"), &blk.norm2.gain);
            f(format!("dec.{i}.norm2.bias"), &blk.norm2.bias);
            f(format!("dec.{i}.ffn.w1.w"), &blk.ffn.w1.w);
            f(format!("dec.{i}.ffn.w1.b"), &blk.ffn.w1.b);
            f(format!("dec.{i}.ffn.w2.w"), &blk.ffn.w2.w);
            f(format!("dec.{i}.ffn.w2.b"), &blk.ffn.w2.b);
            f(format!("dec.{i}.norm3.gain"), &blk.norm3.gain);
            f(format!("dec.{i}.norm3.bias"), &blk.norm3.bias);
        }
        f(String::from("embedding"), &self.embedding);
        f(String::from("output.w"), &self.output.w);
        f(String::from("output.b"), &self.output.b);
    }

    /// Mutable traversal in exactly the `for_each` order.
    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        let s = &mut self.subsampler;
        for t in [&mut s.conv1.w, &mut s.conv1.b, &mut s.conv2.w, &mut s.conv2.b, &mut s.proj.w, &mut s.proj.b]
        {
            f(t);
        }
        for blk in &mut self.encoder {
            for lin in [&mut blk.attn.q, &mut blk.attn.k, &mut blk.attn.v, &mut blk.attn.o] {
                f(&mut lin.w);
                f(&mut lin.b);
            }
            f(&mut blk.norm1.gain);
            f(&mut blk.norm1.bias);
            f(&mut blk.ffn.w1.w);
            f(&mut blk.ffn.w1.b);
            f(&mut blk.ffn.w2.w);
            f(&mut blk.ffn.w2.b);
            f(&mut blk.norm2.gain);
            f(&mut blk.norm2.bias);
        }
        for blk in &mut self.decoder {
            for lin in [&mut blk.self_attn.q, &mut blk.self_attn.k, &mut blk.self_attn.v, &mut blk.self_attn.o]
            {
                f(&mut lin.w);
                f(&mut lin.b);
            }
            f(&mut blk.norm1.gain);
            f(&mut blk.norm1.bias);
            for lin in [&mut blk.cross_attn.q, &mut blk.cross_attn.k, &mut blk.cross_attn.v, &mut blk.cross_attn.o]
            {
                f(&mut lin.w);
                f(&mut lin.b);
            }
            f(&mut blk.norm2.gain);
            f(&mut blk.norm2.bias);
            f(&mut blk.ffn.w1.w);
            f(&mut blk.ffn.w1.b);
            f(&mut blk.ffn.w2.w);
            f(&mut blk.ffn.w2.b);
            f(&mut blk.norm3.gain);
            f(&mut blk.norm3.bias);
        }
        f(&mut self.embedding);
        f(&mut self.output.w);
        f(&mut self.output.b);
    }

    pub fn num_tensors(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, _| n += 1);
        n
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, t| n += t.numel());
        n
    }

    pub fn zero_grads(&mut self) {
        self.for_each_mut(&mut |t| t.zero_grad());
    }

    pub fn check_finite(&self) -> crate::Result<()> {
        let mut bad: Option<String> = None;
        self.for_each(&mut |name, t| {
            if bad.is_none() && t.check_finite("param").is_err() {
                bad = Some(name);
            }
        });
        match bad {
            Some(name) => Err(crate::Error::Numeric(format!("non-finite parameter {name}"))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            num_encoder_blocks: 1,
            num_decoder_blocks: 1,
            model_dim: 8,
            ffn_dim: 16,
            num_heads: 1,
            vocab_size: 5,
            feature_dim: 4,
            dropout_rate: 0.1,
            max_positions: 64,
        }
    }

    #[test]
    fn traversal_orders_agree() {
        let mut p = ModelParams::init(&toy_cfg(), 1).unwrap();
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        p.for_each(&mut |name, t| {
            names.push(name);
            shapes.push(t.shape.clone());
        });
        let mut shapes_mut = Vec::new();
        p.for_each_mut(&mut |t| shapes_mut.push(t.shape.clone()));
        assert_eq!(shapes, shapes_mut);
        // Paths must be unique.
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn init_is_seed_deterministic_and_seed_sensitive() {
        let cfg = toy_cfg();
        let a = ModelParams::init(&cfg, 42).unwrap();
        let b = ModelParams::init(&cfg, 42).unwrap();
        let c = ModelParams::init(&cfg, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.embedding.shape, vec![5, 8]);
        assert_eq!(a.output.w.shape, vec![8, 5]);
    }
}
