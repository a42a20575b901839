//! Graph construction for the model forward pass.
//!
//! Parameters are bound into a [`Graph`] once per recorded pass
//! ([`bind_model`]); the returned [`BoundModel`] keeps the bound vars in the
//! canonical traversal order so gradients can be written back positionally.
//!
//! Padding discipline: padded frames are zeroed before the convolution
//! front end, pooling respects the valid prefix length, and attention masks
//! forbid keys beyond it, so outputs at valid positions are bit-identical
//! whether or not a padded tail is present.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use super::params::*;
use super::{positional_table, subsampled_len, ModelConfig, SOS};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

pub struct NormVars {
    pub gain: Var,
    pub bias: Var,
}

pub struct AttentionVars {
    pub q: LinearVars,
    pub k: LinearVars,
    pub v: LinearVars,
    pub o: LinearVars,
}

pub struct FfnVars {
    pub w1: LinearVars,
    pub w2: LinearVars,
}

pub struct EncoderBlockVars {
    pub attn: AttentionVars,
    pub norm1: NormVars,
    pub ffn: FfnVars,
    pub norm2: NormVars,
}

pub struct DecoderBlockVars {
    pub self_attn: AttentionVars,
    pub norm1: NormVars,
    pub cross_attn: AttentionVars,
    pub norm2: NormVars,
    pub ffn: FfnVars,
    pub norm3: NormVars,
}

pub struct SubsamplerVars {
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
    pub proj: LinearVars,
}

/// Model parameters bound into a graph, plus the flat var list in canonical
/// traversal order.
pub struct BoundModel {
    pub cfg: ModelConfig,
    pub subsampler: SubsamplerVars,
    pub encoder: Vec<EncoderBlockVars>,
    pub decoder: Vec<DecoderBlockVars>,
    pub embedding: Var,
    pub output: LinearVars,
    pub ordered: Vec<Var>,
}

fn bind_linear(g: &mut Graph, p: &LinearParams, ordered: &mut Vec<Var>) -> LinearVars {
    let w = g.leaf(&p.w);
    let b = g.leaf(&p.b);
    ordered.push(w);
    ordered.push(b);
    LinearVars { w, b }
}

fn bind_norm(g: &mut Graph, p: &NormParams, ordered: &mut Vec<Var>) -> NormVars {
    let gain = g.leaf(&p.gain);
    let bias = g.leaf(&p.bias);
    ordered.push(gain);
    ordered.push(bias);
    NormVars { gain, bias }
}

fn bind_attention(g: &mut Graph, p: &AttentionParams, ordered: &mut Vec<Var>) -> AttentionVars {
    AttentionVars {
        q: bind_linear(g, &p.q, ordered),
        k: bind_linear(g, &p.k, ordered),
        v: bind_linear(g, &p.v, ordered),
        o: bind_linear(g, &p.o, ordered),
    }
}

fn bind_ffn(g: &mut Graph, p: &FfnParams, ordered: &mut Vec<Var>) -> FfnVars {
    FfnVars { w1: bind_linear(g, &p.w1, ordered), w2: bind_linear(g, &p.w2, ordered) }
}

/// Copy all parameters into `g` as leaves. The push order here must match
/// `ModelParams::for_each`; `traversal_orders_agree` below checks it.
pub fn bind_model(g: &mut Graph, params: &ModelParams) -> BoundModel {
    let mut ordered = Vec::with_capacity(params.num_tensors());
    let conv1_w = g.leaf(&params.subsampler.conv1.w);
    let conv1_b = g.leaf(&params.subsampler.conv1.b);
    let conv2_w = g.leaf(&params.subsampler.conv2.w);
    let conv2_b = g.leaf(&params.subsampler.conv2.b);
    ordered.extend([conv1_w, conv1_b, conv2_w, conv2_b]);
    let proj = bind_linear(g, &params.subsampler.proj, &mut ordered);
    let subsampler = SubsamplerVars { conv1_w, conv1_b, conv2_w, conv2_b, proj };

    let encoder = params
        .encoder
        .iter()
        .map(|blk| EncoderBlockVars {
            attn: bind_attention(g, &blk.attn, &mut ordered),
            norm1: bind_norm(g, &blk.norm1, &mut ordered),
            ffn: bind_ffn(g, &blk.ffn, &mut ordered),
            norm2: bind_norm(g, &blk.norm2, &mut ordered),
        })
        .collect();
    let decoder = params
        .decoder
        .iter()
        .map(|blk| DecoderBlockVars {
            self_attn: bind_attention(g, &blk.self_attn, &mut ordered),
            norm1: bind_norm(g, &blk.norm1, &mut ordered),
            cross_attn: bind_attention(g, &blk.cross_attn, &mut ordered),
            norm2: bind_norm(g, &blk.norm2, &mut ordered),
            ffn: bind_ffn(g, &blk.ffn, &mut ordered),
            norm3: bind_norm(g, &blk.norm3, &mut ordered),
        })
        .collect();
    let embedding = g.leaf(&params.embedding);
    ordered.push(embedding);
    let output = bind_linear(g, &params.output, &mut ordered);

    BoundModel { cfg: params.cfg.clone(), subsampler, encoder, decoder, embedding, output, ordered }
}

impl BoundModel {
    /// Add each bound var's gradient into the corresponding parameter's
    /// accumulator. Call after `Graph::backward`.
    pub fn write_grads(&self, g: &Graph, params: &mut ModelParams) {
        let mut i = 0;
        params.for_each_mut(&mut |t| {
            if let Some(grad) = g.grad(self.ordered[i]) {
                t.accumulate_grad(grad);
            }
            i += 1;
        });
    }

    /// All gradients concatenated in traversal order, zeros where a tensor
    /// received none.
    pub fn grads_flat(&self, g: &Graph) -> Vec<f64> {
        let mut out = Vec::new();
        for &v in &self.ordered {
            match g.grad(v) {
                Some(grad) => out.extend_from_slice(grad),
                None => out.extend(core::iter::repeat(0.0).take(g.value(v).numel())),
            }
        }
        out
    }
}

/// Dropout context for one recorded pass; `None` disables dropout entirely
/// (validation, decoding, finite-difference probes).
pub struct DropoutCtx<'r> {
    rng: Option<&'r mut ChaCha8Rng>,
    rate: f64,
}

impl<'r> DropoutCtx<'r> {
    pub fn off() -> Self {
        DropoutCtx { rng: None, rate: 0.0 }
    }

    pub fn training(rng: &'r mut ChaCha8Rng, rate: f64) -> Self {
        DropoutCtx { rng: Some(rng), rate }
    }

    fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match &mut self.rng {
            Some(rng) => g.dropout(x, self.rate, rng, true),
            None => Ok(x),
        }
    }
}

/// Encoded source memory: padded representation rows plus the valid prefix.
pub struct Memory {
    pub h: Var,
    pub rows: usize,
    pub valid: usize,
}

/// Convolution + pooling front end. `feats` is a row-major [rows x
/// feature_dim] slab whose first `valid` rows are real frames; the rest is
/// padding and is zeroed before the first convolution. Returns the
/// subsampled representation and its valid length.
pub fn conv_subsample(
    g: &mut Graph,
    bm: &BoundModel,
    feats: &[f64],
    rows: usize,
    valid: usize,
) -> Result<(Var, usize)> {
    if valid < 4 {
        return Err(Error::InputTooShort(format!("subsampler needs at least 4 frames, got {valid}")));
    }
    if valid > rows || feats.len() != rows * bm.cfg.feature_dim {
        return Err(Error::Dim(format!(
            "feature slab {}x{} with valid {}",
            rows,
            bm.cfg.feature_dim,
            valid
        )));
    }
    let x = g.constant(vec![rows, bm.cfg.feature_dim], feats.to_vec())?;
    let x = if valid < rows {
        let mut weights = vec![1.0; rows];
        weights[valid..].iter_mut().for_each(|w| *w = 0.0);
        g.scale_rows(x, &weights)?
    } else {
        x
    };
    let c1 = g.conv1d_same3(x, bm.subsampler.conv1_w, bm.subsampler.conv1_b)?;
    let r1 = g.relu(c1)?;
    let (p1, v1) = g.max_pool2_time(r1, valid)?;
    let c2 = g.conv1d_same3(p1, bm.subsampler.conv2_w, bm.subsampler.conv2_b)?;
    let r2 = g.relu(c2)?;
    let (p2, v2) = g.max_pool2_time(r2, v1)?;
    let proj = g.matmul(p2, bm.subsampler.proj.w)?;
    let h = g.add_bias(proj, bm.subsampler.proj.b)?;
    debug_assert_eq!(v2, subsampled_len(valid));
    Ok((h, v2))
}

/// Add the sinusoidal position table to `h` (rows 0..len).
pub fn add_positional_encoding(g: &mut Graph, cfg: &ModelConfig, h: Var) -> Result<Var> {
    let (rows, cols) = g.value(h).dims2();
    if rows > cfg.max_positions {
        return Err(Error::Capacity(format!(
            "sequence length {rows} exceeds max_positions {}",
            cfg.max_positions
        )));
    }
    let table = g.constant(vec![rows, cols], positional_table(rows, cols))?;
    g.add(h, table)
}

fn linear(g: &mut Graph, p: &LinearVars, x: Var) -> Result<Var> {
    let y = g.matmul(x, p.w)?;
    g.add_bias(y, p.b)
}

/// Scaled dot-product multi-head attention; `mask` is a row-major
/// [queries x keys] allowance matrix shared by all heads.
fn multi_head_attention(
    g: &mut Graph,
    p: &AttentionVars,
    cfg: &ModelConfig,
    q_src: Var,
    kv_src: Var,
    mask: &[bool],
) -> Result<Var> {
    let q = linear(g, &p.q, q_src)?;
    let k = linear(g, &p.k, kv_src)?;
    let v = linear(g, &p.v, kv_src)?;
    let dh = cfg.head_dim();
    let inv_sqrt_dh = 1.0 / libm::sqrt(dh as f64);
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, inv_sqrt_dh)?;
        let weights = g.masked_softmax_rows(scaled, mask)?;
        heads.push(g.matmul(weights, vh)?);
    }
    let ctx = g.concat_cols(&heads)?;
    linear(g, &p.o, ctx)
}

fn sublayer_norm(g: &mut Graph, norm: &NormVars, residual: Var, sub_out: Var) -> Result<Var> {
    let sum = g.add(residual, sub_out)?;
    g.layer_norm(sum, norm.gain, norm.bias, super::LAYER_NORM_EPS)
}

fn ffn(g: &mut Graph, p: &FfnVars, x: Var) -> Result<Var> {
    let a = linear(g, &p.w1, x)?;
    let r = g.relu(a)?;
    linear(g, &p.w2, r)
}

/// Stack of post-norm encoder blocks over the subsampled input; attention
/// never attends to frames at or beyond `valid`.
pub fn encoder_forward(
    g: &mut Graph,
    bm: &BoundModel,
    h0: Var,
    valid: usize,
    drop: &mut DropoutCtx,
) -> Result<Var> {
    let rows = g.value(h0).dims2().0;
    let mut mask = vec![false; rows * rows];
    for q in 0..rows {
        for k in 0..valid.min(rows) {
            mask[q * rows + k] = true;
        }
    }
    let mut h = h0;
    for blk in &bm.encoder {
        let attn = multi_head_attention(g, &blk.attn, &bm.cfg, h, h, &mask)?;
        let attn = drop.apply(g, attn)?;
        h = sublayer_norm(g, &blk.norm1, h, attn)?;
        let f = ffn(g, &blk.ffn, h)?;
        let f = drop.apply(g, f)?;
        h = sublayer_norm(g, &blk.norm2, h, f)?;
    }
    Ok(h)
}

/// Decoder over a token prefix. `tokens_in` must begin with SOS; position n
/// of the output logits conditions only on tokens 0..=n (causal mask) and on
/// the valid part of the encoded memory.
pub fn decoder_forward(
    g: &mut Graph,
    bm: &BoundModel,
    tokens_in: &[usize],
    memory: &Memory,
    drop: &mut DropoutCtx,
) -> Result<Var> {
    if tokens_in.is_empty() {
        return Err(Error::Contract(String::from("decoder prefix is empty")));
    }
    if tokens_in[0] != SOS {
        return Err(Error::Contract(format!("decoder prefix must start with SOS, got {}", tokens_in[0])));
    }
    let n = tokens_in.len();
    let d = bm.cfg.model_dim;
    let emb = g.gather_rows(bm.embedding, tokens_in, libm::sqrt(d as f64))?;
    let mut u = add_positional_encoding(g, &bm.cfg, emb)?;

    let mut causal = vec![false; n * n];
    for q in 0..n {
        for k in 0..=q {
            causal[q * n + k] = true;
        }
    }
    let mut mem_mask = vec![false; n * memory.rows];
    for q in 0..n {
        for k in 0..memory.valid.min(memory.rows) {
            mem_mask[q * memory.rows + k] = true;
        }
    }
    for blk in &bm.decoder {
        let sa = multi_head_attention(g, &blk.self_attn, &bm.cfg, u, u, &causal)?;
        let sa = drop.apply(g, sa)?;
        u = sublayer_norm(g, &blk.norm1, u, sa)?;
        let ca = multi_head_attention(g, &blk.cross_attn, &bm.cfg, u, memory.h, &mem_mask)?;
        let ca = drop.apply(g, ca)?;
        u = sublayer_norm(g, &blk.norm2, u, ca)?;
        let f = ffn(g, &blk.ffn, u)?;
        let f = drop.apply(g, f)?;
        u = sublayer_norm(g, &blk.norm3, u, f)?;
    }
    linear(g, &bm.output, u)
}

/// Full conditional distribution pass: encode `feats`, decode `tokens_in`,
/// softmax over the vocabulary. Returns per-position distributions, one row
/// per prefix position.
pub fn forward_probs(
    g: &mut Graph,
    bm: &BoundModel,
    feats: &[f64],
    rows: usize,
    valid: usize,
    tokens_in: &[usize],
    drop: &mut DropoutCtx,
) -> Result<Var> {
    let (h, v) = conv_subsample(g, bm, feats, rows, valid)?;
    let h0 = add_positional_encoding(g, &bm.cfg, h)?;
    let enc = encoder_forward(g, bm, h0, v, drop)?;
    let mem = Memory { h: enc, rows: g.value(enc).dims2().0, valid: v };
    let logits = decoder_forward(g, bm, tokens_in, &mem, drop)?;
    g.softmax_rows(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;
    use crate::rng::{simple_stream, Domain};

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

    fn toy_feats(rows: usize, dim: usize, seed: u64) -> Vec<f64> {
        let mut rng = simple_stream(seed, Domain::DataSplit);
        (0..rows * dim).map(|_| crate::rng::gaussian(&mut rng)).collect()
    }

    #[test]
    fn bind_matches_traversal_order() {
        let params = ModelParams::init(&toy_cfg(), 3).unwrap();
        let mut g = Graph::new();
        let bm = bind_model(&mut g, &params);
        let mut shapes = Vec::new();
        params.for_each(&mut |_, t| shapes.push(t.shape.clone()));
        assert_eq!(bm.ordered.len(), shapes.len());
        for (&v, s) in bm.ordered.iter().zip(&shapes) {
            assert_eq!(&g.value(v).shape, s);
        }
    }

    #[test]
    fn subsample_lengths_and_short_input() {
        let params = ModelParams::init(&toy_cfg(), 3).unwrap();
        let mut g = Graph::inference();
        let bm = bind_model(&mut g, &params);
        let feats = toy_feats(16, 4, 1);
        let (h, v) = conv_subsample(&mut g, &bm, &feats, 16, 16).unwrap();
        assert_eq!(v, 4);
        assert_eq!(g.value(h).shape, vec![4, 8]);

        let feats = toy_feats(10, 4, 2);
        let (_, v) = conv_subsample(&mut g, &bm, &feats, 10, 10).unwrap();
        assert_eq!(v, 3);

        let feats = toy_feats(4, 4, 3);
        let (h, v) = conv_subsample(&mut g, &bm, &feats, 4, 4).unwrap();
        assert_eq!(v, 1);
        assert_eq!(g.value(h).dims2().0, 1);

        let feats = toy_feats(3, 4, 4);
        assert!(matches!(
            conv_subsample(&mut g, &bm, &feats, 3, 3),
            Err(Error::InputTooShort(_))
        ));
    }

    #[test]
    fn positional_encoding_capacity_and_zero_input() {
        let cfg = toy_cfg();
        let mut g = Graph::inference();
        let zero = g.constant(vec![5, 8], vec![0.0; 40]).unwrap();
        let out = add_positional_encoding(&mut g, &cfg, zero).unwrap();
        assert_eq!(g.value(out).data, positional_table(5, 8));

        let too_long = g.constant(vec![65, 8], vec![0.0; 65 * 8]).unwrap();
        assert!(matches!(
            add_positional_encoding(&mut g, &cfg, too_long),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn encoder_is_deterministic_with_dropout_off() {
        let params = ModelParams::init(&toy_cfg(), 5).unwrap();
        let feats = toy_feats(12, 4, 9);
        let run = || {
            let mut g = Graph::inference();
            let bm = bind_model(&mut g, &params);
            let (h, v) = conv_subsample(&mut g, &bm, &feats, 12, 12).unwrap();
            let h0 = add_positional_encoding(&mut g, &bm.cfg, h).unwrap();
            let enc = encoder_forward(&mut g, &bm, h0, v, &mut DropoutCtx::off()).unwrap();
            g.value(enc).data.clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn padded_frames_do_not_affect_valid_outputs() {
        let params = ModelParams::init(&toy_cfg(), 7).unwrap();
        let valid = 10usize;
        let rows = 16usize;
        let mut feats = toy_feats(rows, 4, 11);
        let run = |feats: &[f64]| {
            let mut g = Graph::inference();
            let bm = bind_model(&mut g, &params);
            let (h, v) = conv_subsample(&mut g, &bm, feats, rows, valid).unwrap();
            let h0 = add_positional_encoding(&mut g, &bm.cfg, h).unwrap();
            let enc = encoder_forward(&mut g, &bm, h0, v, &mut DropoutCtx::off()).unwrap();
            (g.value(enc).data.clone(), v)
        };
        let (a, v) = run(&feats);
        // Scribble over the padded tail.
        for x in &mut feats[valid * 4..] {
            *x = 1234.5;
        }
        let (b, _) = run(&feats);
        assert_eq!(a[..v * 8], b[..v * 8], "valid prefix must be bit-identical");
    }

    #[test]
    fn decoder_causality_exact() {
        let params = ModelParams::init(&toy_cfg(), 13).unwrap();
        let feats = toy_feats(8, 4, 17);
        let run = |tokens: &[usize]| {
            let mut g = Graph::inference();
            let bm = bind_model(&mut g, &params);
            let probs =
                forward_probs(&mut g, &bm, &feats, 8, 8, tokens, &mut DropoutCtx::off()).unwrap();
            g.value(probs).data.clone()
        };
        let a = run(&[SOS, 3, 4, 3]);
        let b = run(&[SOS, 3, 4, 4]); // change last token only
        let v = 5;
        // Rows 0..3 depend on tokens 0..=2 only; row 3 may differ.
        assert_eq!(a[..3 * v], b[..3 * v]);
    }

    #[test]
    fn decoder_contract_errors() {
        let params = ModelParams::init(&toy_cfg(), 19).unwrap();
        let feats = toy_feats(8, 4, 23);
        let mut g = Graph::inference();
        let bm = bind_model(&mut g, &params);
        let (h, v) = conv_subsample(&mut g, &bm, &feats, 8, 8).unwrap();
        let h0 = add_positional_encoding(&mut g, &bm.cfg, h).unwrap();
        let enc = encoder_forward(&mut g, &bm, h0, v, &mut DropoutCtx::off()).unwrap();
        let mem = Memory { h: enc, rows: 2, valid: v };
        assert!(decoder_forward(&mut g, &bm, &[], &mem, &mut DropoutCtx::off()).is_err());
        assert!(decoder_forward(&mut g, &bm, &[3, 4], &mem, &mut DropoutCtx::off()).is_err());
    }

    #[test]
    fn all_pad_memory_still_yields_finite_logits() {
        let params = ModelParams::init(&toy_cfg(), 29).unwrap();
        let mut g = Graph::inference();
        let bm = bind_model(&mut g, &params);
        // Memory with zero valid frames: every cross-attention row is fully
        // masked and falls back to uniform weights.
        let mem_h = g.constant(vec![3, 8], vec![0.25; 24]).unwrap();
        let mem = Memory { h: mem_h, rows: 3, valid: 0 };
        let logits = decoder_forward(&mut g, &bm, &[SOS, 3], &mem, &mut DropoutCtx::off()).unwrap();
        for &v in &g.value(logits).data {
            assert!(v.is_finite());
        }
    }

    #[test]
    fn probs_rows_normalized_and_log_domain_consistent() {
        let params = ModelParams::init(&toy_cfg(), 31).unwrap();
        let feats = toy_feats(8, 4, 37);
        let tokens = [SOS, 3, 4];
        let mut g = Graph::inference();
        let bm = bind_model(&mut g, &params);
        let probs =
            forward_probs(&mut g, &bm, &feats, 8, 8, &tokens, &mut DropoutCtx::off()).unwrap();
        let data = g.value(probs).data.clone();
        let v = 5;
        let mut chain = 1.0;
        let mut log_sum = 0.0;
        for r in 0..tokens.len() {
            let row = &data[r * v..(r + 1) * v];
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            chain *= row[2];
            log_sum += libm::log(row[2]);
        }
        assert!((chain - libm::exp(log_sum)).abs() < 1e-9);
    }
}
