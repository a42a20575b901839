//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] owns an arena of tensors plus an ordered tape of recorded
//! operations. Forward methods compute values eagerly, validate shapes,
//! reject non-finite results, and (when recording) append a node describing
//! how to propagate gradients. [`Graph::backward`] walks the tape once in
//! reverse, accumulating gradients additively into every tensor that needs
//! them; a value feeding two consumers therefore receives the sum of both
//! branch gradients.
//!
//! The op set is exactly what the Transformer model and the training
//! objectives require — no general broadcasting, no graph rewriting.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities below this floor are clamped inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a tensor in a [`Graph`] arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

/// One recorded operation: op kind, input references, output reference, and
/// whatever forward state its backward rule needs.
#[derive(Debug)]
enum Node {
    Add { a: Var, b: Var, out: Var },
    MulElem { a: Var, b: Var, out: Var },
    Scale { a: Var, c: f64, out: Var },
    ScaleRows { a: Var, weights: Vec<f64>, out: Var },
    AddBias { x: Var, b: Var, out: Var },
    Matmul { a: Var, b: Var, out: Var },
    Transpose { a: Var, out: Var },
    Relu { x: Var, out: Var },
    SliceCols { x: Var, start: usize, len: usize, out: Var },
    ConcatCols { parts: Vec<Var>, out: Var },
    GatherRows { table: Var, ids: Vec<usize>, scale: f64, out: Var },
    Softmax { x: Var, out: Var },
    LogSoftmax { x: Var, out: Var },
    /// Softmax restricted to `mask`-allowed entries; fully masked rows emit a
    /// uniform distribution and are constant w.r.t. the input.
    MaskedSoftmax { x: Var, mask: Vec<bool>, out: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, out: Var, x_hat: Vec<f64>, inv_std: Vec<f64> },
    /// `mask` entries are 0.0 (dropped) or 1/(1-rate) (kept, rescaled).
    Dropout { x: Var, mask: Vec<f64>, out: Var },
    Conv1dSame3 { x: Var, w: Var, b: Var, out: Var },
    /// Stride-2 max pooling over time, aware of the valid prefix length.
    /// `argmax` holds the flat input index per output cell, or usize::MAX for
    /// cells in the invalid (zeroed) tail.
    MaxPool2 { x: Var, argmax: Vec<usize>, out: Var },
    Sum { x: Var, out: Var },
    /// y = -sum over unmasked rows of targets . ln(clamp(probs)).
    CrossEntropySum { probs: Var, targets: Vec<f64>, row_mask: Vec<bool>, out: Var },
}

/// Tensor arena plus recorded tape.
pub struct Graph {
    vals: Vec<Tensor>,
    nodes: Vec<Node>,
    /// Whether `vals[i]` (transitively) depends on a requires_grad leaf.
    needs: Vec<bool>,
    recording: bool,
    /// Incremented whenever a cross-entropy term hits the probability floor
    /// at a position with nonzero target mass.
    pub clamp_warnings: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Recording graph: forward values plus a backward tape.
    pub fn new() -> Self {
        Graph { vals: Vec::new(), nodes: Vec::new(), needs: Vec::new(), recording: true, clamp_warnings: 0 }
    }

    /// Forward-only graph; no tape is kept and `backward` is unavailable.
    pub fn inference() -> Self {
        Graph { vals: Vec::new(), nodes: Vec::new(), needs: Vec::new(), recording: false, clamp_warnings: 0 }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    fn push(&mut self, t: Tensor, needs: bool) -> Var {
        let v = Var(self.vals.len() as u32);
        self.needs.push(needs && self.recording);
        self.vals.push(t);
        v
    }

    fn record(&mut self, node: Node) {
        if self.recording {
            self.nodes.push(node);
        }
    }

    /// Copy an external tensor into the graph as a leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut copy = t.clone();
        copy.grad = None;
        let needs = t.requires_grad;
        self.push(copy, needs)
    }

    /// Constant leaf that never receives gradients.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, false))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(Tensor::scalar(v), false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.idx()]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.vals[v.idx()].grad.as_deref()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.vals[v.idx()].data[0]
    }

    fn check_finite(&self, v: Var, op: &str) -> Result<()> {
        self.vals[v.idx()].check_finite(op)
    }

    fn out(&mut self, shape: Vec<usize>, data: Vec<f64>, needs: bool, op: &str) -> Result<Var> {
        let t = Tensor { shape, data, grad: None, requires_grad: false };
        let v = self.push(t, needs);
        self.check_finite(v, op)?;
        Ok(v)
    }

    // ---- forward ops ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.idx()], &self.vals[b.idx()]);
        if ta.shape != tb.shape {
            return Err(Error::Dim(format!("add {:?} vs {:?}", ta.shape, tb.shape)));
        }
        let data: Vec<f64> = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let shape = ta.shape.clone();
        let needs = self.needs[a.idx()] || self.needs[b.idx()];
        let out = self.out(shape, data, needs, "add")?;
        self.record(Node::Add { a, b, out });
        Ok(out)
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.idx()], &self.vals[b.idx()]);
        if ta.shape != tb.shape {
            return Err(Error::Dim(format!("mul_elem {:?} vs {:?}", ta.shape, tb.shape)));
        }
        let data: Vec<f64> = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let shape = ta.shape.clone();
        let needs = self.needs[a.idx()] || self.needs[b.idx()];
        let out = self.out(shape, data, needs, "mul_elem")?;
        self.record(Node::MulElem { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = &self.vals[a.idx()];
        let data: Vec<f64> = ta.data.iter().map(|x| c * x).collect();
        let shape = ta.shape.clone();
        let needs = self.needs[a.idx()];
        let out = self.out(shape, data, needs, "scale")?;
        self.record(Node::Scale { a, c, out });
        Ok(out)
    }

    /// Multiply each row by a constant weight; used to zero padded frames.
    pub fn scale_rows(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        let ta = &self.vals[a.idx()];
        let (rows, cols) = ta.dims2();
        if weights.len() != rows {
            return Err(Error::Dim(format!("scale_rows: {} weights for {} rows", weights.len(), rows)));
        }
        let mut data = ta.data.clone();
        for r in 0..rows {
            let w = weights[r];
            for x in &mut data[r * cols..(r + 1) * cols] {
                *x *= w;
            }
        }
        let shape = ta.shape.clone();
        let needs = self.needs[a.idx()];
        let out = self.out(shape, data, needs, "scale_rows")?;
        self.record(Node::ScaleRows { a, weights: weights.to_vec(), out });
        Ok(out)
    }

    /// Add a bias vector to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (&self.vals[x.idx()], &self.vals[b.idx()]);
        let (rows, cols) = tx.dims2();
        if tb.numel() != cols {
            return Err(Error::Dim(format!("add_bias: bias {} vs {} cols", tb.numel(), cols)));
        }
        let mut data = tx.data.clone();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += tb.data[c];
            }
        }
        let shape = tx.shape.clone();
        let needs = self.needs[x.idx()] || self.needs[b.idx()];
        let out = self.out(shape, data, needs, "add_bias")?;
        self.record(Node::AddBias { x, b, out });
        Ok(out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.idx()], &self.vals[b.idx()]);
        let (m, k) = ta.dims2();
        let (k2, n) = tb.dims2();
        if k != k2 {
            return Err(Error::Dim(format!("matmul {:?} x {:?}", ta.shape, tb.shape)));
        }
        let data = matmul_raw(&ta.data, &tb.data, m, k, n);
        let needs = self.needs[a.idx()] || self.needs[b.idx()];
        let out = self.out(vec![m, n], data, needs, "matmul")?;
        self.record(Node::Matmul { a, b, out });
        Ok(out)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = &self.vals[a.idx()];
        let (m, n) = ta.dims2();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ta.data[i * n + j];
            }
        }
        let needs = self.needs[a.idx()];
        let out = self.out(vec![n, m], data, needs, "transpose")?;
        self.record(Node::Transpose { a, out });
        Ok(out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = &self.vals[x.idx()];
        let data: Vec<f64> = tx.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = tx.shape.clone();
        let needs = self.needs[x.idx()];
        let out = self.out(shape, data, needs, "relu")?;
        self.record(Node::Relu { x, out });
        Ok(out)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = &self.vals[x.idx()];
        let (rows, cols) = tx.dims2();
        if start + len > cols {
            return Err(Error::Dim(format!("slice_cols {}..{} of {}", start, start + len, cols)));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&tx.data[r * cols + start..r * cols + start + len]);
        }
        let needs = self.needs[x.idx()];
        let out = self.out(vec![rows, len], data, needs, "slice_cols")?;
        self.record(Node::SliceCols { x, start, len, out });
        Ok(out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract(String::from("concat_cols: empty part list")));
        }
        let rows = self.vals[parts[0].idx()].dims2().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.vals[p.idx()].dims2();
            if r != rows {
                return Err(Error::Dim(format!("concat_cols: {} rows vs {}", r, rows)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (i, &p) in parts.iter().enumerate() {
                let c = widths[i];
                let src = &self.vals[p.idx()].data[r * c..(r + 1) * c];
                data.extend_from_slice(src);
            }
        }
        let needs = parts.iter().any(|p| self.needs[p.idx()]);
        let out = self.out(vec![rows, total], data, needs, "concat_cols")?;
        self.record(Node::ConcatCols { parts: parts.to_vec(), out });
        Ok(out)
    }

    /// Embedding lookup: rows of `table` selected by `ids`, scaled by `scale`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize], scale: f64) -> Result<Var> {
        let tt = &self.vals[table.idx()];
        let (v, d) = tt.dims2();
        for &id in ids {
            if id >= v {
                return Err(Error::Contract(format!("gather_rows: id {} out of {}", id, v)));
            }
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend(tt.data[id * d..(id + 1) * d].iter().map(|&x| x * scale));
        }
        let needs = self.needs[table.idx()];
        let out = self.out(vec![ids.len(), d], data, needs, "gather_rows")?;
        self.record(Node::GatherRows { table, ids: ids.to_vec(), scale, out });
        Ok(out)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = &self.vals[x.idx()];
        let (rows, cols) = tx.dims2();
        if cols == 0 {
            return Err(Error::Dim(String::from("softmax_rows: empty last dimension")));
        }
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            softmax_row(&tx.data[r * cols..(r + 1) * cols], &mut data[r * cols..(r + 1) * cols]);
        }
        let shape = tx.shape.clone();
        let needs = self.needs[x.idx()];
        let out = self.out(shape, data, needs, "softmax_rows")?;
        self.record(Node::Softmax { x, out });
        Ok(out)
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = &self.vals[x.idx()];
        let (rows, cols) = tx.dims2();
        if cols == 0 {
            return Err(Error::Dim(String::from("log_softmax_rows: empty last dimension")));
        }
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &tx.data[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = libm::log(row.iter().map(|&v| libm::exp(v - m)).sum::<f64>());
            for c in 0..cols {
                data[r * cols + c] = row[c] - m - lse;
            }
        }
        let shape = tx.shape.clone();
        let needs = self.needs[x.idx()];
        let out = self.out(shape, data, needs, "log_softmax_rows")?;
        self.record(Node::LogSoftmax { x, out });
        Ok(out)
    }

    /// Softmax over the entries allowed by `mask` (row-major, same numel as
    /// `x`); disallowed entries get exactly 0. A row with no allowed entries
    /// falls back to the uniform distribution and receives zero gradient.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let tx = &self.vals[x.idx()];
        let (rows, cols) = tx.dims2();
        if mask.len() != rows * cols {
            return Err(Error::Dim(format!("masked_softmax: mask {} vs {}", mask.len(), rows * cols)));
        }
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &tx.data[r * cols..(r + 1) * cols];
            let mrow = &mask[r * cols..(r + 1) * cols];
            let out_row = &mut data[r * cols..(r + 1) * cols];
            let m = row
                .iter()
                .zip(mrow)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                out_row.iter_mut().for_each(|v| *v = 1.0 / cols as f64);
                continue;
            }
            let mut sum = 0.0;
            for c in 0..cols {
                if mrow[c] {
                    let e = libm::exp(row[c] - m);
                    out_row[c] = e;
                    sum += e;
                }
            }
            out_row.iter_mut().for_each(|v| *v /= sum);
        }
        let shape = tx.shape.clone();
        let needs = self.needs[x.idx()];
        let out = self.out(shape, data, needs, "masked_softmax_rows")?;
        self.record(Node::MaskedSoftmax { x, mask: mask.to_vec(), out });
        Ok(out)
    }

    /// Per-row normalization to zero mean / unit variance, then `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (rows, cols) = self.vals[x.idx()].dims2();
        if cols == 0 {
            return Err(Error::Dim(String::from("layer_norm: empty rows")));
        }
        let (tg, tb) = (&self.vals[gain.idx()], &self.vals[bias.idx()]);
        if tg.numel() != cols || tb.numel() != cols {
            return Err(Error::Dim(format!("layer_norm: gain/bias {}x{} vs {} cols", tg.numel(), tb.numel(), cols)));
        }
        let tx = &self.vals[x.idx()];
        let mut data = vec![0.0; rows * cols];
        let mut x_hat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &tx.data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let istd = 1.0 / libm::sqrt(var + eps);
            inv_std[r] = istd;
            for c in 0..cols {
                let xh = (row[c] - mean) * istd;
                x_hat[r * cols + c] = xh;
                data[r * cols + c] = self.vals[gain.idx()].data[c] * xh + self.vals[bias.idx()].data[c];
            }
        }
        let shape = self.vals[x.idx()].shape.clone();
        let needs = self.needs[x.idx()] || self.needs[gain.idx()] || self.needs[bias.idx()];
        let out = self.out(shape, data, needs, "layer_norm")?;
        self.record(Node::LayerNorm { x, gain, bias, out, x_hat, inv_std });
        Ok(out)
    }

    /// Inverted dropout. In training mode each element is zeroed with
    /// probability `rate` and survivors are rescaled by 1/(1-rate); outside
    /// training it is the identity.
    pub fn dropout<R: rand::Rng>(&mut self, x: Var, rate: f64, rng: &mut R, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0,1), got {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let n = self.vals[x.idx()].numel();
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep_scale }).collect();
        let tx = &self.vals[x.idx()];
        let data: Vec<f64> = tx.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = tx.shape.clone();
        let needs = self.needs[x.idx()];
        let out = self.out(shape, data, needs, "dropout")?;
        self.record(Node::Dropout { x, mask, out });
        Ok(out)
    }

    /// 1-D convolution over time (rows), kernel 3, same padding (zeros).
    /// `x` is [M x Cin], `w` is [3*Cin x Cout] laid out kernel-major, `b` is
    /// [Cout].
    pub fn conv1d_same3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, cin) = self.vals[x.idx()].dims2();
        let (wk, cout) = self.vals[w.idx()].dims2();
        if wk != 3 * cin {
            return Err(Error::Dim(format!("conv1d_same3: weight rows {} vs 3*{}", wk, cin)));
        }
        if self.vals[b.idx()].numel() != cout {
            return Err(Error::Dim(format!("conv1d_same3: bias {} vs {}", self.vals[b.idx()].numel(), cout)));
        }
        let tx = &self.vals[x.idx()];
        let tw = &self.vals[w.idx()];
        let tb = &self.vals[b.idx()];
        let mut data = vec![0.0; m * cout];
        for t in 0..m {
            let dst = &mut data[t * cout..(t + 1) * cout];
            dst.copy_from_slice(&tb.data);
            for k in 0..3usize {
                let src_t = t as isize + k as isize - 1;
                if src_t < 0 || src_t >= m as isize {
                    continue;
                }
                let src = &tx.data[src_t as usize * cin..(src_t as usize + 1) * cin];
                for ci in 0..cin {
                    let xv = src[ci];
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &tw.data[(k * cin + ci) * cout..(k * cin + ci + 1) * cout];
                    for o in 0..cout {
                        dst[o] += xv * wrow[o];
                    }
                }
            }
        }
        let needs = self.needs[x.idx()] || self.needs[w.idx()] || self.needs[b.idx()];
        let out = self.out(vec![m, cout], data, needs, "conv1d_same3")?;
        self.record(Node::Conv1dSame3 { x, w, b, out });
        Ok(out)
    }

    /// Stride-2 max pooling over time with ceil semantics on the valid
    /// prefix: output row t pools input rows {2t, 2t+1} clipped to
    /// `valid_in`. Rows at or beyond ceil(valid_in/2) are zeroed so padded
    /// tails stay inert. Returns the output var and its valid length.
    pub fn max_pool2_time(&mut self, x: Var, valid_in: usize) -> Result<(Var, usize)> {
        let (m, c) = self.vals[x.idx()].dims2();
        if valid_in > m {
            return Err(Error::Contract(format!("max_pool2_time: valid {} > rows {}", valid_in, m)));
        }
        if valid_in == 0 {
            return Err(Error::Contract(String::from("max_pool2_time: empty valid prefix")));
        }
        let out_rows = m.div_ceil(2);
        let valid_out = valid_in.div_ceil(2);
        let tx = &self.vals[x.idx()];
        let mut data = vec![0.0; out_rows * c];
        let mut argmax = vec![usize::MAX; out_rows * c];
        for t in 0..valid_out {
            let r0 = 2 * t;
            let r1 = 2 * t + 1;
            for col in 0..c {
                let v0 = tx.data[r0 * c + col];
                // Ties prefer the earlier row.
                let (v, arg) = if r1 < valid_in {
                    let v1 = tx.data[r1 * c + col];
                    if v1 > v0 { (v1, r1 * c + col) } else { (v0, r0 * c + col) }
                } else {
                    (v0, r0 * c + col)
                };
                data[t * c + col] = v;
                argmax[t * c + col] = arg;
            }
        }
        let needs = self.needs[x.idx()];
        let out = self.out(vec![out_rows, c], data, needs, "max_pool2_time")?;
        self.record(Node::MaxPool2 { x, argmax, out });
        Ok((out, valid_out))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.vals[x.idx()].data.iter().sum();
        let needs = self.needs[x.idx()];
        let out = self.out(vec![1], vec![s], needs, "sum")?;
        self.record(Node::Sum { x, out });
        Ok(out)
    }

    /// Summed cross-entropy of `probs` rows under constant target rows:
    /// -sum over rows r with row_mask[r] of sum_v targets[r,v] ln(probs[r,v]),
    /// with probabilities clamped at [`PROB_FLOOR`]. Clamping at a position
    /// with nonzero target mass increments [`Graph::clamp_warnings`].
    pub fn cross_entropy_sum(&mut self, probs: Var, targets: &[f64], row_mask: &[bool]) -> Result<Var> {
        let (rows, cols) = self.vals[probs.idx()].dims2();
        if targets.len() != rows * cols {
            return Err(Error::Dim(format!("cross_entropy_sum: targets {} vs {}", targets.len(), rows * cols)));
        }
        if row_mask.len() != rows {
            return Err(Error::Dim(format!("cross_entropy_sum: mask {} vs {} rows", row_mask.len(), rows)));
        }
        let tp = &self.vals[probs.idx()];
        let mut total = 0.0;
        let mut clamps = 0u64;
        for r in 0..rows {
            if !row_mask[r] {
                continue;
            }
            for c in 0..cols {
                let t = targets[r * cols + c];
                if t == 0.0 {
                    continue;
                }
                let p = tp.data[r * cols + c];
                if p < PROB_FLOOR {
                    clamps += 1;
                    total -= t * libm::log(PROB_FLOOR);
                } else {
                    total -= t * libm::log(p);
                }
            }
        }
        self.clamp_warnings += clamps;
        let needs = self.needs[probs.idx()];
        let out = self.out(vec![1], vec![total], needs, "cross_entropy_sum")?;
        self.record(Node::CrossEntropySum { probs, targets: targets.to_vec(), row_mask: row_mask.to_vec(), out });
        Ok(out)
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from a scalar loss. Gradients are written into the
    /// `grad` field of every arena tensor on the differentiable path,
    /// accumulating additively across multiple uses and multiple calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.recording {
            return Err(Error::Contract(String::from("backward on an inference graph")));
        }
        if !self.vals[loss.idx()].is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.vals[loss.idx()].shape
            )));
        }
        let n = self.vals.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.idx()] = Some(vec![1.0]);

        macro_rules! take {
            ($v:expr) => {
                match grads[$v.idx()].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
        }

        for node_i in (0..self.nodes.len()).rev() {
            // Split borrows: the node is read-only, grads are mutated.
            let node = &self.nodes[node_i];
            match node {
                Node::Add { a, b, out } => {
                    let g = take!(out);
                    self.accum(&mut grads, *a, &g);
                    self.accum(&mut grads, *b, &g);
                }
                Node::MulElem { a, b, out } => {
                    let g = take!(out);
                    if self.needs[a.idx()] {
                        let da: Vec<f64> =
                            g.iter().zip(&self.vals[b.idx()].data).map(|(&gv, &bv)| gv * bv).collect();
                        self.accum(&mut grads, *a, &da);
                    }
                    if self.needs[b.idx()] {
                        let db: Vec<f64> =
                            g.iter().zip(&self.vals[a.idx()].data).map(|(&gv, &av)| gv * av).collect();
                        self.accum(&mut grads, *b, &db);
                    }
                }
                Node::Scale { a, c, out } => {
                    let g = take!(out);
                    let da: Vec<f64> = g.iter().map(|&gv| gv * c).collect();
                    self.accum(&mut grads, *a, &da);
                }
                Node::ScaleRows { a, weights, out } => {
                    let g = take!(out);
                    let (rows, cols) = self.vals[a.idx()].dims2();
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            da[r * cols + c] = g[r * cols + c] * weights[r];
                        }
                    }
                    self.accum(&mut grads, *a, &da);
                }
                Node::AddBias { x, b, out } => {
                    let g = take!(out);
                    if self.needs[b.idx()] {
                        let (rows, cols) = self.vals[x.idx()].dims2();
                        let mut db = vec![0.0; cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                db[c] += g[r * cols + c];
                            }
                        }
                        self.accum(&mut grads, *b, &db);
                    }
                    self.accum(&mut grads, *x, &g);
                }
                Node::Matmul { a, b, out } => {
                    let g = take!(out);
                    let (m, k) = self.vals[a.idx()].dims2();
                    let n2 = self.vals[b.idx()].dims2().1;
                    if self.needs[a.idx()] {
                        // dA = dC . B^T
                        let bt = transpose_raw(&self.vals[b.idx()].data, k, n2);
                        let da = matmul_raw(&g, &bt, m, n2, k);
                        self.accum(&mut grads, *a, &da);
                    }
                    if self.needs[b.idx()] {
                        // dB = A^T . dC
                        let at = transpose_raw(&self.vals[a.idx()].data, m, k);
                        let db = matmul_raw(&at, &g, k, m, n2);
                        self.accum(&mut grads, *b, &db);
                    }
                }
                Node::Transpose { a, out } => {
                    let g = take!(out);
                    let (m, n2) = self.vals[a.idx()].dims2();
                    let da = transpose_raw(&g, n2, m);
                    self.accum(&mut grads, *a, &da);
                }
                Node::Relu { x, out } => {
                    let g = take!(out);
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.vals[x.idx()].data)
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect();
                    self.accum(&mut grads, *x, &da);
                }
                Node::SliceCols { x, start, len, out } => {
                    let g = take!(out);
                    let (rows, cols) = self.vals[x.idx()].dims2();
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for j in 0..*len {
                            dx[r * cols + start + j] = g[r * len + j];
                        }
                    }
                    self.accum(&mut grads, *x, &dx);
                }
                Node::ConcatCols { parts, out } => {
                    let g = take!(out);
                    let rows = self.vals[out.idx()].dims2().0;
                    let total = self.vals[out.idx()].dims2().1;
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.vals[p.idx()].dims2().1;
                        if self.needs[p.idx()] {
                            let mut dp = vec![0.0; rows * c];
                            for r in 0..rows {
                                dp[r * c..(r + 1) * c]
                                    .copy_from_slice(&g[r * total + offset..r * total + offset + c]);
                            }
                            self.accum(&mut grads, p, &dp);
                        }
                        offset += c;
                    }
                }
                Node::GatherRows { table, ids, scale, out } => {
                    let g = take!(out);
                    let (v, d) = self.vals[table.idx()].dims2();
                    let mut dt = vec![0.0; v * d];
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[id * d + c] += scale * g[r * d + c];
                        }
                    }
                    self.accum(&mut grads, *table, &dt);
                }
                Node::Softmax { x, out } | Node::MaskedSoftmax { x, out, .. } => {
                    let g = take!(out);
                    let (rows, cols) = self.vals[x.idx()].dims2();
                    let y = &self.vals[out.idx()].data;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        if let Node::MaskedSoftmax { mask, .. } = node {
                            // Fully masked rows are constant (uniform).
                            if !mask[r * cols..(r + 1) * cols].iter().any(|&b| b) {
                                continue;
                            }
                        }
                        let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for c in 0..cols {
                            dx[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    self.accum(&mut grads, *x, &dx);
                }
                Node::LogSoftmax { x, out } => {
                    let g = take!(out);
                    let (rows, cols) = self.vals[x.idx()].dims2();
                    let y = &self.vals[out.idx()].data;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let gsum: f64 = gr.iter().sum();
                        for c in 0..cols {
                            let p = libm::exp(y[r * cols + c]);
                            dx[r * cols + c] = gr[c] - p * gsum;
                        }
                    }
                    self.accum(&mut grads, *x, &dx);
                }
                Node::LayerNorm { x, gain, bias, out, x_hat, inv_std } => {
                    let g = take!(out);
                    let (rows, cols) = self.vals[x.idx()].dims2();
                    let gain_data = &self.vals[gain.idx()].data;
                    if self.needs[gain.idx()] {
                        let mut dg = vec![0.0; cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                dg[c] += g[r * cols + c] * x_hat[r * cols + c];
                            }
                        }
                        self.accum(&mut grads, *gain, &dg);
                    }
                    if self.needs[bias.idx()] {
                        let mut db = vec![0.0; cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                db[c] += g[r * cols + c];
                            }
                        }
                        self.accum(&mut grads, *bias, &db);
                    }
                    if self.needs[x.idx()] {
                        let mut dx = vec![0.0; rows * cols];
                        let inv_c = 1.0 / cols as f64;
                        for r in 0..rows {
                            let mut mean_dxhat = 0.0;
                            let mut mean_dxhat_xhat = 0.0;
                            for c in 0..cols {
                                let dxh = g[r * cols + c] * gain_data[c];
                                mean_dxhat += dxh;
                                mean_dxhat_xhat += dxh * x_hat[r * cols + c];
                            }
                            mean_dxhat *= inv_c;
                            mean_dxhat_xhat *= inv_c;
                            for c in 0..cols {
                                let dxh = g[r * cols + c] * gain_data[c];
                                dx[r * cols + c] =
                                    inv_std[r] * (dxh - mean_dxhat - x_hat[r * cols + c] * mean_dxhat_xhat);
                            }
                        }
                        self.accum(&mut grads, *x, &dx);
                    }
                }
                Node::Dropout { x, mask, out } => {
                    let g = take!(out);
                    let dx: Vec<f64> = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                    self.accum(&mut grads, *x, &dx);
                }
                Node::Conv1dSame3 { x, w, b, out } => {
                    let g = take!(out);
                    let (m, cin) = self.vals[x.idx()].dims2();
                    let cout = self.vals[b.idx()].numel();
                    if self.needs[b.idx()] {
                        let mut db = vec![0.0; cout];
                        for t in 0..m {
                            for o in 0..cout {
                                db[o] += g[t * cout + o];
                            }
                        }
                        self.accum(&mut grads, *b, &db);
                    }
                    if self.needs[w.idx()] {
                        let xd = &self.vals[x.idx()].data;
                        let mut dw = vec![0.0; 3 * cin * cout];
                        for t in 0..m {
                            for k in 0..3usize {
                                let src_t = t as isize + k as isize - 1;
                                if src_t < 0 || src_t >= m as isize {
                                    continue;
                                }
                                let src = &xd[src_t as usize * cin..(src_t as usize + 1) * cin];
                                for ci in 0..cin {
                                    let xv = src[ci];
                                    if xv == 0.0 {
                                        continue;
                                    }
                                    let dst = &mut dw[(k * cin + ci) * cout..(k * cin + ci + 1) * cout];
                                    for o in 0..cout {
                                        dst[o] += xv * g[t * cout + o];
                                    }
                                }
                            }
                        }
                        self.accum(&mut grads, *w, &dw);
                    }
                    if self.needs[x.idx()] {
                        let wd = &self.vals[w.idx()].data;
                        let mut dx = vec![0.0; m * cin];
                        for t in 0..m {
                            for k in 0..3usize {
                                let src_t = t as isize + k as isize - 1;
                                if src_t < 0 || src_t >= m as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    let wrow = &wd[(k * cin + ci) * cout..(k * cin + ci + 1) * cout];
                                    let mut acc = 0.0;
                                    for o in 0..cout {
                                        acc += wrow[o] * g[t * cout + o];
                                    }
                                    dx[src_t as usize * cin + ci] += acc;
                                }
                            }
                        }
                        self.accum(&mut grads, *x, &dx);
                    }
                }
                Node::MaxPool2 { x, argmax, out } => {
                    let g = take!(out);
                    let numel = self.vals[x.idx()].numel();
                    let mut dx = vec![0.0; numel];
                    for (i, &arg) in argmax.iter().enumerate() {
                        if arg != usize::MAX {
                            dx[arg] += g[i];
                        }
                    }
                    self.accum(&mut grads, *x, &dx);
                }
                Node::Sum { x, out } => {
                    let g = take!(out);
                    let dx = vec![g[0]; self.vals[x.idx()].numel()];
                    self.accum(&mut grads, *x, &dx);
                }
                Node::CrossEntropySum { probs, targets, row_mask, out } => {
                    let g = take!(out);
                    let (rows, cols) = self.vals[probs.idx()].dims2();
                    let pd = &self.vals[probs.idx()].data;
                    let mut dp = vec![0.0; rows * cols];
                    for r in 0..rows {
                        if !row_mask[r] {
                            continue;
                        }
                        for c in 0..cols {
                            let t = targets[r * cols + c];
                            if t == 0.0 {
                                continue;
                            }
                            let p = pd[r * cols + c];
                            // Clamped positions contribute a constant.
                            if p >= PROB_FLOOR {
                                dp[r * cols + c] = -g[0] * t / p;
                            }
                        }
                    }
                    self.accum(&mut grads, *probs, &dp);
                }
            }
        }

        // Publish accumulated gradients into the arena tensors.
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                for &v in &g {
                    if !v.is_finite() {
                        return Err(Error::Numeric(String::from("non-finite gradient")));
                    }
                }
                self.vals[i].accumulate_grad(&g);
            }
        }
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if !self.needs[v.idx()] {
            return;
        }
        match &mut grads[v.idx()] {
            Some(acc) => {
                for (a, &x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }
}

/// Plain triple-loop matrix product, `a` is m x k, `b` is k x n.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// Row-wise softmax of a flat [rows x cols] matrix into a fresh buffer.
pub fn softmax_rows_of(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        softmax_row(&data[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
    }
    out
}

/// Numerically stable softmax of one row into `out`.
pub fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = libm::exp(v - m);
        *o = e;
        sum += e;
    }
    out.iter_mut().for_each(|v| *v /= sum);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{simple_stream, Domain};
    use alloc::vec::Vec;

    fn leaf(g: &mut Graph, shape: Vec<usize>, data: Vec<f64>) -> Var {
        let t = Tensor::param(shape, data).unwrap();
        g.leaf(&t)
    }

    #[test]
    fn matmul_identity_passes_through() {
        let mut g = Graph::inference();
        let i2 = g.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = g.constant(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = g.matmul(i2, b).unwrap();
        assert_eq!(g.value(c).data, vec![5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        // Independent naive oracle for the 2x2 case.
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut expect = [0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    expect[i * 2 + j] += a[i * 2 + k] * b[k * 2 + j];
                }
            }
        }
        assert_eq!(expect, [19.0, 22.0, 43.0, 50.0]);

        let mut g = Graph::inference();
        let av = g.constant(vec![2, 2], a.to_vec()).unwrap();
        let bv = g.constant(vec![2, 2], b.to_vec()).unwrap();
        let c = g.matmul(av, bv).unwrap();
        assert_eq!(g.value(c).data, expect.to_vec());
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let mut g = Graph::inference();
        let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Dim(_))));
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let mut g = Graph::inference();
        let x = g.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data, vec![0.5, 0.5]);

        let c = g.constant(vec![1, 4], vec![3.7, 3.7, 3.7, 3.7]).unwrap();
        let yc = g.softmax_rows(c).unwrap();
        for &v in &g.value(yc).data {
            assert!((v - 0.25).abs() < 1e-15);
        }

        let a = g.constant(vec![1, 3], vec![0.3, -1.2, 2.0]).unwrap();
        let b = g.constant(vec![1, 3], vec![0.3 + 100.0, -1.2 + 100.0, 2.0 + 100.0]).unwrap();
        let ya = g.softmax_rows(a).unwrap();
        let yb = g.softmax_rows(b).unwrap();
        for (va, vb) in g.value(ya).data.iter().zip(&g.value(yb).data) {
            assert!((va - vb).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_matches_extended_precision_oracle() {
        // exp-normalize of [1,2,3] computed at 50-digit precision.
        let expect = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219];
        let mut g = Graph::inference();
        let x = g.constant(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = g.softmax_rows(x).unwrap();
        for (got, want) in g.value(y).data.iter().zip(expect) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = simple_stream(3, Domain::DataProto);
        let data: Vec<f64> = (0..40).map(|_| crate::rng::gaussian(&mut rng) * 5.0).collect();
        let mut g = Graph::inference();
        let x = g.constant(vec![8, 5], data).unwrap();
        let y = g.softmax_rows(x).unwrap();
        for r in 0..8 {
            let s: f64 = g.value(y).data[r * 5..(r + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_softmax_row_is_an_error() {
        let mut g = Graph::inference();
        let x = g.constant(vec![2, 0], vec![]).unwrap();
        assert!(g.softmax_rows(x).is_err());
        assert!(g.log_softmax_rows(x).is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_zeroed_by_eps() {
        let mut g = Graph::inference();
        let x = g.constant(vec![1, 4], vec![2.5; 4]).unwrap();
        let gain = g.constant(vec![4], vec![1.0; 4]).unwrap();
        let bias = g.constant(vec![4], vec![0.0; 4]).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-6).unwrap();
        for &v in &g.value(y).data {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_already_normalized_row() {
        let mut g = Graph::inference();
        let x = g.constant(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let gain = g.constant(vec![2], vec![1.0; 2]).unwrap();
        let bias = g.constant(vec![2], vec![0.0; 2]).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        assert!((g.value(y).data[0] - 1.0).abs() < 1e-6);
        assert!((g.value(y).data[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_statistics_on_random_row() {
        let mut rng = simple_stream(5, Domain::DataProto);
        let data: Vec<f64> = (0..64).map(|_| crate::rng::gaussian(&mut rng) * 3.0 + 1.0).collect();
        let mut g = Graph::inference();
        let x = g.constant(vec![1, 64], data).unwrap();
        let gain = g.constant(vec![64], vec![1.0; 64]).unwrap();
        let bias = g.constant(vec![64], vec![0.0; 64]).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-9).unwrap();
        let out = &g.value(y).data;
        let mean: f64 = out.iter().sum::<f64>() / 64.0;
        let var: f64 = out.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = simple_stream(1, Domain::Dropout);
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y0 = g.dropout(x, 0.0, &mut rng, true).unwrap();
        assert_eq!(g.value(y0).data, g.value(x).data);
        let y1 = g.dropout(x, 0.9, &mut rng, false).unwrap();
        assert_eq!(g.value(y1).data, g.value(x).data);
        assert!(g.dropout(x, 1.0, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_zero_fraction_monte_carlo() {
        let n = 100_000;
        let mut rng = simple_stream(2, Domain::Dropout);
        let mut g = Graph::inference();
        let x = g.constant(vec![n, 1], vec![1.0; n]).unwrap();
        let y = g.dropout(x, 0.5, &mut rng, true).unwrap();
        let zeros = g.value(y).data.iter().filter(|&&v| v == 0.0).count();
        let frac = zeros as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "zero fraction {frac}");
        // Survivors are rescaled.
        for &v in g.value(y).data.iter().filter(|&&v| v != 0.0).take(5) {
            assert_eq!(v, 2.0);
        }
    }

    #[test]
    fn backward_square_and_constant() {
        // loss = x^2 at x=3 -> grad 6 (as a 1x1 matmul).
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 1], vec![3.0]);
        let y = g.matmul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);

        // loss = sum(softmax(x)) is constant 1 -> zero gradient.
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 4], vec![0.3, -0.7, 1.1, 0.0]);
        let s = g.softmax_rows(x).unwrap();
        let loss = g.sum(s).unwrap();
        g.backward(loss).unwrap();
        for &v in g.grad(x).unwrap() {
            assert!(v.abs() < 1e-12, "grad {v}");
        }
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 2], vec![1.0, 2.0]);
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn fanout_gradients_sum() {
        // y = sum(x*x) + sum(x) uses x twice; dy/dx = 2x + 1.
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 3], vec![1.0, -2.0, 0.5]);
        let sq = g.mul_elem(x, x).unwrap();
        let s1 = g.sum(sq).unwrap();
        let s2 = g.sum(x).unwrap();
        let loss = g.add(s1, s2).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        let expect = [3.0, -3.0, 2.0];
        for (gv, ev) in grad.iter().zip(expect) {
            assert!((gv - ev).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_in_forward_is_a_numeric_error() {
        let mut g = Graph::inference();
        let x = g.constant(vec![1, 1], vec![1e308]).unwrap();
        let r = g.add(x, x); // overflows to inf
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut rng = simple_stream(9, Domain::Dropout);
            let mut g = Graph::inference();
            let x = g.constant(vec![4, 4], (0..16).map(|i| i as f64 * 0.37 - 2.0).collect()).unwrap();
            let y = g.softmax_rows(x).unwrap();
            let z = g.dropout(y, 0.3, &mut rng, true).unwrap();
            g.value(z).data.clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn masked_softmax_zeroes_disallowed_and_handles_empty_rows() {
        let mut g = Graph::inference();
        let x = g.constant(vec![2, 3], vec![5.0, 1.0, -2.0, 0.1, 0.2, 0.3]).unwrap();
        let mask = [true, false, true, false, false, false];
        let y = g.masked_softmax_rows(x, &mask).unwrap();
        let d = &g.value(y).data;
        assert_eq!(d[1], 0.0);
        assert!((d[0] + d[2] - 1.0).abs() < 1e-12);
        // Fully masked row falls back to uniform.
        for c in 0..3 {
            assert!((d[3 + c] - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn max_pool_ceil_lengths_and_argmax_routing() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![5, 1], vec![1.0, 5.0, 2.0, 2.0, 9.0]);
        let (y, valid) = g.max_pool2_time(x, 5).unwrap();
        assert_eq!(valid, 3);
        assert_eq!(g.value(y).data, vec![5.0, 2.0, 9.0]);
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        // Ties prefer the earlier row (index 2 over 3).
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_clamps_and_counts() {
        let mut g = Graph::new();
        let p = leaf(&mut g, vec![1, 2], vec![0.0, 1.0]);
        let targets = [1.0, 0.0];
        let loss = g.cross_entropy_sum(p, &targets, &[true]).unwrap();
        assert_eq!(g.clamp_warnings, 1);
        assert!((g.scalar_value(loss) - -libm::log(PROB_FLOOR)).abs() < 1e-9);
        g.backward(loss).unwrap();
        // Clamped cell contributes zero gradient.
        assert_eq!(g.grad(p).unwrap(), &[0.0, 0.0]);
    }
}
