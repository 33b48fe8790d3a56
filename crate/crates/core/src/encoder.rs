//! Trainable sequence encoder: bidirectional LSTM, multi-head self-attention
//! and the `tanh` emission head feeding the CRF.
//!
//! All functions build onto a caller-supplied [`Graph`] and read parameters
//! by name, so the same code serves training, inference and gradient checks.
//! LSTM gates are packed column-wise in the order input, forget, candidate,
//! output.

use rand::Rng;

use crate::autodiff::{AutodiffError, Bindings, Graph, NodeId, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    /// Hidden units per LSTM direction.
    pub lstm_hidden: usize,
    pub attn_heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub labels: usize,
    pub dropout: f64,
    /// Add the attention input back onto its output.
    pub residual: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 768,
            lstm_hidden: 512,
            attn_heads: 6,
            key_dim: 64,
            value_dim: 64,
            labels: 14,
            dropout: 0.1,
            residual: false,
        }
    }
}

impl EncoderConfig {
    /// Width of the BiLSTM output and of the attention output.
    pub fn model_dim(&self) -> usize {
        2 * self.lstm_hidden
    }

    pub fn validate(&self) -> Result<(), String> {
        let dims = [
            ("input_dim", self.input_dim),
            ("lstm_hidden", self.lstm_hidden),
            ("attn_heads", self.attn_heads),
            ("key_dim", self.key_dim),
            ("value_dim", self.value_dim),
            ("labels", self.labels),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(format!("encoder.{name} must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Every parameter name with its shape, in a fixed order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h, m) = (self.input_dim, self.lstm_hidden, self.model_dim());
        let mut out = Vec::new();
        for dir in ["fwd", "bwd"] {
            out.push((format!("lstm.{dir}.w_x"), vec![d, 4 * h]));
            out.push((format!("lstm.{dir}.w_h"), vec![h, 4 * h]));
            out.push((format!("lstm.{dir}.b"), vec![1, 4 * h]));
        }
        for head in 0..self.attn_heads {
            out.push((format!("attn.q.{head}"), vec![m, self.key_dim]));
            out.push((format!("attn.k.{head}"), vec![m, self.key_dim]));
            out.push((format!("attn.v.{head}"), vec![m, self.value_dim]));
        }
        out.push(("attn.out.w".into(), vec![self.attn_heads * self.value_dim, m]));
        out.push(("attn.out.b".into(), vec![1, m]));
        out.push(("emit.w".into(), vec![m, self.labels]));
        out.push(("emit.b".into(), vec![1, self.labels]));
        out
    }

    /// Uniform `±1/sqrt(h)` for the LSTM with forget bias shifted by +1;
    /// uniform `±1/sqrt(fan_in)` elsewhere.
    pub fn init_params(&self, rng: &mut impl Rng, store: &mut Bindings) {
        let h = self.lstm_hidden;
        for (name, shape) in self.parameter_shapes() {
            let bound = if name.starts_with("lstm.") {
                1.0 / (h as f64).sqrt()
            } else if shape[0] == 1 {
                // Bias of a linear map: fan-in is the matching weight's rows.
                let fan_in = if name.starts_with("attn.") {
                    self.attn_heads * self.value_dim
                } else {
                    self.model_dim()
                };
                1.0 / (fan_in as f64).sqrt()
            } else {
                1.0 / (shape[0] as f64).sqrt()
            };
            let n: usize = shape.iter().product();
            let mut data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            if name.starts_with("lstm.") && name.ends_with(".b") {
                for v in &mut data[h..2 * h] {
                    *v += 1.0;
                }
            }
            store.insert(name, Tensor::new(shape, data).expect("shape"));
        }
    }
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::Shape {
        node: usize::MAX,
        op,
        detail,
    }
}

fn active_len(mask: &[bool], rows: usize, op: &'static str) -> Result<usize, AutodiffError> {
    if mask.len() != rows {
        return Err(shape_err(op, format!("mask length {} vs {rows} rows", mask.len())));
    }
    let len = crate::crf::active_length(mask).map_err(|e| shape_err(op, e.to_string()))?;
    if len == 0 {
        return Err(shape_err(op, "no unmasked positions".into()));
    }
    Ok(len)
}

/// Appends zero rows so the result has `rows` rows.
fn pad_rows(g: &mut Graph<'_>, x: NodeId, rows: usize) -> Result<NodeId, AutodiffError> {
    let (have, cols) = g.value(x).dims2().expect("matrix");
    if have == rows {
        return Ok(x);
    }
    let zeros = g.constant(Tensor::zeros(&[rows - have, cols]))?;
    g.concat_rows(&[x, zeros])
}

/// One LSTM direction over the rows of `xw` (input projection plus bias,
/// already computed), right to left when `reverse`. Returns states in row
/// order.
fn lstm_direction(
    g: &mut Graph<'_>,
    xw: NodeId,
    w_h: NodeId,
    hidden: usize,
    reverse: bool,
) -> Result<NodeId, AutodiffError> {
    let len = g.value(xw).rows();
    let mut h = g.constant(Tensor::zeros(&[1, hidden]))?;
    let mut c = g.constant(Tensor::zeros(&[1, hidden]))?;
    let mut states = vec![h; len];
    for step in 0..len {
        let t = if reverse { len - 1 - step } else { step };
        let x_t = g.select_row(xw, t)?;
        let rec = g.matmul(h, w_h)?;
        let z = g.add(x_t, rec)?;
        let zi = g.slice_cols(z, 0, hidden)?;
        let zf = g.slice_cols(z, hidden, 2 * hidden)?;
        let zg = g.slice_cols(z, 2 * hidden, 3 * hidden)?;
        let zo = g.slice_cols(z, 3 * hidden, 4 * hidden)?;
        let i = g.sigmoid(zi)?;
        let f = g.sigmoid(zf)?;
        let cand = g.tanh(zg)?;
        let o = g.sigmoid(zo)?;
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        c = g.add(keep, write)?;
        let tc = g.tanh(c)?;
        h = g.mul(o, tc)?;
        states[t] = h;
    }
    g.concat_rows(&states)
}

/// `T x D` -> `T x 2h`; masked rows are zero and the backward direction
/// starts at the last unmasked position.
pub fn bilstm_forward(
    g: &mut Graph<'_>,
    x: NodeId,
    mask: &[bool],
    cfg: &EncoderConfig,
) -> Result<NodeId, AutodiffError> {
    let (rows, cols) = g
        .value(x)
        .dims2()
        .ok_or_else(|| shape_err("bilstm", "input is not a matrix".into()))?;
    if cols != cfg.input_dim {
        return Err(shape_err("bilstm", format!("input width {cols}, expected {}", cfg.input_dim)));
    }
    let len = active_len(mask, rows, "bilstm")?;
    let active = if len == rows { x } else { g.slice_rows(x, 0, len)? };
    let mut halves = Vec::with_capacity(2);
    for (dir, reverse) in [("fwd", false), ("bwd", true)] {
        let w_x = g.param(&format!("lstm.{dir}.w_x"))?;
        let w_h = g.param(&format!("lstm.{dir}.w_h"))?;
        let b = g.param(&format!("lstm.{dir}.b"))?;
        let proj = g.matmul(active, w_x)?;
        let xw = g.bias_add(proj, b)?;
        halves.push(lstm_direction(g, xw, w_h, cfg.lstm_hidden, reverse)?);
    }
    let out = g.concat_cols(&halves)?;
    pad_rows(g, out, rows)
}

/// Scaled dot-product attention per head over unmasked keys, heads
/// concatenated and projected back to `2h`. Masked query rows are zero.
pub fn multihead_attention(
    g: &mut Graph<'_>,
    hs: NodeId,
    mask: &[bool],
    cfg: &EncoderConfig,
) -> Result<NodeId, AutodiffError> {
    let (rows, cols) = g
        .value(hs)
        .dims2()
        .ok_or_else(|| shape_err("attention", "input is not a matrix".into()))?;
    if cols != cfg.model_dim() {
        return Err(shape_err("attention", format!("input width {cols}, expected {}", cfg.model_dim())));
    }
    let len = active_len(mask, rows, "attention")?;
    let queries = if len == rows { hs } else { g.slice_rows(hs, 0, len)? };
    let scale = 1.0 / (cfg.key_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.attn_heads);
    for head in 0..cfg.attn_heads {
        let wq = g.param(&format!("attn.q.{head}"))?;
        let wk = g.param(&format!("attn.k.{head}"))?;
        let wv = g.param(&format!("attn.v.{head}"))?;
        let q = g.matmul(queries, wq)?;
        let k = g.matmul(hs, wk)?;
        let v = g.matmul(hs, wv)?;
        let kt = g.transpose(k)?;
        let raw = g.matmul(q, kt)?;
        let scores = g.scale(raw, scale)?;
        let weights = g.masked_softmax(scores, mask)?;
        heads.push(g.matmul(weights, v)?);
    }
    let cat = g.concat_cols(&heads)?;
    let w = g.param("attn.out.w")?;
    let b = g.param("attn.out.b")?;
    let proj = g.matmul(cat, w)?;
    let mut out = g.bias_add(proj, b)?;
    if cfg.residual {
        out = g.add(out, queries)?;
    }
    pad_rows(g, out, rows)
}

/// `tanh(A W + b)`, one row of `K` label scores per position.
pub fn emissions(g: &mut Graph<'_>, a: NodeId, cfg: &EncoderConfig) -> Result<NodeId, AutodiffError> {
    let cols = g.value(a).cols();
    if cols != cfg.model_dim() {
        return Err(shape_err("emissions", format!("input width {cols}, expected {}", cfg.model_dim())));
    }
    let w = g.param("emit.w")?;
    let b = g.param("emit.b")?;
    let proj = g.matmul(a, w)?;
    let z = g.bias_add(proj, b)?;
    g.tanh(z)
}
