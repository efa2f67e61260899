use crate::error::{KurtailError, Result};
use crate::linalg::{matmul, Matrix, RandomizedHadamard};
use crate::quant::fake_quantize;
use crate::rotor::rms_normalize;

use super::{DecoderModel, LayerWeights, ModelConfig, OnlineRotations, QuantConfigSet};

/// Intermediates of one layer, all `tokens × channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCapture {
    /// Residual stream entering the attention block (before RMSNorm).
    pub mhsa_input: Matrix,
    /// What `Wq`, `Wk` and `Wv` see: normalized, quantized if enabled.
    pub attn_input: Matrix,
    /// `attn_input · Wv`, before KV quantization.
    pub value_output: Matrix,
    /// Concatenated head outputs before R4.
    pub attention_output: Matrix,
    /// What `Wo` sees.
    pub wo_input: Matrix,
    /// Residual stream entering the FFN block (before RMSNorm).
    pub ffn_input: Matrix,
    /// What `Wup` and `Wgate` see.
    pub ffn_norm: Matrix,
    /// What `Wdown` sees.
    pub down_input: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// tokens × vocab
    pub logits: Matrix,
    pub captures: Vec<LayerCapture>,
}

/// Rotary embedding on one head's `tokens × head_dim` block. Channel pairs
/// `(2i, 2i+1)` rotate by `pos · base^(−2i/head_dim)`.
pub fn rope_apply(x: &Matrix, positions: &[usize], base: f64) -> Result<Matrix> {
    let hd = x.cols();
    if !hd.is_multiple_of(2) {
        return Err(KurtailError::InvalidArgument(format!("RoPE needs an even head_dim, got {hd}")));
    }
    if positions.len() != x.rows() {
        return Err(KurtailError::dims(format!(
            "{} positions for {} tokens",
            positions.len(),
            x.rows()
        )));
    }
    let mut y = x.clone();
    rope_in_place(&mut y, 0, hd, positions, base);
    Ok(y)
}

fn rope_in_place(x: &mut Matrix, start: usize, hd: usize, positions: &[usize], base: f64) {
    let freqs: Vec<f64> = (0..hd / 2)
        .map(|i| base.powf(-2.0 * i as f64 / hd as f64))
        .collect();
    for (t, &pos) in positions.iter().enumerate() {
        let row = &mut x.row_mut(t)[start..start + hd];
        for (i, f) in freqs.iter().enumerate() {
            let (sin, cos) = (pos as f64 * f).sin_cos();
            let (a, b) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = a * cos - b * sin;
            row[2 * i + 1] = a * sin + b * cos;
        }
    }
}

fn rms_scaled(x: &Matrix, gamma: &[f64], eps: f64) -> Matrix {
    let mut y = rms_normalize(x, eps);
    if gamma.iter().any(|g| *g != 1.0) {
        for i in 0..y.rows() {
            y.row_mut(i).iter_mut().zip(gamma).for_each(|(v, g)| *v *= g);
        }
    }
    y
}

fn rotate_rows(x: &mut Matrix, h: &RandomizedHadamard, block: usize) {
    for i in 0..x.rows() {
        x.row_mut(i).chunks_mut(block).for_each(|c| h.apply_row(c));
    }
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// Causal softmax attention for one head. `q`, `k`, `v` are `T × head_dim`.
fn attend(q: &Matrix, k: &Matrix, v: &Matrix, out: &mut Matrix, col: usize) {
    let hd = q.cols();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut scores = Vec::with_capacity(q.rows());
    for t in 0..q.rows() {
        scores.clear();
        let qt = q.row(t);
        for s in 0..=t {
            scores.push(qt.iter().zip(k.row(s)).map(|(a, b)| a * b).sum::<f64>() * scale);
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for p in scores.iter_mut() {
            *p = (*p - max).exp();
            z += *p;
        }
        let row = &mut out.row_mut(t)[col..col + hd];
        row.iter_mut().for_each(|o| *o = 0.0);
        for (s, p) in scores.iter().enumerate() {
            let w = p / z;
            row.iter_mut().zip(v.row(s)).for_each(|(o, vv)| *o += w * vv);
        }
    }
}

fn maybe_quant(x: Matrix, spec: Option<&crate::quant::QuantSpec>) -> Result<Matrix> {
    match spec {
        Some(s) => fake_quantize(&x, s),
        None => Ok(x),
    }
}

/// Online rotations resolved to their transforms.
pub(crate) struct OnlineTransforms {
    r3: Option<RandomizedHadamard>,
    r4: Option<RandomizedHadamard>,
    r5: Option<RandomizedHadamard>,
}

impl OnlineTransforms {
    pub(crate) fn new(config: &ModelConfig, online: &OnlineRotations) -> Result<Self> {
        Ok(Self {
            r3: online.r3.build(config.head_dim())?,
            r4: online.r4.build(config.d_model)?,
            r5: online.r5.build(config.d_ff)?,
        })
    }
}

/// One decoder layer. Returns the updated residual stream.
pub(crate) fn layer_forward(
    config: &ModelConfig,
    layer: &LayerWeights,
    online: &OnlineTransforms,
    h: &Matrix,
    positions: &[usize],
    quant: Option<&QuantConfigSet>,
    capture: bool,
) -> Result<(Matrix, Option<LayerCapture>)> {
    let act = quant.map(|q| &q.activation);
    let kv = quant.map(|q| &q.kv);
    let hd = config.head_dim();
    let eps = config.rms_epsilon;

    let attn_input = maybe_quant(rms_scaled(h, &layer.rms1, eps), act)?;
    let mut q = matmul(&attn_input, &layer.wq)?;
    let mut k = matmul(&attn_input, &layer.wk)?;
    let value_output = matmul(&attn_input, &layer.wv)?;
    for head in 0..config.n_heads {
        rope_in_place(&mut q, head * hd, hd, positions, config.rope_base);
        rope_in_place(&mut k, head * hd, hd, positions, config.rope_base);
    }
    if let Some(r3) = &online.r3 {
        rotate_rows(&mut q, r3, hd);
        rotate_rows(&mut k, r3, hd);
    }
    let k = maybe_quant(k, kv)?;
    let v = maybe_quant(value_output.clone(), kv)?;

    let mut attention_output = Matrix::zeros(h.rows(), config.d_model);
    for head in 0..config.n_heads {
        attend(
            &q.column_block(head * hd, hd),
            &k.column_block(head * hd, hd),
            &v.column_block(head * hd, hd),
            &mut attention_output,
            head * hd,
        );
    }
    let mut wo_input = attention_output.clone();
    if let Some(r4) = &online.r4 {
        rotate_rows(&mut wo_input, r4, config.d_model);
    }
    let wo_input = maybe_quant(wo_input, act)?;
    let h1 = h.add(&matmul(&wo_input, &layer.wo)?)?;

    let ffn_norm = maybe_quant(rms_scaled(&h1, &layer.rms2, eps), act)?;
    let up = matmul(&ffn_norm, &layer.w_up)?;
    let gate = matmul(&ffn_norm, &layer.w_gate)?;
    let mut hidden = Matrix::from_fn(up.rows(), up.cols(), |i, j| silu(gate.get(i, j)) * up.get(i, j));
    if let Some(r5) = &online.r5 {
        rotate_rows(&mut hidden, r5, config.d_ff);
    }
    let down_input = maybe_quant(hidden, act)?;
    let h2 = h1.add(&matmul(&down_input, &layer.w_down)?)?;

    let cap = capture.then(|| LayerCapture {
        mhsa_input: h.clone(),
        attn_input,
        value_output,
        attention_output,
        wo_input,
        ffn_input: h1,
        ffn_norm,
        down_input,
    });
    Ok((h2, cap))
}

pub(crate) fn final_logits(model: &DecoderModel, h: &Matrix) -> Result<Matrix> {
    let hn = rms_scaled(h, &model.final_norm, model.config.rms_epsilon);
    matmul(&hn, &model.unembedding)
}

/// Runs token ids at positions `0..T`.
pub fn forward(
    model: &DecoderModel,
    tokens: &[usize],
    quant: Option<&QuantConfigSet>,
    capture: bool,
) -> Result<ForwardOutput> {
    let positions: Vec<usize> = (0..tokens.len()).collect();
    forward_hidden(model, &model.embed(tokens)?, &positions, quant, capture)
}

/// Runs an already-embedded residual stream `h0` (tokens × d_model, in the
/// model's current residual basis) at the given positions.
pub fn forward_hidden(
    model: &DecoderModel,
    h0: &Matrix,
    positions: &[usize],
    quant: Option<&QuantConfigSet>,
    capture: bool,
) -> Result<ForwardOutput> {
    let c = &model.config;
    if h0.cols() != c.d_model {
        return Err(KurtailError::dims(format!(
            "input has {} channels, model has {}",
            h0.cols(),
            c.d_model
        )));
    }
    if positions.len() != h0.rows() {
        return Err(KurtailError::dims("one position per token"));
    }
    if h0.rows() == 0 {
        return Err(KurtailError::Empty("forward needs at least one token".into()));
    }
    if let Some(q) = quant {
        q.validate()?;
    }
    let online = OnlineTransforms::new(c, &model.online)?;
    let mut h = h0.clone();
    let mut captures = Vec::new();
    for layer in &model.layers {
        let (next, cap) = layer_forward(c, layer, &online, &h, positions, quant, capture)?;
        captures.extend(cap);
        h = next;
    }
    Ok(ForwardOutput {
        logits: final_logits(model, &h)?,
        captures,
    })
}

/// Attention output of `layer` alone (before R4), for a given residual input.
pub fn attention_reference(
    model: &DecoderModel,
    layer: usize,
    h: &Matrix,
    positions: &[usize],
) -> Result<Matrix> {
    let l = model
        .layers
        .get(layer)
        .ok_or_else(|| KurtailError::InvalidArgument(format!("no layer {layer}")))?;
    let online = OnlineTransforms::new(&model.config, &model.online)?;
    let (_, cap) = layer_forward(&model.config, l, &online, h, positions, None, true)?;
    Ok(cap.expect("capture requested").attention_output)
}
