use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KurtailError, Result};
use crate::rotor::{ActivationSet, BlockKind};

use super::{forward, DecoderModel, QuantConfigSet};

/// Largest `|Δ|/(|ref| + 1e-9)` over every logit of every input.
pub fn invariance_report(
    model_plain: &DecoderModel,
    model_rotated: &DecoderModel,
    inputs: &[Vec<usize>],
) -> Result<f64> {
    if model_plain.config.vocab_size != model_rotated.config.vocab_size {
        return Err(KurtailError::dims("models disagree on vocabulary size"));
    }
    let worst = inputs
        .par_iter()
        .map(|tokens| {
            let a = forward(model_plain, tokens, None, false)?.logits;
            let b = forward(model_rotated, tokens, None, false)?.logits;
            Ok(a.data()
                .iter()
                .zip(b.data())
                .map(|(r, x)| (x - r).abs() / (r.abs() + 1e-9))
                .fold(0.0, f64::max))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(worst.into_iter().fold(0.0, f64::max))
}

/// Mean squared difference between the logits of `reference` at full
/// precision and `candidate` under `quant`, over all inputs.
pub fn output_mse(
    reference: &DecoderModel,
    candidate: &DecoderModel,
    quant: Option<&QuantConfigSet>,
    inputs: &[Vec<usize>],
) -> Result<f64> {
    if inputs.is_empty() {
        return Err(KurtailError::Empty("no evaluation inputs".into()));
    }
    let parts = inputs
        .par_iter()
        .map(|tokens| {
            let a = forward(reference, tokens, None, false)?.logits;
            let b = forward(candidate, tokens, quant, false)?.logits;
            let sq: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
            Ok((sq, a.data().len()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (sum, n) = parts.iter().fold((0.0, 0usize), |(s, n), (a, b)| (s + a, n + b));
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessRates {
    /// Percentage per block kind, over all layers' tokens.
    pub per_block: BTreeMap<BlockKind, f64>,
    /// Unweighted mean of the per-block percentages.
    pub mean: f64,
}

/// Percentage of tokens whose max |value| under `bench` is strictly below
/// that under `base`.
pub fn success_rate(base_acts: &ActivationSet, bench_acts: &ActivationSet) -> Result<SuccessRates> {
    if base_acts.records().len() != bench_acts.records().len() {
        return Err(KurtailError::dims("activation sets have different record counts"));
    }
    let mut tally: BTreeMap<BlockKind, (usize, usize)> = BTreeMap::new();
    for (a, b) in base_acts.records().iter().zip(bench_acts.records()) {
        if a.layer != b.layer || a.block != b.block || a.tokens.rows() != b.tokens.rows() {
            return Err(KurtailError::dims(format!(
                "misaligned records: layer {} {} vs layer {} {}",
                a.layer,
                a.block.as_str(),
                b.layer,
                b.block.as_str()
            )));
        }
        let e = tally.entry(a.block).or_default();
        for (ra, rb) in a.tokens.row_iter().zip(b.tokens.row_iter()) {
            let ma = ra.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let mb = rb.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            e.0 += usize::from(mb < ma);
            e.1 += 1;
        }
    }
    if tally.is_empty() {
        return Err(KurtailError::Empty("no activation records".into()));
    }
    let per_block: BTreeMap<BlockKind, f64> = tally
        .into_iter()
        .map(|(k, (hit, n))| (k, 100.0 * hit as f64 / n as f64))
        .collect();
    let mean = per_block.values().sum::<f64>() / per_block.len() as f64;
    Ok(SuccessRates { per_block, mean })
}
