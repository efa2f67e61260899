use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KurtailError, Result};
use crate::gptq::{gptq_quantize, HessianAccumulator, HessianEstimate};
use crate::linalg::Matrix;
use crate::quant::{dequantize, rtn_quantize_weights};

use super::{forward, DecoderModel, LayerWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMethod {
    Rtn,
    Gptq,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightQuantConfig {
    pub method: WeightMethod,
    pub bits: u32,
}

/// Which input a linear map consumes; maps sharing an input share a Hessian.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinearKind {
    /// `Wq`, `Wk`, `Wv`
    Attention,
    /// `Wo`
    Output,
    /// `Wup`, `Wgate`
    Ffn,
    /// `Wdown`
    Down,
}

/// Per-layer Hessians of the four distinct linear inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearInputs {
    pub attention: HessianEstimate,
    pub output: HessianEstimate,
    pub ffn: HessianEstimate,
    pub down: HessianEstimate,
}

impl LinearInputs {
    pub fn get(&self, kind: LinearKind) -> &HessianEstimate {
        match kind {
            LinearKind::Attention => &self.attention,
            LinearKind::Output => &self.output,
            LinearKind::Ffn => &self.ffn,
            LinearKind::Down => &self.down,
        }
    }

    /// Runs the full-precision model over `calibration` and accumulates the
    /// Hessian of every linear input, one entry per layer.
    pub fn collect(model: &DecoderModel, calibration: &[Vec<usize>], damping: f64) -> Result<Vec<Self>> {
        if calibration.is_empty() {
            return Err(KurtailError::Empty("no calibration sequences".into()));
        }
        let c = &model.config;
        let fresh = || {
            (0..c.n_layers)
                .map(|_| {
                    [
                        HessianAccumulator::new(c.d_model),
                        HessianAccumulator::new(c.d_model),
                        HessianAccumulator::new(c.d_model),
                        HessianAccumulator::new(c.d_ff),
                    ]
                })
                .collect::<Vec<_>>()
        };
        // Fixed chunking keeps the summation order independent of the
        // thread count.
        let chunk = calibration.len().div_ceil(8);
        let partial = calibration
            .par_chunks(chunk)
            .map(|seqs| {
                let mut acc = fresh();
                for tokens in seqs {
                    let out = forward(model, tokens, None, true)?;
                    for (a, cap) in acc.iter_mut().zip(&out.captures) {
                        a[0].add(&cap.attn_input)?;
                        a[1].add(&cap.wo_input)?;
                        a[2].add(&cap.ffn_norm)?;
                        a[3].add(&cap.down_input)?;
                    }
                }
                Ok(acc)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = fresh();
        for acc in partial {
            for (t, a) in total.iter_mut().zip(acc) {
                for (ti, ai) in t.iter_mut().zip(a) {
                    ti.merge(ai)?;
                }
            }
        }
        total
            .into_iter()
            .map(|[a, o, f, d]| {
                Ok(Self {
                    attention: a.finish(damping)?,
                    output: o.finish(damping)?,
                    ffn: f.finish(damping)?,
                    down: d.finish(damping)?,
                })
            })
            .collect()
    }
}

fn quantize_one(w: &Matrix, h: Option<&HessianEstimate>, bits: u32) -> Result<Matrix> {
    let q = match h {
        Some(h) => gptq_quantize(w, h, bits)?,
        None => rtn_quantize_weights(w, bits)?,
    };
    Ok(dequantize(&q))
}

/// Replaces every linear weight inside the decoder layers by its
/// quantize-dequantize image. Embedding and unembedding stay full precision.
pub fn quantize_weights(
    model: &DecoderModel,
    config: &WeightQuantConfig,
    hessians: Option<&[LinearInputs]>,
) -> Result<DecoderModel> {
    let hessians = match (config.method, hessians) {
        (WeightMethod::Rtn, _) => None,
        (WeightMethod::Gptq, Some(h)) if h.len() == model.layers.len() => Some(h),
        (WeightMethod::Gptq, Some(_)) => {
            return Err(KurtailError::dims("one set of Hessians per layer"));
        }
        (WeightMethod::Gptq, None) => {
            return Err(KurtailError::InvalidArgument("GPTQ needs calibration Hessians".into()));
        }
    };
    let bits = config.bits;
    let layers = model
        .layers
        .par_iter()
        .enumerate()
        .map(|(i, l)| {
            let h = |k: LinearKind| hessians.map(|hs| hs[i].get(k));
            Ok(LayerWeights {
                rms1: l.rms1.clone(),
                wq: quantize_one(&l.wq, h(LinearKind::Attention), bits)?,
                wk: quantize_one(&l.wk, h(LinearKind::Attention), bits)?,
                wv: quantize_one(&l.wv, h(LinearKind::Attention), bits)?,
                wo: quantize_one(&l.wo, h(LinearKind::Output), bits)?,
                rms2: l.rms2.clone(),
                w_up: quantize_one(&l.w_up, h(LinearKind::Ffn), bits)?,
                w_gate: quantize_one(&l.w_gate, h(LinearKind::Ffn), bits)?,
                w_down: quantize_one(&l.w_down, h(LinearKind::Down), bits)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DecoderModel {
        layers,
        ..model.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyformer::tests::tiny;
    use crate::toyformer::{output_mse, random_tokens, SyntheticModel};

    fn model() -> DecoderModel {
        DecoderModel::synthetic(&SyntheticModel {
            config: tiny(),
            seed: 2,
            outliers: None,
            random_norm_scales: false,
        })
        .unwrap()
    }

    #[test]
    fn rtn_touches_only_layer_weights() {
        let m = model();
        let cfg = WeightQuantConfig {
            method: WeightMethod::Rtn,
            bits: 4,
        };
        let q = quantize_weights(&m, &cfg, None).unwrap();
        assert_eq!(q.embedding, m.embedding);
        assert_eq!(q.unembedding, m.unembedding);
        assert_ne!(q.layers[0].wq, m.layers[0].wq);
        let levels: std::collections::BTreeSet<i64> = q.layers[0]
            .wq
            .column(0)
            .iter()
            .map(|v| (v * 1e9).round() as i64)
            .collect();
        assert!(levels.len() <= 15);
    }

    #[test]
    fn gptq_beats_rtn_on_model_outputs() {
        let m = model();
        let calib: Vec<Vec<usize>> = (0..8).map(|i| random_tokens(16, 24, i)).collect();
        let eval: Vec<Vec<usize>> = (0..8).map(|i| random_tokens(16, 24, 50 + i)).collect();
        let hs = LinearInputs::collect(&m, &calib, 0.01).unwrap();
        assert_eq!(hs.len(), 2);
        assert_eq!(hs[0].down.dim(), 32);
        let rtn = quantize_weights(
            &m,
            &WeightQuantConfig {
                method: WeightMethod::Rtn,
                bits: 3,
            },
            None,
        )
        .unwrap();
        let gptq_cfg = WeightQuantConfig {
            method: WeightMethod::Gptq,
            bits: 3,
        };
        assert!(quantize_weights(&m, &gptq_cfg, None).is_err());
        let gptq = quantize_weights(&m, &gptq_cfg, Some(&hs)).unwrap();
        let e_rtn = output_mse(&m, &rtn, None, &eval).unwrap();
        let e_gptq = output_mse(&m, &gptq, None, &eval).unwrap();
        assert!(e_gptq < e_rtn, "gptq {e_gptq} vs rtn {e_rtn}");
    }
}
