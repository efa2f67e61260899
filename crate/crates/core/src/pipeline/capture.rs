//! Layer-by-layer activation capture.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{KurtailError, Result};
use crate::linalg::Matrix;
use crate::rotor::{ActivationRecord, ActivationSet, BlockKind, CaptureMeta};
use crate::toyformer::forward::{layer_forward, OnlineTransforms};
use crate::toyformer::{DecoderModel, LayerWeights, ModelConfig, OnlineRotations, WeightFile};

use super::ktac::{manifest_entry, write_manifest, write_record, record_file_name};

/// Anything that can hand out one decoder layer at a time.
pub trait LayerSource {
    fn config(&self) -> &ModelConfig;
    fn online(&self) -> OnlineRotations;
    fn embedding(&mut self) -> Result<Matrix>;
    fn layer(&mut self, index: usize) -> Result<LayerWeights>;
}

impl LayerSource for &DecoderModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn online(&self) -> OnlineRotations {
        self.online
    }

    fn embedding(&mut self) -> Result<Matrix> {
        Ok(self.embedding.clone())
    }

    fn layer(&mut self, index: usize) -> Result<LayerWeights> {
        self.layers
            .get(index)
            .cloned()
            .ok_or_else(|| KurtailError::InvalidArgument(format!("no layer {index}")))
    }
}

impl LayerSource for WeightFile {
    fn config(&self) -> &ModelConfig {
        WeightFile::config(self)
    }

    fn online(&self) -> OnlineRotations {
        WeightFile::online(self)
    }

    fn embedding(&mut self) -> Result<Matrix> {
        self.read_embedding()
    }

    fn layer(&mut self, index: usize) -> Result<LayerWeights> {
        self.read_layer(index)
    }
}

/// Runs the calibration sequences through the model one layer at a time and
/// records the MHSA input, FFN input and value output of every layer.
///
/// Only one layer's weights are resident at once; the residual stream of all
/// sequences is carried between layers. Records are stored at f32 precision,
/// the precision of the activation files. With `out_dir`, every record is
/// written as a KTAC file as soon as its layer finishes, followed by the
/// manifest.
pub fn capture_activations<S: LayerSource>(
    mut source: S,
    sequences: &[Vec<usize>],
    label: &str,
    out_dir: Option<&Path>,
) -> Result<ActivationSet> {
    let config = source.config().clone();
    config.validate()?;
    let first = sequences
        .first()
        .ok_or_else(|| KurtailError::Empty("no calibration sequences".into()))?;
    if first.is_empty() || sequences.iter().any(|s| s.len() != first.len()) {
        return Err(KurtailError::InvalidArgument(
            "calibration sequences must share one non-zero length".into(),
        ));
    }
    if let Some(&t) = sequences.iter().flatten().find(|&&t| t >= config.vocab_size) {
        return Err(KurtailError::InvalidArgument(format!(
            "token {t} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let online = OnlineTransforms::new(&config, &source.online())?;
    let positions: Vec<usize> = (0..first.len()).collect();
    let embedding = source.embedding()?;
    let mut hidden: Vec<Matrix> = sequences
        .iter()
        .map(|s| {
            Matrix::from_fn(s.len(), config.d_model, |i, j| embedding.get(s[i], j))
        })
        .collect();
    drop(embedding);

    let mut records = Vec::with_capacity(3 * config.n_layers);
    for l in 0..config.n_layers {
        let weights = source.layer(l)?;
        weights.check(&config)?;
        let outputs = hidden
            .par_iter()
            .map(|h| layer_forward(&config, &weights, &online, h, &positions, None, true))
            .collect::<Result<Vec<_>>>()?;
        let mut parts: [Vec<Matrix>; 3] = Default::default();
        hidden = outputs
            .into_iter()
            .map(|(next, cap)| {
                let cap = cap.expect("capture requested");
                parts[0].push(cap.mhsa_input);
                parts[1].push(cap.ffn_input);
                parts[2].push(cap.value_output);
                next
            })
            .collect();
        for (kind, part) in BlockKind::ALL.into_iter().zip(parts) {
            let refs: Vec<&Matrix> = part.iter().collect();
            let rec = ActivationRecord {
                layer: l,
                block: kind,
                tokens: Matrix::vstack(&refs)?.round_to_f32(),
            };
            if let Some(dir) = out_dir {
                write_record(&dir.join(record_file_name(l, kind)), &rec)?;
            }
            records.push(rec);
        }
    }

    let meta = CaptureMeta {
        d_model: config.d_model,
        n_heads: config.n_heads,
        n_layers: config.n_layers,
        sample_count: sequences.len(),
        sequence_length: first.len(),
        source: label.to_string(),
    };
    let set = ActivationSet::new(records, meta)?;
    if let Some(dir) = out_dir {
        let entries: Vec<_> = set.records().iter().map(manifest_entry).collect();
        write_manifest(dir, set.meta(), &entries)?;
    }
    Ok(set)
}
