//! Activation statistics under a rotation set: kurtosis, quantization
//! sensitivity, outlier success rates and figure data.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KurtailError, Result};
use crate::linalg::Matrix;
use crate::quant::{sensitivity, Condition, SensitivityReport};
use crate::rotor::{proxy_forward, ActivationSet, BlockKind, ProxyNet};
use crate::stats::kurtosis;
use crate::toyformer::RotationSet;

/// Every `k`-th token of each record so that at most `max_tokens` remain.
pub fn subsample(acts: &ActivationSet, max_tokens: usize) -> Result<ActivationSet> {
    if max_tokens == 0 {
        return Err(KurtailError::InvalidArgument("max_tokens must be positive".into()));
    }
    acts.map_tokens(|r| {
        let n = r.tokens.rows();
        if n <= max_tokens {
            return Ok(r.tokens.clone());
        }
        let stride = n.div_ceil(max_tokens);
        let idx: Vec<usize> = (0..n).step_by(stride).collect();
        Ok(r.tokens.select_rows(&idx))
    })
}

/// What the quantizer sees after each rotation: `RMSNorm(x·R1)` for block
/// inputs and `V·R2` for value outputs.
pub fn rotated_view(acts: &ActivationSet, set: &RotationSet) -> Result<ActivationSet> {
    acts.map_tokens(|r| {
        let net = match r.block {
            BlockKind::MhsaInput | BlockKind::FfnInput => ProxyNet::r1(set.r1.clone()),
            BlockKind::ValueOutput => ProxyNet::r2(
                set.r2
                    .get(r.layer)
                    .ok_or_else(|| KurtailError::dims(format!("no R2 for layer {}", r.layer)))?
                    .clone(),
            ),
        };
        proxy_forward(&r.tokens, &net)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KurtosisEntry {
    pub layer: usize,
    pub block: BlockKind,
    pub before: f64,
    pub after: f64,
}

/// Kurtosis of every record in two aligned views.
pub fn kurtosis_table(before: &ActivationSet, after: &ActivationSet) -> Result<Vec<KurtosisEntry>> {
    if before.records().len() != after.records().len() {
        return Err(KurtailError::dims("views have different record counts"));
    }
    before
        .records()
        .par_iter()
        .zip(after.records())
        .map(|(a, b)| {
            if (a.layer, a.block) != (b.layer, b.block) {
                return Err(KurtailError::dims("views are not aligned"));
            }
            Ok(KurtosisEntry {
                layer: a.layer,
                block: a.block,
                before: kurtosis(a.tokens.data())?.kappa,
                after: kurtosis(b.tokens.data())?.kappa,
            })
        })
        .collect()
}

/// Sensitivity curves of every record under every condition, each record's
/// tokens and channels pooled into one sample.
pub fn sensitivity_table(
    acts: &ActivationSet,
    conditions: &[(Condition, &RotationSet)],
    bits: u32,
    alphas: &[f64],
) -> Result<Vec<SensitivityReport>> {
    let mut out = Vec::new();
    for (cond, set) in conditions {
        let view = rotated_view(acts, set)?;
        let reports = view
            .records()
            .par_iter()
            .map(|r| Ok(sensitivity(r.tokens.data(), bits, alphas)?.labeled(r.layer, r.block, *cond)))
            .collect::<Result<Vec<_>>>()?;
        out.extend(reports);
    }
    Ok(out)
}

pub fn write_sensitivity_csv(path: &Path, reports: &[SensitivityReport]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    std::io::Write::write_all(&mut file, b"# aggregation=concatenated\n")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["layer", "block", "condition", "alpha", "gamma"])?;
    for r in reports {
        let (Some(layer), Some(block), Some(cond)) = (r.layer, r.block, r.condition) else {
            return Err(KurtailError::InvalidArgument("sensitivity report is unlabeled".into()));
        };
        for (a, g) in r.alphas.iter().zip(&r.gamma) {
            w.write_record([
                layer.to_string(),
                block.as_str().to_string(),
                cond.as_str().to_string(),
                a.to_string(),
                format!("{g:e}"),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Block inputs, the activations R1 acts on.
pub const BLOCK_INPUTS: [BlockKind; 2] = [BlockKind::MhsaInput, BlockKind::FfnInput];

/// Mean Γ per (condition, α) over the records of the given block kinds.
pub fn mean_gamma(reports: &[SensitivityReport], condition: Condition, alpha: f64, blocks: &[BlockKind]) -> Option<f64> {
    let vals: Vec<f64> = reports
        .iter()
        .filter(|r| r.condition == Some(condition))
        .filter(|r| r.block.is_some_and(|b| blocks.contains(&b)))
        .filter_map(|r| r.gamma_at(alpha))
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FigureRow {
    pub state: String,
    pub token: usize,
    pub channel: usize,
    pub magnitude: f64,
    pub token_max: f64,
}

/// Per-entry magnitudes of the first `tokens` tokens of two aligned
/// activation matrices, labeled `before` and `after`.
pub fn outlier_figure_rows(before: &Matrix, after: &Matrix, tokens: usize) -> Result<Vec<FigureRow>> {
    if before.shape() != after.shape() {
        return Err(KurtailError::dims("before and after shapes differ"));
    }
    let n = tokens.min(before.rows());
    let mut rows = Vec::with_capacity(2 * n * before.cols());
    for (state, m) in [("before", before), ("after", after)] {
        for t in 0..n {
            let row = m.row(t);
            let token_max = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            rows.extend(row.iter().enumerate().map(|(c, v)| FigureRow {
                state: state.to_string(),
                token: t,
                channel: c,
                magnitude: v.abs(),
                token_max,
            }));
        }
    }
    Ok(rows)
}

pub fn write_figure_csv(path: &Path, rows: &[FigureRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{random_orthogonal, OrthogonalMatrix};
    use crate::rotor::{rms_normalize, ActivationRecord, CaptureMeta};
    use crate::toyformer::tests::tiny;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn acts() -> ActivationSet {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = tiny();
        let records = (0..c.n_layers)
            .flat_map(|l| BlockKind::ALL.map(|b| (l, b)))
            .map(|(layer, block)| ActivationRecord {
                layer,
                block,
                tokens: Matrix::gaussian(50, c.d_model, &mut rng),
            })
            .collect();
        let meta = CaptureMeta {
            d_model: c.d_model,
            n_heads: c.n_heads,
            n_layers: c.n_layers,
            sample_count: 5,
            sequence_length: 10,
            source: "unit".into(),
        };
        ActivationSet::new(records, meta).unwrap()
    }

    #[test]
    fn identity_view_normalizes_inputs_only() {
        let a = acts();
        let v = rotated_view(&a, &RotationSet::identity(&tiny())).unwrap();
        for (x, y) in a.records().iter().zip(v.records()) {
            let expect = match x.block {
                BlockKind::ValueOutput => x.tokens.clone(),
                _ => rms_normalize(&x.tokens, 1e-6),
            };
            assert!(y.tokens.max_abs_diff(&expect) < 1e-14);
        }
    }

    #[test]
    fn subsample_is_strided_and_bounded() {
        let a = acts();
        let s = subsample(&a, 20).unwrap();
        for (x, y) in a.records().iter().zip(s.records()) {
            assert_eq!(y.tokens.rows(), 17);
            assert_eq!(y.tokens.row(1), x.tokens.row(3));
        }
        assert_eq!(subsample(&a, 100).unwrap(), a);
        assert!(subsample(&a, 0).is_err());
    }

    #[test]
    fn sensitivity_csv_layout() {
        let a = acts();
        let c = tiny();
        let rand = RotationSet {
            r1: random_orthogonal(c.d_model, 1).unwrap(),
            ..RotationSet::identity(&c)
        };
        let id = RotationSet::identity(&c);
        let alphas = [0.8, 1.0, 1.2];
        let reps = sensitivity_table(&a, &[(Condition::Vanilla, &id), (Condition::Kurtail, &rand)], 4, &alphas)
            .unwrap();
        assert_eq!(reps.len(), 2 * a.records().len());
        assert!(mean_gamma(&reps, Condition::Kurtail, 0.8, &BlockKind::ALL).unwrap() > 0.0);
        assert_eq!(mean_gamma(&reps, Condition::Hadamard, 0.8, &BlockKind::ALL), None);
        let inputs_only = mean_gamma(&reps, Condition::Vanilla, 1.2, &BLOCK_INPUTS).unwrap();
        let by_hand: Vec<f64> = reps
            .iter()
            .filter(|r| r.condition == Some(Condition::Vanilla) && r.block != Some(BlockKind::ValueOutput))
            .map(|r| r.gamma_at(1.2).unwrap())
            .collect();
        assert_eq!(inputs_only, by_hand.iter().sum::<f64>() / by_hand.len() as f64);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_sensitivity_csv(&p, &reps).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# aggregation=concatenated"));
        assert_eq!(lines.next(), Some("layer,block,condition,alpha,gamma"));
        assert_eq!(lines.count(), reps.len() * alphas.len());
    }

    #[test]
    fn figure_rows_track_token_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Matrix::gaussian(6, 8, &mut rng);
        let r = random_orthogonal(8, 2).unwrap();
        let y = r.apply_rows(&x).unwrap();
        let rows = outlier_figure_rows(&x, &y, 4).unwrap();
        assert_eq!(rows.len(), 2 * 4 * 8);
        for row in &rows {
            assert!(row.magnitude <= row.token_max);
        }
        assert!(outlier_figure_rows(&x, &OrthogonalMatrix::identity(6).into_matrix(), 1).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        write_figure_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("state,token,channel,magnitude,token_max\n"));
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::rotor::{ActivationRecord, CaptureMeta};
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn subsample_is_a_bounded_row_subset(rows in 1usize..300, max in 1usize..100) {
            let x = Matrix::from_fn(rows, 2, |i, j| (i * 2 + j) as f64);
            let meta = CaptureMeta {
                d_model: 2,
                n_heads: 1,
                n_layers: 1,
                sample_count: 1,
                sequence_length: rows,
                source: "prop".into(),
            };
            let record = ActivationRecord { layer: 0, block: BlockKind::MhsaInput, tokens: x };
            let s = subsample(&ActivationSet::new(vec![record], meta).unwrap(), max).unwrap();
            let y = &s.records()[0].tokens;
            prop_assert!(y.rows() <= max && y.rows() >= 1);
            let mut last = None;
            for r in y.row_iter() {
                let idx = r[0] as usize / 2;
                prop_assert!(idx < rows && last.is_none_or(|l| idx > l));
                last = Some(idx);
            }
        }
    }
}
