use crate::error::{KurtailError, Result};
use crate::linalg::{matmul, matmul_tn, random_orthogonal, randomized_hadamard, Matrix, OrthogonalMatrix};

use super::{DecoderModel, ModelConfig, OnlineMode};

/// Fusible rotations R1 (residual stream) and per-layer R2 (value/Wo
/// space, head-block-diagonal), plus the online modes for R3–R5.
#[derive(Clone, Debug, PartialEq)]
pub struct RotationSet {
    pub r1: OrthogonalMatrix,
    pub r2: Vec<OrthogonalMatrix>,
    pub r3: OnlineMode,
    pub r4: OnlineMode,
    pub r5: OnlineMode,
}

impl RotationSet {
    pub fn identity(config: &ModelConfig) -> Self {
        Self {
            r1: OrthogonalMatrix::identity(config.d_model),
            r2: vec![OrthogonalMatrix::identity(config.d_model); config.n_layers],
            r3: OnlineMode::Off,
            r4: OnlineMode::Off,
            r5: OnlineMode::Off,
        }
    }

    /// Haar-random R1 and per-layer R2 (one random head block, repeated).
    pub fn random(config: &ModelConfig, seed: u64) -> Result<Self> {
        let r2 = (0..config.n_layers)
            .map(|l| {
                Ok(random_orthogonal(config.head_dim(), seed.wrapping_add(1 + l as u64))?
                    .block_diagonal(config.n_heads))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            r1: random_orthogonal(config.d_model, seed)?,
            r2,
            ..Self::identity(config)
        })
    }

    /// Randomized Hadamard for every fusible rotation and all online
    /// rotations switched on.
    pub fn hadamard(config: &ModelConfig, seed: u64) -> Result<Self> {
        let r2 = (0..config.n_layers)
            .map(|l| {
                Ok(randomized_hadamard(config.head_dim(), seed.wrapping_add(1 + l as u64))?
                    .block_diagonal(config.n_heads))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            r1: randomized_hadamard(config.d_model, seed)?,
            r2,
            ..Self::identity(config)
        }
        .with_online(seed))
    }

    /// Switches R3, R4 and R5 on with seeds derived from `seed`.
    pub fn with_online(mut self, seed: u64) -> Self {
        self.r3 = OnlineMode::Hadamard { seed: seed ^ 0x33 };
        self.r4 = OnlineMode::Hadamard { seed: seed ^ 0x44 };
        self.r5 = OnlineMode::Hadamard { seed: seed ^ 0x55 };
        self
    }

    /// Transposed fusible rotations with online rotations off; fusing this
    /// after `self` restores the original weights.
    pub fn inverse(&self) -> Self {
        Self {
            r1: self.r1.transpose(),
            r2: self.r2.iter().map(|r| r.transpose()).collect(),
            r3: OnlineMode::Off,
            r4: OnlineMode::Off,
            r5: OnlineMode::Off,
        }
    }
}

fn scale_rows(w: &Matrix, gamma: &[f64]) -> Matrix {
    let mut out = w.clone();
    for (i, g) in gamma.iter().enumerate() {
        out.row_mut(i).iter_mut().for_each(|v| *v *= g);
    }
    out
}

/// Absorbs every RMSNorm scale into the rows of the linear maps that follow
/// it and resets the scales to 1.
pub fn fold_rmsnorm(model: &DecoderModel) -> Result<DecoderModel> {
    model.validate()?;
    let mut m = model.clone();
    for l in &mut m.layers {
        l.wq = scale_rows(&l.wq, &l.rms1);
        l.wk = scale_rows(&l.wk, &l.rms1);
        l.wv = scale_rows(&l.wv, &l.rms1);
        l.w_up = scale_rows(&l.w_up, &l.rms2);
        l.w_gate = scale_rows(&l.w_gate, &l.rms2);
        l.rms1.iter_mut().for_each(|g| *g = 1.0);
        l.rms2.iter_mut().for_each(|g| *g = 1.0);
    }
    m.unembedding = scale_rows(&m.unembedding, &m.final_norm);
    m.final_norm.iter_mut().for_each(|g| *g = 1.0);
    Ok(m)
}

fn check_head_blocks(r: &OrthogonalMatrix, head_dim: usize) -> Result<()> {
    let m = r.matrix();
    let tol = 1e-12 * m.max_abs().max(1.0);
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            if i / head_dim != j / head_dim && m.get(i, j).abs() > tol {
                return Err(KurtailError::InvalidArgument(format!(
                    "R2 must be block-diagonal over heads; entry ({i}, {j}) is {}",
                    m.get(i, j)
                )));
            }
        }
    }
    Ok(())
}

fn merge_online(current: OnlineMode, new: OnlineMode, name: &str) -> Result<OnlineMode> {
    match (current.is_on(), new.is_on()) {
        (true, true) => Err(KurtailError::InvalidArgument(format!(
            "{name} is already fused into this model"
        ))),
        (_, true) => Ok(new),
        _ => Ok(current),
    }
}

/// Folds R1 and R2 into the weights, folds the inverses of active R4/R5
/// into `Wo`/`Wdown`, and records which online rotations the model now
/// needs at inference time.
pub fn fuse_rotations(model: &DecoderModel, rot: &RotationSet) -> Result<DecoderModel> {
    model.validate()?;
    if !model.is_folded() {
        return Err(KurtailError::InvalidArgument(
            "RMSNorm scales must be folded before fusing rotations".into(),
        ));
    }
    let c = &model.config;
    let d = c.d_model;
    if rot.r1.dim() != d {
        return Err(KurtailError::dims(format!("R1 is {}, d_model is {d}", rot.r1.dim())));
    }
    if rot.r2.len() != c.n_layers {
        return Err(KurtailError::dims(format!(
            "{} R2 rotations for {} layers",
            rot.r2.len(),
            c.n_layers
        )));
    }
    for r in &rot.r2 {
        if r.dim() != d {
            return Err(KurtailError::dims(format!("R2 is {}, d_model is {d}", r.dim())));
        }
        check_head_blocks(r, c.head_dim())?;
    }
    let online = super::OnlineRotations {
        r3: merge_online(model.online.r3, rot.r3, "R3")?,
        r4: merge_online(model.online.r4, rot.r4, "R4")?,
        r5: merge_online(model.online.r5, rot.r5, "R5")?,
    };
    let h4 = rot.r4.build(d)?.map(|h| h.to_orthogonal());
    let h5 = rot.r5.build(c.d_ff)?.map(|h| h.to_orthogonal());

    let r1 = rot.r1.matrix();
    let mut m = model.clone();
    m.embedding = matmul(&m.embedding, r1)?;
    m.unembedding = matmul_tn(r1, &m.unembedding)?;
    for (l, r2) in m.layers.iter_mut().zip(&rot.r2) {
        l.wq = matmul_tn(r1, &l.wq)?;
        l.wk = matmul_tn(r1, &l.wk)?;
        l.wv = matmul(&matmul_tn(r1, &l.wv)?, r2.matrix())?;
        l.w_up = matmul_tn(r1, &l.w_up)?;
        l.w_gate = matmul_tn(r1, &l.w_gate)?;
        let mut wo = matmul_tn(r2.matrix(), &matmul(&l.wo, r1)?)?;
        if let Some(h) = &h4 {
            wo = matmul_tn(h.matrix(), &wo)?;
        }
        l.wo = wo;
        let mut wd = matmul(&l.w_down, r1)?;
        if let Some(h) = &h5 {
            wd = matmul_tn(h.matrix(), &wd)?;
        }
        l.w_down = wd;
    }
    m.online = online;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyformer::tests::tiny;
    use crate::toyformer::{forward, invariance_report, random_tokens, SyntheticModel};

    fn model(seed: u64, gamma: bool) -> DecoderModel {
        DecoderModel::synthetic(&SyntheticModel {
            config: tiny(),
            seed,
            outliers: None,
            random_norm_scales: gamma,
        })
        .unwrap()
    }

    fn inputs(m: &DecoderModel, n: usize) -> Vec<Vec<usize>> {
        (0..n)
            .map(|i| random_tokens(7, m.config.vocab_size, 100 + i as u64))
            .collect()
    }

    #[test]
    fn folding_preserves_outputs() {
        let m = model(1, true);
        let folded = fold_rmsnorm(&m).unwrap();
        assert!(folded.is_folded());
        for t in inputs(&m, 3) {
            let a = forward(&m, &t, None, false).unwrap().logits;
            let b = forward(&folded, &t, None, false).unwrap().logits;
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-10 * (x.abs() + 1.0));
            }
        }
        assert_eq!(fold_rmsnorm(&folded).unwrap(), folded);
        let unit = model(2, false);
        assert_eq!(fold_rmsnorm(&unit).unwrap(), unit);
    }

    #[test]
    fn identity_rotations_leave_model_unchanged() {
        let m = fold_rmsnorm(&model(3, true)).unwrap();
        let fused = fuse_rotations(&m, &RotationSet::identity(&m.config)).unwrap();
        assert_eq!(fused, m);
    }

    #[test]
    fn random_rotations_are_invariant() {
        let m = fold_rmsnorm(&model(4, true)).unwrap();
        let rot = RotationSet::random(&m.config, 5).unwrap();
        let fused = fuse_rotations(&m, &rot).unwrap();
        assert!(invariance_report(&m, &fused, &inputs(&m, 5)).unwrap() <= 1e-6);
    }

    #[test]
    fn online_r4_r5_are_invariant() {
        let m = fold_rmsnorm(&model(6, true)).unwrap();
        let rot = RotationSet::hadamard(&m.config, 7).unwrap();
        let fused = fuse_rotations(&m, &rot).unwrap();
        assert!(fused.online.r4.is_on() && fused.online.r5.is_on());
        assert!(invariance_report(&m, &fused, &inputs(&m, 5)).unwrap() <= 1e-6);
    }

    #[test]
    fn fusing_inverse_restores_weights() {
        let m = fold_rmsnorm(&model(8, false)).unwrap();
        let rot = RotationSet::random(&m.config, 9).unwrap();
        let back = fuse_rotations(&fuse_rotations(&m, &rot).unwrap(), &rot.inverse()).unwrap();
        assert!(back.embedding.max_abs_diff(&m.embedding) <= 1e-8);
        for (a, b) in back.layers.iter().zip(&m.layers) {
            for (x, y) in [(&a.wq, &b.wq), (&a.wv, &b.wv), (&a.wo, &b.wo), (&a.w_down, &b.w_down)] {
                assert!(x.max_abs_diff(y) <= 1e-8);
            }
        }
    }

    #[test]
    fn preconditions_are_enforced() {
        let raw = model(10, true);
        let rot = RotationSet::identity(&raw.config);
        assert!(fuse_rotations(&raw, &rot).is_err(), "unfolded scales");
        let m = fold_rmsnorm(&raw).unwrap();
        let mut bad = rot.clone();
        bad.r2.pop();
        assert!(fuse_rotations(&m, &bad).is_err());
        let mut dense = rot.clone();
        dense.r2[0] = random_orthogonal(16, 1).unwrap();
        assert!(fuse_rotations(&m, &dense).is_err(), "R2 mixing heads");
        let had = RotationSet::hadamard(&m.config, 2).unwrap();
        let once = fuse_rotations(&m, &had).unwrap();
        assert!(fuse_rotations(&once, &had).is_err(), "R4 fused twice");
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::toyformer::tests::tiny;
    use crate::toyformer::{forward, random_tokens, SyntheticModel};
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn fusion_preserves_outputs(model_seed in any::<u64>(), rot_seed in any::<u64>(), online in any::<bool>(), hadamard in any::<bool>()) {
            let config = tiny();
            let model = DecoderModel::synthetic(&SyntheticModel {
                config: config.clone(),
                seed: model_seed,
                outliers: None,
                random_norm_scales: true,
            })
            .unwrap();
            let mut rot = if hadamard {
                RotationSet::hadamard(&config, rot_seed).unwrap()
            } else {
                RotationSet::random(&config, rot_seed).unwrap()
            };
            if online {
                rot = rot.with_online(rot_seed);
            }
            let fused = fuse_rotations(&fold_rmsnorm(&model).unwrap(), &rot).unwrap();
            for i in 0..3 {
                let tokens = random_tokens(6, config.vocab_size, rot_seed ^ i);
                let a = forward(&model, &tokens, None, false).unwrap().logits;
                let b = forward(&fused, &tokens, None, false).unwrap().logits;
                prop_assert!(a.max_abs_diff(&b) <= 1e-10 * a.max_abs());
            }
        }
    }
}
