//! Choosing, learning and storing rotation sets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KurtailError, Result};
use crate::linalg::{Matrix, MatrixRecord, OrthogonalMatrix, DEFAULT_ORTHO_TOL};
use crate::rotor::{train_r1, train_r2, ActivationSet, RotationTrainConfig, TrainLog};
use crate::toyformer::{ModelConfig, OnlineMode, RotationSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMethod {
    /// No rotation at all, online rotations included.
    None,
    /// Haar-random R1 and R2.
    Random,
    /// Randomized Hadamard R1 and R2.
    Hadamard,
    /// R1 and R2 learned from captured activations.
    Kurtail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub initial: f64,
    pub last: f64,
}

impl From<&TrainLog> for LossSummary {
    fn from(log: &TrainLog) -> Self {
        Self {
            initial: log.initial_loss,
            last: log.final_loss,
        }
    }
}

/// Loss logs of a learned rotation set.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingLogs {
    pub r1: TrainLog,
    pub r2: Vec<TrainLog>,
}

/// Learns R1 from every layer's MHSA and FFN inputs and one R2 per layer
/// from its value outputs. Online rotations are left off.
pub fn learn_rotations(acts: &ActivationSet, config: &RotationTrainConfig) -> Result<(RotationSet, TrainingLogs)> {
    let r1 = train_r1(acts, config)?;
    let mut r2 = Vec::new();
    let mut logs = Vec::new();
    for layer in acts.layers() {
        let cfg = RotationTrainConfig {
            seed: config.seed.wrapping_add(1 + layer as u64),
            ..config.clone()
        };
        let t = train_r2(acts, layer, &cfg)?;
        r2.push(t.rotation);
        logs.push(t.log);
    }
    if r2.iter().any(|r| r.dim() != r1.rotation.dim()) {
        return Err(KurtailError::dims("R2 and R1 sizes differ"));
    }
    Ok((
        RotationSet {
            r1: r1.rotation,
            r2,
            r3: OnlineMode::Off,
            r4: OnlineMode::Off,
            r5: OnlineMode::Off,
        },
        TrainingLogs { r1: r1.log, r2: logs },
    ))
}

/// Rotation set for `method`. `acts` is required for [`RotationMethod::Kurtail`].
/// With `online`, R3, R4 and R5 are switched on using `seed`.
pub fn build_rotations(
    method: RotationMethod,
    config: &ModelConfig,
    acts: Option<&ActivationSet>,
    train: &RotationTrainConfig,
    online: bool,
    seed: u64,
) -> Result<(RotationSet, Option<TrainingLogs>)> {
    let (set, logs) = match method {
        RotationMethod::None => return Ok((RotationSet::identity(config), None)),
        RotationMethod::Random => (RotationSet::random(config, seed)?, None),
        RotationMethod::Hadamard => {
            let mut set = RotationSet::hadamard(config, seed)?;
            set.r3 = OnlineMode::Off;
            set.r4 = OnlineMode::Off;
            set.r5 = OnlineMode::Off;
            (set, None)
        }
        RotationMethod::Kurtail => {
            let acts = acts.ok_or_else(|| {
                KurtailError::InvalidArgument("learned rotations need captured activations".into())
            })?;
            let (set, logs) = learn_rotations(acts, train)?;
            (set, Some(logs))
        }
    };
    if set.r1.dim() != config.d_model || set.r2.len() != config.n_layers {
        return Err(KurtailError::dims("rotation set does not match the model"));
    }
    Ok((if online { set.with_online(seed) } else { set }, logs))
}

/// On-disk JSON form of a [`RotationSet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotationFile {
    pub method: RotationMethod,
    pub r1: MatrixRecord,
    /// Per-layer `d_model` block-diagonal expansions.
    pub r2: Vec<MatrixRecord>,
    pub r3: OnlineMode,
    pub r4: OnlineMode,
    pub r5: OnlineMode,
}

impl RotationFile {
    pub fn new(method: RotationMethod, set: &RotationSet) -> Self {
        Self {
            method,
            r1: set.r1.matrix().into(),
            r2: set.r2.iter().map(|r| r.matrix().into()).collect(),
            r3: set.r3,
            r4: set.r4,
            r5: set.r5,
        }
    }

    /// Rebuilds the set, re-certifying orthogonality of every matrix.
    pub fn to_set(&self) -> Result<RotationSet> {
        let load = |r: &MatrixRecord| OrthogonalMatrix::new(Matrix::try_from(r.clone())?, DEFAULT_ORTHO_TOL);
        Ok(RotationSet {
            r1: load(&self.r1)?,
            r2: self.r2.iter().map(load).collect::<Result<_>>()?,
            r3: self.r3,
            r4: self.r4,
            r5: self.r5,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
