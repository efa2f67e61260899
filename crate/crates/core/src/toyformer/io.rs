//! KTWT weight files.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "KTWT"
//! 4       4     version (u32, currently 1)
//! 8       20    d_model, n_heads, d_ff, n_layers, vocab_size (u32 each)
//! 28      16    rope_base, rms_epsilon (f64 each)
//! 44      36    online R3, R4, R5: mode (u32, 0 = off, 1 = hadamard) + seed (u64)
//! 80      ...   f32 tensors, row-major, in this order:
//!               embedding            vocab × d_model
//!               per layer:
//!                 rms1               d_model
//!                 wq, wk, wv, wo     d_model × d_model each
//!                 rms2               d_model
//!                 w_up, w_gate       d_model × d_ff each
//!                 w_down             d_ff × d_model
//!               final_norm           d_model
//!               unembedding          d_model × vocab
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{KurtailError, Result};
use crate::linalg::Matrix;

use super::{DecoderModel, LayerWeights, ModelConfig, OnlineMode, OnlineRotations};

pub const KTWT_MAGIC: &[u8; 4] = b"KTWT";
pub const KTWT_VERSION: u32 = 1;
const HEADER_LEN: u64 = 80;

fn put_f32s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn get_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; 4 * n];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

fn get_matrix<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Matrix> {
    Matrix::new(rows, cols, get_f32s(r, rows * cols)?)
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn layer_len(c: &ModelConfig) -> u64 {
    let d = c.d_model as u64;
    let f = c.d_ff as u64;
    4 * (2 * d + 4 * d * d + 3 * d * f)
}

pub fn write_model(model: &DecoderModel, path: &Path) -> Result<()> {
    model.validate()?;
    let c = &model.config;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(KTWT_MAGIC)?;
    w.write_all(&KTWT_VERSION.to_le_bytes())?;
    for v in [c.d_model, c.n_heads, c.d_ff, c.n_layers, c.vocab_size] {
        let v = u32::try_from(v).map_err(|_| KurtailError::Format(format!("dimension {v} exceeds u32")))?;
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&c.rope_base.to_le_bytes())?;
    w.write_all(&c.rms_epsilon.to_le_bytes())?;
    for mode in [model.online.r3, model.online.r4, model.online.r5] {
        let (flag, seed) = match mode {
            OnlineMode::Off => (0u32, 0u64),
            OnlineMode::Hadamard { seed } => (1, seed),
        };
        w.write_all(&flag.to_le_bytes())?;
        w.write_all(&seed.to_le_bytes())?;
    }
    put_f32s(&mut w, model.embedding.data())?;
    for l in &model.layers {
        put_f32s(&mut w, &l.rms1)?;
        for m in [&l.wq, &l.wk, &l.wv, &l.wo] {
            put_f32s(&mut w, m.data())?;
        }
        put_f32s(&mut w, &l.rms2)?;
        for m in [&l.w_up, &l.w_gate, &l.w_down] {
            put_f32s(&mut w, m.data())?;
        }
    }
    put_f32s(&mut w, &model.final_norm)?;
    put_f32s(&mut w, model.unembedding.data())?;
    w.flush()?;
    Ok(())
}

/// An open KTWT file. Layers are read on demand by seeking, so callers can
/// keep a single layer resident.
pub struct WeightFile {
    reader: BufReader<File>,
    config: ModelConfig,
    online: OnlineRotations,
}

impl WeightFile {
    pub fn open(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        reader.read_exact(&mut magic)?;
        if &magic != KTWT_MAGIC {
            return Err(KurtailError::Format(format!("{} is not a KTWT file", path.display())));
        }
        let version = get_u32(&mut reader)?;
        if version != KTWT_VERSION {
            return Err(KurtailError::Format(format!("unsupported KTWT version {version}")));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = get_u32(&mut reader)? as usize;
        }
        let config = ModelConfig {
            d_model: dims[0],
            n_heads: dims[1],
            d_ff: dims[2],
            n_layers: dims[3],
            vocab_size: dims[4],
            rope_base: get_f64(&mut reader)?,
            rms_epsilon: get_f64(&mut reader)?,
        };
        config.validate()?;
        let mut modes = [OnlineMode::Off; 3];
        for m in &mut modes {
            let flag = get_u32(&mut reader)?;
            let seed = get_u64(&mut reader)?;
            *m = match flag {
                0 => OnlineMode::Off,
                1 => OnlineMode::Hadamard { seed },
                other => return Err(KurtailError::Format(format!("unknown online mode {other}"))),
            };
        }
        let file = Self {
            reader,
            config,
            online: OnlineRotations {
                r3: modes[0],
                r4: modes[1],
                r5: modes[2],
            },
        };
        let expected = file.head_offset() + 4 * (file.config.d_model * (1 + file.config.vocab_size)) as u64;
        let actual = file.reader.get_ref().metadata()?.len();
        if actual != expected {
            return Err(KurtailError::Format(format!(
                "KTWT file is {actual} bytes, header implies {expected}"
            )));
        }
        Ok(file)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn online(&self) -> OnlineRotations {
        self.online
    }

    fn layer_offset(&self, layer: usize) -> u64 {
        let c = &self.config;
        HEADER_LEN + 4 * (c.vocab_size * c.d_model) as u64 + layer as u64 * layer_len(c)
    }

    fn head_offset(&self) -> u64 {
        self.layer_offset(self.config.n_layers)
    }

    pub fn read_embedding(&mut self) -> Result<Matrix> {
        self.reader.seek(SeekFrom::Start(HEADER_LEN))?;
        get_matrix(&mut self.reader, self.config.vocab_size, self.config.d_model)
    }

    pub fn read_layer(&mut self, layer: usize) -> Result<LayerWeights> {
        let c = self.config.clone();
        if layer >= c.n_layers {
            return Err(KurtailError::InvalidArgument(format!(
                "layer {layer} out of range for {} layers",
                c.n_layers
            )));
        }
        let (d, f) = (c.d_model, c.d_ff);
        let off = self.layer_offset(layer);
        let r = &mut self.reader;
        r.seek(SeekFrom::Start(off))?;
        Ok(LayerWeights {
            rms1: get_f32s(r, d)?,
            wq: get_matrix(r, d, d)?,
            wk: get_matrix(r, d, d)?,
            wv: get_matrix(r, d, d)?,
            wo: get_matrix(r, d, d)?,
            rms2: get_f32s(r, d)?,
            w_up: get_matrix(r, d, f)?,
            w_gate: get_matrix(r, d, f)?,
            w_down: get_matrix(r, f, d)?,
        })
    }

    /// `(final_norm, unembedding)`.
    pub fn read_head(&mut self) -> Result<(Vec<f64>, Matrix)> {
        let off = self.head_offset();
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        self.reader.seek(SeekFrom::Start(off))?;
        let norm = get_f32s(&mut self.reader, d)?;
        Ok((norm, get_matrix(&mut self.reader, d, v)?))
    }

    pub fn read_all(&mut self) -> Result<DecoderModel> {
        let embedding = self.read_embedding()?;
        let layers = (0..self.config.n_layers)
            .map(|l| self.read_layer(l))
            .collect::<Result<Vec<_>>>()?;
        let (final_norm, unembedding) = self.read_head()?;
        Ok(DecoderModel {
            config: self.config.clone(),
            embedding,
            layers,
            final_norm,
            unembedding,
            online: self.online,
        })
    }
}

pub fn read_model(path: &Path) -> Result<DecoderModel> {
    WeightFile::open(path)?.read_all()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyformer::tests::tiny;
    use crate::toyformer::{fold_rmsnorm, fuse_rotations, RotationSet, SyntheticModel};

    fn model() -> DecoderModel {
        DecoderModel::synthetic(&SyntheticModel {
            config: tiny(),
            seed: 12,
            outliers: Some(Default::default()),
            random_norm_scales: true,
        })
        .unwrap()
    }

    #[test]
    fn synthetic_model_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ktwt");
        let m = model();
        write_model(&m, &p).unwrap();
        assert_eq!(read_model(&p).unwrap(), m);
        let p2 = dir.path().join("m2.ktwt");
        write_model(&read_model(&p).unwrap(), &p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn layers_load_independently() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ktwt");
        let m = model();
        write_model(&m, &p).unwrap();
        let mut f = WeightFile::open(&p).unwrap();
        assert_eq!(f.read_layer(1).unwrap(), m.layers[1]);
        assert_eq!(f.read_layer(0).unwrap(), m.layers[0]);
        assert!(f.read_layer(2).is_err());
        assert_eq!(f.read_head().unwrap().1, m.unembedding);
    }

    #[test]
    fn online_modes_survive() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ktwt");
        let folded = fold_rmsnorm(&model()).unwrap();
        let fused = fuse_rotations(&folded, &RotationSet::hadamard(&folded.config, 3).unwrap()).unwrap();
        write_model(&fused, &p).unwrap();
        let back = read_model(&p).unwrap();
        assert_eq!(back.online, fused.online);
        assert!(back.embedding.max_abs_diff(&fused.embedding) < 1e-5);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ktwt");
        write_model(&model(), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let truncated = dir.path().join("t.ktwt");
        std::fs::write(&truncated, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(WeightFile::open(&truncated), Err(KurtailError::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let badp = dir.path().join("b.ktwt");
        std::fs::write(&badp, &bad).unwrap();
        assert!(matches!(WeightFile::open(&badp), Err(KurtailError::Format(_))));
    }
}
