//! KTAC activation files: one file per (layer, block) plus a JSON manifest.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "KTAC"
//! 4       4     version (u32, currently 1)
//! 8       4     dtype (u32, 0 = f32)
//! 12      4     layer (u32)
//! 16      4     block (u32: 0 = mhsa_input, 1 = ffn_input, 2 = value_output)
//! 20      8     rows (u64)
//! 28      8     cols (u64)
//! 36      ...   rows × cols little-endian f32, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{KurtailError, Result};
use crate::linalg::Matrix;
use crate::rotor::{ActivationRecord, ActivationSet, BlockKind, CaptureMeta};

pub const KTAC_MAGIC: &[u8; 4] = b"KTAC";
pub const KTAC_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;
pub const MANIFEST_NAME: &str = "manifest.json";

pub fn record_file_name(layer: usize, block: BlockKind) -> String {
    format!("layer{layer:03}_{}.ktac", block.as_str())
}

pub fn write_record(path: &Path, record: &ActivationRecord) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(KTAC_MAGIC)?;
    for v in [
        KTAC_VERSION,
        DTYPE_F32,
        record.layer as u32,
        record.block.code(),
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(record.tokens.rows() as u64).to_le_bytes())?;
    w.write_all(&(record.tokens.cols() as u64).to_le_bytes())?;
    for v in record.tokens.data() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_record(path: &Path) -> Result<ActivationRecord> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 36];
    r.read_exact(&mut head).map_err(|_| {
        KurtailError::Format(format!("{} is too short for a KTAC header", path.display()))
    })?;
    if &head[..4] != KTAC_MAGIC {
        return Err(KurtailError::Format(format!("{} is not a KTAC file", path.display())));
    }
    let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(head[o..o + 8].try_into().expect("8 bytes"));
    if u32_at(4) != KTAC_VERSION {
        return Err(KurtailError::Format(format!("unsupported KTAC version {}", u32_at(4))));
    }
    if u32_at(8) != DTYPE_F32 {
        return Err(KurtailError::Format(format!("unsupported KTAC dtype {}", u32_at(8))));
    }
    let layer = u32_at(12) as usize;
    let block = BlockKind::from_code(u32_at(16))?;
    let (rows, cols) = (u64_at(20) as usize, u64_at(28) as usize);
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| KurtailError::Format("KTAC shape overflows".into()))?;
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() != 4 * n {
        return Err(KurtailError::Format(format!(
            "{}: {} payload bytes for a {rows}x{cols} tensor",
            path.display(),
            buf.len()
        )));
    }
    let data = buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(ActivationRecord {
        layer,
        block,
        tokens: Matrix::new(rows, cols, data)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub layer: usize,
    pub block: BlockKind,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub meta: CaptureMeta,
    pub files: Vec<ManifestEntry>,
}

pub fn write_manifest(dir: &Path, meta: &CaptureMeta, records: &[ManifestEntry]) -> Result<()> {
    let manifest = Manifest {
        format: "KTAC".into(),
        version: KTAC_VERSION,
        meta: meta.clone(),
        files: records.to_vec(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(dir.join(MANIFEST_NAME), text)?;
    Ok(())
}

pub fn manifest_entry(record: &ActivationRecord) -> ManifestEntry {
    ManifestEntry {
        layer: record.layer,
        block: record.block,
        file: record_file_name(record.layer, record.block),
        rows: record.tokens.rows(),
        cols: record.tokens.cols(),
    }
}

/// Writes every record and the manifest into `dir` (created if missing).
pub fn write_activation_set(dir: &Path, set: &ActivationSet) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for rec in set.records() {
        let p = dir.join(record_file_name(rec.layer, rec.block));
        write_record(&p, rec)?;
        paths.push(p);
    }
    let entries: Vec<ManifestEntry> = set.records().iter().map(manifest_entry).collect();
    write_manifest(dir, set.meta(), &entries)?;
    Ok(paths)
}

pub fn read_activation_set(dir: &Path) -> Result<ActivationSet> {
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_NAME))?)?;
    if manifest.format != "KTAC" {
        return Err(KurtailError::Format(format!("manifest format {}", manifest.format)));
    }
    let records = manifest
        .files
        .iter()
        .map(|e| {
            let rec = read_record(&dir.join(&e.file))?;
            if rec.layer != e.layer || rec.block != e.block || rec.tokens.shape() != (e.rows, e.cols) {
                return Err(KurtailError::Format(format!("{} disagrees with the manifest", e.file)));
            }
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;
    ActivationSet::new(records, manifest.meta)
}
