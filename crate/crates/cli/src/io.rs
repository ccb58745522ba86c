//! File formats: OGAF tensors, binary PPM images, CSV tables and JSON
//! sidecars, plus the output-directory lock.

use crate::error::{CliError, Result};
use oga_core::Tensor;
use serde::{Deserialize, Serialize};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

pub const OGAF_MAGIC: &[u8; 4] = b"OGAF";
pub const LOCK_FILE: &str = ".oga.lock";

/// Serializes a tensor as `OGAF`, u32 rank, u32 dims, then f32 values, all
/// little-endian and row-major.
pub fn encode_ogaf(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(OGAF_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_ogaf(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let word = |i: usize| -> std::result::Result<u32, String> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| "truncated header".to_string())
    };
    if bytes.get(..4) != Some(OGAF_MAGIC.as_slice()) {
        return Err("missing OGAF magic".into());
    }
    let rank = word(4)? as usize;
    let shape: Vec<usize> = (0..rank)
        .map(|k| word(8 + 4 * k).map(|d| d as usize))
        .collect::<std::result::Result<_, _>>()?;
    let start = 8 + 4 * rank;
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or("shape overflows")?;
    let payload = &bytes[start..];
    if payload.len() != 4 * n {
        return Err(format!(
            "shape {shape:?} needs {} payload bytes, found {}",
            4 * n,
            payload.len()
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write_ogaf(path: &Path, t: &Tensor) -> Result<()> {
    write_bytes(path, &encode_ogaf(t))
}

pub fn read_ogaf(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_ogaf(&bytes).map_err(|m| CliError::malformed(path, m))
}

/// Rounds every value to f32, which is what an OGAF round trip keeps.
pub fn to_f32_precision(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

/// Binary `P6` with 8-bit samples, `round(clamp(v, 0, 1) * 255)`.
pub fn encode_ppm(image: &Tensor) -> std::result::Result<Vec<u8>, String> {
    let &[h, w, 3] = image.shape() else {
        return Err(format!(
            "PPM needs an (H, W, 3) image, got {:?}",
            image.shape()
        ));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let bytes = encode_ppm(image).map_err(|m| CliError::malformed(path, m))?;
    write_bytes(path, &bytes)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::malformed(path, e.to_string()))
}

/// LF-terminated CSV writer.
pub fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(file)))
}

pub fn finish_csv(mut w: csv::Writer<BufWriter<File>>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| CliError::io(path, e))?;
    let inner = w
        .into_inner()
        .map_err(|e| CliError::io(path, e.into_error()))?;
    inner
        .into_inner()
        .map_err(|e| CliError::io(path, e.into_error()))?
        .sync_all()
        .map_err(|e| CliError::io(path, e))
}

/// Provenance written next to every artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub config_hash: String,
    pub seed: u64,
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
}

/// `<file>.meta.json` next to `path`.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

pub fn write_meta(path: &Path, meta: &Meta) -> Result<()> {
    write_json(&meta_path(path), meta)
}

pub fn read_meta(path: &Path) -> Result<Meta> {
    read_json(&meta_path(path))
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Locked(dir.to_path_buf()))
            }
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
