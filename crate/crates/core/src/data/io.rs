//! Native on-disk format: a raw little-endian payload (`.raw`) next to a
//! `key=value` text sidecar (`.meta`) carrying shape, spacing, dtype and task id.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::volume::{BinaryMask, Shape3, Spacing, Volume};
use crate::error::{Error, Result};

const VOLUME_DTYPE: &str = "f32le";
const MASK_DTYPE: &str = "u8";

/// Returns the sidecar path for a payload path (`x.raw` -> `x.meta`).
pub fn meta_path(raw: &Path) -> PathBuf {
    raw.with_extension("meta")
}

fn write_meta(
    raw: &Path,
    kind: &str,
    dtype: &str,
    shape: Shape3,
    spacing: Spacing,
    task: Option<usize>,
) -> Result<()> {
    let mut text = format!(
        "kind={kind}\ndtype={dtype}\nshape={},{},{}\nspacing={},{},{}\n",
        shape.d, shape.h, shape.w, spacing[0], spacing[1], spacing[2]
    );
    if let Some(t) = task {
        text.push_str(&format!("task={t}\n"));
    }
    let meta = meta_path(raw);
    fs::write(&meta, text).map_err(|e| Error::io(&meta, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

pub fn save_volume(path: &Path, volume: &Volume, task: Option<usize>) -> Result<()> {
    ensure_parent(path)?;
    let bytes: Vec<u8> = volume
        .voxels()
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    write_meta(path, "volume", VOLUME_DTYPE, volume.shape(), volume.spacing(), task)
}

pub fn save_mask(path: &Path, mask: &BinaryMask, spacing: Spacing, task: Option<usize>) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, mask.voxels()).map_err(|e| Error::io(path, e))?;
    write_meta(path, "mask", MASK_DTYPE, mask.shape(), spacing, task)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaHeader {
    pub kind: String,
    pub dtype: String,
    pub shape: Shape3,
    pub spacing: Spacing,
    pub task: Option<usize>,
}

pub fn read_meta(raw: &Path) -> Result<MetaHeader> {
    let path = meta_path(raw);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::header(&path, format!("line {} is not key=value", n + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let field = |k: &str| {
        map.get(k)
            .cloned()
            .ok_or_else(|| Error::header(&path, format!("missing key `{k}`")))
    };
    let shape: Vec<usize> = parse_list(&field("shape")?).map_err(|r| Error::header(&path, r))?;
    if shape.len() != 3 || shape.contains(&0) {
        return Err(Error::header(&path, format!("bad shape {shape:?}")));
    }
    let spacing: Vec<f64> = match map.get("spacing") {
        Some(s) => parse_list(s).map_err(|r| Error::header(&path, r))?,
        None => vec![1.0; 3],
    };
    if spacing.len() != 3 {
        return Err(Error::header(&path, format!("bad spacing {spacing:?}")));
    }
    let task = match map.get("task") {
        Some(t) => Some(
            t.parse()
                .map_err(|_| Error::header(&path, format!("bad task id `{t}`")))?,
        ),
        None => None,
    };
    Ok(MetaHeader {
        kind: field("kind")?,
        dtype: field("dtype")?,
        shape: Shape3::new(shape[0], shape[1], shape[2]),
        spacing: [spacing[0], spacing[1], spacing[2]],
        task,
    })
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| format!("cannot parse `{p}`")))
        .collect()
}

fn read_payload(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes)
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let meta = read_meta(path)?;
    if meta.kind != "volume" || meta.dtype != VOLUME_DTYPE {
        return Err(Error::header(
            path,
            format!("expected volume/{VOLUME_DTYPE}, found {}/{}", meta.kind, meta.dtype),
        ));
    }
    let bytes = read_payload(path, meta.shape.len() * 4)?;
    let voxels = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::with_spacing(meta.shape, meta.spacing, voxels)
        .map_err(|e| Error::header(path, e.to_string()))
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let meta = read_meta(path)?;
    if meta.kind != "mask" || meta.dtype != MASK_DTYPE {
        return Err(Error::header(
            path,
            format!("expected mask/{MASK_DTYPE}, found {}/{}", meta.kind, meta.dtype),
        ));
    }
    let bytes = read_payload(path, meta.shape.len())?;
    if let Some(index) = bytes.iter().position(|&v| v > 1) {
        return Err(Error::NonBinaryMask {
            path: path.to_path_buf(),
            value: bytes[index],
            index,
        });
    }
    BinaryMask::new(meta.shape, bytes)
}
