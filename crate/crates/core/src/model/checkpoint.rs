//! Binary checkpoint: magic, version, JSON header, then little-endian `f32`
//! parameters optionally followed by the two Adam moment vectors.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, AdamConfig, ModelConfig, ModelState, Network};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"VSMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub tasks: Vec<String>,
    pub step: u64,
    /// Hash of the experiment configuration that produced the weights.
    pub fingerprint: String,
    pub n_params: usize,
    pub best_dice: Option<f64>,
    pub best_step: Option<u64>,
    /// Validation Dice of the untrained model.
    #[serde(default)]
    pub initial_dice: Option<f64>,
    pub adam: AdamConfig,
    pub adam_t: u64,
    pub has_optimizer: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub state: ModelState,
}

fn put_f32s(buf: &mut Vec<u8>, xs: &[f32]) {
    buf.reserve(xs.len() * 4);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

/// Writes atomically through a sibling temp file.
pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, state: &ModelState, with_optimizer: bool) -> Result<()> {
    let mut meta = meta.clone();
    meta.n_params = state.n_params();
    meta.model = state.config().clone();
    meta.step = state.step;
    meta.adam = state.optimizer.config;
    meta.adam_t = state.optimizer.t;
    meta.has_optimizer = with_optimizer;
    let header = serde_json::to_vec(&meta).map_err(|e| Error::Serde(e.to_string()))?;

    let mut buf = Vec::with_capacity(32 + header.len() + state.n_params() * 12);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    put_f32s(&mut buf, state.network.params());
    if with_optimizer {
        put_f32s(&mut buf, &state.optimizer.m);
        put_f32s(&mut buf, &state.optimizer.v);
    }

    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::header(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::header(path, format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len());
    let Some(body) = body else {
        return Err(Error::Truncated {
            path: path.to_owned(),
            expected: 20 + hlen,
            found: bytes.len(),
        });
    };
    let meta: CheckpointMeta =
        serde_json::from_slice(&bytes[20..body]).map_err(|e| Error::header(path, e.to_string()))?;
    let n = meta.n_params;
    let vectors = if meta.has_optimizer { 3 } else { 1 };
    let expected = body + n * 4 * vectors;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.to_owned(),
            expected,
            found: bytes.len(),
        });
    }
    let read = |k: usize| -> Vec<f32> {
        let start = body + k * n * 4;
        bytes[start..start + n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect()
    };
    let network =
        Network::from_params(&meta.model, read(0)).map_err(|e| Error::header(path, e.to_string()))?;
    let mut optimizer = Adam::new(n, meta.adam);
    if meta.has_optimizer {
        optimizer.m = read(1);
        optimizer.v = read(2);
        optimizer.t = meta.adam_t;
    }
    let state = ModelState {
        network,
        optimizer,
        step: meta.step,
    };
    Ok(Checkpoint { meta, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            model: ModelConfig::default(),
            tasks: vec!["a".into(), "b".into()],
            step: 0,
            fingerprint: "abc".into(),
            n_params: 0,
            best_dice: Some(0.5),
            best_step: Some(3),
            initial_dice: None,
            adam: AdamConfig::default(),
            adam_t: 0,
            has_optimizer: false,
        }
    }

    fn state() -> ModelState {
        let mut s = init_model(&ModelConfig {
            base_width: 4,
            depth: 3,
            prompt_dim: 3,
            ..ModelConfig::default()
        })
        .unwrap();
        let g: Vec<f32> = (0..s.n_params()).map(|i| (i as f32).sin()).collect();
        s.optimizer.step(s.network.params_mut(), &g, 1e-3);
        s.step = 7;
        s
    }

    #[test]
    fn round_trip_with_and_without_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let s = state();
        let p = dir.path().join("full");
        save_checkpoint(&p, &meta(), &s, true).unwrap();
        let c = load_checkpoint(&p).unwrap();
        assert_eq!(c.state, s);
        assert_eq!(c.meta.step, 7);
        assert_eq!(c.meta.fingerprint, "abc");
        assert_eq!(c.state.checksum(), s.checksum());

        let p = dir.path().join("weights");
        save_checkpoint(&p, &meta(), &s, false).unwrap();
        let c = load_checkpoint(&p).unwrap();
        assert_eq!(c.state.network, s.network);
        assert!(!c.meta.has_optimizer);
    }

    #[test]
    fn corrupt_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c");
        save_checkpoint(&p, &meta(), &state(), true).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Truncated { .. })));
        fs::write(&p, b"garbage-garbage-garbage").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Header { .. })));
        assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
