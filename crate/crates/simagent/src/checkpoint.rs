//! Model checkpoints: a little-endian binary of named f64 tensors plus a JSON
//! sidecar (`<file>.json`) with the model config and a SHA-256 of the binary.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use simagent_core::autodiff::{ParamStore, Tensor};
use simagent_core::model::{ModelConfig, PolicyModel};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SIMAGCK\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub stage: String,
    pub model: ModelConfig,
    pub num_params: usize,
    pub sha256: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols as u32).to_le_bytes());
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<ParamStore, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8) != Some(MAGIC.as_slice()) {
        return Err("not a checkpoint file".into());
    }
    let version = r.u32().ok_or("truncated header")?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let count = r.u32().ok_or("truncated header")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let n = r.u32().ok_or("truncated entry")? as usize;
        let name = std::str::from_utf8(r.take(n).ok_or("truncated name")?).map_err(|e| e.to_string())?.to_owned();
        let rows = r.u32().ok_or("truncated shape")? as usize;
        let cols = r.u32().ok_or("truncated shape")? as usize;
        let raw = r.take(rows * cols * 8).ok_or("truncated tensor")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::from_vec(rows, cols, data).map_err(|e| e.to_string())?;
        store.add(&name, t).map_err(|e| e.to_string())?;
    }
    if r.pos != bytes.len() {
        return Err("trailing bytes".into());
    }
    Ok(store)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save(path: &Path, model: &PolicyModel, stage: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = encode(&model.params);
    let side = Sidecar {
        format_version: VERSION,
        stage: stage.into(),
        model: model.config.clone(),
        num_params: model.num_params(),
        sha256: sha256_hex(&bytes),
    };
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let sp = sidecar_path(path);
    let mut text = serde_json::to_string_pretty(&side).expect("sidecar serializes");
    text.push('\n');
    fs::write(&sp, text).map_err(|e| Error::io(&sp, e))
}

pub fn load(path: &Path, hint: &'static str) -> Result<(PolicyModel, Sidecar)> {
    let sp = sidecar_path(path);
    if !path.exists() || !sp.exists() {
        return Err(Error::MissingArtifact { what: "checkpoint", path: path.to_path_buf(), hint });
    }
    let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let side: Sidecar = serde_json::from_str(&text).map_err(|e| Error::format(&sp, e))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if sha256_hex(&bytes) != side.sha256 {
        return Err(Error::format(path, "checksum does not match sidecar"));
    }
    let store = decode(&bytes).map_err(|m| Error::format(path, m))?;
    let model = PolicyModel::from_params(&side.model, &store)?;
    Ok((model, side))
}

#[cfg(test)]
mod tests {
    use super::*;
    use simagent_core::model::SizePreset;

    #[test]
    fn binary_round_trip_is_exact() {
        let m = PolicyModel::new(&ModelConfig { init_seed: 4, ..ModelConfig::preset(SizePreset::Mini) }).unwrap();
        let bytes = encode(&m.params);
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back), bytes);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode(b"garbage!").is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = PolicyModel::new(&ModelConfig::preset(SizePreset::Mini)).unwrap();
        save(&p, &m, "pretrain").unwrap();
        let (back, side) = load(&p, "simagent pretrain").unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(side.stage, "pretrain");
        let mut bytes = fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&p, bytes).unwrap();
        assert!(load(&p, "x").is_err());
        assert_eq!(load(&dir.path().join("none"), "x").unwrap_err().kind(), "missing-prerequisite");
    }
}
