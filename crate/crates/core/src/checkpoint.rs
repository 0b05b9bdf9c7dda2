//! Checkpoints as safetensors files with a JSON metadata blob, written atomically.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};

const META_KEY: &str = "__meta__";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert_all(&mut self, prefix: &str, entries: Vec<(String, Tensor)>) {
        for (k, t) in entries {
            self.tensors.insert(format!("{prefix}{k}"), t);
        }
    }

    /// Entries under `prefix`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    /// Writes to a sibling temp file and renames it over `path`, so an
    /// interrupted write never leaves a truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_vec(&self.meta)?;
        let n = meta.len();
        let mut map: HashMap<String, Tensor> = self.tensors.iter().map(|(k, t)| (k.clone(), t.clone())).collect();
        map.insert(META_KEY.into(), Tensor::from_vec(meta, n, &Device::Cpu)?);
        let tmp = temp_path(path);
        candle_core::safetensors::save(&map, &tmp).map_err(|e| Error::Checkpoint(format!("{}: {e}", tmp.display())))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
            ));
        }
        let mut map = candle_core::safetensors::load(path, &Device::Cpu)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let meta = map
            .remove(META_KEY)
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing metadata", path.display())))?;
        let meta = serde_json::from_slice(&meta.to_vec1::<u8>()?)?;
        Ok(Self {
            meta,
            tensors: map.into_iter().collect(),
        })
    }
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:08}.ckpt")
}

/// Highest-step checkpoint in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut best: Option<(u64, PathBuf)> = None;
    for e in std::fs::read_dir(dir).ok()?.flatten() {
        let name = e.file_name().into_string().ok()?;
        let step = name
            .strip_prefix("step_")
            .and_then(|s| s.strip_suffix(".ckpt"))
            .and_then(|s| s.parse::<u64>().ok());
        if let Some(step) = step {
            if best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, e.path()));
            }
        }
    }
    best.map(|(_, p)| p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(checkpoint_name(7));
        let mut c = Checkpoint::new(serde_json::json!({"step": 7}));
        let t = Tensor::new(&[[0.1f32, -3.5], [1e-30, 2.0]], &Device::Cpu).unwrap();
        c.insert_all("net/", vec![("w".into(), t.clone())]);
        c.save(&p).unwrap();
        assert!(!dir.path().join("step_00000007.ckpt.tmp").exists());
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.meta["step"], 7);
        let got = back.section("net/")["w"].to_vec2::<f32>().unwrap();
        assert_eq!(got, t.to_vec2::<f32>().unwrap());
        assert_eq!(latest_checkpoint(dir.path()), Some(p));
    }

    #[test]
    fn garbage_is_a_checkpoint_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, b"not a checkpoint").unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::load(&dir.path().join("none")), Err(Error::Io { .. })));
    }
}
