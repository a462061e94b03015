//! Named-array container: safetensors payload plus a string metadata map.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::safetensors::Load;
use candle_core::{Device, Tensor};

use crate::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct NamedArrays {
    pub arrays: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl NamedArrays {
    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        self.arrays
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))
    }

    /// Removes and returns every array under `prefix.`, with the prefix stripped.
    pub fn take_prefixed(&mut self, prefix: &str) -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}.");
        let keys: Vec<String> = self
            .arrays
            .keys()
            .filter(|k| k.starts_with(&p))
            .cloned()
            .collect();
        keys.into_iter()
            .map(|k| {
                let t = self.arrays.remove(&k).expect("key listed above");
                (k[p.len()..].to_string(), t)
            })
            .collect()
    }
}

pub fn save(path: &Path, data: &NamedArrays) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let meta: HashMap<String, String> = data
        .metadata
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let tensors: Vec<(String, Tensor)> = data
        .arrays
        .iter()
        .map(|(k, t)| Ok((k.clone(), t.contiguous()?)))
        .collect::<Result<_>>()?;
    let bytes = safetensors::serialize(tensors, Some(meta))
        .map_err(|e| Error::Checkpoint(format!("serialize {}: {e}", path.display())))?;
    let bytes = canonical_header(bytes)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Rewrites the JSON header with sorted keys. The metadata map is hashed, so
/// without this two saves of the same state could differ byte-wise.
fn canonical_header(bytes: Vec<u8>) -> Result<Vec<u8>> {
    let bad = || Error::Checkpoint("malformed serialized header".into());
    let len = u64::from_le_bytes(bytes.get(..8).ok_or_else(bad)?.try_into().map_err(|_| bad())?) as usize;
    let header = bytes.get(8..8 + len).ok_or_else(bad)?;
    let value: serde_json::Value = serde_json::from_slice(header).map_err(|_| bad())?;
    let mut text = serde_json::to_vec(&value).map_err(|_| bad())?;
    // keep the tensor data 8-byte aligned, as the writer does
    while text.len() % 8 != 0 {
        text.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + text.len() + bytes.len() - 8 - len);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&bytes[8 + len..]);
    Ok(out)
}

pub fn load(path: &Path) -> Result<NamedArrays> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = safetensors::SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let metadata = header
        .metadata()
        .clone()
        .unwrap_or_default()
        .into_iter()
        .collect();
    let mut arrays = BTreeMap::new();
    for (name, view) in st.tensors() {
        arrays.insert(name, view.load(&Device::Cpu)?);
    }
    Ok(NamedArrays { arrays, metadata })
}

pub fn check_version(data: &NamedArrays, kind: &str, version: &str) -> Result<()> {
    let found_kind = data.meta("kind")?;
    if found_kind != kind {
        return Err(Error::Checkpoint(format!(
            "expected a `{kind}` file, found `{found_kind}`"
        )));
    }
    let found = data.meta("format_version")?;
    if found != version {
        return Err(Error::Checkpoint(format!(
            "format version mismatch: file has {found}, expected {version}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn repeated_saves_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = NamedArrays::default();
        data.arrays.insert("w".into(), crate::tensor::from_f64(vec![1.0, 2.0], &[2], DType::F32).unwrap());
        for i in 0..16 {
            data.metadata.insert(format!("key_{i}"), format!("value {i}"));
        }
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        save(&a, &data).unwrap();
        save(&b, &data).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(load(&a).unwrap().metadata, data.metadata);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.safetensors");
        let mut rng = crate::rng::stream(2, "t", 0);
        let mut data = NamedArrays::default();
        data.arrays.insert(
            "a.w".into(),
            crate::tensor::randn(&mut rng, &[3, 4], DType::F64).unwrap(),
        );
        data.arrays.insert(
            "b".into(),
            crate::tensor::randn(&mut rng, &[5], DType::F32).unwrap(),
        );
        data.metadata.insert("kind".into(), "test".into());
        save(&path, &data).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.metadata, data.metadata);
        for (k, t) in &data.arrays {
            let u = &back.arrays[k];
            assert_eq!(t.dtype(), u.dtype());
            assert_eq!(
                crate::tensor::to_f64_vec(t).unwrap(),
                crate::tensor::to_f64_vec(u).unwrap()
            );
        }
    }

    #[test]
    fn truncated_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.safetensors");
        let mut data = NamedArrays::default();
        data.arrays
            .insert("a".into(), Tensor::ones(64, DType::F32, &Device::Cpu).unwrap());
        save(&path, &data).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load(&path).is_err());
    }
}
