//! Flat tensor dumps: `<stem>.bin` holds little-endian `f64`s back to back,
//! `<stem>.json` lists each tensor's name, shape and offset plus a SHA-256
//! of the binary payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Parameters;

pub const FORMAT: &str = "read-lab-tensors";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorManifest {
    pub format: String,
    pub version: u32,
    pub checksum_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_tensors(dir: &Path, stem: &str, tensors: &[NamedTensor]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for t in tensors {
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset: bytes.len() / 8,
            len: t.data.len(),
        });
        for x in &t.data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = TensorManifest {
        format: FORMAT.into(),
        version: VERSION,
        checksum_sha256: sha256_hex(&bytes),
        tensors: entries,
    };
    write_atomic(&dir.join(format!("{stem}.bin")), &bytes)?;
    write_atomic(
        &dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )
}

pub fn load_tensors(dir: &Path, stem: &str) -> Result<Vec<NamedTensor>> {
    let mpath = dir.join(format!("{stem}.json"));
    let bpath = dir.join(format!("{stem}.bin"));
    let manifest: TensorManifest =
        serde_json::from_slice(&fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format {} v{}",
            mpath.display(),
            manifest.format,
            manifest.version
        )));
    }
    let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    if sha256_hex(&bytes) != manifest.checksum_sha256 {
        return Err(Error::Checkpoint(format!("{}: checksum mismatch", bpath.display())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    manifest
        .tensors
        .into_iter()
        .map(|e| {
            let expected: usize = e.shape.iter().product();
            if expected != e.len || e.offset + e.len > values.len() {
                return Err(Error::Checkpoint(format!("tensor {} has inconsistent extent", e.name)));
            }
            Ok(NamedTensor {
                data: values[e.offset..e.offset + e.len].to_vec(),
                name: e.name,
                shape: e.shape,
            })
        })
        .collect()
}

pub fn param_tensors<P: Parameters>(prefix: &str, params: &P) -> Vec<NamedTensor> {
    params
        .tensors()
        .into_iter()
        .map(|t| NamedTensor {
            name: format!("{prefix}{}", t.name),
            shape: t.shape,
            data: t.data.to_vec(),
        })
        .collect()
}

/// Copies tensors named `<prefix><tensor name>` into `params`, checking
/// that every tensor is present with the expected shape.
pub fn assign_params<P: Parameters>(prefix: &str, params: &mut P, stored: &[NamedTensor]) -> Result<()> {
    let expected: Vec<(String, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|t| (format!("{prefix}{}", t.name), t.shape))
        .collect();
    for ((name, shape), dst) in expected.into_iter().zip(params.tensors_mut()) {
        let src = stored
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if src.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: shape {:?} != expected {:?}",
                src.shape, shape
            )));
        }
        dst.copy_from_slice(&src.data);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use crate::rng::from_seed;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let lin = Linear::uniform(3, 2, 0.5, &mut from_seed(1));
        save_tensors(dir.path(), "lin", &param_tensors("lin.", &lin)).unwrap();
        let stored = load_tensors(dir.path(), "lin").unwrap();
        let mut back = Linear::zeros(3, 2);
        assign_params("lin.", &mut back, &stored).unwrap();
        assert_eq!(back, lin);
    }

    #[test]
    fn corrupted_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let lin = Linear::uniform(2, 2, 0.5, &mut from_seed(2));
        save_tensors(dir.path(), "lin", &param_tensors("", &lin)).unwrap();
        let path = dir.path().join("lin.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_tensors(dir.path(), "lin"), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let lin = Linear::uniform(2, 2, 0.5, &mut from_seed(2));
        save_tensors(dir.path(), "lin", &param_tensors("", &lin)).unwrap();
        let stored = load_tensors(dir.path(), "lin").unwrap();
        let mut other = Linear::zeros(3, 2);
        assert!(assign_params("", &mut other, &stored).is_err());
    }
}
