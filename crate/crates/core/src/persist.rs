//! File helpers shared by every artifact: atomic writes, JSON envelopes with a
//! format tag and version, and content hashing.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Write `bytes` to a sibling temp file, then rename over `path`, so readers
/// never observe a partially written artifact.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "artifact".into());
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path.as_ref(), e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Self-describing wrapper around a serialised artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub format: String,
    pub version: u32,
    pub payload: T,
}

impl<T> Envelope<T> {
    pub fn new(format: &str, payload: T) -> Self
    where
        T: Clone,
    {
        Self {
            format: format.to_string(),
            version: FORMAT_VERSION,
            payload,
        }
    }

    pub fn into_payload(self, format: &str, path: impl AsRef<Path>) -> Result<T> {
        if self.format != format {
            return Err(Error::format(
                path,
                format!("expected a `{format}` artifact, found `{}`", self.format),
            ));
        }
        if self.version != FORMAT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported format version {}", self.version),
            ));
        }
        Ok(self.payload)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/x.json");
        write_json(&p, &vec![1.5, 2.0]).unwrap();
        let back: Vec<f64> = read_json(&p).unwrap();
        assert_eq!(back, vec![1.5, 2.0]);
        let names: Vec<_> = fs::read_dir(p.parent().unwrap()).unwrap().collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn envelope_rejects_wrong_tag() {
        let e = Envelope::new("flow", 3u8);
        assert!(e.clone().into_payload("diffeo", "x").is_err());
        assert_eq!(e.into_payload("flow", "x").unwrap(), 3);
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn floats_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.json");
        let xs: Vec<f64> = vec![0.1 + 0.2, 1.0 / 3.0, 6.02e23, -1e-300];
        write_json(&p, &xs).unwrap();
        let back: Vec<f64> = read_json(&p).unwrap();
        for (a, b) in xs.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
