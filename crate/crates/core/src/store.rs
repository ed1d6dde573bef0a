//! JSON manifest plus flat little-endian `f64` payload.
//!
//! `name.json` holds the metadata, the payload length and its SHA-256;
//! `name.bin` holds the raw values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest<M> {
    pub kind: String,
    pub meta: M,
    pub payload: String,
    pub len: usize,
    pub sha256: String,
}

fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn encode(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes both files and returns the payload digest.
pub fn write<M: Serialize>(manifest: &Path, kind: &str, meta: &M, payload: &[f64]) -> Result<String> {
    let bytes = encode(payload);
    let sha = digest(&bytes);
    let bin = payload_path(manifest);
    let header = Manifest {
        kind: kind.to_string(),
        meta,
        payload: bin.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        len: payload.len(),
        sha256: sha.clone(),
    };
    fs::write(&bin, &bytes).map_err(|e| Error::io(&bin, e))?;
    let text = serde_json::to_string_pretty(&header)?;
    fs::write(manifest, text).map_err(|e| Error::io(manifest, e))?;
    Ok(sha)
}

/// Reads and checks kind, length and digest.
pub fn read<M: DeserializeOwned>(manifest: &Path, kind: &str) -> Result<(M, Vec<f64>)> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let header: Manifest<M> = serde_json::from_str(&text)?;
    if header.kind != kind {
        return Err(Error::Invalid(format!("{} holds a {}, expected {kind}", manifest.display(), header.kind)));
    }
    let bin = manifest.with_file_name(&header.payload);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() != header.len * 8 {
        return Err(Error::Invalid(format!("{}: expected {} values, found {} bytes", bin.display(), header.len, bytes.len())));
    }
    if digest(&bytes) != header.sha256 {
        return Err(Error::Invalid(format!("{}: checksum mismatch", bin.display())));
    }
    let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((header.meta, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        let values = vec![1.5, -0.0, f64::MIN_POSITIVE, 3e300];
        write(&p, "thing", &vec![3usize, 4], &values).unwrap();
        let (meta, back): (Vec<usize>, Vec<f64>) = read(&p, "thing").unwrap();
        assert_eq!(meta, vec![3, 4]);
        assert_eq!(back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(read::<Vec<usize>>(&p, "other").is_err());

        let bin = p.with_extension("bin");
        let mut bytes = fs::read(&bin).unwrap();
        bytes[0] ^= 1;
        fs::write(&bin, bytes).unwrap();
        assert!(read::<Vec<usize>>(&p, "thing").is_err());
    }
}
