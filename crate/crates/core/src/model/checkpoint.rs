//! Checkpoint format: an 8-byte magic, a little-endian u64 header length,
//! a JSON header (format version, config, prompt salt, ordered parameter
//! table with byte offsets), then the raw little-endian f32 blob.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::arraymath::{DenseArray, ParamStore};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PFCKPT1\n";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    prompt_salt: u64,
    config: ModelConfig,
    params: Vec<HeaderEntry>,
}

/// Bit-exact save: values are written in lexicographic name order.
pub fn save_checkpoint(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(params.store.len());
    let mut blob: Vec<u8> = Vec::new();
    for (name, e) in params.store.iter() {
        entries.push(HeaderEntry {
            name: name.clone(),
            shape: e.value.shape().to_vec(),
            offset: blob.len(),
            frozen: e.frozen,
        });
        for &v in e.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        prompt_salt: params.prompt_salt,
        config: params.config.clone(),
        params: entries,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header_json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&blob);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Loads and validates a checkpoint; shape table, blob length, and format
/// version are all checked before any parameter is accepted.
pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let parse = |offset: usize, msg: String| Error::Parse {
        file: path.to_path_buf(),
        offset,
        msg,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(parse(0, "not a checkpoint (bad magic)".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(parse(
            16,
            format!(
                "header promises {header_len} bytes, file holds {}",
                bytes.len() - 16
            ),
        ));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])?;
    if header.format_version != FORMAT_VERSION {
        return Err(parse(
            16,
            format!(
                "format version {} unsupported (expected {FORMAT_VERSION})",
                header.format_version
            ),
        ));
    }
    header.config.validate()?;
    let blob = &bytes[16 + header_len..];
    let total_values: usize = header
        .params
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    if blob.len() != total_values * 4 {
        return Err(parse(
            16 + header_len,
            format!(
                "blob holds {} bytes, header promises {}",
                blob.len(),
                total_values * 4
            ),
        ));
    }
    let mut store = ParamStore::<f32>::new();
    for e in &header.params {
        let n: usize = e.shape.iter().product();
        let start = e.offset;
        let end = start + 4 * n;
        if end > blob.len() {
            return Err(parse(
                16 + header_len + start,
                format!("entry {} overruns the blob", e.name),
            ));
        }
        let mut data = Vec::with_capacity(n);
        for chunk in blob[start..end].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        let arr = DenseArray::new(e.shape.clone(), data).map_err(|err| {
            parse(16 + header_len + start, format!("entry {}: {err}", e.name))
        })?;
        if e.frozen {
            store.insert_frozen(&e.name, arr)?;
        } else {
            store.insert(&e.name, arr)?;
        }
    }
    Ok(ModelParams {
        config: header.config,
        prompt_salt: header.prompt_salt,
        store,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_save_is_byte_identical() {
        let cfg = ModelConfig::tiny();
        let params = ModelParams::<f32>::init(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.pfck");
        let p2 = dir.path().join("b.pfck");
        save_checkpoint(&params, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        // config echo
        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.prompt_salt, params.prompt_salt);
        assert!(loaded.store.get("anchor").unwrap().frozen);
    }

    #[test]
    fn truncated_blob_names_byte_counts() {
        let cfg = ModelConfig::tiny();
        let params = ModelParams::<f32>::init(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pfck");
        save_checkpoint(&params, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        let err = load_checkpoint(&p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("blob holds"), "{msg}");
        assert!(msg.contains("header promises"), "{msg}");
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pfck");
        fs::write(&p, b"NOTACKPT").unwrap();
        assert!(load_checkpoint(&p).is_err());
    }
}
