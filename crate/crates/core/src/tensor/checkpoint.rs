//! Checkpoint layout: a text manifest naming each tensor with its shape and
//! byte offset, next to a flat little-endian `f32` blob.
//!
//! ```text
//! cram-checkpoint 1
//! config model.hidden_dim = 128
//! tensor embedding.token 4096x128 0
//! tensor layer0.attn.wq 128x128 2097152
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const HEADER: &str = "cram-checkpoint 1";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `key = value` lines describing the model that owns the tensors.
    pub config: Vec<String>,
    pub params: ParamStore<f32>,
}

pub fn write_checkpoint<M: Write, B: Write>(
    manifest: &mut M,
    blob: &mut B,
    params: &ParamStore<f32>,
    config: &[String],
) -> std::io::Result<()> {
    writeln!(manifest, "{HEADER}")?;
    for line in config {
        writeln!(manifest, "config {line}")?;
    }
    let mut offset = 0usize;
    for (_, name, t) in params.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        writeln!(manifest, "tensor {name} {} {offset}", dims.join("x"))?;
        let mut bytes = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        blob.write_all(&bytes)?;
        offset += bytes.len();
    }
    Ok(())
}

pub fn read_checkpoint<M: BufRead, B: Read>(manifest: M, mut blob: B) -> Result<Checkpoint> {
    let bad = |d: String| Error::format("checkpoint manifest", d);
    let mut lines = manifest.lines();
    let first = lines.next().transpose().map_err(|e| bad(e.to_string()))?;
    if first.as_deref() != Some(HEADER) {
        return Err(bad(format!("expected header {HEADER:?}, got {first:?}")));
    }
    let mut bytes = Vec::new();
    blob.read_to_end(&mut bytes).map_err(|e| Error::format("checkpoint blob", e.to_string()))?;

    let mut config = Vec::new();
    let mut params = ParamStore::new();
    let mut expected_offset = 0usize;
    for line in lines {
        let line = line.map_err(|e| bad(e.to_string()))?;
        if let Some(rest) = line.strip_prefix("config ") {
            config.push(rest.to_string());
            continue;
        }
        let Some(rest) = line.strip_prefix("tensor ") else {
            if line.trim().is_empty() {
                continue;
            }
            return Err(bad(format!("unrecognized line {line:?}")));
        };
        let fields: Vec<&str> = rest.split_whitespace().collect();
        let [name, dims, offset] = fields[..] else {
            return Err(bad(format!("tensor line needs name, shape and offset: {line:?}")));
        };
        let shape: Vec<usize> =
            dims.split('x').map(str::parse).collect::<Result<_, _>>().map_err(|_| bad(format!("bad shape {dims}")))?;
        let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset {offset}")))?;
        if offset != expected_offset {
            return Err(bad(format!("tensor {name} at offset {offset}, expected {expected_offset}")));
        }
        let numel: usize = shape.iter().product();
        let end = offset + numel * 4;
        if end > bytes.len() {
            return Err(Error::format("checkpoint blob", format!("truncated at tensor {name}")));
        }
        let data = bytes[offset..end].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        params.insert(name, Tensor::new(shape, data)?)?;
        expected_offset = end;
    }
    if expected_offset != bytes.len() {
        return Err(Error::format("checkpoint blob", format!("{} trailing bytes", bytes.len() - expected_offset)));
    }
    Ok(Checkpoint { config, params })
}

/// Writes `dir/manifest.txt` and `dir/params.bin`.
pub fn save_checkpoint(dir: &Path, params: &ParamStore<f32>, config: &[String]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Vec::new();
    let mut blob = Vec::new();
    write_checkpoint(&mut manifest, &mut blob, params, config).expect("writing to memory");
    let mpath = dir.join(MANIFEST_FILE);
    let bpath = dir.join(BLOB_FILE);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST_FILE);
    let bpath = dir.join(BLOB_FILE);
    let manifest = fs::File::open(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let blob = fs::File::open(&bpath).map_err(|e| Error::io(&bpath, e))?;
    read_checkpoint(BufReader::new(manifest), BufReader::new(blob))
}
