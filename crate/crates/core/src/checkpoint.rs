//! Binary checkpoint files.
//!
//! Layout (little endian): magic `LTCK`, `u32` version, `u32` length of the
//! model configuration as `key = value` text, the text, `u32` tensor count,
//! then per tensor `u32` name length, name, `u32` rows, `u32` cols and the
//! `f32` values row-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Mat;

const MAGIC: &[u8; 4] = b"LTCK";
const VERSION: u32 = 1;

pub fn encode(params: &ModelParams<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config: String =
        params.config.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    put_bytes(&mut out, config.as_bytes());
    let tensors = params.named_tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in tensors {
        put_bytes(&mut out, name.as_bytes());
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    path: &'a str,
    data: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format { path: self.path.into(), offset: self.pos as u64, reason: reason.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.data.len() - self.pos < n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let start = self.pos;
        let b = self.take(n, what)?.to_vec();
        String::from_utf8(b).map_err(|_| Error::Format {
            path: self.path.into(),
            offset: start as u64,
            reason: format!("{what} is not UTF-8"),
        })
    }
}

pub fn decode(data: &[u8], path: &str) -> Result<ModelParams<f32>> {
    let mut r = Reader { path, data, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.fail("not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let config_text = r.string("configuration")?;
    let mut config = ModelConfig::new(1, 1);
    for line in config_text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| r.fail(format!("bad config line {line:?}")))?;
        if !config.set(k.trim(), v.trim())? {
            return Err(r.fail(format!("unknown config key {:?}", k.trim())));
        }
    }
    let mut params = ModelParams::<f32>::init(&config, 0)?;
    let expected: Vec<(String, (usize, usize))> =
        params.named_tensors().into_iter().map(|(n, m)| (n, m.shape())).collect();
    let count = r.u32("tensor count")? as usize;
    if count != expected.len() {
        return Err(r.fail(format!("expected {} tensors, found {count}", expected.len())));
    }
    let mut loaded = Vec::with_capacity(count);
    for (name, shape) in &expected {
        let got = r.string("tensor name")?;
        if &got != name {
            return Err(r.fail(format!("expected tensor {name}, found {got}")));
        }
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        if (rows, cols) != *shape {
            return Err(r.fail(format!("{name} has shape {rows}x{cols}, expected {}x{}", shape.0, shape.1)));
        }
        let bytes = r.take(rows * cols * 4, name)?;
        let values: Vec<f32> =
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(r.fail(format!("{name} holds non-finite values")));
        }
        loaded.push(Mat::from_vec(rows, cols, values));
    }
    if r.pos != data.len() {
        return Err(r.fail("trailing bytes after last tensor"));
    }
    loaded.reverse();
    params.for_each_mut(|_, m| *m = loaded.pop().expect("counted"));
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams<f32>) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&data, &path.display().to_string())
}
