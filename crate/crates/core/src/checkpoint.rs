//! Single-file checkpoints.
//!
//! ```text
//! eamat-checkpoint v1
//! config <byte count>
//! <RunConfig::to_text() output>
//! tensors <count>
//! <name> <rank> <extent>...      followed by numel × 8 bytes of little-endian f64
//! ...
//! ```

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const VERSION_TAG: &str = "eamat-checkpoint v1";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn into_model(self) -> Result<Model> {
        Model::from_parts(&self.config, &self.params)
    }
}

pub fn encode_checkpoint(config: &RunConfig, params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    let cfg = config.to_text();
    out.extend_from_slice(format!("{VERSION_TAG}\nconfig {}\n", cfg.len()).as_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(format!("tensors {}\n", params.len()).as_bytes());
    for p in params.iter() {
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        out.extend_from_slice(format!("{} {} {}\n", p.name, dims.len(), dims.join(" ")).as_bytes());
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    std::fs::write(path, encode_checkpoint(&model.config, &model.params)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> std::result::Result<&'a str, String> {
        let rest = &self.bytes[self.pos..];
        let n = rest.iter().position(|&b| b == b'\n').ok_or("unexpected end of file")?;
        self.pos += n + 1;
        std::str::from_utf8(&rest[..n]).map_err(|_| "header line is not utf-8".to_string())
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err(format!("truncated: wanted {n} bytes at offset {}", self.pos));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

fn count(line: &str, key: &str) -> std::result::Result<usize, String> {
    line.strip_prefix(key)
        .and_then(|r| r.trim().parse().ok())
        .ok_or_else(|| format!("expected `{key} <n>`, found `{line}`"))
}

pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
    let fail = |m: String| Error::parse(origin, m);
    let mut r = Reader { bytes, pos: 0 };
    let tag = r.line().map_err(fail)?;
    if tag != VERSION_TAG {
        return Err(fail(format!("unsupported version tag `{tag}`")));
    }
    let cfg_len = count(r.line().map_err(fail)?, "config ").map_err(fail)?;
    let cfg_text = std::str::from_utf8(r.take(cfg_len).map_err(fail)?).map_err(|_| fail("config is not utf-8".into()))?;
    let config = RunConfig::from_text(cfg_text, origin)?;
    let n = count(r.line().map_err(fail)?, "tensors ").map_err(fail)?;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let header = r.line().map_err(fail)?;
        let mut parts = header.split(' ');
        let name = parts.next().filter(|s| !s.is_empty()).ok_or_else(|| fail("empty tensor name".into()))?;
        let fields: Vec<usize> = parts
            .map(|p| p.parse().map_err(|_| fail(format!("bad tensor header `{header}`"))))
            .collect::<Result<_>>()?;
        let (rank, shape) = fields.split_first().ok_or_else(|| fail(format!("bad tensor header `{header}`")))?;
        if *rank != shape.len() {
            return Err(fail(format!("tensor `{name}`: rank {rank} but {} extents", shape.len())));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8).map_err(fail)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        params.add(name, Tensor::new(shape.to_vec(), data)?);
    }
    if r.pos != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { config, params })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.d = 12;
        cfg.d_word = 8;
        cfg.heads = 2;
        cfg.late_blocks = 1;
        cfg
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let model = Model::new(&small()).unwrap();
        let bytes = encode_checkpoint(&model.config, &model.params);
        let ck = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(ck.config, model.config);
        for (a, b) in ck.params.iter().zip(model.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        assert_eq!(encode_checkpoint(&ck.config, &ck.params), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let model = Model::new(&small()).unwrap();
        let bytes = encode_checkpoint(&model.config, &model.params);
        let p = Path::new("m.ckpt");
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3], p).is_err());
        assert!(decode_checkpoint(b"other v9\n", p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        let err = decode_checkpoint(&extra, p).unwrap_err().to_string();
        assert!(err.contains("m.ckpt"), "{err}");
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = load_checkpoint(Path::new("/nonexistent/x.ckpt")).unwrap_err().to_string();
        assert!(err.contains("/nonexistent/x.ckpt"), "{err}");
    }
}
