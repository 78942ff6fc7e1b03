//! Binary tensor bundles with a SHA-256 trailer.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, `u8` dtype tag,
//! `u32` header length, header `u64`s, `u32` tensor count, then per tensor
//! `u32` ndim, `u64` dims and raw element data. The final 32 bytes are the
//! SHA-256 of everything before them.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Model, ModelConfig, Params};
use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MODEL_MAGIC: [u8; 8] = *b"RGECKPT1";
const VERSION: u32 = 1;

/// Header words plus tensors, tagged with a magic string.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob<T> {
    pub magic: [u8; 8],
    pub header: Vec<u64>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Blob<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        for h in &self.header {
            out.extend_from_slice(&h.to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], magic: [u8; 8]) -> Result<Self> {
        if bytes.len() < 32 {
            return Err(Error::Format("file too short".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        let found: [u8; 8] = r.take(8)?.try_into().expect("8 bytes");
        if found != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&found),
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let tag = r.take(1)?[0];
        match DType::from_tag(tag) {
            Some(d) if d == T::DTYPE => {}
            Some(d) => {
                return Err(Error::Format(format!(
                    "stored precision {d:?} does not match requested {:?}",
                    T::DTYPE
                )))
            }
            None => return Err(Error::Format(format!("unknown dtype tag {tag}"))),
        }
        let n_header = r.u32()? as usize;
        let header = (0..n_header).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n_tensors = r.u32()? as usize;
        let width = tag as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * width)?;
            let data = raw.chunks_exact(width).map(T::read_le).collect();
            tensors.push(Tensor::new(shape, data)?);
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes before checksum".into()));
        }
        Ok(Self {
            magic,
            header,
            tensors,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn write_blob<T: Scalar>(path: &Path, blob: &Blob<T>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, blob.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_blob<T: Scalar>(path: &Path, magic: [u8; 8]) -> Result<Blob<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Blob::from_bytes(&bytes, magic).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn config_header(c: &ModelConfig) -> Vec<u64> {
    [
        c.vocab_size,
        c.d_model,
        c.n_layers,
        c.n_heads,
        c.d_ff,
        c.max_seq,
    ]
    .iter()
    .map(|&v| v as u64)
    .chain([c.seed])
    .collect()
}

fn config_from_header(h: &[u64]) -> Result<ModelConfig> {
    if h.len() != 7 {
        return Err(Error::Format(format!(
            "model header has {} words, expected 7",
            h.len()
        )));
    }
    let c = ModelConfig {
        vocab_size: h[0] as usize,
        d_model: h[1] as usize,
        n_layers: h[2] as usize,
        n_heads: h[3] as usize,
        d_ff: h[4] as usize,
        max_seq: h[5] as usize,
        seed: h[6],
    };
    c.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(c)
}

impl<T: Scalar> Model<T> {
    pub fn to_blob(&self) -> Blob<T> {
        Blob {
            magic: MODEL_MAGIC,
            header: config_header(&self.config),
            tensors: self.params.tensors().to_vec(),
        }
    }

    pub fn from_blob(blob: Blob<T>) -> Result<Self> {
        let config = config_from_header(&blob.header)?;
        let params = Params::from_tensors(&config, blob.tensors)?;
        Ok(Self { config, params })
    }
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    write_blob(path, &model.to_blob())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let blob = read_blob(path, MODEL_MAGIC)?;
    Model::from_blob(blob).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Storage precision of a checkpoint file, read from its header.
pub fn checkpoint_dtype(path: &Path) -> Result<DType> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 13 || bytes[..8] != MODEL_MAGIC {
        return Err(Error::Format(format!(
            "{}: not a model checkpoint",
            path.display()
        )));
    }
    DType::from_tag(bytes[12]).ok_or_else(|| {
        Error::Format(format!(
            "{}: unknown precision tag {}",
            path.display(),
            bytes[12]
        ))
    })
}
