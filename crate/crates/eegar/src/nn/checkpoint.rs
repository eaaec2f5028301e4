//! Named-tensor checkpoint archive with content hashing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::param::ParamVisitor;

const MAGIC: &[u8; 4] = b"EGCK";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint content hash mismatch (file corrupted)")]
    HashMismatch,
    #[error("tensor {name}: shape mismatch, checkpoint has {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("tensor {0} missing from checkpoint")]
    MissingTensor(String),
    #[error("checkpoint holds {found} tensors, model expects {expected}")]
    TensorCount { found: usize, expected: usize },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Ordered collection of named f64 tensors.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    entries: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push((name.to_string(), shape, data));
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Snapshot every parameter of `model` (flat shapes).
    pub fn from_model(model: &mut dyn ParamVisitor) -> Self {
        let mut ck = Checkpoint::new();
        model.visit_params(&mut |name, p| {
            ck.insert(name, vec![p.data.len()], p.data.clone());
        });
        ck
    }

    /// Copies tensors back into `model`, insisting on the exact same names,
    /// order, and sizes.
    pub fn load_into(&self, model: &mut dyn ParamVisitor) -> Result<(), CheckpointError> {
        let mut expected = 0usize;
        model.visit_params(&mut |_, _| expected += 1);
        if self.entries.len() != expected {
            return Err(CheckpointError::TensorCount {
                found: self.entries.len(),
                expected,
            });
        }
        let mut err: Option<CheckpointError> = None;
        let mut idx = 0usize;
        model.visit_params(&mut |name, p| {
            if err.is_some() {
                return;
            }
            let (ck_name, shape, data) = &self.entries[idx];
            idx += 1;
            if ck_name != name {
                err = Some(CheckpointError::MissingTensor(name.to_string()));
                return;
            }
            if data.len() != p.data.len() {
                err = Some(CheckpointError::ShapeMismatch {
                    name: name.to_string(),
                    found: shape.clone(),
                    expected: vec![p.data.len()],
                });
                return;
            }
            p.data.copy_from_slice(data);
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.entries {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.push(shape.len() as u8);
            for &d in shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let body = ck.encode();
    let digest = Sha256::digest(&body);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&body)?;
    w.write_all(&digest)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() < 32 + 12 {
        return Err(CheckpointError::Malformed("file too short".into()));
    }
    let (body, tail) = raw.split_at(raw.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != tail {
        return Err(CheckpointError::HashMismatch);
    }
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *pos + n > body.len() {
            return Err(CheckpointError::Malformed("truncated body".into()));
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut ck = Checkpoint::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("tensor name not utf-8".into()))?;
        let ndim = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = take(&mut pos, n * 8)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ck.insert(&name, shape, data);
    }
    if pos != body.len() {
        return Err(CheckpointError::Malformed("trailing bytes in body".into()));
    }
    Ok(ck)
}
