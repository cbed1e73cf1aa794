//! Binary checkpoint format. Every integer and float is little-endian.
//!
//! ```text
//! magic        8 bytes  "TIGMTCK\0"
//! version      u32      1
//! config       u32 x 7  layers heads d_model d_ff src_vocab tgt_vocab max_position
//!              f64 x 2  dropout label_smoothing
//! step         u64      optimizer step counter
//! vocabularies 2 x { u32 count, count x (u32 byte length, UTF-8 bytes) }  source, then target
//! tensors      u32 count, then per tensor:
//!              u32 name length, name, u8 dtype (0 = f32), u32 ndim, ndim x u32 dims,
//!              row-major f32 values
//! ```
//!
//! Model parameters come first, in model order. Adam moments follow as
//! `adam.m/<name>` and `adam.v/<name>` when the optimizer has taken a step.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use super::{Model, ModelConfig, ModelError};
use crate::subword::Vocab;

pub const MAGIC: &[u8; 8] = b"TIGMTCK\0";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

/// Adam moments and the global step counter. Empty moments mean a fresh optimizer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn fresh(model: &Model<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = model.params().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn is_fresh(&self) -> bool {
        self.m.is_empty()
    }
}

/// Trained weights with their vocabularies and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    /// Freshly initialized model sized to the vocabularies.
    pub fn init(mut config: ModelConfig, src_vocab: Vocab, tgt_vocab: Vocab, seed: u64) -> Result<Self, ModelError> {
        config.src_vocab = src_vocab.len();
        config.tgt_vocab = tgt_vocab.len();
        let model = Model::init(config, seed)?;
        Ok(Self {
            model,
            src_vocab,
            tgt_vocab,
            optimizer: OptimizerState::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let c = self.model.config();
        if c.src_vocab != self.src_vocab.len() || c.tgt_vocab != self.tgt_vocab.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "vocabularies have {}/{} symbols but the config expects {}/{}",
                self.src_vocab.len(),
                self.tgt_vocab.len(),
                c.src_vocab,
                c.tgt_vocab
            )));
        }
        let o = &self.optimizer;
        if !o.is_fresh() {
            let n = self.model.params().len();
            let sizes_ok = o.m.len() == n
                && o.v.len() == n
                && self
                    .model
                    .params()
                    .iter()
                    .zip(o.m.iter().zip(&o.v))
                    .all(|(p, (m, v))| m.len() == p.len() && v.len() == p.len());
            if !sizes_ok {
                return Err(ModelError::ShapeMismatch("optimizer moments do not match the parameters".into()));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), ModelError> {
        self.validate()?;
        let c = self.model.config();
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for v in [c.layers, c.heads, c.d_model, c.d_ff, c.src_vocab, c.tgt_vocab, c.max_position] {
            write_u32(w, v)?;
        }
        w.write_all(&c.dropout.to_le_bytes())?;
        w.write_all(&c.label_smoothing.to_le_bytes())?;
        w.write_all(&self.optimizer.step.to_le_bytes())?;
        for vocab in [&self.src_vocab, &self.tgt_vocab] {
            write_u32(w, vocab.len())?;
            for s in vocab.symbols() {
                write_str(w, s)?;
            }
        }

        let names = self.model.names();
        let params = self.model.params();
        let with_moments = !self.optimizer.is_fresh();
        let count = if with_moments { 3 * names.len() } else { names.len() };
        write_u32(w, count)?;
        for (name, t) in names.iter().zip(params) {
            write_tensor(w, name, &t.shape, &t.data)?;
        }
        if with_moments {
            for (prefix, moments) in [(M_PREFIX, &self.optimizer.m), (V_PREFIX, &self.optimizer.v)] {
                for ((name, t), data) in names.iter().zip(params).zip(moments) {
                    write_tensor(w, &format!("{prefix}{name}"), &t.shape, data)?;
                }
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = bytes;
        let ck = Self::read_from(&mut r)?;
        if !r.is_empty() {
            return Err(ModelError::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(ck)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, ModelError> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(ModelError::Format("bad magic bytes".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(ModelError::Format(format!("unsupported version {version}")));
        }
        let mut sizes = [0usize; 7];
        for s in &mut sizes {
            *s = read_u32(r)? as usize;
        }
        let config = ModelConfig {
            layers: sizes[0],
            heads: sizes[1],
            d_model: sizes[2],
            d_ff: sizes[3],
            src_vocab: sizes[4],
            tgt_vocab: sizes[5],
            max_position: sizes[6],
            dropout: read_f64(r)?,
            label_smoothing: read_f64(r)?,
        };
        config.validate()?;
        let step = read_u64(r)?;
        let src_vocab = read_vocab(r)?;
        let tgt_vocab = read_vocab(r)?;

        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            tensors.push(read_tensor(r)?);
        }
        let split = tensors.iter().position(|(n, _)| n.starts_with(M_PREFIX)).unwrap_or(tensors.len());
        let moments = tensors.split_off(split);
        let model = Model::from_named(config, tensors)?;

        let mut optimizer = OptimizerState {
            step,
            ..Default::default()
        };
        if !moments.is_empty() {
            let n = model.names().len();
            if moments.len() != 2 * n {
                return Err(ModelError::Format(format!("expected {} moment tensors, found {}", 2 * n, moments.len())));
            }
            for (i, (name, t)) in moments.into_iter().enumerate() {
                let (prefix, target) = if i < n { (M_PREFIX, &mut optimizer.m) } else { (V_PREFIX, &mut optimizer.v) };
                let param = &model.names()[i % n];
                if name.strip_prefix(prefix) != Some(param.as_str()) || t.shape != model.params()[i % n].shape {
                    return Err(ModelError::Format(format!("unexpected moment tensor `{name}`")));
                }
                target.push(t.data);
            }
        }
        let ck = Self {
            model,
            src_vocab,
            tgt_vocab,
            optimizer,
        };
        ck.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// 16 hex digits identifying the serialized checkpoint.
    pub fn model_id(&self) -> String {
        model_id_of(&self.to_bytes())
    }
}

/// FNV-1a (64-bit) over checkpoint bytes, as hex.
pub fn model_id_of(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<(), ModelError> {
    let v = u32::try_from(v).map_err(|_| ModelError::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<(), ModelError> {
    write_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_tensor(w: &mut impl Write, name: &str, shape: &[usize], data: &[f32]) -> Result<(), ModelError> {
    write_str(w, name)?;
    w.write_all(&[DTYPE_F32])?;
    write_u32(w, shape.len())?;
    for &d in shape {
        write_u32(w, d)?;
    }
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), ModelError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => ModelError::Format("unexpected end of file".into()),
        _ => ModelError::Io(e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, ModelError> {
    Ok(f64::from_bits(read_u64(r)?))
}

fn read_string(r: &mut impl Read) -> Result<String, ModelError> {
    let len = read_u32(r)? as usize;
    let mut buf = Vec::new();
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(ModelError::Format("unexpected end of file".into()));
    }
    String::from_utf8(buf).map_err(|_| ModelError::Format("string is not UTF-8".into()))
}

fn read_vocab(r: &mut impl Read) -> Result<Vocab, ModelError> {
    let n = read_u32(r)? as usize;
    let mut symbols = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        symbols.push(read_string(r)?);
    }
    Ok(Vocab::new(symbols))
}

fn read_tensor(r: &mut impl Read) -> Result<(String, Tensor<f32>), ModelError> {
    let name = read_string(r)?;
    let mut dtype = [0u8; 1];
    read_exact(r, &mut dtype)?;
    if dtype[0] != DTYPE_F32 {
        return Err(ModelError::Format(format!("tensor `{name}` has unknown dtype {}", dtype[0])));
    }
    let ndim = read_u32(r)? as usize;
    let mut shape = Vec::with_capacity(ndim.min(8));
    for _ in 0..ndim {
        shape.push(read_u32(r)? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| ModelError::Format(format!("tensor `{name}` is too large")))?;
    let mut raw = Vec::new();
    r.take((n as u64).saturating_mul(4)).read_to_end(&mut raw)?;
    if raw.len() != n * 4 {
        return Err(ModelError::Format("unexpected end of file".into()));
    }
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((name, Tensor { shape, data }))
}
