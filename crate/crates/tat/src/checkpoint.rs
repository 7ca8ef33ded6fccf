//! `TATCKPT1` checkpoint files.
//!
//! Layout, little-endian throughout: the 8-byte magic, a `u16` format
//! version, a `u32` tensor count, then per tensor a `u32` name length, the
//! UTF-8 name, a `u8` rank, `rank` `u32` dims and the `f32` payload; finally
//! the CRC32 of every preceding byte.
//!
//! Parameters are stored under their own names. Optimizer moments live under
//! `optim.m{slot}.{name}` and scalar state under `meta.*`; integers and `f64`
//! values are split into 16-bit limbs, which `f32` holds exactly.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tat_core::optim::{OptimConfig, OptimKind, OptimState};
use tat_core::params::ModelParams;
use tat_core::Tensor;
use thiserror::Error;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TATCKPT1";
pub const VERSION: u16 = 1;

const OPTIM_PREFIX: &str = "optim.m";
const META_PREFIX: &str = "meta.";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

fn malformed(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed(msg.into())
}

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Trainable tensors and running statistics.
    pub params: ModelParams<f32>,
    pub optim: OptimState<f32>,
    pub rng: RngState,
    /// Completed epochs.
    pub epoch: u32,
    pub config_hash: u32,
}

fn limbs(value: u128, count: usize) -> Vec<f32> {
    (0..count).map(|i| ((value >> (16 * i)) & 0xffff) as f32).collect()
}

fn unlimb(values: &[f32]) -> Result<u128, CheckpointError> {
    let mut v = 0u128;
    for (i, &x) in values.iter().enumerate() {
        if !(0.0..=65535.0).contains(&x) || x.fract() != 0.0 {
            return Err(malformed("metadata limb out of range"));
        }
        v |= (x as u128) << (16 * i);
    }
    Ok(v)
}

fn limb_tensor(values: Vec<f32>) -> Tensor<f32> {
    let n = values.len();
    Tensor::new(&[n], values).expect("1-D metadata")
}

fn meta_optim(o: &OptimState<f32>) -> Tensor<f32> {
    let c = &o.config;
    let kind = match c.kind {
        OptimKind::Sgd => 0,
        OptimKind::AdamW => 1,
    };
    let mut v = limbs(kind, 1);
    v.extend(limbs(o.step.into(), 4));
    for x in [c.lr, c.momentum, c.beta1, c.beta2, c.eps, c.weight_decay] {
        v.extend(limbs(x.to_bits().into(), 4));
    }
    limb_tensor(v)
}

fn parse_meta_optim(t: &Tensor<f32>) -> Result<(OptimConfig, u64), CheckpointError> {
    let d = t.data();
    if d.len() != 29 {
        return Err(malformed("meta.optim has the wrong length"));
    }
    let kind = match unlimb(&d[..1])? {
        0 => OptimKind::Sgd,
        1 => OptimKind::AdamW,
        k => return Err(malformed(format!("unknown optimizer kind {k}"))),
    };
    let step = unlimb(&d[1..5])? as u64;
    let mut f = [0f64; 6];
    for (i, x) in f.iter_mut().enumerate() {
        *x = f64::from_bits(unlimb(&d[5 + 4 * i..9 + 4 * i])? as u64);
    }
    let config = OptimConfig {
        kind,
        lr: f[0],
        momentum: f[1],
        beta1: f[2],
        beta2: f[3],
        eps: f[4],
        weight_decay: f[5],
    };
    Ok((config, step))
}

impl Checkpoint {
    /// Flattens the checkpoint into its named-tensor table.
    pub fn tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out: Vec<(String, Tensor<f32>)> =
            self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        for (name, slots) in &self.optim.buffers {
            for (i, t) in slots.iter().enumerate() {
                out.push((format!("{OPTIM_PREFIX}{i}.{name}"), t.clone()));
            }
        }
        let mut rng = Vec::new();
        for chunk in self.rng.seed.chunks_exact(2) {
            rng.push(f32::from(u16::from_le_bytes([chunk[0], chunk[1]])));
        }
        rng.extend(limbs(self.rng.stream.into(), 4));
        rng.extend(limbs(self.rng.word_pos, 8));
        out.push(("meta.config_hash".into(), limb_tensor(limbs(self.config_hash.into(), 2))));
        out.push(("meta.epoch".into(), limb_tensor(limbs(self.epoch.into(), 2))));
        out.push(("meta.init_seed".into(), limb_tensor(limbs(self.params.seed.into(), 4))));
        out.push(("meta.optim".into(), meta_optim(&self.optim)));
        out.push(("meta.rng".into(), limb_tensor(rng)));
        out
    }

    pub fn from_tensors(tensors: Vec<(String, Tensor<f32>)>) -> Result<Self, CheckpointError> {
        let mut params = ModelParams::new(0);
        let mut buffers: Vec<(String, usize, Tensor<f32>)> = Vec::new();
        let mut meta = std::collections::BTreeMap::new();
        for (name, t) in tensors {
            if let Some(rest) = name.strip_prefix(OPTIM_PREFIX) {
                let (slot, pname) = rest
                    .split_once('.')
                    .ok_or_else(|| malformed(format!("bad optimizer entry `{name}`")))?;
                let slot: usize = slot
                    .parse()
                    .map_err(|_| malformed(format!("bad optimizer slot in `{name}`")))?;
                buffers.push((pname.to_string(), slot, t));
            } else if let Some(key) = name.strip_prefix(META_PREFIX) {
                meta.insert(key.to_string(), t);
            } else {
                if params.contains(&name) {
                    return Err(malformed(format!("duplicate tensor `{name}`")));
                }
                params.insert(name, t);
            }
        }
        let get = |key: &str| meta.get(key).ok_or_else(|| malformed(format!("missing meta.{key}")));
        let (config, step) = parse_meta_optim(get("optim")?)?;
        let mut optim = OptimState::new(config);
        optim.step = step;
        for (name, slot, t) in buffers {
            if !params.contains(&name) {
                return Err(malformed(format!("optimizer state for unknown parameter `{name}`")));
            }
            let slots = optim.buffers.entry(name).or_default();
            if slot != slots.len() {
                return Err(malformed("optimizer slots out of order"));
            }
            slots.push(t);
        }
        params.seed = unlimb(get("init_seed")?.data())? as u64;
        let rng = get("rng")?.data();
        if rng.len() != 28 {
            return Err(malformed("meta.rng has the wrong length"));
        }
        let mut seed = [0u8; 32];
        for (i, &x) in rng[..16].iter().enumerate() {
            let v = unlimb(&[x])? as u16;
            seed[2 * i..2 * i + 2].copy_from_slice(&v.to_le_bytes());
        }
        Ok(Self {
            params,
            optim,
            rng: RngState {
                seed,
                stream: unlimb(&rng[16..20])? as u64,
                word_pos: unlimb(&rng[20..28])?,
            },
            epoch: unlimb(get("epoch")?.data())? as u32,
            config_hash: unlimb(get("config_hash")?.data())? as u32,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_tensors(&self.tensors())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        Self::from_tensors(decode_tensors(bytes)?)
    }
}

/// Serializes a tensor table.
pub fn encode_tensors(tensors: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a tensor table, checking magic, version, structure and checksum in
/// that order.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    let head = &bytes[..bytes.len().min(MAGIC.len())];
    if head != &MAGIC[..head.len()] {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 0 };
    r.take(MAGIC.len())?;
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| malformed("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| malformed(format!("tensor `{name}` is too large")))?;
        let data = r
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| malformed(format!("tensor `{name}`: {e}")))?;
        tensors.push((name, t));
    }
    let body = r.pos;
    let stored = r.u32()?;
    if r.pos != bytes.len() {
        return Err(malformed("trailing bytes after the checksum"));
    }
    let computed = crc32fast::hash(&bytes[..body]);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    Ok(tensors)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|source| Error::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn sample() -> Checkpoint {
        let mut params = ModelParams::new(0xdead_beef_1234);
        params.insert("conv0.weight", Tensor::from_f64(&[1, 1, 1, 2], &[0.5, -1.25]).unwrap());
        params.insert("conv0.bn.running", Tensor::from_f64(&[2, 1], &[0.0, 1.0]).unwrap());
        let mut optim = OptimState::new(OptimConfig::default());
        optim.step = 70_000;
        optim.buffers.insert(
            "conv0.weight".into(),
            vec![Tensor::from_f64(&[1, 1, 1, 2], &[1e-3, 2.0]).unwrap()],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        rng.set_stream(3);
        rng.next_u64();
        Checkpoint {
            params,
            optim,
            rng: RngState::capture(&rng),
            epoch: 12,
            config_hash: 0xfeed_f00d,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rng_state_resumes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.next_u32();
        let mut resumed = RngState::capture(&rng).restore();
        assert_eq!(resumed.next_u64(), rng.next_u64());
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample().to_bytes();
        assert_eq!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 9]),
            Err(CheckpointError::Truncated)
        );
        assert_eq!(Checkpoint::from_bytes(&bytes[..5]), Err(CheckpointError::Truncated));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert_eq!(
            Checkpoint::from_bytes(&v2),
            Err(CheckpointError::VersionMismatch { found: 2, expected: 1 })
        );
        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(Checkpoint::from_bytes(&flipped).is_err());
    }
}
