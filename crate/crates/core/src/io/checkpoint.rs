//! Checkpoint layout (little-endian):
//!
//! ```text
//! "ADMCKPT\0"             8-byte magic
//! u32 version             = 1
//! u32 n, n bytes          run configuration as JSON
//! u64 step, u32 bad_steps
//! [u8; 32] seed, u64 stream, u128 word_pos      generator state
//! u32 count, then per parameter (name order):
//!   u16 len, name, u8 partition, u8 decay, u8 ndim, u32 dims[ndim], f64 data
//! u32 count, then per optimizer slot (name order):
//!   u16 len, name, u64 t, f64 m[..], f64 v[..]   shapes follow the parameter
//! ```
//!
//! Trailing bytes are rejected. Saving a loaded checkpoint reproduces the
//! file byte for byte.

use std::path::Path;

use super::Reader;
use crate::error::{Error, Result};
use crate::model::{AdaMae, ArchConfig};
use crate::tensor::{ParamSet, Partition, Tensor};
use crate::train::optim::{AdamWState, Moments};
use crate::train::{check_param_shapes, ModelState, RngState, TrainConfig};

pub const MAGIC: &[u8; 8] = b"ADMCKPT\0";
pub const VERSION: u32 = 1;

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name `{name}` too long")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn get_name(r: &mut Reader) -> Result<String> {
    let len = r.u16()? as usize;
    String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("checkpoint: name is not UTF-8".into()))
}

fn get_f64s(r: &mut Reader, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| r.f64()).collect()
}

pub fn encode_checkpoint(state: &ModelState) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(&state.config)?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&state.bad_steps.to_le_bytes());
    out.extend_from_slice(&state.rng.seed);
    out.extend_from_slice(&state.rng.stream.to_le_bytes());
    out.extend_from_slice(&state.rng.word_pos.to_le_bytes());

    out.extend_from_slice(&(state.params.len() as u32).to_le_bytes());
    for (name, p) in state.params.iter() {
        put_name(&mut out, name)?;
        out.push(p.partition.tag());
        out.push(p.decay as u8);
        let shape = p.value.shape();
        out.push(u8::try_from(shape.len()).map_err(|_| Error::Format("tensor rank above 255".into()))?);
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| Error::Format("dimension does not fit in 32 bits".into()))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        put_f64s(&mut out, p.value.data());
    }

    out.extend_from_slice(&(state.optimizer.slots.len() as u32).to_le_bytes());
    for (name, slot) in &state.optimizer.slots {
        let p = state
            .params
            .get(name)
            .map_err(|_| Error::Format(format!("optimizer slot `{name}` has no parameter")))?;
        if slot.m.shape() != p.value.shape() || slot.v.shape() != p.value.shape() {
            return Err(Error::Format(format!("optimizer slot `{name}` shape mismatch")));
        }
        put_name(&mut out, name)?;
        out.extend_from_slice(&slot.t.to_le_bytes());
        put_f64s(&mut out, slot.m.data());
        put_f64s(&mut out, slot.v.data());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelState> {
    let mut r = Reader::new(bytes, "checkpoint");
    if &r.array::<8>()? != MAGIC {
        return Err(Error::Format("checkpoint: bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("checkpoint: unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let config: TrainConfig = serde_json::from_slice(r.take(n)?)?;
    let step = r.u64()?;
    let bad_steps = r.u32()?;
    let rng = RngState {
        seed: r.array()?,
        stream: r.u64()?,
        word_pos: r.u128()?,
    };

    let mut params = ParamSet::new();
    for _ in 0..r.u32()? {
        let name = get_name(&mut r)?;
        let partition = Partition::from_tag(r.u8()?)
            .ok_or_else(|| Error::Format(format!("checkpoint: bad partition for `{name}`")))?;
        let decay = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(Error::Format(format!("checkpoint: bad decay flag {b}"))),
        };
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("checkpoint: tensor too large".into()))?;
        let data = get_f64s(&mut r, len)?;
        params.insert(name, Tensor::new(shape, data)?, partition, decay)?;
    }

    let mut optimizer = AdamWState::default();
    for _ in 0..r.u32()? {
        let name = get_name(&mut r)?;
        let shape = params
            .get(&name)
            .map_err(|_| Error::Format(format!("checkpoint: optimizer slot `{name}` has no parameter")))?
            .value
            .shape()
            .to_vec();
        let t = r.u64()?;
        let len = shape.iter().product();
        let m = Tensor::new(shape.clone(), get_f64s(&mut r, len)?)?;
        let v = Tensor::new(shape, get_f64s(&mut r, len)?)?;
        optimizer.slots.insert(name, Moments { m, v, t });
    }
    r.finish()?;
    Ok(ModelState {
        config,
        params,
        optimizer,
        rng,
        step,
        bad_steps,
    })
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, encode_checkpoint(state)?)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Loads a checkpoint and checks that it was written for `arch`.
pub fn load_checkpoint_for(path: &Path, arch: &ArchConfig) -> Result<ModelState> {
    let state = load_checkpoint(path)?;
    if &state.config.arch != arch {
        return Err(Error::Format(format!(
            "{}: checkpoint architecture does not match the requested configuration",
            path.display()
        )));
    }
    check_param_shapes(&AdaMae::new(arch.clone())?, &state.params)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::Trainer;

    fn small_state() -> ModelState {
        let mut cfg = TrainConfig::default();
        cfg.arch.embed_dim = 16;
        cfg.arch.enc_depth = 1;
        cfg.arch.dec_dim = 8;
        cfg.arch.dec_depth = 1;
        cfg.data.corpus_size = 8;
        cfg.optim.batch_size = 2;
        let mut t = Trainer::new(cfg).unwrap();
        t.run(2, |_| {}).unwrap();
        t.state()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let state = small_state();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        save_checkpoint(&state, &a).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        assert_eq!(loaded, state);
        save_checkpoint(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert!(load_checkpoint_for(&a, &state.config.arch).is_ok());
        let mut other = state.config.arch.clone();
        other.embed_dim = 32;
        assert!(load_checkpoint_for(&a, &other).is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode_checkpoint(&small_state()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(decode_checkpoint(&longer).is_err());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut version = bytes;
        version[8] = 2;
        assert!(decode_checkpoint(&version).is_err());
    }
}
