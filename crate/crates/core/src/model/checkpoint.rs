//! `MRCD` checkpoint files.
//!
//! Layout (little-endian): magic `MRCD`, u32 version, u64 length plus the
//! JSON configuration, u64 tensor count followed by `(u32 name length, name,
//! MRCT tensor)` records, then a u8 flag. When the flag is 1 an optimizer
//! section follows: u64 step, u64 completed epochs, u64 count and
//! `(u32 name length, name, MRCT first moment, MRCT second moment)` records.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::tensor::{read_u32, read_u64, Element, Tensor};

use super::{AdamW, Detector};

pub const MAGIC: &[u8; 4] = b"MRCD";
pub const VERSION: u32 = 1;

/// Optimizer state needed to resume training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub optimizer: AdamW<T>,
    pub epochs_done: u64,
}

fn write_name<W: Write>(w: &mut W, name: &str) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    Ok(())
}

fn read_name<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("tensor name is not UTF-8".into()))
}

pub fn save<T: Element, W: Write>(w: &mut W, det: &Detector<T>, state: Option<&TrainState<T>>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let json = serde_json::to_vec(&det.config)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(det.store.len() as u64).to_le_bytes())?;
    for (_, p) in det.store.iter() {
        write_name(w, &p.name)?;
        p.value.write_to(w)?;
    }
    match state {
        None => w.write_all(&[0])?,
        Some(s) => {
            w.write_all(&[1])?;
            w.write_all(&s.optimizer.step.to_le_bytes())?;
            w.write_all(&s.epochs_done.to_le_bytes())?;
            let tracked: Vec<_> = det
                .store
                .iter()
                .zip(&s.optimizer.moments)
                .filter_map(|((_, p), m)| m.as_ref().map(|m| (&p.name, m)))
                .collect();
            w.write_all(&(tracked.len() as u64).to_le_bytes())?;
            for (name, (m, v)) in tracked {
                write_name(w, name)?;
                m.write_to(w)?;
                v.write_to(w)?;
            }
        }
    }
    Ok(())
}

pub fn load<T: Element, R: Read>(r: &mut R) -> Result<(Detector<T>, Option<TrainState<T>>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("not a checkpoint (magic {magic:?})")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u64(r)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let config: ExperimentConfig = serde_json::from_slice(&json)?;
    let mut det = Detector::<T>::new(config)?;

    let count = read_u64(r)? as usize;
    if count != det.store.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, the configured model has {}",
            det.store.len()
        )));
    }
    for _ in 0..count {
        let name = read_name(r)?;
        let t = Tensor::<T>::read_from(r)?;
        let id = det
            .store
            .id(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint tensor {name} is not part of the model")))?;
        let p = det.store.get_mut(id);
        if p.value.shape() != t.shape() {
            return Err(Error::Format(format!(
                "tensor {name} stored as {:?}, model expects {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t;
    }

    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let state = match flag[0] {
        0 => None,
        1 => {
            let mut opt = AdamW::new(det.config.train.adamw(), &det.store)?;
            opt.step = read_u64(r)?;
            let epochs_done = read_u64(r)?;
            let n = read_u64(r)? as usize;
            for _ in 0..n {
                let name = read_name(r)?;
                let m = Tensor::<T>::read_from(r)?;
                let v = Tensor::<T>::read_from(r)?;
                let id = det
                    .store
                    .id(&name)
                    .ok_or_else(|| Error::Format(format!("optimizer state for unknown tensor {name}")))?;
                let slot = opt.moments[id.index()]
                    .as_mut()
                    .ok_or_else(|| Error::Format(format!("optimizer state for non-learnable {name}")))?;
                if slot.0.shape() != m.shape() || slot.1.shape() != v.shape() {
                    return Err(Error::Format(format!("optimizer state for {name} has the wrong shape")));
                }
                *slot = (m, v);
            }
            Some(TrainState {
                optimizer: opt,
                epochs_done,
            })
        }
        f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
    };
    Ok((det, state))
}

pub fn save_file<T: Element>(path: &Path, det: &Detector<T>, state: Option<&TrainState<T>>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    save(&mut w, det, state)?;
    w.flush()?;
    Ok(())
}

pub fn load_file<T: Element>(path: &Path) -> Result<(Detector<T>, Option<TrainState<T>>)> {
    load(&mut BufReader::new(File::open(path)?))
}
