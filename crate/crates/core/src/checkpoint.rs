//! Versioned binary checkpoints of a [`TrainState`].
//!
//! Layout (little-endian): magic `DYNC`, version `u32`, completed epochs
//! `u32`, tensor count `u32`, then per tensor: name length `u32`, UTF-8 name,
//! rank `u32`, dims `u32 x rank`, values `f64 x numel`. Parameters come first
//! in [`Model::named_tensors`] order, followed by their momentum buffers
//! under `velocity/<name>`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::Model;
use crate::tensor::Tensor;
use crate::trainer::TrainState;

const MAGIC: &[u8; 4] = b"DYNC";
const VERSION: u32 = 1;

pub fn encode(state: &TrainState) -> Vec<u8> {
    let named = state.model.named_tensors();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(state.epoch as u32).to_le_bytes());
    out.extend_from_slice(&((2 * named.len()) as u32).to_le_bytes());
    let velocity = named
        .iter()
        .zip(&state.velocity)
        .map(|((name, _), v)| (format!("velocity/{name}"), v.clone()));
    for (name, t) in named.iter().cloned().chain(velocity) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint {
                field: what.into(),
                detail: "unexpected end of file".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Decoded checkpoint contents before they are matched to a network.
pub struct Checkpoint {
    pub epoch: usize,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint {
            field: "magic".into(),
            detail: "not a checkpoint file".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint {
            field: "version".into(),
            detail: format!("found {version}, expected {VERSION}"),
        });
    }
    let epoch = r.u32("epoch")? as usize;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(len, "name")?.to_vec()).map_err(|_| Error::Checkpoint {
            field: format!("tensor #{i}"),
            detail: "name is not UTF-8".into(),
        })?;
        let rank = r.u32(&name)? as usize;
        let dims = (0..rank)
            .map(|_| r.u32(&name).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = r.take(8 * numel, &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| Error::Checkpoint {
            field: name.clone(),
            detail: e.to_string(),
        })?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint {
            field: "trailer".into(),
            detail: format!("{} unexpected trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(Checkpoint { epoch, tensors })
}

/// Restores a state for `model`'s network. Names and shapes must match the
/// network exactly; the first mismatch is reported by name.
pub fn restore(checkpoint: Checkpoint, mut model: Model) -> Result<TrainState> {
    let n = model.named_tensors().len();
    if checkpoint.tensors.len() < n {
        // Let load_named name the first missing parameter.
        model.load_named(&checkpoint.tensors)?;
    }
    let (params, velocity) = checkpoint.tensors.split_at(n.min(checkpoint.tensors.len()));
    model.load_named(params)?;
    let expected = model.named_tensors();
    if velocity.len() != n {
        let field = expected
            .get(velocity.len())
            .map(|(name, _)| format!("velocity/{name}"))
            .unwrap_or_else(|| velocity[n].0.clone());
        return Err(Error::Checkpoint {
            field,
            detail: "momentum buffers do not match the parameters".into(),
        });
    }
    for ((name, t), (vname, v)) in expected.iter().zip(velocity) {
        if *vname != format!("velocity/{name}") || v.shape() != t.shape() {
            return Err(Error::Checkpoint {
                field: vname.clone(),
                detail: format!("expected velocity/{name} with shape {:?}", t.shape()),
            });
        }
    }
    Ok(TrainState {
        model,
        velocity: velocity.iter().map(|(_, v)| v.clone()).collect(),
        epoch: checkpoint.epoch,
    })
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&encode(state))?;
    f.flush()?;
    Ok(())
}

/// Loads a checkpoint into a freshly initialized `model` of the same network.
pub fn load(path: &Path, model: Model) -> Result<TrainState> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    restore(decode(&bytes)?, model)
}
