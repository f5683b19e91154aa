//! Checkpoint container: named `f64` parameter arrays plus the model recipe.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use groundlab_core::harness::Checkpoint;
use groundlab_core::models::{DataShape, Method, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::container::{read_container, write_container, ArrayRef, DType, Payload, PayloadWriter};
use crate::error::{LabError, LabResult};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GLCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    array: ArrayRef,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    method: Method,
    model: ModelConfig,
    shape: DataShape,
    params: Vec<NamedArray>,
}

pub fn write_checkpoint(ckpt: &Checkpoint, out: &mut impl Write) -> LabResult<()> {
    let mut w = PayloadWriter::default();
    let params = ckpt.params.iter().map(|(name, m)| NamedArray { name: name.clone(), array: w.array(m, DType::F64) }).collect();
    let header = CheckpointHeader { method: ckpt.method, model: ckpt.model.clone(), shape: ckpt.shape, params };
    write_container(out, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &header, &w.into_bytes())
}

pub fn read_checkpoint(input: &mut impl Read) -> LabResult<Checkpoint> {
    let (h, bytes): (CheckpointHeader, _) = read_container(input, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let p = Payload::new(&bytes);
    let params = h
        .params
        .into_iter()
        .map(|n| {
            let m = p.array(&n.array, &n.name)?;
            Ok((n.name, m))
        })
        .collect::<LabResult<_>>()?;
    Ok(Checkpoint { method: h.method, model: h.model, shape: h.shape, params })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> LabResult<()> {
    let mut f = BufWriter::new(File::create(path).map_err(LabError::file(path))?);
    write_checkpoint(ckpt, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> LabResult<Checkpoint> {
    let mut f = BufReader::new(File::open(path).map_err(LabError::file(path))?);
    read_checkpoint(&mut f)
}
