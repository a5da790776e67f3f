//! Single-file model container: magic bytes, a little-endian `u64` manifest
//! length, the JSON manifest, then every buffer as raw little-endian `f64`
//! in manifest order.

use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{AmoModel, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{RunningStats, Tensor};

const MAGIC: &[u8; 8] = b"AMOCKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct BufferEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: u32,
    config: ModelConfig,
    seed: u64,
    buffers: Vec<BufferEntry>,
    #[serde(default)]
    extra: serde_json::Value,
}

/// A model plus caller-defined metadata (preprocessing state, bins, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: AmoModel,
    pub extra: serde_json::Value,
}

fn buffers(model: &AmoModel) -> Vec<(String, Vec<usize>, &[f64])> {
    let store = model.params();
    let mut out: Vec<(String, Vec<usize>, &[f64])> = store
        .names()
        .iter()
        .zip(store.tensors())
        .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.data()))
        .collect();
    for enc in model.encoders() {
        let r = enc.running_stats();
        out.push((format!("encoder.{}.bn.running_mean", enc.name()), vec![r.mean.len()], &r.mean));
        out.push((format!("encoder.{}.bn.running_var", enc.name()), vec![r.var.len()], &r.var));
    }
    out
}

pub fn write_checkpoint<W: Write>(mut w: W, model: &AmoModel, extra: &serde_json::Value) -> Result<()> {
    let bufs = buffers(model);
    let manifest = Manifest {
        format: FORMAT_VERSION,
        config: model.config().clone(),
        seed: model.seed(),
        buffers: bufs
            .iter()
            .map(|(name, shape, _)| BufferEntry { name: name.clone(), shape: shape.clone() })
            .collect(),
        extra: extra.clone(),
    };
    let json = serde_json::to_vec(&manifest)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, _, data) in &bufs {
        for v in *data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = usize::try_from(u64::from_le_bytes(len))
        .map_err(|_| Error::Format("manifest length overflows".into()))?;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let manifest: Manifest = serde_json::from_slice(&json)?;
    if manifest.format != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint format {}", manifest.format)));
    }
    let mut model = AmoModel::new(manifest.config, manifest.seed)?;
    let expected: Vec<(String, Vec<usize>)> = buffers(&model)
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    if expected.len() != manifest.buffers.len()
        || expected
            .iter()
            .zip(&manifest.buffers)
            .any(|((n, s), e)| *n != e.name || *s != e.shape)
    {
        return Err(Error::Format("checkpoint buffers do not match the architecture".into()));
    }
    let mut read_buf = |n: usize| -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    };
    let n_params = model.params().len();
    for i in 0..n_params {
        let shape = manifest.buffers[i].shape.clone();
        let data = read_buf(shape.iter().product())?;
        model.params_mut().tensors_mut()[i] = Tensor::new(shape, data)?;
    }
    let mut stats = Vec::new();
    for pair in manifest.buffers[n_params..].chunks(2) {
        let mean = read_buf(pair[0].shape[0])?;
        let var = read_buf(pair[1].shape[0])?;
        stats.push(RunningStats { mean, var });
    }
    model.set_running_stats(stats)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", rest.len())));
    }
    Ok(Checkpoint { model, extra: manifest.extra })
}

pub fn save_checkpoint(path: &Path, model: &AmoModel, extra: &serde_json::Value) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), model, extra)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
