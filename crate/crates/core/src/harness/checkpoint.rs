//! Checkpoint directory layout:
//!
//! ```text
//! manifest.json   config, step, metrics snapshot, tensor table
//! params.bin      parameters as little-endian f32, manifest order
//! optstate.bin    per tensor: m, v, master weights as little-endian f64
//! ```
//!
//! `params.bin` is the storage copy. `optstate.bin` keeps the optimizer
//! moments and the full-precision master weights so a resumed run continues
//! exactly where it stopped.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::metrics::MetricsRecord;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::optim::OptimizerState;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.bin";
pub const OPTSTATE: &str = "optstate.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the parameter payload.
    pub offset: usize,
    pub no_decay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: RunConfig,
    pub seed: u64,
    pub step: u64,
    pub metrics: Option<MetricsRecord>,
    pub tensors: Vec<TensorEntry>,
    pub optimizer_step: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    /// Parameters widened from their f32 storage.
    pub params: ParamStore,
    /// Full-precision master weights.
    pub master: ParamStore,
    pub optimizer: OptimizerState,
}

fn f32_bytes(values: impl Iterator<Item = f64>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn save_checkpoint(
    dir: &Path,
    config: &RunConfig,
    step: u64,
    metrics: Option<&MetricsRecord>,
    params: &ParamStore,
    optimizer: &OptimizerState,
) -> Result<()> {
    if optimizer.m.len() != params.len() || optimizer.v.len() != params.len() {
        return Err(Error::Invariant("optimizer state does not match parameter count".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0;
    let mut payload = Vec::with_capacity(params.num_scalars() * 4);
    let mut state = Vec::with_capacity(params.num_scalars() * 24);
    for (id, p) in params.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
            no_decay: p.no_decay,
        });
        offset += p.value.len();
        f32_bytes(p.value.data().iter().copied(), &mut payload);
        for block in [&optimizer.m[id.0], &optimizer.v[id.0], &p.value] {
            for v in block.data() {
                state.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        seed: config.seed,
        step,
        metrics: metrics.cloned(),
        tensors,
        optimizer_step: optimizer.step,
    };
    let write = |name: &str, bytes: &[u8]| {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    };
    write(PARAMS, &payload)?;
    write(OPTSTATE, &state)?;
    write(MANIFEST, serde_json::to_string_pretty(&manifest)?.as_bytes())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let version: serde_json::Value = serde_json::from_str(&text)?;
    match version.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        other => {
            return Err(Error::Checkpoint(format!(
                "{}: format version {other:?}, expected {FORMAT_VERSION}",
                path.display()
            )))
        }
    }
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

fn read_exact_len(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{}: {} bytes, manifest implies {expected}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = load_manifest(dir)?;
    let mut expected_offset = 0;
    for t in &manifest.tensors {
        if t.offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "tensor {} at offset {}, expected {expected_offset}",
                t.name, t.offset
            )));
        }
        expected_offset += t.shape.iter().product::<usize>();
    }
    let total = expected_offset;
    let payload = read_exact_len(&dir.join(PARAMS), total * 4)?;
    let state = read_exact_len(&dir.join(OPTSTATE), total * 24)?;
    let f32_at = |i: usize| f32::from_le_bytes(payload[4 * i..4 * i + 4].try_into().expect("4 bytes")) as f64;
    let f64_at = |i: usize| f64::from_le_bytes(state[8 * i..8 * i + 8].try_into().expect("8 bytes"));

    let mut params = ParamStore::new();
    let mut master = ParamStore::new();
    let mut m = Vec::with_capacity(manifest.tensors.len());
    let mut v = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let len: usize = t.shape.iter().product();
        let stored = (t.offset..t.offset + len).map(f32_at).collect();
        params.add(t.name.clone(), Tensor::new(t.shape.clone(), stored)?, t.no_decay)?;
        let base = 3 * t.offset;
        let block = |k: usize| -> Result<Tensor> {
            let start = base + k * len;
            Tensor::new(t.shape.clone(), (start..start + len).map(f64_at).collect())
        };
        m.push(block(0)?);
        v.push(block(1)?);
        master.add(t.name.clone(), block(2)?, t.no_decay)?;
    }
    let optimizer = OptimizerState {
        step: manifest.optimizer_step,
        m,
        v,
    };
    Ok(Checkpoint {
        manifest,
        params,
        master,
        optimizer,
    })
}
