//! Single-file checkpoints.
//!
//! Layout: the magic line `BPCGEN1\n`, a little-endian `u64` header length,
//! a JSON header, then raw little-endian tensor blobs at the offsets the
//! header lists (relative to the end of the header).

use std::collections::BTreeMap;
use std::path::Path;

use bpcgen_tape::{Real, Tensor};
use serde::{Deserialize, Serialize};

use super::{Adam, EpochRecord, Model, ModelConfig, TrainConfig, TrainState};
use crate::error::{io_err, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BPCGEN1\n";

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    step: u64,
    history: Vec<EpochRecord>,
    opt_eg: OptimizerHeader,
    opt_d: OptimizerHeader,
    blobs: Vec<BlobEntry>,
}

fn opt_header<T>(a: &Adam<T>) -> OptimizerHeader {
    OptimizerHeader {
        step: a.step,
        learning_rate: a.learning_rate,
        beta1: a.beta1,
        beta2: a.beta2,
        epsilon: a.epsilon,
    }
}

/// Parameter names paired with optimizer moment names.
fn moment_names<T: Real>(model: &Model<T>) -> (Vec<String>, Vec<String>) {
    let names: Vec<String> = model.named().into_iter().map(|(n, _)| n).collect();
    names.into_iter().partition(|n| !n.starts_with("critic/"))
}

pub fn save_checkpoint<T: Real>(state: &TrainState<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut blobs = Vec::new();
    let mut body = Vec::new();
    let mut push = |name: String, t: &Tensor<T>| {
        let offset = body.len();
        for &v in t.data() {
            v.write_le(&mut body);
        }
        blobs.push(BlobEntry {
            name,
            dtype: T::DTYPE.into(),
            shape: t.shape().to_vec(),
            offset,
            length: body.len() - offset,
        });
    };
    for (name, t) in state.model.named() {
        push(name, t);
    }
    let (eg_names, d_names) = moment_names(&state.model);
    for (opt, names, tag) in [(&state.opt_eg, &eg_names, "opt_eg"), (&state.opt_d, &d_names, "opt_d")] {
        for (i, n) in names.iter().enumerate() {
            push(format!("{tag}/m/{n}"), &opt.m[i]);
            push(format!("{tag}/v/{n}"), &opt.v[i]);
        }
    }
    let header = Header {
        model: state.model.config(),
        train: state.config.clone(),
        epoch: state.epoch,
        step: state.step,
        history: state.history.clone(),
        opt_eg: opt_header(&state.opt_eg),
        opt_d: opt_header(&state.opt_d),
        blobs,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + body.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&body);
    // Write then rename so an interrupted save never truncates the last
    // good checkpoint.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &out).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

struct Archive {
    header: Header,
    tensors: BTreeMap<String, (String, Vec<usize>, Vec<u8>)>,
}

fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let bad = |message: String| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        message,
    };
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (missing BPCGEN1 magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file size".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..body_start])?;
    let body = &bytes[body_start..];
    let mut tensors = BTreeMap::new();
    for b in &header.blobs {
        let slice = b
            .offset
            .checked_add(b.length)
            .and_then(|end| body.get(b.offset..end))
            .ok_or_else(|| bad(format!("blob {} lies outside the file", b.name)))?;
        tensors.insert(b.name.clone(), (b.dtype.clone(), b.shape.clone(), slice.to_vec()));
    }
    Ok(Archive { header, tensors })
}

fn decode<T: Real>(name: &str, entry: &(String, Vec<usize>, Vec<u8>), expect: &[usize]) -> Result<Tensor<T>> {
    let (dtype, shape, raw) = entry;
    if shape != expect {
        return Err(Error::Config(format!("checkpoint tensor {name} has shape {shape:?}, expected {expect:?}")));
    }
    let n: usize = shape.iter().product();
    let data: Vec<T> = match dtype.as_str() {
        "f32" if raw.len() == 4 * n => raw.chunks(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
        "f64" if raw.len() == 8 * n => raw.chunks(8).map(|c| T::lit(f64::read_le(c))).collect(),
        _ => return Err(Error::Config(format!("checkpoint tensor {name} has bad dtype {dtype} or length"))),
    };
    Ok(Tensor::from_vec(shape.clone(), data))
}

fn fill<T: Real>(
    archive: &Archive,
    targets: Vec<(String, &mut Tensor<T>)>,
) -> Result<()> {
    for (name, t) in targets {
        let entry = archive
            .tensors
            .get(&name)
            .ok_or_else(|| Error::Config(format!("checkpoint is missing tensor {name}")))?;
        *t = decode(&name, entry, t.shape())?;
    }
    Ok(())
}

fn model_from_archive<T: Real>(archive: &Archive) -> Result<Model<T>> {
    let mut model = Model::new(&archive.header.model, 0)?;
    fill(archive, model.named_mut())?;
    Ok(model)
}

/// Loads only the networks, for evaluation and inference.
pub fn load_model<T: Real>(path: impl AsRef<Path>) -> Result<Model<T>> {
    model_from_archive(&read_archive(path.as_ref())?)
}

/// Loads the full training state for resumption.
pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<TrainState<T>> {
    let archive = read_archive(path.as_ref())?;
    let h = &archive.header;
    let model: Model<T> = model_from_archive(&archive)?;
    let mut state = TrainState::new(&h.model, h.train.clone())?;
    state.model = model;
    state.epoch = h.epoch;
    state.step = h.step;
    state.history = h.history.clone();
    let (eg_names, d_names) = moment_names(&state.model);
    for (opt, hdr, names, tag) in [
        (&mut state.opt_eg, &h.opt_eg, &eg_names, "opt_eg"),
        (&mut state.opt_d, &h.opt_d, &d_names, "opt_d"),
    ] {
        opt.step = hdr.step;
        opt.learning_rate = hdr.learning_rate;
        opt.beta1 = hdr.beta1;
        opt.beta2 = hdr.beta2;
        opt.epsilon = hdr.epsilon;
        let targets = names
            .iter()
            .zip(opt.m.iter_mut().zip(opt.v.iter_mut()))
            .flat_map(|(n, (m, v))| [(format!("{tag}/m/{n}"), m), (format!("{tag}/v/{n}"), v)])
            .collect();
        fill(&archive, targets)?;
    }
    Ok(state)
}
