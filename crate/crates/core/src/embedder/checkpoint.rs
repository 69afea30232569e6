//! JSON checkpoint of every embedder tensor, keyed by name with its shape.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Arch, BatchNorm, Dense, EmbedderParams, LAYER_NAMES};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "outfit-embedder";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Tensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    arch: Arch,
    tensors: Vec<Tensor>,
}

fn vector(name: String, v: &Array1<f64>) -> Tensor {
    Tensor {
        name,
        shape: vec![v.len()],
        data: v.to_vec(),
    }
}

fn to_checkpoint(params: &EmbedderParams) -> Checkpoint {
    let mut tensors = Vec::new();
    for (name, layer) in LAYER_NAMES.iter().zip(params.layers()) {
        let (rows, cols) = layer.weight.dim();
        tensors.push(Tensor {
            name: format!("{name}.weight"),
            shape: vec![rows, cols],
            data: layer.weight.iter().copied().collect(),
        });
        tensors.push(vector(format!("{name}.bias"), &layer.bias));
        if let Some(bn) = &layer.norm {
            tensors.push(vector(format!("{name}.gamma"), &bn.gamma));
            tensors.push(vector(format!("{name}.beta"), &bn.beta));
            tensors.push(vector(format!("{name}.running_mean"), &bn.running_mean));
            tensors.push(vector(format!("{name}.running_var"), &bn.running_var));
        }
    }
    Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        arch: params.arch.clone(),
        tensors,
    }
}

fn from_checkpoint(ckpt: Checkpoint) -> Result<EmbedderParams> {
    if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint {} v{}",
            ckpt.format, ckpt.version
        )));
    }
    // Shapes come from the architecture; tensors overwrite the initial values.
    let mut params = EmbedderParams::init(ckpt.arch)?;
    let mut tensors: std::collections::HashMap<String, Tensor> =
        ckpt.tensors.into_iter().map(|t| (t.name.clone(), t)).collect();

    let mut take = |name: String, shape: &[usize]| -> Result<Vec<f64>> {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {name}")))?;
        if t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                t.shape
            )));
        }
        Ok(t.data)
    };

    for (name, layer) in LAYER_NAMES.iter().zip(params.layers_mut()) {
        let Dense { weight, bias, norm, .. } = layer;
        let (rows, cols) = weight.dim();
        *weight = Array2::from_shape_vec((rows, cols), take(format!("{name}.weight"), &[rows, cols])?)
            .expect("shape checked");
        *bias = Array1::from(take(format!("{name}.bias"), &[bias.len()])?);
        if let Some(BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            ..
        }) = norm
        {
            let w = gamma.len();
            *gamma = Array1::from(take(format!("{name}.gamma"), &[w])?);
            *beta = Array1::from(take(format!("{name}.beta"), &[w])?);
            *running_mean = Array1::from(take(format!("{name}.running_mean"), &[w])?);
            *running_var = Array1::from(take(format!("{name}.running_var"), &[w])?);
            if running_var.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Config(format!("{name}.running_var must be positive")));
            }
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Config(format!("unexpected tensor {extra} in checkpoint")));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &EmbedderParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer(&mut out, &to_checkpoint(params)).map_err(|e| Error::io(path, e.into()))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EmbedderParams> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Malformed {
        line: e.line(),
        message: e.to_string(),
    })?;
    from_checkpoint(ckpt)
}
