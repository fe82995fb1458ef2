//! Model checkpoints in the shared binary container (magic `FPMODEL\0`).

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{BandNorm, LayerParams, Model, NetworkSpec};
use super::tensor::Tensor;
use crate::container::{self, Blob};
use crate::{Error, Result};

const MODEL_MAGIC: &[u8; 8] = b"FPMODEL\0";

#[derive(Serialize, Deserialize)]
struct Descriptor {
    spec: NetworkSpec,
    input_bands: Vec<String>,
    normalization: Vec<BandNorm>,
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let desc = serde_json::to_string(&Descriptor {
        spec: model.spec.clone(),
        input_bands: model.input_bands.clone(),
        normalization: model.normalization.clone(),
    })?;
    let mut blobs = Vec::new();
    for p in model.params.iter().flatten() {
        blobs.push(Blob {
            shape: p.weight.shape().to_vec(),
            data: p.weight.data().to_vec(),
        });
        blobs.push(Blob {
            shape: vec![p.bias.len()],
            data: p.bias.clone(),
        });
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    container::write(&mut out, MODEL_MAGIC, &desc, &blobs)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let mut input = BufReader::new(fs::File::open(path)?);
    let (desc, blobs) = container::read(&mut input, MODEL_MAGIC)?;
    let desc: Descriptor = serde_json::from_str(&desc)?;
    let template = Model::zeros(desc.spec.clone())?;
    let mut blobs = blobs.into_iter();
    let mut params = Vec::with_capacity(template.params.len());
    for slot in &template.params {
        let Some(expected) = slot else {
            params.push(None);
            continue;
        };
        let (Some(w), Some(b)) = (blobs.next(), blobs.next()) else {
            return Err(Error::format("checkpoint holds too few tensors"));
        };
        if w.shape != expected.weight.shape() || b.shape != [expected.bias.len()] {
            return Err(Error::format(format!(
                "checkpoint tensor shapes {:?}/{:?} do not match the network ({:?})",
                w.shape,
                b.shape,
                expected.weight.shape()
            )));
        }
        params.push(Some(LayerParams {
            weight: Tensor::from_vec(expected.weight.shape(), w.data)?,
            bias: b.data,
        }));
    }
    if blobs.next().is_some() {
        return Err(Error::format("checkpoint holds extra tensors"));
    }
    let mut model = Model::from_parts(desc.spec, params)?;
    model.set_input_bands(desc.input_bands)?;
    model.set_normalization(desc.normalization)?;
    Ok(model)
}
