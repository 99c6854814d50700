//! Detector checkpoints.
//!
//! A checkpoint is one JSON document:
//!
//! ```text
//! {
//!   "format": "saliency-sanity-checkpoint",
//!   "version": 1,
//!   "config": { ...DetectorConfig... },
//!   "fingerprint": "<sha-256 of the parameters>",
//!   "parameters": [ { "name": "conv1.kernel", "shape": [8, 3, 3, 3], "values": [...] }, ... ]
//! }
//! ```
//!
//! Parameters are listed from input to output (`conv1` .. `conv4`,
//! `class_head`, `box_head`; kernel before bias). Values round-trip bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::model::Layer;

pub const CHECKPOINT_FORMAT: &str = "saliency-sanity-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedParameter {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: DetectorConfig,
    fingerprint: String,
    parameters: Vec<NamedParameter>,
}

fn parameter_names(layer: &Layer) -> Vec<String> {
    match layer {
        Layer::Conv2d(c) => vec![format!("{}.kernel", c.name), format!("{}.bias", c.name)],
        Layer::Dense(d) => vec![format!("{}.weight", d.name), format!("{}.bias", d.name)],
        _ => Vec::new(),
    }
}

pub fn save_checkpoint(detector: &Detector, path: &Path) -> Result<()> {
    let model = &detector.model;
    let names = model
        .body
        .iter()
        .chain(&model.heads)
        .flat_map(parameter_names);
    let parameters = names
        .zip(model.params())
        .map(|(name, t)| NamedParameter {
            name,
            shape: t.shape().to_vec(),
            values: t.data().to_vec(),
        })
        .collect();
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: detector.config.clone(),
        fingerprint: model.fingerprint(),
        parameters,
    };
    let text = serde_json::to_string(&file)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Detector> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::format(path, format!("not a checkpoint (format {:?})", file.format)));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint version {}", file.version),
        ));
    }
    let mut detector = Detector::build(file.config)?;
    let names: Vec<String> = detector
        .model
        .body
        .iter()
        .chain(&detector.model.heads)
        .flat_map(parameter_names)
        .collect();
    if names.len() != file.parameters.len() {
        return Err(Error::format(
            path,
            format!(
                "expected {} parameter tensors, found {}",
                names.len(),
                file.parameters.len()
            ),
        ));
    }
    for ((slot, name), stored) in detector
        .model
        .params_mut()
        .into_iter()
        .zip(&names)
        .zip(file.parameters)
    {
        if &stored.name != name || stored.shape != slot.shape() || stored.values.len() != slot.numel() {
            return Err(Error::format(
                path,
                format!(
                    "parameter {:?} {:?} does not match expected {name:?} {:?}",
                    stored.name,
                    stored.shape,
                    slot.shape()
                ),
            ));
        }
        slot.data_mut().copy_from_slice(&stored.values);
    }
    if detector.model.fingerprint() != file.fingerprint {
        return Err(Error::format(path, "parameter fingerprint mismatch"));
    }
    Ok(detector)
}
