//! Network checkpoints: `<stem>.json` carries the layer specs and training
//! metadata, `<stem>.ptf` carries one `PTF1` record per parameter buffer
//! (weights then bias, layer by layer).

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::layers::{LayerParams, LayerSpec};
use super::network::Network;
use super::optim::{AdamWConfig, StepLr};
use crate::error::{Error, Result};
use crate::tensor_file::{self, TensorRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub layers: Vec<LayerSpec>,
    pub input_shape: Vec<usize>,
    #[serde(default)]
    pub optimizer: Option<AdamWConfig>,
    #[serde(default)]
    pub schedule: Option<StepLr>,
    pub epoch: u32,
    pub seed: u64,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("ptf"))
}

fn record_dims(spec: &LayerSpec, weight: bool, len: usize) -> [usize; 3] {
    match (spec, weight) {
        (
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            },
            true,
        ) => [*out_channels, *in_channels, kernel * kernel],
        (
            LayerSpec::TransposedConv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            },
            true,
        ) => [*in_channels, *out_channels, kernel * kernel],
        (LayerSpec::Dense { fan_in, fan_out }, true) => [1, *fan_out, *fan_in],
        _ => [1, 1, len],
    }
}

pub fn save_network(net: &Network<f32>, header: &CheckpointHeader, stem: &Path) -> Result<()> {
    if header.layers != net.specs() || header.input_shape != net.input_shape() {
        return Err(Error::invalid(
            "checkpoint header does not describe this network",
        ));
    }
    let (json, ptf) = paths(stem);
    let file = File::create(&json).map_err(Error::file(&json))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, header)?;
    w.write_all(b"\n")?;
    let mut records = Vec::new();
    for (spec, p) in net.specs().iter().zip(net.params()) {
        if !spec.has_params() {
            continue;
        }
        records.push(TensorRecord::new(
            record_dims(spec, true, p.weight.len()),
            p.weight.clone(),
        )?);
        records.push(TensorRecord::new(
            record_dims(spec, false, p.bias.len()),
            p.bias.clone(),
        )?);
    }
    tensor_file::save_records(&ptf, &records)
}

pub fn load_network(stem: &Path) -> Result<(Network<f32>, CheckpointHeader)> {
    let (json, ptf) = paths(stem);
    let file = File::open(&json).map_err(Error::file(&json))?;
    let header: CheckpointHeader = serde_json::from_reader(BufReader::new(file))?;
    let mut records = tensor_file::load_records(&ptf)?.into_iter();
    let mut params = Vec::with_capacity(header.layers.len());
    for spec in &header.layers {
        if !spec.has_params() {
            params.push(LayerParams::empty());
            continue;
        }
        let mut next = || {
            records.next().map(|r| r.data).ok_or_else(|| {
                Error::Format(format!("{}: missing parameter record", ptf.display()))
            })
        };
        let weight = next()?;
        let bias = next()?;
        params.push(LayerParams { weight, bias });
    }
    if records.next().is_some() {
        return Err(Error::Format(format!(
            "{}: trailing parameter records",
            ptf.display()
        )));
    }
    let net = Network::from_params(header.layers.clone(), header.input_shape.clone(), params)?;
    Ok((net, header))
}
