//! Text checkpoints: one JSON header line, then one parameter per line at 17
//! significant digits (bit-exact for `f32` and `f64`).

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MultiHeadNet;
use crate::error::{Error, Result};
use crate::nn::{Activation, DenseLayer, DenseNet};
use crate::scalar::{format_exact, parse_exact, Scalar};

const FORMAT: &str = "cfnet-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub scalar: String,
    pub d: usize,
    pub k: usize,
    pub phi: Vec<LayerShape>,
    pub heads: Vec<Vec<LayerShape>>,
    pub seed: u64,
    /// Free-form training configuration.
    pub config: serde_json::Value,
    pub num_parameters: usize,
}

fn shapes<T: Scalar>(net: &DenseNet<T>) -> Vec<LayerShape> {
    net.layers()
        .iter()
        .map(|l| LayerShape {
            input: l.in_dim(),
            output: l.out_dim(),
            activation: l.activation(),
        })
        .collect()
}

pub fn save_checkpoint<T: Scalar, C: Serialize>(net: &MultiHeadNet<T>, config: &C, seed: u64, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        format: FORMAT.into(),
        version: VERSION,
        scalar: T::NAME.into(),
        d: net.input_dim(),
        k: net.k(),
        phi: shapes(net.phi()),
        heads: net.heads().iter().map(shapes).collect(),
        seed,
        config: serde_json::to_value(config)?,
        num_parameters: net.num_parameters(),
    };
    let mut text = serde_json::to_string(&header)?;
    text.push('\n');
    for p in net.parameters() {
        text.push_str(&format_exact(p));
        text.push('\n');
    }
    crate::io::write_atomic(path, text.as_bytes())
}

fn build<T: Scalar>(shapes: &[LayerShape], seed: u64) -> Result<DenseNet<T>> {
    let layers = shapes
        .iter()
        .map(|s| DenseLayer::zeros(s.input, s.output, s.activation))
        .collect::<Result<Vec<_>>>()?;
    DenseNet::from_layers(layers, seed)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(MultiHeadNet<T>, CheckpointHeader)> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines();
    let first = lines.next().ok_or_else(|| Error::format(path, "empty checkpoint"))??;
    let header: CheckpointHeader = serde_json::from_str(&first)?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint {} v{}", header.format, header.version)));
    }
    let mut net = MultiHeadNet::from_parts(
        build(&header.phi, header.seed)?,
        header
            .heads
            .iter()
            .map(|h| build(h, header.seed))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let mut params = Vec::with_capacity(header.num_parameters);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        params.push(
            parse_exact::<T>(&line).ok_or_else(|| Error::format(path, format!("parameter {i}: cannot parse `{line}`")))?,
        );
    }
    if params.len() != net.num_parameters() || params.len() != header.num_parameters {
        return Err(Error::format(
            path,
            format!("expected {} parameters, found {}", net.num_parameters(), params.len()),
        ));
    }
    net.set_parameters(&params)?;
    Ok((net, header))
}
