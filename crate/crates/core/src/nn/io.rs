//! `DASM` model files (little-endian):
//!
//! ```text
//! "DASM" | version u16 | head u8 | layer count u16 | layers...
//! layer: type u8 | hyperparameters u32... | weights f64... | biases f64...
//! ```
//!
//! The first record is always type 0 (input: c, h, w, feature layer index
//! or `u32::MAX`) and is included in the layer count. Parameter blob sizes
//! follow from the chained shapes. Dropout rates are stored in parts per
//! million.

use std::path::Path;

use super::{Head, LayerSpec, Network, Shape};
use crate::binio::{read_file, write_atomic, Reader};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"DASM";
pub const MODEL_VERSION: u16 = 1;
const NO_FEATURE: u32 = u32::MAX;

fn type_code(spec: &LayerSpec) -> u8 {
    match spec {
        LayerSpec::Conv1D { .. } => 1,
        LayerSpec::Conv2D { .. } => 2,
        LayerSpec::MaxPool1D { .. } => 3,
        LayerSpec::MaxPool2D { .. } => 4,
        LayerSpec::ReLU => 5,
        LayerSpec::Dropout { .. } => 6,
        LayerSpec::Flatten => 7,
        LayerSpec::Dense { .. } => 8,
    }
}

fn hyperparameters(spec: &LayerSpec) -> Vec<u32> {
    let v = |x: usize| x as u32;
    match *spec {
        LayerSpec::Conv1D {
            out_channels,
            kernel,
            stride,
        } => vec![v(out_channels), v(kernel), v(stride)],
        LayerSpec::Conv2D {
            out_channels,
            kernel,
            stride,
        } => vec![v(out_channels), v(kernel.0), v(kernel.1), v(stride.0), v(stride.1)],
        LayerSpec::MaxPool1D { width } => vec![v(width)],
        LayerSpec::MaxPool2D { size } => vec![v(size.0), v(size.1)],
        LayerSpec::Dropout { rate } => vec![(rate * 1e6).round() as u32],
        LayerSpec::Dense { out_units } => vec![v(out_units)],
        LayerSpec::ReLU | LayerSpec::Flatten => Vec::new(),
    }
}

fn read_spec(code: u8, r: &mut Reader<'_>) -> Result<LayerSpec> {
    let mut u = || r.u32().map(|x| x as usize);
    Ok(match code {
        1 => LayerSpec::Conv1D {
            out_channels: u()?,
            kernel: u()?,
            stride: u()?,
        },
        2 => LayerSpec::Conv2D {
            out_channels: u()?,
            kernel: (u()?, u()?),
            stride: (u()?, u()?),
        },
        3 => LayerSpec::MaxPool1D { width: u()? },
        4 => LayerSpec::MaxPool2D { size: (u()?, u()?) },
        5 => LayerSpec::ReLU,
        6 => LayerSpec::Dropout {
            rate: u()? as f64 / 1e6,
        },
        7 => LayerSpec::Flatten,
        8 => LayerSpec::Dense { out_units: u()? },
        c => return Err(Error::Corrupt(format!("unknown layer type {c}"))),
    })
}

impl Network {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.push(match self.head {
            Head::SvmLinear => 0,
            Head::Softmax => 1,
        });
        out.extend_from_slice(&((self.layers.len() + 1) as u16).to_le_bytes());
        out.push(0);
        let feature = self.feature_layer.map_or(NO_FEATURE, |f| f as u32);
        for x in [self.input.c as u32, self.input.h as u32, self.input.w as u32, feature] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for layer in &self.layers {
            out.push(type_code(&layer.spec));
            for x in hyperparameters(&layer.spec) {
                out.extend_from_slice(&x.to_le_bytes());
            }
            for v in layer.weights.iter().chain(&layer.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "model");
        r.magic(MODEL_MAGIC)?;
        let version = r.u16()?;
        if version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion {
                format: "model",
                version,
            });
        }
        let head = match r.u8()? {
            0 => Head::SvmLinear,
            1 => Head::Softmax,
            h => return Err(Error::Corrupt(format!("unknown head code {h}"))),
        };
        let count = r.u16()? as usize;
        if count < 2 || r.u8()? != 0 {
            return Err(Error::Corrupt("model must start with an input record and hold a layer".into()));
        }
        let input = Shape::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let feature = r.u32()?;

        // Specs and parameter blobs interleave, so chain shapes while reading.
        let mut specs = Vec::with_capacity(count - 1);
        let mut blobs = Vec::with_capacity(count - 1);
        for _ in 1..count {
            let code = r.u8()?;
            let spec = read_spec(code, &mut r)?;
            specs.push(spec);
            let net = Network::with_zero_params(input, &specs, head)
                .map_err(|e| Error::Corrupt(e.to_string()))?;
            let last = net.layers.last().unwrap();
            let n = last.weights.len() + last.bias.len();
            let bytes = r.take(n * 8)?;
            blobs.push(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect::<Vec<f64>>(),
            );
        }
        if r.remaining() != 0 {
            return Err(Error::Corrupt(format!("{} trailing bytes", r.remaining())));
        }
        let mut net = Network::with_zero_params(input, &specs, head)?;
        for (layer, blob) in net.layers.iter_mut().zip(blobs) {
            let nw = layer.weights.len();
            layer.weights.copy_from_slice(&blob[..nw]);
            layer.bias.copy_from_slice(&blob[nw..]);
        }
        if let Some(v) = net
            .layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias))
            .find(|v| !v.is_finite())
        {
            return Err(Error::Corrupt(format!("non-finite parameter {v}")));
        }
        net.feature_layer = if feature == NO_FEATURE {
            None
        } else if (feature as usize) < net.layers.len() {
            Some(feature as usize)
        } else {
            return Err(Error::Corrupt(format!("feature layer {feature} out of range")));
        };
        Ok(net)
    }
}

pub fn save_model(path: &Path, net: &Network) -> Result<()> {
    write_atomic(path, &net.to_bytes())
}

pub fn load_model(path: &Path) -> Result<Network> {
    Network::from_bytes(&read_file(path)?)
}
