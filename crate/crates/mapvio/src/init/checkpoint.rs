//! Binary model checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic   4 bytes  "MVIO"
//! version u32      currently 1
//! metric  3 f64    the metric parameter vector
//! layers  u32      layer count
//! per layer:
//!   rows u32, cols u32, activation u8 (0 relu, 1 linear),
//!   weights rows*cols f64 row-major, bias rows f64
//! ```
//!
//! Readers reject wrong magic, other versions, unknown activation tags,
//! width mismatches between consecutive layers, and trailing garbage, so a
//! checkpoint either loads exactly or not at all.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};

use crate::error::{Error, Result};
use crate::se3::MetricParam;

use super::mlp::{Activation, Layer, MlpModel};

const MAGIC: &[u8; 4] = b"MVIO";
const VERSION: u32 = 1;

pub fn save_checkpoint(model: &MlpModel, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let a = model.metric.a();
    for v in [a.x, a.y, a.z] {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&(model.layers.len() as u32).to_le_bytes())?;
    for layer in &model.layers {
        out.write_all(&(layer.weights.nrows() as u32).to_le_bytes())?;
        out.write_all(&(layer.weights.ncols() as u32).to_le_bytes())?;
        let tag: u8 = match layer.activation {
            Activation::Relu => 0,
            Activation::Linear => 1,
        };
        out.write_all(&[tag])?;
        for r in 0..layer.weights.nrows() {
            for c in 0..layer.weights.ncols() {
                out.write_all(&layer.weights[(r, c)].to_le_bytes())?;
            }
        }
        for v in layer.bias.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn load_checkpoint(path: &Path) -> Result<MlpModel> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = read_u32(&mut file)?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let a = Vector3::new(read_f64(&mut file)?, read_f64(&mut file)?, read_f64(&mut file)?);
    let metric = MetricParam::new(a)?;
    let n_layers = read_u32(&mut file)? as usize;
    if n_layers == 0 {
        return Err(Error::format("checkpoint", "zero layers"));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for li in 0..n_layers {
        let rows = read_u32(&mut file)? as usize;
        let cols = read_u32(&mut file)? as usize;
        if rows == 0 || cols == 0 || rows > 1 << 20 || cols > 1 << 20 {
            return Err(Error::format(
                "checkpoint",
                format!("layer {li}: implausible shape {rows}x{cols}"),
            ));
        }
        let mut tag = [0u8; 1];
        file.read_exact(&mut tag)?;
        let activation = match tag[0] {
            0 => Activation::Relu,
            1 => Activation::Linear,
            t => {
                return Err(Error::format(
                    "checkpoint",
                    format!("layer {li}: unknown activation tag {t}"),
                ))
            }
        };
        if let Some(prev) = layers.last() {
            let prev: &Layer = prev;
            if prev.weights.nrows() != cols {
                return Err(Error::format(
                    "checkpoint",
                    format!(
                        "layer {li}: input width {cols} does not match previous output {}",
                        prev.weights.nrows()
                    ),
                ));
            }
        }
        let mut weights = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                weights[(r, c)] = read_f64(&mut file)?;
            }
        }
        let mut bias = DVector::zeros(rows);
        for v in bias.iter_mut() {
            *v = read_f64(&mut file)?;
        }
        layers.push(Layer {
            weights,
            bias,
            activation,
        });
    }
    if layers.last().unwrap().weights.nrows() != 6 {
        return Err(Error::format("checkpoint", "output width is not 6"));
    }
    let mut rest = [0u8; 1];
    if file.read(&mut rest)? != 0 {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    Ok(MlpModel { layers, metric })
}
