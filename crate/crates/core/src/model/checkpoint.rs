//! Model checkpoint container.
//!
//! ```text
//! magic     4 bytes   "TFCK"
//! version   u32 LE
//! hlen      u64 LE    length of the JSON header
//! header    hlen bytes of UTF-8 JSON:
//!           { version, dtype, config, norm, codebook, tensors: [{name, shape}] }
//! data      every tensor in header order, row-major, little-endian `dtype`
//! ```
//!
//! Trained models are written as `f32`. Reading into another precision
//! converts through `f64`, which is exact in both directions for `f32` data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Forecaster, ModelConfig, ModelParams, Transformer};
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::quantizer::Codebook;
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub(crate) struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    config: ModelConfig,
    norm: NormStats,
    codebook: Option<Codebook>,
}

#[derive(Serialize, Deserialize)]
struct Envelope<H> {
    version: u32,
    dtype: String,
    #[serde(flatten)]
    header: H,
    tensors: Vec<TensorEntry>,
}

/// Write a header and named tensors as one container.
pub(crate) fn write_container<T: Scalar, H: Serialize, W: Write>(
    out: &mut W,
    magic: &[u8; 4],
    header: &H,
    tensors: &[(String, &Tensor<T>)],
) -> Result<()> {
    let env = Envelope {
        version: CHECKPOINT_VERSION,
        dtype: T::DTYPE.to_string(),
        header,
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&env)?;
    out.write_all(magic)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    let mut buf = Vec::new();
    for (_, t) in tensors {
        buf.clear();
        buf.reserve(t.numel() * T::BYTES);
        for &v in t.data() {
            v.write_le(&mut buf);
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn read_values<T: Scalar, R: Read>(input: &mut R, dtype: &str, n: usize) -> Result<Vec<T>> {
    let width = match dtype {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::Format(format!("unknown dtype `{other}`"))),
    };
    let mut bytes = vec![0u8; n * width];
    input
        .read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("truncated tensor data: {e}")))?;
    Ok(bytes
        .chunks(width)
        .map(|c| match width {
            4 => T::from_f64(f32::read_le(c) as f64),
            _ => T::from_f64(f64::read_le(c)),
        })
        .collect())
}

/// Inverse of [`write_container`].
pub(crate) fn read_container<T: Scalar, H: DeserializeOwned, R: Read>(
    input: &mut R,
    magic: &[u8; 4],
) -> Result<(H, Vec<(String, Tensor<T>)>)> {
    let mut fixed = [0u8; 16];
    input
        .read_exact(&mut fixed)
        .map_err(|_| Error::Format("file too short for a checkpoint header".into()))?;
    if &fixed[..4] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&fixed[..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(fixed[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(fixed[8..16].try_into().expect("8 bytes")) as usize;
    let mut json = vec![0u8; hlen];
    input
        .read_exact(&mut json)
        .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    let env: Envelope<H> = serde_json::from_slice(&json)?;
    let mut tensors = Vec::with_capacity(env.tensors.len());
    for e in env.tensors {
        let n = e.shape.iter().product();
        let data = read_values(input, &env.dtype, n)?;
        tensors.push((e.name, Tensor::new(e.shape, data)?));
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after tensor data".into()));
    }
    Ok((env.header, tensors))
}

const MAGIC: &[u8; 4] = b"TFCK";

pub fn write_forecaster<T: Scalar, W: Write>(f: &Forecaster<T>, out: &mut W) -> Result<()> {
    let header = ModelHeader {
        config: f.model.config.clone(),
        norm: f.norm,
        codebook: f.codebook.clone(),
    };
    let tensors: Vec<(String, &Tensor<T>)> = f.model.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
    write_container(out, MAGIC, &header, &tensors)
}

pub fn read_forecaster<T: Scalar, R: Read>(input: &mut R) -> Result<Forecaster<T>> {
    let (h, tensors): (ModelHeader, _) = read_container(input, MAGIC)?;
    let params = ModelParams::from_pairs(tensors)?;
    let model = Transformer::from_params(h.config, params)?;
    Forecaster::new(model, h.norm, h.codebook)
}

pub fn save_forecaster<T: Scalar>(f: &Forecaster<T>, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).map_err(Error::file(path))?);
    write_forecaster(f, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_forecaster<T: Scalar>(path: &Path) -> Result<Forecaster<T>> {
    read_forecaster(&mut BufReader::new(File::open(path).map_err(Error::file(path))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::model::Mode;

    fn norm() -> NormStats {
        NormStats {
            mean: [0.1, -0.2],
            std: [0.3, 0.7],
            split: Split::Train,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let cfg = ModelConfig::sized(Mode::RegressionTf, 8, 1, 2, 16, 0);
        let f = Forecaster::new(Transformer::<f32>::new(cfg, 3).unwrap(), norm(), None).unwrap();
        let mut buf = Vec::new();
        write_forecaster(&f, &mut buf).unwrap();
        let g: Forecaster<f32> = read_forecaster(&mut buf.as_slice()).unwrap();
        assert_eq!(g.model.params, f.model.params);
        assert_eq!(g.model.config, f.model.config);
        assert_eq!(g.norm, f.norm);
        let mut again = Vec::new();
        write_forecaster(&g, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn codebook_travels_with_the_model() {
        let cb = Codebook {
            centroids: vec![[0.0, 0.1], [0.3, 0.0], [-0.1, 0.2]],
            seed: 9,
        };
        let cfg = ModelConfig::sized(Mode::ClassificationTfq, 8, 1, 2, 16, 3);
        let f = Forecaster::new(Transformer::<f32>::new(cfg, 3).unwrap(), norm(), Some(cb.clone())).unwrap();
        let mut buf = Vec::new();
        write_forecaster(&f, &mut buf).unwrap();
        let g: Forecaster<f64> = read_forecaster(&mut buf.as_slice()).unwrap();
        assert_eq!(g.codebook, Some(cb));
        assert_eq!(g.model.params.cast::<f32>(), f.model.params);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let cfg = ModelConfig::sized(Mode::RegressionMaskedEncoder, 8, 1, 2, 16, 0);
        let f = Forecaster::new(Transformer::<f32>::new(cfg, 3).unwrap(), norm(), None).unwrap();
        let mut buf = Vec::new();
        write_forecaster(&f, &mut buf).unwrap();
        let short = &buf[..buf.len() - 1];
        assert!(matches!(read_forecaster::<f32, _>(&mut &short[..]), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_forecaster::<f32, _>(&mut bad.as_slice()), Err(Error::Format(_))));
        buf.push(0);
        assert!(read_forecaster::<f32, _>(&mut buf.as_slice()).is_err());
    }
}
