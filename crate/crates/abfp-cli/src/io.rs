//! On-disk formats: model checkpoints (magic + JSON descriptor + raw
//! little-endian f32 payload), histogram JSON, and the report CSVs. Every
//! writer is deterministic so reruns produce byte-identical artifacts.

use std::fs;
use std::path::Path;

use abfp::error::{AbfpError, Result};
use abfp::hist::Histogram;
use abfp::nn::{Layer, ToyModel};
use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};

const MAGIC: &[u8; 4] = b"ABFP";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    /// element offset into the f32 payload
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    name: String,
    kind: String,
    stride: Option<(usize, usize)>,
    pad: Option<(usize, usize)>,
    params: Vec<ParamRecord>,
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    layers: Vec<LayerRecord>,
}

fn push_param(
    params: &mut Vec<ParamRecord>,
    payload: &mut Vec<f32>,
    name: &str,
    shape: Vec<usize>,
    values: impl Iterator<Item = f32>,
) {
    let offset = payload.len();
    payload.extend(values);
    params.push(ParamRecord {
        name: name.to_string(),
        shape,
        offset,
        len: payload.len() - offset,
    });
}

pub fn model_to_bytes(model: &ToyModel) -> Result<Vec<u8>> {
    let mut payload: Vec<f32> = Vec::new();
    let mut layers = Vec::with_capacity(model.layers.len());
    for (name, layer) in &model.layers {
        let mut rec = LayerRecord {
            name: name.clone(),
            kind: String::new(),
            stride: None,
            pad: None,
            params: Vec::new(),
        };
        match layer {
            Layer::Linear { w, b } => {
                rec.kind = "linear".into();
                push_param(
                    &mut rec.params,
                    &mut payload,
                    "w",
                    vec![w.nrows(), w.ncols()],
                    w.iter().copied(),
                );
                push_param(&mut rec.params, &mut payload, "b", vec![b.len()], b.iter().copied());
            }
            Layer::Conv2d { w, b, stride, pad } => {
                rec.kind = "conv2d".into();
                rec.stride = Some(*stride);
                rec.pad = Some(*pad);
                let d = w.dim();
                push_param(
                    &mut rec.params,
                    &mut payload,
                    "w",
                    vec![d.0, d.1, d.2, d.3],
                    w.iter().copied(),
                );
                push_param(&mut rec.params, &mut payload, "b", vec![b.len()], b.iter().copied());
            }
            Layer::Relu => rec.kind = "relu".into(),
            Layer::Flatten => rec.kind = "flatten".into(),
        }
        layers.push(rec);
    }
    let descriptor = serde_json::to_vec(&Descriptor { layers })?;
    let mut out = Vec::with_capacity(12 + descriptor.len() + payload.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(descriptor.len() as u32).to_le_bytes());
    out.extend_from_slice(&descriptor);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn bad(msg: impl Into<String>) -> AbfpError {
    AbfpError::Checkpoint(msg.into())
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ToyModel> {
    if bytes.len() < 12 {
        return Err(bad("file too short for a checkpoint header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic; not a model checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let dlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let rest = &bytes[12..];
    if rest.len() < dlen {
        return Err(bad("truncated descriptor"));
    }
    let descriptor: Descriptor = serde_json::from_slice(&rest[..dlen])?;
    let payload_bytes = &rest[dlen..];
    if payload_bytes.len() % 4 != 0 {
        return Err(bad("payload is not a whole number of f32 values"));
    }
    let payload: Vec<f32> = payload_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut expect_offset = 0usize;
    let take = |p: &ParamRecord, expect_offset: &mut usize| -> Result<Vec<f32>> {
        if p.offset != *expect_offset {
            return Err(bad(format!("parameter {} does not tile the payload", p.name)));
        }
        if p.shape.iter().product::<usize>() != p.len {
            return Err(bad(format!("parameter {} shape disagrees with its length", p.name)));
        }
        let end = p.offset + p.len;
        if end > payload.len() {
            return Err(bad("truncated payload"));
        }
        *expect_offset = end;
        Ok(payload[p.offset..end].to_vec())
    };

    let mut layers: Vec<(String, Layer)> = Vec::with_capacity(descriptor.layers.len());
    for rec in &descriptor.layers {
        let layer = match rec.kind.as_str() {
            "linear" => {
                let [pw, pb] = rec.params.as_slice() else {
                    return Err(bad("linear layer needs exactly w and b"));
                };
                let w = Array2::from_shape_vec(
                    (pw.shape[0], pw.shape[1]),
                    take(pw, &mut expect_offset)?,
                )
                .map_err(|e| bad(e.to_string()))?;
                let b = Array1::from_vec(take(pb, &mut expect_offset)?);
                Layer::Linear { w, b }
            }
            "conv2d" => {
                let [pw, pb] = rec.params.as_slice() else {
                    return Err(bad("conv layer needs exactly w and b"));
                };
                if pw.shape.len() != 4 {
                    return Err(bad("conv kernel must be 4-dimensional"));
                }
                let w = Array4::from_shape_vec(
                    (pw.shape[0], pw.shape[1], pw.shape[2], pw.shape[3]),
                    take(pw, &mut expect_offset)?,
                )
                .map_err(|e| bad(e.to_string()))?;
                let b = Array1::from_vec(take(pb, &mut expect_offset)?);
                Layer::Conv2d {
                    w,
                    b,
                    stride: rec.stride.ok_or_else(|| bad("conv layer missing stride"))?,
                    pad: rec.pad.ok_or_else(|| bad("conv layer missing pad"))?,
                }
            }
            "relu" => Layer::Relu,
            "flatten" => Layer::Flatten,
            other => return Err(bad(format!("unknown layer kind {other}"))),
        };
        layers.push((rec.name.clone(), layer));
    }
    if expect_offset != payload.len() {
        return Err(bad("payload has trailing bytes no parameter claims"));
    }
    Ok(ToyModel { layers })
}

pub fn save_model(model: &ToyModel, path: &Path) -> Result<()> {
    fs::write(path, model_to_bytes(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ToyModel> {
    model_from_bytes(&fs::read(path)?)
}

pub fn save_histogram(hist: &Histogram, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string(hist)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
pub fn load_histogram(path: &Path) -> Result<Histogram> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// A fixed-schema CSV written all at once; numbers use the shortest
/// round-trip decimal form, so output depends only on the values.
pub struct CsvReport {
    text: String,
    columns: usize,
}

impl CsvReport {
    pub fn new(header: &[&str]) -> CsvReport {
        CsvReport { text: format!("{}\n", header.join(",")), columns: header.len() }
    }

    pub fn row(&mut self, cells: &[String]) {
        assert_eq!(cells.len(), self.columns, "CSV row width");
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, &self.text)?;
        Ok(())
    }
}
