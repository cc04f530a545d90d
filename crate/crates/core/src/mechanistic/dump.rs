//! `ADMP` activation dumps: magic, u32 version, model id, u32 layer count,
//! then per layer its id, u64 N, u64 D and N·D little-endian f32 values.
//! Strings are a u32 byte length followed by UTF-8.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use volab_tensor::{Element, Tape, Tensor};

use crate::error::{invalid, io_err, Error, Result};
use crate::models::{AttentionRecord, ForwardOptions, ModelInstance};

const MAGIC: &[u8; 4] = b"ADMP";
const VERSION: u32 = 1;

/// Activations of one layer over `n` samples, flattened to `d` features.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationDump {
    pub model: String,
    pub layer: String,
    pub n: usize,
    pub d: usize,
    /// Row-major `n × d`.
    pub data: Vec<f64>,
}

impl ActivationDump {
    pub fn new(model: &str, layer: &str, n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::Dimension(format!("{} values for {n} × {d} activations", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite activation in {model}/{layer}")));
        }
        Ok(ActivationDump {
            model: model.into(),
            layer: layer.into(),
            n,
            d,
            data,
        })
    }

    /// Every column takes a single value.
    pub fn is_constant(&self) -> bool {
        self.data.chunks(self.d.max(1)).all(|row| row == &self.data[..self.d])
    }
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
    if len > 1 << 16 {
        return Err(Error::Format(format!("dump id of {len} bytes")));
    }
    let mut buf = vec![0; len];
    r.read_exact(&mut buf).map_err(bad)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

fn bad(e: std::io::Error) -> Error {
    Error::Format(format!("activation dump: {e}"))
}

/// Write dumps of a single model.
pub fn write_dumps_to(mut w: impl Write, dumps: &[ActivationDump]) -> Result<()> {
    let model = dumps.first().map_or("", |d| d.model.as_str());
    if dumps.iter().any(|d| d.model != model) {
        return Err(invalid("one dump file holds one model"));
    }
    let io = |e| Error::Io { path: "activation dump".into(), source: e };
    w.write_all(MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
    write_str(&mut w, model).map_err(io)?;
    w.write_u32::<LittleEndian>(dumps.len() as u32).map_err(io)?;
    for d in dumps {
        write_str(&mut w, &d.layer).map_err(io)?;
        w.write_u64::<LittleEndian>(d.n as u64).map_err(io)?;
        w.write_u64::<LittleEndian>(d.d as u64).map_err(io)?;
        let mut buf = Vec::with_capacity(d.data.len() * 4);
        for &v in &d.data {
            buf.write_f32::<LittleEndian>(v as f32).map_err(io)?;
        }
        w.write_all(&buf).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_dumps_from(mut r: impl Read) -> Result<Vec<ActivationDump>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(bad)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad dump magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(bad)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dump version {version}")));
    }
    let model = read_str(&mut r)?;
    let layers = r.read_u32::<LittleEndian>().map_err(bad)?;
    let mut out = Vec::with_capacity(layers as usize);
    for _ in 0..layers {
        let layer = read_str(&mut r)?;
        let n = r.read_u64::<LittleEndian>().map_err(bad)? as usize;
        let d = r.read_u64::<LittleEndian>().map_err(bad)? as usize;
        let len = n.checked_mul(d).filter(|&l| l <= 1 << 32).ok_or_else(|| Error::Format(format!("dump layer {n} × {d}")))?;
        let mut data = vec![0f32; len];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(bad)?;
        out.push(ActivationDump::new(&model, &layer, n, d, data.into_iter().map(f64::from).collect())?);
    }
    Ok(out)
}

pub fn write_dumps(path: &Path, dumps: &[ActivationDump]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(io_err(path))?;
    write_dumps_to(BufWriter::new(f), dumps)
}

pub fn read_dumps(path: &Path) -> Result<Vec<ActivationDump>> {
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    read_dumps_from(BufReader::new(f))
}

/// Flattened stage activations over every sample of `batches`, in order,
/// labelled `model`.
pub fn collect_activations<E: Element>(model: &ModelInstance<E>, id: &str, batches: &[Tensor<E>]) -> Result<Vec<ActivationDump>> {
    let names = model.stage_names();
    let mut rows: Vec<(usize, Vec<f64>)> = vec![(0, Vec::new()); names.len()];
    let mut n = 0;
    for batch in batches {
        let tape = Tape::new();
        let vars = model.bind(&tape, false);
        let x = tape.constant(batch.clone());
        let out = model.forward(&vars, x, &ForwardOptions::eval())?;
        n += batch.shape()[0];
        for ((d, data), name) in rows.iter_mut().zip(&names) {
            let stage = out
                .stages
                .iter()
                .find(|s| &s.name == name)
                .ok_or_else(|| invalid(format!("stage {name} not emitted")))?;
            let v = stage.flattened()?.value();
            *d = v.shape()[1];
            data.extend(v.data().iter().map(|x| x.as_f64()));
        }
    }
    names
        .iter()
        .zip(rows)
        .map(|(name, (d, data))| ActivationDump::new(id, name, n, d, data))
        .collect()
}

/// One row per token of an attention layer; class tokens have empty
/// coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidRow {
    pub layer: String,
    pub token: usize,
    pub z: Option<f64>,
    pub y: Option<f64>,
    pub x: Option<f64>,
}

pub const CENTROID_HEADER: &str = "layer,token,z,y,x";

/// Token centroids of each distinct attention layer.
pub fn write_centroids(path: &Path, records: &[AttentionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut seen = std::collections::BTreeSet::new();
    for r in records {
        if !seen.insert(r.layer.as_str()) {
            continue;
        }
        for (token, c) in r.centroids.iter().enumerate() {
            w.serialize(CentroidRow {
                layer: r.layer.clone(),
                token,
                z: c.map(|c| c[0]),
                y: c.map(|c| c[1]),
                x: c.map(|c| c[2]),
            })?;
        }
    }
    w.flush().map_err(io_err(path))
}

pub fn read_centroids(path: &Path) -> Result<Vec<CentroidRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
