use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dump::ActivationDump;
use crate::error::{invalid, io_err, Error, Result};

/// Column-centered copy of an `n × d` row-major matrix, in f64.
fn centered(x: &ActivationDump) -> Vec<f64> {
    let (n, d) = (x.n, x.d);
    let mut out = x.data.clone();
    for c in 0..d {
        let mean = (0..n).map(|r| out[r * d + c]).sum::<f64>() / n as f64;
        for r in 0..n {
            out[r * d + c] -= mean;
        }
    }
    out
}

/// `X Xᵀ` of a row-major `n × d` matrix.
fn gram(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        for j in 0..=i {
            let v: f64 = xi.iter().zip(&x[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum();
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    k
}

/// Linear CKA of column-centered activations, `‖XᵀY‖²_F / (‖XᵀX‖_F ‖YᵀY‖_F)`,
/// evaluated through the `n × n` Gram matrices so memory is independent of
/// the feature widths.
pub fn cka_pair(x: &ActivationDump, y: &ActivationDump) -> Result<f64> {
    if x.n != y.n {
        return Err(Error::Dimension(format!("CKA over {} and {} samples", x.n, y.n)));
    }
    if x.n < 2 {
        return Err(invalid("CKA needs at least 2 samples"));
    }
    let n = x.n;
    let kx = gram(&centered(x), n, x.d);
    let ky = gram(&centered(y), n, y.d);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let (xx, yy) = (dot(&kx, &kx), dot(&ky, &ky));
    for (dump, v) in [(x, xx), (y, yy)] {
        if v == 0.0 || dump.is_constant() {
            return Err(Error::Degenerate(format!("{}/{} is constant across samples", dump.model, dump.layer)));
        }
    }
    Ok((dot(&kx, &ky) / (xx.sqrt() * yy.sqrt())).clamp(0.0, 1.0))
}

/// How dumps are labelled in a matrix: by layer within one model, or by
/// model when comparing one tap across models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CkaMode {
    IntraModel,
    InterModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// Row-major `rows.len() × cols.len()`.
    pub values: Vec<f64>,
}

impl CkaMatrix {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols.len() + c]
    }

    /// Elementwise mean of matrices over the same ids (e.g. one per fold).
    pub fn average(mats: &[CkaMatrix]) -> Result<CkaMatrix> {
        let first = mats.first().ok_or_else(|| invalid("no matrices to average"))?;
        if mats.iter().any(|m| m.rows != first.rows || m.cols != first.cols) {
            return Err(invalid("matrices to average have different ids"));
        }
        let mut values = vec![0.0; first.values.len()];
        for m in mats {
            for (v, x) in values.iter_mut().zip(&m.values) {
                *v += x;
            }
        }
        values.iter_mut().for_each(|v| *v /= mats.len() as f64);
        Ok(CkaMatrix {
            rows: first.rows.clone(),
            cols: first.cols.clone(),
            values,
        })
    }

    /// `id,<col ids>` header, then one line per row id.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(io_err(path))?;
        self.write_csv_to(f)
    }

    pub fn read_csv(path: &Path) -> Result<CkaMatrix> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        if header.get(0) != Some("id") {
            return Err(Error::Format(format!("{}: CKA header must start with id", path.display())));
        }
        let cols: Vec<String> = header.iter().skip(1).map(String::from).collect();
        let mut rows = Vec::new();
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            rows.push(rec[0].to_string());
            for v in rec.iter().skip(1) {
                values.push(v.parse().map_err(|_| Error::Format(format!("{}: bad value {v:?}", path.display())))?);
            }
        }
        Ok(CkaMatrix { rows, cols, values })
    }

    pub fn write_csv_to(&self, w: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(std::iter::once("id").chain(self.cols.iter().map(String::as_str)))?;
        for (r, id) in self.rows.iter().enumerate() {
            let vals = (0..self.cols.len()).map(|c| self.get(r, c).to_string());
            w.write_record(std::iter::once(id.clone()).chain(vals))?;
        }
        w.flush().map_err(io_err(Path::new("CKA matrix")))
    }
}

fn label(mode: CkaMode, d: &ActivationDump) -> String {
    match mode {
        CkaMode::IntraModel => d.layer.clone(),
        CkaMode::InterModel => d.model.clone(),
    }
}

fn labels(mode: CkaMode, dumps: &[ActivationDump]) -> Result<Vec<String>> {
    let ids: Vec<String> = dumps.iter().map(|d| label(mode, d)).collect();
    if mode == CkaMode::IntraModel && dumps.iter().any(|d| d.model != dumps[0].model) {
        return Err(invalid("intra-model CKA over dumps of several models"));
    }
    let mut sorted = ids.clone();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != ids.len() {
        return Err(invalid("duplicate ids in CKA matrix"));
    }
    Ok(ids)
}

/// Pairwise CKA of every row dump against every column dump.
pub fn cka_cross(rows: &[ActivationDump], cols: &[ActivationDump], mode: CkaMode) -> Result<CkaMatrix> {
    let (rid, cid) = (labels(mode, rows)?, labels(mode, cols)?);
    let mut values = Vec::with_capacity(rows.len() * cols.len());
    for x in rows {
        for y in cols {
            values.push(cka_pair(x, y)?);
        }
    }
    Ok(CkaMatrix { rows: rid, cols: cid, values })
}

/// Square CKA matrix over one set of dumps; each pair is computed once and
/// mirrored, so the result is exactly symmetric.
pub fn cka_matrix(dumps: &[ActivationDump], mode: CkaMode) -> Result<CkaMatrix> {
    let ids = labels(mode, dumps)?;
    let m = dumps.len();
    if let Some(d) = dumps.iter().find(|d| d.n != dumps[0].n) {
        return Err(Error::Dimension(format!(
            "{}/{} has {} samples, expected {}",
            d.model, d.layer, d.n, dumps[0].n
        )));
    }
    let mut values = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..=i {
            let v = cka_pair(&dumps[i], &dumps[j])?;
            values[i * m + j] = v;
            values[j * m + i] = v;
        }
    }
    Ok(CkaMatrix {
        rows: ids.clone(),
        cols: ids,
        values,
    })
}
