//! CSV persistence for [`VoxelDataset`].
//!
//! A file starts with `#` metadata lines, followed by a header row and one
//! row per voxel: ground-truth parameters then magnitudes.
//!
//! ```text
//! # qfit-dataset v1
//! # model_kind: adc
//! # b_values: 0,0.1111111111111111,…,1
//! # snr: 10
//! # sigma_true: 0.1
//! # sigma_estimated: 0.09987…      (or "none")
//! # seed: 42
//! # n_voxels: 1000
//! S0,D,M0,M1,…,M9
//! 1.0444444444444445,0.4,1.0512…,…
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so a reload is
//! bit-identical.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::sigmodels::{ModelKind, Protocol};
use crate::simulate::VoxelDataset;

const MAGIC: &str = "qfit-dataset v1";

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

pub fn write_dataset<W: Write>(ds: &VoxelDataset, mut out: W) -> Result<()> {
    writeln!(out, "# {MAGIC}")?;
    writeln!(out, "# model_kind: {}", ds.model_kind)?;
    writeln!(out, "# b_values: {}", join(ds.protocol.b_values()))?;
    writeln!(out, "# snr: {}", ds.snr)?;
    writeln!(out, "# sigma_true: {}", ds.sigma_true)?;
    match ds.sigma_estimated {
        Some(s) => writeln!(out, "# sigma_estimated: {s}")?,
        None => writeln!(out, "# sigma_estimated: none")?,
    }
    writeln!(out, "# seed: {}", ds.seed)?;
    writeln!(out, "# n_voxels: {}", ds.n_voxels())?;

    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ds.model_kind.param_names().iter().map(|s| s.to_string()).collect();
    header.extend((0..ds.protocol.len()).map(|i| format!("M{i}")));
    w.write_record(&header)?;
    let mut record = Vec::with_capacity(header.len());
    for (t, m) in ds.truth.rows().into_iter().zip(ds.signals.rows()) {
        record.clear();
        record.extend(t.iter().chain(m.iter()).map(|v| v.to_string()));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

fn parse<T: std::str::FromStr>(meta: &HashMap<String, String>, key: &str) -> Result<T> {
    let raw = meta
        .get(key)
        .ok_or_else(|| Error::Format(format!("missing '{key}' metadata")))?;
    raw.parse()
        .map_err(|_| Error::Format(format!("bad value for '{key}': {raw}")))
}

pub fn read_dataset<R: Read>(input: R) -> Result<VoxelDataset> {
    let mut reader = BufReader::new(input);
    let mut meta = HashMap::new();
    let mut line = String::new();
    let mut first = true;
    // Metadata block: every line up to the CSV header starts with '#'.
    let header_line = loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Format("dataset has no header row".into()));
        }
        let trimmed = line.trim_end();
        match trimmed.strip_prefix('#') {
            Some(body) => {
                let body = body.trim();
                if first {
                    if body != MAGIC {
                        return Err(Error::Format(format!("not a {MAGIC} file")));
                    }
                    first = false;
                } else if let Some((k, v)) = body.split_once(':') {
                    meta.insert(k.trim().to_string(), v.trim().to_string());
                }
            }
            None => break trimmed.to_string(),
        }
    };
    if first {
        return Err(Error::Format(format!("not a {MAGIC} file")));
    }

    let model_kind: ModelKind = parse(&meta, "model_kind")?;
    let b_values = meta
        .get("b_values")
        .ok_or_else(|| Error::Format("missing 'b_values' metadata".into()))?
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Format(format!("bad b-value: {e}")))?;
    let protocol = Protocol::new(model_kind, b_values)?;
    let snr: f64 = parse(&meta, "snr")?;
    let sigma_true: f64 = parse(&meta, "sigma_true")?;
    let sigma_estimated = match meta.get("sigma_estimated").map(String::as_str) {
        None | Some("none") => None,
        Some(_) => Some(parse::<f64>(&meta, "sigma_estimated")?),
    };
    let seed: u64 = parse(&meta, "seed")?;
    let n_voxels: usize = parse(&meta, "n_voxels")?;

    let (p, nz) = (model_kind.n_params(), protocol.len());
    let n_cols = header_line.split(',').count();
    if n_cols != p + nz {
        return Err(Error::Format(format!(
            "expected {} columns, header has {n_cols}",
            p + nz
        )));
    }
    let mut truth = Vec::with_capacity(n_voxels * p);
    let mut signals = Vec::with_capacity(n_voxels * nz);
    let mut rows = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut count = 0;
    for rec in rows.records() {
        let rec = rec?;
        if rec.len() != p + nz {
            return Err(Error::Format(format!("row {count} has {} fields", rec.len())));
        }
        for (k, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Format(format!("row {count}: bad number '{field}'")))?;
            if k < p {
                truth.push(v);
            } else {
                signals.push(v);
            }
        }
        count += 1;
    }
    if count != n_voxels {
        return Err(Error::Format(format!(
            "header announces {n_voxels} voxels, file has {count}"
        )));
    }
    let truth = Array2::from_shape_vec((count, p), truth).map_err(|e| Error::Shape(e.to_string()))?;
    let signals = Array2::from_shape_vec((count, nz), signals).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(VoxelDataset {
        model_kind,
        protocol,
        signals,
        truth,
        snr,
        sigma_true,
        sigma_estimated,
        seed,
    })
}

impl VoxelDataset {
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        write_dataset(self, std::io::BufWriter::new(file))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        read_dataset(std::fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::make_dataset;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn round_trip_is_bit_identical(seed in any::<u64>(), snr in 2.0f64..50.0, ivim in any::<bool>()) {
            let kind = if ivim { ModelKind::Ivim } else { ModelKind::Adc };
            let mut ds = make_dataset(kind, snr, 37, &kind.default_protocol(), seed).unwrap();
            if seed % 2 == 0 {
                ds.estimate_sigma_from_background(100, seed).unwrap();
            }
            let mut buf = Vec::new();
            write_dataset(&ds, &mut buf).unwrap();
            let back = read_dataset(buf.as_slice()).unwrap();
            prop_assert_eq!(back, ds);
        }
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        assert!(read_dataset("a,b\n1,2\n".as_bytes()).is_err());
        let ds = make_dataset(ModelKind::Adc, 10.0, 4, &ModelKind::Adc.default_protocol(), 1).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let truncated: String = text.lines().take(text.lines().count() - 1).map(|l| format!("{l}\n")).collect();
        assert!(read_dataset(truncated.as_bytes()).is_err());
    }
}
