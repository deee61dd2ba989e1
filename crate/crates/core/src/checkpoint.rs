//! Versioned single-file parameter checkpoints.
//!
//! Layout: magic `AVCK`, a little-endian u32 header length, a JSON header
//! `{version, config, arrays: [{name, len}, ...]}`, then the arrays'
//! values concatenated as little-endian f64 in header order. The `config`
//! field carries an arbitrary JSON document describing the network
//! (mode, channel plan, strides) so a loader can validate compatibility
//! before touching the weights.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayViewMutD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{HasParams, ParamVisitor, StateVisitor};

const MAGIC: &[u8; 4] = b"AVCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Writes named arrays with a JSON-serializable config document.
pub fn save_checkpoint<C: Serialize>(
    path: &Path,
    config: &C,
    arrays: &[(String, Vec<f64>)],
) -> Result<()> {
    let header = Header {
        version: VERSION,
        config: serde_json::to_value(config)?,
        arrays: arrays
            .iter()
            .map(|(name, data)| ArrayEntry { name: name.clone(), len: data.len() })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for (_, data) in arrays {
        for v in data {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Reads a checkpoint, returning the config document and named arrays.
pub fn load_checkpoint(path: &Path) -> Result<(serde_json::Value, Vec<(String, Vec<f64>)>)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|_| format_err(path, "file too short for magic"))?;
    if &magic != MAGIC {
        return Err(format_err(path, "bad magic, not a checkpoint"));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)
        .map_err(|_| format_err(path, "truncated header length"))?;
    let mut header_bytes = vec![0u8; u32::from_le_bytes(len_bytes) as usize];
    file.read_exact(&mut header_bytes)
        .map_err(|_| format_err(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| format_err(path, format!("bad header JSON: {e}")))?;
    if header.version != VERSION {
        return Err(format_err(
            path,
            format!("unsupported checkpoint version {}", header.version),
        ));
    }
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for entry in header.arrays {
        let mut bytes = vec![0u8; entry.len * 8];
        file.read_exact(&mut bytes)
            .map_err(|_| format_err(path, format!("truncated data for array {}", entry.name)))?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        arrays.push((entry.name, data));
    }
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing)? != 0 {
        return Err(format_err(path, "trailing bytes after arrays"));
    }
    Ok((header.config, arrays))
}

/// Copies all parameters and normalization state out of a network.
pub fn collect_arrays(model: &mut dyn HasParams) -> Vec<(String, Vec<f64>)> {
    struct P(Vec<(String, Vec<f64>)>);
    impl ParamVisitor for P {
        fn visit(&mut self, name: &str, value: ArrayViewMutD<'_, f64>, _grad: ArrayViewMutD<'_, f64>) {
            self.0.push((name.to_string(), value.iter().cloned().collect()));
        }
    }
    impl StateVisitor for P {
        fn visit(&mut self, name: &str, value: ArrayViewMutD<'_, f64>) {
            self.0.push((name.to_string(), value.iter().cloned().collect()));
        }
    }
    let mut p = P(Vec::new());
    model.visit_params("", &mut p);
    model.visit_state("", &mut p);
    p.0
}

/// Writes saved arrays back into a network, matching by name.
pub fn restore_arrays(model: &mut dyn HasParams, arrays: &[(String, Vec<f64>)]) -> Result<()> {
    use std::collections::HashMap;
    let map: HashMap<&str, &Vec<f64>> =
        arrays.iter().map(|(n, d)| (n.as_str(), d)).collect();
    struct R<'a> {
        map: HashMap<&'a str, &'a Vec<f64>>,
        seen: usize,
        error: Option<String>,
    }
    impl R<'_> {
        fn write(&mut self, name: &str, mut value: ArrayViewMutD<'_, f64>) {
            match self.map.get(name) {
                Some(data) if data.len() == value.len() => {
                    for (dst, src) in value.iter_mut().zip(data.iter()) {
                        *dst = *src;
                    }
                    self.seen += 1;
                }
                Some(data) => {
                    self.error.get_or_insert(format!(
                        "array {name} has {} values, network expects {}",
                        data.len(),
                        value.len()
                    ));
                }
                None => {
                    self.error
                        .get_or_insert(format!("checkpoint is missing array {name}"));
                }
            }
        }
    }
    impl ParamVisitor for R<'_> {
        fn visit(&mut self, name: &str, value: ArrayViewMutD<'_, f64>, _grad: ArrayViewMutD<'_, f64>) {
            self.write(name, value);
        }
    }
    impl StateVisitor for R<'_> {
        fn visit(&mut self, name: &str, value: ArrayViewMutD<'_, f64>) {
            self.write(name, value);
        }
    }
    let mut r = R { map, seen: 0, error: None };
    model.visit_params("", &mut r);
    model.visit_state("", &mut r);
    if let Some(e) = r.error {
        return Err(Error::invalid(e));
    }
    if r.seen != arrays.len() {
        return Err(Error::invalid(format!(
            "checkpoint has {} arrays, network consumed {}",
            arrays.len(),
            r.seen
        )));
    }
    Ok(())
}
