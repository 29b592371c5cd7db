//! Checkpoints: a flat little-endian `f64` tensor dump plus a CSV manifest
//! `group,name,shape,offset` (offset counted in values).

use std::path::{Path, PathBuf};

use super::ParamSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

/// Serialise to `(binary, manifest)` byte buffers.
pub fn write_checkpoint<S: Scalar, P: ParamSet<S>>(model: &P) -> (Vec<u8>, String) {
    let mut bin = Vec::new();
    let mut manifest = String::from("group,name,shape,offset\n");
    let mut offset = 0;
    for t in model.tensors() {
        manifest += &format!("{},{},{},{}\n", t.group, t.name, shape_str(&t.shape), offset);
        for v in t.data {
            bin.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        offset += t.data.len();
    }
    (bin, manifest)
}

fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut lines = text.lines();
    if lines.next() != Some("group,name,shape,offset") {
        return Err(Error::Checkpoint("manifest header mismatch".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Parse {
                line: i + 2,
                message: format!("malformed manifest line '{l}'"),
            };
            if f.len() != 4 {
                return Err(bad());
            }
            let shape = f[2]
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            Ok(ManifestEntry {
                group: f[0].to_string(),
                name: f[1].to_string(),
                shape,
                offset: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Fill `model` (whose shapes act as the template) from checkpoint buffers.
pub fn read_checkpoint<S: Scalar, P: ParamSet<S>>(model: &mut P, bin: &[u8], manifest: &str) -> Result<()> {
    let entries = parse_manifest(manifest)?;
    let expected: Vec<(String, String, Vec<usize>)> = model
        .tensors()
        .iter()
        .map(|t| (t.group.to_string(), t.name.to_string(), t.shape.clone()))
        .collect();
    if entries.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, model has {}",
            entries.len(),
            expected.len()
        )));
    }
    if !bin.len().is_multiple_of(8) {
        return Err(Error::Checkpoint("binary length is not a multiple of 8".into()));
    }
    let values: Vec<f64> = bin
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    for (t, (e, (g, n, shape))) in model.tensors_mut().into_iter().zip(entries.iter().zip(&expected)) {
        if &e.group != g || &e.name != n || &e.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor mismatch: manifest {}/{} {:?}, model {g}/{n} {shape:?}",
                e.group, e.name, e.shape
            )));
        }
        let end = e.offset + t.data.len();
        if end > values.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {g}/{n} runs past the end of the data"
            )));
        }
        for (dst, src) in t.data.iter_mut().zip(&values[e.offset..end]) {
            *dst = S::of(*src);
        }
    }
    Ok(())
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    let mut bin = stem.as_os_str().to_owned();
    bin.push(".bin");
    let mut man = stem.as_os_str().to_owned();
    man.push(".manifest.csv");
    (bin.into(), man.into())
}

/// Write `<stem>.bin` and `<stem>.manifest.csv`.
pub fn save_checkpoint<S: Scalar, P: ParamSet<S>>(model: &P, stem: impl AsRef<Path>) -> Result<()> {
    let (bin_path, man_path) = paths(stem.as_ref());
    let (bin, manifest) = write_checkpoint(model);
    std::fs::write(&bin_path, bin).map_err(|e| Error::io(&bin_path, e))?;
    std::fs::write(&man_path, manifest).map_err(|e| Error::io(&man_path, e))?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar, P: ParamSet<S>>(model: &mut P, stem: impl AsRef<Path>) -> Result<()> {
    let (bin_path, man_path) = paths(stem.as_ref());
    let bin = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let manifest = std::fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
    read_checkpoint(model, &bin, &manifest)
}
