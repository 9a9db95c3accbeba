//! Tensor checkpoints: a `manifest.toml` listing `{name, shape, dtype, file}`
//! and one raw little-endian binary file per tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, rename = "tensor")]
    pub tensors: Vec<TensorEntry>,
}

fn file_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.bin")
}

pub fn save_tensors<T: Scalar>(dir: &Path, tensors: &BTreeMap<String, Tensor<T>>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut manifest = Manifest::default();
    let mut used = BTreeMap::new();
    for (name, t) in tensors {
        let mut file = file_name(name);
        // disambiguate names that sanitise to the same file
        let n = used.entry(file.clone()).or_insert(0usize);
        if *n > 0 {
            file = format!("{}_{}.bin", file.trim_end_matches(".bin"), n);
        }
        *n += 1;
        let mut bytes = Vec::with_capacity(t.len() * T::BYTES);
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        manifest.tensors.push(TensorEntry {
            name: name.clone(),
            shape: vec![t.rows(), t.cols()],
            dtype: T::DTYPE.to_string(),
            file,
        });
    }
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Checkpoint(format!("serialising manifest: {e}")))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_tensors<T: Scalar>(dir: &Path) -> Result<BTreeMap<String, Tensor<T>>> {
    let manifest = load_manifest(dir)?;
    let mut out = BTreeMap::new();
    for entry in manifest.tensors {
        if entry.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor {} has dtype {}, expected {}",
                entry.name,
                entry.dtype,
                T::DTYPE
            )));
        }
        let (rows, cols) = match entry.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has unsupported rank {}",
                    entry.name,
                    entry.shape.len()
                )))
            }
        };
        let path = dir.join(&entry.file);
        let bytes =
            fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if bytes.len() != rows * cols * T::BYTES {
            return Err(Error::Checkpoint(format!(
                "tensor {}: expected {} bytes, found {}",
                entry.name,
                rows * cols * T::BYTES,
                bytes.len()
            )));
        }
        let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        out.insert(entry.name, Tensor::from_vec(rows, cols, data));
    }
    Ok(out)
}
