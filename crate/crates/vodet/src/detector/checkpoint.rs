//! Checkpoints: one flat binary of little-endian `f64` parameter data in
//! canonical order, next to a plain-text manifest of `name shape offset`
//! lines (shape dims comma-separated, offset in bytes into the binary).

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::params::ParamStore;

pub fn manifest_path(bin_path: &Path) -> PathBuf {
    bin_path.with_extension("manifest")
}

pub fn save_checkpoint(store: &ParamStore, bin_path: &Path) -> Result<()> {
    if let Some(parent) = bin_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut bin = std::fs::File::create(bin_path)?;
    let mut manifest = String::new();
    let mut offset = 0usize;
    for (name, value) in store.iter() {
        let dims: Vec<String> = value.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{name} {} {offset}\n", dims.join(",")));
        let mut buf = Vec::with_capacity(value.len() * 8);
        for v in value.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        bin.write_all(&buf)?;
        offset += buf.len();
    }
    std::fs::write(manifest_path(bin_path), manifest)?;
    Ok(())
}

/// Load a checkpoint into an existing store. Every manifest entry must name
/// a known parameter with the model's exact shape, and every model
/// parameter must be present.
pub fn load_checkpoint(store: &mut ParamStore, bin_path: &Path) -> Result<()> {
    let manifest = std::fs::read_to_string(manifest_path(bin_path))?;
    let mut bin = Vec::new();
    std::fs::File::open(bin_path)?.read_to_end(&mut bin)?;

    let mut seen = 0usize;
    for line in manifest.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(name), Some(shape_s), Some(offset_s)) =
            (parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::Checkpoint {
                param: line.to_string(),
                message: "malformed manifest line".into(),
            });
        };
        let shape: Vec<usize> = shape_s
            .split(',')
            .map(|d| {
                d.parse().map_err(|_| Error::Checkpoint {
                    param: name.to_string(),
                    message: format!("bad shape component {d:?}"),
                })
            })
            .collect::<Result<_>>()?;
        let offset: usize = offset_s.parse().map_err(|_| Error::Checkpoint {
            param: name.to_string(),
            message: format!("bad offset {offset_s:?}"),
        })?;
        let count: usize = shape.iter().product();
        let end = offset + count * 8;
        if end > bin.len() {
            return Err(Error::Checkpoint {
                param: name.to_string(),
                message: format!("binary ends at {} but entry needs {end}", bin.len()),
            });
        }
        let data: Vec<f64> = (0..count)
            .map(|i| {
                let o = offset + i * 8;
                f64::from_le_bytes(bin[o..o + 8].try_into().unwrap())
            })
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| Error::Checkpoint {
            param: name.to_string(),
            message: e.to_string(),
        })?;
        store.set(name, arr)?;
        seen += 1;
    }
    if seen != store.len() {
        return Err(Error::Checkpoint {
            param: "<manifest>".to_string(),
            message: format!("{seen} parameters in manifest, model has {}", store.len()),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.weight", arr2(&[[1.5, -2.0], [0.25, 3.0]]).into_dyn());
        s.insert("a.bias", ndarray::arr1(&[0.5, -0.5]).into_dyn());
        s
    }

    #[test]
    fn roundtrip_preserves_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let s = store();
        save_checkpoint(&s, &path).unwrap();
        let mut s2 = store();
        s2.set("a.weight", ndarray::ArrayD::zeros(IxDyn(&[2, 2]))).unwrap();
        load_checkpoint(&mut s2, &path).unwrap();
        assert_eq!(s2.get("a.weight"), s.get("a.weight"));
        assert_eq!(s2.get("a.bias"), s.get("a.bias"));
    }

    #[test]
    fn manifest_is_plain_text() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&store(), &path).unwrap();
        let text = std::fs::read_to_string(manifest_path(&path)).unwrap();
        assert!(text.contains("a.weight 2,2 0"));
        assert!(text.contains("a.bias 2 32"));
    }

    #[test]
    fn shape_mismatch_names_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&store(), &path).unwrap();
        // model with a different shape for a.bias
        let mut other = ParamStore::new();
        other.insert("a.weight", ndarray::ArrayD::zeros(IxDyn(&[2, 2])));
        other.insert("a.bias", ndarray::ArrayD::zeros(IxDyn(&[3])));
        let err = load_checkpoint(&mut other, &path).unwrap_err().to_string();
        assert!(err.contains("a.bias"), "{err}");
    }

    #[test]
    fn missing_parameter_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut small = ParamStore::new();
        small.insert("a.weight", ndarray::ArrayD::zeros(IxDyn(&[2, 2])));
        save_checkpoint(&small, &path).unwrap();
        let mut full = store();
        assert!(load_checkpoint(&mut full, &path).is_err());
    }
}
