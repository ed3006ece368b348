//! Checkpoint persistence for parameter stores.
//!
//! A checkpoint is two files: a text manifest listing array names and shapes
//! in store order, and a binary blob of little-endian f64 values concatenated
//! in the same order. Round-trips are bit exact.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::array::{DenseArray, ParamStore};
use crate::error::{Error, Result};

const MANIFEST_VERSION: &str = "ilpred-checkpoint v1";

/// Extra named arrays saved alongside parameters (optimizer state, counters).
pub type ExtraArrays = Vec<(String, DenseArray)>;

pub fn save(dir: &Path, store: &ParamStore, extras: &ExtraArrays) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = BufWriter::new(std::fs::File::create(dir.join("manifest.txt"))?);
    let mut blob = BufWriter::new(std::fs::File::create(dir.join("values.bin"))?);
    writeln!(manifest, "{MANIFEST_VERSION}")?;
    let mut write_one = |name: &str, arr: &DenseArray| -> Result<()> {
        let dims: Vec<String> = arr.shape().iter().map(|d| d.to_string()).collect();
        writeln!(manifest, "{name} {}", dims.join("x"))?;
        for v in arr.data() {
            blob.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    };
    for p in store.iter() {
        write_one(&p.name, &p.value)?;
    }
    for (name, arr) in extras {
        write_one(&format!("extra:{name}"), arr)?;
    }
    manifest.flush()?;
    blob.flush()?;
    Ok(())
}

/// Load a checkpoint into a freshly built store. The manifest must list the
/// store's parameters with identical names and shapes, in order; any
/// remaining `extra:` entries are returned separately.
pub fn load(dir: &Path, store: &mut ParamStore) -> Result<ExtraArrays> {
    let manifest = BufReader::new(std::fs::File::open(dir.join("manifest.txt"))?);
    let mut blob = BufReader::new(std::fs::File::open(dir.join("values.bin"))?);
    let mut lines = manifest.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty manifest".into() })?;
    if header != MANIFEST_VERSION {
        return Err(Error::Version(format!(
            "expected {MANIFEST_VERSION:?}, found {header:?}"
        )));
    }
    let mut extras = ExtraArrays::new();
    let mut param_idx = 0usize;
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let lineno = lineno + 2;
        if line.trim().is_empty() {
            continue;
        }
        let (name, dims) = line.rsplit_once(' ').ok_or_else(|| Error::Parse {
            line: lineno,
            msg: "expected \"name dims\"".into(),
        })?;
        let shape: Vec<usize> = dims
            .split('x')
            .map(|d| {
                d.parse().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("bad dimension {d:?}"),
                })
            })
            .collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        blob.read_exact(&mut buf).map_err(|e| Error::Data(format!(
            "checkpoint blob truncated at {name:?}: {e}"
        )))?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = DenseArray::new(shape, data)?;
        if let Some(extra_name) = name.strip_prefix("extra:") {
            extras.push((extra_name.to_string(), arr));
            continue;
        }
        if param_idx >= store.len() {
            return Err(Error::Data(format!(
                "checkpoint has unexpected parameter {name:?}"
            )));
        }
        let p = store.get_mut(param_idx);
        if p.name != name {
            return Err(Error::Data(format!(
                "parameter order mismatch: store has {:?}, checkpoint has {name:?}",
                p.name
            )));
        }
        if p.value.shape() != arr.shape() {
            return Err(Error::Data(format!(
                "shape mismatch for {name:?}: store {:?}, checkpoint {:?}",
                p.value.shape(),
                arr.shape()
            )));
        }
        p.value = arr;
        param_idx += 1;
    }
    if param_idx != store.len() {
        return Err(Error::Data(format!(
            "checkpoint is missing {} parameters",
            store.len() - param_idx
        )));
    }
    let mut trailing = Vec::new();
    if blob.read_to_end(&mut trailing)? > 0 {
        return Err(Error::Data(format!(
            "checkpoint blob has {} trailing bytes",
            trailing.len()
        )));
    }
    Ok(extras)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.create("a.w", DenseArray::new(vec![2, 3], vec![1.5, -0.25, 3e-300, 0.0, -0.0, 7.0]).unwrap())
            .unwrap();
        s.create("b.bias", DenseArray::new(vec![2], vec![f64::MIN_POSITIVE, 1.0 / 3.0]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let store = sample_store();
        let extras = vec![(
            "m.step".to_string(),
            DenseArray::new(vec![1], vec![42.0]).unwrap(),
        )];
        save(dir.path(), &store, &extras).unwrap();
        let mut fresh = sample_store();
        for p in 0..fresh.len() {
            for v in fresh.get_mut(p).value.data_mut() {
                *v = 99.0;
            }
        }
        let loaded_extras = load(dir.path(), &mut fresh).unwrap();
        for (orig, new) in store.iter().zip(fresh.iter()) {
            assert_eq!(orig.value.data(), new.value.data());
            // Compare raw bits to catch -0.0 vs 0.0 drift.
            for (a, b) in orig.value.data().iter().zip(new.value.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert_eq!(loaded_extras.len(), 1);
        assert_eq!(loaded_extras[0].0, "m.step");
        assert_eq!(loaded_extras[0].1.item(), 42.0);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &sample_store(), &Vec::new()).unwrap();
        let mut other = ParamStore::new();
        other.create("a.w", DenseArray::zeros(&[3, 2])).unwrap();
        other.create("b.bias", DenseArray::zeros(&[2])).unwrap();
        assert!(load(dir.path(), &mut other).is_err());
    }
}
