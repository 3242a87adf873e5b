//! JSON checkpoint: parameter name -> `{shape, data}` where `data` is the
//! base64 encoding of the little-endian `f32` values.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::array::DenseArray;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: String,
}

impl TensorRecord {
    pub fn encode(array: &DenseArray) -> Self {
        Self {
            shape: array.shape().to_vec(),
            data: STANDARD.encode(array.to_le_bytes()),
        }
    }

    pub fn decode(&self) -> Result<DenseArray> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Checkpoint(format!("bad base64: {e}")))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Checkpoint(format!(
                "{} bytes is not a whole number of f32 values",
                bytes.len()
            )));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        DenseArray::new(self.shape.clone(), values)
    }
}

/// Named tensors in a stable (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, DenseArray>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: &DenseArray) {
        self.tensors.insert(name.into(), array.detached());
    }

    pub fn get(&self, name: &str) -> Result<&DenseArray> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Tensors under `prefix`, with the prefix stripped.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a DenseArray)> {
        self.tensors
            .iter()
            .filter_map(move |(k, v)| k.strip_prefix(prefix).map(|rest| (rest, v)))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn extend(&mut self, other: Checkpoint) {
        self.tensors.extend(other.tensors);
    }

    pub fn to_records(&self) -> BTreeMap<String, TensorRecord> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), TensorRecord::encode(v)))
            .collect()
    }

    pub fn from_records(records: &BTreeMap<String, TensorRecord>) -> Result<Self> {
        let tensors = records
            .iter()
            .map(|(k, r)| Ok((k.clone(), r.decode()?)))
            .collect::<Result<_>>()?;
        Ok(Self { tensors })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_records())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let records: BTreeMap<String, TensorRecord> = serde_json::from_str(text)?;
        Self::from_records(&records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Writes through a sibling temporary file and renames it into place, so a
/// reader never observes a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let weird = vec![0.1f32, -0.0, f32::MIN_POSITIVE, 1e-45, f32::MAX, -3.5];
        let a = DenseArray::new(vec![2, 3], weird).unwrap();
        let mut ck = Checkpoint::new();
        ck.insert("col0/w1", &a);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        let b = back.get("col0/w1").unwrap();
        assert_eq!(a.shape(), b.shape());
        let bits = |x: &DenseArray| x.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(b));
    }

    #[test]
    fn rejects_truncated_payload() {
        let rec = TensorRecord {
            shape: vec![1],
            data: STANDARD.encode([0u8, 1, 2]),
        };
        assert!(rec.decode().is_err());
    }

    #[test]
    fn json_layout_is_name_to_shape_and_data() {
        let mut ck = Checkpoint::new();
        ck.insert("x", &DenseArray::scalar(1.0));
        let v: serde_json::Value = serde_json::from_str(&ck.to_json().unwrap()).unwrap();
        assert_eq!(v["x"]["shape"], serde_json::json!([1]));
        assert_eq!(v["x"]["data"], serde_json::json!(STANDARD.encode(1.0f32.to_le_bytes())));
    }
}
