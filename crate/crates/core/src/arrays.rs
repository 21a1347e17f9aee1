//! Named float32 arrays stored as safetensors files.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "array shape/data mismatch");
        Array { shape, data }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ArrayFile {
    pub arrays: BTreeMap<String, Array>,
    pub metadata: BTreeMap<String, String>,
}

impl ArrayFile {
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.arrays.insert(name.into(), Array::new(shape, data));
    }

    /// Array `name`, checked against `shape`.
    pub fn take(&mut self, name: &str, shape: &[usize], path: &Path) -> Result<Vec<f32>> {
        let a = self
            .arrays
            .remove(name)
            .ok_or_else(|| Error::format(path, format!("missing array {name}")))?;
        if a.shape != shape {
            return Err(Error::format(
                path,
                format!("array {name} has shape {:?}, expected {:?}", a.shape, shape),
            ));
        }
        Ok(a.data)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(String, Vec<u8>)> = self
            .arrays
            .iter()
            .map(|(k, a)| (k.clone(), a.data.iter().flat_map(|v| v.to_le_bytes()).collect()))
            .collect();
        let views = bytes
            .iter()
            .zip(self.arrays.values())
            .map(|((k, b), a)| {
                TensorView::new(Dtype::F32, a.shape.clone(), b)
                    .map(|v| (k.as_str(), v))
                    .map_err(|e| Error::Data(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta: Option<HashMap<String, String>> = if self.metadata.is_empty() {
            None
        } else {
            Some(self.metadata.clone().into_iter().collect())
        };
        safetensors::serialize(views, &meta).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::format(path, e.to_string()))?;
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| Error::format(path, e.to_string()))?;
        let mut out = ArrayFile::default();
        if let Some(m) = meta.metadata() {
            out.metadata = m.clone().into_iter().collect();
        }
        for (name, view) in st.tensors() {
            let raw = view.data();
            let data: Vec<f32> = match view.dtype() {
                Dtype::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32)
                    .collect(),
                other => {
                    return Err(Error::format(path, format!("array {name}: unsupported dtype {other:?}")));
                }
            };
            out.arrays.insert(name, Array::new(view.shape().to_vec(), data));
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_metadata() {
        let mut f = ArrayFile::default();
        f.insert("a.weight", vec![2, 3], (0..6).map(|v| v as f32 * 0.5).collect());
        f.insert("b", vec![1], vec![-1.0]);
        f.metadata.insert("format_version".into(), "1".into());
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("x.safetensors");
        f.save(&p).unwrap();
        let mut g = ArrayFile::load(&p).unwrap();
        assert_eq!(g, f);
        assert!(g.take("a.weight", &[3, 2], &p).is_err());
        assert!(g.take("missing", &[1], &p).is_err());
        assert_eq!(g.take("b", &[1], &p).unwrap(), vec![-1.0]);
    }

    #[test]
    fn garbage_is_format_error() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("x.safetensors");
        std::fs::write(&p, b"0123456789").unwrap();
        assert!(matches!(ArrayFile::load(&p), Err(Error::Format { .. })));
    }
}
