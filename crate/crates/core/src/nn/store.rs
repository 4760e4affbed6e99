//! Flat named-tensor container with a stable binary encoding.

use std::collections::BTreeMap;

use ndarray::IxDyn;

use super::Param;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"LSTS";
const VERSION: u32 = 1;

/// Named f32 tensors, encoded deterministically (sorted by name).
#[derive(Debug, Clone, Default)]
pub struct TensorStore {
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl TensorStore {
    pub fn new() -> Self {
        TensorStore::default()
    }

    pub fn put(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(name.to_string(), (shape, data));
    }

    pub fn put_param(&mut self, name: &str, param: &Param) {
        self.put(
            name,
            param.value.shape().to_vec(),
            param.value.iter().copied().collect(),
        );
    }

    pub fn put_vec(&mut self, name: &str, data: Vec<f32>) {
        self.put(name, vec![data.len()], data);
    }

    pub fn get(&self, name: &str) -> Result<(&[usize], &[f32])> {
        self.tensors
            .get(name)
            .map(|(s, d)| (s.as_slice(), d.as_slice()))
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }

    pub fn get_param(&self, name: &str, param: &mut Param) -> Result<()> {
        let (shape, data) = self.get(name)?;
        if shape != param.value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} has shape {shape:?}, expected {:?}",
                param.value.shape()
            )));
        }
        param.value = ndarray::ArrayD::from_shape_vec(IxDyn(shape), data.to_vec())
            .expect("shape matches data length");
        param.zero_grad();
        Ok(())
    }

    pub fn get_vec(&self, name: &str) -> Result<Vec<f32>> {
        Ok(self.get(name)?.1.to_vec())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, (shape, data)) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad tensor store magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported tensor store version {version}"
            )));
        }
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let len = r.u64()? as usize;
            if len != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} length {len} does not match shape {shape:?}"
                )));
            }
            let raw = r.take(len * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, (shape, data));
        }
        Ok(TensorStore { tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Checkpoint("tensor store truncated".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact_and_byte_stable() {
        let mut store = TensorStore::new();
        store.put("b", vec![2, 2], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE]);
        store.put("a", vec![3], vec![0.1, 0.2, 0.3]);
        let bytes = store.to_bytes();
        let back = TensorStore::from_bytes(&bytes).unwrap();
        assert_eq!(back.get("b").unwrap().1, store.get("b").unwrap().1);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncated_input_rejected() {
        let mut store = TensorStore::new();
        store.put("a", vec![2], vec![1.0, 2.0]);
        let bytes = store.to_bytes();
        assert!(TensorStore::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
