//! Named parameter sets and the checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic   "FCKP"            4 bytes
//! version u32 = 1
//! count   u32
//! count × entry:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   kind     u8   (0 = trainable, 1 = buffer)
//!   layer    u32  (block ordering index)
//!   ndim     u32, dims u64 × ndim
//!   values   f64 × product(dims)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FCKP";
const VERSION: u32 = 1;

/// Whether the optimizer updates a tensor or the forward pass maintains it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Running statistics; aggregated but never touched by the optimizer.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub kind: ParamKind,
    /// Block ordering index, input to output.
    pub layer: usize,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, value: Tensor, kind: ParamKind, layer: usize) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            kind,
            layer,
        }
    }
}

/// Ordered, named collection of parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    params: Vec<ParamTensor>,
}

impl ModelParams {
    pub fn new(params: Vec<ParamTensor>) -> Result<Self> {
        let mut names: Vec<&str> = params.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::ParamMismatch(format!("duplicate name `{}`", w[0])));
        }
        Ok(Self { params })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ParamTensor> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, ParamTensor> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn as_slice(&self) -> &[ParamTensor] {
        &self.params
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Records every tensor as a leaf; buffers never require grad.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.leaf(p.value.clone(), requires_grad && p.kind == ParamKind::Trainable))
            .collect()
    }

    /// Adds the graph's gradients for `vars` into each `grad`.
    pub fn accumulate_grads(&mut self, g: &Graph, vars: &[Var]) {
        for (p, v) in self.params.iter_mut().zip(vars) {
            if let Some(gr) = g.grad(*v) {
                for (a, b) in p.grad.data_mut().iter_mut().zip(gr) {
                    *a += b;
                }
            }
        }
    }

    /// Checks that names, order and shapes agree.
    pub fn check_same_layout(&self, other: &ModelParams) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::ParamMismatch(format!(
                "{} vs {} tensors",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::ParamMismatch(format!(
                    "`{}` {:?} vs `{}` {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// Copies values from `other` (same layout), leaving gradients alone.
    pub fn copy_values_from(&mut self, other: &ModelParams) -> Result<()> {
        self.check_same_layout(other)?;
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.value.data_mut().copy_from_slice(b.value.data());
        }
        Ok(())
    }

    /// Bitwise equality of all values.
    pub fn values_bitwise_eq(&self, other: &ModelParams) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a
                        .value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.params
            .iter()
            .zip(&other.params)
            .map(|(a, b)| a.value.max_abs_diff(&b.value))
            .fold(0.0, f64::max)
    }

    /// Same layout with every name prefixed, for packing several sets into one file.
    pub fn prefixed(&self, prefix: &str) -> ModelParams {
        ModelParams {
            params: self
                .params
                .iter()
                .map(|p| ParamTensor::new(format!("{prefix}{}", p.name), p.value.clone(), p.kind, p.layer))
                .collect(),
        }
    }

    /// Entries whose names start with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ModelParams {
        ModelParams {
            params: self
                .params
                .iter()
                .filter_map(|p| {
                    p.name.strip_prefix(prefix).map(|n| {
                        ParamTensor::new(n.to_string(), p.value.clone(), p.kind, p.layer)
                    })
                })
                .collect(),
        }
    }

    pub fn concat(mut self, other: ModelParams) -> Result<ModelParams> {
        self.params.extend(other.params);
        ModelParams::new(self.params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(match p.kind {
                ParamKind::Trainable => 0,
                ParamKind::Buffer => 1,
            });
            out.extend_from_slice(&(p.layer as u32).to_le_bytes());
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; nlen];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("name is not UTF-8".into()))?;
            let mut kind = [0u8; 1];
            read_exact(&mut r, &mut kind)?;
            let kind = match kind[0] {
                0 => ParamKind::Trainable,
                1 => ParamKind::Buffer,
                k => return Err(Error::Format(format!("unknown kind byte {k}"))),
            };
            let layer = read_u32(&mut r)? as usize;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            if r.len() < n * 8 {
                return Err(Error::Format(format!("truncated values for `{name}`")));
            }
            let data = r[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            r = &r[n * 8..];
            params.push(ParamTensor::new(name, Tensor::new(shape, data)?, kind, layer));
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.len())));
        }
        ModelParams::new(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("unexpected end of checkpoint".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Writes through a sibling temp file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ModelParams {
        ModelParams::new(vec![
            ParamTensor::new("a.w", Tensor::new(vec![2, 2], vec![1.0, -0.0, 3.5, f64::MIN_POSITIVE]).unwrap(), ParamKind::Trainable, 0),
            ParamTensor::new("a.rm", Tensor::new(vec![2], vec![0.25, 1e300]).unwrap(), ParamKind::Buffer, 1),
        ])
        .unwrap()
    }

    #[test]
    fn duplicate_names_rejected() {
        let p = ParamTensor::new("x", Tensor::zeros(&[1]), ParamKind::Trainable, 0);
        assert!(ModelParams::new(vec![p.clone(), p]).is_err());
    }

    #[test]
    fn truncated_checkpoint_rejected() {
        let bytes = sample().to_bytes();
        assert!(ModelParams::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(ModelParams::from_bytes(b"NOPE").is_err());
    }

    #[test]
    fn prefix_round_trip() {
        let p = sample();
        let packed = p.prefixed("local/").concat(p.prefixed("ala/")).unwrap();
        assert!(packed.strip_prefix("ala/").values_bitwise_eq(&p));
    }

    proptest! {
        #[test]
        fn checkpoint_round_trips(values in proptest::collection::vec(any::<f64>(), 1..40), layer in 0usize..9) {
            let n = values.len();
            let p = ModelParams::new(vec![ParamTensor::new("t", Tensor::new(vec![n], values).unwrap(), ParamKind::Trainable, layer)]).unwrap();
            let back = ModelParams::from_bytes(&p.to_bytes()).unwrap();
            prop_assert!(back.values_bitwise_eq(&p));
            prop_assert_eq!(back.as_slice()[0].layer, layer);
        }
    }
}
