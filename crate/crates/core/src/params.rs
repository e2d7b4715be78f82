//! Named parameter collections and their on-disk checkpoint format.
//!
//! A checkpoint is two files: `<stem>.bin`, every parameter's values as
//! little-endian `f64` concatenated in manifest order, and `<stem>.json`,
//! `{"dtype": "f64le", "params": [{"name", "shape", "offset"}, ..]}` where
//! `offset` counts elements from the start of the stream.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::optim;
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub dtype: String,
    pub params: Vec<ManifestEntry>,
}

/// Tape leaves for every parameter of a store, in store order.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Adds a trainable tensor and returns its slot.
    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(invalid(format!("duplicate parameter `{name}`")));
        }
        t.set_requires_grad(true);
        self.names.push(name);
        self.tensors.push(t);
        Ok(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn bind(&self, tape: &Tape<T>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t)).collect(),
        }
    }

    /// Binds every parameter as a constant: nothing on the tape reaches them.
    pub fn bind_frozen(&self, tape: &Tape<T>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.constant(t.detached())).collect(),
        }
    }

    /// Copies gradients from a backward pass into the tensors. Parameters the
    /// loss did not touch receive an explicit zero gradient.
    pub fn absorb_grads(&mut self, bound: &Bound, grads: &Gradients<T>) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            match grads.get(v) {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&vec![T::zero(); t.numel()])?,
            }
        }
        Ok(())
    }

    pub fn sgd_step(&mut self, lr: T) -> Result<()> {
        if let Some(i) = self.tensors.iter().position(|t| t.grad().is_none()) {
            return Err(Error::MissingGradient(self.names[i].clone()));
        }
        optim::sgd_step(&mut self.tensors, lr)
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// `self <- retain * self + (1 - retain) * other`, elementwise.
    pub fn blend_from(&mut self, other: &Self, retain: T) -> Result<()> {
        if !self.same_layout(other) {
            return Err(invalid("parameter layouts differ"));
        }
        let keep = T::one() - retain;
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data_mut()
                .iter_mut()
                .zip(b.data())
                .for_each(|(x, &y)| *x = retain * *x + keep * y);
        }
        Ok(())
    }

    pub fn flat(&self) -> Vec<T> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0;
        let params = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| {
                let e = ManifestEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.numel();
                e
            })
            .collect();
        Manifest {
            dtype: "f64le".into(),
            params,
        }
    }

    /// Writes `<stem>.bin` and `<stem>.json`; returns both paths.
    pub fn save(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        let mut bytes = Vec::with_capacity(self.num_values() * 8);
        for v in self.flat() {
            bytes.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        fs::write(&bin, bytes)?;
        fs::write(&json, serde_json::to_string_pretty(&self.manifest())?)?;
        Ok((bin, json))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)?;
        if manifest.dtype != "f64le" {
            return Err(Error::Format(format!("unsupported dtype `{}`", manifest.dtype)));
        }
        let bytes = fs::read(stem.with_extension("bin"))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Format("checkpoint stream is not a whole number of f64".into()));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let mut store = Self::new();
        for e in manifest.params {
            let n: usize = e.shape.iter().product();
            let slice = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::Format(format!("`{}` runs past end of stream", e.name)))?;
            let t = Tensor::new(e.shape, slice.iter().map(|&v| T::lit(v)).collect())?;
            store.insert(e.name, t)?;
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::new(vec![2, 3], (0..6).map(|i| i as f64 * 0.1).collect()).unwrap())
            .unwrap();
        s.insert("b", Tensor::new(vec![3], vec![-1.0, 0.5, 1e-300]).unwrap())
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        s.save(&stem).unwrap();
        let back = ParamStore::<f64>::load(&stem).unwrap();
        assert_eq!(back.flat(), s.flat());
        assert!(back.same_layout(&s));
        assert_eq!(s.manifest().params[1].offset, 6);
    }

    #[test]
    fn blend_is_convex() {
        let mut a = ParamStore::<f64>::new();
        a.insert("x", Tensor::from_vec(vec![1.0])).unwrap();
        let mut b = ParamStore::<f64>::new();
        b.insert("x", Tensor::from_vec(vec![0.0])).unwrap();
        a.blend_from(&b, 0.9996).unwrap();
        assert!((a.flat()[0] - 0.9996).abs() < 1e-15);
        let mut c = ParamStore::<f64>::new();
        c.insert("y", Tensor::from_vec(vec![0.0])).unwrap();
        assert!(a.blend_from(&c, 0.5).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut a = ParamStore::<f64>::new();
        a.insert("x", Tensor::from_vec(vec![1.0])).unwrap();
        assert!(a.insert("x", Tensor::from_vec(vec![1.0])).is_err());
    }
}
