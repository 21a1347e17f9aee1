use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::arrays::ArrayFile;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// How a parameter array is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Kaiming-uniform for leaky ReLU with the given negative slope, fan-in from the kernel.
    Kaiming(f64),
    Zeros,
    Ones,
}

/// Ordered, named weight arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            lookup: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn add(&mut self, name: impl Into<String>, shape: [usize; 4], init: Init, rng: &mut ChaCha8Rng) {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        let mut t = Tensor::zeros(shape);
        match init {
            Init::Zeros => {}
            Init::Ones => t.data_mut().iter_mut().for_each(|v| *v = T::one()),
            Init::Kaiming(slope) => {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let gain = (2.0 / (1.0 + slope * slope)).sqrt();
                let bound = gain * (3.0 / fan_in).sqrt();
                for v in t.data_mut() {
                    *v = T::of_f64(rng.gen_range(-bound..bound));
                }
            }
        }
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.lookup.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.lookup.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.lookup.get(name).copied()
    }

    /// Total scalar count over all arrays.
    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            lookup: self.lookup.clone(),
        }
    }

    /// Put every array on the tape.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect();
        Bound {
            vars,
            lookup: self.lookup.clone(),
        }
    }
}

impl ParamStore<f32> {
    pub fn to_arrays(&self) -> ArrayFile {
        let mut f = ArrayFile::default();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            f.insert(n.clone(), t.shape().to_vec(), t.data().to_vec());
        }
        f
    }

    /// Overwrite every array from `file`; names and shapes must match exactly.
    pub fn load_arrays(&mut self, mut file: ArrayFile, path: &Path) -> Result<()> {
        for (n, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let data = file.take(n, &t.shape(), path)?;
            *t = Tensor::from_vec(t.shape(), data);
        }
        if let Some(extra) = file.arrays.keys().next() {
            return Err(Error::checkpoint(path, format!("unexpected array {extra}")));
        }
        if !self.all_finite() {
            return Err(Error::Numeric(format!("{}: non-finite weights", path.display())));
        }
        Ok(())
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
    lookup: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        match self.lookup.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }
}
