use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand_distr::{Distribution, Normal};

use crate::error::{bail_arg, bail_integrity, Result};
use crate::rng::Rng;

/// Named trainable tensors plus non-trainable buffers (running statistics).
///
/// Names are unique; iteration order is lexicographic so every walk over the
/// parameters is deterministic.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    buffers: Mutex<BTreeMap<String, Tensor>>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            buffers: Mutex::new(BTreeMap::new()),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, t: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            bail_integrity!("duplicate parameter name {name:?}");
        }
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn normal(&mut self, name: &str, shape: impl Into<Shape>, std: f64, rng: &mut Rng) -> Result<Tensor> {
        let shape = shape.into();
        let dist = Normal::new(0.0, std).map_err(|e| crate::TqError::Argument(e.to_string()))?;
        let data: Vec<f64> = (0..shape.elem_count()).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::from_vec(data, shape, &self.device)?)
    }

    pub fn zeros(&mut self, name: &str, shape: impl Into<Shape>) -> Result<Tensor> {
        self.insert(name, Tensor::zeros(shape, DType::F64, &self.device)?)
    }

    pub fn ones(&mut self, name: &str, shape: impl Into<Shape>) -> Result<Tensor> {
        self.insert(name, Tensor::ones(shape, DType::F64, &self.device)?)
    }

    pub fn set_buffer(&self, name: &str, t: Tensor) {
        self.buffers.lock().unwrap().insert(name.to_string(), t);
    }

    pub fn buffer(&self, name: &str) -> Option<Tensor> {
        self.buffers.lock().unwrap().get(name).cloned()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Snapshot of parameters and buffers (`buffer.` prefix) as plain tensors.
    pub fn to_tensors(&self) -> Result<HashMap<String, Tensor>> {
        let mut out = HashMap::new();
        for (name, var) in &self.vars {
            out.insert(name.clone(), var.as_tensor().detach().copy()?);
        }
        for (name, t) in self.buffers.lock().unwrap().iter() {
            out.insert(format!("buffer.{name}"), t.copy()?);
        }
        Ok(out)
    }

    /// Overwrites parameters whose name satisfies `filter` from `tensors`.
    ///
    /// Every selected parameter must be present with the same shape.
    pub fn load_from(&self, tensors: &HashMap<String, Tensor>, filter: impl Fn(&str) -> bool) -> Result<usize> {
        let mut n = 0;
        for (name, var) in &self.vars {
            if !filter(name) {
                continue;
            }
            let Some(src) = tensors.get(name) else {
                bail_integrity!("parameter {name:?} missing from source");
            };
            if src.shape() != var.shape() {
                bail_integrity!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    src.dims(),
                    var.dims()
                );
            }
            var.set(&src.to_dtype(self.dtype)?)?;
            n += 1;
        }
        let mut buffers = self.buffers.lock().unwrap();
        for (name, t) in tensors {
            if let Some(b) = name.strip_prefix("buffer.") {
                if filter(b) {
                    buffers.insert(b.to_string(), t.to_dtype(self.dtype)?);
                }
            }
        }
        Ok(n)
    }

    /// Copies every parameter value from a shape-identical store.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        if self.vars.len() != other.vars.len() {
            bail_integrity!("parameter stores differ in size");
        }
        for (name, var) in &self.vars {
            let Some(src) = other.vars.get(name) else {
                bail_integrity!("parameter {name:?} missing from source store");
            };
            if src.shape() != var.shape() {
                bail_integrity!("parameter {name:?} shape mismatch");
            }
            var.set(&src.as_tensor().detach().copy()?)?;
        }
        let bufs = other.buffers.lock().unwrap().clone();
        *self.buffers.lock().unwrap() = bufs;
        Ok(())
    }

    /// Flattened values of one parameter as f64.
    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        match self.vars.get(name) {
            Some(v) => Ok(v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?),
            None => bail_arg!("unknown parameter {name:?}"),
        }
    }
}
