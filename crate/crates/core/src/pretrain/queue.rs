use candle_core::{DType, Device, Tensor};
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{bail_arg, Result};
use crate::rng::Rng;

/// Tolerance on ‖k‖ − 1 for vectors entering the queue.
pub const UNIT_NORM_TOL: f64 = 1e-3;

/// Fixed-capacity FIFO ring buffer of unit-norm key embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    data: Vec<f64>,
    len: usize,
    ptr: usize,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            bail_arg!("queue capacity and dimension must be positive");
        }
        Ok(Self {
            capacity,
            dim,
            data: vec![0.0; capacity * dim],
            len: 0,
            ptr: 0,
        })
    }

    /// A full queue of random unit vectors.
    pub fn random(capacity: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        let mut q = Self::new(capacity, dim)?;
        let keys: Vec<Vec<f64>> = (0..capacity)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        q.enqueue(&keys)?;
        Ok(q)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Slot the next key will be written to.
    pub fn pointer(&self) -> usize {
        self.ptr
    }

    pub fn enqueue(&mut self, keys: &[Vec<f64>]) -> Result<()> {
        if keys.len() > self.capacity {
            bail_arg!("cannot enqueue {} keys into a queue of capacity {}", keys.len(), self.capacity);
        }
        for k in keys {
            if k.len() != self.dim {
                bail_arg!("key of width {} for a queue of width {}", k.len(), self.dim);
            }
            let norm = k.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !((norm - 1.0).abs() <= UNIT_NORM_TOL) {
                bail_arg!("queue keys must be unit-norm, got norm {norm}");
            }
        }
        for k in keys {
            self.data[self.ptr * self.dim..(self.ptr + 1) * self.dim].copy_from_slice(k);
            self.ptr = (self.ptr + 1) % self.capacity;
        }
        self.len = (self.len + keys.len()).min(self.capacity);
        Ok(())
    }

    /// Enqueues the rows of a `(B, d)` tensor.
    pub fn enqueue_tensor(&mut self, keys: &Tensor) -> Result<()> {
        let rows: Vec<Vec<f64>> = keys.detach().to_dtype(DType::F64)?.to_vec2()?;
        self.enqueue(&rows)
    }

    /// Stored keys, oldest first.
    pub fn entries(&self) -> Vec<&[f64]> {
        let start = if self.len < self.capacity { 0 } else { self.ptr };
        (0..self.len)
            .map(|i| {
                let slot = (start + i) % self.capacity;
                &self.data[slot * self.dim..(slot + 1) * self.dim]
            })
            .collect()
    }

    /// `(len, d)` tensor of the stored keys, oldest first.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let flat: Vec<f64> = self.entries().concat();
        Ok(Tensor::from_vec(flat, (self.len, self.dim), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for e in self.entries() {
            for v in e {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;

    fn basis(i: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i % d] = 1.0;
        v
    }

    #[test]
    fn fifo_overwrites_oldest() {
        let mut q = NegativeQueue::new(4, 8).unwrap();
        q.enqueue(&[basis(0, 8), basis(1, 8)]).unwrap();
        q.enqueue(&[basis(2, 8), basis(3, 8)]).unwrap();
        q.enqueue(&[basis(4, 8), basis(5, 8)]).unwrap();
        let got: Vec<Vec<f64>> = q.entries().into_iter().map(<[f64]>::to_vec).collect();
        assert_eq!(got, vec![basis(2, 8), basis(3, 8), basis(4, 8), basis(5, 8)]);
        assert_eq!(q.pointer(), 2);
    }

    #[test]
    fn full_batch_replaces_queue() {
        let mut q = NegativeQueue::random(3, 4, &mut rng_from_seed(0)).unwrap();
        let keys = vec![basis(0, 4), basis(1, 4), basis(2, 4)];
        q.enqueue(&keys).unwrap();
        let got: Vec<Vec<f64>> = q.entries().into_iter().map(<[f64]>::to_vec).collect();
        assert_eq!(got, keys);
    }

    #[test]
    fn rejects_oversized_batch_and_non_unit_keys() {
        let mut q = NegativeQueue::new(2, 2).unwrap();
        assert!(q.enqueue(&[basis(0, 2), basis(1, 2), basis(0, 2)]).is_err());
        assert!(q.enqueue(&[vec![2.0, 0.0]]).is_err());
        assert!(q.enqueue(&[vec![f64::NAN, 0.0]]).is_err());
        assert!(q.is_empty());
    }

    #[test]
    fn random_queue_hash_is_stable() {
        let a = NegativeQueue::random(16, 8, &mut rng_from_seed(3)).unwrap();
        let b = NegativeQueue::random(16, 8, &mut rng_from_seed(3)).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), NegativeQueue::random(16, 8, &mut rng_from_seed(4)).unwrap().hash());
    }

    proptest! {
        #[test]
        fn size_is_min_of_capacity_and_total(cap in 1usize..20, batches in proptest::collection::vec(0usize..20, 0..10)) {
            let mut q = NegativeQueue::new(cap, 3).unwrap();
            let mut total = 0;
            for b in batches {
                let b = b.min(cap);
                q.enqueue(&(0..b).map(|i| basis(i, 3)).collect::<Vec<_>>()).unwrap();
                total += b;
                prop_assert_eq!(q.len(), total.min(cap));
                prop_assert_eq!(q.pointer(), total % cap);
            }
        }
    }
}
