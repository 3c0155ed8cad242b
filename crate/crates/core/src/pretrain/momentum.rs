use crate::error::{bail_arg, bail_integrity, Result};
use crate::model::{ParamStore, TqNet};

/// Query and key encoders of one contrastive run.
#[derive(Debug)]
pub struct MomentumState {
    pub query: TqNet,
    pub key: TqNet,
    pub m: f64,
}

impl MomentumState {
    /// The key encoder starts as an exact copy of the query encoder.
    pub fn new(query: TqNet, m: f64) -> Result<Self> {
        check_m(m)?;
        let key = query.duplicate()?;
        Ok(Self { query, key, m })
    }

    pub fn update(&self) -> Result<()> {
        momentum_update(self.key.params(), self.query.params(), self.m)
    }
}

fn check_m(m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        bail_arg!("momentum coefficient must lie in [0, 1], got {m}");
    }
    Ok(())
}

/// `key ← m·key + (1−m)·query` for every parameter; `query` is not touched.
///
/// Buffers (running statistics) are not parameters and keep their own values.
pub fn momentum_update(key: &ParamStore, query: &ParamStore, m: f64) -> Result<()> {
    check_m(m)?;
    if key.len() != query.len() {
        bail_integrity!("key store has {} tensors, query store {}", key.len(), query.len());
    }
    for (name, kv) in key.iter() {
        let Some(qv) = query.get(name) else {
            bail_integrity!("parameter {name:?} missing from query store");
        };
        if kv.shape() != qv.shape() {
            bail_integrity!("parameter {name:?}: key {:?} vs query {:?}", kv.dims(), qv.dims());
        }
    }
    for (name, kv) in key.iter() {
        let q = query.get(name).expect("checked").as_tensor().detach();
        let k = kv.as_tensor().detach();
        let next = if m == 0.0 {
            q.copy()?
        } else if m == 1.0 {
            continue;
        } else {
            ((k * m)? + (q * (1.0 - m))?)?
        };
        kv.set(&next)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use candle_core::DType;

    fn store(seed: u64, shape: usize) -> ParamStore {
        let mut ps = ParamStore::new(DType::F64);
        let mut rng = rng_from_seed(seed);
        ps.normal("a", (shape, 3), 1.0, &mut rng).unwrap();
        ps.normal("b", 5, 1.0, &mut rng).unwrap();
        ps
    }

    #[test]
    fn scalar_substitution() {
        let mut k = ParamStore::new(DType::F64);
        k.ones("p", 1).unwrap();
        let mut q = ParamStore::new(DType::F64);
        q.zeros("p", 1).unwrap();
        momentum_update(&k, &q, 0.999).unwrap();
        assert_eq!(k.values("p").unwrap(), vec![0.999]);
        assert_eq!(q.values("p").unwrap(), vec![0.0]);
    }

    #[test]
    fn extremes() {
        let (k, q) = (store(1, 2), store(2, 2));
        let before = k.values("a").unwrap();
        momentum_update(&k, &q, 1.0).unwrap();
        assert_eq!(k.values("a").unwrap(), before);
        momentum_update(&k, &q, 0.0).unwrap();
        assert_eq!(k.values("a").unwrap(), q.values("a").unwrap());
        assert_eq!(k.values("b").unwrap(), q.values("b").unwrap());
    }

    #[test]
    fn rejects_mismatch_and_bad_m() {
        let (k, q) = (store(1, 2), store(2, 4));
        assert!(matches!(momentum_update(&k, &q, 0.5), Err(crate::TqError::Integrity(_))));
        let q = store(2, 2);
        for m in [1.5, -0.1, f64::NAN] {
            assert!(matches!(momentum_update(&k, &q, m), Err(crate::TqError::Argument(_))));
        }
    }
}
