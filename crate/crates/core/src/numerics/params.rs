//! Named parameter store with seed-deterministic initialization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Map of name → trainable tensor. Iteration order is sorted by name, and
/// every parameter's initial values are a pure function of (store seed,
/// parameter name), so re-creation with the same seed is bit-exact
/// regardless of insertion order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    seed: u64,
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Add a parameter initialized uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).
    pub fn add_uniform(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let mut rng = self.rng_for(name);
        let data: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound).collect();
        self.insert(name, Tensor::new(shape, data)?.with_grad())
    }

    pub fn add_zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<()> {
        self.insert(name, Tensor::zeros(shape).with_grad())
    }

    pub fn add_ones(&mut self, name: &str, shape: Vec<usize>) -> Result<()> {
        let n: usize = shape.iter().product();
        self.insert(name, Tensor::new(shape, vec![1.0; n])?.with_grad())
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter {name:?}")));
        }
        self.params.insert(name.to_string(), tensor.with_grad());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn entry_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.zero_grad();
        }
    }

    /// Accumulate `scale * grad` into the named parameter's grad buffer.
    pub fn accumulate_grad(&mut self, name: &str, grad: &[f64], scale: f64) {
        let t = self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        let buf = t.grad.get_or_insert_with(|| vec![0.0; grad.len()]);
        for (d, s) in buf.iter_mut().zip(grad) {
            *d += s * scale;
        }
    }

    /// RNG stream derived from the store seed and the parameter name, so
    /// insertion order cannot perturb initialization.
    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        let mut state = self.seed ^ 0x9e37_79b9_7f4a_7c15;
        for &b in name.as_bytes() {
            state = splitmix64(state ^ b as u64);
        }
        for chunk in key.chunks_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_reproduces_bit_exactly() {
        let mut a = ParamStore::new(7);
        a.add_uniform("w", vec![4, 3], 4).unwrap();
        a.add_uniform("v", vec![5], 5).unwrap();

        // Different insertion order, same seed.
        let mut b = ParamStore::new(7);
        b.add_uniform("v", vec![5], 5).unwrap();
        b.add_uniform("w", vec![4, 3], 4).unwrap();

        assert_eq!(a.get("w").unwrap().data(), b.get("w").unwrap().data());
        assert_eq!(a.get("v").unwrap().data(), b.get("v").unwrap().data());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut s = ParamStore::new(1);
        s.add_uniform("w", vec![16, 16], 16).unwrap();
        let bound = 0.25;
        assert!(s.get("w").unwrap().data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut s = ParamStore::new(1);
        s.add_zeros("w", vec![2]).unwrap();
        assert!(s.add_zeros("w", vec![2]).is_err());
    }

    #[test]
    fn iteration_is_sorted() {
        let mut s = ParamStore::new(1);
        s.add_zeros("b", vec![1]).unwrap();
        s.add_zeros("a", vec![1]).unwrap();
        let names: Vec<&str> = s.names().collect();
        assert_eq!(names, vec!["a", "b"]);
    }
}
