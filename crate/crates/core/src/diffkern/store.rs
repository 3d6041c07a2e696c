//! Named parameter storage with deterministic initialization.

use super::tensor::Tensor;
use crate::rng::Stream;
use std::collections::BTreeMap;

/// Map from parameter path to tensor. Initialization is keyed by
/// `(seed, path)`, so values do not depend on registration order.
#[derive(Debug, Clone)]
pub struct ParameterStore {
    version: u32,
    seed: u64,
    params: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        ParameterStore { version: super::weights::WEIGHT_FORMAT_VERSION, seed, params: BTreeMap::new() }
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub(crate) fn set_version(&mut self, version: u32) {
        self.version = version;
    }

    /// Glorot-style uniform init: uniform(-a, a), a = sqrt(6/(fan_in+fan_out)).
    pub fn init_uniform(&mut self, path: &str, shape: &[usize], fan_in: usize, fan_out: usize) {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = Stream::new(self.seed, path);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.uniform(-a, a)).collect();
        self.params.insert(path.to_string(), Tensor::new(shape.to_vec(), data));
    }

    pub fn init_const(&mut self, path: &str, shape: &[usize], value: f64) {
        let n: usize = shape.iter().product();
        self.params.insert(path.to_string(), Tensor::new(shape.to_vec(), vec![value; n]));
    }

    pub fn insert(&mut self, path: &str, t: Tensor) {
        self.params.insert(path.to_string(), t);
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.params.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.params.get_mut(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Parameters in path order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn total_values(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }
}
