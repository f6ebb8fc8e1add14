//! Named parameter storage with gradient accumulators and the Adam update.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::errors::{Result, ZiqeError};
use crate::nn::tape::GradMap;
use crate::rng::SplitMix64;

/// Named parameter arrays with same-shaped gradient accumulators.
///
/// Iteration order is the sorted name order, which keeps checkpoints and
/// optimizer sweeps deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Array2<f64>>,
    grads: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        assert!(
            !self.params.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.grads.insert(name.to_string(), Array2::zeros(value.raw_dim()));
        self.params.insert(name.to_string(), value);
    }

    /// Xavier-style Gaussian init, std = sqrt(2 / (fan_in + fan_out)).
    pub fn insert_init(&mut self, name: &str, rows: usize, cols: usize, rng: &mut SplitMix64) {
        let std = (2.0 / (rows + cols) as f64).sqrt();
        let v = Array2::from_shape_fn((rows, cols), |_| rng.normal() * std);
        self.insert(name, v);
    }

    pub fn insert_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Array2::zeros((rows, cols)));
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn grad(&self, name: &str) -> &Array2<f64> {
        &self.grads[name]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.fill(0.0);
        }
    }

    /// Adds one backward pass's gradients into the accumulators.
    pub fn accumulate(&mut self, grads: &GradMap) {
        for (name, g) in grads {
            if let Some(acc) = self.grads.get_mut(name) {
                *acc += g;
            }
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            *g *= factor;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One Adam update over every parameter in `store`, consuming the
    /// accumulated gradients. Optionally restricted to names passing `trainable`.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        cfg: &AdamConfig,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let names: Vec<String> = store.params.keys().cloned().collect();
        for name in names {
            if !trainable(&name) {
                continue;
            }
            let g = store.grads[&name].clone();
            if g.iter().any(|x| !x.is_finite()) {
                return Err(ZiqeError::NonFinite(format!("gradient of {name}")));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.raw_dim()));
            *m = &*m * cfg.beta1 + &g * (1.0 - cfg.beta1);
            let mhat = &*m / bc1;
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.raw_dim()));
            *v = &*v * cfg.beta2 + &(&g * &g) * (1.0 - cfg.beta2);
            let vhat = &*v / bc2;
            let p = store.params.get_mut(&name).unwrap();
            *p = &*p - &(&mhat / &(vhat.mapv(f64::sqrt) + cfg.eps) * cfg.lr);
        }
        store.zero_grads();
        Ok(())
    }
}
