//! Named trainable parameters and the Adam optimizer with multi-step decay.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// `rows x cols` with i.i.d. `N(0, std^2)` entries.
    pub fn gaussian(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("finite std");
        let value = Mat::from_shape_simple_fn((rows, cols), || normal.sample(rng));
        self.insert(name, value)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fractions of the total step budget at which the rate is multiplied by `gamma`.
    pub milestones: Vec<f64>,
    pub gamma: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            milestones: vec![0.6, 0.8],
            gamma: 0.1,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    total_steps: usize,
    step: usize,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore, total_steps: usize) -> Self {
        let zeros = || {
            store
                .values
                .iter()
                .map(|p| Mat::zeros(p.raw_dim()))
                .collect()
        };
        Self {
            cfg,
            total_steps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        let progress = self.step as f64 / self.total_steps.max(1) as f64;
        let passed = self
            .cfg
            .milestones
            .iter()
            .filter(|&&m| progress >= m)
            .count();
        self.cfg.lr * self.cfg.gamma.powi(passed as i32)
    }

    /// One update over the given gradients; parameters without a gradient are untouched.
    pub fn step<'a>(
        &mut self,
        store: &mut ParamStore,
        grads: impl IntoIterator<Item = (ParamId, &'a Mat)>,
    ) {
        let lr = self.learning_rate();
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (id, g) in grads {
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = &mut store.values[id.0];
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.cfg.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.insert("x", arr2(&[[3.0, -2.0]]));
        let cfg = AdamConfig {
            lr: 0.1,
            milestones: vec![],
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &store, 500);
        for _ in 0..500 {
            let g = store.get(id) * 2.0;
            opt.step(&mut store, [(id, &g)]);
        }
        assert!(
            store.get(id).iter().all(|x| x.abs() < 1e-2),
            "{:?}",
            store.get(id)
        );
    }

    #[test]
    fn multistep_schedule() {
        let store = ParamStore::new();
        let mut opt = Adam::new(AdamConfig::default(), &store, 10);
        let mut rates = Vec::new();
        for _ in 0..10 {
            rates.push(opt.learning_rate());
            opt.step(&mut ParamStore::new(), std::iter::empty());
        }
        assert_eq!(rates[5], 1e-3);
        assert!((rates[6] - 1e-4).abs() < 1e-18);
        assert!((rates[8] - 1e-5).abs() < 1e-18);
    }
}
