//! Parameter storage and the AdamW optimizer.

use std::collections::BTreeMap;

use rand::Rng;

use super::tape::Tensor;

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `(-lim, lim)`.
    Uniform(f64),
    /// Glorot uniform from `(fan_in, fan_out)`.
    Xavier { fan_in: usize, fan_out: usize },
    /// Gaussian with the given standard deviation.
    Normal(f64),
}

/// Named parameter tensors plus per-parameter AdamW state.
#[derive(Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    steps: BTreeMap<String, u64>,
}

/// AdamW hyperparameters. Defaults follow the usual transformer recipe.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamWCfg {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWCfg {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Create a parameter. Panics if the name is taken; model constructors
    /// own their namespaces.
    pub fn add<R: Rng>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) {
        assert!(
            !self.params.contains_key(name),
            "parameter {name} already exists"
        );
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(lim) => (0..n).map(|_| rng.random_range(-lim..lim)).collect(),
            Init::Xavier { fan_in, fan_out } => {
                let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-lim..lim)).collect()
            }
            Init::Normal(std) => (0..n).map(|_| std * box_muller(rng)).collect(),
        };
        self.params.insert(name.to_string(), Tensor::new(data, shape.to_vec()));
    }

    /// Insert or overwrite a tensor directly (used by checkpoint loading and
    /// tests).
    pub fn set_raw(&mut self, name: &str, tensor: Tensor) {
        self.params.insert(name.to_string(), tensor);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn n_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// One AdamW update over exactly the parameters present in `grads`.
    /// Parameters absent from `grads` (frozen or unused this step) keep their
    /// values and optimizer state untouched.
    pub fn adamw_step(&mut self, grads: &BTreeMap<String, Vec<f64>>, cfg: &AdamWCfg) {
        for (name, g) in grads {
            let p = self
                .params
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            assert_eq!(g.len(), p.numel(), "gradient size mismatch for {name}");
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let step = self.steps.entry(name.clone()).or_insert(0);
            *step += 1;
            let t = *step as f64;
            let bc1 = 1.0 - cfg.beta1.powf(t);
            let bc2 = 1.0 - cfg.beta2.powf(t);
            for i in 0..n {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -=
                    cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * p.data[i]);
            }
        }
    }
}

/// Standard normal draw via Box-Muller, kept in-repo so every sampled byte is
/// under version control.
pub fn box_muller<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
