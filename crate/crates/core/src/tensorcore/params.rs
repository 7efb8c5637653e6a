//! Named trainable parameters and the Adam update.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng;

/// One trainable tensor plus its Adam moment buffers.
#[derive(Debug, Clone)]
pub struct Param {
    pub shape: (usize, usize),
    pub value: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// All learned weights, addressable by dotted name (`visual.point.fc0.w`, ...).
///
/// Iteration order is the name order (BTreeMap), which keeps every update and
/// checkpoint deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn insert(&mut self, name: &str, shape: (usize, usize), value: Vec<f64>) {
        assert_eq!(value.len(), shape.0 * shape.1, "param '{name}': value length mismatch");
        assert!(!self.params.contains_key(name), "param '{name}' already registered");
        let n = value.len();
        self.params.insert(
            name.to_string(),
            Param { shape, value, m: vec![0.0; n], v: vec![0.0; n] },
        );
    }

    /// Linear-layer weight, variance-preserving uniform init: He bound
    /// `sqrt(6/fan_in)` when a ReLU follows, Xavier bound
    /// `sqrt(6/(fan_in+fan_out))` otherwise. The init stream is keyed by the
    /// parameter name, so adding a parameter elsewhere never shifts another's
    /// draw.
    pub fn insert_linear(&mut self, seed: u64, name: &str, fan_in: usize, fan_out: usize, relu_follows: bool) {
        let bound = if relu_follows {
            (6.0 / fan_in as f64).sqrt()
        } else {
            (6.0 / (fan_in + fan_out) as f64).sqrt()
        };
        let mut r = rng::stream(seed, &format!("init/{name}"));
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| r.random_range(-bound..bound)).collect();
        self.insert(name, (fan_in, fan_out), w);
    }

    /// Bias row initialized like the matching weight (uniform in the fan-in bound).
    pub fn insert_bias(&mut self, seed: u64, name: &str, fan_in: usize, fan_out: usize) {
        let bound = (1.0 / fan_in as f64).sqrt();
        let mut r = rng::stream(seed, &format!("init/{name}"));
        let b: Vec<f64> = (0..fan_out).map(|_| r.random_range(-bound..bound)).collect();
        self.insert(name, (1, fan_out), b);
    }

    /// Embedding-style parameter, `N(0, 0.02^2)`.
    pub fn insert_embedding(&mut self, seed: u64, name: &str, rows: usize, cols: usize) {
        let mut r = rng::stream(seed, &format!("init/{name}"));
        let v: Vec<f64> = (0..rows * cols).map(|_| gaussian(&mut r) * 0.02).collect();
        self.insert(name, (rows, cols), v);
    }

    /// Layer-norm affine pair: gamma ones, beta zeros.
    pub fn insert_layer_norm(&mut self, prefix: &str, cols: usize) {
        self.insert(&format!("{prefix}.gamma"), (1, cols), vec![1.0; cols]);
        self.insert(&format!("{prefix}.beta"), (1, cols), vec![0.0; cols]);
    }

    /// Round every value to the nearest f32. Evaluation and checkpointing both
    /// work at this precision, which is what makes a save/load round trip
    /// metrics-identical.
    pub fn snapped_to_f32(&self) -> ParamStore {
        let mut out = self.clone();
        for p in out.params.values_mut() {
            for v in p.value.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        out
    }

    /// One Adam step with bias correction. `lr_map` pairs name prefixes with
    /// learning rates; the longest matching prefix wins (use an `""` entry as
    /// the default bucket). Every parameter must have a gradient entry.
    pub fn adam_step(
        &mut self,
        grads: &BTreeMap<String, Vec<f64>>,
        lr_map: &[(&str, f64)],
        cfg: AdamConfig,
    ) -> Result<()> {
        let t = (self.step + 1) as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for (name, p) in self.params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Numeric(format!("adam: missing gradient for parameter '{name}'")))?;
            if g.len() != p.value.len() {
                return Err(Error::Numeric(format!(
                    "adam: gradient length {} != parameter length {} for '{name}'",
                    g.len(),
                    p.value.len()
                )));
            }
            let lr = lr_for(name, lr_map)
                .ok_or_else(|| Error::Config(format!("adam: no learning rate bucket matches '{name}'")))?;
            for i in 0..g.len() {
                p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g[i];
                p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                p.value[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}

fn lr_for(name: &str, lr_map: &[(&str, f64)]) -> Option<f64> {
    lr_map
        .iter()
        .filter(|(prefix, _)| name.starts_with(prefix))
        .max_by_key(|(prefix, _)| prefix.len())
        .map(|(_, lr)| *lr)
}

/// Standard normal via Box-Muller; two uniform draws per sample keeps the
/// stream layout fixed.
pub fn gaussian(r: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = r.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = r.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, value: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let n = value.len();
        s.insert(name, (1, n), value);
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = store_with("w", vec![0.5, -0.25, 3.0]);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.0; 3]);
        for _ in 0..5 {
            s.adam_step(&grads, &[("", 0.1)], AdamConfig::default()).unwrap();
        }
        assert_eq!(s.get("w").unwrap().value, vec![0.5, -0.25, 3.0]);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // Bias correction makes the very first update lr * g/|g| (up to eps).
        let mut s = store_with("w", vec![1.0]);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![1.0]);
        s.adam_step(&grads, &[("", 0.1)], AdamConfig::default()).unwrap();
        let w = s.get("w").unwrap().value[0];
        assert!((w - 0.9).abs() < 1e-6, "expected ~0.9, got {w}");
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut r = crate::rng::stream(11, "bowl");
        let init: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut s = store_with("w", init);
        for _ in 0..2000 {
            let w = s.get("w").unwrap().value.clone();
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), w.iter().map(|x| 2.0 * x).collect());
            s.adam_step(&grads, &[("", 0.05)], AdamConfig::default()).unwrap();
        }
        let loss: f64 = s.get("w").unwrap().value.iter().map(|x| x * x).sum();
        assert!(loss < 1e-6, "loss {loss} after 2000 steps");
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut s = store_with("visual.w", vec![1.0]);
        let err = s.adam_step(&BTreeMap::new(), &[("", 0.1)], AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("visual.w"), "{err}");
    }

    #[test]
    fn longest_prefix_wins() {
        assert_eq!(lr_for("language.embed", &[("", 1.0), ("language.", 2.0)]), Some(2.0));
        assert_eq!(lr_for("visual.point", &[("", 1.0), ("language.", 2.0)]), Some(1.0));
    }
}
