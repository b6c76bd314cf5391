//! Parameters, parameter traversal and the Adam optimizer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A learnable tensor with its gradient and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    /// Buffers such as running statistics are stored but never optimized.
    pub trainable: bool,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Param {
    pub fn new(shape: &[usize], value: Vec<f32>, trainable: bool) -> Self {
        assert_eq!(value.len(), shape.iter().product::<usize>(), "param shape");
        let n = value.len();
        Self { shape: shape.to_vec(), value, grad: vec![0.0; n], trainable, m: Vec::new(), v: Vec::new() }
    }

    pub fn filled(shape: &[usize], fill: f32, trainable: bool) -> Self {
        Self::new(shape, vec![fill; shape.iter().product()], trainable)
    }

    /// He normal initialization, `N(0, 2 / fan_in)`.
    pub fn he(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
        let n = shape.iter().product();
        Self::new(shape, (0..n).map(|_| normal.sample(rng)).collect(), true)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything holding named parameters.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn trainable_parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                n += p.len();
            }
        });
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    /// Copies of every parameter value in traversal order.
    fn snapshot(&self) -> Vec<Vec<f32>> {
        let mut out = Vec::new();
        self.visit("", &mut |_, p| out.push(p.value.clone()));
        out
    }

    fn restore(&mut self, snapshot: &[Vec<f32>]) {
        let mut it = snapshot.iter();
        self.visit_mut("", &mut |_, p| {
            let v = it.next().expect("snapshot from the same module");
            p.value.copy_from_slice(v);
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-7 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: i32,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update to every trainable parameter and clears gradients.
    pub fn step(&mut self, module: &mut dyn Module) {
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        module.visit_mut("", &mut |_, p| {
            if !p.trainable {
                return;
            }
            if p.m.is_empty() {
                p.m = vec![0.0; p.len()];
                p.v = vec![0.0; p.len()];
            }
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.m[i] = beta1 * p.m[i] + (1.0 - beta1) * g;
                p.v[i] = beta2 * p.v[i] + (1.0 - beta2) * g * g;
                let mh = p.m[i] / c1;
                let vh = p.v[i] / c2;
                p.value[i] -= learning_rate * mh / (vh.sqrt() + epsilon);
                p.grad[i] = 0.0;
            }
        });
    }
}
