use candle_core::{backprop::GradStore, Tensor, Var};

use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Update rule over named parameters. State is exported so it can travel
/// inside checkpoints.
pub trait Optimizer {
    fn step(&mut self, params: &[(&str, &Var)], grads: &GradStore) -> Result<()>;
    fn learning_rate(&self) -> f64;
    fn state(&self) -> Result<BTreeMap<String, Tensor>>;
    fn load_state(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()>;
}

/// Stochastic gradient descent with momentum and L2 weight decay, using the
/// PyTorch update: `g ← g + λθ; v ← μv + g; θ ← θ − ηv`.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &[(&str, &Var)], grads: &GradStore) -> Result<()> {
        for &(name, var) in params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let theta = var.as_tensor().detach();
            let mut g = g.detach();
            if self.weight_decay != 0.0 {
                g = (g + (&theta * self.weight_decay)?)?;
            }
            let v = match self.velocity.get(name) {
                Some(v) if self.momentum != 0.0 => ((v * self.momentum)? + g)?,
                _ => g,
            };
            var.set(&(theta - (&v * self.lr)?)?)?;
            self.velocity.insert(name.to_string(), v);
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn state(&self) -> Result<BTreeMap<String, Tensor>> {
        Ok(self
            .velocity
            .iter()
            .map(|(k, v)| (format!("velocity.{k}"), v.clone()))
            .collect())
    }

    fn load_state(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        self.velocity = state
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("velocity.").map(|n| (n.to_string(), v.clone())))
            .collect();
        Ok(())
    }
}

/// Adam with bias correction (no weight decay).
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &[(&str, &Var)], grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for &(name, var) in params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * self.lr)?)?)?;
            self.m.insert(name.to_string(), m);
            self.v.insert(name.to_string(), v);
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn state(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut s: BTreeMap<String, Tensor> = BTreeMap::new();
        for (k, v) in &self.m {
            s.insert(format!("m.{k}"), v.clone());
        }
        for (k, v) in &self.v {
            s.insert(format!("v.{k}"), v.clone());
        }
        if !s.is_empty() {
            let dev = s.values().next().unwrap().device().clone();
            s.insert("step".into(), Tensor::new(&[self.step as f32], &dev)?);
        }
        Ok(s)
    }

    fn load_state(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        self.m.clear();
        self.v.clear();
        for (k, v) in state {
            if let Some(n) = k.strip_prefix("m.") {
                self.m.insert(n.to_string(), v.clone());
            } else if let Some(n) = k.strip_prefix("v.") {
                self.v.insert(n.to_string(), v.clone());
            }
        }
        self.step = match state.get("step") {
            Some(t) => t.to_vec1::<f32>()?[0] as u64,
            None if self.m.is_empty() => 0,
            None => return Err(Error::Format("adam state lacks step".into())),
        };
        Ok(())
    }
}
