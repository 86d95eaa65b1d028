//! Named parameter storage, graph loading and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Parameters keyed by dotted names such as `gsca.theta.w`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| invalid(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| invalid(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Loads every parameter into `g` as a leaf.
    pub fn load(&self, g: &mut Graph, trainable: bool) -> GraphParams {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        GraphParams { vars }
    }

    /// Adds a `kh x kw` convolution `name.w` / `name.b` with He-normal weights.
    pub fn init_conv(&mut self, name: &str, kh: usize, kw: usize, cin: usize, cout: usize, rng: &mut impl Rng) {
        let std = (2.0 / (kh * kw * cin) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = kh * kw * cin * cout;
        let w = (0..n).map(|_| normal.sample(rng)).collect();
        self.insert(format!("{name}.w"), Tensor::from_vec(&[kh, kw, cin, cout], w).expect("shape"));
        self.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    }

    pub fn init_conv_zero(&mut self, name: &str, kh: usize, kw: usize, cin: usize, cout: usize) {
        self.insert(format!("{name}.w"), Tensor::zeros(&[kh, kw, cin, cout]));
        self.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    }
}

/// Graph variables for a loaded [`ParamStore`].
pub struct GraphParams {
    vars: BTreeMap<String, Var>,
}

impl GraphParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| invalid(format!("missing parameter `{name}`")))
    }

    /// Applies convolution `name` to `x`.
    pub fn conv(&self, g: &mut Graph, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.get(&format!("{name}.w"))?;
        let b = self.get(&format!("{name}.b"))?;
        g.conv2d(x, w, b, stride)
    }

    /// Gradients after `g.backward`; parameters the loss did not touch get zeros.
    pub fn grads(&self, g: &Graph) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let grad = g
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()));
                (name.clone(), grad)
            })
            .collect()
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// Updates every parameter named in `grads`. Names absent from `grads` are frozen.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let param = store.get_mut(name)?;
            if param.shape() != grad.shape() {
                return Err(invalid(format!("gradient shape mismatch for `{name}`")));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for (((p, &gr), mi), vi) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gr;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gr * gr;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
