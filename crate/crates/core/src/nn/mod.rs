//! Minimal neural-network engine: parameters, layers, and Adam.
//!
//! All math is f64 and single-threaded. Layers own their parameters and
//! cache whatever the backward pass needs; `forward` then `backward` must
//! be called in matching pairs. Parameters are reached through visitors,
//! which keeps optimizers and checkpointing independent of network
//! structure: every parameter has a stable dotted name assembled from
//! prefixes.

pub mod conv1d;
pub mod conv2d;
pub mod dense;

use std::collections::HashMap;

use ndarray::{Array, ArrayViewMutD, Dimension};

/// A trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<D: Dimension> {
    pub value: Array<f64, D>,
    pub grad: Array<f64, D>,
}

impl<D: Dimension> Param<D> {
    pub fn new(value: Array<f64, D>) -> Self {
        let grad = Array::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn visit(&mut self, name: &str, v: &mut dyn ParamVisitor) {
        v.visit(
            name,
            self.value.view_mut().into_dyn(),
            self.grad.view_mut().into_dyn(),
        );
    }
}

/// Callback over every trainable parameter of a network.
pub trait ParamVisitor {
    fn visit(&mut self, name: &str, value: ArrayViewMutD<'_, f64>, grad: ArrayViewMutD<'_, f64>);
}

/// Callback over non-trainable state (normalization running statistics).
pub trait StateVisitor {
    fn visit(&mut self, name: &str, value: ArrayViewMutD<'_, f64>);
}

/// Anything holding trainable parameters.
pub trait HasParams {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor);
    fn visit_state(&mut self, _prefix: &str, _v: &mut dyn StateVisitor) {}
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

struct ZeroGrads;

impl ParamVisitor for ZeroGrads {
    fn visit(&mut self, _name: &str, _value: ArrayViewMutD<'_, f64>, mut grad: ArrayViewMutD<'_, f64>) {
        grad.fill(0.0);
    }
}

/// Clears every gradient accumulator in the network.
pub fn zero_grads(model: &mut dyn HasParams) {
    model.visit_params("", &mut ZeroGrads);
}

/// Collects parameter names and element counts, in visit order.
pub struct ParamInventory {
    pub entries: Vec<(String, usize)>,
}

impl ParamInventory {
    pub fn of(model: &mut dyn HasParams) -> Self {
        struct V(Vec<(String, usize)>);
        impl ParamVisitor for V {
            fn visit(&mut self, name: &str, value: ArrayViewMutD<'_, f64>, _grad: ArrayViewMutD<'_, f64>) {
                self.0.push((name.to_string(), value.len()));
            }
        }
        let mut v = V(Vec::new());
        model.visit_params("", &mut v);
        Self { entries: v.0 }
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(|(_, n)| n).sum()
    }
}

/// Adam optimizer with state keyed by parameter name.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    state: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            state: HashMap::new(),
        }
    }

    /// Applies one update from the accumulated gradients.
    pub fn step(&mut self, model: &mut dyn HasParams) {
        self.t += 1;
        struct V<'a> {
            lr: f64,
            beta1: f64,
            beta2: f64,
            eps: f64,
            t: u64,
            state: &'a mut HashMap<String, (Vec<f64>, Vec<f64>)>,
        }
        impl ParamVisitor for V<'_> {
            fn visit(
                &mut self,
                name: &str,
                mut value: ArrayViewMutD<'_, f64>,
                grad: ArrayViewMutD<'_, f64>,
            ) {
                let n = value.len();
                let (m, v) = self
                    .state
                    .entry(name.to_string())
                    .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
                assert_eq!(m.len(), n, "parameter {name} changed size");
                let bc1 = 1.0 - self.beta1.powi(self.t as i32);
                let bc2 = 1.0 - self.beta2.powi(self.t as i32);
                for ((x, g), (mi, vi)) in value
                    .iter_mut()
                    .zip(grad.iter())
                    .zip(m.iter_mut().zip(v.iter_mut()))
                {
                    *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                    *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                    let m_hat = *mi / bc1;
                    let v_hat = *vi / bc2;
                    *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
        }
        model.visit_params(
            "",
            &mut V {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                t: self.t,
                state: &mut self.state,
            },
        );
    }
}

/// Elementwise max(0, x) with a cached mask.
#[derive(Debug, Clone, Default)]
pub struct Relu<D: Dimension> {
    mask: Option<Array<bool, D>>,
}

impl<D: Dimension> Relu<D> {
    pub fn new() -> Self {
        Self { mask: None }
    }

    pub fn forward(&mut self, x: &Array<f64, D>) -> Array<f64, D> {
        self.mask = Some(x.mapv(|v| v > 0.0));
        x.mapv(|v| v.max(0.0))
    }

    /// Applies the activation without touching the cache.
    pub fn forward_eval(&self, x: &Array<f64, D>) -> Array<f64, D> {
        x.mapv(|v| v.max(0.0))
    }

    pub fn backward(&self, gy: &Array<f64, D>) -> Array<f64, D> {
        let mask = self.mask.as_ref().expect("forward before backward");
        let mut gx = gy.clone();
        gx.zip_mut_with(mask, |g, &m| {
            if !m {
                *g = 0.0;
            }
        });
        gx
    }
}

/// Elementwise logistic function with a cached output.
#[derive(Debug, Clone, Default)]
pub struct Sigmoid<D: Dimension> {
    y: Option<Array<f64, D>>,
}

impl<D: Dimension> Sigmoid<D> {
    pub fn new() -> Self {
        Self { y: None }
    }

    pub fn forward(&mut self, x: &Array<f64, D>) -> Array<f64, D> {
        let y = x.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.y = Some(y.clone());
        y
    }

    pub fn forward_eval(&self, x: &Array<f64, D>) -> Array<f64, D> {
        x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn backward(&self, gy: &Array<f64, D>) -> Array<f64, D> {
        let y = self.y.as_ref().expect("forward before backward");
        let mut gx = gy.clone();
        gx.zip_mut_with(y, |g, &s| *g *= s * (1.0 - s));
        gx
    }
}
