//! Fully connected layer over (batch, features) matrices.

use ndarray::{Array1, Array2, Ix1, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{join, HasParams, Param, ParamVisitor};

#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Param<Ix2>,
    pub b: Param<Ix1>,
    cache: Option<Array2<f64>>,
}

impl Dense {
    pub fn new(rng: &mut ChaCha8Rng, in_features: usize, out_features: usize) -> Self {
        let std = (2.0 / in_features as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid std dev");
        Self {
            w: Param::new(Array2::from_shape_fn((out_features, in_features), |_| {
                dist.sample(rng)
            })),
            b: Param::new(Array1::zeros(out_features)),
            cache: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.w.value.dim().1
    }

    pub fn out_features(&self) -> usize {
        self.w.value.dim().0
    }

    fn compute(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.value.t());
        for mut row in y.rows_mut() {
            row += &self.b.value;
        }
        y
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        self.cache = Some(x.clone());
        self.compute(x)
    }

    pub fn forward_eval(&self, x: &Array2<f64>) -> Array2<f64> {
        self.compute(x)
    }

    pub fn backward(&mut self, gy: &Array2<f64>) -> Array2<f64> {
        let x = self.cache.as_ref().expect("forward before backward");
        self.w.grad += &gy.t().dot(x);
        for row in gy.rows() {
            self.b.grad += &row;
        }
        gy.dot(&self.w.value)
    }
}

impl HasParams for Dense {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.w.visit(&join(prefix, "w"), v);
        self.b.visit(&join(prefix, "b"), v);
    }
}

#[allow(dead_code)]
fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
