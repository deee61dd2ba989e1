//! One-dimensional convolution layers over (batch, time, channel) tensors.
//!
//! Padding follows the "same" convention: for stride s the output length is
//! ceil(T/s), with total padding (out−1)·s + K − T split so the right side
//! gets the extra sample. Transposed convolution inverts the time mapping,
//! producing exactly T·s steps.

use ndarray::{Array1, Array3, Ix1, Ix3};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{join, HasParams, Param, ParamVisitor, StateVisitor};

fn he_weights(rng: &mut ChaCha8Rng, c_out: usize, k: usize, c_in: usize) -> Array3<f64> {
    let std = (2.0 / (k * c_in) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std dev");
    Array3::from_shape_fn((c_out, k, c_in), |_| dist.sample(rng))
}

/// Copies an array into standard (row-major contiguous) layout, so the
/// flat-slice kernels accept inputs of any stride pattern.
fn to_standard(x: &Array3<f64>) -> Array3<f64> {
    if x.is_standard_layout() {
        x.clone()
    } else {
        x.as_standard_layout().into_owned()
    }
}

/// Strided 1-D convolution with same padding.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: Param<Ix3>,
    pub b: Param<Ix1>,
    pub stride: usize,
    cache: Option<Array3<f64>>,
}

impl Conv1d {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        assert!(stride >= 1 && k >= 1);
        Self {
            w: Param::new(he_weights(rng, c_out, k, c_in)),
            b: Param::new(Array1::zeros(c_out)),
            stride,
            cache: None,
        }
    }

    pub fn c_in(&self) -> usize {
        self.w.value.dim().2
    }

    pub fn c_out(&self) -> usize {
        self.w.value.dim().0
    }

    pub fn out_len(&self, t: usize) -> usize {
        t.div_ceil(self.stride)
    }

    fn pad_left(&self, t: usize) -> usize {
        let k = self.w.value.dim().1;
        let out_t = self.out_len(t);
        let total = ((out_t - 1) * self.stride + k).saturating_sub(t);
        total / 2
    }

    fn compute(&self, x: &Array3<f64>) -> Array3<f64> {
        let (bsz, t, c_in) = x.dim();
        let (c_out, k, w_cin) = self.w.value.dim();
        assert_eq!(c_in, w_cin, "channel mismatch");
        let out_t = self.out_len(t);
        let pl = self.pad_left(t) as isize;
        let ws = self.w.value.as_slice().expect("standard layout");
        let xs = x.as_slice().expect("standard layout");
        let mut y = Array3::zeros((bsz, out_t, c_out));
        {
            let ys = y.as_slice_mut().expect("standard layout");
            for b in 0..bsz {
                for to in 0..out_t {
                    let ybase = (b * out_t + to) * c_out;
                    for (o, bias) in self.b.value.iter().enumerate() {
                        ys[ybase + o] = *bias;
                    }
                    for kk in 0..k {
                        let ti = (to * self.stride + kk) as isize - pl;
                        if ti < 0 || ti >= t as isize {
                            continue;
                        }
                        let xbase = (b * t + ti as usize) * c_in;
                        for o in 0..c_out {
                            let wbase = (o * k + kk) * c_in;
                            let mut acc = 0.0;
                            for c in 0..c_in {
                                acc += ws[wbase + c] * xs[xbase + c];
                            }
                            ys[ybase + o] += acc;
                        }
                    }
                }
            }
        }
        y
    }

    pub fn forward(&mut self, x: &Array3<f64>) -> Array3<f64> {
        let x = to_standard(x);
        let y = self.compute(&x);
        self.cache = Some(x);
        y
    }

    pub fn forward_eval(&self, x: &Array3<f64>) -> Array3<f64> {
        if x.is_standard_layout() {
            self.compute(x)
        } else {
            self.compute(&to_standard(x))
        }
    }

    pub fn backward(&mut self, gy: &Array3<f64>) -> Array3<f64> {
        let gy_std;
        let gy = if gy.is_standard_layout() {
            gy
        } else {
            gy_std = to_standard(gy);
            &gy_std
        };
        let x = self.cache.as_ref().expect("forward before backward");
        let (bsz, t, c_in) = x.dim();
        let (c_out, k, _) = self.w.value.dim();
        let out_t = self.out_len(t);
        assert_eq!(gy.dim(), (bsz, out_t, c_out));
        let pl = self.pad_left(t) as isize;

        let ws = self.w.value.as_slice().expect("standard layout");
        let xs = x.as_slice().expect("standard layout");
        let gys = gy.as_slice().expect("standard layout");
        let gws = self.w.grad.as_slice_mut().expect("standard layout");
        let gbs = self.b.grad.as_slice_mut().expect("standard layout");
        let mut gx = Array3::zeros((bsz, t, c_in));
        {
            let gxs = gx.as_slice_mut().expect("standard layout");
            for b in 0..bsz {
                for to in 0..out_t {
                    let ybase = (b * out_t + to) * c_out;
                    for o in 0..c_out {
                        gbs[o] += gys[ybase + o];
                    }
                    for kk in 0..k {
                        let ti = (to * self.stride + kk) as isize - pl;
                        if ti < 0 || ti >= t as isize {
                            continue;
                        }
                        let xbase = (b * t + ti as usize) * c_in;
                        for o in 0..c_out {
                            let g = gys[ybase + o];
                            if g == 0.0 {
                                continue;
                            }
                            let wbase = (o * k + kk) * c_in;
                            for c in 0..c_in {
                                gxs[xbase + c] += ws[wbase + c] * g;
                                gws[wbase + c] += xs[xbase + c] * g;
                            }
                        }
                    }
                }
            }
        }
        gx
    }
}

impl HasParams for Conv1d {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.w.visit(&join(prefix, "w"), v);
        self.b.visit(&join(prefix, "b"), v);
    }
}

/// Transposed 1-D convolution upsampling time by the stride factor.
#[derive(Debug, Clone)]
pub struct ConvTranspose1d {
    pub w: Param<Ix3>,
    pub b: Param<Ix1>,
    pub stride: usize,
    cache: Option<Array3<f64>>,
}

impl ConvTranspose1d {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        assert!(stride >= 1 && k >= stride);
        Self {
            w: Param::new(he_weights(rng, c_out, k, c_in)),
            b: Param::new(Array1::zeros(c_out)),
            stride,
            cache: None,
        }
    }

    pub fn c_in(&self) -> usize {
        self.w.value.dim().2
    }

    pub fn c_out(&self) -> usize {
        self.w.value.dim().0
    }

    pub fn out_len(&self, t: usize) -> usize {
        t * self.stride
    }

    fn pad_left(&self) -> usize {
        let k = self.w.value.dim().1;
        (k - self.stride) / 2
    }

    fn compute(&self, x: &Array3<f64>) -> Array3<f64> {
        let (bsz, t, c_in) = x.dim();
        let (c_out, k, w_cin) = self.w.value.dim();
        assert_eq!(c_in, w_cin, "channel mismatch");
        let out_t = self.out_len(t);
        let pl = self.pad_left() as isize;
        let ws = self.w.value.as_slice().expect("standard layout");
        let xs = x.as_slice().expect("standard layout");
        let mut y = Array3::zeros((bsz, out_t, c_out));
        {
            let ys = y.as_slice_mut().expect("standard layout");
            for b in 0..bsz {
                for to in 0..out_t {
                    let ybase = (b * out_t + to) * c_out;
                    for (o, bias) in self.b.value.iter().enumerate() {
                        ys[ybase + o] = *bias;
                    }
                }
                for ti in 0..t {
                    let xbase = (b * t + ti) * c_in;
                    for kk in 0..k {
                        let to = (ti * self.stride + kk) as isize - pl;
                        if to < 0 || to >= out_t as isize {
                            continue;
                        }
                        let ybase = (b * out_t + to as usize) * c_out;
                        for o in 0..c_out {
                            let wbase = (o * k + kk) * c_in;
                            let mut acc = 0.0;
                            for c in 0..c_in {
                                acc += ws[wbase + c] * xs[xbase + c];
                            }
                            ys[ybase + o] += acc;
                        }
                    }
                }
            }
        }
        y
    }

    pub fn forward(&mut self, x: &Array3<f64>) -> Array3<f64> {
        let x = to_standard(x);
        let y = self.compute(&x);
        self.cache = Some(x);
        y
    }

    pub fn forward_eval(&self, x: &Array3<f64>) -> Array3<f64> {
        if x.is_standard_layout() {
            self.compute(x)
        } else {
            self.compute(&to_standard(x))
        }
    }

    pub fn backward(&mut self, gy: &Array3<f64>) -> Array3<f64> {
        let gy_std;
        let gy = if gy.is_standard_layout() {
            gy
        } else {
            gy_std = to_standard(gy);
            &gy_std
        };
        let x = self.cache.as_ref().expect("forward before backward");
        let (bsz, t, c_in) = x.dim();
        let (c_out, k, _) = self.w.value.dim();
        let out_t = self.out_len(t);
        assert_eq!(gy.dim(), (bsz, out_t, c_out));
        let pl = self.pad_left() as isize;

        let ws = self.w.value.as_slice().expect("standard layout");
        let xs = x.as_slice().expect("standard layout");
        let gys = gy.as_slice().expect("standard layout");
        let gws = self.w.grad.as_slice_mut().expect("standard layout");
        let gbs = self.b.grad.as_slice_mut().expect("standard layout");
        let mut gx = Array3::zeros((bsz, t, c_in));
        {
            let gxs = gx.as_slice_mut().expect("standard layout");
            for b in 0..bsz {
                for to in 0..out_t {
                    let ybase = (b * out_t + to) * c_out;
                    for o in 0..c_out {
                        gbs[o] += gys[ybase + o];
                    }
                }
                for ti in 0..t {
                    let xbase = (b * t + ti) * c_in;
                    for kk in 0..k {
                        let to = (ti * self.stride + kk) as isize - pl;
                        if to < 0 || to >= out_t as isize {
                            continue;
                        }
                        let ybase = (b * out_t + to as usize) * c_out;
                        for o in 0..c_out {
                            let g = gys[ybase + o];
                            if g == 0.0 {
                                continue;
                            }
                            let wbase = (o * k + kk) * c_in;
                            for c in 0..c_in {
                                gxs[xbase + c] += ws[wbase + c] * g;
                                gws[wbase + c] += xs[xbase + c] * g;
                            }
                        }
                    }
                }
            }
        }
        gx
    }
}

impl HasParams for ConvTranspose1d {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.w.visit(&join(prefix, "w"), v);
        self.b.visit(&join(prefix, "b"), v);
    }
}

/// Batch normalization over the batch and time axes, per channel.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: Param<Ix1>,
    pub beta: Param<Ix1>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<(Array3<f64>, Array1<f64>)>,
}

impl BatchNorm1d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Array1::ones(channels)),
            beta: Param::new(Array1::zeros(channels)),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.9,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward_train(&mut self, x: &Array3<f64>) -> Array3<f64> {
        let (bsz, t, c) = x.dim();
        let n = (bsz * t) as f64;
        let mut mean: Array1<f64> = Array1::zeros(c);
        let mut var: Array1<f64> = Array1::zeros(c);
        for b in 0..bsz {
            for ti in 0..t {
                for ch in 0..c {
                    mean[ch] += x[[b, ti, ch]];
                }
            }
        }
        mean.mapv_inplace(|v| v / n);
        for b in 0..bsz {
            for ti in 0..t {
                for ch in 0..c {
                    let d = x[[b, ti, ch]] - mean[ch];
                    var[ch] += d * d;
                }
            }
        }
        var.mapv_inplace(|v| v / n);

        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let mut xhat = x.clone();
        for b in 0..bsz {
            for ti in 0..t {
                for ch in 0..c {
                    xhat[[b, ti, ch]] = (x[[b, ti, ch]] - mean[ch]) * inv_std[ch];
                }
            }
        }
        let mut y = xhat.clone();
        for b in 0..bsz {
            for ti in 0..t {
                for ch in 0..c {
                    y[[b, ti, ch]] = self.gamma.value[ch] * xhat[[b, ti, ch]] + self.beta.value[ch];
                }
            }
        }
        for ch in 0..c {
            self.running_mean[ch] =
                self.momentum * self.running_mean[ch] + (1.0 - self.momentum) * mean[ch];
            self.running_var[ch] =
                self.momentum * self.running_var[ch] + (1.0 - self.momentum) * var[ch];
        }
        self.cache = Some((xhat, inv_std));
        y
    }

    pub fn forward_eval(&self, x: &Array3<f64>) -> Array3<f64> {
        let (bsz, t, c) = x.dim();
        let mut y = x.clone();
        for b in 0..bsz {
            for ti in 0..t {
                for ch in 0..c {
                    let inv = 1.0 / (self.running_var[ch] + self.eps).sqrt();
                    y[[b, ti, ch]] = self.gamma.value[ch] * (x[[b, ti, ch]] - self.running_mean[ch]) * inv
                        + self.beta.value[ch];
                }
            }
        }
        y
    }

    pub fn backward(&mut self, gy: &Array3<f64>) -> Array3<f64> {
        let (xhat, inv_std) = self.cache.as_ref().expect("forward before backward");
        let (bsz, t, c) = xhat.dim();
        let n = (bsz * t) as f64;
        let mut sum_g: Array1<f64> = Array1::zeros(c);
        let mut sum_gx: Array1<f64> = Array1::zeros(c);
        for b in 0..bsz {
            for ti in 0..t {
                for ch in 0..c {
                    let gyh = gy[[b, ti, ch]];
                    sum_g[ch] += gyh;
                    sum_gx[ch] += gyh * xhat[[b, ti, ch]];
                }
            }
        }
        for ch in 0..c {
            self.beta.grad[ch] += sum_g[ch];
            self.gamma.grad[ch] += sum_gx[ch];
        }
        let mut gx = Array3::zeros((bsz, t, c));
        for b in 0..bsz {
            for ti in 0..t {
                for ch in 0..c {
                    let ghat = gy[[b, ti, ch]] * self.gamma.value[ch];
                    let correction = (self.gamma.value[ch] / n)
                        * (sum_g[ch] + xhat[[b, ti, ch]] * sum_gx[ch]);
                    gx[[b, ti, ch]] = (ghat - correction) * inv_std[ch];
                }
            }
        }
        gx
    }
}

impl HasParams for BatchNorm1d {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.gamma.visit(&join(prefix, "gamma"), v);
        self.beta.visit(&join(prefix, "beta"), v);
    }

    fn visit_state(&mut self, prefix: &str, v: &mut dyn StateVisitor) {
        v.visit(&join(prefix, "running_mean"), self.running_mean.view_mut().into_dyn());
        v.visit(&join(prefix, "running_var"), self.running_var.view_mut().into_dyn());
    }
}
