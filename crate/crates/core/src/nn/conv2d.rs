//! Two-dimensional convolution layers over (batch, height, width, channel)
//! tensors, with the same padding convention as the 1-D layers.

use ndarray::{Array1, Array4, Ix1, Ix4};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::conv1d::BatchNorm1d;
use super::{join, HasParams, Param, ParamVisitor, StateVisitor};

fn he_weights(rng: &mut ChaCha8Rng, c_out: usize, k: usize, c_in: usize) -> Array4<f64> {
    let std = (2.0 / (k * k * c_in) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std dev");
    Array4::from_shape_fn((c_out, k, k, c_in), |_| dist.sample(rng))
}

fn same_pad(len: usize, k: usize, stride: usize) -> usize {
    let out = len.div_ceil(stride);
    (((out - 1) * stride + k).saturating_sub(len)) / 2
}

/// Copies an array into standard (row-major contiguous) layout, so the
/// flat-slice kernels accept inputs of any stride pattern.
fn to_standard(x: &Array4<f64>) -> Array4<f64> {
    if x.is_standard_layout() {
        x.clone()
    } else {
        x.as_standard_layout().into_owned()
    }
}

/// Strided 2-D convolution with same padding and square kernels.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param<Ix4>,
    pub b: Param<Ix1>,
    pub stride: usize,
    cache: Option<Array4<f64>>,
}

impl Conv2d {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        assert!(stride >= 1 && k >= 1);
        Self {
            w: Param::new(he_weights(rng, c_out, k, c_in)),
            b: Param::new(Array1::zeros(c_out)),
            stride,
            cache: None,
        }
    }

    pub fn c_out(&self) -> usize {
        self.w.value.dim().0
    }

    pub fn out_side(&self, side: usize) -> usize {
        side.div_ceil(self.stride)
    }

    fn compute(&self, x: &Array4<f64>) -> Array4<f64> {
        let (bsz, h, w, c_in) = x.dim();
        let (c_out, k, _, w_cin) = self.w.value.dim();
        assert_eq!(c_in, w_cin, "channel mismatch");
        let (oh, ow) = (self.out_side(h), self.out_side(w));
        let (ph, pw) = (same_pad(h, k, self.stride) as isize, same_pad(w, k, self.stride) as isize);
        let ws = self.w.value.as_slice().expect("standard layout");
        let xs = x.as_slice().expect("standard layout");
        let mut y = Array4::zeros((bsz, oh, ow, c_out));
        {
            let ys = y.as_slice_mut().expect("standard layout");
            for b in 0..bsz {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let ybase = (((b * oh) + oi) * ow + oj) * c_out;
                        for (o, bias) in self.b.value.iter().enumerate() {
                            ys[ybase + o] = *bias;
                        }
                        for ki in 0..k {
                            let ii = (oi * self.stride + ki) as isize - ph;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let jj = (oj * self.stride + kj) as isize - pw;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                let xbase = (((b * h) + ii as usize) * w + jj as usize) * c_in;
                                for o in 0..c_out {
                                    let wbase = (((o * k) + ki) * k + kj) * c_in;
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
            }
        }
        y
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let x = to_standard(x);
        let y = self.compute(&x);
        self.cache = Some(x);
        y
    }

    pub fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        if x.is_standard_layout() {
            self.compute(x)
        } else {
            self.compute(&to_standard(x))
        }
    }

    pub fn backward(&mut self, gy: &Array4<f64>) -> Array4<f64> {
        let gy_std;
        let gy = if gy.is_standard_layout() {
            gy
        } else {
            gy_std = to_standard(gy);
            &gy_std
        };
        let x = self.cache.as_ref().expect("forward before backward");
        let (bsz, h, w, c_in) = x.dim();
        let (c_out, k, _, _) = self.w.value.dim();
        let (oh, ow) = (self.out_side(h), self.out_side(w));
        assert_eq!(gy.dim(), (bsz, oh, ow, c_out));
        let (ph, pw) = (same_pad(h, k, self.stride) as isize, same_pad(w, k, self.stride) as isize);

        let ws = self.w.value.as_slice().expect("standard layout");
        let xs = x.as_slice().expect("standard layout");
        let gys = gy.as_slice().expect("standard layout");
        let gws = self.w.grad.as_slice_mut().expect("standard layout");
        let gbs = self.b.grad.as_slice_mut().expect("standard layout");
        let mut gx = Array4::zeros((bsz, h, w, c_in));
        {
            let gxs = gx.as_slice_mut().expect("standard layout");
            for b in 0..bsz {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let ybase = (((b * oh) + oi) * ow + oj) * c_out;
                        for o in 0..c_out {
                            gbs[o] += gys[ybase + o];
                        }
                        for ki in 0..k {
                            let ii = (oi * self.stride + ki) as isize - ph;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let jj = (oj * self.stride + kj) as isize - pw;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                let xbase = (((b * h) + ii as usize) * w + jj as usize) * c_in;
                                for o in 0..c_out {
                                    let g = gys[ybase + o];
                                    if g == 0.0 {
                                        continue;
                                    }
                                    let wbase = (((o * k) + ki) * k + kj) * c_in;
                                    for c in 0..c_in {
                                        gxs[xbase + c] += ws[wbase + c] * g;
                                        gws[wbase + c] += xs[xbase + c] * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        gx
    }
}

impl HasParams for Conv2d {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.w.visit(&join(prefix, "w"), v);
        self.b.visit(&join(prefix, "b"), v);
    }
}

/// Transposed 2-D convolution upsampling both sides by the stride factor.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub w: Param<Ix4>,
    pub b: Param<Ix1>,
    pub stride: usize,
    cache: Option<Array4<f64>>,
}

impl ConvTranspose2d {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        assert!(stride >= 1 && k >= stride);
        Self {
            w: Param::new(he_weights(rng, c_out, k, c_in)),
            b: Param::new(Array1::zeros(c_out)),
            stride,
            cache: None,
        }
    }

    pub fn c_out(&self) -> usize {
        self.w.value.dim().0
    }

    fn pad(&self) -> isize {
        let k = self.w.value.dim().1;
        ((k - self.stride) / 2) as isize
    }

    fn compute(&self, x: &Array4<f64>) -> Array4<f64> {
        let (bsz, h, w, c_in) = x.dim();
        let (c_out, k, _, w_cin) = self.w.value.dim();
        assert_eq!(c_in, w_cin, "channel mismatch");
        let (oh, ow) = (h * self.stride, w * self.stride);
        let p = self.pad();
        let ws = self.w.value.as_slice().expect("standard layout");
        let xs = x.as_slice().expect("standard layout");
        let mut y = Array4::zeros((bsz, oh, ow, c_out));
        {
            let ys = y.as_slice_mut().expect("standard layout");
            for b in 0..bsz {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let ybase = (((b * oh) + oi) * ow + oj) * c_out;
                        for (o, bias) in self.b.value.iter().enumerate() {
                            ys[ybase + o] = *bias;
                        }
                    }
                }
                for ii in 0..h {
                    for jj in 0..w {
                        let xbase = (((b * h) + ii) * w + jj) * c_in;
                        for ki in 0..k {
                            let oi = (ii * self.stride + ki) as isize - p;
                            if oi < 0 || oi >= oh as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let oj = (jj * self.stride + kj) as isize - p;
                                if oj < 0 || oj >= ow as isize {
                                    continue;
                                }
                                let ybase =
                                    (((b * oh) + oi as usize) * ow + oj as usize) * c_out;
                                for o in 0..c_out {
                                    let wbase = (((o * k) + ki) * k + kj) * c_in;
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
            }
        }
        y
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let x = to_standard(x);
        let y = self.compute(&x);
        self.cache = Some(x);
        y
    }

    pub fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        if x.is_standard_layout() {
            self.compute(x)
        } else {
            self.compute(&to_standard(x))
        }
    }

    pub fn backward(&mut self, gy: &Array4<f64>) -> Array4<f64> {
        let gy_std;
        let gy = if gy.is_standard_layout() {
            gy
        } else {
            gy_std = to_standard(gy);
            &gy_std
        };
        let x = self.cache.as_ref().expect("forward before backward");
        let (bsz, h, w, c_in) = x.dim();
        let (c_out, k, _, _) = self.w.value.dim();
        let (oh, ow) = (h * self.stride, w * self.stride);
        assert_eq!(gy.dim(), (bsz, oh, ow, c_out));
        let p = self.pad();

        let ws = self.w.value.as_slice().expect("standard layout");
        let xs = x.as_slice().expect("standard layout");
        let gys = gy.as_slice().expect("standard layout");
        let gws = self.w.grad.as_slice_mut().expect("standard layout");
        let gbs = self.b.grad.as_slice_mut().expect("standard layout");
        let mut gx = Array4::zeros((bsz, h, w, c_in));
        {
            let gxs = gx.as_slice_mut().expect("standard layout");
            for b in 0..bsz {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let ybase = (((b * oh) + oi) * ow + oj) * c_out;
                        for o in 0..c_out {
                            gbs[o] += gys[ybase + o];
                        }
                    }
                }
                for ii in 0..h {
                    for jj in 0..w {
                        let xbase = (((b * h) + ii) * w + jj) * c_in;
                        for ki in 0..k {
                            let oi = (ii * self.stride + ki) as isize - p;
                            if oi < 0 || oi >= oh as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let oj = (jj * self.stride + kj) as isize - p;
                                if oj < 0 || oj >= ow as isize {
                                    continue;
                                }
                                let ybase =
                                    (((b * oh) + oi as usize) * ow + oj as usize) * c_out;
                                for o in 0..c_out {
                                    let g = gys[ybase + o];
                                    if g == 0.0 {
                                        continue;
                                    }
                                    let wbase = (((o * k) + ki) * k + kj) * c_in;
                                    for c in 0..c_in {
                                        gxs[xbase + c] += ws[wbase + c] * g;
                                        gws[wbase + c] += xs[xbase + c] * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        gx
    }
}

impl HasParams for ConvTranspose2d {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.w.visit(&join(prefix, "w"), v);
        self.b.visit(&join(prefix, "b"), v);
    }
}

/// 2x2 max pooling with stride 2.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2d {
    cache: Option<(Vec<usize>, (usize, usize, usize, usize))>,
}

impl MaxPool2d {
    pub fn new() -> Self {
        Self { cache: None }
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let x_std;
        let x = if x.is_standard_layout() {
            x
        } else {
            x_std = to_standard(x);
            &x_std
        };
        let (bsz, h, w, c) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even sides");
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Array4::zeros((bsz, oh, ow, c));
        let mut argmax = vec![0usize; bsz * oh * ow * c];
        let xs = x.as_slice().expect("standard layout");
        {
            let ys = y.as_slice_mut().expect("standard layout");
            let mut out_idx = 0;
            for b in 0..bsz {
                for oi in 0..oh {
                    for oj in 0..ow {
                        for ch in 0..c {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = 0;
                            for di in 0..2 {
                                for dj in 0..2 {
                                    let idx = (((b * h) + 2 * oi + di) * w + 2 * oj + dj) * c + ch;
                                    if xs[idx] > best {
                                        best = xs[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            ys[out_idx] = best;
                            argmax[out_idx] = best_idx;
                            out_idx += 1;
                        }
                    }
                }
            }
        }
        self.cache = Some((argmax, (bsz, h, w, c)));
        y
    }

    pub fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        let mut scratch = Self::new();
        scratch.forward(x)
    }

    pub fn backward(&self, gy: &Array4<f64>) -> Array4<f64> {
        let (argmax, in_dim) = self.cache.as_ref().expect("forward before backward");
        let mut gx = Array4::zeros(*in_dim);
        {
            let gxs = gx.as_slice_mut().expect("standard layout");
            for (g, &idx) in gy.iter().zip(argmax.iter()) {
                gxs[idx] += *g;
            }
        }
        gx
    }
}

/// Batch normalization per channel over batch and both spatial axes.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    inner: BatchNorm1d,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self { inner: BatchNorm1d::new(channels) }
    }

    fn flatten(x: &Array4<f64>) -> ndarray::Array3<f64> {
        let (b, h, w, c) = x.dim();
        to_standard(x).into_shape((b, h * w, c)).expect("standard layout")
    }

    pub fn forward_train(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let (b, h, w, c) = x.dim();
        self.inner
            .forward_train(&Self::flatten(x))
            .into_shape((b, h, w, c))
            .expect("shape preserved")
    }

    pub fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        let (b, h, w, c) = x.dim();
        self.inner
            .forward_eval(&Self::flatten(x))
            .into_shape((b, h, w, c))
            .expect("shape preserved")
    }

    pub fn backward(&mut self, gy: &Array4<f64>) -> Array4<f64> {
        let (b, h, w, c) = gy.dim();
        self.inner
            .backward(&Self::flatten(gy))
            .into_shape((b, h, w, c))
            .expect("shape preserved")
    }
}

impl HasParams for BatchNorm2d {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.inner.visit_params(prefix, v);
    }

    fn visit_state(&mut self, prefix: &str, v: &mut dyn StateVisitor) {
        self.inner.visit_state(prefix, v);
    }
}
