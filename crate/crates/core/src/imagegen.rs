//! Image reconstruction network: a generator maps a block of mel frames
//! plus one facial frame to an RGB image of the target speaker, trained
//! with a least-squares adversarial objective and a weighted L1
//! reconstruction term against real frames.
//!
//! The generator fuses the concatenated inputs through two fully
//! connected layers, reshapes the fused vector into a single-channel
//! square map, and grows it to the output resolution with stride-1
//! convolutions interleaved with stride-2 transposed convolutions.
//! Batch normalization runs before each hidden activation; the output
//! layer squashes to [0, 1] with a logistic. The discriminator is a
//! plain strided conv net with max pooling, no normalization, and a
//! linear scoring head.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, Array4, Axis, Ix2, Ix4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{collect_arrays, load_checkpoint, restore_arrays, save_checkpoint};
use crate::error::{Error, Result};
use crate::nn::conv1d::BatchNorm1d;
use crate::nn::conv2d::{BatchNorm2d, Conv2d, ConvTranspose2d, MaxPool2d};
use crate::nn::dense::Dense;
use crate::nn::{join, zero_grads, Adam, HasParams, ParamVisitor, Relu, Sigmoid, StateVisitor};
use crate::synth::{derive_rng, tag};

pub const IMAGE_CHANNELS: usize = 3;

/// An RGB image stored as a (height, width, 3) tensor with values in
/// [0, 1]. The full-scale model produces 256 x 256 frames; shrunk
/// configurations produce smaller squares with the same contract.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pixels: Array3<f64>,
}

impl RgbImage {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if c != IMAGE_CHANNELS {
            return Err(Error::shape(format!(
                "image must have {IMAGE_CHANNELS} channels, got {c}"
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::invalid("image has an empty spatial axis"));
        }
        if !pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::invalid("pixel values must lie in [0, 1]"));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    /// Writes the image as an 8-bit RGB PNG, rounding each value to the
    /// nearest of 256 levels.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (h, w, _) = self.pixels.dim();
        let mut data = Vec::with_capacity(h * w * IMAGE_CHANNELS);
        for v in self.pixels.iter() {
            data.push((v * 255.0).round() as u8);
        }
        let buf: image::RgbImage =
            image::ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer sized to fit");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Format {
                path: path.display().to_string(),
                reason: e.to_string(),
            })
    }

    /// Reads an 8-bit RGB PNG, mapping levels back to [0, 1].
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::Format {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?
            .into_rgb8();
        let (w, h) = img.dimensions();
        let data: Vec<f64> = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        let pixels = Array3::from_shape_vec((h as usize, w as usize, IMAGE_CHANNELS), data)
            .expect("raw buffer matches dimensions");
        Self::new(pixels)
    }
}

/// Architecture and training constants for the image network pair.
///
/// `gen_channels` lists the output channels of the convolutional part of
/// the generator; every listed layer except the last is a hidden layer
/// with normalization and activation, and `deconv_positions` marks which
/// hidden layers are stride-2 transposed convolutions (the rest are
/// stride-1). The last entry is the stride-1 RGB projection. Each
/// discriminator stage halves the side twice, once by conv stride and
/// once by pooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGanConfig {
    pub in_mel_frames: usize,
    pub mel_dim: usize,
    pub facial_dim: usize,
    pub fc_widths: [usize; 2],
    pub reshape_side: usize,
    pub gen_channels: Vec<usize>,
    pub deconv_positions: Vec<usize>,
    pub deconv_kernel: usize,
    pub conv_kernel: usize,
    pub disc_channels: Vec<usize>,
    pub disc_kernel: usize,
    pub image_side: usize,
    pub l1_weight: f64,
    pub lr_g: f64,
    pub lr_d: f64,
}

impl ImageGanConfig {
    /// Full-scale configuration: 8 mel frames plus one facial frame in,
    /// 256 x 256 x 3 out, with the published channel counts.
    pub fn paper() -> Self {
        Self {
            in_mel_frames: 8,
            mel_dim: crate::features::MEL_DIM,
            facial_dim: crate::features::FACIAL_DIM,
            fc_widths: [4096, 4096],
            reshape_side: 64,
            gen_channels: vec![64, 64, 128, 128, 64, 64, 3],
            deconv_positions: vec![0, 2],
            deconv_kernel: 5,
            conv_kernel: 3,
            disc_channels: vec![8, 16, 32, 32],
            disc_kernel: 3,
            image_side: 256,
            l1_weight: 10.0,
            lr_g: 1e-3,
            lr_d: 1e-5,
        }
    }

    /// Shrunk configuration for fast experiments: same layer plan,
    /// smaller widths and 32 x 32 output.
    pub fn desk() -> Self {
        Self {
            in_mel_frames: 8,
            mel_dim: crate::features::MEL_DIM,
            facial_dim: crate::features::FACIAL_DIM,
            fc_widths: [128, 64],
            reshape_side: 8,
            gen_channels: vec![8, 8, 12, 12, 8, 8, 3],
            deconv_positions: vec![0, 2],
            deconv_kernel: 5,
            conv_kernel: 3,
            disc_channels: vec![8, 16],
            disc_kernel: 3,
            image_side: 32,
            l1_weight: 10.0,
            lr_g: 1e-3,
            lr_d: 1e-5,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.in_mel_frames * self.mel_dim + self.facial_dim
    }

    /// Side length of the discriminator's final feature map.
    pub fn disc_feature_side(&self) -> usize {
        let mut side = self.image_side;
        for _ in &self.disc_channels {
            side = side.div_ceil(2) / 2;
        }
        side
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim() == 0 {
            return Err(Error::config("input dimension must be positive"));
        }
        if self.fc_widths.iter().any(|&w| w == 0) {
            return Err(Error::config("fully connected widths must be positive"));
        }
        if self.reshape_side == 0 || self.fc_widths[1] != self.reshape_side * self.reshape_side {
            return Err(Error::config(format!(
                "second fc width {} must equal reshape side {} squared",
                self.fc_widths[1], self.reshape_side
            )));
        }
        if self.gen_channels.is_empty() || self.gen_channels.iter().any(|&c| c == 0) {
            return Err(Error::config("generator channel list must be non-empty and positive"));
        }
        if *self.gen_channels.last().unwrap() != IMAGE_CHANNELS {
            return Err(Error::config(format!(
                "last generator channel count must be {IMAGE_CHANNELS}"
            )));
        }
        let hidden = self.gen_channels.len() - 1;
        if !self.deconv_positions.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("deconv positions must be strictly increasing"));
        }
        if self.deconv_positions.iter().any(|&p| p >= hidden) {
            return Err(Error::config(format!(
                "deconv positions must index hidden layers 0..{hidden}"
            )));
        }
        if self.deconv_kernel < 2 {
            return Err(Error::config("transposed conv kernel must cover its stride of 2"));
        }
        if self.conv_kernel == 0 {
            return Err(Error::config("conv kernel must be positive"));
        }
        let doublings = self.deconv_positions.len() as u32;
        let grown = self
            .reshape_side
            .checked_shl(doublings)
            .ok_or_else(|| Error::config("upsampling overflows the side length"))?;
        if grown != self.image_side {
            return Err(Error::config(format!(
                "reshape side {} with {} stride-2 layers gives {grown}, not image side {}",
                self.reshape_side, doublings, self.image_side
            )));
        }
        if self.disc_channels.is_empty() || self.disc_channels.iter().any(|&c| c == 0) {
            return Err(Error::config("discriminator channel list must be non-empty and positive"));
        }
        if self.disc_kernel == 0 {
            return Err(Error::config("discriminator kernel must be positive"));
        }
        let mut side = self.image_side;
        for i in 0..self.disc_channels.len() {
            let after_conv = side.div_ceil(2);
            if after_conv % 2 != 0 {
                return Err(Error::config(format!(
                    "discriminator stage {i} pools an odd side {after_conv}"
                )));
            }
            side = after_conv / 2;
        }
        for (name, v) in [
            ("l1_weight", self.l1_weight),
            ("lr_g", self.lr_g),
            ("lr_d", self.lr_d),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

fn check_feature_shapes(
    cfg: &ImageGanConfig,
    mel_block: &Array2<f64>,
    facial: &Array1<f64>,
) -> Result<()> {
    if mel_block.dim() != (cfg.in_mel_frames, cfg.mel_dim) {
        return Err(Error::shape(format!(
            "mel block must be {} x {}, got {} x {}",
            cfg.in_mel_frames,
            cfg.mel_dim,
            mel_block.dim().0,
            mel_block.dim().1
        )));
    }
    if facial.len() != cfg.facial_dim {
        return Err(Error::shape(format!(
            "facial vector must have {} dims, got {}",
            cfg.facial_dim,
            facial.len()
        )));
    }
    Ok(())
}

fn write_input_row(row: &mut ndarray::ArrayViewMut1<'_, f64>, mel_block: &Array2<f64>, facial: &Array1<f64>) {
    let mut col = 0;
    for v in mel_block.iter() {
        row[col] = *v;
        col += 1;
    }
    for v in facial.iter() {
        row[col] = *v;
        col += 1;
    }
}

#[derive(Debug)]
struct FcBlock {
    dense: Dense,
    bn: BatchNorm1d,
    relu: Relu<Ix2>,
}

impl FcBlock {
    fn new(rng: &mut rand_chacha::ChaCha8Rng, in_features: usize, out_features: usize) -> Self {
        Self {
            dense: Dense::new(rng, in_features, out_features),
            bn: BatchNorm1d::new(out_features),
            relu: Relu::new(),
        }
    }

    fn forward_train(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let h = self.dense.forward(x);
        let (b, f) = h.dim();
        let n = self.bn.forward_train(&h.insert_axis(Axis(1)));
        let n = n.into_shape((b, f)).expect("unit axis removed");
        self.relu.forward(&n)
    }

    fn forward_eval(&self, x: &Array2<f64>) -> Array2<f64> {
        let h = self.dense.forward_eval(x);
        let (b, f) = h.dim();
        let n = self.bn.forward_eval(&h.insert_axis(Axis(1)));
        let n = n.into_shape((b, f)).expect("unit axis removed");
        self.relu.forward_eval(&n)
    }

    fn backward(&mut self, gy: &Array2<f64>) -> Array2<f64> {
        let g = self.relu.backward(gy);
        let (b, f) = g.dim();
        let g = self.bn.backward(&g.insert_axis(Axis(1)));
        let g = g.into_shape((b, f)).expect("unit axis removed");
        self.dense.backward(&g)
    }
}

impl HasParams for FcBlock {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.dense.visit_params(&join(prefix, "dense"), v);
        self.bn.visit_params(&join(prefix, "bn"), v);
    }

    fn visit_state(&mut self, prefix: &str, v: &mut dyn StateVisitor) {
        self.bn.visit_state(&join(prefix, "bn"), v);
    }
}

#[derive(Debug)]
enum GenLayer {
    Conv(Conv2d),
    Deconv(ConvTranspose2d),
}

impl GenLayer {
    fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        match self {
            GenLayer::Conv(l) => l.forward(x),
            GenLayer::Deconv(l) => l.forward(x),
        }
    }

    fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        match self {
            GenLayer::Conv(l) => l.forward_eval(x),
            GenLayer::Deconv(l) => l.forward_eval(x),
        }
    }

    fn backward(&mut self, gy: &Array4<f64>) -> Array4<f64> {
        match self {
            GenLayer::Conv(l) => l.backward(gy),
            GenLayer::Deconv(l) => l.backward(gy),
        }
    }

    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        match self {
            GenLayer::Conv(l) => l.visit_params(prefix, v),
            GenLayer::Deconv(l) => l.visit_params(prefix, v),
        }
    }

    #[cfg(test)]
    fn is_deconv(&self) -> bool {
        matches!(self, GenLayer::Deconv(_))
    }
}

#[derive(Debug)]
struct GenBlock {
    layer: GenLayer,
    bn: BatchNorm2d,
    relu: Relu<Ix4>,
}

/// Generator network producing target-speaker frames from fused
/// audiovisual features.
#[derive(Debug)]
pub struct Generator {
    cfg: ImageGanConfig,
    fc1: FcBlock,
    fc2: FcBlock,
    blocks: Vec<GenBlock>,
    out_conv: Conv2d,
    out_act: Sigmoid<Ix4>,
}

impl Generator {
    pub fn new(cfg: &ImageGanConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derive_rng(seed, &[tag("imagegen-generator")]);
        let fc1 = FcBlock::new(&mut rng, cfg.input_dim(), cfg.fc_widths[0]);
        let fc2 = FcBlock::new(&mut rng, cfg.fc_widths[0], cfg.fc_widths[1]);
        let mut blocks = Vec::new();
        let mut c_in = 1;
        let hidden = cfg.gen_channels.len() - 1;
        for (i, &c_out) in cfg.gen_channels.iter().take(hidden).enumerate() {
            let layer = if cfg.deconv_positions.contains(&i) {
                GenLayer::Deconv(ConvTranspose2d::new(&mut rng, c_in, c_out, cfg.deconv_kernel, 2))
            } else {
                GenLayer::Conv(Conv2d::new(&mut rng, c_in, c_out, cfg.conv_kernel, 1))
            };
            blocks.push(GenBlock {
                layer,
                bn: BatchNorm2d::new(c_out),
                relu: Relu::new(),
            });
            c_in = c_out;
        }
        let out_conv = Conv2d::new(&mut rng, c_in, IMAGE_CHANNELS, cfg.conv_kernel, 1);
        Ok(Self {
            cfg: cfg.clone(),
            fc1,
            fc2,
            blocks,
            out_conv,
            out_act: Sigmoid::new(),
        })
    }

    pub fn cfg(&self) -> &ImageGanConfig {
        &self.cfg
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.dim().0 == 0 {
            return Err(Error::invalid("empty input batch"));
        }
        if x.dim().1 != self.cfg.input_dim() {
            return Err(Error::shape(format!(
                "input width {} does not match expected {}",
                x.dim().1,
                self.cfg.input_dim()
            )));
        }
        Ok(())
    }

    /// Training-mode forward over a batch of fused input rows, returning
    /// (batch, side, side, 3) images and caching for `backward`.
    pub fn forward_train(&mut self, x: &Array2<f64>) -> Result<Array4<f64>> {
        self.check_input(x)?;
        let h = self.fc1.forward_train(x);
        let h = self.fc2.forward_train(&h);
        let b = h.dim().0;
        let s = self.cfg.reshape_side;
        let mut img = h.into_shape((b, s, s, 1)).expect("fc width matches reshape");
        for blk in &mut self.blocks {
            let y = blk.layer.forward(&img);
            let y = blk.bn.forward_train(&y);
            img = blk.relu.forward(&y);
        }
        let pre = self.out_conv.forward(&img);
        Ok(self.out_act.forward(&pre))
    }

    /// Inference-mode forward using running normalization statistics.
    pub fn forward_eval(&self, x: &Array2<f64>) -> Result<Array4<f64>> {
        self.check_input(x)?;
        let h = self.fc1.forward_eval(x);
        let h = self.fc2.forward_eval(&h);
        let b = h.dim().0;
        let s = self.cfg.reshape_side;
        let mut img = h.into_shape((b, s, s, 1)).expect("fc width matches reshape");
        for blk in &self.blocks {
            let y = blk.layer.forward_eval(&img);
            let y = blk.bn.forward_eval(&y);
            img = blk.relu.forward_eval(&y);
        }
        let pre = self.out_conv.forward_eval(&img);
        Ok(self.out_act.forward_eval(&pre))
    }

    /// Accumulates parameter gradients from image-space gradients and
    /// returns the gradient with respect to the input rows.
    pub fn backward(&mut self, gy: &Array4<f64>) -> Array2<f64> {
        let g = self.out_act.backward(gy);
        let mut g = self.out_conv.backward(&g);
        for blk in self.blocks.iter_mut().rev() {
            let gr = blk.relu.backward(&g);
            let gb = blk.bn.backward(&gr);
            g = blk.layer.backward(&gb);
        }
        let (b, s, _, _) = g.dim();
        let g = g.into_shape((b, s * s)).expect("single channel map");
        let g = self.fc2.backward(&g);
        self.fc1.backward(&g)
    }

    /// Renders one frame from a mel block and a facial vector.
    pub fn generate_image(&self, mel_block: &Array2<f64>, facial: &Array1<f64>) -> Result<RgbImage> {
        check_feature_shapes(&self.cfg, mel_block, facial)?;
        let mut x = Array2::zeros((1, self.cfg.input_dim()));
        write_input_row(&mut x.row_mut(0), mel_block, facial);
        let out = self.forward_eval(&x)?;
        RgbImage::new(out.index_axis(Axis(0), 0).to_owned())
    }

    pub fn save(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let cfg = self.cfg.clone();
        let arrays = collect_arrays(self);
        save_checkpoint(path.as_ref(), &cfg, &arrays)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (cfg_json, arrays) = load_checkpoint(path.as_ref())?;
        let cfg: ImageGanConfig = serde_json::from_value(cfg_json)
            .map_err(|e| Error::config(format!("bad generator checkpoint config: {e}")))?;
        let mut net = Self::new(&cfg, 0)?;
        restore_arrays(&mut net, &arrays)?;
        Ok(net)
    }
}

impl HasParams for Generator {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.fc1.visit_params(&join(prefix, "fc.0"), v);
        self.fc2.visit_params(&join(prefix, "fc.1"), v);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            let base = join(prefix, &format!("block.{i}"));
            blk.layer.visit_params(&join(&base, "conv"), v);
            blk.bn.visit_params(&join(&base, "bn"), v);
        }
        self.out_conv.visit_params(&join(prefix, "out"), v);
    }

    fn visit_state(&mut self, prefix: &str, v: &mut dyn StateVisitor) {
        self.fc1.visit_state(&join(prefix, "fc.0"), v);
        self.fc2.visit_state(&join(prefix, "fc.1"), v);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.bn.visit_state(&join(prefix, &format!("block.{i}.bn")), v);
        }
    }
}

#[derive(Debug)]
struct DiscStage {
    conv: Conv2d,
    relu: Relu<Ix4>,
    pool: MaxPool2d,
}

/// Scoring network distinguishing real target frames from generated
/// ones. Each stage halves the side by conv stride and again by
/// pooling.
#[derive(Debug)]
pub struct Discriminator {
    cfg: ImageGanConfig,
    stages: Vec<DiscStage>,
    head: Dense,
    feature_side: usize,
}

impl Discriminator {
    pub fn new(cfg: &ImageGanConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derive_rng(seed, &[tag("imagegen-discriminator")]);
        let mut stages = Vec::new();
        let mut c_in = IMAGE_CHANNELS;
        for &c_out in &cfg.disc_channels {
            stages.push(DiscStage {
                conv: Conv2d::new(&mut rng, c_in, c_out, cfg.disc_kernel, 2),
                relu: Relu::new(),
                pool: MaxPool2d::new(),
            });
            c_in = c_out;
        }
        let feature_side = cfg.disc_feature_side();
        let head = Dense::new(&mut rng, c_in * feature_side * feature_side, 1);
        Ok(Self {
            cfg: cfg.clone(),
            stages,
            head,
            feature_side,
        })
    }

    pub fn cfg(&self) -> &ImageGanConfig {
        &self.cfg
    }

    pub fn feature_side(&self) -> usize {
        self.feature_side
    }

    fn check_images(&self, imgs: &Array4<f64>) -> Result<()> {
        let (b, h, w, c) = imgs.dim();
        if b == 0 {
            return Err(Error::invalid("empty image batch"));
        }
        if h != self.cfg.image_side || w != self.cfg.image_side || c != IMAGE_CHANNELS {
            return Err(Error::shape(format!(
                "images must be {side} x {side} x {IMAGE_CHANNELS}, got {h} x {w} x {c}",
                side = self.cfg.image_side
            )));
        }
        Ok(())
    }

    /// Scores a batch of images, caching for `backward`.
    pub fn forward_train(&mut self, imgs: &Array4<f64>) -> Result<Array1<f64>> {
        self.check_images(imgs)?;
        let mut x = imgs.clone();
        for stage in &mut self.stages {
            let y = stage.conv.forward(&x);
            let y = stage.relu.forward(&y);
            x = stage.pool.forward(&y);
        }
        let (b, h, w, c) = x.dim();
        let flat = x.into_shape((b, h * w * c)).expect("contiguous features");
        let scores = self.head.forward(&flat);
        Ok(scores.index_axis(Axis(1), 0).to_owned())
    }

    /// Inference-mode scoring.
    pub fn forward_eval(&self, imgs: &Array4<f64>) -> Result<Array1<f64>> {
        self.check_images(imgs)?;
        let mut x = imgs.clone();
        for stage in &self.stages {
            let y = stage.conv.forward_eval(&x);
            let y = stage.relu.forward_eval(&y);
            x = stage.pool.forward_eval(&y);
        }
        let (b, h, w, c) = x.dim();
        let flat = x.into_shape((b, h * w * c)).expect("contiguous features");
        let scores = self.head.forward_eval(&flat);
        Ok(scores.index_axis(Axis(1), 0).to_owned())
    }

    /// Scores one image.
    pub fn score_image(&self, img: &RgbImage) -> Result<f64> {
        let (h, w, c) = img.pixels().dim();
        let batch = img
            .pixels()
            .clone()
            .into_shape((1, h, w, c))
            .expect("batch axis added");
        Ok(self.forward_eval(&batch)?[0])
    }

    /// Accumulates parameter gradients from score gradients and returns
    /// the gradient with respect to the input images.
    pub fn backward(&mut self, dscores: &Array1<f64>) -> Array4<f64> {
        let g2 = dscores.clone().insert_axis(Axis(1));
        let g = self.head.backward(&g2);
        let b = g.dim().0;
        let c = *self.cfg.disc_channels.last().unwrap();
        let s = self.feature_side;
        let mut g4 = g.into_shape((b, s, s, c)).expect("head input shape");
        for stage in self.stages.iter_mut().rev() {
            let gp = stage.pool.backward(&g4);
            let gr = stage.relu.backward(&gp);
            g4 = stage.conv.backward(&gr);
        }
        g4
    }

    pub fn save(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let cfg = self.cfg.clone();
        let arrays = collect_arrays(self);
        save_checkpoint(path.as_ref(), &cfg, &arrays)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (cfg_json, arrays) = load_checkpoint(path.as_ref())?;
        let cfg: ImageGanConfig = serde_json::from_value(cfg_json)
            .map_err(|e| Error::config(format!("bad discriminator checkpoint config: {e}")))?;
        let mut net = Self::new(&cfg, 0)?;
        restore_arrays(&mut net, &arrays)?;
        Ok(net)
    }
}

impl HasParams for Discriminator {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        for (i, stage) in self.stages.iter_mut().enumerate() {
            stage
                .conv
                .visit_params(&join(prefix, &format!("stage.{i}.conv")), v);
        }
        self.head.visit_params(&join(prefix, "head"), v);
    }
}

/// Least-squares discriminator loss with labels 1 for real and 0 for
/// fake: half the mean squared distance of each score to its label.
pub fn lsgan_d_loss(real_scores: &Array1<f64>, fake_scores: &Array1<f64>) -> f64 {
    let r = real_scores
        .mapv(|s| (s - 1.0).powi(2))
        .mean()
        .expect("non-empty scores");
    let f = fake_scores.mapv(|s| s * s).mean().expect("non-empty scores");
    0.5 * r + 0.5 * f
}

/// Least-squares generator objective: push fake scores to the real
/// label 1 and add an L1 reconstruction term scaled by `l1_weight`.
pub fn lsgan_g_loss(
    fake_scores: &Array1<f64>,
    fake: &Array4<f64>,
    real: &Array4<f64>,
    l1_weight: f64,
) -> f64 {
    let adv = fake_scores
        .mapv(|s| (s - 1.0).powi(2))
        .mean()
        .expect("non-empty scores");
    0.5 * adv + l1_weight * mean_abs_diff(fake, real)
}

/// Mean absolute difference over every element of two equal-shape
/// image batches.
pub fn mean_abs_diff(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "image batches must match");
    (a - b).mapv(f64::abs).mean().expect("non-empty batch")
}

fn l1_sign(delta: f64) -> f64 {
    if delta > 0.0 {
        1.0
    } else if delta < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One training pair: the fused inputs for a frame and the real target
/// frame it should reconstruct.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub mel_block: Array2<f64>,
    pub facial: Array1<f64>,
    pub target: RgbImage,
}

/// Loss values from one adversarial step. `l1` is the unweighted mean
/// absolute pixel error inside `g_loss`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub d_loss: f64,
    pub g_loss: f64,
    pub l1: f64,
}

/// One alternating update: the discriminator trains on real frames and
/// detached fakes, then the generator trains through the refreshed
/// discriminator plus the weighted L1 term.
pub fn lsgan_step(
    g: &mut Generator,
    d: &mut Discriminator,
    batch: &[ImageSample],
    opt_g: &mut Adam,
    opt_d: &mut Adam,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::invalid("training batch is empty"));
    }
    if g.cfg != d.cfg {
        return Err(Error::config("generator and discriminator configs differ"));
    }
    let cfg = g.cfg.clone();
    let n = batch.len();
    let mut x = Array2::zeros((n, cfg.input_dim()));
    let mut real = Array4::zeros((n, cfg.image_side, cfg.image_side, IMAGE_CHANNELS));
    for (i, sample) in batch.iter().enumerate() {
        check_feature_shapes(&cfg, &sample.mel_block, &sample.facial)
            .map_err(|e| Error::invalid(format!("sample {i}: {e}")))?;
        let (h, w, _) = sample.target.pixels().dim();
        if h != cfg.image_side || w != cfg.image_side {
            return Err(Error::shape(format!(
                "sample {i}: target image is {h} x {w}, expected {side} x {side}",
                side = cfg.image_side
            )));
        }
        write_input_row(&mut x.row_mut(i), &sample.mel_block, &sample.facial);
        real.index_axis_mut(Axis(0), i).assign(sample.target.pixels());
    }

    let fake = g.forward_train(&x)?;
    let nf = n as f64;

    zero_grads(d);
    let real_scores = d.forward_train(&real)?;
    let dreal = real_scores.mapv(|s| (s - 1.0) / nf);
    let _ = d.backward(&dreal);
    let fake_scores = d.forward_train(&fake)?;
    let dfake = fake_scores.mapv(|s| s / nf);
    let _ = d.backward(&dfake);
    let d_loss = lsgan_d_loss(&real_scores, &fake_scores);
    opt_d.step(d);

    zero_grads(g);
    zero_grads(d);
    let fake_scores2 = d.forward_train(&fake)?;
    let l1 = mean_abs_diff(&fake, &real);
    let g_loss = lsgan_g_loss(&fake_scores2, &fake, &real, cfg.l1_weight);
    let dscores = fake_scores2.mapv(|s| (s - 1.0) / nf);
    let mut dimg = d.backward(&dscores);
    let scale = cfg.l1_weight / fake.len() as f64;
    {
        let ds = dimg.as_slice_mut().expect("standard layout");
        let fs = fake.as_slice().expect("standard layout");
        let rs = real.as_slice().expect("standard layout");
        for ((dv, fv), rv) in ds.iter_mut().zip(fs).zip(rs) {
            *dv += scale * l1_sign(fv - rv);
        }
    }
    let _ = g.backward(&dimg);
    opt_g.step(g);
    zero_grads(d);

    Ok(StepLosses { d_loss, g_loss, l1 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGanHyper {
    pub batch: usize,
    pub epochs: usize,
}

impl Default for ImageGanHyper {
    fn default() -> Self {
        Self { batch: 64, epochs: 30 }
    }
}

/// Per-epoch mean losses across all batches.
#[derive(Debug, Clone, PartialEq)]
pub struct GanEpoch {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub l1: f64,
}

pub fn gan_trace_csv(trace: &[GanEpoch]) -> String {
    let mut out = String::from("epoch,d_loss,g_loss,l1\n");
    for e in trace {
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.d_loss, e.g_loss, e.l1));
    }
    out
}

/// Trains a fresh generator and discriminator on (features, frame)
/// pairs with alternating least-squares updates. Deterministic for a
/// given seed.
pub fn train_imagegen(
    corpus: &[ImageSample],
    cfg: &ImageGanConfig,
    hyper: &ImageGanHyper,
    seed: u64,
) -> Result<(Generator, Discriminator, Vec<GanEpoch>)> {
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    if hyper.batch == 0 || hyper.epochs == 0 {
        return Err(Error::config("need at least one sample per batch and one epoch"));
    }
    let mut g = Generator::new(cfg, seed)?;
    let mut d = Discriminator::new(cfg, seed)?;
    let mut opt_g = Adam::new(cfg.lr_g);
    let mut opt_d = Adam::new(cfg.lr_d);
    let mut trace = Vec::with_capacity(hyper.epochs);
    for epoch in 1..=hyper.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut rng = derive_rng(seed, &[tag("imagegen-shuffle"), epoch as u64]);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let (mut sd, mut sg, mut sl) = (0.0, 0.0, 0.0);
        let mut seen = 0.0;
        for chunk in order.chunks(hyper.batch) {
            let batch: Vec<ImageSample> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            let losses = lsgan_step(&mut g, &mut d, &batch, &mut opt_g, &mut opt_d)?;
            let w = chunk.len() as f64;
            sd += losses.d_loss * w;
            sg += losses.g_loss * w;
            sl += losses.l1 * w;
            seen += w;
        }
        trace.push(GanEpoch {
            epoch,
            d_loss: sd / seen,
            g_loss: sg / seen,
            l1: sl / seen,
        });
    }
    Ok((g, d, trace))
}
