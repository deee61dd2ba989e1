//! Joint audiovisual transformation network.
//!
//! Maps source (mel, facial) streams to target streams through five
//! sub-networks: an audio encoder that downsamples the mel stream to the
//! facial rate with strided convolutions, a facial encoder, a fusion
//! trunk over the concatenated channels, an audio decoder that restores
//! the mel rate with transposed convolutions, and a facial decoder.
//! Hidden layers apply ReLU then batch normalization; output layers are
//! linear. Residual connections are wired automatically between
//! same-shape encoder and decoder feature maps within each branch.
//!
//! Audio-only and visual-only baseline variants drop the other branch
//! and run every convolution at stride one; the unmodeled stream passes
//! through unchanged.
//!
//! `forward_eval` and `convert` take `&self` and are safe to call
//! concurrently on a frozen network; training mutates a single
//! parameter set single-threadedly.

use std::path::Path;

use ndarray::{concatenate, s, Array3, Axis, Ix3};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::features::{
    FacialFeatureSequence, MelSpectrogram, TrainingWindow, UtteranceFeatures, FACIAL_DIM,
    FRAMES_PER_FACIAL, MEL_DIM,
};
use crate::nn::conv1d::{BatchNorm1d, Conv1d, ConvTranspose1d};
use crate::nn::{join, zero_grads, Adam, HasParams, ParamVisitor, Relu, StateVisitor};
use crate::synth::{derive_rng, tag};

// --------------------------------------------------------------------------
// Configuration
// --------------------------------------------------------------------------

/// Which modalities the network models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Full audiovisual network with both branches and the 8:1 rate tie.
    Joint,
    /// Acoustic-only baseline: no facial layers, all strides one.
    AudioOnly,
    /// Facial-only baseline: no audio layers.
    VisualOnly,
}

/// Hidden-layer channel counts for the five sub-networks. Output layers
/// (to 80 mel and 4236 facial dimensions) are implicit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelPlan {
    pub audio_down: Vec<usize>,
    pub facial_in: Vec<usize>,
    pub fusion: Vec<usize>,
    pub audio_up: Vec<usize>,
    pub facial_out: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformNetConfig {
    pub kernel_size: usize,
    pub audio_down_strides: Vec<usize>,
    pub channel_plan: ChannelPlan,
    pub mode: Mode,
    pub acoustic_loss_weight: f64,
}

impl TransformNetConfig {
    /// Full-size configuration.
    pub fn paper() -> Self {
        Self {
            kernel_size: 5,
            audio_down_strides: vec![2, 2, 2],
            channel_plan: ChannelPlan {
                audio_down: vec![128, 256, 512],
                facial_in: vec![512, 512],
                fusion: vec![1024, 1024],
                audio_up: vec![512, 256, 128],
                facial_out: vec![512],
            },
            mode: Mode::Joint,
            acoustic_loss_weight: 10.0,
        }
    }

    /// Small configuration sized for single-core experiments. The plan is
    /// chosen so that residual pairs exist in both branches: the fusion
    /// output matches the deepest audio encoder map, the first two decoder
    /// inputs match the remaining encoder maps, and the facial decoder's
    /// output-layer input matches the facial encoder output.
    pub fn desk() -> Self {
        Self {
            kernel_size: 5,
            audio_down_strides: vec![2, 2, 2],
            channel_plan: ChannelPlan {
                audio_down: vec![24, 32, 48],
                facial_in: vec![32, 32],
                fusion: vec![64, 48],
                audio_up: vec![32, 24, 16],
                facial_out: vec![32],
            },
            mode: Mode::Joint,
            acoustic_loss_weight: 10.0,
        }
    }

    /// Temporal upsampling factors of the audio decoder layers, chosen to
    /// invert the encoder's downsampling.
    pub fn up_strides(&self) -> Vec<usize> {
        match self.mode {
            Mode::Joint => {
                let mut v = self.audio_down_strides.clone();
                v.reverse();
                v
            }
            Mode::AudioOnly => vec![1; self.channel_plan.audio_up.len()],
            Mode::VisualOnly => Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size != 5 {
            return Err(Error::config(format!(
                "kernel_size must be 5, got {}",
                self.kernel_size
            )));
        }
        if !(self.acoustic_loss_weight.is_finite() && self.acoustic_loss_weight > 0.0) {
            return Err(Error::config(format!(
                "acoustic_loss_weight must be finite and positive, got {}",
                self.acoustic_loss_weight
            )));
        }
        let p = &self.channel_plan;
        let all_channels = p
            .audio_down
            .iter()
            .chain(&p.facial_in)
            .chain(&p.fusion)
            .chain(&p.audio_up)
            .chain(&p.facial_out);
        for &c in all_channels {
            if c == 0 {
                return Err(Error::config("channel counts must be positive"));
            }
        }
        if self.audio_down_strides.len() != p.audio_down.len() {
            return Err(Error::config(format!(
                "audio_down_strides has {} entries for {} audio_down layers",
                self.audio_down_strides.len(),
                p.audio_down.len()
            )));
        }
        if self.audio_down_strides.iter().any(|&st| st == 0) {
            return Err(Error::config("strides must be positive"));
        }
        if p.fusion.is_empty() {
            return Err(Error::config("fusion plan must not be empty"));
        }
        match self.mode {
            Mode::Joint => {
                if p.audio_down.is_empty()
                    || p.facial_in.is_empty()
                    || p.audio_up.is_empty()
                    || p.facial_out.is_empty()
                {
                    return Err(Error::config(
                        "joint mode requires all five sub-network plans to be non-empty",
                    ));
                }
                let prod: usize = self.audio_down_strides.iter().product();
                if prod != FRAMES_PER_FACIAL {
                    return Err(Error::config(format!(
                        "joint mode requires the stride product to be {FRAMES_PER_FACIAL}, \
                         got {prod}"
                    )));
                }
                if p.audio_up.len() != self.audio_down_strides.len() {
                    return Err(Error::config(format!(
                        "audio_up has {} layers but the decoder must invert {} strides",
                        p.audio_up.len(),
                        self.audio_down_strides.len()
                    )));
                }
            }
            Mode::AudioOnly => {
                if !p.facial_in.is_empty() || !p.facial_out.is_empty() {
                    return Err(Error::config("audio_only mode must have no facial layers"));
                }
                if p.audio_down.is_empty() || p.audio_up.is_empty() {
                    return Err(Error::config(
                        "audio_only mode requires audio_down and audio_up layers",
                    ));
                }
                if self.audio_down_strides.iter().any(|&st| st != 1) {
                    return Err(Error::config("audio_only mode requires all strides to be 1"));
                }
            }
            Mode::VisualOnly => {
                if !p.audio_down.is_empty() || !p.audio_up.is_empty() {
                    return Err(Error::config("visual_only mode must have no audio layers"));
                }
                if p.facial_in.is_empty() || p.facial_out.is_empty() {
                    return Err(Error::config(
                        "visual_only mode requires facial_in and facial_out layers",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Derives the audio-only and visual-only baseline configurations from
    /// a joint configuration: the other branch is removed and every stride
    /// is set to one, leaving all other hyperparameters unchanged.
    pub fn make_baselines(&self) -> Result<(Self, Self)> {
        if self.mode != Mode::Joint {
            return Err(Error::config("baselines are derived from a joint config"));
        }
        self.validate()?;

        let mut audio = self.clone();
        audio.mode = Mode::AudioOnly;
        audio.audio_down_strides = vec![1; self.channel_plan.audio_down.len()];
        audio.channel_plan.facial_in.clear();
        audio.channel_plan.facial_out.clear();
        audio.validate()?;

        let mut visual = self.clone();
        visual.mode = Mode::VisualOnly;
        visual.audio_down_strides = Vec::new();
        visual.channel_plan.audio_down.clear();
        visual.channel_plan.audio_up.clear();
        visual.validate()?;

        Ok((audio, visual))
    }
}

// --------------------------------------------------------------------------
// Residual wiring
// --------------------------------------------------------------------------

/// An encoder feature map that can feed a residual connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapPoint {
    /// Output of the given audio encoder block.
    AudioDown(usize),
    /// Output of the given facial encoder block.
    FacialIn(usize),
}

/// A decoder input that can receive a residual connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectPoint {
    /// Input of the given audio decoder block.
    AudioUp(usize),
    /// Input of the audio output layer.
    AudioOut,
    /// Input of the given facial decoder block.
    FacialHidden(usize),
    /// Input of the facial output layer.
    FacialOut,
}

/// One residual connection: the tap's value is added to the inject
/// point's input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidualEdge {
    pub from: TapPoint,
    pub to: InjectPoint,
}

/// Enumerates residual connections between same-shape feature maps.
///
/// Within each branch, every decoder input is matched against the not yet
/// used encoder outputs with the same temporal scale and channel count;
/// the deepest such encoder map wins. Feature maps in different branches
/// never pair, and each encoder map feeds at most one connection.
fn derive_residuals(cfg: &TransformNetConfig) -> Vec<ResidualEdge> {
    let p = &cfg.channel_plan;
    let mut edges = Vec::new();

    if !p.audio_down.is_empty() && !p.audio_up.is_empty() {
        // (layer, temporal downsampling factor, channels)
        let mut taps: Vec<(usize, usize, usize)> = Vec::new();
        let mut scale = 1usize;
        for (i, (&c, &st)) in p.audio_down.iter().zip(&cfg.audio_down_strides).enumerate() {
            scale *= st;
            taps.push((i, scale, c));
        }
        let mut used = vec![false; taps.len()];

        let mut inject: Vec<(InjectPoint, usize, usize)> = Vec::new();
        let mut at_scale = scale;
        let mut ch = *p.fusion.last().expect("fusion is non-empty");
        for (j, &st) in cfg.up_strides().iter().enumerate() {
            inject.push((InjectPoint::AudioUp(j), at_scale, ch));
            at_scale /= st;
            ch = p.audio_up[j];
        }
        inject.push((InjectPoint::AudioOut, at_scale, ch));

        for (point, want_scale, want_ch) in inject {
            let hit = taps
                .iter()
                .rev()
                .find(|&&(i, sc, c)| !used[i] && sc == want_scale && c == want_ch);
            if let Some(&(i, _, _)) = hit {
                used[i] = true;
                edges.push(ResidualEdge { from: TapPoint::AudioDown(i), to: point });
            }
        }
    }

    if !p.facial_in.is_empty() && !p.facial_out.is_empty() {
        let mut used = vec![false; p.facial_in.len()];

        let mut inject: Vec<(InjectPoint, usize)> = Vec::new();
        let mut ch = *p.fusion.last().expect("fusion is non-empty");
        for (j, &c) in p.facial_out.iter().enumerate() {
            inject.push((InjectPoint::FacialHidden(j), ch));
            ch = c;
        }
        inject.push((InjectPoint::FacialOut, ch));

        for (point, want_ch) in inject {
            let hit = p
                .facial_in
                .iter()
                .enumerate()
                .rev()
                .find(|&(i, &c)| !used[i] && c == want_ch);
            if let Some((i, _)) = hit {
                used[i] = true;
                edges.push(ResidualEdge { from: TapPoint::FacialIn(i), to: point });
            }
        }
    }

    edges
}

// --------------------------------------------------------------------------
// Layer blocks
// --------------------------------------------------------------------------

enum AnyConv {
    Plain(Conv1d),
    Transposed(ConvTranspose1d),
}

impl AnyConv {
    fn forward(&mut self, x: &Array3<f64>) -> Array3<f64> {
        match self {
            AnyConv::Plain(c) => c.forward(x),
            AnyConv::Transposed(c) => c.forward(x),
        }
    }

    fn forward_eval(&self, x: &Array3<f64>) -> Array3<f64> {
        match self {
            AnyConv::Plain(c) => c.forward_eval(x),
            AnyConv::Transposed(c) => c.forward_eval(x),
        }
    }

    fn backward(&mut self, gy: &Array3<f64>) -> Array3<f64> {
        match self {
            AnyConv::Plain(c) => c.backward(gy),
            AnyConv::Transposed(c) => c.backward(gy),
        }
    }

    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        match self {
            AnyConv::Plain(c) => c.visit_params(prefix, v),
            AnyConv::Transposed(c) => c.visit_params(prefix, v),
        }
    }
}

/// Convolution followed by ReLU then batch normalization.
struct HiddenBlock {
    conv: AnyConv,
    relu: Relu<Ix3>,
    bn: BatchNorm1d,
}

impl HiddenBlock {
    fn plain(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        Self {
            conv: AnyConv::Plain(Conv1d::new(rng, c_in, c_out, k, stride)),
            relu: Relu::new(),
            bn: BatchNorm1d::new(c_out),
        }
    }

    fn transposed(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        Self {
            conv: AnyConv::Transposed(ConvTranspose1d::new(rng, c_in, c_out, k, stride)),
            relu: Relu::new(),
            bn: BatchNorm1d::new(c_out),
        }
    }

    fn forward_train(&mut self, x: &Array3<f64>) -> Array3<f64> {
        let y = self.conv.forward(x);
        let y = self.relu.forward(&y);
        self.bn.forward_train(&y)
    }

    fn forward_eval(&self, x: &Array3<f64>) -> Array3<f64> {
        let y = self.conv.forward_eval(x);
        let y = self.relu.forward_eval(&y);
        self.bn.forward_eval(&y)
    }

    fn backward(&mut self, gy: &Array3<f64>) -> Array3<f64> {
        let g = self.bn.backward(gy);
        let g = self.relu.backward(&g);
        self.conv.backward(&g)
    }

    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.conv.visit_params(&join(prefix, "conv"), v);
        self.bn.visit_params(&join(prefix, "bn"), v);
    }

    fn visit_state(&mut self, prefix: &str, v: &mut dyn StateVisitor) {
        self.bn.visit_state(&join(prefix, "bn"), v);
    }
}

// --------------------------------------------------------------------------
// The network
// --------------------------------------------------------------------------

/// Captured values of one residual connection during an inference pass.
pub struct ResidualTrace {
    pub edge: ResidualEdge,
    /// Encoder feature map feeding the connection.
    pub tap: Array3<f64>,
    /// Decoder input after the addition.
    pub injected: Array3<f64>,
}

pub struct TransformNet {
    cfg: TransformNetConfig,
    audio_down: Vec<HiddenBlock>,
    facial_in: Vec<HiddenBlock>,
    fusion: Vec<HiddenBlock>,
    audio_up: Vec<HiddenBlock>,
    facial_hidden: Vec<HiddenBlock>,
    audio_out: Option<Conv1d>,
    facial_out: Option<Conv1d>,
    residuals: Vec<ResidualEdge>,
}

fn edge_into(edges: &[ResidualEdge], to: InjectPoint) -> Option<TapPoint> {
    edges.iter().find(|e| e.to == to).map(|e| e.from)
}

fn tap_array<'a>(
    from: TapPoint,
    audio_taps: &'a [Array3<f64>],
    facial_taps: &'a [Array3<f64>],
) -> &'a Array3<f64> {
    match from {
        TapPoint::AudioDown(i) => &audio_taps[i],
        TapPoint::FacialIn(i) => &facial_taps[i],
    }
}

impl TransformNet {
    pub fn new(cfg: &TransformNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derive_rng(seed, &[tag("transformnet-init")]);
        let p = &cfg.channel_plan;
        let k = cfg.kernel_size;

        let mut audio_down = Vec::new();
        let mut c = MEL_DIM;
        for (&c_out, &st) in p.audio_down.iter().zip(&cfg.audio_down_strides) {
            audio_down.push(HiddenBlock::plain(&mut rng, c, c_out, k, st));
            c = c_out;
        }
        let audio_enc_out = c;

        let mut facial_in = Vec::new();
        let mut c = FACIAL_DIM;
        for &c_out in &p.facial_in {
            facial_in.push(HiddenBlock::plain(&mut rng, c, c_out, k, 1));
            c = c_out;
        }
        let facial_enc_out = c;

        let trunk_in = match cfg.mode {
            Mode::Joint => audio_enc_out + facial_enc_out,
            Mode::AudioOnly => audio_enc_out,
            Mode::VisualOnly => facial_enc_out,
        };
        let mut fusion = Vec::new();
        let mut c = trunk_in;
        for &c_out in &p.fusion {
            fusion.push(HiddenBlock::plain(&mut rng, c, c_out, k, 1));
            c = c_out;
        }
        let trunk_out = c;

        let mut audio_up = Vec::new();
        let mut c = trunk_out;
        for (&c_out, &st) in p.audio_up.iter().zip(&cfg.up_strides()) {
            audio_up.push(HiddenBlock::transposed(&mut rng, c, c_out, k, st));
            c = c_out;
        }
        let audio_out = if cfg.mode == Mode::VisualOnly {
            None
        } else {
            Some(Conv1d::new(&mut rng, c, MEL_DIM, k, 1))
        };

        let mut facial_hidden = Vec::new();
        let mut c = trunk_out;
        for &c_out in &p.facial_out {
            facial_hidden.push(HiddenBlock::plain(&mut rng, c, c_out, k, 1));
            c = c_out;
        }
        let facial_out = if cfg.mode == Mode::AudioOnly {
            None
        } else {
            Some(Conv1d::new(&mut rng, c, FACIAL_DIM, k, 1))
        };

        Ok(Self {
            residuals: derive_residuals(cfg),
            cfg: cfg.clone(),
            audio_down,
            facial_in,
            fusion,
            audio_up,
            facial_hidden,
            audio_out,
            facial_out,
        })
    }

    pub fn config(&self) -> &TransformNetConfig {
        &self.cfg
    }

    pub fn residuals(&self) -> &[ResidualEdge] {
        &self.residuals
    }

    fn check_shapes(&self, mel: &Array3<f64>, facial: &Array3<f64>) -> Result<()> {
        let (bm, t_a, dm) = mel.dim();
        let (bf, t_v, df) = facial.dim();
        if dm != MEL_DIM {
            return Err(Error::shape(format!("mel stream has {dm} dims, expected {MEL_DIM}")));
        }
        if df != FACIAL_DIM {
            return Err(Error::shape(format!(
                "facial stream has {df} dims, expected {FACIAL_DIM}"
            )));
        }
        if bm != bf || bm == 0 {
            return Err(Error::shape(format!(
                "batch sizes disagree or are empty: mel {bm}, facial {bf}"
            )));
        }
        match self.cfg.mode {
            Mode::Joint => {
                if t_v == 0 || t_a != FRAMES_PER_FACIAL * t_v {
                    return Err(Error::shape(format!(
                        "joint mode requires T_a = {FRAMES_PER_FACIAL} * T_v, \
                         got T_a = {t_a}, T_v = {t_v}"
                    )));
                }
            }
            Mode::AudioOnly => {
                if t_a == 0 {
                    return Err(Error::shape("mel stream is empty"));
                }
            }
            Mode::VisualOnly => {
                if t_v == 0 {
                    return Err(Error::shape("facial stream is empty"));
                }
            }
        }
        Ok(())
    }

    /// Training-mode forward pass with batch-statistics normalization.
    /// Caches everything needed by [`TransformNet::backward`].
    pub fn forward_train(
        &mut self,
        mel: &Array3<f64>,
        facial: &Array3<f64>,
    ) -> Result<(Array3<f64>, Array3<f64>)> {
        self.check_shapes(mel, facial)?;
        let edges = self.residuals.clone();
        let mode = self.cfg.mode;

        let mut audio_taps: Vec<Array3<f64>> = Vec::with_capacity(self.audio_down.len());
        let mut facial_taps: Vec<Array3<f64>> = Vec::with_capacity(self.facial_in.len());

        let trunk_in = match mode {
            Mode::Joint => {
                let mut a = mel.clone();
                for blk in &mut self.audio_down {
                    a = blk.forward_train(&a);
                    audio_taps.push(a.clone());
                }
                if a.dim().1 != facial.dim().1 {
                    return Err(Error::shape(format!(
                        "rate coupling violated: audio branch reached {} frames, \
                         facial branch has {}",
                        a.dim().1,
                        facial.dim().1
                    )));
                }
                let mut f = facial.clone();
                for blk in &mut self.facial_in {
                    f = blk.forward_train(&f);
                    facial_taps.push(f.clone());
                }
                concatenate(Axis(2), &[a.view(), f.view()]).expect("equal batch and length")
            }
            Mode::AudioOnly => {
                let mut a = mel.clone();
                for blk in &mut self.audio_down {
                    a = blk.forward_train(&a);
                    audio_taps.push(a.clone());
                }
                a
            }
            Mode::VisualOnly => {
                let mut f = facial.clone();
                for blk in &mut self.facial_in {
                    f = blk.forward_train(&f);
                    facial_taps.push(f.clone());
                }
                f
            }
        };

        let mut x = trunk_in;
        for blk in &mut self.fusion {
            x = blk.forward_train(&x);
        }

        let mel_out = if let Some(out_layer) = self.audio_out.as_mut() {
            let mut h = x.clone();
            for (j, blk) in self.audio_up.iter_mut().enumerate() {
                if let Some(from) = edge_into(&edges, InjectPoint::AudioUp(j)) {
                    h += tap_array(from, &audio_taps, &facial_taps);
                }
                h = blk.forward_train(&h);
            }
            if let Some(from) = edge_into(&edges, InjectPoint::AudioOut) {
                h += tap_array(from, &audio_taps, &facial_taps);
            }
            out_layer.forward(&h)
        } else {
            mel.clone()
        };

        let facial_out = if let Some(out_layer) = self.facial_out.as_mut() {
            let mut h = x.clone();
            for (j, blk) in self.facial_hidden.iter_mut().enumerate() {
                if let Some(from) = edge_into(&edges, InjectPoint::FacialHidden(j)) {
                    h += tap_array(from, &audio_taps, &facial_taps);
                }
                h = blk.forward_train(&h);
            }
            if let Some(from) = edge_into(&edges, InjectPoint::FacialOut) {
                h += tap_array(from, &audio_taps, &facial_taps);
            }
            out_layer.forward(&h)
        } else {
            facial.clone()
        };

        Ok((mel_out, facial_out))
    }

    /// Inference-mode forward pass using running normalization statistics.
    pub fn forward_eval(
        &self,
        mel: &Array3<f64>,
        facial: &Array3<f64>,
    ) -> Result<(Array3<f64>, Array3<f64>)> {
        self.forward_eval_traced(mel, facial).map(|(m, f, _)| (m, f))
    }

    /// Inference-mode forward pass that also captures the value flowing
    /// through every residual connection.
    pub fn forward_eval_traced(
        &self,
        mel: &Array3<f64>,
        facial: &Array3<f64>,
    ) -> Result<(Array3<f64>, Array3<f64>, Vec<ResidualTrace>)> {
        self.check_shapes(mel, facial)?;
        let mode = self.cfg.mode;
        let mut traces = Vec::new();

        let mut audio_taps: Vec<Array3<f64>> = Vec::with_capacity(self.audio_down.len());
        let mut facial_taps: Vec<Array3<f64>> = Vec::with_capacity(self.facial_in.len());

        let trunk_in = match mode {
            Mode::Joint => {
                let mut a = mel.clone();
                for blk in &self.audio_down {
                    a = blk.forward_eval(&a);
                    audio_taps.push(a.clone());
                }
                if a.dim().1 != facial.dim().1 {
                    return Err(Error::shape(format!(
                        "rate coupling violated: audio branch reached {} frames, \
                         facial branch has {}",
                        a.dim().1,
                        facial.dim().1
                    )));
                }
                let mut f = facial.clone();
                for blk in &self.facial_in {
                    f = blk.forward_eval(&f);
                    facial_taps.push(f.clone());
                }
                concatenate(Axis(2), &[a.view(), f.view()]).expect("equal batch and length")
            }
            Mode::AudioOnly => {
                let mut a = mel.clone();
                for blk in &self.audio_down {
                    a = blk.forward_eval(&a);
                    audio_taps.push(a.clone());
                }
                a
            }
            Mode::VisualOnly => {
                let mut f = facial.clone();
                for blk in &self.facial_in {
                    f = blk.forward_eval(&f);
                    facial_taps.push(f.clone());
                }
                f
            }
        };

        let mut x = trunk_in;
        for blk in &self.fusion {
            x = blk.forward_eval(&x);
        }

        let mut inject = |h: &mut Array3<f64>,
                          point: InjectPoint,
                          audio_taps: &[Array3<f64>],
                          facial_taps: &[Array3<f64>]| {
            if let Some(from) = edge_into(&self.residuals, point) {
                let tap = tap_array(from, audio_taps, facial_taps);
                *h += tap;
                traces.push(ResidualTrace {
                    edge: ResidualEdge { from, to: point },
                    tap: tap.clone(),
                    injected: h.clone(),
                });
            }
        };

        let mel_out = if let Some(out_layer) = self.audio_out.as_ref() {
            let mut h = x.clone();
            for (j, blk) in self.audio_up.iter().enumerate() {
                inject(&mut h, InjectPoint::AudioUp(j), &audio_taps, &facial_taps);
                h = blk.forward_eval(&h);
            }
            inject(&mut h, InjectPoint::AudioOut, &audio_taps, &facial_taps);
            out_layer.forward_eval(&h)
        } else {
            mel.clone()
        };

        let facial_out = if let Some(out_layer) = self.facial_out.as_ref() {
            let mut h = x.clone();
            for (j, blk) in self.facial_hidden.iter().enumerate() {
                inject(&mut h, InjectPoint::FacialHidden(j), &audio_taps, &facial_taps);
                h = blk.forward_eval(&h);
            }
            inject(&mut h, InjectPoint::FacialOut, &audio_taps, &facial_taps);
            out_layer.forward_eval(&h)
        } else {
            facial.clone()
        };

        Ok((mel_out, facial_out, traces))
    }

    /// Backpropagates output gradients through the pass recorded by the
    /// last [`TransformNet::forward_train`], accumulating parameter
    /// gradients.
    pub fn backward(&mut self, g_mel: &Array3<f64>, g_facial: &Array3<f64>) -> Result<()> {
        let edges = self.residuals.clone();
        let mode = self.cfg.mode;
        let mut audio_tap_g: Vec<Option<Array3<f64>>> = vec![None; self.audio_down.len()];
        let mut facial_tap_g: Vec<Option<Array3<f64>>> = vec![None; self.facial_in.len()];

        let record = |from: TapPoint,
                          g: &Array3<f64>,
                          audio_tap_g: &mut Vec<Option<Array3<f64>>>,
                          facial_tap_g: &mut Vec<Option<Array3<f64>>>| {
            let slot = match from {
                TapPoint::AudioDown(i) => &mut audio_tap_g[i],
                TapPoint::FacialIn(i) => &mut facial_tap_g[i],
            };
            match slot {
                Some(acc) => *acc += g,
                None => *slot = Some(g.clone()),
            }
        };

        // Audio head.
        let g_trunk_audio = if let Some(out_layer) = self.audio_out.as_mut() {
            let mut gh = out_layer.backward(g_mel);
            if let Some(from) = edge_into(&edges, InjectPoint::AudioOut) {
                record(from, &gh, &mut audio_tap_g, &mut facial_tap_g);
            }
            for j in (0..self.audio_up.len()).rev() {
                gh = self.audio_up[j].backward(&gh);
                if let Some(from) = edge_into(&edges, InjectPoint::AudioUp(j)) {
                    record(from, &gh, &mut audio_tap_g, &mut facial_tap_g);
                }
            }
            Some(gh)
        } else {
            None
        };

        // Facial head.
        let g_trunk_facial = if let Some(out_layer) = self.facial_out.as_mut() {
            let mut gh = out_layer.backward(g_facial);
            if let Some(from) = edge_into(&edges, InjectPoint::FacialOut) {
                record(from, &gh, &mut audio_tap_g, &mut facial_tap_g);
            }
            for j in (0..self.facial_hidden.len()).rev() {
                gh = self.facial_hidden[j].backward(&gh);
                if let Some(from) = edge_into(&edges, InjectPoint::FacialHidden(j)) {
                    record(from, &gh, &mut audio_tap_g, &mut facial_tap_g);
                }
            }
            Some(gh)
        } else {
            None
        };

        let mut gx = match (g_trunk_audio, g_trunk_facial) {
            (Some(a), Some(f)) => a + f,
            (Some(a), None) => a,
            (None, Some(f)) => f,
            (None, None) => unreachable!("at least one head exists in every mode"),
        };
        for blk in self.fusion.iter_mut().rev() {
            gx = blk.backward(&gx);
        }

        let (g_audio_enc, g_facial_enc) = match mode {
            Mode::Joint => {
                let ca = *self.cfg.channel_plan.audio_down.last().expect("non-empty");
                let ga = gx.slice(s![.., .., ..ca]).to_owned();
                let gf = gx.slice(s![.., .., ca..]).to_owned();
                (Some(ga), Some(gf))
            }
            Mode::AudioOnly => (Some(gx), None),
            Mode::VisualOnly => (None, Some(gx)),
        };

        if let Some(mut ga) = g_audio_enc {
            for i in (0..self.audio_down.len()).rev() {
                if let Some(t) = audio_tap_g[i].take() {
                    ga += &t;
                }
                ga = self.audio_down[i].backward(&ga);
            }
        }
        if let Some(mut gf) = g_facial_enc {
            for i in (0..self.facial_in.len()).rev() {
                if let Some(t) = facial_tap_g[i].take() {
                    gf += &t;
                }
                gf = self.facial_in[i].backward(&gf);
            }
        }
        Ok(())
    }

    /// Converts a full-length utterance in inference mode. In joint mode
    /// the mel stream is right-padded with its last frame to a whole
    /// number of facial-frame groups and the output trimmed back; the
    /// baseline variants pass the unmodeled stream through untouched.
    /// Identity fields are copied from the input.
    pub fn convert(&self, u: &UtteranceFeatures) -> Result<UtteranceFeatures> {
        let t_a = u.mel.num_frames();
        let t_v = u.facial.num_frames();
        if t_a == 0 || t_v == 0 {
            return Err(Error::invalid("cannot convert an empty utterance"));
        }

        let mel_in = u.mel.frames().to_owned().insert_axis(Axis(0));
        let facial_in = u.facial.fused().to_owned().insert_axis(Axis(0));

        let (mel_out, facial_out) = match self.cfg.mode {
            Mode::Joint => {
                let padded = FRAMES_PER_FACIAL * t_v;
                if t_a > padded || padded - t_a >= FRAMES_PER_FACIAL {
                    return Err(Error::invalid(format!(
                        "streams are not rate-tied: {t_a} mel frames cannot pad to \
                         {FRAMES_PER_FACIAL} per facial frame over {t_v} facial frames"
                    )));
                }
                let mut mel_pad = Array3::zeros((1, padded, MEL_DIM));
                mel_pad
                    .slice_mut(s![0, ..t_a, ..])
                    .assign(&mel_in.slice(s![0, .., ..]));
                for t in t_a..padded {
                    let last = mel_in.slice(s![0, t_a - 1, ..]).to_owned();
                    mel_pad.slice_mut(s![0, t, ..]).assign(&last);
                }
                let (mo, fo) = self.forward_eval(&mel_pad, &facial_in)?;
                (mo.slice(s![.., ..t_a, ..]).to_owned(), fo)
            }
            Mode::AudioOnly | Mode::VisualOnly => self.forward_eval(&mel_in, &facial_in)?,
        };

        Ok(UtteranceFeatures {
            mel: MelSpectrogram::new(
                mel_out.index_axis(Axis(0), 0).to_owned(),
                u.mel.window_ms(),
                u.mel.hop_ms(),
            )?,
            facial: FacialFeatureSequence::from_fused(
                facial_out.index_axis(Axis(0), 0).to_owned(),
                u.facial.fps(),
            )?,
            speaker_id: u.speaker_id.clone(),
            utterance_id: u.utterance_id.clone(),
            emotion: u.emotion.clone(),
        })
    }

    /// Writes parameters, normalization statistics, and the configuration
    /// to a single checkpoint file.
    pub fn save(&mut self, path: &Path) -> Result<()> {
        let cfg = self.cfg.clone();
        let arrays = checkpoint::collect_arrays(self);
        checkpoint::save_checkpoint(path, &cfg, &arrays)
    }

    /// Restores a network saved with [`TransformNet::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let (cfg_json, arrays) = checkpoint::load_checkpoint(path)?;
        let cfg: TransformNetConfig = serde_json::from_value(cfg_json)?;
        let mut net = Self::new(&cfg, 0)?;
        checkpoint::restore_arrays(&mut net, &arrays)?;
        Ok(net)
    }
}

impl HasParams for TransformNet {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        for (i, blk) in self.audio_down.iter_mut().enumerate() {
            blk.visit_params(&join(prefix, &format!("audio_down.{i}")), v);
        }
        for (i, blk) in self.facial_in.iter_mut().enumerate() {
            blk.visit_params(&join(prefix, &format!("facial_in.{i}")), v);
        }
        for (i, blk) in self.fusion.iter_mut().enumerate() {
            blk.visit_params(&join(prefix, &format!("fusion.{i}")), v);
        }
        let n_up = self.audio_up.len();
        for (i, blk) in self.audio_up.iter_mut().enumerate() {
            blk.visit_params(&join(prefix, &format!("audio_up.{i}")), v);
        }
        if let Some(out) = self.audio_out.as_mut() {
            out.visit_params(&join(prefix, &format!("audio_up.{n_up}.conv")), v);
        }
        let n_fh = self.facial_hidden.len();
        for (i, blk) in self.facial_hidden.iter_mut().enumerate() {
            blk.visit_params(&join(prefix, &format!("facial_out.{i}")), v);
        }
        if let Some(out) = self.facial_out.as_mut() {
            out.visit_params(&join(prefix, &format!("facial_out.{n_fh}.conv")), v);
        }
    }

    fn visit_state(&mut self, prefix: &str, v: &mut dyn StateVisitor) {
        for (i, blk) in self.audio_down.iter_mut().enumerate() {
            blk.visit_state(&join(prefix, &format!("audio_down.{i}")), v);
        }
        for (i, blk) in self.facial_in.iter_mut().enumerate() {
            blk.visit_state(&join(prefix, &format!("facial_in.{i}")), v);
        }
        for (i, blk) in self.fusion.iter_mut().enumerate() {
            blk.visit_state(&join(prefix, &format!("fusion.{i}")), v);
        }
        for (i, blk) in self.audio_up.iter_mut().enumerate() {
            blk.visit_state(&join(prefix, &format!("audio_up.{i}")), v);
        }
        for (i, blk) in self.facial_hidden.iter_mut().enumerate() {
            blk.visit_state(&join(prefix, &format!("facial_out.{i}")), v);
        }
    }
}

// --------------------------------------------------------------------------
// Loss
// --------------------------------------------------------------------------

fn check_pair(name: &str, pred: &Array3<f64>, tgt: &Array3<f64>) -> Result<()> {
    if pred.dim() != tgt.dim() {
        return Err(Error::shape(format!(
            "{name} prediction {:?} does not match target {:?}",
            pred.dim(),
            tgt.dim()
        )));
    }
    if pred.is_empty() {
        return Err(Error::shape(format!("{name} arrays are empty")));
    }
    Ok(())
}

/// Mean absolute errors of the two streams, unweighted.
pub fn l1_terms(
    pred_mel: &Array3<f64>,
    pred_facial: &Array3<f64>,
    tgt_mel: &Array3<f64>,
    tgt_facial: &Array3<f64>,
) -> Result<(f64, f64)> {
    check_pair("mel", pred_mel, tgt_mel)?;
    check_pair("facial", pred_facial, tgt_facial)?;
    let mean_abs = |p: &Array3<f64>, t: &Array3<f64>| {
        let mut sum = 0.0;
        for (a, b) in p.iter().zip(t.iter()) {
            sum += (a - b).abs();
        }
        sum / p.len() as f64
    };
    Ok((mean_abs(pred_mel, tgt_mel), mean_abs(pred_facial, tgt_facial)))
}

/// Training objective: `acoustic_weight * mean|mel error| + mean|facial
/// error|`.
pub fn loss(
    pred_mel: &Array3<f64>,
    pred_facial: &Array3<f64>,
    tgt_mel: &Array3<f64>,
    tgt_facial: &Array3<f64>,
    acoustic_weight: f64,
) -> Result<f64> {
    let (a, f) = l1_terms(pred_mel, pred_facial, tgt_mel, tgt_facial)?;
    Ok(acoustic_weight * a + f)
}

/// Gradients of [`loss`] with respect to the two predictions.
pub fn l1_grads(
    pred_mel: &Array3<f64>,
    pred_facial: &Array3<f64>,
    tgt_mel: &Array3<f64>,
    tgt_facial: &Array3<f64>,
    acoustic_weight: f64,
) -> Result<(Array3<f64>, Array3<f64>)> {
    check_pair("mel", pred_mel, tgt_mel)?;
    check_pair("facial", pred_facial, tgt_facial)?;
    let grad = |p: &Array3<f64>, t: &Array3<f64>, scale: f64| {
        let n = p.len() as f64;
        let mut g = Array3::zeros(p.dim());
        for ((gi, &a), &b) in g.iter_mut().zip(p.iter()).zip(t.iter()) {
            let d = a - b;
            *gi = if d > 0.0 {
                scale / n
            } else if d < 0.0 {
                -scale / n
            } else {
                0.0
            };
        }
        g
    };
    Ok((
        grad(pred_mel, tgt_mel, acoustic_weight),
        grad(pred_facial, tgt_facial, 1.0),
    ))
}

// --------------------------------------------------------------------------
// Training
// --------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self { lr: 1e-4, batch: 64, epochs: 600 }
    }
}

/// Mean losses over one epoch; `total = acoustic + facial`, with the
/// acoustic term already weighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochTrace {
    pub epoch: usize,
    pub total: f64,
    pub acoustic: f64,
    pub facial: f64,
}

/// Renders a loss trace as CSV.
pub fn loss_trace_csv(trace: &[EpochTrace]) -> String {
    let mut out = String::from("epoch,total,acoustic,facial\n");
    for t in trace {
        out.push_str(&format!("{},{},{},{}\n", t.epoch, t.total, t.acoustic, t.facial));
    }
    out
}

fn stack_windows(
    pairs: &[(TrainingWindow, TrainingWindow)],
    idx: &[usize],
    side: fn(&(TrainingWindow, TrainingWindow)) -> &TrainingWindow,
    mel_shape: (usize, usize),
    facial_shape: (usize, usize),
) -> Result<(Array3<f64>, Array3<f64>)> {
    let b = idx.len();
    let mut mel = Array3::zeros((b, mel_shape.0, mel_shape.1));
    let mut facial = Array3::zeros((b, facial_shape.0, facial_shape.1));
    for (bi, &i) in idx.iter().enumerate() {
        let w = side(&pairs[i]);
        if w.mel.dim() != mel_shape || w.facial.dim() != facial_shape {
            return Err(Error::shape(format!(
                "window {i} has shapes {:?}/{:?}, expected {:?}/{:?}",
                w.mel.dim(),
                w.facial.dim(),
                mel_shape,
                facial_shape
            )));
        }
        mel.slice_mut(s![bi, .., ..]).assign(&w.mel);
        facial.slice_mut(s![bi, .., ..]).assign(&w.facial);
    }
    Ok((mel, facial))
}

/// Trains a network on aligned (source, target) window pairs with
/// shuffled mini-batches. Deterministic for a fixed seed. Returns the
/// trained network and the per-epoch loss trace.
pub fn train_transformnet(
    pairs: &[(TrainingWindow, TrainingWindow)],
    cfg: &TransformNetConfig,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(TransformNet, Vec<EpochTrace>)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    if hyper.batch == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    if !(hyper.lr.is_finite() && hyper.lr >= 0.0) {
        return Err(Error::config(format!("learning rate must be non-negative, got {}", hyper.lr)));
    }
    let mel_shape = pairs[0].0.mel.dim();
    let facial_shape = pairs[0].0.facial.dim();
    if cfg.mode == Mode::Joint && mel_shape.0 != FRAMES_PER_FACIAL * facial_shape.0 {
        return Err(Error::shape(format!(
            "joint mode windows need {FRAMES_PER_FACIAL} mel frames per facial frame, \
             got {} mel and {} facial frames",
            mel_shape.0, facial_shape.0
        )));
    }

    let mut net = TransformNet::new(cfg, seed)?;
    let mut opt = Adam::new(hyper.lr);
    let mut shuffle_rng = derive_rng(seed, &[tag("transformnet-shuffle")]);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut trace = Vec::with_capacity(hyper.epochs);

    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum_total = 0.0;
        let mut sum_acoustic = 0.0;
        let mut sum_facial = 0.0;
        for chunk in order.chunks(hyper.batch) {
            let (src_mel, src_facial) = stack_windows(pairs, chunk, |p| &p.0, mel_shape, facial_shape)?;
            let (tgt_mel, tgt_facial) = stack_windows(pairs, chunk, |p| &p.1, mel_shape, facial_shape)?;

            zero_grads(&mut net);
            let (pred_mel, pred_facial) = net.forward_train(&src_mel, &src_facial)?;
            let (term_a, term_f) = l1_terms(&pred_mel, &pred_facial, &tgt_mel, &tgt_facial)?;
            let (g_mel, g_facial) =
                l1_grads(&pred_mel, &pred_facial, &tgt_mel, &tgt_facial, cfg.acoustic_loss_weight)?;
            net.backward(&g_mel, &g_facial)?;
            opt.step(&mut net);

            let b = chunk.len() as f64;
            sum_acoustic += cfg.acoustic_loss_weight * term_a * b;
            sum_facial += term_f * b;
            sum_total += (cfg.acoustic_loss_weight * term_a + term_f) * b;
        }
        let n = pairs.len() as f64;
        trace.push(EpochTrace {
            epoch,
            total: sum_total / n,
            acoustic: sum_acoustic / n,
            facial: sum_facial / n,
        });
    }
    Ok((net, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::{apply_alignment, dtw_align, paired_windows, tie_frames};
    use crate::features::{WINDOW_FACIAL_FRAMES, WINDOW_MEL_FRAMES};
    use crate::nn::test_util::check_gradients;
    use crate::synth::{synth_parallel_corpus, SynthConfig};
    use ndarray::{Array2, ArrayViewMutD};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn tiny_cfg() -> TransformNetConfig {
        TransformNetConfig {
            kernel_size: 5,
            audio_down_strides: vec![2, 2, 2],
            channel_plan: ChannelPlan {
                audio_down: vec![2, 3, 4],
                facial_in: vec![3, 3],
                fusion: vec![4, 4],
                audio_up: vec![3, 2, 2],
                facial_out: vec![3],
            },
            mode: Mode::Joint,
            acoustic_loss_weight: 10.0,
        }
    }

    fn rand3(rng: &mut ChaCha8Rng, b: usize, t: usize, c: usize) -> Array3<f64> {
        Array3::from_shape_fn((b, t, c), |_| rng.gen_range(-1.0..1.0))
    }

    fn rand_window(rng: &mut ChaCha8Rng, t_a: usize, t_v: usize) -> TrainingWindow {
        TrainingWindow {
            mel: Array2::from_shape_fn((t_a, MEL_DIM), |_| rng.gen_range(-1.0..1.0)),
            facial: Array2::from_shape_fn((t_v, FACIAL_DIM), |_| rng.gen_range(-1.0..1.0)),
        }
    }

    /// Trainable parameter values only, excluding normalization running
    /// statistics.
    fn param_values(net: &mut TransformNet) -> Vec<(String, Vec<f64>)> {
        struct Grab(Vec<(String, Vec<f64>)>);
        impl ParamVisitor for Grab {
            fn visit(
                &mut self,
                name: &str,
                value: ArrayViewMutD<'_, f64>,
                _grad: ArrayViewMutD<'_, f64>,
            ) {
                self.0.push((name.to_string(), value.iter().cloned().collect()));
            }
        }
        let mut g = Grab(Vec::new());
        net.visit_params("", &mut g);
        g.0
    }

    #[test]
    fn window_and_full_length_shapes_are_preserved() {
        let cfg = tiny_cfg();
        let mut net = TransformNet::new(&cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (t_a, t_v) in [(WINDOW_MEL_FRAMES, WINDOW_FACIAL_FRAMES), (1176, 147)] {
            let mel = rand3(&mut rng, 1, t_a, MEL_DIM);
            let facial = rand3(&mut rng, 1, t_v, FACIAL_DIM);
            let (mo, fo) = net.forward_train(&mel, &facial).unwrap();
            assert_eq!(mo.dim(), (1, t_a, MEL_DIM));
            assert_eq!(fo.dim(), (1, t_v, FACIAL_DIM));
            let (mo, fo) = net.forward_eval(&mel, &facial).unwrap();
            assert_eq!(mo.dim(), (1, t_a, MEL_DIM));
            assert_eq!(fo.dim(), (1, t_v, FACIAL_DIM));
        }
    }

    #[test]
    fn zero_output_weights_give_constant_bias_rows() {
        let cfg = tiny_cfg();
        let mut net = TransformNet::new(&cfg, 3).unwrap();
        {
            let audio_out = net.audio_out.as_mut().unwrap();
            audio_out.w.value.fill(0.0);
            for (i, b) in audio_out.b.value.iter_mut().enumerate() {
                *b = 0.01 * i as f64 - 0.2;
            }
            let facial_out = net.facial_out.as_mut().unwrap();
            facial_out.w.value.fill(0.0);
            for (i, b) in facial_out.b.value.iter_mut().enumerate() {
                *b = 1e-4 * i as f64 + 0.05;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mel = rand3(&mut rng, 2, 16, MEL_DIM);
        let facial = rand3(&mut rng, 2, 2, FACIAL_DIM);
        let (mo, fo) = net.forward_eval(&mel, &facial).unwrap();
        for b in 0..2 {
            for t in 0..16 {
                for c in 0..MEL_DIM {
                    assert_eq!(mo[[b, t, c]], 0.01 * c as f64 - 0.2);
                }
            }
            for t in 0..2 {
                for c in 0..FACIAL_DIM {
                    assert_eq!(fo[[b, t, c]], 1e-4 * c as f64 + 0.05);
                }
            }
        }
    }

    #[test]
    fn residual_wiring_matches_expected_pairs() {
        let net = TransformNet::new(&tiny_cfg(), 0).unwrap();
        let expected = vec![
            ResidualEdge { from: TapPoint::AudioDown(2), to: InjectPoint::AudioUp(0) },
            ResidualEdge { from: TapPoint::AudioDown(1), to: InjectPoint::AudioUp(1) },
            ResidualEdge { from: TapPoint::AudioDown(0), to: InjectPoint::AudioUp(2) },
            ResidualEdge { from: TapPoint::FacialIn(1), to: InjectPoint::FacialOut },
        ];
        assert_eq!(net.residuals(), expected.as_slice());
    }

    #[test]
    fn desk_config_has_residuals_in_both_branches() {
        let net = TransformNet::new(&TransformNetConfig::desk(), 0).unwrap();
        let edges = net.residuals();
        assert!(edges.iter().any(|e| matches!(e.from, TapPoint::AudioDown(_))));
        assert!(edges.iter().any(|e| matches!(e.from, TapPoint::FacialIn(_))));
    }

    #[test]
    fn residual_connected_decoder_inputs_equal_encoder_taps() {
        // With every convolution weight and bias zeroed, the decoder main
        // path is exactly zero, so each injected input must equal the tap
        // bitwise. Encoder biases are then made non-zero so the taps carry
        // non-trivial values through the zero-weight convolutions.
        let cfg = tiny_cfg();
        let mut net = TransformNet::new(&cfg, 11).unwrap();

        struct Zero;
        impl ParamVisitor for Zero {
            fn visit(
                &mut self,
                name: &str,
                mut value: ArrayViewMutD<'_, f64>,
                _grad: ArrayViewMutD<'_, f64>,
            ) {
                if name.contains(".conv.") {
                    value.fill(0.0);
                }
            }
        }
        net.visit_params("", &mut Zero);

        struct EncoderBias;
        impl ParamVisitor for EncoderBias {
            fn visit(
                &mut self,
                name: &str,
                mut value: ArrayViewMutD<'_, f64>,
                _grad: ArrayViewMutD<'_, f64>,
            ) {
                if (name.starts_with("audio_down.") || name.starts_with("facial_in."))
                    && name.ends_with(".conv.b")
                {
                    value.fill(0.37);
                }
            }
        }
        net.visit_params("", &mut EncoderBias);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mel = rand3(&mut rng, 1, 16, MEL_DIM);
        let facial = rand3(&mut rng, 1, 2, FACIAL_DIM);
        let (_, _, traces) = net.forward_eval_traced(&mel, &facial).unwrap();
        assert_eq!(traces.len(), net.residuals().len());
        for tr in &traces {
            assert!(tr.tap.iter().any(|&v| v != 0.0), "tap for {:?} is all zero", tr.edge);
            assert_eq!(tr.injected, tr.tap, "injection for {:?} is not the identity", tr.edge);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut net = TransformNet::new(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mel = rand3(&mut rng, 1, 16, MEL_DIM);
        let facial = rand3(&mut rng, 1, 2, FACIAL_DIM);
        // Targets near the initial outputs keep the loss small, so the
        // central differences stay clear of cancellation error.
        let (out_mel, out_facial) = net.forward_train(&mel, &facial).unwrap();
        let tgt_mel = out_mel + 0.3 * rand3(&mut rng, 1, 16, MEL_DIM);
        let tgt_facial = out_facial + 0.3 * rand3(&mut rng, 1, 2, FACIAL_DIM);
        let w_a = cfg.acoustic_loss_weight;
        check_gradients(
            &mut net,
            |net| {
                let (pm, pf) = net.forward_train(&mel, &facial).unwrap();
                let (gm, gf) = l1_grads(&pm, &pf, &tgt_mel, &tgt_facial, w_a).unwrap();
                net.backward(&gm, &gf).unwrap();
                loss(&pm, &pf, &tgt_mel, &tgt_facial, w_a).unwrap()
            },
            1e-5,
            1e-4,
        );
    }

    #[test]
    fn loss_matches_hand_cases() {
        let mel = Array3::from_elem((1, 8, MEL_DIM), 0.25);
        let facial = Array3::from_elem((1, 1, FACIAL_DIM), -0.5);
        assert_eq!(loss(&mel, &facial, &mel, &facial, 10.0).unwrap(), 0.0);

        let mel_off = &mel + 1.0;
        assert_eq!(loss(&mel_off, &facial, &mel, &facial, 10.0).unwrap(), 10.0);

        let facial_off = &facial + 1.0;
        assert_eq!(loss(&mel, &facial_off, &mel, &facial, 10.0).unwrap(), 1.0);
    }

    #[test]
    fn loss_decomposes_into_weighted_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pm = rand3(&mut rng, 2, 16, MEL_DIM);
        let pf = rand3(&mut rng, 2, 2, FACIAL_DIM);
        let tm = rand3(&mut rng, 2, 16, MEL_DIM);
        let tf = rand3(&mut rng, 2, 2, FACIAL_DIM);

        let mut sum = 0.0;
        for (a, b) in pm.iter().zip(tm.iter()) {
            sum += (a - b).abs();
        }
        let ind_mel = sum / pm.len() as f64;
        let mut sum = 0.0;
        for (a, b) in pf.iter().zip(tf.iter()) {
            sum += (a - b).abs();
        }
        let ind_facial = sum / pf.len() as f64;

        let total = loss(&pm, &pf, &tm, &tf, 10.0).unwrap();
        let expected = 10.0 * ind_mel + ind_facial;
        assert!(
            (total - expected).abs() <= 1e-12 * expected.abs().max(1.0),
            "loss {total} vs independent terms {expected}"
        );
    }

    #[test]
    fn loss_rejects_mismatched_shapes() {
        let a = Array3::<f64>::zeros((1, 8, MEL_DIM));
        let b = Array3::<f64>::zeros((1, 9, MEL_DIM));
        let f = Array3::<f64>::zeros((1, 1, FACIAL_DIM));
        assert!(loss(&a, &f, &b, &f, 10.0).is_err());
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let cfg = tiny_cfg();
        let mut net = TransformNet::new(&cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // Rate tie broken.
        let mel = rand3(&mut rng, 1, 48, MEL_DIM);
        let facial = rand3(&mut rng, 1, 5, FACIAL_DIM);
        assert!(net.forward_train(&mel, &facial).is_err());
        // Wrong feature dimension.
        let mel = rand3(&mut rng, 1, 16, MEL_DIM - 1);
        let facial = rand3(&mut rng, 1, 2, FACIAL_DIM);
        assert!(net.forward_train(&mel, &facial).is_err());
        // Batch mismatch.
        let mel = rand3(&mut rng, 2, 16, MEL_DIM);
        let facial = rand3(&mut rng, 1, 2, FACIAL_DIM);
        assert!(net.forward_train(&mel, &facial).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = tiny_cfg();
        c.kernel_size = 3;
        assert!(c.validate().is_err());

        let mut c = tiny_cfg();
        c.audio_down_strides = vec![2, 2, 1];
        assert!(c.validate().is_err());

        let mut c = tiny_cfg();
        c.channel_plan.facial_in.clear();
        assert!(c.validate().is_err());

        let mut c = tiny_cfg();
        c.audio_down_strides = vec![2, 2];
        assert!(c.validate().is_err());

        let (mut audio, _) = tiny_cfg().make_baselines().unwrap();
        audio.audio_down_strides = vec![2, 1, 1];
        assert!(audio.validate().is_err());

        assert!(TransformNetConfig::paper().validate().is_ok());
        assert!(TransformNetConfig::desk().validate().is_ok());
    }

    #[test]
    fn baselines_drop_the_other_branch() {
        let (audio, visual) = tiny_cfg().make_baselines().unwrap();
        assert_eq!(audio.mode, Mode::AudioOnly);
        assert!(audio.channel_plan.facial_in.is_empty());
        assert!(audio.channel_plan.facial_out.is_empty());
        assert!(audio.audio_down_strides.iter().all(|&s| s == 1));
        assert_eq!(visual.mode, Mode::VisualOnly);
        assert!(visual.channel_plan.audio_down.is_empty());
        assert!(visual.channel_plan.audio_up.is_empty());

        let mut audio_net = TransformNet::new(&audio, 1).unwrap();
        let names = param_values(&mut audio_net);
        assert!(names.iter().all(|(n, _)| !n.starts_with("facial")));
        let mut visual_net = TransformNet::new(&visual, 1).unwrap();
        let names = param_values(&mut visual_net);
        assert!(names.iter().all(|(n, _)| !n.starts_with("audio")));
    }

    #[test]
    fn baseline_forward_keeps_time_resolution() {
        let (audio_cfg, visual_cfg) = tiny_cfg().make_baselines().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mel = rand3(&mut rng, 1, WINDOW_MEL_FRAMES, MEL_DIM);
        let facial = rand3(&mut rng, 1, WINDOW_FACIAL_FRAMES, FACIAL_DIM);

        let audio_net = TransformNet::new(&audio_cfg, 2).unwrap();
        let (mo, fo) = audio_net.forward_eval(&mel, &facial).unwrap();
        assert_eq!(mo.dim(), (1, WINDOW_MEL_FRAMES, MEL_DIM));
        assert_eq!(fo, facial);

        let visual_net = TransformNet::new(&visual_cfg, 2).unwrap();
        let (mo, fo) = visual_net.forward_eval(&mel, &facial).unwrap();
        assert_eq!(fo.dim(), (1, WINDOW_FACIAL_FRAMES, FACIAL_DIM));
        assert_eq!(mo, mel);
    }

    #[test]
    fn convert_matches_single_window_forward_and_keeps_rate_tie() {
        let synth_cfg = SynthConfig {
            min_duration_s: 2.0,
            max_duration_s: 2.0,
            ..SynthConfig::default()
        };
        let corpus = synth_parallel_corpus(21, 1, &synth_cfg).unwrap();
        let u = &corpus.source[0];
        assert!(u.is_rate_tied());
        assert_eq!(u.mel.num_frames(), WINDOW_MEL_FRAMES);

        let net = TransformNet::new(&tiny_cfg(), 13).unwrap();
        let converted = net.convert(u).unwrap();
        assert!(converted.is_rate_tied());
        assert_eq!(converted.mel.num_frames(), u.mel.num_frames());
        assert_eq!(converted.facial.num_frames(), u.facial.num_frames());
        assert_eq!(converted.mel.window_ms(), u.mel.window_ms());
        assert_eq!(converted.facial.fps(), u.facial.fps());

        let mel_in = u.mel.frames().to_owned().insert_axis(Axis(0));
        let facial_in = u.facial.fused().to_owned().insert_axis(Axis(0));
        let (mo, fo) = net.forward_eval(&mel_in, &facial_in).unwrap();
        assert_eq!(converted.mel.frames(), &mo.index_axis(Axis(0), 0).to_owned());
        assert_eq!(converted.facial.fused(), &fo.index_axis(Axis(0), 0).to_owned());
    }

    #[test]
    fn audio_only_convert_passes_facial_through() {
        let synth_cfg = SynthConfig {
            min_duration_s: 2.0,
            max_duration_s: 2.4,
            ..SynthConfig::default()
        };
        let corpus = synth_parallel_corpus(22, 1, &synth_cfg).unwrap();
        let u = &corpus.source[0];
        let (audio_cfg, visual_cfg) = tiny_cfg().make_baselines().unwrap();

        let audio_net = TransformNet::new(&audio_cfg, 3).unwrap();
        let out = audio_net.convert(u).unwrap();
        assert_eq!(out.facial.fused(), u.facial.fused());
        assert_eq!(out.mel.num_frames(), u.mel.num_frames());

        let visual_net = TransformNet::new(&visual_cfg, 3).unwrap();
        let out = visual_net.convert(u).unwrap();
        assert_eq!(out.mel.frames(), u.mel.frames());
        assert_eq!(out.facial.num_frames(), u.facial.num_frames());
    }

    #[test]
    fn training_with_zero_learning_rate_keeps_parameters() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let pairs: Vec<_> = (0..2)
            .map(|_| (rand_window(&mut rng, 16, 2), rand_window(&mut rng, 16, 2)))
            .collect();
        let hyper = TrainHyper { lr: 0.0, batch: 64, epochs: 3 };
        let (mut trained, _) = train_transformnet(&pairs, &cfg, &hyper, 17).unwrap();
        let mut fresh = TransformNet::new(&cfg, 17).unwrap();
        assert_eq!(param_values(&mut trained), param_values(&mut fresh));
    }

    #[test]
    fn same_seed_gives_identical_traces_and_parameters() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let pairs: Vec<_> = (0..3)
            .map(|_| (rand_window(&mut rng, 16, 2), rand_window(&mut rng, 16, 2)))
            .collect();
        let hyper = TrainHyper { lr: 1e-3, batch: 2, epochs: 3 };
        let (mut net_a, trace_a) = train_transformnet(&pairs, &cfg, &hyper, 99).unwrap();
        let (mut net_b, trace_b) = train_transformnet(&pairs, &cfg, &hyper, 99).unwrap();
        assert_eq!(trace_a, trace_b);
        assert_eq!(param_values(&mut net_a), param_values(&mut net_b));

        let csv = loss_trace_csv(&trace_a);
        assert!(csv.starts_with("epoch,total,acoustic,facial\n"));
        assert_eq!(csv.lines().count(), 1 + trace_a.len());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let r = train_transformnet(&[], &tiny_cfg(), &TrainHyper::default(), 0);
        assert!(r.is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_behavior() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let pairs: Vec<_> = (0..2)
            .map(|_| (rand_window(&mut rng, 16, 2), rand_window(&mut rng, 16, 2)))
            .collect();
        let hyper = TrainHyper { lr: 1e-3, batch: 2, epochs: 2 };
        let (mut net, _) = train_transformnet(&pairs, &cfg, &hyper, 23).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("transform.avck");
        net.save(&path).unwrap();
        let loaded = TransformNet::load(&path).unwrap();
        assert_eq!(loaded.config(), &cfg);

        let mel = rand3(&mut rng, 1, 16, MEL_DIM);
        let facial = rand3(&mut rng, 1, 2, FACIAL_DIM);
        let (m0, f0) = net.forward_eval(&mel, &facial).unwrap();
        let (m1, f1) = loaded.forward_eval(&mel, &facial).unwrap();
        assert_eq!(m0, m1);
        assert_eq!(f0, f1);
    }

    #[test]
    fn overfits_two_synthetic_windows() {
        let synth_cfg = SynthConfig {
            min_duration_s: 5.2,
            max_duration_s: 5.2,
            ..SynthConfig::default()
        };
        let corpus = synth_parallel_corpus(31, 1, &synth_cfg).unwrap();
        let src = tie_frames(&corpus.source[0]).unwrap();
        let tgt = tie_frames(&corpus.target[0]).unwrap();
        let path = dtw_align(&src, &tgt).unwrap();
        let pair = apply_alignment(&path, &corpus.source[0], &corpus.target[0]).unwrap();
        let pairs = paired_windows(&pair);
        assert!(pairs.len() >= 2, "expected at least two windows, got {}", pairs.len());
        let pairs = &pairs[..2];

        let hyper = TrainHyper { lr: 1.5e-2, batch: 64, epochs: 200 };
        let (_, trace) = train_transformnet(pairs, &TransformNetConfig::desk(), &hyper, 41).unwrap();
        let first = trace.first().unwrap().total;
        let last = trace.last().unwrap().total;
        assert!(
            last <= 0.1 * first,
            "training loss fell from {first:.4} only to {last:.4}"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn shapes_preserved_for_all_valid_lengths(t_v in 1usize..6, seed in 0u64..50) {
            let net = TransformNet::new(&tiny_cfg(), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let t_a = FRAMES_PER_FACIAL * t_v;
            let mel = rand3(&mut rng, 1, t_a, MEL_DIM);
            let facial = rand3(&mut rng, 1, t_v, FACIAL_DIM);
            let (mo, fo) = net.forward_eval(&mel, &facial).unwrap();
            prop_assert_eq!(mo.dim(), (1, t_a, MEL_DIM));
            prop_assert_eq!(fo.dim(), (1, t_v, FACIAL_DIM));
        }
    }
}
