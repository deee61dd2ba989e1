//! Conditional autoregressive waveform generator.
//!
//! A stack of causal dilated convolutions with gated activations predicts a
//! categorical distribution over 8-bit mu-law codes one sample at a time,
//! conditioned on a per-sample matrix derived from mel and facial features.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::audio::AudioClip;
use crate::checkpoint::{collect_arrays, load_checkpoint, restore_arrays, save_checkpoint};
use crate::error::{Error, Result};
use crate::features::{FACIAL_DIM, FRAMES_PER_FACIAL, MEL_DIM};
use crate::nn::{join, HasParams, Param, ParamVisitor};
use crate::synth::{derive_rng, tag};

pub const QUANTIZATION_LEVELS: usize = 256;
const MU: f64 = 255.0;

// --------------------------------------------------------------------------
// Configuration
// --------------------------------------------------------------------------

/// Layout of the feature streams feeding the conditioning matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondSpec {
    pub mel_dim: usize,
    /// Zero selects the audio-only conditioning variant.
    pub facial_dim: usize,
    /// Waveform samples covered by one mel frame hop.
    pub frames_per_mel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocoderConfig {
    pub n_dilated_layers: usize,
    /// Dilations are read cyclically from this list.
    pub dilation_cycle: Vec<usize>,
    pub residual_channels: usize,
    pub skip_channels: usize,
    pub quantization_levels: usize,
    pub sample_rate: u32,
    pub cond_spec: CondSpec,
}

impl VocoderConfig {
    /// Full-scale configuration: forty layers over four dilation cycles.
    pub fn paper() -> Self {
        Self {
            n_dilated_layers: 40,
            dilation_cycle: vec![1, 2, 4, 8, 16, 32, 64, 128, 256, 512],
            residual_channels: 64,
            skip_channels: 128,
            quantization_levels: QUANTIZATION_LEVELS,
            sample_rate: 16_000,
            cond_spec: CondSpec {
                mel_dim: MEL_DIM,
                facial_dim: FACIAL_DIM,
                frames_per_mel: 80,
            },
        }
    }

    /// Reduced configuration sized for single-core experiments.
    pub fn desk() -> Self {
        Self {
            n_dilated_layers: 14,
            dilation_cycle: vec![1, 2, 4, 8, 16, 32, 64],
            residual_channels: 20,
            skip_channels: 20,
            quantization_levels: QUANTIZATION_LEVELS,
            sample_rate: 8_000,
            cond_spec: CondSpec {
                mel_dim: MEL_DIM,
                facial_dim: FACIAL_DIM,
                frames_per_mel: 40,
            },
        }
    }

    pub fn dilations(&self) -> Vec<usize> {
        (0..self.n_dilated_layers)
            .map(|i| self.dilation_cycle[i % self.dilation_cycle.len()])
            .collect()
    }

    /// Steps of history that can influence one output step, inputs included.
    pub fn receptive_field(&self) -> usize {
        1 + self.dilations().iter().sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_dilated_layers == 0 {
            return Err(Error::config("need at least one dilated layer"));
        }
        if self.dilation_cycle.is_empty() || self.dilation_cycle.iter().any(|&d| d == 0) {
            return Err(Error::config("dilation cycle must be non-empty and positive"));
        }
        if self.residual_channels == 0 || self.skip_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.quantization_levels != QUANTIZATION_LEVELS {
            return Err(Error::config("quantization_levels must be 256"));
        }
        if self.sample_rate == 0 {
            return Err(Error::config("sample_rate must be positive"));
        }
        if self.cond_spec.mel_dim != MEL_DIM {
            return Err(Error::config("cond_spec.mel_dim must be 80"));
        }
        if self.cond_spec.facial_dim != 0 && self.cond_spec.facial_dim != FACIAL_DIM {
            return Err(Error::config("cond_spec.facial_dim must be 0 or 4236"));
        }
        if self.cond_spec.frames_per_mel == 0 {
            return Err(Error::config("cond_spec.frames_per_mel must be positive"));
        }
        Ok(())
    }

    /// Audio-only conditioning variant of this configuration.
    pub fn audio_only_baseline(&self) -> Self {
        let mut cfg = self.clone();
        cfg.cond_spec.facial_dim = 0;
        cfg
    }
}

// --------------------------------------------------------------------------
// Mu-law companding
// --------------------------------------------------------------------------

/// A waveform quantized to 8-bit mu-law codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedWaveform {
    pub codes: Vec<u8>,
    pub sample_rate: u32,
}

fn mu_law(x: f64) -> f64 {
    x.signum() * (1.0 + MU * x.abs()).ln() / (1.0 + MU).ln()
}

fn mu_law_inverse(y: f64) -> f64 {
    y.signum() * ((1.0 + MU).powf(y.abs()) - 1.0) / MU
}

/// Quantizes amplitudes in [-1, 1] to 256 mu-law codes. Out-of-range
/// samples are clipped; the second value counts how many were.
pub fn mu_law_encode(samples: &[f64], sample_rate: u32) -> (QuantizedWaveform, usize) {
    let mut clipped = 0usize;
    let codes = samples
        .iter()
        .map(|&x| {
            let x = if x < -1.0 || x > 1.0 {
                clipped += 1;
                x.clamp(-1.0, 1.0)
            } else {
                x
            };
            let y = mu_law(x);
            let c = ((y + 1.0) * 128.0).floor();
            c.clamp(0.0, 255.0) as u8
        })
        .collect();
    (
        QuantizedWaveform { codes, sample_rate },
        clipped,
    )
}

fn decode_code(c: u8) -> f64 {
    let y = (c as f64 + 0.5) / 128.0 - 1.0;
    mu_law_inverse(y)
}

/// Maps codes back to amplitudes at the center of each quantization bin.
pub fn mu_law_decode(q: &QuantizedWaveform) -> Result<AudioClip> {
    let samples = q.codes.iter().map(|&c| decode_code(c)).collect();
    AudioClip::new(samples, q.sample_rate)
}

// --------------------------------------------------------------------------
// Conditioning
// --------------------------------------------------------------------------

/// Fixed projection of the fused feature row onto the conditioning
/// channels, derived deterministically from the dimensions alone so the
/// same configuration always produces the same matrix.
fn cond_projection(in_dim: usize, out_dim: usize) -> Array2<f64> {
    let mut rng = derive_rng(0, &[tag("vocoder-cond-proj"), in_dim as u64, out_dim as u64]);
    let scale = 1.0 / (in_dim as f64).sqrt();
    Array2::from_shape_fn((in_dim, out_dim), |_| rng.gen_range(-scale..scale))
}

/// Builds the per-sample conditioning matrix: facial rows are repeated to
/// the mel rate, concatenated with mel, projected to the residual channel
/// count, then repeated to the sample rate. The row count is exactly
/// `mel_frames * frames_per_mel`.
pub fn build_condition(
    mel: &Array2<f64>,
    facial: &Array2<f64>,
    cfg: &VocoderConfig,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    let spec = &cfg.cond_spec;
    let t_a = mel.nrows();
    if t_a == 0 {
        return Err(Error::invalid("mel input is empty"));
    }
    if mel.ncols() != spec.mel_dim {
        return Err(Error::shape(format!(
            "mel has {} columns, expected {}",
            mel.ncols(),
            spec.mel_dim
        )));
    }
    if facial.ncols() != spec.facial_dim {
        return Err(Error::shape(format!(
            "facial has {} columns, expected {}",
            facial.ncols(),
            spec.facial_dim
        )));
    }
    if spec.facial_dim != 0 && t_a != FRAMES_PER_FACIAL * facial.nrows() {
        return Err(Error::shape(format!(
            "{} mel frames are not rate-tied to {} facial frames",
            t_a,
            facial.nrows()
        )));
    }

    let c = cfg.residual_channels;
    let p = cond_projection(spec.mel_dim + spec.facial_dim, c);
    let p_mel = p.slice(s![..spec.mel_dim, ..]);
    let mut at_mel_rate = mel.dot(&p_mel);
    if spec.facial_dim != 0 {
        let p_fac = p.slice(s![spec.mel_dim.., ..]);
        let fac_proj = facial.dot(&p_fac);
        for t in 0..t_a {
            let mut row = at_mel_rate.row_mut(t);
            row += &fac_proj.row(t / FRAMES_PER_FACIAL);
        }
    }

    let n = t_a * spec.frames_per_mel;
    let mut cond = Array2::zeros((n, c));
    for t in 0..n {
        cond.row_mut(t).assign(&at_mel_rate.row(t / spec.frames_per_mel));
    }
    Ok(cond)
}

// --------------------------------------------------------------------------
// Model
// --------------------------------------------------------------------------

struct DilatedLayer {
    dilation: usize,
    w_cur: Param<ndarray::Ix2>,
    w_prev: Param<ndarray::Ix2>,
    b: Param<ndarray::Ix1>,
    w_cond: Param<ndarray::Ix2>,
    w_skip: Param<ndarray::Ix2>,
    b_skip: Param<ndarray::Ix1>,
    w_res: Param<ndarray::Ix2>,
    b_res: Param<ndarray::Ix1>,
}

struct PostLayer {
    w: Param<ndarray::Ix2>,
    b: Param<ndarray::Ix1>,
}

struct Cache {
    cond: Array2<f64>,
    codes: Vec<u8>,
    xs: Vec<Array2<f64>>,
    tfs: Vec<Array2<f64>>,
    sgs: Vec<Array2<f64>>,
    skip_sum: Array2<f64>,
    h: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
}

pub struct WaveNet {
    cfg: VocoderConfig,
    embed: Param<ndarray::Ix2>,
    layers: Vec<DilatedLayer>,
    post1: PostLayer,
    post2: PostLayer,
    cache: Option<Cache>,
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

impl WaveNet {
    pub fn new(cfg: &VocoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derive_rng(seed, &[tag("vocoder-init")]);
        let r = cfg.residual_channels;
        let k = cfg.skip_channels;
        let q = cfg.quantization_levels;
        let sr = 1.0 / (r as f64).sqrt();
        let sk = 1.0 / (k as f64).sqrt();

        let embed = Param::new(uniform(&mut rng, q, r, 1.0));
        let layers = cfg
            .dilations()
            .into_iter()
            .map(|dilation| DilatedLayer {
                dilation,
                w_cur: Param::new(uniform(&mut rng, r, 2 * r, sr)),
                w_prev: Param::new(uniform(&mut rng, r, 2 * r, sr)),
                b: Param::new(Array1::zeros(2 * r)),
                w_cond: Param::new(uniform(&mut rng, r, 2 * r, sr)),
                w_skip: Param::new(uniform(&mut rng, r, k, sr)),
                b_skip: Param::new(Array1::zeros(k)),
                w_res: Param::new(uniform(&mut rng, r, r, sr)),
                b_res: Param::new(Array1::zeros(r)),
            })
            .collect();
        let post1 = PostLayer {
            w: Param::new(uniform(&mut rng, k, k, sk)),
            b: Param::new(Array1::zeros(k)),
        };
        // A small head keeps the untrained output distribution near uniform.
        let post2 = PostLayer {
            w: Param::new(uniform(&mut rng, k, q, 0.05 * sk)),
            b: Param::new(Array1::zeros(q)),
        };
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            layers,
            post1,
            post2,
            cache: None,
        })
    }

    pub fn config(&self) -> &VocoderConfig {
        &self.cfg
    }

    fn check_inputs(&self, codes: &[u8], cond: &Array2<f64>) -> Result<()> {
        if codes.is_empty() {
            return Err(Error::invalid("code sequence is empty"));
        }
        if codes.len() != cond.nrows() {
            return Err(Error::shape(format!(
                "{} codes do not match {} conditioning rows",
                codes.len(),
                cond.nrows()
            )));
        }
        if cond.ncols() != self.cfg.residual_channels {
            return Err(Error::shape(format!(
                "conditioning has {} channels, expected {}",
                cond.ncols(),
                self.cfg.residual_channels
            )));
        }
        Ok(())
    }

    /// Embedding rows of the codes shifted one step into the past; step
    /// zero sees a zero vector so no output depends on its own code.
    fn shifted_inputs(&self, codes: &[u8]) -> Array2<f64> {
        let t = codes.len();
        let r = self.cfg.residual_channels;
        let mut x = Array2::zeros((t, r));
        for s in 1..t {
            x.row_mut(s).assign(&self.embed.value.row(codes[s - 1] as usize));
        }
        x
    }

    fn run(&self, codes: &[u8], cond: &Array2<f64>, mut cache: Option<&mut Cache>) -> Array2<f64> {
        let t = codes.len();
        let r = self.cfg.residual_channels;
        let k = self.cfg.skip_channels;
        let mut x = self.shifted_inputs(codes);
        let mut skip_sum: Array2<f64> = Array2::zeros((t, k));

        for layer in &self.layers {
            let d = layer.dilation;
            let mut pre = x.dot(&layer.w_cur.value) + cond.dot(&layer.w_cond.value) + &layer.b.value;
            if d < t {
                let prev_part = x.slice(s![..t - d, ..]).dot(&layer.w_prev.value);
                let mut tail = pre.slice_mut(s![d.., ..]);
                tail += &prev_part;
            }
            let tf = pre.slice(s![.., ..r]).mapv(f64::tanh);
            let sg = pre.slice(s![.., r..]).mapv(|v| 1.0 / (1.0 + (-v).exp()));
            let z = &tf * &sg;
            skip_sum += &(z.dot(&layer.w_skip.value) + &layer.b_skip.value);
            let x_next = &x + &(z.dot(&layer.w_res.value) + &layer.b_res.value);
            if let Some(c) = cache.as_deref_mut() {
                c.xs.push(std::mem::replace(&mut x, x_next));
                c.tfs.push(tf);
                c.sgs.push(sg);
            } else {
                x = x_next;
            }
        }

        let h = skip_sum.mapv(|v| v.max(0.0));
        let h1 = h.dot(&self.post1.w.value) + &self.post1.b.value;
        let h2 = h1.mapv(|v| v.max(0.0));
        let logits = h2.dot(&self.post2.w.value) + &self.post2.b.value;
        if let Some(c) = cache {
            c.skip_sum = skip_sum;
            c.h = h;
            c.h1 = h1;
            c.h2 = h2;
        }
        logits
    }

    /// Per-step logits over the 256 codes given the full code sequence.
    /// Step t sees codes before t and conditioning up to t.
    pub fn teacher_forced_logits(&self, codes: &[u8], cond: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_inputs(codes, cond)?;
        Ok(self.run(codes, cond, None))
    }

    /// Same as `teacher_forced_logits` but retains the activations needed
    /// by `backward`.
    pub fn forward_train(&mut self, codes: &[u8], cond: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_inputs(codes, cond)?;
        let mut cache = Cache {
            cond: cond.clone(),
            codes: codes.to_vec(),
            xs: Vec::with_capacity(self.layers.len()),
            tfs: Vec::with_capacity(self.layers.len()),
            sgs: Vec::with_capacity(self.layers.len()),
            skip_sum: Array2::zeros((0, 0)),
            h: Array2::zeros((0, 0)),
            h1: Array2::zeros((0, 0)),
            h2: Array2::zeros((0, 0)),
        };
        let logits = self.run(codes, cond, Some(&mut cache));
        self.cache = Some(cache);
        Ok(logits)
    }

    /// Accumulates parameter gradients for the cached forward pass.
    pub fn backward(&mut self, dlogits: &Array2<f64>) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::invalid("backward called without a cached forward pass"))?;
        let t = cache.codes.len();
        let r = self.cfg.residual_channels;
        if dlogits.dim() != (t, self.cfg.quantization_levels) {
            return Err(Error::shape("logit gradient shape mismatch"));
        }

        self.post2.w.grad += &cache.h2.t().dot(dlogits);
        self.post2.b.grad += &dlogits.sum_axis(Axis(0));
        let dh2 = dlogits.dot(&self.post2.w.value.t());
        let dh1 = &dh2 * &cache.h1.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        self.post1.w.grad += &cache.h.t().dot(&dh1);
        self.post1.b.grad += &dh1.sum_axis(Axis(0));
        let dh = dh1.dot(&self.post1.w.value.t());
        let dskip = &dh * &cache.skip_sum.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });

        let mut dx: Array2<f64> = Array2::zeros((t, r));
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            let d = layer.dilation;
            let x_in = &cache.xs[i];
            let tf = &cache.tfs[i];
            let sg = &cache.sgs[i];
            let z = tf * sg;

            let dz = dskip.dot(&layer.w_skip.value.t()) + dx.dot(&layer.w_res.value.t());
            layer.w_skip.grad += &z.t().dot(&dskip);
            layer.b_skip.grad += &dskip.sum_axis(Axis(0));
            layer.w_res.grad += &z.t().dot(&dx);
            layer.b_res.grad += &dx.sum_axis(Axis(0));

            let df = &dz * sg * &tf.mapv(|v| 1.0 - v * v);
            let dg = &dz * tf * &sg.mapv(|v| v * (1.0 - v));
            let mut dpre = Array2::zeros((t, 2 * r));
            dpre.slice_mut(s![.., ..r]).assign(&df);
            dpre.slice_mut(s![.., r..]).assign(&dg);

            layer.w_cur.grad += &x_in.t().dot(&dpre);
            layer.w_cond.grad += &cache.cond.t().dot(&dpre);
            layer.b.grad += &dpre.sum_axis(Axis(0));

            let mut dx_in = dpre.dot(&layer.w_cur.value.t());
            dx_in += &dx;
            if d < t {
                layer.w_prev.grad += &x_in.slice(s![..t - d, ..]).t().dot(&dpre.slice(s![d.., ..]));
                let head_extra = dpre.slice(s![d.., ..]).dot(&layer.w_prev.value.t());
                let mut head = dx_in.slice_mut(s![..t - d, ..]);
                head += &head_extra;
            }
            dx = dx_in;
        }

        for step in 1..t {
            let mut row = self.embed.grad.row_mut(cache.codes[step - 1] as usize);
            row += &dx.row(step);
        }
        Ok(())
    }

    pub fn save(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let cfg = self.cfg.clone();
        let arrays = collect_arrays(self);
        save_checkpoint(path.as_ref(), &cfg, &arrays)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (cfg_json, arrays) = load_checkpoint(path.as_ref())?;
        let cfg: VocoderConfig = serde_json::from_value(cfg_json)
            .map_err(|e| Error::config(format!("bad vocoder checkpoint config: {e}")))?;
        let mut net = Self::new(&cfg, 0)?;
        restore_arrays(&mut net, &arrays)?;
        Ok(net)
    }
}

impl HasParams for WaveNet {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.embed.visit(&join(prefix, "embed.w"), v);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let base = join(prefix, &format!("layer.{i}"));
            layer.w_cur.visit(&join(&base, "conv.w_cur"), v);
            layer.w_prev.visit(&join(&base, "conv.w_prev"), v);
            layer.b.visit(&join(&base, "conv.b"), v);
            layer.w_cond.visit(&join(&base, "cond.w"), v);
            layer.w_skip.visit(&join(&base, "skip.w"), v);
            layer.b_skip.visit(&join(&base, "skip.b"), v);
            layer.w_res.visit(&join(&base, "res.w"), v);
            layer.b_res.visit(&join(&base, "res.b"), v);
        }
        self.post1.w.visit(&join(prefix, "post.0.w"), v);
        self.post1.b.visit(&join(prefix, "post.0.b"), v);
        self.post2.w.visit(&join(prefix, "post.1.w"), v);
        self.post2.b.visit(&join(prefix, "post.1.b"), v);
    }
}

// --------------------------------------------------------------------------
// Loss
// --------------------------------------------------------------------------

fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        row -= lse;
    }
    out
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    log_softmax_rows(logits).mapv(f64::exp)
}

/// Mean negative log-likelihood of the codes, in nats per sample.
pub fn ce_loss(logits: &Array2<f64>, codes: &[u8]) -> Result<f64> {
    if logits.nrows() != codes.len() {
        return Err(Error::shape("logit rows do not match code count"));
    }
    let logp = log_softmax_rows(logits);
    let total: f64 = codes
        .iter()
        .enumerate()
        .map(|(t, &c)| -logp[(t, c as usize)])
        .sum();
    Ok(total / codes.len() as f64)
}

/// Gradient of `ce_loss` with respect to the logits.
pub fn ce_grads(logits: &Array2<f64>, codes: &[u8]) -> Result<Array2<f64>> {
    if logits.nrows() != codes.len() {
        return Err(Error::shape("logit rows do not match code count"));
    }
    let n = codes.len() as f64;
    let mut g = softmax_rows(logits);
    for (t, &c) in codes.iter().enumerate() {
        g[(t, c as usize)] -= 1.0;
    }
    g /= n;
    Ok(g)
}

// --------------------------------------------------------------------------
// Training
// --------------------------------------------------------------------------

/// One training clip: quantized codes plus the matching conditioning rows.
pub struct VocoderSample {
    pub codes: QuantizedWaveform,
    pub cond: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocoderHyper {
    pub lr: f64,
    pub epochs: usize,
}

impl Default for VocoderHyper {
    fn default() -> Self {
        Self { lr: 1e-3, epochs: 199 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocoderEpoch {
    pub epoch: usize,
    pub nats: f64,
}

pub fn vocoder_trace_csv(trace: &[VocoderEpoch]) -> String {
    let mut out = String::from("epoch,nats\n");
    for e in trace {
        out.push_str(&format!("{},{}\n", e.epoch, e.nats));
    }
    out
}

/// Minimizes next-code cross-entropy over the corpus, one clip per step.
/// The net may be freshly initialized or loaded from a checkpoint to warm
/// start.
pub fn train_vocoder(
    net: &mut WaveNet,
    corpus: &[VocoderSample],
    hyper: &VocoderHyper,
    seed: u64,
) -> Result<Vec<VocoderEpoch>> {
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    if !(hyper.lr.is_finite() && hyper.lr >= 0.0) || hyper.epochs == 0 {
        return Err(Error::config("need finite lr >= 0 and at least one epoch"));
    }
    for (i, s) in corpus.iter().enumerate() {
        if s.codes.sample_rate != net.cfg.sample_rate {
            return Err(Error::invalid(format!(
                "clip {i} sample rate {} does not match model rate {}",
                s.codes.sample_rate, net.cfg.sample_rate
            )));
        }
        net.check_inputs(&s.codes.codes, &s.cond)?;
    }

    let mut opt = crate::nn::Adam::new(hyper.lr);
    let mut trace = Vec::with_capacity(hyper.epochs);
    for epoch in 1..=hyper.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut rng = derive_rng(seed, &[tag("vocoder-shuffle"), epoch as u64]);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut total = 0.0;
        let mut samples = 0usize;
        for &i in &order {
            let clip = &corpus[i];
            crate::nn::zero_grads(net);
            let logits = net.forward_train(&clip.codes.codes, &clip.cond)?;
            let loss = ce_loss(&logits, &clip.codes.codes)?;
            let dlogits = ce_grads(&logits, &clip.codes.codes)?;
            net.backward(&dlogits)?;
            opt.step(net);
            total += loss * clip.codes.codes.len() as f64;
            samples += clip.codes.codes.len();
        }
        trace.push(VocoderEpoch {
            epoch,
            nats: total / samples as f64,
        });
    }
    Ok(trace)
}

// --------------------------------------------------------------------------
// Generation
// --------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum Sampling {
    /// Categorical draw per step at temperature one.
    Random(u64),
    /// Highest-probability code per step.
    Greedy,
}

struct StepState {
    history: Vec<std::collections::VecDeque<Array1<f64>>>,
}

fn matvec(x: &ArrayView1<f64>, w: &Array2<f64>) -> Array1<f64> {
    x.dot(w)
}

/// Autoregressive decoding: one code per conditioning row.
pub fn generate_codes(net: &WaveNet, cond: &Array2<f64>, sampling: &Sampling) -> Result<QuantizedWaveform> {
    let t_total = cond.nrows();
    if t_total == 0 {
        return Err(Error::invalid("conditioning is empty"));
    }
    if cond.ncols() != net.cfg.residual_channels {
        return Err(Error::shape(format!(
            "conditioning has {} channels, expected {}",
            cond.ncols(),
            net.cfg.residual_channels
        )));
    }
    let r = net.cfg.residual_channels;
    let mut rng = match sampling {
        Sampling::Random(seed) => Some(derive_rng(*seed, &[tag("vocoder-generate")])),
        Sampling::Greedy => None,
    };
    let mut state = StepState {
        history: net.layers.iter().map(|_| std::collections::VecDeque::new()).collect(),
    };
    let mut codes = Vec::with_capacity(t_total);
    let mut prev_code: Option<u8> = None;

    for t in 0..t_total {
        let mut x: Array1<f64> = match prev_code {
            Some(c) => net.embed.value.row(c as usize).to_owned(),
            None => Array1::zeros(r),
        };
        let cond_row = cond.row(t);
        let mut skip_acc: Array1<f64> = Array1::zeros(net.cfg.skip_channels);
        for (i, layer) in net.layers.iter().enumerate() {
            let hist = &mut state.history[i];
            let past = if hist.len() == layer.dilation {
                hist.pop_front().expect("nonempty history")
            } else {
                Array1::zeros(r)
            };
            let mut pre = matvec(&x.view(), &layer.w_cur.value)
                + matvec(&cond_row, &layer.w_cond.value)
                + &layer.b.value;
            pre += &matvec(&past.view(), &layer.w_prev.value);
            hist.push_back(x.clone());
            let tf = pre.slice(s![..r]).mapv(f64::tanh);
            let sg = pre.slice(s![r..]).mapv(|v| 1.0 / (1.0 + (-v).exp()));
            let z = &tf * &sg;
            skip_acc += &(matvec(&z.view(), &layer.w_skip.value) + &layer.b_skip.value);
            x = &x + &(matvec(&z.view(), &layer.w_res.value) + &layer.b_res.value);
        }
        let h = skip_acc.mapv(|v| v.max(0.0));
        let h1 = matvec(&h.view(), &net.post1.w.value) + &net.post1.b.value;
        let h2 = h1.mapv(|v| v.max(0.0));
        let logits = matvec(&h2.view(), &net.post2.w.value) + &net.post2.b.value;

        let code = match rng.as_mut() {
            Some(rng) => {
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let probs: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
                let total: f64 = probs.iter().sum();
                let mut u = rng.gen_range(0.0..1.0) * total;
                let mut chosen = probs.len() - 1;
                for (i, &p) in probs.iter().enumerate() {
                    if u < p {
                        chosen = i;
                        break;
                    }
                    u -= p;
                }
                chosen as u8
            }
            None => {
                let mut best = 0usize;
                for (i, &v) in logits.iter().enumerate() {
                    if v > logits[best] {
                        best = i;
                    }
                }
                best as u8
            }
        };
        codes.push(code);
        prev_code = Some(code);
    }
    Ok(QuantizedWaveform {
        codes,
        sample_rate: net.cfg.sample_rate,
    })
}

/// Samples a waveform and decodes it through mu-law.
pub fn generate(net: &WaveNet, cond: &Array2<f64>, seed: u64) -> Result<AudioClip> {
    let q = generate_codes(net, cond, &Sampling::Random(seed))?;
    mu_law_decode(&q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::test_util::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(n_layers: usize, cycle: Vec<usize>, res: usize, skip: usize) -> VocoderConfig {
        VocoderConfig {
            n_dilated_layers: n_layers,
            dilation_cycle: cycle,
            residual_channels: res,
            skip_channels: skip,
            quantization_levels: QUANTIZATION_LEVELS,
            sample_rate: 8_000,
            cond_spec: CondSpec {
                mel_dim: MEL_DIM,
                facial_dim: 0,
                frames_per_mel: 40,
            },
        }
    }

    fn rand_codes(rng: &mut ChaCha8Rng, t: usize) -> Vec<u8> {
        (0..t).map(|_| rng.gen_range(0..=255u8)).collect()
    }

    fn rand_cond(rng: &mut ChaCha8Rng, t: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((t, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn mu_law_endpoints_and_center() {
        let (q, clipped) = mu_law_encode(&[0.0, 1.0, -1.0], 8_000);
        assert_eq!(q.codes, vec![128, 255, 0]);
        assert_eq!(clipped, 0);
        let decoded = mu_law_decode(&q).unwrap();
        assert!(decoded.samples()[0].abs() < 1e-3);
    }

    #[test]
    fn out_of_range_samples_are_clipped_and_counted() {
        let (q, clipped) = mu_law_encode(&[-2.0, 0.25, 1.5], 8_000);
        assert_eq!(clipped, 2);
        assert_eq!(q.codes[0], 0);
        assert_eq!(q.codes[2], 255);
    }

    #[test]
    fn mu_law_round_trip_stays_within_bin_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..10_000).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let (q, clipped) = mu_law_encode(&xs, 8_000);
        assert_eq!(clipped, 0);
        let back = mu_law_decode(&q).unwrap();
        for (i, (&x, &y)) in xs.iter().zip(back.samples()).enumerate() {
            // Bin edges evaluated directly from the companding curve.
            let c = q.codes[i] as f64;
            let lo = mu_law_inverse(c / 128.0 - 1.0);
            let hi = mu_law_inverse((c + 1.0) / 128.0 - 1.0);
            let width = hi - lo;
            assert!(width > 0.0);
            assert!(
                (y - x).abs() <= width * (1.0 + 1e-12) + 1e-15,
                "sample {i}: x {x} decoded {y} exceeds bin width {width}"
            );
            assert!(lo - 1e-12 <= x && x <= hi + 1e-12);
        }
    }

    #[test]
    fn condition_length_and_constancy() {
        let mut cfg = VocoderConfig::desk();
        cfg.cond_spec.frames_per_mel = 80;
        let t_a = 400;
        let mel = Array2::from_elem((t_a, MEL_DIM), 0.7);
        let facial = Array2::from_elem((t_a / FRAMES_PER_FACIAL, FACIAL_DIM), -0.2);
        let cond = build_condition(&mel, &facial, &cfg).unwrap();
        assert_eq!(cond.dim(), (32_000, cfg.residual_channels));
        let first = cond.row(0).to_owned();
        for row in cond.rows() {
            assert_eq!(row, first.view());
        }

        let again = build_condition(&mel, &facial, &cfg).unwrap();
        assert_eq!(cond, again);
    }

    #[test]
    fn condition_rejects_rate_mismatch() {
        let cfg = VocoderConfig::desk();
        let mel = Array2::zeros((80, MEL_DIM));
        let facial = Array2::zeros((9, FACIAL_DIM));
        assert!(build_condition(&mel, &facial, &cfg).is_err());
        let facial_bad = Array2::zeros((10, FACIAL_DIM - 1));
        assert!(build_condition(&mel, &facial_bad, &cfg).is_err());
    }

    #[test]
    fn audio_only_condition_ignores_facial_stream() {
        let cfg = VocoderConfig::desk().audio_only_baseline();
        let mel = Array2::from_shape_fn((24, MEL_DIM), |(t, c)| ((t * 7 + c) % 13) as f64 * 0.1);
        let empty = Array2::zeros((0, 0));
        let cond = build_condition(&mel, &empty, &cfg).unwrap();
        assert_eq!(cond.dim(), (24 * cfg.cond_spec.frames_per_mel, cfg.residual_channels));
    }

    #[test]
    fn causality_over_random_configurations() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for case in 0..50 {
            let n_layers = rng.gen_range(1..=5);
            let cycle: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| 1 << rng.gen_range(0..3)).collect();
            let res = rng.gen_range(2..=6);
            let skip = rng.gen_range(2..=5);
            let cfg = tiny_cfg(n_layers, cycle, res, skip);
            let net = WaveNet::new(&cfg, 100 + case).unwrap();
            let t = rng.gen_range(20..=40);
            let codes = rand_codes(&mut rng, t);
            let cond = rand_cond(&mut rng, t, res);
            let base = net.teacher_forced_logits(&codes, &cond).unwrap();

            let t0 = rng.gen_range(0..t);
            let mut poked = codes.clone();
            poked[t0] = poked[t0].wrapping_add(31);
            let after = net.teacher_forced_logits(&poked, &cond).unwrap();
            for step in 0..=t0 {
                assert_eq!(
                    base.row(step),
                    after.row(step),
                    "case {case}: code at {t0} leaked into step {step}"
                );
            }

            let mut cond_poked = cond.clone();
            for step in t0..t {
                for v in cond_poked.row_mut(step) {
                    *v += 0.5;
                }
            }
            let after_cond = net.teacher_forced_logits(&codes, &cond_poked).unwrap();
            for step in 0..t0 {
                assert_eq!(
                    base.row(step),
                    after_cond.row(step),
                    "case {case}: conditioning at {t0} leaked into step {step}"
                );
            }
        }
    }

    #[test]
    fn perturbation_reach_matches_receptive_field() {
        let cfg = tiny_cfg(3, vec![1, 2, 4], 4, 4);
        assert_eq!(cfg.receptive_field(), 8);
        let net = WaveNet::new(&cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = 24;
        let codes = rand_codes(&mut rng, t);
        let cond = rand_cond(&mut rng, t, 4);
        let base = net.teacher_forced_logits(&codes, &cond).unwrap();

        let t0 = 5;
        let mut poked = codes.clone();
        poked[t0] = poked[t0].wrapping_add(97);
        let after = net.teacher_forced_logits(&poked, &cond).unwrap();

        let rf = cfg.receptive_field();
        let changed: Vec<usize> = (0..t)
            .filter(|&s| base.row(s) != after.row(s))
            .collect();
        assert_eq!(changed.first(), Some(&(t0 + 1)));
        assert_eq!(changed.last(), Some(&(t0 + rf)));
    }

    #[test]
    fn softmax_rows_are_normalized() {
        let cfg = tiny_cfg(2, vec![1, 2], 3, 3);
        let net = WaveNet::new(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let codes = rand_codes(&mut rng, 30);
        let cond = rand_cond(&mut rng, 30, 3);
        let logits = net.teacher_forced_logits(&codes, &cond).unwrap();
        let probs = softmax_rows(&logits);
        for row in probs.rows() {
            let sum: f64 = row.sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn untrained_loss_is_near_uniform_entropy() {
        let cfg = tiny_cfg(3, vec![1, 2, 4], 6, 6);
        let net = WaveNet::new(&cfg, 15).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let codes = rand_codes(&mut rng, 400);
        let cond = rand_cond(&mut rng, 400, 6);
        let logits = net.teacher_forced_logits(&codes, &cond).unwrap();
        let nats = ce_loss(&logits, &codes).unwrap();
        let uniform = (QUANTIZATION_LEVELS as f64).ln();
        assert!(
            (nats - uniform).abs() < 0.05,
            "untrained loss {nats} is far from ln 256 = {uniform}"
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny_cfg(2, vec![1, 2], 4, 4);
        let mut net = WaveNet::new(&cfg, 5).unwrap();
        crate::nn::test_util::jitter_params(&mut net, 55, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let codes = rand_codes(&mut rng, 32);
        let cond = rand_cond(&mut rng, 32, 4);
        check_gradients(
            &mut net,
            |net| {
                let logits = net.forward_train(&codes, &cond).unwrap();
                let d = ce_grads(&logits, &codes).unwrap();
                let loss = ce_loss(&logits, &codes).unwrap();
                net.backward(&d).unwrap();
                loss
            },
            1e-5,
            1e-4,
        );
    }

    #[test]
    fn generation_length_range_and_determinism() {
        let cfg = tiny_cfg(2, vec![1, 4], 4, 4);
        let net = WaveNet::new(&cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cond = rand_cond(&mut rng, 100, 4);
        let clip = generate(&net, &cond, 77).unwrap();
        assert_eq!(clip.len(), 100);
        assert!(clip.samples().iter().all(|&x| (-1.0..=1.0).contains(&x)));
        let clip2 = generate(&net, &cond, 77).unwrap();
        assert_eq!(clip.samples(), clip2.samples());
    }

    #[test]
    fn greedy_generation_agrees_with_teacher_forcing() {
        let cfg = tiny_cfg(3, vec![1, 2, 4], 5, 5);
        let net = WaveNet::new(&cfg, 19).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let cond = rand_cond(&mut rng, 60, 5);
        let gen = generate_codes(&net, &cond, &Sampling::Greedy).unwrap();
        let logits = net.teacher_forced_logits(&gen.codes, &cond).unwrap();
        for (t, &c) in gen.codes.iter().enumerate() {
            let row = logits.row(t);
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            assert_eq!(best as u8, c, "step {t} disagrees");
        }
    }

    #[test]
    fn training_is_deterministic_for_a_seed() {
        let cfg = tiny_cfg(2, vec![1, 2], 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let corpus: Vec<VocoderSample> = (0..2)
            .map(|_| {
                let t = 60;
                VocoderSample {
                    codes: QuantizedWaveform {
                        codes: rand_codes(&mut rng, t),
                        sample_rate: cfg.sample_rate,
                    },
                    cond: rand_cond(&mut rng, t, 4),
                }
            })
            .collect();
        let hyper = VocoderHyper { lr: 1e-3, epochs: 3 };

        let mut a = WaveNet::new(&cfg, 40).unwrap();
        let trace_a = train_vocoder(&mut a, &corpus, &hyper, 50).unwrap();
        let mut b = WaveNet::new(&cfg, 40).unwrap();
        let trace_b = train_vocoder(&mut b, &corpus, &hyper, 50).unwrap();
        assert_eq!(trace_a, trace_b);
        assert_eq!(collect_arrays(&mut a), collect_arrays(&mut b));

        let csv = vocoder_trace_csv(&trace_a);
        assert!(csv.starts_with("epoch,nats\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn empty_corpus_and_mismatched_lengths_are_errors() {
        let cfg = tiny_cfg(1, vec![1], 3, 3);
        let mut net = WaveNet::new(&cfg, 1).unwrap();
        assert!(train_vocoder(&mut net, &[], &VocoderHyper::default(), 0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let codes = rand_codes(&mut rng, 10);
        let cond = rand_cond(&mut rng, 11, 3);
        assert!(net.teacher_forced_logits(&codes, &cond).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_logits() {
        let cfg = tiny_cfg(2, vec![1, 2], 4, 4);
        let mut net = WaveNet::new(&cfg, 60).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let codes = rand_codes(&mut rng, 40);
        let cond = rand_cond(&mut rng, 40, 4);
        let corpus = vec![VocoderSample {
            codes: QuantizedWaveform {
                codes: codes.clone(),
                sample_rate: cfg.sample_rate,
            },
            cond: cond.clone(),
        }];
        train_vocoder(&mut net, &corpus, &VocoderHyper { lr: 1e-3, epochs: 2 }, 62).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocoder.avck");
        net.save(&path).unwrap();
        let restored = WaveNet::load(&path).unwrap();
        assert_eq!(restored.config(), net.config());
        let a = net.teacher_forced_logits(&codes, &cond).unwrap();
        let b = restored.teacher_forced_logits(&codes, &cond).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn warm_start_resumes_below_fresh_loss() {
        let cfg = tiny_cfg(2, vec![1, 2], 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let codes = rand_codes(&mut rng, 80);
        let cond = rand_cond(&mut rng, 80, 4);
        let corpus = vec![VocoderSample {
            codes: QuantizedWaveform {
                codes,
                sample_rate: cfg.sample_rate,
            },
            cond,
        }];

        let mut warm = WaveNet::new(&cfg, 71).unwrap();
        train_vocoder(&mut warm, &corpus, &VocoderHyper { lr: 3e-3, epochs: 30 }, 72).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("warm.avck");
        warm.save(&path).unwrap();

        let mut resumed = WaveNet::load(&path).unwrap();
        let resumed_trace =
            train_vocoder(&mut resumed, &corpus, &VocoderHyper { lr: 3e-3, epochs: 1 }, 73).unwrap();
        let mut fresh = WaveNet::new(&cfg, 74).unwrap();
        let fresh_trace =
            train_vocoder(&mut fresh, &corpus, &VocoderHyper { lr: 3e-3, epochs: 1 }, 73).unwrap();
        assert!(resumed_trace[0].nats < fresh_trace[0].nats);
    }

    #[test]
    fn overfits_a_half_second_clip_and_greedy_decodes_it() {
        // A clean deterministic harmonic clip at 8 kHz; half a second is
        // 4000 samples and 100 mel frames at a 5 ms hop.
        let sr = 8_000usize;
        let n = sr / 2;
        let samples: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / sr as f64;
                let f0 = 110.0 + 30.0 * (t * 2.1).sin();
                let phase = std::f64::consts::TAU * f0 * t;
                0.35 * phase.sin() + 0.18 * (2.0 * phase).sin() + 0.08 * (3.0 * phase).sin()
            })
            .collect();
        let clip = AudioClip::new(samples, sr as u32).unwrap();
        let mel = crate::mel::extract_mel(&clip, 25.0, 5.0).unwrap();

        let mut cfg = VocoderConfig::desk().audio_only_baseline();
        cfg.n_dilated_layers = 14;
        let empty = Array2::zeros((0, 0));
        let cond = build_condition(mel.frames(), &empty, &cfg).unwrap();

        let (q, _) = mu_law_encode(clip.samples(), clip.sample_rate());
        let codes: Vec<u8> = q.codes[..cond.nrows()].to_vec();
        let corpus = vec![VocoderSample {
            codes: QuantizedWaveform {
                codes: codes.clone(),
                sample_rate: cfg.sample_rate,
            },
            cond: cond.clone(),
        }];

        let mut net = WaveNet::new(&cfg, 80).unwrap();
        let hyper = VocoderHyper { lr: 3e-3, epochs: 500 };
        let trace = train_vocoder(&mut net, &corpus, &hyper, 81).unwrap();
        let last = trace.last().unwrap().nats;
        assert!(
            last < 0.1,
            "cross-entropy only reached {last} nats per sample"
        );

        let gen = generate_codes(&net, &cond, &Sampling::Greedy).unwrap();
        let matches = gen
            .codes
            .iter()
            .zip(&codes)
            .filter(|(a, b)| a == b)
            .count();
        let rate = matches as f64 / codes.len() as f64;
        assert!(
            rate > 0.9,
            "greedy decode only reproduced {:.1}% of the training codes",
            rate * 100.0
        );
    }
}
