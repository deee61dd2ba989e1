//! Synthetic correlated parallel corpus.
//!
//! Each parallel pair is driven by one shared latent articulation
//! trajectory: sums of seeded low-frequency sinusoids. The trajectory
//! controls mouth opening, acoustic energy, pitch modulation, head pose,
//! blink, and gaze. Source and target speakers color the shared
//! articulation differently (pitch base, harmonic gains, face geometry,
//! appearance projection), the target is mildly time-warped, and the source
//! receives independent per-modality noise. Mel spectra come from the
//! actually generated waveforms, so acoustic features, lip keypoints, and
//! audio stay mutually consistent.
//!
//! Clip lengths are chosen so that a 25 ms / 5 ms mel analysis yields
//! exactly eight frames per video frame; generated utterances are already
//! rate-tied.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::features::{
    fuse_facial, UtteranceFeatures, EMBEDDING_DIM, FRAMES_PER_FACIAL, KEYPOINT_DIM, NUM_KEYPOINTS,
};
use crate::mel::extract_mel;

const NUM_LATENT: usize = 8;
const SINES_PER_DIM: usize = 4;
const NUM_HARMONICS: usize = 6;
const TRAIN_WINDOW_MS: f64 = 25.0;
const TRAIN_HOP_MS: f64 = 5.0;

/// Settings for the synthetic parallel corpus generator.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthConfig {
    pub sample_rate: u32,
    pub fps: f64,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    /// Share of mouth movement driven by the same latent dimension as the
    /// acoustic energy; the remainder follows an independent dimension.
    pub correlation_strength: f64,
    /// Scale of the independent noise added to source-side modalities.
    pub source_noise: f64,
    /// Amplitude of the monotone sinusoidal time warp applied to the target.
    pub warp_strength: f64,
    /// Target duration factor range relative to the source.
    pub min_tempo_factor: f64,
    pub max_tempo_factor: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            fps: 25.0,
            min_duration_s: 2.0,
            max_duration_s: 6.0,
            correlation_strength: 0.9,
            source_noise: 1.0,
            warp_strength: 0.3,
            min_tempo_factor: 0.9,
            max_tempo_factor: 1.15,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate < 1000 || self.sample_rate % 200 != 0 {
            return Err(Error::config(
                "sample_rate must be at least 1000 and a multiple of 200 \
                 so 5 ms hops are a whole number of samples",
            ));
        }
        if self.fps != 25.0 {
            return Err(Error::config(
                "fps must be 25 to preserve the 8:1 acoustic-to-facial tie",
            ));
        }
        if !(self.min_duration_s >= 0.2 && self.min_duration_s <= self.max_duration_s) {
            return Err(Error::config(
                "need 0.2 <= min_duration_s <= max_duration_s",
            ));
        }
        if self.max_duration_s > 30.0 {
            return Err(Error::config("max_duration_s must be at most 30"));
        }
        if !(0.0..=1.0).contains(&self.correlation_strength) {
            return Err(Error::config("correlation_strength must be in [0, 1]"));
        }
        if !(self.source_noise >= 0.0) {
            return Err(Error::config("source_noise must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.warp_strength) {
            return Err(Error::config("warp_strength must be in [0, 1)"));
        }
        if !(0.5 <= self.min_tempo_factor
            && self.min_tempo_factor <= self.max_tempo_factor
            && self.max_tempo_factor <= 2.0)
        {
            return Err(Error::config(
                "need 0.5 <= min_tempo_factor <= max_tempo_factor <= 2.0",
            ));
        }
        Ok(())
    }
}

/// A generated parallel corpus: per-index paired utterances and clips.
pub struct ParallelCorpus {
    pub source: Vec<UtteranceFeatures>,
    pub target: Vec<UtteranceFeatures>,
    pub clips: Vec<(AudioClip, AudioClip)>,
}

// --------------------------------------------------------------------------
// Seed derivation
// --------------------------------------------------------------------------

pub(crate) fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn tag(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) fn derive_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    ChaCha8Rng::seed_from_u64(h)
}

// --------------------------------------------------------------------------
// Latent trajectory
// --------------------------------------------------------------------------

#[derive(Clone, Copy)]
struct Sinusoid {
    amp: f64,
    freq_hz: f64,
    phase: f64,
}

struct Trajectory {
    dims: Vec<[Sinusoid; SINES_PER_DIM]>,
}

impl Trajectory {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let dims = (0..NUM_LATENT)
            .map(|_| {
                let mut sines = [Sinusoid { amp: 0.0, freq_hz: 0.0, phase: 0.0 }; SINES_PER_DIM];
                let mut total = 0.0;
                for s in sines.iter_mut() {
                    s.amp = rng.gen_range(0.3..1.0);
                    s.freq_hz = rng.gen_range(0.25..2.2);
                    s.phase = rng.gen_range(0.0..std::f64::consts::TAU);
                    total += s.amp;
                }
                for s in sines.iter_mut() {
                    s.amp /= total;
                }
                sines
            })
            .collect();
        Self { dims }
    }

    fn eval(&self, dim: usize, t: f64) -> f64 {
        self.dims[dim]
            .iter()
            .map(|s| s.amp * (std::f64::consts::TAU * s.freq_hz * t + s.phase).sin())
            .sum()
    }

    /// Squashed activation of one latent dimension, in (0, 1).
    fn act(&self, dim: usize, t: f64) -> f64 {
        0.5 + 0.5 * (2.2 * self.eval(dim, t)).tanh()
    }

    fn openness(&self, corr: f64, t: f64) -> f64 {
        corr * self.act(0, t) + (1.0 - corr) * self.act(1, t)
    }

    fn energy(&self, t: f64) -> f64 {
        0.12 + 0.8 * self.act(0, t)
    }

    fn f0_mod(&self, t: f64) -> f64 {
        (1.5 * self.eval(2, t)).tanh()
    }
}

// --------------------------------------------------------------------------
// Speaker parameters
// --------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FaceStyle {
    pub bg: [f64; 3],
    pub skin: [f64; 3],
    pub lip: [f64; 3],
    pub mouth: [f64; 3],
    pub eye: [f64; 3],
    pub pupil: [f64; 3],
    pub brow: [f64; 3],
    pub nose: [f64; 3],
}

/// Deterministic per-speaker rendering palette for a corpus seed.
pub fn face_style(seed: u64, speaker: &str) -> FaceStyle {
    let mut rng = derive_rng(seed, &[tag("style"), tag(speaker)]);
    let mut around = |c: [f64; 3], spread: f64| {
        [
            (c[0] + rng.gen_range(-spread..spread)).clamp(0.0, 1.0),
            (c[1] + rng.gen_range(-spread..spread)).clamp(0.0, 1.0),
            (c[2] + rng.gen_range(-spread..spread)).clamp(0.0, 1.0),
        ]
    };
    FaceStyle {
        bg: around([0.10, 0.11, 0.14], 0.04),
        skin: around([0.82, 0.66, 0.55], 0.08),
        lip: around([0.70, 0.24, 0.28], 0.06),
        mouth: around([0.10, 0.05, 0.06], 0.02),
        eye: around([0.93, 0.93, 0.90], 0.03),
        pupil: around([0.08, 0.07, 0.10], 0.02),
        brow: around([0.22, 0.15, 0.10], 0.05),
        nose: around([0.66, 0.50, 0.42], 0.05),
    }
}

#[derive(Debug, Clone, Copy)]
struct FaceGeom {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    eye_dx: f64,
    eye_y: f64,
    eye_rx: f64,
    eye_ry: f64,
    brow_y: f64,
    nose_top: f64,
    nose_bot: f64,
    mouth_y: f64,
    mouth_rx: f64,
    lip_base: f64,
    lip_gain: f64,
}

struct SpeakerParams {
    f0_base: f64,
    gains: [f64; NUM_HARMONICS],
    harmonic_phases: [f64; NUM_HARMONICS],
    geom: FaceGeom,
    w_emb: Array2<f64>,
    b_emb: Array1<f64>,
}

fn speaker_params(seed: u64, speaker: &str) -> SpeakerParams {
    let mut rng = derive_rng(seed, &[tag("speaker"), tag(speaker)]);
    let f0_base = rng.gen_range(110.0..200.0);
    let mut gains = [0.0; NUM_HARMONICS];
    let mut total = 0.0;
    for (h, g) in gains.iter_mut().enumerate() {
        *g = rng.gen_range(0.2..1.0) / (h as f64 + 1.0).powf(0.8);
        total += *g;
    }
    for g in gains.iter_mut() {
        *g /= total;
    }
    let mut harmonic_phases = [0.0; NUM_HARMONICS];
    for p in harmonic_phases.iter_mut() {
        *p = rng.gen_range(0.0..std::f64::consts::TAU);
    }

    let cx = 0.5 + rng.gen_range(-0.02..0.02);
    let cy = 0.5 + rng.gen_range(-0.02..0.02);
    let eye_y = cy - 0.10 - rng.gen_range(0.0..0.02);
    let geom = FaceGeom {
        cx,
        cy,
        rx: 0.28 + rng.gen_range(0.0..0.05),
        ry: 0.33 + rng.gen_range(0.0..0.05),
        eye_dx: 0.11 + rng.gen_range(0.0..0.025),
        eye_y,
        eye_rx: 0.040 + rng.gen_range(0.0..0.012),
        eye_ry: 0.018 + rng.gen_range(0.0..0.008),
        brow_y: eye_y - 0.045 - rng.gen_range(0.0..0.01),
        nose_top: eye_y + 0.02,
        nose_bot: cy + 0.10 + rng.gen_range(0.0..0.02),
        mouth_y: cy + 0.17 + rng.gen_range(0.0..0.025),
        mouth_rx: 0.075 + rng.gen_range(0.0..0.02),
        lip_base: 0.010 + rng.gen_range(0.0..0.005),
        lip_gain: 0.050 + rng.gen_range(0.0..0.02),
    };

    let normal = Normal::new(0.0, 0.45).expect("valid std dev");
    let w_emb = Array2::from_shape_fn((EMBEDDING_DIM, NUM_LATENT), |_| normal.sample(&mut rng));
    let bias = Normal::new(0.0, 0.2).expect("valid std dev");
    let b_emb = Array1::from_shape_fn(EMBEDDING_DIM, |_| bias.sample(&mut rng));

    SpeakerParams { f0_base, gains, harmonic_phases, geom, w_emb, b_emb }
}

// --------------------------------------------------------------------------
// Keypoints
// --------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn keypoints_at(
    g: &FaceGeom,
    open: f64,
    dx: f64,
    dy: f64,
    blink: f64,
    gaze_x: f64,
    gaze_y: f64,
) -> Vec<f64> {
    use std::f64::consts::{PI, TAU};
    let mut pts = vec![(0.0f64, 0.0f64); NUM_KEYPOINTS];

    // Jaw: lower ellipse arc, left ear to right ear through the chin.
    for i in 0..17 {
        let t = i as f64 / 16.0;
        pts[i] = (g.cx - g.rx * (PI * t).cos(), g.cy + g.ry * (PI * t).sin());
    }
    // Eyebrows.
    for k in 0..5 {
        let t = k as f64 / 4.0;
        let x_off = -1.5 * g.eye_rx + 3.0 * g.eye_rx * t;
        let lift = 0.012 * (PI * t).sin();
        pts[17 + k] = (g.cx - g.eye_dx + x_off, g.brow_y - lift);
        pts[22 + k] = (g.cx + g.eye_dx + x_off, g.brow_y - lift);
    }
    // Nose bridge and base.
    for k in 0..4 {
        let t = k as f64 / 3.0;
        pts[27 + k] = (g.cx, g.nose_top + (g.nose_bot - g.nose_top) * t);
    }
    for k in 0..5 {
        let t = k as f64 / 4.0;
        pts[31 + k] = (g.cx + (t - 0.5) * 0.064, g.nose_bot + 0.012 * (PI * t).sin());
    }
    // Eye rings, six points each; lid height scales with blink openness.
    let lid = g.eye_ry * blink;
    for k in 0..6 {
        let a = TAU * k as f64 / 6.0;
        pts[36 + k] = (g.cx - g.eye_dx + g.eye_rx * a.cos(), g.eye_y - lid * a.sin());
        pts[42 + k] = (g.cx + g.eye_dx + g.eye_rx * a.cos(), g.eye_y - lid * a.sin());
    }
    // Outer lip ring: upper and lower halves open by different amounts.
    let hu = g.lip_base + 0.38 * g.lip_gain * open;
    let hl = g.lip_base + 0.62 * g.lip_gain * open;
    for k in 0..12 {
        let a = TAU * k as f64 / 12.0;
        let h = if a.sin() >= 0.0 { hu } else { hl };
        pts[48 + k] = (g.cx + g.mouth_rx * a.cos(), g.mouth_y - h * a.sin());
    }
    // Inner lip ring.
    let hi = 0.45 * g.lip_gain * open;
    for k in 0..8 {
        let a = TAU * k as f64 / 8.0;
        pts[60 + k] = (g.cx + 0.6 * g.mouth_rx * a.cos(), g.mouth_y - hi * a.sin());
    }
    // Pupils.
    let px = 0.35 * g.eye_rx * gaze_x;
    let py = 0.30 * g.eye_ry * gaze_y;
    pts[68] = (g.cx - g.eye_dx + px, g.eye_y + py);
    pts[69] = (g.cx + g.eye_dx + px, g.eye_y + py);

    let mut flat = Vec::with_capacity(KEYPOINT_DIM);
    for (x, y) in pts {
        flat.push(x + dx);
        flat.push(y + dy);
    }
    flat
}

// --------------------------------------------------------------------------
// Utterance construction
// --------------------------------------------------------------------------

struct NoiseLevels {
    embedding: f64,
    keypoint: f64,
    waveform: f64,
}

#[allow(clippy::too_many_arguments)]
fn build_utterance(
    cfg: &SynthConfig,
    spk: &SpeakerParams,
    traj: &Trajectory,
    n_v: usize,
    time_of: &dyn Fn(f64) -> f64,
    mut noise: Option<(&mut ChaCha8Rng, NoiseLevels)>,
    breath_rng: &mut ChaCha8Rng,
    speaker_id: &str,
    utterance_id: &str,
) -> Result<(UtteranceFeatures, AudioClip)> {
    use std::f64::consts::TAU;
    let sr = cfg.sample_rate as f64;
    let hop = cfg.sample_rate as usize / 200;
    let len = n_v * FRAMES_PER_FACIAL * hop + 4 * hop;
    let std_normal = Normal::new(0.0, 1.0).expect("valid std dev");

    // Waveform: harmonic source with shared energy/pitch articulation.
    let mut samples = Vec::with_capacity(len);
    let mut phase = 0.0f64;
    for n in 0..len {
        let u = (n as f64 + 0.5) / len as f64;
        let t = time_of(u);
        let f0 = spk.f0_base * (1.0 + 0.12 * traj.f0_mod(t));
        phase += TAU * f0 / sr;
        let mut harm = 0.0;
        for h in 0..NUM_HARMONICS {
            harm += spk.gains[h] * ((h as f64 + 1.0) * phase + spk.harmonic_phases[h]).sin();
        }
        let a = traj.act(0, t);
        let mut s = traj.energy(t) * harm
            + (0.002 + 0.012 * a) * std_normal.sample(breath_rng);
        if let Some((rng, levels)) = noise.as_mut() {
            s += levels.waveform * std_normal.sample(*rng);
        }
        samples.push(s.clamp(-0.999, 0.999));
    }
    let clip = AudioClip::new(samples, cfg.sample_rate)?;
    let mel = extract_mel(&clip, TRAIN_WINDOW_MS, TRAIN_HOP_MS)?;
    if mel.num_frames() != FRAMES_PER_FACIAL * n_v {
        return Err(Error::invalid(format!(
            "internal rate tie failure: {} mel frames for {} facial frames",
            mel.num_frames(),
            n_v
        )));
    }

    // Facial streams at video rate.
    let mut keypoints = Array2::zeros((n_v, KEYPOINT_DIM));
    let mut embedding = Array2::zeros((n_v, EMBEDDING_DIM));
    let mut z = Array1::zeros(NUM_LATENT);
    for j in 0..n_v {
        let u = (j as f64 + 0.5) / n_v as f64;
        let t = time_of(u);
        let open = traj.openness(cfg.correlation_strength, t);
        let dx = 0.01 * traj.eval(3, t);
        let dy = 0.01 * traj.eval(4, t);
        let blink = 0.35 + 0.65 * traj.act(5, t);
        let gaze_x = traj.eval(6, t).tanh();
        let gaze_y = traj.eval(7, t).tanh();
        let kp = keypoints_at(&spk.geom, open, dx, dy, blink, gaze_x, gaze_y);
        for (d, v) in kp.into_iter().enumerate() {
            keypoints[[j, d]] = v;
        }
        for d in 0..NUM_LATENT {
            z[d] = traj.eval(d, t);
        }
        let proj = spk.w_emb.dot(&z) + &spk.b_emb;
        for d in 0..EMBEDDING_DIM {
            embedding[[j, d]] = proj[d].tanh();
        }
        if let Some((rng, levels)) = noise.as_mut() {
            for d in 0..KEYPOINT_DIM {
                keypoints[[j, d]] += levels.keypoint * std_normal.sample(*rng);
            }
            for d in 0..EMBEDDING_DIM {
                embedding[[j, d]] += levels.embedding * std_normal.sample(*rng);
            }
        }
    }
    let facial = fuse_facial(&embedding, &keypoints, cfg.fps)?;

    let features = UtteranceFeatures {
        mel,
        facial,
        speaker_id: speaker_id.to_string(),
        utterance_id: utterance_id.to_string(),
        emotion: "synthetic".to_string(),
    };
    Ok((features, clip))
}

/// Generates a parallel corpus of `n_utterances` source/target pairs.
pub fn synth_parallel_corpus(
    seed: u64,
    n_utterances: usize,
    cfg: &SynthConfig,
) -> Result<ParallelCorpus> {
    use std::f64::consts::TAU;
    cfg.validate()?;
    if n_utterances == 0 {
        return Err(Error::invalid("n_utterances must be at least 1"));
    }

    let src = speaker_params(seed, "src");
    let tgt = speaker_params(seed, "tgt");

    let mut source = Vec::with_capacity(n_utterances);
    let mut target = Vec::with_capacity(n_utterances);
    let mut clips = Vec::with_capacity(n_utterances);

    for utt in 0..n_utterances {
        let utt_id = format!("utt-{utt:04}");
        let mut traj_rng = derive_rng(seed, &[tag("traj"), utt as u64]);
        let traj = Trajectory::sample(&mut traj_rng);

        let mut dur_rng = derive_rng(seed, &[tag("duration"), utt as u64]);
        let duration = dur_rng.gen_range(cfg.min_duration_s..=cfg.max_duration_s);
        let n_v_src = ((duration * cfg.fps).round() as usize).max(1);
        let d_src = n_v_src as f64 / cfg.fps;

        let mut warp_rng = derive_rng(seed, &[tag("warp"), utt as u64]);
        let tempo = warp_rng.gen_range(cfg.min_tempo_factor..=cfg.max_tempo_factor);
        let n_v_tgt = ((n_v_src as f64 * tempo).round() as usize).max(1);
        let w = cfg.warp_strength * warp_rng.gen_range(0.5..1.0);
        let theta = warp_rng.gen_range(0.0..TAU);
        let src_time = move |u: f64| u * d_src;
        let tgt_time = move |u: f64| {
            let s = u + w / TAU * ((TAU * u + theta).sin() - theta.sin());
            s.clamp(0.0, 1.0) * d_src
        };

        let mut src_noise_rng = derive_rng(seed, &[tag("noise-src"), utt as u64]);
        let mut src_breath = derive_rng(seed, &[tag("breath"), utt as u64, 0]);
        let mut tgt_breath = derive_rng(seed, &[tag("breath"), utt as u64, 1]);

        let levels = NoiseLevels {
            embedding: 0.02 * cfg.source_noise,
            keypoint: 0.002 * cfg.source_noise,
            waveform: 0.003 * cfg.source_noise,
        };
        let (src_utt, src_clip) = build_utterance(
            cfg,
            &src,
            &traj,
            n_v_src,
            &src_time,
            Some((&mut src_noise_rng, levels)),
            &mut src_breath,
            "src",
            &utt_id,
        )?;
        let (tgt_utt, tgt_clip) = build_utterance(
            cfg,
            &tgt,
            &traj,
            n_v_tgt,
            &tgt_time,
            None,
            &mut tgt_breath,
            "tgt",
            &utt_id,
        )?;

        source.push(src_utt);
        target.push(tgt_utt);
        clips.push((src_clip, tgt_clip));
    }

    Ok(ParallelCorpus { source, target, clips })
}

// --------------------------------------------------------------------------
// Face rendering
// --------------------------------------------------------------------------

fn fill_ellipse(img: &mut Array3<f64>, cx: f64, cy: f64, rx: f64, ry: f64, color: [f64; 3]) {
    if rx <= 0.0 || ry <= 0.0 {
        return;
    }
    let size = img.dim().0 as isize;
    let y0 = ((cy - ry).floor() as isize).max(0);
    let y1 = ((cy + ry).ceil() as isize).min(size - 1);
    let x0 = ((cx - rx).floor() as isize).max(0);
    let x1 = ((cx + rx).ceil() as isize).min(size - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let nx = (x as f64 + 0.5 - cx) / rx;
            let ny = (y as f64 + 0.5 - cy) / ry;
            if nx * nx + ny * ny <= 1.0 {
                for c in 0..3 {
                    img[[y as usize, x as usize, c]] = color[c];
                }
            }
        }
    }
}

fn fill_capsule(
    img: &mut Array3<f64>,
    a: (f64, f64),
    b: (f64, f64),
    radius: f64,
    color: [f64; 3],
) {
    let size = img.dim().0 as isize;
    let y0 = ((a.1.min(b.1) - radius).floor() as isize).max(0);
    let y1 = ((a.1.max(b.1) + radius).ceil() as isize).min(size - 1);
    let x0 = ((a.0.min(b.0) - radius).floor() as isize).max(0);
    let x1 = ((a.0.max(b.0) + radius).ceil() as isize).min(size - 1);
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64 + 0.5 - a.0, y as f64 + 0.5 - a.1);
            let t = if len2 > 0.0 {
                ((px * vx + py * vy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (dx, dy) = (px - t * vx, py - t * vy);
            if dx * dx + dy * dy <= radius * radius {
                for c in 0..3 {
                    img[[y as usize, x as usize, c]] = color[c];
                }
            }
        }
    }
}

/// Scanline fill with the even-odd rule.
fn fill_polygon(img: &mut Array3<f64>, pts: &[(f64, f64)], color: [f64; 3]) {
    if pts.len() < 3 {
        return;
    }
    let size = img.dim().0 as isize;
    let y_min = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let y_max = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let y0 = (y_min.floor() as isize).max(0);
    let y1 = (y_max.ceil() as isize).min(size - 1);
    let mut xs = Vec::new();
    for y in y0..=y1 {
        let yc = y as f64 + 0.5;
        xs.clear();
        for i in 0..pts.len() {
            let p = pts[i];
            let q = pts[(i + 1) % pts.len()];
            if (p.1 <= yc && yc < q.1) || (q.1 <= yc && yc < p.1) {
                xs.push(p.0 + (yc - p.1) * (q.0 - p.0) / (q.1 - p.1));
            }
        }
        xs.sort_by(|a, b| a.partial_cmp(b).expect("finite coordinates"));
        for pair in xs.chunks_exact(2) {
            let x_start = (pair[0].ceil() as isize).max(0);
            let x_end = (pair[1].floor() as isize).min(size - 1);
            for x in x_start..=x_end {
                if (x as f64 + 0.5) >= pair[0] && (x as f64 + 0.5) <= pair[1] {
                    for c in 0..3 {
                        img[[y as usize, x as usize, c]] = color[c];
                    }
                }
            }
        }
    }
}

/// Rasterizes a schematic face from a 140-dim keypoint vector.
///
/// Coordinates are interpreted as fractions of the image size, x right and
/// y down. The renderer reads geometry exclusively from the keypoints, so
/// noisy or converted keypoints render to correspondingly distorted faces.
pub fn render_face(keypoints: &[f64], size: usize, style: &FaceStyle) -> Result<Array3<f64>> {
    if keypoints.len() != KEYPOINT_DIM {
        return Err(Error::shape(format!(
            "keypoint vector must have {KEYPOINT_DIM} dims, got {}",
            keypoints.len()
        )));
    }
    if size < 8 {
        return Err(Error::invalid("image size must be at least 8"));
    }
    if !keypoints.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("keypoints contain non-finite values"));
    }
    let s = size as f64;
    let p = |i: usize| -> (f64, f64) {
        (
            keypoints[2 * i].clamp(-0.5, 1.5) * s,
            keypoints[2 * i + 1].clamp(-0.5, 1.5) * s,
        )
    };

    let mut img = Array3::from_elem((size, size, 3), 0.0);
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                img[[y, x, c]] = style.bg[c];
            }
        }
    }

    // Face: ellipse fitted to the jaw arc.
    let (lx, ly) = p(0);
    let (rx_pt, ry_pt) = p(16);
    let (_, chin_y) = p(8);
    let cx = 0.5 * (lx + rx_pt.max(lx));
    let ear_y = 0.5 * (ly + ry_pt);
    let face_rx = (0.5 * (rx_pt - lx)).abs().max(1.0);
    let face_ry = (chin_y - ear_y).abs().max(1.0);
    fill_ellipse(&mut img, cx, ear_y, face_rx, face_ry, style.skin);

    // Eyebrows.
    for base in [17usize, 22] {
        for k in 0..4 {
            fill_capsule(&mut img, p(base + k), p(base + k + 1), 0.010 * s, style.brow);
        }
    }

    // Eyes and pupils.
    for (ring, pupil) in [(36usize, 68usize), (42, 69)] {
        let ring_pts: Vec<(f64, f64)> = (0..6).map(|k| p(ring + k)).collect();
        let ecx = ring_pts.iter().map(|q| q.0).sum::<f64>() / 6.0;
        let ecy = ring_pts.iter().map(|q| q.1).sum::<f64>() / 6.0;
        let erx = ring_pts
            .iter()
            .map(|q| (q.0 - ecx).abs())
            .fold(0.0, f64::max)
            .max(0.5);
        let ery = ring_pts
            .iter()
            .map(|q| (q.1 - ecy).abs())
            .fold(0.0, f64::max)
            .max(0.5);
        fill_ellipse(&mut img, ecx, ecy, erx, ery, style.eye);
        let (px, py) = p(pupil);
        fill_ellipse(&mut img, px, py, (0.45 * ery).max(0.8), (0.45 * ery).max(0.8), style.pupil);
    }

    // Nose bridge and base.
    for k in 27..30 {
        fill_capsule(&mut img, p(k), p(k + 1), 0.006 * s, style.nose);
    }
    for k in 31..35 {
        fill_capsule(&mut img, p(k), p(k + 1), 0.006 * s, style.nose);
    }

    // Lips: outer ring filled, inner ring as the mouth cavity.
    let outer: Vec<(f64, f64)> = (48..60).map(&p).collect();
    fill_polygon(&mut img, &outer, style.lip);
    let inner: Vec<(f64, f64)> = (60..68).map(&p).collect();
    fill_polygon(&mut img, &inner, style.mouth);

    Ok(img)
}
