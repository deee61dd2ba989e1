//! Audiovisual feature types, the 8:1 rate tie, and training windows.
//!
//! # Data model
//!
//! An utterance carries an 80-band mel spectrogram at acoustic rate and a
//! facial feature sequence at video rate. Each facial frame fuses a
//! 4096-dim appearance embedding with 140 keypoint coordinates (70 points,
//! x/y interleaved) into a 4236-dim vector. At 25 fps video and a 5 ms mel
//! hop, one facial frame spans exactly eight mel frames.
//!
//! # Container format
//!
//! One array per file: magic `AVF1`, a little-endian u32 header length, a
//! JSON header with dtype and shape, then the row-major array as 32-bit
//! little-endian floats. A `.json` sidecar carries identity and rate
//! metadata. Saving quantizes to 32-bit floats; loading is exact.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MEL_DIM: usize = 80;
pub const EMBEDDING_DIM: usize = 4096;
pub const KEYPOINT_DIM: usize = 140;
pub const FACIAL_DIM: usize = EMBEDDING_DIM + KEYPOINT_DIM;
pub const NUM_KEYPOINTS: usize = 70;
/// Mel frames spanned by one facial frame (5 ms hop, 25 fps).
pub const FRAMES_PER_FACIAL: usize = 8;
/// Mel frames in one training window (two seconds at a 5 ms hop).
pub const WINDOW_MEL_FRAMES: usize = 400;
/// Facial frames in one training window.
pub const WINDOW_FACIAL_FRAMES: usize = 50;

/// Keypoint indices designated as lip points, inclusive.
pub const LIP_POINT_FIRST: usize = 48;
pub const LIP_POINT_LAST: usize = 67;

/// Column range of the lip coordinates within the 140-dim keypoint block.
pub fn lip_dims_in_keypoints() -> std::ops::Range<usize> {
    2 * LIP_POINT_FIRST..2 * (LIP_POINT_LAST + 1)
}

/// Column range of the lip coordinates within the fused 4236-dim vector.
pub fn lip_dims_in_fused() -> std::ops::Range<usize> {
    let r = lip_dims_in_keypoints();
    EMBEDDING_DIM + r.start..EMBEDDING_DIM + r.end
}

fn check_finite(name: &str, m: &ArrayView2<f64>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} contains non-finite values")))
    }
}

/// An 80-band log-mel spectrogram with its framing settings.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    frames: Array2<f64>,
    window_ms: f64,
    hop_ms: f64,
}

impl MelSpectrogram {
    pub fn new(frames: Array2<f64>, window_ms: f64, hop_ms: f64) -> Result<Self> {
        if frames.ncols() != MEL_DIM {
            return Err(Error::shape(format!(
                "mel frames must have {MEL_DIM} bands, got {}",
                frames.ncols()
            )));
        }
        check_finite("mel", &frames.view())?;
        if !(hop_ms > 0.0) || window_ms < hop_ms {
            return Err(Error::invalid("need window_ms >= hop_ms > 0"));
        }
        Ok(Self { frames, window_ms, hop_ms })
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    pub fn window_ms(&self) -> f64 {
        self.window_ms
    }

    pub fn hop_ms(&self) -> f64 {
        self.hop_ms
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    /// Keeps only the first `n` frames.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            frames: self.frames.slice(s![..n, ..]).to_owned(),
            window_ms: self.window_ms,
            hop_ms: self.hop_ms,
        }
    }
}

/// A video-rate sequence of fused appearance + keypoint features.
#[derive(Debug, Clone, PartialEq)]
pub struct FacialFeatureSequence {
    fused: Array2<f64>,
    fps: f64,
}

impl FacialFeatureSequence {
    /// Builds the sequence from an already-fused matrix.
    pub fn from_fused(fused: Array2<f64>, fps: f64) -> Result<Self> {
        if fused.ncols() != FACIAL_DIM {
            return Err(Error::shape(format!(
                "fused facial features must have width {FACIAL_DIM}, got {}",
                fused.ncols()
            )));
        }
        check_finite("facial", &fused.view())?;
        if !(fps > 0.0) {
            return Err(Error::invalid("fps must be positive"));
        }
        Ok(Self { fused, fps })
    }

    pub fn fused(&self) -> &Array2<f64> {
        &self.fused
    }

    /// Appearance-embedding columns of the fused matrix.
    pub fn embedding(&self) -> ArrayView2<'_, f64> {
        self.fused.slice(s![.., ..EMBEDDING_DIM])
    }

    /// Keypoint columns of the fused matrix.
    pub fn keypoints(&self) -> ArrayView2<'_, f64> {
        self.fused.slice(s![.., EMBEDDING_DIM..])
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn num_frames(&self) -> usize {
        self.fused.nrows()
    }

    pub fn truncated(&self, n: usize) -> Self {
        Self {
            fused: self.fused.slice(s![..n, ..]).to_owned(),
            fps: self.fps,
        }
    }
}

/// Fuses appearance and keypoint streams, embedding columns first.
pub fn fuse_facial(
    embedding: &Array2<f64>,
    keypoints: &Array2<f64>,
    fps: f64,
) -> Result<FacialFeatureSequence> {
    if embedding.nrows() != keypoints.nrows() {
        return Err(Error::shape(format!(
            "embedding has {} frames but keypoints has {}",
            embedding.nrows(),
            keypoints.nrows()
        )));
    }
    if embedding.ncols() != EMBEDDING_DIM {
        return Err(Error::shape(format!(
            "embedding width must be {EMBEDDING_DIM}, got {}",
            embedding.ncols()
        )));
    }
    if keypoints.ncols() != KEYPOINT_DIM {
        return Err(Error::shape(format!(
            "keypoints width must be {KEYPOINT_DIM}, got {}",
            keypoints.ncols()
        )));
    }
    let t = embedding.nrows();
    let mut fused = Array2::zeros((t, FACIAL_DIM));
    fused.slice_mut(s![.., ..EMBEDDING_DIM]).assign(embedding);
    fused.slice_mut(s![.., EMBEDDING_DIM..]).assign(keypoints);
    FacialFeatureSequence::from_fused(fused, fps)
}

/// A full utterance: mel at acoustic rate, facial at video rate.
#[derive(Debug, Clone)]
pub struct UtteranceFeatures {
    pub mel: MelSpectrogram,
    pub facial: FacialFeatureSequence,
    pub speaker_id: String,
    pub utterance_id: String,
    pub emotion: String,
}

impl UtteranceFeatures {
    pub fn is_rate_tied(&self) -> bool {
        self.mel.num_frames() == FRAMES_PER_FACIAL * self.facial.num_frames()
            && self.facial.num_frames() > 0
    }
}

/// End-trims the longer stream so that T_a = 8 * T_v exactly.
pub fn tie_to_video_rate(u: &UtteranceFeatures) -> Result<UtteranceFeatures> {
    let frames_per_facial =
        ((1000.0 / u.facial.fps()) / u.mel.hop_ms()).round() as usize;
    if frames_per_facial != FRAMES_PER_FACIAL {
        return Err(Error::invalid(format!(
            "rate tie expects {FRAMES_PER_FACIAL} mel frames per facial frame, \
             got {frames_per_facial} (fps {}, hop {} ms)",
            u.facial.fps(),
            u.mel.hop_ms()
        )));
    }
    let t_v = u
        .facial
        .num_frames()
        .min(u.mel.num_frames() / FRAMES_PER_FACIAL);
    if t_v == 0 {
        return Err(Error::invalid(
            "cannot form one tied group: a stream is empty after trimming",
        ));
    }
    Ok(UtteranceFeatures {
        mel: u.mel.truncated(FRAMES_PER_FACIAL * t_v),
        facial: u.facial.truncated(t_v),
        speaker_id: u.speaker_id.clone(),
        utterance_id: u.utterance_id.clone(),
        emotion: u.emotion.clone(),
    })
}

/// One two-second training window.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow {
    pub mel: Array2<f64>,
    pub facial: Array2<f64>,
}

/// Cuts a rate-tied utterance into non-overlapping two-second windows,
/// dropping a final partial window.
pub fn make_training_windows(u: &UtteranceFeatures) -> Vec<TrainingWindow> {
    let n = (u.mel.num_frames() / WINDOW_MEL_FRAMES)
        .min(u.facial.num_frames() / WINDOW_FACIAL_FRAMES);
    (0..n)
        .map(|w| TrainingWindow {
            mel: u
                .mel
                .frames()
                .slice(s![w * WINDOW_MEL_FRAMES..(w + 1) * WINDOW_MEL_FRAMES, ..])
                .to_owned(),
            facial: u
                .facial
                .fused()
                .slice(s![
                    w * WINDOW_FACIAL_FRAMES..(w + 1) * WINDOW_FACIAL_FRAMES,
                    ..
                ])
                .to_owned(),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Array container I/O
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"AVF1";

#[derive(Serialize, Deserialize)]
struct ContainerHeader {
    dtype: String,
    shape: Vec<usize>,
}

/// Identity and rate metadata stored next to each feature array.
#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
pub struct FeatureSidecar {
    pub speaker_id: String,
    pub utterance_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hop_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window_ms: Option<f64>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Writes a 2-D array as 32-bit little-endian floats.
pub fn write_array(path: &Path, array: &Array2<f64>) -> Result<()> {
    let header = serde_json::to_vec(&ContainerHeader {
        dtype: "f32".to_string(),
        shape: vec![array.nrows(), array.ncols()],
    })?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&(header.len() as u32).to_le_bytes())?;
    file.write_all(&header)?;
    for v in array.iter() {
        file.write_all(&(*v as f32).to_le_bytes())?;
    }
    file.flush()?;
    Ok(())
}

/// Reads a 2-D array written by [`write_array`].
pub fn read_array(path: &Path) -> Result<Array2<f64>> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|_| format_err(path, "file too short for magic"))?;
    if &magic != MAGIC {
        return Err(format_err(path, "bad magic, not a feature container"));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)
        .map_err(|_| format_err(path, "truncated header length"))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| format_err(path, "truncated header"))?;
    let header: ContainerHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| format_err(path, format!("bad header JSON: {e}")))?;
    if header.dtype != "f32" {
        return Err(format_err(path, format!("unsupported dtype {}", header.dtype)));
    }
    if header.shape.len() != 2 {
        return Err(format_err(path, "expected a 2-D shape"));
    }
    let (rows, cols) = (header.shape[0], header.shape[1]);
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| format_err(path, "shape overflow"))?;
    let mut data = vec![0u8; n * 4];
    file.read_exact(&mut data)
        .map_err(|_| format_err(path, "truncated array data"))?;
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing)? != 0 {
        return Err(format_err(path, "trailing bytes after array data"));
    }
    let values: Vec<f64> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| format_err(path, format!("shape mismatch: {e}")))
}

fn write_sidecar(path: &Path, sidecar: &FeatureSidecar) -> Result<()> {
    let json = serde_json::to_vec_pretty(sidecar)?;
    std::fs::write(sidecar_path(path), json)?;
    Ok(())
}

fn read_sidecar(path: &Path) -> Result<FeatureSidecar> {
    let sp = sidecar_path(path);
    let bytes = std::fs::read(&sp)?;
    serde_json::from_slice(&bytes).map_err(|e| format_err(&sp, format!("bad sidecar JSON: {e}")))
}

/// Saves a facial feature sequence plus its sidecar.
pub fn save_facial_features(
    path: &Path,
    facial: &FacialFeatureSequence,
    speaker_id: &str,
    utterance_id: &str,
) -> Result<()> {
    write_array(path, facial.fused())?;
    write_sidecar(
        path,
        &FeatureSidecar {
            speaker_id: speaker_id.to_string(),
            utterance_id: utterance_id.to_string(),
            fps: Some(facial.fps()),
            hop_ms: None,
            window_ms: None,
        },
    )
}

/// Loads a facial feature sequence saved by [`save_facial_features`].
pub fn load_facial_features(path: &Path) -> Result<(FacialFeatureSequence, FeatureSidecar)> {
    let fused = read_array(path)?;
    if fused.ncols() != FACIAL_DIM {
        return Err(format_err(
            path,
            format!("facial width must be {FACIAL_DIM}, got {}", fused.ncols()),
        ));
    }
    let sidecar = read_sidecar(path)?;
    let fps = sidecar.fps.ok_or_else(|| format_err(path, "sidecar missing fps"))?;
    Ok((FacialFeatureSequence::from_fused(fused, fps)?, sidecar))
}

/// Saves a mel spectrogram plus its sidecar.
pub fn save_mel(
    path: &Path,
    mel: &MelSpectrogram,
    speaker_id: &str,
    utterance_id: &str,
) -> Result<()> {
    write_array(path, mel.frames())?;
    write_sidecar(
        path,
        &FeatureSidecar {
            speaker_id: speaker_id.to_string(),
            utterance_id: utterance_id.to_string(),
            fps: None,
            hop_ms: Some(mel.hop_ms()),
            window_ms: Some(mel.window_ms()),
        },
    )
}

/// Loads a mel spectrogram saved by [`save_mel`].
pub fn load_mel(path: &Path) -> Result<(MelSpectrogram, FeatureSidecar)> {
    let frames = read_array(path)?;
    let sidecar = read_sidecar(path)?;
    let hop_ms = sidecar
        .hop_ms
        .ok_or_else(|| format_err(path, "sidecar missing hop_ms"))?;
    let window_ms = sidecar.window_ms.unwrap_or(hop_ms);
    Ok((MelSpectrogram::new(frames, window_ms, hop_ms)?, sidecar))
}
