//! DTW alignment of parallel utterances over tied audiovisual frames.
//!
//! A tied frame bundles eight consecutive mel frames with the one facial
//! frame they span. The frame distance sums the dimension-averaged L2
//! norms of the acoustic and facial differences, and the alignment is the
//! classic DTW recurrence over steps {(1,0),(0,1),(1,1)} with a fixed
//! backtrace tie-breaking order (diagonal, then source step, then target
//! step). Costs accumulate left to right along the path, so the reported
//! total is bit-identical to summing the frame distances along the
//! returned pairs.

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    make_training_windows, FacialFeatureSequence, MelSpectrogram, TrainingWindow,
    UtteranceFeatures, FRAMES_PER_FACIAL,
};

/// Eight consecutive mel frames plus the facial frame they correspond to.
#[derive(Debug, Clone, PartialEq)]
pub struct TiedFrame {
    acoustic_block: Array2<f64>,
    facial_vec: Array1<f64>,
}

impl TiedFrame {
    pub fn new(acoustic_block: Array2<f64>, facial_vec: Array1<f64>) -> Result<Self> {
        if acoustic_block.nrows() != FRAMES_PER_FACIAL {
            return Err(Error::shape(format!(
                "acoustic block must have {FRAMES_PER_FACIAL} rows, got {}",
                acoustic_block.nrows()
            )));
        }
        Ok(Self { acoustic_block, facial_vec })
    }

    pub fn acoustic_block(&self) -> &Array2<f64> {
        &self.acoustic_block
    }

    pub fn facial_vec(&self) -> &Array1<f64> {
        &self.facial_vec
    }
}

/// Splits a rate-tied utterance into tied frames.
pub fn tie_frames(u: &UtteranceFeatures) -> Result<Vec<TiedFrame>> {
    if !u.is_rate_tied() {
        return Err(Error::invalid(
            "utterance is not rate-tied; call tie_to_video_rate first",
        ));
    }
    let t_v = u.facial.num_frames();
    (0..t_v)
        .map(|j| {
            TiedFrame::new(
                u.mel
                    .frames()
                    .slice(s![FRAMES_PER_FACIAL * j..FRAMES_PER_FACIAL * (j + 1), ..])
                    .to_owned(),
                u.facial.fused().row(j).to_owned(),
            )
        })
        .collect()
}

/// Sum of the dimension-averaged L2 norms of the acoustic and facial
/// differences.
pub fn frame_distance(a: &TiedFrame, b: &TiedFrame) -> f64 {
    debug_assert_eq!(a.acoustic_block.dim(), b.acoustic_block.dim());
    debug_assert_eq!(a.facial_vec.len(), b.facial_vec.len());
    let mut acoustic_sq = 0.0;
    for (x, y) in a.acoustic_block.iter().zip(b.acoustic_block.iter()) {
        let d = x - y;
        acoustic_sq += d * d;
    }
    let mut facial_sq = 0.0;
    for (x, y) in a.facial_vec.iter().zip(b.facial_vec.iter()) {
        let d = x - y;
        facial_sq += d * d;
    }
    acoustic_sq.sqrt() / a.acoustic_block.len() as f64
        + facial_sq.sqrt() / a.facial_vec.len() as f64
}

/// A monotone warping path over tied-frame indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPath {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl AlignmentPath {
    /// Checks the structural invariants against the given sequence lengths.
    pub fn validate(&self, src_len: usize, tgt_len: usize) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::invalid("alignment path is empty"));
        }
        if self.pairs[0] != (0, 0) {
            return Err(Error::invalid("alignment path must start at (0, 0)"));
        }
        let last = *self.pairs.last().expect("non-empty");
        if last != (src_len - 1, tgt_len - 1) {
            return Err(Error::invalid(format!(
                "alignment path must end at ({}, {}), ends at {:?}",
                src_len - 1,
                tgt_len - 1,
                last
            )));
        }
        for w in self.pairs.windows(2) {
            let (di, dj) = (w[1].0 as i64 - w[0].0 as i64, w[1].1 as i64 - w[0].1 as i64);
            if !matches!((di, dj), (1, 0) | (0, 1) | (1, 1)) {
                return Err(Error::invalid(format!(
                    "invalid step {:?} -> {:?}",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }
}

/// Globally cost-minimal monotone alignment of two tied-frame sequences.
pub fn dtw_align(src: &[TiedFrame], tgt: &[TiedFrame]) -> Result<AlignmentPath> {
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::invalid("cannot align empty sequences"));
    }
    let (n, m) = (src.len(), tgt.len());
    let mut dist = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            dist[[i, j]] = frame_distance(&src[i], &tgt[j]);
        }
    }

    // Backpointers: 0 = start, 1 = diagonal, 2 = source step, 3 = target step.
    let mut cost = Array2::from_elem((n, m), f64::INFINITY);
    let mut back = Array2::from_elem((n, m), 0u8);
    cost[[0, 0]] = dist[[0, 0]];
    for i in 0..n {
        for j in 0..m {
            if i == 0 && j == 0 {
                continue;
            }
            // Candidates in tie-break preference order.
            let mut best = f64::INFINITY;
            let mut step = 0u8;
            if i > 0 && j > 0 && cost[[i - 1, j - 1]] < best {
                best = cost[[i - 1, j - 1]];
                step = 1;
            }
            if i > 0 && cost[[i - 1, j]] < best {
                best = cost[[i - 1, j]];
                step = 2;
            }
            if j > 0 && cost[[i, j - 1]] < best {
                best = cost[[i, j - 1]];
                step = 3;
            }
            cost[[i, j]] = best + dist[[i, j]];
            back[[i, j]] = step;
        }
    }

    let mut pairs = Vec::new();
    let (mut i, mut j) = (n - 1, m - 1);
    loop {
        pairs.push((i, j));
        match back[[i, j]] {
            0 => break,
            1 => {
                i -= 1;
                j -= 1;
            }
            2 => i -= 1,
            3 => j -= 1,
            _ => unreachable!(),
        }
    }
    pairs.reverse();

    // Accumulate left to right along the path; this matches the DP value
    // bit for bit because the recurrence extends exactly these prefix sums.
    let mut total_cost = 0.0;
    for &(i, j) in &pairs {
        total_cost += dist[[i, j]];
    }
    Ok(AlignmentPath { pairs, total_cost })
}

/// An aligned, equal-length pair of utterances.
#[derive(Debug, Clone)]
pub struct UtterancePair {
    pub source: UtteranceFeatures,
    pub target: UtteranceFeatures,
}

/// Expands both utterances along the path, duplicating tied frames where
/// the path is non-diagonal.
pub fn apply_alignment(
    path: &AlignmentPath,
    src: &UtteranceFeatures,
    tgt: &UtteranceFeatures,
) -> Result<UtterancePair> {
    if !src.is_rate_tied() || !tgt.is_rate_tied() {
        return Err(Error::invalid("apply_alignment requires rate-tied inputs"));
    }
    let src_len = src.facial.num_frames();
    let tgt_len = tgt.facial.num_frames();
    path.validate(src_len, tgt_len)?;

    let expand = |u: &UtteranceFeatures, idx: &dyn Fn(usize) -> usize| -> Result<UtteranceFeatures> {
        let l = path.pairs.len();
        let mel_dim = u.mel.frames().ncols();
        let fac_dim = u.facial.fused().ncols();
        let mut mel = Array2::zeros((FRAMES_PER_FACIAL * l, mel_dim));
        let mut fused = Array2::zeros((l, fac_dim));
        for (k, &pair) in path.pairs.iter().enumerate() {
            let _ = pair;
            let t = idx(k);
            mel.slice_mut(s![FRAMES_PER_FACIAL * k..FRAMES_PER_FACIAL * (k + 1), ..])
                .assign(&u.mel.frames().slice(s![
                    FRAMES_PER_FACIAL * t..FRAMES_PER_FACIAL * (t + 1),
                    ..
                ]));
            fused.row_mut(k).assign(&u.facial.fused().row(t));
        }
        Ok(UtteranceFeatures {
            mel: MelSpectrogram::new(mel, u.mel.window_ms(), u.mel.hop_ms())?,
            facial: FacialFeatureSequence::from_fused(fused, u.facial.fps())?,
            speaker_id: u.speaker_id.clone(),
            utterance_id: u.utterance_id.clone(),
            emotion: u.emotion.clone(),
        })
    };

    let pairs = path.pairs.clone();
    let source = expand(src, &|k| pairs[k].0)?;
    let target = expand(tgt, &|k| pairs[k].1)?;
    Ok(UtterancePair { source, target })
}

/// Cuts an aligned pair into parallel two-second training windows.
///
/// Both sides of an aligned pair have the same tied length, so window
/// `i` of the source corresponds frame-for-frame to window `i` of the
/// target.
pub fn paired_windows(pair: &UtterancePair) -> Vec<(TrainingWindow, TrainingWindow)> {
    let src = make_training_windows(&pair.source);
    let tgt = make_training_windows(&pair.target);
    src.into_iter().zip(tgt).collect()
}
