//! Audio-lip synchrony evaluation.
//!
//! Re-extracts a log-mel spectrum from a waveform on a 40 ms window / 40 ms
//! hop so that the mel frames share a clock with 25 fps facial keypoints,
//! selects the 20 designated lip points (40 coordinate dims), and measures
//! the first canonical correlation between the two streams. Per-utterance
//! coefficients are collected into a [`CcaReport`] that can be serialized as
//! CSV, a JSON summary, and a histogram CSV, and condition pairs are compared
//! with an exact one-sided rank-sum test.
//!
//! The keypoint argument of [`eval_features`] is a plain matrix, so keypoints
//! may come either from a converted facial feature block or from an external
//! detector.

use nalgebra::DMatrix;
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::features::{lip_dims_in_keypoints, KEYPOINT_DIM};
use crate::mel::extract_mel;

/// Analysis window for the re-extracted mel spectrum, in milliseconds.
pub const EVAL_WINDOW_MS: f64 = 40.0;
/// Hop for the re-extracted mel spectrum, in milliseconds.
pub const EVAL_HOP_MS: f64 = 40.0;
/// Number of principal components the mel stream is reduced to when an
/// utterance is too short to support a full-rank covariance estimate.
pub const MEL_PCA_COMPONENTS: usize = 20;
/// Minimum number of utterances per condition for a rank-sum comparison.
pub const MIN_UTTERANCES_PER_CONDITION: usize = 10;
/// Bin width of the histogram CSV.
pub const HISTOGRAM_BIN_WIDTH: f64 = 0.05;

// ---------------------------------------------------------------------------
// Conditions and reports
// ---------------------------------------------------------------------------

/// Which system produced the utterances being scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Proposed,
    Baseline,
    Target,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Proposed, Condition::Baseline, Condition::Target];

    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::Proposed => "proposed",
            Condition::Baseline => "baseline",
            Condition::Target => "target",
        }
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(Condition::Proposed),
            "baseline" => Ok(Condition::Baseline),
            "target" => Ok(Condition::Target),
            other => Err(Error::invalid(format!(
                "unknown condition '{other}', expected proposed, baseline, or target"
            ))),
        }
    }
}

/// One utterance's synchrony score under one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceCca {
    pub utterance_id: String,
    pub condition: Condition,
    pub r: f64,
}

/// Distribution statistics of r for one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: Condition,
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub min: f64,
    pub max: f64,
}

/// Per-utterance canonical correlations across conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct CcaReport {
    per_utterance: Vec<UtteranceCca>,
}

impl CcaReport {
    pub fn new(per_utterance: Vec<UtteranceCca>) -> Result<Self> {
        for e in &per_utterance {
            if !e.r.is_finite() || !(0.0..=1.0).contains(&e.r) {
                return Err(Error::invalid(format!(
                    "r for utterance '{}' must be in [0, 1], got {}",
                    e.utterance_id, e.r
                )));
            }
            if e.utterance_id.is_empty() {
                return Err(Error::invalid("utterance_id must not be empty"));
            }
            if e.utterance_id.contains(',') || e.utterance_id.contains('\n') {
                return Err(Error::invalid(format!(
                    "utterance_id '{}' must not contain commas or newlines",
                    e.utterance_id
                )));
            }
        }
        Ok(Self { per_utterance })
    }

    pub fn entries(&self) -> &[UtteranceCca] {
        &self.per_utterance
    }

    /// r values of one condition, in insertion order.
    pub fn rs_for(&self, condition: Condition) -> Vec<f64> {
        self.per_utterance
            .iter()
            .filter(|e| e.condition == condition)
            .map(|e| e.r)
            .collect()
    }

    /// Summary statistics for every condition present, in the fixed order
    /// proposed, baseline, target.
    pub fn summaries(&self) -> Vec<ConditionSummary> {
        Condition::ALL
            .iter()
            .filter_map(|&c| {
                let mut rs = self.rs_for(c);
                if rs.is_empty() {
                    return None;
                }
                rs.sort_by(f64::total_cmp);
                let n = rs.len();
                Some(ConditionSummary {
                    condition: c,
                    n,
                    mean: rs.iter().sum::<f64>() / n as f64,
                    median: quantile_sorted(&rs, 0.5),
                    q25: quantile_sorted(&rs, 0.25),
                    q75: quantile_sorted(&rs, 0.75),
                    min: rs[0],
                    max: rs[n - 1],
                })
            })
            .collect()
    }

    /// CSV with one row per utterance: `utterance_id,condition,r`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("utterance_id,condition,r\n");
        for e in &self.per_utterance {
            out.push_str(&format!("{},{},{}\n", e.utterance_id, e.condition, e.r));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some("utterance_id,condition,r") => {}
            other => {
                return Err(Error::invalid(format!(
                    "expected header 'utterance_id,condition,r', got {other:?}"
                )))
            }
        }
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let (id, cond, r) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some(id), Some(c), Some(r), None) => (id, c, r),
                _ => {
                    return Err(Error::invalid(format!(
                        "row {} must have exactly 3 comma-separated fields: '{line}'",
                        i + 2
                    )))
                }
            };
            let r: f64 = r
                .parse()
                .map_err(|_| Error::invalid(format!("row {}: bad r value '{r}'", i + 2)))?;
            entries.push(UtteranceCca {
                utterance_id: id.to_string(),
                condition: cond.parse()?,
                r,
            });
        }
        Self::new(entries)
    }

    /// JSON array of per-condition summaries.
    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summaries())?)
    }

    /// Histogram CSV over [0, 1] with fixed-width bins. Columns are
    /// `bin_lo,bin_hi,proposed,baseline,target`; r = 1 falls in the last bin.
    pub fn histogram_csv(&self) -> String {
        let n_bins = (1.0 / HISTOGRAM_BIN_WIDTH).round() as usize;
        let mut counts = [vec![0usize; n_bins], vec![0; n_bins], vec![0; n_bins]];
        for e in &self.per_utterance {
            let bin = ((e.r / HISTOGRAM_BIN_WIDTH).floor() as usize).min(n_bins - 1);
            let col = Condition::ALL.iter().position(|&c| c == e.condition).unwrap();
            counts[col][bin] += 1;
        }
        let mut out = String::from("bin_lo,bin_hi,proposed,baseline,target\n");
        for b in 0..n_bins {
            out.push_str(&format!(
                "{:.2},{:.2},{},{},{}\n",
                b as f64 * HISTOGRAM_BIN_WIDTH,
                (b + 1) as f64 * HISTOGRAM_BIN_WIDTH,
                counts[0][b],
                counts[1][b],
                counts[2][b],
            ));
        }
        out
    }
}

/// Quantile by linear interpolation at position q * (n - 1); input sorted.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

// ---------------------------------------------------------------------------
// Feature re-extraction
// ---------------------------------------------------------------------------

/// Extracts the two streams CCA is run on: an 80-band log-mel spectrum on a
/// 40 ms window and 40 ms hop, and the 40 lip coordinate dims of the
/// keypoints. Both are trimmed to their common frame count.
///
/// `keypoints` must be sampled at 25 fps (one row per 40 ms) so the streams
/// share a clock.
pub fn eval_features(
    waveform: &AudioClip,
    keypoints: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if waveform.is_empty() {
        return Err(Error::invalid("waveform is empty"));
    }
    let (t_v, d) = keypoints.dim();
    if t_v == 0 {
        return Err(Error::invalid("keypoint sequence is empty"));
    }
    if d != KEYPOINT_DIM {
        return Err(Error::shape(format!(
            "keypoints must have {KEYPOINT_DIM} columns, got {d}"
        )));
    }
    if !keypoints.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("keypoints contain non-finite values"));
    }
    let mel = extract_mel(waveform, EVAL_WINDOW_MS, EVAL_HOP_MS)?;
    let t = mel.num_frames().min(t_v);
    let mel_t = mel.frames().slice(s![..t, ..]).to_owned();
    let lips = keypoints
        .slice(s![..t, lip_dims_in_keypoints()])
        .to_owned();
    Ok((mel_t, lips))
}

// ---------------------------------------------------------------------------
// Canonical correlation
// ---------------------------------------------------------------------------

/// Subtracts each column's mean.
fn center_columns(x: &Array2<f64>) -> Array2<f64> {
    let means = x.mean_axis(ndarray::Axis(0)).unwrap();
    x - &means.insert_axis(ndarray::Axis(0))
}

/// Errors when every column of `centered` is constant. `scale` is the mean
/// squared magnitude of the original data, so the threshold tracks the
/// data's units. Individual constant columns are allowed; the whitening
/// regularization absorbs them.
fn reject_zero_variance(name: &str, centered: &Array2<f64>, scale: f64) -> Result<()> {
    let t = centered.nrows() as f64;
    let max_var = centered
        .columns()
        .into_iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>() / (t - 1.0))
        .fold(0.0f64, f64::max);
    if max_var <= 1e-24 * scale + 1e-300 {
        return Err(Error::Numerical(format!(
            "zero-variance input: every column of {name} is constant"
        )));
    }
    Ok(())
}

fn to_na(x: &Array2<f64>) -> DMatrix<f64> {
    let x = x.as_standard_layout();
    DMatrix::from_row_slice(x.nrows(), x.ncols(), x.as_slice().unwrap())
}

/// Inverse square root of a symmetric PSD matrix via its eigendecomposition.
///
/// A ridge of 1e-6 times the mean diagonal is added to the spectrum only
/// when the smallest eigenvalue falls below it, so well-conditioned inputs
/// are whitened exactly and rank-deficient ones stay bounded.
fn inv_sqrt_spd(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mean_diag = c.diagonal().mean();
    if !mean_diag.is_finite() || mean_diag <= 0.0 {
        return Err(Error::Numerical(
            "zero-variance input: covariance has a non-positive diagonal".into(),
        ));
    }
    let eps = 1e-6 * mean_diag;
    let se = c.clone().symmetric_eigen();
    let min_eig = se.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let shift = if min_eig < eps { eps } else { 0.0 };
    let floor = eps * 1e-9;
    let mut scaled = se.eigenvectors.clone();
    for j in 0..scaled.ncols() {
        let lambda = (se.eigenvalues[j] + shift).max(floor);
        let s = 1.0 / lambda.sqrt();
        scaled.column_mut(j).scale_mut(s);
    }
    Ok(&scaled * se.eigenvectors.transpose())
}

/// Largest canonical correlation between the column spaces of X and Y.
///
/// Columns are centered internally; the whitened cross-covariance's top
/// singular value is returned, clamped to [0, 1].
pub fn first_canonical_correlation(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    let (t, p) = x.dim();
    let (t_y, q) = y.dim();
    if t != t_y {
        return Err(Error::shape(format!(
            "X and Y must have the same number of rows, got {t} and {t_y}"
        )));
    }
    if p == 0 || q == 0 {
        return Err(Error::invalid("X and Y must each have at least one column"));
    }
    if t <= p.max(q) + 1 {
        return Err(Error::invalid(format!(
            "insufficient frames: need T > max(p, q) + 1, got T={t} with p={p}, q={q}"
        )));
    }
    if !x.iter().all(|v| v.is_finite()) || !y.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("CCA inputs contain non-finite values"));
    }

    let scale_x = x.iter().map(|v| v * v).sum::<f64>() / (t * p) as f64;
    let scale_y = y.iter().map(|v| v * v).sum::<f64>() / (t * q) as f64;
    let xc = center_columns(x);
    let yc = center_columns(y);
    reject_zero_variance("X", &xc, scale_x)?;
    reject_zero_variance("Y", &yc, scale_y)?;

    let denom = (t - 1) as f64;
    let cxx = to_na(&(xc.t().dot(&xc) / denom));
    let cyy = to_na(&(yc.t().dot(&yc) / denom));
    let cxy = to_na(&(xc.t().dot(&yc) / denom));

    let wx = inv_sqrt_spd(&cxx)?;
    let wy = inv_sqrt_spd(&cyy)?;
    let m = &wx * &cxy * &wy;
    let r = m
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0f64, f64::max);
    if !r.is_finite() {
        return Err(Error::Numerical("canonical correlation is not finite".into()));
    }
    Ok(r.clamp(0.0, 1.0))
}

/// Projects centered data onto its top `k` principal components. When `k`
/// covers the full column count the centered data is returned unchanged.
pub fn pca_reduce(x: &Array2<f64>, k: usize) -> Result<Array2<f64>> {
    let (t, p) = x.dim();
    if t < 2 || p == 0 {
        return Err(Error::invalid(format!(
            "PCA needs at least 2 rows and 1 column, got {t}x{p}"
        )));
    }
    if k == 0 {
        return Err(Error::invalid("PCA component count must be at least 1"));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("PCA input contains non-finite values"));
    }
    let xc = center_columns(x);
    if k >= p {
        return Ok(xc);
    }
    let cov = to_na(&(xc.t().dot(&xc) / (t - 1) as f64));
    let se = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| se.eigenvalues[b].total_cmp(&se.eigenvalues[a]));

    let mut basis = Array2::zeros((p, k));
    for (j, &src) in order.iter().take(k).enumerate() {
        let col = se.eigenvectors.column(src);
        // Fix the sign so the component with the largest magnitude is
        // positive, making the projection deterministic across runs.
        let lead = col
            .iter()
            .cloned()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap();
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        for i in 0..p {
            basis[[i, j]] = sign * col[i];
        }
    }
    Ok(xc.dot(&basis))
}

/// Synchrony score for one utterance: re-extracts both streams, reduces the
/// mel stream to its top principal components when the utterance is too
/// short for a well-posed 80-dim covariance (fewer than 2 frames per mel
/// dim), and returns the first canonical correlation.
pub fn utterance_audio_lip_cca(waveform: &AudioClip, keypoints: &Array2<f64>) -> Result<f64> {
    let (mel, lips) = eval_features(waveform, keypoints)?;
    let (t, p) = mel.dim();
    let mel = if t < 2 * p + 2 {
        pca_reduce(&mel, MEL_PCA_COMPONENTS)?
    } else {
        mel
    };
    first_canonical_correlation(&mel, &lips)
}

// ---------------------------------------------------------------------------
// Condition comparison
// ---------------------------------------------------------------------------

/// Outcome of comparing two conditions' r distributions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionComparison {
    pub condition_a: Condition,
    pub condition_b: Condition,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    /// mean_a - mean_b.
    pub mean_difference: f64,
    /// Condition with the larger mean, or None on an exact tie.
    pub higher: Option<Condition>,
    /// One-sided rank-sum p-value for the alternative "a tends larger than b".
    pub p_value_a_greater: f64,
}

/// One-sided rank-sum p-value P(W_a >= observed) under exchangeability,
/// where W_a is the rank sum of `a` in the pooled midranked sample.
///
/// For pooled sizes up to 200 the permutation distribution is computed
/// exactly by dynamic programming over doubled midranks (integers even under
/// ties); larger samples use the normal approximation with tie-corrected
/// variance and continuity correction.
pub fn rank_sum_p_greater(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("rank-sum test needs non-empty samples"));
    }
    if !a.iter().chain(b).all(|v| v.is_finite()) {
        return Err(Error::invalid("rank-sum inputs contain non-finite values"));
    }
    let n = a.len();
    let total = n + b.len();
    let mut pooled: Vec<(f64, bool)> = a
        .iter()
        .map(|&v| (v, true))
        .chain(b.iter().map(|&v| (v, false)))
        .collect();
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));

    // Doubled midrank of each sorted position: first rank + last rank of the
    // tie group, an integer even when the midrank itself is x.5.
    let mut doubled = vec![0usize; total];
    let mut i = 0;
    while i < total {
        let mut j = i + 1;
        while j < total && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        for k in i..j {
            doubled[k] = (i + 1) + j;
        }
        i = j;
    }
    let w_obs: usize = pooled
        .iter()
        .zip(&doubled)
        .filter(|((_, in_a), _)| *in_a)
        .map(|(_, &d)| d)
        .sum();

    if total <= 200 {
        Ok(rank_sum_exact_tail(&doubled, n, w_obs))
    } else {
        Ok(rank_sum_normal_tail(&doubled, n, w_obs))
    }
}

/// Exact tail P(W >= w_obs) over all choices of `n` positions, by counting
/// subsets with each doubled-rank sum.
fn rank_sum_exact_tail(doubled: &[usize], n: usize, w_obs: usize) -> f64 {
    let s_max: usize = doubled.iter().sum();
    let mut dp = vec![vec![0.0f64; s_max + 1]; n + 1];
    dp[0][0] = 1.0;
    for (idx, &d) in doubled.iter().enumerate() {
        let k_max = (idx + 1).min(n);
        for k in (1..=k_max).rev() {
            for s in (d..=s_max).rev() {
                let add = dp[k - 1][s - d];
                if add != 0.0 {
                    dp[k][s] += add;
                }
            }
        }
    }
    let total: f64 = dp[n].iter().sum();
    let tail: f64 = dp[n][w_obs.min(s_max)..].iter().sum();
    (tail / total).clamp(0.0, 1.0)
}

/// Normal approximation to the same tail with tie-corrected variance and a
/// continuity correction of one doubled-rank unit.
fn rank_sum_normal_tail(doubled: &[usize], n: usize, w_obs: usize) -> f64 {
    let total = doubled.len();
    let m = total - n;
    let sum: f64 = doubled.iter().map(|&d| d as f64).sum();
    let mean = n as f64 * sum / total as f64;
    let mean_sq = sum / total as f64;
    let var_pop = doubled
        .iter()
        .map(|&d| {
            let c = d as f64 - mean_sq;
            c * c
        })
        .sum::<f64>()
        / total as f64;
    let var = n as f64 * m as f64 * var_pop / (total - 1) as f64;
    if var <= 0.0 {
        return 1.0;
    }
    let z = (w_obs as f64 - 1.0 - mean) / var.sqrt();
    0.5 * erfc_scalar(z / std::f64::consts::SQRT_2)
}

/// Complementary error function, Abramowitz-Stegun 7.1.26 style rational
/// approximation, absolute error below 1.5e-7.
fn erfc_scalar(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let tau = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587
                                        + t * (-0.82215223 + t * 0.17087277)))))))))
            .exp();
    if x >= 0.0 {
        tau
    } else {
        2.0 - tau
    }
}

/// Compares two conditions from a report: means, direction, and a one-sided
/// rank-sum p-value for "a tends larger than b".
pub fn compare_conditions(
    report: &CcaReport,
    a: Condition,
    b: Condition,
) -> Result<ConditionComparison> {
    if a == b {
        return Err(Error::invalid(format!(
            "cannot compare condition '{a}' with itself"
        )));
    }
    let rs_a = report.rs_for(a);
    let rs_b = report.rs_for(b);
    for (cond, rs) in [(a, &rs_a), (b, &rs_b)] {
        if rs.len() < MIN_UTTERANCES_PER_CONDITION {
            return Err(Error::invalid(format!(
                "condition '{cond}' has {} utterances, need at least {MIN_UTTERANCES_PER_CONDITION}",
                rs.len()
            )));
        }
    }
    let mean_a = rs_a.iter().sum::<f64>() / rs_a.len() as f64;
    let mean_b = rs_b.iter().sum::<f64>() / rs_b.len() as f64;
    let higher = if mean_a > mean_b {
        Some(a)
    } else if mean_b > mean_a {
        Some(b)
    } else {
        None
    };
    Ok(ConditionComparison {
        condition_a: a,
        condition_b: b,
        n_a: rs_a.len(),
        n_b: rs_b.len(),
        mean_a,
        mean_b,
        mean_difference: mean_a - mean_b,
        higher,
        p_value_a_greater: rank_sum_p_greater(&rs_a, &rs_b)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{LIP_POINT_FIRST, LIP_POINT_LAST};
    use crate::synth::{synth_parallel_corpus, SynthConfig};
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn uniform_matrix(t: usize, p: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((t, p), |_| rng.gen_range(-1.0..1.0))
    }

    fn sine_clip(duration_s: f64, sample_rate: u32) -> AudioClip {
        let n = (duration_s * sample_rate as f64).round() as usize;
        let samples: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / sample_rate as f64;
                0.5 * (2.0 * std::f64::consts::PI * 220.0 * t).sin()
            })
            .collect();
        AudioClip::new(samples, sample_rate).unwrap()
    }

    // ------------------------------------------------------------------
    // eval_features
    // ------------------------------------------------------------------

    #[test]
    fn two_second_clip_yields_fifty_shared_frames() {
        let clip = sine_clip(2.0, 16000);
        let mut r = rng(1);
        let kp = uniform_matrix(50, KEYPOINT_DIM, &mut r);
        let (mel, lips) = eval_features(&clip, &kp).unwrap();
        assert_eq!(mel.dim(), (50, 80));
        assert_eq!(lips.dim(), (50, 40));

        let kp_longer = uniform_matrix(51, KEYPOINT_DIM, &mut r);
        let (mel2, lips2) = eval_features(&clip, &kp_longer).unwrap();
        assert_eq!(mel2.dim(), (50, 80));
        assert_eq!(lips2.dim(), (50, 40));

        let longer = sine_clip(2.08, 16000);
        let (mel3, lips3) = eval_features(&longer, &kp).unwrap();
        assert_eq!(mel3.dim(), (50, 80));
        assert_eq!(lips3.dim(), (50, 40));
    }

    #[test]
    fn lip_selection_matches_designated_indices() {
        let clip = sine_clip(2.0, 16000);
        let mut kp = Array2::zeros((50, KEYPOINT_DIM));
        for t in 0..50 {
            for point in 0..KEYPOINT_DIM / 2 {
                kp[[t, 2 * point]] = point as f64;
                kp[[t, 2 * point + 1]] = point as f64 + 0.5;
            }
        }
        let (_, lips) = eval_features(&clip, &kp).unwrap();
        assert_eq!(lips.ncols(), 2 * (LIP_POINT_LAST - LIP_POINT_FIRST + 1));
        for t in 0..lips.nrows() {
            for (j, point) in (LIP_POINT_FIRST..=LIP_POINT_LAST).enumerate() {
                assert_eq!(lips[[t, 2 * j]], point as f64);
                assert_eq!(lips[[t, 2 * j + 1]], point as f64 + 0.5);
            }
        }
    }

    #[test]
    fn eval_features_rejects_bad_inputs() {
        let clip = sine_clip(2.0, 16000);
        let mut r = rng(2);

        let empty_kp = Array2::zeros((0, KEYPOINT_DIM));
        assert!(eval_features(&clip, &empty_kp).is_err());

        let wrong_width = uniform_matrix(50, KEYPOINT_DIM - 1, &mut r);
        assert!(eval_features(&clip, &wrong_width).is_err());

        let short = sine_clip(0.02, 16000);
        let kp = uniform_matrix(50, KEYPOINT_DIM, &mut r);
        assert!(eval_features(&short, &kp).is_err());

        let mut bad = uniform_matrix(50, KEYPOINT_DIM, &mut r);
        bad[[3, 7]] = f64::NAN;
        assert!(eval_features(&clip, &bad).is_err());
    }

    // ------------------------------------------------------------------
    // first_canonical_correlation oracles
    // ------------------------------------------------------------------

    #[test]
    fn linear_map_reaches_perfect_correlation() {
        let mut r = rng(3);
        let x = uniform_matrix(60, 5, &mut r);
        let mut a = Array2::from_shape_fn((5, 4), |_| r.gen_range(-1.0..1.0));
        for i in 0..4 {
            a[[i, i]] += 2.0;
        }
        let mut y = x.dot(&a);
        let cc = first_canonical_correlation(&x, &y).unwrap();
        assert!(cc >= 1.0 - 1e-8, "expected r = 1, got {cc}");

        for mut row in y.rows_mut() {
            row[0] += 3.5;
            row[2] -= 1.25;
        }
        let cc_offset = first_canonical_correlation(&x, &y).unwrap();
        assert!(cc_offset >= 1.0 - 1e-8, "offsets must not matter, got {cc_offset}");
    }

    #[test]
    fn hand_case_equals_absolute_pearson() {
        let x = Array2::from_shape_vec((3, 1), vec![1.0, 2.0, 4.0]).unwrap();
        let y = Array2::from_shape_vec((3, 1), vec![2.0, 1.0, 5.0]).unwrap();
        let mx = 7.0 / 3.0;
        let my = 8.0 / 3.0;
        let (mut sxy, mut sxx, mut syy) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..3 {
            let dx = x[[i, 0]] - mx;
            let dy = y[[i, 0]] - my;
            sxy += dx * dy;
            sxx += dx * dx;
            syy += dy * dy;
        }
        let pearson = sxy / (sxx * syy).sqrt();
        let cc = first_canonical_correlation(&x, &y).unwrap();
        assert!((cc - pearson.abs()).abs() < 1e-12, "cc {cc} vs |pearson| {}", pearson.abs());

        let y_neg = Array2::from_shape_vec((3, 1), vec![-2.0, -1.0, -5.0]).unwrap();
        let cc_neg = first_canonical_correlation(&x, &y_neg).unwrap();
        assert!((cc_neg - pearson.abs()).abs() < 1e-12);
    }

    /// Grid search over projection directions (p = q = 2 lets directions be
    /// parameterized by a single angle each) as an independent oracle.
    fn brute_force_top_correlation(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
        let t = x.nrows() as f64;
        let xc = center_columns(x);
        let yc = center_columns(y);
        let cxx = xc.t().dot(&xc) / (t - 1.0);
        let cyy = yc.t().dot(&yc) / (t - 1.0);
        let cxy = xc.t().dot(&yc) / (t - 1.0);
        let corr = |th: f64, ph: f64| {
            let a = [th.cos(), th.sin()];
            let b = [ph.cos(), ph.sin()];
            let num = a[0] * (cxy[[0, 0]] * b[0] + cxy[[0, 1]] * b[1])
                + a[1] * (cxy[[1, 0]] * b[0] + cxy[[1, 1]] * b[1]);
            let va = a[0] * a[0] * cxx[[0, 0]] + 2.0 * a[0] * a[1] * cxx[[0, 1]]
                + a[1] * a[1] * cxx[[1, 1]];
            let vb = b[0] * b[0] * cyy[[0, 0]] + 2.0 * b[0] * b[1] * cyy[[0, 1]]
                + b[1] * b[1] * cyy[[1, 1]];
            (num / (va * vb).sqrt()).abs()
        };
        let steps = 600;
        let coarse = std::f64::consts::PI / steps as f64;
        let mut best = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..steps {
            for j in 0..steps {
                let (th, ph) = (i as f64 * coarse, j as f64 * coarse);
                let c = corr(th, ph);
                if c > best.0 {
                    best = (c, th, ph);
                }
            }
        }
        let mut width = coarse;
        let (mut th0, mut ph0) = (best.1, best.2);
        for _ in 0..8 {
            for i in -10i32..=10 {
                for j in -10i32..=10 {
                    let th = th0 + i as f64 * width / 10.0;
                    let ph = ph0 + j as f64 * width / 10.0;
                    let c = corr(th, ph);
                    if c > best.0 {
                        best = (c, th, ph);
                    }
                }
            }
            th0 = best.1;
            ph0 = best.2;
            width /= 5.0;
        }
        best.0
    }

    #[test]
    fn brute_force_projection_search_agrees() {
        let mut r = rng(4);
        let x = uniform_matrix(1000, 2, &mut r);
        let y_indep = uniform_matrix(1000, 2, &mut r);
        let cc = first_canonical_correlation(&x, &y_indep).unwrap();
        let oracle = brute_force_top_correlation(&x, &y_indep);
        assert!(
            (cc - oracle).abs() < 1e-3,
            "independent case: cc {cc} vs oracle {oracle}"
        );

        let mut y_mixed = uniform_matrix(1000, 2, &mut r);
        for i in 0..1000 {
            y_mixed[[i, 0]] = x[[i, 0]] + 0.8 * y_mixed[[i, 0]];
        }
        let cc_m = first_canonical_correlation(&x, &y_mixed).unwrap();
        let oracle_m = brute_force_top_correlation(&x, &y_mixed);
        assert!(
            (cc_m - oracle_m).abs() < 1e-3,
            "correlated case: cc {cc_m} vs oracle {oracle_m}"
        );
        assert!(cc_m > 0.5, "mixed construction should correlate, got {cc_m}");
    }

    #[test]
    fn independent_data_sits_in_permutation_null_band() {
        let mut r = rng(5);
        let x = uniform_matrix(1000, 2, &mut r);
        let y = uniform_matrix(1000, 2, &mut r);
        let cc = first_canonical_correlation(&x, &y).unwrap();

        let mut nulls = Vec::new();
        for _ in 0..60 {
            let mut order: Vec<usize> = (0..1000).collect();
            for i in (1..order.len()).rev() {
                let j = r.gen_range(0..=i);
                order.swap(i, j);
            }
            let mut y_perm = Array2::zeros(y.dim());
            for (dst, &src) in order.iter().enumerate() {
                y_perm.row_mut(dst).assign(&y.row(src));
            }
            nulls.push(first_canonical_correlation(&x, &y_perm).unwrap());
        }
        let mean = nulls.iter().sum::<f64>() / nulls.len() as f64;
        let std = (nulls.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (nulls.len() - 1) as f64)
            .sqrt();
        assert!(
            (cc - mean).abs() <= 3.0 * std + 0.02,
            "cc {cc} outside null band {mean} +- 3*{std}"
        );
        assert!(cc < 0.2, "independent 1000x2 data should have small r, got {cc}");
    }

    // ------------------------------------------------------------------
    // Invariants
    // ------------------------------------------------------------------

    #[test]
    fn affine_invariance_under_invertible_maps() {
        let mut r = rng(6);
        let x = uniform_matrix(200, 4, &mut r);
        let mut y = uniform_matrix(200, 3, &mut r);
        for i in 0..200 {
            y[[i, 0]] += 0.7 * x[[i, 1]];
        }
        let base = first_canonical_correlation(&x, &y).unwrap();

        for seed in 0..3u64 {
            let mut rr = rng(100 + seed);
            let mut a = Array2::from_shape_fn((4, 4), |_| rr.gen_range(-1.0..1.0));
            for i in 0..4 {
                a[[i, i]] += 3.0;
            }
            let shift = rr.gen_range(-2.0..2.0);
            let xt = x.dot(&a) + shift;
            let cc = first_canonical_correlation(&xt, &y).unwrap();
            assert!(
                (cc - base).abs() < 1e-6,
                "X map seed {seed}: {cc} vs {base}"
            );

            let mut b = Array2::from_shape_fn((3, 3), |_| rr.gen_range(-1.0..1.0));
            for i in 0..3 {
                b[[i, i]] += 3.0;
            }
            let yt = y.dot(&b) - 1.5;
            let cc_y = first_canonical_correlation(&x, &yt).unwrap();
            assert!(
                (cc_y - base).abs() < 1e-6,
                "Y map seed {seed}: {cc_y} vs {base}"
            );
        }
    }

    #[test]
    fn self_correlation_is_unity() {
        let mut r = rng(7);
        let x = uniform_matrix(40, 6, &mut r);
        let cc = first_canonical_correlation(&x, &x).unwrap();
        assert!(cc >= 1.0 - 1e-10 && cc <= 1.0, "r(X, X) = {cc}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn swap_symmetry_and_range(seed in 0u64..1000, t in 12usize..30, p in 1usize..4, q in 1usize..4) {
            prop_assume!(t > p.max(q) + 1);
            let mut r = rng(seed);
            let x = uniform_matrix(t, p, &mut r);
            let y = uniform_matrix(t, q, &mut r);
            let ab = first_canonical_correlation(&x, &y).unwrap();
            let ba = first_canonical_correlation(&y, &x).unwrap();
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - ba).abs() < 1e-9, "swap changed r: {ab} vs {ba}");
        }
    }

    #[test]
    fn insufficient_frames_and_degenerate_inputs_error() {
        let mut r = rng(8);
        let x = uniform_matrix(5, 5, &mut r);
        let y = uniform_matrix(5, 2, &mut r);
        let err = first_canonical_correlation(&x, &y).unwrap_err().to_string();
        assert!(err.contains("insufficient frames"), "got: {err}");

        let x_const = Array2::from_elem((30, 2), 3.7);
        let y_ok = uniform_matrix(30, 2, &mut r);
        let err = first_canonical_correlation(&x_const, &y_ok)
            .unwrap_err()
            .to_string();
        assert!(err.contains("zero-variance"), "got: {err}");
        let err = first_canonical_correlation(&y_ok, &x_const)
            .unwrap_err()
            .to_string();
        assert!(err.contains("zero-variance"), "got: {err}");

        let mut x_nan = uniform_matrix(30, 2, &mut r);
        x_nan[[0, 0]] = f64::NAN;
        assert!(first_canonical_correlation(&x_nan, &y_ok).is_err());

        let y_short = uniform_matrix(29, 2, &mut r);
        assert!(first_canonical_correlation(&y_ok, &y_short).is_err());
    }

    #[test]
    fn single_constant_column_is_tolerated() {
        let mut r = rng(9);
        let mut x = uniform_matrix(80, 3, &mut r);
        for i in 0..80 {
            x[[i, 2]] = 0.25;
        }
        let mut y = uniform_matrix(80, 2, &mut r);
        for i in 0..80 {
            y[[i, 0]] += x[[i, 0]];
        }
        let cc = first_canonical_correlation(&x, &y).unwrap();
        assert!(cc > 0.5 && cc <= 1.0, "constant column broke CCA: {cc}");
    }

    // ------------------------------------------------------------------
    // PCA reduction
    // ------------------------------------------------------------------

    #[test]
    fn pca_full_rank_projection_preserves_cca() {
        let mut r = rng(10);
        let x = uniform_matrix(80, 5, &mut r);
        let mut y = uniform_matrix(80, 3, &mut r);
        for i in 0..80 {
            y[[i, 1]] += 0.6 * x[[i, 0]];
        }
        let base = first_canonical_correlation(&x, &y).unwrap();
        let x_red = pca_reduce(&x, 5).unwrap();
        assert_eq!(x_red.dim(), (80, 5));
        let cc = first_canonical_correlation(&x_red, &y).unwrap();
        assert!((cc - base).abs() < 1e-9, "{cc} vs {base}");

        let x_small = pca_reduce(&x, 2).unwrap();
        assert_eq!(x_small.dim(), (80, 2));
        assert!(pca_reduce(&x, 0).is_err());
        assert!(pca_reduce(&Array2::zeros((1, 3)), 2).is_err());
    }

    #[test]
    fn pca_keeps_dominant_directions() {
        let mut r = rng(11);
        let t = 300;
        let latent: Vec<f64> = (0..t).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut x = Array2::zeros((t, 6));
        for i in 0..t {
            for j in 0..6 {
                x[[i, j]] = 10.0 * latent[i] * (j as f64 + 1.0) + 0.01 * r.gen_range(-1.0..1.0);
            }
        }
        let reduced = pca_reduce(&x, 1).unwrap();
        let lat = Array2::from_shape_vec((t, 1), latent).unwrap();
        let cc = first_canonical_correlation(&reduced, &lat).unwrap();
        assert!(cc > 0.999, "top PC should carry the latent, got {cc}");
    }

    // ------------------------------------------------------------------
    // Synthetic corpus synchrony
    // ------------------------------------------------------------------

    #[test]
    fn corpus_target_audio_and_lips_are_synchronized() {
        let cfg = SynthConfig {
            min_duration_s: 2.5,
            max_duration_s: 3.5,
            ..SynthConfig::default()
        };
        let corpus = synth_parallel_corpus(11, 2, &cfg).unwrap();
        for (utt, clips) in corpus.target.iter().zip(&corpus.clips) {
            let kp = utt.facial.keypoints().to_owned();
            let cc = utterance_audio_lip_cca(&clips.1, &kp).unwrap();
            assert!(
                cc > 0.5,
                "synthetic target utterance should sync audio and lips, got {cc}"
            );
        }
    }

    #[test]
    fn short_utterance_reports_insufficient_frames() {
        let clip = sine_clip(1.0, 16000);
        let mut r = rng(12);
        let kp = uniform_matrix(25, KEYPOINT_DIM, &mut r);
        let err = utterance_audio_lip_cca(&clip, &kp).unwrap_err().to_string();
        assert!(err.contains("insufficient frames"), "got: {err}");
    }

    // ------------------------------------------------------------------
    // Rank-sum test
    // ------------------------------------------------------------------

    /// Exhaustive enumeration of all assignments as an oracle for the DP.
    fn rank_sum_p_exhaustive(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len();
        let total = n + b.len();
        let pooled: Vec<f64> = a.iter().chain(b).cloned().collect();
        let mut order: Vec<usize> = (0..total).collect();
        order.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
        let mut midrank = vec![0.0f64; total];
        let sorted: Vec<f64> = order.iter().map(|&i| pooled[i]).collect();
        let mut i = 0;
        while i < total {
            let mut j = i + 1;
            while j < total && sorted[j] == sorted[i] {
                j += 1;
            }
            let mr = ((i + 1) + j) as f64 / 2.0;
            for k in i..j {
                midrank[order[k]] = mr;
            }
            i = j;
        }
        let w_obs: f64 = midrank[..n].iter().sum();

        fn count_subsets(
            start: usize,
            left: usize,
            acc: f64,
            midrank: &[f64],
            w_obs: f64,
            counts: &mut (usize, usize),
        ) {
            if left == 0 {
                counts.1 += 1;
                if acc >= w_obs - 1e-9 {
                    counts.0 += 1;
                }
                return;
            }
            if midrank.len() - start < left {
                return;
            }
            for i in start..midrank.len() {
                count_subsets(i + 1, left - 1, acc + midrank[i], midrank, w_obs, counts);
            }
        }
        let mut counts = (0usize, 0usize);
        count_subsets(0, n, 0.0, &midrank, w_obs, &mut counts);
        counts.0 as f64 / counts.1 as f64
    }

    #[test]
    fn rank_sum_matches_exhaustive_enumeration() {
        let a = [0.3, 0.5, 0.5, 0.9];
        let b = [0.1, 0.5, 0.7, 0.2];
        let dp = rank_sum_p_greater(&a, &b).unwrap();
        let oracle = rank_sum_p_exhaustive(&a, &b);
        assert!((dp - oracle).abs() < 1e-12, "dp {dp} vs oracle {oracle}");

        let a2 = [0.62, 0.18, 0.95];
        let b2 = [0.4, 0.4, 0.77, 0.11, 0.3];
        let dp2 = rank_sum_p_greater(&a2, &b2).unwrap();
        let oracle2 = rank_sum_p_exhaustive(&a2, &b2);
        assert!((dp2 - oracle2).abs() < 1e-12, "dp {dp2} vs oracle {oracle2}");
    }

    #[test]
    fn rank_sum_handles_contract_examples() {
        let same = [0.5; 10];
        let p = rank_sum_p_greater(&same, &same).unwrap();
        assert_eq!(p, 1.0, "fully tied data has a point-mass null");

        let high = [0.9; 10];
        let low = [0.1; 10];
        let p_hi = rank_sum_p_greater(&high, &low).unwrap();
        assert!(p_hi < 0.01, "separated groups must be significant, got {p_hi}");
        let expected = 1.0 / 184756.0;
        assert!((p_hi - expected).abs() < 1e-12, "exact tail is 1/C(20,10), got {p_hi}");
        let p_lo = rank_sum_p_greater(&low, &high).unwrap();
        assert_eq!(p_lo, 1.0, "reversed direction occupies the whole tail");

        let varied: Vec<f64> = (0..10).map(|i| 0.1 + 0.08 * i as f64).collect();
        let p_var = rank_sum_p_greater(&varied, &varied).unwrap();
        assert!(p_var >= 0.5, "identical lists should not look significant, got {p_var}");

        assert!(rank_sum_p_greater(&[], &low).is_err());
        assert!(rank_sum_p_greater(&high, &[f64::NAN]).is_err());
    }

    #[test]
    fn normal_approximation_tracks_exact_tail() {
        let mut r = rng(13);
        let a: Vec<f64> = (0..15).map(|_| r.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..15).map(|_| r.gen_range(0.0..0.8)).collect();
        let mut pooled: Vec<(f64, bool)> = a
            .iter()
            .map(|&v| (v, true))
            .chain(b.iter().map(|&v| (v, false)))
            .collect();
        pooled.sort_by(|x, y| x.0.total_cmp(&y.0));
        let total = pooled.len();
        let mut doubled = vec![0usize; total];
        let mut i = 0;
        while i < total {
            let mut j = i + 1;
            while j < total && pooled[j].0 == pooled[i].0 {
                j += 1;
            }
            for k in i..j {
                doubled[k] = (i + 1) + j;
            }
            i = j;
        }
        let w_obs: usize = pooled
            .iter()
            .zip(&doubled)
            .filter(|((_, in_a), _)| *in_a)
            .map(|(_, &d)| d)
            .sum();
        let exact = rank_sum_exact_tail(&doubled, a.len(), w_obs);
        let approx = rank_sum_normal_tail(&doubled, a.len(), w_obs);
        assert!(
            (exact - approx).abs() < 0.02,
            "normal approximation off: exact {exact} vs approx {approx}"
        );
    }

    // ------------------------------------------------------------------
    // Condition comparison and report serialization
    // ------------------------------------------------------------------

    fn make_report(proposed: &[f64], baseline: &[f64]) -> CcaReport {
        let entries = proposed
            .iter()
            .enumerate()
            .map(|(i, &r)| UtteranceCca {
                utterance_id: format!("utt-{i:03}"),
                condition: Condition::Proposed,
                r,
            })
            .chain(baseline.iter().enumerate().map(|(i, &r)| UtteranceCca {
                utterance_id: format!("utt-{i:03}"),
                condition: Condition::Baseline,
                r,
            }))
            .collect();
        CcaReport::new(entries).unwrap()
    }

    #[test]
    fn compare_conditions_reports_direction_and_significance() {
        let proposed: Vec<f64> = (0..12).map(|i| 0.7 + 0.01 * i as f64).collect();
        let baseline: Vec<f64> = (0..12).map(|i| 0.2 + 0.01 * i as f64).collect();
        let report = make_report(&proposed, &baseline);

        let cmp = compare_conditions(&report, Condition::Proposed, Condition::Baseline).unwrap();
        assert_eq!(cmp.higher, Some(Condition::Proposed));
        assert!(cmp.mean_difference > 0.49);
        assert!(cmp.p_value_a_greater < 0.01, "p = {}", cmp.p_value_a_greater);
        assert_eq!((cmp.n_a, cmp.n_b), (12, 12));

        let rev = compare_conditions(&report, Condition::Baseline, Condition::Proposed).unwrap();
        assert_eq!(rev.higher, Some(Condition::Proposed));
        assert!(rev.p_value_a_greater > 0.99, "p = {}", rev.p_value_a_greater);

        let tied = make_report(&[0.5; 10], &[0.5; 10]);
        let cmp_tied =
            compare_conditions(&tied, Condition::Proposed, Condition::Baseline).unwrap();
        assert_eq!(cmp_tied.mean_difference, 0.0);
        assert_eq!(cmp_tied.higher, None);
        assert_eq!(cmp_tied.p_value_a_greater, 1.0);
    }

    #[test]
    fn compare_conditions_rejects_degenerate_setups() {
        let report = make_report(&[0.8; 9], &[0.2; 12]);
        let err = compare_conditions(&report, Condition::Proposed, Condition::Baseline)
            .unwrap_err()
            .to_string();
        assert!(err.contains("proposed") && err.contains("9"), "got: {err}");

        let only_one = make_report(&[0.8; 12], &[]);
        let err = compare_conditions(&only_one, Condition::Proposed, Condition::Baseline)
            .unwrap_err()
            .to_string();
        assert!(err.contains("baseline"), "got: {err}");

        assert!(compare_conditions(&only_one, Condition::Proposed, Condition::Proposed).is_err());
    }

    #[test]
    fn report_validates_entries_and_summarizes() {
        let bad = CcaReport::new(vec![UtteranceCca {
            utterance_id: "u1".into(),
            condition: Condition::Target,
            r: 1.2,
        }]);
        assert!(bad.is_err());
        let bad_id = CcaReport::new(vec![UtteranceCca {
            utterance_id: "u,1".into(),
            condition: Condition::Target,
            r: 0.5,
        }]);
        assert!(bad_id.is_err());

        let report = make_report(&[0.1, 0.2, 0.3, 0.4], &[0.6]);
        let summaries = report.summaries();
        assert_eq!(summaries.len(), 2);
        let prop = &summaries[0];
        assert_eq!(prop.condition, Condition::Proposed);
        assert_eq!(prop.n, 4);
        assert!((prop.mean - 0.25).abs() < 1e-12);
        assert!((prop.median - 0.25).abs() < 1e-12);
        assert!((prop.q25 - 0.175).abs() < 1e-12);
        assert!((prop.q75 - 0.325).abs() < 1e-12);
        assert_eq!((prop.min, prop.max), (0.1, 0.4));
        assert_eq!(summaries[1].condition, Condition::Baseline);
        assert_eq!(summaries[1].n, 1);
        assert_eq!(summaries[1].median, 0.6);
    }

    #[test]
    fn csv_json_and_histogram_serialize_the_report() {
        let mut entries = vec![
            UtteranceCca {
                utterance_id: "utt-000".into(),
                condition: Condition::Proposed,
                r: 0.875,
            },
            UtteranceCca {
                utterance_id: "utt-001".into(),
                condition: Condition::Baseline,
                r: 0.05,
            },
            UtteranceCca {
                utterance_id: "utt-002".into(),
                condition: Condition::Target,
                r: 1.0,
            },
        ];
        entries.push(UtteranceCca {
            utterance_id: "utt-003".into(),
            condition: Condition::Proposed,
            r: 0.0,
        });
        let report = CcaReport::new(entries).unwrap();

        let csv = report.to_csv();
        assert!(csv.starts_with("utterance_id,condition,r\n"));
        assert!(csv.contains("utt-000,proposed,0.875\n"));
        let back = CcaReport::from_csv(&csv).unwrap();
        assert_eq!(back, report);

        assert!(CcaReport::from_csv("nope\n").is_err());
        assert!(CcaReport::from_csv("utterance_id,condition,r\nu1,weird,0.5\n").is_err());
        assert!(CcaReport::from_csv("utterance_id,condition,r\nu1,proposed,1.5\n").is_err());

        let json = report.summary_json().unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        let arr = parsed.as_array().unwrap();
        assert_eq!(arr.len(), 3);
        assert_eq!(arr[0]["condition"], "proposed");
        assert_eq!(arr[0]["n"], 2);

        let hist = report.histogram_csv();
        let lines: Vec<&str> = hist.lines().collect();
        assert_eq!(lines.len(), 21);
        assert_eq!(lines[0], "bin_lo,bin_hi,proposed,baseline,target");
        assert_eq!(lines[1], "0.00,0.05,1,0,0");
        assert_eq!(lines[2], "0.05,0.10,0,1,0");
        assert_eq!(lines[18], "0.85,0.90,1,0,0");
        assert_eq!(lines[20], "0.95,1.00,0,0,1");
        let mut sums = [0usize; 3];
        for line in &lines[1..] {
            let f: Vec<&str> = line.split(',').collect();
            sums[0] += f[2].parse::<usize>().unwrap();
            sums[1] += f[3].parse::<usize>().unwrap();
            sums[2] += f[4].parse::<usize>().unwrap();
        }
        assert_eq!(sums, [2, 1, 1]);
    }

    #[test]
    fn condition_round_trips_through_strings() {
        for c in Condition::ALL {
            let s = c.to_string();
            let back: Condition = s.parse().unwrap();
            assert_eq!(back, c);
            let json = serde_json::to_string(&c).unwrap();
            assert_eq!(json, format!("\"{s}\""));
        }
        assert!("Proposed".parse::<Condition>().is_err());
    }
}
