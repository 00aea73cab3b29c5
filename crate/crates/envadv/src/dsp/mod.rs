//! Waveform-to-feature front end.
//!
//! Two input representations are produced: 257-bin magnitude spectrograms
//! (fed to the ResNet trunk) and 40-dimensional log mel filterbanks (fed to
//! the VGG trunk), both from a 25 ms Hamming window advanced by 10 ms. Every
//! feature matrix is mean/variance normalized per frequency bin before it
//! reaches a network.
//!
//! Training and evaluation consume fixed 2 s segments. Segment starts resolve
//! to the 10 ms frame grid, which makes a waveform crop and a frame slice of
//! the full-utterance features produce bitwise-identical values; that
//! equivalence is what lets the on-disk feature cache substitute for raw
//! audio without changing any result.

mod cache;
mod fir;
mod wav;

pub use cache::{FeatureCache, CACHE_DIR_ENV};
pub use fir::{convolve, windowed_sinc_lowpass};
pub use wav::{load_waveform, wav_duration_s, write_wav_pcm16, Waveform};

use std::path::Path;
use std::sync::{Mutex, OnceLock};

use ndarray::{s, Array2};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{Error, Result};

/// FFT analysis size; 400-sample windows are zero-padded to this length.
pub const FFT_SIZE: usize = 512;
/// One-sided spectrum size for [`FFT_SIZE`].
pub const SPECTROGRAM_BINS: usize = FFT_SIZE / 2 + 1;
/// Mel filterbank channel count.
pub const N_MELS: usize = 40;
/// Variance guard added before the MVN division; constant bins map to zeros.
pub const MVN_EPS: f64 = 1e-5;

/// Input representation selector; each trunk architecture requires one kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Spectrogram257,
    Fbank40,
}

impl FeatureKind {
    /// Frequency-axis size F of the feature matrix.
    pub fn bins(self) -> usize {
        match self {
            FeatureKind::Spectrogram257 => SPECTROGRAM_BINS,
            FeatureKind::Fbank40 => N_MELS,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Spectrogram257 => "spectrogram257",
            FeatureKind::Fbank40 => "fbank40",
        }
    }
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spectrogram257" => Ok(FeatureKind::Spectrogram257),
            "fbank40" => Ok(FeatureKind::Fbank40),
            other => Err(Error::Config(format!("unknown feature kind `{other}`"))),
        }
    }
}

/// What to do with multichannel input files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StereoPolicy {
    /// Reject anything that is not mono.
    #[default]
    Error,
    /// Average all channels into one.
    Average,
}

/// Which span of audio the MVN statistics are computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MvnScope {
    /// Statistics from the 2 s crop itself (default; identical at train and
    /// eval time).
    #[default]
    Crop,
    /// Statistics from the whole utterance, then slice the crop.
    Utterance,
}

/// Front-end settings. Hashable so caches and checkpoints can detect drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DspConfig {
    pub sample_rate_hz: u32,
    pub frame_len_s: f64,
    pub frame_shift_s: f64,
    pub mel_fmin_hz: f64,
    pub mel_fmax_hz: f64,
    /// Mel energies below this are clamped before the log.
    pub log_floor: f64,
    /// Training/evaluation segment length in seconds.
    pub segment_len_s: f64,
    pub mvn_scope: MvnScope,
    pub stereo_policy: StereoPolicy,
}

impl Default for DspConfig {
    fn default() -> Self {
        DspConfig {
            sample_rate_hz: 16_000,
            frame_len_s: 0.025,
            frame_shift_s: 0.010,
            mel_fmin_hz: 0.0,
            mel_fmax_hz: 8_000.0,
            log_floor: 1e-10,
            segment_len_s: 2.0,
            mvn_scope: MvnScope::Crop,
            stereo_policy: StereoPolicy::Error,
        }
    }
}

impl DspConfig {
    /// Analysis window length in samples (400 at the default settings).
    pub fn frame_len(&self) -> usize {
        (self.frame_len_s * f64::from(self.sample_rate_hz)).round() as usize
    }

    /// Frame advance in samples (160 at the default settings).
    pub fn hop(&self) -> usize {
        (self.frame_shift_s * f64::from(self.sample_rate_hz)).round() as usize
    }

    /// Segment length in samples (32,000 at the default settings).
    pub fn segment_samples(&self) -> usize {
        (self.segment_len_s * f64::from(self.sample_rate_hz)).round() as usize
    }

    /// Frame count for `n_samples` of audio, or an error when not even one
    /// full window fits.
    pub fn n_frames(&self, n_samples: usize) -> Result<usize> {
        let win = self.frame_len();
        if n_samples < win {
            return Err(Error::Dsp(format!(
                "{n_samples} samples is shorter than one {win}-sample analysis window"
            )));
        }
        Ok(1 + (n_samples - win) / self.hop())
    }

    /// Frames per fixed-length segment (198 at the default settings).
    pub fn frames_per_segment(&self) -> usize {
        self.n_frames(self.segment_samples())
            .expect("segment length covers at least one window")
    }

    /// Fingerprint of every setting that affects feature values.
    pub fn content_hash(&self) -> String {
        crate::checkpoint::json_sha256(self)
    }
}

/// A time-frequency feature matrix with its provenance.
#[derive(Debug, Clone)]
pub struct FeatureSegment {
    /// F × T, frequency bins by frames.
    pub values: Array2<f32>,
    pub kind: FeatureKind,
    pub sample_rate_hz: u32,
    pub frame_len_s: f64,
    pub frame_shift_s: f64,
}

impl FeatureSegment {
    pub fn n_bins(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }
}

fn hamming(len: usize) -> Vec<f32> {
    let denom = (len - 1) as f64;
    (0..len)
        .map(|n| (0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / denom).cos()) as f32)
        .collect()
}

fn plan_fft(size: usize) -> Arc<dyn Fft<f32>> {
    static PLANNER: OnceLock<Mutex<FftPlanner<f32>>> = OnceLock::new();
    PLANNER
        .get_or_init(|| Mutex::new(FftPlanner::new()))
        .lock()
        .expect("FFT planner lock")
        .plan_fft_forward(size)
}

fn stft_magnitude(samples: &[f32], cfg: &DspConfig) -> Result<Array2<f32>> {
    let win_len = cfg.frame_len();
    let hop = cfg.hop();
    let n_frames = cfg.n_frames(samples.len())?;
    debug_assert!(win_len <= FFT_SIZE, "window exceeds FFT size");

    let window = hamming(win_len);
    let fft = plan_fft(FFT_SIZE);
    let mut buf = vec![Complex::new(0.0f32, 0.0); FFT_SIZE];
    let mut scratch = vec![Complex::new(0.0f32, 0.0); fft.get_inplace_scratch_len()];

    let mut out = Array2::zeros((SPECTROGRAM_BINS, n_frames));
    for t in 0..n_frames {
        let start = t * hop;
        for i in 0..win_len {
            buf[i] = Complex::new(samples[start + i] * window[i], 0.0);
        }
        for slot in buf.iter_mut().skip(win_len) {
            *slot = Complex::new(0.0, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (k, value) in buf.iter().take(SPECTROGRAM_BINS).enumerate() {
            out[(k, t)] = value.norm();
        }
    }
    Ok(out)
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filter weights, N_MELS × SPECTROGRAM_BINS, applied to the
/// power spectrum. Edges are equally spaced on the mel scale between
/// `mel_fmin_hz` and `mel_fmax_hz` (capped at Nyquist).
pub fn mel_filterbank(cfg: &DspConfig) -> Array2<f32> {
    let sr = f64::from(cfg.sample_rate_hz);
    let lo = hz_to_mel(cfg.mel_fmin_hz);
    let hi = hz_to_mel(cfg.mel_fmax_hz.min(sr / 2.0));
    let edges: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
        .collect();

    let mut fb = Array2::zeros((N_MELS, SPECTROGRAM_BINS));
    for m in 0..N_MELS {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..SPECTROGRAM_BINS {
            let f = k as f64 * sr / FFT_SIZE as f64;
            let w = if f >= left && f <= center && center > left {
                (f - left) / (center - left)
            } else if f > center && f <= right && right > center {
                (right - f) / (right - center)
            } else {
                0.0
            };
            if w > 0.0 {
                fb[(m, k)] = w as f32;
            }
        }
    }
    fb
}

/// Magnitude spectrogram, 257 bins × T frames, pre-MVN.
pub fn spectrogram(samples: &[f32], cfg: &DspConfig) -> Result<FeatureSegment> {
    Ok(FeatureSegment {
        values: stft_magnitude(samples, cfg)?,
        kind: FeatureKind::Spectrogram257,
        sample_rate_hz: cfg.sample_rate_hz,
        frame_len_s: cfg.frame_len_s,
        frame_shift_s: cfg.frame_shift_s,
    })
}

/// Log mel filterbank, 40 bins × T frames, pre-MVN.
pub fn fbank(samples: &[f32], cfg: &DspConfig) -> Result<FeatureSegment> {
    let mag = stft_magnitude(samples, cfg)?;
    let power = mag.mapv(|x| x * x);
    let mut energies = mel_filterbank(cfg).dot(&power);
    let floor = cfg.log_floor as f32;
    energies.mapv_inplace(|e| e.max(floor).ln());
    Ok(FeatureSegment {
        values: energies,
        kind: FeatureKind::Fbank40,
        sample_rate_hz: cfg.sample_rate_hz,
        frame_len_s: cfg.frame_len_s,
        frame_shift_s: cfg.frame_shift_s,
    })
}

/// Feature extraction dispatched on `kind`, pre-MVN.
pub fn extract(samples: &[f32], cfg: &DspConfig, kind: FeatureKind) -> Result<FeatureSegment> {
    match kind {
        FeatureKind::Spectrogram257 => spectrogram(samples, cfg),
        FeatureKind::Fbank40 => fbank(samples, cfg),
    }
}

/// Standardizes each row (frequency bin) to zero mean and unit variance over
/// the columns, with population statistics and an ε-guarded division, so a
/// constant row becomes all zeros rather than NaN.
pub fn mvn_rows(values: &mut Array2<f32>) {
    let t = values.ncols();
    if t == 0 {
        return;
    }
    for mut row in values.rows_mut() {
        let mean = row.iter().map(|&x| f64::from(x)).sum::<f64>() / t as f64;
        let var = row
            .iter()
            .map(|&x| {
                let d = f64::from(x) - mean;
                d * d
            })
            .sum::<f64>()
            / t as f64;
        let inv = 1.0 / (var + MVN_EPS).sqrt();
        row.mapv_inplace(|x| ((f64::from(x) - mean) * inv) as f32);
    }
}

/// Per-frequency-bin mean/variance normalization of a feature segment.
pub fn mvn(seg: &mut FeatureSegment) {
    mvn_rows(&mut seg.values);
}

/// Evenly spaced crop offsets covering an utterance: `n` values from 0 to
/// `duration_s − seg_len_s` inclusive.
pub fn crop_offsets(duration_s: f64, seg_len_s: f64, n: usize) -> Vec<f64> {
    let span = (duration_s - seg_len_s).max(0.0);
    if n <= 1 {
        return vec![0.0];
    }
    (0..n).map(|i| span * i as f64 / (n - 1) as f64).collect()
}

/// Resolves a crop offset in seconds to a start frame on the 10 ms grid.
///
/// The rounded frame start keeps waveform crops and cached-feature slices
/// exactly interchangeable. Offsets must lie in `[0, duration − segment]`
/// (with a hair of slack for accumulated float error in offset arithmetic);
/// anything outside is an error, not a clamp.
pub fn crop_start_frame(cfg: &DspConfig, n_samples: usize, offset_s: f64) -> Result<usize> {
    let seg = cfg.segment_samples();
    if n_samples < seg {
        return Err(Error::Dsp(format!(
            "utterance has {n_samples} samples, shorter than the {seg}-sample segment"
        )));
    }
    let hop = cfg.hop();
    let duration_s = n_samples as f64 / f64::from(cfg.sample_rate_hz);
    let max_offset_s = duration_s - cfg.segment_len_s;
    if offset_s < -1e-9 || offset_s > max_offset_s + 1e-6 {
        return Err(Error::Dsp(format!(
            "crop offset {offset_s:.6} s outside [0, {max_offset_s:.6}] s"
        )));
    }
    let max_frame = (n_samples - seg) / hop;
    let frame = (offset_s.max(0.0) * f64::from(cfg.sample_rate_hz) / hop as f64).round() as usize;
    Ok(frame.min(max_frame))
}

/// Crops one fixed-length segment of raw samples at `offset_s`.
pub fn crop_samples<'a>(samples: &'a [f32], cfg: &DspConfig, offset_s: f64) -> Result<&'a [f32]> {
    let frame = crop_start_frame(cfg, samples.len(), offset_s)?;
    let start = frame * cfg.hop();
    Ok(&samples[start..start + cfg.segment_samples()])
}

/// Full feature path for one training/evaluation segment: crop, extract,
/// normalize (ordering per `cfg.mvn_scope`). Returns an F × 198 matrix at the
/// default settings.
pub fn segment_features(
    samples: &[f32],
    cfg: &DspConfig,
    kind: FeatureKind,
    offset_s: f64,
) -> Result<Array2<f32>> {
    match cfg.mvn_scope {
        MvnScope::Crop => {
            let crop = crop_samples(samples, cfg, offset_s)?;
            let mut seg = extract(crop, cfg, kind)?;
            mvn(&mut seg);
            Ok(seg.values)
        }
        MvnScope::Utterance => {
            let frame = crop_start_frame(cfg, samples.len(), offset_s)?;
            let mut full = extract(samples, cfg, kind)?;
            mvn(&mut full);
            let t = cfg.frames_per_segment();
            Ok(full.values.slice(s![.., frame..frame + t]).to_owned())
        }
    }
}

/// Slices a fixed-length segment out of full-utterance pre-MVN features and
/// applies MVN per `cfg.mvn_scope`. Bitwise-equal to [`segment_features`] on
/// the corresponding waveform.
pub fn segment_from_full_features(
    full: &Array2<f32>,
    n_samples: usize,
    cfg: &DspConfig,
    offset_s: f64,
) -> Result<Array2<f32>> {
    let frame = crop_start_frame(cfg, n_samples, offset_s)?;
    let t = cfg.frames_per_segment();
    if frame + t > full.ncols() {
        return Err(Error::Dsp(format!(
            "cached features have {} frames, segment needs {}..{}",
            full.ncols(),
            frame,
            frame + t
        )));
    }
    match cfg.mvn_scope {
        MvnScope::Crop => {
            let mut seg = full.slice(s![.., frame..frame + t]).to_owned();
            mvn_rows(&mut seg);
            Ok(seg)
        }
        MvnScope::Utterance => {
            let mut whole = full.clone();
            mvn_rows(&mut whole);
            Ok(whole.slice(s![.., frame..frame + t]).to_owned())
        }
    }
}

/// One-stop segment loader used by the trainer and evaluator: reads audio (or
/// the feature cache when one is attached), crops, extracts, and normalizes.
#[derive(Debug)]
pub struct FeatureExtractor {
    pub cfg: DspConfig,
    pub kind: FeatureKind,
    cache: Option<FeatureCache>,
}

impl FeatureExtractor {
    pub fn new(cfg: DspConfig, kind: FeatureKind) -> Self {
        FeatureExtractor {
            cfg,
            kind,
            cache: None,
        }
    }

    /// Attaches an on-disk feature cache (usually from [`FeatureCache::from_env`]).
    pub fn with_cache(mut self, cache: Option<FeatureCache>) -> Self {
        self.cache = cache;
        self
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Post-MVN features for the 2 s segment of `utt_id` starting at
    /// `offset_s`. `path` is the utterance's waveform file.
    pub fn segment(&self, utt_id: &str, path: &Path, offset_s: f64) -> Result<Array2<f32>> {
        if let Some(cache) = &self.cache {
            let (full, n_samples) = cache.full_features(&self.cfg, self.kind, utt_id, path)?;
            return segment_from_full_features(&full, n_samples, &self.cfg, offset_s);
        }
        let wave = load_waveform(path, self.cfg.stereo_policy, self.cfg.sample_rate_hz)?;
        segment_features(&wave.samples, &self.cfg, self.kind, offset_s)
    }
}
