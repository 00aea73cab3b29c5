//! On-disk cache of full-utterance, pre-MVN feature matrices.
//!
//! Entries are keyed by (dsp-config hash, feature kind, utterance id), so a
//! changed front-end setting silently starts a fresh namespace instead of
//! serving stale features. Files hold the raw feature matrix plus the source
//! waveform's sample count (needed to validate crop offsets without touching
//! the audio again). Unreadable or truncated entries are recomputed and
//! rewritten, never trusted.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{extract, load_waveform, DspConfig, FeatureKind};
use crate::error::{Error, Result};

/// Environment variable naming the cache root; unset or empty disables it.
pub const CACHE_DIR_ENV: &str = "ENVADV_CACHE_DIR";

const MAGIC: &[u8; 4] = b"EAF1";

/// Feature cache rooted at one directory, safe for concurrent readers and
/// writers (writes go through a temp file and an atomic rename).
#[derive(Debug, Clone)]
pub struct FeatureCache {
    root: PathBuf,
}

impl FeatureCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FeatureCache { root: root.into() }
    }

    /// Cache configured via `ENVADV_CACHE_DIR`, when set and non-empty.
    pub fn from_env() -> Option<Self> {
        let dir = std::env::var_os(CACHE_DIR_ENV)?;
        if dir.is_empty() {
            return None;
        }
        Some(FeatureCache::new(PathBuf::from(dir)))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn entry_path(&self, cfg: &DspConfig, kind: FeatureKind, utt_id: &str) -> PathBuf {
        self.root
            .join(&cfg.content_hash()[..16])
            .join(kind.as_str())
            .join(format!("{utt_id}.feat"))
    }

    /// Full-utterance pre-MVN features and the waveform's sample count,
    /// loading from the cache when possible and computing + storing otherwise.
    pub fn full_features(
        &self,
        cfg: &DspConfig,
        kind: FeatureKind,
        utt_id: &str,
        wav_path: &Path,
    ) -> Result<(Array2<f32>, usize)> {
        let entry = self.entry_path(cfg, kind, utt_id);
        if let Some(hit) = read_entry(&entry, kind) {
            return Ok(hit);
        }

        let wave = load_waveform(wav_path, cfg.stereo_policy, cfg.sample_rate_hz)?;
        let features = extract(&wave.samples, cfg, kind)?.values;
        write_entry(&entry, kind, &features, wave.samples.len())?;
        Ok((features, wave.samples.len()))
    }
}

fn read_entry(path: &Path, kind: FeatureKind) -> Option<(Array2<f32>, usize)> {
    let bytes = fs::read(path).ok()?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Option<&[u8]> {
        let slice = bytes.get(*off..*off + n)?;
        *off += n;
        Some(slice)
    };

    if take(&mut off, 4)? != MAGIC {
        return None;
    }
    let stored_kind = take(&mut off, 1)?[0];
    if stored_kind != kind_tag(kind) {
        return None;
    }
    let f = u32::from_le_bytes(take(&mut off, 4)?.try_into().ok()?) as usize;
    let t = u32::from_le_bytes(take(&mut off, 4)?.try_into().ok()?) as usize;
    let n_samples = u64::from_le_bytes(take(&mut off, 8)?.try_into().ok()?) as usize;
    if f != kind.bins() || f.checked_mul(t)?.checked_mul(4)? != bytes.len() - off {
        return None;
    }

    let mut data = Vec::with_capacity(f * t);
    for chunk in bytes[off..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().ok()?));
    }
    let values = Array2::from_shape_vec((f, t), data).ok()?;
    Some((values, n_samples))
}

fn write_entry(path: &Path, kind: FeatureKind, values: &Array2<f32>, n_samples: usize) -> Result<()> {
    let parent = path.parent().expect("cache entry has a parent directory");
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;

    let (f, t) = values.dim();
    let mut bytes = Vec::with_capacity(21 + 4 * f * t);
    bytes.extend_from_slice(MAGIC);
    bytes.push(kind_tag(kind));
    bytes.extend_from_slice(&(f as u32).to_le_bytes());
    bytes.extend_from_slice(&(t as u32).to_le_bytes());
    bytes.extend_from_slice(&(n_samples as u64).to_le_bytes());
    for &v in values.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }

    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn kind_tag(kind: FeatureKind) -> u8 {
    match kind {
        FeatureKind::Spectrogram257 => 0,
        FeatureKind::Fbank40 => 1,
    }
}
