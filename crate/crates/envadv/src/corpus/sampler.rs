//! Adversarial triplet batch sampling.
//!
//! Each batch draws `n_speakers` distinct speakers; each contributes three
//! crops: an anchor, a positive from the same video as the anchor (possibly
//! another stretch of the same file), and a negative from a different video
//! of the same speaker. Same speaker throughout is what isolates the
//! environment factor: the only systematic difference between the positive
//! and negative pair is the recording condition.

use rand_chacha::ChaCha8Rng;

use super::{Manifest, Split};
use crate::error::{Error, Result};
use rand::Rng;

/// A fixed-length crop site inside one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct CropRef {
    pub utt_id: String,
    pub offset_s: f64,
}

/// One (anchor, positive, negative) crop triple of a single speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletSpec {
    pub speaker_id: String,
    pub anchor: CropRef,
    pub positive: CropRef,
    pub negative: CropRef,
}

#[derive(Debug, Clone)]
struct UttEntry {
    utt_id: String,
    duration_s: f64,
}

#[derive(Debug, Clone)]
struct VideoEntry {
    video_id: String,
    utts: Vec<UttEntry>,
}

#[derive(Debug, Clone)]
struct SpeakerEntry {
    speaker_id: String,
    videos: Vec<VideoEntry>,
}

/// Reusable sampling pool: the eligible subset of a manifest, indexed by
/// speaker and video.
///
/// Eligible utterances are at least one segment long and in the requested
/// split; eligible speakers have at least two videos left after that filter
/// (a speaker with one video cannot supply a negative).
#[derive(Debug, Clone)]
pub struct TripletSampler {
    speakers: Vec<SpeakerEntry>,
    seg_len_s: f64,
}

impl TripletSampler {
    pub fn new(manifest: &Manifest, split: Option<Split>, seg_len_s: f64) -> Result<Self> {
        // Utterances are sorted by `speaker/video/utt` id, so one pass sees
        // each speaker and each video as a contiguous run.
        let mut speakers: Vec<SpeakerEntry> = Vec::new();
        for u in manifest.utterances() {
            if u.duration_s < seg_len_s || (split.is_some() && u.split != split) {
                continue;
            }
            let new_speaker = speakers
                .last()
                .is_none_or(|s| s.speaker_id != u.speaker_id);
            if new_speaker {
                speakers.push(SpeakerEntry {
                    speaker_id: u.speaker_id.clone(),
                    videos: Vec::new(),
                });
            }
            let videos = &mut speakers.last_mut().expect("speaker entry exists").videos;
            if videos.last().is_none_or(|v| v.video_id != u.video_id) {
                videos.push(VideoEntry {
                    video_id: u.video_id.clone(),
                    utts: Vec::new(),
                });
            }
            videos.last_mut().expect("video entry exists").utts.push(UttEntry {
                utt_id: u.utt_id.clone(),
                duration_s: u.duration_s,
            });
        }
        speakers.retain(|s| s.videos.len() >= 2);

        if speakers.is_empty() {
            return Err(Error::Sampling(
                "no multi-video speakers eligible for triplet sampling".into(),
            ));
        }
        Ok(TripletSampler {
            speakers,
            seg_len_s,
        })
    }

    /// Speakers that can actually be sampled.
    pub fn eligible_speakers(&self) -> usize {
        self.speakers.len()
    }

    /// Draws one batch of `n_speakers` distinct speakers' triplets.
    ///
    /// Identical pool and RNG state reproduce the identical batch; sampling
    /// consumes nothing but the passed RNG.
    pub fn sample_batch(&self, n_speakers: usize, rng: &mut ChaCha8Rng) -> Result<Vec<TripletSpec>> {
        if n_speakers < 2 {
            return Err(Error::Sampling(format!(
                "batch needs at least 2 speakers, requested {n_speakers}"
            )));
        }
        if n_speakers > self.speakers.len() {
            return Err(Error::Sampling(format!(
                "requested {n_speakers} speakers per batch, only {} eligible",
                self.speakers.len()
            )));
        }

        // Partial Fisher-Yates over speaker indices: first n_speakers slots.
        let mut order: Vec<usize> = (0..self.speakers.len()).collect();
        for i in 0..n_speakers {
            let j = i + rng.random_range(0..order.len() - i);
            order.swap(i, j);
        }

        let mut batch = Vec::with_capacity(n_speakers);
        for &si in &order[..n_speakers] {
            let speaker = &self.speakers[si];
            let anchor_vid = rng.random_range(0..speaker.videos.len());
            let mut negative_vid = rng.random_range(0..speaker.videos.len() - 1);
            if negative_vid >= anchor_vid {
                negative_vid += 1;
            }

            let anchor = self.crop(&speaker.videos[anchor_vid], rng);
            let positive = self.crop(&speaker.videos[anchor_vid], rng);
            let negative = self.crop(&speaker.videos[negative_vid], rng);
            batch.push(TripletSpec {
                speaker_id: speaker.speaker_id.clone(),
                anchor,
                positive,
                negative,
            });
        }
        Ok(batch)
    }

    fn crop(&self, video: &VideoEntry, rng: &mut ChaCha8Rng) -> CropRef {
        let utt = &video.utts[rng.random_range(0..video.utts.len())];
        let span = (utt.duration_s - self.seg_len_s).max(0.0);
        CropRef {
            utt_id: utt.utt_id.clone(),
            offset_s: rng.random::<f64>() * span,
        }
    }
}

/// One-shot batch sampling; builds the pool and draws from it.
pub fn sample_triplet_batch(
    manifest: &Manifest,
    split: Option<Split>,
    n_speakers: usize,
    seg_len_s: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TripletSpec>> {
    TripletSampler::new(manifest, split, seg_len_s)?.sample_batch(n_speakers, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::testutil::toy_manifest;
    use crate::rng::named_rng;

    #[test]
    fn triplets_satisfy_video_constraints_monte_carlo() {
        let m = toy_manifest(20, 4, 30, 3.0, None);
        let sampler = TripletSampler::new(&m, None, 2.0).unwrap();
        let mut rng = named_rng(11, "train/data");

        let mut total = 0usize;
        for _ in 0..1_000 {
            let batch = sampler.sample_batch(10, &mut rng).unwrap();
            assert_eq!(batch.len(), 10);
            for t in &batch {
                let a = m.utterance(&t.anchor.utt_id).unwrap();
                let p = m.utterance(&t.positive.utt_id).unwrap();
                let n = m.utterance(&t.negative.utt_id).unwrap();
                assert_eq!(a.speaker_id, t.speaker_id);
                assert_eq!(p.speaker_id, t.speaker_id);
                assert_eq!(n.speaker_id, t.speaker_id);
                assert_eq!(a.video_id, p.video_id, "anchor/positive share a video");
                assert_ne!(a.video_id, n.video_id, "negative is another video");
                for c in [&t.anchor, &t.positive, &t.negative] {
                    assert!(c.offset_s >= 0.0 && c.offset_s <= 1.0 + 1e-9);
                }
                total += 1;
            }
            // Distinct speakers within a batch.
            let mut ids: Vec<&str> = batch.iter().map(|t| t.speaker_id.as_str()).collect();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), 10);
        }
        assert_eq!(total, 10_000);
    }

    #[test]
    fn sampling_is_a_pure_function_of_rng_state() {
        let m = toy_manifest(8, 3, 4, 4.0, None);
        let sampler = TripletSampler::new(&m, None, 2.0).unwrap();
        let a = sampler.sample_batch(5, &mut named_rng(3, "train/data")).unwrap();
        let b = sampler.sample_batch(5, &mut named_rng(3, "train/data")).unwrap();
        let c = sampler.sample_batch(5, &mut named_rng(4, "train/data")).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn short_and_single_video_material_is_excluded() {
        // All utterances shorter than a segment: nothing eligible.
        let short = toy_manifest(4, 3, 2, 1.5, None);
        assert!(TripletSampler::new(&short, None, 2.0).is_err());

        // One video per speaker: no negatives exist.
        let single = toy_manifest(4, 1, 6, 3.0, None);
        let err = TripletSampler::new(&single, None, 2.0).unwrap_err();
        assert!(err.to_string().contains("no multi-video speakers"));
    }

    #[test]
    fn batch_size_bounds_are_enforced() {
        let m = toy_manifest(4, 2, 2, 3.0, None);
        let sampler = TripletSampler::new(&m, None, 2.0).unwrap();
        let mut rng = named_rng(0, "train/data");
        assert!(sampler.sample_batch(1, &mut rng).is_err());
        assert!(sampler.sample_batch(5, &mut rng).is_err());
        assert_eq!(sampler.sample_batch(4, &mut rng).unwrap().len(), 4);
    }

    #[test]
    fn split_filter_restricts_the_pool() {
        let m = toy_manifest(6, 2, 2, 3.0, Some(Split::DevIden));
        assert!(TripletSampler::new(&m, Some(Split::TestIden), 2.0).is_err());
        let sampler = TripletSampler::new(&m, Some(Split::DevIden), 2.0).unwrap();
        assert_eq!(sampler.eligible_speakers(), 6);
    }
}
