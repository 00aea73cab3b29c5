//! Deterministic synthetic corpus: toy "speakers" crossed with toy
//! "environments" so environment-adversarial behavior can be exercised at
//! desk scale.
//!
//! A speaker is a harmonic source: a fixed fundamental (spaced 9.2 Hz apart
//! across speakers, keeping sources well separated) shaped by a fixed
//! formant-like spectral envelope. An environment is a fixed FIR channel
//! drawn from a small prototype pool plus colored noise at a fixed
//! signal-to-noise ratio; one environment is applied to every utterance in
//! one video directory. Speaker traits and channel assignment come from
//! independent random streams, so the two factors are independent by
//! construction. Per-utterance randomness (jitter, vibrato, amplitude
//! modulation, phases, the noise realization) is derived from
//! (seed, speaker, video, utterance), making generation reproducible and
//! safely parallel.

use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::corpus::{scan_corpus, Manifest};
use crate::dsp::{convolve, windowed_sinc_lowpass, write_wav_pcm16};
use crate::error::{Error, Result};
use crate::rng::indexed_rng;

/// Number of distinct FIR channel prototypes in the pool.
const CHANNEL_POOL: usize = 6;

/// Output level: every utterance is scaled to this RMS before quantization.
const TARGET_RMS: f64 = 0.08;

/// Shape of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_speakers: usize,
    pub n_envs_per_speaker: usize,
    pub utts_per_env: usize,
    pub utt_len_s: f64,
    pub sample_rate_hz: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    /// The standard toy corpus: 20 speakers × 4 environments × 30 utterances.
    fn default() -> Self {
        SynthSpec {
            n_speakers: 20,
            n_envs_per_speaker: 4,
            utts_per_env: 30,
            utt_len_s: 3.0,
            sample_rate_hz: 16_000,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers == 0 || self.utts_per_env == 0 {
            return Err(Error::Synth("speaker and utterance counts must be ≥ 1".into()));
        }
        if self.n_envs_per_speaker < 2 {
            return Err(Error::Synth(
                "n_envs_per_speaker must be ≥ 2 so every speaker has cross-video pairs".into(),
            ));
        }
        if self.utt_len_s < 2.5 {
            return Err(Error::Synth(format!(
                "utt_len_s {} is too short; need ≥ 2.5 s so 2 s crops have slack",
                self.utt_len_s
            )));
        }
        if self.sample_rate_hz != 16_000 {
            return Err(Error::Synth(format!(
                "sample_rate_hz must be 16000, got {}",
                self.sample_rate_hz
            )));
        }
        Ok(())
    }

    pub fn n_utterances(&self) -> usize {
        self.n_speakers * self.n_envs_per_speaker * self.utts_per_env
    }
}

/// A speaker's fixed voice: fundamental plus formant-like envelope peaks.
struct Voice {
    f0_hz: f64,
    /// (center_hz, bandwidth_hz, gain) of each spectral peak.
    formants: [(f64, f64, f64); 3],
}

impl Voice {
    fn new(seed: u64, speaker: usize) -> Voice {
        let mut rng = indexed_rng(seed, "synth/speaker", &[speaker as u64]);
        let formants = [
            (
                rng.random_range(320.0..850.0),
                rng.random_range(80.0..140.0),
                rng.random_range(0.8..1.2),
            ),
            (
                rng.random_range(1_000.0..2_200.0),
                rng.random_range(110.0..190.0),
                rng.random_range(0.5..0.9),
            ),
            (
                rng.random_range(2_400.0..3_400.0),
                rng.random_range(150.0..260.0),
                rng.random_range(0.25..0.55),
            ),
        ];
        Voice {
            f0_hz: 105.0 + 9.2 * speaker as f64,
            formants,
        }
    }

    /// Spectral amplitude at frequency `f`: a gentle low tilt plus the peaks.
    fn envelope(&self, f: f64) -> f64 {
        let tilt = 0.25 / (1.0 + (f / 900.0).powi(2)).sqrt();
        let peaks: f64 = self
            .formants
            .iter()
            .map(|&(c, b, g)| g * (-(f - c).powi(2) / (2.0 * b * b)).exp())
            .sum();
        tilt + peaks
    }
}

/// A recording environment: FIR channel, noise color, and noise level.
struct Channel {
    taps: Vec<f32>,
    noise_taps: Vec<f32>,
    snr_db: f64,
}

impl Channel {
    /// Builds the environment for (speaker, video). The prototype identity
    /// comes from a per-speaker permutation of the pool so a speaker's
    /// environments are distinct; parameters are jittered per environment.
    fn new(seed: u64, speaker: usize, video: usize, sample_rate_hz: u32) -> Channel {
        let mut perm_rng = indexed_rng(seed, "synth/envset", &[speaker as u64]);
        let mut pool: Vec<usize> = (0..CHANNEL_POOL).collect();
        for i in 0..CHANNEL_POOL - 1 {
            let j = i + perm_rng.random_range(0..CHANNEL_POOL - i);
            pool.swap(i, j);
        }
        let prototype = pool[video % CHANNEL_POOL];

        let mut rng = indexed_rng(seed, "synth/env", &[speaker as u64, video as u64]);
        let taps = match prototype {
            0 => windowed_sinc_lowpass(rng.random_range(2_100.0..2_900.0), sample_rate_hz, 63),
            1 => windowed_sinc_lowpass(rng.random_range(5_000.0..6_000.0), sample_rate_hz, 63),
            2 => {
                // Thinned low end: unit impulse minus most of a lowpass.
                let lp = windowed_sinc_lowpass(rng.random_range(1_000.0..1_400.0), sample_rate_hz, 63);
                let g = rng.random_range(0.85..0.95) as f32;
                centered_impulse_minus(&lp, g)
            }
            3 => {
                // Brightened: unit impulse plus a scaled high-frequency residue.
                let lp = windowed_sinc_lowpass(rng.random_range(1_800.0..2_400.0), sample_rate_hz, 63);
                let g = rng.random_range(0.5..0.7) as f32;
                let mut taps = centered_impulse_minus(&lp, g);
                let mid = taps.len() / 2;
                taps[mid] += g;
                taps
            }
            4 => {
                let delay = rng.random_range(60..140);
                let g = rng.random_range(0.35..0.55) as f32;
                let mut taps = vec![0.0f32; delay + 1];
                taps[0] = 1.0;
                taps[delay] = g;
                taps
            }
            _ => {
                let d1 = rng.random_range(40..90);
                let d2 = rng.random_range(150..260);
                let g1 = rng.random_range(0.25..0.45) as f32;
                let g2 = rng.random_range(0.25..0.45) as f32;
                let mut taps = vec![0.0f32; d2 + 1];
                taps[0] = 1.0;
                taps[d1] = g1;
                taps[d2] = g2;
                taps
            }
        };
        let noise_taps =
            windowed_sinc_lowpass(rng.random_range(800.0..5_500.0), sample_rate_hz, 31);
        Channel {
            taps,
            noise_taps,
            snr_db: rng.random_range(15.0..25.0),
        }
    }
}

/// `g`-scaled spectral complement: a unit impulse at the filter's center tap
/// minus `g` times the filter.
fn centered_impulse_minus(lowpass: &[f32], g: f32) -> Vec<f32> {
    let mut taps: Vec<f32> = lowpass.iter().map(|&t| -g * t).collect();
    let mid = taps.len() / 2;
    taps[mid] += 1.0;
    taps
}

fn rms(x: &[f32]) -> f64 {
    (x.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Renders one utterance: harmonic source with per-utterance jitter, vibrato,
/// and amplitude modulation, then the environment channel and noise.
fn render_utterance(spec: &SynthSpec, voice: &Voice, channel: &Channel, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let sr = f64::from(spec.sample_rate_hz);
    let n = (spec.utt_len_s * sr).round() as usize;

    let f0 = voice.f0_hz * (1.0 + rng.random_range(-0.005..0.005));
    let vib_rate = rng.random_range(4.5..6.0);
    let vib_depth = rng.random_range(0.002..0.004);
    let vib_phase = rng.random_range(0.0..TAU);
    let am_syll_rate = rng.random_range(2.0..3.5);
    let am_syll_phase = rng.random_range(0.0..TAU);
    let am_slow_rate = rng.random_range(0.6..1.1);
    let am_slow_phase = rng.random_range(0.0..TAU);

    // Harmonics up to 4 kHz, weighted by the voice envelope with a mild
    // roll-off in harmonic order.
    let k_max = ((4_000.0 / f0).floor() as usize).max(3);
    let amps: Vec<f64> = (1..=k_max)
        .map(|k| voice.envelope(k as f64 * f0) / (k as f64).powf(0.35))
        .collect();
    let mut phasors: Vec<Complex64> = (0..k_max)
        .map(|_| Complex64::cis(rng.random_range(0.0..TAU)))
        .collect();

    let mut src = vec![0.0f32; n];
    for (i, out) in src.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let f_t = f0 * (1.0 + vib_depth * (TAU * vib_rate * t + vib_phase).sin());
        let step = Complex64::cis(TAU * f_t / sr);
        let mut harmonic_step = Complex64::new(1.0, 0.0);
        let mut acc = 0.0f64;
        for (z, &a) in phasors.iter_mut().zip(&amps) {
            harmonic_step *= step;
            *z *= harmonic_step;
            acc += a * z.im;
        }
        // Phase accumulation drifts off the unit circle; renormalize often
        // enough that the drift stays far below quantization.
        if i % 1_024 == 1_023 {
            for z in &mut phasors {
                *z /= z.norm();
            }
        }
        let am = (0.75 + 0.25 * (TAU * am_syll_rate * t + am_syll_phase).sin())
            * (0.85 + 0.15 * (TAU * am_slow_rate * t + am_slow_phase).sin());
        *out = (acc * am) as f32;
    }

    let mut signal = convolve(&src, &channel.taps);

    let white: Vec<f32> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
    let noise = convolve(&white, &channel.noise_taps);
    let noise_gain = rms(&signal) * 10f64.powf(-channel.snr_db / 20.0) / rms(&noise).max(1e-12);
    for (s, w) in signal.iter_mut().zip(&noise) {
        *s += (f64::from(*w) * noise_gain) as f32;
    }

    let gain = (TARGET_RMS / rms(&signal).max(1e-12)) as f32;
    for s in &mut signal {
        *s *= gain;
    }
    signal
}

/// Generates the corpus under `out_dir` (layout `speaker/video/utterance.wav`
/// plus a `synth-spec.json` provenance record) and returns the manifest from
/// rescanning it.
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;

    let voices: Vec<Voice> = (0..spec.n_speakers).map(|s| Voice::new(spec.seed, s)).collect();
    let channels: Vec<Vec<Channel>> = (0..spec.n_speakers)
        .map(|s| {
            (0..spec.n_envs_per_speaker)
                .map(|v| Channel::new(spec.seed, s, v, spec.sample_rate_hz))
                .collect()
        })
        .collect();

    let mut tasks = Vec::with_capacity(spec.n_utterances());
    for s in 0..spec.n_speakers {
        for v in 0..spec.n_envs_per_speaker {
            let dir = out_dir.join(format!("spk{s:03}")).join(format!("env{v:02}"));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for u in 0..spec.utts_per_env {
                tasks.push((s, v, u, dir.join(format!("utt{u:03}.wav"))));
            }
        }
    }

    tasks.par_iter().try_for_each(|(s, v, u, path)| {
        let mut rng = indexed_rng(spec.seed, "synth/utt", &[*s as u64, *v as u64, *u as u64]);
        let samples = render_utterance(spec, &voices[*s], &channels[*s][*v], &mut rng);
        write_wav_pcm16(path, &samples, spec.sample_rate_hz)
    })?;

    let record = serde_json::json!({
        "format": "envadv synth corpus v1",
        "spec": spec,
    });
    let spec_path = out_dir.join("synth-spec.json");
    let body = serde_json::to_vec_pretty(&record).map_err(|e| Error::json("synth-spec", e))?;
    std::fs::write(&spec_path, body).map_err(|e| Error::io(&spec_path, e))?;

    let scan = scan_corpus(out_dir)?;
    if let Some((path, reason)) = scan.skipped.first() {
        return Err(Error::Synth(format!(
            "generated corpus failed its own rescan: {} ({reason})",
            path.display()
        )));
    }
    Ok(scan.manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{self, DspConfig, FeatureKind};
    use sha2::{Digest, Sha256};

    fn tiny_spec(seed: u64) -> SynthSpec {
        SynthSpec {
            n_speakers: 2,
            n_envs_per_speaker: 2,
            utts_per_env: 2,
            utt_len_s: 2.5,
            seed,
            ..SynthSpec::default()
        }
    }

    fn corpus_digest(root: &Path) -> String {
        let mut hasher = Sha256::new();
        let mut paths: Vec<_> = walkdir::WalkDir::new(root)
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file())
            .map(|e| e.into_path())
            .collect();
        paths.sort();
        for p in paths {
            hasher.update(p.strip_prefix(root).unwrap().to_string_lossy().as_bytes());
            hasher.update(std::fs::read(&p).unwrap());
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(SynthSpec { n_envs_per_speaker: 1, ..tiny_spec(0) }.validate().is_err());
        assert!(SynthSpec { utt_len_s: 2.0, ..tiny_spec(0) }.validate().is_err());
        assert!(SynthSpec { sample_rate_hz: 8_000, ..tiny_spec(0) }.validate().is_err());
        assert!(SynthSpec { n_speakers: 0, ..tiny_spec(0) }.validate().is_err());
        assert!(tiny_spec(0).validate().is_ok());
    }

    #[test]
    fn generation_is_bitwise_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        generate(&tiny_spec(5), &a).unwrap();
        generate(&tiny_spec(5), &b).unwrap();
        assert_eq!(corpus_digest(&a), corpus_digest(&b));

        let c = dir.path().join("c");
        generate(&tiny_spec(6), &c).unwrap();
        assert_ne!(corpus_digest(&a), corpus_digest(&c));
    }

    #[test]
    fn count_rescan_and_crop_frames() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_speakers: 3,
            n_envs_per_speaker: 2,
            utts_per_env: 4,
            utt_len_s: 2.7,
            ..SynthSpec::default()
        };
        let manifest = generate(&spec, dir.path()).unwrap();
        assert_eq!(manifest.len(), 24);
        assert_eq!(manifest.n_speakers(), 3);

        let rescan = scan_corpus(dir.path()).unwrap();
        assert_eq!(rescan.manifest.utterances(), manifest.utterances());

        // Every file loads and supports a full 2 s crop.
        let cfg = DspConfig::default();
        for u in manifest.utterances().iter().take(3) {
            let wav = dsp::load_waveform(&u.path, cfg.stereo_policy, cfg.sample_rate_hz).unwrap();
            assert!(wav.samples.len() >= cfg.segment_samples());
            assert!(cfg.frames_per_segment() >= 198);
        }
    }

    /// Mean filterbank features must separate a speaker's environments: a
    /// nearest-centroid (linear) classifier trained on half the utterances
    /// per environment should label the held-out half correctly.
    #[test]
    fn environments_are_linearly_separable_within_speakers() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_speakers: 4,
            n_envs_per_speaker: 3,
            utts_per_env: 10,
            utt_len_s: 2.5,
            seed: 11,
            ..SynthSpec::default()
        };
        let manifest = generate(&spec, dir.path()).unwrap();
        let cfg = DspConfig::default();

        let mut correct = 0usize;
        let mut total = 0usize;
        for s in 0..spec.n_speakers {
            let speaker = format!("spk{s:03}");
            // mean fbank per utterance, grouped by environment
            let mut by_env: Vec<Vec<Vec<f64>>> = vec![Vec::new(); spec.n_envs_per_speaker];
            for u in manifest.utterances().iter().filter(|u| u.speaker_id == speaker) {
                let wav =
                    dsp::load_waveform(&u.path, cfg.stereo_policy, cfg.sample_rate_hz).unwrap();
                let feats = dsp::extract(&wav.samples, &cfg, FeatureKind::Fbank40).unwrap();
                let t = feats.values.ncols() as f64;
                let mean: Vec<f64> = (0..feats.values.nrows())
                    .map(|r| feats.values.row(r).iter().map(|&x| f64::from(x)).sum::<f64>() / t)
                    .collect();
                let env: usize = u.video_id.trim_start_matches("env").parse().unwrap();
                by_env[env].push(mean);
            }
            let centroids: Vec<Vec<f64>> = by_env
                .iter()
                .map(|utts| {
                    let train: Vec<&Vec<f64>> = utts.iter().step_by(2).collect();
                    let mut c = vec![0.0; train[0].len()];
                    for u in &train {
                        for (ci, &x) in c.iter_mut().zip(u.iter()) {
                            *ci += x;
                        }
                    }
                    c.iter_mut().for_each(|x| *x /= train.len() as f64);
                    c
                })
                .collect();
            for (env, utts) in by_env.iter().enumerate() {
                for held_out in utts.iter().skip(1).step_by(2) {
                    let nearest = centroids
                        .iter()
                        .enumerate()
                        .min_by(|(_, a), (_, b)| {
                            let da: f64 = a.iter().zip(held_out.iter()).map(|(x, y)| (x - y).powi(2)).sum();
                            let db: f64 = b.iter().zip(held_out.iter()).map(|(x, y)| (x - y).powi(2)).sum();
                            da.partial_cmp(&db).unwrap()
                        })
                        .map(|(i, _)| i)
                        .unwrap();
                    correct += usize::from(nearest == env);
                    total += 1;
                }
            }
        }
        let accuracy = correct as f64 / total as f64;
        assert!(accuracy > 0.9, "environment probe accuracy {accuracy}");
    }
}
