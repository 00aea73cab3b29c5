//! Evaluation: closed-set identification, pairwise verification scoring,
//! exact equal-error-rate computation, the environment probe, and a software
//! channel-perturbation harness.
//!
//! Every operation here is read-only with respect to the model and the
//! manifest; scoring takes `&Model` throughout. Verification follows the
//! ten-crop protocol: ten evenly spaced fixed-length crops per utterance,
//! one embedding each, and the mean of all \(10 \times 10\) cross distances
//! as the pair's score (lower means more similar). Identification averages
//! the class logits over the same ten crops before ranking.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Manifest, Split, TrialList, UtteranceRef};
use crate::dsp::{convolve, crop_offsets, load_waveform, segment_features, FeatureExtractor};
use crate::error::{Error, Result};
use crate::nets::{l2_normalize_rows, Model};
use crate::rng::{indexed_rng, stream_id};

/// Full-scale reference results for the Thin ResNet-34 + SAP configuration
/// on the 1,211-speaker benchmark, comparing the plain classifier (α = 0)
/// against adversarial training at α = 10. Desk-scale runs cannot reproduce
/// these numbers; the acceptance suite checks that toy-scale training moves
/// every metric in the same direction.
pub mod reference {
    /// Identification top-1, α = 0 → α = 10.
    pub const IDEN_TOP1_BASELINE: f64 = 0.8368;
    pub const IDEN_TOP1_ADVERSARIAL: f64 = 0.8900;
    /// Identification top-5 at α = 10.
    pub const IDEN_TOP5_ADVERSARIAL: f64 = 0.9594;
    /// Clean verification EER, α = 0 → α = 10 (lower is better).
    pub const VERIF_EER_BASELINE: f64 = 0.0571;
    pub const VERIF_EER_ADVERSARIAL: f64 = 0.0526;
    /// Environment-probe EER, α = 0 → α = 10; this one should RISE, since a
    /// higher probe error means less recording-condition leakage.
    pub const ENV_EER_BASELINE: f64 = 0.2043;
    pub const ENV_EER_ADVERSARIAL: f64 = 0.2574;
    /// Replay-channel verification EER, α = 0 → α = 10.
    pub const REPLAY_EER_BASELINE: f64 = 0.1314;
    pub const REPLAY_EER_ADVERSARIAL: f64 = 0.1056;
}

/// Which embedding scores a verification trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedKind {
    /// The pooled trunk embedding, straight off the classification model.
    Pooled,
    /// The pooled embedding passed through the trained verification head.
    VerifHead,
}

/// Distance between two embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// Euclidean distance between L2-normalized embeddings (monotone in
    /// cosine distance). The default.
    NormalizedEuclidean,
    /// Euclidean distance between raw embeddings.
    Euclidean,
}

fn default_n_crops() -> usize {
    10
}
fn default_metric() -> DistanceMetric {
    DistanceMetric::NormalizedEuclidean
}
fn default_env_probe_space() -> EmbedKind {
    EmbedKind::Pooled
}

/// Scoring-protocol settings shared by the verification-style evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Temporal crops per utterance.
    pub n_crops: usize,
    pub metric: DistanceMetric,
    /// Embedding the environment probe scores with; the probe asks how much
    /// environment the *speaker* representation leaks, so it defaults to the
    /// pooled embedding rather than the verification head.
    pub env_probe_space: EmbedKind,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_crops: default_n_crops(),
            metric: default_metric(),
            env_probe_space: default_env_probe_space(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_crops == 0 {
            return Err(Error::Config("n_crops must be at least 1".into()));
        }
        Ok(())
    }
}

/// A fixed FIR channel plus additive white noise, applied to waveforms
/// before feature extraction. The defaults are a bitwise no-op.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbSpec {
    /// Channel impulse response; `[1.0]` passes audio through unchanged.
    pub fir_taps: Vec<f32>,
    /// Signal-to-noise ratio of added white Gaussian noise; `None` adds none.
    pub snr_db: Option<f64>,
    /// Seeds the per-utterance noise streams.
    pub noise_seed: u64,
}

impl Default for PerturbSpec {
    fn default() -> Self {
        PerturbSpec {
            fir_taps: vec![1.0],
            snr_db: None,
            noise_seed: 0,
        }
    }
}

impl PerturbSpec {
    pub fn validate(&self) -> Result<()> {
        if self.fir_taps.is_empty() {
            return Err(Error::Config("fir_taps must not be empty".into()));
        }
        if !self.fir_taps.iter().all(|t| t.is_finite()) {
            return Err(Error::Config("fir_taps must be finite".into()));
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return Err(Error::Config(format!("snr_db must be finite, got {snr}")));
            }
        }
        Ok(())
    }

    /// Channel-filters and noises one utterance's samples. Noise draws come
    /// from a stream keyed by (seed, utterance id), so the result does not
    /// depend on evaluation order.
    pub fn apply(&self, samples: &[f32], utt_id: &str) -> Vec<f32> {
        let filtered = convolve(samples, &self.fir_taps);
        let Some(snr_db) = self.snr_db else {
            return filtered;
        };
        let power: f64 = filtered.iter().map(|&s| f64::from(s).powi(2)).sum::<f64>()
            / filtered.len().max(1) as f64;
        let noise_power = power / 10f64.powf(snr_db / 10.0);
        let sigma = noise_power.sqrt();
        let mut rng = indexed_rng(self.noise_seed, "eval/perturb", &[stream_id(utt_id, &[])]);
        filtered
            .into_iter()
            .map(|s| {
                let n: f64 = rng.sample(StandardNormal);
                s + (sigma * n) as f32
            })
            .collect()
    }
}

/// Crop-level embedding machinery with a per-utterance cache, so a trial
/// list that reuses utterances embeds each one once.
pub struct Embedder<'a> {
    model: &'a Model<f32>,
    extractor: &'a FeatureExtractor,
    kind: EmbedKind,
    cfg: EvalConfig,
    perturb: Option<&'a PerturbSpec>,
    cache: std::cell::RefCell<HashMap<String, std::sync::Arc<Array2<f32>>>>,
}

impl<'a> Embedder<'a> {
    pub fn new(
        model: &'a Model<f32>,
        extractor: &'a FeatureExtractor,
        kind: EmbedKind,
        cfg: EvalConfig,
    ) -> Self {
        Embedder {
            model,
            extractor,
            kind,
            cfg,
            perturb: None,
            cache: std::cell::RefCell::new(HashMap::new()),
        }
    }

    /// Applies a waveform perturbation before feature extraction. The
    /// feature cache is bypassed: perturbed audio never matches cached clean
    /// features.
    pub fn with_perturbation(mut self, spec: &'a PerturbSpec) -> Self {
        self.perturb = Some(spec);
        self
    }

    /// One embedding per crop, `[n_crops, 512]`, in the scoring metric's
    /// space (rows already normalized when the metric asks for it).
    pub fn utt_embeddings(&self, utt: &UtteranceRef) -> Result<std::sync::Arc<Array2<f32>>> {
        if let Some(hit) = self.cache.borrow().get(&utt.utt_id) {
            return Ok(hit.clone());
        }
        let seg = self.extractor.cfg.segment_len_s;
        if utt.duration_s < seg {
            return Err(Error::Eval(format!(
                "utterance {} is {:.2} s, shorter than the {seg:.2} s crop",
                utt.utt_id, utt.duration_s
            )));
        }
        let offsets = crop_offsets(utt.duration_s, seg, self.cfg.n_crops);
        let feats: Vec<Result<Array2<f32>>> = match self.perturb {
            None => offsets
                .par_iter()
                .map(|&off| self.extractor.segment(&utt.utt_id, &utt.path, off))
                .collect(),
            Some(spec) => {
                let cfg = &self.extractor.cfg;
                let wave = load_waveform(&utt.path, cfg.stereo_policy, cfg.sample_rate_hz)?;
                let samples = spec.apply(&wave.samples, &utt.utt_id);
                offsets
                    .par_iter()
                    .map(|&off| segment_features(&samples, cfg, self.extractor.kind, off))
                    .collect()
            }
        };
        let mut stacked: Option<Array3<f32>> = None;
        for (i, f) in feats.iter().enumerate() {
            let f = f
                .as_ref()
                .map_err(|e| Error::Eval(format!("{}: {e}", utt.utt_id)))?;
            let arr = stacked.get_or_insert_with(|| {
                Array3::zeros((offsets.len(), f.dim().0, f.dim().1))
            });
            arr.index_axis_mut(Axis(0), i).assign(f);
        }
        let pooled = self.model.embed(&stacked.expect("at least one crop"))?;
        let emb = match self.kind {
            EmbedKind::Pooled => pooled,
            EmbedKind::VerifHead => self.model.verif_head.infer(&pooled),
        };
        let emb = match self.cfg.metric {
            DistanceMetric::NormalizedEuclidean => l2_normalize_rows(&emb).0,
            DistanceMetric::Euclidean => emb,
        };
        let emb = std::sync::Arc::new(emb);
        self.cache
            .borrow_mut()
            .insert(utt.utt_id.clone(), emb.clone());
        Ok(emb)
    }

    /// Mean distance over the full crop-pair grid; lower means more similar.
    pub fn score_pair(&self, a: &UtteranceRef, b: &UtteranceRef) -> Result<f64> {
        let ea = self.utt_embeddings(a)?;
        let eb = self.utt_embeddings(b)?;
        Ok(mean_pairwise_distance(&ea, &eb))
    }
}

/// Mean Euclidean distance between every row of `a` and every row of `b`.
pub fn mean_pairwise_distance(a: &Array2<f32>, b: &Array2<f32>) -> f64 {
    assert_eq!(a.dim().1, b.dim().1, "embedding widths differ");
    let mut sum = 0.0f64;
    for ra in a.rows() {
        for rb in b.rows() {
            let d2: f64 = ra
                .iter()
                .zip(rb.iter())
                .map(|(&x, &y)| f64::from(x - y).powi(2))
                .sum();
            sum += d2.sqrt();
        }
    }
    sum / (a.dim().0 * b.dim().0) as f64
}

/// One scored trial: `same` is the ground-truth label, `score` a distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreRow {
    pub index: usize,
    pub same: bool,
    pub score: f64,
}

/// Scored trials, writable as `index label score` lines.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreFile {
    pub rows: Vec<ScoreRow>,
}

impl ScoreFile {
    /// Writes one `index label score` line per trial. Scores are printed
    /// with 17 significant digits, enough for an exact f64 round trip.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(self.rows.len() * 40);
        for r in &self.rows {
            let label = if r.same { "target" } else { "nontarget" };
            out.push_str(&format!("{} {} {:.16e}\n", r.index, label, r.score));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<ScoreFile> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: &str| Error::ManifestParse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: message.into(),
            };
            let mut parts = line.split_whitespace();
            let (Some(index), Some(label), Some(score), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(parse_err("expected `index label score`"));
            };
            let index: usize = index.parse().map_err(|_| parse_err("bad trial index"))?;
            let same = match label {
                "target" | "1" => true,
                "nontarget" | "0" => false,
                _ => return Err(parse_err("label must be target/nontarget")),
            };
            let score: f64 = score.parse().map_err(|_| parse_err("bad score"))?;
            if !score.is_finite() {
                return Err(parse_err("score must be finite"));
            }
            rows.push(ScoreRow { index, same, score });
        }
        Ok(ScoreFile { rows })
    }

    fn labeled_scores(&self) -> Vec<(f64, bool)> {
        self.rows.iter().map(|r| (r.score, r.same)).collect()
    }
}

/// Equal error rate of distance scores: the operating point where the
/// false-accept rate (nontarget pairs at or under the threshold) equals the
/// false-reject rate (target pairs above it), linearly interpolated between
/// the two adjacent points of the threshold sweep that bracket the crossing.
///
/// The result depends only on the ordering of scores and the label counts,
/// so any strictly monotone transform of the scores leaves it unchanged.
pub fn compute_eer(scores: &ScoreFile) -> Result<f64> {
    compute_eer_from(&scores.labeled_scores())
}

/// [`compute_eer`] over bare (distance, is-target) pairs.
pub fn compute_eer_from(scores: &[(f64, bool)]) -> Result<f64> {
    let n_same = scores.iter().filter(|(_, same)| *same).count();
    let n_diff = scores.len() - n_same;
    if n_same == 0 || n_diff == 0 {
        return Err(Error::Eval(format!(
            "equal error rate needs both labels; got {n_same} target and {n_diff} nontarget trials"
        )));
    }
    for (s, _) in scores {
        if !s.is_finite() {
            return Err(Error::Eval("scores must be finite".into()));
        }
    }

    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));

    // Sweep the threshold upward over distinct score values; before any
    // acceptance FAR = 0 and FRR = 1.
    let mut far_prev = 0.0f64;
    let mut frr_prev = 1.0f64;
    let mut accepted_same = 0usize;
    let mut accepted_diff = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 {
                accepted_same += 1;
            } else {
                accepted_diff += 1;
            }
            i += 1;
        }
        let far = accepted_diff as f64 / n_diff as f64;
        let frr = 1.0 - accepted_same as f64 / n_same as f64;
        if far >= frr {
            return Ok(interpolate_crossing(far_prev, frr_prev, far, frr));
        }
        far_prev = far;
        frr_prev = frr;
    }
    // FAR reaches 1 and FRR reaches 0 at the last threshold, so the crossing
    // is always found inside the loop.
    unreachable!("threshold sweep must cross far >= frr");
}

/// Linear interpolation between operating points (far1, frr1) and
/// (far2, frr2), where the first has far <= frr and the second far >= frr.
fn interpolate_crossing(far1: f64, frr1: f64, far2: f64, frr2: f64) -> f64 {
    let gap1 = frr1 - far1;
    let gap2 = far2 - frr2;
    let denom = gap1 + gap2;
    if denom <= 0.0 {
        // Both gaps zero: the segment lies on the diagonal.
        return (far2 + frr2) / 2.0;
    }
    let t = gap1 / denom;
    far1 + t * (far2 - far1)
}

/// Reference O(n^2) equal error rate: recomputes FAR/FRR from scratch at
/// every distinct threshold. Slow but obviously correct; the fast sweep is
/// tested against it.
pub fn compute_eer_brute_force(scores: &[(f64, bool)]) -> Result<f64> {
    let n_same = scores.iter().filter(|(_, same)| *same).count();
    let n_diff = scores.len() - n_same;
    if n_same == 0 || n_diff == 0 {
        return Err(Error::Eval("both labels required".into()));
    }
    let mut thresholds: Vec<f64> = scores.iter().map(|(s, _)| *s).collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    thresholds.dedup();

    let rates = |thr: f64| {
        let mut fa = 0usize;
        let mut fr = 0usize;
        for &(s, same) in scores {
            if same && s > thr {
                fr += 1;
            }
            if !same && s <= thr {
                fa += 1;
            }
        }
        (fa as f64 / n_diff as f64, fr as f64 / n_same as f64)
    };

    let mut far_prev = 0.0f64;
    let mut frr_prev = 1.0f64;
    for &thr in &thresholds {
        let (far, frr) = rates(thr);
        if far >= frr {
            return Ok(interpolate_crossing(far_prev, frr_prev, far, frr));
        }
        far_prev = far;
        frr_prev = frr;
    }
    unreachable!("threshold sweep must cross far >= frr");
}

/// Scores every trial in a list. Trial order is preserved in the output;
/// each row's index is its position in the input list.
pub fn score_trials(
    embedder: &Embedder<'_>,
    manifest: &Manifest,
    trials: &TrialList,
) -> Result<ScoreFile> {
    if trials.trials.is_empty() {
        return Err(Error::Trials("empty trial list".into()));
    }
    let mut rows = Vec::with_capacity(trials.trials.len());
    for (index, t) in trials.trials.iter().enumerate() {
        let utt = |id: &str| {
            manifest
                .utterance(id)
                .ok_or_else(|| Error::Trials(format!("trial utterance {id} not in manifest")))
        };
        let score = embedder.score_pair(utt(&t.utt_a)?, utt(&t.utt_b)?)?;
        rows.push(ScoreRow {
            index,
            same: t.label == 1,
            score,
        });
    }
    Ok(ScoreFile { rows })
}

/// True when `label` ranks among the `k` best logits (ties resolve toward
/// lower class indices, matching a stable argsort).
pub fn topk_hit(logits: &Array1<f32>, label: usize, k: usize) -> bool {
    let target = logits[label];
    // Classes strictly better, plus earlier-indexed ties, fill slots first.
    let better = logits
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > target || (v == target && j < label))
        .count();
    better < k
}

/// Identification accuracy summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdenResult {
    pub top1: f64,
    pub top5: f64,
    pub n_scored: usize,
    /// Utterances shorter than one crop, skipped rather than scored.
    pub n_skipped: usize,
}

/// Closed-set identification over the test-identification split: average
/// the class logits over ten evenly spaced crops, then rank.
pub fn eval_identification(
    model: &Model<f32>,
    manifest: &Manifest,
    extractor: &FeatureExtractor,
    cfg: &EvalConfig,
) -> Result<IdenResult> {
    cfg.validate()?;
    let utts = manifest.split_utterances(Split::TestIden);
    if utts.is_empty() {
        return Err(Error::Eval("manifest has no test_iden utterances".into()));
    }
    let seg = extractor.cfg.segment_len_s;
    let mut hits1 = 0usize;
    let mut hits5 = 0usize;
    let mut n_scored = 0usize;
    let mut n_skipped = 0usize;
    for u in utts {
        if u.duration_s < seg {
            n_skipped += 1;
            continue;
        }
        let label = manifest
            .speaker_label(&u.speaker_id)
            .ok_or_else(|| Error::Eval(format!("speaker {} unknown", u.speaker_id)))?;
        let offsets = crop_offsets(u.duration_s, seg, cfg.n_crops);
        let feats: Vec<Result<Array2<f32>>> = offsets
            .par_iter()
            .map(|&off| extractor.segment(&u.utt_id, &u.path, off))
            .collect();
        let mut stacked: Option<Array3<f32>> = None;
        for (i, f) in feats.iter().enumerate() {
            let f = f
                .as_ref()
                .map_err(|e| Error::Eval(format!("{}: {e}", u.utt_id)))?;
            let arr = stacked.get_or_insert_with(|| {
                Array3::zeros((offsets.len(), f.dim().0, f.dim().1))
            });
            arr.index_axis_mut(Axis(0), i).assign(f);
        }
        let emb = model.embed(&stacked.expect("at least one crop"))?;
        let logits = model.speaker_head.infer(&emb);
        let mean = logits.mean_axis(Axis(0)).expect("non-empty rows");
        if topk_hit(&mean, label, 1) {
            hits1 += 1;
        }
        if topk_hit(&mean, label, 5) {
            hits5 += 1;
        }
        n_scored += 1;
    }
    if n_scored == 0 {
        return Err(Error::Eval(
            "every test_iden utterance is shorter than one crop".into(),
        ));
    }
    Ok(IdenResult {
        top1: hits1 as f64 / n_scored as f64,
        top5: hits5 as f64 / n_scored as f64,
        n_scored,
        n_skipped,
    })
}

/// Verification equal error rate over a trial list, plus the score file.
pub fn eval_verification(
    model: &Model<f32>,
    manifest: &Manifest,
    extractor: &FeatureExtractor,
    trials: &TrialList,
    kind: EmbedKind,
    cfg: &EvalConfig,
) -> Result<(f64, ScoreFile)> {
    cfg.validate()?;
    let embedder = Embedder::new(model, extractor, kind, *cfg);
    let scores = score_trials(&embedder, manifest, trials)?;
    let eer = compute_eer(&scores)?;
    Ok((eer, scores))
}

/// Environment probe: how well speaker-embedding distances separate
/// same-video from different-video pairs of one speaker. Higher is better
/// here; it means the embedding retains less of the recording condition.
pub fn eval_env_probe(
    model: &Model<f32>,
    manifest: &Manifest,
    extractor: &FeatureExtractor,
    trials: &TrialList,
    cfg: &EvalConfig,
) -> Result<(f64, ScoreFile)> {
    eval_verification(model, manifest, extractor, trials, cfg.env_probe_space, cfg)
}

/// Verification under a waveform perturbation, reported alongside the clean
/// result: (clean EER, perturbed EER, perturbed scores).
pub fn channel_perturb_eval(
    model: &Model<f32>,
    manifest: &Manifest,
    extractor: &FeatureExtractor,
    trials: &TrialList,
    kind: EmbedKind,
    cfg: &EvalConfig,
    spec: &PerturbSpec,
) -> Result<(f64, f64, ScoreFile)> {
    cfg.validate()?;
    spec.validate()?;
    let (clean_eer, _) = eval_verification(model, manifest, extractor, trials, kind, cfg)?;
    let embedder = Embedder::new(model, extractor, kind, *cfg).with_perturbation(spec);
    let scores = score_trials(&embedder, manifest, trials)?;
    let eer = compute_eer(&scores)?;
    Ok((clean_eer, eer, scores))
}

/// What a report describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTask {
    Iden,
    Verif,
    EnvProbe,
    Perturb,
}

impl EvalTask {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalTask::Iden => "iden",
            EvalTask::Verif => "verif",
            EvalTask::EnvProbe => "env_probe",
            EvalTask::Perturb => "perturb",
        }
    }
}

/// One evaluation's results, emitted as a table or key=value lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: EvalTask,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub eer: Option<f64>,
    /// EER under the perturbation, for the perturb task.
    pub eer_perturbed: Option<f64>,
    pub n_trials: usize,
    pub n_skipped: usize,
    pub config_hash: String,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: Option<f64>| -> Result<()> {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Eval(format!("{name} {v} outside [0, 1]")));
                }
            }
            Ok(())
        };
        unit("top1", self.top1)?;
        unit("top5", self.top5)?;
        unit("eer", self.eer)?;
        unit("eer_perturbed", self.eer_perturbed)?;
        if let (Some(t1), Some(t5)) = (self.top1, self.top5) {
            if t1 > t5 {
                return Err(Error::Eval(format!("top1 {t1} exceeds top5 {t5}")));
            }
        }
        Ok(())
    }

    /// Machine-parsable `key=value` lines, one metric per line.
    pub fn kv_lines(&self) -> Vec<String> {
        let mut lines = vec![
            format!("task={}", self.task.as_str()),
            format!("n_trials={}", self.n_trials),
            format!("n_skipped={}", self.n_skipped),
            format!("config_hash={}", self.config_hash),
        ];
        let mut push = |k: &str, v: Option<f64>| {
            if let Some(v) = v {
                lines.push(format!("{k}={v:.6}"));
            }
        };
        push("top1", self.top1);
        push("top5", self.top5);
        push("eer", self.eer);
        push("eer_perturbed", self.eer_perturbed);
        lines
    }

    /// Two-column human-readable table.
    pub fn table(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("task".into(), self.task.as_str().into()),
            ("trials".into(), self.n_trials.to_string()),
        ];
        if self.n_skipped > 0 {
            rows.push(("skipped".into(), self.n_skipped.to_string()));
        }
        let mut pct = |name: &str, v: Option<f64>| {
            if let Some(v) = v {
                rows.push((name.into(), format!("{:.2}%", v * 100.0)));
            }
        };
        pct("top-1", self.top1);
        pct("top-5", self.top5);
        pct("EER", self.eer);
        pct("EER (perturbed)", self.eer_perturbed);
        rows.push(("config".into(), self.config_hash.chars().take(12).collect()));
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter()
            .map(|(k, v)| format!("{k:width$}  {v}"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::named_rng;

    fn rows(scores: &[(f64, bool)]) -> ScoreFile {
        ScoreFile {
            rows: scores
                .iter()
                .enumerate()
                .map(|(index, &(score, same))| ScoreRow { index, same, score })
                .collect(),
        }
    }

    #[test]
    fn eer_trivial_cases() {
        // Perfect separation: every target closer than every nontarget.
        let perfect = rows(&[(0.1, true), (0.2, true), (0.8, false), (0.9, false)]);
        assert_eq!(compute_eer(&perfect).unwrap(), 0.0);

        // Perfectly inverted scores: EER 1 (accept-all and reject-all both fail).
        let inverted = rows(&[(0.8, true), (0.9, true), (0.1, false), (0.2, false)]);
        assert!((compute_eer(&inverted).unwrap() - 1.0).abs() < 1e-12);

        // Single-class inputs are an error.
        let single = rows(&[(0.1, true), (0.2, true)]);
        let err = compute_eer(&single).unwrap_err().to_string();
        assert!(err.contains("both labels"), "{err}");
    }

    #[test]
    fn eer_of_independent_labels_approaches_one_half() {
        let mut rng = named_rng(1, "test/eer");
        let scores: Vec<(f64, bool)> = (0..20_000)
            .map(|_| (rng.random_range(0.0..1.0), rng.random::<bool>()))
            .collect();
        let eer = compute_eer_from(&scores).unwrap();
        assert!((eer - 0.5).abs() < 0.02, "{eer}");
    }

    #[test]
    fn eer_matches_brute_force_sweep() {
        let mut rng = named_rng(2, "test/eer_oracle");
        for case in 0..30 {
            let n = 200;
            let scores: Vec<(f64, bool)> = (0..n)
                .map(|_| {
                    let same = rng.random::<bool>();
                    // Overlapping but separated distributions, with ties.
                    let base = if same { 0.3 } else { 0.6 };
                    let s: f64 = base + rng.random_range(-0.3..0.3);
                    let s = (s * 50.0).round() / 50.0;
                    (s, same)
                })
                .collect();
            let fast = compute_eer_from(&scores).unwrap();
            let brute = compute_eer_brute_force(&scores).unwrap();
            assert!(
                (fast - brute).abs() < 1e-9,
                "case {case}: {fast} vs {brute}"
            );
            assert!((0.0..=1.0).contains(&fast));
        }
    }

    #[test]
    fn eer_is_invariant_under_strictly_monotone_transforms() {
        let mut rng = named_rng(3, "test/eer_monotone");
        let scores: Vec<(f64, bool)> = (0..500)
            .map(|_| {
                let same = rng.random::<bool>();
                let base = if same { 0.8 } else { 1.2 };
                (base + rng.random_range(-0.5..0.5), same)
            })
            .collect();
        let eer = compute_eer_from(&scores).unwrap();

        let affine: Vec<(f64, bool)> = scores.iter().map(|&(s, l)| (3.0 * s + 7.0, l)).collect();
        let cubed: Vec<(f64, bool)> = scores.iter().map(|&(s, l)| (s * s * s, l)).collect();
        // The sweep sees identical orderings, so the results are identical
        // to the bit, not merely close.
        assert_eq!(eer.to_bits(), compute_eer_from(&affine).unwrap().to_bits());
        assert_eq!(eer.to_bits(), compute_eer_from(&cubed).unwrap().to_bits());
    }

    #[test]
    fn score_file_round_trips_bitwise_and_rejects_junk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trial.scores");
        let mut rng = named_rng(4, "test/scorefile");
        let original = rows(
            &(0..100)
                .map(|_| (rng.random_range(0.0f64..2.0), rng.random::<bool>()))
                .collect::<Vec<_>>(),
        );
        original.write(&path).unwrap();
        let back = ScoreFile::read(&path).unwrap();
        assert_eq!(back.rows.len(), original.rows.len());
        for (a, b) in original.rows.iter().zip(back.rows.iter()) {
            assert_eq!(a.index, b.index);
            assert_eq!(a.same, b.same);
            assert_eq!(a.score.to_bits(), b.score.to_bits(), "trial {}", a.index);
        }
        assert_eq!(
            compute_eer(&original).unwrap().to_bits(),
            compute_eer(&back).unwrap().to_bits()
        );

        std::fs::write(&path, "0 target not-a-number\n").unwrap();
        assert!(ScoreFile::read(&path).is_err());
        std::fs::write(&path, "0 maybe 0.5\n").unwrap();
        assert!(ScoreFile::read(&path).is_err());
        std::fs::write(&path, "0 target inf\n").unwrap();
        assert!(ScoreFile::read(&path).is_err());
    }

    #[test]
    fn mean_pairwise_distance_matches_exhaustive_recomputation() {
        let mut rng = named_rng(5, "test/grid");
        let a = Array2::from_shape_simple_fn((10, 32), || rng.random_range(-1.0f32..1.0));
        let b = Array2::from_shape_simple_fn((10, 32), || rng.random_range(-1.0f32..1.0));

        let got = mean_pairwise_distance(&a, &b);
        let mut dists = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                let mut d2 = 0.0f64;
                for k in 0..32 {
                    d2 += (f64::from(a[(i, k)]) - f64::from(b[(j, k)])).powi(2);
                }
                dists.push(d2.sqrt());
            }
        }
        assert_eq!(dists.len(), 100);
        let want = dists.iter().sum::<f64>() / 100.0;
        assert!((got - want).abs() < 1e-12);

        // Symmetry of the grid mean.
        let flipped = mean_pairwise_distance(&b, &a);
        assert!((got - flipped).abs() < 1e-9);

        // When every crop embeds identically (one repeated row), the
        // self-comparison grid is all zeros.
        let row = a.row(0).to_owned();
        let repeated = Array2::from_shape_fn((10, 32), |(_, k)| row[k]);
        assert_eq!(mean_pairwise_distance(&repeated, &repeated), 0.0);
    }

    #[test]
    fn topk_ranking_matches_binomial_chance_rates() {
        // One-hot logits always hit.
        let mut one_hot = Array1::zeros(1211);
        one_hot[42] = 5.0;
        assert!(topk_hit(&one_hot, 42, 1));
        assert!(topk_hit(&one_hot, 42, 5));
        assert!(!topk_hit(&one_hot, 7, 1));

        // Uniform-random logits hit at chance: 1/1211 for top-1, 5/1211 for
        // top-5, within four standard errors over 40k draws.
        let mut rng = named_rng(6, "test/chance");
        let n = 40_000;
        let mut h1 = 0usize;
        let mut h5 = 0usize;
        for _ in 0..n {
            let logits = Array1::from_shape_simple_fn(1211, || rng.random_range(0.0f32..1.0));
            let label = rng.random_range(0..1211);
            if topk_hit(&logits, label, 1) {
                h1 += 1;
            }
            if topk_hit(&logits, label, 5) {
                h5 += 1;
            }
        }
        let (p1, p5) = (1.0 / 1211.0, 5.0 / 1211.0);
        let sd = |p: f64| (p * (1.0 - p) / n as f64).sqrt();
        let r1 = h1 as f64 / n as f64;
        let r5 = h5 as f64 / n as f64;
        assert!((r1 - p1).abs() < 4.0 * sd(p1), "top1 rate {r1} vs {p1}");
        assert!((r5 - p5).abs() < 4.0 * sd(p5), "top5 rate {r5} vs {p5}");
        assert!(r1 <= r5);
    }

    #[test]
    fn identity_perturbation_is_bitwise_transparent() {
        let spec = PerturbSpec::default();
        assert!(spec.validate().is_ok());
        let mut rng = named_rng(7, "test/perturb");
        let samples: Vec<f32> = (0..4000).map(|_| rng.random_range(-0.5..0.5)).collect();
        let out = spec.apply(&samples, "spk/vid/utt");
        assert_eq!(samples.len(), out.len());
        for (a, b) in samples.iter().zip(out.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn noise_injection_is_deterministic_and_hits_the_requested_snr() {
        let spec = PerturbSpec {
            fir_taps: vec![1.0],
            snr_db: Some(10.0),
            noise_seed: 3,
        };
        let mut rng = named_rng(8, "test/perturb_snr");
        let samples: Vec<f32> = (0..80_000).map(|_| rng.random_range(-0.5..0.5)).collect();
        let a = spec.apply(&samples, "spk/vid/utt1");
        let b = spec.apply(&samples, "spk/vid/utt1");
        let c = spec.apply(&samples, "spk/vid/utt2");
        assert_eq!(a, b, "same utterance id, same noise");
        assert_ne!(a, c, "different utterance id, different noise");

        let power = |v: &[f32]| {
            v.iter().map(|&s| f64::from(s).powi(2)).sum::<f64>() / v.len() as f64
        };
        let signal = power(&samples);
        let noise: Vec<f32> = a.iter().zip(&samples).map(|(&y, &x)| y - x).collect();
        let measured_snr = 10.0 * (signal / power(&noise)).log10();
        assert!((measured_snr - 10.0).abs() < 0.2, "snr {measured_snr}");
    }

    #[test]
    fn report_validation_and_emission() {
        let report = EvalReport {
            task: EvalTask::Iden,
            top1: Some(0.89),
            top5: Some(0.9594),
            eer: None,
            eer_perturbed: None,
            n_trials: 800,
            n_skipped: 3,
            config_hash: "abc123def456".into(),
        };
        assert!(report.validate().is_ok());
        let kv = report.kv_lines().join("\n");
        assert!(kv.contains("task=iden"));
        assert!(kv.contains("top1=0.890000"));
        assert!(kv.contains("top5=0.959400"));
        assert!(!kv.contains("eer="), "absent metrics stay absent");
        let table = report.table();
        assert!(table.contains("89.00%"));
        assert!(table.contains("skipped"));

        let mut bad = report.clone();
        bad.top1 = Some(0.99);
        assert!(bad.validate().unwrap_err().to_string().contains("exceeds top5"));
        bad.top1 = Some(1.5);
        assert!(bad.validate().is_err());
    }
}
