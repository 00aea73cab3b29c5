//! Two-phase adversarial training.
//!
//! Every minibatch passes through two sub-phases. The environment phase
//! treats the trunk as a fixed feature extractor and trains only the probe:
//! pooled embeddings are computed in eval mode, the probe runs with live
//! batch statistics, and the triplet objective's gradient stops at the
//! probe's input. The speaker phase then trains trunk, pooling, and speaker
//! head on cross-entropy plus the confusion penalty; the penalty's gradient
//! flows *through* the probe (whose parameters and batch-norm statistics are
//! held fixed) back into the trunk. Parameter updates are plain SGD with
//! momentum, one velocity per tensor, stepped only for the phase that owns
//! the tensor.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, OPTIM_PREFIX};
use crate::corpus::{Manifest, Split, TripletSampler, TripletSpec, UtteranceRef};
use crate::dsp::FeatureExtractor;
use crate::error::{Error, Result};
use crate::losses::{contrastive_batch, env_triplet_batch, speaker_phase_batch, LossConfig};
use crate::nets::{
    collapse_freq, expand_freq, l2_normalize_rows, l2_normalize_rows_backward, BnMode, Model,
    TrunkConfig,
};
use crate::rng::{indexed_rng, named_rng, RngState};

/// Tensor-name prefixes the environment phase may update.
pub const ENV_PARAMS: &[&str] = &["env_net/"];
/// Tensor-name prefixes the speaker phase may update.
pub const SPEAKER_PARAMS: &[&str] = &["trunk/", "pool/", "speaker_head/"];
/// Tensor-name prefixes verification-head training may update.
pub const VERIF_PARAMS: &[&str] = &["verif_head/"];

fn default_lr0() -> f64 {
    1e-3
}
fn default_decay() -> f64 {
    0.95
}
fn default_max_epochs() -> usize {
    100
}
fn default_patience() -> usize {
    10
}
fn default_batch_speakers() -> usize {
    16
}
fn default_momentum() -> f64 {
    0.9
}
fn default_val_fraction() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay_per_epoch: f64,
    pub max_epochs: usize,
    pub patience_epochs: usize,
    /// Speakers per batch; each contributes an (anchor, positive, negative)
    /// crop triple, so a batch holds 3x this many segments.
    pub n_speakers_per_batch: usize,
    /// Confusion-penalty weight in the speaker objective.
    pub alpha: f64,
    pub seed: u64,
    /// Probe learning rate; `None` follows `lr0` (both decay per epoch).
    pub env_lr: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Batches per epoch; `None` sizes an epoch as one pass worth of crops
    /// over the training pool.
    pub steps_per_epoch: Option<usize>,
    /// Fraction of dev utterances held out, speaker-stratified, for the
    /// validation metric.
    pub val_fraction: f64,
    /// Run the environment phase before the speaker phase within each step.
    /// The reverse order scores the confusion penalty against the probe as it
    /// stood before this batch.
    pub env_phase_first: bool,
    /// Train the probe at all. Disabled only to demonstrate that with α = 0
    /// the trunk's trajectory does not depend on the probe's existence.
    pub env_phase_enabled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: default_lr0(),
            lr_decay_per_epoch: default_decay(),
            max_epochs: default_max_epochs(),
            patience_epochs: default_patience(),
            n_speakers_per_batch: default_batch_speakers(),
            alpha: 0.0,
            seed: 0,
            env_lr: None,
            momentum: default_momentum(),
            weight_decay: 0.0,
            steps_per_epoch: None,
            val_fraction: default_val_fraction(),
            env_phase_first: true,
            env_phase_enabled: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay_per_epoch must be in (0, 1], got {}",
                self.lr_decay_per_epoch
            )));
        }
        if self.patience_epochs > self.max_epochs {
            return Err(Error::Config(format!(
                "patience_epochs {} exceeds max_epochs {}",
                self.patience_epochs, self.max_epochs
            )));
        }
        if self.n_speakers_per_batch < 2 {
            return Err(Error::Config(format!(
                "n_speakers_per_batch must be at least 2, got {}",
                self.n_speakers_per_batch
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be finite and non-negative, got {}",
                self.alpha
            )));
        }
        if let Some(lr) = self.env_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("env_lr must be positive, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be at least 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction must be in (0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }

    /// Learning rate at `epoch`: lr0 decayed once per completed epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay_per_epoch.powi(epoch as i32)
    }

    /// Probe learning rate at `epoch`, on the same decay schedule.
    pub fn env_lr_at(&self, epoch: usize) -> f64 {
        self.env_lr.unwrap_or(self.lr0) * self.lr_decay_per_epoch.powi(epoch as i32)
    }
}

/// One sampled batch with features materialized: `[N, F, T]` per role.
#[derive(Debug, Clone)]
pub struct TripletBatch {
    pub specs: Vec<TripletSpec>,
    /// Speaker class index per triplet, from the full manifest's label table.
    pub labels: Vec<usize>,
    pub anchors: Array3<f32>,
    pub positives: Array3<f32>,
    pub negatives: Array3<f32>,
}

impl TripletBatch {
    pub fn n(&self) -> usize {
        self.specs.len()
    }

    /// Compact batch identity for diagnostics: each triplet's crop sites.
    pub fn ids(&self) -> String {
        self.specs
            .iter()
            .map(|s| {
                format!(
                    "[a={}@{:.2} p={}@{:.2} n={}@{:.2}]",
                    s.anchor.utt_id,
                    s.anchor.offset_s,
                    s.positive.utt_id,
                    s.positive.offset_s,
                    s.negative.utt_id,
                    s.negative.offset_s
                )
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Extracts features for every crop of a sampled batch, in parallel.
pub fn assemble_batch(
    specs: Vec<TripletSpec>,
    manifest: &Manifest,
    extractor: &FeatureExtractor,
) -> Result<TripletBatch> {
    let n = specs.len();
    let mut crops = Vec::with_capacity(3 * n);
    let mut labels = Vec::with_capacity(n);
    for spec in &specs {
        labels.push(manifest.speaker_label(&spec.speaker_id).ok_or_else(|| {
            Error::Sampling(format!("speaker {} not in manifest", spec.speaker_id))
        })?);
        for c in [&spec.anchor, &spec.positive, &spec.negative] {
            let utt = manifest
                .utterance(&c.utt_id)
                .ok_or_else(|| Error::Sampling(format!("utterance {} not in manifest", c.utt_id)))?;
            crops.push((utt.path.clone(), c.utt_id.clone(), c.offset_s));
        }
    }

    let feats: Vec<Result<Array2<f32>>> = crops
        .par_iter()
        .map(|(path, utt_id, offset)| extractor.segment(utt_id, path, *offset))
        .collect();

    let mut role_arrays = Vec::with_capacity(3);
    let first = feats
        .first()
        .ok_or_else(|| Error::Sampling("empty batch".into()))?;
    let (bins, frames) = first.as_ref().map_err(clone_err)?.dim();
    for role in 0..3 {
        let mut arr = Array3::zeros((n, bins, frames));
        for i in 0..n {
            let f = feats[3 * i + role].as_ref().map_err(clone_err)?;
            if f.dim() != (bins, frames) {
                return Err(Error::Dsp(format!(
                    "crop features disagree in shape: {:?} vs ({bins}, {frames})",
                    f.dim()
                )));
            }
            arr.index_axis_mut(Axis(0), i).assign(f);
        }
        role_arrays.push(arr);
    }
    let negatives = role_arrays.pop().expect("three roles");
    let positives = role_arrays.pop().expect("three roles");
    let anchors = role_arrays.pop().expect("three roles");
    Ok(TripletBatch {
        specs,
        labels,
        anchors,
        positives,
        negatives,
    })
}

fn clone_err(e: &Error) -> Error {
    Error::Dsp(format!("feature extraction failed: {e}"))
}

/// Per-step objective values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    /// Probe triplet loss (0 when the environment phase is disabled).
    pub l_e: f64,
    /// Speaker objective: ce + alpha * kl.
    pub l_s: f64,
    pub ce: f64,
    /// Confusion term, unweighted.
    pub kl: f64,
}

/// Zeroes the gradient buffers of every tensor under the given prefixes.
pub fn zero_grads(model: &mut Model<f32>, prefixes: &[&str]) {
    for t in model.tensors() {
        if let Some(g) = t.grad {
            if prefixes.iter().any(|p| t.name.starts_with(p)) {
                g.fill(0.0);
            }
        }
    }
}

/// One SGD-with-momentum step over every tensor under the given prefixes:
/// v ← momentum·v + (g + weight_decay·p); p ← p − lr·v.
pub fn sgd_step(
    model: &mut Model<f32>,
    velocities: &mut HashMap<String, Vec<f32>>,
    prefixes: &[&str],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let lr = lr as f32;
    let mu = momentum as f32;
    let wd = weight_decay as f32;
    for t in model.tensors() {
        let Some(g) = t.grad else { continue };
        if !prefixes.iter().any(|p| t.name.starts_with(p)) {
            continue;
        }
        let v = velocities
            .entry(t.name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        for i in 0..g.len() {
            let grad = g[i] + wd * t.value[i];
            v[i] = mu * v[i] + grad;
            t.value[i] -= lr * v[i];
        }
    }
}

/// Bit patterns of every parameter under the given prefixes, for exact
/// change/no-change assertions.
pub fn snapshot_bits(model: &mut Model<f32>, prefixes: &[&str]) -> Vec<(String, Vec<u32>)> {
    model
        .tensors()
        .iter()
        .filter(|t| prefixes.iter().any(|p| t.name.starts_with(p)))
        .map(|t| (t.name.clone(), t.value.iter().map(|v| v.to_bits()).collect()))
        .collect()
}

/// The model plus optimizer state, stepped one batch at a time.
pub struct Trainer {
    pub model: Model<f32>,
    pub tcfg: TrainConfig,
    pub lcfg: LossConfig,
    /// Current epoch; positions both learning-rate schedules.
    pub epoch: usize,
    velocities: HashMap<String, Vec<f32>>,
}

impl Trainer {
    pub fn new(model: Model<f32>, tcfg: TrainConfig, lcfg: LossConfig) -> Result<Self> {
        tcfg.validate()?;
        lcfg.validate()?;
        Ok(Trainer {
            model,
            tcfg,
            lcfg,
            epoch: 0,
            velocities: HashMap::new(),
        })
    }

    /// Restores optimizer velocities captured in a checkpoint.
    pub fn restore_velocities(&mut self, velocities: HashMap<String, Vec<f32>>) {
        self.velocities = velocities;
    }

    /// Both sub-phases on one batch, in the configured order.
    pub fn train_step(&mut self, batch: &TripletBatch) -> Result<StepMetrics> {
        self.check_batch(batch)?;
        let m = if self.tcfg.env_phase_first {
            let l_e = self.env_step(batch)?;
            let (l_s, ce, kl) = self.speaker_step(batch)?;
            StepMetrics { l_e, l_s, ce, kl }
        } else {
            let (l_s, ce, kl) = self.speaker_step(batch)?;
            let l_e = self.env_step(batch)?;
            StepMetrics { l_e, l_s, ce, kl }
        };
        if ![m.l_e, m.l_s, m.ce, m.kl].iter().all(|v| v.is_finite()) {
            return Err(Error::Train(format!(
                "non-finite loss {m:?}; batch {}",
                batch.ids()
            )));
        }
        Ok(m)
    }

    /// Environment sub-phase: updates only the probe.
    ///
    /// The trunk and pooling run in eval mode (frozen statistics, no cached
    /// activations), so no gradient can reach them.
    pub fn env_step(&mut self, batch: &TripletBatch) -> Result<f64> {
        if !self.tcfg.env_phase_enabled {
            return Ok(0.0);
        }
        let n = batch.n();
        let pooled = self.pooled_eval_embeddings(batch)?;
        zero_grads(&mut self.model, ENV_PARAMS);
        let z = self.model.env_net.forward(&pooled, BnMode::Batch);
        let (z_a, z_p, z_n) = split_roles(&z, n);
        let (l_e, da, dp, dn) =
            env_triplet_batch(&z_a, &z_p, &z_n, self.lcfg.margin_m).map_err(|e| {
                Error::Train(format!("environment phase: {e}; batch {}", batch.ids()))
            })?;
        let _ = self.model.env_net.backward(&join_roles(&da, &dp, &dn));
        sgd_step(
            &mut self.model,
            &mut self.velocities,
            ENV_PARAMS,
            self.tcfg.env_lr_at(self.epoch),
            self.tcfg.momentum,
            self.tcfg.weight_decay,
        );
        Ok(f64::from(l_e))
    }

    /// Speaker sub-phase: updates trunk, pooling, and speaker head.
    ///
    /// The probe contributes the confusion penalty with its parameters and
    /// statistics fixed; its weight gradients are discarded (the next
    /// environment step zeroes them before use).
    pub fn speaker_step(&mut self, batch: &TripletBatch) -> Result<(f64, f64, f64)> {
        let n = batch.n();
        let x = stack_features(batch);
        zero_grads(&mut self.model, SPEAKER_PARAMS);

        let h = self.model.trunk.forward(&x, BnMode::Batch);
        let frames = collapse_freq(h);
        let e = self.model.pool.forward(&frames);
        let logits = self.model.speaker_head.forward(&e);
        let z = self.model.env_net.forward(&e, BnMode::Running);
        let (z_a, z_p, z_n) = split_roles(&z, n);

        let mut labels3 = Vec::with_capacity(3 * n);
        for _ in 0..3 {
            labels3.extend_from_slice(&batch.labels);
        }
        let (parts, dlogits, da, dp, dn) =
            speaker_phase_batch(&logits, &labels3, &z_a, &z_p, &z_n, self.tcfg.alpha)
                .map_err(|e| Error::Train(format!("speaker phase: {e}; batch {}", batch.ids())))?;

        let mut de = self.model.speaker_head.backward(&dlogits);
        if self.tcfg.alpha != 0.0 {
            de += &self.model.env_net.backward(&join_roles(&da, &dp, &dn));
        }
        let dframes = self.model.pool.backward(&de);
        let _ = self.model.trunk.backward(&expand_freq(dframes));
        sgd_step(
            &mut self.model,
            &mut self.velocities,
            SPEAKER_PARAMS,
            self.tcfg.lr_at(self.epoch),
            self.tcfg.momentum,
            self.tcfg.weight_decay,
        );
        Ok((f64::from(parts.total), f64::from(parts.ce), f64::from(parts.kl)))
    }

    /// Eval-mode pooled embeddings for all 3N segments, anchor rows first.
    fn pooled_eval_embeddings(&self, batch: &TripletBatch) -> Result<Array2<f32>> {
        let a = self.model.embed(&batch.anchors)?;
        let p = self.model.embed(&batch.positives)?;
        let n = self.model.embed(&batch.negatives)?;
        Ok(join_roles(&a, &p, &n))
    }

    fn check_batch(&self, batch: &TripletBatch) -> Result<()> {
        let n = batch.n();
        if n < 2 {
            return Err(Error::Train(format!("batch needs at least 2 triplets, got {n}")));
        }
        if batch.labels.len() != n {
            return Err(Error::Train(format!(
                "batch has {n} triplets but {} labels",
                batch.labels.len()
            )));
        }
        let dim = batch.anchors.dim();
        if batch.positives.dim() != dim || batch.negatives.dim() != dim || dim.0 != n {
            return Err(Error::Train(format!(
                "batch role shapes disagree: anchors {:?}, positives {:?}, negatives {:?}, {n} triplets",
                batch.anchors.dim(),
                batch.positives.dim(),
                batch.negatives.dim()
            )));
        }
        self.model.check_features(dim.1, dim.2)
    }
}

/// `[3N, D]` rows in role order → per-role `[N, D]` blocks.
fn split_roles(z: &Array2<f32>, n: usize) -> (Array2<f32>, Array2<f32>, Array2<f32>) {
    (
        z.slice(ndarray::s![0..n, ..]).to_owned(),
        z.slice(ndarray::s![n..2 * n, ..]).to_owned(),
        z.slice(ndarray::s![2 * n..3 * n, ..]).to_owned(),
    )
}

/// Per-role `[N, D]` blocks → `[3N, D]`, anchors first.
fn join_roles(a: &Array2<f32>, p: &Array2<f32>, n: &Array2<f32>) -> Array2<f32> {
    ndarray::concatenate(Axis(0), &[a.view(), p.view(), n.view()]).expect("equal widths")
}

/// Batch features as one `[3N, 1, F, T]` block, anchors first.
fn stack_features(batch: &TripletBatch) -> Array4<f32> {
    let (n, f, t) = batch.anchors.dim();
    let joined = ndarray::concatenate(
        Axis(0),
        &[
            batch.anchors.view(),
            batch.positives.view(),
            batch.negatives.view(),
        ],
    )
    .expect("equal shapes");
    joined
        .into_shape_with_order((3 * n, 1, f, t))
        .expect("contiguous")
}

/// Speaker-stratified validation carve-out: for each speaker with at least
/// two long-enough dev utterances, a seeded `val_fraction` share (at least
/// one, never all) goes to validation. Returns the remaining training
/// manifest and the held-out utterances.
pub fn carve_val_split(
    manifest: &Manifest,
    dev: Option<Split>,
    val_fraction: f64,
    seed: u64,
    min_duration_s: f64,
) -> Result<(Manifest, Vec<UtteranceRef>)> {
    let mut train: Vec<UtteranceRef> = Vec::new();
    let mut val: Vec<UtteranceRef> = Vec::new();

    let mut by_speaker: Vec<Vec<&UtteranceRef>> = Vec::new();
    for u in manifest.utterances() {
        let in_dev = dev.is_none() || u.split == dev;
        if !in_dev || u.duration_s < min_duration_s {
            train.push(u.clone());
            continue;
        }
        let label = manifest
            .speaker_label(&u.speaker_id)
            .expect("manifest speaker");
        if by_speaker.len() <= label {
            by_speaker.resize_with(label + 1, Vec::new);
        }
        by_speaker[label].push(u);
    }

    for (label, utts) in by_speaker.iter().enumerate() {
        if utts.len() < 2 {
            train.extend(utts.iter().map(|u| (*u).clone()));
            continue;
        }
        let k = ((utts.len() as f64 * val_fraction).round() as usize).clamp(1, utts.len() - 1);
        let mut order: Vec<usize> = (0..utts.len()).collect();
        let mut rng = indexed_rng(seed, "train/val_split", &[label as u64]);
        for i in 0..k {
            let j = i + rng.random_range(0..order.len() - i);
            order.swap(i, j);
        }
        let chosen: std::collections::HashSet<usize> = order[..k].iter().copied().collect();
        for (i, u) in utts.iter().enumerate() {
            if chosen.contains(&i) {
                val.push((*u).clone());
            } else {
                train.push((*u).clone());
            }
        }
    }

    if val.is_empty() {
        return Err(Error::Train(
            "validation carve-out is empty; no speaker has two eligible dev utterances".into(),
        ));
    }
    Ok((Manifest::from_utterances(train)?, val))
}

/// Top-1 identification accuracy over centered crops of the given utterances.
/// Labels come from `labels_from`, so the class table matches training.
pub fn validation_top1(
    model: &Model<f32>,
    labels_from: &Manifest,
    utts: &[UtteranceRef],
    extractor: &FeatureExtractor,
) -> Result<f64> {
    if utts.is_empty() {
        return Err(Error::Eval("validation set is empty".into()));
    }
    let seg = extractor.cfg.segment_len_s;
    let mut correct = 0usize;
    for chunk in utts.chunks(16) {
        let feats: Vec<Result<Array2<f32>>> = chunk
            .par_iter()
            .map(|u| {
                let offset = ((u.duration_s - seg) / 2.0).max(0.0);
                extractor.segment(&u.utt_id, &u.path, offset)
            })
            .collect();
        let mut batch = None;
        for (i, f) in feats.iter().enumerate() {
            let f = f.as_ref().map_err(clone_err)?;
            let arr = batch.get_or_insert_with(|| {
                Array3::zeros((chunk.len(), f.dim().0, f.dim().1))
            });
            arr.index_axis_mut(Axis(0), i).assign(f);
        }
        let emb = model.embed(&batch.expect("non-empty chunk"))?;
        let logits = model.speaker_head.infer(&emb);
        for (i, u) in chunk.iter().enumerate() {
            let label = labels_from
                .speaker_label(&u.speaker_id)
                .ok_or_else(|| Error::Eval(format!("speaker {} unknown", u.speaker_id)))?;
            let row = logits.row(i);
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(j, _)| j)
                .expect("non-empty row");
            if pred == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / utts.len() as f64)
}

/// Line-oriented key=value metrics sink; records stay in memory and stream to
/// a file when one is attached. No wall-clock fields, so identical runs
/// produce identical logs.
pub struct MetricsLog {
    file: Option<std::io::BufWriter<std::fs::File>>,
    pub lines: Vec<String>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        MetricsLog {
            file: None,
            lines: Vec::new(),
        }
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(MetricsLog {
            file: Some(std::io::BufWriter::new(file)),
            lines: Vec::new(),
        })
    }

    pub fn record(&mut self, fields: &[(&str, String)]) {
        let line = fields
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ");
        if let Some(f) = &mut self.file {
            let _ = writeln!(f, "{line}");
        }
        self.lines.push(line);
    }

    pub fn flush(&mut self) {
        if let Some(f) = &mut self.file {
            let _ = f.flush();
        }
    }
}

/// Splits a key=value metrics line back into a map.
pub fn parse_kv(line: &str) -> HashMap<String, String> {
    line.split_whitespace()
        .filter_map(|tok| {
            tok.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
        })
        .collect()
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

/// Everything `train` leaves behind.
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub best_val_top1: f64,
    /// Epochs completed across the whole run, resumed segments included.
    pub epochs_run: usize,
    pub stopped_early: bool,
}

/// Borrowed context shared by a whole training run.
pub struct TrainContext<'a> {
    pub manifest: &'a Manifest,
    pub extractor: &'a FeatureExtractor,
    /// Receives `last.ckpt` / `best.ckpt`; `None` trains purely in memory.
    pub out_dir: Option<&'a Path>,
    pub run_hash: String,
}

/// The dev split the trainer draws from: identification dev when present,
/// else verification dev, else the whole manifest (unsplit corpora).
pub fn dev_split_of(manifest: &Manifest) -> Option<Split> {
    [Split::DevIden, Split::DevVerif].into_iter().find(|&split| manifest.utterances().iter().any(|u| u.split == Some(split)))
}

/// Full classification training: epoch loop, per-epoch validation, early
/// stopping, and checkpointing. Pass `resume` to continue an interrupted run;
/// the result is bit-identical to never having stopped.
pub fn train(
    ctx: &TrainContext,
    mcfg: &TrunkConfig,
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
    log: &mut MetricsLog,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    mcfg.validate()?;
    tcfg.validate()?;
    lcfg.validate()?;
    if ctx.extractor.kind != mcfg.arch.feature_kind() {
        return Err(Error::Config(format!(
            "trunk {:?} expects {:?} features, extractor provides {:?}",
            mcfg.arch,
            mcfg.arch.feature_kind(),
            ctx.extractor.kind
        )));
    }
    if mcfg.n_speakers != ctx.manifest.n_speakers() {
        return Err(Error::Config(format!(
            "model has {} speaker classes but the manifest has {}",
            mcfg.n_speakers,
            ctx.manifest.n_speakers()
        )));
    }
    let dsp_hash = ctx.extractor.cfg.content_hash();
    let seg = ctx.extractor.cfg.segment_len_s;
    let dev = dev_split_of(ctx.manifest);
    let (train_manifest, val_utts) =
        carve_val_split(ctx.manifest, dev, tcfg.val_fraction, tcfg.seed, seg)?;
    let sampler = TripletSampler::new(&train_manifest, dev, seg)?;

    let pool_size = train_manifest
        .utterances()
        .iter()
        .filter(|u| (dev.is_none() || u.split == dev) && u.duration_s >= seg)
        .count();
    let steps_per_epoch = tcfg
        .steps_per_epoch
        .unwrap_or_else(|| pool_size.div_ceil(3 * tcfg.n_speakers_per_batch).max(1));

    let (model, start_epoch, mut best_val, mut since_improve, mut data_rng, velocities) =
        match resume {
            Some(ck) => {
                if ck.cfg != *mcfg {
                    return Err(Error::Config(
                        "resume checkpoint was trained with a different model config".into(),
                    ));
                }
                if ck.dsp_hash != dsp_hash {
                    return Err(Error::Config(format!(
                        "resume checkpoint dsp hash {} does not match current settings {}",
                        ck.dsp_hash, dsp_hash
                    )));
                }
                let rng = ck
                    .data_rng
                    .as_ref()
                    .map(RngState::restore)
                    .unwrap_or_else(|| named_rng(tcfg.seed, "train/data"));
                (
                    ck.build_model()?,
                    ck.epoch,
                    ck.best_val_metric,
                    ck.epochs_since_improve,
                    rng,
                    ck.velocities(),
                )
            }
            None => (
                Model::new(mcfg, tcfg.seed)?,
                0,
                -1.0,
                0,
                named_rng(tcfg.seed, "train/data"),
                HashMap::new(),
            ),
        };

    let mut trainer = Trainer::new(model, tcfg.clone(), *lcfg)?;
    trainer.restore_velocities(velocities);

    let mut best: Option<Checkpoint> = None;
    let mut last: Option<Checkpoint> = None;
    let mut stopped_early = false;
    let mut epochs_run = start_epoch;

    for epoch in start_epoch..tcfg.max_epochs {
        trainer.epoch = epoch;
        let lr = tcfg.lr_at(epoch);
        let mut sums = StepMetrics {
            l_e: 0.0,
            l_s: 0.0,
            ce: 0.0,
            kl: 0.0,
        };
        for step in 0..steps_per_epoch {
            let specs = sampler.sample_batch(tcfg.n_speakers_per_batch, &mut data_rng)?;
            let batch = assemble_batch(specs, ctx.manifest, ctx.extractor)?;
            let m = trainer.train_step(&batch)?;
            sums.l_e += m.l_e;
            sums.l_s += m.l_s;
            sums.ce += m.ce;
            sums.kl += m.kl;
            log.record(&[
                ("kind", "step".into()),
                ("epoch", epoch.to_string()),
                ("step", step.to_string()),
                ("lr", format!("{lr:.6e}")),
                ("l_e", fmt_f(m.l_e)),
                ("l_s", fmt_f(m.l_s)),
                ("ce", fmt_f(m.ce)),
                ("kl", fmt_f(m.kl)),
            ]);
        }
        let inv = 1.0 / steps_per_epoch as f64;
        let val_top1 = validation_top1(&trainer.model, ctx.manifest, &val_utts, ctx.extractor)?;
        let improved = val_top1 > best_val;
        if improved {
            best_val = val_top1;
            since_improve = 0;
        } else {
            since_improve += 1;
        }
        epochs_run = epoch + 1;

        let mut ck = Checkpoint::from_model(&mut trainer.model, &dsp_hash, &ctx.run_hash);
        ck.epoch = epoch + 1;
        ck.best_val_metric = best_val;
        ck.epochs_since_improve = since_improve;
        ck.data_rng = Some(RngState::capture(&data_rng));
        for (name, v) in &trainer.velocities {
            ck.push(&format!("{OPTIM_PREFIX}{name}"), vec![v.len()], v.clone());
        }
        if let Some(dir) = ctx.out_dir {
            ck.save(&dir.join("last.ckpt"))?;
            if improved {
                ck.save(&dir.join("best.ckpt"))?;
            }
        }
        if improved {
            best = Some(ck.clone());
        }
        last = Some(ck);

        log.record(&[
            ("kind", "epoch".into()),
            ("epoch", epoch.to_string()),
            ("lr", format!("{lr:.6e}")),
            ("l_e", fmt_f(sums.l_e * inv)),
            ("l_s", fmt_f(sums.l_s * inv)),
            ("ce", fmt_f(sums.ce * inv)),
            ("kl", fmt_f(sums.kl * inv)),
            ("val_top1", fmt_f(val_top1)),
            ("best_top1", fmt_f(best_val)),
            ("since_improve", since_improve.to_string()),
        ]);
        log.flush();

        if since_improve >= tcfg.patience_epochs {
            stopped_early = true;
            break;
        }
    }

    let last = last.ok_or_else(|| Error::Train("no epochs ran".into()))?;
    let best = best.unwrap_or_else(|| last.clone());
    Ok(TrainOutcome {
        best,
        last,
        best_val_top1: best_val,
        epochs_run,
        stopped_early,
    })
}

fn default_verif_epochs() -> usize {
    30
}
fn default_verif_lr() -> f64 {
    1e-4
}
fn default_pairs_per_batch() -> usize {
    32
}
fn default_neg_pool_mult() -> usize {
    8
}

/// Settings for contrastive verification-head training on a frozen trunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Positive pairs per batch; the same count of hard negatives joins them.
    pub pairs_per_batch: usize,
    /// Candidate negatives drawn per batch, as a multiple of
    /// `pairs_per_batch`; the hardest ones are kept.
    pub neg_pool_mult: usize,
    pub steps_per_epoch: Option<usize>,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for VerifTrainConfig {
    fn default() -> Self {
        VerifTrainConfig {
            epochs: default_verif_epochs(),
            lr: default_verif_lr(),
            pairs_per_batch: default_pairs_per_batch(),
            neg_pool_mult: default_neg_pool_mult(),
            steps_per_epoch: None,
            momentum: default_momentum(),
            seed: 0,
        }
    }
}

impl VerifTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("verification training needs at least 1 epoch".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.pairs_per_batch == 0 {
            return Err(Error::Config("pairs_per_batch must be at least 1".into()));
        }
        if self.neg_pool_mult == 0 {
            return Err(Error::Config("neg_pool_mult must be at least 1".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Indices of the `k` smallest distances: the hardest negative candidates.
/// Ties break toward the lower index.
pub fn mine_hard_negatives(distances: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..distances.len()).collect();
    idx.sort_by(|&a, &b| {
        distances[a]
            .partial_cmp(&distances[b])
            .expect("finite distances")
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

struct PairPool<'a> {
    /// Speakers with at least two eligible utterances, for positive pairs.
    multi: Vec<Vec<&'a UtteranceRef>>,
    /// Every eligible speaker, for negative pairs.
    all: Vec<Vec<&'a UtteranceRef>>,
    seg: f64,
}

impl<'a> PairPool<'a> {
    fn new(manifest: &'a Manifest, dev: Option<Split>, seg: f64) -> Result<Self> {
        let mut by_speaker: HashMap<&str, Vec<&UtteranceRef>> = HashMap::new();
        for u in manifest.utterances() {
            if (dev.is_none() || u.split == dev) && u.duration_s >= seg {
                by_speaker.entry(&u.speaker_id).or_default().push(u);
            }
        }
        let mut all: Vec<Vec<&UtteranceRef>> = by_speaker.into_values().collect();
        all.sort_by(|a, b| a[0].speaker_id.cmp(&b[0].speaker_id));
        let multi: Vec<Vec<&UtteranceRef>> =
            all.iter().filter(|v| v.len() >= 2).cloned().collect();
        if multi.is_empty() {
            return Err(Error::Train(
                "no speaker has two eligible utterances for positive pairs".into(),
            ));
        }
        if all.len() < 2 {
            return Err(Error::Train("negative pairs need at least two speakers".into()));
        }
        Ok(PairPool { multi, all, seg })
    }

    fn crop(&self, u: &UtteranceRef, rng: &mut ChaCha8Rng) -> (String, std::path::PathBuf, f64) {
        let span = (u.duration_s - self.seg).max(0.0);
        (u.utt_id.clone(), u.path.clone(), rng.random::<f64>() * span)
    }

    fn positive_pair(&self, rng: &mut ChaCha8Rng) -> [(String, std::path::PathBuf, f64); 2] {
        let sp = &self.multi[rng.random_range(0..self.multi.len())];
        let i = rng.random_range(0..sp.len());
        let mut j = rng.random_range(0..sp.len() - 1);
        if j >= i {
            j += 1;
        }
        [self.crop(sp[i], rng), self.crop(sp[j], rng)]
    }

    fn negative_pair(&self, rng: &mut ChaCha8Rng) -> [(String, std::path::PathBuf, f64); 2] {
        let i = rng.random_range(0..self.all.len());
        let mut j = rng.random_range(0..self.all.len() - 1);
        if j >= i {
            j += 1;
        }
        let a = &self.all[i][rng.random_range(0..self.all[i].len())];
        let b = &self.all[j][rng.random_range(0..self.all[j].len())];
        [self.crop(a, rng), self.crop(b, rng)]
    }
}

/// Contrastive fine-tuning of the verification head on a frozen trunk.
///
/// Each step embeds `pairs_per_batch` positive pairs plus a pool of candidate
/// negatives, keeps the hardest negatives (smallest head-space distance), and
/// takes one SGD step on the head alone. Returns a checkpoint whose trunk
/// tensors are bit-identical to the input's.
pub fn train_verif_head(
    ck: &Checkpoint,
    manifest: &Manifest,
    extractor: &FeatureExtractor,
    vcfg: &VerifTrainConfig,
    lcfg: &LossConfig,
    log: &mut MetricsLog,
) -> Result<Checkpoint> {
    vcfg.validate()?;
    lcfg.validate()?;
    let dsp_hash = extractor.cfg.content_hash();
    if ck.dsp_hash != dsp_hash {
        return Err(Error::Config(format!(
            "checkpoint dsp hash {} does not match current settings {}",
            ck.dsp_hash, dsp_hash
        )));
    }
    let mut model = ck.build_model()?;
    let dev = dev_split_of(manifest);
    let seg = extractor.cfg.segment_len_s;
    let pool = PairPool::new(manifest, dev, seg)?;
    let eligible: usize = pool.all.iter().map(Vec::len).sum();
    let steps_per_epoch = vcfg
        .steps_per_epoch
        .unwrap_or_else(|| eligible.div_ceil(2 * vcfg.pairs_per_batch).max(1));

    let mut velocities: HashMap<String, Vec<f32>> = HashMap::new();
    let mut rng = named_rng(vcfg.seed, "train/verif");
    let p = vcfg.pairs_per_batch;

    for epoch in 0..vcfg.epochs {
        let mut loss_sum = 0.0f64;
        let mut pos_dist_sum = 0.0f64;
        for step in 0..steps_per_epoch {
            // Sample crop sites: P positive pairs, then the negative pool.
            let mut crops = Vec::new();
            for _ in 0..p {
                crops.extend(pool.positive_pair(&mut rng));
            }
            let n_cand = p * vcfg.neg_pool_mult;
            for _ in 0..n_cand {
                crops.extend(pool.negative_pair(&mut rng));
            }

            // Frozen-trunk embeddings for every crop.
            let feats: Vec<Result<Array2<f32>>> = crops
                .par_iter()
                .map(|(utt_id, path, off)| extractor.segment(utt_id, path, *off))
                .collect();
            let mut stacked = None;
            for (i, f) in feats.iter().enumerate() {
                let f = f.as_ref().map_err(clone_err)?;
                let arr = stacked.get_or_insert_with(|| {
                    Array3::zeros((crops.len(), f.dim().0, f.dim().1))
                });
                arr.index_axis_mut(Axis(0), i).assign(f);
            }
            let pooled = model.embed(&stacked.expect("non-empty batch"))?;

            // Mine the hardest negatives in the head's current metric.
            let (head_unit, _) = l2_normalize_rows(&model.verif_head.infer(&pooled));
            let cand_dists: Vec<f64> = (0..n_cand)
                .map(|c| {
                    let l = head_unit.row(2 * p + 2 * c);
                    let r = head_unit.row(2 * p + 2 * c + 1);
                    l.iter()
                        .zip(r.iter())
                        .map(|(&a, &b)| f64::from(a - b).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            let hardest = mine_hard_negatives(&cand_dists, p);

            // One training forward over the 4P selected rows.
            let mut sel = Array2::zeros((4 * p, pooled.dim().1));
            for i in 0..2 * p {
                sel.row_mut(i).assign(&pooled.row(i));
            }
            for (k, &c) in hardest.iter().enumerate() {
                sel.row_mut(2 * p + 2 * k).assign(&pooled.row(2 * p + 2 * c));
                sel.row_mut(2 * p + 2 * k + 1)
                    .assign(&pooled.row(2 * p + 2 * c + 1));
            }
            zero_grads(&mut model, VERIF_PARAMS);
            let out = model.verif_head.forward(&sel);
            let (unit, inv_len) = l2_normalize_rows(&out);

            let mut lefts = Array2::zeros((2 * p, unit.dim().1));
            let mut rights = Array2::zeros((2 * p, unit.dim().1));
            for i in 0..2 * p {
                lefts.row_mut(i).assign(&unit.row(2 * i));
                rights.row_mut(i).assign(&unit.row(2 * i + 1));
            }
            let mut same = vec![true; p];
            same.extend(std::iter::repeat_n(false, p));
            let (loss, dl, dr) =
                contrastive_batch(&lefts, &rights, &same, lcfg.contrastive_margin)
                    .map_err(|e| Error::Train(format!("verification step: {e}")))?;

            let mut dunit = Array2::zeros(unit.dim());
            for i in 0..2 * p {
                dunit.row_mut(2 * i).assign(&dl.row(i));
                dunit.row_mut(2 * i + 1).assign(&dr.row(i));
            }
            let dout = l2_normalize_rows_backward(&unit, &inv_len, &dunit);
            let _ = model.verif_head.backward(&dout);
            sgd_step(
                &mut model,
                &mut velocities,
                VERIF_PARAMS,
                vcfg.lr,
                vcfg.momentum,
                0.0,
            );

            let mean_pos: f64 = (0..p)
                .map(|i| {
                    lefts
                        .row(i)
                        .iter()
                        .zip(rights.row(i).iter())
                        .map(|(&a, &b)| f64::from(a - b).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .sum::<f64>()
                / p as f64;
            loss_sum += f64::from(loss);
            pos_dist_sum += mean_pos;
            log.record(&[
                ("kind", "verif_step".into()),
                ("epoch", epoch.to_string()),
                ("step", step.to_string()),
                ("loss", fmt_f(f64::from(loss))),
                ("pos_dist", fmt_f(mean_pos)),
            ]);
        }
        let inv = 1.0 / steps_per_epoch as f64;
        log.record(&[
            ("kind", "verif_epoch".into()),
            ("epoch", epoch.to_string()),
            ("loss", fmt_f(loss_sum * inv)),
            ("pos_dist", fmt_f(pos_dist_sum * inv)),
        ]);
        log.flush();
    }

    let mut out = Checkpoint::from_model(&mut model, &dsp_hash, &ck.run_hash);
    out.epoch = ck.epoch;
    out.best_val_metric = ck.best_val_metric;
    out.epochs_since_improve = ck.epochs_since_improve;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::testutil::toy_manifest;
    use crate::nets::{Arch, PoolKind};

    fn tiny_cfg(n_speakers: usize) -> TrunkConfig {
        let mut c = TrunkConfig::new(Arch::Vggm40, PoolKind::Sap, n_speakers);
        c.width_mult = 0.25;
        c
    }

    fn random_batch(n: usize, n_speakers: usize, seed: u64) -> TripletBatch {
        let mut rng = named_rng(seed, "test/batch");
        let mut gen = |step: usize| {
            Array3::from_shape_simple_fn((n, 40, 198), || {
                rng.random_range(-1.0f32..1.0) * (1.0 + step as f32 * 0.01)
            })
        };
        let anchors = gen(0);
        let positives = gen(1);
        let negatives = gen(2);
        let specs = (0..n)
            .map(|i| TripletSpec {
                speaker_id: format!("spk{i}"),
                anchor: crate::corpus::CropRef {
                    utt_id: format!("spk{i}/v0/u0"),
                    offset_s: 0.0,
                },
                positive: crate::corpus::CropRef {
                    utt_id: format!("spk{i}/v0/u1"),
                    offset_s: 0.0,
                },
                negative: crate::corpus::CropRef {
                    utt_id: format!("spk{i}/v1/u0"),
                    offset_s: 0.0,
                },
            })
            .collect();
        TripletBatch {
            specs,
            labels: (0..n).map(|i| i % n_speakers).collect(),
            anchors,
            positives,
            negatives,
        }
    }

    fn tiny_trainer(alpha: f64, seed: u64) -> Trainer {
        let model = Model::new(&tiny_cfg(8), seed).unwrap();
        let tcfg = TrainConfig {
            alpha,
            n_speakers_per_batch: 3,
            seed,
            ..TrainConfig::default()
        };
        Trainer::new(model, tcfg, LossConfig::default()).unwrap()
    }

    #[test]
    fn config_defaults_match_schedule_and_validation_rejects_bad_values() {
        let c = TrainConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.lr0, 1e-3);
        assert_eq!(c.lr_decay_per_epoch, 0.95);
        assert_eq!(c.max_epochs, 100);
        assert_eq!(c.patience_epochs, 10);
        assert_eq!(c.momentum, 0.9);

        // Closed form: lr at epoch 10 is 1e-3 * 0.95^10 which is about 5.99e-4.
        let lr10 = c.lr_at(10);
        assert!((lr10 - 5.987369392383787e-4).abs() < 1e-15);
        assert!((lr10 - 5.99e-4).abs() < 5e-7);
        assert_eq!(c.env_lr_at(10), lr10);

        let bad = TrainConfig {
            patience_epochs: 200,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr_decay_per_epoch: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            alpha: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());

        // Sparse JSON picks up every default.
        let sparse: TrainConfig = serde_json::from_str(r#"{"alpha": 10.0}"#).unwrap();
        assert_eq!(sparse.alpha, 10.0);
        assert_eq!(sparse.lr0, 1e-3);
        assert!(sparse.env_phase_first && sparse.env_phase_enabled);
    }

    #[test]
    fn env_step_touches_only_the_probe() {
        let mut t = tiny_trainer(10.0, 1);
        let batch = random_batch(3, 8, 2);
        let frozen = snapshot_bits(&mut t.model, SPEAKER_PARAMS);
        let frozen_verif = snapshot_bits(&mut t.model, VERIF_PARAMS);
        let probe_before = snapshot_bits(&mut t.model, ENV_PARAMS);

        let l_e = t.env_step(&batch).unwrap();
        assert!(l_e.is_finite() && l_e >= 0.0);

        assert_eq!(frozen, snapshot_bits(&mut t.model, SPEAKER_PARAMS));
        assert_eq!(frozen_verif, snapshot_bits(&mut t.model, VERIF_PARAMS));
        let probe_after = snapshot_bits(&mut t.model, ENV_PARAMS);
        assert_ne!(probe_before, probe_after, "probe must learn");
    }

    #[test]
    fn speaker_step_touches_trunk_pool_and_head_but_not_the_probe() {
        let mut t = tiny_trainer(10.0, 3);
        let batch = random_batch(3, 8, 4);
        // Give the probe's running statistics some history first.
        t.env_step(&batch).unwrap();

        let probe = snapshot_bits(&mut t.model, ENV_PARAMS);
        let verif = snapshot_bits(&mut t.model, VERIF_PARAMS);
        let trunk_before = snapshot_bits(&mut t.model, &["trunk/"]);
        let pool_before = snapshot_bits(&mut t.model, &["pool/"]);
        let head_before = snapshot_bits(&mut t.model, &["speaker_head/"]);

        let (l_s, ce, kl) = t.speaker_step(&batch).unwrap();
        assert!(l_s.is_finite() && ce.is_finite() && kl.is_finite());
        assert!(l_s >= ce, "alpha-weighted confusion term is non-negative");

        assert_eq!(probe, snapshot_bits(&mut t.model, ENV_PARAMS), "probe frozen");
        assert_eq!(verif, snapshot_bits(&mut t.model, VERIF_PARAMS));
        assert_ne!(trunk_before, snapshot_bits(&mut t.model, &["trunk/"]));
        assert_ne!(pool_before, snapshot_bits(&mut t.model, &["pool/"]));
        assert_ne!(head_before, snapshot_bits(&mut t.model, &["speaker_head/"]));
    }

    #[test]
    fn alpha_zero_trunk_trajectory_ignores_the_probe() {
        // Same seed, same batches; one trainer never runs the env phase.
        let mut with_probe = tiny_trainer(0.0, 5);
        let mut without = tiny_trainer(0.0, 5);
        without.tcfg.env_phase_enabled = false;

        for i in 0..3 {
            let batch = random_batch(3, 8, 10 + i);
            with_probe.train_step(&batch).unwrap();
            without.train_step(&batch).unwrap();
        }
        assert_eq!(
            snapshot_bits(&mut with_probe.model, SPEAKER_PARAMS),
            snapshot_bits(&mut without.model, SPEAKER_PARAMS),
            "with alpha = 0 the trunk cannot see the probe"
        );
        // The probe itself trained only in the first trainer.
        assert_ne!(
            snapshot_bits(&mut with_probe.model, ENV_PARAMS),
            snapshot_bits(&mut without.model, ENV_PARAMS)
        );
    }

    #[test]
    fn alpha_changes_the_trunk_update() {
        let mut plain = tiny_trainer(0.0, 6);
        let mut adversarial = tiny_trainer(30.0, 6);
        let batch = random_batch(3, 8, 7);
        plain.train_step(&batch).unwrap();
        adversarial.train_step(&batch).unwrap();
        assert_ne!(
            snapshot_bits(&mut plain.model, &["trunk/"]),
            snapshot_bits(&mut adversarial.model, &["trunk/"]),
            "the confusion gradient must reach the trunk"
        );
    }

    #[test]
    fn sgd_momentum_matches_hand_rollout() {
        let mut model = Model::<f32>::new(&tiny_cfg(4), 0).unwrap();
        let mut vel = HashMap::new();
        let name = "speaker_head/b";
        let (p0, g) = {
            let mut tensors = model.tensors();
            let t = tensors.iter_mut().find(|t| t.name == name).unwrap();
            t.grad.as_mut().unwrap().fill(2.0);
            (t.value[0], 2.0f32)
        };
        sgd_step(&mut model, &mut vel, &["speaker_head/"], 0.1, 0.9, 0.0);
        sgd_step(&mut model, &mut vel, &["speaker_head/"], 0.1, 0.9, 0.0);
        // v1 = g, p1 = p0 - lr*g; v2 = 0.9g + g = 1.9g, p2 = p1 - lr*1.9g.
        let expect = p0 - 0.1 * g - 0.1 * 1.9 * g;
        let got = {
            let mut tensors = model.tensors();
            let t = tensors.iter_mut().find(|t| t.name == name).unwrap();
            t.value[0]
        };
        assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
        assert_eq!(vel[name][0], 1.9 * g);

        // Prefix filtering: stepping one head leaves the other untouched.
        assert!(!vel.contains_key("verif_head/w"));
    }

    #[test]
    fn nan_loss_aborts_with_batch_ids() {
        let mut t = tiny_trainer(0.0, 8);
        let batch = random_batch(2, 8, 9);
        // A poisoned parameter drives the logits non-finite; the step must
        // fail and name the batch, not silently keep training.
        for tensor in t.model.tensors() {
            if tensor.name == "speaker_head/w" {
                tensor.value[0] = f32::NAN;
            }
        }
        let err = t.train_step(&batch).unwrap_err().to_string();
        assert!(err.contains("spk0/v0/u0"), "{err}");
        assert!(err.contains("spk1/v1/u0"), "{err}");
    }

    #[test]
    fn mine_hard_negatives_matches_brute_force_scan() {
        let mut rng = named_rng(10, "test/mining");
        for _ in 0..200 {
            let n = rng.random_range(1..30);
            let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4.0)).collect();

            // K = 1 is an argmin scan.
            let mut best = 0;
            for i in 1..n {
                if d[i] < d[best] {
                    best = i;
                }
            }
            assert_eq!(mine_hard_negatives(&d, 1), vec![best]);

            // General K matches a full sort.
            let k = rng.random_range(1..=n);
            let got = mine_hard_negatives(&d, k);
            let mut sorted: Vec<usize> = (0..n).collect();
            sorted.sort_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap().then(a.cmp(&b)));
            assert_eq!(got, sorted[..k]);
            // Every kept distance is no larger than every discarded one.
            let kept: f64 = got.iter().map(|&i| d[i]).fold(0.0, f64::max);
            for (i, &di) in d.iter().enumerate() {
                if !got.contains(&i) {
                    assert!(di >= kept - 1e-12);
                }
            }
        }
    }

    #[test]
    fn validation_carve_out_is_stratified_disjoint_and_seeded() {
        let m = toy_manifest(12, 3, 10, 3.0, None);
        let (train, val) = carve_val_split(&m, None, 0.1, 7, 2.0).unwrap();

        // 30 utterances per speaker, 10% rounds to 3 held out each.
        assert_eq!(val.len(), 12 * 3);
        let mut per_speaker: HashMap<&str, usize> = HashMap::new();
        for u in &val {
            *per_speaker.entry(u.speaker_id.as_str()).or_default() += 1;
        }
        assert_eq!(per_speaker.len(), 12, "every speaker contributes");
        assert!(per_speaker.values().all(|&c| c == 3));

        // Disjoint and complete.
        assert_eq!(train.len() + val.len(), m.len());
        for u in &val {
            assert!(train.utterance(&u.utt_id).is_none());
        }

        // Seeded: same seed same carve, different seed different carve.
        let (_, val2) = carve_val_split(&m, None, 0.1, 7, 2.0).unwrap();
        assert_eq!(val, val2);
        let (_, val3) = carve_val_split(&m, None, 0.1, 8, 2.0).unwrap();
        assert_ne!(val, val3);
    }

    #[test]
    fn metrics_log_round_trips_key_value_lines() {
        let mut log = MetricsLog::in_memory();
        log.record(&[
            ("kind", "step".into()),
            ("epoch", "3".into()),
            ("l_e", fmt_f(0.25)),
            ("kl", fmt_f(0.0)),
        ]);
        assert_eq!(log.lines.len(), 1);
        let kv = parse_kv(&log.lines[0]);
        assert_eq!(kv["kind"], "step");
        assert_eq!(kv["epoch"], "3");
        assert_eq!(kv["l_e"], "0.250000");
        assert_eq!(kv["kl"], "0.000000");
    }

    #[test]
    fn verif_config_defaults_and_validation() {
        let c = VerifTrainConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.epochs, 30);
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.pairs_per_batch, 32);
        let bad = VerifTrainConfig {
            lr: 0.0,
            ..VerifTrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dev_split_prefers_identification() {
        let iden = toy_manifest(4, 2, 2, 3.0, Some(Split::DevIden));
        assert_eq!(dev_split_of(&iden), Some(Split::DevIden));
        let verif = toy_manifest(4, 2, 2, 3.0, Some(Split::DevVerif));
        assert_eq!(dev_split_of(&verif), Some(Split::DevVerif));
        let unsplit = toy_manifest(4, 2, 2, 3.0, None);
        assert_eq!(dev_split_of(&unsplit), None);
    }
}
