//! Trial-list construction for verification and the environment probe.
//!
//! Environment-probe lists contain only same-speaker pairs: label 1 means
//! both utterances come from the same video (assumed same environment),
//! label 0 a different video of that speaker. Speaker-verification lists use
//! label 1 for same-speaker pairs and label 0 for cross-speaker pairs. Both
//! are balanced to ⌊n/2⌋ label-1 pairs, globally sampled without duplicates,
//! uniformly over the eligible pair population.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Manifest, Split, UtteranceRef};
use crate::error::{Error, Result};
use crate::rng::named_rng;

/// What the labels of a trial list mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialKind {
    SpeakerVerif,
    EnvProbe,
}

/// One labeled pair of utterances.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub label: u8,
    pub utt_a: String,
    pub utt_b: String,
}

/// A labeled pair list plus the interpretation of its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialList {
    pub kind: TrialKind,
    pub trials: Vec<Trial>,
}

impl TrialList {
    /// Writes the `label utt_a utt_b` line format.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.trials.len() * 48);
        for t in &self.trials {
            writeln!(out, "{} {} {}", t.label, t.utt_a, t.utt_b).expect("vec write");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads the line format; `kind` is supplied by the caller because the
    /// file itself is convention-compatible and carries no header.
    pub fn read(path: &Path, kind: TrialKind) -> Result<TrialList> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut trials = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(label), Some(a), Some(b), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::ManifestParse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: "expected `label utt_a utt_b`".into(),
                });
            };
            let label: u8 = match label {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(Error::ManifestParse {
                        path: path.to_path_buf(),
                        line: lineno + 1,
                        message: format!("label must be 0 or 1, found `{other}`"),
                    })
                }
            };
            trials.push(Trial {
                label,
                utt_a: a.to_string(),
                utt_b: b.to_string(),
            });
        }
        Ok(TrialList { kind, trials })
    }
}

fn pairs_within(k: u64) -> u64 {
    k * k.saturating_sub(1) / 2
}

/// Largest balanced list (⌊n/2⌋ label-1) achievable from `ones` label-1 and
/// `zeros` label-0 candidates.
fn achievable_max(ones: u64, zeros: u64) -> u64 {
    if zeros > ones {
        2 * ones + 1
    } else {
        2 * zeros
    }
}

fn weighted_index(cum: &[u64], r: u64) -> usize {
    cum.partition_point(|&c| c <= r)
}

fn cumulate(weights: impl Iterator<Item = u64>) -> (Vec<u64>, u64) {
    let mut cum = Vec::new();
    let mut total = 0u64;
    for w in weights {
        total += w;
        cum.push(total);
    }
    (cum, total)
}

/// Uniform sampling over unordered pairs drawn inside any one group.
struct WithinPairs {
    groups: Vec<Vec<u32>>,
    cum: Vec<u64>,
    total: u64,
}

impl WithinPairs {
    fn new(groups: Vec<Vec<u32>>) -> Self {
        let groups: Vec<Vec<u32>> = groups.into_iter().filter(|g| g.len() >= 2).collect();
        let (cum, total) = cumulate(groups.iter().map(|g| pairs_within(g.len() as u64)));
        WithinPairs { groups, cum, total }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> (u32, u32) {
        let g = &self.groups[weighted_index(&self.cum, rng.random_range(0..self.total))];
        let i = rng.random_range(0..g.len());
        let mut j = rng.random_range(0..g.len() - 1);
        if j >= i {
            j += 1;
        }
        canonical(g[i], g[j])
    }

    fn enumerate(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for g in &self.groups {
            for i in 0..g.len() {
                for j in i + 1..g.len() {
                    out.push(canonical(g[i], g[j]));
                }
            }
        }
        out
    }
}

/// Uniform sampling over unordered pairs spanning two different groups.
struct CrossPairs {
    groups: Vec<Vec<u32>>,
    n: u64,
    cum: Vec<u64>,
    total: u64,
}

impl CrossPairs {
    fn new(groups: Vec<Vec<u32>>) -> Self {
        let n: u64 = groups.iter().map(|g| g.len() as u64).sum();
        // Weight per group: ordered cross pairs starting there, k·(n−k).
        let (cum, ordered_total) = cumulate(groups.iter().map(|g| g.len() as u64 * (n - g.len() as u64)));
        CrossPairs {
            groups,
            n,
            cum,
            total: ordered_total / 2,
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> (u32, u32) {
        let g1 = weighted_index(&self.cum, rng.random_range(0..2 * self.total));
        let first = self.groups[g1][rng.random_range(0..self.groups[g1].len())];
        let mut m = rng.random_range(0..self.n - self.groups[g1].len() as u64) as usize;
        for (gi, g) in self.groups.iter().enumerate() {
            if gi == g1 {
                continue;
            }
            if m < g.len() {
                return canonical(first, g[m]);
            }
            m -= g.len();
        }
        unreachable!("second index within remaining population");
    }

    fn enumerate(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for gi in 0..self.groups.len() {
            for gj in gi + 1..self.groups.len() {
                for &a in &self.groups[gi] {
                    for &b in &self.groups[gj] {
                        out.push(canonical(a, b));
                    }
                }
            }
        }
        out
    }
}

fn canonical(a: u32, b: u32) -> (u32, u32) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Draws `needed` distinct pairs from one class. Mostly rejection sampling;
/// a run of duplicate hits (a sign the request is close to the class's
/// capacity) switches to exact enumeration of the remaining candidates.
fn sample_class(
    needed: usize,
    taken: &mut HashSet<(u32, u32)>,
    rng: &mut ChaCha8Rng,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> (u32, u32),
    enumerate: impl Fn() -> Vec<(u32, u32)>,
) -> Vec<(u32, u32)> {
    let mut out = Vec::with_capacity(needed);
    let mut misses = 0u32;
    while out.len() < needed {
        if misses >= 200 {
            let mut rest: Vec<(u32, u32)> = enumerate()
                .into_iter()
                .filter(|p| !taken.contains(p))
                .collect();
            let m = needed - out.len();
            for i in 0..m {
                let j = i + rng.random_range(0..rest.len() - i);
                rest.swap(i, j);
            }
            for &p in &rest[..m] {
                taken.insert(p);
                out.push(p);
            }
            break;
        }
        let p = draw(rng);
        if taken.insert(p) {
            out.push(p);
            misses = 0;
        } else {
            misses += 1;
        }
    }
    out
}

fn eligible(
    manifest: &Manifest,
    split: Option<Split>,
    min_duration_s: f64,
) -> Vec<&UtteranceRef> {
    manifest
        .utterances()
        .iter()
        .filter(|u| (split.is_none() || u.split == split) && u.duration_s >= min_duration_s)
        .collect()
}

/// Builds the environment-probe list: `n_pairs` same-speaker pairs, exactly
/// ⌊n_pairs/2⌋ from the same video, no duplicates, uniformly drawn.
///
/// `split` restricts the pool (normally the test split) and `min_duration_s`
/// excludes utterances too short to score.
pub fn build_env_probe_trials(
    manifest: &Manifest,
    split: Option<Split>,
    n_pairs: usize,
    min_duration_s: f64,
    seed: u64,
) -> Result<TrialList> {
    if n_pairs == 0 {
        return Err(Error::Trials("n_pairs must be at least 1".into()));
    }
    let utts = eligible(manifest, split, min_duration_s);

    // Utterances are sorted by speaker/video/utt id, so each speaker and
    // each video is a contiguous run.
    let mut speaker_groups: Vec<Vec<Vec<u32>>> = Vec::new();
    {
        let mut cur_speaker: Option<&str> = None;
        let mut cur_video: Option<&str> = None;
        for (i, u) in utts.iter().enumerate() {
            if cur_speaker != Some(u.speaker_id.as_str()) {
                speaker_groups.push(vec![Vec::new()]);
                cur_speaker = Some(u.speaker_id.as_str());
                cur_video = Some(u.video_id.as_str());
            } else if cur_video != Some(u.video_id.as_str()) {
                speaker_groups.last_mut().expect("speaker").push(Vec::new());
                cur_video = Some(u.video_id.as_str());
            }
            speaker_groups
                .last_mut()
                .expect("speaker")
                .last_mut()
                .expect("video")
                .push(i as u32);
        }
    }

    let within = WithinPairs::new(speaker_groups.iter().flatten().cloned().collect());
    let crosses: Vec<CrossPairs> = speaker_groups
        .iter()
        .map(|videos| CrossPairs::new(videos.clone()))
        .filter(|c| c.total > 0)
        .collect();
    let (cross_cum, cross_total) = cumulate(crosses.iter().map(|c| c.total));

    let need_same = n_pairs / 2;
    let need_diff = n_pairs - need_same;
    if (need_same as u64) > within.total || (need_diff as u64) > cross_total {
        return Err(Error::Trials(format!(
            "requested {n_pairs} environment-probe pairs ({need_same} same-video, {need_diff} \
             cross-video) but the corpus offers {}/{}; achievable maximum is {}",
            within.total,
            cross_total,
            achievable_max(within.total, cross_total)
        )));
    }

    let mut rng = named_rng(seed, "trials/env_probe");
    let mut taken = HashSet::new();
    let same = sample_class(need_same, &mut taken, &mut rng, |r| within.draw(r), || {
        within.enumerate()
    });
    let diff = sample_class(
        need_diff,
        &mut taken,
        &mut rng,
        |r| {
            let c = &crosses[weighted_index(&cross_cum, r.random_range(0..cross_total))];
            c.draw(r)
        },
        || crosses.iter().flat_map(CrossPairs::enumerate).collect(),
    );

    let mut trials: Vec<Trial> = Vec::with_capacity(n_pairs);
    for (label, pairs) in [(1u8, same), (0u8, diff)] {
        for (a, b) in pairs {
            trials.push(Trial {
                label,
                utt_a: utts[a as usize].utt_id.clone(),
                utt_b: utts[b as usize].utt_id.clone(),
            });
        }
    }
    trials.shuffle(&mut rng);
    Ok(TrialList {
        kind: TrialKind::EnvProbe,
        trials,
    })
}

/// Builds a speaker-verification list: ⌊n_pairs/2⌋ same-speaker pairs and
/// the rest cross-speaker, no duplicates, uniformly drawn.
pub fn build_verif_trials(
    manifest: &Manifest,
    split: Option<Split>,
    n_pairs: usize,
    min_duration_s: f64,
    seed: u64,
) -> Result<TrialList> {
    if n_pairs == 0 {
        return Err(Error::Trials("n_pairs must be at least 1".into()));
    }
    let utts = eligible(manifest, split, min_duration_s);

    let mut speakers: Vec<Vec<u32>> = Vec::new();
    let mut cur: Option<&str> = None;
    for (i, u) in utts.iter().enumerate() {
        if cur != Some(u.speaker_id.as_str()) {
            speakers.push(Vec::new());
            cur = Some(u.speaker_id.as_str());
        }
        speakers.last_mut().expect("speaker run").push(i as u32);
    }

    let within = WithinPairs::new(speakers.clone());
    let cross = CrossPairs::new(speakers);

    let need_pos = n_pairs / 2;
    let need_neg = n_pairs - need_pos;
    if (need_pos as u64) > within.total || (need_neg as u64) > cross.total {
        return Err(Error::Trials(format!(
            "requested {n_pairs} verification pairs ({need_pos} same-speaker, {need_neg} \
             cross-speaker) but the corpus offers {}/{}; achievable maximum is {}",
            within.total,
            cross.total,
            achievable_max(within.total, cross.total)
        )));
    }

    let mut rng = named_rng(seed, "trials/verif");
    let mut taken = HashSet::new();
    let pos = sample_class(need_pos, &mut taken, &mut rng, |r| within.draw(r), || {
        within.enumerate()
    });
    let neg = sample_class(need_neg, &mut taken, &mut rng, |r| cross.draw(r), || {
        cross.enumerate()
    });

    let mut trials: Vec<Trial> = Vec::with_capacity(n_pairs);
    for (label, pairs) in [(1u8, pos), (0u8, neg)] {
        for (a, b) in pairs {
            trials.push(Trial {
                label,
                utt_a: utts[a as usize].utt_id.clone(),
                utt_b: utts[b as usize].utt_id.clone(),
            });
        }
    }
    trials.shuffle(&mut rng);
    Ok(TrialList {
        kind: TrialKind::SpeakerVerif,
        trials,
    })
}
