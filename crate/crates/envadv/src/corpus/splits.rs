//! Development/test split assignment.
//!
//! Two split shapes exist. Identification splits hold out unseen utterances
//! of seen speakers: every speaker appears on both sides. Verification
//! splits hold out whole speakers: the test side is speaker-disjoint from
//! the development side. Official split files are ingested when available;
//! otherwise seeded random splits with the same shapes are generated, which
//! is how the synthetic corpus is handled.

use std::collections::{BTreeMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;

use super::{Manifest, Split, UtteranceRef};
use crate::error::{Error, Result};
use crate::rng::named_rng;

/// Which task's split shape to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTask {
    Iden,
    Verif,
}

impl std::str::FromStr for SplitTask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iden" => Ok(SplitTask::Iden),
            "verif" => Ok(SplitTask::Verif),
            other => Err(Error::Config(format!("unknown split task `{other}`"))),
        }
    }
}

/// Proportions for generated (non-official) splits.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SplitOptions {
    /// Per-speaker fraction of utterances held out for identification test.
    pub iden_test_fraction: f64,
    /// Fraction of speakers held out for verification test.
    pub verif_test_speaker_fraction: f64,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions {
            iden_test_fraction: 0.05,
            verif_test_speaker_fraction: 0.10,
        }
    }
}

/// Assigns seeded random splits of the requested shape.
///
/// Identification mode drops speakers with fewer than two utterances (they
/// cannot appear on both sides); each dropped speaker is reported in the
/// returned warnings. At least one utterance per speaker lands in test and
/// at least one in dev. Verification mode holds out whole speakers.
pub fn make_splits(
    manifest: &Manifest,
    task: SplitTask,
    seed: u64,
    opts: &SplitOptions,
) -> Result<(Manifest, Vec<String>)> {
    match task {
        SplitTask::Iden => make_iden_splits(manifest, seed, opts),
        SplitTask::Verif => make_verif_splits(manifest, seed, opts),
    }
}

fn make_iden_splits(
    manifest: &Manifest,
    seed: u64,
    opts: &SplitOptions,
) -> Result<(Manifest, Vec<String>)> {
    let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, u) in manifest.utterances().iter().enumerate() {
        by_speaker.entry(&u.speaker_id).or_default().push(i);
    }

    let mut rng = named_rng(seed, "split/iden");
    let mut warnings = Vec::new();
    let mut utterances = Vec::with_capacity(manifest.len());
    for (speaker, mut indices) in by_speaker {
        if indices.len() < 2 {
            warnings.push(format!(
                "speaker {speaker} has {} utterance(s), needs 2 for an identification split; dropped",
                indices.len()
            ));
            continue;
        }
        indices.shuffle(&mut rng);
        let n_test = ((indices.len() as f64 * opts.iden_test_fraction).round() as usize)
            .clamp(1, indices.len() - 1);
        for (rank, &idx) in indices.iter().enumerate() {
            let mut u = manifest.utterances()[idx].clone();
            u.split = Some(if rank < n_test {
                Split::TestIden
            } else {
                Split::DevIden
            });
            utterances.push(u);
        }
    }

    if utterances.is_empty() {
        return Err(Error::Manifest(
            "no speaker has enough utterances for an identification split".into(),
        ));
    }
    Ok((Manifest::from_utterances(utterances)?, warnings))
}

fn make_verif_splits(
    manifest: &Manifest,
    seed: u64,
    opts: &SplitOptions,
) -> Result<(Manifest, Vec<String>)> {
    let mut speakers: Vec<&str> = manifest.speakers().iter().map(String::as_str).collect();
    if speakers.len() < 2 {
        return Err(Error::Manifest(
            "verification split needs at least 2 speakers".into(),
        ));
    }
    let mut rng = named_rng(seed, "split/verif");
    speakers.shuffle(&mut rng);
    let n_test = ((speakers.len() as f64 * opts.verif_test_speaker_fraction).round() as usize)
        .clamp(1, speakers.len() - 1);
    let test: HashSet<&str> = speakers[..n_test].iter().copied().collect();

    let utterances: Vec<UtteranceRef> = manifest
        .utterances()
        .iter()
        .map(|u| {
            let mut u = u.clone();
            u.split = Some(if test.contains(u.speaker_id.as_str()) {
                Split::TestVerif
            } else {
                Split::DevVerif
            });
            u
        })
        .collect();
    Ok((Manifest::from_utterances(utterances)?, Vec::new()))
}

/// Ingests an official identification split file: one `N speaker/video/utt`
/// entry per line, where N=1 marks training, 2 validation, and 3 test.
/// Training and validation both map to the development side (the trainer
/// carves its own validation subset); utterances absent from the file keep
/// no split.
pub fn apply_iden_split_file(manifest: &Manifest, list: &Path) -> Result<Manifest> {
    let file = std::fs::File::open(list).map_err(|e| Error::io(list, e))?;
    let mut assignment: BTreeMap<String, Split> = BTreeMap::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(list, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(tag), Some(id)) = (parts.next(), parts.next()) else {
            return Err(Error::ManifestParse {
                path: list.to_path_buf(),
                line: lineno + 1,
                message: "expected `N speaker/video/utterance`".into(),
            });
        };
        let split = match tag {
            "1" | "2" => Split::DevIden,
            "3" => Split::TestIden,
            other => {
                return Err(Error::ManifestParse {
                    path: list.to_path_buf(),
                    line: lineno + 1,
                    message: format!("unknown split tag `{other}`"),
                })
            }
        };
        let utt_id = id.trim_end_matches(".wav").to_string();
        assignment.insert(utt_id, split);
    }

    let utterances = manifest
        .utterances()
        .iter()
        .map(|u| {
            let mut u = u.clone();
            u.split = assignment.get(&u.utt_id).copied();
            u
        })
        .collect();
    Manifest::from_utterances(utterances)
}

/// Ingests an official verification speaker list: one test speaker id per
/// line. Listed speakers' utterances become verification test, everything
/// else development.
pub fn apply_verif_speaker_file(manifest: &Manifest, list: &Path) -> Result<Manifest> {
    let content = std::fs::read_to_string(list).map_err(|e| Error::io(list, e))?;
    let test: HashSet<&str> = content
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect();

    let utterances = manifest
        .utterances()
        .iter()
        .map(|u| {
            let mut u = u.clone();
            u.split = Some(if test.contains(u.speaker_id.as_str()) {
                Split::TestVerif
            } else {
                Split::DevVerif
            });
            u
        })
        .collect();
    Manifest::from_utterances(utterances)
}
