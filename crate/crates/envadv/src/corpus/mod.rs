//! Corpus manifests, splits, triplet sampling, and trial lists.
//!
//! A corpus is a directory tree `speaker/video/utterance.wav`. The video
//! level is the free environment label: two utterances from the same video
//! are assumed to share a recording environment. Manifests capture that
//! structure as flat records; everything downstream (batch sampling, trial
//! generation, evaluation) works from the manifest alone and touches audio
//! only through utterance paths.

mod sampler;
mod scan;
mod splits;
mod trials;

pub use sampler::{sample_triplet_batch, CropRef, TripletSampler, TripletSpec};
pub use scan::{scan_corpus, CorpusScan};
pub use splits::{
    apply_iden_split_file, apply_verif_speaker_file, make_splits, SplitOptions, SplitTask,
};
pub use trials::{build_env_probe_trials, build_verif_trials, Trial, TrialKind, TrialList};

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Published corpus statistics for the full-scale VoxCeleb1 setup, kept as
/// reference targets. Desk-scale runs use the synthetic corpus instead; these
/// constants document what the real-data manifests must count up to.
pub mod reference {
    /// Speakers in the identification task.
    pub const VOX1_SPEAKERS: usize = 1_211;
    /// Identification development utterances.
    pub const VOX1_IDEN_DEV_UTTS: usize = 140_638;
    /// Identification test utterances.
    pub const VOX1_IDEN_TEST_UTTS: usize = 7_972;
    /// Verification development utterances.
    pub const VOX1_VERIF_DEV_UTTS: usize = 148_610;
    /// Verification test speakers.
    pub const VOX1_VERIF_TEST_SPEAKERS: usize = 40;
    /// Verification test utterances.
    pub const VOX1_VERIF_TEST_UTTS: usize = 4_874;
    /// Environment-probe trial pairs (same-speaker, half same-video).
    pub const VOX1_ENV_PROBE_PAIRS: usize = 9_486;
}

/// Which half of which task an utterance belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    DevIden,
    TestIden,
    DevVerif,
    TestVerif,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::DevIden => "dev_iden",
            Split::TestIden => "test_iden",
            Split::DevVerif => "dev_verif",
            Split::TestVerif => "test_verif",
        }
    }

    pub fn parse(token: &str) -> Option<Option<Split>> {
        match token {
            "dev_iden" => Some(Some(Split::DevIden)),
            "test_iden" => Some(Some(Split::TestIden)),
            "dev_verif" => Some(Some(Split::DevVerif)),
            "test_verif" => Some(Some(Split::TestVerif)),
            "-" => Some(None),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One audio file with identity fields parsed from its
/// `speaker/video/utterance` location.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRef {
    /// `speaker_id/video_id/stem`; unique within a manifest.
    pub utt_id: String,
    pub speaker_id: String,
    /// Unique within a speaker; the (speaker, video) pair keys an environment.
    pub video_id: String,
    pub path: PathBuf,
    pub duration_s: f64,
    pub split: Option<Split>,
}

/// An immutable, validated utterance collection.
///
/// Utterances are ordered by `utt_id` and speakers lexicographically, so the
/// same corpus always produces the same manifest bytes and the same speaker
/// label indices.
#[derive(Debug, Clone)]
pub struct Manifest {
    utterances: Vec<UtteranceRef>,
    speakers: Vec<String>,
    speaker_index: HashMap<String, usize>,
    utt_index: HashMap<String, usize>,
}

impl Manifest {
    /// Validates and indexes a set of utterances.
    pub fn from_utterances(mut utterances: Vec<UtteranceRef>) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::Manifest("empty corpus: no utterances".into()));
        }
        for u in &utterances {
            for (field, value) in [
                ("utt_id", u.utt_id.as_str()),
                ("speaker_id", u.speaker_id.as_str()),
                ("video_id", u.video_id.as_str()),
            ] {
                if value.is_empty() {
                    return Err(Error::Manifest(format!("{}: empty {field}", u.utt_id)));
                }
                if value.contains('\t') || value.contains('\n') {
                    return Err(Error::Manifest(format!(
                        "{}: {field} contains tab or newline",
                        u.utt_id
                    )));
                }
            }
            if !u.duration_s.is_finite() || u.duration_s < 0.0 {
                return Err(Error::Manifest(format!(
                    "{}: invalid duration {}",
                    u.utt_id, u.duration_s
                )));
            }
        }

        utterances.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
        let mut utt_index = HashMap::with_capacity(utterances.len());
        for (i, u) in utterances.iter().enumerate() {
            if utt_index.insert(u.utt_id.clone(), i).is_some() {
                return Err(Error::Manifest(format!("duplicate utt_id {}", u.utt_id)));
            }
        }

        let mut speakers: Vec<String> = utterances
            .iter()
            .map(|u| u.speaker_id.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        speakers.sort();
        let speaker_index = speakers
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();

        Ok(Manifest {
            utterances,
            speakers,
            speaker_index,
            utt_index,
        })
    }

    pub fn utterances(&self) -> &[UtteranceRef] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Speaker ids in label order: index `i` is classifier label `i`.
    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    /// Classifier label for a speaker id.
    pub fn speaker_label(&self, speaker_id: &str) -> Option<usize> {
        self.speaker_index.get(speaker_id).copied()
    }

    /// Lookup by utterance id; also accepts a path-style id with an audio
    /// extension, as written by external trial lists.
    pub fn utterance(&self, utt_id: &str) -> Option<&UtteranceRef> {
        if let Some(&i) = self.utt_index.get(utt_id) {
            return Some(&self.utterances[i]);
        }
        let stripped = utt_id
            .strip_suffix(".wav")
            .or_else(|| utt_id.strip_suffix(".WAV"))?;
        self.utt_index.get(stripped).map(|&i| &self.utterances[i])
    }

    /// Utterances in one split.
    pub fn split_utterances(&self, split: Split) -> Vec<&UtteranceRef> {
        self.utterances
            .iter()
            .filter(|u| u.split == Some(split))
            .collect()
    }

    /// A filtered view (`None` keeps everything) as a new manifest. Speaker
    /// labels are re-derived from the surviving utterances.
    pub fn filtered(&self, split: Option<Split>) -> Result<Manifest> {
        let kept: Vec<UtteranceRef> = self
            .utterances
            .iter()
            .filter(|u| split.is_none() || u.split == split)
            .cloned()
            .collect();
        Manifest::from_utterances(kept)
    }

    /// Writes the tab-separated manifest format.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.utterances.len() * 96);
        writeln!(out, "# envadv manifest v1").expect("vec write");
        writeln!(out, "# utt_id\tspeaker_id\tvideo_id\tpath\tduration_s\tsplit")
            .expect("vec write");
        for u in &self.utterances {
            let split = u.split.map_or("-", Split::as_str);
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                u.utt_id,
                u.speaker_id,
                u.video_id,
                u.path.display(),
                u.duration_s,
                split
            )
            .expect("vec write");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads the format written by [`write`](Self::write).
    pub fn read(path: &Path) -> Result<Manifest> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = BufReader::new(file);
        let mut utterances = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::ManifestParse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 6 {
                return Err(parse_err(format!("expected 6 fields, found {}", fields.len())));
            }
            let duration_s: f64 = fields[4]
                .parse()
                .map_err(|e| parse_err(format!("bad duration `{}`: {e}", fields[4])))?;
            let split = Split::parse(fields[5])
                .ok_or_else(|| parse_err(format!("unknown split token `{}`", fields[5])))?;
            utterances.push(UtteranceRef {
                utt_id: fields[0].to_string(),
                speaker_id: fields[1].to_string(),
                video_id: fields[2].to_string(),
                path: PathBuf::from(fields[3]),
                duration_s,
                split,
            });
        }
        Manifest::from_utterances(utterances)
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips_losslessly() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = testutil::toy_manifest(3, 2, 2, 3.25, None);
        // Mix of split states and an awkward duration.
        let mut utts = m.utterances().to_vec();
        utts[0].split = Some(Split::DevIden);
        utts[1].split = Some(Split::TestIden);
        utts[2].duration_s = 2.000_000_3;
        m = Manifest::from_utterances(utts).unwrap();

        let path = dir.path().join("toy.manifest");
        m.write(&path).unwrap();
        let back = Manifest::read(&path).unwrap();
        assert_eq!(back.utterances(), m.utterances());
        assert_eq!(back.speakers(), m.speakers());

        // Byte-identical on rewrite.
        let path2 = dir.path().join("toy2.manifest");
        back.write(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn labels_are_lexicographic() {
        let m = testutil::toy_manifest(12, 2, 1, 3.0, None);
        let mut sorted = m.speakers().to_vec();
        sorted.sort();
        assert_eq!(m.speakers(), sorted.as_slice());
        assert_eq!(m.speaker_label("spk000"), Some(0));
        assert_eq!(m.speaker_label("spk011"), Some(11));
        assert_eq!(m.speaker_label("ghost"), None);
    }

    #[test]
    fn duplicate_and_empty_inputs_are_rejected() {
        assert!(Manifest::from_utterances(vec![]).is_err());

        let m = testutil::toy_manifest(1, 1, 1, 3.0, None);
        let mut utts = m.utterances().to_vec();
        utts.push(utts[0].clone());
        assert!(Manifest::from_utterances(utts).is_err());
    }

    #[test]
    fn utterance_lookup_accepts_path_style_ids() {
        let m = testutil::toy_manifest(2, 2, 2, 3.0, None);
        assert!(m.utterance("spk000/vid00/utt000").is_some());
        assert!(m.utterance("spk000/vid00/utt000.wav").is_some());
        assert!(m.utterance("spk000/vid00/nope").is_none());
    }
}
