//! Directory-tree scanning into a manifest.

use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use super::{Manifest, UtteranceRef};
use crate::dsp::wav_duration_s;
use crate::error::{Error, Result};

/// Result of a corpus scan: the manifest plus the files that were skipped
/// because their headers could not be read.
#[derive(Debug)]
pub struct CorpusScan {
    pub manifest: Manifest,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Walks a `speaker/video/utterance.wav` tree into a manifest.
///
/// Only files exactly three levels below `root` with a `.wav` extension are
/// considered; anything else in the tree is ignored. Unreadable audio files
/// are skipped and reported, an entirely empty corpus is an error. Ordering
/// is deterministic (manifests sort by utterance id).
pub fn scan_corpus(root: &Path) -> Result<CorpusScan> {
    if !root.is_dir() {
        return Err(Error::Manifest(format!(
            "corpus root {} is not a directory",
            root.display()
        )));
    }

    let mut utterances = Vec::new();
    let mut skipped = Vec::new();
    for entry in WalkDir::new(root)
        .min_depth(3)
        .max_depth(3)
        .sort_by_file_name()
    {
        let entry = match entry {
            Ok(e) => e,
            Err(e) => {
                let path = e.path().map_or_else(|| root.to_path_buf(), Path::to_path_buf);
                skipped.push((path, e.to_string()));
                continue;
            }
        };
        if !entry.file_type().is_file() {
            continue;
        }
        let path = entry.path();
        let is_wav = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        if !is_wav {
            continue;
        }

        let rel = path.strip_prefix(root).expect("walked path under root");
        let mut parts = rel.iter().map(|p| p.to_string_lossy().into_owned());
        let (speaker_id, video_id, file) = match (parts.next(), parts.next(), parts.next()) {
            (Some(s), Some(v), Some(f)) => (s, v, f),
            _ => continue,
        };
        let stem = Path::new(&file)
            .file_stem()
            .map_or_else(|| file.clone(), |s| s.to_string_lossy().into_owned());

        let duration_s = match wav_duration_s(path) {
            Ok(d) => d,
            Err(e) => {
                skipped.push((path.to_path_buf(), e.to_string()));
                continue;
            }
        };

        utterances.push(UtteranceRef {
            utt_id: format!("{speaker_id}/{video_id}/{stem}"),
            speaker_id,
            video_id,
            path: path.to_path_buf(),
            duration_s,
            split: None,
        });
    }

    if utterances.is_empty() {
        return Err(Error::Manifest(format!(
            "empty corpus: no speaker/video/utterance WAV files under {}",
            root.display()
        )));
    }
    let manifest = Manifest::from_utterances(utterances)?;
    Ok(CorpusScan { manifest, skipped })
}
