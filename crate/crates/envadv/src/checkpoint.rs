//! Versioned checkpoint container.
//!
//! A checkpoint is one file holding everything needed to continue or evaluate
//! a run: the trunk configuration, the dsp and run config hashes, every named
//! parameter and normalisation buffer, optimizer velocities, and the training
//! position (epoch, best validation metric, data RNG state). The layout is a
//! small binary envelope around a JSON header:
//!
//! ```text
//! magic "EADVCKPT" | u32 format version | u64 header length | JSON header | f32 LE payload
//! ```
//!
//! The header carries all metadata plus a tensor index (name, shape, byte
//! offset); the payload is the concatenated tensor data. Saving goes through
//! a temp file and rename, so an interrupted write never leaves a truncated
//! checkpoint under the real name.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nets::{Model, TrunkConfig};
use crate::rng::RngState;

const MAGIC: &[u8; 8] = b"EADVCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Prefix distinguishing optimizer state from model tensors in the index.
pub const OPTIM_PREFIX: &str = "optim/v/";

/// SHA-256 of a value's canonical JSON form, as lowercase hex.
///
/// Used to fingerprint configuration structs: the dsp settings hash keys the
/// feature cache, and the run-config hash is stamped into checkpoints and
/// evaluation reports so mismatched artifacts are detectable.
pub fn json_sha256<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config types serialize infallibly");
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(64);
    for b in digest {
        use std::fmt::Write;
        let _ = write!(hex, "{b:02x}");
    }
    hex
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    cfg: TrunkConfig,
    dsp_hash: String,
    run_hash: String,
    epoch: usize,
    best_val_metric: f64,
    epochs_since_improve: usize,
    data_rng: Option<RngState>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

/// In-memory checkpoint: model tensors plus run position, addressable by name.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub cfg: TrunkConfig,
    pub dsp_hash: String,
    pub run_hash: String,
    pub epoch: usize,
    /// Best validation top-1 so far; -1 before any validation pass.
    pub best_val_metric: f64,
    pub epochs_since_improve: usize,
    /// Training data stream position, captured at the end of the saved epoch.
    pub data_rng: Option<RngState>,
    tensors: Vec<NamedTensor>,
    index: HashMap<String, usize>,
}

impl Checkpoint {
    /// Snapshots every tensor of `model` into an owned container.
    ///
    /// Training position fields start at their pre-training values; the
    /// trainer overwrites them before saving.
    pub fn from_model(model: &mut Model<f32>, dsp_hash: &str, run_hash: &str) -> Self {
        let cfg = model.cfg.clone();
        let mut ck = Checkpoint {
            cfg,
            dsp_hash: dsp_hash.to_string(),
            run_hash: run_hash.to_string(),
            epoch: 0,
            best_val_metric: -1.0,
            epochs_since_improve: 0,
            data_rng: None,
            tensors: Vec::new(),
            index: HashMap::new(),
        };
        for t in model.tensors() {
            ck.push(&t.name, t.shape.clone(), t.value.to_vec());
        }
        ck
    }

    /// Adds one named tensor. Panics on a duplicate name; callers own the
    /// namespace (model tensors plus [`OPTIM_PREFIX`] entries).
    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "{name}: shape/data mismatch"
        );
        let prev = self.index.insert(name.to_string(), self.tensors.len());
        assert!(prev.is_none(), "duplicate tensor {name}");
        self.tensors.push(NamedTensor {
            name: name.to_string(),
            shape,
            data,
        });
    }

    /// Every stored tensor name, in storage order.
    pub fn tensor_names(&self) -> Vec<String> {
        self.tensors.iter().map(|t| t.name.clone()).collect()
    }

    /// Looks up one tensor by name.
    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.index
            .get(name)
            .map(|&i| (self.tensors[i].shape.as_slice(), self.tensors[i].data.as_slice()))
    }

    /// Optimizer velocities keyed by the parameter name they belong to.
    pub fn velocities(&self) -> HashMap<String, Vec<f32>> {
        self.tensors
            .iter()
            .filter_map(|t| {
                t.name
                    .strip_prefix(OPTIM_PREFIX)
                    .map(|param| (param.to_string(), t.data.clone()))
            })
            .collect()
    }

    /// Rebuilds the model and fills every parameter and buffer from this
    /// checkpoint.
    ///
    /// Fails if the checkpoint is missing a tensor the architecture needs, if
    /// a shape disagrees, or if it carries a non-optimizer tensor the
    /// architecture does not have.
    pub fn build_model(&self) -> Result<Model<f32>> {
        let mut model = Model::new(&self.cfg, 0)?;
        let mut used = vec![false; self.tensors.len()];
        for dst in model.tensors() {
            let &i = self.index.get(&dst.name).ok_or_else(|| Error::Model(format!(
                "checkpoint has no tensor `{}` required by config {:?}/{:?}",
                dst.name, self.cfg.arch, self.cfg.pool
            )))?;
            let src = &self.tensors[i];
            if src.shape != dst.shape {
                return Err(Error::Model(format!(
                    "tensor `{}`: checkpoint shape {:?} != model shape {:?}",
                    dst.name, src.shape, dst.shape
                )));
            }
            dst.value.copy_from_slice(&src.data);
            used[i] = true;
        }
        for (t, used) in self.tensors.iter().zip(&used) {
            if !used && !t.name.starts_with(OPTIM_PREFIX) {
                return Err(Error::Model(format!(
                    "checkpoint tensor `{}` has no place in config {:?}/{:?}",
                    t.name, self.cfg.arch, self.cfg.pool
                )));
            }
        }
        Ok(model)
    }

    /// Writes the checkpoint to `path`, atomically (temp file + rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let ck_err = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };

        let mut offset = 0u64;
        let entries: Vec<TensorEntry> = self
            .tensors
            .iter()
            .map(|t| {
                let e = TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    offset,
                };
                offset += (t.data.len() * 4) as u64;
                e
            })
            .collect();
        let header = Header {
            cfg: self.cfg.clone(),
            dsp_hash: self.dsp_hash.clone(),
            run_hash: self.run_hash.clone(),
            epoch: self.epoch,
            best_val_metric: self.best_val_metric,
            epochs_since_improve: self.epochs_since_improve,
            data_rng: self.data_rng.clone(),
            tensors: entries,
        };
        let header_json =
            serde_json::to_vec(&header).map_err(|e| ck_err(format!("header encode: {e}")))?;

        let tmp = tmp_path(path);
        let write = || -> std::io::Result<()> {
            let file = std::fs::File::create(&tmp)?;
            let mut w = std::io::BufWriter::new(file);
            w.write_all(MAGIC)?;
            w.write_all(&FORMAT_VERSION.to_le_bytes())?;
            w.write_all(&(header_json.len() as u64).to_le_bytes())?;
            w.write_all(&header_json)?;
            for t in &self.tensors {
                for &v in &t.data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
            std::fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = std::fs::remove_file(&tmp);
            ck_err(e.to_string())
        })
    }

    /// Reads and validates a checkpoint file.
    pub fn load(path: &Path) -> Result<Checkpoint> {
        let ck_err = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };

        let bytes = std::fs::read(path).map_err(|e| ck_err(e.to_string()))?;
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(ck_err("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(ck_err(format!(
                "unsupported format version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let payload_start = 20usize
            .checked_add(header_len)
            .filter(|&p| p <= bytes.len())
            .ok_or_else(|| ck_err("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[20..payload_start])
            .map_err(|e| ck_err(format!("header decode: {e}")))?;
        let payload = &bytes[payload_start..];

        let mut ck = Checkpoint {
            cfg: header.cfg,
            dsp_hash: header.dsp_hash,
            run_hash: header.run_hash,
            epoch: header.epoch,
            best_val_metric: header.best_val_metric,
            epochs_since_improve: header.epochs_since_improve,
            data_rng: header.data_rng,
            tensors: Vec::with_capacity(header.tensors.len()),
            index: HashMap::new(),
        };
        let mut end = 0usize;
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            end = start
                .checked_add(n * 4)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| ck_err(format!("tensor `{}` extends past payload", e.name)))?;
            let data: Vec<f32> = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if ck.index.contains_key(&e.name) {
                return Err(ck_err(format!("duplicate tensor `{}`", e.name)));
            }
            ck.push(&e.name, e.shape, data);
        }
        if end != payload.len() {
            return Err(ck_err(format!(
                "payload has {} trailing bytes",
                payload.len() - end
            )));
        }
        Ok(ck)
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}
