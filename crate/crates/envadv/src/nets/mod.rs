//! Model architecture: trunk feature extractors, temporal pooling, and the
//! speaker, environment, and verification heads.
//!
//! A [`Model`] owns every parameter. The trainer drives its parts directly
//! (trunk → pool → heads) so each training phase can pick which parameters
//! receive gradients and which normalisation statistics are live; the
//! convenience methods here cover the shared eval-mode paths.

pub(crate) mod layers;

mod heads;
mod pool;
mod resnet;
mod vgg;

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

pub use heads::{EnvNet, SpeakerHead, VerifHead};
pub use layers::{BnMode, TensorMut};
pub use pool::{tap_backward, tap_forward, PoolKind, Sap};
pub use resnet::ThinResNet34;
pub use vgg::VggM40;

use crate::dsp::FeatureKind;
use crate::error::{Error, Result};
use crate::num::Real;

pub const EMBED_DIM: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Vggm40,
    ThinResnet34,
}

impl Arch {
    /// The feature type each trunk was designed around.
    pub fn feature_kind(self) -> FeatureKind {
        match self {
            Arch::Vggm40 => FeatureKind::Fbank40,
            Arch::ThinResnet34 => FeatureKind::Spectrogram257,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Vggm40 => "vggm40",
            Arch::ThinResnet34 => "thin_resnet34",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "vggm40" => Ok(Arch::Vggm40),
            "thin_resnet34" | "thin-resnet34" => Ok(Arch::ThinResnet34),
            other => Err(format!("unknown arch `{other}` (expected vggm40 or thin-resnet34)")),
        }
    }
}

fn default_embed_dim() -> usize {
    EMBED_DIM
}

fn default_width_mult() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrunkConfig {
    pub arch: Arch,
    pub pool: PoolKind,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    pub n_speakers: usize,
    /// Scales every trunk channel count; the embedding stays 512-wide.
    #[serde(default = "default_width_mult")]
    pub width_mult: f64,
    /// L2-normalize the environment embedding before the triplet loss.
    #[serde(default)]
    pub env_l2_norm: bool,
    /// Order the env-net pre-FC pair as ReLU→BN instead of BN→ReLU.
    #[serde(default)]
    pub env_relu_first: bool,
}

impl TrunkConfig {
    pub fn new(arch: Arch, pool: PoolKind, n_speakers: usize) -> Self {
        TrunkConfig {
            arch,
            pool,
            embed_dim: EMBED_DIM,
            n_speakers,
            width_mult: 1.0,
            env_l2_norm: false,
            env_relu_first: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim != EMBED_DIM {
            return Err(Error::Config(format!(
                "embed_dim is fixed at {EMBED_DIM}, got {}",
                self.embed_dim
            )));
        }
        if self.n_speakers < 2 {
            return Err(Error::Config(format!(
                "n_speakers must be at least 2, got {}",
                self.n_speakers
            )));
        }
        if !(self.width_mult > 0.0 && self.width_mult <= 8.0) {
            return Err(Error::Config(format!(
                "width_mult must be in (0, 8], got {}",
                self.width_mult
            )));
        }
        Ok(())
    }
}

pub enum Trunk<R> {
    Vgg(Box<VggM40<R>>),
    Resnet(Box<ThinResNet34<R>>),
}

impl<R: Real> Trunk<R> {
    pub fn forward(&mut self, x: &Array4<R>, mode: BnMode) -> Array4<R> {
        match self {
            Trunk::Vgg(t) => t.forward(x, mode),
            Trunk::Resnet(t) => t.forward(x, mode),
        }
    }

    pub fn infer(&self, x: &Array4<R>) -> Array4<R> {
        match self {
            Trunk::Vgg(t) => t.infer(x),
            Trunk::Resnet(t) => t.infer(x),
        }
    }

    pub fn backward(&mut self, dy: &Array4<R>) -> Array4<R> {
        match self {
            Trunk::Vgg(t) => t.backward(dy),
            Trunk::Resnet(t) => t.backward(dy),
        }
    }

    pub fn out_time(&self, t: usize) -> Option<usize> {
        match self {
            Trunk::Vgg(t2) => t2.out_time(t),
            Trunk::Resnet(t2) => t2.out_time(t),
        }
    }

    pub fn expected_bins(&self) -> usize {
        match self {
            Trunk::Vgg(t) => t.expected_bins(),
            Trunk::Resnet(t) => t.expected_bins(),
        }
    }

    pub fn check_input(&self, bins: usize) -> Result<()> {
        match self {
            Trunk::Vgg(t) => t.check_input(bins),
            Trunk::Resnet(t) => t.check_input(bins),
        }
    }

    pub fn tensors<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, R>>) {
        match self {
            Trunk::Vgg(t) => t.tensors(prefix, out),
            Trunk::Resnet(t) => t.tensors(prefix, out),
        }
    }
}

/// Temporal pooling with the state the backward pass needs.
pub enum Pool<R> {
    Tap { last_t: Option<usize> },
    Sap(Box<Sap<R>>),
}

impl<R: Real> Pool<R> {
    pub fn forward(&mut self, frames: &Array3<R>) -> Array2<R> {
        match self {
            Pool::Tap { last_t } => {
                *last_t = Some(frames.dim().2);
                tap_forward(frames)
            }
            Pool::Sap(sap) => sap.forward(frames),
        }
    }

    pub fn infer(&self, frames: &Array3<R>) -> Array2<R> {
        match self {
            Pool::Tap { .. } => tap_forward(frames),
            Pool::Sap(sap) => sap.infer(frames),
        }
    }

    pub fn backward(&mut self, de: &Array2<R>) -> Array3<R> {
        match self {
            Pool::Tap { last_t } => {
                let t = last_t.take().expect("forward before backward");
                tap_backward(de, t)
            }
            Pool::Sap(sap) => sap.backward(de),
        }
    }

    pub fn tensors<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, R>>) {
        if let Pool::Sap(sap) = self {
            sap.tensors(prefix, out);
        }
    }
}

pub struct Model<R> {
    pub cfg: TrunkConfig,
    pub trunk: Trunk<R>,
    pub pool: Pool<R>,
    pub speaker_head: SpeakerHead<R>,
    pub env_net: EnvNet<R>,
    pub verif_head: VerifHead<R>,
}

impl<R: Real> Model<R> {
    pub fn new(cfg: &TrunkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let bins = cfg.arch.feature_kind().bins();
        let trunk = match cfg.arch {
            Arch::Vggm40 => Trunk::Vgg(Box::new(VggM40::new(seed, "trunk", cfg.width_mult, bins)?)),
            Arch::ThinResnet34 => {
                Trunk::Resnet(Box::new(ThinResNet34::new(seed, "trunk", cfg.width_mult, bins)?))
            }
        };
        let pool = match cfg.pool {
            PoolKind::Tap => Pool::Tap { last_t: None },
            PoolKind::Sap => Pool::Sap(Box::new(Sap::new(seed, "pool/w", EMBED_DIM))),
        };
        Ok(Model {
            trunk,
            pool,
            speaker_head: SpeakerHead::new(seed, "speaker_head", EMBED_DIM, cfg.n_speakers),
            env_net: EnvNet::new(seed, "env_net", EMBED_DIM, cfg.env_relu_first, cfg.env_l2_norm),
            verif_head: VerifHead::new(seed, "verif_head", EMBED_DIM),
            cfg: cfg.clone(),
        })
    }

    /// Checks a batch of feature maps against the trunk's expected layout.
    pub fn check_features(&self, bins: usize, frames: usize) -> Result<()> {
        self.trunk.check_input(bins)?;
        if self.trunk.out_time(frames).is_none() {
            return Err(Error::Model(format!(
                "input with {frames} frames is too short for the trunk's time strides"
            )));
        }
        Ok(())
    }

    /// Eval-mode frame features for one segment: [F × T] → [512 × T′].
    pub fn trunk_forward(&self, features: &Array2<R>) -> Result<Array2<R>> {
        let (bins, frames) = features.dim();
        self.check_features(bins, frames)?;
        let x = features
            .to_owned()
            .into_shape_with_order((1, 1, bins, frames))
            .expect("shape");
        let y = self.trunk.infer(&x);
        let (_, c, _, t) = y.dim();
        Ok(y.into_shape_with_order((c, t)).expect("collapsed frequency axis"))
    }

    /// Eval-mode embeddings for a feature batch: [N, F, T] → [N, 512].
    pub fn embed(&self, features: &Array3<R>) -> Result<Array2<R>> {
        let (n, bins, frames) = features.dim();
        self.check_features(bins, frames)?;
        let x = features
            .to_owned()
            .into_shape_with_order((n, 1, bins, frames))
            .expect("shape");
        let frame_feats = collapse_freq(self.trunk.infer(&x));
        Ok(self.pool.infer(&frame_feats))
    }

    /// Every named parameter and buffer, in a stable order.
    pub fn tensors(&mut self) -> Vec<TensorMut<'_, R>> {
        let mut out = Vec::new();
        self.trunk.tensors("trunk", &mut out);
        self.pool.tensors("pool", &mut out);
        self.speaker_head.tensors("speaker_head", &mut out);
        self.env_net.tensors("env_net", &mut out);
        self.verif_head.tensors("verif_head", &mut out);
        out
    }

    pub fn n_params(&mut self) -> usize {
        self.tensors().iter().map(|t| t.value.len()).sum()
    }
}

/// Scales each row to unit length; returns the unit rows and each row's
/// reciprocal length. Rows shorter than ~1e-12 are passed through unscaled.
pub fn l2_normalize_rows<R: Real>(x: &Array2<R>) -> (Array2<R>, Vec<R>) {
    let mut unit = x.clone();
    let mut inv_len = Vec::with_capacity(x.dim().0);
    for mut row in unit.rows_mut() {
        let len = row.iter().map(|&v| v * v).sum::<R>().sqrt();
        let inv = if len > R::real(1e-12) {
            R::one() / len
        } else {
            R::one()
        };
        row.mapv_inplace(|v| v * inv);
        inv_len.push(inv);
    }
    (unit, inv_len)
}

/// Backward of [`l2_normalize_rows`]: projects out the component of the
/// upstream gradient along each unit row, then rescales.
pub fn l2_normalize_rows_backward<R: Real>(
    unit: &Array2<R>,
    inv_len: &[R],
    dy: &Array2<R>,
) -> Array2<R> {
    assert_eq!(unit.dim(), dy.dim());
    assert_eq!(unit.dim().0, inv_len.len());
    let mut dx = Array2::zeros(dy.dim());
    for i in 0..dy.dim().0 {
        let u = unit.row(i);
        let g = dy.row(i);
        let along = g.iter().zip(u.iter()).map(|(&a, &b)| a * b).sum::<R>();
        for j in 0..dy.dim().1 {
            dx[(i, j)] = (g[j] - along * u[j]) * inv_len[i];
        }
    }
    dx
}

/// [N, 512, 1, T′] → [N, 512, T′].
pub fn collapse_freq<R: Real>(y: Array4<R>) -> Array3<R> {
    let (n, c, h, t) = y.dim();
    assert_eq!(h, 1, "frequency axis must be collapsed before pooling");
    y.into_shape_with_order((n, c, t)).expect("contiguous")
}

/// [N, 512, T′] → [N, 512, 1, T′].
pub fn expand_freq<R: Real>(d: Array3<R>) -> Array4<R> {
    let (n, c, t) = d.dim();
    d.into_shape_with_order((n, c, 1, t)).expect("contiguous")
}
