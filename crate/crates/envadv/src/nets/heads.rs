//! Heads that sit on top of the pooled embedding: the environment network
//! (two 512-wide fully connected layers, each preceded by batch
//! normalisation and a ReLU), the speaker classifier (one affine layer to
//! the speaker logits), and the verification head (affine 512 → 512).

use ndarray::Array2;

use super::layers::{BatchNorm1d, BnMode, Linear, Relu, TensorMut};
use crate::num::Real;

/// One env-net stage: normalisation and activation in a configurable order,
/// then a fully connected layer.
struct EnvStage<R> {
    bn: BatchNorm1d<R>,
    relu: Relu,
    fc: Linear<R>,
}

/// Maps a pooled embedding to an environment embedding of the same width.
///
/// `relu_first` picks ReLU→BN over BN→ReLU for the pre-FC pair; `l2_norm`
/// projects the output onto the unit sphere so the triplet loss compares
/// directions rather than magnitudes.
pub struct EnvNet<R> {
    stages: Vec<EnvStage<R>>,
    pub relu_first: bool,
    pub l2_norm: bool,
    norm_cache: Option<NormCache<R>>,
}

struct NormCache<R> {
    unit: Array2<R>,
    inv_len: Vec<R>,
}

impl<R: Real> EnvNet<R> {
    pub fn new(seed: u64, prefix: &str, dim: usize, relu_first: bool, l2_norm: bool) -> Self {
        let stages = (0..2)
            .map(|i| EnvStage {
                bn: BatchNorm1d::new(dim),
                relu: Relu::new(),
                fc: Linear::new(seed, &format!("{prefix}/fc{i}/w"), dim, dim),
            })
            .collect();
        EnvNet { stages, relu_first, l2_norm, norm_cache: None }
    }

    fn normalize(&mut self, mut y: Array2<R>, train: bool) -> Array2<R> {
        if !self.l2_norm {
            return y;
        }
        let eps = R::real(1e-12);
        let mut inv_len = Vec::with_capacity(y.nrows());
        for mut row in y.rows_mut() {
            let len = row.iter().map(|&v| v * v).sum::<R>().sqrt().max(eps);
            let inv = R::one() / len;
            row.mapv_inplace(|v| v * inv);
            inv_len.push(inv);
        }
        if train {
            self.norm_cache = Some(NormCache { unit: y.clone(), inv_len });
        }
        y
    }

    pub fn forward(&mut self, x: &Array2<R>, mode: BnMode) -> Array2<R> {
        let mut y = x.clone();
        for stage in &mut self.stages {
            y = if self.relu_first {
                let a = stage.relu.forward2(&y);
                stage.bn.forward(&a, mode)
            } else {
                let a = stage.bn.forward(&y, mode);
                stage.relu.forward2(&a)
            };
            y = stage.fc.forward(&y);
        }
        self.normalize(y, true)
    }

    pub fn infer(&self, x: &Array2<R>) -> Array2<R> {
        let mut y = x.clone();
        for stage in &self.stages {
            y = if self.relu_first {
                stage.bn.infer(&Relu::infer2(&y))
            } else {
                Relu::infer2(&stage.bn.infer(&y))
            };
            y = stage.fc.infer(&y);
        }
        let mut y = y;
        if self.l2_norm {
            let eps = R::real(1e-12);
            for mut row in y.rows_mut() {
                let len = row.iter().map(|&v| v * v).sum::<R>().sqrt().max(eps);
                row.mapv_inplace(|v| v / len);
            }
        }
        y
    }

    pub fn backward(&mut self, de: &Array2<R>) -> Array2<R> {
        let mut d = de.clone();
        if self.l2_norm {
            let cache = self.norm_cache.take().expect("forward before backward");
            // d(x/‖x‖) = (I − x̂ x̂ᵀ) / ‖x‖ applied to the downstream gradient.
            for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                let unit = cache.unit.row(i);
                let dot = row.iter().zip(unit.iter()).map(|(&g, &u)| g * u).sum::<R>();
                let inv = cache.inv_len[i];
                for (g, &u) in row.iter_mut().zip(unit.iter()) {
                    *g = (*g - dot * u) * inv;
                }
            }
        }
        for stage in self.stages.iter_mut().rev() {
            d = stage.fc.backward(&d);
            d = if self.relu_first {
                let a = stage.bn.backward(&d);
                stage.relu.backward2(&a)
            } else {
                let a = stage.relu.backward2(&d);
                stage.bn.backward(&a)
            };
        }
        d
    }

    pub fn tensors<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, R>>) {
        for (i, stage) in self.stages.iter_mut().enumerate() {
            stage.bn.tensors(&format!("{prefix}/bn{i}"), out);
            stage.fc.tensors(&format!("{prefix}/fc{i}"), out);
        }
    }
}

/// Linear classifier over speakers.
pub struct SpeakerHead<R> {
    pub fc: Linear<R>,
}

impl<R: Real> SpeakerHead<R> {
    pub fn new(seed: u64, prefix: &str, dim: usize, n_speakers: usize) -> Self {
        SpeakerHead { fc: Linear::new(seed, &format!("{prefix}/w"), dim, n_speakers) }
    }

    pub fn forward(&mut self, x: &Array2<R>) -> Array2<R> {
        self.fc.forward(x)
    }

    pub fn infer(&self, x: &Array2<R>) -> Array2<R> {
        self.fc.infer(x)
    }

    pub fn backward(&mut self, dy: &Array2<R>) -> Array2<R> {
        self.fc.backward(dy)
    }

    pub fn tensors<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, R>>) {
        self.fc.tensors(prefix, out);
    }
}

/// Affine projection trained with the contrastive objective; keeps the
/// embedding width.
pub struct VerifHead<R> {
    pub fc: Linear<R>,
}

impl<R: Real> VerifHead<R> {
    pub fn new(seed: u64, prefix: &str, dim: usize) -> Self {
        VerifHead { fc: Linear::new(seed, &format!("{prefix}/w"), dim, dim) }
    }

    pub fn forward(&mut self, x: &Array2<R>) -> Array2<R> {
        self.fc.forward(x)
    }

    pub fn infer(&self, x: &Array2<R>) -> Array2<R> {
        self.fc.infer(x)
    }

    pub fn backward(&mut self, dy: &Array2<R>) -> Array2<R> {
        self.fc.backward(dy)
    }

    pub fn tensors<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, R>>) {
        self.fc.tensors(prefix, out);
    }
}
