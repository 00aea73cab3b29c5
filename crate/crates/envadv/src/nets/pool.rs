//! Temporal aggregation of frame features into one embedding per segment.
//!
//! Input is [N, D, T′]: a batch of D-dimensional frame sequences. TAP is the
//! arithmetic mean over time. SAP scores each frame with h_t = tanh(W·x_t+b),
//! w = softmax over t of h_tᵀ·μ, and returns Σ_t w_t·x_t; with μ = 0 every
//! frame gets weight 1/T′, which reduces SAP to TAP exactly.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use super::layers::{he_uniform, TensorMut};
use crate::num::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Tap,
    Sap,
}

impl PoolKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolKind::Tap => "tap",
            PoolKind::Sap => "sap",
        }
    }
}

impl std::str::FromStr for PoolKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tap" => Ok(PoolKind::Tap),
            "sap" => Ok(PoolKind::Sap),
            other => Err(format!("unknown pooling `{other}` (expected tap or sap)")),
        }
    }
}

/// Mean over the time axis.
pub fn tap_forward<R: Real>(x: &Array3<R>) -> Array2<R> {
    let (n, d, t) = x.dim();
    assert!(t >= 1, "empty time axis");
    let inv = R::real(1.0 / t as f64);
    let mut y = Array2::zeros((n, d));
    for ni in 0..n {
        for di in 0..d {
            let mut acc = R::zero();
            for ti in 0..t {
                acc += x[(ni, di, ti)];
            }
            y[(ni, di)] = acc * inv;
        }
    }
    y
}

/// d(mean)/dx spreads the output gradient uniformly over time.
pub fn tap_backward<R: Real>(de: &Array2<R>, t: usize) -> Array3<R> {
    let (n, d) = de.dim();
    let inv = R::real(1.0 / t as f64);
    let mut dx = Array3::zeros((n, d, t));
    for ni in 0..n {
        for di in 0..d {
            let g = de[(ni, di)] * inv;
            for ti in 0..t {
                dx[(ni, di, ti)] = g;
            }
        }
    }
    dx
}

/// Self-attentive pooling with learnable W [H×D], b [H], μ [H]; H = D here.
pub struct Sap<R> {
    pub w: Array2<R>,
    pub b: Array1<R>,
    pub mu: Array1<R>,
    pub gw: Array2<R>,
    pub gb: Array1<R>,
    pub gmu: Array1<R>,
    cache: Option<SapCache<R>>,
}

struct SapCache<R> {
    x: Array3<R>,
    h: Array3<R>,
    weights: Array2<R>,
}

impl<R: Real> Sap<R> {
    pub fn new(seed: u64, name: &str, dim: usize) -> Self {
        let mut w = Array2::zeros((dim, dim));
        he_uniform(seed, name, dim, w.as_slice_mut().expect("layout"));
        Sap {
            gw: Array2::zeros(w.dim()),
            w,
            b: Array1::zeros(dim),
            gb: Array1::zeros(dim),
            // μ starts at zero: initial attention is uniform (= TAP).
            mu: Array1::zeros(dim),
            gmu: Array1::zeros(dim),
            cache: None,
        }
    }

    /// Returns (embeddings [N,D], attention weights [N,T′]); rows of the
    /// weight matrix sum to 1.
    pub fn attend(&self, x: &Array3<R>) -> (Array2<R>, Array3<R>, Array2<R>) {
        let (n, d, t) = x.dim();
        assert!(t >= 1, "empty time axis");
        let h_dim = self.mu.len();
        let mut h = Array3::zeros((n, h_dim, t));
        let mut scores = Array2::zeros((n, t));
        for ni in 0..n {
            for ti in 0..t {
                let mut score = R::zero();
                for hi in 0..h_dim {
                    let mut z = self.b[hi];
                    for di in 0..d {
                        z += self.w[(hi, di)] * x[(ni, di, ti)];
                    }
                    let ht = z.tanh();
                    h[(ni, hi, ti)] = ht;
                    score += ht * self.mu[hi];
                }
                scores[(ni, ti)] = score;
            }
        }
        // softmax over time per sample
        let mut weights = Array2::zeros((n, t));
        for ni in 0..n {
            let row = scores.row(ni);
            let max = row.iter().copied().fold(R::neg_infinity(), R::max);
            let mut denom = R::zero();
            for ti in 0..t {
                let e = (row[ti] - max).exp();
                weights[(ni, ti)] = e;
                denom += e;
            }
            for ti in 0..t {
                weights[(ni, ti)] /= denom;
            }
        }
        let mut e = Array2::zeros((n, d));
        for ni in 0..n {
            for di in 0..d {
                let mut acc = R::zero();
                for ti in 0..t {
                    acc += weights[(ni, ti)] * x[(ni, di, ti)];
                }
                e[(ni, di)] = acc;
            }
        }
        (e, h, weights)
    }

    pub fn forward(&mut self, x: &Array3<R>) -> Array2<R> {
        let (e, h, weights) = self.attend(x);
        self.cache = Some(SapCache { x: x.clone(), h, weights });
        e
    }

    pub fn infer(&self, x: &Array3<R>) -> Array2<R> {
        self.attend(x).0
    }

    /// Attention weights for inspection; rows sum to 1.
    pub fn weights(&self, x: &Array3<R>) -> Array2<R> {
        self.attend(x).2
    }

    pub fn backward(&mut self, de: &Array2<R>) -> Array3<R> {
        let SapCache { x, h, weights } = self.cache.take().expect("forward before backward");
        let (n, d, t) = x.dim();
        let h_dim = self.mu.len();
        let mut dx = Array3::zeros((n, d, t));

        for ni in 0..n {
            // Direct path: e = Σ w_t x_t.
            let mut dw_t = vec![0.0f64; t];
            for ti in 0..t {
                let wt = weights[(ni, ti)];
                let mut dot = 0.0f64;
                for di in 0..d {
                    dx[(ni, di, ti)] += de[(ni, di)] * wt;
                    dot += de[(ni, di)].to_f64() * x[(ni, di, ti)].to_f64();
                }
                dw_t[ti] = dot;
            }
            // Softmax backward: da_t = w_t (dw_t − Σ_s w_s dw_s).
            let mix: f64 = (0..t).map(|ti| weights[(ni, ti)].to_f64() * dw_t[ti]).sum();
            for ti in 0..t {
                let da = weights[(ni, ti)].to_f64() * (dw_t[ti] - mix);
                if da == 0.0 {
                    continue;
                }
                let da = R::real(da);
                // a_t = h_tᵀ μ
                for hi in 0..h_dim {
                    let ht = h[(ni, hi, ti)];
                    self.gmu[hi] += da * ht;
                    // dz through tanh
                    let dz = da * self.mu[hi] * (R::one() - ht * ht);
                    self.gb[hi] += dz;
                    for di in 0..d {
                        self.gw[(hi, di)] += dz * x[(ni, di, ti)];
                        dx[(ni, di, ti)] += dz * self.w[(hi, di)];
                    }
                }
            }
        }
        dx
    }

    pub fn tensors<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, R>>) {
        out.push(TensorMut {
            name: format!("{prefix}/w"),
            shape: self.w.shape().to_vec(),
            value: self.w.as_slice_mut().expect("layout"),
            grad: Some(self.gw.as_slice_mut().expect("layout")),
        });
        out.push(TensorMut {
            name: format!("{prefix}/b"),
            shape: self.b.shape().to_vec(),
            value: self.b.as_slice_mut().expect("layout"),
            grad: Some(self.gb.as_slice_mut().expect("layout")),
        });
        out.push(TensorMut {
            name: format!("{prefix}/mu"),
            shape: self.mu.shape().to_vec(),
            value: self.mu.as_slice_mut().expect("layout"),
            grad: Some(self.gmu.as_slice_mut().expect("layout")),
        });
    }
}
