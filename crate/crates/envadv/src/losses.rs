//! Training objectives: the environment triplet loss, the speaker
//! cross-entropy with the environment-confusion penalty, and the
//! contrastive loss for verification-head retraining.
//!
//! Each loss comes in two forms: a per-instance scalar (the definition) and
//! a batched version returning the mean loss together with the analytic
//! gradients of that mean. Batch reduction is the mean so the confusion
//! weight α keeps the same scale at any batch size.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Real;

fn default_margin() -> f64 {
    0.3
}

fn default_contrastive_margin() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Triplet margin m.
    #[serde(default = "default_margin")]
    pub margin_m: f64,
    /// Weight of the confusion term; 0 disables the adversarial penalty.
    #[serde(default)]
    pub alpha: f64,
    #[serde(default = "default_contrastive_margin")]
    pub contrastive_margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { margin_m: 0.3, alpha: 0.0, contrastive_margin: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in
            [("margin_m", self.margin_m), ("alpha", self.alpha), ("contrastive_margin", self.contrastive_margin)]
        {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Loss(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.contrastive_margin == 0.0 {
            return Err(Error::Loss("contrastive_margin must be positive".into()));
        }
        Ok(())
    }
}

fn check_finite<R: Real>(
    what: &str,
    a: &ArrayView1<'_, R>,
    p: &ArrayView1<'_, R>,
    n: &ArrayView1<'_, R>,
) -> Result<()> {
    let ok = |v: &ArrayView1<'_, R>| v.iter().all(|x| x.is_finite());
    if ok(a) && ok(p) && ok(n) {
        Ok(())
    } else {
        Err(Error::Loss(format!("{what}: non-finite input")))
    }
}

fn sq_dist<R: Real>(a: &ArrayView1<'_, R>, b: &ArrayView1<'_, R>) -> R {
    a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Mean loss over a batch plus the gradients of its three inputs.
pub type LossGrads3<R> = (R, Array2<R>, Array2<R>, Array2<R>);

/// max(0, ‖e_a−e_p‖² − ‖e_a−e_n‖² + m): pushes same-environment pairs
/// together and different-environment pairs apart.
pub fn env_triplet_loss<R: Real>(
    e_a: ArrayView1<'_, R>,
    e_p: ArrayView1<'_, R>,
    e_n: ArrayView1<'_, R>,
    margin: f64,
) -> Result<R> {
    check_finite("env_triplet_loss", &e_a, &e_p, &e_n)?;
    let hinge = sq_dist(&e_a, &e_p) - sq_dist(&e_a, &e_n) + R::real(margin);
    Ok(hinge.max(R::zero()))
}

/// Mean triplet loss over rows plus gradients (d/d e_a, d/d e_p, d/d e_n).
pub fn env_triplet_batch<R: Real>(
    e_a: &Array2<R>,
    e_p: &Array2<R>,
    e_n: &Array2<R>,
    margin: f64,
) -> Result<LossGrads3<R>> {
    let n = batch_rows("env_triplet_batch", &[e_a, e_p, e_n])?;
    let mut total = R::zero();
    let mut da = Array2::zeros(e_a.dim());
    let mut dp = Array2::zeros(e_p.dim());
    let mut dn = Array2::zeros(e_n.dim());
    let inv = R::real(1.0 / n as f64);
    let two_inv = R::real(2.0 / n as f64);
    for i in 0..n {
        let (a, p, nv) = (e_a.row(i), e_p.row(i), e_n.row(i));
        let loss = env_triplet_loss(a, p, nv, margin)?;
        total += loss * inv;
        if loss > R::zero() {
            for j in 0..a.len() {
                let ap = a[j] - p[j];
                let an = a[j] - nv[j];
                da[(i, j)] = two_inv * (ap - an);
                dp[(i, j)] = -two_inv * ap;
                dn[(i, j)] = two_inv * an;
            }
        }
    }
    Ok((total, da, dp, dn))
}

/// KL(softmax(d_ap, d_an) ‖ uniform) and its derivatives with respect to the
/// two squared distances. Zero iff the distances are equal; supremum ln 2.
pub(crate) fn confusion_from_distances<R: Real>(d_ap: R, d_an: R) -> (R, R, R) {
    let m = d_ap.max(d_an);
    let ea = (d_ap - m).exp();
    let en = (d_an - m).exp();
    let z = ea + en;
    let p1 = ea / z;
    let p2 = en / z;
    let two = R::real(2.0);
    // x·ln(2x) → 0 as x → 0, so one-hot limits stay finite.
    let term = |p: R| if p > R::zero() { p * (two * p).ln() } else { R::zero() };
    let kl = term(p1) + term(p2);
    // dKL/dd_ap = p1·p2·ln(p1/p2); the gradient vanishes at p1 = p2 and in
    // the saturated one-hot limits.
    let g = if p1 > R::zero() && p2 > R::zero() { p1 * p2 * (p1 / p2).ln() } else { R::zero() };
    (kl, g, -g)
}

/// Confusion loss of one triplet: distances indistinguishable ⇒ 0.
pub fn confusion_loss<R: Real>(
    e_a: ArrayView1<'_, R>,
    e_p: ArrayView1<'_, R>,
    e_n: ArrayView1<'_, R>,
) -> Result<R> {
    check_finite("confusion_loss", &e_a, &e_p, &e_n)?;
    let (kl, _, _) = confusion_from_distances(sq_dist(&e_a, &e_p), sq_dist(&e_a, &e_n));
    Ok(kl)
}

/// Mean confusion loss over rows plus gradients for the three embeddings.
pub fn confusion_batch<R: Real>(
    e_a: &Array2<R>,
    e_p: &Array2<R>,
    e_n: &Array2<R>,
) -> Result<LossGrads3<R>> {
    let n = batch_rows("confusion_batch", &[e_a, e_p, e_n])?;
    let mut total = R::zero();
    let mut da = Array2::zeros(e_a.dim());
    let mut dp = Array2::zeros(e_p.dim());
    let mut dn = Array2::zeros(e_n.dim());
    let inv = R::real(1.0 / n as f64);
    for i in 0..n {
        let (a, p, nv) = (e_a.row(i), e_p.row(i), e_n.row(i));
        check_finite("confusion_batch", &a, &p, &nv)?;
        let (kl, g_ap, g_an) = confusion_from_distances(sq_dist(&a, &p), sq_dist(&a, &nv));
        total += kl * inv;
        let two = R::real(2.0);
        for j in 0..a.len() {
            let ap = a[j] - p[j];
            let an = a[j] - nv[j];
            da[(i, j)] = inv * two * (g_ap * ap + g_an * an);
            dp[(i, j)] = -inv * two * g_ap * ap;
            dn[(i, j)] = -inv * two * g_an * an;
        }
    }
    Ok((total, da, dp, dn))
}

/// Mean cross-entropy over logit rows plus d loss / d logits.
pub fn cross_entropy_batch<R: Real>(
    logits: &Array2<R>,
    labels: &[usize],
) -> Result<(R, Array2<R>)> {
    let (rows, classes) = logits.dim();
    if labels.len() != rows {
        return Err(Error::Loss(format!(
            "cross_entropy_batch: {rows} logit rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Loss(format!(
            "cross_entropy_batch: label {bad} out of range for {classes} classes"
        )));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Loss("cross_entropy_batch: non-finite logits".into()));
    }
    let mut total = R::zero();
    let mut dl = Array2::zeros(logits.dim());
    let inv = R::real(1.0 / rows as f64);
    for (i, (row, &y)) in logits.rows().into_iter().zip(labels).enumerate() {
        let max = row.iter().copied().fold(R::neg_infinity(), R::max);
        let z: R = row.iter().map(|&l| (l - max).exp()).sum();
        let lse = max + z.ln();
        total += (lse - row[y]) * inv;
        for (j, &l) in row.iter().enumerate() {
            let p = (l - max).exp() / z;
            dl[(i, j)] = p * inv;
        }
        dl[(i, y)] -= inv;
    }
    Ok((total, dl))
}

/// The pieces of the speaker-phase objective CE + α·KL.
#[derive(Debug, Clone, Copy)]
pub struct SpeakerLossParts<R> {
    pub total: R,
    pub ce: R,
    pub kl: R,
}

/// Mean CE over every segment plus α times the mean confusion loss over the
/// triplets, with gradients for the logits and the environment embeddings.
#[allow(clippy::type_complexity)]
pub fn speaker_phase_batch<R: Real>(
    logits: &Array2<R>,
    labels: &[usize],
    e_a: &Array2<R>,
    e_p: &Array2<R>,
    e_n: &Array2<R>,
    alpha: f64,
) -> Result<(SpeakerLossParts<R>, Array2<R>, Array2<R>, Array2<R>, Array2<R>)> {
    let (ce, dlogits) = cross_entropy_batch(logits, labels)?;
    let (kl, mut da, mut dp, mut dn) = confusion_batch(e_a, e_p, e_n)?;
    let a = R::real(alpha);
    da.mapv_inplace(|v| v * a);
    dp.mapv_inplace(|v| v * a);
    dn.mapv_inplace(|v| v * a);
    let parts = SpeakerLossParts { total: ce + a * kl, ce, kl };
    Ok((parts, dlogits, da, dp, dn))
}

/// Scalar speaker-phase objective for a batch (no gradients).
pub fn speaker_phase_loss<R: Real>(
    logits: &Array2<R>,
    labels: &[usize],
    e_a: &Array2<R>,
    e_p: &Array2<R>,
    e_n: &Array2<R>,
    alpha: f64,
) -> Result<SpeakerLossParts<R>> {
    Ok(speaker_phase_batch(logits, labels, e_a, e_p, e_n, alpha)?.0)
}

/// Same pairs are pulled together quadratically; different pairs are pushed
/// past the margin.
pub fn contrastive_loss<R: Real>(
    x1: ArrayView1<'_, R>,
    x2: ArrayView1<'_, R>,
    same: bool,
    margin: f64,
) -> R {
    let d2 = sq_dist(&x1, &x2);
    if same {
        d2
    } else {
        let gap = R::real(margin) - d2.sqrt();
        let gap = gap.max(R::zero());
        gap * gap
    }
}

/// Mean contrastive loss over rows plus gradients for both sides.
pub fn contrastive_batch<R: Real>(
    x1: &Array2<R>,
    x2: &Array2<R>,
    same: &[bool],
    margin: f64,
) -> Result<(R, Array2<R>, Array2<R>)> {
    let n = batch_rows("contrastive_batch", &[x1, x2])?;
    if same.len() != n {
        return Err(Error::Loss(format!(
            "contrastive_batch: {n} pairs but {} labels",
            same.len()
        )));
    }
    let mut total = R::zero();
    let mut d1 = Array2::zeros(x1.dim());
    let mut d2g = Array2::zeros(x2.dim());
    let inv = R::real(1.0 / n as f64);
    let two_inv = R::real(2.0 / n as f64);
    for i in 0..n {
        let (a, b) = (x1.row(i), x2.row(i));
        total += contrastive_loss(a, b, same[i], margin) * inv;
        if same[i] {
            for j in 0..a.len() {
                let diff = a[j] - b[j];
                d1[(i, j)] = two_inv * diff;
                d2g[(i, j)] = -two_inv * diff;
            }
        } else {
            let dist = sq_dist(&a, &b).sqrt();
            let gap = R::real(margin) - dist;
            if gap > R::zero() && dist > R::real(1e-12) {
                // d/dx1 of (margin−D)² = −2(margin−D)·(x1−x2)/D
                let scale = two_inv * gap / dist;
                for j in 0..a.len() {
                    let diff = a[j] - b[j];
                    d1[(i, j)] = -scale * diff;
                    d2g[(i, j)] = scale * diff;
                }
            }
        }
    }
    Ok((total, d1, d2g))
}

fn batch_rows<R: Real>(what: &str, mats: &[&Array2<R>]) -> Result<usize> {
    let dim = mats[0].dim();
    if mats.iter().any(|m| m.dim() != dim) {
        return Err(Error::Loss(format!("{what}: mismatched shapes")));
    }
    if dim.0 == 0 {
        return Err(Error::Loss(format!("{what}: empty batch")));
    }
    Ok(dim.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array2};
    use rand::Rng;

    use crate::nets::layers::gradcheck::check_grads;
    use crate::rng::named_rng;

    const LN_2: f64 = std::f64::consts::LN_2;

    fn filled(dim: (usize, usize), seed: u64, scale: f64) -> Array2<f64> {
        let mut rng = named_rng(seed, "test/loss_input");
        Array2::from_shape_simple_fn(dim, || rng.random_range(-scale..scale))
    }

    #[test]
    fn triplet_hand_oracles() {
        // 1-d: a=0, p=1, n=0.5, m=0.3 → max(0, 1 − 0.25 + 0.3) = 1.05.
        let v = env_triplet_loss(
            arr1(&[0.0f64]).view(),
            arr1(&[1.0]).view(),
            arr1(&[0.5]).view(),
            0.3,
        )
        .unwrap();
        assert!((v - 1.05).abs() < 1e-12, "{v}");

        // Anchor equals positive, negative far beyond the margin → 0.
        let a = arr1(&[0.2f64, -0.4]);
        let n = arr1(&[3.0, 3.0]);
        let v = env_triplet_loss(a.view(), a.view(), n.view(), 0.3).unwrap();
        assert_eq!(v, 0.0);

        // All three coincide → exactly m.
        let v = env_triplet_loss(a.view(), a.view(), a.view(), 0.3).unwrap();
        assert_eq!(v, 0.3);
    }

    #[test]
    fn triplet_is_nonnegative_and_zero_iff_separated() {
        let mut rng = named_rng(1, "test/triplet");
        for _ in 0..200 {
            let dim = rng.random_range(1..6);
            let mut draw = || {
                ndarray::Array1::<f64>::from_shape_simple_fn(dim, || rng.random_range(-2.0..2.0))
            };
            let (a, p, n) = (draw(), draw(), draw());
            let m = 0.3;
            let v = env_triplet_loss(a.view(), p.view(), n.view(), m).unwrap();
            assert!(v >= 0.0);
            let d_ap: f64 = (&a - &p).mapv(|x| x * x).sum();
            let d_an: f64 = (&a - &n).mapv(|x| x * x).sum();
            if d_an - d_ap >= m {
                assert_eq!(v, 0.0);
            } else {
                assert!(v > 0.0);
            }
        }
    }

    #[test]
    fn confusion_hand_oracle_and_bounds() {
        // Distances (0, ln 3): p = (1/4, 3/4), KL = ¼ln½ + ¾ln(3/2).
        let want = 0.25 * (0.5f64).ln() + 0.75 * (1.5f64).ln();
        let a = arr1(&[0.0f64]);
        let p = arr1(&[0.0f64]);
        let n = arr1(&[(3.0f64).ln().sqrt()]);
        let kl = confusion_loss(a.view(), p.view(), n.view()).unwrap();
        assert!((kl - want).abs() < 1e-12, "{kl} vs {want}");
        assert!((kl - 0.1308).abs() < 1e-4);

        // Equal distances → exactly zero.
        let (kl0, g1, g2) = confusion_from_distances(0.7, 0.7);
        assert_eq!(kl0, 0.0);
        assert_eq!(g1, 0.0);
        assert_eq!(g2, 0.0);

        // A large gap approaches (never reaches) the supremum ln 2.
        let (kl_far, _, _) = confusion_from_distances(0.0, 20.0);
        assert!(kl_far < LN_2 && kl_far > LN_2 - 1e-6);

        let mut rng = named_rng(2, "test/confusion");
        for _ in 0..500 {
            let d1 = rng.random_range(0.0..30.0);
            let d2 = rng.random_range(0.0..30.0);
            let (kl, _, _) = confusion_from_distances(d1, d2);
            assert!((0.0..LN_2).contains(&kl), "kl {kl} outside [0, ln 2)");
            // Symmetric in the two distances.
            let (swapped, _, _) = confusion_from_distances(d2, d1);
            assert!((kl - swapped).abs() < 1e-15);
        }
    }

    #[test]
    fn confusion_gradient_equalizes_distances() {
        let mut rng = named_rng(3, "test/equalize");
        for _ in 0..100 {
            let d1: f64 = rng.random_range(0.1..8.0);
            let d2: f64 = rng.random_range(0.1..8.0);
            if (d1 - d2).abs() < 1e-9 {
                continue;
            }
            let (_, g1, g2) = confusion_from_distances(d1, d2);
            let eta = 1e-3;
            let (n1, n2) = (d1 - eta * g1, d2 - eta * g2);
            assert!(
                (n1 - n2).abs() < (d1 - d2).abs(),
                "step widened the gap: ({d1},{d2}) → ({n1},{n2})"
            );
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_give_log_class_count() {
        let logits = Array2::<f64>::zeros((4, 1211));
        let labels = [0usize, 5, 600, 1210];
        let (ce, _) = cross_entropy_batch(&logits, &labels).unwrap();
        assert!((ce - (1211f64).ln()).abs() < 1e-6, "{ce}");
        assert!((ce - 7.099).abs() < 1e-3);
    }

    #[test]
    fn speaker_phase_reduces_to_ce_when_alpha_zero_or_distances_equal() {
        let logits = filled((6, 9), 4, 2.0);
        let labels = [0usize, 3, 8, 2, 2, 7];
        let e = filled((2, 5), 5, 1.0);
        let other = filled((2, 5), 6, 1.0);
        let (ce, _) = cross_entropy_batch(&logits, &labels).unwrap();

        let parts = speaker_phase_loss(&logits, &labels, &e, &other, &other, 0.0).unwrap();
        assert_eq!(parts.total, parts.ce);
        assert!((parts.total - ce).abs() < 1e-15);

        // α=10 but p and n coincide → both distances equal → KL term is
        // exactly zero and the loss equals the CE bitwise.
        let parts = speaker_phase_loss(&logits, &labels, &e, &other, &other, 10.0).unwrap();
        assert_eq!(parts.kl, 0.0);
        assert_eq!(parts.total, parts.ce);
    }

    #[test]
    fn label_out_of_range_is_an_error() {
        let logits = filled((2, 4), 7, 1.0);
        let e = filled((1, 3), 8, 1.0);
        let err = speaker_phase_loss(&logits, &[1, 4], &e, &e, &e, 0.0).expect_err("must fail");
        assert!(err.to_string().contains("out of range"));
    }

    #[test]
    fn nan_inputs_are_rejected() {
        let good = arr1(&[0.5, 0.5]);
        let bad = arr1(&[f64::NAN, 0.0]);
        assert!(env_triplet_loss(good.view(), good.view(), bad.view(), 0.3).is_err());
        assert!(confusion_loss(bad.view(), good.view(), good.view()).is_err());
        let logits = Array2::from_elem((1, 2), f64::NAN);
        assert!(cross_entropy_batch(&logits, &[0]).is_err());
    }

    #[test]
    fn contrastive_hand_oracles() {
        let x = arr1(&[0.4f64, -0.2]);
        assert_eq!(contrastive_loss(x.view(), x.view(), true, 1.0), 0.0);

        let far = arr1(&[3.0, 3.0]);
        assert_eq!(contrastive_loss(x.view(), far.view(), false, 1.0), 0.0);

        // 1-d: |x1−x2| = 0.3, margin 1 → (1 − 0.3)² = 0.49.
        let v = contrastive_loss(arr1(&[0.0f64]).view(), arr1(&[0.3]).view(), false, 1.0);
        assert!((v - 0.49).abs() < 1e-12, "{v}");

        // same=1 is the squared distance itself.
        let v =
            contrastive_loss(arr1(&[0.0f64, 0.0]).view(), arr1(&[0.3, 0.4]).view(), true, 1.0);
        assert!((v - 0.25).abs() < 1e-12);
    }

    /// Central-difference checks for every loss; instances whose hinge or
    /// softmax sits within 1e−3 of a kink are redrawn.
    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut seed = 100u64;
        let mut checked = 0;
        while checked < 8 {
            seed += 1;
            let e_a = filled((3, 4), seed, 1.0);
            let e_p = filled((3, 4), seed + 1000, 1.0);
            let e_n = filled((3, 4), seed + 2000, 1.0);
            let margin = 0.3;
            let near_kink = (0..3).any(|i| {
                let d_ap: f64 =
                    (&e_a.row(i) - &e_p.row(i)).mapv(|x| x * x).sum();
                let d_an: f64 =
                    (&e_a.row(i) - &e_n.row(i)).mapv(|x| x * x).sum();
                (d_ap - d_an + margin).abs() < 1e-3
            });
            if near_kink {
                continue;
            }
            let (_, da, dp, dn) = env_triplet_batch(&e_a, &e_p, &e_n, margin).unwrap();
            for (which, (x0, analytic)) in
                [("a", (&e_a, &da)), ("p", (&e_p, &dp)), ("n", (&e_n, &dn))]
            {
                check_grads(
                    x0.as_slice().unwrap(),
                    analytic.as_slice().unwrap(),
                    |xs| {
                        let x = Array2::from_shape_vec(x0.dim(), xs.to_vec()).unwrap();
                        let (args_a, args_p, args_n) = match which {
                            "a" => (&x, &e_p, &e_n),
                            "p" => (&e_a, &x, &e_n),
                            _ => (&e_a, &e_p, &x),
                        };
                        env_triplet_batch(args_a, args_p, args_n, margin).unwrap().0
                    },
                    1e-4,
                    "triplet",
                );
            }
            checked += 1;
        }

        // Confusion gradients have no kinks away from saturation.
        for seed in 0..8 {
            let e_a = filled((2, 3), 300 + seed, 1.0);
            let e_p = filled((2, 3), 400 + seed, 1.0);
            let e_n = filled((2, 3), 500 + seed, 1.0);
            let (_, da, _, _) = confusion_batch(&e_a, &e_p, &e_n).unwrap();
            check_grads(
                e_a.as_slice().unwrap(),
                da.as_slice().unwrap(),
                |xs| {
                    let x = Array2::from_shape_vec(e_a.dim(), xs.to_vec()).unwrap();
                    confusion_batch(&x, &e_p, &e_n).unwrap().0
                },
                1e-4,
                "confusion da",
            );
        }

        // Cross entropy plus the combined speaker-phase objective.
        for seed in 0..4 {
            let logits = filled((5, 7), 600 + seed, 2.0);
            let labels = [0usize, 6, 3, 1, 4];
            let (_, dl) = cross_entropy_batch(&logits, &labels).unwrap();
            check_grads(
                logits.as_slice().unwrap(),
                dl.as_slice().unwrap(),
                |xs| {
                    let x = Array2::from_shape_vec(logits.dim(), xs.to_vec()).unwrap();
                    cross_entropy_batch(&x, &labels).unwrap().0
                },
                1e-4,
                "ce dlogits",
            );

            let e_a = filled((2, 3), 700 + seed, 1.0);
            let e_p = filled((2, 3), 800 + seed, 1.0);
            let e_n = filled((2, 3), 900 + seed, 1.0);
            let (_, _, da, _, _) =
                speaker_phase_batch(&logits, &labels, &e_a, &e_p, &e_n, 10.0).unwrap();
            check_grads(
                e_a.as_slice().unwrap(),
                da.as_slice().unwrap(),
                |xs| {
                    let x = Array2::from_shape_vec(e_a.dim(), xs.to_vec()).unwrap();
                    speaker_phase_batch(&logits, &labels, &x, &e_p, &e_n, 10.0)
                        .unwrap()
                        .0
                        .total
                        .to_f64()
                },
                1e-4,
                "speaker da",
            );
        }

        // Contrastive, skipping instances near the margin hinge.
        let mut seed = 1000u64;
        let mut checked = 0;
        while checked < 6 {
            seed += 1;
            let x1 = filled((3, 4), seed, 0.6);
            let x2 = filled((3, 4), seed + 50, 0.6);
            let same = [true, false, false];
            let margin = 1.0;
            let near_kink = (0..3).any(|i| {
                let d2: f64 = (&x1.row(i) - &x2.row(i)).mapv(|v| v * v).sum();
                let d = d2.sqrt();
                (d - margin).abs() < 1e-3 || d < 1e-3
            });
            if near_kink {
                continue;
            }
            let (_, d1, d2) = contrastive_batch(&x1, &x2, &same, margin).unwrap();
            for (which, (x0, analytic)) in [("x1", (&x1, &d1)), ("x2", (&x2, &d2))] {
                check_grads(
                    x0.as_slice().unwrap(),
                    analytic.as_slice().unwrap(),
                    |xs| {
                        let x = Array2::from_shape_vec(x0.dim(), xs.to_vec()).unwrap();
                        let (a, b) = if which == "x1" { (&x, &x2) } else { (&x1, &x) };
                        contrastive_batch(a, b, &same, margin).unwrap().0
                    },
                    1e-4,
                    "contrastive",
                );
            }
            checked += 1;
        }
    }

    #[test]
    fn config_validation_and_serde_defaults() {
        assert!(LossConfig::default().validate().is_ok());
        let c: LossConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c.margin_m, 0.3);
        assert_eq!(c.alpha, 0.0);
        assert_eq!(c.contrastive_margin, 1.0);

        let bad = LossConfig { margin_m: -0.1, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = LossConfig { alpha: f64::NAN, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = LossConfig { contrastive_margin: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
