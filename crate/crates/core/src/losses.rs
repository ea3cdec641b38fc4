//! Scalar objectives for translation and segmentation training.
//!
//! Each loss exists in two forms: an [`Image2D`]-level function returning the
//! value, and a slice-level `*_grad` kernel generic over the float type that
//! returns the value together with its gradient. Training runs the kernels in
//! `f32`; gradient checks run them in `f64`.

use std::ops::{Add, Mul};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, Image2D};

/// Weights of the translation objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Cycle-consistency weight.
    pub delta: f64,
    /// Surrounding-L1 weight.
    pub lambda: f64,
    /// Identity weight; zero disables the identity terms entirely.
    pub gamma_identity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            delta: 10.0,
            lambda: 1.0,
            gamma_identity: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("delta", self.delta),
            ("lambda", self.lambda),
            ("gamma_identity", self.gamma_identity),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::param(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-term values of one generator step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv_g: f64,
    pub adv_f: f64,
    /// Sum of both cycle directions.
    pub cycle: f64,
    pub surrounding_l1: f64,
    /// Sum of both identity directions.
    pub identity: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Elementwise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        let mut acc = LossBreakdown::default();
        for b in items {
            acc.adv_g += b.adv_g;
            acc.adv_f += b.adv_f;
            acc.cycle += b.cycle;
            acc.surrounding_l1 += b.surrounding_l1;
            acc.identity += b.identity;
            acc.total += b.total;
        }
        LossBreakdown {
            adv_g: acc.adv_g / n,
            adv_f: acc.adv_f / n,
            cycle: acc.cycle / n,
            surrounding_l1: acc.surrounding_l1 / n,
            identity: acc.identity / n,
            total: acc.total / n,
        }
    }
}

/// Weighted sum `adv_g + adv_f + delta*cycle + lambda*l1 + gamma*identity`,
/// generic so that exact number types can check the assembly.
#[allow(clippy::too_many_arguments)]
pub fn weighted_total<T>(adv_g: T, adv_f: T, cycle: T, surrounding: T, identity: T, delta: T, lambda: T, gamma: T) -> T
where
    T: Copy + Add<Output = T> + Mul<Output = T>,
{
    adv_g + adv_f + delta * cycle + lambda * surrounding + gamma * identity
}

/// Assembles the breakdown of the translation objective.
pub fn total_cyclegan_loss(
    adv_g: f64,
    adv_f: f64,
    cycle: f64,
    surrounding_l1: f64,
    identity: f64,
    weights: &LossWeights,
) -> LossBreakdown {
    // A zero weight removes the term even if its value is non-finite or huge.
    let weighted = |w: f64, v: f64| if w == 0.0 { 0.0 } else { w * v };
    let total = adv_g
        + adv_f
        + weighted(weights.delta, cycle)
        + weighted(weights.lambda, surrounding_l1)
        + weighted(weights.gamma_identity, identity);
    LossBreakdown {
        adv_g,
        adv_f,
        cycle,
        surrounding_l1,
        identity,
        total,
    }
}

/// How the surrounding L1 is averaged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionNormalization {
    /// Divide by the number of pixels outside the lung mask.
    #[default]
    Region,
    /// Divide by the total pixel count.
    AllPixels,
}

/// `(1 - M) ⊙ I`: the image with lung pixels zeroed.
pub fn surrounding_region(img: &Image2D, mask: &BinaryMask) -> Result<Image2D> {
    img.ensure_same_dims(mask.dims(), "image vs mask")?;
    let data = img
        .values()
        .iter()
        .zip(mask.values())
        .map(|(&v, &m)| if m { 0.0 } else { v })
        .collect();
    Image2D::new(img.height(), img.width(), data, img.domain())
}

/// Mean absolute difference between two images outside `mask`.
pub fn surrounding_l1(healthy: &Image2D, generated: &Image2D, mask: &BinaryMask) -> Result<f64> {
    surrounding_l1_with(healthy, generated, mask, RegionNormalization::Region)
}

pub fn surrounding_l1_with(
    healthy: &Image2D,
    generated: &Image2D,
    mask: &BinaryMask,
    norm: RegionNormalization,
) -> Result<f64> {
    healthy.ensure_same_dims(generated.dims(), "healthy vs generated")?;
    healthy.ensure_same_dims(mask.dims(), "image vs mask")?;
    let h: Vec<f64> = healthy.values().iter().map(|&v| v as f64).collect();
    let g: Vec<f64> = generated.values().iter().map(|&v| v as f64).collect();
    Ok(surrounding_l1_grad(&h, &g, mask.values(), norm)?.0)
}

/// Surrounding L1 and its gradient with respect to `generated`.
pub fn surrounding_l1_grad<T: Float>(
    healthy: &[T],
    generated: &[T],
    mask: &[bool],
    norm: RegionNormalization,
) -> Result<(T, Vec<T>)> {
    if healthy.len() != generated.len() || healthy.len() != mask.len() {
        return Err(Error::DimensionMismatch("surrounding_l1 inputs".into()));
    }
    let outside = mask.iter().filter(|&&m| !m).count();
    if outside == 0 {
        return Err(Error::EmptyRegion);
    }
    let n = match norm {
        RegionNormalization::Region => outside,
        RegionNormalization::AllPixels => mask.len(),
    };
    let inv = T::one() / T::from(n).unwrap();
    let mut sum = T::zero();
    let mut grad = vec![T::zero(); healthy.len()];
    for i in 0..healthy.len() {
        if mask[i] {
            continue;
        }
        let d = generated[i] - healthy[i];
        sum = sum + d.abs();
        grad[i] = sign(d) * inv;
    }
    Ok((sum * inv, grad))
}

#[inline]
fn sign<T: Float>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Mean absolute difference over all pixels, with gradient w.r.t. `pred`.
pub fn l1_grad<T: Float>(target: &[T], pred: &[T]) -> Result<(T, Vec<T>)> {
    if target.len() != pred.len() || target.is_empty() {
        return Err(Error::DimensionMismatch("l1 inputs".into()));
    }
    let inv = T::one() / T::from(target.len()).unwrap();
    let mut sum = T::zero();
    let grad = target
        .iter()
        .zip(pred)
        .map(|(&t, &p)| {
            let d = p - t;
            sum = sum + d.abs();
            sign(d) * inv
        })
        .collect();
    Ok((sum * inv, grad))
}

/// L1 cycle-consistency between an image and its round-trip reconstruction.
pub fn cycle_consistency(x: &Image2D, reconstructed: &Image2D) -> Result<f64> {
    x.ensure_same_dims(reconstructed.dims(), "cycle consistency")?;
    let a: Vec<f64> = x.values().iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = reconstructed.values().iter().map(|&v| v as f64).collect();
    Ok(l1_grad(&a, &b)?.0)
}

/// L1 identity loss between a same-domain input and its translation.
pub fn identity_loss(y: &Image2D, translated: &Image2D) -> Result<f64> {
    cycle_consistency(y, translated)
}

/// Least-squares adversarial loss `mean((s - t)^2)`, `t = 1` for real targets.
pub fn adversarial_mse(scores: &[f64], target_is_real: bool) -> f64 {
    adversarial_mse_grad(scores, target_is_real).0
}

pub fn adversarial_mse_grad<T: Float>(scores: &[T], target_is_real: bool) -> (T, Vec<T>) {
    if scores.is_empty() {
        return (T::zero(), Vec::new());
    }
    let t = if target_is_real { T::one() } else { T::zero() };
    let n = T::from(scores.len()).unwrap();
    let two = T::one() + T::one();
    let mut sum = T::zero();
    let grad = scores
        .iter()
        .map(|&s| {
            let d = s - t;
            sum = sum + d * d;
            two * d / n
        })
        .collect();
    (sum / n, grad)
}

/// Discriminator objective `0.5 * (mse(real, 1) + mse(fake, 0))`.
pub fn discriminator_mse(real_scores: &[f64], fake_scores: &[f64]) -> f64 {
    0.5 * (adversarial_mse(real_scores, true) + adversarial_mse(fake_scores, false))
}

pub const DICE_SMOOTH: f64 = 1e-5;
pub const FOCAL_CLAMP: f64 = 1e-7;

/// Soft-Dice plus focal cross-entropy with unit weights.
pub fn dice_focal_loss(pred: &[f64], target: &BinaryMask, focal_gamma: f64) -> Result<f64> {
    Ok(dice_focal_grad(pred, target.values(), focal_gamma)?.0)
}

/// Dice-Focal value and gradient with respect to the probabilities.
pub fn dice_focal_grad<T: Float>(pred: &[T], target: &[bool], focal_gamma: f64) -> Result<(T, Vec<T>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::DimensionMismatch("dice-focal inputs".into()));
    }
    if let Some((i, p)) = pred
        .iter()
        .enumerate()
        .find(|(_, &p)| !(p >= T::zero() && p <= T::one()))
    {
        return Err(Error::InvalidValue {
            index: i,
            value: p.to_f32().unwrap_or(f32::NAN),
        });
    }
    let (dice, mut grad) = soft_dice_grad(pred, target);
    let (focal, fgrad) = focal_grad(pred, target, T::from(focal_gamma).unwrap());
    for (g, f) in grad.iter_mut().zip(fgrad) {
        *g = *g + f;
    }
    Ok((dice + focal, grad))
}

/// `1 - (2 Σpt + ε) / (Σp + Σt + ε)` and its gradient.
pub fn soft_dice_grad<T: Float>(pred: &[T], target: &[bool]) -> (T, Vec<T>) {
    let eps = T::from(DICE_SMOOTH).unwrap();
    let two = T::one() + T::one();
    let mut inter = T::zero();
    let mut sp = T::zero();
    let mut st = T::zero();
    for (&p, &t) in pred.iter().zip(target) {
        sp = sp + p;
        if t {
            inter = inter + p;
            st = st + T::one();
        }
    }
    let num = two * inter + eps;
    let den = sp + st + eps;
    let grad = target
        .iter()
        .map(|&t| {
            let dnum = if t { two } else { T::zero() };
            -(dnum * den - num) / (den * den)
        })
        .collect();
    (T::one() - num / den, grad)
}

/// Mean focal term `-(1 - p_t)^γ log(p_t)` and its gradient.
pub fn focal_grad<T: Float>(pred: &[T], target: &[bool], gamma: T) -> (T, Vec<T>) {
    let lo = T::from(FOCAL_CLAMP).unwrap();
    let hi = T::one() - lo;
    let n = T::from(pred.len()).unwrap();
    let mut sum = T::zero();
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let pt_raw = if t { p } else { T::one() - p };
            let pt = pt_raw.max(lo).min(hi);
            let q = T::one() - pt;
            let ln = pt.ln();
            sum = sum - q.powf(gamma) * ln;
            if pt_raw < lo || pt_raw > hi {
                return T::zero();
            }
            // d/dpt of -(q^γ) ln(pt) = γ q^(γ-1) ln(pt) - q^γ / pt
            let dpt = if gamma == T::zero() {
                -T::one() / pt
            } else {
                gamma * q.powf(gamma - T::one()) * ln - q.powf(gamma) / pt
            };
            let d = if t { dpt } else { -dpt };
            d / n
        })
        .collect();
    (sum / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::ValueDomain;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn img(h: usize, w: usize, v: &[f32]) -> Image2D {
        Image2D::new(h, w, v.to_vec(), ValueDomain::ZScored).unwrap()
    }

    fn mask(h: usize, w: usize, v: &[u8]) -> BinaryMask {
        BinaryMask::new(h, w, v.iter().map(|&b| b != 0).collect()).unwrap()
    }

    #[test]
    fn surrounding_region_examples() {
        let i = img(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(surrounding_region(&i, &BinaryMask::empty(2, 2)).unwrap(), i);
        assert!(surrounding_region(&i, &BinaryMask::full(2, 2))
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));
        let out = surrounding_region(&i, &mask(2, 2, &[1, 0, 0, 1])).unwrap();
        assert_eq!(out.values(), &[0.0, 2.0, 3.0, 0.0]);
        assert!(surrounding_region(&i, &BinaryMask::empty(3, 2)).is_err());
    }

    #[test]
    fn surrounding_l1_examples() {
        let h = img(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let g = img(2, 2, &[1.0, 5.0, 0.0, 4.0]);
        let m = mask(2, 2, &[1, 0, 0, 1]);
        assert_eq!(surrounding_l1(&h, &h, &m).unwrap(), 0.0);
        assert_eq!(surrounding_l1(&h, &g, &m).unwrap(), 3.0);
        assert_eq!(
            surrounding_l1_with(&h, &g, &m, RegionNormalization::AllPixels).unwrap(),
            1.5
        );
        let inside_only = img(2, 2, &[9.0, 2.0, 3.0, -7.0]);
        assert_eq!(surrounding_l1(&h, &inside_only, &m).unwrap(), 0.0);
        assert!(matches!(
            surrounding_l1(&h, &g, &BinaryMask::full(2, 2)),
            Err(Error::EmptyRegion)
        ));
    }

    #[test]
    fn adversarial_examples() {
        assert_eq!(adversarial_mse(&[1.0, 1.0, 1.0], true), 0.0);
        assert_eq!(adversarial_mse(&[0.0, 0.0], true), 1.0);
        assert_abs_diff_eq!(adversarial_mse(&[0.2, 0.6], false), 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(discriminator_mse(&[1.0], &[0.5]), 0.125, epsilon = 1e-12);
    }

    #[test]
    fn cycle_and_identity_examples() {
        let x = img(2, 3, &[0.1, -0.4, 2.0, 0.0, 1.0, -3.0]);
        assert_eq!(cycle_consistency(&x, &x).unwrap(), 0.0);
        let shifted = img(2, 3, &x.values().iter().map(|v| v - 0.75).collect::<Vec<_>>());
        assert_abs_diff_eq!(cycle_consistency(&x, &shifted).unwrap(), 0.75, epsilon = 1e-6);
        assert_eq!(identity_loss(&x, &x).unwrap(), 0.0);
        assert_abs_diff_eq!(identity_loss(&x, &shifted).unwrap(), 0.75, epsilon = 1e-6);
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert_eq!(total_cyclegan_loss(0.0, 0.0, 0.0, 0.0, 0.0, &w).total, 0.0);
        assert_eq!(total_cyclegan_loss(0.0, 0.0, 1.0, 2.0, 0.0, &w).total, 12.0);
        let b = total_cyclegan_loss(0.0, 0.0, 0.0, 0.0, 5.0, &w);
        assert_eq!(b.total, 0.0);
        assert_eq!(b.identity, 5.0);
        let no_l1 = LossWeights { lambda: 0.0, ..w };
        assert_eq!(total_cyclegan_loss(0.5, 0.25, 0.0, 100.0, 0.0, &no_l1).total, 0.75);
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights {
            lambda: -1.0,
            ..LossWeights::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn focal_single_pixel_closed_form() {
        let (f, _) = focal_grad(&[0.5f64], &[true], 2.0);
        assert_abs_diff_eq!(f, 0.25 * std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(f, 0.1733, epsilon = 1e-4);
    }

    #[test]
    fn focal_gamma_zero_is_bce() {
        let pred = [0.1, 0.8, 0.45, 0.999, 0.3];
        let target = [false, true, true, false, false];
        let (f, _) = focal_grad(&pred, &target, 0.0);
        let bce: f64 = pred
            .iter()
            .zip(&target)
            .map(|(&p, &t)| if t { -p.ln() } else { -(1.0 - p).ln() })
            .sum::<f64>()
            / pred.len() as f64;
        assert_abs_diff_eq!(f, bce, epsilon = 1e-12);
    }

    #[test]
    fn dice_focal_perfect_prediction() {
        let t = mask(3, 3, &[0, 1, 1, 0, 1, 0, 0, 0, 1]);
        let pred: Vec<f64> = t.values().iter().map(|&v| if v { 1.0 - 1e-5 } else { 1e-5 }).collect();
        assert!(dice_focal_loss(&pred, &t, 2.0).unwrap() < 1e-3);
    }

    #[test]
    fn dice_focal_domain_error() {
        let t = BinaryMask::empty(1, 2);
        assert!(matches!(
            dice_focal_loss(&[0.5, 1.2], &t, 2.0),
            Err(Error::InvalidValue { .. })
        ));
        assert!(dice_focal_loss(&[0.5], &t, 2.0).is_err());
    }

    #[test]
    fn dice_focal_monotone_toward_target() {
        let t = mask(2, 4, &[1, 1, 0, 0, 1, 0, 1, 0]);
        let start: Vec<f64> = vec![0.3, 0.6, 0.7, 0.2, 0.1, 0.9, 0.5, 0.4];
        let mut prev = f64::INFINITY;
        for step in 0..=20 {
            let a = step as f64 / 20.0;
            let p: Vec<f64> = start
                .iter()
                .zip(t.values())
                .map(|(&s, &tv)| s + a * ((if tv { 1.0 } else { 0.0 }) - s))
                .collect();
            let l = dice_focal_loss(&p, &t, 2.0).unwrap();
            assert!(l >= 0.0);
            assert!(l <= prev + 1e-12, "step {step}: {l} > {prev}");
            prev = l;
        }
    }

    #[test]
    fn clamped_probabilities_have_zero_focal_gradient() {
        let (_, g) = focal_grad(&[0.0f64, 1.0], &[true, true], 2.0);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 0.0);
    }

    proptest! {
        #[test]
        fn surrounding_l1_symmetric_and_blind_inside(
            a in proptest::collection::vec(-3f32..3.0, 16),
            b in proptest::collection::vec(-3f32..3.0, 16),
            m in proptest::collection::vec(any::<bool>(), 16),
            noise in proptest::collection::vec(-5f32..5.0, 16),
        ) {
            prop_assume!(m.iter().any(|&v| !v));
            let ia = img(4, 4, &a);
            let ib = img(4, 4, &b);
            let mm = BinaryMask::new(4, 4, m.clone()).unwrap();
            let ab = surrounding_l1(&ia, &ib, &mm).unwrap();
            prop_assert_eq!(ab, surrounding_l1(&ib, &ia, &mm).unwrap());
            let perturbed: Vec<f32> = b.iter().zip(&m).zip(&noise).map(|((&v, &inside), &n)| if inside { v + n } else { v }).collect();
            prop_assert_eq!(ab, surrounding_l1(&ia, &img(4, 4, &perturbed), &mm).unwrap());
        }

        #[test]
        fn lambda_scaling_is_linear(l1 in 0.0f64..10.0, k in 0.0f64..8.0) {
            let w1 = LossWeights { lambda: 1.0, ..LossWeights::default() };
            let wk = LossWeights { lambda: k, ..LossWeights::default() };
            let base = total_cyclegan_loss(0.0, 0.0, 0.0, 0.0, 0.0, &w1).total;
            let c1 = total_cyclegan_loss(0.0, 0.0, 0.0, l1, 0.0, &w1).total - base;
            let ck = total_cyclegan_loss(0.0, 0.0, 0.0, l1, 0.0, &wk).total - base;
            prop_assert!((ck - k * c1).abs() <= 1e-12 * (1.0 + ck.abs()));
        }
    }
}
