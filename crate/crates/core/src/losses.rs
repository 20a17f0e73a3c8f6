//! Attention losses and their gradients with respect to the attention map.
//!
//! `total = l_ntp + λ1 · Σ_{i∈G} a_i + λ2 · Σ_i p_i ln(p_i / a_i)`. The
//! language-model term `l_ntp` is an opaque input and contributes no gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::AttentionMap;
use crate::labels::{LabelMap, SuppressionSet};
use crate::scalar::Scalar;

/// Floor applied to `a_i` inside the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub l_ntp: T,
    pub l_sup: T,
    pub l_attn: T,
    pub lambda1: T,
    pub lambda2: T,
    pub total: T,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn is_finite(&self) -> bool {
        self.l_ntp.is_finite()
            && self.l_sup.is_finite()
            && self.l_attn.is_finite()
            && self.total.is_finite()
    }
}

/// Loss value together with `∂loss/∂a`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad<T> {
    pub value: T,
    pub grad: Vec<T>,
}

pub fn suppression_loss<T: Scalar>(
    attn: &AttentionMap<T>,
    g: &SuppressionSet,
) -> Result<LossGrad<T>> {
    if attn.grid != g.grid {
        return Err(Error::GridMismatch(
            "attention map and suppression set use different grids".into(),
        ));
    }
    let mut grad = vec![T::zero(); attn.probs.len()];
    let mut value = T::zero();
    for &i in &g.indices {
        value += attn.probs[i];
        grad[i] = T::one();
    }
    Ok(LossGrad {
        value: value.min(T::one()),
        grad,
    })
}

pub fn kl_action_loss<T: Scalar>(
    target: &LabelMap<T>,
    attn: &AttentionMap<T>,
) -> Result<LossGrad<T>> {
    if target.grid != attn.grid {
        return Err(Error::GridMismatch(
            "label map and attention map use different grids".into(),
        ));
    }
    kl_divergence(&target.values, &attn.probs)
}

/// `Σ p_i ln(p_i / max(a_i, floor))` with `0 · ln 0 = 0`.
pub fn kl_divergence<T: Scalar>(p: &[T], a: &[T]) -> Result<LossGrad<T>> {
    if p.len() != a.len() {
        return Err(Error::Dimension(format!(
            "target has {} entries, attention {}",
            p.len(),
            a.len()
        )));
    }
    if let Some(i) = p.iter().position(|&v| v < T::zero() || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "target entry {i} is negative or non-finite: {}",
            p[i]
        )));
    }
    let floor = T::of(LOG_FLOOR);
    let mut value = T::zero();
    let mut grad = vec![T::zero(); p.len()];
    for (i, (&pi, &ai)) in p.iter().zip(a).enumerate() {
        if pi == T::zero() {
            continue;
        }
        if ai > floor {
            value += pi * (pi / ai).ln();
            grad[i] = -pi / ai;
        } else {
            value += pi * (pi / floor).ln();
        }
    }
    Ok(LossGrad { value, grad })
}

pub fn combined_loss<T: Scalar>(
    target: &LabelMap<T>,
    attn: &AttentionMap<T>,
    g: &SuppressionSet,
    lambda1: T,
    lambda2: T,
    l_ntp: T,
) -> Result<(LossBreakdown<T>, Vec<T>)> {
    if !(lambda1 >= T::zero() && lambda2 >= T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "loss weights must be non-negative, got lambda1={lambda1}, lambda2={lambda2}"
        )));
    }
    let sup = suppression_loss(attn, g)?;
    let kl = kl_action_loss(target, attn)?;
    let grad = sup
        .grad
        .iter()
        .zip(&kl.grad)
        .map(|(&s, &k)| lambda1 * s + lambda2 * k)
        .collect();
    let breakdown = LossBreakdown {
        l_ntp,
        l_sup: sup.value,
        l_attn: kl.value,
        lambda1,
        lambda2,
        total: l_ntp + lambda1 * sup.value + lambda2 * kl.value,
    };
    Ok((breakdown, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BoundingBox, PatchGrid};
    use crate::labels::{suppression_set, LabelKind};
    use proptest::prelude::*;

    fn grid4() -> PatchGrid {
        PatchGrid::new(4, 1, 1).unwrap()
    }

    fn map(p: &[f64]) -> AttentionMap<f64> {
        AttentionMap::new(PatchGrid::new(p.len() as u32, 1, 1).unwrap(), p.to_vec()).unwrap()
    }

    fn target(p: &[f64]) -> LabelMap<f64> {
        LabelMap {
            grid: PatchGrid::new(p.len() as u32, 1, 1).unwrap(),
            values: p.to_vec(),
            kind: LabelKind::Gaussian,
            epsilon: 0.0,
        }
    }

    fn sup(indices: Vec<usize>) -> SuppressionSet {
        SuppressionSet { grid: grid4(), indices }
    }

    #[test]
    fn suppression_examples() {
        assert_eq!(suppression_loss(&map(&[0.0, 1.0, 0.0, 0.0]), &sup(vec![0, 2, 3])).unwrap().value, 0.0);
        assert_eq!(suppression_loss(&map(&[0.25; 4]), &sup(vec![1, 2, 3])).unwrap().value, 0.75);
        let l = suppression_loss(&map(&[0.1, 0.2, 0.3, 0.4]), &sup(vec![0, 3])).unwrap();
        assert!((l.value - 0.5).abs() < 1e-15);
        assert_eq!(l.grad, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn suppression_rejects_other_grid() {
        let s = SuppressionSet { grid: PatchGrid::new(2, 2, 1).unwrap(), indices: vec![0] };
        assert!(suppression_loss(&map(&[0.25; 4]), &s).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(kl_action_loss(&target(&p), &map(&p)).unwrap().value, 0.0);
        let v = kl_action_loss(&target(&[0.75, 0.25]), &map(&[0.5, 0.5])).unwrap();
        let expect = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((v.value - expect).abs() < 1e-15);
        assert!((v.value - 0.130812).abs() < 1e-6);
        assert_eq!(v.grad, vec![-1.5, -0.5]);
    }

    #[test]
    fn kl_handles_zero_target_and_zero_attention() {
        let v = kl_action_loss(&target(&[0.0, 1.0]), &map(&[1.0, 0.0])).unwrap();
        assert!((v.value - (1.0 / LOG_FLOOR).ln()).abs() < 1e-9);
        assert_eq!(v.grad, vec![0.0, 0.0]);
        assert!(kl_action_loss(&target(&[-0.1, 1.1]), &map(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn combined_examples() {
        let a = map(&[0.25; 4]);
        let t = target(&[0.0, 0.5, 0.5, 0.0]);
        let s = sup(vec![0, 3]);
        let (b, g) = combined_loss(&t, &a, &s, 0.0, 0.0, 1.7).unwrap();
        assert_eq!(b.total, 1.7);
        assert!(g.iter().all(|&x| x == 0.0));
        let (b, _) = combined_loss(&t, &a, &s, 1.0, 0.0, 0.3).unwrap();
        assert_eq!(b.total, 0.3 + 0.5);
        assert!(combined_loss(&t, &a, &s, -1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn combined_on_real_grid() {
        let grid = PatchGrid::new(64, 64, 16).unwrap();
        let b = BoundingBox::new(10.0, 10.0, 30.0, 20.0).unwrap();
        let t = crate::labels::gaussian_label_map(&grid, &b, 1.0, 1e-6).unwrap();
        let g = suppression_set(&grid, &b).unwrap();
        let a = AttentionMap::new(grid, vec![1.0 / 16.0; 16]).unwrap();
        let (bd, _) = combined_loss(&t, &a, &g, 1.0, 1.0, 0.0).unwrap();
        assert_eq!(bd.l_sup, 12.0 / 16.0);
        assert!(bd.l_attn >= 0.0);
    }

    fn dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.01..1.0f64, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn moving_mass_into_foreground_lowers_suppression(p in dist(4), i in 0usize..2, j in 2usize..4, f in 0.01..1.0f64) {
            // G = {0, 1}, foreground = {2, 3}
            let s = sup(vec![0, 1]);
            let before = suppression_loss(&map(&p), &s).unwrap().value;
            let mut q = p.clone();
            let moved = q[i] * f;
            q[i] -= moved;
            q[j] += moved;
            let after = suppression_loss(&map(&q), &s).unwrap().value;
            prop_assert!(after < before);
            prop_assert!((before - (1.0 - p[2] - p[3])).abs() < 1e-12);
        }

        #[test]
        fn combined_is_affine_in_weights(p in dist(4), a in dist(4), l1 in 0.0..3.0f64, l2 in 0.0..3.0f64, ntp in 0.0..2.0f64) {
            let s = sup(vec![1, 3]);
            let (b, g) = combined_loss(&target(&p), &map(&a), &s, l1, l2, ntp).unwrap();
            let ls = suppression_loss(&map(&a), &s).unwrap();
            let lk = kl_action_loss(&target(&p), &map(&a)).unwrap();
            prop_assert_eq!(b.total, ntp + l1 * ls.value + l2 * lk.value);
            for k in 0..4 {
                prop_assert_eq!(g[k], l1 * ls.grad[k] + l2 * lk.grad[k]);
            }
        }

        #[test]
        fn kl_zero_iff_equal(p in dist(6), a in dist(6)) {
            let v = kl_divergence(&p, &a).unwrap().value;
            prop_assert!(v >= 0.0);
            let max_diff = p.iter().zip(&a).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            if max_diff > 1e-6 {
                prop_assert!(v > 0.0);
            }
        }
    }
}
