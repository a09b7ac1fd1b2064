//! Per-anchor loss terms, multi-group aggregation and the one-cycle
//! learning-rate / momentum schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorTarget, BoxCode, TargetSet, CODE_SIZE};
use crate::error::{Error, Result};
use crate::model::{ClassId, NUM_CLASSES};

/// Probabilities are clamped to `[P_EPS, 1 - P_EPS]` before taking logs.
pub const P_EPS: f64 = 1e-12;

/// Sigmoid focal loss of a single probability `p` against a binary target.
/// `p` is clamped away from 0 and 1.
pub fn focal_loss(p: f64, y: bool, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(P_EPS, 1.0 - P_EPS);
    if y {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

pub fn smooth_l1(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * d * d / beta
    } else {
        a - 0.5 * beta
    }
}

/// Derivative of [`smooth_l1`] with respect to `d`.
pub fn smooth_l1_grad(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

/// Softmax cross-entropy of two direction logits against bin `target`.
pub fn direction_loss(logits: [f64; 2], target: u8) -> f64 {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    lse - logits[target as usize & 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Regression weights over (x, y, z, l, w, h, yaw, vx, vy).
    pub code_weights: [f64; CODE_SIZE],
    /// Per-class multiplier on the focal term, indexed like `ClassId::ALL`.
    pub class_weights: [f64; NUM_CLASSES],
    pub dir_weight: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            code_weights: [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.2, 0.2],
            class_weights: [1.0; NUM_CLASSES],
            dir_weight: 1.0,
            alpha: 0.25,
            gamma: 2.0,
            beta: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !self.code_weights.iter().chain(&self.class_weights).all(|&w| nonneg(w)) {
            return Err(Error::InvalidConfig("loss weights must be finite and >= 0".into()));
        }
        if !nonneg(self.dir_weight) || !nonneg(self.gamma) {
            return Err(Error::InvalidConfig("dir_weight and gamma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig("beta must be positive".into()));
        }
        Ok(())
    }

    pub fn class_weight(&self, class: ClassId) -> f64 {
        self.class_weights[class.index()]
    }
}

/// Summed, unnormalized loss terms of one group.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GroupLossTerms {
    /// Focal loss summed over all non-ignored anchors and class slots.
    pub cls: f64,
    /// Smooth-L1 per regression component, summed over foreground anchors.
    pub reg: [f64; CODE_SIZE],
    /// Direction cross-entropy summed over foreground anchors.
    pub dir: f64,
    pub num_positive: usize,
}

/// Loss of one group: classification normalized by the positive count
/// (at least 1), plus weighted regression and direction terms normalized by
/// the positive count. With no positives the regression and direction terms
/// are 0.
pub fn group_loss(terms: &GroupLossTerms, cfg: &LossConfig) -> f64 {
    let cls = terms.cls / terms.num_positive.max(1) as f64;
    if terms.num_positive == 0 {
        return cls;
    }
    let n = terms.num_positive as f64;
    let reg: f64 = terms
        .reg
        .iter()
        .zip(&cfg.code_weights)
        .map(|(r, w)| r * w)
        .sum();
    cls + reg / n + cfg.dir_weight * terms.dir / n
}

/// Unweighted sum of the group losses.
pub fn total_loss(groups: &[GroupLossTerms], cfg: &LossConfig) -> f64 {
    groups.iter().map(|g| group_loss(g, cfg)).sum()
}

/// Network outputs for one group, laid out like its anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPrediction {
    /// Per-anchor class probabilities, one per class of the group.
    pub cls_prob: Vec<Vec<f64>>,
    pub reg: Vec<BoxCode>,
    pub dir_logits: Vec<[f64; 2]>,
}

/// Accumulate the loss terms of one group from predictions and targets.
pub fn group_terms(
    classes: &[ClassId],
    pred: &GroupPrediction,
    targets: &TargetSet,
    cfg: &LossConfig,
) -> Result<GroupLossTerms> {
    let n = targets.cls.len();
    if pred.cls_prob.len() != n || pred.reg.len() != n || pred.dir_logits.len() != n {
        return Err(Error::Shape(format!(
            "predictions ({}, {}, {}) do not match {n} anchors",
            pred.cls_prob.len(),
            pred.reg.len(),
            pred.dir_logits.len()
        )));
    }
    let mut out = GroupLossTerms::default();
    for i in 0..n {
        let probs = &pred.cls_prob[i];
        if probs.len() != classes.len() {
            return Err(Error::Shape(format!(
                "anchor {i}: {} class scores for a group of {}",
                probs.len(),
                classes.len()
            )));
        }
        let target = targets.cls[i];
        if target == AnchorTarget::Ignore {
            continue;
        }
        for (&class, &p) in classes.iter().zip(probs) {
            let y = target == AnchorTarget::Foreground(class);
            out.cls += cfg.class_weight(class) * focal_loss(p, y, cfg.alpha, cfg.gamma);
        }
        if let (Some(t), Some(bin)) = (targets.reg[i], targets.dir[i]) {
            out.num_positive += 1;
            for k in 0..CODE_SIZE {
                out.reg[k] += smooth_l1(pred.reg[i][k] - t[k], cfg.beta);
            }
            out.dir += direction_loss(pred.dir_logits[i], bin);
        }
    }
    Ok(out)
}

/// One-cycle schedule: cosine warm-up of the learning rate from
/// `lr_max / div_factor` to `lr_max` over the first `pct_peak` of the steps,
/// then cosine annealing to `lr_max / (div_factor * final_div)`. Momentum
/// mirrors it between `mom_high` and `mom_low`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OneCycle {
    pub lr_max: f64,
    pub div_factor: f64,
    pub mom_high: f64,
    pub mom_low: f64,
    pub pct_peak: f64,
    pub final_div: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        Self {
            lr_max: 0.04,
            div_factor: 10.0,
            mom_high: 0.95,
            mom_low: 0.85,
            pct_peak: 0.4,
            final_div: 1e4,
        }
    }
}

/// `start` at pct 0, `end` at pct 1; both endpoints are reproduced exactly.
fn cosine_interp(start: f64, end: f64, pct: f64) -> f64 {
    let w = 0.5 * (1.0 + (PI * pct).cos());
    start * w + end * (1.0 - w)
}

impl OneCycle {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !(pos(self.lr_max) && pos(self.div_factor) && pos(self.final_div)) {
            return Err(Error::InvalidConfig(
                "lr_max, div_factor and final_div must be positive".into(),
            ));
        }
        if !(0.0 <= self.mom_low && self.mom_low <= self.mom_high && self.mom_high <= 1.0) {
            return Err(Error::InvalidConfig(
                "momentum must satisfy 0 <= mom_low <= mom_high <= 1".into(),
            ));
        }
        if !(self.pct_peak > 0.0 && self.pct_peak < 1.0) {
            return Err(Error::InvalidConfig("pct_peak must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn initial_lr(&self) -> f64 {
        self.lr_max / self.div_factor
    }

    pub fn final_lr(&self) -> f64 {
        self.lr_max / (self.div_factor * self.final_div)
    }

    pub fn peak_step(&self, total_steps: u64) -> u64 {
        (self.pct_peak * total_steps as f64).floor() as u64
    }

    /// (learning rate, momentum) at `step` of `total_steps`.
    pub fn at(&self, step: u64, total_steps: u64) -> Result<(f64, f64)> {
        if total_steps == 0 || step > total_steps {
            return Err(Error::InvalidArgument(format!(
                "step {step} outside [0, {total_steps}] (total must be positive)"
            )));
        }
        let peak = self.peak_step(total_steps);
        if step <= peak && peak > 0 {
            let pct = step as f64 / peak as f64;
            Ok((
                cosine_interp(self.initial_lr(), self.lr_max, pct),
                cosine_interp(self.mom_high, self.mom_low, pct),
            ))
        } else {
            let pct = (step - peak) as f64 / (total_steps - peak) as f64;
            Ok((
                cosine_interp(self.lr_max, self.final_lr(), pct),
                cosine_interp(self.mom_low, self.mom_high, pct),
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn focal_reference_value() {
        let v = focal_loss(0.9, true, 0.25, 2.0);
        assert_abs_diff_eq!(v, 0.25 * 0.01 * -(0.9f64.ln()), epsilon = 1e-15);
        assert_abs_diff_eq!(v, 2.6339e-4, epsilon = 5e-8);
    }

    #[test]
    fn focal_gamma_zero_is_weighted_ce() {
        for p in [0.01, 0.3, 0.5, 0.77, 0.999] {
            assert_eq!(focal_loss(p, true, 0.25, 0.0), -0.25 * p.ln());
            assert_eq!(focal_loss(p, false, 0.25, 0.0), -0.75 * (1.0 - p).ln());
        }
    }

    #[test]
    fn focal_symmetric_at_half() {
        assert_eq!(focal_loss(0.5, true, 0.5, 2.0), focal_loss(0.5, false, 0.5, 2.0));
    }

    #[test]
    fn focal_clamps_extremes() {
        assert!(focal_loss(0.0, true, 0.25, 2.0).is_finite());
        assert!(focal_loss(1.0, false, 0.25, 2.0).is_finite());
        assert!(focal_loss(1.0, true, 0.25, 2.0) >= 0.0);
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.0, 1.0), 0.0);
        assert_eq!(smooth_l1(1.0, 1.0), 0.5);
        assert_eq!(smooth_l1(2.0, 1.0), 1.5);
        assert_eq!(smooth_l1(-2.0, 1.0), 1.5);
        assert_eq!(smooth_l1(0.5, 1.0), 0.125);
    }

    #[test]
    fn direction_loss_values() {
        assert_abs_diff_eq!(direction_loss([0.0, 0.0], 0), 2f64.ln(), epsilon = 1e-15);
        assert!(direction_loss([5.0, -5.0], 0) < direction_loss([5.0, -5.0], 1));
        assert!(direction_loss([1000.0, -1000.0], 1).is_finite());
    }

    #[test]
    fn velocity_vs_position_ratio() {
        let cfg = LossConfig::default();
        let mut x = GroupLossTerms {
            num_positive: 1,
            ..Default::default()
        };
        x.reg[0] = smooth_l1(1.0, 1.0);
        let mut v = GroupLossTerms {
            num_positive: 1,
            ..Default::default()
        };
        v.reg[7] = smooth_l1(1.0, 1.0);
        assert_abs_diff_eq!(group_loss(&v, &cfg) / group_loss(&x, &cfg), 0.2, epsilon = 1e-15);
    }

    #[test]
    fn uniform_scaling_over_groups() {
        let cfg = LossConfig::default();
        let g = GroupLossTerms {
            cls: 3.0,
            reg: [0.5; CODE_SIZE],
            dir: 0.7,
            num_positive: 2,
        };
        assert_eq!(total_loss(&[g, g], &cfg), 2.0 * group_loss(&g, &cfg));
        assert_eq!(total_loss(&[], &cfg), 0.0);
    }

    #[test]
    fn no_positives_drops_reg_and_dir() {
        let cfg = LossConfig::default();
        let g = GroupLossTerms {
            cls: 4.0,
            reg: [9.0; CODE_SIZE],
            dir: 9.0,
            num_positive: 0,
        };
        assert_eq!(group_loss(&g, &cfg), 4.0);
    }

    #[test]
    fn group_terms_from_targets() {
        let targets = TargetSet {
            cls: vec![
                AnchorTarget::Foreground(ClassId::Bus),
                AnchorTarget::Ignore,
                AnchorTarget::Background,
            ],
            reg: vec![Some([0.0; CODE_SIZE]), None, None],
            dir: vec![Some(0), None, None],
            reg_weight: vec![1.0, 0.0, 0.0],
            matched: vec![Some(0), None, None],
        };
        let mut reg0 = [0.0; CODE_SIZE];
        reg0[7] = 2.0;
        let pred = GroupPrediction {
            cls_prob: vec![vec![0.9, 0.1], vec![0.5, 0.5], vec![0.2, 0.3]],
            reg: vec![reg0, [5.0; CODE_SIZE], [5.0; CODE_SIZE]],
            dir_logits: vec![[0.0, 0.0]; 3],
        };
        let cfg = LossConfig::default();
        let t = group_terms(&[ClassId::Bus, ClassId::Trailer], &pred, &targets, &cfg).unwrap();
        let f = |p, y| focal_loss(p, y, 0.25, 2.0);
        let cls = f(0.9, true) + f(0.1, false) + f(0.2, false) + f(0.3, false);
        assert_abs_diff_eq!(t.cls, cls, epsilon = 1e-15);
        assert_eq!(t.num_positive, 1);
        assert_eq!(t.reg[7], 1.5);
        assert_eq!(t.reg[0], 0.0);
        assert_abs_diff_eq!(t.dir, 2f64.ln(), epsilon = 1e-15);

        let short = GroupPrediction {
            cls_prob: vec![vec![0.5]; 3],
            ..pred
        };
        assert!(matches!(
            group_terms(&[ClassId::Bus, ClassId::Trailer], &short, &targets, &cfg),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn one_cycle_endpoints() {
        let s = OneCycle::default();
        let total = 1000;
        assert_eq!(s.at(0, total).unwrap(), (0.004, 0.95));
        assert_eq!(s.at(400, total).unwrap(), (0.04, 0.85));
        assert_eq!(s.at(total, total).unwrap(), (4e-7, 0.95));
    }

    #[test]
    fn one_cycle_rejects_out_of_range() {
        let s = OneCycle::default();
        assert!(s.at(11, 10).is_err());
        assert!(s.at(0, 0).is_err());
    }

    #[test]
    fn one_cycle_validation() {
        let mut s = OneCycle::default();
        s.mom_low = 0.99;
        assert!(s.validate().is_err());
        let mut s = OneCycle::default();
        s.pct_peak = 1.0;
        assert!(s.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn focal_nonnegative_and_monotone(p in 0.001f64..0.998, dp in 0.0001f64..0.001, y: bool) {
                prop_assert!(focal_loss(p, y, 0.25, 2.0) >= 0.0);
                prop_assert!(focal_loss(p + dp, true, 0.25, 2.0) < focal_loss(p, true, 0.25, 2.0));
            }

            #[test]
            fn smooth_l1_grad_matches_central_difference(d in -3.0f64..3.0, beta in 0.1f64..2.0) {
                let h = 1e-7;
                let fd = (smooth_l1(d + h, beta) - smooth_l1(d - h, beta)) / (2.0 * h);
                prop_assert!((fd - smooth_l1_grad(d, beta)).abs() <= 1e-6);
            }

            #[test]
            fn one_cycle_shape(total in 10u64..5000) {
                let s = OneCycle::default();
                let peak = s.peak_step(total);
                let mut prev = s.at(0, total).unwrap();
                for step in 1..=total {
                    let cur = s.at(step, total).unwrap();
                    if step <= peak {
                        prop_assert!(cur.0 >= prev.0 && cur.1 <= prev.1);
                    } else {
                        prop_assert!(cur.0 <= prev.0 && cur.1 >= prev.1);
                    }
                    prop_assert!(cur.0 > 0.0 && cur.0 <= 0.04);
                    prev = cur;
                }
            }

            #[test]
            fn group_loss_permutation_invariant(
                a in proptest::collection::vec((0.0f64..5.0, 0.0f64..2.0, 0.0f64..2.0, 0usize..6), 1..8),
                rot in 0usize..8,
            ) {
                let cfg = LossConfig::default();
                let groups: Vec<GroupLossTerms> = a.iter().map(|&(c, r, d, n)| GroupLossTerms {
                    cls: c, reg: [r; CODE_SIZE], dir: d, num_positive: n,
                }).collect();
                let mut rotated = groups.clone();
                rotated.rotate_left(rot % groups.len());
                prop_assert!((total_loss(&groups, &cfg) - total_loss(&rotated, &cfg)).abs() <= 1e-12);
            }
        }
    }
}
