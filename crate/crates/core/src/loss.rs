//! Classification and regression objectives with analytic gradients.
//!
//! Heatmap losses take post-sigmoid scores `f` laid out `[channel][cell]` and
//! return gradients with respect to `f`. Scores are clamped to `[ε, 1−ε]`
//! before logs; clamped cells get zero gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

pub const DEFAULT_THETA: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-7;
pub const DEFAULT_LAMBDA: f64 = 0.25;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SabConfig {
    pub theta: f64,
    pub eps: f64,
}

impl Default for SabConfig {
    fn default() -> Self {
        SabConfig {
            theta: DEFAULT_THETA,
            eps: DEFAULT_EPS,
        }
    }
}

impl SabConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::Config(format!("theta {} outside (0, 1)", self.theta)));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::Config(format!("eps {} outside (0, 0.5)", self.eps)));
        }
        Ok(())
    }
}

/// Pool counts and weights of one (sample, channel) heatmap.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct SabStats {
    pub num_pos: usize,
    /// All negatives, hard ones included.
    pub num_neg: usize,
    pub num_hn: usize,
    pub w_neg: f64,
    pub w_hn: f64,
}

/// Easy- and hard-negative weights. With no positives `w_neg = 0` and
/// `w_hn = 1`.
pub fn sab_weights(num_pos: usize, num_neg: usize, num_hn: usize) -> (f64, f64) {
    let w_neg = if num_pos == 0 {
        0.0
    } else {
        num_pos as f64 / (num_pos + num_neg) as f64
    };
    let w_hn = if num_pos == 0 {
        1.0
    } else {
        num_hn as f64 / (num_hn + num_pos) as f64
    };
    (w_neg, w_hn)
}

pub fn w_pos(s: f64) -> f64 {
    (1.0 - s).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClsLoss {
    pub value: f64,
    /// ∂value/∂f per cell.
    pub grad: Vec<f64>,
    /// Per-cell weight (zero on ignored cells); all ones for focal loss.
    pub weights: Vec<f64>,
    /// One entry per channel; empty for focal loss.
    pub stats: Vec<SabStats>,
}

fn check_inputs(pred: &[f64], target: &[f64], ignore: Option<&[bool]>, channels: usize) -> Result<usize> {
    if channels == 0 || pred.len() != target.len() || pred.len() % channels != 0 {
        return Err(Error::Contract(format!(
            "prediction ({}) and target ({}) do not split into {channels} channels",
            pred.len(),
            target.len()
        )));
    }
    if ignore.is_some_and(|m| m.len() != pred.len()) {
        return Err(Error::Contract("ignore mask shape mismatch".into()));
    }
    if let Some(v) = target.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::Contract(format!("non-binary target {v}")));
    }
    Ok(pred.len() / channels)
}

#[inline]
fn clamp(f: f64, eps: f64) -> (f64, bool) {
    if f < eps {
        (eps, false)
    } else if f > 1.0 - eps {
        (1.0 - eps, false)
    } else {
        (f, true)
    }
}

/// Sample adaptive balance loss. Pools are formed per channel over the
/// non-ignored cells; weights are constants for the gradient.
pub fn sab_loss(pred: &[f64], target: &[f64], ignore: Option<&[bool]>, channels: usize, cfg: &SabConfig) -> Result<ClsLoss> {
    let cells = check_inputs(pred, target, ignore, channels)?;
    let eps = cfg.eps;
    let mut weights = vec![0.0; pred.len()];
    let mut stats = Vec::with_capacity(channels);
    for c in 0..channels {
        let range = c * cells..(c + 1) * cells;
        let mut st = SabStats::default();
        for k in range.clone() {
            if ignore.is_some_and(|m| m[k]) {
                continue;
            }
            if target[k] == 1.0 {
                st.num_pos += 1;
            } else {
                st.num_neg += 1;
                if clamp(pred[k], eps).0 > cfg.theta {
                    st.num_hn += 1;
                }
            }
        }
        (st.w_neg, st.w_hn) = sab_weights(st.num_pos, st.num_neg, st.num_hn);
        for k in range {
            if ignore.is_some_and(|m| m[k]) {
                continue;
            }
            let f = clamp(pred[k], eps).0;
            weights[k] = if target[k] == 1.0 {
                w_pos(f)
            } else if f > cfg.theta {
                st.w_hn
            } else {
                st.w_neg
            };
        }
        stats.push(st);
    }
    let (value, grad) = weighted_bce(pred, target, &weights, eps);
    Ok(ClsLoss {
        value,
        grad,
        weights,
        stats,
    })
}

/// `−Σ w·[y ln f + (1−y) ln(1−f)]` and its gradient at fixed weights.
pub fn weighted_bce(pred: &[f64], target: &[f64], weights: &[f64], eps: f64) -> (f64, Vec<f64>) {
    let mut value = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for k in 0..pred.len() {
        let w = weights[k];
        if w == 0.0 {
            continue;
        }
        let (f, live) = clamp(pred[k], eps);
        let y = target[k];
        value -= w * if y == 1.0 { f.ln() } else { (1.0 - f).ln() };
        if live {
            grad[k] = w * (f - y) / (f * (1.0 - f));
        }
    }
    (value, grad)
}

/// α-balanced focal loss, summed over non-ignored cells.
pub fn focal_loss(pred: &[f64], target: &[f64], ignore: Option<&[bool]>, channels: usize, alpha: f64, gamma: f64, eps: f64) -> Result<ClsLoss> {
    check_inputs(pred, target, ignore, channels)?;
    let mut value = 0.0;
    let mut grad = vec![0.0; pred.len()];
    let mut weights = vec![1.0; pred.len()];
    for k in 0..pred.len() {
        if ignore.is_some_and(|m| m[k]) {
            weights[k] = 0.0;
            continue;
        }
        let (f, live) = clamp(pred[k], eps);
        let (v, g) = if target[k] == 1.0 {
            let q = 1.0 - f;
            (
                -alpha * q.powf(gamma) * f.ln(),
                alpha * (gamma * q.powf(gamma - 1.0) * f.ln() - q.powf(gamma) / f),
            )
        } else {
            let q = 1.0 - f;
            (
                -(1.0 - alpha) * f.powf(gamma) * q.ln(),
                -(1.0 - alpha) * (gamma * f.powf(gamma - 1.0) * q.ln() - f.powf(gamma) / q),
            )
        };
        value += v;
        if live {
            grad[k] = g;
        }
    }
    Ok(ClsLoss {
        value,
        grad,
        weights,
        stats: Vec::new(),
    })
}

/// Mean absolute error over masked cells × channels; `pred` and `target` are
/// `[channel][cell]`, `mask` is `[cell]`. Subgradient 0 where equal.
pub fn regression_loss(pred: &[f64], target: &[f64], mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    let cells = mask.len();
    if cells == 0 || pred.len() != target.len() || pred.len() % cells != 0 {
        return Err(Error::Contract(format!(
            "regression shapes {} / {} / mask {cells}",
            pred.len(),
            target.len()
        )));
    }
    let channels = pred.len() / cells;
    let n = mask.iter().filter(|&&m| m).count() * channels;
    let mut grad = vec![0.0; pred.len()];
    if n == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / n as f64;
    let mut sum = 0.0;
    for c in 0..channels {
        for k in (0..cells).filter(|&k| mask[k]) {
            let i = c * cells + k;
            let d = pred[i] - target[i];
            sum += d.abs();
            grad[i] = if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            };
        }
    }
    Ok((sum * scale, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub classification: f64,
    pub regression: f64,
    pub lambda: f64,
    pub total: f64,
}

pub fn total_loss(cls: f64, reg: f64, lambda: f64) -> LossBreakdown {
    LossBreakdown {
        classification: cls,
        regression: reg,
        lambda,
        total: cls + lambda * reg,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Sab,
    Focal,
    Regression,
}

/// `|a − n| / max(|a|, |n|, floor)`: near-zero gradients compare absolutely.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor for loss-level checks.
pub const LOSS_GRAD_FLOOR: f64 = 1e-8;

/// Random case: 1–4 channels on a grid up to 8×8, scores in [0.01, 0.99]
/// kept at least 1e-4 from θ.
pub fn random_heatmap_case(case_seed: u64, theta: f64) -> (Vec<f64>, Vec<f64>, usize) {
    use rand::Rng;
    let mut rng = rng_for(case_seed, "gradcheck/case");
    let channels = rng.random_range(1..=4);
    let cells = rng.random_range(2..=8) * rng.random_range(2..=8);
    let n = channels * cells;
    let pos_rate = rng.random_range(0.0..0.3);
    let target: Vec<f64> = (0..n).map(|_| if rng.random_bool(pos_rate) { 1.0 } else { 0.0 }).collect();
    let pred = (0..n)
        .map(|_| loop {
            let f = if rng.random_bool(0.5) {
                rng.random_range(0.01..0.99)
            } else {
                rng.random_range(0.01..2.0 * theta.min(0.45))
            };
            if (f - theta).abs() >= 1e-4 {
                break f;
            }
        })
        .collect();
    (pred, target, channels)
}

/// Largest relative error between analytic gradients and central differences
/// on a random case. Heatmap losses are differenced term by term with
/// weights fixed at the unperturbed point; SAB pools are recomputed at each
/// perturbed point and must not move.
pub fn grad_check(kind: LossKind, case_seed: u64, eps: f64) -> Result<f64> {
    if !(1e-8..=1e-4).contains(&eps) {
        return Err(Error::Config(format!("finite-difference step {eps} outside [1e-8, 1e-4]")));
    }
    let cfg = SabConfig::default();
    let (pred, target, channels) = random_heatmap_case(case_seed, cfg.theta);
    let mut worst = 0.0f64;
    match kind {
        LossKind::Sab => {
            let base = sab_loss(&pred, &target, None, channels, &cfg)?;
            for k in 0..pred.len() {
                let mut p = pred.clone();
                p[k] = pred[k] + eps;
                let plus = sab_loss(&p, &target, None, channels, &cfg)?;
                let tp = cell_bce(p[k], target[k], base.weights[k], cfg.eps);
                p[k] = pred[k] - eps;
                let minus = sab_loss(&p, &target, None, channels, &cfg)?;
                let tm = cell_bce(p[k], target[k], base.weights[k], cfg.eps);
                let same_pools = |s: &[SabStats]| {
                    s.iter()
                        .zip(&base.stats)
                        .all(|(a, b)| (a.num_pos, a.num_neg, a.num_hn) == (b.num_pos, b.num_neg, b.num_hn))
                };
                if !same_pools(&plus.stats) || !same_pools(&minus.stats) {
                    return Err(Error::Contract(format!("cell {k} crossed a pool boundary")));
                }
                worst = worst.max(relative_error(base.grad[k], (tp - tm) / (2.0 * eps), LOSS_GRAD_FLOOR));
            }
        }
        LossKind::Focal => {
            let base = focal_loss(&pred, &target, None, channels, FOCAL_ALPHA, FOCAL_GAMMA, DEFAULT_EPS)?;
            for k in 0..pred.len() {
                let term = |f: f64| {
                    focal_loss(&[f], &[target[k]], None, 1, FOCAL_ALPHA, FOCAL_GAMMA, DEFAULT_EPS).map(|l| l.value)
                };
                let numeric = (term(pred[k] + eps)? - term(pred[k] - eps)?) / (2.0 * eps);
                worst = worst.max(relative_error(base.grad[k], numeric, LOSS_GRAD_FLOOR));
            }
        }
        LossKind::Regression => {
            use rand::Rng;
            let mut rng = rng_for(case_seed, "gradcheck/regression");
            let cells = pred.len() / channels;
            let mask: Vec<bool> = (0..cells).map(|_| rng.random_bool(0.4)).collect();
            let reg_pred: Vec<f64> = (0..cells * 10).map(|_| rng.random_range(-2.0..2.0)).collect();
            // keep every residual at least 1e-3 away from the kink
            let reg_target: Vec<f64> = reg_pred
                .iter()
                .map(|&p| p + rng.random_range(1e-3..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
                .collect();
            let (_, grad) = regression_loss(&reg_pred, &reg_target, &mask)?;
            for k in 0..reg_pred.len() {
                let mut p = reg_pred.clone();
                p[k] += eps;
                let plus = regression_loss(&p, &reg_target, &mask)?.0;
                p[k] -= 2.0 * eps;
                let minus = regression_loss(&p, &reg_target, &mask)?.0;
                worst = worst.max(relative_error(grad[k], (plus - minus) / (2.0 * eps), LOSS_GRAD_FLOOR));
            }
        }
    }
    Ok(worst)
}

fn cell_bce(f: f64, y: f64, w: f64, eps: f64) -> f64 {
    weighted_bce(&[f], &[y], &[w], eps).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn single_positive_cell() {
        let l = sab_loss(&[0.75], &[1.0], None, 1, &SabConfig::default()).unwrap();
        assert_eq!(l.weights[0], 0.5);
        assert!(close(l.value, -0.5 * 0.75f64.ln(), 1e-15));
    }

    #[test]
    fn easy_negatives_share_num_pos_over_cells() {
        let mut pred = vec![0.05; 100];
        let mut target = vec![0.0; 100];
        pred[0] = 0.6;
        target[0] = 1.0;
        let l = sab_loss(&pred, &target, None, 1, &SabConfig::default()).unwrap();
        assert!(l.weights[1..].iter().all(|&w| w == 0.01));
        assert_eq!((l.stats[0].num_pos, l.stats[0].num_neg, l.stats[0].num_hn), (1, 99, 0));
    }

    #[test]
    fn hard_negatives_weight() {
        let l = sab_loss(&[0.9, 0.3, 0.4, 0.5], &[1.0, 0.0, 0.0, 0.0], None, 1, &SabConfig::default()).unwrap();
        assert_eq!(&l.weights[1..], &[0.75, 0.75, 0.75]);
    }

    #[test]
    fn theta_boundary_is_easy() {
        let l = sab_loss(&[0.1, 0.5], &[0.0, 1.0], None, 1, &SabConfig::default()).unwrap();
        assert_eq!(l.stats[0].num_hn, 0);
        assert_eq!(l.weights[0], 0.5);
        assert!(l.value.is_finite());
    }

    #[test]
    fn no_positives_trains_against_hard_negatives_only() {
        let l = sab_loss(&[0.05, 0.3, 0.02], &[0.0; 3], None, 1, &SabConfig::default()).unwrap();
        assert_eq!(l.weights, vec![0.0, 1.0, 0.0]);
        assert!(l.value.is_finite() && l.value > 0.0);
    }

    #[test]
    fn pools_are_per_channel_and_skip_ignored() {
        let pred = [0.5, 0.05, 0.05, 0.05, 0.2, 0.05, 0.05, 0.05];
        let target = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let ignore = [false, true, false, false, false, false, false, false];
        let l = sab_loss(&pred, &target, Some(&ignore), 2, &SabConfig::default()).unwrap();
        assert_eq!((l.stats[0].num_pos, l.stats[0].num_neg), (1, 2));
        assert_eq!((l.stats[1].num_pos, l.stats[1].num_neg, l.stats[1].num_hn), (0, 4, 1));
        assert_eq!(l.weights[1], 0.0);
        assert_eq!(l.grad[1], 0.0);
    }

    #[test]
    fn contract_errors() {
        let cfg = SabConfig::default();
        assert!(matches!(sab_loss(&[0.5], &[0.5], None, 1, &cfg), Err(Error::Contract(_))));
        assert!(matches!(sab_loss(&[0.5, 0.2], &[1.0], None, 1, &cfg), Err(Error::Contract(_))));
        assert!(matches!(sab_loss(&[0.5; 3], &[1.0; 3], None, 2, &cfg), Err(Error::Contract(_))));
        assert!(matches!(
            focal_loss(&[0.5], &[2.0], None, 1, 0.25, 2.0, 1e-7),
            Err(Error::Contract(_))
        ));
        assert!(matches!(regression_loss(&[0.0; 5], &[0.0; 4], &[true; 2]), Err(Error::Contract(_))));
        assert!(SabConfig { theta: 1.0, eps: 1e-7 }.validate().is_err());
        assert!(SabConfig { theta: 0.2, eps: 0.5 }.validate().is_err());
    }

    #[test]
    fn clamped_extremes_stay_finite() {
        let pred = [0.0, 1.0, 0.0, 1.0];
        let target = [1.0, 0.0, 0.0, 1.0];
        let s = sab_loss(&pred, &target, None, 1, &SabConfig::default()).unwrap();
        let f = focal_loss(&pred, &target, None, 1, 0.25, 2.0, 1e-7).unwrap();
        for l in [s, f] {
            assert!(l.value.is_finite());
            assert!(l.grad.iter().all(|g| *g == 0.0));
        }
    }

    #[test]
    fn focal_perfect_predictions_are_nearly_free() {
        let eps = 1e-7;
        let on = focal_loss(&[1.0 - eps], &[1.0], None, 1, 0.25, 2.0, eps).unwrap();
        let off = focal_loss(&[eps], &[0.0], None, 1, 0.25, 2.0, eps).unwrap();
        assert!(on.value < 1e-15 && off.value < 1e-15);
    }

    #[test]
    fn regression_examples() {
        let t = [1.0, -2.0, 3.0, 0.5];
        let (v, g) = regression_loss(&t, &t, &[true, true]).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|x| *x == 0.0));
        let (v, g) = regression_loss(&[9.0; 4], &t, &[false, false]).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|x| *x == 0.0));
        // mask picks cell 1 of 2, two channels
        let (v, _) = regression_loss(&[0.0, 1.0, 0.0, 4.0], &[5.0, 0.0, 5.0, 1.0], &[false, true]).unwrap();
        assert_eq!(v, (1.0 + 3.0) / 2.0);
    }

    #[test]
    fn regression_matches_elementwise_oracle() {
        use rand::Rng;
        let mut rng = rng_for(11, "test/l1");
        for _ in 0..50 {
            let cells = rng.random_range(1..40);
            let mask: Vec<bool> = (0..cells).map(|_| rng.random_bool(0.5)).collect();
            let p: Vec<f64> = (0..cells * 10).map(|_| rng.random_range(-3.0..3.0)).collect();
            let t: Vec<f64> = (0..cells * 10).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut diffs = Vec::new();
            for (i, (a, b)) in p.iter().zip(&t).enumerate() {
                if mask[i % cells] {
                    diffs.push((a - b).abs());
                }
            }
            let oracle = if diffs.is_empty() { 0.0 } else { diffs.iter().sum::<f64>() / diffs.len() as f64 };
            let (v, _) = regression_loss(&p, &t, &mask).unwrap();
            assert!((v - oracle).abs() <= 1e-12 * oracle.max(1.0));
        }
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.0, 4.0, 0.25).total, 2.0);
        assert_eq!(total_loss(1.3, 0.0, 0.25).total, 1.3);
        assert_eq!(total_loss(1.3, 7.0, 0.0).total, 1.3);
    }

    #[test]
    fn gradient_checks() {
        for seed in 0..50 {
            for kind in [LossKind::Sab, LossKind::Focal, LossKind::Regression] {
                let e = grad_check(kind, seed, 1e-6).unwrap();
                assert!(e < 1e-6, "{kind:?} seed {seed}: {e}");
            }
        }
        assert!(grad_check(LossKind::Sab, 0, 1e-3).is_err());
    }

    #[test]
    fn gradient_has_closed_form() {
        let cfg = SabConfig::default();
        for seed in 0..20 {
            let (pred, target, ch) = random_heatmap_case(seed, cfg.theta);
            let l = sab_loss(&pred, &target, None, ch, &cfg).unwrap();
            for k in 0..pred.len() {
                let f = pred[k];
                let expect = l.weights[k] * (f - target[k]) / (f * (1.0 - f));
                assert_eq!(l.grad[k], expect);
            }
        }
    }

    #[test]
    fn reduces_to_weighted_bce_without_hard_pool() {
        let cfg = SabConfig {
            theta: 1.0 - 1e-7,
            eps: 1e-7,
        };
        for seed in 0..20 {
            let (pred, target, ch) = random_heatmap_case(seed, 0.1);
            let l = sab_loss(&pred, &target, None, ch, &cfg).unwrap();
            let cells = pred.len() / ch;
            let mut oracle = 0.0;
            for c in 0..ch {
                let r = c * cells..(c + 1) * cells;
                let np = target[r.clone()].iter().filter(|&&y| y == 1.0).count() as f64;
                for k in r {
                    oracle -= if target[k] == 1.0 {
                        (1.0 - pred[k]).sqrt() * pred[k].ln()
                    } else {
                        np / cells as f64 * (1.0 - pred[k]).ln()
                    };
                }
            }
            assert!(l.stats.iter().all(|s| s.num_hn == 0));
            assert!(close(l.value, oracle, 1e-12));
        }
    }

    proptest! {
        #[test]
        fn weight_formulas(num_pos in 0usize..60, num_easy in 0usize..60, num_hn in 0usize..60) {
            let num_neg = num_easy + num_hn;
            let (w_neg, w_hn) = sab_weights(num_pos, num_neg, num_hn);
            if num_pos > 0 {
                prop_assert_eq!(w_neg, num_pos as f64 / (num_pos + num_neg) as f64);
                prop_assert_eq!(w_hn, num_hn as f64 / (num_hn + num_pos) as f64);
            } else {
                prop_assert_eq!((w_neg, w_hn), (0.0, 1.0));
            }
            prop_assert!((0.0..=1.0).contains(&w_neg) && (0.0..=1.0).contains(&w_hn));
        }

        #[test]
        fn counting_conservation(seed in 0u64..1000, theta in 0.05f64..0.9) {
            let (pred, target, ch) = random_heatmap_case(seed, theta);
            let cfg = SabConfig { theta, eps: 1e-7 };
            let l = sab_loss(&pred, &target, None, ch, &cfg).unwrap();
            let cells = pred.len() / ch;
            for (c, s) in l.stats.iter().enumerate() {
                prop_assert_eq!(s.num_pos + s.num_neg, cells);
                let hn = (c * cells..(c + 1) * cells).filter(|&k| target[k] == 0.0 && pred[k] > theta).count();
                prop_assert_eq!(s.num_hn, hn);
                prop_assert!(s.num_hn <= s.num_neg);
            }
        }

        #[test]
        fn easy_negative_monotone(seed in 0u64..1000, bump in 0.0f64..0.05) {
            let cfg = SabConfig::default();
            let (pred, target, ch) = random_heatmap_case(seed, cfg.theta);
            let base = sab_loss(&pred, &target, None, ch, &cfg).unwrap();
            for k in 0..pred.len() {
                if target[k] == 0.0 && pred[k] + bump <= cfg.theta {
                    let mut p = pred.clone();
                    p[k] += bump;
                    let l = sab_loss(&p, &target, None, ch, &cfg).unwrap();
                    prop_assert!(l.value >= base.value);
                }
            }
        }
    }
}
