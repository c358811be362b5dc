//! Independent reference implementations shared by integration and
//! acceptance tests. Nothing here calls the library's loss or AP code.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct HeatmapCase {
    pub pred: Vec<f64>,
    pub target: Vec<f64>,
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Random grid up to 16×16 with 1–4 channels. Positives are sparse, and
/// roughly one cell in six sits in a saturated or tiny-score corner so the
/// clamp is exercised.
pub fn random_case(seed: u64) -> HeatmapCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.random_range(1..=16);
    let cols = rng.random_range(1..=16);
    let channels = rng.random_range(1..=4);
    let p_pos = rng.random_range(0.0..0.2);
    let n = rows * cols * channels;
    let mut pred = Vec::with_capacity(n);
    let mut target = Vec::with_capacity(n);
    for _ in 0..n {
        target.push(if rng.random_bool(p_pos) { 1.0 } else { 0.0 });
        pred.push(match rng.random_range(0..12) {
            0 => rng.random_range(0.0..1e-8),
            1 => 1.0 - rng.random_range(0.0..1e-8),
            _ => rng.random_range(0.0..1.0),
        });
    }
    HeatmapCase { pred, target, channels, rows, cols }
}

/// Line-by-line reading of the per-sample algorithm: one counting pass,
/// the three weights, then separate positive, easy-negative and
/// hard-negative accumulation loops, negated at the end.
pub fn sab_algorithm(pred: &[f64], target: &[f64], channels: usize, theta: f64, eps: f64) -> f64 {
    let cells = pred.len() / channels;
    let clampf = |f: f64| f.max(eps).min(1.0 - eps);
    let mut total = 0.0;
    for c in 0..channels {
        let f: Vec<f64> = pred[c * cells..(c + 1) * cells].iter().map(|&v| clampf(v)).collect();
        let y = &target[c * cells..(c + 1) * cells];

        let (mut num_pos, mut num_neg, mut num_hn) = (0u64, 0u64, 0u64);
        for i in 0..cells {
            if y[i] == 1.0 {
                num_pos += 1;
            } else {
                num_neg += 1;
                if f[i] > theta {
                    num_hn += 1;
                }
            }
        }

        let w_neg = if num_pos + num_neg == 0 || num_pos == 0 { 0.0 } else { num_pos as f64 / (num_pos + num_neg) as f64 };
        let w_hn = if num_pos == 0 { 1.0 } else { num_hn as f64 / (num_hn + num_pos) as f64 };

        let mut loss_pos = 0.0;
        for i in (0..cells).filter(|&i| y[i] == 1.0) {
            let w_pos = (1.0 - f[i]).sqrt();
            loss_pos += w_pos * y[i] * f[i].ln();
        }
        let mut loss_neg = 0.0;
        for i in (0..cells).filter(|&i| y[i] == 0.0 && f[i] <= theta) {
            loss_neg += w_neg * (1.0 - y[i]) * (1.0 - f[i]).ln();
        }
        let mut loss_hn = 0.0;
        for i in (0..cells).filter(|&i| y[i] == 0.0 && f[i] > theta) {
            loss_hn += w_hn * (1.0 - y[i]) * (1.0 - f[i]).ln();
        }
        total += loss_pos + loss_neg + loss_hn;
    }
    -total
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Detection or ground truth on the ground plane: (frame, x, y, score).
pub type PlaneBox = (u32, f64, f64, f64);

/// Reference average precision: walk the score-ordered detections, match
/// each to the nearest free ground truth of its frame, trace the full
/// precision/recall curve and sample it at 101 recall points with linear
/// interpolation (zero beyond the last recall). The first `min_recall`
/// share of points is dropped, precision is shifted by `min_precision`,
/// clipped at zero and renormalized.
pub fn ap_reference(dets: &[PlaneBox], gts: &[PlaneBox], threshold: f64, min_recall: f64, min_precision: f64) -> f64 {
    if dets.is_empty() || gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].3.partial_cmp(&dets[a].3).unwrap().then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    let mut hits = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        let (frame, x, y, _) = dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, &(gf, gx, gy, _)) in gts.iter().enumerate() {
            if used[g] || gf != frame {
                continue;
            }
            let d = ((x - gx).powi(2) + (y - gy).powi(2)).sqrt();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((g, d));
            }
        }
        if let Some((g, d)) = best {
            if d <= threshold {
                used[g] = true;
                hits += 1;
            }
        }
        curve.push((hits as f64 / gts.len() as f64, hits as f64 / (rank + 1) as f64));
    }
    let sample = |r: f64| -> f64 {
        let (last_r, last_p) = curve[curve.len() - 1];
        if r > last_r {
            return 0.0;
        }
        if r == last_r {
            return last_p;
        }
        if r < curve[0].0 {
            return curve[0].1;
        }
        let mut j = curve.len() - 1;
        while curve[j].0 > r {
            j -= 1;
        }
        let ((r0, p0), (r1, p1)) = (curve[j], curve[j + 1]);
        p0 + (p1 - p0) * (r - r0) / (r1 - r0)
    };
    let skip = (100.0 * min_recall).round() as usize;
    let kept: Vec<f64> = (skip + 1..=100).map(|k| (sample(k as f64 / 100.0) - min_precision).max(0.0)).collect();
    (kept.iter().sum::<f64>() / kept.len() as f64 / (1.0 - min_precision)).min(1.0)
}

/// Up to 20 ground truths over 1–3 frames; detections are jittered copies
/// of a random subset plus clutter, with occasional tied scores.
pub fn random_ap_case(seed: u64) -> (Vec<PlaneBox>, Vec<PlaneBox>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = rng.random_range(1..=3u32);
    let n_gt = rng.random_range(1..=20);
    let gts: Vec<PlaneBox> = (0..n_gt)
        .map(|_| (rng.random_range(0..frames), rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), 1.0))
        .collect();
    let mut dets = Vec::new();
    for g in &gts {
        if rng.random_bool(0.7) {
            let s = if rng.random_bool(0.1) { 0.5 } else { rng.random_range(0.0..1.0) };
            dets.push((g.0, g.1 + rng.random_range(-3.0..3.0), g.2 + rng.random_range(-3.0..3.0), s));
        }
    }
    for _ in 0..rng.random_range(0..=20 - dets.len().min(20)) {
        dets.push((rng.random_range(0..frames), rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(0.0..1.0)));
    }
    let threshold = [0.5, 1.0, 2.0, 4.0][rng.random_range(0..4)];
    (dets, gts, threshold)
}
