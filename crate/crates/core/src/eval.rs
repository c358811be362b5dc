//! Center-distance average precision and the base / novel / combined
//! aggregates.
//!
//! AP follows the official nuScenes toolkit: detections are matched greedily
//! in descending score to the nearest unmatched ground truth of the same
//! frame; precision is linearly interpolated onto 101 recall points (zero
//! beyond the last reached recall); bins at or below the recall floor are
//! dropped, the precision floor is subtracted and clipped, and the mean is
//! divided by `1 − floor`, then clipped to [0, 1] against rounding.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bevgrid::{decode_detections, voxelize, FeatureGrid, GridSpec};
use crate::error::{Error, Result};
use crate::geometry::{center_distance, Box3D, ClassId, ClassRole, ClassTable, FrameId};
use crate::geometry::SceneFrame;
use crate::model::Model;
use crate::synthgen::Dataset;

pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
pub const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub base_range: f64,
    /// Per-class range overrides by name.
    pub class_ranges: BTreeMap<String, f64>,
    /// Range of novel classes without an override.
    pub novel_range: f64,
    pub max_boxes: usize,
    pub min_recall: f64,
    pub min_precision: f64,
    /// Peaks at or below this score are not decoded.
    pub score_floor: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            base_range: 51.2,
            class_ranges: BTreeMap::from([("police".into(), 50.0), ("stroller".into(), 40.0)]),
            novel_range: 30.0,
            max_boxes: crate::bevgrid::DEFAULT_MAX_BOXES,
            min_recall: 0.1,
            min_precision: 0.1,
            score_floor: crate::bevgrid::DEFAULT_SCORE_FLOOR,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let increasing = self.thresholds.windows(2).all(|w| w[0] < w[1]);
        if self.thresholds.is_empty() || !increasing || self.thresholds[0] <= 0.0 {
            return Err(Error::Config(format!("thresholds {:?} must be positive and strictly increasing", self.thresholds)));
        }
        if !(0.0..1.0).contains(&self.min_recall) || !(0.0..1.0).contains(&self.min_precision) || self.max_boxes == 0 {
            return Err(Error::Config("recall / precision floors must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn range_of(&self, table: &ClassTable, class: ClassId) -> f64 {
        let name = table.name(class);
        if let Some(&r) = self.class_ranges.get(name) {
            return r;
        }
        match table.role(class) {
            Some(ClassRole::Novel) => self.novel_range,
            _ => self.base_range,
        }
    }
}

/// JSON key of a threshold: `0.5`, `1`, `2`, `4`.
pub fn threshold_key(t: f64) -> String {
    format!("{t}")
}

/// Precision at each of the 101 recall points, nuScenes style.
///
/// `tp[i]` says whether the i-th detection in score order is a match.
fn interpolated_precision(tp: &[bool], num_gt: usize) -> Vec<f64> {
    let mut rec = Vec::with_capacity(tp.len());
    let mut prec = Vec::with_capacity(tp.len());
    let (mut t, mut f) = (0usize, 0usize);
    for &hit in tp {
        if hit {
            t += 1;
        } else {
            f += 1;
        }
        rec.push(t as f64 / num_gt as f64);
        prec.push(t as f64 / (t + f) as f64);
    }
    (0..RECALL_POINTS)
        .map(|i| {
            let r = i as f64 / (RECALL_POINTS - 1) as f64;
            let last = rec.len() - 1;
            if r > rec[last] {
                0.0
            } else if r < rec[0] {
                prec[0]
            } else if r == rec[last] {
                prec[last]
            } else {
                // last j with rec[j] <= r; rec[j + 1] > r
                let j = rec.partition_point(|&x| x <= r) - 1;
                prec[j] + (prec[j + 1] - prec[j]) / (rec[j + 1] - rec[j]) * (r - rec[j])
            }
        })
        .collect()
}

/// Greedy matching; returns the match flag of each detection in score order.
fn match_detections(dets: &[(FrameId, Box3D)], gts: &[(FrameId, Box3D)], threshold: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.score.total_cmp(&dets[a].1.score));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|i| {
            let (frame, det) = &dets[i];
            let best = gts
                .iter()
                .enumerate()
                .filter(|(g, (f, _))| f == frame && !taken[*g])
                .map(|(g, (_, gt))| (g, center_distance(det, gt)))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            match best {
                Some((g, d)) if d <= threshold => {
                    taken[g] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// AP over several frames; detections only match ground truth of their own
/// frame. Zero without ground truth or detections.
pub fn average_precision_frames(dets: &[(FrameId, Box3D)], gts: &[(FrameId, Box3D)], threshold: f64, min_recall: f64, min_precision: f64) -> f64 {
    if gts.is_empty() || dets.is_empty() {
        return 0.0;
    }
    let tp = match_detections(dets, gts, threshold);
    let prec = interpolated_precision(&tp, gts.len());
    let first = (100.0 * min_recall).round() as usize + 1;
    let kept = &prec[first..];
    let mean = kept.iter().map(|p| (p - min_precision).max(0.0)).sum::<f64>() / kept.len() as f64;
    (mean / (1.0 - min_precision)).clamp(0.0, 1.0)
}

/// Single-frame AP with the default 10% floors.
pub fn average_precision(dets: &[Box3D], gts: &[Box3D], threshold: f64) -> f64 {
    let tag = |b: &[Box3D]| b.iter().map(|&x| (0, x)).collect::<Vec<_>>();
    average_precision_frames(&tag(dets), &tag(gts), threshold, 0.1, 0.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    /// Threshold key → AP.
    pub ap: BTreeMap<String, f64>,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: BTreeMap<String, ClassReport>,
    /// Per threshold, mean AP over base / novel classes.
    pub base_ap: BTreeMap<String, f64>,
    pub novel_ap: BTreeMap<String, f64>,
    pub bmap: f64,
    pub nmap: f64,
    pub cmap: f64,
    pub thresholds: Vec<f64>,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Header of [`Self::csv_row`]: base APs, bmAP, novel APs, nmAP, cmAP.
    pub fn csv_header(thresholds: &[f64]) -> String {
        let mut cols = Vec::new();
        for group in ["base", "novel"] {
            cols.extend(thresholds.iter().map(|&t| format!("{group}_ap@{}", threshold_key(t))));
            cols.push(if group == "base" { "bmap".into() } else { "nmap".into() });
        }
        cols.push("cmap".into());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut out = String::new();
        for (aps, m) in [(&self.base_ap, self.bmap), (&self.novel_ap, self.nmap)] {
            for t in &self.thresholds {
                write!(out, "{:.6},", aps[&threshold_key(*t)]).expect("write to string");
            }
            write!(out, "{m:.6},").expect("write to string");
        }
        write!(out, "{:.6}", self.cmap).expect("write to string");
        out
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::csv_header(&self.thresholds), self.csv_row())
    }
}

/// Runs the detector over `frames` and decodes each frame's boxes.
pub fn detect(model: &Model, frames: &[SceneFrame], grid: &GridSpec, cfg: &EvalConfig) -> Result<BTreeMap<FrameId, Vec<Box3D>>> {
    let mut out = BTreeMap::new();
    for chunk in frames.chunks(8) {
        let grids: Vec<FeatureGrid> = chunk.iter().map(|f| voxelize(f, grid)).collect();
        let inputs: Vec<&FeatureGrid> = grids.iter().collect();
        for (f, o) in chunk.iter().zip(model.predict(&inputs)?) {
            out.insert(f.frame_id, decode_detections(&o, grid, cfg.max_boxes, cfg.score_floor)?);
        }
    }
    Ok(out)
}

/// Evaluates per-frame detections against the validation split.
///
/// Every validation frame must have an entry and every entry must be a
/// validation frame. Per frame, only the `max_boxes` highest-scoring
/// detections count; per class, both sides are restricted to the class range.
pub fn evaluate(detections: &BTreeMap<FrameId, Vec<Box3D>>, dataset: &Dataset, table: &ClassTable, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let val: BTreeSet<FrameId> = dataset.val_frames.iter().map(|f| f.frame_id).collect();
    if let Some(f) = detections.keys().find(|f| !val.contains(f)) {
        return Err(Error::Contract(format!("detections for frame {f}, which is not a validation frame")));
    }
    if let Some(f) = val.iter().find(|f| !detections.contains_key(f)) {
        return Err(Error::Contract(format!("no detections entry for validation frame {f}")));
    }
    if dataset.val_frames.iter().any(|f| f.synthetic.iter().any(|&s| s)) {
        return Err(Error::Integrity("validation frames contain augmented boxes".into()));
    }
    let capped: BTreeMap<FrameId, Vec<Box3D>> = detections
        .iter()
        .map(|(&f, dets)| {
            let mut d = dets.clone();
            d.sort_by(|a, b| b.score.total_cmp(&a.score));
            d.truncate(cfg.max_boxes);
            (f, d)
        })
        .collect();

    let mut per_class = BTreeMap::new();
    let mut base_maps = Vec::new();
    let mut novel_maps = Vec::new();
    let mut base_ap: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut novel_ap: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for info in table.classes() {
        let range = cfg.range_of(table, info.id);
        let keep = |b: &Box3D| b.class_id == info.id && b.range() <= range;
        let gts: Vec<(FrameId, Box3D)> = dataset
            .val_frames
            .iter()
            .flat_map(|f| f.boxes.iter().filter(|b| keep(b)).map(move |&b| (f.frame_id, b)))
            .collect();
        let dets: Vec<(FrameId, Box3D)> = capped
            .iter()
            .flat_map(|(&f, ds)| ds.iter().filter(|b| keep(b)).map(move |&b| (f, b)))
            .collect();
        let mut ap = BTreeMap::new();
        for &t in &cfg.thresholds {
            let a = average_precision_frames(&dets, &gts, t, cfg.min_recall, cfg.min_precision);
            let group = if info.role == ClassRole::Base { &mut base_ap } else { &mut novel_ap };
            group.entry(threshold_key(t)).or_default().push(a);
            ap.insert(threshold_key(t), a);
        }
        let map = mean(ap.values().copied());
        if info.role == ClassRole::Base {
            base_maps.push(map);
        } else {
            novel_maps.push(map);
        }
        per_class.insert(info.name.clone(), ClassReport { ap, map });
    }
    let collapse = |m: BTreeMap<String, Vec<f64>>| -> BTreeMap<String, f64> {
        let mut out: BTreeMap<String, f64> = cfg.thresholds.iter().map(|&t| (threshold_key(t), 0.0)).collect();
        for (k, v) in m {
            out.insert(k, mean(v));
        }
        out
    };
    Ok(EvalReport {
        per_class,
        base_ap: collapse(base_ap),
        novel_ap: collapse(novel_ap),
        bmap: mean(base_maps.iter().copied()),
        nmap: mean(novel_maps.iter().copied()),
        cmap: mean(base_maps.iter().chain(&novel_maps).copied()),
        thresholds: cfg.thresholds.clone(),
    })
}
