//! Bird's-eye-view rasterisation: point features, center-heatmap targets and
//! decoding of head outputs back to boxes.
//!
//! Grids are stored row-major as `[channel][row][col]` with `row` indexing y
//! and `col` indexing x. Cell `(row, col)` covers
//! `[x0 + col·cell, x0 + (col+1)·cell) × [y0 + row·cell, y0 + (row+1)·cell)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_yaw, points_in_box, Box3D, ClassId, ClassTable, SceneFrame};
use crate::ingest::MIN_POINTS;

/// Number of regression channels per head:
/// dx, dy, z, ln l, ln w, ln h, sin yaw, cos yaw, vx, vy.
pub const REG_CHANNELS: usize = 10;
/// Channels with content produced by [`voxelize`]; the rest are zero padding.
pub const BASE_FEATURES: usize = 5;
pub const DEFAULT_SCORE_FLOOR: f64 = 0.1;
pub const DEFAULT_MAX_BOXES: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub cell_size: f64,
    pub feature_channels: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::square(10.0, 0.5)
    }
}

impl GridSpec {
    /// Symmetric square grid of half-extent `half` meters.
    pub fn square(half: f64, cell_size: f64) -> Self {
        GridSpec {
            x_range: [-half, half],
            y_range: [-half, half],
            cell_size,
            feature_channels: BASE_FEATURES,
        }
    }

    pub fn width(&self) -> usize {
        ((self.x_range[1] - self.x_range[0]) / self.cell_size).round() as usize
    }

    pub fn height(&self) -> usize {
        ((self.y_range[1] - self.y_range[0]) / self.cell_size).round() as usize
    }

    pub fn cells(&self) -> usize {
        self.width() * self.height()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.cell_size > 0.0
            && self.cell_size.is_finite()
            && self.x_range[1] > 0.0
            && self.y_range[1] > 0.0
            && self.x_range[0] == -self.x_range[1]
            && self.y_range[0] == -self.y_range[1]
            && self.feature_channels >= BASE_FEATURES;
        if !ok {
            return Err(Error::Config(format!("invalid grid spec {self:?}")));
        }
        if self.width() < 4 || self.height() < 4 {
            return Err(Error::Config(format!(
                "grid {}x{} is smaller than 4x4",
                self.width(),
                self.height()
            )));
        }
        Ok(())
    }

    /// `(row, col)` of the cell containing `(x, y)`, or `None` out of range.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fx = ((x - self.x_range[0]) / self.cell_size).floor();
        let fy = ((y - self.y_range[0]) / self.cell_size).floor();
        if fx < 0.0 || fy < 0.0 || !fx.is_finite() || !fy.is_finite() {
            return None;
        }
        let (col, row) = (fx as usize, fy as usize);
        (col < self.width() && row < self.height()).then_some((row, col))
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_range[0] + (col as f64 + 0.5) * self.cell_size,
            self.y_range[0] + (row as f64 + 0.5) * self.cell_size,
        )
    }
}

/// Dense `[C, H, W]` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureGrid {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn at(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[(c * self.height + row) * self.width + col]
    }
}

/// Feature channels: 0 ln(1 + count), 1 mean z, 2 max z, 3 mean intensity,
/// 4 occupancy; channels 5.. are zero.
pub fn voxelize(frame: &SceneFrame, spec: &GridSpec) -> FeatureGrid {
    let (h, w) = (spec.height(), spec.width());
    let hw = h * w;
    let mut grid = FeatureGrid::zeros(spec.feature_channels, h, w);
    let mut count = vec![0usize; hw];
    let mut sum_z = vec![0.0f64; hw];
    let mut max_z = vec![f64::NEG_INFINITY; hw];
    let mut sum_i = vec![0.0f64; hw];
    for p in &frame.points {
        let Some((row, col)) = spec.cell_of(p[0] as f64, p[1] as f64) else {
            continue;
        };
        let k = row * w + col;
        count[k] += 1;
        sum_z[k] += p[2] as f64;
        max_z[k] = max_z[k].max(p[2] as f64);
        sum_i[k] += p[3] as f64;
    }
    let d = &mut grid.data;
    for k in 0..hw {
        let n = count[k];
        if n == 0 {
            continue;
        }
        let nf = n as f64;
        d[k] = (1.0 + nf).ln();
        d[hw + k] = sum_z[k] / nf;
        d[2 * hw + k] = max_z[k];
        d[3 * hw + k] = sum_i[k] / nf;
        d[4 * hw + k] = 1.0;
    }
    grid
}

/// One positive heatmap cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Positive {
    pub class_id: ClassId,
    pub row: usize,
    pub col: usize,
    pub record: [f64; REG_CHANNELS],
    pub num_points: usize,
    pub box_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// `[class][row][col]`, values in {0, 1}.
    pub heatmaps: Vec<f64>,
    /// `[class][row][col]`; ignored cells join no loss pool. All false when
    /// the ignore radius is 0.
    pub ignore: Vec<bool>,
    /// Sorted by (class, row, col); at most one per class and cell.
    pub positives: Vec<Positive>,
}

/// Regression targets for one head: classes merged, one record per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTargets {
    /// `[k][row][col]` for the head's k classes.
    pub heatmap: Vec<f64>,
    pub ignore: Vec<bool>,
    /// `[REG_CHANNELS][row][col]`, zero off the mask.
    pub regression: Vec<f64>,
    /// `[row][col]`.
    pub mask: Vec<bool>,
}

impl TargetSet {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn num_positive(&self, class_id: ClassId) -> usize {
        self.positives.iter().filter(|p| p.class_id == class_id).count()
    }

    /// Slices the targets for a head owning `classes`, in channel order.
    ///
    /// When two classes of one head are centered in the same cell, the
    /// regression record comes from the box with more points (lower class id
    /// on ties).
    pub fn head_targets(&self, classes: &[ClassId]) -> HeadTargets {
        let hw = self.cells();
        let mut heatmap = Vec::with_capacity(classes.len() * hw);
        let mut ignore = Vec::with_capacity(classes.len() * hw);
        for &c in classes {
            let c = c as usize;
            heatmap.extend_from_slice(&self.heatmaps[c * hw..(c + 1) * hw]);
            ignore.extend_from_slice(&self.ignore[c * hw..(c + 1) * hw]);
        }
        let mut regression = vec![0.0; REG_CHANNELS * hw];
        let mut mask = vec![false; hw];
        let mut owner: Vec<Option<&Positive>> = vec![None; hw];
        for p in self.positives.iter().filter(|p| classes.contains(&p.class_id)) {
            let k = p.row * self.width + p.col;
            let replace = match owner[k] {
                None => true,
                Some(q) => (p.num_points, std::cmp::Reverse(p.class_id)) > (q.num_points, std::cmp::Reverse(q.class_id)),
            };
            if replace {
                owner[k] = Some(p);
            }
        }
        for (k, p) in owner.iter().enumerate() {
            if let Some(p) = p {
                mask[k] = true;
                for (ch, v) in p.record.iter().enumerate() {
                    regression[ch * hw + k] = *v;
                }
            }
        }
        HeadTargets {
            heatmap,
            ignore,
            regression,
            mask,
        }
    }

    /// Outputs of a perfect detector for the given head layout: score 1 at
    /// positive cells, 0 elsewhere, exact regression records.
    pub fn ideal_outputs(&self, heads: &[Vec<ClassId>]) -> HeadOutputs {
        HeadOutputs {
            height: self.height,
            width: self.width,
            heads: heads
                .iter()
                .map(|classes| {
                    let t = self.head_targets(classes);
                    HeadOutput {
                        class_ids: classes.clone(),
                        heatmap: t.heatmap,
                        regression: t.regression,
                    }
                })
                .collect(),
        }
    }
}

pub fn encode_record(b: &Box3D, spec: &GridSpec, row: usize, col: usize) -> [f64; REG_CHANNELS] {
    let (cx, cy) = spec.cell_center(row, col);
    [
        (b.center[0] - cx) / spec.cell_size,
        (b.center[1] - cy) / spec.cell_size,
        b.center[2],
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        b.yaw.sin(),
        b.yaw.cos(),
        b.velocity[0],
        b.velocity[1],
    ]
}

pub fn decode_record(r: &[f64; REG_CHANNELS], spec: &GridSpec, row: usize, col: usize, class_id: ClassId, score: f64) -> Box3D {
    let (cx, cy) = spec.cell_center(row, col);
    Box3D {
        center: [cx + r[0] * spec.cell_size, cy + r[1] * spec.cell_size, r[2]],
        size: [r[3].exp(), r[4].exp(), r[5].exp()],
        yaw: normalize_yaw(r[6].atan2(r[7])),
        velocity: [r[8], r[9]],
        class_id,
        score: score.clamp(0.0, 1.0),
    }
}

/// Targets with no ignore region.
pub fn encode_targets(frame: &SceneFrame, spec: &GridSpec, class_table: &ClassTable) -> TargetSet {
    encode_targets_with(frame, spec, class_table, 0.0)
}

/// Binary center targets. Boxes out of range, with fewer than 5 points or of
/// a class outside the table are skipped. Cells within `ignore_radius` cells
/// of a positive (Euclidean, center excluded) are marked ignored for that
/// class unless they are themselves positive.
pub fn encode_targets_with(frame: &SceneFrame, spec: &GridSpec, class_table: &ClassTable, ignore_radius: f64) -> TargetSet {
    let (h, w) = (spec.height(), spec.width());
    let n = class_table.len();
    let hw = h * w;
    let mut best: Vec<Option<Positive>> = vec![None; n * hw];
    for (i, b) in frame.boxes.iter().enumerate() {
        if (b.class_id as usize) >= n {
            continue;
        }
        let Some((row, col)) = spec.cell_of(b.center[0], b.center[1]) else {
            continue;
        };
        let pts = points_in_box(frame, b);
        if pts < MIN_POINTS {
            continue;
        }
        let slot = &mut best[b.class_id as usize * hw + row * w + col];
        // strict > keeps the lower box index on ties
        if slot.as_ref().is_none_or(|p| pts > p.num_points) {
            *slot = Some(Positive {
                class_id: b.class_id,
                row,
                col,
                record: encode_record(b, spec, row, col),
                num_points: pts,
                box_index: i,
            });
        }
    }
    let mut heatmaps = vec![0.0; n * hw];
    let mut positives = Vec::new();
    for (k, p) in best.into_iter().enumerate() {
        if let Some(p) = p {
            heatmaps[k] = 1.0;
            positives.push(p);
        }
    }
    let mut ignore = vec![false; n * hw];
    if ignore_radius > 0.0 {
        let r = ignore_radius.floor() as isize;
        for p in &positives {
            let base = p.class_id as usize * hw;
            for dr in -r..=r {
                for dc in -r..=r {
                    if (dr * dr + dc * dc) as f64 > ignore_radius * ignore_radius {
                        continue;
                    }
                    let (rr, cc) = (p.row as isize + dr, p.col as isize + dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    let k = base + rr as usize * w + cc as usize;
                    if heatmaps[k] == 0.0 {
                        ignore[k] = true;
                    }
                }
            }
        }
    }
    TargetSet {
        num_classes: n,
        height: h,
        width: w,
        heatmaps,
        ignore,
        positives,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub class_ids: Vec<ClassId>,
    /// `[k][row][col]` scores in (0, 1).
    pub heatmap: Vec<f64>,
    /// `[REG_CHANNELS][row][col]`.
    pub regression: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub height: usize,
    pub width: usize,
    pub heads: Vec<HeadOutput>,
}

/// Peaks (score ≥ every in-bounds 8-neighbour and > `score_floor`) decoded
/// to boxes, sorted by descending score, at most `max_boxes`.
pub fn decode_detections(outputs: &HeadOutputs, spec: &GridSpec, max_boxes: usize, score_floor: f64) -> Result<Vec<Box3D>> {
    let (h, w) = (outputs.height, outputs.width);
    if h != spec.height() || w != spec.width() {
        return Err(Error::Contract(format!(
            "outputs are {h}x{w}, grid is {}x{}",
            spec.height(),
            spec.width()
        )));
    }
    let hw = h * w;
    let mut found = Vec::new();
    for head in &outputs.heads {
        if head.heatmap.len() != head.class_ids.len() * hw || head.regression.len() != REG_CHANNELS * hw {
            return Err(Error::Contract("head output shape mismatch".into()));
        }
        for (ch, &class_id) in head.class_ids.iter().enumerate() {
            let m = &head.heatmap[ch * hw..(ch + 1) * hw];
            for row in 0..h {
                for col in 0..w {
                    let s = m[row * w + col];
                    if !(s > score_floor) || !is_peak(m, h, w, row, col) {
                        continue;
                    }
                    let k = row * w + col;
                    let mut r = [0.0; REG_CHANNELS];
                    for (c, v) in r.iter_mut().enumerate() {
                        *v = head.regression[c * hw + k];
                    }
                    found.push(decode_record(&r, spec, row, col, class_id, s));
                }
            }
        }
    }
    // stable: equal scores keep head / channel / raster order
    found.sort_by(|a, b| b.score.total_cmp(&a.score));
    found.truncate(max_boxes);
    Ok(found)
}

fn is_peak(m: &[f64], h: usize, w: usize, row: usize, col: usize) -> bool {
    let s = m[row * w + col];
    for r in row.saturating_sub(1)..=(row + 1).min(h - 1) {
        for c in col.saturating_sub(1)..=(col + 1).min(w - 1) {
            if m[r * w + c] > s {
                return false;
            }
        }
    }
    true
}
