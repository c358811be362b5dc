//! Copy-paste augmentation from the episode's own shots.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bev_overlap, normalize_yaw, Box3D, ClassId, FrameId, InstanceId, SceneFrame};
use crate::ingest::{EpisodeSpec, MIN_POINTS};
use crate::seed::rng_for;
use crate::synthgen::Dataset;

/// One stored appearance: its box and its points in box coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankObject {
    pub instance: InstanceId,
    pub source_frame: FrameId,
    pub template: Box3D,
    /// x, y, z relative to the box center and heading; intensity unchanged.
    pub local_points: Vec<[f32; 4]>,
}

/// Per novel class, every usable appearance of the episode's K shots.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ShotBank {
    pub objects: BTreeMap<ClassId, Vec<BankObject>>,
}

impl ShotBank {
    /// Appearances with at least [`MIN_POINTS`] points from the shots' train
    /// frames. A shot frame that is not a train frame is an integrity error.
    pub fn from_episode(dataset: &Dataset, episode: &EpisodeSpec) -> Result<ShotBank> {
        let mut objects: BTreeMap<ClassId, Vec<BankObject>> = BTreeMap::new();
        for shot in episode.shots.values().flatten() {
            let instance: InstanceId = shot
                .instance_id
                .parse()
                .map_err(|_| Error::Lookup(format!("instance `{}` is not a synthetic id", shot.instance_id)))?;
            for r in &shot.frame_refs {
                let frame = train_frame(dataset, r)?;
                let Some(k) = frame.instance_ids.iter().position(|&i| i == instance) else {
                    return Err(Error::Integrity(format!("instance {instance} missing from frame {r}")));
                };
                let template = frame.boxes[k];
                let local_points: Vec<[f32; 4]> = frame
                    .points
                    .iter()
                    .filter_map(|p| {
                        let w = [p[0] as f64, p[1] as f64, p[2] as f64];
                        template.contains(w).then(|| {
                            let l = template.to_local(w);
                            [l[0] as f32, l[1] as f32, l[2] as f32, p[3]]
                        })
                    })
                    .collect();
                if local_points.len() >= MIN_POINTS {
                    objects.entry(shot.class_id).or_default().push(BankObject {
                        instance,
                        source_frame: frame.frame_id,
                        template,
                        local_points,
                    });
                }
            }
        }
        Ok(ShotBank { objects })
    }

    pub fn is_empty(&self) -> bool {
        self.objects.values().all(Vec::is_empty)
    }
}

/// Train frame named by an episode frame reference.
pub(crate) fn train_frame<'a>(dataset: &'a Dataset, reference: &str) -> Result<&'a SceneFrame> {
    let id: FrameId = reference
        .parse()
        .map_err(|_| Error::Lookup(format!("frame reference `{reference}` is not a synthetic frame id")))?;
    if dataset.is_val_frame(id) {
        return Err(Error::Integrity(format!("episode references validation frame {id}")));
    }
    dataset
        .train_frame(id)
        .ok_or_else(|| Error::Lookup(format!("unknown frame {id}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GtAugConfig {
    /// Target number of objects per novel class in a frame.
    pub min_count: usize,
    /// Placement attempts per pasted object.
    pub attempts: usize,
    /// Pasted footprints stay inside this area.
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    /// No pasted center closer to the sensor than this.
    pub min_range: f64,
}

impl Default for GtAugConfig {
    fn default() -> Self {
        GtAugConfig {
            min_count: 2,
            attempts: 10,
            x_range: [-10.0, 10.0],
            y_range: [-10.0, 10.0],
            min_range: 2.0,
        }
    }
}

/// Pastes bank objects into `frame` until every bank class has `min_count`
/// instances or a pasted object fails all its placement attempts.
///
/// Pasted boxes never overlap an existing footprint, are flagged synthetic,
/// keep their source instance id, and displace any frame points they cover.
pub fn gt_aug(frame: &SceneFrame, bank: &ShotBank, cfg: &GtAugConfig, seed: u64) -> SceneFrame {
    let mut out = frame.clone();
    let mut rng = rng_for(seed, &format!("gtaug/{}", frame.frame_id));
    for (&class, pool) in &bank.objects {
        if pool.is_empty() {
            continue;
        }
        let mut count = out.boxes.iter().filter(|b| b.class_id == class).count();
        while count < cfg.min_count {
            let src = &pool[rng.random_range(0..pool.len())];
            match place(&out, src, cfg, &mut rng) {
                Some(b) => {
                    paste(&mut out, src, b);
                    count += 1;
                }
                None => {
                    log::debug!("frame {}: no free spot for class {class} after {} attempts", frame.frame_id, cfg.attempts);
                    break;
                }
            }
        }
    }
    out
}

fn place(frame: &SceneFrame, src: &BankObject, cfg: &GtAugConfig, rng: &mut impl Rng) -> Option<Box3D> {
    let t = &src.template;
    let r = 0.5 * t.size[0].hypot(t.size[1]);
    let (xl, xh) = (cfg.x_range[0] + r, cfg.x_range[1] - r);
    let (yl, yh) = (cfg.y_range[0] + r, cfg.y_range[1] - r);
    if !(xl < xh && yl < yh) {
        return None;
    }
    for _ in 0..cfg.attempts {
        let x = rng.random_range(xl..xh);
        let y = rng.random_range(yl..yh);
        let yaw = normalize_yaw(rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
        if x.hypot(y) < cfg.min_range {
            continue;
        }
        let (s, c) = (yaw - t.yaw).sin_cos();
        let candidate = Box3D {
            center: [x, y, t.center[2]],
            yaw,
            velocity: [c * t.velocity[0] - s * t.velocity[1], s * t.velocity[0] + c * t.velocity[1]],
            ..*t
        };
        if !frame.boxes.iter().any(|b| bev_overlap(b, &candidate)) {
            return Some(candidate);
        }
    }
    None
}

fn paste(frame: &mut SceneFrame, src: &BankObject, b: Box3D) {
    frame.points.retain(|p| !b.contains([p[0] as f64, p[1] as f64, p[2] as f64]));
    frame.points.extend(src.local_points.iter().map(|l| {
        let w = b.to_world([l[0] as f64, l[1] as f64, l[2] as f64]);
        [w[0] as f32, w[1] as f32, w[2] as f32, l[3]]
    }));
    frame.push_box(b, src.instance, true);
}
