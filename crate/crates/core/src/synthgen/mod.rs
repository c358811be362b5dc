//! Deterministic synthetic long-tail LiDAR scenes.
//!
//! Instances are drawn from per-class frequency weights, split into train or
//! val as whole instances, and then scattered over frames. Each appearance is
//! rendered as jittered samples on five box faces (no bottom), with a point
//! budget that falls off with the inverse square of the range.

mod io;

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bev_overlap, Box3D, ClassId, ClassRole, ClassTable, FrameId, InstanceId, SceneFrame};
use crate::seed::rng_for;

pub use io::{read_dataset, read_frame, write_dataset, write_frame, FORMAT_VERSION};

pub const POINT_JITTER_SIGMA: f64 = 0.02;
pub const INTENSITY: f32 = 0.5;
pub const GROUND_Z: f64 = -0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub role: ClassRole,
    /// Relative instance frequency.
    pub weight: f64,
    pub length: [f64; 2],
    pub width: [f64; 2],
    pub height: [f64; 2],
    /// Upper bound of the scripted constant speed (m/s).
    pub max_speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub classes: Vec<ClassSpec>,
    pub num_instances: usize,
    /// Inclusive range of frames an instance appears in.
    pub frames_per_instance: [usize; 2],
    pub objects_per_frame: usize,
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    /// Points ≈ density · surface_area / range².
    pub density: f64,
    pub max_points_per_object: usize,
    /// Sensor clearance: no object center closer than this.
    pub min_range: f64,
    pub ground_points: usize,
    /// Probability that an appearance loses an angular sector of its points.
    pub occlusion_prob: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

fn class(name: &str, role: ClassRole, weight: f64, l: [f64; 2], w: [f64; 2], h: [f64; 2], v: f64) -> ClassSpec {
    ClassSpec {
        name: name.into(),
        role,
        weight,
        length: l,
        width: w,
        height: h,
        max_speed: v,
    }
}

impl Default for WorldSpec {
    /// Four base classes and two rare novel classes on a 20 m × 20 m patch.
    fn default() -> Self {
        use ClassRole::*;
        WorldSpec {
            classes: vec![
                class("car", Base, 30.0, [3.9, 4.7], [1.7, 2.0], [1.4, 1.6], 8.0),
                class("pedestrian", Base, 25.0, [0.5, 0.8], [0.5, 0.8], [1.6, 1.9], 1.5),
                class("bicycle", Base, 15.0, [1.6, 1.9], [0.5, 0.7], [1.0, 1.3], 4.0),
                class("traffic_cone", Base, 25.0, [0.3, 0.45], [0.3, 0.45], [0.6, 0.9], 0.0),
                class("police", Novel, 1.2, [4.8, 5.2], [2.0, 2.2], [1.8, 2.1], 10.0),
                class("stroller", Novel, 1.2, [0.8, 1.0], [0.55, 0.7], [0.95, 1.15], 1.0),
            ],
            num_instances: 3000,
            frames_per_instance: [1, 3],
            objects_per_frame: 8,
            x_range: [-10.0, 10.0],
            y_range: [-10.0, 10.0],
            density: 300.0,
            max_points_per_object: 400,
            min_range: 2.0,
            ground_points: 300,
            occlusion_prob: 0.2,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn class_table(&self) -> Result<ClassTable> {
        ClassTable::new(self.classes.iter().map(|c| (c.name.clone(), c.role)))
    }

    pub fn validate(&self) -> Result<()> {
        let table = self.class_table()?;
        if self.classes.iter().any(|c| !(c.weight >= 0.0 && c.weight.is_finite())) {
            return Err(Error::Config("frequency weights must be nonnegative".into()));
        }
        if table.base_ids().is_empty() || table.novel_ids().is_empty() {
            return Err(Error::Config("need at least one base and one novel class".into()));
        }
        let novel_weight: f64 = self
            .classes
            .iter()
            .filter(|c| c.role == ClassRole::Novel)
            .map(|c| c.weight)
            .sum();
        if novel_weight <= 0.0 {
            return Err(Error::Config(
                "novel class weights are all zero; no novel instances would exist".into(),
            ));
        }
        for c in &self.classes {
            for (what, r) in [("length", c.length), ("width", c.width), ("height", c.height)] {
                if !(r[0] > 0.0 && r[0] <= r[1]) {
                    return Err(Error::Config(format!("class `{}`: bad {what} range {r:?}", c.name)));
                }
            }
            if c.max_speed < 0.0 {
                return Err(Error::Config(format!("class `{}`: negative speed", c.name)));
            }
        }
        let span_x = self.x_range[1] - self.x_range[0];
        let span_y = self.y_range[1] - self.y_range[0];
        let largest = self
            .classes
            .iter()
            .map(|c| c.length[1].hypot(c.width[1]))
            .fold(0.0, f64::max);
        if !(span_x > largest + 2.0 * self.min_range && span_y > largest + 2.0 * self.min_range) {
            return Err(Error::Config("scene extent too small for the class size ranges".into()));
        }
        let [fmin, fmax] = self.frames_per_instance;
        if fmin == 0 || fmin > fmax {
            return Err(Error::Config(format!("bad frames_per_instance {:?}", self.frames_per_instance)));
        }
        if self.objects_per_frame == 0 || self.num_instances == 0 {
            return Err(Error::Config("need at least one instance and one object per frame".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::Config("val_fraction / occlusion_prob out of range".into()));
        }
        if self.density <= 0.0 || self.max_points_per_object == 0 {
            return Err(Error::Config("density must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train_frames: Vec<SceneFrame>,
    pub val_frames: Vec<SceneFrame>,
    pub class_table: ClassTable,
    /// instance → frames it appears in, ascending.
    pub instance_index: BTreeMap<InstanceId, Vec<FrameId>>,
    pub spec: Option<WorldSpec>,
}

impl Dataset {
    pub fn frames(&self) -> impl Iterator<Item = &SceneFrame> {
        self.train_frames.iter().chain(self.val_frames.iter())
    }

    pub fn train_frame(&self, id: FrameId) -> Option<&SceneFrame> {
        self.train_frames.iter().find(|f| f.frame_id == id)
    }

    pub fn is_val_frame(&self, id: FrameId) -> bool {
        self.val_frames.iter().any(|f| f.frame_id == id)
    }

    /// instance → class, from frame contents.
    pub fn instance_classes(&self) -> BTreeMap<InstanceId, ClassId> {
        let mut out = BTreeMap::new();
        for f in self.frames() {
            for (b, &id) in f.boxes.iter().zip(&f.instance_ids) {
                out.insert(id, b.class_id);
            }
        }
        out
    }

    /// Check split isolation and that the index matches frame contents.
    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeMap<InstanceId, Vec<FrameId>> = BTreeMap::new();
        let mut split_of: BTreeMap<InstanceId, bool> = BTreeMap::new();
        let mut frame_ids = std::collections::BTreeSet::new();
        for (is_val, frames) in [(false, &self.train_frames), (true, &self.val_frames)] {
            for f in frames {
                f.validate()?;
                if !frame_ids.insert(f.frame_id) {
                    return Err(Error::Integrity(format!("duplicate frame id {}", f.frame_id)));
                }
                for &id in &f.instance_ids {
                    if *split_of.entry(id).or_insert(is_val) != is_val {
                        return Err(Error::Integrity(format!("instance {id} appears in both splits")));
                    }
                    seen.entry(id).or_default().push(f.frame_id);
                }
            }
        }
        for v in seen.values_mut() {
            v.sort_unstable();
        }
        if seen != self.instance_index {
            return Err(Error::Integrity("instance index disagrees with frame contents".into()));
        }
        Ok(())
    }
}

struct Instance {
    id: InstanceId,
    class_id: ClassId,
    size: [f64; 3],
    velocity: [f64; 2],
    appearances: usize,
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Round to the nearest f32 so serialized frames re-read bit-for-bit.
fn q(v: f64) -> f64 {
    v as f32 as f64
}

pub fn generate_dataset(spec: &WorldSpec) -> Result<Dataset> {
    spec.validate()?;
    let class_table = spec.class_table()?;
    let total_weight: f64 = spec.classes.iter().map(|c| c.weight).sum();

    let mut rng = rng_for(spec.seed, "synthgen/instances");
    let mut instances = Vec::with_capacity(spec.num_instances);
    for i in 0..spec.num_instances {
        let mut r = rng.random::<f64>() * total_weight;
        let mut class_id = spec.classes.len() - 1;
        for (c, cs) in spec.classes.iter().enumerate() {
            if r < cs.weight {
                class_id = c;
                break;
            }
            r -= cs.weight;
        }
        let cs = &spec.classes[class_id];
        let size = [uniform(&mut rng, cs.length), uniform(&mut rng, cs.width), uniform(&mut rng, cs.height)];
        let speed = uniform(&mut rng, [0.0, cs.max_speed]);
        let heading = rng.random_range(-PI..PI);
        let appearances = rng.random_range(spec.frames_per_instance[0]..=spec.frames_per_instance[1]);
        instances.push(Instance {
            id: i as InstanceId,
            class_id: class_id as ClassId,
            size: size.map(q),
            velocity: [q(speed * heading.cos()), q(speed * heading.sin())],
            appearances,
        });
    }

    // Split by instance; frames follow.
    let mut split_rng = rng_for(spec.seed, "synthgen/split");
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for inst in &instances {
        if split_rng.random::<f64>() < spec.val_fraction {
            val.push(inst);
        } else {
            train.push(inst);
        }
    }

    let train_slots = assign_frames(&train, spec, "synthgen/pack/train");
    let val_slots = assign_frames(&val, spec, "synthgen/pack/val");
    let n_train = train_slots.len() as FrameId;

    let render = |(fid, slots): (FrameId, &Vec<&Instance>)| render_frame(fid, slots, spec);
    let train_frames: Vec<SceneFrame> = train_slots
        .par_iter()
        .enumerate()
        .map(|(i, s)| render((i as FrameId, s)))
        .collect();
    let val_frames: Vec<SceneFrame> = val_slots
        .par_iter()
        .enumerate()
        .map(|(i, s)| render((n_train + i as FrameId, s)))
        .collect();

    let mut instance_index: BTreeMap<InstanceId, Vec<FrameId>> = BTreeMap::new();
    for f in train_frames.iter().chain(&val_frames) {
        for &id in &f.instance_ids {
            instance_index.entry(id).or_default().push(f.frame_id);
        }
    }
    Ok(Dataset {
        train_frames,
        val_frames,
        class_table,
        instance_index,
        spec: Some(spec.clone()),
    })
}

/// Scatter every appearance of every instance over frames of roughly
/// `objects_per_frame` objects, never twice in one frame.
fn assign_frames<'a>(instances: &[&'a Instance], spec: &WorldSpec, label: &str) -> Vec<Vec<&'a Instance>> {
    let mut slots: Vec<&Instance> = instances
        .iter()
        .flat_map(|inst| std::iter::repeat_n(*inst, inst.appearances))
        .collect();
    if slots.is_empty() {
        return Vec::new();
    }
    let mut rng = rng_for(spec.seed, label);
    slots.shuffle(&mut rng);
    let most = instances.iter().map(|i| i.appearances).max().unwrap_or(0);
    let n_frames = slots.len().div_ceil(spec.objects_per_frame).max(most);
    let mut frames: Vec<Vec<&Instance>> = vec![Vec::new(); n_frames];
    for (i, inst) in slots.into_iter().enumerate() {
        let start = i % n_frames;
        let target = (0..n_frames)
            .map(|k| (start + k) % n_frames)
            .find(|&f| frames[f].iter().all(|o| o.id != inst.id))
            .expect("appearances never exceed the frame count");
        frames[target].push(inst);
    }
    for f in &mut frames {
        f.sort_by_key(|o| o.id);
    }
    frames
}

fn face_areas(size: [f64; 3]) -> [f64; 5] {
    let [l, w, h] = size;
    [l * w, l * h, l * h, w * h, w * h]
}

pub fn surface_area(size: [f64; 3]) -> f64 {
    face_areas(size).iter().sum()
}

/// Expected point budget at a given planar range.
pub fn point_budget(spec: &WorldSpec, size: [f64; 3], range: f64) -> usize {
    let r = range.max(1.0);
    let n = (spec.density * surface_area(size) / (r * r)).round() as usize;
    n.clamp(1, spec.max_points_per_object)
}

/// Points on the five visible faces of an axis-aligned box centred at the origin.
fn sample_surface(size: [f64; 3], n: usize, rng: &mut impl Rng, jitter: &Normal<f64>) -> Vec<[f64; 3]> {
    let areas = face_areas(size);
    let total: f64 = areas.iter().sum();
    let [hl, hw, hh] = size.map(|s| 0.5 * s);
    (0..n)
        .map(|_| {
            let mut r = rng.random::<f64>() * total;
            let mut face = 4;
            for (i, a) in areas.iter().enumerate() {
                if r < *a {
                    face = i;
                    break;
                }
                r -= a;
            }
            let u = rng.random_range(-1.0..1.0);
            let v = rng.random_range(-1.0..1.0);
            let p = match face {
                0 => [u * hl, v * hw, hh],
                1 => [u * hl, hw, v * hh],
                2 => [u * hl, -hw, v * hh],
                3 => [hl, u * hw, v * hh],
                _ => [-hl, u * hw, v * hh],
            };
            // Jitter, then clamp so every return stays inside its own box.
            let half = [hl, hw, hh];
            let mut out = [0.0; 3];
            for k in 0..3 {
                let h = half[k] - 1e-4;
                out[k] = (p[k] + jitter.sample(rng)).clamp(-h, h);
            }
            out
        })
        .collect()
}

fn render_frame(frame_id: FrameId, objects: &[&Instance], spec: &WorldSpec) -> SceneFrame {
    let mut rng = rng_for(spec.seed, &format!("synthgen/frame/{frame_id}"));
    let jitter = Normal::new(0.0, POINT_JITTER_SIGMA).expect("valid sigma");
    let mut frame = SceneFrame::new(frame_id);
    for inst in objects {
        let margin = 0.5 * inst.size[0].hypot(inst.size[1]);
        let xr = [spec.x_range[0] + margin, spec.x_range[1] - margin];
        let yr = [spec.y_range[0] + margin, spec.y_range[1] - margin];
        let mut placed = None;
        for _ in 0..100 {
            let x = q(uniform(&mut rng, xr));
            let y = q(uniform(&mut rng, yr));
            let yaw = q(rng.random_range(-3.14159..3.14159));
            if x.hypot(y) < spec.min_range {
                continue;
            }
            let Ok(b) = Box3D::new([x, y, q(0.5 * inst.size[2])], inst.size, yaw, inst.velocity, inst.class_id) else {
                continue;
            };
            if frame.boxes.iter().all(|o| !bev_overlap(o, &b)) {
                placed = Some(b);
                break;
            }
        }
        // A crowded frame drops the appearance; the index is rebuilt from contents.
        let Some(b) = placed else { continue };

        let n = point_budget(spec, b.size, b.range());
        let mut local = sample_surface(b.size, n, &mut rng, &jitter);
        if rng.random::<f64>() < spec.occlusion_prob {
            let start = rng.random_range(-PI..PI);
            let width = rng.random_range(PI / 3.0..2.0 * PI / 3.0);
            let keep_first = local[0];
            local.retain(|p| {
                let a = (p[1].atan2(p[0]) - start).rem_euclid(2.0 * PI);
                a > width
            });
            if local.is_empty() {
                local.push(keep_first);
            }
        }
        for p in local {
            let w = b.to_world(p);
            frame.points.push([w[0] as f32, w[1] as f32, w[2] as f32, INTENSITY]);
        }
        frame.push_box(b, inst.id, false);
    }
    for _ in 0..spec.ground_points {
        let x = uniform(&mut rng, spec.x_range);
        let y = uniform(&mut rng, spec.y_range);
        let z = GROUND_Z + 0.3 * jitter.sample(&mut rng);
        frame.points.push([x as f32, y as f32, z as f32, INTENSITY]);
    }
    frame
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::points_in_box;

    fn small_spec(seed: u64) -> WorldSpec {
        WorldSpec {
            num_instances: 400,
            seed,
            ..WorldSpec::default()
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate_dataset(&small_spec(7)).unwrap();
        let b = generate_dataset(&small_spec(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&small_spec(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn valid_split_and_index() {
        let d = generate_dataset(&small_spec(1)).unwrap();
        d.validate().unwrap();
        assert!(!d.train_frames.is_empty() && !d.val_frames.is_empty());
    }

    #[test]
    fn single_frame_shots() {
        let spec = WorldSpec {
            frames_per_instance: [1, 1],
            ..small_spec(3)
        };
        let d = generate_dataset(&spec).unwrap();
        assert!(d.instance_index.values().all(|f| f.len() == 1));
    }

    #[test]
    fn rejects_zero_novel_weight() {
        let mut spec = small_spec(1);
        for c in &mut spec.classes {
            if c.role == ClassRole::Novel {
                c.weight = 0.0;
            }
        }
        assert!(matches!(generate_dataset(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_tiny_extent() {
        let spec = WorldSpec {
            x_range: [-2.0, 2.0],
            ..small_spec(1)
        };
        assert!(generate_dataset(&spec).is_err());
    }

    #[test]
    fn every_object_has_points() {
        let d = generate_dataset(&small_spec(5)).unwrap();
        for f in d.frames() {
            for b in &f.boxes {
                assert!(points_in_box(f, b) >= 1);
            }
        }
    }
}
