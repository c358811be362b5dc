//! Geometry and label primitives shared by every other module.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ClassId = u32;
pub type FrameId = u32;
pub type InstanceId = u32;

/// Wrap an angle into `[-π, π)`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut a = yaw - two_pi * ((yaw + PI) / two_pi).floor();
    // Rounding can land exactly on the open end.
    if a >= PI {
        a -= two_pi;
    }
    if a < -PI {
        a = -PI;
    }
    a
}

/// Oriented 3D box. `yaw` rotates the length axis away from +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    /// length, width, height
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub class_id: ClassId,
    pub score: f64,
}

impl Box3D {
    /// Ground-truth box (score 1). Yaw is normalized.
    pub fn new(
        center: [f64; 3],
        size: [f64; 3],
        yaw: f64,
        velocity: [f64; 2],
        class_id: ClassId,
    ) -> Result<Self> {
        let b = Box3D {
            center,
            size,
            yaw: normalize_yaw(yaw),
            velocity,
            class_id,
            score: 1.0,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.size.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::Contract(format!(
                "box size must be strictly positive, got {:?}",
                self.size
            )));
        }
        if !(-PI..PI).contains(&self.yaw) {
            return Err(Error::Contract(format!("yaw {} outside [-π, π)", self.yaw)));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Contract(format!("score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }

    /// Footprint corners in the ground plane, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = 0.5 * self.size[0];
        let hw = 0.5 * self.size[1];
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[lx, ly]| {
            [
                self.center[0] + c * lx - s * ly,
                self.center[1] + s * lx + c * ly,
            ]
        })
    }

    /// Express a world point in the box frame (length along x, width along y).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    pub fn to_world(&self, l: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.center[0] + c * l[0] - s * l[1],
            self.center[1] + s * l[0] + c * l[1],
            self.center[2] + l[2],
        ]
    }

    /// Boundary-inclusive containment test.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let l = self.to_local(p);
        l[0].abs() <= 0.5 * self.size[0]
            && l[1].abs() <= 0.5 * self.size[1]
            && l[2].abs() <= 0.5 * self.size[2]
    }

    /// Planar range from the sensor origin.
    pub fn range(&self) -> f64 {
        self.center[0].hypot(self.center[1])
    }
}

/// Ground-plane distance between box centers; z is ignored.
pub fn center_distance(a: &Box3D, b: &Box3D) -> f64 {
    (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1])
}

/// Number of frame points inside the (yaw-rotated) box, boundaries included.
pub fn points_in_box(frame: &SceneFrame, b: &Box3D) -> usize {
    frame
        .points
        .iter()
        .filter(|p| b.contains([p[0] as f64, p[1] as f64, p[2] as f64]))
        .count()
}

/// True when the two footprints share interior area (separating-axis test).
/// Footprints that only touch along an edge do not count as overlapping.
pub fn bev_overlap(a: &Box3D, b: &Box3D) -> bool {
    let ca = a.bev_corners();
    let cb = b.bev_corners();
    for poly in [&ca, &cb] {
        for i in 0..4 {
            let p = poly[i];
            let q = poly[(i + 1) % 4];
            let axis = [q[1] - p[1], p[0] - q[0]];
            let project = |pts: &[[f64; 2]; 4]| {
                pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    let d = v[0] * axis[0] + v[1] * axis[1];
                    (lo.min(d), hi.max(d))
                })
            };
            let (amin, amax) = project(&ca);
            let (bmin, bmax) = project(&cb);
            if amax <= bmin || bmax <= amin {
                return false;
            }
        }
    }
    true
}

/// One LiDAR sweep with its labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFrame {
    pub frame_id: FrameId,
    /// x, y, z, intensity
    pub points: Vec<[f32; 4]>,
    pub boxes: Vec<Box3D>,
    /// One per box, stable across frames.
    pub instance_ids: Vec<InstanceId>,
    /// One per box; set for objects pasted by augmentation.
    pub synthetic: Vec<bool>,
}

impl SceneFrame {
    pub fn new(frame_id: FrameId) -> Self {
        SceneFrame {
            frame_id,
            points: Vec::new(),
            boxes: Vec::new(),
            instance_ids: Vec::new(),
            synthetic: Vec::new(),
        }
    }

    pub fn push_box(&mut self, b: Box3D, instance: InstanceId, synthetic: bool) {
        self.boxes.push(b);
        self.instance_ids.push(instance);
        self.synthetic.push(synthetic);
    }

    pub fn validate(&self) -> Result<()> {
        if self.instance_ids.len() != self.boxes.len() || self.synthetic.len() != self.boxes.len()
        {
            return Err(Error::Contract(format!(
                "frame {}: {} boxes but {} instance ids / {} synthetic flags",
                self.frame_id,
                self.boxes.len(),
                self.instance_ids.len(),
                self.synthetic.len()
            )));
        }
        self.boxes.iter().try_for_each(Box3D::validate)
    }

    /// Copy of the frame keeping every point but only the boxes accepted by `keep`.
    pub fn filter_labels(&self, mut keep: impl FnMut(&Box3D, InstanceId) -> bool) -> SceneFrame {
        let mut out = SceneFrame::new(self.frame_id);
        out.points = self.points.clone();
        for i in 0..self.boxes.len() {
            if keep(&self.boxes[i], self.instance_ids[i]) {
                out.push_box(self.boxes[i], self.instance_ids[i], self.synthetic[i]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassRole {
    Base,
    Novel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: ClassId,
    pub name: String,
    pub role: ClassRole,
}

/// Ordered class list; ids are dense `0..len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ClassInfo>", into = "Vec<ClassInfo>")]
pub struct ClassTable {
    classes: Vec<ClassInfo>,
}

impl ClassTable {
    pub fn new(entries: impl IntoIterator<Item = (impl Into<String>, ClassRole)>) -> Result<Self> {
        let classes: Vec<ClassInfo> = entries
            .into_iter()
            .enumerate()
            .map(|(i, (name, role))| ClassInfo {
                id: i as ClassId,
                name: name.into(),
                role,
            })
            .collect();
        Self::try_from(classes)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn get(&self, id: ClassId) -> Option<&ClassInfo> {
        self.classes.get(id as usize)
    }

    pub fn name(&self, id: ClassId) -> &str {
        self.classes.get(id as usize).map_or("?", |c| c.name.as_str())
    }

    pub fn role(&self, id: ClassId) -> Option<ClassRole> {
        self.get(id).map(|c| c.role)
    }

    pub fn by_name(&self, name: &str) -> Option<&ClassInfo> {
        self.classes.iter().find(|c| c.name == name)
    }

    pub fn ids_with_role(&self, role: ClassRole) -> Vec<ClassId> {
        self.classes
            .iter()
            .filter(|c| c.role == role)
            .map(|c| c.id)
            .collect()
    }

    pub fn base_ids(&self) -> Vec<ClassId> {
        self.ids_with_role(ClassRole::Base)
    }

    pub fn novel_ids(&self) -> Vec<ClassId> {
        self.ids_with_role(ClassRole::Novel)
    }
}

impl TryFrom<Vec<ClassInfo>> for ClassTable {
    type Error = Error;

    fn try_from(classes: Vec<ClassInfo>) -> Result<Self> {
        let mut seen = BTreeMap::new();
        for (i, c) in classes.iter().enumerate() {
            if c.id as usize != i {
                return Err(Error::Config(format!(
                    "class ids must be dense 0..N, found id {} at position {i}",
                    c.id
                )));
            }
            // A name maps to one role only, so base and novel stay disjoint.
            if seen.insert(c.name.clone(), c.role).is_some() {
                return Err(Error::Config(format!("class `{}` listed twice", c.name)));
            }
        }
        Ok(ClassTable { classes })
    }
}

impl From<ClassTable> for Vec<ClassInfo> {
    fn from(t: ClassTable) -> Self {
        t.classes
    }
}
