//! On-disk dataset layout.
//!
//! ```text
//! <dir>/meta.json            class table, instance index, split membership, spec echo
//! <dir>/frames/<id>.bin      "LFSL" | u32 version | u32 n_points | u32 n_boxes
//!                            | n_points × 4 f32 | n_boxes × (13 f32 + 2 u32)
//! ```
//!
//! All integers and floats are little-endian. Box records hold center (3),
//! size (3), yaw, velocity (2) and four reserved floats, followed by the class
//! id and instance id. Reserved slot 0 carries the synthetic flag.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, WorldSpec};
use crate::error::{Error, Result};
use crate::geometry::{Box3D, ClassTable, FrameId, InstanceId, SceneFrame};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"LFSL";
const BOX_RECORD_BYTES: usize = 13 * 4 + 2 * 4;

#[derive(Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    class_table: ClassTable,
    instance_index: BTreeMap<InstanceId, Vec<FrameId>>,
    train_frames: Vec<FrameId>,
    val_frames: Vec<FrameId>,
    spec: Option<WorldSpec>,
}

pub fn write_frame(frame: &SceneFrame) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + frame.points.len() * 16 + frame.boxes.len() * BOX_RECORD_BYTES);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(frame.points.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(frame.boxes.len() as u32).to_le_bytes());
    for p in &frame.points {
        for v in p {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for ((b, id), synthetic) in frame.boxes.iter().zip(&frame.instance_ids).zip(&frame.synthetic) {
        let floats = [
            b.center[0],
            b.center[1],
            b.center[2],
            b.size[0],
            b.size[1],
            b.size[2],
            b.yaw,
            b.velocity[0],
            b.velocity[1],
            if *synthetic { 1.0 } else { 0.0 },
            0.0,
            0.0,
            0.0,
        ];
        for v in floats {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        buf.extend_from_slice(&b.class_id.to_le_bytes());
        buf.extend_from_slice(&id.to_le_bytes());
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Format("truncated frame record".into()))?;
        self.pos = end;
        Ok(slice.try_into().expect("slice length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }

    fn f32(&mut self) -> Result<f32> {
        self.take::<4>().map(f32::from_le_bytes)
    }
}

pub fn read_frame(frame_id: FrameId, bytes: &[u8]) -> Result<SceneFrame> {
    let mut cur = Cursor { bytes, pos: 0 };
    if &cur.take::<4>()? != MAGIC {
        return Err(Error::Format(format!("frame {frame_id}: bad magic")));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("frame {frame_id}: unsupported version {version}")));
    }
    let n_points = cur.u32()? as usize;
    let n_boxes = cur.u32()? as usize;
    let expected = 16 + n_points * 16 + n_boxes * BOX_RECORD_BYTES;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "frame {frame_id}: expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let mut frame = SceneFrame::new(frame_id);
    frame.points.reserve(n_points);
    for _ in 0..n_points {
        frame.points.push([cur.f32()?, cur.f32()?, cur.f32()?, cur.f32()?]);
    }
    for _ in 0..n_boxes {
        let mut f = [0.0f64; 13];
        for v in &mut f {
            *v = cur.f32()? as f64;
        }
        let class_id = cur.u32()?;
        let instance = cur.u32()?;
        let b = Box3D {
            center: [f[0], f[1], f[2]],
            size: [f[3], f[4], f[5]],
            yaw: f[6],
            velocity: [f[7], f[8]],
            class_id,
            score: 1.0,
        };
        b.validate()?;
        frame.push_box(b, instance, f[9] != 0.0);
    }
    Ok(frame)
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir)?;
    let meta = Meta {
        format_version: FORMAT_VERSION,
        class_table: dataset.class_table.clone(),
        instance_index: dataset.instance_index.clone(),
        train_frames: dataset.train_frames.iter().map(|f| f.frame_id).collect(),
        val_frames: dataset.val_frames.iter().map(|f| f.frame_id).collect(),
        spec: dataset.spec.clone(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    for f in dataset.frames() {
        fs::write(frames_dir.join(format!("{}.bin", f.frame_id)), write_frame(f))?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::load(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::load(&meta_path, e))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::load(
            &meta_path,
            format!("unsupported format version {}", meta.format_version),
        ));
    }
    let load = |ids: &[FrameId]| -> Result<Vec<SceneFrame>> {
        ids.iter()
            .map(|&id| {
                let path = dir.join("frames").join(format!("{id}.bin"));
                let bytes = fs::read(&path).map_err(|e| Error::load(&path, e))?;
                read_frame(id, &bytes)
            })
            .collect()
    };
    let dataset = Dataset {
        train_frames: load(&meta.train_frames)?,
        val_frames: load(&meta.val_frames)?,
        class_table: meta.class_table,
        instance_index: meta.instance_index,
        spec: meta.spec,
    };
    dataset.validate()?;
    Ok(dataset)
}
