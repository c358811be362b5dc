//! Deterministic nuScenes-schema fixture with per-class instance counts
//! following the nuScenes instance statistics.
//!
//! Classes with at most 2000 instances keep their exact train / val counts;
//! larger classes are scaled down by 100 (rounded) to keep the tables small.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde_json::{json, Value};

use crate::error::Result;
use crate::seed::rng_for;

/// (name, train, val) before scaling.
pub const TABLE1: [(&str, usize, usize); 23] = [
    ("adult", 8870, 1820),
    ("child", 122, 19),
    ("police_officer", 31, 3),
    ("construction_worker", 457, 85),
    ("car", 23158, 4543),
    ("motorcycle", 607, 141),
    ("bicycle", 574, 161),
    ("bus.bendy", 66, 19),
    ("bus.rigid", 459, 113),
    ("truck", 3497, 718),
    ("construction", 529, 119),
    ("trailer", 919, 195),
    ("barrier", 6848, 1567),
    ("trafficcone", 5381, 1210),
    ("ambulance", 1, 1),
    ("wheelchair", 18, 0),
    ("personal_mobility", 20, 4),
    ("animal", 49, 3),
    ("debris", 124, 40),
    ("police", 24, 2),
    ("stroller", 55, 8),
    ("bicycle_rack", 108, 14),
    ("pushable_pullable", 1473, 211),
];

pub const NOVEL_CLASSES: [&str; 4] = ["police", "stroller", "bicycle_rack", "pushable_pullable"];
pub const MAX_ANNOTATIONS: usize = 7;
const SCALE_ABOVE: usize = 2000;
const SAMPLES_PER_SCENE: usize = 40;
const TRAIN_SCENES: usize = 24;
const VAL_SCENES: usize = 6;

/// Instance counts the fixture is built with: (name, train, val).
pub fn expected_counts() -> Vec<(&'static str, usize, usize)> {
    TABLE1
        .iter()
        .map(|&(name, train, val)| {
            if train + val > SCALE_ABOVE {
                (name, (train as f64 / 100.0).round() as usize, (val as f64 / 100.0).round() as usize)
            } else {
                (name, train, val)
            }
        })
        .collect()
}

fn write_json(dir: &Path, name: &str, value: &Value) -> Result<()> {
    fs::write(dir.join(name), serde_json::to_string(value)?)?;
    Ok(())
}

pub fn write_table1_fixture(dir: &Path, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut rng = rng_for(seed, "fixture/table1");

    let visibility = json!([
        {"token": "1", "level": "v0-40", "description": "visibility of whole object is between 0 and 40%"},
        {"token": "2", "level": "v40-60", "description": "visibility of whole object is between 40 and 60%"},
        {"token": "3", "level": "v60-80", "description": "visibility of whole object is between 60 and 80%"},
        {"token": "4", "level": "v80-100", "description": "visibility of whole object is between 80 and 100%"},
    ]);

    let mut scenes = Vec::new();
    let mut samples = Vec::new();
    let (mut train_names, mut val_names) = (Vec::new(), Vec::new());
    for s in 0..TRAIN_SCENES + VAL_SCENES {
        let token = format!("scene-{s:04}");
        let name = format!("scene-{:04}", s + 1);
        if s < TRAIN_SCENES {
            train_names.push(name.clone());
        } else {
            val_names.push(name.clone());
        }
        scenes.push(json!({
            "token": token,
            "name": name,
            "nbr_samples": SAMPLES_PER_SCENE,
            "first_sample_token": format!("sample-{s:04}-{:03}", 0),
            "last_sample_token": format!("sample-{s:04}-{:03}", SAMPLES_PER_SCENE - 1),
        }));
        for i in 0..SAMPLES_PER_SCENE {
            let prev = if i == 0 { String::new() } else { format!("sample-{s:04}-{:03}", i - 1) };
            let next = if i + 1 == SAMPLES_PER_SCENE { String::new() } else { format!("sample-{s:04}-{:03}", i + 1) };
            samples.push(json!({
                "token": format!("sample-{s:04}-{i:03}"),
                "timestamp": 1_532_402_927_000_000i64 + (s * 100_000_000 + i * 500_000) as i64,
                "scene_token": token,
                "prev": prev,
                "next": next,
            }));
        }
    }

    let mut categories = Vec::new();
    let mut instances = Vec::new();
    let mut annotations = Vec::new();
    let mut inst_no = 0usize;
    for (c, (name, train, val)) in expected_counts().into_iter().enumerate() {
        let cat_token = format!("cat-{c:02}");
        categories.push(json!({"token": cat_token, "name": name, "description": ""}));
        for k in 0..train + val {
            let is_val = k >= train;
            let scene = if is_val {
                TRAIN_SCENES + rng.random_range(0..VAL_SCENES)
            } else {
                rng.random_range(0..TRAIN_SCENES)
            };
            let n_ann = match k {
                0 => MAX_ANNOTATIONS,
                1 => 1,
                _ => (1 + (-rng.random::<f64>().ln() * 1.5) as usize).min(MAX_ANNOTATIONS),
            };
            let start = rng.random_range(0..=SAMPLES_PER_SCENE - n_ann);
            let inst_token = format!("inst-{inst_no:05}");
            inst_no += 1;
            let base = annotations.len();
            let ann_tokens: Vec<String> = (0..n_ann).map(|j| format!("ann-{:06}", base + j)).collect();
            for (j, tok) in ann_tokens.iter().enumerate() {
                let pts: u32 = if rng.random::<f64>() < 0.2 {
                    rng.random_range(0..5)
                } else {
                    rng.random_range(5..400)
                };
                annotations.push(json!({
                    "token": tok,
                    "sample_token": format!("sample-{scene:04}-{:03}", start + j),
                    "instance_token": inst_token,
                    "visibility_token": rng.random_range(1..=4u8).to_string(),
                    "attribute_tokens": [],
                    "translation": [0.0, 0.0, 0.0],
                    "size": [1.0, 1.0, 1.0],
                    "rotation": [1.0, 0.0, 0.0, 0.0],
                    "prev": if j == 0 { String::new() } else { ann_tokens[j - 1].clone() },
                    "next": ann_tokens.get(j + 1).cloned().unwrap_or_default(),
                    "num_lidar_pts": pts,
                    "num_radar_pts": 0,
                }));
            }
            instances.push(json!({
                "token": inst_token,
                "category_token": cat_token,
                "nbr_annotations": n_ann,
                "first_annotation_token": ann_tokens[0],
                "last_annotation_token": ann_tokens[n_ann - 1],
            }));
        }
    }

    write_json(dir, "visibility.json", &visibility)?;
    write_json(dir, "scene.json", &Value::Array(scenes))?;
    write_json(dir, "sample.json", &Value::Array(samples))?;
    write_json(dir, "category.json", &Value::Array(categories))?;
    write_json(dir, "instance.json", &Value::Array(instances))?;
    write_json(dir, "sample_annotation.json", &Value::Array(annotations))?;
    write_json(dir, super::SPLITS_FILE, &json!({"train": train_names, "val": val_names}))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{class_statistics, load_annotation_tables};

    #[test]
    fn fixture_reproduces_its_counts() {
        let dir = tempfile::tempdir().unwrap();
        write_table1_fixture(dir.path(), 0).unwrap();
        let db = load_annotation_tables(dir.path()).unwrap();
        let stats = class_statistics(&db);
        for (name, train, val) in expected_counts() {
            let row = stats.row(name).unwrap();
            assert_eq!((row.train, row.val, row.total), (train, val, train + val), "{name}");
        }
        let stroller = stats.row("stroller").unwrap();
        assert_eq!((stroller.train, stroller.val, stroller.total), (55, 8, 63));
        let police = stats.row("police").unwrap();
        assert_eq!((police.train, police.val), (24, 2));
    }
}
