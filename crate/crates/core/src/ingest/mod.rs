//! nuScenes-schema metadata, class statistics, shots and N-way K-shot episodes.
//!
//! A shot is every frame of one object instance. An episode picks exactly K
//! instance-shots per novel class from the train split; base labels are left
//! unrestricted.

pub mod fixture;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{points_in_box, ClassId};
use crate::seed::rng_for;
use crate::synthgen::Dataset;

/// Minimum LiDAR returns for an object to count as a usable label.
pub const MIN_POINTS: usize = 5;
/// Train instances kept back per class when supplementing validation.
pub const TRAIN_RESERVE: usize = 10;

pub const REQUIRED_TABLES: [&str; 6] = [
    "category.json",
    "instance.json",
    "sample_annotation.json",
    "sample.json",
    "scene.json",
    "visibility.json",
];
pub const SPLITS_FILE: &str = "splits.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Category {
    pub token: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub token: String,
    pub instance_token: String,
    pub sample_token: String,
    /// Visibility band 1..=4 (0-40%, 41-60%, 61-80%, 81-100%).
    pub visibility: u8,
    pub num_lidar_pts: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub token: String,
    pub scene_token: String,
    pub timestamp: i64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationDB {
    /// File order; the position is the class id.
    pub categories: Vec<Category>,
    /// instance token → class id
    pub instances: BTreeMap<String, ClassId>,
    pub annotations: Vec<Annotation>,
    pub samples: BTreeMap<String, Sample>,
    /// instance token → split. Starts as the split of its samples; rebalancing moves entries.
    pub instance_split: BTreeMap<String, Split>,
    /// instance token → positions in `annotations`
    pub by_instance: BTreeMap<String, Vec<usize>>,
}

#[derive(Deserialize)]
struct RawCategory {
    token: String,
    name: String,
}

#[derive(Deserialize)]
struct RawInstance {
    token: String,
    category_token: String,
}

#[derive(Deserialize)]
struct RawAnnotation {
    token: String,
    instance_token: String,
    sample_token: String,
    visibility_token: String,
    num_lidar_pts: u32,
}

#[derive(Deserialize)]
struct RawSample {
    token: String,
    timestamp: i64,
    scene_token: String,
}

#[derive(Deserialize)]
struct RawScene {
    token: String,
    name: String,
}

#[derive(Deserialize)]
struct RawVisibility {
    token: String,
    #[serde(default)]
    level: String,
}

#[derive(Deserialize)]
struct RawSplits {
    train: Vec<String>,
    val: Vec<String>,
}

fn read_table<T: DeserializeOwned>(root: &Path, name: &str) -> Result<T> {
    let path = root.join(name);
    let text = fs::read_to_string(&path).map_err(|e| Error::load(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::load(&path, e))
}

fn visibility_band(v: &RawVisibility) -> Option<u8> {
    match v.level.as_str() {
        "v0-40" => Some(1),
        "v40-60" => Some(2),
        "v60-80" => Some(3),
        "v80-100" => Some(4),
        _ => v.token.parse().ok().filter(|b| (1..=4).contains(b)),
    }
}

/// Load and cross-link the metadata tables under `root`.
///
/// Besides the six nuScenes tables, `splits.json` (`{"train": [scene names],
/// "val": [...]}`) assigns scenes to splits, mirroring the devkit's split lists.
pub fn load_annotation_tables(root: &Path) -> Result<AnnotationDB> {
    for name in REQUIRED_TABLES.iter().chain([&SPLITS_FILE]) {
        let path = root.join(name);
        if !path.is_file() {
            return Err(Error::load(path, "file not found"));
        }
    }
    let raw_categories: Vec<RawCategory> = read_table(root, "category.json")?;
    let raw_instances: Vec<RawInstance> = read_table(root, "instance.json")?;
    let raw_annotations: Vec<RawAnnotation> = read_table(root, "sample_annotation.json")?;
    let raw_samples: Vec<RawSample> = read_table(root, "sample.json")?;
    let raw_scenes: Vec<RawScene> = read_table(root, "scene.json")?;
    let raw_visibility: Vec<RawVisibility> = read_table(root, "visibility.json")?;
    let splits: RawSplits = read_table(root, SPLITS_FILE)?;

    let mut split_of_scene_name = BTreeMap::new();
    for (split, names) in [(Split::Train, &splits.train), (Split::Val, &splits.val)] {
        for n in names {
            split_of_scene_name.insert(n.clone(), split);
        }
    }
    let mut scene_split = BTreeMap::new();
    for s in &raw_scenes {
        let split = *split_of_scene_name
            .get(&s.name)
            .ok_or_else(|| Error::Integrity(format!("scene `{}` ({}) is in no split", s.name, s.token)))?;
        scene_split.insert(s.token.clone(), split);
    }

    let categories: Vec<Category> = raw_categories
        .into_iter()
        .map(|c| Category {
            token: c.token,
            name: c.name,
        })
        .collect();
    let category_index: BTreeMap<&str, ClassId> = categories
        .iter()
        .enumerate()
        .map(|(i, c)| (c.token.as_str(), i as ClassId))
        .collect();

    let mut instances = BTreeMap::new();
    for inst in raw_instances {
        let class = *category_index.get(inst.category_token.as_str()).ok_or_else(|| {
            Error::Integrity(format!(
                "instance `{}` references unknown category token `{}`",
                inst.token, inst.category_token
            ))
        })?;
        instances.insert(inst.token, class);
    }

    let mut samples = BTreeMap::new();
    for s in raw_samples {
        let split = *scene_split.get(&s.scene_token).ok_or_else(|| {
            Error::Integrity(format!(
                "sample `{}` references unknown scene token `{}`",
                s.token, s.scene_token
            ))
        })?;
        samples.insert(
            s.token.clone(),
            Sample {
                token: s.token,
                scene_token: s.scene_token,
                timestamp: s.timestamp,
                split,
            },
        );
    }

    let mut bands = BTreeMap::new();
    for v in &raw_visibility {
        let band = visibility_band(v)
            .ok_or_else(|| Error::Integrity(format!("visibility record `{}` has unknown level", v.token)))?;
        bands.insert(v.token.clone(), band);
    }

    let mut annotations = Vec::with_capacity(raw_annotations.len());
    let mut instance_split: BTreeMap<String, Split> = BTreeMap::new();
    for a in raw_annotations {
        if !instances.contains_key(&a.instance_token) {
            return Err(Error::Integrity(format!(
                "annotation `{}` references unknown instance token `{}`",
                a.token, a.instance_token
            )));
        }
        let sample = samples.get(&a.sample_token).ok_or_else(|| {
            Error::Integrity(format!(
                "annotation `{}` references unknown sample token `{}`",
                a.token, a.sample_token
            ))
        })?;
        let visibility = *bands.get(&a.visibility_token).ok_or_else(|| {
            Error::Integrity(format!(
                "annotation `{}` references unknown visibility token `{}`",
                a.token, a.visibility_token
            ))
        })?;
        match instance_split.get(&a.instance_token) {
            Some(&s) if s != sample.split => {
                return Err(Error::Integrity(format!(
                    "instance `{}` has annotations in both train and val",
                    a.instance_token
                )))
            }
            Some(_) => {}
            None => {
                instance_split.insert(a.instance_token.clone(), sample.split);
            }
        }
        annotations.push(Annotation {
            token: a.token,
            instance_token: a.instance_token,
            sample_token: a.sample_token,
            visibility,
            num_lidar_pts: a.num_lidar_pts,
        });
    }
    if let Some(orphan) = instances.keys().find(|t| !instance_split.contains_key(*t)) {
        return Err(Error::Integrity(format!("instance `{orphan}` has no annotations")));
    }

    let mut by_instance: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, a) in annotations.iter().enumerate() {
        by_instance.entry(a.instance_token.clone()).or_default().push(i);
    }
    Ok(AnnotationDB {
        categories,
        instances,
        annotations,
        samples,
        instance_split,
        by_instance,
    })
}

impl AnnotationDB {
    pub fn class_id(&self, name: &str) -> Option<ClassId> {
        self.categories.iter().position(|c| c.name == name).map(|i| i as ClassId)
    }

    pub fn class_name(&self, id: ClassId) -> Option<&str> {
        self.categories.get(id as usize).map(|c| c.name.as_str())
    }

    pub fn annotations_of<'a>(&'a self, instance: &str) -> impl Iterator<Item = &'a Annotation> + 'a {
        self.by_instance
            .get(instance)
            .map(Vec::as_slice)
            .unwrap_or_default()
            .iter()
            .map(|&i| &self.annotations[i])
    }

    /// Mean visibility band over the instance's annotations.
    pub fn mean_visibility(&self, instance: &str) -> f64 {
        let (sum, n) = self
            .annotations_of(instance)
            .fold((0.0, 0usize), |(s, n), a| (s + a.visibility as f64, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Instances of one class in one split, token order.
    pub fn instances_in(&self, class: ClassId, split: Split) -> Vec<&str> {
        self.instances
            .iter()
            .filter(|(tok, &c)| c == class && self.instance_split.get(*tok) == Some(&split))
            .map(|(tok, _)| tok.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRow {
    pub class: String,
    pub train: usize,
    pub val: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountTable {
    pub rows: Vec<CountRow>,
}

impl CountTable {
    pub fn row(&self, class: &str) -> Option<&CountRow> {
        self.rows.iter().find(|r| r.class == class)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,train,val,total\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.class, r.train, r.val, r.total);
        }
        out
    }
}

/// Unique-instance counts per class and split.
pub fn class_statistics(db: &AnnotationDB) -> CountTable {
    let mut counts = vec![(0usize, 0usize); db.categories.len()];
    for (token, &class) in &db.instances {
        match db.instance_split.get(token) {
            Some(Split::Train) => counts[class as usize].0 += 1,
            Some(Split::Val) => counts[class as usize].1 += 1,
            None => {}
        }
    }
    CountTable {
        rows: db
            .categories
            .iter()
            .zip(counts)
            .map(|(c, (train, val))| CountRow {
                class: c.name.clone(),
                train,
                val,
                total: train + val,
            })
            .collect(),
    }
}

/// All frames of one instance, in acquisition order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shot {
    pub instance_id: String,
    pub class_id: ClassId,
    pub frame_refs: Vec<String>,
}

impl Shot {
    pub fn num_frames(&self) -> usize {
        self.frame_refs.len()
    }
}

pub fn build_shot(db: &AnnotationDB, instance_id: &str) -> Result<Shot> {
    let class_id = *db
        .instances
        .get(instance_id)
        .ok_or_else(|| Error::Lookup(format!("unknown instance `{instance_id}`")))?;
    let mut frames: Vec<(i64, &str)> = db
        .annotations_of(instance_id)
        .map(|a| (db.samples[&a.sample_token].timestamp, a.sample_token.as_str()))
        .collect();
    frames.sort_unstable();
    frames.dedup();
    Ok(Shot {
        instance_id: instance_id.to_string(),
        class_id,
        frame_refs: frames.into_iter().map(|(_, s)| s.to_string()).collect(),
    })
}

/// Anything episodes can be drawn from.
pub trait ShotSource {
    fn class_name(&self, class: ClassId) -> Option<String>;
    /// Train-split instances of `class` with their eligibility, in a stable order.
    fn train_candidates(&self, class: ClassId) -> Vec<(String, bool)>;
    fn shot(&self, instance_id: &str) -> Result<Shot>;
}

impl ShotSource for AnnotationDB {
    fn class_name(&self, class: ClassId) -> Option<String> {
        AnnotationDB::class_name(self, class).map(str::to_string)
    }

    fn train_candidates(&self, class: ClassId) -> Vec<(String, bool)> {
        self.instances_in(class, Split::Train)
            .into_iter()
            .map(|tok| {
                let eligible = self
                    .annotations_of(tok)
                    .any(|a| a.num_lidar_pts as usize >= MIN_POINTS);
                (tok.to_string(), eligible)
            })
            .collect()
    }

    fn shot(&self, instance_id: &str) -> Result<Shot> {
        build_shot(self, instance_id)
    }
}

impl ShotSource for Dataset {
    fn class_name(&self, class: ClassId) -> Option<String> {
        self.class_table.get(class).map(|c| c.name.clone())
    }

    fn train_candidates(&self, class: ClassId) -> Vec<(String, bool)> {
        let mut eligible: BTreeMap<u32, bool> = BTreeMap::new();
        for f in &self.train_frames {
            for (b, &id) in f.boxes.iter().zip(&f.instance_ids) {
                if b.class_id == class {
                    let e = eligible.entry(id).or_insert(false);
                    *e = *e || points_in_box(f, b) >= MIN_POINTS;
                }
            }
        }
        eligible.into_iter().map(|(id, e)| (id.to_string(), e)).collect()
    }

    fn shot(&self, instance_id: &str) -> Result<Shot> {
        let id: u32 = instance_id
            .parse()
            .map_err(|_| Error::Lookup(format!("unknown instance `{instance_id}`")))?;
        let frames = self
            .instance_index
            .get(&id)
            .ok_or_else(|| Error::Lookup(format!("unknown instance `{instance_id}`")))?;
        let class_id = self
            .instance_classes()
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("instance `{instance_id}` has no boxes")))?;
        Ok(Shot {
            instance_id: instance_id.to_string(),
            class_id,
            frame_refs: frames.iter().map(|f| f.to_string()).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasePolicy {
    /// Every base label in a selected frame is kept.
    Unrestricted,
}

/// N-way K-shot selection. Serialized as the episode manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub k: usize,
    pub seed: u64,
    pub novel_classes: Vec<ClassId>,
    pub base_policy: BasePolicy,
    /// class name → its K shots
    pub shots: BTreeMap<String, Vec<Shot>>,
}

impl EpisodeSpec {
    pub fn selected_instances(&self) -> BTreeSet<String> {
        self.shots
            .values()
            .flatten()
            .map(|s| s.instance_id.clone())
            .collect()
    }

    pub fn frame_refs(&self) -> BTreeSet<String> {
        self.shots
            .values()
            .flatten()
            .flat_map(|s| s.frame_refs.iter().cloned())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: EpisodeSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (class, shots) in &self.shots {
            if shots.len() != self.k {
                return Err(Error::Contract(format!(
                    "class `{class}` has {} shots, expected {}",
                    shots.len(),
                    self.k
                )));
            }
            let distinct: BTreeSet<_> = shots.iter().map(|s| &s.instance_id).collect();
            if distinct.len() != shots.len() {
                return Err(Error::Contract(format!("class `{class}` repeats an instance")));
            }
            if shots.iter().any(|s| s.frame_refs.is_empty()) {
                return Err(Error::Contract(format!("class `{class}` has an empty shot")));
            }
        }
        if self.shots.len() != self.novel_classes.len() {
            return Err(Error::Contract("shot map does not cover the novel classes".into()));
        }
        Ok(())
    }
}

/// Pick `k` distinct eligible train instances per novel class, uniformly at random.
pub fn build_episode(
    source: &impl ShotSource,
    novel_classes: &[ClassId],
    k: usize,
    seed: u64,
) -> Result<EpisodeSpec> {
    let mut shots = BTreeMap::new();
    for &class in novel_classes {
        let name = source
            .class_name(class)
            .ok_or_else(|| Error::Lookup(format!("unknown class id {class}")))?;
        let mut pool: Vec<String> = source
            .train_candidates(class)
            .into_iter()
            .filter_map(|(id, eligible)| eligible.then_some(id))
            .collect();
        if pool.len() < k {
            return Err(Error::Capacity {
                class: name,
                needed: k,
                available: pool.len(),
            });
        }
        // Partial Fisher-Yates: the first k slots become a uniform k-subset.
        let mut rng = rng_for(seed, &format!("episode/{class}"));
        for i in 0..k {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        let selected = pool[..k]
            .iter()
            .map(|id| source.shot(id))
            .collect::<Result<Vec<_>>>()?;
        if shots.insert(name.clone(), selected).is_some() {
            return Err(Error::Config(format!("class `{name}` listed twice")));
        }
    }
    let spec = EpisodeSpec {
        k,
        seed,
        novel_classes: novel_classes.to_vec(),
        base_policy: BasePolicy::Unrestricted,
        shots,
    };
    spec.validate()?;
    Ok(spec)
}

/// Move whole train instances into val until every class in `targets`
/// (class name → minimum val instances) is satisfied.
///
/// Candidates are drawn without replacement with probability proportional to
/// their mean visibility band. Instances in `protected` never move and at
/// least [`TRAIN_RESERVE`] train instances remain per class.
pub fn rebalance_validation(
    db: &AnnotationDB,
    targets: &BTreeMap<String, usize>,
    seed: u64,
    protected: &BTreeSet<String>,
) -> Result<AnnotationDB> {
    let mut out = db.clone();
    for (name, &target) in targets {
        let class = db
            .class_id(name)
            .ok_or_else(|| Error::Lookup(format!("unknown class `{name}`")))?;
        let val = db.instances_in(class, Split::Val).len();
        if val >= target {
            continue;
        }
        let need = target - val;
        let train = db.instances_in(class, Split::Train);
        if train.len() < need + TRAIN_RESERVE {
            return Err(Error::Capacity {
                class: name.clone(),
                needed: need + TRAIN_RESERVE,
                available: train.len(),
            });
        }
        let mut pool: Vec<(&str, f64)> = train
            .into_iter()
            .filter(|t| !protected.contains(*t))
            .map(|t| (t, db.mean_visibility(t)))
            .collect();
        if pool.len() < need {
            return Err(Error::Capacity {
                class: name.clone(),
                needed: need,
                available: pool.len(),
            });
        }
        let mut rng = rng_for(seed, &format!("rebalance/{name}"));
        // Sequential draws without replacement, weight ∝ visibility band.
        for _ in 0..need {
            let total: f64 = pool.iter().map(|(_, w)| w).sum();
            let mut r = rng.random::<f64>() * total;
            let mut pick = pool.len() - 1;
            for (i, (_, w)) in pool.iter().enumerate() {
                if r < *w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            let (token, _) = pool.remove(pick);
            out.instance_split.insert(token.to_string(), Split::Val);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_db() -> (tempfile::TempDir, AnnotationDB) {
        let dir = tempfile::tempdir().unwrap();
        fixture::write_table1_fixture(dir.path(), 1).unwrap();
        let db = load_annotation_tables(dir.path()).unwrap();
        (dir, db)
    }

    #[test]
    fn shots_follow_time_order() {
        let (_d, db) = fixture_db();
        for inst in db.instances.keys().take(200) {
            let shot = build_shot(&db, inst).unwrap();
            // independent filter oracle
            let mut oracle: Vec<(i64, String)> = db
                .annotations
                .iter()
                .filter(|a| &a.instance_token == inst)
                .map(|a| (db.samples[&a.sample_token].timestamp, a.sample_token.clone()))
                .collect();
            oracle.sort();
            let oracle: Vec<String> = oracle.into_iter().map(|(_, s)| s).collect();
            assert_eq!(shot.frame_refs, oracle);
            assert!(!shot.frame_refs.is_empty());
        }
        assert!(matches!(build_shot(&db, "nope"), Err(Error::Lookup(_))));
    }

    #[test]
    fn shot_counts_frames() {
        let (_d, db) = fixture_db();
        let mut per_instance: BTreeMap<&str, usize> = BTreeMap::new();
        for a in &db.annotations {
            *per_instance.entry(&a.instance_token).or_default() += 1;
        }
        let (seven, one) = (
            per_instance.iter().find(|(_, &n)| n == fixture::MAX_ANNOTATIONS),
            per_instance.iter().find(|(_, &n)| n == 1),
        );
        let (tok, n) = seven.unwrap();
        assert_eq!(build_shot(&db, tok).unwrap().num_frames(), *n);
        assert_eq!(build_shot(&db, one.unwrap().0).unwrap().num_frames(), 1);
    }

    #[test]
    fn statistics_match_brute_force_scan() {
        let (_d, db) = fixture_db();
        let table = class_statistics(&db);
        for (class, cat) in db.categories.iter().enumerate() {
            let mut train = BTreeSet::new();
            let mut val = BTreeSet::new();
            for a in &db.annotations {
                if db.instances[&a.instance_token] == class as ClassId {
                    match db.samples[&a.sample_token].split {
                        Split::Train => train.insert(&a.instance_token),
                        Split::Val => val.insert(&a.instance_token),
                    };
                }
            }
            let row = table.row(&cat.name).unwrap();
            assert_eq!((row.train, row.val, row.total), (train.len(), val.len(), train.len() + val.len()));
        }
    }

    #[test]
    fn empty_class_row() {
        let (dir, _) = fixture_db();
        let path = dir.path().join("category.json");
        let mut cats: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        cats.push(serde_json::json!({"token": "cat-unused", "name": "unicycle", "description": ""}));
        fs::write(&path, serde_json::to_string(&cats).unwrap()).unwrap();
        let db = load_annotation_tables(dir.path()).unwrap();
        let row = class_statistics(&db).row("unicycle").cloned().unwrap();
        assert_eq!((row.train, row.val, row.total), (0, 0, 0));
    }

    #[test]
    fn csv_layout() {
        let t = CountTable {
            rows: vec![CountRow {
                class: "stroller".into(),
                train: 55,
                val: 8,
                total: 63,
            }],
        };
        assert_eq!(t.to_csv(), "class,train,val,total\nstroller,55,8,63\n");
    }

    #[test]
    fn missing_file_is_named() {
        let (dir, _) = fixture_db();
        fs::remove_file(dir.path().join("visibility.json")).unwrap();
        let err = load_annotation_tables(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Load { .. }));
        assert!(err.to_string().contains("visibility.json"));
    }

    #[test]
    fn dangling_instance_token_is_named() {
        let (dir, _) = fixture_db();
        let path = dir.path().join("sample_annotation.json");
        let mut anns: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        anns[0]["instance_token"] = serde_json::json!("ghost-instance");
        fs::write(&path, serde_json::to_string(&anns).unwrap()).unwrap();
        let err = load_annotation_tables(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
        assert!(err.to_string().contains("ghost-instance"));
    }

    #[test]
    fn instances_without_annotations_rejected() {
        let (dir, _) = fixture_db();
        fs::write(dir.path().join("sample_annotation.json"), "[]").unwrap();
        assert!(matches!(load_annotation_tables(dir.path()), Err(Error::Integrity(_))));
    }

    #[test]
    fn episode_rules() {
        let (_d, db) = fixture_db();
        let novel: Vec<ClassId> = fixture::NOVEL_CLASSES.iter().map(|n| db.class_id(n).unwrap()).collect();
        let ep = build_episode(&db, &novel, 10, 3).unwrap();
        assert_eq!(ep.shots.len(), 4);
        assert_eq!(ep.selected_instances().len(), 40);
        for shots in ep.shots.values() {
            assert_eq!(shots.len(), 10);
            for s in shots {
                assert_eq!(db.instance_split[&s.instance_id], Split::Train);
                assert!(s.frame_refs.iter().all(|f| db.samples[f].split == Split::Train));
            }
        }
        assert_eq!(ep, build_episode(&db, &novel, 10, 3).unwrap());
        assert_ne!(ep, build_episode(&db, &novel, 10, 4).unwrap());
        let back = EpisodeSpec::from_json(&ep.to_json().unwrap()).unwrap();
        assert_eq!(back, ep);
    }

    #[test]
    fn episode_capacity_error() {
        let (_d, db) = fixture_db();
        let police = db.class_id("police").unwrap();
        match build_episode(&db, &[police], 500, 0) {
            Err(Error::Capacity { needed, available, .. }) => {
                assert_eq!(needed, 500);
                assert!(available <= 24);
            }
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn rebalance_moves_whole_instances() {
        let (_d, db) = fixture_db();
        let before = class_statistics(&db);
        let targets = BTreeMap::from([("police".to_string(), 14), ("stroller".to_string(), 20)]);
        let out = rebalance_validation(&db, &targets, 9, &BTreeSet::new()).unwrap();
        let after = class_statistics(&out);
        let police = after.row("police").unwrap();
        assert!(police.val >= 14 && police.train >= TRAIN_RESERVE);
        assert_eq!(after.row("stroller").unwrap().val, 20);
        for (b, a) in before.rows.iter().zip(&after.rows) {
            assert_eq!(b.total, a.total);
        }
        // no-op when already satisfied
        let noop = rebalance_validation(&db, &BTreeMap::from([("police".to_string(), 1)]), 9, &BTreeSet::new()).unwrap();
        assert_eq!(noop, db);
        // protected instances stay put
        let protected: BTreeSet<String> = db.instances_in(db.class_id("stroller").unwrap(), Split::Train)
            .into_iter().take(30).map(str::to_string).collect();
        let out = rebalance_validation(&db, &targets, 9, &protected).unwrap();
        assert!(protected.iter().all(|p| out.instance_split[p] == Split::Train));
    }

    #[test]
    fn rebalance_reservation_is_enforced() {
        let (_d, db) = fixture_db();
        // 24 train + 2 val police: reaching 20 in val would leave 6 < 10 in train.
        let err = rebalance_validation(&db, &BTreeMap::from([("police".to_string(), 20)]), 0, &BTreeSet::new());
        assert!(matches!(err, Err(Error::Capacity { .. })));
        let ok = rebalance_validation(&db, &BTreeMap::from([("police".to_string(), 16)]), 0, &BTreeSet::new()).unwrap();
        let row = class_statistics(&ok).row("police").cloned().unwrap();
        assert_eq!((row.train, row.val), (10, 16));
    }

    #[test]
    fn rebalance_prefers_visible_instances() {
        let (_d, db) = fixture_db();
        let class = db.class_id("pushable_pullable").unwrap();
        let targets = BTreeMap::from([("pushable_pullable".to_string(), 400)]);
        let (mut moved_sum, mut moved_n, mut kept_sum, mut kept_n) = (0.0, 0usize, 0.0, 0usize);
        let vis: BTreeMap<&str, f64> = db.instances_in(class, Split::Train)
            .into_iter().map(|t| (t, db.mean_visibility(t))).collect();
        for seed in 0..100 {
            let out = rebalance_validation(&db, &targets, seed, &BTreeSet::new()).unwrap();
            for (&tok, &v) in &vis {
                if out.instance_split[tok] == Split::Val {
                    moved_sum += v;
                    moved_n += 1;
                } else {
                    kept_sum += v;
                    kept_n += 1;
                }
            }
        }
        assert!(moved_sum / moved_n as f64 > kept_sum / kept_n as f64);
    }
}
