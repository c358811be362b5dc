//! Two-stage training: base training on base classes, then few-shot
//! fine-tuning of novel heads under a freeze setting.

mod augment;

use std::collections::{BTreeMap, BTreeSet};
use std::ops::ControlFlow;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bevgrid::{encode_targets, voxelize, FeatureGrid, GridSpec, TargetSet};
use crate::error::{Error, Result};
use crate::geometry::{ClassRole, InstanceId, SceneFrame};
use crate::ingest::EpisodeSpec;
use crate::loss::SabConfig;
use crate::model::{add_novel_head, apply_freeze, forward_backward, ClsLossKind, FreezeMask, Gradients, LossConfig, Model, SabScope};
use crate::seed::{derive_seed, rng_for};
use crate::synthgen::Dataset;

pub use augment::{gt_aug, BankObject, GtAugConfig, ShotBank};

pub const BASE_MAX_LR: f64 = 1e-3;
pub const BASE_MIN_LR: f64 = 1e-4;
/// Fine-tuning scales both ends of the schedule.
pub const FINETUNE_LR_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Base,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub min_lr: f64,
    /// Share of steps spent ramping up.
    pub ramp_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Fine-tuning setting 2..=9; ignored for the base stage.
    pub setting: u8,
    pub loss: ClsLossKind,
    pub sab: SabConfig,
    pub sab_scope: SabScope,
    pub lambda: f64,
    pub gt_aug: bool,
    pub gt_aug_cfg: GtAugConfig,
    pub grid: GridSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::base(0)
    }
}

impl TrainConfig {
    pub fn base(seed: u64) -> Self {
        TrainConfig {
            stage: Stage::Base,
            epochs: 20,
            batch_size: 4,
            max_lr: BASE_MAX_LR,
            min_lr: BASE_MIN_LR,
            ramp_fraction: 0.4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            setting: 7,
            loss: ClsLossKind::Focal,
            sab: SabConfig::default(),
            sab_scope: SabScope::TrainableHeads,
            lambda: crate::loss::DEFAULT_LAMBDA,
            gt_aug: true,
            gt_aug_cfg: GtAugConfig::default(),
            grid: GridSpec::default(),
            seed,
        }
    }

    pub fn finetune(setting: u8, seed: u64) -> Self {
        TrainConfig {
            stage: Stage::Finetune,
            epochs: 80,
            max_lr: BASE_MAX_LR * FINETUNE_LR_SCALE,
            min_lr: BASE_MIN_LR * FINETUNE_LR_SCALE,
            setting,
            ..TrainConfig::base(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.min_lr > 0.0
            && self.max_lr >= self.min_lr
            && self.max_lr.is_finite()
            && self.ramp_fraction > 0.0
            && self.ramp_fraction < 1.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid training config {self:?}")));
        }
        self.sab.validate()?;
        self.grid.validate()?;
        if self.stage == Stage::Finetune {
            apply_freeze(self.setting)?;
        }
        Ok(())
    }

    pub fn mask(&self) -> Result<FreezeMask> {
        match self.stage {
            Stage::Base => Ok(FreezeMask::base_stage()),
            Stage::Finetune => apply_freeze(self.setting),
        }
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        let sab = self.mask()?.sab || self.loss == ClsLossKind::Sab;
        Ok(LossConfig {
            kind: if sab { ClsLossKind::Sab } else { ClsLossKind::Focal },
            sab: self.sab,
            scope: self.sab_scope,
            lambda: self.lambda,
        })
    }
}

/// One-cycle cosine schedule: min → max over the first `ramp_fraction` of
/// the steps, then max → min. The first and last steps are exactly `min_lr`.
pub fn lr_at(cfg: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    debug_assert!(step < total_steps);
    let (lo, hi) = (cfg.min_lr, cfg.max_lr);
    if total_steps <= 2 {
        return lo;
    }
    let peak = ((cfg.ramp_fraction * total_steps as f64).round() as usize).clamp(1, total_steps - 2);
    let span = hi - lo;
    if step <= peak {
        let t = step as f64 / peak as f64;
        lo + span * 0.5 * (1.0 - (std::f64::consts::PI * t).cos())
    } else {
        let t = (step - peak) as f64 / (total_steps - 1 - peak) as f64;
        lo + span * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Adam with decoupled weight decay. Moments are kept per tensor name and
/// only tensors present in the gradient map are touched.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        AdamW::new(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in &grads.0 {
            let p = model
                .param_mut(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown tensor {name}")))?;
            if p.data.len() != g.len() {
                return Err(Error::Contract(format!("gradient for {name} has the wrong length")));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p.data[i] -= lr * (update + self.weight_decay * p.data[i]);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Rate of the epoch's last step.
    pub lr: f64,
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub total_loss: f64,
    pub num_pos_mean: f64,
    pub num_hn_mean: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// JSON lines, one record per epoch.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    /// The log with wall-clock fields zeroed; equal across reruns.
    pub fn without_timing(&self) -> TrainLog {
        TrainLog {
            records: self
                .records
                .iter()
                .map(|r| EpochRecord {
                    wall_time_s: 0.0,
                    ..r.clone()
                })
                .collect(),
        }
    }
}

pub enum StageData<'a> {
    Base(&'a Dataset),
    Finetune {
        dataset: &'a Dataset,
        episode: &'a EpisodeSpec,
    },
}

/// Base-stage frames: every train frame, base-class labels only. Novel
/// objects stay in the point cloud as unlabeled background.
pub fn base_frames(dataset: &Dataset) -> Vec<SceneFrame> {
    let table = &dataset.class_table;
    dataset
        .train_frames
        .iter()
        .map(|f| f.filter_labels(|b, _| table.role(b.class_id) == Some(ClassRole::Base)))
        .collect()
}

/// Fine-tuning frames: the frames of the episode's shots with base labels
/// plus the selected novel instances. Other novel objects are unlabeled.
pub fn finetune_frames(dataset: &Dataset, episode: &EpisodeSpec) -> Result<Vec<SceneFrame>> {
    let table = &dataset.class_table;
    let selected: BTreeSet<InstanceId> = episode
        .selected_instances()
        .iter()
        .map(|s| s.parse().map_err(|_| Error::Lookup(format!("instance `{s}` is not a synthetic id"))))
        .collect::<Result<_>>()?;
    let mut ids: Vec<u32> = Vec::new();
    for r in episode.frame_refs() {
        ids.push(augment::train_frame(dataset, &r)?.frame_id);
    }
    ids.sort_unstable();
    ids.dedup();
    Ok(ids
        .into_iter()
        .map(|id| {
            let f = dataset.train_frame(id).expect("checked above");
            f.filter_labels(|b, inst| table.role(b.class_id) == Some(ClassRole::Base) || selected.contains(&inst))
        })
        .collect())
}

/// Runs one stage. The base stage needs an initialized model; fine-tuning
/// needs the stage-1 checkpoint and adds a fresh head for every episode
/// class the model lacks.
pub fn run_stage(model: Option<&Model>, data: StageData<'_>, cfg: &TrainConfig) -> Result<(Model, TrainLog)> {
    run_stage_with(model, data, cfg, |_, _| ControlFlow::Continue(()))
}

/// [`run_stage`] with a per-epoch callback that may stop training early.
pub fn run_stage_with(
    model: Option<&Model>,
    data: StageData<'_>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Model) -> ControlFlow<()>,
) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    let start = Instant::now();
    let (mut model, frames, dataset, bank) = match (data, cfg.stage) {
        (StageData::Base(dataset), Stage::Base) => {
            let model = model.ok_or_else(|| Error::Config("base stage needs an initialized model".into()))?;
            (model.clone(), base_frames(dataset), dataset, None)
        }
        (StageData::Finetune { dataset, episode }, Stage::Finetune) => {
            let base = model.ok_or_else(|| Error::Config("fine-tuning needs a stage-1 checkpoint".into()))?;
            let mut m = base.clone();
            for &c in &episode.novel_classes {
                if !m.heads.iter().any(|h| h.classes.contains(&c)) {
                    m = add_novel_head(&m, c, derive_seed(cfg.seed, &format!("novel-head/{c}")))?;
                }
            }
            let bank = cfg.gt_aug.then(|| ShotBank::from_episode(dataset, episode)).transpose()?;
            (m, finetune_frames(dataset, episode)?, dataset, bank)
        }
        _ => return Err(Error::Config("stage data does not match the configured stage".into())),
    };
    if frames.is_empty() {
        return Err(Error::Config("no training frames".into()));
    }
    let table = &dataset.class_table;
    let mask = cfg.mask()?;
    let loss_cfg = cfg.loss_config()?;
    let encode = |f: &SceneFrame| (voxelize(f, &cfg.grid), encode_targets(f, &cfg.grid, table));
    let fixed: Vec<(FeatureGrid, TargetSet)> = if bank.is_none() { frames.iter().map(encode).collect() } else { Vec::new() };

    let steps_per_epoch = frames.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut opt = AdamW::from_config(cfg);
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let epoch_data: Vec<(FeatureGrid, TargetSet)> = match &bank {
            Some(bank) => frames
                .iter()
                .map(|f| encode(&gt_aug(f, bank, &cfg.gt_aug_cfg, derive_seed(cfg.seed, &format!("gtaug/epoch{epoch}")))))
                .collect(),
            None => Vec::new(),
        };
        let data: &[(FeatureGrid, TargetSet)] = if bank.is_some() { &epoch_data } else { &fixed };
        let mut order: Vec<usize> = (0..frames.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &format!("train/shuffle/{epoch}")));
        let (mut cls, mut reg, mut tot, mut pos, mut hn) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut lr = cfg.min_lr;
        for chunk in order.chunks(cfg.batch_size) {
            lr = lr_at(cfg, step, total);
            let inputs: Vec<&FeatureGrid> = chunk.iter().map(|&i| &data[i].0).collect();
            let targets: Vec<&TargetSet> = chunk.iter().map(|&i| &data[i].1).collect();
            let out = forward_backward(&model, &inputs, &targets, &mask, &loss_cfg)?;
            opt.step(&mut model, &out.grads, lr)?;
            for (name, value) in out.running {
                model.param_mut(&name).expect("running stats name a model tensor").data = value;
            }
            cls += out.loss.classification;
            reg += out.loss.regression;
            tot += out.loss.total;
            pos += out.num_pos_mean;
            hn += out.num_hn_mean;
            step += 1;
        }
        let n = steps_per_epoch as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            cls_loss: cls / n,
            reg_loss: reg / n,
            total_loss: tot / n,
            num_pos_mean: pos / n,
            num_hn_mean: hn / n,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!("epoch {} loss {:.4} (cls {:.4}, reg {:.4})", record.epoch, record.total_loss, record.cls_loss, record.reg_loss);
        let flow = on_epoch(&record, &model);
        log.records.push(record);
        if flow.is_break() {
            break;
        }
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests;
