//! Small BEV detector with four parameter groups.
//!
//! ```text
//! grid ─▶ extractor (E): strided 3×3 convs, each output resized to the grid
//!                        and concatenated
//!      ─▶ shared (S):    one 3×3 conv + ReLU
//!      ─▶ heads (B / N): 3×3 conv ─ BN ─ ReLU ─ 1×1 conv
//!                        (one heatmap row per class + 10 regression rows)
//! ```
//!
//! Heatmap rows are stored as separate tensors per class so that a novel
//! class can join an existing head without touching its other rows.

pub mod checkpoint;
pub mod ops;

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bevgrid::{FeatureGrid, HeadOutput, HeadOutputs, TargetSet, REG_CHANNELS};
use crate::error::{Error, Result};
use crate::geometry::ClassId;
use crate::loss::{focal_loss, regression_loss, sab_loss, total_loss, LossBreakdown, SabConfig, FOCAL_ALPHA, FOCAL_GAMMA};
use crate::seed::rng_for;
use ops::{ConvGeom, BN_MOMENTUM};

/// Heatmap prior: initial scores start at 0.01.
pub const PRIOR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    E,
    S,
    B,
    N,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::E, Group::S, Group::B, Group::N];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Group> {
        Group::ALL.get(tag as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub width: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NovelPolicy {
    /// One new head per novel class.
    PerClass,
    /// All novel classes share one new head.
    SingleHead,
    /// Novel classes become extra rows of existing base heads.
    MergedIntoBase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchSpec {
    pub in_channels: usize,
    pub extractor: Vec<ConvSpec>,
    pub shared_width: usize,
    pub head_width: usize,
    pub base_heads: Vec<Vec<ClassId>>,
    pub novel_policy: NovelPolicy,
    /// Base head index per novel class under `MergedIntoBase`; classes not
    /// listed go to head `ordinal % base_heads.len()`.
    #[serde(with = "string_keys")]
    pub merge_into: BTreeMap<ClassId, usize>,
}

/// Map keys as strings so text formats without integer keys accept them.
mod string_keys {
    use super::ClassId;
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(m: &BTreeMap<ClassId, usize>, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_map(m.iter().map(|(k, v)| (k.to_string(), v)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<BTreeMap<ClassId, usize>, D::Error> {
        BTreeMap::<String, usize>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| k.parse().map(|k| (k, v)).map_err(|_| D::Error::custom(format!("class id `{k}` is not an integer"))))
            .collect()
    }
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            in_channels: crate::bevgrid::BASE_FEATURES,
            extractor: vec![
                ConvSpec { width: 8, stride: 1 },
                ConvSpec { width: 16, stride: 2 },
                ConvSpec { width: 32, stride: 2 },
            ],
            shared_width: 24,
            head_width: 32,
            base_heads: vec![vec![0], vec![1, 2, 3]],
            novel_policy: NovelPolicy::PerClass,
            merge_into: BTreeMap::new(),
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let widths_ok = self.in_channels > 0
            && self.shared_width > 0
            && self.head_width > 0
            && !self.extractor.is_empty()
            && self.extractor.iter().all(|c| c.width > 0 && c.stride >= 1);
        if !widths_ok {
            return Err(Error::Config("architecture widths and strides must be positive".into()));
        }
        let mut seen = BTreeSet::new();
        for head in &self.base_heads {
            if head.is_empty() {
                return Err(Error::Config("empty base head".into()));
            }
            for &c in head {
                if !seen.insert(c) {
                    return Err(Error::Config(format!("class {c} assigned to more than one head")));
                }
            }
        }
        if self.base_heads.is_empty() {
            return Err(Error::Config("no base heads".into()));
        }
        if let Some((c, &h)) = self.merge_into.iter().find(|(_, &h)| h >= self.base_heads.len()) {
            return Err(Error::Config(format!("class {c} merged into missing head {h}")));
        }
        Ok(())
    }

    pub fn concat_channels(&self) -> usize {
        self.extractor.iter().map(|c| c.width).sum()
    }

    /// Tensor elements (buffers included) added by one new single-class head.
    pub fn head_template_size(&self) -> usize {
        let hw = self.head_width;
        hw * self.shared_width * 9 + 4 * hw + REG_CHANNELS * hw + REG_CHANNELS + hw + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    /// BN running statistics: stored and grouped, never trained.
    pub fn is_buffer(&self) -> bool {
        self.name.ends_with(".running_mean") || self.name.ends_with(".running_var")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Head {
    pub prefix: String,
    /// Group of the head trunk and regression rows.
    pub group: Group,
    /// Heatmap channel order.
    pub classes: Vec<ClassId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: ArchSpec,
    pub seed: u64,
    pub heads: Vec<Head>,
    pub novel_classes: Vec<ClassId>,
    pub params: Vec<Param>,
}

fn he_uniform(name: &str, seed: u64, rows: usize, fan_in: usize, gain: f64) -> Vec<f64> {
    let bound = gain * (1.0 / fan_in as f64).sqrt();
    let mut rng = rng_for(seed, &format!("param/{name}"));
    (0..rows * fan_in).map(|_| rng.random_range(-bound..bound)).collect()
}

const RELU_GAIN: f64 = 2.449_489_742_783_178; // sqrt(6)

impl Model {
    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    fn data(&self, name: &str) -> &[f64] {
        &self.param(name).unwrap_or_else(|| panic!("missing parameter {name}")).data
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn class_group(&self, c: ClassId) -> Group {
        if self.novel_classes.contains(&c) {
            Group::N
        } else {
            Group::B
        }
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.heads.iter().flat_map(|h| h.classes.iter().copied()).collect()
    }

    fn push(&mut self, name: String, group: Group, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param { name, group, shape, data });
    }

    fn push_head_trunk(&mut self, prefix: &str, group: Group, seed: u64) {
        let (hw, sw) = (self.arch.head_width, self.arch.shared_width);
        let n = format!("{prefix}.conv.weight");
        let w = he_uniform(&n, seed, hw, sw * 9, RELU_GAIN);
        self.push(n, group, vec![hw, sw * 9], w);
        self.push(format!("{prefix}.bn.gamma"), group, vec![hw], vec![1.0; hw]);
        self.push(format!("{prefix}.bn.beta"), group, vec![hw], vec![0.0; hw]);
        self.push(format!("{prefix}.bn.running_mean"), group, vec![hw], vec![0.0; hw]);
        self.push(format!("{prefix}.bn.running_var"), group, vec![hw], vec![1.0; hw]);
        let n = format!("{prefix}.reg.weight");
        let w = he_uniform(&n, seed, REG_CHANNELS, hw, 1.0);
        self.push(n, group, vec![REG_CHANNELS, hw], w);
        self.push(format!("{prefix}.reg.bias"), group, vec![REG_CHANNELS], vec![0.0; REG_CHANNELS]);
    }

    fn push_class_row(&mut self, prefix: &str, class: ClassId, group: Group, seed: u64) {
        let hw = self.arch.head_width;
        let n = format!("{prefix}.cls{class}.weight");
        let w = he_uniform(&n, seed, 1, hw, 1.0);
        self.push(n, group, vec![1, hw], w);
        self.push(format!("{prefix}.cls{class}.bias"), group, vec![1], vec![(PRIOR / (1.0 - PRIOR)).ln()]);
    }

    /// Every parameter name belongs to exactly one group; checked on load.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let mut names = BTreeSet::new();
        for p in &self.params {
            if !names.insert(p.name.as_str()) {
                return Err(Error::Integrity(format!("duplicate tensor {}", p.name)));
            }
            if p.shape.iter().product::<usize>() != p.data.len() {
                return Err(Error::Integrity(format!("tensor {} shape mismatch", p.name)));
            }
        }
        let rebuilt = skeleton(&self.arch, &self.heads, &self.novel_classes);
        let expect: Vec<(&str, Group, &[usize])> = rebuilt.iter().map(|(n, g, s)| (n.as_str(), *g, s.as_slice())).collect();
        let got: Vec<(&str, Group, &[usize])> = self.params.iter().map(|p| (p.name.as_str(), p.group, p.shape.as_slice())).collect();
        if expect != got {
            return Err(Error::Integrity("tensor layout does not match the architecture".into()));
        }
        Ok(())
    }
}

/// Names, groups and shapes a model with these heads must have, in order.
fn skeleton(arch: &ArchSpec, heads: &[Head], novel: &[ClassId]) -> Vec<(String, Group, Vec<usize>)> {
    let mut m = Model {
        arch: arch.clone(),
        seed: 0,
        heads: Vec::new(),
        novel_classes: novel.to_vec(),
        params: Vec::new(),
    };
    m.push_trunk(0);
    // heads in creation order, rows in the order they were appended
    let mut rows: Vec<(usize, ClassId)> = Vec::new();
    for (i, h) in heads.iter().enumerate() {
        for &c in &h.classes {
            rows.push((i, c));
        }
    }
    let mut created = BTreeSet::new();
    let mut order: Vec<(usize, ClassId)> = rows.iter().filter(|(_, c)| !novel.contains(c)).copied().collect();
    for &c in novel {
        if let Some(&r) = rows.iter().find(|(_, x)| *x == c) {
            order.push(r);
        }
    }
    for (i, c) in order {
        let h = &heads[i];
        if created.insert(i) {
            m.push_head_trunk(&h.prefix, h.group, 0);
        }
        m.push_class_row(&h.prefix, c, m.class_group(c), 0);
    }
    m.params.into_iter().map(|p| (p.name, p.group, p.shape)).collect()
}

impl Model {
    fn push_trunk(&mut self, seed: u64) {
        let mut cin = self.arch.in_channels;
        for (i, layer) in self.arch.extractor.clone().iter().enumerate() {
            let n = format!("extractor.conv{i}.weight");
            let w = he_uniform(&n, seed, layer.width, cin * 9, RELU_GAIN);
            self.push(n, Group::E, vec![layer.width, cin * 9], w);
            self.push(format!("extractor.conv{i}.bias"), Group::E, vec![layer.width], vec![0.0; layer.width]);
            cin = layer.width;
        }
        let (sw, cc) = (self.arch.shared_width, self.arch.concat_channels());
        let n = "shared.conv.weight".to_string();
        let w = he_uniform(&n, seed, sw, cc * 9, RELU_GAIN);
        self.push(n, Group::S, vec![sw, cc * 9], w);
        self.push("shared.conv.bias".into(), Group::S, vec![sw], vec![0.0; sw]);
    }
}

pub fn init_model(arch: &ArchSpec, seed: u64) -> Result<Model> {
    arch.validate()?;
    let mut m = Model {
        arch: arch.clone(),
        seed,
        heads: Vec::new(),
        novel_classes: Vec::new(),
        params: Vec::new(),
    };
    m.push_trunk(seed);
    for (i, classes) in arch.base_heads.iter().enumerate() {
        let prefix = format!("head.b{i}");
        m.push_head_trunk(&prefix, Group::B, seed);
        for &c in classes {
            m.push_class_row(&prefix, c, Group::B, seed);
        }
        m.heads.push(Head {
            prefix,
            group: Group::B,
            classes: classes.clone(),
        });
    }
    Ok(m)
}

/// Adds `class_id` as a novel class according to the architecture's policy.
/// Existing tensors are untouched.
pub fn add_novel_head(model: &Model, class_id: ClassId, seed: u64) -> Result<Model> {
    if model.heads.iter().any(|h| h.classes.contains(&class_id)) {
        return Err(Error::Config(format!("class {class_id} already has a head")));
    }
    let mut m = model.clone();
    m.novel_classes.push(class_id);
    match m.arch.novel_policy {
        NovelPolicy::PerClass => {
            let prefix = format!("head.n{class_id}");
            m.push_head_trunk(&prefix, Group::N, seed);
            m.push_class_row(&prefix, class_id, Group::N, seed);
            m.heads.push(Head {
                prefix,
                group: Group::N,
                classes: vec![class_id],
            });
        }
        NovelPolicy::SingleHead => {
            let prefix = "head.novel".to_string();
            if !m.heads.iter().any(|h| h.prefix == prefix) {
                m.push_head_trunk(&prefix, Group::N, seed);
                m.heads.push(Head {
                    prefix: prefix.clone(),
                    group: Group::N,
                    classes: Vec::new(),
                });
            }
            m.push_class_row(&prefix, class_id, Group::N, seed);
            m.heads.iter_mut().find(|h| h.prefix == prefix).expect("just ensured").classes.push(class_id);
        }
        NovelPolicy::MergedIntoBase => {
            let ordinal = m.novel_classes.len() - 1;
            let target = m
                .arch
                .merge_into
                .get(&class_id)
                .copied()
                .unwrap_or(ordinal % m.arch.base_heads.len());
            let prefix = m.heads[target].prefix.clone();
            m.push_class_row(&prefix, class_id, Group::N, seed);
            m.heads[target].classes.push(class_id);
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    /// 0 for the base stage, 2..=9 for fine-tuning settings.
    pub setting: u8,
    pub trainable: [bool; 4],
    pub sab: bool,
}

impl FreezeMask {
    /// Stage-1 mask: E, S and B train.
    pub fn base_stage() -> Self {
        FreezeMask {
            setting: 0,
            trainable: [true, true, true, false],
            sab: false,
        }
    }

    pub fn trains(&self, g: Group) -> bool {
        self.trainable[g as usize]
    }
}

/// Fine-tuning settings: which of E, S, B train (N always trains) and
/// whether the SAB loss is selected.
pub fn apply_freeze(setting: u8) -> Result<FreezeMask> {
    let (e, s, b, sab) = match setting {
        2 => (true, true, true, false),
        3 => (true, true, false, false),
        4 => (false, true, true, false),
        5 => (false, true, false, false),
        6 => (false, false, true, false),
        7 => (false, false, false, false),
        8 => (false, false, true, true),
        9 => (false, false, false, true),
        _ => return Err(Error::Config(format!("unknown fine-tuning setting {setting}"))),
    };
    Ok(FreezeMask {
        setting,
        trainable: [e, s, b, true],
        sab,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClsLossKind {
    Focal,
    Sab,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SabScope {
    /// Every channel whose heatmap row trains.
    TrainableHeads,
    /// Novel-class channels only.
    NovelOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: ClsLossKind,
    pub sab: SabConfig,
    pub scope: SabScope,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: ClsLossKind::Focal,
            sab: SabConfig::default(),
            scope: SabScope::TrainableHeads,
            lambda: crate::loss::DEFAULT_LAMBDA,
        }
    }
}

/// Gradients keyed by tensor name; frozen tensors and buffers are absent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(pub BTreeMap<String, Vec<f64>>);

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub outputs: Vec<HeadOutputs>,
    pub loss: LossBreakdown,
    pub grads: Gradients,
    /// New running statistics for heads run in train mode.
    pub running: Vec<(String, Vec<f64>)>,
    /// Mean positives / hard negatives per (sample, channel) at the SAB θ.
    pub num_pos_mean: f64,
    pub num_hn_mean: f64,
}

struct TrunkCache {
    x: Vec<f64>,
    /// Per extractor layer: geometry, post-ReLU output, patch matrix.
    layers: Vec<(ConvGeom, Vec<f64>, Vec<f64>)>,
    concat: Vec<f64>,
    shared_geom: ConvGeom,
    shared_cols: Vec<f64>,
    shared: Vec<f64>,
}

struct HeadCache {
    conv_geom: ConvGeom,
    conv_cols: Vec<f64>,
    bn: ops::BnCache,
    act: Vec<f64>,
    weight: Vec<f64>,
    out: Vec<f64>,
}

impl Model {
    fn check_inputs(&self, inputs: &[&FeatureGrid]) -> Result<(usize, usize)> {
        let first = inputs.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
        let (h, w) = (first.height, first.width);
        for g in inputs {
            if g.channels != self.arch.in_channels || g.height != h || g.width != w || g.data.len() != g.channels * h * w {
                return Err(Error::Contract(format!(
                    "input {}x{}x{} does not match {} channels at {h}x{w}",
                    g.channels, g.height, g.width, self.arch.in_channels
                )));
            }
        }
        Ok((h, w))
    }

    fn trunk_forward(&self, inputs: &[&FeatureGrid], h: usize, w: usize) -> TrunkCache {
        let batch = inputs.len();
        let x: Vec<f64> = inputs.iter().flat_map(|g| g.data.iter().copied()).collect();
        let mut layers: Vec<(ConvGeom, Vec<f64>, Vec<f64>)> = Vec::with_capacity(self.arch.extractor.len());
        let (mut cur_h, mut cur_w, mut cin) = (h, w, self.arch.in_channels);
        for (i, spec) in self.arch.extractor.iter().enumerate() {
            let g = ConvGeom {
                cin,
                cout: spec.width,
                k: 3,
                stride: spec.stride,
                h: cur_h,
                w: cur_w,
            };
            let (mut y, cols) = {
                let input: &[f64] = if i == 0 { &x } else { &layers[i - 1].1 };
                ops::conv_forward(
                    &g,
                    batch,
                    input,
                    self.data(&format!("extractor.conv{i}.weight")),
                    Some(self.data(&format!("extractor.conv{i}.bias"))),
                )
            };
            ops::relu_inplace(&mut y);
            layers.push((g, y, cols));
            cur_h = g.out_h();
            cur_w = g.out_w();
            cin = spec.width;
        }
        let cc = self.arch.concat_channels();
        let hw = h * w;
        let mut concat = vec![0.0; batch * cc * hw];
        let mut off = 0;
        for (g, y, _) in &layers {
            let (oh, ow) = (g.out_h(), g.out_w());
            let up = ops::upsample_nearest(y, batch * g.cout, oh, ow, h, w);
            for b in 0..batch {
                concat[(b * cc + off) * hw..(b * cc + off + g.cout) * hw].copy_from_slice(&up[b * g.cout * hw..(b + 1) * g.cout * hw]);
            }
            off += g.cout;
        }
        let shared_geom = ConvGeom {
            cin: cc,
            cout: self.arch.shared_width,
            k: 3,
            stride: 1,
            h,
            w,
        };
        let (mut shared, shared_cols) = ops::conv_forward(
            &shared_geom,
            batch,
            &concat,
            self.data("shared.conv.weight"),
            Some(self.data("shared.conv.bias")),
        );
        ops::relu_inplace(&mut shared);
        TrunkCache {
            x,
            layers,
            concat,
            shared_geom,
            shared_cols,
            shared,
        }
    }

    fn head_rows(&self, head: &Head) -> (Vec<f64>, Vec<f64>) {
        let mut weight = Vec::with_capacity((head.classes.len() + REG_CHANNELS) * self.arch.head_width);
        let mut bias = Vec::with_capacity(head.classes.len() + REG_CHANNELS);
        for c in &head.classes {
            weight.extend_from_slice(self.data(&format!("{}.cls{c}.weight", head.prefix)));
            bias.extend_from_slice(self.data(&format!("{}.cls{c}.bias", head.prefix)));
        }
        weight.extend_from_slice(self.data(&format!("{}.reg.weight", head.prefix)));
        bias.extend_from_slice(self.data(&format!("{}.reg.bias", head.prefix)));
        (weight, bias)
    }

    fn head_forward(&self, head: &Head, shared: &[f64], batch: usize, h: usize, w: usize, train: bool) -> HeadCache {
        let p = &head.prefix;
        let hw = h * w;
        let width = self.arch.head_width;
        let conv_geom = ConvGeom {
            cin: self.arch.shared_width,
            cout: width,
            k: 3,
            stride: 1,
            h,
            w,
        };
        let (pre, conv_cols) = ops::conv_forward(&conv_geom, batch, shared, self.data(&format!("{p}.conv.weight")), None);
        let (mut act, bn) = ops::bn_forward(
            &pre,
            batch,
            width,
            hw,
            self.data(&format!("{p}.bn.gamma")),
            self.data(&format!("{p}.bn.beta")),
            self.data(&format!("{p}.bn.running_mean")),
            self.data(&format!("{p}.bn.running_var")),
            train,
        );
        ops::relu_inplace(&mut act);
        let (weight, bias) = self.head_rows(head);
        let out_geom = ConvGeom {
            cin: width,
            cout: head.classes.len() + REG_CHANNELS,
            k: 1,
            stride: 1,
            h,
            w,
        };
        let (out, _) = ops::conv_forward(&out_geom, batch, &act, &weight, Some(&bias));
        HeadCache {
            conv_geom,
            conv_cols,
            bn,
            act,
            weight,
            out,
        }
    }

    fn collect_outputs(&self, caches: &[HeadCache], batch: usize, h: usize, w: usize) -> Vec<HeadOutputs> {
        let hw = h * w;
        (0..batch)
            .map(|b| HeadOutputs {
                height: h,
                width: w,
                heads: self
                    .heads
                    .iter()
                    .zip(caches)
                    .map(|(head, c)| {
                        let rows = head.classes.len() + REG_CHANNELS;
                        let o = &c.out[b * rows * hw..(b + 1) * rows * hw];
                        let k = head.classes.len();
                        HeadOutput {
                            class_ids: head.classes.clone(),
                            heatmap: o[..k * hw].iter().map(|&v| ops::sigmoid(v)).collect(),
                            regression: o[k * hw..].to_vec(),
                        }
                    })
                    .collect(),
            })
            .collect()
    }

    /// Inference: every normalisation layer uses running statistics.
    pub fn predict(&self, inputs: &[&FeatureGrid]) -> Result<Vec<HeadOutputs>> {
        let (h, w) = self.check_inputs(inputs)?;
        let trunk = self.trunk_forward(inputs, h, w);
        let caches: Vec<HeadCache> = self
            .heads
            .iter()
            .map(|head| self.head_forward(head, &trunk.shared, inputs.len(), h, w, false))
            .collect();
        Ok(self.collect_outputs(&caches, inputs.len(), h, w))
    }
}

/// One training evaluation of the batch: outputs, the batch loss (mean over
/// samples of the per-head sum) and gradients of every tensor the mask
/// trains. Heads whose trunk group trains run normalisation in train mode.
pub fn forward_backward(model: &Model, inputs: &[&FeatureGrid], targets: &[&TargetSet], mask: &FreezeMask, loss_cfg: &LossConfig) -> Result<StepOutput> {
    run(model, inputs, targets, mask, loss_cfg, Pass::Backward).map(|(s, _)| s)
}

/// The loss [`forward_backward`] would report, without the backward pass.
pub fn forward_loss(model: &Model, inputs: &[&FeatureGrid], targets: &[&TargetSet], mask: &FreezeMask, loss_cfg: &LossConfig) -> Result<LossBreakdown> {
    run(model, inputs, targets, mask, loss_cfg, Pass::Loss).map(|(s, _)| s.loss)
}

#[derive(Clone, Copy)]
enum Pass {
    Loss,
    /// Loss plus the kink signature at an optional SAB θ.
    Probe(Option<f64>),
    Backward,
}

fn run(model: &Model, inputs: &[&FeatureGrid], targets: &[&TargetSet], mask: &FreezeMask, loss_cfg: &LossConfig, pass: Pass) -> Result<(StepOutput, Option<Vec<bool>>)> {
    let (h, w) = model.check_inputs(inputs)?;
    if targets.len() != inputs.len() {
        return Err(Error::Contract(format!("{} inputs but {} targets", inputs.len(), targets.len())));
    }
    let classes = model.classes();
    for t in targets {
        if t.height != h || t.width != w || classes.iter().any(|&c| c as usize >= t.num_classes) {
            return Err(Error::Contract("targets do not match the model's grid or classes".into()));
        }
    }
    let batch = inputs.len();
    let hw = h * w;
    let trunk = model.trunk_forward(inputs, h, w);
    let head_train: Vec<bool> = model.heads.iter().map(|hd| mask.trains(hd.group)).collect();
    let caches: Vec<HeadCache> = model
        .heads
        .iter()
        .zip(&head_train)
        .map(|(head, &train)| model.head_forward(head, &trunk.shared, batch, h, w, train))
        .collect();

    let inv_b = 1.0 / batch as f64;
    let (mut cls_sum, mut reg_sum) = (0.0, 0.0);
    let (mut pos_sum, mut hn_sum, mut pool_n) = (0.0, 0.0, 0usize);
    let mut d_outs: Vec<Vec<f64>> = Vec::with_capacity(model.heads.len());
    for (head, cache) in model.heads.iter().zip(&caches) {
        let k = head.classes.len();
        let rows = k + REG_CHANNELS;
        let mut d_out = vec![0.0; batch * rows * hw];
        for (b, target) in targets.iter().enumerate() {
            let ht = target.head_targets(&head.classes);
            let o = &cache.out[b * rows * hw..(b + 1) * rows * hw];
            let d = &mut d_out[b * rows * hw..(b + 1) * rows * hw];
            for (j, &c) in head.classes.iter().enumerate() {
                let logits = &o[j * hw..(j + 1) * hw];
                let f: Vec<f64> = logits.iter().map(|&v| ops::sigmoid(v)).collect();
                let y = &ht.heatmap[j * hw..(j + 1) * hw];
                let ign = &ht.ignore[j * hw..(j + 1) * hw];
                let use_sab = loss_cfg.kind == ClsLossKind::Sab
                    && match loss_cfg.scope {
                        SabScope::TrainableHeads => mask.trains(model.class_group(c)),
                        SabScope::NovelOnly => model.class_group(c) == Group::N,
                    };
                let l = if use_sab {
                    sab_loss(&f, y, Some(ign), 1, &loss_cfg.sab)?
                } else {
                    focal_loss(&f, y, Some(ign), 1, FOCAL_ALPHA, FOCAL_GAMMA, loss_cfg.sab.eps)?
                };
                cls_sum += l.value;
                for i in 0..hw {
                    if !ign[i] {
                        if y[i] == 1.0 {
                            pos_sum += 1.0;
                        } else if f[i] > loss_cfg.sab.theta {
                            hn_sum += 1.0;
                        }
                    }
                    d[j * hw + i] = l.grad[i] * f[i] * (1.0 - f[i]) * inv_b;
                }
                pool_n += 1;
            }
            let (rv, rg) = regression_loss(&o[k * hw..], &ht.regression, &ht.mask)?;
            reg_sum += rv;
            for (dst, g) in d[k * hw..].iter_mut().zip(&rg) {
                *dst = loss_cfg.lambda * g * inv_b;
            }
        }
        d_outs.push(d_out);
    }
    let loss = total_loss(cls_sum * inv_b, reg_sum * inv_b, loss_cfg.lambda);
    let denom = pool_n.max(1) as f64;
    if !matches!(pass, Pass::Backward) {
        let sig = match pass {
            Pass::Probe(theta) => Some(kink_signature(model, &trunk, &caches, targets, theta, h, w)),
            _ => None,
        };
        let out = StepOutput {
            outputs: Vec::new(),
            loss,
            grads: Gradients::default(),
            running: Vec::new(),
            num_pos_mean: pos_sum / denom,
            num_hn_mean: hn_sum / denom,
        };
        return Ok((out, sig));
    }

    let mut grads = BTreeMap::new();
    let mut running = Vec::new();
    let trunk_trains = mask.trains(Group::E) || mask.trains(Group::S);
    let mut d_shared = trunk_trains.then(|| vec![0.0; trunk.shared.len()]);
    for (((head, cache), d_out), &train) in model.heads.iter().zip(&caches).zip(&d_outs).zip(&head_train) {
        let rows_train = head.classes.iter().any(|&c| mask.trains(model.class_group(c)));
        if !(train || rows_train || trunk_trains) {
            continue;
        }
        let p = &head.prefix;
        let width = model.arch.head_width;
        let k = head.classes.len();
        let out_geom = ConvGeom {
            cin: width,
            cout: k + REG_CHANNELS,
            k: 1,
            stride: 1,
            h,
            w,
        };
        let need_act = train || trunk_trains;
        let g_out = ops::conv_backward(&out_geom, batch, &cache.act, &[], &cache.weight, d_out, need_act);
        for (j, &c) in head.classes.iter().enumerate() {
            if mask.trains(model.class_group(c)) {
                grads.insert(format!("{p}.cls{c}.weight"), g_out.weight[j * width..(j + 1) * width].to_vec());
                grads.insert(format!("{p}.cls{c}.bias"), vec![g_out.bias[j]]);
            }
        }
        if train {
            grads.insert(format!("{p}.reg.weight"), g_out.weight[k * width..].to_vec());
            grads.insert(format!("{p}.reg.bias"), g_out.bias[k..].to_vec());
        }
        let Some(mut d_act) = g_out.input else { continue };
        ops::relu_backward_inplace(&cache.act, &mut d_act);
        let gamma = model.data(&format!("{p}.bn.gamma"));
        let (d_pre, d_gamma, d_beta) = ops::bn_backward(&d_act, &cache.bn, batch, width, hw, gamma);
        if train {
            grads.insert(format!("{p}.bn.gamma"), d_gamma);
            grads.insert(format!("{p}.bn.beta"), d_beta);
            let rm = model.data(&format!("{p}.bn.running_mean"));
            let rv = model.data(&format!("{p}.bn.running_var"));
            running.push((
                format!("{p}.bn.running_mean"),
                rm.iter().zip(&cache.bn.mean).map(|(r, m)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * m).collect(),
            ));
            running.push((
                format!("{p}.bn.running_var"),
                rv.iter().zip(&cache.bn.var_unbiased).map(|(r, v)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * v).collect(),
            ));
        }
        let g_conv = ops::conv_backward(
            &cache.conv_geom,
            batch,
            &trunk.shared,
            &cache.conv_cols,
            model.data(&format!("{p}.conv.weight")),
            &d_pre,
            trunk_trains,
        );
        if train {
            grads.insert(format!("{p}.conv.weight"), g_conv.weight);
        }
        if let (Some(ds), Some(di)) = (d_shared.as_mut(), g_conv.input) {
            for (a, b) in ds.iter_mut().zip(&di) {
                *a += b;
            }
        }
    }

    if let Some(mut ds) = d_shared {
        ops::relu_backward_inplace(&trunk.shared, &mut ds);
        let e_trains = mask.trains(Group::E);
        let g = ops::conv_backward(
            &trunk.shared_geom,
            batch,
            &trunk.concat,
            &trunk.shared_cols,
            model.data("shared.conv.weight"),
            &ds,
            e_trains,
        );
        if mask.trains(Group::S) {
            grads.insert("shared.conv.weight".into(), g.weight);
            grads.insert("shared.conv.bias".into(), g.bias);
        }
        if let Some(d_concat) = g.input {
            let cc = model.arch.concat_channels();
            let mut offsets = Vec::new();
            let mut off = 0;
            for (geom, _, _) in &trunk.layers {
                offsets.push(off);
                off += geom.cout;
            }
            let mut carry: Option<Vec<f64>> = None;
            for i in (0..trunk.layers.len()).rev() {
                let (geom, y, cols) = &trunk.layers[i];
                let (oh, ow) = (geom.out_h(), geom.out_w());
                let mut slice = vec![0.0; batch * geom.cout * hw];
                for b in 0..batch {
                    slice[b * geom.cout * hw..(b + 1) * geom.cout * hw]
                        .copy_from_slice(&d_concat[(b * cc + offsets[i]) * hw..(b * cc + offsets[i] + geom.cout) * hw]);
                }
                let mut dy = ops::upsample_nearest_backward(&slice, batch * geom.cout, oh, ow, h, w);
                if let Some(c) = carry.take() {
                    for (a, b) in dy.iter_mut().zip(&c) {
                        *a += b;
                    }
                }
                ops::relu_backward_inplace(y, &mut dy);
                let input = if i == 0 { &trunk.x } else { &trunk.layers[i - 1].1 };
                let g = ops::conv_backward(geom, batch, input, cols, model.data(&format!("extractor.conv{i}.weight")), &dy, i > 0);
                grads.insert(format!("extractor.conv{i}.weight"), g.weight);
                grads.insert(format!("extractor.conv{i}.bias"), g.bias);
                carry = g.input;
            }
        }
    }

    let outputs = model.collect_outputs(&caches, batch, h, w);
    let out = StepOutput {
        outputs,
        loss,
        grads: Gradients(grads),
        running,
        num_pos_mean: pos_sum / denom,
        num_hn_mean: hn_sum / denom,
    };
    Ok((out, None))
}

/// Which side of every non-smooth point the forward pass sits on: ReLU
/// signs, L1 residual signs and SAB pool membership. Differences are only
/// comparable with gradients while this stays fixed.
fn kink_signature(model: &Model, trunk: &TrunkCache, caches: &[HeadCache], targets: &[&TargetSet], theta: Option<f64>, h: usize, w: usize) -> Vec<bool> {
    let hw = h * w;
    let mut sig: Vec<bool> = trunk.layers.iter().flat_map(|(_, y, _)| y.iter().map(|&v| v > 0.0)).collect();
    sig.extend(trunk.shared.iter().map(|&v| v > 0.0));
    for (head, cache) in model.heads.iter().zip(caches) {
        sig.extend(cache.act.iter().map(|&v| v > 0.0));
        let k = head.classes.len();
        let rows = k + REG_CHANNELS;
        for (b, t) in targets.iter().enumerate() {
            let ht = t.head_targets(&head.classes);
            let o = &cache.out[b * rows * hw..(b + 1) * rows * hw];
            if let Some(theta) = theta {
                sig.extend(o[..k * hw].iter().map(|&v| ops::sigmoid(v) > theta));
            }
            for (ch, (p, t)) in o[k * hw..].iter().zip(&ht.regression).enumerate() {
                if ht.mask[ch % hw] {
                    sig.push(p > t);
                }
            }
        }
    }
    sig
}

/// Result of [`grad_check_model`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose stencil could not avoid a non-smooth point.
    pub skipped: usize,
}

/// Toy architecture used by the finite-difference harness: 6×6 grid, three
/// input channels, two base heads and one novel head.
pub fn toy_model(seed: u64) -> Result<Model> {
    let arch = ArchSpec {
        in_channels: 3,
        extractor: vec![
            ConvSpec { width: 3, stride: 1 },
            ConvSpec { width: 4, stride: 2 },
            ConvSpec { width: 4, stride: 2 },
        ],
        shared_width: 4,
        head_width: 3,
        base_heads: vec![vec![0], vec![1, 2]],
        novel_policy: NovelPolicy::PerClass,
        merge_into: BTreeMap::new(),
    };
    add_novel_head(&init_model(&arch, seed)?, 3, seed)
}

/// Denominator floor of the model-level relative error: the loss difference
/// carries roundoff near 1e-10, so entries below this magnitude compare
/// absolutely.
pub const MODEL_GRAD_FLOOR: f64 = 1e-3;

/// Largest relative error between [`forward_backward`] gradients and central
/// differences of [`forward_loss`] over every trainable scalar of a toy model
/// with all groups trainable.
///
/// Focal cases use random positives and regression targets. SAB cases use
/// positive-free targets (the positive weight is detached, so differences
/// through it are not comparable) with θ placed in the widest score gap so
/// that no cell changes pool under the perturbation. Each entry uses the
/// largest of `eps`, `eps / 10` whose stencil keeps every non-smooth point on
/// its side; entries where neither does are counted as skipped.
pub fn grad_check_model(case_seed: u64, eps: f64, kind: ClsLossKind) -> Result<GradCheck> {
    use crate::bevgrid::Positive;
    if !(1e-8..=1e-4).contains(&eps) {
        return Err(Error::Config(format!("finite-difference step {eps} outside [1e-8, 1e-4]")));
    }
    let mut rng = rng_for(case_seed, "gradcheck/model");
    let mut model = toy_model(case_seed)?;
    // move weights and BN buffers away from their initial values
    for p in &mut model.params {
        for v in &mut p.data {
            *v += rng.random_range(-0.1..0.1);
        }
        if p.name.ends_with("running_var") {
            p.data.iter_mut().for_each(|v| *v = v.abs() + 0.5);
        }
    }
    let (h, w, n_cls, batch) = (6, 6, 4, 2);
    let hw = h * w;
    let grids: Vec<FeatureGrid> = (0..batch)
        .map(|_| FeatureGrid {
            channels: 3,
            height: h,
            width: w,
            data: (0..3 * hw).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    let targets: Vec<TargetSet> = (0..batch)
        .map(|_| {
            let mut heatmaps = vec![0.0; n_cls * hw];
            let mut positives = Vec::new();
            if kind == ClsLossKind::Focal {
                for c in 0..n_cls {
                    for k in 0..hw {
                        if rng.random_bool(0.1) {
                            heatmaps[c * hw + k] = 1.0;
                            let mut record = [0.0; REG_CHANNELS];
                            record.iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
                            positives.push(Positive {
                                class_id: c as ClassId,
                                row: k / w,
                                col: k % w,
                                record,
                                num_points: 10,
                                box_index: 0,
                            });
                        }
                    }
                }
            }
            TargetSet {
                num_classes: n_cls,
                height: h,
                width: w,
                heatmaps,
                ignore: vec![false; n_cls * hw],
                positives,
            }
        })
        .collect();
    let inputs: Vec<&FeatureGrid> = grids.iter().collect();
    let tref: Vec<&TargetSet> = targets.iter().collect();
    let mask = FreezeMask {
        setting: 2,
        trainable: [true; 4],
        sab: kind == ClsLossKind::Sab,
    };
    let mut cfg = LossConfig {
        kind,
        ..LossConfig::default()
    };
    if kind == ClsLossKind::Sab {
        let out = forward_backward(&model, &inputs, &tref, &mask, &cfg)?;
        let mut scores: Vec<f64> = out
            .outputs
            .iter()
            .flat_map(|o| o.heads.iter().flat_map(|hd| hd.heatmap.iter().copied()))
            .collect();
        scores.sort_by(f64::total_cmp);
        let mid = scores.len() / 2;
        let (lo, hi) = (scores.len() / 4, 3 * scores.len() / 4);
        let best = (lo..hi).max_by(|&a, &b| (scores[a + 1] - scores[a]).total_cmp(&(scores[b + 1] - scores[b]))).unwrap_or(mid);
        cfg.sab.theta = 0.5 * (scores[best] + scores[best + 1]);
    }
    let step = forward_backward(&model, &inputs, &tref, &mask, &cfg)?;
    let theta = (kind == ClsLossKind::Sab).then_some(cfg.sab.theta);
    let probe = |model: &Model| run(model, &inputs, &tref, &mask, &cfg, Pass::Probe(theta)).map(|(s, sig)| (s.loss.total, sig));
    let base_sig = probe(&model)?.1;
    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for i in 0..model.params.len() {
        if model.params[i].is_buffer() {
            continue;
        }
        let name = model.params[i].name.clone();
        let analytic = step
            .grads
            .0
            .get(&name)
            .ok_or_else(|| Error::Contract(format!("no gradient for trainable {name}")))?;
        for j in 0..model.params[i].data.len() {
            let orig = model.params[i].data[j];
            let mut numeric = None;
            for h in [eps, eps / 10.0] {
                let mut vals = [0.0; 4];
                let mut smooth = true;
                for (v, d) in vals.iter_mut().zip([h, -h, 2.0 * h, -2.0 * h]) {
                    model.params[i].data[j] = orig + d;
                    let (loss, sig) = probe(&model)?;
                    *v = loss;
                    smooth &= sig == base_sig;
                }
                if smooth {
                    // fourth-order central stencil
                    numeric = Some((8.0 * (vals[0] - vals[1]) - (vals[2] - vals[3])) / (12.0 * h));
                    break;
                }
            }
            model.params[i].data[j] = orig;
            match numeric {
                Some(n) => {
                    report.checked += 1;
                    report.max_rel_error = report.max_rel_error.max(crate::loss::relative_error(analytic[j], n, MODEL_GRAD_FLOOR));
                }
                None => report.skipped += 1,
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
