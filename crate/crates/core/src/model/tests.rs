use super::checkpoint::{from_bytes, group_hash, to_bytes};
use super::*;
use crate::bevgrid::{encode_targets, voxelize, GridSpec};
use crate::geometry::{ClassRole, ClassTable, SceneFrame};
use crate::synthgen::{generate_dataset, WorldSpec};

fn random_grid(seed: u64, c: usize, h: usize, w: usize) -> FeatureGrid {
    let mut rng = rng_for(seed, "test/grid");
    FeatureGrid {
        channels: c,
        height: h,
        width: w,
        data: (0..c * h * w).map(|_| rng.random_range(0.0..1.5)).collect(),
    }
}

fn six_class_table() -> ClassTable {
    ClassTable::new([
        ("car", ClassRole::Base),
        ("pedestrian", ClassRole::Base),
        ("bicycle", ClassRole::Base),
        ("traffic_cone", ClassRole::Base),
        ("police", ClassRole::Novel),
        ("stroller", ClassRole::Novel),
    ])
    .unwrap()
}

#[test]
fn init_is_deterministic() {
    let a = init_model(&ArchSpec::default(), 5).unwrap();
    let b = init_model(&ArchSpec::default(), 5).unwrap();
    assert_eq!(to_bytes(&a), to_bytes(&b));
    let c = init_model(&ArchSpec::default(), 6).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn initial_scores_sit_near_the_prior() {
    let m = add_novel_head(&init_model(&ArchSpec::default(), 1).unwrap(), 4, 1).unwrap();
    let spec = WorldSpec {
        num_instances: 60,
        ..WorldSpec::default()
    };
    let d = generate_dataset(&spec).unwrap();
    let mut grids = vec![random_grid(2, 5, 40, 40)];
    grids.push(voxelize(&d.train_frames[0], &GridSpec::default()));
    for g in &grids {
        let out = m.predict(&[g]).unwrap();
        for head in &out[0].heads {
            assert!(head.heatmap.iter().all(|&s| s > 0.001 && s < 0.1));
        }
    }
}

#[test]
fn duplicate_assignment_is_rejected() {
    let arch = ArchSpec {
        base_heads: vec![vec![0, 1], vec![1, 2]],
        ..ArchSpec::default()
    };
    assert!(matches!(init_model(&arch, 0), Err(Error::Config(_))));
    let m = init_model(&ArchSpec::default(), 0).unwrap();
    assert!(matches!(add_novel_head(&m, 2, 0), Err(Error::Config(_))));
    let m = add_novel_head(&m, 4, 0).unwrap();
    assert!(matches!(add_novel_head(&m, 4, 0), Err(Error::Config(_))));
}

#[test]
fn novel_heads_leave_existing_outputs_untouched() {
    let base = init_model(&ArchSpec::default(), 3).unwrap();
    let probe = random_grid(9, 5, 40, 40);
    let before = base.predict(&[&probe]).unwrap().remove(0);
    let mut m = base.clone();
    for (i, c) in [4, 5, 6, 7].into_iter().enumerate() {
        let next = add_novel_head(&m, c, 100 + i as u64).unwrap();
        // every earlier tensor is bitwise unchanged
        assert_eq!(&next.params[..m.params.len()], &m.params[..]);
        assert_eq!(next.num_elements() - m.num_elements(), m.arch.head_template_size());
        m = next;
    }
    let after = m.predict(&[&probe]).unwrap().remove(0);
    assert_eq!(after.heads.len(), 6);
    for (a, b) in before.heads.iter().zip(&after.heads) {
        assert_eq!(a, b);
    }
    let new = &after.heads[2];
    assert_eq!(new.class_ids, vec![4]);
    assert_eq!(new.heatmap.len(), 40 * 40);
    assert_eq!(new.regression.len(), REG_CHANNELS * 40 * 40);
}

#[test]
fn template_size_matches_analytic_count() {
    let arch = ArchSpec::default();
    // conv 32×24×9, BN 4×32, regression 10×32 + 10, heatmap row 32 + 1
    assert_eq!(arch.head_template_size(), 32 * 24 * 9 + 4 * 32 + 10 * 32 + 10 + 33);
}

#[test]
fn single_and_merged_policies() {
    let probe = random_grid(4, 5, 16, 16);
    for policy in [NovelPolicy::SingleHead, NovelPolicy::MergedIntoBase] {
        let arch = ArchSpec {
            novel_policy: policy,
            merge_into: BTreeMap::from([(5, 0)]),
            ..ArchSpec::default()
        };
        let base = init_model(&arch, 1).unwrap();
        let before = base.predict(&[&probe]).unwrap().remove(0);
        let m = add_novel_head(&add_novel_head(&base, 4, 1).unwrap(), 5, 1).unwrap();
        m.validate().unwrap();
        let after = m.predict(&[&probe]).unwrap().remove(0);
        match policy {
            NovelPolicy::SingleHead => {
                assert_eq!(m.heads.len(), 3);
                assert_eq!(m.heads[2].classes, vec![4, 5]);
                assert_eq!(before.heads, after.heads[..2].to_vec());
            }
            _ => {
                assert_eq!(m.heads.len(), 2);
                // class 4 is the first novel class: head 0 by ordinal; 5 is pinned to head 0
                assert_eq!(m.heads[0].classes, vec![0, 4, 5]);
                let hw = 16 * 16;
                assert_eq!(after.heads[0].heatmap[..hw], before.heads[0].heatmap[..]);
                assert_eq!(after.heads[0].regression, before.heads[0].regression);
                assert_eq!(after.heads[1], before.heads[1]);
                assert_eq!(m.class_group(4), Group::N);
                assert!(m.param("head.b0.cls4.weight").is_some_and(|p| p.group == Group::N));
            }
        }
    }
}

#[test]
fn freeze_settings_follow_the_table() {
    let rows: [(u8, [bool; 4], bool); 8] = [
        (2, [true, true, true, true], false),
        (3, [true, true, false, true], false),
        (4, [false, true, true, true], false),
        (5, [false, true, false, true], false),
        (6, [false, false, true, true], false),
        (7, [false, false, false, true], false),
        (8, [false, false, true, true], true),
        (9, [false, false, false, true], true),
    ];
    for (s, trainable, sab) in rows {
        let m = apply_freeze(s).unwrap();
        assert_eq!((m.trainable, m.sab), (trainable, sab), "setting {s}");
    }
    for bad in [0, 1, 10] {
        assert!(matches!(apply_freeze(bad), Err(Error::Config(_))));
    }
}

fn fixture_batch(n: usize) -> (Model, Vec<FeatureGrid>, Vec<TargetSet>) {
    let spec = WorldSpec {
        num_instances: 80,
        ..WorldSpec::default()
    };
    let d = generate_dataset(&spec).unwrap();
    let grid = GridSpec::default();
    let table = six_class_table();
    let frames: Vec<&SceneFrame> = d.train_frames.iter().take(n).collect();
    let grids = frames.iter().map(|f| voxelize(f, &grid)).collect();
    let targets = frames.iter().map(|f| encode_targets(f, &grid, &table)).collect();
    let mut m = init_model(&ArchSpec::default(), 7).unwrap();
    m = add_novel_head(&m, 4, 7).unwrap();
    m = add_novel_head(&m, 5, 7).unwrap();
    (m, grids, targets)
}

#[test]
fn gradients_respect_the_mask() {
    let (m, grids, targets) = fixture_batch(2);
    let inputs: Vec<&FeatureGrid> = grids.iter().collect();
    let t: Vec<&TargetSet> = targets.iter().collect();
    for setting in 2..=9u8 {
        let mask = apply_freeze(setting).unwrap();
        let out = forward_backward(&m, &inputs, &t, &mask, &LossConfig::default()).unwrap();
        let expected: BTreeSet<&str> = m
            .params
            .iter()
            .filter(|p| !p.is_buffer() && mask.trains(p.group))
            .map(|p| p.name.as_str())
            .collect();
        let got: BTreeSet<&str> = out.grads.0.keys().map(|s| s.as_str()).collect();
        assert_eq!(got, expected, "setting {setting}");
        if setting == 7 || setting == 9 {
            assert!(out.grads.0.keys().all(|k| m.param(k).unwrap().group == Group::N));
        }
        // running statistics only move for heads that train
        for (name, _) in &out.running {
            let p = m.param(name).unwrap();
            assert!(mask.trains(p.group));
        }
    }
}

#[test]
fn empty_targets_stay_finite() {
    let (m, grids, _) = fixture_batch(1);
    let empty = encode_targets(&SceneFrame::new(0), &GridSpec::default(), &six_class_table());
    for kind in [ClsLossKind::Focal, ClsLossKind::Sab] {
        let cfg = LossConfig {
            kind,
            ..LossConfig::default()
        };
        let out = forward_backward(&m, &[&grids[0]], &[&empty], &apply_freeze(2).unwrap(), &cfg).unwrap();
        assert!(out.loss.total.is_finite());
        assert_eq!(out.loss.regression, 0.0);
        assert!(out.grads.0.values().flatten().all(|g| g.is_finite()));
    }
}

#[test]
fn loss_breakdown_is_consistent() {
    let (m, grids, targets) = fixture_batch(3);
    let inputs: Vec<&FeatureGrid> = grids.iter().collect();
    let t: Vec<&TargetSet> = targets.iter().collect();
    let cfg = LossConfig::default();
    let out = forward_backward(&m, &inputs, &t, &FreezeMask::base_stage(), &cfg).unwrap();
    let l = out.loss;
    assert_eq!(l.total, l.classification + l.lambda * l.regression);
    assert_eq!(forward_loss(&m, &inputs, &t, &FreezeMask::base_stage(), &cfg).unwrap(), l);
}

#[test]
fn shape_mismatch_is_a_contract_error() {
    let (m, grids, targets) = fixture_batch(1);
    let wrong = random_grid(0, 4, 40, 40);
    let mask = FreezeMask::base_stage();
    let cfg = LossConfig::default();
    assert!(matches!(forward_backward(&m, &[&wrong], &[&targets[0]], &mask, &cfg), Err(Error::Contract(_))));
    assert!(matches!(forward_backward(&m, &[&grids[0]], &[], &mask, &cfg), Err(Error::Contract(_))));
    assert!(matches!(m.predict(&[]), Err(Error::Contract(_))));
}

#[test]
fn model_gradients_match_finite_differences() {
    for seed in 0..20 {
        for kind in [ClsLossKind::Focal, ClsLossKind::Sab] {
            let r = grad_check_model(seed, 1e-4, kind).unwrap();
            assert!(r.max_rel_error < 1e-6, "{kind:?} seed {seed}: {r:?}");
            // only entries straddling a ReLU or L1 kink at every step are skipped
            assert!(r.skipped * 50 <= r.checked + r.skipped, "{kind:?} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let (m, _, _) = fixture_batch(1);
    let bytes = to_bytes(&m);
    let back = from_bytes(&bytes).unwrap();
    assert_eq!(back, m);
    assert_eq!(to_bytes(&back), bytes);
    for g in Group::ALL {
        assert_eq!(group_hash(&back, g), group_hash(&m, g));
    }
    assert_ne!(group_hash(&m, Group::E), group_hash(&m, Group::S));
}

#[test]
fn checkpoint_corruption_is_detected() {
    let m = init_model(&ArchSpec::default(), 0).unwrap();
    let bytes = to_bytes(&m);
    let mut flipped = bytes.clone();
    flipped[100] ^= 1;
    assert!(matches!(from_bytes(&flipped), Err(Error::Format(_))));
    assert!(matches!(from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    let dir = tempfile::tempdir().unwrap();
    let err = checkpoint::load(&dir.path().join("missing.ckpt")).unwrap_err();
    assert!(err.to_string().contains("missing.ckpt"));
}

#[test]
fn checkpoint_header_layout() {
    let m = init_model(&ArchSpec::default(), 0).unwrap();
    let bytes = to_bytes(&m);
    assert_eq!(&bytes[..4], b"LFSM");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), checkpoint::VERSION);
    let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    assert_eq!(crc, crc32fast::hash(&bytes[..bytes.len() - 4]));
}
