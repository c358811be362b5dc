use super::*;
use crate::bevgrid::GridSpec;
use crate::geometry::{bev_overlap, Box3D, ClassId};
use crate::ingest::build_episode;
use crate::model::checkpoint::{group_hash, to_bytes};
use crate::model::{init_model, ArchSpec, Group};
use crate::synthgen::{generate_dataset, WorldSpec};
use proptest::prelude::*;

fn small_world(seed: u64) -> Dataset {
    generate_dataset(&WorldSpec {
        num_instances: 400,
        seed,
        ..WorldSpec::default()
    })
    .unwrap()
}

fn coarse(mut cfg: TrainConfig) -> TrainConfig {
    cfg.grid = GridSpec::square(10.0, 1.0);
    cfg
}

fn novel_ids(d: &Dataset) -> Vec<ClassId> {
    d.class_table.novel_ids()
}

#[test]
fn schedule_examples() {
    let cfg = TrainConfig::base(0);
    let total = 1000;
    assert_eq!(lr_at(&cfg, 0, total), 1e-4);
    assert_eq!(lr_at(&cfg, 400, total), 1e-3);
    assert_eq!(lr_at(&cfg, total - 1, total), 1e-4);
    let lrs: Vec<f64> = (0..total).map(|s| lr_at(&cfg, s, total)).collect();
    let peak = lrs.iter().cloned().fold(f64::MIN, f64::max);
    assert!((peak - 1e-3).abs() <= 1e-12);
    let ft = TrainConfig::finetune(7, 0);
    assert!((lr_at(&ft, 400, total) - 1e-4).abs() < 1e-18);
    assert!((lr_at(&ft, 0, total) - 1e-5).abs() < 1e-18);
}

proptest! {
    #[test]
    fn schedule_is_unimodal_and_bounded(total in 1usize..3000) {
        let cfg = TrainConfig::base(0);
        let lrs: Vec<f64> = (0..total).map(|s| lr_at(&cfg, s, total)).collect();
        prop_assert_eq!(lrs[0], cfg.min_lr);
        prop_assert_eq!(lrs[total - 1], cfg.min_lr);
        prop_assert!(lrs.iter().all(|&l| l > 0.0 && l >= cfg.min_lr && l <= cfg.max_lr));
        let top = lrs.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        prop_assert!(lrs[..=top].windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(lrs[top..].windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op(seed in 0u64..1000, steps in 1usize..4) {
        let model = init_model(&ArchSpec::default(), seed).unwrap();
        let mut m = model.clone();
        let grads = Gradients(m.params.iter().filter(|p| !p.is_buffer()).map(|p| (p.name.clone(), vec![0.0; p.data.len()])).collect());
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
        for _ in 0..steps {
            opt.step(&mut m, &grads, 1e-3).unwrap();
        }
        prop_assert_eq!(m, model);
    }
}

#[test]
fn adamw_matches_hand_computation() {
    let mut m = init_model(&ArchSpec::default(), 0).unwrap();
    let name = "shared.conv.bias";
    let before = m.param(name).unwrap().data.clone();
    let g: Vec<f64> = (0..before.len()).map(|i| (i as f64 - 10.0) * 0.01).collect();
    let grads = Gradients(BTreeMap::from([(name.to_string(), g.clone())]));
    let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.01);
    let (lr, wd) = (1e-3, 0.01);
    opt.step(&mut m, &grads, lr).unwrap();
    opt.step(&mut m, &grads, lr).unwrap();
    for i in 0..g.len() {
        // constant gradient: bias-corrected moments equal g and g² at every step
        let mut p = before[i];
        for _ in 0..2 {
            p -= lr * (g[i] / (g[i].abs() + 1e-8) + wd * p);
        }
        assert!((m.param(name).unwrap().data[i] - p).abs() < 1e-15);
    }
    // untouched tensors stay put
    let fresh = init_model(&ArchSpec::default(), 0).unwrap();
    assert_eq!(m.param("shared.conv.weight"), fresh.param("shared.conv.weight"));
}

#[test]
fn finetune_without_checkpoint_is_a_config_error() {
    let d = small_world(1);
    let ep = build_episode(&d, &novel_ids(&d), 2, 0).unwrap();
    let cfg = coarse(TrainConfig::finetune(7, 0));
    let r = run_stage(None, StageData::Finetune { dataset: &d, episode: &ep }, &cfg);
    assert!(matches!(r, Err(Error::Config(_))));
    let model = init_model(&ArchSpec::default(), 0).unwrap();
    let r = run_stage(Some(&model), StageData::Base(&d), &cfg);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn validation_frames_are_never_used() {
    let d = small_world(2);
    let mut ep = build_episode(&d, &novel_ids(&d), 2, 0).unwrap();
    let val_id = d.val_frames[0].frame_id;
    ep.shots.values_mut().next().unwrap()[0].frame_refs.push(val_id.to_string());
    assert!(matches!(finetune_frames(&d, &ep), Err(Error::Integrity(_))));
    assert!(matches!(ShotBank::from_episode(&d, &ep), Err(Error::Integrity(_))));
}

#[test]
fn stage_frames_carry_the_right_labels() {
    let d = small_world(3);
    let table = &d.class_table;
    for f in base_frames(&d) {
        assert!(f.boxes.iter().all(|b| table.role(b.class_id) == Some(ClassRole::Base)));
    }
    let ep = build_episode(&d, &novel_ids(&d), 3, 1).unwrap();
    let selected: BTreeSet<u32> = ep.selected_instances().iter().map(|s| s.parse().unwrap()).collect();
    let frames = finetune_frames(&d, &ep).unwrap();
    let refs: BTreeSet<u32> = ep.frame_refs().iter().map(|s| s.parse().unwrap()).collect();
    assert_eq!(frames.iter().map(|f| f.frame_id).collect::<BTreeSet<_>>(), refs);
    let mut seen = BTreeSet::new();
    for f in &frames {
        for (b, &i) in f.boxes.iter().zip(&f.instance_ids) {
            if table.role(b.class_id) == Some(ClassRole::Novel) {
                assert!(selected.contains(&i));
                seen.insert(i);
            }
        }
        // points are untouched: unselected novel objects remain as background
        assert_eq!(f.points, d.train_frame(f.frame_id).unwrap().points);
    }
    assert_eq!(seen, selected);
}

fn bank_for(d: &Dataset, k: usize) -> (EpisodeSpec, ShotBank) {
    let ep = build_episode(d, &novel_ids(d), k, 4).unwrap();
    let bank = ShotBank::from_episode(d, &ep).unwrap();
    (ep, bank)
}

#[test]
fn bank_holds_only_episode_shots() {
    let d = small_world(4);
    let (ep, bank) = bank_for(&d, 3);
    let selected: BTreeSet<u32> = ep.selected_instances().iter().map(|s| s.parse().unwrap()).collect();
    assert!(!bank.is_empty());
    for (class, objs) in &bank.objects {
        for o in objs {
            assert!(selected.contains(&o.instance));
            assert_eq!(o.template.class_id, *class);
            assert!(o.local_points.len() >= crate::ingest::MIN_POINTS);
        }
    }
}

#[test]
fn gt_aug_fills_missing_classes() {
    let d = small_world(5);
    let (_, bank) = bank_for(&d, 3);
    let cfg = GtAugConfig::default();
    let stroller = d.class_table.by_name("stroller").unwrap().id;
    let police = d.class_table.by_name("police").unwrap().id;
    let empty = d.train_frames.iter().find(|f| f.boxes.iter().all(|b| b.class_id != stroller)).unwrap();
    let out = gt_aug(empty, &bank, &cfg, 0);
    let n = out.boxes.iter().filter(|b| b.class_id == stroller).count();
    assert!((1..=2).contains(&n), "{n} strollers");
    assert_eq!(out.boxes[..empty.boxes.len()], empty.boxes[..]);
    assert!(out.synthetic[empty.boxes.len()..].iter().all(|&s| s));

    // two police already present: police untouched
    let template = bank.objects[&police][0].template;
    let placed: Vec<Box3D> = [-6.0, 6.0]
        .into_iter()
        .map(|x| Box3D {
            center: [x, 6.0, template.center[2]],
            yaw: 0.0,
            ..template
        })
        .collect();
    let mut two = d.train_frames[0].filter_labels(|b, _| b.class_id != police && !placed.iter().any(|p| bev_overlap(p, b)));
    for (k, b) in placed.into_iter().enumerate() {
        two.push_box(b, 900_000 + k as u32, false);
    }
    let out = gt_aug(&two, &bank, &cfg, 1);
    let police_boxes = |f: &SceneFrame| f.boxes.iter().filter(|b| b.class_id == police).copied().collect::<Vec<_>>();
    assert_eq!(police_boxes(&out), police_boxes(&two));
}

#[test]
fn pasted_objects_never_overlap() {
    let d = small_world(6);
    let (_, bank) = bank_for(&d, 3);
    let cfg = GtAugConfig {
        min_count: 3,
        ..GtAugConfig::default()
    };
    let mut pasted = 0;
    for i in 0..1000u64 {
        let f = &d.train_frames[i as usize % d.train_frames.len()];
        let out = gt_aug(f, &bank, &cfg, i);
        for a in 0..out.boxes.len() {
            for b in a + 1..out.boxes.len() {
                if out.synthetic[a] || out.synthetic[b] {
                    assert!(!bev_overlap(&out.boxes[a], &out.boxes[b]), "frame {} seed {i}", f.frame_id);
                }
            }
        }
        pasted += out.synthetic.iter().filter(|&&s| s).count();
    }
    assert!(pasted > 1000);
}

fn tiny_arch() -> ArchSpec {
    ArchSpec {
        extractor: vec![
            crate::model::ConvSpec { width: 4, stride: 1 },
            crate::model::ConvSpec { width: 8, stride: 2 },
        ],
        shared_width: 8,
        head_width: 8,
        ..ArchSpec::default()
    }
}

fn quick_base(d: &Dataset, seed: u64) -> (Model, TrainLog) {
    let cfg = TrainConfig {
        epochs: 1,
        ..coarse(TrainConfig::base(seed))
    };
    let m = init_model(&tiny_arch(), seed).unwrap();
    run_stage(Some(&m), StageData::Base(d), &cfg).unwrap()
}

#[test]
fn frozen_groups_stay_bitwise_equal() {
    let d = small_world(7);
    let (base, _) = quick_base(&d, 0);
    let ep = build_episode(&d, &novel_ids(&d), 2, 0).unwrap();
    for setting in [5u8, 7, 9] {
        let cfg = TrainConfig {
            epochs: 2,
            ..coarse(TrainConfig::finetune(setting, 1))
        };
        let (ft, log) = run_stage(Some(&base), StageData::Finetune { dataset: &d, episode: &ep }, &cfg).unwrap();
        assert_eq!(log.records.len(), 2);
        let mask = apply_freeze(setting).unwrap();
        for p in &base.params {
            let q = ft.param(&p.name).unwrap();
            if mask.trains(p.group) && !p.is_buffer() {
                assert_ne!(p, q, "setting {setting}: {} should move", p.name);
            } else if !mask.trains(p.group) {
                assert_eq!(p, q, "setting {setting}: {} should be frozen", p.name);
            }
        }
        for g in [Group::E, Group::S, Group::B] {
            assert_eq!(group_hash(&base, g) == group_hash(&ft, g), !mask.trains(g));
        }
        assert_eq!(ft.novel_classes, novel_ids(&d));
    }
}

#[test]
fn training_is_deterministic() {
    let d = small_world(8);
    let (a, la) = quick_base(&d, 3);
    let (b, lb) = quick_base(&d, 3);
    assert_eq!(to_bytes(&a), to_bytes(&b));
    assert_eq!(la.without_timing(), lb.without_timing());
    let (c, _) = quick_base(&d, 4);
    assert_ne!(to_bytes(&a), to_bytes(&c));
    let ep = build_episode(&d, &novel_ids(&d), 2, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        ..coarse(TrainConfig::finetune(9, 5))
    };
    let run = || run_stage(Some(&a), StageData::Finetune { dataset: &d, episode: &ep }, &cfg).unwrap();
    let (x, lx) = run();
    let (y, ly) = run();
    assert_eq!(to_bytes(&x), to_bytes(&y));
    assert_eq!(lx.without_timing(), ly.without_timing());
    assert!(lx.records.iter().all(|r| r.cls_loss.is_finite() && r.lr > 0.0));
}

#[test]
fn log_lines_carry_every_field() {
    let d = small_world(9);
    let (_, log) = quick_base(&d, 0);
    let line = log.to_jsonl();
    let v: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    for key in ["epoch", "lr", "cls_loss", "reg_loss", "total_loss", "num_pos_mean", "num_hn_mean", "wall_time_s"] {
        assert!(v.get(key).is_some(), "{key}");
    }
}
