mod common;

use std::fs;

use common::{samples, tiny_scene};
use ctt_core::checkpoint::Archive;
use ctt_core::config::TrainConfig;
use ctt_core::model::BackboneConfig;
use ctt_core::trainer::{checkpoint_name, run, run_from, TrainData, Trainer};
use ctt_core::{Error, SceneSpec, SplitSpec, Topology};

fn tiny_cfg(topology: Topology) -> TrainConfig {
    let backbone = BackboneConfig {
        feature_dim: 8,
        stride: 2,
        channels: vec![4, 6],
        num_classes: 4,
        init_seed: 5,
    };
    TrainConfig {
        topology,
        max_iters: 12,
        batch_labeled: 2,
        batch_unlabeled: 2,
        crop: (12, 12),
        base_lr: 0.05,
        bank_capacity: 3,
        bank_dim: 8,
        backbone,
        ..TrainConfig::default()
    }
}

/// Background plus one shape class, so every teacher soon has correct
/// pixels of each class and the banks fill.
fn two_class_cfg(topology: Topology, max_iters: usize) -> TrainConfig {
    let mut cfg = tiny_cfg(topology);
    cfg.backbone.num_classes = 2;
    cfg.max_iters = max_iters;
    cfg.ema_decay = 0.5;
    cfg.base_lr = 0.1;
    cfg.crop = (24, 24);
    cfg.bank_capacity = 2;
    cfg
}

fn two_class_data() -> TrainData {
    let spec = SceneSpec { num_classes: 2, ..tiny_scene() };
    let pool = samples(&spec, 16);
    let val = samples(&SceneSpec { seed: 99, ..spec }, 4);
    TrainData::from_pool(&pool, val, &SplitSpec { labeled_fraction: 0.5, seed: 1 }).unwrap()
}

fn tiny_data() -> TrainData {
    let pool = samples(&tiny_scene(), 24);
    let val = samples(&SceneSpec { seed: 99, ..tiny_scene() }, 4);
    TrainData::from_pool(&pool, val, &SplitSpec { labeled_fraction: 0.25, seed: 1 }).unwrap()
}

#[test]
fn zero_unsupervised_weights_reproduce_supervised_trajectory() {
    let data = tiny_data();
    let mut ctt = tiny_cfg(Topology::CrossTeacher);
    ctt.weights.ct = 0.0;
    ctt.weights.hc = 0.0;
    ctt.weights.lc = 0.0;
    let sup = TrainConfig { topology: Topology::SupervisedOnly, ..ctt.clone() };
    let mut a = Trainer::new(&ctt, data.labeled.len()).unwrap();
    let mut b = Trainer::new(&sup, data.labeled.len()).unwrap();
    for _ in 0..ctt.max_iters {
        let ra = a.step(&data).unwrap();
        let rb = b.step(&data).unwrap();
        assert_eq!(ra.sup.to_bits(), rb.sup.to_bits());
        for (pa, pb) in a.pairs().iter().zip(b.pairs()) {
            assert_eq!(pa.student.data, pb.student.data);
        }
    }
    assert!(a.banks().iter().all(|b| b.total_len() > 0));
}

#[test]
fn teachers_follow_the_ema_recurrence_of_recorded_students() {
    let data = tiny_data();
    let cfg = tiny_cfg(Topology::CrossTeacher);
    let mut t = Trainer::new(&cfg, data.labeled.len()).unwrap();
    let mut replay: Vec<Vec<f64>> = t
        .pairs()
        .iter()
        .map(|p| p.teacher.data.iter().map(|&v| v as f64).collect())
        .collect();
    let a = cfg.ema_decay;
    for _ in 0..cfg.max_iters {
        t.step(&data).unwrap();
        for (r, p) in replay.iter_mut().zip(t.pairs()) {
            for (rv, &s) in r.iter_mut().zip(&p.student.data) {
                *rv = a * *rv + (1.0 - a) * s as f64;
            }
            for (rv, &tv) in r.iter().zip(&p.teacher.data) {
                assert!((rv - tv as f64).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn contrastive_terms_stay_zero_until_banks_fill() {
    let data = two_class_data();
    let cfg = two_class_cfg(Topology::CrossTeacher, 150);
    let out = run(&cfg, &data, None).unwrap();
    let first_full = out.records.iter().position(|r| r.banks_full).expect("banks fill");
    assert!(first_full > 0);
    for r in &out.records[..first_full] {
        assert_eq!((r.hc, r.lc, r.weighted.hc, r.weighted.lc), (0.0, 0.0, 0.0, 0.0));
    }
    assert!(out.records[first_full..].iter().all(|r| r.banks_full));
    assert!(out.records[first_full..].iter().any(|r| r.hc > 0.0));
}

#[test]
fn student_a_loss_ignores_teacher_a() {
    let data = tiny_data();
    let cfg = tiny_cfg(Topology::CrossTeacher);
    let mut t = Trainer::new(&cfg, data.labeled.len()).unwrap();
    for _ in 0..4 {
        t.step(&data).unwrap();
    }
    let unl: Vec<_> = data.unlabeled[..4]
        .iter()
        .map(|s| ctt_core::data::crop(s, 0, 0, 12, 12).unwrap())
        .collect();
    let before = t.unsupervised_losses(&unl).unwrap();
    for v in t.pairs_mut()[0].teacher.data.iter_mut() {
        *v = -*v * 1.5 + 0.01;
    }
    let after = t.unsupervised_losses(&unl).unwrap();
    assert_eq!(before[0].to_bits(), after[0].to_bits());
    assert_ne!(before[1], after[1]);
}

#[test]
fn identical_seeds_give_identical_logs() {
    let data = tiny_data();
    let cfg = tiny_cfg(Topology::CrossTeacher);
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    run(&cfg, &data, Some(d1.path())).unwrap();
    run(&cfg, &data, Some(d2.path())).unwrap();
    let l1 = fs::read(d1.path().join("metrics.jsonl")).unwrap();
    let l2 = fs::read(d2.path().join("metrics.jsonl")).unwrap();
    assert_eq!(l1, l2);
    assert_eq!(String::from_utf8(l1).unwrap().lines().count(), cfg.max_iters);
    let other = TrainConfig { seed: 1, ..cfg };
    let d3 = tempfile::tempdir().unwrap();
    run(&other, &data, Some(d3.path())).unwrap();
    assert_ne!(l2, fs::read(d3.path().join("metrics.jsonl")).unwrap());
}

#[test]
fn doubling_ct_weight_doubles_its_contribution() {
    let data = tiny_data();
    let one = tiny_cfg(Topology::CrossTeacher);
    let mut two = one.clone();
    two.weights.ct = 2.0;
    let mut a = Trainer::new(&one, data.labeled.len()).unwrap();
    let mut b = Trainer::new(&two, data.labeled.len()).unwrap();
    let ra = a.step(&data).unwrap();
    let rb = b.step(&data).unwrap();
    assert!(ra.ct > 0.0);
    assert_eq!(rb.weighted.ct, 2.0 * ra.weighted.ct);
}

#[test]
fn resuming_from_a_checkpoint_continues_the_same_run() {
    let data = tiny_data();
    let cfg = tiny_cfg(Topology::CrossTeacher);
    let straight = run(&cfg, &data, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let half = TrainConfig { checkpoint_interval: 5, ..cfg.clone() };
    run(&half, &data, Some(dir.path())).unwrap();
    let resumed = Trainer::load(&dir.path().join("checkpoints").join(checkpoint_name(5))).unwrap();
    assert_eq!(resumed.iteration(), 5);
    let rest = run_from(resumed, &data, None).unwrap();
    assert_eq!(rest.records[..], straight.records[5..]);
    for (a, b) in rest.trainer.pairs().iter().zip(straight.trainer.pairs()) {
        assert_eq!(a, b);
    }
    for (a, b) in rest.trainer.banks().iter().zip(straight.trainer.banks()) {
        for c in 0..a.num_classes() {
            assert_eq!(a.queue(c), b.queue(c));
        }
    }
}

#[test]
fn zero_iterations_emit_only_the_initial_checkpoint() {
    let data = tiny_data();
    let cfg = TrainConfig { max_iters: 0, ..tiny_cfg(Topology::CrossTeacher) };
    let dir = tempfile::tempdir().unwrap();
    let out = run(&cfg, &data, Some(dir.path())).unwrap();
    assert_eq!(out.checkpoints, vec![dir.path().join("checkpoints").join(checkpoint_name(0))]);
    assert!(out.records.is_empty());
    assert_eq!(fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap(), "");
    let ar = Archive::read(&out.checkpoints[0]).unwrap();
    assert_eq!(ar.manifest.iteration, 0);
    assert_eq!(ar.banks.len(), 2);
}

#[test]
fn self_training_first_phase_never_sees_unlabeled_images() {
    let data = tiny_data();
    let mut other = data.clone();
    other.unlabeled = samples(&SceneSpec { seed: 1234, ..tiny_scene() }, 10);
    let cfg = tiny_cfg(Topology::SelfTraining);
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let o1 = run(&cfg, &data, Some(d1.path())).unwrap();
    let o2 = run(&cfg, &other, Some(d2.path())).unwrap();
    let p1 = fs::read(d1.path().join("checkpoints/phase1.ckpt")).unwrap();
    let p2 = fs::read(d2.path().join("checkpoints/phase1.ckpt")).unwrap();
    assert_eq!(p1, p2);
    let half = cfg.max_iters / 2;
    assert!(o1.records[..half].iter().all(|r| r.ct == 0.0 && r.pseudo_accuracy.is_none()));
    assert!(o1.records[half..].iter().all(|r| r.ct > 0.0));
    assert_ne!(o1.records[half..], o2.records[half..]);
    let phase1 = Trainer::load(&d1.path().join("checkpoints/phase1.ckpt")).unwrap();
    assert_eq!(phase1.pairs()[0].student, o1.trainer.frozen()[0]);
}

#[test]
fn mutual_training_leaves_teachers_untouched() {
    let data = tiny_data();
    let cfg = tiny_cfg(Topology::Mutual);
    let t0 = Trainer::new(&cfg, data.labeled.len()).unwrap();
    let out = run(&cfg, &data, None).unwrap();
    for (a, b) in out.trainer.pairs().iter().zip(t0.pairs()) {
        assert_eq!(a.teacher, b.teacher);
        assert_ne!(a.student, b.student);
    }
    assert!(out.records.iter().all(|r| r.ct > 0.0));
}

#[test]
fn mean_teacher_without_unlabeled_data_is_supervised_training() {
    let mut data = tiny_data();
    data.unlabeled.clear();
    let mt = tiny_cfg(Topology::MeanTeacher);
    let sup = TrainConfig { topology: Topology::SupervisedOnly, ..mt.clone() };
    let a = run(&mt, &data, None).unwrap();
    let b = run(&sup, &data, None).unwrap();
    for (x, y) in a.trainer.pairs().iter().zip(b.trainer.pairs()) {
        assert_eq!(x.student.data, y.student.data);
    }
}

#[test]
fn every_topology_and_three_pairs_run() {
    let data = tiny_data();
    for topo in Topology::ALL {
        let cfg = TrainConfig { max_iters: 6, ..tiny_cfg(topo) };
        let out = run(&cfg, &data, None).unwrap();
        assert_eq!(out.records.len(), 6, "{}", topo.name());
        assert!(out.final_miou.is_some());
        if topo == Topology::SupervisedOnly {
            assert!(out.records.iter().all(|r| r.weighted.ct == 0.0 && r.weighted.hc == 0.0 && r.weighted.lc == 0.0));
        }
    }
    let cfg = TrainConfig { pairs: 3, ..two_class_cfg(Topology::CrossTeacher, 150) };
    let data = two_class_data();
    let out = run(&cfg, &data, None).unwrap();
    assert_eq!(out.trainer.pairs().len(), 3);
    assert_eq!(out.trainer.banks().len(), 3);
    assert!(out.records.iter().any(|r| r.banks_full && r.lc > 0.0));
}

#[test]
fn exploding_learning_rate_aborts_with_a_diagnostic() {
    let data = tiny_data();
    let cfg = TrainConfig { base_lr: 1e30, max_iters: 30, ..tiny_cfg(Topology::CrossTeacher) };
    let dir = tempfile::tempdir().unwrap();
    match run(&cfg, &data, Some(dir.path())) {
        Err(Error::Divergence { iter, .. }) => {
            let log = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
            let last = log.lines().last().unwrap();
            assert!(last.contains("\"diverged\":true"), "{last}");
            assert!(iter >= 1);
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.final_miou)),
    }
}

#[test]
fn corrupted_checkpoint_is_an_integrity_error() {
    let data = tiny_data();
    let cfg = TrainConfig { max_iters: 2, ..tiny_cfg(Topology::CrossTeacher) };
    let dir = tempfile::tempdir().unwrap();
    let out = run(&cfg, &data, Some(dir.path())).unwrap();
    let path = out.checkpoints.last().unwrap();
    let mut bytes = fs::read(path).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 0xff;
    fs::write(path, bytes).unwrap();
    match Trainer::load(path) {
        Err(Error::Integrity { reason, .. }) => assert!(reason.contains("iteration 2"), "{reason}"),
        other => panic!("unexpected {:?}", other.map(|t| t.iteration())),
    }
}
