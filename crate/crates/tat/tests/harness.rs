use tat::config::{parse_config_with, RunConfig};
use tat::harness::{distill_student, evaluate, load_datasets, train_teacher, train_vanilla};

fn config(extra: &[&str]) -> RunConfig {
    let mut o = vec!["n_train=48", "n_test=24", "image_size=12", "patch_h=6", "patch_w=6", "batch_size=16", "epochs=3", "teacher_epochs=3"];
    o.extend_from_slice(extra);
    parse_config_with("", &o).unwrap()
}

#[test]
fn teacher_learns_two_separable_classes() {
    let cfg = config(&["classes=2", "noise=0", "teacher_epochs=30", "n_train=64"]);
    let (train, test) = load_datasets(&cfg).unwrap();
    let (ckpt, metrics) = train_teacher(&cfg, &train, &test, 0).unwrap();
    let acc = evaluate(&cfg, &ckpt, &train).unwrap();
    assert!(acc > 0.95, "train accuracy {acc}");
    assert_eq!(metrics.epochs.len(), 30);
}

#[test]
fn zero_distillation_weights_reproduce_vanilla() {
    let cfg = config(&["epsilon=0", "beta=0"]);
    let (train, test) = load_datasets(&cfg).unwrap();
    let (teacher, _) = train_teacher(&cfg, &train, &test, 1).unwrap();
    let (a, ma) = distill_student(&cfg, &teacher, &train, &test, 5).unwrap();
    let (b, mb) = train_vanilla(&cfg, &train, &test, 5).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(a.to_bytes(), b.to_bytes());
}

#[test]
fn teacher_is_frozen_and_total_is_the_weighted_sum() {
    let cfg = config(&["preset=imagenet", "delta=0.3", "zeta=0.2", "flip=true", "crop=true"]);
    let (train, test) = load_datasets(&cfg).unwrap();
    let (teacher, _) = train_teacher(&cfg, &train, &test, 1).unwrap();
    let before = teacher.to_bytes();
    let (student, m) = distill_student(&cfg, &teacher, &train, &test, 2).unwrap();
    assert_eq!(teacher.to_bytes(), before);
    assert!(student.params.names().all(|n| !n.starts_with("teacher.")));
    let kd = cfg.kd;
    for e in &m.epochs {
        let sum = kd.alpha * e.loss_task + kd.beta * e.loss_kl + kd.epsilon * e.loss_tat + 0.3 * e.loss_pg + 0.2 * e.loss_ap;
        assert!((sum - e.loss_total).abs() < 1e-5, "{sum} vs {}", e.loss_total);
        assert!(e.loss_kl > 0.0 && e.loss_tat > 0.0 && e.loss_pg > 0.0 && e.loss_ap > 0.0);
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let cfg = config(&["lr=0", "weight_decay=0", "epsilon=1"]);
    let (train, test) = load_datasets(&cfg).unwrap();
    let (teacher, _) = train_teacher(&config(&[]), &train, &test, 1).unwrap();
    let (a, _) = distill_student(&cfg, &teacher, &train, &test, 3).unwrap();
    let (b, _) = distill_student(&config(&["lr=0", "weight_decay=0", "epsilon=1", "epochs=1"]), &teacher, &train, &test, 3).unwrap();
    // batch-norm running statistics still move; learnable tensors must not
    for (name, t) in a.params.iter().filter(|(n, _)| !n.contains("running")) {
        assert_eq!(t, b.params.get(name).unwrap(), "{name}");
    }
}

#[test]
fn tat_loss_decreases_early() {
    let o = ["n_train=128", "n_test=32", "epochs=10", "teacher_epochs=10", "epsilon=1"];
    let cfg = parse_config_with("", &o).unwrap();
    let (train, test) = load_datasets(&cfg).unwrap();
    let (teacher, _) = train_teacher(&cfg, &train, &test, 1).unwrap();
    let mut decreasing = 0;
    for seed in 0..5 {
        let (_, m) = distill_student(&cfg, &teacher, &train, &test, seed).unwrap();
        let l: Vec<f64> = m.epochs.iter().map(|e| e.loss_tat).collect();
        decreasing += usize::from(l.windows(2).all(|w| w[1] < w[0]));
    }
    assert!(decreasing >= 4, "{decreasing} of 5 seeds");
}

#[test]
fn segmentation_reports_mean_iou() {
    let cfg = config(&["task=segmentation", "classes=3", "preset=voc", "epochs=2"]);
    assert_eq!((cfg.delta, cfg.zeta), (0.1, 0.05));
    let (train, test) = load_datasets(&cfg).unwrap();
    let (teacher, _) = train_teacher(&cfg, &train, &test, 0).unwrap();
    let (student, m) = distill_student(&cfg, &teacher, &train, &test, 0).unwrap();
    let miou = evaluate(&cfg, &student, &test).unwrap();
    assert!((0.0..=1.0).contains(&miou));
    assert_eq!(miou, m.final_metric());
    assert!(m.epochs.iter().all(|e| e.loss_pg > 0.0 && e.loss_ap > 0.0 && e.loss_kl == 0.0));
}

#[test]
fn checkpoint_mismatch_is_a_config_error() {
    let cfg = config(&[]);
    let (train, test) = load_datasets(&cfg).unwrap();
    let (student, _) = train_vanilla(&cfg, &train, &test, 0).unwrap();
    let err = distill_student(&cfg, &student, &train, &test, 0).unwrap_err();
    assert!(err.is_validation(), "{err}");
    let wider = config(&["teacher_channels=8"]);
    let (teacher, _) = train_teacher(&cfg, &train, &test, 0).unwrap();
    assert!(evaluate(&wider, &teacher, &test).unwrap_err().is_validation());
}
