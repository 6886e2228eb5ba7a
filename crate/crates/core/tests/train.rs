use fusmae::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use fusmae::optim::*;
use fusmae::train::*;
use fusmae::{DataConfig, Dataset, Error, GradMap, ModelConfig, ParamStore, Tensor};
use proptest::prelude::*;

fn scalar_store(theta: f64, decay: bool) -> (ParamStore<f64>, fusmae::ParamId) {
    let mut store = ParamStore::new();
    let id = store.add("theta", Tensor::scalar(theta), decay);
    (store, id)
}

fn grad(id: fusmae::ParamId, g: f64) -> GradMap<f64> {
    let mut m = GradMap::new();
    m.insert(id, Tensor::scalar(g));
    m
}

#[test]
fn adamw_first_step_is_minus_lr() {
    let (mut store, id) = scalar_store(0.0, true);
    let hyper = AdamHyper {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    let mut st = OptimizerState::new(&store, hyper);
    adamw_step(&mut store, &grad(id, 1.0), &mut st, 0.1).unwrap();
    assert!((store.get(id).item() + 0.1).abs() < 1e-8);
}

#[test]
fn decoupled_decay_with_zero_gradient() {
    let (mut store, id) = scalar_store(2.0, true);
    let hyper = AdamHyper {
        weight_decay: 0.1,
        ..AdamHyper::default()
    };
    let mut st = OptimizerState::new(&store, hyper);
    adamw_step(&mut store, &grad(id, 0.0), &mut st, 0.1).unwrap();
    assert_eq!(store.get(id).item(), 2.0 * (1.0 - 0.01));
    // Parameters without the decay flag are left alone.
    let (mut store, id) = scalar_store(2.0, false);
    let mut st = OptimizerState::new(&store, hyper);
    adamw_step(&mut store, &grad(id, 0.0), &mut st, 0.1).unwrap();
    assert_eq!(store.get(id).item(), 2.0);
}

/// Scalar AdamW written out from the recurrence, with its own bias
/// correction products.
fn recurrence_oracle(theta0: f64, grads: &[f64], lrs: &[f64], h: AdamHyper) -> Vec<f64> {
    let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
    let (mut b1t, mut b2t) = (1.0, 1.0);
    let mut out = Vec::new();
    for (g, lr) in grads.iter().zip(lrs) {
        b1t *= h.beta1;
        b2t *= h.beta2;
        m = h.beta1 * m + (1.0 - h.beta1) * g;
        v = h.beta2 * v + (1.0 - h.beta2) * g * g;
        let step = (m / (1.0 - b1t)) / ((v / (1.0 - b2t)).sqrt() + h.eps);
        theta = theta * (1.0 - lr * h.weight_decay) - lr * step;
        out.push(theta);
    }
    out
}

#[test]
fn adamw_matches_200_step_recurrence() {
    let h = AdamHyper::default();
    let sched = Schedule::new(0.01, 20, 200).unwrap();
    let grads: Vec<f64> = (0..200).map(|t| (t as f64 * 0.37).sin() + 0.3).collect();
    let lrs: Vec<f64> = (0..200).map(|t| sched.lr_at(t)).collect();
    let oracle = recurrence_oracle(1.5, &grads, &lrs, h);
    let (mut store, id) = scalar_store(1.5, true);
    let mut st = OptimizerState::new(&store, h);
    let mut worst = 0.0f64;
    for t in 0..200 {
        adamw_step(&mut store, &grad(id, grads[t]), &mut st, lrs[t]).unwrap();
        let a = store.get(id).item();
        worst = worst.max((a - oracle[t]).abs() / oracle[t].abs().max(1e-12));
    }
    assert!(worst <= 1e-10, "relative error {worst:e}");
}

#[test]
fn adamw_rejects_partial_gradients() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::scalar(1.0), true);
    store.add("b", Tensor::scalar(1.0), true);
    let mut st = OptimizerState::new(&store, AdamHyper::default());
    let err = adamw_step(&mut store, &grad(a, 1.0), &mut st, 0.1).unwrap_err();
    assert!(matches!(err, Error::ParamMismatch(_)));
}

#[test]
fn schedule_landmarks() {
    let s = Schedule::new(1.5625e-4, 30, 300).unwrap();
    assert_eq!(s.lr_at(0), 0.0);
    assert_eq!(s.lr_at(30), 1.5625e-4);
    assert!((s.lr_at(165) - 1.5625e-4 / 2.0).abs() < 1e-18);
    assert!(s.lr_at(300).abs() < 1e-20);
    // Both sides of the warmup boundary agree in the limit.
    let left = 1.5625e-4 * 29.999 / 30.0;
    assert!((left - s.lr_at(30)).abs() < 1e-8);
    assert!(Schedule::new(1e-3, 10, 10).is_err());
    assert!(Schedule::new(0.0, 1, 10).is_err());
    let e = Schedule::from_epochs(1e-3, 1, 10, 5).unwrap();
    assert_eq!((e.warmup_steps, e.total_steps), (5, 50));
}

proptest! {
    #[test]
    fn schedule_is_bounded_and_monotone_after_warmup(warm in 0usize..50, extra in 1usize..300, base in 1e-6f64..1.0) {
        let s = Schedule::new(base, warm, warm + extra).unwrap();
        let mut prev = f64::INFINITY;
        for t in 0..=warm + extra {
            let lr = s.lr_at(t);
            prop_assert!((0.0..=base).contains(&lr));
            if t >= warm {
                prop_assert!(lr <= prev);
                prev = lr;
            }
        }
    }
}

fn tiny_setup() -> (ModelConfig, TrainConfig, Dataset) {
    let mc = ModelConfig::minimal();
    let dc = DataConfig {
        height: mc.height,
        width: mc.width,
        c1: mc.c1,
        c2: mc.c2,
        ..DataConfig::default()
    };
    let tc = TrainConfig {
        steps: 12,
        batch_size: 4,
        base_lr: 1e-3,
        warmup_steps: 2,
        seed: 5,
        ..TrainConfig::default()
    };
    (mc, tc, Dataset::generate(&dc, 10, 3).unwrap())
}

#[test]
fn training_is_deterministic() {
    let (mc, tc, data) = tiny_setup();
    let (a, ta) = pretrain_loop(&data, &mc, &tc).unwrap();
    let (b, tb) = pretrain_loop(&data, &mc, &tc).unwrap();
    assert_eq!(ta, tb);
    assert!(a.model.store.bit_equal(&b.model.store));
    assert_eq!(ta.len(), 12);
    assert!(ta.iter().all(|r| r.loss.is_finite()));
    let other = pretrain_loop(&data, &mc, &TrainConfig { seed: 6, ..tc }).unwrap().1;
    assert_ne!(ta, other);
}

#[test]
fn batches_cover_each_epoch_without_repeats() {
    let (mc, tc, _) = tiny_setup();
    let t = Trainer::new(&mc, &tc).unwrap();
    // 10 samples, batch 4: two batches per epoch, two samples dropped.
    let mut seen: Vec<usize> = (0..2).flat_map(|s| t.batch_indices(10, s).unwrap()).collect();
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), 8);
    assert_ne!(t.batch_indices(10, 0).unwrap(), t.batch_indices(10, 2).unwrap());
    assert!(t.batch_indices(3, 0).is_err());
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let (mc, tc, data) = tiny_setup();
    let (full, trace) = pretrain_loop(&data, &mc, &tc).unwrap();

    let mut first = Trainer::new(&mc, &tc).unwrap();
    let mut head = Vec::new();
    for _ in 0..5 {
        head.push(first.train_step(&data).unwrap());
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.fmck");
    first.checkpoint().save(&path).unwrap();
    drop(first);

    let mut resumed = Trainer::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(resumed.step, 5);
    let tail = resumed.run(&data, |_, _| Ok(())).unwrap();
    head.extend(tail);
    assert_eq!(head, trace);
    assert!(resumed.model.store.bit_equal(&full.model.store));
    assert_eq!(resumed.checkpoint().to_bytes(), full.checkpoint().to_bytes());
}

#[test]
fn checkpoint_bytes_round_trip() {
    let (mc, tc, data) = tiny_setup();
    let mut t = Trainer::new(&mc, &tc).unwrap();
    t.train_step(&data).unwrap();
    let bytes = t.checkpoint().to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, t.checkpoint());
    assert_eq!(back.to_bytes(), bytes);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.fmck");
    back.save(&p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), bytes);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let (mc, tc, _) = tiny_setup();
    let bytes = Trainer::new(&mc, &tc).unwrap().checkpoint().to_bytes();
    for cut in [0, 3, 6, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Corrupt(_))));
    let mut magic = bytes.clone();
    magic[1] = b'?';
    assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::Corrupt(_))));
    let mut ver = bytes.clone();
    ver[4..6].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&ver), Err(Error::VersionMismatch { .. })));
}

#[test]
fn parameter_table_mismatch_is_reported() {
    let (mc, tc, _) = tiny_setup();
    let mut ck = Trainer::new(&mc, &tc).unwrap().checkpoint();
    ck.params.pop();
    assert!(matches!(ck.restore_model(), Err(Error::ParamMismatch(_))));
    let mut ck = Trainer::new(&mc, &tc).unwrap().checkpoint();
    ck.params[0].0 = "renamed".into();
    assert!(matches!(ck.restore_model(), Err(Error::ParamMismatch(_))));
    // A config that builds a different architecture no longer fits the table.
    let mut ck = Trainer::new(&mc, &tc).unwrap().checkpoint();
    ck.model.variant = fusmae::Variant::Xad;
    assert!(matches!(ck.restore_model(), Err(Error::ParamMismatch(_))));
}

#[test]
fn dataset_shape_mismatch_is_a_config_error() {
    let (mc, tc, _) = tiny_setup();
    let mut t = Trainer::new(&mc, &tc).unwrap();
    let wrong = Dataset::generate(&DataConfig::default(), 8, 1).unwrap();
    assert!(matches!(t.train_step(&wrong), Err(Error::Config(_))));
}

#[test]
fn trace_csv_round_trip() {
    let trace = vec![
        TraceRow { step: 0, lr: 0.0, loss: 1.2345678901234 },
        TraceRow { step: 1, lr: 1.5625e-4 / 3.0, loss: 0.1 + 0.2 },
    ];
    let csv = trace_csv(&trace);
    assert!(csv.starts_with("step,lr,loss\n"));
    assert_eq!(parse_trace_csv(&csv).unwrap(), trace);
    assert!(parse_trace_csv("a,b\n").is_err());
    let (a, b) = smoothed_endpoints(&trace, 1).unwrap();
    assert_eq!((a, b), (trace[0].loss, trace[1].loss));
    assert!(smoothed_endpoints(&trace, 3).is_none());
}

#[test]
fn train_config_kv_round_trip() {
    let tc = TrainConfig {
        base_lr: 1.0 / 3.0,
        seed: 99,
        ..TrainConfig::default()
    };
    assert_eq!(TrainConfig::from_kv(&tc.to_kv()).unwrap(), tc);
    assert_ne!(derive_seed(1, 1), derive_seed(1, 2));
    assert_ne!(derive_seed(1, 1), derive_seed(2, 1));
}
