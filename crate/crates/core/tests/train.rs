use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use transip::checkpoint::Checkpoint;
use transip::losses::LossWeights;
use transip::model::{ModelConfig, TransIp};
use transip::moldata::*;
use transip::train::*;
use transip::Error;
use transip_tensor::Array;

fn data(count: usize, seed: u64) -> Vec<LabeledMolecule> {
    generate_lj_dataset(&GeneratorConfig { count, seed, ..Default::default() }).unwrap()
}

fn micro() -> ModelConfig {
    ModelConfig { hidden_dim: 16, num_layers: 1, num_heads: 2, ..ModelConfig::default() }
}

#[test]
fn schedule_values() {
    let cfg = TrainConfig::default();
    let total = 1000;
    assert_eq!(cosine_warmup_lr(0, total, &cfg).unwrap(), 0.0);
    assert_eq!(cosine_warmup_lr(10, total, &cfg).unwrap(), 5e-4);
    assert!((cosine_warmup_lr(total, total, &cfg).unwrap() - 5e-6).abs() < 1e-18);
    assert!(cosine_warmup_lr(total + 1, total, &cfg).is_err());
    let expected = 5e-4 * (0.01 + 0.99 * 0.5 * (1.0 + (std::f64::consts::PI * 495.0 / 990.0).cos()));
    assert!((cosine_warmup_lr(505, total, &cfg).unwrap() - expected).abs() < 1e-18);
}

#[test]
fn schedule_is_continuous_at_warmup_end() {
    let cfg = TrainConfig::default();
    // With 100 000 steps the junction sits at step 1000; approach it from both sides.
    let total = 100_000;
    let left = cosine_warmup_lr(999, total, &cfg).unwrap();
    let at = cosine_warmup_lr(1000, total, &cfg).unwrap();
    let right = cosine_warmup_lr(1001, total, &cfg).unwrap();
    assert!((at - 5e-4).abs() < 1e-12);
    assert!((at - left).abs() < 1e-6 && (at - right).abs() < 1e-9);
    // The analytic limit from the left is the base rate.
    let warm = |s: f64| 5e-4 * s / 1000.0;
    assert!((warm(1000.0) - at).abs() < 1e-12);
}

#[test]
fn clipping() {
    let mut g = vec![Array::from_vec(vec![60.0, 80.0])];
    assert_eq!(clip_grad_norm(&mut g, 200.0), 100.0);
    assert_eq!(g[0].data(), &[60.0, 80.0]);

    let mut g = vec![Array::from_vec(vec![240.0]), Array::from_vec(vec![0.0, 320.0])];
    assert_eq!(clip_grad_norm(&mut g, 200.0), 400.0);
    assert!((global_norm(&g) - 200.0).abs() < 1e-10);
    assert_eq!(g[0].data(), &[120.0]);

    let mut g = vec![Array::zeros(&[3])];
    assert_eq!(clip_grad_norm(&mut g, 200.0), 0.0);
    assert_eq!(g[0].data(), &[0.0; 3]);
}

#[test]
fn adamw_matches_scalar_recomputation() {
    let mut model = TransIp::new(micro(), 0).unwrap();
    let cfg = TrainConfig { weight_decay: 0.01, ..TrainConfig::default() };
    let lr = 1e-3;
    let before = model.params().clone();
    let mut grads: Vec<Array> = before.values().iter().map(|p| Array::zeros(p.shape())).collect();
    let target = before.names().iter().position(|n| n == "head.1.weight").unwrap();
    let gs = [0.3, -1.7, 0.05];
    let mut state = OptimizerState::new(model.params());
    let (mut w, mut m, mut v) = (before.values()[target].data()[0], 0.0, 0.0);
    for (t, &gv) in gs.iter().enumerate() {
        grads[target].data_mut()[0] = gv;
        adamw_step(model.params_mut(), &grads, &mut state, lr, &cfg).unwrap();
        let t = (t + 1) as i32;
        m = 0.9 * m + 0.1 * gv;
        v = 0.999 * v + 0.001 * gv * gv;
        let m_hat = m / (1.0 - 0.9f64.powi(t));
        let v_hat = v / (1.0 - 0.999f64.powi(t));
        w = w - lr * 0.01 * w - lr * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((model.params().values()[target].data()[0] - w).abs() < 1e-15);
    }
    assert_eq!(state.step, 3);
}

#[test]
fn zero_gradient_without_decay_changes_nothing() {
    let mut model = TransIp::new(micro(), 0).unwrap();
    let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
    let before = model.params().clone();
    let grads: Vec<Array> = before.values().iter().map(|p| Array::zeros(p.shape())).collect();
    let mut state = OptimizerState::new(model.params());
    adamw_step(model.params_mut(), &grads, &mut state, 1e-3, &cfg).unwrap();
    assert_eq!(model.params(), &before);
}

#[test]
fn decay_alone_shrinks_geometrically() {
    let mut model = TransIp::new(micro(), 0).unwrap();
    let cfg = TrainConfig::default();
    let lr = 5e-4;
    let before = model.params().clone();
    let grads: Vec<Array> = before.values().iter().map(|p| Array::zeros(p.shape())).collect();
    let mut state = OptimizerState::new(model.params());
    for _ in 0..3 {
        adamw_step(model.params_mut(), &grads, &mut state, lr, &cfg).unwrap();
    }
    let factor = (1.0 - lr * cfg.weight_decay).powi(3);
    for (a, b) in before.values().iter().zip(model.params().values()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x * factor - y).abs() <= 1e-15 * x.abs());
        }
    }
}

#[test]
fn zero_weights_step_is_pure_decay() {
    let batch = Batch::from_labeled(&data(4, 1)).unwrap();
    let cfg = TrainConfig { weights: LossWeights::new(0.0, 0.0, 0.0), ..TrainConfig::default() };
    let model = TransIp::new(micro(), 0).unwrap();
    let before = model.params().clone();
    let mut trainer = Trainer::new(model, cfg.clone(), 10);
    let rec = trainer.step(&batch, 0, 0).unwrap();
    assert_eq!((rec.loss_total, rec.grad_norm), (0.0, 0.0));
    let factor = 1.0 - rec.lr * cfg.weight_decay;
    for (a, b) in before.values().iter().zip(trainer.model.params().values()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x * factor - y).abs() <= 1e-15 * x.abs());
        }
    }
}

#[test]
fn epochs_cover_every_molecule_once() {
    let recs = data(60, 2);
    let sizes: Vec<usize> = recs.iter().map(LabeledMolecule::len).collect();
    let e0 = epoch_batches(&sizes, 9, 0, 40).unwrap();
    let e1 = epoch_batches(&sizes, 9, 1, 40).unwrap();
    for epoch in [&e0, &e1] {
        let all: Vec<usize> = epoch.iter().flatten().copied().collect();
        assert_eq!(all.len(), 60);
        assert_eq!(all.iter().copied().collect::<BTreeSet<_>>().len(), 60);
        for b in epoch.iter() {
            assert!(b.iter().map(|&i| sizes[i]).sum::<usize>() <= 40);
        }
    }
    assert_ne!(e0, e1);
    assert_eq!(e0, epoch_batches(&sizes, 9, 0, 40).unwrap());
}

#[test]
fn augmentation_rotates_labels_consistently() {
    let batch = Batch::from_labeled(&data(5, 3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (rotated, gs) = train_aug_rotate(&batch, &mut rng).unwrap();
    assert_eq!(rotated.energies(), batch.energies());
    let (a, b) = (batch.unbatch().unwrap(), rotated.unbatch().unwrap());
    for ((x, y), g) in a.iter().zip(&b).zip(&gs) {
        for (fx, fy) in x.forces.iter().zip(&y.forces) {
            let n = |v: &Vec3| v.iter().map(|c| c * c).sum::<f64>().sqrt();
            assert!((n(fx) - n(fy)).abs() < 1e-12);
            let gf = g.apply(fx);
            assert!((0..3).all(|k| (gf[k] - fy[k]).abs() < 1e-12));
        }
    }
    let same = batch.rotated(&vec![Rotation::IDENTITY; 5]).unwrap();
    assert_eq!(same.coordinates(), batch.coordinates());
    assert_eq!(same.forces(), batch.forces());
}

fn small_run(mode: Mode, epochs: u64) -> (Vec<LabeledMolecule>, TrainConfig) {
    let cfg = TrainConfig { epochs, batch_max_tokens: 48, seed: 11, mode, ..TrainConfig::default() };
    (data(24, 4), cfg)
}

#[test]
fn transaug_logs_zero_latent_loss() {
    let (recs, cfg) = small_run(Mode::TransAug, 1);
    let out = train(&recs, &micro(), &cfg, TrainOptions::default()).unwrap();
    assert!(!out.log.is_empty());
    assert!(out.log.iter().all(|r| r.loss_leq == 0.0));
    let (recs, cfg) = small_run(Mode::TransIp, 1);
    let out = train(&recs, &micro(), &cfg, TrainOptions::default()).unwrap();
    assert!(out.log.iter().all(|r| r.loss_leq > 0.0));
}

#[test]
fn runs_are_deterministic_and_resume_exactly() {
    let (recs, cfg) = small_run(Mode::TransIp, 3);
    let dir = tempfile::tempdir().unwrap();
    let full =
        train(&recs, &micro(), &cfg, TrainOptions { out_dir: Some(dir.path().into()), ..Default::default() }).unwrap();
    let again = train(&recs, &micro(), &cfg, TrainOptions::default()).unwrap();
    assert_eq!(full.log.len(), again.log.len());
    assert!(full.log.iter().zip(&again.log).all(|(a, b)| a.same_values(b)));
    assert_eq!(full.model, again.model);

    let on_disk = read_log(dir.path().join(LOG_FILE)).unwrap();
    assert!(on_disk.iter().zip(&full.log).all(|(a, b)| a.same_values(b)));
    let names: Vec<String> = full.checkpoints.iter().map(|p| p.file_name().unwrap().to_string_lossy().into()).collect();
    assert_eq!(names.first().map(String::as_str), Some(init_checkpoint_name()));
    assert!(names.contains(&epoch_checkpoint_name(1)));
    assert_eq!(names.last().map(String::as_str), Some(final_checkpoint_name()));

    let ckpt = Checkpoint::read(dir.path().join(epoch_checkpoint_name(1))).unwrap();
    let resume_at = ckpt.state.step as usize;
    let resumed = train(&recs, &micro(), &cfg, TrainOptions { resume: Some(ckpt), ..Default::default() }).unwrap();
    assert_eq!(resumed.log.len(), full.log.len() - resume_at);
    assert!(resumed.log.iter().zip(&full.log[resume_at..]).all(|(a, b)| a.same_values(b)));
    assert_eq!(resumed.model, full.model);
    assert_eq!(resumed.state, full.state);
}

#[test]
fn resume_rejects_changed_configuration() {
    let (recs, cfg) = small_run(Mode::TransIp, 1);
    let out = train(&recs, &micro(), &cfg, TrainOptions::default()).unwrap();
    let trainer = Trainer { model: out.model, cfg: cfg.clone(), state: out.state, total_steps: 0 };
    let ckpt = trainer.checkpoint(1);
    let other = TrainConfig { learning_rate: 1e-3, ..cfg.clone() };
    let err = train(&recs, &micro(), &other, TrainOptions { resume: Some(ckpt.clone()), ..Default::default() });
    assert!(matches!(err, Err(Error::Incompatible(_))));
    let wider = ModelConfig { hidden_dim: 32, ..micro() };
    assert!(matches!(
        train(&recs, &wider, &cfg, TrainOptions { resume: Some(ckpt), ..Default::default() }),
        Err(Error::Incompatible(_))
    ));
}

#[test]
fn non_finite_loss_names_the_batch() {
    let m = data(1, 5).remove(0).molecule;
    let n = m.len();
    let bad = LabeledMolecule::new(m, 0.0, vec![[1e200, 0.0, 0.0]; n]).unwrap();
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    match train(&[bad], &micro(), &cfg, TrainOptions::default()) {
        Err(Error::NonFiniteLoss { step, batch }) => assert_eq!((step, batch), (1, 0)),
        other => panic!("expected a non-finite loss error, got {:?}", other.map(|o| o.log)),
    }
}

#[test]
fn empty_dataset_and_bad_config_are_rejected() {
    assert!(train(&[], &micro(), &TrainConfig::default(), TrainOptions::default()).is_err());
    let bad = TrainConfig { learning_rate: -1.0, ..TrainConfig::default() };
    assert!(train(&data(2, 0), &micro(), &bad, TrainOptions::default()).is_err());
    assert!("transip".parse::<Mode>().is_ok() && "nope".parse::<Mode>().is_err());
    assert_eq!(TrainConfig { mode: Mode::TransAug, ..TrainConfig::default() }.effective_weights().latent, 0.0);
}
