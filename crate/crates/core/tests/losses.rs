use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transip::losses::*;
use transip::model::{ModelConfig, TransIp};
use transip::moldata::*;
use transip::train::{TrainConfig, Trainer};
use transip::Result;
use transip_tensor::{grad, Array, Tape, Tensor};

fn data(count: usize, seed: u64) -> Vec<LabeledMolecule> {
    generate_lj_dataset(&GeneratorConfig { count, seed, ..Default::default() }).unwrap()
}

fn tiny() -> TransIp {
    TransIp::new(ModelConfig::tiny(), 5).unwrap()
}

fn rotations(n: usize, seed: u64) -> Vec<Rotation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Rotation::sample_uniform(&mut rng)).collect()
}

#[test]
fn energy_loss_ignores_sign_flip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let (a, b, n) = (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(1..30));
        assert_eq!(energy_loss(a, b, n), energy_loss(-a, -b, n));
        assert!(energy_loss(a, b, n) >= 0.0);
    }
}

#[test]
fn force_loss_is_rotation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for g in rotations(50, 3) {
        let n = rng.random_range(1..10);
        let a: Vec<Vec3> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-3.0..3.0))).collect();
        let b: Vec<Vec3> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-3.0..3.0))).collect();
        let ra: Vec<Vec3> = a.iter().map(|v| g.apply(v)).collect();
        let rb: Vec<Vec3> = b.iter().map(|v| g.apply(v)).collect();
        assert!((force_loss(&a, &b).unwrap() - force_loss(&ra, &rb).unwrap()).abs() < 1e-10);
    }
}

/// One atom, d = 4, with fixed embeddings.
struct Stub {
    rotated: [f64; 4],
    transformed: [f64; 4],
}

impl LatentModel for Stub {
    fn embed(&self, _: &[Molecule]) -> Result<Vec<Array>> {
        Ok(vec![Array::new(vec![1, 4], self.rotated.to_vec())?])
    }

    fn transform(&self, _: &[Molecule], _: &[Rotation]) -> Result<Vec<Array>> {
        Ok(vec![Array::new(vec![1, 4], self.transformed.to_vec())?])
    }
}

#[test]
fn latent_loss_matches_stub() {
    let m = Molecule::new(vec![[0.0; 3]], vec![1], 0, 1).unwrap();
    let g = rotations(1, 0)[0];
    let stub = Stub { rotated: [0.5, -1.0, 2.0, 0.0], transformed: [0.0, 1.0, 2.0, -3.0] };
    let expected = (0.25 + 4.0 + 0.0 + 9.0) / 4.0;
    assert_eq!(latent_equivariance_loss(&stub, &g, &m).unwrap(), expected);
    let same = Stub { rotated: [1.0, 2.0, 3.0, 4.0], transformed: [1.0, 2.0, 3.0, 4.0] };
    assert_eq!(latent_equivariance_loss(&same, &g, &m).unwrap(), 0.0);
}

#[test]
fn latent_loss_of_model_is_non_negative_and_agrees_with_batch_term() {
    let model = tiny();
    let recs = data(4, 4);
    let gs = rotations(4, 5);
    let mut scalar = 0.0;
    for (r, g) in recs.iter().zip(&gs) {
        let l = latent_equivariance_loss(&model, g, &r.molecule).unwrap();
        assert!(l >= 0.0);
        scalar += l / 4.0;
    }
    let tape = Tape::new();
    let p = model.params().bind(Some(&tape)).unwrap();
    let batch = Batch::from_labeled(&recs).unwrap();
    let losses = batch_losses(&model, &tape, &p, &batch, Some(&gs), None).unwrap();
    let batched = losses.latent.unwrap().item();
    assert!((batched - scalar).abs() < 1e-10 * scalar.max(1.0));
}

#[test]
fn combined_objective_is_linear_in_weights() {
    let model = tiny();
    let batch = Batch::from_labeled(&data(6, 6)).unwrap();
    let gs = rotations(6, 7);
    let tape = Tape::new();
    let p = model.params().bind(Some(&tape)).unwrap();
    let losses = batch_losses(&model, &tape, &p, &batch, Some(&gs), None).unwrap();
    let (a, b, c) = (losses.energy.item(), losses.force.item(), losses.latent.as_ref().unwrap().item());
    assert!(a >= 0.0 && b >= 0.0 && c >= 0.0);
    for w in [LossWeights::new(5.0, 15.0, 5.0), LossWeights::new(1.0, 0.0, 0.0), LossWeights::new(0.5, 2.0, 100.0)] {
        let t = combine(&w, &losses).unwrap();
        assert_eq!((t.energy, t.force, t.latent), (a, b, c));
        let expected = w.energy * a + w.force * b + w.latent * c;
        assert!((t.total.item() - expected).abs() <= 1e-12 * expected.abs().max(1.0));
    }
    assert_eq!(combine(&LossWeights::new(0.0, 0.0, 0.0), &losses).unwrap().total.item(), 0.0);
}

#[test]
fn total_gradient_is_weighted_sum_of_term_gradients() {
    let model = tiny();
    let batch = Batch::from_labeled(&data(4, 8)).unwrap();
    let gs = rotations(4, 9);
    let w = LossWeights::default();
    let tape = Tape::new();
    let p = model.params().bind(Some(&tape)).unwrap();
    let refs: Vec<&Tensor> = p.iter().collect();
    let losses = batch_losses(&model, &tape, &p, &batch, Some(&gs), None).unwrap();
    let total = grad(&combine(&w, &losses).unwrap().total, &refs, false).unwrap();
    let ge = grad(&losses.energy, &refs, false).unwrap();
    let gf = grad(&losses.force, &refs, false).unwrap();
    let gl = grad(losses.latent.as_ref().unwrap(), &refs, false).unwrap();
    for i in 0..refs.len() {
        for (k, &t) in total[i].data().iter().enumerate() {
            let s = w.energy * ge[i].data()[k] + w.force * gf[i].data()[k] + w.latent * gl[i].data()[k];
            assert!((t - s).abs() <= 1e-10, "{} differs: {t} vs {s}", model.params().names()[i]);
        }
    }
}

#[test]
fn doubling_weights_doubles_gradients_exactly() {
    let batch = Batch::from_labeled(&data(5, 10)).unwrap();
    let cfg = TrainConfig::default();
    let doubled = TrainConfig { weights: cfg.weights.scaled(2.0), ..cfg.clone() };
    let (t1, g1) = Trainer::new(tiny(), cfg, 10).loss_and_grads(&batch, 3).unwrap();
    let (t2, g2) = Trainer::new(tiny(), doubled, 10).loss_and_grads(&batch, 3).unwrap();
    assert_eq!(t2.total.item(), 2.0 * t1.total.item());
    for (a, b) in g1.iter().zip(&g2) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(2.0 * x, *y);
        }
    }
}

#[test]
fn zero_latent_weight_is_the_supervised_step() {
    let batch = Batch::from_labeled(&data(5, 11)).unwrap();
    let cfg = TrainConfig { weights: LossWeights::new(5.0, 15.0, 0.0), seed: 4, ..TrainConfig::default() };
    let model = tiny();
    let step = 2;
    let (terms, grads) = Trainer::new(model.clone(), cfg.clone(), 10).loss_and_grads(&batch, step).unwrap();

    let mut dropout = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout.set_stream(2 * step);
    let tape = Tape::new();
    let p = model.params().bind(Some(&tape)).unwrap();
    let losses = batch_losses(&model, &tape, &p, &batch, None, Some(&mut dropout)).unwrap();
    let plain = combine(&cfg.weights, &losses).unwrap();
    let refs: Vec<&Tensor> = p.iter().collect();
    let plain_grads = grad(&plain.total, &refs, false).unwrap();
    assert_eq!(terms.total.item().to_bits(), plain.total.item().to_bits());
    assert_eq!(terms.latent, 0.0);
    for (a, b) in grads.iter().zip(&plain_grads) {
        assert_eq!(a, b.value());
    }
}

#[test]
fn perfect_energy_labels_give_zero_energy_loss() {
    let model = tiny();
    let mols: Vec<Molecule> = data(3, 12).into_iter().map(|r| r.molecule).collect();
    let pred = model.predict(&Batch::from_molecules(&mols).unwrap()).unwrap();
    let recs: Vec<LabeledMolecule> = mols
        .iter()
        .zip(&pred.energies)
        .map(|(m, &e)| LabeledMolecule::new(m.clone(), e, vec![[1.0, 0.0, 0.0]; m.len()]).unwrap())
        .collect();
    let tape = Tape::new();
    let p = model.params().bind(Some(&tape)).unwrap();
    let losses = batch_losses(&model, &tape, &p, &Batch::from_labeled(&recs).unwrap(), None, None).unwrap();
    let t = combine(&LossWeights::new(1.0, 0.0, 0.0), &losses).unwrap();
    assert_eq!(t.total.item(), 0.0);
    assert!(t.force > 0.0);
}

#[test]
fn rotation_is_sampled_only_when_needed() {
    let model = tiny();
    let batch = Batch::from_labeled(&data(3, 13)).unwrap();
    let tape = Tape::new();
    let p = model.params().bind(Some(&tape)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let before = rng.clone();
    total_loss(&model, &tape, &p, &batch, &LossWeights::new(1.0, 1.0, 0.0), &mut rng, None).unwrap();
    assert_eq!(rng, before);
    total_loss(&model, &tape, &p, &batch, &LossWeights::new(1.0, 1.0, 1.0), &mut rng, None).unwrap();
    assert_ne!(rng, before);
}

#[test]
fn unlabeled_batch_is_rejected() {
    let model = tiny();
    let mols: Vec<Molecule> = data(2, 14).into_iter().map(|r| r.molecule).collect();
    let tape = Tape::new();
    let p = model.params().bind(Some(&tape)).unwrap();
    assert!(batch_losses(&model, &tape, &p, &Batch::from_molecules(&mols).unwrap(), None, None).is_err());
}
