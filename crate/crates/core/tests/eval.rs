use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transip::eval::*;
use transip::losses::LatentModel;
use transip::model::{ModelConfig, TransIp};
use transip::moldata::*;
use transip::Result;
use transip_tensor::Array;

fn data(count: usize, seed: u64) -> Vec<LabeledMolecule> {
    generate_lj_dataset(&GeneratorConfig { count, seed, ..Default::default() }).unwrap()
}

fn bare(recs: &[LabeledMolecule]) -> Vec<Molecule> {
    recs.iter().map(|r| r.molecule.clone()).collect()
}

fn tiny() -> TransIp {
    TransIp::new(ModelConfig::tiny(), 1).unwrap()
}

#[test]
fn metric_examples_and_identities() {
    assert_eq!(force_mae(&[[1.0, 0.0, 0.0]], &[[0.0, 1.0, 0.0]]).unwrap(), 2.0 / 3.0);
    assert_eq!(force_mae(&[[1.0, 2.0, 3.0]], &[[1.0, 2.0, 3.0]]).unwrap(), 0.0);
    assert!(force_mae(&[[0.0; 3]], &[]).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..200 {
        let n = rng.random_range(1..8);
        let a: Vec<Vec3> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0))).collect();
        let b: Vec<Vec3> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0))).collect();
        assert_eq!(force_mae(&a, &b).unwrap(), force_mae(&b, &a).unwrap());
        let c = force_cosine(&a, &b).unwrap();
        assert!((-1.0..=1.0).contains(&c));
        let (e, e_true) = (rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
        let (per_atom, total) = energy_metrics(e, e_true, n);
        assert!(per_atom >= 0.0 && total >= 0.0);
        assert!((per_atom * n as f64 - total).abs() <= 4.0 * f64::EPSILON * total);
    }
    assert_eq!(energy_metrics(3.0, 3.0, 5), (0.0, 0.0));
}

/// `T` reproduces `f(g m)` exactly by embedding the rotated molecule itself.
struct Faithful;

fn stub_embedding(m: &Molecule) -> Array {
    let data = m.positions().iter().flat_map(|p| [p[0], p[1], p[2], p[0] * p[1]]).collect();
    Array::new(vec![m.len(), 4], data).unwrap()
}

impl LatentModel for Faithful {
    fn embed(&self, mols: &[Molecule]) -> Result<Vec<Array>> {
        Ok(mols.iter().map(stub_embedding).collect())
    }

    fn transform(&self, mols: &[Molecule], rotations: &[Rotation]) -> Result<Vec<Array>> {
        Ok(mols.iter().zip(rotations).map(|(m, g)| stub_embedding(&m.rotated(g))).collect())
    }
}

#[test]
fn faithful_stub_probes_to_zero() {
    let mols = bare(&data(10, 2));
    assert_eq!(latent_equivariance_probe(&Faithful, &mols, &ProbeConfig::default()).unwrap(), 0.0);
}

#[test]
fn oracle_passes_output_probe() {
    let mols = bare(&data(50, 3));
    let (e, f) = output_equivariance_probe(&LjOracle, &mols, &ProbeConfig::default()).unwrap();
    assert!(e < 1e-9 && f < 1e-9, "{e} {f}");
}

#[test]
fn identity_rotations_give_zero_output_error() {
    let mols = bare(&data(6, 4));
    let ids = vec![vec![Rotation::IDENTITY; 2]; mols.len()];
    assert_eq!(output_equivariance_probe_with(&tiny(), &mols, &ids).unwrap(), (0.0, 0.0));
}

#[test]
fn untrained_model_is_not_symmetric() {
    let mols = bare(&data(6, 5));
    let probe = ProbeConfig { rotations: 2, ..Default::default() };
    let (e, f) = output_equivariance_probe(&tiny(), &mols, &probe).unwrap();
    assert!(e > 0.0 && f > 0.0);
    assert!(latent_equivariance_probe(&tiny(), &mols, &probe).unwrap() > 0.0);
}

#[test]
fn probes_do_not_depend_on_packing_or_order() {
    let model = tiny();
    let mols = bare(&data(12, 6));
    let rotations = probe_rotations(mols.len(), 3, 99);
    let a = latent_equivariance_probe_with(&model, &mols, &rotations, 512).unwrap();
    let b = latent_equivariance_probe_with(&model, &mols, &rotations, 12).unwrap();
    assert!((a - b).abs() < 1e-10);

    let recs = data(12, 6);
    let mut reversed = recs.clone();
    reversed.reverse();
    let x = accuracy_metrics(&model, &recs).unwrap();
    let y = accuracy_metrics(&model, &reversed).unwrap();
    for (p, q) in [(x.0, y.0), (x.1, y.1), (x.2, y.2), (x.3, y.3)] {
        assert!((p - q).abs() < 1e-10);
    }
    let probe = ProbeConfig::default();
    assert_eq!(
        latent_equivariance_probe(&model, &mols, &probe).unwrap(),
        latent_equivariance_probe(&model, &mols, &probe).unwrap()
    );
}

#[test]
fn oracle_is_perfectly_accurate() {
    let recs = data(20, 7);
    let (mae, cos, ea, et) = accuracy_metrics(&LjOracle, &recs).unwrap();
    assert_eq!((mae, ea, et), (0.0, 0.0, 0.0));
    assert!((cos - 1.0).abs() < 1e-12);
}

#[test]
fn comparison_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("compare.csv");
    let probe = ProbeConfig { rotations: 2, ..Default::default() };
    let models = vec![("a".to_string(), tiny()), ("b".to_string(), TransIp::new(ModelConfig::tiny(), 2).unwrap())];
    let sets = vec![("small".to_string(), data(5, 8))];
    let reports = compare_models(&models, &sets, &probe, &path).unwrap();
    assert_eq!(reports.len(), 2);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER.join(","));
    assert_eq!(read_reports(&path).unwrap(), reports);
    let again = evaluate(&models[0].1, &sets[0].1, "a", "small", &probe).unwrap();
    assert_eq!(again, reports[0]);
    for r in &reports {
        assert!((-1.0..=1.0).contains(&r.force_cos));
        assert!(r.force_mae >= 0.0 && r.energy_atom_mae >= 0.0 && r.energy_total_mae >= 0.0);
    }
}

#[test]
fn wrong_header_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "checkpoint,category\na,b\n").unwrap();
    assert!(read_reports(&path).is_err());
}
