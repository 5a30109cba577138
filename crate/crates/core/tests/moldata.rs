use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transip::moldata::*;

fn random_molecule(rng: &mut ChaCha8Rng, n: usize) -> Molecule {
    let r = (0..n)
        .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
        .collect();
    Molecule::new(r, vec![6; n], 0, 1).unwrap()
}

fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> [f64; 3] {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(a);
    std::array::from_fn(|k| {
        let mut m = a;
        for i in 0..3 {
            m[i][k] = b[i];
        }
        det(m) / d
    })
}

/// Least-squares `R` with `R a_i ≈ b_i`: `R = (B Aᵀ)(A Aᵀ)⁻¹`, solved row by row.
fn align(a: &[Vec3], b: &[Vec3]) -> [[f64; 3]; 3] {
    let mut aat = [[0.0; 3]; 3];
    let mut bat = [[0.0; 3]; 3];
    for (p, q) in a.iter().zip(b) {
        for i in 0..3 {
            for j in 0..3 {
                aat[i][j] += p[i] * p[j];
                bat[i][j] += q[i] * p[j];
            }
        }
    }
    // Row i of R solves (A Aᵀ) rᵢ = (B Aᵀ)ᵢ since A Aᵀ is symmetric.
    std::array::from_fn(|i| solve3(aat, bat[i]))
}

#[test]
fn equivariance_pair_recovers_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let m = random_molecule(&mut rng, 5).centered();
        let (orig, g, rot) = make_equivariance_pair(&m, &mut rng);
        assert_eq!(
            (orig.atomic_numbers(), orig.charge(), orig.spin()),
            (rot.atomic_numbers(), rot.charge(), rot.spin())
        );
        for i in 0..5 {
            for j in 0..5 {
                assert!((orig.pair_distance(i, j) - rot.pair_distance(i, j)).abs() < 1e-10);
            }
        }
        assert!(rot.centroid().iter().all(|c| c.abs() < 1e-10));
        let r = align(orig.positions(), rot.positions());
        for i in 0..3 {
            for j in 0..3 {
                assert!((r[i][j] - g.matrix()[i][j]).abs() < 1e-8);
            }
        }
    }
}

#[test]
fn rotation_moments_match_haar() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 100_000;
    let mut mean = [[0.0; 3]; 3];
    let mut dir = [0.0; 3];
    for _ in 0..n {
        let g = Rotation::sample_uniform(&mut rng);
        assert!(g.is_valid(1e-10));
        for i in 0..3 {
            for j in 0..3 {
                mean[i][j] += g.matrix()[i][j] / n as f64;
            }
        }
        let v = g.apply(&[0.0, 0.0, 1.0]);
        for k in 0..3 {
            dir[k] += v[k] / n as f64;
        }
    }
    assert!(mean.iter().flatten().all(|m| m.abs() < 0.02), "{mean:?}");
    assert!((dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt() < 0.02);
}

#[test]
fn oracle_symmetries() {
    let cfg = GeneratorConfig { count: 200, seed: 23, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for rec in generate_lj_dataset(&cfg).unwrap() {
        let m = &rec.molecule;
        let (e, f) = LjOracle.energy_forces(m).unwrap();
        let g = Rotation::sample_uniform(&mut rng);
        let (er, fr) = LjOracle.energy_forces(&m.rotated(&g)).unwrap();
        assert!((e - er).abs() < 1e-9);
        for (a, b) in f.iter().zip(&fr) {
            let ga = g.apply(a);
            assert!((0..3).all(|k| (ga[k] - b[k]).abs() < 1e-9));
        }
        let total: Vec3 = std::array::from_fn(|k| f.iter().map(|v| v[k]).sum());
        assert!(total.iter().all(|t| t.abs() < 1e-9));
        let t = [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)];
        let (et, _) = LjOracle.energy_forces(&m.translated(t)).unwrap();
        assert!((e - et).abs() < 1e-9);
        let (ec, _) = LjOracle.energy_forces(&m.translated(t).centered()).unwrap();
        assert!((e - ec).abs() < 1e-9);
    }
}

#[test]
fn oracle_labels_are_exact_gradients() {
    let data = generate_lj_dataset(&GeneratorConfig { count: 20, seed: 2, ..Default::default() }).unwrap();
    let h = 1e-6;
    for rec in &data {
        let m = &rec.molecule;
        for i in 0..m.len() {
            for k in 0..3 {
                let e = |s: f64| {
                    let mut r = m.positions().to_vec();
                    r[i][k] += s;
                    LjOracle.energy_forces(&m.with_positions(r).unwrap()).unwrap().0
                };
                let fd = -(e(h) - e(-h)) / (2.0 * h);
                assert!((fd - rec.forces[i][k]).abs() < 1e-8 * rec.forces[i][k].abs().max(1.0));
            }
        }
    }
}

#[test]
fn fixed_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GeneratorConfig { count: 50, seed: 7, ..Default::default() };
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    write_dataset(&generate_lj_dataset(&cfg).unwrap(), &a).unwrap();
    write_dataset(&generate_lj_dataset(&cfg).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

fn coord() -> impl Strategy<Value = f64> {
    -5.0..5.0f64
}

proptest! {
    #[test]
    fn centering_commutes_with_rotation(
        r in prop::collection::vec([coord(), coord(), coord()], 1..10),
        q in [-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64],
    ) {
        prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let n = r.len();
        let m = Molecule::new(r, vec![1; n], 0, 1).unwrap();
        let g = Rotation::from_quaternion(q);
        let a = m.rotated(&g).centered();
        let b = m.centered().rotated(&g);
        for (x, y) in a.positions().iter().zip(b.positions()) {
            for k in 0..3 {
                prop_assert!((x[k] - y[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batching_round_trips(sizes in prop::collection::vec(1usize..9, 1..12), budget in 8usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(sizes.len() as u64);
        let recs: Vec<LabeledMolecule> = sizes
            .iter()
            .map(|&n| {
                let m = random_molecule(&mut rng, n);
                let f = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
                LabeledMolecule::new(m, rng.random(), f).unwrap()
            })
            .collect();
        let batches = batch_molecules(&recs, budget).unwrap();
        for b in &batches {
            prop_assert!(b.num_atoms() <= budget);
        }
        let back: Vec<_> = batches.iter().flat_map(|b| b.unbatch().unwrap()).collect();
        prop_assert_eq!(back, recs);
    }
}
