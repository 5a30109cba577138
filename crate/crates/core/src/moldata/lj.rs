use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::moldata::molecule::distance;
use crate::moldata::{LabeledMolecule, Molecule, Rotation, Vec3};
use crate::{Error, Result};

/// Per-element `(z, ε [eV], σ [Å])`.
pub const ELEMENT_TABLE: [(u32, f64, f64); 4] = [(1, 0.05, 2.2), (6, 0.10, 3.0), (7, 0.08, 2.9), (8, 0.12, 2.8)];

pub const DEFAULT_PALETTE: [u32; 4] = [1, 6, 7, 8];

const MIN_DISTANCE: f64 = 1e-6;

pub fn element_params(z: u32) -> Option<(f64, f64)> {
    ELEMENT_TABLE.iter().find(|e| e.0 == z).map(|e| (e.1, e.2))
}

/// Lorentz-Berthelot mixing: geometric mean of ε, arithmetic mean of σ.
pub fn mixed_params(zi: u32, zj: u32) -> Option<(f64, f64)> {
    let (ei, si) = element_params(zi)?;
    let (ej, sj) = element_params(zj)?;
    Some(((ei * ej).sqrt(), 0.5 * (si + sj)))
}

/// Energy offset carried by the global `(q, s)` channel.
pub fn charge_spin_offset(charge: i32, spin: u32) -> f64 {
    0.5 * charge as f64 + 0.3 * (spin as f64 - 1.0)
}

fn pair_term(a: &Vec3, b: &Vec3, eps: f64, sigma: f64) -> Result<(f64, Vec3)> {
    let d = distance(a, b);
    if d <= MIN_DISTANCE {
        return Err(Error::InvalidInput(format!("coincident atoms (distance {d:e} Å)")));
    }
    let sr6 = (sigma / d).powi(6);
    let sr12 = sr6 * sr6;
    let energy = 4.0 * eps * (sr12 - sr6);
    // Force on `a`: -dE/dd along (a - b)/d.
    let scale = 24.0 * eps * (2.0 * sr12 - sr6) / (d * d);
    Ok((energy, std::array::from_fn(|k| scale * (a[k] - b[k]))))
}

fn pairwise(m: &Molecule, params: impl Fn(u32, u32) -> Result<(f64, f64)>) -> Result<(f64, Vec<Vec3>)> {
    let r = m.positions();
    let z = m.atomic_numbers();
    let mut energy = 0.0;
    let mut forces = vec![[0.0; 3]; r.len()];
    for i in 0..r.len() {
        for j in i + 1..r.len() {
            let (eps, sigma) = params(z[i], z[j])?;
            let (e, f) = pair_term(&r[i], &r[j], eps, sigma)?;
            energy += e;
            for k in 0..3 {
                forces[i][k] += f[k];
                forces[j][k] -= f[k];
            }
        }
    }
    Ok((energy, forces))
}

/// `E = Σ_{i<j} 4ε[(σ/d)¹² − (σ/d)⁶]` with shared `ε`, `σ`, and its exact
/// negative gradient.
pub fn lj_energy_forces(m: &Molecule, epsilon: f64, sigma: f64) -> Result<(f64, Vec<Vec3>)> {
    pairwise(m, |_, _| Ok((epsilon, sigma)))
}

/// The labeling potential: per-element Lennard-Jones with mixed pair
/// parameters plus a constant `(q, s)` offset.
#[derive(Clone, Copy, Debug, Default)]
pub struct LjOracle;

impl LjOracle {
    pub fn energy_forces(&self, m: &Molecule) -> Result<(f64, Vec<Vec3>)> {
        let (e, f) = pairwise(m, |a, b| {
            mixed_params(a, b)
                .ok_or_else(|| Error::InvalidInput(format!("no Lennard-Jones parameters for pair ({a}, {b})")))
        })?;
        Ok((e + charge_spin_offset(m.charge(), m.spin()), f))
    }

    pub fn label(&self, m: Molecule) -> Result<LabeledMolecule> {
        let (e, f) = self.energy_forces(&m)?;
        LabeledMolecule::new(m, e, f)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub count: usize,
    pub atoms_min: usize,
    pub atoms_max: usize,
    pub palette: Vec<u32>,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { count: 1000, atoms_min: 4, atoms_max: 12, palette: DEFAULT_PALETTE.to_vec(), seed: 0 }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.atoms_min < 2 {
            return Err(Error::Config(format!("atoms_min must be at least 2, got {}", self.atoms_min)));
        }
        if self.atoms_max < self.atoms_min {
            return Err(Error::Config(format!("atoms_max {} is below atoms_min {}", self.atoms_max, self.atoms_min)));
        }
        if self.atoms_max > crate::moldata::MAX_ATOMS {
            return Err(Error::Config(format!("atoms_max {} exceeds the context length", self.atoms_max)));
        }
        if self.palette.is_empty() {
            return Err(Error::Config("element palette is empty".into()));
        }
        if let Some(z) = self.palette.iter().find(|&&z| element_params(z).is_none()) {
            return Err(Error::Config(format!("element {z} has no Lennard-Jones parameters")));
        }
        Ok(())
    }
}

/// Closest allowed approach, as a fraction of the mixed σ.
const MIN_SEPARATION: f64 = 0.95;
const MAX_SEPARATION: f64 = 4.0;
const PLACEMENT_TRIES: usize = 200;

fn place_atoms<R: Rng>(z: &[u32], rng: &mut R) -> Vec<Vec3> {
    'restart: loop {
        let mut r: Vec<Vec3> = vec![[0.0; 3]];
        for k in 1..z.len() {
            let mut placed = false;
            for _ in 0..PLACEMENT_TRIES {
                let anchor = rng.random_range(0..k);
                let (_, sigma) = mixed_params(z[k], z[anchor]).expect("palette validated");
                let dir = Rotation::sample_uniform(rng).apply(&[0.0, 0.0, 1.0]);
                let dist = sigma * rng.random_range(1.0..1.5);
                let p: Vec3 = std::array::from_fn(|i| r[anchor][i] + dist * dir[i]);
                let ok = r.iter().zip(z).all(|(q, &zq)| {
                    let (_, s) = mixed_params(z[k], zq).expect("palette validated");
                    let d = distance(&p, q);
                    d >= MIN_SEPARATION * s && d <= MAX_SEPARATION * s
                });
                if ok {
                    r.push(p);
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'restart;
            }
        }
        return r;
    }
}

/// Record `index` of the dataset for `cfg`; each record has its own
/// seed-derived stream so records can be produced in any order.
pub fn generate_record(cfg: &GeneratorConfig, index: u64) -> Result<LabeledMolecule> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let n = rng.random_range(cfg.atoms_min..=cfg.atoms_max);
    let z: Vec<u32> = (0..n).map(|_| cfg.palette[rng.random_range(0..cfg.palette.len())]).collect();
    let positions = place_atoms(&z, &mut rng);
    let charge = rng.random_range(-1..=1);
    let spin = rng.random_range(1..=2);
    let m = Molecule::new(positions, z, charge, spin)?.centered();
    LjOracle.label(m)
}

pub fn generate_lj_dataset(cfg: &GeneratorConfig) -> Result<Vec<LabeledMolecule>> {
    cfg.validate()?;
    (0..cfg.count as u64).map(|i| generate_record(cfg, i)).collect()
}

fn holdout_score(seed: u64, index: usize) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    let bytes: [u8; 8] = h.finalize()[..8].try_into().expect("digest is 32 bytes");
    (u64::from_le_bytes(bytes) >> 11) as f64 / (1u64 << 53) as f64
}

/// Splits records into `(train, validation)`; record `i` is held out when a
/// hash of `(seed, i)` falls below `fraction`.
pub fn split_validation<T: Clone>(records: &[T], seed: u64, fraction: f64) -> (Vec<T>, Vec<T>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if holdout_score(seed, i) < fraction {
            val.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    (train, val)
}
