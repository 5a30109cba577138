use crate::moldata::Rotation;
use crate::{Error, Result};

/// Upper bound on atoms per molecule (the model context length).
pub const MAX_ATOMS: usize = 1024;

pub type Vec3 = [f64; 3];

/// A molecule `m = (r, z, q, s)`: positions in Å, atomic numbers, total
/// charge and spin multiplicity.
#[derive(Clone, Debug, PartialEq)]
pub struct Molecule {
    positions: Vec<Vec3>,
    atomic_numbers: Vec<u32>,
    charge: i32,
    spin: u32,
}

impl Molecule {
    pub fn new(positions: Vec<Vec3>, atomic_numbers: Vec<u32>, charge: i32, spin: u32) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidInput("molecule has no atoms".into()));
        }
        if positions.len() > MAX_ATOMS {
            return Err(Error::InvalidInput(format!(
                "molecule has {} atoms, more than the context length {MAX_ATOMS}",
                positions.len()
            )));
        }
        if positions.len() != atomic_numbers.len() {
            return Err(Error::InvalidInput(format!(
                "{} atomic numbers for {} positions",
                atomic_numbers.len(),
                positions.len()
            )));
        }
        if atomic_numbers.contains(&0) {
            return Err(Error::InvalidInput("atomic number 0 is reserved for padding".into()));
        }
        if spin == 0 {
            return Err(Error::InvalidInput("spin multiplicity must be positive".into()));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite coordinate".into()));
        }
        Ok(Self { positions, atomic_numbers, charge, spin })
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn atomic_numbers(&self) -> &[u32] {
        &self.atomic_numbers
    }

    pub fn charge(&self) -> i32 {
        self.charge
    }

    pub fn spin(&self) -> u32 {
        self.spin
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Same molecule with new positions (same atom count).
    pub fn with_positions(&self, positions: Vec<Vec3>) -> Result<Self> {
        if positions.len() != self.positions.len() {
            return Err(Error::InvalidInput(format!(
                "{} positions for a molecule of {} atoms",
                positions.len(),
                self.positions.len()
            )));
        }
        Ok(Self { positions, ..self.clone() })
    }

    /// Shifts every atom by `t`.
    pub fn translated(&self, t: Vec3) -> Self {
        let positions = self.positions.iter().map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).collect();
        Self { positions, ..self.clone() }
    }

    /// Positions with the uniform-weight centroid subtracted.
    pub fn centered(&self) -> Self {
        let positions = center_positions(&self.positions).expect("molecule is never empty");
        Self { positions, ..self.clone() }
    }

    /// `φ(g) m`: every position left-multiplied by the rotation matrix.
    pub fn rotated(&self, g: &Rotation) -> Self {
        let positions = self.positions.iter().map(|p| g.apply(p)).collect();
        Self { positions, ..self.clone() }
    }

    pub fn centroid(&self) -> Vec3 {
        centroid(&self.positions)
    }

    pub fn pair_distance(&self, i: usize, j: usize) -> f64 {
        distance(&self.positions[i], &self.positions[j])
    }
}

pub(crate) fn distance(a: &Vec3, b: &Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn centroid(positions: &[Vec3]) -> Vec3 {
    let n = positions.len() as f64;
    let mut sum = [0.0; 3];
    for p in positions {
        for k in 0..3 {
            sum[k] += p[k];
        }
    }
    sum.map(|s| s / n)
}

/// `r_i - (1/|m|) Σ_j r_j` with uniform atom weights.
pub fn center_positions(positions: &[Vec3]) -> Result<Vec<Vec3>> {
    if positions.is_empty() {
        return Err(Error::InvalidInput("cannot center an empty molecule".into()));
    }
    let c = centroid(positions);
    Ok(positions.iter().map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect())
}

/// Centers a molecule's coordinates; charge, spin and atomic numbers are kept.
pub fn center_coordinates(m: &Molecule) -> Molecule {
    m.centered()
}

/// A molecule with reference energy (eV) and forces (eV/Å).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledMolecule {
    pub molecule: Molecule,
    pub energy: f64,
    pub forces: Vec<Vec3>,
}

impl LabeledMolecule {
    pub fn new(molecule: Molecule, energy: f64, forces: Vec<Vec3>) -> Result<Self> {
        if forces.len() != molecule.len() {
            return Err(Error::InvalidInput(format!("{} force rows for {} atoms", forces.len(), molecule.len())));
        }
        if !energy.is_finite() || forces.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite label".into()));
        }
        Ok(Self { molecule, energy, forces })
    }

    pub fn len(&self) -> usize {
        self.molecule.len()
    }

    pub fn is_empty(&self) -> bool {
        self.molecule.is_empty()
    }

    /// Rotates positions and forces together; the energy is invariant.
    pub fn rotated(&self, g: &Rotation) -> Self {
        Self {
            molecule: self.molecule.rotated(g),
            energy: self.energy,
            forces: self.forces.iter().map(|f| g.apply(f)).collect(),
        }
    }
}
