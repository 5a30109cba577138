use transip_tensor::Array;

use crate::moldata::{LabeledMolecule, Molecule, Rotation, Vec3};
use crate::{Error, Result};

/// Molecules padded to a common length `N` (the largest in the batch).
///
/// Per-token arrays are row-major over `(molecule, atom)`. Padding rows have
/// zero coordinates, atomic number 0 and validity 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    n_max: usize,
    sizes: Vec<usize>,
    atomic_numbers: Vec<u32>,
    coordinates: Vec<f64>,
    valid: Vec<f64>,
    charges: Vec<i32>,
    spins: Vec<u32>,
    energies: Option<Vec<f64>>,
    forces: Option<Vec<f64>>,
}

impl Batch {
    pub fn from_molecules(mols: &[Molecule]) -> Result<Self> {
        Self::build(mols.iter(), None)
    }

    pub fn from_labeled(recs: &[LabeledMolecule]) -> Result<Self> {
        Self::build(recs.iter().map(|r| &r.molecule), Some(recs))
    }

    fn build<'a>(mols: impl Iterator<Item = &'a Molecule> + Clone, labels: Option<&[LabeledMolecule]>) -> Result<Self> {
        let sizes: Vec<usize> = mols.clone().map(Molecule::len).collect();
        if sizes.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let n_max = *sizes.iter().max().expect("non-empty");
        let tokens = sizes.len() * n_max;
        let mut b = Batch {
            n_max,
            atomic_numbers: vec![0; tokens],
            coordinates: vec![0.0; tokens * 3],
            valid: vec![0.0; tokens],
            charges: mols.clone().map(Molecule::charge).collect(),
            spins: mols.clone().map(Molecule::spin).collect(),
            energies: labels.map(|l| l.iter().map(|r| r.energy).collect()),
            forces: labels.map(|_| vec![0.0; tokens * 3]),
            sizes,
        };
        for (i, m) in mols.enumerate() {
            for (a, (p, &z)) in m.positions().iter().zip(m.atomic_numbers()).enumerate() {
                let t = i * n_max + a;
                b.atomic_numbers[t] = z;
                b.valid[t] = 1.0;
                b.coordinates[3 * t..3 * t + 3].copy_from_slice(p);
                if let (Some(f), Some(l)) = (b.forces.as_mut(), labels) {
                    f[3 * t..3 * t + 3].copy_from_slice(&l[i].forces[a]);
                }
            }
        }
        Ok(b)
    }

    pub fn num_molecules(&self) -> usize {
        self.sizes.len()
    }

    /// Padded length `N`.
    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_atoms(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn atomic_numbers(&self) -> &[u32] {
        &self.atomic_numbers
    }

    /// Flat `[B·N·3]` coordinates.
    pub fn coordinates(&self) -> &[f64] {
        &self.coordinates
    }

    /// `1` for real atoms, `0` for padding, `[B·N]`.
    pub fn valid(&self) -> &[f64] {
        &self.valid
    }

    pub fn charges(&self) -> &[i32] {
        &self.charges
    }

    pub fn spins(&self) -> &[u32] {
        &self.spins
    }

    pub fn energies(&self) -> Option<&[f64]> {
        self.energies.as_deref()
    }

    /// Flat `[B·N·3]` force labels, zero on padding.
    pub fn forces(&self) -> Option<&[f64]> {
        self.forces.as_deref()
    }

    pub fn is_labeled(&self) -> bool {
        self.energies.is_some()
    }

    /// Sequence position of every token (its index within the molecule).
    pub fn positions(&self) -> Vec<usize> {
        (0..self.valid.len()).map(|t| t % self.n_max).collect()
    }

    /// Additive mask `[B, N, N]`: `0` where both tokens are real atoms of the
    /// same molecule, `-inf` elsewhere. Padding query rows are fully masked.
    pub fn attention_mask(&self) -> Array {
        let n = self.n_max;
        let mut data = vec![f64::NEG_INFINITY; self.sizes.len() * n * n];
        for (b, &size) in self.sizes.iter().enumerate() {
            for i in 0..size {
                data[b * n * n + i * n..b * n * n + i * n + size].fill(0.0);
            }
        }
        Array::new(vec![self.sizes.len(), n, n], data).expect("shape matches data")
    }

    /// The same mask over the packed sequence of real atoms: block diagonal
    /// with one `n_i × n_i` zero block per molecule.
    pub fn block_diagonal_mask(&self) -> Array {
        let total = self.num_atoms();
        let mut data = vec![f64::NEG_INFINITY; total * total];
        let mut start = 0;
        for &size in &self.sizes {
            for i in start..start + size {
                data[i * total + start..i * total + start + size].fill(0.0);
            }
            start += size;
        }
        Array::new(vec![total, total], data).expect("shape matches data")
    }

    /// Rotates molecule `b` (coordinates and force labels) by `rotations[b]`.
    pub fn rotated(&self, rotations: &[Rotation]) -> Result<Batch> {
        if rotations.len() != self.num_molecules() {
            return Err(Error::InvalidInput(format!(
                "{} rotations for {} molecules",
                rotations.len(),
                self.num_molecules()
            )));
        }
        let rotate = |flat: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; flat.len()];
            for t in 0..self.valid.len() {
                let g = &rotations[t / self.n_max];
                let v: Vec3 = [flat[3 * t], flat[3 * t + 1], flat[3 * t + 2]];
                out[3 * t..3 * t + 3].copy_from_slice(&g.apply(&v));
            }
            out
        };
        Ok(Batch { coordinates: rotate(&self.coordinates), forces: self.forces.as_deref().map(rotate), ..self.clone() })
    }

    /// Replaces the coordinates (same layout); padding rows must stay zero.
    pub fn with_coordinates(&self, coordinates: Vec<f64>) -> Result<Batch> {
        if coordinates.len() != self.coordinates.len() {
            return Err(Error::InvalidInput(format!(
                "{} coordinate values for a batch of {}",
                coordinates.len(),
                self.coordinates.len()
            )));
        }
        Ok(Batch { coordinates, ..self.clone() })
    }

    fn rows(&self, flat: &[f64], b: usize) -> Vec<Vec3> {
        let start = b * self.n_max;
        (start..start + self.sizes[b]).map(|t| [flat[3 * t], flat[3 * t + 1], flat[3 * t + 2]]).collect()
    }

    pub fn molecule(&self, b: usize) -> Result<Molecule> {
        let start = b * self.n_max;
        Molecule::new(
            self.rows(&self.coordinates, b),
            self.atomic_numbers[start..start + self.sizes[b]].to_vec(),
            self.charges[b],
            self.spins[b],
        )
    }

    pub fn molecules(&self) -> Result<Vec<Molecule>> {
        (0..self.num_molecules()).map(|b| self.molecule(b)).collect()
    }

    /// Inverse of [`Batch::from_labeled`].
    pub fn unbatch(&self) -> Result<Vec<LabeledMolecule>> {
        let (Some(e), Some(f)) = (&self.energies, &self.forces) else {
            return Err(Error::InvalidInput("batch carries no labels".into()));
        };
        (0..self.num_molecules()).map(|b| LabeledMolecule::new(self.molecule(b)?, e[b], self.rows(f, b))).collect()
    }
}

/// Greedy packing in input order: a batch is closed when the next molecule
/// would push its atom count past `max_tokens`.
pub fn batch_molecules(mols: &[LabeledMolecule], max_tokens: usize) -> Result<Vec<Batch>> {
    pack(mols.iter().map(LabeledMolecule::len), max_tokens)?
        .into_iter()
        .map(|r| Batch::from_labeled(&mols[r]))
        .collect()
}

/// Index ranges of the greedy packing of molecules with the given sizes.
pub(crate) fn pack(sizes: impl Iterator<Item = usize>, max_tokens: usize) -> Result<Vec<std::ops::Range<usize>>> {
    let mut out = Vec::new();
    let (mut start, mut used) = (0, 0);
    let mut end = 0;
    for (i, n) in sizes.enumerate() {
        if n > max_tokens {
            return Err(Error::InvalidInput(format!("molecule {i} has {n} atoms, more than max_tokens {max_tokens}")));
        }
        if used + n > max_tokens {
            out.push(start..i);
            start = i;
            used = 0;
        }
        used += n;
        end = i + 1;
    }
    if end > start {
        out.push(start..end);
    }
    Ok(out)
}
