//! Molecules, rotations, the Lennard-Jones oracle, batching and dataset files.

pub(crate) mod batch;
mod io;
mod lj;
mod molecule;
mod rotation;

pub use batch::{batch_molecules, Batch};
pub use io::{decode_record, encode_record, read_dataset, write_dataset};
pub use lj::{
    charge_spin_offset, element_params, generate_lj_dataset, generate_record, lj_energy_forces, mixed_params,
    split_validation, GeneratorConfig, LjOracle, DEFAULT_PALETTE, ELEMENT_TABLE,
};
pub use molecule::{center_coordinates, center_positions, LabeledMolecule, Molecule, Vec3, MAX_ATOMS};
pub use rotation::Rotation;

use rand::Rng;

/// `(m, g, φ(g) m)` with a fresh uniform rotation `g`.
pub fn make_equivariance_pair<R: Rng + ?Sized>(m: &Molecule, rng: &mut R) -> (Molecule, Rotation, Molecule) {
    let g = Rotation::sample_uniform(rng);
    let rotated = m.rotated(&g);
    (m.clone(), g, rotated)
}
