//! Energy, force and latent-equivariance losses and their weighted sum.

use rand::RngCore;
use serde::{Deserialize, Serialize};
use transip_tensor::{grad, Array, Tape, Tensor};

use crate::model::TransIp;
use crate::moldata::{Batch, Molecule, Rotation, Vec3};
use crate::{Error, Result};

/// `λ_E`, `λ_F`, `λ_leq`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub energy: f64,
    pub force: f64,
    pub latent: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { energy: 5.0, force: 15.0, latent: 5.0 }
    }
}

impl LossWeights {
    pub fn new(energy: f64, force: f64, latent: f64) -> Self {
        Self { energy, force, latent }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("energy", self.energy), ("force", self.force), ("latent", self.latent)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {w} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(self.energy * factor, self.force * factor, self.latent * factor)
    }
}

/// `|E_pred − E_true| / |m|`.
pub fn energy_loss(e_pred: f64, e_true: f64, atom_count: usize) -> f64 {
    (e_pred - e_true).abs() / atom_count.max(1) as f64
}

/// `‖F_pred − F_true‖²_F / (3|m|)`.
pub fn force_loss(f_pred: &[Vec3], f_true: &[Vec3]) -> Result<f64> {
    if f_pred.len() != f_true.len() || f_pred.is_empty() {
        return Err(Error::InvalidInput(format!("force arrays of {} and {} rows", f_pred.len(), f_true.len())));
    }
    let sq: f64 = f_pred.iter().zip(f_true).flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).powi(2))).sum();
    Ok(sq / (3 * f_pred.len()) as f64)
}

/// `‖f(φ(g) m) − T_τ(φ(g), f(m))‖² / (|m|·d)` from the two `[|m|, d]` matrices.
pub fn latent_distance(rotated: &Array, transformed: &Array) -> Result<f64> {
    if rotated.shape() != transformed.shape() || rotated.rank() != 2 || rotated.is_empty() {
        return Err(Error::InvalidInput(format!(
            "embedding shapes {:?} and {:?}",
            rotated.shape(),
            transformed.shape()
        )));
    }
    let sq: f64 = rotated.data().iter().zip(transformed.data()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(sq / rotated.len() as f64)
}

/// A model with a per-atom embedding `f` and a transformation network `T`.
pub trait LatentModel {
    /// `f(m)`, `[|m|, d]` per molecule.
    fn embed(&self, mols: &[Molecule]) -> Result<Vec<Array>>;

    /// `T(φ(g_i), f(m_i))` per molecule.
    fn transform(&self, mols: &[Molecule], rotations: &[Rotation]) -> Result<Vec<Array>>;
}

impl LatentModel for TransIp {
    fn embed(&self, mols: &[Molecule]) -> Result<Vec<Array>> {
        self.embeddings(&Batch::from_molecules(mols)?)
    }

    fn transform(&self, mols: &[Molecule], rotations: &[Rotation]) -> Result<Vec<Array>> {
        self.transformed_embeddings(&Batch::from_molecules(mols)?, rotations)
    }
}

/// Latent equivariance loss of one molecule and rotation.
pub fn latent_equivariance_loss(model: &impl LatentModel, g: &Rotation, m: &Molecule) -> Result<f64> {
    let rotated = model.embed(&[m.rotated(g)])?.remove(0);
    let transformed = model.transform(std::slice::from_ref(m), std::slice::from_ref(g))?.remove(0);
    latent_distance(&rotated, &transformed)
}

/// Unweighted batch-mean losses, each a scalar tensor.
#[derive(Clone, Debug)]
pub struct BatchLosses {
    pub energy: Tensor,
    pub force: Tensor,
    pub latent: Option<Tensor>,
}

/// Weighted objective plus the unweighted component values.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Tensor,
    pub energy: f64,
    pub force: f64,
    pub latent: f64,
}

fn reborrow<'a>(r: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match r {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

fn per_molecule(batch: &Batch, f: impl Fn(usize) -> f64) -> Result<Tensor> {
    let v = batch.sizes().iter().map(|&n| f(n)).collect();
    Ok(Tensor::constant(Array::new(vec![batch.num_molecules()], v)?))
}

/// Energy and force losses (and the latent loss when `latent_rotations` is
/// given) for a labeled batch. Parameters `p` must be bound to `tape`; forces
/// are taken with `create_graph` so every term is differentiable in `p`.
pub fn batch_losses(
    model: &TransIp,
    tape: &Tape,
    p: &[Tensor],
    batch: &Batch,
    latent_rotations: Option<&[Rotation]>,
    mut dropout: Option<&mut dyn RngCore>,
) -> Result<BatchLosses> {
    let (Some(e_true), Some(f_true)) = (batch.energies(), batch.forces()) else {
        return Err(Error::InvalidInput("batch carries no labels".into()));
    };
    let (b, n) = (batch.num_molecules(), batch.n_max());
    let d = model.config().hidden_dim;
    let coords = model.coordinates(batch, Some(tape))?;
    let h = model.embed(p, batch, &coords, reborrow(&mut dropout))?;
    let e = model.energy(p, batch, &h)?;
    let gx = grad(&e.sum_all()?, &[&coords], true)?.remove(0);

    let e_true = Tensor::constant(Array::new(vec![b], e_true.to_vec())?);
    let energy = e.sub(&e_true)?.abs()?.div(&per_molecule(batch, |n| n as f64)?)?.mean_all()?;

    // F = -∇E, so F - F* = -(∇E + F*).
    let f_true = Tensor::constant(Array::new(vec![b, n, 3], f_true.to_vec())?);
    let sq = gx.add(&f_true)?.square()?.sum_axis(2, false)?.sum_axis(1, false)?;
    let force = sq.div(&per_molecule(batch, |n| 3.0 * n as f64)?)?.mean_all()?;

    let latent = match latent_rotations {
        None => None,
        Some(rotations) => {
            let rotated = batch.rotated(rotations)?;
            let rc = model.coordinates(&rotated, None)?;
            let h_rot = model.embed(p, &rotated, &rc, reborrow(&mut dropout))?;
            let t = model.transform(p, rotations, &h)?;
            let v = Tensor::constant(Array::new(vec![b, n, 1], batch.valid().to_vec())?);
            let sq = h_rot.sub(&t)?.mul(&v)?.square()?.sum_axis(2, false)?.sum_axis(1, false)?;
            Some(sq.div(&per_molecule(batch, |n| (n * d) as f64)?)?.mean_all()?)
        }
    };
    Ok(BatchLosses { energy, force, latent })
}

/// `λ_E L_E + λ_F L_F + λ_leq L_leq`; a missing latent term counts as zero.
pub fn combine(weights: &LossWeights, losses: &BatchLosses) -> Result<LossTerms> {
    let mut total = losses.energy.scale(weights.energy)?.add(&losses.force.scale(weights.force)?)?;
    let mut latent = 0.0;
    if let Some(l) = &losses.latent {
        total = total.add(&l.scale(weights.latent)?)?;
        latent = l.item();
    }
    Ok(LossTerms { total, energy: losses.energy.item(), force: losses.force.item(), latent })
}

/// The training objective for one batch. With `λ_leq > 0` one uniform
/// rotation per molecule is drawn from `rotation_rng`; otherwise no rotation
/// is sampled and the latent branch is skipped.
pub fn total_loss(
    model: &TransIp,
    tape: &Tape,
    p: &[Tensor],
    batch: &Batch,
    weights: &LossWeights,
    rotation_rng: &mut dyn RngCore,
    dropout: Option<&mut dyn RngCore>,
) -> Result<LossTerms> {
    let rotations: Option<Vec<Rotation>> = (weights.latent > 0.0)
        .then(|| (0..batch.num_molecules()).map(|_| Rotation::sample_uniform(rotation_rng)).collect());
    let losses = batch_losses(model, tape, p, batch, rotations.as_deref(), dropout)?;
    combine(weights, &losses)
}
