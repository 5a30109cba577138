//! Accuracy metrics, equivariance probes and checkpoint comparison.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::losses::{latent_distance, LatentModel};
use crate::model::TransIp;
use crate::moldata::batch::pack;
use crate::moldata::{Batch, LabeledMolecule, LjOracle, Molecule, Rotation, Vec3};
use crate::{Error, Result};

/// Column order of the comparison CSV.
pub const CSV_HEADER: [&str; 10] = [
    "checkpoint",
    "category",
    "n",
    "force_mae",
    "force_cos",
    "energy_atom_mae",
    "energy_total_mae",
    "latent_equiv",
    "energy_rotinv_err",
    "force_equiv_err",
];

fn check_shapes(a: &[Vec3], b: &[Vec3]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidInput(format!("force arrays of {} and {} rows", a.len(), b.len())));
    }
    Ok(())
}

/// Mean absolute error over all `3|m|` components.
pub fn force_mae(f_pred: &[Vec3], f_true: &[Vec3]) -> Result<f64> {
    check_shapes(f_pred, f_true)?;
    let s: f64 = f_pred.iter().zip(f_true).flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs())).sum();
    Ok(s / (3 * f_pred.len()) as f64)
}

/// Per-atom cosine similarity averaged over atoms; a zero-norm row counts as 0.
pub fn force_cosine(f_pred: &[Vec3], f_true: &[Vec3]) -> Result<f64> {
    check_shapes(f_pred, f_true)?;
    let norm = |v: &Vec3| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let s: f64 = f_pred
        .iter()
        .zip(f_true)
        .map(|(a, b)| {
            let (na, nb) = (norm(a), norm(b));
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                ((a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (na * nb)).clamp(-1.0, 1.0)
            }
        })
        .sum();
    Ok(s / f_pred.len() as f64)
}

/// `(|E − E*| / |m|, |E − E*|)`.
pub fn energy_metrics(e_pred: f64, e_true: f64, atom_count: usize) -> (f64, f64) {
    let total = (e_pred - e_true).abs();
    (total / atom_count.max(1) as f64, total)
}

/// Sum with `O(log n)` error growth.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        pairwise_sum(xs) / xs.len() as f64
    }
}

/// Anything that predicts energies and forces for molecules.
pub trait Potential {
    fn energy_forces(&self, mols: &[Molecule]) -> Result<Vec<(f64, Vec<Vec3>)>>;
}

/// Token budget used when a model evaluates many molecules.
pub const EVAL_MAX_TOKENS: usize = 512;

impl Potential for TransIp {
    fn energy_forces(&self, mols: &[Molecule]) -> Result<Vec<(f64, Vec<Vec3>)>> {
        let mut out = Vec::with_capacity(mols.len());
        let budget = mols.iter().map(Molecule::len).max().unwrap_or(1).max(EVAL_MAX_TOKENS);
        for r in pack(mols.iter().map(Molecule::len), budget)? {
            let pred = self.predict(&Batch::from_molecules(&mols[r])?)?;
            out.extend(pred.energies.into_iter().zip(pred.forces));
        }
        Ok(out)
    }
}

impl Potential for LjOracle {
    fn energy_forces(&self, mols: &[Molecule]) -> Result<Vec<(f64, Vec<Vec3>)>> {
        mols.iter().map(|m| LjOracle::energy_forces(self, m)).collect()
    }
}

/// Rotation `r` of molecule `i` in a probe: independent of packing and order.
pub fn probe_rotations(count: usize, per_molecule: usize, seed: u64) -> Vec<Vec<Rotation>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            (0..per_molecule).map(|_| Rotation::sample_uniform(&mut rng)).collect()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub rotations: usize,
    pub seed: u64,
    /// Token budget per evaluation batch.
    pub max_tokens: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { rotations: 8, seed: 1234, max_tokens: EVAL_MAX_TOKENS }
    }
}

fn check_rotations(mols: &[Molecule], rotations: &[Vec<Rotation>]) -> Result<()> {
    if rotations.len() != mols.len() {
        return Err(Error::InvalidInput(format!("rotation lists for {} of {} molecules", rotations.len(), mols.len())));
    }
    Ok(())
}

/// Mean latent equivariance loss over every `(molecule, rotation)` pair.
pub fn latent_equivariance_probe_with(
    model: &impl LatentModel,
    mols: &[Molecule],
    rotations: &[Vec<Rotation>],
    max_tokens: usize,
) -> Result<f64> {
    check_rotations(mols, rotations)?;
    let pairs: Vec<(usize, usize)> =
        rotations.iter().enumerate().flat_map(|(i, rs)| (0..rs.len()).map(move |r| (i, r))).collect();
    let mut values = vec![0.0; pairs.len()];
    for range in pack(pairs.iter().map(|&(i, _)| mols[i].len()), max_tokens)? {
        let chunk = &pairs[range.clone()];
        let originals: Vec<Molecule> = chunk.iter().map(|&(i, _)| mols[i].clone()).collect();
        let gs: Vec<Rotation> = chunk.iter().map(|&(i, r)| rotations[i][r]).collect();
        let rotated: Vec<Molecule> = originals.iter().zip(&gs).map(|(m, g)| m.rotated(g)).collect();
        let f_rot = model.embed(&rotated)?;
        let t = model.transform(&originals, &gs)?;
        for (k, (a, b)) in f_rot.iter().zip(&t).enumerate() {
            values[range.start + k] = latent_distance(a, b)?;
        }
    }
    Ok(mean(&values))
}

/// [`latent_equivariance_probe_with`] using seeded uniform rotations.
pub fn latent_equivariance_probe(model: &impl LatentModel, mols: &[Molecule], probe: &ProbeConfig) -> Result<f64> {
    let rotations = probe_rotations(mols.len(), probe.rotations, probe.seed);
    latent_equivariance_probe_with(model, mols, &rotations, probe.max_tokens)
}

/// Mean `|E(gm) − E(m)|` and mean per-component `|F(gm) − R F(m)|` over
/// every `(molecule, rotation)` pair.
pub fn output_equivariance_probe_with(
    model: &impl Potential,
    mols: &[Molecule],
    rotations: &[Vec<Rotation>],
) -> Result<(f64, f64)> {
    check_rotations(mols, rotations)?;
    let base = model.energy_forces(mols)?;
    let (mut rotated, mut owners) = (Vec::new(), Vec::new());
    for (i, rs) in rotations.iter().enumerate() {
        for g in rs {
            rotated.push(mols[i].rotated(g));
            owners.push((i, *g));
        }
    }
    let out = model.energy_forces(&rotated)?;
    let mut e_err = Vec::with_capacity(out.len());
    let mut f_err = Vec::with_capacity(out.len());
    for ((e, f), (i, g)) in out.iter().zip(&owners) {
        let (e0, f0) = &base[*i];
        e_err.push((e - e0).abs());
        let expected: Vec<Vec3> = f0.iter().map(|v| g.apply(v)).collect();
        f_err.push(force_mae(f, &expected)?);
    }
    Ok((mean(&e_err), mean(&f_err)))
}

pub fn output_equivariance_probe(model: &impl Potential, mols: &[Molecule], probe: &ProbeConfig) -> Result<(f64, f64)> {
    let rotations = probe_rotations(mols.len(), probe.rotations, probe.seed);
    output_equivariance_probe_with(model, mols, &rotations)
}

/// Dataset-level accuracy: `(force_mae, force_cos, energy_atom_mae, energy_total_mae)`,
/// each a uniform mean of per-molecule values.
pub fn accuracy_metrics(model: &impl Potential, data: &[LabeledMolecule]) -> Result<(f64, f64, f64, f64)> {
    let mols: Vec<Molecule> = data.iter().map(|r| r.molecule.clone()).collect();
    let preds = model.energy_forces(&mols)?;
    let (mut fm, mut fc, mut ea, mut et) = (vec![], vec![], vec![], vec![]);
    for ((e, f), rec) in preds.iter().zip(data) {
        fm.push(force_mae(f, &rec.forces)?);
        fc.push(force_cosine(f, &rec.forces)?);
        let (a, t) = energy_metrics(*e, rec.energy, rec.len());
        ea.push(a);
        et.push(t);
    }
    Ok((mean(&fm), mean(&fc), mean(&ea), mean(&et)))
}

/// One row of the comparison CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub checkpoint: String,
    pub category: String,
    pub n: usize,
    pub force_mae: f64,
    pub force_cos: f64,
    pub energy_atom_mae: f64,
    pub energy_total_mae: f64,
    pub latent_equiv: f64,
    pub energy_rotinv_err: f64,
    pub force_equiv_err: f64,
}

/// Every metric and probe of `model` on `data`.
pub fn evaluate(
    model: &TransIp,
    data: &[LabeledMolecule],
    checkpoint: &str,
    category: &str,
    probe: &ProbeConfig,
) -> Result<MetricReport> {
    let (force_mae, force_cos, energy_atom_mae, energy_total_mae) = accuracy_metrics(model, data)?;
    let mols: Vec<Molecule> = data.iter().map(|r| r.molecule.clone()).collect();
    let latent_equiv = latent_equivariance_probe(model, &mols, probe)?;
    let (energy_rotinv_err, force_equiv_err) = output_equivariance_probe(model, &mols, probe)?;
    Ok(MetricReport {
        checkpoint: checkpoint.to_string(),
        category: category.to_string(),
        n: data.len(),
        force_mae,
        force_cos,
        energy_atom_mae,
        energy_total_mae,
        latent_equiv,
        energy_rotinv_err,
        force_equiv_err,
    })
}

pub fn write_reports(reports: &[MetricReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for r in reports {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_reports(path: impl AsRef<Path>) -> Result<Vec<MetricReport>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::Record { path: path.to_path_buf(), line: 1, msg: format!("unexpected header {header:?}") });
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Evaluates every `(checkpoint, category)` pair and writes the CSV.
pub fn compare_models(
    checkpoints: &[(String, TransIp)],
    datasets: &[(String, Vec<LabeledMolecule>)],
    probe: &ProbeConfig,
    out_path: impl AsRef<Path>,
) -> Result<Vec<MetricReport>> {
    let mut reports = Vec::new();
    for (name, model) in checkpoints {
        for (category, data) in datasets {
            reports.push(evaluate(model, data, name, category, probe)?);
        }
    }
    write_reports(&reports, out_path)?;
    Ok(reports)
}
