use std::rc::Rc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transip_tensor::{grad, Array, RopeTable, Tape, Tensor};

use crate::model::params::{normal, truncated_normal};
use crate::model::{ModelConfig, Params};
use crate::moldata::{Batch, Rotation, Vec3};
use crate::{Error, Result};

const INIT_STD: f64 = 0.02;

/// Centered coordinates are snapped to multiples of 2⁻³² Å so that the
/// rounding left over from centering a translated input cannot reach the
/// network.
const COORD_GRID: f64 = 4_294_967_296.0;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Block {
    norm1: Norm,
    qkv: Linear,
    out: Linear,
    norm2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    z_table: usize,
    z_mlp: [Linear; 2],
    r_mlp: [Linear; 2],
    charge_table: usize,
    spin_table: usize,
    blocks: Vec<Block>,
    final_norm: Norm,
    head: [Linear; 2],
    ttau: Vec<Linear>,
}

struct Builder<'a> {
    params: Params,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let w = truncated_normal(&[fan_in, fan_out], INIT_STD, self.rng);
        Linear {
            w: self.params.push(format!("{name}.weight"), w),
            b: self.params.push(format!("{name}.bias"), Array::zeros(&[fan_out])),
        }
    }

    fn norm(&mut self, name: &str, width: usize) -> Norm {
        Norm {
            gain: self.params.push(format!("{name}.gain"), Array::full(&[width], 1.0)),
            bias: self.params.push(format!("{name}.bias"), Array::zeros(&[width])),
        }
    }

    fn table(&mut self, name: &str, rows: usize, width: usize) -> usize {
        let t = normal(&[rows, width], INIT_STD, self.rng);
        self.params.push(format!("{name}.table"), t)
    }
}

fn build(cfg: &ModelConfig, seed: u64) -> (Params, Layout) {
    let d = cfg.hidden_dim;
    let half = d / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder { params: Params::new(), rng: &mut rng };
    let z_table = b.table("kappa_z", cfg.max_atomic_number as usize + 1, half);
    let z_mlp = [b.linear("kappa_z.mlp.0", half, half), b.linear("kappa_z.mlp.1", half, half)];
    let r_mlp = [b.linear("kappa_r.mlp.0", 3, half), b.linear("kappa_r.mlp.1", half, half)];
    let charges = (cfg.charge_range.1 - cfg.charge_range.0 + 1) as usize;
    let spins = (cfg.spin_range.1 - cfg.spin_range.0 + 1) as usize;
    let charge_table = b.table("kappa_chg", charges, d);
    let spin_table = b.table("kappa_spin", spins, d);
    let ff = cfg.feedforward_multiplier * d;
    let blocks = (0..cfg.num_layers)
        .map(|l| Block {
            norm1: b.norm(&format!("layers.{l}.norm1"), d),
            qkv: b.linear(&format!("layers.{l}.attn.qkv"), d, 3 * d),
            out: b.linear(&format!("layers.{l}.attn.out"), d, d),
            norm2: b.norm(&format!("layers.{l}.norm2"), d),
            ff1: b.linear(&format!("layers.{l}.ff.0"), d, ff),
            ff2: b.linear(&format!("layers.{l}.ff.1"), ff, d),
        })
        .collect();
    let final_norm = b.norm("final_norm", d);
    let head = [b.linear("head.0", d, d), b.linear("head.1", d, 1)];
    let hidden = cfg.ttau_hidden_multiplier * d;
    let ttau = (0..cfg.ttau_layers)
        .map(|i| {
            let fan_in = if i == 0 { 9 + d } else { hidden };
            let fan_out = if i + 1 == cfg.ttau_layers { d } else { hidden };
            b.linear(&format!("ttau.{i}"), fan_in, fan_out)
        })
        .collect();
    let layout = Layout { z_table, z_mlp, r_mlp, charge_table, spin_table, blocks, final_norm, head, ttau };
    (b.params, layout)
}

fn apply_linear(x: &Tensor, p: &[Tensor], l: Linear) -> Result<Tensor> {
    Ok(x.linear(&p[l.w], &p[l.b])?)
}

fn mlp2(x: &Tensor, p: &[Tensor], l: &[Linear; 2]) -> Result<Tensor> {
    apply_linear(&apply_linear(x, p, l[0])?.gelu()?, p, l[1])
}

fn dropout(x: Tensor, prob: f64, rng: &mut Option<&mut dyn RngCore>) -> Result<Tensor> {
    match rng {
        Some(r) if prob > 0.0 => Ok(x.dropout(prob, true, &mut **r)?),
        _ => Ok(x),
    }
}

/// Energies and forces for every molecule of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub energies: Vec<f64>,
    pub forces: Vec<Vec<Vec3>>,
}

/// The TransIP model: backbone `f_θ`, energy head `g_φ` and transformation
/// network `T_τ`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransIp {
    config: ModelConfig,
    params: Params,
    layout: Layout,
}

impl TransIp {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, layout) = build(&config, seed);
        Ok(Self { config, params, layout })
    }

    /// A model with the given parameter values, checked against `config`.
    pub fn from_params(config: ModelConfig, entries: Vec<(String, Array)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.load(entries)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Indices of the parameters belonging to `T_τ`.
    pub fn ttau_params(&self) -> Vec<usize> {
        self.layout.ttau.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    /// Batch coordinates as a `[B, N, 3]` tensor, a leaf on `tape` if given.
    pub fn coordinates(&self, batch: &Batch, tape: Option<&Tape>) -> Result<Tensor> {
        let arr = Array::new(vec![batch.num_molecules(), batch.n_max(), 3], batch.coordinates().to_vec())?;
        Ok(match tape {
            Some(t) => t.var(arr)?,
            None => Tensor::constant(arr),
        })
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let cfg = &self.config;
        if batch.n_max() > cfg.context_length {
            return Err(Error::InvalidInput(format!(
                "molecule of {} atoms exceeds context length {}",
                batch.n_max(),
                cfg.context_length
            )));
        }
        if let Some(z) = batch.atomic_numbers().iter().find(|&&z| z > cfg.max_atomic_number) {
            return Err(Error::InvalidInput(format!("atomic number {z} outside the embedding table")));
        }
        let (qlo, qhi) = cfg.charge_range;
        if let Some(q) = batch.charges().iter().find(|&&q| q < qlo || q > qhi) {
            return Err(Error::InvalidInput(format!("charge {q} outside vocabulary [{qlo}, {qhi}]")));
        }
        let (slo, shi) = cfg.spin_range;
        if let Some(s) = batch.spins().iter().find(|&&s| s < slo || s > shi) {
            return Err(Error::InvalidInput(format!("spin {s} outside vocabulary [{slo}, {shi}]")));
        }
        Ok(())
    }

    fn valid3(batch: &Batch) -> Result<Tensor> {
        let a = Array::new(vec![batch.num_molecules(), batch.n_max(), 1], batch.valid().to_vec())?;
        Ok(Tensor::constant(a))
    }

    fn counts(batch: &Batch, shape: Vec<usize>) -> Result<Tensor> {
        let n = batch.sizes().iter().map(|&s| s as f64).collect();
        Ok(Tensor::constant(Array::new(shape, n)?))
    }

    /// Per-molecule centering followed by snapping; `[B, N, 3]` in, `[B·N, 3]` out.
    fn center(coords: &Tensor, batch: &Batch) -> Result<Tensor> {
        let v = Self::valid3(batch)?;
        let x = coords.mul(&v)?;
        let mean = x.sum_axis(1, true)?.div(&Self::counts(batch, vec![batch.num_molecules(), 1, 1])?)?;
        let c = x.sub(&mean)?.mul(&v)?;
        let snapped = c.straight_through(|t| (t * COORD_GRID).round() / COORD_GRID)?;
        Ok(snapped.reshape(&[batch.num_molecules() * batch.n_max(), 3])?)
    }

    /// `c(q, s) = κ_chg(q) + κ_spin(s)` for each molecule, `[B, d]`.
    pub fn global_bias(&self, p: &[Tensor], charges: &[i32], spins: &[u32]) -> Result<Tensor> {
        let (qlo, qhi) = self.config.charge_range;
        let (slo, shi) = self.config.spin_range;
        let mut qi = Vec::with_capacity(charges.len());
        for &q in charges {
            if q < qlo || q > qhi {
                return Err(Error::InvalidInput(format!("charge {q} outside vocabulary [{qlo}, {qhi}]")));
            }
            qi.push((q - qlo) as usize);
        }
        let mut si = Vec::with_capacity(spins.len());
        for &s in spins {
            if s < slo || s > shi {
                return Err(Error::InvalidInput(format!("spin {s} outside vocabulary [{slo}, {shi}]")));
            }
            si.push((s - slo) as usize);
        }
        let c = p[self.layout.charge_table].gather_rows(&qi)?;
        Ok(c.add(&p[self.layout.spin_table].gather_rows(&si)?)?)
    }

    /// Initial tokens `κ_z(z) ⊕ κ_r(r)`, `[B·N, d]`, zero on padding.
    fn embed_tokens(&self, p: &[Tensor], batch: &Batch, centered: &Tensor) -> Result<Tensor> {
        let z: Vec<usize> = batch.atomic_numbers().iter().map(|&z| z as usize).collect();
        let kz = mlp2(&p[self.layout.z_table].gather_rows(&z)?, p, &self.layout.z_mlp)?;
        let kr = mlp2(centered, p, &self.layout.r_mlp)?;
        let rows = batch.num_molecules() * batch.n_max();
        let v = Tensor::constant(Array::new(vec![rows, 1], batch.valid().to_vec())?);
        Ok(Tensor::concat_last(&[&kz, &kr])?.mul(&v)?)
    }

    /// Initial token matrix for a batch, `[B, N, d]`.
    pub fn initial_tokens(&self, p: &[Tensor], batch: &Batch, coords: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let tokens = self.embed_tokens(p, batch, &Self::center(coords, batch)?)?;
        Ok(tokens.reshape(&[batch.num_molecules(), batch.n_max(), self.config.hidden_dim])?)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        p: &[Tensor],
        blk: &Block,
        x: &Tensor,
        dims: (usize, usize),
        rope: &Rc<RopeTable>,
        mask: &Array,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<Tensor> {
        let (b, n) = dims;
        let d = self.config.hidden_dim;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let qkv = apply_linear(x, p, blk.qkv)?;
        let mut heads = Vec::with_capacity(self.config.num_heads);
        for h in 0..self.config.num_heads {
            let q = qkv.narrow_last(h * dh, dh)?.rope(rope)?.reshape(&[b, n, dh])?;
            let k = qkv.narrow_last(d + h * dh, dh)?.rope(rope)?.reshape(&[b, n, dh])?;
            let v = qkv.narrow_last(2 * d + h * dh, dh)?.reshape(&[b, n, dh])?;
            let scores = q.matmul_t(&k, false, true)?.scale(scale)?;
            let attn = dropout(scores.masked_softmax(mask)?, self.config.attention_dropout, rng)?;
            heads.push(attn.matmul(&v)?.reshape(&[b * n, dh])?);
        }
        let refs: Vec<&Tensor> = heads.iter().collect();
        let out = apply_linear(&Tensor::concat_last(&refs)?, p, blk.out)?;
        dropout(out, self.config.projection_dropout, rng)
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        p: &[Tensor],
        blk: &Block,
        x: &Tensor,
        dims: (usize, usize),
        rope: &Rc<RopeTable>,
        mask: &Array,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<Tensor> {
        let eps = self.config.layer_norm_eps;
        let a = x.layer_norm(&p[blk.norm1.gain], &p[blk.norm1.bias], eps)?;
        let x = x.add(&self.attention(p, blk, &a, dims, rope, mask, rng)?)?;
        let f = x.layer_norm(&p[blk.norm2.gain], &p[blk.norm2.bias], eps)?;
        let f = apply_linear(&apply_linear(&f, p, blk.ff1)?.gelu()?, p, blk.ff2)?;
        Ok(x.add(&dropout(f, self.config.projection_dropout, rng)?)?)
    }

    /// `f_θ`: per-atom embeddings `H`, `[B, N, d]` (padding rows are not
    /// meaningful). Dropout is active only when `rng` is given.
    pub fn embed(
        &self,
        p: &[Tensor],
        batch: &Batch,
        coords: &Tensor,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Tensor> {
        let (b, n, d) = (batch.num_molecules(), batch.n_max(), self.config.hidden_dim);
        let mut x = self.initial_tokens(p, batch, coords)?;
        let bias = self.global_bias(p, batch.charges(), batch.spins())?.reshape(&[b, 1, d])?;
        let rope = Rc::new(RopeTable::new(&batch.positions(), self.config.head_dim(), self.config.rope_base)?);
        let mask = batch.attention_mask();
        for blk in &self.layout.blocks {
            let biased = x.add(&bias)?.reshape(&[b * n, d])?;
            x = self.block(p, blk, &biased, (b, n), &rope, &mask, &mut rng)?.reshape(&[b, n, d])?;
        }
        let fin = self.layout.final_norm;
        Ok(x.layer_norm(&p[fin.gain], &p[fin.bias], self.config.layer_norm_eps)?)
    }

    /// Mean over real atoms, `[B, d]`. Each column is summed in sorted order
    /// so the value does not depend on atom order at all, not even in the
    /// last bit; the gradient is that of the plain sum.
    pub fn aggregate(&self, batch: &Batch, h: &Tensor) -> Result<Tensor> {
        let summed = h.mul(&Self::valid3(batch)?)?.sum_axis(1, false)?;
        let (n, d) = (batch.n_max(), h.shape()[2]);
        let mut exact = Vec::with_capacity(summed.numel());
        let mut col = Vec::with_capacity(n);
        for (b, &size) in batch.sizes().iter().enumerate() {
            for k in 0..d {
                col.clear();
                col.extend((0..size).map(|i| h.data()[(b * n + i) * d + k]));
                col.sort_by(f64::total_cmp);
                exact.push(col.iter().sum::<f64>());
            }
        }
        let summed = summed.straight_through_value(Array::new(summed.shape().to_vec(), exact)?)?;
        Ok(summed.div(&Self::counts(batch, vec![batch.num_molecules(), 1])?)?)
    }

    /// `g_φ` applied to pooled embeddings `[B, d]`, giving energies `[B]`.
    pub fn energy_head(&self, p: &[Tensor], pooled: &Tensor) -> Result<Tensor> {
        let e = mlp2(pooled, p, &self.layout.head)?;
        let b = e.shape()[0];
        Ok(e.reshape(&[b])?)
    }

    /// `E_φ = g_φ(a(H))`, `[B]`.
    pub fn energy(&self, p: &[Tensor], batch: &Batch, h: &Tensor) -> Result<Tensor> {
        self.energy_head(p, &self.aggregate(batch, h)?)
    }

    /// `T_τ(φ(g), H)` applied row-wise with molecule `b` using `rotations[b]`.
    pub fn transform(&self, p: &[Tensor], rotations: &[Rotation], h: &Tensor) -> Result<Tensor> {
        let shape = h.shape().to_vec();
        let [b, n, d] = shape[..] else {
            return Err(Error::InvalidInput(format!("embeddings must be [B, N, d], got {shape:?}")));
        };
        if rotations.len() != b {
            return Err(Error::InvalidInput(format!("{} rotations for {b} molecules", rotations.len())));
        }
        let mut feats = Vec::with_capacity(b * n * 9);
        for g in rotations {
            let flat = g.flat();
            for _ in 0..n {
                feats.extend_from_slice(&flat);
            }
        }
        let g = Tensor::constant(Array::new(vec![b * n, 9], feats)?);
        let mut x = Tensor::concat_last(&[&g, &h.reshape(&[b * n, d])?])?;
        let last = self.layout.ttau.len() - 1;
        for (i, l) in self.layout.ttau.iter().enumerate() {
            x = apply_linear(&x, p, *l)?;
            if i < last {
                x = x.gelu()?;
            }
        }
        Ok(x.reshape(&[b, n, d])?)
    }

    /// Inference: energies and conservative forces, dropout off.
    pub fn predict(&self, batch: &Batch) -> Result<Prediction> {
        let tape = Tape::new();
        let p = self.params.bind(None)?;
        let coords = self.coordinates(batch, Some(&tape))?;
        let h = self.embed(&p, batch, &coords, None)?;
        let e = self.energy(&p, batch, &h)?;
        e.ensure_finite("energy")?;
        let g = grad(&e.sum_all()?, &[&coords], false)?.remove(0);
        let mut forces = Vec::with_capacity(batch.num_molecules());
        for (b, &size) in batch.sizes().iter().enumerate() {
            let start = b * batch.n_max();
            let rows = (start..start + size).map(|t| std::array::from_fn(|k| -g.data()[3 * t + k])).collect();
            forces.push(rows);
        }
        Ok(Prediction { energies: e.data().to_vec(), forces })
    }

    /// Inference energies only; cheaper than [`TransIp::predict`].
    pub fn energies(&self, batch: &Batch) -> Result<Vec<f64>> {
        let p = self.params.bind(None)?;
        let coords = self.coordinates(batch, None)?;
        let e = self.energy(&p, batch, &self.embed(&p, batch, &coords, None)?)?;
        e.ensure_finite("energy")?;
        Ok(e.data().to_vec())
    }

    /// Final embeddings of each molecule with padding rows removed.
    pub fn embeddings(&self, batch: &Batch) -> Result<Vec<Array>> {
        let p = self.params.bind(None)?;
        let coords = self.coordinates(batch, None)?;
        let h = self.embed(&p, batch, &coords, None)?;
        Ok(split_rows(h.value(), batch))
    }

    /// `T_τ(φ(g_b), H_b)` for each molecule with padding rows removed.
    pub fn transformed_embeddings(&self, batch: &Batch, rotations: &[Rotation]) -> Result<Vec<Array>> {
        let p = self.params.bind(None)?;
        let coords = self.coordinates(batch, None)?;
        let h = self.embed(&p, batch, &coords, None)?;
        Ok(split_rows(self.transform(&p, rotations, &h)?.value(), batch))
    }
}

/// Splits a `[B, N, d]` array into per-molecule `[n_b, d]` arrays.
pub(crate) fn split_rows(h: &Array, batch: &Batch) -> Vec<Array> {
    let d = h.last_dim();
    batch
        .sizes()
        .iter()
        .enumerate()
        .map(|(b, &size)| {
            let start = b * batch.n_max() * d;
            Array::new(vec![size, d], h.data()[start..start + size * d].to_vec()).expect("row slice")
        })
        .collect()
}
