use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use transip_tensor::{grad, Array, Tape, Tensor, TensorError};

use crate::checkpoint::{Checkpoint, LoopState};
use crate::losses::{batch_losses, combine, total_loss, LossTerms};
use crate::model::{ModelConfig, TransIp};
use crate::moldata::batch::pack;
use crate::moldata::{Batch, LabeledMolecule, Rotation};
use crate::train::{adamw_step, clip_grad_norm, cosine_warmup_lr, Mode, OptimizerState, TrainConfig};
use crate::{Error, Result};

const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4521;

pub const LOG_FILE: &str = "train_log.jsonl";

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss_total: f64,
    #[serde(rename = "loss_E")]
    pub loss_e: f64,
    #[serde(rename = "loss_F")]
    pub loss_f: f64,
    pub loss_leq: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

impl LogRecord {
    /// Equality of everything except wall-clock time.
    pub fn same_values(&self, other: &LogRecord) -> bool {
        LogRecord { wall_ms: 0.0, ..self.clone() } == LogRecord { wall_ms: 0.0, ..other.clone() }
    }
}

/// Dataset indices of each batch in epoch `epoch` (0-based).
pub fn epoch_batches(sizes: &[usize], seed: u64, epoch: u64, max_tokens: usize) -> Result<Vec<Vec<usize>>> {
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(pack(order.iter().map(|&i| sizes[i]), max_tokens)?.into_iter().map(|r| order[r].to_vec()).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepPlan {
    pub epoch: u64,
    pub indices: Vec<usize>,
}

/// Every step of a run, in order.
pub fn plan(dataset: &[LabeledMolecule], cfg: &TrainConfig) -> Result<Vec<StepPlan>> {
    let sizes: Vec<usize> = dataset.iter().map(LabeledMolecule::len).collect();
    let mut out = Vec::new();
    for epoch in 0..cfg.epochs {
        for indices in epoch_batches(&sizes, cfg.seed, epoch, cfg.batch_max_tokens)? {
            out.push(StepPlan { epoch, indices });
        }
    }
    Ok(out)
}

fn step_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The TransAug input transformation: every molecule and its force labels
/// rotated by a fresh uniform rotation.
pub fn train_aug_rotate(batch: &Batch, rng: &mut dyn RngCore) -> Result<(Batch, Vec<Rotation>)> {
    let rotations: Vec<Rotation> = (0..batch.num_molecules()).map(|_| Rotation::sample_uniform(rng)).collect();
    Ok((batch.rotated(&rotations)?, rotations))
}

/// Model, optimizer state and configuration for step-by-step training.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: TransIp,
    pub cfg: TrainConfig,
    pub state: OptimizerState,
    pub total_steps: u64,
}

impl Trainer {
    pub fn new(model: TransIp, cfg: TrainConfig, total_steps: u64) -> Self {
        let state = OptimizerState::new(model.params());
        Self { model, cfg, state, total_steps }
    }

    /// Loss terms and parameter gradients for `batch` at update `step` (1-based).
    pub fn loss_and_grads(&self, batch: &Batch, step: u64) -> Result<(LossTerms, Vec<Array>)> {
        let weights = self.cfg.effective_weights();
        let mut dropout = step_rng(self.cfg.seed, 2 * step);
        let mut rotation = step_rng(self.cfg.seed, 2 * step + 1);
        let tape = Tape::new();
        let p = self.model.params().bind(Some(&tape))?;
        let terms = match self.cfg.mode {
            Mode::TransIp => total_loss(&self.model, &tape, &p, batch, &weights, &mut rotation, Some(&mut dropout))?,
            Mode::TransAug => {
                let (rotated, _) = train_aug_rotate(batch, &mut rotation)?;
                let losses = batch_losses(&self.model, &tape, &p, &rotated, None, Some(&mut dropout))?;
                combine(&weights, &losses)?
            }
        };
        let refs: Vec<&Tensor> = p.iter().collect();
        let grads = grad(&terms.total, &refs, false)?;
        Ok((terms, grads.into_iter().map(|g| g.value().clone()).collect()))
    }

    /// One optimizer update. `epoch` and `batch_index` only label the log and errors.
    pub fn step(&mut self, batch: &Batch, epoch: u64, batch_index: usize) -> Result<LogRecord> {
        let start = Instant::now();
        let step = self.state.step + 1;
        let non_finite = || Error::NonFiniteLoss { step, batch: batch_index };
        let (terms, mut grads) = match self.loss_and_grads(batch, step) {
            Err(Error::Tensor(TensorError::NonFinite(_))) => return Err(non_finite()),
            other => other?,
        };
        if !terms.total.item().is_finite() {
            return Err(non_finite());
        }
        let grad_norm = clip_grad_norm(&mut grads, self.cfg.grad_clip_norm);
        let lr = cosine_warmup_lr(step, self.total_steps.max(step), &self.cfg)?;
        adamw_step(self.model.params_mut(), &grads, &mut self.state, lr, &self.cfg)?;
        Ok(LogRecord {
            step,
            epoch,
            lr,
            loss_total: terms.total.item(),
            loss_e: terms.energy,
            loss_f: terms.force,
            loss_leq: terms.latent,
            grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    pub fn checkpoint(&self, epoch: u64) -> Checkpoint {
        Checkpoint::from_model(
            &self.model,
            Some(&self.cfg),
            LoopState { step: self.state.step, epoch },
            Some(&self.state),
        )
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Directory for checkpoints and the log; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh initialization.
    pub resume: Option<Checkpoint>,
    /// Called after every step.
    pub on_step: Option<&'a mut dyn FnMut(&LogRecord)>,
}

pub struct TrainOutcome {
    pub model: TransIp,
    pub state: OptimizerState,
    pub log: Vec<LogRecord>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn init_checkpoint_name() -> &'static str {
    "ckpt_init.tipc"
}

pub fn epoch_checkpoint_name(epoch: u64) -> String {
    format!("ckpt_epoch_{epoch:04}.tipc")
}

pub fn final_checkpoint_name() -> &'static str {
    "ckpt_final.tipc"
}

fn save(trainer: &Trainer, epoch: u64, dir: &Path, name: &str, saved: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    trainer.checkpoint(epoch).write(&path)?;
    saved.push(path);
    Ok(())
}

/// Trains for `cfg.epochs` epochs (or the remainder after `opts.resume`).
pub fn train(
    dataset: &[LabeledMolecule],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let steps = plan(dataset, cfg)?;
    let total = steps.len() as u64;
    let (mut trainer, start_epoch) = match opts.resume.take() {
        Some(ckpt) => {
            if &ckpt.model != model_cfg {
                return Err(Error::Incompatible("model configuration differs from the checkpoint".into()));
            }
            if ckpt.train.as_ref() != Some(cfg) {
                return Err(Error::Incompatible("training configuration differs from the checkpoint".into()));
            }
            let model = ckpt.to_model()?;
            let state = ckpt
                .optimizer
                .clone()
                .ok_or_else(|| Error::Incompatible("checkpoint has no optimizer state".into()))?;
            state.check(model.params())?;
            let expected = steps.iter().filter(|s| s.epoch < ckpt.state.epoch).count() as u64;
            if state.step != expected {
                return Err(Error::Incompatible(format!(
                    "checkpoint is at step {} but epoch {} ends at step {expected}",
                    state.step, ckpt.state.epoch
                )));
            }
            (Trainer { model, cfg: cfg.clone(), state, total_steps: total }, ckpt.state.epoch)
        }
        None => (Trainer::new(TransIp::new(model_cfg.clone(), cfg.seed)?, cfg.clone(), total), 0),
    };

    let mut saved = Vec::new();
    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            if start_epoch == 0 {
                save(&trainer, 0, dir, init_checkpoint_name(), &mut saved)?;
            }
            let path = dir.join(LOG_FILE);
            let f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };

    let mut log = Vec::new();
    let mut batch_index = 0;
    for (i, s) in steps.iter().enumerate().skip(trainer.state.step as usize) {
        if i > 0 && steps[i - 1].epoch != s.epoch {
            batch_index = 0;
        }
        let recs: Vec<LabeledMolecule> = s.indices.iter().map(|&k| dataset[k].clone()).collect();
        let batch = Batch::from_labeled(&recs)?;
        let rec = trainer.step(&batch, s.epoch, batch_index)?;
        batch_index += 1;
        if let Some((f, path)) = log_file.as_mut() {
            let line = serde_json::to_string(&rec).expect("log record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        if let Some(cb) = opts.on_step.as_mut() {
            cb(&rec);
        }
        log.push(rec);
        let epoch_done = steps.get(i + 1).is_none_or(|n| n.epoch != s.epoch);
        if epoch_done {
            if let Some(dir) = &opts.out_dir {
                save(&trainer, s.epoch + 1, dir, &epoch_checkpoint_name(s.epoch + 1), &mut saved)?;
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        save(&trainer, cfg.epochs, dir, final_checkpoint_name(), &mut saved)?;
    }
    Ok(TrainOutcome { model: trainer.model, state: trainer.state, log, checkpoints: saved })
}

/// Reads a training log written by [`train`].
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Record {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}
