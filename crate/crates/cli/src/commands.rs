use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use transip::checkpoint::Checkpoint;
use transip::eval::{
    compare_models, latent_equivariance_probe, output_equivariance_probe, read_reports, write_reports,
};
use transip::model::TransIp;
use transip::moldata::{element_params, generate_lj_dataset, read_dataset, write_dataset, LabeledMolecule, Molecule};
use transip::train::{final_checkpoint_name, plan, read_log, train, LogRecord, TrainOptions, LOG_FILE};

use crate::config::RunConfig;
use crate::error::{io_error, CliError, CliResult};
use crate::{Cli, Command, EvalArgs, ExportArgs, GenDataArgs, TrainArgs};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PROBE_FILE: &str = "probe.csv";
pub const PLOT_LOSS_FILE: &str = "plot_loss.csv";
pub const PLOT_METRICS_FILE: &str = "plot_metrics.csv";

/// Settings shared by every subcommand.
struct Global {
    force: bool,
    dry_run: bool,
}

pub fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let g = Global { force: cli.force, dry_run: cli.dry_run };
    let name = command_name(&cli.command);
    match cli.command {
        Command::GenData(args) => {
            apply_common(&mut cfg, cli.seed, cli.out);
            gen_data(cfg, &args, &g, name)
        }
        Command::Train(args) => cmd_train(cfg, cli.seed, cli.out, &args, &g, name),
        Command::Eval(args) => {
            apply_common(&mut cfg, cli.seed, cli.out);
            eval(cfg, &args, &g, name, false)
        }
        Command::Probe(args) => {
            apply_common(&mut cfg, cli.seed, cli.out);
            eval(cfg, &args, &g, name, true)
        }
        Command::ExportPlotData(args) => {
            apply_common(&mut cfg, cli.seed, cli.out);
            export(cfg, &args, &g, name)
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData(_) => "gen-data",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Probe(_) => "probe",
        Command::ExportPlotData(_) => "export-plot-data",
    }
}

fn apply_common(cfg: &mut RunConfig, seed: Option<u64>, out: Option<PathBuf>) {
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    if let Some(o) = out {
        cfg.out = o;
    }
}

/// Resolved configuration echoed for `command`.
fn echo_name(command: &str) -> String {
    format!("{command}.toml")
}

/// Creates the output directory and refuses to overwrite without `--force`.
fn prepare_out(cfg: &RunConfig, files: &[String], g: &Global) -> CliResult<()> {
    if !g.force {
        if let Some(f) = files.iter().find(|f| cfg.out.join(f).exists()) {
            return Err(CliError::Config(format!(
                "{} already exists (pass --force to overwrite)",
                cfg.out.join(f).display()
            )));
        }
    }
    fs::create_dir_all(&cfg.out).map_err(|e| io_error(&cfg.out, e))
}

fn echo(cfg: &RunConfig, command: &str, notes: &[String]) -> CliResult<()> {
    let path = cfg.out.join(echo_name(command));
    let mut text: String = notes.iter().map(|n| format!("# {n}\n")).collect();
    text.push_str(&cfg.to_toml());
    fs::write(&path, text).map_err(|e| io_error(&path, e))
}

fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize)]
struct ElementEntry {
    z: u32,
    epsilon_ev: f64,
    sigma_angstrom: f64,
}

#[derive(Serialize)]
struct Manifest {
    dataset: String,
    sha256: String,
    seed: u64,
    molecules: usize,
    atoms: usize,
    atoms_min: usize,
    atoms_max: usize,
    palette: Vec<u32>,
    mixing: &'static str,
    elements: Vec<ElementEntry>,
}

fn gen_data(mut cfg: RunConfig, args: &GenDataArgs, g: &Global, command: &str) -> CliResult<()> {
    let d = &mut cfg.data;
    d.count = args.count.unwrap_or(d.count);
    d.atoms_min = args.atoms_min.unwrap_or(d.atoms_min);
    d.atoms_max = args.atoms_max.unwrap_or(d.atoms_max);
    if let Some(p) = &args.palette {
        d.palette = p.clone();
    }
    let gen = cfg.data.generator();
    gen.validate()?;
    let files = [DATASET_FILE.to_string(), MANIFEST_FILE.to_string(), echo_name(command)];
    if g.dry_run {
        println!(
            "would write {} molecules ({}-{} atoms, seed {}) to {}",
            gen.count,
            gen.atoms_min,
            gen.atoms_max,
            gen.seed,
            cfg.out.display()
        );
        return Ok(());
    }
    prepare_out(&cfg, &files, g)?;
    let records = generate_lj_dataset(&gen)?;
    let path = cfg.out.join(DATASET_FILE);
    write_dataset(&records, &path)?;
    let manifest = Manifest {
        dataset: DATASET_FILE.into(),
        sha256: sha256_file(&path)?,
        seed: gen.seed,
        molecules: records.len(),
        atoms: records.iter().map(LabeledMolecule::len).sum(),
        atoms_min: gen.atoms_min,
        atoms_max: gen.atoms_max,
        palette: gen.palette.clone(),
        mixing: "lorentz-berthelot",
        elements: gen
            .palette
            .iter()
            .map(|&z| {
                let (epsilon_ev, sigma_angstrom) = element_params(z).expect("palette was validated");
                ElementEntry { z, epsilon_ev, sigma_angstrom }
            })
            .collect(),
    };
    let mpath = cfg.out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, text + "\n").map_err(|e| io_error(&mpath, e))?;
    echo(&cfg, command, &[])?;
    println!("wrote {} molecules to {} (sha256 {})", records.len(), path.display(), manifest.sha256);
    Ok(())
}

fn cmd_train(
    mut cfg: RunConfig,
    seed: Option<u64>,
    out: Option<PathBuf>,
    args: &TrainArgs,
    g: &Global,
    command: &str,
) -> CliResult<()> {
    // A resumed run adopts the checkpoint's settings unless the file overrides them.
    let resume = match &args.resume {
        Some(path) => Some(Checkpoint::read(path)?),
        None => None,
    };
    if let Some(ckpt) = &resume {
        if !cfg.model_given {
            cfg.model = ckpt.model.clone();
        }
        if let Some(t) = &ckpt.train {
            if cfg.train == transip::train::TrainConfig::default() {
                cfg.train = t.clone();
            }
        }
    }
    apply_common(&mut cfg, seed, out);
    if let Some(p) = &args.data {
        cfg.data.train = Some(p.clone());
    }
    let t = &mut cfg.train;
    t.mode = args.mode.unwrap_or(t.mode);
    t.epochs = args.epochs.unwrap_or(t.epochs);
    t.learning_rate = args.learning_rate.unwrap_or(t.learning_rate);
    t.batch_max_tokens = args.batch_max_tokens.unwrap_or(t.batch_max_tokens);
    let m = &mut cfg.model;
    m.hidden_dim = args.hidden_dim.unwrap_or(m.hidden_dim);
    m.num_layers = args.num_layers.unwrap_or(m.num_layers);
    m.num_heads = args.num_heads.unwrap_or(m.num_heads);
    cfg.model.validate()?;
    cfg.train.validate()?;

    let data_path = cfg
        .data
        .train
        .clone()
        .ok_or_else(|| CliError::Config("no training set (pass --data or set data.train)".into()))?;
    let dataset = read_dataset(&data_path)?;
    if dataset.is_empty() {
        return Err(CliError::Data(format!("{} contains no molecules", data_path.display())));
    }
    let steps = plan(&dataset, &cfg.train)?.len();
    if g.dry_run {
        let params = TransIp::new(cfg.model.clone(), cfg.train.seed)?.params().count();
        println!("parameters: {params}");
        println!(
            "molecules: {}, epochs: {}, steps: {steps}, mode: {}",
            dataset.len(),
            cfg.train.epochs,
            cfg.train.mode
        );
        return Ok(());
    }
    if resume.is_none() {
        let files = [LOG_FILE.to_string(), final_checkpoint_name().to_string(), echo_name(command)];
        prepare_out(&cfg, &files, g)?;
        let log = cfg.out.join(LOG_FILE);
        if log.exists() {
            fs::remove_file(&log).map_err(|e| io_error(&log, e))?;
        }
    } else {
        fs::create_dir_all(&cfg.out).map_err(|e| io_error(&cfg.out, e))?;
    }
    echo(&cfg, command, &[format!("dataset {} sha256 {}", data_path.display(), sha256_file(&data_path)?)])?;

    let every = (steps / 20).max(1) as u64;
    let mut progress = |r: &LogRecord| {
        if r.step % every == 0 || r.step == steps as u64 {
            eprintln!(
                "step {:>6}/{steps} epoch {:>3} lr {:.3e} loss {:.5} (E {:.5} F {:.5} leq {:.5})",
                r.step, r.epoch, r.lr, r.loss_total, r.loss_e, r.loss_f, r.loss_leq
            );
        }
    };
    let opts = TrainOptions { out_dir: Some(cfg.out.clone()), resume, on_step: Some(&mut progress) };
    let outcome = train(&dataset, &cfg.model, &cfg.train, opts)?;
    println!(
        "trained {} steps; final checkpoint {}",
        outcome.state.step,
        cfg.out.join(final_checkpoint_name()).display()
    );
    Ok(())
}

fn load_checkpoints(cfg: &RunConfig, args: &EvalArgs) -> CliResult<Vec<(String, TransIp)>> {
    args.checkpoints
        .iter()
        .map(|(name, path)| {
            let ckpt = Checkpoint::read(path)?;
            let model = if cfg.model_given { ckpt.to_model_with(&cfg.model)? } else { ckpt.to_model()? };
            Ok((name.clone(), model))
        })
        .collect()
}

fn load_sets(cfg: &RunConfig, args: &EvalArgs) -> CliResult<Vec<(String, Vec<LabeledMolecule>)>> {
    let mut tagged: BTreeMap<String, PathBuf> = cfg.data.eval.clone();
    tagged.extend(args.data.iter().cloned());
    if tagged.is_empty() {
        return Err(CliError::Config("no evaluation data (pass --data TAG=PATH or set [data.eval])".into()));
    }
    tagged
        .into_iter()
        .map(|(tag, path)| {
            let recs = read_dataset(&path)?;
            if recs.is_empty() {
                return Err(CliError::Data(format!("{} contains no molecules", path.display())));
            }
            Ok((tag, recs))
        })
        .collect()
}

#[derive(Serialize)]
struct ProbeRow<'a> {
    checkpoint: &'a str,
    category: &'a str,
    n: usize,
    rotations: usize,
    seed: u64,
    latent_equiv: f64,
    energy_rotinv_err: f64,
    force_equiv_err: f64,
}

fn eval(mut cfg: RunConfig, args: &EvalArgs, g: &Global, command: &str, probe_only: bool) -> CliResult<()> {
    cfg.probe.rotations = args.rotations.unwrap_or(cfg.probe.rotations);
    if cfg.probe.rotations == 0 || cfg.probe.max_tokens == 0 {
        return Err(CliError::Config("probe rotations and max_tokens must be positive".into()));
    }
    if cfg.model_given {
        cfg.model.validate()?;
    }
    let models = load_checkpoints(&cfg, args)?;
    let sets = load_sets(&cfg, args)?;
    let output = if probe_only { PROBE_FILE } else { METRICS_FILE };
    if g.dry_run {
        println!(
            "would evaluate {} checkpoints on {} datasets into {}",
            models.len(),
            sets.len(),
            cfg.out.join(output).display()
        );
        return Ok(());
    }
    prepare_out(&cfg, &[output.to_string(), echo_name(command)], g)?;
    let path = cfg.out.join(output);
    if probe_only {
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Data(e.to_string()))?;
        for (name, model) in &models {
            for (tag, recs) in &sets {
                let mols: Vec<Molecule> = recs.iter().map(|r| r.molecule.clone()).collect();
                let latent_equiv = latent_equivariance_probe(model, &mols, &cfg.probe)?;
                let (energy_rotinv_err, force_equiv_err) = output_equivariance_probe(model, &mols, &cfg.probe)?;
                let row = ProbeRow {
                    checkpoint: name,
                    category: tag,
                    n: mols.len(),
                    rotations: cfg.probe.rotations,
                    seed: cfg.probe.seed,
                    latent_equiv,
                    energy_rotinv_err,
                    force_equiv_err,
                };
                w.serialize(&row).map_err(|e| CliError::Data(e.to_string()))?;
            }
        }
        w.flush().map_err(|e| io_error(&path, e))?;
    } else {
        compare_models(&models, &sets, &cfg.probe, &path)?;
    }
    echo(&cfg, command, &[])?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct LossRow<'a> {
    run: &'a str,
    step: u64,
    epoch: u64,
    lr: f64,
    loss_total: f64,
    loss_e: f64,
    loss_f: f64,
    loss_leq: f64,
    grad_norm: f64,
}

fn export(cfg: RunConfig, args: &ExportArgs, g: &Global, command: &str) -> CliResult<()> {
    if args.runs.is_empty() && args.metrics.is_empty() {
        return Err(CliError::Config("nothing to export (pass --run and/or --metrics)".into()));
    }
    let logs = args
        .runs
        .iter()
        .map(|(name, dir)| Ok((name.clone(), read_log(dir.join(LOG_FILE))?)))
        .collect::<CliResult<Vec<_>>>()?;
    let mut reports = Vec::new();
    for path in &args.metrics {
        reports.extend(read_reports(path)?);
    }
    if g.dry_run {
        println!("would export {} runs and {} metric rows", logs.len(), reports.len());
        return Ok(());
    }
    prepare_out(&cfg, &[PLOT_LOSS_FILE.to_string(), PLOT_METRICS_FILE.to_string(), echo_name(command)], g)?;
    if !logs.is_empty() {
        let path = cfg.out.join(PLOT_LOSS_FILE);
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Data(e.to_string()))?;
        for (run, log) in &logs {
            for r in log {
                let row = LossRow {
                    run,
                    step: r.step,
                    epoch: r.epoch,
                    lr: r.lr,
                    loss_total: r.loss_total,
                    loss_e: r.loss_e,
                    loss_f: r.loss_f,
                    loss_leq: r.loss_leq,
                    grad_norm: r.grad_norm,
                };
                w.serialize(&row).map_err(|e| CliError::Data(e.to_string()))?;
            }
        }
        w.flush().map_err(|e| io_error(&path, e))?;
        println!("wrote {}", path.display());
    }
    if !reports.is_empty() {
        let path = cfg.out.join(PLOT_METRICS_FILE);
        write_reports(&reports, &path)?;
        println!("wrote {}", path.display());
    }
    echo(&cfg, command, &[])
}
