//! The five commands as library calls.

use std::path::{Path, PathBuf};

use msn_core::data::{samples_to_records, synthetic_multistyle};
use msn_core::eval::{evaluate, predict_each, EvalOptions, EvalReport};
use msn_core::model::{Mode, Msn, Noise, Prepared, PredictionSet};
use msn_core::train::{initialize, train as fit, EpochLog};
use msn_core::ParamStore;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::dataset::{load_dataset, synthetic_spec};
use crate::error::{Error, Result};
use crate::report::{write_eval, write_inspect, write_keels, write_predictions, write_text, LossLog};
use crate::trajfile::format_records;

pub const CONFIG_FILE: &str = "config.txt";
pub const INIT_CHECKPOINT: &str = "init_checkpoint.txt";
pub const CHECKPOINT: &str = "checkpoint.txt";
pub const LOSS_CSV: &str = "loss.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_SUMMARY: &str = "eval_summary.txt";
pub const PREDICTIONS_CSV: &str = "predictions.csv";
pub const SYNTH_FILE: &str = "synth.txt";

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Architecture from the config with parameters from `checkpoint`.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(Msn, ParamStore)> {
    cfg.validate()?;
    let (net, mut store) = Msn::build(cfg.model, cfg.seed)?;
    load_checkpoint(checkpoint, &mut store)?;
    Ok((net, store))
}

pub struct TrainOutcome {
    pub net: Msn,
    pub store: ParamStore,
    pub logs: Vec<EpochLog>,
}

/// Writes `config.txt`, `init_checkpoint.txt`, `loss.csv` (row by row) and
/// finally `checkpoint.txt` into `out`.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure_dir(out)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_text())?;
    let data = load_dataset(cfg)?;
    let tc = cfg.train_config();
    let (net, mut store) = Msn::build(cfg.model, cfg.seed)?;
    match &cfg.init {
        Some(path) => load_checkpoint(path, &mut store)?,
        None => initialize(&net, &mut store, &data.train, &tc)?,
    }
    save_checkpoint(&out.join(INIT_CHECKPOINT), &store)?;
    let mut log = LossLog::create(&out.join(LOSS_CSV))?;
    let mut io_err = None;
    let result = fit(&net, &mut store, &data.train, &tc, |l, params| {
        if io_err.is_some() {
            return;
        }
        io_err = log.push(l).err();
        if cfg.checkpoint_every > 0 && l.epoch % cfg.checkpoint_every == 0 && io_err.is_none() {
            io_err = save_checkpoint(&out.join(format!("checkpoint_epoch{}.txt", l.epoch)), params).err();
        }
    });
    if let Some(e) = io_err {
        return Err(e);
    }
    let logs = result?;
    save_checkpoint(&out.join(CHECKPOINT), &store)?;
    Ok(TrainOutcome { net, store, logs })
}

pub fn eval_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions {
        mode: cfg.mode,
        draws: cfg.draws,
        noise: noise(cfg),
        filter: cfg.filter,
        ..EvalOptions::default()
    }
}

fn noise(cfg: &RunConfig) -> Noise {
    match cfg.mode {
        Mode::Deterministic => Noise::Zero,
        Mode::Stochastic => Noise::Seeded(cfg.seed),
    }
}

/// Best-of-N on the test split; writes `eval.csv` and `eval_summary.txt`.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<EvalReport> {
    let (net, store) = load_model(cfg, checkpoint)?;
    let data = load_dataset(cfg)?;
    ensure_dir(out)?;
    let report = evaluate(&net, &store, &data.test, &eval_options(cfg))?;
    write_eval(&out.join(EVAL_CSV), &report)?;
    write_text(&out.join(EVAL_SUMMARY), &summary(&report))?;
    Ok(report)
}

pub fn summary(r: &EvalReport) -> String {
    format!(
        "minADE={} minFDE={} N={} K_c={} k={} samples={}\n",
        r.min_ade,
        r.min_fde,
        r.n,
        r.channels,
        r.draws,
        r.records.len()
    )
}

fn predict_all(net: &Msn, store: &ParamStore, cfg: &RunConfig, data: &[Prepared]) -> Result<Vec<PredictionSet>> {
    let mut sets = Vec::with_capacity(data.len());
    for chunk in data.chunks(64) {
        sets.extend(predict_each(net, store, chunk, cfg.mode, cfg.draws, noise(cfg))?);
    }
    Ok(sets)
}

/// Dumps every test-split prediction to `predictions.csv`.
pub fn predict(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<Vec<PredictionSet>> {
    let (net, store) = load_model(cfg, checkpoint)?;
    let data = load_dataset(cfg)?;
    ensure_dir(out)?;
    let sets = predict_all(&net, &store, cfg, &data.test)?;
    write_predictions(&out.join(PREDICTIONS_CSV), &sets)?;
    Ok(sets)
}

/// Output file names for one inspected sample.
pub struct InspectFiles {
    pub proposals: PathBuf,
    pub keels: PathBuf,
    pub predictions: PathBuf,
    pub svg: PathBuf,
}

impl InspectFiles {
    pub fn new(out: &Path, sample: usize) -> Self {
        Self {
            proposals: out.join(format!("inspect_{sample}.csv")),
            keels: out.join(format!("inspect_{sample}_keels.csv")),
            predictions: out.join(format!("inspect_{sample}_predictions.csv")),
            svg: out.join(format!("inspect_{sample}.svg")),
        }
    }
}

/// Per-channel proposals, keels and predictions of one test sample, plus a plot.
pub fn inspect(cfg: &RunConfig, checkpoint: &Path, sample_id: usize, out: &Path) -> Result<InspectFiles> {
    let (net, store) = load_model(cfg, checkpoint)?;
    let data = load_dataset(cfg)?;
    let sample = data
        .test
        .iter()
        .find(|s| s.id == sample_id)
        .ok_or_else(|| Error::Config(format!("no test sample {sample_id} (test split has {})", data.test.len())))?;
    ensure_dir(out)?;
    let set = predict_all(&net, &store, cfg, std::slice::from_ref(sample))?.remove(0);
    let files = InspectFiles::new(out, sample_id);
    write_inspect(&files.proposals, sample, &set)?;
    write_keels(&files.keels, &set)?;
    write_predictions(&files.predictions, std::slice::from_ref(&set))?;
    write_text(&files.svg, &crate::svg::render(sample, &set))?;
    Ok(files)
}

/// Writes the synthetic data set as an annotation file; returns its path.
pub fn synth(cfg: &RunConfig, file: Option<&Path>, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let path = match file {
        Some(p) => p.to_path_buf(),
        None => {
            ensure_dir(out)?;
            out.join(SYNTH_FILE)
        }
    };
    let samples = synthetic_multistyle(&synthetic_spec(cfg))?;
    let text = format!(
        "# synthetic multi-style data: {} agents, {} modes, sigma {} m, seed {}\n{}",
        cfg.synth_n,
        cfg.synth_modes,
        cfg.synth_sigma,
        cfg.seed,
        format_records(&samples_to_records(&samples))
    );
    write_text(&path, &text)?;
    Ok(path)
}
