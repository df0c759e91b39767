use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands;
use crate::config::{preset_in, RunConfig};
use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "msn", version, about = "Multi-style trajectory forecasting")]
pub struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Root seed for initialization, data, shuffling and noise.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// desk or paper; defaults to the config file's preset, else desk.
    #[arg(long, global = true, value_name = "NAME")]
    pub preset: Option<String>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from scratch or from `init`; writes checkpoints and loss.csv.
    Train(Overrides),
    /// Best-of-N metrics on the test split.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
        /// Defaults to OUT/checkpoint.txt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Dump every test-split prediction.
    Predict {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-channel proposals, keels, predictions and a plot for one test sample.
    Inspect {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        sample: usize,
    },
    /// Write the synthetic multi-style data set as an annotation file.
    Synth {
        #[command(flatten)]
        overrides: Overrides,
        /// Defaults to OUT/synth.txt.
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

#[derive(Debug, Args, Default, Clone)]
pub struct Overrides {
    /// `synth` or comma-separated annotation files.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// deterministic or stochastic.
    #[arg(long)]
    pub mode: Option<String>,
    /// Noise draws per channel; selects the stochastic head.
    #[arg(long = "k")]
    pub k: Option<usize>,
    /// Number of style channels.
    #[arg(long = "Kc")]
    pub kc: Option<usize>,
    /// Apply the direction filter before scoring.
    #[arg(long)]
    pub filter: bool,
    /// Any other field, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Cli {
    fn overrides(&self) -> &Overrides {
        match &self.command {
            Command::Train(o) => o,
            Command::Eval { overrides, .. }
            | Command::Predict { overrides, .. }
            | Command::Inspect { overrides, .. }
            | Command::Synth { overrides, .. } => overrides,
        }
    }

    /// Preset, then config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        let file_preset = match (&text, &self.config) {
            (Some(t), Some(p)) => preset_in(t, p)?,
            _ => None,
        };
        let name = self.preset.clone().or(file_preset).unwrap_or_else(|| "desk".into());
        let mut cfg = RunConfig::preset(&name)?;
        if let (Some(t), Some(p)) = (&text, &self.config) {
            cfg.apply_text(t, p)?;
        }
        let o = self.overrides();
        for kv in &o.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k, v)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &o.data {
            cfg.data = d.clone();
        }
        if let Some(lr) = o.lr {
            cfg.lr = lr;
        }
        if let Some(e) = o.epochs {
            cfg.epochs = e;
        }
        if let Some(k) = o.k {
            cfg.draws = k;
            cfg.mode = msn_core::model::Mode::Stochastic;
        }
        if let Some(m) = &o.mode {
            cfg.set("mode", m)?;
        }
        if let Some(kc) = o.kc {
            cfg.model.channels = kc;
        }
        if o.filter {
            cfg.filter = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs the parsed command; messages for the operator go to stdout.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.resolve()?;
    let out = &cli.out;
    let ck = |c: &Option<PathBuf>| c.clone().unwrap_or_else(|| out.join(commands::CHECKPOINT));
    match &cli.command {
        Command::Train(_) => {
            let t = commands::train(&cfg, out)?;
            if let Some(last) = t.logs.last() {
                println!(
                    "trained {} epochs: l_sty {} l_ad {} l_kl {}",
                    last.epoch, last.loss.l_sty, last.loss.l_ad, last.loss.l_kl
                );
            }
            println!("wrote {}", out.join(commands::CHECKPOINT).display());
        }
        Command::Eval { checkpoint, .. } => {
            let r = commands::eval(&cfg, &ck(checkpoint), out)?;
            print!("{}", commands::summary(&r));
        }
        Command::Predict { checkpoint, .. } => {
            let sets = commands::predict(&cfg, &ck(checkpoint), out)?;
            println!("wrote {} samples to {}", sets.len(), out.join(commands::PREDICTIONS_CSV).display());
        }
        Command::Inspect { checkpoint, sample, .. } => {
            let f = commands::inspect(&cfg, &ck(checkpoint), *sample, out)?;
            println!("wrote {} and {}", f.proposals.display(), f.svg.display());
        }
        Command::Synth { file, .. } => {
            let p = commands::synth(&cfg, file.as_deref(), out)?;
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}
