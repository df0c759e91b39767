//! Run configuration: a preset, then `key=value` lines from a file, then
//! command-line overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use msn_core::model::{Mode, MsnConfig};
use msn_core::train::{Seeding, TrainConfig};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: MsnConfig,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: Mode,
    /// Noise draws per channel for the stochastic head.
    pub draws: usize,
    /// `synth` or a comma-separated list of annotation files, one per clip.
    pub data: String,
    /// Holds `<clip>.scene` files; a clip without one gets empty grids.
    pub scene_dir: Option<PathBuf>,
    /// Clip held out for testing; `None` trains and tests on everything.
    pub held_out: Option<String>,
    pub stride: usize,
    pub synth_n: usize,
    pub synth_modes: usize,
    pub synth_sigma: f64,
    /// Trailing share of the synthetic samples used as the test split.
    pub test_fraction: f64,
    pub filter: bool,
    pub seeding: Seeding,
    /// Parameter name prefixes to update; empty updates everything.
    pub trainable: Vec<String>,
    /// Checkpoint to start training from instead of a fresh init.
    pub init: Option<PathBuf>,
    /// Also write `checkpoint_epoch<N>.txt` every this many epochs; 0 is off.
    pub checkpoint_every: usize,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let train = TrainConfig::desk(1);
        let base = Self {
            preset: name.to_string(),
            model: MsnConfig::desk(),
            lr: train.lr,
            epochs: train.epochs,
            batch_size: train.batch_size,
            seed: 1,
            mode: Mode::Deterministic,
            draws: 1,
            data: "synth".into(),
            scene_dir: None,
            held_out: None,
            stride: 1,
            synth_n: 3000,
            synth_modes: 3,
            synth_sigma: 0.05,
            test_fraction: 0.2,
            filter: false,
            seeding: train.seeding,
            trainable: Vec::new(),
            init: None,
            checkpoint_every: 0,
        };
        match name {
            "desk" => Ok(base),
            "paper" => Ok(Self {
                model: MsnConfig::paper(),
                epochs: 800,
                ..base
            }),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected desk or paper)"))),
        }
    }

    /// Sets one field by name. Short names from the model description are
    /// accepted as aliases (`L`, `H`, `d`, `K_c`, `d_z`, `t_h`, `t_f`, `k`).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{key}={value}: {e}"));
        macro_rules! parse {
            () => {
                value.parse().map_err(|e| bad(&e))?
            };
        }
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key.trim() {
            "obs_len" | "t_h" => self.model.obs_len = parse!(),
            "pred_len" | "t_f" => self.model.pred_len = parse!(),
            "channels" | "K_c" | "Kc" => self.model.channels = parse!(),
            "num_layers" | "L" => self.model.num_layers = parse!(),
            "num_heads" | "H" => self.model.num_heads = parse!(),
            "model_dim" | "d" => self.model.model_dim = parse!(),
            "mlp_hidden" => self.model.mlp_hidden = parse!(),
            "latent_dim" | "d_z" => self.model.latent_dim = parse!(),
            "patch" => self.model.patch = parse!(),
            "cell_size" => self.model.cell_size = parse!(),
            "lr" => self.lr = parse!(),
            "epochs" => self.epochs = parse!(),
            "batch_size" | "batch" => self.batch_size = parse!(),
            "seed" => self.seed = parse!(),
            "mode" => {
                self.mode = match value {
                    "deterministic" | "d" => Mode::Deterministic,
                    "stochastic" | "g" => Mode::Stochastic,
                    _ => return Err(bad(&"expected deterministic or stochastic")),
                }
            }
            "draws" | "k" => self.draws = parse!(),
            "data" => self.data = value.to_string(),
            "scene_dir" => self.scene_dir = path(value),
            "held_out" => self.held_out = (!value.is_empty()).then(|| value.to_string()),
            "stride" => self.stride = parse!(),
            "synth_n" => self.synth_n = parse!(),
            "synth_modes" => self.synth_modes = parse!(),
            "synth_sigma" => self.synth_sigma = parse!(),
            "test_fraction" => self.test_fraction = parse!(),
            "filter" => self.filter = parse!(),
            "seeding" => {
                self.seeding = match value {
                    "random" => Seeding::Random,
                    "kmeans" => Seeding::KMeansPlusPlus {
                        scale: self.seed_scale().unwrap_or(0.25),
                    },
                    _ => return Err(bad(&"expected kmeans or random")),
                }
            }
            "seed_scale" => {
                let scale: f64 = parse!();
                if let Seeding::KMeansPlusPlus { scale: s } = &mut self.seeding {
                    *s = scale;
                } else {
                    return Err(bad(&"seed_scale needs seeding=kmeans"));
                }
            }
            "trainable" => {
                self.trainable = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "init" => self.init = path(value),
            "checkpoint_every" => self.checkpoint_every = parse!(),
            "preset" => return Err(bad(&"the preset is applied before any other key")),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    fn seed_scale(&self) -> Option<f64> {
        match self.seeding {
            Seeding::KMeansPlusPlus { scale } => Some(scale),
            Seeding::Random => None,
        }
    }

    /// Applies every `key=value` line of `text`. `preset` lines are skipped;
    /// see [`preset_in`].
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, key, value) in key_values(text, origin)? {
            if key == "preset" {
                continue;
            }
            self.set(key, value).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: i,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.num_heads == 0 || m.model_dim % m.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim d={} must be divisible by num_heads H={}",
                m.model_dim, m.num_heads
            )));
        }
        m.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.draws == 0 || self.stride == 0 {
            return Err(Error::Config("batch_size, draws and stride must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!("test_fraction must be in [0, 1), got {}", self.test_fraction)));
        }
        if self.data == "synth" && (self.synth_modes < 2 || self.synth_n == 0) {
            return Err(Error::Config("synthetic data needs synth_modes >= 2 and synth_n >= 1".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            mode: self.mode,
            seeding: self.seeding,
            trainable: self.trainable.clone(),
        }
    }

    /// Canonical `key=value` listing that [`RunConfig::apply_text`] reads back.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("preset", self.preset.clone());
        kv("obs_len", m.obs_len.to_string());
        kv("pred_len", m.pred_len.to_string());
        kv("channels", m.channels.to_string());
        kv("num_layers", m.num_layers.to_string());
        kv("num_heads", m.num_heads.to_string());
        kv("model_dim", m.model_dim.to_string());
        kv("mlp_hidden", m.mlp_hidden.to_string());
        kv("latent_dim", m.latent_dim.to_string());
        kv("patch", m.patch.to_string());
        kv("cell_size", m.cell_size.to_string());
        kv("lr", self.lr.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("seed", self.seed.to_string());
        kv(
            "mode",
            match self.mode {
                Mode::Deterministic => "deterministic",
                Mode::Stochastic => "stochastic",
            }
            .into(),
        );
        kv("draws", self.draws.to_string());
        kv("data", self.data.clone());
        kv("scene_dir", opt(&self.scene_dir));
        kv("held_out", self.held_out.clone().unwrap_or_default());
        kv("stride", self.stride.to_string());
        kv("synth_n", self.synth_n.to_string());
        kv("synth_modes", self.synth_modes.to_string());
        kv("synth_sigma", self.synth_sigma.to_string());
        kv("test_fraction", self.test_fraction.to_string());
        kv("filter", self.filter.to_string());
        match self.seeding {
            Seeding::Random => kv("seeding", "random".into()),
            Seeding::KMeansPlusPlus { scale } => {
                kv("seeding", "kmeans".into());
                kv("seed_scale", scale.to_string());
            }
        }
        kv("trainable", self.trainable.join(","));
        kv("init", opt(&self.init));
        kv("checkpoint_every", self.checkpoint_every.to_string());
        out
    }
}

/// The `preset` named in a config text, if any.
pub fn preset_in(text: &str, origin: &Path) -> Result<Option<String>> {
    Ok(key_values(text, origin)?
        .into_iter()
        .rev()
        .find(|(_, k, _)| *k == "preset")
        .map(|(_, _, v)| v.to_string()))
}

fn key_values<'a>(text: &'a str, origin: &Path) -> Result<Vec<(usize, &'a str, &'a str)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            msg: format!("expected key=value, found `{line}`"),
        })?;
        out.push((i + 1, k.trim(), v.trim()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_preset_values() {
        let c = RunConfig::preset("paper").unwrap();
        let m = &c.model;
        assert_eq!((m.num_layers, m.num_heads, m.model_dim, m.channels), (4, 8, 128, 20));
        assert_eq!((m.obs_len, m.pred_len), (8, 12));
        assert_eq!(c.lr, 3e-4);
        assert_eq!(c.epochs, 800);
        c.validate().unwrap();
    }

    #[test]
    fn desk_preset_values() {
        let c = RunConfig::preset("desk").unwrap();
        let m = &c.model;
        assert_eq!((m.num_layers, m.num_heads, m.model_dim), (2, 4, 32));
        assert!((3..=5).contains(&m.channels));
        assert_eq!((c.epochs, c.batch_size), (300, 32));
        c.validate().unwrap();
        assert!(RunConfig::preset("huge").is_err());
    }

    #[test]
    fn indivisible_heads_are_rejected_by_name() {
        let mut c = RunConfig::preset("desk").unwrap();
        c.set("d", "30").unwrap();
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("divisible") && msg.contains("d=30") && msg.contains("H=4"), "{msg}");
    }

    #[test]
    fn text_round_trip_and_line_numbers() {
        let mut c = RunConfig::preset("desk").unwrap();
        c.set("K_c", "5").unwrap();
        c.set("mode", "stochastic").unwrap();
        c.set("trainable", "mlp_g, style").unwrap();
        c.set("seed_scale", "0.5").unwrap();
        c.set("init", "ck.txt").unwrap();
        let text = c.to_text();
        let mut back = RunConfig::preset("desk").unwrap();
        back.apply_text(&text, Path::new("mem")).unwrap();
        assert_eq!(back, c);
        assert_eq!(preset_in(&text, Path::new("mem")).unwrap().as_deref(), Some("desk"));
        let err = back.apply_text("# c\nlr=0.1\nlr=fast\n", Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(back.apply_text("lr 0.1\n", Path::new("mem")).is_err());
        assert!(back.set("colour", "red").is_err());
    }
}
