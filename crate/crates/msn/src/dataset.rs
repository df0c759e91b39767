//! Train/test samples from a run configuration.

use std::path::{Path, PathBuf};

use msn_core::data::{leave_one_out_split, sliding_window_samples, synthetic_multistyle, Sample, SyntheticSpec, WindowSpec};
use msn_core::model::{prepare, Prepared};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::scenefile::load_scene;
use crate::trajfile::load_trajectory_file;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Prepared>,
    pub test: Vec<Prepared>,
}

pub fn synthetic_spec(cfg: &RunConfig) -> SyntheticSpec {
    let mut spec = SyntheticSpec::new(cfg.synth_n, cfg.synth_modes, cfg.synth_sigma, cfg.seed);
    spec.obs_len = cfg.model.obs_len;
    spec.pred_len = cfg.model.pred_len;
    spec
}

/// Clip name of an annotation file: its stem.
pub fn clip_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    if cfg.data == "synth" {
        let samples = synthetic_multistyle(&synthetic_spec(cfg))?;
        let n_test = (samples.len() as f64 * cfg.test_fraction).round() as usize;
        let cut = samples.len() - n_test;
        let prep = |s: &[Sample]| s.iter().map(|s| prepare(s, None, &cfg.model)).collect::<msn_core::Result<Vec<_>>>();
        return Ok(Dataset {
            train: prep(&samples[..cut])?,
            test: renumber(prep(&samples[cut..])?),
        });
    }
    let paths: Vec<PathBuf> = cfg
        .data
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(PathBuf::from)
        .collect();
    if paths.is_empty() {
        return Err(Error::Config("data names no files".into()));
    }
    let names: Vec<String> = paths.iter().map(|p| clip_name(p)).collect();
    let (train_clips, test_clips) = match &cfg.held_out {
        Some(h) => {
            let split = leave_one_out_split(&names, h)?;
            (split.train, split.test)
        }
        None => {
            log::warn!("no held_out clip: testing on the training clips");
            (names.clone(), names.clone())
        }
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (path, name) in paths.iter().zip(&names) {
        let (in_train, in_test) = (train_clips.contains(name), test_clips.contains(name));
        if !in_train && !in_test {
            continue;
        }
        let prepared = load_clip(cfg, path, name)?;
        if in_train {
            train.extend(prepared.iter().cloned());
        }
        if in_test {
            test.extend(prepared);
        }
    }
    Ok(Dataset {
        train: renumber(train),
        test: renumber(test),
    })
}

fn load_clip(cfg: &RunConfig, path: &Path, name: &str) -> Result<Vec<Prepared>> {
    let trajectories = load_trajectory_file(path)?;
    let spec = WindowSpec {
        obs_len: cfg.model.obs_len,
        pred_len: cfg.model.pred_len,
        stride: cfg.stride,
    };
    let samples = sliding_window_samples(&trajectories, spec, Some(name))?;
    let scene = match &cfg.scene_dir {
        Some(dir) => load_scene(&dir.join(format!("{name}.scene")))?,
        None => None,
    };
    log::info!("{name}: {} agents, {} samples", trajectories.len(), samples.len());
    Ok(samples
        .iter()
        .map(|s| prepare(s, scene.as_ref(), &cfg.model))
        .collect::<msn_core::Result<Vec<_>>>()?)
}

fn renumber(mut v: Vec<Prepared>) -> Vec<Prepared> {
    for (i, p) in v.iter_mut().enumerate() {
        p.id = i;
    }
    v
}
