//! Trajectories, windowed samples, dataset splits and the synthetic
//! multi-style generator.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Frame interval of the standard benchmarks, in seconds.
pub const FRAME_INTERVAL: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub frame_id: i64,
    pub pos: Point,
}

/// One agent's positions at uniformly spaced frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub agent_id: i64,
    frames: Vec<Frame>,
}

impl Trajectory {
    /// Frames must be strictly increasing with a constant stride.
    pub fn new(agent_id: i64, frames: Vec<Frame>) -> Result<Self> {
        if let [a, b, ..] = frames[..] {
            let stride = b.frame_id - a.frame_id;
            if stride <= 0 {
                return Err(Error::Contract(format!("agent {agent_id}: frames not increasing")));
            }
            if frames.windows(2).any(|w| w[1].frame_id - w[0].frame_id != stride) {
                return Err(Error::Contract(format!("agent {agent_id}: non-uniform frame stride")));
            }
        }
        Ok(Self { agent_id, frames })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn positions(&self) -> Vec<Point> {
        self.frames.iter().map(|f| f.pos).collect()
    }

    /// Frame spacing, or `None` for fewer than two frames.
    pub fn stride(&self) -> Option<i64> {
        match self.frames[..] {
            [a, b, ..] => Some(b.frame_id - a.frame_id),
            _ => None,
        }
    }

    /// Frames whose id lies in `first..=last`.
    pub fn segment(&self, first: i64, last: i64) -> Option<Trajectory> {
        let frames: Vec<Frame> = self
            .frames
            .iter()
            .filter(|f| f.frame_id >= first && f.frame_id <= last)
            .copied()
            .collect();
        (!frames.is_empty()).then(|| Trajectory {
            agent_id: self.agent_id,
            frames,
        })
    }
}

/// One annotation record `frame_id agent_id x y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record {
    pub frame_id: i64,
    pub agent_id: i64,
    pub pos: Point,
}

/// Groups records by agent, sorts each agent by frame and drops agents whose
/// frames are not uniformly spaced (or repeat a frame). Agents come out in
/// ascending id order.
pub fn group_records(records: &[Record]) -> Vec<Trajectory> {
    let mut by_agent: BTreeMap<i64, Vec<Frame>> = BTreeMap::new();
    for r in records {
        by_agent.entry(r.agent_id).or_default().push(Frame {
            frame_id: r.frame_id,
            pos: r.pos,
        });
    }
    by_agent
        .into_iter()
        .filter_map(|(agent, mut frames)| {
            frames.sort_by_key(|f| f.frame_id);
            match Trajectory::new(agent, frames) {
                Ok(t) => Some(t),
                Err(e) => {
                    log::warn!("skipping agent: {e}");
                    None
                }
            }
        })
        .collect()
}

/// Observed/future split of one agent window.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub agent_id: i64,
    /// Frame id of the first observed step.
    pub start_frame: i64,
    pub obs: Vec<Point>,
    pub future: Vec<Point>,
    /// Other agents' segments inside the observed part of the window.
    pub neighbors: Vec<Trajectory>,
    /// Scene the sample was cut from, if any.
    pub scene: Option<String>,
    /// Generating mode for synthetic samples.
    pub mode: Option<usize>,
}

impl Sample {
    pub fn last_obs(&self) -> Point {
        *self.obs.last().expect("observed segment is non-empty")
    }

    pub fn endpoint(&self) -> Point {
        *self.future.last().expect("future segment is non-empty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub obs_len: usize,
    pub pred_len: usize,
    /// Window start advance, in agent steps.
    pub stride: usize,
}

impl WindowSpec {
    pub fn bandwidth(&self) -> usize {
        self.obs_len + self.pred_len
    }
}

/// Cuts every agent into windows of `obs_len + pred_len` consecutive frames
/// advancing by `stride`. Agents shorter than one window yield nothing.
pub fn sliding_window_samples(trajectories: &[Trajectory], spec: WindowSpec, scene: Option<&str>) -> Result<Vec<Sample>> {
    if spec.obs_len == 0 || spec.pred_len == 0 || spec.stride == 0 {
        return Err(Error::Config(format!("window lengths and stride must be >= 1: {spec:?}")));
    }
    let bw = spec.bandwidth();
    let mut out = Vec::new();
    for traj in trajectories {
        if traj.len() < bw {
            continue;
        }
        let frames = traj.frames();
        let mut start = 0;
        while start + bw <= frames.len() {
            let window = &frames[start..start + bw];
            let first = window[0].frame_id;
            let last_obs = window[spec.obs_len - 1].frame_id;
            let neighbors = trajectories
                .iter()
                .filter(|o| o.agent_id != traj.agent_id)
                .filter_map(|o| o.segment(first, last_obs))
                .collect();
            out.push(Sample {
                id: out.len(),
                agent_id: traj.agent_id,
                start_frame: first,
                obs: window[..spec.obs_len].iter().map(|f| f.pos).collect(),
                future: window[spec.obs_len..].iter().map(|f| f.pos).collect(),
                neighbors,
                scene: scene.map(String::from),
                mode: None,
            });
            start += spec.stride;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Holds out one clip for testing and trains on the rest.
pub fn leave_one_out_split(clips: &[String], held_out: &str) -> Result<DatasetSplit> {
    if !clips.iter().any(|c| c == held_out) {
        return Err(Error::Config(format!("unknown clip {held_out}; known clips: {clips:?}")));
    }
    let train: Vec<String> = clips.iter().filter(|c| *c != held_out).cloned().collect();
    if train.is_empty() {
        log::warn!("leave-one-out split of a single clip has no training data");
    }
    Ok(DatasetSplit {
        train,
        val: Vec::new(),
        test: alloc::vec![String::from(held_out)],
    })
}

/// Parameters of the synthetic branching dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub n_agents: usize,
    pub modes: usize,
    /// Standard deviation of the per-point future noise, meters.
    pub noise_sigma: f64,
    pub seed: u64,
    pub obs_len: usize,
    pub pred_len: usize,
    /// Walking speed, meters per second.
    pub speed: f64,
    /// Seconds between frames.
    pub dt: f64,
    /// Angle between the outermost branches, degrees.
    pub spread_deg: f64,
}

impl SyntheticSpec {
    pub fn new(n_agents: usize, modes: usize, noise_sigma: f64, seed: u64) -> Self {
        Self {
            n_agents,
            modes,
            noise_sigma,
            seed,
            obs_len: 8,
            pred_len: 12,
            speed: 1.0,
            dt: FRAME_INTERVAL,
            spread_deg: 120.0,
        }
    }

    /// Branch headings in radians, evenly spread and symmetric about 0.
    pub fn headings(&self) -> Vec<f64> {
        let spread = self.spread_deg.to_radians();
        (0..self.modes)
            .map(|m| -spread / 2.0 + spread * m as f64 / (self.modes - 1) as f64)
            .collect()
    }

    /// Noise-free endpoint of every mode relative to the last observed point.
    pub fn mode_endpoints(&self) -> Vec<Point> {
        let reach = self.speed * self.dt * self.pred_len as f64;
        self.headings()
            .into_iter()
            .map(|h| [reach * libm::cos(h), reach * libm::sin(h)])
            .collect()
    }
}

/// Agents walk straight along +x at constant speed, ending their observation
/// at the origin, then branch into one of `modes` equally likely headings.
/// Each future point receives isotropic Gaussian noise. Every agent occupies
/// its own block of frames, so samples have no neighbors.
pub fn synthetic_multistyle(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    if spec.modes < 2 {
        return Err(Error::Config(format!("synthetic data needs at least 2 modes, got {}", spec.modes)));
    }
    if spec.noise_sigma < 0.0 || spec.obs_len == 0 || spec.pred_len == 0 {
        return Err(Error::Config(format!("invalid synthetic spec {spec:?}")));
    }
    let ends = spec.mode_endpoints();
    let mut min_sep = f64::INFINITY;
    for (i, a) in ends.iter().enumerate() {
        for b in &ends[i + 1..] {
            min_sep = min_sep.min(libm::hypot(a[0] - b[0], a[1] - b[1]));
        }
    }
    if min_sep < 6.0 * spec.noise_sigma {
        return Err(Error::Config(format!(
            "endpoint modes {min_sep:.3} m apart are closer than 6 sigma = {:.3} m",
            6.0 * spec.noise_sigma
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(format!("{e}")))?;
    let step = spec.speed * spec.dt;
    let headings = spec.headings();
    let bw = (spec.obs_len + spec.pred_len) as i64;
    let mut out = Vec::with_capacity(spec.n_agents);
    for i in 0..spec.n_agents {
        let mode = rng.gen_range(0..spec.modes);
        let (c, s) = (libm::cos(headings[mode]), libm::sin(headings[mode]));
        let obs = (0..spec.obs_len)
            .map(|t| [-step * (spec.obs_len - 1 - t) as f64, 0.0])
            .collect();
        let future = (1..=spec.pred_len)
            .map(|j| {
                let r = step * j as f64;
                [r * c + noise.sample(&mut rng), r * s + noise.sample(&mut rng)]
            })
            .collect();
        out.push(Sample {
            id: i,
            agent_id: i as i64,
            start_frame: i as i64 * bw,
            obs,
            future,
            neighbors: Vec::new(),
            scene: None,
            mode: Some(mode),
        });
    }
    Ok(out)
}

/// Flattens samples back into annotation records (one agent per sample).
pub fn samples_to_records(samples: &[Sample]) -> Vec<Record> {
    let mut out = Vec::new();
    for s in samples {
        for (t, p) in s.obs.iter().chain(&s.future).enumerate() {
            out.push(Record {
                frame_id: s.start_frame + t as i64,
                agent_id: s.agent_id,
                pos: *p,
            });
        }
    }
    out
}
