//! The assembled two-stage network: configuration, sample preparation,
//! training losses and multi-style prediction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::context::{
    build_context_map, sample_context_sequence, RepresentationEmbedder, SceneGrid, DEFAULT_CELL_SIZE, DEFAULT_PATCH,
};
use crate::data::{Point, Sample, Trajectory, Frame};
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::predict::{keel_batch, kl_loss, DeterministicHead, InteractionNet, StochasticHead};
use crate::style::{stylized_loss, winner_endpoints, CategoryAssignment, StyleGenerator};
use crate::tape::{Tape, Var};
use crate::transformer::{Transformer, TransformerConfig};

/// Cells on each side of the agent in the scene-free context grid.
const LOCAL_GRID_HALF: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsnConfig {
    pub obs_len: usize,
    pub pred_len: usize,
    /// Number of style channels `K_c`.
    pub channels: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub mlp_hidden: usize,
    pub latent_dim: usize,
    /// Context patch side, cells.
    pub patch: usize,
    /// Context cell size, meters.
    pub cell_size: f64,
}

impl MsnConfig {
    /// Full-size model.
    pub fn paper() -> Self {
        Self {
            obs_len: 8,
            pred_len: 12,
            channels: 20,
            num_layers: 4,
            num_heads: 8,
            model_dim: 128,
            mlp_hidden: 512,
            latent_dim: 32,
            patch: DEFAULT_PATCH,
            cell_size: DEFAULT_CELL_SIZE,
        }
    }

    /// Small model for single-core runs.
    pub fn desk() -> Self {
        Self {
            obs_len: 8,
            pred_len: 12,
            channels: 3,
            num_layers: 2,
            num_heads: 4,
            model_dim: 32,
            mlp_hidden: 64,
            latent_dim: 8,
            patch: DEFAULT_PATCH,
            cell_size: DEFAULT_CELL_SIZE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.transformer(2).validate()?;
        if self.obs_len == 0 || self.pred_len == 0 || self.channels == 0 || self.latent_dim == 0 {
            return Err(Error::Config(format!(
                "horizons, channels and latent_dim must be >= 1: {self:?}"
            )));
        }
        if self.patch % 2 == 0 {
            return Err(Error::Config(format!("patch must be odd, got {}", self.patch)));
        }
        if !(self.cell_size > 0.0) {
            return Err(Error::Config(format!("cell_size must be positive, got {}", self.cell_size)));
        }
        Ok(())
    }

    fn transformer(&self, target_dim: usize) -> TransformerConfig {
        TransformerConfig {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            model_dim: self.model_dim,
            mlp_hidden: self.mlp_hidden,
            input_dim: self.model_dim,
            target_dim,
            output_dim: self.model_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Deterministic,
    Stochastic,
}

/// A sample in network coordinates (last observed point at the origin) with
/// its context sequences precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub id: usize,
    /// World position of the last observed point.
    pub origin: Point,
    pub obs: Vec<Point>,
    pub future: Vec<Point>,
    /// `t_h x patch^2`
    pub ctx_obs: Vec<f64>,
    /// `(t_h + 1) x patch^2`
    pub ctx_ext: Vec<f64>,
    pub mode: Option<usize>,
}

impl Prepared {
    pub fn endpoint(&self) -> Point {
        *self.future.last().expect("future is non-empty")
    }

    pub fn to_world(&self, p: Point) -> Point {
        [p[0] + self.origin[0], p[1] + self.origin[1]]
    }

    pub fn world_obs(&self) -> Vec<Point> {
        self.obs.iter().map(|p| self.to_world(*p)).collect()
    }

    pub fn world_future(&self) -> Vec<Point> {
        self.future.iter().map(|p| self.to_world(*p)).collect()
    }
}

/// Builds the context map, samples the context sequences and re-expresses
/// the trajectory relative to its last observed point.
pub fn prepare(sample: &Sample, scene: Option<&SceneGrid>, cfg: &MsnConfig) -> Result<Prepared> {
    if sample.obs.len() != cfg.obs_len || sample.future.len() != cfg.pred_len {
        return Err(Error::Contract(format!(
            "sample {} has {}+{} steps, model expects {}+{}",
            sample.id,
            sample.obs.len(),
            sample.future.len(),
            cfg.obs_len,
            cfg.pred_len
        )));
    }
    let origin = sample.last_obs();
    let local;
    let grid = match scene {
        Some(s) => s,
        None => {
            local = SceneGrid::empty_around(origin, LOCAL_GRID_HALF, cfg.cell_size)?;
            &local
        }
    };
    let target = Trajectory::new(
        sample.agent_id,
        sample
            .obs
            .iter()
            .enumerate()
            .map(|(i, p)| Frame { frame_id: sample.start_frame + i as i64, pos: *p })
            .collect(),
    )?;
    let map = build_context_map(&target, &sample.neighbors, grid, cfg.pred_len);
    let ctx_obs = sample_context_sequence(&map, &sample.obs, cfg.obs_len, cfg.patch)?.into_data();
    let ctx_ext = sample_context_sequence(&map, &sample.obs, cfg.obs_len + 1, cfg.patch)?.into_data();
    let rel = |p: &Point| [p[0] - origin[0], p[1] - origin[1]];
    Ok(Prepared {
        id: sample.id,
        origin,
        obs: sample.obs.iter().map(rel).collect(),
        future: sample.future.iter().map(rel).collect(),
        ctx_obs,
        ctx_ext,
        mode: sample.mode,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub l_sty: f64,
    pub l_ad: f64,
    pub l_kl: f64,
    pub total: f64,
}

/// One predicted trajectory and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub channel: usize,
    /// Noise draw index; always 0 for the deterministic head.
    pub draw: usize,
    pub points: Vec<Point>,
}

/// All outputs for one sample, in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub sample_id: usize,
    /// One endpoint proposal per channel.
    pub proposals: Vec<Point>,
    /// One interpolation keel per channel.
    pub keels: Vec<Vec<Point>>,
    /// Channel-major, then draw.
    pub predictions: Vec<Prediction>,
}

/// How stochastic predictions draw their noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Noise {
    /// `z = 0`: the mode of every channel's latent distribution.
    Zero,
    /// Standard normal draws from a generator seeded with this value.
    Seeded(u64),
}

/// Network architecture; parameter values live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Msn {
    pub cfg: MsnConfig,
    pub embed_b: RepresentationEmbedder,
    pub tran_b: Transformer,
    pub style: StyleGenerator,
    pub interaction: InteractionNet,
    pub head_d: DeterministicHead,
    pub head_g: StochasticHead,
}

/// Stage-1 intermediates for a batch.
#[derive(Debug, Clone, Copy)]
pub struct StageOne<'t> {
    pub x_obs: Var<'t>,
    pub h_alpha: Var<'t>,
    /// `[B x K_c x 2]`
    pub endpoints: Var<'t>,
}

fn stack_points(batch: &[&Prepared], pick: impl Fn(&Prepared) -> &[Point]) -> Vec<f64> {
    batch.iter().flat_map(|s| pick(s).iter().flatten().copied()).collect()
}

impl Msn {
    /// Builds the architecture and its initial parameters from `seed`.
    pub fn build(cfg: MsnConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.model_dim;
        let embed_b = RepresentationEmbedder::new(&mut store, "rep_b", d, cfg.patch, &mut rng)?;
        let tran_b = Transformer::new(&mut store, "tran_b", cfg.transformer(2), &mut rng)?;
        let style = StyleGenerator::new(&mut store, "style", cfg.channels, cfg.obs_len, d, &mut rng)?;
        let interaction = InteractionNet {
            embed: RepresentationEmbedder::new(&mut store, "rep_i", d, cfg.patch, &mut rng)?,
            tran_i: Transformer::new(&mut store, "tran_i", cfg.transformer(2), &mut rng)?,
        };
        let head_d = DeterministicHead::new(&mut store, "mlp_d", d, &mut rng)?;
        let head_g = StochasticHead::new(&mut store, "mlp_g", d, cfg.latent_dim, &mut rng)?;
        Ok((
            Self {
                cfg,
                embed_b,
                tran_b,
                style,
                interaction,
                head_d,
                head_g,
            },
            store,
        ))
    }

    fn check_batch(&self, batch: &[&Prepared]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let p2 = self.cfg.patch * self.cfg.patch;
        for s in batch {
            if s.obs.len() != self.cfg.obs_len
                || s.future.len() != self.cfg.pred_len
                || s.ctx_obs.len() != self.cfg.obs_len * p2
                || s.ctx_ext.len() != (self.cfg.obs_len + 1) * p2
            {
                return Err(Error::Contract(format!("sample {} does not match the model geometry", s.id)));
            }
        }
        Ok(())
    }

    pub fn stage_one<'t>(&self, tape: &'t Tape, store: &ParamStore, batch: &[&Prepared]) -> Result<StageOne<'t>> {
        self.check_batch(batch)?;
        let (b, t_h, p2) = (batch.len(), self.cfg.obs_len, self.cfg.patch * self.cfg.patch);
        let x_obs = tape.constant_from(&[b, t_h, 2], stack_points(batch, |s| &s.obs))?;
        let ctx = tape.constant_from(&[b, t_h, p2], batch.iter().flat_map(|s| s.ctx_obs.iter().copied()).collect())?;
        let f = self.embed_b.forward(tape, store, x_obs, ctx)?.f;
        let h_alpha = self.tran_b.forward(tape, store, f, x_obs)?;
        let endpoints = self.style.propose(tape, store, h_alpha)?.endpoints;
        Ok(StageOne { x_obs, h_alpha, endpoints })
    }

    /// `h_beta` for one endpoint per row of `x_obs` (`[N x t_h x 2]`),
    /// `endpoints` (`[N x 2]`) and `ctx_ext` (`[N x (t_h+1) x patch^2]`).
    pub fn stage_two<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x_obs: Var<'t>,
        endpoints: Var<'t>,
        ctx_ext: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let n = endpoints.shape()[0];
        let keel = keel_batch(tape, endpoints, &vec![[0.0, 0.0]; n], self.cfg.pred_len)?;
        let h_beta = self.interaction.forward(tape, store, x_obs, endpoints, ctx_ext, keel)?;
        Ok((h_beta, keel))
    }

    fn ctx_ext<'t>(&self, tape: &'t Tape, batch: &[&Prepared]) -> Result<Var<'t>> {
        let p2 = self.cfg.patch * self.cfg.patch;
        tape.constant_from(
            &[batch.len(), self.cfg.obs_len + 1, p2],
            batch.iter().flat_map(|s| s.ctx_ext.iter().copied()).collect(),
        )
    }

    /// Training loss. Stage 2 runs only for each sample's winning channel,
    /// the only one its trajectory loss supervises. `rng` supplies the latent
    /// noise in stochastic mode.
    pub fn loss<'t, R: Rng + ?Sized>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        batch: &[&Prepared],
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Var<'t>, LossReport, Vec<CategoryAssignment>)> {
        let one = self.stage_one(tape, store, batch)?;
        let ends: Vec<Point> = batch.iter().map(|s| s.endpoint()).collect();
        let (l_sty, assignments) = stylized_loss(one.endpoints, &ends)?;
        let winners = winner_endpoints(one.endpoints, &assignments)?;
        let ctx_ext = self.ctx_ext(tape, batch)?;
        let (h_beta, _) = self.stage_two(tape, store, one.x_obs, winners, ctx_ext)?;
        let (b, t_f) = (batch.len(), self.cfg.pred_len);
        let (traj, l_kl) = match mode {
            Mode::Deterministic => (self.head_d.forward(tape, store, h_beta)?, None),
            Mode::Stochastic => {
                let z: Vec<f64> = (0..b * t_f * self.cfg.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
                let z = tape.constant_from(&[b, t_f, self.cfg.latent_dim], z)?;
                let out = self.head_g.forward(tape, store, h_beta, z)?;
                (out.trajectory, Some(kl_loss(out.mu, out.logvar)?))
            }
        };
        let target = tape.constant_from(&[b, t_f, 2], stack_points(batch, |s| &s.future))?;
        let l_ad = traj.sub(target)?.reshape(&[b * t_f, 2])?.l2_norm_rows().mean();
        let mut total = l_sty.add(l_ad)?;
        if let Some(kl) = l_kl {
            total = total.add(kl)?;
        }
        let report = LossReport {
            l_sty: l_sty.item(),
            l_ad: l_ad.item(),
            l_kl: l_kl.map_or(0.0, |v| v.item()),
            total: total.item(),
        };
        Ok((total, report, assignments))
    }

    /// Endpoint proposals in network coordinates, one row of `K_c` per sample.
    pub fn proposals(&self, store: &ParamStore, batch: &[&Prepared]) -> Result<Vec<Vec<Point>>> {
        let tape = Tape::new();
        let one = self.stage_one(&tape, store, batch)?;
        Ok(crate::style::endpoint_rows(&one.endpoints))
    }

    /// Every channel's trajectory for each sample: one per channel in
    /// deterministic mode, `draws` per channel in stochastic mode (all
    /// channels of a sample share the draw's noise).
    pub fn predict(
        &self,
        store: &ParamStore,
        batch: &[&Prepared],
        mode: Mode,
        draws: usize,
        noise: Noise,
    ) -> Result<Vec<PredictionSet>> {
        let tape = Tape::new();
        let one = self.stage_one(&tape, store, batch)?;
        let (b, k, t_f) = (batch.len(), self.cfg.channels, self.cfg.pred_len);
        let flat_ends = one.endpoints.reshape(&[b * k, 2])?;
        let x_rep = one.x_obs.repeat_interleave(k)?;
        let ctx_rep = self.ctx_ext(&tape, batch)?.repeat_interleave(k)?;
        let (h_beta, keel) = self.stage_two(&tape, store, x_rep, flat_ends, ctx_rep)?;
        let draws = match mode {
            Mode::Deterministic => 1,
            Mode::Stochastic if draws == 0 => {
                return Err(Error::Config("stochastic prediction needs at least one draw".into()))
            }
            Mode::Stochastic => draws,
        };
        let mut outputs = Vec::with_capacity(draws);
        match mode {
            Mode::Deterministic => outputs.push(self.head_d.forward(&tape, store, h_beta)?.value()),
            Mode::Stochastic => {
                let dz = self.cfg.latent_dim;
                let mut rng = match noise {
                    Noise::Seeded(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
                    Noise::Zero => None,
                };
                for _ in 0..draws {
                    let mut z = vec![0.0; b * k * t_f * dz];
                    if let Some(rng) = rng.as_mut() {
                        for s in 0..b {
                            let shared: Vec<f64> = (0..t_f * dz).map(|_| rng.sample(StandardNormal)).collect();
                            for c in 0..k {
                                let off = (s * k + c) * t_f * dz;
                                z[off..off + t_f * dz].copy_from_slice(&shared);
                            }
                        }
                    }
                    let z = tape.constant_from(&[b * k, t_f, dz], z)?;
                    outputs.push(self.head_g.forward(&tape, store, h_beta, z)?.trajectory.value());
                }
            }
        }
        let ends = one.endpoints.value();
        let keel = keel.value();
        let rows = |data: &[f64], i: usize| -> Vec<Point> {
            data[i * t_f * 2..(i + 1) * t_f * 2]
                .chunks_exact(2)
                .map(|p| [p[0], p[1]])
                .collect()
        };
        Ok(batch
            .iter()
            .enumerate()
            .map(|(s, sample)| {
                let world = |pts: Vec<Point>| pts.into_iter().map(|p| sample.to_world(p)).collect::<Vec<_>>();
                let mut predictions = Vec::with_capacity(k * draws);
                for c in 0..k {
                    for (draw, out) in outputs.iter().enumerate() {
                        predictions.push(Prediction {
                            channel: c,
                            draw,
                            points: world(rows(out.data(), s * k + c)),
                        });
                    }
                }
                PredictionSet {
                    sample_id: sample.id,
                    proposals: (0..k)
                        .map(|c| {
                            let i = (s * k + c) * 2;
                            sample.to_world([ends.data()[i], ends.data()[i + 1]])
                        })
                        .collect(),
                    keels: (0..k).map(|c| world(rows(keel.data(), s * k + c))).collect(),
                    predictions,
                }
            })
            .collect())
    }
}
