//! Scene and social context maps and the fused agent representation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::data::{Point, Trajectory};
use crate::error::{Error, Result};
use crate::nn::{Activation, Dense};
use crate::param::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::Transformer;

/// Default patch side, in cells.
pub const DEFAULT_PATCH: usize = 5;
/// Default cell size, meters.
pub const DEFAULT_CELL_SIZE: f64 = 0.5;
/// Social footprint radius, in cells.
pub const STAMP_RADIUS: i64 = 3;

/// Regular grid of energies in `[0, 1]`, row-major with row index along y.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrid {
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
    pub origin: Point,
    values: Vec<f64>,
}

impl SceneGrid {
    pub fn new(width: usize, height: usize, cell_size: f64, origin: Point, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || !(cell_size > 0.0) {
            return Err(Error::Config(format!(
                "scene grid needs positive size, got {width}x{height} cells of {cell_size} m"
            )));
        }
        if values.len() != width * height {
            return Err(Error::Config(format!(
                "scene grid {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("scene value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            cell_size,
            origin,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize, cell_size: f64, origin: Point) -> Result<Self> {
        Self::new(width, height, cell_size, origin, vec![0.0; width * height])
    }

    /// Empty square grid of `2 * half + 1` cells per side centered on `center`.
    pub fn empty_around(center: Point, half: usize, cell_size: f64) -> Result<Self> {
        let side = 2 * half + 1;
        let offset = (half as f64 + 0.5) * cell_size;
        Self::zeros(side, side, cell_size, [center[0] - offset, center[1] - offset])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Unclamped cell coordinates of a world point.
    pub fn cell_of(&self, p: Point) -> (i64, i64) {
        (
            libm::floor((p[0] - self.origin[0]) / self.cell_size) as i64,
            libm::floor((p[1] - self.origin[1]) / self.cell_size) as i64,
        )
    }

    pub fn clamp_cell(&self, (c, r): (i64, i64)) -> (usize, usize) {
        (
            c.clamp(0, self.width as i64 - 1) as usize,
            r.clamp(0, self.height as i64 - 1) as usize,
        )
    }

    pub fn contains_cell(&self, (c, r): (i64, i64)) -> bool {
        c >= 0 && r >= 0 && (c as usize) < self.width && (r as usize) < self.height
    }
}

/// Scene energies raised by social footprints; same geometry as the scene.
pub type ContextMap = SceneGrid;

fn clamped_cell(grid: &SceneGrid, p: Point, what: &str) -> (usize, usize) {
    let cell = grid.cell_of(p);
    if !grid.contains_cell(cell) {
        log::debug!("{what} at ({:.3}, {:.3}) outside grid, clamped", p[0], p[1]);
    }
    grid.clamp_cell(cell)
}

/// Neighbor positions plus a constant-velocity continuation of `pred_len`
/// steps from the last two observed positions.
pub fn footprint_positions(neighbor: &Trajectory, pred_len: usize) -> Vec<Point> {
    let mut pts = neighbor.positions();
    let Some(&last) = pts.last() else {
        return pts;
    };
    let vel = match pts[..] {
        [.., a, b] => [b[0] - a[0], b[1] - a[1]],
        _ => [0.0, 0.0],
    };
    for j in 1..=pred_len {
        let j = j as f64;
        pts.push([last[0] + j * vel[0], last[1] + j * vel[1]]);
    }
    pts
}

/// `max(scene, social)` per cell. The social term is a unit-peak Gaussian
/// (sigma one cell) stamped at every neighbor footprint position; the target
/// itself is never stamped.
pub fn build_context_map(
    _target: &Trajectory,
    neighbors: &[Trajectory],
    scene: &SceneGrid,
    pred_len: usize,
) -> ContextMap {
    let mut map = scene.clone();
    for nb in neighbors {
        for p in footprint_positions(nb, pred_len) {
            let (c, r) = clamped_cell(scene, p, "neighbor");
            let (c, r) = (c as i64, r as i64);
            for dr in -STAMP_RADIUS..=STAMP_RADIUS {
                for dc in -STAMP_RADIUS..=STAMP_RADIUS {
                    let cell = (c + dc, r + dr);
                    if !map.contains_cell(cell) {
                        continue;
                    }
                    let e = libm::exp(-((dc * dc + dr * dr) as f64) / 2.0);
                    let idx = cell.1 as usize * map.width + cell.0 as usize;
                    if e > map.values[idx] {
                        map.values[idx] = e;
                    }
                }
            }
        }
    }
    map
}

/// Flattened `patch x patch` windows (border-clamped) centered at the agent's
/// cell for each observed step; with `steps = obs.len() + 1` the extra row
/// repeats the window at the last observed position.
pub fn sample_context_sequence(map: &ContextMap, obs: &[Point], steps: usize, patch: usize) -> Result<Tensor> {
    if patch % 2 == 0 {
        return Err(Error::Contract(format!("patch side must be odd, got {patch}")));
    }
    if obs.is_empty() || (steps != obs.len() && steps != obs.len() + 1) {
        return Err(Error::Contract(format!(
            "context steps {steps} incompatible with {} observed positions",
            obs.len()
        )));
    }
    let half = (patch / 2) as i64;
    let mut data = Vec::with_capacity(steps * patch * patch);
    for t in 0..steps {
        let p = obs[t.min(obs.len() - 1)];
        let (c, r) = clamped_cell(map, p, "agent");
        for dr in -half..=half {
            for dc in -half..=half {
                let (cc, rr) = map.clamp_cell((c as i64 + dc, r as i64 + dr));
                data.push(map.get(cc, rr));
            }
        }
    }
    Tensor::new(&[steps, patch * patch], data)
}

/// Per-step trajectory and context embedders whose outputs are concatenated.
#[derive(Debug, Clone, Copy)]
pub struct RepresentationEmbedder {
    pub traj: Dense,
    pub ctx: Dense,
}

#[derive(Debug, Clone, Copy)]
pub struct AgentRepresentation<'t> {
    pub f_t: Var<'t>,
    pub f_c: Var<'t>,
    pub f: Var<'t>,
}

impl RepresentationEmbedder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, patch: usize, rng: &mut R) -> Result<Self> {
        if d % 2 != 0 {
            return Err(Error::Config(format!("model dim {d} must be even")));
        }
        Ok(Self {
            traj: Dense::new(store, &format!("{name}.mlp_e"), 2, d / 2, Activation::Tanh, rng)?,
            ctx: Dense::new(store, &format!("{name}.mlp_c"), patch * patch, d / 2, Activation::Tanh, rng)?,
        })
    }

    /// `x` is `[.. x steps x 2]`, `c` is `[.. x steps x patch^2]`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>, c: Var<'t>) -> Result<AgentRepresentation<'t>> {
        let (sx, sc) = (x.shape(), c.shape());
        if sx[..sx.len() - 1] != sc[..sc.len() - 1] {
            return Err(Error::Contract(format!(
                "trajectory {sx:?} and context {sc:?} disagree on steps"
            )));
        }
        let f_t = self.traj.forward(tape, store, x)?;
        let f_c = self.ctx.forward(tape, store, c)?;
        let f = Var::concat_lastaxis(&[f_t, f_c])?;
        Ok(AgentRepresentation { f_t, f_c, f })
    }
}

/// `h_alpha = Tran_b(f, X)`: the representation feeds the encoder, the raw
/// observed trajectory the decoder.
pub fn behavior_features<'t>(
    tran_b: &Transformer,
    tape: &'t Tape,
    store: &ParamStore,
    f: Var<'t>,
    x_obs: Var<'t>,
) -> Result<Var<'t>> {
    tran_b.forward(tape, store, f, x_obs)
}
