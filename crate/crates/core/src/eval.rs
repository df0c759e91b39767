//! Displacement metrics, best-of-N scoring and the direction filter.

use alloc::format;
use alloc::vec::Vec;

use crate::data::Point;
use crate::error::{Error, Result};
use crate::model::{Mode, Msn, Noise, Prediction, PredictionSet, Prepared};
use crate::param::ParamStore;
use crate::style::distance;

fn check_lengths(y: &[Point], y_hat: &[Point]) -> Result<()> {
    if y.is_empty() || y.len() != y_hat.len() {
        return Err(Error::Contract(format!(
            "trajectories of length {} and {} cannot be compared",
            y.len(),
            y_hat.len()
        )));
    }
    Ok(())
}

/// Mean pointwise L2 error.
pub fn ade(y: &[Point], y_hat: &[Point]) -> Result<f64> {
    check_lengths(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| distance(*a, *b)).sum::<f64>() / y.len() as f64)
}

/// L2 error of the final point.
pub fn fde(y: &[Point], y_hat: &[Point]) -> Result<f64> {
    check_lengths(y, y_hat)?;
    Ok(distance(y[y.len() - 1], y_hat[y_hat.len() - 1]))
}

/// Best-of-N scores; the two minima are taken independently.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestOfN {
    pub min_ade: f64,
    pub min_fde: f64,
    pub ade_index: usize,
    pub fde_index: usize,
}

pub fn best_of_n<P: AsRef<[Point]>>(y: &[Point], predictions: &[P]) -> Result<BestOfN> {
    if predictions.is_empty() {
        return Err(Error::Contract("best_of_n needs at least one prediction".into()));
    }
    let mut best = BestOfN {
        min_ade: f64::INFINITY,
        min_fde: f64::INFINITY,
        ade_index: 0,
        fde_index: 0,
    };
    for (i, p) in predictions.iter().enumerate() {
        let (a, f) = (ade(y, p.as_ref())?, fde(y, p.as_ref())?);
        if a < best.min_ade {
            best.min_ade = a;
            best.ade_index = i;
        }
        if f < best.min_fde {
            best.min_fde = f;
            best.fde_index = i;
        }
    }
    Ok(best)
}

/// `cos(3 pi / 4)`: predictions turning further away than this are dropped.
pub const REVERSAL_COS: f64 = -core::f64::consts::FRAC_1_SQRT_2;

/// Whether a prediction keeps within 135 degrees of the observed heading.
/// Headings are net displacements: `x_last - x_first` for the observation,
/// `y_end - x_last` for the prediction. Zero-length headings pass.
pub fn keeps_direction(obs: &[Point], prediction: &[Point]) -> bool {
    let (Some(first), Some(last), Some(end)) = (obs.first(), obs.last(), prediction.last()) else {
        return true;
    };
    let u = [last[0] - first[0], last[1] - first[1]];
    let v = [end[0] - last[0], end[1] - last[1]];
    let (nu, nv) = (libm::hypot(u[0], u[1]), libm::hypot(v[0], v[1]));
    if nu == 0.0 || nv == 0.0 {
        return true;
    }
    (u[0] * v[0] + u[1] * v[1]) / (nu * nv) >= REVERSAL_COS
}

/// Drops every prediction that reverses the observed heading by more than
/// 135 degrees.
pub fn direction_filter(obs: &[Point], predictions: Vec<Prediction>) -> Vec<Prediction> {
    predictions
        .into_iter()
        .filter(|p| keeps_direction(obs, &p.points))
        .collect()
}

impl AsRef<[Point]> for Prediction {
    fn as_ref(&self) -> &[Point] {
        &self.points
    }
}

/// Per-sample best-of-N result.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEval {
    pub sample_id: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    /// `(channel, draw)` of the best ADE and the best FDE.
    pub ade_source: (usize, usize),
    pub fde_source: (usize, usize),
    /// Candidates left after filtering.
    pub candidates: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub min_ade: f64,
    pub min_fde: f64,
    pub records: Vec<SampleEval>,
    /// Candidates per sample before filtering: `K_c` or `k * K_c`.
    pub n: usize,
    pub channels: usize,
    pub draws: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub mode: Mode,
    pub draws: usize,
    pub noise: Noise,
    pub filter: bool,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Deterministic,
            draws: 1,
            noise: Noise::Zero,
            filter: false,
            batch_size: 64,
        }
    }
}

/// Scores one sample's predictions against its ground truth. With `filter`,
/// the direction rule is applied first; if it would remove every candidate
/// the unfiltered set is scored.
pub fn score(sample: &Prepared, set: &PredictionSet, filter: bool) -> Result<SampleEval> {
    let truth = sample.world_future();
    let obs = sample.world_obs();
    let mut cands = set.predictions.clone();
    if filter {
        let kept = direction_filter(&obs, cands.clone());
        if kept.is_empty() {
            log::warn!("sample {}: direction filter removed every candidate; scoring all", sample.id);
        } else {
            cands = kept;
        }
    }
    let best = best_of_n(&truth, &cands)?;
    let src = |i: usize| (cands[i].channel, cands[i].draw);
    Ok(SampleEval {
        sample_id: sample.id,
        min_ade: best.min_ade,
        min_fde: best.min_fde,
        ade_source: src(best.ade_index),
        fde_source: src(best.fde_index),
        candidates: cands.len(),
    })
}

/// Best-of-N evaluation over a dataset. Stochastic noise is seeded per
/// sample, so results do not depend on batch size.
pub fn evaluate(net: &Msn, store: &ParamStore, data: &[Prepared], opts: &EvalOptions) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let draws = match opts.mode {
        Mode::Deterministic => 1,
        Mode::Stochastic => opts.draws,
    };
    let mut records = Vec::with_capacity(data.len());
    for chunk in data.chunks(opts.batch_size.max(1)) {
        let sets = predict_each(net, store, chunk, opts.mode, draws, opts.noise)?;
        for (sample, set) in chunk.iter().zip(&sets) {
            records.push(score(sample, set, opts.filter)?);
        }
    }
    let n = records.len() as f64;
    Ok(EvalReport {
        min_ade: records.iter().map(|r| r.min_ade).sum::<f64>() / n,
        min_fde: records.iter().map(|r| r.min_fde).sum::<f64>() / n,
        records,
        n: draws * net.cfg.channels,
        channels: net.cfg.channels,
        draws,
    })
}

/// Predictions for a chunk where every sample's noise stream is seeded from
/// the root seed and its sample id.
pub fn predict_each(
    net: &Msn,
    store: &ParamStore,
    chunk: &[Prepared],
    mode: Mode,
    draws: usize,
    noise: Noise,
) -> Result<Vec<PredictionSet>> {
    match (mode, noise) {
        (Mode::Stochastic, Noise::Seeded(root)) => chunk
            .iter()
            .map(|s| {
                let seed = root ^ (s.id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                Ok(net.predict(store, &[s], mode, draws, Noise::Seeded(seed))?.remove(0))
            })
            .collect(),
        _ => {
            let refs: Vec<&Prepared> = chunk.iter().collect();
            net.predict(store, &refs, mode, draws, noise)
        }
    }
}
