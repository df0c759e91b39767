//! Adam and the training loop.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Point;
use crate::error::{Error, Result};
use crate::model::{LossReport, Mode, Msn, Prepared};
use crate::param::{Gradients, ParamStore};
use crate::style::distance;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. Parameters with `trainable[i] == false`
/// are left untouched along with their moments.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut AdamState, trainable: Option<&[bool]>) {
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - libm::pow(state.beta1, t);
    let c2 = 1.0 - libm::pow(state.beta2, t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        if trainable.is_some_and(|m| !m[i]) {
            continue;
        }
        let g = grads.get(id).data();
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let p = store.value_mut(id).data_mut();
        for j in 0..p.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= state.lr * m_hat / (libm::sqrt(v_hat) + state.eps);
        }
    }
}

/// Initial placement of the endpoint proposals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Seeding {
    /// Fan-in uniform init only.
    Random,
    /// Shift each channel's mean proposal to `scale` times a k-means++ pick
    /// among training endpoints.
    KMeansPlusPlus { scale: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub mode: Mode,
    pub seeding: Seeding,
    /// Only parameters whose name starts with one of these prefixes are
    /// updated; empty means all.
    pub trainable: Vec<String>,
}

impl TrainConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            epochs: 300,
            batch_size: 32,
            lr: 3e-4,
            seed,
            mode: Mode::Deterministic,
            seeding: Seeding::KMeansPlusPlus { scale: 0.25 },
            trainable: Vec::new(),
        }
    }
}

/// Batch-size-weighted means of one epoch's losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossReport,
}

/// k-means++ selection of `k` points: the first uniformly, each next with
/// probability proportional to its squared distance to the nearest pick.
pub fn kmeans_plus_plus<R: Rng + ?Sized>(points: &[Point], k: usize, rng: &mut R) -> Result<Vec<Point>> {
    if points.is_empty() || k == 0 {
        return Err(Error::Contract("k-means++ needs points and k >= 1".into()));
    }
    let mut picks = Vec::with_capacity(k);
    picks.push(points[rng.gen_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|p| sq(distance(*p, picks[0]))).collect();
    while picks.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if u < *w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            points[idx]
        } else {
            points[rng.gen_range(0..points.len())]
        };
        picks.push(next);
        for (w, p) in d2.iter_mut().zip(points) {
            *w = w.min(sq(distance(*p, next)));
        }
    }
    Ok(picks)
}

fn sq(x: f64) -> f64 {
    x * x
}

/// Moves every channel's mean proposal over `data` to `scale` times a
/// k-means++ pick among the training endpoints.
pub fn seed_proposals<R: Rng + ?Sized>(
    net: &Msn,
    store: &mut ParamStore,
    data: &[Prepared],
    scale: f64,
    rng: &mut R,
) -> Result<Vec<Point>> {
    let ends: Vec<Point> = data.iter().map(|s| s.endpoint()).collect();
    let seeds = kmeans_plus_plus(&ends, net.cfg.channels, rng)?;
    let probe: Vec<&Prepared> = data.iter().take(256).collect();
    let rows = net.proposals(store, &probe)?;
    let k = net.cfg.channels;
    let mut mean = alloc::vec![[0.0, 0.0]; k];
    for row in &rows {
        for (m, p) in mean.iter_mut().zip(row) {
            m[0] += p[0] / rows.len() as f64;
            m[1] += p[1] / rows.len() as f64;
        }
    }
    let shift: Vec<Point> = seeds
        .iter()
        .zip(&mean)
        .map(|(s, m)| [scale * s[0] - m[0], scale * s[1] - m[1]])
        .collect();
    net.style.shift_endpoints(store, &shift)?;
    Ok(seeds)
}

/// Trainable mask by parameter index for a list of name prefixes.
pub fn trainable_mask(store: &ParamStore, prefixes: &[String]) -> Option<Vec<bool>> {
    if prefixes.is_empty() {
        return None;
    }
    Some(
        store
            .iter()
            .map(|p| prefixes.iter().any(|pre| p.name.starts_with(pre.as_str())))
            .collect(),
    )
}

/// Applies `cfg.seeding` to freshly built parameters. Runs on its own
/// stream of the root seed, apart from the one `train` draws from.
pub fn initialize(net: &Msn, store: &mut ParamStore, data: &[Prepared], cfg: &TrainConfig) -> Result<()> {
    if let Seeding::KMeansPlusPlus { scale } = cfg.seeding {
        if data.is_empty() {
            return Err(Error::Contract("cannot seed proposals from an empty training set".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(2);
        seed_proposals(net, store, data, scale, &mut rng)?;
    }
    Ok(())
}

/// Mini-batch Adam over `data` with a seeded shuffle each epoch.
/// `on_epoch` sees every epoch's log and the parameters as soon as it completes.
pub fn train(
    net: &Msn,
    store: &mut ParamStore,
    data: &[Prepared],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &ParamStore),
) -> Result<Vec<EpochLog>> {
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if !(cfg.lr >= 0.0) {
        return Err(Error::Config(format!("lr must be >= 0, got {}", cfg.lr)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mask = trainable_mask(store, &cfg.trainable);
    let frozen: Vec<bool> = mask.as_ref().map_or_else(Vec::new, |m| m.iter().map(|t| !t).collect());
    let mut adam = AdamState::new(store, cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossReport::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &data[i]).collect();
            let tape = Tape::with_frozen(frozen.clone());
            let (loss, report, _) = net.loss(&tape, store, &batch, cfg.mode, &mut rng)?;
            if !report.total.is_finite() {
                return Err(non_finite(&tape, store, epoch));
            }
            let grads = tape.backward(loss, store)?;
            if !grads.is_finite() {
                return Err(non_finite(&tape, store, epoch));
            }
            adam_step(store, &grads, &mut adam, mask.as_deref());
            let w = batch.len() as f64 / data.len() as f64;
            sum.l_sty += w * report.l_sty;
            sum.l_ad += w * report.l_ad;
            sum.l_kl += w * report.l_kl;
        }
        sum.total = sum.l_sty + sum.l_ad + sum.l_kl;
        let log = EpochLog { epoch, loss: sum };
        log::info!(
            "epoch {epoch}: l_sty {:.5} l_ad {:.5} l_kl {:.5}",
            sum.l_sty,
            sum.l_ad,
            sum.l_kl
        );
        on_epoch(&log, store);
        logs.push(log);
    }
    Ok(logs)
}

fn non_finite(tape: &Tape, store: &ParamStore, epoch: usize) -> Error {
    let what = match tape.first_non_finite(store) {
        Some(r) => match r.param {
            Some(p) => format!("parameter {p}"),
            None => format!("{} output (node {})", r.op, r.node),
        },
        None => String::from("loss"),
    };
    Error::NonFinite(format!("epoch {epoch}: first non-finite tensor is {what}"))
}
