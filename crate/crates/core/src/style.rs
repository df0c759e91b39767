//! Style proposal: per-channel endpoint generation, nearest-endpoint
//! classification and the stylized loss.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::data::Point;
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// `K_c` independent dense layers evaluated as one grouped product:
/// `[B x K x in] -> [B x K x out]`.
#[derive(Debug, Clone, Copy)]
pub struct GroupedDense {
    pub w: ParamId,
    pub b: ParamId,
    pub groups: usize,
    pub inputs: usize,
    pub outputs: usize,
    pub act: Activation,
}

impl GroupedDense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        groups: usize,
        inputs: usize,
        outputs: usize,
        act: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add_uniform(format!("{name}.w"), &[groups, inputs, outputs], inputs, rng)?,
            b: store.add_zeros(format!("{name}.b"), &[groups, outputs])?,
            groups,
            inputs,
            outputs,
            act,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let y = x
            .grouped_matmul(tape.param(store, self.w))?
            .broadcast_rows(tape.param(store, self.b))?;
        Ok(self.act.apply(y))
    }
}

/// Two grouped layers, ReLU on the first.
#[derive(Debug, Clone, Copy)]
pub struct GroupedMlp {
    pub hidden: GroupedDense,
    pub out: GroupedDense,
}

impl GroupedMlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        groups: usize,
        inputs: usize,
        hidden: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            hidden: GroupedDense::new(store, &format!("{name}.fc1"), groups, inputs, hidden, Activation::Relu, rng)?,
            out: GroupedDense::new(store, &format!("{name}.fc2"), groups, hidden, outputs, Activation::Identity, rng)?,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.hidden.forward(tape, store, x)?;
        self.out.forward(tape, store, h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StyleGenerator {
    pub channels: usize,
    pub obs_len: usize,
    pub kernels: ParamId,
    pub feature_mlp: GroupedMlp,
    pub endpoint_mlp: GroupedMlp,
}

#[derive(Debug, Clone, Copy)]
pub struct Proposals<'t> {
    /// `[B x K_c x d]`
    pub features: Var<'t>,
    /// `[B x K_c x 2]`
    pub endpoints: Var<'t>,
}

impl StyleGenerator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        obs_len: usize,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("at least one style channel is required".into()));
        }
        Ok(Self {
            channels,
            obs_len,
            kernels: store.add_uniform(format!("{name}.kernels"), &[channels, obs_len], obs_len, rng)?,
            feature_mlp: GroupedMlp::new(store, &format!("{name}.feature_mlp"), channels, d, d, d, rng)?,
            endpoint_mlp: GroupedMlp::new(store, &format!("{name}.endpoint_mlp"), channels, d, d, 2, rng)?,
        })
    }

    /// `h_alpha` is `[t_h x d]` or `[B x t_h x d]`; outputs always carry the
    /// batch axis.
    pub fn propose<'t>(&self, tape: &'t Tape, store: &ParamStore, h_alpha: Var<'t>) -> Result<Proposals<'t>> {
        let h = match h_alpha.shape()[..] {
            [t, d] => h_alpha.reshape(&[1, t, d])?,
            _ => h_alpha,
        };
        let conv = h.transpose()?.conv_time(tape.param(store, self.kernels))?;
        let features = self.feature_mlp.forward(tape, store, conv)?;
        let endpoints = self.endpoint_mlp.forward(tape, store, features)?;
        Ok(Proposals { features, endpoints })
    }

    /// Shifts channel `k`'s output bias so its proposal moves by `shift[k]`.
    pub fn shift_endpoints(&self, store: &mut ParamStore, shift: &[Point]) -> Result<()> {
        if shift.len() != self.channels {
            return Err(Error::Contract(format!(
                "{} endpoint shifts for {} channels",
                shift.len(),
                self.channels
            )));
        }
        let b = store.value_mut(self.endpoint_mlp.out.b).data_mut();
        for (k, s) in shift.iter().enumerate() {
            b[2 * k] += s[0];
            b[2 * k + 1] += s[1];
        }
        Ok(())
    }
}

/// Winning channel of one sample and its endpoint error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoryAssignment {
    pub channel: usize,
    pub distance: f64,
}

pub fn distance(a: Point, b: Point) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    libm::sqrt(dx * dx + dy * dy)
}

/// Nearest proposal to `d_gt`; ties go to the lowest channel.
pub fn classify(d_gt: Point, proposals: &[Point]) -> Result<CategoryAssignment> {
    let mut best: Option<CategoryAssignment> = None;
    for (k, p) in proposals.iter().enumerate() {
        let dist = distance(*p, d_gt);
        if best.map_or(true, |b| dist < b.distance) {
            best = Some(CategoryAssignment { channel: k, distance: dist });
        }
    }
    best.ok_or_else(|| Error::Contract("classify needs at least one proposal".into()))
}

/// Per-sample proposal rows of a `[B x K x 2]` endpoint tensor.
pub fn endpoint_rows(endpoints: &Var<'_>) -> Vec<Vec<Point>> {
    let v = endpoints.value();
    let k = v.shape()[1];
    v.data()
        .chunks_exact(2 * k)
        .map(|s| s.chunks_exact(2).map(|p| [p[0], p[1]]).collect())
        .collect()
}

/// Mean over samples of the winning channel's endpoint error. The winner is
/// picked from current values and held fixed, so only its row receives
/// gradient.
pub fn stylized_loss<'t>(endpoints: Var<'t>, targets: &[Point]) -> Result<(Var<'t>, Vec<CategoryAssignment>)> {
    let shape = endpoints.shape();
    let b = match shape[..] {
        [b, _, 2] => b,
        _ => return Err(Error::Contract(format!("endpoints must be [B x K x 2], got {shape:?}"))),
    };
    if targets.is_empty() || targets.len() != b {
        return Err(Error::Contract(format!("{} targets for a batch of {b}", targets.len())));
    }
    let assignments = endpoint_rows(&endpoints)
        .iter()
        .zip(targets)
        .map(|(rows, d)| classify(*d, rows))
        .collect::<Result<Vec<_>>>()?;
    let winners = winner_endpoints(endpoints, &assignments)?;
    let tape = endpoints.tape();
    let flat: Vec<f64> = targets.iter().flat_map(|p| p.iter().copied()).collect();
    let loss = winners.sub(tape.constant_from(&[b, 2], flat)?)?.l2_norm_rows().mean();
    Ok((loss, assignments))
}

/// `[B x 2]` rows of the assigned channels.
pub fn winner_endpoints<'t>(endpoints: Var<'t>, assignments: &[CategoryAssignment]) -> Result<Var<'t>> {
    let shape = endpoints.shape();
    let k = shape[1];
    let idx: Vec<usize> = assignments.iter().enumerate().map(|(i, a)| i * k + a.channel).collect();
    endpoints.reshape(&[shape[0] * k, 2])?.gather(&idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gen(k: usize, seed: u64) -> (ParamStore, StyleGenerator) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let g = StyleGenerator::new(&mut store, "style", k, 4, 6, &mut rng).unwrap();
        (store, g)
    }

    fn h_alpha(tape: &Tape) -> Var<'_> {
        tape.constant(&Tensor::new(&[4, 6], (0..24).map(|i| libm::cos(i as f64 * 0.7)).collect()).unwrap())
    }

    #[test]
    fn single_channel_gives_one_row() {
        let (store, g) = gen(1, 1);
        let tape = Tape::new();
        let p = g.propose(&tape, &store, h_alpha(&tape)).unwrap();
        assert_eq!(p.endpoints.shape(), vec![1, 1, 2]);
        assert_eq!(p.features.shape(), vec![1, 1, 6]);
    }

    #[test]
    fn identical_channels_give_identical_proposals() {
        let (mut store, g) = gen(2, 2);
        let ids = [
            g.kernels,
            g.feature_mlp.hidden.w,
            g.feature_mlp.hidden.b,
            g.feature_mlp.out.w,
            g.feature_mlp.out.b,
            g.endpoint_mlp.hidden.w,
            g.endpoint_mlp.hidden.b,
            g.endpoint_mlp.out.w,
            g.endpoint_mlp.out.b,
        ];
        for id in ids {
            let data = store.value_mut(id).data_mut();
            let half = data.len() / 2;
            let (a, b) = data.split_at_mut(half);
            b.copy_from_slice(a);
        }
        let tape = Tape::new();
        let rows = endpoint_rows(&g.propose(&tape, &store, h_alpha(&tape)).unwrap().endpoints);
        assert_eq!(rows[0][0], rows[0][1]);
    }

    #[test]
    fn random_channels_are_distinct() {
        let (store, g) = gen(5, 3);
        let tape = Tape::new();
        let rows = endpoint_rows(&g.propose(&tape, &store, h_alpha(&tape)).unwrap().endpoints);
        for i in 0..5 {
            for j in i + 1..5 {
                assert!(distance(rows[0][i], rows[0][j]) > 1e-9);
            }
        }
    }

    #[test]
    fn classify_cases() {
        let a = classify([1.0, 1.0], &[[0.0, 0.0], [5.0, 5.0]]).unwrap();
        assert_eq!(a.channel, 0);
        assert!((a.distance - libm::sqrt(2.0)).abs() < 1e-15);
        let b = classify([5.0, 5.0], &[[0.0, 0.0], [5.0, 5.0]]).unwrap();
        assert_eq!((b.channel, b.distance), (1, 0.0));
        let tie = classify([0.0, 0.0], &[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]).unwrap();
        assert_eq!(tie.channel, 0);
        assert!(classify([0.0, 0.0], &[]).is_err());
    }

    #[test]
    fn stylized_loss_hand_case() {
        let tape = Tape::new();
        // sample 0: proposals (0,0),(4,0), target (3,0) -> channel 1, error 1
        // sample 1: proposals (0,1),(9,9), target (0,3) -> channel 0, error 2
        let d = tape.variable(&Tensor::new(&[2, 2, 2], alloc::vec![0.0, 0.0, 4.0, 0.0, 0.0, 1.0, 9.0, 9.0]).unwrap());
        let (loss, a) = stylized_loss(d, &[[3.0, 0.0], [0.0, 3.0]]).unwrap();
        assert_eq!(loss.item(), 1.5);
        assert_eq!(a.iter().map(|a| a.channel).collect::<Vec<_>>(), [1, 0]);
        let g = tape.grad_of(loss, &[d]).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0, 0.5, 0.0, 0.0, -0.5, 0.0, 0.0]);
    }

    #[test]
    fn stylized_loss_zero_when_perfect_and_rejects_empty() {
        let tape = Tape::new();
        let d = tape.variable(&Tensor::new(&[1, 3, 2], alloc::vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let (loss, _) = stylized_loss(d, &[[3.0, 4.0]]).unwrap();
        assert_eq!(loss.item(), 0.0);
        assert!(stylized_loss(d, &[]).is_err());
    }

    #[test]
    fn single_channel_loss_is_mean_endpoint_error() {
        let tape = Tape::new();
        let d = tape.variable(&Tensor::new(&[2, 1, 2], alloc::vec![0.0, 0.0, 1.0, 1.0]).unwrap());
        let (loss, _) = stylized_loss(d, &[[3.0, 4.0], [1.0, 2.0]]).unwrap();
        assert_eq!(loss.item(), 3.0);
    }

    #[test]
    fn gradient_touches_only_the_winning_row() {
        let (store, g) = gen(4, 7);
        let tape = Tape::new();
        let p = g.propose(&tape, &store, h_alpha(&tape)).unwrap();
        let rows = endpoint_rows(&p.endpoints);
        let target = [rows[0][2][0] + 1e-4, rows[0][2][1]];
        let (loss, a) = stylized_loss(p.endpoints, &[target]).unwrap();
        assert_eq!(a[0].channel, 2);
        let grad = tape.grad_of(loss, &[p.endpoints]).unwrap();
        for (k, r) in grad[0].data().chunks(2).enumerate() {
            assert_eq!(r.iter().any(|&v| v != 0.0), k == 2);
        }
    }

    #[test]
    fn shift_moves_proposals() {
        let (mut store, g) = gen(2, 8);
        let before = {
            let tape = Tape::new();
            endpoint_rows(&g.propose(&tape, &store, h_alpha(&tape)).unwrap().endpoints)
        };
        g.shift_endpoints(&mut store, &[[1.0, 0.0], [0.0, -2.0]]).unwrap();
        let tape = Tape::new();
        let after = endpoint_rows(&g.propose(&tape, &store, h_alpha(&tape)).unwrap().endpoints);
        assert!((after[0][0][0] - before[0][0][0] - 1.0).abs() < 1e-12);
        assert!((after[0][1][1] - before[0][1][1] + 2.0).abs() < 1e-12);
    }
}
