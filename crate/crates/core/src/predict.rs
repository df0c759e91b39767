//! Stylized prediction: interpolation keels, interaction features and the
//! deterministic and stochastic trajectory heads.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::context::RepresentationEmbedder;
use crate::data::Point;
use crate::error::{Error, Result};
use crate::nn::{Activation, Dense, Mlp};
use crate::param::ParamStore;
use crate::tape::{Tape, Var};
use crate::transformer::Transformer;

/// Straight line from one step past `x_last` to `d`, `pred_len` rows; the
/// last row is `d` exactly.
pub fn linear_interpolation(x_last: Point, d: Point, pred_len: usize) -> Vec<Point> {
    (1..=pred_len)
        .map(|t| {
            if t == pred_len {
                return d;
            }
            let a = t as f64 / pred_len as f64;
            [x_last[0] + a * (d[0] - x_last[0]), x_last[1] + a * (d[1] - x_last[1])]
        })
        .collect()
}

/// Keels for a batch: `endpoints` is `[B x 2]`, `x_last` holds one point per
/// row; the result is `[B x pred_len x 2]`, differentiable in the endpoints
/// and equal to [`linear_interpolation`] row by row.
pub fn keel_batch<'t>(tape: &'t Tape, endpoints: Var<'t>, x_last: &[Point], pred_len: usize) -> Result<Var<'t>> {
    let b = endpoints.shape()[0];
    if x_last.len() != b || pred_len == 0 {
        return Err(Error::Contract(format!(
            "keel needs one origin per endpoint and pred_len >= 1 ({} origins, {b} endpoints)",
            x_last.len()
        )));
    }
    if pred_len == 1 {
        return endpoints.reshape(&[b, 1, 2]);
    }
    let inner = pred_len - 1;
    let mut weights = Vec::with_capacity(b * inner * 2);
    let mut origins = Vec::with_capacity(b * inner * 2);
    for x in x_last {
        for t in 1..=inner {
            let a = t as f64 / pred_len as f64;
            weights.extend_from_slice(&[a, a]);
            origins.extend_from_slice(x);
        }
    }
    let origins = tape.constant_from(&[b * inner, 2], origins)?;
    let body = endpoints
        .repeat_interleave(inner)?
        .sub(origins)?
        .elementwise_mul(tape.constant_from(&[b * inner, 2], weights)?)?
        .add(origins)?
        .reshape(&[b, 2 * inner])?;
    Var::concat_lastaxis(&[body, endpoints])?.reshape(&[b, pred_len, 2])
}

/// `f_k` embedder and interaction Transformer shared by all channels.
#[derive(Debug, Clone)]
pub struct InteractionNet {
    pub embed: RepresentationEmbedder,
    pub tran_i: Transformer,
}

impl InteractionNet {
    /// `x_obs` is `[B x t_h x 2]`, `endpoints` `[B x 2]`, `ctx` the
    /// `[B x (t_h + 1) x patch^2]` context sequence and `keel`
    /// `[B x t_f x 2]`. Returns `h_beta` as `[B x t_f x d]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x_obs: Var<'t>,
        endpoints: Var<'t>,
        ctx: Var<'t>,
        keel: Var<'t>,
    ) -> Result<Var<'t>> {
        let s = x_obs.shape();
        let (b, t_h) = (s[0], s[1]);
        let seq = Var::concat_lastaxis(&[x_obs.reshape(&[b, 2 * t_h])?, endpoints])?.reshape(&[b, t_h + 1, 2])?;
        let f_k = self.embed.forward(tape, store, seq, ctx)?.f;
        self.tran_i.forward(tape, store, f_k, keel)
    }
}

/// `MLP_d`: per-step map from `h_beta` to coordinates.
#[derive(Debug, Clone, Copy)]
pub struct DeterministicHead {
    pub mlp: Mlp,
}

impl DeterministicHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, name, d, d, 2, Activation::Relu, rng)?,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, h_beta: Var<'t>) -> Result<Var<'t>> {
        self.mlp.forward(tape, store, h_beta)
    }
}

/// `MLP_g`: a Gaussian encoding head over `h_beta` and a decoder of the
/// reparameterized latent concatenated with `h_beta`.
#[derive(Debug, Clone, Copy)]
pub struct StochasticHead {
    pub mu: Dense,
    pub logvar: Dense,
    pub decoder: Mlp,
    pub latent_dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct StochasticOutput<'t> {
    pub mu: Var<'t>,
    pub logvar: Var<'t>,
    pub sample: Var<'t>,
    pub trajectory: Var<'t>,
}

impl StochasticHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, latent_dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            mu: Dense::new(store, &format!("{name}.mu"), d, latent_dim, Activation::Identity, rng)?,
            logvar: Dense::new(store, &format!("{name}.logvar"), d, latent_dim, Activation::Identity, rng)?,
            decoder: Mlp::new(store, &format!("{name}.dec"), d + latent_dim, d, 2, Activation::Relu, rng)?,
            latent_dim,
        })
    }

    /// `z` must match `h_beta`'s leading axes with `latent_dim` features.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, h_beta: Var<'t>, z: Var<'t>) -> Result<StochasticOutput<'t>> {
        let mu = self.mu.forward(tape, store, h_beta)?;
        let logvar = self.logvar.forward(tape, store, h_beta)?;
        if z.shape() != mu.shape() {
            return Err(Error::Contract(format!(
                "noise shape {:?} does not match latent shape {:?}",
                z.shape(),
                mu.shape()
            )));
        }
        let sample = mu.add(logvar.scale(0.5).exp().elementwise_mul(z)?)?;
        let trajectory = self
            .decoder
            .forward(tape, store, Var::concat_lastaxis(&[h_beta, sample])?)?;
        Ok(StochasticOutput {
            mu,
            logvar,
            sample,
            trajectory,
        })
    }
}

/// `0.5 * sum(mu^2 + exp(logvar) - logvar - 1)` per sample (first axis),
/// averaged over samples.
pub fn kl_loss<'t>(mu: Var<'t>, logvar: Var<'t>) -> Result<Var<'t>> {
    if mu.shape() != logvar.shape() {
        return Err(Error::Contract(format!(
            "kl_loss shapes differ: {:?} vs {:?}",
            mu.shape(),
            logvar.shape()
        )));
    }
    let batch = mu.shape().first().copied().unwrap_or(1);
    let terms = mu.elementwise_mul(mu)?.add(logvar.exp())?.sub(logvar)?.add_scalar(-1.0);
    Ok(terms.sum().scale(0.5 / batch as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::transformer::TransformerConfig;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn interpolation_cases() {
        let k = linear_interpolation([0.0, 0.0], [12.0, 0.0], 12);
        for (t, p) in k.iter().enumerate() {
            assert_eq!(*p, [(t + 1) as f64, 0.0]);
        }
        assert!(linear_interpolation([3.0, -1.0], [3.0, -1.0], 5).iter().all(|p| *p == [3.0, -1.0]));
        assert_eq!(linear_interpolation([1.0, 1.0], [2.0, 3.0], 2), vec![[1.5, 2.0], [2.0, 3.0]]);
    }

    #[test]
    fn keel_endpoint_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let x = [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)];
            let d = [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)];
            let n = rng.gen_range(1..40);
            assert_eq!(*linear_interpolation(x, d, n).last().unwrap(), d);
        }
    }

    #[test]
    fn keel_batch_matches_pointwise() {
        let tape = Tape::new();
        let ends = [[2.0, 3.0], [-1.5, 0.25]];
        let origins = [[1.0, 1.0], [0.3, -0.7]];
        let e = tape.constant(&Tensor::from_points(&ends).unwrap());
        let k = keel_batch(&tape, e, &origins, 7).unwrap().value();
        assert_eq!(k.shape(), &[2, 7, 2]);
        for b in 0..2 {
            let want: Vec<f64> = linear_interpolation(origins[b], ends[b], 7).iter().flatten().copied().collect();
            assert_eq!(&k.data()[b * 14..(b + 1) * 14], &want[..]);
        }
    }

    fn net(rng: &mut ChaCha8Rng, store: &mut ParamStore) -> InteractionNet {
        let cfg = TransformerConfig {
            num_layers: 1,
            num_heads: 2,
            model_dim: 8,
            mlp_hidden: 16,
            input_dim: 8,
            target_dim: 2,
            output_dim: 8,
        };
        InteractionNet {
            embed: RepresentationEmbedder::new(store, "rep2", 8, 3, rng).unwrap(),
            tran_i: Transformer::new(store, "tran_i", cfg, rng).unwrap(),
        }
    }

    fn h_beta_for<'t>(tape: &'t Tape, store: &ParamStore, n: &InteractionNet, ends: &[Point]) -> Var<'t> {
        let b = ends.len();
        let obs: Vec<f64> = (0..b).flat_map(|_| (0..8).map(|i| 0.1 * i as f64 - 0.4)).collect();
        let x = tape.constant_from(&[b, 4, 2], obs).unwrap();
        let e = tape.constant(&Tensor::from_points(ends).unwrap());
        let c = tape.constant(&Tensor::full(&[b, 5, 9], 0.2));
        let keel = keel_batch(tape, e, &vec![[0.0, 0.0]; b], 6).unwrap();
        n.forward(tape, store, x, e, c, keel).unwrap()
    }

    #[test]
    fn interaction_shapes_sharing_and_sensitivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let n = net(&mut rng, &mut store);
        let tape = Tape::new();
        let h = h_beta_for(&tape, &store, &n, &[[1.0, 2.0], [1.0, 2.0], [3.0, -1.0]]).value();
        assert_eq!(h.shape(), &[3, 6, 8]);
        let block = 6 * 8;
        assert_eq!(h.data()[..block], h.data()[block..2 * block]);
        assert_ne!(h.data()[..block], h.data()[2 * block..]);
    }

    #[test]
    fn deterministic_head_shapes_and_zero_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store = ParamStore::new();
        let head = DeterministicHead::new(&mut store, "mlp_d", 8, &mut rng).unwrap();
        let tape = Tape::new();
        let y = head.forward(&tape, &store, tape.constant(&Tensor::zeros(&[20, 12, 8]))).unwrap();
        assert_eq!(y.shape(), vec![20, 12, 2]);
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_loss_gradients_reach_head_and_backbone() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut store = ParamStore::new();
        let n = net(&mut rng, &mut store);
        let head = DeterministicHead::new(&mut store, "mlp_d", 8, &mut rng).unwrap();
        let target: Vec<f64> = (0..12).map(|i| 0.2 * i as f64).collect();
        let check = crate::gradcheck::check_param_gradients(&store, |tape, store| {
            let h = h_beta_for(tape, store, &n, &[[1.0, 0.5]]);
            let y = head.forward(tape, store, h)?;
            Ok(y.sub(tape.constant_from(&[1, 6, 2], target.clone())?)?
                .reshape(&[6, 2])?
                .l2_norm_rows()
                .mean())
        })
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
        let tape = Tape::new();
        let h = h_beta_for(&tape, &store, &n, &[[1.0, 0.5]]);
        let y = head.forward(&tape, &store, h).unwrap();
        let g = tape.backward(y.sum(), &store).unwrap();
        let q = n.tran_i.encoder[0].attn.heads[0].wq;
        for id in [head.mlp.out.w, q, n.embed.traj.w] {
            assert!(g.get(id).data().iter().any(|&v| v != 0.0), "{}", store.name(id));
        }
    }

    #[test]
    fn stochastic_head_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut store = ParamStore::new();
        let head = StochasticHead::new(&mut store, "mlp_g", 8, 2, &mut rng).unwrap();
        let hb = Tensor::new(&[3, 6, 8], (0..144).map(|i| libm::sin(0.37 * i as f64)).collect()).unwrap();
        let tape = Tape::new();
        let h = tape.constant(&hb);
        let zero = head.forward(&tape, &store, h, tape.constant(&Tensor::zeros(&[3, 6, 2]))).unwrap();
        assert_eq!(zero.sample.value(), zero.mu.value());
        assert_eq!(zero.trajectory.shape(), vec![3, 6, 2]);
        let mode = head
            .decoder
            .forward(&tape, &store, Var::concat_lastaxis(&[h, zero.mu]).unwrap())
            .unwrap();
        assert_eq!(mode.value(), zero.trajectory.value());

        let z1 = tape.constant(&Tensor::full(&[3, 6, 2], 0.8));
        let z2 = tape.constant(&Tensor::full(&[3, 6, 2], -0.3));
        let a = head.forward(&tape, &store, h, z1).unwrap();
        let b = head.forward(&tape, &store, h, z2).unwrap();
        assert_ne!(a.trajectory.value(), b.trajectory.value());
        let (mu, lv, s) = (a.mu.value(), a.logvar.value(), a.sample.value());
        for i in 0..s.numel() {
            let want = mu.data()[i] + libm::exp(lv.data()[i] / 2.0) * 0.8;
            assert!((s.data()[i] - want).abs() < 1e-15);
        }
        let again = head.forward(&tape, &store, h, z1).unwrap();
        assert_eq!(again.trajectory.value(), a.trajectory.value());
    }

    #[test]
    fn kl_closed_form_cases() {
        let tape = Tape::new();
        let z = tape.constant(&Tensor::zeros(&[1, 4]));
        assert_eq!(kl_loss(z, z).unwrap().item(), 0.0);
        let one = tape.constant(&Tensor::full(&[1, 1], 1.0));
        let zero = tape.constant(&Tensor::zeros(&[1, 1]));
        assert_eq!(kl_loss(one, zero).unwrap().item(), 0.5);
        assert!(kl_loss(one, z).is_err());
    }

    /// Monte-Carlo estimate of KL(N(mu, diag e^lv) || N(0, I)) as the sample
    /// mean of log q(x) - log p(x) with x ~ q.
    fn kl_monte_carlo(mu: &[f64], lv: &[f64], n: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..n {
            let mut term = 0.0;
            for (m, l) in mu.iter().zip(lv) {
                let e: f64 = StandardNormal.sample(rng);
                let sd = libm::exp(0.5 * l);
                let x = m + sd * e;
                let log_q = -0.5 * e * e - libm::log(sd);
                let log_p = -0.5 * x * x;
                term += log_q - log_p;
            }
            sum += term;
            sum2 += term * term;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        (mean, libm::sqrt(var / n as f64))
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..3 {
            let mu: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let lv: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let tape = Tape::new();
            let kl = kl_loss(
                tape.constant_from(&[1, 3], mu.clone()).unwrap(),
                tape.constant_from(&[1, 3], lv.clone()).unwrap(),
            )
            .unwrap()
            .item();
            let (est, se) = kl_monte_carlo(&mu, &lv, 100_000, &mut rng);
            assert!((kl - est).abs() < 3.0 * se, "kl {kl} mc {est} se {se}");
        }
    }

    #[test]
    fn kl_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let tape = Tape::new();
            let mu = tape.constant_from(&[2, 3], (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
            let lv = tape.constant_from(&[2, 3], (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
            assert!(kl_loss(mu, lv).unwrap().item() >= 0.0);
        }
    }
}
