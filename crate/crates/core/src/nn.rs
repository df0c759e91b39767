//! Dense layers and small MLPs built on the tape.

use alloc::format;
use rand::Rng;

use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// `y = act(x W + b)` applied to every row of the last axis.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
    pub act: Activation,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        act: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add_uniform(format!("{name}.w"), &[inputs, outputs], inputs, rng)?;
        let b = store.add_zeros(format!("{name}.b"), &[outputs])?;
        Ok(Self {
            w,
            b,
            inputs,
            outputs,
            act,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.affine(tape.param(store, self.w), tape.param(store, self.b))?;
        Ok(self.act.apply(y))
    }
}

/// Two dense layers; the hidden layer uses `hidden_act`, the output layer is
/// linear.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub hidden: Dense,
    pub out: Dense,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        hidden: usize,
        outputs: usize,
        hidden_act: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Dense::new(store, &format!("{name}.fc1"), inputs, hidden, hidden_act, rng)?,
            out: Dense::new(store, &format!("{name}.fc2"), hidden, outputs, Activation::Identity, rng)?,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.hidden.forward(tape, store, x)?;
        self.out.forward(tape, store, h)
    }
}

/// Learned affine map after normalization: `x * gamma + beta`.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_ones(format!("{name}.gamma"), &[dim])?,
            beta: store.add_zeros(format!("{name}.beta"), &[dim])?,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_normalize()
            .mul_rows(tape.param(store, self.gamma))?
            .broadcast_rows(tape.param(store, self.beta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    #[test]
    fn dense_handles_batched_rows() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let d = Dense::new(&mut store, "d", 3, 5, Activation::Relu, &mut rng).unwrap();
        let tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[2, 4, 3], 0.5));
        assert_eq!(d.forward(&tape, &store, x).unwrap().shape(), alloc::vec![2, 4, 5]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let m = Mlp::new(&mut store, "m", 2, 8, 4, Activation::Tanh, &mut rng).unwrap();
        let tape = Tape::new();
        let y = m.forward(&tape, &store, tape.constant(&Tensor::zeros(&[3, 2]))).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }
}
