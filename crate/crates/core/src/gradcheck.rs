//! Central finite-difference gradient checks.
//!
//! The numeric side only evaluates forward passes, so it is independent of
//! the backward rules it is used to verify.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Step for entries that disagree at [`FD_STEP`]: a ReLU kink closer than
/// `FD_STEP` to the evaluation point biases the wider difference.
pub const FD_FINE_STEP: f64 = 1e-7;

/// Errors above this at [`FD_STEP`] are re-measured at [`FD_FINE_STEP`].
pub const REFINE_ABOVE: f64 = 1e-6;

/// Denominator floor of the relative error, so near-zero gradients are
/// compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Largest relative error between the analytic gradient of `f` with respect to
/// the differentiable `leaves` and central differences.
pub fn max_leaf_error<F>(leaves: &[Tensor], f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = leaves.iter().map(|l| tape.variable(l)).collect();
        let loss = f(&tape, &vars)?;
        tape.grad_of(loss, &vars)?
    };
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|l| tape.constant(l)).collect();
        Ok(f(&tape, &vars)?.item())
    };
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        for j in 0..leaf.numel() {
            let orig = leaf.data()[j];
            work[li].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[li].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[li].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[li].data()[j], numeric));
        }
    }
    Ok(worst)
}

/// [`max_leaf_error`] that fails when the error exceeds `tol`.
pub fn check_leaf_gradients<F>(leaves: &[Tensor], tol: f64, f: F) -> Result<()>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let err = max_leaf_error(leaves, f)?;
    if err < tol {
        Ok(())
    } else {
        Err(Error::Contract(alloc::format!(
            "gradient relative error {err:e} exceeds {tol:e}"
        )))
    }
}

/// Result of a parameter-level gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub max_rel_error: f64,
    pub worst_param: alloc::string::String,
    pub checked: usize,
    /// Entries re-measured at [`FD_FINE_STEP`].
    pub refined: usize,
}

/// Compares `backward` against central differences for every scalar of every
/// parameter in `store`. `loss` builds the scalar loss from a store.
pub fn check_param_gradients<F>(store: &ParamStore, loss: F) -> Result<ParamCheck>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    let entries: Vec<(ParamId, usize)> = store
        .ids()
        .flat_map(|id| (0..store.value(id).numel()).map(move |j| (id, j)))
        .collect();
    check_param_entries(store, &entries, loss)
}

/// [`check_param_gradients`] restricted to `(parameter, flat index)` pairs.
pub fn check_param_entries<F>(store: &ParamStore, entries: &[(ParamId, usize)], loss: F) -> Result<ParamCheck>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let l = loss(&tape, store)?;
        tape.backward(l, store)?
    };
    let mut work = store.clone();
    let mut out = ParamCheck {
        max_rel_error: 0.0,
        worst_param: alloc::string::String::new(),
        checked: 0,
        refined: 0,
    };
    let eval = |work: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        Ok(loss(&tape, work)?.item())
    };
    for &(id, j) in entries {
        let orig = store.value(id).data()[j];
        let mut central = |h: f64| -> Result<f64> {
            work.value_mut(id).data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work.value_mut(id).data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work.value_mut(id).data_mut()[j] = orig;
            Ok((plus - minus) / (2.0 * h))
        };
        let a = analytic.get(id).data()[j];
        let mut err = relative_error(a, central(FD_STEP)?);
        if err > REFINE_ABOVE {
            out.refined += 1;
            err = err.min(relative_error(a, central(FD_FINE_STEP)?));
        }
        out.checked += 1;
        if err > out.max_rel_error || out.worst_param.is_empty() {
            out.max_rel_error = out.max_rel_error.max(err);
            out.worst_param = store.name(id).into();
        }
    }
    Ok(out)
}
