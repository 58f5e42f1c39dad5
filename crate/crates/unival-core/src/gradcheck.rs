//! Finite-difference gradient verification.
//!
//! The checker re-evaluates a forward closure at perturbed inputs and
//! compares central differences against tape gradients. It never inspects
//! the backward implementation, so it stays a fully independent oracle.
//! Checks run in f64; the default step is 1e-4.

use crate::error::{Error, Result};
use crate::params::{ParamStore, Session};
use crate::rng::CounterRng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Relative-error floor: rel = |a - n| / max(|a|, |n|, REL_FLOOR).
pub const REL_FLOOR: f64 = 1e-3;

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Worst relative error over all checked coordinates.
    pub max_rel_err: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Location of the worst error as (input index, flat coordinate).
    pub worst: Option<(usize, usize)>,
}

/// Central difference of `f` along one coordinate of one input.
pub fn central_difference<F>(inputs: &[Tensor<f64>], f: &F, input: usize, coord: usize, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |delta: f64| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == input {
                    let mut p = t.clone();
                    p.data_mut()[coord] += delta;
                    tape.leaf(p)
                } else {
                    tape.leaf(t.clone())
                }
            })
            .collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };
    Ok((eval(h)? - eval(-h)?) / (2.0 * h))
}

/// Compares tape gradients of a scalar-valued closure against central
/// differences.
///
/// `samples_per_input` bounds how many coordinates are probed per input
/// (0 means every coordinate); sampling is seeded and deterministic.
pub fn check<F>(
    inputs: &[Tensor<f64>],
    f: F,
    samples_per_input: usize,
    h: f64,
    seed: u64,
) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf_grad(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::Contract(
            "gradient check requires a scalar-valued closure".to_string(),
        ));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut rng = CounterRng::new(seed, 0xF0D1);
    let mut report = GradReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    for (i, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let coords: Vec<usize> = if samples_per_input == 0 || samples_per_input >= n {
            (0..n).collect()
        } else {
            // Sample without replacement from a seeded permutation.
            let mut all: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut all);
            all.truncate(samples_per_input);
            all
        };
        for c in coords {
            let numeric = central_difference(inputs, &f, i, c, h)?;
            let a = analytic[i][c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((i, c));
            }
        }
    }
    Ok(report)
}

/// Runs [`check`] and fails loudly when the tolerance is exceeded.
pub fn assert_close<F>(inputs: &[Tensor<f64>], f: F, samples_per_input: usize, tol: f64, seed: u64)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let report = check(inputs, f, samples_per_input, DEFAULT_STEP, seed).expect("gradcheck closure failed");
    assert!(
        report.max_rel_err <= tol,
        "gradient mismatch: max rel err {:.3e} > {tol:.1e} at {:?} ({} coords checked)",
        report.max_rel_err,
        report.worst,
        report.checked
    );
}

/// Verifies parameter gradients of a graph built through a [`Session`].
///
/// The closure constructs a scalar loss from bound parameters (payload
/// inputs are captured constants). Analytic gradients come from one
/// backward pass; numeric ones from central differences over perturbed
/// copies of the store. `samples_per_param` caps probed coordinates per
/// parameter (0 means all).
pub fn check_store<F>(
    store: &ParamStore<f64>,
    f: F,
    samples_per_param: usize,
    h: f64,
    seed: u64,
) -> Result<GradReport>
where
    F: Fn(&mut Session<'_, f64>) -> Result<Var>,
{
    let mut sess = Session::train(store);
    let loss = f(&mut sess)?;
    if !sess.tape.value(loss).is_scalar() {
        return Err(Error::Contract(
            "gradient check requires a scalar-valued closure".to_string(),
        ));
    }
    sess.tape.backward(loss)?;
    let analytic: Vec<(String, Vec<f64>)> = sess
        .bound()
        .map(|(name, var)| {
            let g = sess
                .tape
                .grad(var)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; sess.tape.value(var).numel()]);
            (name.to_string(), g)
        })
        .collect();

    let eval_at = |name: &str, coord: usize, delta: f64| -> Result<f64> {
        let mut perturbed = store.clone();
        perturbed.get_mut(name)?.data_mut()[coord] += delta;
        let mut s = Session::inference(&perturbed);
        let out = f(&mut s)?;
        s.tape.value(out).item()
    };

    let mut rng = CounterRng::new(seed, 0xF0D2);
    let mut report = GradReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    for (pi, (name, grad)) in analytic.iter().enumerate() {
        let n = grad.len();
        let coords: Vec<usize> = if samples_per_param == 0 || samples_per_param >= n {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut all);
            all.truncate(samples_per_param);
            all
        };
        for c in coords {
            let numeric = (eval_at(name, c, h)? - eval_at(name, c, -h)?) / (2.0 * h);
            let a = grad[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((pi, c));
            }
        }
    }
    Ok(report)
}

/// Convenience: random test tensor with entries in [-0.5, 0.5).
pub fn random_tensor(shape: Vec<usize>, rng: &mut CounterRng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.next_f64() - 0.5)
}

/// Casts f32 tensors up to f64 for checking a graph built in f32.
pub fn to_f64<S: Scalar>(t: &Tensor<S>) -> Tensor<f64> {
    t.cast()
}
