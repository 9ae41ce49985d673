//! Central finite-difference gradient checking.
//!
//! The checker only evaluates forward passes, so it is independent of the
//! backward rules it verifies. The checked scalar is `sum(w * f(inputs))`
//! with fixed pseudo-random weights `w`, which keeps gradients of
//! normalized outputs (softmax, layer norm) from vanishing identically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::DenseArray;
use super::param::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute rather than relative
/// terms.
pub const REL_ERROR_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst element
    pub worst: (usize, usize),
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Evaluates `sum(w * f(inputs))`, optionally with gradients for the inputs
/// followed by every stored parameter.
fn weighted_output<F>(
    f: &F,
    store: Option<&ParamStore<f64>>,
    inputs: &[DenseArray<f64>],
    weights: &mut Option<Vec<f64>>,
    seed: u64,
    with_grads: bool,
) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut tape = match store {
        Some(s) => Tape::with_params(s),
        None => Tape::new(),
    };
    let vars = inputs
        .iter()
        .map(|x| tape.input(x.clone()))
        .collect::<Result<Vec<_>>>()?;
    let y = f(&mut tape, &vars)?;
    let n = tape.value(y).numel();
    let w = weights.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    });
    let wv = tape.constant(DenseArray::new(tape.shape(y).to_vec(), w.clone())?)?;
    let prod = tape.mul(y, wv)?;
    let loss = tape.sum(prod)?;
    let value = tape.value(loss).data()[0];
    if !with_grads {
        return Ok((value, Vec::new()));
    }
    let grads = tape.backward(loss)?;
    let mut all: Vec<Vec<f64>> = vars
        .iter()
        .map(|&x| {
            grads
                .wrt(x)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(x).numel()])
        })
        .collect();
    if let Some(s) = store {
        for (id, p) in s.iter() {
            all.push(
                grads
                    .param(id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.value.numel()]),
            );
        }
    }
    Ok((value, all))
}

/// Compares backward-pass gradients of `f` with central differences for
/// every element of every input.
pub fn check_gradients<F>(inputs: &[DenseArray<f64>], seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    check(None, inputs, seed, f)
}

/// Like [`check_gradients`], additionally checking every parameter in
/// `store`. Parameter indices in the report follow the inputs.
pub fn check_gradients_with_params<F>(
    store: &ParamStore<f64>,
    inputs: &[DenseArray<f64>],
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    check(Some(store), inputs, seed, f)
}

fn check<F>(store: Option<&ParamStore<f64>>, inputs: &[DenseArray<f64>], seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut weights = None;
    let (_, analytic) = weighted_output(&f, store, inputs, &mut weights, seed, true)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut record = |ii: usize, j: usize, numeric: f64| {
        let err = relative_error(analytic[ii][j], numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = (ii, j);
        }
        report.checked += 1;
    };

    let mut perturbed = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            perturbed[ii].data_mut()[j] = orig + FD_STEP;
            let (plus, _) = weighted_output(&f, store, &perturbed, &mut weights, seed, false)?;
            perturbed[ii].data_mut()[j] = orig - FD_STEP;
            let (minus, _) = weighted_output(&f, store, &perturbed, &mut weights, seed, false)?;
            perturbed[ii].data_mut()[j] = orig;
            record(ii, j, (plus - minus) / (2.0 * FD_STEP));
        }
    }

    if let Some(store) = store {
        let mut shifted = store.clone();
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (k, id) in ids.into_iter().enumerate() {
            for j in 0..store.value(id).numel() {
                let orig = store.value(id).data()[j];
                shifted.get_mut(id).value.data_mut()[j] = orig + FD_STEP;
                let (plus, _) = weighted_output(&f, Some(&shifted), inputs, &mut weights, seed, false)?;
                shifted.get_mut(id).value.data_mut()[j] = orig - FD_STEP;
                let (minus, _) = weighted_output(&f, Some(&shifted), inputs, &mut weights, seed, false)?;
                shifted.get_mut(id).value.data_mut()[j] = orig;
                record(inputs.len() + k, j, (plus - minus) / (2.0 * FD_STEP));
            }
        }
    }
    Ok(report)
}
