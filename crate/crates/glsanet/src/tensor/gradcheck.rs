//! Finite-difference gradient oracle.
//!
//! Analytic gradients come from the `f32` tape; the reference derivative is a
//! central difference evaluated on the `f64` shadow path (the same operations
//! instantiated at 64-bit precision), so the difference quotient is not
//! drowned by single-precision rounding.

use super::{Scalar, Tape, Tensor, TensorId};
use crate::error::Result;
use crate::rng::SplitMix64;

/// One differentiable computation under test. `build` must construct the same
/// graph for any scalar type; the harness reduces a non-scalar output to a
/// scalar with a fixed random linear probe.
pub trait GradCase {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, inputs: &[TensorId]) -> Result<TensorId>;
}

#[derive(Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Relative error with the denominator floored at 1, i.e.
/// `|analytic - reference| / max(1, |reference|)`.
pub fn rel_err(analytic: f64, reference: f64) -> f64 {
    (analytic - reference).abs() / reference.abs().max(1.0)
}

/// Check the reverse-mode gradients of `case` against central differences.
///
/// * `shapes`/`data`: one entry per input; every input is differentiated.
/// * `step`: central-difference step (1e-3 unless a test says otherwise).
/// * `probe_seed`: seeds the linear probe that reduces vector outputs.
pub fn check_case<C: GradCase>(
    case: &C,
    shapes: &[Vec<usize>],
    data: &[Vec<f64>],
    step: f64,
    probe_seed: u64,
) -> Result<GradReport> {
    assert_eq!(shapes.len(), data.len());

    // Forward once in f64 to size the probe.
    let probe = {
        let mut tape = Tape::<f64>::new();
        let ids = register::<f64>(&mut tape, shapes, data, false)?;
        let out = case.build(&mut tape, &ids)?;
        let mut rng = SplitMix64::new(probe_seed);
        (0..tape.numel(out)).map(|_| rng.next_range(-1.0, 1.0)).collect::<Vec<f64>>()
    };

    // Analytic gradients on the f32 path.
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::<f32>::new();
        let ids = register::<f32>(&mut tape, shapes, data, true)?;
        let out = case.build(&mut tape, &ids)?;
        let loss = probe_reduce(&mut tape, out, &probe)?;
        tape.backward(loss)?;
        ids.iter()
            .map(|&id| match tape.grad(id) {
                Some(g) => g.iter().map(|&v| v as f64).collect(),
                None => vec![0.0; tape.numel(id)],
            })
            .collect()
    };

    // Central differences on the f64 shadow path.
    let eval = |data: &[Vec<f64>]| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let ids = register::<f64>(&mut tape, shapes, data, false)?;
        let out = case.build(&mut tape, &ids)?;
        let loss = probe_reduce(&mut tape, out, &probe)?;
        Ok(tape.scalar_value(loss))
    };

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut work = data.to_vec();
    for (input, grads) in analytic.iter().enumerate() {
        for e in 0..work[input].len() {
            let orig = work[input][e];
            work[input][e] = orig + step;
            let up = eval(&work)?;
            work[input][e] = orig - step;
            let down = eval(&work)?;
            work[input][e] = orig;
            let fd = (up - down) / (2.0 * step);
            max_rel = max_rel.max(rel_err(grads[e], fd));
            checked += 1;
        }
    }
    Ok(GradReport { max_rel_err: max_rel, checked })
}

fn register<T: Scalar>(
    tape: &mut Tape<T>,
    shapes: &[Vec<usize>],
    data: &[Vec<f64>],
    requires_grad: bool,
) -> Result<Vec<TensorId>> {
    shapes
        .iter()
        .zip(data)
        .map(|(shape, values)| {
            let cast: Vec<T> = values.iter().map(|&v| T::from_f64(v)).collect();
            let mut t = Tensor::new(shape.clone(), cast)?;
            t.requires_grad = requires_grad;
            Ok(tape.leaf(&t))
        })
        .collect()
}

/// Reduce `out` to a scalar with the fixed probe: `sum(probe .* out)`.
fn probe_reduce<T: Scalar>(tape: &mut Tape<T>, out: TensorId, probe: &[f64]) -> Result<TensorId> {
    if tape.numel(out) == 1 && tape.shape(out).is_empty() {
        return Ok(out);
    }
    let shape = tape.shape(out).to_vec();
    let cast: Vec<T> = probe.iter().map(|&v| T::from_f64(v)).collect();
    let w = tape.leaf(&Tensor::new(shape, cast)?);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum_all(prod))
}

/// Uniform test data in [-1, 1] for a list of shapes.
pub fn random_inputs(shapes: &[Vec<usize>], seed: u64) -> Vec<Vec<f64>> {
    let mut rng = SplitMix64::new(seed);
    shapes
        .iter()
        .map(|s| (0..s.iter().product::<usize>()).map(|_| rng.next_range(-1.0, 1.0)).collect())
        .collect()
}
