#![allow(dead_code)]

use qbert_core::rng;
use qbert_core::tensor::{Tape, Tensor, Var};
use rand::Rng as _;

pub const STEP: f64 = 1e-5;

/// Relative error with a unit-scale floor, so gradients near zero are held
/// to an absolute tolerance instead of amplifying rounding noise.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

pub fn random_vec(seed: u64, n: usize, scale: f64) -> Vec<f64> {
    let mut r = rng::seeded(seed);
    (0..n).map(|_| r.random_range(-scale..scale)).collect()
}

/// Compares analytic gradients of `f` against central differences on
/// `probes` random input coordinates. `f` records a scalar loss from the
/// input leaves. Returns the worst relative error seen.
pub fn check_grads<F>(inputs: &[Tensor], probes: usize, seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let run = |vals: &[Tensor]| -> (f64, Vec<Option<Vec<f64>>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone().trainable())).collect();
        let loss = f(&mut tape, &vars);
        let value = tape.data(loss)[0];
        tape.backward(loss).unwrap();
        (value, vars.iter().map(|&v| tape.take_grad(v)).collect())
    };
    let (_, grads) = run(inputs);
    let mut r = rng::seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let which = r.random_range(0..inputs.len());
        let k = r.random_range(0..inputs[which].numel());
        let analytic = grads[which].as_ref().map_or(0.0, |g| g[k]);
        let mut plus = inputs.to_vec();
        plus[which].data_mut()[k] += STEP;
        let mut minus = inputs.to_vec();
        minus[which].data_mut()[k] -= STEP;
        let numeric = (run(&plus).0 - run(&minus).0) / (2.0 * STEP);
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}

/// Collapses any tensor into a scalar with fixed pseudo-random weights, so
/// every output coordinate influences the loss differently.
pub fn weighted_sum(tape: &mut Tape, x: Var) -> Var {
    let n = tape.value(x).numel();
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(shape, random_vec(991, n, 1.0)).unwrap();
    let p = tape.mul(x, w).unwrap();
    tape.sum(p)
}
